use proptest::prelude::*;
use segkit::rng::SplitMix64;
use segkit::{Graph, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn softmax_sums_to_one(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, mag in 1e-3f64..1e4) {
        let mut rng = SplitMix64::new(seed);
        let x = Tensor::from_fn(&[rows, cols], |_| rng.uniform(-mag, mag));
        for axis in 0..2 {
            let mut g = Graph::<f64>::new();
            let v = g.constant(&x);
            let s = g.softmax(v, axis).unwrap();
            let y = g.value(s);
            let (outer, inner) = if axis == 1 { (rows, cols) } else { (cols, rows) };
            for o in 0..outer {
                let total: f64 = (0..inner)
                    .map(|i| if axis == 1 { y.data()[o * cols + i] } else { y.data()[i * cols + o] })
                    .sum();
                prop_assert!((total - 1.0).abs() <= 1e-6, "axis {axis}: {total}");
            }
        }
        // same in f32
        let x32: Tensor<f32> = x.cast();
        let mut g = Graph::<f32>::new();
        let v = g.constant(&x32);
        let s = g.softmax(v, 1).unwrap();
        for o in 0..rows {
            let total: f64 = g.value(s).data()[o * cols..(o + 1) * cols].iter().map(|&v| v as f64).sum();
            prop_assert!((total - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn repeated_backward_is_identical(seed in any::<u64>()) {
        let mut rng = SplitMix64::new(seed);
        let mut a = Tensor::from_fn(&[3, 4], |_| rng.uniform(-1.0, 1.0)).with_requires_grad(true);
        let b = Tensor::from_fn(&[4, 2], |_| rng.uniform(-1.0, 1.0));
        let mut g = Graph::<f64>::new();
        let av = g.leaf(&a);
        let bv = g.constant(&b);
        let m = g.matmul(av, bv).unwrap();
        let r = g.sigmoid(m);
        let loss = g.mean(r);
        let first = g.backward(loss).unwrap().get(av).unwrap().to_vec();
        a.accumulate_grad(&first);
        let acc1 = a.grad().unwrap().to_vec();
        a.zero_grad();
        let second = g.backward(loss).unwrap().get(av).unwrap().to_vec();
        a.accumulate_grad(&second);
        prop_assert_eq!(&first, &second);
        prop_assert_eq!(acc1, a.grad().unwrap().to_vec());
    }
}
