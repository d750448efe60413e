use proptest::prelude::*;
use segkit::dataio::Mask;
use segkit::metrics::{weighted_miou, ConfusionMatrix, RobotWeights};
use segkit::rng::SplitMix64;
use std::collections::BTreeMap;

const K: usize = 9;
const IGNORE: u8 = 255;

fn random_mask(rng: &mut SplitMix64, h: usize, w: usize, ignore_p: f64) -> Mask {
    let labels = (0..h * w).map(|_| if rng.chance(ignore_p) { IGNORE } else { rng.below(K) as u8 }).collect();
    Mask { height: h, width: w, labels }
}

/// Set counting per class straight from the pixels, skipping classes whose
/// union is empty; the per-class fractions are added as exact rationals.
fn brute_miou(pred: &Mask, gt: &Mask, excluded: &[usize]) -> f64 {
    let (mut num, mut den) = (0u128, 1u128);
    let mut n = 0u128;
    for k in (0..K).filter(|k| !excluded.contains(k)) {
        let valid = |i: usize| gt.labels[i] != IGNORE;
        let inter = (0..gt.labels.len()).filter(|&i| valid(i) && gt.labels[i] == k as u8 && pred.labels[i] == k as u8).count() as u128;
        let union = (0..gt.labels.len()).filter(|&i| valid(i) && (gt.labels[i] == k as u8 || pred.labels[i] == k as u8)).count() as u128;
        if union > 0 {
            num = num * union + inter * den;
            den *= union;
            let g = gcd(num, den);
            num /= g;
            den /= g;
            n += 1;
        }
    }
    den *= n;
    let g = gcd(num, den);
    (num / g) as f64 / (den / g) as f64
}

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 { a.max(1) } else { gcd(b, a % b) }
}

#[test]
fn matches_pixel_counting_on_100_pairs() {
    let mut rng = SplitMix64::new(99);
    for trial in 0..100 {
        let gt = random_mask(&mut rng, 16, 16, 0.1);
        let pred = random_mask(&mut rng, 16, 16, 0.0);
        let mut cm = ConfusionMatrix::new(K);
        cm.update(&pred, &gt, IGNORE).unwrap();
        let excluded = if trial % 2 == 0 { vec![] } else { vec![8] };
        assert_eq!(cm.miou(&excluded).unwrap(), brute_miou(&pred, &gt, &excluded), "trial {trial}");
    }
}

#[test]
fn worked_two_by_two() {
    let gt = Mask { height: 2, width: 2, labels: vec![0, 0, 1, 1] };
    let pred = Mask { height: 2, width: 2, labels: vec![0, 1, 1, 1] };
    let mut cm = ConfusionMatrix::new(2);
    cm.update(&pred, &gt, IGNORE).unwrap();
    assert_eq!(cm.class_iou(0).unwrap(), Some(0.5));
    assert_eq!(cm.class_iou(1).unwrap(), Some(2.0 / 3.0));
    assert_eq!(cm.miou(&[]).unwrap(), 7.0 / 12.0);
}

#[test]
fn robot_weights_and_hand_example() {
    let w = RobotWeights::goose();
    let total: f64 = w.iter().map(|(_, v)| v).sum();
    assert!((total - 1.0).abs() <= 1e-9);
    let per: BTreeMap<String, f64> =
        [("MuCAR-3", 0.9), ("ALICE", 0.8), ("Spot v2", 0.7), ("Spot v1", 0.6)].map(|(k, v)| (k.to_string(), v)).into();
    assert!((weighted_miou(&per, &w).unwrap() - 0.855).abs() <= 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn accumulation_order_does_not_matter(seed in any::<u64>(), parts in 1usize..6) {
        let mut rng = SplitMix64::new(seed);
        let pairs: Vec<(Mask, Mask)> =
            (0..parts).map(|_| (random_mask(&mut rng, 4, 5, 0.0), random_mask(&mut rng, 4, 5, 0.2))).collect();
        let mut fwd = ConfusionMatrix::new(K);
        for (p, g) in &pairs {
            fwd.update(p, g, IGNORE).unwrap();
        }
        let mut rev = ConfusionMatrix::new(K);
        for (p, g) in pairs.iter().rev() {
            rev.update(p, g, IGNORE).unwrap();
        }
        // pixel-level shuffle of one big mask pair
        let mut px: Vec<(u8, u8)> = pairs.iter().flat_map(|(p, g)| p.labels.iter().copied().zip(g.labels.iter().copied())).collect();
        rng.shuffle(&mut px);
        let (pl, gl): (Vec<u8>, Vec<u8>) = px.into_iter().unzip();
        let mut shuffled = ConfusionMatrix::new(K);
        let n = pl.len();
        shuffled
            .update(&Mask { height: 1, width: n, labels: pl }, &Mask { height: 1, width: n, labels: gl }, IGNORE)
            .unwrap();
        prop_assert_eq!(fwd.counts(), rev.counts());
        prop_assert_eq!(fwd.counts(), shuffled.counts());
    }

    #[test]
    fn iou_bounds_and_relabel_invariance(seed in any::<u64>(), excl in proptest::option::of(0usize..K)) {
        let mut rng = SplitMix64::new(seed);
        let gt = random_mask(&mut rng, 8, 8, 0.1);
        let pred = random_mask(&mut rng, 8, 8, 0.0);
        let excluded: Vec<usize> = excl.into_iter().collect();
        let mut cm = ConfusionMatrix::new(K);
        cm.update(&pred, &gt, IGNORE).unwrap();
        for k in 0..K {
            if let Some(v) = cm.class_iou(k).unwrap() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
        let mut perm: Vec<u8> = (0..K as u8).collect();
        rng.shuffle(&mut perm);
        let relabel = |m: &Mask| Mask {
            labels: m.labels.iter().map(|&l| if l == IGNORE { l } else { perm[l as usize] }).collect(),
            ..m.clone()
        };
        let mut cm2 = ConfusionMatrix::new(K);
        cm2.update(&relabel(&pred), &relabel(&gt), IGNORE).unwrap();
        let excluded2: Vec<usize> = excluded.iter().map(|&k| perm[k] as usize).collect();
        let (a, b) = (cm.miou(&excluded).unwrap(), cm2.miou(&excluded2).unwrap());
        // same terms, possibly summed in another order
        prop_assert!((a - b).abs() <= 1e-12);
    }
}
