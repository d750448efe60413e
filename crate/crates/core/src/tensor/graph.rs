use std::rc::Rc;

use super::kernels::{self, ConvGeom, Tap};
use super::{mismatch, Element, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How SymNorm symmetrizes its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Symmetrize {
    /// `(2A + Aᵀ) / 2`, as printed.
    #[default]
    Literal,
    /// `(A + Aᵀ) / 2`.
    Average,
}

/// What goes on the diagonal of the normalizer `D`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Degree {
    /// Diagonal entries of the symmetrized matrix.
    #[default]
    Diagonal,
    /// Row sums of the symmetrized matrix.
    RowSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SymNormVariant {
    pub symmetrize: Symmetrize,
    pub degree: Degree,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulScalarVar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Gram(Var),
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    OffsetConv { input: Var, kernel: Var, taps_var: Var, taps: Vec<Tap<T>>, geom: ConvGeom },
    AddRowBias(Var, Var),
    MulRow(Var, Var),
    AddChannelBias(Var, Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, rstd: Vec<T>, cols: usize },
    CrossEntropy { logits: Var, probs: Vec<T>, coeffs: Vec<T>, targets: Rc<[usize]>, k: usize, hw: usize },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Gather(Var, Rc<[usize]>),
    Concat { parts: Vec<Var>, outer: usize, inners: Vec<usize> },
    Rotary { x: Var, cos: Rc<[T]>, sin: Rc<[T]> },
    SymNorm { a: Var, variant: SymNormVariant, s: Vec<T>, r: Vec<T>, active: Vec<bool> },
    AvgPool { x: Var, k: usize, n: usize, c: usize, h: usize, w: usize },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of executed operations. Nodes are appended in execution order, so the
/// record is already topologically sorted and backward is one reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`, zeros when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![T::zero(); len])
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if a != b {
        return Err(mismatch(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn rank2(op: &'static str, s: &[usize]) -> Result<(usize, usize), TensorError> {
    match s {
        [m, n] => Ok((*m, *n)),
        _ => Err(mismatch(op, format!("expected rank 2, got {s:?}"))),
    }
}

fn rank4(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize), TensorError> {
    match s {
        [a, b, c, d] => Ok((*a, *b, *c, *d)),
        _ => Err(mismatch(op, format!("expected rank 4, got {s:?}"))),
    }
}


impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let value = Tensor { shape, data, grad: None, requires_grad: needs_grad };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Records a leaf. Gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a leaf that always receives a gradient.
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.data(a).iter().map(|&x| x * c).collect();
        self.push(self.shape(a).to_vec(), data, Op::Scale(a, c), self.ng(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let data = self.data(a).iter().map(|&x| x + c).collect();
        self.push(self.shape(a).to_vec(), data, Op::AddScalar(a), self.ng(a))
    }

    /// `x * s` where `s` is a one-element tensor on the graph.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var, TensorError> {
        if self.value(s).numel() != 1 {
            return Err(mismatch("mul_scalar_var", format!("scale has shape {:?}", self.shape(s))));
        }
        let sv = self.data(s)[0];
        let data = self.data(x).iter().map(|&v| v * sv).collect();
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(self.shape(x).to_vec(), data, Op::MulScalarVar(x, s), ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        self.push(self.shape(a).to_vec(), data, Op::Relu(a), self.ng(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(self.shape(a).to_vec(), data, Op::Sigmoid(a), self.ng(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = rank2("matmul", self.shape(a))?;
        let (k2, n) = rank2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(mismatch("matmul", format!("inner extents {k} and {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_acc(self.data(a), self.data(b), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let (m, n) = rank2("transpose", self.shape(a))?;
        let src = self.data(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(a), self.ng(a)))
    }

    /// `F · Fᵀ`, upper triangle computed once and mirrored so the result is
    /// exactly symmetric.
    pub fn gram(&mut self, f: Var) -> Result<Var, TensorError> {
        let (t, c) = rank2("gram", self.shape(f))?;
        let src = self.data(f);
        let mut out = vec![T::zero(); t * t];
        for i in 0..t {
            for j in i..t {
                let mut s = T::zero();
                for k in 0..c {
                    s += src[i * c + k] * src[j * c + k];
                }
                out[i * t + j] = s;
                out[j * t + i] = s;
            }
        }
        Ok(self.push(vec![t, t], out, Op::Gram(f), self.ng(f)))
    }

    fn conv_geom(
        &self,
        op: &'static str,
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    ) -> Result<ConvGeom, TensorError> {
        let (n, cin, h, w) = rank4(op, self.shape(input))?;
        let (cout, cin2, kh, kw) = rank4(op, self.shape(kernel))?;
        if cin != cin2 {
            return Err(mismatch(op, format!("input has {cin} channels, kernel expects {cin2}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(mismatch(op, format!("kernel extents must be odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument { op, detail: "stride must be >= 1".into() });
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TensorError::NegativeOutputExtent { op });
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvGeom { n, cin, h, w, cout, kh, kw, stride, pad: padding, oh, ow })
    }

    /// Zero-padded 2-D cross-correlation over NCHW input.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var, TensorError> {
        let geom = self.conv_geom("conv2d", input, kernel, stride, padding)?;
        let out = kernels::conv2d_forward(&geom, self.data(input), self.data(kernel));
        let ng = self.ng(input) || self.ng(kernel);
        Ok(self.push(vec![geom.n, geom.cout, geom.oh, geom.ow], out, Op::Conv2d { input, kernel, geom }, ng))
    }

    /// Convolution whose taps sample the input at `p + p_i + Δp_i` with
    /// bilinear interpolation and zero fill outside the image.
    ///
    /// `taps` is `[kh*kw, 2]` holding `(dy, dx)` per tap in row-major tap
    /// order. Each component is clamped to `[-k, k]` for the kernel extent on
    /// that axis. Output keeps the input's spatial size.
    pub fn offset_conv(&mut self, input: Var, kernel: Var, taps_var: Var) -> Result<Var, TensorError> {
        let (n, cin, h, w) = rank4("offset_conv", self.shape(input))?;
        let (cout, cin2, kh, kw) = rank4("offset_conv", self.shape(kernel))?;
        if cin != cin2 {
            return Err(mismatch("offset_conv", format!("input has {cin} channels, kernel expects {cin2}")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(mismatch("offset_conv", format!("kernel extents must be odd, got {kh}x{kw}")));
        }
        let geom = ConvGeom { n, cin, h, w, cout, kh, kw, stride: 1, pad: kh / 2, oh: h, ow: w };
        if self.shape(taps_var) != [kh * kw, 2] {
            return Err(mismatch(
                "offset_conv",
                format!("tap offsets must be [{}, 2], got {:?}", kh * kw, self.shape(taps_var)),
            ));
        }
        if !self.value(taps_var).is_finite() {
            return Err(TensorError::NonfiniteOffset);
        }
        let taps = kernels::make_taps(kh, kw, self.data(taps_var));
        let out = offset_conv_forward(&geom, &taps, self.data(input), self.data(kernel));
        let ng = self.ng(input) || self.ng(kernel) || self.ng(taps_var);
        Ok(self.push(
            vec![geom.n, geom.cout, geom.h, geom.w],
            out,
            Op::OffsetConv { input, kernel, taps_var, taps, geom },
            ng,
        ))
    }

    /// `x[m,n] + b[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (_, n) = rank2("add_row_bias", self.shape(x))?;
        if self.value(b).numel() != n {
            return Err(mismatch("add_row_bias", format!("bias {:?} for {n} columns", self.shape(b))));
        }
        let bv = self.data(b);
        let data = self.data(x).iter().enumerate().map(|(i, &v)| v + bv[i % n]).collect();
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(self.shape(x).to_vec(), data, Op::AddRowBias(x, b), ng))
    }

    /// `x[m,n] * g[n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var, TensorError> {
        let (_, n) = rank2("mul_row", self.shape(x))?;
        if self.value(g).numel() != n {
            return Err(mismatch("mul_row", format!("gain {:?} for {n} columns", self.shape(g))));
        }
        let gv = self.data(g);
        let data = self.data(x).iter().enumerate().map(|(i, &v)| v * gv[i % n]).collect();
        let ng = self.ng(x) || self.ng(g);
        Ok(self.push(self.shape(x).to_vec(), data, Op::MulRow(x, g), ng))
    }

    /// `x[N,C,H,W] + b[C]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var, TensorError> {
        let (_, c, h, w) = rank4("add_channel_bias", self.shape(x))?;
        if self.value(b).numel() != c {
            return Err(mismatch("add_channel_bias", format!("bias {:?} for {c} channels", self.shape(b))));
        }
        let bv = self.data(b);
        let hw = h * w;
        let data = self.data(x).iter().enumerate().map(|(i, &v)| v + bv[(i / hw) % c]).collect();
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(self.shape(x).to_vec(), data, Op::AddChannelBias(x, b), ng))
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfRange { axis, rank: shape.len() });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for k in 0..len {
                    mx = mx.max(src[base + k * inner]);
                }
                let mut total = T::zero();
                for k in 0..len {
                    let e = (src[base + k * inner] - mx).exp();
                    out[base + k * inner] = e;
                    total += e;
                }
                for k in 0..len {
                    out[base + k * inner] = out[base + k * inner] / total;
                }
            }
        }
        Ok(self.push(shape, out, Op::Softmax { x, outer, len, inner }, self.ng(x)))
    }

    /// Row-wise normalization of a rank-2 tensor to zero mean, unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: T) -> Result<Var, TensorError> {
        let (m, n) = rank2("layer_norm", self.shape(x))?;
        let src = self.data(x);
        let nf = T::lit(n as f64);
        let mut out = vec![T::zero(); m * n];
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * r;
            }
            rstd.push(r);
        }
        Ok(self.push(vec![m, n], out, Op::LayerNorm { x, rstd, cols: n }, self.ng(x)))
    }

    /// Mean negative log-likelihood over non-ignored pixels.
    ///
    /// `logits` is `[N,K,H,W]`, `targets` holds `N*H*W` class ids. Optional
    /// per-pixel `weights` multiply each pixel's term; the mean is taken over
    /// the weight mass of non-ignored pixels. With nothing to average the
    /// loss is 0 and so is every gradient.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: usize,
        weights: Option<&[T]>,
    ) -> Result<Var, TensorError> {
        let (n, k, h, w) = rank4("cross_entropy", self.shape(logits))?;
        let hw = h * w;
        if targets.len() != n * hw {
            return Err(mismatch("cross_entropy", format!("{} targets for {} pixels", targets.len(), n * hw)));
        }
        if let Some(wt) = weights {
            if wt.len() != n * hw {
                return Err(mismatch("cross_entropy", "weights must have one entry per pixel"));
            }
        }
        for &t in targets {
            if t != ignore_index && t >= k {
                return Err(TensorError::ClassOutOfRange { class: t, classes: k });
            }
        }
        let src = self.data(logits);
        let mut probs = vec![T::zero(); src.len()];
        let mut nll = vec![T::zero(); n * hw];
        let mut mass = T::zero();
        for b in 0..n {
            for p in 0..hw {
                let base = b * k * hw + p;
                let mut mx = T::neg_infinity();
                for c in 0..k {
                    mx = mx.max(src[base + c * hw]);
                }
                let mut total = T::zero();
                for c in 0..k {
                    let e = (src[base + c * hw] - mx).exp();
                    probs[base + c * hw] = e;
                    total += e;
                }
                for c in 0..k {
                    probs[base + c * hw] = probs[base + c * hw] / total;
                }
                let t = targets[b * hw + p];
                if t == ignore_index {
                    continue;
                }
                let wv = weights.map_or(T::one(), |wt| wt[b * hw + p]);
                nll[b * hw + p] = wv * (mx + total.ln() - src[base + t * hw]);
                mass += wv;
            }
        }
        let mut coeffs = vec![T::zero(); n * hw];
        let loss = if mass > T::zero() {
            for (i, &t) in targets.iter().enumerate() {
                if t != ignore_index {
                    coeffs[i] = weights.map_or(T::one(), |wt| wt[i]) / mass;
                }
            }
            nll.iter().copied().sum::<T>() / mass
        } else {
            T::zero()
        };
        let targets: Rc<[usize]> = targets.into();
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy { logits, probs, coeffs, targets, k, hw }, self.ng(logits)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(x), self.ng(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).numel() as f64);
        let s = self.data(x).iter().copied().sum::<T>() / n;
        self.push(vec![1], vec![s], Op::Mean(x), self.ng(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() || shape.iter().any(|&e| e == 0) {
            return Err(mismatch("reshape", format!("{:?} -> {shape:?}", self.shape(x))));
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), self.ng(x)))
    }

    /// `out[i] = x[index[i]]`, shaped as `shape`. Indices may repeat.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var, TensorError> {
        let n: usize = shape.iter().product();
        let len = self.value(x).numel();
        if n != index.len() || index.iter().any(|&i| i >= len) {
            return Err(mismatch("gather", "index map does not fit the input or output"));
        }
        let src = self.data(x);
        let data = index.iter().map(|&i| src[i]).collect();
        Ok(self.push(shape.to_vec(), data, Op::Gather(x, index), self.ng(x)))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self.shape(*parts.first().ok_or_else(|| mismatch("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange { axis, rank: first.len() });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return Err(mismatch("concat", format!("{s:?} vs {first:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let tail: usize = first[axis + 1..].iter().product();
        let inners: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis] * tail).collect();
        let mut out = Vec::with_capacity(outer * total * tail);
        for o in 0..outer {
            for (&p, &inner) in parts.iter().zip(&inners) {
                out.extend_from_slice(&self.data(p)[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(shape, out, Op::Concat { parts: parts.to_vec(), outer, inners }, ng))
    }

    /// Rotates consecutive pairs `(x[2i], x[2i+1])` of every row of `x[R, d]`
    /// by per-row angles given as cosines and sines (`R * d/2` each).
    pub fn rotary(&mut self, x: Var, cos: Rc<[T]>, sin: Rc<[T]>) -> Result<Var, TensorError> {
        let (r, d) = rank2("rotary", self.shape(x))?;
        if d % 2 != 0 || cos.len() != r * d / 2 || sin.len() != cos.len() {
            return Err(mismatch("rotary", format!("angles do not fit [{r}, {d}]")));
        }
        let src = self.data(x);
        let mut out = vec![T::zero(); r * d];
        for (pair, (&c, &s)) in cos.iter().zip(sin.iter()).enumerate() {
            let (a, b) = (src[2 * pair], src[2 * pair + 1]);
            out[2 * pair] = a * c - b * s;
            out[2 * pair + 1] = a * s + b * c;
        }
        Ok(self.push(vec![r, d], out, Op::Rotary { x, cos, sin }, self.ng(x)))
    }

    /// `D^{-1/2} S D^{-1/2}` with `S` the symmetrized input and `D` built per
    /// `variant`, entries clamped below by `eps`.
    pub fn sym_norm(&mut self, a: Var, eps: T, variant: SymNormVariant) -> Result<Var, TensorError> {
        let shape = self.shape(a).to_vec();
        let t = match shape[..] {
            [m, n] if m == n => m,
            _ => return Err(TensorError::NonSquare(shape)),
        };
        let (s, r, d, active) = kernels::sym_norm_parts(
            self.data(a),
            t,
            variant.symmetrize == Symmetrize::Average,
            variant.degree == Degree::RowSum,
            eps,
        );
        // s / sqrt(d_i d_j) rather than r_i s r_j: sqrt of a rounded square
        // is exact, so active diagonal entries come out as exactly 1
        let mut out = vec![T::zero(); t * t];
        for i in 0..t {
            for j in 0..t {
                out[i * t + j] = s[i * t + j] / (d[i] * d[j]).sqrt();
            }
        }
        Ok(self.push(vec![t, t], out, Op::SymNorm { a, variant, s, r, active }, self.ng(a)))
    }

    /// Non-overlapping `k×k` average pooling; extents must divide evenly.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var, TensorError> {
        let (n, c, h, w) = rank4("avg_pool", self.shape(x))?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(mismatch("avg_pool", format!("{h}x{w} not divisible by {k}")));
        }
        let (oh, ow) = (h / k, w / k);
        let src = self.data(x);
        let inv = T::one() / T::lit((k * k) as f64);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[plane * oh * ow + (y / k) * ow + xx / k] += src[plane * h * w + y * w + xx] * inv;
                }
            }
        }
        Ok(self.push(vec![n, c, oh, ow], out, Op::AvgPool { x, k, n, c, h, w }, self.ng(x)))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = node.value.data();
        let mut send = |v: Var, gv: Vec<T>| {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], gv);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if self.ng(*a) {
                    send(*a, g.iter().zip(bv).map(|(&d, &y)| d * y).collect());
                }
                if self.ng(*b) {
                    send(*b, g.iter().zip(av).map(|(&d, &x)| d * x).collect());
                }
            }
            Op::Scale(a, c) => send(*a, g.iter().map(|&d| d * *c).collect()),
            Op::AddScalar(a) => send(*a, g.to_vec()),
            Op::MulScalarVar(x, s) => {
                let sv = self.data(*s)[0];
                if self.ng(*x) {
                    send(*x, g.iter().map(|&d| d * sv).collect());
                }
                if self.ng(*s) {
                    let ds = g.iter().zip(self.data(*x)).map(|(&d, &v)| d * v).sum();
                    send(*s, vec![ds]);
                }
            }
            Op::Relu(a) => {
                let src = self.data(*a);
                send(*a, g.iter().zip(src).map(|(&d, &x)| if x > T::zero() { d } else { T::zero() }).collect());
            }
            Op::Sigmoid(a) => {
                send(*a, g.iter().zip(out).map(|(&d, &y)| d * y * (T::one() - y)).collect());
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.ng(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_bt_acc(g, self.data(*b), &mut da, m, n, k);
                    send(*a, da);
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_at_acc(self.data(*a), g, &mut db, m, k, n);
                    send(*b, db);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![T::zero(); m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                send(*a, da);
            }
            Op::Gram(f) => {
                let (t, c) = (self.shape(*f)[0], self.shape(*f)[1]);
                let mut sym = vec![T::zero(); t * t];
                for i in 0..t {
                    for j in 0..t {
                        sym[i * t + j] = g[i * t + j] + g[j * t + i];
                    }
                }
                let mut df = vec![T::zero(); t * c];
                kernels::matmul_acc(&sym, self.data(*f), &mut df, t, t, c);
                send(*f, df);
            }
            Op::Conv2d { input, kernel, geom } => {
                let (dx, dw) = kernels::conv2d_backward(
                    geom,
                    self.data(*input),
                    self.data(*kernel),
                    g,
                    self.ng(*input),
                    self.ng(*kernel),
                );
                if self.ng(*input) {
                    send(*input, dx);
                }
                if self.ng(*kernel) {
                    send(*kernel, dw);
                }
            }
            Op::OffsetConv { input, kernel, taps_var, taps, geom } => {
                let (dx, dw, dt) = offset_conv_backward(
                    geom,
                    taps,
                    self.data(*input),
                    self.data(*kernel),
                    g,
                    self.ng(*input),
                );
                if self.ng(*input) {
                    send(*input, dx);
                }
                if self.ng(*kernel) {
                    send(*kernel, dw);
                }
                if self.ng(*taps_var) {
                    send(*taps_var, dt);
                }
            }
            Op::AddRowBias(x, b) => {
                let n = self.value(*b).numel();
                if self.ng(*b) {
                    let mut db = vec![T::zero(); n];
                    for (i, &d) in g.iter().enumerate() {
                        db[i % n] += d;
                    }
                    send(*b, db);
                }
                send(*x, g.to_vec());
            }
            Op::MulRow(x, gain) => {
                let n = self.value(*gain).numel();
                let gv = self.data(*gain);
                if self.ng(*gain) {
                    let mut dg = vec![T::zero(); n];
                    for (i, (&d, &v)) in g.iter().zip(self.data(*x)).enumerate() {
                        dg[i % n] += d * v;
                    }
                    send(*gain, dg);
                }
                if self.ng(*x) {
                    send(*x, g.iter().enumerate().map(|(i, &d)| d * gv[i % n]).collect());
                }
            }
            Op::AddChannelBias(x, b) => {
                let c = self.value(*b).numel();
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                if self.ng(*b) {
                    let mut db = vec![T::zero(); c];
                    for (i, &d) in g.iter().enumerate() {
                        db[(i / hw) % c] += d;
                    }
                    send(*b, db);
                }
                send(*x, g.to_vec());
            }
            Op::Softmax { x, outer, len, inner } => {
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for k in 0..*len {
                            dot += g[base + k * inner] * out[base + k * inner];
                        }
                        for k in 0..*len {
                            let idx = base + k * inner;
                            dx[idx] = out[idx] * (g[idx] - dot);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::LayerNorm { x, rstd, cols } => {
                let n = *cols;
                let nf = T::lit(n as f64);
                let mut dx = vec![T::zero(); g.len()];
                for (i, &r) in rstd.iter().enumerate() {
                    let gr = &g[i * n..(i + 1) * n];
                    let yr = &out[i * n..(i + 1) * n];
                    let mg = gr.iter().copied().sum::<T>() / nf;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / nf;
                    for j in 0..n {
                        dx[i * n + j] = r * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                send(*x, dx);
            }
            Op::CrossEntropy { logits, probs, coeffs, targets, k, hw } => {
                let d = g[0];
                let mut dl = vec![T::zero(); probs.len()];
                for (i, &cf) in coeffs.iter().enumerate() {
                    if cf == T::zero() {
                        continue;
                    }
                    let (b, p) = (i / hw, i % hw);
                    let base = b * k * hw + p;
                    for c in 0..*k {
                        let idx = base + c * hw;
                        let onehot = if targets[i] == c { T::one() } else { T::zero() };
                        dl[idx] = d * cf * (probs[idx] - onehot);
                    }
                }
                send(*logits, dl);
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Gather(x, index) => {
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                for (&i, &d) in index.iter().zip(g) {
                    dx[i] += d;
                }
                send(*x, dx);
            }
            Op::Concat { parts, outer, inners } => {
                let total: usize = inners.iter().sum();
                let mut offset = 0;
                for (&p, &inner) in parts.iter().zip(inners) {
                    if self.ng(p) {
                        let mut dp = Vec::with_capacity(outer * inner);
                        for o in 0..*outer {
                            let start = o * total + offset;
                            dp.extend_from_slice(&g[start..start + inner]);
                        }
                        send(p, dp);
                    }
                    offset += inner;
                }
            }
            Op::Rotary { x, cos, sin } => {
                let mut dx = vec![T::zero(); g.len()];
                for (pair, (&c, &s)) in cos.iter().zip(sin.iter()).enumerate() {
                    let (ga, gb) = (g[2 * pair], g[2 * pair + 1]);
                    dx[2 * pair] = ga * c + gb * s;
                    dx[2 * pair + 1] = gb * c - ga * s;
                }
                send(*x, dx);
            }
            Op::SymNorm { a, variant, s, r, active } => {
                let t = r.len();
                // out_ij = r_i s_ij r_j
                let mut ds = vec![T::zero(); t * t];
                let mut dr = vec![T::zero(); t];
                for i in 0..t {
                    for j in 0..t {
                        let gij = g[i * t + j];
                        ds[i * t + j] = gij * r[i] * r[j];
                        dr[i] += gij * s[i * t + j] * r[j];
                        dr[j] += gij * s[i * t + j] * r[i];
                    }
                }
                let half = T::lit(0.5);
                for i in 0..t {
                    if !active[i] {
                        continue;
                    }
                    // r = d^{-1/2} -> dr/dd = -r^3 / 2
                    let dd = -half * r[i] * r[i] * r[i] * dr[i];
                    match variant.degree {
                        Degree::Diagonal => ds[i * t + i] += dd,
                        Degree::RowSum => ds[i * t..(i + 1) * t].iter_mut().for_each(|v| *v += dd),
                    }
                }
                let mut da = vec![T::zero(); t * t];
                for i in 0..t {
                    for j in 0..t {
                        da[i * t + j] = match variant.symmetrize {
                            // s_ij = a_ij + a_ji / 2
                            Symmetrize::Literal => ds[i * t + j] + half * ds[j * t + i],
                            Symmetrize::Average => half * (ds[i * t + j] + ds[j * t + i]),
                        };
                    }
                }
                send(*a, da);
            }
            Op::AvgPool { x, k, n, c, h, w } => {
                let (oh, ow) = (h / k, w / k);
                let inv = T::one() / T::lit((k * k) as f64);
                let mut dx = vec![T::zero(); n * c * h * w];
                for plane in 0..n * c {
                    for y in 0..*h {
                        for xx in 0..*w {
                            dx[plane * h * w + y * w + xx] = g[plane * oh * ow + (y / k) * ow + xx / k] * inv;
                        }
                    }
                }
                send(*x, dx);
            }
        }
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(v) => v.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        None => *slot = Some(g),
    }
}

#[inline]
pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn offset_conv_forward<T: Element>(g: &ConvGeom, taps: &[Tap<T>], x: &[T], wt: &[T]) -> Vec<T> {
    let hw = g.h * g.w;
    let ntaps = taps.len();
    let mut out = vec![T::zero(); g.n * g.cout * hw];
    // sampled[ci][tap] planes for one image
    let mut sampled = vec![T::zero(); g.cin * ntaps * hw];
    for n in 0..g.n {
        for ci in 0..g.cin {
            let plane = &x[(n * g.cin + ci) * hw..(n * g.cin + ci + 1) * hw];
            for (t, tap) in taps.iter().enumerate() {
                let dst = &mut sampled[(ci * ntaps + t) * hw..(ci * ntaps + t + 1) * hw];
                kernels::sample_plane(plane, g.h, g.w, tap, dst);
            }
        }
        for co in 0..g.cout {
            let o = &mut out[(n * g.cout + co) * hw..(n * g.cout + co + 1) * hw];
            for ci in 0..g.cin {
                for t in 0..ntaps {
                    let wv = wt[(co * g.cin + ci) * ntaps + t];
                    let s = &sampled[(ci * ntaps + t) * hw..(ci * ntaps + t + 1) * hw];
                    for (ov, &sv) in o.iter_mut().zip(s) {
                        *ov += wv * sv;
                    }
                }
            }
        }
    }
    out
}

fn offset_conv_backward<T: Element>(
    g: &ConvGeom,
    taps: &[Tap<T>],
    x: &[T],
    wt: &[T],
    dout: &[T],
    want_dx: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hw = g.h * g.w;
    let ntaps = taps.len();
    let mut dx = if want_dx { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut dw = vec![T::zero(); wt.len()];
    let mut dtaps = vec![T::zero(); ntaps * 2];
    let mut sampled = vec![T::zero(); hw];
    let mut dsampled = vec![T::zero(); hw];
    for n in 0..g.n {
        for ci in 0..g.cin {
            let plane = &x[(n * g.cin + ci) * hw..(n * g.cin + ci + 1) * hw];
            for (t, tap) in taps.iter().enumerate() {
                kernels::sample_plane(plane, g.h, g.w, tap, &mut sampled);
                dsampled.iter_mut().for_each(|v| *v = T::zero());
                for co in 0..g.cout {
                    let d = &dout[(n * g.cout + co) * hw..(n * g.cout + co + 1) * hw];
                    let widx = (co * g.cin + ci) * ntaps + t;
                    let wv = wt[widx];
                    let mut accw = T::zero();
                    for ((&dv, &sv), ds) in d.iter().zip(&sampled).zip(dsampled.iter_mut()) {
                        accw += dv * sv;
                        *ds += wv * dv;
                    }
                    dw[widx] += accw;
                }
                let dplane = if want_dx {
                    Some(&mut dx[(n * g.cin + ci) * hw..(n * g.cin + ci + 1) * hw])
                } else {
                    None
                };
                let (dfy, dfx) = kernels::sample_plane_backward(plane, g.h, g.w, tap, &dsampled, dplane);
                if !tap.clamped_y {
                    dtaps[2 * t] += dfy;
                }
                if !tap.clamped_x {
                    dtaps[2 * t + 1] += dfx;
                }
            }
        }
    }
    (dx, dw, dtaps)
}
