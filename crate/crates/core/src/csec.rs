//! Color shift estimation and correction.
//!
//! The estimation branch runs a deformable convolution over the image and
//! predicts a darkening map `Δd` and a brightening map `Δb`. Three encoders
//! extract token features from the image, the darkened image `x - Δd` and the
//! brightened image `x + Δb`. Each token matrix `F` is mixed by its
//! normalized self-correlation,
//!
//! ```text
//! F_corr = γ_X·SymNorm(A_X)·F_X + γ_d·SymNorm(A_d)·F_d + γ_b·SymNorm(A_b)·F_b + b
//! SymNorm(A) = D^{-1/2} S D^{-1/2},  S = (2A + Aᵀ)/2,  A = F·Fᵀ
//! ```
//!
//! and a small decoder turns `F_corr` back into an image. The offset head and
//! the decoder's last layer start at zero and the decoder adds its output to
//! the input in logit space, so an untrained module returns its input.

use std::rc::Rc;

use thiserror::Error;

use crate::dataio::corrupt::corrupt_gamma_region;
use crate::kv::{KvConfig, KvError};
use crate::optim::{Adam, AdamConfig};
use crate::params::{fan_in_uniform, Bound, ParamSet};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Degree, Element, Graph, SymNormVariant, Symmetrize, Tensor, TensorError, Var};

/// Channels of the image, and of `Δd` / `Δb`.
pub const IMAGE_CHANNELS: usize = 3;
const RESIDUAL_CLAMP: f64 = 1e-4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CsecError {
    #[error("pixel values must lie in [0, 1]; found {0}")]
    InputRange(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsecConfig {
    /// Token feature width `c`.
    pub features: usize,
    /// Width of the hidden conv layers.
    pub hidden: usize,
    /// Token grids larger than `max_token_side²` are average-pooled.
    pub max_token_side: usize,
    pub sym_norm: SymNormVariant,
    /// Lower clamp on the entries of `D`.
    pub eps: f64,
    pub gamma_init: f64,
}

impl Default for CsecConfig {
    fn default() -> Self {
        Self {
            features: 8,
            hidden: 16,
            max_token_side: 16,
            sym_norm: SymNormVariant::default(),
            eps: 1e-8,
            gamma_init: 0.1,
        }
    }
}

/// Darkening / brightening maps and the tap displacements that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField<T> {
    pub delta_d: Tensor<T>,
    pub delta_b: Tensor<T>,
    pub tap_offsets: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights<T> {
    pub gamma_x: T,
    pub gamma_d: T,
    pub gamma_b: T,
    /// One entry per feature column, broadcast over tokens.
    pub bias: Tensor<T>,
}

/// `A = F·Fᵀ` over token rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix<T>(pub Tensor<T>);

const ENCODERS: [&str; 3] = ["enc_x", "enc_d", "enc_b"];

/// Identity-at-init parameters.
pub fn init_params<T: Element>(cfg: &CsecConfig, seed: u64) -> ParamSet<T> {
    let mut rng = SplitMix64::new(seed);
    let (h, c) = (cfg.hidden, cfg.features);
    let mut p = ParamSet::new();
    p.push("cose.w", fan_in_uniform(&[h, IMAGE_CHANNELS, 3, 3], IMAGE_CHANNELS * 9, &mut rng));
    p.push("cose.b", Tensor::zeros(&[h]));
    p.push("cose.taps", Tensor::zeros(&[9, 2]));
    p.push("cose.head.w", Tensor::zeros(&[2 * IMAGE_CHANNELS, h, 1, 1]));
    p.push("cose.head.b", Tensor::zeros(&[2 * IMAGE_CHANNELS]));
    for enc in ENCODERS {
        p.push(format!("{enc}.w1"), fan_in_uniform(&[h, IMAGE_CHANNELS, 3, 3], IMAGE_CHANNELS * 9, &mut rng));
        p.push(format!("{enc}.b1"), Tensor::zeros(&[h]));
        p.push(format!("{enc}.w2"), fan_in_uniform(&[h, h, 3, 3], h * 9, &mut rng));
        p.push(format!("{enc}.b2"), Tensor::zeros(&[h]));
        p.push(format!("{enc}.w3"), fan_in_uniform(&[c, h, 3, 3], h * 9, &mut rng));
        p.push(format!("{enc}.b3"), Tensor::zeros(&[c]));
    }
    for gamma in ["fuse.gamma_x", "fuse.gamma_d", "fuse.gamma_b"] {
        p.push(gamma, Tensor::scalar(T::lit(cfg.gamma_init)));
    }
    p.push("fuse.bias", Tensor::zeros(&[c]));
    p.push("dec.w1", fan_in_uniform(&[h, c + IMAGE_CHANNELS, 3, 3], (c + IMAGE_CHANNELS) * 9, &mut rng));
    p.push("dec.b1", Tensor::zeros(&[h]));
    p.push("dec.w2", Tensor::zeros(&[IMAGE_CHANNELS, h, 1, 1]));
    p.push("dec.b2", Tensor::zeros(&[IMAGE_CHANNELS]));
    p
}

/// Every parameter drawn at random, including the zero-initialized ones.
/// Gradient checks use this so no branch starts out dead.
pub fn random_params<T: Element>(cfg: &CsecConfig, seed: u64) -> ParamSet<T> {
    let mut rng = SplitMix64::new(seed);
    let mut p = init_params::<T>(cfg, seed ^ 0x5eed);
    for (name, t) in p.iter_mut() {
        let scale = if name == "cose.taps" { 0.9 } else { 0.4 };
        for v in t.data_mut() {
            // keep tap offsets off the integer grid where bilinear sampling has kinks
            let mut r = rng.uniform(-scale, scale);
            if name == "cose.taps" && r.abs() < 0.05 {
                r += 0.3;
            }
            *v = T::lit(r);
        }
    }
    p
}

pub fn fusion_weights<T: Element>(params: &ParamSet<T>) -> FusionWeights<T> {
    let s = |n: &str| params.get(n).expect("fusion weight").data()[0];
    FusionWeights {
        gamma_x: s("fuse.gamma_x"),
        gamma_d: s("fuse.gamma_d"),
        gamma_b: s("fuse.gamma_b"),
        bias: params.get("fuse.bias").expect("fusion bias").clone(),
    }
}

fn check_range<T: Element>(image: &Tensor<T>) -> Result<(), CsecError> {
    for &v in image.data() {
        let f = v.as_f64();
        if !(-1e-6..=1.0 + 1e-6).contains(&f) || f.is_nan() {
            return Err(CsecError::InputRange(f));
        }
    }
    Ok(())
}

fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize), CsecError> {
    match shape {
        [n, c, h, w] if *c == IMAGE_CHANNELS && h % 4 == 0 && w % 4 == 0 => Ok((*n, *h, *w)),
        _ => Err(CsecError::ShapeMismatch(format!(
            "expected [N, 3, H, W] with H and W divisible by 4, got {shape:?}"
        ))),
    }
}

/// Contiguous flat slice `[start, start + len)` of `x`, reshaped.
fn flat_slice<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    start: usize,
    shape: &[usize],
) -> Result<Var, TensorError> {
    let len: usize = shape.iter().product();
    let index: Rc<[usize]> = (start..start + len).collect();
    g.gather(x, index, shape)
}

/// Nearest-neighbor upsampling of `[1, C, h, w]` by an integer factor.
pub(crate) fn upsample_nearest<T: Element>(g: &mut Graph<T>, x: Var, factor: usize) -> Result<Var, TensorError> {
    let (n, c, h, w) = match g.shape(x) {
        [n, c, h, w] => (*n, *c, *h, *w),
        s => return Err(crate::tensor::mismatch("upsample", format!("{s:?}"))),
    };
    let (oh, ow) = (h * factor, w * factor);
    let mut index = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                index.push(plane * h * w + (y / factor) * w + xx / factor);
            }
        }
    }
    g.gather(x, index.into(), &[n, c, oh, ow])
}

/// Deformable convolution `y(p) = Σ_i w_i · x(p + p_i + Δp_i)`; see
/// [`Graph::offset_conv`].
pub fn offset_conv<T: Element>(x: &Tensor<T>, w: &Tensor<T>, taps: &Tensor<T>) -> Result<Tensor<T>, CsecError> {
    let mut g = Graph::new();
    let (xv, wv, tv) = (g.constant(x), g.constant(w), g.constant(taps));
    let y = g.offset_conv(xv, wv, tv)?;
    Ok(g.value(y).clone())
}

fn conv_bias<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    x: Var,
    w: &str,
    b: &str,
    stride: usize,
    pad: usize,
) -> Result<Var, TensorError> {
    let y = g.conv2d(x, p.var(w), stride, pad)?;
    g.add_channel_bias(y, p.var(b))
}

/// Offset estimation on one image `[1, 3, H, W]`; returns `(Δd, Δb)`.
pub fn cose_var<T: Element>(g: &mut Graph<T>, p: &Bound, x: Var) -> Result<(Var, Var), CsecError> {
    let (_, h, w) = image_dims(g.shape(x))?;
    let feat = g.offset_conv(x, p.var("cose.w"), p.var("cose.taps"))?;
    let feat = g.add_channel_bias(feat, p.var("cose.b"))?;
    let feat = g.relu(feat);
    let head = conv_bias(g, p, feat, "cose.head.w", "cose.head.b", 1, 0)?;
    let plane = IMAGE_CHANNELS * h * w;
    let dd = flat_slice(g, head, 0, &[1, IMAGE_CHANNELS, h, w])?;
    let db = flat_slice(g, head, plane, &[1, IMAGE_CHANNELS, h, w])?;
    Ok((dd, db))
}

pub fn cose_forward<T: Element>(
    image: &Tensor<T>,
    params: &ParamSet<T>,
) -> Result<OffsetField<T>, CsecError> {
    check_range(image)?;
    let (n, h, w) = image_dims(image.shape())?;
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let x = g.constant(image);
    let mut dds = Vec::new();
    let mut dbs = Vec::new();
    for i in 0..n {
        let xi = flat_slice(&mut g, x, i * IMAGE_CHANNELS * h * w, &[1, IMAGE_CHANNELS, h, w])?;
        let (dd, db) = cose_var(&mut g, &p, xi)?;
        dds.push(dd);
        dbs.push(db);
    }
    let dd = g.concat(&dds, 0)?;
    let db = g.concat(&dbs, 0)?;
    Ok(OffsetField {
        delta_d: g.value(dd).clone(),
        delta_b: g.value(db).clone(),
        tap_offsets: params.get("cose.taps").expect("tap offsets").clone(),
    })
}

/// Token grid geometry after an encoder: `h × w` tokens, pooled by `pool`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub pool: usize,
}

impl TokenGrid {
    pub fn tokens(&self) -> usize {
        self.h * self.w
    }
}

fn pool_factor(h: usize, w: usize, max_side: usize) -> Option<usize> {
    (1..=h.max(w)).find(|&k| h % k == 0 && w % k == 0 && (h / k) * (w / k) <= max_side * max_side)
}

/// Three-layer conv encoder with two stride-2 stages; returns tokens `[T, c]`.
pub fn encode_var<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    cfg: &CsecConfig,
) -> Result<(Var, TokenGrid), CsecError> {
    let key = |s: &str| format!("{prefix}.{s}");
    let y = conv_bias(g, p, x, &key("w1"), &key("b1"), 2, 1)?;
    let y = g.relu(y);
    let y = conv_bias(g, p, y, &key("w2"), &key("b2"), 2, 1)?;
    let y = g.relu(y);
    let mut y = conv_bias(g, p, y, &key("w3"), &key("b3"), 1, 1)?;
    let (c, mut h, mut w) = (g.shape(y)[1], g.shape(y)[2], g.shape(y)[3]);
    let pool = pool_factor(h, w, cfg.max_token_side)
        .ok_or_else(|| CsecError::ShapeMismatch(format!("cannot pool a {h}x{w} grid to the token limit")))?;
    if pool > 1 {
        y = g.avg_pool(y, pool)?;
        h /= pool;
        w /= pool;
    }
    let flat = g.reshape(y, &[c, h * w])?;
    Ok((g.transpose(flat)?, TokenGrid { h, w, pool }))
}

pub fn self_correlation<T: Element>(f: &Tensor<T>) -> Result<CorrelationMatrix<T>, CsecError> {
    let mut g = Graph::new();
    let fv = g.constant(f);
    let a = g.gram(fv)?;
    Ok(CorrelationMatrix(g.value(a).clone()))
}

/// Literal SymNorm: `S = (2A + Aᵀ)/2`, `D = diag(S)` clamped below by `eps`.
pub fn sym_norm<T: Element>(a: &Tensor<T>, eps: T) -> Result<Tensor<T>, CsecError> {
    sym_norm_with(a, eps, SymNormVariant::default())
}

pub fn sym_norm_with<T: Element>(a: &Tensor<T>, eps: T, variant: SymNormVariant) -> Result<Tensor<T>, CsecError> {
    let mut g = Graph::new();
    let av = g.constant(a);
    let s = g.sym_norm(av, eps, variant)?;
    Ok(g.value(s).clone())
}

/// `γ · SymNorm(F·Fᵀ) · F` for one branch.
fn branch<T: Element>(
    g: &mut Graph<T>,
    f: Var,
    gamma: Var,
    eps: T,
    variant: SymNormVariant,
) -> Result<Var, TensorError> {
    let a = g.gram(f)?;
    let s = g.sym_norm(a, eps, variant)?;
    let mixed = g.matmul(s, f)?;
    g.mul_scalar_var(mixed, gamma)
}

/// Fusion on the graph; weights come from `fuse.*` in `p`.
pub fn como_var<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    fx: Var,
    fd: Var,
    fb: Var,
    cfg: &CsecConfig,
) -> Result<Var, CsecError> {
    if g.shape(fx) != g.shape(fd) || g.shape(fx) != g.shape(fb) {
        return Err(CsecError::ShapeMismatch(format!(
            "feature matrices {:?}, {:?}, {:?}",
            g.shape(fx),
            g.shape(fd),
            g.shape(fb)
        )));
    }
    let eps = T::lit(cfg.eps);
    let x = branch(g, fx, p.var("fuse.gamma_x"), eps, cfg.sym_norm)?;
    let d = branch(g, fd, p.var("fuse.gamma_d"), eps, cfg.sym_norm)?;
    let b = branch(g, fb, p.var("fuse.gamma_b"), eps, cfg.sym_norm)?;
    let sum = g.add(x, d)?;
    let sum = g.add(sum, b)?;
    Ok(g.add_row_bias(sum, p.var("fuse.bias"))?)
}

pub fn como_fuse<T: Element>(
    fx: &Tensor<T>,
    fd: &Tensor<T>,
    fb: &Tensor<T>,
    weights: &FusionWeights<T>,
    cfg: &CsecConfig,
) -> Result<Tensor<T>, CsecError> {
    let mut ps = ParamSet::new();
    ps.push("fuse.gamma_x", Tensor::scalar(weights.gamma_x));
    ps.push("fuse.gamma_d", Tensor::scalar(weights.gamma_d));
    ps.push("fuse.gamma_b", Tensor::scalar(weights.gamma_b));
    ps.push("fuse.bias", weights.bias.clone());
    let mut g = Graph::new();
    let p = ps.bind_frozen(&mut g);
    let (a, b, c) = (g.constant(fx), g.constant(fd), g.constant(fb));
    let out = como_var(&mut g, &p, a, b, c, cfg)?;
    Ok(g.value(out).clone())
}

fn residual_logits<T: Element>(image: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(image.shape(), |i| {
        let v = image.data()[i].as_f64().clamp(RESIDUAL_CLAMP, 1.0 - RESIDUAL_CLAMP);
        T::lit((v / (1.0 - v)).ln())
    })
}

/// Decoder: tokens back to a grid, nearest upsampling to the image size,
/// concatenation with the image, two convs, then
/// `sigmoid(logit(image) + correction)`.
pub fn decode_var<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    f_corr: Var,
    grid: TokenGrid,
    x: Var,
) -> Result<Var, CsecError> {
    let (_, h, w) = image_dims(g.shape(x))?;
    let c = g.shape(f_corr)[1];
    if g.shape(f_corr)[0] != grid.tokens() || grid.h * 4 * grid.pool != h || grid.w * 4 * grid.pool != w {
        return Err(CsecError::ShapeMismatch(format!(
            "{:?} tokens do not tile a {h}x{w} image",
            g.shape(f_corr)
        )));
    }
    let t = g.transpose(f_corr)?;
    let map = g.reshape(t, &[1, c, grid.h, grid.w])?;
    let up = upsample_nearest(g, map, 4 * grid.pool)?;
    let joined = g.concat(&[up, x], 1)?;
    let y = conv_bias(g, p, joined, "dec.w1", "dec.b1", 1, 1)?;
    let y = g.relu(y);
    let delta = conv_bias(g, p, y, "dec.w2", "dec.b2", 1, 0)?;
    let logits = residual_logits(g.value(x));
    let base = g.constant(&logits);
    let z = g.add(base, delta)?;
    Ok(g.sigmoid(z))
}

/// Decodes fused tokens into an image shaped like `image`, which also
/// provides the residual path.
pub fn decode<T: Element>(
    f_corr: &Tensor<T>,
    image: &Tensor<T>,
    params: &ParamSet<T>,
    cfg: &CsecConfig,
) -> Result<Tensor<T>, CsecError> {
    let (_, h, w) = image_dims(image.shape())?;
    let (gh, gw) = (h / 4, w / 4);
    let pool = pool_factor(gh, gw, cfg.max_token_side)
        .ok_or_else(|| CsecError::ShapeMismatch("token grid too large".into()))?;
    let grid = TokenGrid { h: gh / pool, w: gw / pool, pool };
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let (fv, xv) = (g.constant(f_corr), g.constant(image));
    let out = decode_var(&mut g, &p, fv, grid, xv)?;
    Ok(g.value(out).clone())
}

/// Full correction of one `[1, 3, H, W]` image on the graph.
pub fn correct_one_var<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    x: Var,
    cfg: &CsecConfig,
) -> Result<Var, CsecError> {
    let (dd, db) = cose_var(g, p, x)?;
    let darkened = g.sub(x, dd)?;
    let brightened = g.add(x, db)?;
    let (fx, grid) = encode_var(g, p, "enc_x", x, cfg)?;
    let (fd, _) = encode_var(g, p, "enc_d", darkened, cfg)?;
    let (fb, _) = encode_var(g, p, "enc_b", brightened, cfg)?;
    let fused = como_var(g, p, fx, fd, fb, cfg)?;
    decode_var(g, p, fused, grid, x)
}

/// Batched correction on the graph: `[N, 3, H, W]` in and out.
pub fn correct_var<T: Element>(g: &mut Graph<T>, p: &Bound, x: Var, cfg: &CsecConfig) -> Result<Var, CsecError> {
    let (n, h, w) = image_dims(g.shape(x))?;
    if n == 1 {
        return correct_one_var(g, p, x, cfg);
    }
    let plane = IMAGE_CHANNELS * h * w;
    let mut outs = Vec::with_capacity(n);
    for i in 0..n {
        let xi = flat_slice(g, x, i * plane, &[1, IMAGE_CHANNELS, h, w])?;
        outs.push(correct_one_var(g, p, xi, cfg)?);
    }
    Ok(g.concat(&outs, 0)?)
}

pub fn csec_correct<T: Element>(
    image: &Tensor<T>,
    params: &ParamSet<T>,
    cfg: &CsecConfig,
) -> Result<Tensor<T>, CsecError> {
    check_range(image)?;
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let x = g.constant(image);
    let out = correct_var(&mut g, &p, x, cfg)?;
    Ok(g.value(out).clone())
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`.
pub fn psnr<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CsecTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for CsecTrainConfig {
    fn default() -> Self {
        Self { epochs: 20, learning_rate: 2e-3, seed: 7 }
    }
}

fn variant_name(v: SymNormVariant) -> &'static str {
    match (v.symmetrize, v.degree) {
        (Symmetrize::Literal, Degree::Diagonal) => "literal",
        (Symmetrize::Average, Degree::Diagonal) => "average",
        (Symmetrize::Literal, Degree::RowSum) => "row_sum",
        (Symmetrize::Average, Degree::RowSum) => "average_row_sum",
    }
}

fn parse_variant(s: &str) -> Result<SymNormVariant, KvError> {
    let (symmetrize, degree) = match s {
        "literal" => (Symmetrize::Literal, Degree::Diagonal),
        "average" => (Symmetrize::Average, Degree::Diagonal),
        "row_sum" => (Symmetrize::Literal, Degree::RowSum),
        "average_row_sum" => (Symmetrize::Average, Degree::RowSum),
        other => {
            return Err(KvError::Invalid {
                key: "csec_sym_norm".into(),
                reason: format!("{other:?} is not literal, average, row_sum or average_row_sum"),
            })
        }
    };
    Ok(SymNormVariant { symmetrize, degree })
}

impl CsecConfig {
    /// Reads `csec_*` keys, defaulting the rest.
    pub fn take_from(cfg: &mut KvConfig) -> Result<Self, KvError> {
        let d = Self::default();
        Ok(Self {
            features: cfg.take_or("csec_features", d.features)?,
            hidden: cfg.take_or("csec_hidden", d.hidden)?,
            max_token_side: cfg.take_or("csec_max_token_side", d.max_token_side)?,
            sym_norm: match cfg.take::<String>("csec_sym_norm")? {
                Some(s) => parse_variant(&s)?,
                None => d.sym_norm,
            },
            eps: cfg.take_or("csec_eps", d.eps)?,
            gamma_init: cfg.take_or("csec_gamma_init", d.gamma_init)?,
        })
    }

    pub fn write_to(&self, cfg: &mut KvConfig) {
        cfg.set("csec_features", self.features);
        cfg.set("csec_hidden", self.hidden);
        cfg.set("csec_max_token_side", self.max_token_side);
        cfg.set("csec_sym_norm", variant_name(self.sym_norm));
        cfg.set("csec_eps", self.eps);
        cfg.set("csec_gamma_init", self.gamma_init);
    }
}

impl CsecTrainConfig {
    pub fn take_from(cfg: &mut KvConfig) -> Result<Self, KvError> {
        let d = Self::default();
        Ok(Self {
            epochs: cfg.take_or("csec_epochs", d.epochs)?,
            learning_rate: cfg.take_or("csec_learning_rate", d.learning_rate)?,
            seed: cfg.take_or("csec_seed", d.seed)?,
        })
    }

    pub fn write_to(&self, cfg: &mut KvConfig) {
        cfg.set("csec_epochs", self.epochs);
        cfg.set("csec_learning_rate", self.learning_rate);
        cfg.set("csec_seed", self.seed);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsecTrainReport {
    pub epoch_loss: Vec<f64>,
}

/// Self-supervised training: every step corrupts a clean image with a fresh
/// gamma region and regresses the clean pixels (mean squared error).
pub fn train_csec(
    params: &mut ParamSet<f32>,
    clean: &[Tensor<f32>],
    cfg: &CsecConfig,
    train: &CsecTrainConfig,
) -> Result<CsecTrainReport, CsecError> {
    let mut opt = Adam::<f32>::new(AdamConfig { learning_rate: train.learning_rate, ..Default::default() }, params);
    let mut rng = SplitMix64::new(train.seed);
    let mut order: Vec<usize> = (0..clean.len()).collect();
    let mut epoch_loss = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for (step, &i) in order.iter().enumerate() {
            let seed = derive_seed(train.seed, (epoch * clean.len() + step) as u64);
            let corrupted = corrupt_gamma_region(&clean[i], seed);
            params.zero_grad();
            let mut g = Graph::new();
            let p = params.bind(&mut g);
            let x = g.constant(&corrupted);
            let target = g.constant(&clean[i]);
            let out = correct_var(&mut g, &p, x, cfg)?;
            let diff = g.sub(out, target)?;
            let sq = g.mul(diff, diff)?;
            let loss = g.mean(sq);
            total += g.value(loss).data()[0] as f64;
            let grads = g.backward(loss)?;
            params.accumulate(&p, &grads);
            opt.step(params);
        }
        epoch_loss.push(total / clean.len() as f64);
    }
    Ok(CsecTrainReport { epoch_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn kv_round_trip() {
        for variant in ["literal", "average", "row_sum", "average_row_sum"] {
            let mut kv: KvConfig = format!("csec_sym_norm = {variant}\ncsec_features = 5\ncsec_epochs = 3").parse().unwrap();
            let cfg = CsecConfig::take_from(&mut kv).unwrap();
            let tc = CsecTrainConfig::take_from(&mut kv).unwrap();
            kv.finish().unwrap();
            assert_eq!((cfg.features, tc.epochs), (5, 3));
            let mut out = KvConfig::new();
            cfg.write_to(&mut out);
            tc.write_to(&mut out);
            assert_eq!(out.get("csec_sym_norm"), Some(variant));
            assert_eq!(CsecConfig::take_from(&mut out).unwrap(), cfg);
            assert_eq!(CsecTrainConfig::take_from(&mut out).unwrap(), tc);
        }
        let mut bad: KvConfig = "csec_sym_norm = weird".parse().unwrap();
        assert!(CsecConfig::take_from(&mut bad).is_err());
    }

    #[test]
    fn offset_conv_zero_offsets_match_conv2d() {
        let mut rng = SplitMix64::new(11);
        let x = Tensor::from_fn(&[1, 2, 5, 6], |_| rng.normal());
        let w = Tensor::from_fn(&[3, 2, 3, 3], |_| rng.normal());
        let taps = Tensor::zeros(&[9, 2]);
        let y = offset_conv(&x, &w, &taps).unwrap();
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(&x), g.constant(&w));
        let c = g.conv2d(xv, wv, 1, 1).unwrap();
        assert_eq!(y.data(), g.value(c).data());
    }

    #[test]
    fn offset_conv_integer_shift() {
        let x = t(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let y = offset_conv(&x, &w, &t(&[1, 2], &[0.0, 1.0])).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0, 0.0, 5.0, 6.0, 0.0]);
    }

    #[test]
    fn offset_conv_half_pixel() {
        let x = t(&[1, 1, 1, 4], &[1.0, 3.0, 7.0, 9.0]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let y = offset_conv(&x, &w, &t(&[1, 2], &[0.0, 0.5])).unwrap();
        assert_eq!(y.data(), &[2.0, 5.0, 8.0, 4.5]);
    }

    #[test]
    fn offset_conv_rejects_nonfinite() {
        let x = t(&[1, 1, 1, 2], &[1.0, 2.0]);
        let w = t(&[1, 1, 1, 1], &[1.0]);
        let err = offset_conv(&x, &w, &t(&[1, 2], &[f64::NAN, 0.0])).unwrap_err();
        assert_eq!(err, CsecError::Tensor(TensorError::NonfiniteOffset));
    }

    #[test]
    fn correlation_examples() {
        let a = self_correlation(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(a.0.data(), &[1.0, 0.0, 0.0, 1.0]);
        let a = self_correlation(&t(&[2, 2], &[1.0, 0.0, 1.0, 0.0])).unwrap();
        assert_eq!(a.0.data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    fn assert_close(got: &[f64], want: &[f64]) {
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() <= 1e-12, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn sym_norm_examples() {
        let i = sym_norm(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), 1e-8).unwrap();
        assert_close(i.data(), &[1.0, 0.0, 0.0, 1.0]);
        let s = sym_norm(&t(&[2, 2], &[2.0, 1.0, 1.0, 2.0]), 1e-8).unwrap();
        assert_close(s.data(), &[1.0, 0.5, 0.5, 1.0]);
        assert!(matches!(
            sym_norm(&t(&[1, 2], &[1.0, 2.0]), 1e-8),
            Err(CsecError::Tensor(TensorError::NonSquare(_)))
        ));
    }

    #[test]
    fn fuse_reduces_to_scaled_input() {
        let fx = t(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let w = FusionWeights { gamma_x: 2.5, gamma_d: 0.0, gamma_b: 0.0, bias: Tensor::zeros(&[3]) };
        let out = como_fuse(&fx, &fx, &fx, &w, &CsecConfig::default()).unwrap();
        assert_close(out.data(), &[2.5, 0.0, 0.0, 0.0, 2.5, 0.0]);

        let w = FusionWeights { gamma_x: 0.0, gamma_d: 0.0, gamma_b: 0.0, bias: t(&[3], &[1.0, -2.0, 0.5]) };
        let out = como_fuse(&fx, &fx, &fx, &w, &CsecConfig::default()).unwrap();
        assert_eq!(out.data(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
    }

    #[test]
    fn fuse_rejects_mismatched_features() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 3]);
        let w = FusionWeights { gamma_x: 1.0, gamma_d: 1.0, gamma_b: 1.0, bias: Tensor::zeros(&[3]) };
        assert!(matches!(como_fuse(&a, &b, &a, &w, &CsecConfig::default()), Err(CsecError::ShapeMismatch(_))));
    }

    fn test_image(seed: u64, h: usize, w: usize) -> Tensor<f32> {
        let mut rng = SplitMix64::new(seed);
        Tensor::from_fn(&[1, 3, h, w], |_| rng.next_f64() as f32)
    }

    #[test]
    fn untrained_module_is_near_identity() {
        let cfg = CsecConfig::default();
        let params = init_params::<f32>(&cfg, 1);
        let img = test_image(5, 16, 24);
        let out = csec_correct(&img, &params, &cfg).unwrap();
        assert_eq!(out.shape(), img.shape());
        for (a, b) in out.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 1e-3);
        }
        let field = cose_forward(&img, &params).unwrap();
        assert!(field.delta_d.data().iter().all(|&v| v == 0.0));
        assert!(field.delta_b.data().iter().all(|&v| v == 0.0));
        assert_eq!(field.delta_d.shape(), &[1, 3, 16, 24]);
    }

    #[test]
    fn cose_is_deterministic_and_range_checked() {
        let cfg = CsecConfig::default();
        let params = random_params::<f32>(&cfg, 3);
        let img = test_image(9, 8, 8);
        assert_eq!(cose_forward(&img, &params).unwrap(), cose_forward(&img, &params).unwrap());
        let mut bad = img.clone();
        bad.data_mut()[0] = 1.5;
        assert!(matches!(cose_forward(&bad, &params), Err(CsecError::InputRange(_))));
    }

    #[test]
    fn decode_output_in_unit_range() {
        let cfg = CsecConfig::default();
        let params = random_params::<f64>(&cfg, 4);
        let img = test_image(1, 8, 8).cast::<f64>();
        let mut rng = SplitMix64::new(2);
        let f = Tensor::from_fn(&[4, cfg.features], |_| 50.0 * rng.normal());
        let out = decode(&f, &img, &params, &cfg).unwrap();
        assert_eq!(out.shape(), img.shape());
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn large_grids_are_pooled() {
        assert_eq!(pool_factor(12, 12, 16), Some(1));
        assert_eq!(pool_factor(32, 32, 16), Some(2));
        assert_eq!(pool_factor(17, 17, 16), Some(17));
    }
}
