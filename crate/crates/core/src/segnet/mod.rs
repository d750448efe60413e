//! Toy segmentation transformer: patch embedding, attention blocks with
//! optional rotary positions, and a per-patch linear head that unshuffles
//! into per-pixel logits.

mod checkpoint;
mod train;

use std::rc::Rc;
use std::sync::Arc;

use thiserror::Error;

pub use checkpoint::{
    load_csec, load_model, read_tensors, save_csec, save_model, write_tensors, CheckpointError, MAGIC,
};
pub use train::{
    pixel_nll, score_samples, train, train_observed, train_with_denoise, DenoiseOutcome, EpochStats, TrainConfig, TrainReport,
};

use crate::csec::{csec_correct, CsecConfig, CsecError};
use crate::dataio::Mask;
use crate::kv::{KvConfig, KvError};
use crate::params::{fan_in_uniform, Bound, ParamSet};
use crate::rng::SplitMix64;
use crate::rope::{attention_var, FreqTable, PatchGrid, RopeError, DEFAULT_BASE};
use crate::tensor::{Element, Graph, Tensor, TensorError, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum SegError {
    #[error("invalid model config: {0}")]
    ConfigInvalid(String),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss or parameters non-finite or exploding")]
    Divergence { epoch: usize, step: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Rope(#[from] RopeError),
    #[error(transparent)]
    Csec(#[from] CsecError),
    #[error(transparent)]
    Denoise(#[from] crate::denoise::DenoiseError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub classes: usize,
    pub mlp_hidden: usize,
    /// Rotary positions in attention; off gives position-free attention.
    pub rope: bool,
    pub rope_base: f64,
    pub use_csec: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 48,
            width: 48,
            patch: 4,
            dim: 64,
            heads: 4,
            blocks: 2,
            classes: 3,
            mlp_hidden: 128,
            rope: true,
            rope_base: DEFAULT_BASE,
            use_csec: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), SegError> {
        let bad = |m: String| Err(SegError::ConfigInvalid(m));
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!("{}x{} not divisible by patch {}", self.height, self.width, self.patch));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % (4 * self.heads) != 0 {
            return bad(format!("dim {} must be a positive multiple of 4 * heads ({})", self.dim, self.heads));
        }
        if self.classes < 2 || self.classes > 255 {
            return bad(format!("classes must be in 2..=255, got {}", self.classes));
        }
        if self.mlp_hidden == 0 {
            return bad("mlp_hidden must be positive".into());
        }
        if !(self.rope_base > 1.0) {
            return bad(format!("rope_base must exceed 1, got {}", self.rope_base));
        }
        if self.use_csec && (self.height % 4 != 0 || self.width % 4 != 0) {
            return bad("color correction needs image sides divisible by 4".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid::new(self.height / self.patch, self.width / self.patch)
    }

    fn patch_features(&self) -> usize {
        3 * self.patch * self.patch
    }

    fn head_outputs(&self) -> usize {
        self.classes * self.patch * self.patch
    }

    /// Parameter count from layer sizes alone.
    pub fn param_count(&self) -> usize {
        let (d, m) = (self.dim, self.mlp_hidden);
        let embed = self.patch_features() * d + d;
        let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * m + m) + (m * d + d);
        let head = d * self.head_outputs() + self.head_outputs();
        embed + self.blocks * block + head
    }

    /// Consumes the model keys of `cfg`, leaving the rest.
    pub fn take_from(cfg: &mut KvConfig) -> Result<Self, KvError> {
        let d = Self::default();
        Ok(Self {
            height: cfg.take_or("height", d.height)?,
            width: cfg.take_or("width", d.width)?,
            patch: cfg.take_or("patch", d.patch)?,
            dim: cfg.take_or("dim", d.dim)?,
            heads: cfg.take_or("heads", d.heads)?,
            blocks: cfg.take_or("blocks", d.blocks)?,
            classes: cfg.take_or("classes", d.classes)?,
            mlp_hidden: cfg.take_or("mlp_hidden", d.mlp_hidden)?,
            rope: cfg.take_or("rope", d.rope)?,
            rope_base: cfg.take_or("rope_base", d.rope_base)?,
            use_csec: cfg.take_or("use_csec", d.use_csec)?,
            seed: cfg.take_or("seed", d.seed)?,
        })
    }

    pub fn write_to(&self, cfg: &mut KvConfig) {
        cfg.set("height", self.height);
        cfg.set("width", self.width);
        cfg.set("patch", self.patch);
        cfg.set("dim", self.dim);
        cfg.set("heads", self.heads);
        cfg.set("blocks", self.blocks);
        cfg.set("classes", self.classes);
        cfg.set("mlp_hidden", self.mlp_hidden);
        cfg.set("rope", self.rope);
        cfg.set("rope_base", self.rope_base);
        cfg.set("use_csec", self.use_csec);
        cfg.set("seed", self.seed);
    }
}

/// Deterministic fan-in initialization; layer-norm gains start at one.
pub fn init_params<T: Element>(cfg: &ModelConfig) -> ParamSet<T> {
    let mut rng = SplitMix64::new(cfg.seed);
    let (d, m, pf, ho) = (cfg.dim, cfg.mlp_hidden, cfg.patch_features(), cfg.head_outputs());
    let mut p = ParamSet::new();
    p.push("embed.w", fan_in_uniform(&[pf, d], pf, &mut rng));
    p.push("embed.b", Tensor::zeros(&[d]));
    for b in 0..cfg.blocks {
        let k = |s: &str| format!("blk{b}.{s}");
        p.push(k("ln1.g"), Tensor::full(&[d], T::one()));
        p.push(k("ln1.b"), Tensor::zeros(&[d]));
        for proj in ["q", "k", "v", "o"] {
            p.push(k(&format!("attn.w{proj}")), fan_in_uniform(&[d, d], d, &mut rng));
            p.push(k(&format!("attn.b{proj}")), Tensor::zeros(&[d]));
        }
        p.push(k("ln2.g"), Tensor::full(&[d], T::one()));
        p.push(k("ln2.b"), Tensor::zeros(&[d]));
        p.push(k("mlp.w1"), fan_in_uniform(&[d, m], d, &mut rng));
        p.push(k("mlp.b1"), Tensor::zeros(&[m]));
        p.push(k("mlp.w2"), fan_in_uniform(&[m, d], m, &mut rng));
        p.push(k("mlp.b2"), Tensor::zeros(&[d]));
    }
    p.push("head.w", fan_in_uniform(&[d, ho], d, &mut rng));
    p.push("head.b", Tensor::zeros(&[ho]));
    p
}

/// Index maps and rotary tables derived from a config.
#[derive(Debug, Clone)]
pub struct Plan {
    patchify: Arc<[usize]>,
    unshuffle: Arc<[usize]>,
    head_cols: Vec<Arc<[usize]>>,
    positions: Vec<(i64, i64)>,
    freqs: Option<FreqTable>,
}

impl Plan {
    pub fn new(cfg: &ModelConfig) -> Result<Self, SegError> {
        cfg.validate()?;
        let (h, w, p) = (cfg.height, cfg.width, cfg.patch);
        let (gh, gw) = (h / p, w / p);
        let pf = cfg.patch_features();
        let mut patchify = Vec::with_capacity(gh * gw * pf);
        for ty in 0..gh {
            for tx in 0..gw {
                for c in 0..3 {
                    for dy in 0..p {
                        for dx in 0..p {
                            patchify.push(c * h * w + (ty * p + dy) * w + tx * p + dx);
                        }
                    }
                }
            }
        }
        let ho = cfg.head_outputs();
        let mut unshuffle = Vec::with_capacity(cfg.classes * h * w);
        for k in 0..cfg.classes {
            for y in 0..h {
                for x in 0..w {
                    let t = (y / p) * gw + x / p;
                    unshuffle.push(t * ho + k * p * p + (y % p) * p + x % p);
                }
            }
        }
        let dh = cfg.head_dim();
        let tokens = gh * gw;
        let head_cols = (0..cfg.heads)
            .map(|hd| (0..tokens).flat_map(|t| (0..dh).map(move |j| t * cfg.dim + hd * dh + j)).collect())
            .collect();
        let freqs = if cfg.rope { Some(FreqTable::new(dh / 2, cfg.rope_base)?) } else { None };
        Ok(Self {
            patchify: patchify.into(),
            unshuffle: unshuffle.into(),
            head_cols,
            positions: cfg.grid().positions(),
            freqs,
        })
    }
}

fn rc(a: &Arc<[usize]>) -> Rc<[usize]> {
    Rc::from(&a[..])
}

fn linear<T: Element>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let y = g.matmul(x, w)?;
    g.add_row_bias(y, b)
}

fn norm<T: Element>(g: &mut Graph<T>, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
    let y = g.layer_norm(x, T::lit(LN_EPS))?;
    let y = g.mul_row(y, gain)?;
    g.add_row_bias(y, bias)
}

/// Logits `[1, K, H, W]` for one image `[1, 3, H, W]`.
pub fn forward_var<T: Element>(
    g: &mut Graph<T>,
    p: &Bound,
    image: Var,
    cfg: &ModelConfig,
    plan: &Plan,
) -> Result<Var, SegError> {
    if g.shape(image) != [1, 3, cfg.height, cfg.width] {
        return Err(SegError::ShapeMismatch(format!(
            "expected [1, 3, {}, {}], got {:?}",
            cfg.height,
            cfg.width,
            g.shape(image)
        )));
    }
    let tokens = cfg.grid().len();
    let dh = cfg.head_dim();
    let patches = g.gather(image, rc(&plan.patchify), &[tokens, cfg.patch_features()])?;
    let mut x = linear(g, patches, p.var("embed.w"), p.var("embed.b"))?;
    for b in 0..cfg.blocks {
        let k = |s: &str| format!("blk{b}.{s}");
        let h = norm(g, x, p.var(&k("ln1.g")), p.var(&k("ln1.b")))?;
        let q = linear(g, h, p.var(&k("attn.wq")), p.var(&k("attn.bq")))?;
        let kk = linear(g, h, p.var(&k("attn.wk")), p.var(&k("attn.bk")))?;
        let v = linear(g, h, p.var(&k("attn.wv")), p.var(&k("attn.bv")))?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for cols in &plan.head_cols {
            let qh = g.gather(q, rc(cols), &[tokens, dh])?;
            let kh = g.gather(kk, rc(cols), &[tokens, dh])?;
            let vh = g.gather(v, rc(cols), &[tokens, dh])?;
            let pos = plan.freqs.as_ref().map(|f| (&plan.positions[..], f));
            heads.push(attention_var(g, qh, kh, vh, pos)?);
        }
        let joined = g.concat(&heads, 1)?;
        let attn = linear(g, joined, p.var(&k("attn.wo")), p.var(&k("attn.bo")))?;
        x = g.add(x, attn)?;
        let h = norm(g, x, p.var(&k("ln2.g")), p.var(&k("ln2.b")))?;
        let h = linear(g, h, p.var(&k("mlp.w1")), p.var(&k("mlp.b1")))?;
        let h = g.relu(h);
        let h = linear(g, h, p.var(&k("mlp.w2")), p.var(&k("mlp.b2")))?;
        x = g.add(x, h)?;
    }
    let per_patch = linear(g, x, p.var("head.w"), p.var("head.b"))?;
    Ok(g.gather(per_patch, rc(&plan.unshuffle), &[1, cfg.classes, cfg.height, cfg.width])?)
}

/// Frozen color-correction stage applied before the network.
#[derive(Debug, Clone, PartialEq)]
pub struct CsecStage {
    pub config: CsecConfig,
    pub params: ParamSet<f32>,
}

impl CsecStage {
    pub fn apply(&self, image: &Tensor<f32>) -> Result<Tensor<f32>, SegError> {
        Ok(csec_correct(image, &self.params, &self.config)?)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet<f32>,
    pub csec: Option<CsecStage>,
    plan: Plan,
}

pub fn build_model(config: &ModelConfig) -> Result<Model, SegError> {
    let plan = Plan::new(config)?;
    Ok(Model { config: config.clone(), params: init_params(config), csec: None, plan })
}

impl Model {
    /// Wraps existing parameters, checking every expected name and shape.
    pub fn from_params(config: &ModelConfig, params: ParamSet<f32>) -> Result<Self, SegError> {
        let plan = Plan::new(config)?;
        let reference = init_params::<f32>(config);
        if reference.len() != params.len() {
            return Err(SegError::ConfigInvalid(format!(
                "expected {} parameter tensors, found {}",
                reference.len(),
                params.len()
            )));
        }
        for (name, t) in reference.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(SegError::ShapeMismatch(format!("{name}: {:?} vs {:?}", p.shape(), t.shape())))
                }
                None => return Err(SegError::ConfigInvalid(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { config: config.clone(), params, csec: None, plan })
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    /// The image the network sees: corrected when a color stage is attached.
    pub fn preprocess(&self, image: &Tensor<f32>) -> Result<Tensor<f32>, SegError> {
        match &self.csec {
            Some(stage) if self.config.use_csec => stage.apply(image),
            _ => Ok(image.clone()),
        }
    }

    /// Network logits for an already preprocessed image.
    pub fn logits_preprocessed(&self, image: &Tensor<f32>) -> Result<Tensor<f32>, SegError> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let x = g.constant(image);
        let out = forward_var(&mut g, &p, x, &self.config, &self.plan)?;
        Ok(g.value(out).clone())
    }

    pub fn logits(&self, image: &Tensor<f32>) -> Result<Tensor<f32>, SegError> {
        self.logits_preprocessed(&self.preprocess(image)?)
    }

    pub fn predict(&self, image: &Tensor<f32>) -> Result<Mask, SegError> {
        Ok(argmax_mask(&self.logits(image)?))
    }
}

/// Per-pixel argmax of `[1, K, H, W]`; ties go to the lowest class.
pub fn argmax_mask<T: Element>(logits: &Tensor<T>) -> Mask {
    let (k, h, w) = match logits.shape() {
        [1, k, h, w] => (*k, *h, *w),
        s => panic!("expected [1, K, H, W] logits, got {s:?}"),
    };
    let data = logits.data();
    let labels = (0..h * w)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if data[c * h * w + p] > data[best * h * w + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Mask { height: h, width: w, labels }
}
