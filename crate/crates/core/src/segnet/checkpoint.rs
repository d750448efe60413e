//! Flat binary checkpoints.
//!
//! ```text
//! b"SMK1"
//! u32 tensor count
//! per tensor: u32 name length, name bytes (UTF-8), u32 rank,
//!             rank × u32 extents, f32 payload
//! ```
//!
//! All integers and floats are little-endian. Configuration travels as
//! `meta.*` tensors; a color-correction stage is stored under `csec.`.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use super::{CsecStage, Model, ModelConfig, SegError};
use crate::csec::CsecConfig;
use crate::params::ParamSet;
use crate::tensor::{Degree, SymNormVariant, Symmetrize, Tensor};

pub const MAGIC: &[u8; 4] = b"SMK1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] SegError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_tensors<W: Write>(mut w: W, entries: &[(String, Tensor<f32>)]) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, t) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn read_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, CheckpointError> {
    if bytes.get(..4) != Some(MAGIC) {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()?;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| CheckpointError::Invalid("tensor name is not UTF-8".into()))?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or(CheckpointError::Truncated)?;
        let raw = r.take(n.checked_mul(4).ok_or(CheckpointError::Truncated)?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Invalid(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Invalid("trailing bytes".into()));
    }
    Ok(out)
}

/// Small integers are exact in `f32`.
fn meta_int(name: &str, v: usize) -> (String, Tensor<f32>) {
    assert!(v < 1 << 24, "{name} too large for an exact f32");
    (name.to_string(), Tensor::scalar(v as f32))
}

/// An `f64` as its bits in four 16-bit chunks, each exact in `f32`.
fn meta_f64(name: &str, v: f64) -> (String, Tensor<f32>) {
    let bits = v.to_bits();
    let data = (0..4).map(|i| ((bits >> (16 * i)) & 0xffff) as f32).collect();
    (name.to_string(), Tensor::new(&[4], data).expect("four chunks"))
}

struct Meta<'a>(&'a ParamSet<f32>);

impl Meta<'_> {
    fn tensor(&self, name: &str) -> Result<&Tensor<f32>, CheckpointError> {
        self.0.get(name).ok_or_else(|| CheckpointError::Invalid(format!("missing {name}")))
    }

    fn int(&self, name: &str) -> Result<usize, CheckpointError> {
        let t = self.tensor(name)?;
        match t.data() {
            [v] if *v >= 0.0 && v.fract() == 0.0 => Ok(*v as usize),
            _ => Err(CheckpointError::Invalid(format!("{name} is not a count"))),
        }
    }

    fn f64(&self, name: &str) -> Result<f64, CheckpointError> {
        let t = self.tensor(name)?;
        if t.numel() != 4 {
            return Err(CheckpointError::Invalid(format!("{name} is not an encoded f64")));
        }
        let bits = t.data().iter().enumerate().fold(0u64, |b, (i, &v)| b | ((v as u64) << (16 * i)));
        Ok(f64::from_bits(bits))
    }
}

fn csec_meta(cfg: &CsecConfig) -> Vec<(String, Tensor<f32>)> {
    vec![
        meta_int("csec.meta.features", cfg.features),
        meta_int("csec.meta.hidden", cfg.hidden),
        meta_int("csec.meta.max_token_side", cfg.max_token_side),
        meta_int("csec.meta.symmetrize", usize::from(cfg.sym_norm.symmetrize == Symmetrize::Average)),
        meta_int("csec.meta.degree", usize::from(cfg.sym_norm.degree == Degree::RowSum)),
        meta_f64("csec.meta.eps", cfg.eps),
        meta_f64("csec.meta.gamma_init", cfg.gamma_init),
    ]
}

fn csec_entries(stage: &CsecStage) -> Vec<(String, Tensor<f32>)> {
    let mut v = csec_meta(&stage.config);
    v.extend(stage.params.prefixed("csec.").into_entries().into_iter().map(|(n, t)| (n, t.with_requires_grad(false))));
    v
}

fn split_meta(entries: Vec<(String, Tensor<f32>)>) -> (ParamSet<f32>, ParamSet<f32>) {
    let mut meta = ParamSet::new();
    let mut params = ParamSet::new();
    for (n, t) in entries {
        if n.starts_with("meta.") || n.starts_with("csec.meta.") {
            meta.push(n, t);
        } else {
            params.push(n, t);
        }
    }
    (meta, params)
}

fn csec_from(meta: &Meta<'_>, params: &ParamSet<f32>) -> Result<Option<CsecStage>, CheckpointError> {
    if meta.0.get("csec.meta.features").is_none() {
        return Ok(None);
    }
    let config = CsecConfig {
        features: meta.int("csec.meta.features")?,
        hidden: meta.int("csec.meta.hidden")?,
        max_token_side: meta.int("csec.meta.max_token_side")?,
        sym_norm: SymNormVariant {
            symmetrize: if meta.int("csec.meta.symmetrize")? == 1 { Symmetrize::Average } else { Symmetrize::Literal },
            degree: if meta.int("csec.meta.degree")? == 1 { Degree::RowSum } else { Degree::Diagonal },
        },
        eps: meta.f64("csec.meta.eps")?,
        gamma_init: meta.f64("csec.meta.gamma_init")?,
    };
    let stage_params = params.strip_prefix("csec.");
    let reference = crate::csec::init_params::<f32>(&config, 0);
    for (name, t) in reference.iter() {
        match stage_params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            _ => return Err(CheckpointError::Invalid(format!("color stage parameter {name} missing or misshapen"))),
        }
    }
    Ok(Some(CsecStage { config, params: stage_params }))
}

fn model_entries(model: &Model) -> Vec<(String, Tensor<f32>)> {
    let c = &model.config;
    let mut v = vec![
        meta_int("meta.height", c.height),
        meta_int("meta.width", c.width),
        meta_int("meta.patch", c.patch),
        meta_int("meta.dim", c.dim),
        meta_int("meta.heads", c.heads),
        meta_int("meta.blocks", c.blocks),
        meta_int("meta.classes", c.classes),
        meta_int("meta.mlp_hidden", c.mlp_hidden),
        meta_int("meta.rope", usize::from(c.rope)),
        meta_f64("meta.rope_base", c.rope_base),
        meta_int("meta.use_csec", usize::from(c.use_csec)),
        meta_f64("meta.seed", f64::from_bits(c.seed)),
    ];
    v.extend(model.params.iter().map(|(n, t)| (n.to_string(), t.clone().with_requires_grad(false))));
    if let Some(stage) = &model.csec {
        v.extend(csec_entries(stage));
    }
    v
}

pub fn save_model(path: &Path, model: &Model) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, &model_entries(model))?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model, CheckpointError> {
    let (meta_set, params) = split_meta(read_tensors(&fs::read(path)?)?);
    let meta = Meta(&meta_set);
    let config = ModelConfig {
        height: meta.int("meta.height")?,
        width: meta.int("meta.width")?,
        patch: meta.int("meta.patch")?,
        dim: meta.int("meta.dim")?,
        heads: meta.int("meta.heads")?,
        blocks: meta.int("meta.blocks")?,
        classes: meta.int("meta.classes")?,
        mlp_hidden: meta.int("meta.mlp_hidden")?,
        rope: meta.int("meta.rope")? == 1,
        rope_base: meta.f64("meta.rope_base")?,
        use_csec: meta.int("meta.use_csec")? == 1,
        seed: meta.f64("meta.seed")?.to_bits(),
    };
    let csec = csec_from(&meta, &params)?;
    let net = params.iter().filter(|(n, _)| !n.starts_with("csec.")).fold(ParamSet::new(), |mut s, (n, t)| {
        s.push(n, t.clone());
        s
    });
    let mut model = Model::from_params(&config, net)?;
    model.csec = csec;
    Ok(model)
}

pub fn save_csec(path: &Path, stage: &CsecStage) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, &csec_entries(stage))?;
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a color stage from either a stage-only or a full model checkpoint.
pub fn load_csec(path: &Path) -> Result<CsecStage, CheckpointError> {
    let (meta_set, params) = split_meta(read_tensors(&fs::read(path)?)?);
    csec_from(&Meta(&meta_set), &params)?
        .ok_or_else(|| CheckpointError::Invalid("checkpoint holds no color-correction stage".into()))
}
