//! Seeded gradient-check cases for every differentiable op.

use std::fmt::Display;
use std::rc::Rc;
use std::str::FromStr;

use thiserror::Error;

use super::{check_gradients, Build, CheckOutcome};
use crate::csec::{self, CsecConfig, TokenGrid};
use crate::params::{Bound, ParamSet};
use crate::rng::{derive_seed, SplitMix64};
use crate::rope::{self, FreqTable, PatchGrid};
use crate::segnet::{self, ModelConfig, Plan};
use crate::tensor::{Degree, Graph, SymNormVariant, Symmetrize, Tensor, TensorError, Var};

/// Trials per op.
pub const TRIALS: usize = 20;
/// Factor applied to the analytic gradient of a deliberately broken op.
const BREAK_FACTOR: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    All,
    Tensor,
    Rope,
    Csec,
    Segnet,
}

impl FromStr for Suite {
    type Err = SuiteError;
    fn from_str(s: &str) -> Result<Self, SuiteError> {
        match s {
            "all" => Ok(Suite::All),
            "tensor" => Ok(Suite::Tensor),
            "rope" => Ok(Suite::Rope),
            "csec" => Ok(Suite::Csec),
            "segnet" => Ok(Suite::Segnet),
            other => Err(SuiteError::UnknownSuite(other.to_string())),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SuiteError {
    #[error("unknown suite {0:?}; expected all, tensor, rope, csec or segnet")]
    UnknownSuite(String),
    #[error("no op named {0:?} in the selected suite")]
    UnknownOp(String),
    #[error("{op}: {source}")]
    Build { op: &'static str, source: TensorError },
}

type Trial = (Vec<Tensor<f64>>, Box<Build<'static>>);

struct Case {
    name: &'static str,
    suite: Suite,
    /// Coordinates probed per input in a trial; `None` probes all.
    max_coords: Option<usize>,
    /// Probe every coordinate on the first trial regardless of the cap.
    full_first: bool,
    make: fn(&mut SplitMix64) -> Trial,
}

fn wrap<E: Display>(op: &'static str) -> impl Fn(E) -> TensorError {
    move |e| TensorError::InvalidArgument { op, detail: e.to_string() }
}

fn rand(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0)).with_requires_grad(true)
}

/// Random values kept at least `gap` away from zero, for kinked ops.
fn rand_off_zero(rng: &mut SplitMix64, shape: &[usize], gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v = rng.uniform(gap, 1.0);
        if rng.chance(0.5) {
            -v
        } else {
            v
        }
    })
    .with_requires_grad(true)
}

fn fixed(t: Tensor<f64>) -> Tensor<f64> {
    t.with_requires_grad(false)
}

fn unary(rng: &mut SplitMix64, shape: &[usize], f: fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>) -> Trial {
    (vec![rand(rng, shape)], Box::new(move |g, v| f(g, v[0])))
}

fn binary(
    rng: &mut SplitMix64,
    a: &[usize],
    b: &[usize],
    f: fn(&mut Graph<f64>, Var, Var) -> Result<Var, TensorError>,
) -> Trial {
    (vec![rand(rng, a), rand(rng, b)], Box::new(move |g, v| f(g, v[0], v[1])))
}

fn positive_definite(rng: &mut SplitMix64, n: usize, positive: bool) -> Tensor<f64> {
    let mut t = Tensor::from_fn(&[n, n], |_| if positive { rng.uniform(0.1, 1.0) } else { rng.uniform(-0.5, 0.5) });
    for i in 0..n {
        t.data_mut()[i * n + i] += n as f64;
    }
    t.with_requires_grad(true)
}

fn sym_norm_case(rng: &mut SplitMix64, variant: SymNormVariant) -> Trial {
    let positive = variant.degree == Degree::RowSum;
    let n = 2 + rng.below(6);
    (vec![positive_definite(rng, n, positive)], Box::new(move |g, v| g.sym_norm(v[0], 1e-8, variant)))
}

fn taps(rng: &mut SplitMix64) -> Tensor<f64> {
    // away from the integer grid, where bilinear sampling has kinks
    Tensor::from_fn(&[9, 2], |_| rng.uniform(0.1, 0.9) - f64::from(rng.chance(0.5) as u8))
        .with_requires_grad(true)
}

fn csec_cfg() -> CsecConfig {
    CsecConfig { hidden: 4, features: 4, ..Default::default() }
}

/// Every parameter of `set` becomes a differentiable input.
fn param_inputs(set: &ParamSet<f64>) -> (Vec<String>, Vec<Tensor<f64>>) {
    set.iter().map(|(n, t)| (n.to_string(), t.clone().with_requires_grad(true))).unzip()
}

fn image(rng: &mut SplitMix64, h: usize, w: usize) -> Tensor<f64> {
    fixed(Tensor::from_fn(&[1, 3, h, w], |_| rng.uniform(0.05, 0.95)))
}

fn segnet_cfg(seed: u64) -> ModelConfig {
    ModelConfig { height: 16, width: 16, patch: 4, dim: 16, heads: 2, blocks: 2, mlp_hidden: 16, seed, ..Default::default() }
}

fn cases() -> Vec<Case> {
    use Suite::*;
    let c = |name, suite, make| Case { name, suite, max_coords: None, full_first: false, make };
    vec![
        c("add", Tensor, |r| binary(r, &[3, 4], &[3, 4], |g, a, b| g.add(a, b))),
        c("sub", Tensor, |r| binary(r, &[3, 4], &[3, 4], |g, a, b| g.sub(a, b))),
        c("mul", Tensor, |r| binary(r, &[3, 4], &[3, 4], |g, a, b| g.mul(a, b))),
        c("scale", Tensor, |r| unary(r, &[2, 5], |g, a| Ok(g.scale(a, -1.7)))),
        c("add_scalar", Tensor, |r| unary(r, &[2, 5], |g, a| Ok(g.add_scalar(a, 0.3)))),
        c("mul_scalar_var", Tensor, |r| binary(r, &[3, 4], &[1], |g, a, s| g.mul_scalar_var(a, s))),
        c("relu", Tensor, |r| (vec![rand_off_zero(r, &[4, 5], 0.01)], Box::new(|g, v| Ok(g.relu(v[0]))))),
        c("sigmoid", Tensor, |r| unary(r, &[4, 5], |g, a| Ok(g.sigmoid(a)))),
        c("matmul", Tensor, |r| binary(r, &[3, 4], &[4, 5], |g, a, b| g.matmul(a, b))),
        c("transpose", Tensor, |r| unary(r, &[3, 5], |g, a| g.transpose(a))),
        c("gram", Tensor, |r| unary(r, &[5, 3], |g, a| g.gram(a))),
        c("conv2d", Tensor, |r| binary(r, &[1, 2, 5, 5], &[3, 2, 3, 3], |g, x, k| g.conv2d(x, k, 1, 1))),
        c("conv2d/stride2", Tensor, |r| binary(r, &[2, 2, 6, 7], &[3, 2, 3, 3], |g, x, k| g.conv2d(x, k, 2, 1))),
        c("add_row_bias", Tensor, |r| binary(r, &[3, 4], &[4], |g, a, b| g.add_row_bias(a, b))),
        c("mul_row", Tensor, |r| binary(r, &[3, 4], &[4], |g, a, b| g.mul_row(a, b))),
        c("add_channel_bias", Tensor, |r| binary(r, &[2, 3, 2, 2], &[3], |g, a, b| g.add_channel_bias(a, b))),
        c("softmax/last", Tensor, |r| unary(r, &[3, 4], |g, a| g.softmax(a, 1))),
        c("softmax/inner", Tensor, |r| unary(r, &[2, 3, 4], |g, a| g.softmax(a, 1))),
        c("layer_norm", Tensor, |r| unary(r, &[3, 6], |g, a| g.layer_norm(a, 1e-5))),
        c("cross_entropy", Tensor, |r| {
            let targets: Vec<usize> = (0..8).map(|_| if r.chance(0.2) { 255 } else { r.below(3) }).collect();
            let targets = if targets.iter().all(|&t| t == 255) { vec![0; 8] } else { targets };
            (vec![rand(r, &[2, 3, 2, 2])], Box::new(move |g, v| g.cross_entropy(v[0], &targets, 255, None)))
        }),
        c("cross_entropy/weighted", Tensor, |r| {
            let targets: Vec<usize> = (0..8).map(|_| r.below(3)).collect();
            let weights: Vec<f64> = (0..8).map(|_| r.uniform(0.1, 2.0)).collect();
            (vec![rand(r, &[2, 3, 2, 2])], Box::new(move |g, v| g.cross_entropy(v[0], &targets, 255, Some(&weights))))
        }),
        c("sum", Tensor, |r| unary(r, &[3, 4], |g, a| Ok(g.sum(a)))),
        c("mean", Tensor, |r| unary(r, &[3, 4], |g, a| Ok(g.mean(a)))),
        c("reshape", Tensor, |r| unary(r, &[3, 4], |g, a| g.reshape(a, &[2, 6]))),
        c("gather", Tensor, |r| {
            let index: Rc<[usize]> = (0..10).map(|_| r.below(12)).collect();
            (vec![rand(r, &[3, 4])], Box::new(move |g, v| g.gather(v[0], index.clone(), &[2, 5])))
        }),
        c("concat/rows", Tensor, |r| binary(r, &[2, 3], &[4, 3], |g, a, b| g.concat(&[a, b], 0))),
        c("concat/cols", Tensor, |r| binary(r, &[2, 3], &[2, 5], |g, a, b| g.concat(&[a, b], 1))),
        c("rotary", Tensor, |r| {
            let angles: Vec<f64> = (0..6).map(|_| r.uniform(-4.0, 4.0)).collect();
            let cos: Rc<[f64]> = angles.iter().map(|a| a.cos()).collect();
            let sin: Rc<[f64]> = angles.iter().map(|a| a.sin()).collect();
            (vec![rand(r, &[3, 4])], Box::new(move |g, v| g.rotary(v[0], cos.clone(), sin.clone())))
        }),
        c("avg_pool", Tensor, |r| unary(r, &[1, 2, 4, 6], |g, a| g.avg_pool(a, 2))),
        c("rotate", Rope, |r| {
            let pos: Vec<i64> = (0..3).map(|_| r.below(41) as i64 - 20).collect();
            let freqs = FreqTable::new(8, rope::DEFAULT_BASE).expect("even");
            (vec![rand(r, &[3, 8])], Box::new(move |g, v| rope::rotate_var(g, v[0], &pos, &freqs).map_err(wrap("rotate"))))
        }),
        c("rotate_2d", Rope, |r| {
            let pos: Vec<(i64, i64)> = (0..4).map(|_| (r.below(9) as i64, r.below(9) as i64 - 4)).collect();
            let freqs = FreqTable::new(4, rope::DEFAULT_BASE).expect("even");
            (vec![rand(r, &[4, 8])], Box::new(move |g, v| rope::rotate_2d_var(g, v[0], &pos, &freqs).map_err(wrap("rotate_2d"))))
        }),
        c("rope_attention", Rope, |r| {
            let grid = PatchGrid::new(2, 3).positions();
            let freqs = FreqTable::new(4, 100.0).expect("even");
            let inputs = vec![rand(r, &[6, 8]), rand(r, &[6, 8]), rand(r, &[6, 5])];
            (
                inputs,
                Box::new(move |g, v| {
                    rope::attention_var(g, v[0], v[1], v[2], Some((&grid, &freqs))).map_err(wrap("rope_attention"))
                }),
            )
        }),
        c("attention", Rope, |r| {
            let inputs = vec![rand(r, &[5, 4]), rand(r, &[5, 4]), rand(r, &[5, 3])];
            (inputs, Box::new(|g, v| rope::attention_var(g, v[0], v[1], v[2], None).map_err(wrap("attention"))))
        }),
        c("offset_conv", Csec, |r| {
            let inputs = vec![rand(r, &[1, 2, 5, 6]), rand(r, &[3, 2, 3, 3]), taps(r)];
            (inputs, Box::new(|g, v| g.offset_conv(v[0], v[1], v[2])))
        }),
        c("sym_norm", Csec, |r| sym_norm_case(r, SymNormVariant::default())),
        c("sym_norm/average", Csec, |r| {
            sym_norm_case(r, SymNormVariant { symmetrize: Symmetrize::Average, degree: Degree::Diagonal })
        }),
        c("sym_norm/row_sum", Csec, |r| {
            sym_norm_case(r, SymNormVariant { symmetrize: Symmetrize::Literal, degree: Degree::RowSum })
        }),
        c("cose", Csec, |r| {
            let params = csec::random_params::<f64>(&csec_cfg(), r.next_u64());
            let (names, mut inputs) = param_inputs(&params);
            let keep: Vec<bool> = names.iter().map(|n| n.starts_with("cose.")).collect();
            for (t, k) in inputs.iter_mut().zip(&keep) {
                if !k {
                    *t = fixed(t.clone());
                }
            }
            inputs.push(image(r, 8, 8));
            (
                inputs,
                Box::new(move |g, v| {
                    let p = Bound::from_parts(&names, &v[..names.len()]);
                    let (dd, db) = csec::cose_var(g, &p, v[names.len()]).map_err(wrap("cose"))?;
                    g.concat(&[dd, db], 1)
                }),
            )
        }),
        c("como_fuse", Csec, |r| {
            let cfg = csec_cfg();
            let names = ["fuse.gamma_x", "fuse.gamma_d", "fuse.gamma_b", "fuse.bias"];
            let mut inputs = vec![rand(r, &[1]), rand(r, &[1]), rand(r, &[1]), rand(r, &[4])];
            for _ in 0..3 {
                inputs.push(rand(r, &[6, 4]));
            }
            (
                inputs,
                Box::new(move |g, v| {
                    let p = Bound::from_parts(&names, &v[..4]);
                    csec::como_var(g, &p, v[4], v[5], v[6], &cfg).map_err(wrap("como_fuse"))
                }),
            )
        }),
        c("decode", Csec, |r| {
            let cfg = csec_cfg();
            let params = csec::random_params::<f64>(&cfg, r.next_u64()).strip_prefix("dec.").prefixed("dec.");
            let (names, mut inputs) = param_inputs(&params);
            inputs.push(rand(r, &[4, cfg.features]));
            inputs.push(image(r, 8, 8));
            let n = names.len();
            (
                inputs,
                Box::new(move |g, v| {
                    let p = Bound::from_parts(&names, &v[..n]);
                    let grid = TokenGrid { h: 2, w: 2, pool: 1 };
                    csec::decode_var(g, &p, v[n], grid, v[n + 1]).map_err(wrap("decode"))
                }),
            )
        }),
        Case {
            name: "csec_correct",
            suite: Csec,
            max_coords: Some(3),
            full_first: false,
            make: |r| {
                let cfg = csec_cfg();
                let params = csec::random_params::<f64>(&cfg, r.next_u64());
                let (names, mut inputs) = param_inputs(&params);
                inputs.push(image(r, 8, 8));
                let n = names.len();
                (
                    inputs,
                    Box::new(move |g, v| {
                        let p = Bound::from_parts(&names, &v[..n]);
                        csec::correct_one_var(g, &p, v[n], &cfg).map_err(wrap("csec_correct"))
                    }),
                )
            },
        },
        Case {
            name: "segnet_forward",
            suite: Segnet,
            max_coords: Some(4),
            full_first: true,
            make: |r| {
                let cfg = segnet_cfg(r.next_u64());
                let mut params = segnet::init_params::<f64>(&cfg);
                // move norm gains and biases off their init so every path is exercised
                for (_, t) in params.iter_mut() {
                    for v in t.data_mut() {
                        *v += r.uniform(-0.2, 0.2);
                    }
                }
                let plan = Plan::new(&cfg).expect("valid config");
                let (names, mut inputs) = param_inputs(&params);
                inputs.push(crate::tensor::Tensor::from_fn(&[1, 3, 16, 16], |_| r.uniform(0.0, 1.0)).with_requires_grad(true));
                let n = names.len();
                (
                    inputs,
                    Box::new(move |g, v| {
                        let p = Bound::from_parts(&names, &v[..n]);
                        segnet::forward_var(g, &p, v[n], &cfg, &plan).map_err(wrap("segnet_forward"))
                    }),
                )
            },
        },
    ]
}

/// Names of the ops a suite covers.
pub fn op_names(suite: Suite) -> Vec<&'static str> {
    cases().into_iter().filter(|c| suite == Suite::All || c.suite == suite).map(|c| c.name).collect()
}

/// Runs every case of `suite` for [`TRIALS`] seeded trials. `broken` names
/// an op whose analytic gradient is deliberately scaled, as a negative
/// control.
pub fn run_suite(suite: Suite, broken: Option<&str>) -> Result<Vec<CheckOutcome>, SuiteError> {
    let selected: Vec<Case> = cases().into_iter().filter(|c| suite == Suite::All || c.suite == suite).collect();
    if let Some(b) = broken {
        if !selected.iter().any(|c| c.name == b) {
            return Err(SuiteError::UnknownOp(b.to_string()));
        }
    }
    let mut out = Vec::with_capacity(selected.len());
    for (ci, case) in selected.iter().enumerate() {
        let fault = (broken == Some(case.name)).then_some(BREAK_FACTOR);
        let mut worst = 0.0f64;
        let mut coords = 0;
        for trial in 0..TRIALS {
            let mut rng = SplitMix64::new(derive_seed(0x6AD_C4EC, (ci * 1000 + trial) as u64));
            let (inputs, build) = (case.make)(&mut rng);
            let cap = if case.full_first && trial == 0 { None } else { case.max_coords };
            let (w, n) = check_gradients(&inputs, build.as_ref(), &mut rng, cap, fault)
                .map_err(|source| SuiteError::Build { op: case.name, source })?;
            worst = worst.max(w);
            coords += n;
        }
        out.push(CheckOutcome { op: case.name.to_string(), trials: TRIALS, coords_checked: coords, worst_rel_error: worst });
    }
    Ok(out)
}
