//! Central finite differences as an independent oracle for every backward
//! rule on the graph.

mod suites;

pub use suites::{op_names, run_suite, Suite, SuiteError, TRIALS};

use crate::rng::SplitMix64;
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Default step for central differences in `f64`.
pub const STEP: f64 = 1e-5;
/// Relative error tolerated between analytic and numeric gradients.
pub const TOLERANCE: f64 = 1e-4;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i` of `x`.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape(), out).expect("same shape as input")
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Result of checking one op over several trials.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub op: String,
    pub trials: usize,
    pub coords_checked: usize,
    pub worst_rel_error: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst_rel_error <= TOLERANCE
    }
}

/// Graph builder under test: records an output from the bound inputs.
pub type Build<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError> + 'a;

/// Checks gradients of a randomly projected output, `sum(build(x) * R)`,
/// with respect to every input marked `requires_grad`.
///
/// `max_coords` caps the coordinates probed per input (picked at random);
/// `None` probes all. `fault` multiplies the analytic gradient, which lets
/// negative controls confirm the checker actually fails.
pub fn check_gradients(
    inputs: &[Tensor<f64>],
    build: &Build<'_>,
    rng: &mut SplitMix64,
    max_coords: Option<usize>,
    fault: Option<f64>,
) -> Result<(f64, usize), TensorError> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = build(&mut g, &vars)?;
    let proj = Tensor::from_fn(g.shape(out), |_| rng.uniform(-1.0, 1.0));
    let loss = project(&mut g, out, &proj)?;
    let grads = g.backward(loss)?;

    // Outputs are differenced element by element before projecting, so the
    // large shared part of f(x+h) and f(x-h) cancels before any summation.
    let eval = |xs: &[Tensor<f64>]| -> Result<Tensor<f64>, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t)).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).clone())
    };

    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (idx, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic = grads.get_or_zeros(vars[idx], input.numel());
        let mut coords: Vec<usize> = (0..input.numel()).collect();
        if let Some(cap) = max_coords {
            if cap < coords.len() {
                rng.shuffle(&mut coords);
                coords.truncate(cap);
            }
        }
        for &c in &coords {
            let orig = probe[idx].data()[c];
            probe[idx].data_mut()[c] = orig + STEP;
            let up = eval(&probe)?;
            probe[idx].data_mut()[c] = orig - STEP;
            let down = eval(&probe)?;
            probe[idx].data_mut()[c] = orig;
            let numeric = up
                .data()
                .iter()
                .zip(down.data())
                .zip(proj.data())
                .map(|((u, d), r)| (u - d) * r)
                .sum::<f64>()
                / (2.0 * STEP);
            let a = analytic[c] * fault.unwrap_or(1.0);
            worst = worst.max(rel_error(a, numeric));
            checked += 1;
        }
    }
    Ok((worst, checked))
}

fn project(g: &mut Graph<f64>, out: Var, proj: &Tensor<f64>) -> Result<Var, TensorError> {
    let r = g.constant(proj);
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}
