//! Rotary positional embedding for image patches.
//!
//! Each head vector is split into consecutive pairs `(x[2i], x[2i+1])`, and
//! pair `i` is rotated by `θ_i = p · ω_i` with `ω_i = base^(-2i/d)`. For 2-D
//! patch grids the head dimension is split in half: the first half encodes
//! the row index, the second half the column index, each with its own
//! per-axis table of dimension `d/2`. Only queries and keys are rotated.

use std::rc::Rc;

use thiserror::Error;

use crate::tensor::{Element, Graph, Tensor, TensorError, Var};

pub const DEFAULT_BASE: f64 = 10_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RopeError {
    #[error("head dimension must be even and >= 2, got {0}")]
    OddHeadDim(usize),
    #[error("2-D rotary embedding needs a dimension divisible by 4, got {0}")]
    DimNotDivisibleBy4(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Rotation frequencies `ω_i = base^(-2i/d)` for `i in [0, d/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqTable {
    head_dim: usize,
    base: f64,
    freqs: Vec<f64>,
}

impl FreqTable {
    pub fn new(head_dim: usize, base: f64) -> Result<Self, RopeError> {
        if head_dim < 2 || head_dim % 2 != 0 {
            return Err(RopeError::OddHeadDim(head_dim));
        }
        let d = head_dim as f64;
        let freqs = (0..head_dim / 2).map(|i| base.powf(-2.0 * i as f64 / d)).collect();
        Ok(Self { head_dim, base, freqs })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }
}

pub fn freq_table(head_dim: usize, base: f64) -> Result<FreqTable, RopeError> {
    FreqTable::new(head_dim, base)
}

/// Row-major grid of patches; patch `t` sits at `(t / cols, t % cols)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn positions(&self) -> Vec<(i64, i64)> {
        (0..self.rows)
            .flat_map(|r| (0..self.cols).map(move |c| (r as i64, c as i64)))
            .collect()
    }
}

/// Cosines and sines for a run of pairs at position `p`; angles in `f64`.
fn push_angles<T: Element>(freqs: &[f64], p: i64, cos: &mut Vec<T>, sin: &mut Vec<T>) {
    for &w in freqs {
        let theta = p as f64 * w;
        cos.push(T::lit(theta.cos()));
        sin.push(T::lit(theta.sin()));
    }
}

fn as_rows(shape: &[usize], d: usize) -> Result<usize, RopeError> {
    match shape.last() {
        Some(&last) if last == d => Ok(shape.iter().product::<usize>() / d),
        _ => Err(RopeError::ShapeMismatch(format!("last extent of {shape:?} must be {d}"))),
    }
}

/// Rotates every row of `x[R, d]` by its own 1-D position.
pub fn rotate_var<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    positions: &[i64],
    freqs: &FreqTable,
) -> Result<Var, RopeError> {
    let rows = as_rows(g.shape(x), freqs.head_dim)?;
    if rows != positions.len() {
        return Err(RopeError::ShapeMismatch(format!("{rows} rows but {} positions", positions.len())));
    }
    let (mut cos, mut sin) = (Vec::new(), Vec::new());
    for &p in positions {
        push_angles(freqs.freqs(), p, &mut cos, &mut sin);
    }
    let flat = g.reshape(x, &[rows, freqs.head_dim])?;
    let y = g.rotary(flat, Rc::from(cos), Rc::from(sin))?;
    let shape = g.shape(x).to_vec();
    Ok(g.reshape(y, &shape)?)
}

/// Axial 2-D rotation of every row of `x[R, d]`. `axis_freqs` is the per-axis
/// table, whose head dimension must be `d / 2`.
pub fn rotate_2d_var<T: Element>(
    g: &mut Graph<T>,
    x: Var,
    positions: &[(i64, i64)],
    axis_freqs: &FreqTable,
) -> Result<Var, RopeError> {
    let d = *g.shape(x).last().expect("tensors have rank >= 1");
    if d % 4 != 0 {
        return Err(RopeError::DimNotDivisibleBy4(d));
    }
    if axis_freqs.head_dim != d / 2 {
        return Err(RopeError::ShapeMismatch(format!(
            "axis table has head dim {}, expected {}",
            axis_freqs.head_dim,
            d / 2
        )));
    }
    let rows = as_rows(g.shape(x), d)?;
    if rows != positions.len() {
        return Err(RopeError::ShapeMismatch(format!("{rows} rows but {} positions", positions.len())));
    }
    let (mut cos, mut sin) = (Vec::new(), Vec::new());
    for &(py, px) in positions {
        push_angles(axis_freqs.freqs(), py, &mut cos, &mut sin);
        push_angles(axis_freqs.freqs(), px, &mut cos, &mut sin);
    }
    let shape = g.shape(x).to_vec();
    let flat = g.reshape(x, &[rows, d])?;
    let y = g.rotary(flat, Rc::from(cos), Rc::from(sin))?;
    Ok(g.reshape(y, &shape)?)
}

/// Rotates `x[..., d]` with a single 1-D position `p`.
pub fn rotate<T: Element>(x: &Tensor<T>, p: i64, freqs: &FreqTable) -> Result<Tensor<T>, RopeError> {
    let rows = as_rows(x.shape(), freqs.head_dim)?;
    let mut g = Graph::new();
    let v = g.constant(x);
    let y = rotate_var(&mut g, v, &vec![p; rows], freqs)?;
    Ok(g.value(y).clone())
}

/// Axial 2-D rotation of `x[..., d]` at patch position `(py, px)`.
pub fn rotate_2d<T: Element>(
    x: &Tensor<T>,
    pos: (i64, i64),
    axis_freqs: &FreqTable,
) -> Result<Tensor<T>, RopeError> {
    let d = *x.shape().last().expect("tensors have rank >= 1");
    if d % 4 != 0 {
        return Err(RopeError::DimNotDivisibleBy4(d));
    }
    let rows = x.numel() / d;
    let mut g = Graph::new();
    let v = g.constant(x);
    let y = rotate_2d_var(&mut g, v, &vec![pos; rows], axis_freqs)?;
    Ok(g.value(y).clone())
}

/// Single-head attention; when `positions` is given, queries and keys are
/// rotated axially before the scaled inner product.
pub fn attention_var<T: Element>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    positions: Option<(&[(i64, i64)], &FreqTable)>,
) -> Result<Var, RopeError> {
    let (tq, d) = match g.shape(q) {
        [t, d] => (*t, *d),
        s => return Err(RopeError::ShapeMismatch(format!("queries must be [T, d], got {s:?}"))),
    };
    if g.shape(k) != [tq, d] || g.shape(v).len() != 2 || g.shape(v)[0] != tq {
        return Err(RopeError::ShapeMismatch(format!(
            "q {:?}, k {:?}, v {:?}",
            g.shape(q),
            g.shape(k),
            g.shape(v)
        )));
    }
    let (q, k) = match positions {
        Some((pos, freqs)) => (rotate_2d_var(g, q, pos, freqs)?, rotate_2d_var(g, k, pos, freqs)?),
        None => (q, k),
    };
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, T::lit(1.0 / (d as f64).sqrt()));
    let weights = g.softmax(scores, 1)?;
    Ok(g.matmul(weights, v)?)
}

/// Attention over a patch grid with rotary queries and keys.
///
/// `q`, `k` are `[T, d]`, `v` is `[T, dv]`, `T = rows * cols`, and
/// `axis_freqs` is the per-axis table (head dimension `d/2`).
pub fn rope_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    grid: PatchGrid,
    axis_freqs: &FreqTable,
) -> Result<Tensor<T>, RopeError> {
    if q.shape().first() != Some(&grid.len()) {
        return Err(RopeError::ShapeMismatch(format!("{:?} for a grid of {} patches", q.shape(), grid.len())));
    }
    rope_attention_at(q, k, v, &grid.positions(), axis_freqs)
}

/// [`rope_attention`] with explicit per-token positions.
pub fn rope_attention_at<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    positions: &[(i64, i64)],
    axis_freqs: &FreqTable,
) -> Result<Tensor<T>, RopeError> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
    let out = attention_var(&mut g, qv, kv, vv, Some((positions, axis_freqs)))?;
    Ok(g.value(out).clone())
}

/// Attention without any positional signal.
pub fn plain_attention<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>, RopeError> {
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q), g.constant(k), g.constant(v));
    let out = attention_var(&mut g, qv, kv, vv, None)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn randn(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.normal())
    }

    fn norm(t: &Tensor<f64>) -> f64 {
        t.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn table_values() {
        let t8 = freq_table(8, DEFAULT_BASE).unwrap();
        assert_eq!(t8.freqs()[0], 1.0);
        assert_eq!(t8.freqs()[1], 0.1);
        let t4 = freq_table(4, DEFAULT_BASE).unwrap();
        assert_eq!(t4.freqs(), &[1.0, 0.01]);
        assert!(t8.freqs().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn odd_dim_rejected() {
        assert_eq!(freq_table(7, DEFAULT_BASE), Err(RopeError::OddHeadDim(7)));
        assert_eq!(freq_table(0, DEFAULT_BASE), Err(RopeError::OddHeadDim(0)));
    }

    #[test]
    fn position_zero_is_identity() {
        let mut rng = SplitMix64::new(1);
        let x = randn(&mut rng, &[3, 8]);
        let f = freq_table(8, DEFAULT_BASE).unwrap();
        assert_eq!(rotate(&x, 0, &f).unwrap(), x);
    }

    #[test]
    fn quarter_turn() {
        // d = 2 has ω_0 = 1, so p = π/2 would be needed for a quarter turn;
        // positions are integers, so use a table whose single frequency makes
        // θ = π/2 at p = 1.
        let f = FreqTable { head_dim: 2, base: DEFAULT_BASE, freqs: vec![std::f64::consts::FRAC_PI_2] };
        let x = Tensor::<f64>::new(&[2], vec![1.0, 0.0]).unwrap();
        let y = rotate(&x, 1, &f).unwrap();
        assert!(y.data()[0].abs() < 1e-9);
        assert!((y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rotate_checks_last_extent() {
        let f = freq_table(8, DEFAULT_BASE).unwrap();
        let x = Tensor::<f64>::zeros(&[2, 6]);
        assert!(matches!(rotate(&x, 1, &f), Err(RopeError::ShapeMismatch(_))));
    }

    #[test]
    fn rotate_2d_cases() {
        let mut rng = SplitMix64::new(2);
        let f = freq_table(4, DEFAULT_BASE).unwrap();
        let x = randn(&mut rng, &[8]);
        assert_eq!(rotate_2d(&x, (0, 0), &f).unwrap(), x);
        let y = rotate_2d(&x, (1, 0), &f).unwrap();
        assert_eq!(&y.data()[4..], &x.data()[4..]);
        assert_ne!(&y.data()[..4], &x.data()[..4]);
        let y = rotate_2d(&x, (-3, 11), &f).unwrap();
        assert!((norm(&y) - norm(&x)).abs() < 1e-12);
        let bad = Tensor::<f64>::zeros(&[6]);
        assert_eq!(rotate_2d(&bad, (0, 0), &f), Err(RopeError::DimNotDivisibleBy4(6)));
    }

    #[test]
    fn single_token_returns_value_row() {
        let f = freq_table(4, DEFAULT_BASE).unwrap();
        let q = Tensor::new(&[1, 8], vec![0.3; 8]).unwrap();
        let v = Tensor::new(&[1, 3], vec![1.5, -2.0, 0.25]).unwrap();
        let out = rope_attention(&q, &q, &v, PatchGrid::new(1, 1), &f).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn shared_position_matches_plain_attention() {
        let mut rng = SplitMix64::new(3);
        let f = freq_table(4, DEFAULT_BASE).unwrap();
        let (q, k, v) = (randn(&mut rng, &[5, 8]), randn(&mut rng, &[5, 8]), randn(&mut rng, &[5, 2]));
        let a = rope_attention_at(&q, &k, &v, &[(3, 5); 5], &f).unwrap();
        let b = plain_attention(&q, &k, &v).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_size_must_match() {
        let f = freq_table(4, DEFAULT_BASE).unwrap();
        let q = Tensor::<f64>::zeros(&[5, 8]);
        let v = Tensor::<f64>::zeros(&[5, 2]);
        assert!(rope_attention(&q, &q, &v, PatchGrid::new(2, 2), &f).is_err());
    }
}
