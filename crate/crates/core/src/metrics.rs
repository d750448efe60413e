//! Confusion-matrix IoU and per-robot weighted aggregation.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::dataio::Mask;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction is {pred:?} but ground truth is {gt:?}")]
    ShapeMismatch { pred: (usize, usize), gt: (usize, usize) },
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("every class is excluded or absent")]
    AllClassesExcludedOrUndefined,
    #[error("no score for weighted robot {0:?}")]
    MissingRobot(String),
    #[error("invalid robot weights: {0}")]
    InvalidWeights(String),
}

/// Rows are ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, k: usize) -> u64 {
        self.counts[k * self.classes..(k + 1) * self.classes].iter().sum()
    }

    pub fn col_sum(&self, k: usize) -> u64 {
        (0..self.classes).map(|r| self.count(r, k)).sum()
    }

    /// Counts every pixel whose ground truth is not `ignore`. Validates the
    /// whole pair before touching the counts.
    pub fn update(&mut self, pred: &Mask, gt: &Mask, ignore: u8) -> Result<(), MetricsError> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(MetricsError::ShapeMismatch {
                pred: (pred.height, pred.width),
                gt: (gt.height, gt.width),
            });
        }
        let k = self.classes;
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == ignore {
                continue;
            }
            for c in [g, p] {
                if c as usize >= k {
                    return Err(MetricsError::ClassOutOfRange { class: c as usize, classes: k });
                }
            }
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g != ignore {
                self.counts[g as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// Elementwise sum; associative and commutative.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "merging matrices of different class counts");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `None` when the class is absent from both prediction and truth.
    pub fn class_iou(&self, k: usize) -> Result<Option<f64>, MetricsError> {
        if k >= self.classes {
            return Err(MetricsError::ClassOutOfRange { class: k, classes: self.classes });
        }
        let tp = self.count(k, k);
        let union = self.row_sum(k) + self.col_sum(k) - tp;
        Ok((union > 0).then(|| tp as f64 / union as f64))
    }

    /// Mean IoU over defined, non-excluded classes.
    pub fn miou(&self, excluded: &[usize]) -> Result<f64, MetricsError> {
        for &e in excluded {
            if e >= self.classes {
                return Err(MetricsError::ClassOutOfRange { class: e, classes: self.classes });
            }
        }
        let ratios: Vec<(u64, u64)> = (0..self.classes)
            .filter(|k| !excluded.contains(k))
            .map(|k| {
                let tp = self.count(k, k);
                (tp, self.row_sum(k) + self.col_sum(k) - tp)
            })
            .filter(|&(_, union)| union > 0)
            .collect();
        if ratios.is_empty() {
            return Err(MetricsError::AllClassesExcludedOrUndefined);
        }
        Ok(mean_of_ratios(&ratios))
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of `num / den` fractions, summed as an exact rational and divided
/// once, so e.g. (1/2 + 2/3) / 2 is exactly 7/12. Falls back to a float
/// mean if the common denominator outgrows `u128`.
fn mean_of_ratios(ratios: &[(u64, u64)]) -> f64 {
    let exact = ratios.iter().try_fold((0u128, 1u128), |(n, d), &(a, b)| {
        let (a, b) = (a as u128, b as u128);
        let num = n.checked_mul(b)?.checked_add(a.checked_mul(d)?)?;
        let den = d.checked_mul(b)?;
        let g = gcd(num, den).max(1);
        Some((num / g, den / g))
    });
    match exact.and_then(|(n, d)| Some((n, d.checked_mul(ratios.len() as u128)?))) {
        Some((n, d)) => {
            let g = gcd(n, d).max(1);
            (n / g) as f64 / (d / g) as f64
        }
        None => ratios.iter().map(|&(a, b)| a as f64 / b as f64).sum::<f64>() / ratios.len() as f64,
    }
}

/// Functional form of [`ConfusionMatrix::update`].
pub fn confusion_update(
    mut cm: ConfusionMatrix,
    pred: &Mask,
    gt: &Mask,
    ignore: u8,
) -> Result<ConfusionMatrix, MetricsError> {
    cm.update(pred, gt, ignore)?;
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotWeights {
    weights: Vec<(String, f64)>,
}

impl RobotWeights {
    pub fn new(weights: Vec<(String, f64)>) -> Result<Self, MetricsError> {
        if weights.is_empty() {
            return Err(MetricsError::InvalidWeights("no robots".into()));
        }
        if weights.iter().any(|(_, w)| !(0.0..=1.0).contains(w)) {
            return Err(MetricsError::InvalidWeights("weights must lie in [0,1]".into()));
        }
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(MetricsError::InvalidWeights(format!("weights sum to {total}")));
        }
        Ok(Self { weights })
    }

    /// The challenge's per-platform data shares.
    pub fn goose() -> Self {
        let w = [("MuCAR-3", 0.67), ("ALICE", 0.24), ("Spot v2", 0.06), ("Spot v1", 0.03)];
        Self::new(w.iter().map(|&(r, v)| (r.to_string(), v)).collect()).expect("valid defaults")
    }

    /// Equal weight for each listed robot.
    pub fn uniform<S: AsRef<str>>(robots: &[S]) -> Result<Self, MetricsError> {
        let w = 1.0 / robots.len() as f64;
        Self::new(robots.iter().map(|r| (r.as_ref().to_string(), w)).collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.weights.iter().map(|(r, w)| (r.as_str(), *w))
    }
}

pub fn weighted_miou(per_robot: &BTreeMap<String, f64>, weights: &RobotWeights) -> Result<f64, MetricsError> {
    let mut total = 0.0;
    for (robot, w) in weights.iter() {
        let m = per_robot.get(robot).ok_or_else(|| MetricsError::MissingRobot(robot.to_string()))?;
        total += w * m;
    }
    Ok(total)
}

/// Per-class IoU over all robots, per-robot mIoU, and the weighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub per_robot: BTreeMap<String, f64>,
    pub weighted: Option<f64>,
}

/// Accumulates predictions grouped by robot.
#[derive(Debug, Clone)]
pub struct Evaluator {
    classes: usize,
    ignore: u8,
    overall: ConfusionMatrix,
    per_robot: BTreeMap<String, ConfusionMatrix>,
}

impl Evaluator {
    pub fn new(classes: usize, ignore: u8) -> Self {
        Self { classes, ignore, overall: ConfusionMatrix::new(classes), per_robot: BTreeMap::new() }
    }

    pub fn add(&mut self, robot: &str, pred: &Mask, gt: &Mask) -> Result<(), MetricsError> {
        let cm = confusion_update(ConfusionMatrix::new(self.classes), pred, gt, self.ignore)?;
        self.overall.merge(&cm);
        self.per_robot.entry(robot.to_string()).or_insert_with(|| ConfusionMatrix::new(self.classes)).merge(&cm);
        Ok(())
    }

    pub fn overall(&self) -> &ConfusionMatrix {
        &self.overall
    }

    pub fn report(&self, excluded: &[usize], weights: Option<&RobotWeights>) -> Result<EvalReport, MetricsError> {
        let class_iou = (0..self.classes).map(|k| self.overall.class_iou(k)).collect::<Result<_, _>>()?;
        let mut per_robot = BTreeMap::new();
        for (r, cm) in &self.per_robot {
            per_robot.insert(r.clone(), cm.miou(excluded)?);
        }
        let weighted = weights.map(|w| weighted_miou(&per_robot, w)).transpose()?;
        Ok(EvalReport { class_iou, miou: self.overall.miou(excluded)?, per_robot, weighted })
    }
}
