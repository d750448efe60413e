use rayon::prelude::*;

use super::{argmax_mask, build_model, forward_var, CsecStage, Model, ModelConfig, SegError};
use crate::dataio::{Mask, Sample, IGNORE_INDEX};
use crate::denoise::{
    filter_scores, pixel_weight_map, quantile_threshold, score, DenoiseConfig, DenoiseMode, ErrorScore,
    FilterEntry, FilterReport,
};
use crate::kv::{KvConfig, KvError};
use crate::metrics::ConfusionMatrix;
use crate::optim::{Adam, AdamConfig};
use crate::rng::SplitMix64;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    /// Drives the sample order.
    pub seed: u64,
    pub denoise: Option<DenoiseConfig>,
    /// After filtering, keep training the round-one model instead of
    /// starting again from the initial parameters.
    pub continue_after_filter: bool,
    pub ignore_index: u8,
}

/// A per-pixel cross-entropy this large means logits on the order of the
/// ceiling itself, far past where f32 keeps any useful precision; treated
/// as divergence alongside non-finite values.
pub const LOSS_CEILING: f64 = 1e6;

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 30,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            batch_size: 4,
            seed: 0,
            denoise: None,
            continue_after_filter: false,
            ignore_index: IGNORE_INDEX,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SegError> {
        if self.epochs == 0 {
            return Err(SegError::ConfigInvalid("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(SegError::ConfigInvalid(format!("bad learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(SegError::ConfigInvalid("batch_size must be at least 1".into()));
        }
        if let Some(d) = &self.denoise {
            if !(d.quantile > 0.0 && d.quantile < 1.0) {
                return Err(SegError::ConfigInvalid(format!("denoise quantile {} outside (0,1)", d.quantile)));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    /// Consumes the training keys of `cfg`, leaving the rest.
    pub fn take_from(cfg: &mut KvConfig) -> Result<Self, KvError> {
        let d = Self::default();
        let ignore_index = cfg.take_or("ignore_index", d.ignore_index)?;
        let quantile = cfg.take_or("denoise_q", DenoiseConfig::default().quantile)?;
        let mode = match cfg.take_or("denoise", "none".to_string())?.as_str() {
            "none" => None,
            "drop_samples" => Some(DenoiseMode::DropSamples),
            "downweight_pixels" => Some(DenoiseMode::DownweightPixels),
            other => {
                return Err(KvError::Invalid {
                    key: "denoise".into(),
                    reason: format!("expected none, drop_samples or downweight_pixels, got {other:?}"),
                })
            }
        };
        Ok(Self {
            epochs: cfg.take_or("epochs", d.epochs)?,
            learning_rate: cfg.take_or("learning_rate", d.learning_rate)?,
            beta1: cfg.take_or("beta1", d.beta1)?,
            beta2: cfg.take_or("beta2", d.beta2)?,
            eps: cfg.take_or("adam_eps", d.eps)?,
            batch_size: cfg.take_or("batch_size", d.batch_size)?,
            seed: cfg.take_or("train_seed", d.seed)?,
            denoise: mode.map(|mode| DenoiseConfig { quantile, mode, ignore_index }),
            continue_after_filter: cfg.take_or("continue_after_filter", d.continue_after_filter)?,
            ignore_index,
        })
    }

    pub fn write_to(&self, cfg: &mut KvConfig) {
        cfg.set("epochs", self.epochs);
        cfg.set("learning_rate", self.learning_rate);
        cfg.set("beta1", self.beta1);
        cfg.set("beta2", self.beta2);
        cfg.set("adam_eps", self.eps);
        cfg.set("batch_size", self.batch_size);
        cfg.set("train_seed", self.seed);
        cfg.set("ignore_index", self.ignore_index);
        cfg.set("continue_after_filter", self.continue_after_filter);
        match &self.denoise {
            None => cfg.set("denoise", "none"),
            Some(d) => {
                cfg.set(
                    "denoise",
                    match d.mode {
                        DenoiseMode::DropSamples => "drop_samples",
                        DenoiseMode::DownweightPixels => "downweight_pixels",
                    },
                );
                cfg.set("denoise_q", d.quantile);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    /// `None` without a validation set.
    pub val_miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn final_val_miou(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_miou)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("epoch\tloss\tval_miou\n");
        for e in &self.epochs {
            let v = e.val_miou.map_or("nan".to_string(), |v| v.to_string());
            s.push_str(&format!("{}\t{}\t{}\n", e.epoch, e.loss, v));
        }
        s
    }
}

fn check_sample(model: &Model, s: &Sample) -> Result<(), SegError> {
    let c = &model.config;
    if s.image.shape() != [1, 3, c.height, c.width] || (s.mask.height, s.mask.width) != (c.height, c.width) {
        return Err(SegError::ShapeMismatch(format!(
            "sample {} is {:?} with a {}x{} mask; model expects {}x{}",
            s.id,
            s.image.shape(),
            s.mask.height,
            s.mask.width,
            c.height,
            c.width
        )));
    }
    Ok(())
}

/// Validation mIoU over every class, absent classes skipped.
pub(crate) fn val_miou(model: &Model, inputs: &[Tensor<f32>], masks: &[&Mask], ignore: u8) -> Result<Option<f64>, SegError> {
    let preds = inputs
        .par_iter()
        .map(|x| model.logits_preprocessed(x).map(|l| argmax_mask(&l)))
        .collect::<Result<Vec<_>, _>>()?;
    let mut cm = ConfusionMatrix::new(model.config.classes);
    for (p, m) in preds.iter().zip(masks) {
        cm.update(p, m, ignore)?;
    }
    Ok(cm.miou(&[]).ok())
}

pub fn train(
    model: &mut Model,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    pixel_weights: Option<&[Vec<f32>]>,
) -> Result<TrainReport, SegError> {
    train_observed(model, train, val, cfg, pixel_weights, &mut |_| {})
}

/// [`train`], calling `observer` after every epoch.
pub fn train_observed(
    model: &mut Model,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    pixel_weights: Option<&[Vec<f32>]>,
    observer: &mut dyn FnMut(&EpochStats),
) -> Result<TrainReport, SegError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(SegError::EmptyDataset);
    }
    for s in train.iter().chain(val) {
        check_sample(model, s)?;
    }
    if let Some(w) = pixel_weights {
        if w.len() != train.len() || w.iter().any(|m| m.len() != model.config.height * model.config.width) {
            return Err(SegError::ShapeMismatch("one weight per training pixel required".into()));
        }
    }
    let prep = |set: &[Sample]| set.par_iter().map(|s| model.preprocess(&s.image)).collect::<Result<Vec<_>, _>>();
    let inputs = prep(train)?;
    let val_inputs = prep(val)?;
    let val_masks: Vec<&Mask> = val.iter().map(|s| &s.mask).collect();
    let targets: Vec<Vec<usize>> = train.iter().map(|s| s.mask.targets()).collect();

    let mut opt = Adam::<f32>::new(cfg.adam(), &model.params);
    let mut rng = SplitMix64::new(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g);
            let mut logits = Vec::with_capacity(batch.len());
            let mut tgt = Vec::new();
            let mut wts = Vec::new();
            for &i in batch {
                let x = g.constant(&inputs[i]);
                logits.push(forward_var(&mut g, &bound, x, &model.config, &model.plan)?);
                tgt.extend_from_slice(&targets[i]);
                if let Some(w) = pixel_weights {
                    wts.extend_from_slice(&w[i]);
                }
            }
            let all = g.concat(&logits, 0)?;
            let weights = pixel_weights.map(|_| wts.as_slice());
            let loss = g.cross_entropy(all, &tgt, cfg.ignore_index as usize, weights)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() || value > LOSS_CEILING {
                return Err(SegError::Divergence { epoch, step });
            }
            let grads = g.backward(loss)?;
            model.params.zero_grad();
            model.params.accumulate(&bound, &grads);
            opt.step(&mut model.params);
            if model.params.iter().any(|(_, t)| !t.is_finite()) {
                return Err(SegError::Divergence { epoch, step });
            }
            total += value;
            batches += 1;
        }
        let val_miou =
            if val.is_empty() { None } else { val_miou(model, &val_inputs, &val_masks, cfg.ignore_index)? };
        let stats = EpochStats { epoch, loss: total / batches as f64, val_miou };
        observer(&stats);
        report.epochs.push(stats);
    }
    Ok(report)
}

/// Per-pixel negative log-likelihood of the labels under `[1, K, H, W]`
/// logits; ignored pixels score 0.
pub fn pixel_nll(logits: &Tensor<f32>, mask: &Mask, ignore: u8) -> Vec<f64> {
    let (k, hw) = (logits.shape()[1], mask.height * mask.width);
    let d = logits.data();
    (0..hw)
        .map(|p| {
            let t = mask.labels[p];
            if t == ignore {
                return 0.0;
            }
            let mx = (0..k).map(|c| d[c * hw + p] as f64).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..k).map(|c| (d[c * hw + p] as f64 - mx).exp()).sum::<f64>().ln();
            lse - d[t as usize * hw + p] as f64
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DenoiseOutcome {
    pub model: Model,
    pub round1: TrainReport,
    pub round2: TrainReport,
    pub scores: Vec<ErrorScore>,
    pub filter: FilterReport,
}

fn scores_from_logits(samples: &[Sample], logits: &[Tensor<f32>], ignore: u8) -> Result<Vec<ErrorScore>, SegError> {
    samples
        .iter()
        .zip(logits)
        .map(|(s, l)| Ok(score(&s.id, &argmax_mask(l), &s.mask, ignore)?))
        .collect()
}

/// Pixel error rate of the model's prediction on every sample.
pub fn score_samples(model: &Model, samples: &[Sample], ignore: u8) -> Result<Vec<ErrorScore>, SegError> {
    let logits = samples.par_iter().map(|s| model.logits(&s.image)).collect::<Result<Vec<_>, _>>()?;
    scores_from_logits(samples, &logits, ignore)
}

/// Trains on everything, scores every training sample with that model,
/// filters (or builds pixel weights), then trains again.
pub fn train_with_denoise(
    train_set: &[Sample],
    val: &[Sample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    csec: Option<&CsecStage>,
) -> Result<DenoiseOutcome, SegError> {
    let dn = cfg.denoise.ok_or_else(|| SegError::ConfigInvalid("denoising settings are missing".into()))?;
    let fresh = || -> Result<Model, SegError> {
        let mut m = build_model(model_cfg)?;
        m.csec = csec.cloned();
        Ok(m)
    };
    let mut model = fresh()?;
    let round1 = train(&mut model, train_set, val, cfg, None)?;

    let logits = train_set.par_iter().map(|s| model.logits(&s.image)).collect::<Result<Vec<_>, _>>()?;
    let scores = scores_from_logits(train_set, &logits, dn.ignore_index)?;

    let mut next = if cfg.continue_after_filter { model } else { fresh()? };
    let (filter, round2) = match dn.mode {
        DenoiseMode::DropSamples => {
            let filter = filter_scores(&scores, &dn)?;
            let kept: Vec<Sample> =
                train_set.iter().zip(&filter.entries).filter(|(_, e)| e.kept).map(|(s, _)| s.clone()).collect();
            let report = train(&mut next, &kept, val, cfg, None)?;
            (filter, report)
        }
        DenoiseMode::DownweightPixels => {
            let weights = train_set
                .iter()
                .zip(&logits)
                .map(|(s, l)| {
                    let w = pixel_weight_map(&pixel_nll(l, &s.mask, dn.ignore_index), dn.quantile)?;
                    Ok(w.into_iter().map(|v| v as f32).collect())
                })
                .collect::<Result<Vec<Vec<f32>>, SegError>>()?;
            let rates: Vec<f64> = scores.iter().map(|s| s.error_rate).collect();
            let filter = FilterReport {
                threshold: quantile_threshold(&rates, dn.quantile)?,
                entries: scores
                    .iter()
                    .map(|s| FilterEntry { sample_id: s.sample_id.clone(), error_rate: s.error_rate, kept: true })
                    .collect(),
            };
            let report = train(&mut next, train_set, val, cfg, Some(&weights))?;
            (filter, report)
        }
    };
    Ok(DenoiseOutcome { model: next, round1, round2, scores, filter })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::synth::{generate, SynthSpec};
    use crate::dataio::Split;

    fn tiny_model() -> ModelConfig {
        ModelConfig { height: 16, width: 16, dim: 16, heads: 2, blocks: 1, mlp_hidden: 16, seed: 2, ..Default::default() }
    }

    fn data(n: usize) -> Vec<Sample> {
        let spec = SynthSpec { seed: 4, n_samples: n, val_samples: 0, height: 16, width: 16, ..Default::default() };
        generate(&spec).unwrap().split(Split::Train)
    }

    #[test]
    fn memorizes_one_sample() {
        let spec = SynthSpec { seed: 4, n_samples: 1, val_samples: 0, ..Default::default() };
        let d = generate(&spec).unwrap().split(Split::Train);
        let mut m = build_model(&ModelConfig::default()).unwrap();
        let cfg = TrainConfig { epochs: 50, learning_rate: 1e-2, batch_size: 1, ..Default::default() };
        let r = train(&mut m, &d, &[], &cfg, None).unwrap();
        assert!(*r.losses().last().unwrap() < 0.05, "{:?}", r.losses());
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let d = data(3);
        let mut m = build_model(&tiny_model()).unwrap();
        let before = m.params.clone();
        let cfg = TrainConfig { epochs: 2, learning_rate: 0.0, ..Default::default() };
        train(&mut m, &d, &[], &cfg, None).unwrap();
        for ((_, a), (_, b)) in m.params.iter().zip(before.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn deterministic_trajectory() {
        let d = data(6);
        let cfg = TrainConfig { epochs: 2, learning_rate: 1e-3, batch_size: 4, ..Default::default() };
        let run = || {
            let mut m = build_model(&tiny_model()).unwrap();
            let r = train(&mut m, &d, &d, &cfg, None).unwrap();
            (r, m.params)
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
    }

    #[test]
    fn empty_and_divergent() {
        let mut m = build_model(&tiny_model()).unwrap();
        assert!(matches!(train(&mut m, &[], &[], &TrainConfig::default(), None), Err(SegError::EmptyDataset)));
        let d = data(4);
        let cfg = TrainConfig { epochs: 5, learning_rate: 1e6, ..Default::default() };
        assert!(matches!(train(&mut m, &d, &[], &cfg, None), Err(SegError::Divergence { .. })));
    }

    #[test]
    fn keep_everything_matches_plain_retrain() {
        let d = data(8);
        let base = TrainConfig { epochs: 2, learning_rate: 1e-3, ..Default::default() };
        let dn = DenoiseConfig { quantile: 0.999, ..Default::default() };
        let cfg = TrainConfig { denoise: Some(dn), ..base.clone() };
        let out = train_with_denoise(&d, &[], &tiny_model(), &cfg, None).unwrap();
        assert_eq!(out.filter.dropped(), 0);
        let mut plain = build_model(&tiny_model()).unwrap();
        let r = train(&mut plain, &d, &[], &base, None).unwrap();
        assert_eq!(out.round2, r);
        assert_eq!(out.model.params, plain.params);
    }

    #[test]
    fn pixel_nll_matches_hand_value() {
        let l = Tensor::new(&[1, 2, 1, 2], vec![0.0, 0.0, 0.0, 1.0_f32.ln()]).unwrap();
        let m = Mask { height: 1, width: 2, labels: vec![0, 255] };
        let v = pixel_nll(&l, &m, 255);
        assert!((v[0] - 2f64.ln()).abs() < 1e-12);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn kv_round_trip() {
        let cfg = TrainConfig {
            epochs: 7,
            learning_rate: 0.01,
            denoise: Some(DenoiseConfig { quantile: 0.9, mode: DenoiseMode::DownweightPixels, ..Default::default() }),
            ..Default::default()
        };
        let mut kv = KvConfig::new();
        cfg.write_to(&mut kv);
        let back = TrainConfig::take_from(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(back, cfg);
    }
}
