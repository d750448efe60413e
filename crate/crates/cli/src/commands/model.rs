use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use segkit::csec::{self as color, CsecConfig, CsecTrainConfig};
use segkit::dataio::{load_image, load_samples, pnm, Sample, SampleRecord, Split};
use segkit::kv::KvConfig;
use segkit::metrics::{EvalReport, Evaluator, RobotWeights};
use segkit::segnet::{
    build_model, load_csec, load_model, save_model, train_observed, train_with_denoise, CsecStage, ModelConfig,
    TrainConfig, TrainReport,
};

use super::{create_dir, load_records, of_split, read_config, write_text};
use crate::error::{CliError, CliResult};
use crate::plot;
use crate::record::Recorder;
use crate::{EvalArgs, PredictArgs, TrainArgs, Weighting};

fn record_samples(rec: &mut Recorder, records: &[SampleRecord]) -> CliResult<()> {
    for r in records {
        rec.input(&r.image_path)?;
        rec.input(&r.mask_path)?;
    }
    Ok(())
}

fn write_curves(out: &Path, report: &TrainReport) -> CliResult<()> {
    write_text(&out.join("loss.svg"), &plot::line_chart("training loss", "epoch", &report.losses()))?;
    let miou: Vec<f64> = report.epochs.iter().map(|e| e.val_miou.unwrap_or(f64::NAN)).collect();
    write_text(&out.join("miou.svg"), &plot::line_chart("validation mIoU", "epoch", &miou))
}

fn fmt_miou(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.4}"))
}

pub fn train(a: TrainArgs, argv: Vec<String>) -> CliResult<()> {
    let mut kv = read_config(Some(&a.config), &a.overrides)?;
    if a.denoise && matches!(kv.get("denoise"), None | Some("none")) {
        kv.set("denoise", "drop_samples");
    }
    if a.use_csec {
        kv.set("use_csec", true);
    }
    let model_cfg = ModelConfig::take_from(&mut kv)?;
    let train_cfg = TrainConfig::take_from(&mut kv)?;
    let csec_cfg = CsecConfig::take_from(&mut kv)?;
    let csec_train = CsecTrainConfig::take_from(&mut kv)?;
    kv.finish()?;
    model_cfg.validate()?;
    train_cfg.validate()?;

    let mut resolved = KvConfig::new();
    model_cfg.write_to(&mut resolved);
    train_cfg.write_to(&mut resolved);
    csec_cfg.write_to(&mut resolved);
    csec_train.write_to(&mut resolved);
    let resolved = resolved.to_text();

    let mut rec = Recorder::new("train", argv, &a.out, true);
    rec.config("--config", resolved.clone());
    rec.input(&a.config)?;
    rec.input(&a.data)?;

    let stage = match (&a.csec, model_cfg.use_csec) {
        (_, false) => None,
        (Some(p), true) => {
            rec.input(p)?;
            Some(load_csec(p)?)
        }
        (None, true) => Some(CsecStage { config: csec_cfg, params: color::init_params(&csec_cfg, csec_train.seed) }),
    };

    let records = load_records(&a.data)?;
    let (train_recs, val_recs) = (of_split(&records, Split::Train), of_split(&records, Split::Val));
    record_samples(&mut rec, &train_recs)?;
    record_samples(&mut rec, &val_recs)?;
    let train_set = load_samples(&train_recs)?;
    let val_set = load_samples(&val_recs)?;
    create_dir(&a.out)?;

    let (model, report) = if train_cfg.denoise.is_some() {
        let outcome = train_with_denoise(&train_set, &val_set, &model_cfg, &train_cfg, stage.as_ref())?;
        write_text(&a.out.join("filter.tsv"), &outcome.filter.to_tsv())?;
        write_text(&a.out.join("metrics_round1.tsv"), &outcome.round1.to_tsv())?;
        eprintln!(
            "round one val mIoU {}; dropped {} of {} samples (threshold {:.6})",
            fmt_miou(outcome.round1.final_val_miou()),
            outcome.filter.dropped(),
            outcome.filter.entries.len(),
            outcome.filter.threshold
        );
        (outcome.model, outcome.round2)
    } else {
        let mut model = build_model(&model_cfg)?;
        model.csec = stage;
        let report = train_observed(&mut model, &train_set, &val_set, &train_cfg, None, &mut |e| {
            eprintln!("epoch {:>3}  loss {:.5}  val mIoU {}", e.epoch + 1, e.loss, fmt_miou(e.val_miou));
        })?;
        (model, report)
    };

    save_model(&a.out.join("model.smk"), &model)?;
    write_text(&a.out.join("metrics.tsv"), &report.to_tsv())?;
    write_text(&a.out.join("config.txt"), &resolved)?;
    if a.plot {
        write_curves(&a.out, &report)?;
    }
    rec.output_tree()?;
    rec.finish()?;
    let last = report.epochs.last().expect("at least one epoch");
    println!("final loss {:.5}, val mIoU {}", last.loss, fmt_miou(last.val_miou));
    Ok(())
}

#[derive(Serialize)]
struct EvalJson<'a> {
    split: String,
    samples: usize,
    weighting: &'a str,
    excluded: &'a [usize],
    class_iou: &'a [Option<f64>],
    miou: f64,
    per_robot: &'a std::collections::BTreeMap<String, f64>,
    weights: std::collections::BTreeMap<String, f64>,
    weighted_miou: Option<f64>,
}

fn eval_tsv(report: &EvalReport, weighting: &str) -> String {
    let mut s = String::from("# metric\tkey\tvalue\n");
    for (k, v) in report.class_iou.iter().enumerate() {
        s.push_str(&format!("class_iou\t{k}\t{}\n", v.map_or("nan".into(), |v| v.to_string())));
    }
    for (r, v) in &report.per_robot {
        s.push_str(&format!("robot_miou\t{r}\t{v}\n"));
    }
    s.push_str(&format!("miou\tall\t{}\n", report.miou));
    if let Some(w) = report.weighted {
        s.push_str(&format!("weighted_miou\t{weighting}\t{w}\n"));
    }
    s
}

fn predict_all(model: &segkit::segnet::Model, samples: &[Sample]) -> CliResult<Vec<segkit::dataio::Mask>> {
    Ok(samples.par_iter().map(|s| model.predict(&s.image)).collect::<Result<Vec<_>, _>>()?)
}

pub fn eval(a: EvalArgs, argv: Vec<String>) -> CliResult<()> {
    let split: Split = a.split.parse().map_err(|()| CliError::usage(format!("unknown split {:?}", a.split)))?;
    let out = match &a.out {
        Some(o) => o.clone(),
        None => a.checkpoint.parent().unwrap_or(Path::new(".")).join("eval"),
    };
    let mut rec = Recorder::new("eval", argv, &out, true);
    rec.input(&a.checkpoint)?;
    rec.input(&a.data)?;
    let model = load_model(&a.checkpoint)?;
    let records = of_split(&load_records(&a.data)?, split);
    if records.is_empty() {
        return Err(CliError::usage(format!("{}: no {split} rows", a.data.display())));
    }
    record_samples(&mut rec, &records)?;
    let samples = load_samples(&records)?;
    let preds = predict_all(&model, &samples)?;

    let mut ev = Evaluator::new(model.config.classes, a.ignore_index);
    for (s, p) in samples.iter().zip(&preds) {
        ev.add(&s.robot_id, p, &s.mask)?;
    }
    let (name, weights) = match a.weights {
        Weighting::Goose => ("goose", RobotWeights::goose()),
        Weighting::Uniform => {
            let robots: BTreeSet<&str> = samples.iter().map(|s| s.robot_id.as_str()).collect();
            ("uniform", RobotWeights::uniform(&robots.into_iter().collect::<Vec<_>>())?)
        }
    };
    let report = ev.report(&a.exclude, Some(&weights))?;

    create_dir(&out)?;
    write_text(&out.join("eval.tsv"), &eval_tsv(&report, name))?;
    let json = EvalJson {
        split: split.to_string(),
        samples: samples.len(),
        weighting: name,
        excluded: &a.exclude,
        class_iou: &report.class_iou,
        miou: report.miou,
        per_robot: &report.per_robot,
        weights: weights.iter().map(|(r, w)| (r.to_string(), w)).collect(),
        weighted_miou: report.weighted,
    };
    write_text(&out.join("eval.json"), &(serde_json::to_string_pretty(&json).expect("serializable") + "\n"))?;
    if a.plot {
        let bars: Vec<_> = report.class_iou.iter().enumerate().map(|(k, v)| (k.to_string(), *v)).collect();
        write_text(&out.join("class_iou.svg"), &plot::bar_chart("IoU per class", &bars))?;
        let bars: Vec<_> = report.per_robot.iter().map(|(r, v)| (r.clone(), Some(*v))).collect();
        write_text(&out.join("robot_miou.svg"), &plot::bar_chart("mIoU per robot", &bars))?;
    }
    rec.output_tree()?;
    rec.finish()?;

    for (k, v) in report.class_iou.iter().enumerate() {
        println!("class {k:>3}  IoU {}", fmt_miou(*v));
    }
    for (r, v) in &report.per_robot {
        println!("robot {r}  mIoU {v:.4}");
    }
    println!("mIoU {:.4}", report.miou);
    println!("weighted mIoU ({name}) {}", fmt_miou(report.weighted));
    Ok(())
}

pub fn predict(a: PredictArgs, argv: Vec<String>) -> CliResult<()> {
    let model = load_model(&a.checkpoint)?;
    let image = load_image(&a.input)?;
    let c = &model.config;
    if image.shape() != [1, 3, c.height, c.width] {
        return Err(CliError::usage(format!(
            "{}: image is {}x{}, model expects {}x{}",
            a.input.display(),
            image.shape()[3],
            image.shape()[2],
            c.width,
            c.height
        )));
    }
    let mask = model.predict(&image)?;
    pnm::write(&a.out, &mask.to_pnm()).map_err(|e| CliError::at(&a.out, e))?;
    let mut rec = Recorder::new("predict", argv, &a.out, false);
    rec.input(&a.checkpoint)?;
    rec.input(&a.input)?;
    rec.output(&a.out)?;
    rec.finish()?;
    Ok(())
}
