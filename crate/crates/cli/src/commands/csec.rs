use segkit::csec::{csec_correct, init_params, psnr, train_csec as fit, CsecConfig, CsecTrainConfig};
use segkit::dataio::corrupt::corrupt_gamma_region;
use segkit::dataio::{load_image, pnm, Split};
use segkit::kv::KvConfig;
use segkit::rng::derive_seed;
use segkit::segnet::{load_csec, save_csec, CsecStage};

use super::{create_dir, load_records, of_split, read_config, write_text};
use crate::error::{CliError, CliResult};
use crate::record::Recorder;
use crate::{CorrectArgs, TrainCsecArgs};

/// Seeds the held-out corruptions; distinct from every training draw,
/// which derive from the training seed.
const HELD_OUT_SEED: u64 = 0xC0FFEE;

pub fn train_csec(a: TrainCsecArgs, argv: Vec<String>) -> CliResult<()> {
    let mut kv = read_config(a.config.as_deref(), &a.overrides)?;
    let cfg = CsecConfig::take_from(&mut kv)?;
    let tc = CsecTrainConfig::take_from(&mut kv)?;
    kv.finish()?;
    let mut resolved = KvConfig::new();
    cfg.write_to(&mut resolved);
    tc.write_to(&mut resolved);

    let mut rec = Recorder::new("train-csec", argv, &a.out, true);
    rec.config("--config", resolved.to_text());
    if let Some(c) = &a.config {
        rec.input(c)?;
    }
    rec.input(&a.data)?;
    let records = load_records(&a.data)?;
    let (train_recs, held_recs) = (of_split(&records, Split::Train), of_split(&records, Split::Val));
    if train_recs.is_empty() {
        return Err(CliError::usage(format!("{}: no train rows", a.data.display())));
    }
    let load = |rs: &[segkit::dataio::SampleRecord], rec: &mut Recorder| {
        rs.iter()
            .map(|r| {
                rec.input(&r.image_path)?;
                Ok(load_image(&r.image_path)?)
            })
            .collect::<CliResult<Vec<_>>>()
    };
    let clean = load(&train_recs, &mut rec)?;
    let held = load(&held_recs, &mut rec)?;

    let mut params = init_params::<f32>(&cfg, tc.seed);
    let report = fit(&mut params, &clean, &cfg, &tc)?;

    create_dir(&a.out)?;
    let mut loss = String::from("epoch\tloss\n");
    for (e, l) in report.epoch_loss.iter().enumerate() {
        loss.push_str(&format!("{}\t{l}\n", e + 1));
    }
    write_text(&a.out.join("csec_metrics.tsv"), &loss)?;

    if !held.is_empty() {
        let mut table = String::from("# sample_id\tpsnr_corrupted\tpsnr_corrected\n");
        let (mut before, mut after) = (0.0, 0.0);
        for (i, (r, img)) in held_recs.iter().zip(&held).enumerate() {
            let corrupted = corrupt_gamma_region(img, derive_seed(HELD_OUT_SEED, i as u64));
            let corrected = csec_correct(&corrupted, &params, &cfg)?;
            let (b, c) = (psnr(&corrupted, img), psnr(&corrected, img));
            table.push_str(&format!("{}\t{b}\t{c}\n", r.sample_id));
            before += b;
            after += c;
        }
        let n = held.len() as f64;
        table.push_str(&format!("# mean\t{}\t{}\n", before / n, after / n));
        write_text(&a.out.join("psnr.tsv"), &table)?;
        println!(
            "held-out PSNR: corrupted {:.3} dB, corrected {:.3} dB, gain {:+.3} dB over {} images",
            before / n,
            after / n,
            (after - before) / n,
            held.len()
        );
    }
    save_csec(&a.out.join("csec.smk"), &CsecStage { config: cfg, params })?;
    rec.output_tree()?;
    rec.finish()?;
    Ok(())
}

pub fn correct(a: CorrectArgs, argv: Vec<String>) -> CliResult<()> {
    let stage = load_csec(&a.checkpoint)?;
    let image = load_image(&a.input)?;
    let out = stage.apply(&image)?;
    let img = pnm::tensor_to_image(&out).map_err(|e| CliError::at(&a.out, e))?;
    pnm::write(&a.out, &img).map_err(|e| CliError::at(&a.out, e))?;

    let mut rec = Recorder::new("correct", argv, &a.out, false);
    rec.input(&a.checkpoint)?;
    rec.input(&a.input)?;
    if let Some(r) = &a.reference {
        rec.input(r)?;
        let clean = load_image(r)?;
        if clean.shape() != image.shape() {
            return Err(CliError::usage("reference and input differ in size"));
        }
        // score the written bytes, not the unquantized output
        let written = pnm::image_to_tensor::<f32>(&img);
        let (b, c) = (psnr(&image, &clean), psnr(&written, &clean));
        eprintln!("PSNR input {b:.3} dB, corrected {c:.3} dB, gain {:+.3} dB", c - b);
    }
    rec.output(&a.out)?;
    rec.finish()?;
    Ok(())
}
