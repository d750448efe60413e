use segkit::dataio::{load_mask, load_samples, synth_dataset, write_manifest, Split, SynthSpec};
use segkit::denoise::{filter_dataset, score, DenoiseConfig, DenoiseMode};
use segkit::segnet::{load_model, score_samples};

use super::{create_dir, load_records, of_split, read_text, write_text};
use crate::error::{CliError, CliResult};
use crate::record::Recorder;
use crate::{FilterArgs, SynthArgs};

pub fn synth(a: SynthArgs, argv: Vec<String>) -> CliResult<()> {
    let text = read_text(&a.spec)?;
    let kv = text.parse().map_err(|e| CliError::usage(format!("{}: {e}", a.spec.display())))?;
    let spec = SynthSpec::from_kv(kv)?;
    let out = synth_dataset(&spec, &a.out)?;

    let mut rec = Recorder::new("synth", argv, &a.out, true);
    rec.config("--spec", spec.to_kv().to_text());
    rec.input(&a.spec)?;
    rec.output_tree()?;
    rec.finish()?;
    println!("wrote {} samples to {}", out.samples.len(), a.out.display());
    Ok(())
}

pub fn filter(a: FilterArgs, argv: Vec<String>) -> CliResult<()> {
    let records = load_records(&a.data)?;
    let mut train = of_split(&records, Split::Train);
    if train.is_empty() {
        return Err(CliError::usage(format!("{}: no train rows to filter", a.data.display())));
    }
    let mut rec = Recorder::new("filter", argv, &a.out, true);
    rec.input(&a.data)?;

    let scores = match (&a.checkpoint, &a.predictions) {
        (Some(ckpt), _) => {
            rec.input(ckpt)?;
            let model = load_model(ckpt)?;
            score_samples(&model, &load_samples(&train)?, a.ignore_index)?
        }
        (None, Some(dir)) => train
            .iter()
            .map(|r| {
                let pred_path = dir.join(format!("{}.pgm", r.sample_id));
                rec.input(&pred_path)?;
                let pred = load_mask(&pred_path)?;
                Ok(score(&r.sample_id, &pred, &load_mask(&r.mask_path)?, a.ignore_index)?)
            })
            .collect::<CliResult<Vec<_>>>()?,
        (None, None) => unreachable!("clap requires a scorer"),
    };
    for (r, s) in train.iter_mut().zip(&scores) {
        rec.input(&r.mask_path)?;
        r.error_rate = Some(s.error_rate);
    }
    let cfg = DenoiseConfig { quantile: a.quantile, mode: DenoiseMode::DropSamples, ignore_index: a.ignore_index };
    let (_, report) = filter_dataset(&train, &cfg)?;

    // other splits pass through; train rows keep their order
    let mut dropped = report.dropped_ids().into_iter().collect::<Vec<_>>();
    dropped.sort_unstable();
    let kept: Vec<_> =
        records.iter().filter(|r| r.split != Split::Train || dropped.binary_search(&r.sample_id.as_str()).is_err()).cloned().collect();
    create_dir(&a.out)?;
    let manifest = a.out.join("manifest.tsv");
    write_manifest(&manifest, &kept)?;
    write_text(&a.out.join("filter.tsv"), &report.to_tsv())?;
    rec.output_tree()?;
    rec.finish()?;
    println!(
        "threshold {:.6}: kept {} of {} train samples, dropped {}",
        report.threshold,
        train.len() - report.dropped(),
        train.len(),
        report.dropped()
    );
    Ok(())
}
