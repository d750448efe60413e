//! Procedural scenes: a flat background plus filled rectangles, disks, and
//! triangles, one base color per class, with bounded seeded noise.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::dataio::corrupt::{corrupt_labels, draw_gamma_region, apply_gamma_region, CorruptionMap};
use crate::dataio::manifest::{write_manifest, SampleRecord, Split};
use crate::dataio::pnm::{self, PnmImage, PnmKind};
use crate::dataio::{DataError, Mask, Sample, IGNORE_INDEX};
use crate::kv::{KvConfig, KvError};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tensor;

/// Platform names assigned round-robin.
pub const ROBOTS: [&str; 4] = ["MuCAR-3", "ALICE", "Spot v2", "Spot v1"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Corruption {
    None,
    /// Every image gets one gamma region; the clean image is kept alongside.
    GammaRegion,
    /// Each training mask is region-relabeled with this probability.
    LabelNoise(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_samples: usize,
    /// The last `val_samples` samples form the validation split.
    pub val_samples: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    /// Independent per-pixel, per-channel noise amplitude.
    pub pixel_noise: f64,
    /// Per-channel offset shared by each `block x block` tile.
    pub block_noise: f64,
    pub block: usize,
    pub corruption: Corruption,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_samples: 320,
            val_samples: 64,
            height: 48,
            width: 48,
            n_classes: 3,
            shapes_min: 1,
            shapes_max: 4,
            pixel_noise: 0.05,
            block_noise: 0.0,
            block: 4,
            corruption: Corruption::None,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.n_classes < 2 || self.n_classes > 255 {
            return Err(format!("n_classes must be in 2..=255, got {}", self.n_classes));
        }
        if self.height == 0 || self.width == 0 {
            return Err("image size must be positive".into());
        }
        if self.shapes_min > self.shapes_max {
            return Err("shapes_min exceeds shapes_max".into());
        }
        if self.val_samples > self.n_samples {
            return Err("val_samples exceeds n_samples".into());
        }
        if self.block == 0 {
            return Err("block must be positive".into());
        }
        if !(self.pixel_noise >= 0.0 && self.block_noise >= 0.0) {
            return Err("noise amplitudes must be nonnegative".into());
        }
        if let Corruption::LabelNoise(p) = self.corruption {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("label noise probability {p} outside [0,1]"));
            }
        }
        Ok(())
    }

    /// Reads every spec key from `cfg`, falling back to defaults.
    pub fn from_kv(mut cfg: KvConfig) -> Result<Self, KvError> {
        let d = Self::default();
        let corruption = match cfg.take_or("corruption", "none".to_string())?.as_str() {
            "none" => Corruption::None,
            "gamma_region" => Corruption::GammaRegion,
            "label_noise" => Corruption::LabelNoise(cfg.take_or("label_noise_p", 0.1)?),
            other => {
                return Err(KvError::Invalid {
                    key: "corruption".into(),
                    reason: format!("expected none, gamma_region or label_noise, got {other:?}"),
                })
            }
        };
        let spec = Self {
            seed: cfg.take_or("seed", d.seed)?,
            n_samples: cfg.take_or("n_samples", d.n_samples)?,
            val_samples: cfg.take_or("val_samples", d.val_samples)?,
            height: cfg.take_or("height", d.height)?,
            width: cfg.take_or("width", d.width)?,
            n_classes: cfg.take_or("n_classes", d.n_classes)?,
            shapes_min: cfg.take_or("shapes_min", d.shapes_min)?,
            shapes_max: cfg.take_or("shapes_max", d.shapes_max)?,
            pixel_noise: cfg.take_or("pixel_noise", d.pixel_noise)?,
            block_noise: cfg.take_or("block_noise", d.block_noise)?,
            block: cfg.take_or("block", d.block)?,
            corruption,
        };
        cfg.finish()?;
        spec.validate().map_err(|reason| KvError::Invalid { key: "spec".into(), reason })?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut c = KvConfig::new();
        c.set("seed", self.seed);
        c.set("n_samples", self.n_samples);
        c.set("val_samples", self.val_samples);
        c.set("height", self.height);
        c.set("width", self.width);
        c.set("n_classes", self.n_classes);
        c.set("shapes_min", self.shapes_min);
        c.set("shapes_max", self.shapes_max);
        c.set("pixel_noise", self.pixel_noise);
        c.set("block_noise", self.block_noise);
        c.set("block", self.block);
        match self.corruption {
            Corruption::None => c.set("corruption", "none"),
            Corruption::GammaRegion => c.set("corruption", "gamma_region"),
            Corruption::LabelNoise(p) => {
                c.set("corruption", "label_noise");
                c.set("label_noise_p", p);
            }
        }
        c
    }

    /// Largest deviation of any pixel from its class base color, before the
    /// half-step of byte quantization.
    pub fn noise_bound(&self) -> f64 {
        self.pixel_noise + self.block_noise
    }
}

const PALETTE: [[f64; 3]; 9] = [
    [0.45, 0.45, 0.45],
    [0.85, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.30, 0.85],
    [0.90, 0.85, 0.20],
    [0.80, 0.30, 0.80],
    [0.20, 0.80, 0.80],
    [0.95, 0.60, 0.20],
    [0.55, 0.35, 0.15],
];

/// Base color of a class; class 0 is the background.
pub fn class_color(class: usize) -> [f64; 3] {
    if class < PALETTE.len() {
        return PALETTE[class];
    }
    let mut rng = SplitMix64::new(0xC010_0000 + class as u64);
    [rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)]
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disk { cy: f64, cx: f64, r: f64 },
    Tri { p: [(f64, f64); 3] },
}

impl Shape {
    fn random(h: usize, w: usize, rng: &mut SplitMix64) -> Self {
        let (hf, wf) = (h as f64, w as f64);
        let side = hf.min(wf);
        match rng.below(3) {
            0 => {
                let rh = rng.uniform(side / 6.0, side / 2.0);
                let rw = rng.uniform(side / 6.0, side / 2.0);
                let y0 = rng.uniform(0.0, hf - rh);
                let x0 = rng.uniform(0.0, wf - rw);
                Shape::Rect { y0, x0, y1: y0 + rh, x1: x0 + rw }
            }
            1 => {
                let r = rng.uniform(side / 12.0, side / 4.0);
                Shape::Disk { cy: rng.uniform(0.0, hf), cx: rng.uniform(0.0, wf), r }
            }
            _ => {
                let s = rng.uniform(side / 4.0, side * 0.6);
                let (cy, cx) = (rng.uniform(0.0, hf), rng.uniform(0.0, wf));
                let mut p = [(0.0, 0.0); 3];
                for v in &mut p {
                    *v = (cy + rng.uniform(-s / 2.0, s / 2.0), cx + rng.uniform(-s / 2.0, s / 2.0));
                }
                Shape::Tri { p }
            }
        }
    }

    /// Inside test at the pixel center.
    fn covers(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => py >= y0 && py < y1 && px >= x0 && px < x1,
            Shape::Disk { cy, cx, r } => (py - cy).powi(2) + (px - cx).powi(2) <= r * r,
            Shape::Tri { p } => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (py - a.0) - (b.0 - a.0) * (px - a.1);
                let (e0, e1, e2) = (edge(p[0], p[1]), edge(p[1], p[2]), edge(p[2], p[0]));
                (e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0) || (e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0)
            }
        }
    }
}

/// One generated sample plus its audit trail.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub sample: Sample,
    /// Set under gamma-region corruption.
    pub clean_image: Option<Tensor<f32>>,
    /// Set when the stored mask was relabeled.
    pub clean_mask: Option<Mask>,
    pub corruption: Option<CorruptionMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub samples: Vec<SynthSample>,
    /// Pixels per class over all stored masks, tracked while painting.
    pub class_areas: Vec<u64>,
}

impl SynthOutput {
    pub fn split(&self, split: Split) -> Vec<Sample> {
        self.samples.iter().filter(|s| s.sample.split == split).map(|s| s.sample.clone()).collect()
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn generate_one(spec: &SynthSpec, index: usize) -> (SynthSample, Vec<u64>) {
    let (h, w, k) = (spec.height, spec.width, spec.n_classes);
    let seed = derive_seed(spec.seed, index as u64);
    let mut rng = SplitMix64::new(seed);
    let mut areas = vec![0u64; k];
    areas[0] = (h * w) as u64;
    let mut mask = Mask::filled(h, w, 0);

    let n_shapes = rng.range(spec.shapes_min, spec.shapes_max);
    for _ in 0..n_shapes {
        let class = 1 + rng.below(k - 1);
        let shape = Shape::random(h, w, &mut rng);
        for y in 0..h {
            for x in 0..w {
                if shape.covers(y, x) {
                    let old = &mut mask.labels[y * w + x];
                    areas[*old as usize] -= 1;
                    areas[class] += 1;
                    *old = class as u8;
                }
            }
        }
    }

    let nb_y = h.div_ceil(spec.block);
    let nb_x = w.div_ceil(spec.block);
    let blocks: Vec<[f64; 3]> = (0..nb_y * nb_x)
        .map(|_| std::array::from_fn(|_| rng.uniform(-spec.block_noise, spec.block_noise)))
        .collect();
    let mut bytes = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            let base = class_color(mask.labels[y * w + x] as usize);
            let off = blocks[(y / spec.block) * nb_x + x / spec.block];
            for c in 0..3 {
                let n = rng.uniform(-spec.pixel_noise, spec.pixel_noise);
                bytes[(y * w + x) * 3 + c] = quantize(base[c] + off[c] + n);
            }
        }
    }
    let clean = pnm::image_to_tensor::<f32>(&PnmImage { kind: PnmKind::Rgb, width: w, height: h, data: bytes });

    let split = if index < spec.n_samples - spec.val_samples { Split::Train } else { Split::Val };
    let mut out = SynthSample {
        sample: Sample {
            id: format!("s{index:05}"),
            image: clean.clone(),
            mask: mask.clone(),
            robot_id: ROBOTS[index % ROBOTS.len()].to_string(),
            split,
        },
        clean_image: None,
        clean_mask: None,
        corruption: None,
    };
    match spec.corruption {
        Corruption::None => {}
        Corruption::GammaRegion => {
            let mut grng = SplitMix64::new(derive_seed(seed, 1));
            let region = draw_gamma_region(h, w, &mut grng);
            // round-trip through bytes so memory matches what lands on disk
            let img = pnm::tensor_to_image(&apply_gamma_region(&clean, &region)).expect("rgb tensor");
            out.sample.image = pnm::image_to_tensor(&img);
            out.clean_image = Some(clean);
        }
        Corruption::LabelNoise(p) if split == Split::Train => {
            let (noisy, map) = corrupt_labels(&mask, k, p, IGNORE_INDEX, derive_seed(seed, 2));
            if map.corrupted {
                for (i, &hit) in map.pixels.iter().enumerate() {
                    if hit {
                        areas[mask.labels[i] as usize] -= 1;
                        areas[noisy.labels[i] as usize] += 1;
                    }
                }
                out.sample.mask = noisy;
                out.clean_mask = Some(mask);
            }
            out.corruption = Some(map);
        }
        Corruption::LabelNoise(_) => {}
    }
    (out, areas)
}

/// Generates every sample in memory; a pure function of the spec.
pub fn generate(spec: &SynthSpec) -> Result<SynthOutput, DataError> {
    spec.validate().map_err(DataError::Spec)?;
    let parts: Vec<_> = (0..spec.n_samples).into_par_iter().map(|i| generate_one(spec, i)).collect();
    let mut class_areas = vec![0u64; spec.n_classes];
    let mut samples = Vec::with_capacity(parts.len());
    for (s, a) in parts {
        for (t, v) in class_areas.iter_mut().zip(a) {
            *t += v;
        }
        samples.push(s);
    }
    Ok(SynthOutput { samples, class_areas })
}

/// Generates and writes `images/`, `masks/`, `manifest.tsv`, plus `clean/`
/// (gamma corruption) or `corruption.tsv` (label noise) for auditing.
pub fn synth_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<SynthOutput, DataError> {
    let out = generate(spec)?;
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("masks"))?;
    if spec.corruption == Corruption::GammaRegion {
        fs::create_dir_all(out_dir.join("clean"))?;
    }
    let pnm_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DataError::Pnm { path, source }
    };
    let records = out
        .samples
        .par_iter()
        .map(|s| {
            let id = &s.sample.id;
            let image_path = out_dir.join("images").join(format!("{id}.ppm"));
            let mask_path = out_dir.join("masks").join(format!("{id}.pgm"));
            let img = pnm::tensor_to_image(&s.sample.image).map_err(pnm_err(&image_path))?;
            pnm::write(&image_path, &img).map_err(pnm_err(&image_path))?;
            pnm::write(&mask_path, &s.sample.mask.to_pnm()).map_err(pnm_err(&mask_path))?;
            if let Some(clean) = &s.clean_image {
                let p = out_dir.join("clean").join(format!("{id}.ppm"));
                let img = pnm::tensor_to_image(clean).map_err(pnm_err(&p))?;
                pnm::write(&p, &img).map_err(pnm_err(&p))?;
            }
            Ok(SampleRecord {
                sample_id: id.clone(),
                image_path,
                mask_path,
                robot_id: s.sample.robot_id.clone(),
                split: s.sample.split,
                error_rate: None,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    write_manifest(&out_dir.join("manifest.tsv"), &records)?;
    if matches!(spec.corruption, Corruption::LabelNoise(_)) {
        let mut text = String::from("# sample_id\tcorrupted_pixels\n");
        for s in &out.samples {
            if let Some(map) = &s.corruption {
                text.push_str(&format!("{}\t{}\n", s.sample.id, map.count()));
            }
        }
        fs::write(out_dir.join("corruption.tsv"), text)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthSpec {
        SynthSpec { seed, n_samples: 12, val_samples: 4, height: 20, width: 24, ..Default::default() }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate(&small(3)).unwrap(), generate(&small(3)).unwrap());
        assert_ne!(generate(&small(3)).unwrap(), generate(&small(4)).unwrap());
    }

    #[test]
    fn no_shapes_means_all_background() {
        let spec = SynthSpec { n_classes: 2, shapes_min: 0, shapes_max: 0, ..small(1) };
        let out = generate(&spec).unwrap();
        assert!(out.samples.iter().all(|s| s.sample.mask.labels.iter().all(|&l| l == 0)));
        assert_eq!(out.class_areas, vec![12 * 20 * 24, 0]);
    }

    #[test]
    fn area_ledger_matches_histogram() {
        for corruption in [Corruption::None, Corruption::LabelNoise(0.5)] {
            let spec = SynthSpec { n_classes: 5, shapes_max: 6, corruption, ..small(8) };
            let out = generate(&spec).unwrap();
            let mut hist = vec![0u64; 5];
            for s in &out.samples {
                for &l in &s.sample.mask.labels {
                    hist[l as usize] += 1;
                }
            }
            assert_eq!(hist, out.class_areas);
        }
    }

    #[test]
    fn colors_within_noise_bound() {
        let spec = SynthSpec { n_classes: 4, pixel_noise: 0.05, block_noise: 0.1, ..small(2) };
        let out = generate(&spec).unwrap();
        let tol = spec.noise_bound() + 0.5 / 255.0 + 1e-6;
        for s in &out.samples {
            let (h, w) = (s.sample.mask.height, s.sample.mask.width);
            for p in 0..h * w {
                let base = class_color(s.sample.mask.labels[p] as usize);
                for c in 0..3 {
                    let v = s.sample.image.data()[c * h * w + p] as f64;
                    assert!((v - base[c].clamp(0.0, 1.0)).abs() <= tol);
                }
            }
        }
    }

    #[test]
    fn robots_round_robin_and_splits() {
        let out = generate(&small(0)).unwrap();
        for (i, s) in out.samples.iter().enumerate() {
            assert_eq!(s.sample.robot_id, ROBOTS[i % 4]);
            assert_eq!(s.sample.split, if i < 8 { Split::Train } else { Split::Val });
        }
    }

    #[test]
    fn label_noise_spares_validation() {
        let spec = SynthSpec { corruption: Corruption::LabelNoise(1.0), ..small(5) };
        let out = generate(&spec).unwrap();
        for s in &out.samples {
            match s.sample.split {
                Split::Train => assert!(s.corruption.as_ref().unwrap().corrupted),
                _ => assert!(s.corruption.is_none() && s.clean_mask.is_none()),
            }
        }
    }

    #[test]
    fn kv_round_trip() {
        let spec = SynthSpec { corruption: Corruption::LabelNoise(0.25), block_noise: 0.3, ..small(9) };
        assert_eq!(SynthSpec::from_kv(spec.to_kv()).unwrap(), spec);
        let bad: KvConfig = "n_classes = 1".parse().unwrap();
        assert!(SynthSpec::from_kv(bad).is_err());
    }
}
