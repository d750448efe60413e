#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

use segkit::dataio::pnm::{self, PnmImage, PnmKind};
use segkit::dataio::synth::class_color;
use segkit::dataio::{write_manifest, Mask, SampleRecord, Split};
use segkit::params::ParamSet;
use segkit::segnet::{save_model, Model, ModelConfig};
use segkit::Tensor;

pub fn segkit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segkit")).args(args).current_dir(cwd).output().expect("spawn segkit")
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Asserts success, showing stderr otherwise.
pub fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stderr: {}", stderr(&o));
    o
}

pub fn sha(path: &Path) -> String {
    Sha256::digest(fs::read(path).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Digest of every file under `dir` except `run.json`, keyed by relative path.
pub fn tree(dir: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().unwrap() != "run.json" {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), sha(&p));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Classifies each pixel by its nearest class color: one patch per pixel,
/// an identity-like embedding, and a head computing `2 c·x - |c|²`.
pub fn nearest_color_model(height: usize, width: usize, classes: usize) -> Model {
    let cfg = ModelConfig {
        height,
        width,
        patch: 1,
        dim: 4,
        heads: 1,
        blocks: 0,
        classes,
        mlp_hidden: 1,
        rope: false,
        ..Default::default()
    };
    let scale = 50.0f32;
    let mut embed = vec![0.0f32; 12];
    for c in 0..3 {
        embed[c * 4 + c] = 1.0;
    }
    let mut head_w = vec![0.0f32; 4 * classes];
    let mut head_b = vec![0.0f32; classes];
    for k in 0..classes {
        let col = class_color(k);
        for c in 0..3 {
            head_w[c * classes + k] = scale * 2.0 * col[c] as f32;
        }
        head_b[k] = -scale * col.iter().map(|v| (v * v) as f32).sum::<f32>();
    }
    let mut p = ParamSet::new();
    p.push("embed.w", Tensor::new(&[3, 4], embed).unwrap());
    p.push("embed.b", Tensor::zeros(&[4]));
    p.push("head.w", Tensor::new(&[4, classes], head_w).unwrap());
    p.push("head.b", Tensor::new(&[classes], head_b).unwrap());
    Model::from_params(&cfg, p).unwrap()
}

pub fn save_nearest_color_model(path: &Path, height: usize, width: usize, classes: usize) {
    save_model(path, &nearest_color_model(height, width, classes)).unwrap();
}

/// An image painted with each label's class color, quantized to bytes.
pub fn paint(labels: &Mask) -> PnmImage {
    let mut data = Vec::with_capacity(labels.labels.len() * 3);
    for &l in &labels.labels {
        for v in class_color(l as usize) {
            data.push((v * 255.0 + 0.5).floor() as u8);
        }
    }
    PnmImage { kind: PnmKind::Rgb, width: labels.width, height: labels.height, data }
}

/// One hand-built sample: the image shows `seen`, the stored mask says `truth`.
pub struct Fixture {
    pub id: String,
    pub robot: String,
    pub split: Split,
    pub seen: Mask,
    pub truth: Mask,
}

pub fn write_fixtures(dir: &Path, samples: &[Fixture]) -> PathBuf {
    fs::create_dir_all(dir.join("images")).unwrap();
    fs::create_dir_all(dir.join("masks")).unwrap();
    let records: Vec<SampleRecord> = samples
        .iter()
        .map(|s| {
            let image_path = dir.join("images").join(format!("{}.ppm", s.id));
            let mask_path = dir.join("masks").join(format!("{}.pgm", s.id));
            pnm::write(&image_path, &paint(&s.seen)).unwrap();
            pnm::write(&mask_path, &s.truth.to_pnm()).unwrap();
            SampleRecord {
                sample_id: s.id.clone(),
                image_path,
                mask_path,
                robot_id: s.robot.clone(),
                split: s.split,
                error_rate: None,
            }
        })
        .collect();
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &records).unwrap();
    manifest
}

/// An 8x8 three-class pair whose mIoU against its own prediction is
/// `(1 + 2a/(a+b)) / 3`: `a` pixels of class 0 seen and labeled 0, `b`
/// pixels seen as 0 but labeled 1, `a` pixels of class 1 seen and labeled 1,
/// the rest class 2.
pub fn graded_pair(a: usize, b: usize) -> (Mask, Mask) {
    assert!(2 * a + b < 64);
    let mut seen = vec![2u8; 64];
    let mut truth = vec![2u8; 64];
    let mut i = 0;
    for _ in 0..a {
        seen[i] = 0;
        truth[i] = 0;
        i += 1;
    }
    for _ in 0..b {
        seen[i] = 0;
        truth[i] = 1;
        i += 1;
    }
    for _ in 0..a {
        seen[i] = 1;
        truth[i] = 1;
        i += 1;
    }
    (Mask { height: 8, width: 8, labels: seen }, Mask { height: 8, width: 8, labels: truth })
}

pub fn write_config(path: &Path, text: &str) {
    fs::write(path, text).unwrap();
}
