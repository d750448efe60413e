//! Seeded corruption generators for the correction and denoising experiments.

use crate::dataio::Mask;
use crate::rng::SplitMix64;
use crate::tensor::{Element, Tensor};

/// The two exposure-like gammas: below one lifts, above one crushes.
pub const GAMMA_LIFT: f64 = 0.4;
pub const GAMMA_CRUSH: f64 = 2.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaRegion {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
    pub gammas: [f64; 3],
}

impl GammaRegion {
    pub fn area_fraction(&self, h: usize, w: usize) -> f64 {
        (self.height * self.width) as f64 / (h * w) as f64
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y0 + self.height).contains(&y) && (self.x0..self.x0 + self.width).contains(&x)
    }
}

/// Axis-aligned rectangle covering 25-75% of an `h x w` image (redrawn a few
/// times if pixel rounding pushes it outside that band) with a per-channel
/// gamma from {0.4, 2.5}.
pub fn draw_gamma_region(h: usize, w: usize, rng: &mut SplitMix64) -> GammaRegion {
    let mut region = None;
    for _ in 0..64 {
        let area = rng.uniform(0.25, 0.75);
        let hf = rng.uniform(area, 1.0);
        let wf = area / hf;
        let rh = ((hf * h as f64).round() as usize).clamp(1, h);
        let rw = ((wf * w as f64).round() as usize).clamp(1, w);
        let y0 = rng.below(h - rh + 1);
        let x0 = rng.below(w - rw + 1);
        let r = GammaRegion { y0, x0, height: rh, width: rw, gammas: [1.0; 3] };
        let frac = r.area_fraction(h, w);
        region = Some(r);
        if (0.25..=0.75).contains(&frac) {
            break;
        }
    }
    let mut r = region.expect("at least one draw");
    for g in &mut r.gammas {
        *g = if rng.chance(0.5) { GAMMA_LIFT } else { GAMMA_CRUSH };
    }
    r
}

/// Raises every pixel inside `region` to its channel's gamma. Works on
/// `[N, 3, H, W]`; every batch item gets the same region.
pub fn apply_gamma_region<T: Element>(image: &Tensor<T>, region: &GammaRegion) -> Tensor<T> {
    let shape = image.shape();
    assert!(shape.len() == 4 && shape[1] == 3, "expected [N,3,H,W], got {shape:?}");
    let (h, w) = (shape[2], shape[3]);
    let mut out = image.clone();
    let data = out.data_mut();
    for (plane, chunk) in data.chunks_mut(h * w).enumerate() {
        let gamma = region.gammas[plane % 3];
        if gamma == 1.0 {
            continue;
        }
        for y in region.y0..region.y0 + region.height {
            for x in region.x0..region.x0 + region.width {
                let v = &mut chunk[y * w + x];
                *v = T::lit(v.as_f64().max(0.0).powf(gamma));
            }
        }
    }
    out
}

pub fn corrupt_gamma_region<T: Element>(image: &Tensor<T>, seed: u64) -> Tensor<T> {
    let shape = image.shape();
    let mut rng = SplitMix64::new(seed);
    let region = draw_gamma_region(shape[2], shape[3], &mut rng);
    apply_gamma_region(image, &region)
}

/// Which pixels of one mask were relabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptionMap {
    pub corrupted: bool,
    pub pixels: Vec<bool>,
}

impl CorruptionMap {
    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&b| b).count()
    }
}

/// With probability `p`, paints a random rectangle (20-50% of the image) with
/// one class that differs from the rectangle's majority label. Pixels equal
/// to `ignore` are left alone; only pixels whose label actually changed are
/// marked in the map.
pub fn corrupt_labels(mask: &Mask, n_classes: usize, p: f64, ignore: u8, seed: u64) -> (Mask, CorruptionMap) {
    assert!((0.0..=1.0).contains(&p), "probability {p} outside [0,1]");
    assert!(n_classes >= 2, "need at least two classes");
    let (h, w) = (mask.height, mask.width);
    let mut rng = SplitMix64::new(seed);
    let mut out = mask.clone();
    let mut map = CorruptionMap { corrupted: false, pixels: vec![false; h * w] };
    if !rng.chance(p) {
        return (out, map);
    }
    let area = rng.uniform(0.2, 0.5);
    let hf = rng.uniform(area, 1.0);
    let rh = ((hf * h as f64).round() as usize).clamp(1, h);
    let rw = (((area / hf) * w as f64).round() as usize).clamp(1, w);
    let y0 = rng.below(h - rh + 1);
    let x0 = rng.below(w - rw + 1);

    let mut hist = vec![0usize; n_classes];
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            let l = mask.labels[y * w + x];
            if l != ignore {
                hist[l as usize] += 1;
            }
        }
    }
    // first index wins ties so the choice is a pure function of the seed
    let majority = (0..n_classes).fold(0, |best, c| if hist[c] > hist[best] { c } else { best });
    let mut wrong = rng.below(n_classes - 1);
    if wrong >= majority {
        wrong += 1;
    }
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            let i = y * w + x;
            let l = mask.labels[i];
            if l != ignore && l as usize != wrong {
                out.labels[i] = wrong as u8;
                map.pixels[i] = true;
            }
        }
    }
    map.corrupted = map.pixels.iter().any(|&b| b);
    (out, map)
}
