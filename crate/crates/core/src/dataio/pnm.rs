//! Binary PNM: P6 for RGB images, P5 for label masks (one byte per class id).

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Element, Tensor};

#[derive(Debug, Error)]
pub enum PnmError {
    #[error("unsupported or missing magic number {0:?}")]
    BadMagic(String),
    #[error("truncated PNM data")]
    Truncated,
    #[error("malformed PNM header: {0}")]
    BadHeader(String),
    #[error("maxval {0} unsupported, only 255")]
    MaxvalUnsupported(u32),
    #[error("cannot encode tensor of shape {0:?} as PNM")]
    BadShape(Vec<usize>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PnmKind {
    Gray,
    Rgb,
}

impl PnmKind {
    pub fn channels(self) -> usize {
        match self {
            PnmKind::Gray => 1,
            PnmKind::Rgb => 3,
        }
    }
}

/// Raw interleaved bytes as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PnmImage {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32, PnmError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(if self.pos >= self.bytes.len() {
                PnmError::Truncated
            } else {
                PnmError::BadHeader(format!("expected {what}"))
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| PnmError::BadHeader(format!("{what} out of range")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<PnmImage, PnmError> {
    let kind = match bytes.get(..2) {
        Some(b"P5") => PnmKind::Gray,
        Some(b"P6") => PnmKind::Rgb,
        other => return Err(PnmError::BadMagic(String::from_utf8_lossy(other.unwrap_or(bytes)).into_owned())),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")? as usize;
    let height = cur.number("height")? as usize;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(PnmError::BadHeader("zero extent".into()));
    }
    if maxval != 255 {
        return Err(PnmError::MaxvalUnsupported(maxval));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        Some(_) => return Err(PnmError::BadHeader("missing separator after maxval".into())),
        None => return Err(PnmError::Truncated),
    }
    let len = width * height * kind.channels();
    let data = bytes.get(cur.pos..cur.pos + len).ok_or(PnmError::Truncated)?.to_vec();
    Ok(PnmImage { kind, width, height, data })
}

pub fn encode(img: &PnmImage) -> Vec<u8> {
    let magic = match img.kind {
        PnmKind::Gray => "P5",
        PnmKind::Rgb => "P6",
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read(path: &Path) -> Result<PnmImage, PnmError> {
    decode(&fs::read(path)?)
}

pub fn write(path: &Path, img: &PnmImage) -> Result<(), PnmError> {
    fs::write(path, encode(img))?;
    Ok(())
}

/// `[1, 3, H, W]` in `[0, 1]` from interleaved RGB bytes.
pub fn image_to_tensor<T: Element>(img: &PnmImage) -> Tensor<T> {
    let (h, w, c) = (img.height, img.width, img.kind.channels());
    let inv = 1.0 / 255.0;
    Tensor::from_fn(&[1, c, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        T::lit(img.data[p * c + ch] as f64 * inv)
    })
}

/// Inverse of [`image_to_tensor`]: clamp to `[0, 1]`, scale, round half up.
pub fn tensor_to_image<T: Element>(t: &Tensor<T>) -> Result<PnmImage, PnmError> {
    let (c, h, w) = match t.shape() {
        [1, c @ (1 | 3), h, w] => (*c, *h, *w),
        s => return Err(PnmError::BadShape(s.to_vec())),
    };
    let mut data = vec![0u8; c * h * w];
    for ch in 0..c {
        for p in 0..h * w {
            let v = t.data()[ch * h * w + p].as_f64().clamp(0.0, 1.0);
            data[p * c + ch] = (v * 255.0 + 0.5).floor() as u8;
        }
    }
    let kind = if c == 3 { PnmKind::Rgb } else { PnmKind::Gray };
    Ok(PnmImage { kind, width: w, height: h, data })
}

/// Reads a P6 image as `[1, 3, H, W]` scaled to `[0, 1]`, or a P5 mask as
/// `[1, 1, H, W]` holding the raw byte values.
pub fn read_pnm(path: &Path) -> Result<Tensor<f32>, PnmError> {
    let img = read(path)?;
    Ok(match img.kind {
        PnmKind::Rgb => image_to_tensor(&img),
        PnmKind::Gray => {
            Tensor::new(&[1, 1, img.height, img.width], img.data.iter().map(|&b| b as f32).collect())
                .expect("extent checked at decode")
        }
    })
}

/// Writes `[1, 3, H, W]` as P6 (values in `[0, 1]`) or `[1, 1, H, W]` as P5
/// (values are raw byte values).
pub fn write_pnm(path: &Path, t: &Tensor<f32>) -> Result<(), PnmError> {
    let img = match t.shape() {
        [1, 3, _, _] => tensor_to_image(t)?,
        [1, 1, h, w] => PnmImage {
            kind: PnmKind::Gray,
            width: *w,
            height: *h,
            data: t.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect(),
        },
        s => return Err(PnmError::BadShape(s.to_vec())),
    };
    write(path, &img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p6_header_layout() {
        let mut bytes = b"P6\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let img = decode(&bytes).unwrap();
        let t: Tensor<f32> = image_to_tensor(&img);
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(encode(&img), bytes);
    }

    #[test]
    fn ascii_variant_rejected() {
        assert!(matches!(decode(b"P3\n1 1\n255\n0 0 0\n"), Err(PnmError::BadMagic(_))));
    }

    #[test]
    fn truncated_and_maxval() {
        assert!(matches!(decode(b"P5\n2 2\n255\n\x01\x02"), Err(PnmError::Truncated)));
        assert!(matches!(decode(b"P5\n2 2"), Err(PnmError::Truncated)));
        assert!(matches!(decode(b"P5\n1 1\n65535\n\x00\x00"), Err(PnmError::MaxvalUnsupported(65535))));
    }

    #[test]
    fn header_comments() {
        let img = decode(b"P5\n# made by hand\n1 2\n# more\n255\n\x07\x08").unwrap();
        assert_eq!((img.width, img.height), (1, 2));
        assert_eq!(img.data, vec![7, 8]);
    }

    #[test]
    fn every_gray_value_round_trips() {
        for v in 0..=255u8 {
            let img = PnmImage { kind: PnmKind::Rgb, width: 1, height: 1, data: vec![v, v, v] };
            let t: Tensor<f32> = image_to_tensor(&img);
            assert_eq!(tensor_to_image(&t).unwrap(), img);
        }
    }
}
