//! Rasters and their binary Netpbm encodings.
//!
//! RGB frames are `H×W×3` tensors with values in `[0, 1]`, stored as P6
//! with maxval 255. Label masks are stored as P5 where the byte value is
//! the object id (0 = background).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `H×W×3` image with channel values in `[0, 1]`.
pub type RgbImage = Tensor<f64>;

/// Integer label raster: 0 is background, `m ≥ 1` is object `m`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMask {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || labels.len() != width * height {
            return Err(Error::InvalidShape(format!(
                "label mask {width}×{height} with {} labels",
                labels.len()
            )));
        }
        Ok(Self { width, height, labels })
    }

    pub fn background(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![0; width * height]).expect("positive size")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.labels[y * self.width + x] = v;
    }

    /// Largest object id present (`M`); 0 for an all-background mask.
    pub fn num_objects(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn count(&self, object: u8) -> usize {
        self.labels.iter().filter(|&&v| v == object).count()
    }

    pub fn binary(&self, object: u8) -> Vec<bool> {
        self.labels.iter().map(|&v| v == object).collect()
    }

    /// `H×W×1` tensor holding 1 where the label equals `object`.
    pub fn indicator(&self, object: u8) -> Tensor<f64> {
        Tensor::from_fn(&[self.height, self.width, 1], |k| {
            if self.labels[k] == object {
                1.0
            } else {
                0.0
            }
        })
    }

    pub fn same_size(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RasterKind {
    RgbPpm,
    MaskPgm,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Raster {
    Rgb(RgbImage),
    Mask(LabelMask),
}

/// Quantizes `[0, 1]` to a byte.
pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Rounds to the nearest 8-bit level, the value a PPM round-trip yields.
pub fn quantize(v: f64) -> f64 {
    to_byte(v) as f64 * (1.0 / 255.0)
}

pub fn encode_ppm(img: &RgbImage) -> Result<Vec<u8>> {
    let (h, w, c) = img.hwc("encode_ppm")?;
    if c != 3 {
        return Err(Error::InvalidShape(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn encode_pgm(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    payload: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::Format { offset: 0, msg: "file too short for magic number".into() });
    }
    let magic = [bytes[0], bytes[1]];
    if &magic != b"P5" && &magic != b"P6" {
        return Err(Error::Format {
            offset: 0,
            msg: format!("unsupported magic {:?}", String::from_utf8_lossy(&magic)),
        });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format { offset: pos, msg: "expected a decimal header field".into() });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(Error::Format { offset: start, msg: "header field out of range".into() })?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format { offset: pos, msg: "missing whitespace after maxval".into() }),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Format { offset: pos, msg: format!("empty raster {width}×{height}") });
    }
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format { offset: pos, msg: format!("maxval {maxval} not in 1..=255") });
    }
    Ok(Header { magic, width, height, maxval, payload: pos })
}

fn payload<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h.width * h.height * channels;
    let have = bytes.len() - h.payload;
    if have < need {
        return Err(Error::Format {
            offset: bytes.len(),
            msg: format!("truncated payload: expected {need} bytes, found {have}"),
        });
    }
    Ok(&bytes[h.payload..h.payload + need])
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P6" {
        return Err(Error::Format { offset: 0, msg: "expected a P6 (RGB) raster".into() });
    }
    let data = payload(bytes, &h, 3)?;
    let scale = 1.0 / h.maxval as f64;
    Tensor::new(vec![h.height, h.width, 3], data.iter().map(|&b| b as f64 * scale).collect())
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMask> {
    let h = parse_header(bytes)?;
    if &h.magic != b"P5" {
        return Err(Error::Format { offset: 0, msg: "expected a P5 (mask) raster".into() });
    }
    let data = payload(bytes, &h, 1)?;
    LabelMask::new(h.width, h.height, data.to_vec())
}

pub fn read_raster(path: &Path, kind: RasterKind) -> Result<Raster> {
    let bytes = fs::read(path)?;
    match kind {
        RasterKind::RgbPpm => decode_ppm(&bytes).map(Raster::Rgb),
        RasterKind::MaskPgm => decode_pgm(&bytes).map(Raster::Mask),
    }
}

pub fn write_raster(path: &Path, raster: &Raster) -> Result<()> {
    let bytes = match raster {
        Raster::Rgb(img) => encode_ppm(img)?,
        Raster::Mask(m) => encode_pgm(m.width, m.height, &m.labels),
    };
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&fs::read(path)?)
}

pub fn read_pgm(path: &Path) -> Result<LabelMask> {
    decode_pgm(&fs::read(path)?)
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    fs::write(path, encode_ppm(img)?)?;
    Ok(())
}

pub fn write_pgm(path: &Path, mask: &LabelMask) -> Result<()> {
    fs::write(path, encode_pgm(mask.width, mask.height, &mask.labels))?;
    Ok(())
}

/// Writes an `H×W×1` map rescaled so its range spans 0..=255.
pub fn write_heatmap(path: &Path, map: &Tensor<f64>) -> Result<()> {
    let (h, w, _) = map.hwc("heatmap")?;
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> = map.data().iter().map(|&v| to_byte((v - lo) / span)).collect();
    fs::write(path, encode_pgm(w, h, &bytes))?;
    Ok(())
}
