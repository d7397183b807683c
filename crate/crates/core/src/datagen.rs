//! Synthetic videos of moving shapes, static-image augmentation and
//! training-triplet sampling.
//!
//! Every output is a pure function of its configuration and seed. Masks are
//! rendered from the same point-in-shape test as the pixels (evaluated at
//! pixel centres), so they are exact.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{quantize, LabelMask, RgbImage};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Disc,
    Rectangle,
    Triangle,
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Rectangle => "rectangle",
            ShapeKind::Triangle => "triangle",
        })
    }
}

impl FromStr for ShapeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disc" => Ok(ShapeKind::Disc),
            "rectangle" => Ok(ShapeKind::Rectangle),
            "triangle" => Ok(ShapeKind::Triangle),
            _ => Err(Error::Config(format!("unknown shape {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    /// Centre `(x, y)` at frame 0, in pixels.
    pub center: [f64; 2],
    /// Radius (disc), half-width (rectangle) or circumradius (triangle).
    pub size: f64,
    /// Rectangle half-height over half-width.
    pub aspect: f64,
    /// Pixels per frame.
    pub velocity: [f64; 2],
    /// Relative size change per frame.
    pub scale_drift: f64,
    pub color: [f64; 3],
    /// Additive RGB change per frame.
    pub color_drift: [f64; 3],
}

/// During frames `start..=end`, `occluder` is drawn over `occluded`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occlusion {
    pub occluder: usize,
    pub occluded: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub objects: Vec<ObjectSpec>,
    pub occlusions: Vec<Occlusion>,
    pub background_seed: u64,
}

/// Knobs for [`SceneConfig::random`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub max_objects: usize,
    /// Force object pairs onto crossing paths with a scheduled occlusion.
    pub occlusion_heavy: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 96,
            height: 64,
            frames: 8,
            max_objects: 2,
            occlusion_heavy: false,
        }
    }
}

/// Frames, ground-truth masks and a name.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub name: String,
    pub frames: Vec<RgbImage>,
    pub masks: Vec<LabelMask>,
}

impl VideoSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.frames[0].shape();
        (s[0], s[1])
    }
}

impl ObjectSpec {
    fn size_at(&self, t: usize) -> f64 {
        (self.size * (1.0 + self.scale_drift * t as f64)).max(1.0)
    }

    /// Half extents of the axis-aligned bounding box at a given size.
    fn half_extent(&self, size: f64) -> (f64, f64) {
        match self.shape {
            ShapeKind::Disc => (size, size),
            ShapeKind::Rectangle => (size, size * self.aspect),
            ShapeKind::Triangle => (size * 3f64.sqrt() / 2.0, size),
        }
    }

    /// Centre at frame `t`; motion stops at the frame border.
    pub fn center_at(&self, t: usize, width: usize, height: usize) -> [f64; 2] {
        let s = self.size_at(t);
        let (hx, hy) = self.half_extent(s);
        let x = self.center[0] + self.velocity[0] * t as f64;
        let y = self.center[1] + self.velocity[1] * t as f64;
        [clamp_into(x, hx, width as f64), clamp_into(y, hy, height as f64)]
    }

    pub fn color_at(&self, t: usize) -> [f64; 3] {
        let mut c = self.color;
        for (k, v) in c.iter_mut().enumerate() {
            *v = (*v + self.color_drift[k] * t as f64).clamp(0.0, 1.0);
        }
        c
    }

    /// Analytic point-in-shape test at frame `t`.
    pub fn contains(&self, t: usize, width: usize, height: usize, px: f64, py: f64) -> bool {
        let [cx, cy] = self.center_at(t, width, height);
        let s = self.size_at(t);
        let (dx, dy) = (px - cx, py - cy);
        match self.shape {
            ShapeKind::Disc => dx * dx + dy * dy <= s * s,
            ShapeKind::Rectangle => dx.abs() <= s && dy.abs() <= s * self.aspect,
            ShapeKind::Triangle => {
                // upward-pointing equilateral triangle with circumradius s
                let half = s * 3f64.sqrt() / 2.0;
                if dy > s / 2.0 || dy < -s {
                    return false;
                }
                // half-width grows linearly from 0 at the apex (dy = -s) to `half` at the base
                let w = half * (dy + s) / (1.5 * s);
                dx.abs() <= w
            }
        }
    }
}

fn clamp_into(v: f64, half: f64, extent: f64) -> f64 {
    if 2.0 * half >= extent {
        extent / 2.0
    } else {
        v.clamp(half, extent - half)
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.objects.is_empty() {
            return Err(Error::Config("scene needs at least one object".into()));
        }
        if self.objects.len() > 255 {
            return Err(Error::Config("at most 255 objects fit an 8-bit mask".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config(format!("scene needs at least 2 frames, got {}", self.frames)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("empty frame size".into()));
        }
        for (i, o) in self.objects.iter().enumerate() {
            let (hx, hy) = o.half_extent(o.size_at(0));
            let [x, y] = o.center;
            if x - hx < 0.0 || y - hy < 0.0 || x + hx > self.width as f64 || y + hy > self.height as f64 {
                return Err(Error::Config(format!("object {i} starts outside the frame")));
            }
        }
        for oc in &self.occlusions {
            let n = self.objects.len();
            if oc.occluder >= n || oc.occluded >= n || oc.occluder == oc.occluded || oc.start > oc.end {
                return Err(Error::Config(format!("invalid occlusion entry {oc:?}")));
            }
        }
        Ok(())
    }

    /// Object indices in back-to-front order at frame `t`.
    pub fn draw_order(&self, t: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.objects.len()).collect();
        for oc in self.occlusions.iter().filter(|o| (o.start..=o.end).contains(&t)) {
            let pa = order.iter().position(|&i| i == oc.occluder).unwrap();
            let pb = order.iter().position(|&i| i == oc.occluded).unwrap();
            if pa < pb {
                let v = order.remove(pa);
                let pb = order.iter().position(|&i| i == oc.occluded).unwrap();
                order.insert(pb + 1, v);
            }
        }
        order
    }

    /// Topmost object id (1-based) covering pixel centre `(x, y)` at `t`, or 0.
    pub fn label_at(&self, t: usize, x: usize, y: usize) -> u8 {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        self.draw_order(t)
            .into_iter()
            .rev()
            .find(|&i| self.objects[i].contains(t, self.width, self.height, px, py))
            .map_or(0, |i| (i + 1) as u8)
    }

    /// A random scene; object colours are saturated and spread in hue.
    pub fn random(spec: &SceneSpec, rng: &mut SeededRng) -> Self {
        let (w, h) = (spec.width as f64, spec.height as f64);
        let unit = w.min(h);
        let m = if spec.occlusion_heavy { spec.max_objects.max(2) } else { rng.range_usize(1, spec.max_objects.max(1)) };
        let hue0 = rng.uniform();
        let mut objects = Vec::with_capacity(m);
        for i in 0..m {
            let shape = match rng.range_usize(0, 2) {
                0 => ShapeKind::Disc,
                1 => ShapeKind::Rectangle,
                _ => ShapeKind::Triangle,
            };
            let size = unit * rng.range_f64(0.11, 0.22);
            let aspect = rng.range_f64(0.6, 1.4);
            let hue = (hue0 + i as f64 / m as f64 + rng.range_f64(-0.05, 0.05)).rem_euclid(1.0);
            let color = hsv_to_rgb(hue, rng.range_f64(0.7, 1.0), rng.range_f64(0.75, 1.0));
            let drift = 0.012;
            let color_drift = [rng.range_f64(-drift, drift), rng.range_f64(-drift, drift), rng.range_f64(-drift, drift)];
            let speed = rng.range_f64(0.5, 2.5);
            let dir = rng.range_f64(0.0, std::f64::consts::TAU);
            let mut obj = ObjectSpec {
                shape,
                center: [0.0, 0.0],
                size,
                aspect,
                velocity: [speed * dir.cos(), speed * dir.sin()],
                scale_drift: rng.range_f64(-0.02, 0.02),
                color,
                color_drift,
            };
            let (hx, hy) = obj.half_extent(size);
            obj.center = [rng.range_f64(hx, w - hx), rng.range_f64(hy, h - hy)];
            objects.push(obj);
        }
        let mut occlusions = Vec::new();
        if spec.occlusion_heavy {
            // Object 1 crosses object 0 near the middle of the clip.
            let t_mid = spec.frames as f64 / 2.0;
            let (a_half_x, a_half_y) = objects[0].half_extent(objects[0].size);
            let a_center = [rng.range_f64(w * 0.35, w * 0.65), rng.range_f64(h * 0.35, h * 0.65)];
            objects[0].center = [a_center[0].clamp(a_half_x, w - a_half_x), a_center[1].clamp(a_half_y, h - a_half_y)];
            objects[0].velocity = [objects[0].velocity[0] * 0.3, objects[0].velocity[1] * 0.3];
            let meet = objects[0].center_at(t_mid as usize, spec.width, spec.height);
            let speed = rng.range_f64(2.0, 3.5);
            let dir = if rng.coin(0.5) { 0.0 } else { std::f64::consts::PI };
            let b = &mut objects[1];
            let (bhx, bhy) = b.half_extent(b.size);
            b.velocity = [speed * f64::cos(dir), rng.range_f64(-0.5, 0.5)];
            b.center = [
                (meet[0] - b.velocity[0] * t_mid).clamp(bhx, w - bhx),
                (meet[1] - b.velocity[1] * t_mid).clamp(bhy, h - bhy),
            ];
            let (occluder, occluded) = if rng.coin(0.5) { (1, 0) } else { (0, 1) };
            occlusions.push(Occlusion { occluder, occluded, start: 0, end: spec.frames });
        }
        Self {
            width: spec.width,
            height: spec.height,
            frames: spec.frames,
            objects,
            occlusions,
            background_seed: rng.next_u64(),
        }
    }

    /// Flat `key=value` lines, stable ordering.
    pub fn to_kv(&self) -> String {
        let mut kv = BTreeMap::new();
        kv.insert("width".to_string(), self.width.to_string());
        kv.insert("height".to_string(), self.height.to_string());
        kv.insert("frames".to_string(), self.frames.to_string());
        kv.insert("background_seed".to_string(), self.background_seed.to_string());
        kv.insert("objects".to_string(), self.objects.len().to_string());
        kv.insert("occlusions".to_string(), self.occlusions.len().to_string());
        let list = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        for (i, o) in self.objects.iter().enumerate() {
            let p = format!("object.{i}.");
            kv.insert(format!("{p}shape"), o.shape.to_string());
            kv.insert(format!("{p}center"), list(&o.center));
            kv.insert(format!("{p}size"), format!("{:?}", o.size));
            kv.insert(format!("{p}aspect"), format!("{:?}", o.aspect));
            kv.insert(format!("{p}velocity"), list(&o.velocity));
            kv.insert(format!("{p}scale_drift"), format!("{:?}", o.scale_drift));
            kv.insert(format!("{p}color"), list(&o.color));
            kv.insert(format!("{p}color_drift"), list(&o.color_drift));
        }
        for (i, o) in self.occlusions.iter().enumerate() {
            kv.insert(
                format!("occlusion.{i}"),
                format!("{},{},{},{}", o.occluder, o.occluded, o.start, o.end),
            );
        }
        kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = parse_kv(text)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Config(format!("scene config lacks {k}")));
        let num = |k: &str| -> Result<f64> {
            get(k)?.parse().map_err(|_| Error::Config(format!("bad number for {k}")))
        };
        let int = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Config(format!("bad integer for {k}")))
        };
        let list = |k: &str| -> Result<Vec<f64>> {
            get(k)?
                .split(',')
                .map(|s| s.parse().map_err(|_| Error::Config(format!("bad list for {k}"))))
                .collect()
        };
        let arr2 = |k: &str| -> Result<[f64; 2]> {
            list(k)?.try_into().map_err(|_| Error::Config(format!("{k} needs 2 values")))
        };
        let arr3 = |k: &str| -> Result<[f64; 3]> {
            list(k)?.try_into().map_err(|_| Error::Config(format!("{k} needs 3 values")))
        };
        let mut objects = Vec::new();
        for i in 0..int("objects")? {
            let p = format!("object.{i}.");
            objects.push(ObjectSpec {
                shape: get(&format!("{p}shape"))?.parse()?,
                center: arr2(&format!("{p}center"))?,
                size: num(&format!("{p}size"))?,
                aspect: num(&format!("{p}aspect"))?,
                velocity: arr2(&format!("{p}velocity"))?,
                scale_drift: num(&format!("{p}scale_drift"))?,
                color: arr3(&format!("{p}color"))?,
                color_drift: arr3(&format!("{p}color_drift"))?,
            });
        }
        let mut occlusions = Vec::new();
        for i in 0..int("occlusions")? {
            let v: Vec<usize> = get(&format!("occlusion.{i}"))?
                .split(',')
                .map(|s| s.parse().map_err(|_| Error::Config("bad occlusion entry".into())))
                .collect::<Result<_>>()?;
            let [occluder, occluded, start, end] = v[..] else {
                return Err(Error::Config("occlusion needs 4 fields".into()));
            };
            occlusions.push(Occlusion { occluder, occluded, start, end });
        }
        Ok(Self {
            width: int("width")?,
            height: int("height")?,
            frames: int("frames")?,
            objects,
            occlusions,
            background_seed: get("background_seed")?
                .parse()
                .map_err(|_| Error::Config("bad background_seed".into()))?,
        })
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are ignored.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Smooth muted texture: a few random plane waves per channel.
fn background(width: usize, height: usize, seed: u64) -> RgbImage {
    let mut rng = SeededRng::new(seed);
    let base: [f64; 3] = [rng.range_f64(0.3, 0.6), rng.range_f64(0.3, 0.6), rng.range_f64(0.3, 0.6)];
    let waves: Vec<[f64; 5]> = (0..9)
        .map(|_| {
            let ang = rng.range_f64(0.0, std::f64::consts::TAU);
            let freq = rng.range_f64(0.05, 0.35);
            [freq * ang.cos(), freq * ang.sin(), rng.range_f64(0.0, std::f64::consts::TAU), rng.range_f64(0.03, 0.09), 0.0]
        })
        .collect();
    Tensor::from_fn(&[height, width, 3], |k| {
        let c = k % 3;
        let p = k / 3;
        let (x, y) = ((p % width) as f64, (p / width) as f64);
        let mut v = base[c];
        for wv in waves.iter().skip(c * 3).take(3) {
            v += wv[3] * (wv[0] * x + wv[1] * y + wv[2]).sin();
        }
        v.clamp(0.0, 1.0)
    })
}

/// Renders every frame and mask of `cfg`; `seed` perturbs per-pixel shading
/// noise. Pixel values are quantized to 8 bits so a PPM round-trip is exact.
pub fn generate_sequence(cfg: &SceneConfig, seed: u64, name: impl Into<String>) -> Result<VideoSequence> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let bg = background(w, h, cfg.background_seed);
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut masks = Vec::with_capacity(cfg.frames);
    for t in 0..cfg.frames {
        let mut rng = SeededRng::derive(seed, t as u64);
        let mut img = bg.clone();
        let mut mask = LabelMask::background(w, h);
        for y in 0..h {
            for x in 0..w {
                let label = cfg.label_at(t, x, y);
                let noise = rng.range_f64(-0.02, 0.02);
                let px = &mut img.data_mut()[(y * w + x) * 3..][..3];
                if label > 0 {
                    let o = &cfg.objects[label as usize - 1];
                    let col = o.color_at(t);
                    let [cx, cy] = o.center_at(t, w, h);
                    // mild radial shading so objects are not flat
                    let r = (((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt()) / o.size_at(t).max(1.0);
                    let shade = 1.0 - 0.15 * r.min(1.5);
                    for c in 0..3 {
                        px[c] = (col[c] * shade + noise).clamp(0.0, 1.0);
                    }
                    mask.set(x, y, label);
                } else {
                    for v in px.iter_mut() {
                        *v = (*v + noise).clamp(0.0, 1.0);
                    }
                }
            }
        }
        frames.push(img.map(quantize));
        masks.push(mask);
    }
    Ok(VideoSequence { name: name.into(), frames, masks })
}

/// Augmentation ranges for [`synth_pretrain_pair`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineRanges {
    pub max_rotation_deg: f64,
    pub scale: [f64; 2],
    /// Fraction of the frame size.
    pub max_translation: f64,
}

impl Default for AffineRanges {
    fn default() -> Self {
        Self { max_rotation_deg: 15.0, scale: [0.9, 1.1], max_translation: 0.1 }
    }
}

impl AffineRanges {
    pub fn identity() -> Self {
        Self { max_rotation_deg: 0.0, scale: [1.0, 1.0], max_translation: 0.0 }
    }
}

/// Rotation and scale about the frame centre, then translation (pixels).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub rotation: f64,
    pub scale: f64,
    pub translation: [f64; 2],
}

impl Affine {
    pub fn sample(r: &AffineRanges, width: usize, height: usize, rng: &mut SeededRng) -> Self {
        let rot = r.max_rotation_deg.to_radians();
        Self {
            rotation: rng.range_f64(-rot, rot),
            scale: rng.range_f64(r.scale[0], r.scale[1]),
            translation: [
                rng.range_f64(-r.max_translation, r.max_translation) * width as f64,
                rng.range_f64(-r.max_translation, r.max_translation) * height as f64,
            ],
        }
    }

    /// Source pixel sampled by output pixel `(x, y)`, nearest neighbour.
    pub fn source_pixel(&self, x: usize, y: usize, width: usize, height: usize) -> Option<(usize, usize)> {
        let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
        let (ox, oy) = (x as f64 + 0.5 - cx - self.translation[0], y as f64 + 0.5 - cy - self.translation[1]);
        let (s, c) = self.rotation.sin_cos();
        let sx = (c * ox + s * oy) / self.scale + cx;
        let sy = (-s * ox + c * oy) / self.scale + cy;
        let (fx, fy) = (sx.floor(), sy.floor());
        if fx < 0.0 || fy < 0.0 || fx >= width as f64 || fy >= height as f64 {
            return None;
        }
        Some((fx as usize, fy as usize))
    }

    /// Warps image and mask through the same sampling map; pixels mapped
    /// from outside the frame become black background.
    pub fn apply(&self, image: &RgbImage, mask: &LabelMask) -> (RgbImage, LabelMask) {
        let (w, h) = (mask.width(), mask.height());
        let mut img = Tensor::zeros(&[h, w, 3]);
        let mut m = LabelMask::background(w, h);
        for y in 0..h {
            for x in 0..w {
                if let Some((sx, sy)) = self.source_pixel(x, y, w, h) {
                    let src = &image.data()[(sy * w + sx) * 3..][..3];
                    img.data_mut()[(y * w + x) * 3..][..3].copy_from_slice(src);
                    m.set(x, y, mask.get(sx, sy));
                }
            }
        }
        (img, m)
    }
}

/// One frame and its mask.
pub type FramePair = (RgbImage, LabelMask);

/// Reference, pseudo-previous and target samples of one static image.
pub fn synth_pretrain_pair(
    image: &RgbImage,
    mask: &LabelMask,
    ranges: &AffineRanges,
    seed: u64,
) -> Result<[FramePair; 3]> {
    let (h, w, _) = image.hwc("synth_pretrain_pair")?;
    if (mask.width(), mask.height()) != (w, h) {
        return Err(Error::Argument("image and mask sizes differ".into()));
    }
    if mask.labels().iter().all(|&v| v == 0) {
        return Err(Error::Argument("pretraining needs a non-empty mask".into()));
    }
    let mut rng = SeededRng::new(seed);
    Ok(std::array::from_fn(|_| Affine::sample(ranges, w, h, &mut rng).apply(image, mask)))
}

/// Frame indices `(0, prev, target)` with `0 < prev < target`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TripletIndices {
    pub first: usize,
    pub prev: usize,
    pub target: usize,
}

/// Skip `k` uniform on `[1, min(max_skip, T−2)]`, then target uniform on `[k+1, T−1]`.
pub fn sample_triplet_indices(frames: usize, max_skip: usize, rng: &mut SeededRng) -> Result<TripletIndices> {
    if frames < 3 {
        return Err(Error::Argument(format!("triplet sampling needs ≥ 3 frames, got {frames}")));
    }
    if max_skip == 0 {
        return Err(Error::Argument("max_skip must be ≥ 1".into()));
    }
    let k = rng.range_usize(1, max_skip.min(frames - 2));
    let target = rng.range_usize(k + 1, frames - 1);
    Ok(TripletIndices { first: 0, prev: target - k, target })
}

pub fn sample_training_triplet(
    video: &VideoSequence,
    max_skip: usize,
    rng: &mut SeededRng,
) -> Result<(TripletIndices, [FramePair; 3])> {
    if video.masks.len() != video.frames.len() {
        return Err(Error::Argument("training needs a mask for every frame".into()));
    }
    let idx = sample_triplet_indices(video.len(), max_skip, rng)?;
    let pair = |i: usize| (video.frames[i].clone(), video.masks[i].clone());
    Ok((idx, [pair(idx.first), pair(idx.prev), pair(idx.target)]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc_scene(vx: f64) -> SceneConfig {
        SceneConfig {
            width: 96,
            height: 64,
            frames: 6,
            objects: vec![ObjectSpec {
                shape: ShapeKind::Disc,
                center: [30.0, 32.0],
                size: 8.0,
                aspect: 1.0,
                velocity: [vx, 0.0],
                scale_drift: 0.0,
                color: [0.9, 0.1, 0.1],
                color_drift: [0.0; 3],
            }],
            occlusions: vec![],
            background_seed: 5,
        }
    }

    fn centroid_x(m: &LabelMask, id: u8) -> f64 {
        let (mut s, mut n) = (0.0, 0.0);
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.get(x, y) == id {
                    s += x as f64;
                    n += 1.0;
                }
            }
        }
        s / n
    }

    #[test]
    fn static_scene_repeats_frames() {
        let seq = generate_sequence(&disc_scene(0.0), 1, "s").unwrap();
        for t in 1..seq.len() {
            assert_eq!(seq.masks[t], seq.masks[0]);
        }
        // pixel noise is per frame, the layout is not
        assert_eq!(seq.frames.len(), 6);
    }

    #[test]
    fn moving_disc_centroid_advances_by_velocity() {
        let seq = generate_sequence(&disc_scene(2.0), 1, "s").unwrap();
        let c0 = centroid_x(&seq.masks[0], 1);
        for t in 1..seq.len() {
            let ct = centroid_x(&seq.masks[t], 1);
            assert!((ct - c0 - 2.0 * t as f64).abs() < 1e-9, "t={t}: {ct} vs {c0}");
        }
    }

    #[test]
    fn motion_clamps_at_border() {
        let mut cfg = disc_scene(30.0);
        cfg.frames = 4;
        let seq = generate_sequence(&cfg, 1, "s").unwrap();
        let last = &seq.masks[3];
        assert_eq!(last.count(1), seq.masks[0].count(1));
        assert!(centroid_x(last, 1) < 96.0 - 8.0);
    }

    #[test]
    fn generation_is_deterministic() {
        let mut rng = SeededRng::new(9);
        let cfg = SceneConfig::random(&SceneSpec::default(), &mut rng);
        let a = generate_sequence(&cfg, 3, "a").unwrap();
        let b = generate_sequence(&cfg, 3, "a").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        let mut cfg = disc_scene(0.0);
        cfg.objects[0].center = [2.0, 32.0];
        assert!(matches!(generate_sequence(&cfg, 0, "x"), Err(Error::Config(_))));
        let mut cfg = disc_scene(0.0);
        cfg.frames = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = disc_scene(0.0);
        cfg.objects.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn masks_agree_with_point_in_shape() {
        let mut rng = SeededRng::new(21);
        for i in 0..5 {
            let cfg = SceneConfig::random(&SceneSpec { max_objects: 3, ..SceneSpec::default() }, &mut rng);
            let seq = generate_sequence(&cfg, i, "p").unwrap();
            for _ in 0..200 {
                let t = rng.range_usize(0, cfg.frames - 1);
                let (x, y) = (rng.range_usize(0, 95), rng.range_usize(0, 63));
                let l = seq.masks[t].get(x, y);
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside: Vec<bool> = cfg.objects.iter().map(|o| o.contains(t, 96, 64, px, py)).collect();
                if l == 0 {
                    assert!(inside.iter().all(|&b| !b));
                } else {
                    assert!(inside[l as usize - 1]);
                }
            }
        }
    }

    #[test]
    fn occlusion_schedule_decides_ownership() {
        let mut cfg = disc_scene(0.0);
        let mut second = cfg.objects[0].clone();
        second.center = [36.0, 32.0];
        cfg.objects.push(second);
        // default order: object 2 on top; schedule object 1 over 2 in frames 2..=3
        cfg.occlusions.push(Occlusion { occluder: 0, occluded: 1, start: 2, end: 3 });
        let seq = generate_sequence(&cfg, 0, "o").unwrap();
        let contested = (33, 32);
        assert_eq!(seq.masks[0].get(contested.0, contested.1), 2);
        assert_eq!(seq.masks[2].get(contested.0, contested.1), 1);
        assert_eq!(seq.masks[3].get(contested.0, contested.1), 1);
        assert_eq!(seq.masks[4].get(contested.0, contested.1), 2);
    }

    #[test]
    fn occlusion_heavy_scenes_overlap() {
        let mut rng = SeededRng::new(4);
        let spec = SceneSpec { occlusion_heavy: true, ..SceneSpec::default() };
        let mut overlapping = 0;
        for i in 0..20 {
            let cfg = SceneConfig::random(&spec, &mut rng);
            assert!(cfg.objects.len() >= 2);
            let seq = generate_sequence(&cfg, i, "h").unwrap();
            let hidden = (0..cfg.frames).any(|t| {
                let full: usize = (0..96 * 64)
                    .filter(|&p| cfg.objects[1].contains(t, 96, 64, (p % 96) as f64 + 0.5, (p / 96) as f64 + 0.5))
                    .count();
                seq.masks[t].count(2) < full || {
                    let full0: usize = (0..96 * 64)
                        .filter(|&p| cfg.objects[0].contains(t, 96, 64, (p % 96) as f64 + 0.5, (p / 96) as f64 + 0.5))
                        .count();
                    seq.masks[t].count(1) < full0
                }
            });
            overlapping += hidden as usize;
        }
        assert!(overlapping >= 12, "only {overlapping} of 20 scenes overlap");
    }

    #[test]
    fn kv_roundtrip() {
        let mut rng = SeededRng::new(5);
        let cfg = SceneConfig::random(&SceneSpec { occlusion_heavy: true, ..SceneSpec::default() }, &mut rng);
        assert_eq!(SceneConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn identity_augmentation_repeats_input() {
        let seq = generate_sequence(&disc_scene(0.0), 1, "s").unwrap();
        let out = synth_pretrain_pair(&seq.frames[0], &seq.masks[0], &AffineRanges::identity(), 3).unwrap();
        for (img, m) in &out {
            assert_eq!(img, &seq.frames[0]);
            assert_eq!(m, &seq.masks[0]);
        }
    }

    #[test]
    fn pure_translation_moves_mask_with_image() {
        let seq = generate_sequence(&disc_scene(0.0), 1, "s").unwrap();
        let a = Affine { rotation: 0.0, scale: 1.0, translation: [5.0, -3.0] };
        let (img, m) = a.apply(&seq.frames[0], &seq.masks[0]);
        for y in 3..64 {
            for x in 0..91 {
                assert_eq!(m.get(x + 5, y - 3), seq.masks[0].get(x, y));
                assert_eq!(img.at3(y - 3, x + 5, 1), seq.frames[0].at3(y, x, 1));
            }
        }
    }

    #[test]
    fn random_warp_keeps_image_and_mask_aligned() {
        let mut rng = SeededRng::new(8);
        let cfg = SceneConfig::random(&SceneSpec::default(), &mut rng);
        let seq = generate_sequence(&cfg, 0, "w").unwrap();
        let a = Affine::sample(&AffineRanges::default(), 96, 64, &mut rng);
        let (img, m) = a.apply(&seq.frames[0], &seq.masks[0]);
        for y in 0..64 {
            for x in 0..96 {
                match a.source_pixel(x, y, 96, 64) {
                    Some((sx, sy)) => {
                        assert_eq!(m.get(x, y), seq.masks[0].get(sx, sy));
                        assert_eq!(img.at3(y, x, 0), seq.frames[0].at3(sy, sx, 0));
                    }
                    None => assert_eq!(m.get(x, y), 0),
                }
            }
        }
        assert!(synth_pretrain_pair(&seq.frames[0], &LabelMask::background(96, 64), &AffineRanges::default(), 0).is_err());
    }

    #[test]
    fn triplet_only_choice_for_three_frames() {
        let mut rng = SeededRng::new(0);
        for _ in 0..50 {
            let t = sample_triplet_indices(3, 1, &mut rng).unwrap();
            assert_eq!((t.first, t.prev, t.target), (0, 1, 2));
        }
        assert!(sample_triplet_indices(2, 1, &mut rng).is_err());
    }

    #[test]
    fn triplet_skip_is_uniform() {
        let mut rng = SeededRng::new(1);
        let mut counts = [0usize; 5];
        let draws = 100_000;
        for _ in 0..draws {
            let t = sample_triplet_indices(50, 5, &mut rng).unwrap();
            assert!(0 < t.prev && t.prev < t.target && t.target < 50);
            counts[t.target - t.prev - 1] += 1;
        }
        let expected = draws as f64 / 5.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 4 degrees of freedom, p = 0.001 critical value
        assert!(chi2 < 18.47, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn triplet_sampling_is_reproducible() {
        let a: Vec<_> = {
            let mut r = SeededRng::new(77);
            (0..20).map(|_| sample_triplet_indices(8, 5, &mut r).unwrap()).collect()
        };
        let b: Vec<_> = {
            let mut r = SeededRng::new(77);
            (0..20).map(|_| sample_triplet_indices(8, 5, &mut r).unwrap()).collect()
        };
        assert_eq!(a, b);
    }
}
