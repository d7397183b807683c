//! Soft IoU training loss and the region (J) and contour (F) scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::raster::LabelMask;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Additive smoothing of the soft IoU ratio.
pub const IOU_SMOOTH: f64 = 1.0;

/// `1 − (Σpy + 1) / (Σp + Σy − Σpy + 1)`.
pub fn iou_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("iou_loss", pred.shape(), gt.shape()));
    }
    let (mut inter, mut sp, mut sy) = (T::zero(), T::zero(), T::zero());
    for (&p, &y) in pred.data().iter().zip(gt.data()) {
        inter += p * y;
        sp += p;
        sy += y;
    }
    let e = T::lit(IOU_SMOOTH);
    Ok(T::one() - (inter + e) / (sp + sy - inter + e))
}

/// Differentiable form of [`iou_loss`] recorded on `g`.
pub fn iou_loss_graph<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: Var) -> Result<Var> {
    let py = g.mul(pred, gt)?;
    let inter = g.sum(py);
    let sp = g.sum(pred);
    let sy = g.sum(gt);
    let union = g.add(sp, sy)?;
    let union = g.sub(union, inter)?;
    let num = g.add_const(inter, T::lit(IOU_SMOOTH));
    let den = g.add_const(union, T::lit(IOU_SMOOTH));
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -T::one());
    Ok(g.add_const(neg, T::one()))
}

fn check_sizes(a: &LabelMask, b: &LabelMask) -> Result<()> {
    if !a.same_size(b) {
        return Err(Error::shape(
            "mask comparison",
            &[a.height(), a.width()],
            &[b.height(), b.width()],
        ));
    }
    Ok(())
}

/// Jaccard index of one object's masks; 1 when both are empty.
pub fn region_j(pred: &LabelMask, gt: &LabelMask, object: u8) -> Result<f64> {
    check_sizes(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (p, g) = (p == object, g == object);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Object pixels with a 4-neighbour outside the object or on the image edge.
pub fn boundary(mask: &LabelMask, object: u8) -> Vec<bool> {
    let (w, h) = (mask.width(), mask.height());
    let inside = |x: isize, y: isize| {
        x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && mask.get(x as usize, y as usize) == object
    };
    let mut out = vec![false; w * h];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if inside(x, y) {
                out[y as usize * w + x as usize] =
                    !(inside(x - 1, y) && inside(x + 1, y) && inside(x, y - 1) && inside(x, y + 1));
            }
        }
    }
    out
}

/// Boundary tolerance for a `width×height` raster.
pub fn contour_radius(width: usize, height: usize) -> usize {
    let diag = ((width * width + height * height) as f64).sqrt();
    ((0.0075 * diag).round() as usize).max(1)
}

fn dilate(set: &[bool], w: usize, h: usize, r: usize) -> Vec<bool> {
    let r = r as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect();
    let mut out = vec![false; set.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if !set[y as usize * w + x as usize] {
                continue;
            }
            for &(dx, dy) in &offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    out[ny as usize * w + nx as usize] = true;
                }
            }
        }
    }
    out
}

/// Boundary F-measure with the default radius from [`contour_radius`].
pub fn contour_f(pred: &LabelMask, gt: &LabelMask, object: u8) -> Result<f64> {
    contour_f_with_radius(pred, gt, object, contour_radius(gt.width(), gt.height()))
}

/// Boundary F-measure; 1 when neither mask has a boundary.
pub fn contour_f_with_radius(pred: &LabelMask, gt: &LabelMask, object: u8, radius: usize) -> Result<f64> {
    check_sizes(pred, gt)?;
    let (w, h) = (gt.width(), gt.height());
    let bp = boundary(pred, object);
    let bg = boundary(gt, object);
    let np = bp.iter().filter(|&&b| b).count();
    let ng = bg.iter().filter(|&&b| b).count();
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    let matched = |a: &[bool], near: &[bool]| a.iter().zip(near).filter(|&(&x, &n)| x && n).count();
    let precision = if np == 0 { 0.0 } else { matched(&bp, &dilate(&bg, w, h, radius)) as f64 / np as f64 };
    let recall = if ng == 0 { 0.0 } else { matched(&bg, &dilate(&bp, w, h, radius)) as f64 / ng as f64 };
    Ok(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectScore {
    pub object: u8,
    pub j: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub name: String,
    pub objects: Vec<ObjectScore>,
    pub j: f64,
    pub f: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: Vec<SequenceScore>,
    pub mean_j: f64,
    pub mean_f: f64,
    pub j_and_f: f64,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { 0.0 } else { s / n as f64 }
}

/// Scores frames `1..T` of one sequence for every object in the first
/// ground-truth frame; per object the frame scores are averaged, then the
/// objects are averaged.
pub fn score_sequence(name: &str, preds: &[LabelMask], gts: &[LabelMask]) -> Result<SequenceScore> {
    if preds.len() != gts.len() {
        return Err(Error::Argument(format!(
            "{name}: {} predicted frames for {} ground-truth frames",
            preds.len(),
            gts.len()
        )));
    }
    if gts.len() < 2 {
        return Err(Error::Argument(format!("{name}: nothing to score beyond the given first frame")));
    }
    let m = gts[0].num_objects();
    if m == 0 {
        return Err(Error::Argument(format!("{name}: first frame has no objects")));
    }
    let mut objects = Vec::with_capacity(m as usize);
    for object in 1..=m {
        let mut js = Vec::with_capacity(gts.len() - 1);
        let mut fs = Vec::with_capacity(gts.len() - 1);
        for (p, g) in preds.iter().zip(gts).skip(1) {
            js.push(region_j(p, g, object)?);
            fs.push(contour_f(p, g, object)?);
        }
        objects.push(ObjectScore { object, j: mean(js.into_iter()), f: mean(fs.into_iter()) });
    }
    Ok(SequenceScore {
        name: name.to_string(),
        j: mean(objects.iter().map(|o| o.j)),
        f: mean(objects.iter().map(|o| o.f)),
        objects,
    })
}

pub fn evaluate_sequence(name: &str, preds: &[LabelMask], gts: &[LabelMask]) -> Result<EvalReport> {
    Ok(EvalReport::from_sequences(vec![score_sequence(name, preds, gts)?]))
}

impl EvalReport {
    /// Averages the sequence scores with equal weight.
    pub fn from_sequences(sequences: Vec<SequenceScore>) -> Self {
        let mean_j = mean(sequences.iter().map(|s| s.j));
        let mean_f = mean(sequences.iter().map(|s| s.f));
        Self { sequences, mean_j, mean_f, j_and_f: (mean_j + mean_f) / 2.0 }
    }

    pub fn summary_line(&self) -> String {
        format!("J: {:.3} F: {:.3} J&F: {:.3}", self.mean_j, self.mean_f, self.j_and_f)
    }

    /// One `sequence object J F` row per object, then the summary line.
    pub fn to_table(&self) -> String {
        let width = self.sequences.iter().map(|s| s.name.len()).max().unwrap_or(0).max(8);
        let mut out = format!("{:<width$}  object  J      F\n", "sequence");
        for s in &self.sequences {
            for o in &s.objects {
                out.push_str(&format!("{:<width$}  {:<6}  {:.3}  {:.3}\n", s.name, o.object, o.j, o.f));
            }
        }
        out.push_str(&self.summary_line());
        out.push('\n');
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
