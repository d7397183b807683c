//! Frame-by-frame mask propagation with odds-ratio multi-object
//! aggregation and multi-scale averaging.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::channel_attention_map;
use crate::datagen::VideoSequence;
use crate::error::{Error, Result};
use crate::matching::{match_features, matched_energy, normalize_similarity, reduce_channels, similarity, FeatureMap};
use crate::model::{Model, ObjectInputs, RefInput};
use crate::ops::{bilinear_resize, transpose};
use crate::raster::{LabelMask, RgbImage};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Clamp applied to probabilities before taking odds.
pub const PROB_EPS: f64 = 1e-7;

/// Zeroes every pixel whose label differs from `object`.
pub fn mask_out_background(rgb: &RgbImage, mask: &LabelMask, object: u8) -> Result<RgbImage> {
    if object == 0 {
        return Err(Error::Argument("object ids start at 1".into()));
    }
    let (h, w, c) = rgb.hwc("mask_out_background")?;
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Argument(format!(
            "mask {}×{} does not match image {h}×{w}",
            mask.height(),
            mask.width()
        )));
    }
    let labels = mask.labels();
    Ok(Tensor::from_fn(rgb.shape(), |k| if labels[k / c] == object { rgb.data()[k] } else { 0.0 }))
}

/// Per-pixel maps `H×W×1`; `maps[0]` is the background, `maps[m]` object `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityStack {
    pub maps: Vec<Tensor<f64>>,
}

impl ProbabilityStack {
    /// Hard one-hot stack of a label mask with `objects` objects.
    pub fn one_hot(mask: &LabelMask, objects: u8) -> Self {
        Self { maps: (0..=objects).map(|m| mask.indicator(m)).collect() }
    }

    pub fn num_objects(&self) -> usize {
        self.maps.len() - 1
    }

    pub fn object(&self, m: usize) -> &Tensor<f64> {
        &self.maps[m]
    }
}

fn odds(p: f64) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    p / (1.0 - p)
}

/// Combines independent per-object maps into one distribution per pixel:
/// `p₀ = Π(1 − p_m)`, `P_m = odds(p_m) / Σ_j odds(p_j)` over `j = 0..M`.
/// Labels are the argmax, ties going to the smaller index.
pub fn aggregate_multi_object(objects: &[Tensor<f64>]) -> Result<(ProbabilityStack, LabelMask)> {
    let first = objects.first().ok_or_else(|| Error::Argument("no objects to aggregate".into()))?;
    let (h, w, c) = first.hwc("aggregate")?;
    if c != 1 || objects.len() > 255 {
        return Err(Error::InvalidShape("aggregation expects at most 255 H×W×1 maps".into()));
    }
    for o in objects {
        if o.shape() != first.shape() {
            return Err(Error::shape("aggregate", first.shape(), o.shape()));
        }
    }
    let m = objects.len();
    let n = h * w;
    let mut maps = vec![vec![0.0; n]; m + 1];
    let mut labels = vec![0u8; n];
    let mut o = vec![0.0; m + 1];
    for i in 0..n {
        let mut bg = 1.0;
        for (j, obj) in objects.iter().enumerate() {
            let p = obj.data()[i].clamp(PROB_EPS, 1.0 - PROB_EPS);
            bg *= 1.0 - p;
            o[j + 1] = odds(p);
        }
        o[0] = odds(bg);
        let total: f64 = o.iter().sum();
        let mut best = 0;
        for j in 0..=m {
            maps[j][i] = o[j] / total;
            if maps[j][i] > maps[best][i] {
                best = j;
            }
        }
        labels[i] = best as u8;
    }
    let maps = maps.into_iter().map(|d| Tensor::new(vec![h, w, 1], d)).collect::<Result<_>>()?;
    Ok((ProbabilityStack { maps }, LabelMask::new(w, h, labels)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    /// Relative input sizes whose probabilities are averaged.
    pub scales: Vec<f64>,
    /// Encode each first-frame reference once per sequence.
    pub cache_first_features: bool,
    /// Feed the aggregated probability (rather than the hard mask) as the
    /// target's 4th channel.
    pub soft_prev: bool,
    /// Use frame 0 and its mask as the previous-frame reference too.
    pub first_frame_only: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            scales: vec![0.75, 1.0, 1.25],
            cache_first_features: true,
            soft_prev: true,
            first_frame_only: false,
        }
    }
}

/// Input size for a scale, rounded to a positive multiple of 4.
pub fn scaled_size(h: usize, w: usize, scale: f64) -> (usize, usize) {
    let r = |v: usize| (((v as f64 * scale) / 4.0).round() as usize).max(1) * 4;
    (r(h), r(w))
}

fn resized<T: Scalar>(img: &Tensor<f64>, (h, w): (usize, usize)) -> Result<Tensor<T>> {
    let s = img.shape();
    if (s[0], s[1]) == (h, w) {
        Ok(img.cast())
    } else {
        Ok(bilinear_resize(img, h, w)?.cast())
    }
}

/// Predicted masks and aggregated probabilities for every frame; frame 0
/// carries the given mask and its one-hot stack.
#[derive(Clone, Debug, PartialEq)]
pub struct SequencePrediction {
    pub masks: Vec<LabelMask>,
    pub probs: Vec<ProbabilityStack>,
}

struct ScaleRefs<T: Scalar> {
    size: (usize, usize),
    first_images: Vec<Tensor<T>>,
    first_features: Option<Vec<Tensor<T>>>,
}

pub fn infer_sequence<T: Scalar>(
    model: &Model<T>,
    video: &VideoSequence,
    first_mask: &LabelMask,
    cfg: &InferenceConfig,
) -> Result<SequencePrediction> {
    if video.is_empty() {
        return Err(Error::Argument("empty video".into()));
    }
    if cfg.scales.is_empty() || cfg.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Argument("scales must be a non-empty list of positive numbers".into()));
    }
    let (h, w) = video.size();
    if (first_mask.height(), first_mask.width()) != (h, w) {
        return Err(Error::Argument("first mask and frames differ in size".into()));
    }
    let m = first_mask.num_objects();
    if m == 0 {
        return Err(Error::Argument("first mask has no objects".into()));
    }
    let mut masks = vec![first_mask.clone()];
    let mut probs = vec![ProbabilityStack::one_hot(first_mask, m)];
    if video.len() == 1 {
        return Ok(SequencePrediction { masks, probs });
    }

    let masked_first: Vec<RgbImage> = (1..=m)
        .map(|o| mask_out_background(&video.frames[0], first_mask, o))
        .collect::<Result<_>>()?;
    let refs: Vec<ScaleRefs<T>> = cfg
        .scales
        .iter()
        .map(|&s| {
            let size = scaled_size(h, w, s);
            let first_images = masked_first.iter().map(|img| resized(img, size)).collect::<Result<Vec<_>>>()?;
            let first_features = if cfg.cache_first_features {
                Some(
                    first_images
                        .par_iter()
                        .map(|img| model.encode_reference(img).map(FeatureMap::into_tensor))
                        .collect::<Result<Vec<_>>>()?,
                )
            } else {
                None
            };
            Ok(ScaleRefs { size, first_images, first_features })
        })
        .collect::<Result<_>>()?;

    for t in 1..video.len() {
        let prev_mask = masks[t - 1].clone();
        let prev_stack = &probs[t - 1];
        let per_object: Vec<Tensor<f64>> = (1..=m)
            .into_par_iter()
            .map(|o| {
                let oi = o as usize - 1;
                let guide = if cfg.soft_prev { prev_stack.object(o as usize).clone() } else { prev_mask.indicator(o) };
                let prev_img = if cfg.first_frame_only {
                    None
                } else {
                    Some(mask_out_background(&video.frames[t - 1], &prev_mask, o)?)
                };
                let mut acc = Tensor::zeros(&[h, w, 1]);
                for r in &refs {
                    let target = resized::<T>(&video.frames[t], r.size)?;
                    let prev_prob = resized::<T>(&guide, r.size)?;
                    let first_ref = match &r.first_features {
                        Some(f) => RefInput::Features(&f[oi]),
                        None => RefInput::Image(&r.first_images[oi]),
                    };
                    let prev_scaled = prev_img.as_ref().map(|p| resized::<T>(p, r.size)).transpose()?;
                    let prev_ref = match &prev_scaled {
                        Some(img) => RefInput::Image(img),
                        None => first_ref,
                    };
                    let p = model.forward_single_object(&ObjectInputs {
                        first_ref,
                        prev_ref,
                        target: &target,
                        prev_prob: &prev_prob,
                    })?;
                    let p = resized::<f64>(&p.cast(), (h, w))?;
                    acc.add_assign(&p);
                }
                let k = cfg.scales.len() as f64;
                Ok(acc.map(|v| v / k))
            })
            .collect::<Result<_>>()?;
        let (stack, labels) = aggregate_multi_object(&per_object)?;
        masks.push(labels);
        probs.push(stack);
    }
    Ok(SequencePrediction { masks, probs })
}

/// Intermediate maps of the first-frame branch, for inspection.
#[derive(Clone, Debug)]
pub struct DebugMaps {
    /// Column-normalized similarity `S′`, `N×N`.
    pub similarity: Tensor<f64>,
    /// Per-pixel L2 norm of the matched features, `H/4×W/4×1`.
    pub energy: Tensor<f64>,
    /// Channel attention `A′`, `C/4×C/4`.
    pub attention: Tensor<f64>,
}

/// Recomputes the first-frame branch of one object's forward pass.
pub fn debug_maps<T: Scalar>(model: &Model<T>, masked_first: &RgbImage, target: &RgbImage, prev_prob: &Tensor<f64>) -> Result<DebugMaps> {
    let f_ref = model.encode_reference(&masked_first.cast())?;
    let (f_tar, _) = model.encode_target(&target.cast(), &prev_prob.cast())?;
    let p = &model.params.nlpmm_first;
    let (fh, fw) = (f_ref.height(), f_ref.width());
    let r = reduce_channels(&f_ref, &p.reduce_ref, &model.store)?.flatten();
    let t = reduce_channels(&f_tar, &p.reduce_tar, &model.store)?.flatten();
    let s = normalize_similarity(&similarity(&r, &t)?)?;
    let matched = FeatureMap::unflatten(transpose(&match_features(&r, &s)?)?, fh, fw)?;
    let attention = channel_attention_map(&matched.flatten())?;
    Ok(DebugMaps {
        similarity: s.matrix.cast(),
        energy: matched_energy(&matched).cast(),
        attention: attention.cast(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn map(v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn masking_cases() {
        let mut rng = SeededRng::new(1);
        let img = Tensor::from_fn(&[4, 5, 3], |_| rng.uniform());
        let full = LabelMask::new(5, 4, vec![2; 20]).unwrap();
        assert_eq!(mask_out_background(&img, &full, 2).unwrap(), img);
        let none = LabelMask::background(5, 4);
        assert!(mask_out_background(&img, &none, 1).unwrap().data().iter().all(|&v| v == 0.0));
        let checker = LabelMask::new(5, 4, (0..20).map(|k| ((k / 5 + k % 5) % 2) as u8).collect()).unwrap();
        let out = mask_out_background(&img, &checker, 1).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                for c in 0..3 {
                    let expect = if (x + y) % 2 == 1 { img.at3(y, x, c) } else { 0.0 };
                    assert_eq!(out.at3(y, x, c), expect);
                }
            }
        }
        assert!(mask_out_background(&img, &checker, 0).is_err());
    }

    #[test]
    fn aggregation_cases() {
        let (s, l) = aggregate_multi_object(&[map(&[0.5])]).unwrap();
        assert!((s.maps[0].data()[0] - 0.5).abs() < 1e-12 && (s.maps[1].data()[0] - 0.5).abs() < 1e-12);
        // tie goes to the background
        assert_eq!(l.labels(), &[0]);

        let (s, l) = aggregate_multi_object(&[map(&[0.2]), map(&[0.8])]).unwrap();
        let p: Vec<f64> = s.maps.iter().map(|m| m.data()[0]).collect();
        let o = [0.16 / 0.84, 0.25, 4.0];
        let total: f64 = o.iter().sum();
        for j in 0..3 {
            assert!((p[j] - o[j] / total).abs() < 1e-6);
        }
        assert!((p[0] - 0.0429).abs() < 1e-4 && (p[1] - 0.0563).abs() < 1e-4 && (p[2] - 0.9008).abs() < 1e-4);
        assert_eq!(l.labels(), &[2]);

        assert!(aggregate_multi_object(&[]).is_err());
    }

    #[test]
    fn equal_odds_give_uniform_distribution() {
        // M = 1 at p = 0.5 and M = 3 at the p with odds(p) = odds(Π(1−p)).
        // For M = 3: p/(1−p) = (1−p)³/(1−(1−p)³); solve by bisection.
        let f = |p: f64| p / (1.0 - p) - (1.0 - p).powi(3) / (1.0 - (1.0 - p).powi(3));
        let (mut lo, mut hi) = (0.01, 0.99);
        for _ in 0..200 {
            let mid = (lo + hi) / 2.0;
            if f(mid) < 0.0 { lo = mid } else { hi = mid }
        }
        let p = (lo + hi) / 2.0;
        let (s, _) = aggregate_multi_object(&[map(&[p]), map(&[p]), map(&[p])]).unwrap();
        for m in &s.maps {
            assert!((m.data()[0] - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn saturated_inputs_stay_finite() {
        let (s, l) = aggregate_multi_object(&[map(&[1.0, 0.0]), map(&[1.0, 0.0])]).unwrap();
        assert!(s.maps.iter().all(|m| m.all_finite()));
        assert_eq!(l.labels(), &[1, 0]);
    }

    fn arb_stack() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..=3).prop_flat_map(|m| prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 6), m))
    }

    proptest! {
        #[test]
        fn aggregation_is_a_distribution_preserving_object_order(stack in arb_stack()) {
            let maps: Vec<Tensor<f64>> = stack.iter().map(|v| map(v)).collect();
            let (s, l) = aggregate_multi_object(&maps).unwrap();
            for i in 0..6 {
                let total: f64 = s.maps.iter().map(|m| m.data()[i]).sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
                prop_assert!(s.maps.iter().all(|m| m.data()[i] >= 0.0));
                let clamped: Vec<f64> = stack.iter().map(|v| v[i].clamp(PROB_EPS, 1.0 - PROB_EPS)).collect();
                let mut best_p = 0;
                let mut best_agg = 1;
                for j in 0..clamped.len() {
                    if clamped[j] > clamped[best_p] { best_p = j; }
                    if s.maps[j + 1].data()[i] > s.maps[best_agg].data()[i] { best_agg = j + 1; }
                }
                prop_assert_eq!(best_agg, best_p + 1);
                if l.labels()[i] != 0 {
                    prop_assert_eq!(l.labels()[i] as usize, best_agg);
                }
                if clamped.len() == 1 {
                    prop_assert_eq!(l.labels()[i] == 1, clamped[0] > 0.5);
                }
            }
        }
    }

    fn tiny_model() -> Model<f64> {
        let cfg = ModelConfig { feature_channels: 8, stage_channels: [4, 4], ..ModelConfig::default() };
        Model::new(cfg, 2).unwrap()
    }

    fn tiny_video(frames: usize) -> VideoSequence {
        let mut rng = SeededRng::new(3);
        let mut mask = LabelMask::background(12, 8);
        for y in 2..6 {
            for x in 2..5 {
                mask.set(x, y, 1);
            }
            for x in 7..10 {
                mask.set(x, y, 2);
            }
        }
        VideoSequence {
            name: "tiny".into(),
            frames: (0..frames).map(|_| Tensor::from_fn(&[8, 12, 3], |_| rng.uniform())).collect(),
            masks: vec![mask],
        }
    }

    #[test]
    fn single_frame_returns_given_mask() {
        let v = tiny_video(1);
        let out = infer_sequence(&tiny_model(), &v, &v.masks[0], &InferenceConfig::default()).unwrap();
        assert_eq!(out.masks, v.masks);
    }

    #[test]
    fn repeated_scale_matches_single_scale() {
        let v = tiny_video(3);
        let model = tiny_model();
        let one = InferenceConfig { scales: vec![1.0], ..InferenceConfig::default() };
        let three = InferenceConfig { scales: vec![1.0; 3], ..InferenceConfig::default() };
        let a = infer_sequence(&model, &v, &v.masks[0], &one).unwrap();
        let b = infer_sequence(&model, &v, &v.masks[0], &three).unwrap();
        assert_eq!(a.masks, b.masks);
        for (x, y) in a.probs.iter().zip(&b.probs) {
            for (p, q) in x.maps.iter().zip(&y.maps) {
                assert!(p.max_abs_diff(q) < 1e-12);
            }
        }
    }

    #[test]
    fn caching_first_features_changes_nothing() {
        let v = tiny_video(4);
        let model = tiny_model();
        let cached = InferenceConfig::default();
        let fresh = InferenceConfig { cache_first_features: false, ..InferenceConfig::default() };
        let a = infer_sequence(&model, &v, &v.masks[0], &cached).unwrap();
        let b = infer_sequence(&model, &v, &v.masks[0], &fresh).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.masks.len(), 4);
    }

    #[test]
    fn inference_rejects_bad_input() {
        let v = tiny_video(2);
        let model = tiny_model();
        let no_scales = InferenceConfig { scales: vec![], ..InferenceConfig::default() };
        assert!(infer_sequence(&model, &v, &v.masks[0], &no_scales).is_err());
        let wrong = LabelMask::background(4, 4);
        assert!(infer_sequence(&model, &v, &wrong, &InferenceConfig::default()).is_err());
    }

    #[test]
    fn scaled_sizes_are_multiples_of_four() {
        assert_eq!(scaled_size(64, 96, 0.75), (48, 72));
        assert_eq!(scaled_size(64, 96, 1.25), (80, 120));
        assert_eq!(scaled_size(8, 12, 0.1), (4, 4));
    }

    #[test]
    fn debug_maps_are_stochastic() {
        let v = tiny_video(2);
        let model = tiny_model();
        let masked = mask_out_background(&v.frames[0], &v.masks[0], 1).unwrap();
        let d = debug_maps(&model, &masked, &v.frames[1], &v.masks[0].indicator(1)).unwrap();
        assert_eq!(d.similarity.shape(), &[6, 6]);
        assert_eq!(d.energy.shape(), &[2, 3, 1]);
        assert_eq!(d.attention.shape(), &[2, 2]);
        for j in 0..6 {
            let s: f64 = (0..6).map(|i| d.similarity.at2(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
