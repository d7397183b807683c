//! Encoder–matching–decoder network producing one object's probability map.
//!
//! Layout of a forward pass for one object:
//!
//! ```text
//!   first frame (masked) ─┐ shared reference encoder ─► NLPMM+CM (first) ─┐
//!   prev frame (masked) ──┘                          ─► NLPMM+CM (prev) ──┤ concat ► 3×3 fuse
//!   current frame + prev prob ─► target encoder ──────────────────────────┘      │
//!                                   │ skips (1/2, 1/4) ───────────────────► decoder ► sigmoid
//! ```
//!
//! Encoder stages are `3×3 conv → relu`, the first two followed by a 2×
//! bilinear downsample (exactly a 2×2 mean at even sizes), so features sit
//! at 1/4 of the image resolution.

use serde::{Deserialize, Serialize};

use crate::attention::{cm_graph, CmState};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::layers::Conv;
use crate::matching::{nlpmm_graph, FeatureMap, NlpmmParams};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Encoder output channels `C`; matching reduces to `C/4`.
    pub feature_channels: usize,
    /// Widths of the first two encoder stages (1/2 and 1/4 resolution skips).
    pub stage_channels: [usize; 2],
    /// Skip channel attention in both branches.
    pub disable_cm: bool,
    /// Use the target encoder for the references too (zero mask channel).
    pub single_encoder: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_channels: 64,
            stage_channels: [16, 32],
            disable_cm: false,
            single_encoder: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    pub stage1: Conv,
    pub stage2: Conv,
    pub stage3: Conv,
    pub in_channels: usize,
}

impl EncoderParams {
    fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        cfg: &ModelConfig,
        rng: &mut SeededRng,
    ) -> Self {
        let [c1, c2] = cfg.stage_channels;
        Self {
            stage1: Conv::register(store, &format!("{name}.stage1"), 3, in_channels, c1, rng),
            stage2: Conv::register(store, &format!("{name}.stage2"), 3, c1, c2, rng),
            stage3: Conv::register(store, &format!("{name}.stage3"), 3, c2, cfg.feature_channels, rng),
            in_channels,
        }
    }
}

/// Intermediate target-encoder features handed to the decoder.
#[derive(Clone, Copy, Debug)]
pub struct SkipStack {
    /// 1/2 resolution.
    pub s1: Var,
    /// 1/4 resolution.
    pub s2: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderParams {
    pub refine1: Conv,
    pub refine2: Conv,
    pub head: Conv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelParams {
    pub ref_encoder: EncoderParams,
    pub tar_encoder: EncoderParams,
    pub nlpmm_first: NlpmmParams,
    pub nlpmm_prev: NlpmmParams,
    pub cm_first: CmState,
    pub cm_prev: CmState,
    pub fusion: Conv,
    pub decoder: DecoderParams,
}

/// A reference frame, either as a masked image or as features already
/// produced by [`Model::encode_reference`].
#[derive(Clone, Copy, Debug)]
pub enum RefInput<'a, T: Scalar> {
    Image(&'a Tensor<T>),
    Features(&'a Tensor<T>),
}

/// Everything one object's forward pass consumes. Images are `H×W×3`,
/// `prev_prob` is `H×W×1` in `[0, 1]`.
#[derive(Clone, Copy, Debug)]
pub struct ObjectInputs<'a, T: Scalar> {
    pub first_ref: RefInput<'a, T>,
    pub prev_ref: RefInput<'a, T>,
    pub target: &'a Tensor<T>,
    pub prev_prob: &'a Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f64> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub params: ModelParams,
}

impl<T: Scalar> Model<T> {
    /// Fresh model with He-uniform weights and zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let c = config.feature_channels;
        if !c.is_multiple_of(4) || c == 0 {
            return Err(Error::Config(format!("feature channels must be a positive multiple of 4, got {c}")));
        }
        let q = c / 4;
        let [c1, c2] = config.stage_channels;
        let mut rng = SeededRng::new(seed);
        let mut store = ParamStore::new();
        let tar_encoder = EncoderParams::register(&mut store, "tar_encoder", 4, &config, &mut rng);
        let ref_encoder = if config.single_encoder {
            tar_encoder
        } else {
            EncoderParams::register(&mut store, "ref_encoder", 3, &config, &mut rng)
        };
        let nlpmm_first = NlpmmParams::register(&mut store, "nlpmm_first", c, &mut rng)?;
        let nlpmm_prev = NlpmmParams::register(&mut store, "nlpmm_prev", c, &mut rng)?;
        let cm_first = CmState::register(&mut store, "cm_first");
        let cm_prev = CmState::register(&mut store, "cm_prev");
        let fusion = Conv::register(&mut store, "fusion", 3, 2 * q, q, &mut rng);
        let decoder = DecoderParams {
            refine1: Conv::register(&mut store, "decoder.refine1", 3, q + c2, q, &mut rng),
            refine2: Conv::register(&mut store, "decoder.refine2", 3, q + c1, q, &mut rng),
            head: Conv::register(&mut store, "decoder.head", 1, q, 1, &mut rng),
        };
        if config.disable_cm {
            for cm in [cm_first, cm_prev] {
                store.get_mut(cm.gamma_raw).trainable = false;
            }
        }
        Ok(Self {
            config,
            store,
            params: ModelParams {
                ref_encoder,
                tar_encoder,
                nlpmm_first,
                nlpmm_prev,
                cm_first,
                cm_prev,
                fusion,
                decoder,
            },
        })
    }

    /// Rebuilds a model from named tensors (e.g. a checkpoint). The encoder
    /// arrangement and widths are inferred from the names and shapes.
    pub fn from_named(named: &[(String, Tensor<T>)], disable_cm: bool) -> Result<Self> {
        let find = |n: &str| named.iter().find(|(k, _)| k == n).map(|(_, t)| t);
        let dims = |n: &str| -> Result<Vec<usize>> {
            find(n)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks {n}")))
        };
        let s1 = dims("tar_encoder.stage1.weight")?;
        let s2 = dims("tar_encoder.stage2.weight")?;
        let s3 = dims("tar_encoder.stage3.weight")?;
        let config = ModelConfig {
            feature_channels: s3[3],
            stage_channels: [s1[3], s2[3]],
            disable_cm,
            single_encoder: find("ref_encoder.stage1.weight").is_none(),
        };
        let mut model = Self::new(config, 0)?;
        if named.len() != model.store.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                named.len(),
                model.store.len()
            )));
        }
        for (name, value) in named {
            let id = model
                .store
                .id_of(name)
                .ok_or_else(|| Error::Config(format!("unexpected tensor {name}")))?;
            let p = model.store.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(Error::shape("checkpoint", p.value.shape(), value.shape()));
            }
            p.value = value.clone();
        }
        Ok(model)
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        self.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
    }

    fn check_image(&self, img: &Tensor<T>, channels: usize, what: &str) -> Result<(usize, usize)> {
        let (h, w, c) = img.hwc("model input")?;
        if c != channels {
            return Err(Error::InvalidShape(format!("{what} needs {channels} channels, got {c}")));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidShape(format!(
                "{what} size {h}×{w} must be divisible by 4"
            )));
        }
        Ok((h, w))
    }

    fn encoder_graph(&self, g: &mut Graph<T>, enc: &EncoderParams, x: Var) -> Result<(Var, SkipStack)> {
        let (h, w, _) = g.value(x).hwc("encoder")?;
        let a = enc.stage1.apply(g, &self.store, x)?;
        let a = g.relu(a);
        let s1 = g.resize(a, h / 2, w / 2)?;
        let b = enc.stage2.apply(g, &self.store, s1)?;
        let b = g.relu(b);
        let s2 = g.resize(b, h / 4, w / 4)?;
        let c = enc.stage3.apply(g, &self.store, s2)?;
        let f = g.relu(c);
        Ok((f, SkipStack { s1, s2 }))
    }

    /// Reference-encoder features of a background-masked `H×W×3` image.
    pub fn encode_reference_graph(&self, g: &mut Graph<T>, masked_rgb: Var) -> Result<Var> {
        self.check_image(g.value(masked_rgb), 3, "reference image")?;
        let x = if self.config.single_encoder {
            let (h, w, _) = g.value(masked_rgb).hwc("reference")?;
            let z = g.constant(Tensor::zeros(&[h, w, 1]));
            g.concat(masked_rgb, z)?
        } else {
            masked_rgb
        };
        Ok(self.encoder_graph(g, &self.params.ref_encoder, x)?.0)
    }

    /// Target-encoder features of the frame with the previous mask as a 4th channel.
    pub fn encode_target_graph(&self, g: &mut Graph<T>, rgb: Var, mask: Var) -> Result<(Var, SkipStack)> {
        let (h, w) = self.check_image(g.value(rgb), 3, "target image")?;
        if g.value(mask).shape() != [h, w, 1] {
            return Err(Error::shape("encode_target", g.value(rgb).shape(), g.value(mask).shape()));
        }
        let x = g.concat(rgb, mask)?;
        self.encoder_graph(g, &self.params.tar_encoder, x)
    }

    fn branch_graph(&self, g: &mut Graph<T>, nl: &NlpmmParams, cm: &CmState, f_ref: Var, f_tar: Var) -> Result<Var> {
        let m = nlpmm_graph(g, &self.store, nl, f_ref, f_tar)?;
        if self.config.disable_cm {
            Ok(m)
        } else {
            cm_graph(g, &self.store, cm, m)
        }
    }

    pub fn fuse_graph(&self, g: &mut Graph<T>, m_first: Var, m_prev: Var) -> Result<Var> {
        if g.value(m_first).shape() != g.value(m_prev).shape() {
            return Err(Error::shape("fuse", g.value(m_first).shape(), g.value(m_prev).shape()));
        }
        let cat = g.concat(m_first, m_prev)?;
        self.params.fusion.apply(g, &self.store, cat)
    }

    /// Two refine stages (`concat skip → 3×3 conv → relu → 2× upsample`)
    /// and a 1×1 head; returns `H×W×1` logits. The head is applied before
    /// the last upsample, which is equivalent because both are linear.
    pub fn decode_graph(&self, g: &mut Graph<T>, fused: Var, skips: SkipStack, out_h: usize, out_w: usize) -> Result<Var> {
        let (h4, w4, _) = g.value(fused).hwc("decode")?;
        let (h2, w2, _) = g.value(skips.s1).hwc("decode")?;
        let (sh, sw, _) = g.value(skips.s2).hwc("decode")?;
        if (sh, sw) != (h4, w4) || (h2, w2) != (2 * h4, 2 * w4) {
            return Err(Error::shape("decode skips", g.value(skips.s1).shape(), g.value(skips.s2).shape()));
        }
        let d = &self.params.decoder;
        let x = g.concat(fused, skips.s2)?;
        let x = d.refine1.apply(g, &self.store, x)?;
        let x = g.relu(x);
        let x = g.resize(x, h2, w2)?;
        let x = g.concat(x, skips.s1)?;
        let x = d.refine2.apply(g, &self.store, x)?;
        let x = g.relu(x);
        let logits = d.head.apply(g, &self.store, x)?;
        g.resize(logits, out_h, out_w)
    }

    fn ref_var(&self, g: &mut Graph<T>, r: RefInput<'_, T>) -> Result<Var> {
        match r {
            RefInput::Image(img) => {
                let v = g.constant(img.clone());
                self.encode_reference_graph(g, v)
            }
            RefInput::Features(f) => Ok(g.constant(f.clone())),
        }
    }

    /// Records the full single-object pass; returns the `H×W×1` probability node.
    pub fn forward_graph(&self, g: &mut Graph<T>, inp: &ObjectInputs<'_, T>) -> Result<Var> {
        let (h, w) = self.check_image(inp.target, 3, "target image")?;
        let f_first = self.ref_var(g, inp.first_ref)?;
        let f_prev = self.ref_var(g, inp.prev_ref)?;
        let rgb = g.constant(inp.target.clone());
        let mask = g.constant(inp.prev_prob.clone());
        let (f_tar, skips) = self.encode_target_graph(g, rgb, mask)?;
        let p = &self.params;
        let m_first = self.branch_graph(g, &p.nlpmm_first, &p.cm_first, f_first, f_tar)?;
        let m_prev = self.branch_graph(g, &p.nlpmm_prev, &p.cm_prev, f_prev, f_tar)?;
        let fused = self.fuse_graph(g, m_first, m_prev)?;
        let logits = self.decode_graph(g, fused, skips, h, w)?;
        Ok(g.sigmoid(logits))
    }

    pub fn encode_reference(&self, masked_rgb: &Tensor<T>) -> Result<FeatureMap<T>> {
        let mut g = Graph::new();
        let x = g.constant(masked_rgb.clone());
        let f = self.encode_reference_graph(&mut g, x)?;
        FeatureMap::new(g.into_value(f))
    }

    /// Returns the final features and the `(1/2, 1/4)` skip maps.
    pub fn encode_target(&self, rgb: &Tensor<T>, prev_mask: &Tensor<T>) -> Result<(FeatureMap<T>, [FeatureMap<T>; 2])> {
        let mut g = Graph::new();
        let (x, m) = (g.constant(rgb.clone()), g.constant(prev_mask.clone()));
        let (f, s) = self.encode_target_graph(&mut g, x, m)?;
        Ok((
            FeatureMap::new(g.value(f).clone())?,
            [FeatureMap::new(g.value(s.s1).clone())?, FeatureMap::new(g.value(s.s2).clone())?],
        ))
    }

    pub fn fuse(&self, m_first: &FeatureMap<T>, m_prev: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        let mut g = Graph::new();
        let (a, b) = (g.constant(m_first.tensor().clone()), g.constant(m_prev.tensor().clone()));
        let f = self.fuse_graph(&mut g, a, b)?;
        FeatureMap::new(g.into_value(f))
    }

    pub fn decode(&self, fused: &FeatureMap<T>, skips: &[FeatureMap<T>; 2], out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let f = g.constant(fused.tensor().clone());
        let s = SkipStack {
            s1: g.constant(skips[0].tensor().clone()),
            s2: g.constant(skips[1].tensor().clone()),
        };
        let out = self.decode_graph(&mut g, f, s, out_h, out_w)?;
        Ok(g.into_value(out))
    }

    /// Probability map `H×W×1` for one object.
    pub fn forward_single_object(&self, inp: &ObjectInputs<'_, T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.forward_graph(&mut g, inp)?;
        Ok(g.into_value(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_image(h: usize, w: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut r = SeededRng::new(seed);
        Tensor::from_fn(&[h, w, c], |_| r.uniform())
    }

    fn small() -> ModelConfig {
        ModelConfig {
            feature_channels: 16,
            stage_channels: [4, 8],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn reference_encoding_shape_and_determinism() {
        let m = Model::<f64>::new(small(), 1).unwrap();
        let img = rand_image(16, 24, 3, 2);
        let a = m.encode_reference(&img).unwrap();
        assert_eq!(a.tensor().shape(), &[4, 6, 16]);
        assert_eq!(a, m.encode_reference(&img).unwrap());
        let z = m.encode_reference(&Tensor::zeros(&[16, 24, 3])).unwrap();
        // zero biases and zero input: every feature is exactly zero
        assert!(z.tensor().data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            m.encode_reference(&rand_image(18, 24, 3, 3)),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn mask_channel_is_live() {
        let m = Model::<f64>::new(small(), 4).unwrap();
        let img = rand_image(16, 16, 3, 5);
        let (a, _) = m.encode_target(&img, &Tensor::zeros(&[16, 16, 1])).unwrap();
        let (b, skips) = m.encode_target(&img, &Tensor::ones(&[16, 16, 1])).unwrap();
        assert_ne!(a, b);
        assert_eq!(skips[0].tensor().shape(), &[8, 8, 4]);
        assert_eq!(skips[1].tensor().shape(), &[4, 4, 8]);
        assert!(m.encode_target(&img, &Tensor::zeros(&[8, 16, 1])).is_err());
    }

    #[test]
    fn fusion_is_order_sensitive() {
        let m = Model::<f64>::new(small(), 6).unwrap();
        let a = FeatureMap::new(rand_image(4, 4, 4, 7)).unwrap();
        let b = FeatureMap::new(rand_image(4, 4, 4, 8)).unwrap();
        assert_ne!(m.fuse(&a, &b).unwrap(), m.fuse(&b, &a).unwrap());
        let z = FeatureMap::new(Tensor::zeros(&[4, 4, 4])).unwrap();
        assert!(m.fuse(&z, &z).unwrap().tensor().data().iter().all(|&v| v == 0.0));
        let c = FeatureMap::new(Tensor::zeros(&[4, 5, 4])).unwrap();
        assert!(m.fuse(&a, &c).is_err());
    }

    #[test]
    fn output_is_probability_with_input_shape() {
        let m = Model::<f64>::new(small(), 9).unwrap();
        for (h, w) in [(16, 24), (32, 48), (12, 8)] {
            let (a, b, c) = (rand_image(h, w, 3, 1), rand_image(h, w, 3, 2), rand_image(h, w, 3, 3));
            let prev = rand_image(h, w, 1, 4);
            let inp = ObjectInputs {
                first_ref: RefInput::Image(&a),
                prev_ref: RefInput::Image(&b),
                target: &c,
                prev_prob: &prev,
            };
            let p = m.forward_single_object(&inp).unwrap();
            assert_eq!(p.shape(), &[h, w, 1]);
            assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
            assert_eq!(p, m.forward_single_object(&inp).unwrap());
            let swapped = ObjectInputs {
                first_ref: RefInput::Image(&b),
                prev_ref: RefInput::Image(&a),
                ..inp
            };
            assert_ne!(p, m.forward_single_object(&swapped).unwrap());
        }
    }

    #[test]
    fn cached_reference_features_change_nothing() {
        let m = Model::<f64>::new(small(), 10).unwrap();
        let (a, b, c) = (rand_image(16, 16, 3, 1), rand_image(16, 16, 3, 2), rand_image(16, 16, 3, 3));
        let prev = rand_image(16, 16, 1, 4);
        let fa = m.encode_reference(&a).unwrap().into_tensor();
        let direct = ObjectInputs { first_ref: RefInput::Image(&a), prev_ref: RefInput::Image(&b), target: &c, prev_prob: &prev };
        let cached = ObjectInputs { first_ref: RefInput::Features(&fa), ..direct };
        assert_eq!(m.forward_single_object(&direct).unwrap(), m.forward_single_object(&cached).unwrap());
    }

    #[test]
    fn single_encoder_shares_target_weights() {
        let cfg = ModelConfig { single_encoder: true, ..small() };
        let m = Model::<f64>::new(cfg, 11).unwrap();
        assert_eq!(m.params.ref_encoder, m.params.tar_encoder);
        assert!(m.store.id_of("ref_encoder.stage1.weight").is_none());
        let img = rand_image(8, 8, 3, 12);
        let via_ref = m.encode_reference(&img).unwrap();
        let (via_tar, _) = m.encode_target(&img, &Tensor::zeros(&[8, 8, 1])).unwrap();
        assert_eq!(via_ref, via_tar);
    }

    #[test]
    fn named_roundtrip_rebuilds_model() {
        for single in [false, true] {
            let cfg = ModelConfig { single_encoder: single, ..small() };
            let m = Model::<f64>::new(cfg.clone(), 12).unwrap();
            let back = Model::<f64>::from_named(&m.named_tensors(), false).unwrap();
            assert_eq!(back.config, cfg);
            assert_eq!(back.named_tensors(), m.named_tensors());
        }
    }

    #[test]
    fn generic_over_f32() {
        let m = Model::<f32>::new(small(), 13).unwrap();
        let img = rand_image(8, 8, 3, 14).cast::<f32>();
        let prev = Tensor::<f32>::zeros(&[8, 8, 1]);
        let inp = ObjectInputs { first_ref: RefInput::Image(&img), prev_ref: RefInput::Image(&img), target: &img, prev_prob: &prev };
        let p = m.forward_single_object(&inp).unwrap();
        assert!(p.all_finite());
        let m64 = Model::<f64>::new(small(), 13).unwrap();
        let img64 = img.cast::<f64>();
        let prev64 = Tensor::zeros(&[8, 8, 1]);
        let p64 = m64
            .forward_single_object(&ObjectInputs { first_ref: RefInput::Image(&img64), prev_ref: RefInput::Image(&img64), target: &img64, prev_prob: &prev64 })
            .unwrap();
        assert!(p.cast::<f64>().max_abs_diff(&p64) < 1e-4);
    }
}
