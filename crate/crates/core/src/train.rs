//! Adam training on iou_loss over sampled triplets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{sample_training_triplet, synth_pretrain_pair, AffineRanges, FramePair, VideoSequence};
use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, ParamStore};
use crate::metrics::iou_loss_graph;
use crate::model::{Model, ObjectInputs, RefInput};
use crate::propagation::mask_out_background;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f64> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// Applies one bias-corrected update to every trainable parameter from
    /// its accumulated gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        if self.m.is_empty() {
            self.m = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.step));
        let c2 = T::lit(1.0 - self.beta2.powi(self.step));
        let (lr, eps) = (T::lit(self.lr), T::lit(self.eps));
        for (k, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let g = p.grad.data();
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *x -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// Fake triplets from affine warps of single frames.
    Pretrain,
    /// Real triplets with random temporal skip.
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Iteration after which the learning rate is multiplied by `lr_decay_factor`.
    pub lr_decay_at: Option<usize>,
    pub lr_decay_factor: f64,
    pub max_skip: usize,
    pub seed: u64,
    pub affine: AffineRanges,
}

impl TrainConfig {
    pub fn new(stage: Stage) -> Self {
        Self {
            stage,
            iterations: 2000,
            batch_size: 4,
            lr: match stage {
                Stage::Pretrain => 1e-4,
                Stage::Finetune => 1e-5,
            },
            lr_decay_at: None,
            lr_decay_factor: 0.1,
            max_skip: 5,
            seed: 0,
            affine: AffineRanges::default(),
        }
    }
}

/// One object's training example: first, previous and target frame with masks.
pub struct Example {
    pub triplet: [FramePair; 3],
    pub object: u8,
}

/// Draws one example for `stage` from `data`.
pub fn sample_example(data: &[VideoSequence], cfg: &TrainConfig, rng: &mut SeededRng) -> Result<Example> {
    if data.is_empty() {
        return Err(Error::Argument("no training sequences".into()));
    }
    for _ in 0..100 {
        let seq = &data[rng.range_usize(0, data.len() - 1)];
        let triplet = match cfg.stage {
            Stage::Pretrain => {
                let t = rng.range_usize(0, seq.len() - 1);
                if seq.masks[t].num_objects() == 0 {
                    continue;
                }
                synth_pretrain_pair(&seq.frames[t], &seq.masks[t], &cfg.affine, rng.next_u64())?
            }
            Stage::Finetune => sample_training_triplet(seq, cfg.max_skip, rng)?.1,
        };
        let present: Vec<u8> = (1..=triplet[0].1.num_objects()).filter(|&o| triplet[0].1.count(o) > 0).collect();
        if present.is_empty() {
            continue;
        }
        let object = present[rng.range_usize(0, present.len() - 1)];
        return Ok(Example { triplet, object });
    }
    Err(Error::Argument("could not draw an example with a visible object".into()))
}

/// Loss and parameter gradients of one example.
pub fn example_gradients<T: Scalar>(model: &Model<T>, ex: &Example) -> Result<(f64, Gradients<T>)> {
    let [(f0, m0), (fp, mp), (ft, mt)] = &ex.triplet;
    let first = mask_out_background(f0, m0, ex.object)?.cast::<T>();
    let prev = mask_out_background(fp, mp, ex.object)?.cast::<T>();
    let target = ft.cast::<T>();
    let prev_prob = mp.indicator(ex.object).cast::<T>();
    let gt = mt.indicator(ex.object).cast::<T>();
    let mut g = Graph::new();
    let p = model.forward_graph(
        &mut g,
        &ObjectInputs {
            first_ref: RefInput::Image(&first),
            prev_ref: RefInput::Image(&prev),
            target: &target,
            prev_prob: &prev_prob,
        },
    )?;
    let y = g.constant(gt);
    let loss = iou_loss_graph(&mut g, p, y)?;
    let value = g.value(loss).data()[0].to_f64_lossy();
    Ok((value, g.backward(loss)?))
}

/// Runs `cfg.iterations` Adam steps, calling `on_step(iteration, mean batch
/// loss)` after each (iterations count from 1). A non-finite loss aborts with
/// a numeric error naming the iteration.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &[VideoSequence],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if cfg.batch_size == 0 {
        return Err(Error::Argument("batch size must be ≥ 1".into()));
    }
    if cfg.stage == Stage::Finetune && data.iter().any(|s| s.len() < 3 || s.masks.len() != s.len()) {
        return Err(Error::Argument("finetuning needs fully annotated sequences of ≥ 3 frames".into()));
    }
    let mut adam = Adam::new(cfg.lr);
    let mut history = Vec::with_capacity(cfg.iterations);
    let weight = T::lit(1.0 / cfg.batch_size as f64);
    for it in 1..=cfg.iterations {
        if cfg.lr_decay_at.is_some_and(|at| it > at) {
            adam.lr = cfg.lr * cfg.lr_decay_factor;
        }
        let examples: Vec<Example> = (0..cfg.batch_size)
            .map(|b| {
                let mut rng = SeededRng::derive(cfg.seed, (it * cfg.batch_size + b) as u64);
                sample_example(data, cfg, &mut rng)
            })
            .collect::<Result<_>>()?;
        let model_ref = &*model;
        let results: Vec<(f64, Gradients<T>)> = examples
            .par_iter()
            .map(|ex| example_gradients(model_ref, ex))
            .collect::<Result<_>>()
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("{msg} at iteration {it}")),
                other => other,
            })?;
        let loss = results.iter().map(|r| r.0).sum::<f64>() / cfg.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at iteration {it}")));
        }
        model.store.zero_grad();
        for (_, g) in &results {
            model.store.accumulate(g, weight);
        }
        adam.step(&mut model.store);
        history.push(loss);
        on_step(it, loss);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_sequence, SceneConfig, SceneSpec};
    use crate::model::ModelConfig;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![2], vec![1.0f64, -1.0]).unwrap());
        store.get_mut(id).grad = Tensor::new(vec![2], vec![3.0, -0.5]).unwrap();
        let mut adam = Adam::new(0.1);
        adam.step(&mut store);
        let v = store.value(id).data();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![3], vec![2.0f64, -3.0, 0.5]).unwrap());
        let mut adam = Adam::new(0.05);
        for _ in 0..2000 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let sq = g.mul(x, x).unwrap();
            let l = g.sum(sq);
            store.zero_grad();
            g.backward_into(l, &mut store).unwrap();
            adam.step(&mut store);
        }
        assert!(store.value(id).data().iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn frozen_parameters_stay_put() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::new(vec![1], vec![1.0f64]).unwrap());
        store.get_mut(id).trainable = false;
        store.get_mut(id).grad = Tensor::new(vec![1], vec![1.0]).unwrap();
        Adam::new(0.1).step(&mut store);
        assert_eq!(store.value(id).data(), &[1.0]);
    }

    fn tiny_data() -> Vec<VideoSequence> {
        let spec = SceneSpec { width: 24, height: 16, frames: 4, max_objects: 2, occlusion_heavy: false };
        let mut rng = SeededRng::new(1);
        (0..3)
            .map(|i| generate_sequence(&SceneConfig::random(&spec, &mut rng), i, format!("s{i}")).unwrap())
            .collect()
    }

    fn tiny_model() -> Model<f64> {
        Model::new(ModelConfig { feature_channels: 8, stage_channels: [4, 4], ..ModelConfig::default() }, 1).unwrap()
    }

    #[test]
    fn training_is_reproducible_and_reduces_loss() {
        let data = tiny_data();
        let cfg = TrainConfig { iterations: 60, lr: 3e-3, ..TrainConfig::new(Stage::Finetune) };
        let mut a = tiny_model();
        let ha = train(&mut a, &data, &cfg, |_, _| {}).unwrap();
        let mut b = tiny_model();
        let hb = train(&mut b, &data, &cfg, |_, _| {}).unwrap();
        assert_eq!(ha, hb);
        let head: f64 = ha[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = ha[50..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "{head} → {tail}");
    }

    #[test]
    fn pretraining_runs_on_static_frames() {
        let data = tiny_data();
        let cfg = TrainConfig { iterations: 3, ..TrainConfig::new(Stage::Pretrain) };
        let mut m = tiny_model();
        let mut seen = Vec::new();
        train(&mut m, &data, &cfg, |it, l| seen.push((it, l))).unwrap();
        assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn short_sequences_cannot_finetune() {
        let mut data = tiny_data();
        data[0].frames.truncate(2);
        data[0].masks.truncate(2);
        let cfg = TrainConfig { iterations: 1, ..TrainConfig::new(Stage::Finetune) };
        assert!(train(&mut tiny_model(), &data, &cfg, |_, _| {}).is_err());
    }

    #[test]
    fn decay_to_zero_freezes_weights() {
        let data = tiny_data();
        let cfg = TrainConfig {
            iterations: 2,
            lr: 1e-2,
            lr_decay_at: Some(1),
            lr_decay_factor: 0.0,
            ..TrainConfig::new(Stage::Finetune)
        };
        let mut once = tiny_model();
        train(&mut once, &data, &TrainConfig { iterations: 1, ..cfg.clone() }, |_, _| {}).unwrap();
        let mut twice = tiny_model();
        train(&mut twice, &data, &cfg, |_, _| {}).unwrap();
        assert_eq!(once.named_tensors(), twice.named_tensors());
        assert_ne!(once.named_tensors(), tiny_model().named_tensors());
    }
}
