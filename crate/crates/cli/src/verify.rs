//! Self-check suite: oracle equivalences, gradient checks and invariants.

use npmca::attention::{channel_attention_map, cm_forward};
use npmca::checkpoint;
use npmca::datagen::{generate_sequence, sample_triplet_indices, SceneConfig, SceneSpec};
use npmca::matching::{match_reduced, nlpmm_forward, normalize_similarity, similarity, FeatureMap, NlpmmParams};
use npmca::metrics::{contour_f, iou_loss, iou_loss_graph, region_j};
use npmca::model::{Model, ModelConfig, ObjectInputs, RefInput};
use npmca::ops;
use npmca::propagation::aggregate_multi_object;
use npmca::raster::LabelMask;
use npmca::{Graph, ParamStore, SeededRng, Tensor};

use crate::oracle;

/// One named check and its outcome.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub measured: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    /// Passes when `measured < threshold`; NaN fails.
    pub fn below(name: &'static str, measured: f64, threshold: f64) -> Self {
        Self { name, measured, threshold, passed: measured < threshold }
    }

    /// Passes when `measured >= threshold`.
    pub fn at_least(name: &'static str, measured: f64, threshold: f64) -> Self {
        Self { name, measured, threshold, passed: measured >= threshold }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<26} measured={:.3e} threshold={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.threshold
        )
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    /// Swap in a softmax without max subtraction.
    pub unstable_softmax: bool,
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.range_f64(lo, hi))
}

fn unstable_softmax(m: &Tensor) -> Tensor {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let e = m.map(f64::exp);
    Tensor::from_fn(m.shape(), |k| {
        let j = k % c;
        e.data()[k] / (0..r).map(|i| e.data()[i * c + j]).sum::<f64>()
    })
}

/// Largest deviation of a column sum from 1 (infinite if any entry is not finite).
pub fn column_sum_error(m: &Tensor) -> f64 {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    if !m.all_finite() {
        return f64::INFINITY;
    }
    (0..c)
        .map(|j| ((0..r).map(|i| m.data()[i * c + j]).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

pub fn matmul_oracle() -> Check {
    let mut rng = SeededRng::new(1);
    let (a, b) = (random(&[7, 3], -1.0, 1.0, &mut rng), random(&[3, 5], -1.0, 1.0, &mut rng));
    let c = ops::matmul(&a, &b).unwrap();
    let mut err: f64 = 0.0;
    for i in 0..7 {
        for j in 0..5 {
            let s: f64 = (0..3).map(|t| a.at2(i, t) * b.at2(t, j)).sum();
            err = err.max((s - c.at2(i, j)).abs());
        }
    }
    Check::below("matmul_oracle", err, 1e-12)
}

pub fn softmax_stochasticity(opts: VerifyOptions, trials: usize) -> Check {
    let mut rng = SeededRng::new(2);
    let mut err: f64 = 0.0;
    for _ in 0..trials {
        let m = random(&[6, 5], -800.0, 800.0, &mut rng);
        let s = if opts.unstable_softmax { unstable_softmax(&m) } else { ops::softmax_columns(&m).unwrap() };
        err = err.max(column_sum_error(&s));
    }
    Check::below("softmax_stochasticity", err, 1e-9)
}

pub fn conv_oracle() -> Check {
    let mut rng = SeededRng::new(3);
    let x = random(&[8, 8, 3], -1.0, 1.0, &mut rng);
    let w = random(&[3, 3, 3, 4], -1.0, 1.0, &mut rng);
    let b = random(&[4], -1.0, 1.0, &mut rng);
    let got = ops::conv2d(&x, &w, &b, 1, 1).unwrap();
    Check::below("conv2d_oracle", got.max_abs_diff(&oracle::conv(&x, &w, &b)), 1e-12)
}

pub fn resize_half_pixel() -> Check {
    let x: Tensor = Tensor::new(vec![1, 2, 1], vec![0.0, 1.0]).unwrap();
    let y = ops::bilinear_resize(&x, 1, 4).unwrap();
    let want: Tensor = Tensor::new(vec![1, 4, 1], vec![0.0, 0.25, 0.75, 1.0]).unwrap();
    let mut rng = SeededRng::new(4);
    let r = random(&[5, 7, 2], 0.0, 1.0, &mut rng);
    let err = y.max_abs_diff(&want).max(ops::bilinear_resize(&r, 9, 4).unwrap().max_abs_diff(&oracle::resize(&r, 9, 4)));
    Check::below("bilinear_resize_oracle", err, 1e-12)
}

/// Random reduction layers for `channels` inputs.
fn nlpmm_layers(channels: usize, seed: u64) -> (ParamStore, NlpmmParams) {
    let mut store = ParamStore::new();
    let mut rng = SeededRng::new(seed);
    let p = NlpmmParams::register(&mut store, "m", channels, &mut rng).unwrap();
    for t in store.iter_mut().filter(|t| t.name.ends_with("bias")) {
        for v in t.value.data_mut() {
            *v = rng.range_f64(-0.5, 0.5);
        }
    }
    (store, p)
}

pub fn nlpmm_oracle(trials: usize) -> Check {
    let mut rng = SeededRng::new(5);
    let mut err: f64 = 0.0;
    for k in 0..trials {
        let (store, p) = nlpmm_layers(8, k as u64);
        let f_ref = random(&[4, 5, 8], -1.0, 1.0, &mut rng);
        let f_tar = random(&[4, 5, 8], -1.0, 1.0, &mut rng);
        let got = nlpmm_forward(
            &FeatureMap::new(f_ref.clone()).unwrap(),
            &FeatureMap::new(f_tar.clone()).unwrap(),
            &p,
            &store,
        )
        .unwrap();
        let w = |c: &npmca::layers::Conv| (store.value(c.weight), store.value(c.bias));
        let want = oracle::nlpmm(&f_ref, &f_tar, w(&p.reduce_ref), w(&p.reduce_tar));
        err = err.max(got.tensor().max_abs_diff(&want));
    }
    Check::below("nlpmm_oracle", err, 1e-10)
}

pub fn cm_oracle(trials: usize) -> Check {
    let mut rng = SeededRng::new(6);
    let mut err: f64 = 0.0;
    for _ in 0..trials {
        let f = random(&[4, 5, 8], -1.0, 1.0, &mut rng);
        let gamma = rng.range_f64(0.0, 2.0);
        let got = cm_forward(&FeatureMap::new(f.clone()).unwrap(), gamma).unwrap();
        err = err.max(got.tensor().max_abs_diff(&oracle::cm(&f, gamma)));
        let id = cm_forward(&FeatureMap::new(f.clone()).unwrap(), 0.0).unwrap();
        // γ = 0 must be exactly the identity
        if id.tensor() != &f {
            err = f64::INFINITY;
        }
    }
    Check::below("cm_oracle", err, 1e-10)
}

pub fn similarity_stochasticity(trials: usize) -> Check {
    let mut rng = SeededRng::new(7);
    let mut err: f64 = 0.0;
    for _ in 0..trials {
        let scale = rng.range_f64(0.1, 10.0);
        let r = random(&[20, 4], -scale, scale, &mut rng);
        let t = random(&[20, 4], -scale, scale, &mut rng);
        let s = normalize_similarity(&similarity(&r, &t).unwrap()).unwrap();
        err = err.max(column_sum_error(&s.matrix));
    }
    Check::below("similarity_stochasticity", err, 1e-9)
}

pub fn attention_stochasticity(trials: usize) -> Check {
    let mut rng = SeededRng::new(8);
    let mut err: f64 = 0.0;
    for _ in 0..trials {
        let scale = rng.range_f64(0.1, 10.0);
        let f = random(&[20, 4], -scale, scale, &mut rng);
        err = err.max(column_sum_error(&channel_attention_map(&f).unwrap()));
    }
    Check::below("attention_stochasticity", err, 1e-9)
}

/// Largest violation of `min_i r[i][c] ≤ matched[j][c] ≤ max_i r[i][c]`.
pub fn convex_hull(trials: usize) -> Check {
    let mut rng = SeededRng::new(9);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let scale = rng.range_f64(0.1, 5.0);
        let r = random(&[12, 4], -scale, scale, &mut rng);
        let t = random(&[12, 4], -scale, scale, &mut rng);
        let m = match_reduced(&r, &t).unwrap();
        for c in 0..4 {
            let lo = (0..12).map(|i| r.at2(i, c)).fold(f64::INFINITY, f64::min);
            let hi = (0..12).map(|i| r.at2(i, c)).fold(f64::NEG_INFINITY, f64::max);
            for j in 0..12 {
                let v = m.at2(j, c);
                worst = worst.max(lo - v).max(v - hi);
            }
        }
    }
    Check::below("convex_hull_bound", worst, 1e-9)
}

fn audit_loss(model: &Model, inputs: &[Tensor; 5]) -> (f64, npmca::Gradients) {
    let [a, b, t, pp, gt] = inputs;
    let mut g = Graph::new();
    let p = model
        .forward_graph(
            &mut g,
            &ObjectInputs { first_ref: RefInput::Image(a), prev_ref: RefInput::Image(b), target: t, prev_prob: pp },
        )
        .unwrap();
    let y = g.constant(gt.clone());
    let l = iou_loss_graph(&mut g, p, y).unwrap();
    (g.value(l).data()[0], g.backward(l).unwrap())
}

/// Per parameter tensor, the relative error `‖a − n‖ / max(‖a‖, ‖n‖)`
/// between reverse-mode and central-difference gradients. Larger tensors
/// are sampled: the `per_tensor` entries with the largest reverse-mode
/// magnitude plus `per_tensor` random ones.
pub fn gradient_audit(model: &mut Model, h: usize, w: usize, per_tensor: usize, seed: u64) -> Vec<(String, f64)> {
    const STEP: f64 = 1e-6;
    let mut rng = SeededRng::new(seed);
    let inputs = [
        random(&[h, w, 3], 0.0, 1.0, &mut rng),
        random(&[h, w, 3], 0.0, 1.0, &mut rng),
        random(&[h, w, 3], 0.0, 1.0, &mut rng),
        random(&[h, w, 1], 0.0, 1.0, &mut rng),
        Tensor::from_fn(&[h, w, 1], |_| if rng.coin(0.4) { 1.0 } else { 0.0 }),
    ];
    let (_, grads) = audit_loss(model, &inputs);
    let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let n = model.store.value(id).len();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(model.store.value(id).shape()));
        let entries: Vec<usize> = if n <= 2 * per_tensor {
            (0..n).collect()
        } else {
            let mut by_size: Vec<usize> = (0..n).collect();
            by_size.sort_by(|&a, &b| analytic.data()[b].abs().total_cmp(&analytic.data()[a].abs()));
            by_size.truncate(per_tensor);
            by_size.extend((0..per_tensor).map(|_| rng.range_usize(0, n - 1)));
            by_size
        };
        let (mut diff, mut an2, mut fd2) = (0.0, 0.0, 0.0);
        for k in entries {
            let orig = model.store.value(id).data()[k];
            model.store.get_mut(id).value.data_mut()[k] = orig + STEP;
            let up = audit_loss(model, &inputs).0;
            model.store.get_mut(id).value.data_mut()[k] = orig - STEP;
            let down = audit_loss(model, &inputs).0;
            model.store.get_mut(id).value.data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * STEP);
            let an = analytic.data()[k];
            diff += (fd - an) * (fd - an);
            an2 += an * an;
            fd2 += fd * fd;
        }
        let denom = f64::max(an2, fd2).sqrt();
        let rel = if denom == 0.0 { 0.0 } else { diff.sqrt() / denom };
        out.push((model.store.get(id).name.clone(), rel));
    }
    out
}

/// Sets every `γ` to `softplus(0)` so the attention path carries gradient.
pub fn activate_attention(model: &mut Model) {
    for p in model.store.iter_mut().filter(|p| p.name.ends_with("gamma_raw")) {
        p.value = Tensor::scalar(0.0);
    }
}

pub fn gradient_check() -> Check {
    let cfg = ModelConfig { feature_channels: 16, stage_channels: [4, 8], ..ModelConfig::default() };
    let mut model = Model::new(cfg, 10).unwrap();
    activate_attention(&mut model);
    let worst = gradient_audit(&mut model, 16, 24, 4, 10).into_iter().map(|(_, e)| e).fold(0.0, f64::max);
    Check::below("model_gradient_check", worst, 1e-5)
}

/// Column sums of the aggregated distribution, plus labels and object
/// ordering checked against a brute-force odds argmax. Values are drawn on a
/// coarse grid so ties occur.
pub fn aggregation_distribution(trials: usize) -> Check {
    let mut rng = SeededRng::new(11);
    let mut err: f64 = 0.0;
    for k in 0..trials {
        let m = 1 + k % 3;
        let maps: Vec<Tensor> = (0..m)
            .map(|_| {
                Tensor::from_fn(&[3, 4, 1], |_| if rng.coin(0.3) { rng.range_usize(0, 10) as f64 / 10.0 } else { rng.uniform() })
            })
            .collect();
        let (stack, labels) = aggregate_multi_object(&maps).unwrap();
        for i in 0..12 {
            let total: f64 = stack.maps.iter().map(|p| p.data()[i]).sum();
            err = err.max((total - 1.0).abs());
            let clamp = |v: f64| v.clamp(1e-7, 1.0 - 1e-7);
            let p: Vec<f64> = maps.iter().map(|t| clamp(t.data()[i])).collect();
            let mut odds = vec![clamp(p.iter().map(|v| 1.0 - v).product()); m + 1];
            odds[1..].copy_from_slice(&p);
            let odds: Vec<f64> = odds.iter().map(|v| v / (1.0 - v)).collect();
            let mut best = 0;
            for j in 1..=m {
                if odds[j] > odds[best] {
                    best = j;
                }
            }
            if labels.labels()[i] as usize != best {
                err = f64::INFINITY;
            }
            for a in 0..m {
                for b in 0..m {
                    let (pa, pb) = (stack.maps[a + 1].data()[i], stack.maps[b + 1].data()[i]);
                    if p[a] > p[b] && pa <= pb {
                        err = f64::INFINITY;
                    }
                }
            }
        }
    }
    Check::below("aggregation_distribution", err, 1e-9)
}

pub fn aggregation_hand_case() -> Check {
    let p = |v: f64| Tensor::new(vec![1, 1, 1], vec![v]).unwrap();
    let (s, _) = aggregate_multi_object(&[p(0.2), p(0.8)]).unwrap();
    let want = [0.0429, 0.0563, 0.9008];
    let odds = [0.16 / 0.84, 0.25, 4.0];
    let total: f64 = odds.iter().sum();
    let mut err: f64 = 0.0;
    for j in 0..3 {
        err = err.max((s.maps[j].data()[0] - odds[j] / total).abs());
        if (s.maps[j].data()[0] - want[j]).abs() > 5e-5 {
            err = f64::INFINITY;
        }
    }
    Check::below("aggregation_hand_case", err, 1e-6)
}

/// Worst deviation from the expected J/F on identical, disjoint, empty and
/// half-overlap constructions.
pub fn metric_cases() -> Check {
    let square = |x0: usize, y0: usize, wd: usize, ht: usize| {
        let mut m = LabelMask::background(16, 16);
        for y in y0..y0 + ht {
            for x in x0..x0 + wd {
                m.set(x, y, 1);
            }
        }
        m
    };
    let a = square(2, 2, 6, 6);
    let empty = LabelMask::background(16, 16);
    let cases = [
        (region_j(&a, &a, 1).unwrap(), 1.0),
        (contour_f(&a, &a, 1).unwrap(), 1.0),
        (region_j(&square(10, 10, 4, 4), &a, 1).unwrap(), 0.0),
        (contour_f(&square(10, 10, 4, 4), &a, 1).unwrap(), 0.0),
        (region_j(&empty, &a, 1).unwrap(), 0.0),
        (contour_f(&empty, &a, 1).unwrap(), 0.0),
        (region_j(&square(2, 2, 6, 3), &a, 1).unwrap(), 0.5),
    ];
    let err = cases.iter().map(|(got, want)| (got - want).abs()).fold(0.0, f64::max);
    Check::below("metric_cases", err, 1e-15)
}

pub fn iou_loss_gradient() -> Check {
    let mut rng = SeededRng::new(12);
    let pred = random(&[8, 8, 1], 0.05, 0.95, &mut rng);
    let gt = Tensor::from_fn(&[8, 8, 1], |_| if rng.coin(0.5) { 1.0 } else { 0.0 });
    let mut store = ParamStore::new();
    let id = store.add("p", pred.clone());
    let mut g = Graph::new();
    let p = g.param(&store, id);
    let y = g.constant(gt.clone());
    let l = iou_loss_graph(&mut g, p, y).unwrap();
    let grad = g.backward(l).unwrap().get(id).unwrap().clone();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for k in 0..64 {
        let (mut a, mut b) = (pred.clone(), pred.clone());
        a.data_mut()[k] += h;
        b.data_mut()[k] -= h;
        let fd = (iou_loss(&a, &gt).unwrap() - iou_loss(&b, &gt).unwrap()) / (2.0 * h);
        let an = grad.data()[k];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    Check::below("iou_loss_gradient", worst, 1e-6)
}

/// Number of bits that differ after a save/load cycle (0 required).
pub fn checkpoint_roundtrip() -> Check {
    let cfg = ModelConfig { feature_channels: 8, stage_channels: [4, 4], ..ModelConfig::default() };
    let model = Model::<f64>::new(cfg, 13).unwrap();
    let named = model.named_tensors();
    let bytes = checkpoint::encode(&named);
    let back = checkpoint::decode::<f64>(&bytes).unwrap();
    let same = named.len() == back.len()
        && named.iter().zip(&back).all(|((na, a), (nb, b))| {
            na == nb && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
        && checkpoint::encode(&back) == bytes;
    Check::below("checkpoint_roundtrip", if same { 0.0 } else { 1.0 }, 0.5)
}

/// Fraction of sampled pixels whose label disagrees with the analytic shapes.
pub fn datagen_exactness() -> Check {
    let mut rng = SeededRng::new(14);
    let spec = SceneSpec { max_objects: 3, ..SceneSpec::default() };
    let (mut bad, mut total) = (0usize, 0usize);
    for i in 0..4 {
        let cfg = SceneConfig::random(&spec, &mut rng);
        let seq = generate_sequence(&cfg, i, "v").unwrap();
        for _ in 0..500 {
            let t = rng.range_usize(0, cfg.frames - 1);
            let (x, y) = (rng.range_usize(0, cfg.width - 1), rng.range_usize(0, cfg.height - 1));
            total += 1;
            bad += (seq.masks[t].get(x, y) != cfg.label_at(t, x, y)) as usize;
            let inside =
                cfg.objects.iter().any(|o| o.contains(t, cfg.width, cfg.height, x as f64 + 0.5, y as f64 + 0.5));
            bad += ((seq.masks[t].get(x, y) != 0) != inside) as usize;
        }
        let again = generate_sequence(&cfg, i, "v").unwrap();
        bad += (again != seq) as usize;
    }
    Check::below("datagen_exactness", bad as f64 / total as f64, 1e-12)
}

/// χ² statistic of the skip distribution (4 degrees of freedom, p = 0.001).
pub fn triplet_uniformity() -> Check {
    let mut rng = SeededRng::new(15);
    let mut counts = [0usize; 5];
    let draws = 100_000;
    for _ in 0..draws {
        let t = sample_triplet_indices(40, 5, &mut rng).unwrap();
        counts[t.target - t.prev - 1] += 1;
    }
    let e = draws as f64 / 5.0;
    let chi2 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    Check::below("triplet_skip_uniformity", chi2, 18.47)
}

pub fn run_all(opts: VerifyOptions) -> Vec<Check> {
    vec![
        matmul_oracle(),
        softmax_stochasticity(opts, 200),
        conv_oracle(),
        resize_half_pixel(),
        nlpmm_oracle(20),
        cm_oracle(20),
        similarity_stochasticity(200),
        attention_stochasticity(200),
        convex_hull(200),
        gradient_check(),
        aggregation_distribution(200),
        aggregation_hand_case(),
        metric_cases(),
        iou_loss_gradient(),
        checkpoint_roundtrip(),
        datagen_exactness(),
        triplet_uniformity(),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_suite_passes() {
        let checks = run_all(VerifyOptions::default());
        assert!(checks.len() >= 12);
        for c in &checks {
            assert!(c.passed, "{}", c.line());
        }
    }

    #[test]
    fn injected_softmax_fault_is_caught() {
        let c = softmax_stochasticity(VerifyOptions { unstable_softmax: true }, 20);
        assert!(!c.passed, "{}", c.line());
    }
}
