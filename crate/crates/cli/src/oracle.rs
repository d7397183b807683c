//! Direct-loop reference implementations used by `verify` and the tests.
//! Every function recomputes its result from indices alone, without the
//! library's matrix kernels.

use npmca::{Model, Tensor};

fn at(x: &Tensor, y: usize, xx: usize, c: usize) -> f64 {
    let s = x.shape();
    x.data()[(y * s[1] + xx) * s[2] + c]
}

/// Same-size cross-correlation with zero padding, stride 1.
pub fn conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, cout) = (w.shape()[0], w.shape()[3]);
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; h * wd * cout];
    for oy in 0..h {
        for ox in 0..wd {
            for co in 0..cout {
                let mut s = b.data()[co];
                for ky in 0..k {
                    for kx in 0..k {
                        let (iy, ix) = (oy as isize + ky as isize - pad as isize, ox as isize + kx as isize - pad as isize);
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            s += at(x, iy as usize, ix as usize, ci) * w.data()[((ky * k + kx) * cin + ci) * cout + co];
                        }
                    }
                }
                out[(oy * wd + ox) * cout + co] = s;
            }
        }
    }
    Tensor::new(vec![h, wd, cout], out).unwrap()
}

/// Bilinear resampling, half-pixel centres, clamped.
pub fn resize(x: &Tensor, h2: usize, w2: usize) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let src = |i: usize, n: usize, n2: usize| {
        let p = ((i as f64 + 0.5) * n as f64 / n2 as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = p.floor() as usize;
        (lo, (lo + 1).min(n - 1), p - lo as f64)
    };
    let mut out = Vec::with_capacity(h2 * w2 * c);
    for oy in 0..h2 {
        let (y0, y1, fy) = src(oy, h, h2);
        for ox in 0..w2 {
            let (x0, x1, fx) = src(ox, w, w2);
            for ch in 0..c {
                let top = at(x, y0, x0, ch) * (1.0 - fx) + at(x, y0, x1, ch) * fx;
                let bot = at(x, y1, x0, ch) * (1.0 - fx) + at(x, y1, x1, ch) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![h2, w2, c], out).unwrap()
}

pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    let (h, w, ca, cb) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
    let mut out = Vec::with_capacity(h * w * (ca + cb));
    for p in 0..h * w {
        out.extend_from_slice(&a.data()[p * ca..(p + 1) * ca]);
        out.extend_from_slice(&b.data()[p * cb..(p + 1) * cb]);
    }
    Tensor::new(vec![h, w, ca + cb], out).unwrap()
}

fn relu(x: Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Softmax of every column of an `r×c` row-major table, over the rows.
fn column_softmax(m: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for j in 0..c {
        let max = (0..r).map(|i| m[i * c + j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..r).map(|i| (m[i * c + j] - max).exp()).sum();
        for i in 0..r {
            out[i * c + j] = (m[i * c + j] - max).exp() / z;
        }
    }
    out
}

/// Column-normalized similarity `S′` (`N×N`, reference rows) of reduced maps.
pub fn normalized_similarity(r: &Tensor, t: &Tensor) -> Vec<f64> {
    let (h, w, q) = (r.shape()[0], r.shape()[1], r.shape()[2]);
    let n = h * w;
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = (0..q).map(|c| r.data()[i * q + c] * t.data()[j * q + c]).sum();
        }
    }
    column_softmax(&s, n, n)
}

/// Matching on reduced maps: every target pixel becomes the `S′`-weighted
/// average of the reference pixels.
pub fn match_reduced(r: &Tensor, t: &Tensor) -> Tensor {
    let (h, w, q) = (r.shape()[0], r.shape()[1], r.shape()[2]);
    let n = h * w;
    let s = normalized_similarity(r, t);
    let mut out = vec![0.0; n * q];
    for j in 0..n {
        for c in 0..q {
            out[j * q + c] = (0..n).map(|i| r.data()[i * q + c] * s[i * n + j]).sum();
        }
    }
    Tensor::new(vec![h, w, q], out).unwrap()
}

/// Full matching module from raw features and the two reduction convs.
pub fn nlpmm(f_ref: &Tensor, f_tar: &Tensor, w_ref: (&Tensor, &Tensor), w_tar: (&Tensor, &Tensor)) -> Tensor {
    match_reduced(&conv(f_ref, w_ref.0, w_ref.1), &conv(f_tar, w_tar.0, w_tar.1))
}

/// Channel attention map `A′` (`Q×Q`, normalized over the first index).
pub fn attention_map(f: &Tensor) -> Vec<f64> {
    let q = f.shape()[2];
    let n = f.len() / q;
    let mut a = vec![0.0; q * q];
    for k in 0..q {
        for l in 0..q {
            a[k * q + l] = (0..n).map(|p| f.data()[p * q + k] * f.data()[p * q + l]).sum();
        }
    }
    column_softmax(&a, q, q)
}

/// `γ · f A′ + f`.
pub fn cm(f: &Tensor, gamma: f64) -> Tensor {
    let q = f.shape()[2];
    let n = f.len() / q;
    let a = attention_map(f);
    let mut out = vec![0.0; n * q];
    for p in 0..n {
        for l in 0..q {
            let fa: f64 = (0..q).map(|k| f.data()[p * q + k] * a[k * q + l]).sum();
            out[p * q + l] = gamma * fa + f.data()[p * q + l];
        }
    }
    Tensor::new(f.shape().to_vec(), out).unwrap()
}

fn param<'a>(model: &'a Model, name: &str) -> &'a Tensor {
    model.store.value(model.store.id_of(name).unwrap_or_else(|| panic!("no parameter {name}")))
}

fn conv_named(model: &Model, name: &str, x: &Tensor) -> Tensor {
    conv(x, param(model, &format!("{name}.weight")), param(model, &format!("{name}.bias")))
}

fn encoder(model: &Model, name: &str, x: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let s1 = resize(&relu(conv_named(model, &format!("{name}.stage1"), x)), h / 2, w / 2);
    let s2 = resize(&relu(conv_named(model, &format!("{name}.stage2"), &s1)), h / 4, w / 4);
    let f = relu(conv_named(model, &format!("{name}.stage3"), &s2));
    (f, s1, s2)
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() }
}

/// Monolithic single-object forward pass rebuilt from the named parameters.
pub fn model_forward(model: &Model, first: &Tensor, prev: &Tensor, target: &Tensor, prev_prob: &Tensor) -> Tensor {
    let (h, w) = (target.shape()[0], target.shape()[1]);
    let single = model.config.single_encoder;
    let ref_name = if single { "tar_encoder" } else { "ref_encoder" };
    let ref_input = |img: &Tensor| if single { concat(img, &Tensor::zeros(&[h, w, 1])) } else { img.clone() };
    let f_first = encoder(model, ref_name, &ref_input(first)).0;
    let f_prev = encoder(model, ref_name, &ref_input(prev)).0;
    let (f_tar, s1, s2) = encoder(model, "tar_encoder", &concat(target, prev_prob));
    let branch = |f_ref: &Tensor, name: &str| {
        let m = nlpmm(
            f_ref,
            &f_tar,
            (param(model, &format!("{name}.reduce_ref.weight")), param(model, &format!("{name}.reduce_ref.bias"))),
            (param(model, &format!("{name}.reduce_tar.weight")), param(model, &format!("{name}.reduce_tar.bias"))),
        );
        if model.config.disable_cm {
            m
        } else {
            let cm_name = name.replace("nlpmm", "cm");
            cm(&m, softplus(param(model, &format!("{cm_name}.gamma_raw")).data()[0]))
        }
    };
    let fused = conv_named(model, "fusion", &concat(&branch(&f_first, "nlpmm_first"), &branch(&f_prev, "nlpmm_prev")));
    let x = relu(conv_named(model, "decoder.refine1", &concat(&fused, &s2)));
    let x = resize(&x, h / 2, w / 2);
    let x = relu(conv_named(model, "decoder.refine2", &concat(&x, &s1)));
    let logits = resize(&conv_named(model, "decoder.head", &x), h, w);
    logits.map(|v| 1.0 / (1.0 + (-v).exp()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use npmca::model::{ModelConfig, ObjectInputs, RefInput};
    use npmca::SeededRng;

    fn image(h: usize, w: usize, c: usize, rng: &mut SeededRng) -> Tensor {
        Tensor::from_fn(&[h, w, c], |_| rng.uniform())
    }

    #[test]
    fn monolithic_forward_matches_library() {
        let mut rng = SeededRng::new(12);
        for cfg in [
            ModelConfig { feature_channels: 16, stage_channels: [8, 8], ..ModelConfig::default() },
            ModelConfig { feature_channels: 16, stage_channels: [8, 8], disable_cm: true, single_encoder: true },
        ] {
            let mut model = Model::new(cfg, 4).unwrap();
            for p in model.store.iter_mut().filter(|p| p.name.ends_with("gamma_raw")) {
                p.value = Tensor::scalar(0.3);
            }
            let (a, b, t) = (image(32, 48, 3, &mut rng), image(32, 48, 3, &mut rng), image(32, 48, 3, &mut rng));
            let pp = image(32, 48, 1, &mut rng);
            let lib = model
                .forward_single_object(&ObjectInputs {
                    first_ref: RefInput::Image(&a),
                    prev_ref: RefInput::Image(&b),
                    target: &t,
                    prev_prob: &pp,
                })
                .unwrap();
            let oracle = model_forward(&model, &a, &b, &t, &pp);
            assert!(lib.max_abs_diff(&oracle) < 1e-9);
        }
    }
}
