//! Channel attention applied in series after pixel matching.
//!
//! For a flattened input `f_in: N×C'` the channel affinity is the Gram
//! matrix `A = f_inᵀ f_in`; a softmax over the first channel index makes
//! every column of `A′` sum to one, and the output is
//! `γ·(f_in A′) + f_in` with a learned `γ ≥ 0`. No convolution is used.

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::matching::FeatureMap;
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Raw value giving `γ = softplus(raw) ≈ 4.5e-5` at initialization.
pub const GAMMA_RAW_INIT: f64 = -10.0;

/// Holds the unconstrained parameter behind `γ = softplus(raw)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CmState {
    pub gamma_raw: ParamId,
}

impl CmState {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, name: &str) -> Self {
        Self {
            gamma_raw: store.add(format!("{name}.gamma_raw"), Tensor::scalar(T::lit(GAMMA_RAW_INIT))),
        }
    }

    pub fn gamma<T: Scalar>(&self, store: &ParamStore<T>) -> T {
        ops::softplus_scalar(store.value(self.gamma_raw).data()[0])
    }
}

/// `A′ = softmax_columns(f_inᵀ f_in)`.
pub fn channel_attention_map<T: Scalar>(f_in: &Tensor<T>) -> Result<Tensor<T>> {
    f_in.matrix_dims("channel_attention_map")?;
    ops::softmax_columns(&gram(f_in)?)
}

/// Unnormalized channel affinity `f_inᵀ f_in`.
pub fn gram<T: Scalar>(f_in: &Tensor<T>) -> Result<Tensor<T>> {
    ops::matmul_tn(f_in, f_in)
}

/// `f_A = f_in · A′`.
pub fn strengthen<T: Scalar>(f_in: &Tensor<T>, attn: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, c) = f_in.matrix_dims("strengthen")?;
    if attn.shape() != [c, c] {
        return Err(Error::shape("strengthen", f_in.shape(), attn.shape()));
    }
    ops::matmul(f_in, attn)
}

/// `γ·f_A + f_in` on an `H×W×C′` map.
pub fn cm_forward<T: Scalar>(f_in: &FeatureMap<T>, gamma: T) -> Result<FeatureMap<T>> {
    let (h, w) = (f_in.height(), f_in.width());
    let flat = f_in.flatten();
    let attn = channel_attention_map(&flat)?;
    let fa = strengthen(&flat, &attn)?;
    let out = Tensor::from_fn(flat.shape(), |k| gamma * fa.data()[k] + flat.data()[k]);
    FeatureMap::unflatten(out, h, w)
}

/// Recorded version of [`cm_forward`] with `γ` read from `state`.
pub fn cm_graph<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, state: &CmState, f_in: Var) -> Result<Var> {
    let (h, w, c) = g.value(f_in).hwc("cm")?;
    let flat = g.reshape(f_in, &[h * w, c])?;
    let ft = g.transpose(flat)?;
    let a = g.matmul(ft, flat)?;
    let a = g.softmax_columns(a)?;
    let fa = g.matmul(flat, a)?;
    let raw = g.param(store, state.gamma_raw);
    let gamma = g.softplus(raw);
    let scaled = g.mul(fa, gamma)?;
    let out = g.add(scaled, flat)?;
    g.reshape(out, &[h, w, c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn rand_tensor(shape: &[usize], r: &mut SeededRng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| r.range_f64(-1.0, 1.0))
    }

    #[test]
    fn orthonormal_columns_give_identity_affinity() {
        // 4×2 with orthonormal columns
        let s = 0.5f64;
        let f = Tensor::new(vec![4, 2], vec![s, s, s, -s, s, s, s, -s]).unwrap();
        let a = gram(&f).unwrap();
        assert!(a.max_abs_diff(&Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])) < 1e-15);
        let an = channel_attention_map(&f).unwrap();
        let e = std::f64::consts::E;
        let hi = e / (e + 1.0);
        assert!((an.at2(0, 0) - hi).abs() < 1e-12);
        assert!((an.at2(1, 0) - (1.0 - hi)).abs() < 1e-12);
    }

    #[test]
    fn constant_affinity_is_uniform() {
        let a = ops::softmax_columns(&Tensor::full(&[4, 4], 2.0f64)).unwrap();
        assert!(a.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        // rank-one input with equal columns has a constant Gram matrix
        let f = Tensor::from_fn(&[6, 4], |k| (k / 4) as f64 * 0.1);
        let an = channel_attention_map(&f).unwrap();
        assert!(an.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn attention_map_matches_loop_oracle() {
        let mut r = SeededRng::new(1);
        let f = rand_tensor(&[10, 4], &mut r);
        let an = channel_attention_map(&f).unwrap();
        for j in 0..4 {
            let col: Vec<f64> = (0..4)
                .map(|i| (0..10).map(|n| f.at2(n, i) * f.at2(n, j)).sum::<f64>())
                .collect();
            let z: f64 = col.iter().map(|v| v.exp()).sum();
            for i in 0..4 {
                assert!((an.at2(i, j) - col[i].exp() / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn strengthen_cases() {
        let mut r = SeededRng::new(2);
        let f = rand_tensor(&[8, 4], &mut r);
        let eye = Tensor::from_fn(&[4, 4], |k| if k / 4 == k % 4 { 1.0 } else { 0.0 });
        assert_eq!(strengthen(&f, &eye).unwrap(), f);
        let z = Tensor::zeros(&[8, 4]);
        let a = rand_tensor(&[4, 4], &mut r);
        assert!(strengthen(&z, &a).unwrap().data().iter().all(|&v| v == 0.0));
        let out = strengthen(&f, &a).unwrap();
        for n in 0..8 {
            for j in 0..4 {
                let want: f64 = (0..4).map(|i| f.at2(n, i) * a.at2(i, j)).sum();
                assert!((out.at2(n, j) - want).abs() < 1e-12);
            }
        }
        assert!(strengthen(&f, &Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn zero_gamma_is_exact_identity() {
        let mut r = SeededRng::new(3);
        let f = FeatureMap::new(rand_tensor(&[3, 4, 4], &mut r)).unwrap();
        assert_eq!(cm_forward(&f, 0.0).unwrap(), f);
        let z = FeatureMap::new(Tensor::zeros(&[3, 4, 4])).unwrap();
        assert_eq!(cm_forward(&z, 2.5).unwrap(), z);
    }

    #[test]
    fn unit_gamma_matches_composed_oracle() {
        let mut r = SeededRng::new(4);
        let t = rand_tensor(&[2, 5, 4], &mut r);
        let f = FeatureMap::new(t.clone()).unwrap();
        let out = cm_forward(&f, 1.0).unwrap();
        let flat = f.flatten();
        let an = channel_attention_map(&flat).unwrap();
        let fa = ops::matmul(&flat, &an).unwrap();
        let want = ops::add(&fa, &flat).unwrap().reshape(&[2, 5, 4]).unwrap();
        assert!(out.tensor().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn gamma_init_is_near_zero_and_nonnegative() {
        let mut store = ParamStore::<f64>::new();
        let s = CmState::register(&mut store, "cm");
        let g = s.gamma(&store);
        assert!(g > 0.0 && g < 1e-4);
        store.get_mut(s.gamma_raw).value = Tensor::scalar(-500.0);
        assert!(s.gamma(&store) >= 0.0);
    }

    #[test]
    fn graph_matches_pure() {
        let mut r = SeededRng::new(5);
        let mut store = ParamStore::<f64>::new();
        let s = CmState::register(&mut store, "cm");
        store.get_mut(s.gamma_raw).value = Tensor::scalar(0.3);
        let t = rand_tensor(&[3, 3, 4], &mut r);
        let pure = cm_forward(&FeatureMap::new(t.clone()).unwrap(), s.gamma(&store)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = cm_graph(&mut g, &store, &s, x).unwrap();
        assert!(g.value(y).max_abs_diff(pure.tensor()) < 1e-12);
    }
}
