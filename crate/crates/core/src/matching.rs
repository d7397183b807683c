//! Non-local pixel matching between a reference and a target feature map.
//!
//! Both maps are first reduced from `C` to `C/4` channels by separate 3×3
//! convolutions. With the reduced maps flattened to `N×C/4` (`N = H·W`),
//! the similarity `S = f_ref · f_tarᵀ` relates reference pixel `i` (row) to
//! target pixel `j` (column). A softmax over each column turns `S` into a
//! column-stochastic `S′`, and `f_refᵀ · S′` gives every target position a
//! convex combination of reference features.

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::layers::Conv;
use crate::ops;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// An `H×W×C` grid of channel vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T: Scalar = f64> {
    tensor: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        tensor.hwc("FeatureMap")?;
        Ok(Self { tensor })
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    /// Row-major `N×C` view, `N = H·W`.
    pub fn flatten(&self) -> Tensor<T> {
        let n = self.height() * self.width();
        self.tensor.clone().reshape(&[n, self.channels()]).expect("flatten")
    }

    /// Rebuilds an `H×W×C` map from a flattened `N×C` matrix.
    pub fn unflatten(flat: Tensor<T>, height: usize, width: usize) -> Result<Self> {
        let (n, c) = flat.matrix_dims("unflatten")?;
        if n != height * width {
            return Err(Error::shape("unflatten", flat.shape(), &[height, width, c]));
        }
        Self::new(flat.reshape(&[height, width, c])?)
    }
}

/// `N×N` similarity between reference rows and target columns.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap<T: Scalar = f64> {
    pub matrix: Tensor<T>,
    pub normalized: bool,
}

/// The two channel-reduction convolutions, one per input branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NlpmmParams {
    pub reduce_ref: Conv,
    pub reduce_tar: Conv,
}

impl NlpmmParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if !channels.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "matching needs a channel count divisible by 4, got {channels}"
            )));
        }
        Ok(Self {
            reduce_ref: Conv::register(store, &format!("{name}.reduce_ref"), 3, channels, channels / 4, rng),
            reduce_tar: Conv::register(store, &format!("{name}.reduce_tar"), 3, channels, channels / 4, rng),
        })
    }
}

/// 3×3 same-padded reduction from `C` to `C/4` channels.
pub fn reduce_channels<T: Scalar>(
    f: &FeatureMap<T>,
    conv: &Conv,
    store: &ParamStore<T>,
) -> Result<FeatureMap<T>> {
    let c = f.channels();
    if !c.is_multiple_of(4) {
        return Err(Error::Config(format!("cannot reduce {c} channels to C/4")));
    }
    if conv.cin != c || conv.cout != c / 4 {
        return Err(Error::Config(format!(
            "reduction maps {}→{} channels but input has {c}",
            conv.cin, conv.cout
        )));
    }
    FeatureMap::new(conv.forward(store, f.tensor())?)
}

/// `S = f_ref · f_tarᵀ`.
pub fn similarity<T: Scalar>(f_ref_flat: &Tensor<T>, f_tar_flat: &Tensor<T>) -> Result<SimilarityMap<T>> {
    let (nr, cr) = f_ref_flat.matrix_dims("similarity")?;
    let (nt, ct) = f_tar_flat.matrix_dims("similarity")?;
    if nr != nt || cr != ct {
        return Err(Error::shape("similarity", f_ref_flat.shape(), f_tar_flat.shape()));
    }
    Ok(SimilarityMap {
        matrix: ops::matmul_nt(f_ref_flat, f_tar_flat)?,
        normalized: false,
    })
}

/// Softmax over the reference index of every target column.
pub fn normalize_similarity<T: Scalar>(s: &SimilarityMap<T>) -> Result<SimilarityMap<T>> {
    if s.normalized {
        return Err(Error::Argument("similarity map is already normalized".into()));
    }
    Ok(SimilarityMap {
        matrix: ops::softmax_columns(&s.matrix)?,
        normalized: true,
    })
}

/// `f_matched = f_refᵀ · S′`, a `C/4×N` matrix.
pub fn match_features<T: Scalar>(f_ref_flat: &Tensor<T>, s_norm: &SimilarityMap<T>) -> Result<Tensor<T>> {
    if !s_norm.normalized {
        return Err(Error::Argument("matching requires a normalized similarity map".into()));
    }
    ops::matmul_tn(f_ref_flat, &s_norm.matrix)
}

/// Reduce, compare, normalize and match; output is `H×W×C/4`.
pub fn nlpmm_forward<T: Scalar>(
    f_ref: &FeatureMap<T>,
    f_tar: &FeatureMap<T>,
    params: &NlpmmParams,
    store: &ParamStore<T>,
) -> Result<FeatureMap<T>> {
    if f_ref.tensor().shape() != f_tar.tensor().shape() {
        return Err(Error::shape("nlpmm", f_ref.tensor().shape(), f_tar.tensor().shape()));
    }
    let (h, w) = (f_ref.height(), f_ref.width());
    let r = reduce_channels(f_ref, &params.reduce_ref, store)?.flatten();
    let t = reduce_channels(f_tar, &params.reduce_tar, store)?.flatten();
    let s = normalize_similarity(&similarity(&r, &t)?)?;
    let matched = match_features(&r, &s)?;
    FeatureMap::unflatten(ops::transpose(&matched)?, h, w)
}

/// Matching on already-reduced, flattened features (`N×C/4` each).
pub fn match_reduced<T: Scalar>(r_flat: &Tensor<T>, t_flat: &Tensor<T>) -> Result<Tensor<T>> {
    let s = normalize_similarity(&similarity(r_flat, t_flat)?)?;
    ops::transpose(&match_features(r_flat, &s)?)
}

/// Recorded version of [`nlpmm_forward`] for training.
pub fn nlpmm_graph<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &NlpmmParams,
    f_ref: Var,
    f_tar: Var,
) -> Result<Var> {
    let shape = g.value(f_ref).shape().to_vec();
    if shape != g.value(f_tar).shape() {
        return Err(Error::shape("nlpmm", &shape, g.value(f_tar).shape()));
    }
    let (h, w, c) = g.value(f_ref).hwc("nlpmm")?;
    if c % 4 != 0 {
        return Err(Error::Config(format!("cannot reduce {c} channels to C/4")));
    }
    let n = h * w;
    let r = params.reduce_ref.apply(g, store, f_ref)?;
    let t = params.reduce_tar.apply(g, store, f_tar)?;
    let q = c / 4;
    let r = g.reshape(r, &[n, q])?;
    let t = g.reshape(t, &[n, q])?;
    let tt = g.transpose(t)?;
    let s = g.matmul(r, tt)?;
    let s = g.softmax_columns(s)?;
    let rt = g.transpose(r)?;
    let m = g.matmul(rt, s)?;
    let m = g.transpose(m)?;
    g.reshape(m, &[h, w, q])
}

/// Per-pixel L2 norm of a matched map, the "energy" visualization.
pub fn matched_energy<T: Scalar>(f: &FeatureMap<T>) -> Tensor<T> {
    let (h, w, c) = (f.height(), f.width(), f.channels());
    let d = f.tensor().data();
    Tensor::from_fn(&[h, w, 1], |p| {
        d[p * c..(p + 1) * c].iter().map(|&v| v * v).sum::<T>().sqrt()
    })
}
