//! Parameterized building blocks shared by the model components.

use crate::error::Result;
use crate::graph::{Graph, ParamId, ParamStore, Var};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A `k×k` convolution with bias whose weights live in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Registers `<name>.weight` (He-uniform) and `<name>.bias` (zeros).
    /// Stride 1 with same-padding.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        kernel: usize,
        cin: usize,
        cout: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let fan_in = (kernel * kernel * cin) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w = Tensor::from_fn(&[kernel, kernel, cin, cout], |_| T::lit(rng.range_f64(-bound, bound)));
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            kernel,
            cin,
            cout,
            stride: 1,
            pad: (kernel - 1) / 2,
        }
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    /// Graph-free evaluation.
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        crate::ops::conv2d(x, store.value(self.weight), store.value(self.bias), self.stride, self.pad)
    }
}
