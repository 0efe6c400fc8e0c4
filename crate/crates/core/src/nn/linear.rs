use ndarray::{Array2, ArrayView2, Axis};

use super::{ParamId, ParamStore};

/// Fully connected layer `y = x·Wᵀ + b` applied row-wise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        weight_init: impl FnMut() -> f64,
        bias_init: f64,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), &[out_dim, in_dim], weight_init);
        let bias = store.add(format!("{name}.bias"), &[out_dim], || bias_init);
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&store.matrix(self.weight).t());
        y += &store.vector(self.bias);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(
        &self,
        store: &ParamStore,
        grad: &mut [f64],
        x: ArrayView2<'_, f64>,
        dy: ArrayView2<'_, f64>,
    ) -> Array2<f64> {
        {
            let mut gw = store.matrix_in(grad, self.weight);
            ndarray::linalg::general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut gw);
        }
        {
            let mut gb = store.vector_in(grad, self.bias);
            gb += &dy.sum_axis(Axis(0));
        }
        dy.dot(&store.matrix(self.weight))
    }
}
