//! Minimal layer toolkit with explicit backward passes over a flat parameter
//! buffer. Every layer reads its weights from a [`ParamStore`] and accumulates
//! gradients into a buffer with the same layout.

mod adam;
mod conv;
mod gru;
mod linear;

pub use adam::{Adam, AdamConfig};
pub use conv::{Conv2d, ConvTrace};
pub use gru::{BiGru, BiGruTrace, Gru};
pub use linear::Linear;

use std::ops::Range;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Ix2};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Name, shape and location of one tensor inside a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// All trainable values of a network in one contiguous buffer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], mut init: impl FnMut() -> f64) -> ParamId {
        let spec = ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.data.len(),
        };
        self.data.extend((0..spec.len()).map(|_| init()));
        self.specs.push(spec);
        ParamId(self.specs.len() - 1)
    }

    pub fn from_parts(specs: Vec<ParamSpec>, data: Vec<f64>) -> Option<Self> {
        let mut offset = 0;
        for s in &specs {
            if s.offset != offset {
                return None;
            }
            offset += s.len();
        }
        (offset == data.len()).then_some(Self { specs, data })
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn spec(&self, id: ParamId) -> &ParamSpec {
        &self.specs[id.0]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    pub fn vector<'a>(&'a self, id: ParamId) -> ArrayView1<'a, f64> {
        view1(&self.data, self.spec(id))
    }

    pub fn matrix<'a>(&'a self, id: ParamId) -> ArrayView2<'a, f64> {
        view2(&self.data, self.spec(id))
    }

    pub(crate) fn vector_in<'a>(&self, buf: &'a mut [f64], id: ParamId) -> ArrayViewMut1<'a, f64> {
        let spec = self.spec(id);
        ArrayViewMut1::from_shape(spec.len(), &mut buf[spec.range()]).expect("vector layout")
    }

    pub(crate) fn matrix_in<'a>(&self, buf: &'a mut [f64], id: ParamId) -> ArrayViewMut2<'a, f64> {
        let spec = self.spec(id);
        let (r, c) = matrix_dims(spec);
        ArrayViewMut2::from_shape((r, c), &mut buf[spec.range()]).expect("matrix layout")
    }
}

fn matrix_dims(spec: &ParamSpec) -> (usize, usize) {
    let rows = spec.shape[0];
    (rows, spec.len() / rows.max(1))
}

fn view1<'a>(data: &'a [f64], spec: &ParamSpec) -> ArrayView1<'a, f64> {
    ArrayView1::from_shape(spec.len(), &data[spec.range()]).expect("vector layout")
}

fn view2<'a>(data: &'a [f64], spec: &ParamSpec) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape(matrix_dims(spec), &data[spec.range()])
        .expect("matrix layout")
        .into_dimensionality::<Ix2>()
        .expect("2-d")
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Derivative of [`leaky_relu`] expressed through its output.
pub fn leaky_relu_grad(y: f64, slope: f64) -> f64 {
    if y > 0.0 {
        1.0
    } else {
        slope
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Glorot-uniform sampler for a layer with the given fan-in and fan-out.
pub fn glorot<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> impl FnMut() -> f64 + '_ {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    move || rng.random_range(-bound..bound)
}

pub fn uniform<R: Rng>(rng: &mut R, bound: f64) -> impl FnMut() -> f64 + '_ {
    move || rng.random_range(-bound..bound)
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_scalar_functions() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert_eq!(leaky_relu(-2.0, 0.1), -0.2);
        assert_eq!(leaky_relu_grad(3.0, 0.1), 1.0);
    }

    #[test]
    fn store_layout_round_trip() {
        let mut store = ParamStore::new();
        let mut k = 0.0;
        let a = store.add("a", &[2, 3], || {
            k += 1.0;
            k
        });
        let b = store.add("b", &[4], || 0.5);
        assert_eq!(store.len(), 10);
        assert_eq!(store.matrix(a)[[1, 0]], 4.0);
        assert_eq!(store.vector(b).sum(), 2.0);
        let rebuilt = ParamStore::from_parts(store.specs().to_vec(), store.data().to_vec()).unwrap();
        assert_eq!(rebuilt, store);
        assert!(ParamStore::from_parts(store.specs().to_vec(), vec![0.0; 3]).is_none());
    }
}
