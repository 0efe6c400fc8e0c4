use ndarray::{Array2, Array3, ArrayView3, Axis};

use super::{ParamId, ParamStore};

/// 3×3 convolution with unit stride and zero "same" padding over
/// `[channels, time, freq]` maps, computed as an im2col matrix product.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2d {
    weight: ParamId,
    bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

const K: usize = 3;

/// Unfolded input kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvTrace {
    cols: Array2<f64>,
    time: usize,
    freq: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        weight_init: impl FnMut() -> f64,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), &[out_channels, in_channels * K * K], weight_init);
        let bias = store.add(format!("{name}.bias"), &[out_channels], || 0.0);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
        }
    }

    pub fn fan_in(in_channels: usize) -> usize {
        in_channels * K * K
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView3<'_, f64>) -> (Array3<f64>, ConvTrace) {
        let (cin, time, freq) = x.dim();
        assert_eq!(cin, self.in_channels, "conv input channels");
        let cols = im2col(x);
        let mut out = store.matrix(self.weight).dot(&cols);
        out += &store.vector(self.bias).insert_axis(Axis(1));
        let out = out
            .into_shape_with_order((self.out_channels, time, freq))
            .expect("conv output layout");
        (out, ConvTrace { cols, time, freq })
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(
        &self,
        store: &ParamStore,
        grad: &mut [f64],
        trace: &ConvTrace,
        dy: ArrayView3<'_, f64>,
    ) -> Array3<f64> {
        let dy = dy
            .to_shape((self.out_channels, trace.time * trace.freq))
            .expect("conv grad layout");
        {
            let mut gw = store.matrix_in(grad, self.weight);
            ndarray::linalg::general_mat_mul(1.0, &dy, &trace.cols.t(), 1.0, &mut gw);
        }
        {
            let mut gb = store.vector_in(grad, self.bias);
            gb += &dy.sum_axis(Axis(1));
        }
        let dcols = store.matrix(self.weight).t().dot(&dy);
        col2im(&dcols, self.in_channels, trace.time, trace.freq)
    }
}

/// Rows are `(channel, dt, df)`, columns `(t, f)`.
fn im2col(x: ArrayView3<'_, f64>) -> Array2<f64> {
    let (cin, time, freq) = x.dim();
    let mut cols = Array2::zeros((cin * K * K, time * freq));
    for c in 0..cin {
        for dt in 0..K {
            for df in 0..K {
                let mut row = cols.row_mut((c * K + dt) * K + df);
                let row = row.as_slice_mut().expect("contiguous row");
                for t in 0..time {
                    let src_t = t as isize + dt as isize - 1;
                    if src_t < 0 || src_t >= time as isize {
                        continue;
                    }
                    let src = x.slice(ndarray::s![c, src_t as usize, ..]);
                    let dst = &mut row[t * freq..(t + 1) * freq];
                    // dst[f] = src[f + df - 1]
                    let (lo, hi) = (1usize.saturating_sub(df), (freq + 1 - df).min(freq));
                    for f in lo..hi {
                        dst[f] = src[f + df - 1];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &Array2<f64>, cin: usize, time: usize, freq: usize) -> Array3<f64> {
    let mut dx = Array3::zeros((cin, time, freq));
    for c in 0..cin {
        for dt in 0..K {
            for df in 0..K {
                let row = dcols.row((c * K + dt) * K + df);
                for t in 0..time {
                    let src_t = t as isize + dt as isize - 1;
                    if src_t < 0 || src_t >= time as isize {
                        continue;
                    }
                    let mut dst = dx.slice_mut(ndarray::s![c, src_t as usize, ..]);
                    let (lo, hi) = (1usize.saturating_sub(df), (freq + 1 - df).min(freq));
                    for f in lo..hi {
                        dst[f + df - 1] += row[t * freq + f];
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{assert_close, central_difference};
    use crate::nn::uniform;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn naive(store: &ParamStore, conv: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (cin, time, freq) = x.dim();
        let w = store.matrix(conv.weight);
        let b = store.vector(conv.bias);
        Array3::from_shape_fn((conv.out_channels, time, freq), |(o, t, f)| {
            let mut acc = b[o];
            for c in 0..cin {
                for dt in 0..3 {
                    for df in 0..3 {
                        let (st, sf) = (t as isize + dt as isize - 1, f as isize + df as isize - 1);
                        if st >= 0 && sf >= 0 && (st as usize) < time && (sf as usize) < freq {
                            acc += w[[o, (c * 3 + dt) * 3 + df]] * x[[c, st as usize, sf as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    fn setup() -> (ParamStore, Conv2d, Array3<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, uniform(&mut rng, 0.5));
        store.data_mut().iter_mut().rev().take(3).enumerate().for_each(|(i, b)| *b = 0.1 * i as f64);
        let x = Array3::from_shape_fn((2, 5, 4), |(c, t, f)| ((c * 20 + t * 4 + f) as f64 * 0.71).cos());
        (store, conv, x)
    }

    #[test]
    fn matches_naive_convolution() {
        let (store, conv, x) = setup();
        let (y, _) = conv.forward(&store, x.view());
        let expected = naive(&store, &conv, &x);
        for (a, b) in y.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, conv, x) = setup();
        let probe = Array3::from_shape_fn((3, 5, 4), |(o, t, f)| ((o + 2 * t + 3 * f) as f64).sin());
        let loss = |s: &ParamStore, x: &Array3<f64>| (&conv.forward(s, x.view()).0 * &probe).sum();
        let (_, trace) = conv.forward(&store, x.view());
        let mut grad = store.zeros_like();
        let dx = conv.backward(&store, &mut grad, &trace, probe.view());
        for i in 0..store.len() {
            let num = central_difference(&mut store.data().to_vec(), i, 1e-3, |d| {
                loss(&ParamStore::from_parts(store.specs().to_vec(), d.to_vec()).unwrap(), &x)
            });
            assert_close(grad[i], num, 1e-6, "param");
        }
        let flat: Vec<f64> = x.iter().copied().collect();
        for i in 0..flat.len() {
            let num = central_difference(&mut flat.clone(), i, 1e-3, |d| {
                loss(&store, &Array3::from_shape_vec(x.dim(), d.to_vec()).unwrap())
            });
            assert_close(dx.as_slice().unwrap()[i], num, 1e-6, "input");
        }
    }
}
