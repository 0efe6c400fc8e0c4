use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::{glorot, sigmoid, uniform, ParamId, ParamStore};

/// Single-direction GRU with gate order (reset, update, new):
///
/// ```text
/// r = σ(W_ir x + b_ir + W_hr h + b_hr)
/// z = σ(W_iz x + b_iz + W_hz h + b_hz)
/// n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gru {
    w_ih: ParamId,
    w_hh: ParamId,
    b_ih: ParamId,
    b_hh: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

/// Per-step activations of one direction.
#[derive(Debug, Clone)]
pub struct GruTrace {
    /// Rows are time steps: reset, update and candidate gates.
    r: Array2<f64>,
    z: Array2<f64>,
    n: Array2<f64>,
    /// `W_hn h_{t-1} + b_hn`.
    hn: Array2<f64>,
    /// `h_{t-1}` for each step (row 0 is the zero initial state).
    h_prev: Array2<f64>,
}

impl Gru {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let g = 3 * hidden;
        let w_ih = store.add(format!("{name}.w_ih"), &[g, input_dim], glorot(rng, input_dim, hidden));
        let bound = 1.0 / (hidden as f64).sqrt();
        let w_hh = store.add(format!("{name}.w_hh"), &[g, hidden], uniform(rng, bound));
        let b_ih = store.add(format!("{name}.b_ih"), &[g], || 0.0);
        let b_hh = store.add(format!("{name}.b_hh"), &[g], || 0.0);
        Self {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            input_dim,
            hidden,
        }
    }

    /// Runs over `x` (`[steps, input_dim]`) and returns all hidden states.
    pub fn forward(&self, store: &ParamStore, x: ArrayView2<'_, f64>) -> (Array2<f64>, GruTrace) {
        let steps = x.nrows();
        let h_dim = self.hidden;
        let mut xi = x.dot(&store.matrix(self.w_ih).t());
        xi += &store.vector(self.b_ih);
        let w_hh = store.matrix(self.w_hh);
        let b_hh = store.vector(self.b_hh);

        let mut out = Array2::zeros((steps, h_dim));
        let mut trace = GruTrace {
            r: Array2::zeros((steps, h_dim)),
            z: Array2::zeros((steps, h_dim)),
            n: Array2::zeros((steps, h_dim)),
            hn: Array2::zeros((steps, h_dim)),
            h_prev: Array2::zeros((steps, h_dim)),
        };
        let mut h = Array1::<f64>::zeros(h_dim);
        for t in 0..steps {
            let hh = w_hh.dot(&h) + &b_hh;
            let xt = xi.row(t);
            trace.h_prev.row_mut(t).assign(&h);
            for j in 0..h_dim {
                let r = sigmoid(xt[j] + hh[j]);
                let z = sigmoid(xt[h_dim + j] + hh[h_dim + j]);
                let hn = hh[2 * h_dim + j];
                let n = (xt[2 * h_dim + j] + r * hn).tanh();
                trace.r[[t, j]] = r;
                trace.z[[t, j]] = z;
                trace.n[[t, j]] = n;
                trace.hn[[t, j]] = hn;
                h[j] = (1.0 - z) * n + z * h[j];
            }
            out.row_mut(t).assign(&h);
        }
        (out, trace)
    }

    /// Backpropagation through time given `dL/dh_t` for every step.
    pub fn backward(
        &self,
        store: &ParamStore,
        grad: &mut [f64],
        x: ArrayView2<'_, f64>,
        trace: &GruTrace,
        dh_out: ArrayView2<'_, f64>,
    ) -> Array2<f64> {
        let steps = x.nrows();
        let h_dim = self.hidden;
        let w_hh = store.matrix(self.w_hh);
        let mut dxi = Array2::<f64>::zeros((steps, 3 * h_dim));
        let mut dhh_all = Array2::<f64>::zeros((steps, 3 * h_dim));
        let mut dh_next = Array1::<f64>::zeros(h_dim);

        for t in (0..steps).rev() {
            let dh = &dh_out.row(t) + &dh_next;
            let mut dhh = dhh_all.row_mut(t);
            let mut dx_t = dxi.row_mut(t);
            let mut dh_prev = Array1::<f64>::zeros(h_dim);
            for j in 0..h_dim {
                let (r, z, n, hn) = (trace.r[[t, j]], trace.z[[t, j]], trace.n[[t, j]], trace.hn[[t, j]]);
                let hp = trace.h_prev[[t, j]];
                let dn_pre = dh[j] * (1.0 - z) * (1.0 - n * n);
                let dz_pre = dh[j] * (hp - n) * z * (1.0 - z);
                let dr_pre = dn_pre * hn * r * (1.0 - r);
                dx_t[j] = dr_pre;
                dx_t[h_dim + j] = dz_pre;
                dx_t[2 * h_dim + j] = dn_pre;
                dhh[j] = dr_pre;
                dhh[h_dim + j] = dz_pre;
                dhh[2 * h_dim + j] = dn_pre * r;
                dh_prev[j] = dh[j] * z;
            }
            dh_prev += &w_hh.t().dot(&dhh);
            dh_next = dh_prev;
        }

        {
            let mut g = store.matrix_in(grad, self.w_hh);
            ndarray::linalg::general_mat_mul(1.0, &dhh_all.t(), &trace.h_prev, 1.0, &mut g);
        }
        {
            let mut g = store.vector_in(grad, self.b_hh);
            g += &dhh_all.sum_axis(Axis(0));
        }
        {
            let mut g = store.matrix_in(grad, self.w_ih);
            ndarray::linalg::general_mat_mul(1.0, &dxi.t(), &x, 1.0, &mut g);
        }
        {
            let mut g = store.vector_in(grad, self.b_ih);
            g += &dxi.sum_axis(Axis(0));
        }
        dxi.dot(&store.matrix(self.w_ih))
    }
}

/// Forward and time-reversed GRUs with concatenated outputs `[steps, 2·hidden]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiGru {
    pub forward_dir: Gru,
    pub backward_dir: Gru,
}

#[derive(Debug, Clone)]
pub struct BiGruTrace {
    fwd: GruTrace,
    bwd: GruTrace,
}

fn reversed(x: ArrayView2<'_, f64>) -> Array2<f64> {
    x.slice(s![..;-1, ..]).to_owned()
}

impl BiGru {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input_dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            forward_dir: Gru::new(store, &format!("{name}.fwd"), input_dim, hidden, rng),
            backward_dir: Gru::new(store, &format!("{name}.bwd"), input_dim, hidden, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.forward_dir.hidden + self.backward_dir.hidden
    }

    pub fn forward(&self, store: &ParamStore, x: ArrayView2<'_, f64>) -> (Array2<f64>, BiGruTrace) {
        let (hf, fwd) = self.forward_dir.forward(store, x);
        let xr = reversed(x);
        let (hb, bwd) = self.backward_dir.forward(store, xr.view());
        let hb = reversed(hb.view());
        let out = ndarray::concatenate(Axis(1), &[hf.view(), hb.view()]).expect("same steps");
        (out, BiGruTrace { fwd, bwd })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        grad: &mut [f64],
        x: ArrayView2<'_, f64>,
        trace: &BiGruTrace,
        dy: ArrayView2<'_, f64>,
    ) -> Array2<f64> {
        let h = self.forward_dir.hidden;
        let mut dx = self
            .forward_dir
            .backward(store, grad, x, &trace.fwd, dy.slice(s![.., ..h]));
        let xr = reversed(x);
        let dyr = reversed(dy.slice(s![.., h..]));
        let dxr = self
            .backward_dir
            .backward(store, grad, xr.view(), &trace.bwd, dyr.view());
        dx += &reversed(dxr.view());
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{assert_close, central_difference};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bigru_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let gru = BiGru::new(&mut store, "g", 3, 2, &mut rng);
        for v in store.data_mut() {
            *v += 0.05;
        }
        let x = Array2::from_shape_fn((4, 3), |(t, d)| ((t * 3 + d) as f64 * 0.9).sin());
        let probe = Array2::from_shape_fn((4, 4), |(t, d)| ((t + 5 * d) as f64 * 0.3).cos());
        let loss = |s: &ParamStore, x: ArrayView2<'_, f64>| (&gru.forward(s, x).0 * &probe).sum();

        let (_, trace) = gru.forward(&store, x.view());
        let mut grad = store.zeros_like();
        let dx = gru.backward(&store, &mut grad, x.view(), &trace, probe.view());
        for i in 0..store.len() {
            let num = central_difference(&mut store.data().to_vec(), i, 1e-4, |d| {
                loss(&ParamStore::from_parts(store.specs().to_vec(), d.to_vec()).unwrap(), x.view())
            });
            assert_close(grad[i], num, 1e-6, &store.specs().iter().find(|s| s.range().contains(&i)).unwrap().name);
        }
        let flat: Vec<f64> = x.iter().copied().collect();
        for i in 0..flat.len() {
            let num = central_difference(&mut flat.clone(), i, 1e-4, |d| {
                loss(&store, ArrayView2::from_shape((4, 3), d).unwrap())
            });
            assert_close(dx.as_slice().unwrap()[i], num, 1e-6, "input");
        }
    }

    #[test]
    fn backward_direction_sees_future() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let gru = BiGru::new(&mut store, "g", 1, 2, &mut rng);
        let a = ndarray::array![[0.0], [0.0], [1.0]];
        let b = ndarray::array![[0.0], [0.0], [-1.0]];
        let (ya, _) = gru.forward(&store, a.view());
        let (yb, _) = gru.forward(&store, b.view());
        // forward half of step 0 cannot see step 2, backward half can
        assert_eq!(ya.slice(s![0, ..2]), yb.slice(s![0, ..2]));
        assert_ne!(ya.slice(s![0, 2..]), yb.slice(s![0, 2..]));
    }
}
