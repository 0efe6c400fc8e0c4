//! Priority conditioning: two independent perceptrons map the scaled triage
//! vector to per-channel FiLM shift (`mu`) and scale (`sigma`) vectors.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView3, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{glorot, leaky_relu, leaky_relu_grad, Linear, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionerConfig {
    /// Number of classes N.
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// Must equal the backbone's CNN channel count.
    pub output_dim: usize,
    pub leaky_slope: f64,
}

impl ConditionerConfig {
    pub fn new(n_classes: usize) -> Self {
        Self {
            input_dim: n_classes,
            hidden_dims: vec![64, 256, 128],
            output_dim: 64,
            leaky_slope: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("conditioner layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Per-channel modulation `x ↦ x·sigma[c] + mu[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilmParams {
    pub mu: Array1<f64>,
    pub sigma: Array1<f64>,
}

impl FilmParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            mu: Array1::zeros(channels),
            sigma: Array1::ones(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }
}

/// Gradient of a loss with respect to [`FilmParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct FilmGrad {
    pub mu: Array1<f64>,
    pub sigma: Array1<f64>,
}

impl FilmGrad {
    pub fn zeros(channels: usize) -> Self {
        Self {
            mu: Array1::zeros(channels),
            sigma: Array1::zeros(channels),
        }
    }

    pub fn accumulate(&mut self, other: &FilmGrad) {
        self.mu += &other.mu;
        self.sigma += &other.sigma;
    }

    pub fn scale(&mut self, factor: f64) {
        self.mu *= factor;
        self.sigma *= factor;
    }
}

/// Applies FiLM to a `[channels, i, j]` feature map.
pub fn apply_film(feature_map: ArrayView3<'_, f64>, film: &FilmParams) -> Result<Array3<f64>> {
    let channels = feature_map.dim().0;
    if channels != film.channels() || film.sigma.len() != film.channels() {
        return Err(Error::shape("apply_film", format!("{} channels", film.channels()), channels));
    }
    let mut out = feature_map.to_owned();
    film_in_place(&mut out, film);
    Ok(out)
}

pub(crate) fn film_in_place(map: &mut Array3<f64>, film: &FilmParams) {
    for ((mut channel, &s), &m) in map.outer_iter_mut().zip(&film.sigma).zip(&film.mu) {
        channel.mapv_inplace(|v| v * s + m);
    }
}

/// FiLM backward: given the pre-modulation input and the output gradient,
/// accumulates `dL/dmu`, `dL/dsigma` and returns `dL/dinput`.
pub(crate) fn film_backward(
    input: &Array3<f64>,
    dy: &Array3<f64>,
    film: &FilmParams,
    acc: &mut FilmGrad,
) -> Array3<f64> {
    for (c, (x, g)) in input.outer_iter().zip(dy.outer_iter()).enumerate() {
        acc.mu[c] += g.sum();
        acc.sigma[c] += Zip::from(&x).and(&g).fold(0.0, |s, a, b| s + a * b);
    }
    let mut dx = dy.clone();
    for (mut channel, &s) in dx.outer_iter_mut().zip(&film.sigma) {
        channel *= s;
    }
    dx
}

#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<Linear>,
    slope: f64,
}

/// Inputs to every layer plus the final output.
#[derive(Debug, Clone)]
struct MlpTrace {
    activations: Vec<Array2<f64>>,
}

impl Mlp {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, config: &ConditionerConfig, output_bias: f64, rng: &mut R) -> Self {
        let mut dims = vec![config.input_dim];
        dims.extend(&config.hidden_dims);
        dims.push(config.output_dim);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let bias = if i == last { output_bias } else { 0.0 };
                Linear::new(store, &format!("{name}.{i}"), d[0], d[1], glorot(rng, d[0], d[1]), bias)
            })
            .collect();
        Self {
            layers,
            slope: config.leaky_slope,
        }
    }

    fn forward(&self, store: &ParamStore, x: Array2<f64>) -> (Array2<f64>, MlpTrace) {
        let mut activations = vec![x];
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(store, activations[i].view());
            if i + 1 < self.layers.len() {
                y.mapv_inplace(|v| leaky_relu(v, self.slope));
            }
            activations.push(y);
        }
        let out = activations.pop().expect("at least one layer");
        (out, MlpTrace { activations })
    }

    fn backward(&self, store: &ParamStore, grad: &mut [f64], trace: &MlpTrace, dy: Array2<f64>) -> Array2<f64> {
        let mut d = dy;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            d = layer.backward(store, grad, trace.activations[i].view(), d.view());
            if i > 0 {
                // activations[i] is the output of leaky layer i-1
                Zip::from(&mut d)
                    .and(&trace.activations[i])
                    .for_each(|g, &y| *g *= leaky_relu_grad(y, self.slope));
            }
        }
        d
    }
}

/// The two perceptrons producing FiLM parameters.
#[derive(Debug, Clone)]
pub struct Conditioner {
    config: ConditionerConfig,
    params: ParamStore,
    mu_mlp: Mlp,
    sigma_mlp: Mlp,
}

/// Activations needed to backpropagate through [`Conditioner::condition_traced`].
#[derive(Debug, Clone)]
pub struct ConditionerTrace {
    mu: MlpTrace,
    sigma: MlpTrace,
}

impl Conditioner {
    /// Glorot-initialized weights; the sigma head's output bias starts at one
    /// so a fresh model begins near identity modulation.
    pub fn new<R: Rng>(config: ConditionerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mu_mlp = Mlp::new(&mut params, "mu", &config, 0.0, rng);
        let sigma_mlp = Mlp::new(&mut params, "sigma", &config, 1.0, rng);
        Ok(Self {
            config,
            params,
            mu_mlp,
            sigma_mlp,
        })
    }

    /// Rebuilds a conditioner around previously trained parameters.
    pub fn from_params(config: ConditionerConfig, params: ParamStore) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut fresh = Self::new(config, &mut rng)?;
        if fresh.params.specs() != params.specs() {
            return Err(Error::CheckpointCorrupt("conditioner parameter layout does not match its config".into()));
        }
        fresh.params = params;
        Ok(fresh)
    }

    pub fn config(&self) -> &ConditionerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn condition(&self, scaled_lambda: &[f64]) -> Result<FilmParams> {
        self.condition_traced(scaled_lambda).map(|(f, _)| f)
    }

    pub fn condition_traced(&self, scaled_lambda: &[f64]) -> Result<(FilmParams, ConditionerTrace)> {
        if scaled_lambda.len() != self.config.input_dim {
            return Err(Error::shape("condition", self.config.input_dim, scaled_lambda.len()));
        }
        let x = ArrayView1::from(scaled_lambda).insert_axis(Axis(0)).to_owned();
        let (mu, mu_trace) = self.mu_mlp.forward(&self.params, x.clone());
        let (sigma, sigma_trace) = self.sigma_mlp.forward(&self.params, x);
        Ok((
            FilmParams {
                mu: mu.row(0).to_owned(),
                sigma: sigma.row(0).to_owned(),
            },
            ConditionerTrace {
                mu: mu_trace,
                sigma: sigma_trace,
            },
        ))
    }

    /// Accumulates parameter gradients into `grad` (same layout as
    /// [`Self::params`]) and returns the gradient with respect to the input.
    pub fn backward(&self, grad: &mut [f64], trace: &ConditionerTrace, dfilm: &FilmGrad) -> Array1<f64> {
        let dmu = dfilm.mu.clone().insert_axis(Axis(0));
        let dsigma = dfilm.sigma.clone().insert_axis(Axis(0));
        let a = self.mu_mlp.backward(&self.params, grad, &trace.mu, dmu);
        let b = self.sigma_mlp.backward(&self.params, grad, &trace.sigma, dsigma);
        (a + b).row(0).to_owned()
    }
}

/// Evaluates both perceptrons for a scaled priority vector.
pub fn condition(scaled_lambda: &[f64], conditioner: &Conditioner) -> Result<FilmParams> {
    conditioner.condition(scaled_lambda)
}
