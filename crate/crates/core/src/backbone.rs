//! Convolutional-recurrent detector: FiLM-modulated CNN blocks with time-only
//! max pooling, a bidirectional GRU and two fully connected layers emitting
//! per-frame, per-class logits.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{film_backward, film_in_place, FilmGrad, FilmParams};
use crate::dataio::FeatureGrid;
use crate::error::{Error, Result};
use crate::nn::{
    glorot, leaky_relu, leaky_relu_grad, sigmoid, BiGru, BiGruTrace, Conv2d, ConvTrace, Linear, ParamStore,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub n_mels: usize,
    pub n_classes: usize,
    /// Output channels of each 3×3 convolution block.
    pub cnn_channels: Vec<usize>,
    /// Max-pooling factor along time after each block (frequency is not pooled).
    pub time_pooling: Vec<usize>,
    /// Hidden units per GRU direction.
    pub gru_units: usize,
    pub fc_units: usize,
    pub leaky_slope: f64,
}

impl BackboneConfig {
    pub fn new(n_mels: usize, n_classes: usize) -> Self {
        Self {
            n_mels,
            n_classes,
            cnn_channels: vec![64, 64, 64],
            time_pooling: vec![8, 2, 2],
            gru_units: 64,
            fc_units: 32,
            leaky_slope: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cnn_channels.is_empty() || self.cnn_channels.len() != self.time_pooling.len() {
            return Err(Error::Config("need one pooling factor per CNN block".into()));
        }
        if self.cnn_channels.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::Config(
                "all CNN blocks share one FiLM vector, so their channel counts must match".into(),
            ));
        }
        let dims = [self.n_mels, self.n_classes, self.gru_units, self.fc_units, self.cnn_channels[0]];
        if dims.contains(&0) || self.time_pooling.contains(&0) {
            return Err(Error::Config("backbone widths and pooling factors must be positive".into()));
        }
        Ok(())
    }

    pub fn film_channels(&self) -> usize {
        self.cnn_channels[0]
    }

    /// Overall time reduction between feature frames and output steps.
    pub fn time_reduction(&self) -> usize {
        self.time_pooling.iter().product()
    }

    pub fn output_frames(&self, n_frames: usize) -> usize {
        self.time_pooling.iter().fold(n_frames, |t, &p| t.div_ceil(p))
    }
}

/// Logits and sigmoid probabilities laid out `[classes, output steps]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid {
    pub logits: Array2<f64>,
    pub probabilities: Array2<f64>,
    pub frame_hop_out: f64,
}

impl PosteriorGrid {
    pub fn from_logits(logits: Array2<f64>, frame_hop_out: f64) -> Self {
        let probabilities = logits.mapv(sigmoid);
        Self {
            logits,
            probabilities,
            frame_hop_out,
        }
    }
}

#[derive(Debug, Clone)]
struct BlockTrace {
    conv: ConvTrace,
    /// Post-activation, pre-FiLM map.
    activated: Array3<f64>,
    /// Source time index of every pooled value.
    argmax: Array3<usize>,
    in_frames: usize,
}

/// Intermediate values of one clip's forward pass.
#[derive(Debug, Clone)]
pub struct BackboneTrace {
    blocks: Vec<BlockTrace>,
    seq: Array2<f64>,
    gru: BiGruTrace,
    gru_out: Array2<f64>,
    hidden: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    params: ParamStore,
    convs: Vec<Conv2d>,
    gru: BiGru,
    fc: Linear,
    out: Linear,
}

fn max_pool_time(x: &Array3<f64>, factor: usize) -> (Array3<f64>, Array3<usize>) {
    let (c, t, f) = x.dim();
    let t_out = t.div_ceil(factor);
    let mut out = Array3::zeros((c, t_out, f));
    let mut arg = Array3::zeros((c, t_out, f));
    for ch in 0..c {
        for to in 0..t_out {
            let lo = to * factor;
            let hi = (lo + factor).min(t);
            for fr in 0..f {
                let mut best = lo;
                for ti in lo + 1..hi {
                    if x[[ch, ti, fr]] > x[[ch, best, fr]] {
                        best = ti;
                    }
                }
                out[[ch, to, fr]] = x[[ch, best, fr]];
                arg[[ch, to, fr]] = best;
            }
        }
    }
    (out, arg)
}

fn max_pool_time_backward(dy: &Array3<f64>, argmax: &Array3<usize>, in_frames: usize) -> Array3<f64> {
    let (c, t_out, f) = dy.dim();
    let mut dx = Array3::zeros((c, in_frames, f));
    for ch in 0..c {
        for to in 0..t_out {
            for fr in 0..f {
                dx[[ch, argmax[[ch, to, fr]], fr]] += dy[[ch, to, fr]];
            }
        }
    }
    dx
}

impl Backbone {
    pub fn new<R: Rng>(config: BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut convs = Vec::with_capacity(config.cnn_channels.len());
        let mut cin = 1;
        for (i, &cout) in config.cnn_channels.iter().enumerate() {
            let init = glorot(rng, Conv2d::fan_in(cin), Conv2d::fan_in(cout));
            convs.push(Conv2d::new(&mut params, &format!("conv{i}"), cin, cout, init));
            cin = cout;
        }
        let seq_dim = cin * config.n_mels;
        let gru = BiGru::new(&mut params, "bigru", seq_dim, config.gru_units, rng);
        let fc = Linear::new(
            &mut params,
            "fc",
            gru.output_dim(),
            config.fc_units,
            glorot(rng, gru.output_dim(), config.fc_units),
            0.0,
        );
        let out = Linear::new(
            &mut params,
            "out",
            config.fc_units,
            config.n_classes,
            glorot(rng, config.fc_units, config.n_classes),
            0.0,
        );
        Ok(Self {
            config,
            params,
            convs,
            gru,
            fc,
            out,
        })
    }

    pub fn from_params(config: BackboneConfig, params: ParamStore) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut fresh = Self::new(config, &mut rng)?;
        if fresh.params.specs() != params.specs() {
            return Err(Error::CheckpointCorrupt("backbone parameter layout does not match its config".into()));
        }
        fresh.params = params;
        Ok(fresh)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Posteriors for one clip. `film = None` skips modulation entirely.
    pub fn forward(&self, features: &FeatureGrid, film: Option<&FilmParams>) -> Result<PosteriorGrid> {
        let (logits, _) = self.forward_traced(features.values.view(), film)?;
        let hop = features.frame_hop * self.config.time_reduction() as f64;
        Ok(PosteriorGrid::from_logits(logits, hop))
    }

    /// Logits `[classes, output steps]` for features `[frames, mels]`, with
    /// the activations needed by [`Self::backward`].
    pub fn forward_traced(
        &self,
        features: ArrayView2<'_, f64>,
        film: Option<&FilmParams>,
    ) -> Result<(Array2<f64>, BackboneTrace)> {
        let (n_frames, n_mels) = features.dim();
        if n_mels != self.config.n_mels {
            return Err(Error::shape("backbone input mel bands", self.config.n_mels, n_mels));
        }
        if n_frames == 0 {
            return Err(Error::shape("backbone input frames", "at least 1", 0));
        }
        if let Some(f) = film {
            if f.channels() != self.config.film_channels() || f.sigma.len() != f.channels() {
                return Err(Error::shape("FiLM channels", self.config.film_channels(), f.channels()));
            }
        }
        let slope = self.config.leaky_slope;
        let mut x = features.insert_axis(Axis(0)).to_owned();
        let mut blocks = Vec::with_capacity(self.convs.len());
        for (conv, &pool) in self.convs.iter().zip(&self.config.time_pooling) {
            let in_frames = x.dim().1;
            let (mut y, conv_trace) = conv.forward(&self.params, x.view());
            y.mapv_inplace(|v| leaky_relu(v, slope));
            let activated = y.clone();
            if let Some(f) = film {
                film_in_place(&mut y, f);
            }
            let (pooled, argmax) = max_pool_time(&y, pool);
            blocks.push(BlockTrace {
                conv: conv_trace,
                activated,
                argmax,
                in_frames,
            });
            x = pooled;
        }

        let (c, t_out, f) = x.dim();
        let seq = x
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((t_out, c * f))
            .expect("flatten per step");
        let (gru_out, gru_trace) = self.gru.forward(&self.params, seq.view());
        let mut hidden = self.fc.forward(&self.params, gru_out.view());
        hidden.mapv_inplace(|v| leaky_relu(v, slope));
        let logits = self.out.forward(&self.params, hidden.view());
        Ok((
            logits.reversed_axes().as_standard_layout().into_owned(),
            BackboneTrace {
                blocks,
                seq,
                gru: gru_trace,
                gru_out,
                hidden,
            },
        ))
    }

    /// Accumulates parameter gradients for `dL/dlogits` (`[classes, steps]`)
    /// into `grad`. Returns the FiLM gradient when `film` was applied.
    pub fn backward(
        &self,
        grad: &mut [f64],
        trace: &BackboneTrace,
        dlogits: ArrayView2<'_, f64>,
        film: Option<&FilmParams>,
    ) -> Option<FilmGrad> {
        let slope = self.config.leaky_slope;
        let dlogits = dlogits.t();
        let mut dh = self.out.backward(&self.params, grad, trace.hidden.view(), dlogits);
        ndarray::Zip::from(&mut dh)
            .and(&trace.hidden)
            .for_each(|g, &y| *g *= leaky_relu_grad(y, slope));
        let dgru = self.fc.backward(&self.params, grad, trace.gru_out.view(), dh.view());
        let dseq = self.gru.backward(&self.params, grad, trace.seq.view(), &trace.gru, dgru.view());

        let channels = self.config.film_channels();
        let t_out = dseq.nrows();
        let mut dx = dseq
            .into_shape_with_order((t_out, channels, self.config.n_mels))
            .expect("unflatten")
            .permuted_axes([1, 0, 2])
            .as_standard_layout()
            .into_owned();

        let mut film_grad = film.map(|f| FilmGrad::zeros(f.channels()));
        for (conv, block) in self.convs.iter().zip(&trace.blocks).rev() {
            let mut d = max_pool_time_backward(&dx, &block.argmax, block.in_frames);
            if let (Some(f), Some(acc)) = (film, film_grad.as_mut()) {
                d = film_backward(&block.activated, &d, f, acc);
            }
            ndarray::Zip::from(&mut d)
                .and(&block.activated)
                .for_each(|g, &y| *g *= leaky_relu_grad(y, slope));
            dx = conv.backward(&self.params, grad, &block.conv, d.view());
        }
        film_grad
    }
}
