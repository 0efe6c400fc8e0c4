//! Single-run training over Dirichlet-sampled priority vectors.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    pool_labels, rasterize, ClipAnnotation, DatasetClip, EventInstance, EventRoll, FeatureConfig, FeatureExtractor,
    FeatureGrid, FeatureNormalizer,
};
use crate::error::{Error, Result};
use crate::inference::{binarize, predict};
use crate::conditioning::{FilmGrad, FilmParams};
use crate::losses::{loss_with_grad, LossKind};
use crate::metrics::frame_f1;
use crate::model::{ModelConfig, TriageModel};
use crate::nn::{Adam, AdamConfig};
use crate::triage::{scale_for_conditioning, DirichletConfig, DirichletSampler, TriageSampler, TriageWeights};

/// Random streams derived from [`TrainConfig::seed`].
const INIT_STREAM: u64 = 0;
const TRIAGE_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub loss: LossKind,
    /// Concentration of the symmetric Dirichlet over priority vectors.
    pub dirichlet_alpha: f64,
    pub seed: u64,
    /// Train a plain detector with the conditioner bypassed.
    pub identity_film: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 100,
            learning_rate: 1e-3,
            loss: LossKind::SetA,
            dirichlet_alpha: 0.1,
            seed: 0,
            identity_film: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(self.dirichlet_alpha.is_finite() && self.dirichlet_alpha > 0.0) {
            return Err(Error::Config(format!("dirichlet alpha {} must be positive", self.dirichlet_alpha)));
        }
        Ok(())
    }
}

/// Features and frame-level labels of one annotated clip.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClip {
    pub clip_id: String,
    pub features: FeatureGrid,
    /// Reference activity on the feature frame grid.
    pub roll: EventRoll,
    pub events: Vec<EventInstance>,
}

impl LabeledClip {
    pub fn new(annotation: &ClipAnnotation, features: FeatureGrid, n_classes: usize) -> Result<Self> {
        annotation.validate(n_classes)?;
        let roll = rasterize(annotation, features.n_frames(), features.frame_hop, n_classes)?;
        Ok(Self {
            clip_id: annotation.clip_id.clone(),
            features,
            roll,
            events: annotation.events.clone(),
        })
    }

    pub fn from_waveform(
        annotation: &ClipAnnotation,
        waveform: &[f64],
        sample_rate: u32,
        extractor: &FeatureExtractor,
        n_classes: usize,
    ) -> Result<Self> {
        let expected = extractor.config().sample_rate;
        if sample_rate != expected {
            return Err(Error::Config(format!(
                "clip `{}` has sample rate {sample_rate}, features expect {expected}",
                annotation.clip_id
            )));
        }
        Self::new(annotation, extractor.extract(waveform)?, n_classes)
    }
}

/// Extracts features and labels for every clip of a dataset.
pub fn prepare_dataset(clips: &[DatasetClip], features: &FeatureConfig, n_classes: usize) -> Result<Vec<LabeledClip>> {
    let extractor = FeatureExtractor::new(features.clone())?;
    clips
        .iter()
        .map(|c| LabeledClip::from_waveform(&c.annotation, &c.waveform, c.sample_rate, &extractor, n_classes))
        .collect()
}

/// What a single optimizer step saw.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub epoch: usize,
    pub batch: usize,
    /// Priority vector sampled for the batch.
    pub weights: TriageWeights,
    /// Vector fed to the conditioner (empty when it is bypassed).
    pub conditioner_input: Vec<f64>,
    /// Normalized weights used by the loss.
    pub loss_weights: Vec<f64>,
    pub clip_ids: Vec<String>,
    /// Mean loss over the batch.
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Macro frame F at uniform priority, threshold 0.5.
    pub validation_frame_f: f64,
}

/// Hooks called during training.
pub trait TrainObserver {
    fn on_batch(&mut self, _record: &BatchRecord) {}
    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

impl TrainObserver for () {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation score.
    pub model: TriageModel,
    pub best_epoch: usize,
    pub best_score: f64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// Tab-separated training log, one row per epoch.
    pub fn log_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_frame_f\n");
        for r in &self.epochs {
            out.push_str(&format!("{}\t{:.9}\t{:.9}\n", r.epoch, r.train_loss, r.validation_frame_f));
        }
        out
    }
}

/// Macro frame F of `model` at uniform priority and threshold 0.5.
pub fn validation_score(model: &TriageModel, clips: &[LabeledClip]) -> Result<f64> {
    let n = model.n_classes();
    let weights = TriageWeights::uniform(n);
    let thresholds = vec![0.5; n];
    let mut preds = Vec::with_capacity(clips.len());
    let mut refs = Vec::with_capacity(clips.len());
    for clip in clips {
        let probs = predict(model, &clip.features, &weights)?;
        preds.push(binarize(probs.view(), &thresholds, clip.features.frame_hop)?);
        refs.push(clip.roll.clone());
    }
    Ok(frame_f1(&preds, &refs)?.macro_average)
}

struct Prepared {
    id: String,
    features: Array2<f64>,
    pooled: EventRoll,
}

/// Builds a model for `train`, fits the feature normalizer on it, and trains
/// with a Dirichlet sampler; every random draw derives from `config.seed`.
pub fn train(
    model_config: &ModelConfig,
    train_set: &[LabeledClip],
    validation: &[LabeledClip],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut model_config = model_config.clone();
    model_config.identity_film = config.identity_film;
    let normalizer = FeatureNormalizer::fit(train_set.iter().map(|c| &c.features))?;
    let mut init_rng = stream_rng(config.seed, INIT_STREAM);
    let model = TriageModel::new(model_config.clone(), normalizer, &mut init_rng)?;
    let dirichlet = DirichletConfig::symmetric(config.dirichlet_alpha, model_config.n_classes());
    let mut sampler = DirichletSampler::new(dirichlet, stream_rng(config.seed, TRIAGE_STREAM))?;
    train_model(model, train_set, validation, config, &mut sampler, observer)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Trains an existing model. One priority vector is drawn per batch and shared
/// by the conditioner and the loss; the best epoch is kept on strict
/// validation improvement.
pub fn train_model(
    mut model: TriageModel,
    train_set: &[LabeledClip],
    validation: &[LabeledClip],
    config: &TrainConfig,
    sampler: &mut dyn TriageSampler,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || validation.is_empty() {
        return Err(Error::Config("training and validation sets must be nonempty".into()));
    }
    let n_classes = model.n_classes();
    let reduction = model.config.backbone.time_reduction();
    let prepared: Vec<Prepared> = train_set
        .iter()
        .map(|c| {
            if c.roll.n_classes() != n_classes {
                return Err(Error::shape("training labels", n_classes, c.roll.n_classes()));
            }
            Ok(Prepared {
                id: c.clip_id.clone(),
                features: model.normalizer.apply(&c.features)?.values,
                pooled: pool_labels(&c.roll, reduction)?,
            })
        })
        .collect::<Result<_>>()?;

    let adam = AdamConfig {
        learning_rate: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut backbone_opt = Adam::new(adam, model.backbone.params().len());
    let mut conditioner_opt = Adam::new(adam, model.conditioner.params().len());
    let mut shuffle_rng = stream_rng(config.seed, SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..prepared.len()).collect();

    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);
    let mut epochs = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0usize;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let weights = sampler.sample()?;
            if weights.n_classes() != n_classes {
                return Err(Error::shape("sampled triage weights", n_classes, weights.n_classes()));
            }
            let conditioner_input = if model.config.identity_film {
                Vec::new()
            } else {
                scale_for_conditioning(&weights)
            };
            let (film, film_trace) = if model.config.identity_film {
                (FilmParams::identity(model.config.backbone.film_channels()), None)
            } else {
                let (f, t) = model.conditioner.condition_traced(&conditioner_input)?;
                (f, Some(t))
            };

            let mut backbone_grad = model.backbone.params().zeros_like();
            let mut film_grad = FilmGrad::zeros(film.channels());
            let scale = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            for &i in chunk {
                let clip = &prepared[i];
                let (logits, trace) = model.backbone.forward_traced(clip.features.view(), Some(&film))?;
                let (value, mut dlogits) = loss_with_grad(config.loss, logits.view(), &clip.pooled, &weights)?;
                batch_loss += value.total * scale;
                dlogits *= scale;
                if let Some(g) = model.backbone.backward(&mut backbone_grad, &trace, dlogits.view(), Some(&film)) {
                    film_grad.accumulate(&g);
                }
            }
            let finite = batch_loss.is_finite() && backbone_grad.iter().all(|g| g.is_finite());
            if !finite {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch + 1,
                    loss: batch_loss,
                });
            }
            if let Some(trace) = film_trace {
                let mut cond_grad = model.conditioner.params().zeros_like();
                model.conditioner.backward(&mut cond_grad, &trace, &film_grad);
                if !cond_grad.iter().all(|g| g.is_finite()) {
                    return Err(Error::Divergence {
                        epoch,
                        batch: batch + 1,
                        loss: batch_loss,
                    });
                }
                conditioner_opt.step(model.conditioner.params_mut().data_mut(), &cond_grad);
            }
            backbone_opt.step(model.backbone.params_mut().data_mut(), &backbone_grad);

            observer.on_batch(&BatchRecord {
                epoch,
                batch: batch + 1,
                loss_weights: weights.normalized().to_vec(),
                weights,
                conditioner_input,
                clip_ids: chunk.iter().map(|&i| prepared[i].id.clone()).collect(),
                loss: batch_loss,
            });
            loss_sum += batch_loss;
            n_batches += 1;
        }

        let score = validation_score(&model, validation)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n_batches as f64,
            validation_frame_f: score,
        };
        observer.on_epoch(&record);
        epochs.push(record);
        if score > best.2 {
            best = (model.clone(), epoch, score);
        }
    }
    Ok(TrainOutcome {
        model: best.0,
        best_epoch: best.1,
        best_score: best.2,
        epochs,
    })
}
