//! The complete priority-conditioned detector: feature standardization,
//! conditioner and backbone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, PosteriorGrid};
use crate::conditioning::{Conditioner, ConditionerConfig, FilmParams};
use crate::dataio::{FeatureGrid, FeatureNormalizer};
use crate::error::{Error, Result};
use crate::triage::{scale_for_conditioning, TriageWeights};

/// Architecture of a [`TriageModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub conditioner: ConditionerConfig,
    /// Bypass the conditioner and use identity modulation (plain detector).
    pub identity_film: bool,
}

impl ModelConfig {
    /// Table-sized detector for `n_classes` classes over `n_mels` bands.
    pub fn new(n_mels: usize, n_classes: usize) -> Self {
        Self {
            backbone: BackboneConfig::new(n_mels, n_classes),
            conditioner: ConditionerConfig::new(n_classes),
            identity_film: false,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.backbone.n_classes
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.conditioner.validate()?;
        if self.conditioner.output_dim != self.backbone.film_channels() {
            return Err(Error::Config(format!(
                "conditioner output ({}) must equal the CNN channel count ({})",
                self.conditioner.output_dim,
                self.backbone.film_channels()
            )));
        }
        if self.conditioner.input_dim != self.backbone.n_classes {
            return Err(Error::Config(format!(
                "conditioner input ({}) must equal the class count ({})",
                self.conditioner.input_dim, self.backbone.n_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TriageModel {
    pub config: ModelConfig,
    pub normalizer: FeatureNormalizer,
    pub backbone: Backbone,
    pub conditioner: Conditioner,
}

impl TriageModel {
    pub fn new<R: Rng>(config: ModelConfig, normalizer: FeatureNormalizer, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if normalizer.mean.len() != config.backbone.n_mels {
            return Err(Error::shape("normalizer bands", config.backbone.n_mels, normalizer.mean.len()));
        }
        let backbone = Backbone::new(config.backbone.clone(), rng)?;
        let conditioner = Conditioner::new(config.conditioner.clone(), rng)?;
        Ok(Self {
            config,
            normalizer,
            backbone,
            conditioner,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes()
    }

    /// FiLM parameters for a priority vector.
    pub fn film(&self, weights: &TriageWeights) -> Result<FilmParams> {
        if weights.n_classes() != self.n_classes() {
            return Err(Error::shape("triage weights", self.n_classes(), weights.n_classes()));
        }
        if self.config.identity_film {
            return Ok(FilmParams::identity(self.config.backbone.film_channels()));
        }
        self.conditioner.condition(&scale_for_conditioning(weights))
    }

    /// Posteriors at the backbone's output rate for raw (unnormalized) features.
    pub fn posteriors(&self, features: &FeatureGrid, weights: &TriageWeights) -> Result<PosteriorGrid> {
        let film = self.film(weights)?;
        self.posteriors_with_film(features, &film)
    }

    pub fn posteriors_with_film(&self, features: &FeatureGrid, film: &FilmParams) -> Result<PosteriorGrid> {
        let normalized = self.normalizer.apply(features)?;
        self.backbone.forward(&normalized, Some(film))
    }
}
