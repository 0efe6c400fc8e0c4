//! Clip annotations, synthetic soundscapes, log-mel features and frame-aligned
//! activity rolls.

mod features;
mod io;
mod roll;
mod synth;

pub use features::{extract_logmel, FeatureConfig, FeatureExtractor, FeatureGrid, FeatureNormalizer};
pub use io::{
    read_annotations, read_class_map, read_dataset, read_wav, write_annotations, write_class_map,
    write_dataset, write_wav, DatasetClip,
};
pub use roll::{pool_labels, rasterize, upsample_frames, EventRoll};
pub use synth::{class_signature, synthesize_dataset, SynthClip, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labelled (or detected) sound event inside a clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventInstance {
    #[serde(rename = "class")]
    pub class_index: usize,
    pub onset: f64,
    pub offset: f64,
}

impl EventInstance {
    pub fn new(class_index: usize, onset: f64, offset: f64) -> Self {
        Self {
            class_index,
            onset,
            offset,
        }
    }

    pub fn duration(&self) -> f64 {
        self.offset - self.onset
    }

    /// Length of the intersection of two time intervals, ignoring class.
    pub fn overlap(&self, other: &EventInstance) -> f64 {
        (self.offset.min(other.offset) - self.onset.max(other.onset)).max(0.0)
    }
}

/// Ground-truth events of a single clip. Events of the same or different
/// classes may overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipAnnotation {
    pub clip_id: String,
    pub duration: f64,
    pub events: Vec<EventInstance>,
}

impl ClipAnnotation {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let fail = |reason: String| Error::Annotation {
            clip_id: self.clip_id.clone(),
            reason,
        };
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(fail(format!("duration {} must be positive", self.duration)));
        }
        for ev in &self.events {
            if ev.class_index >= n_classes {
                return Err(fail(format!(
                    "class {} out of range for {} classes",
                    ev.class_index, n_classes
                )));
            }
            if !(ev.onset >= 0.0 && ev.onset < ev.offset && ev.offset <= self.duration) {
                return Err(fail(format!(
                    "event ({}, {}) violates 0 <= onset < offset <= {}",
                    ev.onset, ev.offset, self.duration
                )));
            }
        }
        Ok(())
    }
}
