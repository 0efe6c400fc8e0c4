use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{ClipAnnotation, EventInstance};
use crate::error::{Error, Result};

/// Parameters of the synthetic soundscape generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_clips: usize,
    pub n_classes: usize,
    /// Clip length in seconds.
    pub duration: f64,
    pub seed: u64,
    pub sample_rate: u32,
    /// Each clip holds between 1 and `max_events` events.
    pub max_events: usize,
    pub min_event_len: f64,
    pub max_event_len: f64,
    /// Standard deviation of the white background noise.
    pub noise_std: f64,
    /// Per-event level range in dB relative to a partial amplitude of 0.1.
    pub level_db: (f64, f64),
    /// Per-class level offsets in dB; empty means none.
    pub class_gain_db: Vec<f64>,
    /// Relative frequency with which each class is drawn; empty means uniform.
    pub class_prevalence: Vec<f64>,
}

impl SynthConfig {
    pub fn new(n_clips: usize, n_classes: usize, duration: f64, seed: u64) -> Self {
        Self {
            n_clips,
            n_classes,
            duration,
            seed,
            sample_rate: 44_100,
            max_events: 4,
            min_event_len: 0.3,
            max_event_len: 2.0,
            noise_std: 0.005,
            level_db: (-30.0, 0.0),
            class_gain_db: Vec::new(),
            class_prevalence: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::Config("synthetic data needs at least one class".into()));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(Error::Config(format!("duration {} must be positive", self.duration)));
        }
        if self.sample_rate == 0 || self.max_events == 0 {
            return Err(Error::Config("sample_rate and max_events must be positive".into()));
        }
        if !(self.min_event_len > 0.0 && self.min_event_len <= self.max_event_len) {
            return Err(Error::Config("need 0 < min_event_len <= max_event_len".into()));
        }
        if !(self.noise_std >= 0.0 && self.level_db.0 <= self.level_db.1) {
            return Err(Error::Config("invalid noise or level range".into()));
        }
        if !self.class_gain_db.is_empty() && self.class_gain_db.len() != self.n_classes {
            return Err(Error::shape("class gains", self.n_classes, self.class_gain_db.len()));
        }
        if !self.class_prevalence.is_empty() {
            if self.class_prevalence.len() != self.n_classes {
                return Err(Error::shape("class prevalence", self.n_classes, self.class_prevalence.len()));
            }
            if WeightedIndex::new(&self.class_prevalence).is_err() {
                return Err(Error::Config("class prevalence must be nonnegative with a positive sum".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub waveform: Vec<f64>,
    pub annotation: ClipAnnotation,
}

/// Partial frequencies (Hz) and amplitude-modulation rate (Hz) of a class.
///
/// Cluster centres are log-spaced between 300 Hz and 6 kHz so that neighbouring
/// classes occupy disjoint mel regions.
pub fn class_signature(class_index: usize, n_classes: usize) -> ([f64; 3], f64) {
    let position = if n_classes > 1 {
        class_index as f64 / (n_classes - 1) as f64
    } else {
        0.5
    };
    let centre = 300.0 * 20f64.powf(position);
    let partials = [centre / 1.06, centre, centre * 1.06];
    let am_rate = 2.0 + 1.5 * class_index as f64;
    (partials, am_rate)
}

fn round_ms(t: f64) -> f64 {
    (t * 1000.0).round() / 1000.0
}

/// Generates `n_clips` polyphonic clips. Each clip draws from its own ChaCha
/// stream, so clip `i` does not depend on how many clips are requested.
pub fn synthesize_dataset(config: &SynthConfig) -> Result<Vec<SynthClip>> {
    config.validate()?;
    (0..config.n_clips).map(|i| synthesize_clip(config, i)).collect()
}

fn synthesize_clip(config: &SynthConfig, index: usize) -> Result<SynthClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let sr = config.sample_rate as f64;
    let n_samples = (config.duration * sr).round() as usize;

    let mut waveform: Vec<f64> = (0..n_samples)
        .map(|_| config.noise_std * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let prevalence = (!config.class_prevalence.is_empty())
        .then(|| WeightedIndex::new(&config.class_prevalence).expect("validated"));
    let n_events = rng.random_range(1..=config.max_events);
    let mut events = Vec::with_capacity(n_events);
    for _ in 0..n_events {
        let class_index = match &prevalence {
            Some(dist) => rng.sample(dist),
            None => rng.random_range(0..config.n_classes),
        };
        let max_len = config.max_event_len.min(config.duration);
        let min_len = config.min_event_len.min(max_len);
        let len = rng.random_range(min_len..=max_len);
        let onset = round_ms(rng.random_range(0.0..=(config.duration - len)));
        let offset = round_ms(onset + len).min(config.duration);
        if offset <= onset {
            continue;
        }
        let level_db = rng.random_range(config.level_db.0..=config.level_db.1);
        let gain_db = config.class_gain_db.get(class_index).copied().unwrap_or(0.0);
        let amplitude = 0.1 * 10f64.powf((level_db + gain_db) / 20.0);
        let phases: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
        render_event(&mut waveform, sr, class_index, config.n_classes, onset, offset, amplitude, phases);
        events.push(EventInstance::new(class_index, onset, offset));
    }
    events.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.class_index.cmp(&b.class_index)));

    for x in &mut waveform {
        *x = x.clamp(-1.0, 1.0);
    }
    Ok(SynthClip {
        waveform,
        annotation: ClipAnnotation {
            clip_id: format!("clip_{index:05}"),
            duration: config.duration,
            events,
        },
    })
}

#[allow(clippy::too_many_arguments)]
fn render_event(
    waveform: &mut [f64],
    sr: f64,
    class_index: usize,
    n_classes: usize,
    onset: f64,
    offset: f64,
    amplitude: f64,
    phases: [f64; 3],
) {
    let (partials, am_rate) = class_signature(class_index, n_classes);
    let start = (onset * sr).round() as usize;
    let end = ((offset * sr).round() as usize).min(waveform.len());
    let ramp = (0.01 * sr) as usize;
    let tau = std::f64::consts::TAU;
    for (i, slot) in waveform[start..end].iter_mut().enumerate() {
        let t = i as f64 / sr;
        let remaining = end - start - i;
        let fade = (i.min(remaining).min(ramp) as f64 / ramp as f64).min(1.0);
        let am = 0.75 + 0.25 * (tau * am_rate * t).sin();
        let tone: f64 = partials
            .iter()
            .zip(&phases)
            .map(|(f, p)| (tau * f * t + p).sin())
            .sum();
        *slot += amplitude * fade * am * tone;
    }
}
