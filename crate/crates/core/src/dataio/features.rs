use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Framing and filterbank settings for log-mel extraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    /// Analysis window length in seconds.
    pub window: f64,
    /// Frame hop in seconds.
    pub hop: f64,
    pub n_mels: usize,
    /// Added to the mel energy before taking the natural log.
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 44_100,
            window: 0.040,
            hop: 0.020,
            n_mels: 64,
            log_floor: 1e-10,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        if !(self.window > 0.0 && self.hop > 0.0 && self.hop <= self.window) {
            return Err(Error::Config(format!(
                "need 0 < hop ({}) <= window ({})",
                self.hop, self.window
            )));
        }
        if self.n_mels == 0 {
            return Err(Error::Config("n_mels must be at least 1".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        if self.window_samples() == 0 || self.hop_samples() == 0 {
            return Err(Error::Config("window and hop must span at least one sample".into()));
        }
        Ok(())
    }

    pub fn window_samples(&self) -> usize {
        (self.window * self.sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop * self.sample_rate as f64).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.window_samples().next_power_of_two()
    }

    /// Number of complete analysis frames in a waveform of `n_samples`.
    pub fn n_frames(&self, n_samples: usize) -> usize {
        let win = self.window_samples();
        if n_samples < win {
            0
        } else {
            (n_samples - win) / self.hop_samples() + 1
        }
    }
}

/// Log-mel energies laid out as `[frames, mel bands]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub values: Array2<f64>,
    pub frame_hop: f64,
}

impl FeatureGrid {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_mels(&self) -> usize {
        self.values.ncols()
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// One triangular mel filter stored as a dense run of FFT-bin weights.
#[derive(Debug, Clone)]
struct MelBand {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Reusable extractor holding the FFT plan, analysis window and filterbank.
pub struct FeatureExtractor {
    config: FeatureConfig,
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    bands: Vec<MelBand>,
}

impl std::fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeatureExtractor")
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig) -> Result<Self> {
        config.validate()?;
        let n_fft = config.fft_size();
        let win_len = config.window_samples();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        // periodic Hann
        let window = (0..win_len)
            .map(|i| {
                let phase = 2.0 * std::f64::consts::PI * i as f64 / win_len as f64;
                0.5 - 0.5 * phase.cos()
            })
            .collect();
        let bands = mel_filterbank(config.n_mels, n_fft, config.sample_rate as f64);
        Ok(Self {
            config,
            fft,
            window,
            bands,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn extract(&self, waveform: &[f64]) -> Result<FeatureGrid> {
        let win_len = self.config.window_samples();
        if waveform.len() < win_len {
            return Err(Error::WaveformTooShort {
                actual: waveform.len(),
                minimum: win_len,
            });
        }
        let hop = self.config.hop_samples();
        let n_frames = self.config.n_frames(waveform.len());
        let n_fft = self.fft.len();
        let n_bins = n_fft / 2 + 1;
        let mut values = Array2::zeros((n_frames, self.config.n_mels));
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_bins];

        for (t, mut row) in values.rows_mut().into_iter().enumerate() {
            let start = t * hop;
            let frame = &waveform[start..start + win_len];
            for (slot, (&x, &w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *slot = Complex::new(x * w, 0.0);
            }
            for slot in &mut buf[win_len..] {
                *slot = Complex::new(0.0, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf[..n_bins]) {
                *p = c.norm_sqr();
            }
            for (out, band) in row.iter_mut().zip(&self.bands) {
                let energy: f64 = band
                    .weights
                    .iter()
                    .zip(&power[band.first_bin..])
                    .map(|(w, p)| w * p)
                    .sum();
                *out = (energy + self.config.log_floor).ln();
            }
        }
        Ok(FeatureGrid {
            values,
            frame_hop: self.config.hop,
        })
    }
}

/// Triangular filters with unit peak, centres equally spaced on the HTK mel
/// scale between 0 Hz and Nyquist.
fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64) -> Vec<MelBand> {
    let n_bins = n_fft / 2 + 1;
    let mel_max = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * sample_rate / n_fft as f64;

    edges
        .windows(3)
        .map(|e| {
            let (lo, centre, hi) = (e[0], e[1], e[2]);
            let mut first_bin = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let f = bin_hz(k);
                let w = if f > lo && f <= centre {
                    (f - lo) / (centre - lo)
                } else if f > centre && f < hi {
                    (hi - f) / (hi - centre)
                } else {
                    0.0
                };
                if w > 0.0 {
                    first_bin.get_or_insert(k);
                    weights.push(w);
                } else if first_bin.is_some() {
                    break;
                }
            }
            MelBand {
                first_bin: first_bin.unwrap_or(0),
                weights,
            }
        })
        .collect()
}

/// Per-band standardization fitted on training features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNormalizer {
    pub fn identity(n_mels: usize) -> Self {
        Self {
            mean: vec![0.0; n_mels],
            std: vec![1.0; n_mels],
        }
    }

    /// Mean and standard deviation of every band over all frames of all grids.
    /// Bands with (near) zero spread keep unit scale.
    pub fn fit<'a>(grids: impl IntoIterator<Item = &'a FeatureGrid>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sum_sq: Vec<f64> = Vec::new();
        for g in grids {
            if sum.is_empty() {
                sum = vec![0.0; g.n_mels()];
                sum_sq = vec![0.0; g.n_mels()];
            }
            if g.n_mels() != sum.len() {
                return Err(Error::shape("normalizer mel bands", sum.len(), g.n_mels()));
            }
            for row in g.values.rows() {
                for ((s, q), &v) in sum.iter_mut().zip(sum_sq.iter_mut()).zip(row) {
                    *s += v;
                    *q += v * v;
                }
            }
            count += g.n_frames();
        }
        if count == 0 {
            return Err(Error::Config("cannot fit a normalizer without frames".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sum_sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 1e-12 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, grid: &FeatureGrid) -> Result<FeatureGrid> {
        if grid.n_mels() != self.mean.len() {
            return Err(Error::shape("normalizer mel bands", self.mean.len(), grid.n_mels()));
        }
        let mut values = grid.values.clone();
        for mut row in values.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(FeatureGrid {
            values,
            frame_hop: grid.frame_hop,
        })
    }
}

/// Convenience wrapper building a one-off [`FeatureExtractor`].
pub fn extract_logmel(waveform: &[f64], config: &FeatureConfig) -> Result<FeatureGrid> {
    FeatureExtractor::new(config.clone())?.extract(waveform)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_second_clip_has_499_frames() {
        let cfg = FeatureConfig::default();
        let samples = 10 * cfg.sample_rate as usize;
        // framing oracle: count window starts that fit
        let oracle = (0..)
            .map(|t| t * cfg.hop_samples())
            .take_while(|s| s + cfg.window_samples() <= samples)
            .count();
        assert_eq!(oracle, 499);
        let grid = extract_logmel(&vec![0.0; samples], &cfg).unwrap();
        assert_eq!(grid.n_frames(), 499);
        assert_eq!(grid.n_mels(), 64);
    }

    #[test]
    fn silence_maps_to_log_floor() {
        let cfg = FeatureConfig::default();
        let grid = extract_logmel(&vec![0.0; 4000], &cfg).unwrap();
        let expected = cfg.log_floor.ln();
        assert!(grid.values.iter().all(|&v| v == expected));
    }

    #[test]
    fn short_waveform_names_minimum() {
        let cfg = FeatureConfig::default();
        let err = extract_logmel(&[0.0; 100], &cfg).unwrap_err();
        match err {
            Error::WaveformTooShort { actual, minimum } => {
                assert_eq!(actual, 100);
                assert_eq!(minimum, 1764);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tone_peaks_in_matching_band() {
        let cfg = FeatureConfig::default();
        let sr = cfg.sample_rate as f64;
        let wave: Vec<f64> = (0..8820)
            .map(|i| (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / sr).sin())
            .collect();
        let grid = extract_logmel(&wave, &cfg).unwrap();
        let row = grid.values.row(2);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        let mel_max = hz_to_mel(sr / 2.0);
        let centre = mel_to_hz(mel_max * (argmax + 1) as f64 / 65.0);
        assert!((centre - 1000.0).abs() < 150.0, "centre {centre}");
        assert!(grid.values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn every_band_has_weights() {
        let bands = mel_filterbank(64, 2048, 44_100.0);
        assert_eq!(bands.len(), 64);
        assert!(bands.iter().all(|b| !b.weights.is_empty()));
    }

    #[test]
    fn normalizer_standardizes_bands() {
        let grid = FeatureGrid {
            values: ndarray::array![[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]],
            frame_hop: 0.02,
        };
        let norm = FeatureNormalizer::fit([&grid]).unwrap();
        assert_eq!(norm.mean, vec![3.0, 5.0]);
        assert_eq!(norm.std[1], 1.0);
        let out = norm.apply(&grid).unwrap();
        assert!((out.values.column(0).sum()).abs() < 1e-12);
        assert!(out.values.column(1).iter().all(|&v| v == 0.0));
        assert!(FeatureNormalizer::fit(std::iter::empty::<&FeatureGrid>()).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = FeatureConfig::default();
        cfg.hop = 0.05;
        assert!(cfg.validate().is_err());
        let mut cfg = FeatureConfig::default();
        cfg.n_mels = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = FeatureConfig::default();
        cfg.log_floor = 0.0;
        assert!(cfg.validate().is_err());
    }
}
