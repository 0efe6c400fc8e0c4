//! Priority-conditioned prediction, post-processing (thresholds and median
//! filtering), event extraction and validation-set tuning.

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataio::{upsample_frames, EventInstance, EventRoll, FeatureGrid};
use crate::error::{Error, Result};
use crate::metrics::{self, IntersectionConfig, MetricsReport};
use crate::model::TriageModel;
use crate::training::LabeledClip;
use crate::triage::{make_inference_weights, TriageWeights};

/// Per-class detection thresholds and median filter lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostprocessConfig {
    pub thresholds: Vec<f64>,
    pub median_sizes: Vec<usize>,
}

impl PostprocessConfig {
    /// Threshold 0.5 and no smoothing for every class.
    pub fn plain(n_classes: usize) -> Self {
        Self {
            thresholds: vec![0.5; n_classes],
            median_sizes: vec![1; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.thresholds.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.thresholds.len() != self.median_sizes.len() {
            return Err(Error::shape("postprocess config", self.thresholds.len(), self.median_sizes.len()));
        }
        check_thresholds(&self.thresholds)?;
        check_sizes(&self.median_sizes)
    }
}

fn check_thresholds(thresholds: &[f64]) -> Result<()> {
    match thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        Some(t) => Err(Error::Config(format!("threshold {t} must lie in (0, 1)"))),
        None => Ok(()),
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    match sizes.iter().find(|s| **s % 2 == 0) {
        Some(s) => Err(Error::Config(format!("median filter size {s} must be odd"))),
        None => Ok(()),
    }
}

/// Probabilities `[classes, feature frames]` under priority `weights`:
/// posteriors are computed at the backbone rate and repeated back onto the
/// feature grid.
pub fn predict(model: &TriageModel, features: &FeatureGrid, weights: &TriageWeights) -> Result<Array2<f64>> {
    let post = model.posteriors(features, weights)?;
    Ok(upsample_frames(
        post.probabilities.view(),
        model.config.backbone.time_reduction(),
        features.n_frames(),
    ))
}

/// Active iff `prob > threshold[class]`.
pub fn binarize(probs: ArrayView2<'_, f64>, thresholds: &[f64], frame_hop: f64) -> Result<EventRoll> {
    if thresholds.len() != probs.nrows() {
        return Err(Error::shape("binarize thresholds", probs.nrows(), thresholds.len()));
    }
    let active = Array2::from_shape_fn(probs.dim(), |(n, t)| probs[[n, t]] > thresholds[n]);
    Ok(EventRoll { active, frame_hop })
}

fn median_row(row: ArrayView1<'_, bool>, size: usize) -> Vec<bool> {
    let len = row.len();
    if size <= 1 || len == 0 {
        return row.to_vec();
    }
    let half = size / 2;
    // prefix counts over the edge-replicated sequence
    let padded = |i: isize| row[i.clamp(0, len as isize - 1) as usize];
    let mut prefix = Vec::with_capacity(len + 2 * half + 1);
    prefix.push(0usize);
    for i in -(half as isize)..(len + half) as isize {
        prefix.push(prefix.last().unwrap() + usize::from(padded(i)));
    }
    (0..len).map(|t| 2 * (prefix[t + size] - prefix[t]) > size).collect()
}

/// Binary sliding median per class with edge replication; size 1 is identity.
pub fn median_smooth(roll: &EventRoll, sizes: &[usize]) -> Result<EventRoll> {
    if sizes.len() != roll.n_classes() {
        return Err(Error::shape("median sizes", roll.n_classes(), sizes.len()));
    }
    check_sizes(sizes)?;
    let mut out = roll.clone();
    for (n, &size) in sizes.iter().enumerate() {
        let smoothed = median_row(roll.active.row(n), size);
        for (slot, v) in out.active.row_mut(n).iter_mut().zip(smoothed) {
            *slot = v;
        }
    }
    Ok(out)
}

/// Maximal active runs become events `[start·hop, (end + 1)·hop)`.
pub fn extract_events(roll: &EventRoll) -> Vec<EventInstance> {
    let hop = roll.frame_hop;
    let mut events = Vec::new();
    for (n, row) in roll.active.outer_iter().enumerate() {
        let mut start = None;
        for (t, &a) in row.iter().enumerate() {
            match (a, start) {
                (true, None) => start = Some(t),
                (false, Some(s)) => {
                    events.push(EventInstance::new(n, s as f64 * hop, t as f64 * hop));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            events.push(EventInstance::new(n, s as f64 * hop, row.len() as f64 * hop));
        }
    }
    events
}

/// Thresholding followed by median smoothing.
pub fn postprocess(probs: ArrayView2<'_, f64>, config: &PostprocessConfig, frame_hop: f64) -> Result<EventRoll> {
    config.validate()?;
    let roll = binarize(probs, &config.thresholds, frame_hop)?;
    median_smooth(&roll, &config.median_sizes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Frame,
    Intersection,
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frame" => Ok(MetricKind::Frame),
            "intersection" => Ok(MetricKind::Intersection),
            other => Err(Error::Config(format!("unknown metric `{other}` (expected frame or intersection)"))),
        }
    }
}

/// Candidate values searched by [`tune_postprocessing`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningGrid {
    pub thresholds: Vec<f64>,
    pub median_sizes: Vec<usize>,
    /// Raw target-class weights (non-target classes stay at 1).
    pub target_weights: Vec<f64>,
}

impl Default for TuningGrid {
    fn default() -> Self {
        Self {
            thresholds: (1..=19).map(|i| i as f64 * 0.05).collect(),
            median_sizes: (0..16).map(|i| 2 * i + 1).collect(),
            target_weights: vec![1.0, 5.0, 10.0, 15.0, 20.0, 25.0],
        }
    }
}

impl TuningGrid {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() || self.median_sizes.is_empty() || self.target_weights.is_empty() {
            return Err(Error::Config("tuning grids must be nonempty".into()));
        }
        check_thresholds(&self.thresholds)?;
        check_sizes(&self.median_sizes)?;
        if let Some(w) = self.target_weights.iter().find(|w| !(**w > 0.0)) {
            return Err(Error::Config(format!("target weight {w} must be positive")));
        }
        Ok(())
    }
}

/// Best grid point for one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassTuning {
    pub threshold: f64,
    pub median_size: usize,
    pub target_weight: f64,
    pub score: f64,
}

/// Tuned post-processing plus the per-class target weight it was tuned at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub metric: MetricKind,
    pub postprocess: PostprocessConfig,
    pub classes: Vec<ClassTuning>,
}

impl TuningResult {
    pub fn target_weights(&self) -> Vec<f64> {
        self.classes.iter().map(|c| c.target_weight).collect()
    }
}

/// Score of a single class's post-processed rows against the references.
pub fn class_score(
    class: usize,
    rows: &[ArrayView1<'_, f64>],
    references: &[&LabeledClip],
    threshold: f64,
    median_size: usize,
    metric: MetricKind,
    intersection: &IntersectionConfig,
) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (row, clip) in rows.iter().zip(references) {
        let bits: Vec<bool> = row.iter().map(|&p| p > threshold).collect();
        let smoothed = median_row(ArrayView1::from(&bits), median_size);
        match metric {
            MetricKind::Frame => {
                for (&est, &truth) in smoothed.iter().zip(clip.roll.active.row(class)) {
                    tp += u64::from(est && truth);
                    fp += u64::from(est && !truth);
                    fn_ += u64::from(!est && truth);
                }
            }
            MetricKind::Intersection => {
                let hop = clip.roll.frame_hop;
                let roll = EventRoll {
                    active: Array2::from_shape_vec((1, smoothed.len()), smoothed).expect("row"),
                    frame_hop: hop,
                };
                let pred: Vec<EventInstance> = extract_events(&roll)
                    .into_iter()
                    .map(|e| EventInstance::new(class, e.onset, e.offset))
                    .collect();
                let refs: Vec<EventInstance> = clip.events.iter().filter(|e| e.class_index == class).copied().collect();
                let counts = metrics::intersection_counts(&pred, &refs, class + 1, intersection)
                    .expect("instances built from rolls are well formed");
                tp += counts[class].tp;
                fp += counts[class].fp;
                fn_ += counts[class].fn_;
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Exhaustive per-class search over threshold × median size × target weight.
/// Ties go to the smallest threshold, then the smallest filter, then the
/// smallest weight.
pub fn tune_postprocessing(
    model: &TriageModel,
    validation: &[LabeledClip],
    grid: &TuningGrid,
    metric: MetricKind,
) -> Result<TuningResult> {
    grid.validate()?;
    if validation.is_empty() {
        return Err(Error::Config("tuning needs a nonempty validation set".into()));
    }
    let n_classes = model.n_classes();
    let intersection = IntersectionConfig::default();
    let refs: Vec<&LabeledClip> = validation.iter().collect();

    let mut uniform_cache: Option<Vec<Array2<f64>>> = None;
    let mut best: Vec<Option<ClassTuning>> = vec![None; n_classes];
    for class in 0..n_classes {
        for &weight in &grid.target_weights {
            let weights = make_inference_weights(class, weight, n_classes)?;
            let probs: Vec<Array2<f64>> = if weights.is_uniform() {
                if uniform_cache.is_none() {
                    uniform_cache = Some(predict_all(model, validation, &weights)?);
                }
                uniform_cache.clone().expect("cached")
            } else {
                predict_all(model, validation, &weights)?
            };
            let rows: Vec<ArrayView1<'_, f64>> = probs.iter().map(|p| p.row(class)).collect();
            for &threshold in &grid.thresholds {
                for &median_size in &grid.median_sizes {
                    let score = class_score(class, &rows, &refs, threshold, median_size, metric, &intersection);
                    let candidate = ClassTuning {
                        threshold,
                        median_size,
                        target_weight: weight,
                        score,
                    };
                    if better(&candidate, best[class].as_ref()) {
                        best[class] = Some(candidate);
                    }
                }
            }
        }
    }
    let classes: Vec<ClassTuning> = best.into_iter().map(|b| b.expect("grid is nonempty")).collect();
    Ok(TuningResult {
        metric,
        postprocess: PostprocessConfig {
            thresholds: classes.iter().map(|c| c.threshold).collect(),
            median_sizes: classes.iter().map(|c| c.median_size).collect(),
        },
        classes,
    })
}

fn better(candidate: &ClassTuning, incumbent: Option<&ClassTuning>) -> bool {
    let Some(inc) = incumbent else {
        return true;
    };
    if candidate.score != inc.score {
        return candidate.score > inc.score;
    }
    let key = |c: &ClassTuning| (c.threshold, c.median_size, c.target_weight);
    let (a, b) = (key(candidate), key(inc));
    a.0.total_cmp(&b.0)
        .then(a.1.cmp(&b.1))
        .then(a.2.total_cmp(&b.2))
        .is_lt()
}

pub fn predict_all(model: &TriageModel, clips: &[LabeledClip], weights: &TriageWeights) -> Result<Vec<Array2<f64>>> {
    clips.iter().map(|c| predict(model, &c.features, weights)).collect()
}

/// Detections of one clip under a priority vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipPrediction {
    pub clip_id: String,
    pub lambda: Vec<f64>,
    pub events: Vec<EventInstance>,
}

/// Post-processed rolls and events for every clip.
pub fn detect(
    model: &TriageModel,
    clips: &[LabeledClip],
    weights: &TriageWeights,
    config: &PostprocessConfig,
) -> Result<(Vec<EventRoll>, Vec<ClipPrediction>)> {
    if config.n_classes() != model.n_classes() {
        return Err(Error::shape("postprocess classes", model.n_classes(), config.n_classes()));
    }
    let mut rolls = Vec::with_capacity(clips.len());
    let mut preds = Vec::with_capacity(clips.len());
    for clip in clips {
        let probs = predict(model, &clip.features, weights)?;
        let roll = postprocess(probs.view(), config, clip.features.frame_hop)?;
        preds.push(ClipPrediction {
            clip_id: clip.clip_id.clone(),
            lambda: weights.raw().to_vec(),
            events: extract_events(&roll),
        });
        rolls.push(roll);
    }
    Ok((rolls, preds))
}

/// Detects and scores a labelled set under one priority vector.
pub fn evaluate_model(
    model: &TriageModel,
    clips: &[LabeledClip],
    weights: &TriageWeights,
    config: &PostprocessConfig,
    class_names: &[String],
    intersection: &IntersectionConfig,
) -> Result<(MetricsReport, Vec<ClipPrediction>)> {
    let (rolls, preds) = detect(model, clips, weights, config)?;
    let refs: Vec<EventRoll> = clips.iter().map(|c| c.roll.clone()).collect();
    let pred_events: Vec<Vec<EventInstance>> = preds.iter().map(|p| p.events.clone()).collect();
    let ref_events: Vec<Vec<EventInstance>> = clips.iter().map(|c| c.events.clone()).collect();
    let report = metrics::evaluate(&rolls, &refs, &pred_events, &ref_events, class_names, intersection)?;
    Ok((report, preds))
}
