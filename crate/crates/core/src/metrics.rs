//! Frame-based F-score, frame insertion/deletion rates and intersection-based
//! F-score with detection-tolerance (DTC) and ground-truth-intersection (GTC)
//! criteria.

use serde::{Deserialize, Serialize};

use crate::dataio::{EventInstance, EventRoll};
use crate::error::{Error, Result};

/// Per-class confusion counts accumulated over every frame of every clip.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub tn: Vec<u64>,
    /// Reference-active frames per class.
    pub active: Vec<u64>,
    pub insertions: Vec<u64>,
    pub deletions: Vec<u64>,
}

/// Per-class scores and their unweighted mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub per_class: Vec<f64>,
    pub macro_average: f64,
}

impl ClassScores {
    fn from_per_class(per_class: Vec<f64>) -> Self {
        let macro_average = if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().sum::<f64>() / per_class.len() as f64
        };
        Self {
            per_class,
            macro_average,
        }
    }
}

/// Insertion and deletion rates; `None` where a class has no active
/// reference frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRates {
    pub insertion: Vec<Option<f64>>,
    pub deletion: Vec<Option<f64>>,
    pub macro_insertion: Option<f64>,
    pub macro_deletion: Option<f64>,
}

fn f_score(tp: u64, fp: u64, fn_: u64) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

fn defined_mean(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

pub fn frame_counts(pred: &[EventRoll], reference: &[EventRoll]) -> Result<FrameCounts> {
    if pred.len() != reference.len() {
        return Err(Error::shape("frame metrics clip count", reference.len(), pred.len()));
    }
    let n_classes = reference.first().map_or(0, |r| r.n_classes());
    let zeros = vec![0u64; n_classes];
    let mut c = FrameCounts {
        tp: zeros.clone(),
        fp: zeros.clone(),
        fn_: zeros.clone(),
        tn: zeros.clone(),
        active: zeros.clone(),
        insertions: zeros.clone(),
        deletions: zeros,
    };
    for (p, r) in pred.iter().zip(reference) {
        if p.active.dim() != r.active.dim() || r.n_classes() != n_classes {
            return Err(Error::shape(
                "frame metrics roll",
                format!("{:?}", r.active.dim()),
                format!("{:?}", p.active.dim()),
            ));
        }
        for n in 0..n_classes {
            for (&est, &truth) in p.active.row(n).iter().zip(r.active.row(n)) {
                let fp = u64::from(est && !truth);
                let fn_ = u64::from(!est && truth);
                c.tp[n] += u64::from(est && truth);
                c.fp[n] += fp;
                c.fn_[n] += fn_;
                c.tn[n] += u64::from(!est && !truth);
                c.active[n] += u64::from(truth);
                c.insertions[n] += fp.saturating_sub(fn_);
                c.deletions[n] += fn_.saturating_sub(fp);
            }
        }
    }
    Ok(c)
}

/// Frame-level F1 per class over all clips, plus the macro average.
pub fn frame_f1(pred: &[EventRoll], reference: &[EventRoll]) -> Result<ClassScores> {
    let c = frame_counts(pred, reference)?;
    Ok(scores_from_counts(&c))
}

pub fn scores_from_counts(c: &FrameCounts) -> ClassScores {
    ClassScores::from_per_class(
        (0..c.tp.len())
            .map(|n| f_score(c.tp[n], c.fp[n], c.fn_[n]))
            .collect(),
    )
}

pub fn insertion_deletion(pred: &[EventRoll], reference: &[EventRoll]) -> Result<ErrorRates> {
    let c = frame_counts(pred, reference)?;
    Ok(rates_from_counts(&c))
}

pub fn rates_from_counts(c: &FrameCounts) -> ErrorRates {
    let rate = |num: &[u64]| -> Vec<Option<f64>> {
        num.iter()
            .zip(&c.active)
            .map(|(&x, &a)| (a > 0).then(|| x as f64 / a as f64))
            .collect()
    };
    let insertion = rate(&c.insertions);
    let deletion = rate(&c.deletions);
    ErrorRates {
        macro_insertion: defined_mean(&insertion),
        macro_deletion: defined_mean(&deletion),
        insertion,
        deletion,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntersectionConfig {
    pub dtc: f64,
    pub gtc: f64,
}

impl Default for IntersectionConfig {
    fn default() -> Self {
        Self { dtc: 0.5, gtc: 0.5 }
    }
}

impl IntersectionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v <= 1.0;
        if !(ok(self.dtc) && ok(self.gtc)) {
            return Err(Error::Config(format!(
                "DTC ({}) and GTC ({}) must lie in (0, 1]",
                self.dtc, self.gtc
            )));
        }
        Ok(())
    }
}

/// Slack in seconds when comparing overlaps against the DTC/GTC fractions, so
/// that boundaries landing exactly on a criterion are not lost to rounding.
const OVERLAP_EPS: f64 = 1e-9;

/// Instance-level counts for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

fn check_instances(events: &[EventInstance], n_classes: usize) -> Result<()> {
    for e in events {
        if e.class_index >= n_classes {
            return Err(Error::ClassOutOfRange {
                index: e.class_index,
                n_classes,
            });
        }
        if !(e.onset.is_finite() && e.offset.is_finite() && e.onset < e.offset) {
            return Err(Error::Config(format!(
                "malformed event instance: onset {} offset {}",
                e.onset, e.offset
            )));
        }
    }
    Ok(())
}

/// Intersection counts for one clip. A prediction is DTC-valid when the share
/// of its duration covered by same-class references reaches `dtc`; a
/// reference is detected when the share of its duration covered by DTC-valid
/// same-class predictions reaches `gtc`.
pub fn intersection_counts(
    pred: &[EventInstance],
    reference: &[EventInstance],
    n_classes: usize,
    cfg: &IntersectionConfig,
) -> Result<Vec<InstanceCounts>> {
    cfg.validate()?;
    check_instances(pred, n_classes)?;
    check_instances(reference, n_classes)?;
    let mut counts = vec![InstanceCounts::default(); n_classes];
    let valid: Vec<bool> = pred
        .iter()
        .map(|p| {
            let covered: f64 = reference
                .iter()
                .filter(|r| r.class_index == p.class_index)
                .map(|r| p.overlap(r))
                .sum();
            covered + OVERLAP_EPS >= cfg.dtc * p.duration()
        })
        .collect();
    for (p, &ok) in pred.iter().zip(&valid) {
        if !ok {
            counts[p.class_index].fp += 1;
        }
    }
    for r in reference {
        let covered: f64 = pred
            .iter()
            .zip(&valid)
            .filter(|(p, ok)| **ok && p.class_index == r.class_index)
            .map(|(p, _)| r.overlap(p))
            .sum();
        if covered + OVERLAP_EPS >= cfg.gtc * r.duration() {
            counts[r.class_index].tp += 1;
        } else {
            counts[r.class_index].fn_ += 1;
        }
    }
    Ok(counts)
}

/// Intersection-based F1 over clips given as parallel per-clip event lists.
pub fn intersection_f1(
    pred: &[Vec<EventInstance>],
    reference: &[Vec<EventInstance>],
    n_classes: usize,
    cfg: &IntersectionConfig,
) -> Result<ClassScores> {
    let totals = intersection_totals(pred, reference, n_classes, cfg)?;
    Ok(ClassScores::from_per_class(
        totals.iter().map(|c| f_score(c.tp, c.fp, c.fn_)).collect(),
    ))
}

pub fn intersection_totals(
    pred: &[Vec<EventInstance>],
    reference: &[Vec<EventInstance>],
    n_classes: usize,
    cfg: &IntersectionConfig,
) -> Result<Vec<InstanceCounts>> {
    if pred.len() != reference.len() {
        return Err(Error::shape("intersection clip count", reference.len(), pred.len()));
    }
    let mut totals = vec![InstanceCounts::default(); n_classes];
    for (p, r) in pred.iter().zip(reference) {
        for (t, c) in totals.iter_mut().zip(intersection_counts(p, r, n_classes, cfg)?) {
            t.tp += c.tp;
            t.fp += c.fp;
            t.fn_ += c.fn_;
        }
    }
    Ok(totals)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_index: usize,
    pub name: String,
    pub frame_f: f64,
    pub intersection_f: f64,
    pub insertion_rate: Option<f64>,
    pub deletion_rate: Option<f64>,
}

/// Everything written to `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassReport>,
    pub macro_frame_f: f64,
    pub macro_intersection_f: f64,
    pub macro_insertion_rate: Option<f64>,
    pub macro_deletion_rate: Option<f64>,
}

impl MetricsReport {
    pub fn build(frame: &ClassScores, intersection: &ClassScores, rates: &ErrorRates, names: &[String]) -> Self {
        let classes = (0..frame.per_class.len())
            .map(|n| ClassReport {
                class_index: n,
                name: names.get(n).cloned().unwrap_or_else(|| format!("class_{n}")),
                frame_f: frame.per_class[n],
                intersection_f: intersection.per_class[n],
                insertion_rate: rates.insertion[n],
                deletion_rate: rates.deletion[n],
            })
            .collect();
        Self {
            classes,
            macro_frame_f: frame.macro_average,
            macro_intersection_f: intersection.macro_average,
            macro_insertion_rate: rates.macro_insertion,
            macro_deletion_rate: rates.macro_deletion,
        }
    }

    /// Tab-separated summary: a header, one row per class and a `macro` row.
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
        let mut out = String::from("class\tframe_f\tintersection_f\tinsertion_rate\tdeletion_rate\n");
        for c in &self.classes {
            out += &format!(
                "{}\t{:.6}\t{:.6}\t{}\t{}\n",
                c.name,
                c.frame_f,
                c.intersection_f,
                opt(c.insertion_rate),
                opt(c.deletion_rate)
            );
        }
        out += &format!(
            "macro\t{:.6}\t{:.6}\t{}\t{}\n",
            self.macro_frame_f,
            self.macro_intersection_f,
            opt(self.macro_insertion_rate),
            opt(self.macro_deletion_rate)
        );
        out
    }
}

/// Full report from per-clip rolls and event lists.
pub fn evaluate(
    pred_rolls: &[EventRoll],
    ref_rolls: &[EventRoll],
    pred_events: &[Vec<EventInstance>],
    ref_events: &[Vec<EventInstance>],
    class_names: &[String],
    cfg: &IntersectionConfig,
) -> Result<MetricsReport> {
    let counts = frame_counts(pred_rolls, ref_rolls)?;
    let n_classes = class_names.len().max(counts.tp.len());
    let frame = scores_from_counts(&counts);
    let rates = rates_from_counts(&counts);
    let inter = intersection_f1(pred_events, ref_events, n_classes, cfg)?;
    if frame.per_class.len() != inter.per_class.len() {
        return Err(Error::shape("report classes", inter.per_class.len(), frame.per_class.len()));
    }
    Ok(MetricsReport::build(&frame, &inter, &rates, class_names))
}
