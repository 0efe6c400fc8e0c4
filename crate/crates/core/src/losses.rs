//! Frame-wise binary cross-entropy and its two priority-weighted variants.
//!
//! All three share one form, summed over frames of a clip:
//!
//! ```text
//! per_class[n] = −Σ_t [ a_n · z log s(y) + b_n · (1 − z) log(1 − s(y)) ]
//! ```
//!
//! with `a = b = 1` for plain BCE, `a = b = N·λ` for the active-and-inactive
//! variant and `a = N·λ, b = 1` for the active-only variant.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataio::EventRoll;
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softplus};
use crate::triage::TriageWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Unweighted BCE.
    Sed,
    /// λ weights both active and inactive frames.
    SetAi,
    /// λ weights active frames only.
    SetA,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sed" => Ok(LossKind::Sed),
            "set_ai" => Ok(LossKind::SetAi),
            "set_a" => Ok(LossKind::SetA),
            other => Err(Error::Config(format!("unknown loss `{other}` (expected sed, set_ai or set_a)"))),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Sed => "sed",
            LossKind::SetAi => "set_ai",
            LossKind::SetA => "set_a",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub per_class: Array1<f64>,
}

fn check_shapes(logits: ArrayView2<'_, f64>, roll: &EventRoll, weights: Option<&TriageWeights>) -> Result<()> {
    if logits.dim() != roll.active.dim() {
        return Err(Error::shape(
            "loss logits vs roll",
            format!("{:?}", roll.active.dim()),
            format!("{:?}", logits.dim()),
        ));
    }
    if let Some(w) = weights {
        if w.n_classes() != logits.nrows() {
            return Err(Error::shape("loss triage weights", logits.nrows(), w.n_classes()));
        }
    }
    Ok(())
}

/// Per-class multipliers `(active, inactive)` for a loss kind.
fn class_factors(kind: LossKind, n_classes: usize, weights: Option<&TriageWeights>) -> (Vec<f64>, Vec<f64>) {
    let scaled = || -> Vec<f64> {
        let w = weights.expect("weighted losses need triage weights");
        w.normalized().iter().map(|l| n_classes as f64 * l).collect()
    };
    match kind {
        LossKind::Sed => (vec![1.0; n_classes], vec![1.0; n_classes]),
        LossKind::SetAi => {
            let s = scaled();
            (s.clone(), s)
        }
        LossKind::SetA => (scaled(), vec![1.0; n_classes]),
    }
}

fn weighted_bce(
    logits: ArrayView2<'_, f64>,
    roll: &EventRoll,
    active_w: &[f64],
    inactive_w: &[f64],
    want_grad: bool,
) -> (LossValue, Option<Array2<f64>>) {
    let mut per_class = Array1::zeros(logits.nrows());
    let mut grad = want_grad.then(|| Array2::zeros(logits.dim()));
    for (n, (row, act)) in logits.outer_iter().zip(roll.active.outer_iter()).enumerate() {
        let (a, b) = (active_w[n], inactive_w[n]);
        let mut acc = 0.0;
        for (t, (&y, &z)) in row.iter().zip(act.iter()).enumerate() {
            // −log s(y) = softplus(−y), −log(1 − s(y)) = softplus(y)
            if z {
                acc += a * softplus(-y);
            } else {
                acc += b * softplus(y);
            }
            if let Some(g) = grad.as_mut() {
                let s = sigmoid(y);
                g[[n, t]] = if z { a * (s - 1.0) } else { b * s };
            }
        }
        per_class[n] = acc;
    }
    (
        LossValue {
            total: per_class.sum(),
            per_class,
        },
        grad,
    )
}

/// Loss of `kind` and its gradient with respect to the logits.
pub fn loss_with_grad(
    kind: LossKind,
    logits: ArrayView2<'_, f64>,
    roll: &EventRoll,
    weights: &TriageWeights,
) -> Result<(LossValue, Array2<f64>)> {
    check_shapes(logits, roll, Some(weights))?;
    let (a, b) = class_factors(kind, logits.nrows(), Some(weights));
    let (value, grad) = weighted_bce(logits, roll, &a, &b, true);
    Ok((value, grad.expect("gradient requested")))
}

/// Loss of `kind`; `weights` is ignored for [`LossKind::Sed`].
pub fn loss(kind: LossKind, logits: ArrayView2<'_, f64>, roll: &EventRoll, weights: &TriageWeights) -> Result<LossValue> {
    check_shapes(logits, roll, Some(weights))?;
    let (a, b) = class_factors(kind, logits.nrows(), Some(weights));
    Ok(weighted_bce(logits, roll, &a, &b, false).0)
}

pub fn loss_sed(logits: ArrayView2<'_, f64>, roll: &EventRoll) -> Result<LossValue> {
    check_shapes(logits, roll, None)?;
    let (a, b) = class_factors(LossKind::Sed, logits.nrows(), None);
    Ok(weighted_bce(logits, roll, &a, &b, false).0)
}

pub fn loss_set_ai(logits: ArrayView2<'_, f64>, roll: &EventRoll, weights: &TriageWeights) -> Result<LossValue> {
    loss(LossKind::SetAi, logits, roll, weights)
}

pub fn loss_set_a(logits: ArrayView2<'_, f64>, roll: &EventRoll, weights: &TriageWeights) -> Result<LossValue> {
    loss(LossKind::SetA, logits, roll, weights)
}
