//! Per-class priority ("triage") weight vectors.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Open01};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-9;

/// A class-priority vector kept in both raw and normalized (sum-to-one) form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights", into = "RawWeights")]
pub struct TriageWeights {
    raw: Vec<f64>,
    normalized: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawWeights {
    raw: Vec<f64>,
}

impl TryFrom<RawWeights> for TriageWeights {
    type Error = Error;

    fn try_from(value: RawWeights) -> Result<Self> {
        TriageWeights::from_raw(value.raw)
    }
}

impl From<TriageWeights> for RawWeights {
    fn from(value: TriageWeights) -> Self {
        RawWeights { raw: value.raw }
    }
}

impl TriageWeights {
    /// Normalizes nonnegative raw priorities; at least one must be positive.
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Weights("weight vector is empty".into()));
        }
        if let Some(bad) = raw.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
            return Err(Error::Weights(format!("weight {bad} is not a finite nonnegative number")));
        }
        let total: f64 = raw.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Weights("at least one weight must be positive".into()));
        }
        let normalized = raw.iter().map(|w| w / total).collect();
        Ok(Self { raw, normalized })
    }

    pub fn uniform(n_classes: usize) -> Self {
        Self::from_raw(vec![1.0; n_classes.max(1)]).expect("uniform weights are valid")
    }

    /// Wraps a point of the probability simplex; raw and normalized coincide.
    fn from_simplex(normalized: Vec<f64>) -> Self {
        debug_assert!((normalized.iter().sum::<f64>() - 1.0).abs() <= SUM_TOLERANCE);
        Self {
            raw: normalized.clone(),
            normalized,
        }
    }

    pub fn raw(&self) -> &[f64] {
        &self.raw
    }

    pub fn normalized(&self) -> &[f64] {
        &self.normalized
    }

    pub fn n_classes(&self) -> usize {
        self.raw.len()
    }

    pub fn is_uniform(&self) -> bool {
        self.raw.windows(2).all(|w| w[0] == w[1])
    }
}

/// Shape parameters of the Dirichlet distribution λ is drawn from in training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletConfig {
    pub alpha: Vec<f64>,
}

impl DirichletConfig {
    pub fn symmetric(alpha: f64, k: usize) -> Self {
        Self { alpha: vec![alpha; k] }
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_empty() {
            return Err(Error::Config("Dirichlet needs at least one component".into()));
        }
        if let Some(a) = self.alpha.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::Config(format!("Dirichlet alpha {a} must be positive")));
        }
        Ok(())
    }
}

/// Log of a Gamma(shape, 1) variate. Shapes below one use the boost
/// `G(a) = G(a + 1) · U^(1/a)` in log space, so tiny variates never underflow.
fn log_gamma_variate<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> f64 {
    if shape >= 1.0 {
        let g: f64 = Gamma::new(shape, 1.0).expect("valid shape").sample(rng);
        g.ln()
    } else {
        let g: f64 = Gamma::new(shape + 1.0, 1.0).expect("valid shape").sample(rng);
        let u: f64 = rng.sample(Open01);
        g.ln() + u.ln() / shape
    }
}

/// Draws λ ~ Dirichlet(alpha) by normalizing independent gamma variates.
pub fn sample_triage<R: Rng + ?Sized>(config: &DirichletConfig, rng: &mut R) -> Result<TriageWeights> {
    config.validate()?;
    let logs: Vec<f64> = config.alpha.iter().map(|&a| log_gamma_variate(a, rng)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(TriageWeights::from_simplex(exps.into_iter().map(|e| e / total).collect()))
}

/// Evaluation-time priorities: every class gets raw weight 1 except `target`.
pub fn make_inference_weights(target: usize, target_weight: f64, n_classes: usize) -> Result<TriageWeights> {
    if target >= n_classes {
        return Err(Error::ClassOutOfRange {
            index: target,
            n_classes,
        });
    }
    if !(target_weight.is_finite() && target_weight > 0.0) {
        return Err(Error::Weights(format!("target weight {target_weight} must be positive")));
    }
    let mut raw = vec![1.0; n_classes];
    raw[target] = target_weight;
    TriageWeights::from_raw(raw)
}

/// Conditioner input: `N · λ`, so uniform priorities map to all ones.
pub fn scale_for_conditioning(weights: &TriageWeights) -> Vec<f64> {
    let n = weights.n_classes() as f64;
    weights.normalized().iter().map(|w| n * w).collect()
}

/// Source of per-batch priority vectors during training.
pub trait TriageSampler {
    fn sample(&mut self) -> Result<TriageWeights>;
}

/// Dirichlet sampler owning its random stream.
#[derive(Debug, Clone)]
pub struct DirichletSampler<R> {
    config: DirichletConfig,
    rng: R,
}

impl<R: Rng> DirichletSampler<R> {
    pub fn new(config: DirichletConfig, rng: R) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, rng })
    }
}

impl<R: Rng> TriageSampler for DirichletSampler<R> {
    fn sample(&mut self) -> Result<TriageWeights> {
        sample_triage(&self.config, &mut self.rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn target_weight_inference_vector() {
        let w = make_inference_weights(0, 5.0, 10).unwrap();
        assert_relative_eq!(w.normalized()[0], 5.0 / 14.0, epsilon = 1e-15);
        for v in &w.normalized()[1..] {
            assert_relative_eq!(*v, 1.0 / 14.0, epsilon = 1e-15);
        }
        assert_eq!(w.raw()[0], 5.0);
    }

    #[test]
    fn unit_target_weight_is_uniform() {
        let w = make_inference_weights(4, 1.0, 10).unwrap();
        assert!(w.normalized().iter().all(|&v| v == 0.1));
        assert!(w.is_uniform());
    }

    #[test]
    fn heavy_target_weight() {
        let w = make_inference_weights(3, 20.0, 10).unwrap();
        let oracle_total: f64 = (0..10).map(|i| if i == 3 { 20.0 } else { 1.0 }).sum();
        assert_eq!(oracle_total, 29.0);
        assert_relative_eq!(w.normalized()[3], 20.0 / oracle_total, epsilon = 1e-15);
        let argmax = (0..10).max_by(|&a, &b| w.normalized()[a].total_cmp(&w.normalized()[b])).unwrap();
        assert_eq!(argmax, 3);
    }

    #[test]
    fn inference_weight_errors() {
        assert!(matches!(
            make_inference_weights(10, 2.0, 10),
            Err(Error::ClassOutOfRange { index: 10, n_classes: 10 })
        ));
        assert!(make_inference_weights(0, 0.0, 10).is_err());
        assert!(make_inference_weights(0, f64::NAN, 10).is_err());
    }

    #[test]
    fn conditioning_scale() {
        assert_eq!(scale_for_conditioning(&TriageWeights::uniform(10)), vec![1.0; 10]);
        let w = make_inference_weights(0, 5.0, 10).unwrap();
        let s = scale_for_conditioning(&w);
        assert_relative_eq!(s[0], 50.0 / 14.0, epsilon = 1e-12);
        assert_relative_eq!(s[7], 10.0 / 14.0, epsilon = 1e-12);
        assert_eq!(scale_for_conditioning(&TriageWeights::uniform(1)), vec![1.0]);
    }

    #[test]
    fn raw_vector_validation() {
        assert!(TriageWeights::from_raw(vec![]).is_err());
        assert!(TriageWeights::from_raw(vec![0.0, 0.0]).is_err());
        assert!(TriageWeights::from_raw(vec![1.0, -1.0]).is_err());
        let w = TriageWeights::from_raw(vec![0.0, 3.0]).unwrap();
        assert_eq!(w.normalized(), &[0.0, 1.0]);
    }

    #[test]
    fn serde_keeps_raw_only() {
        let w = make_inference_weights(1, 4.0, 3).unwrap();
        let text = serde_json::to_string(&w).unwrap();
        assert_eq!(text, r#"{"raw":[1.0,4.0,1.0]}"#);
        let back: TriageWeights = serde_json::from_str(&text).unwrap();
        assert_eq!(back, w);
        assert!(serde_json::from_str::<TriageWeights>(r#"{"raw":[0.0]}"#).is_err());
    }

    #[test]
    fn nonpositive_alpha_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_triage(&DirichletConfig { alpha: vec![0.1, 0.0] }, &mut rng).is_err());
        assert!(sample_triage(&DirichletConfig { alpha: vec![] }, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = DirichletConfig::symmetric(0.1, 10);
        let a = sample_triage(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_triage(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tiny_alpha_never_degenerates() {
        let cfg = DirichletConfig::symmetric(1e-3, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let w = sample_triage(&cfg, &mut rng).unwrap();
            let s: f64 = w.normalized().iter().sum();
            assert!((s - 1.0).abs() <= SUM_TOLERANCE);
            assert!(w.normalized().iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn symmetric_marginals_are_exchangeable() {
        let cfg = DirichletConfig::symmetric(0.5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let draws = 40_000;
        let mut m1 = [0.0; 4];
        let mut m2 = [0.0; 4];
        for _ in 0..draws {
            let w = sample_triage(&cfg, &mut rng).unwrap();
            for (k, v) in w.normalized().iter().enumerate() {
                m1[k] += v / draws as f64;
                m2[k] += v * v / draws as f64;
            }
        }
        // E[x] = 1/4, E[x^2] = a(a+1)/(A(A+1)) with a = 0.5, A = 2
        for k in 0..4 {
            assert!((m1[k] - 0.25).abs() < 0.005, "{m1:?}");
            assert!((m2[k] - 0.125).abs() < 0.005, "{m2:?}");
        }
    }

    proptest! {
        #[test]
        fn constructed_weights_stay_on_simplex(target in 0usize..12, extra in 0usize..12, w in 0.01f64..100.0) {
            let n = target + 1 + extra;
            let tw = make_inference_weights(target, w, n).unwrap();
            let sum: f64 = tw.normalized().iter().sum();
            prop_assert!((sum - 1.0).abs() <= SUM_TOLERANCE);
            prop_assert!(tw.normalized().iter().all(|v| *v >= 0.0));
            if w > 1.0 {
                let argmax = (0..n).max_by(|&a, &b| tw.normalized()[a].total_cmp(&tw.normalized()[b])).unwrap();
                prop_assert_eq!(argmax, target);
            }
        }

        #[test]
        fn sampled_weights_stay_on_simplex(seed in any::<u64>(), alpha in 0.01f64..5.0, k in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = sample_triage(&DirichletConfig::symmetric(alpha, k), &mut rng).unwrap();
            let sum: f64 = w.normalized().iter().sum();
            prop_assert!((sum - 1.0).abs() <= SUM_TOLERANCE);
            prop_assert!(w.normalized().iter().all(|v| *v >= 0.0));
            prop_assert_eq!(w.raw(), w.normalized());
        }
    }
}
