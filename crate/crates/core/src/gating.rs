//! Turning quality scores into per-sample weights, binary selections and
//! domain mixtures.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CuratorError, Result};
use crate::scoring::ScoreKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Standardize {
    None,
    /// Map to `[0, 1]` by the observed min and max.
    Minmax,
    /// Subtract the mean, divide by the population standard deviation.
    Zscore,
}

impl Standardize {
    /// Default per score kind: BM25 is unbounded and non-negative, so it is
    /// min-max scaled; everything else is gated raw.
    pub fn default_for(kind: ScoreKind) -> Self {
        match kind {
            ScoreKind::Bm25 => Standardize::Minmax,
            _ => Standardize::None,
        }
    }

    /// Applies the transform over the given vector. Constant vectors map to
    /// all zeros under both scalings.
    pub fn apply(self, scores: &[f64]) -> Vec<f64> {
        match self {
            Standardize::None => scores.to_vec(),
            Standardize::Minmax => {
                let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let span = hi - lo;
                scores
                    .iter()
                    .map(|s| if span > 0.0 { (s - lo) / span } else { 0.0 })
                    .collect()
            }
            Standardize::Zscore => {
                let n = scores.len().max(1) as f64;
                let mean = scores.iter().sum::<f64>() / n;
                let sd = (scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n).sqrt();
                scores
                    .iter()
                    .map(|s| if sd > 0.0 { (s - mean) / sd } else { 0.0 })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    GlobalSigmoid,
    BatchSoftmax,
}

fn default_temperature() -> f64 {
    1.0
}

fn default_epsilon() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// `[lo, hi]`; off when absent.
    #[serde(default)]
    pub clip: Option<[f64; 2]>,
    /// Resolved from the scorer kind when absent.
    #[serde(default)]
    pub standardize: Option<Standardize>,
    #[serde(default)]
    pub mode: GateMode,
}

impl Default for GateConfig {
    fn default() -> Self {
        GateConfig {
            temperature: 1.0,
            epsilon: 1e-8,
            clip: None,
            standardize: None,
            mode: GateMode::GlobalSigmoid,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(CuratorError::config("gate.temperature", "must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(CuratorError::config("gate.epsilon", "must be positive"));
        }
        if let Some([lo, hi]) = self.clip {
            if !(lo >= 0.0 && lo <= hi) {
                return Err(CuratorError::config("gate.clip", "need 0 <= lo <= hi"));
            }
        }
        Ok(())
    }

    pub fn standardize_or_default(&self, kind: ScoreKind) -> Standardize {
        self.standardize.unwrap_or_else(|| Standardize::default_for(kind))
    }

    /// Gate a batch of scores according to `mode`, then clip if configured.
    pub fn apply(&self, scores: &[f64]) -> WeightVector {
        let w = match self.mode {
            GateMode::GlobalSigmoid => gate_sigmoid(scores, self),
            GateMode::BatchSoftmax => {
                let mut w = gate_batch_softmax(scores);
                w.gate = Some(*self);
                w
            }
        };
        match self.clip {
            Some([lo, hi]) => clip_weights(&w, lo, hi),
            None => w,
        }
    }
}

/// Per-sample weights with the gate that produced them, when any.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    pub weights: Vec<f64>,
    pub gate: Option<GateConfig>,
}

impl WeightVector {
    pub fn ungated(weights: Vec<f64>) -> Self {
        WeightVector { weights, gate: None }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `w_i = σ(s'_i / max(τ, ε))` where `s'` is the standardized score. With
/// `standardize = none` each weight depends on its own score only.
pub fn gate_sigmoid(scores: &[f64], cfg: &GateConfig) -> WeightVector {
    let standardized = cfg.standardize.unwrap_or(Standardize::None).apply(scores);
    let t = cfg.temperature.max(cfg.epsilon);
    WeightVector {
        weights: standardized.iter().map(|s| sigmoid(s / t)).collect(),
        gate: Some(*cfg),
    }
}

/// Softmax over the batch with max subtraction.
pub fn gate_batch_softmax(scores: &[f64]) -> WeightVector {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    WeightVector::ungated(exps.iter().map(|e| e / sum).collect())
}

pub fn clip_weights(w: &WeightVector, lo: f64, hi: f64) -> WeightVector {
    WeightVector {
        weights: w.weights.iter().map(|x| x.max(lo).min(hi)).collect(),
        gate: w.gate,
    }
}

/// `1[s ≥ threshold]`.
pub fn select_binary(scores: &[f64], threshold: f64) -> WeightVector {
    WeightVector::ungated(
        scores
            .iter()
            .map(|&s| if s >= threshold { 1.0 } else { 0.0 })
            .collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Exp,
    /// Identity, only for non-negative scores.
    Identity,
    /// Weights supplied directly as configuration and normalized.
    Given,
}

/// Normalized per-domain sampling weights, keyed by domain name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainWeights {
    pub weights: BTreeMap<String, f64>,
    pub transform: Transform,
}

impl DomainWeights {
    /// Normalizes externally supplied weights.
    pub fn given(raw: &BTreeMap<String, f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(CuratorError::InvalidArgument("no domains".into()));
        }
        if raw.values().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(CuratorError::InvalidArgument("domain weights must be finite and non-negative".into()));
        }
        let total: f64 = raw.values().sum();
        if total <= 0.0 {
            return Err(CuratorError::InvalidArgument("domain weights sum to zero".into()));
        }
        Ok(DomainWeights {
            weights: raw.iter().map(|(k, v)| (k.clone(), v / total)).collect(),
            transform: Transform::Given,
        })
    }

    pub fn get(&self, domain: &str) -> f64 {
        self.weights.get(domain).copied().unwrap_or(0.0)
    }
}

/// `w_d = g(s_d) / Σ_{d'} g(s_{d'})`.
pub fn mix_domain_weights(domain_scores: &BTreeMap<String, f64>, g: Transform) -> Result<DomainWeights> {
    if domain_scores.is_empty() {
        return Err(CuratorError::InvalidArgument("no domains".into()));
    }
    let transformed: BTreeMap<String, f64> = match g {
        Transform::Exp => {
            let max = domain_scores.values().cloned().fold(f64::NEG_INFINITY, f64::max);
            domain_scores.iter().map(|(k, s)| (k.clone(), (s - max).exp())).collect()
        }
        Transform::Identity | Transform::Given => {
            if let Some((d, s)) = domain_scores.iter().find(|(_, s)| **s < 0.0) {
                return Err(CuratorError::InvalidArgument(format!(
                    "identity transform needs non-negative scores; domain {d:?} has {s}"
                )));
            }
            domain_scores.clone()
        }
    };
    let mut out = DomainWeights::given(&transformed)?;
    out.transform = g;
    Ok(out)
}

/// Largest-remainder rounding of `w_d · budget`. Remainder ties go to the
/// lexicographically smaller domain name.
pub fn quota_allocate(weights: &DomainWeights, budget: u64) -> BTreeMap<String, u64> {
    let mut quotas = BTreeMap::new();
    let mut rems = Vec::with_capacity(weights.weights.len());
    let mut assigned = 0u64;
    for (domain, w) in &weights.weights {
        let exact = w * budget as f64;
        let base = (exact.floor() as u64).min(budget);
        assigned += base;
        quotas.insert(domain.clone(), base);
        rems.push((exact - base as f64, domain.clone()));
    }
    // float error can push the floors a unit over budget
    while assigned > budget {
        let (_, d) = rems
            .iter()
            .filter(|(_, d)| quotas[d] > 0)
            .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| b.1.cmp(&a.1)))
            .expect("some quota positive");
        *quotas.get_mut(d).unwrap() -= 1;
        assigned -= 1;
    }
    rems.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    let short = (budget - assigned) as usize;
    for (_, d) in rems.iter().cycle().take(short) {
        *quotas.get_mut(d).unwrap() += 1;
    }
    quotas
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(t: f64) -> GateConfig {
        GateConfig { temperature: t, ..GateConfig::default() }
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(gate_sigmoid(&[0.0], &cfg(1.0)).weights, vec![0.5]);
        assert!((gate_sigmoid(&[1.0], &cfg(1.0)).weights[0] - 0.731_058_578_630_005).abs() < 1e-12);
        let w = gate_sigmoid(&[0.5], &cfg(1e-12)).weights[0];
        assert!((w - 1.0).abs() < 1e-12);
        // below epsilon the floor takes over
        let w = gate_sigmoid(&[1e-8], &cfg(1e-20)).weights[0];
        assert!((w - 0.731_058_578_630_005).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let w = gate_batch_softmax(&[0.3; 4]).weights;
        assert!(w.iter().all(|x| (x - 0.25).abs() < 1e-15));
        let w = gate_batch_softmax(&[2f64.ln(), 0.0]).weights;
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
        let shifted = gate_batch_softmax(&[2f64.ln() + 50.0, 50.0]).weights;
        assert!((w[0] - shifted[0]).abs() < 1e-12);
    }

    #[test]
    fn clip_examples() {
        let w = WeightVector::ungated(vec![0.2, 0.7]);
        assert_eq!(clip_weights(&w, 0.1, 0.9).weights, vec![0.2, 0.7]);
        assert_eq!(clip_weights(&WeightVector::ungated(vec![5.0]), 0.0, 1.0).weights, vec![1.0]);
        assert_eq!(clip_weights(&w, 0.4, 0.4).weights, vec![0.4, 0.4]);
    }

    #[test]
    fn binary_examples() {
        assert_eq!(select_binary(&[0.9, 0.1], 0.5).weights, vec![1.0, 0.0]);
        assert_eq!(select_binary(&[0.5], 0.5).weights, vec![1.0]);
        assert_eq!(select_binary(&[0.3, -2.0], -3.0).weights, vec![1.0, 1.0]);
    }

    #[test]
    fn mixing_examples() {
        let m = |pairs: &[(&str, f64)]| pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        let w = mix_domain_weights(&m(&[("A", 0.7), ("B", 0.7)]), Transform::Exp).unwrap();
        assert_eq!(w.get("A"), 0.5);
        let w = mix_domain_weights(&m(&[("A", 2f64.ln()), ("B", 0.0)]), Transform::Exp).unwrap();
        assert!((w.get("A") - 2.0 / 3.0).abs() < 1e-15 && (w.get("B") - 1.0 / 3.0).abs() < 1e-15);
        let w = mix_domain_weights(&m(&[("only", -4.0)]), Transform::Exp).unwrap();
        assert_eq!(w.get("only"), 1.0);
        assert!(mix_domain_weights(&m(&[("A", -1.0), ("B", 1.0)]), Transform::Identity).is_err());
        let w = mix_domain_weights(&m(&[("A", 3.0), ("B", 1.0)]), Transform::Identity).unwrap();
        assert_eq!(w.get("A"), 0.75);
    }

    #[test]
    fn quota_examples() {
        let even = DomainWeights::given(&[("A".into(), 1.0), ("B".into(), 1.0)].into()).unwrap();
        assert_eq!(quota_allocate(&even, 10).values().copied().collect::<Vec<_>>(), [5, 5]);
        assert!(quota_allocate(&even, 0).values().all(|&q| q == 0));
        let thirds = DomainWeights::given(
            &[("A".into(), 1.0), ("B".into(), 1.0), ("C".into(), 1.0)].into(),
        )
        .unwrap();
        assert_eq!(quota_allocate(&thirds, 10).values().copied().collect::<Vec<_>>(), [4, 3, 3]);
        let skew = DomainWeights::given(&[("A".into(), 0.75), ("B".into(), 0.25)].into()).unwrap();
        assert_eq!(quota_allocate(&skew, 10_000).values().copied().collect::<Vec<_>>(), [7500, 2500]);
    }

    #[test]
    fn standardize_modes() {
        assert_eq!(Standardize::Minmax.apply(&[1.0, 3.0, 2.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(Standardize::Minmax.apply(&[2.0, 2.0]), vec![0.0, 0.0]);
        let z = Standardize::Zscore.apply(&[1.0, 3.0]);
        assert_eq!(z, vec![-1.0, 1.0]);
        assert_eq!(Standardize::default_for(ScoreKind::Bm25), Standardize::Minmax);
        assert_eq!(Standardize::default_for(ScoreKind::AdaptEmbed), Standardize::None);
    }

    proptest! {
        #[test]
        fn sigmoid_monotone(a in -50.0f64..50.0, b in -50.0f64..50.0, t in 0.05f64..10.0) {
            prop_assume!(a != b);
            let w = gate_sigmoid(&[a, b], &cfg(t)).weights;
            prop_assume!((a - b).abs() / t > 1e-9);
            if a > b { prop_assert!(w[0] >= w[1]); } else { prop_assert!(w[0] <= w[1]); }
        }

        #[test]
        fn temperature_contracts(s in -5.0f64..5.0, t1 in 0.01f64..10.0, dt in 0.0f64..10.0) {
            let w1 = gate_sigmoid(&[s], &cfg(t1)).weights[0];
            let w2 = gate_sigmoid(&[s], &cfg(t1 + dt)).weights[0];
            prop_assert!((w2 - 0.5).abs() <= (w1 - 0.5).abs());
        }

        #[test]
        fn quota_conserves_budget(raw in prop::collection::vec(0.0f64..1.0, 1..8), budget in 0u64..100_000) {
            prop_assume!(raw.iter().sum::<f64>() > 0.0);
            let map = raw.iter().enumerate().map(|(i, w)| (format!("d{i}"), *w)).collect();
            let w = DomainWeights::given(&map).unwrap();
            prop_assert!((w.weights.values().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert_eq!(quota_allocate(&w, budget).values().sum::<u64>(), budget);
        }
    }
}
