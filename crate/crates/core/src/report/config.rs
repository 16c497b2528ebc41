use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::SynthSpec;
use crate::error::{CuratorError, Result};
use crate::gating::{mix_domain_weights, GateConfig, Transform};
use crate::scoring::{Bm25Params, ScoreKind};
use crate::tinymodel::ModelConfig;
use crate::trainer::{CurationPolicy, MixingMode, OnlinePolicy, TrainConfig};

/// Exactly one corpus source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// JSONL file; relative paths resolve against the config's directory.
    Path(PathBuf),
    Synth(SynthSpec),
}

fn default_anchor_count() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchorSpec {
    /// Anchors per domain; 0 takes every validation document.
    #[serde(default = "default_anchor_count")]
    pub per_domain: usize,
    #[serde(default)]
    pub seed: u64,
    /// Restrict anchors to these validation domains; all when absent.
    #[serde(default)]
    pub domains: Option<Vec<String>>,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        AnchorSpec {
            per_domain: default_anchor_count(),
            seed: 0,
            domains: None,
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_bins() -> usize {
    crate::analysis::DEFAULT_BINS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Validation domains to evaluate on; all when absent.
    #[serde(default)]
    pub domains: Option<Vec<String>>,
    /// Leave anchor documents out of the evaluation set.
    #[serde(default = "default_true")]
    pub exclude_anchors: bool,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            domains: None,
            exclude_anchors: true,
            histogram_bins: default_bins(),
        }
    }
}

fn default_transform() -> Transform {
    Transform::Given
}

/// The `policy` block, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyConfig {
    Online(OnlinePolicy),
    Selection {
        scorer: ScoreKind,
        threshold: f64,
        #[serde(default)]
        bm25: Bm25Params,
    },
    Mixing {
        /// Domain weights, or domain scores under a non-`given` transform.
        weights: BTreeMap<String, f64>,
        #[serde(default)]
        mode: MixingMode,
        #[serde(default = "default_transform")]
        transform: Transform,
    },
    Linupper {
        alpha: f64,
    },
    Uniform,
}

impl PolicyConfig {
    /// The trainer policy; mixing weights are normalized here.
    pub fn to_policy(&self) -> Result<CurationPolicy> {
        Ok(match self {
            PolicyConfig::Online(p) => CurationPolicy::Online(p.clone()),
            PolicyConfig::Selection { scorer, threshold, .. } => CurationPolicy::Selection {
                scorer: *scorer,
                threshold: *threshold,
            },
            PolicyConfig::Mixing { weights, mode, transform } => CurationPolicy::Mixing {
                weights: mix_domain_weights(weights, *transform)
                    .map_err(|e| CuratorError::config("policy.weights", e.to_string()))?,
                mode: *mode,
            },
            PolicyConfig::Linupper { alpha } => CurationPolicy::LinUpper { alpha: *alpha },
            PolicyConfig::Uniform => CurationPolicy::Uniform,
        })
    }

    /// The gate that produces weights, with standardization resolved.
    pub fn resolved_gate(&self) -> Option<GateConfig> {
        match self {
            PolicyConfig::Online(p) => Some(GateConfig {
                standardize: Some(p.gate.standardize_or_default(p.scorer)),
                ..p.gate
            }),
            _ => None,
        }
    }

    pub fn scorer(&self) -> Option<ScoreKind> {
        match self {
            PolicyConfig::Online(p) => Some(p.scorer),
            PolicyConfig::Selection { scorer, .. } => Some(*scorer),
            _ => None,
        }
    }
}

fn default_output() -> PathBuf {
    PathBuf::from("run")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    #[serde(default)]
    pub anchors: AnchorSpec,
    #[serde(default)]
    pub model: ModelConfig,
    /// Model initialization seed; `train.seed` when absent.
    #[serde(default)]
    pub init_seed: Option<u64>,
    pub train: TrainConfig,
    pub policy: PolicyConfig,
    #[serde(default)]
    pub eval: EvalSpec,
    /// Artifact directory; relative paths resolve against the config's
    /// directory.
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

impl ExperimentConfig {
    pub fn init_seed(&self) -> u64 {
        self.init_seed.unwrap_or(self.train.seed)
    }

    /// Checks every constraint and materializes defaults.
    pub fn resolve(mut self, base_dir: &Path) -> Result<Self> {
        self.model.validate()?;
        self.train.validate()?;
        if let PolicyConfig::Online(p) = &mut self.policy {
            p.validate()?;
            p.gate.standardize = Some(p.gate.standardize_or_default(p.scorer));
        }
        self.policy.to_policy()?.validate()?;
        if let PolicyConfig::Selection { scorer, .. } = &self.policy {
            if *scorer == ScoreKind::Linupper {
                return Err(CuratorError::config("policy.scorer", "linupper is not an offline score"));
            }
        }
        if self.eval.histogram_bins < 2 {
            return Err(CuratorError::config("eval.histogram_bins", "must be at least 2"));
        }
        match &mut self.corpus {
            CorpusSource::Path(p) => {
                if p.is_relative() {
                    *p = base_dir.join(&*p);
                }
                if !p.is_file() {
                    return Err(CuratorError::config("corpus.path", format!("{} does not exist", p.display())));
                }
            }
            CorpusSource::Synth(s) => {
                if s.n_per_domain == 0 || s.seq_len < 2 {
                    return Err(CuratorError::config(
                        "corpus.synth",
                        "need n_per_domain >= 1 and seq_len >= 2",
                    ));
                }
            }
        }
        if self.output.is_relative() {
            self.output = base_dir.join(&self.output);
        }
        Ok(self)
    }
}

/// Strict JSON parsing with the failing path in the error.
pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CuratorError::config(if path == "." { "<root>".into() } else { path }, e.inner().to_string())
    })?;
    cfg.resolve(base_dir)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| CuratorError::config(path.display().to_string(), format!("cannot read: {e}")))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "corpus": {"synth": {"n_per_domain": 10, "seq_len": 16, "seed": 1}},
        "train": {"lr": 0.1, "steps": 5},
        "policy": {"kind": "online", "scorer": "adapt_embed"}
    }"#;

    #[test]
    fn minimal_config_resolves_defaults() {
        let cfg = parse_config_str(MINIMAL, Path::new("/tmp")).unwrap();
        let gate = cfg.policy.resolved_gate().unwrap();
        assert_eq!(gate.temperature, 1.0);
        assert_eq!(gate.epsilon, 1e-8);
        match &cfg.policy {
            PolicyConfig::Online(p) => {
                assert_eq!(p.refresh, 100);
                assert_eq!(p.bm25, Bm25Params { k1: 1.2, b: 0.75 });
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.output, PathBuf::from("/tmp/run"));
        let echoed = serde_json::to_string(&cfg).unwrap();
        assert!(echoed.contains("\"temperature\":1.0"));
    }

    #[test]
    fn round_trip() {
        let cfg = parse_config_str(MINIMAL, Path::new("/tmp")).unwrap();
        let again = parse_config_str(&serde_json::to_string_pretty(&cfg).unwrap(), Path::new("/elsewhere")).unwrap();
        assert_eq!(cfg, again);
    }

    #[test]
    fn unknown_key_is_named() {
        let text = MINIMAL.replace(r#""scorer": "adapt_embed""#, r#""scorer": "adapt_embed", "gate": {"taw": 0.5}"#);
        let err = parse_config_str(&text, Path::new("/tmp")).unwrap_err();
        assert!(err.is_config_error());
        assert!(err.to_string().contains("taw"), "{err}");
        let text = MINIMAL.replace(r#""steps": 5"#, r#""steps": 5, "lrr": 1"#);
        let err = parse_config_str(&text, Path::new("/tmp")).unwrap_err();
        assert!(err.to_string().contains("train") && err.to_string().contains("lrr"), "{err}");
    }

    #[test]
    fn constraint_errors() {
        let text = MINIMAL.replace(r#""scorer": "adapt_embed""#, r#""scorer": "adapt_embed", "refresh": 0"#);
        let err = parse_config_str(&text, Path::new("/tmp")).unwrap_err();
        assert!(err.to_string().contains("refresh"), "{err}");
        let text = MINIMAL.replace(r#""lr": 0.1"#, r#""lr": -1"#);
        assert!(parse_config_str(&text, Path::new("/tmp")).unwrap_err().is_config_error());
        let text = MINIMAL.replace(r#""steps": 5"#, r#""steps": "five""#);
        let err = parse_config_str(&text, Path::new("/tmp")).unwrap_err();
        assert!(err.to_string().contains("train.steps"), "{err}");
        let text = MINIMAL.replace(
            r#"{"synth": {"n_per_domain": 10, "seq_len": 16, "seed": 1}}"#,
            r#"{"path": "missing.jsonl"}"#,
        );
        assert!(parse_config_str(&text, Path::new("/nonexistent")).unwrap_err().is_config_error());
    }

    #[test]
    fn other_policies_parse() {
        for policy in [
            r#"{"kind": "uniform"}"#,
            r#"{"kind": "linupper", "alpha": 2.0}"#,
            r#"{"kind": "selection", "scorer": "ppl", "threshold": -3.5}"#,
            r#"{"kind": "mixing", "weights": {"A": 3, "B": 1}, "mode": "quota"}"#,
        ] {
            let text = MINIMAL.replace(r#"{"kind": "online", "scorer": "adapt_embed"}"#, policy);
            let cfg = parse_config_str(&text, Path::new("/tmp")).unwrap();
            assert!(cfg.policy.resolved_gate().is_none());
            cfg.policy.to_policy().unwrap();
        }
        let text = MINIMAL.replace(r#"{"kind": "online", "scorer": "adapt_embed"}"#, r#"{"kind": "linupper", "alpha": 0}"#);
        assert!(parse_config_str(&text, Path::new("/tmp")).is_err());
    }
}
