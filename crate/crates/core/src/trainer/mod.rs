//! The training loop: every curation policy is run through one weighted
//! SGD update, `θ ← θ − η Σ_i w_i ∇ℓ_i`, with per-step telemetry.
//!
//! Online policies score each batch (or look up cached scores), gate the
//! scores into weights and update; offline selection trains on a retained
//! subset; mixing samples by domain. All weights enter the same update, so
//! a policy only decides which documents are in a batch and how much each
//! one counts.

mod sampler;
mod trace;

use std::collections::{BTreeMap, HashMap};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use sampler::{EpochSampler, Span};
pub use trace::{write_trace, TRACE_COLUMNS};

use crate::corpus::{AnchorSet, Corpus, Document};
use crate::error::{CuratorError, Result};
use crate::flops::{FlopsConstants, FlopsLedger, MetricEvent};
use crate::gating::{DomainWeights, GateConfig, Standardize, WeightVector};
use crate::scoring::{
    embed_documents, mean_cosine, refresh_anchors, score_bm25, weights_linupper, Bm25Index, Bm25Params, ScoreKind,
    ScoreVector, EMBED_EPS,
};
use crate::tinymodel::{embed_hidden, BatchPass, LossNormalization, ModelState, Sample};

fn default_batch_size() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Learning rate η of plain SGD.
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Total steps T.
    pub steps: u64,
    /// Seeds batch sampling.
    #[serde(default)]
    pub seed: u64,
    /// Validation and checkpoint cadence in steps; 0 evaluates only after
    /// the last step.
    #[serde(default)]
    pub eval_interval: u64,
    #[serde(default)]
    pub normalization: LossNormalization,
}

impl TrainConfig {
    pub fn new(lr: f64, batch_size: usize, steps: u64, seed: u64) -> Self {
        TrainConfig {
            lr,
            batch_size,
            steps,
            seed,
            eval_interval: 0,
            normalization: LossNormalization::Raw,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(CuratorError::config("train.lr", "must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(CuratorError::config("train.batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

fn default_refresh() -> u64 {
    100
}

/// Algorithm parameters of online reweighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlinePolicy {
    pub scorer: ScoreKind,
    #[serde(default)]
    pub gate: GateConfig,
    /// Anchor refresh interval R in steps.
    #[serde(default = "default_refresh")]
    pub refresh: u64,
    #[serde(default)]
    pub bm25: Bm25Params,
}

impl OnlinePolicy {
    pub fn new(scorer: ScoreKind, gate: GateConfig, refresh: u64) -> Self {
        OnlinePolicy {
            scorer,
            gate,
            refresh,
            bm25: Bm25Params::default(),
        }
    }

    /// Whether the anchor matrix is recomputed before step `t` (1-based):
    /// steps 1, R+1, 2R+1, …
    pub fn refresh_due(&self, t: u64) -> bool {
        self.refresh > 0 && (t - 1) % self.refresh == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.refresh == 0 {
            return Err(CuratorError::config("policy.refresh", "must be at least 1"));
        }
        if !matches!(self.scorer, ScoreKind::AdaptEmbed | ScoreKind::FrozenEmbed | ScoreKind::Bm25) {
            return Err(CuratorError::config(
                "policy.scorer",
                format!("online scoring supports adapt_embed, frozen_embed and bm25, not {}", self.scorer),
            ));
        }
        self.gate.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingMode {
    /// Each batch slot draws a domain, then a document uniformly within it.
    #[default]
    Probability,
    /// Fixed per-domain sample counts over the whole run.
    Quota,
}

/// How a run turns the corpus into weighted batches.
#[derive(Debug, Clone, PartialEq)]
pub enum CurationPolicy {
    Online(OnlinePolicy),
    Selection { scorer: ScoreKind, threshold: f64 },
    Mixing { weights: DomainWeights, mode: MixingMode },
    LinUpper { alpha: f64 },
    Uniform,
}

impl CurationPolicy {
    pub fn validate(&self) -> Result<()> {
        match self {
            CurationPolicy::Online(p) => p.validate(),
            CurationPolicy::Selection { threshold, .. } if threshold.is_nan() => {
                Err(CuratorError::config("policy.threshold", "must be a number"))
            }
            CurationPolicy::LinUpper { alpha } if !(*alpha > 0.0) => {
                Err(CuratorError::config("policy.alpha", "must be positive"))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            CurationPolicy::Online(p) => format!("online-{}", p.scorer),
            CurationPolicy::Selection { scorer, .. } => format!("selection-{scorer}"),
            CurationPolicy::Mixing { mode, .. } => match mode {
                MixingMode::Probability => "mixing-probability".into(),
                MixingMode::Quota => "mixing-quota".into(),
            },
            CurationPolicy::LinUpper { .. } => "linupper".into(),
            CurationPolicy::Uniform => "uniform".into(),
        }
    }
}

/// Telemetry of one update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based step.
    pub step: u64,
    /// 0-based epoch of the batch.
    pub epoch: u64,
    pub batch_ids: Vec<String>,
    /// Scores before standardization; empty for policies that do not score.
    pub raw_scores: Vec<f64>,
    pub weights: Vec<f64>,
    /// The minimized objective, `Σ c_i ℓ_i` with `c` the loss coefficients.
    pub weighted_loss: f64,
    pub val_loss: Option<f64>,
    pub val_ppl: Option<f64>,
    /// Tokens through the trained forward and backward pass.
    pub train_tokens: u64,
    /// Tokens through extra forward passes (anchor refreshes, frozen encoder).
    pub metric_tokens: u64,
    pub cum_flops: u128,
    /// Anchor embeddings were recomputed before this step.
    pub refreshed: bool,
    /// Weights clipped at the LinUpper cap.
    pub cap_hits: u32,
    /// Quota-mode samples drawn again after their domain ran out.
    pub resampled: u32,
}

impl StepRecord {
    pub fn mean_weight(&self) -> f64 {
        if self.weights.is_empty() {
            0.0
        } else {
            self.weights.iter().sum::<f64>() / self.weights.len() as f64
        }
    }

    pub fn min_weight(&self) -> f64 {
        self.weights.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `{mean loss, perplexity}` over a validation corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Token-weighted mean next-token NLL.
    pub mean_loss: f64,
    pub perplexity: f64,
    pub tokens: u64,
}

const EVAL_CHUNK: usize = 64;

/// Mean per-token NLL over every validation document with at least two
/// tokens, and its exponential.
pub fn evaluate(model: &ModelState, val: &Corpus) -> Result<EvalResult> {
    let max = model.config.max_seq_len;
    let pairs: Vec<(&[u32], &[u32])> = val.documents.iter().filter_map(|d| d.training_pair(max)).collect();
    if pairs.is_empty() {
        return Err(CuratorError::InvalidArgument(
            "validation set has no document with two or more tokens".into(),
        ));
    }
    let mut total = 0.0;
    let mut tokens = 0u64;
    for chunk in pairs.chunks(EVAL_CHUNK) {
        let inputs: Vec<&[u32]> = chunk.iter().map(|p| p.0).collect();
        let pass = model.forward_batch(&inputs)?;
        for (i, (_, targets)) in chunk.iter().enumerate() {
            let nll = pass.result(i).per_token_nll(targets)?;
            total += nll.iter().sum::<f64>();
            tokens += nll.len() as u64;
        }
    }
    let mean_loss = total / tokens as f64;
    Ok(EvalResult {
        mean_loss,
        perplexity: mean_loss.exp(),
        tokens,
    })
}

/// `θ ← θ − η g` and advance the step counter. Rejects a non-finite update
/// before touching the parameters.
pub fn apply_gradient(model: &mut ModelState, grad: &[f64], lr: f64) -> Result<()> {
    if grad.len() != model.params.len() {
        return Err(CuratorError::LengthMismatch {
            expected: model.params.len(),
            got: grad.len(),
        });
    }
    if grad.iter().any(|g| !(lr * g).is_finite()) {
        return Err(CuratorError::NonFinite {
            sample: String::from("<update>"),
            what: "parameter update",
        });
    }
    model.params.iter_mut().zip(grad).for_each(|(p, g)| *p -= lr * g);
    model.step += 1;
    Ok(())
}

/// One weighted SGD step on `batch`.
pub fn apply_step(
    model: &mut ModelState,
    batch: &[Sample<'_>],
    weights: &WeightVector,
    lr: f64,
    normalization: LossNormalization,
) -> Result<()> {
    let grad = crate::tinymodel::weighted_grad(model, batch, &weights.weights, normalization)?;
    apply_gradient(model, &grad, lr)
}

fn sample_of<'c>(doc: &'c Document, max_seq_len: usize) -> Result<Sample<'c>> {
    let (inputs, targets) = doc.training_pair(max_seq_len).ok_or_else(|| CuratorError::TooShort {
        doc: doc.id.clone(),
        len: doc.model_tokens.len(),
        min: 2,
    })?;
    Ok(Sample {
        id: &doc.id,
        inputs,
        targets,
    })
}

/// What a policy decided for one batch.
#[derive(Debug, Default)]
struct Weighing {
    raw_scores: Vec<f64>,
    weights: Vec<f64>,
    cap_hits: u32,
}

/// Forward, weigh, backward, update. `weigh` sees the pre-update forward
/// pass and per-sample mean losses. Returns the decision and the objective.
fn weighted_update(
    model: &mut ModelState,
    samples: &[Sample<'_>],
    lr: f64,
    normalization: LossNormalization,
    weigh: impl FnOnce(&BatchPass<'_>, &[f64]) -> Result<Weighing>,
) -> Result<(Weighing, f64)> {
    let inputs: Vec<&[u32]> = samples.iter().map(|s| s.inputs).collect();
    let targets: Vec<&[u32]> = samples.iter().map(|s| s.targets).collect();
    let (weighing, objective, grad) = {
        let pass = model.forward_batch(&inputs)?;
        let losses = pass.sample_losses(&targets)?;
        if let Some(pos) = losses.iter().position(|l| !l.is_finite()) {
            return Err(CuratorError::NonFinite {
                sample: samples[pos].id.to_string(),
                what: "loss",
            });
        }
        let weighing = weigh(&pass, &losses)?;
        if weighing.weights.len() != samples.len() {
            return Err(CuratorError::LengthMismatch {
                expected: samples.len(),
                got: weighing.weights.len(),
            });
        }
        if let Some(pos) = weighing.weights.iter().position(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(CuratorError::NonFinite {
                sample: samples[pos].id.to_string(),
                what: "weight",
            });
        }
        let coefs = normalization.coefficients(&weighing.weights);
        let objective: f64 = coefs.iter().zip(&losses).map(|(c, l)| c * l).sum();
        let grad = pass.backward(&targets, &coefs)?;
        if grad.iter().any(|g| !g.is_finite()) {
            let culprit = (0..samples.len()).find(|&i| coefs[i] > 0.0).unwrap_or(0);
            return Err(CuratorError::NonFinite {
                sample: samples[culprit].id.to_string(),
                what: "gradient",
            });
        }
        (weighing, objective, grad)
    };
    apply_gradient(model, &grad, lr)?;
    Ok((weighing, objective))
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub trace: Vec<StepRecord>,
    pub ledger: FlopsLedger,
    /// Size of the retained subset for selection runs.
    pub retained: Option<usize>,
    /// Validation result after the last step, when a validation set was set.
    pub final_eval: Option<EvalResult>,
}

type CheckpointHook<'a> = &'a mut dyn FnMut(&ModelState) -> Result<()>;

/// Owns the model, ledger and trace of one run.
pub struct Trainer<'a> {
    model: ModelState,
    cfg: TrainConfig,
    val: Option<&'a Corpus>,
    hook: Option<CheckpointHook<'a>>,
    ledger: FlopsLedger,
    trace: Vec<StepRecord>,
    last_eval: Option<EvalResult>,
}

/// Per-step bookkeeping handed to [`Trainer::record`].
struct StepInfo<'c> {
    epoch: u64,
    docs: Vec<&'c Document>,
    weighing: Weighing,
    objective: f64,
    train_tokens: u64,
    extras: StepExtras,
}

/// Step telemetry that does not come from the update itself.
#[derive(Debug, Clone, Copy, Default)]
struct StepExtras {
    metric_tokens: u64,
    refreshed: bool,
    resampled: u32,
}

impl<'a> Trainer<'a> {
    pub fn new(model: ModelState, cfg: TrainConfig) -> Self {
        let n = model.param_count() as u128;
        Trainer {
            ledger: FlopsLedger::new(FlopsConstants {
                n_params: n,
                n_prime: n,
                ..Default::default()
            }),
            model,
            cfg,
            val: None,
            hook: None,
            trace: Vec::new(),
            last_eval: None,
        }
    }

    /// Evaluate on `val` every `eval_interval` steps and after the last one.
    pub fn with_validation(mut self, val: &'a Corpus) -> Self {
        self.val = Some(val);
        self
    }

    /// Called with the model every `eval_interval` steps.
    pub fn with_checkpoint_hook(mut self, hook: CheckpointHook<'a>) -> Self {
        self.hook = Some(hook);
        self
    }

    /// Offline scoring cost charged before the first step.
    pub fn with_prep_flops(mut self, prep: u128) -> Self {
        self.ledger.prep += prep;
        self
    }

    fn n_params(&self) -> u128 {
        self.ledger.constants.n_params
    }

    fn record(&mut self, t: u64, info: StepInfo<'_>) -> Result<()> {
        self.ledger.add_train(u128::from(info.train_tokens));
        if info.extras.metric_tokens > 0 {
            self.ledger.add_metric(MetricEvent {
                n_params: self.n_params(),
                tokens: u128::from(info.extras.metric_tokens),
            });
        }
        let periodic = self.cfg.eval_interval > 0 && t % self.cfg.eval_interval == 0;
        let mut eval = None;
        if let Some(val) = self.val {
            if periodic || t == self.cfg.steps {
                eval = Some(evaluate(&self.model, val)?);
                self.last_eval = eval;
            }
        }
        if periodic {
            if let Some(hook) = self.hook.as_mut() {
                hook(&self.model)?;
            }
        }
        self.trace.push(StepRecord {
            step: t,
            epoch: info.epoch,
            batch_ids: info.docs.iter().map(|d| d.id.clone()).collect(),
            raw_scores: info.weighing.raw_scores,
            weights: info.weighing.weights,
            weighted_loss: info.objective,
            val_loss: eval.map(|e| e.mean_loss),
            val_ppl: eval.map(|e| e.perplexity),
            train_tokens: info.train_tokens,
            metric_tokens: info.extras.metric_tokens,
            cum_flops: self.ledger.total(),
            refreshed: info.extras.refreshed,
            cap_hits: info.weighing.cap_hits,
            resampled: info.extras.resampled,
        });
        Ok(())
    }

    fn finish(mut self, retained: Option<usize>) -> Result<TrainOutcome> {
        if self.cfg.steps == 0 {
            if let Some(val) = self.val {
                self.last_eval = Some(evaluate(&self.model, val)?);
            }
        }
        Ok(TrainOutcome {
            model: self.model,
            trace: self.trace,
            ledger: self.ledger,
            retained,
            final_eval: self.last_eval,
        })
    }

    /// One update over `docs` with weights from `weigh`, then telemetry.
    fn run_step<'c>(
        &mut self,
        t: u64,
        epoch: u64,
        docs: Vec<&'c Document>,
        extras: StepExtras,
        weigh: impl FnOnce(&BatchPass<'_>, &[f64]) -> Result<Weighing>,
    ) -> Result<()> {
        let max = self.model.config.max_seq_len;
        let samples = docs.iter().map(|d| sample_of(d, max)).collect::<Result<Vec<_>>>()?;
        let train_tokens = samples.iter().map(|s| s.inputs.len() as u64).sum();
        let (weighing, objective) =
            weighted_update(&mut self.model, &samples, self.cfg.lr, self.cfg.normalization, weigh)?;
        self.record(
            t,
            StepInfo {
                epoch,
                docs,
                weighing,
                objective,
                train_tokens,
                extras,
            },
        )
    }

    /// Online reweighting: refresh anchors when due, score the batch, gate,
    /// update.
    pub fn online(mut self, corpus: &Corpus, anchors: &AnchorSet, policy: &OnlinePolicy) -> Result<TrainOutcome> {
        self.cfg.validate()?;
        policy.validate()?;
        if anchors.is_empty() {
            return Err(CuratorError::InvalidArgument("online scoring needs at least one anchor".into()));
        }
        let kind = policy.scorer;
        let gate = GateConfig {
            standardize: Some(policy.gate.standardize_or_default(kind)),
            ..policy.gate
        };
        let max = self.model.config.max_seq_len;
        let mut sampler = EpochSampler::new(corpus.len(), self.cfg.batch_size, self.cfg.seed);

        let mut anchors = anchors.clone();
        // frozen scorer: a snapshot of the starting model plus per-document cache
        let encoder = (kind == ScoreKind::FrozenEmbed).then(|| self.model.clone());
        let mut frozen_cache: Vec<Option<f64>> = Vec::new();
        // bm25: raw and corpus-standardized scores, filled at step 1
        let mut bm25_cache: Option<(Vec<f64>, Vec<f64>)> = None;

        for t in 1..=self.cfg.steps {
            let span = sampler
                .next_span()
                .ok_or_else(|| CuratorError::InvalidArgument("empty training corpus".into()))?;
            let docs: Vec<&Document> = span.kept.iter().map(|&i| &corpus.documents[i]).collect();
            let mut metric_tokens = 0u64;
            let mut refreshed = false;
            let step = (|| -> Result<()> {
                match kind {
                    ScoreKind::AdaptEmbed => {
                        if policy.refresh_due(t) {
                            anchors = refresh_anchors(&self.model, &anchors, t)?;
                            metric_tokens += anchors.token_count(max);
                            refreshed = true;
                        }
                        let d = self.model.config.d_model;
                        let anchors = &anchors;
                        self.run_step(t, span.epoch, docs, StepExtras { metric_tokens, refreshed, resampled: 0 }, |pass, _| {
                            let raw = (0..pass.len())
                                .map(|i| mean_cosine(&embed_hidden(pass.hidden(i), d, EMBED_EPS)?, anchors))
                                .collect::<Result<Vec<_>>>()?;
                            Ok(gate_scores(&gate, raw.clone(), &raw))
                        })
                    }
                    ScoreKind::FrozenEmbed => {
                        let encoder = encoder.as_ref().expect("frozen encoder");
                        if t == 1 {
                            anchors = refresh_anchors(encoder, &anchors, t)?;
                            metric_tokens += anchors.token_count(max);
                            refreshed = true;
                            frozen_cache = vec![None; corpus.len()];
                        }
                        let missing: Vec<usize> = span.kept.iter().copied().filter(|&i| frozen_cache[i].is_none()).collect();
                        let missing_docs: Vec<&Document> = missing.iter().map(|&i| &corpus.documents[i]).collect();
                        for (&i, phi) in missing.iter().zip(embed_documents(encoder, &missing_docs)?) {
                            frozen_cache[i] = Some(mean_cosine(&phi, &anchors)?);
                        }
                        metric_tokens += missing_docs.iter().map(|d| d.embedding_input(max).len() as u64).sum::<u64>();
                        let raw: Vec<f64> = span.kept.iter().map(|&i| frozen_cache[i].expect("cached")).collect();
                        let weighing = gate_scores(&gate, raw.clone(), &raw);
                        self.run_step(t, span.epoch, docs, StepExtras { metric_tokens, refreshed, resampled: 0 }, |_, _| Ok(weighing))
                    }
                    ScoreKind::Bm25 => {
                        if bm25_cache.is_none() {
                            let index = Bm25Index::build(&anchors, policy.bm25);
                            let raw: Vec<f64> = corpus.documents.iter().map(|d| score_bm25(&index, d)).collect();
                            let std = gate.standardize.unwrap_or(Standardize::None).apply(&raw);
                            bm25_cache = Some((raw, std));
                        }
                        let (raw_all, std_all) = bm25_cache.as_ref().expect("cached");
                        let raw: Vec<f64> = span.kept.iter().map(|&i| raw_all[i]).collect();
                        let std: Vec<f64> = span.kept.iter().map(|&i| std_all[i]).collect();
                        let pre = GateConfig {
                            standardize: Some(Standardize::None),
                            ..gate
                        };
                        let weighing = gate_scores(&pre, raw, &std);
                        self.run_step(t, span.epoch, docs, StepExtras { metric_tokens, refreshed, resampled: 0 }, |_, _| Ok(weighing))
                    }
                    _ => unreachable!("validated scorer"),
                }
            })();
            step.map_err(|e| e.at_step(t))?;
        }
        self.finish(None)
    }

    /// Trains on the documents scoring at least `threshold`.
    pub fn selection(mut self, corpus: &Corpus, scores: &ScoreVector, threshold: f64) -> Result<TrainOutcome> {
        self.cfg.validate()?;
        check_aligned(corpus, scores.len())?;
        let keep: Vec<bool> = scores.scores.iter().map(|&s| s >= threshold).collect();
        let mut sampler = EpochSampler::restricted(keep, self.cfg.batch_size, self.cfg.seed);
        let retained = sampler.kept_total();
        if retained == 0 {
            return Err(CuratorError::EmptySelection { threshold });
        }
        for t in 1..=self.cfg.steps {
            let span = sampler.next_span().expect("retained set is nonempty");
            let docs: Vec<&Document> = span.kept.iter().map(|&i| &corpus.documents[i]).collect();
            let raw: Vec<f64> = span.kept.iter().map(|&i| scores.scores[i]).collect();
            self.run_step(t, span.epoch, docs, StepExtras::default(), |pass, _| {
                Ok(Weighing {
                    raw_scores: raw,
                    weights: vec![1.0; pass.len()],
                    cap_hits: 0,
                })
            })
            .map_err(|e| e.at_step(t))?;
        }
        self.finish(Some(retained))
    }

    /// Full-corpus training with fixed per-document weights. Batches follow
    /// the schedule of [`Trainer::selection`] over the positively weighted
    /// documents, with the zero-weight documents of each span included.
    pub fn fixed_weights(mut self, corpus: &Corpus, weights: &WeightVector) -> Result<TrainOutcome> {
        self.cfg.validate()?;
        check_aligned(corpus, weights.len())?;
        let keep: Vec<bool> = weights.weights.iter().map(|&w| w > 0.0).collect();
        let mut sampler = EpochSampler::restricted(keep, self.cfg.batch_size, self.cfg.seed);
        let retained = sampler.kept_total();
        if retained == 0 {
            return Err(CuratorError::EmptySelection { threshold: 0.0 });
        }
        for t in 1..=self.cfg.steps {
            let span = sampler.next_span().expect("retained set is nonempty");
            let docs: Vec<&Document> = span.covered.iter().map(|&i| &corpus.documents[i]).collect();
            let w: Vec<f64> = span.covered.iter().map(|&i| weights.weights[i]).collect();
            self.run_step(t, span.epoch, docs, StepExtras::default(), |_, _| {
                Ok(Weighing {
                    weights: w,
                    ..Default::default()
                })
            })
            .map_err(|e| e.at_step(t))?;
        }
        self.finish(Some(retained))
    }

    /// Domain-mixture sampling; every drawn document has weight 1.
    pub fn mixing(mut self, corpus: &Corpus, dw: &DomainWeights, mode: MixingMode) -> Result<TrainOutcome> {
        self.cfg.validate()?;
        let domains: Vec<(&str, f64, Vec<usize>)> = dw
            .weights
            .iter()
            .map(|(d, &w)| (d.as_str(), w, corpus.domain_indices(d)))
            .collect();
        for (d, w, idx) in &domains {
            if *w > 0.0 && idx.is_empty() {
                return Err(CuratorError::TooFewDocuments {
                    domain: d.to_string(),
                    available: 0,
                    requested: 1,
                });
            }
        }
        let b = self.cfg.batch_size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let n = corpus.len().max(1) as u64;
        // (document, drawn again after exhaustion) per slot, for quota mode
        let plan: Option<Vec<(usize, bool)>> = match mode {
            MixingMode::Probability => None,
            MixingMode::Quota => {
                let quotas = crate::gating::quota_allocate(dw, self.cfg.steps * b as u64);
                let mut slots = Vec::new();
                for (d, _, idx) in &domains {
                    let quota = quotas.get(*d).copied().unwrap_or(0) as usize;
                    let mut pool = idx.clone();
                    pool.shuffle(&mut rng);
                    for k in 0..quota {
                        if k > 0 && k % pool.len() == 0 {
                            pool.shuffle(&mut rng);
                        }
                        slots.push((pool[k % pool.len()], k >= idx.len()));
                    }
                }
                slots.shuffle(&mut rng);
                Some(slots)
            }
        };
        let picker = match mode {
            MixingMode::Probability => Some(
                WeightedIndex::new(domains.iter().map(|(_, w, _)| *w))
                    .map_err(|e| CuratorError::InvalidArgument(format!("domain weights: {e}")))?,
            ),
            MixingMode::Quota => None,
        };
        let mut drawn = 0u64;
        for t in 1..=self.cfg.steps {
            let mut picked = Vec::with_capacity(b);
            let mut resampled = 0u32;
            match (&plan, &picker) {
                (Some(slots), _) => {
                    let start = (t as usize - 1) * b;
                    for &(i, again) in &slots[start..start + b] {
                        picked.push(i);
                        resampled += u32::from(again);
                    }
                }
                (None, Some(picker)) => {
                    for _ in 0..b {
                        let idx = &domains[picker.sample(&mut rng)].2;
                        picked.push(idx[rng.random_range(0..idx.len())]);
                    }
                }
                (None, None) => unreachable!("one sampler per mode"),
            }
            let epoch = drawn / n;
            drawn += picked.len() as u64;
            let docs: Vec<&Document> = picked.iter().map(|&i| &corpus.documents[i]).collect();
            self.run_step(t, epoch, docs, StepExtras { resampled, ..Default::default() }, |pass, _| {
                Ok(Weighing {
                    weights: vec![1.0; pass.len()],
                    ..Default::default()
                })
            })
            .map_err(|e| e.at_step(t))?;
        }
        self.finish(None)
    }

    /// Loss-proportional weights capped at `alpha`.
    pub fn linupper(mut self, corpus: &Corpus, alpha: f64) -> Result<TrainOutcome> {
        self.cfg.validate()?;
        if !(alpha > 0.0) {
            return Err(CuratorError::config("policy.alpha", "must be positive"));
        }
        let mut sampler = EpochSampler::new(corpus.len(), self.cfg.batch_size, self.cfg.seed);
        for t in 1..=self.cfg.steps {
            let span = sampler
                .next_span()
                .ok_or_else(|| CuratorError::InvalidArgument("empty training corpus".into()))?;
            let docs: Vec<&Document> = span.kept.iter().map(|&i| &corpus.documents[i]).collect();
            self.run_step(t, span.epoch, docs, StepExtras::default(), |_, losses| {
                let w = weights_linupper(losses, alpha)?;
                let mean = losses.iter().sum::<f64>() / losses.len() as f64;
                let cap_hits = if mean > 0.0 {
                    losses.iter().filter(|&&l| l / mean > alpha).count() as u32
                } else {
                    0
                };
                Ok(Weighing {
                    raw_scores: losses.to_vec(),
                    weights: w.weights,
                    cap_hits,
                })
            })
            .map_err(|e| e.at_step(t))?;
        }
        self.finish(None)
    }

    /// Plain SGD over epoch-shuffled batches.
    pub fn uniform(mut self, corpus: &Corpus) -> Result<TrainOutcome> {
        self.cfg.validate()?;
        let mut sampler = EpochSampler::new(corpus.len(), self.cfg.batch_size, self.cfg.seed);
        for t in 1..=self.cfg.steps {
            let span = sampler
                .next_span()
                .ok_or_else(|| CuratorError::InvalidArgument("empty training corpus".into()))?;
            let docs: Vec<&Document> = span.kept.iter().map(|&i| &corpus.documents[i]).collect();
            self.run_step(t, span.epoch, docs, StepExtras::default(), |pass, _| {
                Ok(Weighing {
                    weights: vec![1.0; pass.len()],
                    ..Default::default()
                })
            })
            .map_err(|e| e.at_step(t))?;
        }
        self.finish(None)
    }
}

fn check_aligned(corpus: &Corpus, got: usize) -> Result<()> {
    if got != corpus.len() {
        return Err(CuratorError::LengthMismatch {
            expected: corpus.len(),
            got,
        });
    }
    Ok(())
}

/// Gate `standardized` scores (standardization as configured) and keep the
/// raw scores for telemetry.
fn gate_scores(gate: &GateConfig, raw: Vec<f64>, scores: &[f64]) -> Weighing {
    Weighing {
        weights: gate.apply(scores).weights,
        raw_scores: raw,
        cap_hits: 0,
    }
}

pub fn train_online(
    corpus: &Corpus,
    anchors: &AnchorSet,
    model: ModelState,
    policy: &OnlinePolicy,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    Trainer::new(model, cfg.clone()).online(corpus, anchors, policy)
}

pub fn train_selection(
    corpus: &Corpus,
    scores: &ScoreVector,
    threshold: f64,
    model: ModelState,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    Trainer::new(model, cfg.clone()).selection(corpus, scores, threshold)
}

pub fn train_mixing(
    corpus: &Corpus,
    dw: &DomainWeights,
    mode: MixingMode,
    model: ModelState,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    Trainer::new(model, cfg.clone()).mixing(corpus, dw, mode)
}

pub fn train_linupper(corpus: &Corpus, alpha: f64, model: ModelState, cfg: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(model, cfg.clone()).linupper(corpus, alpha)
}

pub fn train_uniform(corpus: &Corpus, model: ModelState, cfg: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(model, cfg.clone()).uniform(corpus)
}

/// Corpus position of every document id.
pub fn id_index(corpus: &Corpus) -> HashMap<&str, usize> {
    corpus
        .documents
        .iter()
        .enumerate()
        .map(|(i, d)| (d.id.as_str(), i))
        .collect()
}

/// Per-domain document counts drawn over a trace.
pub fn domain_draws(trace: &[StepRecord], corpus: &Corpus) -> BTreeMap<String, u64> {
    let index = id_index(corpus);
    let mut out = BTreeMap::new();
    for r in trace {
        for id in &r.batch_ids {
            if let Some(&i) = index.get(id.as_str()) {
                *out.entry(corpus.documents[i].domain.clone()).or_insert(0) += 1;
            }
        }
    }
    out
}
