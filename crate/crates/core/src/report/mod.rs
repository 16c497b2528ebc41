//! Experiment driver: config → corpus → anchors → scorer → trainer →
//! ledger → analysis, with every artifact written deterministically.

mod config;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{
    parse_config, parse_config_str, AnchorSpec, CorpusSource, EvalSpec, ExperimentConfig, PolicyConfig,
};

use crate::analysis::{
    domain_mixture, effective_proportion, epoch_histograms, frontier_table, last_assigned_weights, write_frontier,
    write_histograms, FrontierRow,
};
use crate::corpus::{load_corpus, select_anchor_documents, synth_corpus, AnchorSet, Corpus, Document, Split};
use crate::error::{CuratorError, Result};
use crate::flops::{flops_forward_tokens, flops_train_tokens, FlopsConstants, FlopsLedger};
use crate::gating::GateConfig;
use crate::scoring::{
    anchor_mean_gradient, embed_documents, mean_cosine, refresh_anchors, score_bm25, score_grad_influence_with,
    score_ppl, write_score_dump, Bm25Index, Bm25Params, ScoreKind, ScoreVector,
};
use crate::tinymodel::{save_checkpoint, ModelState};
use crate::trainer::{write_trace, CurationPolicy, TrainOutcome, Trainer};
use crate::ARTIFACT_VERSION;

pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const HISTOGRAM_FILE: &str = "histogram.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const CHECKPOINT_FILE: &str = "final.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FRONTIER_FILE: &str = "frontier.csv";
pub const FAILED_MARKER: &str = ".failed";

/// Statement of what the FLOPs ledger leaves out, repeated in headers.
pub const FLOPS_NOTE: &str = "flops: 6N per trained token, 2N per extra forward token; gating arithmetic \
     (pooling, cosines, sigmoids) and validation passes are not counted";
/// How the effective proportion is defined for multi-epoch runs.
pub const PROPORTION_NOTE: &str =
    "effective_proportion: mean of each document's last applied weight (final-epoch assignment)";

/// The `#` header lines of every emitted file.
pub fn artifact_header(gate: Option<&GateConfig>) -> Vec<String> {
    vec![
        ARTIFACT_VERSION.to_string(),
        format!("gate: {}", serde_json::to_string(&gate).expect("gate serializes")),
    ]
}

/// Summary of the FLOPs ledger as emitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub prep: u128,
    pub train: u128,
    pub metrics: u128,
    pub total: u128,
    pub constants: FlopsConstants,
}

impl From<&FlopsLedger> for LedgerSummary {
    fn from(l: &FlopsLedger) -> Self {
        LedgerSummary {
            prep: l.prep,
            train: l.train,
            metrics: l.metrics,
            total: l.total(),
            constants: l.constants,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSummary {
    pub epoch: u64,
    pub count: u64,
    pub variance: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub version: String,
    pub policy: String,
    pub gate: Option<GateConfig>,
    pub steps: u64,
    pub final_val_loss: Option<f64>,
    pub final_val_ppl: Option<f64>,
    pub effective_proportion: f64,
    /// Documents that received at least one weight.
    pub effective_coverage: usize,
    pub domain_mixture: BTreeMap<String, f64>,
    pub histograms: Vec<HistogramSummary>,
    pub ledger: LedgerSummary,
    pub retained: Option<usize>,
    pub refresh_steps: Vec<u64>,
    pub cap_hits: u64,
    pub resampled: u64,
    pub notes: Vec<String>,
    pub config: ExperimentConfig,
}

/// Train and validation splits of the configured corpus.
pub fn load_experiment_corpus(cfg: &ExperimentConfig) -> Result<(Corpus, Corpus)> {
    let corpus = match &cfg.corpus {
        CorpusSource::Path(p) => load_corpus(p)?,
        CorpusSource::Synth(spec) => synth_corpus(spec),
    };
    Ok((corpus.split(Split::Train), corpus.split(Split::Val)))
}

/// Anchor documents and the evaluation set.
pub fn anchors_and_eval(cfg: &ExperimentConfig, val: &Corpus) -> Result<(Vec<Document>, Corpus)> {
    let pool = match &cfg.anchors.domains {
        Some(ds) => val.filter_domains(ds),
        None => val.clone(),
    };
    let anchors = select_anchor_documents(&pool, cfg.anchors.per_domain, cfg.anchors.seed)?;
    let mut eval = match &cfg.eval.domains {
        Some(ds) => val.filter_domains(ds),
        None => val.clone(),
    };
    if cfg.eval.exclude_anchors {
        let ids: std::collections::HashSet<&str> = anchors.iter().map(|d| d.id.as_str()).collect();
        eval = eval.filter(|d| !ids.contains(d.id.as_str()));
    }
    Ok((anchors, eval))
}

/// Scores of every training document under the proxy (the model at step
/// 0), and the FLOPs that took. Larger is better for every kind: the
/// perplexity score enters negated.
pub fn offline_scores(
    kind: ScoreKind,
    proxy: &ModelState,
    corpus: &Corpus,
    anchors: &[Document],
    bm25: Bm25Params,
) -> Result<(ScoreVector, u128)> {
    let n = proxy.param_count() as u128;
    let max = proxy.config.max_seq_len;
    let input_tokens =
        |docs: &mut dyn Iterator<Item = &Document>| docs.map(|d| d.embedding_input(max).len() as u128).sum::<u128>();
    let pool_tokens = input_tokens(&mut corpus.documents.iter());
    let anchor_tokens = input_tokens(&mut anchors.iter());
    match kind {
        ScoreKind::Bm25 => {
            let index = Bm25Index::build(&AnchorSet::unembedded(anchors.to_vec()), bm25);
            let scores = corpus.documents.iter().map(|d| score_bm25(&index, d)).collect();
            Ok((ScoreVector::new(kind, scores), 0))
        }
        ScoreKind::AdaptEmbed | ScoreKind::FrozenEmbed => {
            let set = refresh_anchors(proxy, &AnchorSet::unembedded(anchors.to_vec()), 0)?;
            let docs: Vec<&Document> = corpus.documents.iter().collect();
            let scores = embed_documents(proxy, &docs)?
                .iter()
                .map(|phi| mean_cosine(phi, &set))
                .collect::<Result<Vec<_>>>()?;
            Ok((ScoreVector::new(kind, scores), flops_forward_tokens(n, pool_tokens + anchor_tokens)))
        }
        ScoreKind::Ppl => {
            let scores = corpus
                .documents
                .par_iter()
                .map(|d| score_ppl(proxy, d).map(|s| -s))
                .collect::<Result<Vec<_>>>()?;
            Ok((ScoreVector::new(kind, scores), flops_forward_tokens(n, pool_tokens)))
        }
        ScoreKind::GradInfluence => {
            let g = anchor_mean_gradient(proxy, &AnchorSet::unembedded(anchors.to_vec()))?;
            let scores = corpus
                .documents
                .par_iter()
                .map(|d| score_grad_influence_with(proxy, d, &g))
                .collect::<Result<Vec<_>>>()?;
            Ok((ScoreVector::new(kind, scores), flops_train_tokens(n, pool_tokens + anchor_tokens)))
        }
        ScoreKind::Linupper => Err(CuratorError::InvalidArgument(
            "linupper weights come from batch losses, not an offline score".into(),
        )),
    }
}

fn create(path: &Path, force: bool) -> Result<BufWriter<File>> {
    if path.exists() && !force {
        return Err(CuratorError::ArtifactExists(path.to_path_buf()));
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// The artifact paths a run writes (checkpoints under `checkpoints/` aside).
pub fn artifact_paths(out: &Path) -> [PathBuf; 5] {
    [TRACE_FILE, SUMMARY_FILE, HISTOGRAM_FILE, SCORES_FILE, CHECKPOINT_FILE].map(|f| out.join(f))
}

/// Runs one experiment and writes its artifacts into `cfg.output`. On
/// failure the artifacts written so far stay and a `.failed` marker holds
/// the error.
pub fn run_experiment(cfg: &ExperimentConfig, force: bool) -> Result<RunSummary> {
    let out = cfg.output.clone();
    fs::create_dir_all(&out)?;
    if !force {
        if let Some(p) = artifact_paths(&out).into_iter().find(|p| p.exists()) {
            return Err(CuratorError::ArtifactExists(p));
        }
    }
    let result = run_inner(cfg, &out, force);
    let marker = out.join(FAILED_MARKER);
    match &result {
        Ok(_) => {
            if marker.exists() {
                fs::remove_file(&marker)?;
            }
        }
        Err(e) => {
            // best effort: the original error is what the caller needs
            let _ = fs::write(&marker, format!("{e}\n"));
        }
    }
    result
}

fn run_inner(cfg: &ExperimentConfig, out: &Path, force: bool) -> Result<RunSummary> {
    let (train, val) = load_experiment_corpus(cfg)?;
    let (anchor_docs, eval) = anchors_and_eval(cfg, &val)?;
    let model = ModelState::init(&cfg.model, cfg.init_seed());
    let policy = cfg.policy.to_policy()?;
    let gate = cfg.policy.resolved_gate();
    let header = artifact_header(gate.as_ref());

    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let mut hook = |m: &ModelState| -> Result<()> {
        fs::create_dir_all(&ckpt_dir)?;
        let path = ckpt_dir.join(format!("step_{:06}.ckpt", m.step));
        if path.exists() && !force {
            return Err(CuratorError::ArtifactExists(path));
        }
        save_checkpoint(m, &path)
    };
    let has_eval = !eval.is_empty();
    let mut trainer = Trainer::new(model.clone(), cfg.train.clone()).with_checkpoint_hook(&mut hook);
    if has_eval {
        trainer = trainer.with_validation(&eval);
    }

    // offline scores, when the policy uses them
    let mut offline: Option<ScoreVector> = None;
    let outcome: TrainOutcome = match &policy {
        CurationPolicy::Online(p) => trainer.online(&train, &AnchorSet::unembedded(anchor_docs.clone()), p)?,
        CurationPolicy::Selection { scorer, threshold } => {
            let bm25 = match &cfg.policy {
                PolicyConfig::Selection { bm25, .. } => *bm25,
                _ => Bm25Params::default(),
            };
            let (scores, prep) = offline_scores(*scorer, &model, &train, &anchor_docs, bm25)?;
            let outcome = trainer.with_prep_flops(prep).selection(&train, &scores, *threshold)?;
            offline = Some(scores);
            outcome
        }
        CurationPolicy::Mixing { weights, mode } => trainer.mixing(&train, weights, *mode)?,
        CurationPolicy::LinUpper { alpha } => trainer.linupper(&train, *alpha)?,
        CurationPolicy::Uniform => trainer.uniform(&train)?,
    };
    let trace = &outcome.trace;

    write_trace(create(&out.join(TRACE_FILE), force)?, &header, trace)?;

    // scores: the offline vector, or each document's last recorded score
    let kind = cfg.policy.scorer().unwrap_or(ScoreKind::Linupper);
    let scored = matches!(policy, CurationPolicy::Online(_) | CurationPolicy::LinUpper { .. });
    let mut score_header = header.clone();
    score_header.push(match (&offline, scored) {
        (Some(_), _) => "scores: proxy model at step 0 over the training corpus".to_string(),
        (None, true) => "scores: last recorded score per document; model_step is the step that used it".to_string(),
        (None, false) => "scores: policy does not score documents".to_string(),
    });
    {
        let f = create(&out.join(SCORES_FILE), force)?;
        if let Some(sv) = &offline {
            let rows = train.documents.iter().zip(&sv.scores).map(|(d, &s)| (d.id.as_str(), s, 0));
            write_score_dump(f, &score_header, sv.kind, rows)?;
        } else {
            let mut last: BTreeMap<&str, (f64, u64)> = BTreeMap::new();
            for r in trace {
                for (id, &s) in r.batch_ids.iter().zip(&r.raw_scores) {
                    last.insert(id.as_str(), (s, r.step - 1));
                }
            }
            let rows = train
                .documents
                .iter()
                .filter_map(|d| last.get(d.id.as_str()).map(|&(s, step)| (d.id.as_str(), s, step)));
            write_score_dump(f, &score_header, kind, rows)?;
        }
    }

    let histograms = if scored {
        epoch_histograms(trace, kind, cfg.eval.histogram_bins)?
    } else if let Some(sv) = &offline {
        vec![crate::analysis::similarity_histogram(sv, 0, cfg.eval.histogram_bins)?]
    } else {
        Vec::new()
    };
    let mut hist_header = header.clone();
    hist_header.push(format!("histogram: {} scores per epoch", if scored { kind.as_str() } else { "offline" }));
    write_histograms(create(&out.join(HISTOGRAM_FILE), force)?, &hist_header, &histograms)?;

    {
        let mut f = create(&out.join(CHECKPOINT_FILE), force)?;
        crate::tinymodel::write_checkpoint(&outcome.model, &mut f)?;
        f.flush()?;
    }

    let weights = last_assigned_weights(trace, &train);
    let summary = RunSummary {
        version: ARTIFACT_VERSION.to_string(),
        policy: policy.name(),
        gate,
        steps: trace.len() as u64,
        final_val_loss: outcome.final_eval.map(|e| e.mean_loss),
        final_val_ppl: outcome.final_eval.map(|e| e.perplexity),
        effective_proportion: effective_proportion(&weights),
        effective_coverage: weights.len(),
        domain_mixture: domain_mixture(trace, &train),
        histograms: histograms
            .iter()
            .map(|h| HistogramSummary {
                epoch: h.epoch,
                count: h.total(),
                variance: h.variance,
                entropy: h.entropy,
            })
            .collect(),
        ledger: LedgerSummary::from(&outcome.ledger),
        retained: outcome.retained,
        refresh_steps: trace.iter().filter(|r| r.refreshed).map(|r| r.step).collect(),
        cap_hits: trace.iter().map(|r| u64::from(r.cap_hits)).sum(),
        resampled: trace.iter().map(|r| u64::from(r.resampled)).sum(),
        notes: vec![FLOPS_NOTE.to_string(), PROPORTION_NOTE.to_string()],
        config: cfg.clone(),
    };
    let mut f = create(&out.join(SUMMARY_FILE), force)?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    writeln!(f)?;
    f.flush()?;
    Ok(summary)
}

/// Reads a run's summary JSON.
pub fn load_summary(path: impl AsRef<Path>) -> Result<RunSummary> {
    Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?)
}

pub fn frontier_rows(summaries: &[RunSummary]) -> Vec<FrontierRow> {
    summaries
        .iter()
        .map(|s| FrontierRow {
            policy: s.policy.clone(),
            total_flops: s.ledger.total,
            val_loss: s.final_val_loss.unwrap_or(f64::NAN),
            val_ppl: s.final_val_ppl.unwrap_or(f64::NAN),
            pareto: false,
        })
        .collect()
}

/// Writes `frontier.csv` into `out` from run summaries.
pub fn write_frontier_file(out: &Path, summaries: &[RunSummary], force: bool) -> Result<Vec<FrontierRow>> {
    fs::create_dir_all(out)?;
    let rows = frontier_table(&frontier_rows(summaries));
    let mut header = vec![ARTIFACT_VERSION.to_string()];
    for s in summaries {
        header.push(format!(
            "gate[{}]: {}",
            s.policy,
            serde_json::to_string(&s.gate).expect("gate serializes")
        ));
    }
    write_frontier(create(&out.join(FRONTIER_FILE), force)?, &header, &rows)?;
    Ok(rows)
}

/// Runs every config (in parallel when `parallel`), then the frontier over
/// all summaries. A failed run fails the suite once the others finished.
pub fn run_suite(configs: &[ExperimentConfig], out: &Path, force: bool, parallel: bool) -> Result<Vec<FrontierRow>> {
    if configs.is_empty() {
        return Err(CuratorError::InvalidArgument("suite needs at least one config".into()));
    }
    let results: Vec<Result<RunSummary>> = if parallel {
        configs.par_iter().map(|c| run_experiment(c, force)).collect()
    } else {
        configs.iter().map(|c| run_experiment(c, force)).collect()
    };
    let mut summaries = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (cfg, r) in configs.iter().zip(results) {
        match r {
            Ok(s) => summaries.push(s),
            Err(e) => failures.push(format!("{}: {e}", cfg.output.display())),
        }
    }
    if !failures.is_empty() {
        return Err(CuratorError::InvalidArgument(format!(
            "{} of {} runs failed: {}",
            failures.len(),
            configs.len(),
            failures.join("; ")
        )));
    }
    write_frontier_file(out, &summaries, force)
}
