//! Post-hoc views of a trace: how much data a run effectively used, how
//! similarity scores are distributed per epoch, which domains received the
//! weight mass, and the FLOPs/validation-loss frontier across runs.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{CuratorError, Result};
use crate::scoring::{ScoreKind, ScoreVector};
use crate::trainer::{id_index, StepRecord};

pub const DEFAULT_BINS: usize = 50;

/// `Σ w_i / n`; zero for an empty vector.
pub fn effective_proportion(weights: &[f64]) -> f64 {
    if weights.is_empty() {
        0.0
    } else {
        weights.iter().sum::<f64>() / weights.len() as f64
    }
}

/// The most recently applied weight of every document the trace touched,
/// in corpus order. Documents never drawn are left out, so after at least
/// one full epoch this is exactly the final epoch's assignment.
pub fn last_assigned_weights(trace: &[StepRecord], corpus: &Corpus) -> Vec<f64> {
    let index = id_index(corpus);
    let mut last: Vec<Option<f64>> = vec![None; corpus.len()];
    for r in trace {
        for (id, &w) in r.batch_ids.iter().zip(&r.weights) {
            if let Some(&i) = index.get(id.as_str()) {
                last[i] = Some(w);
            }
        }
    }
    last.into_iter().flatten().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub epoch: u64,
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    /// Population variance of the scores.
    pub variance: f64,
    /// Shannon entropy (nats) of the bin distribution.
    pub entropy: f64,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn bin_edges(&self, b: usize) -> (f64, f64) {
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + b as f64 * width, self.lo + (b + 1) as f64 * width)
    }
}

/// Equal-width histogram over `[-1, 1]` for cosine scores, otherwise over
/// the observed range. Values on the upper edge go to the top bin.
pub fn similarity_histogram(scores: &ScoreVector, epoch: u64, bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(CuratorError::InvalidArgument(format!("need at least 2 bins, got {bins}")));
    }
    if scores.is_empty() {
        return Err(CuratorError::InvalidArgument("no scores to histogram".into()));
    }
    if scores.scores.iter().any(|s| !s.is_finite()) {
        return Err(CuratorError::InvalidArgument("scores must be finite".into()));
    }
    let (lo, hi) = if scores.kind.is_cosine() {
        (-1.0, 1.0)
    } else {
        let lo = scores.scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            (lo, hi)
        } else {
            (lo, lo + 1.0)
        }
    };
    let mut counts = vec![0u64; bins];
    for &s in &scores.scores {
        let pos = ((s - lo) / (hi - lo) * bins as f64).floor();
        let b = if pos < 0.0 { 0 } else { (pos as usize).min(bins - 1) };
        counts[b] += 1;
    }
    let n = scores.len() as f64;
    let mean = scores.scores.iter().sum::<f64>() / n;
    let variance = scores.scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    let entropy = -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>();
    Ok(Histogram {
        epoch,
        lo,
        hi,
        counts,
        variance,
        entropy,
    })
}

/// Raw scores recorded during `epoch`, in trace order.
pub fn epoch_scores(trace: &[StepRecord], kind: ScoreKind, epoch: u64) -> ScoreVector {
    ScoreVector::new(
        kind,
        trace
            .iter()
            .filter(|r| r.epoch == epoch)
            .flat_map(|r| r.raw_scores.iter().copied())
            .collect(),
    )
}

/// One histogram per epoch that recorded scores.
pub fn epoch_histograms(trace: &[StepRecord], kind: ScoreKind, bins: usize) -> Result<Vec<Histogram>> {
    let last = trace.iter().map(|r| r.epoch).max();
    let mut out = Vec::new();
    for epoch in 0..=last.unwrap_or(0) {
        let scores = epoch_scores(trace, kind, epoch);
        if !scores.is_empty() {
            out.push(similarity_histogram(&scores, epoch, bins)?);
        }
    }
    Ok(out)
}

/// `bin_lo,bin_hi,count,epoch` rows.
pub fn write_histograms(out: impl Write, header: &[String], histograms: &[Histogram]) -> Result<()> {
    let mut out = out;
    for line in header {
        writeln!(out, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bin_lo", "bin_hi", "count", "epoch"])?;
    for h in histograms {
        for (b, c) in h.counts.iter().enumerate() {
            let (lo, hi) = h.bin_edges(b);
            w.write_record([lo.to_string(), hi.to_string(), c.to_string(), h.epoch.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Share of the applied weight mass per domain. Every corpus domain is
/// listed; all shares are zero when no weight was applied.
pub fn domain_mixture(trace: &[StepRecord], corpus: &Corpus) -> BTreeMap<String, f64> {
    let index = id_index(corpus);
    let mut mass: BTreeMap<String, f64> = corpus.domains.iter().map(|d| (d.clone(), 0.0)).collect();
    for r in trace {
        for (id, &w) in r.batch_ids.iter().zip(&r.weights) {
            if let Some(&i) = index.get(id.as_str()) {
                *mass.get_mut(&corpus.documents[i].domain).expect("corpus domain") += w;
            }
        }
    }
    let total: f64 = mass.values().sum();
    if total > 0.0 {
        mass.values_mut().for_each(|m| *m /= total);
    }
    mass
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierRow {
    pub policy: String,
    pub total_flops: u128,
    pub val_loss: f64,
    pub val_ppl: f64,
    #[serde(default)]
    pub pareto: bool,
}

impl FrontierRow {
    pub fn new(policy: impl Into<String>, total_flops: u128, val_loss: f64) -> Self {
        FrontierRow {
            policy: policy.into(),
            total_flops,
            val_loss,
            val_ppl: val_loss.exp(),
            pareto: false,
        }
    }

    /// At most as costly and as lossy as `other`, and strictly better on one.
    pub fn dominates(&self, other: &FrontierRow) -> bool {
        self.total_flops <= other.total_flops
            && self.val_loss <= other.val_loss
            && (self.total_flops < other.total_flops || self.val_loss < other.val_loss)
    }
}

/// Rows sorted by FLOPs (then loss, then name) with the Pareto set marked.
pub fn frontier_table(runs: &[FrontierRow]) -> Vec<FrontierRow> {
    let mut rows: Vec<FrontierRow> = runs.to_vec();
    rows.sort_by(|a, b| {
        a.total_flops
            .cmp(&b.total_flops)
            .then(a.val_loss.total_cmp(&b.val_loss))
            .then_with(|| a.policy.cmp(&b.policy))
    });
    // after sorting, a row is dominated iff some earlier row has loss no
    // higher and differs from it
    let mut best: Option<(u128, f64)> = None;
    for i in 0..rows.len() {
        let dominated = match best {
            Some((f, l)) => l < rows[i].val_loss || (l == rows[i].val_loss && f < rows[i].total_flops),
            None => false,
        };
        rows[i].pareto = !dominated;
        if best.is_none_or(|(_, l)| rows[i].val_loss < l) {
            best = Some((rows[i].total_flops, rows[i].val_loss));
        }
    }
    rows
}

pub fn write_frontier(out: impl Write, header: &[String], rows: &[FrontierRow]) -> Result<()> {
    let mut out = out;
    for line in header {
        writeln!(out, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["policy", "total_flops", "val_loss", "val_ppl", "pareto"])?;
    for r in rows {
        w.write_record([
            r.policy.clone(),
            r.total_flops.to_string(),
            r.val_loss.to_string(),
            r.val_ppl.to_string(),
            u8::from(r.pareto).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
