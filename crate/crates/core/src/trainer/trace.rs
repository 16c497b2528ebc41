use std::io::Write;

use super::StepRecord;
use crate::error::Result;

/// Required columns first, then the token counts the FLOPs ledger is
/// recomputed from.
pub const TRACE_COLUMNS: [&str; 12] = [
    "step",
    "train_loss_weighted",
    "mean_weight",
    "min_weight",
    "max_weight",
    "val_loss",
    "val_ppl",
    "cum_flops",
    "train_tokens",
    "metric_tokens",
    "epoch",
    "refreshed",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV row per step after `#`-prefixed header lines. Floats use the
/// shortest round-trip representation, so equal traces give equal bytes.
pub fn write_trace(out: impl Write, header: &[String], trace: &[StepRecord]) -> Result<()> {
    let mut out = out;
    for line in header {
        writeln!(out, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_COLUMNS)?;
    for r in trace {
        let (lo, hi) = if r.weights.is_empty() {
            (String::new(), String::new())
        } else {
            (r.min_weight().to_string(), r.max_weight().to_string())
        };
        w.write_record([
            r.step.to_string(),
            r.weighted_loss.to_string(),
            r.mean_weight().to_string(),
            lo,
            hi,
            opt(r.val_loss),
            opt(r.val_ppl),
            r.cum_flops.to_string(),
            r.train_tokens.to_string(),
            r.metric_tokens.to_string(),
            r.epoch.to_string(),
            u8::from(r.refreshed).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
