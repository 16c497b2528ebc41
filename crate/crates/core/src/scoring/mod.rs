//! Quality signals `s(x)` for training documents.

mod bm25;
mod embed;
mod influence;
mod linupper;
mod ppl;

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

pub use bm25::{score_bm25, Bm25Index, Bm25Params};
pub use embed::{
    document_embedding, embed_documents, mean_cosine, refresh_anchors, score_adapt_embed,
    score_frozen_embed, EMBED_EPS,
};
pub use influence::{anchor_mean_gradient, sample_gradient, score_grad_influence, score_grad_influence_with};
pub use linupper::weights_linupper;
pub use ppl::score_ppl;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Bm25,
    AdaptEmbed,
    FrozenEmbed,
    Ppl,
    GradInfluence,
    Linupper,
}

impl ScoreKind {
    /// Cosine-valued kinds live in `[-1, 1]`.
    pub fn is_cosine(self) -> bool {
        matches!(self, ScoreKind::AdaptEmbed | ScoreKind::FrozenEmbed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreKind::Bm25 => "bm25",
            ScoreKind::AdaptEmbed => "adapt_embed",
            ScoreKind::FrozenEmbed => "frozen_embed",
            ScoreKind::Ppl => "ppl",
            ScoreKind::GradInfluence => "grad_influence",
            ScoreKind::Linupper => "linupper",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-document scores aligned to a corpus (or a batch).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub kind: ScoreKind,
    pub scores: Vec<f64>,
}

impl ScoreVector {
    pub fn new(kind: ScoreKind, scores: Vec<f64>) -> Self {
        ScoreVector { kind, scores }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Score dump: `doc_id,kind,score,model_step`, one row per
/// `(id, score, step)`, after any `#` header lines.
pub fn write_score_dump<'a>(
    out: impl Write,
    header: &[String],
    kind: ScoreKind,
    rows: impl IntoIterator<Item = (&'a str, f64, u64)>,
) -> Result<()> {
    let mut out = out;
    for line in header {
        writeln!(out, "# {line}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["doc_id", "kind", "score", "model_step"])?;
    for (id, s, step) in rows {
        w.write_record([id, kind.as_str(), &s.to_string(), &step.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
