use crate::corpus::Document;
use crate::error::{CuratorError, Result};
use crate::tinymodel::ModelState;

/// `−log P(x)` under a reference snapshot: the summed next-token NLL of the
/// document (truncated to the model context).
pub fn score_ppl(model: &ModelState, doc: &Document) -> Result<f64> {
    let (inputs, targets) =
        doc.training_pair(model.config.max_seq_len)
            .ok_or_else(|| CuratorError::TooShort {
                doc: doc.id.clone(),
                len: doc.model_tokens.len(),
                min: 2,
            })?;
    let result = model.forward(inputs)?;
    let total: f64 = result.per_token_nll(targets)?.iter().sum();
    if !total.is_finite() {
        return Err(CuratorError::NonFinite {
            sample: doc.id.clone(),
            what: "perplexity score",
        });
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use crate::tinymodel::{weighted_grad, LossNormalization, ModelConfig, Sample};

    fn uniform_model() -> ModelState {
        let mut m = ModelState::init(&ModelConfig::new(1, 16, 2, 32), 1);
        m.zero_unembedding();
        m
    }

    #[test]
    fn uniform_model_scores_analytically() {
        let m = uniform_model();
        let ln256 = 256f64.ln();
        let d = Document::new("d", "abcdefg", "A", Split::Train);
        assert!((score_ppl(&m, &d).unwrap() - 6.0 * ln256).abs() < 1e-10);
        let two = Document::new("2", "ab", "A", Split::Train);
        let four = Document::new("4", "abab", "A", Split::Train);
        let (s2, s4) = (score_ppl(&m, &two).unwrap(), score_ppl(&m, &four).unwrap());
        assert!((s2 - ln256).abs() < 1e-12);
        assert!((s4 - 3.0 * s2).abs() < 1e-10);
    }

    #[test]
    fn too_short() {
        let m = uniform_model();
        let d = Document::new("s", "a", "A", Split::Train);
        assert!(matches!(score_ppl(&m, &d), Err(CuratorError::TooShort { .. })));
    }

    #[test]
    fn memorized_document_scores_lower() {
        let mut m = ModelState::init(&ModelConfig::new(1, 16, 2, 32), 8);
        let memo = Document::new("m", "the rain in spain stays mainly", "A", Split::Train);
        let other = Document::new("o", "qzx vkw plm jfh gyt bnr cdu ea", "A", Split::Train);
        let (inp, tgt) = memo.training_pair(32).unwrap();
        let sample = Sample { id: "m", inputs: inp, targets: tgt };
        for _ in 0..200 {
            let g = weighted_grad(&m, &[sample], &[1.0], LossNormalization::Raw).unwrap();
            m.params.iter_mut().zip(&g).for_each(|(p, g)| *p -= 0.1 * g);
        }
        assert!(score_ppl(&m, &memo).unwrap() < score_ppl(&m, &other).unwrap());
    }
}
