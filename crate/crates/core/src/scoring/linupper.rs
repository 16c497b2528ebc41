use crate::error::{CuratorError, Result};
use crate::gating::WeightVector;

/// `w_i = min(ℓ_i / mean(ℓ), α)` over the batch; all ones when the mean
/// loss is zero.
pub fn weights_linupper(batch_losses: &[f64], alpha: f64) -> Result<WeightVector> {
    if !(alpha > 0.0) {
        return Err(CuratorError::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    if batch_losses.is_empty() {
        return Err(CuratorError::InvalidArgument("empty batch".into()));
    }
    if batch_losses.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
        return Err(CuratorError::InvalidArgument("losses must be finite and non-negative".into()));
    }
    let mean = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
    let weights = if mean == 0.0 {
        vec![1.0; batch_losses.len()]
    } else {
        batch_losses.iter().map(|l| (l / mean).min(alpha)).collect()
    };
    Ok(WeightVector::ungated(weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert_eq!(weights_linupper(&[1.0, 1.0, 1.0], 2.0).unwrap().weights, vec![1.0; 3]);
        assert_eq!(weights_linupper(&[3.0, 1.0], 1.2).unwrap().weights, vec![1.2, 0.5]);
        assert_eq!(weights_linupper(&[3.0, 1.0], 1e9).unwrap().weights, vec![1.5, 0.5]);
        assert_eq!(weights_linupper(&[0.0, 0.0], 0.5).unwrap().weights, vec![1.0, 1.0]);
        assert!(weights_linupper(&[1.0], 0.0).is_err());
        assert!(weights_linupper(&[], 1.0).is_err());
    }

    proptest! {
        #[test]
        fn bounded(losses in prop::collection::vec(0.0f64..10.0, 1..40), alpha in 0.01f64..5.0) {
            let w = weights_linupper(&losses, alpha).unwrap().weights;
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            prop_assert!(mean <= alpha.max(1.0) + 1e-12);
            for x in w {
                prop_assert!(x >= 0.0 && x <= alpha.max(1.0));
                if losses.iter().any(|&l| l > 0.0) {
                    prop_assert!(x <= alpha);
                }
            }
        }
    }
}
