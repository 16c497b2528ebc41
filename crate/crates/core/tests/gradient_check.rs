//! Central finite differences against the analytic weighted-loss gradient.

use curator::tinymodel::{weighted_grad, LossNormalization, ModelConfig, ModelState, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn weighted_loss(model: &ModelState, batch: &[Sample<'_>], weights: &[f64]) -> f64 {
    let inputs: Vec<&[u32]> = batch.iter().map(|s| s.inputs).collect();
    let targets: Vec<&[u32]> = batch.iter().map(|s| s.targets).collect();
    let pass = model.forward_batch(&inputs).unwrap();
    let losses = pass.sample_losses(&targets).unwrap();
    losses.iter().zip(weights).map(|(l, w)| l * w).sum()
}

#[test]
fn weighted_gradient_matches_central_differences() {
    let cfg = ModelConfig::new(1, 8, 2, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = 0.0f64;
    let (mut checked, mut below_floor) = (0usize, 0usize);
    for round in 0..5 {
        let mut model = ModelState::init(&cfg, 100 + round);
        // perturb every parameter so biases and gains are not at their
        // symmetric init values
        for p in model.params.iter_mut() {
            *p += rng.random_range(-0.3..0.3);
        }
        let seqs: Vec<Vec<u32>> = (0..3)
            .map(|_| {
                let len = rng.random_range(2..=8);
                (0..=len).map(|_| rng.random_range(0..256)).collect()
            })
            .collect();
        let batch: Vec<Sample<'_>> = seqs
            .iter()
            .map(|s| Sample { id: "s", inputs: &s[..s.len() - 1], targets: &s[1..] })
            .collect();
        let weights: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..2.0)).collect();
        let grad = weighted_grad(&model, &batch, &weights, LossNormalization::Raw).unwrap();
        let h = 1e-5;
        let base = weighted_loss(&model, &batch, &weights);
        // resolution of a central difference: the loss itself is only known
        // to ~ε·|L|, so gradients are resolved to ~ε·|L|/h (~3e-10 here)
        let resolution = f64::EPSILON * base.abs() / h;
        for i in 0..model.params.len() {
            let orig = model.params[i];
            model.params[i] = orig + h;
            let up = weighted_loss(&model, &batch, &weights);
            model.params[i] = orig - h;
            let down = weighted_loss(&model, &batch, &weights);
            model.params[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let diff = (fd - grad[i]).abs();
            let magnitude = fd.abs().max(grad[i].abs());
            assert!(
                diff <= 1e-4 * magnitude || diff <= resolution,
                "param {i}: fd {fd:e} vs analytic {:e}",
                grad[i]
            );
            if resolution <= 1e-6 * magnitude {
                checked += 1;
                worst = worst.max(diff / magnitude);
            } else {
                below_floor += 1;
            }
        }
    }
    println!("max relative error {worst:e} over {checked} coordinates ({below_floor} near the difference resolution)");
    assert!(checked > 0);
    assert!(worst < 1e-4, "max relative error {worst}");
}
