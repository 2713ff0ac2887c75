use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::barrier::ConstraintConstants;
use crate::dynamics::ControlVec;
use crate::error::{Error, Result};
use crate::gp::PosteriorBlocks;

/// Monte-Carlo estimate of `P(c_aᵀu + c_b + d ≤ 0)` with
/// `d ~ N(μ_d(u), σ_d²(u))`.
pub fn chance_validate(
    blocks: &PosteriorBlocks,
    cc: &ConstraintConstants,
    u: &ControlVec,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples < 10_000 {
        return Err(Error::Contract(format!(
            "chance validation needs at least 1e4 samples, got {n_samples}"
        )));
    }
    let (mean, var) = blocks.predict(u);
    let base = cc.value(u) + mean;
    let sd = var.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let violations = (0..n_samples)
        .filter(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            base + sd * z <= 0.0
        })
        .count();
    Ok(violations as f64 / n_samples as f64)
}

/// Three-sigma binomial half-width for rate `p` over `n` trials.
pub fn binomial_band(p: f64, n: usize) -> f64 {
    3.0 * (p * (1.0 - p) / n as f64).sqrt()
}
