//! Central finite-difference checks of tape gradients on small fixtures.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::objectives::Objective;
use crate::policy::{EncoderMode, Policy};
use crate::trainer::{instance_loss, sample_batch, TrainConfig};
use crate::Result;

pub const TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub dim: usize,
    pub embed_dim: usize,
    pub n_init: usize,
    /// Upper bound on the simulated horizon.
    pub budget: usize,
    /// Parameter entries compared per check.
    pub entries: usize,
    pub seed: u64,
}

impl Fixture {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            embed_dim: 8,
            n_init: 2,
            budget: 3,
            entries: 24,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub objective: Objective,
    pub dim: usize,
    pub entries: usize,
    pub max_rel_error: f64,
    /// Repeated evaluation at the same parameters reproduced the loss exactly.
    pub deterministic: bool,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn fixture_config(objective: Objective, fx: &Fixture) -> TrainConfig {
    let mut c = TrainConfig::new(objective, fx.dim);
    c.n_init = fx.n_init;
    c.budget = fx.budget;
    c.n_k = 1;
    c.n_fq = 1;
    c.b = 1;
    c.n_grid = 20;
    c.n_features = 50;
    c.embed_dim = fx.embed_dim;
    c.hidden = 16;
    c.mode = EncoderMode::Attention;
    c.seed = fx.seed;
    c
}

/// Compares the policy-parameter gradient of one rollout's loss against
/// central differences. `scale` multiplies the tape gradient before the
/// comparison; anything other than 1 should fail.
pub fn check_with_scale(objective: Objective, fx: &Fixture, scale: f64) -> Result<GradReport> {
    let config = fixture_config(objective, fx);
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(fx.seed);
    let mut policy = Policy::init(config.policy_config(), &mut rng)?;
    let spec = sample_batch(&config, &mut rng).swap_remove(0);
    let gamma = if objective.needs_safety() { 0.3 } else { config.gamma };
    let (loss, grad) = instance_loss(&policy, &spec, objective, gamma)?;
    let deterministic = instance_loss(&policy, &spec, objective, gamma)?.0.to_bits() == loss.to_bits();
    let base = policy.flat();
    let picks = sample(&mut rng, base.len(), fx.entries.min(base.len()));
    let mut max_err: f64 = 0.0;
    let mut at = |theta: &[f64]| -> Result<f64> {
        policy.set_flat(theta)?;
        Ok(instance_loss(&policy, &spec, objective, gamma)?.0)
    };
    for i in picks.iter() {
        let mut p = base.clone();
        p[i] = base[i] + STEP;
        let up = at(&p)?;
        p[i] = base[i] - STEP;
        let down = at(&p)?;
        let fd = (up - down) / (2.0 * STEP);
        max_err = max_err.max(relative_error(scale * grad[i], fd));
    }
    Ok(GradReport {
        objective,
        dim: fx.dim,
        entries: picks.len(),
        max_rel_error: max_err,
        deterministic,
        passed: deterministic && max_err <= TOLERANCE,
    })
}

pub fn check(objective: Objective, fx: &Fixture) -> Result<GradReport> {
    check_with_scale(objective, fx, 1.0)
}

/// Every objective for D ∈ {1, 2}.
pub fn check_all(seed: u64) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for (k, objective) in Objective::ALL.into_iter().enumerate() {
        for dim in [1, 2] {
            out.push(check(objective, &Fixture::new(dim, seed + 10 * k as u64 + dim as u64))?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_gradients_pass() {
        let r = check(Objective::Entropy, &Fixture::new(1, 3)).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.deterministic);
    }

    #[test]
    fn all_objectives_pass() {
        for r in check_all(50).unwrap() {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let r = check_with_scale(Objective::Safe, &Fixture::new(2, 4), -1.0).unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 1.0);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-15);
    }
}
