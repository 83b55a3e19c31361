//! Deployment: the trained policy and conventional GP-based (safe) AL
//! baselines on analytic or pool problems.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::benchmarks::{subset, BenchmarkProblem, ProblemKind};
use crate::gp::{self, fit_type2_ml, Dataset, FitResult, KernelParams, Mat, Posterior};
use crate::instrument;
use crate::objectives::minunsafe_score;
use crate::policy::Policy;
use crate::sampler::BoxRegion;
use crate::{Error, Result};

pub const DEFAULT_DISCRETIZATION: usize = 5000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Policy,
    GpAl,
    SafeGpAl,
    #[serde(rename = "minunsafe_gp_al")]
    MinUnsafe,
    Random,
    SafeRandom,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Policy,
        Method::GpAl,
        Method::SafeGpAl,
        Method::MinUnsafe,
        Method::Random,
        Method::SafeRandom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Policy => "policy",
            Method::GpAl => "gp_al",
            Method::SafeGpAl => "safe_gp_al",
            Method::MinUnsafe => "minunsafe_gp_al",
            Method::Random => "random",
            Method::SafeRandom => "safe_random",
        }
    }

    pub fn is_safe(self) -> bool {
        matches!(self, Method::SafeGpAl | Method::MinUnsafe | Method::SafeRandom)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeployConfig {
    pub method: Method,
    pub budget: usize,
    pub n_init: usize,
    pub gamma: f64,
    /// Candidate count for continuous problems.
    pub discretization: usize,
    /// Draw the continuous candidate set once per run instead of every step.
    pub fixed_candidates: bool,
    pub seed: u64,
}

impl DeployConfig {
    pub fn new(method: Method, budget: usize, n_init: usize, seed: u64) -> Self {
        Self {
            method,
            budget,
            n_init,
            gamma: 0.05,
            discretization: DEFAULT_DISCRETIZATION,
            fixed_candidates: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::InvalidParameter("budget must be positive".into()));
        }
        if self.method.is_safe() && !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidParameter(format!("gamma {} outside (0, 1]", self.gamma)));
        }
        if self.discretization < self.budget {
            return Err(Error::InvalidParameter("discretization smaller than the budget".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub method: Method,
    pub problem: String,
    pub seed: u64,
    pub n_init: usize,
    /// One row per query.
    pub queries: Vec<Vec<f64>>,
    pub outputs: Vec<f64>,
    pub safety: Option<Vec<f64>>,
    /// Noise-free constraint satisfaction of each query, when known.
    pub truly_safe: Option<Vec<bool>>,
    pub pool_indices: Option<Vec<usize>>,
    pub query_seconds: Vec<f64>,
    /// Steps whose safe set was empty.
    pub fallback_steps: usize,
    pub loop_factorizations: u64,
    pub loop_fits: u64,
    pub final_fit: FitResult,
    pub rmse: f64,
    pub safe_fraction: Option<f64>,
}

/// Next query picked from a candidate set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepChoice {
    pub index: usize,
    pub fallback: bool,
}

/// Hyperparameters used before a history can support a Type-II ML fit.
pub fn prior_fit(dim: usize) -> FitResult {
    FitResult {
        kernel: KernelParams::isotropic(1.0, 0.2, dim).expect("positive"),
        noise_var: 0.01,
        lml: f64::NAN,
        degraded: true,
    }
}

fn fit(inputs: &Mat, values: &[f64]) -> Result<FitResult> {
    if inputs.nrows() < 2 {
        Ok(prior_fit(inputs.ncols()))
    } else {
        fit_type2_ml(inputs, values)
    }
}

/// Zero-mean predictive means and noise-inclusive variances at `candidates`.
fn predict(history_x: &Mat, values: &[f64], candidates: &Mat) -> Result<(Vec<f64>, Vec<f64>)> {
    let f = fit(history_x, values)?;
    let post = Posterior::new(history_x, values, &f.kernel, f.noise_var)?;
    let (m, v) = post.predict_diag(candidates);
    Ok((m.iter().copied().collect(), v.iter().copied().collect()))
}

fn argmax(scores: impl Iterator<Item = (usize, f64)>) -> Option<usize> {
    scores
        .fold(None, |best: Option<(usize, f64)>, (i, s)| match best {
            Some((_, b)) if b >= s => best,
            _ => Some((i, s)),
        })
        .map(|b| b.0)
}

fn safety_values(history: &Dataset) -> Result<&[f64]> {
    history
        .safety
        .as_deref()
        .ok_or_else(|| Error::InvalidParameter("safe method on a history without safety data".into()))
}

/// Candidate with the highest predictive entropy.
pub fn conventional_al_step(history: &Dataset, candidates: &Mat) -> Result<StepChoice> {
    let (_, var) = predict(&history.inputs, &history.outputs, candidates)?;
    let index = argmax(var.iter().map(|v| gp::scalar_entropy(*v)).enumerate()).ok_or(Error::EmptyHistory)?;
    Ok(StepChoice { index, fallback: false })
}

/// Probabilities `p(z ≥ 0)` at the candidates under a fitted safety GP.
fn safety_probs(history: &Dataset, candidates: &Mat) -> Result<Vec<f64>> {
    let (m, v) = predict(&history.inputs, safety_values(history)?, candidates)?;
    Ok(m.iter().zip(&v).map(|(m, v)| gp::safety_prob_nonneg(*m, *v)).collect())
}

/// Entropy maximization restricted to `p(z ≥ 0) ≥ 1 − γ`, falling back to
/// the most probably safe candidate.
pub fn safe_al_step(history: &Dataset, candidates: &Mat, gamma: f64) -> Result<StepChoice> {
    let (_, var) = predict(&history.inputs, &history.outputs, candidates)?;
    let p_safe = safety_probs(history, candidates)?;
    let safe = p_safe.iter().enumerate().filter(|(_, p)| **p >= 1.0 - gamma).map(|(i, _)| i);
    match argmax(safe.map(|i| (i, gp::scalar_entropy(var[i])))) {
        Some(index) => Ok(StepChoice { index, fallback: false }),
        None => Ok(StepChoice {
            index: argmax(p_safe.iter().copied().enumerate()).ok_or(Error::EmptyHistory)?,
            fallback: true,
        }),
    }
}

/// Unconstrained maximization of entropy minus the clamped unsafe log-probability.
pub fn minunsafe_al_step(history: &Dataset, candidates: &Mat, gamma: f64) -> Result<StepChoice> {
    let (_, var) = predict(&history.inputs, &history.outputs, candidates)?;
    let (sm, sv) = predict(&history.inputs, safety_values(history)?, candidates)?;
    let scores = (0..var.len()).map(|i| (i, minunsafe_score(var[i], sm[i], sv[i], gamma)));
    Ok(StepChoice {
        index: argmax(scores).ok_or(Error::EmptyHistory)?,
        fallback: false,
    })
}

pub fn random_step(n_candidates: usize, rng: &mut impl Rng) -> StepChoice {
    StepChoice {
        index: rng.random_range(0..n_candidates),
        fallback: false,
    }
}

/// Uniform over the GP-estimated safe set, with the same fallback as
/// [`safe_al_step`].
pub fn safe_random_step(history: &Dataset, candidates: &Mat, gamma: f64, rng: &mut impl Rng) -> Result<StepChoice> {
    let p_safe = safety_probs(history, candidates)?;
    let safe: Vec<usize> = (0..p_safe.len()).filter(|&i| p_safe[i] >= 1.0 - gamma).collect();
    if safe.is_empty() {
        return Ok(StepChoice {
            index: argmax(p_safe.iter().copied().enumerate()).ok_or(Error::EmptyHistory)?,
            fallback: true,
        });
    }
    Ok(StepChoice {
        index: safe[rng.random_range(0..safe.len())],
        fallback: false,
    })
}

/// Index of the unqueried pool row nearest to `x`.
fn nearest(data: &Dataset, available: &[usize], x: &[f64]) -> usize {
    let dist = |i: usize| -> f64 { (0..x.len()).map(|d| (data.inputs[(i, d)] - x[d]).powi(2)).sum() };
    let mut best = 0;
    for k in 1..available.len() {
        if dist(available[k]) < dist(available[best]) {
            best = k;
        }
    }
    best
}

struct Run<'a> {
    problem: &'a BenchmarkProblem,
    history: Dataset,
    queries: Vec<Vec<f64>>,
    truly_safe: Vec<bool>,
    pool_taken: Vec<usize>,
    available: Vec<usize>,
}

impl Run<'_> {
    fn record(&mut self, x: Vec<f64>, pool_slot: Option<usize>, rng: &mut impl Rng) -> Result<()> {
        let (y, z, safe) = match (&self.problem.kind, pool_slot) {
            (ProblemKind::Pool(p), Some(slot)) => {
                let i = self.available.swap_remove(slot);
                self.pool_taken.push(i);
                let z = p.data.safety.as_ref().map(|s| s[i]);
                (p.data.outputs[i], z, z.map(|z| z >= 0.0))
            }
            _ => {
                let (y, z) = self.problem.observe(&x, rng)?;
                let safe = self.problem.evaluate_q(&x)?.map(|q| q >= 0.0);
                (y, z, safe)
            }
        };
        if let Some(s) = safe {
            self.truly_safe.push(s);
        }
        self.history.push(&x, y, z);
        self.queries.push(x);
        Ok(())
    }
}

/// Runs one deployment and scores it with a Type-II ML GP on all collected data.
pub fn deploy(problem: &BenchmarkProblem, config: &DeployConfig, policy: Option<&Policy>) -> Result<RunResult> {
    config.validate()?;
    let d = problem.dim;
    if config.method.is_safe() && !problem.constrained() {
        return Err(Error::InvalidParameter(format!("{} needs a constrained problem", config.method)));
    }
    let policy = match (config.method, policy) {
        (Method::Policy, Some(p)) => {
            if p.config().dim != d {
                return Err(Error::Dimension(format!("{}-D policy on a {d}-D problem", p.config().dim)));
            }
            Some(p)
        }
        (Method::Policy, None) => return Err(Error::InvalidParameter("policy method without a policy".into())),
        _ => None,
    };
    let stream = |k: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(config.seed);
        r.set_stream(k);
        r
    };
    let (mut test_rng, mut init_rng, mut rng) = (stream(1), stream(2), stream(3));
    let test = problem.test_set(&mut test_rng)?;
    let (mut initial, init_idx) = problem.initial_data(config.n_init, &mut init_rng)?;
    if !problem.constrained() {
        initial.safety = None;
    }
    let available = match &problem.kind {
        ProblemKind::Pool(p) => p.pool.iter().copied().filter(|i| !init_idx.contains(i)).collect(),
        ProblemKind::Analytic(_) => Vec::new(),
    };
    if problem.is_pool() && available.len() < config.budget {
        return Err(Error::InvalidParameter(format!("pool of {} for budget {}", available.len(), config.budget)));
    }
    let mut run = Run {
        problem,
        history: initial,
        queries: Vec::new(),
        truly_safe: Vec::new(),
        pool_taken: Vec::new(),
        available,
    };
    let fixed = (config.fixed_candidates && !problem.is_pool())
        .then(|| BoxRegion::unit(d).sample(config.discretization, &mut rng));
    let mut seconds = Vec::with_capacity(config.budget);
    let mut fallback_steps = 0;
    let before = instrument::snapshot();
    for t in 0..config.budget {
        let start = Instant::now();
        let outcome = (|| -> Result<(Vec<f64>, Option<usize>, bool)> {
            if let Some(p) = policy {
                let x = p.act(config.budget - t, &run.history)?;
                return Ok(match &problem.kind {
                    ProblemKind::Pool(pp) => {
                        let slot = nearest(&pp.data, &run.available, &x);
                        (pp.data.row(run.available[slot]), Some(slot), false)
                    }
                    ProblemKind::Analytic(_) => (x, None, false),
                });
            }
            let candidates = match (&problem.kind, &fixed) {
                (ProblemKind::Pool(pp), _) => subset(&pp.data, &run.available).inputs,
                (_, Some(c)) => c.clone(),
                _ => BoxRegion::unit(d).sample(config.discretization, &mut rng),
            };
            let h = &run.history;
            let choice = match config.method {
                Method::GpAl => conventional_al_step(h, &candidates)?,
                Method::SafeGpAl => safe_al_step(h, &candidates, config.gamma)?,
                Method::MinUnsafe => minunsafe_al_step(h, &candidates, config.gamma)?,
                Method::Random => random_step(candidates.nrows(), &mut rng),
                Method::SafeRandom => safe_random_step(h, &candidates, config.gamma, &mut rng)?,
                Method::Policy => unreachable!("handled above"),
            };
            let x: Vec<f64> = candidates.row(choice.index).iter().copied().collect();
            Ok((x, problem.is_pool().then_some(choice.index), choice.fallback))
        })();
        let partial = |run: &Run<'_>, e: Error| Error::Deployment {
            step: t,
            queries: run.queries.clone(),
            source: Box::new(e),
        };
        let (x, slot, fallback) = outcome.map_err(|e| partial(&run, e))?;
        if let Err(e) = run.record(x, slot, &mut rng) {
            return Err(partial(&run, e));
        }
        seconds.push(start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE));
        fallback_steps += usize::from(fallback);
    }
    let loop_counts = instrument::snapshot().since(before);

    let final_fit = fit(&run.history.inputs, &run.history.outputs)?;
    let post = Posterior::new(&run.history.inputs, &run.history.outputs, &final_fit.kernel, final_fit.noise_var)?;
    let (mean, _) = post.predict_diag(&test.inputs);
    let mse = test.outputs.iter().zip(mean.iter()).map(|(t, m)| (t - m).powi(2)).sum::<f64>() / test.len() as f64;
    let n0 = config.n_init;
    let safe_fraction = (!run.truly_safe.is_empty())
        .then(|| run.truly_safe.iter().filter(|s| **s).count() as f64 / run.truly_safe.len() as f64);
    Ok(RunResult {
        method: config.method,
        problem: problem.name.clone(),
        seed: config.seed,
        n_init: n0,
        queries: run.queries,
        outputs: run.history.outputs[n0..].to_vec(),
        safety: run.history.safety.as_ref().map(|s| s[n0..].to_vec()),
        truly_safe: (!run.truly_safe.is_empty()).then_some(run.truly_safe),
        pool_indices: problem.is_pool().then_some(run.pool_taken),
        query_seconds: seconds,
        fallback_steps,
        loop_factorizations: loop_counts.factorizations,
        loop_fits: loop_counts.fits,
        final_fit,
        rmse: mse.sqrt(),
        safe_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{EncoderMode, PolicyConfig};

    fn one_point(x: f64) -> Dataset {
        Dataset::new(Mat::from_element(1, 1, x), vec![0.3], Some(vec![1.0])).unwrap()
    }

    #[test]
    fn entropy_argmax_at_boundary() {
        let cands = Mat::from_fn(101, 1, |i, _| i as f64 / 100.0);
        let c = conventional_al_step(&one_point(0.5), &cands).unwrap();
        assert!(c.index == 0 || c.index == 100);
        let c = conventional_al_step(&one_point(0.3), &cands).unwrap();
        assert_eq!(c.index, 100);
    }

    #[test]
    fn argmax_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Mat::from_fn(6, 2, |_, _| rng.random());
        let y: Vec<f64> = (0..6).map(|i| (3.0 * x[(i, 0)]).sin() + x[(i, 1)]).collect();
        let z: Vec<f64> = (0..6).map(|i| 0.5 - x[(i, 0)]).collect();
        let h = Dataset::new(x.clone(), y.clone(), Some(z.clone())).unwrap();
        let cands = BoxRegion::unit(2).sample(300, &mut rng);
        let c = conventional_al_step(&h, &cands).unwrap();
        let f = fit_type2_ml(&x, &y).unwrap();
        let brute: Vec<f64> = (0..300)
            .map(|i| {
                let row = Mat::from_fn(1, 2, |_, j| cands[(i, j)]);
                let g = gp::gp_posterior(&x, &y, &row, None, &f.kernel, f.noise_var).unwrap();
                gp::entropy(&g).unwrap()
            })
            .collect();
        let best = brute.iter().cloned().enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
        assert_eq!(c.index, best);
        let m = minunsafe_al_step(&h, &cands, 0.05).unwrap();
        let fq = fit_type2_ml(&x, &z).unwrap();
        let brute: Vec<f64> = (0..300)
            .map(|i| {
                let row = Mat::from_fn(1, 2, |_, j| cands[(i, j)]);
                let gt = gp::gp_posterior(&x, &y, &row, None, &f.kernel, f.noise_var).unwrap();
                let gq = gp::gp_posterior(&x, &z, &row, None, &fq.kernel, fq.noise_var).unwrap();
                let pu = 1.0 - gp::safety_prob_nonneg(gq.mean[0], gq.covariance[(0, 0)]);
                gp::entropy(&gt).unwrap() - pu.max(0.05).ln()
            })
            .collect();
        let best = brute.iter().cloned().enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
        assert_eq!(m.index, best);
    }

    #[test]
    fn full_tolerance_is_conventional() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Mat::from_fn(5, 1, |_, _| rng.random());
        let h = Dataset::new(x.clone(), (0..5).map(|i| x[(i, 0)].sin()).collect(), Some(vec![-1.0, 1.0, 2.0, -0.5, 0.3])).unwrap();
        let cands = BoxRegion::unit(1).sample(500, &mut rng);
        assert_eq!(safe_al_step(&h, &cands, 1.0).unwrap().index, conventional_al_step(&h, &cands).unwrap().index);
    }

    #[test]
    fn minunsafe_agrees_when_everything_is_safe() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Mat::from_fn(8, 1, |_, _| rng.random());
        let h = Dataset::new(x.clone(), (0..8).map(|i| (4.0 * x[(i, 0)]).cos()).collect(), Some(vec![8.0; 8])).unwrap();
        let cands = BoxRegion::unit(1).sample(400, &mut rng);
        let s = safe_al_step(&h, &cands, 0.05).unwrap();
        assert!(!s.fallback);
        assert_eq!(s.index, minunsafe_al_step(&h, &cands, 0.05).unwrap().index);
    }

    #[test]
    fn empty_safe_set_falls_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Mat::from_fn(6, 1, |_, _| rng.random());
        let z: Vec<f64> = (0..6).map(|i| -3.0 - x[(i, 0)]).collect();
        let h = Dataset::new(x, vec![0.0; 6], Some(z)).unwrap();
        let cands = BoxRegion::unit(1).sample(200, &mut rng);
        let s = safe_al_step(&h, &cands, 0.05).unwrap();
        assert!(s.fallback);
        let r = safe_random_step(&h, &cands, 0.05, &mut rng).unwrap();
        assert!(r.fallback);
        assert_eq!(r.index, s.index);
    }

    #[test]
    fn one_fit_per_model_per_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Mat::from_fn(6, 1, |_, _| rng.random());
        let h = Dataset::new(x, vec![0.1, 0.2, 0.3, 0.0, -0.1, 0.5], Some(vec![1.0; 6])).unwrap();
        let cands = BoxRegion::unit(1).sample(100, &mut rng);
        let count = |f: &dyn Fn()| {
            let a = instrument::snapshot();
            f();
            instrument::snapshot().since(a).fits
        };
        assert_eq!(count(&|| { conventional_al_step(&h, &cands).unwrap(); }), 1);
        assert_eq!(count(&|| { safe_al_step(&h, &cands, 0.05).unwrap(); }), 2);
        assert_eq!(count(&|| { minunsafe_al_step(&h, &cands, 0.05).unwrap(); }), 2);
    }

    fn small_policy(dim: usize, safety: bool) -> Policy {
        let cfg = PolicyConfig {
            dim,
            embed_dim: 16,
            hidden: 32,
            mode: EncoderMode::Attention,
            safety_branch: safety,
            budget_input: true,
            budget_scale: 10,
        };
        Policy::init(cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap()
    }

    #[test]
    fn policy_deployment_does_no_gp_work_in_loop() {
        let p = small_policy(2, true);
        let problem = BenchmarkProblem::simionescu();
        let cfg = DeployConfig::new(Method::Policy, 6, 2, 1);
        let r = deploy(&problem, &cfg, Some(&p)).unwrap();
        assert_eq!(r.loop_factorizations, 0);
        assert_eq!(r.loop_fits, 0);
        assert_eq!(r.queries.len(), 6);
        assert!(r.query_seconds.iter().all(|s| *s > 0.0));
        let f = r.safe_fraction.unwrap();
        assert!((0.0..=1.0).contains(&f));
        let again = deploy(&problem, &cfg, Some(&p)).unwrap();
        assert_eq!(again.queries, r.queries);
        assert_eq!(again.outputs, r.outputs);
        assert_eq!(again.rmse.to_bits(), r.rmse.to_bits());
    }

    #[test]
    fn pool_runs_never_repeat() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 120;
        let x = Mat::from_fn(n, 1, |_, _| rng.random());
        let y: Vec<f64> = (0..n).map(|i| (6.0 * x[(i, 0)]).sin()).collect();
        let data = Dataset::new(x, y, None).unwrap();
        let problem = BenchmarkProblem::pool("airline", data, None, &mut rng).unwrap();
        let p = small_policy(1, false);
        for method in [Method::Policy, Method::GpAl, Method::Random] {
            let r = deploy(&problem, &DeployConfig::new(method, 15, 1, 3), Some(&p)).unwrap();
            let mut idx = r.pool_indices.clone().unwrap();
            let ProblemKind::Pool(pp) = &problem.kind else { unreachable!() };
            assert!(idx.iter().all(|i| !pp.test.contains(i)));
            idx.sort_unstable();
            idx.dedup();
            assert_eq!(idx.len(), 15, "{method}");
        }
    }

    #[test]
    fn unconstrained_problem_rejects_safe_methods() {
        let cfg = DeployConfig::new(Method::SafeGpAl, 5, 1, 0);
        assert!(deploy(&BenchmarkProblem::sin(), &cfg, None).is_err());
    }
}
