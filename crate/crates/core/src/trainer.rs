//! Offline policy training on simulated GP tasks.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, concat_rows, CosineBank, Mat, Tape, Var};
use crate::gp::{Dataset, Posterior};
use crate::objectives::{self, dad_bank, Instance, Objective, ObjectiveInputs, Rollout, Trajectory};
use crate::optim::RAdam;
use crate::policy::{history_rows, BoundPolicy, Checkpoint, EncoderMode, Policy, PolicyConfig};
use crate::sampler::{
    default_grid_size, sample_functions, sample_grid, sample_hyperparams, sample_initial, sample_initial_unconstrained,
    sample_rff, BoxRegion, FourierFunction, TaskHyperParams, DEFAULT_FEATURES, DEFAULT_MAX_ITER,
};
use crate::{Error, Result};

/// Environment variable holding the rayon worker count.
pub const WORKERS_ENV: &str = "SAFEAL_WORKERS";
pub const MAX_CONSECUTIVE_SKIPS: usize = 20;
pub const MONITOR_TASKS: usize = 32;
pub const MONITOR_POINTS: usize = 200;
/// Epochs at the end of training eligible for the returned policy.
pub const SELECTION_EPOCHS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dim: usize,
    pub budget: usize,
    pub n_init: usize,
    pub objective: Objective,
    pub gamma: f64,
    /// Safe task sampling and a safety branch in the policy.
    pub safe: bool,
    pub n_k: usize,
    pub n_fq: usize,
    pub b: usize,
    pub n_features: usize,
    pub n_grid: usize,
    pub lr: f64,
    pub decay: f64,
    pub decay_interval: u64,
    pub total_steps: u64,
    pub epoch_length: u64,
    pub seed: u64,
    pub embed_dim: usize,
    pub hidden: usize,
    pub mode: EncoderMode,
}

impl TrainConfig {
    pub fn new(objective: Objective, dim: usize) -> Self {
        let safe = objective.needs_safety();
        let (n_init, budget) = match (safe, dim) {
            (_, d) if d >= 5 => (20, 40),
            (true, 1 | 2) => (5, 40),
            (true, _) => (5, 60),
            (false, _) => (1, 30),
        };
        let (n_fq, b) = match objective {
            Objective::Dad => (200, 10),
            Objective::Safe | Objective::SafeDivision => (5, 1),
            _ => (5, 10),
        };
        Self {
            dim,
            budget,
            n_init,
            objective,
            gamma: 0.05,
            safe,
            n_k: 10,
            n_fq,
            b,
            n_features: DEFAULT_FEATURES,
            n_grid: default_grid_size(dim),
            lr: 1e-3,
            decay: 0.02,
            decay_interval: 50,
            total_steps: if objective == Objective::Dad { 20_000 } else { 10_000 },
            epoch_length: 50,
            seed: 0,
            embed_dim: 128,
            hidden: 512,
            mode: EncoderMode::Attention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.dim == 0 || self.budget == 0 || self.n_init == 0 {
            return bad("dim, budget and n_init must be positive".into());
        }
        if self.n_k == 0 || self.b == 0 || self.n_features == 0 || self.epoch_length == 0 || self.decay_interval == 0 {
            return bad("batch sizes, features and intervals must be positive".into());
        }
        if self.objective != Objective::Dad && self.n_fq == 0 {
            return bad("n_fq must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if self.objective.needs_safety() && !self.safe {
            return bad(format!("{} requires safe task sampling", self.objective));
        }
        if self.objective == Objective::Dad && self.safe {
            return bad("DAD trains without a safety channel".into());
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..1.0).contains(&self.decay) {
            return bad(format!("learning rate {} / decay {}", self.lr, self.decay));
        }
        self.policy_config().validate()
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            dim: self.dim,
            embed_dim: self.embed_dim,
            hidden: self.hidden,
            mode: self.mode,
            safety_branch: self.safe,
            budget_input: self.objective != Objective::Dad,
            budget_scale: self.budget,
        }
    }

    /// Learning rate in effect at optimizer step `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        self.lr * (1.0 - self.decay).powi((step / self.decay_interval) as i32)
    }
}

/// One training instance with every random quantity drawn up front.
#[derive(Debug, Clone)]
pub struct InstanceSpec {
    pub hyper: Arc<TaskHyperParams>,
    pub f: Arc<FourierFunction>,
    pub q: Option<Arc<FourierFunction>>,
    pub initial: Dataset,
    pub t_sim: usize,
    /// Additive observation noise for the `T_sim` queries.
    pub noise: Vec<f64>,
    pub safety_noise: Option<Vec<f64>>,
    pub grid: Option<Dataset>,
    pub dad_bank: Option<Arc<CosineBank>>,
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn noise(n: usize, var: f64, rng: &mut impl Rng) -> Vec<f64> {
    let sd = var.sqrt();
    (0..n).map(|_| sd * normal(rng)).collect()
}

/// `N_k × N_fq × B` instances (`N_k × B` for DAD) in index order.
pub fn sample_batch(config: &TrainConfig, rng: &mut impl Rng) -> Vec<InstanceSpec> {
    let d = config.dim;
    let mut out = Vec::new();
    for _ in 0..config.n_k {
        let hyper = Arc::new(sample_hyperparams(d, rng));
        if config.objective == Objective::Dad {
            let f0 = sample_rff(&hyper.task_kernel, config.n_features, rng);
            let others: Vec<_> = (0..config.n_fq)
                .map(|_| sample_rff(&hyper.task_kernel, config.n_features, rng))
                .collect();
            let bank = dad_bank(&f0, &others);
            let f0 = Arc::new(f0);
            for _ in 0..config.b {
                let initial = sample_initial_unconstrained(&f0, hyper.task_noise_var, config.n_init, rng);
                out.push(InstanceSpec {
                    hyper: Arc::clone(&hyper),
                    f: Arc::clone(&f0),
                    q: None,
                    initial,
                    t_sim: config.budget,
                    noise: noise(config.budget, hyper.task_noise_var, rng),
                    safety_noise: None,
                    grid: None,
                    dad_bank: Some(Arc::clone(&bank)),
                });
            }
            continue;
        }
        for _ in 0..config.n_fq {
            let (f, q) = if config.safe {
                let (f, q) = sample_functions(&hyper, config.n_features, rng);
                (f, Some(Arc::new(q)))
            } else {
                (sample_rff(&hyper.task_kernel, config.n_features, rng), None)
            };
            let f = Arc::new(f);
            let t_sim = rng.random_range(1..=config.budget);
            for _ in 0..config.b {
                let initial = match &q {
                    Some(q) => {
                        let seed_box = BoxRegion::centered(d);
                        sample_initial(&f, q, &hyper, config.n_init, &seed_box, DEFAULT_MAX_ITER, rng).0
                    }
                    None => sample_initial_unconstrained(&f, hyper.task_noise_var, config.n_init, rng),
                };
                let eps = noise(t_sim, hyper.task_noise_var, rng);
                let eps_q = q.as_ref().map(|_| noise(t_sim, hyper.safety_noise_var, rng));
                let grid = config.objective.needs_grid().then(|| {
                    let gx = sample_grid(config.n_grid, d, rng);
                    let gy: Vec<f64> = f
                        .eval_rows(&gx)
                        .into_iter()
                        .zip(noise(config.n_grid, hyper.task_noise_var, rng))
                        .map(|(v, e)| v + e)
                        .collect();
                    Dataset::new(gx, gy, None).expect("grid inside the unit box")
                });
                out.push(InstanceSpec {
                    hyper: Arc::clone(&hyper),
                    f: Arc::clone(&f),
                    q: q.clone(),
                    initial,
                    t_sim,
                    noise: eps,
                    safety_noise: eps_q,
                    grid,
                    dad_bank: None,
                });
            }
        }
    }
    out
}

/// Runs the policy for `T_sim` steps on the tape; returns the trajectory and
/// its plain values.
pub fn rollout_policy<'t>(bound: &BoundPolicy<'_, 't>, tape: &'t Tape, spec: &InstanceSpec) -> Result<(Trajectory<'t>, Rollout)> {
    let init = &spec.initial;
    let mut task_hist = tape.constant(history_rows(&init.inputs, &init.outputs));
    let mut safety_hist = match (&spec.q, &init.safety) {
        (Some(_), Some(z)) => Some(tape.constant(history_rows(&init.inputs, z))),
        (Some(_), None) => return Err(Error::InvalidParameter("safe instance without initial safety data".into())),
        _ => None,
    };
    let mut xs = Vec::with_capacity(spec.t_sim);
    let mut ys = Vec::with_capacity(spec.t_sim);
    let mut zs = Vec::with_capacity(spec.t_sim);
    let mut trace = Vec::with_capacity(spec.t_sim);
    for t in 0..spec.t_sim {
        let remaining = spec.t_sim - t;
        trace.push(remaining);
        let x = bound.forward(remaining, task_hist, safety_hist)?;
        assert!(x.value().iter().all(|v| (0.0..=1.0).contains(v)), "policy left the unit box");
        let y = spec.f.eval_var(x).shift(spec.noise[t]);
        task_hist = concat_rows(&[task_hist, concat_cols(&[x, y])]);
        if let (Some(q), Some(eq)) = (&spec.q, &spec.safety_noise) {
            let z = q.eval_var(x).shift(eq[t]);
            safety_hist = safety_hist.map(|h| concat_rows(&[h, concat_cols(&[x, z])]));
            zs.push(z);
        }
        xs.push(x);
        ys.push(y);
    }
    let traj = Trajectory {
        queries: concat_rows(&xs),
        outputs: concat_rows(&ys),
        safety: (!zs.is_empty()).then(|| concat_rows(&zs)),
    };
    let rollout = Rollout {
        t_sim: spec.t_sim,
        queries: (*traj.queries.value()).clone(),
        outputs: traj.outputs.value().as_slice().to_vec(),
        safety: traj.safety.map(|z| z.value().as_slice().to_vec()),
        budget_trace: trace,
    };
    Ok((traj, rollout))
}

/// Objective value of one instance (to be maximized).
pub fn instance_score<'t>(
    bound: &BoundPolicy<'_, 't>,
    tape: &'t Tape,
    spec: &InstanceSpec,
    objective: Objective,
    gamma: f64,
) -> Result<(Var<'t>, Rollout)> {
    let (traj, rollout) = rollout_policy(bound, tape, spec)?;
    let inst = Instance {
        hyper: &spec.hyper,
        initial: &spec.initial,
    };
    let inputs = ObjectiveInputs {
        gamma,
        grid: spec.grid.clone(),
        dad_bank: spec.dad_bank.clone(),
    };
    Ok((objectives::score(objective, &inst, &traj, &inputs)?, rollout))
}

/// `−objective / (N_init + T_sim)` with its flat parameter gradient.
pub fn instance_loss(policy: &Policy, spec: &InstanceSpec, objective: Objective, gamma: f64) -> Result<(f64, Vec<f64>)> {
    let tape = Tape::new();
    let bound = policy.bind(&tape, true);
    let (score, _) = instance_score(&bound, &tape, spec, objective, gamma)?;
    let divisor = spec.initial.len() + spec.t_sim;
    let loss = score.scale(-1.0 / divisor as f64);
    let grads = tape.gradient(loss);
    Ok((loss.scalar(), policy.flat_gradient(&bound, &grads)))
}

/// Batch-mean loss and gradient, reduced in instance order.
pub fn batch_loss(
    policy: &Policy,
    specs: &[InstanceSpec],
    objective: Objective,
    gamma: f64,
    pool: Option<&rayon::ThreadPool>,
) -> Result<(f64, Vec<f64>)> {
    let eval = || -> Vec<Result<(f64, Vec<f64>)>> {
        specs
            .par_iter()
            .map(|s| instance_loss(policy, s, objective, gamma))
            .collect()
    };
    let parts = match pool {
        Some(p) => p.install(eval),
        None => eval(),
    };
    let n = specs.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; policy.n_params()];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    for g in grad.iter_mut() {
        *g /= n;
    }
    Ok((loss / n, grad))
}

/// Random stream for step `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: u64,
        loss: f64,
        lr: f64,
        skipped: bool,
    },
    Epoch {
        epoch: u64,
        step: u64,
        mean_loss: f64,
        rmse: f64,
    },
}

/// Held-out task for the end-of-epoch RMSE probe.
#[derive(Debug, Clone)]
pub struct MonitorTask {
    pub hyper: TaskHyperParams,
    pub f: FourierFunction,
    pub q: Option<FourierFunction>,
    pub initial: Dataset,
    pub noise: Vec<f64>,
    pub safety_noise: Option<Vec<f64>>,
    pub test_inputs: Mat,
}

pub fn monitor_tasks(config: &TrainConfig, count: usize, rng: &mut impl Rng) -> Vec<MonitorTask> {
    let d = config.dim;
    (0..count)
        .map(|_| {
            let hyper = sample_hyperparams(d, rng);
            let (f, q, initial) = if config.safe {
                let (f, q) = sample_functions(&hyper, config.n_features, rng);
                let (init, _) =
                    sample_initial(&f, &q, &hyper, config.n_init, &BoxRegion::centered(d), DEFAULT_MAX_ITER, rng);
                (f, Some(q), init)
            } else {
                let f = sample_rff(&hyper.task_kernel, config.n_features, rng);
                let init = sample_initial_unconstrained(&f, hyper.task_noise_var, config.n_init, rng);
                (f, None, init)
            };
            let eps = noise(config.budget, hyper.task_noise_var, rng);
            let eps_q = q.as_ref().map(|_| noise(config.budget, hyper.safety_noise_var, rng));
            let test_inputs = BoxRegion::unit(d).sample(MONITOR_POINTS, rng);
            MonitorTask {
                hyper,
                f,
                q,
                initial,
                noise: eps,
                safety_noise: eps_q,
                test_inputs,
            }
        })
        .collect()
}

/// Collects `T` points on `task` by running `choose` on the growing history.
pub fn collect_on_task(
    task: &MonitorTask,
    budget: usize,
    mut choose: impl FnMut(usize, &Dataset) -> Result<Vec<f64>>,
) -> Result<Dataset> {
    let mut data = task.initial.clone();
    if task.q.is_none() {
        data.safety = None;
    }
    for t in 0..budget {
        let x = choose(budget - t, &data)?;
        let y = task.f.eval(&x) + task.noise[t];
        let z = match (&task.q, &task.safety_noise) {
            (Some(q), Some(e)) => Some(q.eval(&x) + e[t]),
            _ => None,
        };
        data.push(&x, y, z);
    }
    Ok(data)
}

/// RMSE of the true-hyperparameter GP mean against `f` on the task's test inputs.
pub fn gp_test_rmse(task: &MonitorTask, data: &Dataset) -> Result<f64> {
    let post = Posterior::new(&data.inputs, &data.outputs, &task.hyper.task_kernel, task.hyper.task_noise_var)?;
    let (mean, _) = post.predict_diag(&task.test_inputs);
    let truth = task.f.eval_rows(&task.test_inputs);
    let mse = truth.iter().zip(mean.iter()).map(|(t, m)| (t - m).powi(2)).sum::<f64>() / truth.len() as f64;
    Ok(mse.sqrt())
}

pub fn policy_rmse(policy: &Policy, tasks: &[MonitorTask], budget: usize) -> Result<f64> {
    let mut total = 0.0;
    for task in tasks {
        let data = collect_on_task(task, budget, |remaining, hist| policy.act(remaining, hist))?;
        total += gp_test_rmse(task, &data)?;
    }
    Ok(total / tasks.len() as f64)
}

pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("{WORKERS_ENV}={v:?} is not a count")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Training(e.to_string()))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Progress {
    step: u64,
    epoch_losses: Vec<f64>,
    consecutive_skips: usize,
    skipped_total: u64,
    best_loss: Option<f64>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub policy: Policy,
    pub optimizer: RAdam,
    best: Option<Policy>,
    progress: Progress,
    pub log: Vec<LogRecord>,
    monitor: Vec<MonitorTask>,
    pool: rayon::ThreadPool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Policy with the lowest epoch-mean loss among the final epochs.
    pub policy: Policy,
    pub last: Policy,
    pub log: Vec<LogRecord>,
    pub skipped_steps: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let policy = Policy::init(config.policy_config(), &mut rng)?;
        Self::from_parts(config, policy, None, None, Progress::default())
    }

    fn from_parts(
        config: TrainConfig,
        policy: Policy,
        optimizer: Option<RAdam>,
        best: Option<Policy>,
        progress: Progress,
    ) -> Result<Self> {
        let mut mrng = ChaCha8Rng::seed_from_u64(config.seed);
        mrng.set_stream(u64::MAX);
        let monitor = monitor_tasks(&config, MONITOR_TASKS, &mut mrng);
        Ok(Self {
            optimizer: optimizer.unwrap_or_else(|| RAdam::new(policy.n_params())),
            config,
            policy,
            best,
            progress,
            log: Vec::new(),
            monitor,
            pool: worker_pool()?,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.progress.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Extends (or shortens) the run; the learning-rate schedule is unchanged.
    pub fn set_total_steps(&mut self, total: u64) -> Result<()> {
        if total < self.progress.step {
            return Err(Error::InvalidParameter(format!(
                "total_steps {total} is behind the checkpoint at step {}",
                self.progress.step
            )));
        }
        self.config.total_steps = total;
        Ok(())
    }

    /// One optimizer step; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let step = self.progress.step;
        let mut rng = step_rng(self.config.seed, step);
        let specs = sample_batch(&self.config, &mut rng);
        let lr = self.config.lr_at(self.optimizer.step);
        let (loss, grad) = match batch_loss(&self.policy, &specs, self.config.objective, self.config.gamma, Some(&self.pool)) {
            Ok(v) => v,
            Err(Error::SingularSystem { .. }) => (f64::NAN, Vec::new()),
            Err(e) => return Err(e),
        };
        let finite = loss.is_finite() && grad.iter().all(|g| g.is_finite());
        if finite {
            let mut flat = self.policy.flat();
            self.optimizer.update(&mut flat, &grad, lr);
            self.policy.set_flat(&flat)?;
            self.progress.consecutive_skips = 0;
            self.progress.epoch_losses.push(loss);
        } else {
            log::warn!("step {step}: non-finite loss, skipped");
            self.progress.consecutive_skips += 1;
            self.progress.skipped_total += 1;
            if self.progress.consecutive_skips >= MAX_CONSECUTIVE_SKIPS {
                return Err(Error::Training(format!("{MAX_CONSECUTIVE_SKIPS} consecutive non-finite steps")));
            }
        }
        self.log.push(LogRecord::Step {
            step,
            loss,
            lr,
            skipped: !finite,
        });
        self.progress.step += 1;
        if self.progress.step.is_multiple_of(self.config.epoch_length) {
            self.end_epoch()?;
        }
        Ok(loss)
    }

    fn end_epoch(&mut self) -> Result<()> {
        let losses = std::mem::take(&mut self.progress.epoch_losses);
        let mean_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };
        let epoch = self.progress.step / self.config.epoch_length;
        let rmse = policy_rmse(&self.policy, &self.monitor, self.config.budget)?;
        self.log.push(LogRecord::Epoch {
            epoch,
            step: self.progress.step,
            mean_loss,
            rmse,
        });
        log::info!("epoch {epoch}: mean loss {mean_loss:.5}, held-out RMSE {rmse:.4}");
        let total_epochs = self.config.total_steps / self.config.epoch_length;
        let eligible = epoch + SELECTION_EPOCHS as u64 > total_epochs;
        if eligible && mean_loss.is_finite() && self.progress.best_loss.is_none_or(|b| mean_loss < b) {
            self.progress.best_loss = Some(mean_loss);
            self.best = Some(self.policy.clone());
        }
        Ok(())
    }

    /// Runs until `total_steps` have been taken.
    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.progress.step < self.config.total_steps {
            self.step()?;
        }
        Ok(self.finish())
    }

    pub fn run_until(&mut self, step: u64) -> Result<()> {
        while self.progress.step < step.min(self.config.total_steps) {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            policy: self.best.clone().unwrap_or_else(|| self.policy.clone()),
            last: self.policy,
            log: self.log,
            skipped_steps: self.progress.skipped_total,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            policy: self.policy.clone(),
            optimizer: Some(self.optimizer.clone()),
            best: self.best.clone(),
            meta: serde_json::json!({
                "train_config": self.config,
                "progress": self.progress,
            }),
        }
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: Checkpoint) -> Result<Self> {
        let config: TrainConfig = serde_json::from_value(ck.meta["train_config"].clone())
            .map_err(|e| Error::Checkpoint(format!("train_config: {e}")))?;
        let progress: Progress = serde_json::from_value(ck.meta["progress"].clone())
            .map_err(|e| Error::Checkpoint(format!("progress: {e}")))?;
        if ck.policy.config() != &config.policy_config() {
            return Err(Error::Checkpoint("policy does not match the training config".into()));
        }
        Self::from_parts(config, ck.policy, ck.optimizer, ck.best, progress)
    }
}

pub fn train(config: TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(config)?.run()
}

/// DAD training: fixed `T_sim = T`, no budget input and no safety branch.
pub fn train_dad(mut config: TrainConfig) -> Result<TrainOutcome> {
    config.objective = Objective::Dad;
    config.safe = false;
    train(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(objective: Objective) -> TrainConfig {
        let mut c = TrainConfig::new(objective, 1);
        c.budget = 3;
        c.n_init = 1;
        c.n_k = 2;
        c.n_fq = if objective == Objective::Dad { 5 } else { 1 };
        c.b = 2;
        c.n_features = 20;
        c.n_grid = 10;
        c.embed_dim = 8;
        c.hidden = 16;
        c.mode = EncoderMode::DeepSet;
        c.total_steps = 4;
        c.epoch_length = 2;
        c
    }

    #[test]
    fn table_defaults() {
        let s = TrainConfig::new(Objective::Safe, 2);
        assert_eq!((s.n_k, s.n_fq, s.b), (10, 5, 1));
        let i = TrainConfig::new(Objective::MutualInfo, 1);
        assert_eq!((i.n_k, i.n_fq, i.b, i.n_grid), (10, 5, 10, 100));
        let d = TrainConfig::new(Objective::Dad, 1);
        assert_eq!((d.n_fq, d.total_steps), (200, 20_000));
        assert!(!d.policy_config().budget_input);
        assert!((i.lr_at(49) - 1e-3).abs() < 1e-18);
        assert!((i.lr_at(50) - 0.98e-3).abs() < 1e-18);
        assert!((i.lr_at(100) - 0.98 * 0.98e-3).abs() < 1e-18);
    }

    #[test]
    fn batch_structure() {
        let c = tiny(Objective::Safe);
        let specs = sample_batch(&c, &mut step_rng(1, 0));
        assert_eq!(specs.len(), 4);
        for pair in specs.chunks(2) {
            assert_eq!(pair[0].t_sim, pair[1].t_sim);
            assert!(Arc::ptr_eq(&pair[0].f, &pair[1].f));
            assert_ne!(pair[0].initial, pair[1].initial);
        }
        let mut seen = std::collections::HashSet::new();
        for step in 0..200 {
            for s in sample_batch(&c, &mut step_rng(1, step)) {
                assert!((1..=3).contains(&s.t_sim));
                seen.insert(s.t_sim);
            }
        }
        assert_eq!(seen.len(), 3);
        let u = sample_batch(&tiny(Objective::Entropy), &mut step_rng(1, 0));
        assert!(u.iter().all(|s| s.q.is_none() && s.initial.safety.is_none()));
    }

    #[test]
    fn rollout_budget_trace() {
        let c = tiny(Objective::Safe);
        let policy = Policy::init(c.policy_config(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut spec = sample_batch(&c, &mut step_rng(2, 0)).remove(0);
        spec.t_sim = 3;
        spec.noise = vec![0.0; 3];
        spec.safety_noise = Some(vec![0.0; 3]);
        let tape = Tape::new();
        let bound = policy.bind(&tape, false);
        let (_, r) = rollout_policy(&bound, &tape, &spec).unwrap();
        assert_eq!(r.budget_trace, vec![3, 2, 1]);
        assert_eq!(r.queries.nrows(), 3);
        let x: Vec<f64> = r.queries.row(1).iter().copied().collect();
        assert!((r.outputs[1] - spec.f.eval(&x)).abs() < 1e-12);
        // The deployed policy sees the same history and must pick the same points.
        let mut hist = spec.initial.clone();
        for t in 0..3 {
            let x = policy.act(3 - t, &hist).unwrap();
            let row: Vec<f64> = r.queries.row(t).iter().copied().collect();
            assert_eq!(x, row);
            hist.push(&x, r.outputs[t], Some(r.safety.as_ref().unwrap()[t]));
        }
    }

    #[test]
    fn unconstrained_rollout_has_no_safety() {
        let c = tiny(Objective::Entropy);
        let policy = Policy::init(c.policy_config(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let spec = sample_batch(&c, &mut step_rng(3, 0)).remove(0);
        let tape = Tape::new();
        let (traj, r) = rollout_policy(&policy.bind(&tape, false), &tape, &spec).unwrap();
        assert!(traj.safety.is_none() && r.safety.is_none());
    }

    #[test]
    fn training_is_reproducible_and_resumable() {
        let c = tiny(Objective::Safe);
        let a = train(c.clone()).unwrap();
        let b = train(c.clone()).unwrap();
        assert_eq!(a.last.flat(), b.last.flat());
        assert_eq!(a.log, b.log);
        assert_eq!(a.log.iter().filter(|r| matches!(r, LogRecord::Epoch { .. })).count(), 2);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        let mut t = Trainer::new(c.clone()).unwrap();
        t.run_until(2).unwrap();
        t.checkpoint().save(&path).unwrap();
        let resumed = Trainer::resume(Checkpoint::load(&path).unwrap()).unwrap().run().unwrap();
        assert_eq!(resumed.last.flat(), a.last.flat());
        assert_eq!(resumed.policy.flat(), a.policy.flat());
        let tail: Vec<_> = a.log.iter().skip(3).cloned().collect();
        assert_eq!(resumed.log, tail);
    }

    #[test]
    fn full_tolerance_matches_entropy_training() {
        let mut s = tiny(Objective::Safe);
        s.gamma = 1.0;
        let mut h = s.clone();
        h.objective = Objective::Entropy;
        let (a, b) = (train(s).unwrap(), train(h).unwrap());
        let losses = |o: &TrainOutcome| -> Vec<u64> {
            o.log
                .iter()
                .filter_map(|r| match r {
                    LogRecord::Step { loss, .. } => Some(loss.to_bits()),
                    _ => None,
                })
                .collect()
        };
        assert_eq!(losses(&a), losses(&b));
    }

    #[test]
    fn every_objective_trains_a_step() {
        for obj in Objective::ALL {
            let mut c = tiny(obj);
            c.safe = obj.needs_safety();
            c.total_steps = 1;
            c.epoch_length = 1;
            let out = train(c).unwrap();
            assert_eq!(out.skipped_steps, 0, "{obj}");
        }
    }

    #[test]
    fn dad_score_stays_below_bound() {
        let c = tiny(Objective::Dad);
        let policy = Policy::init(c.policy_config(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for spec in sample_batch(&c, &mut step_rng(4, 0)) {
            assert_eq!(spec.t_sim, c.budget);
            let tape = Tape::new();
            let bound = policy.bind(&tape, false);
            let (s, _) = instance_score(&bound, &tape, &spec, Objective::Dad, 0.0).unwrap();
            assert!(s.scalar() <= ((c.n_fq + 1) as f64).ln() + 1e-12);
        }
    }
}
