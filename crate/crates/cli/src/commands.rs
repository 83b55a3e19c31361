use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use safeal::baselines::{deploy as deploy_run, DeployConfig, Method, RunResult, DEFAULT_DISCRETIZATION};
use safeal::benchmarks::{load_pool_csv, BenchmarkProblem};
use safeal::gradcheck::{check_with_scale, Fixture};
use safeal::objectives::Objective;
use safeal::policy::{Checkpoint, Policy};
use safeal::sampler::{sample_hyperparams, sample_task, sample_task_unconstrained, BoxRegion, DEFAULT_FEATURES, DEFAULT_MAX_ITER};
use safeal::trainer::{worker_pool, LogRecord, TrainConfig, Trainer};
use serde_json::{json, Value};

use crate::config::{config_hash, file_hash, parse_value, Settings};
use crate::records::{aggregate, read_runs, render_table, Appender, RunRecord};
use crate::{CliError, CommonArgs, ReportArgs};

const TOP_KEYS: &[&str] = &["seed", "seeds", "out"];
const SECTIONS: &[&str] = &["train", "deploy", "bench", "pool", "sample_tasks", "gradcheck"];

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

/// Config file plus flag overrides; `section` receives `--gamma`,
/// `--budget` and `--checkpoint`.
pub fn settings(args: &CommonArgs, section: &str) -> Result<Settings, CliError> {
    let mut s = match &args.config {
        Some(p) => Settings::load(p)?,
        None => Settings::default(),
    };
    if let Some(seed) = args.seed {
        s.set("seed", json!(seed));
    }
    if let Some(out) = &args.out {
        s.set("out", json!(out.to_string_lossy()));
    }
    if let Some(m) = &args.method {
        s.set("deploy.methods", json!(m));
    }
    if let Some(p) = &args.problem {
        s.set("deploy.problems", json!(p));
    }
    if let Some(g) = args.gamma {
        s.set(&format!("{section}.gamma"), json!(g));
    }
    if let Some(b) = args.budget {
        s.set(&format!("{section}.budget"), json!(b));
    }
    if let Some(c) = &args.checkpoint {
        s.set(&format!("{section}.checkpoint"), json!(c.to_string_lossy()));
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| invalid(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        s.set(k.trim(), parse_value(v.trim()));
    }
    s.check_keys(TOP_KEYS, SECTIONS)?;
    Ok(s)
}

fn check_section(s: &Settings, section: &str, allowed: &[&str]) -> Result<(), CliError> {
    for k in s.section(section).keys() {
        let head = k.split('.').next().unwrap_or(k);
        if !allowed.contains(&head) {
            return Err(invalid(format!("unknown config key \"{section}.{k}\"")));
        }
    }
    Ok(())
}

const TRAIN_EXTRA: &[&str] = &["objective", "dim", "checkpoint", "checkpoint_every", "resume_from"];

/// `train.*` keys applied over the table defaults for the objective and dimension.
pub fn resolve_train(s: &Settings) -> Result<TrainConfig, CliError> {
    let objective: Objective = s.string("train.objective")?.as_deref().unwrap_or("I").parse()?;
    let dim = s.uint("train.dim")?.unwrap_or(1) as usize;
    let mut v = serde_json::to_value(TrainConfig::new(objective, dim)).expect("config serializes");
    let obj = v.as_object_mut().expect("struct");
    for (k, val) in s.section("train") {
        if TRAIN_EXTRA.contains(&k.as_str()) {
            continue;
        }
        if k == "seed" {
            return Err(invalid("train.seed is not a key; use seed or seeds"));
        }
        if !obj.contains_key(&k) {
            return Err(invalid(format!("unknown config key \"train.{k}\"")));
        }
        obj.insert(k, val);
    }
    let config: TrainConfig = serde_json::from_value(v).map_err(|e| invalid(format!("train config: {e}")))?;
    config.validate()?;
    Ok(config)
}

fn train_hash(config: &TrainConfig) -> String {
    let mut c = config.clone();
    c.seed = 0;
    config_hash(&json!({"command": "train", "train": c}))
}

pub fn train(s: &Settings, force: bool) -> Result<(), CliError> {
    let out = s.out_dir()?;
    let seeds = s.seeds()?;
    let explicit = s.string("train.checkpoint")?.map(PathBuf::from);
    let resume = s.string("train.resume_from")?.map(PathBuf::from);
    let every = s.uint("train.checkpoint_every")?;
    if every == Some(0) {
        return Err(invalid("train.checkpoint_every must be positive"));
    }
    if seeds.len() > 1 && (explicit.is_some() || resume.is_some()) {
        return Err(invalid("an explicit or resumed checkpoint needs a single seed"));
    }
    let base = match &resume {
        Some(_) => None,
        None => Some(resolve_train(s)?),
    };
    let mut jobs = Vec::new();
    for &seed in &seeds {
        let path = explicit
            .clone()
            .unwrap_or_else(|| out.join(format!("policy-seed{seed}.ckpt")));
        if path.exists() && !force {
            return Err(invalid(format!("{} exists; pass --force to overwrite", path.display())));
        }
        jobs.push((seed, path));
    }
    let mut summary = Appender::create(&out.join("train.jsonl"))?;
    for (seed, path) in jobs {
        let mut trainer = match (&resume, &base) {
            (Some(r), _) => {
                let mut t = Trainer::resume(Checkpoint::load(r)?)?;
                if let Some(steps) = s.uint("train.total_steps")? {
                    t.set_total_steps(steps)?;
                }
                t
            }
            (None, Some(b)) => Trainer::new(TrainConfig { seed, ..b.clone() })?,
            (None, None) => unreachable!("resolved above"),
        };
        let config = trainer.config().clone();
        let hash = train_hash(&config);
        log::info!("training seed {} for {} steps", config.seed, config.total_steps);
        let chunk = every.unwrap_or(config.total_steps.max(1));
        while trainer.step_count() < config.total_steps {
            trainer.run_until(trainer.step_count() + chunk)?;
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(e.to_string()))?;
            }
            trainer.checkpoint().save(&path)?;
        }
        if trainer.step_count() == 0 {
            trainer.checkpoint().save(&path)?;
        }
        let steps = trainer.step_count();
        let outcome = trainer.finish();
        let mut log_out = Appender::create(&out.join(format!("train-seed{}.jsonl", config.seed)))?;
        for r in &outcome.log {
            log_out.write(&json!({"config_hash": hash, "seed": config.seed, "record": r}))?;
        }
        log_out.finish()?;
        let last_epoch = outcome.log.iter().rev().find_map(|r| match r {
            LogRecord::Epoch { mean_loss, rmse, .. } => Some((*mean_loss, *rmse)),
            _ => None,
        });
        summary.write(&json!({
            "kind": "train",
            "config_hash": hash,
            "seed": config.seed,
            "config": config,
            "checkpoint": path.to_string_lossy(),
            "steps": steps,
            "skipped_steps": outcome.skipped_steps,
            "final_epoch_loss": last_epoch.map(|e| e.0),
            "final_epoch_rmse": last_epoch.map(|e| e.1),
        }))?;
        println!("seed {}: {steps} steps, checkpoint {}", config.seed, path.display());
    }
    summary.finish()
}

#[derive(Debug, Clone)]
enum ProblemSource {
    Analytic(BenchmarkProblem),
    Pool {
        name: String,
        data: safeal::gp::Dataset,
        n_test: Option<usize>,
    },
}

impl ProblemSource {
    fn name(&self) -> &str {
        match self {
            ProblemSource::Analytic(p) => &p.name,
            ProblemSource::Pool { name, .. } => name,
        }
    }

    fn dim(&self) -> usize {
        match self {
            ProblemSource::Analytic(p) => p.dim,
            ProblemSource::Pool { data, .. } => data.dim(),
        }
    }

    fn constrained(&self) -> bool {
        match self {
            ProblemSource::Analytic(p) => p.constrained(),
            ProblemSource::Pool { data, .. } => data.safety.is_some(),
        }
    }

    fn instantiate(&self, seed: u64) -> Result<BenchmarkProblem, CliError> {
        match self {
            ProblemSource::Analytic(p) => Ok(p.clone()),
            ProblemSource::Pool { name, data, n_test } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(4);
                Ok(BenchmarkProblem::pool(name, data.clone(), *n_test, &mut rng)?)
            }
        }
    }
}

/// Default `(N_init, T)` when the config leaves them unset.
pub fn default_sizes(dim: usize, constrained: bool) -> (usize, usize) {
    let objective = if constrained { Objective::Safe } else { Objective::MutualInfo };
    let t = TrainConfig::new(objective, dim);
    let budget = if constrained || dim >= 5 { t.budget } else { 20 };
    (t.n_init, budget)
}

struct Plan {
    problems: Vec<ProblemSource>,
    methods: Vec<Method>,
    seeds: Vec<u64>,
    budget: Option<usize>,
    n_init: Option<usize>,
    gamma: f64,
    discretization: usize,
    fixed_candidates: bool,
    policies: Vec<(String, Policy)>,
    hash: String,
}

const DEPLOY_KEYS: &[&str] = &[
    "methods",
    "problems",
    "budget",
    "n_init",
    "gamma",
    "discretization",
    "fixed_candidates",
    "checkpoint",
    "checkpoints",
];

fn load_policy(path: &Path) -> Result<(Policy, String), CliError> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.best.unwrap_or(ck.policy), file_hash(path)?))
}

fn plan(s: &Settings) -> Result<Plan, CliError> {
    check_section(s, "deploy", DEPLOY_KEYS)?;
    check_section(s, "bench", &["reference"])?;
    let names = s
        .strings("deploy.problems")?
        .ok_or_else(|| invalid("no problems given (deploy.problems or --problem)"))?;
    let methods: Vec<Method> = s
        .strings("deploy.methods")?
        .ok_or_else(|| invalid("no methods given (deploy.methods or --method)"))?
        .iter()
        .map(|m| m.parse())
        .collect::<Result<_, _>>()?;
    let mut problems = Vec::new();
    let mut problem_desc = Vec::new();
    for name in &names {
        let pool = s.section(&format!("pool.{name}"));
        if pool.is_empty() {
            let p = BenchmarkProblem::by_name(name)?;
            problem_desc.push(json!({"name": p.name}));
            problems.push(ProblemSource::Analytic(p));
            continue;
        }
        for k in pool.keys() {
            if !["path", "dim", "has_safety", "n_test"].contains(&k.as_str()) {
                return Err(invalid(format!("unknown config key \"pool.{name}.{k}\"")));
            }
        }
        let key = |k: &str| format!("pool.{name}.{k}");
        let path = PathBuf::from(s.string(&key("path"))?.ok_or_else(|| invalid(format!("{} is required", key("path"))))?);
        let dim = s.uint(&key("dim"))?.ok_or_else(|| invalid(format!("{} is required", key("dim"))))? as usize;
        let has_safety = s.boolean(&key("has_safety"))?.unwrap_or(false);
        let n_test = s.uint(&key("n_test"))?.map(|n| n as usize);
        let data = load_pool_csv(&path, dim, has_safety)?;
        problem_desc.push(json!({
            "name": name, "dim": dim, "has_safety": has_safety, "n_test": n_test,
            "data_sha256": file_hash(&path)?,
        }));
        problems.push(ProblemSource::Pool {
            name: name.clone(),
            data,
            n_test,
        });
    }
    let mut policies = Vec::new();
    let mut policy_desc = Vec::new();
    if methods.contains(&Method::Policy) {
        let default = s.string("deploy.checkpoint")?;
        for p in &problems {
            let path = s
                .string(&format!("deploy.checkpoints.{}", p.name()))?
                .or_else(|| default.clone())
                .ok_or_else(|| invalid(format!("method policy on {} needs a checkpoint", p.name())))?;
            let (policy, sha) = load_policy(Path::new(&path))?;
            if policy.config().dim != p.dim() {
                return Err(invalid(format!(
                    "{path}: {}-D policy for {}-D problem {}",
                    policy.config().dim,
                    p.dim(),
                    p.name()
                )));
            }
            policy_desc.push(json!({"problem": p.name(), "sha256": sha}));
            policies.push((p.name().to_string(), policy));
        }
    }
    let plan = Plan {
        problems,
        methods,
        seeds: s.seeds()?,
        budget: s.uint("deploy.budget")?.map(|b| b as usize),
        n_init: s.uint("deploy.n_init")?.map(|b| b as usize),
        gamma: s.float("deploy.gamma")?.unwrap_or(0.05),
        discretization: s.uint("deploy.discretization")?.map_or(DEFAULT_DISCRETIZATION, |d| d as usize),
        fixed_candidates: s.boolean("deploy.fixed_candidates")?.unwrap_or(false),
        policies,
        hash: String::new(),
    };
    let hash = config_hash(&json!({
        "command": "deploy",
        "problems": problem_desc,
        "methods": plan.methods,
        "budget": plan.budget,
        "n_init": plan.n_init,
        "gamma": plan.gamma,
        "discretization": plan.discretization,
        "fixed_candidates": plan.fixed_candidates,
        "policies": policy_desc,
    }));
    Ok(Plan { hash, ..plan })
}

fn run_grid(plan: &Plan) -> Vec<Result<RunResult, CliError>> {
    let mut jobs = Vec::new();
    for p in &plan.problems {
        for &m in &plan.methods {
            if m.is_safe() && !p.constrained() {
                log::warn!("skipping {m} on unconstrained problem {}", p.name());
                continue;
            }
            for &seed in &plan.seeds {
                jobs.push((p, m, seed));
            }
        }
    }
    let run = |(p, m, seed): &(&ProblemSource, Method, u64)| -> Result<RunResult, CliError> {
        let problem = p.instantiate(*seed)?;
        let (n0, t) = default_sizes(problem.dim, problem.constrained());
        let mut cfg = DeployConfig::new(*m, plan.budget.unwrap_or(t), plan.n_init.unwrap_or(n0), *seed);
        cfg.gamma = plan.gamma;
        cfg.discretization = plan.discretization;
        cfg.fixed_candidates = plan.fixed_candidates;
        let policy = plan.policies.iter().find(|(n, _)| n == p.name()).map(|(_, pol)| pol);
        log::info!("{} on {} seed {seed}", m, p.name());
        Ok(deploy_run(&problem, &cfg, policy)?)
    };
    match worker_pool() {
        Ok(pool) => pool.install(|| jobs.par_iter().map(run).collect()),
        Err(e) => vec![Err(e.into())],
    }
}

/// Runs the grid and writes `<out>/deploy.jsonl`.
pub fn deploy(s: &Settings) -> Result<Vec<RunRecord>, CliError> {
    let plan = plan(s)?;
    let results = run_grid(&plan);
    let mut out = Appender::create(&s.out_dir()?.join("deploy.jsonl"))?;
    let mut records = Vec::new();
    let mut first_err = None;
    for r in results {
        match r {
            Ok(r) => {
                let rec = RunRecord::new(&plan.hash, &r);
                out.write(&rec)?;
                println!(
                    "{} {} seed {}: rmse {:.4}{}",
                    rec.problem,
                    rec.method,
                    rec.seed,
                    rec.rmse(),
                    rec.safe_fraction().map_or(String::new(), |f| format!(", safe {f:.3}"))
                );
                records.push(rec);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    out.finish()?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(records),
    }
}

fn default_reference(methods: impl Iterator<Item = String>) -> Option<String> {
    let ms: Vec<String> = methods.collect();
    ["safe_gp_al", "gp_al"]
        .into_iter()
        .find(|r| ms.iter().any(|m| m == r))
        .map(str::to_string)
}

fn write_table(out: &Path, stem: &str, runs: &[RunRecord], reference: Option<String>) -> Result<(), CliError> {
    let reference = reference.or_else(|| default_reference(runs.iter().map(|r| r.method.clone())));
    let rows = aggregate(runs, reference.as_deref());
    let mut w = Appender::create(&out.join(format!("{stem}.jsonl")))?;
    for r in &rows {
        w.write(r)?;
    }
    w.finish()?;
    let table = render_table(&rows);
    std::fs::write(out.join(format!("{stem}.txt")), &table).map_err(|e| CliError::Runtime(e.to_string()))?;
    print!("{table}");
    Ok(())
}

pub fn bench(s: &Settings) -> Result<(), CliError> {
    let runs = deploy(s)?;
    write_table(&s.out_dir()?, "bench", &runs, s.string("bench.reference")?)
}

pub fn report(args: &ReportArgs) -> Result<(), CliError> {
    let out = args.out.clone().unwrap_or_else(|| PathBuf::from("safeal-out"));
    let input = args.records.clone().unwrap_or_else(|| out.join("deploy.jsonl"));
    let runs = read_runs(&input)?;
    if runs.is_empty() {
        return Err(invalid(format!("{}: no run records", input.display())));
    }
    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| input.parent().map(Path::to_path_buf).unwrap_or_default());
    write_table(&dir, "report", &runs, args.reference.clone())
}

pub fn sample_tasks(s: &Settings) -> Result<(), CliError> {
    check_section(s, "sample_tasks", &["count", "dim", "n_init", "safe", "n_features"])?;
    let count = s.uint("sample_tasks.count")?.unwrap_or(10);
    let dim = s.uint("sample_tasks.dim")?.unwrap_or(1) as usize;
    let safe = s.boolean("sample_tasks.safe")?.unwrap_or(false);
    let n_init = s.uint("sample_tasks.n_init")?.map_or(default_sizes(dim, safe).0, |n| n as usize);
    let n_features = s.uint("sample_tasks.n_features")?.map_or(DEFAULT_FEATURES, |n| n as usize);
    if dim == 0 || n_init == 0 || n_features == 0 {
        return Err(invalid("sample_tasks.dim, n_init and n_features must be positive"));
    }
    let hash = config_hash(&json!({
        "command": "sample-tasks", "count": count, "dim": dim, "safe": safe,
        "n_init": n_init, "n_features": n_features,
    }));
    let mut out = Appender::create(&s.out_dir()?.join("tasks.jsonl"))?;
    for seed in s.seeds()? {
        for index in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(index);
            let hyper = sample_hyperparams(dim, &mut rng);
            let task: Value = if safe {
                let t = sample_task(&hyper, n_features, n_init, &BoxRegion::centered(dim), DEFAULT_MAX_ITER, &mut rng);
                serde_json::to_value(t)
            } else {
                let (f, initial) = sample_task_unconstrained(&hyper, n_features, n_init, &mut rng);
                serde_json::to_value(json!({"f": f, "hyper": hyper, "initial": initial}))
            }
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            out.write(&json!({"kind": "task", "config_hash": hash, "seed": seed, "index": index, "task": task}))?;
        }
    }
    out.finish()?;
    println!("wrote {} tasks", count as usize * s.seeds()?.len());
    Ok(())
}

pub fn gradcheck(s: &Settings) -> Result<(), CliError> {
    check_section(s, "gradcheck", &["flip_sign"])?;
    let scale = if s.boolean("gradcheck.flip_sign")?.unwrap_or(false) { -1.0 } else { 1.0 };
    let hash = config_hash(&json!({"command": "gradcheck", "scale": scale}));
    let mut out = Appender::create(&s.out_dir()?.join("gradcheck.jsonl"))?;
    let (mut failed, mut total) = (0, 0);
    for seed in s.seeds()? {
        for (k, objective) in Objective::ALL.into_iter().enumerate() {
            for dim in [1, 2] {
                let fx = Fixture::new(dim, seed.wrapping_mul(1000) + 10 * k as u64 + dim as u64);
                let r = check_with_scale(objective, &fx, scale)?;
                total += 1;
                failed += usize::from(!r.passed);
                println!(
                    "{} {:<13} D={dim} max relative error {:.2e}",
                    if r.passed { "PASS" } else { "FAIL" },
                    objective.name(),
                    r.max_rel_error
                );
                out.write(&json!({"kind": "gradcheck", "config_hash": hash, "seed": seed, "report": r}))?;
            }
        }
    }
    out.finish()?;
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} of {total} gradient checks failed")));
    }
    Ok(())
}
