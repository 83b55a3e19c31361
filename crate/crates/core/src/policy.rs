//! Budget-aware query policy.
//!
//! Each history branch embeds `(x, value)` rows with a shared MLP, optionally
//! mixes them with two post-LN self-attention layers, and sum-pools to one
//! vector. The pooled task and safety embeddings and the budget embedding are
//! concatenated and mapped to a query in `[0,1]^D` by `(tanh(·)+1)/2`.
//!
//! Rows are sorted canonically before encoding, so permuting the history
//! leaves the output bit-identical.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{concat_cols, Gradients, Mat, Tape, Var};
use crate::gp::Dataset;
use crate::optim::RAdam;
use crate::{Error, Result};

const MAGIC: &str = "SAFEAL-POLICY v1";
const LN_EPS: f64 = 1e-5;
const ATTENTION_LAYERS: usize = 2;
pub const ACTIVATION: &str = "silu";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    Attention,
    DeepSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub dim: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub mode: EncoderMode,
    pub safety_branch: bool,
    pub budget_input: bool,
    /// Divisor applied to the remaining budget.
    pub budget_scale: usize,
}

impl PolicyConfig {
    pub fn new(dim: usize, budget_scale: usize) -> Self {
        Self {
            dim,
            embed_dim: 128,
            hidden: 512,
            mode: EncoderMode::Attention,
            safety_branch: true,
            budget_input: true,
            budget_scale,
        }
    }

    pub fn heads(&self) -> usize {
        (self.embed_dim / 16).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.embed_dim == 0 || self.hidden == 0 || self.budget_scale == 0 {
            return Err(Error::InvalidParameter(format!("degenerate policy config {self:?}")));
        }
        if self.mode == EncoderMode::Attention && !self.embed_dim.is_multiple_of(self.heads()) {
            return Err(Error::InvalidParameter(format!(
                "embed_dim {} not divisible into {} heads",
                self.embed_dim,
                self.heads()
            )));
        }
        Ok(())
    }

    fn branches(&self) -> Vec<&'static str> {
        if self.safety_branch {
            vec!["task", "safety"]
        } else {
            vec!["task"]
        }
    }

    /// `(name, rows, cols, fan_in)` for every parameter, in storage order.
    fn layout(&self) -> Vec<(String, usize, usize, usize)> {
        let (d, e, h) = (self.dim, self.embed_dim, self.hidden);
        let mut out = Vec::new();
        let mut dense = |name: &str, rows: usize, cols: usize| {
            out.push((format!("{name}.w"), rows, cols, rows));
            out.push((format!("{name}.b"), 1, cols, rows));
        };
        for b in self.branches() {
            dense(&format!("{b}.embed.0"), d + 1, h);
            dense(&format!("{b}.embed.1"), h, e);
            if self.mode == EncoderMode::Attention {
                for l in 0..ATTENTION_LAYERS {
                    for proj in ["q", "k", "v", "o"] {
                        dense(&format!("{b}.attn{l}.{proj}"), e, e);
                    }
                    dense(&format!("{b}.attn{l}.ff0"), e, 4 * e);
                    dense(&format!("{b}.attn{l}.ff1"), 4 * e, e);
                }
            }
        }
        if self.budget_input {
            dense("budget.0", 1, h);
            dense("budget.1", h, e);
        }
        let k = self.branches().len() + usize::from(self.budget_input);
        dense("decision.0", k * e, h);
        dense("decision.1", h, d);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    config: PolicyConfig,
    names: Vec<String>,
    index: HashMap<String, usize>,
    params: Vec<Arc<Mat>>,
}

impl Policy {
    /// Weights and biases drawn from `U(±1/√fan_in)`.
    pub fn init(config: PolicyConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let params = layout
            .iter()
            .map(|(_, r, c, fan_in)| {
                let a = 1.0 / (*fan_in as f64).sqrt();
                Arc::new(Mat::from_fn(*r, *c, |_, _| rng.random_range(-a..a)))
            })
            .collect();
        Ok(Self::assemble(config, params))
    }

    fn assemble(config: PolicyConfig, params: Vec<Arc<Mat>>) -> Self {
        let names: Vec<String> = config.layout().into_iter().map(|l| l.0).collect();
        let index = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        Self {
            config,
            names,
            index,
            params,
        }
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Arc<Mat>] {
        &self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for p in &self.params {
            out.extend_from_slice(p.as_slice());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Dimension(format!("{} values for {} parameters", flat.len(), self.n_params())));
        }
        let mut off = 0;
        for p in self.params.iter_mut() {
            let (r, c) = p.shape();
            *p = Arc::new(Mat::from_column_slice(r, c, &flat[off..off + r * c]));
            off += r * c;
        }
        Ok(())
    }

    /// Puts every tensor on `tape`, tracked when `trainable`.
    pub fn bind<'p, 't>(&'p self, tape: &'t Tape, trainable: bool) -> BoundPolicy<'p, 't> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.var_shared(Arc::clone(p))
                } else {
                    tape.constant_shared(Arc::clone(p))
                }
            })
            .collect();
        BoundPolicy { policy: self, vars }
    }

    /// Plain-valued forward pass for deployment.
    pub fn act(&self, budget_remaining: usize, history: &Dataset) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let task = tape.constant(history_rows(&history.inputs, &history.outputs));
        let safety = match (&history.safety, self.config.safety_branch) {
            (Some(z), true) => Some(tape.constant(history_rows(&history.inputs, z))),
            (None, true) => return Err(Error::InvalidParameter("policy expects safety observations".into())),
            _ => None,
        };
        let x = bound.forward(budget_remaining, task, safety)?;
        Ok(x.value().as_slice().to_vec())
    }

    /// Flattened gradient in storage order.
    pub fn flat_gradient(&self, bound: &BoundPolicy<'_, '_>, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for v in &bound.vars {
            out.extend_from_slice(grads.wrt_or_zero(*v).as_slice());
        }
        out
    }
}

/// `n×(D+1)` matrix of `[x, value]` rows.
pub fn history_rows(inputs: &Mat, values: &[f64]) -> Mat {
    let (n, d) = inputs.shape();
    Mat::from_fn(n, d + 1, |i, j| if j < d { inputs[(i, j)] } else { values[i] })
}

fn canonical_order(m: &Mat) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..m.nrows()).collect();
    idx.sort_by(|&a, &b| {
        for j in 0..m.ncols() {
            let o = m[(a, j)].total_cmp(&m[(b, j)]);
            if o.is_ne() {
                return o;
            }
        }
        std::cmp::Ordering::Equal
    });
    idx
}

/// A policy whose tensors live on one tape; reuse it across a rollout so
/// gradients accumulate on a single leaf per tensor.
pub struct BoundPolicy<'p, 't> {
    policy: &'p Policy,
    vars: Vec<Var<'t>>,
}

impl<'p, 't> BoundPolicy<'p, 't> {
    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    fn p(&self, name: &str) -> Var<'t> {
        self.vars[self.policy.index[name]]
    }

    fn dense(&self, name: &str, x: Var<'t>) -> Var<'t> {
        x.matmul(self.p(&format!("{name}.w"))) + self.p(&format!("{name}.b"))
    }

    fn mlp(&self, name: &str, x: Var<'t>) -> Var<'t> {
        self.dense(&format!("{name}.1"), self.dense(&format!("{name}.0"), x).silu())
    }

    fn attention(&self, name: &str, h: Var<'t>) -> Var<'t> {
        let cfg = &self.policy.config;
        let (n, e) = h.shape();
        let heads = cfg.heads();
        let dh = e / heads;
        let q = self.dense(&format!("{name}.q"), h);
        let k = self.dense(&format!("{name}.k"), h);
        let v = self.dense(&format!("{name}.v"), h);
        let mixed: Vec<Var<'t>> = (0..heads)
            .map(|i| {
                let (qh, kh, vh) = (q.slice(0, i * dh, n, dh), k.slice(0, i * dh, n, dh), v.slice(0, i * dh, n, dh));
                qh.matmul(kh.t()).scale(1.0 / (dh as f64).sqrt()).softmax_rows().matmul(vh)
            })
            .collect();
        let a = if heads == 1 { mixed[0] } else { concat_cols(&mixed) };
        let h = (h + self.dense(&format!("{name}.o"), a)).layer_norm_rows(LN_EPS);
        let ff = self.dense(&format!("{name}.ff1"), self.dense(&format!("{name}.ff0"), h).silu());
        (h + ff).layer_norm_rows(LN_EPS)
    }

    fn encode(&self, branch: &str, rows: Var<'t>) -> Var<'t> {
        let order = canonical_order(&rows.value());
        let sorted = if order.iter().enumerate().all(|(i, &j)| i == j) {
            rows
        } else {
            rows.gather_rows(&order)
        };
        let mut h = self.mlp(&format!("{branch}.embed"), sorted);
        if self.policy.config.mode == EncoderMode::Attention {
            for l in 0..ATTENTION_LAYERS {
                h = self.attention(&format!("{branch}.attn{l}"), h);
            }
        }
        h.col_sums()
    }

    /// Next query `1×D` from the remaining budget and `[x, y]` / `[x, z]`
    /// history rows.
    pub fn forward(&self, budget_remaining: usize, task: Var<'t>, safety: Option<Var<'t>>) -> Result<Var<'t>> {
        let cfg = &self.policy.config;
        let (n, w) = task.shape();
        if n == 0 {
            return Err(Error::EmptyHistory);
        }
        if w != cfg.dim + 1 {
            return Err(Error::Dimension(format!("history rows have {w} columns, expected {}", cfg.dim + 1)));
        }
        if cfg.budget_input && budget_remaining == 0 {
            return Err(Error::InvalidParameter("budget_remaining must be at least 1".into()));
        }
        let mut parts = vec![self.encode("task", task)];
        if cfg.safety_branch {
            let s = safety.ok_or_else(|| Error::InvalidParameter("policy expects safety observations".into()))?;
            if s.shape() != task.shape() {
                return Err(Error::Dimension("safety history shape differs from task history".into()));
            }
            parts.push(self.encode("safety", s));
        }
        if cfg.budget_input {
            let b = task.tape().constant(Mat::from_element(1, 1, budget_remaining as f64 / cfg.budget_scale as f64));
            parts.push(self.mlp("budget", b));
        }
        let z = self.mlp("decision", concat_cols(&parts));
        Ok(z.tanh().shift(1.0).scale(0.5))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ArraySpec {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: PolicyConfig,
    activation: String,
    n_params: usize,
    optimizer_step: Option<u64>,
    has_best: bool,
    arrays: Vec<ArraySpec>,
    meta: serde_json::Value,
}

/// Policy plus optional optimizer state, a best-so-far snapshot and free-form
/// metadata.
///
/// File layout: the magic line, one line of JSON header, then every array
/// listed in the header as column-major little-endian `f64`: parameters,
/// `opt.m` and `opt.v` when present, then `best.*` when present.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub policy: Policy,
    pub optimizer: Option<RAdam>,
    pub best: Option<Policy>,
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn new(policy: Policy) -> Self {
        Self {
            policy,
            optimizer: None,
            best: None,
            meta: serde_json::Value::Null,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let p = &self.policy;
        let mut arrays: Vec<(String, &[f64], usize, usize)> = p
            .names
            .iter()
            .zip(&p.params)
            .map(|(n, m)| (n.clone(), m.as_slice(), m.nrows(), m.ncols()))
            .collect();
        if let Some(opt) = &self.optimizer {
            arrays.push(("opt.m".into(), &opt.m, opt.m.len(), 1));
            arrays.push(("opt.v".into(), &opt.v, opt.v.len(), 1));
        }
        if let Some(best) = &self.best {
            if best.config != p.config {
                return Err(Error::Checkpoint("best snapshot has a different config".into()));
            }
            for (n, m) in best.names.iter().zip(&best.params) {
                arrays.push((format!("best.{n}"), m.as_slice(), m.nrows(), m.ncols()));
            }
        }
        let header = Header {
            version: 1,
            config: p.config.clone(),
            activation: ACTIVATION.into(),
            n_params: p.n_params(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            has_best: self.best.is_some(),
            arrays: arrays
                .iter()
                .map(|(name, _, rows, cols)| ArraySpec {
                    name: name.clone(),
                    rows: *rows,
                    cols: *cols,
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{MAGIC}")?;
        serde_json::to_writer(&mut w, &header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        writeln!(w)?;
        for (_, data, _, _) in &arrays {
            for v in data.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != MAGIC {
            return Err(Error::Checkpoint(format!("bad magic line {:?}", line.trim_end())));
        }
        line.clear();
        r.read_line(&mut line)?;
        let header: Header = serde_json::from_str(&line).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.version != 1 {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
        }
        if header.activation != ACTIVATION {
            return Err(Error::Checkpoint(format!("unsupported activation {}", header.activation)));
        }
        header.config.validate()?;
        let layout = header.config.layout();
        let n_params: usize = layout.iter().map(|l| l.1 * l.2).sum();
        let mut expected: Vec<(String, usize, usize)> = layout.iter().map(|l| (l.0.clone(), l.1, l.2)).collect();
        if header.optimizer_step.is_some() {
            expected.push(("opt.m".into(), n_params, 1));
            expected.push(("opt.v".into(), n_params, 1));
        }
        if header.has_best {
            expected.extend(layout.iter().map(|l| (format!("best.{}", l.0), l.1, l.2)));
        }
        let listed: Vec<(String, usize, usize)> =
            header.arrays.iter().map(|a| (a.name.clone(), a.rows, a.cols)).collect();
        if listed != expected || header.n_params != n_params {
            return Err(Error::Checkpoint("array table does not match the config".into()));
        }
        let mut read = |rows: usize, cols: usize| -> Result<Mat> {
            let mut buf = vec![0u8; rows * cols * 8];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Checkpoint("truncated array data".into()))?;
            let vals: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Ok(Mat::from_column_slice(rows, cols, &vals))
        };
        let params = layout
            .iter()
            .map(|l| read(l.1, l.2).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let optimizer = match header.optimizer_step {
            Some(step) => {
                let m = read(n_params, 1)?.as_slice().to_vec();
                let v = read(n_params, 1)?.as_slice().to_vec();
                let mut opt = RAdam::new(n_params);
                opt.step = step;
                opt.m = m;
                opt.v = v;
                Some(opt)
            }
            None => None,
        };
        let best = if header.has_best {
            let ps = layout
                .iter()
                .map(|l| read(l.1, l.2).map(Arc::new))
                .collect::<Result<Vec<_>>>()?;
            Some(Policy::assemble(header.config.clone(), ps))
        } else {
            None
        };
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", rest.len())));
        }
        Ok(Self {
            policy: Policy::assemble(header.config, params),
            optimizer,
            best,
            meta: header.meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(mode: EncoderMode, dim: usize, safety: bool) -> PolicyConfig {
        PolicyConfig {
            dim,
            embed_dim: 16,
            hidden: 24,
            mode,
            safety_branch: safety,
            budget_input: true,
            budget_scale: 10,
        }
    }

    fn random_history(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Dataset {
        let x = Mat::from_fn(n, d, |_, _| rng.random());
        let y = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let z = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        Dataset::new(x, y, Some(z)).unwrap()
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = PolicyConfig::new(2, 20);
        let a = Policy::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = Policy::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.config().heads(), 8);
    }

    #[test]
    fn ablation_sizes_supported() {
        for e in [32, 64, 128] {
            let mut cfg = PolicyConfig::new(1, 20);
            cfg.embed_dim = e;
            cfg.hidden = 32;
            let p = Policy::init(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            assert!(p.n_params() > 0);
            let h = random_history(3, 1, &mut ChaCha8Rng::seed_from_u64(3));
            assert_eq!(p.act(5, &h).unwrap().len(), 1);
        }
    }

    #[test]
    fn permutation_invariance_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for mode in [EncoderMode::Attention, EncoderMode::DeepSet] {
            let p = Policy::init(small(mode, 2, true), &mut rng).unwrap();
            let h = random_history(7, 2, &mut rng);
            let perm = [3, 0, 6, 1, 5, 2, 4];
            let hp = Dataset::new(
                Mat::from_fn(7, 2, |i, j| h.inputs[(perm[i], j)]),
                perm.iter().map(|&i| h.outputs[i]).collect(),
                Some(perm.iter().map(|&i| h.safety.as_ref().unwrap()[i]).collect()),
            )
            .unwrap();
            let a = p.act(4, &h).unwrap();
            let b = p.act(4, &hp).unwrap();
            assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn outputs_stay_in_unit_box() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..10_000 {
            let d = 1 + trial % 3;
            let mode = if trial % 2 == 0 { EncoderMode::DeepSet } else { EncoderMode::Attention };
            let mut cfg = small(mode, d, trial % 3 == 0);
            cfg.embed_dim = 8;
            cfg.hidden = 8;
            let mut p = Policy::init(cfg, &mut rng).unwrap();
            if trial % 5 == 0 {
                let scaled: Vec<f64> = p.flat().iter().map(|v| v * 50.0).collect();
                p.set_flat(&scaled).unwrap();
            }
            let n = 1 + trial % 4;
            let h = random_history(n, d, &mut rng);
            let x = p.act(1 + trial % 10, &h).unwrap();
            assert!(x.iter().all(|v| (0.0..=1.0).contains(v)), "{x:?}");
        }
    }

    #[test]
    fn unconstrained_policy_ignores_safety() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = Policy::init(small(EncoderMode::DeepSet, 1, false), &mut rng).unwrap();
        let h = random_history(4, 1, &mut rng);
        let mut h2 = h.clone();
        h2.safety = Some(vec![-9.0; 4]);
        let mut h3 = h.clone();
        h3.safety = None;
        let a = p.act(3, &h).unwrap();
        assert_eq!(a, p.act(3, &h2).unwrap());
        assert_eq!(a, p.act(3, &h3).unwrap());
        assert!(!p.names().iter().any(|n| n.starts_with("safety")));
    }

    #[test]
    fn empty_history_rejected() {
        let p = Policy::init(small(EncoderMode::DeepSet, 1, true), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert!(matches!(p.act(3, &Dataset::empty(1, true)), Err(Error::EmptyHistory)));
    }

    /// Central differences over every parameter of a tiny policy.
    fn param_gradcheck(mode: EncoderMode) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut cfg = small(mode, 1, true);
        cfg.embed_dim = 8;
        cfg.hidden = 8;
        let mut p = Policy::init(cfg, &mut rng).unwrap();
        let h = random_history(3, 1, &mut rng);
        let loss_of = |p: &Policy| -> (f64, Vec<f64>) {
            let tape = Tape::new();
            let b = p.bind(&tape, true);
            let t = tape.constant(history_rows(&h.inputs, &h.outputs));
            let s = tape.constant(history_rows(&h.inputs, h.safety.as_ref().unwrap()));
            let x = b.forward(2, t, Some(s)).unwrap();
            let loss = x.scale(3.0).cos().square().sum();
            let g = tape.gradient(loss);
            (loss.scalar(), p.flat_gradient(&b, &g))
        };
        let (_, g) = loss_of(&p);
        let base = p.flat();
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut a = base.clone();
            a[i] += 1e-5;
            p.set_flat(&a).unwrap();
            let fa = loss_of(&p).0;
            a[i] -= 2e-5;
            p.set_flat(&a).unwrap();
            let fb = loss_of(&p).0;
            let fd = (fa - fb) / 2e-5;
            worst = worst.max((g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6));
        }
        assert!(worst <= 1e-3, "{mode:?}: {worst}");
    }

    #[test]
    fn parameter_gradients_deep_set() {
        param_gradcheck(EncoderMode::DeepSet);
    }

    #[test]
    fn parameter_gradients_attention() {
        param_gradcheck(EncoderMode::Attention);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Policy::init(small(EncoderMode::Attention, 2, true), &mut rng).unwrap();
        let mut opt = RAdam::new(p.n_params());
        let mut flat = p.flat();
        let g: Vec<f64> = (0..flat.len()).map(|i| (i as f64).sin()).collect();
        opt.update(&mut flat, &g, 1e-3);
        let mut best = p.clone();
        best.set_flat(&flat).unwrap();
        let ck = Checkpoint {
            policy: p.clone(),
            optimizer: Some(opt),
            best: Some(best),
            meta: serde_json::json!({"step": 1}),
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let h = random_history(5, 2, &mut rng);
        assert_eq!(back.policy.act(3, &h).unwrap(), p.act(3, &h).unwrap());
    }

    #[test]
    fn corrupted_checkpoints_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let p = Policy::init(small(EncoderMode::DeepSet, 1, false), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        Checkpoint::new(p).save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let text_end = bytes.iter().enumerate().filter(|(_, b)| **b == b'\n').nth(1).unwrap().0;
        let header = String::from_utf8(bytes[..text_end].to_vec()).unwrap();

        let bad = dir.path().join("bad");
        let mut b = bytes.clone();
        b[0] = b'X';
        std::fs::write(&bad, &b).unwrap();
        assert!(matches!(Checkpoint::load(&bad), Err(Error::Checkpoint(_))));

        let tampered = header.replacen("\"embed_dim\":16", "\"embed_dim\":32", 1);
        let mut b = tampered.into_bytes();
        b.extend_from_slice(&bytes[text_end..]);
        std::fs::write(&bad, &b).unwrap();
        assert!(Checkpoint::load(&bad).is_err());

        std::fs::write(&bad, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(Checkpoint::load(&bad), Err(Error::Checkpoint(_))));
    }
}
