//! Benchmark problems on `[0,1]^D`: analytic functions with frozen output
//! normalization, and CSV-backed pools.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::gp::{Dataset, Mat};
use crate::sampler::BoxRegion;
use crate::{Error, Result};

pub const NOISE_STD: f64 = 0.1;
pub const NORMALIZATION_SEED: u64 = 0x005e_ed0f_5afe;
pub const NORMALIZATION_SAMPLES: usize = 100_000;
/// Rejection-sampling attempts per requested safe point.
const MAX_REJECTIONS: usize = 10_000;

/// Output normalization: `f ← (f − f_mean)/f_std`, `q ← q/q_std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub f_mean: f64,
    pub f_std: f64,
    pub q_std: Option<f64>,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        f_mean: 0.0,
        f_std: 1.0,
        q_std: None,
    };
}

// Output of `estimate_normalization` with NORMALIZATION_SEED and
// NORMALIZATION_SAMPLES uniform draws on [0,1]^D.
const BRANIN_NORM: Normalization = Normalization {
    f_mean: 54.27501345737027,
    f_std: 51.32252975463053,
    q_std: None,
};
const SIMIONESCU_NORM: Normalization = Normalization {
    f_mean: -0.00010282108214099413,
    f_std: 0.05218165327083087,
    q_std: Some(0.6732527941370722),
};
const TOWNSEND_NORM: Normalization = Normalization {
    f_mean: -0.479912399313288,
    f_std: 1.0275965940179885,
    q_std: Some(2.2606341750798173),
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Analytic {
    Sin,
    Branin,
    Simionescu,
    Townsend,
}

/// Unit-box coordinate mapped affinely onto `[lo, hi]`.
fn scale(u: f64, lo: f64, hi: f64) -> f64 {
    lo + u * (hi - lo)
}

/// Standard Branin on `[−5,10]×[0,15]`.
pub fn branin(x1: f64, x2: f64) -> f64 {
    let (a, b, c, r, s, t) = (1.0, 5.1 / (4.0 * PI * PI), 5.0 / PI, 6.0, 10.0, 1.0 / (8.0 * PI));
    a * (x2 - b * x1 * x1 + c * x1 - r).powi(2) + s * (1.0 - t) * x1.cos() + s
}

fn sign(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Two-argument angle with `sign(0) = 1` and angle 0 at the origin.
pub fn angle(x1: f64, x2: f64) -> f64 {
    if x2 > 0.0 {
        (x1 / x2).atan()
    } else if x2 < 0.0 {
        (x1 / x2).atan() + sign(x1) * PI
    } else if x1 != 0.0 {
        sign(x1) * PI / 2.0
    } else {
        0.0
    }
}

pub fn simionescu_q(x1: f64, x2: f64) -> f64 {
    (1.0 + 0.2 * (8.0 * angle(x1, x2)).cos()).powi(2) - x1 * x1 - x2 * x2
}

pub fn townsend_f(x1: f64, x2: f64) -> f64 {
    -((x1 - 0.1) * x2).cos().powi(2) - x1 * (3.0 * x1 + x2).sin()
}

pub fn townsend_q(x1: f64, x2: f64) -> f64 {
    let b = angle(x1, x2);
    let r = 2.0 * b.cos() - 0.5 * (2.0 * b).cos() - 0.25 * (3.0 * b).cos() - 0.125 * (4.0 * b).cos();
    r * r + (2.0 * b.sin()).powi(2) - x1 * x1 - x2 * x2
}

impl Analytic {
    pub const ALL: [Analytic; 4] = [Analytic::Sin, Analytic::Branin, Analytic::Simionescu, Analytic::Townsend];

    pub fn name(self) -> &'static str {
        match self {
            Analytic::Sin => "sin",
            Analytic::Branin => "branin",
            Analytic::Simionescu => "simionescu",
            Analytic::Townsend => "townsend",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            Analytic::Sin => 1,
            _ => 2,
        }
    }

    pub fn constrained(self) -> bool {
        matches!(self, Analytic::Simionescu | Analytic::Townsend)
    }

    pub fn n_test(self) -> usize {
        match self {
            Analytic::Sin => 50,
            _ => 200,
        }
    }

    /// Unit-box input mapped to the native domain.
    pub fn native(self, x: &[f64]) -> (f64, f64) {
        match self {
            Analytic::Sin => (x[0], 0.0),
            Analytic::Branin => (scale(x[0], -5.0, 10.0), scale(x[1], 0.0, 15.0)),
            Analytic::Simionescu => (scale(x[0], -1.25, 1.25), scale(x[1], -1.25, 1.25)),
            Analytic::Townsend => (scale(x[0], -2.25, 2.25), scale(x[1], -2.5, 1.75)),
        }
    }

    /// Unnormalized objective at a unit-box input.
    pub fn raw_f(self, x: &[f64]) -> f64 {
        let (a, b) = self.native(x);
        match self {
            Analytic::Sin => (20.0 * a).sin(),
            Analytic::Branin => branin(a, b),
            Analytic::Simionescu => 0.1 * a * b,
            Analytic::Townsend => townsend_f(a, b),
        }
    }

    /// Unnormalized constraint at a unit-box input.
    pub fn raw_q(self, x: &[f64]) -> Option<f64> {
        let (a, b) = self.native(x);
        match self {
            Analytic::Simionescu => Some(simionescu_q(a, b)),
            Analytic::Townsend => Some(townsend_q(a, b)),
            _ => None,
        }
    }

    pub fn normalization(self) -> Normalization {
        match self {
            Analytic::Sin => Normalization::IDENTITY,
            Analytic::Branin => BRANIN_NORM,
            Analytic::Simionescu => SIMIONESCU_NORM,
            Analytic::Townsend => TOWNSEND_NORM,
        }
    }

    /// Monte-Carlo recipe behind the embedded normalization constants.
    pub fn estimate_normalization(self) -> Normalization {
        let mut rng = ChaCha8Rng::seed_from_u64(NORMALIZATION_SEED);
        let d = self.dim();
        let mut fs = Vec::with_capacity(NORMALIZATION_SAMPLES);
        let mut qs = Vec::with_capacity(NORMALIZATION_SAMPLES);
        for _ in 0..NORMALIZATION_SAMPLES {
            let x: Vec<f64> = (0..d).map(|_| rng.random()).collect();
            fs.push(self.raw_f(&x));
            if let Some(q) = self.raw_q(&x) {
                qs.push(q);
            }
        }
        let (f_mean, f_std) = mean_std(&fs);
        Normalization {
            f_mean,
            f_std,
            q_std: (!qs.is_empty()).then(|| mean_std(&qs).1),
        }
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Finite data set split into held-out test points, initial-data candidates
/// and the pool AL queries from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolProblem {
    pub data: Dataset,
    pub test: Vec<usize>,
    /// Non-test indices eligible as initial data.
    pub initial_candidates: Vec<usize>,
    /// Every non-test index.
    pub pool: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProblemKind {
    Analytic(Analytic),
    Pool(PoolProblem),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkProblem {
    pub name: String,
    pub dim: usize,
    pub kind: ProblemKind,
    pub noise_std_f: f64,
    pub noise_std_q: f64,
    /// Region the initial data are drawn from in constrained problems.
    pub seed_box: BoxRegion,
    pub n_test: usize,
}

impl BenchmarkProblem {
    pub fn analytic(a: Analytic) -> Self {
        Self {
            name: a.name().into(),
            dim: a.dim(),
            kind: ProblemKind::Analytic(a),
            noise_std_f: NOISE_STD,
            noise_std_q: NOISE_STD,
            seed_box: BoxRegion::centered(a.dim()),
            n_test: a.n_test(),
        }
    }

    pub fn sin() -> Self {
        Self::analytic(Analytic::Sin)
    }

    pub fn branin() -> Self {
        Self::analytic(Analytic::Branin)
    }

    pub fn simionescu() -> Self {
        Self::analytic(Analytic::Simionescu)
    }

    pub fn townsend() -> Self {
        Self::analytic(Analytic::Townsend)
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Analytic::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(name))
            .map(Self::analytic)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown benchmark {name:?}")))
    }

    pub fn constrained(&self) -> bool {
        match &self.kind {
            ProblemKind::Analytic(a) => a.constrained(),
            ProblemKind::Pool(p) => p.data.safety.is_some(),
        }
    }

    pub fn is_pool(&self) -> bool {
        matches!(self.kind, ProblemKind::Pool(_))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!("{} coordinates for a {}-D problem", x.len(), self.dim)));
        }
        if !x.iter().all(|v| (0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParameter(format!("input {x:?} outside [0,1]^{}", self.dim)));
        }
        Ok(())
    }

    /// Noise-free normalized objective of an analytic problem.
    pub fn evaluate_f(&self, x: &[f64]) -> Result<f64> {
        self.check_input(x)?;
        match &self.kind {
            ProblemKind::Analytic(a) => {
                let n = a.normalization();
                Ok((a.raw_f(x) - n.f_mean) / n.f_std)
            }
            ProblemKind::Pool(_) => Err(Error::InvalidParameter("pool problems are evaluated by index".into())),
        }
    }

    /// Noise-free std-normalized constraint of an analytic problem.
    pub fn evaluate_q(&self, x: &[f64]) -> Result<Option<f64>> {
        self.check_input(x)?;
        match &self.kind {
            ProblemKind::Analytic(a) => {
                let n = a.normalization();
                Ok(a.raw_q(x).map(|q| q / n.q_std.expect("constrained problems carry q_std")))
            }
            ProblemKind::Pool(_) => Err(Error::InvalidParameter("pool problems are evaluated by index".into())),
        }
    }

    /// Noisy observation `(y, z)` at `x` of an analytic problem.
    pub fn observe(&self, x: &[f64], rng: &mut impl Rng) -> Result<(f64, Option<f64>)> {
        let f = self.evaluate_f(x)?;
        let q = self.evaluate_q(x)?;
        let e: f64 = StandardNormal.sample(rng);
        let y = f + self.noise_std_f * e;
        let z = q.map(|q| {
            let e: f64 = StandardNormal.sample(rng);
            q + self.noise_std_q * e
        });
        Ok((y, z))
    }

    /// Held-out test inputs with noise-free targets; constrained problems
    /// keep only truly safe points.
    pub fn test_set(&self, rng: &mut impl Rng) -> Result<Dataset> {
        match &self.kind {
            ProblemKind::Pool(p) => Ok(subset(&p.data, &p.test)),
            ProblemKind::Analytic(_) => {
                let d = self.dim;
                let mut data = Dataset::empty(d, false);
                let mut tries = 0;
                while data.len() < self.n_test {
                    tries += 1;
                    if tries > MAX_REJECTIONS * self.n_test {
                        return Err(Error::InvalidParameter(format!("{}: safe region too small for test set", self.name)));
                    }
                    let x: Vec<f64> = (0..d).map(|_| rng.random()).collect();
                    if self.evaluate_q(&x)?.is_some_and(|q| q < 0.0) {
                        continue;
                    }
                    data.push(&x, self.evaluate_f(&x)?, None);
                }
                Ok(data)
            }
        }
    }

    /// `n_init` starting observations: inside the seed box with observed
    /// `z ≥ 0` for constrained problems, uniform otherwise. Pool problems
    /// also return the chosen pool indices.
    pub fn initial_data(&self, n_init: usize, rng: &mut impl Rng) -> Result<(Dataset, Vec<usize>)> {
        let d = self.dim;
        let constrained = self.constrained();
        match &self.kind {
            ProblemKind::Analytic(_) => {
                let mut data = Dataset::empty(d, constrained);
                let region = if constrained { self.seed_box.clone() } else { BoxRegion::unit(d) };
                let mut tries = 0;
                while data.len() < n_init {
                    tries += 1;
                    if tries > MAX_REJECTIONS * n_init.max(1) {
                        return Err(Error::InvalidParameter(format!("{}: no safe initial data in the seed box", self.name)));
                    }
                    let x: Vec<f64> = region.sample(1, rng).row(0).iter().copied().collect();
                    let (y, z) = self.observe(&x, rng)?;
                    if z.is_some_and(|z| z < 0.0) {
                        continue;
                    }
                    data.push(&x, y, z);
                }
                Ok((data, Vec::new()))
            }
            ProblemKind::Pool(p) => {
                if p.initial_candidates.len() < n_init {
                    return Err(Error::InvalidParameter(format!(
                        "{}: {} initial candidates for n_init = {n_init}",
                        self.name,
                        p.initial_candidates.len()
                    )));
                }
                let chosen: Vec<usize> = p.initial_candidates.choose_multiple(rng, n_init).copied().collect();
                Ok((subset(&p.data, &chosen), chosen))
            }
        }
    }
}

/// Rows `idx` of `data`, in order.
pub fn subset(data: &Dataset, idx: &[usize]) -> Dataset {
    let inputs = Mat::from_fn(idx.len(), data.dim(), |i, j| data.inputs[(idx[i], j)]);
    Dataset {
        inputs,
        outputs: idx.iter().map(|&i| data.outputs[i]).collect(),
        safety: data.safety.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect()),
    }
}

/// Parses a CSV with header `x1,…,xD,y[,z]` and inputs inside `[0,1]^D`.
pub fn load_pool_csv(path: &Path, dim: usize, has_safety: bool) -> Result<Dataset> {
    let csv_err = |line: u64, message: String| Error::Csv {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(0, e.to_string()))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(1, e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut expected: Vec<String> = (1..=dim).map(|i| format!("x{i}")).collect();
    expected.push("y".into());
    if has_safety {
        expected.push("z".into());
    }
    if header != expected {
        return Err(Error::Schema(format!(
            "{}: header {:?}, expected {:?}",
            path.display(),
            header,
            expected
        )));
    }
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut zs = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let vals = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| csv_err(line, format!("not a number: {s:?}"))))
            .collect::<Result<Vec<f64>>>()?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(csv_err(line, "non-finite value".into()));
        }
        if vals[..dim].iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(csv_err(line, format!("input {:?} outside [0,1]^{dim}", &vals[..dim])));
        }
        xs.extend_from_slice(&vals[..dim]);
        ys.push(vals[dim]);
        if has_safety {
            zs.push(vals[dim + 1]);
        }
    }
    let inputs = Mat::from_row_slice(ys.len(), dim, &xs);
    Dataset::new(inputs, ys, has_safety.then_some(zs))
}

/// Test-set size and safety shift for the recognized real data sets.
pub fn known_split(name: &str) -> Option<(usize, f64)> {
    match name.to_ascii_lowercase().as_str() {
        "airline" => Some((50, 0.0)),
        "lgbb" => Some((200, 0.0)),
        "airfoil" => Some((500, 0.0)),
        "engine" => Some((200, 0.2)),
        _ => None,
    }
}

impl BenchmarkProblem {
    /// Splits a loaded pool. Recognized names use their published test-set
    /// size (and the engine data set's constraint shift); otherwise `n_test`
    /// is required. Constrained pools draw test points among safe rows and
    /// initial candidates among safe rows inside the seed box.
    pub fn pool(name: &str, mut data: Dataset, n_test: Option<usize>, rng: &mut impl Rng) -> Result<Self> {
        let (default_test, shift) = known_split(name).unwrap_or((0, 0.0));
        let n_test = match (n_test, known_split(name)) {
            (Some(n), _) => n,
            (None, Some(_)) => default_test,
            (None, None) => return Err(Error::InvalidParameter(format!("pool {name:?} needs an explicit test size"))),
        };
        if let Some(z) = data.safety.as_mut() {
            z.iter_mut().for_each(|v| *v -= shift);
        }
        let d = data.dim();
        let seed_box = BoxRegion::centered(d);
        let safe_at = |i: usize| data.safety.as_ref().is_none_or(|z| z[i] >= 0.0);
        let mut eligible: Vec<usize> = (0..data.len()).filter(|&i| safe_at(i)).collect();
        if eligible.len() < n_test {
            return Err(Error::InvalidParameter(format!(
                "pool {name:?}: {} eligible test rows for {n_test} test points",
                eligible.len()
            )));
        }
        eligible.shuffle(rng);
        let mut test: Vec<usize> = eligible[..n_test].to_vec();
        test.sort_unstable();
        let pool: Vec<usize> = (0..data.len()).filter(|i| test.binary_search(i).is_err()).collect();
        let initial_candidates = if data.safety.is_some() {
            pool.iter()
                .copied()
                .filter(|&i| safe_at(i) && seed_box.contains(&data.row(i)))
                .collect()
        } else {
            pool.clone()
        };
        Ok(Self {
            name: name.into(),
            dim: d,
            kind: ProblemKind::Pool(PoolProblem {
                data,
                test,
                initial_candidates,
                pool,
            }),
            noise_std_f: 0.0,
            noise_std_q: 0.0,
            seed_box,
            n_test,
        })
    }
}
