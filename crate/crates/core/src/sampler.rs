//! Synthetic safe-AL tasks: hyperparameter priors, Fourier-feature function
//! samples with analytic domain means, sech safety prior means and initial
//! data collected inside a safe seed box.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{CosineBank, Var};
use crate::gp::{Dataset, KernelParams, Mat};

pub const DEFAULT_FEATURES: usize = 100;
pub const DEFAULT_MAX_ITER: usize = 50;
/// Squared amplitude `c²` of the sech prior mean.
pub const SECH_AMPLITUDE_SQ: f64 = 0.5;
/// Replacement for `|1/∏ a_d|` when a frequency component is near zero.
pub const NEAR_ZERO_GUARD: f64 = 100_000.0;
pub const NEAR_ZERO_FREQUENCY: f64 = 1e-5;

/// Shape of the sech prior mean `μ_q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SechParams {
    pub c: f64,
    pub w: Vec<f64>,
    /// Orthogonal rotation, `D×D`.
    pub q: Mat,
}

impl SechParams {
    pub fn dim(&self) -> usize {
        self.w.len()
    }
}

/// `μ_q(x) = 3.2c(−0.47 + sech((1/D) Σ_d w_d u_d²))` with `u = Qᵀ(x − ½)`.
pub fn sech_prior_mean(x: &[f64], p: &SechParams) -> f64 {
    let d = p.dim();
    let mut s = 0.0;
    for k in 0..d {
        let u: f64 = (0..d).map(|j| p.q[(j, k)] * (x[j] - 0.5)).sum();
        s += p.w[k] * u * u;
    }
    3.2 * p.c * (-0.47 + 1.0 / (s / d as f64).cosh())
}

/// Row-wise [`sech_prior_mean`] on the tape, `n×1`.
pub fn sech_prior_mean_var<'t>(x: Var<'t>, p: &SechParams) -> Var<'t> {
    let tape = x.tape();
    let q = tape.constant(p.q.clone());
    let w = tape.constant(Mat::from_row_slice(1, p.dim(), &p.w));
    let u = x.shift(-0.5).matmul(q);
    (u.square() * w)
        .row_sums()
        .scale(1.0 / p.dim() as f64)
        .sech()
        .shift(-0.47)
        .scale(3.2 * p.c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHyperParams {
    pub task_kernel: KernelParams,
    pub task_noise_var: f64,
    pub safety_kernel: KernelParams,
    pub safety_noise_var: f64,
    pub sech: SechParams,
}

fn random_orthogonal(d: usize, rng: &mut impl Rng) -> Mat {
    let a = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..=1.0));
    a.qr().q()
}

pub fn sample_hyperparams(d: usize, rng: &mut impl Rng) -> TaskHyperParams {
    assert!(d >= 1);
    let shift = Gamma::new(1.0, 0.1).expect("valid gamma");
    let lengthscales = |rng: &mut dyn rand::RngCore| -> Vec<f64> {
        (0..d).map(|_| 0.2 + shift.sample(rng)).collect()
    };
    let v = rng.random_range(0.9616..=1.0);
    let task_ls = lengthscales(rng);
    let c_sq = SECH_AMPLITUDE_SQ;
    let vq = rng.random_range(0.9616 - c_sq..=1.0 - c_sq);
    let safety_ls = lengthscales(rng);
    let w = (0..d).map(|_| rng.random_range(5.0..=40.0)).collect();
    let q = random_orthogonal(d, rng);
    TaskHyperParams {
        task_kernel: KernelParams::new(v, task_ls).expect("positive draws"),
        task_noise_var: 1.0001 - v,
        safety_kernel: KernelParams::new(vq, safety_ls).expect("positive draws"),
        safety_noise_var: 1.0001 - c_sq - vq,
        sech: SechParams {
            c: c_sq.sqrt(),
            w,
            q,
        },
    }
}

/// Pathwise GP sample `Σ_i ω_i √(2/L) cos(a_iᵀx + b_i) − mean_shift [+ μ_q(x)]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierFunction {
    pub weights: Vec<f64>,
    /// `L×D`
    pub frequencies: Mat,
    pub phases: Vec<f64>,
    pub mean_shift: f64,
    pub prior_mean: Option<SechParams>,
}

impl FourierFunction {
    pub fn n_features(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.frequencies.ncols()
    }

    fn amplitude(&self) -> f64 {
        (2.0 / self.n_features() as f64).sqrt()
    }

    /// The raw feature sum, before shifting.
    pub fn raw(&self, x: &[f64]) -> f64 {
        let a = self.amplitude();
        let mut s = 0.0;
        for i in 0..self.n_features() {
            let arg: f64 = (0..self.dim()).map(|d| self.frequencies[(i, d)] * x[d]).sum::<f64>() + self.phases[i];
            s += self.weights[i] * a * arg.cos();
        }
        s
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let m = self.prior_mean.as_ref().map_or(0.0, |p| sech_prior_mean(x, p));
        self.raw(x) - self.mean_shift + m
    }

    pub fn eval_rows(&self, x: &Mat) -> Vec<f64> {
        let bank = self.bank_without_prior();
        let out = bank.evaluate(x);
        (0..x.nrows())
            .map(|i| {
                let m = self.prior_mean.as_ref().map_or(0.0, |p| {
                    let row: Vec<f64> = x.row(i).iter().copied().collect();
                    sech_prior_mean(&row, p)
                });
                out[(i, 0)] + m
            })
            .collect()
    }

    /// The shifted feature sum as a single-output cosine bank.
    pub fn bank_without_prior(&self) -> CosineBank {
        let a = self.amplitude();
        CosineBank {
            frequencies: self.frequencies.clone(),
            phases: self.phases.clone(),
            weights: self.weights.iter().map(|w| w * a).collect(),
            offsets: vec![-self.mean_shift],
            group_len: self.n_features(),
        }
    }

    /// Row-wise evaluation on the tape, `n×1`.
    pub fn eval_var<'t>(&self, x: Var<'t>) -> Var<'t> {
        let out = x.cosines(&Arc::new(self.bank_without_prior()));
        match &self.prior_mean {
            Some(p) => out + sech_prior_mean_var(x, p),
            None => out,
        }
    }
}

/// Stacks several functions of equal feature count into one bank whose
/// column `k` evaluates `fns[k]` (prior means excluded).
pub fn stacked_bank(fns: &[&FourierFunction]) -> CosineBank {
    let l = fns[0].n_features();
    let d = fns[0].dim();
    let mut frequencies = Mat::zeros(l * fns.len(), d);
    let mut phases = Vec::with_capacity(l * fns.len());
    let mut weights = Vec::with_capacity(l * fns.len());
    let mut offsets = Vec::with_capacity(fns.len());
    for (k, f) in fns.iter().enumerate() {
        assert_eq!(f.n_features(), l);
        let b = f.bank_without_prior();
        frequencies.view_mut((k * l, 0), (l, d)).copy_from(&b.frequencies);
        phases.extend(b.phases);
        weights.extend(b.weights);
        offsets.extend(b.offsets);
    }
    CosineBank {
        frequencies,
        phases,
        weights,
        offsets,
        group_len: l,
    }
}

/// Exact integral of the raw feature sum over `[0,1]^D`.
pub fn domain_mean(f: &FourierFunction) -> f64 {
    let d = f.dim();
    assert!(d <= 10, "corner enumeration limited to D ≤ 10");
    let amp = f.amplitude();
    // D-th antiderivative of cos.
    let antideriv = |t: f64| match d % 4 {
        1 => t.sin(),
        2 => -t.cos(),
        3 => -t.sin(),
        _ => t.cos(),
    };
    let mut total = 0.0;
    for i in 0..f.n_features() {
        let a: Vec<f64> = (0..d).map(|k| f.frequencies[(i, k)]).collect();
        let prod: f64 = a.iter().product();
        let inv = if a.iter().any(|v| v.abs() < NEAR_ZERO_FREQUENCY) || !(1.0 / prod).is_finite() {
            NEAR_ZERO_GUARD * if prod < 0.0 { -1.0 } else { 1.0 }
        } else {
            1.0 / prod
        };
        let mut corner_sum = 0.0;
        for mask in 0u32..(1 << d) {
            let mut arg = f.phases[i];
            for (k, ak) in a.iter().enumerate() {
                if mask & (1 << k) != 0 {
                    arg += ak;
                }
            }
            let zeros = d as u32 - mask.count_ones();
            let sign = if zeros.is_multiple_of(2) { 1.0 } else { -1.0 };
            corner_sum += sign * antideriv(arg);
        }
        total += f.weights[i] * amp * inv * corner_sum;
    }
    total
}

/// Draws a pathwise sample of `GP(0, k)` with `n_features` cosine features.
/// The returned function has its analytic domain mean subtracted.
pub fn sample_rff(kernel: &KernelParams, n_features: usize, rng: &mut impl Rng) -> FourierFunction {
    assert!(n_features >= 1);
    let d = kernel.dim();
    let omega = Normal::new(0.0, kernel.variance.sqrt()).expect("positive variance");
    let weights: Vec<f64> = (0..n_features).map(|_| omega.sample(rng)).collect();
    let mut frequencies = Mat::zeros(n_features, d);
    for i in 0..n_features {
        for k in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            frequencies[(i, k)] = z / kernel.lengthscales[k];
        }
    }
    let phases: Vec<f64> = (0..n_features).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let mut f = FourierFunction {
        weights,
        frequencies,
        phases,
        mean_shift: 0.0,
        prior_mean: None,
    };
    f.mean_shift = domain_mean(&f);
    f
}

/// Axis-aligned box inside the unit hypercube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxRegion {
    /// `[0.4, 0.6]^D`
    pub fn centered(d: usize) -> Self {
        Self {
            lower: vec![0.4; d],
            upper: vec![0.6; d],
        }
    }

    pub fn unit(d: usize) -> Self {
        Self {
            lower: vec![0.0; d],
            upper: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn sample(&self, n: usize, rng: &mut impl Rng) -> Mat {
        let d = self.dim();
        let mut x = Mat::zeros(n, d);
        for i in 0..n {
            for k in 0..d {
                x[(i, k)] = if self.upper[k] > self.lower[k] {
                    rng.random_range(self.lower[k]..self.upper[k])
                } else {
                    self.lower[k]
                };
            }
        }
        x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafeALTask {
    pub f: FourierFunction,
    pub q: FourierFunction,
    pub hyper: TaskHyperParams,
    pub initial: Dataset,
    /// The initial data were collected before the iteration limit forced
    /// acceptance of unsafe rows.
    pub seeded_safely: bool,
}

/// Draws `f` and `q` (with the sech prior mean) for the given hyperparameters.
pub fn sample_functions(
    hyper: &TaskHyperParams,
    n_features: usize,
    rng: &mut impl Rng,
) -> (FourierFunction, FourierFunction) {
    let f = sample_rff(&hyper.task_kernel, n_features, rng);
    let mut q = sample_rff(&hyper.safety_kernel, n_features, rng);
    q.prior_mean = Some(hyper.sech.clone());
    (f, q)
}

fn noisy(values: Vec<f64>, var: f64, rng: &mut impl Rng) -> Vec<f64> {
    let sd = var.sqrt();
    values
        .into_iter()
        .map(|v| {
            let e: f64 = StandardNormal.sample(rng);
            v + sd * e
        })
        .collect()
}

/// Collects `n_init` observations inside `seed_box`, keeping only safe rows
/// until the final iteration accepts everything.
pub fn sample_initial(
    f: &FourierFunction,
    q: &FourierFunction,
    hyper: &TaskHyperParams,
    n_init: usize,
    seed_box: &BoxRegion,
    max_iter: usize,
    rng: &mut impl Rng,
) -> (Dataset, bool) {
    assert!(n_init >= 1 && max_iter >= 1);
    let d = seed_box.dim();
    let mut data = Dataset::empty(d, true);
    for it in 1..=max_iter {
        let x = seed_box.sample(n_init, rng);
        let y = noisy(f.eval_rows(&x), hyper.task_noise_var, rng);
        let z = noisy(q.eval_rows(&x), hyper.safety_noise_var, rng);
        let mut rest = Vec::new();
        for i in 0..n_init {
            let row: Vec<f64> = x.row(i).iter().copied().collect();
            if z[i] >= 0.0 {
                data.push(&row, y[i], Some(z[i]));
            } else {
                rest.push((row, y[i], z[i]));
            }
        }
        let forced = it == max_iter && data.len() < n_init;
        if it == max_iter {
            for (row, y, z) in rest {
                data.push(&row, y, Some(z));
            }
        }
        if data.len() >= n_init {
            let keep = Dataset::new(
                data.inputs.rows(0, n_init).into_owned(),
                data.outputs[..n_init].to_vec(),
                data.safety.as_ref().map(|s| s[..n_init].to_vec()),
            )
            .expect("rows lie in the seed box");
            return (keep, !forced);
        }
    }
    unreachable!("the final iteration accepts every row")
}

pub fn sample_task(
    hyper: &TaskHyperParams,
    n_features: usize,
    n_init: usize,
    seed_box: &BoxRegion,
    max_iter: usize,
    rng: &mut impl Rng,
) -> SafeALTask {
    let (f, q) = sample_functions(hyper, n_features, rng);
    let (initial, seeded_safely) = sample_initial(&f, &q, hyper, n_init, seed_box, max_iter, rng);
    SafeALTask {
        f,
        q,
        hyper: hyper.clone(),
        initial,
        seeded_safely,
    }
}

/// Initial data uniform over the whole domain, without a safety channel.
pub fn sample_initial_unconstrained(
    f: &FourierFunction,
    noise_var: f64,
    n_init: usize,
    rng: &mut impl Rng,
) -> Dataset {
    let x = BoxRegion::unit(f.dim()).sample(n_init, rng);
    let y = noisy(f.eval_rows(&x), noise_var, rng);
    Dataset::new(x, y, None).expect("unit-box inputs")
}

pub fn sample_task_unconstrained(
    hyper: &TaskHyperParams,
    n_features: usize,
    n_init: usize,
    rng: &mut impl Rng,
) -> (FourierFunction, Dataset) {
    let f = sample_rff(&hyper.task_kernel, n_features, rng);
    let data = sample_initial_unconstrained(&f, hyper.task_noise_var, n_init, rng);
    (f, data)
}

/// `n_grid` points with independent `Beta(0.5, 0.5)` coordinates.
pub fn sample_grid(n_grid: usize, d: usize, rng: &mut impl Rng) -> Mat {
    let beta = Beta::new(0.5, 0.5).expect("valid beta");
    Mat::from_fn(n_grid, d, |_, _| beta.sample(rng))
}

/// Grid size used by the mutual-information objectives.
pub fn default_grid_size(d: usize) -> usize {
    if d <= 2 {
        100
    } else {
        500
    }
}
