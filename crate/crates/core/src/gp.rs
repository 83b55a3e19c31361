//! Exact Gaussian-process regression with an RBF kernel.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::instrument;
use crate::optim::{lbfgs_box, LbfgsOptions};
use crate::{Error, Result};

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

pub const JITTER_START: f64 = 1e-10;
pub const JITTER_MAX: f64 = 1e-4;

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub variance: f64,
    pub lengthscales: Vec<f64>,
}

impl KernelParams {
    pub fn new(variance: f64, lengthscales: Vec<f64>) -> Result<Self> {
        if !(variance.is_finite() && variance > 0.0) {
            return Err(Error::InvalidParameter(format!("kernel variance {variance}")));
        }
        if lengthscales.is_empty() {
            return Err(Error::InvalidParameter("no lengthscales".into()));
        }
        if let Some(l) = lengthscales.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return Err(Error::InvalidParameter(format!("lengthscale {l}")));
        }
        Ok(Self {
            variance,
            lengthscales,
        })
    }

    pub fn isotropic(variance: f64, lengthscale: f64, dim: usize) -> Result<Self> {
        Self::new(variance, vec![lengthscale; dim])
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }
}

pub fn rbf_kernel(x: &[f64], x2: &[f64], params: &KernelParams) -> f64 {
    let s: f64 = x
        .iter()
        .zip(x2)
        .zip(&params.lengthscales)
        .map(|((a, b), l)| {
            let r = (a - b) / l;
            r * r
        })
        .sum();
    params.variance * (-0.5 * s).exp()
}

/// Cross-covariance between the rows of `a` and `b`.
pub fn gram(a: &Mat, b: &Mat, params: &KernelParams) -> Mat {
    let inv: Vec<f64> = params.lengthscales.iter().map(|l| 1.0 / (l * l)).collect();
    Mat::from_fn(a.nrows(), b.nrows(), |i, j| {
        let mut s = 0.0;
        for (d, w) in inv.iter().enumerate() {
            let r = a[(i, d)] - b[(j, d)];
            s += r * r * w;
        }
        params.variance * (-0.5 * s).exp()
    })
}

/// Observations `(x, y[, z])` with inputs in the unit hypercube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Mat,
    pub outputs: Vec<f64>,
    pub safety: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(inputs: Mat, outputs: Vec<f64>, safety: Option<Vec<f64>>) -> Result<Self> {
        if inputs.nrows() != outputs.len() {
            return Err(Error::Dimension(format!(
                "{} input rows but {} outputs",
                inputs.nrows(),
                outputs.len()
            )));
        }
        if let Some(z) = &safety {
            if z.len() != outputs.len() {
                return Err(Error::Dimension(format!(
                    "{} outputs but {} safety values",
                    outputs.len(),
                    z.len()
                )));
            }
        }
        if let Some(v) = inputs.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidParameter(format!("input {v} outside [0, 1]")));
        }
        Ok(Self {
            inputs,
            outputs,
            safety,
        })
    }

    pub fn empty(dim: usize, with_safety: bool) -> Self {
        Self {
            inputs: Mat::zeros(0, dim),
            outputs: Vec::new(),
            safety: with_safety.then(Vec::new),
        }
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn push(&mut self, x: &[f64], y: f64, z: Option<f64>) {
        assert_eq!(x.len(), self.dim());
        let n = self.len();
        let inputs = std::mem::replace(&mut self.inputs, Mat::zeros(0, 0));
        self.inputs = inputs.insert_row(n, 0.0);
        for (d, v) in x.iter().enumerate() {
            self.inputs[(n, d)] = *v;
        }
        self.outputs.push(y);
        match (&mut self.safety, z) {
            (Some(s), Some(z)) => s.push(z),
            (None, None) => {}
            _ => panic!("safety channel mismatch on push"),
        }
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.inputs.row(i).iter().copied().collect()
    }
}

/// Joint Gaussian over `m` outputs; the covariance includes observation noise.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPredictive {
    pub mean: Vector,
    pub covariance: Mat,
}

/// Lower Cholesky factor obtained with diagonal jitter escalation.
#[derive(Debug, Clone)]
pub struct Factor {
    pub l: Mat,
    pub jitter: f64,
}

impl Factor {
    pub fn new(a: &Mat) -> Result<Self> {
        match crate::autodiff::jittered_cholesky(a) {
            Some((l, jitter)) => Ok(Self { l, jitter }),
            None => Err(Error::SingularSystem {
                jitter: JITTER_MAX,
                condition: condition_estimate(a),
            }),
        }
    }

    /// `L⁻¹ b`
    pub fn solve_lower(&self, b: &Mat) -> Mat {
        if self.l.nrows() == 0 {
            return b.clone();
        }
        self.l
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn solve_lower_vec(&self, b: &Vector) -> Vector {
        if self.l.nrows() == 0 {
            return b.clone();
        }
        self.l
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `A⁻¹ b`
    pub fn solve(&self, b: &Vector) -> Vector {
        let w = self.solve_lower_vec(b);
        if self.l.nrows() == 0 {
            return w;
        }
        self.l
            .tr_solve_lower_triangular(&w)
            .expect("Cholesky factor has a positive diagonal")
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> Mat {
        let n = self.l.nrows();
        let w = self.solve_lower(&Mat::identity(n, n));
        w.transpose() * w
    }
}

/// Ratio of extreme eigenvalue magnitudes of the symmetric part of `a`.
pub fn condition_estimate(a: &Mat) -> f64 {
    if a.nrows() == 0 || a.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigenvalues();
    let max = eig.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let min = eig.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Conditioned GP with a factored training gram, reusable across test sets.
#[derive(Debug, Clone)]
pub struct Posterior {
    inputs: Mat,
    factor: Factor,
    /// `L⁻¹ (y − m(X))`
    beta: Vector,
    pub kernel: KernelParams,
    pub noise_var: f64,
}

impl Posterior {
    /// `residuals` are the training outputs minus the prior mean at `inputs`.
    pub fn new(inputs: &Mat, residuals: &[f64], kernel: &KernelParams, noise_var: f64) -> Result<Self> {
        if inputs.nrows() != residuals.len() {
            return Err(Error::Dimension(format!(
                "{} inputs but {} values",
                inputs.nrows(),
                residuals.len()
            )));
        }
        if inputs.nrows() > 0 && inputs.ncols() != kernel.dim() {
            return Err(Error::Dimension(format!(
                "inputs have {} columns, kernel expects {}",
                inputs.ncols(),
                kernel.dim()
            )));
        }
        if !(noise_var > 0.0 && noise_var.is_finite()) {
            return Err(Error::InvalidParameter(format!("noise variance {noise_var}")));
        }
        let mut k = gram(inputs, inputs, kernel);
        for i in 0..k.nrows() {
            k[(i, i)] += noise_var;
        }
        let factor = if k.nrows() == 0 {
            Factor {
                l: Mat::zeros(0, 0),
                jitter: 0.0,
            }
        } else {
            Factor::new(&k)?
        };
        let beta = factor.solve_lower_vec(&Vector::from_column_slice(residuals));
        Ok(Self {
            inputs: inputs.clone(),
            factor,
            beta,
            kernel: kernel.clone(),
            noise_var,
        })
    }

    pub fn n_train(&self) -> usize {
        self.inputs.nrows()
    }

    /// Mean offset (add the prior mean) and noise-inclusive covariance at `test`.
    pub fn predict(&self, test: &Mat) -> (Vector, Mat) {
        let mut cov = gram(test, test, &self.kernel);
        for i in 0..cov.nrows() {
            cov[(i, i)] += self.noise_var;
        }
        if self.n_train() == 0 {
            return (Vector::zeros(test.nrows()), cov);
        }
        let w = self.factor.solve_lower(&gram(&self.inputs, test, &self.kernel));
        let mean = w.transpose() * &self.beta;
        cov -= w.transpose() * &w;
        let cov = (&cov + cov.transpose()) * 0.5;
        (mean, cov)
    }

    /// Mean offset and noise-inclusive marginal variances at `test`.
    pub fn predict_diag(&self, test: &Mat) -> (Vector, Vector) {
        let prior = self.kernel.variance + self.noise_var;
        if self.n_train() == 0 {
            return (
                Vector::zeros(test.nrows()),
                Vector::from_element(test.nrows(), prior),
            );
        }
        let w = self.factor.solve_lower(&gram(&self.inputs, test, &self.kernel));
        let mean = w.transpose() * &self.beta;
        let var = Vector::from_fn(test.nrows(), |j, _| {
            let c = w.column(j);
            (prior - c.dot(&c)).max(self.noise_var * 1e-9)
        });
        (mean, var)
    }
}

/// Posterior predictive at `test` given training `(inputs, values)`.
pub fn gp_posterior(
    inputs: &Mat,
    values: &[f64],
    test: &Mat,
    prior_mean: Option<&dyn Fn(&[f64]) -> f64>,
    kernel: &KernelParams,
    noise_var: f64,
) -> Result<GaussianPredictive> {
    let mean_at = |m: &Mat, i: usize| -> f64 {
        match prior_mean {
            Some(f) => f(m.row(i).iter().copied().collect::<Vec<_>>().as_slice()),
            None => 0.0,
        }
    };
    let residuals: Vec<f64> = (0..inputs.nrows()).map(|i| values[i] - mean_at(inputs, i)).collect();
    let post = Posterior::new(inputs, &residuals, kernel, noise_var)?;
    let (offset, covariance) = post.predict(test);
    let mean = Vector::from_fn(test.nrows(), |i, _| offset[i] + mean_at(test, i));
    Ok(GaussianPredictive { mean, covariance })
}

pub fn log_pdf(values: &[f64], dist: &GaussianPredictive) -> Result<f64> {
    let m = dist.mean.len();
    if values.len() != m || dist.covariance.nrows() != m || dist.covariance.ncols() != m {
        return Err(Error::Dimension(format!(
            "{} values against a {m}-dimensional Gaussian",
            values.len()
        )));
    }
    let factor = Factor::new(&dist.covariance)?;
    let r = Vector::from_column_slice(values) - &dist.mean;
    let e = factor.solve_lower_vec(&r);
    Ok(-0.5 * e.dot(&e) - 0.5 * factor.log_det() - 0.5 * m as f64 * LOG_2PI)
}

pub fn entropy(dist: &GaussianPredictive) -> Result<f64> {
    let m = dist.mean.len() as f64;
    let factor = Factor::new(&dist.covariance)?;
    Ok(0.5 * m * (LOG_2PI + 1.0) + 0.5 * factor.log_det())
}

/// `P(z ≥ 0)` for `z ~ N(pred_mean, pred_var)`.
pub fn safety_prob_nonneg(pred_mean: f64, pred_var: f64) -> f64 {
    0.5 * (1.0 + libm::erf(pred_mean / (2.0 * pred_var).sqrt()))
}

/// `P(z < 0)`, the exact complement of [`safety_prob_nonneg`].
pub fn safety_prob_negative(pred_mean: f64, pred_var: f64) -> f64 {
    1.0 - safety_prob_nonneg(pred_mean, pred_var)
}

/// Predictive entropy of a single Gaussian output.
pub fn scalar_entropy(var: f64) -> f64 {
    0.5 * (LOG_2PI + 1.0 + var.ln())
}

/// Box bounds for the log-parameters `[log l_1.., log v, log σ²]`.
pub fn log_bounds(dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![1e-2f64.ln(); dim];
    let mut hi = vec![1e2f64.ln(); dim];
    lo.push(1e-4f64.ln());
    hi.push(1e2f64.ln());
    lo.push(1e-6f64.ln());
    hi.push(1e1f64.ln());
    (lo, hi)
}

/// Log marginal likelihood and its gradient in log-parameter space.
pub fn log_marginal_likelihood(inputs: &Mat, values: &[f64], log_params: &[f64]) -> (f64, Vec<f64>) {
    let d = inputs.ncols();
    let n = inputs.nrows();
    let ls: Vec<f64> = log_params[..d].iter().map(|v| v.exp()).collect();
    let var = log_params[d].exp();
    let noise = log_params[d + 1].exp();
    let kernel = KernelParams {
        variance: var,
        lengthscales: ls.clone(),
    };
    let kr = gram(inputs, inputs, &kernel);
    let mut k = kr.clone();
    for i in 0..n {
        k[(i, i)] += noise;
    }
    let factor = match Factor::new(&k) {
        Ok(f) => f,
        Err(_) => return (f64::NEG_INFINITY, vec![0.0; d + 2]),
    };
    let y = Vector::from_column_slice(values);
    let alpha = factor.solve(&y);
    let lml = -0.5 * y.dot(&alpha) - 0.5 * factor.log_det() - 0.5 * n as f64 * LOG_2PI;

    let a = &alpha * alpha.transpose() - factor.inverse();
    let mut grad = vec![0.0; d + 2];
    for dd in 0..d {
        let inv = 1.0 / (ls[dd] * ls[dd]);
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                let r = inputs[(i, dd)] - inputs[(j, dd)];
                s += a[(i, j)] * kr[(i, j)] * r * r * inv;
            }
        }
        grad[dd] = 0.5 * s;
    }
    grad[d] = 0.5 * a.component_mul(&kr).sum();
    grad[d + 1] = 0.5 * noise * a.trace();
    (lml, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub kernel: KernelParams,
    pub noise_var: f64,
    pub lml: f64,
    /// No restart improved on its initialization.
    pub degraded: bool,
}

pub const FIT_RESTARTS: usize = 5;

/// Type-II maximum likelihood over `(l, v, σ²)` with box bounds and restarts.
///
/// Restart initializations are a deterministic function of the data size, so
/// the fit is a pure function of its inputs.
pub fn fit_type2_ml(inputs: &Mat, values: &[f64]) -> Result<FitResult> {
    let n = inputs.nrows();
    if n < 2 {
        return Err(Error::InvalidParameter(format!("Type-II ML needs n ≥ 2, got {n}")));
    }
    if values.len() != n {
        return Err(Error::Dimension(format!("{n} inputs but {} values", values.len())));
    }
    instrument::note_fit();
    let d = inputs.ncols();
    let (lo, hi) = log_bounds(d);
    let mean = values.iter().sum::<f64>() / n as f64;
    let spread = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let spread = spread.clamp(1e-3, 1e2);

    let mut rng = ChaCha8Rng::seed_from_u64(0x6a09_e667 ^ n as u64);
    let mut starts = Vec::with_capacity(FIT_RESTARTS);
    let mut first = vec![0.3f64.ln(); d];
    first.push(spread.ln());
    first.push((0.1 * spread).ln());
    starts.push(first);
    while starts.len() < FIT_RESTARTS {
        let mut s: Vec<f64> = (0..d).map(|_| rng.random_range(0.05f64.ln()..2.0f64.ln())).collect();
        s.push(rng.random_range((0.2 * spread).ln()..(5.0 * spread).ln()));
        s.push(rng.random_range(1e-4f64.ln()..(0.5 * spread).ln().max(1e-4f64.ln() + 1.0)));
        starts.push(s);
    }

    let opts = LbfgsOptions {
        max_iter: 100,
        pg_tol: 1e-5,
        f_rel_tol: 1e-9,
        ..Default::default()
    };
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut best_init: Option<(Vec<f64>, f64)> = None;
    let mut improved = false;
    for s in starts {
        let mut s = s;
        for i in 0..s.len() {
            s[i] = s[i].clamp(lo[i], hi[i]);
        }
        let init_lml = log_marginal_likelihood(inputs, values, &s).0;
        if init_lml.is_finite() && best_init.as_ref().is_none_or(|(_, b)| init_lml > *b) {
            best_init = Some((s.clone(), init_lml));
        }
        let res = lbfgs_box(
            |p| {
                let (f, g) = log_marginal_likelihood(inputs, values, p);
                (-f, g.into_iter().map(|v| -v).collect())
            },
            &s,
            &lo,
            &hi,
            &opts,
        );
        let lml = -res.f;
        if res.improvements > 0 {
            improved = true;
        }
        if lml.is_finite() && best.as_ref().is_none_or(|(_, b)| lml > *b) {
            best = Some((res.x, lml));
        }
    }
    let (p, lml) = match best.or(best_init) {
        Some(b) => b,
        None => {
            return Err(Error::SingularSystem {
                jitter: JITTER_MAX,
                condition: f64::INFINITY,
            })
        }
    };
    Ok(FitResult {
        kernel: KernelParams {
            variance: p[d].exp(),
            lengthscales: p[..d].iter().map(|v| v.exp()).collect(),
        },
        noise_var: p[d + 1].exp(),
        lml,
        degraded: !improved,
    })
}
