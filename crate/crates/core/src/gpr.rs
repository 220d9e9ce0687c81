//! Noise-free Gaussian process regression with an ARD squared-exponential
//! kernel and maximum-likelihood hyperparameters.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::snapshot::Sobol;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub sigma_f: f64,
    pub lengthscales: Vec<f64>,
}

impl Kernel {
    pub fn new(sigma_f: f64, lengthscales: Vec<f64>) -> Result<Self> {
        if !(sigma_f > 0.0) || lengthscales.is_empty() || lengthscales.iter().any(|l| !(*l > 0.0)) {
            return Err(Error::InvalidInput(
                "kernel parameters must be positive".into(),
            ));
        }
        Ok(Kernel {
            sigma_f,
            lengthscales,
        })
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let r2: f64 = x
            .iter()
            .zip(y)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| (a - b) * (a - b) / (l * l))
            .sum();
        self.sigma_f * self.sigma_f * (-0.5 * r2).exp()
    }

    fn log_params(&self) -> Vec<f64> {
        let mut v = vec![self.sigma_f.ln()];
        v.extend(self.lengthscales.iter().map(|l| l.ln()));
        v
    }

    fn from_log(p: &[f64]) -> Self {
        Kernel {
            sigma_f: p[0].exp(),
            lengthscales: p[1..].iter().map(|v| v.exp()).collect(),
        }
    }
}

/// `σ_f² exp(−½ Σ (x_k − x'_k)² / l_k²)`.
pub fn kernel_eval(k: &Kernel, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != k.dim() || y.len() != k.dim() {
        return Err(Error::DimensionMismatch {
            expected: k.dim(),
            got: if x.len() != k.dim() { x.len() } else { y.len() },
        });
    }
    Ok(k.eval(x, y))
}

/// Per-dimension affine map of the training box onto `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNormalizer {
    pub lower: Vec<f64>,
    pub span: Vec<f64>,
}

impl InputNormalizer {
    pub fn from_data(x: &[Vec<f64>]) -> Self {
        let d = x[0].len();
        let mut lower = vec![f64::INFINITY; d];
        let mut upper = vec![f64::NEG_INFINITY; d];
        for row in x {
            for k in 0..d {
                lower[k] = lower[k].min(row[k]);
                upper[k] = upper[k].max(row[k]);
            }
        }
        let span = lower
            .iter()
            .zip(&upper)
            .map(|(lo, hi)| if hi > lo { hi - lo } else { 1.0 })
            .collect();
        InputNormalizer { lower, span }
    }

    pub fn identity(d: usize) -> Self {
        InputNormalizer {
            lower: vec![0.0; d],
            span: vec![1.0; d],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.lower)
            .zip(&self.span)
            .map(|((v, lo), s)| (v - lo) / s)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetScaling {
    /// Raw targets, zero prior mean.
    None,
    /// Divide by the standard deviation, zero prior mean.
    Scale,
    /// Subtract the mean and divide by the standard deviation.
    #[default]
    Standardize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GprOptions {
    pub starts: usize,
    pub max_iter: usize,
    /// Bounds on each lengthscale in normalized input units.
    pub lengthscale_bounds: (f64, f64),
    pub sigma_bounds: (f64, f64),
    /// Diagonal nugget relative to `σ_f²`.
    pub jitter: f64,
    pub max_jitter: f64,
    pub scaling: TargetScaling,
    pub normalize_inputs: bool,
}

impl Default for GprOptions {
    fn default() -> Self {
        GprOptions {
            starts: 8,
            max_iter: 200,
            lengthscale_bounds: (1e-2, 1e2),
            sigma_bounds: (1e-2, 1e2),
            jitter: 1e-10,
            max_jitter: 1e-6,
            scaling: TargetScaling::Standardize,
            normalize_inputs: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GprModel {
    pub kernel: Kernel,
    pub normalizer: InputNormalizer,
    /// Normalized training inputs.
    pub train_inputs: Vec<Vec<f64>>,
    /// Raw training targets.
    pub train_targets: Vec<f64>,
    pub target_offset: f64,
    pub target_scale: f64,
    /// Absolute nugget added to the kernel diagonal.
    pub jitter: f64,
    /// `(K + jitter·I)⁻¹ ỹ` for the scaled targets `ỹ`.
    pub solved_weights: Vec<f64>,
    /// Lower Cholesky factor of `K + jitter·I`, row-major.
    pub factor: Vec<f64>,
    pub log_likelihood: f64,
}

struct Factored {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
}

fn kernel_matrix(k: &Kernel, x: &[Vec<f64>]) -> DMatrix<f64> {
    let n = x.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = k.eval(&x[i], &x[j]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

fn factor_with_jitter(
    k: &Kernel,
    x: &[Vec<f64>],
    rel_jitter: f64,
    max_jitter: f64,
) -> Option<Factored> {
    let base = kernel_matrix(k, x);
    let s2 = k.sigma_f * k.sigma_f;
    let mut rel = rel_jitter;
    loop {
        let mut m = base.clone();
        for i in 0..x.len() {
            m[(i, i)] += rel * s2;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Some(Factored {
                chol,
                jitter: rel * s2,
            });
        }
        if rel >= max_jitter {
            return None;
        }
        rel = (rel * 10.0).min(max_jitter);
    }
}

/// Log marginal likelihood and its gradient with respect to
/// `(ln σ_f, ln l_1, …)`.
fn lml_and_grad(
    k: &Kernel,
    x: &[Vec<f64>],
    y: &DVector<f64>,
    opts: &GprOptions,
) -> Option<(f64, Vec<f64>)> {
    let n = x.len();
    let f = factor_with_jitter(k, x, opts.jitter, opts.max_jitter)?;
    let alpha = f.chol.solve(y);
    let log_det: f64 = f
        .chol
        .l_dirty()
        .diagonal()
        .iter()
        .take(n)
        .map(|v| v.ln())
        .sum::<f64>()
        * 2.0;
    let lml =
        -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !lml.is_finite() {
        return None;
    }
    let kinv = f.chol.inverse();
    let d = k.dim();
    let mut grad = vec![0.0; d + 1];
    for i in 0..n {
        for j in 0..n {
            let w = alpha[i] * alpha[j] - kinv[(i, j)];
            let kij = k.eval(&x[i], &x[j]);
            // jitter scales with σ_f², so it moves with the amplitude
            let kfull = if i == j { kij + f.jitter } else { kij };
            grad[0] += 0.5 * w * 2.0 * kfull;
            for (m, l) in k.lengthscales.iter().enumerate() {
                let diff = x[i][m] - x[j][m];
                grad[m + 1] += 0.5 * w * kij * diff * diff / (l * l);
            }
        }
    }
    Some((lml, grad))
}

fn check_data(x: &[Vec<f64>], y: &[f64], min_points: usize) -> Result<usize> {
    if x.len() < min_points {
        return Err(Error::InvalidInput(format!(
            "regression needs at least {min_points} points, got {}",
            x.len()
        )));
    }
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    let d = x[0].len();
    if d == 0 {
        return Err(Error::InvalidInput("inputs have no dimensions".into()));
    }
    for row in x {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite input".into()));
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite target".into()));
    }
    Ok(d)
}

fn reject_duplicates(xn: &[Vec<f64>]) -> Result<()> {
    for i in 0..xn.len() {
        for j in 0..i {
            let d2: f64 = xn[i]
                .iter()
                .zip(&xn[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d2.sqrt() < 1e-12 {
                return Err(Error::IllConditioned(format!(
                    "training inputs {j} and {i} coincide"
                )));
            }
        }
    }
    Ok(())
}

fn target_transform(y: &[f64], scaling: TargetScaling) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let centre = if scaling == TargetScaling::Standardize {
        mean
    } else {
        0.0
    };
    if scaling == TargetScaling::None {
        return (0.0, 1.0);
    }
    let var = y.iter().map(|v| (v - centre) * (v - centre)).sum::<f64>() / n;
    let sd = var.sqrt();
    let scale = if sd > 1e-300 && sd > 1e-14 * mean.abs() {
        sd
    } else {
        1.0
    };
    (centre, scale)
}

/// Deterministic starting points in log-hyperparameter space: the box centre
/// followed by Sobol points of the box.
pub fn start_points(d: usize, opts: &GprOptions) -> Result<Vec<Kernel>> {
    let (sl, sh) = (opts.sigma_bounds.0.ln(), opts.sigma_bounds.1.ln());
    let (ll, lh) = (
        opts.lengthscale_bounds.0.ln(),
        opts.lengthscale_bounds.1.ln(),
    );
    let dims = (d + 1).min(crate::snapshot::MAX_DIMENSION);
    Ok(Sobol::new(dims)?
        .take(opts.starts.max(1))
        .map(|u| {
            let mut p = vec![sl + u[0] * (sh - sl)];
            p.extend((0..d).map(|k| ll + u[(k + 1).min(dims - 1)] * (lh - ll)));
            Kernel::from_log(&p)
        })
        .collect())
}

/// Projected BFGS maximizing the log marginal likelihood inside the box.
fn optimize(
    start: &Kernel,
    x: &[Vec<f64>],
    y: &DVector<f64>,
    lo: &[f64],
    hi: &[f64],
    opts: &GprOptions,
) -> Option<(Kernel, f64)> {
    let m = lo.len();
    let eval = |p: &[f64]| {
        lml_and_grad(&Kernel::from_log(p), x, y, opts)
            .map(|(l, g)| (-l, g.iter().map(|v| -v).collect::<Vec<_>>()))
    };
    let project = |p: &mut [f64]| {
        for k in 0..m {
            p[k] = p[k].clamp(lo[k], hi[k]);
        }
    };
    let mut p = start.log_params();
    project(&mut p);
    let (mut f, mut g) = eval(&p)?;
    let mut h = DMatrix::<f64>::identity(m, m);
    let free = |p: &[f64], g: &[f64]| -> Vec<bool> {
        (0..m)
            .map(|k| {
                !((p[k] <= lo[k] + 1e-12 && g[k] > 0.0) || (p[k] >= hi[k] - 1e-12 && g[k] < 0.0))
            })
            .collect()
    };
    for _ in 0..opts.max_iter {
        let act = free(&p, &g);
        let gp: Vec<f64> = (0..m).map(|k| if act[k] { g[k] } else { 0.0 }).collect();
        if gp.iter().fold(0.0f64, |a, v| a.max(v.abs())) < 1e-7 {
            break;
        }
        let gv = DVector::from_vec(gp.clone());
        let mut dir: Vec<f64> = (-(&h * &gv)).iter().copied().collect();
        for k in 0..m {
            if !act[k] {
                dir[k] = 0.0;
            }
        }
        let slope: f64 = dir.iter().zip(&gp).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            h = DMatrix::identity(m, m);
            dir = gp.iter().map(|v| -v).collect();
        }
        // cap the step at one log-unit per coordinate
        let big = dir.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut t = if big > 2.0 { 2.0 / big } else { 1.0 };
        let mut accepted = None;
        for _ in 0..40 {
            let mut q: Vec<f64> = (0..m).map(|k| p[k] + t * dir[k]).collect();
            project(&mut q);
            let step: f64 = (0..m).map(|k| g[k] * (q[k] - p[k])).sum();
            if let Some((fq, gq)) = eval(&q) {
                if fq <= f + 1e-4 * step {
                    accepted = Some((q, fq, gq));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((q, fq, gq)) = accepted else { break };
        let s: Vec<f64> = (0..m).map(|k| q[k] - p[k]).collect();
        let yv: Vec<f64> = (0..m).map(|k| gq[k] - g[k]).collect();
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let done = (f - fq).abs() <= 1e-12 * (1.0 + f.abs());
        if sy > 1e-12 {
            let sv = DVector::from_vec(s);
            let yv = DVector::from_vec(yv);
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(m, m);
            let a = &i - &sv * yv.transpose() * rho;
            let b = &i - &yv * sv.transpose() * rho;
            h = &a * &h * &b + &sv * sv.transpose() * rho;
        }
        p = q;
        f = fq;
        g = gq;
        if done {
            break;
        }
    }
    Some((Kernel::from_log(&p), -f))
}

impl GprModel {
    /// Builds the posterior for fixed hyperparameters (no fitting).
    pub fn with_kernel(
        x: &[Vec<f64>],
        y: &[f64],
        kernel: Kernel,
        opts: &GprOptions,
    ) -> Result<Self> {
        let d = check_data(x, y, 1)?;
        if kernel.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: kernel.dim(),
            });
        }
        let normalizer = if opts.normalize_inputs && x.len() > 1 {
            InputNormalizer::from_data(x)
        } else {
            InputNormalizer::identity(d)
        };
        let xn: Vec<Vec<f64>> = x.iter().map(|r| normalizer.apply(r)).collect();
        reject_duplicates(&xn)?;
        let (offset, scale) = target_transform(y, opts.scaling);
        Self::assemble(xn, y, normalizer, offset, scale, kernel, opts)
    }

    fn assemble(
        xn: Vec<Vec<f64>>,
        y: &[f64],
        normalizer: InputNormalizer,
        offset: f64,
        scale: f64,
        kernel: Kernel,
        opts: &GprOptions,
    ) -> Result<Self> {
        let n = xn.len();
        let ys = DVector::from_iterator(n, y.iter().map(|v| (v - offset) / scale));
        let f =
            factor_with_jitter(&kernel, &xn, opts.jitter, opts.max_jitter).ok_or_else(|| {
                Error::IllConditioned(format!(
                    "kernel matrix not positive definite even with jitter {}",
                    opts.max_jitter
                ))
            })?;
        let alpha = f.chol.solve(&ys);
        let l = f.chol.l();
        let log_det: f64 = l.diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
        let lml = -0.5 * ys.dot(&alpha)
            - 0.5 * log_det
            - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        let factor = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| l[(i, j)])
            .collect();
        Ok(GprModel {
            kernel,
            normalizer,
            train_inputs: xn,
            train_targets: y.to_vec(),
            target_offset: offset,
            target_scale: scale,
            jitter: f.jitter,
            solved_weights: alpha.iter().copied().collect(),
            factor,
            log_likelihood: lml,
        })
    }

    /// Maximum-likelihood fit from several deterministic starts.
    pub fn fit(x: &[Vec<f64>], y: &[f64], opts: &GprOptions) -> Result<Self> {
        let d = check_data(x, y, 2)?;
        let normalizer = if opts.normalize_inputs {
            InputNormalizer::from_data(x)
        } else {
            InputNormalizer::identity(d)
        };
        let xn: Vec<Vec<f64>> = x.iter().map(|r| normalizer.apply(r)).collect();
        reject_duplicates(&xn)?;
        let (offset, scale) = target_transform(y, opts.scaling);
        let ys = DVector::from_iterator(y.len(), y.iter().map(|v| (v - offset) / scale));

        let mut lo = vec![opts.sigma_bounds.0.ln()];
        let mut hi = vec![opts.sigma_bounds.1.ln()];
        lo.extend(std::iter::repeat_n(opts.lengthscale_bounds.0.ln(), d));
        hi.extend(std::iter::repeat_n(opts.lengthscale_bounds.1.ln(), d));
        if lo.iter().zip(&hi).any(|(a, b)| !(a < b)) {
            return Err(Error::InvalidInput("empty hyperparameter box".into()));
        }
        let mut best: Option<(Kernel, f64)> = None;
        let mut failures = Vec::new();
        for (s, start) in start_points(d, opts)?.iter().enumerate() {
            match optimize(start, &xn, &ys, &lo, &hi, opts) {
                Some((k, l)) if best.as_ref().is_none_or(|(_, b)| l > *b) => best = Some((k, l)),
                Some(_) => {}
                None => failures.push(s),
            }
        }
        let (kernel, _) = best.ok_or_else(|| {
            Error::FitFailed(format!(
                "likelihood could not be evaluated at any of the {} starts (n = {}, d = {d})",
                failures.len(),
                x.len()
            ))
        })?;
        Self::assemble(xn, y, normalizer, offset, scale, kernel, opts)
    }

    pub fn dim(&self) -> usize {
        self.kernel.dim()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn cross(&self, xn: &[f64]) -> Vec<f64> {
        self.train_inputs
            .iter()
            .map(|t| self.kernel.eval(t, xn))
            .collect()
    }

    pub fn predict_mean(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.mean_unchecked(x))
    }

    pub(crate) fn mean_unchecked(&self, x: &[f64]) -> f64 {
        let xn = self.normalizer.apply(x);
        let s: f64 = self
            .train_inputs
            .iter()
            .zip(&self.solved_weights)
            .map(|(t, a)| a * self.kernel.eval(t, &xn))
            .sum();
        self.target_offset + self.target_scale * s
    }

    /// `m(a) − m(b)` evaluated without cancellation between the two means,
    /// for finite-difference checks at small separations.
    pub fn mean_difference(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        self.check_dim(a)?;
        self.check_dim(b)?;
        let an = self.normalizer.apply(a);
        let bn = self.normalizer.apply(b);
        let dn: Vec<f64> = a
            .iter()
            .zip(b)
            .zip(&self.normalizer.span)
            .map(|((x, y), s)| (x - y) / s)
            .collect();
        let s2 = self.kernel.sigma_f * self.kernel.sigma_f;
        let mut sum = 0.0;
        for (t, w) in self.train_inputs.iter().zip(&self.solved_weights) {
            let mut eb = 0.0;
            let mut diff = 0.0;
            for k in 0..self.dim() {
                let l2 = self.kernel.lengthscales[k] * self.kernel.lengthscales[k];
                eb -= 0.5 * (bn[k] - t[k]) * (bn[k] - t[k]) / l2;
                diff -= 0.5 * dn[k] * (an[k] + bn[k] - 2.0 * t[k]) / l2;
            }
            sum += w * s2 * eb.exp() * diff.exp_m1();
        }
        Ok(self.target_scale * sum)
    }

    /// Posterior variance in target units, clamped at zero.
    pub fn predict_variance(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        let xn = self.normalizer.apply(x);
        let n = self.train_inputs.len();
        let mut v = self.cross(&xn);
        // forward substitution with the stored factor
        for i in 0..n {
            let mut s = v[i];
            for j in 0..i {
                s -= self.factor[i * n + j] * v[j];
            }
            v[i] = s / self.factor[i * n + i];
        }
        let prior = self.kernel.eval(&xn, &xn);
        let var = (prior - v.iter().map(|a| a * a).sum::<f64>()).max(0.0);
        Ok(var * self.target_scale * self.target_scale)
    }

    /// `∂m/∂x` in raw input units.
    pub fn predict_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.gradient_unchecked(x))
    }

    pub(crate) fn gradient_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let xn = self.normalizer.apply(x);
        let d = self.dim();
        let mut g = vec![0.0; d];
        for (t, a) in self.train_inputs.iter().zip(&self.solved_weights) {
            let kv = a * self.kernel.eval(t, &xn);
            for k in 0..d {
                g[k] += kv * (t[k] - xn[k])
                    / (self.kernel.lengthscales[k] * self.kernel.lengthscales[k]);
            }
        }
        for k in 0..d {
            g[k] *= self.target_scale / self.normalizer.span[k];
        }
        g
    }

    /// Log marginal likelihood of the scaled training targets under `kernel`.
    pub fn log_marginal_likelihood(&self, kernel: &Kernel, opts: &GprOptions) -> Option<f64> {
        let ys = DVector::from_iterator(
            self.train_targets.len(),
            self.train_targets
                .iter()
                .map(|v| (v - self.target_offset) / self.target_scale),
        );
        lml_and_grad(kernel, &self.train_inputs, &ys, opts).map(|(l, _)| l)
    }

    pub fn log_likelihood_gradient(&self, kernel: &Kernel, opts: &GprOptions) -> Option<Vec<f64>> {
        let ys = DVector::from_iterator(
            self.train_targets.len(),
            self.train_targets
                .iter()
                .map(|v| (v - self.target_offset) / self.target_scale),
        );
        lml_and_grad(kernel, &self.train_inputs, &ys, opts).map(|(_, g)| g)
    }
}
