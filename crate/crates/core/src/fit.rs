//! Extrapolation models and the bounded Levenberg–Marquardt solver.
//!
//! Bounds are handled by smooth reparameterisation: the solver works on
//! unconstrained internal coordinates `u` and every model sees the mapped
//! parameters `θ = T(u)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::stream_rng;

pub const GTOL: f64 = 1e-10;
pub const XTOL: f64 = 1e-12;
pub const MAX_ITER: usize = 500;

/// One measured point at amplification factor `k = 2r + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub k: f64,
    pub y: f64,
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSeries {
    pub points: Vec<DataPoint>,
}

impl DataSeries {
    pub fn new(points: Vec<DataPoint>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !p.k.is_finite() || !p.y.is_finite() {
                return Err(Error::InvalidArgument(format!("non-finite data point {i}")));
            }
            if let Some(s) = p.sigma {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::InvalidArgument(format!("sigma of point {i} must be positive")));
                }
            }
            if points[..i].iter().any(|q| q.k == p.k) {
                return Err(Error::InvalidArgument(format!("duplicate amplification factor {}", p.k)));
            }
        }
        Ok(DataSeries { points })
    }

    pub fn from_pairs(ks: &[f64], ys: &[f64]) -> Result<Self> {
        if ks.len() != ys.len() {
            return Err(Error::DimensionMismatch {
                expected: ks.len(),
                got: ys.len(),
            });
        }
        Self::new(
            ks.iter()
                .zip(ys)
                .map(|(&k, &y)| DataPoint { k, y, sigma: None })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn ks(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.k).collect()
    }

    pub fn ys(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.y).collect()
    }

    /// Copy with every `y` multiplied by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        DataSeries {
            points: self
                .points
                .iter()
                .map(|p| DataPoint {
                    y: p.y * s,
                    sigma: p.sigma.map(|x| x * s.abs()),
                    ..*p
                })
                .collect(),
        }
    }
}

/// Parameter constraint realised through a smooth transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Bound {
    Free,
    /// `θ = softplus(u) ≥ 0`.
    NonNegative,
    /// `θ = −softplus(u) ≤ 0`.
    NonPositive,
    /// `θ = lo + (hi − lo)·logistic(u)`.
    Interval(f64, f64),
    /// Held at the given value.
    Fixed(f64),
}

const INIT_MARGIN: f64 = 1e-9;

fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u
    } else {
        u.exp().ln_1p()
    }
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

impl Bound {
    pub fn is_fixed(&self) -> bool {
        matches!(self, Bound::Fixed(_))
    }

    fn forward(&self, u: f64) -> f64 {
        match *self {
            Bound::Free => u,
            Bound::NonNegative => softplus(u),
            Bound::NonPositive => -softplus(u),
            Bound::Interval(lo, hi) => lo + (hi - lo) * logistic(u),
            Bound::Fixed(v) => v,
        }
    }

    /// `dθ/du`.
    fn derivative(&self, u: f64) -> f64 {
        match *self {
            Bound::Free => 1.0,
            Bound::NonNegative => logistic(u),
            Bound::NonPositive => -logistic(u),
            Bound::Interval(lo, hi) => {
                let s = logistic(u);
                (hi - lo) * s * (1.0 - s)
            }
            Bound::Fixed(_) => 0.0,
        }
    }

    /// Inverse transform; values on or past a bound are pulled inside.
    fn inverse(&self, theta: f64) -> f64 {
        let inv_softplus = |x: f64| {
            let x = x.max(INIT_MARGIN);
            if x > 30.0 {
                x
            } else {
                x.exp_m1().ln()
            }
        };
        match *self {
            Bound::Free => theta,
            Bound::NonNegative => inv_softplus(theta),
            Bound::NonPositive => inv_softplus(-theta),
            Bound::Interval(lo, hi) => {
                let s = ((theta - lo) / (hi - lo)).clamp(INIT_MARGIN, 1.0 - INIT_MARGIN);
                (s / (1.0 - s)).ln()
            }
            Bound::Fixed(v) => v,
        }
    }

    pub fn contains(&self, theta: f64) -> bool {
        match *self {
            Bound::Free => theta.is_finite(),
            Bound::NonNegative => theta >= 0.0,
            Bound::NonPositive => theta <= 0.0,
            Bound::Interval(lo, hi) => (lo..=hi).contains(&theta),
            Bound::Fixed(v) => theta == v,
        }
    }

    /// Whether `theta` sits numerically on the bound.
    fn active(&self, theta: f64) -> bool {
        const EDGE: f64 = 1e-8;
        match *self {
            Bound::Free => false,
            Bound::NonNegative => theta < EDGE,
            Bound::NonPositive => theta > -EDGE,
            Bound::Interval(lo, hi) => theta - lo < EDGE * (hi - lo) || hi - theta < EDGE * (hi - lo),
            Bound::Fixed(_) => true,
        }
    }
}

pub enum JacobianMode<'a> {
    /// Closure returning `∂r_i/∂θ_j` (rows: residuals).
    Analytic(&'a (dyn Fn(&[f64]) -> DMatrix<f64> + Sync)),
    /// Central differences with relative step `h`.
    FiniteDifference(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmOptions {
    pub max_iter: usize,
    pub gtol: f64,
    pub xtol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iter: MAX_ITER,
            gtol: GTOL,
            xtol: XTOL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    Gradient,
    Step,
    MaxIterations,
    NonFinite,
    Singular,
    /// Damping grew without bound before any tolerance was met.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmResult {
    /// Constrained parameters.
    pub params: Vec<f64>,
    /// `‖r‖₂` at the solution.
    pub residual_norm: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// `∂r/∂θ` at the solution.
    pub jacobian: DMatrix<f64>,
}

impl LmResult {
    pub fn converged(&self) -> bool {
        matches!(self.termination, Termination::Gradient | Termination::Step)
    }
}

fn fd_jacobian(f: &dyn Fn(&[f64]) -> DVector<f64>, theta: &[f64], bounds: &[Bound], h: f64, m: usize) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(m, theta.len());
    let mut x = theta.to_vec();
    for j in 0..theta.len() {
        if bounds[j].is_fixed() {
            continue;
        }
        let step = h * theta[j].abs().max(1.0);
        x[j] = theta[j] + step;
        let up = f(&x);
        x[j] = theta[j] - step;
        let down = f(&x);
        x[j] = theta[j];
        jac.set_column(j, &((up - down) / (2.0 * step)));
    }
    jac
}

/// Minimise `½‖r(θ)‖²` subject to `bounds` with a damped Gauss–Newton
/// iteration (Nielsen's damping update).
pub fn levenberg_marquardt(
    residual: &(dyn Fn(&[f64]) -> DVector<f64> + Sync),
    jacobian: JacobianMode<'_>,
    bounds: &[Bound],
    init: &[f64],
    opts: &LmOptions,
) -> Result<LmResult> {
    let p = init.len();
    if bounds.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: bounds.len(),
        });
    }
    if let Some(j) = (0..p).find(|&j| !bounds[j].is_fixed() && !bounds[j].contains(init[j])) {
        return Err(Error::InvalidArgument(format!(
            "initial value {} of parameter {j} violates its bound",
            init[j]
        )));
    }
    let free: Vec<usize> = (0..p).filter(|&j| !bounds[j].is_fixed()).collect();
    let to_theta = |u: &[f64]| -> Vec<f64> { (0..p).map(|j| bounds[j].forward(u[j])).collect() };
    let mut u: Vec<f64> = (0..p).map(|j| bounds[j].inverse(init[j])).collect();
    let mut theta = to_theta(&u);
    let mut r = residual(&theta);
    let m = r.len();
    let jac_theta = |theta: &[f64]| match &jacobian {
        JacobianMode::Analytic(j) => j(theta),
        JacobianMode::FiniteDifference(h) => fd_jacobian(residual, theta, bounds, *h, m),
    };
    let finish = |theta: Vec<f64>, r: &DVector<f64>, it, term| {
        let jacobian = jac_theta(&theta);
        LmResult {
            residual_norm: r.norm(),
            params: theta,
            iterations: it,
            termination: term,
            jacobian,
        }
    };
    if !r.iter().all(|x| x.is_finite()) {
        return Ok(finish(theta, &r, 0, Termination::NonFinite));
    }
    if free.is_empty() {
        return Ok(finish(theta, &r, 0, Termination::Gradient));
    }
    let mut cost = 0.5 * r.norm_squared();
    let mut lambda = -1.0;
    let mut nu = 2.0;
    for it in 0..opts.max_iter {
        let jt = jac_theta(&theta);
        let ju = DMatrix::from_fn(m, free.len(), |i, c| {
            let j = free[c];
            jt[(i, j)] * bounds[j].derivative(u[j])
        });
        let g = ju.transpose() * &r;
        if g.amax() < opts.gtol {
            return Ok(finish(theta, &r, it, Termination::Gradient));
        }
        let a = ju.transpose() * &ju;
        let diag: Vec<f64> = (0..free.len()).map(|c| a[(c, c)].max(1e-12)).collect();
        if lambda < 0.0 {
            lambda = 1e-3 * diag.iter().cloned().fold(0.0, f64::max);
        }
        loop {
            let mut damped = a.clone();
            for c in 0..free.len() {
                damped[(c, c)] += lambda * diag[c];
            }
            let Some(chol) = damped.cholesky() else {
                lambda *= nu;
                nu *= 2.0;
                if lambda > 1e30 {
                    return Ok(finish(theta, &r, it, Termination::Singular));
                }
                continue;
            };
            let delta = chol.solve(&(-&g));
            let mut u_new = u.clone();
            for (c, &j) in free.iter().enumerate() {
                u_new[j] += delta[c];
            }
            let theta_new = to_theta(&u_new);
            let r_new = residual(&theta_new);
            let cost_new = 0.5 * r_new.norm_squared();
            let predicted = 0.5 * (delta.dot(&(delta.component_mul(&DVector::from_vec(diag.clone())) * lambda)) - delta.dot(&g));
            let rho = (cost - cost_new) / predicted;
            if cost_new.is_finite() && rho > 0.0 {
                u = u_new;
                theta = theta_new;
                r = r_new;
                cost = cost_new;
                lambda *= (1.0f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3));
                nu = 2.0;
                let unorm: f64 = free.iter().map(|&j| u[j] * u[j]).sum::<f64>().sqrt();
                if delta.norm() < opts.xtol * (1.0 + unorm) {
                    return Ok(finish(theta, &r, it + 1, Termination::Step));
                }
                break;
            }
            lambda *= nu;
            nu *= 2.0;
            if lambda > 1e30 {
                return Ok(finish(theta, &r, it, Termination::Stalled));
            }
        }
    }
    Ok(finish(theta, &r, opts.max_iter, Termination::MaxIterations))
}

/// Fit-model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    /// `a·b^k + c`
    Exponential,
    /// `Σ a_i b_i^k + c`
    MultiExponential(usize),
    /// `y = y₀ + s·ε`
    LinearInEpsilon,
    /// `a₀ e^{c₂k² + c₁k} + (a₁ + b k) e^{c₁k}`
    HybridGe,
    /// `(a + b k) e^{c₂k² + c₁k} + c`
    HybridGrover,
}

impl ModelFamily {
    pub fn name(&self) -> String {
        match self {
            ModelFamily::Exponential => "exponential".into(),
            ModelFamily::MultiExponential(k) => format!("multi_exponential({k})"),
            ModelFamily::LinearInEpsilon => "linear_in_epsilon".into(),
            ModelFamily::HybridGe => "hybrid_ge".into(),
            ModelFamily::HybridGrover => "hybrid_ge_grover".into(),
        }
    }

    /// Inverse of [`ModelFamily::name`]; `multi_exponential` alone means two terms.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        Ok(match s {
            "exponential" | "exp" => ModelFamily::Exponential,
            "multi_exponential" | "multi_exp" => ModelFamily::MultiExponential(2),
            "linear_in_epsilon" | "iczne" => ModelFamily::LinearInEpsilon,
            "hybrid_ge" | "hybrid" => ModelFamily::HybridGe,
            "hybrid_ge_grover" | "hybrid_grover" => ModelFamily::HybridGrover,
            _ => {
                let k = s
                    .strip_prefix("multi_exponential(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|k| k.parse::<usize>().ok())
                    .filter(|&k| k >= 1)
                    .ok_or_else(|| Error::Config(format!("unknown model {s:?}")))?;
                ModelFamily::MultiExponential(k)
            }
        })
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            ModelFamily::Exponential => vec!["a".into(), "b".into(), "c".into()],
            ModelFamily::MultiExponential(k) => {
                let mut v = Vec::new();
                for i in 1..=*k {
                    v.push(format!("a{i}"));
                    v.push(format!("b{i}"));
                }
                v.push("c".into());
                v
            }
            ModelFamily::LinearInEpsilon => vec!["intercept".into(), "slope".into()],
            ModelFamily::HybridGe => ["a0", "a1", "b", "c1", "c2"].map(String::from).to_vec(),
            ModelFamily::HybridGrover => ["a", "b", "c", "c1", "c2"].map(String::from).to_vec(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_names().len()
    }

    pub fn eval(&self, th: &[f64], k: f64) -> f64 {
        match self {
            ModelFamily::Exponential => th[0] * th[1].powf(k) + th[2],
            ModelFamily::MultiExponential(n) => {
                (0..*n).map(|i| th[2 * i] * th[2 * i + 1].powf(k)).sum::<f64>() + th[2 * n]
            }
            ModelFamily::LinearInEpsilon => th[0] + th[1] * k,
            ModelFamily::HybridGe => {
                let e1 = (th[3] * k).exp();
                th[0] * (th[4] * k * k).exp() * e1 + (th[1] + th[2] * k) * e1
            }
            ModelFamily::HybridGrover => (th[0] + th[1] * k) * (th[4] * k * k + th[3] * k).exp() + th[2],
        }
    }

    /// `∂model/∂θ` at `k`.
    pub fn gradient(&self, th: &[f64], k: f64, out: &mut [f64]) {
        match self {
            ModelFamily::Exponential => {
                let bk = th[1].powf(k);
                out[0] = bk;
                out[1] = if th[1] > 0.0 { th[0] * k * bk / th[1] } else { 0.0 };
                out[2] = 1.0;
            }
            ModelFamily::MultiExponential(n) => {
                for i in 0..*n {
                    let (a, b) = (th[2 * i], th[2 * i + 1]);
                    let bk = b.powf(k);
                    out[2 * i] = bk;
                    out[2 * i + 1] = if b > 0.0 { a * k * bk / b } else { 0.0 };
                }
                out[2 * n] = 1.0;
            }
            ModelFamily::LinearInEpsilon => {
                out[0] = 1.0;
                out[1] = k;
            }
            ModelFamily::HybridGe => {
                let e1 = (th[3] * k).exp();
                let g = (th[4] * k * k).exp() * e1;
                let lin = (th[1] + th[2] * k) * e1;
                out[0] = g;
                out[1] = e1;
                out[2] = k * e1;
                out[3] = k * (th[0] * g + lin);
                out[4] = k * k * th[0] * g;
            }
            ModelFamily::HybridGrover => {
                let e = (th[4] * k * k + th[3] * k).exp();
                let lin = th[0] + th[1] * k;
                out[0] = e;
                out[1] = k * e;
                out[2] = 1.0;
                out[3] = k * lin * e;
                out[4] = k * k * lin * e;
            }
        }
    }

    /// Factors `f_j` with `θ_j(k) = f_j θ_j(k/s)` when the abscissa is scaled
    /// by `s`; `None` when the family is not linear in that sense.
    pub fn abscissa_factors(&self, s: f64) -> Option<Vec<f64>> {
        match self {
            ModelFamily::HybridGe => Some(vec![1.0, 1.0, 1.0 / s, 1.0 / s, 1.0 / (s * s)]),
            ModelFamily::HybridGrover => Some(vec![1.0, 1.0 / s, 1.0, 1.0 / s, 1.0 / (s * s)]),
            ModelFamily::LinearInEpsilon => Some(vec![1.0, 1.0 / s]),
            _ => None,
        }
    }

    /// Zero-noise value: the model at `k = 0` (or `ε = 0`).
    pub fn extrapolate(&self, th: &[f64]) -> f64 {
        self.eval(th, 0.0)
    }

    pub fn default_spec(&self) -> ModelSpec {
        let unit = (-1.0, 1.0);
        let (bounds, init) = match self {
            ModelFamily::Exponential => (
                vec![Bound::Free, Bound::Interval(0.0, 1.0), Bound::Free],
                vec![unit, (0.0, 1.0), unit],
            ),
            ModelFamily::MultiExponential(n) => {
                let mut b = Vec::new();
                let mut i = Vec::new();
                for _ in 0..*n {
                    b.extend([Bound::Free, Bound::Interval(0.0, 1.0)]);
                    i.extend([unit, (0.0, 1.0)]);
                }
                b.push(Bound::Free);
                i.push(unit);
                (b, i)
            }
            ModelFamily::LinearInEpsilon => (vec![Bound::Free; 2], vec![unit; 2]),
            ModelFamily::HybridGe | ModelFamily::HybridGrover => (
                vec![Bound::Free, Bound::Free, Bound::Free, Bound::NonPositive, Bound::NonNegative],
                vec![unit, unit, unit, (-1.0, 0.0), (0.0, 1.0)],
            ),
        };
        ModelSpec {
            family: *self,
            bounds,
            init,
        }
    }
}

/// Family plus per-parameter bounds and initialisation ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: ModelFamily,
    pub bounds: Vec<Bound>,
    pub init: Vec<(f64, f64)>,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let p = self.family.param_count();
        if self.bounds.len() != p || self.init.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                got: self.bounds.len().min(self.init.len()),
            });
        }
        for (b, (lo, hi)) in self.bounds.iter().zip(&self.init) {
            if lo > hi {
                return Err(Error::InvalidArgument(format!("init range [{lo}, {hi}] is empty")));
            }
            if let Bound::Interval(l, h) = b {
                if l >= h {
                    return Err(Error::InvalidArgument(format!("bound [{l}, {h}] is empty")));
                }
            }
        }
        Ok(())
    }

    /// Freeze parameter `j` at `value`.
    pub fn fix(mut self, j: usize, value: f64) -> Self {
        self.bounds[j] = Bound::Fixed(value);
        self
    }

    /// Random initial point, uniform in each init range and kept on the
    /// feasible side of each bound.
    pub fn sample_init<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.bounds
            .iter()
            .zip(&self.init)
            .map(|(b, &(lo, hi))| match *b {
                Bound::Fixed(v) => v,
                _ => {
                    let (lo, hi) = match *b {
                        Bound::NonNegative => (lo.max(0.0), hi.max(0.0)),
                        Bound::NonPositive => (lo.min(0.0), hi.min(0.0)),
                        Bound::Interval(l, h) => (lo.max(l), hi.min(h)),
                        _ => (lo, hi),
                    };
                    if hi > lo {
                        rng.random_range(lo..=hi)
                    } else {
                        lo
                    }
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: String,
    pub param_names: Vec<String>,
    pub params: Vec<f64>,
    pub bounds_active: Vec<bool>,
    pub residual: f64,
    pub converged: bool,
    pub extrapolated: f64,
    /// `σ² (JᵀJ)⁺` over the parameters, when estimable.
    pub covariance: Option<Vec<Vec<f64>>>,
    pub iterations: usize,
    pub n_starts: usize,
    pub cv: Option<f64>,
    pub notes: Vec<String>,
}

impl FitResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn weights(data: &DataSeries) -> Vec<f64> {
    data.points.iter().map(|p| p.sigma.map_or(1.0, |s| 1.0 / s)).collect()
}

fn covariance(jac: &DMatrix<f64>, residual: f64, m: usize, bounds: &[Bound]) -> Option<Vec<Vec<f64>>> {
    let p = jac.ncols();
    let free = bounds.iter().filter(|b| !b.is_fixed()).count();
    if m <= free {
        return None;
    }
    let s2 = residual * residual / (m - free) as f64;
    let jtj = jac.transpose() * jac;
    let inv = jtj.pseudo_inverse(1e-12).ok()?;
    Some((0..p).map(|i| (0..p).map(|j| s2 * inv[(i, j)]).collect()).collect())
}

/// Single LM fit of `spec` from `init`.
pub fn fit_from(data: &DataSeries, spec: &ModelSpec, init: &[f64]) -> Result<FitResult> {
    spec.validate()?;
    let family = spec.family;
    let free = spec.bounds.iter().filter(|b| !b.is_fixed()).count();
    if data.len() < free {
        return Err(Error::InvalidArgument(format!(
            "{} needs at least {free} points, got {}",
            family.name(),
            data.len()
        )));
    }
    let ks = data.ks();
    let ys = data.ys();
    let w = weights(data);
    let p = family.param_count();
    let resid = |th: &[f64]| DVector::from_fn(ks.len(), |i, _| w[i] * (family.eval(th, ks[i]) - ys[i]));
    let jac = |th: &[f64]| {
        let mut g = vec![0.0; p];
        let mut out = DMatrix::zeros(ks.len(), p);
        for i in 0..ks.len() {
            family.gradient(th, ks[i], &mut g);
            for j in 0..p {
                out[(i, j)] = w[i] * g[j];
            }
        }
        out
    };
    let lm = levenberg_marquardt(&resid, JacobianMode::Analytic(&jac), &spec.bounds, init, &LmOptions::default())?;
    let converged = lm.converged() && lm.params.iter().all(|x| x.is_finite());
    Ok(FitResult {
        model: family.name(),
        param_names: family.param_names(),
        extrapolated: family.extrapolate(&lm.params),
        bounds_active: spec.bounds.iter().zip(&lm.params).map(|(b, &t)| b.active(t)).collect(),
        covariance: covariance(&lm.jacobian, lm.residual_norm, ks.len(), &spec.bounds),
        residual: lm.residual_norm,
        converged,
        iterations: lm.iterations,
        n_starts: 1,
        cv: None,
        notes: Vec::new(),
        params: lm.params,
    })
}

/// Pick the converged fit with the smallest residual (earliest start on ties),
/// or the smallest-residual fit when none converged.
fn best_of(fits: Vec<FitResult>) -> Option<FitResult> {
    let n = fits.len();
    let key = |f: &FitResult| if f.residual.is_finite() { f.residual } else { f64::INFINITY };
    let mut best: Option<FitResult> = None;
    for f in fits {
        let better = match &best {
            None => true,
            Some(b) => (f.converged && !b.converged) || (f.converged == b.converged && key(&f) < key(b)),
        };
        if better {
            best = Some(f);
        }
    }
    best.map(|mut b| {
        b.n_starts = n;
        if !b.converged {
            b.notes.push(format!("no start out of {n} converged"));
        }
        b
    })
}

/// LM fit on the abscissa `k / max|k|`, with `init` in those coordinates and
/// the result mapped back to `k`. Families without a linear rescaling are
/// fitted directly.
pub fn fit_normalized(data: &DataSeries, spec: &ModelSpec, init: &[f64]) -> Result<FitResult> {
    let s = data.points.iter().fold(0.0f64, |m, p| m.max(p.k.abs()));
    let Some(f) = spec.family.abscissa_factors(s).filter(|_| s > 0.0) else {
        return fit_from(data, spec, init);
    };
    let scaled = DataSeries {
        points: data.points.iter().map(|p| DataPoint { k: p.k / s, ..*p }).collect(),
    };
    let mut nspec = spec.clone();
    for (b, fj) in nspec.bounds.iter_mut().zip(&f) {
        if let Bound::Fixed(v) = b {
            *b = Bound::Fixed(*v / fj);
        }
    }
    let mut fit = fit_from(&scaled, &nspec, init)?;
    for (x, fj) in fit.params.iter_mut().zip(&f) {
        *x *= fj;
    }
    if let Some(c) = fit.covariance.as_mut() {
        for (i, row) in c.iter_mut().enumerate() {
            for (j, x) in row.iter_mut().enumerate() {
                *x *= f[i] * f[j];
            }
        }
    }
    Ok(fit)
}

/// Fits from `starts` random initial points; start `s` uses RNG stream `s`.
/// Initial points are drawn in the normalised coordinates of [`fit_normalized`].
pub fn fit_all_starts(data: &DataSeries, spec: &ModelSpec, starts: usize, seed: u64) -> Result<Vec<FitResult>> {
    if starts == 0 {
        return Err(Error::InvalidArgument("need at least one start".into()));
    }
    spec.validate()?;
    (0..starts)
        .into_par_iter()
        .map(|s| {
            let mut rng = stream_rng(seed, s as u64);
            let init = spec.sample_init(&mut rng);
            fit_normalized(data, spec, &init)
        })
        .collect()
}

pub fn fit_multistart(data: &DataSeries, spec: &ModelSpec, starts: usize, seed: u64) -> Result<FitResult> {
    Ok(best_of(fit_all_starts(data, spec, starts, seed)?).expect("at least one start"))
}

/// Deterministic starts for exponential-type models: a grid of decay rates with
/// the linear coefficients solved by least squares.
fn exponential_starts(data: &DataSeries, modes: usize) -> Vec<Vec<f64>> {
    const DECAYS: [f64; 8] = [0.2, 0.5, 0.7, 0.8, 0.9, 0.95, 0.98, 0.995];
    let ks = data.ks();
    let ys = DVector::from_vec(data.ys());
    let mut out = Vec::new();
    let combos: Vec<Vec<f64>> = match modes {
        1 => DECAYS.iter().map(|&b| vec![b]).collect(),
        _ => {
            let mut v = Vec::new();
            for (i, &b1) in DECAYS.iter().enumerate() {
                for &b2 in &DECAYS[..i] {
                    let mut c = vec![b1, b2];
                    c.extend(DECAYS.iter().take(modes.saturating_sub(2)).copied());
                    v.push(c);
                }
            }
            v
        }
    };
    for bs in combos {
        let x = DMatrix::from_fn(ks.len(), modes + 1, |i, j| if j < modes { bs[j].powf(ks[i]) } else { 1.0 });
        let Ok(pinv) = x.clone().pseudo_inverse(1e-12) else { continue };
        let coef = pinv * &ys;
        let mut init = Vec::new();
        for j in 0..modes {
            init.push(coef[j]);
            init.push(bs[j]);
        }
        init.push(coef[modes]);
        out.push(init);
    }
    out
}

/// `a·b^k + c` with `0 < b ≤ 1`.
pub fn fit_exponential(data: &DataSeries) -> Result<FitResult> {
    if data.len() < 3 {
        return Err(Error::InvalidArgument("exponential fit needs at least 3 points".into()));
    }
    let spec = ModelFamily::Exponential.default_spec();
    let starts = exponential_starts(data, 1);
    let fits = starts.iter().map(|s| fit_from(data, &spec, s)).collect::<Result<Vec<_>>>()?;
    Ok(best_of(fits).expect("non-empty start grid"))
}

/// `Σ_{i≤K} a_i b_i^k + c`. Near-degenerate fits (coinciding decay rates or a
/// vanishing mode) fall back to `K − 1` modes.
pub fn fit_multi_exponential(data: &DataSeries, modes: usize) -> Result<FitResult> {
    if modes == 0 {
        return Err(Error::InvalidArgument("need at least one exponential mode".into()));
    }
    if modes == 1 {
        return fit_exponential(data);
    }
    if data.len() < 2 * modes + 1 {
        return Err(Error::InvalidArgument(format!(
            "{modes}-mode fit needs at least {} points, got {}",
            2 * modes + 1,
            data.len()
        )));
    }
    let family = ModelFamily::MultiExponential(modes);
    let spec = family.default_spec();
    let fits = exponential_starts(data, modes)
        .iter()
        .map(|s| fit_from(data, &spec, s))
        .collect::<Result<Vec<_>>>()?;
    let best = best_of(fits).expect("non-empty start grid");
    let scale = data.ys().iter().fold(0.0f64, |m, y| m.max(y.abs())).max(1e-300);
    let rates: Vec<f64> = (0..modes).map(|i| best.params[2 * i + 1]).collect();
    let amps: Vec<f64> = (0..modes).map(|i| best.params[2 * i]).collect();
    let close_rates = (0..modes).any(|i| (0..i).any(|j| (rates[i] - rates[j]).abs() < 1e-3));
    let tiny_mode = amps.iter().any(|a| a.abs() < 1e-6 * scale);
    if close_rates || tiny_mode || !best.converged {
        let mut lower = fit_multi_exponential(data, modes - 1)?;
        lower.notes.push(format!(
            "ill-conditioned {modes}-mode fit, fell back to {} mode(s)",
            modes - 1
        ));
        return Ok(lower);
    }
    Ok(best)
}

/// Upper branch `(1 − √(P₀ − (1 − P₀)/2ⁿ)) / (1 + 1/2ⁿ)` for `P₀ > 1/2ⁿ`,
/// else `(1 − P₀)/(1 + P₀)`.
pub fn iczne_epsilon(p0: f64, n: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&p0) {
        return Err(Error::InvalidProbability {
            what: "survival probability",
            value: p0,
        });
    }
    let d = 1.0 / (1u64 << n) as f64;
    if p0 > d {
        let arg = p0 - (1.0 - p0) * d;
        if arg < 0.0 {
            return Err(Error::InvalidArgument(format!("negative square-root argument {arg}")));
        }
        Ok(((1.0 - arg.sqrt()) / (1.0 + d)).clamp(0.0, 1.0))
    } else {
        Ok((1.0 - p0) / (1.0 + p0))
    }
}

/// Ordinary least-squares line through `(ε, y)`; the intercept is the
/// zero-noise estimate.
pub fn iczne_extrapolate(pairs: &[(f64, f64)]) -> Result<FitResult> {
    let n = pairs.len() as f64;
    if pairs.len() < 2 {
        return Err(Error::Singular("linear fit needs two distinct noise levels".into()));
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pairs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx <= 1e-300 || pairs.iter().all(|p| p.0 == pairs[0].0) {
        return Err(Error::Singular("all noise levels are equal".into()));
    }
    let sxy: f64 = pairs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = pairs
        .iter()
        .map(|p| (intercept + slope * p.0 - p.1).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(FitResult {
        model: ModelFamily::LinearInEpsilon.name(),
        param_names: ModelFamily::LinearInEpsilon.param_names(),
        params: vec![intercept, slope],
        bounds_active: vec![false, false],
        residual,
        converged: true,
        extrapolated: intercept,
        covariance: None,
        iterations: 0,
        n_starts: 1,
        cv: None,
        notes: Vec::new(),
    })
}

/// Attenuation factor `√((p_n − p_∞)/(p₀ − p_∞))`.
pub fn pzne_factor(p_n: f64, p0_purity: f64, p_inf: f64) -> Result<f64> {
    if p0_purity <= p_inf {
        return Err(Error::NoiseSaturated { p_n: p0_purity, p_inf });
    }
    if p_n <= p_inf {
        return Err(Error::NoiseSaturated { p_n, p_inf });
    }
    Ok(((p_n - p_inf) / (p0_purity - p_inf)).sqrt())
}

/// `y_n / √((p_n − p_∞)/(p₀ − p_∞))`.
pub fn pzne_correct(y_n: f64, p_n: f64, p0_purity: f64, p_inf: f64) -> Result<f64> {
    Ok(y_n / pzne_factor(p_n, p0_purity, p_inf)?)
}

/// Combine purity-corrected points: least squares of `y_n = y₀·s_n` through
/// the origin, `s_n` the attenuation factor.
pub fn pzne_extrapolate(points: &[(f64, f64)], p0_purity: f64, p_inf: f64) -> Result<FitResult> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("pZNE needs at least one point".into()));
    }
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut factors = Vec::with_capacity(points.len());
    for &(y, p) in points {
        let s = pzne_factor(p, p0_purity, p_inf)?;
        sxy += s * y;
        sxx += s * s;
        factors.push(s);
    }
    let y0 = sxy / sxx;
    let residual = points
        .iter()
        .zip(&factors)
        .map(|(&(y, _), s)| (y0 * s - y).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(FitResult {
        model: "pzne".into(),
        param_names: vec!["ideal".into()],
        params: vec![y0],
        bounds_active: vec![false],
        residual,
        converged: true,
        extrapolated: y0,
        covariance: None,
        iterations: 0,
        n_starts: 1,
        cv: None,
        notes: Vec::new(),
    })
}

pub const HYBRID_POINTS: usize = 5;

fn check_hybrid(data: &DataSeries) -> Result<()> {
    if data.len() < HYBRID_POINTS {
        return Err(Error::InvalidArgument(format!(
            "hybrid fit needs at least {HYBRID_POINTS} points, got {}",
            data.len()
        )));
    }
    Ok(())
}

/// `a₀ e^{c₂k² + c₁k} + (a₁ + b k) e^{c₁k}` with `c₁ ≤ 0`, `c₂ ≥ 0`, best of
/// `starts` random initialisations in `[−1, 1]`.
pub fn fit_hybrid_ge(data: &DataSeries, starts: usize, seed: u64) -> Result<FitResult> {
    check_hybrid(data)?;
    fit_multistart(data, &ModelFamily::HybridGe.default_spec(), starts, seed)
}

/// `(a + b k) e^{c₂k² + c₁k} + c`, same constraints and protocol.
pub fn fit_hybrid_grover(data: &DataSeries, starts: usize, seed: u64) -> Result<FitResult> {
    check_hybrid(data)?;
    fit_multistart(data, &ModelFamily::HybridGrover.default_spec(), starts, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub model: String,
    pub n_fits: usize,
    pub n_converged: usize,
    pub convergence_rate: f64,
    pub mean: f64,
    pub cv: f64,
    pub extrapolations: Vec<f64>,
    pub histogram: Vec<HistogramBin>,
    /// Two well-separated clusters among the converged extrapolations.
    pub bimodal: bool,
}

/// Run every start on every dataset; fits that fail to converge or land
/// outside `physical` count as non-converged.
pub fn multi_start_stability(
    datasets: &[DataSeries],
    spec: &ModelSpec,
    starts: usize,
    seed: u64,
    physical: (f64, f64),
) -> Result<StabilityReport> {
    if starts < 2 {
        return Err(Error::InvalidArgument("stability analysis needs at least 2 starts".into()));
    }
    let mut values = Vec::new();
    let mut n_fits = 0;
    for (t, data) in datasets.iter().enumerate() {
        let fits = fit_all_starts(data, spec, starts, seed.wrapping_add(t as u64))?;
        n_fits += fits.len();
        values.extend(
            fits.iter()
                .filter(|f| f.converged && (physical.0..=physical.1).contains(&f.extrapolated))
                .map(|f| f.extrapolated),
        );
    }
    let n_converged = values.len();
    let mean = values.iter().sum::<f64>() / n_converged.max(1) as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_converged.max(1) as f64;
    let cv = if n_converged > 0 { var.sqrt() / mean.abs() } else { f64::NAN };
    Ok(StabilityReport {
        model: spec.family.name(),
        n_fits,
        n_converged,
        convergence_rate: n_converged as f64 / n_fits.max(1) as f64,
        mean,
        cv,
        histogram: histogram(&values, 20),
        bimodal: is_bimodal(&values),
        extrapolations: values,
    })
}

pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|b| HistogramBin {
            lo: lo + b as f64 * width,
            hi: lo + (b + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        out[b].count += 1;
    }
    out
}

/// Best two-cluster split of sorted values; bimodal when the split leaves
/// less than a tenth of the total variance within clusters and each side
/// holds at least a tenth of the values.
pub fn is_bimodal(values: &[f64]) -> bool {
    let n = values.len();
    if n < 10 {
        return false;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let prefix: Vec<f64> = std::iter::once(0.0)
        .chain(v.iter().scan(0.0, |s, x| {
            *s += x;
            Some(*s)
        }))
        .collect();
    let prefix2: Vec<f64> = std::iter::once(0.0)
        .chain(v.iter().scan(0.0, |s, x| {
            *s += x * x;
            Some(*s)
        }))
        .collect();
    let stats = |a: usize, b: usize| {
        let k = (b - a) as f64;
        let m = (prefix[b] - prefix[a]) / k;
        let var = ((prefix2[b] - prefix2[a]) / k - m * m).max(0.0);
        (m, var)
    };
    let min_side = n.div_ceil(10);
    let mut best: Option<(f64, usize)> = None;
    for cut in min_side..=n - min_side {
        let (_, v1) = stats(0, cut);
        let (_, v2) = stats(cut, n);
        let within = cut as f64 * v1 + (n - cut) as f64 * v2;
        if best.is_none_or(|(w, _)| within < w) {
            best = Some((within, cut));
        }
    }
    let Some((within, _)) = best else { return false };
    let (_, total) = stats(0, n);
    if total == 0.0 {
        return false;
    }
    within < 0.1 * n as f64 * total
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const ODD5: [f64; 5] = [1.0, 3.0, 5.0, 7.0, 9.0];
    const ODD7: [f64; 7] = [1.0, 3.0, 5.0, 7.0, 9.0, 11.0, 13.0];

    #[test]
    fn model_names_parse_back() {
        for m in [
            ModelFamily::Exponential,
            ModelFamily::MultiExponential(3),
            ModelFamily::LinearInEpsilon,
            ModelFamily::HybridGe,
            ModelFamily::HybridGrover,
        ] {
            assert_eq!(ModelFamily::parse(&m.name()).unwrap(), m);
        }
        assert!(ModelFamily::parse("multi_exponential(0)").is_err());
        assert!(ModelFamily::parse("cubic").is_err());
    }

    fn series(family: ModelFamily, th: &[f64], ks: &[f64]) -> DataSeries {
        let ys: Vec<f64> = ks.iter().map(|&k| family.eval(th, k)).collect();
        DataSeries::from_pairs(ks, &ys).unwrap()
    }

    #[test]
    fn data_series_validation() {
        assert!(DataSeries::from_pairs(&[1.0, 1.0], &[0.1, 0.2]).is_err());
        assert!(DataSeries::from_pairs(&[1.0], &[0.1, 0.2]).is_err());
        assert!(DataSeries::new(vec![DataPoint { k: 1.0, y: 0.0, sigma: Some(0.0) }]).is_err());
    }

    #[test]
    fn lm_linear_converges_fast() {
        let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
        let ys = [1.1, 2.9, 5.2, 7.1, 8.8];
        let resid = |th: &[f64]| DVector::from_fn(5, |i, _| th[0] + th[1] * xs[i] - ys[i]);
        let r = levenberg_marquardt(&resid, JacobianMode::FiniteDifference(1e-6), &[Bound::Free; 2], &[0.0, 0.0], &LmOptions::default()).unwrap();
        assert!(r.converged());
        // OLS oracle
        let mx = 2.0;
        let my = ys.iter().sum::<f64>() / 5.0;
        let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / 10.0;
        assert_abs_diff_eq!(r.params[1], slope, epsilon = 1e-8);
        assert_abs_diff_eq!(r.params[0], my - slope * mx, epsilon = 1e-8);
        assert!(r.iterations <= 20, "{}", r.iterations);
    }

    #[test]
    fn lm_rosenbrock() {
        let resid = |th: &[f64]| DVector::from_vec(vec![10.0 * (th[1] - th[0] * th[0]), 1.0 - th[0]]);
        let jac = |th: &[f64]| DMatrix::from_row_slice(2, 2, &[-20.0 * th[0], 10.0, -1.0, 0.0]);
        let r = levenberg_marquardt(&resid, JacobianMode::Analytic(&jac), &[Bound::Free; 2], &[-1.2, 1.0], &LmOptions::default()).unwrap();
        assert!(r.converged());
        assert_abs_diff_eq!(r.params[0], 1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(r.params[1], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn lm_rejects_infeasible_init() {
        let resid = |th: &[f64]| DVector::from_vec(vec![th[0]]);
        let e = levenberg_marquardt(&resid, JacobianMode::FiniteDifference(1e-6), &[Bound::NonNegative], &[-1.0], &LmOptions::default());
        assert!(e.is_err());
    }

    #[test]
    fn analytic_gradient_matches_finite_difference() {
        for family in [ModelFamily::HybridGe, ModelFamily::HybridGrover, ModelFamily::Exponential] {
            let th: Vec<f64> = match family {
                ModelFamily::Exponential => vec![0.7, 0.9, 0.1],
                _ => vec![0.8, 0.05, -0.01, -0.05, 0.002],
            };
            let mut g = vec![0.0; th.len()];
            for &k in &ODD7 {
                family.gradient(&th, k, &mut g);
                for j in 0..th.len() {
                    let h = 1e-6 * th[j].abs().max(1e-3);
                    let mut up = th.clone();
                    let mut dn = th.clone();
                    up[j] += h;
                    dn[j] -= h;
                    let fd = (family.eval(&up, k) - family.eval(&dn, k)) / (2.0 * h);
                    assert!((fd - g[j]).abs() <= 1e-6 * g[j].abs().max(1e-8), "{family:?} k={k} j={j}");
                }
            }
        }
    }

    #[test]
    fn exponential_roundtrip() {
        let d = series(ModelFamily::Exponential, &[2.0, 0.9, 0.1], &ODD5);
        let f = fit_exponential(&d).unwrap();
        assert!(f.converged);
        for (a, b) in f.params.iter().zip([2.0, 0.9, 0.1]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-6);
        }
        assert_abs_diff_eq!(f.extrapolated, 2.1, epsilon = 1e-6);

        let flat = DataSeries::from_pairs(&ODD5, &[0.42; 5]).unwrap();
        assert_abs_diff_eq!(fit_exponential(&flat).unwrap().extrapolated, 0.42, epsilon = 1e-6);
        assert!(fit_exponential(&DataSeries::from_pairs(&[1.0, 3.0], &[0.5, 0.4]).unwrap()).is_err());
    }

    #[test]
    fn multi_exponential_roundtrip_and_fallback() {
        let th = [0.5, 0.95, 0.3, 0.7, 0.1];
        let ks: Vec<f64> = (0..9).map(|i| (2 * i + 1) as f64).collect();
        let d = series(ModelFamily::MultiExponential(2), &th, &ks);
        let f = fit_multi_exponential(&d, 2).unwrap();
        assert!(f.notes.is_empty(), "{:?}", f.notes);
        for (a, b) in f.params.iter().zip(th) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-4);
        }
        let one = series(ModelFamily::Exponential, &[1.0, 0.8, 0.2], &ODD5);
        assert_eq!(fit_multi_exponential(&one, 1).unwrap(), fit_exponential(&one).unwrap());

        let same = series(ModelFamily::MultiExponential(2), &[0.5, 0.8, 0.3, 0.8, 0.1], &ks);
        let f = fit_multi_exponential(&same, 2).unwrap();
        assert!(f.model == "exponential" && !f.notes.is_empty(), "{f:?}");
        assert_abs_diff_eq!(f.extrapolated, 0.9, epsilon = 1e-6);
    }

    #[test]
    fn iczne_epsilon_values() {
        assert_eq!(iczne_epsilon(1.0, 3).unwrap(), 0.0);
        assert_abs_diff_eq!(iczne_epsilon(0.25, 2).unwrap(), 0.6, epsilon = 1e-15);
        let upper = (1.0 - (0.25f64 - 0.75 * 0.25).sqrt()) / 1.25;
        assert_abs_diff_eq!(upper, 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(iczne_epsilon(0.81, 2).unwrap(), (1.0 - 0.7625f64.sqrt()) / 1.25, epsilon = 1e-15);
        assert_abs_diff_eq!(iczne_epsilon(0.81, 2).unwrap(), 0.10143, epsilon = 1e-5);
        assert!(iczne_epsilon(1.2, 2).is_err());
    }

    #[test]
    fn iczne_line() {
        let pairs: Vec<(f64, f64)> = [0.05, 0.1, 0.2, 0.3].iter().map(|&e| (e, 0.9 - 0.5 * e)).collect();
        assert_abs_diff_eq!(iczne_extrapolate(&pairs).unwrap().extrapolated, 0.9, epsilon = 1e-14);
        assert!(matches!(iczne_extrapolate(&[(0.1, 0.5), (0.1, 0.6)]), Err(Error::Singular(_))));
        assert!(iczne_extrapolate(&[(0.1, 0.5)]).is_err());
    }

    #[test]
    fn pzne_examples() {
        assert_eq!(pzne_correct(0.37, 0.8, 0.8, 0.25).unwrap(), 0.37);
        assert!(matches!(pzne_correct(0.1, 0.25, 1.0, 0.25), Err(Error::NoiseSaturated { .. })));
        // global depolarizing on n qubits: p_n − 1/d = f²(1 − 1/d), y = f·ideal
        let (d, ideal) = (16.0, 0.6);
        let pts: Vec<(f64, f64)> = [0.9f64, 0.7, 0.5]
            .iter()
            .map(|&f| (f * ideal, 1.0 / d + f * f * (1.0 - 1.0 / d)))
            .collect();
        for &(y, p) in &pts {
            assert_abs_diff_eq!(pzne_correct(y, p, 1.0, 1.0 / d).unwrap(), ideal, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(pzne_extrapolate(&pts, 1.0, 1.0 / d).unwrap().extrapolated, ideal, epsilon = 1e-14);
    }

    #[test]
    fn hybrid_ge_roundtrip() {
        let th = [0.8, 0.05, -0.01, -0.05, 0.002];
        let d = series(ModelFamily::HybridGe, &th, &ODD7);
        let f = fit_hybrid_ge(&d, 50, 1).unwrap();
        assert!(f.converged);
        assert_abs_diff_eq!(ModelFamily::HybridGe.eval(&th, 0.0), 0.85);
        assert!((f.extrapolated - 0.85).abs() / 0.85 < 1e-4, "{f:?}");
        for (a, b) in f.params.iter().zip(th) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-4);
        }
        assert!(f.params[3] <= 0.0 && f.params[4] >= 0.0);
        assert!(fit_hybrid_ge(&series(ModelFamily::HybridGe, &th, &ODD5[..4]), 5, 1).is_err());
    }

    #[test]
    fn hybrid_grover_roundtrip() {
        let th = [0.7, -0.02, 0.06, -0.1, 0.001];
        let d = series(ModelFamily::HybridGrover, &th, &ODD7);
        let f = fit_hybrid_grover(&d, 50, 2).unwrap();
        assert!(f.converged);
        assert!((f.extrapolated - 0.76).abs() / 0.76 < 1e-4, "{f:?}");
        assert!(f.residual < 1e-6);
        // the mapped-back parameters reproduce the data
        for p in &d.points {
            assert_abs_diff_eq!(ModelFamily::HybridGrover.eval(&f.params, p.k), p.y, epsilon = 1e-6);
        }
    }

    #[test]
    fn abscissa_factors_rescale_models() {
        let s = 13.0;
        for (fam, th) in [
            (ModelFamily::HybridGe, vec![0.8, 0.05, -0.01, -0.05, 0.002]),
            (ModelFamily::HybridGrover, vec![0.7, -0.02, 0.06, -0.1, 0.001]),
            (ModelFamily::LinearInEpsilon, vec![0.3, -0.2]),
        ] {
            let f = fam.abscissa_factors(s).unwrap();
            let scaled: Vec<f64> = th.iter().zip(&f).map(|(t, fj)| t / fj).collect();
            for k in [0.0, 1.0, 5.0, 13.0] {
                assert_abs_diff_eq!(fam.eval(&th, k), fam.eval(&scaled, k / s), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn nested_models_agree() {
        // a₀ e^{c₁k}: hybrid with c₂ = a₁ = b = 0 frozen against the exponential fit
        let d = series(ModelFamily::Exponential, &[0.9, (-0.07f64).exp(), 0.0], &ODD7);
        let exp = fit_exponential(&d).unwrap();
        let spec = ModelFamily::HybridGe.default_spec().fix(1, 0.0).fix(2, 0.0).fix(4, 0.0);
        let hyb = fit_multistart(&d, &spec, 10, 3).unwrap();
        assert!((hyb.extrapolated - exp.extrapolated).abs() < 1e-6);
        // unfrozen fit on the same data
        let free = fit_hybrid_ge(&d, 30, 3).unwrap();
        assert!((free.extrapolated - exp.extrapolated).abs() < 1e-6, "{free:?}");

        let d = series(ModelFamily::Exponential, &[0.6, (-0.1f64).exp(), 0.05], &ODD7);
        let exp = fit_exponential(&d).unwrap();
        let spec = ModelFamily::HybridGrover.default_spec().fix(1, 0.0).fix(4, 0.0);
        let hyb = fit_multistart(&d, &spec, 10, 4).unwrap();
        assert!((hyb.extrapolated - exp.extrapolated).abs() < 1e-6);
    }

    #[test]
    fn stability_on_clean_data() {
        let th = [0.7, -0.02, 0.06, -0.1, 0.001];
        let d = series(ModelFamily::HybridGrover, &th, &ODD7);
        let rep = multi_start_stability(&[d], &ModelFamily::HybridGrover.default_spec(), 20, 5, (0.0, 1.0)).unwrap();
        assert!(rep.convergence_rate > 0.5, "{rep:?}");
        assert!(rep.cv < 0.1, "{rep:?}");
        let close = rep.extrapolations.iter().filter(|v| (*v - 0.76).abs() < 1e-3).count();
        assert!(close * 2 > rep.n_converged);
        assert!(!rep.bimodal);
        assert!(multi_start_stability(&[], &ModelFamily::HybridGe.default_spec(), 1, 0, (0.0, 1.0)).is_err());
    }

    #[test]
    fn bimodal_detection() {
        let mut v: Vec<f64> = (0..50).map(|i| 0.5 + 0.001 * (i % 7) as f64).collect();
        assert!(!is_bimodal(&v));
        v.extend((0..30).map(|i| 0.8 + 0.001 * (i % 5) as f64));
        assert!(is_bimodal(&v));
        let h = histogram(&v, 10);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 80);
    }

    #[test]
    fn fit_report_json() {
        let d = series(ModelFamily::Exponential, &[1.0, 0.8, 0.0], &ODD5);
        let f = fit_exponential(&d).unwrap();
        let v: serde_json::Value = serde_json::from_str(&f.to_json().unwrap()).unwrap();
        for key in ["model", "params", "bounds_active", "residual", "converged", "extrapolated", "n_starts", "cv"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn iczne_monotone_continuous(n in 1usize..6) {
            let d = 1.0 / (1u64 << n) as f64;
            let lo = iczne_epsilon(d, n).unwrap();
            let hi = iczne_epsilon(d + 1e-15, n).unwrap();
            prop_assert!((lo - hi).abs() < 1e-12);
            let mut prev = f64::INFINITY;
            for i in 0..=1000 {
                let e = iczne_epsilon(i as f64 / 1000.0, n).unwrap();
                prop_assert!(e <= prev + 1e-15 && (0.0..=1.0).contains(&e));
                prev = e;
            }
        }

        #[test]
        fn fits_are_scale_equivariant(s in 0.2f64..5.0) {
            let d = series(ModelFamily::Exponential, &[0.8, 0.85, 0.05], &ODD5);
            let f1 = fit_exponential(&d).unwrap();
            let f2 = fit_exponential(&d.scaled(s)).unwrap();
            prop_assert!((f2.extrapolated - s * f1.extrapolated).abs() < 1e-8 * s.max(1.0));
            prop_assert!((f2.params[1] - f1.params[1]).abs() < 1e-8);

            let th = [0.8, 0.05, -0.01, -0.05, 0.002];
            let h = series(ModelFamily::HybridGe, &th, &ODD7);
            let g1 = fit_hybrid_ge(&h, 30, 9).unwrap();
            let g2 = fit_hybrid_ge(&h.scaled(s), 30, 9).unwrap();
            prop_assert!((g2.extrapolated - s * g1.extrapolated).abs() < 1e-8 * s.max(1.0));
            prop_assert!(g1.params[3] <= 0.0 && g1.params[4] >= 0.0);
            prop_assert!((g2.params[3] - g1.params[3]).abs() < 1e-6);
        }
    }
}
