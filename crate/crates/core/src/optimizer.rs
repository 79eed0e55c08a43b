//! Maximum likelihood fitting: finite-difference derivatives, Marquardt and
//! BFGS maximizers, and the model-fitting driver with delta-method standard
//! errors.

use std::cell::Cell;
use std::time::{Duration, Instant};

use log::{debug, info};
use nalgebra::{DMatrix, DVector};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::likelihood::{evaluate, LogLikOptions, Method, Prepared};
use crate::model::ModelSpec;
use crate::theta::{natural_names, Theta};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Marquardt,
    QuasiNewton,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Marquardt => "marquardt",
            Algorithm::QuasiNewton => "bfgs",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FdMode {
    Forward,
    Central,
}

#[derive(Debug, Clone)]
pub struct OptConfig {
    pub algorithm: Algorithm,
    pub max_iter: usize,
    /// Relative function-change tolerance.
    pub f_tol: f64,
    /// Gradient-norm tolerance.
    pub g_tol: f64,
    pub fd_mode: FdMode,
    /// Relative step; coordinate `k` moves by `fd_step · max(1, |x_k|)`.
    pub fd_step: f64,
    /// Starting parameters for [`fit_model`]; the naive fit when absent.
    pub start: Option<Theta>,
    pub compute_se: bool,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            algorithm: Algorithm::QuasiNewton,
            max_iter: 200,
            f_tol: 1e-8,
            g_tol: 1e-5,
            fd_mode: FdMode::Central,
            fd_step: 1e-5,
            start: None,
            compute_se: true,
        }
    }
}

impl OptConfig {
    pub fn with_algorithm(algorithm: Algorithm) -> Self {
        OptConfig {
            algorithm,
            ..OptConfig::default()
        }
    }

    /// Switches the difference scheme together with its conventional step.
    pub fn with_fd(mut self, mode: FdMode) -> Self {
        self.fd_mode = mode;
        self.fd_step = match mode {
            FdMode::Forward => 1e-7,
            FdMode::Central => 1e-5,
        };
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.f_tol > 0.0 && self.g_tol > 0.0 && self.fd_step > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidParameter(
                "tolerances and step must be positive and max_iter at least 1".into(),
            ));
        }
        Ok(())
    }
}

const HESS_STEP: f64 = 1e-3;
const LAMBDA_START: f64 = 1e-3;
const LAMBDA_MAX: f64 = 1e12;
const MAX_HALVINGS: usize = 50;
/// Once no step makes progress, a predicted gain g'H^-1 g below this times
/// 1 + |f| still counts as convergence.
const GCONV: f64 = 1e-10;
/// Changes in f below this times 1 + |f| are treated as no progress.
const F_NOISE: f64 = 1e-13;

#[derive(Debug, Clone, Copy)]
pub struct TraceEntry {
    pub iteration: usize,
    pub f: f64,
    pub gradient_norm: f64,
    /// Marquardt damping or accepted line-search step.
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct OptOutcome {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    pub trace: Vec<TraceEntry>,
}

fn step_size(cfg: &OptConfig, xk: f64) -> f64 {
    cfg.fd_step * xk.abs().max(1.0)
}

fn gradient_at(f: &dyn Fn(&[f64]) -> f64, x: &[f64], fx: f64, cfg: &OptConfig) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let h = step_size(cfg, x[k]);
        probe[k] = x[k] + h;
        let up = f(&probe);
        let d = match cfg.fd_mode {
            FdMode::Forward => (up - fx) / h,
            FdMode::Central => {
                probe[k] = x[k] - h;
                let down = f(&probe);
                if !down.is_finite() {
                    return Err(Error::Gradient(k));
                }
                (up - down) / (2.0 * h)
            }
        };
        probe[k] = x[k];
        if !up.is_finite() {
            return Err(Error::Gradient(k));
        }
        g.push(d);
    }
    Ok(g)
}

/// Forward or central difference gradient of `f` at `x`.
pub fn fd_gradient(f: &dyn Fn(&[f64]) -> f64, x: &[f64], cfg: &OptConfig) -> Result<Vec<f64>> {
    let fx = f(x);
    if !fx.is_finite() {
        return Err(Error::NonFiniteStart);
    }
    gradient_at(f, x, fx, cfg)
}

/// Hessian as central differences of central-difference gradients, both
/// with step `1e-3 · max(1, |x_k|)`, computed on the upper triangle only.
///
/// The step is deliberately wide: adaptive integration leaves small jumps in
/// the objective that nested narrow differences would amplify.
pub fn fd_hessian(f: &dyn Fn(&[f64]) -> f64, x: &[f64]) -> Result<DMatrix<f64>> {
    let n = x.len();
    let f0 = f(x);
    if !f0.is_finite() {
        return Err(Error::NonFiniteStart);
    }
    let steps: Vec<f64> = x.iter().map(|v| HESS_STEP * v.abs().max(1.0)).collect();
    let mut probe = x.to_vec();
    let mut eval = |moves: &[(usize, f64)], k: usize| {
        for &(i, d) in moves {
            probe[i] = x[i] + d;
        }
        let v = f(&probe);
        for &(i, _) in moves {
            probe[i] = x[i];
        }
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Gradient(k))
        }
    };
    let mut h = DMatrix::zeros(n, n);
    for k in 0..n {
        let hk = steps[k];
        let up = eval(&[(k, 2.0 * hk)], k)?;
        let down = eval(&[(k, -2.0 * hk)], k)?;
        h[(k, k)] = (up - 2.0 * f0 + down) / (4.0 * hk * hk);
        for j in (k + 1)..n {
            let hj = steps[j];
            let pp = eval(&[(k, hk), (j, hj)], j)?;
            let pm = eval(&[(k, hk), (j, -hj)], j)?;
            let mp = eval(&[(k, -hk), (j, hj)], j)?;
            let mm = eval(&[(k, -hk), (j, -hj)], j)?;
            let v = (pp - pm - mp + mm) / (4.0 * hk * hj);
            h[(k, j)] = v;
            h[(j, k)] = v;
        }
    }
    Ok(h)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn negligible_gain(decrement: f64, f: f64) -> bool {
    decrement.is_finite() && decrement <= GCONV * (1.0 + f.abs())
}

fn small_change(old: f64, new: f64, cfg: &OptConfig) -> bool {
    (new - old).abs() <= cfg.f_tol * new.abs().max(1.0)
}

/// Maximizes `f` from `start` by damped Newton steps on `-f`.
pub fn marquardt_maximize(f: &dyn Fn(&[f64]) -> f64, start: &[f64], cfg: &OptConfig) -> Result<OptOutcome> {
    cfg.validate()?;
    let neg = |x: &[f64]| -f(x);
    let mut x = start.to_vec();
    let mut fx = neg(&x);
    if !fx.is_finite() {
        return Err(Error::NonFiniteStart);
    }
    let n = x.len();
    let mut lambda = LAMBDA_START;
    let mut trace = Vec::new();
    let mut g = gradient_at(&neg, &x, fx, cfg)?;
    for iter in 1..=cfg.max_iter {
        let h = fd_hessian(&neg, &x)?;
        let gv = DVector::from_column_slice(&g);
        let accepted = loop {
            let mut a = h.clone();
            for i in 0..n {
                a[(i, i)] += lambda * h[(i, i)].abs().max(1e-10);
            }
            let trial = a.cholesky().map(|c| {
                let s = c.solve(&(-&gv));
                x.iter().zip(s.iter()).map(|(xi, si)| xi + si).collect::<Vec<f64>>()
            });
            if let Some(xn) = trial {
                let fn_ = neg(&xn);
                if fn_.is_finite() && fn_ < fx {
                    lambda = (lambda * 0.1).max(1e-12);
                    break Some((xn, fn_));
                }
            }
            lambda *= 10.0;
            if lambda > LAMBDA_MAX {
                break None;
            }
        };
        let Some((xn, fn_)) = accepted else {
            let gn = norm(&g);
            let decrement = h.cholesky().map_or(f64::INFINITY, |c| gv.dot(&c.solve(&gv)));
            if gn < cfg.g_tol || negligible_gain(decrement, fx) {
                // No decrease left to find at a stationary point.
                return Ok(OptOutcome {
                    x,
                    f: -fx,
                    iterations: iter - 1,
                    gradient_norm: gn,
                    converged: true,
                    trace,
                });
            }
            return Err(Error::Stall {
                x,
                f: -fx,
                iterations: iter - 1,
            });
        };
        let old = fx;
        x = xn;
        fx = fn_;
        g = gradient_at(&neg, &x, fx, cfg)?;
        let gn = norm(&g);
        trace.push(TraceEntry {
            iteration: iter,
            f: -fx,
            gradient_norm: gn,
            step: lambda,
        });
        debug!("marquardt {iter}: f = {:.10} |g| = {gn:.3e} lambda = {lambda:.1e}", -fx);
        if small_change(old, fx, cfg) && gn < cfg.g_tol {
            return Ok(OptOutcome {
                x,
                f: -fx,
                iterations: iter,
                gradient_norm: gn,
                converged: true,
                trace,
            });
        }
    }
    let gn = norm(&g);
    Ok(OptOutcome {
        x,
        f: -fx,
        iterations: cfg.max_iter,
        gradient_norm: gn,
        converged: false,
        trace,
    })
}

/// Maximizes `f` from `start` with damped BFGS updates of the Hessian of
/// `-f` and a backtracking line search.
pub fn quasi_newton_maximize(f: &dyn Fn(&[f64]) -> f64, start: &[f64], cfg: &OptConfig) -> Result<OptOutcome> {
    cfg.validate()?;
    let neg = |x: &[f64]| -f(x);
    let n = start.len();
    let mut x = DVector::from_column_slice(start);
    let mut fx = neg(x.as_slice());
    if !fx.is_finite() {
        return Err(Error::NonFiniteStart);
    }
    let mut g = DVector::from_vec(gradient_at(&neg, x.as_slice(), fx, cfg)?);
    let mut b = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;
    let mut trace = Vec::new();
    for iter in 1..=cfg.max_iter {
        let mut d = match b.clone().cholesky() {
            Some(c) => -c.solve(&g),
            None => -g.clone(),
        };
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            b = DMatrix::identity(n, n);
            d = -g.clone();
            slope = g.dot(&d);
        }
        let step = line_search(&neg, &x, fx, &d, slope)
            .filter(|&(_, _, fn_)| fx - fn_ > F_NOISE * (1.0 + fx.abs()));
        let Some((alpha, xn, fn_)) = step else {
            let gn = g.norm();
            // The BFGS matrix can be a poor curvature estimate here, so the
            // finite-difference Hessian gets the final say.
            let stationary = || {
                fd_hessian(&neg, x.as_slice())
                    .ok()
                    .and_then(|h| h.cholesky())
                    .is_some_and(|c| negligible_gain(g.dot(&c.solve(&g)), fx))
            };
            if gn < cfg.g_tol || negligible_gain(-slope, fx) || stationary() {
                return Ok(OptOutcome {
                    x: x.as_slice().to_vec(),
                    f: -fx,
                    iterations: iter - 1,
                    gradient_norm: gn,
                    converged: true,
                    trace,
                });
            }
            return Err(Error::Stall {
                x: x.as_slice().to_vec(),
                f: -fx,
                iterations: iter - 1,
            });
        };
        let gn_vec = DVector::from_vec(gradient_at(&neg, xn.as_slice(), fn_, cfg)?);
        let s = &xn - &x;
        let y = &gn_vec - &g;
        let sy = s.dot(&y);
        if !scaled && sy > 0.0 {
            b = DMatrix::identity(n, n) * (y.dot(&y) / sy);
            scaled = true;
        }
        // Powell's damping keeps the Hessian approximation positive definite
        // when the curvature condition fails.
        let bs = &b * &s;
        let sbs = s.dot(&bs);
        if sbs > 0.0 {
            let r = if sy >= 0.2 * sbs {
                y.clone()
            } else {
                let t = 0.8 * sbs / (sbs - sy);
                &y * t + &bs * (1.0 - t)
            };
            b += &r * r.transpose() / s.dot(&r) - &bs * bs.transpose() / sbs;
        }
        let old = fx;
        x = xn;
        fx = fn_;
        g = gn_vec;
        let gn = g.norm();
        trace.push(TraceEntry {
            iteration: iter,
            f: -fx,
            gradient_norm: gn,
            step: alpha,
        });
        debug!("bfgs {iter}: f = {:.10} |g| = {gn:.3e} alpha = {alpha:.3e}", -fx);
        if small_change(old, fx, cfg) && gn < cfg.g_tol {
            return Ok(OptOutcome {
                x: x.as_slice().to_vec(),
                f: -fx,
                iterations: iter,
                gradient_norm: gn,
                converged: true,
                trace,
            });
        }
    }
    Ok(OptOutcome {
        x: x.as_slice().to_vec(),
        f: -fx,
        iterations: cfg.max_iter,
        gradient_norm: g.norm(),
        converged: false,
        trace,
    })
}

/// Armijo backtracking with quadratic interpolation. The full step is also
/// compared with the interpolated line minimum.
fn line_search(
    f: &dyn Fn(&[f64]) -> f64,
    x: &DVector<f64>,
    fx: f64,
    d: &DVector<f64>,
    slope: f64,
) -> Option<(f64, DVector<f64>, f64)> {
    const C1: f64 = 1e-4;
    let at = |alpha: f64| {
        let xn = x + d * alpha;
        let v = f(xn.as_slice());
        (xn, v)
    };
    let interpolate = |alpha: f64, fa: f64| -slope * alpha * alpha / (2.0 * (fa - fx - slope * alpha));
    let mut alpha = 1.0;
    let (mut xn, mut fa) = at(alpha);
    for _ in 0..MAX_HALVINGS {
        if fa.is_finite() && fa <= fx + C1 * alpha * slope {
            let a2 = interpolate(alpha, fa);
            if a2.is_finite() && a2 > 0.0 && (a2 / alpha - 1.0).abs() > 0.1 && a2 < 4.0 * alpha {
                let (x2, f2) = at(a2);
                if f2.is_finite() && f2 < fa {
                    return Some((a2, x2, f2));
                }
            }
            return Some((alpha, xn, fa));
        }
        let next = if fa.is_finite() {
            interpolate(alpha, fa).clamp(0.1 * alpha, 0.5 * alpha)
        } else {
            0.5 * alpha
        };
        alpha = next;
        (xn, fa) = at(alpha);
    }
    None
}

/// Estimates and diagnostics of one model fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub theta_hat: Theta,
    /// Labels of `estimates` and `se`.
    pub names: Vec<String>,
    /// Natural-scale estimates, see [`Theta::natural`].
    pub estimates: Vec<f64>,
    /// Delta-method standard errors; present only when `hessian_ok`.
    pub se: Option<Vec<f64>>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Observed information positive definite.
    pub hessian_ok: bool,
    pub method: Method,
    pub algorithm: Algorithm,
    /// Quadrature order held fixed during the fit (AGQ only).
    pub gh_order: Option<usize>,
    pub evaluations: usize,
    pub elapsed: Duration,
    /// Why the fit did not converge, if it did not.
    pub message: Option<String>,
}

/// Fits `spec` to `d` by maximizing the likelihood selected in `llopt`.
///
/// Without an explicit start the naive fit is used, itself started from
/// pooled least squares and per-subject moment estimates. AGQ fits pick the
/// quadrature order by doubling at the start and keep it fixed, so the
/// objective stays smooth; the order is rechecked at the optimum.
pub fn fit_model(d: &Dataset, spec: &ModelSpec, llopt: &LogLikOptions, cfg: &OptConfig) -> Result<FitResult> {
    cfg.validate()?;
    let timer = Instant::now();
    let prep = Prepared::new(d, spec)?;
    let start = match &cfg.start {
        Some(t) => {
            t.validate(spec)?;
            t.clone()
        }
        None => {
            let m = moment_start(&prep, spec)?;
            if llopt.method == Method::Naive {
                m
            } else {
                let naive_cfg = OptConfig {
                    start: Some(m),
                    compute_se: false,
                    ..cfg.clone()
                };
                let naive = fit_model(d, spec, &LogLikOptions {
                    method: Method::Naive,
                    ..llopt.clone()
                }, &naive_cfg)?;
                info!("naive start: loglik {:.6}", naive.loglik);
                naive.theta_hat
            }
        }
    };
    let counter = Cell::new(0usize);
    let mut opt = llopt.clone();
    let mut gh_order = None;
    if opt.method == Method::Agq {
        let order = evaluate(&prep, spec, &start, &opt)?.max_order.max(opt.gh_order);
        opt.gh_order = order;
        opt.qtol = 0.0;
        gh_order = Some(order);
    }
    let mut x0 = start.to_unconstrained();
    let mut rounds = 0;
    let mut earlier_iterations = 0;
    let (outcome, message) = loop {
        rounds += 1;
        let objective = |x: &[f64]| objective_value(&prep, spec, &opt, x, &counter);
        let (outcome, message) = match run(&objective, &x0, cfg) {
            Ok(o) => {
                let msg = (!o.converged).then(|| format!("iteration limit {} reached", cfg.max_iter));
                (o, msg)
            }
            Err(Error::Stall { x, f, iterations }) => {
                let gn = fd_gradient(&objective, &x, cfg).map(|g| norm(&g)).unwrap_or(f64::NAN);
                let o = OptOutcome {
                    x,
                    f,
                    iterations,
                    gradient_norm: gn,
                    converged: false,
                    trace: Vec::new(),
                };
                (o, Some("optimizer stalled before meeting the tolerances".to_string()))
            }
            Err(e) => return Err(e),
        };
        // A wider quadrature might be needed at the optimum than at the start.
        if let (Some(order), true) = (gh_order, rounds == 1) {
            let th = Theta::from_unconstrained(spec, &outcome.x)?;
            let check = LogLikOptions {
                qtol: llopt.qtol,
                gh_order: order,
                ..opt.clone()
            };
            let needed = evaluate(&prep, spec, &th, &check)?.max_order;
            if needed > order && llopt.qtol > 0.0 {
                info!("quadrature order raised from {order} to {needed}; refitting");
                opt.gh_order = needed;
                gh_order = Some(needed);
                x0 = outcome.x.clone();
                earlier_iterations = outcome.iterations;
                continue;
            }
        }
        break (outcome, message);
    };
    let theta_hat = Theta::from_unconstrained(spec, &outcome.x)?;
    let x_hat = theta_hat.to_unconstrained();
    let objective = |x: &[f64]| objective_value(&prep, spec, &opt, x, &counter);
    let loglik = objective(&x_hat);
    let (se, hessian_ok) = if cfg.compute_se {
        standard_errors(&objective, spec, &x_hat)
    } else {
        (None, false)
    };
    let cov_names: Vec<String> = d.column_names().to_vec();
    Ok(FitResult {
        names: natural_names(spec, &cov_names),
        estimates: theta_hat.natural(),
        theta_hat,
        se,
        loglik,
        converged: outcome.converged,
        iterations: earlier_iterations + outcome.iterations,
        gradient_norm: outcome.gradient_norm,
        hessian_ok,
        method: llopt.method,
        algorithm: cfg.algorithm,
        gh_order,
        evaluations: counter.get(),
        elapsed: timer.elapsed(),
        message,
    })
}

fn run(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], cfg: &OptConfig) -> Result<OptOutcome> {
    match cfg.algorithm {
        Algorithm::Marquardt => marquardt_maximize(f, x0, cfg),
        Algorithm::QuasiNewton => quasi_newton_maximize(f, x0, cfg),
    }
}

fn objective_value(prep: &Prepared, spec: &ModelSpec, opt: &LogLikOptions, x: &[f64], counter: &Cell<usize>) -> f64 {
    counter.set(counter.get() + 1);
    Theta::from_unconstrained(spec, x)
        .and_then(|th| evaluate(prep, spec, &th, opt))
        .map(|e| e.total)
        .unwrap_or(f64::NAN)
}

/// Natural-scale SEs from the inverse observed information, mapped through
/// the reparameterization by the delta method.
fn standard_errors(
    f: &dyn Fn(&[f64]) -> f64,
    spec: &ModelSpec,
    x: &[f64],
) -> (Option<Vec<f64>>, bool) {
    let Ok(h) = fd_hessian(f, x) else {
        return (None, false);
    };
    let info = -h;
    let Some(chol) = info.clone().cholesky() else {
        return (None, false);
    };
    let cov = chol.inverse();
    let natural = |x: &[f64]| Theta::from_unconstrained(spec, x).map(|t| t.natural());
    let Ok(base) = natural(x) else {
        return (None, false);
    };
    let mut jac = DMatrix::zeros(base.len(), x.len());
    let mut probe = x.to_vec();
    for k in 0..x.len() {
        let step = 1e-6 * x[k].abs().max(1.0);
        probe[k] = x[k] + step;
        let up = natural(&probe);
        probe[k] = x[k] - step;
        let down = natural(&probe);
        probe[k] = x[k];
        let (Ok(up), Ok(down)) = (up, down) else {
            return (None, false);
        };
        for i in 0..base.len() {
            jac[(i, k)] = (up[i] - down[i]) / (2.0 * step);
        }
    }
    let ncov = &jac * cov * jac.transpose();
    let se = (0..base.len()).map(|i| ncov[(i, i)].max(0.0).sqrt()).collect();
    (Some(se), true)
}

/// Pooled least squares for `β`, then per-subject least squares of the
/// residuals on `Z` for `G` and the residual variances.
pub fn moment_start(prep: &Prepared, spec: &ModelSpec) -> Result<Theta> {
    let p = spec.p();
    let q = spec.q();
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let mut n_rows = 0usize;
    for s in &prep.subjects {
        xtx += s.x.transpose() * &s.x;
        xty += s.x.transpose() * &s.y;
        n_rows += s.len();
    }
    let beta = xtx
        .cholesky()
        .ok_or_else(|| Error::InvalidData("fixed-effects design is rank deficient".into()))?
        .solve(&xty);
    let mut total_ss = 0.0;
    let mut ss = vec![0.0; spec.n_strata];
    let mut df = vec![0.0; spec.n_strata];
    let mut b_outer = DMatrix::<f64>::zeros(q, q);
    let mut ztz_inv_sum = DMatrix::<f64>::zeros(q, q);
    let mut used = 0usize;
    for s in &prep.subjects {
        let r = &s.y - &s.x * &beta;
        total_ss += r.norm_squared();
        if s.len() <= q {
            continue;
        }
        let Some(c) = (s.z.transpose() * &s.z).cholesky() else {
            continue;
        };
        let b = c.solve(&(s.z.transpose() * &r));
        let e = &r - &s.z * &b;
        let share = 1.0 - q as f64 / s.len() as f64;
        for (j, &st) in s.stratum.iter().enumerate() {
            ss[st] += e[j] * e[j];
            df[st] += share;
        }
        b_outer += &b * b.transpose();
        ztz_inv_sum += c.inverse();
        used += 1;
    }
    let pooled = (total_ss / n_rows.max(1) as f64).max(1e-8);
    let sigma_e: Vec<f64> = ss
        .iter()
        .zip(&df)
        .map(|(&v, &n)| if n > 0.5 && v > 0.0 { (v / n).sqrt() } else { (0.5 * pooled).sqrt() })
        .collect();
    let g = if used > q {
        let n = used as f64;
        let s_b = b_outer / n;
        let mean_var = sigma_e.iter().map(|s| s * s).sum::<f64>() / sigma_e.len() as f64;
        let corrected = &s_b - ztz_inv_sum * (mean_var / n);
        if corrected.clone().cholesky().is_some() {
            corrected
        } else {
            let floor = 1e-4 * pooled;
            DMatrix::from_fn(q, q, |i, j| {
                if i == j {
                    corrected[(i, i)].max(0.1 * s_b[(i, i)]).max(floor)
                } else {
                    0.0
                }
            })
        }
    } else {
        DMatrix::identity(q, q) * (0.5 * pooled)
    };
    Theta::from_covariance(beta.iter().copied().collect(), &g, sigma_e, spec.cov_param)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(algorithm: Algorithm) -> OptConfig {
        OptConfig::with_algorithm(algorithm)
    }

    #[test]
    fn gradient_of_square() {
        let g = fd_gradient(&|x| x[0] * x[0], &[3.0], &OptConfig::default()).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn central_gradient_exact_on_affine() {
        let g = fd_gradient(&|x| 2.0 * x[0] - x[1] + 0.5, &[0.3, -1.0], &OptConfig::default()).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-9 && (g[1] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_names_bad_coordinate() {
        let f = |x: &[f64]| if x[1] > 1.0 { f64::NAN } else { x[0] };
        match fd_gradient(&f, &[0.0, 1.0], &OptConfig::default()) {
            Err(Error::Gradient(1)) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn one_dimensional_parabola() {
        for a in [Algorithm::Marquardt, Algorithm::QuasiNewton] {
            let out = run(&|x| -(x[0] - 2.0).powi(2), &[0.0], &cfg(a)).unwrap();
            assert!(out.converged);
            assert!((out.x[0] - 2.0).abs() < 1e-8, "{a:?}: {}", out.x[0]);
        }
    }

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| -(100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2));
        for a in [Algorithm::Marquardt, Algorithm::QuasiNewton] {
            let out = run(&f, &[-1.2, 1.0], &cfg(a)).unwrap();
            assert!(out.converged, "{a:?}: {out:?}");
            assert!((out.x[0] - 1.0).abs() < 1e-5 && (out.x[1] - 1.0).abs() < 1e-5, "{a:?}: {:?}", out.x);
        }
    }

    #[test]
    fn quadratic_bowl_in_few_iterations() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let b = DVector::from_column_slice(&[1.0, -2.0, 0.5]);
        let opt = a.clone().cholesky().unwrap().solve(&b);
        let f = |x: &[f64]| {
            let v = DVector::from_column_slice(x);
            -(0.5 * v.dot(&(&a * &v)) - b.dot(&v))
        };
        let out = quasi_newton_maximize(&f, &[3.0, 3.0, -3.0], &cfg(Algorithm::QuasiNewton)).unwrap();
        assert!(out.converged);
        assert!(out.iterations <= 5, "{} iterations", out.iterations);
        for i in 0..3 {
            assert!((out.x[i] - opt[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn nonsmooth_peak() {
        let f = |x: &[f64]| -x[0].abs().powf(1.5);
        let x = match quasi_newton_maximize(&f, &[0.8], &cfg(Algorithm::QuasiNewton)) {
            Ok(o) => o.x,
            Err(Error::Stall { x, .. }) => x,
            Err(e) => panic!("{e}"),
        };
        assert!(x[0].abs() < 1e-4, "{x:?}");
    }

    #[test]
    fn kink_stalls_with_best_point() {
        let f = |x: &[f64]| if x[0] <= 0.5 { x[0] } else { 0.5 - 1e6 * (x[0] - 0.5) };
        for a in [Algorithm::Marquardt, Algorithm::QuasiNewton] {
            match run(&f, &[0.5], &cfg(a)) {
                Err(Error::Stall { x, f, .. }) => {
                    assert_eq!(x, vec![0.5]);
                    assert_eq!(f, 0.5);
                }
                other => panic!("{a:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let f = |_: &[f64]| f64::NAN;
        assert!(matches!(
            quasi_newton_maximize(&f, &[0.0], &cfg(Algorithm::QuasiNewton)),
            Err(Error::NonFiniteStart)
        ));
        assert!(matches!(
            marquardt_maximize(&f, &[0.0], &cfg(Algorithm::Marquardt)),
            Err(Error::NonFiniteStart)
        ));
    }
}
