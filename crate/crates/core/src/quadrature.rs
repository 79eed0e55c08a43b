//! Gauss–Hermite rules and adaptive Gauss–Hermite quadrature.
//!
//! The adaptive rule recentres the tensor-product grid at the mode of the
//! integrand and rescales it by the inverse curvature there, so a Gaussian
//! integrand is integrated exactly by any order and order 1 is the Laplace
//! approximation.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const MAX_GH_ORDER: usize = 64;

/// Nodes and weights for `∫ g(x) e^{-x²} dx ≈ Σ w_k g(x_k)`.
#[derive(Debug, Clone)]
pub struct GhRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GhRule {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }
}

fn compute_gh_rule(n: usize) -> GhRule {
    // Newton iteration on orthonormal Hermite polynomials with the usual
    // asymptotic starting guesses for the largest roots.
    const PIM4: f64 = 0.751_125_544_464_942_5; // π^(-1/4)
    let nf = n as f64;
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = 0.0f64;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = PIM4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let step = p1 / pp;
            z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    x.reverse();
    w.reverse();
    GhRule { nodes: x, weights: w }
}

fn rule_cache() -> &'static [GhRule] {
    static CACHE: OnceLock<Vec<GhRule>> = OnceLock::new();
    CACHE.get_or_init(|| (1..=MAX_GH_ORDER).map(compute_gh_rule).collect())
}

/// Gauss–Hermite rule of the given order, nodes ascending.
pub fn gh_rule(order: usize) -> Result<GhRule> {
    Ok(cached_rule(order)?.clone())
}

fn cached_rule(order: usize) -> Result<&'static GhRule> {
    if order == 0 || order > MAX_GH_ORDER {
        return Err(Error::OrderOutOfRange(order));
    }
    Ok(&rule_cache()[order - 1])
}

/// Mode of a log-integrand and the Hessian there.
#[derive(Debug, Clone)]
pub struct Mode {
    pub center: DVector<f64>,
    pub curvature: DMatrix<f64>,
}

const MODE_MAX_ITER: usize = 100;
const MODE_GRAD_TOL: f64 = 1e-8;

fn fd_grad(logf: &dyn Fn(&[f64]) -> f64, u: &[f64]) -> DVector<f64> {
    let mut x = u.to_vec();
    DVector::from_fn(u.len(), |k, _| {
        let h = 1e-5 * u[k].abs().max(1.0);
        x[k] = u[k] + h;
        let up = logf(&x);
        x[k] = u[k] - h;
        let down = logf(&x);
        x[k] = u[k];
        (up - down) / (2.0 * h)
    })
}

fn fd_hess(logf: &dyn Fn(&[f64]) -> f64, u: &[f64], f0: f64) -> DMatrix<f64> {
    let h: Vec<f64> = u.iter().map(|v| 1e-4 * v.abs().max(1.0)).collect();
    fd_hess_steps(logf, u, f0, &h)
}

/// Curvature at the mode with steps of a tenth of the local standard
/// deviation. Quadratic log-integrands are differenced exactly at any step,
/// so a wide step keeps rounding error out of the grid scale.
fn mode_curvature(logf: &dyn Fn(&[f64]) -> f64, u: &[f64], f0: f64) -> DMatrix<f64> {
    let rough = fd_hess(logf, u, f0);
    let h: Vec<f64> = (0..u.len())
        .map(|i| {
            let c = -rough[(i, i)];
            if c > 0.0 && c.is_finite() {
                0.1 / c.sqrt()
            } else {
                1e-4 * u[i].abs().max(1.0)
            }
        })
        .collect();
    let refined = fd_hess_steps(logf, u, f0, &h);
    if refined.iter().all(|v| v.is_finite()) && (-&refined).cholesky().is_some() {
        refined
    } else {
        rough
    }
}

fn fd_hess_steps(logf: &dyn Fn(&[f64]) -> f64, u: &[f64], f0: f64, h: &[f64]) -> DMatrix<f64> {
    let q = u.len();
    let mut x = u.to_vec();
    let mut hess = DMatrix::zeros(q, q);
    for i in 0..q {
        x[i] = u[i] + h[i];
        let up = logf(&x);
        x[i] = u[i] - h[i];
        let down = logf(&x);
        x[i] = u[i];
        hess[(i, i)] = (up - 2.0 * f0 + down) / (h[i] * h[i]);
        for j in 0..i {
            let mut corner = |si: f64, sj: f64| {
                x[i] = u[i] + si * h[i];
                x[j] = u[j] + sj * h[j];
                let v = logf(&x);
                x[i] = u[i];
                x[j] = u[j];
                v
            };
            let v = (corner(1.0, 1.0) - corner(1.0, -1.0) - corner(-1.0, 1.0) + corner(-1.0, -1.0))
                / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    hess
}

/// Newton direction for maximization, regularized until `-H + τI` is PD.
fn ascent_direction(hess: &DMatrix<f64>, grad: &DVector<f64>) -> DVector<f64> {
    let q = grad.len();
    let neg = -hess;
    let mut tau = 0.0;
    for _ in 0..60 {
        let m = &neg + DMatrix::identity(q, q) * tau;
        if let Some(ch) = m.cholesky() {
            return ch.solve(grad);
        }
        tau = if tau == 0.0 { 1e-8 * (1.0 + neg.diagonal().amax()) } else { tau * 10.0 };
    }
    grad.clone()
}

/// Safeguarded Newton search for the maximum of `logf`, started at `start`.
pub fn find_mode(logf: &dyn Fn(&[f64]) -> f64, start: &[f64]) -> Result<Mode> {
    let mut u = DVector::from_column_slice(start);
    let mut f = logf(u.as_slice());
    if !f.is_finite() {
        return Err(Error::Integration { node: start.to_vec() });
    }
    let mut grad_norm = f64::INFINITY;
    for _ in 0..MODE_MAX_ITER {
        let grad = fd_grad(logf, u.as_slice());
        grad_norm = grad.norm();
        if grad_norm < MODE_GRAD_TOL {
            return Ok(Mode {
                curvature: mode_curvature(logf, u.as_slice(), f),
                center: u,
            });
        }
        let hess = fd_hess(logf, u.as_slice(), f);
        let dir = ascent_direction(&hess, &grad);
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = &u + &dir * t;
            let fc = logf(cand.as_slice());
            if fc.is_finite() && fc >= f {
                u = cand;
                f = fc;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        let step = (&dir * t).norm();
        if !accepted || step < 1e-12 * (1.0 + u.norm()) {
            // No further progress is possible at working precision.
            let grad = fd_grad(logf, u.as_slice());
            grad_norm = grad.norm();
            if grad_norm < 1e-6 * (1.0 + f.abs()) {
                return Ok(Mode {
                    curvature: mode_curvature(logf, u.as_slice(), f),
                    center: u,
                });
            }
            break;
        }
    }
    Err(Error::ModeSearch {
        iterations: MODE_MAX_ITER,
        gradient_norm: grad_norm,
        last: u.iter().copied().collect(),
    })
}

/// Tensor-product Gauss–Hermite grid recentred at a mode.
#[derive(Debug, Clone)]
pub struct AdaptiveGrid {
    pub center: DVector<f64>,
    /// Lower-triangular `S` with `S Sᵀ = (-curvature)⁻¹`.
    pub scale: DMatrix<f64>,
    log_det_scale: f64,
}

impl AdaptiveGrid {
    pub fn from_mode(mode: &Mode) -> Result<Self> {
        let neg = -&mode.curvature;
        let chol = neg.cholesky().ok_or_else(|| {
            Error::NotPositiveDefinite("negative curvature at the integrand mode".into())
        })?;
        // (R Rᵀ)⁻¹ = R⁻ᵀ R⁻¹; take the Cholesky factor of that inverse.
        let inv = chol.inverse();
        let scale = inv
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite("inverse curvature".into()))?
            .l();
        let log_det_scale = scale.diagonal().iter().map(|d| d.ln()).sum();
        Ok(AdaptiveGrid {
            center: mode.center.clone(),
            scale,
            log_det_scale,
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// Abscissae `û + √2 S x` and log-weights `Σ (ln w + x²)` for every
    /// tensor point of the given order.
    pub fn points(&self, order: usize) -> Result<Vec<(DVector<f64>, f64)>> {
        let mut out = Vec::with_capacity(order.pow(self.dim() as u32));
        self.for_each_point(order, |u, lw| {
            out.push((DVector::from_column_slice(u), lw));
            Ok(())
        })?;
        Ok(out)
    }

    fn for_each_point(
        &self,
        order: usize,
        mut visit: impl FnMut(&[f64], f64) -> Result<()>,
    ) -> Result<()> {
        let rule = cached_rule(order)?;
        let q = self.dim();
        let lw: Vec<f64> = rule
            .nodes
            .iter()
            .zip(&rule.weights)
            .map(|(x, w)| w.ln() + x * x)
            .collect();
        let mut idx = vec![0usize; q];
        let mut x = DVector::zeros(q);
        let mut u = vec![0.0; q];
        let sqrt2 = std::f64::consts::SQRT_2;
        loop {
            let mut logw = 0.0;
            for d in 0..q {
                x[d] = rule.nodes[idx[d]];
                logw += lw[idx[d]];
            }
            for (r, ur) in u.iter_mut().enumerate() {
                let mut acc = self.center[r];
                for c in 0..=r {
                    acc += sqrt2 * self.scale[(r, c)] * x[c];
                }
                *ur = acc;
            }
            visit(&u, logw)?;
            // Odometer increment.
            let mut d = 0;
            loop {
                if d == q {
                    return Ok(());
                }
                idx[d] += 1;
                if idx[d] < order {
                    break;
                }
                idx[d] = 0;
                d += 1;
            }
        }
    }

    /// `ln ∫ exp(logf(u)) du` with the given order.
    pub fn log_integral(&self, logf: &dyn Fn(&[f64]) -> f64, order: usize) -> Result<f64> {
        let mut terms = Vec::with_capacity(order.pow(self.dim() as u32));
        self.for_each_point(order, |u, lw| {
            let v = logf(u);
            if !v.is_finite() {
                return Err(Error::Integration { node: u.to_vec() });
            }
            terms.push(lw + v);
            Ok(())
        })?;
        let q = self.dim() as f64;
        Ok(0.5 * q * std::f64::consts::LN_2 + self.log_det_scale + log_sum_exp(&terms))
    }
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Adaptive Gauss–Hermite approximation of `ln ∫_{R^q} exp(logf(u)) du`.
pub fn agq_log_integral(
    logf: &dyn Fn(&[f64]) -> f64,
    q: usize,
    order: usize,
    start: &[f64],
) -> Result<f64> {
    if start.len() != q {
        return Err(Error::Dimension(format!(
            "start has length {}, expected {q}",
            start.len()
        )));
    }
    cached_rule(order)?;
    let mode = find_mode(logf, start)?;
    AdaptiveGrid::from_mode(&mode)?.log_integral(logf, order)
}

/// Adaptive quadrature with order doubling: orders `k` and `2k` are compared
/// and doubling stops once they agree within `qtol` (or the order would
/// exceed the maximum). Returns the value at the final order and that order.
pub fn agq_log_integral_doubling(
    logf: &dyn Fn(&[f64]) -> f64,
    start: &[f64],
    order: usize,
    qtol: f64,
) -> Result<(f64, usize)> {
    cached_rule(order)?;
    let mode = find_mode(logf, start)?;
    let grid = AdaptiveGrid::from_mode(&mode)?;
    let mut k = order;
    let mut value = grid.log_integral(logf, k)?;
    while 2 * k <= MAX_GH_ORDER {
        let next = grid.log_integral(logf, 2 * k)?;
        let delta = (next - value).abs();
        k *= 2;
        value = next;
        if delta < qtol {
            break;
        }
    }
    Ok((value, k))
}
