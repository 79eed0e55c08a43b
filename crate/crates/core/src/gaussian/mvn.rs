//! Multivariate normal probabilities over lower-infinite boxes,
//! `Pr(Y ≤ upper)` for `Y ~ N(mean, cov)`.
//!
//! The problem is standardized, the variables are reordered so the most
//! constraining limits are integrated first, and the Cholesky-sequential
//! transformation maps the probability to an integral over `[0,1]^(m-1)`.
//! That integral is evaluated with a subregion-adaptive rule (default) or a
//! randomized lattice rule.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cubature::integrate_unit_cube;
use super::normal::{quantile_unpolished, std_normal_cdf, truncated_mean_below};
use crate::error::{Error, Result};

pub const MAX_MVN_DIM: usize = 10;
const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MvnMethod {
    /// Globally adaptive subregion cubature.
    Subregion,
    /// Randomly shifted rank-1 lattice rule with sample doubling.
    Lattice,
}

#[derive(Debug, Clone)]
pub struct MvnProblem {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub upper: DVector<f64>,
    /// Requested absolute error.
    pub tol: f64,
    /// Additional relative requirement `err ≤ rel_tol · value`; 0 disables it.
    pub rel_tol: f64,
    pub max_evals: usize,
    pub method: MvnMethod,
    /// Seed of the lattice shifts. Unused by the subregion method.
    pub seed: u64,
}

impl MvnProblem {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>, upper: DVector<f64>) -> Self {
        MvnProblem {
            mean,
            cov,
            upper,
            tol: 1e-6,
            rel_tol: 0.0,
            max_evals: 1_000_000,
            method: MvnMethod::Subregion,
            seed: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbStatus {
    Converged,
    /// The evaluation budget ran out before the tolerance was met; the value
    /// is the best available estimate.
    BudgetExhausted,
}

#[derive(Debug, Clone, Copy)]
pub struct ProbResult {
    pub value: f64,
    pub err_est: f64,
    pub evals: usize,
    pub status: ProbStatus,
}

impl ProbResult {
    fn exact(value: f64) -> Self {
        ProbResult {
            value,
            err_est: 0.0,
            evals: 1,
            status: ProbStatus::Converged,
        }
    }
}

fn validate(p: &MvnProblem) -> Result<()> {
    let m = p.dim();
    if m == 0 {
        return Err(Error::Dimension("rectangle probability needs m ≥ 1".into()));
    }
    if m > MAX_MVN_DIM {
        return Err(Error::UnsupportedDimension(m));
    }
    if p.cov.nrows() != m || p.cov.ncols() != m || p.upper.len() != m {
        return Err(Error::Dimension(format!(
            "mean has length {m}, cov is {}x{}, upper has length {}",
            p.cov.nrows(),
            p.cov.ncols(),
            p.upper.len()
        )));
    }
    if !(p.tol > 0.0) || p.rel_tol < 0.0 {
        return Err(Error::InvalidParameter("tolerances must be positive".into()));
    }
    if p.mean.iter().any(|v| !v.is_finite()) || p.upper.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidParameter("non-finite mean or NaN limit".into()));
    }
    for i in 0..m {
        if !(p.cov[(i, i)] >= VARIANCE_FLOOR) {
            return Err(Error::NotPositiveDefinite(format!(
                "variance {} at index {i} is below {VARIANCE_FLOOR:e}",
                p.cov[(i, i)]
            )));
        }
        for j in 0..i {
            let scale = (p.cov[(i, i)] * p.cov[(j, j)]).sqrt();
            if (p.cov[(i, j)] - p.cov[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::InvalidParameter("covariance is not symmetric".into()));
            }
        }
    }
    if p.cov.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("covariance".into()));
    }
    Ok(())
}

/// Reordered Cholesky factor of the correlation matrix together with the
/// standardized, permuted upper limits.
struct Transformed {
    chol: DMatrix<f64>,
    upper: Vec<f64>,
}

fn reorder_and_factor(corr: &DMatrix<f64>, upper: &[f64]) -> Result<Transformed> {
    let m = upper.len();
    let mut perm: Vec<usize> = (0..m).collect();
    let mut b = upper.to_vec();
    let mut l = DMatrix::<f64>::zeros(m, m);
    let mut y = vec![0.0; m];
    for k in 0..m {
        // Pick the remaining variable with the smallest conditional probability.
        let mut best = k;
        let mut best_prob = f64::INFINITY;
        let mut best_s = 0.0;
        let mut best_t = 0.0;
        for i in k..m {
            let s2 = corr[(perm[i], perm[i])] - (0..k).map(|j| l[(i, j)].powi(2)).sum::<f64>();
            if s2 <= 1e-13 {
                return Err(Error::NotPositiveDefinite(
                    "singular correlation matrix in reordering".into(),
                ));
            }
            let s = s2.sqrt();
            let t = (b[i] - (0..k).map(|j| l[(i, j)] * y[j]).sum::<f64>()) / s;
            let prob = std_normal_cdf(t);
            if prob < best_prob {
                best = i;
                best_prob = prob;
                best_s = s;
                best_t = t;
            }
        }
        if best != k {
            perm.swap(k, best);
            b.swap(k, best);
            l.swap_rows(k, best);
        }
        l[(k, k)] = best_s;
        for i in (k + 1)..m {
            let dot: f64 = (0..k).map(|j| l[(i, j)] * l[(k, j)]).sum();
            l[(i, k)] = (corr[(perm[i], perm[k])] - dot) / best_s;
        }
        y[k] = truncated_mean_below(best_t);
    }
    Ok(Transformed { chol: l, upper: b })
}

/// Integrand of the sequential transformation at `w ∈ (0,1)^(m-1)`.
fn transformed_integrand(t: &Transformed, first: f64, w: &[f64], y: &mut [f64]) -> f64 {
    let m = t.upper.len();
    let mut e = first;
    let mut f = first;
    for k in 1..m {
        if f == 0.0 {
            return 0.0;
        }
        y[k - 1] = quantile_unpolished((w[k - 1] * e).max(1e-300));
        let dot: f64 = (0..k).map(|j| t.chol[(k, j)] * y[j]).sum();
        e = std_normal_cdf((t.upper[k] - dot) / t.chol[(k, k)]);
        f *= e;
    }
    f
}

/// `Pr(Y ≤ upper)` for `Y ~ N(mean, cov)`, `1 ≤ m ≤ 10`.
pub fn mvn_rect_prob(p: &MvnProblem) -> Result<ProbResult> {
    validate(p)?;
    let m = p.dim();
    let sd: Vec<f64> = (0..m).map(|i| p.cov[(i, i)].sqrt()).collect();
    let std_upper: Vec<f64> = (0..m).map(|i| (p.upper[i] - p.mean[i]) / sd[i]).collect();
    if std_upper.contains(&f64::NEG_INFINITY) {
        return Ok(ProbResult::exact(0.0));
    }
    // Coordinates with no upper limit marginalize out.
    let keep: Vec<usize> = (0..m).filter(|&i| std_upper[i].is_finite()).collect();
    if keep.is_empty() {
        return Ok(ProbResult::exact(1.0));
    }
    if keep.len() == 1 {
        return Ok(ProbResult::exact(std_normal_cdf(std_upper[keep[0]])));
    }
    let k = keep.len();
    let corr = DMatrix::from_fn(k, k, |i, j| {
        let (a, b) = (keep[i], keep[j]);
        if a == b {
            1.0
        } else {
            p.cov[(a, b)] / (sd[a] * sd[b])
        }
    });
    let upper: Vec<f64> = keep.iter().map(|&i| std_upper[i]).collect();
    let t = reorder_and_factor(&corr, &upper)?;
    let first = std_normal_cdf(t.upper[0] / t.chol[(0, 0)]);
    if first == 0.0 {
        return Ok(ProbResult::exact(0.0));
    }
    let (tol, rel_tol) = (p.tol, p.rel_tol);
    let accept = move |value: f64, err: f64| err <= tol && (rel_tol == 0.0 || err <= rel_tol * value.abs());
    let mut y = vec![0.0; k];
    let out = match p.method {
        MvnMethod::Subregion => {
            // w = u²(3 - 2u) flattens the quantile singularities at the faces
            // of the cube, which the polynomial rules otherwise chase.
            let mut w = vec![0.0; k - 1];
            let mut f = |u: &[f64]| {
                let mut jac = 1.0;
                for (wi, &ui) in w.iter_mut().zip(u) {
                    *wi = ui * ui * (3.0 - 2.0 * ui);
                    jac *= 6.0 * ui * (1.0 - ui);
                }
                jac * transformed_integrand(&t, first, &w, &mut y)
            };
            integrate_unit_cube(k - 1, &mut f, &accept, p.max_evals)
        }
        MvnMethod::Lattice => {
            let mut f = |w: &[f64]| transformed_integrand(&t, first, w, &mut y);
            lattice(k - 1, &mut f, &accept, p.max_evals, p.seed)
        }
    };
    Ok(ProbResult {
        value: out.value.clamp(0.0, 1.0),
        err_est: out.error,
        evals: out.evals,
        status: if out.converged {
            ProbStatus::Converged
        } else {
            ProbStatus::BudgetExhausted
        },
    })
}

const PRIMES: [f64; 9] = [2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0, 23.0];
const N_SHIFTS: usize = 12;

/// Richtmyer lattice with random shifts and the baker's transform; the
/// error estimate is three standard errors across shifts.
fn lattice(
    dim: usize,
    f: &mut dyn FnMut(&[f64]) -> f64,
    accept: &dyn Fn(f64, f64) -> bool,
    max_evals: usize,
    seed: u64,
) -> super::cubature::CubatureOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gen: Vec<f64> = PRIMES[..dim].iter().map(|p| p.sqrt().fract()).collect();
    let mut n = 128usize;
    let mut evals = 0;
    let mut w = vec![0.0; dim];
    loop {
        let mut means = [0.0; N_SHIFTS];
        for mean in means.iter_mut() {
            let shift: Vec<f64> = (0..dim).map(|_| rng.random::<f64>()).collect();
            let mut acc = 0.0;
            for i in 1..=n {
                for d in 0..dim {
                    let x = (i as f64 * gen[d] + shift[d]).fract();
                    w[d] = (2.0 * x - 1.0).abs();
                }
                acc += f(&w);
            }
            *mean = acc / n as f64;
        }
        evals += n * N_SHIFTS;
        let value = means.iter().sum::<f64>() / N_SHIFTS as f64;
        let var = means.iter().map(|m| (m - value).powi(2)).sum::<f64>()
            / (N_SHIFTS * (N_SHIFTS - 1)) as f64;
        let error = 3.0 * var.sqrt();
        let converged = accept(value, error);
        if converged || evals + 2 * n * N_SHIFTS > max_evals {
            return super::cubature::CubatureOutcome {
                value,
                error,
                evals,
                converged,
            };
        }
        n *= 2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn prob(cov: DMatrix<f64>, upper: &[f64]) -> ProbResult {
        let m = upper.len();
        mvn_rect_prob(&MvnProblem::new(
            DVector::zeros(m),
            cov,
            DVector::from_column_slice(upper),
        ))
        .unwrap()
    }

    #[test]
    fn univariate_delegates_to_cdf() {
        let r = prob(DMatrix::identity(1, 1), &[0.0]);
        assert_eq!(r.value, 0.5);
        assert_eq!(r.err_est, 0.0);
    }

    #[test]
    fn independent_orthant() {
        let r = prob(DMatrix::identity(2, 2), &[0.0, 0.0]);
        assert!((r.value - 0.25).abs() < 1e-12);
    }

    #[test]
    fn correlated_orthant() {
        for &rho in &[-0.9, -0.3, 0.5, 0.95] {
            let cov = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
            let exact = 0.25 + f64::asin(rho) / (2.0 * PI);
            let r = prob(cov.clone(), &[0.0, 0.0]);
            assert!((r.value - exact).abs() < 1e-6, "rho {rho}: {}", r.value);
            let mut tight = MvnProblem::new(DVector::zeros(2), cov, DVector::zeros(2));
            tight.tol = 1e-12;
            let r = mvn_rect_prob(&tight).unwrap();
            assert_eq!(r.status, ProbStatus::Converged);
            assert!((r.value - exact).abs() < 1e-12, "rho {rho}: {}", r.value);
        }
    }

    #[test]
    fn trivariate_orthant() {
        // Pr(all three ≤ 0) = 1/8 + (asin r12 + asin r13 + asin r23)/(4π)
        let (a, b, c) = (0.3, -0.2, 0.6);
        let cov = DMatrix::from_row_slice(3, 3, &[1.0, a, b, a, 1.0, c, b, c, 1.0]);
        let exact = 0.125 + (f64::asin(a) + f64::asin(b) + f64::asin(c)) / (4.0 * PI);
        let r = prob(cov.clone(), &[0.0, 0.0, 0.0]);
        assert!((r.value - exact).abs() < 1e-6);
        let mut problem = MvnProblem::new(DVector::zeros(3), cov, DVector::zeros(3));
        problem.method = MvnMethod::Lattice;
        problem.seed = 7;
        let l = mvn_rect_prob(&problem).unwrap();
        assert!((l.value - exact).abs() < 1e-5);
    }

    #[test]
    fn infinite_limits() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.4, 0.4, 2.0]);
        assert_eq!(prob(cov.clone(), &[f64::INFINITY, f64::INFINITY]).value, 1.0);
        assert_eq!(prob(cov.clone(), &[f64::NEG_INFINITY, 3.0]).value, 0.0);
        let r = prob(cov, &[f64::INFINITY, 0.0]);
        assert_eq!(r.value, 0.5);
    }

    #[test]
    fn rejects_bad_problems() {
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let p = MvnProblem::new(DVector::zeros(2), singular, DVector::zeros(2));
        assert!(matches!(mvn_rect_prob(&p), Err(Error::NotPositiveDefinite(_))));
        let p = MvnProblem::new(DVector::zeros(11), DMatrix::identity(11, 11), DVector::zeros(11));
        assert!(matches!(mvn_rect_prob(&p), Err(Error::UnsupportedDimension(11))));
        let tiny = DMatrix::from_row_slice(2, 2, &[1e-13, 0.0, 0.0, 1.0]);
        let p = MvnProblem::new(DVector::zeros(2), tiny, DVector::zeros(2));
        assert!(mvn_rect_prob(&p).is_err());
    }

    #[test]
    fn budget_exhaustion_is_reported() {
        let m = 6;
        let cov = DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { 0.5 });
        let mut p = MvnProblem::new(DVector::zeros(m), cov, DVector::from_element(m, 0.3));
        p.tol = 1e-14;
        p.max_evals = 2_000;
        let r = mvn_rect_prob(&p).unwrap();
        assert_eq!(r.status, ProbStatus::BudgetExhausted);
        assert!(r.value > 0.0 && r.value < 1.0);
    }
}
