//! Log-likelihood of the censored linear mixed model.
//!
//! Two formulations are provided and agree up to integration error:
//!
//! * [`Method::Marginal`]: the density of the observed block times the
//!   conditional probability that every censored measure lies below its
//!   threshold, an `n_cens`-dimensional normal rectangle probability.
//! * [`Method::Agq`]: per-observation conditional contributions given the
//!   random effects (normal density for observed, normal CDF for censored)
//!   integrated over the random-effect distribution by adaptive
//!   Gauss–Hermite quadrature.
//!
//! [`Method::Naive`] substitutes thresholds for censored values and ignores
//! censoring.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::{partition_subject, Dataset, SubjectData};
use crate::error::{Error, Result};
use crate::gaussian::{
    log_std_normal_cdf, log_std_normal_pdf, mvn_rect_prob, MvnMethod, MvnProblem, ProbStatus,
    LN_SQRT_2PI,
};
use crate::model::{build_designs, ModelSpec};
use crate::quadrature::{agq_log_integral, agq_log_integral_doubling};
use crate::theta::Theta;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Marginal,
    Agq,
    Naive,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Marginal => "marginal",
            Method::Agq => "agq",
            Method::Naive => "naive",
        }
    }
}

#[derive(Debug, Clone)]
pub struct LogLikOptions {
    pub method: Method,
    /// Absolute accuracy requested from rectangle probabilities.
    pub mvn_tol: f64,
    /// Relative accuracy, which governs the error of the log probability
    /// once the probability is small; 0 disables it.
    pub mvn_rel_tol: f64,
    pub mvn_max_evals: usize,
    pub mvn_method: MvnMethod,
    /// Quadrature points per random-effect dimension (starting order when
    /// `qtol > 0`).
    pub gh_order: usize,
    /// Order-doubling tolerance; 0 keeps `gh_order` fixed.
    pub qtol: f64,
    pub seed: u64,
}

impl Default for LogLikOptions {
    fn default() -> Self {
        LogLikOptions {
            method: Method::Marginal,
            mvn_tol: 1e-6,
            mvn_rel_tol: 1e-4,
            mvn_max_evals: 1_000_000,
            mvn_method: MvnMethod::Subregion,
            gh_order: 10,
            qtol: 1e-6,
            seed: 0,
        }
    }
}

impl LogLikOptions {
    pub fn with_method(method: Method) -> Self {
        LogLikOptions {
            method,
            ..Default::default()
        }
    }
}

/// Per-subject values plus diagnostics of one likelihood evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub total: f64,
    pub per_subject: Vec<f64>,
    /// Subjects whose rectangle probability hit the evaluation budget.
    pub budget_exhausted: Vec<String>,
    /// Largest quadrature order used by any subject (AGQ only).
    pub max_order: usize,
}

/// Subject data with designs precomputed.
#[derive(Debug, Clone)]
pub struct PreparedSubject {
    pub id: String,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    /// Response for observed rows, threshold for censored rows.
    pub y: DVector<f64>,
    pub observed: Vec<bool>,
    pub stratum: Vec<usize>,
    pub obs_idx: Vec<usize>,
    pub cens_idx: Vec<usize>,
}

impl PreparedSubject {
    pub fn new(s: &SubjectData, spec: &ModelSpec) -> Result<Self> {
        let (x, z) = build_designs(s, spec).map_err(|e| e.for_subject(s.subject_id()))?;
        let (obs_idx, cens_idx) = partition_subject(s);
        let obs = s.observations();
        let stratum = obs
            .iter()
            .map(|o| spec.stratum(o))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.for_subject(s.subject_id()))?;
        Ok(PreparedSubject {
            id: s.subject_id().to_string(),
            x,
            z,
            y: DVector::from_iterator(
                obs.len(),
                obs.iter().map(|o| if o.is_observed { o.response } else { o.threshold }),
            ),
            observed: obs.iter().map(|o| o.is_observed).collect(),
            stratum,
            obs_idx,
            cens_idx,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// `(X β, Z G Zᵀ + R)`.
    pub fn moments(&self, th: &Theta) -> (DVector<f64>, DMatrix<f64>) {
        let mu = &self.x * &th.beta;
        let mut v = &self.z * th.g() * self.z.transpose();
        for (j, &s) in self.stratum.iter().enumerate() {
            v[(j, j)] += th.sigma_e[s] * th.sigma_e[s];
        }
        (mu, v)
    }
}

/// Whole dataset prepared for repeated likelihood evaluation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub subjects: Vec<PreparedSubject>,
}

impl Prepared {
    pub fn new(d: &Dataset, spec: &ModelSpec) -> Result<Self> {
        Ok(Prepared {
            subjects: d
                .subjects()
                .iter()
                .map(|s| PreparedSubject::new(s, spec))
                .collect::<Result<_>>()?,
        })
    }

    /// Every row treated as observed, censored rows at their thresholds.
    pub fn imputed(&self) -> Prepared {
        Prepared {
            subjects: self
                .subjects
                .iter()
                .map(|s| PreparedSubject {
                    observed: vec![true; s.len()],
                    obs_idx: (0..s.len()).collect(),
                    cens_idx: Vec::new(),
                    ..s.clone()
                })
                .collect(),
        }
    }
}

/// Mean `X_i β` and covariance `Z_i G Z_iᵀ + R_i` of one subject's responses.
pub fn marginal_moments(
    s: &SubjectData,
    spec: &ModelSpec,
    th: &Theta,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    th.validate(spec)?;
    Ok(PreparedSubject::new(s, spec)?.moments(th))
}

fn sub_vec(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

fn sub_mat(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Gaussian conditioning of the censored block on the observed block.
pub fn conditional_moments(
    mu: &DVector<f64>,
    v: &DMatrix<f64>,
    obs_idx: &[usize],
    cens_idx: &[usize],
    y_obs: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if y_obs.len() != obs_idx.len() {
        return Err(Error::Dimension("y_obs does not match the observed block".into()));
    }
    let v_oo = sub_mat(v, obs_idx, obs_idx);
    let chol = v_oo
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("observed-block covariance".into()))?;
    let v_oc = sub_mat(v, obs_idx, cens_idx);
    let resid = y_obs - sub_vec(mu, obs_idx);
    let mean = sub_vec(mu, cens_idx) + v_oc.transpose() * chol.solve(&resid);
    let l_inv_oc = chol
        .l()
        .solve_lower_triangular(&v_oc)
        .ok_or_else(|| Error::NotPositiveDefinite("observed-block covariance".into()))?;
    let mut cov = sub_mat(v, cens_idx, cens_idx) - l_inv_oc.transpose() * &l_inv_oc;
    let sym = (&cov + cov.transpose()) * 0.5;
    cov.copy_from(&sym);
    Ok((mean, cov))
}

/// `ln N(y; mu, V)`.
pub fn mvn_log_density(y: &DVector<f64>, mu: &DVector<f64>, v: &DMatrix<f64>) -> Result<f64> {
    let chol = v
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("marginal covariance".into()))?;
    let l = chol.l();
    let alpha = l
        .solve_lower_triangular(&(y - mu))
        .ok_or_else(|| Error::NotPositiveDefinite("marginal covariance".into()))?;
    let log_det_half: f64 = l.diagonal().iter().map(|d| d.ln()).sum();
    Ok(-0.5 * alpha.norm_squared() - log_det_half - y.len() as f64 * LN_SQRT_2PI)
}

/// Returns the subject's contribution and whether the rectangle
/// probability exhausted its budget.
fn subject_marginal(ps: &PreparedSubject, th: &Theta, opt: &LogLikOptions) -> Result<(f64, bool)> {
    let (mu, v) = ps.moments(th);
    if ps.cens_idx.is_empty() {
        return Ok((mvn_log_density(&ps.y, &mu, &v)?, false));
    }
    let (dens, c_mean, c_cov) = if ps.obs_idx.is_empty() {
        (0.0, mu.clone(), v.clone())
    } else {
        let y_obs = sub_vec(&ps.y, &ps.obs_idx);
        let dens = mvn_log_density(&y_obs, &sub_vec(&mu, &ps.obs_idx), &sub_mat(&v, &ps.obs_idx, &ps.obs_idx))?;
        let (m, c) = conditional_moments(&mu, &v, &ps.obs_idx, &ps.cens_idx, &y_obs)?;
        (dens, m, c)
    };
    let upper = sub_vec(&ps.y, &ps.cens_idx);
    if upper.len() == 1 {
        let z = (upper[0] - c_mean[0]) / c_cov[(0, 0)].sqrt();
        return Ok((dens + log_std_normal_cdf(z), false));
    }
    let mut problem = MvnProblem::new(c_mean, c_cov, upper);
    problem.tol = opt.mvn_tol;
    problem.rel_tol = opt.mvn_rel_tol;
    problem.max_evals = opt.mvn_max_evals;
    problem.method = opt.mvn_method;
    problem.seed = opt.seed;
    let r = mvn_rect_prob(&problem)?;
    let exhausted = r.status == ProbStatus::BudgetExhausted;
    Ok((dens + r.value.ln(), exhausted))
}

/// Log-integrand over standardized random effects `v` (with `γ = L v`),
/// restricted to the non-zero columns of `L`.
struct AgqIntegrand {
    offset: Vec<f64>,
    zl: Vec<Vec<f64>>,
    sigma: Vec<f64>,
    value: Vec<f64>,
    observed: Vec<bool>,
    dim: usize,
}

impl AgqIntegrand {
    fn new(ps: &PreparedSubject, th: &Theta) -> (Self, Vec<usize>) {
        let l = th.g_factor();
        let keep: Vec<usize> = (0..l.ncols())
            .filter(|&c| l.column(c).iter().any(|v| *v != 0.0))
            .collect();
        let offset = (&ps.x * &th.beta).iter().copied().collect();
        let zl_full = &ps.z * &l;
        let zl = (0..ps.len())
            .map(|j| keep.iter().map(|&c| zl_full[(j, c)]).collect())
            .collect();
        (
            AgqIntegrand {
                offset,
                zl,
                sigma: ps.stratum.iter().map(|&s| th.sigma_e[s]).collect(),
                value: ps.y.iter().copied().collect(),
                observed: ps.observed.clone(),
                dim: keep.len(),
            },
            keep,
        )
    }

    fn log_f(&self, v: &[f64]) -> f64 {
        let mut total = -0.5 * v.iter().map(|x| x * x).sum::<f64>() - self.dim as f64 * LN_SQRT_2PI;
        for j in 0..self.offset.len() {
            let mean = self.offset[j] + self.zl[j].iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            let r = (self.value[j] - mean) / self.sigma[j];
            total += if self.observed[j] {
                log_std_normal_pdf(r) - self.sigma[j].ln()
            } else {
                log_std_normal_cdf(r)
            };
        }
        total
    }
}

/// Returns the subject's contribution and the quadrature order used.
fn subject_agq(ps: &PreparedSubject, th: &Theta, opt: &LogLikOptions) -> Result<(f64, usize)> {
    let (integrand, keep) = AgqIntegrand::new(ps, th);
    if integrand.dim == 0 {
        return Ok((integrand.log_f(&[]), 0));
    }
    // Empirical-Bayes start: Lᵀ Zᵀ V⁻¹ (y* − X β), thresholds standing in
    // for censored values.
    let (mu, v) = ps.moments(th);
    let chol = v
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("marginal covariance".into()))?;
    let lt_zt = (&ps.z * th.g_factor()).transpose();
    let blup = lt_zt * chol.solve(&(&ps.y - mu));
    let start: Vec<f64> = keep.iter().map(|&c| blup[c]).collect();
    let logf = |v: &[f64]| integrand.log_f(v);
    if opt.qtol > 0.0 {
        agq_log_integral_doubling(&logf, &start, opt.gh_order, opt.qtol)
    } else {
        Ok((agq_log_integral(&logf, integrand.dim, opt.gh_order, &start)?, opt.gh_order))
    }
}

fn check_inputs(spec: &ModelSpec, th: &Theta, opt: &LogLikOptions) -> Result<()> {
    th.validate(spec)?;
    if !(opt.mvn_tol > 0.0) || opt.qtol < 0.0 {
        return Err(Error::InvalidParameter("tolerances must be positive".into()));
    }
    Ok(())
}

/// Evaluates the selected likelihood on prepared data. Subjects are
/// processed in parallel and summed in dataset order.
pub fn evaluate(prep: &Prepared, spec: &ModelSpec, th: &Theta, opt: &LogLikOptions) -> Result<Evaluation> {
    check_inputs(spec, th, opt)?;
    let naive;
    let data = if opt.method == Method::Naive {
        naive = prep.imputed();
        &naive
    } else {
        prep
    };
    let parts: Vec<Result<(f64, bool, usize)>> = data
        .subjects
        .par_iter()
        .map(|ps| {
            let r = match opt.method {
                Method::Marginal | Method::Naive => subject_marginal(ps, th, opt).map(|(v, e)| (v, e, 0)),
                Method::Agq => subject_agq(ps, th, opt).map(|(v, k)| (v, false, k)),
            };
            r.map_err(|e| e.for_subject(&ps.id))
        })
        .collect();
    let mut per_subject = Vec::with_capacity(parts.len());
    let mut budget_exhausted = Vec::new();
    let mut max_order = 0;
    for (ps, part) in data.subjects.iter().zip(parts) {
        let (v, exhausted, order) = part?;
        per_subject.push(v);
        if exhausted {
            budget_exhausted.push(ps.id.clone());
        }
        max_order = max_order.max(order);
    }
    if !budget_exhausted.is_empty() {
        warn!(
            "rectangle probability budget exhausted for {} subject(s): {}",
            budget_exhausted.len(),
            budget_exhausted.join(", ")
        );
    }
    Ok(Evaluation {
        total: per_subject.iter().sum(),
        per_subject,
        budget_exhausted,
        max_order,
    })
}

/// Selected log-likelihood of a dataset.
pub fn loglik(d: &Dataset, spec: &ModelSpec, th: &Theta, opt: &LogLikOptions) -> Result<f64> {
    Ok(evaluate(&Prepared::new(d, spec)?, spec, th, opt)?.total)
}

/// Likelihood given the observed measures, integrating over censored ones.
pub fn loglik_marginal(d: &Dataset, spec: &ModelSpec, th: &Theta, opt: &LogLikOptions) -> Result<f64> {
    let opt = LogLikOptions {
        method: Method::Marginal,
        ..opt.clone()
    };
    loglik(d, spec, th, &opt)
}

/// Likelihood given the random effects, integrated by adaptive quadrature.
pub fn loglik_agq(d: &Dataset, spec: &ModelSpec, th: &Theta, opt: &LogLikOptions) -> Result<f64> {
    let opt = LogLikOptions {
        method: Method::Agq,
        ..opt.clone()
    };
    loglik(d, spec, th, &opt)
}

/// Gaussian log-likelihood with censored values replaced by thresholds.
pub fn loglik_naive(d: &Dataset, spec: &ModelSpec, th: &Theta) -> Result<f64> {
    loglik(d, spec, th, &LogLikOptions::with_method(Method::Naive))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Observation;
    use crate::model::{CovParam, Template};
    use crate::theta::CovTheta;

    fn ri_only() -> ModelSpec {
        ModelSpec::template(Template::InterceptOnly, 0, CovParam::Cholesky).unwrap()
    }

    fn theta_ri(var1: f64, var_e: f64, alpha: f64) -> Theta {
        Theta::new(
            vec![alpha],
            CovTheta::Cholesky(DMatrix::from_element(1, 1, var1.sqrt())),
            vec![var_e.sqrt()],
        )
    }

    #[test]
    fn intercept_only_moments() {
        let s = SubjectData::new(
            "a",
            vec![Observation::observed("a", 0.0, 1.0), Observation::observed("a", 1.0, 2.0)],
        )
        .unwrap();
        let (_, v) = marginal_moments(&s, &ri_only(), &theta_ri(0.5, 0.2, 0.0)).unwrap();
        let expect = DMatrix::from_row_slice(2, 2, &[0.7, 0.5, 0.5, 0.7]);
        assert!((v - expect).amax() < 1e-14);
    }

    #[test]
    fn intercept_slope_moments() {
        let s = SubjectData::new(
            "a",
            vec![Observation::observed("a", 0.0, 1.0), Observation::observed("a", 1.0, 2.0)],
        )
        .unwrap();
        let g = DMatrix::from_row_slice(2, 2, &[0.5, -0.1, -0.1, 0.1]);
        let th = Theta::from_covariance(vec![3.0, 0.5], &g, vec![0.2f64.sqrt()], CovParam::Cholesky).unwrap();
        let (mu, v) = marginal_moments(&s, &ModelSpec::intercept_slope(), &th).unwrap();
        assert!((mu[1] - 3.5).abs() < 1e-14);
        assert!((v[(0, 0)] - 0.7).abs() < 1e-14);
        assert!((v[(0, 1)] - 0.4).abs() < 1e-14);
        assert!((v[(1, 1)] - 0.6).abs() < 1e-14);
    }

    #[test]
    fn zero_g_gives_residual_covariance() {
        let s = SubjectData::new(
            "a",
            vec![Observation::observed("a", 0.0, 1.0), Observation::observed("a", 3.0, 2.0)],
        )
        .unwrap();
        let th = Theta::new(
            vec![0.0, 0.0],
            CovTheta::Cholesky(DMatrix::zeros(2, 2)),
            vec![0.3],
        );
        let (_, v) = marginal_moments(&s, &ModelSpec::intercept_slope(), &th).unwrap();
        assert!((v - DMatrix::identity(2, 2) * 0.09).amax() < 1e-15);
    }

    #[test]
    fn schur_complement_example() {
        let v = DMatrix::from_row_slice(2, 2, &[0.7, 0.5, 0.5, 0.7]);
        let mu = DVector::from_vec(vec![3.0, 3.0]);
        let (m, c) = conditional_moments(&mu, &v, &[0], &[1], &DVector::from_vec(vec![3.7])).unwrap();
        assert!((m[0] - 3.5).abs() < 1e-14);
        assert!((c[(0, 0)] - (0.7 - 0.25 / 0.7)).abs() < 1e-14);
    }

    #[test]
    fn diagonal_covariance_conditions_to_itself() {
        let v = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let mu = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let (m, c) = conditional_moments(&mu, &v, &[0], &[1, 2], &DVector::from_vec(vec![9.0])).unwrap();
        assert_eq!(m.as_slice(), &[2.0, 3.0]);
        assert_eq!(c, DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0])));
    }

    #[test]
    fn singular_observed_block_errors() {
        let v = DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let mu = DVector::zeros(3);
        assert!(conditional_moments(&mu, &v, &[0, 1], &[2], &DVector::zeros(2)).is_err());
    }

    #[test]
    fn single_censored_measure_reduces_to_probit() {
        let c = 2.5;
        let s = SubjectData::new("a", vec![Observation::censored("a", 0.0, c)]).unwrap();
        let d = Dataset::new(vec![s], vec![]).unwrap();
        let th = theta_ri(0.5, 0.2, 3.0);
        let expect = log_std_normal_cdf((c - 3.0) / 0.7f64.sqrt());
        let opt = LogLikOptions::default();
        assert!((loglik_marginal(&d, &ri_only(), &th, &opt).unwrap() - expect).abs() < 1e-14);
        assert!((loglik_agq(&d, &ri_only(), &th, &opt).unwrap() - expect).abs() < 1e-8);
        // The naive contribution is the density at the threshold.
        let naive = loglik_naive(&d, &ri_only(), &th).unwrap();
        let dens = log_std_normal_pdf((c - 3.0) / 0.7f64.sqrt()) - 0.5 * 0.7f64.ln();
        assert!((naive - dens).abs() < 1e-14);
    }

    #[test]
    fn all_censored_subject_uses_unconditional_rectangle() {
        let s = SubjectData::new(
            "a",
            vec![Observation::censored("a", 0.0, 3.0), Observation::censored("a", 1.0, 3.0)],
        )
        .unwrap();
        let d = Dataset::new(vec![s], vec![]).unwrap();
        let th = theta_ri(0.5, 0.5, 3.0);
        // Correlation 0.5 at the mean: orthant probability 1/3.
        let expect = (1.0f64 / 3.0).ln();
        let opt = LogLikOptions::default();
        assert!((loglik_marginal(&d, &ri_only(), &th, &opt).unwrap() - expect).abs() < 1e-6);
        assert!((loglik_agq(&d, &ri_only(), &th, &opt).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn zero_residual_sd_is_rejected() {
        let s = SubjectData::new("a", vec![Observation::observed("a", 0.0, 1.0)]).unwrap();
        let d = Dataset::new(vec![s], vec![]).unwrap();
        let th = theta_ri(0.5, 0.0, 3.0);
        assert!(loglik_marginal(&d, &ri_only(), &th, &LogLikOptions::default()).is_err());
    }

    #[test]
    fn degenerate_g_reduces_dimension() {
        // G = 0: the AGQ path has nothing to integrate and equals the
        // independent-residual likelihood.
        let s = SubjectData::new(
            "a",
            vec![Observation::observed("a", 0.0, 2.0), Observation::censored("a", 1.0, 2.8)],
        )
        .unwrap();
        let d = Dataset::new(vec![s], vec![]).unwrap();
        let th = Theta::new(vec![3.0, 0.0], CovTheta::Cholesky(DMatrix::zeros(2, 2)), vec![0.5]);
        let spec = ModelSpec::intercept_slope();
        let expect = log_std_normal_pdf(-2.0) - 0.5f64.ln() + log_std_normal_cdf(-0.4);
        let opt = LogLikOptions::default();
        assert!((loglik_agq(&d, &spec, &th, &opt).unwrap() - expect).abs() < 1e-12);
        assert!((loglik_marginal(&d, &spec, &th, &opt).unwrap() - expect).abs() < 1e-12);
        // Rank-one G: only the intercept varies.
        let l = DMatrix::from_row_slice(2, 2, &[0.6, 0.0, 0.0, 0.0]);
        let th = Theta::new(vec![3.0, 0.0], CovTheta::Cholesky(l), vec![0.5]);
        let a = loglik_agq(&d, &spec, &th, &opt).unwrap();
        let m = loglik_marginal(&d, &spec, &th, &opt).unwrap();
        assert!((a - m).abs() < 1e-6, "{a} vs {m}");
    }
}
