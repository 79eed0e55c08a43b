//! Synthetic longitudinal datasets with left-censoring below a detection
//! limit.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Dataset, Observation, SubjectData};
use crate::error::{Error, Result};
use crate::gaussian::std_normal_cdf;
use crate::model::{CovParam, ModelSpec, Template, Term};
use crate::theta::Theta;

#[derive(Debug, Clone, PartialEq)]
pub enum Censoring {
    None,
    /// Same detection limit for every row.
    Threshold(f64),
    /// One detection limit per scheduled time.
    PerTime(Vec<f64>),
    /// Detection limit calibrated so this fraction of rows is censored in
    /// expectation.
    TargetFraction(f64),
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_subjects: usize,
    /// Measurement times; defaults to `0, 1, …, n_per_subject − 1`.
    pub times: Vec<f64>,
    pub spec: ModelSpec,
    pub truth: Theta,
    pub censoring: Censoring,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(n_subjects: usize, n_per_subject: usize, spec: ModelSpec, truth: Theta) -> Self {
        SimConfig {
            n_subjects,
            times: (0..n_per_subject).map(|t| t as f64).collect(),
            spec,
            truth,
            censoring: Censoring::None,
            seed: 0,
        }
    }

    /// 50 subjects, 5 visits, `α = 3, β = 0.5, σ1² = 0.5, σ12 = −0.1,
    /// σ2² = 0.1, σe² = 0.2`, about 15.2% of rows censored.
    pub fn reference_design(seed: u64) -> Self {
        SimConfig {
            censoring: Censoring::TargetFraction(0.152),
            seed,
            ..SimConfig::new(50, 5, ModelSpec::intercept_slope(), reference_truth(CovParam::Cholesky))
        }
    }
}

/// Intercept-and-slope truth used throughout the examples and tests.
pub fn reference_truth(cov_param: CovParam) -> Theta {
    let g = DMatrix::from_row_slice(2, 2, &[0.5, -0.1, -0.1, 0.1]);
    Theta::from_covariance(vec![3.0, 0.5], &g, vec![0.2f64.sqrt()], cov_param)
        .expect("reference covariance is positive definite")
}

/// Default truth for each template: the reference values, extended to the
/// bivariate model with a second marker correlated through its intercept.
pub fn template_truth(t: Template, cov_param: CovParam) -> Result<Theta> {
    let se = 0.2f64.sqrt();
    match t {
        Template::InterceptOnly => Theta::from_covariance(
            vec![3.0],
            &DMatrix::from_element(1, 1, 0.5),
            vec![se],
            cov_param,
        ),
        Template::RandomIntercept => Theta::from_covariance(
            vec![3.0, 0.5],
            &DMatrix::from_element(1, 1, 0.5),
            vec![se],
            cov_param,
        ),
        Template::InterceptSlope => Ok(reference_truth(cov_param)),
        Template::Bivariate => {
            #[rustfmt::skip]
            let g = DMatrix::from_row_slice(4, 4, &[
                0.5, -0.1, 0.2, 0.0,
                -0.1, 0.1, 0.0, 0.0,
                0.2, 0.0, 0.4, -0.05,
                0.0, 0.0, -0.05, 0.08,
            ]);
            Theta::from_covariance(vec![3.0, 0.5, 2.0, -0.3], &g, vec![se, 0.15f64.sqrt()], cov_param)
        }
    }
}

fn check_truth(spec: &ModelSpec, truth: &Theta) -> Result<()> {
    if spec.fixed.iter().any(|t| matches!(t, Term::Covariate(_))) {
        return Err(Error::InvalidSpec(
            "the simulator does not generate extra covariates".into(),
        ));
    }
    if truth.beta.len() != spec.p() || truth.q() != spec.q() || truth.sigma_e.len() != spec.n_strata {
        return Err(Error::Dimension("truth does not match the model".into()));
    }
    if truth.sigma_e.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(Error::InvalidParameter("residual SD must be nonnegative".into()));
    }
    let l = truth.g_factor();
    if l.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite("random-effect covariance".into()));
    }
    Ok(())
}

/// Rows of one subject: every time for every marker, markers interleaved.
fn schedule(spec: &ModelSpec, times: &[f64]) -> Vec<(f64, usize)> {
    times
        .iter()
        .flat_map(|&t| (1..=spec.n_strata).map(move |m| (t, m)))
        .collect()
}

fn row_terms(terms: &[Term], time: f64, marker: usize) -> Result<DVector<f64>> {
    let o = Observation::observed("", time, 0.0).with_marker(marker);
    Ok(DVector::from_iterator(
        terms.len(),
        terms.iter().map(|t| t.eval(&o)).collect::<Result<Vec<_>>>()?,
    ))
}

/// Detection limit at which the expected fraction of censored rows, averaged
/// over the schedule (and markers), equals `target`.
pub fn calibrate_threshold(truth: &Theta, spec: &ModelSpec, times: &[f64], target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "target censoring fraction {target} outside (0, 1)"
        )));
    }
    if times.is_empty() {
        return Err(Error::InvalidParameter("empty schedule".into()));
    }
    check_truth(spec, truth)?;
    let g = truth.g();
    let rows = schedule(spec, times);
    let mut moments = Vec::with_capacity(rows.len());
    for &(t, m) in &rows {
        let x = row_terms(&spec.fixed, t, m)?;
        let z = row_terms(&spec.random, t, m)?;
        let mean = x.dot(&truth.beta);
        let s = truth.sigma_e[m - 1];
        let var = (z.transpose() * &g * &z)[(0, 0)] + s * s;
        if !(var > 0.0) {
            return Err(Error::InvalidParameter(
                "cannot calibrate a threshold for zero-variance responses".into(),
            ));
        }
        moments.push((mean, var.sqrt()));
    }
    let frac = |c: f64| {
        moments
            .iter()
            .map(|&(mu, sd)| std_normal_cdf((c - mu) / sd))
            .sum::<f64>()
            / moments.len() as f64
    };
    let lo0 = moments.iter().map(|&(mu, sd)| mu - 40.0 * sd).fold(f64::INFINITY, f64::min);
    let hi0 = moments.iter().map(|&(mu, sd)| mu + 40.0 * sd).fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (lo0, hi0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 * (1.0 + mid.abs()) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Simulated dataset plus the uncensored response of every row, in dataset
/// row order. The latent values never reach the written file.
pub fn simulate_with_latent(cfg: &SimConfig) -> Result<(Dataset, Vec<f64>)> {
    if cfg.n_subjects == 0 {
        return Err(Error::InvalidParameter("n_subjects must be at least 1".into()));
    }
    if cfg.times.is_empty() {
        return Err(Error::InvalidParameter("at least one measurement time required".into()));
    }
    check_truth(&cfg.spec, &cfg.truth)?;
    let thresholds: Option<Vec<f64>> = match &cfg.censoring {
        Censoring::None => None,
        Censoring::Threshold(c) => Some(vec![*c; cfg.times.len()]),
        Censoring::PerTime(cs) => {
            if cs.len() != cfg.times.len() {
                return Err(Error::Dimension(format!(
                    "{} per-time thresholds for {} times",
                    cs.len(),
                    cfg.times.len()
                )));
            }
            Some(cs.clone())
        }
        Censoring::TargetFraction(f) => {
            let c = calibrate_threshold(&cfg.truth, &cfg.spec, &cfg.times, *f)?;
            Some(vec![c; cfg.times.len()])
        }
    };
    let spec = &cfg.spec;
    let l = cfg.truth.g_factor();
    let q = spec.q();
    let rows = schedule(spec, &cfg.times);
    let designs = rows
        .iter()
        .map(|&(t, m)| Ok((row_terms(&spec.fixed, t, m)?, row_terms(&spec.random, t, m)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut subjects = Vec::with_capacity(cfg.n_subjects);
    let mut latent = Vec::with_capacity(cfg.n_subjects * rows.len());
    for i in 0..cfg.n_subjects {
        let id = (i + 1).to_string();
        let std: DVector<f64> = DVector::from_fn(q, |_, _| StandardNormal.sample(&mut rng));
        let gamma = &l * std;
        let mut obs = Vec::with_capacity(rows.len());
        for (k, (&(t, m), (x, z))) in rows.iter().zip(&designs).enumerate() {
            let e: f64 = StandardNormal.sample(&mut rng);
            let y = x.dot(&cfg.truth.beta) + z.dot(&gamma) + cfg.truth.sigma_e[m - 1] * e;
            latent.push(y);
            let time_index = k / spec.n_strata;
            let o = match &thresholds {
                Some(c) if y < c[time_index] => Observation::censored(id.clone(), t, c[time_index]),
                Some(c) => {
                    let mut o = Observation::observed(id.clone(), t, y);
                    o.threshold = c[time_index];
                    o
                }
                None => Observation::observed(id.clone(), t, y),
            };
            obs.push(o.with_marker(m));
        }
        subjects.push(SubjectData::new(id, obs)?);
    }
    Ok((Dataset::new(subjects, Vec::new())?, latent))
}

/// Simulates a dataset; rows below the detection limit are flagged censored
/// and store the limit as their response.
pub fn simulate(cfg: &SimConfig) -> Result<Dataset> {
    Ok(simulate_with_latent(cfg)?.0)
}


#[cfg(test)]
mod template_tests {
    use super::*;

    #[test]
    fn every_template_truth_is_valid() {
        for t in [
            Template::InterceptOnly,
            Template::RandomIntercept,
            Template::InterceptSlope,
            Template::Bivariate,
        ] {
            let spec = ModelSpec::template(t, 0, CovParam::Cholesky).unwrap();
            let th = template_truth(t, CovParam::Cholesky).unwrap();
            th.validate(&spec).unwrap();
            assert!(th.g().cholesky().is_some(), "{t:?}");
        }
    }
}
