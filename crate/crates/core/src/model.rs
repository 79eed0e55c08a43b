//! Model templates and design-matrix construction.

use nalgebra::DMatrix;

use crate::data::{Observation, SubjectData};
use crate::error::{Error, Result};

/// One column of a design matrix, evaluated per observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Intercept,
    Time,
    /// Extra covariate by position in `Observation::covariates`.
    Covariate(usize),
    /// Intercept active only on rows of the given marker.
    MarkerIntercept(usize),
    /// Time slope active only on rows of the given marker.
    MarkerTime(usize),
}

impl Term {
    pub fn eval(&self, o: &Observation) -> Result<f64> {
        Ok(match *self {
            Term::Intercept => 1.0,
            Term::Time => o.time,
            Term::Covariate(k) => *o.covariates.get(k).ok_or_else(|| {
                Error::Dimension(format!(
                    "covariate {} requested but subject `{}` row has {}",
                    k + 1,
                    o.subject_id,
                    o.covariates.len()
                ))
            })?,
            Term::MarkerIntercept(m) => {
                if o.marker == m {
                    1.0
                } else {
                    0.0
                }
            }
            Term::MarkerTime(m) => {
                if o.marker == m {
                    o.time
                } else {
                    0.0
                }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Template {
    /// Fixed intercept and slope, random intercept.
    RandomIntercept,
    /// Fixed and random intercept and slope.
    InterceptSlope,
    /// Two markers, each with fixed and random intercept and slope, and a
    /// residual variance per marker.
    Bivariate,
    /// Fixed and random intercept only.
    InterceptOnly,
}

/// Parameterization of the random-effect covariance `G`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovParam {
    /// `G = L Lᵀ` with `L` lower triangular.
    Cholesky,
    /// Two variances and a correlation coefficient; `q = 2` only.
    Correlation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub fixed: Vec<Term>,
    pub random: Vec<Term>,
    pub n_strata: usize,
    pub cov_param: CovParam,
}

impl ModelSpec {
    pub fn new(
        fixed: Vec<Term>,
        random: Vec<Term>,
        n_strata: usize,
        cov_param: CovParam,
    ) -> Result<Self> {
        if fixed.is_empty() {
            return Err(Error::InvalidSpec("at least one fixed effect required".into()));
        }
        if random.is_empty() || random.len() > 4 {
            return Err(Error::InvalidSpec(format!(
                "between 1 and 4 random effects supported, got {}",
                random.len()
            )));
        }
        if n_strata == 0 {
            return Err(Error::InvalidSpec("n_strata must be at least 1".into()));
        }
        if cov_param == CovParam::Correlation && random.len() != 2 {
            return Err(Error::InvalidSpec(
                "correlation parameterization requires exactly two random effects".into(),
            ));
        }
        Ok(ModelSpec {
            fixed,
            random,
            n_strata,
            cov_param,
        })
    }

    /// Builds a template, appending `n_covariates` extra covariates to the
    /// fixed design.
    pub fn template(t: Template, n_covariates: usize, cov_param: CovParam) -> Result<Self> {
        use Term::*;
        let (mut fixed, random, strata) = match t {
            Template::InterceptOnly => (vec![Intercept], vec![Intercept], 1),
            Template::RandomIntercept => (vec![Intercept, Time], vec![Intercept], 1),
            Template::InterceptSlope => (vec![Intercept, Time], vec![Intercept, Time], 1),
            Template::Bivariate => {
                let terms = vec![
                    MarkerIntercept(1),
                    MarkerTime(1),
                    MarkerIntercept(2),
                    MarkerTime(2),
                ];
                (terms.clone(), terms, 2)
            }
        };
        fixed.extend((0..n_covariates).map(Covariate));
        ModelSpec::new(fixed, random, strata, cov_param)
    }

    /// Model (3): `Y = α + a + (β + b) t + e`, Cholesky-parameterized.
    pub fn intercept_slope() -> Self {
        Self::template(Template::InterceptSlope, 0, CovParam::Cholesky).expect("valid template")
    }

    pub fn p(&self) -> usize {
        self.fixed.len()
    }

    pub fn q(&self) -> usize {
        self.random.len()
    }

    /// Number of free parameters in `G`.
    pub fn n_cov_params(&self) -> usize {
        match self.cov_param {
            CovParam::Cholesky => self.q() * (self.q() + 1) / 2,
            CovParam::Correlation => 3,
        }
    }

    pub fn n_params(&self) -> usize {
        self.p() + self.n_cov_params() + self.n_strata
    }

    /// Residual stratum (0-based) of an observation.
    pub fn stratum(&self, o: &Observation) -> Result<usize> {
        if self.n_strata == 1 {
            return Ok(0);
        }
        if o.marker > self.n_strata {
            return Err(Error::Dimension(format!(
                "marker {} exceeds the model's {} strata",
                o.marker, self.n_strata
            )));
        }
        Ok(o.marker - 1)
    }

    /// Names of the fixed effects, matching the usual notation of the
    /// templates (`alpha`, `beta`, `alpha1`, ...).
    pub fn fixed_names(&self, covariate_names: &[String]) -> Vec<String> {
        self.fixed
            .iter()
            .map(|t| match *t {
                Term::Intercept => "alpha".to_string(),
                Term::Time => "beta".to_string(),
                Term::Covariate(k) => covariate_names
                    .get(k)
                    .cloned()
                    .unwrap_or_else(|| format!("x{}", k + 1)),
                Term::MarkerIntercept(m) => format!("alpha{m}"),
                Term::MarkerTime(m) => format!("beta{m}"),
            })
            .collect()
    }
}

/// Design matrices `(X_i, Z_i)` for one subject.
pub fn build_designs(s: &SubjectData, spec: &ModelSpec) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = s.len();
    let mut x = DMatrix::zeros(n, spec.p());
    let mut z = DMatrix::zeros(n, spec.q());
    for (j, o) in s.observations().iter().enumerate() {
        for (k, t) in spec.fixed.iter().enumerate() {
            x[(j, k)] = t.eval(o)?;
        }
        for (k, t) in spec.random.iter().enumerate() {
            z[(j, k)] = t.eval(o)?;
        }
    }
    Ok((x, z))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(o: Observation) -> SubjectData {
        SubjectData::new(o.subject_id.clone(), vec![o]).unwrap()
    }

    #[test]
    fn intercept_slope_rows() {
        let s = one(Observation::observed("a", 2.0, 1.0));
        let (x, z) = build_designs(&s, &ModelSpec::intercept_slope()).unwrap();
        assert_eq!(x.row(0).iter().copied().collect::<Vec<_>>(), [1.0, 2.0]);
        assert_eq!(z.row(0).iter().copied().collect::<Vec<_>>(), [1.0, 2.0]);
    }

    #[test]
    fn bivariate_marker_two_activates_its_columns() {
        let spec = ModelSpec::template(Template::Bivariate, 0, CovParam::Cholesky).unwrap();
        let s = one(Observation::observed("a", 1.0, 1.0).with_marker(2));
        let (x, z) = build_designs(&s, &spec).unwrap();
        assert_eq!(x.row(0).iter().copied().collect::<Vec<_>>(), [0.0, 0.0, 1.0, 1.0]);
        assert_eq!(z.row(0).iter().copied().collect::<Vec<_>>(), [0.0, 0.0, 1.0, 1.0]);
        assert_eq!(spec.n_cov_params(), 10);
        assert_eq!(spec.stratum(&s.observations()[0]).unwrap(), 1);
    }

    #[test]
    fn intercept_only() {
        let spec = ModelSpec::template(Template::InterceptOnly, 0, CovParam::Cholesky).unwrap();
        let s = one(Observation::observed("a", 7.5, 1.0));
        let (x, z) = build_designs(&s, &spec).unwrap();
        assert_eq!((x.nrows(), x.ncols(), x[(0, 0)]), (1, 1, 1.0));
        assert_eq!((z.nrows(), z.ncols(), z[(0, 0)]), (1, 1, 1.0));
    }

    #[test]
    fn short_covariates_is_dimension_error() {
        let spec = ModelSpec::template(Template::InterceptSlope, 2, CovParam::Cholesky).unwrap();
        let s = one(Observation::observed("a", 1.0, 1.0).with_covariates(vec![0.3]));
        assert!(matches!(build_designs(&s, &spec), Err(Error::Dimension(_))));
    }

    #[test]
    fn correlation_needs_two_random_effects() {
        assert!(ModelSpec::template(Template::RandomIntercept, 0, CovParam::Correlation).is_err());
        assert!(ModelSpec::template(Template::InterceptSlope, 0, CovParam::Correlation).is_ok());
    }
}
