//! Model parameters and their unconstrained optimization coordinates.
//!
//! Unconstrained layout: fixed effects, then the covariance block, then one
//! residual SD per stratum.
//!
//! * Cholesky form: the lower triangle of `L` row by row. Diagonal entries
//!   are reflected (`|x|`), so every vector maps to a valid `L`.
//! * Correlation form: `σ1`, `σ2` (reflected) and `atanh ρ`.
//! * Residual SDs are reflected as well.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{CovParam, ModelSpec};

#[derive(Debug, Clone, PartialEq)]
pub enum CovTheta {
    /// Lower-triangular factor with `G = L Lᵀ`.
    Cholesky(DMatrix<f64>),
    Correlation { var1: f64, var2: f64, rho: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub beta: DVector<f64>,
    pub cov: CovTheta,
    /// Residual SD per stratum.
    pub sigma_e: Vec<f64>,
}

/// Lower-triangular factor of a positive semi-definite matrix. Zero pivots
/// yield zero columns.
pub fn psd_cholesky(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = g.nrows();
    if g.ncols() != q {
        return Err(Error::Dimension("covariance must be square".into()));
    }
    let scale = g.diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs())).max(1e-300);
    let eps = 1e-12 * scale;
    let mut l = DMatrix::zeros(q, q);
    for j in 0..q {
        for i in 0..j {
            if (g[(i, j)] - g[(j, i)]).abs() > 1e-10 * scale {
                return Err(Error::InvalidParameter("covariance is not symmetric".into()));
            }
        }
        let d = g[(j, j)] - (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum::<f64>();
        if d < -eps {
            return Err(Error::NotPositiveDefinite(format!(
                "covariance has negative pivot {d:e} at {j}"
            )));
        }
        if d <= eps {
            for i in (j + 1)..q {
                let r = g[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
                if r.abs() > 1e-8 * scale {
                    return Err(Error::NotPositiveDefinite(
                        "covariance is not positive semi-definite".into(),
                    ));
                }
            }
            continue;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..q {
            let r = g[(i, j)] - (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum::<f64>();
            l[(i, j)] = r / djj;
        }
    }
    Ok(l)
}

impl Theta {
    pub fn new(beta: Vec<f64>, cov: CovTheta, sigma_e: Vec<f64>) -> Self {
        Theta {
            beta: DVector::from_vec(beta),
            cov,
            sigma_e,
        }
    }

    /// Builds parameters from a covariance matrix `G`, using the requested
    /// parameterization.
    pub fn from_covariance(
        beta: Vec<f64>,
        g: &DMatrix<f64>,
        sigma_e: Vec<f64>,
        cov_param: CovParam,
    ) -> Result<Self> {
        let cov = match cov_param {
            CovParam::Cholesky => CovTheta::Cholesky(psd_cholesky(g)?),
            CovParam::Correlation => {
                if g.nrows() != 2 || g.ncols() != 2 {
                    return Err(Error::InvalidSpec(
                        "correlation parameterization requires a 2x2 covariance".into(),
                    ));
                }
                psd_cholesky(g)?;
                let (v1, v2, c) = (g[(0, 0)], g[(1, 1)], g[(1, 0)]);
                let rho = if v1 > 0.0 && v2 > 0.0 { c / (v1 * v2).sqrt() } else { 0.0 };
                if rho.abs() >= 1.0 {
                    return Err(Error::InvalidParameter(format!(
                        "correlation {rho} outside (-1, 1)"
                    )));
                }
                CovTheta::Correlation {
                    var1: v1,
                    var2: v2,
                    rho,
                }
            }
        };
        Ok(Theta::new(beta, cov, sigma_e))
    }

    pub fn q(&self) -> usize {
        match &self.cov {
            CovTheta::Cholesky(l) => l.nrows(),
            CovTheta::Correlation { .. } => 2,
        }
    }

    /// Lower-triangular `L` with `G = L Lᵀ`.
    pub fn g_factor(&self) -> DMatrix<f64> {
        match &self.cov {
            CovTheta::Cholesky(l) => l.clone(),
            &CovTheta::Correlation { var1, var2, rho } => {
                let (s1, s2) = (var1.max(0.0).sqrt(), var2.max(0.0).sqrt());
                DMatrix::from_row_slice(
                    2,
                    2,
                    &[s1, 0.0, rho * s2, s2 * (1.0 - rho * rho).max(0.0).sqrt()],
                )
            }
        }
    }

    /// Random-effect covariance `G`.
    pub fn g(&self) -> DMatrix<f64> {
        match &self.cov {
            CovTheta::Cholesky(l) => l * l.transpose(),
            &CovTheta::Correlation { var1, var2, rho } => {
                let c = rho * (var1 * var2).sqrt();
                DMatrix::from_row_slice(2, 2, &[var1, c, c, var2])
            }
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.beta.len() != spec.p() {
            return Err(Error::Dimension(format!(
                "expected {} fixed effects, got {}",
                spec.p(),
                self.beta.len()
            )));
        }
        if self.beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidParameter("non-finite fixed effect".into()));
        }
        match (&self.cov, spec.cov_param) {
            (CovTheta::Cholesky(l), CovParam::Cholesky) => {
                if l.nrows() != spec.q() || l.ncols() != spec.q() {
                    return Err(Error::Dimension(format!(
                        "expected {q}x{q} covariance factor",
                        q = spec.q()
                    )));
                }
                for i in 0..l.nrows() {
                    if l[(i, i)] < 0.0 {
                        return Err(Error::InvalidParameter(
                            "covariance factor has a negative diagonal".into(),
                        ));
                    }
                    for j in 0..l.ncols() {
                        if !l[(i, j)].is_finite() || (j > i && l[(i, j)] != 0.0) {
                            return Err(Error::InvalidParameter(
                                "covariance factor must be finite and lower triangular".into(),
                            ));
                        }
                    }
                }
            }
            (&CovTheta::Correlation { var1, var2, rho }, CovParam::Correlation) => {
                if !(var1 >= 0.0 && var2 >= 0.0 && var1.is_finite() && var2.is_finite()) {
                    return Err(Error::InvalidParameter("variances must be nonnegative".into()));
                }
                if !(rho.abs() < 1.0) {
                    return Err(Error::InvalidParameter(format!(
                        "correlation {rho} outside (-1, 1)"
                    )));
                }
            }
            _ => {
                return Err(Error::InvalidSpec(
                    "parameter form does not match the model's covariance parameterization".into(),
                ))
            }
        }
        if self.sigma_e.len() != spec.n_strata {
            return Err(Error::Dimension(format!(
                "expected {} residual SDs, got {}",
                spec.n_strata,
                self.sigma_e.len()
            )));
        }
        if self.sigma_e.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter(
                "residual SD must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut x: Vec<f64> = self.beta.iter().copied().collect();
        match &self.cov {
            CovTheta::Cholesky(l) => {
                for i in 0..l.nrows() {
                    for j in 0..=i {
                        x.push(l[(i, j)]);
                    }
                }
            }
            &CovTheta::Correlation { var1, var2, rho } => {
                x.push(var1.sqrt());
                x.push(var2.sqrt());
                x.push(rho.atanh());
            }
        }
        x.extend(self.sigma_e.iter().copied());
        x
    }

    pub fn from_unconstrained(spec: &ModelSpec, x: &[f64]) -> Result<Self> {
        if x.len() != spec.n_params() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                spec.n_params(),
                x.len()
            )));
        }
        let p = spec.p();
        let beta = x[..p].to_vec();
        let mut k = p;
        let cov = match spec.cov_param {
            CovParam::Cholesky => {
                let q = spec.q();
                let mut l = DMatrix::zeros(q, q);
                for i in 0..q {
                    for j in 0..=i {
                        l[(i, j)] = if i == j { x[k].abs() } else { x[k] };
                        k += 1;
                    }
                }
                CovTheta::Cholesky(l)
            }
            CovParam::Correlation => {
                let c = CovTheta::Correlation {
                    var1: x[k] * x[k],
                    var2: x[k + 1] * x[k + 1],
                    rho: x[k + 2].tanh(),
                };
                k += 3;
                c
            }
        };
        let sigma_e = x[k..].iter().map(|s| s.abs()).collect();
        Ok(Theta::new(beta, cov, sigma_e))
    }

    /// Same model expressed in another covariance parameterization.
    pub fn reparameterize(&self, cov_param: CovParam) -> Result<Theta> {
        Theta::from_covariance(
            self.beta.iter().copied().collect(),
            &self.g(),
            self.sigma_e.clone(),
            cov_param,
        )
    }

    /// Reported scale: fixed effects, lower triangle of `G` row by row,
    /// residual variances, residual SDs.
    pub fn natural(&self) -> Vec<f64> {
        let g = self.g();
        let mut v: Vec<f64> = self.beta.iter().copied().collect();
        for i in 0..g.nrows() {
            for j in 0..=i {
                v.push(g[(i, j)]);
            }
        }
        v.extend(self.sigma_e.iter().map(|s| s * s));
        v.extend(self.sigma_e.iter().copied());
        v
    }
}

/// Names matching [`Theta::natural`].
pub fn natural_names(spec: &ModelSpec, covariate_names: &[String]) -> Vec<String> {
    let mut names = spec.fixed_names(covariate_names);
    let q = spec.q();
    match q {
        1 => names.push("sigma1_sq".into()),
        2 => names.extend(["sigma1_sq".into(), "sigma12".into(), "sigma2_sq".into()]),
        _ => {
            for i in 1..=q {
                names.extend((1..=i).map(|j| format!("g{i}{j}")));
            }
        }
    }
    if spec.n_strata == 1 {
        names.extend(["sigma_e_sq".into(), "sigma_e".into()]);
    } else {
        names.extend((1..=spec.n_strata).map(|k| format!("sigma_e{k}_sq")));
        names.extend((1..=spec.n_strata).map(|k| format!("sigma_e{k}")));
    }
    names
}
