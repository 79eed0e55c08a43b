//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use censlmm::data::{Dataset, Observation, SubjectData};
use censlmm::model::{CovParam, ModelSpec, Template};
use censlmm::theta::{CovTheta, Theta};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

/// Gaussian log-likelihood of fully observed data through the determinant
/// lemma and the Woodbury identity, without ever forming `V`'s factor.
pub fn closed_form_loglik(d: &Dataset, spec: &ModelSpec, th: &Theta) -> f64 {
    let g = th.g();
    let q = spec.q();
    let mut total = 0.0;
    for s in d.subjects() {
        let (x, z) = censlmm::model::build_designs(s, spec).unwrap();
        let obs = s.observations();
        let n = obs.len();
        let rinv: Vec<f64> = obs
            .iter()
            .map(|o| {
                let sd = th.sigma_e[spec.stratum(o).unwrap()];
                1.0 / (sd * sd)
            })
            .collect();
        let y = DVector::from_iterator(n, obs.iter().map(|o| o.response));
        let r = &y - &x * &th.beta;
        let rinv_z = DMatrix::from_fn(n, q, |i, j| rinv[i] * z[(i, j)]);
        let m = z.transpose() * &rinv_z;
        let a = DMatrix::<f64>::identity(q, q) + &g * &m;
        let lu = a.clone().lu();
        let log_det = rinv.iter().map(|v| -v.ln()).sum::<f64>() + lu.determinant().ln();
        let rinv_r = DVector::from_iterator(n, (0..n).map(|i| rinv[i] * r[i]));
        let zt_rinv_r = z.transpose() * &rinv_r;
        let inner = lu.solve(&(&g * &zt_rinv_r)).unwrap();
        let quad = r.dot(&rinv_r) - zt_rinv_r.dot(&inner);
        total += -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad);
    }
    total
}

/// Plain Monte Carlo estimate of `Pr(Y ≤ upper)`.
pub fn mc_mvn_prob(mean: &DVector<f64>, cov: &DMatrix<f64>, upper: &DVector<f64>, n: usize, seed: u64) -> f64 {
    let l = cov.clone().cholesky().unwrap().l();
    let m = mean.len();
    let mut r = rng(seed);
    let mut z = DVector::zeros(m);
    let mut hits = 0usize;
    for _ in 0..n {
        for v in z.iter_mut() {
            *v = normal(&mut r);
        }
        let y = mean + &l * &z;
        if (0..m).all(|i| y[i] <= upper[i]) {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}

pub fn spec_for(q: usize, cov_param: CovParam) -> ModelSpec {
    let t = if q == 1 { Template::RandomIntercept } else { Template::InterceptSlope };
    ModelSpec::template(t, 0, cov_param).unwrap()
}

/// Random valid parameters: fixed effects in [-1, 3], `G` with correlation
/// at most 0.8 in absolute value, residual SD in [0.3, 1.2].
pub fn random_theta(r: &mut ChaCha8Rng, spec: &ModelSpec) -> Theta {
    let beta: Vec<f64> = (0..spec.p()).map(|_| r.random_range(-1.0..3.0)).collect();
    let q = spec.q();
    let sds: Vec<f64> = (0..q).map(|k| r.random_range(0.2..1.0) / (1.0 + k as f64)).collect();
    let rho = r.random_range(-0.8..0.8);
    let mut g = DMatrix::from_fn(q, q, |i, j| if i == j { sds[i] * sds[i] } else { 0.0 });
    if q == 2 {
        g[(0, 1)] = rho * sds[0] * sds[1];
        g[(1, 0)] = g[(0, 1)];
    }
    let sigma_e = (0..spec.n_strata).map(|_| r.random_range(0.3..1.2)).collect();
    Theta::from_covariance(beta, &g, sigma_e, spec.cov_param).unwrap()
}

/// Dataset drawn from `truth` with 1..=`max_n` subjects of 1..=`max_len`
/// visits at jittered times. Rows below `threshold` are censored there.
pub fn random_dataset(
    r: &mut ChaCha8Rng,
    spec: &ModelSpec,
    truth: &Theta,
    max_n: usize,
    max_len: usize,
    threshold: Option<f64>,
) -> Dataset {
    let n = r.random_range(1..=max_n);
    let l = truth.g_factor();
    let q = spec.q();
    let mut subjects = Vec::new();
    for i in 0..n {
        let len = r.random_range(1..=max_len);
        let u = DVector::from_iterator(q, (0..q).map(|_| normal(r)));
        let gamma = &l * u;
        let mut obs = Vec::new();
        for j in 0..len {
            let t = j as f64 + r.random_range(-0.3..0.3);
            let mut mean = truth.beta[0] + gamma[0];
            if spec.p() > 1 {
                mean += truth.beta[1] * t;
            }
            if q > 1 {
                mean += gamma[1] * t;
            }
            let y = mean + truth.sigma_e[0] * normal(r);
            let id = format!("s{i}");
            obs.push(match threshold {
                Some(c) if y < c => Observation::censored(id, t, c),
                _ => Observation::observed(id, t, y),
            });
        }
        subjects.push(SubjectData::new(format!("s{i}"), obs).unwrap());
    }
    Dataset::new(subjects, Vec::new()).unwrap()
}

pub fn cholesky_theta(beta: Vec<f64>, l: DMatrix<f64>, sigma_e: Vec<f64>) -> Theta {
    Theta::new(beta, CovTheta::Cholesky(l), sigma_e)
}
