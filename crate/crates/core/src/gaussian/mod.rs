//! Scalar and multivariate normal primitives.

mod cubature;
mod mvn;
mod normal;

pub use mvn::{mvn_rect_prob, MvnMethod, MvnProblem, ProbResult, ProbStatus, MAX_MVN_DIM};
pub use normal::{
    log_std_normal_cdf, log_std_normal_pdf, std_normal_cdf, std_normal_pdf, std_normal_quantile,
    LN_SQRT_2PI,
};
