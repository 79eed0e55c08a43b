//! Globally adaptive subregion integration over the unit cube.
//!
//! One dimension uses a 15-point Gauss–Kronrod pair; two or more dimensions
//! use the degree-7/degree-5 Genz–Malik embedded rule with fourth-difference
//! axis selection. Regions are kept in a max-heap keyed on their error
//! estimate and the worst one is bisected until the caller's acceptance
//! test passes or the evaluation budget runs out.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

#[derive(Debug, Clone, Copy)]
pub(crate) struct CubatureOutcome {
    pub value: f64,
    pub error: f64,
    pub evals: usize,
    pub converged: bool,
}

struct Region {
    center: Vec<f64>,
    half: Vec<f64>,
    value: f64,
    error: f64,
    split_axis: usize,
}

impl PartialEq for Region {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Region {}
impl PartialOrd for Region {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Region {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

trait Rule {
    fn evals(&self) -> usize;
    fn apply(&self, f: &mut dyn FnMut(&[f64]) -> f64, center: &[f64], half: &[f64]) -> (f64, f64, usize);
}

struct GaussKronrod15;

impl Rule for GaussKronrod15 {
    fn evals(&self) -> usize {
        15
    }

    fn apply(&self, f: &mut dyn FnMut(&[f64]) -> f64, center: &[f64], half: &[f64]) -> (f64, f64, usize) {
        let (c, h) = (center[0], half[0]);
        let fc = f(&[c]);
        let mut kronrod = WGK[7] * fc;
        let mut gauss = WG[3] * fc;
        for k in 0..7 {
            let pair = f(&[c - h * XGK[k]]) + f(&[c + h * XGK[k]]);
            kronrod += WGK[k] * pair;
            if k % 2 == 1 {
                gauss += WG[k / 2] * pair;
            }
        }
        (kronrod * h, ((kronrod - gauss) * h).abs(), 0)
    }
}

struct GenzMalik {
    dim: usize,
    w7: [f64; 5],
    w5: [f64; 4],
}

const GM_L2: f64 = 0.358_568_582_800_318_1; // sqrt(9/70)
const GM_L3: f64 = 0.948_683_298_050_513_8; // sqrt(9/10)
const GM_L4: f64 = 0.948_683_298_050_513_8; // sqrt(9/10)
const GM_L5: f64 = 0.688_247_201_611_685_3; // sqrt(9/19)

impl GenzMalik {
    fn new(dim: usize) -> Self {
        let d = dim as f64;
        let w7 = [
            (12824.0 - 9120.0 * d + 400.0 * d * d) / 19683.0,
            980.0 / 6561.0,
            (1820.0 - 400.0 * d) / 19683.0,
            200.0 / 19683.0,
            6859.0 / 19683.0 / 2f64.powi(dim as i32),
        ];
        let w5 = [
            (729.0 - 950.0 * d + 50.0 * d * d) / 729.0,
            245.0 / 486.0,
            (265.0 - 100.0 * d) / 1458.0,
            25.0 / 729.0,
        ];
        GenzMalik { dim, w7, w5 }
    }
}

impl Rule for GenzMalik {
    fn evals(&self) -> usize {
        let d = self.dim;
        (1 << d) + 2 * d * d + 2 * d + 1
    }

    fn apply(&self, f: &mut dyn FnMut(&[f64]) -> f64, center: &[f64], half: &[f64]) -> (f64, f64, usize) {
        let d = self.dim;
        let mut x = center.to_vec();
        let f0 = f(&x);
        let mut s2 = 0.0;
        let mut s3 = 0.0;
        let mut best_axis = 0;
        let mut best_diff = -1.0;
        let ratio = (GM_L2 / GM_L3).powi(2);
        for i in 0..d {
            x[i] = center[i] - GM_L2 * half[i];
            let a = f(&x);
            x[i] = center[i] + GM_L2 * half[i];
            let b = f(&x);
            x[i] = center[i] - GM_L3 * half[i];
            let c = f(&x);
            x[i] = center[i] + GM_L3 * half[i];
            let e = f(&x);
            x[i] = center[i];
            s2 += a + b;
            s3 += c + e;
            let diff = (a + b - 2.0 * f0 - ratio * (c + e - 2.0 * f0)).abs();
            if diff > best_diff {
                best_diff = diff;
                best_axis = i;
            }
        }
        let mut s4 = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                for (si, sj) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                    x[i] = center[i] + si * GM_L4 * half[i];
                    x[j] = center[j] + sj * GM_L4 * half[j];
                    s4 += f(&x);
                }
                x[i] = center[i];
                x[j] = center[j];
            }
        }
        let mut s5 = 0.0;
        for mask in 0..(1usize << d) {
            for (i, xi) in x.iter_mut().enumerate() {
                let sign = if mask >> i & 1 == 1 { 1.0 } else { -1.0 };
                *xi = center[i] + sign * GM_L5 * half[i];
            }
            s5 += f(&x);
        }
        let volume: f64 = half.iter().map(|h| 2.0 * h).product();
        let deg7 = self.w7[0] * f0 + self.w7[1] * s2 + self.w7[2] * s3 + self.w7[3] * s4 + self.w7[4] * s5;
        let deg5 = self.w5[0] * f0 + self.w5[1] * s2 + self.w5[2] * s3 + self.w5[3] * s4;
        (volume * deg7, (volume * (deg7 - deg5)).abs(), best_axis)
    }
}

/// Integrates `f` over `[0,1]^dim` (`dim ≥ 1`).
///
/// `accept(value, error)` decides when the global estimate is good enough.
pub(crate) fn integrate_unit_cube(
    dim: usize,
    f: &mut dyn FnMut(&[f64]) -> f64,
    accept: &dyn Fn(f64, f64) -> bool,
    max_evals: usize,
) -> CubatureOutcome {
    let rule: Box<dyn Rule> = if dim == 1 {
        Box::new(GaussKronrod15)
    } else {
        Box::new(GenzMalik::new(dim))
    };
    let per_region = rule.evals();
    let mut heap = BinaryHeap::new();
    let center = vec![0.5; dim];
    let half = vec![0.5; dim];
    let (value, error, split_axis) = rule.apply(f, &center, &half);
    heap.push(Region {
        center,
        half,
        value,
        error,
        split_axis,
    });
    let mut evals = per_region;
    let mut total = value;
    let mut total_err = error;
    // A single region's error estimate is too easily fooled.
    let min_evals = (2 * dim + 1) * per_region;
    loop {
        if evals >= min_evals && accept(total, total_err) {
            return CubatureOutcome {
                value: total,
                error: total_err,
                evals,
                converged: true,
            };
        }
        if evals + 2 * per_region > max_evals {
            return CubatureOutcome {
                value: total,
                error: total_err,
                evals,
                converged: false,
            };
        }
        let worst = heap.pop().expect("heap never empties");
        let axis = worst.split_axis;
        let mut half = worst.half.clone();
        half[axis] *= 0.5;
        let mut sum = 0.0;
        let mut err_sum = 0.0;
        for sign in [-1.0, 1.0] {
            let mut center = worst.center.clone();
            center[axis] += sign * half[axis];
            let (value, error, split_axis) = rule.apply(f, &center, &half);
            sum += value;
            err_sum += error;
            heap.push(Region {
                center,
                half: half.clone(),
                value,
                error,
                split_axis,
            });
        }
        evals += 2 * per_region;
        // Re-sum occasionally to keep the running totals from drifting.
        if heap.len() % 64 == 0 {
            total = heap.iter().map(|r| r.value).sum();
            total_err = heap.iter().map(|r| r.error).sum();
        } else {
            total += sum - worst.value;
            total_err += err_sum - worst.error;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_polynomial_is_exact() {
        let out = integrate_unit_cube(1, &mut |x| x[0].powi(5), &|_, e| e < 1e-14, 10_000);
        assert!((out.value - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn genz_malik_degree_seven_exact() {
        for d in 2..=5 {
            let out = integrate_unit_cube(
                d,
                &mut |x| x[0].powi(4) * x[1].powi(3),
                &|_, _| true,
                100_000,
            );
            assert!((out.value - 1.0 / 20.0).abs() < 1e-14, "dim {d}: {}", out.value);
        }
    }

    #[test]
    fn adapts_to_peaked_integrand() {
        let exact = {
            // ∫∫ exp(-50((x-.3)²+(y-.6)²)) over the unit square
            let g = |a: f64| {
                let s = 50f64.sqrt();
                (std::f64::consts::PI.sqrt() / (2.0 * s))
                    * (statrs::function::erf::erf(s * (1.0 - a)) + statrs::function::erf::erf(s * a))
            };
            g(0.3) * g(0.6)
        };
        let out = integrate_unit_cube(
            2,
            &mut |x| (-50.0 * ((x[0] - 0.3).powi(2) + (x[1] - 0.6).powi(2))).exp(),
            &|_, e| e < 1e-10,
            1_000_000,
        );
        assert!(out.converged);
        assert!((out.value - exact).abs() < 1e-9);
    }
}
