//! Oracles shared by the integration tests. Nothing here calls into the
//! crate's numerics, so agreement is evidence rather than tautology.

#![allow(dead_code)]

use dpulr::numkit::Matrix;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};

/// A rational probability `num/den`.
pub fn rational(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// Exact `P(X = k)` for every `k ≤ k_max`, `X ~ Bin(n, p)`.
///
/// With `p = a/b` every term is an integer `C(n,k)·a^k·(b−a)^(n−k)` over the
/// common denominator `b^n`, so the recurrence runs on integers and divides
/// exactly.
pub fn binom_pmfs(k_max: u64, n: u64, p: &BigRational) -> Vec<BigRational> {
    let a = p.numer().clone();
    let b = p.denom().clone();
    let c = &b - &a;
    let den = num_traits::pow(b, n as usize);
    let mut term = num_traits::pow(c.clone(), n as usize);
    let mut out = Vec::with_capacity(k_max as usize + 1);
    for k in 0..=k_max.min(n) {
        out.push(BigRational::new(term.clone(), den.clone()));
        if k < n {
            term = term * BigInt::from(n - k) * &a / (BigInt::from(k + 1) * &c);
        }
    }
    out
}

pub fn binom_pmf(k: u64, n: u64, p: &BigRational) -> BigRational {
    binom_pmfs(k, n, p).pop().unwrap()
}

pub fn binom_cdf(k: u64, n: u64, p: &BigRational) -> BigRational {
    binom_pmfs(k, n, p).into_iter().fold(BigRational::zero(), |a, b| a + b)
}

/// `q·pmf(N_B−1)/(1 − cdf(N_B−1))`, exactly.
pub fn impairment_exact(q: &BigRational, n_b: u64, n_bar: u64) -> BigRational {
    let pmfs = binom_pmfs(n_b - 1, n_bar, q);
    let cdf = pmfs.iter().fold(BigRational::zero(), |a, b| a + b);
    q * pmfs.last().unwrap() / (BigRational::one() - cdf)
}

/// Correctly scaled conversion that survives values far outside the `f64`
/// exponent range of numerator and denominator separately.
pub fn to_f64(x: &BigRational) -> f64 {
    if x.is_zero() {
        return 0.0;
    }
    let (n, d) = (x.numer(), x.denom());
    let shift = d.bits() as i64 - n.bits() as i64 + 64;
    let scaled = if shift >= 0 {
        (n << shift as usize) / d
    } else {
        n / (d << (-shift) as usize)
    };
    scaled.to_f64().unwrap() * 2f64.powi(-shift as i32)
}

/// Natural log of a positive rational.
pub fn ln(x: &BigRational) -> f64 {
    let (n, d) = (x.numer(), x.denom());
    let shift = d.bits() as i64 - n.bits() as i64 + 64;
    let scaled = if shift >= 0 {
        (n << shift as usize) / d
    } else {
        n / (d << (-shift) as usize)
    };
    scaled.to_f64().unwrap().ln() - shift as f64 * std::f64::consts::LN_2
}

/// Number of negative eigenvalues of `a − tI`, by Sylvester's law of inertia
/// applied to a symmetric `LDLᵀ` elimination.
fn negative_inertia(a: &Matrix, t: f64) -> usize {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| a.get(i, j) - if i == j { t } else { 0.0 }).collect())
        .collect();
    let mut negatives = 0;
    for k in 0..n {
        let mut piv = m[k][k];
        if piv == 0.0 {
            piv = -f64::EPSILON * (1.0 + t.abs());
        }
        if piv < 0.0 {
            negatives += 1;
        }
        for i in k + 1..n {
            let f = m[i][k] / piv;
            for j in k + 1..n {
                m[i][j] -= f * m[k][j];
            }
        }
    }
    negatives
}

/// Smallest eigenvalue of a symmetric matrix by inertia bisection.
pub fn min_eig_bisect(a: &Matrix) -> f64 {
    let n = a.rows();
    let radius = (0..n)
        .map(|i| (0..n).map(|j| a.get(i, j).abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let (mut lo, mut hi) = (-radius - 1.0, radius + 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if negative_inertia(a, mid) >= 1 {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi - lo <= 1e-15 * hi.abs().max(lo.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Sample covariance of row vectors accumulated by the caller.
pub struct CovAccumulator {
    n: usize,
    d: usize,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl CovAccumulator {
    pub fn new(d: usize) -> Self {
        Self {
            n: 0,
            d,
            sum: vec![0.0; d],
            sq: vec![0.0; d * d],
        }
    }

    pub fn push(&mut self, x: &[f64]) {
        self.n += 1;
        for i in 0..self.d {
            self.sum[i] += x[i];
            for j in 0..self.d {
                self.sq[i * self.d + j] += x[i] * x[j];
            }
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n as f64).collect()
    }

    pub fn covariance(&self) -> Matrix {
        let n = self.n as f64;
        let m = self.mean();
        Matrix::from_fn(self.d, self.d, |i, j| (self.sq[i * self.d + j] - n * m[i] * m[j]) / (n - 1.0))
    }
}
