//! Binomial probabilities in log space.
//!
//! The mass function uses Loader's saddle-point form: Stirling remainders of
//! `ln Γ` plus the deviance term `bd0`, which keeps full relative precision
//! far into the tails where the naive product of powers underflows. Tail sums
//! are taken directly over the dominant terms with a log-sum-exp, so no
//! probability is ever formed as `1 - (something close to 1)`.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Terms further than this many nats below the largest one are dropped from
/// tail sums; their total is below `1e-19` of the result.
const TAIL_CUTOFF: f64 = 45.0;

/// `ln(exp(a_1) + ... + exp(a_n))`, `-inf` for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `ln [C(n, k) qᵏ (1-q)ⁿ⁻ᵏ]`.
pub fn log_binom_pmf(k: u64, n: u64, q: f64) -> Result<f64> {
    check(k, n, q)?;
    Ok(log_pmf_unchecked(k, n, q))
}

/// `ln P(X > k)` for `X ~ Binomial(n, q)`.
pub fn log_binom_sf(k: u64, n: u64, q: f64) -> Result<f64> {
    check(k, n, q)?;
    if k == n {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(log_range_sum(k + 1, n, n, q))
}

/// `ln P(X <= k)` for `X ~ Binomial(n, q)`.
pub fn log_binom_cdf(k: u64, n: u64, q: f64) -> Result<f64> {
    check(k, n, q)?;
    if k == n {
        return Ok(0.0);
    }
    Ok(log_range_sum(0, k, n, q))
}

fn check(k: u64, n: u64, q: f64) -> Result<()> {
    if k > n {
        return Err(Error::Domain(format!("binomial outcome {k} exceeds {n} trials")));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::Domain(format!(
            "binomial success probability must lie in (0, 1), got {q}"
        )));
    }
    Ok(())
}

/// Log-sum of the pmf over `lo..=hi`, walking outward from the largest term.
fn log_range_sum(lo: u64, hi: u64, n: u64, q: f64) -> f64 {
    let mode = (((n + 1) as f64) * q).floor() as u64;
    let start = mode.clamp(lo, hi);
    let peak = log_pmf_unchecked(start, n, q);
    let mut acc = 1.0;
    let mut j = start;
    while j < hi {
        j += 1;
        let d = log_pmf_unchecked(j, n, q) - peak;
        if d < -TAIL_CUTOFF {
            break;
        }
        acc += d.exp();
    }
    let mut j = start;
    while j > lo {
        j -= 1;
        let d = log_pmf_unchecked(j, n, q) - peak;
        if d < -TAIL_CUTOFF {
            break;
        }
        acc += d.exp();
    }
    peak + acc.ln()
}

fn log_pmf_unchecked(k: u64, n: u64, q: f64) -> f64 {
    let p = 1.0 - q;
    let nf = n as f64;
    if k == 0 {
        return nf * (-q).ln_1p();
    }
    if k == n {
        return nf * q.ln();
    }
    let kf = k as f64;
    let rest = nf - kf;
    let lc = stirlerr(n) - stirlerr(k) - stirlerr(n - k) - bd0(kf, nf * q) - bd0(rest, nf * p);
    lc - 0.5 * ((2.0 * PI).ln() + kf.ln() + (-kf / nf).ln_1p())
}

/// `ln Γ(n+1) - [(n + ½) ln n - n + ½ ln 2π]`, the error of Stirling's
/// approximation to `ln n!`.
fn stirlerr(n: u64) -> f64 {
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    let x = n as f64;
    if n <= 15 {
        return libm::lgamma(x + 1.0) - (x + 0.5) * x.ln() + x - 0.5 * (2.0 * PI).ln();
    }
    let xx = x * x;
    if n > 500 {
        (S0 - S1 / xx) / x
    } else if n > 80 {
        (S0 - (S1 - S2 / xx) / xx) / x
    } else if n > 35 {
        (S0 - (S1 - (S2 - S3 / xx) / xx) / xx) / x
    } else {
        (S0 - (S1 - (S2 - (S3 - S4 / xx) / xx) / xx) / xx) / x
    }
}

/// Deviance term `x ln(x/m) + m - x`, by series when `x ≈ m`.
fn bd0(x: f64, m: f64) -> f64 {
    if (x - m).abs() < 0.1 * (x + m) {
        let v = (x - m) / (x + m);
        let mut s = (x - m) * v;
        let mut ej = 2.0 * x * v;
        let vv = v * v;
        for j in 1..1000 {
            ej *= vv;
            let s1 = s + ej / (2 * j + 1) as f64;
            if s1 == s {
                return s1;
            }
            s = s1;
        }
        s
    } else {
        x * (x / m).ln() + m - x
    }
}
