//! Rényi-DP accounting for sampling with rejection.
//!
//! One step releases the sum of clipped per-example gradients with Gaussian
//! noise of standard deviation at least `σ₀·C` in every direction. Measuring
//! the sum in units of the clip bound `C` makes the sensitivity 1, so `σ₀` is
//! the noise-to-sensitivity ratio throughout this module.
//!
//! The per-step cost at order `α` is
//!
//! ```text
//! γ(α) = q·p(N_B−1; N̄, q) / (1 − P(N_B−1; N̄, q)) + 2q²α/σ₀²
//! ```
//!
//! where `p` and `P` are the binomial pmf and cdf. The first term is the price
//! of rejecting small batches; it is evaluated in log space. Costs compose
//! additively over steps and convert to `(ε, δ)` by `ε = γ + ln(1/δ)/(α−1)`.
//!
//! The bound is proven only for `q ≤ 1/5`, `σ₀ ≥ 4`, `N_B ≤ qN̄` and orders
//! satisfying two transcendental conditions. Outside that regime the formula
//! is still evaluated on request and the result is flagged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{log_binom_pmf, log_binom_sf};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SrgmParams {
    pub q: f64,
    pub sigma0: f64,
    pub n_b: u64,
    /// Smallest dataset size the guarantee must hold for.
    pub n_bar: u64,
}

impl SrgmParams {
    pub fn new(q: f64, sigma0: f64, n_b: u64, n_bar: u64) -> Result<Self> {
        let p = Self {
            q,
            sigma0,
            n_b,
            n_bar,
        };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::Domain(format!("sampling rate must lie in (0, 1], got {}", self.q)));
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(Error::Domain(format!(
                "noise multiplier must be positive, got {}",
                self.sigma0
            )));
        }
        if self.n_b == 0 || self.n_b > self.n_bar {
            return Err(Error::Config(format!(
                "rejection threshold {} must lie in [1, {}]",
                self.n_b, self.n_bar
            )));
        }
        Ok(())
    }

    /// The order-independent hypotheses of the bound.
    pub fn regime_valid(&self) -> bool {
        self.q <= 0.2 && self.sigma0 >= 4.0 && (self.n_b as f64) <= self.q * self.n_bar as f64
    }
}

/// Which closed form prices a step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    /// Sampling with rejection: impairment term plus the Gaussian term.
    Srgm,
    /// Plain Poisson subsampling: the Gaussian term alone.
    Sgm,
}

/// True when the bound is proven at order `alpha`.
pub fn alpha_valid(alpha: f64, p: &SrgmParams) -> bool {
    if !(alpha > 1.0) || p.check().is_err() || !p.regime_valid() {
        return false;
    }
    let (q, s) = (p.q, p.sigma0);
    let a = (1.0 / (q * (alpha - 1.0))).ln_1p();
    let first = alpha <= 0.5 * s * s * a - 2.0 * s.ln();
    // Multiplied through so a non-positive denominator cannot flip the sense.
    let num = 0.5 * s * s * a * a - 5f64.ln() - 2.0 * s.ln();
    let den = a + (q * alpha).ln() + 1.0 / (2.0 * s * s);
    let second = alpha * den <= num;
    first && second
}

/// `q·p(N_B−1)/(1−P(N_B−1))`; exactly zero at `q = 1`.
pub fn impairment_term(p: &SrgmParams) -> Result<f64> {
    Ok(log_impairment_term(p)?.exp())
}

/// Natural log of [`impairment_term`], finite long after the term itself
/// underflows; `-inf` at `q = 1`.
pub fn log_impairment_term(p: &SrgmParams) -> Result<f64> {
    p.check()?;
    if p.q == 1.0 {
        return Ok(f64::NEG_INFINITY);
    }
    let k = p.n_b - 1;
    let log_num = p.q.ln() + log_binom_pmf(k, p.n_bar, p.q)?;
    let log_den = log_binom_sf(k, p.n_bar, p.q)?;
    Ok(log_num - log_den)
}

/// `2q²α/σ₀²`.
pub fn main_term(alpha: f64, p: &SrgmParams) -> f64 {
    2.0 * p.q * p.q * alpha / (p.sigma0 * p.sigma0)
}

/// Per-step RDP cost at `alpha`. In strict mode an order outside the proven
/// range is a validity error.
pub fn srgm_step_rdp(alpha: f64, p: &SrgmParams, strict: bool) -> Result<f64> {
    check_alpha(alpha)?;
    if strict && !alpha_valid(alpha, p) {
        return Err(Error::Validity(format!(
            "order {alpha} is outside the proven range for {p:?}"
        )));
    }
    Ok(impairment_term(p)? + main_term(alpha, p))
}

/// Per-step cost of plain subsampled Gaussian noise, `2q²α/σ₀²`.
pub fn sgm_step_rdp(alpha: f64, p: &SrgmParams) -> Result<f64> {
    check_alpha(alpha)?;
    p.check()?;
    Ok(main_term(alpha, p))
}

pub fn step_rdp(mechanism: Mechanism, alpha: f64, p: &SrgmParams, strict: bool) -> Result<f64> {
    match mechanism {
        Mechanism::Srgm => srgm_step_rdp(alpha, p, strict),
        Mechanism::Sgm => sgm_step_rdp(alpha, p),
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 1.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("Rényi order must exceed 1, got {alpha}")))
    }
}

/// `T` identical steps cost `T·γ`.
pub fn compose(step_gamma: f64, steps: u64) -> Result<f64> {
    if steps == 0 {
        return Err(Error::Domain("composition needs at least one step".into()));
    }
    Ok(steps as f64 * step_gamma)
}

/// `ε = γ + ln(1/δ)/(α−1)`.
pub fn rdp_to_dp(alpha: f64, gamma: f64, delta: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("δ must lie in (0, 1), got {delta}")));
    }
    Ok(gamma - delta.ln() / (alpha - 1.0))
}

/// `{1.01, 1.02, …, 1.99} ∪ {2, 3, …, 256}`.
pub fn default_alpha_grid() -> Vec<f64> {
    (101..200)
        .map(|i| i as f64 / 100.0)
        .chain((2..=256).map(f64::from))
        .collect()
}

/// Outcome of minimizing `ε` over the order grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonReport {
    pub epsilon: f64,
    pub alpha: f64,
    /// Composed cost at `alpha`.
    pub gamma: f64,
    /// Composed impairment part of `gamma`.
    pub impairment_term: f64,
    /// Composed Gaussian part of `gamma`.
    pub main_term: f64,
    pub regime_valid: bool,
}

/// Smallest `ε` over `grid` after `steps` steps. Strict mode keeps only
/// proven orders and fails when none remain.
pub fn best_epsilon_on_grid(
    mechanism: Mechanism,
    p: &SrgmParams,
    steps: u64,
    delta: f64,
    strict: bool,
    grid: &[f64],
) -> Result<EpsilonReport> {
    p.check()?;
    let imp = match mechanism {
        Mechanism::Srgm => compose(impairment_term(p)?, steps)?,
        Mechanism::Sgm => {
            compose(0.0, steps)?;
            0.0
        }
    };
    let mut best: Option<EpsilonReport> = None;
    for &alpha in grid {
        check_alpha(alpha)?;
        let valid = alpha_valid(alpha, p);
        if strict && !valid {
            continue;
        }
        let main = compose(main_term(alpha, p), steps)?;
        let gamma = imp + main;
        let epsilon = rdp_to_dp(alpha, gamma, delta)?;
        if best.is_none_or(|b| epsilon < b.epsilon) {
            best = Some(EpsilonReport {
                epsilon,
                alpha,
                gamma,
                impairment_term: imp,
                main_term: main,
                regime_valid: valid,
            });
        }
    }
    best.ok_or_else(|| {
        Error::Validity(format!(
            "no Rényi order on the grid satisfies the proven conditions for {p:?} \
             (needs q <= 0.2, sigma0 >= 4, n_b <= q * n_bar and a compatible order)"
        ))
    })
}

pub fn best_epsilon(p: &SrgmParams, steps: u64, delta: f64, strict: bool) -> Result<EpsilonReport> {
    best_epsilon_on_grid(Mechanism::Srgm, p, steps, delta, strict, &default_alpha_grid())
}

/// Impairment term over Gaussian term at `alpha`.
pub fn impairment_ratio(p: &SrgmParams, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    Ok(impairment_term(p)? / main_term(alpha, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatioPoint {
    pub n_bar: u64,
    pub n_b: u64,
    pub ratio: f64,
}

/// Axes of a ratio grid: `N̄` log-spaced over `[n_bar_min, n_bar_max]`, and
/// `N_B = ⌊f·q·N̄⌋` for `f` evenly spaced over `[frac_min, frac_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioGrid {
    pub q: f64,
    pub sigma0: f64,
    pub alpha: f64,
    pub n_bar_min: u64,
    pub n_bar_max: u64,
    pub n_bar_points: usize,
    pub frac_min: f64,
    pub frac_max: f64,
    pub frac_points: usize,
}

impl RatioGrid {
    pub fn n_bars(&self) -> Vec<u64> {
        let (lo, hi) = ((self.n_bar_min as f64).ln(), (self.n_bar_max as f64).ln());
        let k = self.n_bar_points;
        let mut v: Vec<u64> = (0..k)
            .map(|i| {
                let t = if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 };
                (lo + t * (hi - lo)).exp().round() as u64
            })
            .collect();
        v.dedup();
        v
    }

    pub fn fractions(&self) -> Vec<f64> {
        let k = self.frac_points;
        (0..k)
            .map(|i| {
                let t = if k == 1 { 0.0 } else { i as f64 / (k - 1) as f64 };
                self.frac_min + t * (self.frac_max - self.frac_min)
            })
            .collect()
    }

    /// Every `(N̄, N_B)` cell in row-major order, duplicates dropped.
    pub fn evaluate(&self) -> Result<Vec<RatioPoint>> {
        if self.n_bar_min == 0 || self.n_bar_min > self.n_bar_max || self.n_bar_points == 0 || self.frac_points == 0 {
            return Err(Error::Config("empty ratio grid".into()));
        }
        if !(self.frac_min > 0.0 && self.frac_min <= self.frac_max) {
            return Err(Error::Config(format!(
                "batch fractions must satisfy 0 < min <= max, got [{}, {}]",
                self.frac_min, self.frac_max
            )));
        }
        let mut cells = Vec::new();
        for n_bar in self.n_bars() {
            let mut last = 0;
            for f in self.fractions() {
                let n_b = ((f * self.q * n_bar as f64).floor() as u64).clamp(1, n_bar);
                if n_b != last {
                    cells.push((n_bar, n_b));
                    last = n_b;
                }
            }
        }
        crate::par::map_indexed(cells.len(), |i| {
            let (n_bar, n_b) = cells[i];
            let p = SrgmParams::new(self.q, self.sigma0, n_b, n_bar)?;
            Ok(RatioPoint {
                n_bar,
                n_b,
                ratio: impairment_ratio(&p, self.alpha)?,
            })
        })
        .into_iter()
        .collect()
    }
}

/// Running per-order totals over a fixed grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdpLedger {
    pub mechanism: Mechanism,
    pub alpha_grid: Vec<f64>,
    pub gamma_per_alpha: Vec<f64>,
    pub steps_accumulated: u64,
    /// Orders at which every recorded step was covered by the bound.
    pub validity: Vec<bool>,
}

impl RdpLedger {
    pub fn new(mechanism: Mechanism, alpha_grid: Vec<f64>) -> Result<Self> {
        if alpha_grid.is_empty() {
            return Err(Error::Config("empty Rényi order grid".into()));
        }
        for w in alpha_grid.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::Config("Rényi order grid must be ascending".into()));
            }
        }
        for &a in &alpha_grid {
            check_alpha(a)?;
        }
        let n = alpha_grid.len();
        Ok(Self {
            mechanism,
            alpha_grid,
            gamma_per_alpha: vec![0.0; n],
            steps_accumulated: 0,
            validity: vec![true; n],
        })
    }

    /// Per-order step costs for `p`, for repeated use with [`record_costs`].
    ///
    /// [`record_costs`]: RdpLedger::record_costs
    pub fn step_costs(&self, p: &SrgmParams) -> Result<Vec<(f64, bool)>> {
        p.check()?;
        let imp = match self.mechanism {
            Mechanism::Srgm => impairment_term(p)?,
            Mechanism::Sgm => 0.0,
        };
        Ok(self
            .alpha_grid
            .iter()
            .map(|&a| {
                let valid = match self.mechanism {
                    Mechanism::Srgm => alpha_valid(a, p),
                    Mechanism::Sgm => alpha_valid(a, &SrgmParams { n_b: 1, ..*p }),
                };
                (imp + main_term(a, p), valid)
            })
            .collect())
    }

    pub fn record_costs(&mut self, costs: &[(f64, bool)]) -> Result<()> {
        if costs.len() != self.alpha_grid.len() {
            return Err(Error::Dimension(format!(
                "{} costs for a grid of {} orders",
                costs.len(),
                self.alpha_grid.len()
            )));
        }
        for ((g, v), &(c, ok)) in self
            .gamma_per_alpha
            .iter_mut()
            .zip(self.validity.iter_mut())
            .zip(costs)
        {
            *g += c;
            *v &= ok;
        }
        self.steps_accumulated += 1;
        Ok(())
    }

    pub fn record_step(&mut self, p: &SrgmParams) -> Result<()> {
        let costs = self.step_costs(p)?;
        self.record_costs(&costs)
    }

    /// Best `(ε, α)` so far. Strict mode ignores orders not covered by the
    /// bound; without it the second value reports whether the chosen order
    /// is covered.
    pub fn epsilon(&self, delta: f64, strict: bool) -> Result<(f64, f64, bool)> {
        let mut best: Option<(f64, f64, bool)> = None;
        for ((&a, &g), &v) in self
            .alpha_grid
            .iter()
            .zip(&self.gamma_per_alpha)
            .zip(&self.validity)
        {
            if strict && !v {
                continue;
            }
            let e = rdp_to_dp(a, g, delta)?;
            if best.is_none_or(|b| e < b.0) {
                best = Some((e, a, v));
            }
        }
        best.ok_or_else(|| Error::Validity("no covered Rényi order remains in the ledger".into()))
    }
}
