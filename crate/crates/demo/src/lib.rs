//! WebAssembly bindings for the browser page in `www/`.
//!
//! Each exported function takes plain numbers and returns a JSON string. The
//! `*_json` functions hold the logic and are ordinary Rust, so they are tested
//! natively.

use dpulr::accountant::{best_epsilon_on_grid, default_alpha_grid, Mechanism, RatioGrid, SrgmParams};
use dpulr::numkit::RngStream;
use dpulr::sampler::{batch_size_pmf, draw_batch};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Longest training run the page will price.
const MAX_STEPS: u64 = 1_000_000;
/// Points on an epsilon curve.
const CURVE_POINTS: u64 = 60;
const MAX_DRAWS: usize = 100_000;

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Impairment-to-Gaussian ratio over a log-spaced `N̄` range and a linear
/// range of `N_B / (qN̄)` fractions.
#[allow(clippy::too_many_arguments)]
pub fn bound_ratio_json(
    q: f64,
    sigma0: f64,
    alpha: f64,
    nbar_min: u32,
    nbar_max: u32,
    nbar_points: u32,
    frac_min: f64,
    frac_max: f64,
    frac_points: u32,
) -> Result<String, String> {
    if nbar_points > 200 || frac_points > 50 {
        return Err("at most 200 N̄ points and 50 fractions".into());
    }
    let grid = RatioGrid {
        q,
        sigma0,
        alpha,
        n_bar_min: nbar_min.into(),
        n_bar_max: nbar_max.into(),
        n_bar_points: nbar_points as usize,
        frac_min,
        frac_max,
        frac_points: frac_points as usize,
    };
    let points = grid.evaluate().map_err(fail)?;
    serde_json::to_string(&points).map_err(fail)
}

/// ε after `t` steps for `t` on an even grid up to `steps`, for rejection
/// sampling and for plain Poisson subsampling at the same noise level.
pub fn epsilon_curve_json(q: f64, sigma0: f64, n_b: u32, n_bar: u32, steps: u32, delta: f64) -> Result<String, String> {
    let steps = u64::from(steps);
    if steps == 0 || steps > MAX_STEPS {
        return Err(format!("steps must lie in [1, {MAX_STEPS}]"));
    }
    let p = SrgmParams::new(q, sigma0, n_b.into(), n_bar.into()).map_err(fail)?;
    let grid = default_alpha_grid();
    let mut rows = Vec::new();
    for i in 1..=CURVE_POINTS.min(steps) {
        let t = (steps * i).div_ceil(CURVE_POINTS.min(steps));
        let srgm = best_epsilon_on_grid(Mechanism::Srgm, &p, t, delta, false, &grid).map_err(fail)?;
        let sgm = best_epsilon_on_grid(Mechanism::Sgm, &p, t, delta, false, &grid).map_err(fail)?;
        rows.push(json!({
            "steps": t,
            "epsilon": srgm.epsilon,
            "alpha": srgm.alpha,
            "impairment": srgm.impairment_term,
            "epsilon_sgm": sgm.epsilon,
            "regime_valid": srgm.regime_valid,
        }));
    }
    Ok(json!(rows).to_string())
}

/// Exact law of the accepted batch size next to a seeded histogram of
/// `draws` simulated batches.
pub fn batch_size_json(dataset_size: u32, q: f64, n_b: u32, draws: u32, seed: u32) -> Result<String, String> {
    let (n, n_b, draws) = (dataset_size as usize, n_b as usize, draws as usize);
    if n > 20_000 || draws > MAX_DRAWS {
        return Err(format!("at most 20000 examples and {MAX_DRAWS} draws"));
    }
    let pmf = batch_size_pmf(n, q, n_b).map_err(fail)?;
    let mut counts = vec![0u64; n + 1];
    let mut rejections = 0u64;
    let mut rng = RngStream::new(seed.into()).generator();
    for _ in 0..draws {
        let b = draw_batch(n, q, n_b, &mut rng).map_err(fail)?;
        counts[b.len()] += 1;
        rejections += b.rejections;
    }
    let rows: Vec<_> = pmf
        .iter()
        .filter(|(_, p)| *p > 1e-7)
        .map(|&(k, p)| json!({"size": k, "exact": p, "empirical": counts[k] as f64 / draws.max(1) as f64}))
        .collect();
    Ok(json!({"rows": rows, "rejections_per_draw": rejections as f64 / draws.max(1) as f64}).to_string())
}

#[wasm_bindgen]
#[allow(clippy::too_many_arguments)]
pub fn bound_ratio(
    q: f64,
    sigma0: f64,
    alpha: f64,
    nbar_min: u32,
    nbar_max: u32,
    nbar_points: u32,
    frac_min: f64,
    frac_max: f64,
    frac_points: u32,
) -> Result<String, JsValue> {
    bound_ratio_json(q, sigma0, alpha, nbar_min, nbar_max, nbar_points, frac_min, frac_max, frac_points)
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn epsilon_curve(q: f64, sigma0: f64, n_b: u32, n_bar: u32, steps: u32, delta: f64) -> Result<String, JsValue> {
    epsilon_curve_json(q, sigma0, n_b, n_bar, steps, delta).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn batch_sizes(dataset_size: u32, q: f64, n_b: u32, draws: u32, seed: u32) -> Result<String, JsValue> {
    batch_size_json(dataset_size, q, n_b, draws, seed).map_err(|e| JsValue::from_str(&e))
}
