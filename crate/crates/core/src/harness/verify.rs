//! Monte-Carlo checks of the proxy's first two moments on a tiny network.

use serde::Serialize;

use crate::controller::standard_covariance;
use crate::error::Result;
use crate::estimator::{empirical_proxy_moments, proxy_bias, reference_gradient, InjectMode};
use crate::network::{forward_clean, layer_jacobian, Activation, ForwardTrace, LayerSpec, ModelParams};
use crate::numkit::{l2_norm, RngStream};

use rand::Rng;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCheck {
    pub layer: usize,
    pub num_params: usize,
    /// Largest `|mean − ∇L|` over coordinates, in Monte-Carlo standard errors.
    pub max_standard_errors: f64,
    /// `‖mean − ∇L‖ / ‖∇L‖`.
    pub mean_relative_deviation: f64,
    /// Norm of the control-variate bias estimate `E[ĝ] − ∇L`.
    pub bias_norm: f64,
    /// Frobenius distance of the sample covariance to `L₀²/σ²·JᵀJ`, relative.
    pub covariance_relative_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheck {
    pub seed: u64,
    pub sigma: f64,
    pub samples: usize,
    pub clean_loss: f64,
    pub layers: Vec<LayerCheck>,
}

/// The 2-4-3 network and one labelled input, all drawn from `seed`.
pub fn tiny_problem(seed: u64) -> Result<(ModelParams, ForwardTrace)> {
    let root = RngStream::new(seed);
    let params = ModelParams::init(
        vec![
            LayerSpec::new(2, 4, Activation::Gelu),
            LayerSpec::new(4, 3, Activation::Identity),
        ],
        &root.child(0),
    )?;
    let mut rng = root.child(1).generator();
    let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    let y = rng.random_range(0..3);
    let trace = forward_clean(&x, y, &params)?;
    Ok((params, trace))
}

pub fn verify_gradient(seed: u64, sigma: f64, samples: usize) -> Result<GradientCheck> {
    let (params, trace) = tiny_problem(seed)?;
    let root = RngStream::new(seed).child(2);
    let mut layers = Vec::new();
    for layer in 0..params.num_layers() {
        let stream = root.child(layer as u64);
        let (mean, cov) =
            empirical_proxy_moments(&trace, &params, layer, InjectMode::Output, sigma, samples, &stream.child(0))?;
        let grad = reference_gradient(&trace, &params, layer);
        let n = samples as f64;
        let max_se = mean
            .iter()
            .zip(&grad)
            .enumerate()
            .map(|(i, (m, g))| (m - g).abs() / (cov.get(i, i) / n).sqrt().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        let diff: Vec<f64> = mean.iter().zip(&grad).map(|(m, g)| m - g).collect();
        let bias = proxy_bias(&trace, &params, layer, sigma, samples, &stream.child(1))?;
        let predicted = standard_covariance(&trace, &layer_jacobian(&trace, layer)?)?.scale(1.0 / (sigma * sigma));
        layers.push(LayerCheck {
            layer,
            num_params: grad.len(),
            max_standard_errors: max_se,
            mean_relative_deviation: l2_norm(&diff) / l2_norm(&grad),
            bias_norm: l2_norm(&bias),
            covariance_relative_deviation: cov.sub(&predicted)?.frobenius_norm() / predicted.frobenius_norm(),
        });
    }
    Ok(GradientCheck {
        seed,
        sigma,
        samples,
        clean_loss: trace.loss,
        layers,
    })
}
