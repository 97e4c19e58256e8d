//! Likelihood-ratio gradient estimates from noisy forward passes.
//!
//! With Gaussian noise `z ~ N(0, σ²I)` added at a layer's output, the proxy
//! `ĝ = Jᵀ(z·L)/σ²` is an estimate of the gradient of the loss with respect
//! to that layer's parameters, where `J` is the Jacobian of the perturbed
//! quantity and `L` the loss of the noisy pass. The mean of `K` proxies is
//! computed as `Jᵀ(Σ z_k L_k)/(Kσ²)`, which only touches `J` once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{
    forward_noisy_from_trace, forward_param_noisy_from_trace, gradients_from_trace,
    structured_jacobian, ForwardTrace, LayerJacobian, ModelParams, ParamJacobian,
};
use crate::numkit::{check_sigma, fill_gaussian, l2_norm, Matrix, RngStream};
use crate::par::map_indexed;

/// Where the perturbation enters a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InjectMode {
    /// Added to the pre-activation output `v = Wx + b`.
    #[default]
    Output,
    /// Added to the layer's parameters directly (Jacobian = identity).
    Params,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleGradient {
    pub layer: usize,
    /// Clipped `K`-average, flattened in layer parameter order.
    pub values: Vec<f64>,
    pub pre_clip_norm: f64,
}

/// `Jᵀ(z·L)/σ²`.
pub fn lr_proxy<J: ParamJacobian + ?Sized>(
    jac: &J,
    z: &[f64],
    noisy_loss: f64,
    sigma: f64,
) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    if z.len() != jac.out_dim() {
        return Err(Error::Dimension(format!(
            "noise of length {} for a Jacobian with {} rows",
            z.len(),
            jac.out_dim()
        )));
    }
    let scale = noisy_loss / (sigma * sigma);
    let u: Vec<f64> = z.iter().map(|v| v * scale).collect();
    jac.tr_apply(&u)
}

/// The Jacobian paired with the noise in `mode`.
pub fn noise_jacobian(
    trace: &ForwardTrace,
    params: &ModelParams,
    layer: usize,
    mode: InjectMode,
) -> Result<LayerJacobian> {
    match mode {
        InjectMode::Output => structured_jacobian(trace, layer),
        InjectMode::Params => {
            let spec = params
                .specs()
                .get(layer)
                .ok_or_else(|| Error::Dimension(format!("layer {layer} out of range")))?;
            Ok(LayerJacobian::Identity {
                dim: spec.num_params(),
            })
        }
    }
}

/// Loss of one noisy pass resuming from `trace`.
pub fn noisy_loss(
    trace: &ForwardTrace,
    params: &ModelParams,
    layer: usize,
    mode: InjectMode,
    z: &[f64],
) -> Result<f64> {
    match mode {
        InjectMode::Output => forward_noisy_from_trace(trace, params, layer, z),
        InjectMode::Params => forward_param_noisy_from_trace(trace, params, layer, z),
    }
}

/// Rescales `v` in place to norm at most `clip`; returns the original norm.
pub fn clip_in_place(v: &mut [f64], clip: f64) -> f64 {
    let norm = l2_norm(v);
    if norm > clip {
        let s = clip / norm;
        v.iter_mut().for_each(|x| *x *= s);
    }
    norm
}

/// `Σ_k z_k L_k` over `repeats` fresh draws from `stream`, the only random
/// part of a `K`-averaged proxy.
fn weighted_noise_sum(
    trace: &ForwardTrace,
    params: &ModelParams,
    layer: usize,
    mode: InjectMode,
    noise_dim: usize,
    sigma: f64,
    repeats: usize,
    stream: &RngStream,
) -> Result<Vec<f64>> {
    let mut rng = stream.generator();
    let mut z = vec![0.0; noise_dim];
    let mut acc = vec![0.0; noise_dim];
    for _ in 0..repeats {
        fill_gaussian(&mut rng, sigma, &mut z);
        let loss = noisy_loss(trace, params, layer, mode, &z)?;
        for (a, zi) in acc.iter_mut().zip(&z) {
            *a += zi * loss;
        }
    }
    Ok(acc)
}

/// Clipped mean of `repeats` proxies with independent noise.
#[allow(clippy::too_many_arguments)]
pub fn estimate_example_gradient(
    trace: &ForwardTrace,
    params: &ModelParams,
    layer: usize,
    mode: InjectMode,
    sigma: f64,
    repeats: usize,
    clip: f64,
    stream: &RngStream,
) -> Result<ExampleGradient> {
    check_sigma(sigma)?;
    if repeats == 0 {
        return Err(Error::Config("repeat count must be at least 1".into()));
    }
    if !(clip > 0.0) {
        return Err(Error::Config(format!("clip bound must be positive, got {clip}")));
    }
    let jac = noise_jacobian(trace, params, layer, mode)?;
    let acc = weighted_noise_sum(trace, params, layer, mode, jac.out_dim(), sigma, repeats, stream)?;
    let mut values = lr_proxy(&jac, &acc, 1.0 / repeats as f64, sigma)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient estimate at layer {layer}")));
    }
    let pre_clip_norm = clip_in_place(&mut values, clip);
    Ok(ExampleGradient {
        layer,
        values,
        pre_clip_norm,
    })
}

/// Draws per parallel work unit in the Monte-Carlo instruments below.
const CHUNK: usize = 4096;

fn chunks(samples: usize) -> Vec<(usize, usize)> {
    (0..samples.div_ceil(CHUNK))
        .map(|c| (c * CHUNK, ((c + 1) * CHUNK).min(samples)))
        .collect()
}

/// Sample mean and covariance of `samples` unclipped single-draw proxies.
///
/// Accumulation happens in the noise space and is mapped through `J`
/// afterwards, which is exact because the proxy is linear in `z·L`. Chunks
/// draw from child streams and are reduced in index order, so the result does
/// not depend on the thread count.
pub fn empirical_proxy_moments(
    trace: &ForwardTrace,
    params: &ModelParams,
    layer: usize,
    mode: InjectMode,
    sigma: f64,
    samples: usize,
    stream: &RngStream,
) -> Result<(Vec<f64>, Matrix)> {
    check_sigma(sigma)?;
    if samples < 2 {
        return Err(Error::Config("at least two samples are needed".into()));
    }
    let jac = noise_jacobian(trace, params, layer, mode)?;
    let d = jac.out_dim();
    let parts = chunks(samples);
    let partial = map_indexed(parts.len(), |c| -> Result<(Vec<f64>, Vec<f64>)> {
        let (lo, hi) = parts[c];
        let mut rng = stream.child(c as u64).generator();
        let mut z = vec![0.0; d];
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d * d];
        for _ in lo..hi {
            fill_gaussian(&mut rng, sigma, &mut z);
            let loss = noisy_loss(trace, params, layer, mode, &z)?;
            let u: Vec<f64> = z.iter().map(|v| v * loss).collect();
            for i in 0..d {
                sum[i] += u[i];
                for j in 0..d {
                    sq[i * d + j] += u[i] * u[j];
                }
            }
        }
        Ok((sum, sq))
    });
    let mut sum = vec![0.0; d];
    let mut sq = vec![0.0; d * d];
    for part in partial {
        let (s, q) = part?;
        sum.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
        sq.iter_mut().zip(&q).for_each(|(a, b)| *a += b);
    }
    let n = samples as f64;
    let mean_u: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let cov_u = Matrix::from_fn(d, d, |i, j| (sq[i * d + j] - n * mean_u[i] * mean_u[j]) / (n - 1.0));

    let s2 = sigma * sigma;
    let mean = jac.tr_apply(&mean_u)?.into_iter().map(|v| v / s2).collect();
    let dense = jac.to_dense();
    let cov = dense
        .transpose()
        .matmul(&cov_u.matmul(&dense)?)?
        .scale(1.0 / (s2 * s2))
        .symmetrized();
    Ok((mean, cov))
}

/// Monte-Carlo estimate of the proxy's bias `E[ĝ] − ∇L`.
///
/// Each draw `z = σξ` is paired with `−z`, and the zero-mean control variate
/// `(ξξᵀ − I)∇L` is subtracted, leaving an unbiased estimate of `E[ĝ]` whose
/// spread is of the same order as the bias itself. Plain averaging would need
/// a sample count growing like `1/σ²` to resolve it.
pub fn proxy_bias(
    trace: &ForwardTrace,
    params: &ModelParams,
    layer: usize,
    sigma: f64,
    samples: usize,
    stream: &RngStream,
) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    if samples == 0 {
        return Err(Error::Config("at least one sample is needed".into()));
    }
    let jac = structured_jacobian(trace, layer)?;
    let d = jac.out_dim();
    let grad_v = crate::network::pre_activation_grads(trace, params).swap_remove(layer);
    let parts = chunks(samples);
    let partial = map_indexed(parts.len(), |c| -> Result<Vec<f64>> {
        let (lo, hi) = parts[c];
        let mut rng = stream.child(c as u64).generator();
        let mut xi = vec![0.0; d];
        let mut acc = vec![0.0; d];
        for _ in lo..hi {
            fill_gaussian(&mut rng, 1.0, &mut xi);
            let z: Vec<f64> = xi.iter().map(|v| v * sigma).collect();
            let neg: Vec<f64> = z.iter().map(|v| -v).collect();
            let lp = forward_noisy_from_trace(trace, params, layer, &z)?;
            let lm = forward_noisy_from_trace(trace, params, layer, &neg)?;
            let diff = (lp - lm) / (2.0 * sigma);
            let proj: f64 = xi.iter().zip(&grad_v).map(|(a, b)| a * b).sum();
            for i in 0..d {
                acc[i] += xi[i] * (diff - proj);
            }
        }
        Ok(acc)
    });
    let mut acc = vec![0.0; d];
    for part in partial {
        acc.iter_mut().zip(&part?).for_each(|(a, b)| *a += b);
    }
    let n = samples as f64;
    let mean: Vec<f64> = acc.iter().map(|v| v / n).collect();
    jac.tr_apply(&mean)
}

/// Exact gradient of the clean loss for `layer`; the reference the
/// estimators above are compared with.
pub fn reference_gradient(trace: &ForwardTrace, params: &ModelParams, layer: usize) -> Vec<f64> {
    gradients_from_trace(trace, params).swap_remove(layer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward_clean, Activation, LayerSpec};

    fn tiny() -> ModelParams {
        ModelParams::init(
            vec![
                LayerSpec::new(2, 4, Activation::Gelu),
                LayerSpec::new(4, 3, Activation::Identity),
            ],
            &RngStream::new(7),
        )
        .unwrap()
    }

    #[test]
    fn proxy_plug_ins() {
        let j = Matrix::identity(2);
        assert_eq!(lr_proxy(&j, &[0.3, 0.1], 0.0, 0.5).unwrap(), vec![0.0, 0.0]);
        assert_eq!(lr_proxy(&j, &[0.0, 0.0], 2.0, 0.5).unwrap(), vec![0.0, 0.0]);
        let s = 0.5f64;
        assert_eq!(lr_proxy(&j, &[s * s, 0.0], 1.0, s).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(lr_proxy(&j, &[1.0], 1.0, s), Err(Error::Dimension(_))));
        assert!(matches!(lr_proxy(&j, &[1.0, 0.0], 1.0, 0.0), Err(Error::Domain(_))));
    }

    #[test]
    fn single_repeat_without_clipping_is_one_proxy() {
        let p = tiny();
        let t = forward_clean(&[0.5, -0.2], 1, &p).unwrap();
        let stream = RngStream::new(3);
        let g = estimate_example_gradient(&t, &p, 0, InjectMode::Output, 0.1, 1, 1e18, &stream).unwrap();
        let mut z = vec![0.0; 4];
        fill_gaussian(&mut stream.generator(), 0.1, &mut z);
        let loss = forward_noisy_from_trace(&t, &p, 0, &z).unwrap();
        let direct = lr_proxy(&structured_jacobian(&t, 0).unwrap(), &z, loss, 0.1).unwrap();
        for (a, b) in g.values.iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        assert!((g.pre_clip_norm - l2_norm(&direct)).abs() < 1e-9);
    }

    #[test]
    fn clipping_bounds_and_preserves() {
        let mut v = vec![2.0, 0.0];
        assert_eq!(clip_in_place(&mut v, 0.5), 2.0);
        assert_eq!(v, vec![0.5, 0.0]);
        let mut w = vec![0.1, 0.2];
        clip_in_place(&mut w, 1.0);
        assert_eq!(w, vec![0.1, 0.2]);

        let p = tiny();
        let t = forward_clean(&[0.9, 0.4], 2, &p).unwrap();
        for seed in 0..50 {
            let g = estimate_example_gradient(
                &t,
                &p,
                seed as usize % 2,
                InjectMode::Output,
                0.05,
                3,
                0.5,
                &RngStream::new(seed),
            )
            .unwrap();
            assert!(l2_norm(&g.values) <= 0.5 + 1e-12);
        }
    }

    #[test]
    fn argument_errors() {
        let p = tiny();
        let t = forward_clean(&[0.9, 0.4], 2, &p).unwrap();
        let s = RngStream::new(1);
        assert!(estimate_example_gradient(&t, &p, 0, InjectMode::Output, 0.1, 0, 1.0, &s).is_err());
        assert!(estimate_example_gradient(&t, &p, 0, InjectMode::Output, 0.1, 1, 0.0, &s).is_err());
        assert!(estimate_example_gradient(&t, &p, 5, InjectMode::Output, 0.1, 1, 1.0, &s).is_err());
    }

    #[test]
    fn parameter_mode_covariance_is_isotropic() {
        let p = tiny();
        let t = forward_clean(&[0.3, 0.6], 0, &p).unwrap();
        let sigma = 1e-2;
        let (_, cov) =
            empirical_proxy_moments(&t, &p, 1, InjectMode::Params, sigma, 200_000, &RngStream::new(5))
                .unwrap();
        let expect = Matrix::identity(cov.rows()).scale(t.loss * t.loss / (sigma * sigma));
        let rel = cov.sub(&expect).unwrap().frobenius_norm() / expect.frobenius_norm();
        assert!(rel < 0.1, "relative error {rel}");
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn moments_do_not_depend_on_thread_count() {
        let p = tiny();
        let t = forward_clean(&[0.3, 0.6], 0, &p).unwrap();
        let run = || {
            empirical_proxy_moments(&t, &p, 0, InjectMode::Output, 0.1, 20_000, &RngStream::new(9))
                .unwrap()
        };
        let a = run();
        let b = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(run);
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn bias_estimate_shrinks_with_sigma() {
        let p = tiny();
        let t = forward_clean(&[0.8, -0.5], 1, &p).unwrap();
        let g = reference_gradient(&t, &p, 0);
        let norm = l2_norm(&g);
        let rel = |s: f64| l2_norm(&proxy_bias(&t, &p, 0, s, 100_000, &RngStream::new(2)).unwrap()) / norm;
        let (a, b, c) = (rel(1e-1), rel(1e-2), rel(1e-3));
        assert!(a > b && b > c, "{a} {b} {c}");
    }
}
