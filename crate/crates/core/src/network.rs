//! A small fully connected network: affine layers, each followed by an
//! elementwise activation, trained with softmax cross-entropy.
//!
//! Parameters of layer `l` are flattened as the weight matrix in row-major
//! order followed by the bias, and every per-layer gradient or Jacobian in the
//! crate uses that order.
//!
//! Noise is injected into a layer's pre-activation output `v = W x + b`,
//! before the activation. Layers before the injection point are unaffected,
//! so a noisy evaluation resumes from a clean [`ForwardTrace`].

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * libm::erfc(-x * FRAC_1_SQRT_2),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Exact derivative; ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * libm::erfc(-x * FRAC_1_SQRT_2);
                let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
                cdf + x * pdf
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Gelu => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Gelu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn num_params(&self) -> usize {
        self.out_dim * self.in_dim + self.out_dim
    }
}

/// Dimensions must be positive and chain, and the last layer must emit raw
/// logits.
pub fn validate_architecture(specs: &[LayerSpec]) -> Result<()> {
    let last = specs
        .last()
        .ok_or_else(|| Error::Config("architecture has no layers".into()))?;
    for (l, s) in specs.iter().enumerate() {
        if s.in_dim == 0 || s.out_dim == 0 {
            return Err(Error::Config(format!("layer {l} has a zero dimension")));
        }
        if l > 0 && specs[l - 1].out_dim != s.in_dim {
            return Err(Error::Config(format!(
                "layer {l} expects {} inputs but layer {} produces {}",
                s.in_dim,
                l - 1,
                specs[l - 1].out_dim
            )));
        }
    }
    if last.activation != Activation::Identity {
        return Err(Error::Config(
            "the final layer must use the identity activation".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `out_dim x in_dim`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LayerParams {
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        let mut v = self.bias.clone();
        for (vi, row) in v.iter_mut().zip(self.weight.as_slice().chunks_exact(x.len())) {
            *vi += row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
        }
        v
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.weight.as_slice().to_vec();
        out.extend_from_slice(&self.bias);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    specs: Vec<LayerSpec>,
    layers: Vec<LayerParams>,
}

impl ModelParams {
    pub fn new(specs: Vec<LayerSpec>, layers: Vec<LayerParams>) -> Result<Self> {
        validate_architecture(&specs)?;
        if specs.len() != layers.len() {
            return Err(Error::Dimension(format!(
                "{} layer specs but {} parameter blocks",
                specs.len(),
                layers.len()
            )));
        }
        for (l, (s, p)) in specs.iter().zip(&layers).enumerate() {
            if p.weight.rows() != s.out_dim
                || p.weight.cols() != s.in_dim
                || p.bias.len() != s.out_dim
            {
                return Err(Error::Dimension(format!(
                    "layer {l} parameters do not match {}x{}",
                    s.out_dim, s.in_dim
                )));
            }
            if !p.weight.all_finite() || p.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::Numeric(format!("layer {l} has non-finite parameters")));
            }
        }
        Ok(Self { specs, layers })
    }

    pub fn zeros(specs: Vec<LayerSpec>) -> Result<Self> {
        let layers = specs
            .iter()
            .map(|s| LayerParams {
                weight: Matrix::zeros(s.out_dim, s.in_dim),
                bias: vec![0.0; s.out_dim],
            })
            .collect();
        Self::new(specs, layers)
    }

    /// Uniform initialization on `±1/sqrt(in_dim)` for weights and biases.
    pub fn init(specs: Vec<LayerSpec>, stream: &RngStream) -> Result<Self> {
        validate_architecture(&specs)?;
        let mut rng = stream.generator();
        let layers = specs
            .iter()
            .map(|s| {
                let bound = 1.0 / (s.in_dim as f64).sqrt();
                let weight = Matrix::from_fn(s.out_dim, s.in_dim, |_, _| {
                    rng.random_range(-bound..bound)
                });
                let bias = (0..s.out_dim).map(|_| rng.random_range(-bound..bound)).collect();
                LayerParams { weight, bias }
            })
            .collect();
        Self::new(specs, layers)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn num_classes(&self) -> usize {
        self.specs[self.specs.len() - 1].out_dim
    }

    pub fn num_params(&self) -> usize {
        self.specs.iter().map(LayerSpec::num_params).sum()
    }

    pub fn layer_flat(&self, layer: usize) -> Vec<f64> {
        self.layers[layer].flatten()
    }

    /// `θˡ += scale · delta` with `delta` in flattened layer order.
    pub fn add_to_layer(&mut self, layer: usize, delta: &[f64], scale: f64) -> Result<()> {
        let spec = self.specs[layer];
        if delta.len() != spec.num_params() {
            return Err(Error::Dimension(format!(
                "update of length {} for a layer with {} parameters",
                delta.len(),
                spec.num_params()
            )));
        }
        let n_w = spec.out_dim * spec.in_dim;
        let p = &mut self.layers[layer];
        let mut w = std::mem::replace(&mut p.weight, Matrix::zeros(0, 0)).into_vec();
        for (a, d) in w.iter_mut().zip(&delta[..n_w]) {
            *a += scale * d;
        }
        for (a, d) in p.bias.iter_mut().zip(&delta[n_w..]) {
            *a += scale * d;
        }
        if w.iter().chain(&p.bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("layer {layer} update produced non-finite parameters")));
        }
        p.weight = Matrix::from_raw(spec.out_dim, spec.in_dim, w);
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(PARAMS_MAGIC)?;
        out.write_all(&PARAMS_VERSION.to_le_bytes())?;
        out.write_all(&(self.specs.len() as u32).to_le_bytes())?;
        for s in &self.specs {
            out.write_all(&(s.in_dim as u32).to_le_bytes())?;
            out.write_all(&(s.out_dim as u32).to_le_bytes())?;
            out.write_all(&[s.activation.code()])?;
        }
        for p in &self.layers {
            for v in p.weight.as_slice().iter().chain(&p.bias) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let mut cur = ByteCursor::new(&bytes);
        if cur.take(8)? != PARAMS_MAGIC {
            return Err(cur.error_at(0, "not a parameter dump"));
        }
        let version = cur.u32()?;
        if version != PARAMS_VERSION {
            return Err(cur.error_at(8, &format!("unsupported version {version}")));
        }
        let n = cur.u32()? as usize;
        let mut specs = Vec::with_capacity(n);
        for _ in 0..n {
            let in_dim = cur.u32()? as usize;
            let out_dim = cur.u32()? as usize;
            let at = cur.pos;
            let code = cur.take(1)?[0];
            let activation = Activation::from_code(code)
                .ok_or_else(|| cur.error_at(at, &format!("unknown activation code {code}")))?;
            specs.push(LayerSpec::new(in_dim, out_dim, activation));
        }
        let mut layers = Vec::with_capacity(n);
        for s in &specs {
            let w = cur.f64s(s.out_dim * s.in_dim)?;
            let b = cur.f64s(s.out_dim)?;
            layers.push(LayerParams {
                weight: Matrix::new(s.out_dim, s.in_dim, w)?,
                bias: b,
            });
        }
        if cur.pos != bytes.len() {
            return Err(cur.error_at(cur.pos, "trailing bytes"));
        }
        Self::new(specs, layers)
    }
}

const PARAMS_MAGIC: &[u8; 8] = b"DPULRPRM";
const PARAMS_VERSION: u32 = 1;

struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.error_at(self.pos, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn error_at(&self, offset: usize, message: &str) -> Error {
        Error::Format {
            offset: offset as u64,
            message: message.to_string(),
        }
    }
}

/// Everything a clean forward pass produces for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub label: usize,
    /// `inputs[l]` is the input `xˡ` of layer `l`.
    pub inputs: Vec<Vec<f64>>,
    /// `pre_activations[l]` is `vˡ = Wˡ xˡ + bˡ`.
    pub pre_activations: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    /// Cross-entropy of the clean pass, `L₀`.
    pub loss: f64,
}

impl ForwardTrace {
    pub fn num_layers(&self) -> usize {
        self.inputs.len()
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `log Σ exp(logits) - logits[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_example(x: &[f64], y: usize, params: &ModelParams) -> Result<()> {
    if x.len() != params.input_dim() {
        return Err(Error::Dimension(format!(
            "input of length {} for a network expecting {}",
            x.len(),
            params.input_dim()
        )));
    }
    if y >= params.num_classes() {
        return Err(Error::Dimension(format!(
            "label {y} for a network with {} classes",
            params.num_classes()
        )));
    }
    Ok(())
}

/// Noise-free forward pass.
pub fn forward_clean(x: &[f64], y: usize, params: &ModelParams) -> Result<ForwardTrace> {
    check_example(x, y, params)?;
    let n = params.num_layers();
    let mut inputs = Vec::with_capacity(n);
    let mut pre_activations = Vec::with_capacity(n);
    let mut current = x.to_vec();
    for (spec, layer) in params.specs.iter().zip(&params.layers) {
        let v = layer.affine(&current);
        let next = v.iter().map(|&t| spec.activation.apply(t)).collect();
        inputs.push(std::mem::replace(&mut current, next));
        pre_activations.push(v);
    }
    let loss = cross_entropy(&current, y);
    Ok(ForwardTrace {
        label: y,
        inputs,
        pre_activations,
        logits: current,
        loss,
    })
}

/// Loss when layer `layer`'s pre-activation output is replaced by `v`.
fn loss_from_layer(params: &ModelParams, layer: usize, v: &[f64], y: usize) -> f64 {
    let mut current: Vec<f64> = v
        .iter()
        .map(|&t| params.specs[layer].activation.apply(t))
        .collect();
    for (spec, p) in params.specs.iter().zip(&params.layers).skip(layer + 1) {
        current = p
            .affine(&current)
            .into_iter()
            .map(|t| spec.activation.apply(t))
            .collect();
    }
    cross_entropy(&current, y)
}

/// Loss with `z` added to the pre-activation output of layer `layer`.
pub fn forward_noisy(
    x: &[f64],
    y: usize,
    params: &ModelParams,
    layer: usize,
    z: &[f64],
) -> Result<f64> {
    let trace = forward_clean(x, y, params)?;
    forward_noisy_from_trace(&trace, params, layer, z)
}

/// As [`forward_noisy`], resuming from an existing clean trace. With `z = 0`
/// the result is bit-identical to `trace.loss`.
pub fn forward_noisy_from_trace(
    trace: &ForwardTrace,
    params: &ModelParams,
    layer: usize,
    z: &[f64],
) -> Result<f64> {
    let v = trace
        .pre_activations
        .get(layer)
        .ok_or_else(|| Error::Dimension(format!("layer {layer} out of range")))?;
    if z.len() != v.len() {
        return Err(Error::Dimension(format!(
            "noise of length {} for a layer with {} outputs",
            z.len(),
            v.len()
        )));
    }
    let noisy: Vec<f64> = v.iter().zip(z).map(|(a, b)| a + b).collect();
    Ok(loss_from_layer(params, layer, &noisy, trace.label))
}

/// Loss with `z` (in flattened parameter order) added to the parameters of
/// layer `layer`.
pub fn forward_param_noisy_from_trace(
    trace: &ForwardTrace,
    params: &ModelParams,
    layer: usize,
    z: &[f64],
) -> Result<f64> {
    let jac = structured_jacobian(trace, layer)?;
    let shift = jac.apply(z)?;
    forward_noisy_from_trace(trace, params, layer, &shift)
}

/// Linear map from a vector to another, exposing only `Jᵀ u` for the
/// gradient proxy.
pub trait ParamJacobian {
    fn out_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn tr_apply(&self, u: &[f64]) -> Result<Vec<f64>>;
}

impl ParamJacobian for Matrix {
    fn out_dim(&self) -> usize {
        self.rows()
    }

    fn param_dim(&self) -> usize {
        self.cols()
    }

    fn tr_apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.tr_matvec(u)
    }
}

/// Jacobian of a layer's output with respect to its own parameters, stored
/// without materializing the zeros.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerJacobian {
    /// `∂v_m/∂W_mn = x_n`, `∂v_m/∂b_m = 1`, zero elsewhere.
    Linear { input: Vec<f64>, out_dim: usize },
    /// Noise added directly to the parameters: the virtual layer's output is
    /// the parameter vector itself.
    Identity { dim: usize },
}

impl LayerJacobian {
    pub fn to_dense(&self) -> Matrix {
        match self {
            LayerJacobian::Linear { input, out_dim } => {
                let n_in = input.len();
                let n_w = out_dim * n_in;
                Matrix::from_fn(*out_dim, n_w + out_dim, |m, j| {
                    if j < n_w {
                        if j / n_in == m {
                            input[j % n_in]
                        } else {
                            0.0
                        }
                    } else if j - n_w == m {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
            LayerJacobian::Identity { dim } => Matrix::identity(*dim),
        }
    }

    /// `J z`.
    pub fn apply(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.param_dim() {
            return Err(Error::Dimension(format!(
                "vector of length {} for a Jacobian with {} columns",
                z.len(),
                self.param_dim()
            )));
        }
        Ok(match self {
            LayerJacobian::Linear { input, out_dim } => {
                let n_in = input.len();
                let (w, b) = z.split_at(out_dim * n_in);
                w.chunks_exact(n_in)
                    .zip(b)
                    .map(|(row, bm)| row.iter().zip(input).map(|(a, x)| a * x).sum::<f64>() + bm)
                    .collect()
            }
            LayerJacobian::Identity { .. } => z.to_vec(),
        })
    }
}

impl ParamJacobian for LayerJacobian {
    fn out_dim(&self) -> usize {
        match self {
            LayerJacobian::Linear { out_dim, .. } => *out_dim,
            LayerJacobian::Identity { dim } => *dim,
        }
    }

    fn param_dim(&self) -> usize {
        match self {
            LayerJacobian::Linear { input, out_dim } => out_dim * (input.len() + 1),
            LayerJacobian::Identity { dim } => *dim,
        }
    }

    fn tr_apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.out_dim() {
            return Err(Error::Dimension(format!(
                "vector of length {} for a Jacobian with {} rows",
                u.len(),
                self.out_dim()
            )));
        }
        Ok(match self {
            LayerJacobian::Linear { input, .. } => {
                let mut out = Vec::with_capacity(self.param_dim());
                for &um in u {
                    out.extend(input.iter().map(|x| um * x));
                }
                out.extend_from_slice(u);
                out
            }
            LayerJacobian::Identity { .. } => u.to_vec(),
        })
    }
}

/// Structured Jacobian of `vˡ` with respect to `θˡ` at the traced point.
pub fn structured_jacobian(trace: &ForwardTrace, layer: usize) -> Result<LayerJacobian> {
    let input = trace
        .inputs
        .get(layer)
        .ok_or_else(|| Error::Dimension(format!("layer {layer} out of range")))?;
    Ok(LayerJacobian::Linear {
        input: input.clone(),
        out_dim: trace.pre_activations[layer].len(),
    })
}

/// Dense `d_v x d_θ` Jacobian of `vˡ` with respect to `θˡ`.
pub fn layer_jacobian(trace: &ForwardTrace, layer: usize) -> Result<Matrix> {
    Ok(structured_jacobian(trace, layer)?.to_dense())
}

/// `∂L/∂vˡ` for every layer, by backpropagation through the trace.
pub fn pre_activation_grads(trace: &ForwardTrace, params: &ModelParams) -> Vec<Vec<f64>> {
    let n = params.num_layers();
    let mut deltas = vec![Vec::new(); n];
    let mut upstream = softmax(&trace.logits);
    upstream[trace.label] -= 1.0;
    for l in (0..n).rev() {
        let act = params.specs[l].activation;
        let delta: Vec<f64> = upstream
            .iter()
            .zip(&trace.pre_activations[l])
            .map(|(g, &v)| g * act.derivative(v))
            .collect();
        if l > 0 {
            upstream = params.layers[l]
                .weight
                .tr_matvec(&delta)
                .expect("weight shape matches trace");
        }
        deltas[l] = delta;
    }
    deltas
}

/// Exact per-layer gradient of the clean loss, flattened per layer.
pub fn gradients_from_trace(trace: &ForwardTrace, params: &ModelParams) -> Vec<Vec<f64>> {
    pre_activation_grads(trace, params)
        .iter()
        .enumerate()
        .map(|(l, delta)| {
            LayerJacobian::Linear {
                input: trace.inputs[l].clone(),
                out_dim: delta.len(),
            }
            .tr_apply(delta)
            .expect("delta matches layer width")
        })
        .collect()
}

pub fn backprop_gradients(x: &[f64], y: usize, params: &ModelParams) -> Result<Vec<Vec<f64>>> {
    let trace = forward_clean(x, y, params)?;
    Ok(gradients_from_trace(&trace, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_layer(w: Vec<f64>, b: Vec<f64>, n_in: usize, n_out: usize) -> ModelParams {
        ModelParams::new(
            vec![LayerSpec::new(n_in, n_out, Activation::Identity)],
            vec![LayerParams {
                weight: Matrix::new(n_out, n_in, w).unwrap(),
                bias: b,
            }],
        )
        .unwrap()
    }

    fn three_layer(seed: u64, act: Activation) -> ModelParams {
        ModelParams::init(
            vec![
                LayerSpec::new(5, 6, act),
                LayerSpec::new(6, 4, act),
                LayerSpec::new(4, 3, Activation::Identity),
            ],
            &RngStream::new(seed),
        )
        .unwrap()
    }

    #[test]
    fn identity_net_hand_loss() {
        let p = single_layer(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0], 2, 2);
        let t = forward_clean(&[1.0, 0.0], 0, &p).unwrap();
        assert_eq!(t.logits, vec![1.0, 0.0]);
        assert!((t.loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_give_log_k() {
        let p = ModelParams::zeros(vec![
            LayerSpec::new(3, 4, Activation::Gelu),
            LayerSpec::new(4, 7, Activation::Identity),
        ])
        .unwrap();
        let t = forward_clean(&[0.3, -2.0, 5.0], 4, &p).unwrap();
        assert!((t.loss - 7f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn noisy_offset_hand_loss() {
        let p = single_layer(vec![0.0; 4], vec![0.0; 2], 2, 2);
        let loss = forward_noisy(&[0.4, 0.9], 0, &p, 0, &[1.0, 0.0]).unwrap();
        assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_is_bit_identical() {
        for act in [Activation::Gelu, Activation::Relu, Activation::Identity] {
            let p = three_layer(11, act);
            let x = [0.1, -0.4, 0.9, 0.0, 2.0];
            let t = forward_clean(&x, 2, &p).unwrap();
            for l in 0..3 {
                let z = vec![0.0; t.pre_activations[l].len()];
                assert_eq!(forward_noisy_from_trace(&t, &p, l, &z).unwrap(), t.loss);
                assert_eq!(forward_noisy(&x, 2, &p, l, &z).unwrap(), t.loss);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let p = three_layer(1, Activation::Gelu);
        assert!(matches!(forward_clean(&[1.0; 4], 0, &p), Err(Error::Dimension(_))));
        assert!(matches!(forward_clean(&[1.0; 5], 3, &p), Err(Error::Dimension(_))));
        let t = forward_clean(&[1.0; 5], 0, &p).unwrap();
        assert!(forward_noisy_from_trace(&t, &p, 0, &[0.0; 5]).is_err());
        assert!(layer_jacobian(&t, 3).is_err());
    }

    #[test]
    fn architecture_validation() {
        assert!(validate_architecture(&[]).is_err());
        assert!(validate_architecture(&[LayerSpec::new(2, 2, Activation::Relu)]).is_err());
        assert!(validate_architecture(&[
            LayerSpec::new(2, 3, Activation::Relu),
            LayerSpec::new(4, 2, Activation::Identity)
        ])
        .is_err());
    }

    #[test]
    fn scalar_layer_jacobian() {
        let p = single_layer(vec![0.7], vec![0.1], 1, 1);
        let t = forward_clean(&[2.5], 0, &p).unwrap();
        let j = layer_jacobian(&t, 0).unwrap();
        assert_eq!(j.as_slice(), &[2.5, 1.0]);
    }

    #[test]
    fn weight_gram_is_block_diagonal() {
        let (a, b) = (0.3, -1.7);
        let p = single_layer(vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 0.0], 2, 2);
        let t = forward_clean(&[a, b], 0, &p).unwrap();
        let j = layer_jacobian(&t, 0).unwrap();
        let g = j.gram();
        let block = [[a * a, a * b], [a * b, b * b]];
        for r in 0..4 {
            for c in 0..4 {
                let expect = if r / 2 == c / 2 { block[r % 2][c % 2] } else { 0.0 };
                assert_eq!(g.get(r, c), expect);
            }
        }
    }

    #[test]
    fn structured_ops_match_dense() {
        let p = three_layer(3, Activation::Gelu);
        let t = forward_clean(&[0.2, 0.1, -0.3, 0.8, -1.0], 1, &p).unwrap();
        for l in 0..3 {
            let s = structured_jacobian(&t, l).unwrap();
            let d = s.to_dense();
            let u: Vec<f64> = (0..d.rows()).map(|i| (i as f64).sin()).collect();
            let z: Vec<f64> = (0..d.cols()).map(|i| (i as f64).cos()).collect();
            assert_eq!(s.tr_apply(&u).unwrap(), d.tr_matvec(&u).unwrap());
            let a = s.apply(&z).unwrap();
            let b = d.matvec(&z).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_input_softmax_regression_has_zero_weight_gradient() {
        let p = single_layer(vec![0.3, -0.2, 0.5, 0.1], vec![0.0, 0.0], 2, 2);
        let g = backprop_gradients(&[0.0, 0.0], 1, &p).unwrap();
        assert!(g[0][..4].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_regression_textbook_gradient() {
        let p = single_layer(vec![0.3, -0.2, 0.5, 0.1, 0.0, 1.0], vec![0.1, -0.1], 3, 2);
        let x = [1.0, 2.0, -0.5];
        let t = forward_clean(&x, 1, &p).unwrap();
        let mut r = softmax(&t.logits);
        r[1] -= 1.0;
        let g = backprop_gradients(&x, 1, &p).unwrap();
        for m in 0..2 {
            for n in 0..3 {
                assert!((g[0][m * 3 + n] - r[m] * x[n]).abs() < 1e-15);
            }
            assert!((g[0][6 + m] - r[m]).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_derivative_matches_numeric() {
        let h = 1e-5;
        for i in -400..=400 {
            let x = i as f64 / 50.0;
            let a = Activation::Gelu;
            let numeric = (a.apply(x + h) - a.apply(x - h)) / (2.0 * h);
            let exact = a.derivative(x);
            let err = (numeric - exact).abs() / exact.abs().max(1e-3);
            assert!(err < 1e-8, "x = {x}: {exact} vs {numeric}");
        }
    }

    #[test]
    fn params_dump_round_trip() {
        let p = three_layer(5, Activation::Relu);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(ModelParams::read_from(&buf[..]).unwrap(), p);
        let err = ModelParams::read_from(&buf[..buf.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    fn central_difference(params: &ModelParams, x: &[f64], y: usize, l: usize, j: usize, h: f64) -> f64 {
        let dim = params.specs()[l].num_params();
        let mut e = vec![0.0; dim];
        e[j] = 1.0;
        let mut plus = params.clone();
        plus.add_to_layer(l, &e, h).unwrap();
        let mut minus = params.clone();
        minus.add_to_layer(l, &e, -h).unwrap();
        let lp = forward_clean(x, y, &plus).unwrap().loss;
        let lm = forward_clean(x, y, &minus).unwrap().loss;
        (lp - lm) / (2.0 * h)
    }

    #[test]
    fn backprop_matches_finite_differences() {
        for (seed, act) in [(21u64, Activation::Gelu), (22, Activation::Identity)] {
            let p = three_layer(seed, act);
            let x = [0.5, -1.2, 0.3, 0.9, -0.1];
            let g = backprop_gradients(&x, 1, &p).unwrap();
            for (l, gl) in g.iter().enumerate() {
                for (j, &exact) in gl.iter().enumerate() {
                    let numeric = central_difference(&p, &x, 1, l, j, 1e-5);
                    assert!(
                        (exact - numeric).abs() <= 1e-7 * exact.abs().max(1.0),
                        "{act:?} layer {l} param {j}: {exact} vs {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn central_difference_error_shrinks_quadratically() {
        let p = three_layer(31, Activation::Gelu);
        let x = [1.0, 0.4, -0.7, 0.2, 0.6];
        let exact = backprop_gradients(&x, 0, &p).unwrap()[0][3];
        let e1 = (central_difference(&p, &x, 0, 0, 3, 1e-2) - exact).abs();
        let e2 = (central_difference(&p, &x, 0, 0, 3, 5e-3) - exact).abs();
        let slope = (e1 / e2).log2();
        assert!((slope - 2.0).abs() < 0.2, "observed order {slope}");
    }

    #[test]
    fn pre_activation_grads_match_noisy_differences() {
        let p = three_layer(41, Activation::Gelu);
        let t = forward_clean(&[0.3, -0.3, 0.8, 0.1, 0.0], 2, &p).unwrap();
        let deltas = pre_activation_grads(&t, &p);
        let h = 1e-5;
        for l in 0..3 {
            for i in 0..deltas[l].len() {
                let mut z = vec![0.0; deltas[l].len()];
                z[i] = h;
                let lp = forward_noisy_from_trace(&t, &p, l, &z).unwrap();
                z[i] = -h;
                let lm = forward_noisy_from_trace(&t, &p, l, &z).unwrap();
                assert!(((lp - lm) / (2.0 * h) - deltas[l][i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn param_noise_equals_perturbed_weights() {
        let p = three_layer(51, Activation::Relu);
        let x = [0.2, 0.7, -0.4, 1.1, 0.5];
        let t = forward_clean(&x, 0, &p).unwrap();
        let z: Vec<f64> = (0..p.specs()[1].num_params()).map(|i| 0.01 * (i as f64).sin()).collect();
        let via_shift = forward_param_noisy_from_trace(&t, &p, 1, &z).unwrap();
        let mut moved = p.clone();
        moved.add_to_layer(1, &z, 1.0).unwrap();
        let direct = forward_clean(&x, 0, &moved).unwrap().loss;
        assert!((via_shift - direct).abs() < 1e-12);
    }
}
