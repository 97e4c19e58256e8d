//! The two training loops: forward-noise likelihood-ratio training and the
//! backpropagation baseline with per-example clipping.
//!
//! Randomness is addressed by path under the run seed:
//!
//! | path                          | use                        |
//! |-------------------------------|----------------------------|
//! | `[0]`                         | parameter initialization   |
//! | `[1, step]`                   | batch sampling             |
//! | `[2, step, layer, example]`   | forward noise              |
//! | `[3, step, layer]`            | remediation noise          |
//! | `[4, step]`                   | baseline output noise      |
//! | `[5, epoch]`                  | permutation batching       |
//! | `[9]`                         | train/validation split     |
//!
//! Per-example work fans out over threads and is reduced in batch order, so
//! a run is bit-identical for a fixed seed whatever the thread count.

use log::{info, warn};

use crate::accountant::{Mechanism, RdpLedger, SrgmParams};
use crate::controller::{control_layer, BatchCovariance, ControllerReport};
use crate::error::{Error, Result};
use crate::estimator::{estimate_example_gradient, InjectMode};
use crate::network::{forward_clean, gradients_from_trace, ForwardTrace, ModelParams};
use crate::numkit::{fill_gaussian, l2_norm, RngStream};
use crate::par::map_indexed;
use crate::sampler::{draw_batch, permutation_batches, poisson_batch, SamplingMode};

use super::config::{Algorithm, RunConfig};
use super::data::Dataset;
use super::metrics::MetricsRow;
use super::optim::{learning_rate, Optimizer};

/// One optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub row: MetricsRow,
    /// Controller outcome per layer (empty for the baseline).
    pub controllers: Vec<ControllerReport>,
    pub rejections: u64,
    /// Whether every step so far lies in the proven accounting regime.
    pub regime_valid: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub records: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn rows(&self) -> Vec<MetricsRow> {
        self.records.iter().map(|r| r.row.clone()).collect()
    }
}

/// Fraction of `data` classified correctly.
pub fn accuracy(params: &ModelParams, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let hits = map_indexed(data.len(), |i| {
        forward_clean(data.input(i), data.label(i), params).map(|t| t.predicted_class() == data.label(i))
    });
    let mut correct = 0usize;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / data.len() as f64)
}

pub fn train(config: &RunConfig, train_set: &Dataset, valid_set: &Dataset) -> Result<TrainOutcome> {
    match config.algorithm {
        Algorithm::DpUlr => train_dp_ulr(config, train_set, valid_set),
        Algorithm::DpSgd => train_dp_sgd(config, train_set, valid_set),
    }
}

struct Common {
    root: RngStream,
    params: ModelParams,
    optimizer: Optimizer,
    ledger: RdpLedger,
    costs: Vec<(f64, bool)>,
    strict: bool,
    delta: f64,
    steps: usize,
    per_epoch: usize,
}

fn setup(config: &RunConfig, data: &Dataset, mechanism: Mechanism) -> Result<Common> {
    config.validate()?;
    let arch = &config.architecture;
    if arch[0].in_dim != data.dim() || arch[arch.len() - 1].out_dim < data.num_classes() {
        return Err(Error::Config(format!(
            "architecture {}→{} does not fit data of dimension {} with {} classes",
            arch[0].in_dim,
            arch[arch.len() - 1].out_dim,
            data.dim(),
            data.num_classes()
        )));
    }
    let p = &config.privacy;
    let n_bar = p.n_bar.unwrap_or(data.len());
    if n_bar > data.len() {
        warn!("n_bar {n_bar} exceeds the training set size {}", data.len());
    }
    let srgm = SrgmParams::new(p.q, p.sigma0, p.n_b as u64, n_bar as u64)?;
    if config.sampling == SamplingMode::Permutation {
        warn!("permutation batching is not covered by the privacy accounting");
    }
    let ledger = RdpLedger::new(mechanism, crate::accountant::default_alpha_grid())?;
    let costs = ledger.step_costs(&srgm)?;
    if config.strict_accounting && !costs.iter().any(|c| c.1) {
        return Err(Error::Validity(format!(
            "no Rényi order is covered by the bound for {srgm:?}"
        )));
    }
    if !srgm.regime_valid() {
        warn!("privacy parameters {srgm:?} are outside the proven regime; epsilon is reported but flagged");
    }
    let root = RngStream::new(config.seed);
    let params = ModelParams::init(config.architecture.clone(), &root.child(0))?;
    let optimizer = Optimizer::new(config.optimizer.kind, &params);
    Ok(Common {
        root,
        params,
        optimizer,
        ledger,
        costs,
        strict: config.strict_accounting,
        delta: p.delta,
        steps: config.total_steps(),
        per_epoch: config.steps_per_epoch(),
    })
}

/// Batch indices for a step of the forward-noise loop.
fn next_batch(
    config: &RunConfig,
    data: &Dataset,
    c: &Common,
    step: usize,
    epoch_batches: &mut Option<(usize, Vec<Vec<usize>>)>,
) -> Result<(Vec<usize>, u64)> {
    let p = &config.privacy;
    match config.sampling {
        SamplingMode::Poisson => {
            let mut rng = c.root.descend(&[1, step as u64]).generator();
            let draw = draw_batch(data.len(), p.q, p.n_b, &mut rng)?;
            Ok((draw.indices, draw.rejections))
        }
        SamplingMode::Permutation => {
            let epoch = step / c.per_epoch;
            if epoch_batches.as_ref().is_none_or(|(e, _)| *e != epoch) {
                let size = ((p.q * data.len() as f64).round() as usize).clamp(1, data.len());
                let mut rng = c.root.descend(&[5, epoch as u64]).generator();
                *epoch_batches = Some((epoch, permutation_batches(data.len(), size, &mut rng)?));
            }
            let batches = &epoch_batches.as_ref().unwrap().1;
            Ok((batches[(step % c.per_epoch) % batches.len()].clone(), 0))
        }
    }
}

fn traces_for(params: &ModelParams, data: &Dataset, batch: &[usize]) -> Result<Vec<ForwardTrace>> {
    map_indexed(batch.len(), |j| forward_clean(data.input(batch[j]), data.label(batch[j]), params))
        .into_iter()
        .collect()
}

fn mean_loss(traces: &[ForwardTrace]) -> f64 {
    if traces.is_empty() {
        return f64::NAN;
    }
    traces.iter().map(|t| t.loss).sum::<f64>() / traces.len() as f64
}

/// Accounting, evaluation and bookkeeping shared by both loops.
#[allow(clippy::too_many_arguments)]
fn finish_step(
    c: &mut Common,
    step: usize,
    batch_size: usize,
    train_loss: f64,
    controllers: Vec<ControllerReport>,
    rejections: u64,
    train_set: &Dataset,
    valid_set: &Dataset,
) -> Result<StepRecord> {
    c.ledger.record_costs(&c.costs)?;
    let (epsilon, alpha_star, _) = c.ledger.epsilon(c.delta, c.strict)?;
    let regime_valid = c.ledger.validity.iter().any(|&v| v);
    let epoch_end = (step + 1) % c.per_epoch == 0 || step + 1 == c.steps;
    let (train_acc, valid_acc) = if epoch_end {
        (Some(accuracy(&c.params, train_set)?), Some(accuracy(&c.params, valid_set)?))
    } else {
        (None, None)
    };
    let min_eig_min = controllers.iter().map(|r| r.min_eig).reduce(f64::min);
    let sigma_max = controllers.iter().map(|r| r.sigma).reduce(f64::max);
    let remediated_layers = controllers.iter().filter(|r| r.remediated).count();
    let row = MetricsRow {
        step: step + 1,
        epoch: step / c.per_epoch + 1,
        batch_size,
        train_loss,
        train_acc,
        valid_acc,
        epsilon,
        alpha_star,
        min_eig_min,
        sigma_max,
        remediated_layers,
    };
    if epoch_end {
        info!(
            "epoch {} step {}: loss {:.4} train acc {:.4} valid acc {:.4} epsilon {:.4}",
            row.epoch,
            row.step,
            train_loss,
            train_acc.unwrap_or(f64::NAN),
            valid_acc.unwrap_or(f64::NAN),
            epsilon
        );
    }
    Ok(StepRecord {
        row,
        controllers,
        rejections,
        regime_valid,
    })
}

/// Forward-noise training with the privacy controller.
pub fn train_dp_ulr(config: &RunConfig, train_set: &Dataset, valid_set: &Dataset) -> Result<TrainOutcome> {
    let mut c = setup(config, train_set, Mechanism::Srgm)?;
    let p = config.privacy.clone();
    let mut records = Vec::with_capacity(c.steps);
    let mut epoch_batches = None;
    for step in 0..c.steps {
        let run = |c: &mut Common, epoch_batches: &mut Option<(usize, Vec<Vec<usize>>)>| -> Result<StepRecord> {
            let (batch, rejections) = next_batch(config, train_set, c, step, epoch_batches)?;
            let traces = traces_for(&c.params, train_set, &batch)?;
            let losses: Vec<f64> = traces.iter().map(|t| t.loss).collect();
            let mut grads = Vec::with_capacity(c.params.num_layers());
            let mut reports = Vec::with_capacity(c.params.num_layers());
            for layer in 0..c.params.num_layers() {
                let spec = c.params.specs()[layer];
                let cov = match config.inject {
                    InjectMode::Output => {
                        let inputs: Vec<&[f64]> = traces.iter().map(|t| t.inputs[layer].as_slice()).collect();
                        BatchCovariance::linear_layer(spec.out_dim, &inputs, &losses)?
                    }
                    InjectMode::Params => {
                        BatchCovariance::scaled_identity(spec.num_params(), losses.iter().map(|l| l * l).sum())
                    }
                };
                let ctl = control_layer(layer, &cov, p.k, p.clip, p.sigma0, config.remediation_floor)?;
                let sigma = ctl.report.sigma;
                log::debug!(
                    "step {} layer {layer}: min_eig {:e} max_eig {:e} sigma {:e} remediated {}",
                    step + 1,
                    ctl.report.min_eig,
                    cov.spectrum().map(|s| s.max()).unwrap_or(f64::NAN),
                    sigma,
                    ctl.report.remediated
                );
                let params = &c.params;
                let root = &c.root;
                let per_example = map_indexed(batch.len(), |j| {
                    let stream = root.descend(&[2, step as u64, layer as u64, batch[j] as u64]);
                    estimate_example_gradient(&traces[j], params, layer, config.inject, sigma, p.k, p.clip, &stream)
                });
                let mut sum = vec![0.0; spec.num_params()];
                for g in per_example {
                    sum.iter_mut().zip(&g?.values).for_each(|(a, b)| *a += b);
                }
                if let Some(plan) = &ctl.plan {
                    let mut rng = c.root.descend(&[3, step as u64, layer as u64]).generator();
                    sum.iter_mut().zip(plan.sample(&mut rng)).for_each(|(a, b)| *a += b);
                }
                if log::log_enabled!(log::Level::Debug) {
                    let mut truth = vec![0.0; spec.num_params()];
                    for t in &traces {
                        let g = crate::estimator::reference_gradient(t, &c.params, layer);
                        truth.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                    let cos = crate::numkit::dot(&sum, &truth) / (l2_norm(&sum) * l2_norm(&truth));
                    log::debug!("step {} layer {layer}: cosine to batch gradient {cos:.4}", step + 1);
                }
                let scale = 1.0 / p.n_b as f64;
                grads.push(sum.into_iter().map(|v| v * scale).collect::<Vec<f64>>());
                reports.push(ctl.report);
            }
            let lr = learning_rate(&config.optimizer, step / c.per_epoch);
            for (layer, g) in grads.iter().enumerate() {
                c.optimizer.step(&mut c.params, layer, g, lr)?;
            }
            finish_step(c, step, batch.len(), mean_loss(&traces), reports, rejections, train_set, valid_set)
        };
        records.push(run(&mut c, &mut epoch_batches).map_err(|e| e.at_step(step + 1))?);
    }
    Ok(TrainOutcome {
        params: c.params,
        records,
    })
}

/// Per-example clipped backpropagation with Gaussian output noise.
pub fn train_dp_sgd(config: &RunConfig, train_set: &Dataset, valid_set: &Dataset) -> Result<TrainOutcome> {
    let mut c = setup(config, train_set, Mechanism::Sgm)?;
    let p = config.privacy.clone();
    let expected = p.q * train_set.len() as f64;
    let mut records = Vec::with_capacity(c.steps);
    for step in 0..c.steps {
        let run = |c: &mut Common| -> Result<StepRecord> {
            let mut rng = c.root.descend(&[1, step as u64]).generator();
            let batch = poisson_batch(train_set.len(), p.q, &mut rng)?;
            let traces = traces_for(&c.params, train_set, &batch)?;
            let params = &c.params;
            let per_example = map_indexed(traces.len(), |j| {
                let mut g = gradients_from_trace(&traces[j], params);
                let norm = g.iter().map(|l| l2_norm(l).powi(2)).sum::<f64>().sqrt();
                if norm > p.clip {
                    let s = p.clip / norm;
                    g.iter_mut().flatten().for_each(|v| *v *= s);
                }
                g
            });
            let mut sums: Vec<Vec<f64>> = c.params.specs().iter().map(|s| vec![0.0; s.num_params()]).collect();
            for g in per_example {
                for (acc, gl) in sums.iter_mut().zip(g) {
                    acc.iter_mut().zip(gl).for_each(|(a, b)| *a += b);
                }
            }
            let mut rng = c.root.descend(&[4, step as u64]).generator();
            let lr = learning_rate(&config.optimizer, step / c.per_epoch);
            for (layer, mut s) in sums.into_iter().enumerate() {
                let mut noise = vec![0.0; s.len()];
                fill_gaussian(&mut rng, p.sigma0 * p.clip, &mut noise);
                s.iter_mut().zip(&noise).for_each(|(a, z)| *a = (*a + z) / expected);
                c.optimizer.step(&mut c.params, layer, &s, lr)?;
            }
            finish_step(c, step, batch.len(), mean_loss(&traces), Vec::new(), 0, train_set, valid_set)
        };
        records.push(run(&mut c).map_err(|e| e.at_step(step + 1))?);
    }
    Ok(TrainOutcome {
        params: c.params,
        records,
    })
}
