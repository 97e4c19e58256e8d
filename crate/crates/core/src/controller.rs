//! Noise-scale selection.
//!
//! For one example the `K`-averaged proxy has covariance close to
//! `Σ̃/(σ²K)` with the standard covariance `Σ̃ = L₀²·JᵀJ`. Summed over a batch
//! the floor `σ₀²C²` in every direction holds exactly when
//!
//! ```text
//! σ² ≤ min λ(Σ Σ̃) / (K·C²·σ₀²)
//! ```
//!
//! and the controller takes equality. When the batch sum is singular or
//! nearly so, σ is instead sized from the largest eigenvalue and every
//! eigendirection that falls short of the floor is topped up with extra
//! Gaussian noise, so the combined covariance is `σ₀²C²·I`.
//!
//! For a linear layer with noise on its output the Jacobian row of unit `m`
//! is `x̃ = (x, 1)` placed in that unit's weights and bias, so the batch sum is
//! `I_out ⊗ M` with `M = Σ L₀²·x̃x̃ᵀ` once parameters are grouped by unit.
//! [`BatchCovariance`] keeps that form and only ever decomposes `M`. When the
//! batch is smaller than `M`, the eigenpairs come from the batch Gram matrix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ForwardTrace;
use crate::numkit::{clamp_psd, fill_gaussian, sym_eigendecompose, Matrix};

/// Eigenvalues at or below this fraction of the largest count as zero.
pub const RANK_TOL: f64 = 1e-9;
/// Default remediation trigger: `min λ < floor · trace`.
pub const DEFAULT_REMEDIATION_FLOOR: f64 = 1e-12;

/// Per-layer, per-step controller outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerReport {
    pub layer: usize,
    pub min_eig: f64,
    pub sigma: f64,
    pub remediated: bool,
    /// Extra variance per eigendirection of the (block) covariance; empty
    /// when not remediated.
    pub extra_noise_variances: Vec<f64>,
}

/// `L₀²·JᵀJ`.
pub fn standard_covariance(trace: &ForwardTrace, jac: &Matrix) -> Result<Matrix> {
    if !trace.loss.is_finite() {
        return Err(Error::Numeric("non-finite clean loss".into()));
    }
    Ok(jac.gram().scale(trace.loss * trace.loss))
}

/// How gradient coordinates map onto copies of the covariance block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// Copy `m` occupies coordinates `m·b .. (m+1)·b`.
    Contiguous,
    /// Weights row-major then biases: copy `m` is row `m` of the weight
    /// matrix followed by bias `m`.
    LinearLayer { in_dim: usize },
}

#[derive(Debug, Clone)]
enum Block {
    Explicit(Matrix),
    /// Rows `r_d`, with the block equal to `Σ r_d r_dᵀ`.
    Factor(Matrix),
}

/// A batch-summed standard covariance `I_copies ⊗ M`.
#[derive(Debug, Clone)]
pub struct BatchCovariance {
    copies: usize,
    block_dim: usize,
    block: Block,
    layout: Layout,
}

impl BatchCovariance {
    /// An arbitrary symmetric PSD matrix.
    pub fn dense(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Dimension(format!(
                "covariance of shape {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        Ok(Self {
            copies: 1,
            block_dim: m.rows(),
            block: Block::Explicit(m),
            layout: Layout::Contiguous,
        })
    }

    /// `scale · I_dim`.
    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        Self {
            copies: dim,
            block_dim: 1,
            block: Block::Explicit(Matrix::from_diag(&[scale])),
            layout: Layout::Contiguous,
        }
    }

    /// Output-noise covariance of a linear layer from its batch inputs and
    /// clean losses.
    pub fn linear_layer(out_dim: usize, inputs: &[&[f64]], losses: &[f64]) -> Result<Self> {
        if inputs.len() != losses.len() {
            return Err(Error::Dimension(format!(
                "{} inputs but {} losses",
                inputs.len(),
                losses.len()
            )));
        }
        let in_dim = inputs.first().map_or(0, |x| x.len());
        if inputs.iter().any(|x| x.len() != in_dim) {
            return Err(Error::Dimension("ragged layer inputs".into()));
        }
        let b = in_dim + 1;
        let mut rows = Vec::with_capacity(inputs.len() * b);
        for (x, &l) in inputs.iter().zip(losses) {
            rows.extend(x.iter().map(|v| l * v));
            rows.push(l);
        }
        Ok(Self {
            copies: out_dim,
            block_dim: b,
            block: Block::Factor(Matrix::new(inputs.len(), b, rows)?),
            layout: Layout::LinearLayer { in_dim },
        })
    }

    pub fn dim(&self) -> usize {
        self.copies * self.block_dim
    }

    /// The full matrix in gradient coordinates.
    pub fn to_dense(&self) -> Matrix {
        let m = self.block_matrix();
        let n = self.dim();
        let mut out = Matrix::zeros(n, n);
        for c in 0..self.copies {
            for i in 0..self.block_dim {
                for j in 0..self.block_dim {
                    out.set(self.coord(c, i), self.coord(c, j), m.get(i, j));
                }
            }
        }
        out
    }

    fn block_matrix(&self) -> Matrix {
        match &self.block {
            Block::Explicit(m) => m.clone(),
            Block::Factor(r) => r.gram(),
        }
    }

    fn coord(&self, copy: usize, i: usize) -> usize {
        match self.layout {
            Layout::Contiguous => copy * self.block_dim + i,
            Layout::LinearLayer { in_dim } => {
                if i < in_dim {
                    copy * in_dim + i
                } else {
                    self.copies * in_dim + copy
                }
            }
        }
    }

    /// Eigenvalues of the block (descending, with multiplicity `copies` in
    /// the full matrix) and an orthonormal basis of the eigendirections that
    /// were resolved. Directions missing from the basis have eigenvalue 0.
    pub fn spectrum(&self) -> Result<Spectrum> {
        let b = self.block_dim;
        match &self.block {
            Block::Factor(r) if r.rows() < b => {
                let small = r.matmul(&r.transpose())?;
                let eig = sym_eigendecompose(&small)?;
                let lmax = eig.max().max(0.0);
                let mut values = vec![0.0; b];
                let mut cols = Vec::new();
                for (i, &lam) in eig.values.iter().enumerate() {
                    values[i] = clamp_psd(lam, small.frobenius_norm())?;
                    if lam > RANK_TOL * lmax && lam > 0.0 {
                        let v = eig.vectors.column(i);
                        let u = r.tr_matvec(&v)?;
                        let s = 1.0 / lam.sqrt();
                        cols.push(u.into_iter().map(|x| x * s).collect::<Vec<_>>());
                    }
                }
                let k = cols.len();
                let basis = Matrix::from_fn(b, k, |i, j| cols[j][i]);
                Ok(Spectrum { values, basis })
            }
            _ => {
                let m = self.block_matrix();
                let eig = sym_eigendecompose(&m)?;
                let norm = m.frobenius_norm();
                let values = eig
                    .values
                    .iter()
                    .map(|&v| clamp_psd(v, norm))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Spectrum {
                    values,
                    basis: eig.vectors,
                })
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Spectrum {
    /// Block eigenvalues, descending, length = block dimension.
    pub values: Vec<f64>,
    /// Columns are orthonormal eigenvectors for the leading `basis.cols()`
    /// values.
    pub basis: Matrix,
}

impl Spectrum {
    pub fn min(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }

    pub fn max(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    pub fn block_rank(&self) -> usize {
        let lmax = self.max();
        self.values
            .iter()
            .filter(|&&v| v > RANK_TOL * lmax && v > 0.0)
            .count()
    }
}

/// Rank of a PSD matrix (eigenvalues above `1e-9·λmax`) and whether it is
/// full.
pub fn check_assumption_full_rank(batch_cov_sum: &Matrix) -> Result<(bool, usize)> {
    let cov = BatchCovariance::dense(batch_cov_sum.clone())?;
    let s = cov.spectrum()?;
    let rank = s.block_rank();
    Ok((rank == cov.dim(), rank))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaChoice {
    /// `σ² = min λ/(K C² σ₀²)`.
    Accept { sigma: f64, min_eig: f64 },
    /// The floor cannot be met by σ alone.
    Remediate { min_eig: f64 },
}

fn check_knobs(k: usize, clip: f64, sigma0: f64) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("repeat count must be at least 1".into()));
    }
    if !(clip > 0.0 && clip.is_finite()) {
        return Err(Error::Config(format!("clip bound must be positive, got {clip}")));
    }
    if !(sigma0 > 0.0 && sigma0.is_finite()) {
        return Err(Error::Config(format!("noise multiplier must be positive, got {sigma0}")));
    }
    Ok(())
}

fn sigma_for(eig: f64, k: usize, clip: f64, sigma0: f64) -> f64 {
    (eig / (k as f64 * clip * clip * sigma0 * sigma0)).sqrt()
}

/// Decision rule on a precomputed spectrum.
pub fn select_sigma_from_spectrum(
    cov: &BatchCovariance,
    spectrum: &Spectrum,
    k: usize,
    clip: f64,
    sigma0: f64,
    floor: f64,
) -> Result<SigmaChoice> {
    check_knobs(k, clip, sigma0)?;
    let min_eig = spectrum.min();
    let trace = cov.copies as f64 * spectrum.values.iter().sum::<f64>();
    let deficient = spectrum.block_rank() < cov.block_dim || min_eig < floor * trace || min_eig <= 0.0;
    if deficient {
        Ok(SigmaChoice::Remediate { min_eig })
    } else {
        Ok(SigmaChoice::Accept {
            sigma: sigma_for(min_eig, k, clip, sigma0),
            min_eig,
        })
    }
}

/// Largest σ meeting the floor for a dense batch sum, or a remediation
/// signal when it is singular.
pub fn select_sigma(batch_cov_sum: &Matrix, k: usize, clip: f64, sigma0: f64) -> Result<SigmaChoice> {
    let cov = BatchCovariance::dense(batch_cov_sum.clone())?;
    let s = cov.spectrum()?;
    select_sigma_from_spectrum(&cov, &s, k, clip, sigma0, DEFAULT_REMEDIATION_FLOOR)
}

/// Extra noise needed on top of the proxies when σ alone cannot meet the
/// floor.
#[derive(Debug, Clone)]
pub struct RemediationPlan {
    /// Working σ, sized from the largest eigenvalue (1 when the covariance
    /// vanishes).
    pub sigma: f64,
    /// `max(0, σ₀²C² − λᵢ/(σ²K))` for each resolved block direction.
    pub extra_variances: Vec<f64>,
    /// Standard deviation for the unresolved complement of the basis.
    pub complement_std: f64,
    basis: Matrix,
    copies: usize,
    block_dim: usize,
    layout: Layout,
}

impl RemediationPlan {
    pub fn new(cov: &BatchCovariance, spectrum: &Spectrum, k: usize, clip: f64, sigma0: f64) -> Result<Self> {
        check_knobs(k, clip, sigma0)?;
        let target = sigma0 * sigma0 * clip * clip;
        let lmax = spectrum.max();
        let sigma = if lmax > 0.0 { sigma_for(lmax, k, clip, sigma0) } else { 1.0 };
        let r = if lmax > 0.0 { spectrum.basis.cols() } else { 0 };
        let extra_variances = spectrum.values[..r]
            .iter()
            .map(|&lam| (target - lam / (sigma * sigma * k as f64)).max(0.0))
            .collect();
        Ok(Self {
            sigma,
            extra_variances,
            complement_std: sigma0 * clip,
            basis: spectrum.basis.clone(),
            copies: cov.copies,
            block_dim: cov.block_dim,
            layout: cov.layout,
        })
    }

    /// Variances in every block direction, resolved ones first, then the
    /// complement.
    pub fn all_block_variances(&self) -> Vec<f64> {
        let c2 = self.complement_std * self.complement_std;
        let mut v = self.extra_variances.clone();
        v.resize(self.block_dim, c2);
        v
    }

    /// One draw of the extra noise in gradient coordinates.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let r = self.extra_variances.len();
        let b = self.block_dim;
        let std: Vec<f64> = self.extra_variances.iter().map(|v| v.sqrt()).collect();
        let mut out = vec![0.0; self.copies * b];
        let mut xi = vec![0.0; r];
        let mut eta = vec![0.0; if r < b { b } else { 0 }];
        let mut block = vec![0.0; b];
        for c in 0..self.copies {
            block.iter_mut().for_each(|v| *v = 0.0);
            fill_gaussian(rng, 1.0, &mut xi);
            for (j, (&s, &x)) in std.iter().zip(&xi).enumerate() {
                if s > 0.0 {
                    for (i, bi) in block.iter_mut().enumerate() {
                        *bi += s * x * self.basis.get(i, j);
                    }
                }
            }
            if r < b {
                fill_gaussian(rng, 1.0, &mut eta);
                let mut proj = eta.clone();
                for j in 0..r {
                    let dot: f64 = (0..b).map(|i| self.basis.get(i, j) * eta[i]).sum();
                    for (i, p) in proj.iter_mut().enumerate() {
                        *p -= dot * self.basis.get(i, j);
                    }
                }
                for (bi, p) in block.iter_mut().zip(&proj) {
                    *bi += self.complement_std * p;
                }
            }
            for (i, &v) in block.iter().enumerate() {
                let idx = match self.layout {
                    Layout::Contiguous => c * b + i,
                    Layout::LinearLayer { in_dim } => {
                        if i < in_dim {
                            c * in_dim + i
                        } else {
                            self.copies * in_dim + c
                        }
                    }
                };
                out[idx] = v;
            }
        }
        out
    }
}

/// One draw of remediation noise for a dense batch sum.
pub fn remediation_noise<R: Rng + ?Sized>(
    batch_cov_sum: &Matrix,
    k: usize,
    clip: f64,
    sigma0: f64,
    rng: &mut R,
) -> Result<(Vec<f64>, RemediationPlan)> {
    let cov = BatchCovariance::dense(batch_cov_sum.clone())?;
    let s = cov.spectrum()?;
    let plan = RemediationPlan::new(&cov, &s, k, clip, sigma0)?;
    Ok((plan.sample(rng), plan))
}

/// Full controller decision for one layer.
#[derive(Debug, Clone)]
pub struct LayerControl {
    pub report: ControllerReport,
    pub plan: Option<RemediationPlan>,
}

pub fn control_layer(
    layer: usize,
    cov: &BatchCovariance,
    k: usize,
    clip: f64,
    sigma0: f64,
    floor: f64,
) -> Result<LayerControl> {
    let spectrum = cov.spectrum()?;
    match select_sigma_from_spectrum(cov, &spectrum, k, clip, sigma0, floor)? {
        SigmaChoice::Accept { sigma, min_eig } => Ok(LayerControl {
            report: ControllerReport {
                layer,
                min_eig,
                sigma,
                remediated: false,
                extra_noise_variances: Vec::new(),
            },
            plan: None,
        }),
        SigmaChoice::Remediate { min_eig } => {
            let plan = RemediationPlan::new(cov, &spectrum, k, clip, sigma0)?;
            Ok(LayerControl {
                report: ControllerReport {
                    layer,
                    min_eig,
                    sigma: plan.sigma,
                    remediated: true,
                    extra_noise_variances: plan.all_block_variances(),
                },
                plan: Some(plan),
            })
        }
    }
}
