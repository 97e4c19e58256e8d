//! Batch sampling.
//!
//! The analyzed mechanism includes every example independently with
//! probability `q` and redraws the whole batch whenever it holds fewer than
//! `n_b` examples. Fixed-size batches from a shuffled permutation are also
//! available, but the privacy bound does not cover them.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{log_binom_pmf, log_binom_sf};

/// Attempts before [`draw_batch`] gives up on reaching `n_b` examples.
pub const MAX_ATTEMPTS: u64 = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Poisson sampling with rejection of batches smaller than `n_b`.
    #[default]
    Poisson,
    /// Shuffle once per epoch and cut fixed-size batches. Not covered by the
    /// accountant.
    Permutation,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchDraw {
    /// Sorted dataset indices.
    pub indices: Vec<usize>,
    /// Number of rejected draws before this one was accepted.
    pub rejections: u64,
}

impl BatchDraw {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn validate(dataset_size: usize, q: f64, n_b: usize) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("sampling rate must lie in (0, 1], got {q}")));
    }
    if n_b == 0 || n_b > dataset_size {
        return Err(Error::Config(format!(
            "rejection threshold {n_b} must lie in [1, {dataset_size}]"
        )));
    }
    Ok(())
}

/// Poisson-samples `dataset_size` indices at rate `q`, redrawing until the
/// batch holds at least `n_b` of them.
pub fn draw_batch<R: Rng + ?Sized>(
    dataset_size: usize,
    q: f64,
    n_b: usize,
    rng: &mut R,
) -> Result<BatchDraw> {
    validate(dataset_size, q, n_b)?;
    if n_b as f64 > q * dataset_size as f64 {
        log::warn!(
            "rejection threshold {n_b} exceeds the expected batch size {:.1}",
            q * dataset_size as f64
        );
    }
    if q == 1.0 {
        return Ok(BatchDraw {
            indices: (0..dataset_size).collect(),
            rejections: 0,
        });
    }
    let mut indices = Vec::with_capacity((q * dataset_size as f64 * 1.5) as usize + n_b);
    for attempt in 0..MAX_ATTEMPTS {
        indices.clear();
        indices.extend((0..dataset_size).filter(|_| rng.random::<f64>() < q));
        if indices.len() >= n_b {
            return Ok(BatchDraw {
                indices,
                rejections: attempt,
            });
        }
    }
    Err(Error::Config(format!(
        "no batch of at least {n_b} examples in {MAX_ATTEMPTS} draws (q = {q}, N = {dataset_size})"
    )))
}

/// Plain Poisson subsampling with no rejection; the batch may be empty.
pub fn poisson_batch<R: Rng + ?Sized>(dataset_size: usize, q: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("sampling rate must lie in (0, 1], got {q}")));
    }
    Ok((0..dataset_size).filter(|_| rng.random::<f64>() < q).collect())
}

/// Law of the accepted batch size: `Binomial(N, q)` conditioned on `>= n_b`.
pub fn batch_size_pmf(dataset_size: usize, q: f64, n_b: usize) -> Result<Vec<(usize, f64)>> {
    validate(dataset_size, q, n_b)?;
    if q == 1.0 {
        return Ok(vec![(dataset_size, 1.0)]);
    }
    let n = dataset_size as u64;
    let log_norm = log_binom_sf(n_b as u64 - 1, n, q)?;
    (n_b..=dataset_size)
        .map(|k| Ok((k, (log_binom_pmf(k as u64, n, q)? - log_norm).exp())))
        .collect()
}

/// Probability that a single Poisson draw is accepted.
pub fn acceptance_probability(dataset_size: usize, q: f64, n_b: usize) -> Result<f64> {
    validate(dataset_size, q, n_b)?;
    if q == 1.0 {
        return Ok(1.0);
    }
    Ok(log_binom_sf(n_b as u64 - 1, dataset_size as u64, q)?.exp())
}

/// One epoch of fixed-size batches cut from a fresh permutation; a short
/// final remainder is dropped.
pub fn permutation_batches<R: Rng + ?Sized>(
    dataset_size: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size > dataset_size {
        return Err(Error::Config(format!(
            "batch size {batch_size} must lie in [1, {dataset_size}]"
        )));
    }
    let mut order: Vec<usize> = (0..dataset_size).collect();
    order.shuffle(rng);
    Ok(order
        .chunks_exact(batch_size)
        .map(|c| {
            let mut b = c.to_vec();
            b.sort_unstable();
            b
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::RngStream;

    #[test]
    fn full_rate_takes_everything() {
        let mut rng = RngStream::new(1).generator();
        let b = draw_batch(17, 1.0, 5, &mut rng).unwrap();
        assert_eq!(b.indices, (0..17).collect::<Vec<_>>());
        assert_eq!(b.rejections, 0);
    }

    #[test]
    fn singleton_dataset_forces_size_one() {
        let mut rng = RngStream::new(2).generator();
        for _ in 0..200 {
            let b = draw_batch(1, 0.5, 1, &mut rng).unwrap();
            assert_eq!(b.indices, vec![0]);
        }
    }

    #[test]
    fn argument_errors() {
        let mut rng = RngStream::new(3).generator();
        assert!(matches!(draw_batch(5, 0.5, 6, &mut rng), Err(Error::Config(_))));
        assert!(matches!(draw_batch(5, 0.0, 1, &mut rng), Err(Error::Domain(_))));
        assert!(matches!(draw_batch(5, 1.5, 1, &mut rng), Err(Error::Domain(_))));
        assert!(matches!(batch_size_pmf(5, 0.5, 0), Err(Error::Config(_))));
    }

    #[test]
    fn pathological_threshold_hits_attempt_cap() {
        let mut rng = RngStream::new(4).generator();
        assert!(matches!(
            draw_batch(200, 0.001, 200, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pmf_hand_cases() {
        let pmf = batch_size_pmf(2, 0.5, 1).unwrap();
        assert_eq!(pmf.len(), 2);
        assert!((pmf[0].1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((pmf[1].1 - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(batch_size_pmf(9, 1.0, 3).unwrap(), vec![(9, 1.0)]);
    }

    #[test]
    fn pmf_sums_to_one() {
        for (n, q, nb) in [(30, 0.3, 9), (50, 0.2, 10), (1000, 0.01, 5), (6, 0.5, 3)] {
            let total: f64 = batch_size_pmf(n, q, nb).unwrap().iter().map(|p| p.1).sum();
            assert!((total - 1.0).abs() < 1e-10, "{n} {q} {nb}: {total}");
        }
    }

    #[test]
    fn draws_are_sorted_unique_and_large_enough() {
        let mut rng = RngStream::new(5).generator();
        for _ in 0..500 {
            let b = draw_batch(40, 0.2, 6, &mut rng).unwrap();
            assert!(b.len() >= 6);
            assert!(b.indices.windows(2).all(|w| w[0] < w[1]));
            assert!(b.indices.iter().all(|&i| i < 40));
        }
    }

    #[test]
    fn permutation_epoch_covers_disjoint_batches() {
        let mut rng = RngStream::new(6).generator();
        let batches = permutation_batches(103, 10, &mut rng).unwrap();
        assert_eq!(batches.len(), 10);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 100);
    }
}
