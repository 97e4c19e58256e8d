use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Generator handed out by [`RngStream::generator`].
pub type StreamRng = ChaCha12Rng;

/// A reproducible source of randomness addressed by a seed and a path of
/// derivation labels (for instance step, layer, example).
///
/// The stream itself holds no state: every call to [`generator`] starts the
/// same ChaCha keystream, keyed by a hash of `(seed, path)`. Sibling paths
/// get unrelated keys, so child streams can be consumed from different
/// threads in any order without changing the numbers each one produces.
///
/// [`generator`]: RngStream::generator
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    seed: u64,
    path: Vec<u64>,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            path: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    pub fn child(&self, label: u64) -> Self {
        let mut path = self.path.clone();
        path.push(label);
        Self {
            seed: self.seed,
            path,
        }
    }

    pub fn descend(&self, labels: &[u64]) -> Self {
        let mut path = self.path.clone();
        path.extend_from_slice(labels);
        Self {
            seed: self.seed,
            path,
        }
    }

    pub fn generator(&self) -> StreamRng {
        let mut h = splitmix(self.seed ^ 0x6A09_E667_F3BC_C908);
        for (depth, &label) in self.path.iter().enumerate() {
            h = splitmix(h ^ splitmix(label.wrapping_add((depth as u64 + 1) << 56)));
        }
        let mut key = [0u8; 32];
        for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
            h = splitmix(h.wrapping_add(i as u64));
            chunk.copy_from_slice(&h.to_le_bytes());
        }
        ChaCha12Rng::from_seed(key)
    }
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `dim` i.i.d. `N(0, sigma²)` draws from the start of `stream`.
pub fn gaussian_vector(dim: usize, sigma: f64, stream: &RngStream) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    let mut rng = stream.generator();
    let mut out = vec![0.0; dim];
    fill_gaussian(&mut rng, sigma, &mut out);
    Ok(out)
}

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "noise scale must be positive and finite, got {sigma}"
        )))
    }
}

/// Overwrites `out` with `N(0, sigma²)` draws from `rng`.
pub fn fill_gaussian<R: rand::Rng + ?Sized>(rng: &mut R, sigma: f64, out: &mut [f64]) {
    for v in out.iter_mut() {
        let n: f64 = StandardNormal.sample(rng);
        *v = sigma * n;
    }
}
