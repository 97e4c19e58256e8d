//! Datasets: IDX files (optionally gzipped) and synthetic Gaussian blobs.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numkit::{fill_gaussian, RngStream};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} inputs but {} labels",
                inputs.len(),
                labels.len()
            )));
        }
        let dim = inputs.first().map_or(0, Vec::len);
        if inputs.iter().any(|x| x.len() != dim) {
            return Err(Error::Dimension("inputs have different lengths".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Dimension(format!("label {bad} with {num_classes} classes")));
        }
        if inputs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite input value".into()));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Shuffles with `stream` and holds out the last `valid_count` examples.
    pub fn split(&self, valid_count: usize, stream: &RngStream) -> Result<(Dataset, Dataset)> {
        if valid_count >= self.len() {
            return Err(Error::Config(format!(
                "validation size {valid_count} leaves no training data out of {}",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut stream.generator());
        let (train, valid) = order.split_at(self.len() - valid_count);
        Ok((self.subset(train), self.subset(valid)))
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format {
            offset: bytes.len() as u64,
            message: "file ends inside the header".into(),
        })
}

/// Images as flattened rows scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Vec<Vec<f64>>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let size = rows * cols;
    if size == 0 {
        return Err(Error::Format {
            offset: 8,
            message: format!("zero image size {rows}x{cols}"),
        });
    }
    let body = &bytes[16..];
    if body.len() != n * size {
        return Err(Error::Format {
            offset: (16 + body.len().min(n * size)) as u64,
            message: format!("{} pixel bytes for {n} images of {size}", body.len()),
        });
    }
    Ok(body
        .chunks_exact(size)
        .map(|c| c.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format {
            offset: (8 + body.len().min(n)) as u64,
            message: format!("{} label bytes for {n} labels", body.len()),
        });
    }
    Ok(body.iter().map(|&b| usize::from(b)).collect())
}

/// Reads an IDX image/label pair; gzip is detected from the content.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&read_maybe_gz(images_path)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?)?;
    if images.len() != labels.len() {
        return Err(Error::Format {
            offset: 4,
            message: format!("{} labels for {} images", labels.len(), images.len()),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 9) {
        return Err(Error::Format {
            offset: 8,
            message: format!("label {bad} outside 0..9"),
        });
    }
    Dataset::new(images, labels, 10)
}

/// Unit-variance Gaussian blobs, min-max scaled per feature into `[0, 1]`.
///
/// With at most `2·dim` classes the centers are `±(separation/2)·e_j`, so the
/// two first classes sit `separation` apart; otherwise they are random
/// directions of length `separation/2`.
pub fn synth_dataset(seed: u64, n: usize, dim: usize, classes: usize, separation: f64) -> Result<Dataset> {
    if n == 0 || dim == 0 || classes == 0 {
        return Err(Error::Config("synthetic data needs n, dim and classes >= 1".into()));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!("separation must be >= 0, got {separation}")));
    }
    let root = RngStream::new(seed);
    let mut rng = root.child(0).generator();
    let half = 0.5 * separation;
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|c| {
            let mut u = vec![0.0; dim];
            if classes <= 2 * dim {
                u[c / 2] = if c % 2 == 0 { half } else { -half };
                return u;
            }
            fill_gaussian(&mut rng, 1.0, &mut u);
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            u.into_iter().map(|v| half * v / norm).collect()
        })
        .collect();
    let mut rng = root.child(1).generator();
    let mut labels = Vec::with_capacity(n);
    let mut inputs = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.random_range(0..classes);
        let mut x = vec![0.0; dim];
        fill_gaussian(&mut rng, 1.0, &mut x);
        x.iter_mut().zip(&centers[y]).for_each(|(a, c)| *a += c);
        labels.push(y);
        inputs.push(x);
    }
    for j in 0..dim {
        let lo = inputs.iter().map(|x| x[j]).fold(f64::INFINITY, f64::min);
        let hi = inputs.iter().map(|x| x[j]).fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        for x in inputs.iter_mut() {
            x[j] = if span > 0.0 { (x[j] - lo) / span } else { 0.5 };
        }
    }
    Dataset::new(inputs, labels, classes)
}
