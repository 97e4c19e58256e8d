//! Per-step metrics as CSV.
//!
//! Floats are written with Rust's shortest round-trip formatting, so parsing
//! an emitted file gives back the exact values. Missing values are empty
//! fields.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const HEADER: &str =
    "step,epoch,batch_size,train_loss,train_acc,valid_acc,epsilon,alpha_star,min_eig_min,sigma_max,remediated_layers";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub epoch: usize,
    pub batch_size: usize,
    pub train_loss: f64,
    /// Filled at the last step of each epoch.
    pub train_acc: Option<f64>,
    pub valid_acc: Option<f64>,
    pub epsilon: f64,
    pub alpha_star: f64,
    /// Smallest controller eigenvalue over layers (absent for DP-SGD).
    pub min_eig_min: Option<f64>,
    pub sigma_max: Option<f64>,
    pub remediated_layers: usize,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics<W: Write>(rows: &[MetricsRow], mut out: W) -> Result<()> {
    writeln!(out, "{HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            r.epoch,
            r.batch_size,
            r.train_loss,
            opt(r.train_acc),
            opt(r.valid_acc),
            r.epsilon,
            r.alpha_star,
            opt(r.min_eig_min),
            opt(r.sigma_max),
            r.remediated_layers
        )?;
    }
    Ok(())
}

pub fn emit_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_metrics(rows, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

/// Parses an emitted file; errors carry the byte offset of the bad line.
pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let bad = |offset: usize, msg: String| Error::Format {
        offset: offset as u64,
        message: msg,
    };
    let mut offset = 0;
    let mut rows = Vec::new();
    for (i, raw) in text.split_inclusive('\n').enumerate() {
        let at = offset;
        offset += raw.len();
        let line = raw.strip_suffix('\n').unwrap_or(raw);
        if i == 0 {
            if line != HEADER {
                return Err(bad(0, format!("unexpected header {line:?}")));
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(bad(at, format!("{} fields, expected 11", f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(at, format!("{s:?}: {e}")));
        let real = |s: &str| s.parse::<f64>().map_err(|e| bad(at, format!("{s:?}: {e}")));
        let maybe = |s: &str| if s.is_empty() { Ok(None) } else { real(s).map(Some) };
        rows.push(MetricsRow {
            step: int(f[0])?,
            epoch: int(f[1])?,
            batch_size: int(f[2])?,
            train_loss: real(f[3])?,
            train_acc: maybe(f[4])?,
            valid_acc: maybe(f[5])?,
            epsilon: real(f[6])?,
            alpha_star: real(f[7])?,
            min_eig_min: maybe(f[8])?,
            sigma_max: maybe(f[9])?,
            remediated_layers: int(f[10])?,
        });
    }
    if offset == 0 {
        return Err(bad(0, "empty metrics file".into()));
    }
    Ok(rows)
}
