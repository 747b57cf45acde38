//! Line-oriented text serialization for kernels and datasets.
//!
//! One record per line, fields separated by single spaces. Floats are
//! written with Rust's shortest round-trip formatting, so parsing recovers
//! every value bit for bit.
//!
//! ```text
//! kernel se 1.25 0.5 2
//! dataset 3 2 0.0001
//! row 0.1 -0.2 1.5
//! ```

use nalgebra::{DMatrix, DVector};

use super::kernel::{KernelKind, KernelSpec};
use super::posterior::GpDataset;
use crate::{Error, Result};

pub fn kernel_to_line(kernel: &KernelSpec) -> String {
    let mut line = format!("kernel {} {}", kernel.kind.name(), kernel.signal_variance);
    for l in &kernel.lengthscales {
        line.push(' ');
        line.push_str(&l.to_string());
    }
    line
}

pub fn kernel_from_line(line: &str) -> Result<KernelSpec> {
    let mut parts = line.split_whitespace();
    match parts.next() {
        Some("kernel") => {}
        other => {
            return Err(Error::Parse(format!(
                "expected a `kernel` record, found `{}`",
                other.unwrap_or("")
            )))
        }
    }
    let kind = KernelKind::from_name(
        parts.next().ok_or_else(|| Error::Parse("kernel record missing kind".into()))?,
    )?;
    let mut values = Vec::new();
    for field in parts {
        values.push(parse_f64(field)?);
    }
    if values.len() < 2 {
        return Err(Error::Parse(
            "kernel record needs a signal variance and at least one lengthscale".into(),
        ));
    }
    KernelSpec::new(kind, values[0], values[1..].to_vec())
}

pub fn dataset_to_lines(data: &GpDataset) -> String {
    let mut out = format!("dataset {} {} {}\n", data.len(), data.dim(), data.noise_var);
    for i in 0..data.len() {
        out.push_str("row");
        for j in 0..data.dim() {
            out.push(' ');
            out.push_str(&data.inputs[(i, j)].to_string());
        }
        out.push(' ');
        out.push_str(&data.targets[i].to_string());
        out.push('\n');
    }
    out
}

pub fn dataset_from_lines(text: &str) -> Result<GpDataset> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::Parse("empty dataset text".into()))?;
    let mut h = header.split_whitespace();
    if h.next() != Some("dataset") {
        return Err(Error::Parse("expected a `dataset` header line".into()));
    }
    let n: usize = h
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Parse("dataset header missing row count".into()))?;
    let d: usize = h
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Parse("dataset header missing dimension".into()))?;
    let noise_var = parse_f64(
        h.next().ok_or_else(|| Error::Parse("dataset header missing noise variance".into()))?,
    )?;

    let mut inputs = DMatrix::zeros(n, d);
    let mut targets = DVector::zeros(n);
    for i in 0..n {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("dataset ends after {i} of {n} rows")))?;
        let mut fields = line.split_whitespace();
        if fields.next() != Some("row") {
            return Err(Error::Parse(format!("expected a `row` record at line {}", i + 2)));
        }
        let values: Vec<f64> =
            fields.map(parse_f64).collect::<Result<_>>().map_err(|e| match e {
                Error::Parse(msg) => Error::Parse(format!("row {i}: {msg}")),
                other => other,
            })?;
        if values.len() != d + 1 {
            return Err(Error::Parse(format!(
                "row {i} has {} fields, expected {}",
                values.len(),
                d + 1
            )));
        }
        for j in 0..d {
            inputs[(i, j)] = values[j];
        }
        targets[i] = values[d];
    }
    GpDataset::new(inputs, targets, noise_var)
}

fn parse_f64(field: &str) -> Result<f64> {
    field.parse().map_err(|_| Error::Parse(format!("`{field}` is not a decimal number")))
}
