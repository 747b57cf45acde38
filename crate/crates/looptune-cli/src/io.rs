//! CSV and manifest output.
//!
//! Every file written here is a pure function of the experiment config, so
//! two runs with the same settings produce byte-identical output. Floats are
//! printed with the shortest round-trip representation and no file carries
//! wall-clock time.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context};
use sha2::{Digest, Sha256};

use looptune::bo::{BoHistory, BoRecord, BoundsRow, MethodKind};
use looptune::closed_loop::Trajectory;
use looptune::mpc::ParamVector;

use crate::config::hex_string;

pub const HISTORY_HEADER: &str =
    "t,method,task,seed,theta1,theta2,theta3,theta4,theta5,cost,best_so_far,cumulative,surrogate_cost,bound";
pub const BOUNDS_HEADER: &str =
    "task,seed,t,theta1,theta2,theta3,theta4,theta5,surrogate_cost,bound,observed_cost,held";
pub const STREAMS_HEADER: &str = "method,task,seed,checksum";

fn push_opt(line: &mut String, value: Option<f64>) {
    match value {
        Some(v) => write!(line, ",{v}").unwrap(),
        None => line.push(','),
    }
}

pub fn history_to_csv(histories: &[BoHistory]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for h in histories {
        for r in &h.records {
            let mut line = format!("{},{},{},{}", r.t, h.method.name(), h.task_label, h.seed_index);
            for v in r.theta.values() {
                write!(line, ",{v}").unwrap();
            }
            write!(line, ",{},{},{}", r.cost, r.best_so_far, r.cumulative).unwrap();
            push_opt(&mut line, r.surrogate_cost);
            push_opt(&mut line, r.bound);
            out.push_str(&line);
            out.push('\n');
        }
    }
    out
}

fn parse_f64(field: &str, what: &str) -> anyhow::Result<f64> {
    field.parse::<f64>().with_context(|| format!("parsing {what} from '{field}'"))
}

fn parse_opt(field: &str, what: &str) -> anyhow::Result<Option<f64>> {
    if field.is_empty() { Ok(None) } else { parse_f64(field, what).map(Some) }
}

/// Parse a history CSV back into per-unit histories, in file order.
///
/// The CSV does not carry abort flags or episode seeds, so those fields come
/// back as `false` and `0`; aggregation never reads them.
pub fn history_from_csv(text: &str) -> anyhow::Result<Vec<BoHistory>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(header) if header == HISTORY_HEADER => {}
        other => bail!("unexpected history header: {other:?}"),
    }
    let mut histories: Vec<BoHistory> = Vec::new();
    let mut index: BTreeMap<(String, String, u64), usize> = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 14 {
            bail!("history line {}: expected 14 fields, got {}", lineno + 2, fields.len());
        }
        let t: usize = fields[0].parse().context("parsing iteration")?;
        let method = MethodKind::parse(fields[1])?;
        let task = fields[2].to_string();
        let seed: u64 = fields[3].parse().context("parsing seed")?;
        let mut theta = [0.0; 5];
        for (slot, field) in theta.iter_mut().zip(&fields[4..9]) {
            *slot = parse_f64(field, "weight")?;
        }
        let record = BoRecord {
            t,
            theta: ParamVector::new(theta)?,
            cost: parse_f64(fields[9], "cost")?,
            best_so_far: parse_f64(fields[10], "best_so_far")?,
            cumulative: parse_f64(fields[11], "cumulative")?,
            aborted: false,
            episode_seed: 0,
            surrogate_cost: parse_opt(fields[12], "surrogate_cost")?,
            bound: parse_opt(fields[13], "bound")?,
        };
        let key = (fields[1].to_string(), task.clone(), seed);
        let idx = *index.entry(key).or_insert_with(|| {
            histories.push(BoHistory {
                method,
                task_label: task,
                seed_index: seed,
                records: Vec::new(),
            });
            histories.len() - 1
        });
        histories[idx].records.push(record);
    }
    Ok(histories)
}

pub fn bounds_to_csv(rows: &[(u64, BoundsRow)]) -> String {
    let mut out = String::from(BOUNDS_HEADER);
    out.push('\n');
    for (seed, row) in rows {
        let mut line = format!("{},{},{}", row.task_label, seed, row.t);
        for v in row.theta.values() {
            write!(line, ",{v}").unwrap();
        }
        push_opt(&mut line, row.surrogate_cost);
        push_opt(&mut line, row.bound);
        write!(line, ",{}", row.observed_cost).unwrap();
        match row.held {
            Some(h) => write!(line, ",{h}").unwrap(),
            None => line.push(','),
        }
        out.push_str(&line);
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamRow {
    pub method: MethodKind,
    pub task_label: String,
    pub seed_index: u64,
    pub checksum: u64,
}

pub fn streams_to_csv(rows: &[StreamRow]) -> String {
    let mut out = String::from(STREAMS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{},{},{},{:016x}", r.method.name(), r.task_label, r.seed_index, r.checksum)
            .unwrap();
    }
    out
}

/// Closed-loop trace as CSV, with the producing weights and episode seed in
/// a comment line so a plot can be reproduced from the file alone.
pub fn trajectory_to_csv(traj: &Trajectory) -> String {
    let mut out = String::from("# theta=");
    for (i, v) in traj.theta.values().iter().enumerate() {
        if i > 0 {
            out.push(';');
        }
        write!(out, "{v}").unwrap();
    }
    writeln!(out, " episode_seed={}", traj.seed).unwrap();
    out.push_str("k,x1,x2,x3,x4,u\n");
    let mut x = traj.initial;
    for (k, step) in traj.steps.iter().enumerate() {
        writeln!(out, "{k},{},{},{},{},{}", x.pos, x.vel, x.angle, x.angular_vel, step.input)
            .unwrap();
        x = step.state;
    }
    // The final state has no input of its own.
    writeln!(out, "{},{},{},{},{},", traj.steps.len(), x.pos, x.vel, x.angle, x.angular_vel)
        .unwrap();
    out
}

/// Manifest over a set of already-written files: the config hash plus one
/// content hash per file, sorted by name.
pub fn manifest_text(config_hash: &str, files: &[(String, String)]) -> String {
    let mut entries: Vec<(String, String)> = files.to_vec();
    entries.sort();
    let mut out = format!("config_sha256={config_hash}\n");
    for (name, hash) in entries {
        writeln!(out, "{name}={hash}").unwrap();
    }
    out
}

pub fn sha256_hex(text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(text.as_bytes());
    hex_string(&hasher.finalize())
}

/// Write one output file and record its hash for the manifest.
pub fn write_tracked(
    dir: &Path,
    name: &str,
    text: &str,
    manifest: &mut Vec<(String, String)>,
) -> anyhow::Result<()> {
    std::fs::write(dir.join(name), text)
        .with_context(|| format!("writing {}", dir.join(name).display()))?;
    manifest.push((name.to_string(), sha256_hex(text)));
    Ok(())
}
