//! Deterministic aggregation of raw histories into statistics, win rates
//! and plot-data files.
//!
//! Aggregation is single threaded and pure: the same histories produce the
//! same bytes. Series are keyed by (method, task) with methods in a fixed
//! canonical order and tasks in first-appearance order, seeds ascending.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use anyhow::{bail, Context};

use looptune::bo::{BoHistory, MethodKind};

/// All per-seed series of one (method, task) cell, plus their statistics.
#[derive(Debug, Clone)]
pub struct MethodTaskSeries {
    pub method: MethodKind,
    pub task_label: String,
    /// Seed indices in ascending order; rows of the matrices below.
    pub seeds: Vec<u64>,
    /// Best cost so far, `[seed][t]`.
    pub best: Vec<Vec<f64>>,
    /// Raw per-iteration cost, `[seed][t]`.
    pub cost: Vec<Vec<f64>>,
    /// Running cost sum, `[seed][t]`.
    pub cumulative: Vec<Vec<f64>>,
    pub best_mean: Vec<f64>,
    pub best_sd: Vec<f64>,
    /// Lower median: element `(n - 1) / 2` of the sorted seeds.
    pub best_median: Vec<f64>,
    pub cost_mean: Vec<f64>,
    pub cost_sd: Vec<f64>,
    pub cumulative_mean: Vec<f64>,
    pub cumulative_sd: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct AggregateResult {
    /// Shared iteration count of every series.
    pub horizon: usize,
    pub series: Vec<MethodTaskSeries>,
}

impl AggregateResult {
    pub fn get(&self, method: MethodKind, task: &str) -> Option<&MethodTaskSeries> {
        self.series.iter().find(|s| s.method == method && s.task_label == task)
    }

    /// Task labels in first-appearance order.
    pub fn tasks(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for s in &self.series {
            if !out.contains(&s.task_label.as_str()) {
                out.push(&s.task_label);
            }
        }
        out
    }
}

fn method_rank(m: MethodKind) -> usize {
    match m {
        MethodKind::Blackbox => 0,
        MethodKind::Multitask => 1,
        MethodKind::Hierarchical => 2,
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample standard deviation; zero for a single value.
pub fn sample_sd(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Lower median: the smaller of the two central order statistics when the
/// count is even, so the result is always an observed value.
pub fn lower_median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("comparable values"));
    sorted[(sorted.len() - 1) / 2]
}

/// Group histories into (method, task) cells and compute per-iteration
/// statistics. Every history must have the same iteration count.
pub fn aggregate(histories: &[BoHistory]) -> anyhow::Result<AggregateResult> {
    if histories.is_empty() {
        bail!("aggregation needs at least one history");
    }
    let horizon = histories[0].records.len();
    if horizon == 0 {
        bail!("histories must have at least one record");
    }

    let mut task_order: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(usize, usize), Vec<&BoHistory>> = BTreeMap::new();
    for h in histories {
        if h.records.len() != horizon {
            bail!(
                "history ({}, {}, seed {}) has {} records, expected {}",
                h.method.name(),
                h.task_label,
                h.seed_index,
                h.records.len(),
                horizon
            );
        }
        let task_pos = match task_order.iter().position(|t| *t == h.task_label) {
            Some(p) => p,
            None => {
                task_order.push(h.task_label.clone());
                task_order.len() - 1
            }
        };
        cells.entry((method_rank(h.method), task_pos)).or_default().push(h);
    }

    let mut series = Vec::with_capacity(cells.len());
    for histories in cells.into_values() {
        let mut sorted: Vec<&BoHistory> = histories;
        sorted.sort_by_key(|h| h.seed_index);
        for pair in sorted.windows(2) {
            if pair[0].seed_index == pair[1].seed_index {
                bail!(
                    "duplicate history for ({}, {}, seed {})",
                    pair[0].method.name(),
                    pair[0].task_label,
                    pair[0].seed_index
                );
            }
        }
        let mut cell = MethodTaskSeries {
            method: sorted[0].method,
            task_label: sorted[0].task_label.clone(),
            seeds: sorted.iter().map(|h| h.seed_index).collect(),
            best: Vec::new(),
            cost: Vec::new(),
            cumulative: Vec::new(),
            best_mean: Vec::with_capacity(horizon),
            best_sd: Vec::with_capacity(horizon),
            best_median: Vec::with_capacity(horizon),
            cost_mean: Vec::with_capacity(horizon),
            cost_sd: Vec::with_capacity(horizon),
            cumulative_mean: Vec::with_capacity(horizon),
            cumulative_sd: Vec::with_capacity(horizon),
        };
        for h in &sorted {
            cell.best.push(h.records.iter().map(|r| r.best_so_far).collect());
            cell.cost.push(h.records.iter().map(|r| r.cost).collect());
            cell.cumulative.push(h.records.iter().map(|r| r.cumulative).collect());
        }
        for t in 0..horizon {
            let col = |rows: &Vec<Vec<f64>>| -> Vec<f64> { rows.iter().map(|r| r[t]).collect() };
            let best = col(&cell.best);
            let cost = col(&cell.cost);
            let cumulative = col(&cell.cumulative);
            cell.best_mean.push(mean(&best));
            cell.best_sd.push(sample_sd(&best));
            cell.best_median.push(lower_median(&best));
            cell.cost_mean.push(mean(&cost));
            cell.cost_sd.push(sample_sd(&cost));
            cell.cumulative_mean.push(mean(&cumulative));
            cell.cumulative_sd.push(sample_sd(&cumulative));
        }
        series.push(cell);
    }
    Ok(AggregateResult { horizon, series })
}

/// Strict paired wins of `a` over `b` at 1-based iteration `t`, matched on
/// seed index: (wins, pairs).
pub fn win_rate(
    a: &MethodTaskSeries,
    b: &MethodTaskSeries,
    t: usize,
) -> anyhow::Result<(usize, usize)> {
    if t == 0 || t > a.best_mean.len() || t > b.best_mean.len() {
        bail!("iteration {t} is outside the recorded horizon");
    }
    let mut wins = 0;
    let mut pairs = 0;
    for (i, seed) in a.seeds.iter().enumerate() {
        if let Some(j) = b.seeds.iter().position(|s| s == seed) {
            pairs += 1;
            if a.best[i][t - 1] < b.best[j][t - 1] {
                wins += 1;
            }
        }
    }
    Ok((wins, pairs))
}

fn plot_file(ts: &[f64], center: &[f64], sd: &[f64]) -> String {
    let mut out = String::new();
    for ((t, c), s) in ts.iter().zip(center).zip(sd) {
        let lo = (c - s).max(0.0);
        let hi = c + s;
        writeln!(out, "{t} {c} {lo} {hi}").unwrap();
    }
    out
}

/// Every aggregate output as (file name, content) pairs: one statistics CSV
/// and three plot-data files per (method, task), plus per-task win-rate
/// tables and the linear-growth reference for cumulative plots.
pub fn emit_files(agg: &AggregateResult) -> anyhow::Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    let ts: Vec<f64> = (1..=agg.horizon).map(|t| t as f64).collect();

    for s in &agg.series {
        let tag = format!("{}_{}", s.method.name(), s.task_label);
        let mut stats = String::from(
            "t,best_mean,best_sd,best_median,cost_mean,cost_sd,cumulative_mean,cumulative_sd\n",
        );
        for t in 0..agg.horizon {
            writeln!(
                stats,
                "{},{},{},{},{},{},{},{}",
                t + 1,
                s.best_mean[t],
                s.best_sd[t],
                s.best_median[t],
                s.cost_mean[t],
                s.cost_sd[t],
                s.cumulative_mean[t],
                s.cumulative_sd[t]
            )
            .unwrap();
        }
        files.push((format!("stats_{tag}.csv"), stats));
        files.push((format!("best_{tag}.dat"), plot_file(&ts, &s.best_mean, &s.best_sd)));
        files.push((format!("cost_{tag}.dat"), plot_file(&ts, &s.cost_mean, &s.cost_sd)));
        files.push((
            format!("cumulative_{tag}.dat"),
            plot_file(&ts, &s.cumulative_mean, &s.cumulative_sd),
        ));
    }

    for task in agg.tasks() {
        let cells: Vec<&MethodTaskSeries> =
            agg.series.iter().filter(|s| s.task_label == task).collect();

        // Every method starts from the same weights with the same episode
        // seed, so the pooled first-iteration mean is method independent.
        let first: Vec<f64> =
            cells.iter().flat_map(|s| s.cost.iter().map(|row| row[0])).collect();
        let slope = mean(&first);
        let mut reference = String::new();
        for t in &ts {
            writeln!(reference, "{t} {}", slope * t).unwrap();
        }
        files.push((format!("cumulative_reference_{task}.dat"), reference));

        if cells.len() > 1 {
            let mut table = String::from("t,method_a,method_b,wins,pairs,rate\n");
            for t in 1..=agg.horizon {
                for a in &cells {
                    for b in &cells {
                        if a.method == b.method {
                            continue;
                        }
                        let (wins, pairs) = win_rate(a, b, t)
                            .with_context(|| format!("win rate at iteration {t}"))?;
                        let rate = if pairs == 0 { 0.0 } else { wins as f64 / pairs as f64 };
                        writeln!(
                            table,
                            "{t},{},{},{wins},{pairs},{rate}",
                            a.method.name(),
                            b.method.name()
                        )
                        .unwrap();
                    }
                }
            }
            files.push((format!("winrates_{task}.csv"), table));
        }
    }
    Ok(files)
}

/// Least-squares slope of ln(y) against ln(t) over 1-based iterations
/// `[t_lo, t_hi]`; the growth exponent when y is roughly polynomial in t.
pub fn loglog_slope(values: &[f64], t_lo: usize, t_hi: usize) -> anyhow::Result<f64> {
    if t_lo == 0 || t_lo >= t_hi || t_hi > values.len() {
        bail!("bad slope window [{t_lo}, {t_hi}] for {} values", values.len());
    }
    let points: Vec<(f64, f64)> = (t_lo..=t_hi)
        .map(|t| ((t as f64).ln(), values[t - 1]))
        .map(|(x, y)| (x, y.ln()))
        .collect();
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        bail!("slope window contains nonpositive values");
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    Ok(sxy / sxx)
}
