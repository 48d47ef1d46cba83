//! Experiment reports: CSV, human-readable tables and sweep data.

use std::fmt::Write as _;

use crate::perturb::Strategy;
use crate::train::{StrategyRow, SweepPoint};

pub const CSV_HEADER: &str = "strategy,p,sigma,mean,std,min,max,n_runs";
pub const SWEEP_HEADER: &str = "fraction,strategy,mean,std";
/// Marker threshold (accuracy units) for rows beating or trailing baseline.
pub const DEFAULT_ARROW_THRESHOLD: f64 = 0.003;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportMetadata {
    pub dataset: String,
    pub architecture: String,
    pub config_hash: String,
    /// Resolved configuration text; re-running from it reproduces the
    /// report.
    pub resolved_config: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub rows: Vec<StrategyRow>,
    pub metadata: ReportMetadata,
}

impl ExperimentReport {
    pub fn baseline(&self) -> Option<&StrategyRow> {
        self.rows.iter().find(|r| r.strategy == Strategy::None)
    }
}

fn hyper_cells(row: &StrategyRow) -> (String, String) {
    let p = if row.strategy.uses_p() {
        row.chosen.p.to_string()
    } else {
        String::new()
    };
    let sigma = if row.strategy.uses_sigma() {
        row.chosen.sigma.to_string()
    } else {
        String::new()
    };
    (p, sigma)
}

/// CSV with [`CSV_HEADER`], full-precision numbers, one line per row.
/// A `failed` strategy adds a `FAILED` marker line.
pub fn experiment_csv(rows: &[StrategyRow], failed: Option<Strategy>) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        let (p, sigma) = hyper_cells(row);
        writeln!(
            out,
            "{},{p},{sigma},{},{},{},{},{}",
            row.strategy, row.mean, row.std, row.min, row.max, row.n_runs
        )
        .expect("writing to a String");
    }
    if let Some(s) = failed {
        writeln!(out, "{s},FAILED,,,,,,0").expect("writing to a String");
    }
    out
}

/// `↑` when `mean - baseline >= threshold`, `↓` when
/// `baseline - mean >= threshold`.
pub fn marker(mean: f64, baseline: f64, threshold: f64) -> Option<char> {
    // absorbs representation error in e.g. 0.803 - 0.800
    let eps = 1e-12;
    let diff = mean - baseline;
    if diff >= threshold - eps {
        Some('↑')
    } else if -diff >= threshold - eps {
        Some('↓')
    } else {
        None
    }
}

/// Fixed-width table, four decimals, markers against the baseline row,
/// followed by the resolved configuration.
pub fn render_table(report: &ExperimentReport, threshold: f64) -> String {
    let baseline = report.baseline().map(|b| b.mean);
    let md = &report.metadata;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "dataset: {}  model: {}  config: {}",
        md.dataset, md.architecture, md.config_hash
    );
    let _ = writeln!(
        out,
        "{:<18} {:>6} {:>7} {:>8}  {:>7} {:>7} {:>7} {:>5}",
        "strategy", "p", "sigma", "mean", "std", "min", "max", "runs"
    );
    for row in &report.rows {
        let p = if row.strategy.uses_p() {
            format!("{:.4}", row.chosen.p)
        } else {
            "-".into()
        };
        let sigma = if row.strategy.uses_sigma() {
            format!("{:.4}", row.chosen.sigma)
        } else {
            "-".into()
        };
        let mark = match baseline {
            Some(b) if row.strategy != Strategy::None => marker(row.mean, b, threshold),
            _ => None,
        };
        let _ = writeln!(
            out,
            "{:<18} {:>6} {:>7} {:>8.4}{} {:>7.4} {:>7.4} {:>7.4} {:>5}",
            row.strategy.name(),
            p,
            sigma,
            row.mean,
            mark.unwrap_or(' '),
            row.std,
            row.min,
            row.max,
            row.n_runs
        );
    }
    let _ = writeln!(
        out,
        "\n↑/↓: mean differs from the baseline by at least {threshold:.4}"
    );
    let _ = writeln!(out, "\n# resolved configuration");
    out.push_str(&md.resolved_config);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub fraction: f64,
    pub strategy: Strategy,
    pub mean: f64,
    pub std: f64,
}

/// Long-format rows sorted by `(fraction, strategy)`.
pub fn sweep_rows(points: &[SweepPoint]) -> Vec<SweepRow> {
    let mut rows: Vec<SweepRow> = points
        .iter()
        .flat_map(|pt| {
            pt.rows.iter().map(move |r| SweepRow {
                fraction: pt.fraction,
                strategy: r.strategy,
                mean: r.mean,
                std: r.std,
            })
        })
        .collect();
    rows.sort_by(|a, b| a.fraction.total_cmp(&b.fraction).then(a.strategy.cmp(&b.strategy)));
    rows
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in sweep_rows(points) {
        writeln!(out, "{},{},{},{}", r.fraction, r.strategy, r.mean, r.std)
            .expect("writing to a String");
    }
    out
}
