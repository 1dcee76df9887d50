use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{BenchCell, BenchConfig, ConfigError, Resolved};
use super::train::{train, TrainData};
use crate::content_stats::Summary;

pub const BENCH_REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub balanced_accuracy: f64,
    pub overall_accuracy: f64,
    pub mean_box_l1: f64,
    pub target_risk: f64,
    pub params_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: BenchCell,
    pub resolved: Resolved,
    pub runs: Vec<SeedResult>,
    pub balanced_accuracy: Summary,
    pub overall_accuracy: Summary,
    pub mean_box_l1: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub version: u32,
    pub seeds: Vec<u64>,
    /// Same order as the configured cells.
    pub cells: Vec<CellSummary>,
}

fn summarize(runs: &[SeedResult], f: impl Fn(&SeedResult) -> f64) -> Summary {
    let mut v: Vec<f64> = runs.iter().map(f).collect();
    Summary::of(&mut v).unwrap_or(Summary {
        min: f64::NAN,
        median: f64::NAN,
        max: f64::NAN,
    })
}

/// Runs every cell for every seed. Each run builds its own generator from its
/// seed, so all cells see the same initializations and batch draws for a
/// given seed and results do not depend on `threads`.
pub fn bench(cfg: &BenchConfig, data: &TrainData, threads: Option<usize>) -> Result<BenchReport, ConfigError> {
    let cells = cfg.cells();
    let base = &cfg.experiment.train;
    let mut resolved = Vec::with_capacity(cells.len());
    for cell in &cells {
        resolved.push(cell.apply(base).resolve()?);
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let run = |&(c, seed): &(usize, u64)| -> Result<SeedResult, ConfigError> {
        let mut run_cfg = cells[c].apply(base);
        run_cfg.seed = seed;
        // only the final metrics are kept
        run_cfg.log_every = run_cfg.steps.max(1);
        let (report, _) = train(&run_cfg, data)?;
        Ok(SeedResult {
            seed,
            balanced_accuracy: report.metrics.balanced_accuracy,
            overall_accuracy: report.metrics.overall_accuracy,
            mean_box_l1: report.metrics.mean_box_l1,
            target_risk: report.metrics.target_risk,
            params_sha256: report.params_sha256,
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| ConfigError::Invalid(format!("thread pool: {e}")))?;
    let results: Vec<SeedResult> = pool.install(|| jobs.par_iter().map(run).collect::<Result<_, _>>())?;

    let per_cell = cfg.seeds.len();
    let cells = cells
        .into_iter()
        .zip(resolved)
        .zip(results.chunks(per_cell.max(1)).chain(std::iter::repeat(&[][..])))
        .map(|((cell, resolved), runs)| CellSummary {
            cell,
            resolved,
            balanced_accuracy: summarize(runs, |r| r.balanced_accuracy),
            overall_accuracy: summarize(runs, |r| r.overall_accuracy),
            mean_box_l1: summarize(runs, |r| r.mean_box_l1),
            runs: runs.to_vec(),
        })
        .collect();
    Ok(BenchReport {
        version: BENCH_REPORT_VERSION,
        seeds: cfg.seeds.clone(),
        cells,
    })
}

/// Aligned plain-text table, one row per cell in configured order.
pub fn render_table(report: &BenchReport) -> String {
    let header = [
        "cell",
        "bal_acc_median",
        "bal_acc_min",
        "bal_acc_max",
        "acc_median",
        "box_l1_median",
    ];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for c in &report.cells {
        rows.push(vec![
            c.cell.name.clone(),
            format!("{:.4}", c.balanced_accuracy.median),
            format!("{:.4}", c.balanced_accuracy.min),
            format!("{:.4}", c.balanced_accuracy.max),
            format!("{:.4}", c.overall_accuracy.median),
            format!("{:.4}", c.mean_box_l1.median),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i == 0 {
                    format!("{s:<w$}", w = widths[i])
                } else {
                    format!("{s:>w$}", w = widths[i])
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}
