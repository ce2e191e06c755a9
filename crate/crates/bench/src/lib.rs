//! Grid runner, report emitters and gradient checks behind the `bench` CLI.

pub mod config;
pub mod report;

use std::fmt;
use std::time::Instant;

use fadnest::engine::EngineConfig;
use fadnest::modeling::{Batch, Mlp, MlpConfig};
use rayon::prelude::*;

pub use config::{BenchConfig, Format, GridEntry};
pub use report::{BenchReport, BenchRow};

/// Environment variable capping the number of worker threads.
pub const WORKERS_ENV: &str = "FADNEST_BENCH_WORKERS";

/// Bad configuration or input file; the CLI exits with status 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub msg: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}", self.msg),
            None => f.write_str(&self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Worker count: the env cap if set, else rayon's default.
pub fn workers() -> usize {
    let default = rayon::current_num_threads();
    std::env::var(WORKERS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .map_or(default, |n| n.min(default.max(1)))
}

/// Training batch for a cell; depends only on widths, batch and seed.
pub fn batch_for(cfg: &MlpConfig) -> Batch {
    let out = *cfg.widths.last().expect("validated");
    Batch::synthetic(cfg.widths[0], out, cfg.batch, cfg.seed)
}

fn run_cell(cfg: &MlpConfig, repeat: usize) -> anyhow::Result<BenchRow> {
    let model = Mlp::new(cfg)?;
    let batch = batch_for(cfg);
    let mut times = Vec::with_capacity(repeat);
    let mut row = None;
    for _ in 0..repeat {
        let start = Instant::now();
        let (out, _) = model.pass_with(EngineConfig::new(cfg.mode), &batch)?;
        times.push(start.elapsed().as_nanos() as u64);
        let r = BenchRow::from_outcome(cfg, &out);
        if let Some(prev) = &row {
            anyhow::ensure!(*prev == r, "non-timing columns changed across repeats");
        }
        row = Some(r);
    }
    times.sort_unstable();
    let mut row = row.expect("repeat >= 1");
    row.wall_ns = times[times.len() / 2];
    Ok(row)
}

/// One row per (config, mode); `wall_ns` is the median over repeats, every
/// other column is deterministic.
pub fn run(cfg: &BenchConfig) -> anyhow::Result<BenchReport> {
    let cells = cfg.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers())
        .build()?;
    let rows = pool.install(|| {
        cells
            .par_iter()
            .map(|c| run_cell(c, cfg.repeat))
            .collect::<anyhow::Result<Vec<_>>>()
    })?;
    Ok(BenchReport { rows })
}
