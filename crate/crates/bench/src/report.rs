use std::io::Write;

use fadnest::modeling::{MlpConfig, PassOutcome};
use serde::{Deserialize, Serialize};

use crate::config::Format;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: String,
    pub activation: String,
    /// Layer widths joined with `-`.
    pub widths: String,
    pub batch: usize,
    pub peak_retained_bytes: usize,
    pub im_act_bytes: usize,
    pub im_other_bytes: usize,
    pub forward_kernel_count: usize,
    pub backward_node_count: usize,
    pub recompute_count: usize,
    pub wall_ns: u64,
    pub grad_checksum: f64,
}

impl BenchRow {
    pub fn from_outcome(cfg: &MlpConfig, out: &PassOutcome) -> Self {
        BenchRow {
            mode: cfg.mode.name().to_string(),
            activation: cfg.activation.name().to_string(),
            widths: cfg
                .widths
                .iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join("-"),
            batch: cfg.batch,
            peak_retained_bytes: out.retained.total_bytes(),
            im_act_bytes: out.retained.act_bytes,
            im_other_bytes: out.retained.other_bytes,
            forward_kernel_count: out.stats.forward_kernels,
            backward_node_count: out.backward_nodes,
            recompute_count: out.stats.recompute_count,
            wall_ns: 0,
            grad_checksum: out.grad_checksum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn write_csv(&self, out: impl Write) -> anyhow::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// One JSON object per line.
    pub fn write_json(&self, mut out: impl Write) -> anyhow::Result<()> {
        for r in &self.rows {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write(&self, format: Format, out: impl Write) -> anyhow::Result<()> {
        match format {
            Format::Csv => self.write_csv(out),
            Format::Json => self.write_json(out),
        }
    }

    pub fn read_csv(input: impl std::io::Read) -> anyhow::Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let rows = r.deserialize().collect::<Result<Vec<BenchRow>, _>>()?;
        Ok(BenchReport { rows })
    }

    pub fn read_json(input: &str) -> anyhow::Result<Self> {
        let rows = input
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<BenchRow>, _>>()?;
        Ok(BenchReport { rows })
    }
}
