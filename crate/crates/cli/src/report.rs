//! Per-record reports and the sweep summary CSV.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use widthlab_core::analysis::SparsitySummary;
use widthlab_core::data::SyntheticSpec;
use widthlab_core::evaluation::ProbeResult;
use widthlab_core::model::NetworkConfig;
use widthlab_core::training::{TrainConfig, TrainHistory};

use crate::config::{AnalysisSection, DatasetSection, ProbeSection};

pub const SUMMARY_SCHEMA: &str = "# widthlab summary schema v1";

/// Everything needed to re-run one sweep record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordConfig {
    pub dataset: DatasetSection,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub probe: ProbeSection,
    pub analysis: AnalysisSection,
}

/// One (method, D, K, temperature, seed) result; self-contained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordReport {
    pub schema_version: u32,
    pub key: String,
    pub method: String,
    pub repr_dim: usize,
    pub proj_k: usize,
    pub temperature: f64,
    pub seed: u64,
    pub config: RecordConfig,
    pub history: TrainHistory,
    pub linear: ProbeResult,
    pub mlp: Option<ProbeResult>,
    pub binarized_linear: Option<ProbeResult>,
    pub sparsity: Option<SparsitySummary>,
    pub jacobian_mean_norm: Option<f64>,
    pub transfer: Vec<ProbeResult>,
    pub transfer_task_specs: Vec<SyntheticSpec>,
    /// Hex FNV-1a of the final parameter state.
    pub checkpoint_checksum: String,
    pub wall_secs_total: f64,
}

pub fn record_key(method: &str, d: usize, k: usize, temperature: f64, seed: u64) -> String {
    format!("{method}_d{d}_k{k}_t{temperature}_seed{seed}")
}

fn float_cell(v: f64) -> String {
    format!("{v}")
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(float_cell).unwrap_or_default()
}

/// Deterministic summary CSV over the given records: a schema comment, a
/// header row, then one row per record ordered by
/// (method, repr_dim, proj_k, temperature, seed). Wall-times are excluded
/// so identical configs and seeds give bit-identical output.
pub fn summary_csv(records: &[RecordReport], transfer_tasks: usize) -> String {
    let mut rows: Vec<&RecordReport> = records.iter().collect();
    rows.sort_by(|a, b| {
        (&a.method, a.repr_dim, a.proj_k, a.temperature, a.seed)
            .partial_cmp(&(&b.method, b.repr_dim, b.proj_k, b.temperature, b.seed))
            .unwrap()
    });

    let mut out = String::new();
    out.push_str(SUMMARY_SCHEMA);
    out.push('\n');
    out.push_str(
        "method,repr_dim,proj_k,temperature,seed,final_loss,linear_acc,mlp_acc,binarized_acc,\
         median_zero_fraction,mean_jacobian_norm",
    );
    for i in 0..transfer_tasks {
        out.push_str(&format!(",transfer_acc_{i}"));
    }
    out.push('\n');

    for r in rows {
        let final_loss = r.history.epochs.last().map(|e| e.mean_loss);
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.repr_dim,
            r.proj_k,
            float_cell(r.temperature),
            r.seed,
            opt_cell(final_loss),
            float_cell(r.linear.eval_accuracy),
            opt_cell(r.mlp.as_ref().map(|p| p.eval_accuracy)),
            opt_cell(r.binarized_linear.as_ref().map(|p| p.eval_accuracy)),
            opt_cell(r.sparsity.as_ref().map(|s| s.median_zero_fraction)),
            opt_cell(r.jacobian_mean_norm),
        ));
        for i in 0..transfer_tasks {
            out.push(',');
            out.push_str(&opt_cell(r.transfer.get(i).map(|p| p.eval_accuracy)));
        }
        out.push('\n');
    }
    out
}

pub fn write_record(dir: &Path, report: &RecordReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.json", report.key));
    let tmp = dir.join(format!("{}.json.tmp", report.key));
    let body = serde_json::to_string_pretty(report).context("serializing record")?;
    std::fs::write(&tmp, body)?;
    std::fs::rename(&tmp, &path)?;
    Ok(())
}

pub fn read_record(path: &Path) -> Result<RecordReport> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading record {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing record {}", path.display()))
}

/// Load every record JSON under `records/` in a sweep directory.
pub fn load_records(sweep_dir: &Path) -> Result<Vec<RecordReport>> {
    let records_dir = sweep_dir.join("records");
    let mut records = Vec::new();
    if !records_dir.exists() {
        return Ok(records);
    }
    let mut paths: Vec<_> = std::fs::read_dir(&records_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for path in paths {
        records.push(read_record(&path)?);
    }
    Ok(records)
}
