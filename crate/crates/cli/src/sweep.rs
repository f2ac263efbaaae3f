//! Sweep execution: every (method, D, K, temperature, seed) grid point is
//! one independent record, flushed to disk as soon as it finishes so
//! interrupted sweeps resume by record key.

use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use widthlab_core::analysis::{binarize, jacobian_dim_norms, sparsity_profile};
use widthlab_core::data::{gen_synthetic_pair, Dataset, SyntheticSpec};
use widthlab_core::evaluation::{
    extract_representations, train_probe, ProbeKind, ProbeResult,
};
use widthlab_core::model::init_network;
use widthlab_core::training::pretrain;
use widthlab_core::Rng;

use crate::config::ExperimentConfig;
use crate::report::{record_key, summary_csv, write_record, RecordConfig, RecordReport};

/// Shared, immutable inputs for every record of a sweep.
pub struct SweepContext {
    pub cfg: ExperimentConfig,
    pub train_ds: Dataset,
    pub eval_ds: Dataset,
    pub transfer_tasks: Vec<(SyntheticSpec, Dataset, Dataset)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub method: String,
    pub repr_dim: usize,
    pub proj_first_width: Option<usize>,
    pub temperature: f64,
    pub seed: u64,
}

impl SweepPoint {
    pub fn key(&self, cfg: &ExperimentConfig) -> Result<String> {
        Ok(record_key(
            &self.method,
            self.repr_dim,
            resolved_k(cfg, self)?,
            self.temperature,
            self.seed,
        ))
    }
}

fn resolved_k(cfg: &ExperimentConfig, point: &SweepPoint) -> Result<usize> {
    if point.method == "supervised" {
        return Ok(0);
    }
    match point.proj_first_width {
        Some(k) => Ok(k),
        None => cfg
            .model
            .projector
            .spec()
            .map(|s| s.first_width().unwrap_or(0)),
    }
}

/// Generate the shared datasets and transfer tasks for a sweep.
pub fn prepare(cfg: &ExperimentConfig) -> Result<SweepContext> {
    cfg.validate()?;
    let spec = cfg.dataset.synthetic_spec();
    let mut rng = Rng::from_seed(cfg.dataset.seed).stream("dataset");
    let (train_ds, eval_ds) = gen_synthetic_pair(&spec, cfg.dataset.eval_per_class, &mut rng)
        .map_err(|e| anyhow!("dataset generation: {e}"))?;

    // transfer tasks: fresh class means, alternating class counts, and
    // progressively noisier within-class spread; each spec is recorded in
    // the reports so a task can be regenerated exactly
    let mut transfer_tasks = Vec::new();
    for i in 0..cfg.analysis.transfer_tasks {
        let task_spec = SyntheticSpec {
            n_classes: if i % 2 == 1 {
                (spec.n_classes / 2).max(2)
            } else {
                spec.n_classes
            },
            per_class_base: spec.per_class_base.min(100),
            input_dim: spec.input_dim,
            class_sep: spec.class_sep,
            within_std: spec.within_std * (1.0 + 0.25 * i as f64),
            zipf_exponent: 0.0,
        };
        let mut task_rng = Rng::from_seed(cfg.dataset.seed).stream(&format!("transfer-{i}"));
        let (t_train, t_eval) =
            gen_synthetic_pair(&task_spec, cfg.dataset.eval_per_class, &mut task_rng)
                .map_err(|e| anyhow!("transfer task {i}: {e}"))?;
        transfer_tasks.push((task_spec, t_train, t_eval));
    }

    Ok(SweepContext {
        cfg: cfg.clone(),
        train_ds,
        eval_ds,
        transfer_tasks,
    })
}

/// Full grid of sweep points, deduplicated by record key (temperature only
/// matters for SimCLR, projector width only for SSL methods).
pub fn sweep_points(cfg: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    let widths: Vec<Option<usize>> = if cfg.sweep.projector_first_widths.is_empty() {
        vec![None]
    } else {
        cfg.sweep.projector_first_widths.iter().map(|&k| Some(k)).collect()
    };
    let temps: Vec<f64> = if cfg.sweep.temperatures.is_empty() {
        vec![cfg.train.temperature]
    } else {
        cfg.sweep.temperatures.clone()
    };

    let mut points = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for method in cfg.effective_methods() {
        for &d in &cfg.sweep.repr_dims {
            let method_widths: &[Option<usize>] = if method == "supervised" {
                &[None]
            } else {
                &widths
            };
            for &k in method_widths {
                let method_temps: &[f64] = if method == "simclr" {
                    &temps
                } else {
                    std::slice::from_ref(&cfg.train.temperature)
                };
                for &t in method_temps {
                    for &seed in &cfg.sweep.seeds {
                        let point = SweepPoint {
                            method: method.clone(),
                            repr_dim: d,
                            proj_first_width: k,
                            temperature: t,
                            seed,
                        };
                        if seen.insert(point.key(cfg)?) {
                            points.push(point);
                        }
                    }
                }
            }
        }
    }
    Ok(points)
}

/// Train, probe, and analyze one sweep point.
pub fn run_record(ctx: &SweepContext, point: &SweepPoint) -> Result<RecordReport> {
    let cfg = &ctx.cfg;
    let started = Instant::now();
    let key = point.key(cfg)?;

    let net_cfg = cfg.network_config(
        &point.method,
        point.repr_dim,
        point.proj_first_width,
        point.seed,
    )?;
    let train_cfg = cfg.train_config(&point.method, point.temperature, point.seed)?;

    let mut net = init_network(&net_cfg).map_err(|e| anyhow!("{key}: init: {e}"))?;
    let history =
        pretrain(&mut net, &ctx.train_ds, &train_cfg).map_err(|e| anyhow!("{key}: train: {e}"))?;

    let train_reps = extract_representations(&net, &ctx.train_ds)
        .map_err(|e| anyhow!("{key}: extract: {e}"))?;
    let eval_reps = extract_representations(&net, &ctx.eval_ds)
        .map_err(|e| anyhow!("{key}: extract: {e}"))?;

    let probe_cfg = cfg.probe.probe_config(point.seed);
    let linear = train_probe(&train_reps, &eval_reps, &ProbeKind::Linear, &probe_cfg)
        .map_err(|e| anyhow!("{key}: linear probe: {e}"))?;
    let mlp = if cfg.probe.mlp {
        Some(
            train_probe(&train_reps, &eval_reps, &ProbeKind::Mlp(vec![]), &probe_cfg)
                .map_err(|e| anyhow!("{key}: mlp probe: {e}"))?,
        )
    } else {
        None
    };
    let binarized_linear = if cfg.analysis.binarized_probe {
        let b_train = binarize(&train_reps).map_err(|e| anyhow!("{key}: binarize: {e}"))?;
        let b_eval = binarize(&eval_reps).map_err(|e| anyhow!("{key}: binarize: {e}"))?;
        Some(
            train_probe(&b_train, &b_eval, &ProbeKind::Linear, &probe_cfg)
                .map_err(|e| anyhow!("{key}: binarized probe: {e}"))?,
        )
    } else {
        None
    };

    let sparsity = if cfg.analysis.sparsity {
        Some(
            sparsity_profile(&eval_reps)
                .map_err(|e| anyhow!("{key}: sparsity: {e}"))?
                .summary,
        )
    } else {
        None
    };

    let jacobian_mean_norm = if cfg.analysis.jacobian {
        let n = cfg.analysis.jacobian_batch.min(ctx.eval_ds.len()).max(1);
        let rows = ctx.eval_ds.gather_rows(&(0..n).collect::<Vec<_>>());
        let (_, mean) =
            jacobian_dim_norms(&net, &rows, n).map_err(|e| anyhow!("{key}: jacobian: {e}"))?;
        Some(mean)
    } else {
        None
    };

    let mut transfer: Vec<ProbeResult> = Vec::new();
    for (i, (_, t_train, t_eval)) in ctx.transfer_tasks.iter().enumerate() {
        let tr = extract_representations(&net, t_train)
            .map_err(|e| anyhow!("{key}: transfer {i}: {e}"))?;
        let te = extract_representations(&net, t_eval)
            .map_err(|e| anyhow!("{key}: transfer {i}: {e}"))?;
        transfer.push(
            train_probe(&tr, &te, &ProbeKind::Linear, &probe_cfg)
                .map_err(|e| anyhow!("{key}: transfer probe {i}: {e}"))?,
        );
    }

    Ok(RecordReport {
        schema_version: 1,
        key,
        method: point.method.clone(),
        repr_dim: point.repr_dim,
        proj_k: resolved_k(cfg, point)?,
        temperature: point.temperature,
        seed: point.seed,
        config: RecordConfig {
            dataset: cfg.dataset.clone(),
            network: net_cfg,
            train: train_cfg,
            probe: cfg.probe.clone(),
            analysis: cfg.analysis.clone(),
        },
        history,
        linear,
        mlp,
        binarized_linear,
        sparsity,
        jacobian_mean_norm,
        transfer,
        transfer_task_specs: ctx.transfer_tasks.iter().map(|(s, _, _)| s.clone()).collect(),
        checkpoint_checksum: format!("{:016x}", net.state_checksum()),
        wall_secs_total: started.elapsed().as_secs_f64(),
    })
}

pub struct SweepOutcome {
    pub records: Vec<RecordReport>,
    pub failures: Vec<(String, String)>,
    pub resumed: usize,
}

/// Execute (or resume) a sweep into `out_dir`, with `workers` parallel
/// records (0 = one per CPU). Returns all records, including resumed ones.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    workers: usize,
    resume: bool,
) -> Result<SweepOutcome> {
    let ctx = prepare(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("resolved.toml"), cfg.resolved_toml()?)
        .context("writing resolved config")?;
    let records_dir = out_dir.join("records");
    std::fs::create_dir_all(&records_dir)?;

    let points = sweep_points(cfg)?;
    let mut done: Vec<RecordReport> = Vec::new();
    let mut todo: Vec<SweepPoint> = Vec::new();
    for point in points {
        let key = point.key(cfg)?;
        let path = records_dir.join(format!("{key}.json"));
        if resume && path.exists() {
            match crate::report::read_record(&path) {
                Ok(rec) => {
                    done.push(rec);
                    continue;
                }
                Err(_) => todo.push(point), // unreadable record: recompute
            }
        } else {
            todo.push(point);
        }
    }
    let resumed = done.len();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .context("building worker pool")?;
    let results: Vec<(SweepPoint, Result<RecordReport>)> = pool.install(|| {
        todo.par_iter()
            .map(|point| {
                let result = run_record(&ctx, point).and_then(|rec| {
                    write_record(&records_dir, &rec)?;
                    Ok(rec)
                });
                (point.clone(), result)
            })
            .collect()
    });

    let mut failures = Vec::new();
    for (point, result) in results {
        match result {
            Ok(rec) => done.push(rec),
            Err(e) => failures.push((point.key(cfg)?, format!("{e:#}"))),
        }
    }

    let csv = summary_csv(&done, cfg.analysis.transfer_tasks);
    std::fs::write(out_dir.join("summary.csv"), csv).context("writing summary")?;

    Ok(SweepOutcome {
        records: done,
        failures,
        resumed,
    })
}

/// Re-aggregate the summary CSV from the record files in a sweep directory.
pub fn reaggregate(out_dir: &Path) -> Result<String> {
    let records = crate::report::load_records(out_dir)?;
    if records.is_empty() {
        bail!("no records found under {}", out_dir.join("records").display());
    }
    let transfer_tasks = records
        .iter()
        .map(|r| r.transfer.len())
        .max()
        .unwrap_or(0);
    let csv = summary_csv(&records, transfer_tasks);
    std::fs::write(out_dir.join("summary.csv"), &csv)?;
    Ok(csv)
}
