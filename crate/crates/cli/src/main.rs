//! Command-line experiment runner.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Parser, Subcommand};

use widthlab_cli::config::{parse_config, ExperimentConfig};
use widthlab_cli::report::summary_csv;
use widthlab_cli::sweep::{prepare, reaggregate, run_sweep, SweepPoint};
use widthlab_cli::verify::run_all;
use widthlab_core::analysis::{collision_probability_mc, jacobian_dim_norms, sparsity_csv, sparsity_profile};
use widthlab_core::evaluation::save_representations;
use widthlab_core::model::{load_checkpoint, save_checkpoint};
use widthlab_core::Rng;

/// Environment variable naming the default output root.
const OUT_ROOT_ENV: &str = "WIDTHLAB_OUT";

#[derive(Parser)]
#[command(
    name = "widthlab",
    about = "Width-sweep self-supervised learning lab",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full sweep grid from a config file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: $WIDTHLAB_OUT/<config-stem> or ./runs/<config-stem>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parallel records; 0 means one per CPU.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Skip records whose JSON already exists in the output directory.
        #[arg(long)]
        resume: bool,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Pretrain one model (the config's base method/width) and write a checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Probe a pretrained checkpoint (expects `pretrain` artifacts in the output directory).
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sparsity, Jacobian, and collision analyses on a pretrained checkpoint.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1_000_000)]
        collision_pairs: usize,
    },
    /// Run the full invariant suite and print one line per check.
    Verify {
        #[arg(long, default_value_t = 1_000_000)]
        collision_pairs: usize,
    },
    /// Re-aggregate summary.csv from the record files in a sweep directory.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn out_dir_for(config: &Path, out: Option<PathBuf>) -> PathBuf {
    if let Some(dir) = out {
        return dir;
    }
    let stem = config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into());
    let root = std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(stem)
}

fn load(config: &Path, seed_override: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = parse_config(config)?;
    if let Some(seed) = seed_override {
        cfg.sweep.seeds = vec![seed];
    }
    Ok(cfg)
}

fn base_point(cfg: &ExperimentConfig) -> SweepPoint {
    SweepPoint {
        method: cfg.train.method.clone(),
        repr_dim: cfg.model.repr_dim,
        proj_first_width: None,
        temperature: cfg.train.temperature,
        seed: cfg.sweep.seeds[0],
    }
}

fn cmd_pretrain(config: &Path, out: Option<PathBuf>, seed_override: Option<u64>) -> Result<()> {
    let cfg = load(config, seed_override)?;
    let out_dir = out_dir_for(config, out);
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("resolved.toml"), cfg.resolved_toml()?)?;

    let ctx = prepare(&cfg)?;
    let point = base_point(&cfg);
    let net_cfg = cfg.network_config(&point.method, point.repr_dim, None, point.seed)?;
    let train_cfg = cfg.train_config(&point.method, point.temperature, point.seed)?;
    let mut net = widthlab_core::model::init_network(&net_cfg)
        .map_err(|e| anyhow::anyhow!("init: {e}"))?;
    let history = widthlab_core::training::pretrain(&mut net, &ctx.train_ds, &train_cfg)
        .map_err(|e| anyhow::anyhow!("train: {e}"))?;

    save_checkpoint(&net, &out_dir.join("checkpoint.bin"))
        .map_err(|e| anyhow::anyhow!("checkpoint: {e}"))?;
    std::fs::write(
        out_dir.join("history.json"),
        serde_json::to_string_pretty(&history)?,
    )?;
    let last = history.epochs.last().map(|e| e.mean_loss).unwrap_or(f64::NAN);
    println!(
        "pretrained {} D={} for {} epochs, final loss {last:.6}, checkpoint at {}",
        point.method,
        point.repr_dim,
        history.epochs.len(),
        out_dir.join("checkpoint.bin").display()
    );
    Ok(())
}

fn cmd_probe(config: &Path, out: Option<PathBuf>) -> Result<()> {
    use widthlab_core::evaluation::{extract_representations, train_probe, ProbeKind};

    let cfg = load(config, None)?;
    let out_dir = out_dir_for(config, out);
    let ckpt = out_dir.join("checkpoint.bin");
    if !ckpt.exists() {
        bail!("no checkpoint at {} (run `widthlab pretrain` first)", ckpt.display());
    }
    let net = load_checkpoint(&ckpt).map_err(|e| anyhow::anyhow!("checkpoint: {e}"))?;
    let ctx = prepare(&cfg)?;

    let train_reps = extract_representations(&net, &ctx.train_ds)
        .map_err(|e| anyhow::anyhow!("extract: {e}"))?;
    let eval_reps = extract_representations(&net, &ctx.eval_ds)
        .map_err(|e| anyhow::anyhow!("extract: {e}"))?;
    save_representations(&train_reps, &out_dir.join("train_reps.bin"))
        .map_err(|e| anyhow::anyhow!("save reps: {e}"))?;
    save_representations(&eval_reps, &out_dir.join("eval_reps.bin"))
        .map_err(|e| anyhow::anyhow!("save reps: {e}"))?;

    let probe_cfg = cfg.probe.probe_config(cfg.sweep.seeds[0]);
    let mut results = Vec::new();
    let linear = train_probe(&train_reps, &eval_reps, &ProbeKind::Linear, &probe_cfg)
        .map_err(|e| anyhow::anyhow!("linear probe: {e}"))?;
    println!("linear probe: train {:.4} eval {:.4} ({} epochs)",
        linear.train_accuracy, linear.eval_accuracy, linear.epochs_run);
    results.push(linear);
    if cfg.probe.mlp {
        let mlp = train_probe(&train_reps, &eval_reps, &ProbeKind::Mlp(vec![]), &probe_cfg)
            .map_err(|e| anyhow::anyhow!("mlp probe: {e}"))?;
        println!("mlp probe:    train {:.4} eval {:.4} ({} epochs)",
            mlp.train_accuracy, mlp.eval_accuracy, mlp.epochs_run);
        results.push(mlp);
    }
    if cfg.analysis.binarized_probe {
        let b_train = widthlab_core::analysis::binarize(&train_reps)
            .map_err(|e| anyhow::anyhow!("binarize: {e}"))?;
        let b_eval = widthlab_core::analysis::binarize(&eval_reps)
            .map_err(|e| anyhow::anyhow!("binarize: {e}"))?;
        let bin = train_probe(&b_train, &b_eval, &ProbeKind::Linear, &probe_cfg)
            .map_err(|e| anyhow::anyhow!("binarized probe: {e}"))?;
        println!("binarized:    train {:.4} eval {:.4} ({} epochs)",
            bin.train_accuracy, bin.eval_accuracy, bin.epochs_run);
        results.push(bin);
    }
    std::fs::write(
        out_dir.join("probes.json"),
        serde_json::to_string_pretty(&results)?,
    )?;
    Ok(())
}

fn cmd_analyze(config: &Path, out: Option<PathBuf>, collision_pairs: usize) -> Result<()> {
    let cfg = load(config, None)?;
    let out_dir = out_dir_for(config, out);
    let ckpt = out_dir.join("checkpoint.bin");
    if !ckpt.exists() {
        bail!("no checkpoint at {} (run `widthlab pretrain` first)", ckpt.display());
    }
    let net = load_checkpoint(&ckpt).map_err(|e| anyhow::anyhow!("checkpoint: {e}"))?;
    let ctx = prepare(&cfg)?;

    let eval_reps = widthlab_core::evaluation::extract_representations(&net, &ctx.eval_ds)
        .map_err(|e| anyhow::anyhow!("extract: {e}"))?;
    let profile = sparsity_profile(&eval_reps).map_err(|e| anyhow::anyhow!("sparsity: {e}"))?;
    let (per_example, per_dimension) = sparsity_csv(&profile);
    std::fs::write(out_dir.join("sparsity_per_example.csv"), per_example)?;
    std::fs::write(out_dir.join("sparsity_per_dimension.csv"), per_dimension)?;
    println!(
        "sparsity: median zero fraction {:.4}, {:.1}% of examples at least half zero",
        profile.summary.median_zero_fraction,
        100.0 * profile.summary.frac_examples_half_zero
    );

    let n = cfg.analysis.jacobian_batch.min(ctx.eval_ds.len()).max(1);
    let rows = ctx.eval_ds.gather_rows(&(0..n).collect::<Vec<_>>());
    let (norms, mean) =
        jacobian_dim_norms(&net, &rows, n).map_err(|e| anyhow::anyhow!("jacobian: {e}"))?;
    let mut jac_csv = String::from("dimension,mean_jacobian_norm\n");
    for (j, v) in norms.iter().enumerate() {
        jac_csv.push_str(&format!("{j},{v}\n"));
    }
    std::fs::write(out_dir.join("jacobian.csv"), jac_csv)?;
    println!("jacobian: mean per-dimension norm {mean:.6} over {n} samples");

    let mut rng = Rng::from_seed(cfg.dataset.seed).stream("collision");
    let mut col_csv = String::from("k,n_pairs,empirical_rate,analytic_rate,std_error\n");
    for k in [2usize, 4, 8, 16] {
        let est = collision_probability_mc(k, collision_pairs, &mut rng)
            .map_err(|e| anyhow::anyhow!("collision: {e}"))?;
        col_csv.push_str(&format!(
            "{},{},{},{},{}\n",
            est.k, est.n_pairs, est.empirical_rate, est.analytic_rate, est.std_error
        ));
        println!(
            "collision K={k}: empirical {:.3e} vs analytic {:.3e} (SE {:.2e})",
            est.empirical_rate, est.analytic_rate, est.std_error
        );
    }
    std::fs::write(out_dir.join("collision.csv"), col_csv)?;
    Ok(())
}

fn cmd_sweep(
    config: &Path,
    out: Option<PathBuf>,
    workers: usize,
    resume: bool,
    seed_override: Option<u64>,
) -> Result<bool> {
    let cfg = load(config, seed_override)?;
    let out_dir = out_dir_for(config, out);
    let outcome = run_sweep(&cfg, &out_dir, workers, resume)?;
    println!(
        "sweep complete: {} records ({} resumed), {} failures, summary at {}",
        outcome.records.len(),
        outcome.resumed,
        outcome.failures.len(),
        out_dir.join("summary.csv").display()
    );
    for (key, err) in &outcome.failures {
        eprintln!("FAILED {key}: {err}");
    }
    print!("{}", summary_csv(&outcome.records, cfg.analysis.transfer_tasks));
    Ok(outcome.failures.is_empty())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome: Result<bool> = match cli.command {
        Command::Sweep {
            config,
            out,
            workers,
            resume,
            seed_override,
        } => cmd_sweep(&config, out, workers, resume, seed_override),
        Command::Pretrain {
            config,
            out,
            seed_override,
        } => cmd_pretrain(&config, out, seed_override).map(|()| true),
        Command::Probe { config, out } => cmd_probe(&config, out).map(|()| true),
        Command::Analyze {
            config,
            out,
            collision_pairs,
        } => cmd_analyze(&config, out, collision_pairs).map(|()| true),
        Command::Verify { collision_pairs } => {
            let results = run_all(collision_pairs);
            let mut ok = true;
            for check in &results {
                let status = if check.passed { "PASS" } else { "FAIL" };
                println!("[{status}] {:<26} {}", check.name, check.detail);
                ok &= check.passed;
            }
            println!(
                "{}/{} checks passed",
                results.iter().filter(|c| c.passed).count(),
                results.len()
            );
            Ok(ok)
        }
        Command::Report { out } => reaggregate(&out).map(|csv| {
            print!("{csv}");
            true
        }),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_dir_respects_env_root() {
        let dir = out_dir_for(Path::new("configs/base.toml"), None);
        assert!(dir.ends_with("base"));
        let explicit = out_dir_for(Path::new("c.toml"), Some(PathBuf::from("/tmp/x")));
        assert_eq!(explicit, PathBuf::from("/tmp/x"));
    }
}
