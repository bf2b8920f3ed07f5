use std::path::PathBuf;

use anyhow::Context;
use gtfdeer::{Checkpoint, ExperimentPreset, JacobianMode, TrainConfig, TrainMode, Trainer, TrajectorySet};

use crate::{config_error, parse_preset, CodedError, EXIT_NON_CONVERGENCE};

#[derive(clap::Args)]
pub struct Args {
    /// Start from a named preset's training settings.
    #[arg(long)]
    pub preset: Option<String>,
    /// Flat key = value config applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training trajectory (.dsrtraj).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(short, long, default_value = "run")]
    pub out: PathBuf,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub updates: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Diagonal Jacobians in the Newton solves.
    #[arg(long)]
    pub quasi: bool,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Resume from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub dump_config: bool,
    /// Largest tolerated fraction of skipped (non-converged) updates.
    #[arg(long, default_value_t = 0.5)]
    pub max_skip_frac: f64,
}

pub fn resolve_config(args: &Args) -> anyhow::Result<TrainConfig> {
    let mut cfg = match &args.preset {
        Some(name) => ExperimentPreset::get(parse_preset(name)?).train,
        None => TrainConfig::default(),
    };
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg = TrainConfig::parse_onto(&cfg, &text)?;
    }
    if let Some(m) = &args.mode {
        cfg.mode = TrainMode::parse(m).ok_or_else(|| config_error(format!("mode: unknown value '{m}'")))?;
    }
    if let Some(v) = args.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = args.seq_len {
        cfg.seq_len = v;
    }
    if let Some(v) = args.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = args.updates {
        cfg.updates = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    cfg.workers = args.workers.unwrap_or(cfg.workers);
    if cfg.workers == 0 {
        cfg.workers = crate::default_workers();
    }
    if args.quasi {
        cfg.deer.jacobian_mode = JacobianMode::Diagonal;
    }
    let mut pairs = Vec::new();
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| config_error(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        pairs.push((k, v));
    }
    cfg = cfg.with_overrides(pairs)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let cfg = resolve_config(&args)?;
    if args.dump_config {
        std::io::Write::write_all(&mut std::io::stdout().lock(), cfg.dump().as_bytes())?;
        return Ok(());
    }
    let data_path = args
        .data
        .as_ref()
        .ok_or_else(|| config_error("--data is required for training"))?;
    let data = TrajectorySet::load(data_path).with_context(|| format!("reading {}", data_path.display()))?;
    let mut trainer = match &args.resume {
        Some(path) => Trainer::from_checkpoint(&Checkpoint::load(path)?, cfg.clone())?,
        None => {
            let obs = if cfg.observed.is_empty() {
                data.dim()
            } else {
                cfg.observed.len()
            };
            Trainer::new(cfg.init_model(obs)?, cfg.clone())?
        }
    };
    let report = trainer.run(&data.data, Some(&args.out))?;
    let summary = serde_json::json!({
        "config": serde_json::to_value(&cfg)?,
        "data": data_path,
        "updates_run": report.records.len(),
        "skipped_updates": report.divergence_events.len(),
        "final_loss": report.records.last().map(|r| r.loss.total),
        "checkpoint": report.checkpoint_path,
        "report": serde_json::to_value(&report)?,
    });
    std::fs::write(args.out.join("report.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "trained {} updates, final loss {:.6e}, {} skipped, checkpoint {}",
        report.records.len(),
        report.records.last().map(|r| r.loss.total).unwrap_or(f64::NAN),
        report.divergence_events.len(),
        args.out.join("checkpoint.bin").display()
    );
    let ran = report.records.len().max(1);
    let skipped = report.divergence_events.len() as f64 / ran as f64;
    if skipped > args.max_skip_frac {
        return Err(CodedError {
            code: EXIT_NON_CONVERGENCE,
            message: format!(
                "{} of {} updates skipped for non-convergence (limit {:.0}%)",
                report.divergence_events.len(),
                ran,
                100.0 * args.max_skip_frac
            ),
        }
        .into());
    }
    Ok(())
}
