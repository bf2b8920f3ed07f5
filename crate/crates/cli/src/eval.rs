use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use gtfdeer::metrics::{dstsp, evaluate};
use gtfdeer::numerics::stream;
use gtfdeer::{Checkpoint, EvalConfig, ExperimentPreset, TrajectorySet};

use crate::{config_error, parse_preset};

#[derive(clap::Args)]
pub struct Args {
    /// Model checkpoint; not needed with --ground-truth.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Test trajectory (.dsrtraj).
    #[arg(long)]
    pub test: PathBuf,
    /// Evaluation settings (embedding, windows) of this preset.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub mc_samples: Option<usize>,
    /// Leading test samples used as the truth orbit.
    #[arg(long)]
    pub truth_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Score the test orbit against itself instead of a model.
    #[arg(long)]
    pub ground_truth: bool,
    /// Report path (default: stdout).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let preset = args
        .preset
        .as_deref()
        .map(parse_preset)
        .transpose()?
        .map(ExperimentPreset::get);
    let mut cfg = preset
        .as_ref()
        .map(|p| p.eval.clone())
        .unwrap_or_else(EvalConfig::default);
    if let Some(n) = args.mc_samples {
        cfg.dstsp.mc_samples = n;
    }
    if let Some(n) = args.truth_len {
        cfg.truth_len = Some(n);
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.dstsp.validate()?;
    let test = TrajectorySet::load(&args.test).with_context(|| format!("reading {}", args.test.display()))?;
    let data = match &preset {
        Some(p) => p.train.select_observed(&test.data)?,
        None => test.data.clone(),
    };
    let json = if args.ground_truth {
        let t1 = cfg.truth_len.unwrap_or(data.rows()).min(data.rows());
        let truth = gtfdeer::DenseMatrix::from_fn(t1, data.cols(), |r, c| data[(r, c)]);
        let mut rng = stream(cfg.seed, 0);
        let plain = dstsp(&truth, &truth, &cfg.dstsp.plain(), &mut rng)?;
        let de = if cfg.dstsp.embed_m > 1 {
            dstsp(&truth, &truth, &cfg.dstsp, &mut rng)?.value()
        } else {
            None
        };
        serde_json::json!({
            "dstsp": plain.value(),
            "dstsp_de": de,
            "rmse_n": null,
            "lle": null,
            "diverged": false,
            "config": cfg,
            "test": args.test,
        })
    } else {
        let path = args
            .checkpoint
            .as_ref()
            .ok_or_else(|| config_error("--checkpoint is required unless --ground-truth is given"))?;
        let ckpt = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
        let report = evaluate(&ckpt.model, &data, test.dt, &cfg)?;
        let mut v = serde_json::to_value(&report)?;
        v["checkpoint"] = serde_json::to_value(path)?;
        v["test"] = serde_json::to_value(&args.test)?;
        v["preset"] = serde_json::to_value(preset.as_ref().map(|p| p.name))?;
        v
    };
    let text = serde_json::to_string_pretty(&json)?;
    match &args.out {
        Some(path) => std::fs::write(path, text)?,
        None => writeln!(std::io::stdout().lock(), "{text}")?,
    }
    Ok(())
}
