use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Context;
use gtfdeer::metrics::{evaluate, median, median_abs_deviation};
use gtfdeer::trainer::{constant_product_grid, train};
use gtfdeer::{ExperimentPreset, TrajectorySet};

use crate::{config_error, parse_preset};

pub const RUNS_HEADER: &str = "T,B,seed,dstsp,dstsp_de,rmse_n,diverged,skipped_updates";
pub const SUMMARY_HEADER: &str = "T,B,seeds,diverged,dstsp_de_median,dstsp_de_mad,rmse_n_median,rmse_n_mad";

#[derive(clap::Args)]
pub struct Args {
    #[arg(long)]
    pub preset: String,
    /// Training trajectory (.dsrtraj).
    #[arg(long)]
    pub data: PathBuf,
    /// Test trajectory (.dsrtraj).
    #[arg(long)]
    pub test: PathBuf,
    /// Fixed batch size × sequence length.
    #[arg(long, default_value_t = 32_768)]
    pub product: usize,
    #[arg(long, default_value_t = 256)]
    pub t_min: usize,
    #[arg(long, default_value_t = 32_768)]
    pub t_max: usize,
    /// Independent models per grid point.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// Override the preset's update count.
    #[arg(long)]
    pub updates: Option<usize>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Evaluation Monte Carlo sample count.
    #[arg(long)]
    pub mc_samples: Option<usize>,
    #[arg(short, long, default_value = "sweep")]
    pub out: PathBuf,
}

fn finite(values: &[f64]) -> Vec<f64> {
    values.iter().copied().filter(|v| v.is_finite()).collect()
}

fn stat(values: &[f64]) -> (String, String) {
    let v = finite(values);
    if v.is_empty() {
        return (String::new(), String::new());
    }
    (
        format!("{:.6e}", median(&v)),
        format!("{:.6e}", median_abs_deviation(&v)),
    )
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6e}")).unwrap_or_default()
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let base = ExperimentPreset::get(parse_preset(&args.preset)?);
    let grid = constant_product_grid(args.product, args.t_min, args.t_max);
    if grid.is_empty() || args.seeds == 0 {
        return Err(config_error("sweep: empty (B, T) grid or zero seeds"));
    }
    let train_set = TrajectorySet::load(&args.data).with_context(|| format!("reading {}", args.data.display()))?;
    let test_set = TrajectorySet::load(&args.test).with_context(|| format!("reading {}", args.test.display()))?;
    let test = base.train.select_observed(&test_set.data)?;
    let mut eval_cfg = base.eval.clone();
    if let Some(n) = args.mc_samples {
        eval_cfg.dstsp.mc_samples = n;
    }
    std::fs::create_dir_all(&args.out)?;

    let mut echo = Vec::new();
    let mut runs = format!("{RUNS_HEADER}\n");
    let mut summary = format!("{SUMMARY_HEADER}\n");
    for &(b, t) in &grid {
        let mut preset = base.with_seq_len(t, args.product);
        preset.train.batch_size = b;
        if let Some(u) = args.updates {
            preset.train.updates = u;
        }
        preset.train.workers = args.workers.unwrap_or_else(crate::default_workers);
        let mut des = Vec::new();
        let mut rmses = Vec::new();
        let mut diverged = 0;
        for seed in 0..args.seeds {
            let mut cfg = preset.train.clone();
            cfg.seed = seed;
            cfg.validate()?;
            let (model, report) = train(&train_set.data, &cfg, None)?;
            let ev = evaluate(&model, &test, test_set.dt, &eval_cfg)?;
            let de = if eval_cfg.dstsp.embed_m > 1 {
                ev.dstsp_de
            } else {
                ev.dstsp
            };
            des.push(de.unwrap_or(f64::INFINITY));
            rmses.push(ev.rmse_n.unwrap_or(f64::INFINITY));
            diverged += usize::from(ev.diverged);
            writeln!(
                runs,
                "{t},{b},{seed},{},{},{},{},{}",
                opt(ev.dstsp),
                opt(ev.dstsp_de),
                opt(ev.rmse_n),
                ev.diverged,
                report.divergence_events.len()
            )?;
            eprintln!("T={t} B={b} seed={seed}: dstsp={:?} rmse={:?}", de, ev.rmse_n);
        }
        let (dm, dd) = stat(&des);
        let (rm, rd) = stat(&rmses);
        writeln!(summary, "{t},{b},{},{diverged},{dm},{dd},{rm},{rd}", args.seeds)?;
        echo.push(serde_json::to_value(&preset.train)?);
    }
    std::fs::write(args.out.join("sweep_runs.csv"), runs)?;
    std::fs::write(args.out.join("sweep_summary.csv"), &summary)?;
    let config = serde_json::json!({
        "preset": base.name,
        "product": args.product,
        "grid": grid,
        "seeds": args.seeds,
        "train_configs": echo,
        "eval": eval_cfg,
        "data": args.data,
        "test": args.test,
    });
    std::fs::write(
        args.out.join("sweep_config.json"),
        serde_json::to_string_pretty(&config)?,
    )?;
    std::io::Write::write_all(&mut std::io::stdout().lock(), summary.as_bytes())?;
    Ok(())
}
