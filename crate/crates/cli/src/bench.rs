use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context;
use gtfdeer::adjoint::{gtf_deer_gradient, gtf_sequential_gradient};
use gtfdeer::metrics::{median, median_abs_deviation};
use gtfdeer::model::{ShplrnnDims, ShplrnnParams};
use gtfdeer::numerics::stream;
use gtfdeer::{DeerConfig, DenseMatrix, Projector};
use rand_distr::{Distribution, StandardNormal};

use crate::config_error;

pub const HEADER: &str = "T,M,mode,workers,median_ns,mad_ns,iterations";

#[derive(clap::Args)]
pub struct Args {
    /// Smallest sequence length as a power of two.
    #[arg(long, default_value_t = 7)]
    pub t_min_exp: u32,
    /// Largest sequence length as a power of two.
    #[arg(long, default_value_t = 17)]
    pub t_max_exp: u32,
    /// Latent sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "4,16,64")]
    pub m: Vec<usize>,
    /// Worker counts for the parallel mode, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,8")]
    pub workers: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Shapes whose linearization would exceed this many MiB are skipped.
    #[arg(long, default_value_t = 4096)]
    pub memory_budget_mb: usize,
    /// CSV path (default: stdout).
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

/// A random fully observed model and a length-`t` target sequence.
pub fn case(m: usize, t: usize, seed: u64) -> anyhow::Result<(ShplrnnParams, DenseMatrix)> {
    let mut rng = stream(seed, m as u64);
    let dims = ShplrnnDims {
        latent: m,
        hidden: 2 * m,
        obs: m,
        inputs: 0,
        rank: None,
        m_reg: 0,
    };
    let params = ShplrnnParams::init(dims, 0.9, &mut rng)?;
    let mut x = DenseMatrix::zeros(t + 1, m);
    for v in x.data_mut() {
        *v = Distribution::<f64>::sample(&StandardNormal, &mut rng);
    }
    Ok((params, x))
}

fn estimated_bytes(t: usize, m: usize) -> usize {
    // Dense linearization, its scan copy and the trajectories.
    8 * (t + 1) * (3 * m * m + 6 * m)
}

pub fn run(args: Args) -> anyhow::Result<()> {
    if args.t_min_exp > args.t_max_exp || args.repeats == 0 || args.m.is_empty() {
        return Err(config_error(
            "bench: need t_min_exp <= t_max_exp, repeats >= 1 and at least one M",
        ));
    }
    if args.workers.contains(&0) {
        return Err(config_error("bench: worker counts must be >= 1"));
    }
    let mut sink: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    writeln!(sink, "{HEADER}")?;
    let budget = args.memory_budget_mb * (1 << 20);
    for &m in &args.m {
        for exp in args.t_min_exp..=args.t_max_exp {
            let t = 1usize << exp;
            if estimated_bytes(t, m) > budget {
                eprintln!("skipping T={t} M={m}: over the memory budget");
                continue;
            }
            let (params, x) = case(m, t, args.seed)?;
            let projector = Projector::new(&params.readout, args.alpha)?;
            let warmup = 0;

            let mut times = Vec::with_capacity(args.repeats);
            for _ in 0..args.repeats {
                let start = Instant::now();
                gtf_sequential_gradient(&params, &projector, &x, warmup, None)?;
                times.push(start.elapsed().as_nanos() as f64);
            }
            writeln!(
                sink,
                "{t},{m},sequential,1,{:.0},{:.0},1",
                median(&times),
                median_abs_deviation(&times)
            )?;

            for &w in &args.workers {
                let pool = rayon::ThreadPoolBuilder::new().num_threads(w).build()?;
                let cfg = DeerConfig {
                    workers: w,
                    ..DeerConfig::default()
                };
                let mut times = Vec::with_capacity(args.repeats);
                let mut iters = 0;
                for _ in 0..args.repeats {
                    let start = Instant::now();
                    let g = pool.install(|| gtf_deer_gradient(&params, &projector, &x, warmup, None, &cfg))?;
                    times.push(start.elapsed().as_nanos() as f64);
                    iters = g.iterations;
                }
                writeln!(
                    sink,
                    "{t},{m},parallel,{w},{:.0},{:.0},{iters}",
                    median(&times),
                    median_abs_deviation(&times)
                )?;
            }
            sink.flush()?;
        }
    }
    Ok(())
}
