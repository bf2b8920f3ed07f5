use std::path::PathBuf;

use anyhow::Context;
use gtfdeer::systems::make_dataset;
use gtfdeer::{OdeSpec, SplitConfig, SystemKind};

use crate::config_error;

#[derive(clap::Args)]
pub struct Args {
    /// lorenz63, lorenz96 (forced) or bursting-neuron.
    pub dataset: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(short, long, default_value = "data")]
    pub out: PathBuf,
    /// Retained samples per trajectory (default: the benchmark's own length).
    #[arg(long)]
    pub length: Option<usize>,
    /// Discarded leading samples (default: the benchmark's own cut).
    #[arg(long)]
    pub transient: Option<usize>,
    /// Training-set noise std relative to the standardized signal.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Also write CSV copies.
    #[arg(long)]
    pub csv: bool,
}

fn dataset_name(kind: SystemKind) -> &'static str {
    match kind {
        SystemKind::Lorenz63 => "lorenz63",
        SystemKind::ForcedLorenz96 => "lorenz96",
        SystemKind::BurstingNeuron => "bursting_neuron",
    }
}

pub fn run(args: Args) -> anyhow::Result<()> {
    let kind =
        SystemKind::parse(&args.dataset).ok_or_else(|| config_error(format!("unknown dataset '{}'", args.dataset)))?;
    let spec = OdeSpec::for_kind(kind);
    let mut split = SplitConfig::standard(kind);
    if let Some(n) = args.length {
        split.length = n;
    }
    if let Some(n) = args.transient {
        split.transient = n;
    }
    if let Some(f) = args.noise {
        split.noise_fraction = f;
    }
    let (train, test) = make_dataset(&spec, args.seed, &split)?;
    std::fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let name = dataset_name(kind);
    for set in [&train, &test] {
        let role = match set.role() {
            gtfdeer::Role::Train => "train",
            gtfdeer::Role::Test => "test",
        };
        let path = args.out.join(format!("{name}_{role}.dsrtraj"));
        set.save(&path).with_context(|| format!("writing {}", path.display()))?;
        println!("{} ({} x {})", path.display(), set.len(), set.dim());
        if args.csv {
            set.save_csv(path.with_extension("csv"))?;
        }
    }
    Ok(())
}
