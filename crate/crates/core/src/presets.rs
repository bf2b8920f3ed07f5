//! Named experiment settings: dataset, training and evaluation bundles.

use serde::{Deserialize, Serialize};

use crate::metrics::{DstspConfig, EvalConfig};
use crate::objective::RegConfig;
use crate::systems::{SplitConfig, SystemKind};
use crate::trainer::{TrainConfig, TrainMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresetName {
    Lorenz63Fo,
    Lorenz63Po,
    Lorenz96Forced,
    BurstingNeuron,
}

impl PresetName {
    pub const ALL: [PresetName; 4] = [
        PresetName::Lorenz63Fo,
        PresetName::Lorenz63Po,
        PresetName::Lorenz96Forced,
        PresetName::BurstingNeuron,
    ];

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "lorenz63_fo" => Some(Self::Lorenz63Fo),
            "lorenz63_po" => Some(Self::Lorenz63Po),
            "lorenz96_forced" => Some(Self::Lorenz96Forced),
            "bursting_neuron" => Some(Self::BurstingNeuron),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lorenz63Fo => "lorenz63_fo",
            Self::Lorenz63Po => "lorenz63_po",
            Self::Lorenz96Forced => "lorenz96_forced",
            Self::BurstingNeuron => "bursting_neuron",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPreset {
    pub name: PresetName,
    pub system: SystemKind,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Points per truth orbit used for the divergence measure at desk scale.
pub const DESK_TRUTH_LEN: usize = 10_000;

fn eval_with(embed_m: usize, embed_tau: usize) -> EvalConfig {
    EvalConfig {
        dstsp: DstspConfig {
            embed_m,
            embed_tau,
            ..DstspConfig::default()
        },
        truth_len: Some(DESK_TRUTH_LEN),
        ..EvalConfig::default()
    }
}

impl ExperimentPreset {
    pub fn get(name: PresetName) -> Self {
        match name {
            PresetName::Lorenz63Fo => Self {
                name,
                system: SystemKind::Lorenz63,
                split: SplitConfig::standard(SystemKind::Lorenz63),
                train: TrainConfig {
                    mode: TrainMode::GtfDeer,
                    latent_dim: 5,
                    hidden_dim: 50,
                    alpha: 0.15,
                    updates: 20_000,
                    batch_size: 16,
                    seq_len: 256,
                    lr_start: 1e-3,
                    lr_end: 1e-5,
                    reg: RegConfig::none(),
                    ..TrainConfig::default()
                },
                eval: eval_with(1, 1),
            },
            PresetName::Lorenz63Po => {
                let mut p = Self::get(PresetName::Lorenz63Fo);
                p.name = name;
                p.train.observed = vec![0];
                p.eval = eval_with(3, 10);
                p
            }
            PresetName::Lorenz96Forced => Self {
                name,
                system: SystemKind::ForcedLorenz96,
                split: SplitConfig::standard(SystemKind::ForcedLorenz96),
                train: TrainConfig {
                    mode: TrainMode::GtfDeer,
                    latent_dim: 10,
                    hidden_dim: 128,
                    alpha: 0.08,
                    updates: 150_000,
                    batch_size: 8,
                    seq_len: 4096,
                    lr_start: 5e-5,
                    lr_end: 1e-6,
                    reg: RegConfig {
                        m_reg: 4,
                        ..RegConfig::default()
                    },
                    ..TrainConfig::default()
                },
                eval: eval_with(3, 4096),
            },
            PresetName::BurstingNeuron => Self {
                name,
                system: SystemKind::BurstingNeuron,
                split: SplitConfig::standard(SystemKind::BurstingNeuron),
                train: TrainConfig {
                    mode: TrainMode::GtfDeer,
                    latent_dim: 6,
                    hidden_dim: 128,
                    alpha: 0.4,
                    updates: 150_000,
                    batch_size: 8,
                    seq_len: 4096,
                    lr_start: 5e-5,
                    lr_end: 1e-6,
                    reg: RegConfig {
                        m_reg: 4,
                        ..RegConfig::default()
                    },
                    ..TrainConfig::default()
                },
                eval: eval_with(7, 1024),
            },
        }
    }

    /// Sequence length `t` with the batch size that keeps `B·T` at `product`.
    pub fn with_seq_len(&self, t: usize, product: usize) -> Self {
        let mut p = self.clone();
        p.train.seq_len = t;
        p.train.batch_size = (product / t).max(1);
        p.train.warmup_len = None;
        p
    }
}
