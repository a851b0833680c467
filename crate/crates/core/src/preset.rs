//! Default hyperparameter bundles: full-size settings for real datasets and
//! a reduced one sized for the toy fixture on a CPU.

use serde::{Deserialize, Serialize};

use crate::codebook::EmbedMode;
use crate::condense::{CodebookConfig, CondenseConfig, NetworksConfig};
use crate::eval::EvalConfig;
use crate::losses::LossConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub networks: NetworksConfig,
    pub codebook: CodebookConfig,
    pub losses: LossConfig,
    pub condense: CondenseConfig,
    pub eval: EvalConfig,
}

impl Preset {
    /// Full-size networks and schedule.
    pub fn standard() -> Self {
        Self {
            networks: NetworksConfig::default(),
            codebook: CodebookConfig::default(),
            losses: LossConfig::default(),
            condense: CondenseConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Narrow networks and a short schedule for the toy fixture.
    pub fn toy() -> Self {
        Self {
            networks: NetworksConfig {
                feature_width: 32,
                feature_depth: 3,
                generator_width: 32,
                generator_blocks: None,
                disc_hidden: vec![64, 64],
            },
            codebook: CodebookConfig {
                ipc: 10,
                latent_dim: 32,
                embed_mode: EmbedMode::ClassFeature,
            },
            losses: LossConfig {
                normalize_intra: true,
                ..LossConfig::default()
            },
            condense: CondenseConfig {
                outer_iters: 50,
                inner_steps: 5,
                repeats: 2,
                lr_z: 0.05,
                lr_g: 0.01,
                lr_d: 0.01,
                lr_theta: 0.01,
                assoc_size: 64,
                real_batch: 64,
                extractor: TrainConfig {
                    epochs: 20,
                    batch_size: 64,
                    ..TrainConfig::default()
                },
                pretrain_steps: 0,
                grad_clip: Some(1.0),
                ..CondenseConfig::default()
            },
            eval: EvalConfig {
                runs: 5,
                epochs: 60,
                width: 64,
                ..EvalConfig::default()
            },
        }
    }

    /// The toy preset for toy dataset names, the standard one otherwise.
    pub fn for_dataset(name: &str) -> Self {
        if name.starts_with("toy") {
            Self::toy()
        } else {
            Self::standard()
        }
    }
}
