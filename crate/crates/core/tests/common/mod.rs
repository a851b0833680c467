//! Small configurations shared by the integration tests.
#![allow(dead_code)]

pub mod oracles;

use gencond::codebook::EmbedMode;
use gencond::condense::{CodebookConfig, CondenseConfig, NetworksConfig};
use gencond::data::{make_toy_dataset, LabeledDataset};
use gencond::train::TrainConfig;
use gencond_tensor::Module;

pub fn tiny_data() -> LabeledDataset {
    make_toy_dataset(3, 12, 8, 5).unwrap()
}

pub fn tiny_nets() -> NetworksConfig {
    NetworksConfig {
        feature_width: 4,
        feature_depth: 2,
        generator_width: 4,
        generator_blocks: None,
        disc_hidden: vec![8],
    }
}

pub fn tiny_book(mode: EmbedMode) -> CodebookConfig {
    CodebookConfig {
        ipc: 3,
        latent_dim: 4,
        embed_mode: mode,
    }
}

pub fn tiny_condense() -> CondenseConfig {
    CondenseConfig {
        outer_iters: 2,
        inner_steps: 2,
        repeats: 2,
        lr_z: 0.05,
        lr_g: 0.01,
        lr_d: 0.01,
        lr_theta: 0.01,
        assoc_size: 6,
        real_batch: 8,
        extractor: TrainConfig {
            epochs: 1,
            batch_size: 16,
            ..TrainConfig::default()
        },
        pretrain_steps: 0,
        grad_clip: Some(1.0),
        ..CondenseConfig::default()
    }
}

/// Bitwise fingerprint of learnable parameters only (no running statistics).
pub fn param_bits<'a>(modules: impl IntoIterator<Item = &'a dyn Module>) -> Vec<u64> {
    modules
        .into_iter()
        .flat_map(|m| m.params().into_iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())))
        .collect()
}
