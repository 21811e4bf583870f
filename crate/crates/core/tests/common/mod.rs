//! Shared fixtures for the integration suites.
#![allow(dead_code)]

use st_impute::attention::AttentionKind;
use st_impute::data::{generate_synthetic, Dataset, SyntheticSpec, SyntheticTask};
use st_impute::model::{ModelConfig, Task};
use st_impute::training::TrainConfig;

/// The 200-series, length-48, 2-feature sinusoid dataset used for the
/// trend checks.
pub fn acceptance_dataset() -> Dataset {
    generate_synthetic(&SyntheticSpec {
        n_series: 200,
        length: 48,
        n_features: 2,
        seed: 7,
        task: SyntheticTask::Classification,
    })
    .unwrap()
}

pub fn small_dataset(n_series: usize, length: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec {
        n_series,
        length,
        n_features: 2,
        seed,
        task: SyntheticTask::Classification,
    })
    .unwrap()
}

/// Desk-scale model: small enough to train in about a minute on one core.
pub fn desk_model(kind: AttentionKind, task: Task) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 4,
        d_model: 32,
        attention_kind: kind,
        n_features: 2,
        task,
        ..ModelConfig::default()
    }
}

pub fn desk_training(epochs: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        epochs,
        batch_size: 8,
        seed: 1,
        patience: None,
        ..TrainConfig::default()
    }
}

/// Tiny model used for finite-difference checks.
pub fn tiny_model(kind: AttentionKind) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        attention_kind: kind,
        n_features: 2,
        task: Task::Classification { n_classes: 2 },
        init_seed: 11,
        ..ModelConfig::default()
    }
}
