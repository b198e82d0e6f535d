//! The desk-scale synthetic fixture behind the default configuration.

use crate::data::{SplitPlan, SyntheticSpec};
use crate::nn::TrainConfig;
use crate::oracle::RemoteConfig;

pub fn synthetic_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 10,
        per_class: 500,
        height: 4,
        width: 4,
        channels: 1,
        template_grid: 3,
        modes_per_class: 1,
        deformation: 0.2,
        jitter: 0.1,
        seed: 1,
    }
}

pub fn split_plan() -> SplitPlan {
    SplitPlan {
        remote_train_count: 3000,
        priv_pool_count: 1000,
        val_count: 1000,
        priv_size: 300,
        seed: 2,
    }
}

pub fn remote_config() -> RemoteConfig {
    RemoteConfig {
        hidden: vec![256, 128],
        train: TrainConfig {
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 32,
            seed: 0,
        },
    }
}

pub fn local_hidden() -> Vec<usize> {
    vec![64]
}

pub fn calibration_grid() -> Vec<f64> {
    vec![
        20.0, 15.0, 10.0, 8.0, 6.0, 5.0, 4.0, 3.0, 2.5, 2.0, 1.5, 1.25, 1.0, 0.75, 0.5, 0.35, 0.25,
    ]
}
