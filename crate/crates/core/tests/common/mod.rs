#![allow(dead_code)]

use ldpkit::data::{make_synthetic, split, LabeledDataset, SplitPlan, SyntheticSpec};
use ldpkit::nn::TrainConfig;
use ldpkit::oracle::{fit_remote, RemoteConfig, RemoteOracle};

pub fn small_spec() -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 5,
        per_class: 80,
        height: 4,
        width: 4,
        channels: 1,
        template_grid: 3,
        modes_per_class: 1,
        deformation: 0.2,
        jitter: 0.1,
        seed: 11,
    }
}

pub struct SmallLab {
    pub oracle: RemoteOracle,
    pub pool: LabeledDataset,
    pub val: LabeledDataset,
}

pub fn small_lab() -> SmallLab {
    let full = make_synthetic(&small_spec()).unwrap();
    let plan = SplitPlan {
        remote_train_count: 200,
        priv_pool_count: 120,
        val_count: 80,
        priv_size: 20,
        seed: 3,
    };
    let (remote, pool, val) = split(&full, &plan).unwrap();
    let cfg = RemoteConfig {
        hidden: vec![32],
        train: TrainConfig {
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 16,
            seed: 5,
        },
    };
    let oracle = fit_remote(&remote, &cfg).unwrap();
    SmallLab { oracle, pool, val }
}
