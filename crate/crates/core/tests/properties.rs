use std::collections::HashSet;

use ldpkit::data::{make_synthetic, sample_balanced_priv, split, ImageTensor, LabeledDataset, SplitPlan, SplitTag, SyntheticSpec};
use ldpkit::latent::{kl_divergence, Bounds, ClusterHistogram};
use ldpkit::nn::{self, Activation, ModelParams};
use ldpkit::noise::{self, Mechanism, NoiseSpec};
use ldpkit::seed;
use proptest::prelude::*;
use rand::Rng;

fn tiny_dataset(n: usize, seed_value: u64) -> LabeledDataset {
    let mut rng = seed::rng(seed_value);
    let images = (0..n)
        .map(|_| ImageTensor::new((0..4).map(|_| rng.random::<f64>()).collect(), 2, 2, 1).unwrap())
        .collect();
    let labels = (0..n).map(|i| i % 2).collect();
    LabeledDataset::new(images, labels, 2, SplitTag::Full).unwrap()
}

fn min_preactivation(model: &ModelParams, inputs: &[Vec<f64>]) -> f64 {
    let mut closest = f64::INFINITY;
    for x in inputs {
        let mut a = x.clone();
        for l in model.layers() {
            let z: Vec<f64> = (0..l.output_dim)
                .map(|o| {
                    let row = &l.weights[o * l.input_dim..(o + 1) * l.input_dim];
                    row.iter().zip(&a).map(|(w, v)| w * v).sum::<f64>() + l.biases[o]
                })
                .collect();
            if l.activation == Activation::ReLU {
                closest = z.iter().fold(closest, |m, v| m.min(v.abs()));
                a = z.iter().map(|v| v.max(0.0)).collect();
            } else {
                a = z;
            }
        }
    }
    closest
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn splits_are_disjoint(remote in 1usize..60, pool in 1usize..60, val in 1usize..60, s in any::<u64>()) {
        let spec = SyntheticSpec { num_classes: 3, per_class: 60, height: 2, width: 2, seed: 4, ..SyntheticSpec::default() };
        let full = make_synthetic(&spec).unwrap();
        let plan = SplitPlan { remote_train_count: remote, priv_pool_count: pool, val_count: val, priv_size: 0, seed: s };
        let (a, b, c) = split(&full, &plan).unwrap();
        prop_assert_eq!((a.len(), b.len(), c.len()), (remote, pool, val));
        let ids: Vec<usize> = [&a, &b, &c].iter().flat_map(|d| d.source_ids().to_vec()).collect();
        let unique: HashSet<usize> = ids.iter().copied().collect();
        prop_assert_eq!(unique.len(), ids.len());
    }

    #[test]
    fn private_draw_is_balanced(per_class in 1usize..10, s in any::<u64>()) {
        let spec = SyntheticSpec { num_classes: 4, per_class: 12, height: 2, width: 2, seed: 4, ..SyntheticSpec::default() };
        let full = make_synthetic(&spec).unwrap();
        let d = sample_balanced_priv(&full, 4 * per_class, s).unwrap();
        prop_assert!(d.class_histogram().iter().all(|&c| c == per_class));
        let unique: HashSet<usize> = d.source_ids().iter().copied().collect();
        prop_assert_eq!(unique.len(), d.len());
    }

    #[test]
    fn noised_pixels_stay_in_unit_range(eps in 0.01f64..50.0, s in any::<u64>()) {
        let d = tiny_dataset(6, s);
        let spec = NoiseSpec::per_pixel(eps).unwrap();
        let protected = noise::protect_dataset(&d, &spec, s);
        for mech in [Mechanism::Sup, Mechanism::Rand] {
            let cand = noise::build_candidate_set(&protected, mech, spec, None, s).unwrap();
            for p in cand.materialize() {
                prop_assert!(p.pixels().pixels().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn candidate_pool_has_ordered_pairs(n in 2usize..25, s in any::<u64>()) {
        let d = tiny_dataset(n, s);
        let spec = NoiseSpec::per_pixel(1.0).unwrap();
        let protected = noise::protect_dataset(&d, &spec, s);
        for mech in [Mechanism::Sup, Mechanism::Rand] {
            let cand = noise::build_candidate_set(&protected, mech, spec, None, s).unwrap();
            prop_assert_eq!(cand.len(), n * (n - 1));
            let keys: HashSet<_> = cand.keys().iter().copied().collect();
            prop_assert_eq!(keys.len(), cand.len());
            match mech {
                Mechanism::Sup => prop_assert!(cand.keys().iter().all(|k| k.source != k.other)),
                Mechanism::Rand => prop_assert!(cand.keys().iter().all(|k| (k.other as usize) < n - 1)),
            }
        }
    }

    #[test]
    fn sup_candidates_are_pair_means(n in 2usize..8, s in any::<u64>()) {
        let d = tiny_dataset(n, s);
        let spec = NoiseSpec::per_pixel(0.5).unwrap();
        let protected = noise::protect_dataset(&d, &spec, s);
        let cand = noise::build_candidate_set(&protected, Mechanism::Sup, spec, None, s).unwrap();
        for (k, c) in cand.keys().iter().zip(cand.materialize()) {
            let a = protected[k.source as usize].pixels().pixels();
            let b = protected[k.other as usize].pixels().pixels();
            for ((x, y), z) in a.iter().zip(b).zip(c.pixels().pixels()) {
                prop_assert!((0.5 * (x + y) - z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inference_subset_is_a_subset(n in 3usize..15, frac in 0.05f64..1.0, s in any::<u64>()) {
        let d = tiny_dataset(n, s);
        let spec = NoiseSpec::per_pixel(1.0).unwrap();
        let protected = noise::protect_dataset(&d, &spec, s);
        let cand = noise::build_candidate_set(&protected, Mechanism::Rand, spec, None, s).unwrap();
        let k = ((cand.len() as f64 * frac) as usize).max(1);
        let sub = noise::select_inference_subset(&cand, k, s).unwrap();
        prop_assert_eq!(sub.len(), k);
        let all: HashSet<_> = cand.keys().iter().copied().collect();
        prop_assert!(sub.keys().iter().all(|key| all.contains(key)));
        let full = cand.materialize();
        for (key, img) in sub.keys().iter().zip(sub.materialize()) {
            let pos = cand.keys().iter().position(|c| c == key).unwrap();
            prop_assert_eq!(full[pos].pixels(), img.pixels());
        }
    }

    #[test]
    fn histograms_sum_to_one(points in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..200), grid in 1usize..40) {
        let pts: Vec<[f64; 2]> = points.iter().map(|&(x, y)| [x, y]).collect();
        let bounds = Bounds::enclosing(&[&pts]).unwrap();
        let h = ClusterHistogram::from_points(&pts, grid, bounds, 1e-6).unwrap();
        prop_assert!((h.bins().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        prop_assert!(h.bins().iter().all(|&b| b > 0.0));
    }

    #[test]
    fn kl_is_nonnegative(
        a in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..100),
        b in prop::collection::vec((-3.0f64..3.0, -3.0f64..3.0), 1..100),
    ) {
        let pa: Vec<[f64; 2]> = a.iter().map(|&(x, y)| [x, y]).collect();
        let pb: Vec<[f64; 2]> = b.iter().map(|&(x, y)| [x, y]).collect();
        let bounds = Bounds::enclosing(&[&pa, &pb]).unwrap();
        let ha = ClusterHistogram::from_points(&pa, 16, bounds, 1e-6).unwrap();
        let hb = ClusterHistogram::from_points(&pb, 16, bounds, 1e-6).unwrap();
        prop_assert!(kl_divergence(&ha, &hb).unwrap() >= 0.0);
        prop_assert_eq!(kl_divergence(&ha, &ha).unwrap(), 0.0);
    }

    #[test]
    fn backprop_matches_finite_differences(s in any::<u64>()) {
        let mut rng = seed::rng(s);
        let depth = rng.random_range(1..=3);
        let dims: Vec<usize> = (0..=depth).map(|_| rng.random_range(2..=5)).collect();
        let layers = nn::init_model(&dims, s)
            .unwrap()
            .layers()
            .iter()
            .map(|l| {
                let mut l = l.clone();
                l.biases.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
                l
            })
            .collect();
        let model = ModelParams::from_layers(layers).unwrap();
        let inputs = loop {
            let x: Vec<Vec<f64>> = (0..4).map(|_| (0..dims[0]).map(|_| rng.random::<f64>()).collect()).collect();
            if min_preactivation(&model, &x) > 1e-3 {
                break x;
            }
        };
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..*dims.last().unwrap())).collect();
        let r = nn::grad_check(&model, &inputs, &labels, 1e-4).unwrap();
        prop_assert!(r.passed(), "max relative error {}", r.max_relative_error);
        prop_assert_eq!(r.checked, model.num_params());
    }
}
