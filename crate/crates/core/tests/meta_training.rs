use metafit::body_model;
use metafit::energy::EnergyConfig;
use metafit::meta::{self, epoch_order, MetaConfig, Regressor, TrainMode, TrainingSetup};
use metafit::metrics;
use metafit::optimizer::{refine, OptimizerConfig};
use metafit::rng::{self, Stream};
use metafit::tasks::{generate_dataset_from, DomainProfile, TaskRecord};
use metafit::KinematicTree;
use rand::Rng;

/// Post-refinement mpjpe per held-out task.
fn heldout_errors(tree: &KinematicTree, reg: &Regressor, tasks: &[TaskRecord], seed: u64) -> Vec<f64> {
    let (ecfg, ocfg) = (EnergyConfig::default(), OptimizerConfig::default());
    tasks
        .iter()
        .map(|t| {
            let init = reg.regress(&t.obs).unwrap();
            let out = refine(tree, &init, &t.obs, &ecfg, &ocfg, &mut rng::stream(seed, Stream::Refine, t.id)).unwrap();
            let pred = body_model::forward_kinematics(tree, &out.params).unwrap();
            let gt = body_model::forward_kinematics(tree, &t.gt).unwrap();
            metrics::mpjpe(&pred, &gt).unwrap()
        })
        .collect()
}

fn train(tree: &KinematicTree, tasks: &[TaskRecord], mode: TrainMode, seed: u64) -> Regressor {
    let (ecfg, ocfg) = (EnergyConfig::default(), OptimizerConfig::default());
    let mcfg = MetaConfig {
        mode,
        seed,
        ..MetaConfig::default()
    };
    let setup = TrainingSetup {
        tree,
        train: tasks,
        heldout: &[],
        ecfg: &ecfg,
        ocfg: &ocfg,
        mcfg: &mcfg,
    };
    meta::meta_train(&Regressor::new(tree.joint_count(), seed), &setup).unwrap().0
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn suite(tree: &KinematicTree, seed: u64) -> (Vec<TaskRecord>, Vec<TaskRecord>) {
    let clean = DomainProfile::clean();
    (
        generate_dataset_from(tree, &clean, 500, seed, 0).unwrap(),
        generate_dataset_from(tree, &clean, 100, seed, 500).unwrap(),
    )
}

#[test]
fn batches_ignore_inner_loop_sampling() {
    let first = epoch_order(100, 3, 4);
    let mut inner = rng::stream(3, Stream::Inner, 4 << 32);
    let _: Vec<f64> = (0..1000).map(|_| inner.gen()).collect();
    assert_eq!(epoch_order(100, 3, 4), first);
    let mut sorted = first.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    assert_ne!(epoch_order(100, 3, 5), first);
}

#[test]
fn meta_trained_initializer_beats_direct_training() {
    let tree = KinematicTree::default_human();
    let (train_set, test) = suite(&tree, 1);
    let meta = heldout_errors(&tree, &train(&tree, &train_set, TrainMode::Meta, 1), &test, 1);
    let direct = heldout_errors(&tree, &train(&tree, &train_set, TrainMode::Direct, 1), &test, 1);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("held-out mean mpjpe: meta {:.6}, direct {:.6}", mean(&meta), mean(&direct));
    assert!(mean(&meta) < mean(&direct));
}

#[test]
fn meta_improvement_holds_across_seeds() {
    let tree = KinematicTree::default_human();
    let mut wins = 0;
    for seed in 1..=5 {
        let (train_set, test) = suite(&tree, seed);
        let meta = median(heldout_errors(&tree, &train(&tree, &train_set, TrainMode::Meta, seed), &test, seed));
        let direct = median(heldout_errors(&tree, &train(&tree, &train_set, TrainMode::Direct, seed), &test, seed));
        println!("seed {seed}: median mpjpe meta {meta:.6}, direct {direct:.6}");
        if meta < direct {
            wins += 1;
        }
    }
    assert!(wins >= 4, "meta won {wins}/5 seeds");
}
