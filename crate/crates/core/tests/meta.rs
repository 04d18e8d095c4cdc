//! Meta-training, the initialisation filter and the pooled baseline.

use proptest::prelude::*;
use reptile_core::data::SubjectDataset;
use reptile_core::eval::{make_folds, train_baseline_fold, train_meta_fold, ProtocolConfig};
use reptile_core::meta::{
    baseline_init, baseline_train, init_filter, inner_train, meta_train, removal_count, sample_task_points,
    split_tasks, BaselineConfig, DistanceMetric, InnerLoop, MetaConfig,
};
use reptile_core::nn::{train_full_batch, Activation, LabeledBatch, ModelSpec, OptimizerKind, ParamVector, PerGroup};
use reptile_core::taskgen::{make_family, FamilyConfig};

fn small_family(n_subjects: usize, seed: u64) -> Vec<SubjectDataset> {
    let cfg = FamilyConfig { n_subjects, n_outliers: 1, times: 64, epochs_per_class: 20, seed, ..Default::default() };
    make_family(&cfg).unwrap().datasets
}

fn small_conv() -> ModelSpec {
    ModelSpec::compact_conv(8, 64, 2, 2, 8, 2, 8, Activation::Elu)
}

fn small_meta() -> MetaConfig {
    MetaConfig { meta_epochs: 3, tasks_per_batch: 2, k_points: 8, inner_epochs: 2, init_epochs: 2, ..Default::default() }
}

fn max_abs_diff(a: &ParamVector<f64>, b: &ParamVector<f64>) -> f64 {
    a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn inner_train_is_sampling_then_full_batch_training() {
    let tasks = small_family(2, 0);
    let spec = small_conv();
    let theta: ParamVector<f64> = baseline_init(&spec, 3);
    for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let inner = InnerLoop { k: 8, epochs: 3, lr: 1e-2, optimizer };
        let got = inner_train(&spec, &theta, &tasks[0], &inner, 42).unwrap();
        let idx = sample_task_points(&tasks[0], 8, 42).unwrap();
        let data = LabeledBatch::from_dataset(&tasks[0], &idx);
        let want = train_full_batch(&spec, &theta, &data, 3, optimizer, PerGroup::uniform(1e-2)).unwrap();
        assert!(max_abs_diff(&got, &want) <= 1e-15);
    }
}

#[test]
fn zero_meta_epochs_returns_the_filtered_average() {
    let tasks = small_family(4, 1);
    let spec = small_conv();
    let cfg = MetaConfig { meta_epochs: 0, ..small_meta() };
    let state = meta_train::<f64>(&tasks, &spec, &cfg).unwrap();
    assert_eq!(state.theta, state.filter.theta);
    assert_eq!(state.history.len(), 1);
    let full = meta_train::<f64>(&tasks, &spec, &small_meta()).unwrap();
    assert_eq!(full.history.len(), small_meta().meta_epochs + 1);
}

#[test]
fn baseline_on_one_task_is_full_batch_adam() {
    let tasks = small_family(2, 2);
    let spec = small_conv();
    let cfg = BaselineConfig { epochs: 4, lr: 1e-3, batch_size: None, seed: 9 };
    let got = baseline_train::<f64>(&tasks[..1], &spec, &cfg).unwrap();
    let start: ParamVector<f64> = baseline_init(&spec, 9);
    let want = train_full_batch(&spec, &start, &LabeledBatch::all(&tasks[0]), 4, OptimizerKind::Adam, PerGroup::uniform(1e-3))
        .unwrap();
    assert!(max_abs_diff(&got.theta, &want) <= 1e-15);
}

#[test]
fn baseline_loss_decreases() {
    let tasks = small_family(3, 3);
    let out = baseline_train::<f64>(&tasks, &small_conv(), &BaselineConfig { epochs: 5, lr: 1e-2, ..Default::default() })
        .unwrap();
    assert!(out.losses[4] < out.losses[0], "{:?}", out.losses);
}

#[test]
fn filter_does_not_depend_on_task_order() {
    let tasks = small_family(5, 4);
    let spec = small_conv();
    let run = |t: &[SubjectDataset]| {
        init_filter::<f64>(t, &spec, 0.2, 3, 1e-2, OptimizerKind::Adam, DistanceMetric::MeanAbs, 7).unwrap()
    };
    let a = run(&tasks);
    let mut shuffled = tasks.clone();
    shuffled.reverse();
    shuffled.swap(0, 2);
    let b = run(&shuffled);
    assert_eq!(a.removed_ids, {
        let mut r = b.removed_ids.clone();
        r.sort();
        r
    });
    assert!(max_abs_diff(&a.theta, &b.theta) <= 1e-12);
    for (id, d) in a.task_ids.iter().zip(&a.distances) {
        let j = b.task_ids.iter().position(|x| x == id).unwrap();
        assert!((d - b.distances[j]).abs() <= 1e-12);
    }
}

#[test]
fn folds_keep_the_test_subject_out_of_training() {
    let mut tasks = small_family(4, 5);
    let spec = small_conv();
    let cfg = ProtocolConfig {
        test_subjects: Some(vec!["S01".into()]),
        meta: MetaConfig { tasks_per_batch: 1, gamma: 0.0, ..small_meta() },
        baseline: BaselineConfig { epochs: 2, ..Default::default() },
        ..Default::default()
    };
    let fold = &make_folds(&tasks, &cfg).unwrap()[0];
    assert!(fold.pool.iter().all(|d| d.subject_id() != "S01" && d.subject_id() != fold.proxy.subject_id()));
    assert_eq!(fold.pool.len(), 2);
    let meta = train_meta_fold(fold, &spec, &cfg.meta).unwrap().theta;
    let base = train_baseline_fold(fold, &spec, &cfg).unwrap();

    // Replacing the test subject's recordings must not change what was learned.
    tasks[0] = small_family(4, 99)[0].clone();
    let fold2 = &make_folds(&tasks, &cfg).unwrap()[0];
    assert_eq!(train_meta_fold(fold2, &spec, &cfg.meta).unwrap().theta, meta);
    assert_eq!(train_baseline_fold(fold2, &spec, &cfg).unwrap(), base);
}

#[test]
fn validation_tails_are_disjoint_from_training_parts() {
    for split in split_tasks(&small_family(2, 6)).unwrap() {
        assert_eq!(split.train.len() + split.val.len(), 40);
        assert_eq!(split.val.len(), 8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn removal_count_is_monotone(n in 1usize..200, g1 in 0.0f64..1.0, g2 in 0.0f64..1.0) {
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        prop_assert!(removal_count(n, lo) <= removal_count(n, hi));
        prop_assert!(removal_count(n, hi) <= n);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn larger_gamma_removes_a_superset(seed in 0u64..1000, g1 in 0.0f64..0.6, g2 in 0.0f64..0.6) {
        let (lo, hi) = if g1 <= g2 { (g1, g2) } else { (g2, g1) };
        let tasks = small_family(6, seed);
        let spec = ModelSpec::mlp(8, 64, vec![4], 2, Activation::Elu);
        let run = |g| init_filter::<f64>(&tasks, &spec, g, 2, 1e-2, OptimizerKind::Adam, DistanceMetric::SignedMean, seed).unwrap();
        let (a, b) = (run(lo), run(hi));
        prop_assert_eq!(a.distances.clone(), b.distances.clone());
        prop_assert!(a.removed_ids.iter().all(|id| b.removed_ids.contains(id)));
        prop_assert_eq!(b.removed_ids.len(), removal_count(6, hi));
    }
}
