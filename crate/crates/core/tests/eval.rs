//! Fine-tuning, evaluation, statistics and the protocol report.

use rand::Rng;
use reptile_core::data::{split_test_indices, SubjectDataset};
use reptile_core::eval::{
    evaluate, finetune, finetune_indices, run_protocol, wilcoxon_signed_rank_with, FineTuneConfig, Freeze,
    ProtocolConfig, WilcoxonMethod, TEST_FRACTION,
};
use reptile_core::meta::{BaselineConfig, MetaConfig};
use reptile_core::nn::{loss_and_grad, Activation, Batch, Group, ModelSpec, OptimizerKind, ParamVector};
use reptile_core::seed;
use reptile_core::taskgen::{make_family, FamilyConfig};

fn family(n: usize, classes: usize) -> Vec<SubjectDataset> {
    let cfg = FamilyConfig {
        n_subjects: n,
        n_outliers: 1,
        n_classes: classes,
        times: 64,
        epochs_per_class: 20,
        ..Default::default()
    };
    make_family(&cfg).unwrap().datasets
}

fn spec(classes: usize) -> ModelSpec {
    ModelSpec::compact_conv(8, 64, classes, 2, 8, 2, 8, Activation::Elu)
}

#[test]
fn frozen_groups_keep_their_values() {
    let ds = &family(2, 2)[0];
    let theta: ParamVector<f64> = spec(2).init_params(&mut seed::rng(1, &[]));
    for (freeze, fixed, moving) in
        [(Freeze::Feature, Group::Feature, Group::Classifier), (Freeze::Classifier, Group::Classifier, Group::Feature)]
    {
        let cfg = FineTuneConfig { freeze, lr: 1e-2, ..Default::default() };
        let out = finetune(&spec(2), &theta, ds, 2, &cfg, 3).unwrap();
        assert_eq!(out.group_view(fixed), theta.group_view(fixed));
        assert_ne!(out.group_view(moving), theta.group_view(moving));
    }
}

#[test]
fn sgd_finetuning_is_plain_gradient_descent() {
    let ds = &family(2, 2)[0];
    let sp = spec(2);
    let theta: ParamVector<f64> = sp.init_params(&mut seed::rng(2, &[]));
    let cfg = FineTuneConfig { optimizer: OptimizerKind::Sgd, lr: 0.05, a: 1.0, b: 2.0, ..Default::default() };
    let got = finetune(&sp, &theta, ds, 3, &cfg, 4).unwrap();
    let idx = finetune_indices(ds, 3, 4).unwrap();
    let batch = Batch::<f64>::from_dataset(ds, &idx);
    let labels: Vec<usize> = idx.iter().map(|&i| ds.labels()[i]).collect();
    let mut manual = theta.clone();
    for _ in 0..cfg.epochs(idx.len()) {
        let (_, g) = loss_and_grad(&sp, &manual, &batch, &labels).unwrap();
        for (p, gi) in manual.values_mut().iter_mut().zip(g.values()) {
            *p -= 0.05 * gi;
        }
    }
    assert_eq!(cfg.epochs(6), 8);
    for (a, b) in got.values().iter().zip(manual.values()) {
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn zero_weights_predict_the_first_class() {
    let ds = &family(2, 4)[0];
    let zeros: ParamVector<f64> = spec(4).zeros();
    assert_eq!(evaluate(&spec(4), &zeros, ds).unwrap(), 0.25);
}

#[test]
fn random_weights_are_at_chance() {
    let ds = &family(2, 2)[0];
    let sp = spec(2);
    let mean = (0..100)
        .map(|s| evaluate(&sp, &sp.init_params::<f64, _>(&mut seed::rng(s, &[77])), ds).unwrap())
        .sum::<f64>()
        / 100.0;
    assert!((mean - 0.5).abs() <= 0.05, "mean accuracy {mean}");
}

#[test]
fn exact_and_normal_wilcoxon_agree_at_the_switch_point() {
    let mut rng = seed::rng(9, &[]);
    for _ in 0..20 {
        let x: Vec<f64> = (0..25).map(|_| rng.random::<f64>() + 0.1).collect();
        let y: Vec<f64> = (0..25).map(|_| rng.random::<f64>()).collect();
        let e = wilcoxon_signed_rank_with(&x, &y, WilcoxonMethod::Exact).unwrap();
        let n = wilcoxon_signed_rank_with(&x, &y, WilcoxonMethod::Normal).unwrap();
        assert_eq!(e.w, n.w);
        assert!((e.p - n.p).abs() <= 0.02, "exact {} normal {}", e.p, n.p);
    }
}

#[test]
fn test_split_is_a_disjoint_tail_per_class() {
    let ds = &family(2, 2)[0];
    let (train, test) = split_test_indices(ds, TEST_FRACTION).unwrap();
    assert_eq!(train.len() + test.len(), ds.len());
    assert!(train.iter().all(|i| !test.contains(i)));
    for class in 0..2 {
        let last_train = train.iter().filter(|&&i| ds.labels()[i] == class).max().unwrap();
        let first_test = test.iter().filter(|&&i| ds.labels()[i] == class).min().unwrap();
        assert!(last_train < first_test);
    }
}

fn tiny_protocol(grid: Vec<usize>) -> ProtocolConfig {
    ProtocolConfig {
        grid,
        repetitions: 2,
        test_subjects: Some(vec!["S01".into(), "S02".into()]),
        meta: MetaConfig {
            meta_epochs: 2,
            tasks_per_batch: 1,
            k_points: 8,
            inner_epochs: 2,
            init_epochs: 2,
            gamma: 0.0,
            ..Default::default()
        },
        baseline: BaselineConfig { epochs: 2, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn protocol_reports_are_deterministic() {
    let data = family(4, 2);
    let a = run_protocol(&data, &spec(2), &tiny_protocol(vec![1, 2])).unwrap();
    let b = run_protocol(&data, &spec(2), &tiny_protocol(vec![1, 2])).unwrap();
    assert_eq!(a, b);
    // 2 methods x 2 subjects x 2 repetitions x (zero-shot + 2 sizes).
    assert_eq!(a.cells.len(), 2 * 2 * 2 * 3);
    assert_eq!(a.tests.len(), 3);
}

#[test]
fn empty_grid_reports_zero_shot_only() {
    let data = family(4, 2);
    let r = run_protocol(&data, &spec(2), &tiny_protocol(vec![])).unwrap();
    assert!(r.cells.iter().all(|c| c.subset_size == 0));
    assert_eq!(r.aggregates.len(), 2);
    assert!(r.failures.is_empty());
}
