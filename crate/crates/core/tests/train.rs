use fslab_core::config::{DatasetConfig, Supervision, TrainConfig};
use fslab_core::error::Error;
use fslab_core::losses::LossReport;
use fslab_core::models::{init_params, ModelDims, Params};
use fslab_core::synthgen::{build_dataset, few_shot_subset, rng, Dataset, Split};
use fslab_core::train::*;

fn small() -> (Dataset, ModelDims) {
    let cfg = DatasetConfig {
        n_classes: 4,
        train_per_class: 6,
        test_per_class: 2,
        n_subjects: 3,
        canonical_len: 24,
        embed_dim: 16,
        ..DatasetConfig::default()
    };
    let dims = ModelDims {
        input_len: 24,
        hidden: 32,
        n_blocks: 1,
        embed_dim: 16,
        projector_hidden: 32,
        prior_hidden: 32,
        adapter_depth: 1,
        adapter_residual: true,
    };
    (build_dataset(&cfg, 1).unwrap(), dims)
}

#[test]
fn pairing_shares_class_and_excludes_new_subject() {
    let (ds, _) = small();
    let anchors = pooled_set(&ds, &["subj03".into()], Split::Train).unwrap();
    let pool = pooled_set(&ds, &["subj01".into(), "subj02".into()], Split::Train).unwrap();
    let plan = PairingPlan::build(&anchors.class_ids, &pool.class_ids).unwrap();
    let mut r = rng(0, 0);
    for _ in 0..50 {
        for (a, p) in plan.draw(&mut r).into_iter().enumerate() {
            assert_eq!(anchors.class_ids[a], pool.class_ids[p]);
            assert_ne!(pool.subject_ids[p], "subj03");
        }
    }
}

#[test]
fn pairing_missing_class_is_named() {
    let e = PairingPlan::build(&[0, 7], &[0, 0, 1]).unwrap_err();
    assert!(e.to_string().contains("class 7"), "{e}");
}

#[test]
fn pretrain_reduces_loss_and_is_reproducible() {
    let (ds, dims) = small();
    let subjects = vec!["subj01".to_string(), "subj02".to_string()];
    let data = pooled_set(&ds, &subjects, Split::Train).unwrap();
    let cfg = TrainConfig {
        epochs: 8,
        batch_size: 16,
        max_lr: 1e-3,
        ..TrainConfig::pretrain_default()
    };
    let (_, enc) = init_params(0, &dims).unwrap();
    let a = pretrain(&data, enc.clone(), &cfg, 5).unwrap();
    let means = epoch_means(&a.log);
    assert!(means.last().unwrap() < &means[0], "{means:?}");
    let b = pretrain(&data, enc, &cfg, 5).unwrap();
    assert_eq!(a.encoder.checksum(), b.encoder.checksum());
    for r in &a.log {
        assert!((r.report.total - r.report.weighted_sum()).abs() < 1e-10);
    }
}

#[test]
fn adapt_freezes_encoder_and_reduces_loss() {
    let (ds, dims) = small();
    let pre = vec!["subj01".to_string(), "subj02".to_string()];
    let data = pooled_set(&ds, &pre, Split::Train).unwrap();
    let (adapter, enc) = init_params(0, &dims).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 16,
        max_lr: 1e-3,
        ..TrainConfig::pretrain_default()
    };
    let enc = pretrain(&data, enc, &cfg, 1).unwrap().encoder;
    let before = enc.checksum();
    let few = few_shot_subset(&ds, "subj03", 2).unwrap();
    let anchors = pooled_set(&few, &["subj03".into()], Split::Train).unwrap();
    assert_eq!(anchors.len(), 8);
    for sup in Supervision::ALL {
        let acfg = TrainConfig {
            epochs: 30,
            supervision: sup,
            max_lr: 1e-3,
            ..TrainConfig::adapt_default()
        };
        let out = adapt(&anchors, &data, &enc, adapter.clone(), &acfg, 3).unwrap();
        assert_eq!(enc.checksum(), before);
        let first = out.log.first().unwrap().report.total;
        let last = out.log.last().unwrap().report.total;
        assert!(last < first, "{sup:?}: {first} -> {last}");
        for r in &out.log {
            assert!((r.report.total - r.report.weighted_sum()).abs() < 1e-10);
            match sup {
                Supervision::None => assert_eq!(r.report.components.len(), 2),
                Supervision::Mse => assert!(r.report.get("mse").is_some()),
                Supervision::Amp => {
                    assert!(r.report.get("amp").is_some() && r.report.get("pha").is_none())
                }
                Supervision::Fourier => assert!(r.report.get("pha").is_some()),
            }
        }
    }
}

#[test]
fn adapt_rejects_unknown_class() {
    let (ds, dims) = small();
    let anchors = pooled_set(&ds, &["subj03".into()], Split::Train).unwrap();
    let mut pool = pooled_set(&ds, &["subj01".into()], Split::Train).unwrap();
    pool.class_ids.iter_mut().for_each(|c| *c = 0);
    let (a, e) = init_params(0, &dims).unwrap();
    let cfg = TrainConfig::adapt_default();
    assert!(matches!(
        adapt(&anchors, &pool, &e, a, &cfg, 0),
        Err(Error::MissingClass { .. })
    ));
}

#[test]
fn batches_drop_singletons() {
    let b = epoch_batches(9, 4, 0, 0);
    assert_eq!(b.len(), 2);
    assert_eq!(batches_per_epoch(9, 4), 2);
    assert_eq!(batches_per_epoch(10, 4), 3);
    let mut all: Vec<usize> = epoch_batches(10, 4, 0, 0).concat();
    all.sort();
    assert_eq!(all, (0..10).collect::<Vec<_>>());
}

#[test]
fn log_csv_has_fixed_columns() {
    let dir = tempfile::tempdir().unwrap();
    let mut report = LossReport {
        total: 1.5,
        ..LossReport::default()
    };
    report.components.insert("softclip".into(), 1.5);
    report.weights.insert("softclip".into(), 1.0);
    let p = dir.path().join("train_log.csv");
    write_log_csv(
        &p,
        &[LogRow {
            step: 0,
            epoch: 0,
            lr: 1e-4,
            report,
        }],
    )
    .unwrap();
    let text = std::fs::read_to_string(p).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "step,lr,total,softclip,prior,amp,pha,mse"
    );
    assert_eq!(text.lines().nth(1).unwrap(), "0,0.0001,1.5,1.5,,,,");
}
