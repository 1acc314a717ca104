mod common;

use drive_core::losses::LossMask;
use drive_core::metrics::evaluate_cell;
use drive_core::model::{CbmParams, Sample};
use drive_core::perturb::PerturbationSpec;
use drive_core::synth::{generate, SynthDataset};
use drive_core::training::{run_ablation, train_base, train_base_from, train_drive, TrainConfig, ABLATION_MASKS};

use common::*;

fn config(base_epochs: usize, drive_epochs: usize) -> TrainConfig {
    TrainConfig {
        base_epochs,
        drive_epochs,
        learning_rate: 3e-3,
        seed: 11,
        ..TrainConfig::default()
    }
}

fn dataset() -> SynthDataset {
    generate(&small_spec(21)).unwrap()
}

fn target_std(samples: &[Sample], col: usize) -> f64 {
    let v: Vec<f64> = samples.iter().map(|s| s.target.data()[col]).collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

#[test]
fn base_training_solves_the_synthetic_task() {
    let ds = dataset();
    let splits = ds.splits();
    let (params, log) = train_base(&splits, &ds.space, small_dims(), &config(60, 0)).unwrap();
    let test: Vec<&Sample> = splits.test.iter().collect();
    let m = evaluate_cell(&params, &ds.space, &test, None, 2, None).unwrap();
    let a_bound = 0.1 * target_std(&splits.test, 0);
    let d_bound = 0.1 * target_std(&splits.test, 1);
    assert!(m.a_mae < a_bound, "a-MAE {} vs {a_bound}", m.a_mae);
    assert!(m.d_mae.unwrap() < d_bound, "d-MAE {:?} vs {d_bound}", m.d_mae);
    let first = log.records.first().unwrap().l_init;
    let last = log.records.last().unwrap().l_init;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn zero_epochs_return_the_initialization() {
    let ds = dataset();
    let splits = ds.splits();
    let init = CbmParams::init(3, small_dims(), &ds.space).unwrap();
    let (p, log) = train_base_from(init.clone(), &splits, &ds.space, &config(0, 0)).unwrap();
    assert_eq!(p, init);
    assert!(log.records.is_empty());
    let (d, log) = train_drive(&init, &splits, &ds.space, &config(0, 0), LossMask::ALL).unwrap();
    assert_eq!(d, init);
    assert!(log.records.is_empty());
}

#[test]
fn training_is_deterministic() {
    let ds = dataset();
    let splits = ds.splits();
    let cfg = config(3, 2);
    let (a, _) = train_base(&splits, &ds.space, small_dims(), &cfg).unwrap();
    let (b, _) = train_base(&splits, &ds.space, small_dims(), &cfg).unwrap();
    assert_eq!(a.flatten(), b.flatten());
    let (da, la) = train_drive(&a, &splits, &ds.space, &cfg, LossMask::ALL).unwrap();
    let (db, lb) = train_drive(&b, &splits, &ds.space, &cfg, LossMask::ALL).unwrap();
    assert_eq!(da.flatten(), db.flatten());
    let strip = |l: &drive_core::training::TrainLog| l.records.iter().map(|r| (r.l_init, r.l_si, r.l_so)).collect::<Vec<_>>();
    assert_eq!(strip(&la), strip(&lb));
    let (c, _) = train_base(&splits, &ds.space, small_dims(), &TrainConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a.flatten(), c.flatten());
}

#[test]
fn fine_tuning_leaves_the_base_untouched() {
    let ds = dataset();
    let splits = ds.splits();
    let cfg = config(5, 3);
    let (base, _) = train_base(&splits, &ds.space, small_dims(), &cfg).unwrap();
    let hash = base.content_hash();
    let (drive, log) = train_drive(&base, &splits, &ds.space, &cfg, LossMask::ALL).unwrap();
    assert_eq!(base.content_hash(), hash);
    assert_ne!(drive.content_hash(), hash);
    assert_eq!(log.records.len(), 3);
    assert!(log.records.iter().all(|r| r.skipped_batches == 0));
    assert!(log.records.iter().all(|r| r.l_ci.is_some() && r.l_so.is_some()));
}

#[test]
fn masks_control_which_terms_are_logged() {
    let ds = dataset();
    let splits = ds.splits();
    let cfg = config(2, 1);
    let (base, _) = train_base(&splits, &ds.space, small_dims(), &cfg).unwrap();
    for mask in ABLATION_MASKS.into_iter().filter(LossMask::any) {
        let (_, log) = train_drive(&base, &splits, &ds.space, &cfg, mask).unwrap();
        let r = &log.records[0];
        assert_eq!(
            [r.l_ci.is_some(), r.l_si.is_some(), r.l_co.is_some(), r.l_so.is_some()],
            [mask.ci, mask.si, mask.co, mask.so]
        );
    }
}

#[test]
fn ablation_emits_the_four_fixed_rows() {
    let ds = dataset();
    let splits = ds.splits();
    let cfg = config(3, 1);
    let (base, _) = train_base(&splits, &ds.space, small_dims(), &cfg).unwrap();
    let spec = PerturbationSpec::P1 { sigma: 0.08, seed: 0 };
    let ab = run_ablation(&base, &splits, &ds.space, &cfg, &spec, 2).unwrap();
    let labels: Vec<&str> = ab.rows.iter().map(|r| r.mask.as_str()).collect();
    assert_eq!(labels, ["A", "A,BC", "A,DE", "A,BC,DE"]);
    assert_eq!(ab.models[0], base);
    assert!(ab.rows.iter().all(|r| r.metrics.top_k.is_some()));
    let csv = ab.to_csv();
    assert_eq!(csv.lines().next().unwrap(), "losses,a-MAE,d-MAE,\"(a,d)-MAE\",top-k");
    assert_eq!(csv.lines().count(), 5);
}
