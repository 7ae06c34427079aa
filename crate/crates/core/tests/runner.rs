use fitvid_core::checkpoint::Checkpoint;
use fitvid_core::data::generate_pusher_dataset_at;
use fitvid_core::metrics::{psnr, ssim};
use fitvid_core::planner::CemConfig;
use fitvid_core::rollout::{predict_sequence, RolloutRequest};
use fitvid_core::runner::{
    rolling_mean, run_eval, run_plan, run_train, Curves, PlanPolicy, RunLog, RunRecord, TrainOptions, LATEST_CHECKPOINT, LOG_FILE,
};
use fitvid_core::train::slice_frames;
use fitvid_core::{Error, FitVid, ModelConfig};

fn opts(dir: &std::path::Path, steps: u64) -> TrainOptions {
    TrainOptions {
        steps,
        seed: 3,
        eval_interval: 100,
        checkpoint_interval: 100,
        test_count: 2,
        ..TrainOptions::new(ModelConfig::tiny(), dir)
    }
}

#[test]
fn three_hundred_step_run_leaves_artifacts() {
    let ds = generate_pusher_dataset_at(8, 8, 1, 32).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let sum = run_train(&opts(dir.path(), 300), &ds).unwrap();
    assert_eq!(sum.final_step, 300);
    assert!(!sum.checkpoints.is_empty());
    assert!(dir.path().join(LATEST_CHECKPOINT).exists());

    let records = RunLog::read(&dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(records, sum.records);
    let train: Vec<u64> = records.iter().filter(|r| matches!(r, RunRecord::Train { .. })).map(|r| r.step()).collect();
    assert_eq!(train, (1..=300).collect::<Vec<_>>());
    let evals: Vec<u64> = records.iter().filter(|r| matches!(r, RunRecord::Eval { .. })).map(|r| r.step()).collect();
    assert_eq!(evals, [100, 200, 300]);

    // the plotted curve is recomputable from the log
    let curves = Curves::from_records(&records);
    assert_eq!(curves.train_recon_smoothed, rolling_mean(&curves.train_recon, 10));
    assert!(dir.path().read_dir().unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "svg")));

    let (_, ck) = Checkpoint::<f32>::load(&dir.path().join(LATEST_CHECKPOINT), Some(&ModelConfig::tiny())).unwrap();
    assert_eq!(ck.step, 300);
    let other = ModelConfig { z_dim: 5, ..ModelConfig::tiny() };
    assert!(matches!(
        Checkpoint::<f32>::load(&dir.path().join(LATEST_CHECKPOINT), Some(&other)),
        Err(Error::FingerprintMismatch { .. })
    ));
}

#[test]
fn resumed_step_is_bit_identical() {
    let ds = generate_pusher_dataset_at(6, 8, 2, 32).unwrap();
    let straight = tempfile::tempdir().unwrap();
    let base = TrainOptions { checkpoint_interval: 2, eval_interval: 2, ..opts(straight.path(), 5) };
    let full = run_train(&base, &ds).unwrap();

    let split = tempfile::tempdir().unwrap();
    run_train(&TrainOptions { out_dir: split.path().into(), steps: 3, ..base.clone() }, &ds).unwrap();
    let resumed = run_train(&TrainOptions { out_dir: split.path().into(), steps: 5, resume: true, ..base.clone() }, &ds).unwrap();
    assert_eq!(resumed.start_step, 3);
    assert_eq!(resumed.losses, full.losses[3..]);
    // the interrupted run also evaluated at its last step, so compare training records
    let train = |rs: &[RunRecord]| -> Vec<RunRecord> {
        rs.iter()
            .filter_map(|r| match r {
                RunRecord::Train { step, loss, .. } => Some(RunRecord::Train { step: *step, loss: loss.clone(), wall_secs: 0.0 }),
                RunRecord::Eval { .. } => None,
            })
            .collect()
    };
    let log = RunLog::read(&split.path().join(LOG_FILE)).unwrap();
    assert_eq!(train(&log), train(&full.records));
    let a = std::fs::read(straight.path().join(LATEST_CHECKPOINT)).unwrap();
    let b = std::fs::read(split.path().join(LATEST_CHECKPOINT)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eval_report_is_deterministic_and_indices_are_in_range() {
    let cfg = ModelConfig::tiny();
    let (model, params) = FitVid::init::<f32>(&cfg, 11).unwrap();
    let ds = generate_pusher_dataset_at(4, 6, 12, 32).unwrap();
    let report = run_eval(&model, &params, &ds, 100, 7).unwrap();
    assert_eq!(report.videos.len(), 4);
    for v in &report.videos {
        assert!(v.psnr_index < 100 && v.ssim_index < 100);
        assert!(v.perceptual_index.is_some_and(|i| i < 100));
    }
    assert_eq!(report.to_json(), run_eval(&model, &params, &ds, 100, 7).unwrap().to_json());
}

#[test]
fn single_sample_report_equals_direct_metrics() {
    let cfg = ModelConfig::tiny();
    let (model, params) = FitVid::init::<f32>(&cfg, 13).unwrap();
    let ds = generate_pusher_dataset_at(3, 6, 14, 32).unwrap();
    let report = run_eval(&model, &params, &ds, 1, 21).unwrap();

    let req = RolloutRequest::new(slice_frames(&ds.videos, 0, 2), ds.actions.clone(), 4, 1, 21);
    let pred = predict_sequence(&model, &params, &req, None).unwrap();
    let truth = slice_frames(&ds.videos, 2, 6);
    let (p, s) = (psnr(&pred, &truth).unwrap(), ssim(&pred, &truth).unwrap());
    for (b, v) in report.videos.iter().enumerate() {
        assert_eq!((v.psnr_index, v.ssim_index), (0, 0));
        assert_eq!(v.best_psnr, p[b]);
        assert_eq!(v.best_ssim, s[b]);
    }
}

#[test]
fn empty_plan_is_vacuous() {
    let sum = run_plan(0, 1, PlanPolicy::Cem, None, &CemConfig::default(), 64).unwrap();
    assert!(sum.tasks.is_empty());
    assert_eq!(sum.success_rate, None);
    assert!(sum.table().contains("n/a"));
    assert!(sum.to_dataset(16, 0).is_err());
}

#[test]
fn planned_trajectories_export_as_a_dataset() {
    let cfg = CemConfig { num_samples: 20, num_elites: 4, ..CemConfig::default() };
    let sum = run_plan(2, 4, PlanPolicy::Cem, None, &cfg, 16).unwrap();
    assert_eq!(sum.tasks.len(), 2);
    assert_eq!(sum.dynamics, "oracle");
    let ds = sum.to_dataset(16, 4).unwrap();
    assert_eq!(ds.videos.shape(), [2, 51, 16, 16, 3]);
    assert_eq!(ds.actions.as_ref().unwrap().shape(), [2, 51, 2]);
    let again = run_plan(2, 4, PlanPolicy::Cem, None, &cfg, 16).unwrap();
    assert_eq!(again.table(), sum.table());
}
