use replayseg::eval::{emit_report, read_rows_csv, METRICS_CSV};
use replayseg::inpaint::KnowledgeMode;
use replayseg::selection::SemanticRule;
use replayseg::shapeworld::Mode;
use replayseg::trainer::{
    interleave_batches, run_experiment, run_fine_tuning, run_incremental_step, run_joint, run_web_replay, run_step0,
    store_and_replay_baseline, stored_samples_per_class, ExperimentConfig, InterleaveSpec, Method, Stage,
};
use replayseg::Error;

fn small(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    c.protocol.images_per_class = 12;
    c.model.steps_per_class = 30;
    c.helper.steps_per_class = 30;
    c.model.pixels_per_image = 64;
    c.helper.pixels_per_image = 64;
    c.replay.n_r = 8;
    c.replay.pool_size = 400;
    c.replay.shortfall_floor = 0;
    c.selection.bootstrap_pool_per_class = 15;
    c.selection.discriminator.epochs = 4;
    c.eval.test_size = 24;
    c
}

#[test]
fn stages_follow_the_incremental_procedure() {
    let out = run_web_replay(&small(1)).unwrap();
    let step1: Vec<Stage> = out.state.audit.iter().filter(|a| a.step == 1).map(|a| a.stage).collect();
    assert_eq!(
        step1,
        [
            Stage::BackgroundInpaint,
            Stage::TrainHelper,
            Stage::BuildReplay,
            Stage::MergeReplay,
            Stage::ExpandHead,
            Stage::KnowledgeInpaint,
            Stage::TrainMain,
            Stage::FineTuneDiscriminator,
        ]
    );
    let step0: Vec<Stage> = out.state.audit.iter().filter(|a| a.step == 0).map(|a| a.stage).collect();
    assert_eq!(step0.first(), Some(&Stage::FitEncoder));
    assert_eq!(step0.last(), Some(&Stage::FreezeEncoder));
    assert_eq!(out.state.helpers.len(), 3);
    assert_eq!(out.report.trace.len(), 3);
    let ki = out
        .state
        .audit
        .iter()
        .find(|a| a.step == 1 && a.stage == Stage::KnowledgeInpaint)
        .unwrap();
    // 2 classes x 30 steps, trigger at 60%
    assert!(ki.detail.starts_with("at step 36:"), "{}", ki.detail);
}

#[test]
fn replay_accumulates_one_group_per_step() {
    let out = run_web_replay(&small(2)).unwrap();
    let classes = out.state.replay.classes();
    assert_eq!(classes, out.state.protocol.classes_upto(1));
    for c in classes {
        let samples = out.state.replay.get(c);
        assert!(!samples.is_empty() && samples.len() <= 8);
        assert!(samples.iter().all(|s| s.flags.all_passed()));
        let step = out.state.protocol.step_of(c).unwrap();
        assert!(samples.iter().all(|s| s.step == step));
    }
}

#[test]
fn all_components_off_equals_fine_tuning() {
    let config = small(3).fine_tuning();
    let a = run_web_replay(&config).unwrap().report;
    let b = run_fine_tuning(&config).unwrap().report;
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.per_class_iou, b.per_class_iou);
}

#[test]
fn replay_disabled_alone_is_fine_tuning() {
    let mut config = small(3);
    config.replay.enabled = false;
    config.inpaint.background = false;
    let a = run_web_replay(&config).unwrap().report;
    let b = run_fine_tuning(&config).unwrap().report;
    assert_eq!(a.all, b.all);
}

#[test]
fn zero_budget_store_and_replay_is_fine_tuning() {
    let mut config = small(4);
    config.store_replay.budget_bytes = Some(0);
    assert_eq!(stored_samples_per_class(&config).unwrap(), 0);
    let a = store_and_replay_baseline(&config).unwrap().report;
    let b = run_fine_tuning(&config).unwrap().report;
    assert_eq!(a.trace, b.trace);

    config.store_replay.budget_bytes = Some(3 * 64 * 64 * 4);
    assert_eq!(stored_samples_per_class(&config).unwrap(), 3);
    let c = store_and_replay_baseline(&config).unwrap();
    assert!(c.state.batches.iter().filter(|b| b.step > 0).all(|b| b.replay == 4));
}

#[test]
fn default_store_budget_fits_no_raw_sample() {
    assert_eq!(stored_samples_per_class(&ExperimentConfig::default()).unwrap(), 0);
}

#[test]
fn encoder_is_frozen_after_step_zero() {
    let state = run_step0(&small(5)).unwrap();
    assert!(state.encoder.is_frozen());
    let sum = state.encoder.checksum();
    let state = run_incremental_step(state, 1).unwrap();
    assert_eq!(state.encoder.checksum(), sum);
    assert_eq!(state.main.classes(), &[0, 1, 2, 3, 4, 5, 6]);
}

#[test]
fn steps_must_run_in_order() {
    let state = run_step0(&small(5)).unwrap();
    assert!(run_incremental_step(state.clone(), 2).is_err());
    assert!(run_incremental_step(state, 0).is_err());
}

#[test]
fn single_step_protocol_has_no_incremental_group() {
    let mut config = small(6);
    config.protocol.groups = "4".into();
    let out = run_web_replay(&config).unwrap();
    assert_eq!(out.report.new, None);
    assert_eq!(out.report.trace.len(), 1);
    assert!(out.state.replay.is_empty());
}

#[test]
fn overlapped_mode_runs() {
    let mut config = small(7);
    config.protocol.mode = Mode::Overlapped;
    let out = run_web_replay(&config).unwrap();
    assert_eq!(out.report.mode, "overlapped");
    assert!(out.report.all > 0.0 && out.report.all <= 1.0);
}

#[test]
fn impossible_floor_aborts_with_shortfall() {
    let mut config = small(8);
    config.replay.pool_size = 1;
    config.replay.shortfall_floor = 2;
    match run_web_replay(&config) {
        Err(Error::ReplayShortfall { found, floor, .. }) => {
            assert!(found < floor);
        }
        other => panic!("expected shortfall, got {other:?}"),
    }
}

#[test]
fn threshold_and_inpaint_modes_run() {
    let mut config = small(9);
    config.selection.semantic = SemanticRule::Fixed;
    config.inpaint.knowledge = KnowledgeMode::Unconstrained;
    config.selection.adversarial = false;
    let out = run_web_replay(&config).unwrap();
    assert!(out.state.discriminator.is_none());
}

#[test]
fn experiment_reports_delta_against_joint() {
    let config = small(10);
    let runs = run_experiment(&config, &[Method::FineTune, Method::Joint]).unwrap();
    let joint = run_joint(&config).unwrap().report;
    assert_eq!(runs[1].report.all, joint.all);
    assert_eq!(runs[1].report.delta, Some(0.0));
    let ft = &runs[0].report;
    assert!((ft.delta.unwrap() - (joint.all - ft.all)).abs() < 1e-15);
    let dir = tempfile::tempdir().unwrap();
    let reports: Vec<_> = runs.into_iter().map(|r| r.report).collect();
    emit_report(&reports, dir.path()).unwrap();
    let rows = read_rows_csv(&dir.path().join(METRICS_CSV)).unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0].fingerprint, config.fingerprint());
}

#[test]
fn batch_generation_respects_ratio() {
    let spec = InterleaveSpec { r_new: 3, r_old: 3 };
    let batches = interleave_batches(5, 9, &spec, 100, 11).unwrap();
    assert!(batches.iter().all(|b| b.current.len() == 3 && b.replay.len() == 3));
}

#[test]
fn config_round_trips_through_toml() {
    let config = small(12);
    let text = config.to_toml();
    let back = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(back.fingerprint(), config.fingerprint());
    assert!(ExperimentConfig::from_toml("bogus = 1").is_err());
}

#[test]
fn empty_replay_trains_on_current_data_only() {
    let mut config = small(13);
    config.selection.semantic = SemanticRule::Fixed;
    config.selection.fixed_threshold = 1.0;
    let out = run_web_replay(&config).unwrap();
    assert!(out.state.replay.is_empty());
    assert!(out.state.batches.iter().all(|b| b.replay == 0));
}

#[test]
fn single_step_model_is_close_to_joint_on_the_same_classes() {
    let mut config = small(14);
    config.protocol.groups = "4".into();
    config.model.steps_per_class = 100;
    let step0 = run_web_replay(&config).unwrap().report;
    let joint = run_joint(&config).unwrap().report;
    assert!((step0.all - joint.all).abs() <= 0.05, "{} vs {}", step0.all, joint.all);
}

#[test]
fn state_invariants_hold_after_every_step() {
    let config = small(15);
    let mut state = run_step0(&config).unwrap();
    for k in 1..=state.protocol.last_step() {
        assert_eq!(state.helpers.len(), k);
        state = run_incremental_step(state, k).unwrap();
        let mut expected = vec![0];
        expected.extend(state.protocol.classes_upto(k));
        assert_eq!(state.main.classes(), expected.as_slice());
        assert_eq!(state.replay.classes(), state.protocol.classes_upto(k - 1));
        assert!(state.encoder.is_frozen());
    }
    assert_eq!(state.helpers.len(), state.protocol.last_step() + 1);
}
