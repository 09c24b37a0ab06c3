use groundloc_harness::experiments::{
    gen_corpus, identity_localizer, run_jitter_sweep, run_localizer_eval, Axis, FrameOffsets, LocEvalConfig,
};
use groundloc_harness::metrics::JitterSpec;
use groundloc_core::planner::PlannerConfig;
use groundloc_core::world::{ScenarioConfig, SensorModel};

#[test]
fn noise_free_on_grid_eval_is_exact() {
    let corpus = gen_corpus(31, 1, &ScenarioConfig::default()).unwrap();
    let cfg = LocEvalConfig {
        frames_per_scenario: 3,
        sensor: SensorModel::noise_free(),
        offsets: FrameOffsets::OnGrid { seed: 4 },
    };
    let eval = run_localizer_eval(&corpus, &identity_localizer(), &cfg).unwrap();
    assert_eq!(eval.report.n_frames, 3);
    assert_eq!(eval.report.r1, 1.0);
    assert!(eval.frames.iter().all(|f| f.hit_r1 && f.hit_r2));
}

#[test]
fn jitter_eval_is_reproducible() {
    let corpus = gen_corpus(32, 1, &ScenarioConfig::default()).unwrap();
    let cfg = LocEvalConfig {
        frames_per_scenario: 2,
        sensor: SensorModel::default(),
        offsets: FrameOffsets::Jitter(JitterSpec::new(0.5, 1.5f64.to_radians(), 8).unwrap()),
    };
    let a = run_localizer_eval(&corpus, &identity_localizer(), &cfg).unwrap();
    let b = run_localizer_eval(&corpus, &identity_localizer(), &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_level_rows_agree_across_axes() {
    let corpus = gen_corpus(33, 12, &ScenarioConfig::default()).unwrap();
    let cfg = PlannerConfig::default();
    let rot = run_jitter_sweep(&corpus, Axis::Rot, &[0.0, 2.0], 1, &cfg).unwrap();
    let trans = run_jitter_sweep(&corpus, Axis::Trans, &[0.0], 1, &cfg).unwrap();
    assert_eq!(rot[0].collision_rate, 0.0);
    assert_eq!(rot[0].collision_rate, trans[0].collision_rate);
    assert_eq!(rot[0].l2_human_at_5s, trans[0].l2_human_at_5s);
    assert_eq!(rot[0].progress_at_5s, trans[0].progress_at_5s);
    assert!(rot[1].collision_rate >= rot[0].collision_rate);
    assert!(rot.iter().all(|r| r.n_scenarios == 12));
}

#[test]
fn empty_corpus_is_rejected() {
    let cfg = PlannerConfig::default();
    assert!(run_jitter_sweep(&[], Axis::Rot, &[0.0], 0, &cfg).is_err());
}
