use earcan::harness::{self, ExperimentConfig, RunOptions, Scenario};

const SMALL: &str = include_str!("common/small.toml");

fn small() -> ExperimentConfig {
    let c = ExperimentConfig::from_toml(SMALL).unwrap();
    c.validate().unwrap();
    c
}

#[test]
fn small_run_report_is_consistent() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let r = harness::run_with(&cfg, &RunOptions { out_dir: Some(dir.path().to_path_buf()), ..RunOptions::default() }).unwrap();

    assert_eq!(r.config_hash, cfg.hash());
    assert_eq!(r.n_users, 3);
    assert_eq!(r.training.loss_trace.len(), 2);
    assert!(r.sounding.max_nmse < 1e-4);
    let names: Vec<&str> = r.conditions.iter().map(|c| c.condition.as_str()).collect();
    assert_eq!(names, ["chirp", "playback", "watermarked"]);
    for c in &r.conditions {
        assert!((0.0..=1.0).contains(&c.eer));
        assert_eq!(c.n_genuine, 3);
        assert!(c.n_imposter > 0);
        assert!(dir.path().join(&c.roc_csv).is_file());
    }
    assert!(r.calibration.theta_update >= r.calibration.theta_accept);
    assert_eq!(r.watermark.violations, 0);
    assert_eq!(r.watermark.session_violations, 0);

    assert_eq!(r.sessions.len(), Scenario::ALL.len());
    for s in &r.sessions {
        assert_eq!(s.trials, 4);
        assert!(s.authenticated <= s.trials && s.locked_within_k <= s.locked);
        assert_eq!(s.window_accepts + s.window_rejects.total(), s.windows);
        assert!(s.adversary_rejects.total() <= s.adversary_windows);
        assert!(dir.path().join("sessions").join(format!("{}.jsonl", s.scenario.name())).is_file());
    }
    if let Some(replay) = r.scenario(Scenario::ReplayLogin) {
        assert_eq!(replay.authenticated, 0);
    }

    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let back: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(back["format"], "earcan-report");
    assert_eq!(back["config_hash"], cfg.hash());

    let net = harness::load_net(dir.path(), &cfg).unwrap();
    let again = harness::run_with(&cfg, &RunOptions { out_dir: None, scenarios: Vec::new(), net: Some(net) }).unwrap();
    for (a, b) in again.conditions.iter().zip(&r.conditions) {
        assert_eq!(a, b);
    }
}

#[test]
fn reports_are_deterministic() {
    let cfg = small();
    let opts = RunOptions { out_dir: None, scenarios: vec![Scenario::ReplayLogin], net: None };
    let a = harness::run_with(&cfg, &opts).unwrap().without_timing().to_json();
    let b = harness::run_with(&cfg, &opts).unwrap().without_timing().to_json();
    assert_eq!(a, b);
}

#[test]
fn stale_checkpoint_is_refused() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    harness::stages::train_stage(&cfg, dir.path()).unwrap();
    assert!(harness::load_net(dir.path(), &cfg).is_ok());
    let mut other = cfg.clone();
    other.seed += 1;
    let err = harness::load_net(dir.path(), &other).unwrap_err().to_string();
    assert!(err.contains("config"), "{err}");
}
