//! Experiment orchestration: configuration, the end-to-end pipeline, the
//! intrusion scenarios and the metrics report.

pub mod config;
pub mod intrusion;
pub mod pipeline;
pub mod report;
pub mod stages;

use std::path::{Path, PathBuf};
use std::time::Instant;

pub use config::{ConfigError, ExperimentConfig, OUTPUT_ENV};
pub use intrusion::Scenario;
pub use report::MetricsReport;

use crate::embedding::{load_checkpoint, save_checkpoint, NetParams};
use intrusion::{ScenarioStats, SessionRig};
use pipeline::{calibrate, ConditionScores, Evaluation, Prepared, Split, Templates};
use report::{AttackRates, Calibration, ConditionReport, TrainingStats, WatermarkStats};

pub(crate) type StageResult<T> = Result<T, Box<dyn std::error::Error + Send + Sync>>;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("stage {stage} failed (config {config_hash}): {source}")]
    Stage {
        stage: &'static str,
        config_hash: String,
        source: Box<dyn std::error::Error + Send + Sync>,
    },
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Where artifacts go; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    pub scenarios: Vec<Scenario>,
    /// Reuse this network instead of training one.
    pub net: Option<NetParams>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { out_dir: None, scenarios: Scenario::ALL.to_vec(), net: None }
    }
}

/// Sidecar written next to `train/net.json`.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainMeta {
    pub config_hash: String,
    pub samples: usize,
    pub loss_trace: Vec<f64>,
}

pub struct Stager {
    hash: String,
}

impl Stager {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self { hash: cfg.hash() }
    }

    pub fn run<T>(&self, stage: &'static str, f: impl FnOnce() -> StageResult<T>) -> Result<T, HarnessError> {
        let t0 = Instant::now();
        let out = f().map_err(|source| HarnessError::Stage { stage, config_hash: self.hash.clone(), source })?;
        log::info!("{stage}: {:.1}s", t0.elapsed().as_secs_f64());
        Ok(out)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport, HarnessError> {
    run_with(cfg, &RunOptions { out_dir: Some(cfg.output_dir()), ..RunOptions::default() })
}

/// Everything up to and including the test-split evaluation.
pub struct Evaluated<'c> {
    pub prepared: Prepared<'c>,
    pub net: NetParams,
    pub training: TrainingStats,
    pub templates: Templates,
    pub calib: Evaluation,
    pub calibration: Calibration,
    pub test: Evaluation,
    pub conditions: Vec<ConditionReport>,
}

impl Evaluated<'_> {
    pub fn session_config(&self) -> crate::session::SessionConfig {
        self.prepared.cfg.session.session_config(self.calibration.theta_accept, self.calibration.theta_update)
    }
}

/// Trains a network unless `net` is given, then calibrates thresholds on the
/// calibration split and scores the test split.
pub fn evaluate_all<'c>(cfg: &'c ExperimentConfig, st: &Stager, net: Option<NetParams>) -> Result<Evaluated<'c>, HarnessError> {
    cfg.validate()?;
    let p = st.run("prepare", || Prepared::new(cfg))?;
    let (net, training) = match net {
        Some(n) => (n, TrainingStats { samples: 0, epochs: 0, loss_trace: Vec::new() }),
        None => {
            let samples = st.run("training_set", || p.training_set())?;
            let out = st.run("train", || p.train(&samples))?;
            let stats = TrainingStats { samples: samples.len(), epochs: out.loss_trace.len(), loss_trace: out.loss_trace };
            (out.params, stats)
        }
    };
    let templates = st.run("templates", || p.templates(&net))?;

    let calib = st.run("calibrate", || p.evaluate(&net, &templates, Split::Calibration))?;
    let calibration = st.run("calibrate", || {
        let wm = &calib.watermarked;
        let eer = crate::matcher::eer(&wm.genuine, &wm.imposter)?.0;
        let s = &cfg.session;
        let (source, a, u) = match (s.theta_accept, s.theta_update) {
            (Some(a), Some(u)) => ("configured", a, u),
            (a0, u0) => {
                let (a, u) = calibrate(wm, s.update_far)?;
                let a = a0.unwrap_or(a);
                ("calibrated", a, u0.unwrap_or(u).max(a))
            }
        };
        Ok(Calibration { source: source.into(), theta_accept: a, theta_update: u, update_far: s.update_far, calibration_eer: eer })
    })?;

    let test = st.run("eval", || p.evaluate(&net, &templates, Split::Test))?;
    let conditions = st.run("eval", || {
        let mut v = Vec::new();
        for (name, scores) in conditions_of(&test) {
            v.push(report::condition_report(name, scores, calibration.theta_accept)?);
        }
        Ok(v)
    })?;
    Ok(Evaluated { prepared: p, net, training, templates, calib, calibration, test, conditions })
}

pub fn conditions_of(e: &Evaluation) -> [(&'static str, &ConditionScores); 3] {
    [("chirp", &e.chirp), ("playback", &e.raw), ("watermarked", &e.watermarked)]
}

pub fn run_with(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<MetricsReport, HarnessError> {
    let start = Instant::now();
    let st = Stager::new(cfg);
    let hash = cfg.hash();
    let ev = evaluate_all(cfg, &st, opts.net.clone())?;
    let (p, net, templates, test) = (&ev.prepared, &ev.net, &ev.templates, &ev.test);

    let mut sessions: Vec<ScenarioStats> = Vec::new();
    let mut traces = Vec::new();
    if !opts.scenarios.is_empty() {
        let rig = st.run("session", || SessionRig::new(p, net, templates, test, ev.session_config()))?;
        for &s in &opts.scenarios {
            let (stats, tr) = st.run("session", || rig.simulate(s))?;
            sessions.push(stats);
            traces.push((s, tr));
        }
    }

    let mut watermark = WatermarkStats::from_evaluations(&[&ev.calib, test]);
    watermark.session_patch_cells = sessions.iter().map(|s| s.patch_cells).sum();
    watermark.session_violations = sessions.iter().map(|s| s.patch_violations).sum();
    let imposter_far = ev.conditions[2].far_at_theta_accept;

    let report = MetricsReport {
        format: report::REPORT_FORMAT.into(),
        version: report::REPORT_VERSION,
        config_hash: hash.clone(),
        seed: cfg.seed,
        n_users: p.population.n_users(),
        corpus: report::corpus_stats(p),
        sounding: st.run("sounding", || report::sounding_stats(p))?,
        training: ev.training.clone(),
        calibration: ev.calibration.clone(),
        conditions: ev.conditions.clone(),
        watermark,
        attacks: AttackRates::new(imposter_far, &sessions),
        sessions,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };

    if let Some(dir) = &opts.out_dir {
        st.run("write", || {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
            if opts.net.is_none() {
                write_net(dir, net, &TrainMeta { config_hash: hash.clone(), samples: report.training.samples, loss_trace: report.training.loss_trace.clone() })?;
            }
            for (name, scores) in conditions_of(test) {
                report::write_roc(dir, name, scores)?;
            }
            for (s, tr) in &traces {
                report::write_traces(dir, *s, tr)?;
            }
            std::fs::write(dir.join("report.json"), report.to_json())?;
            Ok(())
        })?;
    }
    Ok(report)
}

pub fn write_net(dir: &Path, net: &NetParams, meta: &TrainMeta) -> StageResult<()> {
    std::fs::create_dir_all(dir.join("train"))?;
    save_checkpoint(net, &dir.join("train/net.json"))?;
    std::fs::write(dir.join("train/meta.json"), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

/// Loads a trained network, refusing one produced under a different config.
pub fn load_net(dir: &Path, cfg: &ExperimentConfig) -> StageResult<NetParams> {
    let meta: TrainMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("train/meta.json"))?)?;
    if meta.config_hash != cfg.hash() {
        return Err(format!("train/net.json was trained under config {}, current is {}", meta.config_hash, cfg.hash()).into());
    }
    Ok(load_checkpoint(&dir.join("train/net.json"))?)
}
