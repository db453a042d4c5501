//! The metrics report and the files written next to it.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::intrusion::{Scenario, ScenarioStats, SessionTrace};
use super::pipeline::{ConditionScores, Evaluation, Prepared};
use super::StageResult;
use crate::matcher::{self, MatchError};
use crate::sounding;

pub const REPORT_FORMAT: &str = "earcan-report";
pub const REPORT_VERSION: u32 = 1;

/// Field holding elapsed time; the only part of a report that may differ
/// between identical runs.
pub const WALL_CLOCK_FIELD: &str = "wall_clock_seconds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: String,
    pub eer: f64,
    pub threshold: f64,
    /// Fraction of all trials decided correctly at the EER threshold.
    pub accuracy_at_eer: f64,
    pub balanced_accuracy_at_eer: f64,
    pub n_genuine: usize,
    pub n_imposter: usize,
    pub mean_genuine: f64,
    pub mean_imposter: f64,
    /// Rates at the calibrated acceptance threshold.
    pub far_at_theta_accept: f64,
    pub frr_at_theta_accept: f64,
    pub roc_csv: String,
}

fn rates(scores: &ConditionScores, t: f64) -> (f64, f64) {
    let far = scores.imposter.iter().filter(|&&s| s >= t).count() as f64 / scores.imposter.len() as f64;
    let frr = scores.genuine.iter().filter(|&&s| s < t).count() as f64 / scores.genuine.len() as f64;
    (far, frr)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn condition_report(name: &str, scores: &ConditionScores, theta_accept: f64) -> Result<ConditionReport, MatchError> {
    let summary = matcher::summarize(&scores.genuine, &scores.imposter)?;
    let (far, frr) = rates(scores, summary.threshold);
    let correct = (1.0 - frr) * scores.genuine.len() as f64 + (1.0 - far) * scores.imposter.len() as f64;
    let (far_a, frr_a) = rates(scores, theta_accept);
    Ok(ConditionReport {
        condition: name.to_string(),
        eer: summary.eer,
        threshold: summary.threshold,
        accuracy_at_eer: correct / (summary.n_genuine + summary.n_imposter) as f64,
        balanced_accuracy_at_eer: 1.0 - (far + frr) / 2.0,
        n_genuine: summary.n_genuine,
        n_imposter: summary.n_imposter,
        mean_genuine: mean(&scores.genuine),
        mean_imposter: mean(&scores.imposter),
        far_at_theta_accept: far_a,
        frr_at_theta_accept: frr_a,
        roc_csv: format!("eval/roc_{name}.csv"),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub enroll_clips: usize,
    pub eval_clips: usize,
    pub calib_clips: usize,
    pub train_clips: usize,
    pub enroll_silence_fraction: f64,
    pub calib_silence_fraction: f64,
    pub eval_silence_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoundingStats {
    pub estimates: usize,
    pub min_peak_to_median: f64,
    /// Band-limited NMSE of each enrollment estimate against the ear it measured.
    pub mean_nmse: f64,
    pub max_nmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingStats {
    pub samples: usize,
    pub epochs: usize,
    pub loss_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    /// `calibrated` or `configured`.
    pub source: String,
    pub theta_accept: f64,
    pub theta_update: f64,
    pub update_far: f64,
    pub calibration_eer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkStats {
    pub patches: usize,
    pub nothing_to_watermark: usize,
    pub mean_active_cells: f64,
    pub mean_initial_score: f64,
    pub mean_final_score: f64,
    pub clipped_samples: usize,
    /// Every cell of every optimised patch, checked against its ceiling.
    pub audited_cells: usize,
    pub violations: usize,
    pub worst_margin_db: Option<f64>,
    /// Cells carried by nonce-reseeded patches during the session simulations.
    pub session_patch_cells: usize,
    pub session_violations: usize,
}

impl WatermarkStats {
    pub fn from_evaluations(evals: &[&Evaluation]) -> Self {
        let records: Vec<_> = evals.iter().flat_map(|e| e.patches.iter()).collect();
        let n = records.len().max(1) as f64;
        let worst = records
            .iter()
            .map(|r| r.audit.worst_margin_db)
            .filter(|m| m.is_finite())
            .fold(None, |acc: Option<f64>, m| Some(acc.map_or(m, |a| a.max(m))));
        Self {
            patches: records.len(),
            nothing_to_watermark: records.iter().filter(|r| r.nothing_to_watermark).count(),
            mean_active_cells: records.iter().map(|r| r.active_cells as f64).sum::<f64>() / n,
            mean_initial_score: records.iter().map(|r| r.initial_score).sum::<f64>() / n,
            mean_final_score: records.iter().map(|r| r.final_score).sum::<f64>() / n,
            clipped_samples: records.iter().map(|r| r.clipped_samples).sum(),
            audited_cells: records.iter().map(|r| r.audit.cells).sum(),
            violations: records.iter().map(|r| r.audit.violations).sum(),
            worst_margin_db: worst,
            session_patch_cells: 0,
            session_violations: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRates {
    /// Foreign wearers accepted in the watermarked condition at theta_accept.
    pub imposter_far: f64,
    pub replay_rejection_rate: Option<f64>,
    /// Late adversary windows rejected for delay.
    pub delay_rejection_rate: Option<f64>,
    pub insider_detection_rate: Option<f64>,
    pub genuine_false_lock_rate: Option<f64>,
}

impl AttackRates {
    pub fn new(imposter_far: f64, sessions: &[ScenarioStats]) -> Self {
        let find = |s: Scenario| sessions.iter().find(|x| x.scenario == s);
        Self {
            imposter_far,
            replay_rejection_rate: find(Scenario::ReplayLogin).map(|s| s.detection_rate),
            delay_rejection_rate: find(Scenario::DelayedResponse)
                .filter(|s| s.adversary_windows > 0)
                .map(|s| s.adversary_rejects.late as f64 / s.adversary_windows as f64),
            insider_detection_rate: find(Scenario::InsiderTakeoverMidSession).map(|s| s.detection_rate),
            genuine_false_lock_rate: find(Scenario::GenuineControl).map(|s| s.detection_rate),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub n_users: usize,
    pub corpus: CorpusStats,
    pub sounding: SoundingStats,
    pub training: TrainingStats,
    pub calibration: Calibration,
    /// Test split, in the order chirp, playback, watermarked.
    pub conditions: Vec<ConditionReport>,
    pub watermark: WatermarkStats,
    pub attacks: AttackRates,
    pub sessions: Vec<ScenarioStats>,
    pub wall_clock_seconds: f64,
}

impl MetricsReport {
    pub fn condition(&self, name: &str) -> Option<&ConditionReport> {
        self.conditions.iter().find(|c| c.condition == name)
    }

    pub fn scenario(&self, s: Scenario) -> Option<&ScenarioStats> {
        self.sessions.iter().find(|x| x.scenario == s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// The report with its wall-clock field zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> MetricsReport {
        MetricsReport { wall_clock_seconds: 0.0, ..self.clone() }
    }
}

pub fn corpus_stats(p: &Prepared<'_>) -> CorpusStats {
    let c = &p.corpora;
    CorpusStats {
        enroll_clips: c.enroll.len(),
        eval_clips: c.eval.len(),
        calib_clips: c.calib.len(),
        train_clips: c.train.iter().map(|t| t.len()).sum(),
        enroll_silence_fraction: mean(&c.enroll.silence_fraction),
        calib_silence_fraction: mean(&c.calib.silence_fraction),
        eval_silence_fraction: mean(&c.eval.silence_fraction),
    }
}

pub fn sounding_stats(p: &Prepared<'_>) -> StageResult<SoundingStats> {
    let cfg = p.cfg;
    let fs = cfg.sample_rate();
    let mut nmse = Vec::new();
    let mut min_ratio = f64::INFINITY;
    for (u, ests) in p.enrollment.estimates.iter().enumerate() {
        for (s, est) in ests.iter().enumerate() {
            let truth = crate::ear::realize_ir(p.population.enroll_ear(u, s), fs, crate::ear::DEFAULT_IR_LENGTH)?;
            let t = truth.taps.samples();
            let shifted: Vec<f64> = (0..est.ir.taps.len()).map(|j| t.get(est.start_lag + j).copied().unwrap_or(0.0)).collect();
            nmse.push(sounding::band_limited_nmse(est.ir.taps.samples(), &shifted, fs, &cfg.sounding.chirp));
            min_ratio = min_ratio.min(est.peak_to_median);
        }
    }
    Ok(SoundingStats {
        estimates: nmse.len(),
        min_peak_to_median: min_ratio,
        mean_nmse: mean(&nmse),
        max_nmse: nmse.iter().copied().fold(0.0, f64::max),
    })
}

pub fn write_roc(dir: &Path, name: &str, scores: &ConditionScores) -> StageResult<()> {
    std::fs::create_dir_all(dir.join("eval"))?;
    let pts = matcher::roc_points(&scores.genuine, &scores.imposter)?;
    matcher::write_roc_csv(&dir.join(format!("eval/roc_{name}.csv")), &pts)?;
    Ok(())
}

/// One JSON object per event, tagged with its trial index.
pub fn write_traces(dir: &Path, scenario: Scenario, traces: &[SessionTrace]) -> StageResult<()> {
    std::fs::create_dir_all(dir.join("sessions"))?;
    let path = dir.join(format!("sessions/{}.jsonl", scenario.name()));
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in traces {
        for e in &t.events {
            let mut v = serde_json::to_value(e)?;
            if let serde_json::Value::Object(m) = &mut v {
                m.insert("trial".into(), t.trial.into());
            }
            writeln!(f, "{}", serde_json::to_string(&v)?)?;
        }
    }
    f.flush()?;
    Ok(())
}
