//! Experiment configuration: one TOML document, usually written with flat
//! dotted keys (`population.n_users = 20`). Every field has a default, unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::CorpusKind;
use crate::ear::{Jitter, PopulationParams};
use crate::embedding::{ArchConfig, TrainHyper};
use crate::features::FeatureConfig;
use crate::session::SessionConfig;
use crate::sounding::ChirpSpec;
use crate::watermark::WatermarkConfig;

/// Environment variable that overrides `output.dir`.
pub const OUTPUT_ENV: &str = "EARCAN_OUT";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl ToString) -> ConfigError {
    ConfigError::Invalid { field, reason: reason.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationSection {
    pub n_users: usize,
    pub enroll_sessions: usize,
    /// Peak amplitude of the uniform microphone noise added to every acquisition.
    pub noise_amplitude: f64,
    pub jitter: Jitter,
    pub ranges: PopulationParams,
}

impl Default for PopulationSection {
    fn default() -> Self {
        Self {
            n_users: 20,
            enroll_sessions: 3,
            noise_amplitude: 1e-5,
            jitter: Jitter::default(),
            ranges: PopulationParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoundingSection {
    pub chirp: ChirpSpec,
    pub ir_length: usize,
    /// Length of the white reference clip played through chirp-estimated responses.
    pub reference_seconds: f64,
    pub reference_amplitude: f64,
}

impl Default for SoundingSection {
    fn default() -> Self {
        Self {
            chirp: ChirpSpec::default(),
            ir_length: crate::ear::DEFAULT_IR_LENGTH,
            reference_seconds: 1.0,
            reference_amplitude: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Kind of the enrollment, calibration and test clips.
    pub kind: CorpusKind,
    /// Directory of WAV clips used instead of the synthetic test corpus.
    pub external_dir: Option<PathBuf>,
    pub silence_profile: f64,
    pub enroll_clips: usize,
    pub calib_clips: usize,
    pub eval_clips: usize,
    pub train_speechlike: usize,
    pub train_musiclike: usize,
    pub train_silence: f64,
    pub train_clip_seconds: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            kind: CorpusKind::SyntheticSpeechlike,
            external_dir: None,
            silence_profile: 0.6,
            enroll_clips: 4,
            calib_clips: 3,
            eval_clips: 4,
            train_speechlike: 12,
            train_musiclike: 6,
            train_silence: 0.3,
            train_clip_seconds: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetSection {
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub conv2_channels: usize,
    pub conv2_kernel: usize,
    pub embed_dim: usize,
    pub train: TrainHyper,
    /// Also train on watermarked copies of the augmentation pairs.
    pub train_on_watermarked: bool,
}

impl Default for NetSection {
    fn default() -> Self {
        let a = ArchConfig::with_classes(2);
        Self {
            conv1_channels: a.conv1_channels,
            conv1_kernel: a.conv1_kernel,
            conv2_channels: a.conv2_channels,
            conv2_kernel: a.conv2_kernel,
            embed_dim: a.embed_dim,
            train: TrainHyper::default(),
            train_on_watermarked: true,
        }
    }
}

impl NetSection {
    pub fn arch(&self, in_bands: usize, n_classes: usize) -> ArchConfig {
        ArchConfig {
            in_bands,
            conv1_channels: self.conv1_channels,
            conv1_kernel: self.conv1_kernel,
            conv2_channels: self.conv2_channels,
            conv2_kernel: self.conv2_kernel,
            embed_dim: self.embed_dim,
            n_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Foreign wearers scored per (claimed user, clip) in the watermarked condition.
    pub imposters_per_clip: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { imposters_per_clip: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionSection {
    pub window_seconds: f64,
    /// Fixed thresholds; when absent they are calibrated on held-out data.
    pub theta_accept: Option<f64>,
    pub theta_update: Option<f64>,
    /// False-accept target for the calibrated update (strict login) threshold.
    pub update_far: f64,
    pub ema_lambda: f64,
    pub k_fail: u32,
    pub alpha_update: f64,
    pub latency_budget_ms: u64,
    pub nominal_latency_ms: f64,
    pub delay_extra_ms: f64,
    /// Bind every window to a fresh challenge nonce.
    pub cri: bool,
    pub trials: usize,
    pub login_attempts: usize,
    pub takeover_window: usize,
    pub windows_after_takeover: usize,
}

impl Default for SessionSection {
    fn default() -> Self {
        let s = SessionConfig::default();
        Self {
            window_seconds: s.window_seconds,
            theta_accept: None,
            theta_update: None,
            update_far: 0.01,
            ema_lambda: s.ema_lambda,
            k_fail: s.k_fail,
            alpha_update: s.alpha_update,
            latency_budget_ms: s.latency_budget_ms,
            nominal_latency_ms: 40.0,
            delay_extra_ms: 500.0,
            cri: true,
            trials: 200,
            login_attempts: 3,
            takeover_window: 5,
            windows_after_takeover: 5,
        }
    }
}

impl SessionSection {
    pub fn session_config(&self, theta_accept: f64, theta_update: f64) -> SessionConfig {
        SessionConfig {
            window_seconds: self.window_seconds,
            theta_accept,
            theta_update,
            ema_lambda: self.ema_lambda,
            k_fail: self.k_fail,
            alpha_update: self.alpha_update,
            latency_budget_ms: self.latency_budget_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Write every clip, response and estimated IR as WAV.
    pub write_audio: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), write_audio: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub population: PopulationSection,
    pub sounding: SoundingSection,
    pub corpus: CorpusSection,
    pub features: FeatureConfig,
    pub net: NetSection,
    pub eval: EvalSection,
    pub session: SessionSection,
    pub watermark: WatermarkConfig,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            population: PopulationSection::default(),
            sounding: SoundingSection::default(),
            corpus: CorpusSection::default(),
            features: FeatureConfig::default(),
            net: NetSection::default(),
            eval: EvalSection::default(),
            session: SessionSection::default(),
            watermark: WatermarkConfig::default(),
            output: OutputSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical serialisation, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serialises")))
    }

    /// Output root, honouring [`OUTPUT_ENV`].
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output.dir.clone(),
        }
    }

    pub fn sample_rate(&self) -> u32 {
        self.features.sample_rate
    }

    pub fn window_samples(&self) -> usize {
        (self.session.window_seconds * f64::from(self.sample_rate())).round() as usize
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let p = &self.population;
        if p.n_users < 2 {
            return Err(invalid("population.n_users", "need at least two users"));
        }
        if p.enroll_sessions == 0 {
            return Err(invalid("population.enroll_sessions", "must be at least 1"));
        }
        if !(p.noise_amplitude >= 0.0 && p.noise_amplitude.is_finite()) {
            return Err(invalid("population.noise_amplitude", "must be finite and non-negative"));
        }
        if !(p.jitter.freq >= 0.0 && p.jitter.freq < 1.0 && p.jitter.gain >= 0.0 && p.jitter.gain < 1.0) {
            return Err(invalid("population.jitter", "relative jitter must lie in [0, 1)"));
        }
        p.ranges.validate().map_err(|e| invalid("population.ranges", e))?;
        if p.ranges.max_delay + 1 >= self.sounding.ir_length {
            return Err(invalid("population.ranges.max_delay", "must fit inside sounding.ir_length"));
        }

        self.features.validate().map_err(|e| invalid("features", e))?;
        let fs = self.sample_rate();
        self.sounding.chirp.validate(fs).map_err(|e| invalid("sounding.chirp", e))?;
        if self.sounding.ir_length < 64 {
            return Err(invalid("sounding.ir_length", "must be at least 64"));
        }
        if !(1.0..=10.0).contains(&self.sounding.reference_seconds) {
            return Err(invalid("sounding.reference_seconds", "must lie in [1, 10]"));
        }
        if !(self.sounding.reference_amplitude > 0.0 && self.sounding.reference_amplitude <= 1.0) {
            return Err(invalid("sounding.reference_amplitude", "must lie in (0, 1]"));
        }

        let c = &self.corpus;
        if c.kind == CorpusKind::ExternalWav && c.external_dir.is_none() {
            return Err(invalid("corpus.external_dir", "required when corpus.kind = external_wav"));
        }
        if !(0.0..=0.9).contains(&c.silence_profile) || !(0.0..=0.9).contains(&c.train_silence) {
            return Err(invalid("corpus.silence_profile", "silence fractions must lie in [0, 0.9]"));
        }
        if c.enroll_clips == 0 || c.calib_clips == 0 || c.eval_clips == 0 {
            return Err(invalid("corpus", "enroll_clips, calib_clips and eval_clips must be positive"));
        }
        if c.train_speechlike + c.train_musiclike == 0 {
            return Err(invalid("corpus", "training corpus is empty"));
        }
        if !(1.0..=10.0).contains(&c.train_clip_seconds) {
            return Err(invalid("corpus.train_clip_seconds", "must lie in [1, 10]"));
        }

        let arch = self.net.arch(self.features.n_bands, p.n_users);
        arch.validate().map_err(|e| invalid("net", e))?;
        self.net.train.validate().map_err(|e| invalid("net.train", e))?;
        let min_len = self.features.frame_len + (arch.min_frames() - 1) * self.features.hop;
        let shortest = c.train_clip_seconds.min(self.sounding.reference_seconds) * f64::from(fs);
        if (shortest as usize) < min_len {
            return Err(invalid("net", "clips are too short for the network's receptive field"));
        }

        self.watermark.validate().map_err(|e| invalid("watermark", e))?;

        let s = &self.session;
        if !(1.0..=10.0).contains(&s.window_seconds) {
            return Err(invalid("session.window_seconds", "must lie in [1, 10] (it is also the test clip length)"));
        }
        if !(s.update_far > 0.0 && s.update_far < 1.0) {
            return Err(invalid("session.update_far", "must lie in (0, 1)"));
        }
        if s.login_attempts == 0 {
            return Err(invalid("session.login_attempts", "must be at least 1"));
        }
        if !(s.nominal_latency_ms >= 0.0 && s.delay_extra_ms >= 0.0) {
            return Err(invalid("session", "latencies must be non-negative"));
        }
        let probe = s.session_config(s.theta_accept.unwrap_or(0.0), s.theta_update.unwrap_or(1.0));
        probe.validate().map_err(|e| invalid("session", e))?;
        if let (Some(a), Some(u)) = (s.theta_accept, s.theta_update) {
            s.session_config(a, u).validate().map_err(|e| invalid("session", e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn dotted_keys_override_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "seed = 3\npopulation.n_users = 4\nnet.train.epochs = 2\nwatermark.allowance = 0.25\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.population.n_users, 4);
        assert_eq!(cfg.net.train.epochs, 2);
        assert_eq!(cfg.watermark.allowance, 0.25);
        assert_eq!(cfg.features, FeatureConfig::default());
        assert_ne!(cfg.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn unknown_and_invalid_keys_are_reported() {
        let err = ExperimentConfig::from_toml("population.n_user = 4\n").unwrap_err();
        assert!(err.to_string().contains("n_user"), "{err}");
        let err = ExperimentConfig::from_toml("population.n_users = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { field: "population.n_users", .. }));
        let err = ExperimentConfig::from_toml("session.theta_accept = 0.9\nsession.theta_update = 0.5\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { field: "session", .. }));
        let err = ExperimentConfig::from_toml("corpus.kind = \"external_wav\"\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { field: "corpus.external_dir", .. }));
    }
}
