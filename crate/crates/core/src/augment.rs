//! Training-data synthesis: audio corpora and playback/response pairs.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ear::{acquire_through, EarError, ImpulseResponse, IrOrigin};
use crate::features::{deficiency_mask, FeatureConfig};
use crate::rng;
use crate::signal::{self, Signal, SignalError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AugmentError {
    #[error("invalid augmentation config: {0}")]
    Config(String),
    #[error("training pairs must come from an estimated impulse response, not ground truth")]
    GroundTruthLeak,
    #[error("user {user} has {count} pair(s); stratified split needs at least 2")]
    Stratification { user: String, count: usize },
    #[error(transparent)]
    Ear(#[from] EarError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    SyntheticSpeechlike,
    SyntheticMusiclike,
    ExternalWav,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub kind: CorpusKind,
    pub n_clips: usize,
    pub seed: u64,
    /// Target fraction of silent time per clip, in `[0, 0.9]`.
    pub silence_profile: f64,
    pub clip_seconds: f64,
    pub sample_rate: u32,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.n_clips == 0 {
            return Err(AugmentError::Config("n_clips must be at least 1".into()));
        }
        if !(1.0..=10.0).contains(&self.clip_seconds) {
            return Err(AugmentError::Config("clip_seconds must lie in [1, 10]".into()));
        }
        if !(0.0..=0.9).contains(&self.silence_profile) {
            return Err(AugmentError::Config("silence_profile must lie in [0, 0.9]".into()));
        }
        if self.kind == CorpusKind::ExternalWav {
            return Err(AugmentError::Config("external corpora are loaded, not synthesized".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub clips: Vec<Signal>,
    pub silence_fraction: Vec<f64>,
    pub kind: CorpusKind,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn from_clips(clips: Vec<Signal>, kind: CorpusKind) -> Self {
        let fc = FeatureConfig {
            sample_rate: clips.first().map_or(signal::DEFAULT_SAMPLE_RATE, Signal::sample_rate),
            ..FeatureConfig::default()
        };
        let silence_fraction = clips
            .iter()
            .map(|c| deficiency_mask(c, &fc).map_or(0.0, |m| m.silent_fraction()))
            .collect();
        Self {
            clips,
            silence_fraction,
            kind,
        }
    }
}

/// Split `total` into `parts` positive pieces with random proportions.
fn random_partition(total: usize, parts: usize, rng: &mut impl Rng) -> Vec<usize> {
    if parts == 0 {
        return Vec::new();
    }
    let w: Vec<f64> = (0..parts).map(|_| rng.random_range(0.5..1.5)).collect();
    let sum: f64 = w.iter().sum();
    let mut out: Vec<usize> = w.iter().map(|x| (x / sum * total as f64).floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    out[parts - 1] += total - assigned;
    out
}

/// Sound/silence layout of one clip: (start, len) of each sounding segment.
fn segment_layout(n: usize, silence: f64, mean_seg: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let silent_total = (silence * n as f64).round() as usize;
    let sound_total = n - silent_total;
    if silent_total == 0 {
        return vec![(0, n)];
    }
    let k = (sound_total / mean_seg).max(1);
    let sounds = random_partition(sound_total, k, rng);
    let gaps = random_partition(silent_total, k + 1, rng);
    let mut segs = Vec::with_capacity(k);
    let mut t = gaps[0];
    for (i, &len) in sounds.iter().enumerate() {
        segs.push((t, len));
        t += len + gaps[i + 1];
    }
    segs
}

fn fade(x: &mut [f64], len: usize) {
    let len = len.min(x.len() / 2);
    for i in 0..len {
        let g = 0.5 - 0.5 * (PI * i as f64 / len as f64).cos();
        x[i] *= g;
        let j = x.len() - 1 - i;
        x[j] *= g;
    }
}

fn normalize_peak(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        for v in x.iter_mut() {
            *v *= peak / m;
        }
    }
}

fn harmonic_burst(len: usize, fs: f64, rng: &mut impl Rng) -> Vec<f64> {
    let f0 = rng.random_range(100.0..300.0);
    let n_h = rng.random_range(3..=8);
    let glide = rng.random_range(-0.15..0.15);
    let amps: Vec<f64> = (1..=n_h).map(|h| rng.random_range(0.5..1.0) / h as f64).collect();
    let phases: Vec<f64> = (0..n_h).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(len);
    for n in 0..len {
        let f = f0 * (1.0 + glide * n as f64 / len.max(1) as f64);
        phase += 2.0 * PI * f / fs;
        let v: f64 = amps
            .iter()
            .zip(&phases)
            .enumerate()
            .map(|(h, (a, p))| a * ((h + 1) as f64 * phase + p).sin())
            .sum();
        out.push(v);
    }
    out
}

fn tone_stack(len: usize, fs: f64, rng: &mut impl Rng) -> Vec<f64> {
    let notes = rng.random_range(2..=4);
    let roots: Vec<f64> = (0..notes)
        .map(|_| 110.0 * 2f64.powf(rng.random_range(0.0..4.0)))
        .collect();
    let mut out = vec![0.0; len];
    for root in roots {
        let partials = rng.random_range(2..=5);
        for h in 1..=partials {
            let f = root * h as f64;
            if f >= fs / 2.0 - 200.0 {
                break;
            }
            let a = rng.random_range(0.3..1.0) / h as f64;
            let p = rng.random_range(0.0..2.0 * PI);
            for (n, o) in out.iter_mut().enumerate() {
                *o += a * (2.0 * PI * f * n as f64 / fs + p).sin();
            }
        }
    }
    out
}

fn band_noise(len: usize, fs: f64, seed: u64, rng: &mut impl Rng) -> Vec<f64> {
    let lo = rng.random_range(100.0..2000.0);
    let hi = rng.random_range(3000.0..7800.0);
    let raw = signal::white_noise(len, 1.0, seed, fs as u32);
    crate::sounding::band_limit(raw.samples(), fs as u32, lo, hi)
}

pub fn synth_corpus(spec: &CorpusSpec) -> Result<Corpus, AugmentError> {
    spec.validate()?;
    let fs = f64::from(spec.sample_rate);
    let n = (spec.clip_seconds * fs).round() as usize;
    let clips = (0..spec.n_clips)
        .map(|i| {
            let clip_seed = rng::derive(spec.seed, &[i as u64]);
            let mut rng = rng::seeded(clip_seed);
            let mean_seg = match spec.kind {
                CorpusKind::SyntheticSpeechlike => (0.35 * fs) as usize,
                _ => (0.8 * fs) as usize,
            };
            let layout = segment_layout(n, spec.silence_profile, mean_seg, &mut rng);
            let gapped = layout.len() > 1 || layout[0].1 < n;
            let mut clip = vec![0.0; n];
            for (s, (start, len)) in layout.into_iter().enumerate() {
                let mut seg = match spec.kind {
                    CorpusKind::SyntheticSpeechlike => harmonic_burst(len, fs, &mut rng),
                    _ => {
                        let mut t = tone_stack(len, fs, &mut rng);
                        normalize_peak(&mut t, 1.0);
                        let nz = band_noise(len, fs, rng::derive(clip_seed, &[s as u64, 7]), &mut rng);
                        let mix = rng.random_range(0.3..0.7);
                        let mut nz_n = nz;
                        normalize_peak(&mut nz_n, 1.0);
                        for (a, b) in t.iter_mut().zip(&nz_n) {
                            *a = (1.0 - mix) * *a + mix * b;
                        }
                        t
                    }
                };
                let level = rng.random_range(0.2..0.5);
                normalize_peak(&mut seg, level);
                if gapped {
                    fade(&mut seg, (0.01 * fs) as usize);
                }
                clip[start..start + len].copy_from_slice(&seg);
            }
            Signal::new(clip, spec.sample_rate)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Corpus::from_clips(clips, spec.kind))
}

/// Load every `.wav` file in `dir` (sorted by name) as an external corpus.
pub fn load_corpus_dir(dir: &Path) -> Result<Corpus, AugmentError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| AugmentError::Config(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    let clips = paths
        .iter()
        .map(|p| signal::read_wav(p))
        .collect::<Result<Vec<_>, _>>()?;
    if clips.is_empty() {
        return Err(AugmentError::Config(format!("no wav files in {}", dir.display())));
    }
    let fs = clips[0].sample_rate();
    for (p, c) in paths.iter().zip(&clips) {
        if c.sample_rate() != fs {
            return Err(AugmentError::Config(format!("{}: sample rate differs from corpus", p.display())));
        }
        if !(1.0..=10.0).contains(&c.duration_secs()) {
            return Err(AugmentError::Config(format!(
                "{}: duration {:.2} s outside [1, 10] s",
                p.display(),
                c.duration_secs()
            )));
        }
    }
    Ok(Corpus::from_clips(clips, CorpusKind::ExternalWav))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub playback: Signal,
    pub response: Signal,
    pub user_id: String,
    pub session_id: String,
    pub clip_index: usize,
}

/// One training pair per clip: the clip convolved with the user's estimated
/// response plus seeded measurement noise.
pub fn make_pairs(
    ir: &ImpulseResponse,
    corpus: &Corpus,
    noise_amplitude: f64,
    seed: u64,
    user_id: &str,
    session_id: &str,
) -> Result<Vec<LabeledPair>, AugmentError> {
    if ir.origin != IrOrigin::Estimated {
        return Err(AugmentError::GroundTruthLeak);
    }
    if corpus.is_empty() {
        return Err(AugmentError::Config("empty corpus".into()));
    }
    corpus
        .clips
        .iter()
        .enumerate()
        .map(|(i, clip)| {
            let response = acquire_through(ir, clip, noise_amplitude, rng::derive(seed, &[i as u64]))?;
            Ok(LabeledPair {
                playback: clip.clone(),
                response,
                user_id: user_id.to_string(),
                session_id: session_id.to_string(),
                clip_index: i,
            })
        })
        .collect()
}

/// Label-stratified split. Each user keeps at least one pair on each side.
pub fn split_dataset<T: Clone>(
    items: &[T],
    label: impl Fn(&T) -> &str,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>), AugmentError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(AugmentError::Config("train_fraction must lie in (0, 1)".into()));
    }
    let mut by_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        by_user.entry(label(it)).or_default().push(i);
    }
    let mut train_idx = Vec::new();
    let mut eval_idx = Vec::new();
    for (u, (user, mut idx)) in by_user.into_iter().enumerate() {
        if idx.len() < 2 {
            return Err(AugmentError::Stratification {
                user: user.to_string(),
                count: idx.len(),
            });
        }
        idx.shuffle(&mut rng::seeded(rng::derive(seed, &[u as u64])));
        let n_train = ((train_fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        train_idx.extend_from_slice(&idx[..n_train]);
        eval_idx.extend_from_slice(&idx[n_train..]);
    }
    train_idx.sort_unstable();
    eval_idx.sort_unstable();
    Ok((
        train_idx.iter().map(|&i| items[i].clone()).collect(),
        eval_idx.iter().map(|&i| items[i].clone()).collect(),
    ))
}

pub fn split_pairs(pairs: &[LabeledPair], train_fraction: f64, seed: u64) -> Result<(Vec<LabeledPair>, Vec<LabeledPair>), AugmentError> {
    split_dataset(pairs, |p| p.user_id.as_str(), train_fraction, seed)
}
