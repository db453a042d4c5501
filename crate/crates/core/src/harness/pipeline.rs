//! Population, chirp enrollment, corpora, augmentation, training, templates
//! and the three verification conditions.

use rand::seq::index;

use super::config::ExperimentConfig;
use super::StageResult;
use crate::augment::{self, Corpus, CorpusKind, CorpusSpec, LabeledPair};
use crate::ear::{acquire_through, sample_profile, simulate_in_ear, EarProfile, ImpulseResponse};
use crate::embedding::{self, Embedding, NetParams, TrainOutcome, TrainSample};
use crate::features::{self, BandAnalyzer, FeatureMatrix};
use crate::matcher::{self, Template, TemplateOrigin};
use crate::rng::{self, label};
use crate::signal::{self, Signal};
use crate::sounding::{self, IrEstimate};
use crate::watermark::{self, AuditReport, PatchProblem, WatermarkPatch};

/// Ground-truth ears: one base profile per user and its jittered variants,
/// one per acquisition session.
#[derive(Debug, Clone)]
pub struct Population {
    pub base: Vec<EarProfile>,
    /// `[user][session]`: enrollment sessions, then calibration, then test.
    pub sessions: Vec<Vec<EarProfile>>,
    pub n_enroll: usize,
    pub n_calib: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Calibration,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Calibration => label("calibration"),
            Split::Test => label("test"),
        }
    }
}

impl Population {
    pub fn n_users(&self) -> usize {
        self.base.len()
    }

    pub fn enroll_ear(&self, u: usize, s: usize) -> &EarProfile {
        &self.sessions[u][s]
    }

    /// The ear wearing the device when clip `c` of `split` is played.
    pub fn ear(&self, split: Split, u: usize, c: usize) -> &EarProfile {
        match split {
            Split::Calibration => &self.sessions[u][self.n_enroll + c],
            Split::Test => &self.sessions[u][self.n_enroll + self.n_calib + c],
        }
    }
}

pub fn user_id(u: usize) -> String {
    format!("user{u:02}")
}

pub fn build_population(cfg: &ExperimentConfig) -> StageResult<Population> {
    let p = &cfg.population;
    let (n_enroll, n_calib, n_test) = (p.enroll_sessions, cfg.corpus.calib_clips, cfg.corpus.eval_clips);
    let mut base = Vec::with_capacity(p.n_users);
    let mut sessions = Vec::with_capacity(p.n_users);
    for u in 0..p.n_users {
        let profile = sample_profile(rng::derive(cfg.seed, &[label("profile"), u as u64]), &p.ranges, user_id(u))?;
        let variants = (0..n_enroll + n_calib + n_test)
            .map(|s| profile.session_variant(&p.jitter, rng::derive(cfg.seed, &[label("session"), u as u64, s as u64])))
            .collect();
        base.push(profile);
        sessions.push(variants);
    }
    Ok(Population { base, sessions, n_enroll, n_calib, n_test })
}

#[derive(Debug, Clone)]
pub struct Enrollment {
    pub probe: Signal,
    /// `[user][enrollment session]`
    pub estimates: Vec<Vec<IrEstimate>>,
}

impl Enrollment {
    /// The channel estimate used for watermark optimisation and binding.
    pub fn primary_ir(&self, u: usize) -> &ImpulseResponse {
        &self.estimates[u][0].ir
    }
}

/// Play the sweep into `ear` and deconvolve the recording.
pub fn sound(cfg: &ExperimentConfig, probe: &Signal, ear: &EarProfile, seed: u64) -> StageResult<IrEstimate> {
    let recorded = simulate_in_ear(ear, probe, cfg.population.noise_amplitude, seed)?;
    Ok(sounding::estimate_ir(probe, &recorded, &cfg.sounding.chirp, cfg.sounding.ir_length)?)
}

pub fn enroll(cfg: &ExperimentConfig, pop: &Population) -> StageResult<Enrollment> {
    let probe = sounding::exponential_chirp(&cfg.sounding.chirp, cfg.sample_rate())?;
    let estimates = (0..pop.n_users())
        .map(|u| {
            (0..pop.n_enroll)
                .map(|s| {
                    let seed = rng::derive(cfg.seed, &[label("enroll-noise"), u as u64, s as u64]);
                    sound(cfg, &probe, pop.enroll_ear(u, s), seed)
                })
                .collect::<StageResult<Vec<_>>>()
        })
        .collect::<StageResult<Vec<_>>>()?;
    Ok(Enrollment { probe, estimates })
}

#[derive(Debug, Clone)]
pub struct Corpora {
    pub train: Vec<Corpus>,
    /// White reference clip played through chirp-estimated channels.
    pub reference: Signal,
    pub enroll: Corpus,
    pub calib: Corpus,
    pub eval: Corpus,
}

impl Corpora {
    pub fn split(&self, split: Split) -> &Corpus {
        match split {
            Split::Calibration => &self.calib,
            Split::Test => &self.eval,
        }
    }
}

fn quantized(c: Corpus) -> Corpus {
    let clips = c.clips.iter().map(Signal::quantized_pcm16).collect();
    Corpus::from_clips(clips, c.kind)
}

pub fn build_corpora(cfg: &ExperimentConfig) -> StageResult<Corpora> {
    let c = &cfg.corpus;
    let fs = cfg.sample_rate();
    let spec = |kind, n_clips, stream: &str, silence, seconds| CorpusSpec {
        kind,
        n_clips,
        seed: rng::derive(cfg.seed, &[label(stream)]),
        silence_profile: silence,
        clip_seconds: seconds,
        sample_rate: fs,
    };
    let mut train = Vec::new();
    if c.train_speechlike > 0 {
        let s = spec(CorpusKind::SyntheticSpeechlike, c.train_speechlike, "corpus-train-speech", c.train_silence, c.train_clip_seconds);
        train.push(quantized(augment::synth_corpus(&s)?));
    }
    if c.train_musiclike > 0 {
        let s = spec(CorpusKind::SyntheticMusiclike, c.train_musiclike, "corpus-train-music", c.train_silence, c.train_clip_seconds);
        train.push(quantized(augment::synth_corpus(&s)?));
    }
    let ref_len = (cfg.sounding.reference_seconds * f64::from(fs)).round() as usize;
    let reference = signal::white_noise(ref_len, cfg.sounding.reference_amplitude, rng::derive(cfg.seed, &[label("reference")]), fs)
        .quantized_pcm16();

    let (enroll, calib, eval) = match &c.external_dir {
        Some(dir) => {
            let all = augment::load_corpus_dir(dir)?;
            let need = c.enroll_clips + c.calib_clips + c.eval_clips;
            if all.len() < need || all.clips[0].sample_rate() != fs {
                return Err(format!(
                    "{} holds {} clips at {} Hz; need {need} at {fs} Hz",
                    dir.display(),
                    all.len(),
                    all.clips[0].sample_rate()
                )
                .into());
            }
            let take = |from: usize, n: usize| Corpus::from_clips(all.clips[from..from + n].to_vec(), CorpusKind::ExternalWav);
            (take(0, c.enroll_clips), take(c.enroll_clips, c.calib_clips), take(c.enroll_clips + c.calib_clips, c.eval_clips))
        }
        None => {
            let w = cfg.session.window_seconds;
            let make = |n, stream| -> StageResult<Corpus> {
                Ok(quantized(augment::synth_corpus(&spec(c.kind, n, stream, c.silence_profile, w))?))
            };
            (make(c.enroll_clips, "corpus-enroll")?, make(c.calib_clips, "corpus-calib")?, make(c.eval_clips, "corpus-eval")?)
        }
    };
    Ok(Corpora { train, reference, enroll, calib, eval })
}

/// Everything up to training; cheap and fully determined by the config.
pub struct Prepared<'c> {
    pub cfg: &'c ExperimentConfig,
    pub analyzer: BandAnalyzer,
    pub population: Population,
    pub enrollment: Enrollment,
    pub corpora: Corpora,
}

impl<'c> Prepared<'c> {
    pub fn new(cfg: &'c ExperimentConfig) -> StageResult<Self> {
        let analyzer = BandAnalyzer::new(&cfg.features)?;
        let population = build_population(cfg)?;
        let enrollment = enroll(cfg, &population)?;
        let corpora = build_corpora(cfg)?;
        Ok(Self { cfg, analyzer, population, enrollment, corpora })
    }

    pub fn noise(&self) -> f64 {
        self.cfg.population.noise_amplitude
    }

    fn seed(&self, path: &[u64]) -> u64 {
        rng::derive(self.cfg.seed, path)
    }

    pub fn features(&self, playback: &Signal, response: &Signal) -> StageResult<FeatureMatrix> {
        Ok(features::rtf_features_with(&self.analyzer, playback, response)?)
    }

    /// Augmentation pairs of `corpus` for every user and enrollment session.
    pub fn pairs(&self, corpus: &Corpus, stream: &str) -> StageResult<Vec<LabeledPair>> {
        let mut out = Vec::new();
        for (u, ests) in self.enrollment.estimates.iter().enumerate() {
            for (s, est) in ests.iter().enumerate() {
                let seed = self.seed(&[label(stream), u as u64, s as u64]);
                out.extend(augment::make_pairs(&est.ir, corpus, self.noise(), seed, &user_id(u), &format!("enroll{s}"))?);
            }
        }
        Ok(out)
    }

    /// The unoptimised watermark for a clip, carriers drawn from `seed`.
    pub fn allowance_copy(&self, clip: &Signal, seed: u64) -> StageResult<Signal> {
        let mask = features::deficiency_mask_with(&self.analyzer, clip.samples());
        let ceiling = watermark::compute_ceiling(&self.analyzer, clip, &mask, self.cfg.watermark.masking_offset_db)?;
        let patch = watermark::allowance_patch(&self.analyzer, clip, &ceiling, &mask, &self.cfg.watermark, seed)?;
        Ok(watermark::apply_patch(clip, &patch, &self.cfg.watermark)?.0)
    }

    /// Reference clip through a chirp-estimated channel.
    pub fn chirp_features(&self, est: &IrEstimate, seed: u64) -> StageResult<FeatureMatrix> {
        let r = &self.corpora.reference;
        let response = acquire_through(&est.ir, r, self.noise(), seed)?;
        self.features(r, &response)
    }

    pub fn training_set(&self) -> StageResult<Vec<TrainSample>> {
        let mut samples = Vec::new();
        let index_of = |id: &str| id.trim_start_matches("user").parse::<usize>().expect("harness user id");
        for (k, corpus) in self.corpora.train.iter().enumerate() {
            for p in self.pairs(corpus, &format!("train-pairs-{k}"))? {
                samples.push(TrainSample { features: self.features(&p.playback, &p.response)?, label: index_of(&p.user_id) });
            }
            if self.cfg.net.train_on_watermarked && corpus.kind != CorpusKind::SyntheticMusiclike {
                for s in 0..self.population.n_enroll {
                    let clips = corpus
                        .clips
                        .iter()
                        .enumerate()
                        .map(|(i, c)| self.allowance_copy(c, self.seed(&[label("train-wm"), k as u64, s as u64, i as u64])))
                        .collect::<StageResult<Vec<_>>>()?;
                    let marked = Corpus::from_clips(clips, corpus.kind);
                    for (u, ests) in self.enrollment.estimates.iter().enumerate() {
                        let seed = self.seed(&[label("train-wm-pairs"), k as u64, u as u64, s as u64]);
                        for p in augment::make_pairs(&ests[s].ir, &marked, self.noise(), seed, &user_id(u), &format!("enroll{s}"))? {
                            samples.push(TrainSample { features: self.features(&p.playback, &p.response)?, label: u });
                        }
                    }
                }
            }
        }
        for (u, ests) in self.enrollment.estimates.iter().enumerate() {
            for (s, est) in ests.iter().enumerate() {
                let f = self.chirp_features(est, self.seed(&[label("train-reference"), u as u64, s as u64]))?;
                samples.push(TrainSample { features: f, label: u });
            }
        }
        Ok(samples)
    }

    pub fn train(&self, samples: &[TrainSample]) -> StageResult<TrainOutcome> {
        let arch = self.cfg.net.arch(self.cfg.features.n_bands, self.population.n_users());
        Ok(embedding::train(samples, &arch, &self.cfg.net.train, self.seed(&[label("train")]))?)
    }

    pub fn templates(&self, net: &NetParams) -> StageResult<Templates> {
        let n = self.population.n_users();
        let mut chirp = Vec::with_capacity(n);
        let mut raw = Vec::with_capacity(n);
        let mut marked = Vec::with_capacity(n);
        let wm_clips = (0..n)
            .map(|u| {
                let clips = self
                    .corpora
                    .enroll
                    .clips
                    .iter()
                    .enumerate()
                    .map(|(c, clip)| self.allowance_copy(clip, self.seed(&[label("enroll-wm"), u as u64, c as u64])))
                    .collect::<StageResult<Vec<_>>>()?;
                Ok(Corpus::from_clips(clips, self.corpora.enroll.kind))
            })
            .collect::<StageResult<Vec<_>>>()?;
        for (u, ests) in self.enrollment.estimates.iter().enumerate() {
            let mut e_chirp = Vec::new();
            let mut e_raw = Vec::new();
            let mut e_wm = Vec::new();
            for (s, est) in ests.iter().enumerate() {
                let f = self.chirp_features(est, self.seed(&[label("template-reference"), u as u64, s as u64]))?;
                e_chirp.push(embedding::forward(net, &f)?);
                let seed = self.seed(&[label("template-raw"), u as u64, s as u64]);
                for p in augment::make_pairs(&est.ir, &self.corpora.enroll, self.noise(), seed, &user_id(u), &format!("enroll{s}"))? {
                    e_raw.push(embedding::forward(net, &self.features(&p.playback, &p.response)?)?);
                }
                let seed = self.seed(&[label("template-wm"), u as u64, s as u64]);
                for p in augment::make_pairs(&est.ir, &wm_clips[u], self.noise(), seed, &user_id(u), &format!("enroll{s}"))? {
                    e_wm.push(embedding::forward(net, &self.features(&p.playback, &p.response)?)?);
                }
            }
            chirp.push(matcher::make_template_with(&e_chirp, TemplateOrigin::ChirpEnrollment)?);
            raw.push(matcher::make_template_with(&e_raw, TemplateOrigin::ChirpEnrollment)?);
            marked.push(matcher::make_template_with(&e_wm, TemplateOrigin::ChirpEnrollment)?);
        }
        Ok(Templates { chirp, raw, watermarked: marked })
    }

    fn embed(&self, net: &NetParams, playback: &Signal, response: &Signal) -> StageResult<Embedding> {
        Ok(embedding::forward(net, &self.features(playback, response)?)?)
    }

    /// Chirp, raw-playback and watermarked-playback scores on one split.
    pub fn evaluate(&self, net: &NetParams, templates: &Templates, split: Split) -> StageResult<Evaluation> {
        let cfg = self.cfg;
        let n = self.population.n_users();
        let clips = &self.corpora.split(split).clips;
        let tag = split.tag();
        let mut chirp = ConditionScores::default();
        let mut raw = ConditionScores::default();
        let mut marked = ConditionScores::default();

        for (c, clip) in clips.iter().enumerate() {
            for v in 0..n {
                let ear = self.population.ear(split, v, c);
                let est = sound(cfg, &self.enrollment.probe, ear, self.seed(&[label("probe-chirp"), tag, v as u64, c as u64]))?;
                let f = self.chirp_features(&est, self.seed(&[label("probe-reference"), tag, v as u64, c as u64]))?;
                let e = embedding::forward(net, &f)?;
                chirp.push_all(&templates.chirp, v, &e)?;

                let response = simulate_in_ear(ear, clip, self.noise(), self.seed(&[label("probe-raw"), tag, v as u64, c as u64]))?;
                let e = self.embed(net, clip, &response)?;
                raw.push_all(&templates.raw, v, &e)?;
            }
        }

        let mut patches = Vec::new();
        for (c, clip) in clips.iter().enumerate() {
            let mask = features::deficiency_mask_with(&self.analyzer, clip.samples());
            let ceiling = watermark::compute_ceiling(&self.analyzer, clip, &mask, cfg.watermark.masking_offset_db)?;
            for u in 0..n {
                let problem = PatchProblem {
                    analyzer: &self.analyzer,
                    playback: clip,
                    ir: self.enrollment.primary_ir(u),
                    template: &templates.watermarked[u],
                    net,
                    ceiling: &ceiling,
                    mask: &mask,
                };
                let seed = self.seed(&[label("patch"), tag, u as u64, c as u64]);
                let outcome = watermark::optimize_patch(&problem, &cfg.watermark, seed)?;
                let (played, clip_report) = watermark::apply_patch(clip, &outcome.patch, &cfg.watermark)?;
                let audit = watermark::audit_patch(&outcome.patch, &ceiling)?;

                let mut wearers = vec![u];
                wearers.extend(self.imposters(split, u, c));
                for (k, &v) in wearers.iter().enumerate() {
                    let seed = self.seed(&[label("probe-wm"), tag, u as u64, v as u64, c as u64]);
                    let response = simulate_in_ear(self.population.ear(split, v, c), &played, self.noise(), seed)?;
                    let s = matcher::score(&templates.watermarked[u], &self.embed(net, &played, &response)?)?;
                    if k == 0 {
                        marked.genuine.push(s);
                    } else {
                        marked.imposter.push(s);
                    }
                }
                patches.push(PatchRecord {
                    user: u,
                    clip: c,
                    active_cells: outcome.patch.active_cells().len(),
                    patch: outcome.patch,
                    initial_score: outcome.initial_score,
                    final_score: outcome.final_score,
                    nothing_to_watermark: outcome.nothing_to_watermark,
                    clipped_samples: clip_report.clipped,
                    audit,
                });
            }
        }
        Ok(Evaluation { chirp, raw, watermarked: marked, patches })
    }

    /// Foreign wearers scored against user `u` on clip `c` of the watermarked condition.
    pub fn imposters(&self, split: Split, u: usize, c: usize) -> Vec<usize> {
        let n = self.population.n_users();
        let others: Vec<usize> = (0..n).filter(|&v| v != u).collect();
        let k = self.cfg.eval.imposters_per_clip.min(others.len());
        let mut r = rng::seeded(self.seed(&[label("imposters"), split.tag(), u as u64, c as u64]));
        let mut picked: Vec<usize> = index::sample(&mut r, others.len(), k).into_iter().map(|i| others[i]).collect();
        picked.sort_unstable();
        picked
    }
}

#[derive(Debug, Clone)]
pub struct Templates {
    pub chirp: Vec<Template>,
    pub raw: Vec<Template>,
    pub watermarked: Vec<Template>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConditionScores {
    pub genuine: Vec<f64>,
    pub imposter: Vec<f64>,
}

impl ConditionScores {
    /// Score a probe worn by user `v` against every template.
    fn push_all(&mut self, templates: &[Template], v: usize, probe: &Embedding) -> StageResult<()> {
        for (u, t) in templates.iter().enumerate() {
            let s = matcher::score(t, probe)?;
            if u == v {
                self.genuine.push(s);
            } else {
                self.imposter.push(s);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PatchRecord {
    pub user: usize,
    pub clip: usize,
    pub patch: WatermarkPatch,
    pub active_cells: usize,
    pub initial_score: f64,
    pub final_score: f64,
    pub nothing_to_watermark: bool,
    pub clipped_samples: usize,
    pub audit: AuditReport,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub chirp: ConditionScores,
    pub raw: ConditionScores,
    pub watermarked: ConditionScores,
    pub patches: Vec<PatchRecord>,
}

impl Evaluation {
    pub fn patch(&self, u: usize, c: usize) -> Option<&PatchRecord> {
        self.patches.iter().find(|p| p.user == u && p.clip == c)
    }
}

/// Calibrated `(theta_accept, theta_update)`: the equal-error threshold and
/// the smallest threshold meeting the update false-accept target.
pub fn calibrate(scores: &ConditionScores, update_far: f64) -> StageResult<(f64, f64)> {
    let (_, accept) = matcher::eer(&scores.genuine, &scores.imposter)?;
    let update = matcher::threshold_at_far(&scores.genuine, &scores.imposter, update_far)?;
    Ok((accept, update.max(accept)))
}

