//! Seeded continuous-session simulations: a genuine wearer logs in, then the
//! stream is handed to an adversary (or kept genuine as a control).

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ConfigError;
use super::pipeline::{Evaluation, Prepared, Templates};
use super::StageResult;
use crate::ear::{adversary_response, simulate_in_ear, Acquisition, AdversaryContext, AdversaryMode, EarProfile};
use crate::embedding::{self, NetParams};
use crate::features::{self, DeficiencyMask};
use crate::matcher;
use crate::rng::{self, label};
use crate::session::{issue_challenge, verify_response, Phase, RejectReason, ResponseMeta, Session, SessionConfig, SessionEvent, Verdict};
use crate::signal::Signal;
use crate::watermark::{self, AudibilityCeiling};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    InsiderTakeoverMidSession,
    ReplayLogin,
    DelayedResponse,
    GenuineControl,
}

impl Scenario {
    pub const ALL: [Scenario; 4] =
        [Scenario::InsiderTakeoverMidSession, Scenario::ReplayLogin, Scenario::DelayedResponse, Scenario::GenuineControl];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::InsiderTakeoverMidSession => "insider_takeover_mid_session",
            Scenario::ReplayLogin => "replay_login",
            Scenario::DelayedResponse => "delayed_response",
            Scenario::GenuineControl => "genuine_control",
        }
    }
}

impl FromStr for Scenario {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| ConfigError::Invalid { field: "scenario", reason: format!("unknown scenario {s:?}") })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RejectCounts {
    pub nonce_mismatch: usize,
    pub late: usize,
    pub low_score: usize,
}

impl RejectCounts {
    fn add(&mut self, r: RejectReason) {
        match r {
            RejectReason::NonceMismatch => self.nonce_mismatch += 1,
            RejectReason::Late => self.late += 1,
            RejectReason::LowScore => self.low_score += 1,
        }
    }

    fn merge(&mut self, o: &RejectCounts) {
        self.nonce_mismatch += o.nonce_mismatch;
        self.late += o.late;
        self.low_score += o.low_score;
    }

    pub fn total(&self) -> usize {
        self.nonce_mismatch + self.late + self.low_score
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStats {
    pub scenario: Scenario,
    pub trials: usize,
    /// Trials in which the strict login succeeded.
    pub authenticated: usize,
    pub locked: usize,
    /// Locked no later than `k_fail` windows after the takeover.
    pub locked_within_k: usize,
    /// Intruder scenarios: locked_within_k / authenticated. Replay: logins
    /// refused / trials. Control: false locks / authenticated.
    pub detection_rate: f64,
    /// Windows from takeover (inclusive) to lock, per locked trial.
    pub windows_to_lock: Vec<usize>,
    pub median_windows_to_lock: Option<f64>,
    pub mean_windows_to_lock: Option<f64>,
    pub login_attempts: usize,
    pub login_rejects: RejectCounts,
    pub windows: usize,
    pub window_accepts: usize,
    pub window_rejects: RejectCounts,
    /// Windows answered by the adversary, and how many of them were rejected.
    pub adversary_windows: usize,
    pub adversary_rejects: RejectCounts,
    pub template_updates: usize,
    pub patch_cells: usize,
    pub patch_violations: usize,
}

pub struct SessionTrace {
    pub trial: usize,
    pub events: Vec<SessionEvent>,
}

/// Shared inputs of every simulated session.
pub struct SessionRig<'a> {
    pub prepared: &'a Prepared<'a>,
    pub net: &'a NetParams,
    pub templates: &'a Templates,
    /// Test-split evaluation; supplies the optimised patch of every (user, clip).
    pub test: &'a Evaluation,
    pub config: SessionConfig,
    masks: Vec<(DeficiencyMask, AudibilityCeiling)>,
}

struct Trial {
    authenticated: bool,
    lock_window: Option<usize>,
    login_attempts: usize,
    login_rejects: RejectCounts,
    windows: usize,
    accepts: usize,
    rejects: RejectCounts,
    adversary_windows: usize,
    adversary_rejects: RejectCounts,
    updates: usize,
    cells: usize,
    violations: usize,
    events: Vec<SessionEvent>,
}

struct Window {
    played: Signal,
    rendered: Vec<f64>,
    nonce: u64,
}

impl<'a> SessionRig<'a> {
    pub fn new(
        prepared: &'a Prepared<'a>,
        net: &'a NetParams,
        templates: &'a Templates,
        test: &'a Evaluation,
        config: SessionConfig,
    ) -> StageResult<Self> {
        config.validate()?;
        let an = &prepared.analyzer;
        let masks = prepared
            .corpora
            .eval
            .clips
            .iter()
            .map(|clip| {
                let mask = features::deficiency_mask_with(an, clip.samples());
                let ceiling = watermark::compute_ceiling(an, clip, &mask, prepared.cfg.watermark.masking_offset_db)?;
                Ok((mask, ceiling))
            })
            .collect::<StageResult<Vec<_>>>()?;
        Ok(Self { prepared, net, templates, test, config, masks })
    }

    fn window_ms(&self) -> u64 {
        (self.config.window_seconds * 1000.0).round() as u64
    }

    /// Play clip `c` with user `u`'s patch bound to a fresh challenge at `now`.
    fn window(&self, u: usize, c: usize, nonce: u64) -> StageResult<(Window, usize, usize)> {
        let cfg = self.prepared.cfg;
        let clip = &self.prepared.corpora.eval.clips[c];
        let record = self.test.patch(u, c).ok_or("missing test patch")?;
        let (mask, ceiling) = &self.masks[c];
        let patch = if cfg.session.cri {
            watermark::reproject(&record.patch.reseeded(nonce), clip, ceiling, mask, &cfg.watermark)?
        } else {
            record.patch.clone()
        };
        let audit = watermark::audit_patch(&patch, ceiling)?;
        let (played, _) = watermark::apply_patch(clip, &patch, &cfg.watermark)?;
        let rendered = patch.render()?;
        Ok((Window { played, rendered, nonce }, patch.active_cells().len(), audit.violations))
    }

    fn bound_nonce(&self, u: usize, c: usize, w: &Window, response: &Signal) -> Option<u64> {
        let cfg = self.prepared.cfg;
        if !cfg.session.cri {
            return Some(w.nonce);
        }
        let clip = &self.prepared.corpora.eval.clips[c];
        let ir = self.prepared.enrollment.primary_ir(u);
        let b = watermark::binding_score(response, clip, &w.rendered, ir, cfg.features.max_lag)?;
        (b >= cfg.watermark.binding_threshold).then_some(w.nonce)
    }

    fn score(&self, session_template: &matcher::Template, w: &Window, response: &Signal) -> StageResult<(f64, embedding::Embedding)> {
        let f = features::rtf_features_with(&self.prepared.analyzer, &w.played, response)?;
        let e = embedding::forward(self.net, &f)?;
        Ok((matcher::score(session_template, &e)?, e))
    }

    fn trial_ears(&self, t: usize) -> (usize, EarProfile, EarProfile) {
        let p = self.prepared;
        let n = p.population.n_users();
        let seed = rng::derive(p.cfg.seed, &[label("trial"), t as u64]);
        let u = t % n;
        let mut r = rng::seeded(rng::derive(seed, &[label("attacker")]));
        let v = (u + 1 + rand::Rng::random_range(&mut r, 0..n - 1)) % n;
        let jitter = &p.cfg.population.jitter;
        let victim = p.population.base[u].session_variant(jitter, rng::derive(seed, &[label("victim-ear")]));
        let attacker = p.population.base[v].session_variant(jitter, rng::derive(seed, &[label("attacker-ear")]));
        (u, victim, attacker)
    }

    fn run_trial(&self, scenario: Scenario, t: usize) -> StageResult<Trial> {
        let p = self.prepared;
        let cfg = p.cfg;
        let s = &cfg.session;
        let n_clips = p.corpora.eval.clips.len();
        let noise = cfg.population.noise_amplitude;
        let nominal = s.nominal_latency_ms;
        let trial_seed = rng::derive(cfg.seed, &[label("trial"), t as u64]);
        let (u, victim, attacker) = self.trial_ears(t);
        let mut session = Session::new(self.config, self.templates.watermarked[u].clone())?;
        let mut out = Trial {
            authenticated: false,
            lock_window: None,
            login_attempts: 0,
            login_rejects: RejectCounts::default(),
            windows: 0,
            accepts: 0,
            rejects: RejectCounts::default(),
            adversary_windows: 0,
            adversary_rejects: RejectCounts::default(),
            updates: 0,
            cells: 0,
            violations: 0,
            events: Vec::new(),
        };
        let mut now = 0u64;
        let mut slot = 0usize;

        for attempt in 0..s.login_attempts {
            let c = (t + slot) % n_clips;
            slot += 1;
            let mut challenge = issue_challenge(trial_seed, now, &self.config);
            let (w, cells, viol) = self.window(u, c, challenge.nonce)?;
            out.cells += cells;
            out.violations += viol;
            let noise_seed = rng::derive(trial_seed, &[label("login"), attempt as u64]);
            let acq = if scenario == Scenario::ReplayLogin {
                // the attacker holds the victim's response to this clip from an earlier session
                let old = issue_challenge(rng::derive(trial_seed, &[label("recorded")]), now, &self.config);
                let (old_w, _, _) = self.window(u, c, old.nonce)?;
                let history = [Acquisition {
                    response: simulate_in_ear(&victim, &old_w.played, noise, rng::derive(noise_seed, &[label("recorded")]))?,
                    latency_ms: nominal,
                    produced_for: Some(old.nonce),
                }];
                let ctx = AdversaryContext {
                    victim: &victim,
                    attacker: None,
                    playback: &w.played,
                    current_nonce: Some(challenge.nonce),
                    noise_amplitude: noise,
                    seed: noise_seed,
                    history: &history,
                    nominal_latency_ms: nominal,
                    extra_latency_ms: 0.0,
                };
                adversary_response(AdversaryMode::Replay, &ctx)?.acquisition
            } else {
                Acquisition {
                    response: simulate_in_ear(&victim, &w.played, noise, noise_seed)?,
                    latency_ms: nominal,
                    produced_for: Some(challenge.nonce),
                }
            };
            let (score, _) = self.score(session.template(), &w, &acq.response)?;
            let meta = ResponseMeta {
                bound_nonce: self.bound_nonce(u, c, &w, &acq.response),
                received_at_ms: now + acq.latency_ms.round() as u64,
                score,
            };
            out.login_attempts += 1;
            match verify_response(&mut challenge, &meta, &self.config)? {
                Verdict::Reject(r @ (RejectReason::NonceMismatch | RejectReason::Late)) => out.login_rejects.add(r),
                _ => {
                    if session.initial_login(now, score)? == Phase::Authenticated {
                        out.authenticated = true;
                    } else {
                        out.login_rejects.add(RejectReason::LowScore);
                    }
                }
            }
            now += self.window_ms();
            if out.authenticated {
                break;
            }
        }
        if !out.authenticated || scenario == Scenario::ReplayLogin {
            out.events = session.event_log().to_vec();
            return Ok(out);
        }

        let takeover = s.takeover_window;
        for i in 0..takeover + s.windows_after_takeover {
            let c = (t + slot) % n_clips;
            slot += 1;
            let mut challenge = issue_challenge(trial_seed, now, &self.config);
            let (w, cells, viol) = self.window(u, c, challenge.nonce)?;
            out.cells += cells;
            out.violations += viol;
            let noise_seed = rng::derive(trial_seed, &[label("window"), i as u64]);
            let mode = match scenario {
                _ if i < takeover => None,
                Scenario::InsiderTakeoverMidSession => Some(AdversaryMode::Imposter),
                Scenario::DelayedResponse => Some(AdversaryMode::Delayed),
                _ => None,
            };
            let acq = match mode {
                None => Acquisition {
                    response: simulate_in_ear(&victim, &w.played, noise, noise_seed)?,
                    latency_ms: nominal,
                    produced_for: Some(challenge.nonce),
                },
                Some(mode) => {
                    let ctx = AdversaryContext {
                        victim: &victim,
                        attacker: Some(&attacker),
                        playback: &w.played,
                        current_nonce: Some(challenge.nonce),
                        noise_amplitude: noise,
                        seed: noise_seed,
                        history: &[],
                        nominal_latency_ms: nominal,
                        extra_latency_ms: s.delay_extra_ms,
                    };
                    adversary_response(mode, &ctx)?.acquisition
                }
            };
            let (score, probe) = self.score(session.template(), &w, &acq.response)?;
            let meta = ResponseMeta {
                bound_nonce: self.bound_nonce(u, c, &w, &acq.response),
                received_at_ms: now + acq.latency_ms.round() as u64,
                score,
            };
            let (phase, verdict) = session.challenged_window(now, &mut challenge, &meta)?;
            out.windows += 1;
            if mode.is_some() {
                out.adversary_windows += 1;
                if let Verdict::Reject(r) = verdict {
                    out.adversary_rejects.add(r);
                }
            }
            match verdict {
                Verdict::Accept => {
                    out.accepts += 1;
                    if session.maybe_update_template(now, &probe, score)? {
                        out.updates += 1;
                    }
                }
                Verdict::Reject(r) => out.rejects.add(r),
            }
            now += self.window_ms();
            if phase == Phase::Locked {
                out.lock_window = Some(i);
                break;
            }
        }
        out.events = session.event_log().to_vec();
        Ok(out)
    }

    pub fn simulate(&self, scenario: Scenario) -> StageResult<(ScenarioStats, Vec<SessionTrace>)> {
        let s = &self.prepared.cfg.session;
        let k = self.config.k_fail as usize;
        let mut stats = ScenarioStats {
            scenario,
            trials: s.trials,
            authenticated: 0,
            locked: 0,
            locked_within_k: 0,
            detection_rate: 0.0,
            windows_to_lock: Vec::new(),
            median_windows_to_lock: None,
            mean_windows_to_lock: None,
            login_attempts: 0,
            login_rejects: RejectCounts::default(),
            windows: 0,
            window_accepts: 0,
            window_rejects: RejectCounts::default(),
            adversary_windows: 0,
            adversary_rejects: RejectCounts::default(),
            template_updates: 0,
            patch_cells: 0,
            patch_violations: 0,
        };
        let mut traces = Vec::with_capacity(s.trials);
        for t in 0..s.trials {
            let tr = self.run_trial(scenario, t)?;
            stats.authenticated += usize::from(tr.authenticated);
            stats.login_attempts += tr.login_attempts;
            stats.login_rejects.merge(&tr.login_rejects);
            stats.windows += tr.windows;
            stats.window_accepts += tr.accepts;
            stats.window_rejects.merge(&tr.rejects);
            stats.adversary_windows += tr.adversary_windows;
            stats.adversary_rejects.merge(&tr.adversary_rejects);
            stats.template_updates += tr.updates;
            stats.patch_cells += tr.cells;
            stats.patch_violations += tr.violations;
            if let Some(lw) = tr.lock_window {
                stats.locked += 1;
                if lw >= s.takeover_window {
                    let after = lw - s.takeover_window + 1;
                    stats.windows_to_lock.push(after);
                    if after <= k {
                        stats.locked_within_k += 1;
                    }
                }
            }
            traces.push(SessionTrace { trial: t, events: tr.events });
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        stats.detection_rate = match scenario {
            Scenario::ReplayLogin => ratio(stats.trials - stats.authenticated, stats.trials),
            Scenario::GenuineControl => ratio(stats.locked, stats.authenticated),
            _ => ratio(stats.locked_within_k, stats.authenticated),
        };
        if !stats.windows_to_lock.is_empty() {
            let mut v = stats.windows_to_lock.clone();
            v.sort_unstable();
            let m = v.len();
            stats.median_windows_to_lock =
                Some(if m % 2 == 1 { v[m / 2] as f64 } else { (v[m / 2 - 1] + v[m / 2]) as f64 / 2.0 });
            stats.mean_windows_to_lock = Some(v.iter().sum::<usize>() as f64 / m as f64);
        }
        Ok((stats, traces))
    }
}
