//! Continuous-authentication session state machine and the challenge-response
//! activeness check.
//!
//! Every operation takes the caller's clock (`now_ms`) so runs are replayable,
//! and appends exactly one entry to the audit log.

use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;
use crate::matcher::{Template, TemplateOrigin};
use crate::rng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SessionError {
    #[error("{op} is not allowed in phase {phase:?}")]
    Protocol { op: &'static str, phase: Phase },
    #[error("challenge {nonce:#x} was already verified")]
    AlreadyVerified { nonce: u64 },
    #[error("invalid session config: {0}")]
    Config(String),
    #[error("probe dimension {probe} does not match template dimension {template}")]
    DimMismatch { template: usize, probe: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SessionConfig {
    pub window_seconds: f64,
    pub theta_accept: f64,
    pub theta_update: f64,
    pub ema_lambda: f64,
    pub k_fail: u32,
    pub alpha_update: f64,
    pub latency_budget_ms: u64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            window_seconds: 3.0,
            theta_accept: 0.5,
            theta_update: 0.7,
            ema_lambda: 0.7,
            k_fail: 3,
            alpha_update: 0.05,
            latency_budget_ms: 200,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), SessionError> {
        let bad = |m: &str| Err(SessionError::Config(m.to_string()));
        if !(self.window_seconds > 0.0) {
            return bad("window_seconds must be positive");
        }
        if !(self.theta_update >= self.theta_accept) {
            return bad("theta_update must be >= theta_accept");
        }
        if self.k_fail < 1 {
            return bad("k_fail must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.ema_lambda) || !(0.0..=1.0).contains(&self.alpha_update) {
            return bad("ema_lambda and alpha_update must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    InitialLogin,
    Authenticated,
    Locked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    InitialLogin,
    Window,
    TemplateUpdate,
    Relogin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Late,
    NonceMismatch,
    LowScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
    Lock,
    Update,
    Skip,
    Challenge(RejectReason),
}

/// One audit-log entry. `phase` is the phase after the event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEvent {
    pub time_ms: u64,
    pub phase: Phase,
    pub event: EventKind,
    pub score: Option<f64>,
    pub decision: Decision,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Session {
    config: SessionConfig,
    phase: Phase,
    confidence: f64,
    consecutive_failures: u32,
    template: Template,
    event_log: Vec<SessionEvent>,
}

impl Session {
    pub fn new(config: SessionConfig, template: Template) -> Result<Self, SessionError> {
        config.validate()?;
        Ok(Self {
            config,
            phase: Phase::InitialLogin,
            confidence: 0.0,
            consecutive_failures: 0,
            template,
            event_log: Vec::new(),
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn confidence(&self) -> f64 {
        self.confidence
    }

    pub fn consecutive_failures(&self) -> u32 {
        self.consecutive_failures
    }

    pub fn template(&self) -> &Template {
        &self.template
    }

    pub fn event_log(&self) -> &[SessionEvent] {
        &self.event_log
    }

    fn log(&mut self, time_ms: u64, event: EventKind, score: Option<f64>, decision: Decision) {
        self.event_log.push(SessionEvent { time_ms, phase: self.phase, event, score, decision });
    }

    fn expect(&self, phase: Phase, op: &'static str) -> Result<(), SessionError> {
        if self.phase != phase {
            return Err(SessionError::Protocol { op, phase: self.phase });
        }
        Ok(())
    }

    fn strict_login(&mut self, now_ms: u64, score: f64, kind: EventKind) -> Phase {
        if score >= self.config.theta_update {
            self.phase = Phase::Authenticated;
            self.confidence = score;
            self.consecutive_failures = 0;
            self.log(now_ms, kind, Some(score), Decision::Accept);
        } else {
            self.log(now_ms, kind, Some(score), Decision::Reject);
        }
        self.phase
    }

    /// Strict one-time login: requires `score >= theta_update`.
    pub fn initial_login(&mut self, now_ms: u64, score: f64) -> Result<Phase, SessionError> {
        self.expect(Phase::InitialLogin, "initial_login")?;
        Ok(self.strict_login(now_ms, score, EventKind::InitialLogin))
    }

    pub fn relogin(&mut self, now_ms: u64, score: f64) -> Result<Phase, SessionError> {
        self.expect(Phase::Locked, "relogin")?;
        Ok(self.strict_login(now_ms, score, EventKind::Relogin))
    }

    fn record_window(&mut self, now_ms: u64, score: f64, pass: bool, reason: Option<RejectReason>) -> Phase {
        let l = self.config.ema_lambda;
        self.confidence = l * self.confidence + (1.0 - l) * score;
        if pass {
            self.consecutive_failures = 0;
        } else {
            self.consecutive_failures += 1;
        }
        let decision = if self.consecutive_failures >= self.config.k_fail {
            self.phase = Phase::Locked;
            Decision::Lock
        } else if let Some(r) = reason {
            Decision::Challenge(r)
        } else if pass {
            Decision::Accept
        } else {
            Decision::Reject
        };
        self.log(now_ms, EventKind::Window, Some(score), decision);
        self.phase
    }

    /// One continuous-authentication window scored against the template.
    pub fn window_step(&mut self, now_ms: u64, score: f64) -> Result<Phase, SessionError> {
        self.expect(Phase::Authenticated, "window_step")?;
        let pass = score >= self.config.theta_accept;
        Ok(self.record_window(now_ms, score, pass, None))
    }

    /// A window whose acquisition answered a challenge: any rejection of the
    /// challenge counts as a failed window.
    pub fn challenged_window(
        &mut self,
        now_ms: u64,
        challenge: &mut Challenge,
        response: &ResponseMeta,
    ) -> Result<(Phase, Verdict), SessionError> {
        self.expect(Phase::Authenticated, "challenged_window")?;
        let verdict = verify_response(challenge, response, &self.config)?;
        let reason = match verdict {
            Verdict::Accept => None,
            Verdict::Reject(r) => Some(r),
        };
        let phase = self.record_window(now_ms, response.score, reason.is_none(), reason);
        Ok((phase, verdict))
    }

    /// Gated template update: blends the probe in only when
    /// `score >= theta_update`. Returns whether the template changed.
    pub fn maybe_update_template(&mut self, now_ms: u64, probe: &Embedding, score: f64) -> Result<bool, SessionError> {
        self.expect(Phase::Authenticated, "maybe_update_template")?;
        if probe.dim() != self.template.dim() {
            return Err(SessionError::DimMismatch { template: self.template.dim(), probe: probe.dim() });
        }
        let a = self.config.alpha_update;
        if score < self.config.theta_update || a == 0.0 {
            self.log(now_ms, EventKind::TemplateUpdate, Some(score), Decision::Skip);
            return Ok(false);
        }
        let blended = if a == 1.0 {
            Some(probe.clone())
        } else {
            let v: Vec<f64> = self
                .template
                .vector
                .as_slice()
                .iter()
                .zip(probe.as_slice())
                .map(|(t, p)| (1.0 - a) * t + a * p)
                .collect();
            Embedding::normalized(v).ok()
        };
        match blended {
            Some(v) => {
                self.template.vector = v;
                self.template.n_enrolled += 1;
                self.template.created_from = TemplateOrigin::PlaybackUpdate;
                self.log(now_ms, EventKind::TemplateUpdate, Some(score), Decision::Update);
                Ok(true)
            }
            None => {
                self.log(now_ms, EventKind::TemplateUpdate, Some(score), Decision::Skip);
                Ok(false)
            }
        }
    }

    /// Audit trail as JSON lines.
    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.event_log {
            out.push_str(&serde_json::to_string(e).expect("event serialises"));
            out.push('\n');
        }
        out
    }
}

/// A probe the device must answer within the latency budget. The nonce seeds
/// the watermark carrier that the response has to contain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Challenge {
    pub nonce: u64,
    pub issued_at_ms: u64,
    pub expires_at_ms: u64,
    verified: bool,
}

impl Challenge {
    pub fn is_verified(&self) -> bool {
        self.verified
    }
}

pub fn issue_challenge(seed: u64, now_ms: u64, config: &SessionConfig) -> Challenge {
    Challenge {
        nonce: rng::derive(seed, &[rng::label("nonce"), now_ms]),
        issued_at_ms: now_ms,
        expires_at_ms: now_ms + config.latency_budget_ms,
        verified: false,
    }
}

/// What the verifier knows about a response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseMeta {
    /// Nonce the response was demonstrably produced for, if any.
    pub bound_nonce: Option<u64>,
    pub received_at_ms: u64,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject(RejectReason),
}

/// Checks nonce binding, then latency, then score. A challenge can be
/// verified once.
pub fn verify_response(
    challenge: &mut Challenge,
    response: &ResponseMeta,
    config: &SessionConfig,
) -> Result<Verdict, SessionError> {
    if challenge.verified {
        return Err(SessionError::AlreadyVerified { nonce: challenge.nonce });
    }
    challenge.verified = true;
    Ok(if response.bound_nonce != Some(challenge.nonce) {
        Verdict::Reject(RejectReason::NonceMismatch)
    } else if response.received_at_ms > challenge.expires_at_ms {
        Verdict::Reject(RejectReason::Late)
    } else if response.score < config.theta_accept {
        Verdict::Reject(RejectReason::LowScore)
    } else {
        Verdict::Accept
    })
}
