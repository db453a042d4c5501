//! Helpers shared by the integration tests.

#![allow(dead_code)]

use earcan::embedding::Embedding;
use earcan::matcher::make_template;
use earcan::session::{
    issue_challenge, Decision, EventKind, Phase, RejectReason, ResponseMeta, Session, SessionConfig, SessionError, Verdict,
};
use proptest::prelude::*;

#[derive(Debug, Clone, Copy)]
pub enum Binding {
    Current,
    Stale,
    Unbound,
}

#[derive(Debug, Clone)]
pub enum Op {
    Login(f64),
    Relogin(f64),
    Window(f64),
    Challenged { score: f64, binding: Binding, delay_ms: u64, verify_twice: bool },
    Update { score: f64, probe: Vec<f64> },
}

pub fn config_strategy() -> impl Strategy<Value = SessionConfig> {
    (-0.5f64..0.9, 0.0f64..0.5, 1u32..6, 0.0f64..=1.0, 0.0f64..=1.0, 20u64..500).prop_map(|(a, gap, k, l, alpha, budget)| {
        SessionConfig {
            window_seconds: 3.0,
            theta_accept: a,
            theta_update: (a + gap).min(1.0),
            ema_lambda: l,
            k_fail: k,
            alpha_update: alpha,
            latency_budget_ms: budget,
        }
    })
}

fn score() -> impl Strategy<Value = f64> {
    prop_oneof![-1.0f64..=1.0, Just(0.0), Just(1.0), Just(-1.0)]
}

pub fn op_strategy() -> impl Strategy<Value = Op> {
    let binding = prop_oneof![Just(Binding::Current), Just(Binding::Stale), Just(Binding::Unbound)];
    prop_oneof![
        1 => score().prop_map(Op::Login),
        1 => score().prop_map(Op::Relogin),
        3 => score().prop_map(Op::Window),
        3 => (score(), binding, 0u64..800, any::<bool>())
            .prop_map(|(score, binding, delay_ms, verify_twice)| Op::Challenged { score, binding, delay_ms, verify_twice }),
        2 => (score(), prop::collection::vec(-1.0f64..1.0, 4)).prop_map(|(score, probe)| Op::Update { score, probe }),
    ]
}

pub fn case_strategy() -> impl Strategy<Value = (SessionConfig, Vec<f64>, Vec<Op>)> {
    (
        config_strategy(),
        prop::collection::vec(-1.0f64..1.0, 4).prop_filter("non-zero template", |v| v.iter().any(|x| x.abs() > 1e-3)),
        prop::collection::vec(op_strategy(), 1..60),
    )
}

/// Which invariant a sequence broke.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    Safety(String),
    Liveness(String),
    TemplateNorm(String),
    Replay(String),
}

/// Replays `ops` against a fresh session and a minimal reference model of
/// phase and failure count, checking the invariants after every step.
pub fn check_sequence(config: SessionConfig, template: &[f64], ops: &[Op]) -> Result<(), Violation> {
    let t = make_template(&[Embedding::normalized(template.to_vec()).unwrap()]).unwrap();
    let mut s = Session::new(config, t).unwrap();
    let mut phase = Phase::InitialLogin;
    let mut fails = 0u32;
    let mut now = 0u64;

    for (i, op) in ops.iter().enumerate() {
        now += 3000;
        let before_len = s.event_log().len();
        let before_template = s.template().clone();
        let result: Result<Phase, SessionError> = match op {
            Op::Login(sc) => {
                let r = s.initial_login(now, *sc);
                if phase == Phase::InitialLogin && *sc >= config.theta_update {
                    phase = Phase::Authenticated;
                    fails = 0;
                }
                r
            }
            Op::Relogin(sc) => {
                let r = s.relogin(now, *sc);
                if phase == Phase::Locked && *sc >= config.theta_update {
                    phase = Phase::Authenticated;
                    fails = 0;
                }
                r
            }
            Op::Window(sc) => {
                let r = s.window_step(now, *sc);
                if phase == Phase::Authenticated {
                    fails = if *sc >= config.theta_accept { 0 } else { fails + 1 };
                    if fails >= config.k_fail {
                        phase = Phase::Locked;
                    }
                }
                r
            }
            Op::Challenged { score, binding, delay_ms, verify_twice } => {
                let mut ch = issue_challenge(i as u64, now, &config);
                let bound = match binding {
                    Binding::Current => Some(ch.nonce),
                    Binding::Stale => Some(ch.nonce ^ 0x9e37_79b9_7f4a_7c15),
                    Binding::Unbound => None,
                };
                let meta = ResponseMeta { bound_nonce: bound, received_at_ms: now + delay_ms, score: *score };
                let r = s.challenged_window(now, &mut ch, &meta);
                if phase == Phase::Authenticated {
                    let (_, verdict) = r.as_ref().map_err(|e| Violation::Safety(format!("step {i}: {e}")))?;
                    let expected = match binding {
                        Binding::Stale | Binding::Unbound => Verdict::Reject(RejectReason::NonceMismatch),
                        Binding::Current if *delay_ms > config.latency_budget_ms => Verdict::Reject(RejectReason::Late),
                        Binding::Current if *score < config.theta_accept => Verdict::Reject(RejectReason::LowScore),
                        Binding::Current => Verdict::Accept,
                    };
                    if *verdict != expected {
                        return Err(Violation::Replay(format!("step {i}: verdict {verdict:?}, expected {expected:?}")));
                    }
                    fails = if expected == Verdict::Accept { 0 } else { fails + 1 };
                    if fails >= config.k_fail {
                        phase = Phase::Locked;
                    }
                    if *verify_twice {
                        let len = s.event_log().len();
                        let p = s.phase();
                        match s.challenged_window(now, &mut ch, &meta) {
                            Err(SessionError::AlreadyVerified { .. }) | Err(SessionError::Protocol { .. }) => {}
                            other => return Err(Violation::Replay(format!("step {i}: second verification gave {other:?}"))),
                        }
                        if s.event_log().len() != len || s.phase() != p {
                            return Err(Violation::Replay(format!("step {i}: rejected re-verification changed the session")));
                        }
                    }
                }
                r.map(|(p, _)| p)
            }
            Op::Update { score, probe } => {
                let Ok(e) = Embedding::normalized(probe.clone()) else { continue };
                let r = s.maybe_update_template(now, &e, *score).map(|_| s.phase());
                if phase == Phase::Authenticated && *score < config.theta_update && s.template() != &before_template {
                    return Err(Violation::Safety(format!("step {i}: template changed below theta_update")));
                }
                r
            }
        };

        let grew = s.event_log().len() - before_len;
        match &result {
            Ok(_) => {
                if grew != 1 {
                    return Err(Violation::Safety(format!("step {i}: {grew} log entries for one operation")));
                }
            }
            Err(SessionError::Protocol { .. }) => {
                if grew != 0 || s.template() != &before_template {
                    return Err(Violation::Safety(format!("step {i}: refused operation changed the session")));
                }
            }
            Err(e) => return Err(Violation::Safety(format!("step {i}: unexpected error {e}"))),
        }
        if let Some(last) = s.event_log().last().filter(|_| grew == 1) {
            let sc = last.score.unwrap_or(f64::NAN);
            let bad = match (last.event, last.decision) {
                (EventKind::Window, Decision::Accept) => !(sc >= config.theta_accept),
                (EventKind::InitialLogin | EventKind::Relogin, Decision::Accept) => !(sc >= config.theta_update),
                (EventKind::TemplateUpdate, Decision::Update) => !(sc >= config.theta_update),
                _ => false,
            };
            if bad {
                return Err(Violation::Safety(format!("step {i}: {:?} accepted score {sc}", last.event)));
            }
            if last.phase != s.phase() {
                return Err(Violation::Safety(format!("step {i}: logged phase {:?} but session is {:?}", last.phase, s.phase())));
            }
        }
        if s.phase() != phase {
            return Err(Violation::Safety(format!("step {i}: phase {:?}, model says {phase:?}", s.phase())));
        }
        if s.consecutive_failures() != fails {
            return Err(Violation::Liveness(format!("step {i}: {} consecutive failures, model says {fails}", s.consecutive_failures())));
        }
        if (fails >= config.k_fail) != (s.phase() == Phase::Locked) && phase != Phase::InitialLogin {
            return Err(Violation::Liveness(format!("step {i}: {fails} failures with k_fail {} in phase {:?}", config.k_fail, s.phase())));
        }
        let n = s.template().vector.norm();
        if (n - 1.0).abs() > 1e-9 {
            return Err(Violation::TemplateNorm(format!("step {i}: template norm {n}")));
        }
    }
    Ok(())
}

/// Pass count over `n` sequences drawn from a fixed proptest stream.
pub fn run_session_suite(n: usize) -> (usize, Vec<Violation>) {
    use proptest::strategy::ValueTree;
    use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
    let mut runner = TestRunner::new_with_rng(Config::default(), TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    let strat = case_strategy();
    let mut passed = 0;
    let mut failures = Vec::new();
    for _ in 0..n {
        let (cfg, t, ops) = strat.new_tree(&mut runner).expect("strategy").current();
        match check_sequence(cfg, &t, &ops) {
            Ok(()) => passed += 1,
            Err(v) => failures.push(v),
        }
    }
    (passed, failures)
}
