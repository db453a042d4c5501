//! Synthetic ear-canal acoustics.
//!
//! An [`EarProfile`] is a bank of damped resonators plus a direct path. Its
//! realized impulse response is the biometric ground truth the rest of the
//! pipeline tries to recognise.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::signal::{self, Signal, SignalError};

pub const DEFAULT_IR_LENGTH: usize = 512;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EarError {
    #[error("invalid population parameters: {0}")]
    Config(String),
    #[error("replay requested but no recorded response is available")]
    NoHistory,
    #[error("imposter mode requires an attacker profile")]
    MissingAttacker,
    #[error(transparent)]
    Signal(#[from] SignalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Span {
    pub min: f64,
    pub max: f64,
}

impl Span {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn check(&self, name: &str) -> Result<(), EarError> {
        if !(self.min.is_finite() && self.max.is_finite()) || self.min > self.max {
            return Err(EarError::Config(format!(
                "{name}: degenerate range [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..self.max)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resonator {
    pub center_hz: f64,
    pub q_factor: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarProfile {
    pub user_id: String,
    pub resonators: Vec<Resonator>,
    pub direct_gain: f64,
    pub direct_delay: usize,
}

/// Ranges the synthetic population is drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationParams {
    pub min_resonators: usize,
    pub max_resonators: usize,
    pub center_hz: Span,
    pub q_factor: Span,
    pub gain: Span,
    pub direct_gain: Span,
    pub min_delay: usize,
    pub max_delay: usize,
}

impl Default for PopulationParams {
    fn default() -> Self {
        Self {
            min_resonators: 2,
            max_resonators: 4,
            center_hz: Span::new(500.0, 7000.0),
            q_factor: Span::new(2.0, 30.0),
            gain: Span::new(0.03, 0.2),
            direct_gain: Span::new(0.5, 1.0),
            min_delay: 2,
            max_delay: 8,
        }
    }
}

impl PopulationParams {
    pub fn validate(&self) -> Result<(), EarError> {
        if self.min_resonators > self.max_resonators {
            return Err(EarError::Config(format!(
                "resonator count: min {} > max {}",
                self.min_resonators, self.max_resonators
            )));
        }
        if self.min_resonators < 2 || self.max_resonators > 4 {
            return Err(EarError::Config("resonator count must lie in [2, 4]".into()));
        }
        self.center_hz.check("center_hz")?;
        self.q_factor.check("q_factor")?;
        self.gain.check("gain")?;
        self.direct_gain.check("direct_gain")?;
        if self.center_hz.min < 500.0 || self.center_hz.max > 7000.0 {
            return Err(EarError::Config("center_hz must lie within [500, 7000] Hz".into()));
        }
        if self.q_factor.min < 2.0 || self.q_factor.max > 30.0 {
            return Err(EarError::Config("q_factor must lie within [2, 30]".into()));
        }
        if self.gain.min <= 0.0 || self.direct_gain.min <= 0.0 {
            return Err(EarError::Config("gains must be positive".into()));
        }
        if self.min_delay > self.max_delay {
            return Err(EarError::Config(format!(
                "direct delay: min {} > max {}",
                self.min_delay, self.max_delay
            )));
        }
        Ok(())
    }
}

/// Session-to-session variability of one ear: relative jitter on resonance
/// frequencies and on all gains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Jitter {
    pub freq: f64,
    pub gain: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            freq: 0.03,
            gain: 0.10,
        }
    }
}

pub fn sample_profile(
    seed: u64,
    params: &PopulationParams,
    user_id: impl Into<String>,
) -> Result<EarProfile, EarError> {
    params.validate()?;
    let mut rng = rng::seeded(seed);
    let count = rng.random_range(params.min_resonators..=params.max_resonators);
    let resonators = (0..count)
        .map(|_| Resonator {
            center_hz: params.center_hz.draw(&mut rng),
            q_factor: params.q_factor.draw(&mut rng),
            gain: params.gain.draw(&mut rng),
        })
        .collect();
    Ok(EarProfile {
        user_id: user_id.into(),
        resonators,
        direct_gain: params.direct_gain.draw(&mut rng),
        direct_delay: rng.random_range(params.min_delay..=params.max_delay),
    })
}

impl EarProfile {
    /// The same ear as measured in another acquisition session.
    pub fn session_variant(&self, jitter: &Jitter, seed: u64) -> EarProfile {
        let mut rng = rng::seeded(seed);
        let mut rel = |amount: f64| {
            if amount == 0.0 {
                1.0
            } else {
                1.0 + rng.random_range(-amount..amount)
            }
        };
        let resonators = self
            .resonators
            .iter()
            .map(|r| Resonator {
                center_hz: r.center_hz * rel(jitter.freq),
                q_factor: r.q_factor,
                gain: r.gain * rel(jitter.gain),
            })
            .collect();
        EarProfile {
            user_id: self.user_id.clone(),
            resonators,
            direct_gain: self.direct_gain * rel(jitter.gain),
            direct_delay: self.direct_delay,
        }
    }

    pub fn scaled_gains(&self, factor: f64) -> EarProfile {
        let mut p = self.clone();
        p.direct_gain *= factor;
        for r in &mut p.resonators {
            r.gain *= factor;
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IrOrigin {
    GroundTruth,
    Estimated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImpulseResponse {
    pub taps: Signal,
    pub origin: IrOrigin,
}

impl ImpulseResponse {
    /// Copy scaled to unit energy (a zero response is returned unchanged).
    pub fn energy_normalized(&self) -> ImpulseResponse {
        let e = self.taps.energy();
        let taps = if e > 0.0 {
            self.taps.scaled(1.0 / e.sqrt())
        } else {
            self.taps.clone()
        };
        ImpulseResponse {
            taps,
            origin: self.origin,
        }
    }
}

pub fn realize_ir(profile: &EarProfile, fs: u32, length: usize) -> Result<ImpulseResponse, EarError> {
    if length < 64 {
        return Err(EarError::Config(format!("impulse response length {length} < 64")));
    }
    if profile.direct_delay >= length {
        return Err(EarError::Config(format!(
            "direct delay {} does not fit in {length} taps",
            profile.direct_delay
        )));
    }
    let fs_f = f64::from(fs);
    let mut taps = vec![0.0; length];
    taps[profile.direct_delay] += profile.direct_gain;
    for r in &profile.resonators {
        let decay = PI * r.center_hz / r.q_factor;
        let w = 2.0 * PI * r.center_hz;
        for (n, tap) in taps.iter_mut().enumerate() {
            let t = n as f64 / fs_f;
            *tap += r.gain * (-decay * t).exp() * (w * t).sin();
        }
    }
    Ok(ImpulseResponse {
        taps: Signal::new(taps, fs)?,
        origin: IrOrigin::GroundTruth,
    })
}

/// Pass `playback` through `ir` and add seeded uniform noise.
pub fn acquire_through(
    ir: &ImpulseResponse,
    playback: &Signal,
    noise_amplitude: f64,
    seed: u64,
) -> Result<Signal, EarError> {
    let clean = signal::convolve(playback, &ir.taps)?;
    if noise_amplitude == 0.0 {
        return Ok(clean);
    }
    let noise = signal::white_noise(clean.len(), noise_amplitude, seed, clean.sample_rate());
    Ok(clean.add(&noise)?)
}

/// In-ear recording of `playback` for the given ear.
pub fn simulate_in_ear(
    profile: &EarProfile,
    playback: &Signal,
    noise_amplitude: f64,
    seed: u64,
) -> Result<Signal, EarError> {
    let ir = realize_ir(profile, playback.sample_rate(), DEFAULT_IR_LENGTH)?;
    acquire_through(&ir, playback, noise_amplitude, seed)
}

/// A recorded response together with the metadata a verifier sees.
#[derive(Debug, Clone, PartialEq)]
pub struct Acquisition {
    pub response: Signal,
    pub latency_ms: f64,
    /// Nonce of the challenge this response was physically produced under.
    pub produced_for: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversaryMode {
    /// A foreign ear answers the challenge.
    Imposter,
    /// A stale recording is resubmitted regardless of the current challenge.
    Replay,
    /// A genuine-shaped response arrives late.
    Delayed,
}

pub struct AdversaryContext<'a> {
    pub victim: &'a EarProfile,
    pub attacker: Option<&'a EarProfile>,
    pub playback: &'a Signal,
    pub current_nonce: Option<u64>,
    pub noise_amplitude: f64,
    pub seed: u64,
    pub history: &'a [Acquisition],
    pub nominal_latency_ms: f64,
    pub extra_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryOutcome {
    pub acquisition: Acquisition,
    /// The attacker's ear equals the victim's: a degenerate control, not an attack.
    pub sanity_case: bool,
}

pub fn adversary_response(mode: AdversaryMode, ctx: &AdversaryContext<'_>) -> Result<AdversaryOutcome, EarError> {
    match mode {
        AdversaryMode::Imposter => {
            let attacker = ctx.attacker.ok_or(EarError::MissingAttacker)?;
            let response = simulate_in_ear(attacker, ctx.playback, ctx.noise_amplitude, ctx.seed)?;
            let sanity_case = attacker.resonators == ctx.victim.resonators
                && attacker.direct_gain == ctx.victim.direct_gain
                && attacker.direct_delay == ctx.victim.direct_delay;
            Ok(AdversaryOutcome {
                acquisition: Acquisition {
                    response,
                    latency_ms: ctx.nominal_latency_ms,
                    produced_for: ctx.current_nonce,
                },
                sanity_case,
            })
        }
        AdversaryMode::Replay => {
            let recorded = ctx.history.last().ok_or(EarError::NoHistory)?;
            Ok(AdversaryOutcome {
                acquisition: Acquisition {
                    response: recorded.response.clone(),
                    latency_ms: ctx.nominal_latency_ms,
                    produced_for: recorded.produced_for,
                },
                sanity_case: false,
            })
        }
        AdversaryMode::Delayed => {
            let response = simulate_in_ear(ctx.victim, ctx.playback, ctx.noise_amplitude, ctx.seed)?;
            Ok(AdversaryOutcome {
                acquisition: Acquisition {
                    response,
                    latency_ms: ctx.nominal_latency_ms + ctx.extra_latency_ms,
                    produced_for: ctx.current_nonce,
                },
                sanity_case: false,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{spectrum, white_noise};

    fn profile(seed: u64) -> EarProfile {
        sample_profile(seed, &PopulationParams::default(), format!("u{seed}")).unwrap()
    }

    #[test]
    fn sampling_is_deterministic_and_distinct() {
        assert_eq!(profile(1), profile(1));
        let (a, b) = (profile(1), profile(2));
        assert!(a
            .resonators
            .iter()
            .zip(&b.resonators)
            .any(|(x, y)| x.center_hz != y.center_hz));
    }

    #[test]
    fn thousand_seeds_stay_in_range() {
        for seed in 0..1000 {
            let p = profile(seed);
            assert!((2..=4).contains(&p.resonators.len()));
            for r in &p.resonators {
                assert!((500.0..=7000.0).contains(&r.center_hz));
                assert!((2.0..=30.0).contains(&r.q_factor));
                assert!(r.gain > 0.0);
            }
        }
    }

    #[test]
    fn degenerate_ranges_rejected() {
        let mut p = PopulationParams::default();
        p.q_factor = Span::new(10.0, 5.0);
        assert!(matches!(sample_profile(0, &p, "x"), Err(EarError::Config(_))));
        let mut p = PopulationParams::default();
        p.min_resonators = 4;
        p.max_resonators = 3;
        assert!(matches!(sample_profile(0, &p, "x"), Err(EarError::Config(_))));
    }

    #[test]
    fn bare_direct_path_is_unit_impulse() {
        let p = EarProfile {
            user_id: "d".into(),
            resonators: vec![],
            direct_gain: 1.0,
            direct_delay: 0,
        };
        let ir = realize_ir(&p, 16_000, 64).unwrap();
        assert_eq!(ir.taps.samples()[0], 1.0);
        assert!(ir.taps.samples()[1..].iter().all(|&v| v == 0.0));
        assert!(realize_ir(&p, 16_000, 63).is_err());
        let late = EarProfile { direct_delay: 64, ..p };
        assert!(realize_ir(&late, 16_000, 64).is_err());
    }

    #[test]
    fn single_resonator_peak_location() {
        let p = EarProfile {
            user_id: "r".into(),
            resonators: vec![Resonator {
                center_hz: 3000.0,
                q_factor: 10.0,
                gain: 0.1,
            }],
            direct_gain: 0.0,
            direct_delay: 0,
        };
        let ir = realize_ir(&p, 16_000, 512).unwrap();
        let s = spectrum(&ir.taps, 4096).unwrap();
        let mags = s.magnitudes();
        let k = (0..mags.len()).max_by(|&a, &b| mags[a].total_cmp(&mags[b])).unwrap();
        assert!((s.frequency(k) - 3000.0).abs() <= 300.0, "peak at {}", s.frequency(k));
    }

    #[test]
    fn doubling_gains_doubles_ir() {
        let p = profile(5);
        let a = realize_ir(&p, 16_000, 512).unwrap();
        let b = realize_ir(&p.scaled_gains(2.0), 16_000, 512).unwrap();
        for (x, y) in a.taps.samples().iter().zip(b.taps.samples()) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn sifting_and_determinism() {
        let p = profile(3);
        let ir = realize_ir(&p, 16_000, DEFAULT_IR_LENGTH).unwrap();
        let out = simulate_in_ear(&p, &Signal::impulse(1, 0, 1.0, 16_000), 0.0, 0).unwrap();
        assert_eq!(out.samples(), ir.taps.samples());

        let pb = white_noise(400, 0.5, 8, 16_000);
        let y1 = simulate_in_ear(&p, &pb, 1e-3, 77).unwrap();
        let y2 = simulate_in_ear(&p, &pb, 1e-3, 77).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(y1.len(), 400 + DEFAULT_IR_LENGTH - 1);
    }

    #[test]
    fn linear_in_playback_without_noise() {
        let p = profile(4);
        let a = white_noise(300, 0.5, 1, 16_000);
        let b = white_noise(300, 0.5, 2, 16_000);
        let ya = simulate_in_ear(&p, &a, 0.0, 0).unwrap();
        let yb = simulate_in_ear(&p, &b, 0.0, 0).unwrap();
        let mix = a.scaled(0.3).add(&b.scaled(-1.7)).unwrap();
        let ym = simulate_in_ear(&p, &mix, 0.0, 0).unwrap();
        let peak = ym.samples().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..ym.len() {
            let expect = 0.3 * ya.samples()[i] - 1.7 * yb.samples()[i];
            assert!((ym.samples()[i] - expect).abs() <= 1e-9 * peak);
        }
    }

    #[test]
    fn jitter_is_bounded() {
        let p = profile(9);
        let v = p.session_variant(&Jitter::default(), 123);
        for (a, b) in p.resonators.iter().zip(&v.resonators) {
            assert!((b.center_hz / a.center_hz - 1.0).abs() <= 0.03);
            assert!((b.gain / a.gain - 1.0).abs() <= 0.10);
        }
        assert_eq!(v, p.session_variant(&Jitter::default(), 123));
    }

    #[test]
    fn adversary_modes() {
        let victim = profile(1);
        let pb = white_noise(200, 0.5, 3, 16_000);
        let mut ctx = AdversaryContext {
            victim: &victim,
            attacker: Some(&victim),
            playback: &pb,
            current_nonce: Some(2),
            noise_amplitude: 0.0,
            seed: 1,
            history: &[],
            nominal_latency_ms: 40.0,
            extra_latency_ms: 500.0,
        };
        let same = adversary_response(AdversaryMode::Imposter, &ctx).unwrap();
        assert!(same.sanity_case);
        assert_eq!(
            same.acquisition.response,
            simulate_in_ear(&victim, &pb, 0.0, 1).unwrap()
        );

        assert_eq!(adversary_response(AdversaryMode::Replay, &ctx), Err(EarError::NoHistory));
        let old = Acquisition {
            response: white_noise(10, 0.1, 4, 16_000),
            latency_ms: 30.0,
            produced_for: Some(1),
        };
        let hist = [old.clone()];
        ctx.history = &hist;
        let replay = adversary_response(AdversaryMode::Replay, &ctx).unwrap();
        assert_eq!(replay.acquisition.response, old.response);
        assert_eq!(replay.acquisition.produced_for, Some(1));

        let delayed = adversary_response(AdversaryMode::Delayed, &ctx).unwrap();
        assert!(delayed.acquisition.latency_ms > 200.0);

        let foreign = profile(2);
        ctx.attacker = Some(&foreign);
        assert!(!adversary_response(AdversaryMode::Imposter, &ctx).unwrap().sanity_case);
    }
}
