//! Enrollment-time channel sounding with exponential sine sweeps.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ear::{ImpulseResponse, IrOrigin};
use crate::signal::{self, fft_in_place, real_fft, ComplexSpectrum, Signal, SignalError};

/// Taps kept before the detected peak when cropping an estimate.
pub const PRE_PEAK_TAPS: usize = 16;
/// Floor applied to the probe magnitude during spectral division.
pub const DECONV_FLOOR: f64 = 1e-8;
/// Peak-to-median ratio below which an acquisition counts as unusable.
pub const MIN_PEAK_TO_MEDIAN: f64 = 1000.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SoundingError {
    #[error("invalid chirp spec: {0}")]
    Spec(String),
    #[error("signal does not match the chirp spec it claims to come from")]
    SpecMismatch,
    #[error("sounding failed: no impulse peak above the noise floor (peak/median {ratio:.1})")]
    SoundingFailed { ratio: f64 },
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChirpSpec {
    pub f0: f64,
    pub f1: f64,
    pub duration: f64,
    pub amplitude: f64,
}

impl Default for ChirpSpec {
    fn default() -> Self {
        Self {
            f0: 20.0,
            f1: 8000.0,
            duration: 1.0,
            amplitude: 0.5,
        }
    }
}

impl ChirpSpec {
    pub fn validate(&self, fs: u32) -> Result<(), SoundingError> {
        if !(self.f0 > 0.0) {
            return Err(SoundingError::Spec(format!(
                "f0 must be positive for a log sweep, got {}",
                self.f0
            )));
        }
        if !(self.f0 < self.f1) || self.f1 > f64::from(fs) / 2.0 {
            return Err(SoundingError::Spec(format!(
                "need f0 < f1 <= fs/2, got f0={} f1={} fs={fs}",
                self.f0, self.f1
            )));
        }
        if !(self.duration > 0.0) {
            return Err(SoundingError::Spec("duration must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.amplitude) {
            return Err(SoundingError::Spec("amplitude must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn num_samples(&self, fs: u32) -> usize {
        (self.duration * f64::from(fs)).round() as usize
    }

    fn sweep_rate(&self) -> f64 {
        (self.f1 / self.f0).ln()
    }

    /// Instantaneous frequency at time `t` seconds.
    pub fn instantaneous_hz(&self, t: f64) -> f64 {
        self.f0 * (t * self.sweep_rate() / self.duration).exp()
    }
}

pub fn exponential_chirp(spec: &ChirpSpec, fs: u32) -> Result<Signal, SoundingError> {
    spec.validate(fs)?;
    let l = spec.sweep_rate();
    let fs_f = f64::from(fs);
    let samples = (0..spec.num_samples(fs))
        .map(|n| {
            let t = n as f64 / fs_f;
            let phase = 2.0 * PI * spec.f0 * spec.duration / l * ((t * l / spec.duration).exp() - 1.0);
            spec.amplitude * phase.sin()
        })
        .collect();
    Ok(Signal::new(samples, fs)?)
}

fn check_matches(chirp: &Signal, spec: &ChirpSpec) -> Result<(), SoundingError> {
    let expected = exponential_chirp(spec, chirp.sample_rate())?;
    if expected.len() != chirp.len()
        || expected
            .samples()
            .iter()
            .zip(chirp.samples())
            .any(|(a, b)| (a - b).abs() > 1e-9)
    {
        return Err(SoundingError::SpecMismatch);
    }
    Ok(())
}

/// Time-reversed sweep with a +6 dB/octave envelope, scaled so that
/// `convolve(chirp, inverse)` peaks at exactly 1.
pub fn inverse_filter(chirp: &Signal, spec: &ChirpSpec) -> Result<Signal, SoundingError> {
    check_matches(chirp, spec)?;
    let fs_f = f64::from(chirp.sample_rate());
    let l = spec.sweep_rate();
    let x = chirp.samples();
    let n = x.len();
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fs_f;
            x[n - 1 - i] * (-t * l / spec.duration).exp()
        })
        .collect();
    let probe = signal::convolve_slices(x, &raw);
    let peak = probe.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(SoundingError::Spec("zero-amplitude sweep has no inverse".into()));
    }
    Ok(Signal::new(raw.iter().map(|v| v / peak).collect(), chirp.sample_rate())?)
}

/// An estimated impulse response with the bookkeeping needed to audit it.
#[derive(Debug, Clone, PartialEq)]
pub struct IrEstimate {
    pub ir: ImpulseResponse,
    /// Lag (samples after probe onset) of the strongest tap.
    pub peak_lag: usize,
    /// Lag of `ir.taps[0]`.
    pub start_lag: usize,
    pub peak_to_median: f64,
}

/// Deconvolve an in-ear recording of `probe` into an impulse response.
///
/// The recording is divided by the probe spectrum (magnitude floored at
/// [`DECONV_FLOOR`]), i.e. convolved with the exact regularized inverse of the
/// sweep. The result is cropped to `ir_length` taps beginning
/// [`PRE_PEAK_TAPS`] before the peak, never earlier than lag 0.
pub fn estimate_ir(
    probe: &Signal,
    recorded: &Signal,
    spec: &ChirpSpec,
    ir_length: usize,
) -> Result<IrEstimate, SoundingError> {
    check_matches(probe, spec)?;
    if probe.sample_rate() != recorded.sample_rate() {
        return Err(SignalError::RateMismatch {
            left: probe.sample_rate(),
            right: recorded.sample_rate(),
        }
        .into());
    }
    if recorded.is_empty() {
        return Err(SignalError::EmptyInput.into());
    }
    let nfft = (probe.len() + recorded.len()).next_power_of_two();
    let p = real_fft(probe.samples(), nfft);
    let mut y = real_fft(recorded.samples(), nfft);
    for (yk, pk) in y.iter_mut().zip(&p) {
        let mag = pk.norm().max(DECONV_FLOOR);
        *yk = *yk * pk.conj() / (mag * mag);
    }
    fft_in_place(&mut y, true);
    let scale = 1.0 / nfft as f64;
    let h: Vec<f64> = y[..recorded.len()].iter().map(|c| c.re * scale).collect();

    let mut sorted: Vec<f64> = h.iter().map(|v| v.abs()).collect();
    let (peak_lag, peak) = sorted
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    let mid = sorted.len() / 2;
    let median = *sorted.select_nth_unstable_by(mid, f64::total_cmp).1;
    let ratio = if median > 0.0 { peak / median } else { f64::INFINITY };
    if !(peak > 0.0 && ratio >= MIN_PEAK_TO_MEDIAN) {
        return Err(SoundingError::SoundingFailed { ratio });
    }
    let start_lag = peak_lag.saturating_sub(PRE_PEAK_TAPS);
    let taps: Vec<f64> = (0..ir_length)
        .map(|j| h.get(start_lag + j).copied().unwrap_or(0.0))
        .collect();
    Ok(IrEstimate {
        ir: ImpulseResponse {
            taps: Signal::new(taps, probe.sample_rate())?,
            origin: IrOrigin::Estimated,
        },
        peak_lag,
        start_lag,
        peak_to_median: ratio,
    })
}

pub fn transfer_function(ir: &ImpulseResponse, nfft: usize) -> Result<ComplexSpectrum, SoundingError> {
    Ok(signal::spectrum(&ir.taps, nfft)?)
}

/// Restrict `x` to the band `[lo, hi]` Hz by zeroing FFT bins outside it.
pub fn band_limit(x: &[f64], fs: u32, lo: f64, hi: f64) -> Vec<f64> {
    let nfft = (2 * x.len()).next_power_of_two();
    let mut buf: Vec<Complex64> = real_fft(x, nfft);
    let df = f64::from(fs) / nfft as f64;
    for (k, b) in buf.iter_mut().enumerate() {
        let kk = if k <= nfft / 2 { k } else { nfft - k };
        let f = kk as f64 * df;
        if f < lo || f > hi {
            *b = Complex64::new(0.0, 0.0);
        }
    }
    fft_in_place(&mut buf, true);
    buf[..x.len()].iter().map(|c| c.re / nfft as f64).collect()
}

/// Normalized squared error of `estimate` against `truth`, both restricted
/// to the swept band. Taps are compared index by index.
pub fn band_limited_nmse(estimate: &[f64], truth: &[f64], fs: u32, spec: &ChirpSpec) -> f64 {
    let n = estimate.len().max(truth.len());
    let mut e = estimate.to_vec();
    let mut t = truth.to_vec();
    e.resize(n, 0.0);
    t.resize(n, 0.0);
    let e = band_limit(&e, fs, spec.f0, spec.f1);
    let t = band_limit(&t, fs, spec.f0, spec.f1);
    let err: f64 = e.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum();
    let norm: f64 = t.iter().map(|v| v * v).sum();
    err / norm
}

/// JSON sidecar written next to an exported impulse-response WAV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrSidecar {
    pub user_id: String,
    pub session: usize,
    pub spec: ChirpSpec,
    pub sample_rate: u32,
    pub peak_index: usize,
    pub start_lag: usize,
    pub taps: usize,
    pub nmse: Option<f64>,
}

pub fn export_ir(
    wav_path: &Path,
    estimate: &IrEstimate,
    sidecar: &IrSidecar,
) -> Result<(), SoundingError> {
    // Taps are written without rescaling; values beyond full scale clip.
    signal::write_wav(wav_path, &estimate.ir.taps)?;
    let json = serde_json::to_string_pretty(sidecar).map_err(|e| SoundingError::Io(e.to_string()))?;
    std::fs::write(wav_path.with_extension("json"), json).map_err(|e| SoundingError::Io(e.to_string()))
}
