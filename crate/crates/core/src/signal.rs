//! Sampled real signals, spectra, convolution, noise and 16-bit WAV I/O.

use std::cell::RefCell;
use std::path::Path;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::rng;

/// Sample rate used by every desk-scale experiment.
pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

/// Products of operand lengths below this use direct summation.
const DIRECT_CONV_LIMIT: usize = 4096;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SignalError {
    #[error("sample rate mismatch: {left} Hz vs {right} Hz")]
    RateMismatch { left: u32, right: u32 },
    #[error("empty input signal")]
    EmptyInput,
    #[error("sample rate must be positive")]
    InvalidSampleRate,
    #[error("non-finite sample at index {index}")]
    NonFinite { index: usize },
    #[error("nfft {nfft} shorter than signal length {len}; refusing to truncate")]
    Truncation { len: usize, nfft: usize },
    #[error("nfft {0} is not a power of two")]
    NotPowerOfTwo(usize),
    #[error("wav format error in {field}: {detail}")]
    Format { field: &'static str, detail: String },
    #[error("wav i/o error: {0}")]
    Io(String),
}

/// Uniformly sampled real-valued signal. Full scale is 1.0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, SignalError> {
        if sample_rate == 0 {
            return Err(SignalError::InvalidSampleRate);
        }
        if let Some(index) = samples.iter().position(|x| !x.is_finite()) {
            return Err(SignalError::NonFinite { index });
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// Construct without validation. Callers guarantee finite samples and a
    /// positive rate (internal arithmetic on already-valid signals).
    pub(crate) fn from_parts(samples: Vec<f64>, sample_rate: u32) -> Self {
        debug_assert!(sample_rate > 0);
        debug_assert!(samples.iter().all(|x| x.is_finite()));
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn zeros(len: usize, sample_rate: u32) -> Self {
        Self::from_parts(vec![0.0; len], sample_rate)
    }

    /// `gain` at index `at`, zero elsewhere.
    pub fn impulse(len: usize, at: usize, gain: f64, sample_rate: u32) -> Self {
        let mut s = vec![0.0; len];
        if at < len {
            s[at] = gain;
        }
        Self::from_parts(s, sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            (self.energy() / self.samples.len() as f64).sqrt()
        }
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self::from_parts(self.samples.iter().map(|x| x * gain).collect(), self.sample_rate)
    }

    /// Sample-wise sum; the shorter operand is zero-padded.
    pub fn add(&self, other: &Signal) -> Result<Self, SignalError> {
        check_rates(self, other)?;
        let n = self.len().max(other.len());
        let mut out = vec![0.0; n];
        for (o, x) in out.iter_mut().zip(&self.samples) {
            *o += x;
        }
        for (o, x) in out.iter_mut().zip(&other.samples) {
            *o += x;
        }
        Ok(Self::from_parts(out, self.sample_rate))
    }

    pub fn padded_to(&self, len: usize) -> Self {
        let mut s = self.samples.clone();
        s.resize(len.max(s.len()), 0.0);
        Self::from_parts(s, self.sample_rate)
    }
}

/// One-sided DFT of a zero-padded real signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    bins: Vec<Complex64>,
    nfft: usize,
    sample_rate: u32,
}

impl ComplexSpectrum {
    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    pub fn nfft(&self) -> usize {
        self.nfft
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn frequency(&self, k: usize) -> f64 {
        k as f64 * f64::from(self.sample_rate) / self.nfft as f64
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.bins.iter().map(|c| c.norm()).collect()
    }

    /// Energy of the full two-sided spectrum, reconstructed from the one-sided bins.
    pub fn energy(&self) -> f64 {
        let last = self.nfft / 2;
        self.bins
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let w = if k == 0 || k == last { 1.0 } else { 2.0 };
                w * c.norm_sqr()
            })
            .sum()
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub(crate) fn fft_in_place(buf: &mut [Complex64], inverse: bool) {
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let plan = if inverse {
            planner.plan_fft_inverse(buf.len())
        } else {
            planner.plan_fft_forward(buf.len())
        };
        plan.process(buf);
    });
}

/// Forward FFT of a real slice zero-padded to `nfft`; returns all `nfft` bins.
pub(crate) fn real_fft(x: &[f64], nfft: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    buf.resize(nfft, Complex64::new(0.0, 0.0));
    fft_in_place(&mut buf, false);
    buf
}

fn check_rates(a: &Signal, b: &Signal) -> Result<(), SignalError> {
    if a.sample_rate != b.sample_rate {
        return Err(SignalError::RateMismatch {
            left: a.sample_rate,
            right: b.sample_rate,
        });
    }
    Ok(())
}

/// Full linear convolution of two slices, length `a.len() + b.len() - 1`.
///
/// Short operands use direct summation; longer ones go through the FFT.
pub fn convolve_slices(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let out_len = a.len() + b.len() - 1;
    if a.len().min(b.len()) <= 16 || a.len() * b.len() <= DIRECT_CONV_LIMIT {
        return convolve_direct(a, b);
    }
    let nfft = out_len.next_power_of_two();
    // Pack both real inputs into one complex transform: z = a + i b.
    let mut z: Vec<Complex64> = (0..nfft)
        .map(|n| {
            Complex64::new(
                a.get(n).copied().unwrap_or(0.0),
                b.get(n).copied().unwrap_or(0.0),
            )
        })
        .collect();
    fft_in_place(&mut z, false);
    let mut prod = vec![Complex64::new(0.0, 0.0); nfft];
    for k in 0..nfft {
        let zk = z[k];
        let zc = z[(nfft - k) % nfft].conj();
        let ak = (zk + zc) * 0.5;
        let bk = (zk - zc) * Complex64::new(0.0, -0.5);
        prod[k] = ak * bk;
    }
    fft_in_place(&mut prod, true);
    let scale = 1.0 / nfft as f64;
    prod[..out_len].iter().map(|c| c.re * scale).collect()
}

pub(crate) fn convolve_direct(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (o, &y) in out[i..].iter_mut().zip(b) {
            *o += x * y;
        }
    }
    out
}

/// Adjoint of `convolve_slices(x, h)` with respect to `x`:
/// `out[n] = sum_k g[n + k] * h[k]`, truncated to `x_len`.
pub(crate) fn convolve_adjoint(g: &[f64], h: &[f64], x_len: usize) -> Vec<f64> {
    let rev: Vec<f64> = h.iter().rev().copied().collect();
    let full = convolve_slices(g, &rev);
    // full[m] = sum_k g[m - (L-1) + k] h[k]; shift by L-1.
    let shift = h.len() - 1;
    (0..x_len)
        .map(|n| full.get(n + shift).copied().unwrap_or(0.0))
        .collect()
}

pub fn convolve(a: &Signal, b: &Signal) -> Result<Signal, SignalError> {
    check_rates(a, b)?;
    if a.is_empty() || b.is_empty() {
        return Err(SignalError::EmptyInput);
    }
    Ok(Signal::from_parts(
        convolve_slices(&a.samples, &b.samples),
        a.sample_rate,
    ))
}

pub fn spectrum(s: &Signal, nfft: usize) -> Result<ComplexSpectrum, SignalError> {
    if !nfft.is_power_of_two() {
        return Err(SignalError::NotPowerOfTwo(nfft));
    }
    if nfft < s.len() {
        return Err(SignalError::Truncation { len: s.len(), nfft });
    }
    let mut bins = real_fft(&s.samples, nfft);
    bins.truncate(nfft / 2 + 1);
    Ok(ComplexSpectrum {
        bins,
        nfft,
        sample_rate: s.sample_rate,
    })
}

/// i.i.d. uniform noise in `[-amplitude, amplitude]`.
pub fn white_noise(length: usize, amplitude: f64, seed: u64, sample_rate: u32) -> Signal {
    let amplitude = amplitude.abs();
    if amplitude == 0.0 {
        return Signal::zeros(length, sample_rate);
    }
    let mut rng = rng::seeded(seed);
    let samples = (0..length)
        .map(|_| rng.random_range(-1.0..=1.0) * amplitude)
        .collect();
    Signal::from_parts(samples, sample_rate)
}

const PCM_SCALE: f64 = 32767.0;

fn quantize(x: f64) -> i16 {
    (x.clamp(-1.0, 1.0) * PCM_SCALE).round() as i16
}

impl Signal {
    /// The signal as it survives a 16-bit WAV round trip.
    pub fn quantized_pcm16(&self) -> Signal {
        let samples = self.samples.iter().map(|&x| f64::from(quantize(x)) / PCM_SCALE).collect();
        Signal::from_parts(samples, self.sample_rate)
    }
}

pub fn write_wav(path: impl AsRef<Path>, s: &Signal) -> Result<(), SignalError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: s.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let io = |e: hound::Error| SignalError::Io(e.to_string());
    let mut w = hound::WavWriter::create(path, spec).map_err(io)?;
    for &x in &s.samples {
        w.write_sample(quantize(x)).map_err(io)?;
    }
    w.finalize().map_err(io)
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Signal, SignalError> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io)
            if matches!(
                io.kind(),
                std::io::ErrorKind::NotFound | std::io::ErrorKind::PermissionDenied
            ) =>
        {
            SignalError::Io(io.to_string())
        }
        other => SignalError::Format {
            field: "header",
            detail: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(SignalError::Format {
            field: "channels",
            detail: format!("expected 1 (mono), found {}", spec.channels),
        });
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(SignalError::Format {
            field: "bits_per_sample",
            detail: format!(
                "expected 16-bit integer PCM, found {}-bit {:?}",
                spec.bits_per_sample, spec.sample_format
            ),
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|r| {
            r.map(|v| f64::from(v) / PCM_SCALE).map_err(|e| SignalError::Format {
                field: "data",
                detail: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Signal::new(samples, spec.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn oracle_conv(a: &[f64], b: &[f64]) -> Vec<f64> {
        (0..a.len() + b.len() - 1)
            .map(|n| {
                (0..a.len())
                    .filter(|&i| n >= i && n - i < b.len())
                    .map(|i| a[i] * b[n - i])
                    .sum()
            })
            .collect()
    }

    fn sig(v: &[f64]) -> Signal {
        Signal::new(v.to_vec(), 16_000).unwrap()
    }

    #[test]
    fn delta_is_identity() {
        let x = sig(&[0.3, -0.2, 0.7]);
        assert_eq!(convolve(&sig(&[1.0]), &x).unwrap(), x);
    }

    #[test]
    fn hand_expansion() {
        let y = convolve(&sig(&[1.0, 1.0]), &sig(&[1.0, 1.0])).unwrap();
        assert_eq!(y.samples(), &[1.0, 2.0, 1.0]);
    }

    #[test]
    fn random_pair_matches_direct_oracle() {
        let a = white_noise(8, 1.0, 11, 16_000);
        let b = white_noise(5, 1.0, 12, 16_000);
        let y = convolve(&a, &b).unwrap();
        let o = oracle_conv(a.samples(), b.samples());
        assert_eq!(y.len(), 12);
        let peak = o.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (u, v) in y.samples().iter().zip(&o) {
            assert!((u - v).abs() <= 1e-9 * peak);
        }
    }

    #[test]
    fn fft_path_matches_direct_oracle() {
        let a = white_noise(3000, 1.0, 1, 16_000);
        let b = white_noise(700, 1.0, 2, 16_000);
        let y = convolve_slices(a.samples(), b.samples());
        let o = convolve_direct(a.samples(), b.samples());
        let peak = o.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = y.iter().zip(&o).fold(0.0f64, |m, (u, v)| m.max((u - v).abs()));
        assert!(err <= 1e-9 * peak, "err {err}");
    }

    #[test]
    fn adjoint_matches_transpose() {
        let x = white_noise(300, 1.0, 3, 16_000).into_samples();
        let h = white_noise(40, 1.0, 4, 16_000).into_samples();
        let g = white_noise(339, 1.0, 5, 16_000).into_samples();
        // <conv(x,h), g> == <x, adjoint(g,h)>
        let lhs: f64 = convolve_slices(&x, &h).iter().zip(&g).map(|(a, b)| a * b).sum();
        let adj = convolve_adjoint(&g, &h, x.len());
        let rhs: f64 = x.iter().zip(&adj).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn errors() {
        let a = Signal::new(vec![1.0], 8000).unwrap();
        let b = Signal::new(vec![1.0], 16_000).unwrap();
        assert!(matches!(convolve(&a, &b), Err(SignalError::RateMismatch { .. })));
        let e = Signal::new(vec![], 8000).unwrap();
        assert_eq!(convolve(&a, &e), Err(SignalError::EmptyInput));
        assert!(matches!(Signal::new(vec![f64::NAN], 8000), Err(SignalError::NonFinite { index: 0 })));
        assert_eq!(
            spectrum(&sig(&[1.0; 5]), 4),
            Err(SignalError::Truncation { len: 5, nfft: 4 })
        );
        assert_eq!(spectrum(&sig(&[1.0]), 6), Err(SignalError::NotPowerOfTwo(6)));
    }

    #[test]
    fn dc_and_delta_spectra() {
        let s = spectrum(&sig(&[1.0, 1.0, 1.0, 1.0]), 4).unwrap();
        assert_eq!(s.bins().len(), 3);
        assert!((s.bins()[0] - Complex64::new(4.0, 0.0)).norm() < 1e-12);
        assert!(s.bins()[1..].iter().all(|c| c.norm() < 1e-12));
        let d = spectrum(&Signal::impulse(16, 0, 1.0, 16_000), 16).unwrap();
        assert!(d.bins().iter().all(|c| (c - Complex64::new(1.0, 0.0)).norm() < 1e-12));
    }

    #[test]
    fn cosine_on_bin_is_concentrated() {
        let nfft = 256;
        let k0 = 19;
        let x: Vec<f64> = (0..nfft)
            .map(|n| (2.0 * std::f64::consts::PI * k0 as f64 * n as f64 / nfft as f64).cos())
            .collect();
        let s = spectrum(&sig(&x), nfft).unwrap();
        // direct DFT oracle
        let dft = |k: usize| -> f64 {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in x.iter().enumerate() {
                let ph = -2.0 * std::f64::consts::PI * (k * n) as f64 / nfft as f64;
                re += v * ph.cos();
                im += v * ph.sin();
            }
            (re * re + im * im).sqrt()
        };
        let peak = dft(k0);
        assert!((s.bins()[k0].norm() - peak).abs() < 1e-9 * peak);
        for (k, c) in s.bins().iter().enumerate() {
            if k != k0 {
                assert!(c.norm() < 1e-9 * peak, "bin {k}");
            }
        }
    }

    #[test]
    fn parseval() {
        let x = white_noise(200, 0.8, 9, 16_000);
        let s = spectrum(&x, 256).unwrap();
        let rel = (x.energy() - s.energy() / 256.0).abs() / x.energy();
        assert!(rel < 1e-6);
    }

    #[test]
    fn noise_properties() {
        assert!(white_noise(100, 0.0, 3, 16_000).samples().iter().all(|&v| v == 0.0));
        assert_eq!(white_noise(64, 0.5, 3, 16_000), white_noise(64, 0.5, 3, 16_000));
        let n = white_noise(100_000, 0.1, 42, 16_000);
        assert!(n.samples().iter().all(|v| v.abs() <= 0.1));
        let mean = n.samples().iter().sum::<f64>() / n.len() as f64;
        assert!(mean.abs() < 0.002, "mean {mean}");
    }

    #[test]
    fn wav_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tone.wav");
        let tone: Vec<f64> = (0..1600)
            .map(|n| 0.9 * (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16_000.0).sin())
            .collect();
        let s = sig(&tone);
        write_wav(&path, &s).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate(), 16_000);
        let err = s.samples().iter().zip(back.samples()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err <= 1.0 / 32768.0);

        assert_eq!(quantize(1.0), 32767);
        assert_eq!(quantize(2.0), 32767);

        let bytes = std::fs::read(&path).unwrap();
        let trunc = dir.path().join("trunc.wav");
        std::fs::write(&trunc, &bytes[..20]).unwrap();
        assert!(matches!(read_wav(&trunc), Err(SignalError::Format { .. })));

        let stereo = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&stereo, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&stereo), Err(SignalError::Format { field: "channels", .. })));
    }
}
