//! Relative-transfer-function features and deficiency detection.
//!
//! Both playback and in-ear response are cut into Hann-windowed frames and
//! summarised as band powers over mel-spaced bands. A feature cell is the
//! response/playback power ratio in dB; cells where the playback carries no
//! audible energy are flagged as deficient.

use std::io::Write;
use std::path::Path;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::psycho;
use crate::signal::{self, fft_in_place, Signal};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum FeatureError {
    #[error("signal of {len} samples is shorter than one frame of {frame_len}")]
    TooShort { len: usize, frame_len: usize },
    #[error("invalid feature config: {0}")]
    Config(String),
    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    RateMismatch(u32, u32),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop: usize,
    pub nfft: usize,
    pub n_bands: usize,
    pub f_lo: f64,
    pub f_hi: f64,
    pub epsilon: f64,
    pub clamp_lo_db: f64,
    pub clamp_hi_db: f64,
    pub silence_dbfs: f64,
    /// Largest alignment lag searched, in samples.
    pub max_lag: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: signal::DEFAULT_SAMPLE_RATE,
            frame_len: 400,
            hop: 160,
            nfft: 512,
            n_bands: 40,
            f_lo: 100.0,
            f_hi: 7600.0,
            epsilon: 1e-10,
            clamp_lo_db: -80.0,
            clamp_hi_db: 40.0,
            silence_dbfs: -50.0,
            max_lag: 512,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: &str| Err(FeatureError::Config(m.to_string()));
        if self.hop == 0 || self.frame_len == 0 {
            return bad("frame_len and hop must be positive");
        }
        if !self.nfft.is_power_of_two() || self.nfft < self.frame_len {
            return bad("nfft must be a power of two no shorter than frame_len");
        }
        if self.n_bands == 0 || !(self.f_lo > 0.0 && self.f_lo < self.f_hi) {
            return bad("need n_bands > 0 and 0 < f_lo < f_hi");
        }
        if self.f_hi > f64::from(self.sample_rate) / 2.0 {
            return bad("f_hi above Nyquist");
        }
        if !(self.clamp_lo_db < self.clamp_hi_db) || !(self.epsilon > 0.0) {
            return bad("need clamp_lo_db < clamp_hi_db and epsilon > 0");
        }
        Ok(())
    }

    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            (len - self.frame_len) / self.hop + 1
        }
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Mel-spaced band edges in Hz (`n_bands + 1` values).
pub fn mel_band_edges(n_bands: usize, f_lo: f64, f_hi: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(f_lo), hz_to_mel(f_hi));
    (0..=n_bands)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / n_bands as f64))
        .collect()
}

/// Periodic Hann window.
pub fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

pub fn frame_signal(s: &Signal, frame_len: usize, hop: usize) -> Result<Vec<Vec<f64>>, FeatureError> {
    if hop == 0 || frame_len == 0 {
        return Err(FeatureError::Config("frame_len and hop must be positive".into()));
    }
    if frame_len > s.len() {
        return Err(FeatureError::TooShort {
            len: s.len(),
            frame_len,
        });
    }
    let w = hann(frame_len);
    let count = (s.len() - frame_len) / hop + 1;
    Ok((0..count)
        .map(|f| {
            s.samples()[f * hop..f * hop + frame_len]
                .iter()
                .zip(&w)
                .map(|(x, w)| x * w)
                .collect()
        })
        .collect())
}

/// Frame/band power analysis shared by features, masks and the watermark.
#[derive(Debug, Clone)]
pub struct BandAnalyzer {
    config: FeatureConfig,
    window: Vec<f64>,
    edges: Vec<f64>,
    centers: Vec<f64>,
    bins: Vec<(usize, usize)>,
    norm: f64,
}

impl BandAnalyzer {
    pub fn new(config: &FeatureConfig) -> Result<Self, FeatureError> {
        config.validate()?;
        let window = hann(config.frame_len);
        let edges = mel_band_edges(config.n_bands, config.f_lo, config.f_hi);
        let df = f64::from(config.sample_rate) / config.nfft as f64;
        let bins = edges
            .windows(2)
            .map(|e| {
                let lo = (e[0] / df).ceil() as usize;
                let hi = (e[1] / df).ceil() as usize;
                if hi > lo {
                    (lo, hi)
                } else {
                    let k = (0.5 * (e[0] + e[1]) / df).round() as usize;
                    (k, k + 1)
                }
            })
            .collect();
        let centers = edges.windows(2).map(|e| (e[0] * e[1]).sqrt()).collect();
        let wsq: f64 = window.iter().map(|w| w * w).sum();
        Ok(Self {
            norm: 2.0 / (config.nfft as f64 * wsq),
            config: config.clone(),
            window,
            edges,
            centers,
            bins,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn n_bands(&self) -> usize {
        self.bins.len()
    }

    pub fn band_edges(&self) -> &[f64] {
        &self.edges
    }

    /// Geometric centre frequency of each band.
    pub fn band_centers(&self) -> &[f64] {
        &self.centers
    }

    /// FFT bin range `[lo, hi)` of each band.
    pub fn band_bins(&self) -> &[(usize, usize)] {
        &self.bins
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    pub fn frame_count(&self, len: usize) -> usize {
        self.config.frame_count(len)
    }

    fn frame_spectrum(&self, x: &[f64], f: usize) -> Vec<Complex64> {
        let start = f * self.config.hop;
        let mut buf = vec![Complex64::new(0.0, 0.0); self.config.nfft];
        for (n, w) in self.window.iter().enumerate() {
            buf[n] = Complex64::new(x.get(start + n).copied().unwrap_or(0.0) * w, 0.0);
        }
        fft_in_place(&mut buf, false);
        buf
    }

    /// Band powers (mean-square units) of every frame, row-major frames x bands.
    pub fn band_powers(&self, x: &[f64]) -> Vec<f64> {
        let frames = self.frame_count(x.len());
        let nb = self.n_bands();
        let mut out = vec![0.0; frames * nb];
        for f in 0..frames {
            let spec = self.frame_spectrum(x, f);
            for (b, &(lo, hi)) in self.bins.iter().enumerate() {
                out[f * nb + b] = self.norm * spec[lo..hi].iter().map(|c| c.norm_sqr()).sum::<f64>();
            }
        }
        out
    }

    /// Gradient of `sum(grad_p * band_powers(x))` with respect to `x`.
    pub fn band_powers_adjoint(&self, x: &[f64], grad_p: &[f64]) -> Vec<f64> {
        let frames = self.frame_count(x.len());
        let nb = self.n_bands();
        let nfft = self.config.nfft;
        let mut gx = vec![0.0; x.len()];
        for f in 0..frames {
            let row = &grad_p[f * nb..(f + 1) * nb];
            if row.iter().all(|&g| g == 0.0) {
                continue;
            }
            let spec = self.frame_spectrum(x, f);
            let mut z = vec![Complex64::new(0.0, 0.0); nfft];
            for (b, &(lo, hi)) in self.bins.iter().enumerate() {
                for k in lo..hi {
                    z[k] = spec[k] * row[b];
                }
            }
            fft_in_place(&mut z, true);
            let start = f * self.config.hop;
            for (n, w) in self.window.iter().enumerate() {
                if let Some(g) = gx.get_mut(start + n) {
                    *g += 2.0 * self.norm * w * z[n].re;
                }
            }
        }
        gx
    }

    /// Frame RMS levels in dBFS (unwindowed).
    pub fn frame_levels_dbfs(&self, x: &[f64]) -> Vec<f64> {
        let frames = self.frame_count(x.len());
        let (fl, hop) = (self.config.frame_len, self.config.hop);
        (0..frames)
            .map(|f| {
                let seg = &x[f * hop..f * hop + fl];
                let ms = seg.iter().map(|v| v * v).sum::<f64>() / fl as f64;
                psycho::power_to_dbfs(ms)
            })
            .collect()
    }

    /// Threshold in quiet at each band centre, in mean-square units.
    pub fn quiet_thresholds(&self) -> Vec<f64> {
        self.centers
            .iter()
            .map(|&f| {
                let f = f.clamp(20.0, 8000.0);
                psycho::dbfs_to_power(psycho::threshold_in_quiet(f).expect("clamped into domain"))
            })
            .collect()
    }
}

/// Frames x bands matrix of log band-power ratios in dB.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub frames: usize,
    pub bands: usize,
    /// Row-major, `frames * bands` values.
    pub data: Vec<f64>,
    pub frame_len: usize,
    pub hop: usize,
    pub band_edges: Vec<f64>,
}

impl FeatureMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let bands = rows.first().map_or(0, Vec::len);
        Self {
            frames: rows.len(),
            bands,
            data: rows.iter().flatten().copied().collect(),
            frame_len: 0,
            hop: 0,
            band_edges: Vec::new(),
        }
    }

    /// Row-major data with no framing metadata.
    pub fn from_flat(frames: usize, bands: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), frames * bands, "data length must be frames * bands");
        Self { frames, bands, data, frame_len: 0, hop: 0, band_edges: Vec::new() }
    }

    pub fn row(&self, f: usize) -> &[f64] {
        &self.data[f * self.bands..(f + 1) * self.bands]
    }

    pub fn get(&self, f: usize, b: usize) -> f64 {
        self.data[f * self.bands + b]
    }

    /// Consecutive frames `[start, start + len)`.
    pub fn crop(&self, start: usize, len: usize) -> FeatureMatrix {
        FeatureMatrix {
            frames: len,
            data: self.data[start * self.bands..(start + len) * self.bands].to_vec(),
            band_edges: self.band_edges.clone(),
            ..*self
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), FeatureError> {
        let io = |e: std::io::Error| FeatureError::Io(e.to_string());
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        let header: Vec<String> = (0..self.bands).map(|b| format!("band{b}")).collect();
        writeln!(f, "{}", header.join(",")).map_err(io)?;
        for t in 0..self.frames {
            let row: Vec<String> = self.row(t).iter().map(|v| format!("{v:.6}")).collect();
            writeln!(f, "{}", row.join(",")).map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

/// Frames x bands flags of cells where the playback carries no usable energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeficiencyMask {
    pub frames: usize,
    pub bands: usize,
    pub cells: Vec<bool>,
    pub silent_frames: Vec<bool>,
}

impl DeficiencyMask {
    pub fn is_deficient(&self, f: usize, b: usize) -> bool {
        self.cells[f * self.bands + b]
    }

    pub fn deficient_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn silent_fraction(&self) -> f64 {
        if self.frames == 0 {
            return 0.0;
        }
        self.silent_frames.iter().filter(|&&s| s).count() as f64 / self.frames as f64
    }
}

pub fn deficiency_mask(playback: &Signal, config: &FeatureConfig) -> Result<DeficiencyMask, FeatureError> {
    let an = BandAnalyzer::new(config)?;
    Ok(deficiency_mask_with(&an, playback.samples()))
}

pub(crate) fn deficiency_mask_with(an: &BandAnalyzer, x: &[f64]) -> DeficiencyMask {
    let frames = an.frame_count(x.len());
    let nb = an.n_bands();
    let powers = an.band_powers(x);
    let quiet = an.quiet_thresholds();
    let silent_frames: Vec<bool> = an
        .frame_levels_dbfs(x)
        .iter()
        .map(|&l| l < an.config().silence_dbfs)
        .collect();
    let cells = (0..frames * nb)
        .map(|i| silent_frames[i / nb] || powers[i] < quiet[i % nb])
        .collect();
    DeficiencyMask {
        frames,
        bands: nb,
        cells,
        silent_frames,
    }
}

/// Lag in `[0, max_lag]` maximising the cross-correlation of `response`
/// against `playback`; ties resolve to the smaller lag.
pub fn align_lag(playback: &[f64], response: &[f64], max_lag: usize) -> usize {
    if playback.is_empty() || response.is_empty() {
        return 0;
    }
    let rev: Vec<f64> = playback.iter().rev().copied().collect();
    // full[m] = sum_n x[n] y[n + m - (len_x - 1)]
    let full = signal::convolve_slices(response, &rev);
    let base = playback.len() - 1;
    let mut best = (0, f64::NEG_INFINITY);
    for lag in 0..=max_lag {
        let Some(&v) = full.get(base + lag) else { break };
        if v > best.1 {
            best = (lag, v);
        }
    }
    best.0
}

/// The aligned slice of `response` matching `playback` sample for sample.
pub(crate) fn aligned(response: &[f64], lag: usize, len: usize) -> Vec<f64> {
    (0..len).map(|n| response.get(lag + n).copied().unwrap_or(0.0)).collect()
}

pub(crate) fn ratio_db(config: &FeatureConfig, p_resp: f64, p_play: f64) -> f64 {
    (10.0 * ((p_resp + config.epsilon) / (p_play + config.epsilon)).log10())
        .clamp(config.clamp_lo_db, config.clamp_hi_db)
}

pub fn rtf_features(playback: &Signal, response: &Signal, config: &FeatureConfig) -> Result<FeatureMatrix, FeatureError> {
    let an = BandAnalyzer::new(config)?;
    rtf_features_with(&an, playback, response)
}

pub fn rtf_features_with(an: &BandAnalyzer, playback: &Signal, response: &Signal) -> Result<FeatureMatrix, FeatureError> {
    let config = an.config();
    if playback.sample_rate() != response.sample_rate() {
        return Err(FeatureError::RateMismatch(playback.sample_rate(), response.sample_rate()));
    }
    if playback.len() < config.frame_len {
        return Err(FeatureError::TooShort {
            len: playback.len(),
            frame_len: config.frame_len,
        });
    }
    let x = playback.samples();
    let frames = an.frame_count(x.len());
    let nb = an.n_bands();
    let base = FeatureMatrix {
        frames,
        bands: nb,
        data: Vec::new(),
        frame_len: config.frame_len,
        hop: config.hop,
        band_edges: an.band_edges().to_vec(),
    };
    if x.iter().all(|&v| v == 0.0) {
        return Ok(FeatureMatrix {
            data: vec![config.clamp_lo_db; frames * nb],
            ..base
        });
    }
    let lag = align_lag(x, response.samples(), config.max_lag);
    let y = aligned(response.samples(), lag, x.len());
    let px = an.band_powers(x);
    let py = an.band_powers(&y);
    let data = py.iter().zip(&px).map(|(&r, &p)| ratio_db(config, r, p)).collect();
    Ok(FeatureMatrix { data, ..base })
}
