//! Patchwork watermark: seeded band-limited noise carriers placed in
//! silent or band-deficient playback cells, with per-cell gains optimised to
//! raise the template score while every cell stays under its audibility
//! ceiling.
//!
//! A carrier spans one analysis frame (Hann synthesis window) and one band
//! (random-phase bins inside the band), normalised to unit expected power in
//! its own cell. Carriers are derived from the patch seed alone, so a verifier
//! holding the seed can regenerate the exact signal.

use std::f64::consts::LN_10;

use rand::Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ear::ImpulseResponse;
use crate::embedding::{self, NetParams};
use crate::features::{self, BandAnalyzer, DeficiencyMask, FeatureConfig, FeatureMatrix};
use crate::matcher::Template;
use crate::psycho;
use crate::rng;
use crate::signal::{self, fft_in_place, Signal};

#[derive(Debug, thiserror::Error)]
pub enum WatermarkError {
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error("optimisation failed: non-finite gradient at iteration {iter}")]
    OptimizationFailed { iter: usize },
    #[error("patch too hot: {clipped} of {total} samples clipped")]
    PatchTooHot { clipped: usize, total: usize },
    #[error("invalid watermark config: {0}")]
    Config(String),
    #[error(transparent)]
    Features(#[from] features::FeatureError),
    #[error(transparent)]
    Embedding(#[from] embedding::EmbedError),
    #[error(transparent)]
    Signal(#[from] signal::SignalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WatermarkConfig {
    /// Simultaneous-masking offset below the playback band power, dB.
    pub masking_offset_db: f64,
    /// Fraction of the ceiling power a single carrier may use on its own.
    pub allowance: f64,
    /// A cell is patched only if all cells this many frames either side are deficient.
    pub guard_frames: usize,
    /// ... and all bands whose bins come within this many FFT bins.
    pub guard_bins: usize,
    /// Cap on watermark power in non-deficient cells, relative to playback, dB.
    pub leak_db: f64,
    pub iters: usize,
    /// Step as a fraction of each cell's gain bound.
    pub step: f64,
    pub projection_rounds: usize,
    pub max_clip_fraction: f64,
    /// Normalised correlation above which a response counts as bound to a patch.
    pub binding_threshold: f64,
}

impl Default for WatermarkConfig {
    fn default() -> Self {
        Self {
            masking_offset_db: 13.0,
            allowance: 0.5,
            guard_frames: 2,
            guard_bins: 4,
            leak_db: -65.0,
            iters: 12,
            step: 0.5,
            projection_rounds: 6,
            max_clip_fraction: 0.01,
            binding_threshold: 0.3,
        }
    }
}

impl WatermarkConfig {
    pub fn validate(&self) -> Result<(), WatermarkError> {
        if !(self.allowance > 0.0 && self.allowance <= 1.0) {
            return Err(WatermarkError::Config("allowance must lie in (0, 1]".into()));
        }
        if !(self.step > 0.0) || !(self.masking_offset_db >= 0.0) || !(self.leak_db < 0.0) {
            return Err(WatermarkError::Config("need step > 0, masking_offset_db >= 0, leak_db < 0".into()));
        }
        if !(0.0..=1.0).contains(&self.max_clip_fraction) || !(0.0..=1.0).contains(&self.binding_threshold) {
            return Err(WatermarkError::Config("fractions must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-cell maximum watermark power in dBFS, frames x bands row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudibilityCeiling {
    pub frames: usize,
    pub bands: usize,
    pub db: Vec<f64>,
}

impl AudibilityCeiling {
    pub fn get(&self, f: usize, b: usize) -> f64 {
        self.db[f * self.bands + b]
    }

    /// Ceiling in mean-square units (zero for a -inf ceiling).
    pub fn power(&self, i: usize) -> f64 {
        psycho::dbfs_to_power(self.db[i])
    }
}

/// `max(T_q(band centre), P_playback - offset)` for every cell.
pub fn compute_ceiling(
    an: &BandAnalyzer,
    playback: &Signal,
    mask: &DeficiencyMask,
    masking_offset_db: f64,
) -> Result<AudibilityCeiling, WatermarkError> {
    let frames = an.frame_count(playback.len());
    let nb = an.n_bands();
    if mask.frames != frames || mask.bands != nb {
        return Err(WatermarkError::Geometry(format!(
            "mask is {}x{}, playback gives {frames}x{nb}",
            mask.frames, mask.bands
        )));
    }
    let p = an.band_powers(playback.samples());
    let quiet: Vec<f64> = an.quiet_thresholds().iter().map(|&q| psycho::power_to_dbfs(q)).collect();
    let db = p
        .iter()
        .enumerate()
        .map(|(i, &pw)| quiet[i % nb].max(psycho::power_to_dbfs(pw) - masking_offset_db))
        .collect();
    Ok(AudibilityCeiling { frames, bands: nb, db })
}

/// Gains of the patch carriers plus everything needed to regenerate them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WatermarkPatch {
    pub seed: u64,
    pub features: FeatureConfig,
    pub band_edges: Vec<f64>,
    pub signal_len: usize,
    pub frames: usize,
    pub bands: usize,
    /// frames x bands, zero outside patched cells.
    pub gains: Vec<f64>,
}

impl WatermarkPatch {
    pub fn zero(an: &BandAnalyzer, signal_len: usize, seed: u64) -> Self {
        let frames = an.frame_count(signal_len);
        let bands = an.n_bands();
        Self {
            seed,
            features: an.config().clone(),
            band_edges: an.band_edges().to_vec(),
            signal_len,
            frames,
            bands,
            gains: vec![0.0; frames * bands],
        }
    }

    pub fn active_cells(&self) -> Vec<usize> {
        (0..self.gains.len()).filter(|&i| self.gains[i] != 0.0).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.gains.iter().all(|&g| g == 0.0)
    }

    /// Same gains on carriers drawn from another seed.
    pub fn reseeded(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    /// The watermark signal itself.
    pub fn render(&self) -> Result<Vec<f64>, WatermarkError> {
        let an = BandAnalyzer::new(&self.features)?;
        let cells = self.active_cells();
        let carriers = Carriers::build(&an, self.seed, &cells);
        let g: Vec<f64> = cells.iter().map(|&i| self.gains[i]).collect();
        Ok(carriers.synth(&g, self.signal_len))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("patch serialises")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

struct Carriers {
    cells: Vec<usize>,
    /// Unit phasors of each carrier's in-band bins.
    phasors: Vec<Vec<Complex64>>,
    /// Carrier indices grouped by frame.
    frames: Vec<(usize, Vec<usize>)>,
    first_bin: Vec<usize>,
    scale: Vec<f64>,
    window: Vec<f64>,
    bands: usize,
    hop: usize,
    nfft: usize,
}

thread_local! {
    static NORMS: std::cell::RefCell<Vec<(FeatureConfig, Vec<f64>)>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Expected own-cell power of a unit-phasor carrier in every band. Phases
/// are independent and uniform, so cross terms vanish and the expectation is
/// a sum of per-bin contributions.
fn carrier_norms(an: &BandAnalyzer) -> Vec<f64> {
    let cfg = an.config();
    if let Some(v) = NORMS.with(|c| c.borrow().iter().find(|(k, _)| k == cfg).map(|(_, v)| v.clone())) {
        return v;
    }
    let n = cfg.nfft as f64;
    let win = features::hann(cfg.frame_len);
    let nb = an.n_bands();
    let per_bin = |j: usize, b: usize| {
        let theta = std::f64::consts::TAU * j as f64 / n;
        let c: Vec<f64> = win.iter().enumerate().map(|(t, w)| 2.0 * w * (theta * t as f64).cos()).collect();
        let s: Vec<f64> = win.iter().enumerate().map(|(t, w)| 2.0 * w * (theta * t as f64).sin()).collect();
        (an.band_powers(&c)[b] + an.band_powers(&s)[b]) / 2.0
    };
    let norms: Vec<f64> = (0..nb)
        .map(|b| {
            let (lo, hi) = an.band_bins()[b];
            (lo.max(1)..hi.min(cfg.nfft / 2)).map(|j| per_bin(j, b)).sum()
        })
        .collect();
    NORMS.with(|c| c.borrow_mut().push((cfg.clone(), norms.clone())));
    norms
}

impl Carriers {
    fn build(an: &BandAnalyzer, seed: u64, cells: &[usize]) -> Self {
        let cfg = an.config();
        let nb = an.n_bands();
        let first_bin: Vec<usize> = an.band_bins().iter().map(|&(lo, _)| lo.max(1)).collect();
        let phasors = cells
            .iter()
            .map(|&i| {
                let (f, b) = (i / nb, i % nb);
                let mut r = rng::seeded(rng::derive(seed, &[rng::label("carrier"), f as u64, b as u64]));
                let hi = an.band_bins()[b].1.min(cfg.nfft / 2);
                (first_bin[b]..hi)
                    .map(|_| Complex64::from_polar(1.0, r.random_range(0.0..std::f64::consts::TAU)))
                    .collect()
            })
            .collect();
        let mut order: Vec<usize> = (0..cells.len()).collect();
        order.sort_by_key(|&k| cells[k] / nb);
        let mut frames: Vec<(usize, Vec<usize>)> = Vec::new();
        for k in order {
            let f = cells[k] / nb;
            match frames.last_mut() {
                Some((ff, ks)) if *ff == f => ks.push(k),
                _ => frames.push((f, vec![k])),
            }
        }
        let scale = carrier_norms(an).iter().map(|&p| if p > 0.0 { 1.0 / p.sqrt() } else { 0.0 }).collect();
        Self {
            cells: cells.to_vec(),
            phasors,
            frames,
            first_bin,
            scale,
            window: features::hann(cfg.frame_len),
            bands: nb,
            hop: cfg.hop,
            nfft: cfg.nfft,
        }
    }

    /// `sum_i gains[i] * carrier_i`, one inverse FFT per frame.
    fn synth(&self, gains: &[f64], len: usize) -> Vec<f64> {
        let mut w = vec![0.0; len];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.nfft];
        for (f, ks) in &self.frames {
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            let mut any = false;
            for &k in ks {
                let b = self.cells[k] % self.bands;
                let a = gains[k] * self.scale[b];
                if a == 0.0 {
                    continue;
                }
                any = true;
                for (j, ph) in self.phasors[k].iter().enumerate() {
                    let bin = self.first_bin[b] + j;
                    buf[bin] += ph * a;
                    buf[self.nfft - bin] += ph.conj() * a;
                }
            }
            if !any {
                continue;
            }
            fft_in_place(&mut buf, true);
            let start = f * self.hop;
            for (o, (v, win)) in w.iter_mut().skip(start).zip(buf.iter().zip(&self.window)) {
                *o += v.re * win;
            }
        }
        w
    }

    /// `<grad, carrier_i>` for every carrier, one FFT per frame.
    fn project_gradient(&self, grad: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cells.len()];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.nfft];
        for (f, ks) in &self.frames {
            let start = f * self.hop;
            buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
            for (slot, (g, win)) in buf.iter_mut().zip(grad.iter().skip(start).zip(&self.window)) {
                *slot = Complex64::new(g * win, 0.0);
            }
            fft_in_place(&mut buf, false);
            for &k in ks {
                let b = self.cells[k] % self.bands;
                let s: Complex64 = self.phasors[k]
                    .iter()
                    .enumerate()
                    .map(|(j, ph)| ph * buf[self.first_bin[b] + j].conj())
                    .sum();
                out[k] = 2.0 * self.scale[b] * s.re;
            }
        }
        out
    }
}

/// Cells that may carry watermark: deficient, with a fully deficient guard
/// neighbourhood in time and frequency.
pub fn patchable_cells(an: &BandAnalyzer, mask: &DeficiencyMask, cfg: &WatermarkConfig) -> Vec<usize> {
    let nb = mask.bands;
    let bins = an.band_bins();
    let g = cfg.guard_bins;
    let neighbours: Vec<Vec<usize>> = (0..nb)
        .map(|b| {
            let (lo, hi) = bins[b];
            (0..nb)
                .filter(|&o| {
                    let (l2, h2) = bins[o];
                    l2 < hi + g && lo < h2 + g
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    // frames beyond the clip are unknown, so the guard may not extend past its ends
    let gf = cfg.guard_frames;
    for f in gf..mask.frames.saturating_sub(gf) {
        let (f0, f1) = (f - gf, f + gf);
        for b in 0..nb {
            let ok = (f0..=f1).all(|ff| neighbours[b].iter().all(|&bb| mask.is_deficient(ff, bb)));
            if ok {
                out.push(f * nb + b);
            }
        }
    }
    out
}

/// Everything the optimiser needs about one clip and one enrolled user.
pub struct PatchProblem<'a> {
    pub analyzer: &'a BandAnalyzer,
    pub playback: &'a Signal,
    /// Enrollment-derived channel estimate; never the ground-truth ear.
    pub ir: &'a ImpulseResponse,
    pub template: &'a Template,
    pub net: &'a NetParams,
    pub ceiling: &'a AudibilityCeiling,
    pub mask: &'a DeficiencyMask,
}

#[derive(Debug, Clone)]
pub struct PatchOutcome {
    pub patch: WatermarkPatch,
    /// Objective after each accepted iterate; entry 0 is the unpatched clip.
    pub trace: Vec<f64>,
    pub initial_score: f64,
    pub final_score: f64,
    /// True when the clip has no patchable cell.
    pub nothing_to_watermark: bool,
}

struct Objective {
    value: f64,
    grad_u: Vec<f64>,
}

impl PatchProblem<'_> {
    fn check(&self) -> Result<(), WatermarkError> {
        let frames = self.analyzer.frame_count(self.playback.len());
        let nb = self.analyzer.n_bands();
        let dims = [(self.mask.frames, self.mask.bands), (self.ceiling.frames, self.ceiling.bands)];
        if dims.iter().any(|&d| d != (frames, nb)) {
            return Err(WatermarkError::Geometry(format!("mask/ceiling do not match {frames}x{nb}")));
        }
        if self.ir.taps.sample_rate() != self.playback.sample_rate() {
            return Err(WatermarkError::Geometry("IR and playback sample rates differ".into()));
        }
        Ok(())
    }

    /// Score of the simulated (noiseless) response to `playback + w`, and its
    /// gradient with respect to every sample of `w`. The alignment lag is
    /// held fixed inside the derivative.
    fn objective(&self, w: &[f64], want_grad: bool) -> Result<Objective, WatermarkError> {
        let an = self.analyzer;
        let cfg = an.config();
        let u: Vec<f64> = self.playback.samples().iter().zip(w).map(|(a, b)| a + b).collect();
        let frames = an.frame_count(u.len());
        let nb = an.n_bands();
        if u.iter().all(|&v| v == 0.0) {
            let feats = FeatureMatrix::from_flat(frames, nb, vec![cfg.clamp_lo_db; frames * nb]);
            let e = embedding::forward(self.net, &feats)?;
            return Ok(Objective { value: self.template.vector.dot(e.as_slice()), grad_u: vec![0.0; u.len()] });
        }
        let h = self.ir.taps.samples();
        let y_full = signal::convolve_slices(&u, h);
        let lag = features::align_lag(&u, &y_full, cfg.max_lag);
        let y = features::aligned(&y_full, lag, u.len());
        let pu = an.band_powers(&u);
        let py = an.band_powers(&y);
        let data: Vec<f64> = py.iter().zip(&pu).map(|(&r, &p)| features::ratio_db(cfg, r, p)).collect();
        let feats = FeatureMatrix::from_flat(frames, nb, data);
        let tvec = self.template.vector.as_slice();
        if !want_grad {
            let e = embedding::forward(self.net, &feats)?;
            return Ok(Objective { value: self.template.vector.dot(e.as_slice()), grad_u: Vec::new() });
        }
        let (e, d_feat) = embedding::input_gradient(self.net, &feats, tvec)?;
        let mut g_pu = vec![0.0; pu.len()];
        let mut g_py = vec![0.0; py.len()];
        for i in 0..pu.len() {
            let raw = 10.0 * ((py[i] + cfg.epsilon) / (pu[i] + cfg.epsilon)).log10();
            if raw <= cfg.clamp_lo_db || raw >= cfg.clamp_hi_db {
                continue;
            }
            let k = d_feat[i] * 10.0 / LN_10;
            g_py[i] = k / (py[i] + cfg.epsilon);
            g_pu[i] = -k / (pu[i] + cfg.epsilon);
        }
        let mut grad_u = an.band_powers_adjoint(&u, &g_pu);
        let g_y = an.band_powers_adjoint(&y, &g_py);
        let mut g_full = vec![0.0; y_full.len()];
        for (n, v) in g_y.iter().enumerate() {
            if let Some(slot) = g_full.get_mut(lag + n) {
                *slot = *v;
            }
        }
        let through = signal::convolve_adjoint(&g_full, h, u.len());
        for (a, b) in grad_u.iter_mut().zip(&through) {
            *a += b;
        }
        Ok(Objective { value: self.template.vector.dot(e.as_slice()), grad_u })
    }
}

/// Per-cell power limits used by the projection: the audibility ceiling in
/// patchable territory, and additionally a leakage cap in cells where the
/// playback is audible.
fn power_limits(
    an: &BandAnalyzer,
    playback: &Signal,
    ceiling: &AudibilityCeiling,
    mask: &DeficiencyMask,
    cfg: &WatermarkConfig,
) -> Vec<f64> {
    let p = an.band_powers(playback.samples());
    let leak = 10f64.powf(cfg.leak_db / 10.0);
    (0..p.len())
        .map(|i| {
            let c = ceiling.power(i);
            if mask.cells[i] {
                c
            } else {
                c.min(p[i] * leak)
            }
        })
        .collect()
}

struct Projector<'a> {
    an: &'a BandAnalyzer,
    carriers: &'a Carriers,
    bounds: Vec<f64>,
    limits: Vec<f64>,
    len: usize,
    rounds: usize,
}

impl Projector<'_> {
    /// Box-clamp, then shrink carriers around any over-limit cell, then a
    /// global scale that makes every realised cell power exactly feasible.
    fn project(&self, g: &mut [f64]) {
        for (x, &b) in g.iter_mut().zip(&self.bounds) {
            *x = x.clamp(0.0, b);
        }
        let nb = self.an.n_bands();
        let reach = self.an.config().frame_len.div_ceil(self.an.config().hop);
        for _ in 0..self.rounds {
            let p = self.an.band_powers(&self.carriers.synth(g, self.len));
            let ratios: Vec<f64> = p.iter().zip(&self.limits).map(|(&pw, &l)| excess(pw, l)).collect();
            if ratios.iter().all(|&r| r <= 1.0) {
                return;
            }
            for (k, &cell) in self.carriers.cells.iter().enumerate() {
                if g[k] == 0.0 {
                    continue;
                }
                let (f, b) = (cell / nb, cell % nb);
                let mut worst: f64 = 1.0;
                for ff in f.saturating_sub(reach)..=(f + reach).min(p.len() / nb - 1) {
                    for bb in b.saturating_sub(3)..=(b + 3).min(nb - 1) {
                        worst = worst.max(ratios[ff * nb + bb]);
                    }
                }
                if worst > 1.0 {
                    g[k] *= 0.95 / worst.sqrt();
                }
            }
        }
        let p = self.an.band_powers(&self.carriers.synth(g, self.len));
        let worst = p.iter().zip(&self.limits).map(|(&pw, &l)| excess(pw, l)).fold(0.0, f64::max);
        if worst > 1.0 {
            let s = if worst.is_finite() { 0.999 / worst.sqrt() } else { 0.0 };
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
}

fn excess(power: f64, limit: f64) -> f64 {
    if power <= limit {
        0.0
    } else if limit > 0.0 {
        power / limit
    } else {
        f64::INFINITY
    }
}

/// Projected gradient ascent on the template score over carrier gains.
/// Starts from the full per-cell allowance; the best feasible iterate
/// (including the unpatched clip) is returned, so the final score is never
/// below the initial one.
pub fn optimize_patch(
    problem: &PatchProblem<'_>,
    cfg: &WatermarkConfig,
    seed: u64,
) -> Result<PatchOutcome, WatermarkError> {
    cfg.validate()?;
    problem.check()?;
    let an = problem.analyzer;
    let len = problem.playback.len();
    let mut patch = WatermarkPatch::zero(an, len, seed);
    let zero_w = vec![0.0; len];
    let initial = problem.objective(&zero_w, false)?.value;

    let cells: Vec<usize> = patchable_cells(an, problem.mask, cfg)
        .into_iter()
        .filter(|&i| problem.ceiling.power(i) > 0.0)
        .collect();
    if cells.is_empty() {
        return Ok(PatchOutcome {
            patch,
            trace: vec![initial],
            initial_score: initial,
            final_score: initial,
            nothing_to_watermark: true,
        });
    }
    let carriers = Carriers::build(an, seed, &cells);
    let bounds: Vec<f64> = cells.iter().map(|&i| (cfg.allowance * problem.ceiling.power(i)).sqrt()).collect();
    let projector = Projector {
        an,
        carriers: &carriers,
        bounds: bounds.clone(),
        limits: power_limits(an, problem.playback, problem.ceiling, problem.mask, cfg),
        len,
        rounds: cfg.projection_rounds,
    };

    let mut g = bounds.clone();
    projector.project(&mut g);
    let mut trace = vec![initial];
    let mut best = (initial, vec![0.0; g.len()]);
    let mut step = cfg.step;
    let mut current = problem.objective(&carriers.synth(&g, len), true)?;
    for iter in 0..=cfg.iters {
        if current.value > best.0 {
            best = (current.value, g.clone());
        }
        trace.push(current.value);
        if iter == cfg.iters {
            break;
        }
        let dg = carriers.project_gradient(&current.grad_u);
        if dg.iter().any(|v| !v.is_finite()) {
            return Err(WatermarkError::OptimizationFailed { iter });
        }
        let scaled: Vec<f64> = dg.iter().zip(&bounds).map(|(d, b)| d * b).collect();
        let peak = scaled.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak == 0.0 {
            break;
        }
        let mut cand = g.clone();
        for ((c, s), b) in cand.iter_mut().zip(&scaled).zip(&bounds) {
            *c += step * b * s / peak;
        }
        projector.project(&mut cand);
        let next = problem.objective(&carriers.synth(&cand, len), true)?;
        if next.value < current.value {
            step *= 0.5;
        }
        g = cand;
        current = next;
    }

    for (k, &cell) in cells.iter().enumerate() {
        patch.gains[cell] = best.1[k];
    }
    Ok(PatchOutcome {
        patch,
        trace,
        initial_score: initial,
        final_score: best.0,
        nothing_to_watermark: false,
    })
}

/// Enforce the power limits for `patch` on its own carriers (used after
/// reseeding gains onto fresh carriers).
pub fn reproject(
    patch: &WatermarkPatch,
    playback: &Signal,
    ceiling: &AudibilityCeiling,
    mask: &DeficiencyMask,
    cfg: &WatermarkConfig,
) -> Result<WatermarkPatch, WatermarkError> {
    let an = BandAnalyzer::new(&patch.features)?;
    if patch.signal_len != playback.len() || patch.gains.len() != ceiling.db.len() {
        return Err(WatermarkError::Geometry("patch does not match playback".into()));
    }
    let cells = patch.active_cells();
    let carriers = Carriers::build(&an, patch.seed, &cells);
    let limits = power_limits(&an, playback, ceiling, mask, cfg);
    let bounds: Vec<f64> = cells.iter().map(|&i| patch.gains[i]).collect();
    let projector = Projector { an: &an, carriers: &carriers, bounds: bounds.clone(), limits, len: playback.len(), rounds: cfg.projection_rounds };
    let mut g = bounds;
    projector.project(&mut g);
    let mut out = patch.clone();
    for (k, &cell) in cells.iter().enumerate() {
        out.gains[cell] = g[k];
    }
    Ok(out)
}

/// The unoptimised starting point of [`optimize_patch`]: every patchable cell
/// at its full allowance, projected onto the power limits.
pub fn allowance_patch(
    an: &BandAnalyzer,
    playback: &Signal,
    ceiling: &AudibilityCeiling,
    mask: &DeficiencyMask,
    cfg: &WatermarkConfig,
    seed: u64,
) -> Result<WatermarkPatch, WatermarkError> {
    cfg.validate()?;
    let frames = an.frame_count(playback.len());
    if (mask.frames, mask.bands) != (frames, an.n_bands()) || ceiling.db.len() != mask.cells.len() {
        return Err(WatermarkError::Geometry("mask/ceiling do not match playback".into()));
    }
    let mut patch = WatermarkPatch::zero(an, playback.len(), seed);
    let cells: Vec<usize> = patchable_cells(an, mask, cfg)
        .into_iter()
        .filter(|&i| ceiling.power(i) > 0.0)
        .collect();
    if cells.is_empty() {
        return Ok(patch);
    }
    let carriers = Carriers::build(an, seed, &cells);
    let bounds: Vec<f64> = cells.iter().map(|&i| (cfg.allowance * ceiling.power(i)).sqrt()).collect();
    let projector = Projector {
        an,
        carriers: &carriers,
        bounds: bounds.clone(),
        limits: power_limits(an, playback, ceiling, mask, cfg),
        len: playback.len(),
        rounds: cfg.projection_rounds,
    };
    let mut g = bounds;
    projector.project(&mut g);
    for (k, &cell) in cells.iter().enumerate() {
        patch.gains[cell] = g[k];
    }
    Ok(patch)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipReport {
    pub clipped: usize,
    pub total: usize,
}

/// `playback + watermark`, clipped to [-1, 1].
pub fn apply_patch(playback: &Signal, patch: &WatermarkPatch, cfg: &WatermarkConfig) -> Result<(Signal, ClipReport), WatermarkError> {
    if patch.signal_len != playback.len() || patch.features.sample_rate != playback.sample_rate() {
        return Err(WatermarkError::Geometry(format!(
            "patch for {} samples at {} Hz, playback {} samples at {} Hz",
            patch.signal_len,
            patch.features.sample_rate,
            playback.len(),
            playback.sample_rate()
        )));
    }
    if patch.is_zero() {
        return Ok((playback.clone(), ClipReport { clipped: 0, total: playback.len() }));
    }
    let w = patch.render()?;
    let mut clipped = 0;
    let out: Vec<f64> = playback
        .samples()
        .iter()
        .zip(&w)
        .map(|(x, v)| {
            let s = x + v;
            if s.abs() > 1.0 {
                clipped += 1;
            }
            s.clamp(-1.0, 1.0)
        })
        .collect();
    let total = out.len();
    if clipped > 0 {
        log::warn!("watermark clipped {clipped} of {total} samples");
    }
    if clipped as f64 > cfg.max_clip_fraction * total as f64 {
        return Err(WatermarkError::PatchTooHot { clipped, total });
    }
    Ok((Signal::new(out, playback.sample_rate())?, ClipReport { clipped, total }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub cells: usize,
    pub violations: usize,
    /// Largest realised power minus ceiling, dB (negative when feasible).
    pub worst_margin_db: f64,
}

/// Exact check of realised watermark power against the ceiling in every cell.
pub fn audit_patch(patch: &WatermarkPatch, ceiling: &AudibilityCeiling) -> Result<AuditReport, WatermarkError> {
    if patch.gains.len() != ceiling.db.len() {
        return Err(WatermarkError::Geometry("patch and ceiling differ in size".into()));
    }
    let an = BandAnalyzer::new(&patch.features)?;
    let p = an.band_powers(&patch.render()?);
    let mut violations = 0;
    let mut worst = f64::NEG_INFINITY;
    for (i, &pw) in p.iter().enumerate() {
        let limit = ceiling.power(i);
        if pw > limit {
            violations += 1;
        }
        if pw > 0.0 {
            worst = worst.max(psycho::power_to_dbfs(pw) - ceiling.db[i]);
        }
    }
    Ok(AuditReport { cells: p.len(), violations, worst_margin_db: worst })
}

/// Normalised correlation between a recorded response and the expected
/// echo of the patch (`watermark * ir`) over samples where the playback has
/// been silent for at least the IR length, maximised over alignment lags.
/// `None` when the clip offers no such samples or the patch is empty.
pub fn binding_score(
    response: &Signal,
    playback: &Signal,
    watermark: &[f64],
    ir: &ImpulseResponse,
    max_lag: usize,
) -> Option<f64> {
    let x = playback.samples();
    let h = ir.taps.samples();
    let expected = signal::convolve_slices(watermark, h);
    let n = x.len();
    // quiet[i]: playback exactly silent over [i - len(h), i]
    let mut quiet = vec![false; n];
    let mut run = 0usize;
    for i in 0..n {
        run = if x[i] == 0.0 { run + 1 } else { 0 };
        quiet[i] = run > h.len();
    }
    let idx: Vec<usize> = (0..n).filter(|&i| quiet[i]).collect();
    let e_energy: f64 = idx.iter().map(|&i| expected[i] * expected[i]).sum();
    if idx.len() < 64 || !(e_energy > 0.0) {
        return None;
    }
    let r = response.samples();
    // correlations for every lag at once: c[n - 1 + lag] = sum_i a[i] r[i + lag]
    let masked: Vec<f64> = (0..n).rev().map(|i| if quiet[i] { expected[i] } else { 0.0 }).collect();
    let ones: Vec<f64> = (0..n).rev().map(|i| if quiet[i] { 1.0 } else { 0.0 }).collect();
    let r2: Vec<f64> = r.iter().map(|v| v * v).collect();
    let num = signal::convolve_slices(r, &masked);
    let den = signal::convolve_slices(&r2, &ones);
    let floor = 1e-12 * r2.iter().sum::<f64>();
    let mut best = f64::NEG_INFINITY;
    for lag in 0..=max_lag {
        let (Some(&a), Some(&r_energy)) = (num.get(n - 1 + lag), den.get(n - 1 + lag)) else { break };
        if r_energy > floor && r_energy > 0.0 {
            best = best.max(a / (r_energy * e_energy).sqrt());
        }
    }
    best.is_finite().then_some(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ear::{realize_ir, EarProfile, IrOrigin, Resonator};
    use crate::embedding::{forward, init_net, ArchConfig};
    use crate::features::{deficiency_mask_with, rtf_features_with};
    use crate::matcher::make_template;

    fn profile() -> EarProfile {
        EarProfile {
            user_id: "u1".into(),
            resonators: vec![
                Resonator { center_hz: 2500.0, q_factor: 8.0, gain: 0.15 },
                Resonator { center_hz: 5200.0, q_factor: 12.0, gain: 0.1 },
            ],
            direct_gain: 0.8,
            direct_delay: 4,
        }
    }

    fn ir() -> ImpulseResponse {
        let mut ir = realize_ir(&profile(), 16000, 256).unwrap();
        ir.origin = IrOrigin::Estimated;
        ir
    }

    /// Tone burst in the middle third, silence elsewhere.
    fn clip() -> Signal {
        let n = 9600;
        let s = (0..n)
            .map(|i| {
                if (3200..6400).contains(&i) {
                    0.3 * (std::f64::consts::TAU * 440.0 * i as f64 / 16000.0).sin()
                } else {
                    0.0
                }
            })
            .collect();
        Signal::new(s, 16000).unwrap()
    }

    struct Fixture {
        an: BandAnalyzer,
        playback: Signal,
        ir: ImpulseResponse,
        template: Template,
        net: NetParams,
        ceiling: AudibilityCeiling,
        mask: DeficiencyMask,
    }

    fn fixture(playback: Signal) -> Fixture {
        let an = BandAnalyzer::new(&FeatureConfig::default()).unwrap();
        let net = init_net(3, &ArchConfig::with_classes(2)).unwrap();
        let ir = ir();
        // template: the embedding of a full-band excitation through the same channel
        let noise = signal::white_noise(9600, 0.1, 4, 16000);
        let resp = signal::convolve(&noise, &ir.taps).unwrap();
        let e = forward(&net, &rtf_features_with(&an, &noise, &resp).unwrap()).unwrap();
        let template = make_template(&[e]).unwrap();
        let mask = deficiency_mask_with(&an, playback.samples());
        let ceiling = compute_ceiling(&an, &playback, &mask, 13.0).unwrap();
        Fixture { an, playback, ir, template, net, ceiling, mask }
    }

    impl Fixture {
        fn problem(&self) -> PatchProblem<'_> {
            PatchProblem {
                analyzer: &self.an,
                playback: &self.playback,
                ir: &self.ir,
                template: &self.template,
                net: &self.net,
                ceiling: &self.ceiling,
                mask: &self.mask,
            }
        }
    }

    #[test]
    fn ceiling_rules() {
        let an = BandAnalyzer::new(&FeatureConfig::default()).unwrap();
        let silent = Signal::zeros(4000, 16000);
        let mask = deficiency_mask_with(&an, silent.samples());
        let c = compute_ceiling(&an, &silent, &mask, 13.0).unwrap();
        let quiet = an.quiet_thresholds();
        for f in 0..c.frames {
            for b in 0..c.bands {
                assert!((c.get(f, b) - psycho::power_to_dbfs(quiet[b])).abs() < 1e-12);
            }
        }
        // a -10 dBFS band gives a -23 dBFS ceiling
        let tone = Signal::new(
            (0..4000).map(|i| (std::f64::consts::TAU * 1000.0 * i as f64 / 16000.0).sin()).collect(),
            16000,
        )
        .unwrap();
        let p = an.band_powers(tone.samples());
        let (f, b) = (5, (0..40).max_by(|&x, &y| p[5 * 40 + x].total_cmp(&p[5 * 40 + y])).unwrap());
        let gain = (psycho::dbfs_to_power(-10.0) / p[f * 40 + b]).sqrt();
        let tone = tone.scaled(gain);
        let mask = deficiency_mask_with(&an, tone.samples());
        let c = compute_ceiling(&an, &tone, &mask, 13.0).unwrap();
        assert!((c.get(f, b) + 23.0).abs() < 1e-9, "{}", c.get(f, b));
    }

    #[test]
    fn ceiling_monotone_in_playback_power() {
        let an = BandAnalyzer::new(&FeatureConfig::default()).unwrap();
        for seed in 0..5 {
            let x = signal::white_noise(3000, 0.01, seed, 16000);
            let mask = deficiency_mask_with(&an, x.samples());
            let louder = x.scaled(1.7);
            let mask2 = deficiency_mask_with(&an, louder.samples());
            let a = compute_ceiling(&an, &x, &mask, 13.0).unwrap();
            let b = compute_ceiling(&an, &louder, &mask2, 13.0).unwrap();
            assert!(a.db.iter().zip(&b.db).all(|(x, y)| y >= x));
        }
    }

    #[test]
    fn carrier_gradient_is_adjoint_of_synthesis() {
        let fx = fixture(clip());
        let cells = patchable_cells(&fx.an, &fx.mask, &WatermarkConfig::default());
        let carriers = Carriers::build(&fx.an, 3, &cells);
        let len = fx.playback.len();
        let mut r = rng::seeded(5);
        let grad: Vec<f64> = (0..len).map(|_| r.random_range(-1.0..1.0)).collect();
        let dg = carriers.project_gradient(&grad);
        for k in [0, cells.len() / 2, cells.len() - 1] {
            let mut e = vec![0.0; cells.len()];
            e[k] = 1.0;
            let direct: f64 = carriers.synth(&e, len).iter().zip(&grad).map(|(a, b)| a * b).sum();
            assert!((direct - dg[k]).abs() <= 1e-9 * direct.abs().max(1.0), "{direct} vs {}", dg[k]);
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let fx = fixture(clip());
        let prob = fx.problem();
        let cfg = WatermarkConfig::default();
        let cells = patchable_cells(&fx.an, &fx.mask, &cfg);
        assert!(!cells.is_empty());
        let carriers = Carriers::build(&fx.an, 7, &cells);
        let g: Vec<f64> = cells.iter().map(|&i| (0.5 * fx.ceiling.power(i)).sqrt()).collect();
        let len = fx.playback.len();
        let obj = prob.objective(&carriers.synth(&g, len), true).unwrap();
        let dg = carriers.project_gradient(&obj.grad_u);
        // directional derivative along a fixed random direction
        let mut r = rng::seeded(1);
        let dir: Vec<f64> = g.iter().map(|gi| gi * r.random_range(-1.0..1.0)).collect();
        let analytic: f64 = dg.iter().zip(&dir).map(|(a, b)| a * b).sum();
        // small enough to stay clear of ReLU and clamp kinks
        let h = 1e-4;
        let at = |t: f64| {
            let gt: Vec<f64> = g.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
            prob.objective(&carriers.synth(&gt, len), false).unwrap().value
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        assert!(
            (analytic - numeric).abs() <= 1e-4 * numeric.abs().max(1e-6),
            "analytic {analytic} numeric {numeric}"
        );
    }

    #[test]
    fn optimizer_improves_and_respects_ceiling() {
        let fx = fixture(clip());
        let cfg = WatermarkConfig::default();
        let out = optimize_patch(&fx.problem(), &cfg, 11).unwrap();
        assert!(!out.nothing_to_watermark);
        assert!(out.final_score > out.initial_score, "{:?}", out.trace);
        let audit = audit_patch(&out.patch, &fx.ceiling).unwrap();
        assert_eq!(audit.violations, 0, "{audit:?}");
        assert!(out.patch.active_cells().iter().all(|&i| fx.mask.cells[i]));
    }

    #[test]
    fn degenerate_ceiling_gives_zero_patch() {
        let mut fx = fixture(clip());
        fx.ceiling.db.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        let out = optimize_patch(&fx.problem(), &WatermarkConfig::default(), 1).unwrap();
        assert!(out.patch.is_zero());
        assert_eq!(out.final_score, out.initial_score);
    }

    #[test]
    fn loud_clip_has_nothing_to_watermark() {
        let x = signal::white_noise(6400, 0.3, 2, 16000);
        let fx = fixture(x);
        let out = optimize_patch(&fx.problem(), &WatermarkConfig::default(), 1).unwrap();
        assert!(out.nothing_to_watermark && out.patch.is_zero());
    }

    #[test]
    fn apply_zero_patch_is_identity() {
        let fx = fixture(clip());
        let patch = WatermarkPatch::zero(&fx.an, fx.playback.len(), 3);
        let (y, rep) = apply_patch(&fx.playback, &patch, &WatermarkConfig::default()).unwrap();
        assert_eq!(y, fx.playback);
        assert_eq!(rep.clipped, 0);
    }

    #[test]
    fn energy_accounting_and_untouched_cells() {
        let fx = fixture(clip());
        let cfg = WatermarkConfig::default();
        let out = optimize_patch(&fx.problem(), &cfg, 5).unwrap();
        let (y, _) = apply_patch(&fx.playback, &out.patch, &cfg).unwrap();
        let diff: Vec<f64> = y.samples().iter().zip(fx.playback.samples()).map(|(a, b)| a - b).collect();
        // direct energy of the part inside the analysed range against the
        // overlap-added cell powers
        // (the summed bins k_lo..k_hi each stand for one bin width of spectrum)
        let df = 16000.0 / fx.an.config().nfft as f64;
        let k_lo = fx.an.band_bins()[0].0 as f64;
        let k_hi = fx.an.band_bins().last().unwrap().1 as f64;
        let in_range = crate::sounding::band_limit(&diff, 16000, (k_lo - 0.5) * df, (k_hi - 0.5) * df);
        let energy: f64 = in_range.iter().map(|v| v * v).sum();
        let cell_sum: f64 = fx.an.band_powers(&diff).iter().sum();
        let hop = fx.an.config().hop as f64;
        assert!((energy - hop * cell_sum).abs() <= 0.05 * energy, "{energy} vs {}", hop * cell_sum);
        // cells with audible playback see less than -60 dB of change
        let pd = fx.an.band_powers(&diff);
        let px = fx.an.band_powers(fx.playback.samples());
        for i in 0..px.len() {
            if !fx.mask.cells[i] {
                assert!(pd[i] <= px[i] * 1e-6, "cell {i}: {} vs {}", pd[i], px[i]);
            }
        }
    }

    #[test]
    fn patch_json_round_trip_regenerates_signal() {
        let fx = fixture(clip());
        let out = optimize_patch(&fx.problem(), &WatermarkConfig { iters: 2, ..WatermarkConfig::default() }, 9).unwrap();
        let back = WatermarkPatch::from_json(&out.patch.to_json()).unwrap();
        assert_eq!(back.render().unwrap(), out.patch.render().unwrap());
    }

    #[test]
    fn too_hot_patch_is_rejected() {
        let fx = fixture(clip());
        let mut patch = WatermarkPatch::zero(&fx.an, fx.playback.len(), 3);
        let cells = patchable_cells(&fx.an, &fx.mask, &WatermarkConfig::default());
        for &c in &cells {
            patch.gains[c] = 5.0;
        }
        assert!(matches!(
            apply_patch(&fx.playback, &patch, &WatermarkConfig::default()),
            Err(WatermarkError::PatchTooHot { .. })
        ));
    }

    #[test]
    fn responses_bind_to_their_own_seed() {
        let fx = fixture(clip());
        let cfg = WatermarkConfig { iters: 0, ..WatermarkConfig::default() };
        let a = optimize_patch(&fx.problem(), &cfg, 100).unwrap().patch;
        let b = a.reseeded(200);
        let b = reproject(&b, &fx.playback, &fx.ceiling, &fx.mask, &cfg).unwrap();
        let truth = realize_ir(&profile(), 16000, 512).unwrap();
        let respond = |p: &WatermarkPatch| {
            let (u, _) = apply_patch(&fx.playback, p, &cfg).unwrap();
            crate::ear::acquire_through(&truth, &u, 1e-5, 3).unwrap()
        };
        let wa = a.render().unwrap();
        let own = binding_score(&respond(&a), &fx.playback, &wa, &fx.ir, 64).unwrap();
        let other = binding_score(&respond(&b), &fx.playback, &wa, &fx.ir, 64).unwrap();
        assert!(own > cfg.binding_threshold, "own {own}");
        assert!(other < cfg.binding_threshold, "other {other}");
    }
}
