//! Templates, cosine scoring and error-rate metrics.
//!
//! Convention: a probe is accepted when `score >= threshold`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::Embedding;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MatchError {
    #[error("cannot build a template from zero embeddings")]
    Empty,
    #[error("embeddings cancel out (mean norm {norm:.3e})")]
    Degenerate { norm: f64 },
    #[error("dimension mismatch: template {template}, probe {probe}")]
    DimMismatch { template: usize, probe: usize },
    #[error("need non-empty genuine and imposter score sets")]
    NoScores,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateOrigin {
    ChirpEnrollment,
    PlaybackUpdate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub vector: Embedding,
    pub n_enrolled: usize,
    pub created_from: TemplateOrigin,
}

impl Template {
    pub fn dim(&self) -> usize {
        self.vector.dim()
    }
}

/// Mean of the embeddings, renormalised.
pub fn make_template(embeddings: &[Embedding]) -> Result<Template, MatchError> {
    make_template_with(embeddings, TemplateOrigin::ChirpEnrollment)
}

pub fn make_template_with(embeddings: &[Embedding], origin: TemplateOrigin) -> Result<Template, MatchError> {
    let first = embeddings.first().ok_or(MatchError::Empty)?;
    let dim = first.dim();
    if embeddings.len() == 1 {
        return Ok(Template { vector: first.clone(), n_enrolled: 1, created_from: origin });
    }
    let mut mean = vec![0.0; dim];
    for e in embeddings {
        if e.dim() != dim {
            return Err(MatchError::DimMismatch { template: dim, probe: e.dim() });
        }
        for (m, v) in mean.iter_mut().zip(e.as_slice()) {
            *m += v;
        }
    }
    let n = embeddings.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-6 {
        return Err(MatchError::Degenerate { norm });
    }
    let vector = Embedding::normalized(mean).map_err(|_| MatchError::Degenerate { norm })?;
    Ok(Template { vector, n_enrolled: embeddings.len(), created_from: origin })
}

pub fn score(template: &Template, probe: &Embedding) -> Result<f64, MatchError> {
    if template.dim() != probe.dim() {
        return Err(MatchError::DimMismatch { template: template.dim(), probe: probe.dim() });
    }
    Ok(template.vector.dot(probe.as_slice()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub far: f64,
    pub frr: f64,
    pub threshold: f64,
}

fn rates(genuine: &[f64], imposter: &[f64], t: f64) -> (f64, f64) {
    let far = imposter.iter().filter(|&&s| s >= t).count() as f64 / imposter.len() as f64;
    let frr = genuine.iter().filter(|&&s| s < t).count() as f64 / genuine.len() as f64;
    (far, frr)
}

fn distinct_sorted(genuine: &[f64], imposter: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = genuine.iter().chain(imposter).copied().filter(|s| s.is_finite()).collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    all
}

/// One point per distinct score (ascending threshold) plus a final point
/// just above the maximum where nothing is accepted.
pub fn roc_points(genuine: &[f64], imposter: &[f64]) -> Result<Vec<RocPoint>, MatchError> {
    if genuine.is_empty() || imposter.is_empty() {
        return Err(MatchError::NoScores);
    }
    let thresholds = distinct_sorted(genuine, imposter);
    let mut pts: Vec<RocPoint> = thresholds
        .iter()
        .map(|&t| {
            let (far, frr) = rates(genuine, imposter, t);
            RocPoint { far, frr, threshold: t }
        })
        .collect();
    let top = thresholds.last().copied().unwrap_or(0.0);
    pts.push(RocPoint { far: 0.0, frr: 1.0, threshold: top + top.abs().max(1.0) * 1e-9 });
    Ok(pts)
}

/// Equal error rate and its threshold, linearly interpolated between the
/// two sweep points where FRR - FAR changes sign.
pub fn eer(genuine: &[f64], imposter: &[f64]) -> Result<(f64, f64), MatchError> {
    let pts = roc_points(genuine, imposter)?;
    let i = pts.iter().position(|p| p.frr >= p.far).expect("last point has FRR 1 >= FAR 0");
    if i == 0 {
        let p = pts[0];
        return Ok(((p.far + p.frr) / 2.0, p.threshold));
    }
    let (a, b) = (pts[i - 1], pts[i]);
    let da = a.frr - a.far;
    let db = b.frr - b.far;
    let lam = -da / (db - da);
    let far = a.far + lam * (b.far - a.far);
    let frr = a.frr + lam * (b.frr - a.frr);
    Ok(((far + frr) / 2.0, a.threshold + lam * (b.threshold - a.threshold)))
}

/// Smallest swept threshold whose FAR does not exceed `max_far`.
pub fn threshold_at_far(genuine: &[f64], imposter: &[f64], max_far: f64) -> Result<f64, MatchError> {
    let pts = roc_points(genuine, imposter)?;
    Ok(pts.iter().find(|p| p.far <= max_far).map(|p| p.threshold).expect("last point has FAR 0"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub eer: f64,
    pub threshold: f64,
    pub n_genuine: usize,
    pub n_imposter: usize,
}

pub fn summarize(genuine: &[f64], imposter: &[f64]) -> Result<MetricsSummary, MatchError> {
    let (eer, threshold) = eer(genuine, imposter)?;
    Ok(MetricsSummary { eer, threshold, n_genuine: genuine.len(), n_imposter: imposter.len() })
}

pub fn write_roc_csv(path: &Path, points: &[RocPoint]) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "threshold,far,frr")?;
    for p in points {
        writeln!(f, "{},{},{}", p.threshold, p.far, p.frr)?;
    }
    f.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f64]) -> Embedding {
        Embedding::normalized(v.to_vec()).unwrap()
    }

    #[test]
    fn templates() {
        let e = unit(&[0.2, 0.5, -0.1]);
        let t = make_template(&[e.clone()]).unwrap();
        assert_eq!(t.vector, e);
        assert_eq!(t.n_enrolled, 1);
        let t2 = make_template(&[e.clone(), e.clone()]).unwrap();
        for (a, b) in t2.vector.as_slice().iter().zip(e.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
        let neg = unit(&[-0.2, -0.5, 0.1]);
        assert!(matches!(make_template(&[e, neg]), Err(MatchError::Degenerate { .. })));
        assert_eq!(make_template(&[]), Err(MatchError::Empty));
    }

    #[test]
    fn scores() {
        let t = make_template(&[unit(&[1.0, 0.0])]).unwrap();
        assert_eq!(score(&t, &unit(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(score(&t, &unit(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(score(&t, &unit(&[-1.0, 0.0])).unwrap(), -1.0);
        assert_eq!(
            score(&t, &unit(&[1.0, 0.0, 0.0])),
            Err(MatchError::DimMismatch { template: 2, probe: 3 })
        );
    }

    #[test]
    fn rotation_invariance() {
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = |v: &[f64]| unit(&[c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]);
        let a = [0.3, 0.4, 0.5];
        let b = [-0.2, 0.9, 0.1];
        let s1 = score(&make_template(&[unit(&a)]).unwrap(), &unit(&b)).unwrap();
        let s2 = score(&make_template(&[rot(&a)]).unwrap(), &rot(&b)).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn eer_extremes() {
        assert_eq!(eer(&[0.9, 0.8], &[0.1, 0.2]).unwrap().0, 0.0);
        let same = [0.1, 0.4, 0.4, 0.7];
        assert!((eer(&same, &same).unwrap().0 - 0.5).abs() < 1e-12);
        assert_eq!(eer(&[], &[0.1]), Err(MatchError::NoScores));
    }

    /// Brute-force oracle: evaluate (FAR, FRR) at each candidate threshold,
    /// locate the sign change of FRR - FAR and intersect the two segments.
    fn oracle(gen: &[f64], imp: &[f64]) -> (f64, f64) {
        let mut cands: Vec<f64> = gen.iter().chain(imp).copied().collect();
        cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
        cands.dedup();
        let at = |t: f64| {
            let far = imp.iter().filter(|&&s| s >= t).count() as f64 / imp.len() as f64;
            let frr = gen.iter().filter(|&&s| s < t).count() as f64 / gen.len() as f64;
            (far, frr)
        };
        for w in cands.windows(2) {
            let (fa0, fr0) = at(w[0]);
            let (fa1, fr1) = at(w[1]);
            if fr0 < fa0 && fr1 >= fa1 {
                // solve fa0 + u (fa1 - fa0) = fr0 + u (fr1 - fr0)
                let u = (fa0 - fr0) / ((fa0 - fr0) - (fa1 - fr1));
                return (fa0 + u * (fa1 - fa0), w[0] + u * (w[1] - w[0]));
            }
        }
        unreachable!()
    }

    #[test]
    fn eer_matches_sweep_oracle() {
        let gen = [0.9, 0.8, 0.7];
        let imp = [0.75, 0.6];
        let (e, t) = eer(&gen, &imp).unwrap();
        let (oe, ot) = oracle(&gen, &imp);
        assert!((e - oe).abs() < 1e-12 && (t - ot).abs() < 1e-12);
        assert!((e - 1.0 / 3.0).abs() < 1e-12);
        assert!((t - (0.75 + 0.05 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn roc_is_monotone_with_end_points() {
        let gen = [0.9, 0.85, 0.3, 0.7, 0.7];
        let imp = [0.2, 0.75, 0.1, 0.3];
        let pts = roc_points(&gen, &imp).unwrap();
        assert_eq!((pts[0].far, pts[0].frr), (1.0, 0.0));
        let last = pts.last().unwrap();
        assert_eq!((last.far, last.frr), (0.0, 1.0));
        for w in pts.windows(2) {
            assert!(w[1].threshold > w[0].threshold);
            assert!(w[1].far <= w[0].far && w[1].frr >= w[0].frr);
        }
        // 7 distinct scores plus the point above the maximum
        assert_eq!(pts.len(), 7 + 1);
    }

    #[test]
    fn csv_and_far_threshold() {
        let gen = [0.9, 0.8, 0.7];
        let imp = [0.75, 0.6];
        assert_eq!(threshold_at_far(&gen, &imp, 0.0).unwrap(), 0.8);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("roc.csv");
        write_roc_csv(&p, &roc_points(&gen, &imp).unwrap()).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("threshold,far,frr\n0.6,1,0\n"));
        let s = summarize(&gen, &imp).unwrap();
        assert_eq!((s.n_genuine, s.n_imposter), (3, 2));
    }
}
