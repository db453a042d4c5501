use super::{EmbedError, Embedding};

#[derive(Debug, Clone, PartialEq)]
pub struct AamOutput {
    pub loss: f64,
    pub logits: Vec<f64>,
    /// dLoss/dEmbedding
    pub grad_embedding: Vec<f64>,
    /// dLoss/dClassWeights, `[n_classes][dim]`
    pub grad_class: Vec<f64>,
}

/// Additive angular margin softmax. `class_w` is `[n_classes][dim]` and is
/// used as given (rows are expected to be unit norm).
pub fn aam_loss(e: &Embedding, label: usize, class_w: &[f64], s: f64, m: f64) -> Result<AamOutput, EmbedError> {
    let dim = e.dim();
    if dim == 0 || class_w.len() % dim != 0 {
        return Err(EmbedError::DimMismatch(class_w.len(), dim));
    }
    let n = class_w.len() / dim;
    if label >= n {
        return Err(EmbedError::LabelOutOfRange { label, classes: n });
    }
    if !(s > 0.0) || !(0.0..std::f64::consts::FRAC_PI_2).contains(&m) {
        return Err(EmbedError::Hyper(format!("need s > 0 and 0 <= m < pi/2, got s={s} m={m}")));
    }
    let x = e.as_slice();
    let cos: Vec<f64> = class_w.chunks(dim).map(|w| e.dot(w)).collect();
    let c = cos[label];
    let sin = (1.0 - c * c).max(0.0).sqrt();
    let (cm, sm) = (m.cos(), m.sin());
    let phi = c * cm - sin * sm;
    // d phi / d cos; at sin = 0 the one-sided limit diverges, fall back to cos m
    let dphi = if sin > 1e-12 { cm + sm * c / sin } else { cm };

    let logits: Vec<f64> = cos
        .iter()
        .enumerate()
        .map(|(j, &cj)| if j == label { s * phi } else { s * cj })
        .collect();
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = -(logits[label] - mx - z.ln());

    let mut grad_embedding = vec![0.0; dim];
    let mut grad_class = vec![0.0; class_w.len()];
    for j in 0..n {
        let p = exps[j] / z;
        let dcos = if j == label { s * (p - 1.0) * dphi } else { s * p };
        let w = &class_w[j * dim..(j + 1) * dim];
        for k in 0..dim {
            grad_embedding[k] += dcos * w[k];
            grad_class[j * dim + k] = dcos * x[k];
        }
    }
    Ok(AamOutput { loss, logits, grad_embedding, grad_class })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_two_classes() {
        let e = Embedding::from_unit(vec![1.0, 0.0]).unwrap();
        let w = [1.0, 0.0, 0.0, 1.0];
        let out = aam_loss(&e, 0, &w, 1.0, 0.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((out.loss - expected).abs() < 1e-12);
        assert!((out.loss - 0.3133).abs() < 1e-4);
        let with_margin = aam_loss(&e, 0, &w, 1.0, 0.3).unwrap();
        assert!(with_margin.loss > out.loss);
    }

    #[test]
    fn matches_scalar_formula() {
        // independent evaluation via explicit angles
        let e = Embedding::normalized(vec![0.3, -0.5, 0.7, 0.2]).unwrap();
        let rows = [[0.1, 0.9, -0.2, 0.3], [0.6, -0.1, 0.5, 0.2], [-0.4, 0.2, 0.1, 0.8]];
        let mut w = Vec::new();
        for r in rows {
            let n = r.iter().map(|v: &f64| v * v).sum::<f64>().sqrt();
            w.extend(r.iter().map(|v| v / n));
        }
        let (s, m, label) = (8.0, 0.25, 1);
        let out = aam_loss(&e, label, &w, s, m).unwrap();
        let cos = |j: usize| e.dot(&w[j * 4..j * 4 + 4]);
        let target = s * (cos(label).acos() + m).cos();
        let denom: f64 = (0..3).map(|j| if j == label { target.exp() } else { (s * cos(j)).exp() }).sum();
        let expected = -(target.exp() / denom).ln();
        assert!((out.loss - expected).abs() < 1e-12, "{} vs {expected}", out.loss);
    }

    #[test]
    fn rejects_bad_arguments() {
        let e = Embedding::from_unit(vec![1.0, 0.0]).unwrap();
        let w = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(
            aam_loss(&e, 2, &w, 1.0, 0.0).unwrap_err(),
            EmbedError::LabelOutOfRange { label: 2, classes: 2 }
        );
        assert!(aam_loss(&e, 0, &w, 0.0, 0.0).is_err());
        assert!(aam_loss(&e, 0, &w, 1.0, 1.6).is_err());
    }

    #[test]
    fn gradient_wrt_embedding() {
        let base = vec![0.3, -0.5, 0.7, 0.2];
        let w = [0.1, 0.9, -0.2, 0.3, 0.6, -0.1, 0.5, 0.2, -0.4, 0.2, 0.1, 0.8];
        // loss as a function of the raw (not renormalised) vector
        let f = |v: &[f64]| {
            let e = Embedding(v.to_vec());
            aam_loss(&e, 2, &w, 5.0, 0.2).unwrap().loss
        };
        let out = aam_loss(&Embedding(base.clone()), 2, &w, 5.0, 0.2).unwrap();
        for i in 0..4 {
            let mut a = base.clone();
            a[i] += 1e-6;
            let mut b = base.clone();
            b[i] -= 1e-6;
            let num = (f(&a) - f(&b)) / 2e-6;
            assert!((num - out.grad_embedding[i]).abs() < 1e-6, "{num} vs {}", out.grad_embedding[i]);
        }
    }
}
