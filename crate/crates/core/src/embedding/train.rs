use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{backward, init_net, ArchConfig, EmbedError, NetParams, ParamSet};
use crate::features::FeatureMatrix;
use crate::rng;

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub features: FeatureMatrix,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch: usize,
    pub scale: f64,
    pub margin: f64,
    /// Random crop length in frames per sample and epoch; 0 uses whole inputs.
    pub crop_frames: usize,
    /// Global L2 bound on each batch gradient; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { lr: 0.05, momentum: 0.9, epochs: 30, batch: 16, scale: 30.0, margin: 0.2, crop_frames: 48, clip_norm: 5.0 }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.batch == 0 {
            return Err(EmbedError::Hyper("need lr > 0, 0 <= momentum < 1, batch > 0".into()));
        }
        if !(self.scale > 0.0) || !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(EmbedError::Hyper("need scale > 0 and 0 <= margin < pi/2".into()));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(EmbedError::Hyper("need clip_norm >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetParams,
    /// Mean training loss of each epoch.
    pub loss_trace: Vec<f64>,
}

/// Momentum SGD over seeded shuffles. Single-threaded so the batch order,
/// and therefore the result, depends only on `seed` and the data.
pub fn train(dataset: &[TrainSample], arch: &ArchConfig, hyper: &TrainHyper, seed: u64) -> Result<TrainOutcome, EmbedError> {
    hyper.validate()?;
    let n_users = dataset.iter().map(|s| s.label).max().map_or(0, |m| m + 1);
    if n_users < 2 || dataset.iter().map(|s| s.label).collect::<std::collections::BTreeSet<_>>().len() < 2 {
        return Err(EmbedError::Hyper("training needs at least two users".into()));
    }
    if n_users > arch.n_classes {
        return Err(EmbedError::LabelOutOfRange { label: n_users - 1, classes: arch.n_classes });
    }
    let min = arch.min_frames().max(hyper.crop_frames.min(arch.min_frames()));
    if let Some(s) = dataset.iter().find(|s| s.features.frames < min) {
        return Err(EmbedError::ShortInput { frames: s.features.frames, min });
    }

    let mut params = init_net(rng::derive(seed, &[rng::label("init")]), arch)?;
    let mut velocity = ParamSet::zeros(arch);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_trace = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        let mut r = rng::seeded(rng::derive(seed, &[rng::label("epoch"), epoch as u64]));
        order.shuffle(&mut r);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(hyper.batch) {
            let mut grad = ParamSet::zeros(arch);
            for &i in batch {
                let sample = &dataset[i];
                let f = &sample.features;
                let feats = if hyper.crop_frames > 0 && f.frames > hyper.crop_frames {
                    let start = r.random_range(0..=f.frames - hyper.crop_frames);
                    f.crop(start, hyper.crop_frames)
                } else {
                    f.clone()
                };
                let (loss, g) = backward(&params, &feats, sample.label, hyper.scale, hyper.margin)?;
                if !loss.is_finite() || !g.all_finite() {
                    return Err(EmbedError::Diverged { epoch });
                }
                epoch_loss += loss;
                grad.axpy(1.0, &g);
            }
            grad.scale(1.0 / batch.len() as f64);
            let norm = grad.norm();
            if hyper.clip_norm > 0.0 && norm > hyper.clip_norm {
                grad.scale(hyper.clip_norm / norm);
            }
            velocity.scale(hyper.momentum);
            velocity.axpy(1.0, &grad);
            params.weights.axpy(-hyper.lr, &velocity);
            params.renormalize_classes();
            if !params.weights.all_finite() {
                return Err(EmbedError::Diverged { epoch });
            }
        }
        let mean = epoch_loss / dataset.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.4}");
        loss_trace.push(mean);
    }
    Ok(TrainOutcome { params, loss_trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n_per_user: usize, seed: u64) -> Vec<TrainSample> {
        // user 0 energy in low bands, user 1 in high bands, small noise
        let mut r = rng::seeded(seed);
        let mut out = Vec::new();
        for label in 0..2 {
            for _ in 0..n_per_user {
                let frames = 20;
                let data = (0..frames * 40)
                    .map(|i| {
                        let b = i % 40;
                        let on = if label == 0 { b < 20 } else { b >= 20 };
                        (if on { 10.0 } else { -10.0 }) + r.random_range(-2.0..2.0)
                    })
                    .collect();
                out.push(TrainSample { features: FeatureMatrix::from_flat(frames, 40, data), label });
            }
        }
        out
    }

    #[test]
    fn separable_toy_converges() {
        let data = toy(8, 1);
        let arch = ArchConfig::with_classes(2);
        let hyper = TrainHyper { epochs: 15, batch: 4, crop_frames: 0, ..TrainHyper::default() };
        for seed in [1, 2, 3] {
            let out = train(&data, &arch, &hyper, seed).unwrap();
            let first = out.loss_trace[0];
            let last = *out.loss_trace.last().unwrap();
            assert!(last < 0.1 * first, "seed {seed}: {:?}", out.loss_trace);
            let e = crate::embedding::forward(&out.params, &data[0].features).unwrap();
            assert!((e.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_epochs_and_determinism() {
        let data = toy(3, 2);
        let arch = ArchConfig::with_classes(2);
        let zero = TrainHyper { epochs: 0, ..TrainHyper::default() };
        let out = train(&data, &arch, &zero, 5).unwrap();
        assert_eq!(out.params, init_net(rng::derive(5, &[rng::label("init")]), &arch).unwrap());
        assert!(out.loss_trace.is_empty());
        let h = TrainHyper { epochs: 2, batch: 2, crop_frames: 10, ..TrainHyper::default() };
        let a = train(&data, &arch, &h, 9).unwrap();
        let b = train(&data, &arch, &h, 9).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn needs_two_users_and_flags_divergence() {
        let arch = ArchConfig::with_classes(2);
        let one: Vec<_> = toy(3, 1).into_iter().filter(|s| s.label == 0).collect();
        assert!(matches!(train(&one, &arch, &TrainHyper::default(), 1), Err(EmbedError::Hyper(_))));
        let mut data = toy(2, 1);
        data[1].features.data[5] = f64::NAN;
        let h = TrainHyper { epochs: 3, crop_frames: 0, ..TrainHyper::default() };
        assert_eq!(train(&data, &arch, &h, 1).unwrap_err(), EmbedError::Diverged { epoch: 0 });
    }
}
