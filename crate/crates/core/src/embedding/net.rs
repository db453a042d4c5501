use rand::Rng;

use super::{ArchConfig, EmbedError, Embedding, NetParams, ParamSet, INPUT_SCALE, STD_EPS};
use crate::features::FeatureMatrix;
use crate::rng;

/// Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit-norm class rows.
pub fn init_net(seed: u64, arch: &ArchConfig) -> Result<NetParams, EmbedError> {
    arch.validate()?;
    let mut w = ParamSet::zeros(arch);
    let mut r = rng::seeded(seed);
    let mut fill = |t: &mut Vec<f64>, fan_in: usize| {
        let b = 1.0 / (fan_in as f64).sqrt();
        for v in t.iter_mut() {
            *v = r.random_range(-b..=b);
        }
    };
    fill(&mut w.conv1_w, arch.conv1_kernel * arch.in_bands);
    fill(&mut w.conv2_w, arch.conv2_kernel * arch.conv1_channels);
    fill(&mut w.proj_w, 2 * arch.conv2_channels);
    fill(&mut w.class_w, arch.embed_dim);
    let mut p = NetParams { arch: *arch, weights: w };
    p.renormalize_classes();
    Ok(p)
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub frames: usize,
    x: Vec<f64>,
    h1_pre: Vec<f64>,
    h1: Vec<f64>,
    h2_pre: Vec<f64>,
    h2: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
    pooled: Vec<f64>,
    z_norm: f64,
    pub embedding: Embedding,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

/// Valid 1-D convolution over frames. Input `[t_in][c_in]`, weights
/// `[c_out][k][c_in]`; because the window of k consecutive rows is contiguous
/// each output is one dot product.
fn conv(input: &[f64], c_in: usize, w: &[f64], b: &[f64], k: usize) -> Vec<f64> {
    let t_in = input.len() / c_in;
    let t_out = t_in + 1 - k;
    let c_out = b.len();
    let span = k * c_in;
    let mut out = vec![0.0; t_out * c_out];
    for t in 0..t_out {
        let win = &input[t * c_in..t * c_in + span];
        for o in 0..c_out {
            out[t * c_out + o] = b[o] + dot(&w[o * span..(o + 1) * span], win);
        }
    }
    out
}

fn conv_backward(
    input: &[f64],
    c_in: usize,
    w: &[f64],
    k: usize,
    grad_out: &[f64],
    c_out: usize,
    gw: &mut [f64],
    gb: &mut [f64],
    grad_in: Option<&mut [f64]>,
) {
    let span = k * c_in;
    let t_out = grad_out.len() / c_out;
    for t in 0..t_out {
        let win = &input[t * c_in..t * c_in + span];
        for o in 0..c_out {
            let g = grad_out[t * c_out + o];
            if g != 0.0 {
                gb[o] += g;
                axpy(&mut gw[o * span..(o + 1) * span], g, win);
            }
        }
    }
    if let Some(gi) = grad_in {
        for t in 0..t_out {
            let dwin = &mut gi[t * c_in..t * c_in + span];
            for o in 0..c_out {
                let g = grad_out[t * c_out + o];
                if g != 0.0 {
                    axpy(dwin, g, &w[o * span..(o + 1) * span]);
                }
            }
        }
    }
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

/// Mean and standard deviation (population, with variance floor) per channel.
/// Input `[frames][channels]`; output is `[mean..., std...]`.
pub fn stats_pool(h: &[f64], channels: usize) -> Vec<f64> {
    let t = (h.len() / channels) as f64;
    let mut mean = vec![0.0; channels];
    for row in h.chunks(channels) {
        axpy(&mut mean, 1.0, row);
    }
    mean.iter_mut().for_each(|m| *m /= t);
    let mut var = vec![0.0; channels];
    for row in h.chunks(channels) {
        for c in 0..channels {
            let d = row[c] - mean[c];
            var[c] += d * d;
        }
    }
    let mut out = mean;
    out.extend(var.iter().map(|v| (v / t + STD_EPS).sqrt()));
    out
}

fn check_input(p: &NetParams, feats: &FeatureMatrix) -> Result<(), EmbedError> {
    if feats.bands != p.arch.in_bands {
        return Err(EmbedError::BandMismatch { got: feats.bands, expected: p.arch.in_bands });
    }
    let min = p.arch.min_frames();
    if feats.frames < min {
        return Err(EmbedError::ShortInput { frames: feats.frames, min });
    }
    Ok(())
}

pub fn forward(p: &NetParams, feats: &FeatureMatrix) -> Result<Embedding, EmbedError> {
    Ok(forward_cached(p, feats)?.embedding)
}

pub fn forward_cached(p: &NetParams, feats: &FeatureMatrix) -> Result<ForwardCache, EmbedError> {
    check_input(p, feats)?;
    let a = &p.arch;
    let w = &p.weights;
    let x: Vec<f64> = feats.data.iter().map(|v| v * INPUT_SCALE).collect();
    let h1_pre = conv(&x, a.in_bands, &w.conv1_w, &w.conv1_b, a.conv1_kernel);
    let h1 = relu(&h1_pre);
    let h2_pre = conv(&h1, a.conv1_channels, &w.conv2_w, &w.conv2_b, a.conv2_kernel);
    let h2 = relu(&h2_pre);
    let pooled = stats_pool(&h2, a.conv2_channels);
    let c2 = a.conv2_channels;
    let mean = pooled[..c2].to_vec();
    let std = pooled[c2..].to_vec();
    let z: Vec<f64> = (0..a.embed_dim)
        .map(|o| w.proj_b[o] + dot(&w.proj_w[o * 2 * c2..(o + 1) * 2 * c2], &pooled))
        .collect();
    let z_norm = super::l2(&z).max(1e-12);
    let e = z.iter().map(|v| v / z_norm).collect();
    Ok(ForwardCache {
        frames: feats.frames,
        x,
        h1_pre,
        h1,
        h2_pre,
        h2,
        mean,
        std,
        pooled,
        z_norm,
        embedding: Embedding(e),
    })
}

/// Back-propagate an upstream gradient on the embedding. Returns parameter
/// gradients (class weights untouched) and, when requested, the gradient
/// with respect to the unscaled feature matrix.
fn backprop(p: &NetParams, cache: &ForwardCache, de: &[f64], want_input: bool) -> (ParamSet, Option<Vec<f64>>) {
    let a = &p.arch;
    let w = &p.weights;
    let mut g = ParamSet::zeros(a);
    let c1 = a.conv1_channels;
    let c2 = a.conv2_channels;
    let e = cache.embedding.as_slice();

    let e_de = dot(e, de);
    let dz: Vec<f64> = e.iter().zip(de).map(|(ei, di)| (di - ei * e_de) / cache.z_norm).collect();

    let mut dpooled = vec![0.0; 2 * c2];
    for (o, &d) in dz.iter().enumerate() {
        g.proj_b[o] = d;
        let row = o * 2 * c2..(o + 1) * 2 * c2;
        axpy(&mut g.proj_w[row.clone()], d, &cache.pooled);
        axpy(&mut dpooled, d, &w.proj_w[row]);
    }

    let t2 = cache.h2.len() / c2;
    let tf = t2 as f64;
    let mut dh2 = vec![0.0; cache.h2.len()];
    for t in 0..t2 {
        for c in 0..c2 {
            let i = t * c2 + c;
            if cache.h2_pre[i] > 0.0 {
                dh2[i] = dpooled[c] / tf
                    + dpooled[c2 + c] * (cache.h2[i] - cache.mean[c]) / (tf * cache.std[c]);
            }
        }
    }

    let mut dh1 = vec![0.0; cache.h1.len()];
    conv_backward(
        &cache.h1,
        c1,
        &w.conv2_w,
        a.conv2_kernel,
        &dh2,
        c2,
        &mut g.conv2_w,
        &mut g.conv2_b,
        Some(&mut dh1),
    );
    for (d, &pre) in dh1.iter_mut().zip(&cache.h1_pre) {
        if pre <= 0.0 {
            *d = 0.0;
        }
    }
    let mut dx = want_input.then(|| vec![0.0; cache.x.len()]);
    conv_backward(
        &cache.x,
        a.in_bands,
        &w.conv1_w,
        a.conv1_kernel,
        &dh1,
        c1,
        &mut g.conv1_w,
        &mut g.conv1_b,
        dx.as_deref_mut(),
    );
    if let Some(v) = dx.as_mut() {
        v.iter_mut().for_each(|x| *x *= INPUT_SCALE);
    }
    (g, dx)
}

/// Gradient of the margin loss (scaled by `weight`) with respect to every
/// parameter tensor, plus the loss value itself (unscaled).
pub fn backward_weighted(
    p: &NetParams,
    feats: &FeatureMatrix,
    label: usize,
    s: f64,
    m: f64,
    weight: f64,
) -> Result<(f64, ParamSet), EmbedError> {
    let cache = forward_cached(p, feats)?;
    let out = super::aam_loss(&cache.embedding, label, &p.weights.class_w, s, m)?;
    let de: Vec<f64> = out.grad_embedding.iter().map(|v| v * weight).collect();
    let (mut g, _) = backprop(p, &cache, &de, false);
    for (gw, d) in g.class_w.iter_mut().zip(&out.grad_class) {
        *gw = weight * d;
    }
    Ok((out.loss, g))
}

pub fn backward(p: &NetParams, feats: &FeatureMatrix, label: usize, s: f64, m: f64) -> Result<(f64, ParamSet), EmbedError> {
    backward_weighted(p, feats, label, s, m, 1.0)
}

/// Gradient of `upstream . embedding` with respect to the input features.
pub fn input_gradient(p: &NetParams, feats: &FeatureMatrix, upstream: &[f64]) -> Result<(Embedding, Vec<f64>), EmbedError> {
    if upstream.len() != p.arch.embed_dim {
        return Err(EmbedError::DimMismatch(upstream.len(), p.arch.embed_dim));
    }
    let cache = forward_cached(p, feats)?;
    let (_, dx) = backprop(p, &cache, upstream, true);
    Ok((cache.embedding, dx.unwrap_or_default()))
}
