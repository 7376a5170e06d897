//! The embedding network and its training machinery.
//!
//! Architecture: a stack of 1-D convolutions over time with ReLU, mean and
//! standard-deviation statistics pooling, and an affine embedding layer. The
//! self-distillation stage adds a projection head: a three-layer GELU MLP,
//! L2 normalization and a weight-normalized prototype layer whose rows are
//! unit direction vectors scaled by a frozen gain of 1.
//!
//! Gradients are computed by hand-written reverse-mode passes through each
//! layer; [`grad_check`] compares them against central finite differences.

mod adam;
mod checkpoint;
mod gradcheck;
mod params;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState, LrSchedule};
pub use checkpoint::{hex_digest, Checkpoint, CheckpointKind, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{backward, grad_check, GradCheckConfig, Objective, Quadratic};
pub use params::{Gradients, Group, ParamSet, Tensor};

use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureMatrix};
use crate::real::{axpy, dot, norm, Real};
use crate::rng::{rng_from, tag};

/// Added to the pooled variance before the square root.
pub const STD_EPSILON: f64 = 1e-6;
/// Lower bound on norms divided by during L2 normalization.
pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub features: FeatureConfig,
    pub trunk_channels: Vec<usize>,
    /// Convolution width in frames, shared by every trunk layer.
    pub frame_kernel: usize,
    pub embed_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self { features: FeatureConfig::default(), trunk_channels: vec![64, 64], frame_kernel: 3, embed_dim: 256 }
    }
}

impl NetworkConfig {
    /// A very small network for unit tests and gradient checks.
    pub fn tiny() -> Self {
        Self { features: FeatureConfig { n_mels: 4, ..FeatureConfig::default() }, trunk_channels: vec![3, 3], frame_kernel: 2, embed_dim: 5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk_channels.is_empty() || self.trunk_channels.contains(&0) {
            return Err(Error::config("trunk_channels", "need at least one nonzero layer"));
        }
        if self.frame_kernel == 0 {
            return Err(Error::config("frame_kernel", "must be positive"));
        }
        if self.embed_dim < 2 {
            return Err(Error::config("embed_dim", "must be at least 2"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.features.n_mels
    }

    /// Frames consumed by the trunk: each layer trims `kernel - 1`.
    pub fn receptive_field(&self) -> usize {
        1 + self.trunk_channels.len() * (self.frame_kernel - 1)
    }

    fn pooled_dim(&self) -> usize {
        2 * self.trunk_channels.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionConfig {
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    /// Output dimension of the prototype layer.
    pub k: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self { hidden_dim: 128, bottleneck_dim: 64, k: 256 }
    }
}

impl ProjectionConfig {
    pub fn tiny() -> Self {
        Self { hidden_dim: 6, bottleneck_dim: 4, k: 5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config("k", "must be at least 2"));
        }
        if self.bottleneck_dim < 1 || self.hidden_dim < self.bottleneck_dim {
            return Err(Error::config("hidden_dim", "need hidden_dim >= bottleneck_dim >= 1"));
        }
        Ok(())
    }
}

pub const EMBED_W: &str = "embed.weight";
pub const EMBED_B: &str = "embed.bias";
pub const PROTO_DIR: &str = "head.proto.direction";
pub const PROTO_SCALE: &str = "head.proto.scale";
pub const AAM_W: &str = "aam.weight";

pub fn trunk_w(l: usize) -> String {
    format!("trunk.{l}.weight")
}

pub fn trunk_b(l: usize) -> String {
    format!("trunk.{l}.bias")
}

fn head_w(l: usize) -> String {
    format!("head.{l}.weight")
}

fn head_b(l: usize) -> String {
    format!("head.{l}.bias")
}

/// Tensors that never receive optimizer updates.
pub fn is_frozen_by_design(name: &str) -> bool {
    name == PROTO_SCALE
}

fn gaussian<T: Real>(rng: &mut crate::rng::Rng, std: f64) -> T {
    let z: f64 = StandardNormal.sample(rng);
    T::lit(z * std)
}

fn random_tensor<T: Real>(name: String, shape: Vec<usize>, group: Group, std: f64, rng: &mut crate::rng::Rng) -> Tensor<T> {
    let mut t = Tensor::zeros(name, shape, group);
    t.data.iter_mut().for_each(|v| *v = gaussian(rng, std));
    t
}

/// Trunk and embedding layer with He-style initialization.
pub fn init_backbone<T: Real>(cfg: &NetworkConfig, seed: u64) -> Result<ParamSet<T>> {
    cfg.validate()?;
    let mut rng = rng_from(seed, &[tag("backbone")]);
    let mut p = ParamSet::new();
    let mut c_in = cfg.input_dim();
    for (l, &c_out) in cfg.trunk_channels.iter().enumerate() {
        let fan_in = c_in * cfg.frame_kernel;
        p.push(random_tensor(trunk_w(l), vec![c_out, cfg.frame_kernel, c_in], Group::PrePooling, (2.0 / fan_in as f64).sqrt(), &mut rng));
        p.push(Tensor::zeros(trunk_b(l), vec![c_out], Group::PrePooling));
        c_in = c_out;
    }
    let pooled = cfg.pooled_dim();
    p.push(random_tensor(EMBED_W.into(), vec![cfg.embed_dim, pooled], Group::PostPooling, (1.0 / pooled as f64).sqrt(), &mut rng));
    p.push(Tensor::zeros(EMBED_B, vec![cfg.embed_dim], Group::PostPooling));
    Ok(p)
}

/// Append the projection head to a backbone parameter set.
pub fn init_head<T: Real>(p: &mut ParamSet<T>, cfg: &NetworkConfig, proj: &ProjectionConfig, seed: u64) -> Result<()> {
    proj.validate()?;
    let mut rng = rng_from(seed, &[tag("head")]);
    let dims = [cfg.embed_dim, proj.hidden_dim, proj.hidden_dim, proj.bottleneck_dim];
    for l in 0..3 {
        p.push(random_tensor(head_w(l), vec![dims[l + 1], dims[l]], Group::PostPooling, (1.0 / dims[l] as f64).sqrt(), &mut rng));
        p.push(Tensor::zeros(head_b(l), vec![dims[l + 1]], Group::PostPooling));
    }
    let mut dir = random_tensor(PROTO_DIR.into(), vec![proj.k, proj.bottleneck_dim], Group::PostPooling, 1.0, &mut rng);
    renormalize_rows(&mut dir);
    p.push(dir);
    let mut scale = Tensor::zeros(PROTO_SCALE, vec![proj.k], Group::PostPooling);
    scale.data.iter_mut().for_each(|v| *v = T::one());
    p.push(scale);
    Ok(())
}

/// Unit-norm class weight rows for the AAM layer.
pub fn init_class_weights<T: Real>(n_classes: usize, embed_dim: usize, seed: u64) -> Tensor<T> {
    let mut rng = rng_from(seed, &[tag("classes")]);
    let mut w = random_tensor(AAM_W.into(), vec![n_classes, embed_dim], Group::PostPooling, 1.0, &mut rng);
    renormalize_rows(&mut w);
    w
}

/// Rescale each row of a 2-D tensor to unit L2 norm.
pub fn renormalize_rows<T: Real>(t: &mut Tensor<T>) {
    for r in 0..t.shape[0] {
        let row = t.row_mut(r);
        let n = norm(row).max(T::lit(NORM_EPSILON));
        row.iter_mut().for_each(|v| *v /= n);
    }
}

/// Activations kept from [`forward_embed`] for the backward pass.
#[derive(Debug, Clone)]
pub struct EmbedCache<T> {
    /// `acts[0]` is the input; `acts[l + 1]` the ReLU output of layer `l`.
    acts: Vec<Vec<T>>,
    frames: Vec<usize>,
    mean: Vec<T>,
    std: Vec<T>,
    pooled: Vec<T>,
}

impl<T: Real> EmbedCache<T> {
    pub fn pooled(&self) -> &[T] {
        &self.pooled
    }

    /// Output of the last trunk layer, time-major.
    pub fn trunk_output(&self) -> (&[T], usize) {
        (self.acts.last().unwrap(), *self.frames.last().unwrap())
    }
}

/// Features to embedding: trunk, statistics pooling, affine embedding layer.
pub fn forward_embed<T: Real>(p: &ParamSet<T>, cfg: &NetworkConfig, f: &FeatureMatrix) -> Result<(Vec<T>, EmbedCache<T>)> {
    if f.n_frames == 0 {
        return Err(Error::Shape("empty feature matrix".into()));
    }
    if f.n_dims != cfg.input_dim() {
        return Err(Error::Shape(format!("expected {} feature dims, got {}", cfg.input_dim(), f.n_dims)));
    }
    if f.n_frames < cfg.receptive_field() {
        return Err(Error::Shape(format!("{} frames is shorter than the trunk's receptive field of {}", f.n_frames, cfg.receptive_field())));
    }
    let k = cfg.frame_kernel;
    let mut acts = vec![f.data.iter().map(|&v| T::lit(v)).collect::<Vec<T>>()];
    let mut frames = vec![f.n_frames];
    let mut c_in = cfg.input_dim();
    for (l, &c_out) in cfg.trunk_channels.iter().enumerate() {
        let w = p.get(&trunk_w(l))?;
        let b = p.get(&trunk_b(l))?;
        let x = acts.last().unwrap();
        let t_out = frames.last().unwrap() - (k - 1);
        let span = k * c_in;
        let mut h = vec![T::zero(); t_out * c_out];
        for t in 0..t_out {
            let win = &x[t * c_in..t * c_in + span];
            let out = &mut h[t * c_out..(t + 1) * c_out];
            for (o, y) in out.iter_mut().enumerate() {
                let z = b.data[o] + dot(w.row(o), win);
                *y = if z > T::zero() { z } else { T::zero() };
            }
        }
        acts.push(h);
        frames.push(t_out);
        c_in = c_out;
    }

    let c = c_in;
    let h = acts.last().unwrap();
    let t_len = *frames.last().unwrap();
    let inv_t = T::one() / T::lit(t_len as f64);
    let mut mean = vec![T::zero(); c];
    for t in 0..t_len {
        axpy(T::one(), &h[t * c..(t + 1) * c], &mut mean);
    }
    mean.iter_mut().for_each(|m| *m *= inv_t);
    let mut var = vec![T::zero(); c];
    for t in 0..t_len {
        for ((v, &x), &m) in var.iter_mut().zip(&h[t * c..(t + 1) * c]).zip(&mean) {
            let d = x - m;
            *v += d * d;
        }
    }
    let std: Vec<T> = var.iter().map(|&v| (v * inv_t + T::lit(STD_EPSILON)).sqrt()).collect();
    let pooled: Vec<T> = mean.iter().chain(std.iter()).copied().collect();

    let e = linear(p.get(EMBED_W)?, p.get(EMBED_B)?, &pooled);
    Ok((e, EmbedCache { acts, frames, mean, std, pooled }))
}

/// Backward through the embedding layer, pooling and (unless
/// `stop_at_pooling`) the trunk. Accumulates into `grads`.
pub fn backward_embed<T: Real>(
    p: &ParamSet<T>,
    cfg: &NetworkConfig,
    cache: &EmbedCache<T>,
    d_e: &[T],
    grads: &mut Gradients<T>,
    stop_at_pooling: bool,
) -> Result<()> {
    let d_pooled = {
        let w = p.get(EMBED_W)?;
        let (gw, gb) = pair_mut(grads, EMBED_W, EMBED_B)?;
        linear_backward(w, &cache.pooled, d_e, gw, gb)
    };
    if stop_at_pooling {
        return Ok(());
    }
    let c = cache.mean.len();
    let t_len = *cache.frames.last().unwrap();
    let inv_t = T::one() / T::lit(t_len as f64);
    let (d_mean, d_std) = d_pooled.split_at(c);
    let h = cache.acts.last().unwrap();
    let mut d_h = vec![T::zero(); t_len * c];
    let coef: Vec<T> = d_std.iter().zip(&cache.std).map(|(&ds, &s)| ds * inv_t / s).collect();
    for t in 0..t_len {
        let row = &mut d_h[t * c..(t + 1) * c];
        let hr = &h[t * c..(t + 1) * c];
        for j in 0..c {
            row[j] = d_mean[j] * inv_t + coef[j] * (hr[j] - cache.mean[j]);
        }
    }

    let k = cfg.frame_kernel;
    let n_layers = cfg.trunk_channels.len();
    for l in (0..n_layers).rev() {
        let c_out = cfg.trunk_channels[l];
        let c_in = if l == 0 { cfg.input_dim() } else { cfg.trunk_channels[l - 1] };
        let span = k * c_in;
        let x = &cache.acts[l];
        let out = &cache.acts[l + 1];
        let t_out = cache.frames[l + 1];
        let w = p.get(&trunk_w(l))?;
        // ReLU gate: gradient flows only where the output was positive.
        for (d, &y) in d_h.iter_mut().zip(out.iter()) {
            if y <= T::zero() {
                *d = T::zero();
            }
        }
        let mut d_x = if l > 0 { vec![T::zero(); cache.frames[l] * c_in] } else { Vec::new() };
        {
            let (gw, gb) = pair_mut(grads, &trunk_w(l), &trunk_b(l))?;
            for t in 0..t_out {
                let dz = &d_h[t * c_out..(t + 1) * c_out];
                let win = &x[t * c_in..t * c_in + span];
                for (o, &g) in dz.iter().enumerate() {
                    if g == T::zero() {
                        continue;
                    }
                    gb.data[o] += g;
                    axpy(g, win, gw.row_mut(o));
                    if l > 0 {
                        axpy(g, w.row(o), &mut d_x[t * c_in..t * c_in + span]);
                    }
                }
            }
        }
        d_h = d_x;
    }
    Ok(())
}

/// Two distinct tensors of `grads`, mutably.
fn pair_mut<'a, T: Real>(g: &'a mut Gradients<T>, a: &str, b: &str) -> Result<(&'a mut Tensor<T>, &'a mut Tensor<T>)> {
    let ia = g.find(a).ok_or_else(|| Error::Shape(format!("missing gradient `{a}`")))?;
    let ib = g.find(b).ok_or_else(|| Error::Shape(format!("missing gradient `{b}`")))?;
    assert_ne!(ia, ib);
    if ia < ib {
        let (lo, hi) = g.tensors.split_at_mut(ib);
        Ok((&mut lo[ia], &mut hi[0]))
    } else {
        let (lo, hi) = g.tensors.split_at_mut(ia);
        Ok((&mut hi[0], &mut lo[ib]))
    }
}

fn linear<T: Real>(w: &Tensor<T>, b: &Tensor<T>, x: &[T]) -> Vec<T> {
    (0..w.shape[0]).map(|r| b.data[r] + dot(w.row(r), x)).collect()
}

/// Accumulate weight/bias gradients of `y = W x + b` and return `dL/dx`.
fn linear_backward<T: Real>(w: &Tensor<T>, x: &[T], dy: &[T], gw: &mut Tensor<T>, gb: &mut Tensor<T>) -> Vec<T> {
    let mut dx = vec![T::zero(); x.len()];
    for (r, &g) in dy.iter().enumerate() {
        gb.data[r] += g;
        axpy(g, x, gw.row_mut(r));
        axpy(g, w.row(r), &mut dx);
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let th = inner.tanh();
    let d_inner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    T::lit(0.5) * (T::one() + th) + T::lit(0.5) * x * (T::one() - th * th) * d_inner
}

#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    e: Vec<T>,
    pre: [Vec<T>; 2],
    hid: [Vec<T>; 2],
    z_norm: T,
    z_hat: Vec<T>,
    /// Per-prototype cosine with `z_hat` and direction-row norm.
    cos: Vec<T>,
    dir_norm: Vec<T>,
}

impl<T: Real> HeadCache<T> {
    pub fn bottleneck(&self) -> &[T] {
        &self.z_hat
    }
}

/// Projection head: MLP, L2 normalization, weight-normalized prototypes.
/// Every logit is a gain-scaled cosine, so it lies in `[-1, 1]` for gain 1.
pub fn forward_head<T: Real>(p: &ParamSet<T>, e: &[T]) -> Result<(Vec<T>, HeadCache<T>)> {
    let w0 = p.get(&head_w(0))?;
    if e.len() != w0.shape[1] {
        return Err(Error::Shape(format!("embedding has {} dims, head expects {}", e.len(), w0.shape[1])));
    }
    let a0 = linear(w0, p.get(&head_b(0))?, e);
    let h0: Vec<T> = a0.iter().map(|&v| gelu(v)).collect();
    let a1 = linear(p.get(&head_w(1))?, p.get(&head_b(1))?, &h0);
    let h1: Vec<T> = a1.iter().map(|&v| gelu(v)).collect();
    let z = linear(p.get(&head_w(2))?, p.get(&head_b(2))?, &h1);
    let z_norm = norm(&z).max(T::lit(NORM_EPSILON));
    let z_hat: Vec<T> = z.iter().map(|&v| v / z_norm).collect();

    let dir = p.get(PROTO_DIR)?;
    let scale = p.get(PROTO_SCALE)?;
    let k = dir.shape[0];
    let mut cos = Vec::with_capacity(k);
    let mut dir_norm = Vec::with_capacity(k);
    let mut logits = Vec::with_capacity(k);
    for r in 0..k {
        let row = dir.row(r);
        let n = norm(row).max(T::lit(NORM_EPSILON));
        let c = dot(row, &z_hat) / n;
        cos.push(c);
        dir_norm.push(n);
        logits.push(scale.data[r] * c);
    }
    Ok((logits, HeadCache { e: e.to_vec(), pre: [a0, a1], hid: [h0, h1], z_norm, z_hat, cos, dir_norm }))
}

/// Backward through the head; returns `dL/de`. The prototype gain is frozen
/// and receives no gradient.
pub fn backward_head<T: Real>(p: &ParamSet<T>, cache: &HeadCache<T>, d_logits: &[T], grads: &mut Gradients<T>) -> Result<Vec<T>> {
    let dir = p.get(PROTO_DIR)?;
    let scale = p.get(PROTO_SCALE)?;
    let b = cache.z_hat.len();
    let mut d_zhat = vec![T::zero(); b];
    {
        let gdir = grads.get_mut(PROTO_DIR)?;
        for (r, &dl) in d_logits.iter().enumerate() {
            let g = dl * scale.data[r];
            if g == T::zero() {
                continue;
            }
            let n = cache.dir_norm[r];
            let row = dir.row(r);
            // d(cos)/d(z_hat) = u_r, d(cos)/d(v_r) = (z_hat - u_r cos) / |v_r|
            axpy(g / n, row, &mut d_zhat);
            let grow = gdir.row_mut(r);
            let c = cache.cos[r];
            for j in 0..b {
                grow[j] += g * (cache.z_hat[j] - row[j] / n * c) / n;
            }
        }
    }
    let proj = dot(&cache.z_hat, &d_zhat);
    let d_z: Vec<T> = d_zhat.iter().zip(&cache.z_hat).map(|(&d, &zh)| (d - zh * proj) / cache.z_norm).collect();

    let d_h1 = {
        let w = p.get(&head_w(2))?;
        let (gw, gb) = pair_mut(grads, &head_w(2), &head_b(2))?;
        linear_backward(w, &cache.hid[1], &d_z, gw, gb)
    };
    let d_a1: Vec<T> = d_h1.iter().zip(&cache.pre[1]).map(|(&d, &a)| d * gelu_grad(a)).collect();
    let d_h0 = {
        let w = p.get(&head_w(1))?;
        let (gw, gb) = pair_mut(grads, &head_w(1), &head_b(1))?;
        linear_backward(w, &cache.hid[0], &d_a1, gw, gb)
    };
    let d_a0: Vec<T> = d_h0.iter().zip(&cache.pre[0]).map(|(&d, &a)| d * gelu_grad(a)).collect();
    let w = p.get(&head_w(0))?;
    let (gw, gb) = pair_mut(grads, &head_w(0), &head_b(0))?;
    Ok(linear_backward(w, &cache.e, &d_a0, gw, gb))
}

/// Fold a per-dimension standardization of the pooled statistics, measured
/// on `samples`, into the embedding layer. Without it, pooled ReLU
/// statistics share a large positive offset and every input maps to nearly
/// the same embedding direction.
pub fn calibrate_embedding<T: Real>(p: &mut ParamSet<T>, cfg: &NetworkConfig, samples: &[FeatureMatrix]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Shape("no calibration samples".into()));
    }
    let pooled: Vec<Vec<f64>> =
        samples.par_iter().map(|f| forward_embed(p, cfg, f).map(|(_, c)| c.pooled.iter().map(|v| v.as_f64()).collect())).collect::<Result<_>>()?;
    let d = pooled[0].len();
    let n = pooled.len() as f64;
    let mut mean = vec![0.0; d];
    for row in &pooled {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; d];
    for row in &pooled {
        var.iter_mut().zip(row).zip(&mean).for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
    }
    let scale: Vec<f64> = var.iter().map(|&v| if v > 1e-8 { 1.0 / v.sqrt() } else { 1.0 }).collect();
    let mut w = p.get(EMBED_W)?.clone();
    let mut b = p.get(EMBED_B)?.clone();
    for r in 0..w.shape[0] {
        let row = w.row_mut(r);
        let mut shift = 0.0;
        for j in 0..d {
            let wj = row[j].as_f64() * scale[j];
            row[j] = T::lit(wj);
            shift += wj * mean[j];
        }
        b.data[r] = T::lit(b.data[r].as_f64() - shift);
    }
    *p.get_mut(EMBED_W)? = w;
    *p.get_mut(EMBED_B)? = b;
    Ok(())
}

/// Embedding only, no cache kept.
pub fn embed<T: Real>(p: &ParamSet<T>, cfg: &NetworkConfig, f: &FeatureMatrix) -> Result<Vec<T>> {
    forward_embed(p, cfg, f).map(|(e, _)| e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng as _;

    fn tiny_cfg(kernel: usize) -> NetworkConfig {
        NetworkConfig { features: FeatureConfig { n_mels: 6, ..Default::default() }, trunk_channels: vec![5, 4], frame_kernel: kernel, embed_dim: 3 }
    }

    fn random_features(frames: usize, dims: usize, seed: u64) -> FeatureMatrix {
        let mut rng = rng_from(seed, &[]);
        FeatureMatrix::new((0..frames * dims).map(|_| rng.random_range(-2.0..2.0)).collect(), frames, dims, 100.0)
    }

    #[test]
    fn embedding_is_finite_with_right_length() {
        let cfg = tiny_cfg(3);
        let p = init_backbone::<f32>(&cfg, 1).unwrap();
        let e = embed(&p, &cfg, &random_features(20, 6, 2)).unwrap();
        assert_eq!(e.len(), 3);
        assert!(e.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn frame_permutation_is_invisible_with_unit_kernel() {
        let cfg = tiny_cfg(1);
        let p = init_backbone::<f64>(&cfg, 4).unwrap();
        let f = random_features(12, 6, 5);
        let mut order: Vec<usize> = (0..12).rev().collect();
        order.swap(0, 5);
        let permuted = FeatureMatrix::new(order.iter().flat_map(|&t| f.frame(t).to_vec()).collect(), 12, 6, 100.0);
        let a = embed(&p, &cfg, &f).unwrap();
        let b = embed(&p, &cfg, &permuted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_trunk_output_gives_epsilon_std() {
        let cfg = tiny_cfg(1);
        let p = init_backbone::<f64>(&cfg, 4).unwrap();
        let row: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 0.5).collect();
        let f = FeatureMatrix::new(row.repeat(9), 9, 6, 100.0);
        let (_, cache) = forward_embed(&p, &cfg, &f).unwrap();
        let c = cfg.trunk_channels[1];
        for &s in &cache.pooled()[c..] {
            assert!((s - STD_EPSILON.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_and_mismatched_features_are_shape_errors() {
        let cfg = tiny_cfg(3);
        let p = init_backbone::<f32>(&cfg, 1).unwrap();
        let empty = FeatureMatrix::new(vec![], 0, 6, 100.0);
        assert!(matches!(embed(&p, &cfg, &empty), Err(Error::Shape(_))));
        assert!(matches!(embed(&p, &cfg, &random_features(10, 5, 0)), Err(Error::Shape(_))));
        assert!(matches!(embed(&p, &cfg, &random_features(4, 6, 0)), Err(Error::Shape(_))));
    }

    fn with_head(seed: u64) -> (NetworkConfig, ParamSet<f64>) {
        let cfg = tiny_cfg(3);
        let mut p = init_backbone::<f64>(&cfg, seed).unwrap();
        init_head(&mut p, &cfg, &ProjectionConfig { hidden_dim: 7, bottleneck_dim: 4, k: 9 }, seed).unwrap();
        (cfg, p)
    }

    #[test]
    fn head_logits_are_cosines() {
        let (_, p) = with_head(3);
        let mut rng = rng_from(11, &[]);
        for _ in 0..50 {
            let e: Vec<f64> = (0..3).map(|_| rng.random_range(-30.0..30.0)).collect();
            let (logits, _) = forward_head(&p, &e).unwrap();
            assert_eq!(logits.len(), 9);
            assert!(logits.iter().all(|l| l.abs() <= 1.0 + 1e-12));
        }
    }

    #[test]
    fn head_rejects_wrong_embedding_size() {
        let (_, p) = with_head(3);
        assert!(matches!(forward_head(&p, &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn aligned_bottleneck_gives_unit_logit() {
        // K = 2 orthonormal prototypes; make the last MLP layer output a
        // positive multiple of prototype 0 regardless of its input.
        let cfg = tiny_cfg(1);
        let mut p = init_backbone::<f64>(&cfg, 0).unwrap();
        init_head(&mut p, &cfg, &ProjectionConfig { hidden_dim: 3, bottleneck_dim: 2, k: 2 }, 0).unwrap();
        p.get_mut(PROTO_DIR).unwrap().data = vec![1.0, 0.0, 0.0, 1.0];
        p.get_mut("head.2.weight").unwrap().data.iter_mut().for_each(|v| *v = 0.0);
        p.get_mut("head.2.bias").unwrap().data = vec![5.0, 0.0];
        let (logits, _) = forward_head(&p, &[0.3, -1.0, 2.0]).unwrap();
        assert!((logits[0] - 1.0).abs() < 1e-15 && logits[1].abs() < 1e-15);

        // Scaling the bottleneck vector does not move the logits.
        p.get_mut("head.2.bias").unwrap().data = vec![50.0, 0.0];
        let (again, _) = forward_head(&p, &[0.3, -1.0, 2.0]).unwrap();
        assert_eq!(logits, again);
    }

    #[test]
    fn partition_is_total() {
        let (_, p) = with_head(1);
        for t in &p.tensors {
            let pre = t.name.starts_with("trunk.");
            assert_eq!(t.group == Group::PrePooling, pre, "{}", t.name);
        }
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
