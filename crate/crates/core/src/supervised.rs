//! Supervised training on pseudo-labels with the additive angular margin
//! softmax, and the large-margin fine-tuning pass over post-pooling layers.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterAssignment;
use crate::corpus::UnlabeledCorpus;
use crate::dino::calibration_features;
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::network::{
    adam_step, backward, backward_embed, calibrate_embedding, forward_embed, init_backbone, init_class_weights, is_frozen_by_design, renormalize_rows,
    AdamConfig, AdamState, Gradients, Group, LrSchedule, NetworkConfig, Objective, ParamSet, Tensor, AAM_W, NORM_EPSILON,
};
use crate::real::{dot, norm, Real};
use crate::rng::{rng_from, sub_seed, tag};
use crate::views::{AugmentConfig, CropConfig, ViewMaker};

/// Bounds applied to the target cosine before adding the margin.
pub const COS_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AamConfig {
    pub scale: f64,
    pub margin_max: f64,
    pub warmup_epochs: usize,
    pub large_margin: f64,
}

impl Default for AamConfig {
    fn default() -> Self {
        Self { scale: 30.0, margin_max: 0.3, warmup_epochs: 20, large_margin: 0.5 }
    }
}

impl AamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(Error::config("scale", "must be positive"));
        }
        for (field, m) in [("margin_max", self.margin_max), ("large_margin", self.large_margin)] {
            if !(0.0..std::f64::consts::FRAC_PI_2).contains(&m) {
                return Err(Error::config(field, "must lie in [0, pi/2)"));
            }
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `margin_max` over `warmup_epochs`, then constant.
pub fn margin_schedule(epoch: usize, cfg: &AamConfig) -> f64 {
    if cfg.warmup_epochs == 0 || epoch >= cfg.warmup_epochs {
        return cfg.margin_max;
    }
    epoch as f64 / cfg.warmup_epochs as f64 * cfg.margin_max
}

#[derive(Debug, Clone, PartialEq)]
pub struct AamOutput<T> {
    pub loss: T,
    /// `s·cos(θ_y + m)` as used in the softmax.
    pub target_logit: T,
    pub d_e: Vec<T>,
}

/// Cross-entropy over `s·cos θ_j`, with the target logit replaced by
/// `s·cos(θ_y + m)`. Gradients for `w` rows are added to `d_w` when given.
pub fn aam_loss<T: Real>(e: &[T], label: usize, w: &Tensor<T>, margin: f64, scale: f64, d_w: Option<&mut Tensor<T>>) -> Result<AamOutput<T>> {
    let n = w.shape[0];
    if label >= n {
        return Err(Error::Index { index: label, len: n });
    }
    if e.len() != w.shape[1] {
        return Err(Error::Shape(format!("embedding has {} dims, class weights {}", e.len(), w.shape[1])));
    }
    let s = T::lit(scale);
    let e_norm = norm(e).max(T::lit(NORM_EPSILON));
    let e_hat: Vec<T> = e.iter().map(|&v| v / e_norm).collect();
    let w_norm: Vec<T> = (0..n).map(|j| norm(w.row(j)).max(T::lit(NORM_EPSILON))).collect();
    let cos: Vec<T> = (0..n).map(|j| dot(w.row(j), &e_hat) / w_norm[j]).collect();

    let lim = T::lit(COS_CLAMP);
    let c = cos[label].max(-lim).min(lim);
    let sin = (T::one() - c * c).sqrt();
    let (cm, sm) = (T::lit(margin.cos()), T::lit(margin.sin()));
    let target = c * cm - sin * sm;
    let logits: Vec<T> = (0..n).map(|j| s * if j == label { target } else { cos[j] }).collect();
    let mx = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let sum: T = logits.iter().map(|&z| (z - mx).exp()).sum();
    let lse = mx + sum.ln();
    let loss = lse - logits[label];

    let mut d_cos: Vec<T> = logits.iter().map(|&z| (z - mx).exp() / sum * s).collect();
    d_cos[label] -= s;
    let inside = cos[label] > -lim && cos[label] < lim;
    d_cos[label] *= if inside { cm + c * sm / sin } else { T::zero() };

    let mut d_ehat = vec![T::zero(); e.len()];
    for j in 0..n {
        let k = d_cos[j] / w_norm[j];
        d_ehat.iter_mut().zip(w.row(j)).for_each(|(d, &wv)| *d += k * wv);
    }
    if let Some(dw) = d_w {
        for j in 0..n {
            let k = d_cos[j] / w_norm[j];
            let row = w.row(j);
            let cj = cos[j];
            let nj = w_norm[j];
            for ((g, &wv), &eh) in dw.row_mut(j).iter_mut().zip(row).zip(&e_hat) {
                *g += k * (eh - wv / nj * cj);
            }
        }
    }
    let proj = dot(&e_hat, &d_ehat);
    let d_e = d_ehat.iter().zip(&e_hat).map(|(&d, &eh)| (d - eh * proj) / e_norm).collect();
    Ok(AamOutput { loss, target_logit: s * target, d_e })
}

/// Mean AAM loss over labeled feature chunks.
pub struct AamObjective<'a> {
    pub net: &'a NetworkConfig,
    pub chunks: &'a [FeatureMatrix],
    pub labels: &'a [usize],
    pub margin: f64,
    pub scale: f64,
    /// Stop backpropagation at the pooling layer.
    pub freeze_trunk: bool,
}

impl AamObjective<'_> {
    fn sample<T: Real>(&self, p: &ParamSet<T>, i: usize, want_grad: bool) -> Result<(T, Option<Gradients<T>>)> {
        let (e, cache) = forward_embed(p, self.net, &self.chunks[i])?;
        let w = p.get(AAM_W)?;
        if !want_grad {
            let out = aam_loss(&e, self.labels[i], w, self.margin, self.scale, None)?;
            return Ok((out.loss, None));
        }
        let mut g = p.zeros_like();
        let out = aam_loss(&e, self.labels[i], w, self.margin, self.scale, Some(g.get_mut(AAM_W)?))?;
        backward_embed(p, self.net, &cache, &out.d_e, &mut g, self.freeze_trunk)?;
        Ok((out.loss, Some(g)))
    }
}

impl<T: Real> Objective<T> for AamObjective<'_> {
    fn evaluate(&self, params: &ParamSet<T>, grads: Option<&mut Gradients<T>>) -> Result<T> {
        if self.chunks.len() != self.labels.len() || self.chunks.is_empty() {
            return Err(Error::Shape("chunks and labels must be nonempty and paired".into()));
        }
        let want = grads.is_some();
        let parts: Vec<(T, Option<Gradients<T>>)> = (0..self.chunks.len()).into_par_iter().map(|i| self.sample(params, i, want)).collect::<Result<_>>()?;
        let inv = T::one() / T::lit(self.chunks.len() as f64);
        let loss = parts.iter().fold(T::zero(), |a, (l, _)| a + *l) * inv;
        if let Some(g) = grads {
            g.sum_in_order(parts.iter().filter_map(|(_, pg)| pg.as_ref()));
            g.scale(inv);
        }
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub chunk_seconds: f64,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Standardize the embedding layer before training a fresh model.
    pub calibrate: bool,
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            lr: 2e-3,
            min_lr: 1e-5,
            warmup_epochs: 1,
            chunk_seconds: 2.0,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            calibrate: true,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0) || !(self.min_lr >= 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(self.chunk_seconds > 0.0) {
            return Err(Error::config("chunk_seconds", "must be positive"));
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub margin: f64,
    pub wall_ms: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct SupervisedOutcome {
    /// Backbone plus the class weight tensor.
    pub params: ParamSet<f32>,
    pub n_classes: usize,
    pub report: Vec<SupervisedEpoch>,
}

impl SupervisedOutcome {
    pub fn report_jsonl(&self) -> String {
        self.report.iter().map(|r| serde_json::to_string(r).expect("plain struct serializes") + "\n").collect()
    }
}

/// Dense class indices for every speech utterance, in corpus order.
fn dense_labels(corpus: &UnlabeledCorpus, labels: &ClusterAssignment) -> Result<(Vec<usize>, usize)> {
    let missing: Vec<String> = corpus.speech.iter().filter(|(id, _)| !labels.labels.contains_key(id)).map(|(id, _)| id.clone()).collect();
    if !missing.is_empty() {
        return Err(Error::Coverage { missing });
    }
    let raw: Vec<usize> = corpus.speech.iter().map(|(id, _)| labels.labels[id]).collect();
    let remap: BTreeMap<usize, usize> = raw.iter().copied().collect::<BTreeSet<_>>().into_iter().enumerate().map(|(i, l)| (l, i)).collect();
    let n = remap.len();
    if n < 2 {
        return Err(Error::config("labels", "need at least 2 distinct classes"));
    }
    Ok((raw.iter().map(|l| remap[l]).collect(), n))
}

struct Loop<'a> {
    corpus: &'a UnlabeledCorpus,
    net: &'a NetworkConfig,
    labels: Vec<usize>,
    chunk_seconds: f64,
    epochs: usize,
    batch_size: usize,
    schedule_lr: (f64, f64, usize),
    adam: AdamConfig,
    augment: AugmentConfig,
    seed: u64,
    scale: f64,
    freeze_trunk: bool,
    record_wall_time: bool,
}

impl Loop<'_> {
    fn run(&self, mut p: ParamSet<f32>, margin_at: impl Fn(usize) -> f64) -> Result<(ParamSet<f32>, Vec<SupervisedEpoch>)> {
        let maker = ViewMaker::new(&CropConfig::default(), &self.augment, &self.net.features, self.corpus.sample_rate)?;
        let n = self.corpus.speech.len();
        let steps_per_epoch = n.div_ceil(self.batch_size);
        let (base, min, warmup) = self.schedule_lr;
        let schedule = LrSchedule { base, min, warmup_steps: warmup * steps_per_epoch, total_steps: self.epochs * steps_per_epoch };
        let mut adam = AdamState::fresh(&p);
        let mut report = Vec::with_capacity(self.epochs);
        let mut step = 0;
        for epoch in 0..self.epochs {
            let started = Instant::now();
            let margin = margin_at(epoch);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng_from(self.seed, &[tag("order"), epoch as u64]));
            let mut loss_sum = 0.0;
            for batch in order.chunks(self.batch_size) {
                let chunks: Vec<FeatureMatrix> = batch
                    .par_iter()
                    .map(|&i| {
                        let s = sub_seed(self.seed, &[tag("chunk"), epoch as u64, i as u64]);
                        maker.chunk(&self.corpus.speech[i].1, &self.corpus.bank, self.chunk_seconds, s)
                    })
                    .collect::<Result<_>>()?;
                let labels: Vec<usize> = batch.iter().map(|&i| self.labels[i]).collect();
                let objective = AamObjective { net: self.net, chunks: &chunks, labels: &labels, margin, scale: self.scale, freeze_trunk: self.freeze_trunk };
                let (loss, grads) = backward(&p, &objective)?;
                loss_sum += f64::from(loss) * batch.len() as f64;
                let freeze = self.freeze_trunk;
                adam_step(&mut p, &grads, &mut adam, schedule.at(step), &self.adam, |t| {
                    !is_frozen_by_design(&t.name) && !(freeze && t.group == Group::PrePooling)
                })?;
                renormalize_rows(p.get_mut(AAM_W)?);
                step += 1;
            }
            report.push(SupervisedEpoch {
                epoch,
                loss: loss_sum / n as f64,
                margin,
                wall_ms: self.record_wall_time.then(|| started.elapsed().as_millis() as u64),
            });
        }
        Ok((p, report))
    }
}

/// Train a network on pseudo-labels with AAM softmax and margin warmup.
/// Starts from a fresh initialization unless `init` provides backbone
/// tensors to continue from.
pub fn train_supervised(
    corpus: &UnlabeledCorpus,
    labels: &ClusterAssignment,
    net: &NetworkConfig,
    aam: &AamConfig,
    cfg: &TrainConfig,
    init: Option<&ParamSet<f32>>,
) -> Result<SupervisedOutcome> {
    net.validate()?;
    aam.validate()?;
    cfg.validate()?;
    let (dense, n_classes) = dense_labels(corpus, labels)?;
    let mut p: ParamSet<f32> = init_backbone(net, sub_seed(cfg.seed, &[tag("init")]))?;
    if init.is_none() && cfg.calibrate {
        let all: Vec<usize> = (0..corpus.speech.len()).collect();
        calibrate_embedding(&mut p, net, &calibration_features(corpus, &all, net)?)?;
    }
    if let Some(src) = init {
        for t in p.tensors.iter_mut() {
            let s = src.get(&t.name)?;
            if s.shape != t.shape {
                return Err(Error::Shape(format!("warm start tensor {} has a different shape", t.name)));
            }
            t.data.clone_from(&s.data);
        }
    }
    p.push(init_class_weights(n_classes, net.embed_dim, sub_seed(cfg.seed, &[tag("classes")])));
    let lp = Loop {
        corpus,
        net,
        labels: dense,
        chunk_seconds: cfg.chunk_seconds,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        schedule_lr: (cfg.lr, cfg.min_lr, cfg.warmup_epochs),
        adam: cfg.adam,
        augment: cfg.augment.clone(),
        seed: cfg.seed,
        scale: aam.scale,
        freeze_trunk: false,
        record_wall_time: cfg.record_wall_time,
    };
    let (params, report) = lp.run(p, |e| margin_schedule(e, aam))?;
    Ok(SupervisedOutcome { params, n_classes, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub chunk_seconds: f64,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub record_wall_time: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 32,
            lr: 2e-4,
            chunk_seconds: 3.0,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            min_lr: 0.0,
            warmup_epochs: 0,
            chunk_seconds: self.chunk_seconds,
            adam: self.adam,
            augment: self.augment.clone(),
            seed: self.seed,
            calibrate: false,
            record_wall_time: false,
        }
        .validate()
    }
}

/// Continue training only the post-pooling tensors and class weights at
/// the large margin with no warmup. Pre-pooling tensors are never written.
pub fn large_margin_finetune(
    params: &ParamSet<f32>,
    corpus: &UnlabeledCorpus,
    labels: &ClusterAssignment,
    net: &NetworkConfig,
    aam: &AamConfig,
    cfg: &FinetuneConfig,
) -> Result<SupervisedOutcome> {
    aam.validate()?;
    cfg.validate()?;
    if !params.tensors.iter().any(|t| t.group == Group::PrePooling) {
        return Err(Error::Checkpoint("no pre-pooling tensors in checkpoint".into()));
    }
    let w = params.get(AAM_W).map_err(|_| Error::Checkpoint("checkpoint has no class weights".into()))?;
    let (dense, n_classes) = dense_labels(corpus, labels)?;
    if w.shape[0] != n_classes {
        return Err(Error::Checkpoint(format!("checkpoint has {} classes, labels have {}", w.shape[0], n_classes)));
    }
    let lp = Loop {
        corpus,
        net,
        labels: dense,
        chunk_seconds: cfg.chunk_seconds,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        schedule_lr: (cfg.lr, cfg.lr, 0),
        adam: cfg.adam,
        augment: cfg.augment.clone(),
        seed: cfg.seed,
        scale: aam.scale,
        freeze_trunk: true,
        record_wall_time: cfg.record_wall_time,
    };
    let (params, report) = lp.run(params.clone(), |_| aam.large_margin)?;
    Ok(SupervisedOutcome { params, n_classes, report })
}
