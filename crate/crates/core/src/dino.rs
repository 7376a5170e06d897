//! Teacher/student self-distillation without labels.
//!
//! Each utterance yields several global and local views. The student sees
//! every view, the teacher only the global ones. Teacher outputs are
//! centered and sharpened into target distributions and the student is
//! trained to match them across views. The teacher follows the student as
//! an exponential moving average.

use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::UnlabeledCorpus;
use crate::error::{Error, Result};
use crate::features::{st_mean_normalize, FeatureMatrix, LogMel};
use crate::network::{
    adam_step, backward, backward_embed, backward_head, calibrate_embedding, forward_embed, forward_head, init_backbone, init_head, is_frozen_by_design,
    AdamConfig, AdamState, Gradients, LrSchedule, NetworkConfig, Objective, ParamSet, ProjectionConfig,
};
use crate::real::Real;
use crate::rng::{rng_from, sub_seed, tag};
use crate::views::{AugmentConfig, CropConfig, ViewMaker, ViewSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DinoConfig {
    pub tau_student: f64,
    pub tau_teacher: f64,
    pub center_momentum: f64,
    pub ema_lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_epochs: usize,
    pub adam: AdamConfig,
    pub crop: CropConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
    /// Standardize the embedding layer on unaugmented training audio
    /// before the first step.
    pub calibrate: bool,
    /// Record wall-clock time per epoch. Off by default so reports are
    /// reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for DinoConfig {
    fn default() -> Self {
        Self {
            tau_student: 0.1,
            tau_teacher: 0.04,
            center_momentum: 0.9,
            ema_lambda: 0.996,
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            min_lr: 1e-5,
            warmup_epochs: 2,
            adam: AdamConfig::default(),
            crop: CropConfig::default(),
            augment: AugmentConfig::default(),
            seed: 0,
            calibrate: true,
            record_wall_time: false,
        }
    }
}

impl DinoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_student > 0.0) {
            return Err(Error::config("tau_student", "must be positive"));
        }
        if !(self.tau_teacher > 0.0) {
            return Err(Error::config("tau_teacher", "must be positive"));
        }
        if self.tau_teacher >= self.tau_student {
            return Err(Error::config("tau_teacher", "must be below tau_student"));
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(Error::config("center_momentum", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.ema_lambda) {
            return Err(Error::config("ema_lambda", "must lie in [0, 1]"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.lr > 0.0) || !(self.min_lr >= 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        self.crop.validate()?;
        self.augment.validate()
    }
}

/// `softmax((logits − c) / τ)`, with the maximum subtracted first.
pub fn teacher_probs<T: Real>(logits: &[T], center: &[T], tau: T) -> Vec<T> {
    let z: Vec<T> = logits.iter().zip(center).map(|(&l, &c)| (l - c) / tau).collect();
    softmax(&z)
}

fn softmax<T: Real>(z: &[T]) -> Vec<T> {
    let m = z.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `log_softmax(logits / τ)`.
pub fn student_log_probs<T: Real>(logits: &[T], tau: T) -> Vec<T> {
    let z: Vec<T> = logits.iter().map(|&l| l / tau).collect();
    let m = z.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    z.into_iter().map(|v| v - lse).collect()
}

/// Number of (teacher view, student view) pairs in the loss.
pub fn pair_count(n_global: usize, n_local: usize) -> usize {
    n_global * (n_global - 1) + n_global * n_local
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss<T> {
    pub loss: T,
    pub n_pairs: usize,
    /// `dL/d(student logits)` per view.
    pub d_student: Vec<Vec<T>>,
}

/// Mean cross-entropy `H(P_t(g), P_s(v))` over global views `g` and all
/// views `v ≠ g`. `targets` holds one teacher distribution per global view;
/// `student` holds logits for every view, globals first.
pub fn cross_view_loss<T: Real>(targets: &[Vec<T>], student: &[Vec<T>], tau_student: T) -> Result<PairLoss<T>> {
    let n_g = targets.len();
    if n_g < 2 {
        return Err(Error::config("n_global", "need at least 2 global views"));
    }
    if student.len() < n_g {
        return Err(Error::Shape(format!("{} student views for {} global views", student.len(), n_g)));
    }
    let n_pairs = pair_count(n_g, student.len() - n_g);
    let inv = T::one() / T::lit(n_pairs as f64);
    let mut loss = T::zero();
    let mut d_student = Vec::with_capacity(student.len());
    for (v, s) in student.iter().enumerate() {
        let logp = student_log_probs(s, tau_student);
        let q: Vec<T> = logp.iter().map(|&l| l.exp()).collect();
        let mut d = vec![T::zero(); s.len()];
        for (g, p) in targets.iter().enumerate() {
            if g == v {
                continue;
            }
            if p.len() != s.len() {
                return Err(Error::Shape(format!("teacher has {} outputs, student {}", p.len(), s.len())));
            }
            let h: T = p.iter().zip(&logp).map(|(&a, &b)| -a * b).sum();
            loss += h * inv;
            for ((di, &pi), &qi) in d.iter_mut().zip(p).zip(&q) {
                *di += (qi - pi) / tau_student * inv;
            }
        }
        d_student.push(d);
    }
    Ok(PairLoss { loss, n_pairs, d_student })
}

/// Cross-view loss from raw teacher logits: targets are centered and
/// sharpened first and carry no gradient.
pub fn dino_loss<T: Real>(student: &[Vec<T>], teacher: &[Vec<T>], center: &[T], tau_teacher: T, tau_student: T) -> Result<PairLoss<T>> {
    let targets: Vec<Vec<T>> = teacher.iter().map(|t| teacher_probs(t, center, tau_teacher)).collect();
    cross_view_loss(&targets, student, tau_student)
}

/// `c' = m·c + (1 − m)·mean(batch)`.
pub fn update_center(center: &[f64], batch: &[Vec<f64>], momentum: f64) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Shape("empty teacher batch".into()));
    }
    let k = center.len();
    let mut mean = vec![0.0; k];
    for row in batch {
        if row.len() != k {
            return Err(Error::Shape(format!("teacher output has {} dims, center {}", row.len(), k)));
        }
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
    }
    let n = batch.len() as f64;
    Ok(center.iter().zip(&mean).map(|(&c, &s)| momentum * c + (1.0 - momentum) * (s / n)).collect())
}

/// `θ_t ← λ·θ_t + (1 − λ)·θ_s` for every tensor.
pub fn ema_update<T: Real>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, lambda: f64) -> Result<()> {
    teacher.check_congruent(student)?;
    let l = T::lit(lambda);
    let r = T::lit(1.0 - lambda);
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        t.data.iter_mut().zip(&s.data).for_each(|(a, &b)| *a = l * *a + r * b);
    }
    Ok(())
}

/// `KL(p ‖ uniform) = log K + Σ p log p`.
pub fn kl_from_uniform(p: &[f64]) -> f64 {
    let k = p.len() as f64;
    k.ln() + p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Student loss over a batch of view sets against fixed teacher targets.
pub struct DinoObjective<'a> {
    pub net: &'a NetworkConfig,
    pub views: &'a [ViewSet],
    /// Per view set, one target distribution per global view.
    pub targets: &'a [Vec<Vec<f64>>],
    pub tau_student: f64,
}

impl DinoObjective<'_> {
    fn sample<T: Real>(&self, p: &ParamSet<T>, i: usize, want_grad: bool) -> Result<(T, Option<Gradients<T>>)> {
        let vs = &self.views[i];
        let mut logits = Vec::new();
        let mut caches = Vec::new();
        for f in vs.all_views() {
            let (e, ec) = forward_embed(p, self.net, f)?;
            let (l, hc) = forward_head(p, &e)?;
            logits.push(l);
            caches.push((ec, hc));
        }
        let targets: Vec<Vec<T>> = self.targets[i].iter().map(|t| t.iter().map(|&v| T::lit(v)).collect()).collect();
        let pl = cross_view_loss(&targets, &logits, T::lit(self.tau_student))?;
        if !want_grad {
            return Ok((pl.loss, None));
        }
        let mut g = p.zeros_like();
        for ((ec, hc), d) in caches.iter().zip(&pl.d_student) {
            let d_e = backward_head(p, hc, d, &mut g)?;
            backward_embed(p, self.net, ec, &d_e, &mut g, false)?;
        }
        Ok((pl.loss, Some(g)))
    }
}

impl<T: Real> Objective<T> for DinoObjective<'_> {
    fn evaluate(&self, params: &ParamSet<T>, grads: Option<&mut Gradients<T>>) -> Result<T> {
        if self.views.len() != self.targets.len() || self.views.is_empty() {
            return Err(Error::Shape("views and targets must be nonempty and paired".into()));
        }
        let want = grads.is_some();
        let parts: Vec<(T, Option<Gradients<T>>)> = (0..self.views.len()).into_par_iter().map(|i| self.sample(params, i, want)).collect::<Result<_>>()?;
        let inv = T::one() / T::lit(self.views.len() as f64);
        let loss = parts.iter().fold(T::zero(), |a, (l, _)| a + *l) * inv;
        if let Some(g) = grads {
            g.sum_in_order(parts.iter().filter_map(|(_, pg)| pg.as_ref()));
            g.scale(inv);
        }
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DinoEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub kl_from_uniform: f64,
    pub wall_ms: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct DinoOutcome {
    pub teacher: ParamSet<f32>,
    pub student: ParamSet<f32>,
    pub center: Vec<f64>,
    pub report: Vec<DinoEpoch>,
    pub warnings: Vec<String>,
}

impl DinoOutcome {
    /// One JSON object per epoch.
    pub fn report_jsonl(&self) -> String {
        self.report.iter().map(|r| serde_json::to_string(r).expect("plain struct serializes") + "\n").collect()
    }
}

/// Initial student parameters; the teacher starts as an exact copy.
pub fn init_dino(net: &NetworkConfig, proj: &ProjectionConfig, seed: u64) -> Result<ParamSet<f32>> {
    let mut p = init_backbone(net, sub_seed(seed, &[tag("init")]))?;
    init_head(&mut p, net, proj, sub_seed(seed, &[tag("init-head")]))?;
    Ok(p)
}

/// Whole-utterance features of up to 128 training utterances.
pub fn calibration_features(corpus: &UnlabeledCorpus, pool: &[usize], net: &NetworkConfig) -> Result<Vec<FeatureMatrix>> {
    let lm = LogMel::new(&net.features, corpus.sample_rate)?;
    pool.iter()
        .take(128)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&&i| Ok(st_mean_normalize(&lm.compute(&corpus.speech[i].1)?, net.features.norm_window_ms)))
        .collect()
}

/// Teacher logits for the global views of one view set.
pub fn teacher_logits(p: &ParamSet<f32>, net: &NetworkConfig, vs: &ViewSet) -> Result<Vec<Vec<f64>>> {
    vs.global_views
        .iter()
        .map(|f| {
            let (e, _) = forward_embed(p, net, f)?;
            let (l, _) = forward_head(p, &e)?;
            Ok(l.into_iter().map(f64::from).collect())
        })
        .collect()
}

/// Train the student with Adam and track it with the EMA teacher. The
/// teacher is the embedding model handed to later stages.
pub fn train_dino(corpus: &UnlabeledCorpus, net: &NetworkConfig, proj: &ProjectionConfig, cfg: &DinoConfig) -> Result<DinoOutcome> {
    train_dino_observed(corpus, net, proj, cfg, |_| {})
}

/// [`train_dino`] with a callback after every epoch.
pub fn train_dino_observed(
    corpus: &UnlabeledCorpus,
    net: &NetworkConfig,
    proj: &ProjectionConfig,
    cfg: &DinoConfig,
    mut observe: impl FnMut(&DinoEpoch),
) -> Result<DinoOutcome> {
    cfg.validate()?;
    net.validate()?;
    proj.validate()?;
    let maker = ViewMaker::new(&cfg.crop, &cfg.augment, &net.features, corpus.sample_rate)?;
    let need = (cfg.crop.global_seconds * corpus.sample_rate as f64).round() as usize;
    let pool: Vec<usize> = (0..corpus.speech.len()).filter(|&i| corpus.speech[i].1.len() >= need).collect();
    let mut warnings = Vec::new();
    if pool.len() < corpus.speech.len() {
        warnings.push(format!("{} utterances shorter than {} s skipped", corpus.speech.len() - pool.len(), cfg.crop.global_seconds));
    }
    if pool.len() < cfg.batch_size {
        return Err(Error::Capacity { what: "utterances long enough for a global view", requested: cfg.batch_size, available: pool.len() });
    }

    let mut student = init_dino(net, proj, cfg.seed)?;
    if cfg.calibrate {
        let samples = calibration_features(corpus, &pool, net)?;
        calibrate_embedding(&mut student, net, &samples)?;
    }
    let mut teacher = student.clone();
    let mut center = vec![0.0f64; proj.k];
    let mut adam = AdamState::fresh(&student);
    let steps_per_epoch = pool.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule { base: cfg.lr, min: cfg.min_lr, warmup_steps: cfg.warmup_epochs * steps_per_epoch, total_steps: cfg.epochs * steps_per_epoch };
    let mut report = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order = pool.clone();
        order.shuffle(&mut rng_from(cfg.seed, &[tag("order"), epoch as u64]));
        let (mut loss_sum, mut kl_sum, mut kl_n) = (0.0f64, 0.0f64, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let views: Vec<ViewSet> = batch
                .par_iter()
                .map(|&i| {
                    let (id, w) = &corpus.speech[i];
                    let s = sub_seed(cfg.seed, &[tag("views"), epoch as u64, i as u64]);
                    maker.make(w, id, &corpus.bank, s)
                })
                .collect::<Result<_>>()?;
            let t_logits: Vec<Vec<Vec<f64>>> = views.par_iter().map(|vs| teacher_logits(&teacher, net, vs)).collect::<Result<_>>()?;
            let targets: Vec<Vec<Vec<f64>>> = t_logits.iter().map(|per| per.iter().map(|l| teacher_probs(l, &center, cfg.tau_teacher)).collect()).collect();
            for p in targets.iter().flatten() {
                kl_sum += kl_from_uniform(p);
                kl_n += 1;
            }
            let objective = DinoObjective { net, views: &views, targets: &targets, tau_student: cfg.tau_student };
            let (loss, grads) = backward(&student, &objective)?;
            loss_sum += f64::from(loss) * batch.len() as f64;
            adam_step(&mut student, &grads, &mut adam, schedule.at(step), &cfg.adam, |t| !is_frozen_by_design(&t.name))?;
            ema_update(&mut teacher, &student, cfg.ema_lambda)?;
            let flat: Vec<Vec<f64>> = t_logits.into_iter().flatten().collect();
            center = update_center(&center, &flat, cfg.center_momentum)?;
            step += 1;
        }
        let kl = kl_sum / kl_n as f64;
        if kl < 1e-4 {
            warnings.push(format!("epoch {epoch}: teacher outputs near uniform (KL {kl:.2e}), possible collapse"));
        }
        let rec = DinoEpoch {
            epoch,
            loss: loss_sum / order.len() as f64,
            kl_from_uniform: kl,
            wall_ms: cfg.record_wall_time.then(|| started.elapsed().as_millis() as u64),
        };
        observe(&rec);
        report.push(rec);
    }
    Ok(DinoOutcome { teacher, student, center, report, warnings })
}
