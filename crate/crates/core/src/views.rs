//! Multi-crop views for self-distillation: long "global" and short "local"
//! segments from random positions of one utterance, each augmented on its
//! own with additive noise and reverberation, then turned into normalized
//! log-mel features.

use std::sync::Arc;

use rand::Rng as _;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::corpus::{AudioBank, Waveform};
use crate::error::{Error, Result};
use crate::features::{st_mean_normalize, FeatureConfig, FeatureMatrix, LogMel};
use crate::rng::{rng_from, sub_seed, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    pub n_global: usize,
    pub n_local: usize,
    pub global_seconds: f64,
    pub local_seconds: f64,
}

impl Default for CropConfig {
    fn default() -> Self {
        Self { n_global: 2, n_local: 4, global_seconds: 3.0, local_seconds: 2.0 }
    }
}

impl CropConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_global < 2 {
            return Err(Error::config("n_global", "need at least 2 global views"));
        }
        if !(self.local_seconds > 0.0) || !(self.global_seconds > self.local_seconds) {
            return Err(Error::config("global_seconds", "need global_seconds > local_seconds > 0"));
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.n_global + self.n_local
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub p_noise: f64,
    /// Inclusive SNR range in dB.
    pub snr_db: (f64, f64),
    pub p_rir: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { p_noise: 0.6, snr_db: (0.0, 15.0), p_rir: 0.4 }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { p_noise: 0.0, snr_db: (0.0, 0.0), p_rir: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_noise) {
            return Err(Error::config("p_noise", "must be a probability"));
        }
        if !(0.0..=1.0).contains(&self.p_rir) {
            return Err(Error::config("p_rir", "must be a probability"));
        }
        if !(self.snr_db.0 <= self.snr_db.1) {
            return Err(Error::config("snr_db", "range is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewKind {
    Global,
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub kind: ViewKind,
    pub offset: usize,
    pub audio: Waveform,
}

/// Cut `n_global` global then `n_local` local segments at uniform random
/// offsets. Never pads.
pub fn crop(w: &Waveform, cfg: &CropConfig, seed: u64) -> Result<Vec<Segment>> {
    cfg.validate()?;
    let g_len = w.seconds_to_samples(cfg.global_seconds);
    let l_len = w.seconds_to_samples(cfg.local_seconds);
    if w.len() < g_len {
        return Err(Error::Length { what: "utterance", needed: g_len, got: w.len() });
    }
    let mut rng = rng_from(seed, &[tag("crop")]);
    let kinds = std::iter::repeat_n(ViewKind::Global, cfg.n_global).chain(std::iter::repeat_n(ViewKind::Local, cfg.n_local));
    Ok(kinds
        .map(|kind| {
            let len = if kind == ViewKind::Global { g_len } else { l_len };
            let offset = rng.random_range(0..=w.len() - len);
            Segment { kind, offset, audio: Waveform::new(w.samples[offset..offset + len].to_vec(), w.sample_rate) }
        })
        .collect())
}

fn power(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len().max(1) as f64
}

/// `len` samples of `clip` starting at `offset`, wrapping around.
fn tiled(clip: &[f32], offset: usize, len: usize) -> Vec<f32> {
    (0..len).map(|i| clip[(offset + i) % clip.len()]).collect()
}

/// Scale `noise` so that signal-to-noise power is `snr_db` and return it.
/// Silent inputs leave the noise unscaled at zero gain.
pub fn scale_to_snr(signal: &[f32], noise: &[f32], snr_db: f64) -> Vec<f32> {
    let (ps, pn) = (power(signal), power(noise));
    if ps == 0.0 || pn == 0.0 {
        return vec![0.0; noise.len()];
    }
    let gain = (ps / (pn * 10f64.powf(snr_db / 10.0))).sqrt();
    noise.iter().map(|&v| (v as f64 * gain) as f32).collect()
}

/// Linear convolution truncated to `x.len()` samples.
pub fn convolve_truncated(x: &[f32], h: &[f32]) -> Vec<f32> {
    let n = x.len();
    if h.len() <= 64 {
        let mut y = vec![0.0f64; n];
        for (i, yi) in y.iter_mut().enumerate() {
            for (j, &hj) in h.iter().enumerate().take(i + 1) {
                *yi += hj as f64 * x[i - j] as f64;
            }
        }
        return y.into_iter().map(|v| v as f32).collect();
    }
    let size = (n + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let pad = |s: &[f32]| {
        let mut b: Vec<Complex<f64>> = s.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
        b.resize(size, Complex::new(0.0, 0.0));
        b
    };
    let mut a = pad(x);
    let mut b = pad(h);
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= q);
    inv.process(&mut a);
    a[..n].iter().map(|c| (c.re / size as f64) as f32).collect()
}

/// Augment one segment. Random decisions are drawn in a fixed order from the
/// seed so each one is reproducible.
pub fn augment(seg: &Waveform, bank: &AudioBank, cfg: &AugmentConfig, seed: u64) -> Result<Waveform> {
    cfg.validate()?;
    if cfg.p_noise > 0.0 && bank.noises.is_empty() {
        return Err(Error::config("noise_bank", "p_noise > 0 but the noise bank is empty"));
    }
    if cfg.p_rir > 0.0 && bank.rirs.is_empty() {
        return Err(Error::config("rir_bank", "p_rir > 0 but the rir bank is empty"));
    }
    let mut rng = rng_from(seed, &[tag("augment")]);
    let use_noise = rng.random::<f64>() < cfg.p_noise;
    let use_rir = rng.random::<f64>() < cfg.p_rir;
    let mut x = seg.samples.clone();
    if use_rir {
        let h = &bank.rirs[rng.random_range(0..bank.rirs.len())];
        x = convolve_truncated(&x, &h.samples);
    }
    if use_noise {
        let clip = &bank.noises[rng.random_range(0..bank.noises.len())];
        let offset = rng.random_range(0..clip.len().max(1));
        let snr = if cfg.snr_db.1 > cfg.snr_db.0 { rng.random_range(cfg.snr_db.0..=cfg.snr_db.1) } else { cfg.snr_db.0 };
        let noise = scale_to_snr(&x, &tiled(&clip.samples, offset, x.len()), snr);
        x.iter_mut().zip(&noise).for_each(|(s, n)| *s += n);
    }
    let peak = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak > 1.0 {
        x.iter_mut().for_each(|v| *v /= peak);
    }
    Ok(Waveform::new(x, seg.sample_rate))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub global_views: Vec<FeatureMatrix>,
    pub local_views: Vec<FeatureMatrix>,
    pub source_utt: String,
}

impl ViewSet {
    /// Globals first, then locals.
    pub fn all_views(&self) -> impl Iterator<Item = &FeatureMatrix> {
        self.global_views.iter().chain(self.local_views.iter())
    }
}

/// Seeds for one view set: the crop seed and one augmentation seed per view.
pub fn view_seeds(seed: u64, n_views: usize) -> (u64, Vec<u64>) {
    (sub_seed(seed, &[tag("crop")]), (0..n_views as u64).map(|i| sub_seed(seed, &[tag("view"), i])).collect())
}

/// Reusable crop, augmentation and feature pipeline.
pub struct ViewMaker {
    pub crop: CropConfig,
    pub augment: AugmentConfig,
    norm_window_ms: f64,
    logmel: Arc<LogMel>,
}

impl ViewMaker {
    pub fn new(crop: &CropConfig, augment: &AugmentConfig, features: &FeatureConfig, sample_rate: u32) -> Result<Self> {
        crop.validate()?;
        augment.validate()?;
        Ok(Self {
            crop: crop.clone(),
            augment: augment.clone(),
            norm_window_ms: features.norm_window_ms,
            logmel: Arc::new(LogMel::new(features, sample_rate)?),
        })
    }

    pub fn make(&self, w: &Waveform, utt_id: &str, bank: &AudioBank, seed: u64) -> Result<ViewSet> {
        let (crop_seed, aug_seeds) = view_seeds(seed, self.crop.n_views());
        self.make_with_seeds(w, utt_id, bank, crop_seed, &aug_seeds)
    }

    pub fn make_with_seeds(&self, w: &Waveform, utt_id: &str, bank: &AudioBank, crop_seed: u64, aug_seeds: &[u64]) -> Result<ViewSet> {
        if aug_seeds.len() != self.crop.n_views() {
            return Err(Error::Shape(format!("need {} view seeds, got {}", self.crop.n_views(), aug_seeds.len())));
        }
        let segments = crop(w, &self.crop, crop_seed)?;
        let mut set = ViewSet {
            global_views: Vec::with_capacity(self.crop.n_global),
            local_views: Vec::with_capacity(self.crop.n_local),
            source_utt: utt_id.to_string(),
        };
        for (seg, &s) in segments.iter().zip(aug_seeds) {
            let audio = augment(&seg.audio, bank, &self.augment, s)?;
            let feats = st_mean_normalize(&self.logmel.compute(&audio)?, self.norm_window_ms);
            match seg.kind {
                ViewKind::Global => set.global_views.push(feats),
                ViewKind::Local => set.local_views.push(feats),
            }
        }
        Ok(set)
    }

    /// Features of one augmented random chunk, used by supervised training.
    /// Utterances shorter than `seconds` are used whole.
    pub fn chunk(&self, w: &Waveform, bank: &AudioBank, seconds: f64, seed: u64) -> Result<FeatureMatrix> {
        let len = w.seconds_to_samples(seconds).min(w.len());
        let mut rng = rng_from(seed, &[tag("chunk")]);
        let offset = rng.random_range(0..=w.len() - len);
        let seg = Waveform::new(w.samples[offset..offset + len].to_vec(), w.sample_rate);
        let audio = augment(&seg, bank, &self.augment, sub_seed(seed, &[tag("chunk-aug")]))?;
        Ok(st_mean_normalize(&self.logmel.compute(&audio)?, self.norm_window_ms))
    }
}

/// Crop, augment each view independently, extract normalized features.
pub fn make_view_set(
    w: &Waveform,
    utt_id: &str,
    bank: &AudioBank,
    crop_cfg: &CropConfig,
    aug_cfg: &AugmentConfig,
    feat_cfg: &FeatureConfig,
    seed: u64,
) -> Result<ViewSet> {
    ViewMaker::new(crop_cfg, aug_cfg, feat_cfg, w.sample_rate)?.make(w, utt_id, bank, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(seconds: f64) -> Waveform {
        let n = (seconds * 16000.0) as usize;
        Waveform::new((0..n).map(|i| ((i % 97) as f32 / 97.0 - 0.5) * 0.4).collect(), 16000)
    }

    fn noise_bank() -> AudioBank {
        let mut rng = rng_from(5, &[]);
        let noise: Vec<f32> = (0..20000).map(|_| rng.random_range(-0.3..0.3)).collect();
        let mut rir = vec![0.0f32; 800];
        rir[0] = 1.0;
        rir.iter_mut().skip(1).enumerate().for_each(|(i, v)| *v = 0.2 * (-(i as f32) / 200.0).exp() * if i % 2 == 0 { 1.0 } else { -1.0 });
        AudioBank { noises: vec![Arc::new(Waveform::new(noise, 16000))], rirs: vec![Arc::new(Waveform::new(rir, 16000))] }
    }

    #[test]
    fn crop_lengths_are_forced() {
        let segs = crop(&ramp(4.0), &CropConfig::default(), 1).unwrap();
        let lens: Vec<usize> = segs.iter().map(|s| s.audio.len()).collect();
        assert_eq!(lens, vec![48000, 48000, 32000, 32000, 32000, 32000]);
        assert_eq!(segs[0].kind, ViewKind::Global);
        assert_eq!(segs[5].kind, ViewKind::Local);
    }

    #[test]
    fn exact_global_length_forces_offset_zero() {
        let segs = crop(&ramp(3.0), &CropConfig::default(), 2).unwrap();
        assert!(segs.iter().filter(|s| s.kind == ViewKind::Global).all(|s| s.offset == 0));
    }

    #[test]
    fn crop_is_deterministic_and_rejects_short_input() {
        let a = crop(&ramp(5.0), &CropConfig::default(), 3).unwrap();
        let b = crop(&ramp(5.0), &CropConfig::default(), 3).unwrap();
        assert_eq!(a.iter().map(|s| s.offset).collect::<Vec<_>>(), b.iter().map(|s| s.offset).collect::<Vec<_>>());
        assert!(matches!(crop(&ramp(2.5), &CropConfig::default(), 3), Err(Error::Length { .. })));
    }

    #[test]
    fn no_augmentation_is_identity() {
        let w = ramp(1.0);
        let out = augment(&w, &AudioBank::default(), &AugmentConfig::none(), 4).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn zero_db_mix_has_equal_powers() {
        let w = ramp(1.0);
        let bank = noise_bank();
        let noise = scale_to_snr(&w.samples, &bank.noises[0].samples[..w.len()], 0.0);
        let (ps, pn) = (power(&w.samples), power(&noise));
        assert!((ps / pn - 1.0).abs() < 0.01, "{ps} vs {pn}");
    }

    #[test]
    fn unit_impulse_rir_is_identity() {
        let w = ramp(0.5);
        assert_eq!(convolve_truncated(&w.samples, &[1.0]), w.samples);
        let mut long = vec![0.0f32; 300];
        long[0] = 1.0;
        let y = convolve_truncated(&w.samples, &long);
        for (a, b) in y.iter().zip(&w.samples) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fft_convolution_matches_direct_sum() {
        let x: Vec<f32> = (0..500).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
        let h: Vec<f32> = (0..100).map(|i| (-(i as f32) / 20.0).exp() * if i % 3 == 0 { 1.0 } else { -0.5 }).collect();
        let fast = convolve_truncated(&x, &h);
        for i in 0..x.len() {
            let direct: f64 = (0..=i.min(h.len() - 1)).map(|j| h[j] as f64 * x[i - j] as f64).sum();
            assert!((fast[i] as f64 - direct).abs() < 1e-4);
        }
    }

    #[test]
    fn augment_keeps_length_and_bounds() {
        let w = ramp(1.3);
        let cfg = AugmentConfig { p_noise: 1.0, snr_db: (-5.0, 0.0), p_rir: 1.0 };
        for s in 0..10 {
            let out = augment(&w, &noise_bank(), &cfg, s).unwrap();
            assert_eq!(out.len(), w.len());
            assert!(out.samples.iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn empty_bank_with_positive_probability_is_config_error() {
        let cfg = AugmentConfig { p_noise: 0.5, ..AugmentConfig::none() };
        assert!(matches!(augment(&ramp(1.0), &AudioBank::default(), &cfg, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn view_set_shapes() {
        let vs = make_view_set(&ramp(4.0), "u", &noise_bank(), &CropConfig::default(), &AugmentConfig::default(), &FeatureConfig::default(), 7).unwrap();
        assert_eq!(vs.global_views.len(), 2);
        assert_eq!(vs.local_views.len(), 4);
        // floor((48000 - 400) / 160) + 1 and likewise for 32000 samples.
        assert!(vs.global_views.iter().all(|f| f.n_frames == 298));
        assert!(vs.local_views.iter().all(|f| f.n_frames == 198));
    }

    #[test]
    fn view_sets_are_deterministic() {
        let mk = || make_view_set(&ramp(4.0), "u", &noise_bank(), &CropConfig::default(), &AugmentConfig::default(), &FeatureConfig::default(), 9).unwrap();
        assert_eq!(mk(), mk());
    }

    #[test]
    fn changing_one_view_seed_leaves_others() {
        let maker = ViewMaker::new(&CropConfig::default(), &AugmentConfig::default(), &FeatureConfig::default(), 16000).unwrap();
        let bank = noise_bank();
        let w = ramp(4.0);
        let (crop_seed, seeds) = view_seeds(11, 6);
        let base = maker.make_with_seeds(&w, "u", &bank, crop_seed, &seeds).unwrap();
        for i in 0..6 {
            let mut changed = seeds.clone();
            changed[i] ^= 0xdead_beef;
            let other = maker.make_with_seeds(&w, "u", &bank, crop_seed, &changed).unwrap();
            let a: Vec<_> = base.all_views().collect();
            let b: Vec<_> = other.all_views().collect();
            for j in (0..6).filter(|&j| j != i) {
                assert_eq!(a[j], b[j], "view {j} moved when view {i} was reseeded");
            }
        }
    }
}
