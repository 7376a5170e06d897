//! Log mel-filterbank features with short-time mean normalization.
//!
//! Per frame: periodic Hann window, zero-padded real DFT (next power of two),
//! power spectrum, triangular HTK-mel filters, natural log with a floor.

use std::io::{Read, Write};
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::corpus::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub n_mels: usize,
    pub win_ms: f64,
    pub hop_ms: f64,
    pub norm_window_ms: f64,
    pub fmin: f64,
    /// `None` means the Nyquist frequency.
    pub fmax: Option<f64>,
    pub log_floor: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { n_mels: 80, win_ms: 25.0, hop_ms: 10.0, norm_window_ms: 150.0, fmin: 20.0, fmax: None, log_floor: 1e-10 }
    }
}

impl FeatureConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if self.n_mels == 0 {
            return Err(Error::config("n_mels", "must be positive"));
        }
        if !(self.hop_ms > 0.0) || !(self.win_ms > self.hop_ms) {
            return Err(Error::config("win_ms", "need win_ms > hop_ms > 0"));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let fmax = self.fmax.unwrap_or(nyquist);
        if fmax > nyquist || !(fmax > self.fmin) || self.fmin < 0.0 {
            return Err(Error::config("fmax", format!("need 0 <= fmin < fmax <= {nyquist}")));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::config("log_floor", "must be positive"));
        }
        if !(self.norm_window_ms > 0.0) {
            return Err(Error::config("norm_window_ms", "must be positive"));
        }
        Ok(())
    }

    pub fn win_samples(&self, sample_rate: u32) -> usize {
        (self.win_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (self.hop_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    /// Frames produced for `n` samples, or `None` when shorter than a window.
    pub fn frame_count(&self, n: usize, sample_rate: u32) -> Option<usize> {
        let win = self.win_samples(sample_rate);
        (n >= win).then(|| (n - win) / self.hop_samples(sample_rate) + 1)
    }
}

/// Time-major `frames x n_mels` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Vec<f64>,
    pub n_frames: usize,
    pub n_dims: usize,
    /// Frames per second.
    pub frame_rate: f64,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f64>, n_frames: usize, n_dims: usize, frame_rate: f64) -> Self {
        assert_eq!(data.len(), n_frames * n_dims);
        Self { data, n_frames, n_dims, frame_rate }
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * self.n_dims..(t + 1) * self.n_dims]
    }

    /// Debug dump: `u32 T`, `u32 n_mels`, then `f32` little-endian values.
    pub fn write_dump<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(&(self.n_frames as u32).to_le_bytes())?;
        w.write_all(&(self.n_dims as u32).to_le_bytes())?;
        for &v in &self.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R, frame_rate: f64) -> std::io::Result<Self> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let t = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b4)?;
        let d = u32::from_le_bytes(b4) as usize;
        let mut data = Vec::with_capacity(t * d);
        for _ in 0..t * d {
            r.read_exact(&mut b4)?;
            data.push(f32::from_le_bytes(b4) as f64);
        }
        Ok(Self::new(data, t, d, frame_rate))
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the mel filters.
pub fn mel_centers(n_mels: usize, fmin: f64, fmax: f64) -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    (1..=n_mels).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64)).collect()
}

/// One triangular filter, stored sparsely as (first bin, weights).
#[derive(Debug, Clone)]
struct Filter {
    start: usize,
    weights: Vec<f64>,
}

/// Precomputed window, FFT plan and filterbank for one (config, rate) pair.
pub struct LogMel {
    cfg: FeatureConfig,
    sample_rate: u32,
    win: usize,
    hop: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    n_fft: usize,
    filters: Vec<Filter>,
}

impl LogMel {
    pub fn new(cfg: &FeatureConfig, sample_rate: u32) -> Result<Self> {
        cfg.validate(sample_rate)?;
        let win = cfg.win_samples(sample_rate);
        let hop = cfg.hop_samples(sample_rate);
        let n_fft = win.next_power_of_two();
        let window = (0..win).map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos()).collect();
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        let fmax = cfg.fmax.unwrap_or(sample_rate as f64 / 2.0);
        let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(fmax));
        let edges: Vec<f64> = (0..cfg.n_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64)).collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                let mut start = None;
                let mut weights = Vec::new();
                for k in 0..n_bins {
                    let f = k as f64 * bin_hz;
                    let w = if f > l && f <= c {
                        (f - l) / (c - l)
                    } else if f > c && f < r {
                        (r - f) / (r - c)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        start.get_or_insert(k);
                        weights.push(w);
                    } else if start.is_some() {
                        break;
                    }
                }
                Filter { start: start.unwrap_or(0), weights }
            })
            .collect();
        Ok(Self { cfg: cfg.clone(), sample_rate, win, hop, window, fft, n_fft, filters })
    }

    pub fn compute(&self, w: &Waveform) -> Result<FeatureMatrix> {
        if w.sample_rate != self.sample_rate {
            return Err(Error::Format { property: "sample rate", found: w.sample_rate.to_string(), expected: self.sample_rate.to_string() });
        }
        let n_frames = self.cfg.frame_count(w.len(), w.sample_rate).ok_or(Error::Length { what: "waveform", needed: self.win, got: w.len() })?;
        let n_mels = self.cfg.n_mels;
        let log_floor = self.cfg.log_floor;
        let mut data = vec![0.0; n_frames * n_mels];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; self.n_fft / 2 + 1];
        for t in 0..n_frames {
            let off = t * self.hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < self.win { Complex::new(w.samples[off + i] as f64 * self.window[i], 0.0) } else { Complex::new(0.0, 0.0) };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            let row = &mut data[t * n_mels..(t + 1) * n_mels];
            for (out, f) in row.iter_mut().zip(&self.filters) {
                let e: f64 = f.weights.iter().zip(&power[f.start..]).map(|(w, p)| w * p).sum();
                *out = e.max(log_floor).ln();
            }
        }
        Ok(FeatureMatrix::new(data, n_frames, n_mels, self.sample_rate as f64 / self.hop as f64))
    }
}

/// Log mel-filterbank energies of `w`.
pub fn logmel(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    LogMel::new(cfg, w.sample_rate)?.compute(w)
}

/// Window length in frames for a normalization window in milliseconds.
pub fn norm_window_frames(frame_rate: f64, norm_window_ms: f64) -> usize {
    ((norm_window_ms * frame_rate / 1000.0).round() as usize).max(1)
}

/// Subtract from every frame the per-dimension mean over a centered window
/// of frames, truncated at the edges.
pub fn st_mean_normalize(f: &FeatureMatrix, norm_window_ms: f64) -> FeatureMatrix {
    let win = norm_window_frames(f.frame_rate, norm_window_ms);
    normalize_frames(f, win)
}

/// [`st_mean_normalize`] with the window given in frames. For frame `t` the
/// window spans `t - (win-1)/2 ..= t + win/2`.
pub fn normalize_frames(f: &FeatureMatrix, win: usize) -> FeatureMatrix {
    let (n, d) = (f.n_frames, f.n_dims);
    let win = win.max(1);
    let mut out = vec![0.0; n * d];
    let back = (win - 1) / 2;
    let ahead = win / 2;
    let mut sum = vec![0.0; d];
    let (mut lo, mut hi) = (0usize, 0usize); // current window is [lo, hi)
    for t in 0..n {
        let want_lo = t.saturating_sub(back);
        let want_hi = (t + ahead + 1).min(n);
        while hi < want_hi {
            f.frame(hi).iter().zip(sum.iter_mut()).for_each(|(x, s)| *s += x);
            hi += 1;
        }
        while lo < want_lo {
            f.frame(lo).iter().zip(sum.iter_mut()).for_each(|(x, s)| *s -= x);
            lo += 1;
        }
        let count = (hi - lo) as f64;
        let row = &mut out[t * d..(t + 1) * d];
        // Saturated windows recompute the mean directly so the global case is
        // exactly mean subtraction.
        if lo == 0 && hi == n {
            for (k, o) in row.iter_mut().enumerate() {
                let mean = (0..n).map(|s| f.data[s * d + k]).sum::<f64>() / n as f64;
                *o = f.data[t * d + k] - mean;
            }
        } else {
            for (k, o) in row.iter_mut().enumerate() {
                *o = f.data[t * d + k] - sum[k] / count;
            }
        }
    }
    FeatureMatrix::new(out, n, d, f.frame_rate)
}

/// `logmel` followed by short-time mean normalization.
pub fn extract(w: &Waveform, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    Ok(st_mean_normalize(&logmel(w, cfg)?, cfg.norm_window_ms))
}
