//! Synthetic speakers.
//!
//! Each speaker is a harmonic pulse-train source at a fixed fundamental fed
//! through three formant resonators. Utterances are sequences of syllables
//! (voiced bursts with their own pitch glide and small formant drift)
//! separated by pauses, over a white-noise floor 30 dB below the speech.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::wav::quantize;
use super::{AudioSource, CorpusManifest, UttKind, UtteranceRecord, Waveform};
use crate::error::{Error, Result};
use crate::rng::{rng_from, tag, Rng};
use crate::views::convolve_truncated;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_speakers: usize,
    pub utts_per_speaker: usize,
    /// Utterance duration range in seconds, inclusive.
    pub utt_seconds: (f64, f64),
    pub sample_rate: u32,
    pub seed: u64,
    #[serde(default)]
    pub variability: Variability,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self { n_speakers: 20, utts_per_speaker: 20, utt_seconds: (2.0, 4.0), sample_rate: 16000, seed: 1, variability: Variability::default() }
    }
}

/// Within-speaker variation layered on top of the speaker profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Variability {
    /// Per-utterance pitch factor range.
    pub session_f0: (f64, f64),
    /// Scale of the per-syllable vowel shifts applied to F1 and F2; 0 keeps
    /// the speaker's formants.
    pub vowel_spread: f64,
    /// Probability that an utterance is recorded over background noise.
    pub p_noise: f64,
    pub snr_db: (f64, f64),
    /// Probability that an utterance is recorded in a reverberant room.
    pub p_reverb: f64,
    pub t60: (f64, f64),
}

impl Default for Variability {
    fn default() -> Self {
        Self { session_f0: (0.9, 1.1), vowel_spread: 1.0, p_noise: 0.7, snr_db: (5.0, 20.0), p_reverb: 0.5, t60: (0.2, 0.6) }
    }
}

impl Variability {
    /// Speaker profile only: fixed pitch and formants, clean recording.
    pub fn none() -> Self {
        Self { session_f0: (1.0, 1.0), vowel_spread: 0.0, p_noise: 0.0, snr_db: (0.0, 0.0), p_reverb: 0.0, t60: (0.1, 0.1) }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.session_f0;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::config("session_f0", "need 0 < min <= max"));
        }
        if !(0.0..=1.0).contains(&self.vowel_spread) {
            return Err(Error::config("vowel_spread", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.p_noise) || !(self.snr_db.0 <= self.snr_db.1) {
            return Err(Error::config("p_noise", "need a probability and a nonempty SNR range"));
        }
        if !(0.0..=1.0).contains(&self.p_reverb) || !(self.t60.0 > 0.0 && self.t60.1 >= self.t60.0) {
            return Err(Error::config("p_reverb", "need a probability and a positive T60 range"));
        }
        Ok(())
    }
}

/// Relative (F1, F2) shifts of a small vowel inventory.
const VOWELS: [(f64, f64); 6] = [(1.0, 1.0), (1.35, 1.05), (0.6, 1.3), (0.65, 0.7), (0.85, 1.18), (0.95, 0.78)];

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers < 2 {
            return Err(Error::config("n_speakers", "need at least 2 speakers"));
        }
        if self.utts_per_speaker < 1 {
            return Err(Error::config("utts_per_speaker", "need at least 1 utterance per speaker"));
        }
        let (lo, hi) = self.utt_seconds;
        if !(lo >= 1.0) || !(hi >= lo) || !hi.is_finite() {
            return Err(Error::config("utt_seconds", format!("range ({lo}, {hi}) must satisfy 1.0 <= min <= max")));
        }
        if self.sample_rate < 8000 {
            return Err(Error::config("sample_rate", "must be at least 8000 Hz"));
        }
        self.variability.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub f0: f64,
    /// (center Hz, bandwidth Hz), centers strictly increasing.
    pub formants: [(f64, f64); 3],
    pub jitter: f64,
    pub seed: u64,
}

impl SpeakerProfile {
    pub fn sample(speaker_id: String, seed: u64) -> Self {
        let mut rng = rng_from(seed, &[tag("profile")]);
        let f0 = rng.random_range(85.0..260.0);
        let formants = [
            (rng.random_range(300.0..850.0), rng.random_range(50.0..110.0)),
            (rng.random_range(950.0..2300.0), rng.random_range(70.0..150.0)),
            (rng.random_range(2400.0..3400.0), rng.random_range(100.0..220.0)),
        ];
        let jitter = rng.random_range(0.01..0.06);
        Self { speaker_id, f0, formants, jitter, seed }
    }
}

/// Klatt-style two-pole resonator with unity gain at DC.
struct Resonator {
    a: f64,
    b: f64,
    c: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new() -> Self {
        Self { a: 1.0, b: 0.0, c: 0.0, y1: 0.0, y2: 0.0 }
    }

    fn tune(&mut self, freq: f64, bw: f64, sample_rate: f64) {
        let r = (-PI * bw / sample_rate).exp();
        self.c = -r * r;
        self.b = 2.0 * r * (2.0 * PI * freq / sample_rate).cos();
        self.a = 1.0 - self.b - self.c;
    }

    #[inline]
    fn process(&mut self, x: f64) -> f64 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

fn gauss(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Render one utterance of `n` samples. Returns the raw (unscaled) signal.
fn render_voice(profile: &SpeakerProfile, var: &Variability, n: usize, sample_rate: f64, rng: &mut Rng) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let mut res: Vec<Resonator> = (0..3).map(|_| Resonator::new()).collect();
    let mut tilt = 0.0;
    let session = uniform(rng, var.session_f0);
    let utt_f0 = session * profile.f0 * (1.0 + profile.jitter * rng.random_range(-1.0..1.0));

    let mut pos = (rng.random_range(0.02..0.10) * sample_rate) as usize;
    // Silence before the first syllable still passes through the filters.
    let mut syllables = Vec::new();
    while pos < n {
        let len = (rng.random_range(0.12..0.30) * sample_rate) as usize;
        let gap = (rng.random_range(0.04..0.15) * sample_rate) as usize;
        syllables.push((pos, (pos + len).min(n)));
        pos += len + gap;
    }

    let mut phase = 0.0f64;
    let mut next = 0;
    let mut voiced_until = 0;
    let mut f0_start = utt_f0;
    let mut f0_end = utt_f0;
    let mut seg_start = 0;
    let mut gain = 1.0;
    let ramp = 0.02 * sample_rate;
    #[allow(clippy::needless_range_loop)]
    for i in 0..n {
        if next < syllables.len() && i == syllables[next].0 {
            let (s, e) = syllables[next];
            seg_start = s;
            voiced_until = e;
            f0_start = utt_f0 * (1.0 + profile.jitter * rng.random_range(-1.0..1.0));
            f0_end = f0_start * (1.0 + rng.random_range(-0.08..0.08));
            gain = rng.random_range(0.6..1.0);
            let (v1, v2) = VOWELS[rng.random_range(0..VOWELS.len())];
            let shift = [1.0 + var.vowel_spread * (v1 - 1.0), 1.0 + var.vowel_spread * (v2 - 1.0), 1.0];
            let mut below = 0.0;
            for (k, r) in res.iter_mut().enumerate() {
                let (fc, bw) = profile.formants[k];
                let drift = 1.0 + 0.04 * gauss(rng).clamp(-2.5, 2.5);
                let f = (fc * shift[k] * drift).max(below + 150.0).min(0.45 * sample_rate);
                below = f;
                r.tune(f, bw, sample_rate);
            }
            next += 1;
        }
        let mut x = 0.0;
        if i < voiced_until {
            let frac = (i - seg_start) as f64 / (voiced_until - seg_start).max(1) as f64;
            let f0 = f0_start + (f0_end - f0_start) * frac;
            let inst = f0 * (1.0 + 0.2 * profile.jitter * gauss(rng));
            phase += inst / sample_rate;
            let env = ((i - seg_start) as f64 / ramp).min((voiced_until - i) as f64 / ramp).min(1.0);
            if phase >= 1.0 {
                phase -= 1.0;
                x += gain * env;
            }
            x += 0.02 * gain * env * gauss(rng);
        }
        // Glottal spectral tilt, then the formant cascade.
        tilt = 0.9 * tilt + x;
        let mut y = tilt;
        for r in res.iter_mut() {
            y = r.process(y);
        }
        out[i] = y;
    }
    out
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

/// Scale to a 0.5 peak, add the -30 dB noise floor and quantize to 16 bits.
fn finish(mut x: Vec<f64>, rng: &mut Rng, floor_db: f64) -> Vec<f32> {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        x.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    let floor = rms(&x) * 10f64.powf(floor_db / 20.0);
    x.iter()
        .map(|&v| {
            let s = v + floor * gauss(rng);
            quantize(s as f32) as f32 / 32768.0
        })
        .collect()
}

pub fn synthesize_utterance(profile: &SpeakerProfile, var: &Variability, seconds: f64, sample_rate: u32, seed: u64) -> Waveform {
    let mut rng = rng_from(seed, &[tag("utterance")]);
    let sr = sample_rate as f64;
    let n = (seconds * sr).round() as usize;
    let mut x = render_voice(profile, var, n, sr, &mut rng);
    let mut room = rng_from(seed, &[tag("room")]);
    if room.random::<f64>() < var.p_reverb {
        let h = rir(uniform(&mut room, var.t60), sr, &mut room);
        let xf: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        let hf: Vec<f32> = h.iter().map(|&v| v as f32).collect();
        x = convolve_truncated(&xf, &hf).into_iter().map(f64::from).collect();
    }
    if room.random::<f64>() < var.p_noise {
        let snr = uniform(&mut room, var.snr_db);
        let noise = match room.random_range(0..4) {
            0 => white(n, &mut room),
            1 => pink(n, &mut room),
            2 => music(n, sr, &mut room),
            _ => babble(n, sample_rate, room.random()),
        };
        let gain = rms(&x) / rms(&noise).max(1e-12) * 10f64.powf(-snr / 20.0);
        x.iter_mut().zip(&noise).for_each(|(s, v)| *s += gain * v);
    }
    Waveform::new(finish(x, &mut rng, -30.0), sample_rate)
}

fn white(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| gauss(rng)).collect()
}

fn pink(n: usize, rng: &mut Rng) -> Vec<f64> {
    // Paul Kellet's economy filter.
    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
    (0..n)
        .map(|_| {
            let w = gauss(rng);
            b0 = 0.99765 * b0 + w * 0.0990460;
            b1 = 0.96300 * b1 + w * 0.2965164;
            b2 = 0.57000 * b2 + w * 1.0526913;
            b0 + b1 + b2 + w * 0.1848
        })
        .collect()
}

/// Detuned harmonic tones with note changes every half second.
fn music(n: usize, sample_rate: f64, rng: &mut Rng) -> Vec<f64> {
    let note_len = (0.5 * sample_rate) as usize;
    let mut out = vec![0.0; n];
    let mut start = 0;
    while start < n {
        let end = (start + note_len).min(n);
        let root = 110.0 * 2f64.powf(rng.random_range(0..24) as f64 / 12.0);
        let chord = [1.0, 1.26, 1.5];
        for &ratio in &chord {
            for detune in [1.0, 1.003] {
                let f = root * ratio * detune;
                for h in 1..=4 {
                    let fh = f * h as f64;
                    if fh >= sample_rate / 2.0 {
                        break;
                    }
                    let amp = 1.0 / h as f64;
                    for (i, o) in out[start..end].iter_mut().enumerate() {
                        *o += amp * (2.0 * PI * fh * i as f64 / sample_rate).sin();
                    }
                }
            }
        }
        start = end;
    }
    out
}

fn babble(n: usize, sample_rate: u32, seed: u64) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for talker in 0..4u64 {
        let profile = SpeakerProfile::sample(format!("babble-talker-{talker}"), crate::rng::sub_seed(seed, &[talker]));
        let mut rng = rng_from(seed, &[talker, tag("babble")]);
        let v = render_voice(&profile, &Variability::none(), n, sample_rate as f64, &mut rng);
        let r = rms(&v).max(1e-12);
        out.iter_mut().zip(v).for_each(|(o, s)| *o += s / r);
    }
    out
}

/// Exponentially decaying noise burst with a unit direct path.
fn rir(t60: f64, sample_rate: f64, rng: &mut Rng) -> Vec<f64> {
    let len = (t60 * sample_rate).ceil() as usize;
    let decay = 6.9078 / (t60 * sample_rate); // ln(1000): -60 dB at t60
    let mut h: Vec<f64> = (0..len).map(|i| 0.3 * gauss(rng) * (-decay * i as f64).exp()).collect();
    h[0] = 1.0;
    h
}

fn buffer_record(utt_id: String, speaker_id: Option<String>, kind: UttKind, w: Waveform) -> UtteranceRecord {
    let duration = w.duration();
    UtteranceRecord { utt_id, speaker_id, kind, source: AudioSource::Buffer(Arc::new(w)), duration }
}

const BANK_SECONDS: f64 = 4.0;
const CLIPS_PER_KIND: usize = 2;
const N_RIRS: usize = 4;

/// Build a complete in-memory corpus: speech, noise/music/babble clips and
/// impulse responses. Identical specs give bit-identical audio.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<CorpusManifest> {
    spec.validate()?;
    let sr = spec.sample_rate;
    let root = spec.seed;

    let jobs: Vec<(usize, usize)> = (0..spec.n_speakers).flat_map(|s| (0..spec.utts_per_speaker).map(move |u| (s, u))).collect();
    let profiles: Vec<SpeakerProfile> =
        (0..spec.n_speakers).map(|s| SpeakerProfile::sample(format!("spk{s:03}"), crate::rng::sub_seed(root, &[tag("speaker"), s as u64]))).collect();

    use rayon::prelude::*;
    let utterances: Vec<UtteranceRecord> = jobs
        .par_iter()
        .map(|&(s, u)| {
            let p = &profiles[s];
            let mut rng = rng_from(root, &[tag("duration"), s as u64, u as u64]);
            let (lo, hi) = spec.utt_seconds;
            let secs = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let w = synthesize_utterance(p, &spec.variability, secs, sr, crate::rng::sub_seed(p.seed, &[u as u64]));
            buffer_record(format!("{}-u{u:03}", p.speaker_id), Some(p.speaker_id.clone()), UttKind::Speech, w)
        })
        .collect();

    let n_bank = (BANK_SECONDS * sr as f64) as usize;
    let mut noise_bank = Vec::new();
    for i in 0..CLIPS_PER_KIND {
        let mut rng = rng_from(root, &[tag("noise"), i as u64]);
        let (kind_name, raw, kind) =
            if i % 2 == 0 { ("white", white(n_bank, &mut rng), UttKind::Noise) } else { ("pink", pink(n_bank, &mut rng), UttKind::Noise) };
        noise_bank.push(buffer_record(format!("noise-{kind_name}-{i:02}"), None, kind, Waveform::new(finish(raw, &mut rng, -120.0), sr)));
    }
    for i in 0..CLIPS_PER_KIND {
        let mut rng = rng_from(root, &[tag("music"), i as u64]);
        let raw = music(n_bank, sr as f64, &mut rng);
        noise_bank.push(buffer_record(format!("music-{i:02}"), None, UttKind::Music, Waveform::new(finish(raw, &mut rng, -120.0), sr)));
    }
    for i in 0..CLIPS_PER_KIND {
        let seed = crate::rng::sub_seed(root, &[tag("babble"), i as u64]);
        let raw = babble(n_bank, sr, seed);
        let mut rng = rng_from(seed, &[tag("finish")]);
        noise_bank.push(buffer_record(format!("babble-{i:02}"), None, UttKind::Babble, Waveform::new(finish(raw, &mut rng, -120.0), sr)));
    }
    let rir_bank = (0..N_RIRS)
        .map(|i| {
            let mut rng = rng_from(root, &[tag("rir"), i as u64]);
            let t60 = rng.random_range(0.1..=0.4);
            let h = rir(t60, sr as f64, &mut rng);
            // Stored unscaled apart from 16-bit quantization; the direct path
            // saturates just below 1.0.
            let samples = h.iter().map(|&v| quantize(v as f32) as f32 / 32768.0).collect();
            buffer_record(format!("rir-{i:02}"), None, UttKind::Rir, Waveform::new(samples, sr))
        })
        .collect();

    let m = CorpusManifest { sample_rate: sr, utterances, noise_bank, rir_bank };
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> CorpusSpec {
        CorpusSpec { n_speakers: 2, utts_per_speaker: 2, utt_seconds: (2.0, 3.0), sample_rate: 16000, seed, variability: Variability::default() }
    }

    #[test]
    fn cardinality_and_rate_follow_the_arguments() {
        let m = generate_corpus(&small(7)).unwrap();
        assert_eq!(m.utterances.len(), 4);
        assert_eq!(m.sample_rate, 16000);
        for r in &m.utterances {
            let w = r.load(16000).unwrap();
            assert_eq!(w.sample_rate, 16000);
            assert!(r.duration >= 2.0 && r.duration <= 3.0);
        }
        assert!(!m.noise_bank.is_empty());
        assert!(!m.rir_bank.is_empty());
        let kinds: std::collections::HashSet<_> = m.noise_bank.iter().map(|r| r.kind).collect();
        assert!(kinds.contains(&UttKind::Noise) && kinds.contains(&UttKind::Music) && kinds.contains(&UttKind::Babble));
    }

    #[test]
    fn generation_is_bit_identical() {
        let a = generate_corpus(&small(7)).unwrap();
        let b = generate_corpus(&small(7)).unwrap();
        for (x, y) in a.all_records().zip(b.all_records()) {
            let (wx, wy) = (x.load(16000).unwrap(), y.load(16000).unwrap());
            let bx: Vec<u32> = wx.samples.iter().map(|v| v.to_bits()).collect();
            let by: Vec<u32> = wy.samples.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bx, by, "{}", x.utt_id);
        }
    }

    #[test]
    fn invalid_ranges_name_the_field() {
        let bad = CorpusSpec { n_speakers: 1, ..small(0) };
        assert!(matches!(generate_corpus(&bad), Err(Error::Config { field, .. }) if field == "n_speakers"));
        let bad = CorpusSpec { utt_seconds: (0.5, 2.0), ..small(0) };
        assert!(matches!(generate_corpus(&bad), Err(Error::Config { field, .. }) if field == "utt_seconds"));
    }

    #[test]
    fn profiles_respect_their_invariants() {
        for s in 0..200 {
            let p = SpeakerProfile::sample(format!("s{s}"), s);
            assert!((80.0..=300.0).contains(&p.f0));
            assert!(p.formants[0].0 < p.formants[1].0 && p.formants[1].0 < p.formants[2].0);
            assert!(p.formants[2].0 < 8000.0);
            assert!((0.0..=0.1).contains(&p.jitter));
        }
    }

    #[test]
    fn rir_direct_path_leads() {
        let m = generate_corpus(&small(1)).unwrap();
        for r in &m.rir_bank {
            let h = r.load(16000).unwrap();
            assert!(h.samples[0] > 0.99);
            let len = h.len() as f64 / 16000.0;
            assert!((0.1..=0.41).contains(&len));
        }
    }
}
