//! Speech corpus: a deterministic synthetic generator, WAV and manifest I/O,
//! and trial-list construction.
//!
//! `speaker_id` is ground truth for evaluation only. Training code receives
//! an [`UnlabeledCorpus`], which carries no speaker information at all.

mod synth;
mod trials;
mod wav;

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{generate_corpus, synthesize_utterance, CorpusSpec, SpeakerProfile, Variability};
pub use trials::{make_trials, Trial, TrialList};
pub use wav::{load_waveform, read_wav, write_wav};

/// Mono PCM audio at a fixed rate, samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn seconds_to_samples(&self, seconds: f64) -> usize {
        (seconds * self.sample_rate as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UttKind {
    Speech,
    Noise,
    Music,
    Babble,
    Rir,
}

#[derive(Debug, Clone)]
pub enum AudioSource {
    Path(PathBuf),
    Buffer(Arc<Waveform>),
}

#[derive(Debug, Clone)]
pub struct UtteranceRecord {
    pub utt_id: String,
    /// Hidden ground truth; read only by trial construction and metrics.
    pub speaker_id: Option<String>,
    pub kind: UttKind,
    pub source: AudioSource,
    pub duration: f64,
}

impl UtteranceRecord {
    pub fn load(&self, sample_rate: u32) -> Result<Arc<Waveform>> {
        match &self.source {
            AudioSource::Buffer(w) => Ok(Arc::clone(w)),
            AudioSource::Path(p) => load_waveform(p, Some(sample_rate)).map(Arc::new),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusManifest {
    pub sample_rate: u32,
    /// Speech utterances only.
    pub utterances: Vec<UtteranceRecord>,
    /// Additive sources: noise, music and babble clips.
    pub noise_bank: Vec<UtteranceRecord>,
    pub rir_bank: Vec<UtteranceRecord>,
}

/// One line of the JSON Lines manifest file.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestLine {
    pub utt_id: String,
    pub path: String,
    pub kind: UttKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_id: Option<String>,
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in self.all_records() {
            if !seen.insert(r.utt_id.as_str()) {
                return Err(Error::config("utterances", format!("duplicate utt_id `{}`", r.utt_id)));
            }
            if !(r.duration > 0.0) {
                return Err(Error::config("utterances", format!("`{}` has non-positive duration", r.utt_id)));
            }
        }
        if self.utterances.iter().any(|r| r.kind != UttKind::Speech) {
            return Err(Error::config("utterances", "speech list contains non-speech records"));
        }
        if self.noise_bank.iter().any(|r| !matches!(r.kind, UttKind::Noise | UttKind::Music | UttKind::Babble)) {
            return Err(Error::config("noise_bank", "noise bank contains speech or rir records"));
        }
        if self.rir_bank.iter().any(|r| r.kind != UttKind::Rir) {
            return Err(Error::config("rir_bank", "rir bank contains non-rir records"));
        }
        Ok(())
    }

    pub fn all_records(&self) -> impl Iterator<Item = &UtteranceRecord> {
        self.utterances.iter().chain(self.noise_bank.iter()).chain(self.rir_bank.iter())
    }

    pub fn find(&self, utt_id: &str) -> Option<&UtteranceRecord> {
        self.all_records().find(|r| r.utt_id == utt_id)
    }

    /// Load every path-backed record into memory.
    pub fn into_resident(self) -> Result<Self> {
        let sr = self.sample_rate;
        let load = |v: Vec<UtteranceRecord>| -> Result<Vec<UtteranceRecord>> {
            v.into_iter()
                .map(|mut r| {
                    let w = r.load(sr)?;
                    r.source = AudioSource::Buffer(w);
                    Ok(r)
                })
                .collect()
        };
        Ok(Self { sample_rate: sr, utterances: load(self.utterances)?, noise_bank: load(self.noise_bank)?, rir_bank: load(self.rir_bank)? })
    }

    /// Write every record as a WAV file under `dir` plus `manifest.jsonl`.
    /// Returns the manifest path.
    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf> {
        let audio_dir = dir.join("wav");
        fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
        let manifest_path = dir.join("manifest.jsonl");
        let mut out = Vec::new();
        for r in self.all_records() {
            let rel = format!("wav/{}.wav", r.utt_id);
            let w = r.load(self.sample_rate)?;
            write_wav(&dir.join(&rel), &w)?;
            let line = ManifestLine { utt_id: r.utt_id.clone(), path: rel, kind: r.kind, speaker_id: r.speaker_id.clone() };
            serde_json::to_writer(&mut out, &line).map_err(|e| Error::Parse(e.to_string()))?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        f.write_all(&out).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(manifest_path)
    }

    /// Read a JSON Lines manifest. Relative paths resolve against the
    /// manifest's directory; the corpus sample rate is taken from the WAV
    /// headers and must be uniform.
    pub fn read(path: &Path) -> Result<Self> {
        let base = path.parent().unwrap_or(Path::new("."));
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut sample_rate = None;
        let mut m = CorpusManifest { sample_rate: 0, utterances: Vec::new(), noise_bank: Vec::new(), rir_bank: Vec::new() };
        for (lineno, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestLine = serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
            let audio = base.join(&rec.path);
            let reader = hound::WavReader::open(&audio).map_err(|source| Error::Wav { path: audio.clone(), source })?;
            let spec = reader.spec();
            match sample_rate {
                None => sample_rate = Some(spec.sample_rate),
                Some(sr) if sr != spec.sample_rate => {
                    return Err(Error::Format { property: "sample rate", found: spec.sample_rate.to_string(), expected: sr.to_string() })
                }
                _ => {}
            }
            let duration = reader.duration() as f64 / spec.sample_rate as f64;
            let record = UtteranceRecord { utt_id: rec.utt_id, speaker_id: rec.speaker_id, kind: rec.kind, source: AudioSource::Path(audio), duration };
            match rec.kind {
                UttKind::Speech => m.utterances.push(record),
                UttKind::Rir => m.rir_bank.push(record),
                _ => m.noise_bank.push(record),
            }
        }
        m.sample_rate = sample_rate.ok_or_else(|| Error::config("manifest", "manifest is empty"))?;
        m.validate()?;
        Ok(m)
    }

    /// Strip ground truth for training.
    pub fn unlabeled(&self) -> Result<UnlabeledCorpus> {
        let sr = self.sample_rate;
        let load_all = |v: &[UtteranceRecord]| -> Result<Vec<Arc<Waveform>>> { v.iter().map(|r| r.load(sr)).collect() };
        Ok(UnlabeledCorpus {
            sample_rate: sr,
            speech: self.utterances.iter().map(|r| Ok((r.utt_id.clone(), r.load(sr)?))).collect::<Result<_>>()?,
            bank: AudioBank { noises: load_all(&self.noise_bank)?, rirs: load_all(&self.rir_bank)? },
        })
    }
}

/// Augmentation sources.
#[derive(Debug, Clone, Default)]
pub struct AudioBank {
    pub noises: Vec<Arc<Waveform>>,
    pub rirs: Vec<Arc<Waveform>>,
}

/// Speech audio plus augmentation banks with no speaker information. This is
/// all a training stage ever sees.
#[derive(Debug, Clone)]
pub struct UnlabeledCorpus {
    pub sample_rate: u32,
    pub speech: Vec<(String, Arc<Waveform>)>,
    pub bank: AudioBank,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trips_through_disk() {
        let m =
            generate_corpus(&CorpusSpec { n_speakers: 2, utts_per_speaker: 2, utt_seconds: (1.0, 1.5), sample_rate: 16000, seed: 3, ..CorpusSpec::default() })
                .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = m.write_to_dir(dir.path()).unwrap();
        let back = CorpusManifest::read(&path).unwrap();
        assert_eq!(back.sample_rate, 16000);
        assert_eq!(back.utterances.len(), 4);
        assert_eq!(back.noise_bank.len(), m.noise_bank.len());
        assert_eq!(back.rir_bank.len(), m.rir_bank.len());
        for (a, b) in m.utterances.iter().zip(&back.utterances) {
            assert_eq!(a.utt_id, b.utt_id);
            assert_eq!(a.speaker_id, b.speaker_id);
            assert_eq!(a.load(16000).unwrap().samples, b.load(16000).unwrap().samples);
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut m =
            generate_corpus(&CorpusSpec { n_speakers: 2, utts_per_speaker: 1, utt_seconds: (1.0, 1.0), sample_rate: 16000, seed: 0, ..CorpusSpec::default() })
                .unwrap();
        let dup = m.utterances[0].clone();
        m.utterances.push(dup);
        assert!(matches!(m.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn manifest_line_speaker_is_optional() {
        let l: ManifestLine = serde_json::from_str(r#"{"utt_id":"n0","path":"wav/n0.wav","kind":"noise"}"#).unwrap();
        assert_eq!(l.kind, UttKind::Noise);
        assert!(l.speaker_id.is_none());
    }
}
