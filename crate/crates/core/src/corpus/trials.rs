use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;

use super::CorpusManifest;
use crate::error::{Error, Result};
use crate::rng::{rng_from, tag};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub utt_a: String,
    pub utt_b: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn n_target(&self) -> usize {
        self.trials.iter().filter(|t| t.target).count()
    }

    /// `<label> <utt_a> <utt_b>` per line, label 1 for target.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.trials {
            let _ = writeln!(s, "{} {} {}", t.target as u8, t.utt_a, t.utt_b);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut trials = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [label, a, b] = parts[..] else {
                return Err(Error::Parse(format!("trial line {}: expected 3 fields", i + 1)));
            };
            let target = match label {
                "1" => true,
                "0" => false,
                other => return Err(Error::Parse(format!("trial line {}: bad label `{other}`", i + 1))),
            };
            if a == b {
                return Err(Error::Parse(format!("trial line {}: utterance paired with itself", i + 1)));
            }
            trials.push(Trial { target, utt_a: a.to_string(), utt_b: b.to_string() });
        }
        Ok(Self { trials })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Every id must name a speech utterance in `manifest`.
    pub fn check_against(&self, manifest: &CorpusManifest) -> Result<()> {
        for t in &self.trials {
            for id in [&t.utt_a, &t.utt_b] {
                if !manifest.utterances.iter().any(|r| &r.utt_id == id) {
                    return Err(Error::Lookup(id.clone()));
                }
            }
        }
        Ok(())
    }
}

/// Sample target and nontarget trials without replacement from all
/// unordered utterance pairs.
pub fn make_trials(manifest: &CorpusManifest, n_target: usize, n_nontarget: usize, seed: u64) -> Result<TrialList> {
    let utts = &manifest.utterances;
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for i in 0..utts.len() {
        for j in i + 1..utts.len() {
            let (si, sj) = (&utts[i].speaker_id, &utts[j].speaker_id);
            let (Some(si), Some(sj)) = (si, sj) else {
                return Err(Error::config("manifest", "trial construction needs speaker ids"));
            };
            if si == sj {
                same.push((i, j));
            } else {
                diff.push((i, j));
            }
        }
    }
    if n_target > same.len() {
        return Err(Error::Capacity { what: "target pairs", requested: n_target, available: same.len() });
    }
    if n_nontarget > diff.len() {
        return Err(Error::Capacity { what: "nontarget pairs", requested: n_nontarget, available: diff.len() });
    }
    let mut rng = rng_from(seed, &[tag("trials")]);
    let mut picked: Vec<(bool, usize, usize)> = Vec::with_capacity(n_target + n_nontarget);
    let mut pick_t = index::sample(&mut rng, same.len(), n_target).into_vec();
    pick_t.sort_unstable();
    picked.extend(pick_t.into_iter().map(|k| (true, same[k].0, same[k].1)));
    let mut pick_n = index::sample(&mut rng, diff.len(), n_nontarget).into_vec();
    pick_n.sort_unstable();
    picked.extend(pick_n.into_iter().map(|k| (false, diff[k].0, diff[k].1)));
    let order = index::sample(&mut rng, picked.len(), picked.len()).into_vec();
    let trials = order
        .into_iter()
        .map(|k| {
            let (target, i, j) = picked[k];
            Trial { target, utt_a: utts[i].utt_id.clone(), utt_b: utts[j].utt_id.clone() }
        })
        .collect();
    Ok(TrialList { trials })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};

    fn tiny() -> CorpusManifest {
        generate_corpus(&CorpusSpec { n_speakers: 2, utts_per_speaker: 2, utt_seconds: (1.0, 1.2), sample_rate: 16000, seed: 0, ..CorpusSpec::default() })
            .unwrap()
    }

    #[test]
    fn one_of_each_from_tiny_corpus() {
        let t = make_trials(&tiny(), 1, 1, 0).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.n_target(), 1);
        assert!(t.trials.iter().all(|x| x.utt_a != x.utt_b));
    }

    #[test]
    fn too_many_targets_reports_capacity() {
        // 2 speakers x 2 utterances: 2 same-speaker pairs, 4 cross pairs.
        let err = make_trials(&tiny(), 3, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Capacity { available: 2, requested: 3, .. }), "{err}");
        let err = make_trials(&tiny(), 1, 5, 0).unwrap_err();
        assert!(matches!(err, Error::Capacity { available: 4, .. }), "{err}");
    }

    #[test]
    fn deterministic_and_text_round_trip() {
        let m = tiny();
        let a = make_trials(&m, 2, 3, 9).unwrap();
        assert_eq!(a, make_trials(&m, 2, 3, 9).unwrap());
        assert_eq!(TrialList::parse(&a.to_text()).unwrap(), a);
        a.check_against(&m).unwrap();
    }

    #[test]
    fn parse_rejects_self_pairs_and_bad_labels() {
        assert!(TrialList::parse("1 a a\n").is_err());
        assert!(TrialList::parse("2 a b\n").is_err());
        assert!(TrialList::parse("1 a\n").is_err());
    }
}
