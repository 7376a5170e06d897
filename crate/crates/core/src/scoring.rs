//! Cosine scoring of trials and the equal error rate.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clustering::{extract_embeddings, EmbeddingTable};
use crate::corpus::{TrialList, Waveform};
use crate::error::{Error, Result};
use crate::network::{NetworkConfig, ParamSet};
use crate::real::dot;

/// `⟨a, b⟩ / (‖a‖·‖b‖)`.
pub fn cosine_score(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cannot score {}-d against {}-d", a.len(), b.len())));
    }
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(Error::Numeric { tensor: "zero embedding".into() });
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// One cosine per trial, in trial order.
pub fn score_trials(table: &EmbeddingTable, trials: &TrialList) -> Result<Vec<f64>> {
    let index = table.index();
    let row = |id: &str| index.get(id).map(|&i| table.rows[i].as_slice()).ok_or_else(|| Error::Lookup(id.to_string()));
    trials.trials.iter().map(|t| cosine_score(row(&t.utt_a)?, row(&t.utt_b)?)).collect()
}

/// Equal error rate and the threshold where it occurs.
///
/// Thresholds sweep below the lowest score, between consecutive distinct
/// scores and above the highest. FAR counts nontargets `>= t`, FRR targets
/// `< t`; the crossing of FAR − FRR is linearly interpolated.
pub fn compute_eer(scores: &[(f64, bool)]) -> Result<(f64, f64)> {
    let n_t = scores.iter().filter(|s| s.1).count();
    let n_n = scores.len() - n_t;
    if n_t == 0 || n_n == 0 {
        return Err(Error::Metric(format!("need both classes, got {n_t} targets and {n_n} nontargets")));
    }
    if scores.iter().any(|s| !s.0.is_finite()) {
        return Err(Error::Metric("non-finite score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Before threshold i, everything is accepted.
    let (mut fa, mut fr) = (n_n, 0usize);
    let mut prev = (1.0f64, 0.0f64, sorted[0].0 - 1.0);
    let mut i = 0;
    loop {
        let far = fa as f64 / n_n as f64;
        let frr = fr as f64 / n_t as f64;
        let t = if i == 0 {
            sorted[0].0 - 1.0
        } else if i == sorted.len() {
            sorted[i - 1].0 + 1.0
        } else {
            (sorted[i - 1].0 + sorted[i].0) / 2.0
        };
        let d = far - frr;
        if d <= 0.0 {
            if d == 0.0 {
                return Ok((far, t));
            }
            let (pfar, pfrr, pt) = prev;
            let pd = pfar - pfrr;
            let alpha = pd / (pd - d);
            return Ok((pfar + alpha * (far - pfar), pt + alpha * (t - pt)));
        }
        prev = (far, frr, t);
        if i == sorted.len() {
            unreachable!("FAR - FRR reaches -1 above the highest score");
        }
        // Step past every score equal to sorted[i].
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                fr += 1;
            } else {
                fa -= 1;
            }
            i += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrial {
    pub target: bool,
    pub utt_a: String,
    pub utt_b: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub scores: Vec<ScoredTrial>,
    pub eer: f64,
    pub threshold: f64,
    pub n_target: usize,
    pub n_nontarget: usize,
}

#[derive(Serialize)]
struct ReportSummary {
    eer: f64,
    threshold: f64,
    n_target: usize,
    n_nontarget: usize,
}

impl ScoreReport {
    pub fn from_scores(trials: &TrialList, scores: Vec<f64>) -> Result<Self> {
        if trials.len() != scores.len() {
            return Err(Error::Shape(format!("{} scores for {} trials", scores.len(), trials.len())));
        }
        let labeled: Vec<(f64, bool)> = scores.iter().zip(&trials.trials).map(|(&s, t)| (s, t.target)).collect();
        let (eer, threshold) = compute_eer(&labeled)?;
        let n_target = trials.n_target();
        Ok(Self {
            scores: trials
                .trials
                .iter()
                .zip(scores)
                .map(|(t, score)| ScoredTrial { target: t.target, utt_a: t.utt_a.clone(), utt_b: t.utt_b.clone(), score })
                .collect(),
            eer,
            threshold,
            n_target,
            n_nontarget: trials.len() - n_target,
        })
    }

    /// `<score> <utt_a> <utt_b>` per line.
    pub fn score_text(&self) -> String {
        let mut s = String::new();
        for t in &self.scores {
            let _ = writeln!(s, "{} {} {}", t.score, t.utt_a, t.utt_b);
        }
        s
    }

    /// `{eer, threshold, n_target, n_nontarget}`.
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&ReportSummary { eer: self.eer, threshold: self.threshold, n_target: self.n_target, n_nontarget: self.n_nontarget })
            .expect("plain struct serializes")
            + "\n"
    }
}

/// Embed every utterance named in `trials` and score them.
pub fn evaluate(
    params: &ParamSet<f32>,
    net: &NetworkConfig,
    utts: &[(String, Arc<Waveform>)],
    sample_rate: u32,
    trials: &TrialList,
    model_id: &str,
) -> Result<ScoreReport> {
    let needed: BTreeSet<&str> = trials.trials.iter().flat_map(|t| [t.utt_a.as_str(), t.utt_b.as_str()]).collect();
    let known: BTreeSet<&str> = utts.iter().map(|(id, _)| id.as_str()).collect();
    if let Some(missing) = needed.iter().find(|id| !known.contains(*id)) {
        return Err(Error::Lookup(missing.to_string()));
    }
    let subset: Vec<(String, Arc<Waveform>)> = utts.iter().filter(|(id, _)| needed.contains(id.as_str())).cloned().collect();
    let table = extract_embeddings(params, net, &subset, sample_rate, model_id)?;
    ScoreReport::from_scores(trials, score_trials(&table, trials)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert!((cosine_score(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_score(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert!((cosine_score(&[1.0, 1.0], &[1.0, 0.0]).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(cosine_score(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::Numeric { .. })));
    }

    #[test]
    fn eer_examples() {
        let perfect = [(0.9, true), (0.8, true), (0.2, false), (0.1, false)];
        assert_eq!(compute_eer(&perfect).unwrap().0, 0.0);
        let half = [(0.8, true), (0.4, true), (0.6, false), (0.2, false)];
        let (eer, t) = compute_eer(&half).unwrap();
        assert_eq!(eer, 0.5);
        assert!((t - 0.5).abs() < 1e-15);
    }

    #[test]
    fn eer_needs_both_classes() {
        assert!(matches!(compute_eer(&[(0.1, true), (0.2, true)]), Err(Error::Metric(_))));
    }

    #[test]
    fn eer_with_ties_and_reversed_order() {
        let all_wrong = [(0.1, true), (0.9, false)];
        assert_eq!(compute_eer(&all_wrong).unwrap().0, 1.0);
        let tied = [(0.5, true), (0.5, false)];
        assert_eq!(compute_eer(&tied).unwrap().0, 0.5);
    }
}
