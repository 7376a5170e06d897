//! Pseudo-labeling: utterance embeddings, cosine k-means, label quality
//! diagnostics and the iterate-train-recluster loop.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{UnlabeledCorpus, Waveform};
use crate::error::{Error, Result};
use crate::features::{st_mean_normalize, FeatureMatrix, LogMel};
use crate::network::{embed, NetworkConfig, ParamSet};
use crate::real::dot;
use crate::rng::{rng_from, sub_seed, tag};
use crate::supervised::{train_supervised, AamConfig, SupervisedEpoch, TrainConfig};

/// Unit-norm embeddings keyed by utterance, in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub utt_ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Content hash of the model that produced the rows.
    pub model_id: String,
}

#[derive(Serialize, Deserialize)]
struct TableSidecar {
    model_id: String,
    utt_ids: Vec<String>,
}

impl EmbeddingTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.utt_ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect()
    }

    pub fn get(&self, utt_id: &str) -> Option<&[f64]> {
        self.utt_ids.iter().position(|u| u == utt_id).map(|i| self.rows[i].as_slice())
    }

    /// Write `<base>.bin` in the feature dump layout and `<base>.json` with
    /// the utterance ids. Returns the two paths.
    pub fn write(&self, base: &Path) -> Result<(PathBuf, PathBuf)> {
        let bin = base.with_extension("bin");
        let json = base.with_extension("json");
        let fm = FeatureMatrix::new(self.rows.concat(), self.len(), self.dim(), 0.0);
        let f = fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
        fm.write_dump(BufWriter::new(f)).map_err(|e| Error::io(&bin, e))?;
        let side = TableSidecar { model_id: self.model_id.clone(), utt_ids: self.utt_ids.clone() };
        let text = serde_json::to_string_pretty(&side).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
        Ok((bin, json))
    }

    pub fn read(base: &Path) -> Result<Self> {
        let bin = base.with_extension("bin");
        let json = base.with_extension("json");
        let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let side: TableSidecar = serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", json.display())))?;
        let f = fs::File::open(&bin).map_err(|e| Error::io(&bin, e))?;
        let fm = FeatureMatrix::read_dump(std::io::BufReader::new(f), 0.0).map_err(|e| Error::io(&bin, e))?;
        if fm.n_frames != side.utt_ids.len() {
            return Err(Error::Parse(format!("{} rows for {} utterance ids", fm.n_frames, side.utt_ids.len())));
        }
        Ok(Self { utt_ids: side.utt_ids, rows: (0..fm.n_frames).map(|t| fm.frame(t).to_vec()).collect(), model_id: side.model_id })
    }
}

fn unit(v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    let n = dot(&v, &v).sqrt();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Numeric { tensor: what.to_string() });
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

/// One L2-normalized embedding per utterance from the whole utterance with
/// no cropping or augmentation.
pub fn extract_embeddings(
    params: &ParamSet<f32>,
    net: &NetworkConfig,
    utts: &[(String, Arc<Waveform>)],
    sample_rate: u32,
    model_id: &str,
) -> Result<EmbeddingTable> {
    let lm = LogMel::new(&net.features, sample_rate)?;
    let rows = utts
        .par_iter()
        .map(|(id, w)| {
            let f = st_mean_normalize(&lm.compute(w)?, net.features.norm_window_ms);
            let e = embed(params, net, &f)?;
            unit(e.into_iter().map(f64::from).collect(), &format!("embedding of {id}"))
        })
        .collect::<Result<_>>()?;
    Ok(EmbeddingTable { utt_ids: utts.iter().map(|(id, _)| id.clone()).collect(), rows, model_id: model_id.to_string() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: BTreeMap<String, usize>,
    pub k: usize,
    /// `Σ (1 − cos)` to the assigned centroid at the end.
    pub objective: f64,
    /// Objective after each k-means iteration.
    pub history: Vec<f64>,
}

impl ClusterAssignment {
    /// `<utt_id> <cluster_index>` per line, sorted by utterance id.
    pub fn to_text(&self) -> String {
        self.labels.iter().map(|(u, l)| format!("{u} {l}\n")).collect()
    }

    pub fn parse(text: &str, k: usize) -> Result<Self> {
        let mut labels = BTreeMap::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let (Some(u), Some(l), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse(format!("label line {}: expected `<utt_id> <cluster>`", n + 1)));
            };
            let l: usize = l.parse().map_err(|_| Error::Parse(format!("label line {}: bad cluster index {l:?}", n + 1)))?;
            if l >= k {
                return Err(Error::Index { index: l, len: k });
            }
            if labels.insert(u.to_string(), l).is_some() {
                return Err(Error::Parse(format!("label line {}: duplicate utterance {u}", n + 1)));
            }
        }
        Ok(Self { labels, k, objective: f64::NAN, history: Vec::new() })
    }

    pub fn n_nonempty(&self) -> usize {
        let mut seen = vec![false; self.k];
        self.labels.values().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    }
}

fn argmax_cos(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let s = dot(x, c);
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

/// k-means++ seeding with `1 − cos` as the distance.
fn seed_centroids(rows: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_from(seed, &[tag("kmeans++")]);
    let n = rows.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![rows[first].clone()];
    let mut dist: Vec<f64> = rows.iter().map(|x| (1.0 - dot(x, &rows[first])).max(0.0)).collect();
    while centroids.len() < k {
        let weights: Vec<f64> = dist.iter().zip(&chosen).map(|(&d, &c)| if c { 0.0 } else { d * d }).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if r < w {
                        break;
                    }
                    r -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // Every remaining point coincides with a centroid.
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        for (d, x) in dist.iter_mut().zip(rows) {
            *d = d.min((1.0 - dot(x, &rows[pick])).max(0.0));
        }
        centroids.push(rows[pick].clone());
    }
    centroids
}

fn objective(rows: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    rows.iter().zip(labels).map(|(x, &l)| 1.0 - dot(x, &centroids[l])).sum()
}

/// Normalized mean of members, or the previous centroid if the members
/// cancel out.
fn update_centroids(rows: &[Vec<f64>], labels: &[usize], centroids: &mut [Vec<f64>]) {
    let d = rows[0].len();
    let mut sums = vec![vec![0.0; d]; centroids.len()];
    for (x, &l) in rows.iter().zip(labels) {
        sums[l].iter_mut().zip(x).for_each(|(s, v)| *s += v);
    }
    for (c, s) in centroids.iter_mut().zip(sums) {
        let n = dot(&s, &s).sqrt();
        if n > 0.0 {
            *c = s.into_iter().map(|v| v / n).collect();
        }
    }
}

/// Spherical k-means: assign by maximum cosine, move each centroid to the
/// normalized mean of its members. Empty clusters take the point with the
/// lowest cosine to its own centroid, so `k` never shrinks.
pub fn cosine_kmeans(t: &EmbeddingTable, k: usize, max_iters: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = t.len();
    if k == 0 {
        return Err(Error::config("k", "must be positive"));
    }
    if k > n {
        return Err(Error::Capacity { what: "embeddings to cluster", requested: k, available: n });
    }
    let rows = &t.rows;
    let mut centroids = seed_centroids(rows, k, seed);
    let mut labels: Vec<usize> = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let assigned: Vec<(usize, f64)> = rows.par_iter().map(|x| argmax_cos(x, &centroids)).collect();
        let mut next: Vec<usize> = assigned.iter().map(|a| a.0).collect();
        let mut sizes = vec![0usize; k];
        next.iter().for_each(|&l| sizes[l] += 1);
        let mut own: Vec<f64> = assigned.iter().map(|a| a.1).collect();
        for j in 0..k {
            if sizes[j] > 0 {
                continue;
            }
            let donor = (0..n)
                .filter(|&i| sizes[next[i]] > 1)
                .min_by(|&a, &b| own[a].total_cmp(&own[b]).then(a.cmp(&b)))
                .expect("k <= n leaves a cluster with two members");
            sizes[next[donor]] -= 1;
            next[donor] = j;
            sizes[j] = 1;
            own[donor] = 1.0;
            centroids[j] = rows[donor].clone();
        }
        let converged = next == labels;
        labels = next;
        update_centroids(rows, &labels, &mut centroids);
        history.push(objective(rows, &labels, &centroids));
        if converged {
            break;
        }
    }
    Ok(ClusterAssignment { labels: t.utt_ids.iter().cloned().zip(labels).collect(), k, objective: *history.last().expect("at least one iteration"), history })
}

/// Best of `restarts` k-means fits by final objective. The first fit uses
/// `seed` itself, so one restart is plain [`cosine_kmeans`].
pub fn cosine_kmeans_restarts(t: &EmbeddingTable, k: usize, max_iters: usize, restarts: usize, seed: u64) -> Result<ClusterAssignment> {
    let mut best = cosine_kmeans(t, k, max_iters, seed)?;
    for r in 1..restarts as u64 {
        let a = cosine_kmeans(t, k, max_iters, sub_seed(seed, &[tag("restart"), r]))?;
        if a.objective < best.objective {
            best = a;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub nmi: f64,
    pub purity: f64,
    pub n_nonempty: usize,
}

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// NMI with arithmetic-mean normalization and purity, over utterances
/// present in both maps.
pub fn cluster_metrics(a: &ClusterAssignment, truth: &BTreeMap<String, String>) -> ClusterMetrics {
    let mut joint: BTreeMap<(usize, &str), usize> = BTreeMap::new();
    let mut by_cluster: BTreeMap<usize, usize> = BTreeMap::new();
    let mut by_class: BTreeMap<&str, usize> = BTreeMap::new();
    let mut n = 0usize;
    for (u, &l) in &a.labels {
        if let Some(s) = truth.get(u) {
            *joint.entry((l, s.as_str())).or_default() += 1;
            *by_cluster.entry(l).or_default() += 1;
            *by_class.entry(s.as_str()).or_default() += 1;
            n += 1;
        }
    }
    if n == 0 {
        return ClusterMetrics { nmi: 0.0, purity: 0.0, n_nonempty: 0 };
    }
    let nf = n as f64;
    let h_u = entropy(by_cluster.values().copied(), nf);
    let h_v = entropy(by_class.values().copied(), nf);
    let mi: f64 = joint
        .iter()
        .map(|(&(l, s), &c)| {
            let p = c as f64 / nf;
            p * (p / (by_cluster[&l] as f64 / nf * by_class[s] as f64 / nf)).ln()
        })
        .sum();
    let denom = (h_u + h_v) / 2.0;
    let nmi = if denom > 0.0 { (mi / denom).clamp(0.0, 1.0) } else { 1.0 };
    let mut best: BTreeMap<usize, usize> = BTreeMap::new();
    for (&(l, _), &c) in &joint {
        let b = best.entry(l).or_default();
        *b = (*b).max(c);
    }
    ClusterMetrics { nmi, purity: best.values().sum::<usize>() as f64 / nf, n_nonempty: by_cluster.len() }
}

/// Fraction of utterances whose set of same-cluster partners differs
/// between two labelings. Label values need not be comparable.
pub fn partner_change(prev: &ClusterAssignment, next: &ClusterAssignment) -> f64 {
    fn members(a: &ClusterAssignment) -> BTreeMap<usize, Vec<&str>> {
        let mut m: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
        for (u, &l) in &a.labels {
            m.entry(l).or_default().push(u);
        }
        m
    }
    let (mp, mn) = (members(prev), members(next));
    let changed = next.labels.iter().filter(|(u, &l)| prev.labels.get(*u).is_none_or(|pl| mp[pl] != mn[&l])).count();
    changed as f64 / next.labels.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterationPlan {
    pub k: usize,
    pub max_iters: usize,
    pub reassign_epsilon: f64,
    pub kmeans_iters: usize,
    /// Independent k-means fits per round; the lowest objective wins.
    pub kmeans_restarts: usize,
    /// Start each round from the previous model instead of a fresh one.
    pub warm_start: bool,
    pub seed: u64,
}

impl Default for IterationPlan {
    fn default() -> Self {
        Self { k: 7500, max_iters: 3, reassign_epsilon: 0.01, kmeans_iters: 50, kmeans_restarts: 1, warm_start: false, seed: 0 }
    }
}

impl IterationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::config("k", "must be at least 2"));
        }
        if self.max_iters == 0 {
            return Err(Error::config("max_iters", "must be positive"));
        }
        if self.kmeans_restarts == 0 {
            return Err(Error::config("kmeans_restarts", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.reassign_epsilon) {
            return Err(Error::config("reassign_epsilon", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub k: usize,
    pub kmeans_objective: f64,
    pub n_nonempty: usize,
    /// Partner-set change against the previous round's labels.
    pub partner_change: Option<f64>,
    pub final_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Iteration {
    pub labels: ClusterAssignment,
    pub params: ParamSet<f32>,
    pub report: Vec<SupervisedEpoch>,
    pub row: IterationRow,
}

/// Identifies a model for the embedding table; callers pass a content hash.
pub type ModelId<'a> = &'a dyn Fn(&ParamSet<f32>) -> String;

/// Embed, cluster, train on the clusters, repeat. Stops after `max_iters`
/// rounds or once labels move less than `reassign_epsilon`. `after_round`
/// sees every finished round, e.g. to persist it.
#[allow(clippy::too_many_arguments)]
pub fn run_iterations(
    corpus: &UnlabeledCorpus,
    initial: &ParamSet<f32>,
    net: &NetworkConfig,
    plan: &IterationPlan,
    aam: &AamConfig,
    train: &TrainConfig,
    model_id: ModelId<'_>,
    mut after_round: impl FnMut(&Iteration) -> Result<()>,
) -> Result<Vec<Iteration>> {
    plan.validate()?;
    let mut rounds: Vec<Iteration> = Vec::new();
    let mut model = initial.clone();
    for i in 0..plan.max_iters {
        let table = extract_embeddings(&model, net, &corpus.speech, corpus.sample_rate, &model_id(&model))?;
        let labels = cosine_kmeans_restarts(&table, plan.k, plan.kmeans_iters, plan.kmeans_restarts, sub_seed(plan.seed, &[tag("kmeans"), i as u64]))?;
        let change = rounds.last().map(|r| partner_change(&r.labels, &labels));
        if change.is_some_and(|c| c < plan.reassign_epsilon) {
            break;
        }
        let cfg = TrainConfig { seed: sub_seed(train.seed, &[tag("round"), i as u64]), ..train.clone() };
        let warm = plan.warm_start.then_some(&model);
        let out = train_supervised(corpus, &labels, net, aam, &cfg, warm)?;
        let round = Iteration {
            row: IterationRow {
                iteration: i + 1,
                k: plan.k,
                kmeans_objective: labels.objective,
                n_nonempty: labels.n_nonempty(),
                partner_change: change,
                final_loss: out.report.last().map_or(f64::NAN, |r| r.loss),
            },
            labels,
            params: out.params,
            report: out.report,
        };
        after_round(&round)?;
        model = round.params.clone();
        rounds.push(round);
    }
    Ok(rounds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(rows: Vec<Vec<f64>>) -> EmbeddingTable {
        EmbeddingTable {
            utt_ids: (0..rows.len()).map(|i| format!("u{i:02}")).collect(),
            rows: rows.into_iter().map(|r| unit(r, "row").unwrap()).collect(),
            model_id: "m".into(),
        }
    }

    #[test]
    fn k_equals_n_gives_singletons() {
        let t = table(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]]);
        let a = cosine_kmeans(&t, 4, 20, 1).unwrap();
        assert_eq!(a.n_nonempty(), 4);
        assert!(a.objective.abs() < 1e-12);
    }

    #[test]
    fn restarts_keep_the_lowest_objective() {
        let mut rng = rng_from(5, &[]);
        let t = table((0..60).map(|_| (0..4).map(|_| rng.random::<f64>() - 0.5).collect()).collect());
        let one = cosine_kmeans(&t, 6, 30, 9).unwrap();
        assert_eq!(cosine_kmeans_restarts(&t, 6, 30, 1, 9).unwrap(), one);
        let many = cosine_kmeans_restarts(&t, 6, 30, 8, 9).unwrap();
        assert!(many.objective <= one.objective);
    }

    #[test]
    fn k_above_n_is_capacity_error() {
        let t = table(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(cosine_kmeans(&t, 3, 5, 0), Err(Error::Capacity { .. })));
    }

    #[test]
    fn label_text_round_trip() {
        let t = table(vec![vec![1.0, 0.0], vec![0.9, 0.1], vec![0.0, 1.0]]);
        let a = cosine_kmeans(&t, 2, 10, 0).unwrap();
        let b = ClusterAssignment::parse(&a.to_text(), 2).unwrap();
        assert_eq!(a.labels, b.labels);
        assert!(matches!(ClusterAssignment::parse("u00 5\n", 2), Err(Error::Index { .. })));
    }

    #[test]
    fn hand_built_contingency_nmi() {
        // Clusters {a, b, c | d}, speakers {a, b | c, d}.
        let a = ClusterAssignment {
            labels: [("a", 0), ("b", 0), ("c", 0), ("d", 1)].iter().map(|(u, l)| (u.to_string(), *l)).collect(),
            k: 2,
            objective: 0.0,
            history: vec![],
        };
        let truth: BTreeMap<String, String> = [("a", "s"), ("b", "s"), ("c", "t"), ("d", "t")].iter().map(|(u, s)| (u.to_string(), s.to_string())).collect();
        let m = cluster_metrics(&a, &truth);
        // H(U) = H(3/4, 1/4), H(V) = ln 2,
        // I = 1/2 ln(4/3) + 1/4 ln(2/3) + 1/4 ln 2.
        let h_u = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        let h_v = 2f64.ln();
        let mi = 0.5 * (4.0f64 / 3.0).ln() + 0.25 * (2.0f64 / 3.0).ln() + 0.25 * 2f64.ln();
        assert!((m.nmi - mi / ((h_u + h_v) / 2.0)).abs() < 1e-12);
        assert!((m.purity - 0.75).abs() < 1e-12);
    }

    #[test]
    fn partner_change_ignores_label_values() {
        let mk = |v: &[usize]| ClusterAssignment {
            labels: v.iter().enumerate().map(|(i, &l)| (format!("u{i}"), l)).collect(),
            k: 3,
            objective: 0.0,
            history: vec![],
        };
        assert_eq!(partner_change(&mk(&[0, 0, 1, 2]), &mk(&[2, 2, 0, 1])), 0.0);
        assert_eq!(partner_change(&mk(&[0, 0, 1, 2]), &mk(&[0, 1, 1, 2])), 0.75);
    }
}
