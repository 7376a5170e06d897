//! Small random problem instances for gradient checks, benchmarks and
//! property tests.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::dino::{init_dino, teacher_probs, DinoObjective};
use crate::error::Result;
use crate::features::FeatureMatrix;
use crate::network::{grad_check, init_backbone, init_class_weights, GradCheckConfig, NetworkConfig, ParamSet, ProjectionConfig};
use crate::rng::{rng_from, sub_seed, tag};
use crate::supervised::AamObjective;
use crate::views::ViewSet;

/// Standard-normal features.
pub fn random_features(n_frames: usize, n_dims: usize, seed: u64) -> FeatureMatrix {
    let mut rng = rng_from(seed, &[tag("features")]);
    let data = (0..n_frames * n_dims).map(|_| StandardNormal.sample(&mut rng)).collect();
    FeatureMatrix::new(data, n_frames, n_dims, 100.0)
}

/// Move every bias off zero. Freshly initialized biases are exactly 0, so
/// a window of dead ReLU inputs puts the next pre-activation exactly on the
/// kink, where finite differences see half a slope.
fn jitter_biases(p: &mut ParamSet<f64>, seed: u64) {
    let mut rng = rng_from(seed, &[tag("bias-jitter")]);
    for t in p.tensors.iter_mut().filter(|t| t.name.ends_with(".bias")) {
        t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
}

/// A batch of view sets with fixed teacher targets on a tiny network.
pub struct DinoInstance {
    pub net: NetworkConfig,
    pub params: ParamSet<f64>,
    pub views: Vec<ViewSet>,
    pub targets: Vec<Vec<Vec<f64>>>,
    pub tau_student: f64,
}

impl DinoInstance {
    pub fn objective(&self) -> DinoObjective<'_> {
        DinoObjective { net: &self.net, views: &self.views, targets: &self.targets, tau_student: self.tau_student }
    }
}

pub fn tiny_dino(seed: u64) -> Result<DinoInstance> {
    let net = NetworkConfig::tiny();
    let proj = ProjectionConfig::tiny();
    let mut params = init_dino(&net, &proj, seed)?.cast::<f64>();
    jitter_biases(&mut params, seed);
    let mut rng = rng_from(seed, &[tag("tiny-dino")]);
    let batch = 2;
    let (n_g, n_l) = (2, rng.random_range(0..3usize));
    let mut views = Vec::new();
    let mut targets = Vec::new();
    for b in 0..batch {
        let s = sub_seed(seed, &[b as u64]);
        views.push(ViewSet {
            global_views: (0..n_g).map(|i| random_features(8, net.input_dim(), sub_seed(s, &[1, i as u64]))).collect(),
            local_views: (0..n_l).map(|i| random_features(5, net.input_dim(), sub_seed(s, &[2, i as u64]))).collect(),
            source_utt: format!("u{b}"),
        });
        let center: Vec<f64> = (0..proj.k)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                0.1 * z
            })
            .collect();
        targets.push(
            (0..n_g)
                .map(|_| {
                    let logits: Vec<f64> = (0..proj.k).map(|_| rng.random_range(-1.0..1.0)).collect();
                    teacher_probs(&logits, &center, 0.04)
                })
                .collect(),
        );
    }
    Ok(DinoInstance { net, params, views, targets, tau_student: 0.1 })
}

/// Labeled chunks for the AAM objective on a tiny network.
pub struct AamInstance {
    pub net: NetworkConfig,
    pub params: ParamSet<f64>,
    pub chunks: Vec<FeatureMatrix>,
    pub labels: Vec<usize>,
    pub margin: f64,
    pub scale: f64,
}

impl AamInstance {
    pub fn objective(&self, freeze_trunk: bool) -> AamObjective<'_> {
        AamObjective { net: &self.net, chunks: &self.chunks, labels: &self.labels, margin: self.margin, scale: self.scale, freeze_trunk }
    }
}

pub fn tiny_aam(seed: u64) -> Result<AamInstance> {
    let net = NetworkConfig::tiny();
    let mut params = init_backbone::<f64>(&net, seed)?;
    let n_classes = 4;
    jitter_biases(&mut params, seed);
    params.push(init_class_weights(n_classes, net.embed_dim, sub_seed(seed, &[tag("w")])));
    let mut rng = rng_from(seed, &[tag("tiny-aam")]);
    let n = 3;
    Ok(AamInstance {
        chunks: (0..n).map(|i| random_features(7, net.input_dim(), sub_seed(seed, &[i]))).collect(),
        labels: (0..n).map(|_| rng.random_range(0..n_classes)).collect(),
        margin: rng.random_range(0.0..0.5),
        scale: 30.0,
        net,
        params,
    })
}

/// Worst relative gradient error of the 32-bit and 64-bit evaluations of
/// the same objective against a 64-bit finite-difference reference.
pub fn check_both<O>(params: &ParamSet<f64>, objective: &O, cfg: &GradCheckConfig) -> Result<(f64, f64)>
where
    O: crate::network::Objective<f32> + crate::network::Objective<f64>,
{
    let p32 = params.cast::<f32>();
    let e32 = grad_check(&p32, objective, objective, cfg)?;
    let e64 = grad_check(params, objective, objective, cfg)?;
    Ok((e32, e64))
}

/// EER by direct counting: FAR and FRR are evaluated at every midpoint
/// between distinct scores, then interpolated at the first threshold where
/// FAR no longer exceeds FRR. Needs both classes present.
pub fn brute_force_eer(scores: &[(f64, bool)]) -> f64 {
    let mut distinct: Vec<f64> = scores.iter().map(|s| s.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut thresholds = vec![distinct[0] - 1.0];
    thresholds.extend(distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    thresholds.push(distinct[distinct.len() - 1] + 1.0);
    let n_t = scores.iter().filter(|s| s.1).count() as f64;
    let n_n = scores.len() as f64 - n_t;
    let rates = |t: f64| {
        let far = scores.iter().filter(|s| !s.1 && s.0 >= t).count() as f64 / n_n;
        let frr = scores.iter().filter(|s| s.1 && s.0 < t).count() as f64 / n_t;
        (far, frr)
    };
    let mut prev = rates(thresholds[0]);
    for &t in &thresholds {
        let (far, frr) = rates(t);
        if far - frr <= 0.0 {
            if far == frr {
                return far;
            }
            let (pd, d) = (prev.0 - prev.1, far - frr);
            let a = pd / (pd - d);
            return prev.0 + a * (far - prev.0);
        }
        prev = (far, frr);
    }
    unreachable!("the last threshold rejects everything")
}

/// `Σ (1 − cos(x, c))` over `members`, `c` their normalized sum.
pub fn spherical_cost(rows: &[Vec<f64>], members: &[usize]) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    let mut c = vec![0.0; rows[0].len()];
    for &i in members {
        c.iter_mut().zip(&rows[i]).for_each(|(a, b)| *a += b);
    }
    let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    members.iter().map(|&i| 1.0 - rows[i].iter().zip(&c).map(|(a, b)| a * b / n).sum::<f64>()).sum()
}

/// Exhaustive best split of unit rows into two nonempty parts. Returns the
/// cost and, per row, whether it shares a part with row 0.
pub fn best_two_way_partition(rows: &[Vec<f64>]) -> (f64, Vec<bool>) {
    let n = rows.len();
    assert!((2..=20).contains(&n));
    let mut best = (f64::INFINITY, 0u32);
    for mask in 0..(1u32 << (n - 1)) {
        let (mut p0, mut p1) = (vec![0], vec![]);
        for i in 1..n {
            if mask >> (i - 1) & 1 == 1 {
                p1.push(i)
            } else {
                p0.push(i)
            }
        }
        if p1.is_empty() {
            continue;
        }
        let cost = spherical_cost(rows, &p0) + spherical_cost(rows, &p1);
        if cost < best.0 {
            best = (cost, mask);
        }
    }
    let same = (0..n).map(|i| i == 0 || best.1 >> (i - 1) & 1 == 0).collect();
    (best.0, same)
}
