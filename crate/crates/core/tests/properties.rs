use std::collections::BTreeMap;

use proptest::prelude::*;

use sslspk::clustering::{cluster_metrics, cosine_kmeans, ClusterAssignment, EmbeddingTable};
use sslspk::dino::{cross_view_loss, pair_count, student_log_probs, teacher_probs, update_center};
use sslspk::network::{init_class_weights, Tensor};
use sslspk::scoring::{compute_eer, cosine_score};
use sslspk::supervised::{aam_loss, margin_schedule, AamConfig};
use sslspk::testkit::{best_two_way_partition, brute_force_eer};

fn vec_f64(len: impl Into<prop::collection::SizeRange>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, len)
}

fn table(rows: Vec<Vec<f64>>) -> EmbeddingTable {
    let rows: Vec<Vec<f64>> = rows
        .into_iter()
        .map(|r| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            r.iter().map(|v| v / n).collect()
        })
        .collect();
    EmbeddingTable { utt_ids: (0..rows.len()).map(|i| format!("u{i:03}")).collect(), rows, model_id: "test".into() }
}

proptest! {
    #[test]
    fn teacher_probs_form_a_distribution(logits in vec_f64(2..40), shift in -100.0f64..100.0, tau in 0.01f64..1.0) {
        let c = vec![0.0; logits.len()];
        let p = teacher_probs(&logits, &c, tau);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let q = teacher_probs(&shifted, &c, tau);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        prop_assert!(teacher_probs(&logits, &logits, tau).iter().all(|&v| (v - 1.0 / logits.len() as f64).abs() < 1e-12));
    }

    #[test]
    fn student_log_probs_normalize(logits in vec_f64(2..40), tau in 0.01f64..1.0) {
        let lp = student_log_probs(&logits, tau);
        let m = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + lp.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        prop_assert!(lse.abs() <= 1e-6);
    }

    #[test]
    fn cosine_ignores_positive_scaling(a in vec_f64(8), b in vec_f64(8), alpha in 0.01f64..100.0, beta in 0.01f64..100.0) {
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3) && b.iter().any(|v| v.abs() > 1e-3));
        let s = cosine_score(&a, &b).unwrap();
        let sa: Vec<f64> = a.iter().map(|v| v * alpha).collect();
        let sb: Vec<f64> = b.iter().map(|v| v * beta).collect();
        prop_assert!((cosine_score(&sa, &sb).unwrap() - s).abs() <= 1e-12);
    }

    #[test]
    fn eer_bounds_and_label_swap(scores in prop::collection::vec((-1.0f64..1.0, any::<bool>()), 2..200)) {
        prop_assume!(scores.iter().any(|s| s.1) && scores.iter().any(|s| !s.1));
        let (eer, _) = compute_eer(&scores).unwrap();
        prop_assert!((0.0..=1.0).contains(&eer));
        let swapped: Vec<(f64, bool)> = scores.iter().map(|&(s, t)| (-s, !t)).collect();
        prop_assert!((compute_eer(&swapped).unwrap().0 - eer).abs() <= 1e-12);
    }

    #[test]
    fn correctly_ordered_target_never_hurts(scores in prop::collection::vec((-1.0f64..1.0, any::<bool>()), 2..200)) {
        prop_assume!(scores.iter().any(|s| s.1) && scores.iter().any(|s| !s.1));
        let (eer, _) = compute_eer(&scores).unwrap();
        let mut more = scores.clone();
        more.push((2.0, true));
        prop_assert!(compute_eer(&more).unwrap().0 <= eer + 1e-12);
    }

    #[test]
    fn margin_schedule_is_monotone(warmup in 0usize..40, max in 0.0f64..1.5) {
        let cfg = AamConfig { warmup_epochs: warmup, margin_max: max, ..AamConfig::default() };
        let m: Vec<f64> = (0..60).map(|e| margin_schedule(e, &cfg)).collect();
        prop_assert!(m.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(m[warmup..].iter().all(|&v| v == max));
    }

    #[test]
    fn margin_never_lowers_aam_loss(e in vec_f64(6), label in 0usize..5, margin in 0.0f64..0.8, seed in 0u64..1000) {
        prop_assume!(e.iter().any(|v| v.abs() > 1e-3));
        let w: Tensor<f64> = init_class_weights(5, 6, seed);
        let base = aam_loss(&e, label, &w, 0.0, 30.0, None).unwrap();
        let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos = w.row(label).iter().zip(&e).map(|(a, b)| a * b / n).sum::<f64>();
        prop_assume!(cos > (std::f64::consts::PI - margin).cos());
        let with = aam_loss(&e, label, &w, margin, 30.0, None).unwrap();
        prop_assert!(with.loss >= base.loss - 1e-12);
    }

    #[test]
    fn cluster_metrics_ignore_relabeling(labels in prop::collection::vec(0usize..4, 4..30), truth in prop::collection::vec(0usize..3, 30), perm in Just([2usize, 0, 3, 1]).prop_shuffle()) {
        let ids: Vec<String> = (0..labels.len()).map(|i| format!("u{i}")).collect();
        let t: BTreeMap<String, String> = ids.iter().zip(&truth).map(|(u, s)| (u.clone(), format!("s{s}"))).collect();
        let a = ClusterAssignment { labels: ids.iter().cloned().zip(labels.iter().copied()).collect(), k: 4, objective: 0.0, history: vec![] };
        let b = ClusterAssignment { labels: ids.iter().cloned().zip(labels.iter().map(|&l| perm[l])).collect(), ..a.clone() };
        let (ma, mb) = (cluster_metrics(&a, &t), cluster_metrics(&b, &t));
        prop_assert!((ma.nmi - mb.nmi).abs() < 1e-12);
        prop_assert_eq!(ma.purity, mb.purity);
    }
}

#[test]
fn pair_count_matches_enumeration() {
    for n_g in 2..6 {
        for n_l in 0..8 {
            let k = 3;
            let targets = vec![vec![1.0 / k as f64; k]; n_g];
            let student = vec![vec![0.0; k]; n_g + n_l];
            let out = cross_view_loss(&targets, &student, 0.1).unwrap();
            let enumerated = (0..n_g).flat_map(|g| (0..n_g + n_l).map(move |v| (g, v))).filter(|(g, v)| g != v).count();
            assert_eq!(out.n_pairs, enumerated);
            assert_eq!(pair_count(n_g, n_l), n_g * (n_g - 1) + n_g * n_l);
            assert_eq!(out.n_pairs, pair_count(n_g, n_l));
        }
    }
}

#[test]
fn center_matches_closed_form_over_100_steps() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let (k, m) = (7, 0.9);
    let c0: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut c = c0.clone();
    let mut means = Vec::new();
    for _ in 0..100 {
        let batch: Vec<Vec<f64>> = (0..5).map(|_| (0..k).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        means.push((0..k).map(|j| batch.iter().map(|r| r[j]).sum::<f64>() / 5.0).collect::<Vec<f64>>());
        c = update_center(&c, &batch, m).unwrap();
    }
    let s = means.len() as i32;
    for j in 0..k {
        let closed = m.powi(s) * c0[j] + (1.0 - m) * (0..means.len()).map(|i| m.powi(s - 1 - i as i32) * means[i][j]).sum::<f64>();
        assert!((c[j] - closed).abs() <= 1e-10, "dim {j}: {} vs {closed}", c[j]);
    }
}

#[test]
fn eer_matches_brute_force_sweep() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    for case in 0..100 {
        let n = rng.random_range(2..=200);
        let mut scores: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                let target = rng.random_bool(0.5);
                // Coarse grid on half the cases to exercise ties.
                let s: f64 = rng.random_range(-1.0..1.0) + if target { 0.3 } else { 0.0 };
                (if case % 2 == 0 { (s * 10.0).round() / 10.0 } else { s }, target)
            })
            .collect();
        scores[0].1 = true;
        scores[1].1 = false;
        let (eer, _) = compute_eer(&scores).unwrap();
        let oracle = brute_force_eer(&scores);
        assert!((eer - oracle).abs() <= 1e-12, "case {case}: {eer} vs {oracle}");
    }
}

#[test]
fn kmeans_objective_never_increases() {
    use rand::{Rng, SeedableRng};
    for case in 0..50u64 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(case);
        let n = rng.random_range(10..60);
        let d = rng.random_range(2..8);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let k = rng.random_range(2..6);
        let a = cosine_kmeans(&table(rows), k, 100, case).unwrap();
        assert!(a.history.windows(2).all(|w| w[1] <= w[0] + 1e-9), "case {case}: {:?}", a.history);
        assert_eq!(a.n_nonempty(), k);
    }
}

#[test]
fn kmeans_recovers_two_bundles() {
    use rand::{Rng, SeedableRng};
    for case in 0..10u64 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100 + case);
        let n = rng.random_range(4..=12);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let axis = if i % 2 == 0 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
                axis.iter().map(|a| a + rng.random_range(-0.1..0.1)).collect()
            })
            .collect();
        let t = table(rows);
        let (cost, same_as_0) = best_two_way_partition(&t.rows);
        let a = cosine_kmeans(&t, 2, 50, case).unwrap();
        let l0 = a.labels[&t.utt_ids[0]];
        for (i, (id, &expected)) in t.utt_ids.iter().zip(&same_as_0).enumerate().skip(1) {
            let same = a.labels[id] == l0;
            assert_eq!(same, expected, "case {case} point {i}");
            assert_eq!(same, i % 2 == 0);
        }
        assert!((a.objective - cost).abs() < 1e-9);
    }
}

#[test]
fn kmeans_is_seed_deterministic() {
    let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64).sin(), (i as f64 * 0.7).cos(), 0.3]).collect();
    let t = table(rows);
    let a = cosine_kmeans(&t, 4, 50, 9).unwrap();
    let b = cosine_kmeans(&t, 4, 50, 9).unwrap();
    assert_eq!(a.to_text(), b.to_text());
    assert_eq!(a.objective.to_bits(), b.objective.to_bits());
}
