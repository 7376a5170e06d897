mod common;

use std::collections::BTreeMap;
use std::path::Path;

use common::{config_in, snapshot, sslspk};
use serde_json::Value;
use sslspk_cli::PipelineConfig;

const TINY: &str = include_str!("../configs/tiny.toml");

fn ok(args: &[&str], config: &Path, out: &Path) -> Value {
    let (code, v) = sslspk(args, config, out, &[]);
    assert_eq!(code, 0, "{args:?}: {v}");
    v
}

const PIPELINE: [&str; 6] = ["gen-corpus", "train-dino", "cluster", "train-supervised", "iterate", "finetune-lm"];

fn full_run(config: &Path, out: &Path, env: &[(&str, &str)]) {
    for stage in PIPELINE {
        let (code, v) = sslspk(&[stage], config, out, env);
        assert_eq!(code, 0, "{stage}: {v}");
    }
    let (code, v) = sslspk(&["report"], config, out, env);
    assert_eq!(code, 0, "report: {v}");
}

#[test]
fn corpus_dino_eval_wiring() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), TINY);
    let out = dir.path().join("out");
    ok(&["gen-corpus"], &cfg, &out);
    ok(&["train-dino"], &cfg, &out);
    let v = ok(&["eval", "--model", "dino"], &cfg, &out);
    let eer = v["eer"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&eer));
    assert_eq!(v["trials"], "synthetic");
    let u = ok(&["eval", "--model", "untrained", "--trials", "hard"], &cfg, &out);
    assert_eq!(u["n_target"], 15);
    let s = ok(&["score", "--model", "dino"], &cfg, &out);
    assert_eq!(s["n_trials"], 40);
}

#[test]
fn cluster_before_dino_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), TINY);
    let out = dir.path().join("out");
    ok(&["gen-corpus"], &cfg, &out);
    let (code, v) = sslspk(&["cluster"], &cfg, &out, &[]);
    assert_eq!(code, 1);
    assert_eq!(v["error"]["kind"], "dependency");
    assert_eq!(v["error"]["needs"], "train-dino");
    let (code, v) = sslspk(&["train-dino"], &cfg, &dir.path().join("empty"), &[]);
    assert_eq!(code, 1);
    assert_eq!(v["error"]["needs"], "gen-corpus");
}

#[test]
fn unknown_config_key_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), &TINY.replace("[dino]\n", "[dino]\ntau_techer = 0.05\n"));
    let (code, v) = sslspk(&["gen-corpus"], &cfg, &dir.path().join("out"), &[]);
    assert_eq!(code, 1);
    assert_eq!(v["error"]["kind"], "config");
    assert_eq!(v["error"]["key"], "dino.tau_techer");
}

#[test]
fn invalid_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), &TINY.replace("[dino]\n", "[dino]\ntau_teacher = -1.0\n"));
    let (code, v) = sslspk(&["gen-corpus"], &cfg, &dir.path().join("out"), &[]);
    assert_eq!(code, 1);
    assert_eq!(v["error"]["kind"], "config");
    let cfg = config_in(dir.path(), TINY);
    let (code, v) = sslspk(&["gen-corpus"], &cfg, &dir.path().join("out"), &[("SSL_SPK_THREADS", "zero")]);
    assert_eq!(code, 1);
    assert_eq!(v["error"]["key"], "SSL_SPK_THREADS");
}

#[test]
fn unknown_model_lists_the_available_ones() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), TINY);
    let out = dir.path().join("out");
    ok(&["gen-corpus"], &cfg, &out);
    ok(&["train-dino"], &cfg, &out);
    let (code, v) = sslspk(&["eval", "--model", "iter9"], &cfg, &out, &[]);
    assert_eq!(code, 1);
    assert_eq!(v["error"]["kind"], "select");
    assert!(v["error"]["message"].as_str().unwrap().contains("untrained, dino"));
}

#[test]
fn locked_output_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), TINY);
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".lock"), "1\n").unwrap();
    let (code, v) = sslspk(&["gen-corpus"], &cfg, &out, &[]);
    assert_eq!(code, 1);
    assert_eq!(v["error"]["kind"], "locked");
    std::fs::remove_file(out.join(".lock")).unwrap();
    ok(&["gen-corpus"], &cfg, &out);
    assert!(!out.join(".lock").exists());
}

#[test]
fn bundled_configs_round_trip() {
    for text in [TINY, include_str!("../configs/desk.toml")] {
        let a = PipelineConfig::parse(text).unwrap();
        a.validate().unwrap();
        assert_eq!(PipelineConfig::parse(&a.to_toml()).unwrap(), a);
    }
    let d = PipelineConfig::default();
    assert_eq!(PipelineConfig::parse(&d.to_toml()).unwrap(), d);
    assert_eq!(PipelineConfig::parse("").unwrap(), d);
}

#[test]
fn relative_paths_resolve_against_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("cfg");
    std::fs::create_dir(&sub).unwrap();
    let p = config_in(&sub, "[paths]\nout_dir = \"runs/a\"\n");
    let c = PipelineConfig::load(&p).unwrap();
    assert_eq!(c.paths.out_dir, sub.join("runs/a"));
    assert_eq!(c.corpus_dir(), sub.join("runs/a/corpus"));
}

#[test]
fn finetune_sweep_table_has_one_row_per_segment_length() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), TINY);
    let out = dir.path().join("out");
    for stage in PIPELINE {
        ok(&[stage], &cfg, &out);
    }
    let rec: Value = serde_json::from_slice(&std::fs::read(out.join("stages/finetune-lm.json")).unwrap()).unwrap();
    let rows = rec["summary"]["rows"].as_array().unwrap();
    let lengths: Vec<f64> = rows.iter().map(|r| r["segment_seconds"].as_f64().unwrap()).collect();
    assert_eq!(lengths, [2.0, 3.0, 4.0]);
    for r in rows {
        let eer = r["eer"].as_object().unwrap();
        assert_eq!(eer.keys().collect::<Vec<_>>(), ["hard", "synthetic"]);
        assert!(eer.values().all(|v| (0.0..=1.0).contains(&v.as_f64().unwrap())));
    }
    let md = std::fs::read_to_string(out.join(rec["artifacts"]["table"].as_str().unwrap())).unwrap();
    let body: Vec<&str> = md.lines().filter(|l| l.starts_with("| ") && l.contains(" s |")).collect();
    assert_eq!(body.len(), 3, "{md}");
    let v = ok(&["eval"], &cfg, &out);
    assert_eq!(v["model"], "lm-4s");
}

#[test]
fn runs_are_byte_identical_across_repeats_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    full_run(&cfg, &a, &[("SSL_SPK_THREADS", "1")]);
    full_run(&cfg, &b, &[("SSL_SPK_THREADS", "3")]);
    full_run(&cfg, &c, &[]);
    let sa = snapshot(&a);
    assert!(sa.keys().any(|k| k.starts_with("iter2-")));
    for other in [snapshot(&b), snapshot(&c)] {
        assert_eq!(sa.keys().collect::<Vec<_>>(), other.keys().collect::<Vec<_>>());
        for (k, v) in &sa {
            assert!(other[k] == *v, "{k} differs");
        }
    }
}

#[test]
fn run_seed_reseeds_training_but_not_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for (out, seed) in [(&a, "0"), (&b, "7")] {
        ok(&["gen-corpus", "--seed", seed], &cfg, out);
        ok(&["train-dino", "--seed", seed], &cfg, out);
    }
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    let corpus = |s: &BTreeMap<String, Vec<u8>>| s.iter().filter(|(k, _)| k.starts_with("corpus")).map(|(k, v)| (k.clone(), v.clone())).collect::<Vec<_>>();
    assert_eq!(corpus(&sa), corpus(&sb));
    let teacher = |s: &BTreeMap<String, Vec<u8>>| s.keys().find(|k| k.starts_with("dino-teacher-")).cloned().unwrap();
    assert_ne!(teacher(&sa), teacher(&sb));
}
