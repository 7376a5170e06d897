//! One function per subcommand. Each reads its inputs from stage records,
//! writes content-named artifacts and returns a one-line summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sslspk::clustering::{cluster_metrics, cosine_kmeans_restarts, extract_embeddings, run_iterations, Iteration};
use sslspk::corpus::{generate_corpus, make_trials, CorpusManifest, TrialList, UnlabeledCorpus};
use sslspk::dino::{init_dino, train_dino_observed};
use sslspk::network::{Checkpoint, CheckpointKind};
use sslspk::scoring::{evaluate, ScoreReport};
use sslspk::supervised::{large_margin_finetune, train_supervised, FinetuneConfig, SupervisedOutcome};
use sslspk::{ClusterAssignment, ParamSet, TrainConfig};

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::store::{StageRecord, Store};

type Out = Result<Value, CliError>;

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub store: Store,
}

fn meta(pairs: &[(&str, Value)]) -> BTreeMap<String, Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("plain data serializes")
}

/// `path` relative to `base` when it lies inside it.
fn relative_to(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).display().to_string()
}

impl Ctx {
    fn resolve(&self, stored: &str) -> PathBuf {
        self.store.root().join(stored)
    }

    fn corpus(&self, stage: &'static str) -> Result<(CorpusManifest, UnlabeledCorpus), CliError> {
        let rec = self.store.require(stage, "gen-corpus")?;
        let m = CorpusManifest::read(&self.resolve(&rec.artifacts["manifest"]))?;
        let c = m.unlabeled()?;
        Ok((m, c))
    }

    fn trial_lists(&self, stage: &'static str) -> Result<Vec<(String, TrialList)>, CliError> {
        let rec = self.store.require(stage, "gen-corpus")?;
        rec.artifacts
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("trials:").map(|name| (name, v)))
            .map(|(name, v)| Ok((name.to_string(), TrialList::read(&self.resolve(v))?)))
            .collect()
    }

    fn checkpoint(&self, kind: CheckpointKind, params: ParamSet<f32>, meta: BTreeMap<String, Value>) -> Checkpoint {
        Checkpoint { kind, network: self.cfg.network.clone(), projection: None, meta, params }
    }

    fn check_network(&self, ck: &Checkpoint, stage: &str) -> Result<(), CliError> {
        if ck.network != self.cfg.network {
            return Err(sslspk::Error::config("network", format!("differs from the network of the checkpoint `{stage}` consumes; rerun earlier stages")).into());
        }
        Ok(())
    }

    fn train_cfg(&self) -> TrainConfig {
        TrainConfig { seed: self.cfg.stage_seed("train", self.cfg.train.seed), ..self.cfg.train.clone() }
    }
}

fn progress(stage: &str, epoch: usize, loss: f64) {
    eprintln!("{stage}: epoch {} loss {loss:.4}", epoch + 1);
}

pub fn gen_corpus(ctx: &Ctx) -> Out {
    let cfg = &ctx.cfg;
    let m = generate_corpus(&cfg.corpus)?;
    let dir = cfg.corpus_dir();
    let manifest = m.write_to_dir(&dir)?;
    let root = ctx.store.root();
    let mut rec = StageRecord { stage: "gen-corpus".into(), ..StageRecord::default() };
    rec.artifacts.insert("manifest".into(), relative_to(&manifest, root));
    let mut counts = BTreeMap::new();
    for t in &cfg.trials {
        let list = make_trials(&m, t.n_target, t.n_nontarget, t.seed)?;
        let path = dir.join(format!("trials-{}.txt", t.name));
        list.write(&path)?;
        rec.artifacts.insert(format!("trials:{}", t.name), relative_to(&path, root));
        counts.insert(t.name.clone(), list.len());
    }
    rec.summary = json!({
        "n_speakers": cfg.corpus.n_speakers,
        "n_speech": m.utterances.len(),
        "n_noise": m.noise_bank.len(),
        "n_rir": m.rir_bank.len(),
        "trials": counts,
    });
    ctx.store.save_record(&rec)?;
    Ok(json!({ "stage": "gen-corpus", "manifest": rec.artifacts["manifest"], "summary": rec.summary }))
}

pub fn train_dino(ctx: &Ctx) -> Out {
    let cfg = &ctx.cfg;
    let (_, corpus) = ctx.corpus("train-dino")?;
    let dcfg = sslspk::DinoConfig { seed: cfg.stage_seed("dino", cfg.dino.seed), ..cfg.dino.clone() };
    let untrained = init_dino(&cfg.network, &cfg.projection, dcfg.seed)?;
    let out = train_dino_observed(&corpus, &cfg.network, &cfg.projection, &dcfg, |e| {
        eprintln!("train-dino: epoch {} loss {:.4} kl {:.4}", e.epoch + 1, e.loss, e.kl_from_uniform);
    })?;
    let m = meta(&[("dino", to_value(&dcfg))]);
    let with_head = |kind, params: ParamSet<f32>| Checkpoint { projection: Some(cfg.projection.clone()), ..ctx.checkpoint(kind, params, m.clone()) };
    let store = &ctx.store;
    let mut rec = StageRecord { stage: "train-dino".into(), ..StageRecord::default() };
    let u = store.put_checkpoint("untrained", &with_head(CheckpointKind::Untrained, untrained))?;
    let t = store.put_checkpoint("dino-teacher", &with_head(CheckpointKind::DinoTeacher, out.teacher.clone()))?;
    let s = store.put_checkpoint("dino-student", &with_head(CheckpointKind::DinoStudent, out.student.clone()))?;
    let r = store.put("dino-report", "jsonl", out.report_jsonl().as_bytes())?;
    rec.artifacts.insert("untrained".into(), u.clone());
    rec.artifacts.insert("teacher".into(), t.clone());
    rec.artifacts.insert("student".into(), s);
    rec.artifacts.insert("report".into(), r);
    rec.models = vec![("untrained".into(), u), ("dino".into(), t)];
    let last = out.report.last();
    rec.summary = json!({
        "epochs": out.report.len(),
        "final_loss": last.map(|e| e.loss),
        "final_kl_from_uniform": last.map(|e| e.kl_from_uniform),
        "warnings": out.warnings,
    });
    store.save_record(&rec)?;
    Ok(json!({ "stage": "train-dino", "checkpoint": rec.artifacts["teacher"], "summary": rec.summary }))
}

fn truth(m: &CorpusManifest) -> BTreeMap<String, String> {
    m.utterances.iter().filter_map(|r| r.speaker_id.clone().map(|s| (r.utt_id.clone(), s))).collect()
}

pub fn cluster(ctx: &Ctx) -> Out {
    let cfg = &ctx.cfg;
    let dino = ctx.store.require("cluster", "train-dino")?;
    let ck = ctx.store.checkpoint(&dino.artifacts["teacher"])?;
    let (m, corpus) = ctx.corpus("cluster")?;
    let model_id = ck.content_hash();
    let table = extract_embeddings(&ck.params, &ck.network, &corpus.speech, corpus.sample_rate, &model_id)?;
    let base = format!("embeddings-{}", &model_id[..16]);
    table.write(&ctx.store.path(&base))?;
    let labels =
        cosine_kmeans_restarts(&table, cfg.cluster.k, cfg.cluster.kmeans_iters, cfg.cluster.kmeans_restarts, cfg.stage_seed("cluster", cfg.cluster.seed))?;
    let lf = ctx.store.put("labels", "txt", labels.to_text().as_bytes())?;
    let metrics = cluster_metrics(&labels, &truth(&m));
    let mut rec = StageRecord { stage: "cluster".into(), ..StageRecord::default() };
    rec.artifacts.insert("embeddings".into(), format!("{base}.bin"));
    rec.artifacts.insert("labels".into(), lf);
    rec.artifacts.insert("source".into(), dino.artifacts["teacher"].clone());
    rec.summary = json!({
        "k": labels.k,
        "objective": labels.objective,
        "n_nonempty": metrics.n_nonempty,
        "nmi": metrics.nmi,
        "purity": metrics.purity,
    });
    ctx.store.save_record(&rec)?;
    Ok(json!({ "stage": "cluster", "labels": rec.artifacts["labels"], "summary": rec.summary }))
}

fn labels_from(ctx: &Ctx, file: &str) -> Result<ClusterAssignment, CliError> {
    Ok(ClusterAssignment::parse(&ctx.store.read_text(file)?, ctx.cfg.cluster.k)?)
}

fn save_supervised(ctx: &Ctx, stem: &str, kind: CheckpointKind, out: &SupervisedOutcome, m: BTreeMap<String, Value>) -> Result<(String, String), CliError> {
    let ck = ctx.checkpoint(kind, out.params.clone(), m);
    let c = ctx.store.put_checkpoint(stem, &ck)?;
    let r = ctx.store.put(&format!("{stem}-report"), "jsonl", out.report_jsonl().as_bytes())?;
    Ok((c, r))
}

pub fn train_supervised_stage(ctx: &Ctx) -> Out {
    let cfg = &ctx.cfg;
    let cl = ctx.store.require("train-supervised", "cluster")?;
    let labels = labels_from(ctx, &cl.artifacts["labels"])?;
    let (_, corpus) = ctx.corpus("train-supervised")?;
    let warm = if cfg.cluster.warm_start {
        let ck = ctx.store.checkpoint(&cl.artifacts["source"])?;
        ctx.check_network(&ck, "train-dino")?;
        Some(ck.params)
    } else {
        None
    };
    let tcfg = ctx.train_cfg();
    let out = train_supervised(&corpus, &labels, &cfg.network, &cfg.aam, &tcfg, warm.as_ref())?;
    for e in &out.report {
        progress("train-supervised", e.epoch, e.loss);
    }
    let m = meta(&[("aam", to_value(&cfg.aam)), ("train", to_value(&tcfg)), ("labels", cl.artifacts["labels"].clone().into())]);
    let (c, r) = save_supervised(ctx, "supervised", CheckpointKind::Supervised, &out, m)?;
    let mut rec = StageRecord { stage: "train-supervised".into(), ..StageRecord::default() };
    rec.artifacts.insert("checkpoint".into(), c.clone());
    rec.artifacts.insert("labels".into(), cl.artifacts["labels"].clone());
    rec.artifacts.insert("report".into(), r);
    rec.models = vec![("supervised".into(), c)];
    rec.summary = json!({
        "n_classes": out.n_classes,
        "final_loss": out.report.last().map(|e| e.loss),
    });
    ctx.store.save_record(&rec)?;
    Ok(json!({ "stage": "train-supervised", "checkpoint": rec.artifacts["checkpoint"], "summary": rec.summary }))
}

pub fn iterate(ctx: &Ctx) -> Out {
    let cfg = &ctx.cfg;
    let dino = ctx.store.require("iterate", "train-dino")?;
    let ck = ctx.store.checkpoint(&dino.artifacts["teacher"])?;
    ctx.check_network(&ck, "train-dino")?;
    let (m, corpus) = ctx.corpus("iterate")?;
    let truth = truth(&m);
    let plan = sslspk::IterationPlan { seed: cfg.stage_seed("cluster", cfg.cluster.seed), ..cfg.cluster.clone() };
    let tcfg = ctx.train_cfg();
    let model_id = |p: &ParamSet<f32>| ctx.checkpoint(CheckpointKind::Supervised, p.clone(), BTreeMap::new()).content_hash();
    let mut rec = StageRecord { stage: "iterate".into(), ..StageRecord::default() };
    let mut rows = Vec::new();
    let mut report = String::new();
    let mut failed = None;
    let result = run_iterations(&corpus, &ck.params, &cfg.network, &plan, &cfg.aam, &tcfg, &model_id, |it: &Iteration| {
        let mut persist = || -> Result<(), CliError> {
            let name = format!("iter{}", it.row.iteration);
            let lf = ctx.store.put(&format!("labels-{name}"), "txt", it.labels.to_text().as_bytes())?;
            let out = SupervisedOutcome { params: it.params.clone(), n_classes: it.labels.n_nonempty(), report: it.report.clone() };
            let m = meta(&[("aam", to_value(&cfg.aam)), ("train", to_value(&tcfg)), ("labels", lf.clone().into())]);
            let (c, r) = save_supervised(ctx, &name, CheckpointKind::Supervised, &out, m)?;
            let metrics = cluster_metrics(&it.labels, &truth);
            eprintln!("iterate: round {} nmi {:.3} final loss {:.4}", it.row.iteration, metrics.nmi, it.row.final_loss);
            let mut row = to_value(&it.row);
            row["nmi"] = metrics.nmi.into();
            row["purity"] = metrics.purity.into();
            report.push_str(&(row.to_string() + "\n"));
            rows.push(row);
            rec.artifacts.insert(format!("labels:{name}"), lf);
            rec.artifacts.insert(format!("report:{name}"), r);
            rec.models.push((name, c));
            Ok(())
        };
        persist().map_err(|e| {
            let msg = e.to_string();
            failed = Some(e);
            sslspk::Error::Checkpoint(msg)
        })
    });
    if let Some(e) = failed {
        return Err(e);
    }
    result?;
    let rf = ctx.store.put("iterate-report", "jsonl", report.as_bytes())?;
    rec.artifacts.insert("report".into(), rf);
    rec.summary = json!({ "rounds": rows });
    ctx.store.save_record(&rec)?;
    Ok(json!({ "stage": "iterate", "models": rec.models.iter().map(|m| &m.0).collect::<Vec<_>>(), "summary": rec.summary }))
}

/// The model and labels large-margin fine-tuning starts from.
fn finetune_base(ctx: &Ctx) -> Result<(String, String, String), CliError> {
    if let Some(rec) = ctx.store.record("iterate")? {
        if let Some((name, file)) = rec.models.last() {
            return Ok((name.clone(), file.clone(), rec.artifacts[&format!("labels:{name}")].clone()));
        }
    }
    if let Some(rec) = ctx.store.record("train-supervised")? {
        return Ok(("supervised".into(), rec.artifacts["checkpoint"].clone(), rec.artifacts["labels"].clone()));
    }
    Err(ctx.store.require("finetune-lm", "iterate").unwrap_err())
}

fn segment_name(s: f64) -> String {
    format!("lm-{s}s")
}

pub fn finetune_lm(ctx: &Ctx) -> Out {
    let cfg = &ctx.cfg;
    let (base_name, base_file, labels_file) = finetune_base(ctx)?;
    let base = ctx.store.checkpoint(&base_file)?;
    ctx.check_network(&base, &base_name)?;
    let labels = labels_from(ctx, &labels_file)?;
    let (_, corpus) = ctx.corpus("finetune-lm")?;
    let lists = ctx.trial_lists("finetune-lm")?;
    let mut rec = StageRecord { stage: "finetune-lm".into(), ..StageRecord::default() };
    rec.artifacts.insert("base".into(), base_file.clone());
    let mut rows = Vec::new();
    for &s in &cfg.sweep.segment_seconds {
        let fcfg = FinetuneConfig { chunk_seconds: s, seed: cfg.stage_seed("finetune", cfg.finetune.seed), ..cfg.finetune.clone() };
        let out = large_margin_finetune(&base.params, &corpus, &labels, &cfg.network, &cfg.aam, &fcfg)?;
        let name = segment_name(s);
        let m = meta(&[("aam", to_value(&cfg.aam)), ("finetune", to_value(&fcfg)), ("base", base_file.clone().into())]);
        let (c, r) = save_supervised(ctx, &name, CheckpointKind::LargeMargin, &out, m)?;
        let ck_hash = ctx.store.checkpoint(&c)?.content_hash();
        let mut eers = BTreeMap::new();
        for (list, trials) in &lists {
            let report = evaluate(&out.params, &cfg.network, &corpus.speech, corpus.sample_rate, trials, &ck_hash)?;
            eers.insert(list.clone(), report.eer);
        }
        eprintln!("finetune-lm: {s} s chunks, eer {eers:?}");
        rows.push(json!({ "segment_seconds": s, "eer": eers }));
        rec.artifacts.insert(format!("report:{name}"), r);
        rec.models.push((name, c));
    }
    let names: Vec<&String> = lists.iter().map(|l| &l.0).collect();
    let mut md = String::from("| segment |");
    names.iter().for_each(|n| write!(md, " {n} EER (%) |").unwrap());
    md.push_str("\n|---|");
    names.iter().for_each(|_| md.push_str("---|"));
    md.push('\n');
    for r in &rows {
        write!(md, "| {} s |", r["segment_seconds"]).unwrap();
        for n in &names {
            write!(md, " {:.2} |", 100.0 * r["eer"][n.as_str()].as_f64().unwrap_or(f64::NAN)).unwrap();
        }
        md.push('\n');
    }
    let table = json!({ "base": base_name, "rows": rows });
    rec.artifacts.insert("table".into(), ctx.store.put("lm-sweep", "md", md.as_bytes())?);
    rec.artifacts.insert("table_json".into(), ctx.store.put("lm-sweep", "json", (table.to_string() + "\n").as_bytes())?);
    rec.summary = table;
    ctx.store.save_record(&rec)?;
    Ok(json!({ "stage": "finetune-lm", "table": rec.artifacts["table"], "summary": rec.summary }))
}

type Selection = ((String, String), (String, TrialList));

/// Pick a model by name (default: the latest) and a trial list by name
/// (default: the first).
fn select(ctx: &Ctx, stage: &'static str, model: Option<&str>, trials: Option<&str>) -> Result<Selection, CliError> {
    let models = ctx.store.models()?;
    if models.is_empty() {
        return Err(ctx.store.require(stage, "train-dino").unwrap_err());
    }
    let m = match model {
        None => models.last().cloned().unwrap(),
        Some(name) => models.iter().find(|m| m.0 == name).cloned().ok_or_else(|| CliError::Select {
            what: "model",
            name: name.into(),
            available: models.iter().map(|m| m.0.clone()).collect(),
        })?,
    };
    let lists = ctx.trial_lists(stage)?;
    let first = ctx.cfg.trials[0].name.as_str();
    let want = trials.unwrap_or(first);
    let t = lists.iter().find(|l| l.0 == want).cloned().ok_or_else(|| CliError::Select {
        what: "trial list",
        name: want.into(),
        available: lists.iter().map(|l| l.0.clone()).collect(),
    })?;
    Ok((m, t))
}

fn score_model(ctx: &Ctx, stage: &'static str, file: &str, trials: &TrialList) -> Result<ScoreReport, CliError> {
    let ck = ctx.store.checkpoint(file)?;
    let (_, corpus) = ctx.corpus(stage)?;
    Ok(evaluate(&ck.params, &ck.network, &corpus.speech, corpus.sample_rate, trials, &ck.content_hash())?)
}

fn upsert(ctx: &Ctx, stage: &str, key: String, value: String) -> Result<(), CliError> {
    let mut rec = ctx.store.record(stage)?.unwrap_or_else(|| StageRecord { stage: stage.into(), ..StageRecord::default() });
    rec.artifacts.insert(key, value);
    ctx.store.save_record(&rec)
}

pub fn score(ctx: &Ctx, model: Option<&str>, trials: Option<&str>) -> Out {
    let ((name, file), (list, tl)) = select(ctx, "score", model, trials)?;
    let report = score_model(ctx, "score", &file, &tl)?;
    let sf = ctx.store.put(&format!("scores-{name}-{list}"), "txt", report.score_text().as_bytes())?;
    upsert(ctx, "score", format!("{list}/{file}"), sf.clone())?;
    Ok(json!({ "stage": "score", "model": name, "trials": list, "n_trials": report.scores.len(), "scores": sf }))
}

/// Score and summarize, reusing a stored summary for the same checkpoint
/// and trial list.
fn eval_cached(ctx: &Ctx, stage: &'static str, name: &str, file: &str, list: &str, tl: &TrialList) -> Result<(Value, String), CliError> {
    let key = format!("{list}/{file}");
    if let Some(rec) = ctx.store.record("eval")? {
        if let Some(f) = rec.artifacts.get(&key) {
            if let Ok(text) = ctx.store.read_text(f) {
                if let Ok(v) = serde_json::from_str::<Value>(&text) {
                    return Ok((v, f.clone()));
                }
            }
        }
    }
    let report = score_model(ctx, stage, file, tl)?;
    ctx.store.put(&format!("scores-{name}-{list}"), "txt", report.score_text().as_bytes())?;
    let f = ctx.store.put(&format!("eval-{name}-{list}"), "json", report.summary_json().as_bytes())?;
    upsert(ctx, "eval", key, f.clone())?;
    let v = serde_json::from_str(&report.summary_json()).expect("summary is JSON");
    Ok((v, f))
}

pub fn eval(ctx: &Ctx, model: Option<&str>, trials: Option<&str>) -> Out {
    let ((name, file), (list, tl)) = select(ctx, "eval", model, trials)?;
    let (v, f) = eval_cached(ctx, "eval", &name, &file, &list, &tl)?;
    Ok(json!({
        "stage": "eval",
        "model": name,
        "trials": list,
        "eer": v["eer"],
        "threshold": v["threshold"],
        "n_target": v["n_target"],
        "n_nontarget": v["n_nontarget"],
        "report": f,
    }))
}

/// Stage × trial-list EER grid over every stored model, plus the segment
/// length table when fine-tuning has run.
pub fn report(ctx: &Ctx) -> Out {
    let models = ctx.store.models()?;
    if models.is_empty() {
        return Err(ctx.store.require("report", "train-dino").unwrap_err());
    }
    let lists = ctx.trial_lists("report")?;
    let mut grid = Vec::new();
    for (name, file) in &models {
        let mut eers = BTreeMap::new();
        for (list, tl) in &lists {
            let (v, _) = eval_cached(ctx, "report", name, file, list, tl)?;
            eers.insert(list.clone(), v["eer"].clone());
        }
        grid.push(json!({ "model": name, "checkpoint": file, "eer": eers }));
    }
    let mut md = String::from("## Verification EER (%) by stage\n\n| model |");
    lists.iter().for_each(|(n, _)| write!(md, " {n} |").unwrap());
    md.push_str("\n|---|");
    lists.iter().for_each(|_| md.push_str("---|"));
    md.push('\n');
    for row in &grid {
        write!(md, "| {} |", row["model"].as_str().unwrap_or("")).unwrap();
        for (n, _) in &lists {
            write!(md, " {:.2} |", 100.0 * row["eer"][n.as_str()].as_f64().unwrap_or(f64::NAN)).unwrap();
        }
        md.push('\n');
    }
    let lm = ctx.store.record("finetune-lm")?;
    if let Some(rec) = &lm {
        md.push_str("\n## Large-margin fine-tuning by chunk length\n\n");
        md.push_str(&ctx.store.read_text(&rec.artifacts["table"])?);
    }
    let body = json!({
        "stages": grid,
        "segment_sweep": lm.map(|r| r.summary),
    });
    let mut rec = StageRecord { stage: "report".into(), ..StageRecord::default() };
    rec.artifacts.insert("markdown".into(), ctx.store.put("report", "md", md.as_bytes())?);
    rec.artifacts.insert("json".into(), ctx.store.put("report", "json", (body.to_string() + "\n").as_bytes())?);
    rec.summary = body;
    ctx.store.save_record(&rec)?;
    Ok(json!({ "stage": "report", "report": rec.artifacts["markdown"], "summary": rec.summary }))
}
