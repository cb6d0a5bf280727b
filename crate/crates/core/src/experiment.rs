//! Config-driven experiment runner: base pretraining, TPP, fine-tuning,
//! evaluation and analysis as resumable stages, plus report tables.
//!
//! Output layout: `output_dir/{checkpoints,metrics,analysis,logs}` with
//! `manifest.json` at the root. A stage is skipped when the manifest holds a
//! record for it with the same stage hash and all its outputs still exist.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::analysis::{alignment_report, pair_distance_stats, project_2d, EmbeddingDump};
use crate::corpus::{
    build_wikidata_pairs, filter_by_margin, generate_cipher_corpus, hold_out, load_pair_tsv,
    load_wikidata_records, mix_equal, CipherSpec, CorpusId, CorpusStream,
};
use crate::encoder::{
    load_checkpoint, mlm_pretrain, save_checkpoint, EncoderConfig, EncoderModel, MlmConfig,
    VocabBuildOptions, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::{
    macro_f1, one_decimal, relative_improvement, span_micro_f1, token_accuracy, MetricReport,
};
use crate::tasks::{
    collect_label_set, ensure_source_only, finetune_sequence, finetune_token, load_conll,
    load_sentiment_tsv, predict_class, predict_tags, FineTuneConfig, TaskModel, SENTIMENT_LABELS,
};
use crate::tpp::{tpp_pretrain, PretrainingSchedule, ScheduleMode, TppConfig};

pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsvCorpus {
    pub path: PathBuf,
    pub source_lang: String,
    pub target_lang: String,
    pub corpus_id: CorpusId,
    /// Keep only pairs whose score is at least this margin.
    #[serde(default)]
    pub min_margin: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WikidataCorpus {
    pub path: PathBuf,
    pub source_lang: String,
    pub target_lang: String,
}

/// One named corpus; exactly one of `tsv`, `wikidata`, `cipher` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub name: String,
    /// Pairs withheld from training for alignment analysis.
    #[serde(default)]
    pub held_out: Option<usize>,
    #[serde(default)]
    pub tsv: Option<TsvCorpus>,
    #[serde(default)]
    pub wikidata: Option<WikidataCorpus>,
    #[serde(default)]
    pub cipher: Option<CipherSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub mode: ScheduleMode,
    /// Corpus names: one for ONE, two or more for ALL and SEQUENCED.
    pub corpora: Vec<String>,
    /// ALL only: pairs per epoch of the mixed stream; defaults to the total.
    #[serde(default)]
    pub epoch_size: Option<usize>,
    #[serde(default)]
    pub tpp: TppConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// BIO entity tagging, scored by span micro-F1.
    Ner,
    /// Part-of-speech tagging, scored by token accuracy.
    Pos,
    /// Generic token tagging, scored by token accuracy.
    Tagging,
    /// Binary document classification, scored by macro-F1.
    Sentiment,
}

impl TaskKind {
    pub fn metric(self) -> &'static str {
        match self {
            TaskKind::Ner => "span_micro_f1",
            TaskKind::Pos | TaskKind::Tagging => "token_accuracy",
            TaskKind::Sentiment => "macro_f1",
        }
    }

    fn is_token(self) -> bool {
        self != TaskKind::Sentiment
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    #[serde(rename = "type")]
    pub kind: TaskKind,
    pub source_lang: String,
    pub train: PathBuf,
    /// Evaluation file per language.
    pub eval: BTreeMap<String, PathBuf>,
    /// Token tasks: label order; defaults to first appearance in `train`.
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    #[serde(default)]
    pub finetune: FineTuneConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSpec {
    /// Corpus whose held-out pairs are embedded.
    pub corpus: String,
}

/// A full run. Phase `seed` fields are replaced by the top-level seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Row label in reports.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub corpora: Vec<CorpusSpec>,
    #[serde(default)]
    pub base_pretrain: Option<MlmConfig>,
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
    pub task: TaskSpec,
    #[serde(default)]
    pub analysis: Option<AnalysisSpec>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        cfg.apply_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| cfg_err(e.to_string()))
    }

    /// Sets the run seed and every phase seed.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        if let Some(m) = &mut self.base_pretrain {
            m.seed = seed;
        }
        if let Some(s) = &mut self.schedule {
            s.tpp.seed = seed;
        }
        self.task.finetune.seed = seed;
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Report label: `name`, else derived from the schedule.
    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        match self.schedule.as_ref().map(|s| s.mode) {
            None => "baseline".into(),
            Some(ScheduleMode::One) => "+TPP (One)".into(),
            Some(ScheduleMode::All) => "+TPP (All)".into(),
            Some(ScheduleMode::Sequenced) => "+TPP (Sequenced)".into(),
        }
    }

    fn corpus(&self, name: &str) -> Option<&CorpusSpec> {
        self.corpora.iter().find(|c| c.name == name)
    }

    fn referenced_files(&self) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for c in &self.corpora {
            if let Some(t) = &c.tsv {
                out.push(t.path.clone());
            }
            if let Some(w) = &c.wikidata {
                out.push(w.path.clone());
            }
        }
        out.push(self.task.train.clone());
        out.extend(self.task.eval.values().cloned());
        out
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder
            .validate()
            .map_err(|e| cfg_err(format!("encoder: {e}")))?;
        let mut names = BTreeSet::new();
        for (i, c) in self.corpora.iter().enumerate() {
            let at = format!("corpora[{i}] ('{}')", c.name);
            if !names.insert(c.name.as_str()) {
                return Err(cfg_err(format!("{at}: duplicate corpus name")));
            }
            let kinds = [c.tsv.is_some(), c.wikidata.is_some(), c.cipher.is_some()];
            if kinds.iter().filter(|&&k| k).count() != 1 {
                return Err(cfg_err(format!(
                    "{at}: set exactly one of tsv, wikidata, cipher"
                )));
            }
            if c.held_out == Some(0) {
                return Err(cfg_err(format!("{at}.held_out: must be positive")));
            }
        }
        for f in self.referenced_files() {
            let p = self.resolve(&f);
            if !p.is_file() {
                return Err(cfg_err(format!(
                    "referenced file {} does not exist",
                    p.display()
                )));
            }
        }
        if let Some(m) = &self.base_pretrain {
            if !(m.mask_prob > 0.0 && m.mask_prob <= 1.0) || m.batch_size == 0 {
                return Err(cfg_err(
                    "base_pretrain: mask_prob must lie in (0, 1] and batch_size be positive",
                ));
            }
        }
        if let Some(s) = &self.schedule {
            s.tpp
                .validate()
                .map_err(|e| cfg_err(format!("schedule.tpp: {e}")))?;
            for n in &s.corpora {
                if self.corpus(n).is_none() {
                    return Err(cfg_err(format!("schedule.corpora: unknown corpus '{n}'")));
                }
            }
            let pairs: BTreeSet<(String, String)> = s
                .corpora
                .iter()
                .filter_map(|n| self.corpus(n))
                .map(corpus_langs)
                .collect();
            match s.mode {
                ScheduleMode::One if s.corpora.len() != 1 => {
                    return Err(cfg_err("schedule: ONE mode takes exactly one corpus"))
                }
                ScheduleMode::All if pairs.len() < 2 => {
                    return Err(cfg_err(
                        "schedule: ALL mode needs corpora for at least two language pairs",
                    ))
                }
                ScheduleMode::All
                    if pairs.iter().map(|p| &p.0).collect::<BTreeSet<_>>().len() != 1 =>
                {
                    return Err(cfg_err(
                        "schedule: ALL mode needs one shared source language",
                    ))
                }
                ScheduleMode::Sequenced if s.corpora.len() < 2 => {
                    return Err(cfg_err(
                        "schedule: SEQUENCED mode needs at least two corpora",
                    ))
                }
                _ => {}
            }
            if s.epoch_size.is_some() && s.mode != ScheduleMode::All {
                return Err(cfg_err("schedule.epoch_size applies to ALL mode only"));
            }
        }
        if self.task.eval.is_empty() {
            return Err(cfg_err(
                "task.eval: at least one evaluation language is required",
            ));
        }
        self.task
            .finetune
            .validate()
            .map_err(|e| cfg_err(format!("task.finetune: {e}")))?;
        if let Some(l) = &self.task.labels {
            if self.task.kind == TaskKind::Sentiment {
                return Err(cfg_err("task.labels: the sentiment label set is fixed"));
            }
            if l.len() < 2 || l.iter().collect::<BTreeSet<_>>().len() != l.len() {
                return Err(cfg_err("task.labels: need at least two distinct labels"));
            }
        }
        if let Some(a) = &self.analysis {
            match self.corpus(&a.corpus) {
                None => {
                    return Err(cfg_err(format!(
                        "analysis.corpus: unknown corpus '{}'",
                        a.corpus
                    )))
                }
                Some(c) if c.held_out.is_none_or(|n| n < 2) => {
                    return Err(cfg_err(format!(
                        "analysis.corpus: '{}' needs held_out >= 2",
                        a.corpus
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Hash of the canonical JSON form; `output_dir` is excluded.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = None;
        Ok(sha256_hex(canonical_json(&c)?.as_bytes()))
    }
}

fn corpus_langs(c: &CorpusSpec) -> (String, String) {
    if let Some(t) = &c.tsv {
        (t.source_lang.clone(), t.target_lang.clone())
    } else if let Some(w) = &c.wikidata {
        (w.source_lang.clone(), w.target_lang.clone())
    } else {
        let s = c.cipher.as_ref().expect("validated corpus kind");
        (s.source_lang.clone(), s.target_lang.clone())
    }
}

/// Reads, resolves and validates a TOML experiment config.
pub fn validate_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    ExperimentConfig::from_toml(&text, base)
}

/// JSON with object keys sorted, so logically equal values hash equally.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    fn sort(v: Value) -> Value {
        match v {
            Value::Object(m) => {
                let sorted: BTreeMap<String, Value> =
                    m.into_iter().map(|(k, v)| (k, sort(v))).collect();
                Value::Object(sorted.into_iter().collect())
            }
            Value::Array(a) => Value::Array(a.into_iter().map(sort).collect()),
            other => other,
        }
    }
    Ok(serde_json::to_string(&sort(serde_json::to_value(value)?))?)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn file_digest(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Mlm,
    Tpp,
    Finetune,
    Evaluate,
    Analyze,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::Mlm => "mlm",
            Stage::Tpp => "tpp",
            Stage::Finetune => "finetune",
            Stage::Evaluate => "evaluate",
            Stage::Analyze => "analyze",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub hash: String,
    /// Files written by the stage, relative to the output directory.
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub value: f64,
    pub display: String,
    pub report: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub name: String,
    pub seed: u64,
    pub task: TaskKind,
    pub source_lang: String,
    /// True when the run has no TPP schedule and can serve as a Δ% baseline.
    pub baseline: bool,
    pub stages: Vec<StageRecord>,
    pub metrics: BTreeMap<String, MetricSummary>,
    pub complete: bool,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let tmp = dir.join(format!("{MANIFEST_FILE}.partial"));
        fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n")
            .map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    pub fn stage(&self, stage: Stage) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.stage == stage)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Require an existing run with the same config hash in the output directory.
    pub resume: bool,
    /// Stop after this stage; later stages are left for a later call.
    pub stop_after: Option<Stage>,
    /// Overrides `output_dir` from the config.
    pub output_dir: Option<PathBuf>,
}

/// Loaded corpora: training part and held-out part per corpus name.
struct Corpora {
    train: BTreeMap<String, CorpusStream>,
    held: BTreeMap<String, CorpusStream>,
}

fn load_corpora(cfg: &ExperimentConfig) -> Result<Corpora> {
    let mut train = BTreeMap::new();
    let mut held = BTreeMap::new();
    for c in &cfg.corpora {
        let stream = if let Some(t) = &c.tsv {
            let s = load_pair_tsv(
                cfg.resolve(&t.path),
                &t.source_lang,
                &t.target_lang,
                t.corpus_id,
            )?;
            match t.min_margin {
                Some(m) => filter_by_margin(&s, m)?,
                None => s,
            }
        } else if let Some(w) = &c.wikidata {
            let (records, _) = load_wikidata_records(cfg.resolve(&w.path))?;
            build_wikidata_pairs(&records, &w.source_lang, &w.target_lang)?
        } else {
            generate_cipher_corpus(c.cipher.as_ref().expect("validated corpus kind"))?
        };
        if let Some(n) = c.held_out {
            let (t, h) = hold_out(&stream, n, cfg.seed)?;
            train.insert(c.name.clone(), t);
            held.insert(c.name.clone(), h);
        } else {
            train.insert(c.name.clone(), stream);
        }
    }
    Ok(Corpora { train, held })
}

fn task_texts(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let t = &cfg.task;
    let mut out = Vec::new();
    let mut files = vec![(t.source_lang.clone(), t.train.clone())];
    files.extend(t.eval.iter().map(|(l, p)| (l.clone(), p.clone())));
    for (lang, p) in files {
        let p = cfg.resolve(&p);
        if t.kind.is_token() {
            out.extend(
                load_conll(&p, &lang)?
                    .into_iter()
                    .map(|s| s.tokens.join(" ")),
            );
        } else {
            out.extend(load_sentiment_tsv(&p, &lang)?.into_iter().map(|d| d.text));
        }
    }
    Ok(out)
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    manifest: RunManifest,
    corpora: Option<Corpora>,
    /// Checkpoint of the encoder entering the next stage.
    encoder_ckpt: Option<String>,
    /// Checkpoint of the encoder before TPP.
    pre_tpp_ckpt: Option<String>,
}

impl Runner<'_> {
    fn corpora(&mut self) -> Result<&Corpora> {
        if self.corpora.is_none() {
            self.corpora = Some(load_corpora(self.cfg)?);
        }
        Ok(self.corpora.as_ref().expect("just loaded"))
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn load_encoder(&self) -> Result<EncoderModel> {
        let rel = self.encoder_ckpt.as_ref().expect("init stage runs first");
        load_checkpoint(self.path(rel))
    }

    fn reusable(&self, stage: Stage, hash: &str) -> bool {
        self.manifest
            .stage(stage)
            .is_some_and(|r| r.hash == hash && r.outputs.iter().all(|o| self.path(o).exists()))
    }

    fn record(&mut self, stage: Stage, hash: String, outputs: Vec<String>) -> Result<()> {
        self.manifest.stages.retain(|r| r.stage < stage);
        self.manifest.stages.push(StageRecord {
            stage,
            hash,
            outputs,
        });
        self.manifest.complete = false;
        self.manifest.save(&self.dir)
    }

    fn stage_hash(&self, prev: &str, stage: Stage, inputs: Value) -> Result<String> {
        let body =
            canonical_json(&json!({ "prev": prev, "stage": stage.name(), "inputs": inputs }))?;
        Ok(sha256_hex(body.as_bytes()))
    }
}

/// Runs (or resumes) every stage of `cfg`, returning the manifest.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunManifest> {
    let dir = opts
        .output_dir
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(|d| cfg.resolve(d)))
        .ok_or_else(|| cfg_err("no output directory: set output_dir or pass --output-dir"))?;
    for sub in ["checkpoints", "metrics", "analysis", "logs"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let lock_path = dir.join(LOCK_FILE);
    let lock = fs::File::create(&lock_path).map_err(|e| Error::io(&lock_path, e))?;
    if lock.try_lock().is_err() {
        return Err(Error::invalid(format!(
            "{} is in use by another run",
            dir.display()
        )));
    }

    let config_hash = cfg.hash()?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let existing = if manifest_path.exists() {
        Some(RunManifest::load(&manifest_path)?)
    } else {
        None
    };
    let manifest = match existing {
        Some(m) if m.config_hash == config_hash => m,
        Some(m) => {
            return Err(cfg_err(format!(
                "{} holds a run of a different config ({}); use a fresh output directory",
                dir.display(),
                &m.config_hash[..12]
            )))
        }
        None if opts.resume => {
            return Err(cfg_err(format!(
                "--resume: no run to resume in {}",
                dir.display()
            )))
        }
        None => RunManifest {
            config_hash: config_hash.clone(),
            name: cfg.label(),
            seed: cfg.seed,
            task: cfg.task.kind,
            source_lang: cfg.task.source_lang.clone(),
            baseline: cfg.schedule.is_none(),
            stages: Vec::new(),
            metrics: BTreeMap::new(),
            complete: false,
        },
    };

    let mut r = Runner {
        cfg,
        dir,
        manifest,
        corpora: None,
        encoder_ckpt: None,
        pre_tpp_ckpt: None,
    };
    let stop = |s: Stage| opts.stop_after == Some(s);

    let mut digests = BTreeMap::new();
    for f in cfg.referenced_files() {
        digests.insert(f.display().to_string(), file_digest(&cfg.resolve(&f))?);
    }

    // init: vocabulary and randomly initialized encoder
    let init_hash = r.stage_hash(
        "",
        Stage::Init,
        json!({ "seed": cfg.seed, "encoder": cfg.encoder, "corpora": cfg.corpora, "task": cfg.task, "files": digests }),
    )?;
    let init_out = "checkpoints/init.ckpt".to_string();
    if !r.reusable(Stage::Init, &init_hash) {
        tracing::info!(stage = "init", "running");
        let mut texts = task_texts(cfg)?;
        let corpora = r.corpora()?;
        for s in corpora.train.values().chain(corpora.held.values()) {
            for p in s.pairs() {
                texts.push(p.source_text.clone());
                texts.push(p.target_text.clone());
            }
        }
        let vocab = Vocabulary::build(
            texts.iter().map(String::as_str),
            &VocabBuildOptions::default(),
        )?;
        let model = EncoderModel::new(cfg.encoder.clone(), vocab, cfg.seed)?;
        save_checkpoint(&model, r.path(&init_out))?;
        r.record(Stage::Init, init_hash.clone(), vec![init_out.clone()])?;
    }
    r.encoder_ckpt = Some(init_out);
    let mut prev = init_hash;
    if stop(Stage::Init) {
        return Ok(r.manifest);
    }

    if let Some(mlm) = &cfg.base_pretrain {
        let h = r.stage_hash(&prev, Stage::Mlm, json!(mlm))?;
        let out = "checkpoints/mlm.ckpt".to_string();
        let log = "logs/mlm_loss.csv".to_string();
        if !r.reusable(Stage::Mlm, &h) {
            tracing::info!(stage = "mlm", "running");
            let mut model = r.load_encoder()?;
            let mut texts = Vec::new();
            for s in r.corpora()?.train.values() {
                for p in s.pairs() {
                    texts.push(p.source_text.clone());
                    texts.push(p.target_text.clone());
                }
            }
            if texts.is_empty() {
                let t = &cfg.task;
                texts = if t.kind.is_token() {
                    load_conll(cfg.resolve(&t.train), &t.source_lang)?
                        .into_iter()
                        .map(|s| s.tokens.join(" "))
                        .collect()
                } else {
                    load_sentiment_tsv(cfg.resolve(&t.train), &t.source_lang)?
                        .into_iter()
                        .map(|d| d.text)
                        .collect()
                };
            }
            let report = mlm_pretrain(&mut model, &texts, mlm)?;
            report.write_loss_csv(&r.path(&log))?;
            save_checkpoint(&model, r.path(&out))?;
            r.record(Stage::Mlm, h.clone(), vec![out.clone(), log])?;
        }
        r.encoder_ckpt = Some(out);
        prev = h;
        if stop(Stage::Mlm) {
            return Ok(r.manifest);
        }
    }
    r.pre_tpp_ckpt = r.encoder_ckpt.clone();

    if let Some(s) = &cfg.schedule {
        let h = r.stage_hash(&prev, Stage::Tpp, json!(s))?;
        let out = "checkpoints/tpp.ckpt".to_string();
        let n_logs = if s.mode == ScheduleMode::Sequenced {
            s.corpora.len()
        } else {
            1
        };
        let logs: Vec<String> = (1..=n_logs)
            .map(|i| format!("logs/tpp_phase{i}_loss.csv"))
            .collect();
        if !r.reusable(Stage::Tpp, &h) {
            tracing::info!(stage = "tpp", mode = ?s.mode, "running");
            let mut model = r.load_encoder()?;
            let corpora = r.corpora()?;
            let streams: Vec<CorpusStream> =
                s.corpora.iter().map(|n| corpora.train[n].clone()).collect();
            let schedule = match s.mode {
                ScheduleMode::One => PretrainingSchedule::one(streams[0].clone(), s.tpp.clone())?,
                ScheduleMode::All => {
                    let total = streams.iter().map(CorpusStream::size).sum();
                    let mixed = mix_equal(&streams, s.epoch_size.unwrap_or(total), cfg.seed)?;
                    PretrainingSchedule::all(mixed, s.tpp.clone())?
                }
                ScheduleMode::Sequenced => PretrainingSchedule::sequenced(
                    streams.into_iter().map(|st| (st, s.tpp.clone())).collect(),
                )?,
            };
            let reports = tpp_pretrain(&mut model, &schedule)?;
            for (rep, log) in reports.iter().zip(&logs) {
                rep.write_loss_csv(&r.path(log))?;
            }
            save_checkpoint(&model, r.path(&out))?;
            let mut outputs = vec![out.clone()];
            outputs.extend(logs);
            r.record(Stage::Tpp, h.clone(), outputs)?;
        }
        r.encoder_ckpt = Some(out);
        prev = h;
        if stop(Stage::Tpp) {
            return Ok(r.manifest);
        }
    }
    let encoder_hash = prev.clone();

    // fine-tune on source-language task data only
    let t = &cfg.task;
    let h = r.stage_hash(&encoder_hash, Stage::Finetune, json!({ "task": t }))?;
    let task_out = "checkpoints/task.ckpt".to_string();
    let ft_log = "logs/finetune_loss.csv".to_string();
    if !r.reusable(Stage::Finetune, &h) {
        tracing::info!(stage = "finetune", "running");
        let model = r.load_encoder()?;
        let train_path = cfg.resolve(&t.train);
        let (tm, report) = if t.kind.is_token() {
            let train = load_conll(&train_path, &t.source_lang)?;
            ensure_source_only(train.iter().map(|s| s.lang.as_str()), &t.source_lang)?;
            let labels = t
                .labels
                .clone()
                .unwrap_or_else(|| collect_label_set(&train));
            finetune_token(model, &train, &labels, &t.finetune)?
        } else {
            let train = load_sentiment_tsv(&train_path, &t.source_lang)?;
            ensure_source_only(train.iter().map(|d| d.lang.as_str()), &t.source_lang)?;
            let labels: Vec<String> = SENTIMENT_LABELS.iter().map(|s| s.to_string()).collect();
            finetune_sequence(model, &train, &labels, &t.finetune)?
        };
        report.write_loss_csv(&r.path(&ft_log))?;
        tm.save(r.path(&task_out))?;
        r.record(Stage::Finetune, h.clone(), vec![task_out.clone(), ft_log])?;
    }
    let finetune_hash = h;
    if stop(Stage::Finetune) {
        return Ok(r.manifest);
    }

    let h = r.stage_hash(&finetune_hash, Stage::Evaluate, json!({}))?;
    let metric_files: Vec<(String, String)> = t
        .eval
        .keys()
        .map(|l| (l.clone(), format!("metrics/{l}.json")))
        .collect();
    if !r.reusable(Stage::Evaluate, &h) {
        tracing::info!(stage = "evaluate", "running");
        let tm = TaskModel::load(r.path(&task_out))?;
        let mut metrics = BTreeMap::new();
        for (lang, rel) in &metric_files {
            let report = evaluate_file(&tm, t.kind, &cfg.resolve(&t.eval[lang]), lang)?;
            fs::write(r.path(rel), report.to_json()? + "\n")
                .map_err(|e| Error::io(r.path(rel), e))?;
            tracing::info!(lang = %lang, metric = %report.metric, value = report.value, "evaluated");
            metrics.insert(
                lang.clone(),
                MetricSummary {
                    metric: report.metric.clone(),
                    value: report.value,
                    display: report.display.clone(),
                    report: rel.clone(),
                },
            );
        }
        r.manifest.metrics = metrics;
        r.record(
            Stage::Evaluate,
            h.clone(),
            metric_files.iter().map(|(_, f)| f.clone()).collect(),
        )?;
    }
    if stop(Stage::Evaluate) {
        return Ok(r.manifest);
    }

    if let Some(a) = &cfg.analysis {
        let h = r.stage_hash(&encoder_hash, Stage::Analyze, json!(a))?;
        let mut tags = vec!["pre"];
        if cfg.schedule.is_some() {
            tags.push("post");
        }
        let outputs: Vec<String> = tags
            .iter()
            .flat_map(|t| {
                [
                    "alignment.json",
                    "histogram.csv",
                    "projection.csv",
                    "embeddings.tsv",
                    "embeddings.bin",
                ]
                .map(|f| format!("analysis/{t}_{f}"))
            })
            .collect();
        if !r.reusable(Stage::Analyze, &h) {
            tracing::info!(stage = "analyze", "running");
            let held = r.corpora()?.held[&a.corpus].clone();
            let mut ckpts = vec![r.pre_tpp_ckpt.clone().expect("set before tpp")];
            if cfg.schedule.is_some() {
                ckpts.push(r.encoder_ckpt.clone().expect("tpp checkpoint"));
            }
            for (tag, ck) in tags.iter().zip(&ckpts) {
                let model = load_checkpoint(r.path(ck))?;
                write_analysis(&model, &held, &r.path("analysis"), tag)?;
            }
            r.record(Stage::Analyze, h, outputs)?;
        }
    }

    r.manifest.complete = true;
    r.manifest.save(&r.dir)?;
    Ok(r.manifest)
}

/// Scores a task model on one evaluation file with the task's metric.
pub fn evaluate_file(
    tm: &TaskModel,
    kind: TaskKind,
    path: &Path,
    lang: &str,
) -> Result<MetricReport> {
    if kind.is_token() {
        let data = load_conll(path, lang)?;
        let words: Vec<Vec<String>> = data.iter().map(|s| s.tokens.clone()).collect();
        let gold: Vec<Vec<String>> = data.iter().map(|s| s.labels.clone()).collect();
        let pred = predict_tags(tm, &words)?;
        match kind {
            TaskKind::Ner => span_micro_f1(&gold, &pred),
            _ => token_accuracy(&gold, &pred),
        }
    } else {
        let data = load_sentiment_tsv(path, lang)?;
        let texts: Vec<&str> = data.iter().map(|d| d.text.as_str()).collect();
        let gold: Vec<usize> = data.iter().map(|d| d.label).collect();
        macro_f1(&gold, &predict_class(tm, &texts)?, &tm.label_set)
    }
}

/// Embeds both sides of `pairs` and writes alignment statistics, the
/// distance histogram, a PCA projection and raw embedding dumps.
pub fn write_analysis(
    model: &EncoderModel,
    pairs: &CorpusStream,
    dir: &Path,
    tag: &str,
) -> Result<()> {
    let (src, tgt) = embed_pairs(model, pairs)?;
    let report = alignment_report(src.view(), tgt.view())?;
    let stats = pair_distance_stats(src.view(), tgt.view())?;
    let lp = pairs.language_pair();
    let mut both = Array2::zeros((src.nrows() * 2, src.ncols()));
    both.slice_mut(ndarray::s![..src.nrows(), ..]).assign(&src);
    both.slice_mut(ndarray::s![src.nrows().., ..]).assign(&tgt);
    let labels: Vec<&str> = std::iter::repeat_n(lp.source.as_str(), src.nrows())
        .chain(std::iter::repeat_n(lp.target.as_str(), tgt.nrows()))
        .collect();
    let proj = project_2d(both.view(), &labels)?;
    let mut dump = EmbeddingDump::from_matrix(src.view(), &lp.source);
    dump.extend(EmbeddingDump::from_matrix(tgt.view(), &lp.target))?;

    let write = |name: &str, body: String| {
        let p = dir.join(format!("{tag}_{name}"));
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write(
        "alignment.json",
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    write("histogram.csv", stats.histogram.to_csv())?;
    write("projection.csv", proj.to_csv())?;
    dump.write_tsv(&dir.join(format!("{tag}_embeddings.tsv")))?;
    dump.write_binary(&dir.join(format!("{tag}_embeddings.bin")))
}

/// [CLS] embeddings of the source and target sides, row-aligned.
pub fn embed_pairs(
    model: &EncoderModel,
    pairs: &CorpusStream,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let embed = |texts: Vec<&str>| -> Result<Array2<f64>> {
        let mut out = Array2::zeros((texts.len(), model.hidden_dim()));
        for (k, chunk) in texts.chunks(64).enumerate() {
            let e = model.encode_cls(&model.encode_texts(chunk)?)?;
            out.slice_mut(ndarray::s![k * 64..k * 64 + chunk.len(), ..])
                .assign(&e);
        }
        Ok(out)
    };
    Ok((
        embed(
            pairs
                .pairs()
                .iter()
                .map(|p| p.source_text.as_str())
                .collect(),
        )?,
        embed(
            pairs
                .pairs()
                .iter()
                .map(|p| p.target_text.as_str())
                .collect(),
        )?,
    ))
}

/// A rendered comparison table plus its machine-readable form.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub table: String,
    pub json: Value,
}

/// One row per run (baseline first, then variants in the given order) with
/// score and Δ% against the baseline for every evaluation language.
pub fn emit_report(baseline: &RunManifest, variants: &[RunManifest]) -> Result<Report> {
    let langs: Vec<&String> = baseline.metrics.keys().collect();
    if langs.is_empty() {
        return Err(Error::invalid("baseline manifest has no metrics"));
    }
    for v in variants {
        if v.task != baseline.task || v.source_lang != baseline.source_lang {
            return Err(Error::invalid(format!(
                "run '{}' is for a different task than the baseline",
                v.name
            )));
        }
        if v.metrics.keys().collect::<Vec<_>>() != langs {
            return Err(Error::invalid(format!(
                "run '{}' evaluates languages {:?}, baseline {:?}",
                v.name,
                v.metrics.keys().collect::<Vec<_>>(),
                langs
            )));
        }
    }
    let mut table = String::from("model");
    for l in &langs {
        table.push_str(&format!(" & {l} & Δ%"));
    }
    table.push_str(" \\\\\n");
    let mut rows = Vec::new();
    for (k, m) in std::iter::once(baseline).chain(variants).enumerate() {
        table.push_str(&m.name);
        let mut cells = serde_json::Map::new();
        for l in &langs {
            let score = 100.0 * m.metrics[*l].value;
            let base = 100.0 * baseline.metrics[*l].value;
            if k == 0 {
                table.push_str(&format!(" & {} & -", one_decimal(score)));
                cells.insert(
                    (*l).clone(),
                    json!({ "score": score, "display": one_decimal(score) }),
                );
            } else {
                let d = relative_improvement(base, score)?;
                table.push_str(&format!(" & {} & {}", one_decimal(score), one_decimal(d)));
                cells.insert(
                    (*l).clone(),
                    json!({ "score": score, "display": one_decimal(score), "delta_percent": d, "delta_display": one_decimal(d) }),
                );
            }
        }
        table.push_str(" \\\\\n");
        rows.push(json!({ "name": m.name, "config_hash": m.config_hash, "cells": cells }));
    }
    let metric = &baseline.metrics[langs[0]].metric;
    Ok(Report {
        table,
        json: json!({ "metric": metric, "languages": langs, "rows": rows }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn minimal(dir: &Path) -> String {
        write(dir, "train.conll", "a\tO\nb\tB-PER\n");
        write(dir, "xx.conll", "α\tO\n");
        "seed = 3\n[task]\ntype = \"ner\"\nsource_lang = \"en\"\ntrain = \"train.conll\"\neval = { xx = \"xx.conll\" }\n".into()
    }

    #[test]
    fn minimal_config_gets_paper_defaults() {
        let d = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::from_toml(&minimal(d.path()), d.path()).unwrap();
        let f = &cfg.task.finetune;
        assert_eq!(
            (f.batch_size, f.epochs, f.warmup_steps, f.weight_decay),
            (16, 3, 500, 0.01)
        );
        assert_eq!(f.seed, 3);
        assert_eq!(cfg.encoder, EncoderConfig::default());
        assert_eq!(cfg.label(), "baseline");
    }

    #[test]
    fn config_errors_name_the_problem() {
        let d = tempfile::tempdir().unwrap();
        let base = minimal(d.path());
        let err =
            ExperimentConfig::from_toml(&format!("bogus_key = 1\n{base}"), d.path()).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
        let no_seed = base.replace("seed = 3\n", "");
        assert!(ExperimentConfig::from_toml(&no_seed, d.path())
            .unwrap_err()
            .to_string()
            .contains("seed"));
        let missing = base.replace("xx.conll\"", "nope.conll\"");
        assert!(ExperimentConfig::from_toml(&missing, d.path())
            .unwrap_err()
            .to_string()
            .contains("nope.conll"));

        let cfg_text = format!(
            "seed = 3\n[[corpora]]\nname = \"c\"\n[corpora.cipher]\nvocab_size = 10\nsentence_length_range = [2, 3]\nnum_pairs = 20\ncipher = \"substitution\"\nseed = 1\n[schedule]\nmode = \"ALL\"\ncorpora = [\"c\"]\n{}",
            &base["seed = 3\n".len()..]
        );
        let err = ExperimentConfig::from_toml(&cfg_text, d.path()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("ALL"), "{err}");
    }

    #[test]
    fn hash_ignores_formatting_and_output_dir() {
        let d = tempfile::tempdir().unwrap();
        let base = minimal(d.path());
        let a = ExperimentConfig::from_toml(&base, d.path()).unwrap();
        let b = ExperimentConfig::from_toml(&base.replace(" = ", "   =   "), d.path()).unwrap();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let mut c = a.clone();
        c.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash().unwrap(), c.hash().unwrap());
        let mut e = a.clone();
        e.task.finetune.learning_rate = 1e-4;
        assert_ne!(a.hash().unwrap(), e.hash().unwrap());
    }

    fn manifest(name: &str, scores: &[(&str, f64)]) -> RunManifest {
        RunManifest {
            config_hash: name.into(),
            name: name.into(),
            seed: 0,
            task: TaskKind::Ner,
            source_lang: "en".into(),
            baseline: name == "mBERT",
            stages: Vec::new(),
            metrics: scores
                .iter()
                .map(|(l, v)| {
                    (
                        l.to_string(),
                        MetricSummary {
                            metric: "span_micro_f1".into(),
                            value: *v,
                            display: one_decimal(100.0 * v),
                            report: String::new(),
                        },
                    )
                })
                .collect(),
            complete: true,
        }
    }

    #[test]
    fn report_rows_and_deltas() {
        let base = manifest("mBERT", &[("hi", 0.211)]);
        let one = manifest("+TPP (One)", &[("hi", 0.243)]);
        let r = emit_report(&base, &[one.clone(), base.clone(), one]).unwrap();
        let lines: Vec<&str> = r.table.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[2].contains("24.3 & 15.2"), "{}", lines[2]);
        assert!(lines[3].contains("21.1 & 0.0"));
        assert_eq!(r.json["rows"].as_array().unwrap().len(), 4);
        let other = manifest("x", &[("ja", 0.3)]);
        assert!(emit_report(&base, &[other]).is_err());
    }
}
