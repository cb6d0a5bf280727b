//! Downstream fine-tuning and prediction: token classification on the first
//! subword of each word and sequence classification on the [CLS] state.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoder::checkpoint::{
    encoder_from_container, encoder_sections, read_container, write_container,
};
use crate::encoder::{EncodedBatch, EncoderModel, PhaseRecord, Tokenized};
use crate::error::{Error, Result};
use crate::optim::{AdamW, TrainReport, WarmupSchedule};
use crate::rng;

pub const SENTIMENT_LABELS: [&str; 2] = ["negative", "positive"];
const HEAD_INIT_RANGE: f64 = 0.02;
const PREDICT_BATCH: usize = 64;

/// Words with one tag each (BIO2 for NER, plain tags for POS).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
    pub lang: String,
}

impl TaggedSentence {
    pub fn new(tokens: Vec<String>, labels: Vec<String>, lang: impl Into<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("tagged sentence has no tokens"));
        }
        if tokens.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} tokens but {} labels",
                tokens.len(),
                labels.len()
            )));
        }
        Ok(Self {
            tokens,
            labels,
            lang: lang.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledDocument {
    pub text: String,
    pub label: usize,
    pub lang: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Token,
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Keep the word-embedding table fixed. Target-language rows never get
    /// a gradient during zero-shot fine-tuning, so freezing the source rows
    /// keeps the two vocabularies where pretraining put them.
    pub freeze_embeddings: bool,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 16,
            learning_rate: 5e-5,
            warmup_steps: 500,
            weight_decay: 0.01,
            seed: 0,
            freeze_embeddings: false,
        }
    }
}

impl FineTuneConfig {
    /// Desk preset: enough steps to fit a small tagging task in three
    /// epochs without overwriting the pretrained representation.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-4,
            warmup_steps: 50,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(
                "fine-tune batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "fine-tune learning_rate must be positive and weight_decay non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// An encoder with a linear head over `label_set`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub encoder: EncoderModel,
    /// hidden_dim × |label_set|
    pub head_w: Array2<f64>,
    pub head_b: Array1<f64>,
    pub label_set: Vec<String>,
    pub task_type: TaskType,
    /// Language of the fine-tuning data.
    pub train_lang: Option<String>,
}

impl TaskModel {
    /// Fresh head: zero bias, uniform weights in ±0.02 drawn from `seed`.
    pub fn new(
        encoder: EncoderModel,
        label_set: Vec<String>,
        task_type: TaskType,
        seed: u64,
    ) -> Result<Self> {
        check_label_set(&label_set)?;
        let h = encoder.hidden_dim();
        let mut r = rng::seeded(seed, rng::STREAM_HEAD);
        let head_w = Array2::from_shape_simple_fn((h, label_set.len()), || {
            r.random_range(-HEAD_INIT_RANGE..HEAD_INIT_RANGE)
        });
        Ok(Self {
            encoder,
            head_w,
            head_b: Array1::zeros(label_set.len()),
            label_set,
            task_type,
            train_lang: None,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.label_set.len()
    }

    fn label_index(&self, label: &str) -> Option<usize> {
        self.label_set.iter().position(|l| l == label)
    }

    /// Tag given to words lost to truncation: "O" when present, otherwise
    /// the first label.
    pub fn default_tag(&self) -> &str {
        self.label_index("O")
            .map_or(&self.label_set[0], |i| &self.label_set[i])
    }

    fn logits(&self, h: ArrayView1<'_, f64>) -> Array1<f64> {
        h.dot(&self.head_w) + &self.head_b
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut sections = encoder_sections(&self.encoder)?;
        sections.insert(
            "task".into(),
            serde_json::to_value(TaskHeader {
                label_set: self.label_set.clone(),
                task_type: self.task_type,
                train_lang: self.train_lang.clone(),
            })?,
        );
        let mut tensors = self.encoder.params.named();
        tensors.push(("head.w".into(), self.head_w.view().into_dyn()));
        tensors.push(("head.b".into(), self.head_b.view().into_dyn()));
        write_container(path.as_ref(), sections, &tensors)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut c = read_container(path)?;
        let header: TaskHeader = c.section("task", path)?;
        let bad = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        let w = c
            .take_tensor("head.w")
            .ok_or_else(|| bad("missing tensor 'head.w'".into()))?;
        let b = c
            .take_tensor("head.b")
            .ok_or_else(|| bad("missing tensor 'head.b'".into()))?;
        let encoder = encoder_from_container(&mut c, path)?;
        let head_w = w
            .into_dimensionality()
            .map_err(|_| bad("head.w is not a matrix".into()))?;
        let head_b: Array1<f64> = b
            .into_dimensionality()
            .map_err(|_| bad("head.b is not a vector".into()))?;
        if head_w.dim() != (encoder.hidden_dim(), header.label_set.len())
            || head_b.len() != header.label_set.len()
        {
            return Err(bad(
                "head shape does not match hidden size and label set".into()
            ));
        }
        Ok(Self {
            encoder,
            head_w,
            head_b,
            label_set: header.label_set,
            task_type: header.task_type,
            train_lang: header.train_lang,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct TaskHeader {
    label_set: Vec<String>,
    task_type: TaskType,
    train_lang: Option<String>,
}

fn check_label_set(label_set: &[String]) -> Result<()> {
    if label_set.len() < 2 {
        return Err(Error::invalid("a label set needs at least two labels"));
    }
    let unique: BTreeSet<&String> = label_set.iter().collect();
    if unique.len() != label_set.len() {
        return Err(Error::invalid("label set contains duplicates"));
    }
    Ok(())
}

/// Zero-shot guard: every training example must come from one language.
fn single_language<'a>(langs: impl Iterator<Item = &'a str>) -> Result<Option<String>> {
    let set: BTreeSet<&str> = langs.collect();
    if set.len() > 1 {
        return Err(Error::invalid(format!(
            "fine-tuning data mixes languages {set:?}; zero-shot training must use the source language only"
        )));
    }
    Ok(set.into_iter().next().map(str::to_string))
}

/// Fails unless every example is tagged `source_lang`.
pub fn ensure_source_only<'a>(
    langs: impl IntoIterator<Item = &'a str>,
    source_lang: &str,
) -> Result<()> {
    for l in langs {
        if l != source_lang {
            return Err(Error::invalid(format!(
                "training example tagged '{l}' would leak target-language data (source is '{source_lang}')"
            )));
        }
    }
    Ok(())
}

fn softmax_ce(logits: &Array1<f64>, gold: usize) -> (f64, Array1<f64>) {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp = logits.mapv(|z| (z - max).exp());
    let sum = exp.sum();
    let loss = sum.ln() + max - logits[gold];
    let mut d = exp / sum;
    d[gold] -= 1.0;
    (loss, d)
}

fn argmax(v: &Array1<f64>) -> usize {
    let mut best = 0;
    for j in 1..v.len() {
        if v[j] > v[best] {
            best = j;
        }
    }
    best
}

/// One supervised row: tokenized input and (compact row, class) targets.
struct Example {
    row: Tokenized,
    targets: Vec<(usize, usize)>,
}

fn train_loop(
    tm: &mut TaskModel,
    examples: &[Example],
    cfg: &FineTuneConfig,
    phase: &str,
) -> Result<TrainReport> {
    let mut r = rng::seeded(cfg.seed, rng::STREAM_FINETUNE);
    let mut opt = AdamW::new(cfg.weight_decay, Some(1.0));
    let sched = WarmupSchedule {
        peak: cfg.learning_rate,
        warmup_steps: cfg.warmup_steps,
    };
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport::default();
    let mut step = 0usize;

    for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let rows: Vec<Tokenized> = chunk.iter().map(|&i| examples[i].row.clone()).collect();
            let batch = EncodedBatch::from_rows(&rows, &tm.encoder.vocabulary);
            let n_targets: usize = chunk.iter().map(|&i| examples[i].targets.len()).sum();
            let norm = 1.0 / n_targets.max(1) as f64;
            let mut grads = tm.encoder.params.zeros_like();
            let mut gw = Array2::zeros(tm.head_w.raw_dim());
            let mut gb = Array1::zeros(tm.head_b.raw_dim());
            let mut loss = 0.0;
            let seed = rng::mix(cfg.seed, step as u64);
            for (k, &i) in chunk.iter().enumerate() {
                let (y, tape) = tm.encoder.forward_row(&batch, k, Some(seed));
                let mut dy = Array2::zeros(y.raw_dim());
                for &(pos, gold) in &examples[i].targets {
                    let h = y.row(pos);
                    let (l, d) = softmax_ce(&tm.logits(h), gold);
                    loss += l * norm;
                    let d = d * norm;
                    gw += &h.insert_axis(Axis(1)).dot(&d.view().insert_axis(Axis(0)));
                    gb += &d;
                    dy.row_mut(pos).assign(&tm.head_w.dot(&d));
                }
                tm.encoder.backward_row(&tape, dy, &mut grads);
            }
            let trainable = |name: &str| !(cfg.freeze_embeddings && name == "tok_emb");
            let g = grads.named();
            let mut gv: Vec<_> = g
                .iter()
                .filter(|(n, _)| trainable(n))
                .map(|(_, a)| a.view())
                .collect();
            gv.push(gw.view().into_dyn());
            gv.push(gb.view().into_dyn());
            let mut params = tm.encoder.params.named_mut();
            params.retain(|(n, _)| trainable(n));
            params.push(("head.w".into(), tm.head_w.view_mut().into_dyn()));
            params.push(("head.b".into(), tm.head_b.view_mut().into_dyn()));
            opt.step(params, &gv, sched.lr_at(step));
            report.step_losses.push(loss);
            sum += loss;
            count += 1;
        }
        report.epoch_losses.push(sum / count.max(1) as f64);
    }
    tm.encoder.training_history.push(PhaseRecord {
        phase_type: phase.into(),
        corpus_ids: Vec::new(),
        language_pairs: tm.train_lang.iter().cloned().collect(),
        epochs: cfg.epochs,
        steps: report.steps(),
        final_loss: report.final_loss(),
        seed: cfg.seed,
    });
    Ok(report)
}

/// Fine-tunes encoder and head with cross-entropy on the first subword of
/// every word that survives truncation.
pub fn finetune_token(
    model: EncoderModel,
    train: &[TaggedSentence],
    label_set: &[String],
    cfg: &FineTuneConfig,
) -> Result<(TaskModel, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("no training sentences".into()));
    }
    let mut tm = TaskModel::new(model, label_set.to_vec(), TaskType::Token, cfg.seed)?;
    tm.train_lang = single_language(train.iter().map(|s| s.lang.as_str()))?;
    let max_len = tm.encoder.config.max_seq_len;
    let mut examples = Vec::with_capacity(train.len());
    for (n, s) in train.iter().enumerate() {
        if s.tokens.len() != s.labels.len() || s.tokens.is_empty() {
            return Err(Error::Shape(format!(
                "training sentence {n} is empty or misaligned"
            )));
        }
        let gold = s
            .labels
            .iter()
            .map(|l| {
                tm.label_index(l)
                    .ok_or_else(|| Error::invalid(format!("sentence {n}: unknown label '{l}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        let row = tm.encoder.vocabulary.tokenize_words(&s.tokens, max_len)?;
        // unpadded rows: compact row index equals position
        let targets = row
            .first_subword_index
            .iter()
            .zip(&gold)
            .map(|(&p, &g)| (p, g))
            .collect();
        examples.push(Example { row, targets });
    }
    let report = train_loop(&mut tm, &examples, cfg, "finetune_token")?;
    Ok((tm, report))
}

/// Fine-tunes encoder and head with cross-entropy on the [CLS] state.
pub fn finetune_sequence(
    model: EncoderModel,
    train: &[LabeledDocument],
    label_set: &[String],
    cfg: &FineTuneConfig,
) -> Result<(TaskModel, TrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("no training documents".into()));
    }
    let mut tm = TaskModel::new(model, label_set.to_vec(), TaskType::Sequence, cfg.seed)?;
    tm.train_lang = single_language(train.iter().map(|d| d.lang.as_str()))?;
    let max_len = tm.encoder.config.max_seq_len;
    let mut examples = Vec::with_capacity(train.len());
    for (n, d) in train.iter().enumerate() {
        if d.label >= label_set.len() {
            return Err(Error::invalid(format!(
                "document {n}: class {} outside label set",
                d.label
            )));
        }
        let row = tm.encoder.vocabulary.tokenize(&d.text, max_len)?;
        examples.push(Example {
            row,
            targets: vec![(0, d.label)],
        });
    }
    let report = train_loop(&mut tm, &examples, cfg, "finetune_sequence")?;
    Ok((tm, report))
}

/// Turns every `I-X` that does not continue an X span into `B-X`.
pub fn repair_bio(tags: &mut [String]) {
    let mut prev: Option<String> = None;
    for t in tags.iter_mut() {
        if let Some(ty) = t.strip_prefix("I-") {
            if prev.as_deref() != Some(ty) {
                *t = format!("B-{ty}");
            }
        }
        prev = t
            .strip_prefix("B-")
            .or_else(|| t.strip_prefix("I-"))
            .map(str::to_string);
    }
}

/// Per-word tags from the first-subword argmax; words lost to truncation
/// get [`TaskModel::default_tag`].
pub fn predict_tags<S: AsRef<str>>(
    tm: &TaskModel,
    sentences: &[Vec<S>],
) -> Result<Vec<Vec<String>>> {
    if tm.task_type != TaskType::Token {
        return Err(Error::invalid(
            "predict_tags needs a token-classification model",
        ));
    }
    let max_len = tm.encoder.config.max_seq_len;
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(PREDICT_BATCH) {
        let rows = chunk
            .iter()
            .map(|s| tm.encoder.vocabulary.tokenize_words(s, max_len))
            .collect::<Result<Vec<_>>>()?;
        let batch = EncodedBatch::from_rows(&rows, &tm.encoder.vocabulary);
        let hidden = tm.encoder.encode_tokens(&batch)?;
        for (i, row) in rows.iter().enumerate() {
            let mut tags: Vec<String> = row
                .first_subword_index
                .iter()
                .map(|&p| {
                    tm.label_set[argmax(&tm.logits(hidden.slice(ndarray::s![i, p, ..])))].clone()
                })
                .collect();
            tags.resize(row.num_words, tm.default_tag().to_string());
            repair_bio(&mut tags);
            out.push(tags);
        }
    }
    Ok(out)
}

pub fn predict_class<S: AsRef<str>>(tm: &TaskModel, docs: &[S]) -> Result<Vec<usize>> {
    if tm.task_type != TaskType::Sequence {
        return Err(Error::invalid(
            "predict_class needs a sequence-classification model",
        ));
    }
    let mut out = Vec::with_capacity(docs.len());
    for chunk in docs.chunks(PREDICT_BATCH) {
        let batch = tm.encoder.encode_texts(chunk)?;
        let cls = tm.encoder.encode_cls(&batch)?;
        out.extend(cls.rows().into_iter().map(|h| argmax(&tm.logits(h))));
    }
    Ok(out)
}

/// CoNLL-style `token<TAB>label` lines with blank lines between sentences.
pub fn load_conll(path: impl AsRef<Path>, lang: &str) -> Result<Vec<TaggedSentence>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let (mut toks, mut labs) = (Vec::new(), Vec::new());
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !toks.is_empty() {
                out.push(TaggedSentence::new(
                    std::mem::take(&mut toks),
                    std::mem::take(&mut labs),
                    lang,
                )?);
            }
            continue;
        }
        let (t, l) = line
            .split_once('\t')
            .filter(|(t, l)| !t.is_empty() && !l.is_empty() && !l.contains('\t'))
            .ok_or_else(|| {
                Error::Parse(format!(
                    "{}:{}: expected token<TAB>label",
                    path.display(),
                    n + 1
                ))
            })?;
        toks.push(t.to_string());
        labs.push(l.to_string());
    }
    if !toks.is_empty() {
        out.push(TaggedSentence::new(toks, labs, lang)?);
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("{}: no sentences", path.display())));
    }
    Ok(out)
}

pub fn write_conll(path: impl AsRef<Path>, sentences: &[TaggedSentence]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::new();
    for sent in sentences {
        for (t, l) in sent.tokens.iter().zip(&sent.labels) {
            s.push_str(t);
            s.push('\t');
            s.push_str(l);
            s.push('\n');
        }
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Labels in order of first appearance across `sentences`, "O" first when present.
pub fn collect_label_set(sentences: &[TaggedSentence]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for l in sentences.iter().flat_map(|s| &s.labels) {
        if !out.contains(l) {
            out.push(l.clone());
        }
    }
    if let Some(i) = out.iter().position(|l| l == "O") {
        let o = out.remove(i);
        out.insert(0, o);
    }
    out
}

/// `label<TAB>text` lines. Labels must come from `label_set`.
pub fn load_sequence_tsv(
    path: impl AsRef<Path>,
    lang: &str,
    label_set: &[String],
) -> Result<Vec<LabeledDocument>> {
    load_tsv_docs(path.as_ref(), lang, label_set, &[])
}

/// Sentiment TSV: neutral rows are dropped and the remaining labels must be
/// `positive` or `negative`.
pub fn load_sentiment_tsv(path: impl AsRef<Path>, lang: &str) -> Result<Vec<LabeledDocument>> {
    let labels: Vec<String> = SENTIMENT_LABELS.iter().map(|s| s.to_string()).collect();
    load_tsv_docs(path.as_ref(), lang, &labels, &["neutral"])
}

fn load_tsv_docs(
    path: &Path,
    lang: &str,
    label_set: &[String],
    drop: &[&str],
) -> Result<Vec<LabeledDocument>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut dropped = 0;
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) = line.split_once('\t').ok_or_else(|| {
            Error::Parse(format!(
                "{}:{}: expected label<TAB>text",
                path.display(),
                n + 1
            ))
        })?;
        let label = label.trim();
        if drop.contains(&label) {
            dropped += 1;
            continue;
        }
        let id = label_set.iter().position(|l| l == label).ok_or_else(|| {
            Error::Parse(format!(
                "{}:{}: label '{label}' not in {label_set:?}",
                path.display(),
                n + 1
            ))
        })?;
        let body = body.trim();
        if body.is_empty() {
            return Err(Error::Parse(format!(
                "{}:{}: empty text",
                path.display(),
                n + 1
            )));
        }
        out.push(LabeledDocument {
            text: body.to_string(),
            label: id,
            lang: lang.to_string(),
        });
    }
    if dropped > 0 {
        tracing::info!(path = %path.display(), dropped, "dropped neutral rows");
    }
    if out.is_empty() {
        return Err(Error::Empty(format!("{}: no documents", path.display())));
    }
    Ok(out)
}

/// Task description stored alongside a run.
pub fn task_header_json(tm: &TaskModel) -> Value {
    serde_json::json!({ "label_set": tm.label_set, "task_type": tm.task_type, "train_lang": tm.train_lang })
}
