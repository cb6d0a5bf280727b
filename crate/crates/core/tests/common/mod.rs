//! Independent reference implementations and fixtures shared by the
//! integration tests and the acceptance harness.
#![allow(dead_code)]

use std::path::Path;

use rand::Rng;
use tpp_core::corpus::{CipherKind, CipherSpec, TranslationPair};
use tpp_core::synthetic::{generate_tagging_task, TaggingTaskSpec};
use tpp_core::tpp::TppExample;

pub const ENTITY_TYPES: [&str; 3] = ["PER", "LOC", "ORG"];

/// Well-formed BIO sequence of length `n`.
pub fn random_bio<R: Rng>(rng: &mut R, n: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(n);
    for _ in 0..n {
        let prev = out.last().cloned().unwrap_or_else(|| "O".into());
        let r: f64 = rng.random();
        let t = ENTITY_TYPES[rng.random_range(0..ENTITY_TYPES.len())];
        let next = if prev != "O" && r < 0.4 {
            format!("I-{}", &prev[2..])
        } else if r < 0.7 {
            format!("B-{t}")
        } else {
            "O".into()
        };
        out.push(next);
    }
    out
}

/// Copy of `gold` with some spans retyped, dropped or cut short; stays
/// well-formed.
pub fn perturb_spans<R: Rng>(rng: &mut R, gold: &[String]) -> Vec<String> {
    let mut p = gold.to_vec();
    let mut i = 0;
    while i < p.len() {
        if !p[i].starts_with("B-") {
            i += 1;
            continue;
        }
        let mut end = i + 1;
        while end < p.len() && p[end].starts_with("I-") {
            end += 1;
        }
        match rng.random_range(0..5) {
            0 => {
                let t = ENTITY_TYPES[rng.random_range(0..ENTITY_TYPES.len())];
                p[i] = format!("B-{t}");
                for l in &mut p[i + 1..end] {
                    *l = format!("I-{t}");
                }
            }
            1 => p[i..end].iter_mut().for_each(|l| *l = "O".into()),
            2 if end - i > 1 => p[end - 1] = "O".into(),
            _ => {}
        }
        i = end;
    }
    p
}

/// Every (type, start, end) with `labels[start] = B-type`, `I-type` on
/// `start+1..end` and no `I-type` at `end`, found by trying all ranges.
pub fn naive_spans(labels: &[String]) -> Vec<(String, usize, usize)> {
    let mut spans = Vec::new();
    for start in 0..labels.len() {
        for end in start + 1..=labels.len() {
            for t in ENTITY_TYPES {
                let begins = labels[start] == format!("B-{t}");
                let inside = labels[start + 1..end]
                    .iter()
                    .all(|l| *l == format!("I-{t}"));
                let closed = end == labels.len() || labels[end] != format!("I-{t}");
                if begins && inside && closed {
                    spans.push((t.to_string(), start, end));
                }
            }
        }
    }
    spans
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Pooled span F1 from direct TP/FP/FN counting over naive spans.
pub fn brute_span_f1(gold: &[Vec<String>], pred: &[Vec<String>]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let gs = naive_spans(g);
        let ps = naive_spans(p);
        tp += gs.iter().filter(|s| ps.contains(s)).count();
        fn_ += gs.iter().filter(|s| !ps.contains(s)).count();
        fp += ps.iter().filter(|s| !gs.contains(s)).count();
    }
    f1_from_counts(tp, fp, fn_)
}

/// Mean over classes `0..k` of one-vs-rest F1, counted pair by pair.
pub fn brute_macro_f1(gold: &[usize], pred: &[usize], k: usize) -> f64 {
    let mut sum = 0.0;
    for c in 0..k {
        let tp = gold
            .iter()
            .zip(pred)
            .filter(|(g, p)| **g == c && **p == c)
            .count();
        let fp = gold
            .iter()
            .zip(pred)
            .filter(|(g, p)| **g != c && **p == c)
            .count();
        let fn_ = gold
            .iter()
            .zip(pred)
            .filter(|(g, p)| **g == c && **p != c)
            .count();
        sum += f1_from_counts(tp, fp, fn_);
    }
    sum / k as f64
}

/// Loss of the TPP objective written out from its definition.
pub fn reference_tpp_loss(src: &[Vec<f64>], tgt: &[Vec<f64>], examples: &[TppExample]) -> f64 {
    let mut total = 0.0;
    for e in examples {
        let z: f64 = src[e.source]
            .iter()
            .zip(&tgt[e.target])
            .map(|(a, b)| a * b)
            .sum();
        let p = 1.0 / (1.0 + (-z).exp());
        total -= if e.label { p.ln() } else { (1.0 - p).ln() };
    }
    total / examples.len() as f64
}

pub fn pairs(texts: &[(&str, &str)]) -> Vec<TranslationPair> {
    texts
        .iter()
        .map(|(s, t)| {
            TranslationPair::new(s, t, "en", "xx", tpp_core::corpus::CorpusId::TT, None).unwrap()
        })
        .collect()
}

/// Cipher spec used by the synthetic experiments: 30 words, fixed length 5.
pub fn cipher_spec(num_pairs: usize, seed: u64) -> CipherSpec {
    let mut spec = CipherSpec::new(30, num_pairs, CipherKind::Substitution, seed);
    spec.sentence_length_range = (5, 5);
    spec
}

/// Size knobs for [`write_cipher_experiment`].
#[derive(Clone, Copy)]
pub struct Scale {
    pub pairs: usize,
    pub held_out: usize,
    pub epochs: usize,
    /// TPP epochs when starting from a random init.
    pub tpp_epochs: usize,
    pub task_train: usize,
    pub task_test: usize,
}

pub const SMALL: Scale = Scale {
    pairs: 300,
    held_out: 40,
    epochs: 1,
    tpp_epochs: 1,
    task_train: 60,
    task_test: 30,
};

#[derive(Clone, Copy, PartialEq)]
pub enum Arm {
    /// Random init, TPP, fine-tune.
    TppOnly,
    /// MLM, fine-tune.
    Baseline,
    /// MLM, TPP, fine-tune.
    MlmTpp,
}

/// Writes the tagging task (if absent) and a config for `arm` under `dir`;
/// returns the config path.
pub fn write_cipher_experiment(
    dir: &Path,
    seed: u64,
    scale: Scale,
    arm: Arm,
) -> std::path::PathBuf {
    let task_dir = dir.join("task");
    if !task_dir.join("train.conll").exists() {
        let spec = cipher_spec(scale.pairs, seed);
        let task = generate_tagging_task(
            &spec.build_cipher().unwrap(),
            &TaggingTaskSpec {
                num_train: scale.task_train,
                num_test: scale.task_test,
                seed,
                ..TaggingTaskSpec::default()
            },
            "en",
            "xx",
        )
        .unwrap();
        task.write(&task_dir).unwrap();
    }
    let Scale {
        pairs,
        held_out,
        epochs,
        ..
    } = scale;
    let mut s = format!(
        r#"seed = {seed}

[encoder]
dropout = 0.0
init_std = 0.03

[[corpora]]
name = "cipher"
held_out = {held_out}
[corpora.cipher]
vocab_size = 30
sentence_length_range = [5, 5]
num_pairs = {pairs}
cipher = "substitution"
seed = {seed}
"#
    );
    if arm != Arm::TppOnly {
        s.push_str(&format!(
            "\n[base_pretrain]\nlearning_rate = 1e-3\nwarmup_steps = 100\nepochs = {epochs}\n"
        ));
    }
    // from a random start TPP needs a longer, gentler run than after MLM
    let tpp = match arm {
        Arm::Baseline => None,
        Arm::TppOnly => Some(("1e-3", scale.tpp_epochs)),
        Arm::MlmTpp => Some(("1.5e-3", epochs)),
    };
    if let Some((lr, tpp_epochs)) = tpp {
        s.push_str(&format!(
            "\n[schedule]\nmode = \"ONE\"\ncorpora = [\"cipher\"]\n[schedule.tpp]\nlearning_rate = {lr}\nwarmup_steps = 100\nepochs = {tpp_epochs}\n"
        ));
    }
    s.push_str(&format!(
        r#"
[task]
type = "tagging"
source_lang = "en"
train = "task/train.conll"
eval = {{ xx = "task/test_target.conll" }}
[task.finetune]
learning_rate = 3e-4
warmup_steps = 50
freeze_embeddings = true
epochs = {epochs}

[analysis]
corpus = "cipher"
"#
    ));
    let name = match arm {
        Arm::TppOnly => "tpp_only.toml",
        Arm::Baseline => "baseline.toml",
        Arm::MlmTpp => "mlm_tpp.toml",
    };
    let path = dir.join(name);
    std::fs::write(&path, s).unwrap();
    path
}
