//! Masked-language-model pretraining with a tied output embedding.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{EncoderModel, PhaseRecord};
use super::vocab::{EncodedBatch, Tokenized, MASK_ID, NUM_SPECIAL, SEP_ID};
use crate::error::{Error, Result};
use crate::optim::{AdamW, TrainReport, WarmupSchedule};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlmConfig {
    pub mask_prob: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MlmConfig {
    fn default() -> Self {
        Self {
            mask_prob: 0.15,
            epochs: 3,
            batch_size: 16,
            learning_rate: 5e-5,
            warmup_steps: 500,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl MlmConfig {
    /// Desk preset for a from-scratch encoder: larger step, short warmup.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            warmup_steps: 100,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.mask_prob > 0.0 && self.mask_prob <= 1.0) {
            return Err(Error::invalid("mask_prob must lie in (0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate must be non-negative"));
        }
        Ok(())
    }
}

/// Picks masked positions: each content token with probability `mask_prob`
/// (at least one per sequence); 80% become `[MASK]`, 10% a random token,
/// 10% stay. Returns the corrupted ids and (position, original id) targets.
fn corrupt<R: Rng>(
    ids: &[u32],
    mask_prob: f64,
    vocab_size: usize,
    rng: &mut R,
) -> (Vec<u32>, Vec<(usize, u32)>) {
    let content: Vec<usize> = (1..ids.len()).filter(|&j| ids[j] != SEP_ID).collect();
    let mut chosen: Vec<usize> = content
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < mask_prob)
        .collect();
    if chosen.is_empty() && !content.is_empty() {
        chosen.push(content[rng.random_range(0..content.len())]);
    }
    let mut out = ids.to_vec();
    let mut targets = Vec::with_capacity(chosen.len());
    for j in chosen {
        targets.push((j, ids[j]));
        let r: f64 = rng.random();
        if r < 0.8 {
            out[j] = MASK_ID;
        } else if r < 0.9 && vocab_size > NUM_SPECIAL {
            out[j] = rng.random_range(NUM_SPECIAL as u32..vocab_size as u32);
        }
    }
    (out, targets)
}

/// Runs MLM pretraining in place and appends an `mlm` phase record.
pub fn mlm_pretrain<S: AsRef<str>>(
    model: &mut EncoderModel,
    texts: &[S],
    cfg: &MlmConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if texts.is_empty() {
        return Err(Error::Empty("mlm_pretrain needs at least one text".into()));
    }
    let rows = texts
        .iter()
        .map(|t| {
            model
                .vocabulary
                .tokenize(t.as_ref(), model.config.max_seq_len)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rng = rng::seeded(cfg.seed, rng::STREAM_MLM);
    let mut opt = AdamW::new(cfg.weight_decay, Some(1.0));
    let sched = WarmupSchedule {
        peak: cfg.learning_rate,
        warmup_steps: cfg.warmup_steps,
    };
    let vocab_size = model.vocabulary.size();
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut step = 0;

    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        let mut epoch_n = 0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let mut corrupted = Vec::with_capacity(chunk.len());
            let mut targets = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (ids, t) = corrupt(&rows[i].ids, cfg.mask_prob, vocab_size, &mut rng);
                corrupted.push(Tokenized {
                    ids,
                    first_subword_index: Vec::new(),
                    num_words: 0,
                });
                targets.push(t);
            }
            let batch = EncodedBatch::from_rows(&corrupted, &model.vocabulary);
            let loss = mlm_step(
                model,
                &batch,
                &targets,
                &mut opt,
                sched.lr_at(step),
                rng::mix(cfg.seed, step as u64),
            )?;
            report.step_losses.push(loss);
            epoch_sum += loss;
            epoch_n += 1;
        }
        report.epoch_losses.push(epoch_sum / epoch_n.max(1) as f64);
    }

    model.training_history.push(PhaseRecord {
        phase_type: "mlm".into(),
        corpus_ids: Vec::new(),
        language_pairs: Vec::new(),
        epochs: cfg.epochs,
        steps: report.steps(),
        final_loss: report.final_loss(),
        seed: cfg.seed,
    });
    Ok(report)
}

fn mlm_step(
    model: &mut EncoderModel,
    batch: &EncodedBatch,
    targets: &[Vec<(usize, u32)>],
    opt: &mut AdamW,
    lr: f64,
    dropout_seed: u64,
) -> Result<f64> {
    let n_targets: usize = targets.iter().map(Vec::len).sum();
    let norm = 1.0 / n_targets.max(1) as f64;
    let mut grads = model.params.zeros_like();
    let mut loss = 0.0;
    let emb = &model.params.tok_emb;
    let bias = &model.params.mlm_bias;

    for (i, tgt) in targets.iter().enumerate() {
        let (y, tape) = model.forward_row(batch, i, Some(dropout_seed));
        let mut dy = Array2::zeros(y.raw_dim());
        for &(pos, gold) in tgt {
            let r = tape
                .positions()
                .iter()
                .position(|&p| p == pos)
                .expect("target position is valid");
            let h = y.row(r);
            let logits: Array1<f64> = emb.dot(&h) + bias;
            let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let exp = logits.mapv(|z| (z - max).exp());
            let sum = exp.sum();
            loss += (sum.ln() + max - logits[gold as usize]) * norm;
            let mut dlogits = exp / sum;
            dlogits[gold as usize] -= 1.0;
            dlogits *= norm;
            dy.row_mut(r).assign(&dlogits.dot(emb));
            grads.mlm_bias += &dlogits;
            for (v, &d) in dlogits.iter().enumerate() {
                if d != 0.0 {
                    let mut row = grads.tok_emb.row_mut(v);
                    row.scaled_add(d, &h);
                }
            }
        }
        model.backward_row(&tape, dy, &mut grads);
    }

    let g = grads.named();
    let gv: Vec<_> = g.iter().map(|(_, a)| a.view()).collect();
    opt.step(model.params.named_mut(), &gv, lr);
    Ok(loss)
}
