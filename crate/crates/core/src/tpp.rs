//! Translation pair prediction: balanced pair batches, the dot-product
//! sigmoid objective, and the pretraining phase under ONE / ALL / SEQUENCED
//! schedules.

use ndarray::{s, Array2, Array3, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusStream, TranslationPair};
use crate::encoder::{EncodedBatch, EncoderGrads, EncoderModel, PhaseRecord};
use crate::error::{Error, Result};
use crate::optim::{AdamW, TrainReport, WarmupSchedule};
use crate::rng;

/// Where negative sources come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSampling {
    /// Reassign sources to targets within the batch.
    #[default]
    InBatch,
    /// Draw each negative source uniformly from the whole phase stream.
    CorpusWide,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TppExample {
    pub source: usize,
    pub target: usize,
    pub label: bool,
}

/// B positives followed by B negatives over deduplicated text lists.
#[derive(Debug, Clone, PartialEq)]
pub struct TppBatch {
    sources: Vec<String>,
    targets: Vec<String>,
    /// Aligned target of each source, used for the no-self-negative check.
    source_aligned_target: Vec<String>,
    examples: Vec<TppExample>,
}

impl TppBatch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn examples(&self) -> &[TppExample] {
        &self.examples
    }

    pub fn labels(&self) -> Vec<u8> {
        self.examples.iter().map(|e| u8::from(e.label)).collect()
    }

    /// Source text of every example, in example order.
    pub fn source_texts(&self) -> Vec<&str> {
        self.examples
            .iter()
            .map(|e| self.sources[e.source].as_str())
            .collect()
    }

    /// Candidate (target) text of every example, in example order.
    pub fn candidate_texts(&self) -> Vec<&str> {
        self.examples
            .iter()
            .map(|e| self.targets[e.target].as_str())
            .collect()
    }

    /// The aligned target of each example's source.
    pub fn source_aligned_targets(&self) -> Vec<&str> {
        self.examples
            .iter()
            .map(|e| self.source_aligned_target[e.source].as_str())
            .collect()
    }

    pub fn source_batch(&self, model: &EncoderModel) -> Result<EncodedBatch> {
        model.encode_texts(&self.source_texts())
    }

    pub fn candidate_batch(&self, model: &EncoderModel) -> Result<EncodedBatch> {
        model.encode_texts(&self.candidate_texts())
    }
}

const MAX_DERANGEMENT_TRIES: usize = 1000;

/// Builds a balanced batch from `aligned` pairs with in-batch negatives
/// `(s_π(i), t_i)`, where π has no fixed points and never pairs a source
/// with a target identical to its own aligned target.
pub fn make_tpp_batch<R: Rng>(aligned: &[TranslationPair], rng: &mut R) -> Result<TppBatch> {
    let b = aligned.len();
    if b < 2 {
        return Err(Error::invalid(format!(
            "TPP batch needs at least 2 pairs, got {b}"
        )));
    }
    let mut perm: Vec<usize> = (0..b).collect();
    let mut found = false;
    for _ in 0..MAX_DERANGEMENT_TRIES {
        perm.shuffle(rng);
        if perm
            .iter()
            .enumerate()
            .all(|(i, &j)| j != i && aligned[j].target_text != aligned[i].target_text)
        {
            found = true;
            break;
        }
    }
    if !found {
        return Err(Error::invalid(
            "cannot form negatives: too many pairs share a target text",
        ));
    }

    let mut examples: Vec<TppExample> = (0..b)
        .map(|i| TppExample {
            source: i,
            target: i,
            label: true,
        })
        .collect();
    examples.extend((0..b).map(|i| TppExample {
        source: perm[i],
        target: i,
        label: false,
    }));
    Ok(TppBatch {
        sources: aligned.iter().map(|p| p.source_text.clone()).collect(),
        targets: aligned.iter().map(|p| p.target_text.clone()).collect(),
        source_aligned_target: aligned.iter().map(|p| p.target_text.clone()).collect(),
        examples,
    })
}

/// Like [`make_tpp_batch`] but each negative source is drawn from `pool`.
pub fn make_tpp_batch_corpus_wide<R: Rng>(
    aligned: &[TranslationPair],
    pool: &[TranslationPair],
    rng: &mut R,
) -> Result<TppBatch> {
    let b = aligned.len();
    if b < 2 {
        return Err(Error::invalid(format!(
            "TPP batch needs at least 2 pairs, got {b}"
        )));
    }
    let mut sources: Vec<String> = aligned.iter().map(|p| p.source_text.clone()).collect();
    let mut source_aligned_target: Vec<String> =
        aligned.iter().map(|p| p.target_text.clone()).collect();
    let mut examples: Vec<TppExample> = (0..b)
        .map(|i| TppExample {
            source: i,
            target: i,
            label: true,
        })
        .collect();
    for (i, pair) in aligned.iter().enumerate() {
        let neg = (0..MAX_DERANGEMENT_TRIES)
            .map(|_| &pool[rng.random_range(0..pool.len())])
            .find(|c| c.target_text != pair.target_text)
            .ok_or_else(|| Error::invalid("cannot draw a corpus-wide negative"))?;
        sources.push(neg.source_text.clone());
        source_aligned_target.push(neg.target_text.clone());
        examples.push(TppExample {
            source: b + i,
            target: i,
            label: false,
        });
    }
    Ok(TppBatch {
        sources,
        targets: aligned.iter().map(|p| p.target_text.clone()).collect(),
        source_aligned_target,
        examples,
    })
}

/// Raw inner product of two document embeddings.
pub fn tpp_logit(f_s: ArrayView1<'_, f64>, f_t: ArrayView1<'_, f64>) -> Result<f64> {
    if f_s.len() != f_t.len() {
        return Err(Error::Shape(format!(
            "embedding dimensions {} and {} differ",
            f_s.len(),
            f_t.len()
        )));
    }
    Ok(f_s.dot(&f_t))
}

/// Logistic sigmoid, evaluated without overflow for any finite logit.
pub fn tpp_prob(logit: f64) -> f64 {
    if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy from a logit: max(z,0) − z·y + ln(1 + e^−|z|).
pub fn bce_with_logit(logit: f64, label: bool) -> f64 {
    let y = if label { 1.0 } else { 0.0 };
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

/// Mean BCE over `examples` given source and target embedding matrices,
/// with its gradient with respect to both matrices.
pub fn tpp_loss_from_embeddings(
    src: ArrayView2<'_, f64>,
    tgt: ArrayView2<'_, f64>,
    examples: &[TppExample],
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if src.ncols() != tgt.ncols() {
        return Err(Error::Shape(
            "source and target embedding widths differ".into(),
        ));
    }
    if examples.is_empty() {
        return Err(Error::invalid("no examples"));
    }
    let n = examples.len() as f64;
    let mut d_src = Array2::zeros(src.raw_dim());
    let mut d_tgt = Array2::zeros(tgt.raw_dim());
    let mut loss = 0.0;
    for e in examples {
        let (a, b) = (src.row(e.source), tgt.row(e.target));
        let z = a.dot(&b);
        loss += bce_with_logit(z, e.label);
        let g = (tpp_prob(z) - if e.label { 1.0 } else { 0.0 }) / n;
        d_src.row_mut(e.source).scaled_add(g, &b);
        d_tgt.row_mut(e.target).scaled_add(g, &a);
    }
    Ok((loss / n, d_src, d_tgt))
}

/// TPP loss of `batch` under `model` (dropout off) and its gradient with
/// respect to every encoder parameter, through both f(s) and f(t).
pub fn tpp_loss(batch: &TppBatch, model: &EncoderModel) -> Result<(f64, EncoderGrads)> {
    tpp_loss_inner(batch, model, None, model.config.max_seq_len)
}

fn tpp_loss_inner(
    batch: &TppBatch,
    model: &EncoderModel,
    dropout_seed: Option<u64>,
    max_seq_len: usize,
) -> Result<(f64, EncoderGrads)> {
    let vocab = &model.vocabulary;
    let src_batch = vocab.encode_texts(&batch.sources, max_seq_len)?;
    let tgt_batch = vocab.encode_texts(&batch.targets, max_seq_len)?;
    let (src_out, src_tapes) =
        model.forward_train(&src_batch, dropout_seed.map(|s| rng::mix(s, 1)))?;
    let (tgt_out, tgt_tapes) =
        model.forward_train(&tgt_batch, dropout_seed.map(|s| rng::mix(s, 2)))?;
    let src_cls = src_out.slice(s![.., 0, ..]);
    let tgt_cls = tgt_out.slice(s![.., 0, ..]);
    let (loss, d_src, d_tgt) = tpp_loss_from_embeddings(src_cls, tgt_cls, &batch.examples)?;

    let mut grads = model.params.zeros_like();
    let lift = |d: Array2<f64>, seq: usize| {
        let mut full = Array3::zeros((d.nrows(), seq, d.ncols()));
        full.slice_mut(s![.., 0, ..]).assign(&d);
        full
    };
    model.backward(&src_tapes, &lift(d_src, src_batch.seq_len()), &mut grads);
    model.backward(&tgt_tapes, &lift(d_tgt, tgt_batch.seq_len()), &mut grads);
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TppConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Tokenization length for this phase; defaults to the encoder's.
    pub max_seq_len: Option<usize>,
    pub negatives: NegativeSampling,
}

impl Default for TppConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 3,
            warmup_steps: 500,
            weight_decay: 0.01,
            learning_rate: 5e-5,
            seed: 0,
            max_seq_len: None,
            negatives: NegativeSampling::InBatch,
        }
    }
}

impl TppConfig {
    /// Settings for the small desk-scale encoder trained from a random
    /// start: a larger step, a short warmup and five epochs.
    pub fn desk() -> Self {
        Self {
            learning_rate: 1e-3,
            warmup_steps: 100,
            epochs: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("TPP batch_size must be at least 2"));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "learning_rate and weight_decay must be non-negative",
            ));
        }
        if self.max_seq_len.is_some_and(|l| l < 2) {
            return Err(Error::invalid("max_seq_len must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ScheduleMode {
    One,
    All,
    Sequenced,
}

#[derive(Debug, Clone)]
pub struct PretrainingSchedule {
    phases: Vec<(CorpusStream, TppConfig)>,
    mode: ScheduleMode,
}

impl PretrainingSchedule {
    /// A single phase over one language pair.
    pub fn one(stream: CorpusStream, config: TppConfig) -> Result<Self> {
        if stream.language_pair().is_mixed() {
            return Err(Error::invalid(
                "ONE schedule needs a single-language-pair stream",
            ));
        }
        Self::new(vec![(stream, config)], ScheduleMode::One)
    }

    /// A single phase over a stream produced by `mix_equal`.
    pub fn all(mixed: CorpusStream, config: TppConfig) -> Result<Self> {
        if !mixed.language_pair().is_mixed() {
            return Err(Error::invalid(
                "ALL schedule needs a mixed stream from mix_equal",
            ));
        }
        Self::new(vec![(mixed, config)], ScheduleMode::All)
    }

    /// Two or more phases run in the given order.
    pub fn sequenced(phases: Vec<(CorpusStream, TppConfig)>) -> Result<Self> {
        if phases.len() < 2 {
            return Err(Error::invalid(
                "SEQUENCED schedule needs at least two phases",
            ));
        }
        Self::new(phases, ScheduleMode::Sequenced)
    }

    fn new(phases: Vec<(CorpusStream, TppConfig)>, mode: ScheduleMode) -> Result<Self> {
        for (_, c) in &phases {
            c.validate()?;
        }
        Ok(Self { phases, mode })
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    pub fn phases(&self) -> &[(CorpusStream, TppConfig)] {
        &self.phases
    }
}

/// Runs every phase of `schedule` on `model` in order, appending one `tpp`
/// phase record per phase. Returns the loss trace of each phase.
pub fn tpp_pretrain(
    model: &mut EncoderModel,
    schedule: &PretrainingSchedule,
) -> Result<Vec<TrainReport>> {
    for (i, (stream, _)) in schedule.phases.iter().enumerate() {
        if stream.size() < 2 {
            return Err(Error::Empty(format!(
                "phase {i} stream has {} pairs; TPP needs at least 2",
                stream.size()
            )));
        }
    }
    let mut reports = Vec::with_capacity(schedule.phases.len());
    for (stream, cfg) in &schedule.phases {
        let report = run_phase(model, stream, cfg)?;
        model.training_history.push(PhaseRecord {
            phase_type: "tpp".into(),
            corpus_ids: stream
                .corpus_ids()
                .iter()
                .map(ToString::to_string)
                .collect(),
            language_pairs: stream
                .language_pairs()
                .iter()
                .map(ToString::to_string)
                .collect(),
            epochs: cfg.epochs,
            steps: report.steps(),
            final_loss: report.final_loss(),
            seed: cfg.seed,
        });
        reports.push(report);
    }
    Ok(reports)
}

fn run_phase(
    model: &mut EncoderModel,
    stream: &CorpusStream,
    cfg: &TppConfig,
) -> Result<TrainReport> {
    let max_len = cfg
        .max_seq_len
        .unwrap_or(model.config.max_seq_len)
        .min(model.config.max_seq_len);
    let pairs = stream.pairs();
    let mut rng = rng::seeded(cfg.seed, rng::STREAM_TPP);
    let mut opt = AdamW::new(cfg.weight_decay, Some(1.0));
    let sched = WarmupSchedule {
        peak: cfg.learning_rate,
        warmup_steps: cfg.warmup_steps,
    };
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut report = TrainReport::default();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let aligned: Vec<TranslationPair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let batch = match cfg.negatives {
                NegativeSampling::InBatch => make_tpp_batch(&aligned, &mut rng)?,
                NegativeSampling::CorpusWide => {
                    make_tpp_batch_corpus_wide(&aligned, pairs, &mut rng)?
                }
            };
            step += 1;
            let (loss, grads) = tpp_loss_inner(
                &batch,
                model,
                Some(rng::mix(cfg.seed, step as u64)),
                max_len,
            )?;
            let g = grads.named();
            let gv: Vec<_> = g.iter().map(|(_, a)| a.view()).collect();
            opt.step(model.params.named_mut(), &gv, sched.lr_at(step));
            report.step_losses.push(loss);
            sum += loss;
            count += 1;
        }
        let mean = sum / count.max(1) as f64;
        tracing::debug!(epoch, loss = mean, "tpp epoch");
        report.epoch_losses.push(mean);
    }
    Ok(report)
}
