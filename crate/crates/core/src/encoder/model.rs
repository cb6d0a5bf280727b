//! Pre-LayerNorm transformer encoder with hand-written backpropagation.
//!
//! The document embedding is the raw residual stream at the `[CLS]` position
//! after the last layer; there is no pooler and no final LayerNorm.

use ndarray::{s, Array1, Array2, Array3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::vocab::{EncodedBatch, Vocabulary};
use crate::error::{Error, Result};
use crate::rng;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    /// Standard deviation of the normal initializer for every matrix.
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            max_seq_len: 64,
            dropout: 0.1,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    /// Desk preset for training from scratch: no dropout and a wider
    /// initializer than the BERT default.
    pub fn desk() -> Self {
        Self {
            dropout: 0.0,
            init_std: 0.03,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::invalid(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::invalid("max_seq_len must be at least 2"));
        }
        if self.ffn_dim == 0 {
            return Err(Error::invalid("ffn_dim must be positive"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::invalid("init_std must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

macro_rules! layer_fields {
    ($m:ident, $self:expr, $prefix:expr, $view:ident, $out:expr) => {
        $m!(
            $self,
            $prefix,
            $view,
            $out,
            [
                ln1_gamma, ln1_beta, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gamma, ln2_beta, w1, b1,
                w2, b2
            ]
        )
    };
}

macro_rules! push_views {
    ($self:expr, $prefix:expr, $view:ident, $out:expr, [$($f:ident),*]) => {
        $( $out.push((format!("{}.{}", $prefix, stringify!($f)), $self.$f.$view().into_dyn())); )*
    };
}

impl LayerParams {
    fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.hidden_dim;
        let f = cfg.ffn_dim;
        Self {
            ln1_gamma: Array1::ones(h),
            ln1_beta: Array1::zeros(h),
            wq: normal((h, h), cfg.init_std, rng),
            bq: Array1::zeros(h),
            wk: normal((h, h), cfg.init_std, rng),
            bk: Array1::zeros(h),
            wv: normal((h, h), cfg.init_std, rng),
            bv: Array1::zeros(h),
            wo: normal((h, h), cfg.init_std, rng),
            bo: Array1::zeros(h),
            ln2_gamma: Array1::ones(h),
            ln2_beta: Array1::zeros(h),
            w1: normal((h, f), cfg.init_std, rng),
            b1: Array1::zeros(f),
            w2: normal((f, h), cfg.init_std, rng),
            b2: Array1::zeros(h),
        }
    }

    fn zeros_like(&self) -> Self {
        let z1 = |a: &Array1<f64>| Array1::zeros(a.raw_dim());
        let z2 = |a: &Array2<f64>| Array2::zeros(a.raw_dim());
        Self {
            ln1_gamma: z1(&self.ln1_gamma),
            ln1_beta: z1(&self.ln1_beta),
            wq: z2(&self.wq),
            bq: z1(&self.bq),
            wk: z2(&self.wk),
            bk: z1(&self.bk),
            wv: z2(&self.wv),
            bv: z1(&self.bv),
            wo: z2(&self.wo),
            bo: z1(&self.bo),
            ln2_gamma: z1(&self.ln2_gamma),
            ln2_beta: z1(&self.ln2_beta),
            w1: z2(&self.w1),
            b1: z1(&self.b1),
            w2: z2(&self.w2),
            b2: z1(&self.b2),
        }
    }
}

/// All trainable encoder tensors, including the tied-embedding MLM output bias.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub mlm_bias: Array1<f64>,
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, vocab_size: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed, rng::STREAM_INIT);
        let tok_emb = normal((vocab_size, cfg.hidden_dim), cfg.init_std, &mut rng);
        let pos_emb = normal((cfg.max_seq_len, cfg.hidden_dim), cfg.init_std, &mut rng);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerParams::init(cfg, &mut rng))
            .collect();
        Self {
            tok_emb,
            pos_emb,
            layers,
            mlm_bias: Array1::zeros(vocab_size),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tok_emb: Array2::zeros(self.tok_emb.raw_dim()),
            pos_emb: Array2::zeros(self.pos_emb.raw_dim()),
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
            mlm_bias: Array1::zeros(self.mlm_bias.raw_dim()),
        }
    }

    /// Tensors in a fixed canonical order with dotted names.
    pub fn named(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view().into_dyn()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            layer_fields!(push_views, l, format!("layers.{i}"), view, out);
        }
        out.push(("mlm_bias".to_string(), self.mlm_bias.view().into_dyn()));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.view_mut().into_dyn()),
            ("pos_emb".to_string(), self.pos_emb.view_mut().into_dyn()),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            layer_fields!(push_views, l, format!("layers.{i}"), view_mut, out);
        }
        out.push(("mlm_bias".to_string(), self.mlm_bias.view_mut().into_dyn()));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, a)| a.len()).sum()
    }
}

fn normal(shape: (usize, usize), std: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn(shape, || dist.sample(rng))
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / n;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rv = *r;
        row.mapv_inplace(|v| v * rv);
    }
    let y = &xhat * gamma + beta;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gamma: &Array1<f64>,
    dgamma: &mut Array1<f64>,
    dbeta: &mut Array1<f64>,
) -> Array2<f64> {
    *dgamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    *dbeta += &dy.sum_axis(Axis(0));
    let dxhat = dy * gamma;
    let n = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / n;
        let mean_dh_xh = (&dh * &xh).sum() / n;
        let r = cache.rstd[i];
        let mut out = dx.row_mut(i);
        for j in 0..dh.len() {
            out[j] = r * (dh[j] - mean_dh - xh[j] * mean_dh_xh);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    ln2: LnCache,
    b: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    ffn_mask: Option<Array2<f64>>,
}

/// Activations retained from a training forward pass over one example.
pub(crate) struct ExampleTape {
    ids: Vec<u32>,
    positions: Vec<usize>,
    emb_mask: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
}

/// Gradient of the loss with respect to every encoder tensor.
pub type EncoderGrads = EncoderParams;

/// Record of one completed training phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase_type: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corpus_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub language_pairs: Vec<String>,
    pub epochs: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub seed: u64,
}

/// The document encoder: tokenizer vocabulary plus transformer weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub vocabulary: Vocabulary,
    pub params: EncoderParams,
    pub training_history: Vec<PhaseRecord>,
}

impl EncoderModel {
    pub fn new(config: EncoderConfig, vocabulary: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = EncoderParams::init(&config, vocabulary.size(), seed);
        Ok(Self {
            config,
            vocabulary,
            params,
            training_history: Vec::new(),
        })
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Tokenizes and pads texts with this model's vocabulary.
    pub fn encode_texts<S: AsRef<str>>(&self, texts: &[S]) -> Result<EncodedBatch> {
        self.vocabulary.encode_texts(texts, self.config.max_seq_len)
    }

    fn check_batch(&self, batch: &EncodedBatch) -> Result<()> {
        if batch.vocab_fingerprint != self.vocabulary.fingerprint() {
            return Err(Error::VocabularyMismatch);
        }
        if batch.seq_len() > self.config.max_seq_len {
            // Padding beyond max_seq_len is fine as long as no valid token sits there.
            for i in 0..batch.batch_size() {
                if batch
                    .valid_positions(i)
                    .iter()
                    .any(|&p| p >= self.config.max_seq_len)
                {
                    return Err(Error::Shape(format!(
                        "row {i} has tokens beyond max_seq_len {}",
                        self.config.max_seq_len
                    )));
                }
            }
        }
        Ok(())
    }

    /// Final-layer hidden states for every position; padded positions are zero.
    pub fn encode_tokens(&self, batch: &EncodedBatch) -> Result<Array3<f64>> {
        self.check_batch(batch)?;
        let (b, l, h) = (batch.batch_size(), batch.seq_len(), self.hidden_dim());
        let mut out = Array3::zeros((b, l, h));
        for i in 0..b {
            let (ids, positions) = row_inputs(batch, i);
            let (y, _) = self.forward_example(&ids, &positions, None);
            for (r, &p) in positions.iter().enumerate() {
                out.slice_mut(s![i, p, ..]).assign(&y.row(r));
            }
        }
        Ok(out)
    }

    /// Document embeddings: the hidden state at position 0 of each row.
    pub fn encode_cls(&self, batch: &EncodedBatch) -> Result<Array2<f64>> {
        self.check_batch(batch)?;
        let mut out = Array2::zeros((batch.batch_size(), self.hidden_dim()));
        for i in 0..batch.batch_size() {
            let (ids, positions) = row_inputs(batch, i);
            let (y, _) = self.forward_example(&ids, &positions, None);
            let cls = positions
                .iter()
                .position(|&p| p == 0)
                .ok_or_else(|| Error::Shape(format!("row {i} has a masked [CLS] position")))?;
            out.row_mut(i).assign(&y.row(cls));
        }
        Ok(out)
    }

    /// Training-mode forward pass; `dropout_seed` = None disables dropout.
    pub(crate) fn forward_train(
        &self,
        batch: &EncodedBatch,
        dropout_seed: Option<u64>,
    ) -> Result<(Array3<f64>, Vec<ExampleTape>)> {
        self.check_batch(batch)?;
        let (b, l, h) = (batch.batch_size(), batch.seq_len(), self.hidden_dim());
        let mut out = Array3::zeros((b, l, h));
        let mut tapes = Vec::with_capacity(b);
        for i in 0..b {
            let (ids, positions) = row_inputs(batch, i);
            let mut rng = dropout_seed.map(|s| rng::seeded(rng::mix(s, i as u64), 0));
            let (y, tape) = self.forward_example(&ids, &positions, rng.as_mut());
            for (r, &p) in positions.iter().enumerate() {
                out.slice_mut(s![i, p, ..]).assign(&y.row(r));
            }
            tapes.push(tape);
        }
        Ok((out, tapes))
    }

    /// Accumulates parameter gradients given d(loss)/d(output) for every
    /// position of the batch that produced `tapes`.
    pub(crate) fn backward(
        &self,
        tapes: &[ExampleTape],
        d_out: &Array3<f64>,
        grads: &mut EncoderGrads,
    ) {
        for (i, tape) in tapes.iter().enumerate() {
            let mut dy = Array2::zeros((tape.positions.len(), self.hidden_dim()));
            for (r, &p) in tape.positions.iter().enumerate() {
                dy.row_mut(r).assign(&d_out.slice(s![i, p, ..]));
            }
            self.backward_example(tape, dy, grads);
        }
    }

    fn forward_example(
        &self,
        ids: &[u32],
        positions: &[usize],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> (Array2<f64>, ExampleTape) {
        let cfg = &self.config;
        let p = &self.params;
        let n = ids.len();
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let drop = |rng: &mut Option<&mut ChaCha8Rng>, shape| match rng {
            Some(r) if cfg.dropout > 0.0 => Some(dropout_mask(shape, cfg.dropout, r)),
            _ => None,
        };

        let mut x = Array2::zeros((n, cfg.hidden_dim));
        for (r, (&id, &pos)) in ids.iter().zip(positions).enumerate() {
            let mut row = x.row_mut(r);
            row.assign(&p.tok_emb.row(id as usize));
            row += &p.pos_emb.row(pos);
        }
        let emb_mask = drop(&mut rng, (n, cfg.hidden_dim));
        if let Some(m) = &emb_mask {
            x *= m;
        }

        let mut caches = Vec::with_capacity(p.layers.len());
        for lp in &p.layers {
            let (a, ln1) = layer_norm(&x, &lp.ln1_gamma, &lp.ln1_beta);
            let q = a.dot(&lp.wq) + &lp.bq;
            let k = a.dot(&lp.wk) + &lp.bk;
            let v = a.dot(&lp.wv) + &lp.bv;
            let mut ctx = Array2::zeros((n, cfg.hidden_dim));
            let mut probs = Vec::with_capacity(cfg.num_heads);
            for h in 0..cfg.num_heads {
                let cols = s![.., h * hd..(h + 1) * hd];
                let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                softmax_rows(&mut sc);
                ctx.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
                probs.push(sc);
            }
            let mut o = ctx.dot(&lp.wo) + &lp.bo;
            let attn_mask = drop(&mut rng, (n, cfg.hidden_dim));
            if let Some(m) = &attn_mask {
                o *= m;
            }
            x += &o;

            let (b, ln2) = layer_norm(&x, &lp.ln2_gamma, &lp.ln2_beta);
            let pre = b.dot(&lp.w1) + &lp.b1;
            let act = pre.mapv(gelu);
            let mut f = act.dot(&lp.w2) + &lp.b2;
            let ffn_mask = drop(&mut rng, (n, cfg.hidden_dim));
            if let Some(m) = &ffn_mask {
                f *= m;
            }
            x += &f;

            caches.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                attn_mask,
                ln2,
                b,
                pre,
                act,
                ffn_mask,
            });
        }
        let tape = ExampleTape {
            ids: ids.to_vec(),
            positions: positions.to_vec(),
            emb_mask,
            layers: caches,
        };
        (x, tape)
    }

    fn backward_example(&self, tape: &ExampleTape, mut dx: Array2<f64>, g: &mut EncoderGrads) {
        let cfg = &self.config;
        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();
        let n = tape.ids.len();

        for (li, c) in tape.layers.iter().enumerate().rev() {
            let lp = &self.params.layers[li];
            let gl = &mut g.layers[li];

            // feed-forward block
            let mut df = dx.clone();
            if let Some(m) = &c.ffn_mask {
                df *= m;
            }
            gl.w2 += &c.act.t().dot(&df);
            gl.b2 += &df.sum_axis(Axis(0));
            let dact = df.dot(&lp.w2.t());
            let dpre = dact * &c.pre.mapv(gelu_grad);
            gl.w1 += &c.b.t().dot(&dpre);
            gl.b1 += &dpre.sum_axis(Axis(0));
            let db = dpre.dot(&lp.w1.t());
            dx += &layer_norm_backward(
                &db,
                &c.ln2,
                &lp.ln2_gamma,
                &mut gl.ln2_gamma,
                &mut gl.ln2_beta,
            );

            // attention block
            let mut d_o = dx.clone();
            if let Some(m) = &c.attn_mask {
                d_o *= m;
            }
            gl.wo += &c.ctx.t().dot(&d_o);
            gl.bo += &d_o.sum_axis(Axis(0));
            let dctx = d_o.dot(&lp.wo.t());
            let mut dq = Array2::zeros((n, cfg.hidden_dim));
            let mut dk = Array2::zeros((n, cfg.hidden_dim));
            let mut dv = Array2::zeros((n, cfg.hidden_dim));
            for h in 0..cfg.num_heads {
                let cols = s![.., h * hd..(h + 1) * hd];
                let pr = &c.probs[h];
                let dch = dctx.slice(cols);
                let dp = dch.dot(&c.v.slice(cols).t());
                dv.slice_mut(cols).assign(&pr.t().dot(&dch));
                let row_dot = (&dp * pr).sum_axis(Axis(1)).insert_axis(Axis(1));
                let ds = (pr * &(&dp - &row_dot)) * scale;
                dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
            }
            let at = c.a.t();
            gl.wq += &at.dot(&dq);
            gl.bq += &dq.sum_axis(Axis(0));
            gl.wk += &at.dot(&dk);
            gl.bk += &dk.sum_axis(Axis(0));
            gl.wv += &at.dot(&dv);
            gl.bv += &dv.sum_axis(Axis(0));
            let da = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
            dx += &layer_norm_backward(
                &da,
                &c.ln1,
                &lp.ln1_gamma,
                &mut gl.ln1_gamma,
                &mut gl.ln1_beta,
            );
        }

        if let Some(m) = &tape.emb_mask {
            dx *= m;
        }
        for (r, (&id, &pos)) in tape.ids.iter().zip(&tape.positions).enumerate() {
            let row = dx.row(r);
            let mut te = g.tok_emb.row_mut(id as usize);
            te += &row;
            let mut pe = g.pos_emb.row_mut(pos);
            pe += &row;
        }
    }

    /// Hidden states of one example at its final layer, with the tape
    /// needed to backpropagate; exposed for the MLM head which works on
    /// compacted rows.
    pub(crate) fn forward_row(
        &self,
        batch: &EncodedBatch,
        i: usize,
        dropout_seed: Option<u64>,
    ) -> (Array2<f64>, ExampleTape) {
        let (ids, positions) = row_inputs(batch, i);
        let mut rng = dropout_seed.map(|s| rng::seeded(rng::mix(s, i as u64), 0));
        self.forward_example(&ids, &positions, rng.as_mut())
    }

    pub(crate) fn backward_row(
        &self,
        tape: &ExampleTape,
        dy: Array2<f64>,
        grads: &mut EncoderGrads,
    ) {
        self.backward_example(tape, dy, grads);
    }
}

impl ExampleTape {
    pub(crate) fn positions(&self) -> &[usize] {
        &self.positions
    }
}

fn row_inputs(batch: &EncodedBatch, i: usize) -> (Vec<u32>, Vec<usize>) {
    let positions = batch.valid_positions(i);
    let ids = positions.iter().map(|&p| batch.token_ids[[i, p]]).collect();
    (ids, positions)
}
