//! Shared Transformer encoder over one band's token stream.
//!
//! Input embeddings sum the code, power, channel, and temporal tables; four
//! metadata prefix rows (reference, band, task family, phase) are prepended.
//! The stack is pre-norm multi-head self-attention with GELU feed-forward
//! blocks and a final layer normalization. Per-band linear heads map hidden
//! states to logits over that band's local code vocabulary.

mod pretrain;

pub use pretrain::{pretrain, pretrain_from, PretrainConfig, PretrainReport, StepRecord};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, Graph, Scalar, Tensor, Var};
use crate::masking::MaskError;
use crate::tokens::{
    MetadataIds, TokenStream, TokensError, BAND_VOCAB_SIZE, CHANNEL_VOCAB, GLOBAL_VOCAB,
    PHASE_VOCAB, POWER_BINS, REFERENCE_VOCAB, TASK_FAMILY_VOCAB, UNKNOWN_BAND, UNKNOWN_PHASE,
    UNKNOWN_REFERENCE, UNKNOWN_TASK_FAMILY,
};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("time index {t} exceeds the configured maximum {max_t}")]
    TimeOutOfRange { t: usize, max_t: usize },
    #[error("model dimension {d} not divisible by {heads} heads")]
    BadHeadSplit { d: usize, heads: usize },
    #[error("batch mixes sequence shapes: {a:?} vs {b:?}")]
    MixedBatch { a: (u16, u32), b: (u16, u32) },
    #[error("non-finite activations in layer {layer}")]
    NonFinite { layer: usize },
    #[error("no maskable positions in batch")]
    NoMaskablePositions,
    #[error("empty pretraining corpus")]
    EmptyCorpus,
    #[error("code index {code} exceeds vocabulary {vocab}")]
    CodeOutOfRange { code: u32, vocab: usize },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Tokens(#[from] TokensError),
}

/// Encoder hyperparameters. Defaults follow the trained model: 12 layers,
/// d = 256, 8 heads, metadata dropout 0.1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Maximum temporal token index (size of the time-embedding table).
    pub max_t: usize,
    /// Code vocabulary including the mask row (V + 1).
    pub code_vocab: usize,
    /// Power vocabulary including the mask row (B_p + 1).
    pub power_vocab: usize,
    pub channel_vocab: usize,
    pub p_meta: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 12,
            d_model: 256,
            heads: 8,
            max_t: 64,
            code_vocab: GLOBAL_VOCAB + 1,
            power_vocab: POWER_BINS as usize + 1,
            channel_vocab: CHANNEL_VOCAB,
            p_meta: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    fn validate(&self) -> Result<(), EncoderError> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(EncoderError::BadHeadSplit {
                d: self.d_model,
                heads: self.heads,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Layer<F: Scalar> {
    ln1_g: Tensor<F>,
    ln1_b: Tensor<F>,
    wq: Tensor<F>,
    bq: Tensor<F>,
    wk: Tensor<F>,
    bk: Tensor<F>,
    wv: Tensor<F>,
    bv: Tensor<F>,
    wo: Tensor<F>,
    bo: Tensor<F>,
    ln2_g: Tensor<F>,
    ln2_b: Tensor<F>,
    w1: Tensor<F>,
    b1: Tensor<F>,
    w2: Tensor<F>,
    b2: Tensor<F>,
}

/// Shared encoder parameters: embedding tables plus the Transformer stack.
#[derive(Debug, Clone)]
pub struct EncoderModel<F: Scalar> {
    pub cfg: EncoderConfig,
    code_emb: Tensor<F>,
    power_emb: Tensor<F>,
    chan_emb: Tensor<F>,
    time_emb: Tensor<F>,
    ref_emb: Tensor<F>,
    band_emb: Tensor<F>,
    task_emb: Tensor<F>,
    phase_emb: Tensor<F>,
    layers: Vec<Layer<F>>,
    ln_f_g: Tensor<F>,
    ln_f_b: Tensor<F>,
}

/// Graph handles for one insertion of the encoder parameters.
pub struct EncoderVars {
    code_emb: Var,
    power_emb: Var,
    chan_emb: Var,
    time_emb: Var,
    ref_emb: Var,
    band_emb: Var,
    task_emb: Var,
    phase_emb: Var,
    layers: Vec<Vec<Var>>,
    ln_f_g: Var,
    ln_f_b: Var,
}

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

impl<F: Scalar> EncoderModel<F> {
    pub fn init<R: Rng>(rng: &mut R, cfg: &EncoderConfig) -> Result<Self, EncoderError>
    where
        StandardNormal: Distribution<F>,
    {
        cfg.validate()?;
        let d = cfg.d_model;
        let emb = |rng: &mut R, v: usize| Tensor::randn(rng, &[v, d], INIT_STD);
        let code_emb = emb(rng, cfg.code_vocab);
        let power_emb = emb(rng, cfg.power_vocab);
        let chan_emb = emb(rng, cfg.channel_vocab);
        let time_emb = emb(rng, cfg.max_t);
        let ref_emb = emb(rng, REFERENCE_VOCAB.len());
        let band_emb = emb(rng, BAND_VOCAB_SIZE);
        let task_emb = emb(rng, TASK_FAMILY_VOCAB.len());
        let phase_emb = emb(rng, PHASE_VOCAB.len());
        let layers = (0..cfg.layers)
            .map(|_| Layer {
                ln1_g: Tensor::full(&[d], F::one()),
                ln1_b: Tensor::zeros(&[d]),
                wq: Tensor::randn(rng, &[d, d], INIT_STD),
                bq: Tensor::zeros(&[d]),
                wk: Tensor::randn(rng, &[d, d], INIT_STD),
                bk: Tensor::zeros(&[d]),
                wv: Tensor::randn(rng, &[d, d], INIT_STD),
                bv: Tensor::zeros(&[d]),
                wo: Tensor::randn(rng, &[d, d], INIT_STD),
                bo: Tensor::zeros(&[d]),
                ln2_g: Tensor::full(&[d], F::one()),
                ln2_b: Tensor::zeros(&[d]),
                w1: Tensor::randn(rng, &[d, cfg.ffn_dim()], INIT_STD),
                b1: Tensor::zeros(&[cfg.ffn_dim()]),
                w2: Tensor::randn(rng, &[cfg.ffn_dim(), d], INIT_STD),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(EncoderModel {
            cfg: cfg.clone(),
            code_emb,
            power_emb,
            chan_emb,
            time_emb,
            ref_emb,
            band_emb,
            task_emb,
            phase_emb,
            layers,
            ln_f_g: Tensor::full(&[d], F::one()),
            ln_f_b: Tensor::zeros(&[d]),
        })
    }

    pub fn params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out: Vec<(String, &Tensor<F>)> = vec![
            ("emb.code".into(), &self.code_emb),
            ("emb.power".into(), &self.power_emb),
            ("emb.channel".into(), &self.chan_emb),
            ("emb.time".into(), &self.time_emb),
            ("emb.ref".into(), &self.ref_emb),
            ("emb.band".into(), &self.band_emb),
            ("emb.task".into(), &self.task_emb),
            ("emb.phase".into(), &self.phase_emb),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, t) in [
                ("ln1.g", &l.ln1_g),
                ("ln1.b", &l.ln1_b),
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln2.g", &l.ln2_g),
                ("ln2.b", &l.ln2_b),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layer{i}.{suffix}"), t));
            }
        }
        out.push(("ln_f.g".into(), &self.ln_f_g));
        out.push(("ln_f.b".into(), &self.ln_f_b));
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out: Vec<(String, &mut Tensor<F>)> = vec![
            ("emb.code".into(), &mut self.code_emb),
            ("emb.power".into(), &mut self.power_emb),
            ("emb.channel".into(), &mut self.chan_emb),
            ("emb.time".into(), &mut self.time_emb),
            ("emb.ref".into(), &mut self.ref_emb),
            ("emb.band".into(), &mut self.band_emb),
            ("emb.task".into(), &mut self.task_emb),
            ("emb.phase".into(), &mut self.phase_emb),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (suffix, t) in [
                ("ln1.g", &mut l.ln1_g),
                ("ln1.b", &mut l.ln1_b),
                ("wq", &mut l.wq),
                ("bq", &mut l.bq),
                ("wk", &mut l.wk),
                ("bk", &mut l.bk),
                ("wv", &mut l.wv),
                ("bv", &mut l.bv),
                ("wo", &mut l.wo),
                ("bo", &mut l.bo),
                ("ln2.g", &mut l.ln2_g),
                ("ln2.b", &mut l.ln2_b),
                ("w1", &mut l.w1),
                ("b1", &mut l.b1),
                ("w2", &mut l.w2),
                ("b2", &mut l.b2),
            ] {
                out.push((format!("layer{i}.{suffix}"), t));
            }
        }
        out.push(("ln_f.g".into(), &mut self.ln_f_g));
        out.push(("ln_f.b".into(), &mut self.ln_f_b));
        out
    }

    pub fn insert(&self, g: &mut Graph<F>, trainable: bool) -> EncoderVars {
        EncoderVars {
            code_emb: g.leaf(self.code_emb.clone(), trainable),
            power_emb: g.leaf(self.power_emb.clone(), trainable),
            chan_emb: g.leaf(self.chan_emb.clone(), trainable),
            time_emb: g.leaf(self.time_emb.clone(), trainable),
            ref_emb: g.leaf(self.ref_emb.clone(), trainable),
            band_emb: g.leaf(self.band_emb.clone(), trainable),
            task_emb: g.leaf(self.task_emb.clone(), trainable),
            phase_emb: g.leaf(self.phase_emb.clone(), trainable),
            layers: self
                .layers
                .iter()
                .map(|l| {
                    vec![
                        g.leaf(l.ln1_g.clone(), trainable),
                        g.leaf(l.ln1_b.clone(), trainable),
                        g.leaf(l.wq.clone(), trainable),
                        g.leaf(l.bq.clone(), trainable),
                        g.leaf(l.wk.clone(), trainable),
                        g.leaf(l.bk.clone(), trainable),
                        g.leaf(l.wv.clone(), trainable),
                        g.leaf(l.bv.clone(), trainable),
                        g.leaf(l.wo.clone(), trainable),
                        g.leaf(l.bo.clone(), trainable),
                        g.leaf(l.ln2_g.clone(), trainable),
                        g.leaf(l.ln2_b.clone(), trainable),
                        g.leaf(l.w1.clone(), trainable),
                        g.leaf(l.b1.clone(), trainable),
                        g.leaf(l.w2.clone(), trainable),
                        g.leaf(l.b2.clone(), trainable),
                    ]
                })
                .collect(),
            ln_f_g: g.leaf(self.ln_f_g.clone(), trainable),
            ln_f_b: g.leaf(self.ln_f_b.clone(), trainable),
        }
    }

    /// Summed input embeddings for a batch of masked streams sharing
    /// (C, T): output is `(B, 4 + S, d)` with the four metadata prefix rows
    /// first (reference, band, task family, phase).
    pub fn embed(
        &self,
        g: &mut Graph<F>,
        vars: &EncoderVars,
        streams: &[&TokenStream],
        metas: &[MetadataIds],
    ) -> Result<Var, EncoderError> {
        assert_eq!(streams.len(), metas.len());
        let b = streams.len();
        let first = streams[0];
        let (c, t) = (first.channels, first.time_steps);
        for s in streams {
            if (s.channels, s.time_steps) != (c, t) {
                return Err(EncoderError::MixedBatch {
                    a: (c, t),
                    b: (s.channels, s.time_steps),
                });
            }
            if s.time_steps as usize > self.cfg.max_t {
                return Err(EncoderError::TimeOutOfRange {
                    t: s.time_steps as usize - 1,
                    max_t: self.cfg.max_t,
                });
            }
            for &code in &s.codes {
                if code as usize >= self.cfg.code_vocab {
                    return Err(EncoderError::CodeOutOfRange {
                        code,
                        vocab: self.cfg.code_vocab,
                    });
                }
            }
        }
        let s_len = first.len();
        let mut code_idx = Vec::with_capacity(b * s_len);
        let mut power_idx = Vec::with_capacity(b * s_len);
        let mut chan_idx = Vec::with_capacity(b * s_len);
        let mut time_idx = Vec::with_capacity(b * s_len);
        for s in streams {
            for tt in 0..t as usize {
                for cc in 0..c as usize {
                    let i = s.flat_index(tt, cc);
                    code_idx.push(s.codes[i]);
                    power_idx.push(s.powers[i] as u32);
                    chan_idx.push(s.channel_ids[cc] as u32);
                    time_idx.push(tt as u32);
                }
            }
        }
        let prefix_rows = |field: fn(&MetadataIds) -> u16| -> Vec<u32> {
            metas.iter().map(|m| field(m) as u32).collect()
        };
        let ref_rows = prefix_rows(|m| m.reference_id);
        let band_rows = prefix_rows(|m| m.band_id);
        let task_rows = prefix_rows(|m| m.task_family_id);
        let phase_rows = prefix_rows(|m| m.phase_id);

        let e_code = g.embedding(vars.code_emb, &code_idx, &[b, s_len])?;
        let e_power = g.embedding(vars.power_emb, &power_idx, &[b, s_len])?;
        let e_chan = g.embedding(vars.chan_emb, &chan_idx, &[b, s_len])?;
        let e_time = g.embedding(vars.time_emb, &time_idx, &[b, s_len])?;
        let sum1 = g.add(e_code, e_power)?;
        let sum2 = g.add(sum1, e_chan)?;
        let eeg = g.add(sum2, e_time)?;

        let p_ref = g.embedding(vars.ref_emb, &ref_rows, &[b, 1])?;
        let p_band = g.embedding(vars.band_emb, &band_rows, &[b, 1])?;
        let p_task = g.embedding(vars.task_emb, &task_rows, &[b, 1])?;
        let p_phase = g.embedding(vars.phase_emb, &phase_rows, &[b, 1])?;
        Ok(g.concat(&[p_ref, p_band, p_task, p_phase, eeg], 1)?)
    }

    /// Pre-norm Transformer stack over `(B, R, d)` input embeddings with
    /// full bidirectional attention; same output shape.
    pub fn encode(
        &self,
        g: &mut Graph<F>,
        vars: &EncoderVars,
        h: Var,
    ) -> Result<Var, EncoderError> {
        let shape = g.value(h).shape().to_vec();
        let (b, r, d) = (shape[0], shape[1], shape[2]);
        let heads = self.cfg.heads;
        let dh = d / heads;
        let mut x = h;
        for (li, layer) in vars.layers.iter().enumerate() {
            let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] =
                layer[..]
            else {
                unreachable!("layer var arity");
            };
            let a = g.layer_norm(x, ln1_g, ln1_b, LN_EPS)?;
            let q = g.matmul(a, wq)?;
            let q = g.add_bias(q, bq)?;
            let k = g.matmul(a, wk)?;
            let k = g.add_bias(k, bk)?;
            let v = g.matmul(a, wv)?;
            let v = g.add_bias(v, bv)?;
            let split = |g: &mut Graph<F>, m: Var| -> Result<Var, EncoderError> {
                let m = g.reshape(m, &[b, r, heads, dh])?;
                Ok(g.permute(m, &[0, 2, 1, 3])?)
            };
            let qh = split(g, q)?;
            let kh = split(g, k)?;
            let vh = split(g, v)?;
            let kt = g.permute(kh, &[0, 1, 3, 2])?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = g.softmax(scores)?;
            let ctx = g.matmul(attn, vh)?;
            let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, &[b, r, d])?;
            let proj = g.matmul(ctx, wo)?;
            let proj = g.add_bias(proj, bo)?;
            x = g.add(x, proj)?;

            let f = g.layer_norm(x, ln2_g, ln2_b, LN_EPS)?;
            let f1 = g.matmul(f, w1)?;
            let f1 = g.add_bias(f1, b1)?;
            let f1 = g.gelu(f1);
            let f2 = g.matmul(f1, w2)?;
            let f2 = g.add_bias(f2, b2)?;
            x = g.add(x, f2)?;
            if !g.value(x).all_finite() {
                return Err(EncoderError::NonFinite { layer: li });
            }
        }
        Ok(g.layer_norm(x, vars.ln_f_g, vars.ln_f_b, LN_EPS)?)
    }

    /// Drop the four metadata prefix rows: `(B, 4+S, d)` -> `(B, S, d)`.
    pub fn strip_prefix(&self, g: &mut Graph<F>, h: Var) -> Result<Var, EncoderError> {
        let r = g.value(h).shape()[1];
        Ok(g.slice(h, 1, 4, r - 4)?)
    }
}

impl EncoderVars {
    /// Vars in the same order as [`EncoderModel::params`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![
            self.code_emb,
            self.power_emb,
            self.chan_emb,
            self.time_emb,
            self.ref_emb,
            self.band_emb,
            self.task_emb,
            self.phase_emb,
        ];
        for layer in &self.layers {
            out.extend_from_slice(layer);
        }
        out.push(self.ln_f_g);
        out.push(self.ln_f_b);
        out
    }
}

/// Per-band prediction heads: `W_b (K_b, d)` and bias `a_b (K_b)`.
#[derive(Debug, Clone)]
pub struct BandHeads<F: Scalar> {
    pub sizes: Vec<usize>,
    w: Vec<Tensor<F>>,
    b: Vec<Tensor<F>>,
}

/// Graph handles for the heads.
pub struct BandHeadVars {
    w: Vec<Var>,
    b: Vec<Var>,
}

impl<F: Scalar> BandHeads<F> {
    pub fn init<R: Rng>(rng: &mut R, sizes: &[usize], d: usize) -> Self
    where
        StandardNormal: Distribution<F>,
    {
        BandHeads {
            sizes: sizes.to_vec(),
            w: sizes
                .iter()
                .map(|&k| Tensor::randn(rng, &[k, d], INIT_STD))
                .collect(),
            b: sizes.iter().map(|&k| Tensor::zeros(&[k])).collect(),
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.w.iter().zip(&self.b).enumerate() {
            out.push((format!("head{i}.w"), w));
            out.push((format!("head{i}.b"), b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out: Vec<(String, &mut Tensor<F>)> = Vec::new();
        for (i, (w, b)) in self.w.iter_mut().zip(self.b.iter_mut()).enumerate() {
            out.push((format!("head{i}.w"), w));
            out.push((format!("head{i}.b"), b));
        }
        out
    }

    pub fn insert(&self, g: &mut Graph<F>, trainable: bool) -> BandHeadVars {
        BandHeadVars {
            w: self.w.iter().map(|t| g.leaf(t.clone(), trainable)).collect(),
            b: self.b.iter().map(|t| g.leaf(t.clone(), trainable)).collect(),
        }
    }
}

impl BandHeadVars {
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in self.w.iter().zip(&self.b) {
            out.push(*w);
            out.push(*b);
        }
        out
    }
}

/// Band-head logits over the local vocabulary: `(B, S, K_b)`.
pub fn band_logits<F: Scalar>(
    g: &mut Graph<F>,
    heads: &BandHeadVars,
    band_index: usize,
    hidden: Var,
) -> Result<Var, EncoderError> {
    let logits = g.matmul_tb(hidden, heads.w[band_index])?;
    Ok(g.add_bias(logits, heads.b[band_index])?)
}

/// Masked code prediction loss: mean cross-entropy over masked positions of
/// the band-local targets. `hidden` is `(B, S, d)` with prefixes already
/// stripped; `targets`/`mask` are flattened `B*S`.
pub fn mcp_loss<F: Scalar>(
    g: &mut Graph<F>,
    heads: &BandHeadVars,
    band_index: usize,
    hidden: Var,
    targets: &[u32],
    mask: &[bool],
) -> Result<Var, EncoderError> {
    if mask.iter().all(|&m| !m) {
        return Err(EncoderError::NoMaskablePositions);
    }
    let logits = band_logits(g, heads, band_index, hidden)?;
    Ok(g.cross_entropy(logits, targets, mask)?)
}

/// Metadata dropout: each field is independently replaced by its UNKNOWN id
/// with probability `p_meta`.
pub fn meta_dropout<R: Rng>(meta: &MetadataIds, p_meta: f64, rng: &mut R) -> MetadataIds {
    let mut out = *meta;
    if rng.random_range(0.0..1.0) < p_meta {
        out.reference_id = UNKNOWN_REFERENCE;
    }
    if rng.random_range(0.0..1.0) < p_meta {
        out.band_id = UNKNOWN_BAND;
    }
    if rng.random_range(0.0..1.0) < p_meta {
        out.task_family_id = UNKNOWN_TASK_FAMILY;
    }
    if rng.random_range(0.0..1.0) < p_meta {
        out.phase_id = UNKNOWN_PHASE;
    }
    out
}
