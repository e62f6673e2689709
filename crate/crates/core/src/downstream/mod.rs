//! Downstream classification: trial-level representations from the five
//! band streams, a two-layer classifier head, joint fine-tuning, and the
//! leave-one-subject-out evaluation harness.

mod loso;
mod metrics;

pub use loso::{finetune, loso_evaluate, FinetuneConfig, FinetuneResult, FoldResult, LosoReport};
pub use metrics::metrics;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::encoder::{EncoderError, EncoderModel, EncoderVars};
use crate::engine::{EngineError, Graph, Scalar, Tensor, Var};
use crate::signal::{BandId, EegSegment};
use crate::tokens::{
    build_all_streams, ChannelRegistry, TaskRules, TokenStream, TokensError, Vocabulary,
};
use crate::vq::TrainedTokenizer;

#[derive(Debug, Error)]
pub enum DownstreamError {
    #[error("trial shorter than one token ({len} < {token_len})")]
    TrialTooShort { len: usize, token_len: usize },
    #[error("training set contains a single class")]
    SingleClass,
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("need at least 3 subjects for leave-one-subject-out, got {got}")]
    TooFewSubjects { got: usize },
    #[error("subject `{subject}` has zero trials")]
    EmptySubject { subject: String },
    #[error("empty input")]
    EmptyInput,
    #[error("trials mix stream shapes; (C, T) must be constant within a dataset")]
    MixedShapes,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Tokens(#[from] TokensError),
}

/// A labeled trial: the raw segment plus class label and subject id.
#[derive(Debug, Clone)]
pub struct Trial {
    pub segment: EegSegment,
    pub label: usize,
    pub subject: String,
}

/// A trial after tokenization: five band streams plus label and subject.
/// Tokenizers are frozen, so this is computed once before any training.
#[derive(Debug, Clone)]
pub struct EncodedTrial {
    pub streams: [TokenStream; 5],
    pub label: usize,
    pub subject: String,
}

/// Ablation switches mirroring the "w/o metadata" and "w/o meta+power"
/// rows: both are config-only changes to stream preparation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_metadata: bool,
    pub no_power: bool,
}

/// Tokenize a trial into its five band streams, applying ablation switches.
pub fn prepare_trial(
    trial: &Trial,
    tokenizers: &[TrainedTokenizer; 5],
    vocab: &Vocabulary,
    registry: &ChannelRegistry,
    rules: &TaskRules,
    ablation: Ablation,
) -> Result<EncodedTrial, DownstreamError> {
    let token_len = tokenizers[0].net.cfg.token_len;
    if trial.segment.num_samples() < token_len {
        return Err(DownstreamError::TrialTooShort {
            len: trial.segment.num_samples(),
            token_len,
        });
    }
    let mut streams = build_all_streams(&trial.segment, tokenizers, vocab, registry, rules)?;
    for s in streams.iter_mut() {
        if ablation.no_metadata {
            s.strip_metadata();
        }
        if ablation.no_power {
            s.flatten_power(0);
        }
    }
    Ok(EncodedTrial {
        streams,
        label: trial.label,
        subject: trial.subject.clone(),
    })
}

/// Two-layer classification head over the flattened five-band hidden
/// states: `5*S*d -> hidden -> num_classes` with GELU and dropout between.
#[derive(Debug, Clone)]
pub struct ClassifierHead<F: Scalar> {
    pub input_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub dropout: f64,
    w1: Tensor<F>,
    b1: Tensor<F>,
    w2: Tensor<F>,
    b2: Tensor<F>,
}

pub struct ClassifierHeadVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl<F: Scalar> ClassifierHead<F> {
    pub fn init<R: Rng>(
        rng: &mut R,
        input_dim: usize,
        hidden: usize,
        num_classes: usize,
        dropout: f64,
    ) -> Self
    where
        StandardNormal: Distribution<F>,
    {
        ClassifierHead {
            input_dim,
            hidden,
            num_classes,
            dropout,
            w1: Tensor::randn(rng, &[input_dim, hidden], (2.0 / input_dim as f64).sqrt()),
            b1: Tensor::zeros(&[hidden]),
            w2: Tensor::randn(rng, &[hidden, num_classes], (2.0 / hidden as f64).sqrt()),
            b2: Tensor::zeros(&[num_classes]),
        }
    }

    pub fn params(&self) -> Vec<(String, &Tensor<F>)> {
        vec![
            ("clf.w1".into(), &self.w1),
            ("clf.b1".into(), &self.b1),
            ("clf.w2".into(), &self.w2),
            ("clf.b2".into(), &self.b2),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            ("clf.w1".into(), &mut self.w1),
            ("clf.b1".into(), &mut self.b1),
            ("clf.w2".into(), &mut self.w2),
            ("clf.b2".into(), &mut self.b2),
        ]
    }

    pub fn insert(&self, g: &mut Graph<F>, trainable: bool) -> ClassifierHeadVars {
        ClassifierHeadVars {
            w1: g.leaf(self.w1.clone(), trainable),
            b1: g.leaf(self.b1.clone(), trainable),
            w2: g.leaf(self.w2.clone(), trainable),
            b2: g.leaf(self.b2.clone(), trainable),
        }
    }

    /// Head logits for `(B, input_dim)` features. `dropout_mask` (already
    /// inverted-scaled) is applied after the GELU during training.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        vars: &ClassifierHeadVars,
        features: Var,
        dropout_mask: Option<Var>,
    ) -> Result<Var, DownstreamError> {
        let h = g.matmul(features, vars.w1)?;
        let h = g.add_bias(h, vars.b1)?;
        let mut h = g.gelu(h);
        if let Some(mask) = dropout_mask {
            h = g.mul(h, mask)?;
        }
        let out = g.matmul(h, vars.w2)?;
        Ok(g.add_bias(out, vars.b2)?)
    }
}

impl ClassifierHeadVars {
    pub fn ordered(&self) -> Vec<Var> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }
}

/// Per-band hidden states of a batch of trials, concatenated (band-major)
/// to `(B, 5*S, d)` and flattened to `(B, 5*S*d)`.
pub fn trial_features(
    g: &mut Graph<f32>,
    model: &EncoderModel<f32>,
    vars: &EncoderVars,
    trials: &[&EncodedTrial],
) -> Result<Var, DownstreamError> {
    if trials.is_empty() {
        return Err(DownstreamError::EmptyInput);
    }
    let b = trials.len();
    let first = &trials[0].streams[0];
    let (c, t) = (first.channels, first.time_steps);
    for trial in trials {
        for s in &trial.streams {
            if (s.channels, s.time_steps) != (c, t) {
                return Err(DownstreamError::MixedShapes);
            }
        }
    }
    let s_len = c as usize * t as usize;
    let mut band_hidden = Vec::with_capacity(5);
    for band in BandId::ALL {
        let streams: Vec<&TokenStream> = trials
            .iter()
            .map(|tr| &tr.streams[band.index()])
            .collect();
        let metas: Vec<_> = streams.iter().map(|s| s.meta).collect();
        let emb = model.embed(g, vars, &streams, &metas)?;
        let enc = model.encode(g, vars, emb)?;
        band_hidden.push(model.strip_prefix(g, enc)?);
    }
    let concat = g.concat(&band_hidden, 1)?;
    let d = model.cfg.d_model;
    Ok(g.reshape(concat, &[b, 5 * s_len * d])?)
}

/// Deterministic trial vector (evaluation mode, no dropout): the flattened
/// `5*S*d` representation.
pub fn encode_trial(
    trial: &EncodedTrial,
    model: &EncoderModel<f32>,
) -> Result<Vec<f32>, DownstreamError> {
    let mut g = Graph::new();
    let vars = model.insert(&mut g, false);
    let feat = trial_features(&mut g, model, &vars, &[trial])?;
    Ok(g.value(feat).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::rng::stream;
    use crate::tokens::MetadataIds;

    fn toy_encoder(d: usize) -> EncoderModel<f32> {
        let cfg = EncoderConfig {
            layers: 1,
            d_model: d,
            heads: 2,
            max_t: 8,
            code_vocab: 3329,
            power_vocab: 129,
            channel_vocab: 75,
            p_meta: 0.0,
        };
        let mut rng = stream(0, &[1]);
        EncoderModel::init(&mut rng, &cfg).unwrap()
    }

    pub(crate) fn toy_trial(c: u16, t: u32, label: usize, subject: &str, code0: u32) -> EncodedTrial {
        let vocab = Vocabulary::default();
        let streams: Vec<TokenStream> = BandId::ALL
            .map(|band| {
                let n = c as u32 * t;
                TokenStream {
                    band,
                    channels: c,
                    time_steps: t,
                    codes: (0..n)
                        .map(|i| {
                            vocab
                                .to_global(band, ((code0 + i) % 64) as usize)
                                .unwrap()
                        })
                        .collect(),
                    powers: (0..n).map(|i| (i % 16) as u16).collect(),
                    channel_ids: (0..c).collect(),
                    meta: MetadataIds {
                        reference_id: 0,
                        band_id: band.index() as u16,
                        task_family_id: 1,
                        phase_id: 2,
                    },
                }
            })
            .to_vec()
            .try_into()
            .unwrap();
        EncodedTrial {
            streams,
            label,
            subject: subject.to_string(),
        }
    }

    #[test]
    fn trial_vector_has_5_s_d_length() {
        let model = toy_encoder(16);
        let trial = toy_trial(4, 3, 0, "s1", 0);
        let v = encode_trial(&trial, &model).unwrap();
        assert_eq!(v.len(), 5 * 4 * 3 * 16);
    }

    #[test]
    fn identical_trials_encode_identically() {
        let model = toy_encoder(16);
        let a = toy_trial(2, 2, 0, "s1", 5);
        let b = toy_trial(2, 2, 0, "s1", 5);
        assert_eq!(encode_trial(&a, &model).unwrap(), encode_trial(&b, &model).unwrap());
    }

    #[test]
    fn band_blocks_are_ordered_and_channel_permutation_is_consistent() {
        let model = toy_encoder(16);
        let d = 16;
        let trial = toy_trial(2, 1, 0, "s1", 3);
        let v = encode_trial(&trial, &model).unwrap();
        // permute the two channels in every band stream
        let mut permuted = trial.clone();
        for s in permuted.streams.iter_mut() {
            s.codes.swap(0, 1);
            s.powers.swap(0, 1);
            s.channel_ids.swap(0, 1);
        }
        let vp = encode_trial(&permuted, &model).unwrap();
        // S = 2; within each band block of 2*d values, the two position rows swap
        for band in 0..5 {
            let base = band * 2 * d;
            assert_eq!(&v[base..base + d], &vp[base + d..base + 2 * d], "band {band}");
            assert_eq!(&v[base + d..base + 2 * d], &vp[base..base + d], "band {band}");
        }
    }

    #[test]
    fn mixed_shapes_are_rejected() {
        let model = toy_encoder(16);
        let a = toy_trial(2, 2, 0, "s1", 0);
        let b = toy_trial(2, 3, 1, "s2", 0);
        let mut g = Graph::new();
        let vars = model.insert(&mut g, false);
        assert!(matches!(
            trial_features(&mut g, &model, &vars, &[&a, &b]),
            Err(DownstreamError::MixedShapes)
        ));
    }
}
