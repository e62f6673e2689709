//! Masked code prediction pretraining loop.
//!
//! Each step samples one band, buckets sequences by (C, T) so a batch
//! shares its shape, applies metadata dropout and region masking, and takes
//! one AdamW step under the warmup/cosine schedule. All randomness is
//! derived from (seed, step), so training resumes bit-exactly from a
//! checkpointed step counter.

use std::collections::BTreeMap;

use rand::Rng;

use super::{BandHeads, EncoderConfig, EncoderError, EncoderModel};
use crate::engine::{adamw_step, cosine_lr, AdamWConfig, Graph, LrSchedule, OptimizerState, Tensor};
use crate::masking::{annotate, apply_mask, sample_mask};
use crate::rng::{derive_seed, stream};
use crate::tokens::{ChannelRegistry, MetadataIds, TokenStream, Vocabulary, MASK_POWER};

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub vocab: Vocabulary,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub p_mask: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            encoder: EncoderConfig::default(),
            vocab: Vocabulary::default(),
            batch_size: 16,
            schedule: LrSchedule {
                peak_lr: 3e-4,
                min_lr: 3e-5,
                warmup_steps: 10_000,
                total_steps: 30_000,
            },
            weight_decay: 1e-2,
            clip_norm: 1.0,
            p_mask: 0.5,
            seed: 0,
        }
    }
}

/// One training-step log record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub masked_accuracy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PretrainReport {
    pub records: Vec<StepRecord>,
    /// Batches skipped because no position was maskable.
    pub skipped: u64,
}

/// Fresh model + heads, trained for `steps` optimizer steps.
pub fn pretrain(
    corpus: &[TokenStream],
    cfg: &PretrainConfig,
    steps: u64,
) -> Result<(EncoderModel<f32>, BandHeads<f32>, PretrainReport), EncoderError> {
    let mut init_rng = stream(cfg.seed, &[0x65_6e_63]);
    let mut model = EncoderModel::<f32>::init(&mut init_rng, &cfg.encoder)?;
    let mut heads = BandHeads::<f32>::init(&mut init_rng, &cfg.vocab.sizes, cfg.encoder.d_model);
    let shapes: Vec<Vec<usize>> = model
        .params()
        .iter()
        .chain(heads.params().iter())
        .map(|(_, t)| t.shape().to_vec())
        .collect();
    let mut state = OptimizerState::<f32>::new(&shapes);
    let report = pretrain_from(&mut model, &mut heads, &mut state, corpus, cfg, 0, steps)?;
    Ok((model, heads, report))
}

/// Continue training from `start_step` for `num_steps` more steps. Given
/// the same seed, running 0..n in one call or split across calls produces
/// identical parameters and losses.
pub fn pretrain_from(
    model: &mut EncoderModel<f32>,
    heads: &mut BandHeads<f32>,
    state: &mut OptimizerState<f32>,
    corpus: &[TokenStream],
    cfg: &PretrainConfig,
    start_step: u64,
    num_steps: u64,
) -> Result<PretrainReport, EncoderError> {
    if corpus.is_empty() {
        return Err(EncoderError::EmptyCorpus);
    }
    let registry = ChannelRegistry::default();
    // (band, C, T) -> sequence indices, in canonical order
    let mut buckets: BTreeMap<(usize, u16, u32), Vec<usize>> = BTreeMap::new();
    for (i, s) in corpus.iter().enumerate() {
        buckets
            .entry((s.band.index(), s.channels, s.time_steps))
            .or_default()
            .push(i);
    }
    let bands: Vec<usize> = {
        let mut b: Vec<usize> = buckets.keys().map(|k| k.0).collect();
        b.dedup();
        b
    };
    // cache channel annotations per bucket
    let annotations: BTreeMap<(usize, u16, u32), Vec<crate::masking::ChannelAnnotation>> = buckets
        .iter()
        .map(|(key, items)| {
            let names: Vec<String> = corpus[items[0]]
                .channel_ids
                .iter()
                .map(|&id| registry.name(id).to_string())
                .collect();
            (*key, annotate(&names))
        })
        .collect();

    let opt_cfg = AdamWConfig {
        weight_decay: cfg.weight_decay,
        clip_norm: cfg.clip_norm,
        ..Default::default()
    };
    let mut report = PretrainReport::default();
    let n_model_params = model.params().len();

    for step in start_step + 1..=start_step + num_steps {
        let mut rng = stream(cfg.seed, &[0x73_74_65_70, step]);
        let band = bands[rng.random_range(0..bands.len())];
        let band_buckets: Vec<(&(usize, u16, u32), &Vec<usize>)> =
            buckets.iter().filter(|(k, _)| k.0 == band).collect();
        let total: usize = band_buckets.iter().map(|(_, v)| v.len()).sum();
        let mut pick = rng.random_range(0..total);
        let mut chosen = band_buckets[0];
        for b in &band_buckets {
            if pick < b.1.len() {
                chosen = *b;
                break;
            }
            pick -= b.1.len();
        }
        let (key, items) = chosen;
        let batch_idx: Vec<usize> = if items.len() >= cfg.batch_size {
            rand::seq::index::sample(&mut rng, items.len(), cfg.batch_size)
                .into_iter()
                .map(|i| items[i])
                .collect()
        } else {
            (0..cfg.batch_size)
                .map(|_| items[rng.random_range(0..items.len())])
                .collect()
        };

        let anns = &annotations[key];
        let mut masked_streams: Vec<TokenStream> = Vec::with_capacity(batch_idx.len());
        let mut metas: Vec<MetadataIds> = Vec::with_capacity(batch_idx.len());
        let mut targets: Vec<u32> = Vec::new();
        let mut mask_flags: Vec<bool> = Vec::new();
        for (pos, &i) in batch_idx.iter().enumerate() {
            let s = &corpus[i];
            metas.push(super::meta_dropout(
                &s.meta,
                cfg.encoder.p_meta,
                &mut rng,
            ));
            let mask_seed = derive_seed(cfg.seed, &[0x6d_73_6b, step, pos as u64]);
            let plan = sample_mask(anns, s.time_steps as usize, cfg.p_mask, mask_seed);
            let (masked, original) = apply_mask(s, &plan, cfg.vocab.mask_code(), MASK_POWER)?;
            for (j, &m) in plan.mask.iter().enumerate() {
                if m {
                    let (_, local) = cfg.vocab.split_global(original[j])?;
                    targets.push(local as u32);
                    mask_flags.push(true);
                } else {
                    targets.push(0);
                    mask_flags.push(false);
                }
            }
            masked_streams.push(masked);
        }
        if mask_flags.iter().all(|&m| !m) {
            report.skipped += 1;
            continue;
        }

        let mut g = Graph::new();
        let model_vars = model.insert(&mut g, true);
        let head_vars = heads.insert(&mut g, true);
        let stream_refs: Vec<&TokenStream> = masked_streams.iter().collect();
        let emb = model.embed(&mut g, &model_vars, &stream_refs, &metas)?;
        let hidden = model.encode(&mut g, &model_vars, emb)?;
        let eeg_hidden = model.strip_prefix(&mut g, hidden)?;
        let logits = super::band_logits(&mut g, &head_vars, band, eeg_hidden)?;
        let loss = g.cross_entropy(logits, &targets, &mask_flags)?;
        let loss_val = g.value(loss).item() as f64;

        let acc = masked_accuracy(g.value(logits).data(), &targets, &mask_flags);

        let grads = g.backward(loss)?;
        let mut ordered = model_vars.ordered();
        ordered.extend(head_vars.ordered());
        let grad_list: Vec<Option<Tensor<f32>>> = ordered
            .iter()
            .enumerate()
            .map(|(pi, &v)| {
                // heads other than the sampled band are absent this step
                let in_band = pi < n_model_params
                    || (pi - n_model_params) / 2 == band;
                if in_band {
                    grads.get(v).cloned()
                } else {
                    None
                }
            })
            .collect();
        let lr = cosine_lr(step, &cfg.schedule);
        {
            let mut model_params = model.params_mut();
            let mut head_params = heads.params_mut();
            let mut named: Vec<(&str, &mut Tensor<f32>)> = Vec::new();
            for (n, t) in model_params.iter_mut() {
                named.push((n.as_str(), &mut **t));
            }
            for (n, t) in head_params.iter_mut() {
                named.push((n.as_str(), &mut **t));
            }
            let lrs = vec![lr; named.len()];
            adamw_step(&mut named, &grad_list, state, &opt_cfg, &lrs)?;
        }
        report.records.push(StepRecord {
            step,
            lr,
            loss: loss_val,
            masked_accuracy: acc,
        });
    }
    Ok(report)
}

/// Fraction of masked positions whose argmax logit hits the target.
pub fn masked_accuracy(logits: &[f32], targets: &[u32], mask: &[bool]) -> f64 {
    let rows = targets.len();
    if rows == 0 {
        return 0.0;
    }
    let k = logits.len() / rows;
    let mut hit = 0usize;
    let mut total = 0usize;
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        total += 1;
        let row = &logits[r * k..(r + 1) * k];
        let mut best = 0usize;
        let mut best_v = f32::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = j;
            }
        }
        if best == targets[r] as usize {
            hit += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}
