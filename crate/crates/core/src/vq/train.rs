//! Tokenizer training: straight-through gradients into the encoder/decoder,
//! EMA updates into the codebook.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{
    quantize, tokenizer_loss, Codebook, LossWeights, StftBases, TokenizerNet, TokenizerNetConfig,
    VqError, WaveToken,
};
use crate::engine::{adamw_step, AdamWConfig, Graph, OptimizerState, Scalar, Tensor};
use crate::rng::stream;
use crate::signal::BandId;

#[derive(Debug, Clone)]
pub struct TokenizerTrainConfig {
    pub net: TokenizerNetConfig,
    pub codebook_size: usize,
    pub ema_decay: f64,
    /// Token budget per optimizer step.
    pub batch_tokens: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub stft_sizes: Vec<usize>,
    /// Re-seed entries whose EMA count collapses, once per epoch. Off by
    /// default.
    pub dead_code_restart: bool,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        TokenizerTrainConfig {
            net: TokenizerNetConfig::default(),
            codebook_size: 512,
            ema_decay: 0.99,
            batch_tokens: 512,
            lr: 3e-4,
            weight_decay: 1e-5,
            clip_norm: 1.0,
            epochs: 20,
            seed: 0,
            weights: LossWeights::default(),
            stft_sizes: super::loss::STFT_SIZES.to_vec(),
            dead_code_restart: false,
        }
    }
}

/// Frozen tokenizer: encoder/decoder weights plus the codebook.
#[derive(Debug, Clone)]
pub struct TrainedTokenizer {
    pub net: TokenizerNet<f32>,
    pub codebook: Codebook,
}

#[derive(Debug, Clone)]
pub struct TokenizerTrainReport {
    /// Mean total loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Per-step total losses, for determinism checks and curve plotting.
    pub step_losses: Vec<f64>,
    /// Assignment counts over the final epoch.
    pub usage_histogram: Vec<u64>,
    pub steps: u64,
}

impl TrainedTokenizer {
    /// Encoder latents for a batch of normalized tokens.
    pub fn encode_batch(&self, normalized: &[Vec<f32>]) -> Result<Vec<Vec<f32>>, VqError> {
        if normalized.is_empty() {
            return Ok(Vec::new());
        }
        let l = self.net.cfg.token_len;
        let b = normalized.len();
        let mut flat = Vec::with_capacity(b * l);
        for tok in normalized {
            debug_assert_eq!(tok.len(), l);
            flat.extend_from_slice(tok);
        }
        let mut g = Graph::new();
        let vars = self.net.insert(&mut g, false);
        let x = g.leaf(Tensor::new(vec![b, 1, l], flat)?, false);
        let z = self.net.encode(&mut g, &vars, x)?;
        let d = self.net.cfg.latent_dim;
        Ok(g.value(z).data().chunks(d).map(|c| c.to_vec()).collect())
    }

    /// Local codebook indices for a batch of wave tokens.
    pub fn encode_and_quantize(&self, tokens: &[WaveToken]) -> Result<Vec<usize>, VqError> {
        let normalized: Vec<Vec<f32>> = tokens.iter().map(|t| t.normalized_f32()).collect();
        let latents = self.encode_batch(&normalized)?;
        latents
            .iter()
            .map(|z| quantize(z, &self.codebook).map(|(i, _)| i))
            .collect()
    }

    /// Decode quantized latents for the given local indices.
    pub fn decode_indices(&self, indices: &[usize]) -> Result<Vec<Vec<f32>>, VqError> {
        if indices.is_empty() {
            return Ok(Vec::new());
        }
        let d = self.net.cfg.latent_dim;
        let mut flat = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.codebook.len() {
                return Err(VqError::AssignmentOutOfRange {
                    index: i,
                    k: self.codebook.len(),
                });
            }
            flat.extend_from_slice(self.codebook.entry(i));
        }
        let mut g = Graph::new();
        let vars = self.net.insert(&mut g, false);
        let z = g.leaf(Tensor::new(vec![indices.len(), d], flat)?, false);
        let y = self.net.decode(&mut g, &vars, z)?;
        let l = self.net.cfg.token_len;
        Ok(g.value(y).data().chunks(l).map(|c| c.to_vec()).collect())
    }
}

/// Normalized tokens of one corpus item (a band-domain segment-channel).
fn item_tokens(item: &[f64], l: usize) -> Result<Vec<Vec<f32>>, VqError> {
    if item.len() % l != 0 {
        return Err(VqError::NotDivisible {
            len: item.len(),
            token_len: l,
        });
    }
    Ok(item
        .chunks(l)
        .map(|chunk| {
            let rms = WaveToken::compute_rms(chunk);
            chunk.iter().map(|&v| (v / rms) as f32).collect()
        })
        .collect())
}

/// Train one band's tokenizer on a corpus of band-decomposed
/// segment-channel waveforms (each a multiple of the token length).
pub fn train_tokenizer(
    corpus: &[Vec<f64>],
    band: BandId,
    cfg: &TokenizerTrainConfig,
) -> Result<(TrainedTokenizer, TokenizerTrainReport), VqError> {
    if corpus.is_empty() {
        return Err(VqError::EmptyCorpus);
    }
    let l = cfg.net.token_len;
    let d = cfg.net.latent_dim;
    let mut init_rng = stream(cfg.seed, &[0x70_6b]);
    let mut net = TokenizerNet::<f32>::init(&mut init_rng, &cfg.net)?;
    let mut codebook: Option<Codebook> = None;
    let shapes: Vec<Vec<usize>> = net.params().iter().map(|(_, t)| t.shape().to_vec()).collect();
    let mut state = OptimizerState::<f32>::new(&shapes);
    let opt_cfg = AdamWConfig {
        weight_decay: cfg.weight_decay,
        clip_norm: cfg.clip_norm,
        ..Default::default()
    };
    let bases = StftBases::<f32>::new(&cfg.stft_sizes);
    let mut step: u64 = 0;
    let mut step_losses = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut usage = vec![0u64; cfg.codebook_size];

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut epoch_rng = stream(cfg.seed, &[0x73_68, epoch as u64]);
        order.shuffle(&mut epoch_rng);
        let mut epoch_loss_sum = 0.0;
        let mut epoch_steps = 0u64;
        if epoch + 1 == cfg.epochs {
            usage.iter_mut().for_each(|u| *u = 0);
        }

        let mut cursor = 0;
        while cursor < order.len() {
            // assemble a batch of items totalling ~batch_tokens tokens
            let mut batch_items: Vec<Vec<Vec<f32>>> = Vec::new();
            let mut token_count = 0usize;
            while cursor < order.len() && token_count < cfg.batch_tokens {
                let toks = item_tokens(&corpus[order[cursor]], l)?;
                token_count += toks.len();
                batch_items.push(toks);
                cursor += 1;
            }
            if token_count == 0 {
                break;
            }
            step += 1;

            let mut g = Graph::new();
            let vars = net.insert(&mut g, true);
            let mut flat = Vec::with_capacity(token_count * l);
            for item in &batch_items {
                for tok in item {
                    flat.extend_from_slice(tok);
                }
            }
            let x = g.leaf(Tensor::new(vec![token_count, 1, l], flat)?, false);
            let z_e = self_encode(&net, &mut g, &vars, x)?;
            let z_values = g.value(z_e).data().to_vec();

            let cb = match codebook.as_mut() {
                Some(cb) => cb,
                None => {
                    codebook = Some(init_codebook(
                        band,
                        d,
                        cfg.codebook_size,
                        cfg.ema_decay as f32,
                        &z_values,
                        cfg.seed,
                    ));
                    codebook.as_mut().unwrap()
                }
            };

            let mut assignments = Vec::with_capacity(token_count);
            let mut z_q_flat = Vec::with_capacity(token_count * d);
            for row in z_values.chunks(d) {
                let (idx, z_q) = quantize(row, cb)?;
                assignments.push(idx);
                z_q_flat.extend_from_slice(&z_q);
            }
            if epoch + 1 == cfg.epochs {
                for &a in &assignments {
                    usage[a] += 1;
                }
            }

            let z_q = g.leaf(Tensor::new(vec![token_count, d], z_q_flat)?, false);
            let st = g.straight_through(z_e, z_q)?;
            let recon = net.decode(&mut g, &vars, st)?;
            let recon_rows = g.reshape(recon, &[token_count, l])?;

            let mut recon_items = Vec::with_capacity(batch_items.len());
            let mut target_items = Vec::with_capacity(batch_items.len());
            let mut row = 0usize;
            for item in &batch_items {
                let t_count = item.len();
                let sliced = g.slice(recon_rows, 0, row, t_count)?;
                recon_items.push(g.reshape(sliced, &[1, 1, t_count * l])?);
                let mut target_flat = Vec::with_capacity(t_count * l);
                for tok in item {
                    target_flat.extend_from_slice(tok);
                }
                target_items.push(g.leaf(
                    Tensor::new(vec![1, 1, t_count * l], target_flat)?,
                    false,
                ));
                row += t_count;
            }

            let loss = tokenizer_loss(
                &mut g,
                &bases,
                &recon_items,
                &target_items,
                z_e,
                z_q,
                &cfg.weights,
            )?;
            let total: f64 = g.value(loss.total).item().as_f64();
            if !total.is_finite() {
                return Err(VqError::NonFiniteLoss { step });
            }
            step_losses.push(total);
            epoch_loss_sum += total;
            epoch_steps += 1;

            let mut grads = g.backward(loss.total)?;
            let ordered = vars.ordered();
            let grad_list: Vec<Option<Tensor<f32>>> =
                ordered.iter().map(|&v| grads.take(v)).collect();
            let mut params = net.params_mut();
            let lrs = vec![cfg.lr; params.len()];
            let mut named: Vec<(&str, &mut Tensor<f32>)> = params
                .iter_mut()
                .map(|(n, t)| (n.as_str(), &mut **t))
                .collect();
            adamw_step(&mut named, &grad_list, &mut state, &opt_cfg, &lrs)?;

            cb.ema_update(&z_values, &assignments)?;
        }

        epoch_losses.push(epoch_loss_sum / epoch_steps.max(1) as f64);

        if cfg.dead_code_restart {
            if let Some(cb) = codebook.as_mut() {
                restart_dead_codes(cb, corpus, &net, cfg, epoch as u64)?;
            }
        }
    }

    let codebook = codebook.ok_or(VqError::EmptyCorpus)?;
    Ok((
        TrainedTokenizer { net, codebook },
        TokenizerTrainReport {
            epoch_losses,
            step_losses,
            usage_histogram: usage,
            steps: step,
        },
    ))
}

// encode via the net; free function so the borrow on `net` stays immutable
fn self_encode(
    net: &TokenizerNet<f32>,
    g: &mut Graph<f32>,
    vars: &super::TokenizerNetVars,
    x: crate::engine::Var,
) -> Result<crate::engine::Var, VqError> {
    net.encode(g, vars, x)
}

/// Seed the codebook from first-batch encoder outputs, sampled without
/// replacement; if the batch is smaller than the codebook, entries cycle
/// with a small jitter.
fn init_codebook(
    band: BandId,
    dim: usize,
    k: usize,
    decay: f32,
    z_values: &[f32],
    seed: u64,
) -> Codebook {
    let rows = z_values.len() / dim;
    let mut rng = stream(seed, &[0x63_62]);
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut rng);
    let mut entries = Vec::with_capacity(k * dim);
    for j in 0..k {
        let src = order[j % rows];
        let row = &z_values[src * dim..(src + 1) * dim];
        if j < rows {
            entries.extend_from_slice(row);
        } else {
            for &v in row {
                entries.push(v + rng.random_range(-0.01..0.01));
            }
        }
    }
    Codebook::from_entries(band, dim, entries, decay)
}

/// Re-seed entries whose EMA count fell below 1e-3 of the mean with encoder
/// outputs of fresh corpus tokens.
fn restart_dead_codes(
    cb: &mut Codebook,
    corpus: &[Vec<f64>],
    net: &TokenizerNet<f32>,
    cfg: &TokenizerTrainConfig,
    epoch: u64,
) -> Result<(), VqError> {
    let k = cb.len();
    let mean_count: f32 = cb.ema_count.iter().sum::<f32>() / k as f32;
    let dead: Vec<usize> = (0..k)
        .filter(|&i| cb.ema_count[i] < 1e-3 * mean_count)
        .collect();
    if dead.is_empty() {
        return Ok(());
    }
    let mut rng = stream(cfg.seed, &[0x72_73, epoch]);
    let l = cfg.net.token_len;
    let mut samples: Vec<Vec<f32>> = Vec::with_capacity(dead.len());
    for _ in &dead {
        let item = &corpus[rng.random_range(0..corpus.len())];
        let toks = item_tokens(item, l)?;
        samples.push(toks[rng.random_range(0..toks.len())].clone());
    }
    let tokenizer = TrainedTokenizer {
        net: net.clone(),
        codebook: cb.clone(),
    };
    let latents = tokenizer.encode_batch(&samples)?;
    for (slot, z) in dead.iter().zip(latents) {
        let d = cb.dim;
        cb.vectors[slot * d..(slot + 1) * d].copy_from_slice(&z);
        cb.ema_sum[slot * d..(slot + 1) * d].copy_from_slice(&z);
        cb.ema_count[*slot] = 1.0;
    }
    Ok(())
}

/// Mean squared error between the quantized reconstruction and the
/// normalized target over a held-out corpus.
pub fn eval_reconstruction_mse(
    tokenizer: &TrainedTokenizer,
    corpus: &[Vec<f64>],
) -> Result<f64, VqError> {
    let l = tokenizer.net.cfg.token_len;
    let mut sum = 0f64;
    let mut count = 0usize;
    for item in corpus {
        let toks = item_tokens(item, l)?;
        let latents = tokenizer.encode_batch(&toks)?;
        let indices: Vec<usize> = latents
            .iter()
            .map(|z| quantize(z, &tokenizer.codebook).map(|(i, _)| i))
            .collect::<Result<_, _>>()?;
        let recon = tokenizer.decode_indices(&indices)?;
        for (r, t) in recon.iter().zip(&toks) {
            for (&rv, &tv) in r.iter().zip(t) {
                let d = rv as f64 - tv as f64;
                sum += d * d;
                count += 1;
            }
        }
    }
    Ok(sum / count.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> TokenizerTrainConfig {
        TokenizerTrainConfig {
            net: TokenizerNetConfig {
                token_len: 32,
                latent_dim: 8,
                conv_channels: vec![8, 16],
                kernel: 5,
            },
            codebook_size: 16,
            batch_tokens: 64,
            epochs: 4,
            seed: 42,
            stft_sizes: vec![64, 128],
            ..Default::default()
        }
    }

    fn sin_corpus(n_items: usize, item_tokens: usize, l: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = stream(seed, &[1]);
        (0..n_items)
            .map(|_| {
                let freq = rng.random_range(1.0..4.0);
                let amp = rng.random_range(0.5..2.0);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (0..item_tokens * l)
                    .map(|i| amp * (std::f64::consts::TAU * freq * i as f64 / l as f64 + phase).sin())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn training_reduces_loss_on_sinusoids() {
        let cfg = tiny_cfg();
        let corpus = sin_corpus(48, 4, 32, 7);
        let (_tok, report) = train_tokenizer(&corpus, BandId::Alpha, &cfg).unwrap();
        let first = report.epoch_losses[0];
        let last = *report.epoch_losses.last().unwrap();
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn identical_tokens_are_memorized() {
        let l = 32;
        let token: Vec<f64> = (0..l)
            .map(|i| (std::f64::consts::TAU * 2.0 * i as f64 / l as f64).sin())
            .collect();
        let corpus: Vec<Vec<f64>> = (0..32).map(|_| token.repeat(4)).collect();
        let mut cfg = tiny_cfg();
        cfg.epochs = 200;
        cfg.lr = 1e-3;
        let (tok, _) = train_tokenizer(&corpus, BandId::Delta, &cfg).unwrap();
        let mse = eval_reconstruction_mse(&tok, &corpus[..4]).unwrap();
        assert!(mse < 0.02, "degenerate corpus MSE {mse}");
        // the dominant code reconstructs the token's latent
        let toks = item_tokens(&corpus[0], l).unwrap();
        let latents = tok.encode_batch(&toks).unwrap();
        let (idx, z_q) = quantize(&latents[0], &tok.codebook).unwrap();
        let dist: f32 = latents[0]
            .iter()
            .zip(&z_q)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        assert!(dist < 0.1, "code {idx} distance {dist}");
    }

    #[test]
    fn fixed_seed_reproduces_losses_bitwise() {
        let cfg = tiny_cfg();
        let corpus = sin_corpus(40, 4, 32, 11);
        let (_, r1) = train_tokenizer(&corpus, BandId::Theta, &cfg).unwrap();
        let (_, r2) = train_tokenizer(&corpus, BandId::Theta, &cfg).unwrap();
        assert!(r1.step_losses.len() >= 10);
        assert_eq!(r1.step_losses, r2.step_losses);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(
            train_tokenizer(&[], BandId::Alpha, &tiny_cfg()),
            Err(VqError::EmptyCorpus)
        ));
    }

    #[test]
    fn encoder_gradient_is_nonzero_through_straight_through() {
        // one training step's graph: check that encoder conv weights receive
        // gradient when recon != target
        let cfg = tiny_cfg();
        let corpus = sin_corpus(8, 2, 32, 3);
        let mut rng = stream(0, &[0]);
        let net = TokenizerNet::<f32>::init(&mut rng, &cfg.net).unwrap();
        let toks = item_tokens(&corpus[0], 32).unwrap();
        let mut g = Graph::new();
        let vars = net.insert(&mut g, true);
        let flat: Vec<f32> = toks.iter().flatten().copied().collect();
        let x = g
            .leaf(Tensor::new(vec![toks.len(), 1, 32], flat.clone()).unwrap(), false)
            .to_owned();
        let z_e = net.encode(&mut g, &vars, x).unwrap();
        let z_q = g.leaf(Tensor::zeros(&[toks.len(), 8]), false);
        let st = g.straight_through(z_e, z_q).unwrap();
        let recon = net.decode(&mut g, &vars, st).unwrap();
        let target = g.leaf(
            Tensor::new(vec![toks.len(), 1, 32], flat).unwrap(),
            false,
        );
        let d = g.sub(recon, target).unwrap();
        let sq = g.square(d);
        let loss = g.mean(sq);
        let grads = g.backward(loss).unwrap();
        let gw = grads.get(vars.enc_w[0]).unwrap();
        let norm: f32 = gw.data().iter().map(|v| v * v).sum();
        assert!(norm > 0.0, "encoder got no gradient");
    }
}
