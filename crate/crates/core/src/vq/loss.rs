//! Four-term tokenizer training loss: MAE + MSE + multi-scale STFT
//! magnitude + commitment.
//!
//! The STFT is expressed as a strided 1-D convolution against fixed
//! Hann-windowed DFT bases, which keeps the whole loss differentiable on
//! the tape without a dedicated FFT op.

use super::VqError;
use crate::engine::{Graph, Scalar, Tensor, Var};

/// Loss term weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub mae: f64,
    pub mse: f64,
    pub stft: f64,
    pub commit: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mae: 1.25,
            mse: 0.5,
            stft: 0.25,
            commit: 1.0,
        }
    }
}

/// Default STFT scales; hop is `n_fft / 4`.
pub const STFT_SIZES: [usize; 3] = [256, 512, 1024];

const MAG_EPS: f64 = 1e-12;

/// Hann-windowed DFT bases for one FFT size, shaped as conv kernels
/// `(bins, 1, n_fft)`.
struct Basis<F: Scalar> {
    n_fft: usize,
    hop: usize,
    cos: Tensor<F>,
    sin: Tensor<F>,
}

/// Precomputed bases for a set of scales.
pub struct StftBases<F: Scalar> {
    bases: Vec<Basis<F>>,
}

impl<F: Scalar> StftBases<F> {
    pub fn new(sizes: &[usize]) -> Self {
        let bases = sizes
            .iter()
            .map(|&n_fft| {
                let bins = n_fft / 2 + 1;
                let mut cos = Tensor::zeros(&[bins, 1, n_fft]);
                let mut sin = Tensor::zeros(&[bins, 1, n_fft]);
                for b in 0..bins {
                    for t in 0..n_fft {
                        let w = 0.5
                            * (1.0
                                - (2.0 * std::f64::consts::PI * t as f64 / n_fft as f64).cos());
                        let ang = 2.0 * std::f64::consts::PI * b as f64 * t as f64 / n_fft as f64;
                        cos.data_mut()[(b * n_fft) + t] = F::c(w * ang.cos());
                        sin.data_mut()[(b * n_fft) + t] = F::c(-w * ang.sin());
                    }
                }
                Basis {
                    n_fft,
                    hop: n_fft / 4,
                    cos,
                    sin,
                }
            })
            .collect();
        StftBases { bases }
    }
}

/// Magnitude spectrogram of a `(1, 1, len)` signal for one basis:
/// `(1, bins, frames)`.
fn magnitude<F: Scalar>(
    g: &mut Graph<F>,
    basis: &Basis<F>,
    cos_w: Var,
    sin_w: Var,
    x: Var,
) -> Result<Var, VqError> {
    let re = g.conv1d(x, cos_w, None, basis.hop, 0)?;
    let im = g.conv1d(x, sin_w, None, basis.hop, 0)?;
    let re2 = g.square(re);
    let im2 = g.square(im);
    let sum = g.add(re2, im2)?;
    let sum = g.add_scalar(sum, MAG_EPS);
    Ok(g.sqrt(sum))
}

/// Component values of one loss evaluation, plus the total on the graph.
pub struct LossBreakdown {
    pub total: Var,
    pub mae: f64,
    pub mse: f64,
    pub stft: f64,
    pub commit: f64,
}

/// Build the tokenizer loss on the graph.
///
/// `recon_items` / `target_items` are per segment-channel concatenated
/// normalized waveforms, shaped `(1, 1, len)`; MAE/MSE average over every
/// sample, the STFT term averages over items and scales (scales longer than
/// an item are skipped), and the commitment term is the mean squared
/// distance between `z_e` and the stop-gradient of `z_q`, averaged over all
/// token latents.
pub fn tokenizer_loss<F: Scalar>(
    g: &mut Graph<F>,
    bases: &StftBases<F>,
    recon_items: &[Var],
    target_items: &[Var],
    z_e: Var,
    z_q: Var,
    weights: &LossWeights,
) -> Result<LossBreakdown, VqError> {
    assert_eq!(recon_items.len(), target_items.len());
    // time-domain terms over all samples at once
    let total_len: usize = recon_items.iter().map(|&v| g.value(v).len()).sum();
    let mut flat_recon = Vec::with_capacity(recon_items.len());
    let mut flat_target = Vec::with_capacity(recon_items.len());
    for (&r, &t) in recon_items.iter().zip(target_items) {
        let n = g.value(r).len();
        if g.value(t).len() != n {
            return Err(VqError::Engine(crate::engine::EngineError::ShapeMismatch {
                op: "tokenizer_loss",
                lhs: g.value(r).shape().to_vec(),
                rhs: g.value(t).shape().to_vec(),
            }));
        }
        flat_recon.push(g.reshape(r, &[1, n])?);
        flat_target.push(g.reshape(t, &[1, n])?);
    }
    let recon_cat = g.concat(&flat_recon, 1)?;
    let target_cat = g.concat(&flat_target, 1)?;
    debug_assert_eq!(g.value(recon_cat).len(), total_len);
    let diff = g.sub(recon_cat, target_cat)?;
    let abs = g.abs(diff);
    let mae = g.mean(abs);
    let sq = g.square(diff);
    let mse = g.mean(sq);

    // multi-scale STFT magnitude distance
    let mut per_item_terms: Vec<Var> = Vec::new();
    for (&r, &t) in recon_items.iter().zip(target_items) {
        let len = g.value(r).len();
        let mut scale_terms: Vec<Var> = Vec::new();
        for basis in &bases.bases {
            if basis.n_fft > len {
                continue;
            }
            let cos_w = g.constant(basis.cos.clone());
            let sin_w = g.constant(basis.sin.clone());
            let mag_r = magnitude(g, basis, cos_w, sin_w, r)?;
            let mag_t = magnitude(g, basis, cos_w, sin_w, t)?;
            let d = g.sub(mag_r, mag_t)?;
            let a = g.abs(d);
            scale_terms.push(g.mean(a));
        }
        if !scale_terms.is_empty() {
            let mut acc = scale_terms[0];
            for &term in &scale_terms[1..] {
                acc = g.add(acc, term)?;
            }
            per_item_terms.push(g.scale(acc, 1.0 / scale_terms.len() as f64));
        }
    }
    let stft = if per_item_terms.is_empty() {
        g.constant(Tensor::scalar(F::zero()))
    } else {
        let mut acc = per_item_terms[0];
        for &term in &per_item_terms[1..] {
            acc = g.add(acc, term)?;
        }
        g.scale(acc, 1.0 / per_item_terms.len() as f64)
    };

    // commitment: mean over tokens of ||z_e - sg(z_q)||^2 / D
    let z_q_sg = g.stop_grad(z_q);
    let commit_diff = g.sub(z_e, z_q_sg)?;
    let commit_sq = g.square(commit_diff);
    let commit = g.mean(commit_sq);

    let mae_w = g.scale(mae, weights.mae);
    let mse_w = g.scale(mse, weights.mse);
    let stft_w = g.scale(stft, weights.stft);
    let commit_w = g.scale(commit, weights.commit);
    let t1 = g.add(mae_w, mse_w)?;
    let t2 = g.add(t1, stft_w)?;
    let total = g.add(t2, commit_w)?;

    Ok(LossBreakdown {
        total,
        mae: g.value(mae).item().as_f64(),
        mse: g.value(mse).item().as_f64(),
        stft: g.value(stft).item().as_f64(),
        commit: g.value(commit).item().as_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn item_leaf(g: &mut Graph<f64>, data: &[f64]) -> Var {
        g.leaf(
            Tensor::new(vec![1, 1, data.len()], data.to_vec()).unwrap(),
            false,
        )
    }

    #[test]
    fn perfect_reconstruction_is_zero_loss() {
        let mut g = Graph::new();
        let bases = StftBases::new(&STFT_SIZES);
        let x: Vec<f64> = (0..512).map(|i| (i as f64 * 0.1).sin()).collect();
        let r = item_leaf(&mut g, &x);
        let t = item_leaf(&mut g, &x);
        let z = g.leaf(Tensor::zeros(&[4, 8]), false);
        let out =
            tokenizer_loss(&mut g, &bases, &[r], &[t], z, z, &LossWeights::default()).unwrap();
        assert_eq!(g.value(out.total).item(), 0.0);
        assert_eq!(out.mae, 0.0);
        assert_eq!(out.mse, 0.0);
        assert_eq!(out.stft, 0.0);
        assert_eq!(out.commit, 0.0);
    }

    #[test]
    fn constant_offset_gives_unit_mae_and_mse() {
        let mut g = Graph::new();
        let bases = StftBases::new(&STFT_SIZES);
        let x: Vec<f64> = (0..512).map(|i| (i as f64 * 0.07).cos()).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 1.0).collect();
        let r = item_leaf(&mut g, &y);
        let t = item_leaf(&mut g, &x);
        let z = g.leaf(Tensor::zeros(&[4, 8]), false);
        let w = LossWeights::default();
        let out = tokenizer_loss(&mut g, &bases, &[r], &[t], z, z, &w).unwrap();
        assert!((out.mae - 1.0).abs() < 1e-12);
        assert!((out.mse - 1.0).abs() < 1e-12);
        assert!((w.mae * out.mae - 1.25).abs() < 1e-12);
        assert!((w.mse * out.mse - 0.5).abs() < 1e-12);
        assert_eq!(out.commit, 0.0);
    }

    #[test]
    fn total_is_exactly_the_weighted_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let bases = StftBases::new(&STFT_SIZES);
        let x: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = item_leaf(&mut g, &y);
        let t = item_leaf(&mut g, &x);
        let ze = g.leaf(
            Tensor::new(vec![2, 3], vec![0.1, 0.2, -0.4, 0.0, 1.0, -1.0]).unwrap(),
            false,
        );
        let zq = g.leaf(
            Tensor::new(vec![2, 3], vec![0.0, 0.0, 0.0, 0.5, 0.5, 0.5]).unwrap(),
            false,
        );
        let w = LossWeights::default();
        let out = tokenizer_loss(&mut g, &bases, &[r], &[t], ze, zq, &w).unwrap();
        assert!(out.mae >= 0.0 && out.mse >= 0.0 && out.stft >= 0.0 && out.commit >= 0.0);
        let want = w.mae * out.mae + w.mse * out.mse + w.stft * out.stft + w.commit * out.commit;
        let got: f64 = g.value(out.total).item();
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
    }

    /// Direct short-time FFT oracle with a Hann window, hop n_fft/4.
    fn stft_l1_oracle(a: &[f64], b: &[f64], sizes: &[usize]) -> f64 {
        let mut planner = FftPlanner::new();
        let mut terms = Vec::new();
        for &n_fft in sizes {
            if n_fft > a.len() {
                continue;
            }
            let hop = n_fft / 4;
            let fft = planner.plan_fft_forward(n_fft);
            let window: Vec<f64> = (0..n_fft)
                .map(|t| {
                    0.5 * (1.0 - (2.0 * std::f64::consts::PI * t as f64 / n_fft as f64).cos())
                })
                .collect();
            let bins = n_fft / 2 + 1;
            let mags = |x: &[f64]| -> Vec<f64> {
                let mut frames = Vec::new();
                let mut start = 0;
                while start + n_fft <= x.len() {
                    let mut buf: Vec<Complex<f64>> = x[start..start + n_fft]
                        .iter()
                        .zip(&window)
                        .map(|(&v, &w)| Complex::new(v * w, 0.0))
                        .collect();
                    fft.process(&mut buf);
                    for c in buf.iter().take(bins) {
                        frames.push(c.norm());
                    }
                    start += hop;
                }
                frames
            };
            let ma = mags(a);
            let mb = mags(b);
            let l1: f64 =
                ma.iter().zip(&mb).map(|(x, y)| (x - y).abs()).sum::<f64>() / ma.len() as f64;
            terms.push(l1);
        }
        terms.iter().sum::<f64>() / terms.len() as f64
    }

    #[test]
    fn stft_component_matches_direct_fft_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..512).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let bases = StftBases::new(&STFT_SIZES);
        let r = item_leaf(&mut g, &a);
        let t = item_leaf(&mut g, &b);
        let z = g.leaf(Tensor::zeros(&[1, 2]), false);
        let out =
            tokenizer_loss(&mut g, &bases, &[r], &[t], z, z, &LossWeights::default()).unwrap();
        // oracle frame layout matches: frames at hop offsets while start+n_fft <= len
        let want = stft_l1_oracle(&a, &b, &STFT_SIZES);
        let rel = (out.stft - want).abs() / want.abs().max(1e-12);
        assert!(rel < 1e-6, "stft {} vs oracle {want}: rel {rel}", out.stft);
    }

    #[test]
    fn scales_longer_than_signal_are_skipped() {
        let mut g = Graph::new();
        let bases = StftBases::new(&STFT_SIZES);
        // 300 samples: only the 256 scale applies
        let a: Vec<f64> = (0..300).map(|i| (i as f64 * 0.2).sin()).collect();
        let b: Vec<f64> = (0..300).map(|i| (i as f64 * 0.21).sin()).collect();
        let r = item_leaf(&mut g, &a);
        let t = item_leaf(&mut g, &b);
        let z = g.leaf(Tensor::zeros(&[1, 2]), false);
        let out =
            tokenizer_loss(&mut g, &bases, &[r], &[t], z, z, &LossWeights::default()).unwrap();
        let want = stft_l1_oracle(&a, &b, &[256]);
        assert!((out.stft - want).abs() / want < 1e-6);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let mut g = Graph::new();
        let bases = StftBases::new(&STFT_SIZES);
        let r = item_leaf(&mut g, &vec![0.0; 256]);
        let t = item_leaf(&mut g, &vec![0.0; 257]);
        let z = g.leaf(Tensor::zeros(&[1, 2]), false);
        assert!(tokenizer_loss(&mut g, &bases, &[r], &[t], z, z, &LossWeights::default()).is_err());
    }
}
