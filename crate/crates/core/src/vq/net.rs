//! Convolutional encoder/decoder pair for one band's tokenizer.
//!
//! Encoder: stride-2 conv blocks with GELU, then a dense projection to the
//! latent. Decoder mirrors it with stride-2 transposed convolutions. The
//! default geometry maps a 128-sample token to a single 32-dim latent and
//! back.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::VqError;
use crate::engine::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerNetConfig {
    pub token_len: usize,
    pub latent_dim: usize,
    /// Output channels of each stride-2 encoder block (input is 1 channel).
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
}

impl Default for TokenizerNetConfig {
    fn default() -> Self {
        TokenizerNetConfig {
            token_len: super::TOKEN_LEN,
            latent_dim: 32,
            conv_channels: vec![32, 64, 64, 64, 64],
            kernel: 5,
        }
    }
}

impl TokenizerNetConfig {
    pub fn blocks(&self) -> usize {
        self.conv_channels.len()
    }

    /// Temporal length after all stride-2 blocks.
    pub fn bottleneck_len(&self) -> usize {
        self.token_len >> self.blocks()
    }

    pub fn flat_len(&self) -> usize {
        self.conv_channels.last().copied().unwrap_or(0) * self.bottleneck_len()
    }

    fn validate(&self) -> Result<(), VqError> {
        let blocks = self.blocks();
        if blocks == 0 || self.token_len % (1 << blocks) != 0 {
            return Err(VqError::BadDownsampling {
                token_len: self.token_len,
                blocks,
            });
        }
        Ok(())
    }
}

/// Tokenizer parameters. Encoder conv weights are `(C_out, C_in, K)`;
/// decoder transposed-conv weights are `(C_in, C_out, 4)` with stride 2 and
/// padding 1 so each block exactly doubles the length.
#[derive(Debug, Clone)]
pub struct TokenizerNet<F: Scalar> {
    pub cfg: TokenizerNetConfig,
    pub enc_w: Vec<Tensor<F>>,
    pub enc_b: Vec<Tensor<F>>,
    pub enc_fc_w: Tensor<F>,
    pub enc_fc_b: Tensor<F>,
    pub dec_fc_w: Tensor<F>,
    pub dec_fc_b: Tensor<F>,
    pub dec_w: Vec<Tensor<F>>,
    pub dec_b: Vec<Tensor<F>>,
}

/// Graph handles for one insertion of the parameters.
pub struct TokenizerNetVars {
    pub enc_w: Vec<Var>,
    pub enc_b: Vec<Var>,
    pub enc_fc_w: Var,
    pub enc_fc_b: Var,
    pub dec_fc_w: Var,
    pub dec_fc_b: Var,
    pub dec_w: Vec<Var>,
    pub dec_b: Vec<Var>,
}

const DEC_KERNEL: usize = 4;

impl<F: Scalar> TokenizerNet<F> {
    pub fn init<R: Rng>(rng: &mut R, cfg: &TokenizerNetConfig) -> Result<Self, VqError>
    where
        StandardNormal: Distribution<F>,
    {
        cfg.validate()?;
        let mut enc_w = Vec::new();
        let mut enc_b = Vec::new();
        let mut c_in = 1usize;
        for &c_out in &cfg.conv_channels {
            let std = (2.0 / (c_in * cfg.kernel) as f64).sqrt();
            enc_w.push(Tensor::randn(rng, &[c_out, c_in, cfg.kernel], std));
            enc_b.push(Tensor::zeros(&[c_out]));
            c_in = c_out;
        }
        let flat = cfg.flat_len();
        let enc_fc_w = Tensor::randn(rng, &[flat, cfg.latent_dim], (2.0 / flat as f64).sqrt());
        let enc_fc_b = Tensor::zeros(&[cfg.latent_dim]);
        let dec_fc_w = Tensor::randn(
            rng,
            &[cfg.latent_dim, flat],
            (2.0 / cfg.latent_dim as f64).sqrt(),
        );
        let dec_fc_b = Tensor::zeros(&[flat]);
        let mut dec_w = Vec::new();
        let mut dec_b = Vec::new();
        let mut chans: Vec<usize> = cfg.conv_channels.clone();
        chans.reverse(); // e.g. 64,64,64,64,32
        chans.push(1);
        for win in chans.windows(2) {
            let (ci, co) = (win[0], win[1]);
            let std = (2.0 / (ci * DEC_KERNEL) as f64).sqrt();
            dec_w.push(Tensor::randn(rng, &[ci, co, DEC_KERNEL], std));
            dec_b.push(Tensor::zeros(&[co]));
        }
        Ok(TokenizerNet {
            cfg: cfg.clone(),
            enc_w,
            enc_b,
            enc_fc_w,
            enc_fc_b,
            dec_fc_w,
            dec_fc_b,
            dec_w,
            dec_b,
        })
    }

    /// Named parameter views, in the fixed order shared with
    /// [`TokenizerNet::insert`] and [`TokenizerNetVars::ordered`].
    pub fn params(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        for (i, (w, b)) in self.enc_w.iter().zip(&self.enc_b).enumerate() {
            out.push((format!("enc.conv{i}.w"), w));
            out.push((format!("enc.conv{i}.b"), b));
        }
        out.push(("enc.fc.w".to_string(), &self.enc_fc_w));
        out.push(("enc.fc.b".to_string(), &self.enc_fc_b));
        out.push(("dec.fc.w".to_string(), &self.dec_fc_w));
        out.push(("dec.fc.b".to_string(), &self.dec_fc_b));
        for (i, (w, b)) in self.dec_w.iter().zip(&self.dec_b).enumerate() {
            out.push((format!("dec.conv{i}.w"), w));
            out.push((format!("dec.conv{i}.b"), b));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out: Vec<(String, &mut Tensor<F>)> = Vec::new();
        for (i, (w, b)) in self.enc_w.iter_mut().zip(self.enc_b.iter_mut()).enumerate() {
            out.push((format!("enc.conv{i}.w"), w));
            out.push((format!("enc.conv{i}.b"), b));
        }
        out.push(("enc.fc.w".to_string(), &mut self.enc_fc_w));
        out.push(("enc.fc.b".to_string(), &mut self.enc_fc_b));
        out.push(("dec.fc.w".to_string(), &mut self.dec_fc_w));
        out.push(("dec.fc.b".to_string(), &mut self.dec_fc_b));
        for (i, (w, b)) in self.dec_w.iter_mut().zip(self.dec_b.iter_mut()).enumerate() {
            out.push((format!("dec.conv{i}.w"), w));
            out.push((format!("dec.conv{i}.b"), b));
        }
        out
    }

    /// Insert every parameter as a graph leaf.
    pub fn insert(&self, g: &mut Graph<F>, trainable: bool) -> TokenizerNetVars {
        TokenizerNetVars {
            enc_w: self.enc_w.iter().map(|t| g.leaf(t.clone(), trainable)).collect(),
            enc_b: self.enc_b.iter().map(|t| g.leaf(t.clone(), trainable)).collect(),
            enc_fc_w: g.leaf(self.enc_fc_w.clone(), trainable),
            enc_fc_b: g.leaf(self.enc_fc_b.clone(), trainable),
            dec_fc_w: g.leaf(self.dec_fc_w.clone(), trainable),
            dec_fc_b: g.leaf(self.dec_fc_b.clone(), trainable),
            dec_w: self.dec_w.iter().map(|t| g.leaf(t.clone(), trainable)).collect(),
            dec_b: self.dec_b.iter().map(|t| g.leaf(t.clone(), trainable)).collect(),
        }
    }

    /// Encode a batch of normalized tokens `(B, 1, L)` to latents `(B, D)`.
    pub fn encode(
        &self,
        g: &mut Graph<F>,
        vars: &TokenizerNetVars,
        x: Var,
    ) -> Result<Var, VqError> {
        let pad = self.cfg.kernel / 2;
        let mut h = x;
        for (w, b) in vars.enc_w.iter().zip(&vars.enc_b) {
            h = g.conv1d(h, *w, Some(*b), 2, pad)?;
            h = g.gelu(h);
        }
        let bsz = g.value(h).shape()[0];
        let flat = self.cfg.flat_len();
        let h = g.reshape(h, &[bsz, flat])?;
        let h = g.matmul(h, vars.enc_fc_w)?;
        Ok(g.add_bias(h, vars.enc_fc_b)?)
    }

    /// Decode latents `(B, D)` back to waveforms `(B, 1, L)`.
    pub fn decode(
        &self,
        g: &mut Graph<F>,
        vars: &TokenizerNetVars,
        z: Var,
    ) -> Result<Var, VqError> {
        let bsz = g.value(z).shape()[0];
        let h = g.matmul(z, vars.dec_fc_w)?;
        let h = g.add_bias(h, vars.dec_fc_b)?;
        let h = g.gelu(h);
        let c_last = *self.cfg.conv_channels.last().unwrap();
        let mut h = g.reshape(h, &[bsz, c_last, self.cfg.bottleneck_len()])?;
        let n = vars.dec_w.len();
        for (i, (w, b)) in vars.dec_w.iter().zip(&vars.dec_b).enumerate() {
            h = g.conv_transpose1d(h, *w, Some(*b), 2, 1)?;
            if i + 1 < n {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }
}

impl TokenizerNetVars {
    /// Vars in the same order as [`TokenizerNet::params`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (w, b) in self.enc_w.iter().zip(&self.enc_b) {
            out.push(*w);
            out.push(*b);
        }
        out.push(self.enc_fc_w);
        out.push(self.enc_fc_b);
        out.push(self.dec_fc_w);
        out.push(self.dec_fc_b);
        for (w, b) in self.dec_w.iter().zip(&self.dec_b) {
            out.push(*w);
            out.push(*b);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_geometry_maps_128_to_latent_and_back() {
        let cfg = TokenizerNetConfig::default();
        assert_eq!(cfg.bottleneck_len(), 4);
        assert_eq!(cfg.flat_len(), 256);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = TokenizerNet::<f32>::init(&mut rng, &cfg).unwrap();
        let mut g = Graph::new();
        let vars = net.insert(&mut g, false);
        let x = g.leaf(Tensor::zeros(&[3, 1, 128]), false);
        let z = net.encode(&mut g, &vars, x).unwrap();
        assert_eq!(g.value(z).shape(), &[3, 32]);
        let y = net.decode(&mut g, &vars, z).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 1, 128]);
    }

    #[test]
    fn params_and_vars_share_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = TokenizerNet::<f32>::init(&mut rng, &TokenizerNetConfig::default()).unwrap();
        let mut g = Graph::new();
        let vars = net.insert(&mut g, true);
        let names = net.params();
        let ordered = vars.ordered();
        assert_eq!(names.len(), ordered.len());
        for ((_, t), v) in names.iter().zip(&ordered) {
            assert_eq!(t.shape(), g.value(*v).shape());
        }
    }

    #[test]
    fn rejects_token_len_not_divisible_by_stride_product() {
        let cfg = TokenizerNetConfig {
            token_len: 100,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(TokenizerNet::<f32>::init(&mut rng, &cfg).is_err());
    }
}
