//! Speech encoder: maps a log-mel feature sequence to a fixed global
//! embedding.
//!
//! Pipeline: two strided 1-D conv blocks (conv + batchnorm + ReLU), two
//! bidirectional GRU layers, then additive self-attention pooling over time.
//! The bidirectional hidden size is `embed_dim / 2`, so the concatenated
//! states already have the embedding width and no extra projection is
//! needed.

use crate::error::{Error, Result};
use crate::nn::{with_prefix, BatchNorm, BiGru, Conv1d, Dense, Mode, Module};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// A single variable-length feature sequence: frames [t, n_mels].
#[derive(Debug, Clone)]
pub struct SpeechFeatures {
    pub frames: Vec<f32>,
    pub t: usize,
    pub n_mels: usize,
}

impl SpeechFeatures {
    pub fn new(frames: Vec<f32>, t: usize, n_mels: usize) -> Result<SpeechFeatures> {
        if frames.len() != t * n_mels {
            return Err(Error::Contract(format!(
                "feature buffer holds {} values, expected {t} x {n_mels}",
                frames.len()
            )));
        }
        if t < 4 {
            return Err(Error::Contract(format!(
                "speech sequence too short: {t} frames, need at least 4"
            )));
        }
        if !frames.iter().all(|v| v.is_finite()) {
            return Err(Error::Contract("non-finite speech feature values".into()));
        }
        Ok(SpeechFeatures { frames, t, n_mels })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeechEncoderConfig {
    pub n_mels: usize,
    pub conv_channels: (usize, usize),
    /// Global embedding width D; the GRU hidden size is D/2 per direction.
    pub embed_dim: usize,
    pub attn_dim: usize,
}

impl Default for SpeechEncoderConfig {
    fn default() -> Self {
        SpeechEncoderConfig::desk()
    }
}

impl SpeechEncoderConfig {
    /// Desk-scale defaults (D = 256). The full-scale profile uses D = 1024.
    pub fn desk() -> Self {
        SpeechEncoderConfig {
            n_mels: 40,
            conv_channels: (64, 128),
            embed_dim: 256,
            attn_dim: 128,
        }
    }

    pub fn paper() -> Self {
        SpeechEncoderConfig {
            n_mels: 40,
            conv_channels: (64, 128),
            embed_dim: 1024,
            attn_dim: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "embed_dim must be even (bidirectional split), got {}",
                self.embed_dim
            )));
        }
        if self.n_mels == 0 || self.attn_dim == 0 {
            return Err(Error::Config("zero speech encoder width".into()));
        }
        Ok(())
    }
}

/// Additive self-attention pooling: softmax over time of v . tanh(W h_t + b),
/// output is the score-weighted state sum.
pub struct AttentionPool<T: Scalar = f32> {
    pub proj: Dense<T>,
    pub score: Dense<T>, // [1, attn_dim], bias unused but harmless
}

impl<T: Scalar> AttentionPool<T> {
    pub fn new(rng: &mut Rng, dim: usize, attn_dim: usize) -> Self {
        AttentionPool {
            proj: Dense::new(rng, dim, attn_dim),
            score: Dense::new(rng, attn_dim, 1),
        }
    }

    /// h [n, t, d] -> (pooled [n, d], scores [n, t]).
    pub fn forward(&self, h: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (n, t, d) = (h.shape()[0], h.shape()[1], h.shape()[2]);
        let logits = self
            .score
            .forward(&self.proj.forward(h)?.tanh())?
            .reshape(&[n, t]);
        let scores = logits.softmax(1);
        let pooled = h.mul(&scores.reshape(&[n, t, 1])).sum_axes(&[1], false);
        Ok((pooled.reshape(&[n, d]), scores))
    }
}

impl<T: Scalar> Module<T> for AttentionPool<T> {
    fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut ps = with_prefix("proj", self.proj.params());
        ps.extend(with_prefix("score", self.score.params()));
        ps
    }
}

pub struct SpeechEncoder<T: Scalar = f32> {
    pub cfg: SpeechEncoderConfig,
    conv0: Conv1d<T>,
    bn0: BatchNorm<T>,
    conv1: Conv1d<T>,
    bn1: BatchNorm<T>,
    gru0: BiGru<T>,
    gru1: BiGru<T>,
    pool: AttentionPool<T>,
}

impl<T: Scalar> SpeechEncoder<T> {
    pub fn new(rng: &mut Rng, cfg: SpeechEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let (c0, c1) = cfg.conv_channels;
        let hidden = cfg.embed_dim / 2;
        Ok(SpeechEncoder {
            cfg,
            conv0: Conv1d::new(rng, cfg.n_mels, c0, 6, 2, 2),
            bn0: BatchNorm::new(c0),
            conv1: Conv1d::new(rng, c0, c1, 6, 2, 2),
            bn1: BatchNorm::new(c1),
            gru0: BiGru::new(rng, c1, hidden),
            gru1: BiGru::new(rng, 2 * hidden, hidden),
            pool: AttentionPool::new(rng, cfg.embed_dim, cfg.attn_dim),
        })
    }

    /// Encode a batch of equal-length sequences: frames [n, t, n_mels] ->
    /// embeddings [n, embed_dim]. Sequences shorter than 4 frames are
    /// rejected; lengths are zero-padded up to a multiple of 4 so both
    /// stride-2 blocks divide exactly.
    pub fn forward(&self, frames: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let shape = frames.shape().to_vec();
        if shape.len() != 3 || shape[2] != self.cfg.n_mels {
            return Err(Error::Shape {
                op: "encode_speech",
                detail: format!("expected [n, t, {}], got {shape:?}", self.cfg.n_mels),
            });
        }
        let (n, t) = (shape[0], shape[1]);
        if t < 4 {
            return Err(Error::Contract(format!(
                "speech sequence too short: {t} frames, need at least 4"
            )));
        }
        let padded_t = t.next_multiple_of(4);
        let x = if padded_t == t {
            frames.clone()
        } else {
            let pad = Tensor::zeros(&[n, padded_t - t, self.cfg.n_mels]);
            Tensor::concat(&[frames.clone(), pad], 1)
        };
        let x = x.transpose_last2(); // [n, mels, t]
        let x = self.bn0.forward(&self.conv0.forward(&x)?, mode)?.relu();
        let x = self.bn1.forward(&self.conv1.forward(&x)?, mode)?.relu();
        let seq = x.transpose_last2(); // [n, t/4, c1]
        let h = self.gru1.run(&self.gru0.run(&seq));
        let (pooled, _) = self.pool.forward(&h)?;
        Ok(pooled)
    }

    /// Convenience wrapper for one sample.
    pub fn encode(&self, f: &SpeechFeatures, mode: Mode) -> Result<Tensor<T>> {
        let frames: Vec<T> = f.frames.iter().map(|&v| T::from_f64(v as f64)).collect();
        let x = Tensor::from_vec(frames, &[1, f.t, f.n_mels]);
        Ok(self.forward(&x, mode)?.reshape(&[self.cfg.embed_dim]))
    }

    pub fn pool(&self) -> &AttentionPool<T> {
        &self.pool
    }
}

impl<T: Scalar> Module<T> for SpeechEncoder<T> {
    fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut ps = with_prefix("conv0", self.conv0.params());
        ps.extend(with_prefix("bn0", self.bn0.params()));
        ps.extend(with_prefix("conv1", self.conv1.params()));
        ps.extend(with_prefix("bn1", self.bn1.params()));
        ps.extend(with_prefix("gru0", self.gru0.params()));
        ps.extend(with_prefix("gru1", self.gru1.params()));
        ps.extend(with_prefix("pool", self.pool.params()));
        ps
    }

    fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut bs = with_prefix("bn0", self.bn0.buffers());
        bs.extend(with_prefix("bn1", self.bn1.buffers()));
        bs
    }
}
