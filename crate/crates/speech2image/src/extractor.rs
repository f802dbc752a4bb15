//! Image-side networks used outside the GAN pair: a projection head that
//! embeds images into the speech-embedding space for the matching loss and
//! retrieval, and a small corpus-trained classifier that supplies class
//! probabilities and features to the evaluation metrics.
//!
//! Both are batchnorm-free so train/eval behavior differs only via the tape.

use crate::error::Result;
use crate::metrics::FeatureExtractor;
use crate::nn::{with_prefix, Conv2d, Dense, Module};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Strided conv stack + global average pooling + dense projection into the
/// joint embedding space.
pub struct ImageHead<T: Scalar = f32> {
    convs: Vec<Conv2d<T>>,
    proj: Dense<T>,
    pub embed_dim: usize,
}

impl<T: Scalar> ImageHead<T> {
    pub fn new(rng: &mut Rng, embed_dim: usize) -> Self {
        let widths = [16usize, 32, 64];
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for &w in &widths {
            convs.push(Conv2d::new(rng, in_ch, w, 4, 2, 1));
            in_ch = w;
        }
        ImageHead {
            convs,
            proj: Dense::new(rng, in_ch, embed_dim),
            embed_dim,
        }
    }

    /// images [n, 3, r, r] in [-1, 1] -> embeddings [n, embed_dim].
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.leaky_relu(0.2);
        }
        self.proj.forward(&h.global_avg_pool())
    }
}

impl<T: Scalar> Module<T> for ImageHead<T> {
    fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut ps = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            ps.extend(with_prefix(&format!("conv{i}"), c.params()));
        }
        ps.extend(with_prefix("proj", self.proj.params()));
        ps
    }
}

/// Supervised corpus classifier; its pooled features and class posteriors
/// feed the distribution and retrieval metrics.
pub struct Classifier<T: Scalar = f32> {
    convs: Vec<Conv2d<T>>,
    head: Dense<T>,
    pub n_classes: usize,
    pub feat_dim: usize,
}

impl<T: Scalar> Classifier<T> {
    pub fn new(rng: &mut Rng, n_classes: usize) -> Self {
        let widths = [16usize, 32, 64];
        let mut convs = Vec::new();
        let mut in_ch = 3;
        for &w in &widths {
            convs.push(Conv2d::new(rng, in_ch, w, 4, 2, 1));
            in_ch = w;
        }
        Classifier {
            convs,
            head: Dense::new(rng, in_ch, n_classes),
            n_classes,
            feat_dim: in_ch,
        }
    }

    /// images -> (logits [n, k], pooled features [n, feat_dim]).
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.relu();
        }
        let feats = h.global_avg_pool();
        Ok((self.head.forward(&feats)?, feats))
    }
}

impl<T: Scalar> Module<T> for Classifier<T> {
    fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut ps = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            ps.extend(with_prefix(&format!("conv{i}"), c.params()));
        }
        ps.extend(with_prefix("head", self.head.params()));
        ps
    }
}

/// Mean cross-entropy of logits [n, k] against integer labels.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Tensor<T> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    assert_eq!(n, labels.len(), "one label per row");
    let mut mask = vec![T::ZERO; n * k];
    for (i, &l) in labels.iter().enumerate() {
        assert!(l < k, "label {l} out of range {k}");
        mask[i * k + l] = T::ONE;
    }
    let mask = Tensor::from_vec(mask, &[n, k]);
    logits
        .log_softmax(1)
        .mul(&mask)
        .sum_all()
        .mul_scalar(T::from_f64(-1.0 / n as f64))
}

/// FNV-1a over the little-endian bytes of all parameters, in order.
pub fn params_checksum<T: Scalar>(params: &[(String, Tensor<T>)]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    };
    for (name, t) in params {
        eat(name.as_bytes());
        t.with_data(|d| {
            for v in d {
                eat(&v.to_le_bytes_vec());
            }
        });
    }
    hash
}

impl FeatureExtractor for Classifier<f32> {
    fn n_classes(&self) -> usize {
        self.n_classes
    }

    fn feature_dim(&self) -> usize {
        self.feat_dim
    }

    fn extract(&self, images: &Tensor<f32>) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (logits, feats) = crate::tensor::no_grad(|| self.forward(images))?;
        let probs_t = logits.softmax(1);
        let n = images.shape()[0];
        let k = self.n_classes;
        let e = self.feat_dim;
        let pv = probs_t.to_vec();
        let fv = feats.to_vec();
        let probs = (0..n)
            .map(|i| pv[i * k..(i + 1) * k].iter().map(|&x| x as f64).collect())
            .collect();
        let features = (0..n)
            .map(|i| fv[i * e..(i + 1) * e].iter().map(|&x| x as f64).collect())
            .collect();
        Ok((probs, features))
    }

    fn checksum(&self) -> u64 {
        params_checksum(&self.params())
    }
}
