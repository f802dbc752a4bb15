//! Visual+speech fusion: the conditioning unit of the generator.
//!
//! A fusion unit normalizes the incoming feature map, refines it along two
//! parallel paths — a pixel-attention map (where to look) and a speech-driven
//! per-channel modulation (what the caption says) — and blends the two paths
//! with learned per-channel convex weights before a residual add:
//!
//! ```text
//! F'  = BN(F)
//! F'' = F' + fuse(PAM(F'), SMM(F', s))
//! ```
//!
//! The blend (`Wfm`) can be swapped for plain addition or multiplication to
//! reproduce the fusion-method substitution experiments.

use crate::error::{Error, Result};
use crate::nn::{with_prefix, BatchNorm, Conv2d, Dense, Mode, Module};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// How the two fusion branches are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FuseMode {
    Wfm,
    Add,
    Mul,
}

impl std::str::FromStr for FuseMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<FuseMode> {
        match s {
            "wfm" => Ok(FuseMode::Wfm),
            "add" => Ok(FuseMode::Add),
            "mul" => Ok(FuseMode::Mul),
            other => Err(Error::Config(format!(
                "unknown fusion mode '{other}' (expected wfm, add or mul)"
            ))),
        }
    }
}

/// Pixel-attention module: a bottleneck conv stack producing a sigmoid map
/// in (0,1) that reweights every spatial position of the input.
pub struct Pam<T: Scalar = f32> {
    pub reduce: Conv2d<T>, // 3x3, c -> c/r
    pub bn: BatchNorm<T>,
    pub score: Conv2d<T>, // 1x1, c/r -> 1
}

impl<T: Scalar> Pam<T> {
    pub fn new(rng: &mut Rng, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "pixel attention: channels {channels} not divisible by reduction {reduction}"
            )));
        }
        let mid = channels / reduction;
        Ok(Pam {
            reduce: Conv2d::new(rng, channels, mid, 3, 1, 1),
            bn: BatchNorm::new(mid),
            score: Conv2d::new(rng, mid, 1, 1, 1, 0),
        })
    }

    /// The attention map itself: [n, 1, h, w], values strictly in (0, 1).
    pub fn attention_map(&self, f: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let a = self.bn.forward(&self.reduce.forward(f)?, mode)?.relu();
        Ok(self.score.forward(&a)?.sigmoid())
    }

    pub fn forward(&self, f: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(f.mul(&self.attention_map(f, mode)?))
    }
}

impl<T: Scalar> Module<T> for Pam<T> {
    fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut ps = with_prefix("reduce", self.reduce.params());
        ps.extend(with_prefix("bn", self.bn.params()));
        ps.extend(with_prefix("score", self.score.params()));
        ps
    }

    fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        with_prefix("bn", self.bn.buffers())
    }
}

/// Speech-modulation module: two-layer perceptrons map the speech embedding
/// to a per-channel scale and shift applied to the feature map.
pub struct Smm<T: Scalar = f32> {
    pub scale_hidden: Dense<T>, // d -> d
    pub scale_out: Dense<T>,    // d -> c
    pub shift_hidden: Dense<T>, // d -> d
    pub shift_out: Dense<T>,    // d -> c
    channels: usize,
}

impl<T: Scalar> Smm<T> {
    pub fn new(rng: &mut Rng, embed_dim: usize, channels: usize) -> Self {
        Smm {
            scale_hidden: Dense::new(rng, embed_dim, embed_dim),
            scale_out: Dense::new(rng, embed_dim, channels),
            shift_hidden: Dense::new(rng, embed_dim, embed_dim),
            shift_out: Dense::new(rng, embed_dim, channels),
            channels,
        }
    }

    /// Per-sample modulation parameters, each [n, c, 1, 1].
    pub fn modulation(&self, s: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let n = s.shape()[0];
        let wa = self
            .scale_out
            .forward(&self.scale_hidden.forward(s)?.relu())?
            .reshape(&[n, self.channels, 1, 1]);
        let ba = self
            .shift_out
            .forward(&self.shift_hidden.forward(s)?.relu())?
            .reshape(&[n, self.channels, 1, 1]);
        Ok((wa, ba))
    }

    /// f [n, c, h, w], s [n, d] -> f * WA(s) + BA(s).
    pub fn forward(&self, f: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
        if f.shape()[1] != self.channels {
            return Err(Error::Shape {
                op: "speech_modulation",
                detail: format!(
                    "feature map {:?} vs configured channels {}",
                    f.shape(),
                    self.channels
                ),
            });
        }
        let (wa, ba) = self.modulation(s)?;
        Ok(f.mul(&wa).add(&ba))
    }
}

impl<T: Scalar> Module<T> for Smm<T> {
    fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut ps = with_prefix("scale_hidden", self.scale_hidden.params());
        ps.extend(with_prefix("scale_out", self.scale_out.params()));
        ps.extend(with_prefix("shift_hidden", self.shift_hidden.params()));
        ps.extend(with_prefix("shift_out", self.shift_out.params()));
        ps
    }
}

/// Weighted-fusion module: pools the summed branches, runs a bottleneck
/// perceptron pair, and emits a per-channel softmax pair (WF1, WF2) that
/// convexly blends the two branches.
pub struct Wfm<T: Scalar = f32> {
    pub compress: Dense<T>, // c -> c/r
    pub expand: Dense<T>,   // c/r -> 2c, pairs stored channel-major
    channels: usize,
}

impl<T: Scalar> Wfm<T> {
    pub fn new(rng: &mut Rng, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "weighted fusion: channels {channels} not divisible by reduction {reduction}"
            )));
        }
        Ok(Wfm {
            compress: Dense::new(rng, channels, channels / reduction),
            expand: Dense::new(rng, channels / reduction, 2 * channels),
            channels,
        })
    }

    /// The per-channel blend weights, each [n, c, 1, 1], summing to one.
    pub fn weights(&self, mp: &Tensor<T>, ms: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if mp.shape() != ms.shape() {
            return Err(Error::Shape {
                op: "weighted_fusion",
                detail: format!("branch shapes {:?} vs {:?}", mp.shape(), ms.shape()),
            });
        }
        let n = mp.shape()[0];
        let c = self.channels;
        let pooled = mp.add(ms).global_avg_pool(); // [n, c]
        let logits = self
            .expand
            .forward(&self.compress.forward(&pooled)?.gelu())?
            .reshape(&[n, c, 2]);
        let wf = logits.softmax(2);
        let wf1 = wf.narrow(2, 0, 1).reshape(&[n, c, 1, 1]);
        let wf2 = wf.narrow(2, 1, 1).reshape(&[n, c, 1, 1]);
        Ok((wf1, wf2))
    }

    pub fn forward(&self, mp: &Tensor<T>, ms: &Tensor<T>) -> Result<Tensor<T>> {
        let (wf1, wf2) = self.weights(mp, ms)?;
        Ok(wf1.mul(mp).add(&wf2.mul(ms)))
    }
}

impl<T: Scalar> Module<T> for Wfm<T> {
    fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut ps = with_prefix("compress", self.compress.params());
        ps.extend(with_prefix("expand", self.expand.params()));
        ps
    }
}

/// Combine the two branch outputs according to `mode`.
pub fn fuse_variant<T: Scalar>(
    wfm: &Wfm<T>,
    mp: &Tensor<T>,
    ms: &Tensor<T>,
    mode: FuseMode,
) -> Result<Tensor<T>> {
    if mp.shape() != ms.shape() {
        return Err(Error::Shape {
            op: "fuse_variant",
            detail: format!("branch shapes {:?} vs {:?}", mp.shape(), ms.shape()),
        });
    }
    match mode {
        FuseMode::Add => Ok(mp.add(ms)),
        FuseMode::Mul => Ok(mp.mul(ms)),
        FuseMode::Wfm => wfm.forward(mp, ms),
    }
}

/// The full fusion unit: batchnorm, parallel PAM/SMM, fused blend, residual.
pub struct Vsfm<T: Scalar = f32> {
    pub bn: BatchNorm<T>,
    pub pam: Pam<T>,
    pub smm: Smm<T>,
    pub wfm: Wfm<T>,
}

impl<T: Scalar> Vsfm<T> {
    pub fn new(
        rng: &mut Rng,
        channels: usize,
        embed_dim: usize,
        pam_reduction: usize,
        wfm_reduction: usize,
    ) -> Result<Self> {
        Ok(Vsfm {
            bn: BatchNorm::new(channels),
            pam: Pam::new(rng, channels, pam_reduction)?,
            smm: Smm::new(rng, embed_dim, channels),
            wfm: Wfm::new(rng, channels, wfm_reduction)?,
        })
    }

    /// f [n, c, h, w], s [n, d] -> same shape. The residual adds the
    /// normalized map F', not the raw input.
    pub fn forward(
        &self,
        f: &Tensor<T>,
        s: &Tensor<T>,
        mode: Mode,
        fuse: FuseMode,
    ) -> Result<Tensor<T>> {
        let fp = self.bn.forward(f, mode)?;
        let mp = self.pam.forward(&fp, mode)?;
        let ms = self.smm.forward(&fp, s)?;
        Ok(fp.add(&fuse_variant(&self.wfm, &mp, &ms, fuse)?))
    }
}

impl<T: Scalar> Module<T> for Vsfm<T> {
    fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut ps = with_prefix("bn", self.bn.params());
        ps.extend(with_prefix("pam", self.pam.params()));
        ps.extend(with_prefix("smm", self.smm.params()));
        ps.extend(with_prefix("wfm", self.wfm.params()));
        ps
    }

    fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut bs = with_prefix("bn", self.bn.buffers());
        bs.extend(with_prefix("pam", self.pam.buffers()));
        bs
    }
}
