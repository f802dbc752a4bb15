//! Image generator: a dense stem projecting the latent code to a 4x4 map,
//! a stack of dual-residual fusion blocks that inject the speech embedding
//! at every scale, nearest-neighbor upsampling between blocks, and a tanh
//! output convolution. Pixels live in [-1, 1].

use crate::error::{Error, Result};
use crate::fusion::{FuseMode, Vsfm};
use crate::nn::{with_prefix, Conv2d, Dense, Mode, Module};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Per-block channel multipliers for the full 7-block stack; shorter stacks
/// take the tail so the last block always ends at `base_width`.
const WIDTH_SCHEDULE: [usize; 7] = [8, 8, 8, 8, 4, 2, 1];

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Latent dimension.
    pub z_dim: usize,
    /// Base channel width; the stem emits 8x this many channels.
    pub base_width: usize,
    /// Number of fusion blocks; resolution is 4 * 2^(n_blocks - 1).
    pub n_blocks: usize,
    /// Fusion units per block (1 for the single-module arm, 2 for dual).
    pub block_modules: usize,
    pub fusion_mode: FuseMode,
    /// Output resolution; must equal 4 * 2^(n_blocks - 1).
    pub out_res: usize,
    /// Speech embedding width consumed by the modulation paths.
    pub embed_dim: usize,
    pub pam_reduction: usize,
    pub wfm_reduction: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig::desk()
    }
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        GeneratorConfig {
            z_dim: 100,
            base_width: 16,
            n_blocks: 5,
            block_modules: 2,
            fusion_mode: FuseMode::Wfm,
            out_res: 64,
            embed_dim: 256,
            pam_reduction: 8,
            wfm_reduction: 4,
        }
    }

    pub fn paper() -> Self {
        GeneratorConfig {
            z_dim: 100,
            base_width: 32,
            n_blocks: 7,
            block_modules: 2,
            fusion_mode: FuseMode::Wfm,
            out_res: 256,
            embed_dim: 1024,
            pam_reduction: 8,
            wfm_reduction: 4,
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        WIDTH_SCHEDULE[WIDTH_SCHEDULE.len() - self.n_blocks..]
            .iter()
            .map(|m| m * self.base_width)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.n_blocks > WIDTH_SCHEDULE.len() {
            return Err(Error::Config(format!(
                "n_blocks must be in 1..={}, got {}",
                WIDTH_SCHEDULE.len(),
                self.n_blocks
            )));
        }
        let expect = 4usize << (self.n_blocks - 1);
        if self.out_res != expect {
            return Err(Error::Config(format!(
                "out_res {} inconsistent with n_blocks {} (expected {expect})",
                self.out_res, self.n_blocks
            )));
        }
        if !(1..=2).contains(&self.block_modules) {
            return Err(Error::Config(format!(
                "block_modules must be 1 or 2, got {}",
                self.block_modules
            )));
        }
        for w in self.widths() {
            if w % self.pam_reduction != 0 || w % self.wfm_reduction != 0 {
                return Err(Error::Config(format!(
                    "block width {w} not divisible by reductions {}/{}",
                    self.pam_reduction, self.wfm_reduction
                )));
            }
        }
        Ok(())
    }
}

/// One residual-wrapped fusion unit: skip(h) + conv3x3(relu(vsfm(h, s))).
/// The skip is a 1x1 convolution when channel counts differ, identity
/// otherwise.
struct FusionUnit<T: Scalar> {
    vsfm: Vsfm<T>,
    conv: Conv2d<T>,
    skip: Option<Conv2d<T>>,
}

impl<T: Scalar> FusionUnit<T> {
    fn new(rng: &mut Rng, cfg: &GeneratorConfig, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(FusionUnit {
            vsfm: Vsfm::new(rng, in_ch, cfg.embed_dim, cfg.pam_reduction, cfg.wfm_reduction)?,
            conv: Conv2d::new(rng, in_ch, out_ch, 3, 1, 1),
            skip: (in_ch != out_ch).then(|| Conv2d::new(rng, in_ch, out_ch, 1, 1, 0)),
        })
    }

    fn forward(
        &self,
        h: &Tensor<T>,
        s: &Tensor<T>,
        mode: Mode,
        fuse: FuseMode,
    ) -> Result<Tensor<T>> {
        let branch = self
            .conv
            .forward(&self.vsfm.forward(h, s, mode, fuse)?.relu())?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(h)?,
            None => h.clone(),
        };
        Ok(skip.add(&branch))
    }
}

impl<T: Scalar> Module<T> for FusionUnit<T> {
    fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut ps = with_prefix("vsfm", self.vsfm.params());
        ps.extend(with_prefix("conv", self.conv.params()));
        if let Some(skip) = &self.skip {
            ps.extend(with_prefix("skip", skip.params()));
        }
        ps
    }

    fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        with_prefix("vsfm", self.vsfm.buffers())
    }
}

/// A block of one or two residual fusion units. The first unit handles any
/// channel transition; later units keep the width.
struct DualResidualBlock<T: Scalar> {
    units: Vec<FusionUnit<T>>,
}

impl<T: Scalar> DualResidualBlock<T> {
    fn new(rng: &mut Rng, cfg: &GeneratorConfig, in_ch: usize, out_ch: usize) -> Result<Self> {
        let mut units = vec![FusionUnit::new(rng, cfg, in_ch, out_ch)?];
        if cfg.block_modules == 2 {
            units.push(FusionUnit::new(rng, cfg, out_ch, out_ch)?);
        }
        Ok(DualResidualBlock { units })
    }

    fn forward(
        &self,
        h: &Tensor<T>,
        s: &Tensor<T>,
        mode: Mode,
        fuse: FuseMode,
    ) -> Result<Tensor<T>> {
        let mut h = h.clone();
        for unit in &self.units {
            h = unit.forward(&h, s, mode, fuse)?;
        }
        Ok(h)
    }
}

impl<T: Scalar> Module<T> for DualResidualBlock<T> {
    fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut ps = Vec::new();
        for (i, u) in self.units.iter().enumerate() {
            ps.extend(with_prefix(&format!("unit{i}"), u.params()));
        }
        ps
    }

    fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut bs = Vec::new();
        for (i, u) in self.units.iter().enumerate() {
            bs.extend(with_prefix(&format!("unit{i}"), u.buffers()));
        }
        bs
    }
}

pub struct Generator<T: Scalar = f32> {
    pub cfg: GeneratorConfig,
    stem: Dense<T>,
    blocks: Vec<DualResidualBlock<T>>,
    out_conv: Conv2d<T>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(rng: &mut Rng, cfg: GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let widths = cfg.widths();
        let stem_ch = 8 * cfg.base_width;
        let stem = Dense::new(rng, cfg.z_dim, stem_ch * 4 * 4);
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        let mut in_ch = stem_ch;
        for &w in &widths {
            blocks.push(DualResidualBlock::new(rng, &cfg, in_ch, w)?);
            in_ch = w;
        }
        let out_conv = Conv2d::new(rng, in_ch, 3, 3, 1, 1);
        Ok(Generator {
            cfg,
            stem,
            blocks,
            out_conv,
        })
    }

    /// Project the latent code to the initial [n, 8*base_width, 4, 4] map.
    pub fn initial_projection(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let n = z.shape()[0];
        let ch = 8 * self.cfg.base_width;
        Ok(self.stem.forward(z)?.reshape(&[n, ch, 4, 4]))
    }

    /// z [n, z_dim], s [n, embed_dim] -> images [n, 3, out_res, out_res]
    /// in [-1, 1]. The first block sees the 4x4 stem directly; each later
    /// block is preceded by exactly one 2x upsample.
    pub fn forward(&self, z: &Tensor<T>, s: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let h = self.hidden_states(z, s, mode)?.pop().expect("blocks");
        Ok(self.out_conv.forward(&h)?.tanh())
    }

    /// All per-block outputs, last one included (before the output conv).
    pub fn hidden_states(
        &self,
        z: &Tensor<T>,
        s: &Tensor<T>,
        mode: Mode,
    ) -> Result<Vec<Tensor<T>>> {
        if s.shape().last() != Some(&self.cfg.embed_dim) {
            return Err(Error::Shape {
                op: "generate",
                detail: format!(
                    "speech embedding {:?} vs expected width {}",
                    s.shape(),
                    self.cfg.embed_dim
                ),
            });
        }
        let mut h = self.initial_projection(z)?;
        let mut states = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                h = h.upsample_nearest(2);
            }
            h = block.forward(&h, s, mode, self.cfg.fusion_mode)?;
            states.push(h.clone());
        }
        Ok(states)
    }
}

impl<T: Scalar> Module<T> for Generator<T> {
    fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut ps = with_prefix("stem", self.stem.params());
        for (i, b) in self.blocks.iter().enumerate() {
            ps.extend(with_prefix(&format!("block{i}"), b.params()));
        }
        ps.extend(with_prefix("out_conv", self.out_conv.params()));
        ps
    }

    fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        let mut bs = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            bs.extend(with_prefix(&format!("block{i}"), b.buffers()));
        }
        bs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> GeneratorConfig {
        GeneratorConfig {
            z_dim: 6,
            base_width: 4,
            n_blocks: 2,
            block_modules: 2,
            fusion_mode: FuseMode::Wfm,
            out_res: 8,
            embed_dim: 5,
            pam_reduction: 2,
            wfm_reduction: 2,
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = GeneratorConfig::desk();
        cfg.validate().unwrap();
        assert_eq!(cfg.widths(), vec![128, 128, 64, 32, 16]);
        cfg.out_res = 32;
        assert!(cfg.validate().is_err());
        cfg.out_res = 64;
        cfg.block_modules = 3;
        assert!(cfg.validate().is_err());

        let paper = GeneratorConfig::paper();
        paper.validate().unwrap();
        assert_eq!(paper.out_res, 256);
        assert_eq!(paper.widths(), vec![256, 256, 256, 256, 128, 64, 32]);
    }

    #[test]
    fn initial_projection_shape_and_zero_case() {
        let mut rng = Rng::seed_from(1);
        let mut cfg = GeneratorConfig::desk();
        cfg.z_dim = 100;
        cfg.base_width = 32;
        cfg.embed_dim = 8;
        // widths for base 32 at n=5: [256, 256, 128, 64, 32]; reductions ok
        let gen = Generator::<f64>::new(&mut rng, cfg).unwrap();
        let z = Tensor::randn(&mut rng, &[2, 100]);
        let h0 = gen.initial_projection(&z).unwrap();
        assert_eq!(h0.shape(), &[2, 256, 4, 4]);

        gen.stem.weight.with_data_mut(|d| d.iter_mut().for_each(|v| *v = 0.0));
        let h0 = gen.initial_projection(&z).unwrap();
        assert!(h0.to_vec().iter().all(|&v| v == 0.0));

        let again = gen.initial_projection(&z).unwrap();
        assert!(h0
            .to_vec()
            .iter()
            .zip(again.to_vec())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn resolution_schedule() {
        for (n, res) in [(2usize, 8usize), (3, 16), (5, 64), (7, 256)] {
            let cfg = GeneratorConfig {
                n_blocks: n,
                out_res: res,
                ..tiny_cfg()
            };
            assert!(cfg.validate().is_ok(), "n={n} res={res}");
        }
    }

    #[test]
    fn zero_branch_units_preserve_input() {
        // With all unit convs zeroed and equal channels, each unit reduces
        // to its identity skip.
        let mut rng = Rng::seed_from(2);
        let cfg = tiny_cfg();
        let unit = FusionUnit::<f64>::new(&mut rng, &cfg, 6, 6).unwrap();
        unit.conv.kernel.with_data_mut(|d| d.iter_mut().for_each(|v| *v = 0.0));
        unit.conv.bias.with_data_mut(|d| d.iter_mut().for_each(|v| *v = 0.0));
        assert!(unit.skip.is_none());
        let h = Tensor::randn(&mut rng, &[2, 6, 4, 4]);
        let s = Tensor::randn(&mut rng, &[2, 5]);
        let out = unit.forward(&h, &s, Mode::Eval, FuseMode::Wfm).unwrap();
        assert_eq!(out.to_vec(), h.to_vec());
    }

    #[test]
    fn single_module_arm_runs_one_unit() {
        let mut rng = Rng::seed_from(3);
        let mut cfg = tiny_cfg();
        cfg.block_modules = 1;
        let block = DualResidualBlock::<f64>::new(&mut rng, &cfg, 6, 6).unwrap();
        assert_eq!(block.units.len(), 1);
        cfg.block_modules = 2;
        let block2 = DualResidualBlock::<f64>::new(&mut rng, &cfg, 6, 6).unwrap();
        assert_eq!(block2.units.len(), 2);
    }

    #[test]
    fn generate_shape_range_and_determinism() {
        let mut rng = Rng::seed_from(4);
        let cfg = tiny_cfg();
        let gen = Generator::<f64>::new(&mut rng, cfg).unwrap();
        let z = Tensor::randn(&mut rng, &[2, 6]);
        let s = Tensor::randn(&mut rng, &[2, 5]);
        let img = gen.forward(&z, &s, Mode::Eval).unwrap();
        assert_eq!(img.shape(), &[2, 3, 8, 8]);
        assert!(img.to_vec().iter().all(|&v| (-1.0..=1.0).contains(&v)));

        let again = gen.forward(&z, &s, Mode::Eval).unwrap();
        assert!(img
            .to_vec()
            .iter()
            .zip(again.to_vec())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn different_latents_give_different_images() {
        let mut rng = Rng::seed_from(5);
        let gen = Generator::<f64>::new(&mut rng, tiny_cfg()).unwrap();
        let s = Tensor::randn(&mut rng, &[1, 5]);
        let mut total = 0.0;
        for _ in 0..8 {
            let z1 = Tensor::randn(&mut rng, &[1, 6]);
            let z2 = Tensor::randn(&mut rng, &[1, 6]);
            let a = gen.forward(&z1, &s, Mode::Eval).unwrap().to_vec();
            let b = gen.forward(&z2, &s, Mode::Eval).unwrap().to_vec();
            total += a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / a.len() as f64;
        }
        assert!(total / 8.0 > 0.0, "latent code ignored");
    }

    #[test]
    fn speech_reaches_every_block() {
        let mut rng = Rng::seed_from(6);
        let mut cfg = tiny_cfg();
        cfg.n_blocks = 3;
        cfg.out_res = 16;
        let gen = Generator::<f64>::new(&mut rng, cfg).unwrap();
        let z = Tensor::randn(&mut rng, &[1, 6]);
        let s = Tensor::randn(&mut rng, &[1, 5]);
        let zeroed = Tensor::zeros(&[1, 5]);
        let with_s = gen.hidden_states(&z, &s, Mode::Eval).unwrap();
        let without = gen.hidden_states(&z, &zeroed, Mode::Eval).unwrap();
        for (i, (a, b)) in with_s.iter().zip(&without).enumerate() {
            let diff: f64 = a
                .to_vec()
                .iter()
                .zip(b.to_vec())
                .map(|(x, y)| (x - y).abs())
                .sum();
            assert!(diff > 1e-9, "block {i} ignores the speech embedding");
        }
    }

    #[test]
    fn gradients_reach_latent_speech_and_all_params() {
        let mut rng = Rng::seed_from(7);
        let gen = Generator::<f64>::new(&mut rng, tiny_cfg()).unwrap();
        let z = Tensor::randn(&mut rng, &[2, 6]).requires_grad();
        let s = Tensor::randn(&mut rng, &[2, 5]).requires_grad();
        let img = gen.forward(&z, &s, Mode::Train).unwrap();
        img.mul(&img).sum_all().backward().unwrap();
        assert!(z.grad_vec().unwrap().iter().any(|&v| v != 0.0));
        assert!(s.grad_vec().unwrap().iter().any(|&v| v != 0.0));
        for (name, p) in gen.params() {
            let g = p.grad_vec().unwrap_or_default();
            assert!(g.iter().any(|&v| v != 0.0), "zero grad in {name}");
        }
    }
}
