//! Training objectives: hinge adversarial losses, the matching-aware
//! zero-centered gradient penalty, and the global speech-image matching
//! loss.
//!
//! The gradient penalty differentiates the discriminator's score w.r.t. the
//! *real* image and its matching embedding, builds the penalty from those
//! gradients on the tape, and lets the optimizer differentiate through it —
//! the substrate's second-order support is what makes this a single
//! expression.

use crate::discriminator::Discriminator;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Gradient-penalty weight.
    pub lambda_magp: f64,
    /// Gradient-penalty exponent p applied to the summed norms.
    pub p_magp: f64,
    /// Weight of the matching loss in the generator objective.
    pub lambda_damsm: f64,
    /// Softmax temperature of the matching loss.
    pub gamma_damsm: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_magp: 2.0,
            p_magp: 6.0,
            lambda_damsm: 5.0,
            gamma_damsm: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_magp < 0.0 || self.lambda_damsm < 0.0 || self.gamma_damsm < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.p_magp < 1.0 {
            return Err(Error::Config(format!(
                "gradient penalty exponent must be >= 1, got {}",
                self.p_magp
            )));
        }
        Ok(())
    }
}

/// Discriminator hinge loss:
/// mean(max(0, 1 - real)) + mean(max(0, 1 + fake))/2 + mean(max(0, 1 + mismatch))/2.
pub fn hinge_d_loss<T: Scalar>(
    d_real: &Tensor<T>,
    d_fake: &Tensor<T>,
    d_mismatch: &Tensor<T>,
) -> Tensor<T> {
    let half = T::from_f64(0.5);
    let real = d_real.neg().add_scalar(T::ONE).relu().mean_all();
    let fake = d_fake.add_scalar(T::ONE).relu().mean_all().mul_scalar(half);
    let mis = d_mismatch
        .add_scalar(T::ONE)
        .relu()
        .mean_all()
        .mul_scalar(half);
    real.add(&fake).add(&mis)
}

/// Generator hinge loss: mean(-fake score).
pub fn hinge_g_loss<T: Scalar>(d_fake: &Tensor<T>) -> Tensor<T> {
    d_fake.neg().mean_all()
}

/// Gradient penalty from already-computed pair scores.
///
/// `scores` must be the discriminator output for exactly (`x`, `s`), with
/// both inputs marked `requires_grad`; the per-sample penalty is
/// (||grad_x D||_2 + ||grad_s D||_2)^p, averaged and scaled by lambda.
pub fn magp_penalty<T: Scalar>(
    scores: &Tensor<T>,
    x: &Tensor<T>,
    s: &Tensor<T>,
    w: &LossWeights,
) -> Result<Tensor<T>> {
    let total = scores.sum_all();
    let grads = total.grad_wrt(&[x, s], true)?;
    // The tiny bias keeps sqrt differentiable at an exactly-zero gradient
    // (constant discriminator) without moving any asserted value.
    let per_sample_norm = |g: &Tensor<T>| -> Tensor<T> {
        let axes: Vec<usize> = (1..g.shape().len()).collect();
        g.mul(g)
            .sum_axes(&axes, false)
            .add_scalar(T::from_f64(1e-16))
            .sqrt()
    };
    let norm_sum = per_sample_norm(&grads[0]).add(&per_sample_norm(&grads[1]));
    Ok(norm_sum
        .powf_scalar(T::from_f64(w.p_magp))
        .mean_all()
        .mul_scalar(T::from_f64(w.lambda_magp)))
}

/// Gradient penalty on real matched pairs, running its own forward pass.
pub fn magp_loss<T: Scalar>(
    disc: &Discriminator<T>,
    x: &Tensor<T>,
    s: &Tensor<T>,
    w: &LossWeights,
) -> Result<Tensor<T>> {
    let scores = disc.forward(x, s)?;
    magp_penalty(&scores, x, s, w)
}

/// L2-normalize rows of [n, e]. No epsilon: cosine similarity stays exactly
/// invariant under positive row rescaling; rows must be nonzero.
fn normalize_rows<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let norm = x.mul(x).sum_axes(&[1], true).sqrt();
    x.div(&norm)
}

/// Bidirectional cross-entropy matching loss over the cosine similarity
/// matrix of matched (row-aligned) image/speech embedding batches.
///
/// Row i of each matrix is a matched pair; off-diagonal entries act as
/// in-batch negatives in both softmax directions.
pub fn damsm_global_loss<T: Scalar>(
    img_emb: &Tensor<T>,
    sp_emb: &Tensor<T>,
    gamma: f64,
) -> Result<Tensor<T>> {
    if img_emb.shape() != sp_emb.shape() || img_emb.shape().len() != 2 {
        return Err(Error::Shape {
            op: "matching_loss",
            detail: format!("{:?} vs {:?}", img_emb.shape(), sp_emb.shape()),
        });
    }
    let n = img_emb.shape()[0];
    if n < 2 {
        return Err(Error::DegenerateBatch(format!(
            "matching loss needs >= 2 pairs, got {n}"
        )));
    }
    let sim = normalize_rows(img_emb)
        .matmul(&normalize_rows(sp_emb), false, true)
        .mul_scalar(T::from_f64(gamma)); // [n, n]

    let eye = {
        let mut data = vec![T::ZERO; n * n];
        for i in 0..n {
            data[i * n + i] = T::ONE;
        }
        Tensor::from_vec(data, &[n, n])
    };
    let diag_mean = |logp: Tensor<T>| logp.mul(&eye).sum_all().mul_scalar(T::from_f64(1.0 / n as f64));
    let rows = diag_mean(sim.log_softmax(1)).neg();
    let cols = diag_mean(sim.log_softmax(0)).neg();
    Ok(rows.add(&cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discriminator::DiscriminatorConfig;
    use crate::nn::Module;
    use crate::rng::Rng;
    use crate::tensor::gradcheck::max_grad_error;

    fn scalar_batch(vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vals.to_vec(), &[vals.len()])
    }

    #[test]
    fn hinge_d_examples() {
        let z = hinge_d_loss(
            &scalar_batch(&[2.0]),
            &scalar_batch(&[-2.0]),
            &scalar_batch(&[-2.0]),
        );
        assert_eq!(z.item(), 0.0);

        let two = hinge_d_loss(
            &scalar_batch(&[0.0]),
            &scalar_batch(&[0.0]),
            &scalar_batch(&[0.0]),
        );
        assert!((two.item() - 2.0).abs() < 1e-12);

        let mixed = hinge_d_loss(
            &scalar_batch(&[0.5]),
            &scalar_batch(&[0.5]),
            &scalar_batch(&[-3.0]),
        );
        assert!((mixed.item() - 1.25).abs() < 1e-12);
    }

    #[test]
    fn hinge_d_nonnegative_and_zero_iff_margins() {
        let mut rng = Rng::seed_from(1);
        for _ in 0..200 {
            let r: Vec<f64> = (0..4).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let f: Vec<f64> = (0..4).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let m: Vec<f64> = (0..4).map(|_| rng.uniform(-3.0, 3.0)).collect();
            let loss = hinge_d_loss(&scalar_batch(&r), &scalar_batch(&f), &scalar_batch(&m)).item();
            assert!(loss >= 0.0);
            let margins_ok = r.iter().all(|&v| v >= 1.0)
                && f.iter().all(|&v| v <= -1.0)
                && m.iter().all(|&v| v <= -1.0);
            assert_eq!(loss == 0.0, margins_ok, "loss {loss} vs margins {margins_ok}");
        }
    }

    #[test]
    fn hinge_g_examples_and_monotonicity() {
        assert_eq!(hinge_g_loss(&scalar_batch(&[1.0, -1.0])).item(), 0.0);
        assert_eq!(hinge_g_loss(&scalar_batch(&[3.0])).item(), -3.0);
        let lo = hinge_g_loss(&scalar_batch(&[0.1, 0.2])).item();
        let hi = hinge_g_loss(&scalar_batch(&[0.3, 0.4])).item();
        assert!(hi < lo);
    }

    #[test]
    fn magp_constant_discriminator_is_zero() {
        let mut rng = Rng::seed_from(2);
        let cfg = DiscriminatorConfig {
            resolution: 8,
            widths: vec![4],
            embed_dim: 4,
            cond_dim: 3,
        };
        let d = Discriminator::<f64>::new(&mut rng, cfg).unwrap();
        for (_, p) in d.params() {
            p.with_data_mut(|v| v.iter_mut().for_each(|x| *x = 0.0));
        }
        let x = Tensor::randn(&mut rng, &[2, 3, 8, 8]).requires_grad();
        let s = Tensor::randn(&mut rng, &[2, 4]).requires_grad();
        let w = LossWeights::default();
        let loss = magp_loss(&d, &x, &s, &w).unwrap().item();
        assert!(loss.abs() < 1e-5, "constant D gave penalty {loss}");
    }

    #[test]
    fn magp_linear_discriminator_analytic_value_and_scaling() {
        // Score = <w, x> with ||w|| = 1: per-sample term 1^p, loss = lambda.
        let mut rng = Rng::seed_from(3);
        let mut wvec: Vec<f64> = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let norm = wvec.iter().map(|v| v * v).sum::<f64>().sqrt();
        wvec.iter_mut().for_each(|v| *v /= norm);
        let w_t = Tensor::from_vec(wvec, &[1, 12]);

        let weights = LossWeights::default();
        let run = |scale: f64| -> f64 {
            let x = Tensor::<f64>::randn(&mut Rng::seed_from(9), &[3, 12]).requires_grad();
            let s = Tensor::<f64>::randn(&mut Rng::seed_from(10), &[3, 2]).requires_grad();
            let scores = x.matmul(&w_t.mul_scalar(scale), false, true).sum_axes(&[1], false);
            magp_penalty(&scores, &x, &s, &weights).unwrap().item()
        };
        let base = run(1.0);
        assert!(
            (base - weights.lambda_magp).abs() < 1e-6,
            "unit linear D: {base} vs {}",
            weights.lambda_magp
        );
        let doubled = run(2.0);
        let want = weights.lambda_magp * 2f64.powf(weights.p_magp);
        assert!((doubled - want).abs() < 1e-4 * want, "{doubled} vs {want}");
    }

    #[test]
    fn magp_gradient_wrt_discriminator_params_matches_finite_differences() {
        // The optimizer differentiates the penalty w.r.t. D's parameters;
        // this exercises the full second-order path through conv blocks.
        let mut rng = Rng::seed_from(4);
        let cfg = DiscriminatorConfig {
            resolution: 8,
            widths: vec![4],
            embed_dim: 3,
            cond_dim: 2,
        };
        let d0 = Discriminator::<f64>::new(&mut rng, cfg.clone()).unwrap();
        let xv: Vec<f64> = (0..2 * 3 * 64).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let sv: Vec<f64> = (0..2 * 3).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let k0 = d0.blocks[0].down.kernel.to_vec();
        let kshape = d0.blocks[0].down.kernel.shape().to_vec();
        let w = LossWeights {
            lambda_magp: 2.0,
            p_magp: 6.0,
            ..LossWeights::default()
        };
        let err = max_grad_error(&[k0], &[&kshape], |t| {
            let mut rng2 = Rng::seed_from(4);
            let mut d = Discriminator::<f64>::new(&mut rng2, cfg.clone()).unwrap();
            d.blocks[0].down.kernel = t[0].clone();
            let x = Tensor::from_vec(xv.clone(), &[2, 3, 8, 8]).requires_grad();
            let s = Tensor::from_vec(sv.clone(), &[2, 3]).requires_grad();
            magp_loss(&d, &x, &s, &w).unwrap()
        }, 1e-3);
        assert!(err < 1e-3, "magp second-order err {err:.3e}");
    }

    #[test]
    fn magp_requires_tape_participation() {
        let mut rng = Rng::seed_from(5);
        let cfg = DiscriminatorConfig {
            resolution: 8,
            widths: vec![4],
            embed_dim: 4,
            cond_dim: 3,
        };
        let d = Discriminator::<f64>::new(&mut rng, cfg).unwrap();
        let x = Tensor::randn(&mut rng, &[2, 3, 8, 8]); // not marked
        let s = Tensor::randn(&mut rng, &[2, 4]).requires_grad();
        let w = LossWeights::default();
        assert!(matches!(magp_loss(&d, &x, &s, &w), Err(Error::Contract(_))));
    }

    #[test]
    fn damsm_uniform_embeddings_give_2_ln_n() {
        for n in [2usize, 4, 16] {
            let ones = Tensor::<f64>::ones(&[n, 5]);
            let loss = damsm_global_loss(&ones, &ones, 10.0).unwrap().item();
            let want = 2.0 * (n as f64).ln();
            assert!((loss - want).abs() < 1e-9, "n={n}: {loss} vs {want}");
        }
    }

    #[test]
    fn damsm_separable_pairs_saturate_to_zero() {
        // Orthonormal matched pairs and a large temperature.
        let img = Tensor::<f64>::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let sp = img.detach();
        let loss = damsm_global_loss(&img, &sp, 50.0).unwrap().item();
        assert!(loss < 1e-9, "separable loss {loss}");
    }

    #[test]
    fn damsm_breaking_matches_increases_loss() {
        let img = Tensor::<f64>::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let matched = damsm_global_loss(&img, &img.detach(), 10.0).unwrap().item();
        let swapped = Tensor::<f64>::from_vec(vec![0.0, 1.0, 1.0, 0.0], &[2, 2]);
        let broken = damsm_global_loss(&img, &swapped, 10.0).unwrap().item();
        assert!(broken > matched + 1.0, "matched {matched} broken {broken}");
    }

    #[test]
    fn damsm_similarity_invariant_to_row_rescaling() {
        let mut rng = Rng::seed_from(6);
        let img = Tensor::<f64>::randn(&mut rng, &[3, 4]);
        let sp = Tensor::<f64>::randn(&mut rng, &[3, 4]);
        let base = damsm_global_loss(&img, &sp, 10.0).unwrap().item();
        // Rescale one row by a power of two: bit-exact invariance.
        let mut scaled = img.to_vec();
        for v in &mut scaled[4..8] {
            *v *= 4.0;
        }
        let img2 = Tensor::from_vec(scaled, &[3, 4]);
        let re = damsm_global_loss(&img2, &sp, 10.0).unwrap().item();
        assert_eq!(base.to_bits(), re.to_bits());
    }

    #[test]
    fn damsm_rejects_degenerate_batch() {
        let one = Tensor::<f64>::ones(&[1, 4]);
        assert!(matches!(
            damsm_global_loss(&one, &one, 10.0),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = Rng::seed_from(7);
        let r: Vec<f64> = (0..4).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let f: Vec<f64> = (0..4).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let m: Vec<f64> = (0..4).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let err = max_grad_error(&[r, f, m], &[&[4], &[4], &[4]], |t| {
            hinge_d_loss(&t[0], &t[1], &t[2])
        }, 1e-3);
        assert!(err < 1e-3, "hinge_d grad err {err:.3e}");

        let img: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let sp: Vec<f64> = (0..8).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let err = max_grad_error(&[img, sp], &[&[2, 4], &[2, 4]], |t| {
            damsm_global_loss(&t[0], &t[1], 5.0).unwrap()
        }, 1e-3);
        assert!(err < 1e-3, "damsm grad err {err:.3e}");
    }

    #[test]
    fn weights_validation() {
        LossWeights::default().validate().unwrap();
        let bad = LossWeights {
            p_magp: 0.5,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
    }
}
