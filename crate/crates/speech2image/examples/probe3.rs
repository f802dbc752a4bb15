use speech2image::discriminator::{Discriminator, DiscriminatorConfig};
use speech2image::losses::{magp_loss, LossWeights};
use speech2image::rng::Rng;
use speech2image::tensor::gradcheck::max_grad_error;
use speech2image::tensor::Tensor;

fn main() {
    let dcfg = DiscriminatorConfig { resolution: 8, widths: vec![4], embed_dim: 3, cond_dim: 2 };
    let mut rng = Rng::seed_from(0xC1);
    let w = LossWeights::default();
    for trial in 0..20 {
        let seed = 0xAC0 + trial as u64;
        let d0 = Discriminator::<f64>::new(&mut Rng::seed_from(seed), dcfg.clone()).unwrap();
        let xv: Vec<f64> = (0..2 * 3 * 64).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let sv: Vec<f64> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let kernel0 = d0.blocks[0].down.kernel.to_vec();
        let kshape = d0.blocks[0].down.kernel.shape().to_vec();
        let err = max_grad_error(&[kernel0], &[&kshape], |t| {
            let mut d = Discriminator::<f64>::new(&mut Rng::seed_from(seed), dcfg.clone()).unwrap();
            d.blocks[0].down.kernel = t[0].clone();
            let x = Tensor::from_vec(xv.clone(), &[2, 3, 8, 8]).requires_grad();
            let s = Tensor::from_vec(sv.clone(), &[2, 3]).requires_grad();
            magp_loss(&d, &x, &s, &w).unwrap()
        }, 1e-3);
        println!("trial {trial}: err {err:.3e}");
    }
}
