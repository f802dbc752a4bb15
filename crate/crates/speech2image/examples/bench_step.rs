//! Per-phase timing of one desk-profile training step.

use speech2image::discriminator::{Discriminator, DiscriminatorConfig};
use speech2image::extractor::ImageHead;
use speech2image::generator::{Generator, GeneratorConfig};
use speech2image::losses::*;
use speech2image::nn::{Mode, Module};
use speech2image::rng::Rng;
use speech2image::tensor::{no_grad, Tensor};
use std::time::Instant;

fn main() {
    let mut rng = Rng::seed_from(1);
    let gen = Generator::<f32>::new(&mut rng, GeneratorConfig::desk()).unwrap();
    let disc = Discriminator::<f32>::new(&mut rng, DiscriminatorConfig::desk()).unwrap();
    let head = ImageHead::<f32>::new(&mut rng, 256);
    let n = 16;
    let z = Tensor::<f32>::randn(&mut rng, &[n, 100]);
    let s = Tensor::<f32>::randn(&mut rng, &[n, 256]);
    let x = Tensor::<f32>::randn(&mut rng, &[n, 3, 64, 64]);
    let w = LossWeights::default();

    let time = |name: &str, f: &mut dyn FnMut()| {
        let t0 = Instant::now();
        f();
        println!("{name}: {:.3} s", t0.elapsed().as_secs_f64());
    };

    time("g_fwd_nograd", &mut || {
        let _ = no_grad(|| gen.forward(&z, &s, Mode::Train)).unwrap();
    });
    let xf = no_grad(|| gen.forward(&z, &s, Mode::Train)).unwrap();

    let xr = x.detach().requires_grad();
    let sr = s.detach().requires_grad();
    let mut d_real_opt = None;
    time("d_fwd_real(+feat)", &mut || {
        let feat = disc.encode_image(&xr).unwrap();
        d_real_opt = Some((disc.score_features(&feat, &sr).unwrap(), feat));
    });
    let (d_real, feat) = d_real_opt.unwrap();
    time("d_fwd_fake+mis", &mut || {
        let _ = disc.forward(&xf, &s).unwrap();
        let _ = disc.score_features(&feat, &s).unwrap();
    });
    let d_fake = disc.forward(&xf, &s).unwrap();
    let d_mis = disc.score_features(&feat, &s).unwrap();

    let mut magp_opt = None;
    time("magp_penalty(build)", &mut || {
        magp_opt = Some(magp_penalty(&d_real, &xr, &sr, &w).unwrap());
    });
    let l_adv = hinge_d_loss(&d_real, &d_fake, &d_mis);
    let l_d = l_adv.add(&magp_opt.unwrap());
    let d_params: Vec<_> = disc.params().into_iter().map(|(_, t)| t).collect();
    let d_refs: Vec<&Tensor<f32>> = d_params.iter().collect();
    time("d_backward(total)", &mut || {
        l_d.backward_wrt(&d_refs).unwrap();
    });

    let mut xh_opt = None;
    time("g_fwd_taped", &mut || {
        xh_opt = Some(gen.forward(&z, &s, Mode::Train).unwrap());
    });
    let xh = xh_opt.unwrap();
    let mut lg_opt = None;
    time("g_losses(d_fwd+head)", &mut || {
        let dfk = disc.forward(&xh, &s).unwrap();
        let emb = head.forward(&xh).unwrap();
        let damsm = damsm_global_loss(&emb, &s, 10.0).unwrap();
        lg_opt = Some(hinge_g_loss(&dfk).add(&damsm.mul_scalar(5.0)));
    });
    let g_params: Vec<_> = gen.params().into_iter().map(|(_, t)| t).collect();
    let g_refs: Vec<&Tensor<f32>> = g_params.iter().collect();
    let lg = lg_opt.unwrap();
    time("g_backward", &mut || {
        lg.backward_wrt(&g_refs).unwrap();
    });
}
