//! Throughput of the conv kernel family at training shapes.

use speech2image::rng::Rng;
use speech2image::tensor::Tensor;
use std::time::Instant;

fn main() {
    let mut rng = Rng::seed_from(1);
    // (label, n, c_in, h, c_out, k, stride, pad)
    let cases = [
        ("D b1 conv2 64->64 k3 @32", 16, 64, 32, 64, 3, 1, 1),
        ("D b2 conv1 64->128 k4 @32", 16, 64, 32, 128, 4, 2, 1),
        ("D b2 conv2 128->128 k3 @16", 16, 128, 16, 128, 3, 1, 1),
        ("D b3 conv2 256->256 k3 @8", 16, 256, 8, 256, 3, 1, 1),
        ("G b5 conv 32->16 k3 @64", 16, 32, 64, 16, 3, 1, 1),
    ];
    for (label, n, ci, h, co, k, s, p) in cases {
        let x = Tensor::<f32>::randn(&mut rng, &[n, ci, h, h]).requires_grad();
        let kk = Tensor::<f32>::randn(&mut rng, &[co, ci, k, k]).requires_grad();
        let y = x.conv2d(&kk, s, p).unwrap();
        let oh = y.shape()[2];
        let flops = 2.0 * (n * co * oh * oh * ci * k * k) as f64;

        let iters = 8;
        let t0 = Instant::now();
        for _ in 0..iters {
            let _ = x.conv2d(&kk, s, p).unwrap();
        }
        let fwd = t0.elapsed().as_secs_f64() / iters as f64;

        // input-grad + kernel-grad via backward of sum
        let loss = y.sum_all();
        let t0 = Instant::now();
        for _ in 0..iters {
            let _ = loss.grad_wrt(&[&x], false).unwrap();
        }
        let dinput = t0.elapsed().as_secs_f64() / iters as f64;
        let t0 = Instant::now();
        for _ in 0..iters {
            let _ = loss.grad_wrt(&[&kk], false).unwrap();
        }
        let dkernel = t0.elapsed().as_secs_f64() / iters as f64;
        println!(
            "{label}: fwd {:.1} GF/s, dinput {:.1} GF/s, dkernel {:.1} GF/s",
            flops / fwd / 1e9,
            flops / dinput / 1e9,
            flops / dkernel / 1e9
        );
    }
}
