use speech2image::tensor::Tensor;
use speech2image::rng::Rng;
use std::time::Instant;

fn main() {
    let mut rng = Rng::seed_from(1);
    // representative conv-like GEMM: [64, 576] x [576, 1024]
    let a = Tensor::<f32>::randn(&mut rng, &[64, 576]);
    let b = Tensor::<f32>::randn(&mut rng, &[576, 1024]);
    // warmup
    for _ in 0..3 { let _ = a.matmul(&b, false, false); }
    let t0 = Instant::now();
    let iters = 200;
    for _ in 0..iters { let _ = a.matmul(&b, false, false); }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * 64.0 * 576.0 * 1024.0 * iters as f64;
    println!("gemm 64x576x1024: {:.1} GFLOP/s", flops / dt / 1e9);

    // conv through the tensor API: [16,64,32,32] x [64,64,3,3]
    let x = Tensor::<f32>::randn(&mut rng, &[16, 64, 32, 32]);
    let k = Tensor::<f32>::randn(&mut rng, &[64, 64, 3, 3]);
    for _ in 0..2 { let _ = x.conv2d(&k, 1, 1).unwrap(); }
    let t0 = Instant::now();
    let iters = 20;
    for _ in 0..iters { let _ = x.conv2d(&k, 1, 1).unwrap(); }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * 16.0 * 64.0 * 1024.0 * 64.0 * 9.0 * iters as f64;
    println!("conv 16x64x32x32 3x3: {:.1} GFLOP/s (2 threads)", flops / dt / 1e9);
}
