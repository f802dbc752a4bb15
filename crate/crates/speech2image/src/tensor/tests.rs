use super::gradcheck::{assert_grads, max_grad_error, sample_away_from_zero};
use super::*;

fn randv(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

#[test]
fn broadcast_add_and_mul() {
    let a = Tensor::<f32>::from_vec(vec![1., 2., 3., 4., 5., 6.], &[2, 3]);
    let b = Tensor::<f32>::from_vec(vec![10., 20., 30.], &[3]);
    assert_eq!(a.add(&b).to_vec(), vec![11., 22., 33., 14., 25., 36.]);
    let c = Tensor::<f32>::from_vec(vec![2., 3.], &[2, 1]);
    assert_eq!(a.mul(&c).to_vec(), vec![2., 4., 6., 12., 15., 18.]);
}

#[test]
fn sum_axes_and_keepdim() {
    let a = Tensor::<f32>::from_vec(vec![1., 2., 3., 4., 5., 6.], &[2, 3]);
    assert_eq!(a.sum_axes(&[0], false).to_vec(), vec![5., 7., 9.]);
    assert_eq!(a.sum_axes(&[1], true).shape(), &[2, 1]);
    assert_eq!(a.sum_axes(&[1], true).to_vec(), vec![6., 15.]);
    assert_eq!(a.sum_axes(&[0, 1], false).to_vec(), vec![21.]);
}

#[test]
fn backward_of_sum_is_ones() {
    let x = Tensor::<f64>::from_vec(vec![1., 2., 3.], &[3]).requires_grad();
    x.sum_all().backward().unwrap();
    assert_eq!(x.grad_vec().unwrap(), vec![1., 1., 1.]);
}

#[test]
fn backward_of_sum_of_squares() {
    let x = Tensor::<f64>::from_vec(vec![1., 2.], &[2]).requires_grad();
    x.mul(&x).sum_all().backward().unwrap();
    assert_eq!(x.grad_vec().unwrap(), vec![2., 4.]);
}

#[test]
fn backward_accumulates_until_zeroed() {
    let x = Tensor::<f64>::from_vec(vec![1., 2.], &[2]).requires_grad();
    x.sum_all().backward().unwrap();
    x.sum_all().backward().unwrap();
    assert_eq!(x.grad_vec().unwrap(), vec![2., 2.]);
    x.zero_grad();
    x.sum_all().backward().unwrap();
    assert_eq!(x.grad_vec().unwrap(), vec![1., 1.]);
}

#[test]
fn backward_rejects_non_scalar() {
    let x = Tensor::<f64>::from_vec(vec![1., 2.], &[2]).requires_grad();
    assert!(x.mul(&x).backward().is_err());
}

#[test]
fn softmax_symmetry_saturation_and_normalization() {
    let t = Tensor::<f64>::from_vec(vec![3.0, 3.0], &[2]).softmax(0);
    assert!((t.to_vec()[0] - 0.5).abs() < 1e-12);

    let t = Tensor::<f64>::from_vec(vec![0.0, 900.0], &[2]).softmax(0);
    let v = t.to_vec();
    assert!(v[0] < 1e-12 && (v[1] - 1.0).abs() < 1e-12 && v.iter().all(|x| x.is_finite()));

    let mut rng = Rng::seed_from(9);
    for _ in 0..20 {
        let x = Tensor::<f64>::from_vec(randv(&mut rng, 24), &[2, 3, 4]);
        for axis in 0..3 {
            let s = x.softmax(axis).sum_axes(&[axis], false);
            for v in s.to_vec() {
                assert!((v - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn global_avg_pool_examples() {
    let x = Tensor::<f64>::full(&[1, 3, 4, 4], 2.5);
    assert_eq!(x.global_avg_pool().to_vec(), vec![2.5, 2.5, 2.5]);
    let one = Tensor::<f64>::from_vec(vec![7.0, -1.0], &[1, 2, 1, 1]);
    assert_eq!(one.global_avg_pool().to_vec(), vec![7.0, -1.0]);

    let mut rng = Rng::seed_from(4);
    let v = randv(&mut rng, 3 * 16);
    let x = Tensor::<f64>::from_vec(v.clone(), &[1, 3, 4, 4]);
    let got = x.global_avg_pool().to_vec();
    for c in 0..3 {
        let want = v[c * 16..(c + 1) * 16].iter().sum::<f64>() / 16.0;
        assert!((got[c] - want).abs() < 1e-6);
    }
}

#[test]
fn upsample_examples() {
    let x = Tensor::<f64>::from_vec(vec![3.0], &[1, 1, 1, 1]);
    assert_eq!(x.upsample_nearest(1).to_vec(), vec![3.0]);
    let up = x.upsample_nearest(2);
    assert_eq!(up.shape(), &[1, 1, 2, 2]);
    assert_eq!(up.to_vec(), vec![3.0; 4]);

    let mut rng = Rng::seed_from(5);
    let x = Tensor::<f64>::from_vec(randv(&mut rng, 2 * 3 * 3), &[1, 2, 3, 3]);
    let up = x.upsample_nearest(3);
    let sum_in: f64 = x.to_vec().iter().sum();
    let sum_out: f64 = up.to_vec().iter().sum();
    assert!((sum_out - 9.0 * sum_in).abs() < 1e-9);
}

#[test]
fn conv2d_identity_and_zero_kernels() {
    let mut rng = Rng::seed_from(6);
    let x = Tensor::<f64>::from_vec(randv(&mut rng, 2 * 25), &[1, 2, 5, 5]);
    // 1x1 identity kernel per channel: kernel [2,2,1,1] = I
    let k = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2, 1, 1]);
    let y = x.conv2d(&k, 1, 0).unwrap();
    assert_eq!(y.to_vec(), x.to_vec());

    let kz = Tensor::zeros(&[3, 2, 3, 3]);
    let y = x.conv2d(&kz, 1, 1).unwrap();
    assert!(y.to_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_rejects_non_integral_output() {
    let x = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
    let k = Tensor::zeros(&[1, 1, 2, 2]);
    // (5 + 0 - 2) % 2 != 0
    assert!(matches!(x.conv2d(&k, 2, 0), Err(Error::Config(_))));
}

#[test]
fn conv1d_identity_and_stride() {
    let mut rng = Rng::seed_from(7);
    let x = Tensor::<f64>::from_vec(randv(&mut rng, 2 * 8), &[1, 2, 8]);
    let k = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2, 1]);
    assert_eq!(x.conv1d(&k, 1, 0).unwrap().to_vec(), x.to_vec());

    // stride 2 halves an even length under matched padding
    let k3 = Tensor::<f64>::zeros(&[1, 2, 4]);
    let y = x.conv1d(&k3, 2, 1).unwrap();
    assert_eq!(y.shape(), &[1, 1, 4]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = Rng::seed_from(8);
    let a = randv(&mut rng, 4 * 3);
    let x = randv(&mut rng, 3);
    let ta = Tensor::<f64>::from_vec(a.clone(), &[4, 3]);
    let tx = Tensor::<f64>::from_vec(x.clone(), &[1, 3]);
    let y = tx.matmul(&ta, false, true); // x W^T
    for i in 0..4 {
        let want: f64 = (0..3).map(|j| x[j] * a[i * 3 + j]).sum();
        assert!((y.to_vec()[i] - want).abs() < 1e-6);
    }
}

#[test]
fn narrow_concat_roundtrip() {
    let x = Tensor::<f32>::from_vec((0..24).map(|v| v as f32).collect(), &[2, 3, 4]);
    let a = x.narrow(1, 0, 1);
    let b = x.narrow(1, 1, 2);
    let back = Tensor::concat(&[a, b], 1);
    assert_eq!(back.to_vec(), x.to_vec());
}

#[test]
fn detach_blocks_gradient_flow() {
    let x = Tensor::<f64>::from_vec(vec![2.0], &[1]).requires_grad();
    let y = x.mul(&x).detach().mul(&x);
    y.backward().unwrap();
    // d/dx of (const * x) = const = 4, not 3x^2 = 12
    assert_eq!(x.grad_vec().unwrap(), vec![4.0]);
}

#[test]
fn grad_wrt_unreachable_target_is_zero() {
    let x = Tensor::<f64>::from_vec(vec![1.0, 2.0], &[2]).requires_grad();
    let unused = Tensor::<f64>::from_vec(vec![5.0], &[1]).requires_grad();
    let loss = x.sum_all();
    let gs = loss.grad_wrt(&[&unused], false).unwrap();
    assert_eq!(gs[0].to_vec(), vec![0.0]);
}

#[test]
fn no_grad_skips_recording() {
    let x = Tensor::<f64>::from_vec(vec![1.0], &[1]).requires_grad();
    let y = no_grad(|| x.mul(&x));
    assert!(y.is_leaf());
}

#[test]
fn gradcheck_unary_ops() {
    let mut rng = Rng::seed_from(100);
    for _ in 0..5 {
        let v = randv(&mut rng, 12);
        let pos: Vec<f64> = v.iter().map(|x| x.abs() + 0.2).collect();
        let away = sample_away_from_zero(&mut rng, 12, 1e-2);
        assert_grads(&[v.clone()], &[&[3, 4]], |t| t[0].exp().sum_all(), 1e-3);
        assert_grads(&[pos.clone()], &[&[3, 4]], |t| t[0].ln().sum_all(), 1e-3);
        assert_grads(&[pos.clone()], &[&[3, 4]], |t| t[0].sqrt().sum_all(), 1e-3);
        assert_grads(&[v.clone()], &[&[3, 4]], |t| t[0].tanh().sum_all(), 1e-3);
        assert_grads(&[v.clone()], &[&[3, 4]], |t| t[0].sigmoid().sum_all(), 1e-3);
        assert_grads(&[v.clone()], &[&[3, 4]], |t| t[0].gelu().sum_all(), 1e-3);
        assert_grads(&[away.clone()], &[&[3, 4]], |t| t[0].relu().sum_all(), 1e-3);
        assert_grads(&[away.clone()], &[&[3, 4]], |t| t[0].leaky_relu(0.2).sum_all(), 1e-3);
        assert_grads(&[pos.clone()], &[&[3, 4]], |t| {
            t[0].powf_scalar(3.0).sum_all()
        }, 1e-3);
    }
}

#[test]
fn gradcheck_binary_broadcast_ops() {
    let mut rng = Rng::seed_from(101);
    for _ in 0..5 {
        let a = randv(&mut rng, 12);
        let b = randv(&mut rng, 4);
        let bpos: Vec<f64> = b.iter().map(|x| x.abs() + 0.5).collect();
        assert_grads(&[a.clone(), b.clone()], &[&[3, 4], &[4]], |t| {
            t[0].add(&t[1]).mul(&t[0]).sum_all()
        }, 1e-3);
        assert_grads(&[a.clone(), b.clone()], &[&[3, 4], &[4]], |t| {
            t[0].sub(&t[1]).mul(&t[1]).sum_all()
        }, 1e-3);
        assert_grads(&[a.clone(), bpos.clone()], &[&[3, 4], &[4]], |t| {
            t[0].div(&t[1]).sum_all()
        }, 1e-3);
        let b3 = randv(&mut rng, 3);
        assert_grads(&[a.clone(), b3], &[&[4, 3], &[1, 3]], |t| {
            t[0].mul(&t[1]).sum_all()
        }, 1e-3);
    }
}

#[test]
fn gradcheck_matmul_all_transposes() {
    let mut rng = Rng::seed_from(102);
    for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
        let a_shape: &[usize] = if ta { &[4, 3] } else { &[3, 4] };
        let b_shape: &[usize] = if tb { &[5, 4] } else { &[4, 5] };
        let a = randv(&mut rng, 12);
        let b = randv(&mut rng, 20);
        assert_grads(&[a, b], &[a_shape, b_shape], |t| {
            t[0].matmul(&t[1], ta, tb).mul(&t[0].matmul(&t[1], ta, tb)).sum_all()
        }, 1e-3);
    }
}

#[test]
fn gradcheck_conv_pool_shape_ops() {
    let mut rng = Rng::seed_from(103);
    let x = randv(&mut rng, 2 * 3 * 6 * 6);
    let k = randv(&mut rng, 4 * 3 * 3 * 3);
    assert_grads(&[x.clone(), k.clone()], &[&[2, 3, 6, 6], &[4, 3, 3, 3]], |t| {
        let y = t[0].conv2d(&t[1], 1, 1).unwrap();
        y.mul(&y).sum_all()
    }, 1e-3);

    let ks = randv(&mut rng, 4 * 3 * 4 * 4);
    assert_grads(&[x.clone(), ks], &[&[2, 3, 6, 6], &[4, 3, 4, 4]], |t| {
        let y = t[0].conv2d(&t[1], 2, 1).unwrap();
        y.mul(&y).sum_all()
    }, 1e-3);

    assert_grads(&[x.clone()], &[&[2, 3, 6, 6]], |t| {
        let y = t[0].pool_sum2d(2);
        y.mul(&y).sum_all()
    }, 1e-3);
    assert_grads(&[x.clone()], &[&[2, 3, 6, 6]], |t| {
        let y = t[0].upsample_nearest(2);
        y.mul(&y).sum_all()
    }, 1e-3);
    assert_grads(&[x.clone()], &[&[2, 3, 6, 6]], |t| {
        let y = t[0].narrow(1, 1, 2).reshape(&[2, 2, 36]);
        y.mul(&y).sum_all()
    }, 1e-3);
    assert_grads(&[x.clone()], &[&[2, 3, 6, 6]], |t| {
        let parts = [t[0].narrow(2, 0, 3), t[0].narrow(2, 3, 3)];
        let y = Tensor::concat(&parts, 1);
        y.mul(&y).sum_all()
    }, 1e-3);
    assert_grads(&[x], &[&[2, 3, 6, 6]], |t| {
        let y = t[0].softmax(1);
        y.mul(&y).sum_all()
    }, 1e-3);

    let x1 = randv(&mut rng, 2 * 3 * 8);
    let k1 = randv(&mut rng, 5 * 3 * 4);
    assert_grads(&[x1, k1], &[&[2, 3, 8], &[5, 3, 4]], |t| {
        let y = t[0].conv1d(&t[1], 2, 1).unwrap();
        y.mul(&y).sum_all()
    }, 1e-3);
}

#[test]
fn second_order_gradients_through_grad_wrt() {
    // y = sum(x^3): dy/dx = 3x^2, d/dx sum(dy/dx) = 6x.
    let x = Tensor::<f64>::from_vec(vec![1.0, 2.0, -1.5], &[3]).requires_grad();
    let y = x.mul(&x).mul(&x).sum_all();
    let g = y.grad_wrt(&[&x], true).unwrap().remove(0);
    let gsum = g.sum_all();
    let h = gsum.grad_wrt(&[&x], false).unwrap().remove(0);
    let hv = h.to_vec();
    for (hi, xi) in hv.iter().zip([1.0, 2.0, -1.5]) {
        assert!((hi - 6.0 * xi).abs() < 1e-9, "{hi} vs {}", 6.0 * xi);
    }
}

#[test]
fn second_order_through_matmul_and_conv() {
    // Numerically check d/dtheta of ||d f / d x||^2-style expressions.
    let mut rng = Rng::seed_from(104);
    let x0 = randv(&mut rng, 6);
    let w0 = randv(&mut rng, 6);
    // f(x) = <w, x>^2; grad_x = 2 <w,x> w; penalty = sum(grad_x^2) = 4 <w,x>^2 ||w||^2
    // d penalty / d w checked against finite differences.
    let err = max_grad_error(&[w0], &[&[2, 3]], |t| {
        let x = Tensor::from_vec(x0.clone(), &[2, 3]).requires_grad();
        let s = t[0].mul(&x).sum_all();
        let s2 = s.mul(&s);
        let gx = s2.grad_wrt(&[&x], true).unwrap().remove(0);
        gx.mul(&gx).sum_all()
    }, 1e-3);
    assert!(err < 1e-3, "matmul-free second order err {err:.3e}");

    let xc = randv(&mut rng, 1 * 2 * 4 * 4);
    let kc = randv(&mut rng, 2 * 2 * 3 * 3);
    let err = max_grad_error(&[kc], &[&[2, 2, 3, 3]], |t| {
        let x = Tensor::from_vec(xc.clone(), &[1, 2, 4, 4]).requires_grad();
        let y = x.conv2d(&t[0], 1, 1).unwrap().sum_all();
        let gx = y.grad_wrt(&[&x], true).unwrap().remove(0);
        gx.mul(&gx).sum_all()
    }, 1e-3);
    assert!(err < 1e-3, "conv second order err {err:.3e}");
}

#[test]
fn identical_op_sequences_are_bitwise_identical() {
    let run = || {
        let mut rng = Rng::seed_from(77);
        let x = Tensor::<f32>::randn(&mut rng, &[2, 3, 8, 8]);
        let k = Tensor::<f32>::randn(&mut rng, &[4, 3, 3, 3]);
        let y = x.conv2d(&k, 1, 1).unwrap().relu().pool_sum2d(2).softmax(1);
        y.to_vec()
    };
    let a = run();
    let b = run();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
