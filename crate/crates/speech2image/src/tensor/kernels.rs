//! Dense compute kernels: blocked GEMM, im2col convolution, pooling.
//!
//! Determinism contract: every output element is produced by a reduction
//! whose term order is fixed (ascending k, ascending sample index), and
//! parallelism only ever splits work across *disjoint output regions* or
//! across per-sample partials that are then combined in sample order. Results
//! are therefore bitwise identical whether the batch loop runs on one thread
//! or many.

use super::Scalar;
use rayon::prelude::*;

const MR: usize = 8; // microkernel rows
const NR: usize = 16; // microkernel cols
const KC: usize = 256; // k blocking
const NC: usize = 512; // n blocking
const MC: usize = 64; // m blocking

/// out = op_a(A) * op_b(B), shapes m x k and k x n after the optional
/// transposes. `out` is overwritten.
pub fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    out: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for v in out.iter_mut() {
        *v = T::ZERO;
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }

    let mut b_pack = vec![T::ZERO; KC * NC.min(n.next_multiple_of(NR))];
    let mut a_pack = vec![T::ZERO; KC * MC.min(m.next_multiple_of(MR))];

    let mut jc = 0;
    while jc < n {
        let nc = NC.min(n - jc);
        let mut pc = 0;
        while pc < k {
            let kc = KC.min(k - pc);
            pack_b(trans_b, b, k, n, pc, kc, jc, nc, &mut b_pack);
            let mut ic = 0;
            while ic < m {
                let mc = MC.min(m - ic);
                pack_a(trans_a, a, m, k, ic, mc, pc, kc, &mut a_pack);
                // Panel sweep: accumulate into C so successive k blocks add
                // in ascending-k order.
                for jp in (0..nc).step_by(NR) {
                    let nr = NR.min(nc - jp);
                    let b_panel = &b_pack[(jp / NR) * kc * NR..][..kc * NR];
                    for ip in (0..mc).step_by(MR) {
                        let mr = MR.min(mc - ip);
                        let a_panel = &a_pack[(ip / MR) * kc * MR..][..kc * MR];
                        let c_off = (ic + ip) * n + jc + jp;
                        microkernel(kc, a_panel, b_panel, &mut out[c_off..], n, mr, nr);
                    }
                }
                ic += mc;
            }
            pc += kc;
        }
        jc += nc;
    }
}

/// Pack a kc x nc block of op_b(B) into NR-wide column panels, layout
/// `[panel][k][NR]`, zero-padded to NR.
#[allow(clippy::too_many_arguments)]
fn pack_b<T: Scalar>(
    trans_b: bool,
    b: &[T],
    k: usize,
    n: usize,
    pc: usize,
    kc: usize,
    jc: usize,
    nc: usize,
    pack: &mut [T],
) {
    for jp in (0..nc).step_by(NR) {
        let nr = NR.min(nc - jp);
        let dst = &mut pack[(jp / NR) * kc * NR..][..kc * NR];
        for kk in 0..kc {
            let row = &mut dst[kk * NR..kk * NR + NR];
            if trans_b {
                // op_b(B)[pc+kk, jc+jp+j] = B[jc+jp+j, pc+kk], B is n x k
                for (j, v) in row.iter_mut().enumerate().take(nr) {
                    *v = b[(jc + jp + j) * k + pc + kk];
                }
            } else {
                let src = &b[(pc + kk) * n + jc + jp..][..nr];
                row[..nr].copy_from_slice(src);
            }
            for v in row.iter_mut().skip(nr) {
                *v = T::ZERO;
            }
        }
    }
}

/// Pack an mc x kc block of op_a(A) into MR-tall row panels, layout
/// `[panel][k][MR]`, zero-padded to MR.
#[allow(clippy::too_many_arguments)]
fn pack_a<T: Scalar>(
    trans_a: bool,
    a: &[T],
    m: usize,
    k: usize,
    ic: usize,
    mc: usize,
    pc: usize,
    kc: usize,
    pack: &mut [T],
) {
    for ip in (0..mc).step_by(MR) {
        let mr = MR.min(mc - ip);
        let dst = &mut pack[(ip / MR) * kc * MR..][..kc * MR];
        for kk in 0..kc {
            let row = &mut dst[kk * MR..kk * MR + MR];
            if trans_a {
                // op_a(A)[ic+ip+r, pc+kk] = A[pc+kk, ic+ip+r], A is k x m
                let src = &a[(pc + kk) * m + ic + ip..][..mr];
                row[..mr].copy_from_slice(src);
            } else {
                for (r, v) in row.iter_mut().enumerate().take(mr) {
                    *v = a[(ic + ip + r) * k + pc + kk];
                }
            }
            for v in row.iter_mut().skip(mr) {
                *v = T::ZERO;
            }
        }
    }
}

macro_rules! unroll_mr {
    ($r:ident, $body:block) => {
        {
            let $r = 0;
            $body
        }
        {
            let $r = 1;
            $body
        }
        {
            let $r = 2;
            $body
        }
        {
            let $r = 3;
            $body
        }
        {
            let $r = 4;
            $body
        }
        {
            let $r = 5;
            $body
        }
        {
            let $r = 6;
            $body
        }
        {
            let $r = 7;
            $body
        }
    };
}

/// C[0..mr, 0..nr] += sum_k a_panel[k][0..mr] * b_panel[k][0..nr].
/// Rows of C are `ldc` apart. The row loop is unrolled with constant
/// indices so the accumulator tile stays in vector registers.
#[inline]
fn microkernel<T: Scalar>(
    kc: usize,
    a_panel: &[T],
    b_panel: &[T],
    c: &mut [T],
    ldc: usize,
    mr: usize,
    nr: usize,
) {
    let mut acc = [[T::ZERO; NR]; MR];
    for kk in 0..kc {
        let av: &[T; MR] = a_panel[kk * MR..kk * MR + MR].try_into().unwrap();
        let bv: &[T; NR] = b_panel[kk * NR..kk * NR + NR].try_into().unwrap();
        unroll_mr!(r, {
            let ar = av[r];
            let row = &mut acc[r];
            for j in 0..NR {
                row[j] = ar.mul_add(bv[j], row[j]);
            }
        });
    }
    if mr == MR && nr == NR {
        for r in 0..MR {
            let crow = &mut c[r * ldc..r * ldc + NR];
            for j in 0..NR {
                crow[j] = crow[j] + acc[r][j];
            }
        }
    } else {
        for (r, arow) in acc.iter().enumerate().take(mr) {
            let crow = &mut c[r * ldc..r * ldc + nr];
            for j in 0..nr {
                crow[j] = crow[j] + arow[j];
            }
        }
    }
}

/// Geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output size must divide exactly: (dim + 2 pad - kernel) % stride == 0.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad_h: usize,
        pad_w: usize,
    ) -> Option<ConvGeom> {
        let fits = |d: usize, k: usize, pad: usize| -> Option<usize> {
            let padded = d + 2 * pad;
            if k > padded || (padded - k) % stride != 0 {
                None
            } else {
                Some((padded - k) / stride + 1)
            }
        };
        let out_h = fits(h, kh, pad_h)?;
        let out_w = fits(w, kw, pad_w)?;
        Some(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            out_h,
            out_w,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let (h, w) = (g.h as isize, g.w as isize);
    let p = g.out_spatial();
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..][..g.h * g.w];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = &mut col[(ci * g.kh * g.kw + u * g.kw + v) * p..][..p];
                let mut idx = 0;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + u) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= h {
                        for _ in 0..g.out_w {
                            row[idx] = T::ZERO;
                            idx += 1;
                        }
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + v) as isize - g.pad_w as isize;
                        row[idx] = if ix < 0 || ix >= w {
                            T::ZERO
                        } else {
                            plane[iy as usize * g.w + ix as usize]
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

fn col2im_accumulate<T: Scalar>(g: &ConvGeom, col: &[T], x: &mut [T]) {
    let (h, w) = (g.h as isize, g.w as isize);
    let p = g.out_spatial();
    for ci in 0..g.c_in {
        let plane = &mut x[ci * g.h * g.w..][..g.h * g.w];
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = &col[(ci * g.kh * g.kw + u * g.kw + v) * p..][..p];
                let mut idx = 0;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + u) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= h {
                        idx += g.out_w;
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + v) as isize - g.pad_w as isize;
                        if ix >= 0 && ix < w {
                            let at = iy as usize * g.w + ix as usize;
                            plane[at] = plane[at] + row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Batched conv forward: x [n, c_in, h, w], kernel [c_out, c_in, kh, kw]
/// -> out [n, c_out, out_h, out_w]. Samples run in parallel.
pub fn conv2d_forward<T: Scalar>(g: &ConvGeom, n: usize, x: &[T], kernel: &[T], out: &mut [T]) {
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * g.out_spatial();
    let patch = g.patch_len();
    debug_assert_eq!(x.len(), n * in_stride);
    debug_assert_eq!(out.len(), n * out_stride);
    out.par_chunks_mut(out_stride)
        .enumerate()
        .for_each(|(i, out_n)| {
            let mut col = vec![T::ZERO; patch * g.out_spatial()];
            im2col(g, &x[i * in_stride..][..in_stride], &mut col);
            gemm(
                false,
                false,
                g.c_out,
                g.out_spatial(),
                patch,
                kernel,
                &col,
                out_n,
            );
        });
}

/// Gradient w.r.t. the conv input: grad_out [n, c_out, oh, ow] -> [n, c_in, h, w].
pub fn conv2d_input_grad<T: Scalar>(
    g: &ConvGeom,
    n: usize,
    grad_out: &[T],
    kernel: &[T],
    grad_in: &mut [T],
) {
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * g.out_spatial();
    let patch = g.patch_len();
    debug_assert_eq!(grad_out.len(), n * out_stride);
    grad_in
        .par_chunks_mut(in_stride)
        .enumerate()
        .for_each(|(i, gx)| {
            let mut dcol = vec![T::ZERO; patch * g.out_spatial()];
            gemm(
                true,
                false,
                patch,
                g.out_spatial(),
                g.c_out,
                kernel,
                &grad_out[i * out_stride..][..out_stride],
                &mut dcol,
            );
            for v in gx.iter_mut() {
                *v = T::ZERO;
            }
            col2im_accumulate(g, &dcol, gx);
        });
}

/// Gradient w.r.t. the conv kernel. Per-sample partials are computed in
/// parallel and reduced in ascending sample order.
pub fn conv2d_kernel_grad<T: Scalar>(
    g: &ConvGeom,
    n: usize,
    x: &[T],
    grad_out: &[T],
    grad_kernel: &mut [T],
) {
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * g.out_spatial();
    let patch = g.patch_len();
    let partials: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut col = vec![T::ZERO; patch * g.out_spatial()];
            im2col(g, &x[i * in_stride..][..in_stride], &mut col);
            let mut dk = vec![T::ZERO; g.c_out * patch];
            gemm(
                false,
                true,
                g.c_out,
                patch,
                g.out_spatial(),
                &grad_out[i * out_stride..][..out_stride],
                &col,
                &mut dk,
            );
            dk
        })
        .collect();
    for v in grad_kernel.iter_mut() {
        *v = T::ZERO;
    }
    for dk in partials {
        for (acc, d) in grad_kernel.iter_mut().zip(dk) {
            *acc = *acc + d;
        }
    }
}

/// Sum-pool with a factor x factor window and matching stride.
/// x [n, c, h, w] -> [n, c, h/f, w/f]. Adjoint of `upsample_nearest`.
pub fn pool_sum2d<T: Scalar>(n: usize, c: usize, h: usize, w: usize, f: usize, x: &[T], out: &mut [T]) {
    let (oh, ow) = (h / f, w / f);
    let in_stride = c * h * w;
    let out_stride = c * oh * ow;
    debug_assert_eq!(x.len(), n * in_stride);
    out.par_chunks_mut(out_stride)
        .enumerate()
        .for_each(|(i, out_n)| {
            let xn = &x[i * in_stride..][..in_stride];
            for ci in 0..c {
                let plane = &xn[ci * h * w..][..h * w];
                let oplane = &mut out_n[ci * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = T::ZERO;
                        for u in 0..f {
                            let row = &plane[(oy * f + u) * w + ox * f..][..f];
                            for &v in row {
                                s = s + v;
                            }
                        }
                        oplane[oy * ow + ox] = s;
                    }
                }
            }
        });
}

/// Nearest-neighbor upsample by an integer factor.
/// x [n, c, h, w] -> [n, c, f*h, f*w]. Adjoint of `pool_sum2d`.
pub fn upsample_nearest<T: Scalar>(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    x: &[T],
    out: &mut [T],
) {
    let (oh, ow) = (h * f, w * f);
    let in_stride = c * h * w;
    let out_stride = c * oh * ow;
    debug_assert_eq!(x.len(), n * in_stride);
    out.par_chunks_mut(out_stride)
        .enumerate()
        .for_each(|(i, out_n)| {
            let xn = &x[i * in_stride..][..in_stride];
            for ci in 0..c {
                let plane = &xn[ci * h * w..][..h * w];
                let oplane = &mut out_n[ci * oh * ow..][..oh * ow];
                for oy in 0..oh {
                    let src = &plane[(oy / f) * w..][..w];
                    let dst = &mut oplane[oy * ow..][..ow];
                    for ox in 0..ow {
                        dst[ox] = src[ox / f];
                    }
                }
            }
        });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn naive_gemm(
        ta: bool,
        tb: bool,
        m: usize,
        n: usize,
        k: usize,
        a: &[f64],
        b: &[f64],
    ) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for l in 0..k {
                    let av = if ta { a[l * m + i] } else { a[i * k + l] };
                    let bv = if tb { b[j * k + l] } else { b[l * n + j] };
                    s += av * bv;
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive_reference_all_transposes() {
        let mut rng = Rng::seed_from(11);
        for &(m, n, k) in &[(1, 1, 1), (3, 5, 7), (8, 16, 4), (17, 33, 65), (64, 100, 300)] {
            for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
                let a: Vec<f64> = (0..m * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
                let b: Vec<f64> = (0..k * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
                let mut out = vec![0.0; m * n];
                gemm(ta, tb, m, n, k, &a, &b, &mut out);
                let want = naive_gemm(ta, tb, m, n, k, &a, &b);
                for (got, want) in out.iter().zip(&want) {
                    assert!(
                        (got - want).abs() < 1e-9,
                        "({m},{n},{k}) ta={ta} tb={tb}: {got} vs {want}"
                    );
                }
            }
        }
    }

    fn naive_conv(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.c_out * g.out_spatial()];
        for co in 0..g.c_out {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut s = 0.0;
                    for ci in 0..g.c_in {
                        for u in 0..g.kh {
                            for v in 0..g.kw {
                                let iy = (oy * g.stride + u) as isize - g.pad_h as isize;
                                let ix = (ox * g.stride + v) as isize - g.pad_w as isize;
                                if iy >= 0 && iy < g.h as isize && ix >= 0 && ix < g.w as isize {
                                    s += x[(ci * g.h + iy as usize) * g.w + ix as usize]
                                        * k[((co * g.c_in + ci) * g.kh + u) * g.kw + v];
                                }
                            }
                        }
                    }
                    out[(co * g.out_h + oy) * g.out_w + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_forward_matches_nested_loop_oracle() {
        let mut rng = Rng::seed_from(21);
        for &(ci, h, w, co, kh, s, p) in &[
            (2, 5, 5, 2, 3, 1, 1),
            (3, 8, 8, 4, 4, 2, 1),
            (1, 4, 4, 1, 1, 1, 0),
            (4, 6, 6, 3, 3, 1, 0),
        ] {
            let g = ConvGeom::new(ci, h, w, co, kh, kh, s, p, p).unwrap();
            let x: Vec<f64> = (0..2 * ci * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let k: Vec<f64> = (0..co * ci * kh * kh).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let mut out = vec![0.0; 2 * co * g.out_spatial()];
            conv2d_forward(&g, 2, &x, &k, &mut out);
            for i in 0..2 {
                let want = naive_conv(&g, &x[i * ci * h * w..][..ci * h * w], &k);
                let got = &out[i * co * g.out_spatial()..][..co * g.out_spatial()];
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-9, "cfg ({ci},{h},{w},{co},{kh},{s},{p})");
                }
            }
        }
    }

    #[test]
    fn conv_grads_match_adjoint_identities() {
        // <conv(x,k), g> == <x, dinput(g,k)> == <k, dkernel(x,g)>
        let mut rng = Rng::seed_from(31);
        for &(ci, h, w, co, kh, s, p) in &[(2, 6, 6, 3, 3, 1, 1), (3, 8, 8, 2, 4, 2, 1)] {
            let g = ConvGeom::new(ci, h, w, co, kh, kh, s, p, p).unwrap();
            let n = 2;
            let x: Vec<f64> = (0..n * ci * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let k: Vec<f64> = (0..co * ci * kh * kh).map(|_| rng.uniform(-1.0, 1.0)).collect();
            let gy: Vec<f64> = (0..n * co * g.out_spatial())
                .map(|_| rng.uniform(-1.0, 1.0))
                .collect();
            let mut y = vec![0.0; gy.len()];
            conv2d_forward(&g, n, &x, &k, &mut y);
            let mut dx = vec![0.0; x.len()];
            conv2d_input_grad(&g, n, &gy, &k, &mut dx);
            let mut dk = vec![0.0; k.len()];
            conv2d_kernel_grad(&g, n, &x, &gy, &mut dk);
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
            let lhs = dot(&y, &gy);
            assert!((lhs - dot(&x, &dx)).abs() < 1e-8 * lhs.abs().max(1.0));
            assert!((lhs - dot(&k, &dk)).abs() < 1e-8 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn pool_and_upsample_are_adjoint() {
        let mut rng = Rng::seed_from(41);
        let (n, c, h, w, f) = (2, 3, 6, 6, 2);
        let x: Vec<f64> = (0..n * c * h * w).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let gy: Vec<f64> = (0..n * c * (h / f) * (w / f))
            .map(|_| rng.uniform(-1.0, 1.0))
            .collect();
        let mut y = vec![0.0; gy.len()];
        pool_sum2d(n, c, h, w, f, &x, &mut y);
        let mut up = vec![0.0; x.len()];
        upsample_nearest(n, c, h / f, w / f, f, &gy, &mut up);
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        assert!((dot(&y, &gy) - dot(&x, &up)).abs() < 1e-10);
    }

    #[test]
    fn parallel_and_sequential_paths_agree_bitwise() {
        // Same inputs through a one-thread pool and the global pool.
        let mut rng = Rng::seed_from(51);
        let g = ConvGeom::new(3, 16, 16, 8, 3, 3, 1, 1, 1).unwrap();
        let n = 8;
        let x: Vec<f32> = (0..n * 3 * 256).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let k: Vec<f32> = (0..8 * 27).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        let mut out_par = vec![0.0f32; n * 8 * 256];
        conv2d_forward(&g, n, &x, &k, &mut out_par);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let mut out_seq = vec![0.0f32; n * 8 * 256];
        pool.install(|| conv2d_forward(&g, n, &x, &k, &mut out_seq));
        assert_eq!(out_par, out_seq);

        let mut gk_par = vec![0.0f32; k.len()];
        let gy: Vec<f32> = (0..n * 8 * 256).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
        conv2d_kernel_grad(&g, n, &x, &gy, &mut gk_par);
        let mut gk_seq = vec![0.0f32; k.len()];
        pool.install(|| conv2d_kernel_grad(&g, n, &x, &gy, &mut gk_seq));
        assert_eq!(gk_par, gk_seq);
    }
}
