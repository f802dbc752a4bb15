//! Neural layers over the tensor substrate: dense, convolutions, batch
//! normalization, GRUs, and the Adam optimizer.
//!
//! Layers own their parameter tensors (leaves with `requires_grad`) and
//! expose them through [`Module::params`] for optimization and
//! checkpointing. Forward passes are pure given parameters, except for
//! batchnorm running statistics which update only in `Mode::Train`.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

/// Train/eval switch; affects batchnorm statistics only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Something with named parameters (trainable) and named buffers
/// (persistent but not optimized, e.g. batchnorm running stats).
pub trait Module<T: Scalar> {
    fn params(&self) -> Vec<(String, Tensor<T>)>;
    fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        Vec::new()
    }
}

/// Prefix every name in `items` with `prefix.`.
pub fn with_prefix<T: Scalar>(
    prefix: &str,
    items: Vec<(String, Tensor<T>)>,
) -> Vec<(String, Tensor<T>)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

/// Fan-in scaled uniform init: U(-sqrt(3/fan_in), sqrt(3/fan_in)).
pub fn fan_in_uniform<T: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (3.0 / fan_in as f64).sqrt();
    Tensor::uniform(rng, shape, -bound, bound)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu, // slope 0.2
    Gelu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::Relu => x.relu(),
            Activation::LeakyRelu => x.leaky_relu(0.2),
            Activation::Gelu => x.gelu(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Tanh => x.tanh(),
        }
    }
}

/// Fully connected layer: y = x W^T + b.
pub struct Dense<T: Scalar = f32> {
    pub weight: Tensor<T>, // [out, in]
    pub bias: Tensor<T>,   // [out]
    pub in_features: usize,
    pub out_features: usize,
}

impl<T: Scalar> Dense<T> {
    pub fn new(rng: &mut Rng, in_features: usize, out_features: usize) -> Self {
        Dense {
            weight: fan_in_uniform(rng, &[out_features, in_features], in_features)
                .requires_grad(),
            bias: Tensor::zeros(&[out_features]).requires_grad(),
            in_features,
            out_features,
        }
    }

    /// Accepts any leading shape; the trailing dim must equal `in_features`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        let &last = shape.last().ok_or_else(|| Error::Shape {
            op: "dense",
            detail: "input has rank 0".into(),
        })?;
        if last != self.in_features {
            return Err(Error::Shape {
                op: "dense",
                detail: format!(
                    "input {:?} has trailing dim {last}, layer expects {} (weight {:?})",
                    shape,
                    self.in_features,
                    self.weight.shape()
                ),
            });
        }
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let flat = x.reshape(&[rows, last]);
        let y = flat.matmul(&self.weight, false, true).add(&self.bias);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_features;
        Ok(y.reshape(&out_shape))
    }
}

impl<T: Scalar> Module<T> for Dense<T> {
    fn params(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("weight".into(), self.weight.clone()),
            ("bias".into(), self.bias.clone()),
        ]
    }
}

/// 2-D convolution layer (cross-correlation), square kernel/stride/pad.
pub struct Conv2d<T: Scalar = f32> {
    pub kernel: Tensor<T>, // [out, in, k, k]
    pub bias: Tensor<T>,   // [out]
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        rng: &mut Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * k * k;
        Conv2d {
            kernel: fan_in_uniform(rng, &[out_ch, in_ch, k, k], fan_in).requires_grad(),
            bias: Tensor::zeros(&[out_ch]).requires_grad(),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out_ch = self.kernel.shape()[0];
        let y = x.conv2d(&self.kernel, self.stride, self.pad)?;
        Ok(y.add(&self.bias.reshape(&[out_ch, 1, 1])))
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn params(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("kernel".into(), self.kernel.clone()),
            ("bias".into(), self.bias.clone()),
        ]
    }
}

/// 1-D convolution layer over [n, c, t].
pub struct Conv1d<T: Scalar = f32> {
    pub kernel: Tensor<T>, // [out, in, k]
    pub bias: Tensor<T>,   // [out]
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new(
        rng: &mut Rng,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * k;
        Conv1d {
            kernel: fan_in_uniform(rng, &[out_ch, in_ch, k], fan_in).requires_grad(),
            bias: Tensor::zeros(&[out_ch]).requires_grad(),
            stride,
            pad,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let out_ch = self.kernel.shape()[0];
        let y = x.conv1d(&self.kernel, self.stride, self.pad)?;
        Ok(y.add(&self.bias.reshape(&[out_ch, 1])))
    }
}

impl<T: Scalar> Module<T> for Conv1d<T> {
    fn params(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("kernel".into(), self.kernel.clone()),
            ("bias".into(), self.bias.clone()),
        ]
    }
}

/// Batch normalization over the channel axis (dim 1) of [n, c, ...] inputs.
///
/// Train mode normalizes with biased batch statistics and updates the
/// running estimates (unbiased variance) by exponential moving average;
/// eval mode uses the running estimates as constants.
pub struct BatchNorm<T: Scalar = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    pub channels: usize,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(&[channels]).requires_grad(),
            beta: Tensor::zeros(&[channels]).requires_grad(),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: 1e-5,
            momentum: 0.1,
            channels,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(Error::Shape {
                op: "batchnorm",
                detail: format!("input {:?} vs {} channels", shape, self.channels),
            });
        }
        // Broadcast shape [1, c, 1, 1, ...] matching the input rank.
        let mut bshape = vec![1usize; shape.len()];
        bshape[1] = self.channels;
        let reduce_axes: Vec<usize> = (0..shape.len()).filter(|&a| a != 1).collect();
        let count: usize = reduce_axes.iter().map(|&a| shape[a]).product();

        match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "batchnorm needs >= 2 values per channel in train mode, got {count} \
                         (shape {shape:?})"
                    )));
                }
                let mu = x.mean_axes(&reduce_axes, true);
                let centered = x.sub(&mu);
                let var = centered.mul(&centered).mean_axes(&reduce_axes, true);
                let xhat = centered.div(&var.add_scalar(T::from_f64(self.eps)).sqrt());

                // EMA update of running stats (unbiased variance), outside
                // the gradient tape.
                let m = T::from_f64(self.momentum);
                let one_m = T::from_f64(1.0 - self.momentum);
                let unbias = T::from_f64(count as f64 / (count as f64 - 1.0));
                let mu_v = mu.to_vec();
                let var_v = var.to_vec();
                self.running_mean.with_data_mut(|rm| {
                    for (r, &b) in rm.iter_mut().zip(mu_v.iter()) {
                        *r = one_m * *r + m * b;
                    }
                });
                self.running_var.with_data_mut(|rv| {
                    for (r, &b) in rv.iter_mut().zip(var_v.iter()) {
                        *r = one_m * *r + m * (unbias * b);
                    }
                });

                Ok(xhat
                    .mul(&self.gamma.reshape(&bshape))
                    .add(&self.beta.reshape(&bshape)))
            }
            Mode::Eval => {
                let mu = self.running_mean.reshape(&bshape);
                let var = self.running_var.reshape(&bshape);
                let xhat = x.sub(&mu).div(&var.add_scalar(T::from_f64(self.eps)).sqrt());
                Ok(xhat
                    .mul(&self.gamma.reshape(&bshape))
                    .add(&self.beta.reshape(&bshape)))
            }
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn params(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("gamma".into(), self.gamma.clone()),
            ("beta".into(), self.beta.clone()),
        ]
    }

    fn buffers(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("running_mean".into(), self.running_mean.clone()),
            ("running_var".into(), self.running_var.clone()),
        ]
    }
}

/// Single-direction GRU cell with gates ordered (reset, update, candidate):
///
/// r_t = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
/// z_t = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
/// n_t = tanh(W_in x + b_in + r_t (W_hn h + b_hn))
/// h_t = (1 - z_t) n_t + z_t h_{t-1}
pub struct Gru<T: Scalar = f32> {
    pub w_ih: Tensor<T>, // [3h, in]
    pub w_hh: Tensor<T>, // [3h, h]
    pub b_ih: Tensor<T>, // [3h]
    pub b_hh: Tensor<T>, // [3h]
    pub hidden: usize,
}

impl<T: Scalar> Gru<T> {
    pub fn new(rng: &mut Rng, input: usize, hidden: usize) -> Self {
        Gru {
            w_ih: fan_in_uniform(rng, &[3 * hidden, input], input).requires_grad(),
            w_hh: fan_in_uniform(rng, &[3 * hidden, hidden], hidden).requires_grad(),
            b_ih: Tensor::zeros(&[3 * hidden]).requires_grad(),
            b_hh: Tensor::zeros(&[3 * hidden]).requires_grad(),
            hidden,
        }
    }

    /// One step: x [n, in], h [n, hidden] -> new h.
    pub fn step(&self, x: &Tensor<T>, h: &Tensor<T>) -> Tensor<T> {
        let hd = self.hidden;
        let gx = x.matmul(&self.w_ih, false, true).add(&self.b_ih); // [n, 3h]
        let gh = h.matmul(&self.w_hh, false, true).add(&self.b_hh);
        let (gx_r, gx_z, gx_n) = (
            gx.narrow(1, 0, hd),
            gx.narrow(1, hd, hd),
            gx.narrow(1, 2 * hd, hd),
        );
        let (gh_r, gh_z, gh_n) = (
            gh.narrow(1, 0, hd),
            gh.narrow(1, hd, hd),
            gh.narrow(1, 2 * hd, hd),
        );
        let r = gx_r.add(&gh_r).sigmoid();
        let z = gx_z.add(&gh_z).sigmoid();
        let n_t = gx_n.add(&r.mul(&gh_n)).tanh();
        z.neg().add_scalar(T::ONE).mul(&n_t).add(&z.mul(h))
    }

    /// Run over [n, t, in], returning all hidden states [n, t, hidden].
    /// `reverse` walks the sequence back-to-front (states returned in
    /// original time order).
    pub fn run(&self, seq: &Tensor<T>, reverse: bool) -> Tensor<T> {
        let (n, t, f) = (seq.shape()[0], seq.shape()[1], seq.shape()[2]);
        let mut h = Tensor::zeros(&[n, self.hidden]);
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(t);
        for i in 0..t {
            let tt = if reverse { t - 1 - i } else { i };
            let x = seq.narrow(1, tt, 1).reshape(&[n, f]);
            h = self.step(&x, &h);
            outs.push(h.reshape(&[n, 1, self.hidden]));
        }
        if reverse {
            outs.reverse();
        }
        Tensor::concat(&outs, 1)
    }
}

impl<T: Scalar> Module<T> for Gru<T> {
    fn params(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("w_ih".into(), self.w_ih.clone()),
            ("w_hh".into(), self.w_hh.clone()),
            ("b_ih".into(), self.b_ih.clone()),
            ("b_hh".into(), self.b_hh.clone()),
        ]
    }
}

/// Bidirectional GRU: concatenated forward and backward states per step.
pub struct BiGru<T: Scalar = f32> {
    pub fwd: Gru<T>,
    pub bwd: Gru<T>,
}

impl<T: Scalar> BiGru<T> {
    pub fn new(rng: &mut Rng, input: usize, hidden: usize) -> Self {
        BiGru {
            fwd: Gru::new(rng, input, hidden),
            bwd: Gru::new(rng, input, hidden),
        }
    }

    /// [n, t, in] -> [n, t, 2*hidden].
    pub fn run(&self, seq: &Tensor<T>) -> Tensor<T> {
        let f = self.fwd.run(seq, false);
        let b = self.bwd.run(seq, true);
        Tensor::concat(&[f, b], 2)
    }
}

impl<T: Scalar> Module<T> for BiGru<T> {
    fn params(&self) -> Vec<(String, Tensor<T>)> {
        let mut ps = with_prefix("fwd", self.fwd.params());
        ps.extend(with_prefix("bwd", self.bwd.params()));
        ps
    }
}

/// Adam with bias correction. Moment buffers are keyed by position in the
/// parameter list, which must stay stable across steps and checkpoints.
pub struct Adam<T: Scalar = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[Tensor<T>], lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![T::ZERO; p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::ZERO; p.numel()]).collect(),
        }
    }

    /// Apply one update from the accumulated `.grad` of each parameter.
    /// Parameters without a gradient are treated as zero-gradient.
    pub fn step(&mut self, params: &[Tensor<T>]) {
        assert_eq!(params.len(), self.m.len(), "optimizer/parameter list mismatch");
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::ONE;
        let bc1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        for (i, p) in params.iter().enumerate() {
            p.with_grad(|grad| {
                let Some(g) = grad else { return };
                let m = &mut self.m[i];
                let v = &mut self.v[i];
                p.with_data_mut(|data| {
                    for j in 0..data.len() {
                        let gj = g[j];
                        m[j] = b1 * m[j] + (one - b1) * gj;
                        v[j] = b2 * v[j] + (one - b2) * gj * gj;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        data[j] = data[j] - lr * mhat / (vhat.sqrt() + eps);
                    }
                });
            });
        }
    }

    /// Moment buffers and step counter, for checkpointing.
    pub fn state(&self) -> (u64, &[Vec<T>], &[Vec<T>]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

/// Clear accumulated gradients on a parameter list.
pub fn zero_grads<T: Scalar>(params: &[Tensor<T>]) {
    for p in params {
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::assert_grads;

    #[test]
    fn dense_identity_and_zero_weight() {
        let mut rng = Rng::seed_from(1);
        let mut layer = Dense::<f64>::new(&mut rng, 3, 3);
        layer.weight = Tensor::from_vec(
            vec![1., 0., 0., 0., 1., 0., 0., 0., 1.],
            &[3, 3],
        )
        .requires_grad();
        let x = Tensor::from_vec(vec![1., 2., 3.], &[3]);
        assert_eq!(layer.forward(&x).unwrap().to_vec(), vec![1., 2., 3.]);

        let mut zero = Dense::<f64>::new(&mut rng, 3, 1);
        zero.weight = Tensor::zeros(&[1, 3]).requires_grad();
        zero.bias = Tensor::from_vec(vec![5.0], &[1]).requires_grad();
        assert_eq!(zero.forward(&x).unwrap().to_vec(), vec![5.0]);
    }

    #[test]
    fn dense_matches_matmul_oracle() {
        let mut rng = Rng::seed_from(2);
        let layer = Dense::<f64>::new(&mut rng, 3, 4);
        let x = Tensor::uniform(&mut rng, &[2, 3], -1.0, 1.0);
        let y = layer.forward(&x).unwrap();
        let (w, b, xv, yv) = (
            layer.weight.to_vec(),
            layer.bias.to_vec(),
            x.to_vec(),
            y.to_vec(),
        );
        for n in 0..2 {
            for o in 0..4 {
                let mut want = b[o];
                for i in 0..3 {
                    want += xv[n * 3 + i] * w[o * 3 + i];
                }
                assert!((yv[n * 4 + o] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dense_rejects_wrong_trailing_dim() {
        let mut rng = Rng::seed_from(3);
        let layer = Dense::<f64>::new(&mut rng, 3, 4);
        let x = Tensor::zeros(&[2, 5]);
        let err = layer.forward(&x).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains('5') && msg.contains('3'), "unhelpful error: {msg}");
    }

    #[test]
    fn batchnorm_normalizes_per_channel() {
        let mut rng = Rng::seed_from(4);
        let bn = BatchNorm::<f64>::new(3);
        let x = Tensor::uniform(&mut rng, &[4, 3, 5, 5], -2.0, 3.0);
        let y = bn.forward(&x, Mode::Train).unwrap();
        let yv = y.to_vec();
        for c in 0..3 {
            let mut vals = Vec::new();
            for n in 0..4 {
                for s in 0..25 {
                    vals.push(yv[(n * 3 + c) * 25 + s]);
                }
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / vals.len() as f64;
            assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {c} var {var}");
        }
    }

    #[test]
    fn batchnorm_gamma_zero_gives_beta() {
        let mut rng = Rng::seed_from(5);
        let mut bn = BatchNorm::<f64>::new(2);
        bn.gamma = Tensor::zeros(&[2]).requires_grad();
        bn.beta = Tensor::from_vec(vec![1.5, -0.5], &[2]).requires_grad();
        let x = Tensor::uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
        let y = bn.forward(&x, Mode::Train).unwrap().to_vec();
        for n in 0..2 {
            for s in 0..9 {
                assert_eq!(y[(n * 2) * 9 + s], 1.5);
                assert_eq!(y[(n * 2 + 1) * 9 + s], -0.5);
            }
        }
    }

    #[test]
    fn batchnorm_is_near_identity_on_standardized_input() {
        // Zero-mean unit-variance input, gamma=1, beta=0: output ~ input.
        let raw: Vec<f64> = vec![-1.5, -0.5, 0.5, 1.5, -1.5, -0.5, 0.5, 1.5];
        let mean = 0.0;
        let var = raw.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / raw.len() as f64;
        assert!((var - 1.25).abs() < 1e-12);
        let scaled: Vec<f64> = raw.iter().map(|v| v / var.sqrt()).collect();
        let bn = BatchNorm::<f64>::new(1);
        let x = Tensor::from_vec(scaled.clone(), &[8, 1, 1, 1]);
        let y = bn.forward(&x, Mode::Train).unwrap().to_vec();
        for (a, b) in y.iter().zip(&scaled) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn batchnorm_degenerate_batch_errors() {
        let bn = BatchNorm::<f64>::new(2);
        let x = Tensor::zeros(&[1, 2, 1, 1]);
        assert!(matches!(
            bn.forward(&x, Mode::Train),
            Err(Error::DegenerateBatch(_))
        ));
        assert!(bn.forward(&x, Mode::Eval).is_ok());
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut rng = Rng::seed_from(6);
        let bn = BatchNorm::<f64>::new(2);
        let x = Tensor::uniform(&mut rng, &[4, 2, 2, 2], 1.0, 3.0);
        let _ = bn.forward(&x, Mode::Train).unwrap();
        let rm = bn.running_mean.to_vec();
        assert!(rm.iter().all(|&v| v > 0.0), "running mean moved: {rm:?}");
        // Eval on zeros: output = (0 - rm)/sqrt(rv + eps), constant per channel.
        let z = Tensor::zeros(&[1, 2, 1, 1]);
        let y = bn.forward(&z, Mode::Eval).unwrap().to_vec();
        let rv = bn.running_var.to_vec();
        for c in 0..2 {
            let want = -rm[c] / (rv[c] + 1e-5).sqrt();
            assert!((y[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn activation_values() {
        let x = Tensor::<f64>::from_vec(vec![-1.0, 0.0, 2.0], &[3]);
        assert_eq!(Activation::Relu.apply(&x).to_vec(), vec![0.0, 0.0, 2.0]);
        let y = Activation::LeakyRelu.apply(&x).to_vec();
        assert!((y[0] + 0.2).abs() < 1e-12);
        let s = Activation::Sigmoid.apply(&Tensor::scalar(0.0)).item();
        assert!((s - 0.5).abs() < 1e-12);
        // GELU tanh approximation at a few reference points.
        let g = Activation::Gelu.apply(&Tensor::from_vec(vec![0.0, 1.0], &[2])).to_vec();
        assert!(g[0].abs() < 1e-12);
        assert!((g[1] - 0.8411919906082768).abs() < 1e-9);
    }

    #[test]
    fn gru_zero_input_zero_bias_stays_zero() {
        let mut rng = Rng::seed_from(7);
        let gru = Gru::<f64>::new(&mut rng, 3, 4);
        let seq = Tensor::zeros(&[2, 5, 3]);
        let h = gru.run(&seq, false);
        assert!(h.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_single_step_forward_equals_backward() {
        let mut rng = Rng::seed_from(8);
        let gru = Gru::<f64>::new(&mut rng, 3, 4);
        let seq = Tensor::uniform(&mut rng, &[2, 1, 3], -1.0, 1.0);
        let f = gru.run(&seq, false).to_vec();
        let b = gru.run(&seq, true).to_vec();
        assert_eq!(f, b);
    }

    #[test]
    fn gru_matches_scalar_recurrence_oracle() {
        // Independent step-by-step evaluation of the gate equations.
        let mut rng = Rng::seed_from(9);
        let (input, hidden, t) = (2usize, 3usize, 3usize);
        let gru = Gru::<f64>::new(&mut rng, input, hidden);
        let seq = Tensor::uniform(&mut rng, &[1, t, input], -1.0, 1.0);
        let got = gru.run(&seq, false).to_vec();

        let w_ih = gru.w_ih.to_vec();
        let w_hh = gru.w_hh.to_vec();
        let b_ih = gru.b_ih.to_vec();
        let b_hh = gru.b_hh.to_vec();
        let xs = seq.to_vec();
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = vec![0.0f64; hidden];
        for step in 0..t {
            let x = &xs[step * input..(step + 1) * input];
            let gate = |row: usize, w: &[f64], src: &[f64], b: &[f64], width: usize| -> f64 {
                let mut s = b[row];
                for i in 0..width {
                    s += w[row * width + i] * src[i];
                }
                s
            };
            let mut new_h = vec![0.0f64; hidden];
            for j in 0..hidden {
                let r = sigmoid(
                    gate(j, &w_ih, x, &b_ih, input) + gate(j, &w_hh, &h, &b_hh, hidden),
                );
                let z = sigmoid(
                    gate(hidden + j, &w_ih, x, &b_ih, input)
                        + gate(hidden + j, &w_hh, &h, &b_hh, hidden),
                );
                let n = (gate(2 * hidden + j, &w_ih, x, &b_ih, input)
                    + r * gate(2 * hidden + j, &w_hh, &h, &b_hh, hidden))
                .tanh();
                new_h[j] = (1.0 - z) * n + z * h[j];
            }
            h = new_h;
            for j in 0..hidden {
                let g = got[step * hidden + j];
                assert!((g - h[j]).abs() < 1e-5, "step {step} unit {j}: {g} vs {}", h[j]);
            }
        }
    }

    #[test]
    fn gradcheck_layers() {
        let mut rng = Rng::seed_from(10);
        // dense
        let x = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>();
        let w = (0..12).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>();
        let b = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>();
        assert_grads(&[x, w, b], &[&[2, 3], &[4, 3], &[4]], |t| {
            let layer = Dense {
                weight: t[1].clone(),
                bias: t[2].clone(),
                in_features: 3,
                out_features: 4,
            };
            let y = layer.forward(&t[0]).unwrap();
            y.mul(&y).sum_all()
        }, 1e-3);

        // batchnorm (train mode, through the batch statistics)
        let x = (0..24).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>();
        let g = (0..2).map(|_| rng.uniform(0.5, 1.5)).collect::<Vec<_>>();
        let be = (0..2).map(|_| rng.uniform(-0.5, 0.5)).collect::<Vec<_>>();
        assert_grads(&[x, g, be], &[&[3, 2, 2, 2], &[2], &[2]], |t| {
            let bn = BatchNorm {
                gamma: t[1].clone(),
                beta: t[2].clone(),
                running_mean: Tensor::zeros(&[2]),
                running_var: Tensor::ones(&[2]),
                eps: 1e-5,
                momentum: 0.1,
                channels: 2,
            };
            let y = bn.forward(&t[0], Mode::Train).unwrap();
            y.mul(&y).sum_all()
        }, 1e-3);

        // gru through time
        let seq = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect::<Vec<_>>();
        let wih = (0..12).map(|_| rng.uniform(-0.7, 0.7)).collect::<Vec<_>>();
        let whh = (0..12).map(|_| rng.uniform(-0.7, 0.7)).collect::<Vec<_>>();
        assert_grads(&[seq, wih, whh], &[&[1, 3, 2], &[6, 2], &[6, 2]], |t| {
            let gru = Gru {
                w_ih: t[1].clone(),
                w_hh: t[2].clone(),
                b_ih: Tensor::zeros(&[6]),
                b_hh: Tensor::zeros(&[6]),
                hidden: 2,
            };
            let y = gru.run(&t[0], false);
            y.mul(&y).sum_all()
        }, 1e-3);
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let p = Tensor::<f64>::from_vec(vec![1.0, -2.0], &[2]).requires_grad();
        let mut opt = Adam::new(&[p.clone()], 0.1, 0.0, 0.9);
        // no backward ran: no grad
        opt.step(&[p.clone()]);
        assert_eq!(p.to_vec(), vec![1.0, -2.0]);
        // explicit zero grad
        p.mul_scalar(0.0).sum_all().backward().unwrap();
        opt.step(&[p.clone()]);
        assert_eq!(p.to_vec(), vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let p = Tensor::<f64>::from_vec(vec![1.0, -1.0], &[2]).requires_grad();
        let mut opt = Adam::new(&[p.clone()], 0.01, 0.0, 0.9);
        // loss = 3*p0 - 2*p1: grads (3, -2)
        let c = Tensor::from_vec(vec![3.0, -2.0], &[2]);
        p.mul(&c).sum_all().backward().unwrap();
        opt.step(&[p.clone()]);
        let got = p.to_vec();
        // update ~= -lr * sign(g) up to eps-scale effects
        assert!((got[0] - (1.0 - 0.01)).abs() < 1e-6, "{got:?}");
        assert!((got[1] - (-1.0 + 0.01)).abs() < 1e-6, "{got:?}");
    }

    #[test]
    fn adam_five_step_trajectory_matches_reference_recurrence() {
        let mut p = 0.7f64;
        let (lr, b1, b2, eps) = (0.05, 0.0, 0.9, 1e-8);
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let grad_of = |x: f64| 2.0 * x; // loss = x^2
        let mut expected = Vec::new();
        for t in 1..=5 {
            let g = grad_of(p);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            p -= lr * mhat / (vhat.sqrt() + eps);
            expected.push(p);
        }

        let param = Tensor::<f64>::from_vec(vec![0.7], &[1]).requires_grad();
        let mut opt = Adam::new(&[param.clone()], lr, b1, b2);
        for want in expected {
            param.zero_grad();
            param.mul(&param).sum_all().backward().unwrap();
            opt.step(&[param.clone()]);
            let got = param.to_vec()[0];
            assert!((got - want).abs() < 1e-7, "{got} vs {want}");
        }
    }
}
