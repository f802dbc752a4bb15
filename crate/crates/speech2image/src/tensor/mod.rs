//! Reverse-mode differentiable tensors.
//!
//! A define-by-run tape: every operation on [`Tensor`] records its parents
//! and a VJP closure. Because the VJP closures are themselves written in
//! terms of public tensor ops, a backward pass may run in graph-building
//! mode (`create_graph`), which is what makes gradient penalties with
//! second-order terms expressible.
//!
//! The element type is generic: `f32` is the runtime precision, `f64` is
//! used by the finite-difference verification mode.

pub mod gradcheck;
mod kernels;

use crate::error::{Error, Result};
use crate::rng::Rng;
use kernels::ConvGeom;
use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

/// Element dtype tag, used by the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    U64,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::U64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Dtype> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            2 => Some(Dtype::U64),
            _ => None,
        }
    }
}

/// Real element type of a tensor.
pub trait Scalar:
    Copy
    + PartialOrd
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn powf(self, p: Self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, o: Self) -> Self;
    /// Fused multiply-add; lowers to a hardware FMA when the target has one.
    fn mul_add(self, a: Self, b: Self) -> Self;
    fn to_le_bytes_vec(self) -> Vec<u8>;
    fn from_le_slice(b: &[u8]) -> Self;
    fn byte_width() -> usize;
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $w:expr) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const DTYPE: Dtype = $dtype;
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                self.exp()
            }
            fn ln(self) -> Self {
                self.ln()
            }
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            fn tanh(self) -> Self {
                self.tanh()
            }
            fn powf(self, p: Self) -> Self {
                self.powf(p)
            }
            fn abs(self) -> Self {
                self.abs()
            }
            fn is_finite(self) -> bool {
                self.is_finite()
            }
            fn maximum(self, o: Self) -> Self {
                if self > o {
                    self
                } else {
                    o
                }
            }
            fn mul_add(self, a: Self, b: Self) -> Self {
                self.mul_add(a, b)
            }
            fn to_le_bytes_vec(self) -> Vec<u8> {
                self.to_le_bytes().to_vec()
            }
            fn from_le_slice(b: &[u8]) -> Self {
                <$t>::from_le_bytes(b.try_into().expect("dtype width"))
            }
            fn byte_width() -> usize {
                $w
            }
        }
    };
}

impl_scalar!(f32, Dtype::F32, 4);
impl_scalar!(f64, Dtype::F64, 8);

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

/// Run `f` with gradient recording disabled (forward-only evaluation).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|c| c.replace(false));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

fn with_grad_mode<R>(enabled: bool, f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|c| c.replace(enabled));
    let out = f();
    GRAD_ENABLED.with(|c| c.set(prev));
    out
}

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Op<T: Scalar> {
    name: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    op: Option<Op<T>>,
}

/// A shared handle to a node of the computation graph.
pub struct Tensor<T: Scalar = f32> {
    inner: Rc<Inner<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, op={})",
            self.inner.id,
            self.inner.shape,
            self.inner.op.as_ref().map(|o| o.name).unwrap_or("leaf")
        )
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    // ---- construction ----

    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Tensor<T> {
        assert_eq!(
            data.len(),
            numel_of(shape),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                requires_grad: false,
                grad: RefCell::new(None),
                op: None,
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor<T> {
        Tensor::from_vec(vec![T::ZERO; numel_of(shape)], shape)
    }

    pub fn ones(shape: &[usize]) -> Tensor<T> {
        Tensor::from_vec(vec![T::ONE; numel_of(shape)], shape)
    }

    pub fn full(shape: &[usize], v: T) -> Tensor<T> {
        Tensor::from_vec(vec![v; numel_of(shape)], shape)
    }

    pub fn scalar(v: T) -> Tensor<T> {
        Tensor::from_vec(vec![v], &[1])
    }

    /// Standard-normal init, draws consumed in row-major order.
    pub fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<T> {
        let data = (0..numel_of(shape))
            .map(|_| T::from_f64(rng.normal()))
            .collect();
        Tensor::from_vec(data, shape)
    }

    pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
        let data = (0..numel_of(shape))
            .map(|_| T::from_f64(rng.uniform(lo, hi)))
            .collect();
        Tensor::from_vec(data, shape)
    }

    /// Mark a leaf as a trainable parameter.
    pub fn requires_grad(self) -> Tensor<T> {
        assert!(self.inner.op.is_none(), "requires_grad is set on leaves");
        let inner = match Rc::try_unwrap(self.inner) {
            Ok(mut inner) => {
                inner.requires_grad = true;
                inner
            }
            Err(rc) => Inner {
                id: rc.id,
                shape: rc.shape.clone(),
                data: RefCell::new(rc.data.borrow().clone()),
                requires_grad: true,
                grad: RefCell::new(None),
                op: None,
            },
        };
        Tensor {
            inner: Rc::new(inner),
        }
    }

    // ---- metadata / data access ----

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.op.is_none()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() requires a scalar tensor");
        self.inner.data.borrow()[0]
    }

    /// Read access to the raw buffer.
    pub fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.inner.data.borrow())
    }

    /// In-place mutation of a leaf's values (optimizer updates, running stats).
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [T]) -> R) -> R {
        assert!(self.is_leaf(), "only leaves may be mutated in place");
        f(&mut self.inner.data.borrow_mut())
    }

    pub fn grad_vec(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn with_grad<R>(&self, f: impl FnOnce(Option<&[T]>) -> R) -> R {
        f(self.inner.grad.borrow().as_deref())
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    /// A constant leaf holding a copy of this tensor's current values.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::from_vec(self.to_vec(), &self.inner.shape)
    }

    fn make(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&Tensor<T>, &Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Tensor<T> {
        debug_assert_eq!(data.len(), numel_of(&shape));
        let track = grad_enabled() && parents.iter().any(|p| p.inner.requires_grad);
        Tensor {
            inner: Rc::new(Inner {
                id: fresh_id(),
                shape,
                data: RefCell::new(data),
                requires_grad: track,
                grad: RefCell::new(None),
                op: track.then(|| Op {
                    name,
                    parents,
                    backward: Box::new(backward),
                }),
            }),
        }
    }

    // ---- elementwise unary ----

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(T) -> T + Sync,
        vjp: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T> + 'static,
    ) -> Tensor<T> {
        let data = par_map1(&self.inner.data.borrow(), &f);
        let x = self.clone();
        Tensor::make(
            name,
            self.inner.shape.clone(),
            data,
            vec![self.clone()],
            move |out, g, _needs| vec![Some(vjp(&x, out, g))],
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary("neg", |v| -v, |_, _, g| g.neg())
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary("exp", |v| v.exp(), |_, y, g| g.mul(y))
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary("ln", |v| v.ln(), |x, _, g| g.div(x))
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary(
            "sqrt",
            |v| v.sqrt(),
            |_, y, g| g.mul_scalar(T::from_f64(0.5)).div(y),
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(
            "tanh",
            |v| v.tanh(),
            |_, y, g| g.mul(&y.mul(y).neg().add_scalar(T::ONE)),
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(
            "sigmoid",
            |v| T::ONE / (T::ONE + (-v).exp()),
            |_, y, g| g.mul(y).mul(&y.neg().add_scalar(T::ONE)),
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            "relu",
            |v| if v > T::ZERO { v } else { T::ZERO },
            |x, _, g| {
                let mask = par_map1(&x.inner.data.borrow(), |v| {
                    if v > T::ZERO {
                        T::ONE
                    } else {
                        T::ZERO
                    }
                });
                g.mul(&Tensor::from_vec(mask, x.shape()))
            },
        )
    }

    pub fn leaky_relu(&self, alpha: f64) -> Tensor<T> {
        let a = T::from_f64(alpha);
        self.unary(
            "leaky_relu",
            move |v| if v > T::ZERO { v } else { a * v },
            move |x, _, g| {
                let mask = par_map1(&x.inner.data.borrow(), |v| {
                    if v > T::ZERO {
                        T::ONE
                    } else {
                        a
                    }
                });
                g.mul(&Tensor::from_vec(mask, x.shape()))
            },
        )
    }

    /// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
    pub fn gelu(&self) -> Tensor<T> {
        let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
        let k = T::from_f64(0.044715);
        self.unary(
            "gelu",
            move |v| {
                let u = c * (v + k * v * v * v);
                T::from_f64(0.5) * v * (T::ONE + u.tanh())
            },
            move |x, _, g| {
                // d/dx = 0.5 (1 + tanh u) + 0.5 x (1 - tanh^2 u) * c (1 + 3 k x^2)
                let u = x
                    .mul(x)
                    .mul(x)
                    .mul_scalar(k)
                    .add(x)
                    .mul_scalar(c)
                    .tanh();
                let half = T::from_f64(0.5);
                let left = u.add_scalar(T::ONE).mul_scalar(half);
                let sech2 = u.mul(&u).neg().add_scalar(T::ONE);
                let inner = x
                    .mul(x)
                    .mul_scalar(k * T::from_f64(3.0))
                    .add_scalar(T::ONE)
                    .mul_scalar(c);
                let right = x.mul_scalar(half).mul(&sech2).mul(&inner);
                g.mul(&left.add(&right))
            },
        )
    }

    pub fn add_scalar(&self, v: T) -> Tensor<T> {
        self.unary("add_scalar", move |x| x + v, |_, _, g| g.clone())
    }

    pub fn mul_scalar(&self, v: T) -> Tensor<T> {
        self.unary("mul_scalar", move |x| x * v, move |_, _, g| g.mul_scalar(v))
    }

    /// x^p for a constant exponent; defined for x > 0 (and x >= 0 when p >= 1).
    pub fn powf_scalar(&self, p: T) -> Tensor<T> {
        self.unary(
            "powf_scalar",
            move |x| x.powf(p),
            move |x, _, g| g.mul(&x.powf_scalar(p - T::ONE)).mul_scalar(p),
        )
    }

    // ---- elementwise binary with broadcasting ----

    fn binary(
        &self,
        other: &Tensor<T>,
        name: &'static str,
        f: impl Fn(T, T) -> T + Sync,
        vjp: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>, &[bool]) -> (Option<Tensor<T>>, Option<Tensor<T>>)
            + 'static,
    ) -> Tensor<T> {
        let out_shape = broadcast_shapes(&self.inner.shape, &other.inner.shape).unwrap_or_else(
            || {
                panic!(
                    "{name}: shapes {:?} and {:?} do not broadcast",
                    self.inner.shape, other.inner.shape
                )
            },
        );
        let data = broadcast_zip(
            &self.inner.data.borrow(),
            &self.inner.shape,
            &other.inner.data.borrow(),
            &other.inner.shape,
            &out_shape,
            f,
        );
        let (a, b) = (self.clone(), other.clone());
        Tensor::make(
            name,
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            move |_out, g, needs| {
                let (ga, gb) = vjp(&a, &b, g, needs);
                vec![ga, gb]
            },
        )
    }

    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        self.binary(other, "add", |x, y| x + y, |a, b, g, needs| {
            (
                needs[0].then(|| g.sum_to(a.shape())),
                needs[1].then(|| g.sum_to(b.shape())),
            )
        })
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        self.binary(other, "sub", |x, y| x - y, |a, b, g, needs| {
            (
                needs[0].then(|| g.sum_to(a.shape())),
                needs[1].then(|| g.neg().sum_to(b.shape())),
            )
        })
    }

    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        self.binary(other, "mul", |x, y| x * y, |a, b, g, needs| {
            (
                needs[0].then(|| g.mul(b).sum_to(a.shape())),
                needs[1].then(|| g.mul(a).sum_to(b.shape())),
            )
        })
    }

    pub fn div(&self, other: &Tensor<T>) -> Tensor<T> {
        self.binary(other, "div", |x, y| x / y, |a, b, g, needs| {
            (
                needs[0].then(|| g.div(b).sum_to(a.shape())),
                needs[1].then(|| g.mul(a).div(b).div(b).neg().sum_to(b.shape())),
            )
        })
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor<T> {
        let mut s = T::ZERO;
        for &v in self.inner.data.borrow().iter() {
            s = s + v;
        }
        let shape = self.inner.shape.clone();
        Tensor::make(
            "sum_all",
            vec![1],
            vec![s],
            vec![self.clone()],
            move |_out, g, _| {
                let ones_shape: Vec<usize> = shape.iter().map(|_| 1).collect();
                vec![Some(g.reshape(&ones_shape).broadcast_to(&shape))]
            },
        )
    }

    pub fn mean_all(&self) -> Tensor<T> {
        self.sum_all()
            .mul_scalar(T::from_f64(1.0 / self.numel() as f64))
    }

    /// Sum over the given axes. With `keepdim` the reduced axes stay as 1.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Tensor<T> {
        let in_shape = self.inner.shape.clone();
        let nd = in_shape.len();
        assert!(axes.iter().all(|&a| a < nd), "sum_axes: axis out of range");
        let mut keep_shape = in_shape.clone();
        for &a in axes {
            keep_shape[a] = 1;
        }
        let out_shape: Vec<usize> = if keepdim {
            keep_shape.clone()
        } else {
            in_shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !axes.contains(i))
                .map(|(_, &d)| d)
                .collect()
        };
        let out_shape = if out_shape.is_empty() {
            vec![1]
        } else {
            out_shape
        };
        let mut data = vec![T::ZERO; numel_of(&keep_shape)];
        reduce_into(
            &self.inner.data.borrow(),
            &in_shape,
            &keep_shape,
            &mut data,
        );
        let keep = keep_shape.clone();
        Tensor::make(
            "sum_axes",
            out_shape,
            data,
            vec![self.clone()],
            move |_out, g, _| vec![Some(g.reshape(&keep).broadcast_to(&in_shape))],
        )
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Tensor<T> {
        let count: usize = axes.iter().map(|&a| self.inner.shape[a]).product();
        self.sum_axes(axes, keepdim)
            .mul_scalar(T::from_f64(1.0 / count as f64))
    }

    /// Sum down to a (broadcast-compatible) smaller shape. Inverse of
    /// broadcasting; used by binary VJPs.
    pub fn sum_to(&self, shape: &[usize]) -> Tensor<T> {
        if self.inner.shape == shape {
            return self.clone();
        }
        let nd = self.inner.shape.len();
        let pad = nd - shape.len();
        let mut axes: Vec<usize> = (0..pad).collect();
        for (i, &d) in shape.iter().enumerate() {
            if d == 1 && self.inner.shape[pad + i] != 1 {
                axes.push(pad + i);
            }
        }
        let summed = if axes.is_empty() {
            self.clone()
        } else {
            self.sum_axes(&axes, true)
        };
        summed.reshape(shape)
    }

    // ---- shape ops ----

    pub fn reshape(&self, shape: &[usize]) -> Tensor<T> {
        assert_eq!(
            self.numel(),
            numel_of(shape),
            "reshape: {:?} -> {:?} changes element count",
            self.inner.shape,
            shape
        );
        if &self.inner.shape == shape {
            return self.clone();
        }
        let in_shape = self.inner.shape.clone();
        Tensor::make(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            move |_out, g, _| vec![Some(g.reshape(&in_shape))],
        )
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor<T> {
        if &self.inner.shape == shape {
            return self.clone();
        }
        assert!(
            broadcast_shapes(&self.inner.shape, shape)
                .map(|s| s == shape)
                .unwrap_or(false),
            "broadcast_to: {:?} -> {:?}",
            self.inner.shape,
            shape
        );
        let data = broadcast_zip(
            &self.inner.data.borrow(),
            &self.inner.shape,
            &[T::ZERO],
            &[1],
            shape,
            |x, _| x,
        );
        let in_shape = self.inner.shape.clone();
        Tensor::make(
            "broadcast_to",
            shape.to_vec(),
            data,
            vec![self.clone()],
            move |_out, g, _| vec![Some(g.sum_to(&in_shape))],
        )
    }

    /// Slice `len` indices starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor<T> {
        let shape = &self.inner.shape;
        assert!(axis < shape.len() && start + len <= shape[axis], "narrow bounds");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.inner.data.borrow();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        drop(src);
        let full = shape.clone();
        Tensor::make(
            "narrow",
            out_shape,
            data,
            vec![self.clone()],
            move |_out, g, _| {
                // Re-embed as zeros || g || zeros along the axis.
                let mut parts: Vec<Tensor<T>> = Vec::new();
                if start > 0 {
                    let mut s = full.clone();
                    s[axis] = start;
                    parts.push(Tensor::zeros(&s));
                }
                parts.push(g.clone());
                if start + len < full[axis] {
                    let mut s = full.clone();
                    s[axis] = full[axis] - start - len;
                    parts.push(Tensor::zeros(&s));
                }
                vec![Some(Tensor::concat(&parts, axis))]
            },
        )
    }

    /// Swap the last two axes (batched 2-D transpose). Self-adjoint VJP.
    pub fn transpose_last2(&self) -> Tensor<T> {
        let shape = self.inner.shape.clone();
        assert!(shape.len() >= 2, "transpose_last2 needs rank >= 2");
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let outer: usize = shape[..shape.len() - 2].iter().product();
        let src = self.inner.data.borrow();
        let mut data = vec![T::ZERO; src.len()];
        for o in 0..outer {
            let s = &src[o * r * c..][..r * c];
            let d = &mut data[o * r * c..][..r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = s[i * c + j];
                }
            }
        }
        drop(src);
        let mut out_shape = shape;
        let n = out_shape.len();
        out_shape.swap(n - 2, n - 1);
        Tensor::make(
            "transpose_last2",
            out_shape,
            data,
            vec![self.clone()],
            move |_out, g, _| vec![Some(g.transpose_last2())],
        )
    }

    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Tensor<T> {
        assert!(!parts.is_empty());
        let first = parts[0].shape().to_vec();
        assert!(axis < first.len());
        for p in parts {
            assert_eq!(p.shape().len(), first.len(), "concat rank mismatch");
            for (i, (&a, &b)) in p.shape().iter().zip(&first).enumerate() {
                assert!(i == axis || a == b, "concat: shapes differ off-axis");
            }
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let dims: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = dims.iter().sum();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = vec![T::ZERO; outer * total * inner];
        let mut offset = 0;
        for (p, &d) in parts.iter().zip(&dims) {
            let src = p.inner.data.borrow();
            for o in 0..outer {
                let dst = &mut data[(o * total + offset) * inner..][..d * inner];
                dst.copy_from_slice(&src[o * d * inner..][..d * inner]);
            }
            offset += d;
        }
        let dims_cl = dims.clone();
        Tensor::make(
            "concat",
            out_shape,
            data,
            parts.to_vec(),
            move |_out, g, needs| {
                let mut grads = Vec::with_capacity(dims_cl.len());
                let mut at = 0;
                for (i, &d) in dims_cl.iter().enumerate() {
                    grads.push(needs[i].then(|| g.narrow(axis, at, d)));
                    at += d;
                }
                grads
            },
        )
    }

    // ---- matmul ----

    /// 2-D matrix product of `op_a(self) [m,k]` and `op_b(other) [k,n]`,
    /// where the flags transpose the physical layouts.
    pub fn matmul(&self, other: &Tensor<T>, trans_a: bool, trans_b: bool) -> Tensor<T> {
        let (sa, sb) = (&self.inner.shape, &other.inner.shape);
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects 2-D tensors");
        let (m, ka) = if trans_a { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(
            ka, kb,
            "matmul: inner dims {ka} vs {kb} (shapes {sa:?} x {sb:?}, ta={trans_a}, tb={trans_b})"
        );
        let mut data = vec![T::ZERO; m * n];
        kernels::gemm(
            trans_a,
            trans_b,
            m,
            n,
            ka,
            &self.inner.data.borrow(),
            &other.inner.data.borrow(),
            &mut data,
        );
        let (a, b) = (self.clone(), other.clone());
        Tensor::make(
            "matmul",
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            move |_out, g, needs| {
                let ga = needs[0].then(|| {
                    if trans_a {
                        b.matmul(g, trans_b, true)
                    } else {
                        g.matmul(&b, false, !trans_b)
                    }
                });
                let gb = needs[1].then(|| {
                    if trans_b {
                        g.matmul(&a, true, trans_a)
                    } else {
                        a.matmul(g, !trans_a, false)
                    }
                });
                vec![ga, gb]
            },
        )
    }

    // ---- convolution family ----

    /// Batched 2-D cross-correlation. `self` is [n, c_in, h, w]; `kernel`
    /// is [c_out, c_in, kh, kw]. Output spatial size must divide exactly.
    pub fn conv2d(&self, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
        let s = &self.inner.shape;
        let k = &kernel.inner.shape;
        if s.len() != 4 || k.len() != 4 || s[1] != k[1] {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("input {s:?} vs kernel {k:?}"),
            });
        }
        let geom = ConvGeom::new(s[1], s[2], s[3], k[0], k[2], k[3], stride, pad, pad).ok_or_else(
            || {
                Error::Config(format!(
                    "conv2d: kernel {}x{} stride {stride} pad {pad} does not tile input {}x{}",
                    k[2], k[3], s[2], s[3]
                ))
            },
        )?;
        Ok(conv2d_node(self, kernel, geom, s[0]))
    }

    /// Batched 1-D cross-correlation over [n, c_in, t]; kernel [c_out, c_in, kw].
    pub fn conv1d(&self, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
        let s = &self.inner.shape;
        let k = &kernel.inner.shape;
        if s.len() != 3 || k.len() != 3 || s[1] != k[1] {
            return Err(Error::Shape {
                op: "conv1d",
                detail: format!("input {s:?} vs kernel {k:?}"),
            });
        }
        let x4 = self.reshape(&[s[0], s[1], 1, s[2]]);
        let k4 = kernel.reshape(&[k[0], k[1], 1, k[2]]);
        let geom = ConvGeom::new(s[1], 1, s[2], k[0], 1, k[2], stride, 0, pad).ok_or_else(|| {
            Error::Config(format!(
                "conv1d: kernel {} stride {stride} pad {pad} does not tile length {}",
                k[2], s[2]
            ))
        })?;
        let out = conv2d_node(&x4, &k4, geom, s[0]);
        let os = out.shape().to_vec();
        Ok(out.reshape(&[os[0], os[1], os[3]]))
    }

    /// Sum-pool by an integer factor over both spatial dims of [n, c, h, w].
    pub fn pool_sum2d(&self, factor: usize) -> Tensor<T> {
        let s = self.inner.shape.clone();
        assert!(s.len() == 4 && s[2] % factor == 0 && s[3] % factor == 0, "pool_sum2d shape");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut data = vec![T::ZERO; n * c * (h / factor) * (w / factor)];
        kernels::pool_sum2d(n, c, h, w, factor, &self.inner.data.borrow(), &mut data);
        Tensor::make(
            "pool_sum2d",
            vec![n, c, h / factor, w / factor],
            data,
            vec![self.clone()],
            move |_out, g, _| vec![Some(g.upsample_nearest(factor))],
        )
    }

    /// Nearest-neighbor upsampling of [n, c, h, w] by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Tensor<T> {
        let s = self.inner.shape.clone();
        assert!(s.len() == 4, "upsample_nearest expects [n,c,h,w]");
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if factor == 1 {
            return self.clone();
        }
        let mut data = vec![T::ZERO; n * c * h * factor * w * factor];
        kernels::upsample_nearest(n, c, h, w, factor, &self.inner.data.borrow(), &mut data);
        Tensor::make(
            "upsample_nearest",
            vec![n, c, h * factor, w * factor],
            data,
            vec![self.clone()],
            move |_out, g, _| vec![Some(g.pool_sum2d(factor))],
        )
    }

    // ---- composites ----

    /// Numerically stable softmax along `axis` (max shift is a constant).
    pub fn softmax(&self, axis: usize) -> Tensor<T> {
        let m = self.max_axis_constant(axis);
        let e = self.sub(&m).exp();
        let s = e.sum_axes(&[axis], true);
        e.div(&s)
    }

    /// Stable log-softmax along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Tensor<T> {
        let m = self.max_axis_constant(axis);
        let shifted = self.sub(&m);
        let lse = shifted.exp().sum_axes(&[axis], true).ln();
        shifted.sub(&lse)
    }

    /// Per-slice maximum along `axis`, detached from the graph (its gradient
    /// contribution cancels in softmax-style uses).
    fn max_axis_constant(&self, axis: usize) -> Tensor<T> {
        let shape = &self.inner.shape;
        assert!(axis < shape.len());
        let mut keep = shape.clone();
        keep[axis] = 1;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = shape[axis];
        let src = self.inner.data.borrow();
        let mut out = vec![T::from_f64(f64::NEG_INFINITY); outer * inner];
        for o in 0..outer {
            for j in 0..d {
                let base = (o * d + j) * inner;
                for i in 0..inner {
                    let v = src[base + i];
                    let cur = &mut out[o * inner + i];
                    if v > *cur {
                        *cur = v;
                    }
                }
            }
        }
        Tensor::from_vec(out, &keep)
    }

    /// Global average over the two spatial dims of [n, c, h, w] -> [n, c].
    pub fn global_avg_pool(&self) -> Tensor<T> {
        assert_eq!(self.inner.shape.len(), 4, "global_avg_pool expects [n,c,h,w]");
        let (n, c) = (self.inner.shape[0], self.inner.shape[1]);
        self.mean_axes(&[2, 3], false).reshape(&[n, c])
    }

    // ---- autodiff ----

    /// Accumulate d(self)/d(leaf) into every reachable `requires_grad` leaf.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.inner.shape
            )));
        }
        let topo = self.topo_order();
        let leaves: Vec<Tensor<T>> = topo
            .iter()
            .filter(|t| t.is_leaf() && t.inner.requires_grad)
            .cloned()
            .collect();
        let grads = self.grad_sweep(&topo, &leaves, false)?;
        for (leaf, g) in leaves.iter().zip(grads) {
            let gdata = g.inner.data.borrow();
            let mut slot = leaf.inner.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => {
                    for (a, &v) in acc.iter_mut().zip(gdata.iter()) {
                        *a = *a + v;
                    }
                }
                None => *slot = Some(gdata.clone()),
            }
        }
        Ok(())
    }

    /// Like [`Tensor::backward`], but accumulates only into the listed
    /// leaves; gradient work for every other branch is pruned. This is the
    /// optimizer path: alternating GAN steps differentiate the same graph
    /// w.r.t. disjoint parameter sets.
    pub fn backward_wrt(&self, wrt: &[&Tensor<T>]) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.inner.shape
            )));
        }
        for w in wrt {
            if !w.is_leaf() {
                return Err(Error::Contract(
                    "backward_wrt targets must be leaves".into(),
                ));
            }
        }
        let topo = self.topo_order();
        let targets: Vec<Tensor<T>> = wrt.iter().map(|w| (*w).clone()).collect();
        let grads = self.grad_sweep(&topo, &targets, false)?;
        for (leaf, g) in targets.iter().zip(grads) {
            let gdata = g.inner.data.borrow();
            let mut slot = leaf.inner.grad.borrow_mut();
            match slot.as_mut() {
                Some(acc) => {
                    for (a, &v) in acc.iter_mut().zip(gdata.iter()) {
                        *a = *a + v;
                    }
                }
                None => *slot = Some(gdata.clone()),
            }
        }
        Ok(())
    }

    /// Differentiate this scalar w.r.t. an explicit set of graph nodes.
    /// With `create_graph` the returned gradients are graph nodes themselves
    /// and may be differentiated again.
    pub fn grad_wrt(&self, wrt: &[&Tensor<T>], create_graph: bool) -> Result<Vec<Tensor<T>>> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_wrt requires a scalar output, got shape {:?}",
                self.inner.shape
            )));
        }
        for w in wrt {
            if !w.inner.requires_grad {
                return Err(Error::Contract(
                    "grad_wrt target does not participate in the gradient tape".into(),
                ));
            }
        }
        let topo = self.topo_order();
        let targets: Vec<Tensor<T>> = wrt.iter().map(|w| (*w).clone()).collect();
        self.grad_sweep(&topo, &targets, create_graph)
    }

    /// Post-order over the op graph: every node appears after its parents.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        // (node, next parent index to visit)
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, pi)) = stack.pop() {
            let parents: &[Tensor<T>] = node
                .inner
                .op
                .as_ref()
                .map(|o| o.parents.as_slice())
                .unwrap_or(&[]);
            if pi < parents.len() {
                let child = parents[pi].clone();
                stack.push((node, pi + 1));
                if visited.insert(child.inner.id) {
                    stack.push((child, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }

    fn grad_sweep(
        &self,
        topo: &[Tensor<T>],
        wrt: &[Tensor<T>],
        create_graph: bool,
    ) -> Result<Vec<Tensor<T>>> {
        let pos: HashMap<u64, usize> = topo
            .iter()
            .enumerate()
            .map(|(i, t)| (t.inner.id, i))
            .collect();
        let wrt_ids: std::collections::HashSet<u64> =
            wrt.iter().map(|t| t.inner.id).collect();

        // needs[i]: some wrt node is reachable from topo[i] through parents.
        let mut needs = vec![false; topo.len()];
        for (i, node) in topo.iter().enumerate() {
            if wrt_ids.contains(&node.inner.id) {
                needs[i] = true;
                continue;
            }
            if let Some(op) = &node.inner.op {
                needs[i] = op
                    .parents
                    .iter()
                    .any(|p| pos.get(&p.inner.id).map(|&j| needs[j]).unwrap_or(false));
            }
        }

        let mut grads: HashMap<u64, Tensor<T>> = HashMap::new();
        grads.insert(self.inner.id, Tensor::ones(&[1]));
        let mut results: HashMap<u64, Tensor<T>> = HashMap::new();

        with_grad_mode(create_graph, || -> Result<()> {
            for node in topo.iter().rev() {
                let Some(g) = grads.remove(&node.inner.id) else {
                    continue;
                };
                if g.shape() != node.shape() {
                    // Scalars are stored as [1]; everything else must match.
                    assert_eq!(
                        numel_of(g.shape()),
                        node.numel(),
                        "internal: gradient shape mismatch at {node:?}"
                    );
                }
                if wrt_ids.contains(&node.inner.id) {
                    results.insert(node.inner.id, g.clone());
                }
                let Some(op) = &node.inner.op else { continue };
                let mask: Vec<bool> = op
                    .parents
                    .iter()
                    .map(|p| pos.get(&p.inner.id).map(|&j| needs[j]).unwrap_or(false))
                    .collect();
                if !mask.iter().any(|&b| b) {
                    continue;
                }
                let parent_grads = (op.backward)(node, &g, &mask);
                debug_assert_eq!(parent_grads.len(), op.parents.len());
                for ((p, pg), &needed) in op.parents.iter().zip(parent_grads).zip(&mask) {
                    let Some(pg) = pg else { continue };
                    if !needed {
                        continue;
                    }
                    match grads.remove(&p.inner.id) {
                        Some(acc) => {
                            grads.insert(p.inner.id, acc.add(&pg));
                        }
                        None => {
                            grads.insert(p.inner.id, pg);
                        }
                    }
                }
            }
            Ok(())
        })?;

        Ok(wrt
            .iter()
            .map(|w| {
                results
                    .get(&w.inner.id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(w.shape()))
            })
            .collect())
    }
}

/// Shared constructor for the three members of the conv derivative family.
/// `conv_forward(x, k)`, its input-gradient and its kernel-gradient are
/// closed under differentiation, which is what enables second-order use.
fn conv2d_node<T: Scalar>(x: &Tensor<T>, k: &Tensor<T>, geom: ConvGeom, n: usize) -> Tensor<T> {
    let mut data = vec![T::ZERO; n * geom.c_out * geom.out_spatial()];
    kernels::conv2d_forward(&geom, n, &x.inner.data.borrow(), &k.inner.data.borrow(), &mut data);
    let (xc, kc) = (x.clone(), k.clone());
    Tensor::make(
        "conv2d",
        vec![n, geom.c_out, geom.out_h, geom.out_w],
        data,
        vec![x.clone(), k.clone()],
        move |_out, g, needs| {
            let gx = needs[0].then(|| conv2d_input_grad_node(g, &kc, geom, n));
            let gk = needs[1].then(|| conv2d_kernel_grad_node(&xc, g, geom, n));
            vec![gx, gk]
        },
    )
}

fn conv2d_input_grad_node<T: Scalar>(
    gy: &Tensor<T>,
    k: &Tensor<T>,
    geom: ConvGeom,
    n: usize,
) -> Tensor<T> {
    let mut data = vec![T::ZERO; n * geom.c_in * geom.h * geom.w];
    kernels::conv2d_input_grad(&geom, n, &gy.inner.data.borrow(), &k.inner.data.borrow(), &mut data);
    let (gyc, kc) = (gy.clone(), k.clone());
    Tensor::make(
        "conv2d_dinput",
        vec![n, geom.c_in, geom.h, geom.w],
        data,
        vec![gy.clone(), k.clone()],
        move |_out, u, needs| {
            // <dinput(gy,k), u> = <gy, conv(u,k)>, linear in both arguments.
            let ggy = needs[0].then(|| conv2d_node(u, &kc, geom, n));
            let gk = needs[1].then(|| conv2d_kernel_grad_node(u, &gyc, geom, n));
            vec![ggy, gk]
        },
    )
}

fn conv2d_kernel_grad_node<T: Scalar>(
    x: &Tensor<T>,
    gy: &Tensor<T>,
    geom: ConvGeom,
    n: usize,
) -> Tensor<T> {
    let mut data = vec![T::ZERO; geom.c_out * geom.c_in * geom.kh * geom.kw];
    kernels::conv2d_kernel_grad(&geom, n, &x.inner.data.borrow(), &gy.inner.data.borrow(), &mut data);
    let (xc, gyc) = (x.clone(), gy.clone());
    Tensor::make(
        "conv2d_dkernel",
        vec![geom.c_out, geom.c_in, geom.kh, geom.kw],
        data,
        vec![x.clone(), gy.clone()],
        move |_out, u, needs| {
            // <dkernel(x,gy), u> = <gy, conv(x,u)>.
            let gx = needs[0].then(|| conv2d_input_grad_node(&gyc, u, geom, n));
            let ggy = needs[1].then(|| conv2d_node(&xc, u, geom, n));
            vec![gx, ggy]
        },
    )
}

// ---- broadcasting helpers ----

pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return None;
        };
    }
    Some(out)
}

fn padded_strides(shape: &[usize], out_nd: usize) -> Vec<usize> {
    // Row-major strides, 0 where the dim broadcasts, left-padded with 0.
    let mut strides = vec![0usize; out_nd];
    let off = out_nd - shape.len();
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[off + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Threshold above which elementwise loops are split across threads.
/// Work is partitioned over disjoint output ranges of pure per-element
/// functions, so results are bitwise identical for any thread count.
const PAR_ELEMWISE: usize = 1 << 15;

fn par_map1<T: Scalar>(a: &[T], f: impl Fn(T) -> T + Sync) -> Vec<T> {
    use rayon::prelude::*;
    let mut out = vec![T::ZERO; a.len()];
    if a.len() >= PAR_ELEMWISE {
        out.par_chunks_mut(8192)
            .zip(a.par_chunks(8192))
            .for_each(|(o, xs)| {
                for i in 0..o.len() {
                    o[i] = f(xs[i]);
                }
            });
    } else {
        for i in 0..a.len() {
            out[i] = f(a[i]);
        }
    }
    out
}

fn par_map2<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T + Sync) -> Vec<T> {
    use rayon::prelude::*;
    let mut out = vec![T::ZERO; a.len()];
    if a.len() >= PAR_ELEMWISE {
        out.par_chunks_mut(8192)
            .zip(a.par_chunks(8192).zip(b.par_chunks(8192)))
            .for_each(|(o, (xa, xb))| {
                for i in 0..o.len() {
                    o[i] = f(xa[i], xb[i]);
                }
            });
    } else {
        for i in 0..a.len() {
            out[i] = f(a[i], b[i]);
        }
    }
    out
}

/// Offsets into a broadcast operand for each run of `inner` output elements.
fn group_offsets(str_: &[usize], out_shape: &[usize], lead: usize, groups: usize) -> Vec<usize> {
    let mut offs = Vec::with_capacity(groups);
    let mut idx = vec![0usize; lead];
    let mut off = 0usize;
    for _ in 0..groups {
        offs.push(off);
        for d in (0..lead).rev() {
            idx[d] += 1;
            off += str_[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            off -= str_[d] * out_shape[d];
        }
    }
    offs
}

fn broadcast_zip<T: Scalar>(
    a: &[T],
    ash: &[usize],
    b: &[T],
    bsh: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T + Sync,
) -> Vec<T> {
    use rayon::prelude::*;
    let n = numel_of(out_shape);
    if ash == out_shape && bsh == out_shape {
        return par_map2(a, b, f);
    }
    if ash == out_shape && b.len() == 1 {
        let y = b[0];
        return par_map2(a, a, move |x, _| f(x, y));
    }
    if bsh == out_shape && a.len() == 1 {
        let x = a[0];
        return par_map2(b, b, move |y, _| f(x, y));
    }
    let nd = out_shape.len();
    let astr = padded_strides(ash, nd);
    let bstr = padded_strides(bsh, nd);

    // Fast path: one side is output-shaped, the other constant over a
    // trailing run (per-channel scale/shift, keepdim divisors, biases).
    let full_small = if ash == out_shape {
        Some((a, b, &bstr, false))
    } else if bsh == out_shape {
        Some((b, a, &astr, true))
    } else {
        None
    };
    if let Some((full, small, sstr, swapped)) = full_small {
        let mut inner = 1usize;
        let mut split = nd;
        while split > 0 && sstr[split - 1] == 0 {
            inner *= out_shape[split - 1];
            split -= 1;
        }
        if inner >= 8 {
            let groups = n / inner;
            let offs = group_offsets(sstr, out_shape, split, groups);
            let mut out = vec![T::ZERO; n];
            let run = |o: &mut [T], g: usize| {
                let sv = small[offs[g]];
                let fv = &full[g * inner..(g + 1) * inner];
                if swapped {
                    for i in 0..o.len() {
                        o[i] = f(sv, fv[i]);
                    }
                } else {
                    for i in 0..o.len() {
                        o[i] = f(fv[i], sv);
                    }
                }
            };
            if n >= PAR_ELEMWISE {
                out.par_chunks_mut(inner)
                    .enumerate()
                    .for_each(|(g, o)| run(o, g));
            } else {
                for (g, o) in out.chunks_mut(inner).enumerate() {
                    run(o, g);
                }
            }
            return out;
        }
    }

    // General strided odometer.
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let (mut ai, mut bi) = (0usize, 0usize);
    for _ in 0..n {
        out.push(f(a[ai], b[bi]));
        for d in (0..nd).rev() {
            idx[d] += 1;
            ai += astr[d];
            bi += bstr[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ai -= astr[d] * out_shape[d];
            bi -= bstr[d] * out_shape[d];
        }
    }
    out
}

/// Accumulate `src` (shape `in_shape`) into `dst` (shape `keep_shape`, same
/// rank, reduced dims = 1), summing in ascending source order. Trailing
/// reduced dims collapse into tight inner sums.
fn reduce_into<T: Scalar>(src: &[T], in_shape: &[usize], keep_shape: &[usize], dst: &mut [T]) {
    let nd = in_shape.len();
    let dstr = padded_strides(keep_shape, nd);
    let mut inner = 1usize;
    let mut split = nd;
    while split > 0 && dstr[split - 1] == 0 && keep_shape[split - 1] == 1 {
        inner *= in_shape[split - 1];
        split -= 1;
    }
    let groups = src.len() / inner.max(1);
    let mut idx = vec![0usize; split];
    let mut di = 0usize;
    for g in 0..groups {
        let run = &src[g * inner..(g + 1) * inner];
        let mut s = dst[di];
        for &v in run {
            s = s + v;
        }
        dst[di] = s;
        for d in (0..split).rev() {
            idx[d] += 1;
            di += dstr[d];
            if idx[d] < in_shape[d] {
                break;
            }
            idx[d] = 0;
            di -= dstr[d] * in_shape[d];
        }
    }
}

#[cfg(test)]
mod tests;
