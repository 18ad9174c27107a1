use std::cell::{Ref, RefCell};

use crate::error::{arg_err, shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
///
/// A `Var` is only meaningful for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Silu,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Act(Activation),
    Exp,
    Log,
    Sqrt,
    Atan,
    Square,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pool {
    GlobalAvgSpatial,
    GlobalMaxSpatial,
    AvgOverChannels,
    MaxOverChannels,
    MaxPool2d {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Combine {
    Concat { axis: usize },
    Add,
    MulBroadcast,
}

/// Batch normalization mode. Evaluation mode borrows the running statistics.
#[derive(Clone, Copy, Debug)]
pub enum NormMode<'a, T> {
    Train,
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

/// Per-channel statistics of one training-mode batch norm call.
/// `var` is the unbiased estimate used for running-stat updates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BatchStats<T> {
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&self, running_mean: &mut [T], running_var: &mut [T], momentum: T) {
        let keep = T::one() - momentum;
        for (r, &b) in running_mean.iter_mut().zip(&self.mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in running_var.iter_mut().zip(&self.var) {
            *r = keep * *r + momentum * b;
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    PoolScatter {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgSpatial {
        input: Var,
    },
    AvgOverChannels {
        input: Var,
    },
    Unary {
        input: Var,
        kind: Unary,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Linear {
        input: Var,
        weight: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Binary {
        a: Var,
        b: Var,
        kind: Binary,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    Upsample {
        input: Var,
        factor: usize,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    Reshape {
        input: Var,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    Clamp {
        input: Var,
        lo: Option<T>,
        hi: Option<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    retain: bool,
}

/// Ordered record of executed operations supporting one reverse sweep.
///
/// Operations are methods on the tape; each returns a [`Var`] for its
/// output. Only values that depend on a `requires_grad` leaf keep the data
/// needed for the adjoint pass, so a tape without trainable leaves acts as a
/// plain forward evaluator.
///
/// After [`Tape::backward`], gradients are kept for leaves and for nodes
/// marked with [`Tape::retain_grad`]. A second backward pass is rejected
/// until [`Tape::zero_grad`] is called.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Option<Vec<Option<Tensor<T>>>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let op = if needs_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            needs_grad,
            retain: false,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].needs_grad)
    }

    /// Records an input tensor. Leaves with `requires_grad` receive a
    /// gradient from [`Tape::backward`] when reachable from the loss.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let v = self.push(value, Op::Leaf, requires_grad);
        if requires_grad {
            self.nodes.borrow_mut()[v.0].retain = true;
        }
        v
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `x`, cut from the gradient flow.
    pub fn detach(&self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    /// Keep the gradient of an intermediate value after backward.
    pub fn retain_grad(&self, x: Var) {
        self.nodes.borrow_mut()[x.0].retain = true;
    }

    pub fn value(&self, x: Var) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[x.0].value)
    }

    pub fn shape(&self, x: Var) -> Vec<usize> {
        self.nodes.borrow()[x.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes.borrow()[x.0].needs_grad
    }

    /// Gradient of the last backward pass with respect to `x`.
    ///
    /// `None` if backward has not run, `x` is unreachable from the loss, or
    /// its gradient was not retained.
    pub fn grad(&self, x: Var) -> Option<Tensor<T>> {
        self.grads.borrow().as_ref().and_then(|g| g.get(x.0).cloned().flatten())
    }

    pub fn zero_grad(&self) {
        *self.grads.borrow_mut() = None;
    }

    // ---------------------------------------------------------------- conv

    pub fn conv2d(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        const OP: &str = "conv2d";
        if stride == 0 {
            return Err(arg_err(OP, "stride must be at least 1"));
        }
        let (out, geom) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            let w = &nodes[weight.0].value;
            let (n, cin, h, wd) = x.dims4(OP)?;
            let (cout, wcin, kh, kw) = w.dims4(OP)?;
            if cin != wcin {
                return Err(shape_err(
                    OP,
                    format!("input has {cin} channels but weight expects {wcin}"),
                ));
            }
            let bias_data = match bias {
                Some(b) => {
                    let b = &nodes[b.0].value;
                    if b.shape() != [cout] {
                        return Err(shape_err(
                            OP,
                            format!("bias shape {:?} does not match {cout} outputs", b.shape()),
                        ));
                    }
                    Some(b.data())
                }
                None => None,
            };
            let (ho, wo) = match (
                kernels::window_out(h, kh, stride, padding),
                kernels::window_out(wd, kw, stride, padding),
            ) {
                (Some(ho), Some(wo)) => (ho, wo),
                _ => {
                    return Err(shape_err(
                        OP,
                        format!("kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {padding})"),
                    ))
                }
            };
            if !x.all_finite() {
                return Err(TensorError::NonFinite { op: OP });
            }
            let geom = ConvGeom {
                n,
                cin,
                h,
                w: wd,
                cout,
                kh,
                kw,
                stride,
                pad: padding,
                ho,
                wo,
            };
            let data = kernels::conv_forward(x.data(), w.data(), bias_data, &geom);
            (Tensor::new([n, cout, ho, wo], data)?, geom)
        };
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let ng = self.needs(&deps);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            ng,
        ))
    }

    // ---------------------------------------------------------------- pooling

    pub fn pool(&self, input: Var, kind: Pool) -> Result<Var> {
        const OP: &str = "pool";
        let ng = self.needs(&[input]);
        let nodes = self.nodes.borrow();
        let x = &nodes[input.0].value;
        let (n, c, h, w) = x.dims4(OP)?;
        if h * w == 0 || c == 0 {
            return Err(shape_err(OP, format!("empty extent in {:?}", x.shape())));
        }
        let xd = x.data();
        let (value, op) = match kind {
            Pool::GlobalAvgSpatial => {
                let inv = T::one() / T::of((h * w) as f64);
                let data = xd.chunks(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
                (Tensor::new([n, c, 1, 1], data)?, Op::GlobalAvgSpatial { input })
            }
            Pool::GlobalMaxSpatial => {
                let (data, argmax) =
                    kernels::maxpool_forward(xd, n * c, h, w, h.max(w), h.max(w), 0, 1, 1);
                (Tensor::new([n, c, 1, 1], data)?, Op::PoolScatter { input, argmax })
            }
            Pool::AvgOverChannels | Pool::MaxOverChannels => {
                let hw = h * w;
                let is_max = kind == Pool::MaxOverChannels;
                let mut data = Vec::with_capacity(n * hw);
                let mut argmax = Vec::new();
                for b in 0..n {
                    let base = b * c * hw;
                    for p in 0..hw {
                        if is_max {
                            let mut best = xd[base + p];
                            let mut bi = base + p;
                            for ch in 1..c {
                                let idx = base + ch * hw + p;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    bi = idx;
                                }
                            }
                            data.push(best);
                            argmax.push(bi);
                        } else {
                            let s: T = (0..c).map(|ch| xd[base + ch * hw + p]).sum();
                            data.push(s / T::of(c as f64));
                        }
                    }
                }
                let t = Tensor::new([n, 1, h, w], data)?;
                if is_max {
                    (t, Op::PoolScatter { input, argmax })
                } else {
                    (t, Op::AvgOverChannels { input })
                }
            }
            Pool::MaxPool2d {
                kernel,
                stride,
                padding,
            } => {
                if kernel == 0 || stride == 0 || 2 * padding > kernel {
                    return Err(arg_err(
                        OP,
                        format!("invalid maxpool window k={kernel} s={stride} p={padding}"),
                    ));
                }
                let (ho, wo) = match (
                    kernels::window_out(h, kernel, stride, padding),
                    kernels::window_out(w, kernel, stride, padding),
                ) {
                    (Some(a), Some(b)) => (a, b),
                    _ => {
                        return Err(shape_err(
                            OP,
                            format!("window {kernel} does not fit {h}x{w} with pad {padding}"),
                        ))
                    }
                };
                let (data, argmax) =
                    kernels::maxpool_forward(xd, n * c, h, w, kernel, stride, padding, ho, wo);
                (Tensor::new([n, c, ho, wo], data)?, Op::PoolScatter { input, argmax })
            }
        };
        drop(nodes);
        Ok(self.push(value, op, ng))
    }

    // ---------------------------------------------------------------- elementwise

    pub fn unary(&self, input: Var, kind: Unary) -> Var {
        let ng = self.needs(&[input]);
        let value = {
            let x = self.value(input);
            x.map(|v| match kind {
                Unary::Act(Activation::Sigmoid) => kernels::sigmoid(v),
                Unary::Act(Activation::Silu) => v * kernels::sigmoid(v),
                Unary::Act(Activation::Relu) => v.max(T::zero()),
                Unary::Exp => v.exp(),
                Unary::Log => v.ln(),
                Unary::Sqrt => v.sqrt(),
                Unary::Atan => v.atan(),
                Unary::Square => v * v,
                Unary::Neg => -v,
            })
        };
        self.push(value, Op::Unary { input, kind }, ng)
    }

    pub fn activation(&self, input: Var, kind: Activation) -> Var {
        self.unary(input, Unary::Act(kind))
    }

    pub fn sigmoid(&self, input: Var) -> Var {
        self.activation(input, Activation::Sigmoid)
    }

    pub fn silu(&self, input: Var) -> Var {
        self.activation(input, Activation::Silu)
    }

    pub fn relu(&self, input: Var) -> Var {
        self.activation(input, Activation::Relu)
    }

    pub fn square(&self, input: Var) -> Var {
        self.unary(input, Unary::Square)
    }

    pub fn atan(&self, input: Var) -> Var {
        self.unary(input, Unary::Atan)
    }

    pub fn exp(&self, input: Var) -> Var {
        self.unary(input, Unary::Exp)
    }

    pub fn log(&self, input: Var) -> Var {
        self.unary(input, Unary::Log)
    }

    /// `input * factor + offset`.
    pub fn affine(&self, input: Var, factor: T, offset: T) -> Var {
        let ng = self.needs(&[input]);
        let value = self.value(input).map(|v| v * factor + offset);
        self.push(value, Op::Scale { input, factor }, ng)
    }

    pub fn scale(&self, input: Var, factor: T) -> Var {
        self.affine(input, factor, T::zero())
    }

    /// Clamp to `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(&self, input: Var, lo: Option<T>, hi: Option<T>) -> Var {
        let ng = self.needs(&[input]);
        let value = self.value(input).map(|mut v| {
            if let Some(lo) = lo {
                v = v.max(lo);
            }
            if let Some(hi) = hi {
                v = v.min(hi);
            }
            v
        });
        self.push(value, Op::Clamp { input, lo, hi }, ng)
    }

    /// Elementwise binary op; `b` broadcasts to `a` along its size-1 axes.
    pub fn binary(&self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let ng = self.needs(&[a, b]);
        let value = {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let f = |x: T, y: T| match kind {
                Binary::Add => x + y,
                Binary::Sub => x - y,
                Binary::Mul => x * y,
                Binary::Div => x / y,
                Binary::Min => x.min(y),
                Binary::Max => x.max(y),
            };
            let data = if av.shape() == bv.shape() {
                av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
            } else {
                let map = broadcast_map("binary", av.shape(), bv.shape())?;
                let bd = bv.data();
                av.data().iter().zip(map).map(|(&x, j)| f(x, bd[j])).collect()
            };
            Tensor::new(av.shape().to_vec(), data)?
        };
        Ok(self.push(value, Op::Binary { a, b, kind }, ng))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    pub fn minimum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Min)
    }

    pub fn maximum(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Max)
    }

    pub fn combine(&self, kind: Combine, a: Var, b: Var) -> Result<Var> {
        match kind {
            Combine::Concat { axis } => self.concat(&[a, b], axis),
            Combine::Add => self.add(a, b),
            Combine::MulBroadcast => self.mul(a, b),
        }
    }

    pub fn concat(&self, inputs: &[Var], axis: usize) -> Result<Var> {
        const OP: &str = "concat";
        let ng = self.needs(inputs);
        let value = {
            let nodes = self.nodes.borrow();
            let first = match inputs.first() {
                Some(v) => nodes[v.0].value.shape().to_vec(),
                None => return Err(arg_err(OP, "no inputs")),
            };
            if axis >= first.len() {
                return Err(shape_err(OP, format!("axis {axis} out of range for {first:?}")));
            }
            let mut out_shape = first.clone();
            out_shape[axis] = 0;
            for v in inputs {
                let s = nodes[v.0].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
                if !compatible {
                    return Err(shape_err(OP, format!("cannot concat {s:?} with {first:?} on axis {axis}")));
                }
                out_shape[axis] += s[axis];
            }
            let outer: usize = first[..axis].iter().product();
            let inner: usize = first[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(out_shape.iter().product());
            for o in 0..outer {
                for v in inputs {
                    let t = &nodes[v.0].value;
                    let block = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            Tensor::new(out_shape, data)?
        };
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    // ---------------------------------------------------------------- normalization

    pub fn batchnorm2d(
        &self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        const OP: &str = "batchnorm2d";
        let ng = self.needs(&[input, gamma, beta]);
        let nodes = self.nodes.borrow();
        let x = &nodes[input.0].value;
        let (n, c, h, w) = x.dims4(OP)?;
        let (g, b) = (&nodes[gamma.0].value, &nodes[beta.0].value);
        if g.shape() != [c] || b.shape() != [c] {
            return Err(shape_err(
                OP,
                format!("gamma {:?} / beta {:?} do not match {c} channels", g.shape(), b.shape()),
            ));
        }
        let hw = h * w;
        let count = n * hw;
        let xd = x.data();
        let mut out = vec![T::zero(); xd.len()];
        let (op, stats) = match mode {
            NormMode::Train => {
                if count < 2 {
                    return Err(arg_err(OP, "training mode needs at least 2 values per channel"));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let mut inv_std = vec![T::zero(); c];
                let mut xhat = vec![T::zero(); xd.len()];
                let cnt = T::of(count as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for bi in 0..n {
                        let off = (bi * c + ch) * hw;
                        s += xd[off..off + hw].iter().copied().sum::<T>();
                    }
                    let m = s / cnt;
                    let mut sq = T::zero();
                    for bi in 0..n {
                        let off = (bi * c + ch) * hw;
                        sq += xd[off..off + hw].iter().map(|&v| (v - m) * (v - m)).sum::<T>();
                    }
                    let v = sq / cnt;
                    let is = T::one() / (v + eps).sqrt();
                    for bi in 0..n {
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            let xh = (xd[i] - m) * is;
                            xhat[i] = xh;
                            out[i] = g.data()[ch] * xh + b.data()[ch];
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq / T::of((count - 1) as f64);
                    inv_std[ch] = is;
                }
                (
                    Op::BatchNormTrain {
                        input,
                        gamma,
                        beta,
                        xhat,
                        inv_std,
                    },
                    Some(BatchStats { mean, var }),
                )
            }
            NormMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(shape_err(OP, "running statistics do not match channel count"));
                }
                let inv_std: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                for bi in 0..n {
                    for ch in 0..c {
                        let off = (bi * c + ch) * hw;
                        let (m, is, gg, bb) = (running_mean[ch], inv_std[ch], g.data()[ch], b.data()[ch]);
                        for i in off..off + hw {
                            out[i] = gg * (xd[i] - m) * is + bb;
                        }
                    }
                }
                (
                    Op::BatchNormEval {
                        input,
                        gamma,
                        beta,
                        mean: running_mean.to_vec(),
                        inv_std,
                    },
                    None,
                )
            }
        };
        let value = Tensor::new(x.shape().to_vec(), out)?;
        drop(nodes);
        Ok((self.push(value, op, ng), stats))
    }

    // ---------------------------------------------------------------- linear algebra

    /// `input @ weight^T` over the trailing dimension; weight is `[D_out, D_in]`.
    pub fn linear(&self, input: Var, weight: Var) -> Result<Var> {
        const OP: &str = "linear";
        let ng = self.needs(&[input, weight]);
        let value = {
            let nodes = self.nodes.borrow();
            let (x, w) = (&nodes[input.0].value, &nodes[weight.0].value);
            let (dout, din) = match w.shape() {
                &[o, i] => (o, i),
                s => return Err(shape_err(OP, format!("weight must be 2-D, got {s:?}"))),
            };
            if x.shape().last() != Some(&din) {
                return Err(shape_err(
                    OP,
                    format!("input {:?} trailing extent must be {din}", x.shape()),
                ));
            }
            let m = x.numel() / din;
            let mut out = vec![T::zero(); m * dout];
            gemm(m, din, dout, x.data(), false, w.data(), true, &mut out, false);
            let mut shape = x.shape().to_vec();
            *shape.last_mut().expect("non-empty") = dout;
            Tensor::new(shape, out)?
        };
        Ok(self.push(value, Op::Linear { input, weight }, ng))
    }

    // ---------------------------------------------------------------- reshaping and reductions

    pub fn sum(&self, input: Var) -> Var {
        let ng = self.needs(&[input]);
        let value = Tensor::scalar(self.value(input).sum());
        self.push(value, Op::Sum { input }, ng)
    }

    pub fn mean(&self, input: Var) -> Var {
        let n = self.value(input).numel().max(1);
        let s = self.sum(input);
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn reshape(&self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let ng = self.needs(&[input]);
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { input }, ng))
    }

    /// Nearest-neighbour upsampling of a `[N,C,H,W]` map by an integer factor.
    pub fn upsample_nearest(&self, input: Var, factor: usize) -> Result<Var> {
        const OP: &str = "upsample";
        if factor == 0 {
            return Err(arg_err(OP, "factor must be positive"));
        }
        let ng = self.needs(&[input]);
        let value = {
            let x = self.value(input);
            let (n, c, h, w) = x.dims4(OP)?;
            let (ho, wo) = (h * factor, w * factor);
            let xd = x.data();
            let mut out = Vec::with_capacity(n * c * ho * wo);
            for p in 0..n * c {
                for oh in 0..ho {
                    let row = &xd[p * h * w + (oh / factor) * w..][..w];
                    for ow in 0..wo {
                        out.push(row[ow / factor]);
                    }
                }
            }
            Tensor::new([n, c, ho, wo], out)?
        };
        Ok(self.push(value, Op::Upsample { input, factor }, ng))
    }

    /// Selects flat elements into a 1-D tensor.
    pub fn gather(&self, input: Var, indices: &[usize]) -> Result<Var> {
        let ng = self.needs(&[input]);
        let value = {
            let x = self.value(input);
            let xd = x.data();
            if let Some(&bad) = indices.iter().find(|&&i| i >= xd.len()) {
                return Err(arg_err("gather", format!("index {bad} out of range {}", xd.len())));
            }
            Tensor::new([indices.len()], indices.iter().map(|&i| xd[i]).collect())?
        };
        Ok(self.push(
            value,
            Op::Gather {
                input,
                indices: indices.to_vec(),
            },
            ng,
        ))
    }

    /// Elementwise binary cross-entropy of `sigmoid(logits)` against fixed targets.
    pub fn bce_with_logits(&self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let ng = self.needs(&[logits]);
        let value = {
            let x = self.value(logits);
            if x.shape() != targets.shape() {
                return Err(shape_err(
                    "bce_with_logits",
                    format!("logits {:?} vs targets {:?}", x.shape(), targets.shape()),
                ));
            }
            let data = x
                .data()
                .iter()
                .zip(targets.data())
                .map(|(&l, &t)| kernels::bce_with_logits(l, t))
                .collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        Ok(self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            ng,
        ))
    }

    // ---------------------------------------------------------------- reverse sweep

    /// Populates `d loss / d x` for every `requires_grad` leaf reachable from
    /// `loss` (and every retained intermediate).
    pub fn backward(&self, loss: Var) -> Result<()> {
        if self.grads.borrow().is_some() {
            return Err(TensorError::GradientsNotReset);
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: root.value.shape().to_vec(),
            });
        }
        if !root.value.all_finite() {
            return Err(TensorError::NonFinite { op: "backward" });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if root.needs_grad {
            grads[loss.0] = Some(Tensor::ones(root.value.shape().to_vec()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            propagate(&nodes, node, &g, &mut grads)?;
            if node.retain {
                grads[i] = Some(g);
            }
        }
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }
}

/// For each flat index of `a_shape`, the flat index into `b_shape` when `b`
/// is broadcast along its size-1 axes.
fn broadcast_map(op: &'static str, a_shape: &[usize], b_shape: &[usize]) -> Result<Vec<usize>> {
    let ok = a_shape.len() == b_shape.len()
        && a_shape.iter().zip(b_shape).all(|(&a, &b)| b == a || b == 1);
    if !ok {
        return Err(shape_err(op, format!("cannot broadcast {b_shape:?} to {a_shape:?}")));
    }
    let rank = a_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if b_shape[d] == 1 { 0 } else { acc };
        acc *= b_shape[d];
    }
    let total: usize = a_shape.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..total {
        out.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += strides[d];
            if idx[d] < a_shape[d] {
                break;
            }
            cur -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Ok(out)
}

fn accumulate<T: Real>(nodes: &[Node<T>], grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => g.data_mut().iter_mut().zip(data).for_each(|(a, b)| *a += b),
        slot @ None => {
            *slot = Some(
                Tensor::new(nodes[v.0].value.shape().to_vec(), data).expect("gradient shape matches value"),
            )
        }
    }
}

fn propagate<T: Real>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) -> Result<()> {
    let gd = g.data();
    let val = |v: Var| &nodes[v.0].value;
    let need = |v: Var| nodes[v.0].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
        } => {
            let r = kernels::conv_backward(
                val(*input).data(),
                val(*weight).data(),
                gd,
                geom,
                (need(*input), need(*weight), bias.is_some_and(need)),
            );
            if let Some(dx) = r.dx {
                accumulate(nodes, grads, *input, dx);
            }
            if let Some(dw) = r.dw {
                accumulate(nodes, grads, *weight, dw);
            }
            if let (Some(b), Some(db)) = (bias, r.db) {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::PoolScatter { input, argmax } => {
            let mut dx = vec![T::zero(); val(*input).numel()];
            for (&i, &gv) in argmax.iter().zip(gd) {
                dx[i] += gv;
            }
            accumulate(nodes, grads, *input, dx);
        }
        Op::GlobalAvgSpatial { input } => {
            let x = val(*input);
            let (_, _, h, w) = x.dims4("pool")?;
            let inv = T::one() / T::of((h * w) as f64);
            let dx = gd.iter().flat_map(|&gv| std::iter::repeat(gv * inv).take(h * w)).collect();
            accumulate(nodes, grads, *input, dx);
        }
        Op::AvgOverChannels { input } => {
            let x = val(*input);
            let (n, c, h, w) = x.dims4("pool")?;
            let hw = h * w;
            let inv = T::one() / T::of(c as f64);
            let mut dx = vec![T::zero(); x.numel()];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    for p in 0..hw {
                        dx[off + p] = gd[b * hw + p] * inv;
                    }
                }
            }
            accumulate(nodes, grads, *input, dx);
        }
        Op::Unary { input, kind } => {
            let x = val(*input).data();
            let y = node.value.data();
            let dx = gd
                .iter()
                .zip(x.iter().zip(y))
                .map(|(&gv, (&xv, &yv))| {
                    gv * match kind {
                        Unary::Act(Activation::Sigmoid) => yv * (T::one() - yv),
                        Unary::Act(Activation::Silu) => {
                            let s = kernels::sigmoid(xv);
                            s + xv * s * (T::one() - s)
                        }
                        Unary::Act(Activation::Relu) => {
                            if xv > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Exp => yv,
                        Unary::Log => T::one() / xv,
                        Unary::Sqrt => T::one() / (yv + yv),
                        Unary::Atan => T::one() / (T::one() + xv * xv),
                        Unary::Square => xv + xv,
                        Unary::Neg => -T::one(),
                    }
                })
                .collect();
            accumulate(nodes, grads, *input, dx);
        }
        Op::BatchNormTrain {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let (n, c, h, w) = val(*input).dims4("batchnorm2d")?;
            let hw = h * w;
            let m = T::of((n * hw) as f64);
            let gam = val(*gamma).data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ch in 0..c {
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    for i in off..off + hw {
                        dgamma[ch] += gd[i] * xhat[i];
                        dbeta[ch] += gd[i];
                    }
                }
            }
            if need(*input) {
                let mut dx = vec![T::zero(); gd.len()];
                for ch in 0..c {
                    // dxhat = g * gamma; sums reuse dbeta/dgamma.
                    let k = gam[ch] * inv_std[ch] / m;
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            dx[i] = k * (m * gd[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                        }
                    }
                }
                accumulate(nodes, grads, *input, dx);
            }
            accumulate(nodes, grads, *gamma, dgamma);
            accumulate(nodes, grads, *beta, dbeta);
        }
        Op::BatchNormEval {
            input,
            gamma,
            beta,
            mean,
            inv_std,
        } => {
            let x = val(*input);
            let (n, c, h, w) = x.dims4("batchnorm2d")?;
            let hw = h * w;
            let xd = x.data();
            let gam = val(*gamma).data();
            let mut dx = vec![T::zero(); gd.len()];
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let off = (b * c + ch) * hw;
                    for i in off..off + hw {
                        dx[i] = gd[i] * gam[ch] * inv_std[ch];
                        dgamma[ch] += gd[i] * (xd[i] - mean[ch]) * inv_std[ch];
                        dbeta[ch] += gd[i];
                    }
                }
            }
            accumulate(nodes, grads, *input, dx);
            accumulate(nodes, grads, *gamma, dgamma);
            accumulate(nodes, grads, *beta, dbeta);
        }
        Op::Linear { input, weight } => {
            let (x, w) = (val(*input), val(*weight));
            let (dout, din) = (w.shape()[0], w.shape()[1]);
            let m = x.numel() / din;
            if need(*input) {
                let mut dx = vec![T::zero(); m * din];
                gemm(m, dout, din, gd, false, w.data(), false, &mut dx, false);
                accumulate(nodes, grads, *input, dx);
            }
            if need(*weight) {
                let mut dw = vec![T::zero(); dout * din];
                gemm(dout, m, din, gd, true, x.data(), false, &mut dw, false);
                accumulate(nodes, grads, *weight, dw);
            }
        }
        Op::Concat { inputs, axis } => {
            let shape = node.value.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis] * inner;
            let mut start = 0;
            for v in inputs {
                let block = val(*v).shape()[*axis] * inner;
                if need(*v) {
                    let mut dx = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        dx.extend_from_slice(&gd[o * total + start..o * total + start + block]);
                    }
                    accumulate(nodes, grads, *v, dx);
                }
                start += block;
            }
        }
        Op::Binary { a, b, kind } => {
            let (av, bv) = (val(*a), val(*b));
            let ad = av.data();
            let bd = bv.data();
            let map: Vec<usize> = if av.shape() == bv.shape() {
                (0..ad.len()).collect()
            } else {
                broadcast_map("binary", av.shape(), bv.shape())?
            };
            let mut da = need(*a).then(|| vec![T::zero(); ad.len()]);
            let mut db = need(*b).then(|| vec![T::zero(); bd.len()]);
            for (i, &j) in map.iter().enumerate() {
                let (x, y, gv) = (ad[i], bd[j], gd[i]);
                let (ga, gb) = match kind {
                    Binary::Add => (gv, gv),
                    Binary::Sub => (gv, -gv),
                    Binary::Mul => (gv * y, gv * x),
                    Binary::Div => (gv / y, -gv * x / (y * y)),
                    Binary::Min => {
                        if x <= y {
                            (gv, T::zero())
                        } else {
                            (T::zero(), gv)
                        }
                    }
                    Binary::Max => {
                        if x >= y {
                            (gv, T::zero())
                        } else {
                            (T::zero(), gv)
                        }
                    }
                };
                if let Some(da) = da.as_mut() {
                    da[i] += ga;
                }
                if let Some(db) = db.as_mut() {
                    db[j] += gb;
                }
            }
            if let Some(da) = da {
                accumulate(nodes, grads, *a, da);
            }
            if let Some(db) = db {
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Scale { input, factor } => {
            accumulate(nodes, grads, *input, gd.iter().map(|&v| v * *factor).collect());
        }
        Op::Clamp { input, lo, hi } => {
            let x = val(*input).data();
            let dx = gd
                .iter()
                .zip(x)
                .map(|(&gv, &xv)| {
                    let inside = lo.is_none_or(|l| xv > l) && hi.is_none_or(|h| xv < h);
                    if inside {
                        gv
                    } else {
                        T::zero()
                    }
                })
                .collect();
            accumulate(nodes, grads, *input, dx);
        }
        Op::Sum { input } => {
            let n = val(*input).numel();
            accumulate(nodes, grads, *input, vec![gd[0]; n]);
        }
        Op::Upsample { input, factor } => {
            let x = val(*input);
            let (n, c, h, w) = x.dims4("upsample")?;
            let (ho, wo) = (h * factor, w * factor);
            let mut dx = vec![T::zero(); x.numel()];
            for p in 0..n * c {
                for oh in 0..ho {
                    for ow in 0..wo {
                        dx[p * h * w + (oh / factor) * w + ow / factor] += gd[p * ho * wo + oh * wo + ow];
                    }
                }
            }
            accumulate(nodes, grads, *input, dx);
        }
        Op::Gather { input, indices } => {
            let mut dx = vec![T::zero(); val(*input).numel()];
            for (&i, &gv) in indices.iter().zip(gd) {
                dx[i] += gv;
            }
            accumulate(nodes, grads, *input, dx);
        }
        Op::Reshape { input } => {
            accumulate(nodes, grads, *input, gd.to_vec());
        }
        Op::BceWithLogits { logits, targets } => {
            let x = val(*logits).data();
            let dx = gd
                .iter()
                .zip(x.iter().zip(targets))
                .map(|(&gv, (&xv, &t))| gv * (kernels::sigmoid(xv) - t))
                .collect();
            accumulate(nodes, grads, *logits, dx);
        }
    }
    Ok(())
}
