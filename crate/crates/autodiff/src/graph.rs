//! The computation graph: a tape of operation records built eagerly during the
//! forward pass and replayed in reverse by [`Graph::backward`].
//!
//! Complex gradients use the conjugate-cotangent convention: for a real loss
//! `L` and complex `z = x + iy` the stored gradient is `dL/dx + i dL/dy`, so the
//! update `z <- z - lr * grad` descends `L`. Under this convention a linear map
//! `A` pulls gradients back through `A^H`; for the unitary FFT that is simply
//! the inverse transform.

use num_complex::Complex64;

use crate::conv::{self, ConvDims};
use crate::error::{AutodiffError, Result};
use crate::fft::{fft2_inplace, FftDirection};
use crate::tensor::{broadcast_binary, broadcast_shape, reduce_to, Dtype, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolMode {
    AvgDown,
    NearestUp,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Abs2(Var),
    LeakyRelu(Var, f64),
    Clamp(Var, f64, f64),
    ToComplex(Var),
    MakeComplex(Var, Var),
    RealPart(Var),
    ImagPart(Var),
    Fft2(Var, FftDirection),
    ShiftStack(Var, Vec<(isize, isize)>),
    Conv2d(Var, Var, Var),
    Pool(Var, PoolMode),
    Sum(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations on [`Tensor`]s and computes reverse-mode gradients.
///
/// Single-threaded; build one graph per independent loss evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    first_nonfinite: Option<usize>,
}

/// Gradients indexed by [`Var`]; only nodes that require gradients get one.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn czero() -> Complex64 {
    Complex64::new(0.0, 0.0)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Index of the first node whose value contained a NaN or infinity, if any.
    /// Division by zero and similar follow IEEE semantics; this flag is how a
    /// caller learns about it.
    pub fn first_nonfinite(&self) -> Option<usize> {
        self.first_nonfinite
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some(self.nodes.len());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf without gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn dtype(&self, v: Var) -> Dtype {
        self.nodes[v.0].value.dtype()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn expect_dtype(&self, op: &'static str, v: Var, dt: Dtype) -> Result<()> {
        let got = self.dtype(v);
        if got != dt {
            return Err(AutodiffError::DtypeMismatch {
                op,
                expected: dt,
                got,
            });
        }
        Ok(())
    }

    // ---- elementwise binary ------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, Dtype)> {
        let (da, db) = (self.dtype(a), self.dtype(b));
        if da != db {
            return Err(AutodiffError::DtypeMismatch {
                op: name,
                expected: da,
                got: db,
            });
        }
        Ok((broadcast_shape(name, self.shape(a), self.shape(b))?, da))
    }

    fn binary_apply(
        &self,
        a: Var,
        b: Var,
        out: &[usize],
        fr: impl Fn(f64, f64) -> f64,
        fc: impl Fn(Complex64, Complex64) -> Complex64,
    ) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        match ta.dtype() {
            Dtype::Real => Tensor::from_real(
                out.to_vec(),
                broadcast_binary(ta.re(), ta.shape(), tb.re(), tb.shape(), out, fr),
            ),
            Dtype::Complex => Tensor::from_complex(
                out.to_vec(),
                broadcast_binary(ta.cx(), ta.shape(), tb.cx(), tb.shape(), out, fc),
            ),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary("add", a, b)?;
        let v = self.binary_apply(a, b, &out, |x, y| x + y, |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary("sub", a, b)?;
        let v = self.binary_apply(a, b, &out, |x, y| x - y, |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary("mul", a, b)?;
        let v = self.binary_apply(a, b, &out, |x, y| x * y, |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (out, _) = self.binary("div", a, b)?;
        let v = self.binary_apply(a, b, &out, |x, y| x / y, |x, y| x / y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Div(a, b), rg))
    }

    // ---- elementwise unary -------------------------------------------------

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale_impl(a, -1.0, true)
    }

    /// Multiplication by a real constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.scale_impl(a, c, false)
    }

    fn scale_impl(&mut self, a: Var, c: f64, neg: bool) -> Var {
        let t = self.value(a);
        let v = match t.dtype() {
            Dtype::Real => t.map_real(|x| c * x),
            Dtype::Complex => t.map_complex(|z| z * c),
        };
        let rg = self.rg(&[a]);
        let op = if neg { Op::Neg(a) } else { Op::Scale(a, c) };
        self.push(v, op, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = match t.dtype() {
            Dtype::Real => t.map_real(f64::exp),
            Dtype::Complex => t.map_complex(|z| z.exp()),
        };
        let rg = self.rg(&[a]);
        self.push(v, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.expect_dtype("log", a, Dtype::Real)?;
        let v = self.value(a).map_real(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Log(a), rg))
    }

    /// `|z|^2`; complex input gives a real output.
    pub fn abs2(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = match t.dtype() {
            Dtype::Real => t.map_real(|x| x * x),
            Dtype::Complex => Tensor::from_real(t.shape().to_vec(), t.cx().iter().map(|z| z.norm_sqr()).collect()),
        };
        let rg = self.rg(&[a]);
        self.push(v, Op::Abs2(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.expect_dtype("leaky_relu", a, Dtype::Real)?;
        let v = self.value(a).map_real(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::LeakyRelu(a, slope), rg))
    }

    /// `max(x, eps)`; the gradient is passed where `x >= eps`.
    pub fn clamp_min(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.clamp(a, eps, f64::INFINITY)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.expect_dtype("clamp", a, Dtype::Real)?;
        if lo > hi {
            return Err(AutodiffError::Invalid(format!("clamp bounds {lo} > {hi}")));
        }
        let v = self.value(a).map_real(|x| x.clamp(lo, hi));
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Clamp(a, lo, hi), rg))
    }

    pub fn to_complex(&mut self, a: Var) -> Result<Var> {
        self.expect_dtype("to_complex", a, Dtype::Real)?;
        let t = self.value(a);
        let v = Tensor::from_complex(
            t.shape().to_vec(),
            t.re().iter().map(|&x| Complex64::new(x, 0.0)).collect(),
        );
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::ToComplex(a), rg))
    }

    /// `re + i*im` from two real tensors of identical shape.
    pub fn make_complex(&mut self, re: Var, im: Var) -> Result<Var> {
        self.expect_dtype("make_complex", re, Dtype::Real)?;
        self.expect_dtype("make_complex", im, Dtype::Real)?;
        if self.shape(re) != self.shape(im) {
            return Err(AutodiffError::ShapeMismatch {
                op: "make_complex",
                lhs: self.shape(re).to_vec(),
                rhs: self.shape(im).to_vec(),
            });
        }
        let (tr, ti) = (self.value(re), self.value(im));
        let v = Tensor::from_complex(
            tr.shape().to_vec(),
            tr.re().iter().zip(ti.re()).map(|(&x, &y)| Complex64::new(x, y)).collect(),
        );
        let rg = self.rg(&[re, im]);
        Ok(self.push(v, Op::MakeComplex(re, im), rg))
    }

    pub fn real_part(&mut self, a: Var) -> Result<Var> {
        self.expect_dtype("real_part", a, Dtype::Complex)?;
        let t = self.value(a);
        let v = Tensor::from_real(t.shape().to_vec(), t.cx().iter().map(|z| z.re).collect());
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::RealPart(a), rg))
    }

    pub fn imag_part(&mut self, a: Var) -> Result<Var> {
        self.expect_dtype("imag_part", a, Dtype::Complex)?;
        let t = self.value(a);
        let v = Tensor::from_real(t.shape().to_vec(), t.cx().iter().map(|z| z.im).collect());
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::ImagPart(a), rg))
    }

    // ---- Fourier ops -------------------------------------------------------

    fn square_even(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] || shape[r - 1] % 2 != 0 {
            return Err(AutodiffError::OddDimensions {
                op,
                shape: shape.to_vec(),
            });
        }
        Ok((shape[r - 2], shape[r - 1]))
    }

    /// Unitary 2-D DFT over the last two (equal, even) axes.
    pub fn fft2(&mut self, a: Var, dir: FftDirection) -> Result<Var> {
        self.expect_dtype("fft2", a, Dtype::Complex)?;
        let (h, w) = Self::square_even("fft2", self.shape(a))?;
        let mut v = self.value(a).clone();
        fft2_inplace(v.as_complex_mut().unwrap(), h, w, dir);
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Fft2(a, dir), rg))
    }

    /// Stacks circularly shifted copies of a single `H x W` plane:
    /// `out[k, y, x] = a[(y - dy_k) mod H, (x - dx_k) mod W]` for shifts `(dy_k, dx_k)`.
    pub fn shift_stack(&mut self, a: Var, shifts: &[(isize, isize)]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(AutodiffError::Invalid(format!(
                "shift_stack expects a 2-D plane, got {shape:?}"
            )));
        }
        let (h, w) = (shape[0], shape[1]);
        let t = self.value(a);
        let v = match t.dtype() {
            Dtype::Real => Tensor::from_real(
                vec![shifts.len(), h, w],
                shifts.iter().flat_map(|&s| rolled(t.re(), h, w, s)).collect(),
            ),
            Dtype::Complex => Tensor::from_complex(
                vec![shifts.len(), h, w],
                shifts.iter().flat_map(|&s| rolled(t.cx(), h, w, s)).collect(),
            ),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::ShiftStack(a, shifts.to_vec()), rg))
    }

    // ---- network ops -------------------------------------------------------

    /// `x: [n, c, h, w]`, `k: [c', c, s, s]` (s odd), `bias: [c']` -> `[n, c', h, w]`.
    /// Stride 1 with zero padding `s/2`; cross-correlation convention.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Var) -> Result<Var> {
        for v in [x, k, bias] {
            self.expect_dtype("conv2d", v, Dtype::Real)?;
        }
        let d = self.conv_dims(x, k, bias)?;
        let out = conv::forward(self.value(x).re(), self.value(k).re(), self.value(bias).re(), &d);
        let v = Tensor::from_real(vec![d.n, d.c_out, d.h, d.w], out);
        let rg = self.rg(&[x, k, bias]);
        Ok(self.push(v, Op::Conv2d(x, k, bias), rg))
    }

    fn conv_dims(&self, x: Var, k: Var, bias: Var) -> Result<ConvDims> {
        let (xs, ks, bs) = (self.shape(x), self.shape(k), self.shape(bias));
        if xs.len() != 4 || ks.len() != 4 {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                lhs: xs.to_vec(),
                rhs: ks.to_vec(),
            });
        }
        if ks[2] != ks[3] || ks[2] % 2 == 0 {
            return Err(AutodiffError::Invalid(format!(
                "conv2d kernel must be square with odd size, got {ks:?}"
            )));
        }
        if xs[1] != ks[1] {
            return Err(AutodiffError::ChannelMismatch {
                input: xs[1],
                kernel: ks[1],
            });
        }
        if bs != [ks[0]] {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d bias",
                lhs: bs.to_vec(),
                rhs: vec![ks[0]],
            });
        }
        Ok(ConvDims {
            n: xs[0],
            c_in: xs[1],
            c_out: ks[0],
            h: xs[2],
            w: xs[3],
            ks: ks[2],
        })
    }

    /// 2x2 mean pooling (`AvgDown`) or 2x nearest-neighbour upsampling
    /// (`NearestUp`) over the last two axes. The pair is adjoint up to a factor 4.
    pub fn pool2(&mut self, a: Var, mode: PoolMode) -> Result<Var> {
        self.expect_dtype("pool2", a, Dtype::Real)?;
        let shape = self.shape(a).to_vec();
        let r = shape.len();
        if r < 2 {
            return Err(AutodiffError::Invalid("pool2 needs rank >= 2".into()));
        }
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let t = self.value(a).re();
        let (out_shape, data) = match mode {
            PoolMode::AvgDown => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(AutodiffError::OddDimensions {
                        op: "avg-down",
                        shape,
                    });
                }
                let mut s = shape.clone();
                s[r - 2] = h / 2;
                s[r - 1] = w / 2;
                (s, avg_down(t, h, w))
            }
            PoolMode::NearestUp => {
                let mut s = shape.clone();
                s[r - 2] = h * 2;
                s[r - 1] = w * 2;
                (s, nearest_up(t, h, w))
            }
        };
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_real(out_shape, data), Op::Pool(a, mode), rg))
    }

    // ---- reductions and shape ops -----------------------------------------

    /// Sum over `axes` (removed from the output shape).
    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        for &ax in &axes {
            if ax >= shape.len() {
                return Err(AutodiffError::AxisOutOfRange {
                    op: "sum",
                    axis: ax,
                    rank: shape.len(),
                });
            }
        }
        let keep: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let out: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let t = self.value(a);
        let v = match t.dtype() {
            Dtype::Real => Tensor::from_real(out, reduce_to(t.re(), &shape, &keep)),
            Dtype::Complex => Tensor::from_complex(out, reduce_to(t.cx(), &shape, &keep)),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Sum(a, axes), rg))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes).expect("all axes are in range")
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let s = self.sum(a, axes)?;
        let count: usize = axes.iter().map(|&ax| shape[ax]).product();
        Ok(self.scale(s, 1.0 / count.max(1) as f64))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| AutodiffError::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        let dt = self.dtype(first);
        if axis >= base.len() {
            return Err(AutodiffError::AxisOutOfRange {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &x in xs {
            self.expect_dtype("concat", x, dt)?;
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let v = match dt {
            Dtype::Real => {
                let parts: Vec<&[f64]> = xs.iter().map(|&x| self.value(x).re()).collect();
                let sizes: Vec<usize> = xs.iter().map(|&x| self.shape(x)[axis]).collect();
                Tensor::from_real(out_shape, concat_impl(&parts, &sizes, outer, inner))
            }
            Dtype::Complex => {
                let parts: Vec<&[Complex64]> = xs.iter().map(|&x| self.value(x).cx()).collect();
                let sizes: Vec<usize> = xs.iter().map(|&x| self.shape(x)[axis]).collect();
                Tensor::from_complex(out_shape, concat_impl(&parts, &sizes, outer, inner))
            }
        };
        let rg = self.rg(xs);
        Ok(self.push(v, Op::Concat(xs.to_vec(), axis), rg))
    }

    /// `a[..., start..start+len, ...]` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(AutodiffError::AxisOutOfRange {
                op: "slice",
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(AutodiffError::Invalid(format!(
                "slice {start}..{} exceeds axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let t = self.value(a);
        let v = match t.dtype() {
            Dtype::Real => Tensor::from_real(out_shape, slice_impl(t.re(), shape[axis], start, len, outer, inner)),
            Dtype::Complex => {
                Tensor::from_complex(out_shape, slice_impl(t.cx(), shape[axis], start, len, outer, inner))
            }
        };
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Slice(a, axis, start), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse pass from a real scalar `loss`. Nodes are visited once each in
    /// reverse creation order, which is a reverse topological order; gradient
    /// contributions are accumulated in a fixed order so results are bitwise
    /// reproducible.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 || lt.dtype() != Dtype::Real {
            return Err(AutodiffError::NonScalarLoss {
                shape: lt.shape().to_vec(),
                dtype: lt.dtype(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::from_real(lt.shape().to_vec(), vec![1.0]));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (input, gi) in self.vjp(id, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.accumulate(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products for node `id` given its output gradient.
    fn vjp(&self, id: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[id];
        let out_shape = node.value.shape();
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let mut res = Vec::new();
                if rg(*a) {
                    res.push((*a, reduce_tensor(g, out_shape, val(*a).shape())));
                }
                if rg(*b) {
                    let gb = reduce_tensor(g, out_shape, val(*b).shape());
                    res.push((*b, if sign < 0.0 { negate(&gb) } else { gb }));
                }
                res
            }
            Op::Mul(a, b) => {
                let mut res = Vec::new();
                // d(a*b): ga = g * conj(b), gb = g * conj(a)
                if rg(*a) {
                    res.push((*a, mul_conj_reduce(g, out_shape, val(*b), val(*a).shape())));
                }
                if rg(*b) {
                    res.push((*b, mul_conj_reduce(g, out_shape, val(*a), val(*b).shape())));
                }
                res
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let mut res = Vec::new();
                match g.dtype() {
                    Dtype::Real => {
                        if rg(*a) {
                            let ga = broadcast_binary(g.re(), out_shape, tb.re(), tb.shape(), out_shape, |g, b| g / b);
                            res.push((*a, Tensor::from_real(ta.shape().to_vec(), reduce_to(&ga, out_shape, ta.shape()))));
                        }
                        if rg(*b) {
                            // -g * out / b
                            let go = g.re().iter().zip(node.value.re()).map(|(g, o)| -g * o).collect::<Vec<_>>();
                            let gb = broadcast_binary(&go, out_shape, tb.re(), tb.shape(), out_shape, |x, b| x / b);
                            res.push((*b, Tensor::from_real(tb.shape().to_vec(), reduce_to(&gb, out_shape, tb.shape()))));
                        }
                    }
                    Dtype::Complex => {
                        if rg(*a) {
                            let ga = broadcast_binary(g.cx(), out_shape, tb.cx(), tb.shape(), out_shape, |g, b| g / b.conj());
                            res.push((*a, Tensor::from_complex(ta.shape().to_vec(), reduce_to(&ga, out_shape, ta.shape()))));
                        }
                        if rg(*b) {
                            let go = g.cx().iter().zip(node.value.cx()).map(|(g, o)| -g * o.conj()).collect::<Vec<_>>();
                            let gb = broadcast_binary(&go, out_shape, tb.cx(), tb.shape(), out_shape, |x, b| x / b.conj());
                            res.push((*b, Tensor::from_complex(tb.shape().to_vec(), reduce_to(&gb, out_shape, tb.shape()))));
                        }
                    }
                }
                res
            }
            Op::Neg(a) => vec![(*a, negate(g))],
            Op::Scale(a, c) => {
                let c = *c;
                let t = match g.dtype() {
                    Dtype::Real => g.map_real(|x| c * x),
                    Dtype::Complex => g.map_complex(|z| z * c),
                };
                vec![(*a, t)]
            }
            Op::Exp(a) => {
                let t = match g.dtype() {
                    Dtype::Real => zip_real(g, &node.value, |g, o| g * o),
                    Dtype::Complex => zip_complex(g, &node.value, |g, o| g * o.conj()),
                };
                vec![(*a, t)]
            }
            Op::Log(a) => vec![(*a, zip_real(g, val(*a), |g, x| g / x))],
            Op::Abs2(a) => {
                let x = val(*a);
                let t = match x.dtype() {
                    Dtype::Real => zip_real(g, x, |g, x| 2.0 * g * x),
                    Dtype::Complex => Tensor::from_complex(
                        x.shape().to_vec(),
                        g.re().iter().zip(x.cx()).map(|(&g, &z)| z * (2.0 * g)).collect(),
                    ),
                };
                vec![(*a, t)]
            }
            Op::LeakyRelu(a, s) => {
                let s = *s;
                vec![(*a, zip_real(g, val(*a), |g, x| if x > 0.0 { g } else { s * g }))]
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                vec![(*a, zip_real(g, val(*a), |g, x| if x >= lo && x <= hi { g } else { 0.0 }))]
            }
            Op::ToComplex(a) => vec![(*a, Tensor::from_real(out_shape.to_vec(), g.cx().iter().map(|z| z.re).collect()))],
            Op::MakeComplex(re, im) => vec![
                (*re, Tensor::from_real(out_shape.to_vec(), g.cx().iter().map(|z| z.re).collect())),
                (*im, Tensor::from_real(out_shape.to_vec(), g.cx().iter().map(|z| z.im).collect())),
            ],
            Op::RealPart(a) => vec![(
                *a,
                Tensor::from_complex(out_shape.to_vec(), g.re().iter().map(|&x| Complex64::new(x, 0.0)).collect()),
            )],
            Op::ImagPart(a) => vec![(
                *a,
                Tensor::from_complex(out_shape.to_vec(), g.re().iter().map(|&x| Complex64::new(0.0, x)).collect()),
            )],
            Op::Fft2(a, dir) => {
                let r = out_shape.len();
                let mut t = g.clone();
                fft2_inplace(t.as_complex_mut().unwrap(), out_shape[r - 2], out_shape[r - 1], dir.flip());
                vec![(*a, t)]
            }
            Op::ShiftStack(a, shifts) => {
                let (h, w) = (out_shape[1], out_shape[2]);
                let t = match g.dtype() {
                    Dtype::Real => Tensor::from_real(vec![h, w], unshift_sum(g.re(), h, w, shifts)),
                    Dtype::Complex => Tensor::from_complex(vec![h, w], unshift_sum(g.cx(), h, w, shifts)),
                };
                vec![(*a, t)]
            }
            Op::Conv2d(x, k, b) => {
                let d = self.conv_dims(*x, *k, *b).expect("validated at construction");
                let (dx, dk, db) = conv::backward(val(*x).re(), val(*k).re(), g.re(), &d, rg(*x), rg(*k));
                let mut res = Vec::new();
                if rg(*x) {
                    res.push((*x, Tensor::from_real(val(*x).shape().to_vec(), dx)));
                }
                if rg(*k) {
                    res.push((*k, Tensor::from_real(val(*k).shape().to_vec(), dk)));
                }
                if rg(*b) {
                    res.push((*b, Tensor::from_real(vec![d.c_out], db)));
                }
                res
            }
            Op::Pool(a, mode) => {
                let in_shape = val(*a).shape();
                let r = in_shape.len();
                let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
                let data = match mode {
                    // adjoint of the 2x2 mean: spread g/4 over the block
                    PoolMode::AvgDown => nearest_up(g.re(), h / 2, w / 2).into_iter().map(|x| x * 0.25).collect(),
                    // adjoint of replication: sum the block (4 x mean)
                    PoolMode::NearestUp => avg_down(g.re(), h * 2, w * 2).into_iter().map(|x| x * 4.0).collect(),
                };
                vec![(*a, Tensor::from_real(in_shape.to_vec(), data))]
            }
            Op::Sum(a, axes) => {
                let in_shape = val(*a).shape();
                let keep: Vec<usize> = in_shape
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
                    .collect();
                let t = match g.dtype() {
                    Dtype::Real => Tensor::from_real(
                        in_shape.to_vec(),
                        broadcast_binary(g.re(), &keep, &[0.0], &[], in_shape, |g, _| g),
                    ),
                    Dtype::Complex => Tensor::from_complex(
                        in_shape.to_vec(),
                        broadcast_binary(g.cx(), &keep, &[czero()], &[], in_shape, |g, _| g),
                    ),
                };
                vec![(*a, t)]
            }
            Op::Concat(xs, axis) => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut start = 0;
                let mut res = Vec::new();
                for &x in xs {
                    let s = val(x).shape();
                    let len = s[*axis];
                    if rg(x) {
                        let t = match g.dtype() {
                            Dtype::Real => Tensor::from_real(s.to_vec(), slice_impl(g.re(), total, start, len, outer, inner)),
                            Dtype::Complex => {
                                Tensor::from_complex(s.to_vec(), slice_impl(g.cx(), total, start, len, outer, inner))
                            }
                        };
                        res.push((x, t));
                    }
                    start += len;
                }
                res
            }
            Op::Slice(a, axis, start) => {
                let in_shape = val(*a).shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let (total, len) = (in_shape[*axis], out_shape[*axis]);
                let t = match g.dtype() {
                    Dtype::Real => Tensor::from_real(in_shape.to_vec(), unslice_impl(g.re(), total, *start, len, outer, inner)),
                    Dtype::Complex => {
                        Tensor::from_complex(in_shape.to_vec(), unslice_impl(g.cx(), total, *start, len, outer, inner))
                    }
                };
                vec![(*a, t)]
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshaped(val(*a).shape().to_vec()).expect("same numel"))],
        }
    }
}

fn negate(t: &Tensor) -> Tensor {
    match t.dtype() {
        Dtype::Real => t.map_real(|x| -x),
        Dtype::Complex => t.map_complex(|z| -z),
    }
}

fn reduce_tensor(g: &Tensor, out: &[usize], target: &[usize]) -> Tensor {
    match g.dtype() {
        Dtype::Real => Tensor::from_real(target.to_vec(), reduce_to(g.re(), out, target)),
        Dtype::Complex => Tensor::from_complex(target.to_vec(), reduce_to(g.cx(), out, target)),
    }
}

fn mul_conj_reduce(g: &Tensor, out: &[usize], other: &Tensor, target: &[usize]) -> Tensor {
    match g.dtype() {
        Dtype::Real => {
            let p = broadcast_binary(g.re(), out, other.re(), other.shape(), out, |g, o| g * o);
            Tensor::from_real(target.to_vec(), reduce_to(&p, out, target))
        }
        Dtype::Complex => {
            let p = broadcast_binary(g.cx(), out, other.cx(), other.shape(), out, |g, o| g * o.conj());
            Tensor::from_complex(target.to_vec(), reduce_to(&p, out, target))
        }
    }
}

fn zip_real(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_real(
        x.shape().to_vec(),
        g.re().iter().zip(x.re()).map(|(&g, &x)| f(g, x)).collect(),
    )
}

fn zip_complex(g: &Tensor, x: &Tensor, f: impl Fn(Complex64, Complex64) -> Complex64) -> Tensor {
    Tensor::from_complex(
        x.shape().to_vec(),
        g.cx().iter().zip(x.cx()).map(|(&g, &x)| f(g, x)).collect(),
    )
}

fn rolled<T: Copy>(src: &[T], h: usize, w: usize, (dy, dx): (isize, isize)) -> Vec<T> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
        for x in 0..w {
            let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
            out.push(src[sy * w + sx]);
        }
    }
    out
}

fn unshift_sum<T: Copy + Default + std::ops::AddAssign>(g: &[T], h: usize, w: usize, shifts: &[(isize, isize)]) -> Vec<T> {
    let mut acc = vec![T::default(); h * w];
    for (k, &(dy, dx)) in shifts.iter().enumerate() {
        let plane = &g[k * h * w..(k + 1) * h * w];
        for y in 0..h {
            let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
            for x in 0..w {
                let sx = (x as isize - dx).rem_euclid(w as isize) as usize;
                acc[sy * w + sx] += plane[y * w + x];
            }
        }
    }
    acc
}

fn avg_down(t: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h / 2, w / 2);
    let planes = t.len() / (h * w);
    let mut out = vec![0.0; planes * h2 * w2];
    for p in 0..planes {
        let src = &t[p * h * w..];
        let dst = &mut out[p * h2 * w2..];
        for y in 0..h2 {
            for x in 0..w2 {
                let i = 2 * y * w + 2 * x;
                dst[y * w2 + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    out
}

fn nearest_up(t: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (h * 2, w * 2);
    let planes = t.len() / (h * w);
    let mut out = vec![0.0; planes * h2 * w2];
    for p in 0..planes {
        let src = &t[p * h * w..];
        let dst = &mut out[p * h2 * w2..];
        for y in 0..h2 {
            for x in 0..w2 {
                dst[y * w2 + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

fn concat_impl<T: Copy>(parts: &[&[T]], sizes: &[usize], outer: usize, inner: usize) -> Vec<T> {
    let total: usize = sizes.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &s) in parts.iter().zip(sizes) {
            out.extend_from_slice(&p[o * s * inner..(o + 1) * s * inner]);
        }
    }
    out
}

fn slice_impl<T: Copy>(src: &[T], total: usize, start: usize, len: usize, outer: usize, inner: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * total + start) * inner;
        out.extend_from_slice(&src[base..base + len * inner]);
    }
    out
}

fn unslice_impl<T: Copy + Default>(g: &[T], total: usize, start: usize, len: usize, outer: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::default(); outer * total * inner];
    for o in 0..outer {
        let base = (o * total + start) * inner;
        out[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
    }
    out
}
