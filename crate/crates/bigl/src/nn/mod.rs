//! Reverse-mode automatic differentiation over dynamic-rank arrays.
//!
//! A [`Tape`] records eager forward computation as a flat list of nodes;
//! [`Tape::backward`] walks the list in reverse and accumulates gradients for
//! every node that transitively depends on a trainable leaf. All kernels are
//! single-threaded with a fixed evaluation order, so identical inputs produce
//! bitwise-identical outputs and gradients.
//!
//! The tape is generic over the element type: `f32` for training throughput,
//! `f64` for finite-difference gradient verification.

pub mod conv;
pub mod optim;
pub mod params;

use ndarray::{concatenate, ArrayD, Axis, Ix4, IxDyn, Slice};

/// Element types the tape can differentiate through.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct Var(usize);

enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// Multiply by a compile-time constant scalar.
    Scale(Var, F),
    AddScalar(Var, F),
    /// Broadcast-multiply a tensor by a scalar (0-d) variable.
    ScaleVar { s: Var, x: Var },
    /// Elementwise multiply by a constant array (masks, one-hot targets).
    MulConst(Var, ArrayD<F>),
    Abs(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, F),
    Clamp(Var, F, F),
    /// Softmax along one axis.
    Softmax(Var, usize),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    /// Nearest-neighbour 2x spatial upsampling of `[N, C, H, W]`.
    Upsample2x(Var),
    /// Per-sample, per-channel normalization of `[N, C, H, W]` (no affine).
    InstanceNorm(Var, F),
    /// Batched matrix multiply of `[B, ., .]`, with optional transposition of
    /// either operand's trailing two axes.
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    SumAll(Var),
    MeanAll(Var),
    /// Sum over the given axes (ascending), removing them from the shape.
    SumAxes { x: Var, axes: Vec<usize> },
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradient table produced by [`Tape::backward`]. Only leaves retain their
/// gradients; intermediates are freed as the reverse sweep passes them.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of the root with respect to `v`, if any gradient flowed there.
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of the root with respect to `v`; panics if none flowed.
    pub fn wrt(&self, v: Var) -> &ArrayD<F> {
        self.grads[v.0]
            .as_ref()
            .expect("no gradient flowed to this variable")
    }
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node as a scalar.
    pub fn scalar(&self, v: Var) -> F {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.len(), 1, "scalar() on non-scalar node");
        *val.iter().next().unwrap()
    }

    /// True if the node is reachable from a trainable leaf.
    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: ArrayD<F>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: ArrayD<F>, needs_grad: bool) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.push(value, Op::Leaf, needs_grad)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: ArrayD<F>) -> Var {
        self.leaf(value, false)
    }

    /// 0-d constant.
    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), F::from_f64(value)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value / &self.nodes[b.0].value;
        let g = self.ng(a) || self.ng(b);
        self.push(v, Op::Div(a, b), g)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = F::from_f64(c);
        let v = self.nodes[x.0].value.mapv(|e| e * c);
        let g = self.ng(x);
        self.push(v, Op::Scale(x, c), g)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = F::from_f64(c);
        let v = self.nodes[x.0].value.mapv(|e| e + c);
        let g = self.ng(x);
        self.push(v, Op::AddScalar(x, c), g)
    }

    /// Broadcast-multiply tensor `x` by 0-d variable `s`.
    pub fn scale_var(&mut self, s: Var, x: Var) -> Var {
        assert_eq!(self.nodes[s.0].value.len(), 1, "scale_var scale must be 0-d");
        let sv = self.scalar(s);
        let v = self.nodes[x.0].value.mapv(|e| e * sv);
        let g = self.ng(s) || self.ng(x);
        self.push(v, Op::ScaleVar { s, x }, g)
    }

    /// Elementwise multiply by a constant array of the same shape.
    pub fn mul_const(&mut self, x: Var, c: ArrayD<F>) -> Var {
        assert_eq!(self.nodes[x.0].value.shape(), c.shape());
        let v = &self.nodes[x.0].value * &c;
        let g = self.ng(x);
        self.push(v, Op::MulConst(x, c), g)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| e.abs());
        let g = self.ng(x);
        self.push(v, Op::Abs(x), g)
    }

    pub fn log(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| e.ln());
        let g = self.ng(x);
        self.push(v, Op::Log(x), g)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| {
            if e >= F::zero() {
                F::one() / (F::one() + (-e).exp())
            } else {
                let ex = e.exp();
                ex / (F::one() + ex)
            }
        });
        let g = self.ng(x);
        self.push(v, Op::Sigmoid(x), g)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.mapv(|e| e.tanh());
        let g = self.ng(x);
        self.push(v, Op::Tanh(x), g)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = F::from_f64(slope);
        let v = self.nodes[x.0].value.mapv(|e| if e > F::zero() { e } else { e * s });
        let g = self.ng(x);
        self.push(v, Op::LeakyRelu(x, s), g)
    }

    /// Clamp into `[lo, hi]`; gradient passes through strictly inside the
    /// interval and is zero where the input was clamped.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (F::from_f64(lo), F::from_f64(hi));
        let v = self.nodes[x.0].value.mapv(|e| e.max(lo).min(hi));
        let g = self.ng(x);
        self.push(v, Op::Clamp(x, lo, hi), g)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let mut v = self.nodes[x.0].value.clone();
        for mut lane in v.lanes_mut(Axis(axis)) {
            let m = lane.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let mut sum = F::zero();
            for e in lane.iter_mut() {
                *e = (*e - m).exp();
                sum += *e;
            }
            for e in lane.iter_mut() {
                *e = *e / sum;
            }
        }
        let g = self.ng(x);
        self.push(v, Op::Softmax(x, axis), g)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let x4 = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let w4 = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let b1 = b.map(|b| {
            self.nodes[b.0]
                .value
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .to_owned()
        });
        let v = conv::forward(&x4.to_owned(), &w4.to_owned(), b1.as_ref(), stride, pad);
        let g = self.ng(x) || self.ng(w) || b.map(|b| self.ng(b)).unwrap_or(false);
        self.push(v.into_dyn(), Op::Conv2d { x, w, b, stride, pad }, g)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let (n, c, h, w) = xv.view().into_dimensionality::<Ix4>().unwrap().dim();
        let mut out = ArrayD::<F>::zeros(IxDyn(&[n, c, 2 * h, 2 * w]));
        {
            let xs = xv.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for nc in 0..n * c {
                for i in 0..h {
                    let src = (nc * h + i) * w;
                    for di in 0..2 {
                        let dst = (nc * 2 * h + 2 * i + di) * 2 * w;
                        for j in 0..w {
                            let e = xs[src + j];
                            os[dst + 2 * j] = e;
                            os[dst + 2 * j + 1] = e;
                        }
                    }
                }
            }
        }
        let g = self.ng(x);
        self.push(out, Op::Upsample2x(x), g)
    }

    /// Instance normalization over the spatial axes of `[N, C, H, W]`
    /// (population variance, no learnable affine).
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let epsf = F::from_f64(eps);
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        let m = F::from_f64((h * w) as f64);
        let mut out = ArrayD::<F>::zeros(IxDyn(&[n, c, h, w]));
        {
            let mut o4 = out.view_mut().into_dimensionality::<Ix4>().unwrap();
            for i in 0..n {
                for ch in 0..c {
                    let plane = xv.index_axis(Axis(0), i);
                    let plane = plane.index_axis(Axis(0), ch);
                    let mean = plane.iter().copied().sum::<F>() / m;
                    let var = plane.iter().map(|&e| (e - mean) * (e - mean)).sum::<F>() / m;
                    let inv = F::one() / (var + epsf).sqrt();
                    let mut oplane = o4.index_axis_mut(Axis(0), i);
                    let mut oplane = oplane.index_axis_mut(Axis(0), ch);
                    oplane.zip_mut_with(&plane, |o, &e| *o = (e - mean) * inv);
                }
            }
        }
        let g = self.ng(x);
        self.push(out, Op::InstanceNorm(x, epsf), g)
    }

    /// Batched matmul over `[B, ., .]`; `ta`/`tb` transpose the trailing two
    /// axes of the respective operand.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.ndim(), 3);
        assert_eq!(bv.ndim(), 3);
        let nb = av.shape()[0];
        assert_eq!(nb, bv.shape()[0], "bmm batch mismatch");
        let (m, ka) = if ta {
            (av.shape()[2], av.shape()[1])
        } else {
            (av.shape()[1], av.shape()[2])
        };
        let (kb, nn) = if tb {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        assert_eq!(ka, kb, "bmm inner dimension mismatch");
        let mut out = ArrayD::<F>::zeros(IxDyn(&[nb, m, nn]));
        {
            let a3 = av.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let b3 = bv.view().into_dimensionality::<ndarray::Ix3>().unwrap();
            let mut o3 = out.view_mut().into_dimensionality::<ndarray::Ix3>().unwrap();
            for i in 0..nb {
                let ai = a3.index_axis(Axis(0), i);
                let bi = b3.index_axis(Axis(0), i);
                let ai = if ta { ai.reversed_axes() } else { ai };
                let bi = if tb { bi.reversed_axes() } else { bi };
                let mut oi = o3.index_axis_mut(Axis(0), i);
                ndarray::linalg::general_mat_mul(F::one(), &ai, &bi, F::zero(), &mut oi);
            }
        }
        let g = self.ng(a) || self.ng(b);
        self.push(out, Op::Bmm { a, b, ta, tb }, g)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.nodes[x.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape length mismatch");
        let g = self.ng(x);
        self.push(v, Op::Reshape(x), g)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let v = if v.is_standard_layout() { v } else { v.as_standard_layout().into_owned() };
        let g = parts.iter().any(|p| self.ng(*p));
        self.push(v, Op::Concat { parts: parts.to_vec(), axis }, g)
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let v = self.nodes[x.0]
            .value
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let v = if v.is_standard_layout() { v } else { v.as_standard_layout().into_owned() };
        let g = self.ng(x);
        self.push(v, Op::Narrow { x, axis, start }, g)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: F = self.nodes[x.0].value.iter().copied().sum();
        let g = self.ng(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), s), Op::SumAll(x), g)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let len = self.nodes[x.0].value.len();
        assert!(len > 0);
        let s: F = self.nodes[x.0].value.iter().copied().sum();
        let v = s / F::from_f64(len as f64);
        let g = self.ng(x);
        self.push(ArrayD::from_elem(IxDyn(&[]), v), Op::MeanAll(x), g)
    }

    /// Sum over `axes` (must be strictly ascending), removing them.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Var {
        assert!(axes.windows(2).all(|w| w[0] < w[1]), "axes must be ascending");
        let mut v = self.nodes[x.0].value.clone();
        for &ax in axes.iter().rev() {
            v = v.sum_axis(Axis(ax));
        }
        let g = self.ng(x);
        self.push(v, Op::SumAxes { x, axes: axes.to_vec() }, g)
    }

    /// Mean over all elements of the trailing two (spatial) axes of
    /// `[N, C, H, W]`, yielding `[N, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let shape = self.nodes[x.0].value.shape().to_vec();
        assert_eq!(shape.len(), 4);
        let hw = (shape[2] * shape[3]) as f64;
        let s = self.sum_axes(x, &[2, 3]);
        self.scale(s, 1.0 / hw)
    }

    /// Reverse sweep from a scalar root. Returns gradients for leaves;
    /// intermediate gradients are freed as the sweep passes.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<ArrayD<F>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(ArrayD::ones(self.nodes[root.0].value.raw_dim()));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<ArrayD<F>>], v: Var, g: ArrayD<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(a) => *a += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, id: usize, g: &ArrayD<F>, grads: &mut [Option<ArrayD<F>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.mapv(|e| -e));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g * &self.nodes[b.0].value);
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g * &self.nodes[a.0].value);
                }
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b.0].value;
                if self.ng(*a) {
                    self.acc(grads, *a, g / bv);
                }
                if self.ng(*b) {
                    let av = &self.nodes[a.0].value;
                    let gb = ndarray::Zip::from(g)
                        .and(av)
                        .and(bv)
                        .map_collect(|&gi, &ai, &bi| -gi * ai / (bi * bi));
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(grads, *x, g.mapv(|e| e * c));
            }
            Op::AddScalar(x, _) => self.acc(grads, *x, g.clone()),
            Op::ScaleVar { s, x } => {
                if self.ng(*s) {
                    let dot: F = g
                        .iter()
                        .zip(self.nodes[x.0].value.iter())
                        .map(|(&gi, &xi)| gi * xi)
                        .sum();
                    self.acc(grads, *s, ArrayD::from_elem(IxDyn(&[]), dot));
                }
                if self.ng(*x) {
                    let sv = *self.nodes[s.0].value.iter().next().unwrap();
                    self.acc(grads, *x, g.mapv(|e| e * sv));
                }
            }
            Op::MulConst(x, c) => self.acc(grads, *x, g * c),
            Op::Abs(x) => {
                let gx = ndarray::Zip::from(g)
                    .and(&self.nodes[x.0].value)
                    .map_collect(|&gi, &xi| {
                        if xi > F::zero() {
                            gi
                        } else if xi < F::zero() {
                            -gi
                        } else {
                            F::zero()
                        }
                    });
                self.acc(grads, *x, gx);
            }
            Op::Log(x) => {
                self.acc(grads, *x, g / &self.nodes[x.0].value);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[id].value;
                let gx = ndarray::Zip::from(g)
                    .and(y)
                    .map_collect(|&gi, &yi| gi * yi * (F::one() - yi));
                self.acc(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let y = &self.nodes[id].value;
                let gx = ndarray::Zip::from(g)
                    .and(y)
                    .map_collect(|&gi, &yi| gi * (F::one() - yi * yi));
                self.acc(grads, *x, gx);
            }
            Op::LeakyRelu(x, s) => {
                let s = *s;
                let gx = ndarray::Zip::from(g)
                    .and(&self.nodes[x.0].value)
                    .map_collect(|&gi, &xi| if xi > F::zero() { gi } else { gi * s });
                self.acc(grads, *x, gx);
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                let gx = ndarray::Zip::from(g)
                    .and(&self.nodes[x.0].value)
                    .map_collect(|&gi, &xi| if xi > lo && xi < hi { gi } else { F::zero() });
                self.acc(grads, *x, gx);
            }
            Op::Softmax(x, axis) => {
                let y = &self.nodes[id].value;
                let mut gx = ArrayD::<F>::zeros(y.raw_dim());
                ndarray::Zip::from(gx.lanes_mut(Axis(*axis)))
                    .and(y.lanes(Axis(*axis)))
                    .and(g.lanes(Axis(*axis)))
                    .for_each(|mut gxl, yl, gl| {
                        let dot: F = yl.iter().zip(gl.iter()).map(|(&yi, &gi)| yi * gi).sum();
                        for ((gxe, &ye), &ge) in gxl.iter_mut().zip(yl.iter()).zip(gl.iter()) {
                            *gxe = ye * (ge - dot);
                        }
                    });
                self.acc(grads, *x, gx);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let x4 = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                let w4 = self.nodes[w.0].value.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap().to_owned();
                let need_db = b.map(|b| self.ng(b)).unwrap_or(false);
                let (dx, dw, db) = conv::backward(
                    &x4,
                    &w4,
                    &g4,
                    *stride,
                    *pad,
                    self.ng(*x),
                    self.ng(*w),
                    need_db,
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, dx.into_dyn());
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, dw.into_dyn());
                }
                if let (Some(db), Some(b)) = (db, b) {
                    self.acc(grads, *b, db.into_dyn());
                }
            }
            Op::Upsample2x(x) => {
                let (n, c, h2, w2) = g.view().into_dimensionality::<Ix4>().unwrap().dim();
                let (h, w) = (h2 / 2, w2 / 2);
                let mut gx = ArrayD::<F>::zeros(IxDyn(&[n, c, h, w]));
                {
                    let gs = g.as_slice().unwrap();
                    let xs = gx.as_slice_mut().unwrap();
                    for nc in 0..n * c {
                        for i in 0..h {
                            let dst = (nc * h + i) * w;
                            for di in 0..2 {
                                let src = (nc * h2 + 2 * i + di) * w2;
                                for j in 0..w {
                                    xs[dst + j] += gs[src + 2 * j] + gs[src + 2 * j + 1];
                                }
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::InstanceNorm(x, eps) => {
                let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix4>().unwrap();
                let yv = self.nodes[id].value.view().into_dimensionality::<Ix4>().unwrap();
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let (n, c, h, w) = xv.dim();
                let m = F::from_f64((h * w) as f64);
                let mut gx = ArrayD::<F>::zeros(IxDyn(&[n, c, h, w]));
                {
                    let mut gx4 = gx.view_mut().into_dimensionality::<Ix4>().unwrap();
                    for i in 0..n {
                        for ch in 0..c {
                            let xp = xv.index_axis(Axis(0), i);
                            let xp = xp.index_axis(Axis(0), ch);
                            let yp = yv.index_axis(Axis(0), i);
                            let yp = yp.index_axis(Axis(0), ch);
                            let gp = gv.index_axis(Axis(0), i);
                            let gp = gp.index_axis(Axis(0), ch);
                            let mean = xp.iter().copied().sum::<F>() / m;
                            let var = xp.iter().map(|&e| (e - mean) * (e - mean)).sum::<F>() / m;
                            let inv = F::one() / (var + *eps).sqrt();
                            let gsum: F = gp.iter().copied().sum();
                            let gydot: F = gp.iter().zip(yp.iter()).map(|(&a, &b)| a * b).sum();
                            let mut op = gx4.index_axis_mut(Axis(0), i);
                            let mut op = op.index_axis_mut(Axis(0), ch);
                            for ((o, &gi), &yi) in op.iter_mut().zip(gp.iter()).zip(yp.iter()) {
                                *o = inv / m * (m * gi - gsum - yi * gydot);
                            }
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Bmm { a, b, ta, tb } => {
                // c = opA(A) . opB(B); with A' = opA(A): dA' = dC . B'^T, dB' = A'^T . dC
                let av = self.nodes[a.0].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let bv = self.nodes[b.0].value.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let gv = g.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let nb = av.shape()[0];
                if self.ng(*a) {
                    let mut da = ArrayD::<F>::zeros(self.nodes[a.0].value.raw_dim());
                    {
                        let mut da3 = da.view_mut().into_dimensionality::<ndarray::Ix3>().unwrap();
                        for i in 0..nb {
                            let bi = bv.index_axis(Axis(0), i);
                            let bi = if *tb { bi.reversed_axes() } else { bi };
                            let gi = gv.index_axis(Axis(0), i);
                            let dai = da3.index_axis_mut(Axis(0), i);
                            // dA' = dC . B'^T ; if ta, dA = (dA')^T
                            let mut target = if *ta { dai.reversed_axes() } else { dai };
                            ndarray::linalg::general_mat_mul(
                                F::one(),
                                &gi,
                                &bi.t(),
                                F::zero(),
                                &mut target,
                            );
                        }
                    }
                    self.acc(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = ArrayD::<F>::zeros(self.nodes[b.0].value.raw_dim());
                    {
                        let mut db3 = db.view_mut().into_dimensionality::<ndarray::Ix3>().unwrap();
                        for i in 0..nb {
                            let ai = av.index_axis(Axis(0), i);
                            let ai = if *ta { ai.reversed_axes() } else { ai };
                            let gi = gv.index_axis(Axis(0), i);
                            let dbi = db3.index_axis_mut(Axis(0), i);
                            let mut target = if *tb { dbi.reversed_axes() } else { dbi };
                            ndarray::linalg::general_mat_mul(
                                F::one(),
                                &ai.t(),
                                &gi,
                                F::zero(),
                                &mut target,
                            );
                        }
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::Reshape(x) => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let gx = g.clone().into_shape_with_order(IxDyn(&shape)).unwrap();
                self.acc(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    if self.ng(*p) {
                        let gp = g
                            .slice_axis(Axis(*axis), Slice::from(start..start + len))
                            .to_owned();
                        let gp = if gp.is_standard_layout() {
                            gp
                        } else {
                            gp.as_standard_layout().into_owned()
                        };
                        self.acc(grads, *p, gp);
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let mut gx = ArrayD::<F>::zeros(self.nodes[x.0].value.raw_dim());
                let len = g.shape()[*axis];
                gx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                    .zip_mut_with(g, |a, &b| *a = b);
                self.acc(grads, *x, gx);
            }
            Op::SumAll(x) => {
                let gs = *g.iter().next().unwrap();
                self.acc(
                    grads,
                    *x,
                    ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), gs),
                );
            }
            Op::MeanAll(x) => {
                let len = self.nodes[x.0].value.len();
                let gs = *g.iter().next().unwrap() / F::from_f64(len as f64);
                self.acc(
                    grads,
                    *x,
                    ArrayD::from_elem(self.nodes[x.0].value.raw_dim(), gs),
                );
            }
            Op::SumAxes { x, axes } => {
                let in_dim = self.nodes[x.0].value.raw_dim();
                let mut ge = g.clone();
                for &ax in axes {
                    ge = ge.insert_axis(Axis(ax));
                }
                let gx = ge.broadcast(in_dim).unwrap().to_owned();
                let gx = if gx.is_standard_layout() {
                    gx
                } else {
                    gx.as_standard_layout().into_owned()
                };
                self.acc(grads, *x, gx);
            }
        }
    }
}

/// Finite-difference gradient check: rebuilds the computation around each
/// perturbed input element and compares the central difference against the
/// tape gradient at relative tolerance `tol`.
pub fn finite_difference_check(
    shapes: &[Vec<usize>],
    inputs: &[ArrayD<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    step: f64,
    tol: f64,
) -> std::result::Result<(), String> {
    assert_eq!(shapes.len(), inputs.len());
    let eval = |inputs: &[ArrayD<f64>]| -> f64 {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let root = build(&mut tape, &vars);
        tape.scalar(root)
    };
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root);
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(inputs[k].raw_dim()));
        let len = inputs[k].len();
        for idx in 0..len {
            let mut plus = inputs.to_vec();
            plus[k].as_slice_mut().unwrap()[idx] += step;
            let mut minus = inputs.to_vec();
            minus[k].as_slice_mut().unwrap()[idx] -= step;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let an = analytic.as_slice().unwrap()[idx];
            let denom = fd.abs().max(an.abs()).max(1e-6);
            let rel = (fd - an).abs() / denom;
            if rel > tol {
                return Err(format!(
                    "input {k} element {idx}: finite-diff {fd:.9} vs tape {an:.9} (rel {rel:.2e})"
                ));
            }
        }
    }
    Ok(())
}
