//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s; calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every node that requires one.
//! Parameters enter a graph by name through [`Graph::param`], and their
//! gradients are looked up by the same name afterwards.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::tensor::{matmul_into, MatRef, Scalar, Tensor};

enum Op<T> {
    /// Leaf or a node that no gradient flows through.
    Const,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    AddRowBias(usize, usize),
    Conv2d {
        x: usize,
        w: usize,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    ChannelBias(usize, usize),
    ScaleBc(usize, usize),
    AddBc(usize, usize),
    LeakyRelu(usize, T),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Powf(usize, T),
    Upsample2x(usize),
    AvgPool2x(usize),
    Reshape(usize),
    Concat1(Vec<usize>),
    SumAll(usize),
    SumLast(usize),
    GatherRows(usize, Vec<usize>),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<String, usize>>,
    grad_enabled: bool,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    id: usize,
    graph: &'g Graph<T>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; `backward` yields no gradients.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = self.grad_enabled && inputs.iter().any(|&i| nodes[i].needs_grad);
        let op = if needs_grad { op } else { Op::Const };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    fn leaf(&self, value: Tensor<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Const,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var {
            id: nodes.len() - 1,
            graph: self,
        }
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, false)
    }

    /// A differentiable input that is not a named parameter.
    pub fn input(&self, value: Tensor<T>) -> Var<'_, T> {
        self.leaf(value, true)
    }

    /// Inserts a trainable parameter. Repeated calls with the same name
    /// return the same node, so gradients from every use accumulate.
    pub fn param(&self, name: &str, value: &Tensor<T>) -> Var<'_, T> {
        if let Some(&id) = self.params.borrow().get(name) {
            return Var { id, graph: self };
        }
        let v = self.leaf(value.clone(), true);
        self.params.borrow_mut().insert(name.to_string(), v.id);
        v
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub fn concat1(&self, parts: &[Var<'_, T>]) -> Var<'_, T> {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let first = &values[0];
        let batch = first.dim(0);
        let rest: usize = first.shape()[2..].iter().product();
        let mut width = 0;
        for v in &values {
            assert_eq!(v.dim(0), batch, "concat1: batch sizes differ");
            assert_eq!(&v.shape()[2..], &first.shape()[2..], "concat1: trailing dims differ");
            width += v.dim(1);
        }
        let mut out = Vec::with_capacity(batch * width * rest);
        for b in 0..batch {
            for v in &values {
                let block = v.dim(1) * rest;
                out.extend_from_slice(&v.data()[b * block..(b + 1) * block]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[1] = width;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push(Tensor::from_vec(&shape, out), Op::Concat1(ids.clone()), &ids)
    }

    /// Gradient of the scalar `root` with respect to every node that needs one.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.numel(), 1, "backward from a non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
        if nodes[root.id].needs_grad {
            grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), T::one()));
        }
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Const) {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &gy, &mut grads);
        }
        let params = self.params.borrow().clone();
        Gradients { grads, params }
    }
}

fn accumulate<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    id: usize,
    g: Tensor<T>,
) {
    if !nodes[id].needs_grad {
        return;
    }
    match &mut grads[id] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    id: usize,
    gy: &Tensor<T>,
    grads: &mut [Option<Tensor<T>>],
) {
    let y = &nodes[id].value;
    let val = |i: usize| -> &Tensor<T> { &nodes[i].value };
    let needs = |i: usize| nodes[i].needs_grad;
    match &nodes[id].op {
        Op::Const => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, gy.clone());
            accumulate(nodes, grads, *b, gy.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, gy.clone());
            if needs(*b) {
                accumulate(nodes, grads, *b, gy.map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            if needs(*a) {
                accumulate(nodes, grads, *a, zip_map(gy, val(*b), |g, v| g * v));
            }
            if needs(*b) {
                accumulate(nodes, grads, *b, zip_map(gy, val(*a), |g, v| g * v));
            }
        }
        Op::Scale(a, s) => {
            let s = *s;
            accumulate(nodes, grads, *a, gy.map(|g| g * s));
        }
        Op::AddScalar(a) => accumulate(nodes, grads, *a, gy.clone()),
        Op::MatMul(a, b) => {
            let av = val(*a);
            let bv = val(*b);
            let (m, k) = (av.dim(0), av.dim(1));
            let n = bv.dim(1);
            if needs(*a) {
                let mut ga = Tensor::zeros(&[m, k]);
                matmul_into(
                    MatRef::new(gy.data(), m, n),
                    MatRef::new(bv.data(), k, n).t(),
                    ga.data_mut(),
                    false,
                );
                accumulate(nodes, grads, *a, ga);
            }
            if needs(*b) {
                let mut gb = Tensor::zeros(&[k, n]);
                matmul_into(
                    MatRef::new(av.data(), m, k).t(),
                    MatRef::new(gy.data(), m, n),
                    gb.data_mut(),
                    false,
                );
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, transpose2(gy)),
        Op::AddRowBias(x, b) => {
            accumulate(nodes, grads, *x, gy.clone());
            if needs(*b) {
                let n = gy.dim(1);
                let mut gb = vec![T::zero(); n];
                for row in gy.data().chunks_exact(n) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += *v;
                    }
                }
                accumulate(nodes, grads, *b, Tensor::from_vec(&[n], gb));
            }
        }
        Op::Conv2d {
            x,
            w,
            stride,
            pad,
            cols,
        } => {
            let xv = val(*x);
            let wv = val(*w);
            let geo = ConvGeometry::new(xv.shape(), wv.shape(), *stride, *pad);
            let ckk = geo.ckk();
            let hw = geo.out_hw();
            let n = geo.batch * hw;
            let mut gflat = vec![T::zero(); geo.cout * n];
            batch_to_channel_major(gy.data(), &mut gflat, geo.batch, geo.cout, hw);
            if needs(*w) {
                let mut gw = Tensor::zeros(wv.shape());
                matmul_into(
                    MatRef::new(&gflat, geo.cout, n),
                    MatRef::new(cols, ckk, n).t(),
                    gw.data_mut(),
                    false,
                );
                accumulate(nodes, grads, *w, gw);
            }
            if needs(*x) {
                let mut gx = Tensor::zeros(xv.shape());
                let mut dcols = vec![T::zero(); ckk * n];
                matmul_into(
                    MatRef::new(wv.data(), geo.cout, ckk).t(),
                    MatRef::new(&gflat, geo.cout, n),
                    &mut dcols,
                    false,
                );
                let in_block = geo.cin * geo.h * geo.w;
                for b in 0..geo.batch {
                    geo.col2im(&dcols, n, b * hw, &mut gx.data_mut()[b * in_block..(b + 1) * in_block]);
                }
                accumulate(nodes, grads, *x, gx);
            }
        }
        Op::ChannelBias(x, b) => {
            accumulate(nodes, grads, *x, gy.clone());
            if needs(*b) {
                let (batch, c) = (gy.dim(0), gy.dim(1));
                let hw = gy.numel() / (batch * c);
                let mut gb = vec![T::zero(); c];
                for (i, plane) in gy.data().chunks_exact(hw).enumerate() {
                    gb[i % c] += plane.iter().copied().sum::<T>();
                }
                accumulate(nodes, grads, *b, Tensor::from_vec(&[c], gb));
            }
        }
        Op::ScaleBc(x, s) => {
            let xv = val(*x);
            let sv = val(*s);
            let (batch, c) = (xv.dim(0), xv.dim(1));
            let hw = xv.numel() / (batch * c);
            if needs(*x) {
                let mut gx = gy.clone();
                for (plane, &sc) in gx.data_mut().chunks_exact_mut(hw).zip(sv.data()) {
                    plane.iter_mut().for_each(|v| *v *= sc);
                }
                accumulate(nodes, grads, *x, gx);
            }
            if needs(*s) {
                let gs: Vec<T> = gy
                    .data()
                    .chunks_exact(hw)
                    .zip(xv.data().chunks_exact(hw))
                    .map(|(g, xx)| g.iter().zip(xx).map(|(a, b)| *a * *b).sum())
                    .collect();
                accumulate(nodes, grads, *s, Tensor::from_vec(sv.shape(), gs));
            }
        }
        Op::AddBc(x, v) => {
            accumulate(nodes, grads, *x, gy.clone());
            if needs(*v) {
                let vv = val(*v);
                let hw = gy.numel() / vv.numel();
                let gv: Vec<T> = gy
                    .data()
                    .chunks_exact(hw)
                    .map(|p| p.iter().copied().sum())
                    .collect();
                accumulate(nodes, grads, *v, Tensor::from_vec(vv.shape(), gv));
            }
        }
        Op::LeakyRelu(x, slope) => {
            let slope = *slope;
            let g = zip_map(gy, val(*x), |g, v| if v > T::zero() { g } else { g * slope });
            accumulate(nodes, grads, *x, g);
        }
        Op::Tanh(x) => {
            accumulate(nodes, grads, *x, zip_map(gy, y, |g, t| g * (T::one() - t * t)));
        }
        Op::Sigmoid(x) => {
            accumulate(nodes, grads, *x, zip_map(gy, y, |g, s| g * s * (T::one() - s)));
        }
        Op::Exp(x) => accumulate(nodes, grads, *x, zip_map(gy, y, |g, e| g * e)),
        Op::Ln(x) => accumulate(nodes, grads, *x, zip_map(gy, val(*x), |g, v| g / v)),
        Op::Sqrt(x) => {
            let half = T::of(0.5);
            accumulate(nodes, grads, *x, zip_map(gy, y, |g, r| g * half / r));
        }
        Op::Powf(x, p) => {
            let p = *p;
            let g = zip_map(gy, val(*x), |g, v| g * p * v.powf(p - T::one()));
            accumulate(nodes, grads, *x, g);
        }
        Op::Upsample2x(x) => {
            let xv = val(*x);
            let (h, w) = (xv.dim(2), xv.dim(3));
            let mut gx = Tensor::zeros(xv.shape());
            for (plane_in, plane_out) in gx
                .data_mut()
                .chunks_exact_mut(h * w)
                .zip(gy.data().chunks_exact(4 * h * w))
            {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        plane_in[(i / 2) * w + j / 2] += plane_out[i * 2 * w + j];
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::AvgPool2x(x) => {
            let xv = val(*x);
            let (h, w) = (xv.dim(2), xv.dim(3));
            let quarter = T::of(0.25);
            let mut gx = Tensor::zeros(xv.shape());
            for (plane_in, plane_out) in gx
                .data_mut()
                .chunks_exact_mut(h * w)
                .zip(gy.data().chunks_exact(h * w / 4))
            {
                for i in 0..h {
                    for j in 0..w {
                        plane_in[i * w + j] = plane_out[(i / 2) * (w / 2) + j / 2] * quarter;
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Reshape(x) => {
            let g = gy.clone().reshaped(val(*x).shape());
            accumulate(nodes, grads, *x, g);
        }
        Op::Concat1(parts) => {
            let batch = gy.dim(0);
            let rest: usize = gy.shape()[2..].iter().product();
            let total = gy.dim(1) * rest;
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let block = pv.dim(1) * rest;
                if needs(p) {
                    let mut g = Vec::with_capacity(batch * block);
                    for b in 0..batch {
                        let start = b * total + offset;
                        g.extend_from_slice(&gy.data()[start..start + block]);
                    }
                    accumulate(nodes, grads, p, Tensor::from_vec(pv.shape(), g));
                }
                offset += block;
            }
        }
        Op::SumAll(x) => {
            let g = gy.item();
            accumulate(nodes, grads, *x, Tensor::full(val(*x).shape(), g));
        }
        Op::SumLast(x) => {
            let xv = val(*x);
            let n = *xv.shape().last().expect("rank >= 1");
            let mut g = Vec::with_capacity(xv.numel());
            for &v in gy.data() {
                g.extend(std::iter::repeat_n(v, n));
            }
            accumulate(nodes, grads, *x, Tensor::from_vec(xv.shape(), g));
        }
        Op::GatherRows(x, idx) => {
            let xv = val(*x);
            let inner: usize = xv.shape()[1..].iter().product();
            let mut gx = Tensor::zeros(xv.shape());
            for (row, &src) in idx.iter().enumerate() {
                let dst = &mut gx.data_mut()[src * inner..(src + 1) * inner];
                for (d, s) in dst.iter_mut().zip(&gy.data()[row * inner..(row + 1) * inner]) {
                    *d += *s;
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let lv = val(*logits);
            let k = lv.dim(1);
            let scale = gy.item() / T::of(labels.len() as f64);
            let mut g = probs.clone();
            for (row, &label) in labels.iter().enumerate() {
                g[row * k + label] -= T::one();
            }
            g.iter_mut().for_each(|v| *v *= scale);
            accumulate(nodes, grads, *logits, Tensor::from_vec(lv.shape(), g));
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.numel(), b.numel());
    Tensor::from_vec(
        b.shape(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn transpose2<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (t.dim(0), t.dim(1));
    let mut out = Vec::with_capacity(r * c);
    for j in 0..c {
        for i in 0..r {
            out.push(t.data()[i * c + j]);
        }
    }
    Tensor::from_vec(&[c, r], out)
}

/// Shape bookkeeping for a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be rank 4");
        assert_eq!(w.len(), 4, "conv2d weight must be rank 4");
        assert_eq!(x[1], w[1], "conv2d channel mismatch");
        assert_eq!(w[2], w[3], "conv2d kernel must be square");
        let k = w[2];
        assert!(x[2] + 2 * pad >= k && x[3] + 2 * pad >= k);
        Self {
            batch: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: w[0],
            k,
            stride,
            pad,
            hout: (x[2] + 2 * pad - k) / stride + 1,
            wout: (x[3] + 2 * pad - k) / stride + 1,
        }
    }

    pub fn ckk(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_hw(&self) -> usize {
        self.hout * self.wout
    }

    /// Writes one sample's patches into columns `col0..col0 + out_hw` of a
    /// `ckk × ld` matrix.
    pub fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T], ld: usize, col0: usize) {
        let hw = self.out_hw();
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * ld + col0..row * ld + col0 + hw];
                    for oy in 0..self.hout {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let out_row = &mut dst[oy * self.wout..(oy + 1) * self.wout];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *o = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeometry::im2col`].
    pub fn col2im<T: Scalar>(&self, cols: &[T], ld: usize, col0: usize, x: &mut [T]) {
        let hw = self.out_hw();
        for c in 0..self.cin {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * ld + col0..row * ld + col0 + hw];
                    for oy in 0..self.hout {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wout {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wout + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[C, B·hw]` to `[B, C, hw]`.
fn channel_major_to_batch<T: Scalar>(src: &[T], dst: &mut [T], batch: usize, c: usize, hw: usize) {
    for ci in 0..c {
        for b in 0..batch {
            let s = &src[(ci * batch + b) * hw..(ci * batch + b + 1) * hw];
            dst[(b * c + ci) * hw..(b * c + ci + 1) * hw].copy_from_slice(s);
        }
    }
}

/// `[B, C, hw]` to `[C, B·hw]`.
fn batch_to_channel_major<T: Scalar>(src: &[T], dst: &mut [T], batch: usize, c: usize, hw: usize) {
    for b in 0..batch {
        for ci in 0..c {
            let s = &src[(b * c + ci) * hw..(b * c + ci + 1) * hw];
            dst[(ci * batch + b) * hw..(ci * batch + b + 1) * hw].copy_from_slice(s);
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<String, usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .get(name)
            .and_then(|&id| self.grads.get(id))
            .and_then(|g| g.as_ref())
    }

    /// Consumes the gradients, returning those of named parameters.
    pub fn into_params(mut self) -> HashMap<String, Tensor<T>> {
        let mut out = HashMap::new();
        for (name, id) in self.params {
            if let Some(g) = self.grads.get_mut(id).and_then(Option::take) {
                out.insert(name, g);
            }
        }
        out
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Copies the current value out of the graph.
    pub fn tensor(&self) -> Tensor<T> {
        (*self.value()).clone()
    }

    /// The value of a one-element node.
    pub fn item(&self) -> T {
        self.value().item()
    }

    fn unary(self, op: Op<T>, f: impl Fn(T) -> T) -> Self {
        let out = self.value().map(f);
        self.graph.push(out, op, &[self.id])
    }

    fn binary(self, other: Self, op: Op<T>, f: impl Fn(T, T) -> T) -> Self {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
        let out = zip_map(&a, &b, f);
        self.graph.push(out, op, &[self.id, other.id])
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Self) -> Self {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Self) -> Self {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Self) -> Self {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(self, s: f64) -> Self {
        let s = T::of(s);
        self.unary(Op::Scale(self.id, s), |v| v * s)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn neg(self) -> Self {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Self {
        let c = T::of(c);
        self.unary(Op::AddScalar(self.id), |v| v + c)
    }

    pub fn square(self) -> Self {
        self.mul(self)
    }

    pub fn leaky_relu(self, slope: f64) -> Self {
        let s = T::of(slope);
        self.unary(Op::LeakyRelu(self.id, s), |v| if v > T::zero() { v } else { v * s })
    }

    pub fn tanh(self) -> Self {
        self.unary(Op::Tanh(self.id), |v| v.tanh())
    }

    pub fn sigmoid(self) -> Self {
        self.unary(Op::Sigmoid(self.id), |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        })
    }

    pub fn exp(self) -> Self {
        self.unary(Op::Exp(self.id), |v| v.exp())
    }

    pub fn ln(self) -> Self {
        self.unary(Op::Ln(self.id), |v| v.ln())
    }

    pub fn sqrt(self) -> Self {
        self.unary(Op::Sqrt(self.id), |v| v.sqrt())
    }

    pub fn powf(self, p: f64) -> Self {
        let p = T::of(p);
        self.unary(Op::Powf(self.id, p), |v| v.powf(p))
    }

    /// `[M, K] · [K, N]`.
    pub fn matmul(self, other: Self) -> Self {
        let a = self.value();
        let b = other.value();
        assert!(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 operands");
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        assert_eq!(k, b.dim(0), "matmul inner dimension mismatch");
        let mut out = Tensor::zeros(&[m, n]);
        matmul_into(
            MatRef::new(a.data(), m, k),
            MatRef::new(b.data(), k, n),
            out.data_mut(),
            false,
        );
        self.graph.push(out, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    pub fn transpose(self) -> Self {
        let out = transpose2(&self.value());
        self.graph.push(out, Op::Transpose(self.id), &[self.id])
    }

    /// Adds `bias[N]` to every row of a `[M, N]` matrix.
    pub fn add_row_bias(self, bias: Self) -> Self {
        let x = self.value();
        let b = bias.value();
        let n = x.dim(1);
        assert_eq!(b.numel(), n);
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_exact_mut(n) {
            for (v, bb) in row.iter_mut().zip(b.data()) {
                *v += *bb;
            }
        }
        self.graph
            .push(out, Op::AddRowBias(self.id, bias.id), &[self.id, bias.id])
    }

    /// `x @ w + b` for `x: [B, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(self, w: Self, b: Self) -> Self {
        self.matmul(w).add_row_bias(b)
    }

    /// Square-kernel cross-correlation of `[B, Cin, H, W]` with `[Cout, Cin, k, k]`.
    pub fn conv2d(self, weight: Self, stride: usize, pad: usize) -> Self {
        let x = self.value();
        let w = weight.value();
        let geo = ConvGeometry::new(x.shape(), w.shape(), stride, pad);
        let ckk = geo.ckk();
        let hw = geo.out_hw();
        let in_block = geo.cin * geo.h * geo.w;
        let n = geo.batch * hw;
        // Columns of every sample side by side, so one GEMM covers the batch.
        let mut cols = vec![T::zero(); ckk * n];
        for b in 0..geo.batch {
            geo.im2col(&x.data()[b * in_block..(b + 1) * in_block], &mut cols, n, b * hw);
        }
        let mut flat = vec![T::zero(); geo.cout * n];
        matmul_into(
            MatRef::new(w.data(), geo.cout, ckk),
            MatRef::new(&cols, ckk, n),
            &mut flat,
            false,
        );
        let mut out = Tensor::zeros(&[geo.batch, geo.cout, geo.hout, geo.wout]);
        channel_major_to_batch(&flat, out.data_mut(), geo.batch, geo.cout, hw);
        self.graph.push(
            out,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                stride,
                pad,
                cols,
            },
            &[self.id, weight.id],
        )
    }

    /// Adds a per-channel bias `[C]` to `[B, C, ...]`.
    pub fn channel_bias(self, bias: Self) -> Self {
        let x = self.value();
        let b = bias.value();
        let c = x.dim(1);
        assert_eq!(b.numel(), c);
        let hw = x.numel() / (x.dim(0) * c);
        let mut out = (*x).clone();
        for (i, plane) in out.data_mut().chunks_exact_mut(hw).enumerate() {
            let bb = b.data()[i % c];
            plane.iter_mut().for_each(|v| *v += bb);
        }
        self.graph
            .push(out, Op::ChannelBias(self.id, bias.id), &[self.id, bias.id])
    }

    /// Multiplies each `(batch, channel)` plane of `[B, C, ...]` by `s[B, C]`.
    pub fn scale_bc(self, s: Self) -> Self {
        let x = self.value();
        let sv = s.value();
        assert_eq!(sv.shape(), &x.shape()[..2], "scale_bc shape mismatch");
        let hw = x.numel() / sv.numel();
        let mut out = (*x).clone();
        for (plane, &sc) in out.data_mut().chunks_exact_mut(hw).zip(sv.data()) {
            plane.iter_mut().for_each(|v| *v *= sc);
        }
        self.graph.push(out, Op::ScaleBc(self.id, s.id), &[self.id, s.id])
    }

    /// Adds `v[B, C]` to each `(batch, channel)` plane of `[B, C, ...]`.
    pub fn add_bc(self, v: Self) -> Self {
        let x = self.value();
        let vv = v.value();
        assert_eq!(vv.shape(), &x.shape()[..2], "add_bc shape mismatch");
        let hw = x.numel() / vv.numel();
        let mut out = (*x).clone();
        for (plane, &a) in out.data_mut().chunks_exact_mut(hw).zip(vv.data()) {
            plane.iter_mut().for_each(|p| *p += a);
        }
        self.graph.push(out, Op::AddBc(self.id, v.id), &[self.id, v.id])
    }

    /// Nearest-neighbour 2× upsampling of `[B, C, H, W]`.
    pub fn upsample2x(self) -> Self {
        let x = self.value();
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let mut out = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
        for (src, dst) in x
            .data()
            .chunks_exact(h * w)
            .zip(out.data_mut().chunks_exact_mut(4 * h * w))
        {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        self.graph.push(out, Op::Upsample2x(self.id), &[self.id])
    }

    /// 2×2 mean pooling of `[B, C, H, W]` (H and W even).
    pub fn avg_pool2x(self) -> Self {
        let x = self.value();
        let (b, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2x needs even spatial dims");
        let quarter = T::of(0.25);
        let mut out = Tensor::zeros(&[b, c, h / 2, w / 2]);
        for (src, dst) in x
            .data()
            .chunks_exact(h * w)
            .zip(out.data_mut().chunks_exact_mut(h * w / 4))
        {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    let s = src[2 * i * w + 2 * j]
                        + src[2 * i * w + 2 * j + 1]
                        + src[(2 * i + 1) * w + 2 * j]
                        + src[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * (w / 2) + j] = s * quarter;
                }
            }
        }
        self.graph.push(out, Op::AvgPool2x(self.id), &[self.id])
    }

    pub fn reshape(self, shape: &[usize]) -> Self {
        let out = self.tensor().reshaped(shape);
        self.graph.push(out, Op::Reshape(self.id), &[self.id])
    }

    pub fn sum(self) -> Self {
        let s = self.value().sum();
        self.graph.push(Tensor::scalar(s), Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(self) -> Self {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over the last axis.
    pub fn sum_last(self) -> Self {
        let x = self.value();
        let shape = x.shape();
        let n = *shape.last().expect("sum_last on a scalar");
        let out: Vec<T> = x.data().chunks_exact(n).map(|c| c.iter().copied().sum()).collect();
        let out_shape = &shape[..shape.len() - 1];
        self.graph
            .push(Tensor::from_vec(out_shape, out), Op::SumLast(self.id), &[self.id])
    }

    /// Mean over every axis but the first, giving shape `[B]`.
    pub fn mean_per_row(self) -> Self {
        let shape = self.shape();
        let inner: usize = shape[1..].iter().product();
        self.reshape(&[shape[0], inner]).sum_last().scale(1.0 / inner as f64)
    }

    /// Rows `idx` of axis 0, repeating or reordering as given.
    pub fn gather_rows(self, idx: &[usize]) -> Self {
        let out = self.value().select_outer(idx);
        self.graph
            .push(out, Op::GatherRows(self.id, idx.to_vec()), &[self.id])
    }

    /// Mean softmax cross-entropy of `[B, K]` logits against integer labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Self {
        let x = self.value();
        assert_eq!(x.rank(), 2);
        let (b, k) = (x.dim(0), x.dim(1));
        assert_eq!(labels.len(), b, "one label per row");
        let mut probs = vec![T::zero(); b * k];
        let mut total = T::zero();
        for (row, &label) in labels.iter().enumerate() {
            assert!(label < k, "label {label} out of range for {k} classes");
            let logits = &x.data()[row * k..(row + 1) * k];
            let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &l) in probs[row * k..(row + 1) * k].iter_mut().zip(logits) {
                *p = (l - max).exp();
                z += *p;
            }
            probs[row * k..(row + 1) * k].iter_mut().for_each(|p| *p /= z);
            total += z.ln() + max - logits[label];
        }
        let loss = total / T::of(b as f64);
        self.graph.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
            &[self.id],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data)
    }

    /// Central finite differences of `f` at `x`, compared against autodiff.
    fn check_grad(x: Tensor<f64>, f: impl for<'g> Fn(Var<'g, f64>) -> Var<'g, f64>) {
        let g = Graph::new();
        let xv = g.input(x.clone());
        let loss = f(xv);
        let grads = g.backward(loss);
        let analytic = grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
        let h = 1e-6;
        for i in 0..x.numel() {
            let eval = |delta: f64| {
                let mut xp = x.clone();
                xp.data_mut()[i] += delta;
                let g = Graph::<f64>::no_grad();
                f(g.constant(xp)).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (1e-8 + a.abs().max(numeric.abs()));
            assert!(err < 1e-5, "element {i}: analytic {a} numeric {numeric}");
        }
    }

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_vec(
            shape,
            (0..n).map(|i| ((i * 37 % 17) as f64 - 8.0) / 7.0).collect(),
        )
    }

    #[test]
    fn conv_matches_direct_loop() {
        let x = ramp(&[2, 3, 5, 5]);
        let w = ramp(&[4, 3, 3, 3]);
        let g = Graph::new();
        let y = g.constant(x.clone()).conv2d(g.constant(w.clone()), 2, 1).tensor();
        assert_eq!(y.shape(), &[2, 4, 3, 3]);
        for b in 0..2 {
            for o in 0..4 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut acc = 0.0;
                        for c in 0..3 {
                            for ki in 0..3 {
                                for kj in 0..3 {
                                    let iy = (oy * 2 + ki) as isize - 1;
                                    let ix = (ox * 2 + kj) as isize - 1;
                                    if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                        acc += x.data()[((b * 3 + c) * 5 + iy as usize) * 5
                                            + ix as usize]
                                            * w.data()[((o * 3 + c) * 3 + ki) * 3 + kj];
                                    }
                                }
                            }
                        }
                        let got = y.data()[((b * 4 + o) * 3 + oy) * 3 + ox];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let w = ramp(&[2, 2, 3, 3]);
        check_grad(ramp(&[2, 2, 4, 4]), move |x| {
            let wv = x.graph.constant(w.clone());
            x.conv2d(wv, 1, 1).square().sum()
        });
        let x = ramp(&[2, 2, 4, 4]);
        check_grad(ramp(&[3, 2, 3, 3]), move |w| {
            let xv = w.graph.constant(x.clone());
            xv.conv2d(w, 2, 1).tanh().sum()
        });
    }

    #[test]
    fn elementwise_and_reduction_gradients() {
        check_grad(ramp(&[2, 3]), |x| x.sigmoid().ln().sum());
        check_grad(ramp(&[2, 3]), |x| x.tanh().mul(x).mean());
        check_grad(ramp(&[2, 3]), |x| x.leaky_relu(0.2).exp().sum());
        check_grad(ramp(&[2, 3]), |x| x.square().add_scalar(1.0).powf(-0.5).sum());
        check_grad(ramp(&[2, 3]), |x| x.square().add_scalar(0.5).sqrt().sum_last().sum());
        check_grad(ramp(&[2, 3]), |x| x.cross_entropy(&[2, 0]));
        check_grad(ramp(&[3, 2]), |x| x.gather_rows(&[2, 0, 2]).square().sum());
        check_grad(ramp(&[3, 2]), |x| x.matmul(x.transpose()).square().sum());
    }

    #[test]
    fn spatial_gradients() {
        check_grad(ramp(&[1, 2, 2, 2]), |x| x.upsample2x().square().sum());
        check_grad(ramp(&[1, 2, 4, 4]), |x| x.avg_pool2x().square().sum());
        let s = t(&[1, 2], &[0.5, -1.5]);
        check_grad(ramp(&[1, 2, 2, 2]), move |x| {
            let sv = x.graph.constant(s.clone());
            x.scale_bc(sv).add_bc(sv).square().sum()
        });
        check_grad(ramp(&[2, 3]), |x| {
            let s = x.scale(2.0);
            x.graph.concat1(&[x, s]).square().sum()
        });
        check_grad(ramp(&[1, 2, 2, 2]), |x| {
            let y = x.scale(0.5);
            x.graph.concat1(&[y, x]).sum_last().square().sum()
        });
    }

    #[test]
    fn param_reuse_accumulates() {
        let g = Graph::<f64>::new();
        let w = t(&[2], &[1.0, 2.0]);
        let a = g.param("w", &w);
        let b = g.param("w", &w);
        assert_eq!(a.id(), b.id());
        let loss = a.mul(b).sum();
        let grads = g.backward(loss);
        assert_eq!(grads.param("w").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn no_grad_graph_yields_no_gradients() {
        let g = Graph::<f64>::no_grad();
        let a = g.param("w", &t(&[2], &[1.0, 2.0]));
        let loss = a.square().sum();
        assert_eq!(loss.item(), 5.0);
        assert!(g.backward(loss).param("w").is_none());
    }
}
