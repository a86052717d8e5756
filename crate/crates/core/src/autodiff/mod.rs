//! Define-by-run reverse-mode autodiff over dense tensors.
//!
//! A `Graph` is built eagerly per forward pass: every op computes its value
//! on insertion and the tape replays in reverse for gradients. Parameters are
//! leaves tagged with a (set, index) key so one graph can mix several
//! parameter sets (segmentation network and discriminator) and the trainer
//! can route gradients to the right optimizer.

pub mod kernels;

use crate::error::{Error, Result};
use crate::fields::{bilinear_taps_for, mip_with_argmax, MipAxis, NORM_FLOOR};
use crate::orientation::{apply_orientation, OrientationElement};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T: Scalar> {
    Const,
    /// Grad-tracked leaf that is not a parameter.
    Input,
    Param {
        set: usize,
        index: usize,
    },
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(T),
    AddScalar(T),
    Ln,
    Exp,
    Clamp {
        lo: T,
        hi: T,
    },
    Relu,
    LeakyRelu(T),
    Softplus,
    Sigmoid,
    SumAll,
    MeanAll,
    Reshape,
    MatMul {
        ta: bool,
        tb: bool,
    },
    LogSoftmaxRows,
    DiagSum,
    L2NormAxis0,
    L2NormRows,
    L1NormAxis0,
    Conv3d,
    Conv2d,
    MaxPool3d2 {
        argmax: Vec<usize>,
    },
    MaxPool2d2 {
        argmax: Vec<usize>,
    },
    GlobalAvgPool2d,
    Upsample3d2,
    ConcatAxis0 {
        sizes: Vec<usize>,
    },
    SliceAxis0 {
        start: usize,
    },
    PermuteFlip3d {
        g: OrientationElement,
    },
    GridAvgPool3d {
        grid: [usize; 3],
    },
    Mip3d {
        argmax: Vec<usize>,
    },
    ResizeBilinear2d,
    AddRows,
}

struct Node<T: Scalar> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Gradients<T: Scalar> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn of(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.by_node[id.0].as_ref()
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, delta: Tensor<T>) {
    match slot {
        None => *slot = Some(delta),
        Some(acc) => {
            let dst = acc.data_mut();
            for (d, s) in dst.iter_mut().zip(delta.data().iter()) {
                *d += *s;
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        self.nodes[id.0].value.item()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>) -> NodeId {
        let needs_grad = match op {
            Op::Const => false,
            Op::Input | Op::Param { .. } => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Const, vec![], value)
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Input, vec![], value)
    }

    pub fn param(&mut self, set: usize, index: usize, value: Tensor<T>) -> NodeId {
        self.push(Op::Param { set, index }, vec![], value)
    }

    fn binary(&mut self, op: Op<T>, a: NodeId, b: NodeId, f: impl Fn(T, T) -> T) -> NodeId {
        assert_eq!(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            "elementwise op shape mismatch"
        );
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, f);
        self.push(op, vec![a, b], v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(Op::Div, a, b, |x, y| x / y)
    }

    fn unary(&mut self, op: Op<T>, a: NodeId, f: impl Fn(T) -> T + Sync) -> NodeId {
        let v = self.nodes[a.0].value.map(f);
        self.push(op, vec![a], v)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Neg, a, |x| -x)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        self.unary(Op::Scale(c), a, |x| x * c)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: T) -> NodeId {
        self.unary(Op::AddScalar(c), a, |x| x + c)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Ln, a, |x| x.ln())
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp, a, |x| x.exp())
    }

    pub fn clamp(&mut self, a: NodeId, lo: T, hi: T) -> NodeId {
        self.unary(Op::Clamp { lo, hi }, a, |x| x.max(lo).min(hi))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Relu, a, |x| x.max(T::zero()))
    }

    pub fn leaky_relu(&mut self, a: NodeId, alpha: T) -> NodeId {
        self.unary(
            Op::LeakyRelu(alpha),
            a,
            |x| if x > T::zero() { x } else { alpha * x },
        )
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Softplus, a, softplus_stable)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sigmoid, a, sigmoid_stable)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.nodes[a.0].value.sum());
        self.push(Op::SumAll, vec![a], v)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = T::from_usize(self.nodes[a.0].value.numel());
        let v = Tensor::scalar(self.nodes[a.0].value.sum() / n);
        self.push(Op::MeanAll, vec![a], v)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self.nodes[a.0].value.reshape(shape);
        self.push(Op::Reshape, vec![a], v)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> NodeId {
        let v = kernels::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, ta, tb);
        self.push(Op::MatMul { ta, tb }, vec![a, b], v)
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.rank(), 2);
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &x.data()[i * c..][..c];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut z = T::zero();
            for &v in row {
                z += (v - m).exp();
            }
            let lse = m + z.ln();
            for j in 0..c {
                out[i * c + j] = row[j] - lse;
            }
        }
        let v = Tensor::from_vec(&[r, c], out);
        self.push(Op::LogSoftmaxRows, vec![a], v)
    }

    pub fn diag_sum(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.rank(), 2);
        assert_eq!(x.shape()[0], x.shape()[1], "diag_sum needs a square matrix");
        let n = x.shape()[0];
        let mut s = T::zero();
        for i in 0..n {
            s += x.at2(i, i);
        }
        self.push(Op::DiagSum, vec![a], Tensor::scalar(s))
    }

    /// Normalizes each axis-0 fibre (column) of a rank>=2 tensor to unit l2
    /// norm; divisor carries a small floor against zero fibres.
    pub fn l2_normalize_axis0(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let k = x.shape()[0];
        let s: usize = x.shape()[1..].iter().product();
        let floor = T::from_f64(NORM_FLOOR);
        let src = x.data();
        let mut out = vec![T::zero(); src.len()];
        for v in 0..s {
            let mut acc = T::zero();
            for c in 0..k {
                let val = src[c * s + v];
                acc += val * val;
            }
            let inv = T::one() / (acc.sqrt() + floor);
            for c in 0..k {
                out[c * s + v] = src[c * s + v] * inv;
            }
        }
        let v = Tensor::from_vec(x.shape(), out);
        self.push(Op::L2NormAxis0, vec![a], v)
    }

    /// Normalizes each row of a (R,K) matrix to unit l2 norm.
    pub fn l2_normalize_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.rank(), 2);
        let (r, k) = (x.shape()[0], x.shape()[1]);
        let floor = T::from_f64(NORM_FLOOR);
        let src = x.data();
        let mut out = vec![T::zero(); src.len()];
        for i in 0..r {
            let row = &src[i * k..][..k];
            let mut acc = T::zero();
            for &v in row {
                acc += v * v;
            }
            let inv = T::one() / (acc.sqrt() + floor);
            for j in 0..k {
                out[i * k + j] = row[j] * inv;
            }
        }
        let v = Tensor::from_vec(x.shape(), out);
        self.push(Op::L2NormRows, vec![a], v)
    }

    /// Normalizes each axis-0 fibre of a nonnegative tensor to sum 1, with a
    /// uniform fallback on all-zero fibres (zero gradient there).
    pub fn l1_normalize_axis0(&mut self, a: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let k = x.shape()[0];
        let s: usize = x.shape()[1..].iter().product();
        let src = x.data();
        let uniform = T::one() / T::from_usize(k);
        let mut out = vec![T::zero(); src.len()];
        for v in 0..s {
            let mut total = T::zero();
            for c in 0..k {
                total += src[c * s + v];
            }
            if total > T::zero() {
                for c in 0..k {
                    out[c * s + v] = src[c * s + v] / total;
                }
            } else {
                for c in 0..k {
                    out[c * s + v] = uniform;
                }
            }
        }
        let v = Tensor::from_vec(x.shape(), out);
        self.push(Op::L1NormAxis0, vec![a], v)
    }

    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let v = kernels::conv3d_fwd(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        self.push(Op::Conv3d, vec![x, w, b], v)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let v = kernels::conv2d_fwd(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[b.0].value,
        );
        self.push(Op::Conv2d, vec![x, w, b], v)
    }

    pub fn maxpool3d2(&mut self, x: NodeId) -> NodeId {
        let (v, argmax) = kernels::maxpool3d2_fwd(&self.nodes[x.0].value);
        self.push(Op::MaxPool3d2 { argmax }, vec![x], v)
    }

    pub fn maxpool2d2(&mut self, x: NodeId) -> NodeId {
        let (v, argmax) = kernels::maxpool2d2_fwd(&self.nodes[x.0].value);
        self.push(Op::MaxPool2d2 { argmax }, vec![x], v)
    }

    /// (N,C,H,W) -> (N,C) spatial mean.
    pub fn global_avg_pool2d(&mut self, x: NodeId) -> NodeId {
        let t = &self.nodes[x.0].value;
        let (n, c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2], t.shape()[3]);
        let hw = T::from_usize(h * w);
        let mut out = vec![T::zero(); n * c];
        for i in 0..n * c {
            let mut s = T::zero();
            for &v in &t.data()[i * h * w..][..h * w] {
                s += v;
            }
            out[i] = s / hw;
        }
        let v = Tensor::from_vec(&[n, c], out);
        self.push(Op::GlobalAvgPool2d, vec![x], v)
    }

    pub fn upsample3d2(&mut self, x: NodeId) -> NodeId {
        let v = kernels::upsample3d2_fwd(&self.nodes[x.0].value);
        self.push(Op::Upsample3d2, vec![x], v)
    }

    /// Concatenates along axis 0; all trailing dims must match.
    pub fn concat_axis0(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let trailing: Vec<usize> = self.nodes[parts[0].0].value.shape()[1..].to_vec();
        let mut sizes = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for p in parts {
            let sh = self.nodes[p.0].value.shape();
            assert_eq!(&sh[1..], trailing.as_slice(), "concat trailing dims differ");
            sizes.push(sh[0]);
            total += sh[0];
        }
        let inner: usize = trailing.iter().product();
        let mut data = Vec::with_capacity(total * inner);
        for p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let mut shape = vec![total];
        shape.extend_from_slice(&trailing);
        let v = Tensor::from_vec(&shape, data);
        self.push(Op::ConcatAxis0 { sizes }, parts.to_vec(), v)
    }

    pub fn slice_axis0(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = &self.nodes[a.0].value;
        let inner: usize = x.shape()[1..].iter().product();
        let mut shape = vec![len];
        shape.extend_from_slice(&x.shape()[1..]);
        let v = Tensor::from_vec(
            &shape,
            x.data()[start * inner..(start + len) * inner].to_vec(),
        );
        self.push(Op::SliceAxis0 { start }, vec![a], v)
    }

    pub fn permute_flip3d(&mut self, a: NodeId, g: OrientationElement) -> Result<NodeId> {
        let v = apply_orientation(&self.nodes[a.0].value, &g)?;
        Ok(self.push(Op::PermuteFlip3d { g }, vec![a], v))
    }

    /// Averages (K,D,H,W) voxel fibres over a regular spatial grid,
    /// producing (K, gd*gh*gw) cell means.
    pub fn grid_avg_pool3d(&mut self, a: NodeId, grid: [usize; 3]) -> Result<NodeId> {
        let x = &self.nodes[a.0].value;
        let (k, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if d % grid[0] != 0 || h % grid[1] != 0 || w % grid[2] != 0 {
            return Err(Error::ShapeMismatch(format!(
                "field {:?} not divisible by patch grid {:?}",
                x.shape(),
                grid
            )));
        }
        let (cd, ch, cw) = (d / grid[0], h / grid[1], w / grid[2]);
        let cells = grid[0] * grid[1] * grid[2];
        let cell_n = T::from_usize(cd * ch * cw);
        let src = x.data();
        let mut out = vec![T::zero(); k * cells];
        for kk in 0..k {
            for gd in 0..grid[0] {
                for gh in 0..grid[1] {
                    for gw in 0..grid[2] {
                        let mut s = T::zero();
                        for dd in 0..cd {
                            for hh in 0..ch {
                                let base =
                                    ((kk * d + gd * cd + dd) * h + gh * ch + hh) * w + gw * cw;
                                for ww in 0..cw {
                                    s += src[base + ww];
                                }
                            }
                        }
                        let cell = (gd * grid[1] + gh) * grid[2] + gw;
                        out[kk * cells + cell] = s / cell_n;
                    }
                }
            }
        }
        let v = Tensor::from_vec(&[k, cells], out);
        Ok(self.push(Op::GridAvgPool3d { grid }, vec![a], v))
    }

    pub fn mip3d(&mut self, a: NodeId, axis: MipAxis) -> NodeId {
        let (v, argmax) = mip_with_argmax(&self.nodes[a.0].value, axis).expect("mip input");
        self.push(Op::Mip3d { argmax }, vec![a], v)
    }

    pub fn resize_bilinear2d(&mut self, a: NodeId, oh: usize, ow: usize) -> NodeId {
        let v = crate::fields::resize_bilinear(&self.nodes[a.0].value, oh, ow);
        self.push(Op::ResizeBilinear2d, vec![a], v)
    }

    /// (N,K) + (K) row-broadcast add.
    pub fn add_rows(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let x = &self.nodes[a.0].value;
        let b = &self.nodes[bias.0].value;
        assert_eq!(x.rank(), 2);
        assert_eq!(b.numel(), x.shape()[1]);
        let (n, k) = (x.shape()[0], x.shape()[1]);
        let mut out = x.data().to_vec();
        for i in 0..n {
            for j in 0..k {
                out[i * k + j] += b.data()[j];
            }
        }
        let v = Tensor::from_vec(x.shape(), out);
        self.push(Op::AddRows, vec![a, bias], v)
    }

    /// Reverse pass from a rank-0 loss node.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(
            self.nodes[loss.0].value.numel(),
            1,
            "backward needs a scalar loss"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g, &mut grads);
            // Keep leaf grads addressable after the pass.
            match self.nodes[id].op {
                Op::Input | Op::Param { .. } => grads[id] = Some(g),
                _ => {
                    if id == loss.0 {
                        grads[id] = Some(g);
                    }
                }
            }
        }
        Gradients { by_node: grads }
    }

    /// Gradients for every parameter of one set used in this graph.
    pub fn param_grads(&self, grads: &Gradients<T>, set: usize) -> Vec<(usize, Tensor<T>)> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param { set: s, index } = node.op {
                if s == set {
                    if let Some(g) = &grads.by_node[i] {
                        out.push((index, g.clone()));
                    }
                }
            }
        }
        out
    }

    fn backprop_node(&self, id: usize, g: &Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>) {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let val = |i: usize| &self.nodes[ins[i].0].value;
        let needs = |i: usize| self.nodes[ins[i].0].needs_grad;
        let send = |i: usize, delta: Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>| {
            accumulate(&mut grads[ins[i].0], delta);
        };
        match &node.op {
            Op::Const | Op::Input | Op::Param { .. } => {}
            Op::Add => {
                if needs(0) {
                    send(0, g.clone(), grads);
                }
                if needs(1) {
                    send(1, g.clone(), grads);
                }
            }
            Op::Sub => {
                if needs(0) {
                    send(0, g.clone(), grads);
                }
                if needs(1) {
                    send(1, g.map(|v| -v), grads);
                }
            }
            Op::Mul => {
                if needs(0) {
                    send(0, g.zip_map(val(1), |gv, b| gv * b), grads);
                }
                if needs(1) {
                    send(1, g.zip_map(val(0), |gv, a| gv * a), grads);
                }
            }
            Op::Div => {
                let b = val(1);
                if needs(0) {
                    send(0, g.zip_map(b, |gv, bv| gv / bv), grads);
                }
                if needs(1) {
                    let a = val(0);
                    let delta = Tensor::from_vec(
                        g.shape(),
                        g.data()
                            .iter()
                            .zip(a.data().iter().zip(b.data().iter()))
                            .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                            .collect(),
                    );
                    send(1, delta, grads);
                }
            }
            Op::Neg => send(0, g.map(|v| -v), grads),
            Op::Scale(c) => {
                let c = *c;
                send(0, g.map(|v| v * c), grads)
            }
            Op::AddScalar(_) => send(0, g.clone(), grads),
            Op::Ln => send(0, g.zip_map(val(0), |gv, x| gv / x), grads),
            Op::Exp => send(0, g.zip_map(&node.value, |gv, y| gv * y), grads),
            Op::Clamp { lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                send(
                    0,
                    g.zip_map(val(0), |gv, x| {
                        if x >= lo && x <= hi {
                            gv
                        } else {
                            T::zero()
                        }
                    }),
                    grads,
                )
            }
            Op::Relu => send(
                0,
                g.zip_map(val(0), |gv, x| if x > T::zero() { gv } else { T::zero() }),
                grads,
            ),
            Op::LeakyRelu(a) => {
                let a = *a;
                send(
                    0,
                    g.zip_map(val(0), |gv, x| if x > T::zero() { gv } else { a * gv }),
                    grads,
                )
            }
            Op::Softplus => send(
                0,
                g.zip_map(val(0), |gv, x| gv * sigmoid_stable(x)),
                grads,
            ),
            Op::Sigmoid => send(
                0,
                g.zip_map(&node.value, |gv, y| gv * y * (T::one() - y)),
                grads,
            ),
            Op::SumAll => {
                let gv = g.item();
                send(0, Tensor::full(val(0).shape(), gv), grads)
            }
            Op::MeanAll => {
                let n = T::from_usize(val(0).numel());
                let gv = g.item() / n;
                send(0, Tensor::full(val(0).shape(), gv), grads)
            }
            Op::Reshape => send(0, g.reshape(val(0).shape()), grads),
            Op::MatMul { ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let a = val(0);
                let b = val(1);
                if needs(0) {
                    let ga = if !ta {
                        kernels::matmul(g, b, false, !tb)
                    } else {
                        kernels::matmul(b, g, tb, true)
                    };
                    send(0, ga, grads);
                }
                if needs(1) {
                    let gb = if !tb {
                        kernels::matmul(a, g, !ta, false)
                    } else {
                        kernels::matmul(g, a, true, ta)
                    };
                    send(1, gb, grads);
                }
            }
            Op::LogSoftmaxRows => {
                // dx = g - softmax(x) * rowsum(g)
                let y = &node.value;
                let (r, c) = (y.shape()[0], y.shape()[1]);
                let mut out = vec![T::zero(); r * c];
                for i in 0..r {
                    let mut gsum = T::zero();
                    for j in 0..c {
                        gsum += g.at2(i, j);
                    }
                    for j in 0..c {
                        out[i * c + j] = g.at2(i, j) - y.at2(i, j).exp() * gsum;
                    }
                }
                send(0, Tensor::from_vec(y.shape(), out), grads)
            }
            Op::DiagSum => {
                let x = val(0);
                let n = x.shape()[0];
                let gv = g.item();
                let mut out = Tensor::zeros(x.shape());
                for i in 0..n {
                    out.set2(i, i, gv);
                }
                send(0, out, grads)
            }
            Op::L2NormAxis0 => {
                let x = val(0);
                let k = x.shape()[0];
                let s: usize = x.shape()[1..].iter().product();
                let floor = T::from_f64(NORM_FLOOR);
                let xd = x.data();
                let gd = g.data();
                let mut out = vec![T::zero(); xd.len()];
                for v in 0..s {
                    let mut nrm = T::zero();
                    let mut dot = T::zero();
                    for c in 0..k {
                        let xv = xd[c * s + v];
                        nrm += xv * xv;
                        dot += gd[c * s + v] * xv;
                    }
                    let n = nrm.sqrt();
                    let denom = n + floor;
                    let factor = dot / ((n + floor) * denom * denom);
                    for c in 0..k {
                        out[c * s + v] = gd[c * s + v] / denom - xd[c * s + v] * factor;
                    }
                }
                send(0, Tensor::from_vec(x.shape(), out), grads)
            }
            Op::L2NormRows => {
                let x = val(0);
                let (r, k) = (x.shape()[0], x.shape()[1]);
                let floor = T::from_f64(NORM_FLOOR);
                let xd = x.data();
                let gd = g.data();
                let mut out = vec![T::zero(); xd.len()];
                for i in 0..r {
                    let xrow = &xd[i * k..][..k];
                    let grow = &gd[i * k..][..k];
                    let mut nrm = T::zero();
                    let mut dot = T::zero();
                    for j in 0..k {
                        nrm += xrow[j] * xrow[j];
                        dot += grow[j] * xrow[j];
                    }
                    let n = nrm.sqrt();
                    let denom = n + floor;
                    let factor = dot / ((n + floor) * denom * denom);
                    for j in 0..k {
                        out[i * k + j] = grow[j] / denom - xrow[j] * factor;
                    }
                }
                send(0, Tensor::from_vec(x.shape(), out), grads)
            }
            Op::L1NormAxis0 => {
                let x = val(0);
                let k = x.shape()[0];
                let s: usize = x.shape()[1..].iter().product();
                let xd = x.data();
                let gd = g.data();
                let mut out = vec![T::zero(); xd.len()];
                for v in 0..s {
                    let mut total = T::zero();
                    let mut dot = T::zero();
                    for c in 0..k {
                        total += xd[c * s + v];
                        dot += gd[c * s + v] * xd[c * s + v];
                    }
                    if total > T::zero() {
                        let t2 = total * total;
                        for c in 0..k {
                            out[c * s + v] = gd[c * s + v] / total - dot / t2;
                        }
                    }
                }
                send(0, Tensor::from_vec(x.shape(), out), grads)
            }
            Op::Conv3d => {
                let (gx, gw, gb) = kernels::conv3d_bwd(val(0), val(1), g);
                if needs(0) {
                    send(0, gx, grads);
                }
                if needs(1) {
                    send(1, gw, grads);
                }
                if needs(2) {
                    send(2, gb, grads);
                }
            }
            Op::Conv2d => {
                let (gx, gw, gb) = kernels::conv2d_bwd(val(0), val(1), g);
                if needs(0) {
                    send(0, gx, grads);
                }
                if needs(1) {
                    send(1, gw, grads);
                }
                if needs(2) {
                    send(2, gb, grads);
                }
            }
            Op::MaxPool3d2 { argmax } | Op::MaxPool2d2 { argmax } => {
                let mut out = Tensor::zeros(val(0).shape());
                let od = out.data_mut();
                for (o, &src_idx) in argmax.iter().enumerate() {
                    od[src_idx] += g.data()[o];
                }
                send(0, out, grads)
            }
            Op::GlobalAvgPool2d => {
                let x = val(0);
                let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let hw = T::from_usize(h * w);
                let mut out = vec![T::zero(); x.numel()];
                for i in 0..n * c {
                    let gv = g.data()[i] / hw;
                    for v in &mut out[i * h * w..(i + 1) * h * w] {
                        *v = gv;
                    }
                }
                send(0, Tensor::from_vec(x.shape(), out), grads)
            }
            Op::Upsample3d2 => send(
                0,
                kernels::upsample3d2_bwd(g, val(0).shape()),
                grads,
            ),
            Op::ConcatAxis0 { sizes } => {
                let inner: usize = node.value.shape()[1..].iter().product();
                let mut offset = 0usize;
                for (i, &sz) in sizes.iter().enumerate() {
                    if needs(i) {
                        let mut shape = vec![sz];
                        shape.extend_from_slice(&node.value.shape()[1..]);
                        let part = Tensor::from_vec(
                            &shape,
                            g.data()[offset * inner..(offset + sz) * inner].to_vec(),
                        );
                        accumulate(&mut grads[ins[i].0], part);
                    }
                    offset += sz;
                }
            }
            Op::SliceAxis0 { start } => {
                let x = val(0);
                let inner: usize = x.shape()[1..].iter().product();
                let mut out = Tensor::zeros(x.shape());
                let od = out.data_mut();
                od[start * inner..start * inner + g.numel()].copy_from_slice(g.data());
                send(0, out, grads)
            }
            Op::PermuteFlip3d { g: elem } => {
                let back = apply_orientation(g, &elem.inverse()).expect("inverse orientation");
                send(0, back, grads)
            }
            Op::GridAvgPool3d { grid } => {
                let x = val(0);
                let (k, d, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (cd, ch, cw) = (d / grid[0], h / grid[1], w / grid[2]);
                let cells = grid[0] * grid[1] * grid[2];
                let cell_n = T::from_usize(cd * ch * cw);
                let mut out = vec![T::zero(); x.numel()];
                for kk in 0..k {
                    for gd in 0..grid[0] {
                        for gh in 0..grid[1] {
                            for gw in 0..grid[2] {
                                let cell = (gd * grid[1] + gh) * grid[2] + gw;
                                let gv = g.data()[kk * cells + cell] / cell_n;
                                for dd in 0..cd {
                                    for hh in 0..ch {
                                        let base = ((kk * d + gd * cd + dd) * h + gh * ch + hh)
                                            * w
                                            + gw * cw;
                                        for ww in 0..cw {
                                            out[base + ww] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                send(0, Tensor::from_vec(x.shape(), out), grads)
            }
            Op::Mip3d { argmax } => {
                let mut out = Tensor::zeros(val(0).shape());
                let od = out.data_mut();
                for (o, &src_idx) in argmax.iter().enumerate() {
                    od[src_idx] += g.data()[o];
                }
                send(0, out, grads)
            }
            Op::ResizeBilinear2d => {
                let x = val(0);
                let (h, w) = (x.shape()[0], x.shape()[1]);
                let (oh, ow) = (node.value.shape()[0], node.value.shape()[1]);
                let mut out = Tensor::zeros(x.shape());
                let od = out.data_mut();
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g.at2(oy, ox);
                        for (idx, wgt) in bilinear_taps_for::<T>(h, w, oh, ow, oy, ox) {
                            od[idx] += gv * wgt;
                        }
                    }
                }
                send(0, out, grads)
            }
            Op::AddRows => {
                if needs(0) {
                    send(0, g.clone(), grads);
                }
                if needs(1) {
                    let (n, k) = (g.shape()[0], g.shape()[1]);
                    let mut out = vec![T::zero(); k];
                    for i in 0..n {
                        for j in 0..k {
                            out[j] += g.at2(i, j);
                        }
                    }
                    send(1, Tensor::from_vec(&[k], out), grads);
                }
            }
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid_stable<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus_stable<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-(x.abs())).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen::<f64>() - 0.5)
    }

    /// Central finite-difference check of dL/dx for a scalar-valued builder.
    fn fd_check(
        build: impl Fn(&mut Graph<f64>, NodeId) -> NodeId,
        x0: &Tensor<f64>,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let gx = grads.of(x).expect("input grad").clone();
        let eps = 1e-6;
        for idx in 0..x0.numel() {
            let mut xp = x0.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x0.clone();
            xm.data_mut()[idx] -= eps;
            let mut gp = Graph::new();
            let np = gp.input(xp);
            let lp = build(&mut gp, np);
            let mut gm = Graph::new();
            let nm = gm.input(xm);
            let lm = build(&mut gm, nm);
            let fd = (gp.scalar_value(lp) - gm.scalar_value(lm)) / (2.0 * eps);
            let got = gx.data()[idx];
            let denom = fd.abs().max(got.abs()).max(1e-8);
            assert!(
                (fd - got).abs() / denom < tol,
                "idx {}: fd {} vs analytic {}",
                idx,
                fd,
                got
            );
        }
    }

    #[test]
    fn elementwise_chain_gradient() {
        let x0 = rand_t(&[8], 1).map(|v| v + 1.5); // keep ln inputs positive
        fd_check(
            |g, x| {
                let a = g.ln(x);
                let b = g.exp(a);
                let c = g.mul(a, b);
                let d = g.scale(c, 0.7);
                let e = g.add_scalar(d, 0.3);
                g.sum_all(e)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn activations_gradient() {
        let x0 = rand_t(&[10], 2).map(|v| v * 3.0);
        fd_check(
            |g, x| {
                let a = g.sigmoid(x);
                let b = g.softplus(x);
                let c = g.leaky_relu(x, 0.1);
                let ab = g.mul(a, b);
                let s = g.add(ab, c);
                g.mean_all(s)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn div_and_sub_gradient() {
        let x0 = rand_t(&[6], 3).map(|v| v + 2.0);
        fd_check(
            |g, x| {
                let c = g.constant(Tensor::full(&[6], 1.7));
                let d = g.div(c, x);
                let e = g.sub(d, x);
                g.sum_all(e)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn matmul_gradients_all_combos() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a_shape = if ta { [4, 3] } else { [3, 4] };
            let b_shape = if tb { [5, 4] } else { [4, 5] };
            let b0 = rand_t(&b_shape, 40 + ta as u64 + 2 * tb as u64);
            let x0 = rand_t(&a_shape, 50 + ta as u64 + 2 * tb as u64);
            fd_check(
                |g, x| {
                    let b = g.constant(b0.clone());
                    let m = g.matmul(x, b, ta, tb);
                    let s = g.mul(m, m);
                    g.sum_all(s)
                },
                &x0,
                1e-6,
            );
            // Also check gradient w.r.t. the second operand.
            let a0 = rand_t(&a_shape, 60);
            fd_check(
                |g, x| {
                    let a = g.constant(a0.clone());
                    let m = g.matmul(a, x, ta, tb);
                    let s = g.mul(m, m);
                    g.sum_all(s)
                },
                &b0,
                1e-6,
            );
        }
    }

    #[test]
    fn log_softmax_diag_gradient() {
        let x0 = rand_t(&[5, 5], 5);
        fd_check(
            |g, x| {
                let ls = g.log_softmax_rows(x);
                let d = g.diag_sum(ls);
                g.neg(d)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn normalization_gradients() {
        let x0 = rand_t(&[4, 6], 6).map(|v| v + 0.1);
        fd_check(
            |g, x| {
                let n = g.l2_normalize_axis0(x);
                let w = g.constant(rand_t(&[4, 6], 7));
                let p = g.mul(n, w);
                g.sum_all(p)
            },
            &x0,
            1e-5,
        );
        fd_check(
            |g, x| {
                let n = g.l2_normalize_rows(x);
                let w = g.constant(rand_t(&[4, 6], 8));
                let p = g.mul(n, w);
                g.sum_all(p)
            },
            &x0,
            1e-5,
        );
        let pos = rand_t(&[4, 6], 9).map(|v| v.abs() + 0.05);
        fd_check(
            |g, x| {
                let n = g.l1_normalize_axis0(x);
                let w = g.constant(rand_t(&[4, 6], 10));
                let p = g.mul(n, w);
                g.sum_all(p)
            },
            &pos,
            1e-5,
        );
    }

    #[test]
    fn conv_pool_upsample_gradient() {
        let x0 = rand_t(&[2, 4, 4, 4], 11);
        let w0 = rand_t(&[3, 2, 3, 3, 3], 12);
        let b0 = rand_t(&[3], 13);
        fd_check(
            |g, x| {
                let w = g.constant(w0.clone());
                let b = g.constant(b0.clone());
                let c = g.conv3d(x, w, b);
                let r = g.relu(c);
                let p = g.maxpool3d2(r);
                let u = g.upsample3d2(p);
                let m = g.mul(u, u);
                g.sum_all(m)
            },
            &x0,
            1e-5,
        );
        // weight gradient
        fd_check(
            |g, w| {
                let x = g.constant(x0.clone());
                let b = g.constant(b0.clone());
                let c = g.conv3d(x, w, b);
                let m = g.mul(c, c);
                g.sum_all(m)
            },
            &w0,
            1e-5,
        );
    }

    #[test]
    fn conv2d_pipeline_gradient() {
        let x0 = rand_t(&[2, 1, 8, 8], 14);
        let w0 = rand_t(&[2, 1, 3, 3], 15);
        let b0 = rand_t(&[2], 16);
        let fc_w = rand_t(&[2, 3], 17);
        let fc_b = rand_t(&[3], 18);
        fd_check(
            |g, x| {
                let w = g.constant(w0.clone());
                let b = g.constant(b0.clone());
                let c = g.conv2d(x, w, b);
                let r = g.leaky_relu(c, 0.2);
                let p = g.maxpool2d2(r);
                let gap = g.global_avg_pool2d(p);
                let fw = g.constant(fc_w.clone());
                let fb = g.constant(fc_b.clone());
                let fc = g.matmul(gap, fw, false, false);
                let fc = g.add_rows(fc, fb);
                let s = g.sigmoid(fc);
                g.sum_all(s)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn mip_resize_gradient_tie_free() {
        // Strictly increasing offsets guarantee a tie-free field.
        let mut base = rand_t(&[4, 4, 4], 19);
        for (i, v) in base.data_mut().iter_mut().enumerate() {
            *v += i as f64 * 1e-3;
        }
        fd_check(
            |g, x| {
                let m = g.mip3d(x, MipAxis::Z);
                let r = g.resize_bilinear2d(m, 7, 9);
                let w = g.constant(rand_t(&[7, 9], 20));
                let p = g.mul(r, w);
                g.sum_all(p)
            },
            &base,
            1e-5,
        );
    }

    #[test]
    fn concat_slice_orientation_gradient() {
        let x0 = rand_t(&[2, 3, 3, 3], 21);
        let g_el = OrientationElement {
            perm: [2, 0, 1],
            flips: [true, false, true],
        };
        fd_check(
            |g, x| {
                let o = g.permute_flip3d(x, g_el).unwrap();
                let both = g.concat_axis0(&[o, x]);
                let sl = g.slice_axis0(both, 1, 2);
                let m = g.mul(sl, sl);
                g.sum_all(m)
            },
            &x0,
            1e-6,
        );
    }

    #[test]
    fn grid_avg_pool_gradient() {
        let x0 = rand_t(&[3, 4, 4, 4], 22);
        fd_check(
            |g, x| {
                let cells = g.grid_avg_pool3d(x, [2, 2, 2]).unwrap();
                let n = g.l2_normalize_rows(cells);
                let w = g.constant(rand_t(&[3, 8], 23));
                let p = g.mul(n, w);
                g.sum_all(p)
            },
            &x0,
            1e-5,
        );
    }

    #[test]
    fn needs_grad_skips_constant_branches() {
        let mut g: Graph<f64> = Graph::new();
        let c = g.constant(rand_t(&[4], 24));
        let x = g.input(rand_t(&[4], 25));
        let p = g.mul(c, x);
        let s = g.sum_all(p);
        let grads = g.backward(s);
        assert!(grads.of(c).is_none());
        assert!(grads.of(x).is_some());
    }

    #[test]
    fn mip_gradient_hits_argmax_only() {
        let mut f = Tensor::<f64>::zeros(&[3, 2, 2]);
        // distinct values, max along depth at d=2 for every (h,w)
        for d in 0..3 {
            for h in 0..2 {
                for w in 0..2 {
                    f.set3(d, h, w, d as f64 + 0.1 * (h * 2 + w) as f64);
                }
            }
        }
        let mut g = Graph::new();
        let x = g.input(f.clone());
        let m = g.mip3d(x, MipAxis::Z);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        let gx = grads.of(x).unwrap();
        for d in 0..3 {
            for h in 0..2 {
                for w in 0..2 {
                    let expect = if d == 2 { 1.0 } else { 0.0 };
                    assert_eq!(gx.at3(d, h, w), expect);
                }
            }
        }
    }
}
