//! A define-by-run reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse and accumulates gradients for every node that
//! transitively depends on a gradient-requiring leaf. Only the operations the
//! counting network needs are provided; each one carries its own adjoint.

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{gemm_into, matmul, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        relu: bool,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    MixRows {
        weights: Var,
        rows: Var,
    },
    Reshape(Var),
    Transpose(Var),
    MeanRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    /// Scalar output whose local gradients were computed during the forward pass.
    Scalar {
        inputs: Vec<Var>,
        grads: Vec<Tensor<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Per-parameter gradient sums (a parameter may appear on the tape more than once).
    pub fn for_params(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = store
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        for &(pid, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                out[pid.index()].add_assign(g);
            }
        }
        out
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf that receives gradients.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Places a trainable parameter on the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Places a parameter on the tape as a constant.
    pub fn frozen_param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Add(a, b), rg)
    }

    /// `x[n,c] + bias[c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let c = *self.shape(x).last().expect("rank ≥ 1");
        assert_eq!(self.value(bias).len(), c, "add_row: bias width");
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, bias]);
        self.push(out, Op::AddRow(x, bias), rg)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// 2-d product `op(a)·op(b)`.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul expects 2-d operands");
        let (out, m, n) = matmul(
            self.value(a).data(),
            sa[0],
            sa[1],
            ta,
            self.value(b).data(),
            sb[0],
            sb[1],
            tb,
        );
        let t = Tensor::from_vec(&[m, n], out).expect("matmul shape");
        let rg = self.rg(&[a, b]);
        self.push(t, Op::MatMul { a, b, ta, tb }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// `x[n,in] · w[in,out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let c = *self.shape(x).last().expect("rank ≥ 1");
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Normalizes every row over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let c = *self.shape(x).last().expect("rank ≥ 1");
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        let xv = self.value(x);
        let rows = xv.len() / c;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        let cn = T::from_usize(c).expect("width");
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + bt[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            Tensor::from_vec(&shape, out).expect("layer_norm shape"),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// 3×3 convolution, stride 1, zero padding 1, on `[Cin,H,W]` with weights
    /// `[Cout,Cin,3,3]` and bias `[Cout]`, optionally followed by ReLU.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, relu: bool) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(xs.len(), 3, "conv3x3 input must be [C,H,W]");
        assert_eq!(ws.len(), 4, "conv3x3 weight must be [Cout,Cin,3,3]");
        assert_eq!(ws[1], xs[0], "conv3x3 channel mismatch");
        assert!(ws[2] == 3 && ws[3] == 3, "conv3x3 kernel must be 3×3");
        let out = conv3x3_forward(
            self.value(x),
            self.value(w),
            self.value(b).data(),
            relu,
        );
        let rg = self.rg(&[x, w, b]);
        self.push(out, Op::Conv3x3 { x, w, b, relu }, rg)
    }

    /// 2×2 max pooling with stride 2 on `[C,H,W]` (H, W even).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![T::zero(); c * ho * wo];
        let mut argmax = vec![0u32; c * ho * wo];
        let d = xv.data();
        for ch in 0..c {
            let base = ch * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let cands = [
                        base + (2 * i) * w + 2 * j,
                        base + (2 * i) * w + 2 * j + 1,
                        base + (2 * i + 1) * w + 2 * j,
                        base + (2 * i + 1) * w + 2 * j + 1,
                    ];
                    let mut best = cands[0];
                    for &cidx in &cands[1..] {
                        if d[cidx] > d[best] {
                            best = cidx;
                        }
                    }
                    let o = (ch * ho + i) * wo + j;
                    out[o] = d[best];
                    argmax[o] = best as u32;
                }
            }
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_vec(&[c, ho, wo], out).expect("pool shape"),
            Op::MaxPool2 { x, argmax },
            rg,
        )
    }

    /// `Σ_s weights[s]·rows[s,:]` for `weights` of length S and `rows [S,M]`,
    /// accumulated in index order; returns `[1,M]`.
    pub fn mix_rows(&mut self, weights: Var, rows: Var) -> Var {
        let out = mix_rows(self.value(weights).data(), self.value(rows));
        let m = out.len();
        let rg = self.rg(&[weights, rows]);
        self.push(
            Tensor::from_vec(&[1, m], out).expect("mix shape"),
            Op::MixRows { weights, rows },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self
            .value(x)
            .clone()
            .reshape(shape)
            .expect("reshape element count");
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        assert_eq!(self.shape(x).len(), 2, "transpose expects 2-d");
        let out = self.value(x).transpose2();
        let rg = self.rg(&[x]);
        self.push(out, Op::Transpose(x), rg)
    }

    /// Column means of `[n,c]`, returned as `[1,c]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let (n, c) = (s[0], s[1]);
        let d = self.value(x).data();
        let inv = T::one() / T::from_usize(n).expect("rows");
        let mut out = vec![T::zero(); c];
        for r in 0..n {
            for (o, &v) in out.iter_mut().zip(&d[r * c..(r + 1) * c]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_vec(&[1, c], out).expect("mean shape"),
            Op::MeanRows(x),
            rg,
        )
    }

    /// Columns `start..start+len` of a 2-d node.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x);
        let (n, c) = (s[0], s[1]);
        assert!(start + len <= c, "slice_cols out of range");
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&d[r * c + start..r * c + start + len]);
        }
        let rg = self.rg(&[x]);
        self.push(
            Tensor::from_vec(&[n, len], out).expect("slice shape"),
            Op::SliceCols { x, start },
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p)[1]).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![T::zero(); n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            assert_eq!(self.shape(p)[0], n, "concat_cols row mismatch");
            let d = self.value(p).data();
            for r in 0..n {
                out[r * total + off..r * total + off + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        self.push(
            Tensor::from_vec(&[n, total], out).expect("concat shape"),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    /// Records a scalar-valued function whose local gradients (one per input,
    /// same shape as the input) are already known.
    pub fn scalar_fn(&mut self, inputs: &[Var], value: T, grads: Vec<Tensor<T>>) -> Var {
        assert_eq!(inputs.len(), grads.len());
        for (&v, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.value(v).len(), g.len(), "scalar_fn gradient shape");
        }
        let rg = self.rg(inputs);
        self.push(
            Tensor::scalar(value),
            Op::Scalar {
                inputs: inputs.to_vec(),
                grads,
            },
            rg,
        )
    }

    /// Reverse sweep from a single-element node.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(i, &g, &mut grads);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (p, i)))
            .collect();
        Gradients { grads, params }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.clone());
                self.acc(grads, *b, || g.clone());
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, || g.clone());
                self.acc(grads, *b, || {
                    let c = self.value(*b).len();
                    let mut gb = vec![T::zero(); c];
                    for row in g.data().chunks(c) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    Tensor::from_vec(self.shape(*b), gb).expect("bias grad")
                });
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(grads, *x, || g.map(|v| v * s));
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (sa, sb) = (av.shape(), bv.shape());
                let gs = g.shape();
                // C = op(A)·op(B); dop(A) = G·op(B)ᵀ, dop(B) = op(A)ᵀ·G.
                self.acc(grads, *a, || {
                    let out = if !*ta {
                        matmul(g.data(), gs[0], gs[1], false, bv.data(), sb[0], sb[1], !*tb).0
                    } else {
                        matmul(bv.data(), sb[0], sb[1], *tb, g.data(), gs[0], gs[1], true).0
                    };
                    Tensor::from_vec(sa, out).expect("matmul grad a")
                });
                self.acc(grads, *b, || {
                    let out = if !*tb {
                        matmul(av.data(), sa[0], sa[1], !*ta, g.data(), gs[0], gs[1], false).0
                    } else {
                        matmul(g.data(), gs[0], gs[1], true, av.data(), sa[0], sa[1], *ta).0
                    };
                    Tensor::from_vec(sb, out).expect("matmul grad b")
                });
            }
            Op::Relu(x) => {
                let y = &node.value;
                self.acc(grads, *x, || {
                    let mut out = g.clone();
                    for (o, &yv) in out.data_mut().iter_mut().zip(y.data()) {
                        if yv <= T::zero() {
                            *o = T::zero();
                        }
                    }
                    out
                });
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let c = *y.shape().last().expect("rank");
                self.acc(grads, *x, || {
                    let mut out = g.clone();
                    for (orow, yrow) in out.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                        let dot: T = orow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for (o, &yy) in orow.iter_mut().zip(yrow) {
                            *o = yy * (*o - dot);
                        }
                    }
                    out
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                self.acc(grads, *gamma, || {
                    let mut gg = vec![T::zero(); c];
                    for (grow, hrow) in g.data().chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                    Tensor::from_vec(&[c], gg).expect("gamma grad")
                });
                self.acc(grads, *beta, || {
                    let mut gb = vec![T::zero(); c];
                    for grow in g.data().chunks(c) {
                        for j in 0..c {
                            gb[j] += grow[j];
                        }
                    }
                    Tensor::from_vec(&[c], gb).expect("beta grad")
                });
                self.acc(grads, *x, || {
                    let cn = T::from_usize(c).expect("width");
                    let mut out = vec![T::zero(); g.len()];
                    for (r, (grow, hrow)) in g.data().chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut sum_gh = T::zero();
                        let mut sum_ghx = T::zero();
                        for j in 0..c {
                            let gh = grow[j] * gam[j];
                            sum_gh += gh;
                            sum_ghx += gh * hrow[j];
                        }
                        for j in 0..c {
                            let gh = grow[j] * gam[j];
                            out[r * c + j] =
                                inv_std[r] / cn * (cn * gh - sum_gh - hrow[j] * sum_ghx);
                        }
                    }
                    Tensor::from_vec(self.shape(*x), out).expect("ln grad")
                });
            }
            Op::Conv3x3 { x, w, b, relu } => {
                let mut gm = g.clone();
                if *relu {
                    for (o, &yv) in gm.data_mut().iter_mut().zip(node.value.data()) {
                        if yv <= T::zero() {
                            *o = T::zero();
                        }
                    }
                }
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                let (dx, dw) = conv3x3_backward(
                    self.value(*x),
                    self.value(*w),
                    &gm,
                    need_x,
                    need_w,
                );
                if let Some(dx) = dx {
                    self.acc(grads, *x, || dx);
                }
                if let Some(dw) = dw {
                    self.acc(grads, *w, || dw);
                }
                self.acc(grads, *b, || {
                    let s = gm.shape();
                    let hw = s[1] * s[2];
                    let gb: Vec<T> = gm.data().chunks(hw).map(|ch| ch.iter().copied().sum()).collect();
                    Tensor::from_vec(&[s[0]], gb).expect("conv bias grad")
                });
            }
            Op::MaxPool2 { x, argmax } => {
                self.acc(grads, *x, || {
                    let mut out = Tensor::zeros(self.shape(*x));
                    let od = out.data_mut();
                    for (&src, &gv) in argmax.iter().zip(g.data()) {
                        od[src as usize] += gv;
                    }
                    out
                });
            }
            Op::MixRows { weights, rows } => {
                let wv = self.value(*weights).data();
                let rv = self.value(*rows);
                let m = g.len();
                self.acc(grads, *weights, || {
                    let gw: Vec<T> = rv
                        .data()
                        .chunks(m)
                        .map(|row| row.iter().zip(g.data()).map(|(&a, &b)| a * b).sum())
                        .collect();
                    Tensor::from_vec(self.shape(*weights), gw).expect("mix weight grad")
                });
                self.acc(grads, *rows, || {
                    let mut out = Vec::with_capacity(rv.len());
                    for &w in wv {
                        out.extend(g.data().iter().map(|&v| v * w));
                    }
                    Tensor::from_vec(rv.shape(), out).expect("mix rows grad")
                });
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, || {
                    g.clone().reshape(self.shape(*x)).expect("reshape grad")
                });
            }
            Op::Transpose(x) => {
                self.acc(grads, *x, || g.transpose2());
            }
            Op::MeanRows(x) => {
                let s = self.shape(*x);
                let (n, c) = (s[0], s[1]);
                let inv = T::one() / T::from_usize(n).expect("rows");
                self.acc(grads, *x, || {
                    let mut out = Vec::with_capacity(n * c);
                    for _ in 0..n {
                        out.extend(g.data().iter().map(|&v| v * inv));
                    }
                    Tensor::from_vec(&[n, c], out).expect("mean grad")
                });
            }
            Op::SliceCols { x, start } => {
                let s = self.shape(*x);
                let (n, c) = (s[0], s[1]);
                let len = g.shape()[1];
                self.acc(grads, *x, || {
                    let mut out = Tensor::zeros(&[n, c]);
                    let od = out.data_mut();
                    for r in 0..n {
                        od[r * c + start..r * c + start + len]
                            .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                    }
                    out
                });
            }
            Op::ConcatCols(parts) => {
                let n = g.shape()[0];
                let total = g.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.acc(grads, p, || {
                        let mut out = Vec::with_capacity(n * w);
                        for r in 0..n {
                            out.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        Tensor::from_vec(&[n, w], out).expect("concat grad")
                    });
                    off += w;
                }
            }
            Op::Scalar { inputs, grads: local } => {
                let up = g.data()[0];
                for (&v, lg) in inputs.iter().zip(local) {
                    self.acc(grads, v, || lg.map(|x| x * up));
                }
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce() -> Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let t = f();
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        }
    }
}

/// Weighted row sum, accumulated in row order.
pub(crate) fn mix_rows<T: Scalar>(weights: &[T], rows: &Tensor<T>) -> Vec<T> {
    let s = weights.len();
    assert_eq!(rows.shape()[0], s, "mix_rows: weight count must equal row count");
    let m = rows.len() / s.max(1);
    let mut out = vec![T::zero(); m];
    for (w, row) in weights.iter().zip(rows.data().chunks(m)) {
        for (o, &r) in out.iter_mut().zip(row) {
            *o += *w * r;
        }
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

// The convolutions run on a zero-padded copy of the input whose rows are
// `W+2` wide. Each of the nine kernel taps is then one GEMM against a
// contiguous, shifted window of that buffer, producing output on the same
// padded-width grid; the two spare columns per row are discarded.

struct Padded<T> {
    data: Vec<T>,
    plane: usize,
    row: usize,
}

fn pad_input<T: Scalar>(x: &Tensor<T>) -> Padded<T> {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let row = w + 2;
    let plane = (h + 2) * row + 2;
    let mut data = vec![T::zero(); c * plane];
    let xd = x.data();
    for ch in 0..c {
        for r in 0..h {
            let dst = ch * plane + (r + 1) * row + 1;
            let src = (ch * h + r) * w;
            data[dst..dst + w].copy_from_slice(&xd[src..src + w]);
        }
    }
    Padded { data, plane, row }
}

fn conv3x3_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: &[T], relu: bool) -> Tensor<T> {
    let s = x.shape();
    let (cin, h, wd) = (s[0], s[1], s[2]);
    let cout = w.shape()[0];
    let p = pad_input(x);
    let span = h * p.row;
    let mut yp = vec![T::zero(); cout * span];
    let wdat = w.data();
    for tap in 0..9 {
        let (ky, kx) = (tap / 3, tap % 3);
        let off = ky * p.row + kx;
        let beta = if tap == 0 { T::zero() } else { T::one() };
        // SAFETY: the weight view spans cout×cin with strides (cin·9, 9) from
        // offset `tap`; the input window spans cin×span with strides
        // (plane, 1) starting at `off`, and off + span ≤ plane by construction.
        unsafe {
            T::gemm(
                cout,
                cin,
                span,
                T::one(),
                wdat.as_ptr().add(tap),
                (cin * 9) as isize,
                9,
                p.data.as_ptr().add(off),
                p.plane as isize,
                1,
                beta,
                yp.as_mut_ptr(),
                span as isize,
                1,
            );
        }
    }
    let mut out = vec![T::zero(); cout * h * wd];
    for co in 0..cout {
        let b = bias[co];
        for r in 0..h {
            let src = co * span + r * p.row;
            let dst = (co * h + r) * wd;
            for c in 0..wd {
                let v = yp[src + c] + b;
                out[dst + c] = if relu && v < T::zero() { T::zero() } else { v };
            }
        }
    }
    Tensor::from_vec(&[cout, h, wd], out).expect("conv output")
}

fn conv3x3_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let s = x.shape();
    let (cin, h, wd) = (s[0], s[1], s[2]);
    let cout = w.shape()[0];
    let row = wd + 2;
    let span = h * row;
    let mut gp = vec![T::zero(); cout * span];
    for co in 0..cout {
        for r in 0..h {
            let src = (co * h + r) * wd;
            let dst = co * span + r * row;
            gp[dst..dst + wd].copy_from_slice(&g.data()[src..src + wd]);
        }
    }
    let mut dw = None;
    if need_w {
        let p = pad_input(x);
        let mut out = vec![T::zero(); cout * cin * 9];
        for tap in 0..9 {
            let (ky, kx) = (tap / 3, tap % 3);
            let off = ky * p.row + kx;
            // SAFETY: gp is cout×span (span, 1); the transposed input window
            // is span×cin with strides (1, plane) from `off`; the output view
            // is cout×cin with strides (cin·9, 9) from `tap`.
            unsafe {
                T::gemm(
                    cout,
                    span,
                    cin,
                    T::one(),
                    gp.as_ptr(),
                    span as isize,
                    1,
                    p.data.as_ptr().add(off),
                    1,
                    p.plane as isize,
                    T::zero(),
                    out.as_mut_ptr().add(tap),
                    (cin * 9) as isize,
                    9,
                );
            }
        }
        dw = Some(Tensor::from_vec(w.shape(), out).expect("conv weight grad"));
    }
    let mut dx = None;
    if need_x {
        let plane = (h + 2) * row + 2;
        let mut dxp = vec![T::zero(); cin * plane];
        let wdat = w.data();
        for tap in 0..9 {
            let (ky, kx) = (tap / 3, tap % 3);
            let off = ky * row + kx;
            // SAFETY: wᵀ view is cin×cout with strides (9, cin·9) from `tap`;
            // gp is cout×span; the output window is cin×span with strides
            // (plane, 1) from `off`, within bounds as in the forward pass.
            unsafe {
                T::gemm(
                    cin,
                    cout,
                    span,
                    T::one(),
                    wdat.as_ptr().add(tap),
                    9,
                    (cin * 9) as isize,
                    gp.as_ptr(),
                    span as isize,
                    1,
                    T::one(),
                    dxp.as_mut_ptr().add(off),
                    plane as isize,
                    1,
                );
            }
        }
        let mut out = vec![T::zero(); cin * h * wd];
        for ci in 0..cin {
            for r in 0..h {
                let src = ci * plane + (r + 1) * row + 1;
                let dst = (ci * h + r) * wd;
                out[dst..dst + wd].copy_from_slice(&dxp[src..src + wd]);
            }
        }
        dx = Some(Tensor::from_vec(s, out).expect("conv input grad"));
    }
    (dx, dw)
}

/// Plain `a·b` on 2-d tensors outside any tape.
pub fn matmul2<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (sa, sb) = (a.shape(), b.shape());
    let mut out = vec![T::zero(); sa[0] * sb[1]];
    gemm_into(a.data(), sa[1], false, b.data(), sb[1], false, &mut out, sa[0], sa[1], sb[1], T::zero());
    Tensor::from_vec(&[sa[0], sb[1]], out).expect("matmul2 shape")
}
