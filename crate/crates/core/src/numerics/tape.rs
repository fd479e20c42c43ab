//! Reverse-mode differentiation over a linear operation record.
//!
//! Every operation appends a node holding its forward value. Node ids are
//! assigned in creation order, so a single reverse sweep over ids is a valid
//! topological order and visits each node once. Nodes created from constants
//! (or only from other constants) are untracked and never receive gradients.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::{gemm, gemm_nt, gemm_tn, transpose_raw, Tensor};
use crate::error::{MpbmError, Result};

/// Simplex tolerance for cross-entropy targets.
pub const TARGET_SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    /// a · bᵀ
    MatMulNT(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// a (r×c) + row (1×c) broadcast over rows
    AddRow(usize, usize),
    /// a (r×c) ⊙ row (1×c) broadcast over rows
    MulRow(usize, usize),
    /// mul · a + add
    Affine(usize, f64),
    Tanh(usize),
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Clamp(usize, f64, f64),
    SoftmaxRows(usize),
    CrossEntropy {
        logits: usize,
        target: usize,
        reduction: Reduction,
    },
    SumAll(usize),
    MeanAll(usize),
    /// r×c -> 1×c
    MeanRows(usize),
    /// r×c -> r×1
    SumCols(usize),
    Reshape(usize),
    ConcatRows(Vec<usize>),
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        pad: usize,
    },
    MaxPool2d {
        input: usize,
        argmax: Vec<usize>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    tracked: bool,
}

/// Operation record for one differentiation pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push_raw(value, Op::Constant, false)
    }

    fn push_raw(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let tracked = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].tracked)
        };
        self.push_raw(value, op, tracked)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(MpbmError::shape(
                "backward",
                format!("loss must be scalar, got {:?}", root.value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| {
                g.filter(|_| n.tracked)
                    .map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or zeros if `v` does not influence the loss.
    pub fn get(&self, v: Var<'_>) -> Tensor {
        self.try_get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.value().shape()))
    }

    pub fn try_get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }
}

/// Result of [`grad`]: one gradient per requested input plus a flag marking
/// inputs that were detached from the graph (their gradient is zero).
#[derive(Debug)]
pub struct GradReport {
    pub grads: Vec<Tensor>,
    pub detached: Vec<bool>,
}

pub fn grad(tape: &Tape, loss: Var<'_>, wrt: &[Var<'_>]) -> Result<GradReport> {
    let g = tape.backward(loss)?;
    let detached = wrt.iter().map(|v| !v.is_tracked()).collect();
    let grads = wrt.iter().map(|&v| g.get(v)).collect();
    Ok(GradReport { grads, detached })
}

fn acc(grads: &mut [Option<Vec<f64>>], id: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[id].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let tracked = |id: usize| nodes[id].tracked;
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let out = &node.value;

    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::MatMul(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[1];
            if tracked(*a) {
                acc(grads, *a, m * k, |ga| gemm_nt(g, val(*b).data(), ga, m, n, k));
            }
            if tracked(*b) {
                acc(grads, *b, k * n, |gb| gemm_tn(val(*a).data(), g, gb, k, m, n));
            }
        }
        Op::MatMulNT(a, b) => {
            let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[0];
            if tracked(*a) {
                acc(grads, *a, m * k, |ga| gemm(g, val(*b).data(), ga, m, n, k));
            }
            if tracked(*b) {
                acc(grads, *b, n * k, |gb| gemm_tn(g, val(*a).data(), gb, n, m, k));
            }
        }
        Op::Transpose(a) => {
            if tracked(*a) {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                let gt = transpose_raw(g, c, r);
                acc(grads, *a, r * c, |ga| add_into(ga, &gt));
            }
        }
        Op::Add(a, b) => {
            for p in [a, b] {
                if tracked(*p) {
                    acc(grads, *p, g.len(), |gp| add_into(gp, g));
                }
            }
        }
        Op::Sub(a, b) => {
            if tracked(*a) {
                acc(grads, *a, g.len(), |ga| add_into(ga, g));
            }
            if tracked(*b) {
                acc(grads, *b, g.len(), |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                });
            }
        }
        Op::Mul(a, b) => {
            if tracked(*a) {
                let bv = val(*b).data();
                acc(grads, *a, g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
            }
            if tracked(*b) {
                let av = val(*a).data();
                acc(grads, *b, g.len(), |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
        }
        Op::AddRow(a, row) => {
            let c = val(*row).len();
            if tracked(*a) {
                acc(grads, *a, g.len(), |ga| add_into(ga, g));
            }
            if tracked(*row) {
                acc(grads, *row, c, |gr| {
                    for chunk in g.chunks(c) {
                        add_into(gr, chunk);
                    }
                });
            }
        }
        Op::MulRow(a, row) => {
            let c = val(*row).len();
            let rv = val(*row).data();
            let av = val(*a).data();
            if tracked(*a) {
                acc(grads, *a, g.len(), |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * rv[i % c];
                    }
                });
            }
            if tracked(*row) {
                acc(grads, *row, c, |gr| {
                    for i in 0..g.len() {
                        gr[i % c] += g[i] * av[i];
                    }
                });
            }
        }
        Op::Affine(a, mul) => {
            if tracked(*a) {
                acc(grads, *a, g.len(), |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += mul * y)
                });
            }
        }
        Op::Tanh(a) => unary(grads, *a, tracked(*a), g, |i, gi| {
            let y = out.data()[i];
            gi * (1.0 - y * y)
        }),
        Op::Relu(a) => {
            let av = val(*a).data();
            unary(grads, *a, tracked(*a), g, |i, gi| if av[i] > 0.0 { gi } else { 0.0 })
        }
        Op::Sigmoid(a) => unary(grads, *a, tracked(*a), g, |i, gi| {
            let y = out.data()[i];
            gi * y * (1.0 - y)
        }),
        Op::Log(a) => {
            let av = val(*a).data();
            unary(grads, *a, tracked(*a), g, |i, gi| gi / av[i])
        }
        Op::Clamp(a, lo, hi) => {
            let av = val(*a).data();
            unary(grads, *a, tracked(*a), g, |i, gi| {
                if av[i] >= *lo && av[i] <= *hi {
                    gi
                } else {
                    0.0
                }
            })
        }
        Op::SoftmaxRows(a) => {
            if tracked(*a) {
                let c = last_dim(out);
                let y = out.data();
                acc(grads, *a, g.len(), |ga| {
                    for (r, (yr, gr)) in y.chunks(c).zip(g.chunks(c)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..c {
                            ga[r * c + k] += yr[k] * (gr[k] - dot);
                        }
                    }
                });
            }
        }
        Op::CrossEntropy {
            logits,
            target,
            reduction,
        } => {
            let z = val(*logits);
            let t = val(*target);
            let c = last_dim(z);
            let rows = z.len() / c;
            let scale = g[0]
                * match reduction {
                    Reduction::Mean => 1.0 / rows as f64,
                    Reduction::Sum => 1.0,
                };
            let mut gz = vec![0.0; z.len()];
            let mut gt = vec![0.0; z.len()];
            for r in 0..rows {
                let zr = &z.data()[r * c..(r + 1) * c];
                let tr = &t.data()[r * c..(r + 1) * c];
                let lse = log_sum_exp(zr);
                let tsum: f64 = tr.iter().sum();
                for k in 0..c {
                    let logp = zr[k] - lse;
                    gz[r * c + k] = scale * (logp.exp() * tsum - tr[k]);
                    gt[r * c + k] = -scale * logp;
                }
            }
            if tracked(*logits) {
                acc(grads, *logits, gz.len(), |ga| add_into(ga, &gz));
            }
            if tracked(*target) {
                acc(grads, *target, gt.len(), |ga| add_into(ga, &gt));
            }
        }
        Op::SumAll(a) => {
            if tracked(*a) {
                let n = val(*a).len();
                acc(grads, *a, n, |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
        }
        Op::MeanAll(a) => {
            if tracked(*a) {
                let n = val(*a).len();
                let s = g[0] / n as f64;
                acc(grads, *a, n, |ga| ga.iter_mut().for_each(|x| *x += s));
            }
        }
        Op::MeanRows(a) => {
            if tracked(*a) {
                let (r, c) = (val(*a).rows(), val(*a).cols());
                acc(grads, *a, r * c, |ga| {
                    for i in 0..r {
                        for k in 0..c {
                            ga[i * c + k] += g[k] / r as f64;
                        }
                    }
                });
            }
        }
        Op::SumCols(a) => {
            if tracked(*a) {
                let (r, c) = (val(*a).rows(), val(*a).cols());
                acc(grads, *a, r * c, |ga| {
                    for i in 0..r {
                        for k in 0..c {
                            ga[i * c + k] += g[i];
                        }
                    }
                });
            }
        }
        Op::Reshape(a) => {
            if tracked(*a) {
                acc(grads, *a, g.len(), |ga| add_into(ga, g));
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                if tracked(p) {
                    acc(grads, p, n, |gp| add_into(gp, &g[offset..offset + n]));
                }
                offset += n;
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            pad,
        } => conv2d_backward(nodes, *input, *weight, *bias, *pad, out.shape(), g, grads),
        Op::MaxPool2d { input, argmax } => {
            if tracked(*input) {
                let n = val(*input).len();
                acc(grads, *input, n, |gi| {
                    for (o, &src) in argmax.iter().enumerate() {
                        gi[src] += g[o];
                    }
                });
            }
        }
    }
}

fn unary(
    grads: &mut [Option<Vec<f64>>],
    a: usize,
    tracked: bool,
    g: &[f64],
    f: impl Fn(usize, f64) -> f64,
) {
    if tracked {
        acc(grads, a, g.len(), |ga| {
            for (i, &gi) in g.iter().enumerate() {
                ga[i] += f(i, gi);
            }
        });
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn last_dim(t: &Tensor) -> usize {
    t.shape().last().copied().unwrap_or(1).max(1)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_raw(data: &[f64], c: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(c) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut sum = 0.0;
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        out[start..].iter_mut().for_each(|e| *e /= sum);
    }
    out
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
    pad: usize,
}

impl ConvGeom {
    /// Fill `cols` ((c·k·k) × (ho·wo)) with the patches of image `img`.
    fn im2col(&self, x: &[f64], img: usize, cols: &mut [f64]) {
        let (c, h, w, k, ho, wo) = (self.c, self.h, self.w, self.k, self.ho, self.wo);
        let base = img * c * h * w;
        let plane = ho * wo;
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ch * k + ki) * k + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy + ki) as isize - self.pad as isize;
                        for ox in 0..wo {
                            let ix = (ox + kj) as isize - self.pad as isize;
                            dst[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                x[base + ch * h * w + iy as usize * w + ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], img: usize, gx: &mut [f64]) {
        let (c, h, w, k, ho, wo) = (self.c, self.h, self.w, self.k, self.ho, self.wo);
        let base = img * c * h * w;
        let plane = ho * wo;
        for ch in 0..c {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ch * k + ki) * k + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy + ki) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox + kj) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                gx[base + ch * h * w + iy as usize * w + ix as usize] +=
                                    src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_geom(x: &Tensor, w: &Tensor, pad: usize) -> Result<ConvGeom> {
    let (&[n, c, h, wd], &[o, c2, k, k2]) = (x.shape(), w.shape()) else {
        return Err(MpbmError::shape(
            "conv2d",
            format!("input {:?}, weight {:?}", x.shape(), w.shape()),
        ));
    };
    if c != c2 || k != k2 || h + 2 * pad < k || wd + 2 * pad < k {
        return Err(MpbmError::shape(
            "conv2d",
            format!("input {:?}, weight {:?}, pad {pad}", x.shape(), w.shape()),
        ));
    }
    Ok(ConvGeom {
        n,
        c,
        h,
        w: wd,
        o,
        k,
        ho: h + 2 * pad - k + 1,
        wo: wd + 2 * pad - k + 1,
        pad,
    })
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    nodes: &[Node],
    input: usize,
    weight: usize,
    bias: usize,
    pad: usize,
    out_shape: &[usize],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let x = &nodes[input].value;
    let w = &nodes[weight].value;
    let geom = conv_geom(x, w, pad).expect("validated in forward");
    debug_assert_eq!(out_shape, &[geom.n, geom.o, geom.ho, geom.wo]);
    let ckk = geom.c * geom.k * geom.k;
    let plane = geom.ho * geom.wo;

    if nodes[bias].tracked {
        acc(grads, bias, geom.o, |gb| {
            for img in 0..geom.n {
                for o in 0..geom.o {
                    let off = (img * geom.o + o) * plane;
                    gb[o] += g[off..off + plane].iter().sum::<f64>();
                }
            }
        });
    }
    let mut cols = vec![0.0; ckk * plane];
    if nodes[weight].tracked {
        let mut gw = vec![0.0; geom.o * ckk];
        for img in 0..geom.n {
            geom.im2col(x.data(), img, &mut cols);
            let gimg = &g[img * geom.o * plane..(img + 1) * geom.o * plane];
            gemm_nt(gimg, &cols, &mut gw, geom.o, plane, ckk);
        }
        acc(grads, weight, gw.len(), |dst| add_into(dst, &gw));
    }
    if nodes[input].tracked {
        let mut gx = vec![0.0; x.len()];
        for img in 0..geom.n {
            cols.iter_mut().for_each(|v| *v = 0.0);
            let gimg = &g[img * geom.o * plane..(img + 1) * geom.o * plane];
            gemm_tn(w.data(), gimg, &mut cols, ckk, geom.o, plane);
            geom.col2im(&cols, img, &mut gx);
        }
        acc(grads, input, gx.len(), |dst| add_into(dst, &gx));
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn check_same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars belong to different tapes"
        );
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let v = self.value().matmul(&other.value())?;
        Ok(self.tape.push(v, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let (a, b) = (self.value(), other.value());
        let (&[m, k], &[n, k2]) = (a.shape(), b.shape()) else {
            return Err(MpbmError::shape("matmul_t", "operands must be matrices"));
        };
        if k != k2 {
            return Err(MpbmError::shape("matmul_t", format!("{m}x{k} times ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(a.data(), b.data(), &mut out, m, k, n);
        let v = Tensor::from_parts(vec![m, n], out);
        Ok(self.tape.push(v, Op::MatMulNT(self.id, other.id), &[self.id, other.id]))
    }

    pub fn t(self) -> Result<Var<'t>> {
        let v = self.value().transpose()?;
        Ok(self.tape.push(v, Op::Transpose(self.id), &[self.id]))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let v = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self.tape.push(v, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let v = self.value().zip_map(&other.value(), |a, b| a - b)?;
        Ok(self.tape.push(v, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(&other);
        let v = self.value().zip_map(&other.value(), |a, b| a * b)?;
        Ok(self.tape.push(v, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    fn broadcast_row(self, row: Var<'t>, op: &'static str, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        self.check_same_tape(&row);
        let (a, r) = (self.value(), row.value());
        let c = r.len();
        if a.ndim() != 2 || a.cols() != c {
            return Err(MpbmError::shape(
                op,
                format!("{:?} with row {:?}", a.shape(), r.shape()),
            ));
        }
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, r.data()[i % c]))
            .collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    /// Add a 1×c (or c) row to every row of an r×c matrix.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let v = self.broadcast_row(row, "add_row", |a, b| a + b)?;
        Ok(self.tape.push(v, Op::AddRow(self.id, row.id), &[self.id, row.id]))
    }

    /// Scale every row of an r×c matrix elementwise by a 1×c (or c) row.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let v = self.broadcast_row(row, "mul_row", |a, b| a * b)?;
        Ok(self.tape.push(v, Op::MulRow(self.id, row.id), &[self.id, row.id]))
    }

    /// `mul · self + add`.
    pub fn affine(self, mul: f64, add: f64) -> Var<'t> {
        let v = self.value().map(|x| mul * x + add);
        self.tape.push(v, Op::Affine(self.id, mul), &[self.id])
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.affine(s, 0.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.affine(-1.0, 0.0)
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.tape.push(v, Op::Tanh(self.id), &[self.id])
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.tape.push(v, Op::Relu(self.id), &[self.id])
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.tape.push(v, Op::Sigmoid(self.id), &[self.id])
    }

    /// Natural log; inputs must be strictly positive.
    pub fn ln(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.data().iter().any(|&v| v <= 0.0) {
            return Err(MpbmError::Invariant("log of a non-positive value".into()));
        }
        let v = x.map(f64::ln);
        Ok(self.tape.push(v, Op::Log(self.id), &[self.id]))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        let v = self.value().map(|x| x.clamp(lo, hi));
        self.tape.push(v, Op::Clamp(self.id, lo, hi), &[self.id])
    }

    /// Softmax along the last axis with max subtraction.
    pub fn softmax(self) -> Var<'t> {
        let x = self.value();
        let v = Tensor::from_parts(x.shape().to_vec(), softmax_raw(x.data(), last_dim(&x)));
        self.tape.push(v, Op::SoftmaxRows(self.id), &[self.id])
    }

    /// `-Σ_k target_k · log softmax(self)_k` per row, reduced over rows.
    /// Targets must lie on the probability simplex; they may themselves be
    /// differentiable.
    pub fn cross_entropy(self, target: Var<'t>, reduction: Reduction) -> Result<Var<'t>> {
        self.check_same_tape(&target);
        let (z, t) = (self.value(), target.value());
        if z.shape() != t.shape() {
            return Err(MpbmError::shape(
                "cross_entropy",
                format!("logits {:?}, target {:?}", z.shape(), t.shape()),
            ));
        }
        let c = last_dim(&z);
        let rows = z.len() / c;
        let mut total = 0.0;
        for r in 0..rows {
            let zr = &z.data()[r * c..(r + 1) * c];
            let tr = &t.data()[r * c..(r + 1) * c];
            let s: f64 = tr.iter().sum();
            if (s - 1.0).abs() > TARGET_SIMPLEX_TOL || tr.iter().any(|&v| v < -TARGET_SIMPLEX_TOL) {
                return Err(MpbmError::Invariant(format!(
                    "cross-entropy target row {r} is off the simplex (sum {s})"
                )));
            }
            let lse = log_sum_exp(zr);
            total += zr.iter().zip(tr).map(|(zk, tk)| tk * (lse - zk)).sum::<f64>();
        }
        if reduction == Reduction::Mean {
            total /= rows as f64;
        }
        Ok(self.tape.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits: self.id,
                target: target.id,
                reduction,
            },
            &[self.id, target.id],
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.tape.push(v, Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().mean());
        self.tape.push(v, Op::MeanAll(self.id), &[self.id])
    }

    /// Mean over the leading axis: r×c -> 1×c.
    pub fn mean_rows(self) -> Var<'t> {
        let x = self.value();
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![0.0; c];
        for row in x.data().chunks(c) {
            add_into(&mut out, row);
        }
        out.iter_mut().for_each(|v| *v /= r as f64);
        self.tape
            .push(Tensor::from_parts(vec![1, c], out), Op::MeanRows(self.id), &[self.id])
    }

    /// Sum within each row: r×c -> r×1.
    pub fn sum_cols(self) -> Var<'t> {
        let x = self.value();
        let (r, c) = (x.rows(), x.cols());
        let out: Vec<f64> = x.data().chunks(c).map(|row| row.iter().sum()).collect();
        self.tape
            .push(Tensor::from_parts(vec![r, 1], out), Op::SumCols(self.id), &[self.id])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.tape.push(v, Op::Reshape(self.id), &[self.id]))
    }

    /// Flatten everything after the leading axis.
    pub fn flatten(self) -> Result<Var<'t>> {
        let x = self.value();
        self.reshape(&[x.rows(), x.cols()])
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| MpbmError::shape("concat_rows", "no inputs"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat_rows(&refs)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.tape.push(v, Op::ConcatRows(ids.clone()), &ids))
    }

    /// 2-D convolution, stride 1, zero padding `pad`.
    /// Input N×C×H×W, weight O×C×k×k, bias O.
    pub fn conv2d(self, weight: Var<'t>, bias: Var<'t>, pad: usize) -> Result<Var<'t>> {
        let (x, w, b) = (self.value(), weight.value(), bias.value());
        let geom = conv_geom(&x, &w, pad)?;
        if b.len() != geom.o {
            return Err(MpbmError::shape("conv2d", "bias length must equal output channels"));
        }
        let ckk = geom.c * geom.k * geom.k;
        let plane = geom.ho * geom.wo;
        let mut out = vec![0.0; geom.n * geom.o * plane];
        let mut cols = vec![0.0; ckk * plane];
        for img in 0..geom.n {
            geom.im2col(x.data(), img, &mut cols);
            let dst = &mut out[img * geom.o * plane..(img + 1) * geom.o * plane];
            for o in 0..geom.o {
                dst[o * plane..(o + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v = b.data()[o]);
            }
            gemm(w.data(), &cols, dst, geom.o, ckk, plane);
        }
        let v = Tensor::from_parts(vec![geom.n, geom.o, geom.ho, geom.wo], out);
        Ok(self.tape.push(
            v,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
                pad,
            },
            &[self.id, weight.id, bias.id],
        ))
    }

    /// Non-overlapping max pooling with window and stride `size`.
    pub fn max_pool2d(self, size: usize) -> Result<Var<'t>> {
        let x = self.value();
        let &[n, c, h, w] = x.shape() else {
            return Err(MpbmError::shape("max_pool2d", format!("{:?}", x.shape())));
        };
        if size == 0 || h < size || w < size {
            return Err(MpbmError::shape("max_pool2d", format!("{:?} / {size}", x.shape())));
        }
        let (ho, wo) = (h / size, w / size);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let idx = base + (oy * size + dy) * w + ox * size + dx;
                            if x.data()[idx] > x.data()[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x.data()[best]);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::from_parts(vec![n, c, ho, wo], out);
        Ok(self.tape.push(
            v,
            Op::MaxPool2d {
                input: self.id,
                argmax,
            },
            &[self.id],
        ))
    }
}
