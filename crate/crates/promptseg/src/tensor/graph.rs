//! Reverse-mode automatic differentiation on a per-sample tape.
//!
//! A [`Graph`] owns an append-only list of nodes; construction order is a
//! valid topological order, so the backward sweep is a single reverse pass.
//! [`Tensor`] is a cheap handle (graph pointer + node id). Graphs are
//! deliberately `!Send`: one graph per sample, parallelism happens across
//! graphs, never inside one.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use super::elem::{sigmoid, softplus, Elem};
use crate::error::{Error, Result};

pub(crate) type Id = usize;

#[derive(Debug, Clone)]
pub(crate) enum Op<E: Elem> {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Div(Id, Id),
    /// `[r, c] + [c]`, bias broadcast over rows.
    AddBias(Id, Id),
    /// `x + s` where `s` is a single-element tensor broadcast over `x`.
    AddScalarT(Id, Id),
    Scale(Id, E),
    AddConst(Id, E),
    Matmul(Id, Id),
    Transpose(Id),
    Relu(Id),
    SigmoidOp(Id),
    /// Row-wise softmax over the last dimension of a 2-d tensor.
    Softmax(Id),
    /// Row-wise softmax where only `allowed` positions participate;
    /// disallowed positions get exactly zero weight.
    MaskedSoftmax(Id, Arc<Vec<bool>>),
    LayerNorm { x: Id, gain: Id, bias: Id, eps: E },
    /// 3x3 convolution, stride 1, zero padding 1. `x: [ci, h, w]`,
    /// `w: [co, ci, 3, 3]`, `b: [co]`.
    Conv3x3 { x: Id, w: Id, b: Id },
    /// 2x2 average pooling with stride 2 on `[c, h, w]` (h, w even).
    AvgPool2(Id),
    /// Bilinear resize of `[c, h, w]` to `[c, oh, ow]`, half-pixel centers.
    Bilinear { x: Id, oh: usize, ow: usize },
    /// Weighted average over spatial positions: `x: [c, h, w]`,
    /// `w: [h*w]` (already normalized to sum 1) -> `[1, c]`.
    MaskPool { x: Id, w: Arc<Vec<E>> },
    /// Row lookup: `table: [v, d]`, ids -> `[len(ids), d]`.
    GatherRows { table: Id, ids: Arc<Vec<usize>> },
    ConcatRows(Vec<Id>),
    ConcatCols(Vec<Id>),
    SliceRows { x: Id, start: usize, len: usize },
    SliceCols { x: Id, start: usize, len: usize },
    Reshape(Id),
    /// Column-wise mean over rows: `[r, c] -> [1, c]`.
    MeanRows(Id),
    SumAll(Id),
    MeanAll(Id),
    /// Weighted mean of per-element binary cross-entropy on logits.
    /// Scalar output; `target` and `weight` are constants.
    BceWithLogits { x: Id, target: Arc<Vec<E>>, weight: Arc<Vec<E>> },
    /// Weighted mean of per-row softmax cross-entropy. `x: [r, c]`,
    /// one target class and one weight per row. Scalar output.
    SoftmaxCeRows { x: Id, targets: Arc<Vec<usize>>, weights: Arc<Vec<E>> },
}

pub(crate) struct Node<E: Elem> {
    pub op: Op<E>,
    pub shape: Vec<usize>,
    pub value: Arc<Vec<E>>,
    pub requires_grad: bool,
    pub grad: Option<Vec<E>>,
}

struct GraphInner<E: Elem> {
    nodes: Vec<Node<E>>,
    /// Memo for parameter lifting: param name -> leaf id, so that reusing a
    /// parameter in several places accumulates into a single gradient.
    lifted: HashMap<String, Id>,
}

/// A tape of tensor operations for one forward/backward pass.
pub struct Graph<E: Elem> {
    inner: Rc<RefCell<GraphInner<E>>>,
}

impl<E: Elem> Clone for Graph<E> {
    fn clone(&self) -> Self {
        Graph { inner: Rc::clone(&self.inner) }
    }
}

impl<E: Elem> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node in a [`Graph`].
pub struct Tensor<E: Elem> {
    graph: Graph<E>,
    id: Id,
    shape: Vec<usize>,
}

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor { graph: self.graph.clone(), id: self.id, shape: self.shape.clone() }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::shape(op, format!("expected 2-d tensor, got {other:?}"))),
    }
}

fn dims3(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        other => Err(Error::shape(op, format!("expected 3-d tensor, got {other:?}"))),
    }
}

impl<E: Elem> Graph<E> {
    pub fn new() -> Self {
        Graph { inner: Rc::new(RefCell::new(GraphInner { nodes: Vec::new(), lifted: HashMap::new() })) }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op<E>, shape: Vec<usize>, value: Vec<E>, requires_grad: bool) -> Tensor<E> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node { op, shape: shape.clone(), value: Arc::new(value), requires_grad, grad: None });
        Tensor { graph: self.clone(), id, shape }
    }

    fn same_graph(&self, other: &Tensor<E>) -> Result<()> {
        if Rc::ptr_eq(&self.inner, &other.graph.inner) {
            Ok(())
        } else {
            Err(Error::shape("graph", "operands belong to different graphs".to_string()))
        }
    }

    /// New leaf node from raw data.
    pub fn leaf(&self, data: Vec<E>, shape: &[usize], requires_grad: bool) -> Result<Tensor<E>> {
        if numel(shape) != data.len() {
            return Err(Error::shape("leaf", format!("shape {shape:?} does not hold {} elements", data.len())));
        }
        Ok(self.push(Op::Leaf, shape.to_vec(), data, requires_grad))
    }

    pub fn constant(&self, data: Vec<E>, shape: &[usize]) -> Result<Tensor<E>> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&self, v: E) -> Tensor<E> {
        self.push(Op::Leaf, vec![1], vec![v], false)
    }

    /// Memoized parameter leaf: the first lift of `name` creates the node,
    /// later lifts return the same node so gradients accumulate in one place.
    pub(crate) fn lift_raw(&self, name: &str, data: Arc<Vec<E>>, shape: &[usize], trainable: bool) -> Tensor<E> {
        if let Some(&id) = self.inner.borrow().lifted.get(name) {
            let shape = self.inner.borrow().nodes[id].shape.clone();
            return Tensor { graph: self.clone(), id, shape };
        }
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op: Op::Leaf,
            shape: shape.to_vec(),
            value: data,
            requires_grad: trainable,
            grad: None,
        });
        inner.lifted.insert(name.to_string(), id);
        Tensor { graph: self.clone(), id, shape: shape.to_vec() }
    }

    /// Gradient of a lifted parameter after `backward`, if any was produced.
    pub fn lifted_grad(&self, name: &str) -> Option<Vec<E>> {
        let inner = self.inner.borrow();
        let &id = inner.lifted.get(name)?;
        inner.nodes[id].grad.clone()
    }

    /// Reverse sweep from a scalar loss. Populates `grad` on every
    /// `requires_grad` node reachable from the loss.
    pub fn backward(&self, loss: &Tensor<E>) -> Result<()> {
        self.same_graph(loss)?;
        if numel(&loss.shape) != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got shape {:?}", loss.shape)));
        }
        let lv = loss.item();
        if !lv.is_finite() {
            return Err(Error::NonFinite { context: "backward".to_string(), detail: format!("loss = {lv}") });
        }
        let mut inner = self.inner.borrow_mut();
        let n = inner.nodes.len();
        for node in inner.nodes.iter_mut() {
            node.grad = None;
        }
        let mut grads: Vec<Option<Vec<E>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.id] = Some(vec![E::one()]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !inner.nodes[id].requires_grad {
                continue;
            }
            backward_step(&mut inner.nodes, &mut grads, id, &g);
            inner.nodes[id].grad = Some(g);
        }
        Ok(())
    }
}

/// Add `src` into the gradient slot, allocating it on first use.
fn accum<E: Elem>(slot: &mut Option<Vec<E>>, src_len: usize) -> &mut Vec<E> {
    slot.get_or_insert_with(|| vec![E::zero(); src_len])
}

#[allow(clippy::too_many_lines)]
fn backward_step<E: Elem>(nodes: &mut [Node<E>], grads: &mut [Option<Vec<E>>], id: Id, g: &[E]) {
    // Split borrows: read values out of `nodes`, write into `grads`.
    let wants = |nodes: &[Node<E>], i: Id| nodes[i].requires_grad;
    let op = nodes[id].op.clone();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if wants(nodes, a) {
                let ga = accum(&mut grads[a], g.len());
                for (d, &s) in ga.iter_mut().zip(g) {
                    *d = *d + s;
                }
            }
            if wants(nodes, b) {
                let gb = accum(&mut grads[b], g.len());
                for (d, &s) in gb.iter_mut().zip(g) {
                    *d = *d + s;
                }
            }
        }
        Op::Sub(a, b) => {
            if wants(nodes, a) {
                let ga = accum(&mut grads[a], g.len());
                for (d, &s) in ga.iter_mut().zip(g) {
                    *d = *d + s;
                }
            }
            if wants(nodes, b) {
                let gb = accum(&mut grads[b], g.len());
                for (d, &s) in gb.iter_mut().zip(g) {
                    *d = *d - s;
                }
            }
        }
        Op::Mul(a, b) => {
            let va = Arc::clone(&nodes[a].value);
            let vb = Arc::clone(&nodes[b].value);
            if wants(nodes, a) {
                let ga = accum(&mut grads[a], g.len());
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i] * vb[i];
                }
            }
            if wants(nodes, b) {
                let gb = accum(&mut grads[b], g.len());
                for i in 0..g.len() {
                    gb[i] = gb[i] + g[i] * va[i];
                }
            }
        }
        Op::Div(a, b) => {
            let va = Arc::clone(&nodes[a].value);
            let vb = Arc::clone(&nodes[b].value);
            if wants(nodes, a) {
                let ga = accum(&mut grads[a], g.len());
                for i in 0..g.len() {
                    ga[i] = ga[i] + g[i] / vb[i];
                }
            }
            if wants(nodes, b) {
                let gb = accum(&mut grads[b], g.len());
                for i in 0..g.len() {
                    gb[i] = gb[i] - g[i] * va[i] / (vb[i] * vb[i]);
                }
            }
        }
        Op::AddBias(x, b) => {
            let (r, c) = (nodes[x].shape[0], nodes[x].shape[1]);
            if wants(nodes, x) {
                let gx = accum(&mut grads[x], g.len());
                for (d, &s) in gx.iter_mut().zip(g) {
                    *d = *d + s;
                }
            }
            if wants(nodes, b) {
                let gb = accum(&mut grads[b], c);
                for i in 0..r {
                    for j in 0..c {
                        gb[j] = gb[j] + g[i * c + j];
                    }
                }
            }
        }
        Op::AddScalarT(x, s) => {
            if wants(nodes, x) {
                let gx = accum(&mut grads[x], g.len());
                for (d, &v) in gx.iter_mut().zip(g) {
                    *d = *d + v;
                }
            }
            if wants(nodes, s) {
                let gs = accum(&mut grads[s], 1);
                let mut total = E::zero();
                for &v in g {
                    total = total + v;
                }
                gs[0] = gs[0] + total;
            }
        }
        Op::Scale(x, k) => {
            if wants(nodes, x) {
                let gx = accum(&mut grads[x], g.len());
                for (d, &s) in gx.iter_mut().zip(g) {
                    *d = *d + s * k;
                }
            }
        }
        Op::AddConst(x, _) => {
            if wants(nodes, x) {
                let gx = accum(&mut grads[x], g.len());
                for (d, &s) in gx.iter_mut().zip(g) {
                    *d = *d + s;
                }
            }
        }
        Op::Matmul(a, b) => {
            let (m, k) = (nodes[a].shape[0], nodes[a].shape[1]);
            let n = nodes[b].shape[1];
            let va = Arc::clone(&nodes[a].value);
            let vb = Arc::clone(&nodes[b].value);
            if wants(nodes, a) {
                // dA = G . B^T
                let ga = accum(&mut grads[a], m * k);
                for i in 0..m {
                    for j in 0..n {
                        let gij = g[i * n + j];
                        if gij == E::zero() {
                            continue;
                        }
                        let row = j; // B^T[j, :] is B[:, j]... iterate p over k
                        let _ = row;
                        for p in 0..k {
                            ga[i * k + p] = ga[i * k + p] + gij * vb[p * n + j];
                        }
                    }
                }
            }
            if wants(nodes, b) {
                // dB = A^T . G
                let gb = accum(&mut grads[b], k * n);
                for p in 0..k {
                    for i in 0..m {
                        let a_ip = va[i * k + p];
                        if a_ip == E::zero() {
                            continue;
                        }
                        for j in 0..n {
                            gb[p * n + j] = gb[p * n + j] + a_ip * g[i * n + j];
                        }
                    }
                }
            }
        }
        Op::Transpose(x) => {
            if wants(nodes, x) {
                let (r, c) = (nodes[x].shape[0], nodes[x].shape[1]);
                let gx = accum(&mut grads[x], r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = gx[i * c + j] + g[j * r + i];
                    }
                }
            }
        }
        Op::Relu(x) => {
            if wants(nodes, x) {
                let vx = Arc::clone(&nodes[x].value);
                let gx = accum(&mut grads[x], g.len());
                for i in 0..g.len() {
                    if vx[i] > E::zero() {
                        gx[i] = gx[i] + g[i];
                    }
                }
            }
        }
        Op::SigmoidOp(x) => {
            if wants(nodes, x) {
                let y = Arc::clone(&nodes[id].value);
                let gx = accum(&mut grads[x], g.len());
                for i in 0..g.len() {
                    gx[i] = gx[i] + g[i] * y[i] * (E::one() - y[i]);
                }
            }
        }
        Op::Softmax(x) => {
            if wants(nodes, x) {
                let y = Arc::clone(&nodes[id].value);
                let (r, c) = (nodes[x].shape[0], nodes[x].shape[1]);
                let gx = accum(&mut grads[x], r * c);
                for i in 0..r {
                    let row = i * c;
                    let mut dot = E::zero();
                    for j in 0..c {
                        dot = dot + g[row + j] * y[row + j];
                    }
                    for j in 0..c {
                        gx[row + j] = gx[row + j] + y[row + j] * (g[row + j] - dot);
                    }
                }
            }
        }
        Op::MaskedSoftmax(x, allowed) => {
            if wants(nodes, x) {
                let y = Arc::clone(&nodes[id].value);
                let (r, c) = (nodes[x].shape[0], nodes[x].shape[1]);
                let gx = accum(&mut grads[x], r * c);
                for i in 0..r {
                    let row = i * c;
                    let mut dot = E::zero();
                    for j in 0..c {
                        if allowed[row + j] {
                            dot = dot + g[row + j] * y[row + j];
                        }
                    }
                    for j in 0..c {
                        if allowed[row + j] {
                            gx[row + j] = gx[row + j] + y[row + j] * (g[row + j] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let (r, c) = (nodes[x].shape[0], nodes[x].shape[1]);
            let vx = Arc::clone(&nodes[x].value);
            let vg = Arc::clone(&nodes[gain].value);
            let cn = E::from_usize(c);
            for i in 0..r {
                let row = i * c;
                let mut mean = E::zero();
                for j in 0..c {
                    mean = mean + vx[row + j];
                }
                mean = mean / cn;
                let mut var = E::zero();
                for j in 0..c {
                    let d = vx[row + j] - mean;
                    var = var + d * d;
                }
                var = var / cn;
                let inv = (var + eps).sqrt().recip();
                // xhat and the two reduced terms of the row
                let mut sum_gd = E::zero(); // sum(dy * gain)
                let mut sum_gdx = E::zero(); // sum(dy * gain * xhat)
                for j in 0..c {
                    let xhat = (vx[row + j] - mean) * inv;
                    let gd = g[row + j] * vg[j];
                    sum_gd = sum_gd + gd;
                    sum_gdx = sum_gdx + gd * xhat;
                }
                if wants(nodes, x) {
                    let gx = accum(&mut grads[x], r * c);
                    for j in 0..c {
                        let xhat = (vx[row + j] - mean) * inv;
                        let gd = g[row + j] * vg[j];
                        gx[row + j] = gx[row + j] + inv * (gd - sum_gd / cn - xhat * sum_gdx / cn);
                    }
                }
                if wants(nodes, gain) {
                    let gg = accum(&mut grads[gain], c);
                    for j in 0..c {
                        let xhat = (vx[row + j] - mean) * inv;
                        gg[j] = gg[j] + g[row + j] * xhat;
                    }
                }
                if wants(nodes, bias) {
                    let gb = accum(&mut grads[bias], c);
                    for j in 0..c {
                        gb[j] = gb[j] + g[row + j];
                    }
                }
            }
        }
        Op::Conv3x3 { x, w, b } => {
            let (ci, h, wd) = (nodes[x].shape[0], nodes[x].shape[1], nodes[x].shape[2]);
            let co = nodes[w].shape[0];
            let vx = Arc::clone(&nodes[x].value);
            let vw = Arc::clone(&nodes[w].value);
            if wants(nodes, x) {
                let gx = accum(&mut grads[x], ci * h * wd);
                for o in 0..co {
                    for c in 0..ci {
                        let wbase = ((o * ci) + c) * 9;
                        for dy in 0..3usize {
                            for dx in 0..3usize {
                                let wv = vw[wbase + dy * 3 + dx];
                                if wv == E::zero() {
                                    continue;
                                }
                                for y in 0..h {
                                    let sy = y as isize + dy as isize - 1;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for xx in 0..wd {
                                        let sx = xx as isize + dx as isize - 1;
                                        if sx < 0 || sx >= wd as isize {
                                            continue;
                                        }
                                        gx[(c * h + sy as usize) * wd + sx as usize] =
                                            gx[(c * h + sy as usize) * wd + sx as usize] + wv * g[(o * h + y) * wd + xx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if wants(nodes, w) {
                let gw = accum(&mut grads[w], co * ci * 9);
                for o in 0..co {
                    for c in 0..ci {
                        let wbase = ((o * ci) + c) * 9;
                        for dy in 0..3usize {
                            for dx in 0..3usize {
                                let mut acc = E::zero();
                                for y in 0..h {
                                    let sy = y as isize + dy as isize - 1;
                                    if sy < 0 || sy >= h as isize {
                                        continue;
                                    }
                                    for xx in 0..wd {
                                        let sx = xx as isize + dx as isize - 1;
                                        if sx < 0 || sx >= wd as isize {
                                            continue;
                                        }
                                        acc = acc + vx[(c * h + sy as usize) * wd + sx as usize] * g[(o * h + y) * wd + xx];
                                    }
                                }
                                gw[wbase + dy * 3 + dx] = gw[wbase + dy * 3 + dx] + acc;
                            }
                        }
                    }
                }
            }
            if wants(nodes, b) {
                let gb = accum(&mut grads[b], co);
                for o in 0..co {
                    let mut acc = E::zero();
                    for i in 0..h * wd {
                        acc = acc + g[o * h * wd + i];
                    }
                    gb[o] = gb[o] + acc;
                }
            }
        }
        Op::AvgPool2(x) => {
            if wants(nodes, x) {
                let (c, h, w) = (nodes[x].shape[0], nodes[x].shape[1], nodes[x].shape[2]);
                let (oh, ow) = (h / 2, w / 2);
                let q = E::from_f64(0.25);
                let gx = accum(&mut grads[x], c * h * w);
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = g[(ch * oh + y) * ow + xx] * q;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    let idx = (ch * h + 2 * y + dy) * w + 2 * xx + dx;
                                    gx[idx] = gx[idx] + gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::Bilinear { x, oh, ow } => {
            if wants(nodes, x) {
                let (c, h, w) = (nodes[x].shape[0], nodes[x].shape[1], nodes[x].shape[2]);
                let gx = accum(&mut grads[x], c * h * w);
                for oy in 0..oh {
                    let (y0, y1, fy) = bilinear_axis(oy, oh, h);
                    for ox in 0..ow {
                        let (x0, x1, fx) = bilinear_axis::<E>(ox, ow, w);
                        let w00 = (E::one() - fy) * (E::one() - fx);
                        let w01 = (E::one() - fy) * fx;
                        let w10 = fy * (E::one() - fx);
                        let w11 = fy * fx;
                        for ch in 0..c {
                            let gv = g[(ch * oh + oy) * ow + ox];
                            gx[(ch * h + y0) * w + x0] = gx[(ch * h + y0) * w + x0] + gv * w00;
                            gx[(ch * h + y0) * w + x1] = gx[(ch * h + y0) * w + x1] + gv * w01;
                            gx[(ch * h + y1) * w + x0] = gx[(ch * h + y1) * w + x0] + gv * w10;
                            gx[(ch * h + y1) * w + x1] = gx[(ch * h + y1) * w + x1] + gv * w11;
                        }
                    }
                }
            }
        }
        Op::MaskPool { x, w } => {
            if wants(nodes, x) {
                let (c, h, wd) = (nodes[x].shape[0], nodes[x].shape[1], nodes[x].shape[2]);
                let gx = accum(&mut grads[x], c * h * wd);
                for ch in 0..c {
                    let gv = g[ch];
                    for p in 0..h * wd {
                        if w[p] != E::zero() {
                            gx[ch * h * wd + p] = gx[ch * h * wd + p] + gv * w[p];
                        }
                    }
                }
            }
        }
        Op::GatherRows { table, ids } => {
            if wants(nodes, table) {
                let d = nodes[table].shape[1];
                let len = nodes[table].shape[0] * d;
                let gt = accum(&mut grads[table], len);
                for (row, &src) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[src * d + j] = gt[src * d + j] + g[row * d + j];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0usize;
            for &p in &parts {
                let n = numel(&nodes[p].shape);
                if wants(nodes, p) {
                    let gp = accum(&mut grads[p], n);
                    for i in 0..n {
                        gp[i] = gp[i] + g[offset + i];
                    }
                }
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let r = nodes[parts[0]].shape[0];
            let total: usize = parts.iter().map(|&p| nodes[p].shape[1]).sum();
            let mut offset = 0usize;
            for &p in &parts {
                let c = nodes[p].shape[1];
                if wants(nodes, p) {
                    let gp = accum(&mut grads[p], r * c);
                    for i in 0..r {
                        for j in 0..c {
                            gp[i * c + j] = gp[i * c + j] + g[i * total + offset + j];
                        }
                    }
                }
                offset += c;
            }
        }
        Op::SliceRows { x, start, len } => {
            if wants(nodes, x) {
                let c = nodes[x].shape[1];
                let n = numel(&nodes[x].shape);
                let gx = accum(&mut grads[x], n);
                for i in 0..len {
                    for j in 0..c {
                        gx[(start + i) * c + j] = gx[(start + i) * c + j] + g[i * c + j];
                    }
                }
            }
        }
        Op::SliceCols { x, start, len } => {
            if wants(nodes, x) {
                let (r, c) = (nodes[x].shape[0], nodes[x].shape[1]);
                let gx = accum(&mut grads[x], r * c);
                for i in 0..r {
                    for j in 0..len {
                        gx[i * c + start + j] = gx[i * c + start + j] + g[i * len + j];
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if wants(nodes, x) {
                let gx = accum(&mut grads[x], g.len());
                for (d, &s) in gx.iter_mut().zip(g) {
                    *d = *d + s;
                }
            }
        }
        Op::MeanRows(x) => {
            if wants(nodes, x) {
                let (r, c) = (nodes[x].shape[0], nodes[x].shape[1]);
                let rn = E::from_usize(r);
                let gx = accum(&mut grads[x], r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = gx[i * c + j] + g[j] / rn;
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if wants(nodes, x) {
                let n = numel(&nodes[x].shape);
                let gx = accum(&mut grads[x], n);
                for d in gx.iter_mut() {
                    *d = *d + g[0];
                }
            }
        }
        Op::MeanAll(x) => {
            if wants(nodes, x) {
                let n = numel(&nodes[x].shape);
                let nn = E::from_usize(n);
                let gx = accum(&mut grads[x], n);
                for d in gx.iter_mut() {
                    *d = *d + g[0] / nn;
                }
            }
        }
        Op::BceWithLogits { x, target, weight } => {
            if wants(nodes, x) {
                let vx = Arc::clone(&nodes[x].value);
                let n = vx.len();
                let mut wsum = E::zero();
                for &w in weight.iter() {
                    wsum = wsum + w;
                }
                let gx = accum(&mut grads[x], n);
                for i in 0..n {
                    gx[i] = gx[i] + g[0] * weight[i] * (sigmoid(vx[i]) - target[i]) / wsum;
                }
            }
        }
        Op::SoftmaxCeRows { x, targets, weights } => {
            if wants(nodes, x) {
                let (r, c) = (nodes[x].shape[0], nodes[x].shape[1]);
                let vx = Arc::clone(&nodes[x].value);
                let mut wsum = E::zero();
                for &w in weights.iter() {
                    wsum = wsum + w;
                }
                let gx = accum(&mut grads[x], r * c);
                for i in 0..r {
                    let row = i * c;
                    let mut m = vx[row];
                    for j in 1..c {
                        if vx[row + j] > m {
                            m = vx[row + j];
                        }
                    }
                    let mut z = E::zero();
                    for j in 0..c {
                        z = z + (vx[row + j] - m).exp();
                    }
                    for j in 0..c {
                        let p = (vx[row + j] - m).exp() / z;
                        let t = if j == targets[i] { E::one() } else { E::zero() };
                        gx[row + j] = gx[row + j] + g[0] * weights[i] * (p - t) / wsum;
                    }
                }
            }
        }
    }
}

/// Source coordinates and interpolation weight for one output position along
/// one axis of a half-pixel-centered bilinear resize.
fn bilinear_axis<E: Elem>(o: usize, osize: usize, isize_: usize) -> (usize, usize, E) {
    let scale = isize_ as f64 / osize as f64;
    let src = (o as f64 + 0.5) * scale - 0.5;
    let src = src.max(0.0);
    let i0 = (src.floor() as usize).min(isize_ - 1);
    let i1 = (i0 + 1).min(isize_ - 1);
    let f = E::from_f64(src - i0 as f64);
    (i0, i1, f)
}

impl<E: Elem> Tensor<E> {
    pub fn graph(&self) -> &Graph<E> {
        &self.graph
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn value(&self) -> Arc<Vec<E>> {
        Arc::clone(&self.graph.inner.borrow().nodes[self.id].value)
    }

    pub fn to_vec(&self) -> Vec<E> {
        self.graph.inner.borrow().nodes[self.id].value.as_ref().clone()
    }

    /// Single element of a one-element tensor. Panics on misuse: callers
    /// only invoke this on tensors they just built with scalar shape.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.graph.inner.borrow().nodes[self.id].value[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    /// Gradient populated by the last `backward` call, if this node needed one.
    pub fn grad(&self) -> Option<Vec<E>> {
        self.graph.inner.borrow().nodes[self.id].grad.clone()
    }

    fn unary(&self, op: Op<E>, shape: Vec<usize>, value: Vec<E>) -> Tensor<E> {
        let rg = self.requires_grad();
        self.graph.push(op, shape, value, rg)
    }

    fn binary(&self, other: &Tensor<E>, op: Op<E>, shape: Vec<usize>, value: Vec<E>) -> Tensor<E> {
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(op, shape, value, rg)
    }

    fn elementwise(&self, other: &Tensor<E>, name: &'static str) -> Result<()> {
        self.graph.same_graph(other)?;
        if self.shape != other.shape {
            return Err(Error::shape(name, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.elementwise(other, "add")?;
        let (a, b) = (self.value(), other.value());
        let v = a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect();
        Ok(self.binary(other, Op::Add(self.id, other.id), self.shape.clone(), v))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.elementwise(other, "sub")?;
        let (a, b) = (self.value(), other.value());
        let v = a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect();
        Ok(self.binary(other, Op::Sub(self.id, other.id), self.shape.clone(), v))
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.elementwise(other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let v = a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect();
        Ok(self.binary(other, Op::Mul(self.id, other.id), self.shape.clone(), v))
    }

    pub fn div(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.elementwise(other, "div")?;
        let (a, b) = (self.value(), other.value());
        let v = a.iter().zip(b.iter()).map(|(&x, &y)| x / y).collect();
        Ok(self.binary(other, Op::Div(self.id, other.id), self.shape.clone(), v))
    }

    /// `[r, c] + [c]` (or `[1, c]`), broadcasting the bias over rows.
    pub fn add_bias(&self, bias: &Tensor<E>) -> Result<Tensor<E>> {
        self.graph.same_graph(bias)?;
        let (r, c) = dims2(&self.shape, "add_bias")?;
        if bias.numel() != c {
            return Err(Error::shape("add_bias", format!("bias has {} elements, expected {c}", bias.numel())));
        }
        let (a, b) = (self.value(), bias.value());
        let mut v = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                v.push(a[i * c + j] + b[j]);
            }
        }
        Ok(self.binary(bias, Op::AddBias(self.id, bias.id), self.shape.clone(), v))
    }

    /// Broadcast-add a single-element tensor to every element of `self`.
    pub fn add_scalar_t(&self, s: &Tensor<E>) -> Result<Tensor<E>> {
        self.graph.same_graph(s)?;
        if s.numel() != 1 {
            return Err(Error::shape("add_scalar_t", format!("expected 1 element, got {:?}", s.shape())));
        }
        let sv = s.item();
        let v = self.value().iter().map(|&x| x + sv).collect();
        Ok(self.binary(s, Op::AddScalarT(self.id, s.id), self.shape.clone(), v))
    }

    pub fn scale(&self, k: E) -> Tensor<E> {
        let v = self.value().iter().map(|&x| x * k).collect();
        self.unary(Op::Scale(self.id, k), self.shape.clone(), v)
    }

    pub fn add_const(&self, k: E) -> Tensor<E> {
        let v = self.value().iter().map(|&x| x + k).collect();
        self.unary(Op::AddConst(self.id, k), self.shape.clone(), v)
    }

    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.graph.same_graph(other)?;
        let (m, k) = dims2(&self.shape, "matmul")?;
        let (k2, n) = dims2(&other.shape, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {k} vs {k2}")));
        }
        let a = self.value();
        let b = other.value();
        let mut v = vec![E::zero(); m * n];
        for i in 0..m {
            for p in 0..k {
                let a_ip = a[i * k + p];
                if a_ip == E::zero() {
                    continue;
                }
                let brow = p * n;
                let vrow = i * n;
                for j in 0..n {
                    v[vrow + j] = v[vrow + j] + a_ip * b[brow + j];
                }
            }
        }
        Ok(self.binary(other, Op::Matmul(self.id, other.id), vec![m, n], v))
    }

    pub fn transpose(&self) -> Result<Tensor<E>> {
        let (r, c) = dims2(&self.shape, "transpose")?;
        let a = self.value();
        let mut v = vec![E::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                v[j * r + i] = a[i * c + j];
            }
        }
        Ok(self.unary(Op::Transpose(self.id), vec![c, r], v))
    }

    pub fn relu(&self) -> Tensor<E> {
        let v = self.value().iter().map(|&x| if x > E::zero() { x } else { E::zero() }).collect();
        self.unary(Op::Relu(self.id), self.shape.clone(), v)
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        let v = self.value().iter().map(|&x| sigmoid(x)).collect();
        self.unary(Op::SigmoidOp(self.id), self.shape.clone(), v)
    }

    /// Row-wise softmax over the last dim of a 2-d tensor.
    pub fn softmax_rows(&self) -> Result<Tensor<E>> {
        let (r, c) = dims2(&self.shape, "softmax_rows")?;
        let a = self.value();
        let mut v = vec![E::zero(); r * c];
        for i in 0..r {
            softmax_row(&a[i * c..(i + 1) * c], &mut v[i * c..(i + 1) * c]);
        }
        Ok(self.unary(Op::Softmax(self.id), self.shape.clone(), v))
    }

    /// Row-wise softmax restricted to `allowed` positions; others get exactly
    /// zero. Rows with no allowed position come out all-zero.
    pub fn masked_softmax_rows(&self, allowed: &Arc<Vec<bool>>) -> Result<Tensor<E>> {
        let (r, c) = dims2(&self.shape, "masked_softmax_rows")?;
        if allowed.len() != r * c {
            return Err(Error::shape("masked_softmax_rows", format!("mask len {} vs {r}x{c}", allowed.len())));
        }
        let a = self.value();
        let mut v = vec![E::zero(); r * c];
        for i in 0..r {
            let row = i * c;
            let mut m: Option<E> = None;
            for j in 0..c {
                if allowed[row + j] {
                    m = Some(match m {
                        Some(cur) if cur >= a[row + j] => cur,
                        _ => a[row + j],
                    });
                }
            }
            let Some(m) = m else { continue };
            let mut z = E::zero();
            for j in 0..c {
                if allowed[row + j] {
                    z = z + (a[row + j] - m).exp();
                }
            }
            for j in 0..c {
                if allowed[row + j] {
                    v[row + j] = (a[row + j] - m).exp() / z;
                }
            }
        }
        Ok(self.unary(Op::MaskedSoftmax(self.id, Arc::clone(allowed)), self.shape.clone(), v))
    }

    /// Per-row layer normalization with learned gain and bias (population
    /// variance, as is standard).
    pub fn layer_norm(&self, gain: &Tensor<E>, bias: &Tensor<E>, eps: E) -> Result<Tensor<E>> {
        self.graph.same_graph(gain)?;
        self.graph.same_graph(bias)?;
        let (r, c) = dims2(&self.shape, "layer_norm")?;
        if gain.numel() != c || bias.numel() != c {
            return Err(Error::shape("layer_norm", format!("gain/bias must have {c} elements")));
        }
        let a = self.value();
        let gv = gain.value();
        let bv = bias.value();
        let cn = E::from_usize(c);
        let mut v = vec![E::zero(); r * c];
        for i in 0..r {
            let row = i * c;
            let mut mean = E::zero();
            for j in 0..c {
                mean = mean + a[row + j];
            }
            mean = mean / cn;
            let mut var = E::zero();
            for j in 0..c {
                let d = a[row + j] - mean;
                var = var + d * d;
            }
            var = var / cn;
            let inv = (var + eps).sqrt().recip();
            for j in 0..c {
                v[row + j] = (a[row + j] - mean) * inv * gv[j] + bv[j];
            }
        }
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self
            .graph
            .push(Op::LayerNorm { x: self.id, gain: gain.id, bias: bias.id, eps }, self.shape.clone(), v, rg))
    }

    /// 3x3 / stride 1 / pad 1 convolution. `self: [ci, h, w]`,
    /// `w: [co, ci, 3, 3]`, `b: [co]` -> `[co, h, w]`.
    pub fn conv3x3(&self, w: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.graph.same_graph(w)?;
        self.graph.same_graph(b)?;
        let (ci, h, wd) = dims3(&self.shape, "conv3x3")?;
        let ws = w.shape();
        if ws.len() != 4 || ws[1] != ci || ws[2] != 3 || ws[3] != 3 {
            return Err(Error::shape("conv3x3", format!("weight shape {ws:?} incompatible with input {:?}", self.shape)));
        }
        let co = ws[0];
        if b.numel() != co {
            return Err(Error::shape("conv3x3", format!("bias has {} elements, expected {co}", b.numel())));
        }
        let vx = self.value();
        let vw = w.value();
        let vb = b.value();
        let mut v = vec![E::zero(); co * h * wd];
        for o in 0..co {
            for y in 0..h {
                for xx in 0..wd {
                    v[(o * h + y) * wd + xx] = vb[o];
                }
            }
            for c in 0..ci {
                let wbase = ((o * ci) + c) * 9;
                for dy in 0..3usize {
                    let sy0 = dy as isize - 1;
                    for dx in 0..3usize {
                        let wv = vw[wbase + dy * 3 + dx];
                        if wv == E::zero() {
                            continue;
                        }
                        let sx0 = dx as isize - 1;
                        for y in 0..h {
                            let sy = y as isize + sy0;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src_row = (c * h + sy as usize) * wd;
                            let dst_row = (o * h + y) * wd;
                            for xx in 0..wd {
                                let sx = xx as isize + sx0;
                                if sx < 0 || sx >= wd as isize {
                                    continue;
                                }
                                v[dst_row + xx] = v[dst_row + xx] + wv * vx[src_row + sx as usize];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.requires_grad() || w.requires_grad() || b.requires_grad();
        Ok(self.graph.push(Op::Conv3x3 { x: self.id, w: w.id, b: b.id }, vec![co, h, wd], v, rg))
    }

    /// 2x2 mean pool, stride 2. Requires even spatial dims.
    pub fn avg_pool2(&self) -> Result<Tensor<E>> {
        let (c, h, w) = dims3(&self.shape, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("avg_pool2", format!("spatial dims must be even, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let a = self.value();
        let q = E::from_f64(0.25);
        let mut v = vec![E::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut s = E::zero();
                    for dy in 0..2 {
                        for dx in 0..2 {
                            s = s + a[(ch * h + 2 * y + dy) * w + 2 * xx + dx];
                        }
                    }
                    v[(ch * oh + y) * ow + xx] = s * q;
                }
            }
        }
        Ok(self.unary(Op::AvgPool2(self.id), vec![c, oh, ow], v))
    }

    /// Bilinear resize with half-pixel centers (`src = (dst + 0.5) * scale - 0.5`,
    /// clamped at borders).
    pub fn bilinear(&self, oh: usize, ow: usize) -> Result<Tensor<E>> {
        let (c, h, w) = dims3(&self.shape, "bilinear")?;
        let a = self.value();
        let mut v = vec![E::zero(); c * oh * ow];
        for oy in 0..oh {
            let (y0, y1, fy) = bilinear_axis::<E>(oy, oh, h);
            for ox in 0..ow {
                let (x0, x1, fx) = bilinear_axis::<E>(ox, ow, w);
                let w00 = (E::one() - fy) * (E::one() - fx);
                let w01 = (E::one() - fy) * fx;
                let w10 = fy * (E::one() - fx);
                let w11 = fy * fx;
                for ch in 0..c {
                    v[(ch * oh + oy) * ow + ox] = a[(ch * h + y0) * w + x0] * w00
                        + a[(ch * h + y0) * w + x1] * w01
                        + a[(ch * h + y1) * w + x0] * w10
                        + a[(ch * h + y1) * w + x1] * w11;
                }
            }
        }
        Ok(self.unary(Op::Bilinear { x: self.id, oh, ow }, vec![c, oh, ow], v))
    }

    /// Weighted spatial average of `[c, h, w]` under normalized weights
    /// `w: [h*w]` summing to 1 -> `[1, c]`.
    pub fn mask_pool(&self, weights: Arc<Vec<E>>) -> Result<Tensor<E>> {
        let (c, h, wd) = dims3(&self.shape, "mask_pool")?;
        if weights.len() != h * wd {
            return Err(Error::shape("mask_pool", format!("weights len {} vs {h}x{wd}", weights.len())));
        }
        let a = self.value();
        let mut v = vec![E::zero(); c];
        for ch in 0..c {
            let mut s = E::zero();
            for p in 0..h * wd {
                if weights[p] != E::zero() {
                    s = s + a[ch * h * wd + p] * weights[p];
                }
            }
            v[ch] = s;
        }
        Ok(self.unary(Op::MaskPool { x: self.id, w: weights }, vec![1, c], v))
    }

    /// Row lookup into a `[v, d]` table.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor<E>> {
        let (vocab, d) = dims2(&self.shape, "gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape("gather_rows", format!("index {bad} out of range {vocab}")));
        }
        let a = self.value();
        let mut v = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            v.extend_from_slice(&a[i * d..(i + 1) * d]);
        }
        Ok(self.unary(Op::GatherRows { table: self.id, ids: Arc::new(ids.to_vec()) }, vec![ids.len(), d], v))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor<E>> {
        let (r, c) = dims2(&self.shape, "slice_rows")?;
        if start + len > r {
            return Err(Error::shape("slice_rows", format!("rows {start}..{} out of {r}", start + len)));
        }
        let a = self.value();
        let v = a[start * c..(start + len) * c].to_vec();
        Ok(self.unary(Op::SliceRows { x: self.id, start, len }, vec![len, c], v))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<E>> {
        let (r, c) = dims2(&self.shape, "slice_cols")?;
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("cols {start}..{} out of {c}", start + len)));
        }
        let a = self.value();
        let mut v = Vec::with_capacity(r * len);
        for i in 0..r {
            v.extend_from_slice(&a[i * c + start..i * c + start + len]);
        }
        Ok(self.unary(Op::SliceCols { x: self.id, start, len }, vec![r, len], v))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        let v = self.to_vec();
        Ok(self.unary(Op::Reshape(self.id), shape.to_vec(), v))
    }

    /// Column means over rows: `[r, c] -> [1, c]`.
    pub fn mean_rows(&self) -> Result<Tensor<E>> {
        let (r, c) = dims2(&self.shape, "mean_rows")?;
        if r == 0 {
            return Err(Error::shape("mean_rows", "cannot average zero rows".to_string()));
        }
        let a = self.value();
        let rn = E::from_usize(r);
        let mut v = vec![E::zero(); c];
        for i in 0..r {
            for j in 0..c {
                v[j] = v[j] + a[i * c + j];
            }
        }
        for x in v.iter_mut() {
            *x = *x / rn;
        }
        Ok(self.unary(Op::MeanRows(self.id), vec![1, c], v))
    }

    pub fn sum_all(&self) -> Tensor<E> {
        let mut s = E::zero();
        for &x in self.value().iter() {
            s = s + x;
        }
        self.unary(Op::SumAll(self.id), vec![1], vec![s])
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let mut s = E::zero();
        for &x in self.value().iter() {
            s = s + x;
        }
        let v = s / E::from_usize(self.numel().max(1));
        self.unary(Op::MeanAll(self.id), vec![1], vec![v])
    }

    /// Weighted mean binary cross-entropy directly on logits (stable form).
    pub fn bce_with_logits(&self, target: &[E], weight: &[E]) -> Result<Tensor<E>> {
        let n = self.numel();
        if target.len() != n || weight.len() != n {
            return Err(Error::shape("bce_with_logits", format!("target/weight len vs {n} elements")));
        }
        let a = self.value();
        let mut num = E::zero();
        let mut den = E::zero();
        for i in 0..n {
            // max(x, 0) - x * z + log(1 + exp(-|x|))
            let x = a[i];
            let term = x.max(E::zero()) - x * target[i] + softplus(-x.abs());
            num = num + weight[i] * term;
            den = den + weight[i];
        }
        if den <= E::zero() {
            return Err(Error::shape("bce_with_logits", "weights sum to zero".to_string()));
        }
        Ok(self.unary(
            Op::BceWithLogits { x: self.id, target: Arc::new(target.to_vec()), weight: Arc::new(weight.to_vec()) },
            vec![1],
            vec![num / den],
        ))
    }

    /// Weighted mean softmax cross-entropy, one target class per row.
    pub fn softmax_ce_rows(&self, targets: &[usize], weights: &[E]) -> Result<Tensor<E>> {
        let (r, c) = dims2(&self.shape, "softmax_ce_rows")?;
        if targets.len() != r || weights.len() != r {
            return Err(Error::shape("softmax_ce_rows", format!("targets/weights len vs {r} rows")));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("softmax_ce_rows", format!("target class {bad} out of {c}")));
        }
        let a = self.value();
        let mut num = E::zero();
        let mut den = E::zero();
        for i in 0..r {
            let row = i * c;
            let mut m = a[row];
            for j in 1..c {
                if a[row + j] > m {
                    m = a[row + j];
                }
            }
            let mut z = E::zero();
            for j in 0..c {
                z = z + (a[row + j] - m).exp();
            }
            let lse = m + z.ln();
            num = num + weights[i] * (lse - a[row + targets[i]]);
            den = den + weights[i];
        }
        if den <= E::zero() {
            return Err(Error::shape("softmax_ce_rows", "weights sum to zero".to_string()));
        }
        Ok(self.unary(
            Op::SoftmaxCeRows { x: self.id, targets: Arc::new(targets.to_vec()), weights: Arc::new(weights.to_vec()) },
            vec![1],
            vec![num / den],
        ))
    }
}

/// Concatenate 2-d tensors along rows. All must share the column count.
pub fn concat_rows<E: Elem>(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat_rows", "empty part list".to_string()))?;
    let g = first.graph().clone();
    let (_, c) = dims2(first.shape(), "concat_rows")?;
    let mut rows = 0usize;
    let mut v = Vec::new();
    let mut ids = Vec::with_capacity(parts.len());
    let mut rg = false;
    for p in parts {
        g.same_graph(p)?;
        let (r2, c2) = dims2(p.shape(), "concat_rows")?;
        if c2 != c {
            return Err(Error::shape("concat_rows", format!("column mismatch {c2} vs {c}")));
        }
        rows += r2;
        v.extend_from_slice(&p.value());
        ids.push(p.id);
        rg |= p.requires_grad();
    }
    Ok(g.push(Op::ConcatRows(ids), vec![rows, c], v, rg))
}

/// Concatenate 2-d tensors along columns. All must share the row count.
pub fn concat_cols<E: Elem>(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat_cols", "empty part list".to_string()))?;
    let g = first.graph().clone();
    let (r, _) = dims2(first.shape(), "concat_cols")?;
    let mut cols = 0usize;
    let mut ids = Vec::with_capacity(parts.len());
    let mut rg = false;
    for p in parts {
        g.same_graph(p)?;
        let (r2, c2) = dims2(p.shape(), "concat_cols")?;
        if r2 != r {
            return Err(Error::shape("concat_cols", format!("row mismatch {r2} vs {r}")));
        }
        cols += c2;
        ids.push(p.id);
        rg |= p.requires_grad();
    }
    let mut v = Vec::with_capacity(r * cols);
    for i in 0..r {
        for p in parts {
            let c2 = p.shape()[1];
            let pv = p.value();
            v.extend_from_slice(&pv[i * c2..(i + 1) * c2]);
        }
    }
    Ok(g.push(Op::ConcatCols(ids), vec![r, cols], v, rg))
}

fn softmax_row<E: Elem>(x: &[E], out: &mut [E]) {
    let mut m = x[0];
    for &v in &x[1..] {
        if v > m {
            m = v;
        }
    }
    let mut z = E::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        let e = (v - m).exp();
        *o = e;
        z = z + e;
    }
    for o in out.iter_mut() {
        *o = *o / z;
    }
}
