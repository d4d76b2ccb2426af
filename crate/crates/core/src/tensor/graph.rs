//! Reverse-mode engine: recorded nodes and the backward sweep.
//!
//! Nodes carry monotonically increasing ids; producers always precede
//! consumers, so visiting reachable nodes in descending id order is a valid
//! reverse topological order. Gradients accumulate per node id, which keeps
//! the sweep deterministic for a deterministic forward pass.

use super::kernels as k;
use super::{Elem, Tensor};
use crate::error::{Error, Result};
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_node_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) struct Node<T: Elem> {
    pub id: u64,
    pub grad_fn: GradFn<T>,
}

/// Recorded operation: holds the input tensors (and any saved forward
/// results) needed to push gradients backward.
pub(crate) enum GradFn<T: Elem> {
    Leaf,
    Add { a: Tensor<T>, b: Tensor<T> },
    Sub { a: Tensor<T>, b: Tensor<T> },
    Mul { a: Tensor<T>, b: Tensor<T> },
    Div { a: Tensor<T>, b: Tensor<T> },
    AddScalar { a: Tensor<T> },
    MulScalar { a: Tensor<T>, c: T },
    AddBias { a: Tensor<T>, bias: Tensor<T>, cols: usize },
    MulRows { a: Tensor<T>, w: Tensor<T>, cols: usize },
    Matmul { a: Tensor<T>, b: Tensor<T>, m: usize, k: usize, n: usize },
    Transpose2d { a: Tensor<T>, rows: usize, cols: usize },
    Conv2d {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: usize,
        pad: usize,
    },
    Relu { a: Tensor<T> },
    Sigmoid { a: Tensor<T>, y: Arc<Vec<T>> },
    Abs { a: Tensor<T> },
    Softmax { a: Tensor<T>, y: Arc<Vec<T>>, axis: usize },
    LogSoftmax { a: Tensor<T>, y: Arc<Vec<T>>, axis: usize },
    Sum { a: Tensor<T> },
    SumAxis { a: Tensor<T>, axis: usize },
    Reshape { a: Tensor<T> },
    Concat { inputs: Vec<Tensor<T>>, axis: usize },
    Narrow { a: Tensor<T>, axis: usize, start: usize },
    GridSample { map: Tensor<T>, points: Tensor<T> },
    ResizeBilinear { a: Tensor<T>, oh: usize, ow: usize },
    LayerNorm {
        a: Tensor<T>,
        gain: Tensor<T>,
        bias: Tensor<T>,
        xhat: Arc<Vec<T>>,
        inv_std: Arc<Vec<T>>,
    },
    BceLogits { logits: Tensor<T>, targets: Arc<Vec<T>> },
    TakeIndex { a: Tensor<T>, idx: Arc<Vec<usize>>, cols: usize },
}

/// Gradients keyed by graph node, produced by [`Tensor::backward`].
pub struct Gradients<T: Elem> {
    map: HashMap<u64, Vec<T>>,
}

impl<T: Elem> Gradients<T> {
    /// Gradient of the loss with respect to `t`, if any flowed to it.
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        t.node.as_ref().and_then(|n| self.map.get(&n.id)).map(|v| v.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

impl<T: Elem> Tensor<T> {
    /// Reverse-mode sweep from a scalar loss. Returns gradients for every
    /// tensor reachable in the graph (leaves included). A loss with no graph
    /// (a constant) yields an empty gradient set.
    pub fn backward(&self) -> Result<Gradients<T>> {
        if self.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }
        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        let root = match &self.node {
            Some(n) => Rc::clone(n),
            None => return Ok(Gradients { map: grads }),
        };

        // Gather reachable nodes; descending id = reverse topological order.
        let mut seen: HashMap<u64, Rc<Node<T>>> = HashMap::new();
        let mut stack = vec![root];
        while let Some(n) = stack.pop() {
            if seen.contains_key(&n.id) {
                continue;
            }
            for inp in n.grad_fn.inputs() {
                if let Some(inner) = &inp.node {
                    if !seen.contains_key(&inner.id) {
                        stack.push(Rc::clone(inner));
                    }
                }
            }
            seen.insert(n.id, n);
        }
        let mut order: Vec<u64> = seen.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));

        grads.insert(self.node.as_ref().unwrap().id, vec![T::ONE]);
        for id in order {
            let node = &seen[&id];
            let Some(g) = grads.remove(&id) else { continue };
            node.grad_fn.backward(&g, &mut grads);
            if matches!(node.grad_fn, GradFn::Leaf) {
                grads.insert(id, g); // leaves keep their accumulated gradient
            }
        }
        grads.retain(|id, _| matches!(seen[id].grad_fn, GradFn::Leaf));
        Ok(Gradients { map: grads })
    }
}

fn accum<T: Elem>(grads: &mut HashMap<u64, Vec<T>>, t: &Tensor<T>, contribution: Vec<T>) {
    let Some(node) = &t.node else { return };
    match grads.entry(node.id) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (dst, src) in e.get_mut().iter_mut().zip(&contribution) {
                *dst += *src;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(contribution);
        }
    }
}

impl<T: Elem> GradFn<T> {
    fn inputs(&self) -> Vec<&Tensor<T>> {
        match self {
            GradFn::Leaf => vec![],
            GradFn::Add { a, b } | GradFn::Sub { a, b } | GradFn::Mul { a, b } | GradFn::Div { a, b } => {
                vec![a, b]
            }
            GradFn::AddScalar { a } | GradFn::MulScalar { a, .. } => vec![a],
            GradFn::AddBias { a, bias, .. } => vec![a, bias],
            GradFn::MulRows { a, w, .. } => vec![a, w],
            GradFn::Matmul { a, b, .. } => vec![a, b],
            GradFn::Transpose2d { a, .. } => vec![a],
            GradFn::Conv2d { input, weight, bias, .. } => {
                let mut v = vec![input, weight];
                if let Some(b) = bias {
                    v.push(b);
                }
                v
            }
            GradFn::Relu { a }
            | GradFn::Sigmoid { a, .. }
            | GradFn::Abs { a }
            | GradFn::Softmax { a, .. }
            | GradFn::LogSoftmax { a, .. }
            | GradFn::Sum { a }
            | GradFn::SumAxis { a, .. }
            | GradFn::Reshape { a }
            | GradFn::Narrow { a, .. }
            | GradFn::ResizeBilinear { a, .. }
            | GradFn::TakeIndex { a, .. } => vec![a],
            GradFn::Concat { inputs, .. } => inputs.iter().collect(),
            GradFn::GridSample { map, points } => vec![map, points],
            GradFn::LayerNorm { a, gain, bias, .. } => vec![a, gain, bias],
            GradFn::BceLogits { logits, .. } => vec![logits],
        }
    }

    fn backward(&self, g: &[T], grads: &mut HashMap<u64, Vec<T>>) {
        match self {
            GradFn::Leaf => {}
            GradFn::Add { a, b } => {
                if a.requires_grad() {
                    accum(grads, a, g.to_vec());
                }
                if b.requires_grad() {
                    accum(grads, b, g.to_vec());
                }
            }
            GradFn::Sub { a, b } => {
                if a.requires_grad() {
                    accum(grads, a, g.to_vec());
                }
                if b.requires_grad() {
                    accum(grads, b, g.iter().map(|&v| -v).collect());
                }
            }
            GradFn::Mul { a, b } => {
                if a.requires_grad() {
                    accum(grads, a, g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect());
                }
                if b.requires_grad() {
                    accum(grads, b, g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect());
                }
            }
            GradFn::Div { a, b } => {
                if a.requires_grad() {
                    accum(grads, a, g.iter().zip(b.data()).map(|(&gv, &bv)| gv / bv).collect());
                }
                if b.requires_grad() {
                    let d: Vec<T> = g
                        .iter()
                        .zip(a.data().iter().zip(b.data()))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect();
                    accum(grads, b, d);
                }
            }
            GradFn::AddScalar { a } => accum(grads, a, g.to_vec()),
            GradFn::MulScalar { a, c } => {
                accum(grads, a, g.iter().map(|&v| v * *c).collect());
            }
            GradFn::AddBias { a, bias, cols } => {
                if a.requires_grad() {
                    accum(grads, a, g.to_vec());
                }
                if bias.requires_grad() {
                    let mut db = vec![T::ZERO; *cols];
                    for row in g.chunks(*cols) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                    accum(grads, bias, db);
                }
            }
            GradFn::MulRows { a, w, cols } => {
                if a.requires_grad() {
                    let da: Vec<T> = g
                        .chunks(*cols)
                        .zip(w.data())
                        .flat_map(|(row, &wv)| row.iter().map(move |&gv| gv * wv))
                        .collect();
                    accum(grads, a, da);
                }
                if w.requires_grad() {
                    let dw: Vec<T> = g
                        .chunks(*cols)
                        .zip(a.data().chunks(*cols))
                        .map(|(grow, arow)| {
                            let mut acc = T::ZERO;
                            for (&gv, &av) in grow.iter().zip(arow) {
                                acc += gv * av;
                            }
                            acc
                        })
                        .collect();
                    accum(grads, w, dw);
                }
            }
            GradFn::Matmul { a, b, m, k: kk, n } => {
                if a.requires_grad() {
                    accum(grads, a, k::matmul_nt(g, b.data(), *m, *n, *kk));
                }
                if b.requires_grad() {
                    accum(grads, b, k::matmul_tn(a.data(), g, *m, *kk, *n));
                }
            }
            GradFn::Transpose2d { a, rows, cols } => {
                // g has shape [cols, rows]; transpose it back
                let mut da = vec![T::ZERO; rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        da[r * cols + c] = g[c * rows + r];
                    }
                }
                accum(grads, a, da);
            }
            GradFn::Conv2d { input, weight, bias, stride, pad } => {
                let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
                let (co, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
                if input.requires_grad() {
                    accum(
                        grads,
                        input,
                        k::conv2d_bwd_input(g, weight.data(), ci, h, w, co, kh, kw, *stride, *pad),
                    );
                }
                if weight.requires_grad() {
                    accum(
                        grads,
                        weight,
                        k::conv2d_bwd_weight(g, input.data(), ci, h, w, co, kh, kw, *stride, *pad),
                    );
                }
                if let Some(b) = bias {
                    if b.requires_grad() {
                        accum(grads, b, k::conv2d_bwd_bias(g, co));
                    }
                }
            }
            GradFn::Relu { a } => {
                let da: Vec<T> = g
                    .iter()
                    .zip(a.data())
                    .map(|(&gv, &av)| if av > T::ZERO { gv } else { T::ZERO })
                    .collect();
                accum(grads, a, da);
            }
            GradFn::Sigmoid { a, y } => {
                let da: Vec<T> = g
                    .iter()
                    .zip(y.iter())
                    .map(|(&gv, &yv)| gv * yv * (T::ONE - yv))
                    .collect();
                accum(grads, a, da);
            }
            GradFn::Abs { a } => {
                // Subgradient at 0: treated as +1 (right derivative).
                let da: Vec<T> = g
                    .iter()
                    .zip(a.data())
                    .map(|(&gv, &av)| if av < T::ZERO { -gv } else { gv })
                    .collect();
                accum(grads, a, da);
            }
            GradFn::Softmax { a, y, axis } => {
                let (outer, len, inner) = k::axis_split(a.shape(), *axis);
                let mut da = vec![T::ZERO; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |x: usize| (o * len + x) * inner + i;
                        let mut dot = T::ZERO;
                        for x in 0..len {
                            dot += g[at(x)] * y[at(x)];
                        }
                        for x in 0..len {
                            da[at(x)] = y[at(x)] * (g[at(x)] - dot);
                        }
                    }
                }
                accum(grads, a, da);
            }
            GradFn::LogSoftmax { a, y, axis } => {
                let (outer, len, inner) = k::axis_split(a.shape(), *axis);
                let mut da = vec![T::ZERO; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |x: usize| (o * len + x) * inner + i;
                        let mut gsum = T::ZERO;
                        for x in 0..len {
                            gsum += g[at(x)];
                        }
                        for x in 0..len {
                            da[at(x)] = g[at(x)] - y[at(x)].exp() * gsum;
                        }
                    }
                }
                accum(grads, a, da);
            }
            GradFn::Sum { a } => {
                accum(grads, a, vec![g[0]; a.numel()]);
            }
            GradFn::SumAxis { a, axis } => {
                let (outer, len, inner) = k::axis_split(a.shape(), *axis);
                let mut da = vec![T::ZERO; a.numel()];
                for o in 0..outer {
                    for x in 0..len {
                        for i in 0..inner {
                            da[(o * len + x) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                accum(grads, a, da);
            }
            GradFn::Reshape { a } => accum(grads, a, g.to_vec()),
            GradFn::Concat { inputs, axis } => {
                let out_shape = concat_shape(inputs, *axis);
                let (_, _, inner) = k::axis_split(&out_shape, *axis);
                let out_axis = out_shape[*axis];
                let outer: usize = out_shape[..*axis].iter().product();
                let mut start = 0usize;
                for t in inputs {
                    let len = t.shape()[*axis];
                    if t.requires_grad() {
                        let mut dt = vec![T::ZERO; t.numel()];
                        for o in 0..outer {
                            for x in 0..len {
                                let src = (o * out_axis + start + x) * inner;
                                let dst = (o * len + x) * inner;
                                dt[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                            }
                        }
                        accum(grads, t, dt);
                    }
                    start += len;
                }
            }
            GradFn::Narrow { a, axis, start } => {
                let (outer, len, inner) = k::axis_split(a.shape(), *axis);
                let out_len = g.len() / (outer * inner);
                let mut da = vec![T::ZERO; a.numel()];
                for o in 0..outer {
                    for x in 0..out_len {
                        let src = (o * out_len + x) * inner;
                        let dst = (o * len + start + x) * inner;
                        da[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                    }
                }
                accum(grads, a, da);
            }
            GradFn::GridSample { map, points } => {
                let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
                let (dmap, dpts) = k::grid_sample_bwd(map.data(), c, h, w, points.data(), g);
                if map.requires_grad() {
                    accum(grads, map, dmap);
                }
                if points.requires_grad() {
                    accum(grads, points, dpts);
                }
            }
            GradFn::ResizeBilinear { a, oh, ow } => {
                let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                accum(grads, a, k::resize_bilinear_bwd(g, c, h, w, *oh, *ow));
            }
            GradFn::LayerNorm { a, gain, bias, xhat, inv_std } => {
                let width = gain.numel();
                let rows = a.numel() / width;
                if a.requires_grad() {
                    let mut da = vec![T::ZERO; a.numel()];
                    let inv_w = T::ONE / T::from_f64(width as f64);
                    for r in 0..rows {
                        let base = r * width;
                        let mut mean_gy = T::ZERO;
                        let mut mean_gy_xhat = T::ZERO;
                        for i in 0..width {
                            let gy = g[base + i] * gain.data()[i];
                            mean_gy += gy;
                            mean_gy_xhat += gy * xhat[base + i];
                        }
                        mean_gy *= inv_w;
                        mean_gy_xhat *= inv_w;
                        for i in 0..width {
                            let gy = g[base + i] * gain.data()[i];
                            da[base + i] =
                                (gy - mean_gy - xhat[base + i] * mean_gy_xhat) * inv_std[r];
                        }
                    }
                    accum(grads, a, da);
                }
                if gain.requires_grad() {
                    let mut dg = vec![T::ZERO; width];
                    for r in 0..rows {
                        for i in 0..width {
                            dg[i] += g[r * width + i] * xhat[r * width + i];
                        }
                    }
                    accum(grads, gain, dg);
                }
                if bias.requires_grad() {
                    let mut db = vec![T::ZERO; width];
                    for r in 0..rows {
                        for i in 0..width {
                            db[i] += g[r * width + i];
                        }
                    }
                    accum(grads, bias, db);
                }
            }
            GradFn::BceLogits { logits, targets } => {
                // d/dx [max(x,0) - x t + ln(1+e^{-|x|})] = sigmoid(x) - t
                let da: Vec<T> = g
                    .iter()
                    .zip(logits.data().iter().zip(targets.iter()))
                    .map(|(&gv, (&x, &t))| {
                        let s = T::ONE / (T::ONE + (-x).exp());
                        gv * (s - t)
                    })
                    .collect();
                accum(grads, logits, da);
            }
            GradFn::TakeIndex { a, idx, cols } => {
                let mut da = vec![T::ZERO; a.numel()];
                for (row, (&gv, &j)) in g.iter().zip(idx.iter()).enumerate() {
                    da[row * cols + j] += gv;
                }
                accum(grads, a, da);
            }
        }
    }
}

pub(crate) fn concat_shape<T: Elem>(inputs: &[Tensor<T>], axis: usize) -> Vec<usize> {
    let mut shape = inputs[0].shape().to_vec();
    shape[axis] = inputs.iter().map(|t| t.shape()[axis]).sum();
    shape
}
