//! Reverse-mode automatic differentiation on a flat tape of `f64` matrices.
//!
//! Every intermediate of a forward pass lives in one [`Tape`]; `backward`
//! walks the tape in reverse and returns a gradient per node. Scalars are
//! represented as 1x1 matrices so the whole graph stays two-dimensional.

use ndarray::{s, Array1, Array2, Axis};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// Matrix plus a 1xN bias row broadcast over rows.
    AddBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ` without materializing the transpose.
    MatMulT(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    /// Row lookup into a table node; duplicate ids accumulate on backward.
    Gather(NodeId, Vec<usize>),
    /// Row-wise layer norm with learned gain and bias (both 1xN).
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    /// Row-wise softmax over positions where `mask` is true; masked
    /// positions produce exact zeros. A fully masked row yields zeros.
    MaskedSoftmax(NodeId, Vec<Vec<bool>>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    /// Mean softmax cross-entropy over the rows marked active.
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        active: Vec<bool>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

const LN_EPS: f64 = 1e-5;

/// Flat computation tape. One tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    /// Scalar convenience accessor for 1x1 nodes.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[[0, 0]]
    }

    pub fn constant(&mut self, v: Array2<f64>) -> NodeId {
        self.push(v, Op::Leaf)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[bias].value.nrows(), 1);
        let v = &self.nodes[x].value + &self.nodes[bias].value;
        self.push(v, Op::AddBias(x, bias))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value.t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.nodes[a].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = &self.nodes[table].value;
        let mut v = Array2::zeros((ids.len(), t.ncols()));
        for (r, &i) in ids.iter().enumerate() {
            v.row_mut(r).assign(&t.row(i));
        }
        self.push(v, Op::Gather(table, ids.to_vec()))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let g = &self.nodes[gain].value;
        let b = &self.nodes[bias].value;
        let mut v = Array2::zeros(xv.raw_dim());
        for (mut out, row) in v.axis_iter_mut(Axis(0)).zip(xv.axis_iter(Axis(0))) {
            let (mean, inv_std) = row_moments(&row.to_owned());
            for (j, o) in out.iter_mut().enumerate() {
                *o = (row[j] - mean) * inv_std * g[[0, j]] + b[[0, j]];
            }
        }
        self.push(v, Op::LayerNorm { x, gain, bias })
    }

    pub fn masked_softmax(&mut self, x: NodeId, mask: &[Vec<bool>]) -> NodeId {
        let xv = &self.nodes[x].value;
        debug_assert_eq!(mask.len(), xv.nrows());
        let mut v = Array2::zeros(xv.raw_dim());
        for (r, row_mask) in mask.iter().enumerate() {
            debug_assert_eq!(row_mask.len(), xv.ncols());
            let m = xv
                .row(r)
                .iter()
                .zip(row_mask)
                .filter(|(_, &ok)| ok)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut z = 0.0;
            for (j, &ok) in row_mask.iter().enumerate() {
                if ok {
                    let e = (xv[[r, j]] - m).exp();
                    v[[r, j]] = e;
                    z += e;
                }
            }
            v.row_mut(r).mapv_inplace(|e| e / z);
        }
        self.push(v, Op::MaskedSoftmax(x, mask.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[x].value.slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    /// Mean cross-entropy of `logits` rows against integer targets, over the
    /// rows where `active` is true. Returns a 1x1 node; zero if no row is
    /// active.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], active: &[bool]) -> NodeId {
        let lv = &self.nodes[logits].value;
        debug_assert_eq!(targets.len(), lv.nrows());
        let n_active = active.iter().filter(|&&a| a).count();
        let mut loss = 0.0;
        if n_active > 0 {
            for (r, (&t, &a)) in targets.iter().zip(active).enumerate() {
                if !a {
                    continue;
                }
                let row = lv.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let log_z = row.iter().map(|&x| (x - m).exp()).sum::<f64>().ln() + m;
                loss += log_z - row[t];
            }
            loss /= n_active as f64;
        }
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                active: active.to_vec(),
            },
        )
    }

    /// Backpropagate from `root` (typically a 1x1 loss node). Returns one
    /// gradient slot per node; nodes that do not influence `root` hold `None`.
    pub fn backward(&self, root: NodeId) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(Array2::ones(self.nodes[root].value.raw_dim()));
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddBias(x, bias) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *x, g);
                    accumulate(&mut grads, *bias, gb);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[*b].value.t());
                    let gb = self.nodes[*a].value.t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(&self.nodes[*b].value);
                    let gb = g.t().dot(&self.nodes[*a].value);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => {
                    accumulate(&mut grads, *a, &g * *c);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(&self.nodes[*a].value, |gi, &x| {
                        if x <= 0.0 {
                            *gi = 0.0;
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather(table, ids) => {
                    let mut gt = Array2::zeros(self.nodes[*table].value.raw_dim());
                    for (r, &i) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(i);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::LayerNorm { x, gain, bias } => {
                    let xv = &self.nodes[*x].value;
                    let gv = &self.nodes[*gain].value;
                    let n = xv.ncols() as f64;
                    let mut gx = Array2::zeros(xv.raw_dim());
                    let mut ggain = Array2::zeros((1, xv.ncols()));
                    let mut gbias = Array2::zeros((1, xv.ncols()));
                    for r in 0..xv.nrows() {
                        let row = xv.row(r);
                        let (mean, inv_std) = row_moments(&row.to_owned());
                        // xhat_j = (x_j - mean) * inv_std
                        let xhat: Array1<f64> = row.mapv(|x| (x - mean) * inv_std);
                        let dy = g.row(r);
                        let dxhat: Array1<f64> = dy
                            .iter()
                            .enumerate()
                            .map(|(j, &d)| d * gv[[0, j]])
                            .collect();
                        let sum_dxhat = dxhat.sum();
                        let sum_dxhat_xhat = dxhat
                            .iter()
                            .zip(xhat.iter())
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                        for j in 0..xv.ncols() {
                            gx[[r, j]] = inv_std / n
                                * (n * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                            ggain[[0, j]] += dy[j] * xhat[j];
                            gbias[[0, j]] += dy[j];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gain, ggain);
                    accumulate(&mut grads, *bias, gbias);
                }
                Op::MaskedSoftmax(x, _mask) => {
                    let y = &self.nodes[id].value;
                    let mut gx = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        let dot = g
                            .row(r)
                            .iter()
                            .zip(y.row(r).iter())
                            .map(|(a, b)| a * b)
                            .sum::<f64>();
                        for j in 0..y.ncols() {
                            gx[[r, j]] = y[[r, j]] * (g[[r, j]] - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start, len } => {
                    let mut gx = Array2::zeros(self.nodes[*x].value.raw_dim());
                    gx.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.nodes[p].value.ncols();
                        let gp = g.slice(s![.., off..off + w]).to_owned();
                        accumulate(&mut grads, p, gp);
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.nodes[p].value.nrows();
                        let gp = g.slice(s![off..off + h, ..]).to_owned();
                        accumulate(&mut grads, p, gp);
                        off += h;
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    active,
                } => {
                    let lv = &self.nodes[*logits].value;
                    let n_active = active.iter().filter(|&&a| a).count();
                    let mut gl = Array2::zeros(lv.raw_dim());
                    if n_active > 0 {
                        let scale = g[[0, 0]] / n_active as f64;
                        for (r, (&t, &a)) in targets.iter().zip(active).enumerate() {
                            if !a {
                                continue;
                            }
                            let row = lv.row(r);
                            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let z = row.iter().map(|&x| (x - m).exp()).sum::<f64>();
                            for j in 0..lv.ncols() {
                                let p = (lv[[r, j]] - m).exp() / z;
                                gl[[r, j]] = scale * (p - if j == t { 1.0 } else { 0.0 });
                            }
                        }
                    }
                    accumulate(&mut grads, *logits, gl);
                }
            }
        }
        grads
    }
}

fn row_moments(row: &Array1<f64>) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.sum() / n;
    let var = row.mapv(|x| (x - mean).powi(2)).sum() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

fn accumulate(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
    match &mut grads[id] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}
