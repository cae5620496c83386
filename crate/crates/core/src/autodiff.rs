//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] is an append-only arena of nodes; every operation records its
//! parents and enough context to run the backward pass. Graphs are built per
//! training step and dropped afterwards. Values are plain `ndarray`
//! matrices; scalars are `[1, 1]` matrices.

use ndarray::{Array2, Axis};
use std::cell::RefCell;

use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sqrt(usize),
    Recip(usize),
    SoftmaxRows(usize),
    CrossEntropyRows {
        logits: usize,
        targets: Vec<usize>,
        softmax: Array2<f64>,
    },
    SumAll(usize),
    SumCols(usize),
    SelectRows {
        x: usize,
        idx: Vec<usize>,
    },
    SliceCols {
        x: usize,
        from: usize,
        to: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SegmentMaxRows {
        x: usize,
        argmax: Vec<usize>,
    },
    LayerNormRows {
        x: usize,
        inv_std: Vec<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Arena of computation nodes.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient of the scalar root w.r.t. the given node, if it was reached.
    pub fn get(&self, v: Var<'_>) -> Option<&Array2<f64>> {
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Leaf that participates in gradient computation.
    pub fn param(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from gradient computation (masks, positional tables...).
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Value of a node, cloned out of the arena.
    pub fn value(&self, v: Var<'_>) -> Array2<f64> {
        self.nodes.borrow()[v.idx].value.clone()
    }

    /// Scalar value of a `[1, 1]` node.
    pub fn scalar(&self, v: Var<'_>) -> f64 {
        let nodes = self.nodes.borrow();
        let val = &nodes[v.idx].value;
        debug_assert_eq!(val.dim(), (1, 1));
        val[[0, 0]]
    }

    /// Backpropagate from a scalar root. Returns per-node gradients for every
    /// node with `needs_grad` reachable from the root.
    pub fn backward(&self, root: Var<'_>) -> Result<Grads> {
        let nodes = self.nodes.borrow();
        let root_node = &nodes[root.idx];
        if root_node.value.dim() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward root must be scalar, got {:?}",
                root_node.value.dim()
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[root.idx] = Some(Array2::ones((1, 1)));

        for i in (0..=root.idx).rev() {
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let mut acc = |j: usize, contribution: Array2<f64>| {
                if !nodes[j].needs_grad {
                    return;
                }
                match &mut grads[j] {
                    Some(existing) => *existing += &contribution,
                    slot => *slot = Some(contribution),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(*a, g.dot(&nodes[*b].value.t()));
                    acc(*b, nodes[*a].value.t().dot(&g));
                }
                Op::Transpose(a) => acc(*a, g.t().to_owned()),
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, -&g);
                }
                Op::Mul(a, b) => {
                    acc(*a, &g * &nodes[*b].value);
                    acc(*b, &g * &nodes[*a].value);
                }
                Op::Div(a, b) => {
                    let vb = &nodes[*b].value;
                    acc(*a, &g / vb);
                    acc(*b, -(&g * &node.value) / vb);
                }
                Op::AddRow(x, r) => {
                    acc(*x, g.clone());
                    acc(*r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::MulRow(x, r) => {
                    acc(*x, &g * &nodes[*r].value);
                    acc(*r, (&g * &nodes[*x].value).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                Op::MulCol(x, c) => {
                    acc(*x, &g * &nodes[*c].value);
                    acc(*c, (&g * &nodes[*x].value).sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
                Op::Scale(x, k) => acc(*x, &g * *k),
                Op::Relu(x) => {
                    let mask = nodes[*x].value.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    acc(*x, &g * &mask);
                }
                Op::Sqrt(x) => acc(*x, &g * &node.value.mapv(|y| 0.5 / y)),
                Op::Recip(x) => acc(*x, -(&g * &node.value * &node.value)),
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*x, y * &(&g - &dot));
                }
                Op::CrossEntropyRows {
                    logits,
                    targets,
                    softmax,
                } => {
                    let scale = g[[0, 0]] / targets.len() as f64;
                    let mut dl = softmax.clone();
                    for (row, &t) in targets.iter().enumerate() {
                        dl[[row, t]] -= 1.0;
                    }
                    acc(*logits, dl * scale);
                }
                Op::SumAll(x) => {
                    let (r, c) = nodes[*x].value.dim();
                    acc(*x, Array2::from_elem((r, c), g[[0, 0]]));
                }
                Op::SumCols(x) => {
                    let cols = nodes[*x].value.ncols();
                    let mut out = Array2::zeros(nodes[*x].value.dim());
                    for (mut row, gi) in out.rows_mut().into_iter().zip(g.column(0)) {
                        row.fill(*gi);
                    }
                    let _ = cols;
                    acc(*x, out);
                }
                Op::SelectRows { x, idx } => {
                    let mut out = Array2::zeros(nodes[*x].value.dim());
                    for (k, &row) in idx.iter().enumerate() {
                        let mut target = out.row_mut(row);
                        target += &g.row(k);
                    }
                    acc(*x, out);
                }
                Op::SliceCols { x, from, to } => {
                    let mut out = Array2::zeros(nodes[*x].value.dim());
                    out.slice_mut(ndarray::s![.., *from..*to]).assign(&g);
                    acc(*x, out);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = nodes[p].value.ncols();
                        acc(p, g.slice(ndarray::s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = nodes[p].value.nrows();
                        acc(p, g.slice(ndarray::s![offset..offset + h, ..]).to_owned());
                        offset += h;
                    }
                }
                Op::SegmentMaxRows { x, argmax } => {
                    let cols = node.value.ncols();
                    let mut out = Array2::zeros(nodes[*x].value.dim());
                    for (k, chunk) in argmax.chunks(cols).enumerate() {
                        for (j, &src_row) in chunk.iter().enumerate() {
                            out[[src_row, j]] += g[[k, j]];
                        }
                    }
                    acc(*x, out);
                }
                Op::LayerNormRows { x, inv_std } => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut out = Array2::zeros(y.dim());
                    for (row, ((g_row, y_row), &is)) in
                        g.rows().into_iter().zip(y.rows()).zip(inv_std).enumerate()
                    {
                        let mean_g = g_row.sum() / n;
                        let mean_gy = g_row
                            .iter()
                            .zip(y_row.iter())
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / n;
                        for (j, (gv, yv)) in g_row.iter().zip(y_row.iter()).enumerate() {
                            out[[row, j]] = is * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    acc(*x, out);
                }
            }
        }
        Ok(Grads { grads })
    }
}

impl<'t> Var<'t> {
    pub fn dim(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.idx].value.dim()
    }

    fn unary(&self, value: Array2<f64>, op: Op) -> Var<'t> {
        let needs = self.tape.nodes.borrow()[self.idx].needs_grad;
        self.tape.push(value, op, needs)
    }

    fn binary(&self, other: Var<'t>, value: Array2<f64>, op: Op) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let needs = nodes[self.idx].needs_grad || nodes[other.idx].needs_grad;
        drop(nodes);
        self.tape.push(value, op, needs)
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let value = nodes[self.idx].value.dot(&nodes[other.idx].value);
        drop(nodes);
        self.binary(other, value, Op::MatMul(self.idx, other.idx))
    }

    pub fn t(&self) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.idx].value.t().to_owned();
        self.unary(value, Op::Transpose(self.idx))
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let value = &nodes[self.idx].value + &nodes[other.idx].value;
        drop(nodes);
        self.binary(other, value, Op::Add(self.idx, other.idx))
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let value = &nodes[self.idx].value - &nodes[other.idx].value;
        drop(nodes);
        self.binary(other, value, Op::Sub(self.idx, other.idx))
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let value = &nodes[self.idx].value * &nodes[other.idx].value;
        drop(nodes);
        self.binary(other, value, Op::Mul(self.idx, other.idx))
    }

    pub fn div(&self, other: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let value = &nodes[self.idx].value / &nodes[other.idx].value;
        drop(nodes);
        self.binary(other, value, Op::Div(self.idx, other.idx))
    }

    /// Broadcast-add a `[1, cols]` row vector to every row.
    pub fn add_row(&self, row: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let value = &nodes[self.idx].value + &nodes[row.idx].value;
        drop(nodes);
        self.binary(row, value, Op::AddRow(self.idx, row.idx))
    }

    /// Broadcast-multiply by a `[1, cols]` row vector.
    pub fn mul_row(&self, row: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let value = &nodes[self.idx].value * &nodes[row.idx].value;
        drop(nodes);
        self.binary(row, value, Op::MulRow(self.idx, row.idx))
    }

    /// Broadcast-multiply by a `[rows, 1]` column vector.
    pub fn mul_col(&self, col: Var<'t>) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let value = &nodes[self.idx].value * &nodes[col.idx].value;
        drop(nodes);
        self.binary(col, value, Op::MulCol(self.idx, col.idx))
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        let value = &self.tape.nodes.borrow()[self.idx].value * k;
        self.unary(value, Op::Scale(self.idx, k))
    }

    pub fn relu(&self) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.idx]
            .value
            .mapv(|v| v.max(0.0));
        self.unary(value, Op::Relu(self.idx))
    }

    pub fn sqrt(&self) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.idx].value.mapv(f64::sqrt);
        self.unary(value, Op::Sqrt(self.idx))
    }

    pub fn recip(&self) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.idx].value.mapv(|v| 1.0 / v);
        self.unary(value, Op::Recip(self.idx))
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax_rows(&self) -> Var<'t> {
        let value = softmax_rows(&self.tape.nodes.borrow()[self.idx].value);
        self.unary(value, Op::SoftmaxRows(self.idx))
    }

    /// Mean cross-entropy of row-wise logits against integer targets.
    pub fn cross_entropy_rows(&self, targets: &[usize]) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let logits = &nodes[self.idx].value;
        assert_eq!(logits.nrows(), targets.len(), "one target per logit row");
        let sm = softmax_rows(logits);
        let mut loss = 0.0;
        for (row, &t) in targets.iter().enumerate() {
            loss -= sm[[row, t]].max(1e-300).ln();
        }
        loss /= targets.len() as f64;
        drop(nodes);
        self.unary(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropyRows {
                logits: self.idx,
                targets: targets.to_vec(),
                softmax: sm,
            },
        )
    }

    pub fn sum_all(&self) -> Var<'t> {
        let s = self.tape.nodes.borrow()[self.idx].value.sum();
        self.unary(Array2::from_elem((1, 1), s), Op::SumAll(self.idx))
    }

    pub fn mean_all(&self) -> Var<'t> {
        let (r, c) = self.dim();
        self.sum_all().scale(1.0 / (r * c) as f64)
    }

    /// Row sums as a `[rows, 1]` column.
    pub fn sum_cols(&self) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.idx]
            .value
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        self.unary(value, Op::SumCols(self.idx))
    }

    /// Gather rows by index; duplicates allowed.
    pub fn select_rows(&self, idx: &[usize]) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let src = &nodes[self.idx].value;
        let mut value = Array2::zeros((idx.len(), src.ncols()));
        for (k, &row) in idx.iter().enumerate() {
            value.row_mut(k).assign(&src.row(row));
        }
        drop(nodes);
        self.unary(
            value,
            Op::SelectRows {
                x: self.idx,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn slice_cols(&self, from: usize, to: usize) -> Var<'t> {
        let value = self.tape.nodes.borrow()[self.idx]
            .value
            .slice(ndarray::s![.., from..to])
            .to_owned();
        self.unary(
            value,
            Op::SliceCols {
                x: self.idx,
                from,
                to,
            },
        )
    }

    /// Per-segment column-wise max over row ranges `[start, end)`.
    pub fn segment_max_rows(&self, segments: &[(usize, usize)]) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let src = &nodes[self.idx].value;
        let cols = src.ncols();
        let mut value = Array2::zeros((segments.len(), cols));
        let mut argmax = Vec::with_capacity(segments.len() * cols);
        for (k, &(start, end)) in segments.iter().enumerate() {
            assert!(start < end && end <= src.nrows(), "bad segment {start}..{end}");
            for j in 0..cols {
                let mut best = src[[start, j]];
                let mut best_row = start;
                for row in start + 1..end {
                    if src[[row, j]] > best {
                        best = src[[row, j]];
                        best_row = row;
                    }
                }
                value[[k, j]] = best;
                argmax.push(best_row);
            }
        }
        drop(nodes);
        self.unary(
            value,
            Op::SegmentMaxRows {
                x: self.idx,
                argmax,
            },
        )
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)`, no affine.
    pub fn layer_norm_rows(&self, eps: f64) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let src = &nodes[self.idx].value;
        let n = src.ncols() as f64;
        let mut value = Array2::zeros(src.dim());
        let mut inv_std = Vec::with_capacity(src.nrows());
        for (row, src_row) in src.rows().into_iter().enumerate() {
            let mean = src_row.sum() / n;
            let var = src_row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for (j, v) in src_row.iter().enumerate() {
                value[[row, j]] = (v - mean) * is;
            }
        }
        drop(nodes);
        self.unary(
            value,
            Op::LayerNormRows {
                x: self.idx,
                inv_std,
            },
        )
    }
}

/// Concatenate along columns.
pub fn concat_cols<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let nodes = tape.nodes.borrow();
    let rows = nodes[parts[0].idx].value.nrows();
    let total: usize = parts.iter().map(|p| nodes[p.idx].value.ncols()).sum();
    let mut value = Array2::zeros((rows, total));
    let mut offset = 0;
    let mut needs = false;
    for p in parts {
        let v = &nodes[p.idx].value;
        value
            .slice_mut(ndarray::s![.., offset..offset + v.ncols()])
            .assign(v);
        offset += v.ncols();
        needs |= nodes[p.idx].needs_grad;
    }
    drop(nodes);
    tape.push(value, Op::ConcatCols(parts.iter().map(|p| p.idx).collect()), needs)
}

/// Concatenate along rows.
pub fn concat_rows<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let nodes = tape.nodes.borrow();
    let cols = nodes[parts[0].idx].value.ncols();
    let total: usize = parts.iter().map(|p| nodes[p.idx].value.nrows()).sum();
    let mut value = Array2::zeros((total, cols));
    let mut offset = 0;
    let mut needs = false;
    for p in parts {
        let v = &nodes[p.idx].value;
        value
            .slice_mut(ndarray::s![offset..offset + v.nrows(), ..])
            .assign(v);
        offset += v.nrows();
        needs |= nodes[p.idx].needs_grad;
    }
    drop(nodes);
    tape.push(value, Op::ConcatRows(parts.iter().map(|p| p.idx).collect()), needs)
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    type GraphFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Var<'t>;

    /// Central finite differences of the graph output w.r.t. every element of
    /// `inputs`, compared against tape gradients.
    fn check_grads(inputs: &[Array2<f64>], f: GraphFn) {
        let eval = |arrays: &[Array2<f64>]| -> f64 {
            let tape = Tape::new();
            let vars: Vec<Var> = arrays.iter().map(|a| tape.param(a.clone())).collect();
            let root = f(&tape, &vars);
            tape.scalar(root)
        };
        let analytic: Vec<Array2<f64>> = {
            let tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|a| tape.param(a.clone())).collect();
            let root = f(&tape, &vars);
            let grads = tape.backward(root).unwrap();
            vars.iter()
                .map(|v| {
                    grads
                        .get(*v)
                        .cloned()
                        .unwrap_or_else(|| Array2::zeros(v.dim()))
                })
                .collect()
        };
        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            for ((i, j), _) in input.indexed_iter() {
                let mut plus = inputs.to_vec();
                plus[k][[i, j]] += h;
                let mut minus = inputs.to_vec();
                minus[k][[i, j]] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic[k][[i, j]];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-5,
                    "input {k} element ({i},{j}): fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn matmul_add_chain_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let c = random(&mut rng, 3, 2);
        check_grads(&[a, b, c], |_t, v| v[0].matmul(v[1]).add(v[2]).relu().sum_all());
    }

    #[test]
    fn softmax_and_cross_entropy_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 4, 5);
        check_grads(&[x.clone()], |_t, v| v[0].softmax_rows().mul(v[0]).sum_all());
        check_grads(&[x], |_t, v| v[0].cross_entropy_rows(&[1, 0, 4, 2]));
    }

    #[test]
    fn rowwise_and_elementwise_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 3, 4);
        let r = random(&mut rng, 1, 4);
        let c = random(&mut rng, 3, 1);
        check_grads(&[x.clone(), r, c], |_t, v| {
            v[0].add_row(v[1]).mul_row(v[1]).mul_col(v[2]).scale(0.7).sum_all()
        });
        let y = x.mapv(|v| v.abs() + 0.5);
        check_grads(&[y.clone(), y], |_t, v| v[0].sqrt().div(v[1]).recip().sum_all());
    }

    #[test]
    fn structural_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 6, 4);
        let y = random(&mut rng, 2, 4);
        check_grads(&[x.clone(), y], |t, v| {
            let sel = v[0].select_rows(&[0, 2, 2, 5]);
            let cat = concat_rows(t, &[sel, v[1]]);
            cat.slice_cols(1, 4).sum_all()
        });
        check_grads(&[x.clone()], |t, v| {
            let a = v[0].slice_cols(0, 2);
            let b = v[0].slice_cols(2, 4);
            concat_cols(t, &[b, a]).mul(concat_cols(t, &[a, b])).sum_all()
        });
        check_grads(&[x.clone()], |_t, v| {
            v[0].segment_max_rows(&[(0, 3), (3, 6)]).sum_all()
        });
        check_grads(&[x], |_t, v| v[0].layer_norm_rows(1e-5).mul(v[0]).sum_all());
    }

    #[test]
    fn transpose_and_sum_cols_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, 3, 5);
        let y = random(&mut rng, 3, 5);
        check_grads(&[x, y], |t, v| {
            let s = v[0].matmul(v[1].t()).sum_cols();
            let shifted = s.mul(s).add(t.constant(Array2::from_elem(s.dim(), 0.1)));
            shifted.sqrt().sum_all()
        });
    }

    #[test]
    fn constants_do_not_collect_gradients() {
        let tape = Tape::new();
        let p = tape.param(arr2(&[[1.0, 2.0]]));
        let c = tape.constant(arr2(&[[3.0, 4.0]]));
        let loss = p.mul(c).sum_all();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap(), &arr2(&[[3.0, 4.0]]));
    }

    #[test]
    fn backward_requires_scalar_root() {
        let tape = Tape::new();
        let p = tape.param(arr2(&[[1.0, 2.0]]));
        assert!(tape.backward(p).is_err());
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let tape = Tape::new();
        let p = tape.param(arr2(&[[2.0]]));
        let loss = p.mul(p).add(p).sum_all(); // x^2 + x, d/dx = 2x + 1 = 5
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(p).unwrap()[[0, 0]] - 5.0).abs() < 1e-12);
    }
}
