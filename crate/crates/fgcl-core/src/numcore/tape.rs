//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records matrix-valued operations as they are evaluated
//! (forward values are computed eagerly at push time), then [`Tape::backward`]
//! walks the record once in reverse and accumulates adjoints. Trainable
//! leaves are bound to [`ParamId`]s; after a backward pass
//! [`Tape::accumulate_param_grads`] adds the leaf adjoints into the owning
//! [`ParamSet`]'s gradient buffers, so several tapes (batches) can contribute
//! to one optimizer step.
//!
//! Node construction panics on shape mismatches: those are programming
//! errors inside this crate, not recoverable input conditions. `backward`
//! returns an error for a non-scalar or non-finite root, which can happen on
//! degenerate data and must not crash a batch job.
//!
//! Control flow that depends on forward values (top-k selections, argmaxes,
//! nearest-neighbor choices) is resolved at build time and frozen into the
//! recorded ops; gradients do not flow through those selections.

use crate::error::{FgclError, Result};
use crate::numcore::matrix::DenseMatrix;
use crate::numcore::param::{ParamId, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Leaf(ParamId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    AddN(Vec<NodeId>),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Hadamard(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    DivScalar(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Clamp(NodeId, f64, f64),
    SelectRows(NodeId, Vec<usize>),
    ScatterSumRows(NodeId, Vec<usize>),
    RowScale(NodeId, NodeId),
    MeanRows(NodeId),
    MaxRows(NodeId, Vec<usize>),
    SumAll(NodeId),
    ConcatCols(NodeId, NodeId),
    AddRowVec(NodeId, NodeId),
    Get(NodeId, usize, usize),
    StackRows(Vec<NodeId>),
    LogSumExp(Vec<NodeId>),
}

struct Node {
    value: DenseMatrix,
    grad: Option<DenseMatrix>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert!(
            v.shape() == (1, 1),
            "scalar: node is {:?}, expected 1x1",
            v.shape()
        );
        v[(0, 0)]
    }

    /// Adjoint of a node after `backward`; `None` if the node does not
    /// influence the root.
    pub fn grad(&self, id: NodeId) -> Option<&DenseMatrix> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: DenseMatrix, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn scalar_constant(&mut self, value: f64) -> NodeId {
        self.constant(DenseMatrix::row_vector(vec![value]))
    }

    /// Bind a trainable parameter as a leaf; its current value is copied in.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        self.push(params.get(id).value.clone(), Op::Leaf(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self
            .value(a)
            .matmul(self.value(b))
            .expect("tape matmul: inner dimensions must agree");
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b)).expect("tape add: shapes");
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b)).expect("tape sub: shapes");
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise sum of one or more same-shaped nodes.
    pub fn add_n(&mut self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty(), "tape add_n: empty operand list");
        let mut v = self.value(ids[0]).clone();
        for &id in &ids[1..] {
            v = v.add(self.value(id)).expect("tape add_n: shapes");
        }
        self.push(v, Op::AddN(ids.to_vec()))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddConst(a))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self
            .value(a)
            .hadamard(self.value(b))
            .expect("tape hadamard: shapes");
        self.push(v, Op::Hadamard(a, b))
    }

    /// Multiply every entry of `a` by the 1x1 node `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar(s);
        let v = self.value(a).scale(sv);
        self.push(v, Op::MulScalar(a, s))
    }

    /// Divide every entry of `a` by the 1x1 node `s`.
    pub fn div_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar(s);
        assert!(sv != 0.0, "tape div_scalar: division by zero");
        let v = self.value(a).scale(1.0 / sv);
        self.push(v, Op::DivScalar(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(stable_sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::sqrt);
        self.push(v, Op::Sqrt(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo < hi, "tape clamp: empty interval [{lo}, {hi}]");
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Gather rows by index; duplicate indices are allowed.
    pub fn select_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let src = self.value(a);
        assert!(
            idx.iter().all(|&i| i < src.rows()),
            "tape select_rows: index out of bounds"
        );
        let v = src.select_rows(idx);
        self.push(v, Op::SelectRows(a, idx.to_vec()))
    }

    /// Scatter-add rows of `a` into an `n_out`-row zero matrix:
    /// `out[idx[r], :] += a[r, :]`.
    pub fn scatter_sum_rows(&mut self, a: NodeId, idx: &[usize], n_out: usize) -> NodeId {
        let src = self.value(a);
        assert_eq!(
            idx.len(),
            src.rows(),
            "tape scatter_sum_rows: one target index per input row"
        );
        assert!(
            idx.iter().all(|&i| i < n_out),
            "tape scatter_sum_rows: target index out of bounds"
        );
        let mut v = DenseMatrix::zeros(n_out, src.cols());
        for (r, &target) in idx.iter().enumerate() {
            let row = src.row(r);
            let out = v.row_mut(target);
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        self.push(v, Op::ScatterSumRows(a, idx.to_vec()))
    }

    /// Scale row `i` of `a` by entry `i` of the (n x 1) node `s`.
    pub fn row_scale(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let (av, sv) = (self.value(a), self.value(s));
        assert_eq!(sv.cols(), 1, "tape row_scale: scale must be a column");
        assert_eq!(av.rows(), sv.rows(), "tape row_scale: row counts differ");
        let mut v = av.clone();
        for i in 0..v.rows() {
            let k = sv[(i, 0)];
            for x in v.row_mut(i) {
                *x *= k;
            }
        }
        self.push(v, Op::RowScale(a, s))
    }

    /// Column-wise mean over rows, yielding a 1 x cols node.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        assert!(src.rows() > 0, "tape mean_rows: empty input");
        let mut v = DenseMatrix::zeros(1, src.cols());
        for i in 0..src.rows() {
            for (j, x) in src.row(i).iter().enumerate() {
                v[(0, j)] += x;
            }
        }
        let inv = 1.0 / src.rows() as f64;
        for x in v.data_mut() {
            *x *= inv;
        }
        self.push(v, Op::MeanRows(a))
    }

    /// Column-wise max over rows, yielding a 1 x cols node. Ties resolve to
    /// the lowest row index and the gradient flows only to the winner.
    pub fn max_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        assert!(src.rows() > 0, "tape max_rows: empty input");
        let mut argmax = vec![0usize; src.cols()];
        let mut v = DenseMatrix::zeros(1, src.cols());
        for j in 0..src.cols() {
            let mut best = src[(0, j)];
            let mut best_i = 0;
            for i in 1..src.rows() {
                if src[(i, j)] > best {
                    best = src[(i, j)];
                    best_i = i;
                }
            }
            v[(0, j)] = best;
            argmax[j] = best_i;
        }
        self.push(v, Op::MaxRows(a, argmax))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(DenseMatrix::row_vector(vec![s]), Op::SumAll(a))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows(), "tape concat_cols: row counts differ");
        let mut v = DenseMatrix::zeros(av.rows(), av.cols() + bv.cols());
        for i in 0..av.rows() {
            v.row_mut(i)[..av.cols()].copy_from_slice(av.row(i));
            v.row_mut(i)[av.cols()..].copy_from_slice(bv.row(i));
        }
        self.push(v, Op::ConcatCols(a, b))
    }

    /// Add a 1 x cols row vector to every row of `a` (bias broadcast).
    pub fn add_row_vec(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "tape add_row_vec: bias must be one row");
        assert_eq!(av.cols(), rv.cols(), "tape add_row_vec: widths differ");
        let mut v = av.clone();
        for i in 0..v.rows() {
            for (x, b) in v.row_mut(i).iter_mut().zip(rv.row(0)) {
                *x += b;
            }
        }
        self.push(v, Op::AddRowVec(a, row))
    }

    /// Extract one entry as a 1x1 node.
    pub fn get(&mut self, a: NodeId, r: usize, c: usize) -> NodeId {
        let v = self.value(a)[(r, c)];
        self.push(DenseMatrix::row_vector(vec![v]), Op::Get(a, r, c))
    }

    /// Stack k nodes of shape 1 x cols into a k x cols node.
    pub fn stack_rows(&mut self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty(), "tape stack_rows: empty operand list");
        let cols = self.value(ids[0]).cols();
        let mut v = DenseMatrix::zeros(ids.len(), cols);
        for (r, &id) in ids.iter().enumerate() {
            let src = self.value(id);
            assert!(
                src.shape() == (1, cols),
                "tape stack_rows: operand {r} is {:?}, expected (1, {cols})",
                src.shape()
            );
            v.row_mut(r).copy_from_slice(src.row(0));
        }
        self.push(v, Op::StackRows(ids.to_vec()))
    }

    /// `log(sum_k exp(x_k))` over 1x1 nodes, computed with the max subtracted
    /// so large similaritiy/temperature ratios cannot overflow.
    pub fn logsumexp(&mut self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty(), "tape logsumexp: empty operand list");
        let xs: Vec<f64> = ids.iter().map(|&id| self.scalar(id)).collect();
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
        let v = m + s.ln();
        self.push(DenseMatrix::row_vector(vec![v]), Op::LogSumExp(ids.to_vec()))
    }

    /// Reverse pass from a scalar root. The root's adjoint is seeded with 1;
    /// every reachable node receives its adjoint, and leaf adjoints stay on
    /// the tape until [`Tape::accumulate_param_grads`] moves them out.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(FgclError::contract(format!(
                "backward: root node is {:?}, expected 1x1",
                rv.shape()
            )));
        }
        if !rv.is_finite() {
            return Err(FgclError::numeric(
                "backward",
                format!("root value {} is not finite", rv[(0, 0)]),
            ));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[root.0].grad = Some(DenseMatrix::row_vector(vec![1.0]));

        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Constant | Op::Leaf(_)) {
                continue;
            }
            let grad = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Constant | Op::Leaf(_) => unreachable!(),
                Op::MatMul(a, b) => {
                    let da = grad.matmul(&self.value(b).transpose()).unwrap();
                    self.accumulate(a, da);
                    let db = self.value(a).transpose().matmul(&grad).unwrap();
                    self.accumulate(b, db);
                }
                Op::Transpose(a) => self.accumulate(a, grad.transpose()),
                Op::Add(a, b) => {
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, grad);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, grad.clone());
                    self.accumulate(b, grad.scale(-1.0));
                }
                Op::AddN(ids) => {
                    for &id in &ids {
                        self.accumulate(id, grad.clone());
                    }
                }
                Op::Scale(a, k) => self.accumulate(a, grad.scale(k)),
                Op::AddConst(a) => self.accumulate(a, grad),
                Op::Hadamard(a, b) => {
                    let da = grad.hadamard(self.value(b)).unwrap();
                    self.accumulate(a, da);
                    let db = grad.hadamard(self.value(a)).unwrap();
                    self.accumulate(b, db);
                }
                Op::MulScalar(a, s) => {
                    let sv = self.scalar(s);
                    self.accumulate(a, grad.scale(sv));
                    let ds: f64 = grad
                        .data()
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(g, x)| g * x)
                        .sum();
                    self.accumulate(s, DenseMatrix::row_vector(vec![ds]));
                }
                Op::DivScalar(a, s) => {
                    let sv = self.scalar(s);
                    self.accumulate(a, grad.scale(1.0 / sv));
                    let ds: f64 = grad
                        .data()
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(g, x)| g * x)
                        .sum();
                    self.accumulate(s, DenseMatrix::row_vector(vec![-ds / (sv * sv)]));
                }
                Op::Relu(a) => {
                    let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    self.accumulate(a, grad.hadamard(&mask).unwrap());
                }
                Op::Tanh(a) => {
                    let d = self.nodes[i].value.map(|y| 1.0 - y * y);
                    self.accumulate(a, grad.hadamard(&d).unwrap());
                }
                Op::Sigmoid(a) => {
                    let d = self.nodes[i].value.map(|y| y * (1.0 - y));
                    self.accumulate(a, grad.hadamard(&d).unwrap());
                }
                Op::Exp(a) => {
                    let d = grad.hadamard(&self.nodes[i].value).unwrap();
                    self.accumulate(a, d);
                }
                Op::Ln(a) => {
                    let d = self.value(a).map(|x| 1.0 / x);
                    self.accumulate(a, grad.hadamard(&d).unwrap());
                }
                Op::Sqrt(a) => {
                    let d = self.nodes[i].value.map(|y| 0.5 / y);
                    self.accumulate(a, grad.hadamard(&d).unwrap());
                }
                Op::Clamp(a, lo, hi) => {
                    let mask = self
                        .value(a)
                        .map(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
                    self.accumulate(a, grad.hadamard(&mask).unwrap());
                }
                Op::SelectRows(a, idx) => {
                    let mut da = DenseMatrix::zeros(self.value(a).rows(), grad.cols());
                    for (r, &src) in idx.iter().enumerate() {
                        let g = grad.row(r);
                        let out = da.row_mut(src);
                        for (o, x) in out.iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                    self.accumulate(a, da);
                }
                Op::ScatterSumRows(a, idx) => {
                    let da = grad.select_rows(&idx);
                    self.accumulate(a, da);
                }
                Op::RowScale(a, s) => {
                    let sv = self.value(s).clone();
                    let mut da = grad.clone();
                    for r in 0..da.rows() {
                        let k = sv[(r, 0)];
                        for x in da.row_mut(r) {
                            *x *= k;
                        }
                    }
                    self.accumulate(a, da);
                    let av = self.value(a);
                    let mut ds = DenseMatrix::zeros(sv.rows(), 1);
                    for r in 0..av.rows() {
                        ds[(r, 0)] = grad
                            .row(r)
                            .iter()
                            .zip(av.row(r))
                            .map(|(g, x)| g * x)
                            .sum();
                    }
                    self.accumulate(s, ds);
                }
                Op::MeanRows(a) => {
                    let n = self.value(a).rows();
                    let mut da = DenseMatrix::zeros(n, grad.cols());
                    let inv = 1.0 / n as f64;
                    for r in 0..n {
                        for (x, g) in da.row_mut(r).iter_mut().zip(grad.row(0)) {
                            *x = g * inv;
                        }
                    }
                    self.accumulate(a, da);
                }
                Op::MaxRows(a, argmax) => {
                    let mut da = DenseMatrix::zeros(self.value(a).rows(), grad.cols());
                    for (j, &r) in argmax.iter().enumerate() {
                        da[(r, j)] = grad[(0, j)];
                    }
                    self.accumulate(a, da);
                }
                Op::SumAll(a) => {
                    let g = grad[(0, 0)];
                    let shape = self.value(a).shape();
                    let da = DenseMatrix::from_vec(shape.0, shape.1, vec![g; shape.0 * shape.1])
                        .unwrap();
                    self.accumulate(a, da);
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.value(a).cols();
                    let rows = grad.rows();
                    let mut da = DenseMatrix::zeros(rows, ca);
                    let mut db = DenseMatrix::zeros(rows, grad.cols() - ca);
                    for r in 0..rows {
                        da.row_mut(r).copy_from_slice(&grad.row(r)[..ca]);
                        db.row_mut(r).copy_from_slice(&grad.row(r)[ca..]);
                    }
                    self.accumulate(a, da);
                    self.accumulate(b, db);
                }
                Op::AddRowVec(a, row) => {
                    self.accumulate(a, grad.clone());
                    let mut dr = DenseMatrix::zeros(1, grad.cols());
                    for r in 0..grad.rows() {
                        for (o, g) in dr.row_mut(0).iter_mut().zip(grad.row(r)) {
                            *o += g;
                        }
                    }
                    self.accumulate(row, dr);
                }
                Op::Get(a, r, c) => {
                    let mut da = DenseMatrix::zeros(self.value(a).rows(), self.value(a).cols());
                    da[(r, c)] = grad[(0, 0)];
                    self.accumulate(a, da);
                }
                Op::StackRows(ids) => {
                    for (r, &id) in ids.iter().enumerate() {
                        self.accumulate(id, DenseMatrix::row_vector(grad.row(r).to_vec()));
                    }
                }
                Op::LogSumExp(ids) => {
                    let g = grad[(0, 0)];
                    let xs: Vec<f64> = ids.iter().map(|&id| self.scalar(id)).collect();
                    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let total: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
                    for (&id, &x) in ids.iter().zip(&xs) {
                        let w = (x - m).exp() / total;
                        self.accumulate(id, DenseMatrix::row_vector(vec![g * w]));
                    }
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contribution: DenseMatrix) {
        debug_assert_eq!(
            self.nodes[id.0].value.shape(),
            contribution.shape(),
            "adjoint shape mismatch on node {}",
            id.0
        );
        match &mut self.nodes[id.0].grad {
            Some(g) => {
                g.add_scaled_assign(&contribution, 1.0).unwrap();
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    /// Add every bound leaf's adjoint into its parameter's gradient buffer.
    pub fn accumulate_param_grads(&self, params: &mut ParamSet) -> Result<()> {
        for node in &self.nodes {
            if let (Op::Leaf(pid), Some(g)) = (&node.op, &node.grad) {
                params
                    .get_mut(*pid)
                    .gradient
                    .add_scaled_assign(g, 1.0)
                    .map_err(|_| {
                        FgclError::contract(format!(
                            "accumulate_param_grads: gradient shape mismatch on {}",
                            params.get(*pid).name
                        ))
                    })?;
            }
        }
        Ok(())
    }
}

/// Sigmoid that never overflows: splits on the sign of `x`.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::gradcheck;
    use crate::numcore::param::seeded_rng;
    use rand::Rng;

    fn random_param(
        params: &mut ParamSet,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-1.5..1.5))
            .collect();
        params.add(name, DenseMatrix::from_vec(rows, cols, data).unwrap())
    }

    #[test]
    fn scalar_chain_matches_hand_derivative() {
        // f(x) = sum(relu(x) .* x): df/dx = 2x where x > 0, else 0.
        let mut params = ParamSet::new();
        let id = params.add("x", DenseMatrix::row_vector(vec![2.0, -3.0, 0.5]));
        let mut tape = Tape::new();
        let x = tape.param(&params, id);
        let r = tape.relu(x);
        let prod = tape.hadamard(r, x);
        let loss = tape.sum_all(prod);
        assert_eq!(tape.scalar(loss), 4.0 + 0.25);
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&mut params).unwrap();
        let g = params.get(id).gradient.data();
        assert_eq!(g, &[4.0, 0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let c = tape.constant(DenseMatrix::identity(2));
        assert!(tape.backward(c).is_err());
    }

    #[test]
    fn backward_rejects_non_finite_root() {
        let mut tape = Tape::new();
        let c = tape.scalar_constant(f64::NAN);
        assert!(tape.backward(c).is_err());
    }

    #[test]
    fn every_op_passes_finite_difference_check() {
        // One composite expression touching every differentiable op. The
        // finite-difference oracle is independent of the backward rules.
        let mut rng = seeded_rng(21);
        let mut params = ParamSet::new();
        let a = random_param(&mut params, "a", 4, 3, &mut rng);
        let b = random_param(&mut params, "b", 3, 4, &mut rng);
        let s = random_param(&mut params, "s", 4, 1, &mut rng);
        let bias = random_param(&mut params, "bias", 1, 4, &mut rng);

        let report = gradcheck(
            &mut params,
            |p, want_grads| {
                let mut tape = Tape::new();
                let na = tape.param(p, a);
                let nb = tape.param(p, b);
                let ns = tape.param(p, s);
                let nbias = tape.param(p, bias);

                let mm = tape.matmul(na, nb); // 4x4
                let biased = tape.add_row_vec(mm, nbias);
                let t = tape.tanh(biased);
                let sg = tape.sigmoid(mm);
                let mix = tape.add(t, sg);
                let scaled = tape.row_scale(mix, ns);
                let tr = tape.transpose(scaled); // 4x4
                let had = tape.hadamard(tr, mm);
                let gathered = tape.select_rows(had, &[0, 2, 2, 1]);
                let scattered = tape.scatter_sum_rows(gathered, &[1, 0, 1, 3], 5);
                let rl = tape.relu(scattered);
                let mean = tape.mean_rows(rl); // 1x4
                let mx = tape.max_rows(scattered); // 1x4
                let cat = tape.concat_cols(mean, mx); // 1x8
                let sq = tape.hadamard(cat, cat);
                let clamped = tape.clamp(sq, 0.01, 0.9);
                let shifted = tape.add_const(clamped, 1.5);
                let lg = tape.ln(shifted);
                let rt = tape.sqrt(shifted);
                let stacked = {
                    let r1 = tape.get(lg, 0, 0);
                    let r2 = tape.get(rt, 0, 3);
                    let r3 = tape.get(cat, 0, 5);
                    let lse = tape.logsumexp(&[r1, r2, r3]);
                    let e = tape.exp(r3);
                    let num = tape.sub(lse, r1);
                    let den = tape.add_const(e, 2.0);
                    let frac = tape.div_scalar(num, den);
                    let prod = tape.mul_scalar(frac, r2);
                    let row1 = tape.scale(prod, 0.7);
                    tape.stack_rows(&[row1, prod])
                };
                let total = tape.sum_all(stacked);
                let all = tape.add_n(&[total, total]);
                if want_grads {
                    tape.backward(all)?;
                    tape.accumulate_param_grads(p)?;
                }
                Ok(tape.scalar(all))
            },
            1e-6,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-7,
            "max relative error {:.3e} on {}",
            report.max_rel_err,
            report.worst_param
        );
    }

    #[test]
    fn duplicate_operands_accumulate_correctly() {
        // f(x) = sum(x .* x) has gradient 2x; both Hadamard slots are x.
        let mut params = ParamSet::new();
        let id = params.add("x", DenseMatrix::row_vector(vec![1.0, -2.0, 3.0]));
        let mut tape = Tape::new();
        let x = tape.param(&params, id);
        let sq = tape.hadamard(x, x);
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&mut params).unwrap();
        assert_eq!(params.get(id).gradient.data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn logsumexp_is_stable_for_large_inputs() {
        let mut tape = Tape::new();
        let a = tape.scalar_constant(1000.0);
        let b = tape.scalar_constant(1000.0);
        let lse = tape.logsumexp(&[a, b]);
        let expected = 1000.0 + 2.0_f64.ln();
        assert!((tape.scalar(lse) - expected).abs() < 1e-9);
    }

    #[test]
    fn unreachable_nodes_get_no_gradient() {
        let mut params = ParamSet::new();
        let used = params.add("used", DenseMatrix::row_vector(vec![2.0]));
        let unused = params.add("unused", DenseMatrix::row_vector(vec![5.0]));
        let mut tape = Tape::new();
        let u = tape.param(&params, used);
        let v = tape.param(&params, unused);
        let loss = tape.sum_all(u);
        tape.backward(loss).unwrap();
        assert!(tape.grad(v).is_none());
        assert!(tape.grad(u).is_some());
    }
}
