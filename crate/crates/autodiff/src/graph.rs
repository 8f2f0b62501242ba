//! Reverse-mode differentiation on an append-only tape.
//!
//! Every primitive evaluates eagerly and records itself; the tape order is a
//! topological order, so `backward` is a single reverse sweep.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Additive sentinel applied to masked logits before normalization.
pub const MASK_NEG: f64 = -1e30;

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleRows(Var, Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    MaskedSoftmax(Var),
    MaskedLogSoftmax(Var, Vec<bool>),
    LeakyRelu(Var, f64),
    Elu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    Reshape(Var),
    Minimum(Var, Var),
    Clamp(Var, f64, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Computation tape. Confined to one thread; build a fresh one per pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{what}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Records a trainable parameter; its gradient is reported under `id`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    fn zip(&self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(x, y, what);
        Tensor::new(
            x.rows(),
            x.cols(),
            x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, "add", |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, "sub", |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, "mul", |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip(a, b, "minimum", f64::min);
        self.push(v, Op::Minimum(a, b))
    }

    /// Adds the `1 x d` row `bias` to every row of `a`; the only broadcast.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        assert!(
            b.rows() == 1 && b.cols() == x.cols(),
            "add_bias: bias {:?} does not fit {:?}",
            b.shape(),
            x.shape()
        );
        let mut v = x.clone();
        for r in 0..v.rows() {
            for (o, &bb) in v.row_mut(r).iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
        self.push(v, Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    /// Multiplies row `i` of `a` by `s[i]`, where `s` is a column.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let (x, w) = (self.value(a), self.value(s));
        assert!(
            w.cols() == 1 && w.rows() == x.rows(),
            "scale_rows: weights {:?} do not fit {:?}",
            w.shape(),
            x.shape()
        );
        let mut v = x.clone();
        for r in 0..v.rows() {
            let c = w.get(r, 0);
            v.row_mut(r).iter_mut().for_each(|o| *o *= c);
        }
        self.push(v, Op::ScaleRows(a, s))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let t = self.value(p);
            assert_eq!(t.rows(), rows, "concat_cols: row count mismatch");
            for r in 0..rows {
                v.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
            }
            off += t.cols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let x = self.value(a);
        assert!(start < end && end <= x.cols(), "slice_cols out of range");
        let mut v = Tensor::zeros(x.rows(), end - start);
        for r in 0..x.rows() {
            v.row_mut(r).copy_from_slice(&x.row(r)[start..end]);
        }
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(!x.is_empty(), "mean of an empty tensor");
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Sum of each row, as a column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Tensor::column((0..x.rows()).map(|r| x.row(r).iter().sum()).collect());
        self.push(v, Op::RowSum(a))
    }

    fn masked_rows(&self, a: Var, mask: &[bool], what: &str) -> Tensor {
        let x = self.value(a);
        assert_eq!(mask.len(), x.len(), "{what}: mask length");
        let mut z = x.clone();
        for r in 0..z.rows() {
            let cols = z.cols();
            let m = &mask[r * cols..(r + 1) * cols];
            assert!(m.iter().any(|&b| b), "{what}: row {r} is fully masked");
            for (v, &keep) in z.row_mut(r).iter_mut().zip(m) {
                if !keep {
                    *v += MASK_NEG;
                }
            }
        }
        z
    }

    /// Row-wise softmax over the entries where `mask` is true; masked entries
    /// come out as exactly 0. A fully masked row is a contract fault.
    pub fn masked_softmax(&mut self, a: Var, mask: &[bool]) -> Var {
        let mut z = self.masked_rows(a, mask, "masked_softmax");
        for r in 0..z.rows() {
            let row = z.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        self.push(z, Op::MaskedSoftmax(a))
    }

    /// Row-wise log-softmax over unmasked entries; masked entries are 0 and
    /// carry no gradient.
    pub fn masked_log_softmax(&mut self, a: Var, mask: &[bool]) -> Var {
        let mut z = self.masked_rows(a, mask, "masked_log_softmax");
        let cols = z.cols();
        for r in 0..z.rows() {
            let m = &mask[r * cols..(r + 1) * cols];
            let row = z.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (v, &keep) in row.iter_mut().zip(m) {
                *v = if keep { *v - lse } else { 0.0 };
            }
        }
        self.push(z, Op::MaskedLogSoftmax(a, mask.to_vec()))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    /// Exponential linear unit with unit scale.
    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.push(v, Op::Elu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clamp bounds reversed");
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Output row `r` is input row `index[r]`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Var {
        let x = self.value(a);
        let mut v = Tensor::zeros(index.len(), x.cols());
        for (r, &i) in index.iter().enumerate() {
            assert!(i < x.rows(), "gather_rows: index {i} out of {} rows", x.rows());
            v.row_mut(r).copy_from_slice(x.row(i));
        }
        self.push(v, Op::GatherRows(a, index.to_vec()))
    }

    /// Output row `i` is the sum of input rows `r` with `index[r] == i`.
    pub fn scatter_add_rows(&mut self, a: Var, index: &[usize], out_rows: usize) -> Var {
        let x = self.value(a);
        assert_eq!(index.len(), x.rows(), "scatter_add_rows: one index per row");
        let mut v = Tensor::zeros(out_rows, x.cols());
        for (r, &i) in index.iter().enumerate() {
            assert!(i < out_rows, "scatter_add_rows: index {i} out of {out_rows} rows");
            for (o, &s) in v.row_mut(i).iter_mut().zip(x.row(r)) {
                *o += s;
            }
        }
        self.push(v, Op::ScatterAddRows(a, index.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).clone().reshaped(rows, cols);
        self.push(v, Op::Reshape(a))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Adjoints {
        let lv = self.value(loss);
        assert_eq!(lv.shape(), [1, 1], "backward needs a scalar loss, got {:?}", lv.shape());
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let keep = matches!(node.op, Op::Constant | Op::Param(_));
            let g = if keep {
                continue;
            } else {
                match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            self.propagate(node, g, &mut grads);
        }
        Adjoints { grads, params: self.param_map() }
    }

    fn param_map(&self) -> Vec<(usize, ParamId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((i, id)),
                _ => None,
            })
            .collect()
    }

    fn propagate(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, t: Tensor| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let elementwise = |x: &Tensor, f: &dyn Fn(usize, f64) -> f64| {
            Tensor::new(
                x.rows(),
                x.cols(),
                g.data().iter().enumerate().map(|(i, &gi)| f(i, gi)).collect(),
            )
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_nt(val(*b)));
                acc(*b, val(*a).matmul_tn(&g));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                acc(*a, elementwise(x, &|i, gi| gi * y.data()[i]));
                acc(*b, elementwise(y, &|i, gi| gi * x.data()[i]));
            }
            Op::Minimum(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let pick_a = |i: usize| x.data()[i] <= y.data()[i];
                acc(*a, elementwise(x, &|i, gi| if pick_a(i) { gi } else { 0.0 }));
                acc(*b, elementwise(y, &|i, gi| if pick_a(i) { 0.0 } else { gi }));
            }
            Op::AddBias(a, bias) => {
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, &x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*bias, gb);
                acc(*a, g);
            }
            Op::Scale(a, c) => acc(*a, g.map(|x| c * x)),
            Op::AddScalar(a) => acc(*a, g),
            Op::ScaleRows(a, s) => {
                let (x, w) = (val(*a), val(*s));
                let mut ga = g.clone();
                let mut gs = Tensor::zeros(w.rows(), 1);
                for r in 0..g.rows() {
                    let c = w.get(r, 0);
                    ga.row_mut(r).iter_mut().for_each(|o| *o *= c);
                    gs.set(r, 0, g.row(r).iter().zip(x.row(r)).map(|(p, q)| p * q).sum());
                }
                acc(*a, ga);
                acc(*s, gs);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut gp = Tensor::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                    }
                    off += w;
                    acc(p, gp);
                }
            }
            Op::SliceCols(a, start) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, ga);
            }
            Op::Sum(a) => {
                let x = val(*a);
                acc(*a, Tensor::full(x.rows(), x.cols(), g.item()));
            }
            Op::Mean(a) => {
                let x = val(*a);
                acc(*a, Tensor::full(x.rows(), x.cols(), g.item() / x.len() as f64));
            }
            Op::RowSum(a) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let gr = g.get(r, 0);
                    ga.row_mut(r).iter_mut().for_each(|o| *o = gr);
                }
                acc(*a, ga);
            }
            Op::MaskedSoftmax(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(p, q)| p * q).sum();
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(y.row(r)).zip(g.row(r)) {
                        *o = yi * (gi - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::MaskedLogSoftmax(a, mask) => {
                let y = &node.value;
                let cols = y.cols();
                let mut ga = Tensor::zeros(y.rows(), cols);
                for r in 0..y.rows() {
                    let m = &mask[r * cols..(r + 1) * cols];
                    let total: f64 = g.row(r).iter().zip(m).filter(|(_, &k)| k).map(|(x, _)| x).sum();
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        if m[c] {
                            *o = g.get(r, c) - y.get(r, c).exp() * total;
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let x = val(*a);
                acc(*a, elementwise(x, &|i, gi| if x.data()[i] > 0.0 { gi } else { slope * gi }));
            }
            Op::Elu(a) => {
                let x = val(*a);
                let y = &node.value;
                acc(*a, elementwise(x, &|i, gi| if x.data()[i] > 0.0 { gi } else { gi * (y.data()[i] + 1.0) }));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, elementwise(y, &|i, gi| gi * (1.0 - y.data()[i] * y.data()[i])));
            }
            Op::Exp(a) => {
                let y = &node.value;
                acc(*a, elementwise(y, &|i, gi| gi * y.data()[i]));
            }
            Op::Log(a) => {
                let x = val(*a);
                acc(*a, elementwise(x, &|i, gi| gi / x.data()[i]));
            }
            Op::Square(a) => {
                let x = val(*a);
                acc(*a, elementwise(x, &|i, gi| 2.0 * gi * x.data()[i]));
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a);
                acc(
                    *a,
                    elementwise(x, &|i, gi| {
                        let v = x.data()[i];
                        if v > *lo && v < *hi {
                            gi
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::GatherRows(a, index) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for (r, &i) in index.iter().enumerate() {
                    for (o, &s) in ga.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += s;
                    }
                }
                acc(*a, ga);
            }
            Op::ScatterAddRows(a, index) => {
                let x = val(*a);
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for (r, &i) in index.iter().enumerate() {
                    ga.row_mut(r).copy_from_slice(g.row(i));
                }
                acc(*a, ga);
            }
            Op::Reshape(a) => {
                let x = val(*a);
                acc(*a, g.reshaped(x.rows(), x.cols()));
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`]. Only leaves (constants and
/// parameters) keep their adjoint.
#[derive(Debug)]
pub struct Adjoints {
    grads: Vec<Option<Tensor>>,
    params: Vec<(usize, ParamId)>,
}

impl Adjoints {
    /// Gradient of the loss with respect to a leaf; `None` if unreachable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient per parameter of `store`, zeros for parameters not used.
    /// A parameter recorded several times receives the sum.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                out[id.index()].add_assign(g);
            }
        }
        out
    }
}
