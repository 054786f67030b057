//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! Values are computed eagerly when an op is recorded; `backward` walks the
//! tape once in reverse. Scalar losses with hand-derived gradients enter the
//! tape through [`Tape::scalar`], which stores the local gradient of the loss
//! with respect to each input.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

use crate::data::InteractionGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// Adds a `1 × n` row to every row.
    AddRow(Var, Var),
    Tanh(Var),
    SoftmaxRows(Var, f64),
    NormalizeRows(Var, Vec<f64>),
    Gather(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Propagate(Var, Arc<InteractionGraph>),
    SumSquares(Var),
    Scalar(Vec<(Var, Array2<f64>)>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Rows with norm below this are treated as zero by `normalize_rows`.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Trainable input.
    pub fn param(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::MatMulT(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let g = self.any_grad(&[a, b]);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let g = self.any_grad(&[a]);
        self.push(v, Op::Scale(a, k), g)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let g = self.any_grad(&[a, row]);
        self.push(v, Op::AddRow(a, row), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Tanh(a), g)
    }

    /// Row softmax of `a / temperature`, max-shifted.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Var {
        let v = softmax_rows(self.value(a), temperature);
        let g = self.any_grad(&[a]);
        self.push(v, Op::SoftmaxRows(a, temperature), g)
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let norms: Vec<f64> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        let mut v = x.clone();
        for (mut row, &n) in v.rows_mut().into_iter().zip(&norms) {
            if n > NORM_FLOOR {
                row /= n;
            } else {
                row.fill(0.0);
            }
        }
        let g = self.any_grad(&[a]);
        self.push(v, Op::NormalizeRows(a, norms), g)
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), rows);
        let g = self.any_grad(&[a]);
        self.push(v, Op::Gather(a, rows.to_vec()), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows: widths differ");
        let g = self.any_grad(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), g)
    }

    /// One symmetric-normalized propagation step over stacked (users; items).
    pub fn propagate(&mut self, a: Var, graph: &Arc<InteractionGraph>) -> Var {
        let v = graph.step_stacked(self.value(a).view());
        let g = self.any_grad(&[a]);
        self.push(v, Op::Propagate(a, Arc::clone(graph)), g)
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Array2::from_elem((1, 1), x.iter().map(|t| t * t).sum());
        let g = self.any_grad(&[a]);
        self.push(v, Op::SumSquares(a), g)
    }

    /// Records a scalar whose gradient with respect to each input is already
    /// known. `local[i]` must have the shape of `inputs[i]`.
    pub fn scalar(&mut self, value: f64, inputs: &[Var], local: Vec<Array2<f64>>) -> Var {
        assert_eq!(inputs.len(), local.len());
        for (v, g) in inputs.iter().zip(&local) {
            assert_eq!(self.value(*v).dim(), g.dim(), "scalar: gradient shape");
        }
        let g = self.any_grad(inputs);
        let op = Op::Scalar(inputs.iter().copied().zip(local).collect());
        self.push(Array2::from_elem((1, 1), value), op, g)
    }

    /// Sum of scalars, each with its weight.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let value = terms.iter().map(|&(v, w)| w * self.scalar_value(v)).sum();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let local = terms
            .iter()
            .map(|&(_, w)| Array2::from_elem((1, 1), w))
            .collect();
        self.scalar(value, &inputs, local)
    }

    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones(self.value(root).dim()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, g, &mut grads);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, delta: Array2<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &delta,
            slot => *slot = Some(delta),
        }
    }

    fn backprop_node(&self, node: &Node, g: Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.dot(&self.value(*b).t());
                let db = self.value(*a).t().dot(&g);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::MatMulT(a, b) => {
                let da = g.dot(self.value(*b));
                let db = g.t().dot(self.value(*a));
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, -&g);
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let da = &g * self.value(*b);
                let db = &g * self.value(*a);
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, g * *k),
            Op::AddRow(a, row) => {
                let drow = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                self.accumulate(grads, *row, drow);
                self.accumulate(grads, *a, g);
            }
            Op::Tanh(a) => {
                let da = &g * &node.value.mapv(|y| 1.0 - y * y);
                self.accumulate(grads, *a, da);
            }
            Op::SoftmaxRows(a, t) => {
                let y = &node.value;
                let mut da = Array2::zeros(y.dim());
                for ((mut out, yr), gr) in da.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                    let inner = yr.dot(&gr);
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - inner) / t;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::NormalizeRows(a, norms) => {
                let y = &node.value;
                let mut da = Array2::zeros(y.dim());
                for (((mut out, yr), gr), &n) in da
                    .rows_mut()
                    .into_iter()
                    .zip(y.rows())
                    .zip(g.rows())
                    .zip(norms)
                {
                    if n <= NORM_FLOOR {
                        continue;
                    }
                    let inner = yr.dot(&gr);
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * inner) / n;
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::Gather(a, rows) => {
                let mut da = Array2::zeros(self.value(*a).dim());
                for (gr, &r) in g.rows().into_iter().zip(rows) {
                    let mut target = da.row_mut(r);
                    target += &gr;
                }
                self.accumulate(grads, *a, da);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.value(p).nrows();
                    let piece = g.slice(s![start..start + n, ..]).to_owned();
                    self.accumulate(grads, p, piece);
                    start += n;
                }
            }
            Op::Propagate(a, graph) => {
                let da = graph.step_stacked(g.view());
                self.accumulate(grads, *a, da);
            }
            Op::SumSquares(a) => {
                let da = self.value(*a) * (2.0 * g[[0, 0]]);
                self.accumulate(grads, *a, da);
            }
            Op::Scalar(inputs) => {
                let up = g[[0, 0]];
                for (v, local) in inputs {
                    self.accumulate(grads, *v, local * up);
                }
            }
        }
    }
}

/// Row softmax of `x / temperature` with max subtraction.
pub fn softmax_rows(x: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = x / temperature;
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` around every entry of `x`.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-5;
        let mut out = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut p = x.clone();
            let mut m = x.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            out.as_slice_mut().unwrap()[idx] = (f(&p) - f(&m)) / (2.0 * h);
        }
        out
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{a}\nvs\n{b}");
        }
    }

    // A small composite exercising every differentiable op.
    fn composite(x: &Array2<f64>, record: bool) -> (f64, Option<Array2<f64>>) {
        let mut t = Tape::new();
        let xv = t.param(x.clone());
        let w = t.constant(array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.6]]);
        let bias = t.constant(array![[0.05, -0.1, 0.2]]);
        let h = t.matmul(xv, w);
        let h = t.add_row(h, bias);
        let h = t.tanh(h);
        let n = t.normalize_rows(h);
        let sm = t.softmax_rows(n, 0.7);
        let g = t.gather_rows(sm, &[2, 0, 0]);
        let c = t.concat_rows(&[g, n]);
        let k = t.matmul_t(c, n);
        let sq = t.sum_squares(k);
        let e = t.mul(n, h);
        let e = t.sub(e, n);
        let e = t.scale(e, 1.5);
        let e = t.add(e, h);
        let se = t.sum_squares(e);
        let total = t.weighted_sum(&[(sq, 1.0), (se, 0.25)]);
        let grad = record.then(|| t.backward(total).get(xv).unwrap().clone());
        (t.scalar_value(total), grad)
    }

    #[test]
    fn composite_matches_finite_differences() {
        let x = array![[0.2, -0.4], [1.1, 0.3], [-0.7, 0.9]];
        let (_, g) = composite(&x, true);
        let fd = numeric_grad(&x, |p| composite(p, false).0);
        assert_close(&g.unwrap(), &fd, 1e-7);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let c = t.constant(array![[1.0, 2.0]]);
        let p = t.param(array![[3.0, 4.0]]);
        let m = t.mul(c, p);
        let s = t.sum_squares(m);
        let g = t.backward(s);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &array![[2.0 * 3.0 * 1.0, 2.0 * 4.0 * 4.0]]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let y = softmax_rows(&array![[1000.0, 0.0, -1000.0], [1.0, 1.0, 1.0]], 1.0);
        for r in y.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }
}
