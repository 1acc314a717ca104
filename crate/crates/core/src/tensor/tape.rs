use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Abs(Var),
    Sqrt(Var),
    L2Norm(Var),
    Relu(Var),
    Gelu(Var),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    GatherRows(Var, Vec<usize>),
    WindowMeanPool(Var, usize),
    Cosine {
        a: Var,
        b: Var,
        a_norms: Vec<f64>,
        b_norms: Vec<f64>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in topological order (inputs always precede outputs).
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` does not require grad
    /// or is not reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`Gradients::get`] but yields zeros of `shape` for unreachable leaves.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn as_matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: true,
        }
    }

    /// Disables the per-op NaN/Inf scan.
    pub fn without_checks() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn map(&mut self, name: &'static str, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(name, value, op, &[x])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix_dims(self.value(a), "matmul")?;
        let (k2, n) = as_matrix_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(
            "matmul",
            Tensor::from_parts(vec![m, n], data),
            Op::MatMul(a, b),
            &[a, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// `x[r x c] + row[c]`, the one broadcast this tape supports.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = as_matrix_dims(self.value(x), "add_row")?;
        if self.value(row).len() != c {
            return Err(Error::dim(
                "add_row",
                format!("row of {} for {c} columns", self.value(row).len()),
            ));
        }
        let (tx, tr) = (self.value(x), self.value(row).data());
        let mut data = tx.data().to_vec();
        for i in 0..r {
            for (o, b) in data[i * c..(i + 1) * c].iter_mut().zip(tr) {
                *o += b;
            }
        }
        self.push(
            "add_row",
            Tensor::from_parts(vec![r, c], data),
            Op::AddRow(x, row),
            &[x, row],
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map("scale", x, Op::Scale(x, s), |v| v * s)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::contract("mean of empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.map("abs", x, Op::Abs(x), f64::abs)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.map("sqrt", x, Op::Sqrt(x), f64::sqrt)
    }

    /// Euclidean norm of all entries, as a scalar.
    pub fn l2_norm(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).l2_norm();
        self.push("l2_norm", Tensor::scalar(n), Op::L2Norm(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, Op::Relu(x), |v| v.max(0.0))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map("gelu", x, Op::Gelu(x), gelu_scalar)
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let value = Tensor::concat_rows(&tensors)?;
        self.push("concat", value, Op::Concat(parts.to_vec()), parts)
    }

    /// Gathers entries of the flattened tensor at `indices` into a vector.
    /// Indices may repeat; backward scatter-adds.
    pub fn gather(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(Error::dim(
                "gather",
                format!("index {bad} out of range for {} entries", t.len()),
            ));
        }
        let data: Vec<f64> = indices.iter().map(|&i| t.data()[i]).collect();
        let value = Tensor::from_parts(vec![data.len()], data);
        self.push("gather", value, Op::Gather(x, indices), &[x])
    }

    /// Gathers whole rows of a matrix.
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (r, c) = as_matrix_dims(self.value(x), "gather_rows")?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::dim(
                "gather_rows",
                format!("row {bad} out of range for {r} rows"),
            ));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in &rows {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::from_parts(vec![rows.len(), c], data);
        self.push("gather_rows", value, Op::GatherRows(x, rows), &[x])
    }

    /// Means over consecutive, non-overlapping windows of `window` rows.
    pub fn window_mean_pool(&mut self, x: Var, window: usize) -> Result<Var> {
        let (r, c) = as_matrix_dims(self.value(x), "window_mean_pool")?;
        if window == 0 || r % window != 0 {
            return Err(Error::dim(
                "window_mean_pool",
                format!("{r} rows not divisible by window {window}"),
            ));
        }
        let t = self.value(x);
        let groups = r / window;
        let inv = 1.0 / window as f64;
        let mut data = vec![0.0; groups * c];
        for g in 0..groups {
            let out = &mut data[g * c..(g + 1) * c];
            for i in g * window..(g + 1) * window {
                for (o, v) in out.iter_mut().zip(t.row(i)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o *= inv);
        }
        self.push(
            "window_mean_pool",
            Tensor::from_parts(vec![groups, c], data),
            Op::WindowMeanPool(x, window),
            &[x],
        )
    }

    /// Pairwise cosine similarities between the rows of `a[n x l]` and `b[m x l]`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, l) = as_matrix_dims(self.value(a), "cosine")?;
        let (m, l2) = as_matrix_dims(self.value(b), "cosine")?;
        if l != l2 {
            return Err(Error::dim("cosine", format!("width {l} vs {l2}")));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let norms = |t: &Tensor, rows: usize| -> Result<Vec<f64>> {
            (0..rows)
                .map(|i| {
                    let nrm = t.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if nrm > 0.0 {
                        Ok(nrm)
                    } else {
                        Err(Error::Degenerate {
                            op: "cosine",
                            detail: format!("row {i} has zero norm"),
                        })
                    }
                })
                .collect()
        };
        let a_norms = norms(ta, n)?;
        let b_norms = norms(tb, m)?;
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let ai = ta.row(i);
            for j in 0..m {
                let dot: f64 = ai.iter().zip(tb.row(j)).map(|(x, y)| x * y).sum();
                data[i * m + j] = dot / (a_norms[i] * b_norms[j]);
            }
        }
        self.push(
            "cosine",
            Tensor::from_parts(vec![n, m], data),
            Op::Cosine {
                a,
                b,
                a_norms,
                b_norms,
            },
            &[a, b],
        )
    }

    /// Cosine of a single row `a[1 x l]` (or `[l]`) against every row of `b[m x l]`; returns `[m]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let l = self.value(a).len();
        let a = if self.value(a).shape() == [1, l] {
            a
        } else {
            self.reshape(a, vec![1, l])?
        };
        let c = self.cosine(a, b)?;
        let m = self.value(c).len();
        self.reshape(c, vec![m])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut out = Vec::with_capacity(grads.len());
        for (i, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[i];
            out.push(match g {
                Some(g) if node.requires_grad => {
                    if self.check_finite && g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite { op: "backward" });
                    }
                    Some(Tensor::from_parts(node.value.shape().to_vec(), g))
                }
                _ => None,
            });
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, |da| {
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let bp = tb.row(p);
                                da[i * k + p] += gi.iter().zip(bp).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, |db| {
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = ta.data()[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for (o, gv) in db[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                    *o += aip * gv;
                                }
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| add_into(d, g));
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, |d| add_into(d, g));
                let c = self.value(*row).len();
                self.accumulate(grads, *row, |d| {
                    for chunk in g.chunks(c) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, g));
                self.accumulate(grads, *b, |d| {
                    d.iter_mut().zip(g).for_each(|(o, gv)| *o -= gv);
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((o, gv), bv) in d.iter_mut().zip(g).zip(tb) {
                        *o += gv * bv;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((o, gv), av) in d.iter_mut().zip(g).zip(ta) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale(x, s) => {
                self.accumulate(grads, *x, |d| {
                    d.iter_mut().zip(g).for_each(|(o, gv)| *o += gv * s);
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::Abs(x) => {
                let tx = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for ((o, gv), xv) in d.iter_mut().zip(g).zip(tx) {
                        // sign(0) = 0
                        if *xv > 0.0 {
                            *o += gv;
                        } else if *xv < 0.0 {
                            *o -= gv;
                        }
                    }
                });
            }
            Op::Sqrt(x) => {
                let out = node.value.data();
                self.accumulate(grads, *x, |d| {
                    for ((o, gv), y) in d.iter_mut().zip(g).zip(out) {
                        *o += gv * 0.5 / y;
                    }
                });
            }
            Op::L2Norm(x) => {
                let nrm = node.value.data()[0];
                let tx = self.value(*x).data();
                if nrm > 0.0 {
                    self.accumulate(grads, *x, |d| {
                        for (o, xv) in d.iter_mut().zip(tx) {
                            *o += g[0] * xv / nrm;
                        }
                    });
                }
            }
            Op::Relu(x) => {
                let tx = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for ((o, gv), xv) in d.iter_mut().zip(g).zip(tx) {
                        if *xv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for ((o, gv), xv) in d.iter_mut().zip(g).zip(tx) {
                        *o += gv * gelu_grad_scalar(*xv);
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    let slice = &g[offset..offset + len];
                    self.accumulate(grads, *p, |d| add_into(d, slice));
                    offset += len;
                }
            }
            Op::Gather(x, indices) => {
                self.accumulate(grads, *x, |d| {
                    for (gv, &i) in g.iter().zip(indices) {
                        d[i] += gv;
                    }
                });
            }
            Op::GatherRows(x, rows) => {
                let c = self.value(*x).cols();
                self.accumulate(grads, *x, |d| {
                    for (gr, &i) in g.chunks(c).zip(rows) {
                        add_into(&mut d[i * c..(i + 1) * c], gr);
                    }
                });
            }
            Op::WindowMeanPool(x, window) => {
                let c = self.value(*x).cols();
                let inv = 1.0 / *window as f64;
                self.accumulate(grads, *x, |d| {
                    for (row, chunk) in d.chunks_mut(c).enumerate() {
                        let gr = &g[(row / window) * c..(row / window + 1) * c];
                        for (o, gv) in chunk.iter_mut().zip(gr) {
                            *o += gv * inv;
                        }
                    }
                });
            }
            Op::Cosine {
                a,
                b,
                a_norms,
                b_norms,
            } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, l) = (ta.rows(), ta.cols());
                let m = tb.rows();
                let cos = node.value.data();
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, |d| {
                        for i in 0..n {
                            let ai = ta.row(i);
                            let di = &mut d[i * l..(i + 1) * l];
                            for j in 0..m {
                                let gij = g[i * m + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                let cij = cos[i * m + j];
                                let bj = tb.row(j);
                                let sb = gij / (a_norms[i] * b_norms[j]);
                                let sa = gij * cij / (a_norms[i] * a_norms[i]);
                                for q in 0..l {
                                    di[q] += sb * bj[q] - sa * ai[q];
                                }
                            }
                        }
                    });
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, |d| {
                        for j in 0..m {
                            let bj = tb.row(j);
                            let dj = &mut d[j * l..(j + 1) * l];
                            for i in 0..n {
                                let gij = g[i * m + j];
                                if gij == 0.0 {
                                    continue;
                                }
                                let cij = cos[i * m + j];
                                let ai = ta.row(i);
                                let sa = gij / (a_norms[i] * b_norms[j]);
                                let sb = gij * cij / (b_norms[j] * b_norms[j]);
                                for q in 0..l {
                                    dj[q] += sa * ai[q] - sb * bj[q];
                                }
                            }
                        }
                    });
                }
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |d| add_into(d, g));
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.requires_grad(v) {
            return;
        }
        let len = self.value(v).len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, s)| *o += s);
}
