use super::kernels::gemm;
use super::{DiffError, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Square(Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    BatchedMatMul { a: Var, b: Var, trans_b: bool },
    SoftmaxRows(Var),
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    Reshape(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Ordered record of the forward computation.
///
/// Every operation appends one node; [`Tape::backward`] replays the nodes in
/// exact reverse order. Leaves created with [`Tape::param`] receive
/// gradients, leaves created with [`Tape::constant`] do not.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a parameter leaf, `None` if `var` is not a parameter.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter leaf; panics when `var` was not created with
    /// [`Tape::param`] on the differentiated tape.
    pub fn wrt(&self, var: Var) -> &Tensor {
        self.get(var).expect("gradient requested for a non-parameter variable")
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), DiffError> {
    if a.shape() != b.shape() {
        return Err(DiffError::dimension(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, tracked: bool) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, a: Var, value: Tensor, op: Op) -> Result<Var, DiffError> {
        let tracked = self.tracked(a);
        self.push(name, value, op, tracked)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, value: Tensor, op: Op) -> Result<Var, DiffError> {
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(name, value, op, tracked)
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Result<Var, DiffError> {
        self.push("param", value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, DiffError> {
        self.push("constant", value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("add", x, y)?;
        let out = zip_map(x, y, |p, q| p + q);
        self.binary("add", a, b, out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("sub", x, y)?;
        let out = zip_map(x, y, |p, q| p - q);
        self.binary("sub", a, b, out, Op::Sub(a, b))
    }

    /// Hadamard (elementwise) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape("hadamard", x, y)?;
        let out = zip_map(x, y, |p, q| p * q);
        self.binary("hadamard", a, b, out, Op::Mul(a, b))
    }

    /// Adds the vector `b` to every row of `a` (length of `b` == last dim of `a`).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        let n = x.cols();
        if y.len() != n {
            return Err(DiffError::dimension("add_row", x.shape(), y.shape()));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, bias) in row.iter_mut().zip(y.data()) {
                *v += bias;
            }
        }
        self.binary("add_row", a, b, out, Op::AddRow(a, b))
    }

    /// Multiplies every row of `a` elementwise by the vector `b`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (x, y) = (self.value(a), self.value(b));
        let n = x.cols();
        if y.len() != n {
            return Err(DiffError::dimension("mul_row", x.shape(), y.shape()));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (v, gain) in row.iter_mut().zip(y.data()) {
                *v *= gain;
            }
        }
        self.binary("mul_row", a, b, out, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, DiffError> {
        let out = self.value(a).map(|v| v * c);
        self.unary("scale", a, out, Op::Scale(a, c))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(sigmoid);
        self.unary("sigmoid", a, out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(f64::tanh);
        self.unary("tanh", a, out, Op::Tanh(a))
    }

    /// Rectified linear unit; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.unary("relu", a, out, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).map(|v| v * v);
        self.unary("square", a, out, Op::Square(a))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, DiffError> {
        let name = if trans_b { "matmul_nt" } else { "matmul" };
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != 2 || y.shape().len() != 2 {
            return Err(DiffError::dimension(name, x.shape(), y.shape()));
        }
        let (m, k) = (x.shape()[0], x.shape()[1]);
        let (kb, n) = if trans_b { (y.shape()[1], y.shape()[0]) } else { (y.shape()[0], y.shape()[1]) };
        if k != kb {
            return Err(DiffError::dimension(name, x.shape(), y.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, x.data(), false, y.data(), trans_b, 0.0, &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        self.binary(name, a, b, out, Op::MatMul { a, b, trans_b })
    }

    /// Matrix product `a[m x k] * b[k x p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product with the right operand transposed: `a[m x k] * b[p x k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.matmul_impl(a, b, true)
    }

    fn batched_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, DiffError> {
        let name = if trans_b { "batched_matmul_nt" } else { "batched_matmul" };
        let (x, y) = (self.value(a), self.value(b));
        if x.shape().len() != 3 || y.shape().len() != 3 || x.shape()[0] != y.shape()[0] {
            return Err(DiffError::dimension(name, x.shape(), y.shape()));
        }
        let (bs, m, k) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kb, n) = if trans_b { (y.shape()[2], y.shape()[1]) } else { (y.shape()[1], y.shape()[2]) };
        if k != kb {
            return Err(DiffError::dimension(name, x.shape(), y.shape()));
        }
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            gemm(
                m,
                k,
                n,
                &x.data()[i * m * k..(i + 1) * m * k],
                false,
                &y.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let out = Tensor::new(vec![bs, m, n], out)?;
        self.binary(name, a, b, out, Op::BatchedMatMul { a, b, trans_b })
    }

    /// Batched product `a[B x m x k] * b[B x k x p]`.
    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.batched_impl(a, b, false)
    }

    /// Batched product `a[B x m x k] * b[B x p x k]^T`.
    pub fn batched_matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.batched_impl(a, b, true)
    }

    /// Softmax along the last dimension, with per-row max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let mut out = self.value(a).clone();
        let n = out.cols();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.unary("softmax_rows", a, out, Op::SoftmaxRows(a))
    }

    /// Normalizes each row (last dimension) to zero mean and unit variance.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var, DiffError> {
        let mut out = self.value(a).clone();
        let n = out.cols();
        let mut inv_std = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv_std.push(s);
        }
        self.unary("layer_norm_rows", a, out, Op::LayerNormRows { x: a, inv_std })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DiffError> {
        let x = self.value(a);
        let out = x.reshape(shape).map_err(|_| DiffError::dimension("reshape", x.shape(), shape))?;
        self.unary("reshape", a, out, Op::Reshape(a))
    }

    /// Columns `start..start + width` of `a` viewed as a `rows x cols` matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, DiffError> {
        let x = self.value(a);
        let n = x.cols();
        if width == 0 || start + width > n {
            return Err(DiffError::Contract(format!(
                "slice_cols: columns {start}..{} out of range for width {n}",
                start + width
            )));
        }
        let data: Vec<f64> = x.data().chunks(n).flat_map(|r| r[start..start + width].iter().copied()).collect();
        let out = Tensor::new(vec![x.rows(), width], data)?;
        self.unary("slice_cols", a, out, Op::SliceCols { x: a, start })
    }

    /// Concatenates 2-D operands with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        let first = parts.first().ok_or_else(|| DiffError::Contract("concat_cols of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(DiffError::dimension("concat_cols", self.value(*first).shape(), t.shape()));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), tracked)
    }

    /// Gathers the given rows of `a` (viewed as `rows x cols`).
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, DiffError> {
        let x = self.value(a);
        let n = x.cols();
        if let Some(&bad) = rows.iter().find(|&&r| r >= x.rows()) {
            return Err(DiffError::Contract(format!("select_rows: row {bad} out of range for {}", x.rows())));
        }
        if rows.is_empty() {
            return Err(DiffError::Contract("select_rows: empty selection".into()));
        }
        let data: Vec<f64> = rows.iter().flat_map(|&r| x.data()[r * n..(r + 1) * n].iter().copied()).collect();
        let out = Tensor::new(vec![rows.len(), n], data)?;
        self.unary("select_rows", a, out, Op::SelectRows { x: a, rows: rows.to_vec() })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = Tensor::scalar(self.value(a).sum());
        self.unary("sum", a, out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = self.value(a);
        let out = Tensor::scalar(x.sum() / x.len() as f64);
        self.unary("mean", a, out, Op::Mean(a))
    }

    /// Column sums: reduces all leading dimensions, keeping the last.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let x = self.value(a);
        let n = x.cols();
        let mut acc = vec![0.0; n];
        for row in x.data().chunks(n) {
            for (s, v) in acc.iter_mut().zip(row) {
                *s += v;
            }
        }
        self.unary("sum_rows", a, Tensor::vector(acc), Op::SumRows(a))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Visits nodes strictly in reverse recording order. Parameters that the
    /// loss does not depend on receive a zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(DiffError::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, g, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if i > loss.0 {
                grads[i] = None;
            }
            if node.tracked && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.map(|v| -v));
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let ga = zip_map(&g, self.value(*b), |p, q| p * q);
                let gb = zip_map(&g, self.value(*a), |p, q| p * q);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddRow(a, b) => {
                let bt = self.value(*b);
                let n = bt.len();
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (s, v) in gb.iter_mut().zip(row) {
                        *s += v;
                    }
                }
                self.accumulate(grads, *b, Tensor::new(bt.shape().to_vec(), gb).expect("bias shape"));
                self.accumulate(grads, *a, g);
            }
            Op::MulRow(a, b) => {
                let (x, bt) = (self.value(*a), self.value(*b));
                let n = bt.len();
                let mut ga = g.clone();
                let mut gb = vec![0.0; n];
                for (grow, xrow) in ga.data_mut().chunks_mut(n).zip(x.data().chunks(n)) {
                    for j in 0..n {
                        gb[j] += grow[j] * xrow[j];
                        grow[j] *= bt.data()[j];
                    }
                }
                self.accumulate(grads, *b, Tensor::new(bt.shape().to_vec(), gb).expect("gain shape"));
                self.accumulate(grads, *a, ga);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|v| v * c)),
            Op::Sigmoid(a) => self.accumulate(grads, *a, zip_map(&g, out, |gv, y| gv * y * (1.0 - y))),
            Op::Tanh(a) => self.accumulate(grads, *a, zip_map(&g, out, |gv, y| gv * (1.0 - y * y))),
            Op::Relu(a) => {
                let ga = zip_map(&g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Square(a) => self.accumulate(grads, *a, zip_map(&g, self.value(*a), |gv, x| 2.0 * x * gv)),
            Op::MatMul { a, b, trans_b } => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (m, k) = (x.shape()[0], x.shape()[1]);
                let n = out.shape()[1];
                if self.tracked(*a) {
                    // dA = G * op(B)^T
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, y.data(), !*trans_b, 0.0, &mut ga);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga).expect("shape"));
                }
                if self.tracked(*b) {
                    let mut gb = vec![0.0; k * n];
                    if *trans_b {
                        // dB[n x k] = G^T * A
                        gemm(n, m, k, g.data(), true, x.data(), false, 0.0, &mut gb);
                    } else {
                        // dB[k x n] = A^T * G
                        gemm(k, m, n, x.data(), true, g.data(), false, 0.0, &mut gb);
                    }
                    self.accumulate(grads, *b, Tensor::new(y.shape().to_vec(), gb).expect("shape"));
                }
            }
            Op::BatchedMatMul { a, b, trans_b } => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let n = out.shape()[2];
                if self.tracked(*a) {
                    let mut ga = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &g.data()[i * m * n..(i + 1) * m * n],
                            false,
                            &y.data()[i * k * n..(i + 1) * k * n],
                            !*trans_b,
                            0.0,
                            &mut ga[i * m * k..(i + 1) * m * k],
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), ga).expect("shape"));
                }
                if self.tracked(*b) {
                    let mut gb = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        let gi = &g.data()[i * m * n..(i + 1) * m * n];
                        let xi = &x.data()[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, gi, true, xi, false, 0.0, dst);
                        } else {
                            gemm(k, m, n, xi, true, gi, false, 0.0, dst);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(y.shape().to_vec(), gb).expect("shape"));
                }
            }
            Op::SoftmaxRows(a) => {
                let n = out.cols();
                let mut ga = g;
                for (grow, yrow) in ga.data_mut().chunks_mut(n).zip(out.data().chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                    for (gv, y) in grow.iter_mut().zip(yrow) {
                        *gv = y * (*gv - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNormRows { x, inv_std } => {
                let n = out.cols();
                let mut gx = g;
                for ((grow, yrow), s) in gx.data_mut().chunks_mut(n).zip(out.data().chunks(n)).zip(inv_std) {
                    let mean_g = grow.iter().sum::<f64>() / n as f64;
                    let mean_gy = grow.iter().zip(yrow).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                    for (gv, y) in grow.iter_mut().zip(yrow) {
                        *gv = s * (*gv - mean_g - y * mean_gy);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::new(shape, g.into_data()).expect("reshape"));
            }
            Op::SliceCols { x, start } => {
                let xt = self.value(*x);
                let (n, w) = (xt.cols(), out.cols());
                let mut gx = Tensor::zeros(xt.shape());
                for (dst, src) in gx.data_mut().chunks_mut(n).zip(g.data().chunks(w)) {
                    dst[*start..*start + w].copy_from_slice(src);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let pt = self.value(p);
                    let w = pt.cols();
                    if self.tracked(p) {
                        let data: Vec<f64> =
                            g.data().chunks(total).flat_map(|r| r[offset..offset + w].iter().copied()).collect();
                        self.accumulate(grads, p, Tensor::new(pt.shape().to_vec(), data).expect("shape"));
                    }
                    offset += w;
                }
            }
            Op::SelectRows { x, rows } => {
                let xt = self.value(*x);
                let n = xt.cols();
                let mut gx = Tensor::zeros(xt.shape());
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        gx.data_mut()[r * n + j] += g.data()[i * n + j];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::full(&shape, g.item()));
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let gv = g.item() / x.len() as f64;
                self.accumulate(grads, *a, Tensor::full(x.shape(), gv));
            }
            Op::SumRows(a) => {
                let x = self.value(*a);
                let data: Vec<f64> = (0..x.rows()).flat_map(|_| g.data().iter().copied()).collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data).expect("shape"));
            }
        }
    }
}
