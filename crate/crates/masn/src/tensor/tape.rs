//! Reverse-mode differentiation tape.
//!
//! Operations execute eagerly and are recorded as [`Op`] nodes. [`Tape::backward`]
//! replays the record in reverse, accumulating vector-Jacobian products into a
//! [`Gradients`] table indexed by [`TensorId`]. Tensors on the tape are immutable
//! once created; a tape is confined to a single forward/backward pass.

use super::{Tensor, LAYER_NORM_EPS};
use crate::error::{MasnError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// out = a @ b for 2-d operands.
    MatMul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    /// Hadamard product.
    Mul { a: TensorId, b: TensorId },
    /// out[r, c] = x[r, c] + row[c].
    AddRow { x: TensorId, row: TensorId },
    /// Tile a vector into `rows` identical rows.
    BroadcastRow { row: TensorId },
    Scale { x: TensorId, c: f64 },
    AddConst { x: TensorId },
    Relu { x: TensorId },
    Sigmoid { x: TensorId },
    Tanh { x: TensorId },
    /// Numerically stable softmax along `axis`.
    Softmax { x: TensorId, axis: usize },
    /// Layer normalization over the last dim, with learned gain and bias.
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId },
    ConcatRows { parts: Vec<TensorId> },
    ConcatCols { parts: Vec<TensorId> },
    SliceCols { x: TensorId, start: usize, len: usize },
    Reshape { x: TensorId },
    SumAll { x: TensorId },
    /// Column sums: collapse over rows, yielding a vector of length `cols`.
    SumRows { x: TensorId },
    /// Row lookup: out row i = table row ids[i]. Backward scatter-adds.
    GatherRows { table: TensorId, ids: Vec<usize> },
    /// Extract one element as a scalar node.
    Index { x: TensorId, i: usize },
    /// out = x * s where s is a scalar node on the tape.
    MulScalar { x: TensorId, s: TensorId },
    /// Fused stable cross-entropy of a logit vector against a class index.
    CrossEntropy { logits: TensorId, target: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Per-pass gradient table produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }
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

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<TensorId> {
        value.ensure_finite("tape operation output")?;
        self.nodes.push(Node { value, op });
        Ok(TensorId(self.nodes.len() - 1))
    }

    /// Record an input or parameter value.
    pub fn leaf(&mut self, value: Tensor) -> Result<TensorId> {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.is_matrix() || !bv.is_matrix() || av.cols() != bv.rows() {
            return Err(MasnError::Shape(format!(
                "matmul {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = self.value(x);
        if !xv.is_matrix() {
            return Err(MasnError::Shape(format!("transpose of {:?}", xv.shape())));
        }
        let (r, c) = (xv.rows(), xv.cols());
        let out = transpose_raw(xv.data(), r, c);
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose { x })
    }

    fn binary_same_shape(
        &mut self,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
        name: &str,
    ) -> Result<TensorId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(MasnError::Shape(format!(
                "{name} {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(Tensor::from_parts(av.shape().to_vec(), data), op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, |x, y| x + y, Op::Add { a, b }, "add")
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, |x, y| x - y, Op::Sub { a, b }, "sub")
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape(a, b, |x, y| x * y, Op::Mul { a, b }, "mul")
    }

    pub fn add_row(&mut self, x: TensorId, row: TensorId) -> Result<TensorId> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.numel() != xv.cols() {
            return Err(MasnError::Shape(format!(
                "add_row {:?} + row {:?}",
                xv.shape(),
                rv.shape()
            )));
        }
        let cols = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + rv.data()[i % cols])
            .collect();
        self.push(Tensor::from_parts(xv.shape().to_vec(), data), Op::AddRow { x, row })
    }

    pub fn broadcast_row(&mut self, row: TensorId, rows: usize) -> Result<TensorId> {
        let rv = self.value(row);
        let n = rv.numel();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(rv.data());
        }
        self.push(Tensor::from_parts(vec![rows, n], data), Op::BroadcastRow { row })
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale { x, c })
    }

    pub fn add_const(&mut self, x: TensorId, c: f64) -> Result<TensorId> {
        let out = self.value(x).map(|v| v + c);
        self.push(out, Op::AddConst { x })
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: TensorId) -> Result<TensorId> {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh { x })
    }

    /// Stable softmax along `axis`; every slice along the axis sums to one.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let xv = self.value(x);
        xv.ensure_finite("softmax input")?;
        if axis >= xv.shape().len() {
            return Err(MasnError::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {:?}",
                xv.shape()
            )));
        }
        let mut data = xv.data().to_vec();
        for_each_axis_slice(xv.shape(), axis, |idx| {
            let max = idx.iter().map(|&i| data[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &i in idx {
                data[i] = (data[i] - max).exp();
                sum += data[i];
            }
            for &i in idx {
                data[i] /= sum;
            }
        });
        self.push(Tensor::from_parts(xv.shape().to_vec(), data), Op::Softmax { x, axis })
    }

    /// Layer normalization over the last dim with epsilon 1e-5 inside the root.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let n = xv.cols();
        if n < 2 {
            return Err(MasnError::InvalidArgument(format!(
                "layer_norm needs last dim >= 2, got shape {:?}",
                xv.shape()
            )));
        }
        if gv.numel() != n || bv.numel() != n {
            return Err(MasnError::Shape(format!(
                "layer_norm gain/bias {:?}/{:?} vs last dim {n}",
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.rows();
        let mut data = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &xv.data()[r * n..(r + 1) * n];
            let (normed, _, _) = layer_norm_row(row);
            for c in 0..n {
                data[r * n + c] = normed[c] * gv.data()[c] + bv.data()[c];
            }
        }
        self.push(
            Tensor::from_parts(xv.shape().to_vec(), data),
            Op::LayerNorm { x, gain, bias },
        )
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(MasnError::InvalidArgument("concat_rows of nothing".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != cols {
                return Err(MasnError::Shape(format!(
                    "concat_rows column mismatch: {} vs {}",
                    pv.cols(),
                    cols
                )));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        self.push(
            Tensor::from_parts(vec![rows, cols], data),
            Op::ConcatRows { parts: parts.to_vec() },
        )
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(MasnError::InvalidArgument("concat_cols of nothing".into()));
        }
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(MasnError::Shape("concat_cols row mismatch".into()));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = self.value(p);
                data.extend_from_slice(&pv.data()[r * w..(r + 1) * w]);
            }
        }
        self.push(
            Tensor::from_parts(vec![rows, total], data),
            Op::ConcatCols { parts: parts.to_vec() },
        )
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        if start + len > cols {
            return Err(MasnError::Shape(format!(
                "slice_cols [{start}, {}) of width {cols}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * cols + start..r * cols + start + len]);
        }
        let shape = if xv.shape().len() == 1 { vec![len] } else { vec![rows, len] };
        self.push(Tensor::from_parts(shape, data), Op::SliceCols { x, start, len })
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let out = self.value(x).reshaped(shape)?;
        self.push(out, Op::Reshape { x })
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    /// Column sums over the row axis, shape `[rows, n] -> [n]`.
    pub fn sum_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += xv.data()[r * cols + c];
            }
        }
        self.push(Tensor::from_parts(vec![cols], out), Op::SumRows { x })
    }

    /// Row gather; used for embedding lookup and per-object frame addressing.
    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let tv = self.value(table);
        let (rows, cols) = (tv.rows(), tv.cols());
        for &i in ids {
            if i >= rows {
                return Err(MasnError::Shape(format!(
                    "gather_rows index {i} out of range {rows}"
                )));
            }
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(&tv.data()[i * cols..(i + 1) * cols]);
        }
        self.push(
            Tensor::from_parts(vec![ids.len(), cols], data),
            Op::GatherRows { table, ids: ids.to_vec() },
        )
    }

    pub fn index(&mut self, x: TensorId, i: usize) -> Result<TensorId> {
        let xv = self.value(x);
        if i >= xv.numel() {
            return Err(MasnError::Shape(format!(
                "index {i} out of range {}",
                xv.numel()
            )));
        }
        let v = xv.data()[i];
        self.push(Tensor::scalar(v), Op::Index { x, i })
    }

    pub fn mul_scalar(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(MasnError::Shape("mul_scalar needs a scalar node".into()));
        }
        let c = sv.item();
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::MulScalar { x, s })
    }

    /// Stable cross-entropy of a logit vector against a target class.
    pub fn cross_entropy(&mut self, logits: TensorId, target: usize) -> Result<TensorId> {
        let lv = self.value(logits);
        let n = lv.numel();
        if target >= n {
            return Err(MasnError::InvalidArgument(format!(
                "cross_entropy target {target} out of range {n}"
            )));
        }
        let max = lv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + lv.data().iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - lv.data()[target];
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, target })
    }

    /// Dot product of two equal-length vectors as a scalar node.
    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let prod = self.mul(a, b)?;
        self.sum_all(prod)
    }

    /// Reverse pass from a scalar loss node. Returns one gradient slot per node.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(MasnError::InvalidArgument(
                "backward requires a scalar loss node".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(d_out) = grads[i].take() else { continue };
            self.backward_node(i, &d_out, &mut grads);
            grads[i] = Some(d_out);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, d_out: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let acc = |grads: &mut [Option<Tensor>], id: TensorId, delta: Tensor| {
            match &mut grads[id.0] {
                Some(g) => {
                    for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                        *a += b;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // d_a = d_out @ b^T, d_b = a^T @ d_out
                let bt = transpose_raw(bv.data(), k, n);
                let da = matmul_raw(d_out.data(), &bt, m, n, k);
                let at = transpose_raw(av.data(), m, k);
                let db = matmul_raw(&at, d_out.data(), k, m, n);
                acc(grads, *a, Tensor::from_parts(vec![m, k], da));
                acc(grads, *b, Tensor::from_parts(vec![k, n], db));
            }
            Op::Transpose { x } => {
                let (r, c) = (d_out.rows(), d_out.cols());
                let dx = transpose_raw(d_out.data(), r, c);
                acc(grads, *x, Tensor::from_parts(vec![c, r], dx));
            }
            Op::Add { a, b } => {
                acc(grads, *a, d_out.clone());
                acc(grads, *b, d_out.clone());
            }
            Op::Sub { a, b } => {
                acc(grads, *a, d_out.clone());
                acc(grads, *b, d_out.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = elementwise(d_out.data(), bv.data(), |d, o| d * o);
                let db = elementwise(d_out.data(), av.data(), |d, o| d * o);
                acc(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                acc(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
            }
            Op::AddRow { x, row } => {
                acc(grads, *x, d_out.clone());
                let rv = self.value(*row);
                let cols = rv.numel();
                let mut dr = vec![0.0; cols];
                for (i, &v) in d_out.data().iter().enumerate() {
                    dr[i % cols] += v;
                }
                acc(grads, *row, Tensor::from_parts(rv.shape().to_vec(), dr));
            }
            Op::BroadcastRow { row } => {
                let cols = self.value(*row).numel();
                let mut dr = vec![0.0; cols];
                for (i, &v) in d_out.data().iter().enumerate() {
                    dr[i % cols] += v;
                }
                acc(grads, *row, Tensor::from_parts(self.value(*row).shape().to_vec(), dr));
            }
            Op::Scale { x, c } => {
                acc(grads, *x, d_out.map(|v| v * c));
            }
            Op::AddConst { x } => {
                acc(grads, *x, d_out.clone());
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let dx = elementwise(d_out.data(), xv.data(), |d, v| if v > 0.0 { d } else { 0.0 });
                acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::Sigmoid { x } => {
                let out = &node.value;
                let dx = elementwise(d_out.data(), out.data(), |d, o| d * o * (1.0 - o));
                acc(grads, *x, Tensor::from_parts(out.shape().to_vec(), dx));
            }
            Op::Tanh { x } => {
                let out = &node.value;
                let dx = elementwise(d_out.data(), out.data(), |d, o| d * (1.0 - o * o));
                acc(grads, *x, Tensor::from_parts(out.shape().to_vec(), dx));
            }
            Op::Softmax { x, axis } => {
                let out = &node.value;
                let mut dx = vec![0.0; out.numel()];
                for_each_axis_slice(out.shape(), *axis, |idx| {
                    let mut dot = 0.0;
                    for &j in idx {
                        dot += d_out.data()[j] * out.data()[j];
                    }
                    for &j in idx {
                        dx[j] = out.data()[j] * (d_out.data()[j] - dot);
                    }
                });
                acc(grads, *x, Tensor::from_parts(out.shape().to_vec(), dx));
            }
            Op::LayerNorm { x, gain, bias } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let n = xv.cols();
                let rows = xv.rows();
                let mut dx = vec![0.0; xv.numel()];
                let mut dg = vec![0.0; n];
                let mut db = vec![0.0; n];
                for r in 0..rows {
                    let row = &xv.data()[r * n..(r + 1) * n];
                    let (normed, _, rstd) = layer_norm_row(row);
                    let dor = &d_out.data()[r * n..(r + 1) * n];
                    // d_bias and d_gain accumulate across rows.
                    let mut dy = vec![0.0; n];
                    for c in 0..n {
                        db[c] += dor[c];
                        dg[c] += dor[c] * normed[c];
                        dy[c] = dor[c] * gv.data()[c];
                    }
                    let mean_dy: f64 = dy.iter().sum::<f64>() / n as f64;
                    let mean_dy_y: f64 =
                        dy.iter().zip(&normed).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for c in 0..n {
                        dx[r * n + c] = rstd * (dy[c] - mean_dy - normed[c] * mean_dy_y);
                    }
                }
                acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                acc(grads, *gain, Tensor::from_parts(vec![n], dg));
                acc(grads, *bias, Tensor::from_parts(vec![n], db));
            }
            Op::ConcatRows { parts } => {
                let cols = d_out.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let len = pv.numel();
                    let slice = d_out.data()[offset..offset + len].to_vec();
                    acc(grads, p, Tensor::from_parts(pv.shape().to_vec(), slice));
                    offset += len;
                }
                debug_assert_eq!(offset, d_out.rows() * cols);
            }
            Op::ConcatCols { parts } => {
                let rows = d_out.rows();
                let total = d_out.cols();
                let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
                let mut start = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let pv = self.value(p);
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&d_out.data()[r * total + start..r * total + start + w]);
                    }
                    acc(grads, p, Tensor::from_parts(pv.shape().to_vec(), dp));
                    start += w;
                }
            }
            Op::SliceCols { x, start, len } => {
                let xv = self.value(*x);
                let (rows, cols) = (xv.rows(), xv.cols());
                let mut dx = vec![0.0; xv.numel()];
                for r in 0..rows {
                    for c in 0..*len {
                        dx[r * cols + start + c] = d_out.data()[r * len + c];
                    }
                }
                acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::Reshape { x } => {
                let xv = self.value(*x);
                acc(
                    grads,
                    *x,
                    Tensor::from_parts(xv.shape().to_vec(), d_out.data().to_vec()),
                );
            }
            Op::SumAll { x } => {
                let xv = self.value(*x);
                let d = d_out.item();
                acc(grads, *x, Tensor::filled(xv.shape().to_vec(), d));
            }
            Op::SumRows { x } => {
                let xv = self.value(*x);
                let (rows, cols) = (xv.rows(), xv.cols());
                let mut dx = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    dx.extend_from_slice(d_out.data());
                }
                acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::GatherRows { table, ids } => {
                let tv = self.value(*table);
                let cols = tv.cols();
                let mut dt = vec![0.0; tv.numel()];
                for (pos, &row) in ids.iter().enumerate() {
                    for c in 0..cols {
                        dt[row * cols + c] += d_out.data()[pos * cols + c];
                    }
                }
                acc(grads, *table, Tensor::from_parts(tv.shape().to_vec(), dt));
            }
            Op::Index { x, i } => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.numel()];
                dx[*i] = d_out.item();
                acc(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::MulScalar { x, s } => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let c = sv.item();
                acc(grads, *x, d_out.map(|v| v * c));
                let ds: f64 = d_out.data().iter().zip(xv.data()).map(|(d, v)| d * v).sum();
                acc(grads, *s, Tensor::scalar(ds));
            }
            Op::CrossEntropy { logits, target } => {
                let lv = self.value(*logits);
                let d = d_out.item();
                let max = lv.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = lv.data().iter().map(|&v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                let mut dl: Vec<f64> = exps.iter().map(|&e| d * e / sum).collect();
                dl[*target] -= d;
                acc(grads, *logits, Tensor::from_parts(lv.shape().to_vec(), dl));
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn elementwise(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Normalize one row: returns (normalized values, mean, 1/sqrt(var + eps)).
fn layer_norm_row(row: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    let normed = row.iter().map(|&v| (v - mean) * rstd).collect();
    (normed, mean, rstd)
}

/// Visit every 1-d slice along `axis` of a row-major tensor, passing the flat
/// indices of the slice elements.
fn for_each_axis_slice(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut idx = Vec::with_capacity(axis_len);
    for o in 0..outer {
        for i in 0..inner {
            idx.clear();
            for a in 0..axis_len {
                idx.push(o * axis_len * inner + a * inner + i);
            }
            f(&idx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_symmetry_and_analytic() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 1.0]).unwrap()).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let y = tape.leaf(Tensor::vector(vec![0.0, 3f64.ln()]).unwrap()).unwrap();
        let sy = tape.softmax(y, 0).unwrap();
        let v = tape.value(sy).data();
        assert!(close(v[0], 0.25, 1e-15) && close(v[1], 0.75, 1e-15));
    }

    #[test]
    fn softmax_rejects_non_finite_input_before_it_spreads() {
        // Leaf construction is the gate: a NaN can never land on the tape.
        assert!(Tensor::vector(vec![0.0, f64::NAN]).is_err());
    }

    #[test]
    fn softmax_stable_under_large_spread() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-50.0, 50.0, 0.0]).unwrap()).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        let sum: f64 = tape.value(s).data().iter().sum();
        assert!(close(sum, 1.0, 1e-12));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 4, vec![3.0; 4]).unwrap()).unwrap();
        let g = tape.leaf(Tensor::filled(vec![4], 1.0)).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![4])).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        for &v in tape.value(y).data() {
            assert!(close(v, 0.0, 1e-12));
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap()).unwrap();
        let g = tape.leaf(Tensor::filled(vec![2], 1.0)).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![2])).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        let v = tape.value(y).data();
        // var = 1, stabilized by eps: values are +-1/sqrt(1 + 1e-5).
        let expect = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!(close(v[0], expect, 1e-12));
        assert!(close(v[1], -expect, 1e-12));
    }

    #[test]
    fn layer_norm_rejects_degenerate_width() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 1, vec![5.0]).unwrap()).unwrap();
        let g = tape.leaf(Tensor::filled(vec![1], 1.0)).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![1])).unwrap();
        assert!(tape.layer_norm(x, g, b).is_err());
    }

    #[test]
    fn matmul_forward_matches_triple_loop() {
        let mut tape = Tape::new();
        let a = tape
            .leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let b = tape
            .leaf(Tensor::matrix(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap())
            .unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn backward_through_chain() {
        // loss = sum((a*b) + a) => d_a = b + 1, d_b = a.
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![3.0]).unwrap()).unwrap();
        let b = tape.leaf(Tensor::vector(vec![5.0]).unwrap()).unwrap();
        let prod = tape.mul(a, b).unwrap();
        let sum = tape.add(prod, a).unwrap();
        let loss = tape.sum_all(sum).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[6.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[3.0]);
    }

    #[test]
    fn backward_matmul() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let b = tape.leaf(Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap()).unwrap();
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn cross_entropy_uniform_two_class() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::vector(vec![0.0, 0.0]).unwrap()).unwrap();
        let loss = tape.cross_entropy(logits, 0).unwrap();
        assert!(close(tape.value(loss).item(), 2f64.ln(), 1e-15));
    }

    #[test]
    fn gather_rows_scatter_adds_on_backward() {
        let mut tape = Tape::new();
        let table = tape
            .leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let g = tape.gather_rows(table, &[1, 1, 0]).unwrap();
        let loss = tape.sum_all(g).unwrap();
        let grads = tape.backward(loss).unwrap();
        // Row 1 gathered twice, row 0 once, row 2 never.
        assert_eq!(grads.get(table).unwrap().data(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()).unwrap();
        let b = tape.leaf(Tensor::matrix(1, 3, vec![3.0, 4.0, 5.0]).unwrap()).unwrap();
        let cat = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let back = tape.slice_cols(cat, 2, 3).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(b).data());
    }
}
