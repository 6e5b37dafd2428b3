use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::tensor::{gemm, Tensor};

/// Epsilon added to the variance inside `layer_norm`.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    GatherRows(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Arc<[usize]>),
    SumColGroups(Var, usize),
    RepeatCols(Var, usize),
    LayerNorm(Var, Vec<f64>),
    Gelu(Var),
    Relu(Var),
    Exp(Var),
    Sqrt(Var),
    Abs(Var),
    RowL2Norm(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy(Var, Arc<[usize]>, Tensor),
    BceWithLogits(Var, Vec<f64>),
    L1Loss(Var, Var),
    L2Loss(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Nodes are appended in execution order, so the node vector is already a
/// topological order and `backward` is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of gradient buffers that were allocated.
    pub fn allocated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let inner = C * (x + A * x * x * x);
    let t = inner.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dinner = C * (1.0 + 3.0 * A * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner;
    (y, dy)
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

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

    fn shape(&self, v: Var) -> [usize; 2] {
        let t = &self.nodes[v.0].value;
        [t.rows(), t.cols()]
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(x.rows(), x.cols(), data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} · {sb:?}")));
        }
        let mut out = Tensor::zeros(sa[0], sb[1]);
        gemm(self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.rows(), x.cols(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |p, q| p * q)
    }

    fn check_row(&self, op: &'static str, a: Var, row: Var) -> Result<()> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != [1, sa[1]] {
            return Err(shape_err(op, format!("{sa:?} with row {sr:?}")));
        }
        Ok(())
    }

    fn check_col(&self, op: &'static str, a: Var, col: Var) -> Result<()> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc != [sa[0], 1] {
            return Err(shape_err(op, format!("{sa:?} with column {sc:?}")));
        }
        Ok(())
    }

    /// `a + row`, broadcasting a `[1, n]` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("add_row", a, row)?;
        let (x, r) = (self.value(a), self.value(row));
        let n = x.cols();
        let mut data = x.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += r.data()[i % n];
        }
        let out = Tensor::new(x.rows(), n, data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.check_row("mul_row", a, row)?;
        let (x, r) = (self.value(a), self.value(row));
        let n = x.cols();
        let mut data = x.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v *= r.data()[i % n];
        }
        let out = Tensor::new(x.rows(), n, data)?;
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::MulRow(a, row), rg))
    }

    /// `a * col`, broadcasting an `[m, 1]` column over every column of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.check_col("mul_col", a, col)?;
        let (x, c) = (self.value(a), self.value(col));
        let n = x.cols();
        let mut data = x.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v *= c.data()[i / n.max(1)];
        }
        let out = Tensor::new(x.rows(), n, data)?;
        let rg = self.rg(&[a, col]);
        Ok(self.push(out, Op::MulCol(a, col), rg))
    }

    pub fn div_col(&mut self, a: Var, col: Var) -> Result<Var> {
        self.check_col("div_col", a, col)?;
        let (x, c) = (self.value(a), self.value(col));
        let n = x.cols();
        let mut data = x.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v /= c.data()[i / n.max(1)];
        }
        let out = Tensor::new(x.rows(), n, data)?;
        let rg = self.rg(&[a, col]);
        Ok(self.push(out, Op::DivCol(a, col), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.map(a, Op::Scale(a, factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::AddScalar(a), |v| v + c)
    }

    /// Column-wise concatenation of tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.shape(p)[0],
            None => return Err(shape_err("concat", "no inputs".into())),
        };
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[0] != rows {
                return Err(shape_err("concat", format!("row count {} vs {rows}", s[0])));
            }
            cols += s[1];
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            let w = x.cols();
            for r in 0..rows {
                out.data_mut()[r * cols + off..r * cols + off + w].copy_from_slice(x.row_slice(r));
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a);
        if start > end || end > s[1] {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {s:?}")));
        }
        let w = end - start;
        let x = self.value(a);
        let mut data = Vec::with_capacity(s[0] * w);
        for r in 0..s[0] {
            data.extend_from_slice(&x.row_slice(r)[start..end]);
        }
        let out = Tensor::new(s[0], w, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    /// Row-major reinterpretation; the element order is unchanged.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).clone().reshaped(rows, cols)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Row `r` of the output is row `index[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: &Arc<[usize]>) -> Result<Var> {
        let s = self.shape(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= s[0]) {
            return Err(AutodiffError::Index {
                op: "gather_rows",
                index: bad,
                bound: s[0],
            });
        }
        let x = self.value(a);
        let mut data = Vec::with_capacity(index.len() * s[1]);
        for &i in index.iter() {
            data.extend_from_slice(x.row_slice(i));
        }
        let out = Tensor::new(index.len(), s[1], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::GatherRows(a, Arc::clone(index)), rg))
    }

    /// Embedding lookup: rows of `table` selected by token id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &Arc<[usize]>) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    fn check_segments(&self, op: &'static str, a: Var, segment: &[usize], n: usize) -> Result<()> {
        let s = self.shape(a);
        if segment.len() != s[0] {
            return Err(shape_err(op, format!("{} segment ids for {} rows", segment.len(), s[0])));
        }
        if let Some(&bad) = segment.iter().find(|&&g| g >= n) {
            return Err(AutodiffError::Index { op, index: bad, bound: n });
        }
        Ok(())
    }

    /// Sums rows of `a` into `n_segments` output rows keyed by `segment`.
    pub fn segment_sum(&mut self, a: Var, segment: &Arc<[usize]>, n_segments: usize) -> Result<Var> {
        self.check_segments("segment_sum", a, segment, n_segments)?;
        let x = self.value(a);
        let c = x.cols();
        let mut out = Tensor::zeros(n_segments, c);
        for (r, &g) in segment.iter().enumerate() {
            let dst = &mut out.data_mut()[g * c..(g + 1) * c];
            for (d, v) in dst.iter_mut().zip(x.row_slice(r)) {
                *d += v;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SegmentSum(a, Arc::clone(segment)), rg))
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, a: Var, segment: &Arc<[usize]>, n_segments: usize) -> Result<Var> {
        self.check_segments("segment_softmax", a, segment, n_segments)?;
        let x = self.value(a);
        let c = x.cols();
        let mut max = vec![f64::NEG_INFINITY; n_segments * c];
        for (r, &g) in segment.iter().enumerate() {
            for (j, &v) in x.row_slice(r).iter().enumerate() {
                let m = &mut max[g * c + j];
                if v > *m {
                    *m = v;
                }
            }
        }
        let mut data = vec![0.0; x.len()];
        let mut denom = vec![0.0; n_segments * c];
        for (r, &g) in segment.iter().enumerate() {
            for (j, &v) in x.row_slice(r).iter().enumerate() {
                let e = (v - max[g * c + j]).exp();
                data[r * c + j] = e;
                denom[g * c + j] += e;
            }
        }
        for (r, &g) in segment.iter().enumerate() {
            for j in 0..c {
                data[r * c + j] /= denom[g * c + j];
            }
        }
        let out = Tensor::new(x.rows(), c, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SegmentSoftmax(a, Arc::clone(segment)), rg))
    }

    /// Sums each run of `group` consecutive columns: `[m, h·group] -> [m, h]`.
    pub fn sum_col_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        let s = self.shape(a);
        if group == 0 || s[1] % group != 0 {
            return Err(shape_err("sum_col_groups", format!("{s:?} by groups of {group}")));
        }
        let h = s[1] / group;
        let x = self.value(a);
        let mut out = Tensor::zeros(s[0], h);
        for r in 0..s[0] {
            let row = x.row_slice(r);
            for j in 0..h {
                out.data_mut()[r * h + j] = row[j * group..(j + 1) * group].iter().sum();
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SumColGroups(a, group), rg))
    }

    /// Repeats every column `group` times: `[m, h] -> [m, h·group]`.
    pub fn repeat_cols(&mut self, a: Var, group: usize) -> Result<Var> {
        let s = self.shape(a);
        if group == 0 {
            return Err(shape_err("repeat_cols", "group of 0".into()));
        }
        let x = self.value(a);
        let w = s[1] * group;
        let mut out = Tensor::zeros(s[0], w);
        for r in 0..s[0] {
            for (j, &v) in x.row_slice(r).iter().enumerate() {
                out.data_mut()[r * w + j * group..r * w + (j + 1) * group].fill(v);
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::RepeatCols(a, group), rg))
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut data = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = x.row_slice(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, v) in row.iter().enumerate() {
                data[r * n + j] = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = Tensor::new(m, n, data).expect("same shape");
        let rg = self.rg(&[a]);
        self.push(out, Op::LayerNorm(a, inv_std), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), |v| gelu_parts(v).0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), f64::abs)
    }

    /// Euclidean norm of every row: `[m, n] -> [m, 1]`.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows())
            .map(|r| x.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let out = Tensor::column(data);
        let rg = self.rg(&[a]);
        self.push(out, Op::RowL2Norm(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let s = x.data().iter().sum::<f64>() / x.len() as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    /// Mean softmax cross-entropy of `logits` rows against class indices.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, targets: &Arc<[usize]>) -> Result<Var> {
        let s = self.shape(logits);
        if targets.len() != s[0] || s[0] == 0 {
            return Err(shape_err(
                "cross_entropy_with_logits",
                format!("{} targets for logits {s:?}", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= s[1]) {
            return Err(AutodiffError::Index {
                op: "cross_entropy_with_logits",
                index: bad,
                bound: s[1],
            });
        }
        let x = self.value(logits);
        let mut probs = Tensor::zeros(s[0], s[1]);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = x.row_slice(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[t];
            for (j, v) in row.iter().enumerate() {
                probs.data_mut()[r * s[1] + j] = (v - lse).exp();
            }
        }
        let out = Tensor::scalar(loss / s[0] as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::CrossEntropy(logits, Arc::clone(targets), probs), rg))
    }

    /// Mean binary cross-entropy with logits; `labels` has one entry per element.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let x = self.value(logits);
        if labels.len() != x.len() || x.is_empty() {
            return Err(shape_err(
                "bce_with_logits",
                format!("{} labels for logits {:?}", labels.len(), x.shape()),
            ));
        }
        let loss: f64 = x
            .data()
            .iter()
            .zip(labels)
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(loss / x.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(out, Op::BceWithLogits(logits, labels.to_vec()), rg))
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("l1_loss", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        if p.is_empty() {
            return Err(shape_err("l1_loss", "empty tensor".into()));
        }
        let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum();
        let out = Tensor::scalar(s / p.len() as f64);
        let rg = self.rg(&[pred, target]);
        Ok(self.push(out, Op::L1Loss(pred, target), rg))
    }

    /// Mean squared error.
    pub fn l2_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("l2_loss", pred, target)?;
        let (p, t) = (self.value(pred), self.value(target));
        if p.is_empty() {
            return Err(shape_err("l2_loss", "empty tensor".into()));
        }
        let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let out = Tensor::scalar(s / p.len() as f64);
        let rg = self.rg(&[pred, target]);
        Ok(self.push(out, Op::L2Loss(pred, target), rg))
    }

    /// Reverse sweep from a `[1, 1]` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.shape(output) != [1, 1] {
            return Err(AutodiffError::Contract(format!(
                "backward requires a scalar output, got {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let like = |v: Var, data: Vec<f64>| {
            let t = self.value(v);
            Tensor::new(t.rows(), t.cols(), data).expect("gradient shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm(g, false, bv, true, &mut da, false);
                    self.accum(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(av, true, g, false, &mut db, false);
                    self.accum(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accum(grads, *b, like(*b, g.data().iter().map(|v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                    self.accum(grads, *a, like(*a, d));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                    self.accum(grads, *b, like(*b, d));
                }
            }
            Op::AddRow(a, row) => {
                self.accum(grads, *a, g.clone());
                if self.wants(*row) {
                    let n = g.cols();
                    let mut d = vec![0.0; n];
                    for (k, v) in g.data().iter().enumerate() {
                        d[k % n] += v;
                    }
                    self.accum(grads, *row, like(*row, d));
                }
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                let n = g.cols();
                if self.wants(*a) {
                    let d = g.data().iter().enumerate().map(|(k, v)| v * rv.data()[k % n]).collect();
                    self.accum(grads, *a, like(*a, d));
                }
                if self.wants(*row) {
                    let mut d = vec![0.0; n];
                    for (k, (v, x)) in g.data().iter().zip(av.data()).enumerate() {
                        d[k % n] += v * x;
                    }
                    self.accum(grads, *row, like(*row, d));
                }
            }
            Op::MulCol(a, col) => {
                let (av, cv) = (self.value(*a), self.value(*col));
                let n = g.cols().max(1);
                if self.wants(*a) {
                    let d = g.data().iter().enumerate().map(|(k, v)| v * cv.data()[k / n]).collect();
                    self.accum(grads, *a, like(*a, d));
                }
                if self.wants(*col) {
                    let mut d = vec![0.0; cv.len()];
                    for (k, (v, x)) in g.data().iter().zip(av.data()).enumerate() {
                        d[k / n] += v * x;
                    }
                    self.accum(grads, *col, like(*col, d));
                }
            }
            Op::DivCol(a, col) => {
                let cv = self.value(*col);
                let n = g.cols().max(1);
                if self.wants(*a) {
                    let d = g.data().iter().enumerate().map(|(k, v)| v / cv.data()[k / n]).collect();
                    self.accum(grads, *a, like(*a, d));
                }
                if self.wants(*col) {
                    // d(a/c)/dc = -(a/c)/c = -out/c
                    let mut d = vec![0.0; cv.len()];
                    for (k, (v, y)) in g.data().iter().zip(out.data()).enumerate() {
                        d[k / n] -= v * y / cv.data()[k / n];
                    }
                    self.accum(grads, *col, like(*col, d));
                }
            }
            Op::Scale(a, f) => {
                self.accum(grads, *a, like(*a, g.data().iter().map(|v| v * f).collect()));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                self.accum(grads, *a, like(*a, g.data().to_vec()));
            }
            Op::Concat(parts) => {
                let cols = g.cols();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(g.rows() * w);
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.data()[r * cols + off..r * cols + off + w]);
                        }
                        self.accum(grads, *p, like(*p, d));
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let av = self.value(*a);
                let (n, w) = (av.cols(), g.cols());
                let mut d = vec![0.0; av.len()];
                for r in 0..g.rows() {
                    d[r * n + start..r * n + start + w].copy_from_slice(g.row_slice(r));
                }
                self.accum(grads, *a, like(*a, d));
            }
            Op::GatherRows(a, index) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut d = vec![0.0; av.len()];
                for (r, &src) in index.iter().enumerate() {
                    for (x, v) in d[src * c..(src + 1) * c].iter_mut().zip(g.row_slice(r)) {
                        *x += v;
                    }
                }
                self.accum(grads, *a, like(*a, d));
            }
            Op::SegmentSum(a, segment) => {
                let c = g.cols();
                let mut d = Vec::with_capacity(segment.len() * c);
                for &s in segment.iter() {
                    d.extend_from_slice(g.row_slice(s));
                }
                self.accum(grads, *a, like(*a, d));
            }
            Op::SegmentSoftmax(a, segment) => {
                let c = g.cols();
                let n_seg = segment.iter().copied().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n_seg * c];
                for (r, &s) in segment.iter().enumerate() {
                    for j in 0..c {
                        dot[s * c + j] += out.data()[r * c + j] * g.data()[r * c + j];
                    }
                }
                let mut d = vec![0.0; out.len()];
                for (r, &s) in segment.iter().enumerate() {
                    for j in 0..c {
                        let k = r * c + j;
                        d[k] = out.data()[k] * (g.data()[k] - dot[s * c + j]);
                    }
                }
                self.accum(grads, *a, like(*a, d));
            }
            Op::SumColGroups(a, group) => {
                let h = g.cols();
                let mut d = vec![0.0; g.rows() * h * group];
                for r in 0..g.rows() {
                    for j in 0..h {
                        let v = g.data()[r * h + j];
                        d[r * h * group + j * group..r * h * group + (j + 1) * group].fill(v);
                    }
                }
                self.accum(grads, *a, like(*a, d));
            }
            Op::RepeatCols(a, group) => {
                let w = g.cols();
                let h = w / group;
                let mut d = vec![0.0; g.rows() * h];
                for r in 0..g.rows() {
                    for j in 0..h {
                        d[r * h + j] = g.data()[r * w + j * group..r * w + (j + 1) * group].iter().sum();
                    }
                }
                self.accum(grads, *a, like(*a, d));
            }
            Op::LayerNorm(a, inv_std) => {
                let n = g.cols();
                let mut d = vec![0.0; g.len()];
                for (r, is) in inv_std.iter().enumerate() {
                    let gy = g.row_slice(r);
                    let y = out.row_slice(r);
                    let mean_g = gy.iter().sum::<f64>() / n as f64;
                    let mean_gy = gy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        d[r * n + j] = is * (gy[j] - mean_g - y[j] * mean_gy);
                    }
                }
                self.accum(grads, *a, like(*a, d));
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let d = g.data().iter().zip(av.data()).map(|(v, &x)| v * gelu_parts(x).1).collect();
                self.accum(grads, *a, like(*a, d));
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let d = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(v, &x)| if x > 0.0 { *v } else { 0.0 })
                    .collect();
                self.accum(grads, *a, like(*a, d));
            }
            Op::Exp(a) => {
                let d = g.data().iter().zip(out.data()).map(|(v, y)| v * y).collect();
                self.accum(grads, *a, like(*a, d));
            }
            Op::Sqrt(a) => {
                let d = g.data().iter().zip(out.data()).map(|(v, y)| v * 0.5 / y).collect();
                self.accum(grads, *a, like(*a, d));
            }
            Op::Abs(a) => {
                let av = self.value(*a);
                let d = g.data().iter().zip(av.data()).map(|(v, &x)| v * sign(x)).collect();
                self.accum(grads, *a, like(*a, d));
            }
            Op::RowL2Norm(a) => {
                let av = self.value(*a);
                let n = av.cols();
                let mut d = vec![0.0; av.len()];
                for r in 0..av.rows() {
                    let norm = out.data()[r];
                    if norm > 0.0 {
                        let s = g.data()[r] / norm;
                        for j in 0..n {
                            d[r * n + j] = s * av.data()[r * n + j];
                        }
                    }
                }
                self.accum(grads, *a, like(*a, d));
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accum(grads, *a, like(*a, vec![g.item(); n]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accum(grads, *a, like(*a, vec![g.item() / n as f64; n]));
            }
            Op::CrossEntropy(a, targets, probs) => {
                let m = probs.rows();
                let c = probs.cols();
                let s = g.item() / m as f64;
                let mut d: Vec<f64> = probs.data().iter().map(|p| p * s).collect();
                for (r, &t) in targets.iter().enumerate() {
                    d[r * c + t] -= s;
                }
                self.accum(grads, *a, like(*a, d));
            }
            Op::BceWithLogits(a, labels) => {
                let av = self.value(*a);
                let s = g.item() / av.len() as f64;
                let d = av
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&z, &y)| s * (1.0 / (1.0 + (-z).exp()) - y))
                    .collect();
                self.accum(grads, *a, like(*a, d));
            }
            Op::L1Loss(p, t) => {
                let (pv, tv) = (self.value(*p), self.value(*t));
                let s = g.item() / pv.len() as f64;
                let d: Vec<f64> = pv.data().iter().zip(tv.data()).map(|(a, b)| s * sign(a - b)).collect();
                if self.wants(*t) {
                    self.accum(grads, *t, like(*t, d.iter().map(|v| -v).collect()));
                }
                self.accum(grads, *p, like(*p, d));
            }
            Op::L2Loss(p, t) => {
                let (pv, tv) = (self.value(*p), self.value(*t));
                let s = 2.0 * g.item() / pv.len() as f64;
                let d: Vec<f64> = pv.data().iter().zip(tv.data()).map(|(a, b)| s * (a - b)).collect();
                if self.wants(*t) {
                    self.accum(grads, *t, like(*t, d.iter().map(|v| -v).collect()));
                }
                self.accum(grads, *p, like(*p, d));
            }
        }
    }
}
