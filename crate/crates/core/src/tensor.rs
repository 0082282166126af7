//! Dense f64 arrays and a reverse-mode tape.
//!
//! [`Tensor`] is an immutable row-major array. [`Graph`] records every op
//! applied to its [`Var`] handles and replays them backwards in
//! [`Graph::backward`]. There is no broadcasting beyond [`Graph::add_bias`].
//! All op outputs are checked for finiteness; a NaN or infinity is an error,
//! never a silently propagated value.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Immutable row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                n,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self { shape, data })
    }

    /// Construct without validation; used by ops that already checked.
    fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Plain (untracked) matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(other, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul inner extents {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, false);
        checked(vec![m, n], out, "matmul")
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = dims2(self, "transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::from_parts(vec![c, r], out))
    }
}

fn dims2(t: &Tensor, op: &str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::Dimension(format!("{op} expects a 2-D tensor, got shape {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1]))
}

fn checked(shape: Vec<usize>, data: Vec<f64>, op: &'static str) -> Result<Tensor> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(op));
    }
    Ok(Tensor::from_parts(shape, data))
}

/// `c (+)= op(a) · op(b)` for row-major operands, where `op` optionally
/// transposes. `a` is `m×k` after `op`, `b` is `k×n` after `op`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every buffer to the extents and strides
    // handed to the kernel, so all reads and writes stay in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Handle to a node of a [`Graph`].
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
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias { x: Var, bias: Var },
    LayerNorm { x: Var, gain: Option<Var>, bias: Option<Var>, xhat: Vec<f64>, rstd: Vec<f64> },
    RmsNorm { x: Var, gain: Option<Var>, rstd: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Softmax { x: Var, axis: usize },
    CausalSoftmax { x: Var },
    Gelu(Var),
    Relu(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Block { x: Var, r0: usize, c0: usize },
    Assemble { parts: Vec<(Var, usize, usize)> },
    ConcatCols(Vec<Var>),
    Rotary { x: Var, positions: Vec<usize>, base: f64, head_dim: usize },
    ReplaceRows { x: Var, rows: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A computation tape. Nodes are appended in evaluation order, so node
/// indices are already a topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const NORM_EPS: f64 = 1e-5;

impl Graph {
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
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient on [`Graph::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf sharing storage with a weight tensor.
    pub fn shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        dims2(self.value(v), op)
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul inner extents {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let t = checked(vec![m, n], out, "matmul")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul { a, b, trans_b: false }, rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_t")?;
        let (n, k2) = self.dims2(b, "matmul_t")?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul_t inner extents {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, false);
        let t = checked(vec![m, n], out, "matmul_t")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul { a, b, trans_b: true }, rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let t = checked(va.shape().to_vec(), data, "add")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let data = va.data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let t = checked(va.shape().to_vec(), data, "mul")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| v * factor).collect();
        let t = checked(vx.shape().to_vec(), data, "scale")?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Scale(x, factor), rg))
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_bias")?;
        if self.value(bias).len() != n {
            return Err(Error::Dimension(format!(
                "add_bias: bias of length {} for {n} columns",
                self.value(bias).len()
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (v, bb) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *v += bb;
            }
        }
        let t = checked(vec![m, n], data, "add_bias")?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias { x, bias }, rg))
    }

    /// Row-wise layer normalization with optional affine gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        for p in gain.iter().chain(bias.iter()) {
            if self.value(*p).len() != n {
                return Err(Error::Dimension("layer_norm: affine parameter length".into()));
            }
        }
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let s = 1.0 / (var + NORM_EPS).sqrt();
            rstd[r] = s;
            for (o, v) in xhat[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let g = self.value(g).data();
            for r in 0..m {
                for (o, gg) in out[r * n..(r + 1) * n].iter_mut().zip(g) {
                    *o *= gg;
                }
            }
        }
        if let Some(b) = bias {
            let b = self.value(b).data();
            for r in 0..m {
                for (o, bb) in out[r * n..(r + 1) * n].iter_mut().zip(b) {
                    *o += bb;
                }
            }
        }
        let t = checked(vec![m, n], out, "layer_norm")?;
        let mut deps = vec![x];
        deps.extend(gain);
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, xhat, rstd }, rg))
    }

    /// Row-wise RMS normalization `x / rms(x) ⊙ gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Option<Var>) -> Result<Var> {
        let (m, n) = self.dims2(x, "rms_norm")?;
        if let Some(g) = gain {
            if self.value(g).len() != n {
                return Err(Error::Dimension("rms_norm: gain length".into()));
            }
        }
        let xv = self.value(x).data();
        let ones;
        let g: &[f64] = match gain {
            Some(g) => self.value(g).data(),
            None => {
                ones = vec![1.0; n];
                &ones
            }
        };
        let mut out = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let s = 1.0 / (ms + NORM_EPS).sqrt();
            rstd[r] = s;
            for ((o, v), gg) in out[r * n..(r + 1) * n].iter_mut().zip(row).zip(g) {
                *o = v * s * gg;
            }
        }
        let t = checked(vec![m, n], out, "rms_norm")?;
        let mut deps = vec![x];
        deps.extend(gain);
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::RmsNorm { x, gain, rstd }, rg))
    }

    /// Gathers rows `ids` of a `V×d` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table, "embedding")?;
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::OutOfVocab { token: id, vocab: v });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let t = Tensor::from_parts(vec![ids.len(), d], out);
        let rg = self.rg(&[table]);
        Ok(self.push(t, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// Softmax along `axis`, stabilized by max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!("softmax axis {axis} for rank {}", shape.len())));
        }
        let data = softmax_along(self.value(x).data(), &shape, axis);
        let t = checked(shape, data, "softmax")?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    /// Row softmax of a square score matrix with entries above the diagonal
    /// masked to exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "causal_softmax")?;
        if r != c {
            return Err(Error::Dimension(format!("causal_softmax needs a square matrix, got {r}×{c}")));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..i * c + i + 1];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, v) in out[i * c..i * c + i + 1].iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in &mut out[i * c..i * c + i + 1] {
                *o /= sum;
            }
        }
        let t = checked(vec![r, c], out, "causal_softmax")?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::CausalSoftmax { x }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu(v)).collect();
        let t = checked(vx.shape().to_vec(), data, "gelu")?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Gelu(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::from_parts(vx.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Relu(x), rg))
    }

    /// Mean negative log-likelihood over the rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != m {
            return Err(Error::Dimension(format!("cross_entropy: {} targets for {m} rows", targets.len())));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Empty("cross_entropy without targets".into()));
        }
        let probs = softmax_along(self.value(logits).data(), &[m, v], 1);
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= v {
                    return Err(Error::OutOfVocab { token: t, vocab: v });
                }
                let lv = self.value(logits).data();
                loss -= log_softmax_at(&lv[r * v..(r + 1) * v], t);
            }
        }
        let t = checked(vec![1], vec![loss / count as f64], "cross_entropy")?;
        let rg = self.rg(&[logits]);
        Ok(self.push(t, Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count }, rg))
    }

    /// Copies the `rows×cols` sub-block starting at `(r0, c0)`.
    pub fn block(&mut self, x: Var, r0: usize, rows: usize, c0: usize, cols: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "block")?;
        if r0 + rows > m || c0 + cols > n {
            return Err(Error::Dimension(format!(
                "block [{r0}+{rows}, {c0}+{cols}] outside {m}×{n}"
            )));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows * cols);
        for r in r0..r0 + rows {
            out.extend_from_slice(&xv[r * n + c0..r * n + c0 + cols]);
        }
        let t = Tensor::from_parts(vec![rows, cols], out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Block { x, r0, c0 }, rg))
    }

    /// Places 2-D parts at `(row, col)` offsets of a zero `rows×cols` matrix.
    /// Parts must not overlap.
    pub fn assemble(&mut self, parts: &[(Var, usize, usize)], rows: usize, cols: usize) -> Result<Var> {
        let mut out = vec![0.0; rows * cols];
        for &(p, r0, c0) in parts {
            let (pr, pc) = self.dims2(p, "assemble")?;
            if r0 + pr > rows || c0 + pc > cols {
                return Err(Error::Dimension("assemble: part outside target".into()));
            }
            let pv = self.value(p).data();
            for r in 0..pr {
                out[(r0 + r) * cols + c0..(r0 + r) * cols + c0 + pc]
                    .copy_from_slice(&pv[r * pc..(r + 1) * pc]);
            }
        }
        let t = Tensor::from_parts(vec![rows, cols], out);
        let deps: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&deps);
        Ok(self.push(t, Op::Assemble { parts: parts.to_vec() }, rg))
    }

    /// Concatenates matrices with equal row counts along the column
    /// (head) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols of nothing".into()));
        }
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return Err(Error::Dimension("concat_cols: row counts differ".into()));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut c0 = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for r in 0..m {
                out[r * n + c0..r * n + c0 + w].copy_from_slice(&pv[r * w..(r + 1) * w]);
            }
            c0 += w;
        }
        let t = Tensor::from_parts(vec![m, n], out);
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Splits columns into `k` equal-width pieces (the head axis).
    pub fn split_cols(&mut self, x: Var, k: usize) -> Result<Vec<Var>> {
        let (m, n) = self.dims2(x, "split_cols")?;
        if k == 0 || n % k != 0 {
            return Err(Error::Dimension(format!("cannot split {n} columns into {k} parts")));
        }
        let w = n / k;
        (0..k).map(|i| self.block(x, 0, m, i * w, w)).collect()
    }

    /// Rotary position embedding over adjacent column pairs. Columns are
    /// grouped into heads of width `head_dim`; pair `i` of a head in row `r`
    /// is rotated by `positions[r] · base^(−2i/head_dim)`.
    pub fn rotary(&mut self, x: Var, positions: &[usize], base: f64, head_dim: usize) -> Result<Var> {
        let (m, d) = self.dims2(x, "rotary")?;
        if positions.len() != m || head_dim == 0 || !head_dim.is_multiple_of(2) || !d.is_multiple_of(head_dim) {
            return Err(Error::Dimension(
                "rotary: need one position per row and an even head width dividing the columns".into(),
            ));
        }
        let mut out = self.value(x).data().to_vec();
        rotate_pairs(&mut out, d, head_dim, positions, base, 1.0);
        let t = checked(vec![m, d], out, "rotary")?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Rotary { x, positions: positions.to_vec(), base, head_dim }, rg))
    }

    /// Overwrites the listed rows of `x` with `values` (`rows.len()×n`).
    /// Replaced rows are cut from the gradient path.
    pub fn replace_rows(&mut self, x: Var, rows: &[usize], values: &Tensor) -> Result<Var> {
        let (m, n) = self.dims2(x, "replace_rows")?;
        if values.shape() != [rows.len(), n] {
            return Err(Error::Dimension(format!(
                "replace_rows: values {:?} for {} rows of width {n}",
                values.shape(),
                rows.len()
            )));
        }
        let mut out = self.value(x).data().to_vec();
        for (i, &r) in rows.iter().enumerate() {
            if r >= m {
                return Err(Error::Dimension(format!("replace_rows: row {r} of {m}")));
            }
            out[r * n..(r + 1) * n].copy_from_slice(values.row(i));
        }
        let t = checked(vec![m, n], out, "replace_rows")?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::ReplaceRows { x, rows: rows.to_vec() }, rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x, "select_rows")?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= m {
                return Err(Error::Dimension(format!("select_rows: row {r} of {m}")));
            }
            out.extend_from_slice(&xv[r * n..(r + 1) * n]);
        }
        let t = Tensor::from_parts(vec![rows.len(), n], out);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SelectRows { x, rows: rows.to_vec() }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let t = checked(vec![1], vec![s], "sum")?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Sum(x), rg))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        if grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("backward"));
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, trans_b } => {
                let (m, k) = (self.value(a).rows(), self.value(a).cols());
                let n = out.cols();
                let av = self.value(a).data().to_vec();
                let bv = self.value(b).data().to_vec();
                if let Some(ga) = self.acc(grads, a) {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g, false, &bv, !trans_b, ga, true);
                }
                if let Some(gb) = self.acc(grads, b) {
                    if trans_b {
                        // B is n×k: dB = dCᵀ · A
                        gemm(n, m, k, g, true, &av, false, gb, true);
                    } else {
                        // B is k×n: dB = Aᵀ · dC
                        gemm(k, m, n, &av, true, g, false, gb, true);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a).data().to_vec(), self.value(b).data().to_vec());
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            &Op::Scale(x, f) => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * f);
                }
            }
            &Op::AddBias { x, bias } => {
                let n = out.cols();
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = self.acc(grads, bias) {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let n = out.cols();
                let gain_v = gain.map(|gv| self.value(gv).data().to_vec());
                if let Some(bv) = *bias {
                    if let Some(gb) = self.acc(grads, bv) {
                        for row in g.chunks(n) {
                            gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                        }
                    }
                }
                if let Some(gv) = *gain {
                    if let Some(gg) = self.acc(grads, gv) {
                        for (row, xh) in g.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                gg[j] += row[j] * xh[j];
                            }
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, (row, xh)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let dxh: Vec<f64> = match &gain_v {
                            Some(gv) => row.iter().zip(gv).map(|(a, b)| a * b).collect(),
                            None => row.to_vec(),
                        };
                        let mean_d = dxh.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[r * n + j] += rstd[r] * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, rstd } => {
                let n = out.cols();
                let xv = self.value(*x).data().to_vec();
                let gain_v = gain.map(|gv| self.value(gv).data().to_vec());
                if let Some(gv) = *gain {
                    if let Some(gg) = self.acc(grads, gv) {
                        for (r, row) in g.chunks(n).enumerate() {
                            for j in 0..n {
                                gg[j] += row[j] * xv[r * n + j] * rstd[r];
                            }
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, row) in g.chunks(n).enumerate() {
                        let xr = &xv[r * n..(r + 1) * n];
                        let dy: Vec<f64> = match &gain_v {
                            Some(gv) => row.iter().zip(gv).map(|(a, b)| a * b).collect(),
                            None => row.to_vec(),
                        };
                        let s = rstd[r];
                        let dot = dy.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                        let c = s * s * s * dot / n as f64;
                        for j in 0..n {
                            gx[r * n + j] += s * dy[j] - c * xr[j];
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = out.cols();
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                if let Some(gx) = self.acc(grads, x) {
                    let shape = out.shape();
                    let len = shape[axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let outer: usize = shape[..axis].iter().product();
                    let y = out.data();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + i;
                            let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                gx[at(k)] += y[at(k)] * (g[at(k)] - dot);
                            }
                        }
                    }
                }
            }
            &Op::CausalSoftmax { x } => {
                if let Some(gx) = self.acc(grads, x) {
                    let c = out.cols();
                    let y = out.data();
                    for i in 0..out.rows() {
                        let lo = i * c;
                        let dot: f64 = (lo..=lo + i).map(|k| g[k] * y[k]).sum();
                        for k in lo..=lo + i {
                            gx[k] += y[k] * (g[k] - dot);
                        }
                    }
                }
            }
            &Op::Gelu(x) => {
                let xv = self.value(x).data().to_vec();
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            &Op::Relu(x) => {
                let xv = self.value(x).data().to_vec();
                if let Some(gx) = self.acc(grads, x) {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let v = self.value(*logits).cols();
                if let Some(gl) = self.acc(grads, *logits) {
                    let scale = g[0] / *count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for j in 0..v {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                gl[r * v + j] += scale * (probs[r * v + j] - onehot);
                            }
                        }
                    }
                }
            }
            &Op::Block { x, r0, c0 } => {
                let n = self.value(x).cols();
                let (rows, cols) = (out.rows(), out.cols());
                if let Some(gx) = self.acc(grads, x) {
                    for r in 0..rows {
                        let dst = &mut gx[(r0 + r) * n + c0..(r0 + r) * n + c0 + cols];
                        dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Assemble { parts } => {
                let cols = out.cols();
                for &(p, r0, c0) in parts {
                    let (pr, pc) = (self.value(p).rows(), self.value(p).cols());
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..pr {
                            let src = &g[(r0 + r) * cols + c0..(r0 + r) * cols + c0 + pc];
                            gp[r * pc..(r + 1) * pc].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = (out.rows(), out.cols());
                let mut c0 = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..m {
                            let src = &g[r * n + c0..r * n + c0 + w];
                            gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                        }
                    }
                    c0 += w;
                }
            }
            Op::Rotary { x, positions, base, head_dim } => {
                let d = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    let mut back = g.to_vec();
                    rotate_pairs(&mut back, d, *head_dim, positions, *base, -1.0);
                    gx.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
                }
            }
            Op::ReplaceRows { x, rows } => {
                let n = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    let mut keep = g.to_vec();
                    for &r in rows {
                        keep[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                    gx.iter_mut().zip(&keep).for_each(|(a, b)| *a += b);
                }
            }
            Op::SelectRows { x, rows } => {
                let n = out.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            gx[r * n + j] += g[i * n + j];
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
        }
    }
}

/// Gradients produced by one reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `v`, if `v` required a gradient.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Per-parameter gradient buffers summed across several reverse passes.
/// Accumulation is additive; callers zero the buffers once per step.
#[derive(Debug, Clone)]
pub struct GradAccumulator {
    buffers: Vec<Vec<f64>>,
}

impl GradAccumulator {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        Self { buffers: sizes.into_iter().map(|n| vec![0.0; n]).collect() }
    }

    pub fn zero(&mut self) {
        self.buffers.iter_mut().for_each(|b| b.iter_mut().for_each(|v| *v = 0.0));
    }

    /// Adds `grads[vars[i]]` into buffer `i`; vars without a gradient add
    /// nothing.
    pub fn accumulate(&mut self, grads: &Gradients, vars: &[Var]) {
        for (buf, &v) in self.buffers.iter_mut().zip(vars) {
            if let Some(g) = grads.get(v) {
                buf.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
    }

    /// Adds another accumulator buffer-by-buffer.
    pub fn merge(&mut self, other: &GradAccumulator) {
        for (a, b) in self.buffers.iter_mut().zip(&other.buffers) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.buffers
    }
}

fn softmax_along(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..len {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                sum += e;
            }
            for k in 0..len {
                out[at(k)] /= sum;
            }
        }
    }
    out
}

/// `log softmax(row)[t]`, stable.
pub fn log_softmax_at(row: &[f64], t: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[t] - lse
}

/// Softmax of a single vector.
pub fn softmax_vec(row: &[f64]) -> Vec<f64> {
    softmax_along(row, &[row.len()], 0)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn rotate_pairs(data: &mut [f64], d: usize, head_dim: usize, positions: &[usize], base: f64, sign: f64) {
    let half = head_dim / 2;
    for (r, &p) in positions.iter().enumerate() {
        let row = &mut data[r * d..(r + 1) * d];
        for head in row.chunks_mut(head_dim) {
            for i in 0..half {
                let theta = sign * p as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
                let (s, c) = theta.sin_cos();
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * c - b * s;
                head[2 * i + 1] = a * s + b * c;
            }
        }
    }
}

/// Compares the reverse-mode gradient of a scalar function against central
/// finite differences and returns the largest elementwise relative error,
/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Config("grad_check eps must be positive".into()));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(t.clone());
        let out = f(&mut g, v).map_err(|e| Error::Evaluation(e.to_string()))?;
        let val = g.value(out);
        if val.len() != 1 {
            return Err(Error::Evaluation("grad_check function must be scalar".into()));
        }
        if !val.item().is_finite() {
            return Err(Error::Evaluation("non-finite function value".into()));
        }
        Ok(val.item())
    };

    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let out = f(&mut g, xv).map_err(|e| Error::Evaluation(e.to_string()))?;
    let grads = g.backward(out)?;
    let analytic = grads.get(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let mut worst = 0.0_f64;
    let mut probe = x.clone();
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let plus = eval(&probe)?;
        probe.data[i] = orig - eps;
        let minus = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
