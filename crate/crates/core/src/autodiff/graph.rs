//! Recording graph and reverse sweep.
//!
//! Every op appends one node holding its value and enough saved state to
//! run its local gradient rule. Node ids are assigned in creation order, so
//! the reverse of that order is a valid topological order for the sweep.
//! Parameters enter by reference ([`Graph::param`]) and are never copied.

use std::borrow::Cow;
use std::ops::Range;
use std::rc::Rc;

use super::kernels::{gemm, sigmoid, softmax_rows};
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Column-block sparsity of the left operand of a matrix product.
///
/// Row `r` of the left matrix is nonzero only inside the column blocks listed
/// in `active[r]`; every other entry is a structural zero. The product skips
/// those entries and no gradient is propagated into them.
#[derive(Debug, Clone)]
pub struct BlockSparsity {
    pub block_len: usize,
    pub active: Vec<Vec<usize>>,
}

impl BlockSparsity {
    /// Rows grouped by block: `out[j]` lists the rows whose block `j` is active.
    fn rows_by_block(&self, n_blocks: usize) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); n_blocks];
        for (row, blocks) in self.active.iter().enumerate() {
            for &b in blocks {
                out[b].push(row);
            }
        }
        out
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Affine { x: Var, scale: f64 },
    Clamp { x: Var, lo: f64, hi: f64 },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumLastAxis(Var),
    AddRowBias { x: Var, bias: Var },
    ScaleRows { x: Var, scale: Var },
    MulConst { x: Var, factor: Vec<f64> },
    MatMul {
        a: Var,
        b: Var,
        sparsity: Option<Rc<BlockSparsity>>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
        starts: Vec<usize>,
        cols: Vec<f64>,
    },
    SegmentMax { x: Var, argmax: Vec<usize> },
    Gather { table: Var, ids: Vec<usize>, skip: Option<usize> },
    ScatterRows { x: Var, targets: Vec<usize> },
    SumRowGroups { x: Var, group: usize },
    Reshape(Var),
    Pick { x: Var, idx: Vec<usize> },
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

/// Operation tape for one forward/backward pass.
///
/// A graph is confined to one thread; parameters borrowed into it must not be
/// mutated until it is dropped (the borrow checker enforces this).
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients of leaf nodes produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf borrowed from a parameter tensor.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf borrowed from a parameter tensor (inference).
    pub fn param_frozen(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: Cow::Borrowed(t.data()),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Owned constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::from_parts(self.shape(v).to_vec(), self.value(v).to_vec())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, value, op, rg))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(shape, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    /// Elementwise clamp; the gradient passes only where `lo <= x <= hi`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = *self
            .shape(x)
            .last()
            .ok_or(Error::EmptyAxis("softmax"))?;
        let value = softmax_rows(self.value(x), cols);
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, Op::Softmax(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Vec::new(), vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Vec::new(), vec![s], Op::Mean(x), rg)
    }

    /// Sum over the last axis.
    pub fn sum_last_axis(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let (&cols, outer) = shape.split_last().ok_or(Error::EmptyAxis("sum_last_axis"))?;
        let outer = outer.to_vec();
        let value = self
            .value(x)
            .chunks_exact(cols)
            .map(|row| row.iter().sum())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(outer, value, Op::SumLastAxis(x), rg))
    }

    /// `x + bias` with `bias` broadcast along every row of the last axis.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = *self.shape(x).last().ok_or(Error::EmptyAxis("add_row_bias"))?;
        if self.shape(bias) != [cols] {
            return Err(Error::shape("add_row_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let value = self
            .value(x)
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(shape, value, Op::AddRowBias { x, bias }, rg))
    }

    /// Row `i` of the 2-D `x` multiplied by `scale[i]`.
    pub fn scale_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || self.value(scale).len() != shape[0] {
            return Err(Error::shape("scale_rows", shape, self.shape(scale)));
        }
        let cols = shape[1];
        let s = self.value(scale);
        let value = self
            .value(x)
            .chunks_exact(cols)
            .zip(s)
            .flat_map(|(row, &k)| row.iter().map(move |v| v * k))
            .collect();
        let shape = shape.to_vec();
        let rg = self.rg(&[x, scale]);
        Ok(self.push(shape, value, Op::ScaleRows { x, scale }, rg))
    }

    /// Elementwise product with a constant factor array (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Result<Var> {
        if factor.len() != self.value(x).len() {
            return Err(Error::shape("mul_const", self.shape(x), &[factor.len()]));
        }
        let value = self.value(x).iter().zip(&factor).map(|(a, b)| a * b).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, value, Op::MulConst { x, factor }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(x), rg))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            _ => Err(Error::shape(op, self.shape(v), &[])),
        }
    }

    /// Matrix product of `a [m×k]` and `b [k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, None)
    }

    /// Matrix product treating entries of `a` outside its active column
    /// blocks as structural zeros.
    pub fn matmul_block_sparse(
        &mut self,
        a: Var,
        b: Var,
        sparsity: Rc<BlockSparsity>,
    ) -> Result<Var> {
        self.matmul_impl(a, b, Some(sparsity))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, sparsity: Option<Rc<BlockSparsity>>) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        match &sparsity {
            None => gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false),
            Some(sp) => {
                if sp.active.len() != m || sp.block_len == 0 || k % sp.block_len != 0 {
                    return Err(Error::Config(format!(
                        "block sparsity ({} rows, block {}) does not fit a {m}x{k} operand",
                        sp.active.len(),
                        sp.block_len
                    )));
                }
                let n_blocks = k / sp.block_len;
                if sp.active.iter().flatten().any(|&j| j >= n_blocks) {
                    return Err(Error::Config("active block index out of range".into()));
                }
                let av = self.value(a);
                let bv = self.value(b);
                let bl = sp.block_len;
                for (j, rows) in sp.rows_by_block(n_blocks).iter().enumerate() {
                    if rows.is_empty() {
                        continue;
                    }
                    let lhs = gather_block(av, k, rows, j * bl, bl);
                    let mut tmp = vec![0.0; rows.len() * n];
                    gemm(rows.len(), bl, n, &lhs, false, &bv[j * bl * n..(j + 1) * bl * n], false, &mut tmp, false);
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = &mut out[r * n..(r + 1) * n];
                        for (d, s) in dst.iter_mut().zip(&tmp[i * n..(i + 1) * n]) {
                            *d += s;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, sparsity }, rg))
    }

    /// Valid 1-D cross-correlation of `x [T×c_in]` with `kernel [k×c_in×c_out]`.
    pub fn conv1d_valid(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (t, _) = self.matrix_dims("conv1d_valid", x)?;
        let k = *self.shape(kernel).first().unwrap_or(&0);
        if t < k {
            return Err(Error::SequenceTooShort { len: t, kernel: k });
        }
        self.conv1d_windows(x, kernel, bias, (0..=t - k).collect())
    }

    /// Cross-correlation evaluated only at the given window start rows.
    ///
    /// Output row `w` is the window starting at `starts[w]`. With
    /// `starts = 0..=T-k` this is exactly [`Graph::conv1d_valid`].
    pub fn conv1d_windows(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        starts: Vec<usize>,
    ) -> Result<Var> {
        let (t, c_in) = self.matrix_dims("conv1d", x)?;
        let (k, kc_in, c_out) = match *self.shape(kernel) {
            [k, ci, co] => (k, ci, co),
            _ => return Err(Error::shape("conv1d kernel", self.shape(kernel), &[])),
        };
        if kc_in != c_in {
            return Err(Error::shape("conv1d", self.shape(x), self.shape(kernel)));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::shape("conv1d bias", self.shape(bias), &[c_out]));
        }
        if t < k {
            return Err(Error::SequenceTooShort { len: t, kernel: k });
        }
        if let Some(&s) = starts.iter().find(|&&s| s + k > t) {
            return Err(Error::Config(format!(
                "conv window at {s} overruns sequence of length {t}"
            )));
        }
        let width = k * c_in;
        let xv = self.value(x);
        let mut cols = Vec::with_capacity(starts.len() * width);
        for &s in &starts {
            cols.extend_from_slice(&xv[s * c_in..s * c_in + width]);
        }
        let w = starts.len();
        let mut out = vec![0.0; w * c_out];
        let bv = self.value(bias);
        for row in out.chunks_exact_mut(c_out) {
            row.copy_from_slice(bv);
        }
        gemm(w, width, c_out, &cols, false, self.value(kernel), false, &mut out, true);
        let rg = self.rg(&[x, kernel, bias]);
        // The im2col buffer is only needed by the kernel gradient.
        let cols = if self.requires_grad(kernel) { cols } else { Vec::new() };
        Ok(self.push(
            vec![w, c_out],
            out,
            Op::Conv1d {
                x,
                kernel,
                bias,
                starts,
                cols,
            },
            rg,
        ))
    }

    /// Per-channel maximum over the rows of `x [T×c]`; ties go to the lowest row.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (t, c) = self.matrix_dims("global_max_pool", x)?;
        let pooled = self.segment_max_pool(x, &[0..t])?;
        self.reshape(pooled, &[c])
    }

    /// Per-channel maximum over each row range of `x [T×c]`, giving `[S×c]`.
    pub fn segment_max_pool(&mut self, x: Var, segments: &[Range<usize>]) -> Result<Var> {
        let (t, c) = self.matrix_dims("segment_max_pool", x)?;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(segments.len() * c);
        let mut argmax = Vec::with_capacity(segments.len() * c);
        for seg in segments {
            if seg.is_empty() {
                return Err(Error::EmptyAxis("segment_max_pool"));
            }
            if seg.end > t {
                return Err(Error::shape("segment_max_pool", self.shape(x), &[seg.end]));
            }
            for ch in 0..c {
                let mut best = seg.start;
                let mut best_v = xv[seg.start * c + ch];
                for r in seg.start + 1..seg.end {
                    let v = xv[r * c + ch];
                    if v > best_v {
                        best_v = v;
                        best = r;
                    }
                }
                out.push(best_v);
                argmax.push(best);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![segments.len(), c],
            out,
            Op::SegmentMax { x, argmax },
            rg,
        ))
    }

    /// Rows of `table [V×d]` selected by `ids`. Id `skip` reads as a zero row
    /// and its table row never receives gradient.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], skip: Option<usize>) -> Result<Var> {
        let (v, d) = self.matrix_dims("gather_rows", table)?;
        if ids.is_empty() {
            return Err(Error::EmptyAxis("gather_rows"));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocabulary { id, size: v });
            }
            if Some(id) == skip {
                out.extend(std::iter::repeat(0.0).take(d));
            } else {
                out.extend_from_slice(&tv[id * d..(id + 1) * d]);
            }
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
                skip,
            },
            rg,
        ))
    }

    /// Places row `i` of `x [n×c]` at row `targets[i]` of a zero `[n_rows×c]` matrix.
    pub fn scatter_rows(&mut self, x: Var, targets: &[usize], n_rows: usize) -> Result<Var> {
        let (n, c) = self.matrix_dims("scatter_rows", x)?;
        if targets.len() != n {
            return Err(Error::shape("scatter_rows", self.shape(x), &[targets.len()]));
        }
        let mut seen = vec![false; n_rows];
        for &t in targets {
            if t >= n_rows || std::mem::replace(&mut seen[t], true) {
                return Err(Error::Config(format!("invalid or repeated scatter target {t}")));
            }
        }
        let xv = self.value(x);
        let mut out = vec![0.0; n_rows * c];
        for (i, &t) in targets.iter().enumerate() {
            out[t * c..(t + 1) * c].copy_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![n_rows, c],
            out,
            Op::ScatterRows {
                x,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Sums consecutive groups of `group` rows: `[n·group × c]` → `[n × c]`.
    pub fn sum_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("sum_row_groups", x)?;
        if group == 0 || r % group != 0 {
            return Err(Error::shape("sum_row_groups", self.shape(x), &[group]));
        }
        let mut out = vec![0.0; r / group * c];
        for (i, row) in self.value(x).chunks_exact(c).enumerate() {
            add_into(&mut out[i / group * c..(i / group + 1) * c], row);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![r / group, c], out, Op::SumRowGroups { x, group }, rg))
    }

    /// `out[r] = x[r, idx[r]]` for a 2-D `x`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims("pick", x)?;
        if idx.len() != r || idx.iter().any(|&i| i >= c) {
            return Err(Error::shape("pick", self.shape(x), &[idx.len()]));
        }
        let xv = self.value(x);
        let value = idx.iter().enumerate().map(|(row, &i)| xv[row * c + i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![r],
            value,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Returns the gradient of every trainable leaf the loss depends on.
    /// Interior gradients are released as soon as they have been propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if !self.requires_grad(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value[..];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |d| zip3(d, g, bv, |g, b| g * b));
                acc(*b, &mut |d| zip3(d, g, av, |g, a| g * a));
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |d| zip3(d, g, bv, |g, b| g / b));
                acc(*b, &mut |d| {
                    for (((d, g), a), b) in d.iter_mut().zip(g).zip(av).zip(bv) {
                        *d -= g * a / (b * b);
                    }
                });
            }
            Op::Neg(x) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g)),
            Op::Exp(x) => acc(*x, &mut |d| zip3(d, g, y, |g, y| g * y)),
            Op::Log(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |d| zip3(d, g, xv, |g, x| g / x));
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |d| zip3(d, g, xv, |g, x| 2.0 * g * x));
            }
            Op::Affine { x, scale } => acc(*x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += scale * g)
            }),
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x);
                acc(*x, &mut |d| {
                    zip3(d, g, xv, |g, x| if x >= *lo && x <= *hi { g } else { 0.0 })
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |d| zip3(d, g, xv, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Sigmoid(x) => acc(*x, &mut |d| zip3(d, g, y, |g, y| g * y * (1.0 - y))),
            Op::Softmax(x) => {
                let cols = *node.shape.last().expect("softmax has a last axis");
                acc(*x, &mut |d| {
                    for ((d, g), y) in d
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let dot: f64 = g.iter().zip(y).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
                            *d += y * (g - dot);
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SumLastAxis(x) => {
                let cols = *self.shape(*x).last().expect("non-empty shape");
                acc(*x, &mut |d| {
                    for (row, g) in d.chunks_exact_mut(cols).zip(g) {
                        row.iter_mut().for_each(|d| *d += g);
                    }
                });
            }
            Op::AddRowBias { x, bias } => {
                let cols = self.value(*bias).len();
                acc(*x, &mut |d| add_into(d, g));
                acc(*bias, &mut |d| {
                    for row in g.chunks_exact(cols) {
                        add_into(d, row);
                    }
                });
            }
            Op::ScaleRows { x, scale } => {
                let cols = node.shape[1];
                let (xv, sv) = (self.value(*x), self.value(*scale));
                acc(*x, &mut |d| {
                    for ((d, g), s) in d.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(sv) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s);
                    }
                });
                acc(*scale, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g.chunks_exact(cols)).zip(xv.chunks_exact(cols)) {
                        *d += g.iter().zip(x).map(|(g, x)| g * x).sum::<f64>();
                    }
                });
            }
            Op::MulConst { x, factor } => acc(*x, &mut |d| zip3(d, g, factor, |g, f| g * f)),
            Op::MatMul { a, b, sparsity } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                match sparsity {
                    None => {
                        // dA = dC·Bᵀ, dB = Aᵀ·dC
                        acc(*a, &mut |d| gemm(m, n, k, g, false, bv, true, d, true));
                        acc(*b, &mut |d| gemm(k, m, n, av, true, g, false, d, true));
                    }
                    Some(sp) => {
                        let bl = sp.block_len;
                        let by_block = sp.rows_by_block(k / bl);
                        acc(*a, &mut |d| {
                            for (j, rows) in by_block.iter().enumerate() {
                                if rows.is_empty() {
                                    continue;
                                }
                                let gr = gather_block(g, n, rows, 0, n);
                                let mut tmp = vec![0.0; rows.len() * bl];
                                gemm(rows.len(), n, bl, &gr, false, &bv[j * bl * n..(j + 1) * bl * n], true, &mut tmp, false);
                                for (ri, &r) in rows.iter().enumerate() {
                                    add_into(&mut d[r * k + j * bl..r * k + (j + 1) * bl], &tmp[ri * bl..(ri + 1) * bl]);
                                }
                            }
                        });
                        acc(*b, &mut |d| {
                            for (j, rows) in by_block.iter().enumerate() {
                                if rows.is_empty() {
                                    continue;
                                }
                                let lhs = gather_block(av, k, rows, j * bl, bl);
                                let gr = gather_block(g, n, rows, 0, n);
                                gemm(bl, rows.len(), n, &lhs, true, &gr, false, &mut d[j * bl * n..(j + 1) * bl * n], true);
                            }
                        });
                    }
                }
            }
            Op::Conv1d {
                x,
                kernel,
                bias,
                starts,
                cols,
            } => {
                let c_in = self.shape(*x)[1];
                let k = self.shape(*kernel)[0];
                let c_out = self.shape(*kernel)[2];
                let width = k * c_in;
                let w = starts.len();
                acc(*bias, &mut |d| {
                    for row in g.chunks_exact(c_out) {
                        add_into(d, row);
                    }
                });
                acc(*kernel, &mut |d| gemm(width, w, c_out, cols, true, g, false, d, true));
                let kv = self.value(*kernel);
                acc(*x, &mut |d| {
                    let mut dcols = vec![0.0; w * width];
                    gemm(w, c_out, width, g, false, kv, true, &mut dcols, false);
                    for (&s, dc) in starts.iter().zip(dcols.chunks_exact(width)) {
                        add_into(&mut d[s * c_in..s * c_in + width], dc);
                    }
                });
            }
            Op::SegmentMax { x, argmax } => {
                let c = node.shape[1];
                acc(*x, &mut |d| {
                    for (j, (&r, gv)) in argmax.iter().zip(g).enumerate() {
                        d[r * c + j % c] += gv;
                    }
                });
            }
            Op::Gather { table, ids, skip } => {
                let d_cols = node.shape[1];
                acc(*table, &mut |d| {
                    for (&id, row) in ids.iter().zip(g.chunks_exact(d_cols)) {
                        if Some(id) != *skip {
                            add_into(&mut d[id * d_cols..(id + 1) * d_cols], row);
                        }
                    }
                });
            }
            Op::SumRowGroups { x, group } => {
                let c = node.shape[1];
                acc(*x, &mut |d| {
                    for (i, row) in d.chunks_exact_mut(c).enumerate() {
                        add_into(row, &g[i / group * c..(i / group + 1) * c]);
                    }
                });
            }
            Op::ScatterRows { x, targets } => {
                let c = node.shape[1];
                acc(*x, &mut |d| {
                    for (row, &t) in d.chunks_exact_mut(c).zip(targets) {
                        add_into(row, &g[t * c..(t + 1) * c]);
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Pick { x, idx } => {
                let c = self.shape(*x)[1];
                acc(*x, &mut |d| {
                    for (row, (&i, gv)) in idx.iter().zip(g).enumerate() {
                        d[row * c + i] += gv;
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn zip3(d: &mut [f64], g: &[f64], other: &[f64], f: impl Fn(f64, f64) -> f64) {
    for ((d, &g), &o) in d.iter_mut().zip(g).zip(other) {
        *d += f(g, o);
    }
}

/// Copies columns `col0..col0+len` of the listed rows of a row-major matrix
/// with `stride` columns into a dense `rows.len()×len` buffer.
fn gather_block(src: &[f64], stride: usize, rows: &[usize], col0: usize, len: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * len);
    for &r in rows {
        out.extend_from_slice(&src[r * stride + col0..r * stride + col0 + len]);
    }
    out
}
