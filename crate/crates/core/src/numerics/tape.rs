//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Nodes are pushed in evaluation order, so the tape itself is a valid
//! topological order and `backward` is a single reverse sweep. Every value is
//! viewed as a matrix whose columns are the last extent; batch, time and edge
//! axes are folded into rows by the callers.

use std::collections::HashMap;

use super::store::ParameterStore;
use super::tensor::{rows_cols, Tensor};
use super::Real;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Deliberately wrong backward rules, used as negative controls for the
/// gradient audit.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradFault {
    /// The right operand of every matmul receives half its gradient.
    HalveMatMulRhs,
    /// ReLU passes the upstream gradient through unmasked.
    ReluPassThrough,
}

enum Op<F> {
    Input,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Relu(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, index: Vec<Option<u32>> },
    ScatterAddRows { x: Var, index: Vec<u32> },
    GatherCols { x: Var, index: Vec<u32> },
    Reshape(Var),
    Transpose(Var),
    BlockLeftMatmul { a: Var, x: Var },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<F> },
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<String, Var>,
    fault: Option<GradFault>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep. Only leaves (inputs and
/// parameters) keep their buffers.
pub struct Grads<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Grads<F> {
    /// Gradient of a leaf; `None` when the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: GradFault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node invariant")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    fn rc(&self, v: Var) -> (usize, usize) {
        rows_cols(&self.nodes[v.0].shape)
    }

    /// Constant input; receives a gradient buffer but is never trained.
    pub fn input(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Input)
    }

    pub fn input_raw(&mut self, shape: Vec<usize>, value: Vec<F>) -> Result<Var> {
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::ShapeMismatch {
                op: "input",
                left: shape,
                right: vec![value.len()],
            });
        }
        Ok(self.push(shape, value, Op::Input))
    }

    /// Trainable leaf bound to a store path. Repeated requests for the same
    /// path return the same node.
    pub fn param(&mut self, store: &ParameterStore<F>, path: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(path) {
            return Ok(v);
        }
        let t = store.get(path)?;
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param,
        );
        self.params.insert(path.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rc(a);
        let (k2, n) = self.rc(b);
        if k != k2 || self.shape(b).len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            F::one(),
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            F::zero(),
            &mut out,
            n as isize,
            1,
        );
        let mut shape = self.shape(a).to_vec();
        *shape.last_mut().expect("rank >= 1") = n;
        Ok(self.push(shape, out, Op::MatMul(a, b)))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        if self.value(b).len() != cols {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let bias = self.value(b);
        let mut out = self.value(x).to_vec();
        for r in 0..rows {
            for (o, &bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddBias(x, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu(x))
    }

    /// Concatenates along the last extent; every part must have the same
    /// number of rows.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::ShapeMismatch {
            op: "concat_cols",
            left: vec![],
            right: vec![],
        })?;
        let (rows, _) = self.rc(first);
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.rc(p);
            if r != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let (_, c) = self.rc(p);
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let mut shape = self.shape(first).to_vec();
        *shape.last_mut().expect("rank >= 1") = total;
        Ok(self.push(shape, out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        if start + len > cols || len == 0 {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: self.shape(x).to_vec(),
                right: vec![start, len],
            });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&v[r * cols + start..r * cols + start + len]);
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        Ok(self.push(shape, out, Op::SliceCols { x, start }))
    }

    /// Row selection; `None` entries produce zero rows. Output is 2-D.
    pub fn gather_rows(&mut self, x: Var, index: Vec<Option<u32>>) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        let v = self.value(x);
        let mut out = vec![F::zero(); index.len() * cols];
        for (r, src) in index.iter().enumerate() {
            if let Some(s) = *src {
                let s = s as usize;
                if s >= rows {
                    return Err(Error::ShapeMismatch {
                        op: "gather_rows",
                        left: self.shape(x).to_vec(),
                        right: vec![s],
                    });
                }
                out[r * cols..(r + 1) * cols].copy_from_slice(&v[s * cols..(s + 1) * cols]);
            }
        }
        Ok(self.push(vec![index.len(), cols], out, Op::GatherRows { x, index }))
    }

    /// `out[index[r]] += x[r]` into `out_rows` zero rows. Output is 2-D.
    pub fn scatter_add_rows(&mut self, x: Var, index: Vec<u32>, out_rows: usize) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        if index.len() != rows || index.iter().any(|&i| i as usize >= out_rows) {
            return Err(Error::ShapeMismatch {
                op: "scatter_add_rows",
                left: self.shape(x).to_vec(),
                right: vec![index.len(), out_rows],
            });
        }
        let v = self.value(x);
        let mut out = vec![F::zero(); out_rows * cols];
        for (r, &dst) in index.iter().enumerate() {
            let d = dst as usize;
            for (o, &xv) in out[d * cols..(d + 1) * cols]
                .iter_mut()
                .zip(&v[r * cols..(r + 1) * cols])
            {
                *o += xv;
            }
        }
        Ok(self.push(
            vec![out_rows, cols],
            out,
            Op::ScatterAddRows { x, index },
        ))
    }

    /// Column selection. Output is 2-D.
    pub fn gather_cols(&mut self, x: Var, index: Vec<u32>) -> Result<Var> {
        let (rows, cols) = self.rc(x);
        if index.iter().any(|&i| i as usize >= cols) {
            return Err(Error::ShapeMismatch {
                op: "gather_cols",
                left: self.shape(x).to_vec(),
                right: vec![index.len()],
            });
        }
        let v = self.value(x);
        let n = index.len();
        let mut out = Vec::with_capacity(rows * n);
        for r in 0..rows {
            out.extend(index.iter().map(|&c| v[r * cols + c as usize]));
        }
        Ok(self.push(vec![rows, n], out, Op::GatherCols { x, index }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape,
            });
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape(x)))
    }

    /// Matrix transpose of the row/column view.
    pub fn transpose(&mut self, x: Var) -> Var {
        let (rows, cols) = self.rc(x);
        let v = self.value(x);
        let mut out = vec![F::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = v[r * cols + c];
            }
        }
        self.push(vec![cols, rows], out, Op::Transpose(x))
    }

    /// Applies the square matrix `a` [n×n] from the left to each consecutive
    /// block of `n` rows of `x`.
    pub fn block_left_matmul(&mut self, a: Var, x: Var) -> Result<Var> {
        let (n, n2) = self.rc(a);
        let (rows, d) = self.rc(x);
        if n != n2 || n == 0 || rows % n != 0 {
            return Err(Error::ShapeMismatch {
                op: "block_left_matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(x).to_vec(),
            });
        }
        let mut out = vec![F::zero(); rows * d];
        let av = self.value(a);
        let xv = self.value(x);
        for blk in 0..rows / n {
            let off = blk * n * d;
            F::gemm(
                n,
                n,
                d,
                F::one(),
                av,
                n as isize,
                1,
                &xv[off..off + n * d],
                d as isize,
                1,
                F::zero(),
                &mut out[off..off + n * d],
                d as isize,
                1,
            );
        }
        Ok(self.push(vec![rows, d], out, Op::BlockLeftMatmul { a, x }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    /// Summed softmax cross-entropy over the rows of `logits` [B×C].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, classes) = self.rc(logits);
        if rows != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::TargetOutOfRange { target: t, classes });
        }
        let v = self.value(logits);
        let mut probs = vec![F::zero(); rows * classes];
        let mut total = F::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &v[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for (p, &x) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (x - max).exp();
                z += *p;
            }
            for p in &mut probs[r * classes..(r + 1) * classes] {
                *p = *p / z;
            }
            total += z.ln() - (row[t] - max);
        }
        Ok(self.push(
            vec![1],
            vec![total],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn grads(&self, loss: Var) -> Result<Grads<F>> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            let is_leaf = matches!(node.op, Op::Input | Op::Param);
            if is_leaf {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
        }
        Ok(Grads { grads })
    }

    /// Runs the reverse sweep and adds every parameter gradient into the
    /// store. Parameters the loss does not reach get a zero gradient.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore<F>) -> Result<()> {
        let grads = self.grads(loss)?;
        store.ensure_grads();
        for (path, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.add_grad(path, g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[id];
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let len = self.nodes[v.0].value.len();
                grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
            }};
        }
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.rc(*a);
                let (_, n) = self.rc(*b);
                let av = self.value(*a);
                let bv = self.value(*b);
                let ga = acc!(*a);
                // ga += g · bᵀ
                F::gemm(m, n, k, F::one(), g, n as isize, 1, bv, 1, n as isize, F::one(), ga, k as isize, 1);
                let scale = match self.fault {
                    Some(GradFault::HalveMatMulRhs) => F::c(0.5),
                    _ => F::one(),
                };
                let gb = acc!(*b);
                // gb += aᵀ · g
                F::gemm(k, m, n, scale, av, 1, k as isize, g, n as isize, 1, F::one(), gb, n as isize, 1);
            }
            Op::AddBias(x, b) => {
                let (rows, cols) = self.rc(*x);
                let gx = acc!(*x);
                for (o, &gv) in gx.iter_mut().zip(g) {
                    *o += gv;
                }
                let gb = acc!(*b);
                for r in 0..rows {
                    for (o, &gv) in gb.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *o += gv;
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    let gv = acc!(v);
                    for (o, &x) in gv.iter_mut().zip(g) {
                        *o += x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = acc!(*a);
                for ((o, &x), &y) in ga.iter_mut().zip(g).zip(bv) {
                    *o += x * y;
                }
                let gb = acc!(*b);
                for ((o, &x), &y) in gb.iter_mut().zip(g).zip(av) {
                    *o += x * y;
                }
            }
            Op::Scale(x, s) => {
                let gx = acc!(*x);
                for (o, &v) in gx.iter_mut().zip(g) {
                    *o += v * *s;
                }
            }
            Op::Relu(x) => {
                let out = &node.value;
                let pass = self.fault == Some(GradFault::ReluPassThrough);
                let gx = acc!(*x);
                for ((o, &v), &y) in gx.iter_mut().zip(g).zip(out) {
                    if pass || y > F::zero() {
                        *o += v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = rows_cols(&node.shape);
                let mut off = 0;
                for &p in parts {
                    let (_, c) = self.rc(p);
                    let gp = acc!(p);
                    for r in 0..rows {
                        for (o, &v) in gp[r * c..(r + 1) * c]
                            .iter_mut()
                            .zip(&g[r * total + off..r * total + off + c])
                        {
                            *o += v;
                        }
                    }
                    off += c;
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, len) = rows_cols(&node.shape);
                let (_, cols) = self.rc(*x);
                let gx = acc!(*x);
                for r in 0..rows {
                    for (o, &v) in gx[r * cols + start..r * cols + start + len]
                        .iter_mut()
                        .zip(&g[r * len..(r + 1) * len])
                    {
                        *o += v;
                    }
                }
            }
            Op::GatherRows { x, index } => {
                let (_, cols) = self.rc(*x);
                let gx = acc!(*x);
                for (r, src) in index.iter().enumerate() {
                    if let Some(s) = *src {
                        let s = s as usize;
                        for (o, &v) in gx[s * cols..(s + 1) * cols]
                            .iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                        {
                            *o += v;
                        }
                    }
                }
            }
            Op::ScatterAddRows { x, index } => {
                let (_, cols) = self.rc(*x);
                let gx = acc!(*x);
                for (r, &dst) in index.iter().enumerate() {
                    let d = dst as usize;
                    for (o, &v) in gx[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(&g[d * cols..(d + 1) * cols])
                    {
                        *o += v;
                    }
                }
            }
            Op::GatherCols { x, index } => {
                let (rows, cols) = self.rc(*x);
                let n = index.len();
                let gx = acc!(*x);
                for r in 0..rows {
                    for (j, &c) in index.iter().enumerate() {
                        gx[r * cols + c as usize] += g[r * n + j];
                    }
                }
            }
            Op::Reshape(x) => {
                let gx = acc!(*x);
                for (o, &v) in gx.iter_mut().zip(g) {
                    *o += v;
                }
            }
            Op::Transpose(x) => {
                let (rows, cols) = self.rc(*x);
                let gx = acc!(*x);
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] += g[c * rows + r];
                    }
                }
            }
            Op::BlockLeftMatmul { a, x } => {
                let (n, _) = self.rc(*a);
                let (rows, d) = self.rc(*x);
                let av = self.value(*a);
                let xv = self.value(*x);
                let ga = acc!(*a);
                for blk in 0..rows / n {
                    let off = blk * n * d;
                    // ga += g_blk · x_blkᵀ
                    F::gemm(
                        n,
                        d,
                        n,
                        F::one(),
                        &g[off..off + n * d],
                        d as isize,
                        1,
                        &xv[off..off + n * d],
                        1,
                        d as isize,
                        F::one(),
                        ga,
                        n as isize,
                        1,
                    );
                }
                let gx = acc!(*x);
                for blk in 0..rows / n {
                    let off = blk * n * d;
                    // gx_blk += aᵀ · g_blk
                    F::gemm(
                        n,
                        n,
                        d,
                        F::one(),
                        av,
                        1,
                        n as isize,
                        &g[off..off + n * d],
                        d as isize,
                        1,
                        F::one(),
                        &mut gx[off..off + n * d],
                        d as isize,
                        1,
                    );
                }
            }
            Op::Sum(x) => {
                let gx = acc!(*x);
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (_, classes) = self.rc(*logits);
                let gl = acc!(*logits);
                for (r, &t) in targets.iter().enumerate() {
                    for c in 0..classes {
                        let onehot = if c == t { F::one() } else { F::zero() };
                        gl[r * classes + c] += g[0] * (probs[r * classes + c] - onehot);
                    }
                }
            }
        }
    }
}
