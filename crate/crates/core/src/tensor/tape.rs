use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Softplus(Var),
    Square(Var),
    Ln(Var),
    Abs(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    RowProject(Var, Var),
    GatherRows(Var, Vec<usize>),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::RowProject(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Tanh(a)
            | Op::Softplus(a)
            | Op::Square(a)
            | Op::Ln(a)
            | Op::Abs(a)
            | Op::SoftmaxRows(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::GatherRows(a, _) => vec![*a],
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    shape: [usize; 2],
    value: Vec<f64>,
    op: Op,
    /// Whether any trainable parameter feeds this node.
    needs: bool,
}

/// Primitive whose backward rule is deliberately perturbed. Test-only hook
/// for verifying that gradient checks catch a broken chain rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultInjection {
    Tanh,
    Softplus,
    MatMul,
}

/// Linear record of the forward computation. Nodes are appended in
/// evaluation order, so reverse index order is a valid reverse topological
/// order for the backward sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<FaultInjection>,
}

pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let row = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[k * r..(k + 1) * r];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

// out[p×q] += a[p×r] · b[q×r]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for i in 0..p {
        let arow = &a[i * r..(i + 1) * r];
        for j in 0..q {
            let brow = &b[j * r..(j + 1) * r];
            out[i * q + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// out[q×r] += a[p×q]ᵀ · b[p×r]
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], p: usize, q: usize, r: usize) {
    for k in 0..p {
        let brow = &b[k * r..(k + 1) * r];
        for i in 0..q {
            let aki = a[k * q + i];
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out[i * r..(i + 1) * r];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn broadcast_shape(a: [usize; 2], b: [usize; 2]) -> Option<[usize; 2]> {
    let mut out = [0; 2];
    for d in 0..2 {
        out[d] = match (a[d], b[d]) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

#[inline]
fn bidx(shape: [usize; 2], i: usize, j: usize) -> usize {
    let ii = if shape[0] == 1 { 0 } else { i };
    let jj = if shape[1] == 1 { 0 } else { j };
    ii * shape[1] + jj
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: FaultInjection) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: [usize; 2], value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape[0] * shape[1], value.len());
        let needs = op.inputs().iter().any(|v| self.nodes[v.0].needs);
        self.nodes.push(Node { shape, value, op, needs });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.to_vec(), n.value.clone()).expect("node shape consistent")
    }

    fn shape2(t: &Tensor) -> Result<[usize; 2]> {
        match t.shape() {
            [r, c] => Ok([*r, *c]),
            [n] => Ok([1, *n]),
            [] => Ok([1, 1]),
            other => Err(Error::Dimension {
                op: "tape",
                lhs: other.to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// Record a constant (no gradient flows out of it).
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        let shape = Self::shape2(t)?;
        Ok(self.push(shape, t.values().to_vec(), Op::Leaf))
    }

    pub fn constant_from(&mut self, rows: usize, cols: usize, values: Vec<f64>) -> Result<Var> {
        if rows * cols != values.len() {
            return Err(Error::Dimension {
                op: "constant",
                lhs: vec![rows, cols],
                rhs: vec![values.len()],
            });
        }
        Ok(self.push([rows, cols], values, Op::Leaf))
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.push([1, 1], vec![x], Op::Leaf)
    }

    /// Record a parameter read. Gradients reaching this node are accumulated
    /// into the store on [`Tape::backward`] if the parameter is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let t = &store.get(id).tensor;
        let shape = Self::shape2(t)?;
        let v = self.push(shape, t.values().to_vec(), Op::Param(id));
        self.nodes[v.0].needs = store.get(id).trainable;
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [p, q] = self.shape(a);
        let [q2, r] = self.shape(b);
        if q != q2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: vec![p, q],
                rhs: vec![q2, r],
            });
        }
        let mut out = vec![0.0; p * r];
        gemm(self.value(a), self.value(b), &mut out, p, q, r);
        Ok(self.push([p, r], out, Op::MatMul(a, b)))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<([usize; 2], Vec<f64>)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let out = broadcast_shape(sa, sb).ok_or_else(|| Error::Dimension {
            op: name,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let (va, vb) = (self.value(a), self.value(b));
        let mut v = Vec::with_capacity(out[0] * out[1]);
        for i in 0..out[0] {
            for j in 0..out[1] {
                v.push(f(va[bidx(sa, i, j)], vb[bidx(sb, i, j)]));
            }
        }
        Ok((out, v))
    }

    /// Elementwise sum with size-1 broadcasting on either axis.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(s, v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(s, v, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(s, v, Op::Mul(a, b)))
    }

    /// Elementwise quotient with broadcasting.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, v) = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(s, v, Op::Div(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).iter().map(|x| x * k).collect();
        self.push(self.shape(a), v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).iter().map(|x| x + k).collect();
        self.push(self.shape(a), v, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(self.shape(a), v, Op::Tanh(a))
    }

    /// `ln(1 + eˣ)`, strictly positive for finite input.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| softplus(x)).collect();
        self.push(self.shape(a), v, Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x * x).collect();
        self.push(self.shape(a), v, Op::Square(a))
    }

    /// Natural logarithm; every input must be positive.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|x| !(**x > 0.0)) {
            return Err(Error::contract(format!("ln of non-positive value {x}")));
        }
        let v = self.value(a).iter().map(|x| x.ln()).collect();
        Ok(self.push(self.shape(a), v, Op::Ln(a)))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.abs()).collect();
        self.push(self.shape(a), v, Op::Abs(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let [r, c] = self.shape(a);
        let x = self.value(a);
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                v[i * c + j] = e;
                z += e;
            }
            v[i * c..(i + 1) * c].iter_mut().for_each(|e| *e /= z);
        }
        self.push([r, c], v, Op::SoftmaxRows(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let [r, c] = self.shape(a);
        let x = self.value(a);
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                v[j * r + i] = x[i * c + j];
            }
        }
        self.push([c, r], v, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        if r * c != rows * cols {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: vec![r, c],
                rhs: vec![rows, cols],
            });
        }
        let v = self.value(a).to_vec();
        Ok(self.push([rows, cols], v, Op::Reshape(a)))
    }

    /// Stack operands vertically; all must share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let c = self.shape(*first)[1];
        let mut rows = 0;
        let mut v = Vec::new();
        for &p in parts {
            let [pr, pc] = self.shape(p);
            if pc != c {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: vec![rows, c],
                    rhs: vec![pr, pc],
                });
            }
            rows += pr;
            v.extend_from_slice(self.value(p));
        }
        Ok(self.push([rows, c], v, Op::ConcatRows(parts.to_vec())))
    }

    /// Place operands side by side; all must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let r = self.shape(*first)[0];
        let mut cols = 0;
        for &p in parts {
            let [pr, pc] = self.shape(p);
            if pr != r {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: vec![r, cols],
                    rhs: vec![pr, pc],
                });
            }
            cols += pc;
        }
        let mut v = vec![0.0; r * cols];
        let mut off = 0;
        for &p in parts {
            let pc = self.shape(p)[1];
            let pv = self.value(p);
            for i in 0..r {
                v[i * cols + off..i * cols + off + pc].copy_from_slice(&pv[i * pc..(i + 1) * pc]);
            }
            off += pc;
        }
        Ok(self.push([r, cols], v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        if start + len > r {
            return Err(Error::Dimension {
                op: "slice_rows",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let v = self.value(a)[start * c..(start + len) * c].to_vec();
        Ok(self.push([len, c], v, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let [r, c] = self.shape(a);
        if start + len > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let x = self.value(a);
        let mut v = Vec::with_capacity(r * len);
        for i in 0..r {
            v.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        Ok(self.push([r, len], v, Op::SliceCols(a, start)))
    }

    /// Rows of `a` picked by `indices` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let [r, c] = self.shape(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension {
                op: "gather_rows",
                lhs: vec![r, c],
                rhs: vec![bad],
            });
        }
        let x = self.value(a);
        let mut v = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            v.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        Ok(self.push([indices.len(), c], v, Op::GatherRows(a, indices.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        self.push([1, 1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.iter().sum::<f64>() / x.len() as f64;
        self.push([1, 1], vec![s], Op::Mean(a))
    }

    /// Column-wise mean over rows: `[r×c] → [1×c]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let [r, c] = self.shape(a);
        let x = self.value(a);
        let mut v = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                v[j] += x[i * c + j];
            }
        }
        v.iter_mut().for_each(|e| *e /= r as f64);
        self.push([1, c], v, Op::MeanRows(a))
    }

    /// Per-row blockwise inner products: `proj[m × n·τ]`, `x[m × τ]` gives
    /// `out[j, i] = Σ_t proj[j, i·τ + t] · x[j, t]`.
    pub fn row_project(&mut self, proj: Var, x: Var) -> Result<Var> {
        let [m, nt] = self.shape(proj);
        let [m2, tau] = self.shape(x);
        if m != m2 || tau == 0 || nt % tau != 0 {
            return Err(Error::Dimension {
                op: "row_project",
                lhs: vec![m, nt],
                rhs: vec![m2, tau],
            });
        }
        let n = nt / tau;
        let (pv, xv) = (self.value(proj), self.value(x));
        let mut v = vec![0.0; m * n];
        for j in 0..m {
            let xr = &xv[j * tau..(j + 1) * tau];
            for i in 0..n {
                let pr = &pv[j * nt + i * tau..j * nt + (i + 1) * tau];
                v[j * n + i] = pr.iter().zip(xr).map(|(a, b)| a * b).sum();
            }
        }
        Ok(self.push([m, n], v, Op::RowProject(proj, x)))
    }

    /// Mean squared difference, reduced to a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "mse",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Affine map `x·W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    /// Single-head scaled dot-product attention, `softmax(QKᵀ/√d)·V`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let sq = self.shape(q);
        if sq != self.shape(k) || sq != self.shape(v) || sq[1] == 0 {
            return Err(Error::Dimension {
                op: "attention",
                lhs: sq.to_vec(),
                rhs: self.shape(k).to_vec(),
            });
        }
        let kt = self.transpose(k);
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (sq[1] as f64).sqrt());
        let weights = self.softmax_rows(scaled);
        self.matmul(weights, v)
    }

    /// Reverse sweep from a scalar `loss`. Gradients of trainable parameters
    /// are added to whatever the store already holds, so several tapes can
    /// accumulate into one batch gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    if store.get(*id).trainable {
                        store.get_mut(*id).tensor.accumulate_grad(&g);
                    }
                }
                Op::MatMul(a, b) => {
                    let [p, q] = self.shape(*a);
                    let r = self.shape(*b)[1];
                    if self.node(*a).needs {
                        let mut da = vec![0.0; p * q];
                        gemm_nt(&g, self.value(*b), &mut da, p, q, r);
                        if self.fault == Some(FaultInjection::MatMul) {
                            da.iter_mut().for_each(|x| *x *= 1.1);
                        }
                        acc(&mut adj, &self.nodes, *a, &da);
                    }
                    if self.node(*b).needs {
                        let mut db = vec![0.0; q * r];
                        gemm_tn(self.value(*a), &g, &mut db, p, q, r);
                        acc(&mut adj, &self.nodes, *b, &db);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                    let out = node.shape;
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let mut da = vec![0.0; sa[0] * sa[1]];
                    let mut db = vec![0.0; sb[0] * sb[1]];
                    let (va, vb) = (self.value(*a), self.value(*b));
                    for i in 0..out[0] {
                        for j in 0..out[1] {
                            let gij = g[i * out[1] + j];
                            let (ia, ib) = (bidx(sa, i, j), bidx(sb, i, j));
                            match node.op {
                                Op::Add(..) => {
                                    da[ia] += gij;
                                    db[ib] += gij;
                                }
                                Op::Sub(..) => {
                                    da[ia] += gij;
                                    db[ib] -= gij;
                                }
                                Op::Div(..) => {
                                    da[ia] += gij / vb[ib];
                                    db[ib] -= gij * va[ia] / (vb[ib] * vb[ib]);
                                }
                                _ => {
                                    da[ia] += gij * vb[ib];
                                    db[ib] += gij * va[ia];
                                }
                            }
                        }
                    }
                    acc(&mut adj, &self.nodes, *a, &da);
                    acc(&mut adj, &self.nodes, *b, &db);
                }
                Op::Scale(a, k) => {
                    let d: Vec<f64> = g.iter().map(|x| x * k).collect();
                    acc(&mut adj, &self.nodes, *a, &d);
                }
                Op::AddScalar(a) | Op::Reshape(a) => acc(&mut adj, &self.nodes, *a, &g),
                Op::Tanh(a) => {
                    let k = if self.fault == Some(FaultInjection::Tanh) { 1.1 } else { 1.0 };
                    let d: Vec<f64> = g.iter().zip(&node.value).map(|(gi, y)| k * gi * (1.0 - y * y)).collect();
                    acc(&mut adj, &self.nodes, *a, &d);
                }
                Op::Softplus(a) => {
                    let k = if self.fault == Some(FaultInjection::Softplus) { 1.1 } else { 1.0 };
                    let d: Vec<f64> = g.iter().zip(self.value(*a)).map(|(gi, x)| k * gi * sigmoid(*x)).collect();
                    acc(&mut adj, &self.nodes, *a, &d);
                }
                Op::Square(a) => {
                    let d: Vec<f64> = g.iter().zip(self.value(*a)).map(|(gi, x)| 2.0 * gi * x).collect();
                    acc(&mut adj, &self.nodes, *a, &d);
                }
                Op::Ln(a) => {
                    let d: Vec<f64> = g.iter().zip(self.value(*a)).map(|(gi, x)| gi / x).collect();
                    acc(&mut adj, &self.nodes, *a, &d);
                }
                Op::Abs(a) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a))
                        .map(|(gi, x)| if *x > 0.0 { *gi } else if *x < 0.0 { -gi } else { 0.0 })
                        .collect();
                    acc(&mut adj, &self.nodes, *a, &d);
                }
                Op::SoftmaxRows(a) => {
                    let [r, c] = node.shape;
                    let y = &node.value;
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        let dot: f64 = (0..c).map(|j| g[i * c + j] * y[i * c + j]).sum();
                        for j in 0..c {
                            d[i * c + j] = y[i * c + j] * (g[i * c + j] - dot);
                        }
                    }
                    acc(&mut adj, &self.nodes, *a, &d);
                }
                Op::Transpose(a) => {
                    let [r, c] = self.shape(*a);
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = g[j * r + i];
                        }
                    }
                    acc(&mut adj, &self.nodes, *a, &d);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.value(*p).len();
                        acc(&mut adj, &self.nodes, *p, &g[off..off + n]);
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let [r, cols] = node.shape;
                    let mut off = 0;
                    for p in parts {
                        let pc = self.shape(*p)[1];
                        let mut d = Vec::with_capacity(r * pc);
                        for i in 0..r {
                            d.extend_from_slice(&g[i * cols + off..i * cols + off + pc]);
                        }
                        acc(&mut adj, &self.nodes, *p, &d);
                        off += pc;
                    }
                }
                Op::SliceRows(a, start) => {
                    let [r, c] = self.shape(*a);
                    let mut d = vec![0.0; r * c];
                    d[start * c..start * c + g.len()].copy_from_slice(&g);
                    acc(&mut adj, &self.nodes, *a, &d);
                }
                Op::SliceCols(a, start) => {
                    let [r, c] = self.shape(*a);
                    let len = node.shape[1];
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        d[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    acc(&mut adj, &self.nodes, *a, &d);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    acc(&mut adj, &self.nodes, *a, &vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    acc(&mut adj, &self.nodes, *a, &vec![g[0] / n as f64; n]);
                }
                Op::MeanRows(a) => {
                    let [r, c] = self.shape(*a);
                    let mut d = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] = g[j] / r as f64;
                        }
                    }
                    acc(&mut adj, &self.nodes, *a, &d);
                }
                Op::RowProject(proj, x) => {
                    let [m, nt] = self.shape(*proj);
                    let tau = self.shape(*x)[1];
                    let n = nt / tau;
                    let (pv, xv) = (self.value(*proj), self.value(*x));
                    let mut dp = vec![0.0; m * nt];
                    let mut dx = vec![0.0; m * tau];
                    for j in 0..m {
                        for i in 0..n {
                            let gji = g[j * n + i];
                            let base = j * nt + i * tau;
                            for t in 0..tau {
                                dp[base + t] += gji * xv[j * tau + t];
                                dx[j * tau + t] += gji * pv[base + t];
                            }
                        }
                    }
                    acc(&mut adj, &self.nodes, *proj, &dp);
                    acc(&mut adj, &self.nodes, *x, &dx);
                }
                Op::GatherRows(a, indices) => {
                    let [r, c] = self.shape(*a);
                    let mut d = vec![0.0; r * c];
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            d[i * c + j] += g[k * c + j];
                        }
                    }
                    acc(&mut adj, &self.nodes, *a, &d);
                }
            }
        }
        Ok(())
    }
}

fn acc(adj: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: &[f64]) {
    if !nodes[v.0].needs {
        return;
    }
    match &mut adj[v.0] {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}
