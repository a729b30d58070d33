//! Reverse-mode differentiation over [`FeatureMatrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter
//! the tape through [`Tape::param`], which reads them from a borrowed
//! [`ParamStore`]; [`Tape::backward`] then returns a [`Gradients`] table keyed
//! by the same [`ParamKey`]s.

use super::{FeatureMatrix, ParamKey, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamKey),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    SumAll(Var),
    MulConst(Var, FeatureMatrix),
    ScaleBy(Var, Var),
    Gather(Vec<(Var, usize, usize)>),
    CrossEntropy(Var, usize, FeatureMatrix),
}

#[derive(Debug)]
struct Node {
    value: FeatureMatrix,
    op: Op,
}

/// Per-parameter gradient table, shape-congruent with the owning store.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<FeatureMatrix>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: vec![None; store.len()] }
    }

    pub fn get(&self, key: ParamKey) -> Option<&FeatureMatrix> {
        self.grads.get(key.0).and_then(Option::as_ref)
    }

    /// Gradient entry, reading untouched parameters as zero.
    pub fn value(&self, key: ParamKey, index: usize) -> f64 {
        self.get(key).map_or(0.0, |g| g.data()[index])
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(FeatureMatrix::is_finite)
    }

    /// Euclidean norm over every entry.
    pub fn norm(&self) -> f64 {
        self.grads.iter().flatten().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    relu_pattern: Vec<bool>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_nodes: vec![None; store.len()], relu_pattern: Vec::new() }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sign of every ReLU pre-activation seen so far, in evaluation order.
    pub fn relu_pattern(&self) -> &[bool] {
        &self.relu_pattern
    }

    fn push(&mut self, value: FeatureMatrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &FeatureMatrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].value.rows()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn constant(&mut self, value: FeatureMatrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// The parameter's value as a tape variable; recorded once per tape.
    pub fn param(&mut self, key: ParamKey) -> Var {
        if let Some(v) = self.param_nodes[key.0] {
            return v;
        }
        let v = self.push(self.store.get(key).clone(), Op::Param(key));
        self.param_nodes[key.0] = Some(v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch { op, left: sa, right: sb });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(v, Op::MatMulNT(a, b)))
    }

    /// Adds the `1 x cols` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(Error::ShapeMismatch { op: "add_row", left: va.shape(), right: vb.shape() });
        }
        let mut out = va.clone();
        let brow = vb.row(0).to_vec();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(&brow) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `scale · a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).map(|x| scale * x + shift);
        self.push(v, Op::Affine(a, scale))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let mut pattern = Vec::with_capacity(va.data().len());
        let v = va.map(|x| x.max(0.0));
        pattern.extend(va.data().iter().map(|&x| x > 0.0));
        self.relu_pattern.extend(pattern);
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    /// Row-wise softmax with max subtraction. Columns with `keep[c] == false`
    /// receive an implicit −∞ logit; a row with every column masked is all
    /// zeros.
    pub fn softmax_rows(&mut self, a: Var, keep: Option<&[bool]>) -> Result<Var> {
        let va = self.value(a);
        if let Some(k) = keep {
            if k.len() != va.cols() {
                return Err(Error::ShapeMismatch { op: "softmax_rows mask", left: va.shape(), right: (1, k.len()) });
            }
        }
        let v = softmax_rows_masked(va, keep);
        Ok(self.push(v, Op::Softmax(a)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&FeatureMatrix> = parts.iter().map(|&p| self.value(p)).collect();
        let v = FeatureMatrix::concat_rows(&refs)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.rows(p));
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(Error::ShapeMismatch { op: "concat_cols", left: (rows, cols), right: s });
            }
            cols += s.1;
        }
        let mut out = FeatureMatrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let vp = self.value(p);
            for r in 0..rows {
                out.row_mut(r)[offset..offset + vp.cols()].copy_from_slice(vp.row(r));
            }
            offset += vp.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start > end || end > va.rows() {
            return Err(Error::InvalidArgument(format!("row slice {start}..{end} of {} rows", va.rows())));
        }
        let v = va.slice_rows(start, end);
        Ok(self.push(v, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        if start > end || end > va.cols() {
            return Err(Error::InvalidArgument(format!("column slice {start}..{end} of {} cols", va.cols())));
        }
        let mut out = FeatureMatrix::zeros(va.rows(), end - start);
        for r in 0..va.rows() {
            out.row_mut(r).copy_from_slice(&va.row(r)[start..end]);
        }
        Ok(self.push(out, Op::SliceCols(a, start)))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        self.push(v, Op::MeanRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(FeatureMatrix::row_vector(vec![s]), Op::SumAll(a))
    }

    /// Elementwise product with a constant (dropout masks, fixed loss weights).
    pub fn mul_const(&mut self, a: Var, c: FeatureMatrix) -> Result<Var> {
        let va = self.value(a);
        if va.shape() != c.shape() {
            return Err(Error::ShapeMismatch { op: "mul_const", left: va.shape(), right: c.shape() });
        }
        let v = va.zip_map(&c, |x, y| x * y);
        Ok(self.push(v, Op::MulConst(a, c)))
    }

    /// `s · a` for a `1 x 1` variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::ShapeMismatch { op: "scale_by", left: self.shape(a), right: self.shape(s) });
        }
        let k = self.scalar(s);
        let v = self.value(a).map(|x| k * x);
        Ok(self.push(v, Op::ScaleBy(a, s)))
    }

    /// Collects single entries `(var, row, col)` into a `1 x n` row vector.
    pub fn gather(&mut self, picks: &[(Var, usize, usize)]) -> Result<Var> {
        let mut out = Vec::with_capacity(picks.len());
        for &(v, r, c) in picks {
            let m = self.value(v);
            if r >= m.rows() || c >= m.cols() {
                return Err(Error::InvalidArgument(format!("gather ({r},{c}) outside {:?}", m.shape())));
            }
            out.push(m.get(r, c));
        }
        Ok(self.push(FeatureMatrix::row_vector(out), Op::Gather(picks.to_vec())))
    }

    /// `−log softmax(logits)[target]` for a `1 x k` logit row.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let v = self.value(logits);
        if v.rows() != 1 || target >= v.cols() {
            return Err(Error::InvalidArgument(format!("cross_entropy target {target} for logits {:?}", v.shape())));
        }
        let probs = softmax_rows_masked(v, None);
        let max = v.row(0).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + v.row(0).iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - v.get(0, target);
        Ok(self.push(FeatureMatrix::row_vector(vec![loss]), Op::CrossEntropy(logits, target, probs)))
    }

    /// Gradients of the scalar `loss` with respect to every parameter that
    /// took part in its computation.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::InvalidArgument(format!("backward from non-scalar {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<FeatureMatrix>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(FeatureMatrix::filled(1, 1, 1.0));
        let mut out = Gradients::zeros_like(self.store);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(key) => {
                    let slot = &mut out.grads[key.0];
                    match slot {
                        Some(s) => s.add_assign(&g),
                        None => *slot = Some(g),
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b))?;
                    let gb = self.value(*a).matmul_tn(&g)?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulNT(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    let ga = g.matmul(self.value(*b))?;
                    let gb = g.matmul_tn(self.value(*a))?;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, b) => {
                    let gb = sum_rows(&g);
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Affine(a, s) => {
                    let s = *s;
                    acc(&mut grads, *a, g.map(|x| s * x));
                }
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |x, pre| if pre > 0.0 { x } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = g.zip_map(&node.value, |x, y| x * y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let mut ga = FeatureMatrix::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let (pr, gr) = (p.row(r), g.row(r));
                        let inner: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for ((o, &pv), &gv) in ga.row_mut(r).iter_mut().zip(pr).zip(gr) {
                            *o = pv * (gv - inner);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.rows(p);
                        if n == 0 {
                            continue;
                        }
                        acc(&mut grads, p, g.slice_rows(offset, offset + n));
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let mut gp = FeatureMatrix::zeros(rows, cols);
                        for r in 0..rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + cols]);
                        }
                        acc(&mut grads, p, gp);
                        offset += cols;
                    }
                }
                Op::SliceRows(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = FeatureMatrix::zeros(rows, cols);
                    for r in 0..g.rows() {
                        ga.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = FeatureMatrix::zeros(rows, cols);
                    for r in 0..rows {
                        ga.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let (rows, cols) = self.shape(*a);
                    let mut ga = FeatureMatrix::zeros(rows, cols);
                    if rows > 0 {
                        let inv = 1.0 / rows as f64;
                        for r in 0..rows {
                            for (o, v) in ga.row_mut(r).iter_mut().zip(g.row(0)) {
                                *o = v * inv;
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let (rows, cols) = self.shape(*a);
                    acc(&mut grads, *a, FeatureMatrix::filled(rows, cols, g.data()[0]));
                }
                Op::MulConst(a, c) => {
                    acc(&mut grads, *a, g.zip_map(c, |x, y| x * y));
                }
                Op::ScaleBy(a, s) => {
                    let k = self.scalar(*s);
                    let gs: f64 = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    acc(&mut grads, *a, g.map(|x| k * x));
                    acc(&mut grads, *s, FeatureMatrix::filled(1, 1, gs));
                }
                Op::Gather(picks) => {
                    for (i, &(v, r, c)) in picks.iter().enumerate() {
                        let (rows, cols) = self.shape(v);
                        let mut gv = FeatureMatrix::zeros(rows, cols);
                        gv.set(r, c, g.data()[i]);
                        acc(&mut grads, v, gv);
                    }
                }
                Op::CrossEntropy(logits, target, probs) => {
                    let s = g.data()[0];
                    let mut gl = probs.map(|p| s * p);
                    let t = gl.get(0, *target);
                    gl.set(0, *target, t - s);
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<FeatureMatrix>], v: Var, g: FeatureMatrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn sum_rows(g: &FeatureMatrix) -> FeatureMatrix {
    let mut out = FeatureMatrix::zeros(1, g.cols());
    for row in g.iter_rows() {
        for (o, v) in out.data_mut().iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows_masked(x: &FeatureMatrix, keep: Option<&[bool]>) -> FeatureMatrix {
    let mut out = FeatureMatrix::zeros(x.rows(), x.cols());
    let kept = |c: usize| keep.map_or(true, |k| k[c]);
    for r in 0..x.rows() {
        let row = x.row(r);
        let max = row.iter().enumerate().filter(|(c, _)| kept(*c)).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            continue;
        }
        let orow = out.row_mut(r);
        let mut sum = 0.0;
        for (c, (o, &v)) in orow.iter_mut().zip(row).enumerate() {
            if kept(c) {
                *o = (v - max).exp();
                sum += *o;
            }
        }
        orow.iter_mut().for_each(|o| *o /= sum);
    }
    out
}
