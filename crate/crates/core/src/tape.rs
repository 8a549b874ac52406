//! Reverse-mode differentiation over a recorded forward tape.
//!
//! Every primitive pushes its output and enough saved state onto the tape for
//! its backward rule. `Tape::backward` walks the tape once in reverse order.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::array::{matmul_into, Array};
use crate::lstm::{self, Dims, LstmCache};
use crate::real::Real;
use crate::error::{dim_err, Error, Result};

/// Norm floor used by cosine similarity so all-zero vectors stay finite.
pub const COSINE_NORM_FLOOR: f64 = 1e-8;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

/// Gradients keyed by parameter name.
pub type Gradients<F = f32> = BTreeMap<String, Array<F>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointwiseKind {
    Sigmoid,
    Tanh,
    Add,
    Mul,
    Sub,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    BiLstm { x: Var, params: [Var; 6], caches: [LstmCache<F>; 2], hidden: usize },
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    SliceCols { src: Var, start: usize },
    ConcatCols(Vec<Var>),
    SelectRows { src: Var, rows: Vec<usize> },
    Reshape(Var),
    PoolTime { src: Var, steps: usize },
    GatherCols { src: Var, cols: Vec<usize> },
    SumAll(Var),
    MeanAll(Var),
    SoftmaxRows { src: Var, tau: f64 },
    OffDiagSoftmax { src: Var, tau: f64 },
    CosineSim { src: Var, unit: Vec<f64>, norms: Vec<f64> },
    ContrastiveNll { src: Var, pos: Vec<usize>, tau: f64, weights: Vec<f64> },
}

struct Node<F> {
    value: Array<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Forward tape. One tape per forward/backward invocation.
pub struct Tape<F = f32> {
    nodes: Vec<Node<F>>,
    params: Vec<(String, Var)>,
}

impl<F> Default for Tape<F> {
    fn default() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }
}

fn is_scalar<F: Real>(a: &Array<F>) -> bool {
    a.len() == 1
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array<F> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.values()[0]
    }

    /// Registers a named trainable leaf.
    pub fn param(&mut self, name: &str, value: Array<F>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        v
    }

    /// Registers a constant leaf (no gradient).
    pub fn constant(&mut self, value: Array<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Bidirectional LSTM over `x (n × T)` univariate series. `fwd` and `bwd`
    /// are `[w_ih (1×4H), w_hh (H×4H), b (1×4H)]`. Output is `n × (T·2H)` with
    /// step `t` laid out as `[forward state, backward state]`.
    pub fn bilstm(&mut self, x: Var, fwd: [Var; 3], bwd: [Var; 3]) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(dim_err!("LSTM input must be n × T, got {:?}", vx.shape()));
        }
        let (n, steps) = (vx.rows(), vx.cols());
        let h = self.value(fwd[1]).rows();
        for dir in [&fwd, &bwd] {
            let ok = self.value(dir[0]).shape() == [1, 4 * h]
                && self.value(dir[1]).shape() == [h, 4 * h]
                && self.value(dir[2]).shape() == [1, 4 * h];
            if !ok || h == 0 {
                return Err(dim_err!("inconsistent LSTM parameter shapes for hidden width {h}"));
            }
        }
        let run = |dir: &[Var; 3], reverse: bool| {
            let d = Dims { n, steps, hidden: h, reverse };
            lstm::forward(vx.values(), self.value(dir[0]).values(), self.value(dir[1]).values(), self.value(dir[2]).values(), d)
        };
        let cf = run(&fwd, false);
        let cb = run(&bwd, true);
        let width = steps * 2 * h;
        let mut out = vec![F::zero(); n * width];
        for t in 0..steps {
            for r in 0..n {
                let o = r * width + t * 2 * h;
                out[o..o + h].copy_from_slice(&cf.hidden[(t * n + r) * h..(t * n + r + 1) * h]);
                out[o + h..o + 2 * h].copy_from_slice(&cb.hidden[(t * n + r) * h..(t * n + r + 1) * h]);
            }
        }
        let out = Array::new(vec![n, width], out)?;
        let params = [fwd[0], fwd[1], fwd[2], bwd[0], bwd[1], bwd[2]];
        let ng = self.needs(x) || params.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::BiLstm { x, params, caches: [cf, cb], hidden: h }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = crate::array::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Array<F>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() == vb.shape() {
            let vals = va.values().iter().zip(vb.values()).map(|(&x, &y)| f(x, y)).collect();
            Array::new(va.shape().to_vec(), vals)
        } else if is_scalar(vb) {
            let s = vb.values()[0];
            Ok(va.map(|x| f(x, s)))
        } else if is_scalar(va) {
            let s = va.values()[0];
            Ok(vb.map(|y| f(s, y)))
        } else {
            Err(dim_err!("incompatible shapes {:?} and {:?}", va.shape(), vb.shape()))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Elementwise primitive dispatch by kind.
    pub fn pointwise(&mut self, kind: PointwiseKind, operands: &[Var]) -> Result<Var> {
        let arity = match kind {
            PointwiseKind::Sigmoid | PointwiseKind::Tanh => 1,
            _ => 2,
        };
        if operands.len() != arity {
            return Err(Error::Parameter(alloc::format!(
                "{kind:?} takes {arity} operand(s), got {}",
                operands.len()
            )));
        }
        match kind {
            PointwiseKind::Sigmoid => Ok(self.sigmoid(operands[0])),
            PointwiseKind::Tanh => Ok(self.tanh(operands[0])),
            PointwiseKind::Add => self.add(operands[0], operands[1]),
            PointwiseKind::Sub => self.sub(operands[0], operands[1]),
            PointwiseKind::Mul => self.mul(operands[0], operands[1]),
        }
    }

    /// `a (n×m) + bias (1×m)` broadcast over rows.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        let m = va.cols();
        if vb.len() != m {
            return Err(dim_err!("bias {:?} does not fit {:?}", vb.shape(), va.shape()));
        }
        let mut out = va.clone();
        for row in out.values_mut().chunks_mut(m) {
            for (o, &b) in row.iter_mut().zip(vb.values()) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let kf = F::of(k);
        let out = self.value(a).map(|x| x * kf);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let ng = self.needs(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(F::tanh);
        let ng = self.needs(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(F::exp);
        let ng = self.needs(a);
        self.push(out, Op::Exp(a), ng)
    }

    /// Columns `start..end` of a 2-D node.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let va = self.value(a);
        let (r, c) = (va.rows(), va.cols());
        if start > end || end > c {
            return Err(dim_err!("column slice {start}..{end} out of range for {c} columns"));
        }
        let w = end - start;
        let mut vals = Vec::with_capacity(r * w);
        for i in 0..r {
            vals.extend_from_slice(&va.values()[i * c + start..i * c + end]);
        }
        let out = Array::new(vec![r, w], vals)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::SliceCols { src: a, start }, ng))
    }

    /// Horizontal concatenation of 2-D nodes with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| self.value(p).rows()).ok_or_else(|| dim_err!("empty concat"))?;
        let mut total = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != r {
                return Err(dim_err!("concat row mismatch: {} vs {}", v.rows(), r));
            }
            total += v.cols();
        }
        let mut vals = vec![F::zero(); r * total];
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            let c = v.cols();
            for i in 0..r {
                vals[i * total + off..i * total + off + c].copy_from_slice(v.row(i));
            }
            off += c;
        }
        let out = Array::new(vec![r, total], vals)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let c = va.cols();
        let mut vals = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= va.rows() {
                return Err(dim_err!("row {r} out of range for {} rows", va.rows()));
            }
            vals.extend_from_slice(va.row(r));
        }
        let out = Array::new(vec![rows.len(), c], vals)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::SelectRows { src: a, rows: rows.to_vec() }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Mean over time of rows laid out as `steps` consecutive blocks:
    /// `n × (steps·f)` to `n × f`.
    pub fn pool_time(&mut self, a: Var, steps: usize) -> Result<Var> {
        let va = self.value(a);
        let (n, c) = (va.rows(), va.cols());
        if steps == 0 || c % steps != 0 {
            return Err(dim_err!("{c} columns do not split into {steps} steps"));
        }
        let f = c / steps;
        let mut vals = vec![F::zero(); n * f];
        let mut acc = vec![0.0f64; f];
        for i in 0..n {
            acc.iter_mut().for_each(|v| *v = 0.0);
            let row = va.row(i);
            for t in 0..steps {
                for (a, &x) in acc.iter_mut().zip(&row[t * f..(t + 1) * f]) {
                    *a += x.f64();
                }
            }
            for (o, a) in vals[i * f..(i + 1) * f].iter_mut().zip(&acc) {
                *o = F::of(*a / steps as f64);
            }
        }
        let out = Array::new(vec![n, f], vals)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::PoolTime { src: a, steps }, ng))
    }

    /// Picks column `cols[i]` from row `i`: `n × c` to `n × 1`.
    pub fn gather_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        let va = self.value(a);
        if cols.len() != va.rows() {
            return Err(dim_err!("{} column indices for {} rows", cols.len(), va.rows()));
        }
        let mut vals = Vec::with_capacity(cols.len());
        for (i, &c) in cols.iter().enumerate() {
            if c >= va.cols() {
                return Err(dim_err!("column {c} out of range"));
            }
            vals.push(va.get(i, c));
        }
        let out = Array::new(vec![cols.len(), 1], vals)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::GatherCols { src: a, cols: cols.to_vec() }, ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Array::scalar(F::of(self.value(a).sum()));
        let ng = self.needs(a);
        self.push(out, Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let out = Array::scalar(F::of(va.sum() / va.len() as f64));
        let ng = self.needs(a);
        self.push(out, Op::MeanAll(a), ng)
    }

    /// Row-wise softmax of `a / tau`, stabilized by the row maximum.
    pub fn softmax_rows(&mut self, a: Var, tau: f64) -> Result<Var> {
        let out = softmax_rows_value(self.value(a), tau, false)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::SoftmaxRows { src: a, tau }, ng))
    }

    /// Row-wise softmax of a square matrix over the off-diagonal entries;
    /// the diagonal weight is exactly zero.
    pub fn offdiag_softmax(&mut self, a: Var, tau: f64) -> Result<Var> {
        let va = self.value(a);
        if va.shape().len() != 2 || va.rows() != va.cols() {
            return Err(dim_err!("off-diagonal softmax needs a square matrix, got {:?}", va.shape()));
        }
        let out = softmax_rows_value(va, tau, true)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::OffDiagSoftmax { src: a, tau }, ng))
    }

    /// Pairwise cosine similarity of the rows of `a (n×d)`: `n × n`.
    ///
    /// The diagonal is exactly 1 and carries no gradient.
    pub fn cosine_similarity(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(dim_err!("cosine similarity needs a 2-D input, got {:?}", va.shape()));
        }
        let (n, d) = (va.rows(), va.cols());
        let mut unit = vec![0.0f64; n * d];
        let mut norms = vec![0.0f64; n];
        for i in 0..n {
            let row = va.row(i);
            let sq: f64 = row.iter().map(|&x| x.f64() * x.f64()).sum();
            let norm = libm::sqrt(sq).max(COSINE_NORM_FLOOR);
            norms[i] = norm;
            for (u, &x) in unit[i * d..(i + 1) * d].iter_mut().zip(row) {
                *u = x.f64() / norm;
            }
        }
        let mut vals = vec![F::zero(); n * n];
        for i in 0..n {
            vals[i * n + i] = F::one();
            let ui = &unit[i * d..(i + 1) * d];
            for j in (i + 1)..n {
                let uj = &unit[j * d..(j + 1) * d];
                let dot = F::of(dot_f64(ui, uj).clamp(-1.0, 1.0));
                vals[i * n + j] = dot;
                vals[j * n + i] = dot;
            }
        }
        let out = Array::new(vec![n, n], vals)?;
        let ng = self.needs(a);
        Ok(self.push(out, Op::CosineSim { src: a, unit, norms }, ng))
    }

    /// Sum over anchors of `-log softmax_{j≠a}(D[a,·]/tau)[pos[a]]`.
    pub fn contrastive_nll(&mut self, d: Var, pos: &[usize], tau: f64) -> Result<Var> {
        let vd = self.value(d);
        let n = vd.rows();
        if vd.shape().len() != 2 || vd.cols() != n {
            return Err(dim_err!("contrastive loss needs a square matrix, got {:?}", vd.shape()));
        }
        if pos.len() != n {
            return Err(Error::Pairing(alloc::format!("{} positives for {} anchors", pos.len(), n)));
        }
        for (a, &p) in pos.iter().enumerate() {
            if p >= n || p == a {
                return Err(Error::Pairing(alloc::format!("anchor {a} has invalid positive {p}")));
            }
        }
        let (weights, terms) = contrastive_terms_f64(vd, pos, tau)?;
        let total: f64 = terms.iter().sum();
        let ng = self.needs(d);
        Ok(self.push(
            Array::scalar(F::of(total)),
            Op::ContrastiveNll { src: d, pos: pos.to_vec(), tau, weights },
            ng,
        ))
    }

    /// Backpropagates from a scalar node and returns gradients for every
    /// registered parameter (zeros for parameters the loss does not reach).
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(dim_err!("backward needs a scalar loss, got {:?}", self.value(loss).shape()));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        let mut grads: Vec<Option<Array<F>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Array::full(self.value(loss).shape(), F::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
        }

        let mut out = Gradients::new();
        for (name, v) in &self.params {
            let g = grads
                .get(v.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| Array::zeros(self.value(*v).shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Array<F>>], v: Var, g: Array<F>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradient for an operand that may have been scalar-broadcast.
    fn reduce_to(&self, v: Var, g: Array<F>) -> Array<F> {
        let target = self.value(v);
        if target.len() == g.len() {
            g
        } else {
            Array::full(target.shape(), F::of(g.sum()))
        }
    }

    fn backprop_node(&self, node: &Node<F>, g: &Array<F>, grads: &mut [Option<Array<F>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::BiLstm { x, params, caches, hidden } => {
                let vx = self.value(*x);
                let (n, steps, h) = (vx.rows(), vx.cols(), *hidden);
                let width = steps * 2 * h;
                let mut dx = vec![0.0f64; n * steps];
                for (k, cache) in caches.iter().enumerate() {
                    let [w_ih, w_hh, b] = [params[3 * k], params[3 * k + 1], params[3 * k + 2]];
                    let d = Dims { n, steps, hidden: h, reverse: k == 1 };
                    let off = k * h;
                    let gv = g.values();
                    let gr = lstm::backward(
                        vx.values(),
                        self.value(w_ih).values(),
                        self.value(w_hh).values(),
                        cache,
                        d,
                        |t, r, j| gv[r * width + t * 2 * h + off + j],
                    );
                    for (acc, v) in dx.iter_mut().zip(&gr.x) {
                        *acc += v;
                    }
                    for (var, vals) in [(w_ih, gr.w_ih), (w_hh, gr.w_hh), (b, gr.b)] {
                        let shape = self.value(var).shape().to_vec();
                        self.accumulate(grads, var, Array::new(shape, vals.into_iter().map(F::of).collect())?);
                    }
                }
                self.accumulate(grads, *x, Array::new(vec![n, steps], dx.into_iter().map(F::of).collect())?);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.needs(*a) {
                    let mut da = vec![F::zero(); m * k];
                    matmul_into(g.values(), vb.values(), &mut da, m, n, k, false, true);
                    self.accumulate(grads, *a, Array::new(vec![m, k], da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![F::zero(); k * n];
                    matmul_into(va.values(), g.values(), &mut db, k, m, n, true, false);
                    self.accumulate(grads, *b, Array::new(vec![k, n], db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, self.reduce_to(*a, g.clone()));
                self.accumulate(grads, *b, self.reduce_to(*b, g.clone()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, self.reduce_to(*a, g.clone()));
                self.accumulate(grads, *b, self.reduce_to(*b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let ga = elementwise(g, vb, |gi, y| gi * y);
                    self.accumulate(grads, *a, self.reduce_to(*a, ga));
                }
                if self.needs(*b) {
                    let gb = elementwise(g, va, |gi, x| gi * x);
                    self.accumulate(grads, *b, self.reduce_to(*b, gb));
                }
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.needs(*bias) {
                    let m = g.cols();
                    let mut acc = vec![0.0f64; m];
                    for row in g.values().chunks(m) {
                        for (s, &x) in acc.iter_mut().zip(row) {
                            *s += x.f64();
                        }
                    }
                    let vals = acc.into_iter().map(F::of).collect();
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(grads, *bias, Array::new(shape, vals)?);
                }
            }
            Op::Scale(a, k) => {
                let kf = F::of(*k);
                self.accumulate(grads, *a, g.map(|x| x * kf))
            }
            Op::Sigmoid(a) => {
                let gy = elementwise(g, &node.value, |gi, y| gi * y * (F::one() - y));
                self.accumulate(grads, *a, gy);
            }
            Op::Tanh(a) => {
                let gy = elementwise(g, &node.value, |gi, y| gi * (F::one() - y * y));
                self.accumulate(grads, *a, gy);
            }
            Op::Exp(a) => {
                let gy = elementwise(g, &node.value, |gi, y| gi * y);
                self.accumulate(grads, *a, gy);
            }
            Op::SliceCols { src, start } => {
                if self.needs(*src) {
                    let vs = self.value(*src);
                    let (r, c) = (vs.rows(), vs.cols());
                    let w = g.cols();
                    let mut d = vec![F::zero(); r * c];
                    for i in 0..r {
                        d[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                    }
                    self.accumulate(grads, *src, Array::new(vs.shape().to_vec(), d)?);
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let r = g.rows();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(r * c);
                        for i in 0..r {
                            d.extend_from_slice(&g.values()[i * total + off..i * total + off + c]);
                        }
                        self.accumulate(grads, p, Array::new(self.value(p).shape().to_vec(), d)?);
                    }
                    off += c;
                }
            }
            Op::SelectRows { src, rows } => {
                if self.needs(*src) {
                    let vs = self.value(*src);
                    let c = vs.cols();
                    let mut d = Array::zeros(vs.shape());
                    for (k, &r) in rows.iter().enumerate() {
                        for (o, &x) in d.values_mut()[r * c..(r + 1) * c].iter_mut().zip(g.row(k)) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, *src, d);
                }
            }
            Op::Reshape(src) => {
                let shape = self.value(*src).shape().to_vec();
                self.accumulate(grads, *src, g.clone().reshape(&shape)?);
            }
            Op::PoolTime { src, steps } => {
                if self.needs(*src) {
                    let vs = self.value(*src);
                    let (n, c) = (vs.rows(), vs.cols());
                    let f = c / steps;
                    let inv = F::of(1.0 / *steps as f64);
                    let mut d = vec![F::zero(); n * c];
                    for i in 0..n {
                        let gr = g.row(i);
                        for t in 0..*steps {
                            for (o, &x) in d[i * c + t * f..i * c + (t + 1) * f].iter_mut().zip(gr) {
                                *o = x * inv;
                            }
                        }
                    }
                    self.accumulate(grads, *src, Array::new(vs.shape().to_vec(), d)?);
                }
            }
            Op::GatherCols { src, cols } => {
                if self.needs(*src) {
                    let mut d = Array::zeros(self.value(*src).shape());
                    for (i, &c) in cols.iter().enumerate() {
                        d.set(i, c, g.values()[i]);
                    }
                    self.accumulate(grads, *src, d);
                }
            }
            Op::SumAll(src) => {
                let gs = g.values()[0];
                self.accumulate(grads, *src, Array::full(self.value(*src).shape(), gs));
            }
            Op::MeanAll(src) => {
                let vs = self.value(*src);
                let gs = F::of(g.values()[0].f64() / vs.len() as f64);
                self.accumulate(grads, *src, Array::full(vs.shape(), gs));
            }
            Op::SoftmaxRows { src, tau } | Op::OffDiagSoftmax { src, tau } => {
                if self.needs(*src) {
                    let y = &node.value;
                    let c = y.cols();
                    let mut d = vec![F::zero(); y.len()];
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a.f64() * b.f64()).sum();
                        for j in 0..c {
                            d[i * c + j] = F::of(yr[j].f64() * (gr[j].f64() - dot) / *tau);
                        }
                    }
                    self.accumulate(grads, *src, Array::new(y.shape().to_vec(), d)?);
                }
            }
            Op::CosineSim { src, unit, norms } => {
                if self.needs(*src) {
                    let vs = self.value(*src);
                    let (n, dcols) = (vs.rows(), vs.cols());
                    // dU = (G + G^T) U with the diagonal held constant
                    let mut du = vec![0.0f64; n * dcols];
                    for i in 0..n {
                        for j in 0..n {
                            if i == j {
                                continue;
                            }
                            let gij = g.values()[i * n + j].f64() + g.values()[j * n + i].f64();
                            if gij == 0.0 {
                                continue;
                            }
                            let uj = &unit[j * dcols..(j + 1) * dcols];
                            for (o, &u) in du[i * dcols..(i + 1) * dcols].iter_mut().zip(uj) {
                                *o += gij * u;
                            }
                        }
                    }
                    let mut ds = vec![F::zero(); n * dcols];
                    for i in 0..n {
                        let ui = &unit[i * dcols..(i + 1) * dcols];
                        let dui = &du[i * dcols..(i + 1) * dcols];
                        let floored = norms[i] <= COSINE_NORM_FLOOR;
                        let proj: f64 = if floored { 0.0 } else { ui.iter().zip(dui).map(|(a, b)| a * b).sum() };
                        for k in 0..dcols {
                            ds[i * dcols + k] = F::of((dui[k] - ui[k] * proj) / norms[i]);
                        }
                    }
                    self.accumulate(grads, *src, Array::new(vs.shape().to_vec(), ds)?);
                }
            }
            Op::ContrastiveNll { src, pos, tau, weights } => {
                if self.needs(*src) {
                    let n = pos.len();
                    let gs = g.values()[0].f64() / *tau;
                    let mut d = vec![F::zero(); n * n];
                    for a in 0..n {
                        for j in 0..n {
                            if j == a {
                                continue;
                            }
                            let ind = if j == pos[a] { 1.0 } else { 0.0 };
                            d[a * n + j] = F::of(gs * (weights[a * n + j] - ind));
                        }
                    }
                    self.accumulate(grads, *src, Array::new(vec![n, n], d)?);
                }
            }
        }
        Ok(())
    }
}

fn elementwise<F: Real>(g: &Array<F>, other: &Array<F>, f: impl Fn(F, F) -> F) -> Array<F> {
    if other.len() == g.len() {
        let vals = g.values().iter().zip(other.values()).map(|(&a, &b)| f(a, b)).collect();
        Array::new(g.shape().to_vec(), vals).expect("same length")
    } else {
        // other is a broadcast scalar
        let s = other.values()[0];
        g.map(|a| f(a, s))
    }
}

/// Stabilized row softmax of `a / tau`, optionally excluding the diagonal.
pub fn softmax_rows_value<F: Real>(a: &Array<F>, tau: f64, exclude_diagonal: bool) -> Result<Array<F>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Parameter(alloc::format!("temperature must be positive, got {tau}")));
    }
    if a.shape().len() != 2 {
        return Err(dim_err!("softmax needs a 2-D array, got {:?}", a.shape()));
    }
    let (r, c) = (a.rows(), a.cols());
    if exclude_diagonal && c < 2 {
        return Err(dim_err!("off-diagonal softmax needs at least 2 columns"));
    }
    let inv_tau = 1.0 / tau;
    let mut out = vec![F::zero(); r * c];
    let mut e = vec![0.0f64; c];
    for i in 0..r {
        let row = a.row(i);
        let mut mx = f64::NEG_INFINITY;
        for (j, &x) in row.iter().enumerate() {
            if !(exclude_diagonal && j == i) {
                mx = mx.max(x.f64() * inv_tau);
            }
        }
        let mut s = 0.0f64;
        for (j, &x) in row.iter().enumerate() {
            e[j] = if exclude_diagonal && j == i { 0.0 } else { libm::exp(x.f64() * inv_tau - mx) };
            s += e[j];
        }
        for j in 0..c {
            out[i * c + j] = F::of(e[j] / s);
        }
    }
    Array::new(vec![r, c], out)
}

/// Off-diagonal softmax weights (in `f64`) and per-anchor contrastive terms.
pub(crate) fn contrastive_terms_f64<F: Real>(d: &Array<F>, pos: &[usize], tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(tau > 0.0) {
        return Err(Error::Parameter(alloc::format!("temperature must be positive, got {tau}")));
    }
    let n = d.rows();
    let inv_tau = 1.0 / tau;
    let mut weights = vec![0.0f64; n * n];
    let mut terms = Vec::with_capacity(n);
    for a in 0..n {
        let row = d.row(a);
        let mx = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != a)
            .map(|(_, &x)| x.f64() * inv_tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0f64;
        for (j, &x) in row.iter().enumerate() {
            if j != a {
                let e = libm::exp(x.f64() * inv_tau - mx);
                weights[a * n + j] = e;
                s += e;
            }
        }
        for j in 0..n {
            weights[a * n + j] /= s;
        }
        let lse = mx + libm::log(s);
        terms.push(lse - row[pos[a]].f64() * inv_tau);
    }
    Ok((weights, terms))
}

/// Dot product with four interleaved accumulators so the loop vectorizes.
fn dot_f64(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::DenseArray;

    #[test]
    fn sigmoid_and_tanh_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(DenseArray::scalar(0.0));
        let s = t.pointwise(PointwiseKind::Sigmoid, &[x]).unwrap();
        let h = t.pointwise(PointwiseKind::Tanh, &[x]).unwrap();
        assert_eq!(t.scalar(s), 0.5);
        assert_eq!(t.scalar(h), 0.0);
    }

    #[test]
    fn pointwise_arity_checked() {
        let mut t = Tape::new();
        let x = t.constant(DenseArray::scalar(1.0));
        assert!(matches!(t.pointwise(PointwiseKind::Add, &[x]), Err(Error::Parameter(_))));
    }

    #[test]
    fn incompatible_shapes_rejected() {
        let mut t = Tape::new();
        let a = t.constant(DenseArray::zeros(&[2, 3]));
        let b = t.constant(DenseArray::zeros(&[3, 2]));
        assert!(matches!(t.add(a, b), Err(Error::Dimension(_))));
        let s = t.constant(DenseArray::scalar(2.0));
        assert!(t.mul(a, s).is_ok());
    }

    #[test]
    fn softmax_uniform_row() {
        let a = DenseArray::from_rows(&[&[0.7, 0.7, 0.7]]).unwrap();
        for tau in [0.01, 0.1, 1.0, 5.0] {
            let y = softmax_rows_value(&a, tau, false).unwrap();
            for &v in y.values() {
                assert!((v - 1.0 / 3.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_hand_evaluated() {
        let a = DenseArray::from_rows(&[&[1.0, 0.0, 0.0]]).unwrap();
        let y = softmax_rows_value(&a, 0.1, false).unwrap();
        let e10 = libm::exp(10.0);
        let want = [e10 / (e10 + 2.0), 1.0 / (e10 + 2.0), 1.0 / (e10 + 2.0)];
        for (got, want) in y.values().iter().zip(want) {
            assert!((*got as f64 - want).abs() < 1e-7, "{got} vs {want}");
        }
        assert!((y.values()[0] - 0.99991).abs() < 1e-5);
        assert!((y.values()[1] - 4.5e-5).abs() < 1e-6);
    }

    #[test]
    fn softmax_saturates() {
        let a = DenseArray::from_rows(&[&[1.0, 0.0]]).unwrap();
        let y = softmax_rows_value(&a, 0.001, false).unwrap();
        assert!((y.values()[0] - 1.0).abs() < 1e-6);
        assert!(y.values()[1] < 1e-6);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let a = DenseArray::zeros(&[1, 2]);
        assert!(matches!(softmax_rows_value(&a, 0.0, false), Err(Error::Parameter(_))));
        assert!(matches!(softmax_rows_value(&a, -1.0, false), Err(Error::Parameter(_))));
    }

    #[test]
    fn cosine_special_cases() {
        let mut t = Tape::new();
        let s = t
            .constant(DenseArray::from_rows(&[&[1.0, 2.0], &[1.0, 2.0], &[-2.0, 1.0], &[-1.0, -2.0], &[0.0, 0.0]]).unwrap());
        let d = t.cosine_similarity(s).unwrap();
        let d = t.value(d);
        assert!((d.get(0, 1) - 1.0).abs() < 1e-6);
        assert!(d.get(0, 2).abs() < 1e-6);
        assert!((d.get(0, 3) + 1.0).abs() < 1e-6);
        assert_eq!(d.get(4, 4), 1.0);
        assert_eq!(d.get(0, 4), 0.0);
    }

    #[test]
    fn backward_reports_unreached_params_as_zero() {
        let mut t = Tape::new();
        let w = t.param("w", DenseArray::scalar(3.0));
        let _unused = t.param("u", DenseArray::zeros(&[2, 2]));
        let x = t.constant(DenseArray::scalar(2.0));
        let y = t.mul(w, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g["w"].values(), &[2.0]);
        assert_eq!(g["u"].values(), &[0.0; 4]);
        assert_eq!(g.len(), 2);
    }

    #[test]
    fn mul_with_itself_accumulates() {
        let mut t = Tape::new();
        let w = t.param("w", DenseArray::scalar(3.0));
        let y = t.mul(w, w).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g["w"].values(), &[6.0]);
    }
}

