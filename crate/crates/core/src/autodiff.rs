//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. Node indices are
//! a topological order by construction, so `backward` is a single reverse
//! sweep. Leaf gradients accumulate across `backward` calls until
//! [`Tape::zero_grad`].

use std::cell::Cell;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::{from_usize, lit, Scalar};
use crate::tensor::{add_into, gemm_acc, softmax_rows, transpose, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Marker stored in cross-entropy targets for positions that contribute nothing.
pub const IGNORE: Option<usize> = None;

thread_local! {
    static FLIP_GELU_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

/// Test hook: negates the GELU backward rule on the current thread.
#[doc(hidden)]
pub fn inject_backward_fault(on: bool) {
    FLIP_GELU_BACKWARD.with(|f| f.set(on));
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    AddRow(Var, Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    MaskFill(Var, Arc<[bool]>),
    Embed { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { a: Var, start: usize },
    SelectRows { a: Var, rows: Vec<usize> },
    ReplaceRows { base: Var, src: Var, rows: Vec<usize> },
    Dropout { a: Var, keep: Vec<T> },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    L1(Var, Var),
    BceLogits { x: Var, label: T },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

fn shape_err<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::Shape { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows() {
            return Err(shape_err("matmul", av, bv));
        }
        let out = av.matmul(bv)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), out, ng))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols() {
            return Err(shape_err("matmul_bt", av, bv));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        let bt = transpose(bv.data(), n, k);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(av.data(), &bt, &mut out, m, k, n);
        let ng = self.needs(&[a, b]);
        Ok(self.push(Op::MatMulBT(a, b), Tensor::new(vec![m, n], out)?, ng))
    }

    fn zip_op(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.needs(&[a, b]);
        Ok(self.push(op, out, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Left-to-right sum of equally shaped operands.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms.split_first().ok_or_else(|| TensorError::Contract("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.needs(&[a]);
        self.push(Op::Scale(a, s), out, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let ng = self.needs(&[a]);
        self.push(Op::Relu(a), out, ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c: T = lit(0.797_884_560_802_865_4);
        let k: T = lit(0.044_715);
        let half: T = lit(0.5);
        let out = self.value(a).map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let ng = self.needs(&[a]);
        self.push(Op::Gelu(a), out, ng)
    }

    /// Adds a length-`cols` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.len() != av.cols() {
            return Err(shape_err("add_row", av, rv));
        }
        let mut out = av.clone();
        let c = av.cols();
        for chunk in out.data_mut().chunks_mut(c) {
            add_into(chunk, rv.data());
        }
        let ng = self.needs(&[a, row]);
        Ok(self.push(Op::AddRow(a, row), out, ng))
    }

    /// Per-row normalization to zero mean and unit (biased) variance, then affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let c = xv.cols();
        if gv.len() != c {
            return Err(shape_err("layer_norm", xv, gv));
        }
        if bv.len() != c {
            return Err(shape_err("layer_norm", xv, bv));
        }
        let n: T = from_usize(c);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = Vec::with_capacity(xv.rows());
        let mut out = vec![T::zero(); xv.len()];
        for (r, row) in xv.data().chunks(c).enumerate() {
            let mean = row.iter().copied().fold(T::zero(), |s, v| s + v) / n;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.needs(&[x, gain, bias]);
        Ok(self.push(Op::LayerNorm { x, gain, bias, xhat, rstd }, out, ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if !av.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let out = Tensor::new(av.shape().to_vec(), softmax_rows(av.data(), av.cols()))?;
        let ng = self.needs(&[a]);
        Ok(self.push(Op::Softmax(a), out, ng))
    }

    /// Replaces entries where `allowed` is false with `fill`; those entries pass no gradient.
    pub fn mask_fill(&mut self, a: Var, allowed: Arc<[bool]>, fill: T) -> Result<Var> {
        let av = self.value(a);
        if allowed.len() != av.len() {
            return Err(TensorError::Shape { op: "mask_fill", lhs: av.shape().to_vec(), rhs: vec![allowed.len()] });
        }
        let mut out = av.clone();
        for (v, &ok) in out.data_mut().iter_mut().zip(allowed.iter()) {
            if !ok {
                *v = fill;
            }
        }
        let ng = self.needs(&[a]);
        Ok(self.push(Op::MaskFill(a, allowed), out, ng))
    }

    /// Gathers rows of `table` (a lookup table) by id.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (n, c) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= n {
                return Err(TensorError::Index { what: "embedding", index: id, bound: n });
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        let ng = self.needs(&[table]);
        Ok(self.push(Op::Embed { table, ids: ids.to_vec() }, out, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(shape_err("concat_rows", self.value(parts[0]), pv));
            }
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / c;
        let ng = self.needs(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Tensor::new(vec![rows, c], data)?, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(shape_err("concat_cols", self.value(parts[0]), self.value(p)));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = self.needs(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::new(vec![r, total], data)?, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols() || len == 0 {
            return Err(TensorError::Index { what: "column slice", index: start + len, bound: av.cols() });
        }
        let mut data = Vec::with_capacity(av.rows() * len);
        for i in 0..av.rows() {
            data.extend_from_slice(&av.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![av.rows(), len], data)?;
        let ng = self.needs(&[a]);
        Ok(self.push(Op::SliceCols { a, start }, out, ng))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let mut data = Vec::with_capacity(rows.len() * av.cols());
        for &r in rows {
            if r >= av.rows() {
                return Err(TensorError::Index { what: "row", index: r, bound: av.rows() });
            }
            data.extend_from_slice(av.row(r));
        }
        let out = Tensor::new(vec![rows.len(), av.cols()], data)?;
        let ng = self.needs(&[a]);
        Ok(self.push(Op::SelectRows { a, rows: rows.to_vec() }, out, ng))
    }

    /// Copy of `base` where row `rows[i]` is replaced by row `i` of `src`.
    pub fn replace_rows(&mut self, base: Var, src: Var, rows: &[usize]) -> Result<Var> {
        let (bv, sv) = (self.value(base), self.value(src));
        if sv.cols() != bv.cols() || sv.rows() != rows.len() {
            return Err(shape_err("replace_rows", bv, sv));
        }
        let mut out = bv.clone();
        for (i, &r) in rows.iter().enumerate() {
            if r >= bv.rows() {
                return Err(TensorError::Index { what: "row", index: r, bound: bv.rows() });
            }
            out.row_mut(r).copy_from_slice(sv.row(i));
        }
        let ng = self.needs(&[base, src]);
        Ok(self.push(Op::ReplaceRows { base, src, rows: rows.to_vec() }, out, ng))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().fold(T::zero(), |s, &x| s + x);
        let ng = self.needs(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(total), ng)
    }

    /// Inverted dropout with a precomputed keep mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, a: Var, keep: Vec<T>) -> Result<Var> {
        let av = self.value(a);
        if keep.len() != av.len() {
            return Err(TensorError::Shape { op: "dropout", lhs: av.shape().to_vec(), rhs: vec![keep.len()] });
        }
        let data = av.data().iter().zip(&keep).map(|(&x, &k)| x * k).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let ng = self.needs(&[a]);
        Ok(self.push(Op::Dropout { a, keep }, out, ng))
    }

    /// Mean negative log-softmax of the target class over non-ignored rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, v) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(TensorError::Shape { op: "cross_entropy", lhs: lv.shape().to_vec(), rhs: vec![targets.len()] });
        }
        if !lv.is_finite() {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let probs = softmax_rows(lv.data(), v);
        let mut total = T::zero();
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= v {
                    return Err(TensorError::Index { what: "target", index: t, bound: v });
                }
                let row = lv.row(r);
                let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
                let lse = row.iter().fold(T::zero(), |s, &x| s + (x - max).exp()).ln() + max;
                total = total + (lse - row[t]);
                count += 1;
            }
        }
        if count == 0 {
            return Err(TensorError::NoActiveTargets);
        }
        let out = Tensor::scalar(total / from_usize(count));
        let ng = self.needs(&[logits]);
        Ok(self.push(Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count }, out, ng))
    }

    /// Mean absolute difference.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("l1_loss", av, bv));
        }
        let sum = av.data().iter().zip(bv.data()).fold(T::zero(), |s, (&x, &y)| s + (x - y).abs());
        let out = Tensor::scalar(sum / from_usize(av.len()));
        let ng = self.needs(&[a, b]);
        Ok(self.push(Op::L1(a, b), out, ng))
    }

    /// Binary cross-entropy of `logistic(x)` against `label`, for scalar `x`.
    pub fn bce_with_logits(&mut self, x: Var, label: T) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != 1 {
            return Err(TensorError::NotScalar { shape: xv.shape().to_vec() });
        }
        let z = xv.item();
        let loss = z.max(T::zero()) - z * label + (T::one() + (-z.abs()).exp()).ln();
        let ng = self.needs(&[x]);
        Ok(self.push(Op::BceLogits { x, label }, Tensor::scalar(loss), ng))
    }

    /// Reverse sweep from a scalar root; leaf gradients accumulate.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.backward_scaled(root, T::one())
    }

    /// Backward pass seeded with `seed` instead of 1.
    pub fn backward_scaled(&mut self, root: Var, seed: T) -> Result<()> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(TensorError::NotScalar { shape: rv.shape().to_vec() });
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![seed]);
        let flip = FLIP_GELU_BACKWARD.with(Cell::get);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => add_into(acc, &g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            backprop(&self.nodes, &node.op, &node.value, g, &mut adj, flip);
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(nodes: &[Node<T>], adj: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    if !nodes[v.0].needs_grad {
        return;
    }
    match &mut adj[v.0] {
        Some(acc) => add_into(acc, &g),
        slot => *slot = Some(g),
    }
}

fn backprop<T: Scalar>(
    nodes: &[Node<T>],
    op: &Op<T>,
    out: &Tensor<T>,
    g: Vec<T>,
    adj: &mut [Option<Vec<T>>],
    flip_gelu: bool,
) {
    let val = |v: &Var| &nodes[v.0].value;
    let wants = |v: &Var| nodes[v.0].needs_grad;
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if wants(a) {
                // dA = dC · Bᵀ
                let bt = transpose(bv.data(), k, n);
                let mut da = vec![T::zero(); m * k];
                gemm_acc(&g, &bt, &mut da, m, n, k);
                accumulate(nodes, adj, *a, da);
            }
            if wants(b) {
                // dB = Aᵀ · dC
                let at = transpose(av.data(), m, k);
                let mut db = vec![T::zero(); k * n];
                gemm_acc(&at, &g, &mut db, k, m, n);
                accumulate(nodes, adj, *b, db);
            }
        }
        Op::MatMulBT(a, b) => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.rows(), av.cols(), bv.rows());
            if wants(a) {
                // dA = dC · B
                let mut da = vec![T::zero(); m * k];
                gemm_acc(&g, bv.data(), &mut da, m, n, k);
                accumulate(nodes, adj, *a, da);
            }
            if wants(b) {
                // dB = dCᵀ · A
                let gt = transpose(&g, m, n);
                let mut db = vec![T::zero(); n * k];
                gemm_acc(&gt, av.data(), &mut db, n, m, k);
                accumulate(nodes, adj, *b, db);
            }
        }
        Op::Add(a, b) => {
            if wants(b) {
                accumulate(nodes, adj, *b, g.clone());
            }
            accumulate(nodes, adj, *a, g);
        }
        Op::Sub(a, b) => {
            if wants(b) {
                accumulate(nodes, adj, *b, g.iter().map(|&x| -x).collect());
            }
            accumulate(nodes, adj, *a, g);
        }
        Op::Mul(a, b) => {
            if wants(a) {
                let da = g.iter().zip(val(b).data()).map(|(&x, &y)| x * y).collect();
                accumulate(nodes, adj, *a, da);
            }
            if wants(b) {
                let db = g.iter().zip(val(a).data()).map(|(&x, &y)| x * y).collect();
                accumulate(nodes, adj, *b, db);
            }
        }
        Op::Scale(a, s) => accumulate(nodes, adj, *a, g.iter().map(|&x| x * *s).collect()),
        Op::Relu(a) => {
            let da = g.iter().zip(val(a).data()).map(|(&x, &v)| if v > T::zero() { x } else { T::zero() }).collect();
            accumulate(nodes, adj, *a, da);
        }
        Op::Gelu(a) => {
            let c: T = lit(0.797_884_560_802_865_4);
            let k: T = lit(0.044_715);
            let half: T = lit(0.5);
            let three: T = lit(3.0);
            let sign = if flip_gelu { -T::one() } else { T::one() };
            let da = g
                .iter()
                .zip(val(a).data())
                .map(|(&gi, &x)| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let d = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x);
                    sign * gi * d
                })
                .collect();
            accumulate(nodes, adj, *a, da);
        }
        Op::AddRow(a, row) => {
            if wants(row) {
                let c = val(row).len();
                let mut dr = vec![T::zero(); c];
                for chunk in g.chunks(c) {
                    add_into(&mut dr, chunk);
                }
                accumulate(nodes, adj, *row, dr);
            }
            accumulate(nodes, adj, *a, g);
        }
        Op::LayerNorm { x, gain, bias, xhat, rstd } => {
            let c = out.cols();
            let gv = val(gain).data();
            if wants(gain) {
                let mut dg = vec![T::zero(); c];
                for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        dg[j] = dg[j] + gr[j] * hr[j];
                    }
                }
                accumulate(nodes, adj, *gain, dg);
            }
            if wants(bias) {
                let mut db = vec![T::zero(); c];
                for gr in g.chunks(c) {
                    add_into(&mut db, gr);
                }
                accumulate(nodes, adj, *bias, db);
            }
            if wants(x) {
                let n: T = from_usize(c);
                let mut dx = vec![T::zero(); g.len()];
                for (r, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..c {
                        let d = gr[j] * gv[j];
                        mean_d = mean_d + d;
                        mean_dh = mean_dh + d * hr[j];
                    }
                    mean_d = mean_d / n;
                    mean_dh = mean_dh / n;
                    for j in 0..c {
                        let d = gr[j] * gv[j];
                        dx[r * c + j] = rstd[r] * (d - mean_d - hr[j] * mean_dh);
                    }
                }
                accumulate(nodes, adj, *x, dx);
            }
        }
        Op::Softmax(a) => {
            let c = out.cols();
            let mut da = vec![T::zero(); g.len()];
            for ((gr, yr), dr) in g.chunks(c).zip(out.data().chunks(c)).zip(da.chunks_mut(c)) {
                let dot = gr.iter().zip(yr).fold(T::zero(), |s, (&x, &y)| s + x * y);
                for j in 0..c {
                    dr[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(nodes, adj, *a, da);
        }
        Op::MaskFill(a, allowed) => {
            let da = g.iter().zip(allowed.iter()).map(|(&x, &ok)| if ok { x } else { T::zero() }).collect();
            accumulate(nodes, adj, *a, da);
        }
        Op::Embed { table, ids } => {
            let tv = val(table);
            let c = tv.cols();
            let mut dt = vec![T::zero(); tv.len()];
            for (r, &id) in ids.iter().enumerate() {
                add_into(&mut dt[id * c..(id + 1) * c], &g[r * c..(r + 1) * c]);
            }
            accumulate(nodes, adj, *table, dt);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = val(p).len();
                if wants(p) {
                    accumulate(nodes, adj, *p, g[offset..offset + len].to_vec());
                }
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut start = 0;
            for p in parts {
                let w = val(p).cols();
                if wants(p) {
                    let mut dp = Vec::with_capacity(val(p).len());
                    for row in g.chunks(total) {
                        dp.extend_from_slice(&row[start..start + w]);
                    }
                    accumulate(nodes, adj, *p, dp);
                }
                start += w;
            }
        }
        Op::SliceCols { a, start } => {
            let av = val(a);
            let (c, w) = (av.cols(), out.cols());
            let mut da = vec![T::zero(); av.len()];
            for (r, gr) in g.chunks(w).enumerate() {
                da[r * c + start..r * c + start + w].copy_from_slice(gr);
            }
            accumulate(nodes, adj, *a, da);
        }
        Op::SelectRows { a, rows } => {
            let av = val(a);
            let c = av.cols();
            let mut da = vec![T::zero(); av.len()];
            for (i, &r) in rows.iter().enumerate() {
                add_into(&mut da[r * c..(r + 1) * c], &g[i * c..(i + 1) * c]);
            }
            accumulate(nodes, adj, *a, da);
        }
        Op::ReplaceRows { base, src, rows } => {
            let c = out.cols();
            if wants(src) {
                let mut ds = Vec::with_capacity(rows.len() * c);
                for &r in rows {
                    ds.extend_from_slice(&g[r * c..(r + 1) * c]);
                }
                accumulate(nodes, adj, *src, ds);
            }
            if wants(base) {
                let mut db = g;
                for &r in rows {
                    db[r * c..(r + 1) * c].iter_mut().for_each(|x| *x = T::zero());
                }
                accumulate(nodes, adj, *base, db);
            }
        }
        Op::Dropout { a, keep } => {
            let da = g.iter().zip(keep).map(|(&x, &k)| x * k).collect();
            accumulate(nodes, adj, *a, da);
        }
        Op::Sum(a) => accumulate(nodes, adj, *a, vec![g[0]; val(a).len()]),
        Op::CrossEntropy { logits, targets, probs, count } => {
            let v = val(logits).cols();
            let scale = g[0] / from_usize(*count);
            let mut dl = vec![T::zero(); probs.len()];
            for (r, t) in targets.iter().enumerate() {
                if let Some(t) = *t {
                    for j in 0..v {
                        dl[r * v + j] = probs[r * v + j] * scale;
                    }
                    dl[r * v + t] = dl[r * v + t] - scale;
                }
            }
            accumulate(nodes, adj, *logits, dl);
        }
        Op::L1(a, b) => {
            let (av, bv) = (val(a), val(b));
            let scale = g[0] / from_usize(av.len());
            let signs: Vec<T> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| {
                    let d = x - y;
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                })
                .collect();
            if wants(b) {
                accumulate(nodes, adj, *b, signs.iter().map(|&s| -s).collect());
            }
            accumulate(nodes, adj, *a, signs);
        }
        Op::BceLogits { x, label } => {
            let z = val(x).item();
            let p = T::one() / (T::one() + (-z).exp());
            accumulate(nodes, adj, *x, vec![(p - *label) * g[0]]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_gradient_is_one() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0f64));
        tape.backward(x).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn scalar_product_rule() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[1, 1], &[2.0]));
        let b = tape.param(t(&[1, 1], &[3.0]));
        let f = tape.matmul(a, b).unwrap();
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0]);
        assert_eq!(tape.grad(b).unwrap(), &[2.0]);
    }

    #[test]
    fn relu_of_product_chain_rule() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0f64));
        let y = tape.param(Tensor::scalar(3.0f64));
        let p = tape.mul(x, y).unwrap();
        let f = tape.relu(p);
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);
        assert_eq!(tape.grad(y).unwrap(), &[2.0]);
    }

    #[test]
    fn relu_forward_and_subgradient_at_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);

        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[-1.0, 2.0]));
        let up = tape.constant(t(&[2], &[5.0, 5.0]));
        let r = tape.relu(x);
        let w = tape.mul(r, up).unwrap();
        let s = tape.sum(w);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 5.0]);
    }

    #[test]
    fn mixed_ignore_equals_active_subset() {
        let logits = t(&[3, 4], &[0.1, 0.5, -0.3, 1.0, 2.0, 0.0, 0.0, 0.0, -1.0, 0.3, 0.7, 0.2]);
        let mut tape = Tape::new();
        let l = tape.param(logits.clone());
        let full = tape.cross_entropy(l, &[Some(3), IGNORE, Some(2)]).unwrap();
        let mut tape2 = Tape::new();
        let sub = t(&[2, 4], &[0.1, 0.5, -0.3, 1.0, -1.0, 0.3, 0.7, 0.2]);
        let l2 = tape2.param(sub);
        let part = tape2.cross_entropy(l2, &[Some(3), Some(2)]).unwrap();
        assert_eq!(tape.value(full).item(), tape2.value(part).item());
    }

    #[test]
    fn cross_entropy_uniform_and_analytic_gradient() {
        let mut tape = Tape::new();
        let l = tape.param(Tensor::<f64>::zeros(&[1, 4]));
        let ce = tape.cross_entropy(l, &[Some(1)]).unwrap();
        assert!((tape.value(ce).item() - 4f64.ln()).abs() < 1e-12);
        tape.backward(ce).unwrap();
        assert_eq!(tape.grad(l).unwrap(), &[0.25, -0.75, 0.25, 0.25]);
    }

    #[test]
    fn cross_entropy_all_ignored_is_error() {
        let mut tape = Tape::new();
        let l = tape.param(Tensor::<f64>::zeros(&[2, 4]));
        assert_eq!(tape.cross_entropy(l, &[IGNORE, IGNORE]), Err(TensorError::NoActiveTargets));
    }

    #[test]
    fn l1_values_and_sign_at_tie() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        let b = tape.param(t(&[2], &[0.0, 4.0]));
        let l = tape.l1_loss(a, b).unwrap();
        assert_eq!(tape.value(l).item(), 1.5);
        let mut tape = Tape::new();
        let a = tape.param(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[1.0, 0.0]));
        let l = tape.l1_loss(a, b).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 0.5]);
    }

    #[test]
    fn l1_shape_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param(Tensor::zeros(&[2]));
        let b = tape.param(Tensor::zeros(&[3]));
        assert!(matches!(tape.l1_loss(a, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn softmax_uniform_and_nonfinite() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::filled(&[1, 3], 7.0f64));
        let s = tape.softmax_rows(x).unwrap();
        for &p in tape.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = tape.param(t(&[1, 2], &[f64::NAN, 0.0]));
        assert_eq!(tape.softmax_rows(y), Err(TensorError::NonFinite { op: "softmax_rows" }));
    }

    #[test]
    fn layer_norm_edge_rows() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 2], &[3.0, 3.0, 1.0, -1.0]));
        let g = tape.param(Tensor::filled(&[2], 1.0));
        let b = tape.param(Tensor::zeros(&[2]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        assert!((v[2] - 1.0).abs() < 1e-5 && (v[3] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0f64));
        let y = tape.scale(x, 3.0);
        tape.backward(y).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        tape.zero_grad();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[3.0]);
    }

    #[test]
    fn bce_at_zero_logit_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0f64));
        let l = tape.bce_with_logits(x, 1.0).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);
    }
}
