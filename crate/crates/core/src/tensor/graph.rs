use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mismatch, Real, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { src: Var, axis: usize, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    Relu(Var),
    Dropout { src: Var, scale: Vec<T> },
    LayerNorm { src: Var, inv_std: Vec<T> },
    Softmax(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, pad: usize, probs: Vec<T>, count: usize },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A tape of tensor operations.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    training: bool,
    consumed: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(op: &'static str, t: &[usize]) -> Result<(usize, usize), TensorError> {
    match *t {
        [r, c] => Ok((r, c)),
        _ => Err(mismatch(op, t, &[])),
    }
}

/// `out[m,n] += a[m,k] * b[k,n]`, written as row updates so the inner loop vectorizes.
fn gemm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += s * bv;
            }
        }
    }
}

fn transposed<T: Real>(x: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// Numerically stable (optionally masked) softmax of one row.
///
/// Disallowed logits get the additive [`Real::MASK_FILL`] surrogate, are left
/// out of the max and the normalizer, and come out as exactly zero. A row
/// with no allowed entry comes out all zero.
fn softmax_row<T: Real>(x: &[T], allow: Option<&[bool]>, out: &mut [T]) {
    let allowed = |j: usize| allow.is_none_or(|a| a[j]);
    let logit = |j: usize| if allowed(j) { x[j] } else { x[j] + T::MASK_FILL };
    let mut max = T::neg_infinity();
    for j in 0..x.len() {
        if allowed(j) && logit(j) > max {
            max = logit(j);
        }
    }
    if max == T::neg_infinity() {
        out.iter_mut().for_each(|o| *o = T::zero());
        return;
    }
    let mut sum = T::zero();
    for j in 0..x.len() {
        out[j] = if allowed(j) { (logit(j) - max).exp() } else { T::zero() };
        sum += out[j];
    }
    let inv = T::one() / sum;
    for (j, o) in out.iter_mut().enumerate() {
        *o = if allowed(j) { *o * inv } else { T::zero() };
    }
}

fn grad_slot<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> Option<&'a mut [T]> {
    if !nodes[v.0].needs_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), training: false, consumed: false }
    }

    /// Enables dropout. Evaluation graphs (the default) treat dropout as identity.
    pub fn with_training(mut self, training: bool) -> Self {
        self.training = training;
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("add", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let t = Tensor { shape: x.shape().to_vec(), data };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    /// Adds a vector to every row (last-axis broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (x, r) = (self.value(a), self.value(row));
        let d = r.len();
        if r.shape().len() != 1 || x.shape().last() != Some(&d) {
            return Err(mismatch("add_row", x.shape(), r.shape()));
        }
        let data = x.data().iter().enumerate().map(|(k, &p)| p + r.data()[k % d]).collect();
        let t = Tensor { shape: x.shape().to_vec(), data };
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(t, Op::AddRow(a, row), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(mismatch("mul", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let t = Tensor { shape: x.shape().to_vec(), data };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Multiplies every row element-wise by a vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (x, r) = (self.value(a), self.value(row));
        let d = r.len();
        if r.shape().len() != 1 || x.shape().last() != Some(&d) {
            return Err(mismatch("mul_row", x.shape(), r.shape()));
        }
        let data = x.data().iter().enumerate().map(|(k, &p)| p * r.data()[k % d]).collect();
        let t = Tensor { shape: x.shape().to_vec(), data };
        let ng = self.needs(a) || self.needs(row);
        Ok(self.push(t, Op::MulRow(a, row), ng))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let x = self.value(a);
        let t = Tensor { shape: x.shape().to_vec(), data: x.data().iter().map(|&p| p * s).collect() };
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", x.shape())?;
        let (k2, n) = dims2("matmul", y.shape())?;
        if k != k2 {
            return Err(mismatch("matmul", x.shape(), y.shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(x.data(), y.data(), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a);
        let (r, c) = dims2("transpose", x.shape())?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x.data()[i * c + j];
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor { shape: vec![c, r], data: out }, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let x = self.value(a);
        if shape.iter().product::<usize>() != x.len() {
            return Err(mismatch("reshape", x.shape(), &shape));
        }
        let t = Tensor { shape, data: x.data().to_vec() };
        let ng = self.needs(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    /// Concatenates 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = parts.first().ok_or_else(|| mismatch("concat", &[], &[]))?;
        let (r0, c0) = dims2("concat", self.shape(*first))?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = dims2("concat", self.shape(p))?;
            let ok = if axis == 0 { c == c0 } else { r == r0 };
            if !ok || axis > 1 {
                return Err(mismatch("concat", self.shape(*first), self.shape(p)));
            }
            total += if axis == 0 { r } else { c };
        }
        let (rows, cols) = if axis == 0 { (total, c0) } else { (r0, total) };
        let mut data = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
        } else {
            for i in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor { shape: vec![rows, cols], data }, Op::Concat { parts: parts.to_vec(), axis }, ng))
    }

    /// Rows (`axis` 0) or columns (`axis` 1) `start..end` of a 2-D tensor.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let x = self.value(a);
        let (r, c) = dims2("slice", x.shape())?;
        let bound = if axis == 0 { r } else { c };
        if axis > 1 || start > end || end > bound {
            return Err(TensorError::IndexOutOfRange { op: "slice", index: end, bound });
        }
        let (shape, data) = if axis == 0 {
            (vec![end - start, c], x.data()[start * c..end * c].to_vec())
        } else {
            let w = end - start;
            let mut d = Vec::with_capacity(r * w);
            for i in 0..r {
                d.extend_from_slice(&x.row(i)[start..end]);
            }
            (vec![r, w], d)
        };
        let ng = self.needs(a);
        Ok(self.push(Tensor { shape, data }, Op::Slice { src: a, axis, start }, ng))
    }

    /// Rows of a 2-D table selected by `ids`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        let (v, d) = dims2("embedding_gather", t.shape())?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange { op: "embedding_gather", index: id, bound: v });
            }
            data.extend_from_slice(t.row(id));
        }
        let ng = self.needs(table);
        Ok(self.push(Tensor { shape: vec![ids.len(), d], data }, Op::Gather { table, ids: ids.to_vec() }, ng))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let t = Tensor { shape: x.shape().to_vec(), data: x.data().iter().map(|&p| p.max(T::zero())).collect() };
        let ng = self.needs(a);
        self.push(t, Op::Relu(a), ng)
    }

    /// Inverted dropout. Returns `a` itself in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, seed: u64) -> Var {
        if !self.training || p <= 0.0 {
            return a;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::from_f64(1.0 / (1.0 - p));
        let x = self.value(a);
        let scale: Vec<T> = (0..x.len()).map(|_| if rng.random_bool(p) { T::zero() } else { keep }).collect();
        let data = x.data().iter().zip(&scale).map(|(&v, &s)| v * s).collect();
        let t = Tensor { shape: x.shape().to_vec(), data };
        let ng = self.needs(a);
        self.push(t, Op::Dropout { src: a, scale }, ng)
    }

    /// Normalizes each last-axis row to zero mean and unit (population) variance.
    pub fn layernorm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let d = *x.shape().last().unwrap_or(&1);
        let rows = x.len() / d.max(1);
        let mut out = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(rows);
        let dn = T::from_f64(d as f64);
        for i in 0..rows {
            let row = &x.data()[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + T::from_f64(eps)).sqrt();
            for j in 0..d {
                out[i * d + j] = (row[j] - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor { shape: x.shape().to_vec(), data: out };
        let ng = self.needs(a);
        self.push(t, Op::LayerNorm { src: a, inv_std }, ng)
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        self.softmax_impl(a, None).expect("unmasked softmax cannot fail")
    }

    /// Softmax over the last axis where `allow` (same element count as `a`)
    /// marks the positions that may receive probability mass.
    pub fn masked_softmax(&mut self, a: Var, allow: &[bool]) -> Result<Var, TensorError> {
        self.softmax_impl(a, Some(allow))
    }

    fn softmax_impl(&mut self, a: Var, allow: Option<&[bool]>) -> Result<Var, TensorError> {
        let x = self.value(a);
        if let Some(m) = allow {
            if m.len() != x.len() {
                return Err(mismatch("masked_softmax", x.shape(), &[m.len()]));
            }
        }
        let d = *x.shape().last().unwrap_or(&1);
        let mut out = vec![T::zero(); x.len()];
        for (i, chunk) in out.chunks_mut(d).enumerate() {
            let range = i * d..(i + 1) * d;
            softmax_row(&x.data()[range.clone()], allow.map(|m| &m[range]), chunk);
        }
        let t = Tensor { shape: x.shape().to_vec(), data: out };
        let ng = self.needs(a);
        Ok(self.push(t, Op::Softmax(a), ng))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, skipping rows whose target is `pad`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var, TensorError> {
        let x = self.value(logits);
        let (n, v) = dims2("cross_entropy", x.shape())?;
        if targets.len() != n {
            return Err(mismatch("cross_entropy", x.shape(), &[targets.len()]));
        }
        let mut probs = vec![T::zero(); n * v];
        let mut total = T::zero();
        let mut count = 0;
        for (i, &t) in targets.iter().enumerate() {
            let row = x.row(i);
            softmax_row(row, None, &mut probs[i * v..(i + 1) * v]);
            if t == pad {
                continue;
            }
            if t >= v {
                return Err(TensorError::IndexOutOfRange { op: "cross_entropy", index: t, bound: v });
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
            total += lse - row[t];
            count += 1;
        }
        let loss = if count > 0 { total / T::from_f64(count as f64) } else { T::zero() };
        let ng = self.needs(logits);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), pad, probs, count };
        Ok(self.push(Tensor::scalar(loss), op, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Populates gradients of `loss` with respect to every tracked node.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let nodes = &self.nodes;
            macro_rules! acc {
                ($v:expr) => {
                    grad_slot(&mut grads, nodes, $v)
                };
            }
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if let Some(ga) = acc!(v) {
                            ga.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                        }
                    }
                }
                Op::AddRow(a, r) => {
                    if let Some(ga) = acc!(*a) {
                        ga.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                    }
                    if let Some(gr) = acc!(*r) {
                        let d = gr.len();
                        for (k, &y) in g.iter().enumerate() {
                            gr[k % d] += y;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(ga) = acc!(*a) {
                        for k in 0..g.len() {
                            ga[k] += g[k] * vb[k];
                        }
                    }
                    if let Some(gb) = acc!(*b) {
                        for k in 0..g.len() {
                            gb[k] += g[k] * va[k];
                        }
                    }
                }
                Op::MulRow(a, r) => {
                    let (va, vr) = (nodes[a.0].value.data(), nodes[r.0].value.data());
                    let d = vr.len();
                    if let Some(ga) = acc!(*a) {
                        for k in 0..g.len() {
                            ga[k] += g[k] * vr[k % d];
                        }
                    }
                    if let Some(gr) = acc!(*r) {
                        for k in 0..g.len() {
                            gr[k % d] += g[k] * va[k];
                        }
                    }
                }
                Op::Scale(a, s) => {
                    if let Some(ga) = acc!(*a) {
                        ga.iter_mut().zip(&g).for_each(|(x, &y)| *x += y * *s);
                    }
                }
                Op::MatMul(a, b) => {
                    let (xa, xb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = (xa.shape()[0], xa.shape()[1]);
                    let n = xb.shape()[1];
                    if let Some(ga) = acc!(*a) {
                        let bt = transposed(xb.data(), k, n);
                        gemm_acc(g.as_slice(), &bt, ga, m, n, k);
                    }
                    if let Some(gb) = acc!(*b) {
                        let at = transposed(xa.data(), m, k);
                        gemm_acc(&at, g.as_slice(), gb, k, m, n);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    if let Some(ga) = acc!(*a) {
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += g[j * r + i];
                            }
                        }
                    }
                }
                Op::Reshape(a) => {
                    if let Some(ga) = acc!(*a) {
                        ga.iter_mut().zip(&g).for_each(|(x, &y)| *x += y);
                    }
                }
                Op::Concat { parts, axis } => {
                    let cols = node.value.shape()[1];
                    let mut offset = 0;
                    for &p in parts {
                        let (pr, pc) = (nodes[p.0].value.shape()[0], nodes[p.0].value.shape()[1]);
                        if let Some(gp) = acc!(p) {
                            if *axis == 0 {
                                gp.iter_mut().zip(&g[offset * cols..]).for_each(|(x, &y)| *x += y);
                            } else {
                                for i in 0..pr {
                                    for j in 0..pc {
                                        gp[i * pc + j] += g[i * cols + offset + j];
                                    }
                                }
                            }
                        }
                        offset += if *axis == 0 { pr } else { pc };
                    }
                }
                Op::Slice { src, axis, start } => {
                    let c = nodes[src.0].value.shape()[1];
                    let (sr, sc) = (node.value.shape()[0], node.value.shape()[1]);
                    if let Some(gs) = acc!(*src) {
                        for i in 0..sr {
                            for j in 0..sc {
                                let (r, cc) = if *axis == 0 { (i + start, j) } else { (i, j + start) };
                                gs[r * c + cc] += g[i * sc + j];
                            }
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    let d = nodes[table.0].value.shape()[1];
                    if let Some(gt) = acc!(*table) {
                        for (i, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                gt[id * d + j] += g[i * d + j];
                            }
                        }
                    }
                }
                Op::Relu(a) => {
                    let x = nodes[a.0].value.data();
                    if let Some(ga) = acc!(*a) {
                        for k in 0..g.len() {
                            if x[k] > T::zero() {
                                ga[k] += g[k];
                            }
                        }
                    }
                }
                Op::Dropout { src, scale } => {
                    if let Some(gs) = acc!(*src) {
                        for k in 0..g.len() {
                            gs[k] += g[k] * scale[k];
                        }
                    }
                }
                Op::LayerNorm { src, inv_std } => {
                    let y = node.value.data();
                    let d = *node.value.shape().last().unwrap_or(&1);
                    let dn = T::from_f64(d as f64);
                    if let Some(gs) = acc!(*src) {
                        for (i, &is) in inv_std.iter().enumerate() {
                            let r = i * d..(i + 1) * d;
                            let (gy, yy) = (&g[r.clone()], &y[r.clone()]);
                            let mean_g = gy.iter().copied().sum::<T>() / dn;
                            let mean_gy = gy.iter().zip(yy).map(|(&a, &b)| a * b).sum::<T>() / dn;
                            for j in 0..d {
                                gs[i * d + j] += is * (gy[j] - mean_g - yy[j] * mean_gy);
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    let p = node.value.data();
                    let d = *node.value.shape().last().unwrap_or(&1);
                    if let Some(ga) = acc!(*a) {
                        for i in 0..p.len() / d.max(1) {
                            let r = i * d..(i + 1) * d;
                            let dot = p[r.clone()].iter().zip(&g[r.clone()]).map(|(&a, &b)| a * b).sum::<T>();
                            for k in r {
                                ga[k] += p[k] * (g[k] - dot);
                            }
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, pad, probs, count } => {
                    if *count == 0 {
                        continue;
                    }
                    let v = nodes[logits.0].value.shape()[1];
                    let scale = g[0] / T::from_f64(*count as f64);
                    if let Some(gl) = acc!(*logits) {
                        for (i, &t) in targets.iter().enumerate() {
                            if t == *pad {
                                continue;
                            }
                            for j in 0..v {
                                let onehot = if j == t { T::one() } else { T::zero() };
                                gl[i * v + j] += (probs[i * v + j] - onehot) * scale;
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(ga) = acc!(*a) {
                        ga.iter_mut().for_each(|x| *x += g[0]);
                    }
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn masked_softmax_zeroes_disallowed() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(vec![3], &[5.0, -3.0, 7.0]));
        let p = g.masked_softmax(x, &[true, false, true]).unwrap();
        let v = g.value(p).data();
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_two_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(vec![2], &[1.0, 2.0]));
        let p = g.softmax_lastdim(x);
        let v = g.value(p).data();
        assert!((v[0] - 0.26894).abs() < 1e-4 && (v[1] - 0.73106).abs() < 1e-4);
    }

    #[test]
    fn layernorm_two_values() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(vec![2], &[1.0, 3.0]));
        let y = g.layernorm(x, 0.0);
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(vec![2], &[1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn reused_parameter_accumulates() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(vec![3], &[0.5, -1.0, 2.0]));
        let x1 = g.constant(t(vec![3], &[1.0, 2.0, 3.0]));
        let x2 = g.constant(t(vec![3], &[-4.0, 0.5, 1.5]));
        let a = g.mul(w, x1).unwrap();
        let b = g.mul(w, x2).unwrap();
        let (sa, sb) = (g.sum(a), g.sum(b));
        let loss = g.add(sa, sb).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[-3.0, 2.5, 4.5]);
    }

    #[test]
    fn backward_twice_fails() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(vec![1], &[1.0]));
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        assert_eq!(g.backward(loss), Err(TensorError::GraphConsumed));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(vec![2], &[1.0, 2.0]));
        assert!(matches!(g.backward(w), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn shape_errors_name_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(vec![2, 3], &[0.0; 6]));
        let b = g.constant(t(vec![2, 3], &[0.0; 6]));
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"), "{err}");
        let c = g.constant(t(vec![3], &[0.0; 3]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn dropout_modes() {
        let x = t(vec![4, 4], &(0..16).map(f64::from).collect::<Vec<_>>());
        let mut eval = Graph::<f64>::new();
        let v = eval.constant(x.clone());
        assert_eq!(eval.dropout(v, 0.5, 1), v);

        let run = || {
            let mut g = Graph::<f64>::new().with_training(true);
            let v = g.constant(x.clone());
            let d = g.dropout(v, 0.5, 9);
            g.value(d).clone()
        };
        assert_eq!(run(), run());
        assert!(run().data().iter().any(|&z| z == 0.0));
    }

    #[test]
    fn cross_entropy_ignores_pad() {
        let mut g = Graph::<f64>::new();
        let l = g.param(t(vec![2, 3], &[1.0, 2.0, 3.0, 9.0, -9.0, 0.0]));
        let loss = g.cross_entropy(l, &[2, 7], 7).unwrap();
        let row = [1.0f64, 2.0, 3.0];
        let lse = row.iter().map(|z| z.exp()).sum::<f64>().ln();
        assert!((g.value(loss).data()[0] - (lse - 3.0)).abs() < 1e-12);
        g.backward(loss).unwrap();
        assert_eq!(&g.grad(l).unwrap()[3..], &[0.0, 0.0, 0.0]);
    }
}
