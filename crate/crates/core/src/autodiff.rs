//! Reverse-mode automatic differentiation on a tape.
//!
//! Every op appends one node holding its forward value plus whatever it needs
//! for the backward pass. Nodes are created in topological order, so the
//! backward sweep simply walks the tape from the end.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Float, MatMut, MatRef, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a fused multi-head attention call.
///
/// Queries are `[batch * q_len, dim]`, keys and values `[batch * k_len, dim]`;
/// head `h` owns columns `h * dim / heads .. (h + 1) * dim / heads`.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// Query `i` may only see keys `j <= i`.
    pub causal: bool,
    /// `batch * k_len` flags; false keys get exactly zero weight.
    pub key_valid: Vec<bool>,
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { x: Var, bias: Var },
    Scale { x: Var, factor: F },
    MulConst { x: Var, mask: Vec<F> },
    Relu(Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, rstd: Vec<F> },
    GatherRows { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<F> },
    CrossEntropy { logits: Var, targets: Vec<usize>, pad_id: usize, probs: Vec<F>, count: usize },
    MaskedMaxPool { x: Var, argmax: Vec<usize> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// A tape of tensor operations. Single-threaded; build one per forward pass.
pub struct Graph<F = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a rank-2 operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ad, bd) = (self.value(a).dims().to_vec(), self.value(b).dims().to_vec());
        if ad.len() != 2 || bd.len() != 2 {
            return Err(shape_err("matmul needs rank-2 operands", &ad, &bd));
        }
        let (m, k) = if ta { (ad[1], ad[0]) } else { (ad[0], ad[1]) };
        let (k2, n) = if tb { (bd[1], bd[0]) } else { (bd[0], bd[1]) };
        if k != k2 {
            return Err(shape_err("matmul inner dims differ", &ad, &bd));
        }
        let mut out = Tensor::zeros(&[m, n]);
        {
            let av = self.value(a);
            let bv = self.value(b);
            let mut ar = MatRef::dense(av.data(), 0, ad[0], ad[1]);
            if ta {
                ar = ar.t();
            }
            let mut br = MatRef::dense(bv.data(), 0, bd[0], bd[1]);
            if tb {
                br = br.t();
            }
            gemm(ar, br, MatMut::dense(out.data_mut(), 0, m, n), false);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (ad, bd) = (self.value(a).dims(), self.value(b).dims());
        if ad != bd {
            return Err(shape_err(what, ad, bd));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.dims().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Adds a `[n]` bias to every row of a `[.., n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xd, bd) = (self.value(x).dims().to_vec(), self.value(bias).dims().to_vec());
        let n = self.value(x).cols();
        if bd != [n] {
            return Err(shape_err("bias must match the last axis", &xd, &bd));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(out, Op::AddBias { x, bias }, ng))
    }

    /// `x · w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let ng = self.ng(x);
        self.push(out, Op::Scale { x, factor }, ng)
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mul_const(&mut self, x: Var, mask: Vec<F>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::Shape(format!(
                "mask of {} for tensor {:?}",
                mask.len(),
                self.value(x).dims()
            )));
        }
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(xv.dims().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::MulConst { x, mask }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > F::zero() { v } else { F::zero() });
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Tensor::scalar(v.sum() / F::of(v.len().max(1) as f64));
        let ng = self.ng(x);
        self.push(out, Op::Mean(x), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Transpose(x), ng))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.cols();
        if n == 0 {
            return Err(Error::Shape("softmax over an empty axis".into()));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// Layer normalization over the last axis (population variance).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if self.value(gain).dims() != [d] || self.value(bias).dims() != [d] {
            return Err(shape_err(
                "layer_norm affine params must match the last axis",
                xv.dims(),
                self.value(gain).dims(),
            ));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let eps = F::of(eps);
        let inv_d = F::of(1.0 / d as f64);
        let mut out = xv.clone();
        let mut rstd = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let r = F::one() / (var + eps).sqrt();
            for (i, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * r * g[i] + b[i];
            }
            rstd.push(r);
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, rstd }, ng))
    }

    /// Rows of a `[n, d]` table picked by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::Shape(format!("gather_rows needs rank 2, got {:?}", tv.dims())));
        }
        let (n, d) = (tv.dims()[0], tv.dims()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= n {
                return Err(Error::Shape(format!("row {i} out of range for {n} rows")));
            }
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        let ng = self.ng(table);
        Ok(self.push(
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Vertical concatenation of rank-2 tensors with equal width.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.cols() != d {
                return Err(Error::Shape(format!("concat_rows width {d} vs {:?}", v.dims())));
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / d;
        let out = Tensor::new(vec![rows, d], data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Fused scaled dot-product attention over all heads and batch items.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qd, kd, vd) = (
            self.value(q).dims().to_vec(),
            self.value(k).dims().to_vec(),
            self.value(v).dims().to_vec(),
        );
        let d = *qd.last().unwrap_or(&0);
        if qd != [spec.batch * spec.q_len, d]
            || kd != [spec.batch * spec.k_len, d]
            || vd != kd
            || spec.heads == 0
            || d % spec.heads != 0
            || spec.key_valid.len() != spec.batch * spec.k_len
        {
            return Err(Error::Shape(format!(
                "attention q {qd:?} k {kd:?} v {vd:?} with batch {} heads {} q_len {} k_len {}",
                spec.batch, spec.heads, spec.q_len, spec.k_len
            )));
        }
        let (lq, lk, dh) = (spec.q_len, spec.k_len, d / spec.heads);
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![F::zero(); spec.batch * spec.heads * lq * lk];
        let mut out = Tensor::zeros(&[spec.batch * lq, d]);
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let p_off = (b * spec.heads + h) * lq * lk;
                let p = &mut probs[p_off..p_off + lq * lk];
                gemm(
                    MatRef::strided(qv, b * lq * d + h * dh, lq, dh, d),
                    MatRef::strided(kv, b * lk * d + h * dh, lk, dh, d).t(),
                    MatMut::dense(p, 0, lq, lk),
                    false,
                );
                for i in 0..lq {
                    let row = &mut p[i * lk..(i + 1) * lk];
                    let valid = |j: usize| spec.key_valid[b * lk + j] && (!spec.causal || j <= i);
                    masked_softmax(row, scale, valid);
                }
                gemm(
                    MatRef::dense(p, 0, lq, lk),
                    MatRef::strided(vv, b * lk * d + h * dh, lk, dh, d),
                    MatMut::strided(out.data_mut(), b * lq * d + h * dh, lq, dh, d),
                    false,
                );
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(out, Op::Attention { q, k, v, spec, probs }, ng))
    }

    /// Mean negative log-likelihood over non-pad rows of `[n, vocab]` logits.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad_id: usize) -> Result<Var> {
        let lv = self.value(logits);
        let (n, vocab) = (lv.rows(), lv.cols());
        if lv.rank() != 2 || targets.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy logits {:?} with {} targets",
                lv.dims(),
                targets.len()
            )));
        }
        let count = targets.iter().filter(|&&t| t != pad_id).count();
        if count == 0 {
            return Err(Error::AllPad);
        }
        let mut probs = lv.data().to_vec();
        let mut total = 0.0f64;
        for (row, &t) in probs.chunks_mut(vocab).zip(targets) {
            if t == pad_id {
                row.iter_mut().for_each(|v| *v = F::zero());
                continue;
            }
            if t >= vocab {
                return Err(Error::Shape(format!("target {t} outside vocabulary of {vocab}")));
            }
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            total += (lse - row[t]).f64();
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let out = Tensor::scalar(F::of(total / count as f64));
        let ng = self.ng(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad_id,
                probs,
                count,
            },
            ng,
        ))
    }

    /// Coordinatewise max over the valid rows of each group.
    ///
    /// `x` is `[groups * len, d]`; `valid` flags each of its rows.
    pub fn masked_max_pool(&mut self, x: Var, groups: usize, valid: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let rows = xv.rows();
        if groups == 0 || rows % groups != 0 || valid.len() != rows {
            return Err(Error::Shape(format!(
                "max pool of {:?} into {groups} groups with {} flags",
                xv.dims(),
                valid.len()
            )));
        }
        let len = rows / groups;
        let mut out = vec![F::zero(); groups * d];
        let mut argmax = vec![0usize; groups * d];
        for g in 0..groups {
            let mut any = false;
            for r in 0..len {
                let ri = g * len + r;
                if !valid[ri] {
                    continue;
                }
                let row = xv.row(ri);
                for c in 0..d {
                    if !any || row[c] > out[g * d + c] {
                        out[g * d + c] = row[c];
                        argmax[g * d + c] = ri;
                    }
                }
                any = true;
            }
            if !any {
                return Err(Error::AllPad);
            }
        }
        let out = Tensor::new(vec![groups, d], out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::MaskedMaxPool { x, argmax }, ng))
    }

    /// Exact reverse-mode gradients of a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).dims(), F::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, id: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ad, bd) = (av.dims(), bv.dims());
                let (m, n) = (g.dims()[0], g.dims()[1]);
                let gr = MatRef::dense(g.data(), 0, m, n);
                let mut opa = MatRef::dense(av.data(), 0, ad[0], ad[1]);
                if *ta {
                    opa = opa.t();
                }
                let mut opb = MatRef::dense(bv.data(), 0, bd[0], bd[1]);
                if *tb {
                    opb = opb.t();
                }
                if self.ng(*a) {
                    let ga = grad_slot(grads, *a, ad);
                    let mut dst = MatMut::dense(ga.data_mut(), 0, ad[0], ad[1]);
                    if *ta {
                        dst = dst.t();
                    }
                    gemm(gr, opb.t(), dst, true);
                }
                if self.ng(*b) {
                    let gb = grad_slot(grads, *b, bd);
                    let mut dst = MatMut::dense(gb.data_mut(), 0, bd[0], bd[1]);
                    if *tb {
                        dst = dst.t();
                    }
                    gemm(opa.t(), gr, dst, true);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.data(), |x| x);
                self.accumulate(grads, *b, g.data(), |x| x);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.data(), |x| x);
                self.accumulate(grads, *b, g.data(), |x| -x);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let prod: Vec<F> = g.data().iter().zip(self.value(*b).data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, &prod, |x| x);
                }
                if self.ng(*b) {
                    let prod: Vec<F> = g.data().iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, &prod, |x| x);
                }
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, g.data(), |v| v);
                if self.ng(*bias) {
                    let n = g.cols();
                    let gb = grad_slot(grads, *bias, self.value(*bias).dims());
                    for row in g.data().chunks(n) {
                        for (o, &v) in gb.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                self.accumulate(grads, *x, g.data(), |v| v * f);
            }
            Op::MulConst { x, mask } => {
                let prod: Vec<F> = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                self.accumulate(grads, *x, &prod, |v| v);
            }
            Op::Relu(x) => {
                let masked: Vec<F> = g
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| if y > F::zero() { gv } else { F::zero() })
                    .collect();
                self.accumulate(grads, *x, &masked, |v| v);
            }
            Op::Sum(x) => {
                let s = g.item();
                let n = self.value(*x).len();
                self.accumulate(grads, *x, &vec![s; n], |v| v);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let s = g.item() / F::of(n.max(1) as f64);
                self.accumulate(grads, *x, &vec![s; n], |v| v);
            }
            Op::Transpose(x) => {
                let gt = g.transpose().expect("rank 2");
                self.accumulate(grads, *x, gt.data(), |v| v);
            }
            Op::Softmax(x) => {
                let n = g.cols();
                let mut dx = Vec::with_capacity(g.len());
                for (gr, yr) in g.data().chunks(n).zip(node.value.data().chunks(n)) {
                    let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(&a, &y)| y * (a - dot)));
                }
                self.accumulate(grads, *x, &dx, |v| v);
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let gain_v = self.value(*gain).data();
                let inv_d = F::of(1.0 / d as f64);
                let mut dx = vec![F::zero(); xv.len()];
                let mut dgain = vec![F::zero(); d];
                let mut dbias = vec![F::zero(); d];
                let mut xhat = vec![F::zero(); d];
                let mut dxhat = vec![F::zero(); d];
                for (r, (xr, gr)) in xv.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
                    let mean = xr.iter().copied().sum::<F>() * inv_d;
                    let rs = rstd[r];
                    for i in 0..d {
                        xhat[i] = (xr[i] - mean) * rs;
                        dxhat[i] = gr[i] * gain_v[i];
                        dgain[i] += gr[i] * xhat[i];
                        dbias[i] += gr[i];
                    }
                    let m1 = dxhat.iter().copied().sum::<F>() * inv_d;
                    let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
                    for i in 0..d {
                        dx[r * d + i] = rs * (dxhat[i] - m1 - xhat[i] * m2);
                    }
                }
                self.accumulate(grads, *x, &dx, |v| v);
                self.accumulate(grads, *gain, &dgain, |v| v);
                self.accumulate(grads, *bias, &dbias, |v| v);
            }
            Op::GatherRows { table, ids } => {
                if self.ng(*table) {
                    let d = g.cols();
                    let gt = grad_slot(grads, *table, self.value(*table).dims());
                    for (r, &i) in ids.iter().enumerate() {
                        let src = &g.data()[r * d..(r + 1) * d];
                        for (o, &v) in gt.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(grads, p, &g.data()[off..off + n], |v| v);
                    off += n;
                }
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(g, *q, *k, *v, spec, probs, grads);
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad_id,
                probs,
                count,
            } => {
                let vocab = self.value(*logits).cols();
                let s = g.item() / F::of(*count as f64);
                let mut dl = probs.clone();
                for (row, &t) in dl.chunks_mut(vocab).zip(targets) {
                    if t == *pad_id {
                        continue;
                    }
                    row[t] -= F::one();
                    row.iter_mut().for_each(|v| *v *= s);
                }
                self.accumulate(grads, *logits, &dl, |v| v);
            }
            Op::MaskedMaxPool { x, argmax } => {
                if self.ng(*x) {
                    let d = g.cols();
                    let gx = grad_slot(grads, *x, self.value(*x).dims());
                    for (i, &r) in argmax.iter().enumerate() {
                        gx.data_mut()[r * d + i % d] += g.data()[i];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor<F>,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[F],
        grads: &mut [Option<Tensor<F>>],
    ) {
        let d = g.cols();
        let (lq, lk, dh) = (spec.q_len, spec.k_len, d / spec.heads);
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![F::zero(); qv.len()];
        let mut dk = vec![F::zero(); kv.len()];
        let mut dv = vec![F::zero(); vv.len()];
        let mut ds = vec![F::zero(); lq * lk];
        for b in 0..spec.batch {
            for h in 0..spec.heads {
                let p = &probs[(b * spec.heads + h) * lq * lk..][..lq * lk];
                let go = MatRef::strided(g.data(), b * lq * d + h * dh, lq, dh, d);
                // dV = Pᵀ · dO
                gemm(
                    MatRef::dense(p, 0, lq, lk).t(),
                    go,
                    MatMut::strided(&mut dv, b * lk * d + h * dh, lk, dh, d),
                    true,
                );
                // dP = dO · Vᵀ
                gemm(
                    go,
                    MatRef::strided(vv, b * lk * d + h * dh, lk, dh, d).t(),
                    MatMut::dense(&mut ds, 0, lq, lk),
                    false,
                );
                for i in 0..lq {
                    let pr = &p[i * lk..(i + 1) * lk];
                    let dr = &mut ds[i * lk..(i + 1) * lk];
                    let dot: F = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv_, &pv) in dr.iter_mut().zip(pr) {
                        *dv_ = pv * (*dv_ - dot) * scale;
                    }
                }
                gemm(
                    MatRef::dense(&ds, 0, lq, lk),
                    MatRef::strided(kv, b * lk * d + h * dh, lk, dh, d),
                    MatMut::strided(&mut dq, b * lq * d + h * dh, lq, dh, d),
                    true,
                );
                gemm(
                    MatRef::dense(&ds, 0, lq, lk).t(),
                    MatRef::strided(qv, b * lq * d + h * dh, lq, dh, d),
                    MatMut::strided(&mut dk, b * lk * d + h * dh, lk, dh, d),
                    true,
                );
            }
        }
        self.accumulate(grads, q, &dq, |x| x);
        self.accumulate(grads, k, &dk, |x| x);
        self.accumulate(grads, v, &dv, |x| x);
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], target: Var, src: &[F], f: impl Fn(F) -> F) {
        if !self.ng(target) {
            return;
        }
        let slot = grad_slot(grads, target, self.value(target).dims());
        for (o, &s) in slot.data_mut().iter_mut().zip(src) {
            *o += f(s);
        }
    }
}

fn grad_slot<'a, F: Float>(grads: &'a mut [Option<Tensor<F>>], v: Var, dims: &[usize]) -> &'a mut Tensor<F> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(dims))
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place<F: Float>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Softmax of `scale * row` restricted to `valid` entries; the rest become exactly zero.
fn masked_softmax<F: Float>(row: &mut [F], scale: F, valid: impl Fn(usize) -> bool) {
    let mut max = F::neg_infinity();
    for (j, v) in row.iter_mut().enumerate() {
        *v *= scale;
        if valid(j) && *v > max {
            max = *v;
        }
    }
    if max == F::neg_infinity() {
        row.iter_mut().for_each(|v| *v = F::zero());
        return;
    }
    let mut total = F::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if valid(j) {
            *v = (*v - max).exp();
            total += *v;
        } else {
            *v = F::zero();
        }
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
