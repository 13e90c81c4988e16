//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to the tape, so node order is already a
//! topological order: `backward` walks the tape from the loss towards the
//! leaves and reaches each node only after all of its consumers.

use std::collections::HashMap;

use super::element::Element;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use super::NumError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_shared: bool,
        trans_b: bool,
    },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Gather { src: Var, rows: Vec<usize> },
    Concat { a: Var, b: Var },
    Softmax { a: Var },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu { a: Var },
    Dropout { a: Var, mask: Vec<T> },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Sum { a: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of primitive applications for one forward pass.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: HashMap<usize, Vec<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: HashMap::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// Accumulated gradient of a leaf created with `requires_grad`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(&v.0).map(|g| g.as_slice())
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.input(store.get(id).clone(), true);
        self.params.insert(id, v);
        v
    }

    /// Parameter leaf that is read but never differentiated.
    pub fn frozen_param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    /// Gradients of every parameter leaf, keyed by parameter id.
    pub fn param_grads(&self) -> Vec<(ParamId, &[T])> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&id, v)| self.grad(*v).map(|g| (id, g)))
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }

    fn shape_err(&self, op: &'static str, detail: String) -> NumError {
        NumError::Shape { op, detail }
    }

    /// Matrix product. `a` is `[m, k]` or `[batch, m, k]`; `b` is `[k, n]`
    /// (shared across the batch) or `[batch, k, n]`. With `trans_b` the last
    /// two axes of `b` are read transposed.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k) = match sa.as_slice() {
            [m, k] => (1, *m, *k),
            [bt, m, k] => (*bt, *m, *k),
            _ => return Err(self.shape_err("matmul", format!("lhs shape {sa:?}"))),
        };
        let (b_shared, kb, n) = match (sb.as_slice(), trans_b) {
            ([r, c], false) => (true, *r, *c),
            ([r, c], true) => (true, *c, *r),
            ([bt, r, c], false) if *bt == batch => (false, *r, *c),
            ([bt, r, c], true) if *bt == batch => (false, *c, *r),
            _ => {
                return Err(self.shape_err("matmul", format!("lhs {sa:?} with rhs {sb:?}")));
            }
        };
        if kb != k {
            return Err(self.shape_err(
                "matmul",
                format!("inner extents differ: lhs {sa:?}, rhs {sb:?}, trans_b={trans_b}"),
            ));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            for bi in 0..batch {
                let a_off = bi * m * k;
                let b_off = if b_shared { 0 } else { bi * k * n };
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &av[a_off..a_off + m * k],
                    k as isize,
                    1,
                    &bv[b_off..b_off + k * n],
                    rsb,
                    csb,
                    T::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
                trans_b,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.matmul_ext(a, b, false)
    }

    /// Elementwise sum; `b` may be broadcast over the leading axes of `a`
    /// when its shape equals a suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(self.shape_err("add", format!("{sa:?} + {sb:?}")));
        }
        let bv = self.value(b).data();
        let mut out: Vec<T> = self.value(a).data().to_vec();
        for chunk in out.chunks_exact_mut(bv.len().max(1)) {
            chunk.iter_mut().zip(bv).for_each(|(x, &y)| *x = *x + y);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("sub", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let out: Vec<T> = self.value(a).data().iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a]);
        self.push(Tensor::new(shape, out).expect("same length"), Op::Scale { a, c }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, NumError> {
        let t = self.value(a).clone().reshaped(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(t, Op::Reshape { a }, rg))
    }

    /// Materialized axis permutation: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var, NumError> {
        let sa = self.shape(a).to_vec();
        let mut seen = vec![false; sa.len()];
        if perm.len() != sa.len() || perm.iter().any(|&p| p >= sa.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(self.shape_err("permute", format!("perm {perm:?} for shape {sa:?}")));
        }
        let map = permute_index_map(&sa, perm);
        let src = self.value(a).data();
        let out: Vec<T> = map.iter().map(|&i| src[i]).collect();
        let shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let rg = self.needs(&[a]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(self.shape_err("transpose", format!("rank {r}")));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    /// Row gather over `src` viewed as `[rows, last_dim]`; doubles as the
    /// embedding lookup.
    pub fn gather_rows(&mut self, src: Var, rows: &[usize]) -> Result<Var, NumError> {
        let t = self.value(src);
        let w = t.last_dim();
        let nrows = t.len() / w.max(1);
        if let Some(&bad) = rows.iter().find(|&&r| r >= nrows) {
            return Err(NumError::Index {
                op: "gather",
                index: bad,
                bound: nrows,
            });
        }
        let mut out = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            out.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
        }
        let rg = self.needs(&[src]);
        Ok(self.push(
            Tensor::new(vec![rows.len(), w], out)?,
            Op::Gather {
                src,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(self.shape_err("concat", format!("{sa:?} with {sb:?}")));
        }
        let (wa, wb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows = self.value(a).len() / wa.max(1);
        let mut out = Vec::with_capacity(rows * (wa + wb));
        for r in 0..rows {
            out.extend_from_slice(&self.value(a).data()[r * wa..(r + 1) * wa]);
            out.extend_from_slice(&self.value(b).data()[r * wb..(r + 1) * wb]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = wa + wb;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { a, b }, rg))
    }

    fn check_finite(&self, op: &'static str, a: Var) -> Result<(), NumError> {
        if self.value(a).all_finite() {
            Ok(())
        } else {
            Err(NumError::NonFinite {
                op,
                node: a.0,
                producer: self.nodes[a.0].op.name(),
            })
        }
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax(&mut self, a: Var) -> Result<Var, NumError> {
        self.check_finite("softmax", a)?;
        let t = self.value(a);
        let w = t.last_dim();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(w) {
            softmax_in_place(row);
        }
        let shape = t.shape().to_vec();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { a }, rg))
    }

    /// Layer normalization over the last axis using the population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, NumError> {
        let w = self.value(x).last_dim();
        if self.shape(gain) != [w] || self.shape(bias) != [w] {
            return Err(self.shape_err(
                "layer_norm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let eps = T::of(eps);
        let nf = T::of(w as f64);
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let bb = self.value(bias).data();
        let rows = xv.len() / w;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * w..(r + 1) * w];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..w {
                let h = (row[c] - mean) * is;
                xhat[r * w + c] = h;
                out[r * w + c] = h * g[c] + bb[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out: Vec<T> = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a]);
        self.push(Tensor::new(shape, out).expect("same length"), Op::Gelu { a }, rg)
    }

    /// Inverted dropout with an explicit keep mask (`true` keeps).
    pub fn dropout(&mut self, a: Var, keep: &[bool], rate: f64) -> Result<Var, NumError> {
        if keep.len() != self.value(a).len() {
            return Err(self.shape_err(
                "dropout",
                format!("mask of {} for {:?}", keep.len(), self.shape(a)),
            ));
        }
        let s = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = keep.iter().map(|&k| if k { s } else { T::zero() }).collect();
        let out = zip_map(self.value(a).data(), &mask, |x, m| x * m);
        let shape = self.shape(a).to_vec();
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Dropout { a, mask }, rg))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits` (`[n, vocab]`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NumError> {
        self.check_finite("cross_entropy", logits)?;
        let t = self.value(logits);
        let v = t.last_dim();
        let n = t.len() / v.max(1);
        if t.shape().len() != 2 || n != labels.len() || n == 0 {
            return Err(self.shape_err(
                "cross_entropy",
                format!("logits {:?} with {} labels", t.shape(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= v) {
            return Err(NumError::Index {
                op: "cross_entropy",
                index: bad,
                bound: v,
            });
        }
        let mut probs = t.data().to_vec();
        let mut total = 0.0f64;
        for (r, row) in probs.chunks_mut(v).enumerate() {
            let lse = log_sum_exp(row);
            total += (lse - row[labels[r]]).as_f64();
            softmax_in_place(row);
        }
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::of(total / n as f64)),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    /// Accumulate `d loss / d leaf` into every leaf that requires a gradient.
    /// Calling it again without a fresh graph adds to the stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumError> {
        if self.value(loss).len() != 1 {
            return Err(NumError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                match self.leaf_grads.get_mut(&i) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => {
                        self.leaf_grads.insert(i, g);
                    }
                }
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_shared,
                trans_b,
            } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                acc(a, &mut |da| {
                    for bi in 0..batch {
                        let b_off = if b_shared { 0 } else { bi * k * n };
                        // dA = dC @ B^T
                        let (rs, cs) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[bi * m * n..(bi + 1) * m * n],
                            n as isize,
                            1,
                            &bv[b_off..b_off + k * n],
                            rs,
                            cs,
                            T::one(),
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            k as isize,
                            1,
                        );
                    }
                });
                acc(b, &mut |db| {
                    for bi in 0..batch {
                        let b_off = if b_shared { 0 } else { bi * k * n };
                        let a_blk = &av[bi * m * k..(bi + 1) * m * k];
                        let g_blk = &g[bi * m * n..(bi + 1) * m * n];
                        if trans_b {
                            // dB (n x k) = dC^T @ A
                            T::gemm(
                                n,
                                m,
                                k,
                                T::one(),
                                g_blk,
                                1,
                                n as isize,
                                a_blk,
                                k as isize,
                                1,
                                T::one(),
                                &mut db[b_off..b_off + k * n],
                                k as isize,
                                1,
                            );
                        } else {
                            // dB (k x n) = A^T @ dC
                            T::gemm(
                                k,
                                m,
                                n,
                                T::one(),
                                a_blk,
                                1,
                                k as isize,
                                g_blk,
                                n as isize,
                                1,
                                T::one(),
                                &mut db[b_off..b_off + k * n],
                                n as isize,
                                1,
                            );
                        }
                    }
                });
            }
            &Op::Add { a, b } => {
                acc(a, &mut |da| add_into(da, g));
                acc(b, &mut |db| {
                    for chunk in g.chunks_exact(db.len().max(1)) {
                        add_into(db, chunk);
                    }
                });
            }
            &Op::Sub { a, b } => {
                acc(a, &mut |da| add_into(da, g));
                acc(b, &mut |db| db.iter_mut().zip(g).for_each(|(d, &x)| *d = *d - x));
            }
            &Op::Mul { a, b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                acc(a, &mut |da| {
                    for idx in 0..g.len() {
                        da[idx] = da[idx] + g[idx] * bv[idx];
                    }
                });
                acc(b, &mut |db| {
                    for idx in 0..g.len() {
                        db[idx] = db[idx] + g[idx] * av[idx];
                    }
                });
            }
            &Op::Scale { a, c } => {
                acc(a, &mut |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x * c));
            }
            &Op::Reshape { a } => acc(a, &mut |da| add_into(da, g)),
            Op::Permute { a, perm } => {
                let map = permute_index_map(self.shape(*a), perm);
                acc(*a, &mut |da| {
                    for (o, &src) in map.iter().enumerate() {
                        da[src] = da[src] + g[o];
                    }
                });
            }
            Op::Gather { src, rows } => {
                let w = self.value(*src).last_dim();
                acc(*src, &mut |ds| {
                    for (o, &r) in rows.iter().enumerate() {
                        add_into(&mut ds[r * w..(r + 1) * w], &g[o * w..(o + 1) * w]);
                    }
                });
            }
            &Op::Concat { a, b } => {
                let wa = self.value(a).last_dim();
                let wb = self.value(b).last_dim();
                let rows = g.len() / (wa + wb);
                acc(a, &mut |da| {
                    for r in 0..rows {
                        add_into(&mut da[r * wa..(r + 1) * wa], &g[r * (wa + wb)..r * (wa + wb) + wa]);
                    }
                });
                acc(b, &mut |db| {
                    for r in 0..rows {
                        add_into(
                            &mut db[r * wb..(r + 1) * wb],
                            &g[r * (wa + wb) + wa..(r + 1) * (wa + wb)],
                        );
                    }
                });
            }
            &Op::Softmax { a } => {
                let y = node.value.data();
                let w = node.value.last_dim();
                acc(a, &mut |da| {
                    for r in 0..y.len() / w {
                        let ys = &y[r * w..(r + 1) * w];
                        let gs = &g[r * w..(r + 1) * w];
                        let dot: T = ys.iter().zip(gs).map(|(&p, &q)| p * q).sum();
                        for c in 0..w {
                            da[r * w + c] = da[r * w + c] + ys[c] * (gs[c] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let w = self.value(*x).last_dim();
                let rows = xhat.len() / w;
                let gv = self.value(*gain).data();
                acc(*gain, &mut |dg| {
                    for r in 0..rows {
                        for c in 0..w {
                            dg[c] = dg[c] + g[r * w + c] * xhat[r * w + c];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for r in 0..rows {
                        add_into(db, &g[r * w..(r + 1) * w]);
                    }
                });
                let nf = T::of(w as f64);
                acc(*x, &mut |dx| {
                    for r in 0..rows {
                        let gs = &g[r * w..(r + 1) * w];
                        let hs = &xhat[r * w..(r + 1) * w];
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for c in 0..w {
                            let d = gs[c] * gv[c];
                            mean_d = mean_d + d;
                            mean_dh = mean_dh + d * hs[c];
                        }
                        mean_d = mean_d / nf;
                        mean_dh = mean_dh / nf;
                        for c in 0..w {
                            let d = gs[c] * gv[c];
                            dx[r * w + c] = dx[r * w + c] + inv_std[r] * (d - mean_d - hs[c] * mean_dh);
                        }
                    }
                });
            }
            &Op::Gelu { a } => {
                let xv = self.value(a).data();
                acc(a, &mut |da| {
                    for idx in 0..g.len() {
                        da[idx] = da[idx] + g[idx] * gelu_grad(xv[idx]);
                    }
                });
            }
            Op::Dropout { a, mask } => {
                acc(*a, &mut |da| {
                    for idx in 0..g.len() {
                        da[idx] = da[idx] + g[idx] * mask[idx];
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let v = self.value(*logits).last_dim();
                let scale = g[0] / T::of(labels.len() as f64);
                acc(*logits, &mut |dl| {
                    for (r, &lab) in labels.iter().enumerate() {
                        for c in 0..v {
                            let mut p = probs[r * v + c];
                            if c == lab {
                                p = p - T::one();
                            }
                            dl[r * v + c] = dl[r * v + c] + scale * p;
                        }
                    }
                });
            }
            &Op::Sum { a } => {
                acc(a, &mut |da| da.iter_mut().for_each(|d| *d = *d + g[0]));
            }
        }
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn zip_map<T: Element>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// For each output position of the permuted tensor, the flat input index.
fn permute_index_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

pub(crate) fn log_sum_exp<T: Element>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let s: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s = s + *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

/// `0.5 * (1 + tanh(u))`, written as a logistic of `2u`.
fn gelu_gate<T: Element>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::one() / (T::one() + (-(u + u)).exp())
}

fn gelu<T: Element>(x: T) -> T {
    x * gelu_gate(x)
}

fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let s = gelu_gate(x);
    // d/dx [x s(x)] with ds/du = 2 s (1 - s)
    let two = T::of(2.0);
    s + x * two * s * (T::one() - s) * c * (T::one() + T::of(3.0) * a * x * x)
}
