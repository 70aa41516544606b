use super::gemm::gemm;
use super::{Tensor, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum MatMulMode {
    /// `b` is a single matrix applied to every leading row of `a`.
    Shared { rows: usize },
    /// `a` and `b` carry the same leading batch extent.
    Batched { batch: usize, m: usize },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        mode: MatMulMode,
        k: usize,
        n: usize,
    },
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    Square(Var),
    Mean(Var),
    Sum(Var),
    Reshape(Var),
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    LayerNorm {
        a: Var,
        inv_std: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when it does not require one or the loss
    /// does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn leading(shape: &[usize], trailing: usize) -> usize {
    shape[..shape.len() - trailing].iter().product()
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf. Gradients are only reported for leaves created with
    /// `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(value, op, rg)
    }

    /// Matrix product over the trailing two axes.
    ///
    /// `b` is either a single `p×n` matrix shared across all leading axes of
    /// `a`, or a batch `[B, p, n]` matching `a: [B, m, p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let p = sa[sa.len() - 1];
        let (k, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if p != k {
            return Err(mismatch());
        }
        let (mode, out_shape) = if sb.len() == 2 {
            let mut out = sa.clone();
            *out.last_mut().unwrap() = n;
            (
                MatMulMode::Shared {
                    rows: leading(&sa, 1),
                },
                out,
            )
        } else if sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] {
            (
                MatMulMode::Batched {
                    batch: sa[0],
                    m: sa[1],
                },
                vec![sa[0], sa[1], n],
            )
        } else {
            return Err(mismatch());
        };
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let mut out = vec![0.0; out_shape.iter().product()];
        match mode {
            MatMulMode::Shared { rows } => gemm(av, false, bv, false, &mut out, rows, k, n, 0.0),
            MatMulMode::Batched { batch, m } => {
                for i in 0..batch {
                    gemm(
                        &av[i * m * k..(i + 1) * m * k],
                        false,
                        &bv[i * k * n..(i + 1) * k * n],
                        false,
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                        0.0,
                    );
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::MatMul { a, b, mode, k, n }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::OutOfBounds {
                op: "transpose",
                axis: 1,
                shape,
            });
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let out = transpose_last2(self.nodes[a.0].value.data(), r, c);
        let mut new_shape = shape;
        let len = new_shape.len();
        new_shape.swap(len - 2, len - 1);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::Transpose(a), rg))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
            Ok(())
        } else {
            Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        sign: f64,
        op: Op,
    ) -> Result<Var> {
        self.broadcast_check(name, a, b)?;
        let av = &self.nodes[a.0].value;
        let bv = self.nodes[b.0].value.data();
        let block = bv.len();
        let mut out = av.data().to_vec();
        for chunk in out.chunks_mut(block) {
            chunk
                .iter_mut()
                .zip(bv)
                .for_each(|(x, y)| *x += sign * y);
        }
        let value = Tensor::new(av.shape().to_vec(), out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// `a + b`, where `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast("add", a, b, 1.0, Op::Add(a, b))
    }

    /// `a - b`, with the same broadcasting rule as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_broadcast("sub", a, b, -1.0, Op::Sub(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if src.data().iter().any(|x| x.is_nan()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let cols = *src.shape().last().unwrap();
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// Mean of all entries, as a `[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let src = self.nodes[a.0].value.data();
        let m = src.iter().sum::<f64>() / src.len() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum::<f64>();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[a.0].value.reshaped(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::OutOfBounds {
                op: "slice",
                axis,
                shape,
            });
        }
        let (outer, inner) = outer_inner(&shape, axis);
        let src = self.nodes[a.0].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::new(new_shape, out)?,
            Op::Slice { a, axis, start },
            rg,
        ))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::OutOfBounds {
                op: "concat",
                axis,
                shape: first,
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = &self.nodes[p.0].value;
                let ext = v.shape()[axis];
                out.extend_from_slice(&v.data()[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Normalizes every row of the last axis to zero mean and unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let src = &self.nodes[a.0].value;
        let cols = *src.shape().last().unwrap();
        let mut out = src.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / cols);
        for row in out.chunks_mut(cols) {
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mu) * is);
            inv_std.push(is);
        }
        let value = Tensor::new(src.shape().to_vec(), out).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(value, Op::LayerNorm { a, inv_std }, rg)
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Visits every recorded node once, newest first. Only leaf gradients are
    /// retained in the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(
            grads[v.0]
                .get_or_insert_with(|| vec![0.0; node.value.numel()])
                .as_mut_slice(),
        )
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, mode, k, n } => {
                let (k, n) = (*k, *n);
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                match *mode {
                    MatMulMode::Shared { rows } => {
                        if let Some(ga) = self.grad_slot(grads, *a) {
                            gemm(g, false, bv, true, ga, rows, n, k, 1.0);
                        }
                        if let Some(gb) = self.grad_slot(grads, *b) {
                            gemm(av, true, g, false, gb, k, rows, n, 1.0);
                        }
                    }
                    MatMulMode::Batched { batch, m } => {
                        if let Some(ga) = self.grad_slot(grads, *a) {
                            for i in 0..batch {
                                gemm(
                                    &g[i * m * n..(i + 1) * m * n],
                                    false,
                                    &bv[i * k * n..(i + 1) * k * n],
                                    true,
                                    &mut ga[i * m * k..(i + 1) * m * k],
                                    m,
                                    n,
                                    k,
                                    1.0,
                                );
                            }
                        }
                        if let Some(gb) = self.grad_slot(grads, *b) {
                            for i in 0..batch {
                                gemm(
                                    &av[i * m * k..(i + 1) * m * k],
                                    true,
                                    &g[i * m * n..(i + 1) * m * n],
                                    false,
                                    &mut gb[i * k * n..(i + 1) * k * n],
                                    k,
                                    m,
                                    n,
                                    1.0,
                                );
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                // output is [.., c, r]; its transpose restores [.., r, c]
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let back = transpose_last2(g, r, c);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    add_into(ga, &back);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = self.grad_slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    let block = gb.len();
                    for chunk in g.chunks(block) {
                        gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Relu(a) => {
                let av = self.nodes[a.0].value.data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((x, gy), xin) in ga.iter_mut().zip(g).zip(av) {
                        if *xin > 0.0 {
                            *x += gy;
                        }
                    }
                }
            }
            Op::Square(a) => {
                let av = self.nodes[a.0].value.data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((x, gy), xin) in ga.iter_mut().zip(g).zip(av) {
                        *x += 2.0 * xin * gy;
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((gx, gy), yr) in ga
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(y.chunks(cols))
                    {
                        let dot: f64 = gy.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for j in 0..cols {
                            gx[j] += yr[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Slice { a, axis, start } => {
                let src_shape = self.nodes[a.0].value.shape().to_vec();
                let len = node.value.shape()[*axis];
                let (outer, inner) = outer_inner(&src_shape, *axis);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for o in 0..outer {
                        let base = o * src_shape[*axis] * inner + start * inner;
                        add_into(
                            &mut ga[base..base + len * inner],
                            &g[o * len * inner..(o + 1) * len * inner],
                        );
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, inner) = outer_inner(node.value.shape(), *axis);
                let total = node.value.shape()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let ext = self.nodes[p.0].value.shape()[*axis];
                    if let Some(gp) = self.grad_slot(grads, p) {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            add_into(
                                &mut gp[o * ext * inner..(o + 1) * ext * inner],
                                &g[src..src + ext * inner],
                            );
                        }
                    }
                    offset += ext;
                }
            }
            Op::LayerNorm { a, inv_std } => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (((gx, gy), yr), is) in ga
                        .chunks_mut(cols)
                        .zip(g.chunks(cols))
                        .zip(y.chunks(cols))
                        .zip(inv_std)
                    {
                        let mean_g = gy.iter().sum::<f64>() / cols as f64;
                        let mean_gy =
                            gy.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            gx[j] += is * (gy[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn transpose_last2(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for (blk_in, blk_out) in src.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                blk_out[j * r + i] = blk_in[i * c + j];
            }
        }
    }
    out
}
