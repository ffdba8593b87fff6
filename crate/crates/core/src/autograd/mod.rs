//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape: every operation pushes one node
//! holding its output value plus whatever the backward pass needs. Nodes are
//! topologically ordered by construction, so [`Graph::backward`] is a single
//! reverse sweep. Build a fresh graph (or [`Graph::clear`]) for every step.

pub mod conv;
mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use conv::out_extent;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Classification target for [`Graph::softmax_cross_entropy`].
#[derive(Clone, Debug)]
pub enum Target<'a, T> {
    /// One class index per row.
    Hard(&'a [usize]),
    /// One distribution per row (`N×C`, rows sum to 1).
    Soft(&'a Tensor<T>),
}

/// Per-channel statistics of one training-mode batch norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased (n-1) variance, the convention for running estimates.
    pub var: Vec<T>,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        geom: conv::ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        // Training mode: gradient flows through the batch mean (and the
        // variance, unless it hit the floor).
        batch: Option<Vec<bool>>,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    AddScalar {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
    },
    L2Normalize {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        norms: Vec<T>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Vec<T>,
        target: Vec<T>,
    },
    DropDiagonal {
        x: Var,
    },
    Reshape {
        x: Var,
    },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    grad: Option<Tensor<T>>,
}

/// Gradients of one backward sweep, for every node that received one.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    #[cfg(test)]
    pub(crate) fn from_parts(grads: Vec<Option<Tensor<T>>>) -> Self {
        Gradients { grads }
    }
}

/// The compute graph (tape).
#[derive(Clone, Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf by all backward calls so far.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf holding `value`; parameters pass `requires_grad = true`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// A constant copy of `v`; no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    // ---------------------------------------------------------------- layers

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::shape("conv2d", format!("input {xs:?}, weight {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, weight expects {}", xs[1], ws[1]),
            ));
        }
        let (out_h, out_w) = match (
            out_extent(xs[2], ws[2], stride, pad),
            out_extent(xs[3], ws[3], stride, pad),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("non-positive output size for input {xs:?}, kernel {ws:?}"),
                ))
            }
        };
        let geom = conv::ConvGeom {
            batch: xs[0],
            in_c: xs[1],
            in_h: xs[2],
            in_w: xs[3],
            out_c: ws[0],
            k_h: ws[2],
            k_w: ws[3],
            stride: (stride, stride),
            pad: (pad, pad),
            out_h,
            out_w,
        };
        let out = conv::forward(&geom, self.value(x).data(), self.value(w).data());
        let value = Tensor::new(vec![xs[0], ws[0], out_h, out_w], out)?;
        self.push("conv2d", value, Op::Conv2d { x, w, geom }, &[x, w])
    }

    /// Batch norm with batch statistics; also returns them for running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let (n, c, hw) = self.bn_dims(x, gamma, beta)?;
        if n * hw < 2 {
            return Err(Error::shape("batch_norm", "training mode needs batch·H·W ≥ 2"));
        }
        let k = kernels::batch_norm_train(
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
            n,
            c,
            hw,
            T::of(eps),
        );
        let value = Tensor::new(self.shape(x).to_vec(), k.out)?;
        let stats = BatchStats {
            mean: k.mean,
            var: k.var_unbiased,
        };
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: k.xhat,
            inv_std: k.inv_std,
            batch: Some(k.floored),
        };
        let v = self.push("batch_norm", value, op, &[x, gamma, beta])?;
        Ok((v, stats))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, hw) = self.bn_dims(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", "running stats length differs from C"));
        }
        let eps = T::of(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / v.max(eps).sqrt()).collect();
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let base = (s * c + ch) * hw;
                for i in base..base + hw {
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = gd[ch] * xhat[i] + bd[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch: None,
        };
        self.push("batch_norm", value, op, &[x, gamma, beta])
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let xs = self.shape(x);
        if xs.len() < 2 {
            return Err(Error::shape("batch_norm", format!("input {xs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let hw: usize = xs[2..].iter().product();
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("gamma/beta length must equal C={c}"),
            ));
        }
        Ok((n, c, hw))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, Op::Relu { x }, &[x])
    }

    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("max_pool2d", format!("input {xs:?}")));
        }
        let (oh, ow) = match (
            out_extent(xs[2], kernel, stride, pad),
            out_extent(xs[3], kernel, stride, pad),
        ) {
            (Some(h), Some(w)) => (h, w),
            _ => return Err(Error::shape("max_pool2d", "non-positive output size")),
        };
        let (out, argmax) =
            kernels::max_pool(self.value(x).data(), &xs, kernel, stride, pad, oh, ow);
        let value = Tensor::new(vec![xs[0], xs[1], oh, ow], out)?;
        self.push("max_pool2d", value, Op::MaxPool { x, argmax }, &[x])
    }

    /// Mean over spatial positions: `N×C×H×W → N×C`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("input {xs:?}")));
        }
        let hw = xs[2] * xs[3];
        let inv = T::one() / T::of(hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![xs[0], xs[1]], out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool { x }, &[x])
    }

    /// `x · wᵀ + b` with `x: N×in`, `w: out×in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(Error::shape("linear", format!("input {xs:?}, weight {ws:?}")));
        }
        let (n, out_f) = (xs[0], ws[0]);
        let mut out = vec![T::zero(); n * out_f];
        if let Some(b) = b {
            let bd = self.value(b).data();
            if bd.len() != out_f {
                return Err(Error::shape("linear", "bias length differs from output width"));
            }
            for row in out.chunks_mut(out_f) {
                row.copy_from_slice(bd);
            }
        }
        T::gemm(
            n,
            xs[1],
            out_f,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::one(),
            &mut out,
        );
        let value = Tensor::new(vec![n, out_f], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", value, Op::Linear { x, w, b }, &inputs)
    }

    // ----------------------------------------------------------- elementwise

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push("add", value, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", value, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", value, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let value = self.value(x).map(|v| v + c);
        self.push("add_scalar", value, Op::AddScalar { x }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape { x }, &[x])
    }

    // ---------------------------------------------------------------- linalg

    /// `a · b` (or `a · bᵀ` when `trans_b`) for rank-2 operands.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 2 || bs.len() != 2 {
            return Err(Error::shape("matmul", format!("{as_:?} x {bs:?}")));
        }
        let (bk, bn) = if trans_b { (bs[1], bs[0]) } else { (bs[0], bs[1]) };
        if as_[1] != bk {
            return Err(Error::shape("matmul", format!("{as_:?} x {bs:?} (trans_b={trans_b})")));
        }
        let mut out = vec![T::zero(); as_[0] * bn];
        T::gemm(
            as_[0],
            bk,
            bn,
            self.value(a).data(),
            false,
            self.value(b).data(),
            trans_b,
            T::zero(),
            &mut out,
        );
        let value = Tensor::new(vec![as_[0], bn], out)?;
        self.push("matmul", value, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range")));
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        let op = Op::Concat {
            parts: parts.to_vec(),
            outer,
            inner,
        };
        self.push("concat", value, op, parts)
    }

    /// Square matrix `n×n` to `n×(n-1)`, removing the diagonal entries.
    pub fn drop_diagonal(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != s[1] || s[0] < 2 {
            return Err(Error::shape("drop_diagonal", format!("{s:?}")));
        }
        let n = s[0];
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n * (n - 1));
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    out.push(d[i * n + j]);
                }
            }
        }
        let value = Tensor::new(vec![n, n - 1], out)?;
        self.push("drop_diagonal", value, Op::DropDiagonal { x }, &[x])
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = T::of(self.value(x).len() as f64);
        let value = Tensor::scalar(self.value(x).sum() / n);
        self.push("mean", value, Op::Mean { x }, &[x])
    }

    /// Sum along `axis`, dropping it (a rank-1 input yields shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let d = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * len + l) * inner + i];
                }
            }
        }
        let mut shape: Vec<usize> = s;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let value = Tensor::new(shape, out)?;
        self.push("sum_axis", value, Op::SumAxis { x, outer, len, inner }, &[x])
    }

    // ---------------------------------------------------------------- losses

    /// Unit-normalize along `axis`. Fails when any norm is at or below `1e-12`.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        const EPS: f64 = 1e-12;
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("l2_normalize", format!("axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let d = self.value(x).data();
        let mut norms = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = T::zero();
                for l in 0..len {
                    let v = d[(o * len + l) * inner + i];
                    acc += v * v;
                }
                let norm = acc.sqrt();
                if norm.f64() <= EPS {
                    return Err(Error::DegenerateEmbedding {
                        norm: norm.f64(),
                        eps: EPS,
                    });
                }
                norms[o * inner + i] = norm;
            }
        }
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let idx = (o * len + l) * inner + i;
                    out[idx] = d[idx] / norms[o * inner + i];
                }
            }
        }
        let value = Tensor::new(s, out)?;
        let op = Op::L2Normalize {
            x,
            outer,
            len,
            inner,
            norms,
        };
        self.push("l2_normalize", value, op, &[x])
    }

    /// Mean over rows of `-Σ_c t_c · log softmax(logits)_c`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: Target<'_, T>) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[1] < 2 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits must be N×C with C ≥ 2, got {s:?}"),
            ));
        }
        let (n, c) = (s[0], s[1]);
        let t = match target {
            Target::Hard(labels) => {
                if labels.len() != n {
                    return Err(Error::shape("softmax_cross_entropy", "label count differs from N"));
                }
                let mut t = vec![T::zero(); n * c];
                for (i, &l) in labels.iter().enumerate() {
                    if l >= c {
                        return Err(Error::invalid(format!("class {l} out of range 0..{c}")));
                    }
                    t[i * c + l] = T::one();
                }
                t
            }
            Target::Soft(dist) => {
                if dist.shape() != s.as_slice() {
                    return Err(Error::shape("softmax_cross_entropy", "soft target shape"));
                }
                for row in dist.data().chunks(c) {
                    let total: f64 = row.iter().map(|v| v.f64()).sum();
                    if (total - 1.0).abs() > 1e-6 {
                        return Err(Error::invalid(format!(
                            "soft target row sums to {total}, expected 1"
                        )));
                    }
                }
                dist.data().to_vec()
            }
        };
        let (loss, probs) = kernels::softmax_xent(self.value(logits).data(), &t, n, c);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            probs,
            target: t,
        };
        self.push("softmax_cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    // -------------------------------------------------------------- backward

    /// Reverse sweep from the scalar `loss`.
    ///
    /// Returns gradients for every node reached. Leaves additionally
    /// accumulate their gradient across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty graph"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, contrib) in self.backprop(i, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[i] = Some(g);
        }
        let mut out = Vec::with_capacity(grads.len());
        for (i, g) in grads.into_iter().enumerate() {
            let t = match g {
                Some(g) => Some(Tensor::new(self.nodes[i].value.shape().to_vec(), g)?),
                None => None,
            };
            if let (Some(t), Op::Leaf) = (&t, &self.nodes[i].op) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(t.data()) {
                            *a += *c;
                        }
                    }
                    slot @ None => *slot = Some(t.clone()),
                }
            }
            out.push(t);
        }
        Ok(Gradients { grads: out })
    }

    fn backprop(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, geom } => {
                let mut out = Vec::new();
                if needs(*x) {
                    out.push((*x, conv::backward_input(geom, val(*w), g)));
                }
                if needs(*w) {
                    out.push((*w, conv::backward_weight(geom, val(*x), g)));
                }
                out
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch,
            } => {
                let s = self.nodes[x.0].value.shape();
                let (n, c) = (s[0], s[1]);
                let hw: usize = s[2..].iter().product();
                let r = kernels::batch_norm_backward(
                    g,
                    xhat,
                    inv_std,
                    val(*gamma),
                    batch.as_deref(),
                    n,
                    c,
                    hw,
                );
                vec![(*x, r.dx), (*gamma, r.dgamma), (*beta, r.dbeta)]
            }
            Op::Relu { x } => {
                let d = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                vec![(*x, d)]
            }
            Op::MaxPool { x, argmax } => {
                let mut d = vec![T::zero(); self.nodes[x.0].value.len()];
                for (&gi, &src) in g.iter().zip(argmax) {
                    d[src] += gi;
                }
                vec![(*x, d)]
            }
            Op::GlobalAvgPool { x } => {
                let s = self.nodes[x.0].value.shape();
                let hw = s[2] * s[3];
                let inv = T::one() / T::of(hw as f64);
                let mut d = Vec::with_capacity(g.len() * hw);
                for &gi in g {
                    d.extend(std::iter::repeat_n(gi * inv, hw));
                }
                vec![(*x, d)]
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let ws = self.nodes[w.0].value.shape();
                let (n, in_f, out_f) = (xs[0], xs[1], ws[0]);
                let mut out = Vec::new();
                if needs(*x) {
                    let mut dx = vec![T::zero(); n * in_f];
                    T::gemm(n, out_f, in_f, g, false, val(*w), false, T::zero(), &mut dx);
                    out.push((*x, dx));
                }
                if needs(*w) {
                    let mut dw = vec![T::zero(); out_f * in_f];
                    T::gemm(out_f, n, in_f, g, true, val(*x), false, T::zero(), &mut dw);
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); out_f];
                    for row in g.chunks(out_f) {
                        for (d, &r) in db.iter_mut().zip(row) {
                            *d += r;
                        }
                    }
                    out.push((*b, db));
                }
                out
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub { a, b } => vec![(*a, g.to_vec()), (*b, g.iter().map(|&v| -v).collect())],
            Op::Mul { a, b } => {
                let da = g.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect();
                let db = g.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale { x, c } => vec![(*x, g.iter().map(|&v| v * *c).collect())],
            Op::AddScalar { x } | Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::MatMul { a, b, trans_b } => {
                let as_ = self.nodes[a.0].value.shape();
                let (m, k) = (as_[0], as_[1]);
                let n = g.len() / m;
                let mut out = Vec::new();
                if needs(*a) {
                    // dA = G · Bᵀ (or G · B when B was transposed)
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g, false, val(*b), !trans_b, T::zero(), &mut da);
                    out.push((*a, da));
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    if *trans_b {
                        // B is n×k: dB = Gᵀ · A
                        T::gemm(n, m, k, g, true, val(*a), false, T::zero(), &mut db);
                    } else {
                        T::gemm(k, m, n, val(*a), true, g, false, T::zero(), &mut db);
                    }
                    out.push((*b, db));
                }
                out
            }
            Op::Concat { parts, outer, inner } => {
                let total: usize = g.len() / (outer * inner);
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let len = self.nodes[p.0].value.len() / outer;
                    let mut d = Vec::with_capacity(self.nodes[p.0].value.len());
                    for o in 0..*outer {
                        let start = o * total * inner + offset;
                        d.extend_from_slice(&g[start..start + len]);
                    }
                    offset += len;
                    out.push((p, d));
                }
                out
            }
            Op::DropDiagonal { x } => {
                let n = self.nodes[x.0].value.shape()[0];
                let mut d = vec![T::zero(); n * n];
                let mut it = g.iter();
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            d[i * n + j] = *it.next().expect("n(n-1) grads");
                        }
                    }
                }
                vec![(*x, d)]
            }
            Op::Sum { x } => vec![(*x, vec![g[0]; self.nodes[x.0].value.len()])],
            Op::Mean { x } => {
                let len = self.nodes[x.0].value.len();
                vec![(*x, vec![g[0] / T::of(len as f64); len])]
            }
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
            } => {
                let mut d = vec![T::zero(); outer * len * inner];
                for o in 0..*outer {
                    for l in 0..*len {
                        for i in 0..*inner {
                            d[(o * len + l) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                vec![(*x, d)]
            }
            Op::L2Normalize {
                x,
                outer,
                len,
                inner,
                norms,
            } => {
                let y = node.value.data();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: T = (0..*len).map(|l| y[idx(l)] * g[idx(l)]).sum();
                        let norm = norms[o * inner + i];
                        for l in 0..*len {
                            d[idx(l)] = (g[idx(l)] - y[idx(l)] * dot) / norm;
                        }
                    }
                }
                vec![(*x, d)]
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                target,
            } => {
                let n = self.nodes[logits.0].value.shape()[0];
                let scale = g[0] / T::of(n as f64);
                let d = probs
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| (p - t) * scale)
                    .collect();
                vec![(*logits, d)]
            }
        }
    }
}
