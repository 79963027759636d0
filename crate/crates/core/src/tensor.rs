//! Reverse-mode autodiff over eagerly evaluated f64 tensors.
//!
//! Every operation computes its value immediately and records how to produce
//! vector-Jacobian products. The backward pass builds its results out of the
//! same operation set, so gradients are themselves differentiable; the
//! discriminator losses need parameter-gradients of input-gradient norms,
//! which is a second-order quantity.
//!
//! Node ids grow monotonically, so iterating ids in descending order is a
//! valid topological order and the whole pass is deterministic.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use core::sync::atomic::{AtomicU64, Ordering};

use crate::math;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

type VjpFn = Box<dyn Fn(&[Tensor], &Tensor, &Tensor) -> Vec<Option<Tensor>>>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    parents: Vec<Tensor>,
    vjp: Option<VjpFn>,
    requires_grad: bool,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl core::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "Tensor(id={}, shape={:?}, grad={})",
            self.inner.id, self.inner.shape, self.inner.requires_grad
        )
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, vjp: Option<VjpFn>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: Rc::new(data),
                parents,
                vjp,
                requires_grad,
            }),
        }
    }

    /// Constant leaf (no gradient).
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(numel(shape), data.len(), "constant: shape/data mismatch");
        Tensor::make(shape.to_vec(), data, Vec::new(), None)
    }

    /// Trainable / differentiable leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(numel(shape), data.len(), "param: shape/data mismatch");
        let mut t = Tensor::make(shape.to_vec(), data, Vec::new(), None);
        Rc::get_mut(&mut t.inner).unwrap().requires_grad = true;
        t
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(shape, vec![0.0; numel(shape)])
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::constant(shape, vec![1.0; numel(shape)])
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Tensor::constant(shape, vec![v; numel(shape)])
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn scalar_value(&self) -> f64 {
        assert_eq!(self.len(), 1, "scalar_value on non-scalar tensor");
        self.inner.data[0]
    }

    /// Leaf sharing this tensor's buffer, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: self.inner.shape.clone(),
                data: Rc::clone(&self.inner.data),
                parents: Vec::new(),
                vjp: None,
                requires_grad: false,
            }),
        }
    }

    /// Detached leaf that does participate in differentiation (an "input
    /// variable", used for gradient-penalty probe points).
    pub fn detach_with_grad(&self) -> Tensor {
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: self.inner.shape.clone(),
                data: Rc::clone(&self.inner.data),
                parents: Vec::new(),
                vjp: None,
                requires_grad: true,
            }),
        }
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Tensor>,
        vjp: VjpFn,
    ) -> Tensor {
        Tensor::make(shape, data, parents, Some(vjp))
    }

    fn same_shape(&self, other: &Tensor, op: &str) {
        assert_eq!(self.shape(), other.shape(), "{op}: shape mismatch");
    }

    // ---- elementwise binary ----

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.same_shape(other, "add");
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a + b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|_p, _o, g| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.same_shape(other, "sub");
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a - b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|_p, _o, g| vec![Some(g.clone()), Some(g.neg())]),
        )
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.same_shape(other, "mul");
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a * b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|p, _o, g| vec![Some(g.mul(&p[1])), Some(g.mul(&p[0]))]),
        )
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        self.same_shape(other, "div");
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(a, b)| a / b)
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(|p, o, g| {
                let da = g.div(&p[1]);
                // d/db (a/b) = -a/b^2 = -o/b
                let db = g.mul(&o.div(&p[1])).neg();
                vec![Some(da), Some(db)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|a| a + c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|_p, _o, g| vec![Some(g.clone())]),
        )
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|a| a * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |_p, _o, g| vec![Some(g.mul_scalar(c))]),
        )
    }

    // ---- elementwise unary ----

    pub fn exp(&self) -> Tensor {
        let data = self.data().iter().map(|&a| math::exp(a)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|_p, o, g| vec![Some(g.mul(o))]),
        )
    }

    pub fn ln(&self) -> Tensor {
        let data = self.data().iter().map(|&a| math::ln(a)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|p, _o, g| vec![Some(g.div(&p[0]))]),
        )
    }

    pub fn sqrt(&self) -> Tensor {
        let data = self.data().iter().map(|&a| math::sqrt(a)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|_p, o, g| vec![Some(g.div(o).mul_scalar(0.5))]),
        )
    }

    pub fn tanh(&self) -> Tensor {
        let data = self.data().iter().map(|&a| math::tanh(a)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|_p, o, g| {
                let one_minus = o.mul(o).neg().add_scalar(1.0);
                vec![Some(g.mul(&one_minus))]
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&a| 1.0 / (1.0 + math::exp(-a)))
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|_p, o, g| {
                let d = o.mul(&o.neg().add_scalar(1.0));
                vec![Some(g.mul(&d))]
            }),
        )
    }

    /// |x|; the sign mask is treated as constant (correct almost everywhere).
    pub fn abs(&self) -> Tensor {
        let data = self.data().iter().map(|&a| math::abs(a)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|p, _o, g| {
                let sign: Vec<f64> = p[0]
                    .data()
                    .iter()
                    .map(|&a| if a >= 0.0 { 1.0 } else { -1.0 })
                    .collect();
                let mask = Tensor::constant(p[0].shape(), sign);
                vec![Some(g.mul(&mask))]
            }),
        )
    }

    /// max(x, 0) + slope * min(x, 0). The slope mask is constant under
    /// differentiation, so second derivatives through it vanish (a.e. exact).
    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&a| if a > 0.0 { a } else { slope * a })
            .collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |p, _o, g| vec![Some(g.mul(&leaky_mask(&p[0], slope)))]),
        )
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    // ---- reductions and broadcasts ----

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(|p, _o, g| vec![Some(g.broadcast_to(p[0].shape()))]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.len() as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    /// [1] -> arbitrary shape.
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        assert_eq!(self.len(), 1, "broadcast_to expects a scalar tensor");
        let v = self.inner.data[0];
        Tensor::from_op(
            shape.to_vec(),
            vec![v; numel(shape)],
            vec![self.clone()],
            Box::new(|_p, _o, g| vec![Some(g.sum_all())]),
        )
    }

    /// [m,n] -> [m,1].
    pub fn row_sum_keep(&self) -> Tensor {
        let (m, n) = self.dims2("row_sum_keep");
        let mut out = vec![0.0; m];
        for r in 0..m {
            out[r] = self.data()[r * n..(r + 1) * n].iter().sum();
        }
        Tensor::from_op(
            vec![m, 1],
            out,
            vec![self.clone()],
            Box::new(move |_p, _o, g| vec![Some(g.broadcast_cols(n))]),
        )
    }

    /// [m,1] -> [m,n].
    pub fn broadcast_cols(&self, n: usize) -> Tensor {
        let (m, one) = self.dims2("broadcast_cols");
        assert_eq!(one, 1, "broadcast_cols expects [m,1]");
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let v = self.data()[r];
            out[r * n..(r + 1) * n].fill(v);
        }
        Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone()],
            Box::new(|_p, _o, g| vec![Some(g.row_sum_keep())]),
        )
    }

    /// [m,n] -> [n] (sum over rows).
    pub fn col_sum(&self) -> Tensor {
        let (m, n) = self.dims2("col_sum");
        let mut out = vec![0.0; n];
        for r in 0..m {
            for c in 0..n {
                out[c] += self.data()[r * n + c];
            }
        }
        Tensor::from_op(
            vec![n],
            out,
            vec![self.clone()],
            Box::new(move |_p, _o, g| vec![Some(g.broadcast_rows(m))]),
        )
    }

    /// [n] -> [m,n].
    pub fn broadcast_rows(&self, m: usize) -> Tensor {
        assert_eq!(self.shape().len(), 1, "broadcast_rows expects [n]");
        let n = self.len();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            out[r * n..(r + 1) * n].copy_from_slice(self.data());
        }
        Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone()],
            Box::new(|_p, _o, g| vec![Some(g.col_sum())]),
        )
    }

    /// [b,c,h,w] -> [c] (sum over batch and space).
    pub fn sum_per_channel(&self) -> Tensor {
        let (b, c, h, w) = self.dims4("sum_per_channel");
        let hw = h * w;
        let mut out = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                out[ci] += self.data()[base..base + hw].iter().sum::<f64>();
            }
        }
        Tensor::from_op(
            vec![c],
            out,
            vec![self.clone()],
            Box::new(move |_p, _o, g| vec![Some(g.broadcast_channel(b, h, w))]),
        )
    }

    /// [c] -> [b,c,h,w].
    pub fn broadcast_channel(&self, b: usize, h: usize, w: usize) -> Tensor {
        assert_eq!(self.shape().len(), 1, "broadcast_channel expects [c]");
        let c = self.len();
        let hw = h * w;
        let mut out = vec![0.0; b * c * hw];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                out[base..base + hw].fill(self.data()[ci]);
            }
        }
        Tensor::from_op(
            vec![b, c, h, w],
            out,
            vec![self.clone()],
            Box::new(|_p, _o, g| vec![Some(g.sum_per_channel())]),
        )
    }

    /// Per-sample scalar multiply: x[b, ...] * s[b].
    pub fn sample_scale(&self, s: &Tensor) -> Tensor {
        let b = self.shape()[0];
        assert_eq!(s.shape(), [b], "sample_scale expects s of shape [b]");
        let per = self.len() / b;
        let mut out = vec![0.0; self.len()];
        for bi in 0..b {
            let f = s.data()[bi];
            for i in 0..per {
                out[bi * per + i] = self.data()[bi * per + i] * f;
            }
        }
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), s.clone()],
            Box::new(|p, _o, g| vec![Some(g.sample_scale(&p[1])), Some(g.sample_dot(&p[0]))]),
        )
    }

    /// Per-sample dot product: [b, ...] x [b, ...] -> [b].
    pub fn sample_dot(&self, other: &Tensor) -> Tensor {
        self.same_shape(other, "sample_dot");
        let b = self.shape()[0];
        let per = self.len() / b;
        let mut out = vec![0.0; b];
        for bi in 0..b {
            let mut acc = 0.0;
            for i in 0..per {
                acc += self.data()[bi * per + i] * other.data()[bi * per + i];
            }
            out[bi] = acc;
        }
        Tensor::from_op(
            vec![b],
            out,
            vec![self.clone(), other.clone()],
            Box::new(|p, _o, g| vec![Some(p[1].sample_scale(g)), Some(p[0].sample_scale(g))]),
        )
    }

    // ---- shape ops ----

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(numel(shape), self.len(), "reshape: element count mismatch");
        let old_shape = self.shape().to_vec();
        Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(move |_p, _o, g| vec![Some(g.reshape(&old_shape))]),
        )
    }

    pub fn transpose2d(&self) -> Tensor {
        let (m, n) = self.dims2("transpose2d");
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = self.data()[r * n + c];
            }
        }
        Tensor::from_op(
            vec![n, m],
            out,
            vec![self.clone()],
            Box::new(|_p, _o, g| vec![Some(g.transpose2d())]),
        )
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let shape = self.shape().to_vec();
        assert!(axis < shape.len(), "slice_axis: bad axis");
        assert!(start + len <= shape[axis], "slice_axis: out of range");
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * mid + start) * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let after = mid - start - len;
        Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |_p, _o, g| vec![Some(g.zero_pad_axis(axis, start, after))]),
        )
    }

    pub fn zero_pad_axis(&self, axis: usize, before: usize, after: usize) -> Tensor {
        let shape = self.shape().to_vec();
        assert!(axis < shape.len(), "zero_pad_axis: bad axis");
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let new_mid = before + mid + after;
        let mut out_shape = shape.clone();
        out_shape[axis] = new_mid;
        let mut out = vec![0.0; outer * new_mid * inner];
        for o in 0..outer {
            let src = o * mid * inner;
            let dst = (o * new_mid + before) * inner;
            out[dst..dst + mid * inner].copy_from_slice(&self.data()[src..src + mid * inner]);
        }
        let len = mid;
        Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |_p, _o, g| vec![Some(g.slice_axis(axis, before, len))]),
        )
    }

    pub fn concat(axis: usize, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape().to_vec();
        assert!(axis < first.len(), "concat: bad axis");
        let mut total_mid = 0;
        for p in parts {
            assert_eq!(p.shape().len(), first.len(), "concat: rank mismatch");
            for (d, (a, b)) in p.shape().iter().zip(&first).enumerate() {
                if d != axis {
                    assert_eq!(a, b, "concat: off-axis dim mismatch");
                }
            }
            total_mid += p.shape()[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out_shape = first.clone();
        out_shape[axis] = total_mid;
        let mut out = vec![0.0; outer * total_mid * inner];
        let mut offset = 0;
        for p in parts {
            let mid = p.shape()[axis];
            for o in 0..outer {
                let src = o * mid * inner;
                let dst = (o * total_mid + offset) * inner;
                out[dst..dst + mid * inner].copy_from_slice(&p.data()[src..src + mid * inner]);
            }
            offset += mid;
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Tensor::from_op(
            out_shape,
            out,
            parts.to_vec(),
            Box::new(move |_p, _o, g| {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut start = 0;
                for &sz in &sizes {
                    grads.push(Some(g.slice_axis(axis, start, sz)));
                    start += sz;
                }
                grads
            }),
        )
    }

    // ---- matmul ----

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let (m, k) = self.dims2("matmul lhs");
        let (k2, n) = other.dims2("matmul rhs");
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        let a = self.data();
        let b = other.data();
        for i in 0..m {
            for kk in 0..k {
                let av = a[i * k + kk];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        Tensor::from_op(
            vec![m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(|p, _o, g| {
                let da = g.matmul(&p[1].transpose2d());
                let db = p[0].transpose2d().matmul(g);
                vec![Some(da), Some(db)]
            }),
        )
    }

    // ---- helpers ----

    pub fn dims2(&self, op: &str) -> (usize, usize) {
        assert_eq!(
            self.shape().len(),
            2,
            "{op}: expected rank-2, got {:?}",
            self.shape()
        );
        (self.shape()[0], self.shape()[1])
    }

    pub fn dims4(&self, op: &str) -> (usize, usize, usize, usize) {
        assert_eq!(
            self.shape().len(),
            4,
            "{op}: expected rank-4, got {:?}",
            self.shape()
        );
        (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        )
    }
}

fn leaky_mask(x: &Tensor, slope: f64) -> Tensor {
    let mask: Vec<f64> = x
        .data()
        .iter()
        .map(|&a| if a > 0.0 { 1.0 } else { slope })
        .collect();
    Tensor::constant(x.shape(), mask)
}

/// Row-wise max as a constant [m,1] tensor (used to stabilize softmax; the
/// shift cancels in the result, so detaching it is exact).
pub fn row_max_detached(x: &Tensor) -> Tensor {
    let (m, n) = x.dims2("row_max_detached");
    let mut out = vec![f64::NEG_INFINITY; m];
    for r in 0..m {
        for c in 0..n {
            let v = x.data()[r * n + c];
            if v > out[r] {
                out[r] = v;
            }
        }
    }
    Tensor::constant(&[m, 1], out)
}

/// Softmax over each row of a [m,n] tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (_m, n) = x.dims2("softmax_rows");
    let mx = row_max_detached(x);
    let e = x.sub(&mx.broadcast_cols(n)).exp();
    let s = e.row_sum_keep().broadcast_cols(n);
    e.div(&s)
}

/// Log-softmax over each row of a [m,n] tensor.
pub fn log_softmax_rows(x: &Tensor) -> Tensor {
    let (_m, n) = x.dims2("log_softmax_rows");
    let mx = row_max_detached(x);
    let shifted = x.sub(&mx.broadcast_cols(n));
    let lse = shifted.exp().row_sum_keep().ln();
    shifted.sub(&lse.broadcast_cols(n))
}

// ---- convolution family ----
//
// Three mutually adjoint primitives over [b,c,h,w] tensors and
// [oc,ic,kh,kw] kernels. Each one's vjp is written in terms of the others,
// which is what makes gradient penalties twice differentiable.

fn conv_out(h: usize, k: usize, s: usize, p: usize) -> usize {
    (h + 2 * p - k) / s + 1
}

fn conv_fwd_raw(
    x: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    wt: &[f64],
    (oc, ic, kh, kw): (usize, usize, usize, usize),
    s: usize,
    p: usize,
) -> (Vec<f64>, usize, usize) {
    debug_assert_eq!(c, ic);
    let oh = conv_out(h, kh, s, p);
    let ow = conv_out(w, kw, s, p);
    let mut y = vec![0.0; b * oc * oh * ow];
    for bi in 0..b {
        for oci in 0..oc {
            let ybase = (bi * oc + oci) * oh * ow;
            for ici in 0..ic {
                let xbase = (bi * c + ici) * h * w;
                let wbase = (oci * ic + ici) * kh * kw;
                for ohi in 0..oh {
                    for khi in 0..kh {
                        let ih = (ohi * s + khi) as isize - p as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = xbase + ih as usize * w;
                        let wrow = wbase + khi * kw;
                        let yrow = ybase + ohi * ow;
                        for owi in 0..ow {
                            let mut acc = 0.0;
                            let iw0 = (owi * s) as isize - p as isize;
                            for kwi in 0..kw {
                                let iw = iw0 + kwi as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                acc += x[xrow + iw as usize] * wt[wrow + kwi];
                            }
                            y[yrow + owi] += acc;
                        }
                    }
                }
            }
        }
    }
    (y, oh, ow)
}

fn conv_dx_raw(
    g: &[f64],
    (b, oc, oh, ow): (usize, usize, usize, usize),
    wt: &[f64],
    (oc2, ic, kh, kw): (usize, usize, usize, usize),
    s: usize,
    p: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    debug_assert_eq!(oc, oc2);
    let mut dx = vec![0.0; b * ic * h * w];
    for bi in 0..b {
        for oci in 0..oc {
            let gbase = (bi * oc + oci) * oh * ow;
            for ici in 0..ic {
                let xbase = (bi * ic + ici) * h * w;
                let wbase = (oci * ic + ici) * kh * kw;
                for ohi in 0..oh {
                    for khi in 0..kh {
                        let ih = (ohi * s + khi) as isize - p as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = xbase + ih as usize * w;
                        let wrow = wbase + khi * kw;
                        let grow = gbase + ohi * ow;
                        for owi in 0..ow {
                            let gv = g[grow + owi];
                            if gv == 0.0 {
                                continue;
                            }
                            let iw0 = (owi * s) as isize - p as isize;
                            for kwi in 0..kw {
                                let iw = iw0 + kwi as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                dx[xrow + iw as usize] += gv * wt[wrow + kwi];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv_dw_raw(
    x: &[f64],
    (b, c, h, w): (usize, usize, usize, usize),
    g: &[f64],
    (b2, oc, oh, ow): (usize, usize, usize, usize),
    s: usize,
    p: usize,
    kh: usize,
    kw: usize,
) -> Vec<f64> {
    debug_assert_eq!(b, b2);
    let ic = c;
    let mut dw = vec![0.0; oc * ic * kh * kw];
    for bi in 0..b {
        for oci in 0..oc {
            let gbase = (bi * oc + oci) * oh * ow;
            for ici in 0..ic {
                let xbase = (bi * c + ici) * h * w;
                let wbase = (oci * ic + ici) * kh * kw;
                for ohi in 0..oh {
                    for khi in 0..kh {
                        let ih = (ohi * s + khi) as isize - p as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = xbase + ih as usize * w;
                        let wrow = wbase + khi * kw;
                        let grow = gbase + ohi * ow;
                        for owi in 0..ow {
                            let gv = g[grow + owi];
                            if gv == 0.0 {
                                continue;
                            }
                            let iw0 = (owi * s) as isize - p as isize;
                            for kwi in 0..kw {
                                let iw = iw0 + kwi as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                dw[wrow + kwi] += gv * x[xrow + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    dw
}

impl Tensor {
    /// 2D cross-correlation: x [b,ic,h,w] * w [oc,ic,kh,kw] -> [b,oc,oh,ow].
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Tensor {
        let xd = self.dims4("conv2d input");
        let wd = weight.dims4("conv2d weight");
        assert_eq!(xd.1, wd.1, "conv2d: channel mismatch");
        let (y, oh, ow) = conv_fwd_raw(self.data(), xd, weight.data(), wd, stride, pad);
        let (h, w) = (xd.2, xd.3);
        let (kh, kw) = (wd.2, wd.3);
        Tensor::from_op(
            vec![xd.0, wd.0, oh, ow],
            y,
            vec![self.clone(), weight.clone()],
            Box::new(move |p, _o, g| {
                let dx = g.conv2d_input_grad(&p[1], stride, pad, h, w);
                let dwt = p[0].conv2d_weight_grad(g, stride, pad, kh, kw);
                vec![Some(dx), Some(dwt)]
            }),
        )
    }

    /// Adjoint of conv2d in its input (also serves as transposed convolution):
    /// g [b,oc,oh,ow], w [oc,ic,kh,kw] -> [b,ic,h,w].
    pub fn conv2d_input_grad(
        &self,
        weight: &Tensor,
        stride: usize,
        pad: usize,
        h: usize,
        w: usize,
    ) -> Tensor {
        let gd = self.dims4("conv2d_input_grad g");
        let wd = weight.dims4("conv2d_input_grad weight");
        assert_eq!(gd.1, wd.0, "conv2d_input_grad: channel mismatch");
        let dx = conv_dx_raw(self.data(), gd, weight.data(), wd, stride, pad, h, w);
        let (kh, kw) = (wd.2, wd.3);
        Tensor::from_op(
            vec![gd.0, wd.1, h, w],
            dx,
            vec![self.clone(), weight.clone()],
            Box::new(move |p, _o, u| {
                let dg = u.conv2d(&p[1], stride, pad);
                let dwt = u.conv2d_weight_grad(&p[0], stride, pad, kh, kw);
                vec![Some(dg), Some(dwt)]
            }),
        )
    }

    /// Adjoint of conv2d in its weight: x [b,ic,h,w], g [b,oc,oh,ow] ->
    /// [oc,ic,kh,kw]. The kernel size cannot always be recovered from the
    /// shapes (strided convs floor), so it is explicit.
    pub fn conv2d_weight_grad(
        &self,
        g: &Tensor,
        stride: usize,
        pad: usize,
        kh: usize,
        kw: usize,
    ) -> Tensor {
        let xd = self.dims4("conv2d_weight_grad x");
        let gd = g.dims4("conv2d_weight_grad g");
        assert_eq!(xd.0, gd.0, "conv2d_weight_grad: batch mismatch");
        let dw = conv_dw_raw(self.data(), xd, g.data(), gd, stride, pad, kh, kw);
        let (h, w) = (xd.2, xd.3);
        Tensor::from_op(
            vec![gd.1, xd.1, kh, kw],
            dw,
            vec![self.clone(), g.clone()],
            Box::new(move |p, _o, u| {
                let dx = p[1].conv2d_input_grad(u, stride, pad, h, w);
                let dg = p[0].conv2d(u, stride, pad);
                vec![Some(dx), Some(dg)]
            }),
        )
    }

    /// Max pooling with window (kh,kw) and the same stride; ties take the
    /// first (row-major) element so the selection is deterministic.
    pub fn max_pool2d(&self, kh: usize, kw: usize) -> Tensor {
        let (b, c, h, w) = self.dims4("max_pool2d");
        assert!(h % kh == 0 && w % kw == 0, "max_pool2d: size must divide");
        let oh = h / kh;
        let ow = w / kw;
        let mut out = vec![0.0; b * c * oh * ow];
        let mut idx = vec![0u32; b * c * oh * ow];
        for bi in 0..b {
            for ci in 0..c {
                let xbase = (bi * c + ci) * h * w;
                let obase = (bi * c + ci) * oh * ow;
                for ohi in 0..oh {
                    for owi in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0usize;
                        for dh in 0..kh {
                            for dw_ in 0..kw {
                                let i = xbase + (ohi * kh + dh) * w + owi * kw + dw_;
                                if self.data()[i] > best {
                                    best = self.data()[i];
                                    best_i = i;
                                }
                            }
                        }
                        out[obase + ohi * ow + owi] = best;
                        idx[obase + ohi * ow + owi] = best_i as u32;
                    }
                }
            }
        }
        let indices = Rc::new(idx);
        let in_shape = self.shape().to_vec();
        Tensor::from_op(
            vec![b, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |_p, _o, g| vec![Some(pool_scatter(g, &indices, &in_shape))]),
        )
    }
}

/// Scatter pooled gradients back to the argmax positions (linear in g).
fn pool_scatter(g: &Tensor, indices: &Rc<Vec<u32>>, in_shape: &[usize]) -> Tensor {
    assert_eq!(g.len(), indices.len(), "pool_scatter: index count mismatch");
    let mut out = vec![0.0; numel(in_shape)];
    for (j, &i) in indices.iter().enumerate() {
        out[i as usize] += g.data()[j];
    }
    let idx = Rc::clone(indices);
    let out_shape = g.shape().to_vec();
    Tensor::from_op(
        in_shape.to_vec(),
        out,
        vec![g.clone()],
        Box::new(move |_p, _o, u| vec![Some(pool_gather(u, &idx, &out_shape))]),
    )
}

/// Gather at the recorded argmax positions (adjoint of `pool_scatter`).
fn pool_gather(x: &Tensor, indices: &Rc<Vec<u32>>, out_shape: &[usize]) -> Tensor {
    let mut out = vec![0.0; numel(out_shape)];
    for (j, &i) in indices.iter().enumerate() {
        out[j] = x.data()[i as usize];
    }
    let idx = Rc::clone(indices);
    let in_shape = x.shape().to_vec();
    Tensor::from_op(
        out_shape.to_vec(),
        out,
        vec![x.clone()],
        Box::new(move |_p, _o, u| vec![Some(pool_scatter(u, &idx, &in_shape))]),
    )
}

// ---- bilinear resize (a fixed linear map, so the pair is self-adjoint) ----

fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    // (lo, hi, frac) per output coordinate; align_corners=false convention.
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let center = (d as f64 + 0.5) * scale - 0.5;
            let clamped = center.max(0.0).min((src - 1) as f64);
            let lo = math::floor(clamped) as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, clamped - lo as f64)
        })
        .collect()
}

impl Tensor {
    /// Bilinear resize of [b,c,h,w] to [b,c,dh,dw].
    pub fn resize_bilinear(&self, dh: usize, dw: usize) -> Tensor {
        let (b, c, h, w) = self.dims4("resize_bilinear");
        let vtaps = Rc::new(bilinear_taps(h, dh));
        let htaps = Rc::new(bilinear_taps(w, dw));
        let data = resize_apply(self.data(), b * c, h, w, dh, dw, &vtaps, &htaps);
        let (src_h, src_w) = (h, w);
        Tensor::from_op(
            vec![b, c, dh, dw],
            data,
            vec![self.clone()],
            Box::new(move |_p, _o, g| {
                vec![Some(resize_adjoint_op(g, src_h, src_w, &vtaps, &htaps))]
            }),
        )
    }
}

fn resize_apply(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    dh: usize,
    dw: usize,
    vtaps: &[(usize, usize, f64)],
    htaps: &[(usize, usize, f64)],
) -> Vec<f64> {
    let mut out = vec![0.0; planes * dh * dw];
    for pl in 0..planes {
        let xb = pl * h * w;
        let ob = pl * dh * dw;
        for (oy, &(ylo, yhi, fy)) in vtaps.iter().enumerate() {
            for (ox, &(xlo, xhi, fx)) in htaps.iter().enumerate() {
                let v00 = x[xb + ylo * w + xlo];
                let v01 = x[xb + ylo * w + xhi];
                let v10 = x[xb + yhi * w + xlo];
                let v11 = x[xb + yhi * w + xhi];
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                out[ob + oy * dw + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn resize_adjoint_op(
    g: &Tensor,
    src_h: usize,
    src_w: usize,
    vtaps: &Rc<Vec<(usize, usize, f64)>>,
    htaps: &Rc<Vec<(usize, usize, f64)>>,
) -> Tensor {
    let (b, c, dh, dw) = g.dims4("resize_adjoint");
    let planes = b * c;
    let mut out = vec![0.0; planes * src_h * src_w];
    for pl in 0..planes {
        let gb = pl * dh * dw;
        let ob = pl * src_h * src_w;
        for (oy, &(ylo, yhi, fy)) in vtaps.iter().enumerate() {
            for (ox, &(xlo, xhi, fx)) in htaps.iter().enumerate() {
                let gv = g.data()[gb + oy * dw + ox];
                if gv == 0.0 {
                    continue;
                }
                out[ob + ylo * src_w + xlo] += gv * (1.0 - fx) * (1.0 - fy);
                out[ob + ylo * src_w + xhi] += gv * fx * (1.0 - fy);
                out[ob + yhi * src_w + xlo] += gv * (1.0 - fx) * fy;
                out[ob + yhi * src_w + xhi] += gv * fx * fy;
            }
        }
    }
    let vt = Rc::clone(vtaps);
    let ht = Rc::clone(htaps);
    Tensor::from_op(
        vec![b, c, src_h, src_w],
        out,
        vec![g.clone()],
        Box::new(move |_p, _o, u| {
            let (ub, uc, _, _) = u.dims4("resize_adjoint vjp");
            let data = resize_apply(
                u.data(),
                ub * uc,
                src_h,
                src_w,
                vt.len(),
                ht.len(),
                &vt,
                &ht,
            );
            vec![Some(Tensor::from_op(
                vec![ub, uc, vt.len(), ht.len()],
                data,
                vec![u.clone()],
                {
                    let vt2 = Rc::clone(&vt);
                    let ht2 = Rc::clone(&ht);
                    Box::new(move |_p2, _o2, u2| {
                        vec![Some(resize_adjoint_op(u2, src_h, src_w, &vt2, &ht2))]
                    })
                },
            ))]
        }),
    )
}

// ---- gradient driver ----

/// Reverse-mode gradients of a scalar `output` with respect to `wrt`.
/// The returned tensors are themselves differentiable graph nodes.
pub fn grad(output: &Tensor, wrt: &[&Tensor]) -> Vec<Tensor> {
    assert_eq!(output.len(), 1, "grad expects a scalar output");
    grad_seeded(output, &Tensor::ones(&[1]), wrt)
}

/// Like [`grad`] but with an explicit seed cotangent of `output`'s shape.
pub fn grad_seeded(output: &Tensor, seed: &Tensor, wrt: &[&Tensor]) -> Vec<Tensor> {
    assert_eq!(seed.shape(), output.shape(), "grad seed shape mismatch");

    // Reachable differentiable subgraph.
    let mut nodes: BTreeMap<u64, Tensor> = BTreeMap::new();
    if output.requires_grad() {
        let mut stack = vec![output.clone()];
        while let Some(t) = stack.pop() {
            if nodes.contains_key(&t.id()) {
                continue;
            }
            for p in &t.inner.parents {
                if p.requires_grad() {
                    stack.push(p.clone());
                }
            }
            nodes.insert(t.id(), t);
        }
    }

    // Restrict the pass to nodes that can actually reach a wrt leaf;
    // anything else (e.g. another model's parameters entangled in the same
    // loss) would only produce grads nobody asked for. Ascending id order
    // visits parents before children.
    let wrt_ids: alloc::collections::BTreeSet<u64> = wrt.iter().map(|t| t.id()).collect();
    let mut needed: alloc::collections::BTreeSet<u64> = alloc::collections::BTreeSet::new();
    for (id, node) in nodes.iter() {
        if wrt_ids.contains(id) || node.inner.parents.iter().any(|p| needed.contains(&p.id())) {
            needed.insert(*id);
        }
    }

    let mut grads: BTreeMap<u64, Tensor> = BTreeMap::new();
    if output.requires_grad() && needed.contains(&output.id()) {
        grads.insert(output.id(), seed.clone());
    }

    // Descending id order is a topological order (parents precede children).
    let ids: Vec<u64> = nodes.keys().rev().copied().collect();
    for id in ids {
        if !needed.contains(&id) {
            continue;
        }
        let node = nodes[&id].clone();
        let Some(g) = grads.get(&id).cloned() else {
            continue;
        };
        let Some(vjp) = node.inner.vjp.as_ref() else {
            continue;
        };
        let parent_grads = vjp(&node.inner.parents, &node, &g);
        debug_assert_eq!(parent_grads.len(), node.inner.parents.len());
        for (p, pg) in node.inner.parents.iter().zip(parent_grads) {
            if !p.requires_grad() || !needed.contains(&p.id()) {
                continue;
            }
            let Some(pg) = pg else { continue };
            debug_assert_eq!(pg.shape(), p.shape(), "vjp shape mismatch");
            grads
                .entry(p.id())
                .and_modify(|acc| *acc = acc.add(&pg))
                .or_insert(pg);
        }
    }

    wrt.iter()
        .map(|t| {
            grads
                .get(&t.id())
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect()
}

/// Central finite differences of a scalar function, for gradient tests.
pub fn numeric_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        let step = h * (1.0 + math::abs(x[i]));
        buf[i] = x[i] + step;
        let fp = f(&buf);
        buf[i] = x[i] - step;
        let fm = f(&buf);
        buf[i] = x[i];
        out[i] = (fp - fm) / (2.0 * step);
    }
    out
}

/// Asserts elementwise closeness with a combined absolute/relative bound.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric) {
        let denom = 1.0f64.max(math::abs(*a)).max(math::abs(*n));
        let e = math::abs(a - n) / denom;
        if e > worst {
            worst = e;
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn randt(shape: &[usize], rng: &mut Rng) -> Tensor {
        Tensor::param(shape, rng.normal_vec(numel(shape)))
    }

    fn inner(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn add_mul_values() {
        let a = Tensor::constant(&[3], vec![1.0, 2.0, 3.0]);
        let b = Tensor::constant(&[3], vec![10.0, 20.0, 30.0]);
        assert_eq!(a.add(&b).data(), &[11.0, 22.0, 33.0]);
        assert_eq!(a.mul(&b).data(), &[10.0, 40.0, 90.0]);
        assert_eq!(a.sub(&b).data(), &[-9.0, -18.0, -27.0]);
    }

    #[test]
    fn matmul_matches_reference() {
        let a = Tensor::constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::constant(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = a.matmul(&b);
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    /// Generic first-order check: builds a scalar from a single parameter
    /// tensor and compares tape gradients to central differences.
    fn check_grad<F>(shape: &[usize], f: F, seed: u64)
    where
        F: Fn(&Tensor) -> Tensor,
    {
        let mut rng = Rng::new(seed);
        let x0 = rng.normal_vec(numel(shape));
        let x = Tensor::param(shape, x0.clone());
        let y = f(&x);
        let analytic = grad(&y, &[&x]).remove(0);
        let numeric = numeric_gradient(
            |v| {
                let xt = Tensor::param(shape, v.to_vec());
                f(&xt).scalar_value()
            },
            &x0,
            1e-6,
        );
        let err = max_rel_err(analytic.data(), &numeric);
        assert!(err < 1e-7, "rel err {err} for shape {shape:?}");
    }

    #[test]
    fn unary_op_gradients() {
        check_grad(&[7], |x| x.tanh().sum_all(), 1);
        check_grad(&[7], |x| x.sigmoid().sum_all(), 2);
        check_grad(&[7], |x| x.exp().sum_all(), 3);
        check_grad(&[7], |x| x.mul(x).add_scalar(5.0).ln().sum_all(), 4);
        check_grad(&[7], |x| x.mul(x).add_scalar(1.0).sqrt().sum_all(), 5);
        check_grad(&[7], |x| x.leaky_relu(0.2).sum_all(), 6);
        check_grad(&[7], |x| x.abs().mul(x).sum_all(), 7);
    }

    #[test]
    fn binary_and_reduction_gradients() {
        check_grad(&[4], |x| x.mul(&x.add_scalar(1.0)).sum_all(), 8);
        check_grad(
            &[4],
            |x| {
                let d = x.mul(x).add_scalar(2.0);
                x.div(&d).sum_all()
            },
            9,
        );
        check_grad(
            &[3, 4],
            |x| x.row_sum_keep().mul(&x.row_sum_keep()).sum_all(),
            10,
        );
        check_grad(&[3, 4], |x| x.col_sum().mul(&x.col_sum()).sum_all(), 11);
        check_grad(
            &[2, 3],
            |x| softmax_rows(x).mul(&softmax_rows(x)).sum_all(),
            12,
        );
        check_grad(
            &[2, 3],
            |x| log_softmax_rows(x).mul_scalar(0.3).sum_all(),
            13,
        );
        check_grad(
            &[2, 2, 2, 2],
            |x| x.sum_per_channel().mul(&x.sum_per_channel()).sum_all(),
            14,
        );
    }

    #[test]
    fn matmul_gradients() {
        let mut rng = Rng::new(20);
        let b0 = rng.normal_vec(12);
        let b = Tensor::constant(&[4, 3], b0);
        check_grad(&[2, 4], |x| x.matmul(&b).mul(&x.matmul(&b)).sum_all(), 21);
    }

    #[test]
    fn shape_op_gradients() {
        check_grad(
            &[2, 6],
            |x| {
                let s = x.slice_axis(1, 2, 3);
                s.mul(&s).sum_all()
            },
            30,
        );
        check_grad(
            &[2, 3],
            |x| {
                let p = x.zero_pad_axis(1, 1, 2);
                p.mul(&p).sum_all()
            },
            31,
        );
        check_grad(
            &[2, 3],
            |x| {
                let c = Tensor::concat(1, &[x.clone(), x.mul_scalar(2.0)]);
                c.mul(&c).sum_all()
            },
            32,
        );
        check_grad(
            &[6],
            |x| {
                let r = x.reshape(&[2, 3]).transpose2d();
                r.mul(&r).sum_all()
            },
            33,
        );
        check_grad(
            &[3],
            |x| x.broadcast_rows(4).mul(&x.broadcast_rows(4)).sum_all(),
            34,
        );
    }

    #[test]
    fn sample_op_gradients() {
        let mut rng = Rng::new(40);
        let s0 = rng.normal_vec(3);
        let s = Tensor::constant(&[3], s0);
        check_grad(
            &[3, 4],
            |x| x.sample_scale(&s).mul(&x.sample_scale(&s)).sum_all(),
            41,
        );
        check_grad(&[3, 4], |x| x.sample_dot(&x.add_scalar(1.0)).sum_all(), 42);
    }

    #[test]
    fn conv_family_is_mutually_adjoint() {
        let mut rng = Rng::new(50);
        for (s, p, k) in [(1usize, 1usize, 3usize), (2, 1, 4), (1, 0, 2)] {
            let x = randt(&[2, 3, 6, 8], &mut rng);
            let wt = randt(&[4, 3, k, k], &mut rng);
            let y = x.conv2d(&wt, s, p);
            let g = randt(&[2, 4, y.shape()[2], y.shape()[3]], &mut rng);

            let lhs = inner(&y, &g);
            let dx = g.conv2d_input_grad(&wt, s, p, 6, 8);
            let mid = inner(&dx, &x);
            let dw = x.conv2d_weight_grad(&g, s, p, k, k);
            let rhs = inner(&dw, &wt);
            assert!((lhs - mid).abs() < 1e-9, "dx adjoint (s={s},p={p},k={k})");
            assert!((lhs - rhs).abs() < 1e-9, "dw adjoint (s={s},p={p},k={k})");
        }
    }

    #[test]
    fn conv_gradients_match_fd() {
        let mut rng = Rng::new(60);
        let wt0 = rng.normal_vec(2 * 1 * 3 * 3);
        let wt = Tensor::constant(&[2, 1, 3, 3], wt0);
        check_grad(
            &[1, 1, 5, 6],
            |x| {
                let y = x.conv2d(&wt, 1, 1);
                y.mul(&y).sum_all()
            },
            61,
        );
        // weight gradient path
        let mut rng2 = Rng::new(62);
        let x0 = rng2.normal_vec(1 * 1 * 5 * 6);
        let xc = Tensor::constant(&[1, 1, 5, 6], x0);
        check_grad(
            &[2, 1, 3, 3],
            |w| {
                let y = xc.conv2d(w, 2, 1);
                y.mul(&y).sum_all()
            },
            63,
        );
        // transposed-conv path used as a decoder layer
        check_grad(
            &[1, 2, 3, 4],
            |g| {
                let mut rng3 = Rng::new(64);
                let w = Tensor::constant(&[2, 3, 4, 4], rng3.normal_vec(2 * 3 * 16));
                let y = g.conv2d_input_grad(&w, 2, 1, 6, 8);
                y.mul(&y).sum_all()
            },
            65,
        );
    }

    #[test]
    fn max_pool_values_and_gradient() {
        let x = Tensor::param(&[1, 1, 2, 4], vec![1.0, 5.0, 2.0, 0.0, 3.0, -1.0, 7.0, 2.0]);
        let y = x.max_pool2d(2, 2);
        assert_eq!(y.data(), &[5.0, 7.0]);
        let s = y.sum_all();
        let gx = grad(&s, &[&x]).remove(0);
        assert_eq!(gx.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        check_grad(
            &[1, 2, 4, 4],
            |x| {
                let y = x.max_pool2d(2, 2);
                y.mul(&y).sum_all()
            },
            70,
        );
    }

    #[test]
    fn resize_bilinear_identity_and_gradient() {
        let mut rng = Rng::new(80);
        let x = randt(&[1, 1, 4, 6], &mut rng);
        let same = x.resize_bilinear(4, 6);
        for (a, b) in x.data().iter().zip(same.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        check_grad(
            &[1, 1, 4, 6],
            |x| {
                let y = x.resize_bilinear(3, 5);
                y.mul(&y).sum_all()
            },
            81,
        );
    }

    #[test]
    fn double_backprop_cubic() {
        // y = sum(x^3): dy/dx = 3x^2, d2y/dx2 applied to ones = 6x.
        let x = Tensor::param(&[3], vec![1.0, -2.0, 0.5]);
        let y = x.mul(&x).mul(&x).sum_all();
        let g1 = grad(&y, &[&x]).remove(0);
        for (g, v) in g1.data().iter().zip(x.data()) {
            assert!((g - 3.0 * v * v).abs() < 1e-12);
        }
        let s = g1.sum_all();
        let g2 = grad(&s, &[&x]).remove(0);
        for (g, v) in g2.data().iter().zip(x.data()) {
            assert!((g - 6.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn double_backprop_through_conv_gradient_norm() {
        // ||d/dx sum(conv(x, w))||^2 is a function of w only (linear conv);
        // check its w-gradient against finite differences.
        let mut rng = Rng::new(90);
        let x0 = rng.normal_vec(1 * 1 * 4 * 4);
        let w0 = rng.normal_vec(1 * 1 * 3 * 3);

        let f = |wv: &[f64]| {
            let x = Tensor::param(&[1, 1, 4, 4], x0.clone());
            let w = Tensor::param(&[1, 1, 3, 3], wv.to_vec());
            let y = x.conv2d(&w, 1, 1).sum_all();
            let gx = grad(&y, &[&x]).remove(0);
            (gx.mul(&gx).sum_all(), w)
        };
        let (penalty, w) = f(&w0);
        let analytic = grad(&penalty, &[&w]).remove(0);
        let numeric = numeric_gradient(|wv| f(wv).0.scalar_value(), &w0, 1e-6);
        let err = max_rel_err(analytic.data(), &numeric);
        assert!(err < 1e-7, "double-backprop rel err {err}");
    }

    #[test]
    fn grad_of_unrelated_tensor_is_zero() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        let z = Tensor::param(&[3], vec![0.0, 0.0, 0.0]);
        let y = x.sum_all();
        let gz = grad(&y, &[&z]).remove(0);
        assert_eq!(gz.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn detach_stops_gradients() {
        let x = Tensor::param(&[2], vec![3.0, 4.0]);
        let y = x.detach().mul(&x).sum_all();
        let gx = grad(&y, &[&x]).remove(0);
        // only the second factor sees the gradient
        assert_eq!(gx.data(), &[3.0, 4.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(100);
        let x = randt(&[5, 7], &mut rng);
        let s = softmax_rows(&x);
        for r in 0..5 {
            let sum: f64 = s.data()[r * 7..(r + 1) * 7].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        let ls = log_softmax_rows(&x);
        for r in 0..5 {
            let sum: f64 = ls.data()[r * 7..(r + 1) * 7]
                .iter()
                .map(|&v| math::exp(v))
                .sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}
