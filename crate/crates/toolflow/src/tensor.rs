//! Dense f64 tensors with reverse-mode automatic differentiation over a
//! dynamically recorded graph, plus a bias-corrected Adam optimizer.
//!
//! Tensors are immutable after creation. Each op with a grad-requiring input
//! records its parents and a backward closure; [`Tensor::backward`] runs the
//! closures in reverse topological order and accumulates gradients into the
//! leaves. Shape mismatches panic with the op name and both shapes, since
//! they are programming errors rather than recoverable conditions.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("backward called twice on the same graph root without reset")]
    BackwardTwice,
    #[error("NaN or Inf gradient in parameter '{0}'")]
    NonFiniteGrad(String),
    #[error("optimizer state tracks {state} parameters but store has {store}")]
    StateMismatch { state: usize, store: usize },
}

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    backward_done: Cell<bool>,
}

/// A reference-counted immutable tensor node.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0usize; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(shape={:?}, grad={})", self.shape(), self.requires_grad())
    }
}

impl Tensor {
    fn build(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                parents,
                backward,
                backward_done: Cell::new(false),
            }),
        }
    }

    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(
            numel(&shape),
            data.len(),
            "from_vec: shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor::build(shape, data, false, vec![], None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![], vec![v])
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel(&shape);
        Tensor::from_vec(shape, vec![0.0; n])
    }

    /// A gradient-requiring leaf (parameter).
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(numel(&shape), data.len());
        Tensor::build(shape, data, true, vec![], None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.inner.data.len(), 1, "item() on non-scalar {:?}", self.shape());
        self.inner.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(self.inner.shape.clone(), self.inner.data.clone())
    }

    fn accumulate_grad(&self, contrib: &[f64]) {
        let mut g = self.inner.grad.borrow_mut();
        match g.as_mut() {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            None => *g = Some(contrib.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
    /// reachable grad-requiring tensor until explicitly zeroed.
    pub fn backward(&self) -> Result<(), TensorError> {
        if !self.inner.shape.is_empty() && numel(&self.inner.shape) != 1 {
            return Err(TensorError::NotScalarLoss(self.inner.shape.clone()));
        }
        if self.inner.backward_done.get() {
            return Err(TensorError::BackwardTwice);
        }
        self.inner.backward_done.set(true);
        // topological order by DFS over parent edges
        let mut order: Vec<Tensor> = Vec::new();
        let mut state: HashMap<*const Inner, u8> = HashMap::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        state.insert(Rc::as_ptr(&self.inner), 1);
        while let Some((node, child)) = stack.pop() {
            if child < node.inner.parents.len() {
                let next = node.inner.parents[child].clone();
                stack.push((node, child + 1));
                let ptr = Rc::as_ptr(&next.inner);
                if next.inner.requires_grad && !state.contains_key(&ptr) {
                    state.insert(ptr, 1);
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        self.accumulate_grad(&[1.0]);
        for node in order.iter().rev() {
            let Some(bw) = node.inner.backward.as_ref() else { continue };
            let gout = node.inner.grad.borrow().clone();
            let Some(gout) = gout else { continue };
            let contribs = bw(&gout);
            for (parent, contrib) in node.inner.parents.iter().zip(contribs) {
                if let (true, Some(c)) = (parent.inner.requires_grad, contrib) {
                    parent.accumulate_grad(&c);
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// broadcasting helpers

fn broadcast_shape(op: &str, a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            panic!("{op}: incompatible shapes {a:?} and {b:?}");
        }
    }
    out
}

/// Strides of `shape` aligned to `out_shape`, with 0 where broadcast.
fn aligned_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let s = strides_of(shape);
    let offset = out_shape.len() - shape.len();
    let mut out = vec![0usize; out_shape.len()];
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 && out_shape[offset + i] != 1 { 0 } else { s[i] };
    }
    out
}

fn for_each_pair(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for flat in 0..n {
        f(flat, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Reduce a gradient over broadcast axes back to `in_shape`.
fn unbroadcast(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    let sa = aligned_strides(in_shape, out_shape);
    let mut out = vec![0.0; numel(in_shape)];
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut ia = 0usize;
    for g in grad.iter() {
        out[ia] += g;
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            if idx[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// op builders

fn unary_op(
    name: &'static str,
    a: &Tensor,
    f: impl Fn(f64) -> f64,
    // derivative as a function of the input value
    df: impl Fn(f64) -> f64 + 'static,
) -> Tensor {
    let _ = name;
    let data: Vec<f64> = a.data().iter().map(|&x| f(x)).collect();
    let shape = a.shape().to_vec();
    if !a.requires_grad() {
        return Tensor::from_vec(shape, data);
    }
    let saved = a.clone();
    let bw: BackwardFn = Box::new(move |gout| {
        let g: Vec<f64> = saved.data().iter().zip(gout).map(|(&x, &g)| df(x) * g).collect();
        vec![Some(g)]
    });
    Tensor::build(shape, data, true, vec![a.clone()], Some(bw))
}

fn binary_op(
    name: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
    dfa: impl Fn(f64, f64) -> f64 + 'static,
    dfb: impl Fn(f64, f64) -> f64 + 'static,
) -> Tensor {
    let out_shape = broadcast_shape(name, a.shape(), b.shape());
    let sa = aligned_strides(a.shape(), &out_shape);
    let sb = aligned_strides(b.shape(), &out_shape);
    let mut data = vec![0.0; numel(&out_shape)];
    {
        let (ad, bd) = (a.data(), b.data());
        for_each_pair(&out_shape, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    }
    let rg = a.requires_grad() || b.requires_grad();
    if !rg {
        return Tensor::from_vec(out_shape, data);
    }
    let (ac, bc) = (a.clone(), b.clone());
    let out_shape_c = out_shape.clone();
    let bw: BackwardFn = Box::new(move |gout| {
        let (ad, bd) = (ac.data(), bc.data());
        let mut ga = vec![0.0; gout.len()];
        let mut gb = vec![0.0; gout.len()];
        for_each_pair(&out_shape_c, &sa, &sb, |o, ia, ib| {
            ga[o] = dfa(ad[ia], bd[ib]) * gout[o];
            gb[o] = dfb(ad[ia], bd[ib]) * gout[o];
        });
        let ga = if ac.requires_grad() {
            Some(unbroadcast(&ga, &out_shape_c, ac.shape()))
        } else {
            None
        };
        let gb = if bc.requires_grad() {
            Some(unbroadcast(&gb, &out_shape_c, bc.shape()))
        } else {
            None
        };
        vec![ga, gb]
    });
    Tensor::build(out_shape, data, true, vec![a.clone(), b.clone()], Some(bw))
}

// raw matmul helpers on row-major buffers
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for row in 0..m {
        let arow = &a[row * k..(row + 1) * k];
        let orow = &mut out[row * n..(row + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn mm_abt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    // out (m,k) = a (m,n) * b^T where b is (k,n)
    for row in 0..m {
        let arow = &a[row * n..(row + 1) * n];
        for col in 0..k {
            let brow = &b[col * n..(col + 1) * n];
            out[row * k + col] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

fn mm_atb(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // out (k,n) = a^T * b where a is (m,k), b is (m,n)
    for row in 0..m {
        let arow = &a[row * k..(row + 1) * k];
        let brow = &b[row * n..(row + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl Tensor {
    pub fn add(&self, o: &Tensor) -> Tensor {
        binary_op("add", self, o, |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, o: &Tensor) -> Tensor {
        binary_op("sub", self, o, |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, o: &Tensor) -> Tensor {
        binary_op("mul", self, o, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, o: &Tensor) -> Tensor {
        binary_op("div", self, o, |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    pub fn neg(&self) -> Tensor {
        unary_op("neg", self, |x| -x, |_| -1.0)
    }

    pub fn exp(&self) -> Tensor {
        unary_op("exp", self, |x| x.exp(), |x| x.exp())
    }

    pub fn log(&self) -> Tensor {
        unary_op("log", self, |x| x.ln(), |x| 1.0 / x)
    }

    pub fn tanh(&self) -> Tensor {
        unary_op("tanh", self, |x| x.tanh(), |x| 1.0 - x.tanh() * x.tanh())
    }

    pub fn sqrt(&self) -> Tensor {
        unary_op("sqrt", self, |x| x.sqrt(), |x| 0.5 / x.sqrt())
    }

    pub fn relu(&self) -> Tensor {
        unary_op("relu", self, |x| x.max(0.0), |x| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// tanh-approximation GELU, built from recorded primitives.
    pub fn gelu(&self) -> Tensor {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        let x3 = self.mul(self).mul(self);
        let inner = self.add(&x3.scale(0.044715)).scale(c);
        self.scale(0.5).mul(&inner.tanh().add_scalar(1.0))
    }

    /// Elementwise Huber penalty with threshold `delta`.
    pub fn huber(&self, delta: f64) -> Tensor {
        unary_op(
            "huber",
            self,
            move |x| {
                if x.abs() <= delta {
                    0.5 * x * x
                } else {
                    delta * (x.abs() - 0.5 * delta)
                }
            },
            move |x| x.clamp(-delta, delta),
        )
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary_op("scale", self, move |x| x * c, move |_| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary_op("add_scalar", self, move |x| x + c, |_| 1.0)
    }

    /// 2D matrix product (m,k) x (k,n) -> (m,n).
    pub fn matmul(&self, o: &Tensor) -> Tensor {
        let (sa, sb) = (self.shape(), o.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            panic!("matmul: incompatible shapes {sa:?} and {sb:?}");
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        mm(self.data(), o.data(), m, k, n, &mut data);
        let shape = vec![m, n];
        if !(self.requires_grad() || o.requires_grad()) {
            return Tensor::from_vec(shape, data);
        }
        let (ac, bc) = (self.clone(), o.clone());
        let bw: BackwardFn = Box::new(move |gout| {
            let ga = if ac.requires_grad() {
                let mut g = vec![0.0; m * k];
                mm_abt(gout, bc.data(), m, n, k, &mut g);
                Some(g)
            } else {
                None
            };
            let gb = if bc.requires_grad() {
                let mut g = vec![0.0; k * n];
                mm_atb(ac.data(), gout, m, k, n, &mut g);
                Some(g)
            } else {
                None
            };
            vec![ga, gb]
        });
        Tensor::build(shape, data, true, vec![self.clone(), o.clone()], Some(bw))
    }

    /// Batched matmul (b,m,k) x (b,k,n) -> (b,m,n).
    pub fn bmm(&self, o: &Tensor) -> Tensor {
        let (sa, sb) = (self.shape(), o.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            panic!("bmm: incompatible shapes {sa:?} and {sb:?}");
        }
        let (b, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0; b * m * n];
        for bi in 0..b {
            mm(
                &self.data()[bi * m * k..(bi + 1) * m * k],
                &o.data()[bi * k * n..(bi + 1) * k * n],
                m,
                k,
                n,
                &mut data[bi * m * n..(bi + 1) * m * n],
            );
        }
        let shape = vec![b, m, n];
        if !(self.requires_grad() || o.requires_grad()) {
            return Tensor::from_vec(shape, data);
        }
        let (ac, bc) = (self.clone(), o.clone());
        let bw: BackwardFn = Box::new(move |gout| {
            let ga = if ac.requires_grad() {
                let mut g = vec![0.0; b * m * k];
                for bi in 0..b {
                    mm_abt(
                        &gout[bi * m * n..(bi + 1) * m * n],
                        &bc.data()[bi * k * n..(bi + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut g[bi * m * k..(bi + 1) * m * k],
                    );
                }
                Some(g)
            } else {
                None
            };
            let gb = if bc.requires_grad() {
                let mut g = vec![0.0; b * k * n];
                for bi in 0..b {
                    mm_atb(
                        &ac.data()[bi * m * k..(bi + 1) * m * k],
                        &gout[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut g[bi * k * n..(bi + 1) * k * n],
                    );
                }
                Some(g)
            } else {
                None
            };
            vec![ga, gb]
        });
        Tensor::build(shape, data, true, vec![self.clone(), o.clone()], Some(bw))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(
            numel(&shape),
            self.data().len(),
            "reshape: {:?} -> {:?} changes element count",
            self.shape(),
            shape
        );
        let data = self.data().to_vec();
        if !self.requires_grad() {
            return Tensor::from_vec(shape, data);
        }
        let bw: BackwardFn = Box::new(move |gout| vec![Some(gout.to_vec())]);
        Tensor::build(shape, data, true, vec![self.clone()], Some(bw))
    }

    /// Permute axes: out[i_perm] = in[i].
    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let rank = self.shape().len();
        assert_eq!(perm.len(), rank, "permute: perm {perm:?} vs rank {rank}");
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let in_strides = strides_of(&in_shape);
        let out_to_in: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = numel(&out_shape);
        let mut data = vec![0.0; n];
        let mut idx = vec![0usize; rank];
        let mut iin = 0usize;
        for (flat, d) in data.iter_mut().enumerate() {
            let _ = flat;
            *d = self.data()[iin];
            for dd in (0..rank).rev() {
                idx[dd] += 1;
                iin += out_to_in[dd];
                if idx[dd] < out_shape[dd] {
                    break;
                }
                iin -= out_to_in[dd] * out_shape[dd];
                idx[dd] = 0;
            }
        }
        if !self.requires_grad() {
            return Tensor::from_vec(out_shape, data);
        }
        let out_shape_c = out_shape.clone();
        let in_len = self.data().len();
        let bw: BackwardFn = Box::new(move |gout| {
            let mut g = vec![0.0; in_len];
            let mut idx = vec![0usize; rank];
            let mut iin = 0usize;
            for go in gout.iter() {
                g[iin] += go;
                for dd in (0..rank).rev() {
                    idx[dd] += 1;
                    iin += out_to_in[dd];
                    if idx[dd] < out_shape_c[dd] {
                        break;
                    }
                    iin -= out_to_in[dd] * out_shape_c[dd];
                    idx[dd] = 0;
                }
            }
            vec![Some(g)]
        });
        Tensor::build(out_shape, data, true, vec![self.clone()], Some(bw))
    }

    pub fn broadcast_to(&self, shape: Vec<usize>) -> Tensor {
        let sa = aligned_strides(self.shape(), &shape);
        let zero_strides = vec![0usize; shape.len()];
        let mut data = vec![0.0; numel(&shape)];
        for_each_pair(&shape, &sa, &zero_strides, |o, ia, _| data[o] = self.data()[ia]);
        if !self.requires_grad() {
            return Tensor::from_vec(shape, data);
        }
        let in_shape = self.shape().to_vec();
        let out_shape = shape.clone();
        let bw: BackwardFn =
            Box::new(move |gout| vec![Some(unbroadcast(gout, &out_shape, &in_shape))]);
        Tensor::build(shape, data, true, vec![self.clone()], Some(bw))
    }

    /// Slice along `axis`, keeping `[start, end)`.
    pub fn slice(&self, axis: usize, start: usize, end: usize) -> Tensor {
        let shape = self.shape().to_vec();
        assert!(axis < shape.len() && start < end && end <= shape[axis],
            "slice: axis {axis} range {start}..{end} on shape {shape:?}");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let len = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&self.data()[base + start * inner..base + end * inner]);
        }
        if !self.requires_grad() {
            return Tensor::from_vec(out_shape, data);
        }
        let in_len = self.data().len();
        let bw: BackwardFn = Box::new(move |gout| {
            let mut g = vec![0.0; in_len];
            let seg = (end - start) * inner;
            for o in 0..outer {
                let base = o * len * inner;
                g[base + start * inner..base + end * inner]
                    .copy_from_slice(&gout[o * seg..(o + 1) * seg]);
            }
            vec![Some(g)]
        });
        Tensor::build(out_shape, data, true, vec![self.clone()], Some(bw))
    }

    /// Concatenate along `axis`.
    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat: empty input");
        let rank = parts[0].shape().len();
        for p in parts {
            assert_eq!(p.shape().len(), rank, "concat: rank mismatch");
            for d in 0..rank {
                if d != axis {
                    assert_eq!(
                        p.shape()[d],
                        parts[0].shape()[d],
                        "concat: shape mismatch {:?} vs {:?} on axis {}",
                        p.shape(),
                        parts[0].shape(),
                        d
                    );
                }
            }
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for p in parts {
                let l = p.shape()[axis];
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        if !rg {
            return Tensor::from_vec(out_shape, data);
        }
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let grads_needed: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        let total = out_shape[axis];
        let bw: BackwardFn = Box::new(move |gout| {
            let mut gs: Vec<Option<Vec<f64>>> = lens
                .iter()
                .zip(&grads_needed)
                .map(|(&l, &need)| if need { Some(vec![0.0; outer * l * inner]) } else { None })
                .collect();
            for o in 0..outer {
                let mut off = 0;
                for (pi, &l) in lens.iter().enumerate() {
                    if let Some(g) = gs[pi].as_mut() {
                        g[o * l * inner..(o + 1) * l * inner].copy_from_slice(
                            &gout[(o * total + off) * inner..(o * total + off + l) * inner],
                        );
                    }
                    off += l;
                }
            }
            gs
        });
        Tensor::build(out_shape, data, true, parts.to_vec(), Some(bw))
    }

    /// Gather rows along axis 0: out[r] = self[indices[r]].
    pub fn gather_rows(&self, indices: &[usize]) -> Tensor {
        let shape = self.shape();
        assert!(!shape.is_empty(), "gather_rows on scalar");
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            assert!(i < shape[0], "gather_rows: index {i} out of bounds {}", shape[0]);
            data.extend_from_slice(&self.data()[i * inner..(i + 1) * inner]);
        }
        if !self.requires_grad() {
            return Tensor::from_vec(out_shape, data);
        }
        let idx = indices.to_vec();
        let n0 = shape[0];
        let bw: BackwardFn = Box::new(move |gout| {
            let mut g = vec![0.0; n0 * inner];
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..inner {
                    g[i * inner + c] += gout[r * inner + c];
                }
            }
            vec![Some(g)]
        });
        Tensor::build(out_shape, data, true, vec![self.clone()], Some(bw))
    }

    fn reduce_prep(&self, axis: usize) -> (usize, usize, usize, Vec<usize>) {
        let shape = self.shape();
        assert!(axis < shape.len(), "reduce axis {axis} on shape {shape:?}");
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = 1;
        (outer, len, inner, out_shape)
    }

    /// Sum along `axis`, keeping it as size 1.
    pub fn sum_axis(&self, axis: usize) -> Tensor {
        let (outer, len, inner, out_shape) = self.reduce_prep(axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += self.data()[(o * len + l) * inner + i];
                }
            }
        }
        if !self.requires_grad() {
            return Tensor::from_vec(out_shape, data);
        }
        let bw: BackwardFn = Box::new(move |gout| {
            let mut g = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        g[(o * len + l) * inner + i] = gout[o * inner + i];
                    }
                }
            }
            vec![Some(g)]
        });
        Tensor::build(out_shape, data, true, vec![self.clone()], Some(bw))
    }

    pub fn mean_axis(&self, axis: usize) -> Tensor {
        let len = self.shape()[axis];
        self.sum_axis(axis).scale(1.0 / len as f64)
    }

    /// Max along `axis` (keepdim); gradient routes to the first argmax.
    pub fn max_axis(&self, axis: usize) -> Tensor {
        let (outer, len, inner, out_shape) = self.reduce_prep(axis);
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let v = self.data()[(o * len + l) * inner + i];
                    if v > data[o * inner + i] {
                        data[o * inner + i] = v;
                        arg[o * inner + i] = l;
                    }
                }
            }
        }
        if !self.requires_grad() {
            return Tensor::from_vec(out_shape, data);
        }
        let bw: BackwardFn = Box::new(move |gout| {
            let mut g = vec![0.0; outer * len * inner];
            for o in 0..outer {
                for i in 0..inner {
                    g[(o * len + arg[o * inner + i]) * inner + i] = gout[o * inner + i];
                }
            }
            vec![Some(g)]
        });
        Tensor::build(out_shape, data, true, vec![self.clone()], Some(bw))
    }

    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        if !self.requires_grad() {
            return Tensor::scalar(total);
        }
        let n = self.data().len();
        let bw: BackwardFn = Box::new(move |gout| vec![Some(vec![gout[0]; n])]);
        Tensor::build(vec![], vec![total], true, vec![self.clone()], Some(bw))
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum_all().scale(1.0 / self.data().len() as f64)
    }

    /// Softmax along `axis`, composed from primitives with a detached max
    /// shift for stability.
    pub fn softmax(&self, axis: usize) -> Tensor {
        let shifted = self.sub(&self.max_axis(axis).detach());
        let e = shifted.exp();
        e.div(&e.sum_axis(axis))
    }

    /// Pre-affine layer normalization along `axis`.
    pub fn layer_norm(&self, axis: usize, eps: f64) -> Tensor {
        let mu = self.mean_axis(axis);
        let centered = self.sub(&mu);
        let var = centered.mul(&centered).mean_axis(axis);
        centered.div(&var.add_scalar(eps).sqrt())
    }

    /// Cumulative sum along `axis`.
    pub fn cumsum(&self, axis: usize) -> Tensor {
        let (outer, len, inner, _) = self.reduce_prep(axis);
        let mut data = self.data().to_vec();
        for o in 0..outer {
            for l in 1..len {
                for i in 0..inner {
                    data[(o * len + l) * inner + i] += data[(o * len + l - 1) * inner + i];
                }
            }
        }
        let shape = self.shape().to_vec();
        if !self.requires_grad() {
            return Tensor::from_vec(shape, data);
        }
        let bw: BackwardFn = Box::new(move |gout| {
            // reverse cumulative sum
            let mut g = gout.to_vec();
            for o in 0..outer {
                for l in (0..len - 1).rev() {
                    for i in 0..inner {
                        g[(o * len + l) * inner + i] += g[(o * len + l + 1) * inner + i];
                    }
                }
            }
            vec![Some(g)]
        });
        Tensor::build(shape, data, true, vec![self.clone()], Some(bw))
    }
}

// ---------------------------------------------------------------------------
// parameters and optimizer

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named parameter store; models keep `ParamId`s and read fresh tensors each
/// forward pass. Updates replace the leaf tensor so graph nodes from earlier
/// steps are never mutated.
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter name '{name}'"
        );
        self.entries.push((name, Tensor::param(shape, data)));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> Tensor {
        self.entries[id.0].1.clone()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.data().len()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// Replace a parameter's value (same shape), e.g. after an Adam step or a
    /// checkpoint load.
    pub fn set_data(&mut self, id: ParamId, data: Vec<f64>) {
        let shape = self.entries[id.0].1.shape().to_vec();
        self.entries[id.0].1 = Tensor::param(shape, data);
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    /// Global gradient norm over all populated grads.
    pub fn grad_norm(&self) -> f64 {
        let mut sq = 0.0;
        for (_, t) in &self.entries {
            if let Some(g) = t.grad() {
                sq += g.iter().map(|x| x * x).sum::<f64>();
            }
        }
        sq.sqrt()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.iter().map(|(_, t)| vec![0.0; t.data().len()]).collect(),
            v: store.iter().map(|(_, t)| vec![0.0; t.data().len()]).collect(),
        }
    }
}

/// One Adam update over every parameter with a populated gradient. Gradients
/// are left in place; callers zero them between steps.
pub fn adam_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    max_grad_norm: Option<f64>,
) -> Result<(), TensorError> {
    if state.m.len() != store.len() {
        return Err(TensorError::StateMismatch { state: state.m.len(), store: store.len() });
    }
    let mut clip_scale = 1.0;
    if let Some(max_norm) = max_grad_norm {
        let norm = store.grad_norm();
        if norm > max_norm {
            clip_scale = max_norm / norm;
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    for idx in 0..store.len() {
        let id = ParamId(idx);
        let tensor = store.get(id);
        let Some(grad) = tensor.grad() else { continue };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TensorError::NonFiniteGrad(store.name(id).to_string()));
        }
        let mut data = tensor.data().to_vec();
        for (j, &g_raw) in grad.iter().enumerate() {
            let g = g_raw * clip_scale;
            state.m[idx][j] = state.beta1 * state.m[idx][j] + (1.0 - state.beta1) * g;
            state.v[idx][j] = state.beta2 * state.v[idx][j] + (1.0 - state.beta2) * g * g;
            let mhat = state.m[idx][j] / bc1;
            let vhat = state.v[idx][j] / bc2;
            data[j] -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
        store.set_data(id, data);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
