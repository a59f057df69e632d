//! Dense f64 tensors with tape-based reverse-mode autodiff.
//!
//! Data is row-major. Gradients accumulate additively on every tensor that
//! requires them; `detach` produces a gradient barrier. Views are copies —
//! at desk scale correctness beats aliasing tricks.

pub mod kernels;
pub mod tape;

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

struct Inner {
    data: RefCell<Vec<f64>>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
}

/// Cheaply clonable handle to a tensor. Clones share data and gradient.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor(shape={:?}, requires_grad={})", self.shape(), self.requires_grad())
    }
}

/// Elementwise activation kinds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
}

impl Tensor {
    fn make(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor {
            inner: Rc::new(Inner {
                data: RefCell::new(data),
                shape,
                requires_grad,
                grad: RefCell::new(None),
            }),
        }
    }

    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::shape(
                "from_vec",
                format!("data length {} does not match shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor::make(data, shape.to_vec(), false))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::make(vec![0.0; shape.iter().product()], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::make(vec![value; shape.iter().product()], shape.to_vec(), false)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::make(vec![value], vec![], false)
    }

    /// Uniform samples in [lo, hi).
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl rand::Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| lo + (hi - lo) * rng.gen::<f64>()).collect();
        Tensor::make(data, shape.to_vec(), false)
    }

    /// Normal samples via Box-Muller; bit-reproducible for a fixed RNG stream.
    pub fn rand_normal(shape: &[usize], mean: f64, sigma: f64, rng: &mut impl rand::Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
            let u2: f64 = rng.gen::<f64>();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(mean + sigma * r * theta.cos());
            if data.len() < n {
                data.push(mean + sigma * r * theta.sin());
            }
        }
        Tensor::make(data, shape.to_vec(), false)
    }

    /// Mark as a gradient-requiring leaf (builder style).
    pub fn with_grad(self) -> Tensor {
        if self.inner.requires_grad {
            return self;
        }
        let data = self.inner.data.borrow().clone();
        Tensor::make(data, self.inner.shape.clone(), true)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.borrow().len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value; panics if not a single element.
    pub fn item(&self) -> f64 {
        let d = self.inner.data.borrow();
        assert_eq!(d.len(), 1, "item() on non-scalar tensor");
        d[0]
    }

    /// Replace the stored values (same length). Used by optimizers and
    /// finite-difference probes; never call between forward and backward.
    pub fn set_data(&self, data: Vec<f64>) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        *d = data;
    }

    /// In-place update of stored values.
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Same values, no gradient flow. A detached tensor never accumulates
    /// gradient and blocks every path through it.
    pub fn detach(&self) -> Tensor {
        Tensor::make(self.to_vec(), self.inner.shape.clone(), false)
    }

    fn accumulate(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    fn out_requires(inputs: &[&Tensor]) -> bool {
        tape::is_recording() && inputs.iter().any(|t| t.requires_grad())
    }

    /// Reverse-mode pass from a scalar loss. Populates `grad` on every
    /// reachable gradient-requiring tensor, then drains the tape.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        self.accumulate(&[1.0]);
        let entries = tape::drain();
        for entry in entries.into_iter().rev() {
            entry();
        }
        Ok(())
    }

    // ── shape ops ──────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape(), shape),
            ));
        }
        let out = Tensor::make(self.to_vec(), shape.to_vec(), Self::out_requires(&[self]));
        if out.requires_grad() {
            let (a, o) = (self.clone(), out.clone());
            tape::record(Box::new(move || {
                if let Some(g) = o.grad().as_deref() {
                    if a.requires_grad() {
                        a.accumulate(g);
                    }
                }
            }));
        }
        Ok(out)
    }

    /// 2-D transpose.
    pub fn t(&self) -> Result<Tensor> {
        if self.shape().len() != 2 {
            return Err(Error::shape("t", format!("expected 2-D, got {:?}", self.shape())));
        }
        self.permute(&[1, 0])
    }

    /// General axis permutation (copying).
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let shape = self.shape();
        let nd = shape.len();
        if perm.len() != nd || {
            let mut seen = vec![false; nd];
            perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true))
        } {
            return Err(Error::shape("permute", format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_copy(&self.data(), shape, perm);
        let out = Tensor::make(data, out_shape, Self::out_requires(&[self]));
        if out.requires_grad() {
            let (a, o) = (self.clone(), out.clone());
            let mut inv = vec![0usize; nd];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let o_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
            tape::record(Box::new(move || {
                if let Some(g) = o.grad() {
                    if a.requires_grad() {
                        a.accumulate(&permute_copy(&g, &o_shape, &inv));
                    }
                }
            }));
        }
        Ok(out)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {start}..{} out of bounds for axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, alen, inner) = kernels::axis_lanes(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        {
            let src = self.data();
            for o in 0..outer {
                let base = (o * alen + start) * inner;
                data.extend_from_slice(&src[base..base + len * inner]);
            }
        }
        let out = Tensor::make(data, out_shape, Self::out_requires(&[self]));
        if out.requires_grad() {
            let (a, o) = (self.clone(), out.clone());
            let numel = self.numel();
            tape::record(Box::new(move || {
                if let Some(g) = o.grad() {
                    if a.requires_grad() {
                        let mut ga = vec![0.0; numel];
                        for o_i in 0..outer {
                            let dst = (o_i * alen + start) * inner;
                            let src = o_i * len * inner;
                            ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                        }
                        a.accumulate(&ga);
                    }
                }
            }));
        }
        Ok(out)
    }

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no tensors given".to_string()));
        }
        let first = parts[0].shape().to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of bounds for {first:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("incompatible shapes {:?} and {:?} along axis {axis}", first, s),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = kernels::axis_lanes(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for p in parts {
            let len = p.shape()[axis];
            let src = p.data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                let s = o * len * inner;
                data[dst..dst + len * inner].copy_from_slice(&src[s..s + len * inner]);
            }
            offset += len;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let out = Tensor::make(data, out_shape, Self::out_requires(&refs));
        if out.requires_grad() {
            let inputs: Vec<Tensor> = parts.to_vec();
            let o = out.clone();
            tape::record(Box::new(move || {
                if let Some(g) = o.grad() {
                    let mut offset = 0;
                    for p in &inputs {
                        let len = p.shape()[axis];
                        if p.requires_grad() {
                            let mut gp = vec![0.0; p.numel()];
                            for o_i in 0..outer {
                                let src = (o_i * total + offset) * inner;
                                let dst = o_i * len * inner;
                                gp[dst..dst + len * inner]
                                    .copy_from_slice(&g[src..src + len * inner]);
                            }
                            p.accumulate(&gp);
                        }
                        offset += len;
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Stack 1-D tensors of equal length into a [rows × len] matrix.
    pub fn stack_rows(rows: &[Tensor]) -> Result<Tensor> {
        let reshaped: Vec<Tensor> = rows
            .iter()
            .map(|r| r.reshape(&[1, r.numel()]))
            .collect::<Result<_>>()?;
        Tensor::concat(&reshaped, 0)
    }

    // ── arithmetic ─────────────────────────────────────────────────────

    fn binary_elementwise(
        &self,
        rhs: &Tensor,
        op: &'static str,
        fwd: impl Fn(f64, f64) -> f64,
        back: impl Fn(&Tensor, &Tensor, &Tensor) + 'static,
    ) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), rhs.shape()),
            ));
        }
        let data = {
            let a = self.data();
            let b = rhs.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| fwd(x, y)).collect()
        };
        let out = Tensor::make(data, self.shape().to_vec(), Self::out_requires(&[self, rhs]));
        if out.requires_grad() {
            let (a, b, o) = (self.clone(), rhs.clone(), out.clone());
            tape::record(Box::new(move || back(&a, &b, &o)));
        }
        Ok(out)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(rhs, "add", |x, y| x + y, |a, b, o| {
            if let Some(g) = o.grad() {
                if a.requires_grad() {
                    a.accumulate(&g);
                }
                if b.requires_grad() {
                    b.accumulate(&g);
                }
            }
        })
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(rhs, "sub", |x, y| x - y, |a, b, o| {
            if let Some(g) = o.grad() {
                if a.requires_grad() {
                    a.accumulate(&g);
                }
                if b.requires_grad() {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    b.accumulate(&neg);
                }
            }
        })
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary_elementwise(rhs, "mul", |x, y| x * y, |a, b, o| {
            if let Some(g) = o.grad() {
                if a.requires_grad() {
                    let ga: Vec<f64> =
                        g.iter().zip(b.data().iter()).map(|(&gv, &bv)| gv * bv).collect();
                    a.accumulate(&ga);
                }
                if b.requires_grad() {
                    let gb: Vec<f64> =
                        g.iter().zip(a.data().iter()).map(|(&gv, &av)| gv * av).collect();
                    b.accumulate(&gb);
                }
            }
        })
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|&x| x + s).collect();
        let out = Tensor::make(data, self.shape().to_vec(), Self::out_requires(&[self]));
        if out.requires_grad() {
            let (a, o) = (self.clone(), out.clone());
            tape::record(Box::new(move || {
                if let Some(g) = o.grad() {
                    a.accumulate(&g);
                }
            }));
        }
        out
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|&x| x * s).collect();
        let out = Tensor::make(data, self.shape().to_vec(), Self::out_requires(&[self]));
        if out.requires_grad() {
            let (a, o) = (self.clone(), out.clone());
            tape::record(Box::new(move || {
                if let Some(g) = o.grad() {
                    let ga: Vec<f64> = g.iter().map(|v| v * s).collect();
                    a.accumulate(&ga);
                }
            }));
        }
        out
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    /// [m×n] + [n], broadcasting the bias over the leading (row) dimension.
    pub fn add_rows(&self, bias: &Tensor) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || bias.shape() != [s[1]] {
            return Err(Error::shape(
                "add_rows",
                format!("{:?} + {:?}", self.shape(), bias.shape()),
            ));
        }
        let (m, n) = (s[0], s[1]);
        let data = {
            let a = self.data();
            let b = bias.data();
            let mut out = a.clone();
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] += b[j];
                }
            }
            out
        };
        let out = Tensor::make(data, s.to_vec(), Self::out_requires(&[self, bias]));
        if out.requires_grad() {
            let (a, b, o) = (self.clone(), bias.clone(), out.clone());
            tape::record(Box::new(move || {
                if let Some(g) = o.grad() {
                    if a.requires_grad() {
                        a.accumulate(&g);
                    }
                    if b.requires_grad() {
                        let mut gb = vec![0.0; n];
                        for i in 0..m {
                            for j in 0..n {
                                gb[j] += g[i * n + j];
                            }
                        }
                        b.accumulate(&gb);
                    }
                }
            }));
        }
        Ok(out)
    }

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        kernels::gemm(&self.data(), &rhs.data(), &mut data, m, n, k);
        let out = Tensor::make(data, vec![m, n], Self::out_requires(&[self, rhs]));
        if out.requires_grad() {
            let (a, b, o) = (self.clone(), rhs.clone(), out.clone());
            tape::record(Box::new(move || {
                if let Some(g) = o.grad() {
                    if a.requires_grad() {
                        let mut ga = vec![0.0; m * k];
                        kernels::gemm_a_bt(&g, &b.data(), &mut ga, m, k, n);
                        a.accumulate(&ga);
                    }
                    if b.requires_grad() {
                        let mut gb = vec![0.0; k * n];
                        kernels::gemm_at_b(&a.data(), &g, &mut gb, k, n, m);
                        b.accumulate(&gb);
                    }
                }
            }));
        }
        Ok(out)
    }

    /// self · rhsᵀ without materializing the transpose. rhs: [n × k].
    pub fn matmul_t(&self, rhs: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::shape("matmul_t", format!("{sa:?} · {sb:?}ᵀ")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut data = vec![0.0; m * n];
        kernels::gemm_a_bt(&self.data(), &rhs.data(), &mut data, m, n, k);
        let out = Tensor::make(data, vec![m, n], Self::out_requires(&[self, rhs]));
        if out.requires_grad() {
            let (a, b, o) = (self.clone(), rhs.clone(), out.clone());
            tape::record(Box::new(move || {
                if let Some(g) = o.grad() {
                    // y = a·bᵀ: ga = g·b, gb = gᵀ·a
                    if a.requires_grad() {
                        let mut ga = vec![0.0; m * k];
                        kernels::gemm(&g, &b.data(), &mut ga, m, k, n);
                        a.accumulate(&ga);
                    }
                    if b.requires_grad() {
                        let mut gb = vec![0.0; n * k];
                        kernels::gemm_at_b(&g, &a.data(), &mut gb, n, k, m);
                        b.accumulate(&gb);
                    }
                }
            }));
        }
        Ok(out)
    }

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let out = Tensor::make(vec![total], vec![], Self::out_requires(&[self]));
        if out.requires_grad() {
            let (a, o) = (self.clone(), out.clone());
            let n = self.numel();
            tape::record(Box::new(move || {
                if let Some(g) = o.grad() {
                    a.accumulate(&vec![g[0]; n]);
                }
            }));
        }
        out
    }

    // ── nonlinear ops ──────────────────────────────────────────────────

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let mut data = vec![0.0; self.numel()];
        kernels::softmax_axis(&self.data(), &shape, axis, &mut data);
        let out = Tensor::make(data, shape.clone(), Self::out_requires(&[self]));
        if out.requires_grad() {
            let (a, o) = (self.clone(), out.clone());
            tape::record(Box::new(move || {
                if let Some(g) = o.grad() {
                    if a.requires_grad() {
                        let y = o.data();
                        let (outer, len, inner) = kernels::axis_lanes(o.shape(), axis);
                        let mut ga = vec![0.0; y.len()];
                        for ou in 0..outer {
                            for i in 0..inner {
                                let base = ou * len * inner + i;
                                let mut dot = 0.0;
                                for l in 0..len {
                                    let idx = base + l * inner;
                                    dot += g[idx] * y[idx];
                                }
                                for l in 0..len {
                                    let idx = base + l * inner;
                                    ga[idx] = y[idx] * (g[idx] - dot);
                                }
                            }
                        }
                        drop(y);
                        a.accumulate(&ga);
                    }
                }
            }));
        }
        Ok(out)
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("log_softmax", format!("axis {axis} for shape {shape:?}")));
        }
        let mut data = vec![0.0; self.numel()];
        kernels::log_softmax_axis(&self.data(), &shape, axis, &mut data);
        let out = Tensor::make(data, shape.clone(), Self::out_requires(&[self]));
        if out.requires_grad() {
            let (a, o) = (self.clone(), out.clone());
            tape::record(Box::new(move || {
                if let Some(g) = o.grad() {
                    if a.requires_grad() {
                        let logp = o.data();
                        let (outer, len, inner) = kernels::axis_lanes(o.shape(), axis);
                        let mut ga = vec![0.0; logp.len()];
                        for ou in 0..outer {
                            for i in 0..inner {
                                let base = ou * len * inner + i;
                                let mut gsum = 0.0;
                                for l in 0..len {
                                    gsum += g[base + l * inner];
                                }
                                for l in 0..len {
                                    let idx = base + l * inner;
                                    ga[idx] = g[idx] - logp[idx].exp() * gsum;
                                }
                            }
                        }
                        drop(logp);
                        a.accumulate(&ga);
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Layer normalization along `axis` with learnable gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, axis: usize, eps: f64) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(
                "layer_norm",
                format!("axis {axis} invalid or empty for shape {shape:?}"),
            ));
        }
        let len = shape[axis];
        if gain.shape() != [len] || bias.shape() != [len] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} do not match axis extent {len}",
                    gain.shape(),
                    bias.shape()
                ),
            ));
        }
        let (outer, _, inner) = kernels::axis_lanes(&shape, axis);
        let mut data = vec![0.0; self.numel()];
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = vec![0.0; outer * inner];
        {
            let x = self.data();
            let gn = gain.data();
            let bs = bias.data();
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut mean = 0.0;
                    for l in 0..len {
                        mean += x[base + l * inner];
                    }
                    mean /= len as f64;
                    let mut var = 0.0;
                    for l in 0..len {
                        let d = x[base + l * inner] - mean;
                        var += d * d;
                    }
                    var /= len as f64;
                    let istd = 1.0 / (var + eps).sqrt();
                    inv_std[o * inner + i] = istd;
                    for l in 0..len {
                        let idx = base + l * inner;
                        let h = (x[idx] - mean) * istd;
                        xhat[idx] = h;
                        data[idx] = h * gn[l] + bs[l];
                    }
                }
            }
        }
        let out = Tensor::make(data, shape, Self::out_requires(&[self, gain, bias]));
        if out.requires_grad() {
            let (a, gn, bs, o) = (self.clone(), gain.clone(), bias.clone(), out.clone());
            tape::record(Box::new(move || {
                if let Some(g) = o.grad() {
                    let gain_v = gn.data().clone();
                    if gn.requires_grad() {
                        let mut gg = vec![0.0; len];
                        for ou in 0..outer {
                            for i in 0..inner {
                                let base = ou * len * inner + i;
                                for l in 0..len {
                                    gg[l] += g[base + l * inner] * xhat[base + l * inner];
                                }
                            }
                        }
                        gn.accumulate(&gg);
                    }
                    if bs.requires_grad() {
                        let mut gb = vec![0.0; len];
                        for ou in 0..outer {
                            for i in 0..inner {
                                let base = ou * len * inner + i;
                                for l in 0..len {
                                    gb[l] += g[base + l * inner];
                                }
                            }
                        }
                        bs.accumulate(&gb);
                    }
                    if a.requires_grad() {
                        let mut ga = vec![0.0; xhat.len()];
                        let n = len as f64;
                        for ou in 0..outer {
                            for i in 0..inner {
                                let base = ou * len * inner + i;
                                let istd = inv_std[ou * inner + i];
                                let mut sum_dh = 0.0;
                                let mut sum_dh_h = 0.0;
                                for l in 0..len {
                                    let idx = base + l * inner;
                                    let dh = g[idx] * gain_v[l];
                                    sum_dh += dh;
                                    sum_dh_h += dh * xhat[idx];
                                }
                                for l in 0..len {
                                    let idx = base + l * inner;
                                    let dh = g[idx] * gain_v[l];
                                    ga[idx] =
                                        istd * (dh - sum_dh / n - xhat[idx] * sum_dh_h / n);
                                }
                            }
                        }
                        a.accumulate(&ga);
                    }
                }
            }));
        }
        Ok(out)
    }

    pub fn activation(&self, kind: Activation) -> Result<Tensor> {
        use Activation::*;
        if kind == Log {
            if let Some(&bad) = self.data().iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    details: format!("input contains non-positive value {bad}"),
                });
            }
        }
        let x_saved: Vec<f64> = self.to_vec();
        let data: Vec<f64> = x_saved
            .iter()
            .map(|&x| match kind {
                Relu => x.max(0.0),
                Gelu => x * kernels::norm_cdf(x),
                Sigmoid => 1.0 / (1.0 + (-x).exp()),
                Tanh => x.tanh(),
                Exp => x.exp(),
                Log => x.ln(),
            })
            .collect();
        let out = Tensor::make(data, self.shape().to_vec(), Self::out_requires(&[self]));
        if out.requires_grad() {
            let (a, o) = (self.clone(), out.clone());
            tape::record(Box::new(move || {
                if let Some(g) = o.grad() {
                    let y = o.data();
                    let ga: Vec<f64> = x_saved
                        .iter()
                        .zip(y.iter())
                        .zip(g.iter())
                        .map(|((&x, &y), &gv)| {
                            gv * match kind {
                                Relu => {
                                    if x > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Gelu => kernels::norm_cdf(x) + x * kernels::norm_pdf(x),
                                Sigmoid => y * (1.0 - y),
                                Tanh => 1.0 - y * y,
                                Exp => y,
                                Log => 1.0 / x,
                            }
                        })
                        .collect();
                    drop(y);
                    a.accumulate(&ga);
                }
            }));
        }
        Ok(out)
    }

    pub fn relu(&self) -> Tensor {
        self.activation(Activation::Relu).expect("relu is total")
    }

    pub fn gelu(&self) -> Tensor {
        self.activation(Activation::Gelu).expect("gelu is total")
    }

    pub fn sigmoid(&self) -> Tensor {
        self.activation(Activation::Sigmoid).expect("sigmoid is total")
    }

    pub fn tanh_act(&self) -> Tensor {
        self.activation(Activation::Tanh).expect("tanh is total")
    }

    /// Set positions where `mask` is false to `value` (pre-softmax masking).
    /// `mask` is indexed flat, true = keep.
    pub fn masked_fill(&self, mask: &[bool], value: f64) -> Result<Tensor> {
        if mask.len() != self.numel() {
            return Err(Error::shape(
                "masked_fill",
                format!("mask length {} vs numel {}", mask.len(), self.numel()),
            ));
        }
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &keep)| if keep { x } else { value })
            .collect();
        let out = Tensor::make(data, self.shape().to_vec(), Self::out_requires(&[self]));
        if out.requires_grad() {
            let (a, o) = (self.clone(), out.clone());
            let mask = mask.to_vec();
            tape::record(Box::new(move || {
                if let Some(g) = o.grad() {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(mask.iter())
                        .map(|(&gv, &keep)| if keep { gv } else { 0.0 })
                        .collect();
                    a.accumulate(&ga);
                }
            }));
        }
        Ok(out)
    }

    /// From a [m×n] matrix pick one element per row: out[i] = self[i, idx[i]].
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 2 || idx.len() != s[0] {
            return Err(Error::shape(
                "gather_rows",
                format!("shape {:?} with {} indices", s, idx.len()),
            ));
        }
        let (m, n) = (s[0], s[1]);
        if let Some(&bad) = idx.iter().find(|&&j| j >= n) {
            return Err(Error::Contract(format!("gather_rows index {bad} out of range {n}")));
        }
        let data: Vec<f64> = {
            let d = self.data();
            idx.iter().enumerate().map(|(i, &j)| d[i * n + j]).collect()
        };
        let out = Tensor::make(data, vec![m], Self::out_requires(&[self]));
        if out.requires_grad() {
            let (a, o) = (self.clone(), out.clone());
            let idx = idx.to_vec();
            tape::record(Box::new(move || {
                if let Some(g) = o.grad() {
                    let mut ga = vec![0.0; m * n];
                    for (i, &j) in idx.iter().enumerate() {
                        ga[i * n + j] = g[i];
                    }
                    a.accumulate(&ga);
                }
            }));
        }
        Ok(out)
    }

    /// 2-D cross-correlation. Input [c_in,h,w], kernels [c_out,c_in,kh,kw].
    pub fn conv2d(&self, kernels_t: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
        let xs = self.shape();
        let ks = kernels_t.shape();
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?} with kernels {ks:?}"),
            ));
        }
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive".to_string()));
        }
        let h_span = h + 2 * padding;
        let w_span = w + 2 * padding;
        if h_span < kh || w_span < kw || (h_span - kh) % stride != 0 || (w_span - kw) % stride != 0 {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "output size not integral: input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {padding}"
                ),
            ));
        }
        let h_out = (h_span - kh) / stride + 1;
        let w_out = (w_span - kw) / stride + 1;
        let mut data = vec![0.0; c_out * h_out * w_out];
        kernels::conv2d(
            &self.data(),
            &kernels_t.data(),
            &mut data,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            h_out,
            w_out,
        );
        let out = Tensor::make(
            data,
            vec![c_out, h_out, w_out],
            Self::out_requires(&[self, kernels_t]),
        );
        if out.requires_grad() {
            let (a, k, o) = (self.clone(), kernels_t.clone(), out.clone());
            tape::record(Box::new(move || {
                if let Some(g) = o.grad() {
                    let mut gx = vec![0.0; c_in * h * w];
                    let mut gk = vec![0.0; c_out * c_in * kh * kw];
                    kernels::conv2d_backward(
                        &a.data(),
                        &k.data(),
                        &g,
                        &mut gx,
                        &mut gk,
                        c_in,
                        h,
                        w,
                        c_out,
                        kh,
                        kw,
                        stride,
                        padding,
                        h_out,
                        w_out,
                    );
                    if a.requires_grad() {
                        a.accumulate(&gx);
                    }
                    if k.requires_grad() {
                        k.accumulate(&gk);
                    }
                }
            }));
        }
        Ok(out)
    }

    /// Fused per-track scaled dot-product attention: query row p attends the
    /// F keys/values at rows {f·n + p} of `k`/`v` (frame-major track layout).
    /// Returns (output [n×d], probabilities [n×f]). Used by the temporal
    /// stage of divided space-time attention, where per-patch slicing would
    /// otherwise dominate the cost.
    pub fn track_attention(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        n: usize,
        f: usize,
    ) -> Result<(Tensor, Tensor)> {
        let d = match q.shape() {
            [rows, d] if *rows == n => *d,
            other => {
                return Err(Error::shape(
                    "track_attention",
                    format!("q {other:?} vs n={n}"),
                ))
            }
        };
        if k.shape() != [f * n, d] || v.shape() != [f * n, d] {
            return Err(Error::shape(
                "track_attention",
                format!("k {:?} / v {:?} vs [{}, {d}]", k.shape(), v.shape(), f * n),
            ));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let mut probs = vec![0.0; n * f];
        let mut out = vec![0.0; n * d];
        {
            let (qd, kd, vd) = (q.data(), k.data(), v.data());
            let mut scores = vec![0.0; f];
            for p in 0..n {
                let q_row = &qd[p * d..(p + 1) * d];
                for (fi, s) in scores.iter_mut().enumerate() {
                    let k_row = &kd[(fi * n + p) * d..(fi * n + p + 1) * d];
                    *s = scale * q_row.iter().zip(k_row).map(|(a, b)| a * b).sum::<f64>();
                }
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (fi, s) in scores.iter().enumerate() {
                    let e = (s - max).exp();
                    probs[p * f + fi] = e;
                    total += e;
                }
                let out_row = &mut out[p * d..(p + 1) * d];
                for fi in 0..f {
                    probs[p * f + fi] /= total;
                    let w = probs[p * f + fi];
                    let v_row = &vd[(fi * n + p) * d..(fi * n + p + 1) * d];
                    for (o, &vv) in out_row.iter_mut().zip(v_row) {
                        *o += w * vv;
                    }
                }
            }
        }
        let requires = Self::out_requires(&[q, k, v]);
        let y = Tensor::make(out, vec![n, d], requires);
        let a = Tensor::make(probs, vec![n, f], requires);
        if requires {
            let (q, k, v, y, a) = (q.clone(), k.clone(), v.clone(), y.clone(), a.clone());
            tape::record(Box::new(move || {
                let gy = y.grad();
                let ga = a.grad();
                if gy.is_none() && ga.is_none() {
                    return;
                }
                let zero_y;
                let gy = match &gy {
                    Some(g) => g.as_slice(),
                    None => {
                        zero_y = vec![0.0; n * d];
                        &zero_y
                    }
                };
                let zero_a;
                let ga = match &ga {
                    Some(g) => g.as_slice(),
                    None => {
                        zero_a = vec![0.0; n * f];
                        &zero_a
                    }
                };
                let scale = 1.0 / (d as f64).sqrt();
                let probs = a.data();
                let (qd, kd, vd) = (q.data(), k.data(), v.data());
                let mut gq = vec![0.0; n * d];
                let mut gk = vec![0.0; n * f * d];
                let mut gv = vec![0.0; n * f * d];
                let mut gscore = vec![0.0; f];
                for p in 0..n {
                    let gy_row = &gy[p * d..(p + 1) * d];
                    let mut dot = 0.0;
                    for fi in 0..f {
                        let v_row = &vd[(fi * n + p) * d..(fi * n + p + 1) * d];
                        let w = probs[p * f + fi];
                        let mut s = ga[p * f + fi];
                        for (gyv, &vv) in gy_row.iter().zip(v_row) {
                            s += gyv * vv;
                        }
                        gscore[fi] = s;
                        dot += w * s;
                        let gv_row = &mut gv[(fi * n + p) * d..(fi * n + p + 1) * d];
                        for (gvv, &gyv) in gv_row.iter_mut().zip(gy_row) {
                            *gvv += w * gyv;
                        }
                    }
                    let q_row = &qd[p * d..(p + 1) * d];
                    let gq_row = &mut gq[p * d..(p + 1) * d];
                    for fi in 0..f {
                        let gs = probs[p * f + fi] * (gscore[fi] - dot) * scale;
                        if gs == 0.0 {
                            continue;
                        }
                        let k_row = &kd[(fi * n + p) * d..(fi * n + p + 1) * d];
                        let gk_row = &mut gk[(fi * n + p) * d..(fi * n + p + 1) * d];
                        for i in 0..d {
                            gq_row[i] += gs * k_row[i];
                            gk_row[i] += gs * q_row[i];
                        }
                    }
                }
                drop(probs);
                if q.requires_grad() {
                    q.accumulate(&gq);
                }
                if k.requires_grad() {
                    k.accumulate(&gk);
                }
                if v.requires_grad() {
                    v.accumulate(&gv);
                }
            }));
        }
        Ok((y, a))
    }

    /// Max pooling with square window `k`, stride `k`.
    pub fn max_pool2d(&self, k: usize) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 3 || k == 0 || s[1] % k != 0 || s[2] % k != 0 {
            return Err(Error::shape(
                "max_pool2d",
                format!("input {s:?} not divisible by window {k}"),
            ));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / k, w / k);
        let mut data = vec![0.0; c * ho * wo];
        let mut argmax = vec![0usize; c * ho * wo];
        kernels::max_pool2d(&self.data(), c, h, w, k, &mut data, &mut argmax);
        let out = Tensor::make(data, vec![c, ho, wo], Self::out_requires(&[self]));
        if out.requires_grad() {
            let (a, o) = (self.clone(), out.clone());
            let numel = self.numel();
            tape::record(Box::new(move || {
                if let Some(g) = o.grad() {
                    let mut ga = vec![0.0; numel];
                    for (i, &src) in argmax.iter().enumerate() {
                        ga[src] += g[i];
                    }
                    a.accumulate(&ga);
                }
            }));
        }
        Ok(out)
    }
}

fn permute_copy(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    if nd == 0 {
        return data.to_vec();
    }
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd - 1).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides_in: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; nd];
    for slot in out.iter_mut() {
        let mut src = 0;
        for d in 0..nd {
            src += idx[d] * out_strides_in[d];
        }
        *slot = data[src];
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

#[cfg(test)]
mod tests;
