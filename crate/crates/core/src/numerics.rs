//! Dense f64 tensors with reverse-mode differentiation.
//!
//! The tape is dynamic: every forward pass records its backward closures
//! fresh, so control flow (per-step layer dropping, per-head truncation
//! windows) can change the graph freely between steps. `Tape::backward`
//! replays the closures in reverse recording order; for a single-output
//! graph recorded in execution order that is a valid reverse topological
//! order, no sort needed.
//!
//! Broadcasting is deliberately limited to scalar-tensor and
//! row-vector-to-matrix so each backward rule stays small enough to audit
//! by eye. Everything here is checked against central finite differences
//! in the test suite.
//!
//! Tensors are `Rc` handles; cloning shares storage. Model parameters are
//! ordinary tensors with `requires_grad` set that outlive the tapes they
//! pass through, which is how gradients accumulate across a batch of
//! per-example tapes. Nothing is Send: tape and tensors live on one thread.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use crate::{Error, Result};

struct TensorInner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// N-dimensional f64 tensor handle. Most ops in this crate are defined for
/// rank 1 and 2; the shape vector itself is rank-agnostic.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorInner>>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Input(format!(
                "tensor shape {:?} wants {} values, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(TensorInner {
                shape: shape.to_vec(),
                data,
                grad: None,
                requires_grad: false,
            })),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("zeros: shape/product always consistent")
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![v; numel]).expect("filled: shape/product always consistent")
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::filled(&[1], v)
    }

    /// A leaf that wants gradients (a trainable parameter).
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (rows, cols) of a rank-2 tensor. Panics on other ranks; callers in
    /// this crate only reach it after shape validation.
    pub fn dims2(&self) -> (usize, usize) {
        let inner = self.inner.borrow();
        assert!(
            inner.shape.len() == 2,
            "dims2 on rank-{} tensor",
            inner.shape.len()
        );
        (inner.shape[0], inner.shape[1])
    }

    /// Borrow the flat data. Keep the Ref short-lived: backward closures
    /// also borrow.
    pub fn values(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert!(inner.data.len() == 1, "item on tensor of len {}", inner.data.len());
        inner.data[0]
    }

    /// Overwrite the stored values (optimizer updates, finite-difference
    /// probes). Length must match.
    pub fn set_data(&self, data: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "set_data length mismatch");
        inner.data.copy_from_slice(data);
    }

    pub fn set_at(&self, idx: usize, v: f64) {
        self.inner.borrow_mut().data[idx] = v;
    }

    pub fn at(&self, idx: usize) -> f64 {
        self.inner.borrow().data[idx]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.inner.borrow_mut().requires_grad = on;
    }

    /// Clone of the accumulated gradient, if any backward reached this
    /// tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn clear_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Add `g` into the gradient buffer (allocating zeros on first touch).
    pub fn accumulate_grad(&self, g: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), g.len(), "gradient length mismatch");
        let grad = inner.grad.get_or_insert_with(|| vec![0.0; g.len()]);
        for (dst, src) in grad.iter_mut().zip(g) {
            *dst += src;
        }
    }

}

/// Records backward closures for one forward pass, plus a forward matmul
/// FLOP counter used to cross-check the analytic cost model and two event
/// counters surfaced in training summaries.
pub struct Tape {
    ops: RefCell<Vec<Box<dyn FnOnce()>>>,
    recording: bool,
    flops: Cell<u64>,
    fallback_rows: Cell<u64>,
    alpha_clamps: Cell<u64>,
}

impl Tape {
    /// A tape that records backward closures.
    pub fn new() -> Tape {
        Tape {
            ops: RefCell::new(Vec::new()),
            recording: true,
            flops: Cell::new(0),
            fallback_rows: Cell::new(0),
            alpha_clamps: Cell::new(0),
        }
    }

    /// Forward-only tape: values and FLOP counts, no closures. Used for
    /// evaluation and finite-difference probes.
    pub fn eval() -> Tape {
        Tape {
            ops: RefCell::new(Vec::new()),
            recording: false,
            flops: Cell::new(0),
            fallback_rows: Cell::new(0),
            alpha_clamps: Cell::new(0),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// True when a backward closure should be recorded for these inputs.
    pub fn track(&self, inputs: &[&Tensor]) -> bool {
        self.recording && inputs.iter().any(|t| t.requires_grad())
    }

    /// Push a backward closure. Custom ops in other modules use this
    /// directly; closures run in reverse push order.
    pub fn push(&self, f: impl FnOnce() + 'static) {
        self.ops.borrow_mut().push(Box::new(f));
    }

    /// Count forward multiply-accumulate work (2 FLOPs per MAC convention).
    pub fn add_flops(&self, n: u64) {
        self.flops.set(self.flops.get() + n);
    }

    pub fn recorded_flops(&self) -> u64 {
        self.flops.get()
    }

    pub fn note_fallback_row(&self) {
        self.fallback_rows.set(self.fallback_rows.get() + 1);
    }

    pub fn note_fallback_rows(&self, n: u64) {
        self.fallback_rows.set(self.fallback_rows.get() + n);
    }

    pub fn fallback_rows(&self) -> u64 {
        self.fallback_rows.get()
    }

    pub fn note_alpha_clamp(&self) {
        self.alpha_clamps.set(self.alpha_clamps.get() + 1);
    }

    pub fn alpha_clamps(&self) -> u64 {
        self.alpha_clamps.get()
    }

    /// Seed d(loss)/d(loss) = 1 and replay the tape in reverse. `loss` must
    /// be a single-element tensor that was produced under this tape.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.len() != 1 {
            return Err(Error::Numeric(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if !loss.requires_grad() {
            return Err(Error::Numeric(
                "backward on a tensor with no gradient path (eval tape or detached graph)".into(),
            ));
        }
        loss.accumulate_grad(&[1.0]);
        let ops = std::mem::take(&mut *self.ops.borrow_mut());
        for op in ops.into_iter().rev() {
            op();
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn out_tensor(tape: &Tape, shape: &[usize], data: Vec<f64>, tracked: bool) -> Tensor {
    let t = Tensor::new(shape, data).expect("op output shape/len always consistent");
    if tape.recording && tracked {
        t.set_requires_grad(true);
    }
    t
}

/// Grad of `out`, or None when this branch never reached the loss.
fn upstream(out: &Tensor) -> Option<Vec<f64>> {
    out.grad()
}

impl Tape {
    /// Matrix product: [m x k] . [k x n] -> [m x n].
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (m, k) = (ash[0], ash[1]);
        let n = bsh[1];
        let mut c = vec![0.0; m * n];
        {
            let av = a.values();
            let bv = b.values();
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let crow = &mut c[i * n..(i + 1) * n];
                    for j in 0..n {
                        crow[j] += aip * brow[j];
                    }
                }
            }
        }
        self.add_flops(2 * (m * k * n) as u64);
        let tracked = self.track(&[a, b]);
        let out = out_tensor(self, &[m, n], c, tracked);
        if tracked {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.push(move || {
                let Some(g) = upstream(&o) else { return };
                // Copies first so a == b aliasing cannot double-borrow.
                let av = a.to_vec();
                let bv = b.to_vec();
                if a.requires_grad() {
                    // dA = g . B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    // dB = A^T . g
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let aip = av[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                    b.accumulate_grad(&db);
                }
            });
        }
        Ok(out)
    }

    fn elementwise2(
        &self,
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        // (g, a_i, b_i) -> (da_i, db_i)
        df: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Result<Tensor> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash != bsh {
            return Err(Error::ShapeMismatch {
                op,
                lhs: ash,
                rhs: bsh,
            });
        }
        let data: Vec<f64> = {
            let av = a.values();
            let bv = b.values();
            av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        let tracked = self.track(&[a, b]);
        let out = out_tensor(self, &ash, data, tracked);
        if tracked {
            let (a, b, o) = (a.clone(), b.clone(), out.clone());
            self.push(move || {
                let Some(g) = upstream(&o) else { return };
                let av = a.to_vec();
                let bv = b.to_vec();
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for i in 0..g.len() {
                    let (x, y) = df(g[i], av[i], bv[i]);
                    da[i] = x;
                    db[i] = y;
                }
                if a.requires_grad() {
                    a.accumulate_grad(&da);
                }
                if b.requires_grad() {
                    b.accumulate_grad(&db);
                }
            });
        }
        Ok(out)
    }

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise2("add", a, b, |x, y| x + y, |g, _, _| (g, g))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise2("sub", a, b, |x, y| x - y, |g, _, _| (g, -g))
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.elementwise2("mul", a, b, |x, y| x * y, |g, x, y| (g * y, g * x))
    }

    /// Broadcast a length-n row vector over every row of [m x n].
    pub fn add_row(&self, a: &Tensor, row: &Tensor) -> Result<Tensor> {
        let ash = a.shape();
        let rsh = row.shape();
        if ash.len() != 2 || rsh.len() != 1 || rsh[0] != ash[1] {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                lhs: ash,
                rhs: rsh,
            });
        }
        let (m, n) = (ash[0], ash[1]);
        let data: Vec<f64> = {
            let av = a.values();
            let rv = row.values();
            (0..m * n).map(|i| av[i] + rv[i % n]).collect()
        };
        let tracked = self.track(&[a, row]);
        let out = out_tensor(self, &[m, n], data, tracked);
        if tracked {
            let (a, row, o) = (a.clone(), row.clone(), out.clone());
            self.push(move || {
                let Some(g) = upstream(&o) else { return };
                if a.requires_grad() {
                    a.accumulate_grad(&g);
                }
                if row.requires_grad() {
                    let mut dr = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dr[j] += g[i * n + j];
                        }
                    }
                    row.accumulate_grad(&dr);
                }
            });
        }
        Ok(out)
    }

    /// Multiply by a compile-time constant (no gradient for the constant).
    pub fn scale(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let sh = a.shape();
        let data: Vec<f64> = a.values().iter().map(|&x| x * c).collect();
        let tracked = self.track(&[a]);
        let out = out_tensor(self, &sh, data, tracked);
        if tracked {
            let (a, o) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = upstream(&o) else { return };
                let da: Vec<f64> = g.iter().map(|&x| x * c).collect();
                a.accumulate_grad(&da);
            });
        }
        Ok(out)
    }

    pub fn add_scalar(&self, a: &Tensor, c: f64) -> Result<Tensor> {
        let sh = a.shape();
        let data: Vec<f64> = a.values().iter().map(|&x| x + c).collect();
        let tracked = self.track(&[a]);
        let out = out_tensor(self, &sh, data, tracked);
        if tracked {
            let (a, o) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = upstream(&o) else { return };
                a.accumulate_grad(&g);
            });
        }
        Ok(out)
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        let sh = a.shape();
        if sh.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: sh,
                rhs: vec![],
            });
        }
        let (m, n) = (sh[0], sh[1]);
        let mut data = vec![0.0; m * n];
        {
            let av = a.values();
            for i in 0..m {
                for j in 0..n {
                    data[j * m + i] = av[i * n + j];
                }
            }
        }
        let tracked = self.track(&[a]);
        let out = out_tensor(self, &[n, m], data, tracked);
        if tracked {
            let (a, o) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = upstream(&o) else { return };
                let mut da = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                a.accumulate_grad(&da);
            });
        }
        Ok(out)
    }

    pub fn reshape(&self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != a.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: a.shape(),
                rhs: shape.to_vec(),
            });
        }
        let tracked = self.track(&[a]);
        let out = out_tensor(self, shape, a.to_vec(), tracked);
        if tracked {
            let (a, o) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = upstream(&o) else { return };
                a.accumulate_grad(&g);
            });
        }
        Ok(out)
    }

    /// Rows [r0, r0+rows) of a rank-2 tensor.
    pub fn row_slice(&self, a: &Tensor, r0: usize, rows: usize) -> Result<Tensor> {
        let sh = a.shape();
        if sh.len() != 2 || r0 + rows > sh[0] {
            return Err(Error::ShapeMismatch {
                op: "row_slice",
                lhs: sh,
                rhs: vec![r0, rows],
            });
        }
        let n = sh[1];
        let data = a.values()[r0 * n..(r0 + rows) * n].to_vec();
        let tracked = self.track(&[a]);
        let out = out_tensor(self, &[rows, n], data, tracked);
        if tracked {
            let (a, o) = (a.clone(), out.clone());
            let total = sh[0] * n;
            self.push(move || {
                let Some(g) = upstream(&o) else { return };
                let mut da = vec![0.0; total];
                da[r0 * n..(r0 + rows) * n].copy_from_slice(&g);
                a.accumulate_grad(&da);
            });
        }
        Ok(out)
    }

    /// Columns [c0, c0+cols) of a rank-2 tensor (per-head slicing).
    pub fn col_slice(&self, a: &Tensor, c0: usize, cols: usize) -> Result<Tensor> {
        let sh = a.shape();
        if sh.len() != 2 || c0 + cols > sh[1] {
            return Err(Error::ShapeMismatch {
                op: "col_slice",
                lhs: sh,
                rhs: vec![c0, cols],
            });
        }
        let (m, n) = (sh[0], sh[1]);
        let mut data = vec![0.0; m * cols];
        {
            let av = a.values();
            for i in 0..m {
                data[i * cols..(i + 1) * cols]
                    .copy_from_slice(&av[i * n + c0..i * n + c0 + cols]);
            }
        }
        let tracked = self.track(&[a]);
        let out = out_tensor(self, &[m, cols], data, tracked);
        if tracked {
            let (a, o) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = upstream(&o) else { return };
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    da[i * n + c0..i * n + c0 + cols]
                        .copy_from_slice(&g[i * cols..(i + 1) * cols]);
                }
                a.accumulate_grad(&da);
            });
        }
        Ok(out)
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Input("concat_cols of zero tensors".into()));
        }
        let m = parts[0].shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let sh = p.shape();
            if sh.len() != 2 || sh[0] != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape(),
                    rhs: sh,
                });
            }
            widths.push(sh[1]);
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let pv = p.values();
            for i in 0..m {
                data[i * n + off..i * n + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let tracked = self.track(&refs);
        let out = out_tensor(self, &[m, n], data, tracked);
        if tracked {
            let parts: Vec<Tensor> = parts.to_vec();
            let o = out.clone();
            self.push(move || {
                let Some(g) = upstream(&o) else { return };
                let mut off = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    if p.requires_grad() {
                        let mut dp = vec![0.0; m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&g[i * n + off..i * n + off + w]);
                        }
                        p.accumulate_grad(&dp);
                    }
                    off += w;
                }
            });
        }
        Ok(out)
    }

    /// Row sums of [m x n] -> [m].
    pub fn row_sum(&self, a: &Tensor) -> Result<Tensor> {
        let sh = a.shape();
        if sh.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "row_sum",
                lhs: sh,
                rhs: vec![],
            });
        }
        let (m, n) = (sh[0], sh[1]);
        let data: Vec<f64> = {
            let av = a.values();
            (0..m).map(|i| av[i * n..(i + 1) * n].iter().sum()).collect()
        };
        let tracked = self.track(&[a]);
        let out = out_tensor(self, &[m], data, tracked);
        if tracked {
            let (a, o) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = upstream(&o) else { return };
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[i];
                    }
                }
                a.accumulate_grad(&da);
            });
        }
        Ok(out)
    }

    /// Mean of every element -> scalar [1].
    pub fn mean_all(&self, a: &Tensor) -> Result<Tensor> {
        let len = a.len();
        if len == 0 {
            return Err(Error::Input("mean_all of empty tensor".into()));
        }
        let mean = a.values().iter().sum::<f64>() / len as f64;
        let tracked = self.track(&[a]);
        let out = out_tensor(self, &[1], vec![mean], tracked);
        if tracked {
            let (a, o) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = upstream(&o) else { return };
                let da = vec![g[0] / len as f64; len];
                a.accumulate_grad(&da);
            });
        }
        Ok(out)
    }

    /// Column means of [m x n] -> [1 x n] (mean pooling over positions).
    pub fn mean_rows(&self, a: &Tensor) -> Result<Tensor> {
        let sh = a.shape();
        if sh.len() != 2 || sh[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "mean_rows",
                lhs: sh,
                rhs: vec![],
            });
        }
        let (m, n) = (sh[0], sh[1]);
        let mut data = vec![0.0; n];
        {
            let av = a.values();
            for i in 0..m {
                for j in 0..n {
                    data[j] += av[i * n + j];
                }
            }
        }
        for v in &mut data {
            *v /= m as f64;
        }
        let tracked = self.track(&[a]);
        let out = out_tensor(self, &[1, n], data, tracked);
        if tracked {
            let (a, o) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = upstream(&o) else { return };
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j] / m as f64;
                    }
                }
                a.accumulate_grad(&da);
            });
        }
        Ok(out)
    }

    /// Row-wise softmax with max-shift. Rejects non-finite input.
    pub fn softmax_rows(&self, a: &Tensor) -> Result<Tensor> {
        let sh = a.shape();
        if sh.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax_rows",
                lhs: sh,
                rhs: vec![],
            });
        }
        let (m, n) = (sh[0], sh[1]);
        if n == 0 {
            return Err(Error::Input("softmax_rows over zero columns".into()));
        }
        let mut data = vec![0.0; m * n];
        {
            let av = a.values();
            if av.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("softmax_rows"));
            }
            for i in 0..m {
                let row = &av[i * n..(i + 1) * n];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (row[j] - mx).exp();
                    data[i * n + j] = e;
                    sum += e;
                }
                for j in 0..n {
                    data[i * n + j] /= sum;
                }
            }
        }
        let tracked = self.track(&[a]);
        let out = out_tensor(self, &[m, n], data, tracked);
        if tracked {
            let (a, o) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = upstream(&o) else { return };
                let p = o.to_vec();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    let mut dot = 0.0;
                    for j in 0..n {
                        dot += g[i * n + j] * p[i * n + j];
                    }
                    for j in 0..n {
                        da[i * n + j] = p[i * n + j] * (g[i * n + j] - dot);
                    }
                }
                a.accumulate_grad(&da);
            });
        }
        Ok(out)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: &Tensor) -> Result<Tensor> {
        const C: f64 = 0.7978845608028654; // sqrt(2/pi)
        const K: f64 = 0.044715;
        let sh = a.shape();
        let data: Vec<f64> = a
            .values()
            .iter()
            .map(|&x| {
                let u = C * (x + K * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            })
            .collect();
        let tracked = self.track(&[a]);
        let out = out_tensor(self, &sh, data, tracked);
        if tracked {
            let (a, o) = (a.clone(), out.clone());
            self.push(move || {
                let Some(g) = upstream(&o) else { return };
                let xv = a.to_vec();
                let da: Vec<f64> = xv
                    .iter()
                    .zip(&g)
                    .map(|(&x, &gi)| {
                        let u = C * (x + K * x * x * x);
                        let t = u.tanh();
                        let sech2 = 1.0 - t * t;
                        let du = C * (1.0 + 3.0 * K * x * x);
                        gi * (0.5 * (1.0 + t) + 0.5 * x * sech2 * du)
                    })
                    .collect();
                a.accumulate_grad(&da);
            });
        }
        Ok(out)
    }

    /// Per-row layer norm with learned gain/bias.
    pub fn layer_norm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let sh = x.shape();
        if sh.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: sh,
                rhs: vec![],
            });
        }
        let (m, n) = (sh[0], sh[1]);
        if gamma.shape() != vec![n] || beta.shape() != vec![n] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![n],
                rhs: gamma.shape(),
            });
        }
        let mut data = vec![0.0; m * n];
        let mut xhat = vec![0.0; m * n];
        let mut inv_sigma = vec![0.0; m];
        {
            let xv = x.values();
            let gv = gamma.values();
            let bv = beta.values();
            for i in 0..m {
                let row = &xv[i * n..(i + 1) * n];
                let mu = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_sigma[i] = inv;
                for j in 0..n {
                    let xh = (row[j] - mu) * inv;
                    xhat[i * n + j] = xh;
                    data[i * n + j] = gv[j] * xh + bv[j];
                }
            }
        }
        let tracked = self.track(&[x, gamma, beta]);
        let out = out_tensor(self, &[m, n], data, tracked);
        if tracked {
            let (x, gamma, beta, o) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
            self.push(move || {
                let Some(g) = upstream(&o) else { return };
                let gv = gamma.to_vec();
                if beta.requires_grad() {
                    let mut db = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += g[i * n + j];
                        }
                    }
                    beta.accumulate_grad(&db);
                }
                if gamma.requires_grad() {
                    let mut dg = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                    gamma.accumulate_grad(&dg);
                }
                if x.requires_grad() {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        // dxhat = g * gamma; dx = (dxhat - mean(dxhat)
                        //         - xhat * mean(dxhat*xhat)) / sigma
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..n {
                            let dxh = g[i * n + j] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xhat[i * n + j];
                        }
                        mean_dxh /= n as f64;
                        mean_dxh_xh /= n as f64;
                        for j in 0..n {
                            let dxh = g[i * n + j] * gv[j];
                            dx[i * n + j] =
                                (dxh - mean_dxh - xhat[i * n + j] * mean_dxh_xh) * inv_sigma[i];
                        }
                    }
                    x.accumulate_grad(&dx);
                }
            });
        }
        Ok(out)
    }

    /// Mean negative log-likelihood of integer targets under row-wise
    /// softmax of the logits. Fused for stability (log-sum-exp shift).
    pub fn cross_entropy_logits(&self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let sh = logits.shape();
        if sh.len() != 2 || sh[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_logits",
                lhs: sh,
                rhs: vec![targets.len()],
            });
        }
        let (m, c) = (sh[0], sh[1]);
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Input(format!(
                "target class {t} out of range for {c} classes"
            )));
        }
        let mut probs = vec![0.0; m * c];
        let mut loss = 0.0;
        {
            let lv = logits.values();
            if lv.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("cross_entropy_logits"));
            }
            for i in 0..m {
                let row = &lv[i * c..(i + 1) * c];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..c {
                    let e = (row[j] - mx).exp();
                    probs[i * c + j] = e;
                    sum += e;
                }
                for j in 0..c {
                    probs[i * c + j] /= sum;
                }
                loss += -(row[targets[i]] - mx - sum.ln());
            }
        }
        loss /= m as f64;
        let tracked = self.track(&[logits]);
        let out = out_tensor(self, &[1], vec![loss], tracked);
        if tracked {
            let (logits, o) = (logits.clone(), out.clone());
            let targets = targets.to_vec();
            self.push(move || {
                let Some(g) = upstream(&o) else { return };
                let scale = g[0] / m as f64;
                let mut dl = vec![0.0; m * c];
                for i in 0..m {
                    for j in 0..c {
                        let onehot = if j == targets[i] { 1.0 } else { 0.0 };
                        dl[i * c + j] = (probs[i * c + j] - onehot) * scale;
                    }
                }
                logits.accumulate_grad(&dl);
            });
        }
        Ok(out)
    }

    /// Gather rows of an embedding table: [V x d], ids -> [len(ids) x d].
    pub fn embedding(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let sh = table.shape();
        if sh.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                lhs: sh,
                rhs: vec![],
            });
        }
        let (v, d) = (sh[0], sh[1]);
        if let Some(&id) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Input(format!(
                "embedding id {id} out of range for table of {v} rows"
            )));
        }
        if ids.is_empty() {
            return Err(Error::Input("embedding lookup with empty id list".into()));
        }
        let t = ids.len();
        let mut data = vec![0.0; t * d];
        {
            let tv = table.values();
            for (i, &id) in ids.iter().enumerate() {
                data[i * d..(i + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
            }
        }
        let tracked = self.track(&[table]);
        let out = out_tensor(self, &[t, d], data, tracked);
        if tracked {
            let (table, o) = (table.clone(), out.clone());
            let ids = ids.to_vec();
            self.push(move || {
                let Some(g) = upstream(&o) else { return };
                let mut dt = vec![0.0; v * d];
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[i * d + j];
                    }
                }
                table.accumulate_grad(&dt);
            });
        }
        Ok(out)
    }
}

/// Max |a - b| over two equal-length slices. Test helper used widely.
pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_abs_diff length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut r = CounterRng::from_key(&[seed, 0xA11CE]);
        let n: usize = shape.iter().product();
        // Inputs in [-2, 2] per the gradient-check contract.
        let data: Vec<f64> = (0..n).map(|_| r.uniform() * 4.0 - 2.0).collect();
        let t = Tensor::param(shape, data).unwrap();
        t
    }

    #[test]
    fn matmul_identity_passes_through() {
        let tape = Tape::new();
        let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let c = tape.matmul(&eye, &a).unwrap();
        assert_eq!(c.to_vec(), a.to_vec());
    }

    #[test]
    fn matmul_projector_selects_row() {
        // [[0,1],[0,0]] . A keeps row 1 of A in row 0 and zeroes row 1.
        let tape = Tape::new();
        let p = Tensor::new(&[2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = tape.matmul(&p, &a).unwrap();
        assert_eq!(c.to_vec(), vec![3.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "got: {msg}");
    }

    #[test]
    fn softmax_uniform_rows() {
        let tape = Tape::new();
        let z = Tensor::new(&[2, 4], vec![0.0; 8]).unwrap();
        let p = tape.softmax_rows(&z).unwrap();
        for &v in p.values().iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        // Constant shift changes nothing.
        let z2 = Tensor::new(&[1, 4], vec![3.5; 4]).unwrap();
        let p2 = tape.softmax_rows(&z2).unwrap();
        for &v in p2.values().iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_two_logits_matches_exponential_formula() {
        let tape = Tape::new();
        let z = Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap();
        let p = tape.softmax_rows(&z).unwrap();
        let e = 1f64.exp();
        let expect = [e / (e + 1.0), 1.0 / (e + 1.0)];
        assert!(max_abs_diff(&p.to_vec(), &expect) < 1e-15);
    }

    #[test]
    fn softmax_rejects_nan() {
        let tape = Tape::new();
        let z = Tensor::new(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(
            tape.softmax_rows(&z),
            Err(Error::NonFinite("softmax_rows"))
        ));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_log_c() {
        let tape = Tape::new();
        let logits = Tensor::new(&[1, 8], vec![0.0; 8]).unwrap();
        let loss = tape.cross_entropy_logits(&logits, &[3]).unwrap();
        assert!((loss.item() - (8f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let tape = Tape::new();
        let logits = Tensor::new(&[1, 4], vec![0.0; 4]).unwrap();
        assert!(tape.cross_entropy_logits(&logits, &[4]).is_err());
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let tape = Tape::new();
        let table = Tensor::zeros(&[4, 3]);
        assert!(tape.embedding(&table, &[4]).is_err());
    }

    #[test]
    fn backward_accumulates_across_tapes() {
        // Two per-example tapes feeding the same parameter must sum their
        // gradients, which is how batching works in the training loop.
        let w = Tensor::param(&[1, 1], vec![2.0]).unwrap();
        for _ in 0..2 {
            let tape = Tape::new();
            let x = Tensor::new(&[1, 1], vec![3.0]).unwrap();
            let y = tape.matmul(&x, &w).unwrap();
            let loss = tape.mean_all(&y).unwrap();
            tape.backward(&loss).unwrap();
        }
        assert_eq!(w.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn tape_rebuild_gives_identical_gradients() {
        // Same graph built twice from scratch: bitwise-equal grads.
        let run = || {
            let a = rand_tensor(&[3, 4], 11);
            let b = rand_tensor(&[4, 2], 12);
            let tape = Tape::new();
            let c = tape.matmul(&a, &b).unwrap();
            let s = tape.softmax_rows(&c).unwrap();
            let loss = tape.mean_all(&s).unwrap();
            tape.backward(&loss).unwrap();
            (a.grad().unwrap(), b.grad().unwrap())
        };
        let (ga1, gb1) = run();
        let (ga2, gb2) = run();
        assert_eq!(ga1, ga2);
        assert_eq!(gb1, gb2);
    }

    #[test]
    fn eval_tape_records_nothing() {
        let tape = Tape::eval();
        let a = rand_tensor(&[2, 2], 5);
        let b = tape.softmax_rows(&a).unwrap();
        assert!(!b.requires_grad());
        let loss = tape.mean_all(&b).unwrap();
        assert!(tape.backward(&loss).is_err());
    }

    #[test]
    fn matmul_flops_are_counted() {
        let tape = Tape::new();
        let a = Tensor::zeros(&[3, 4]);
        let b = Tensor::zeros(&[4, 5]);
        tape.matmul(&a, &b).unwrap();
        assert_eq!(tape.recorded_flops(), 2 * 3 * 4 * 5);
    }

    #[test]
    fn aliased_inputs_do_not_double_borrow() {
        // x * x and x . x^T exercise the copy-before-accumulate discipline.
        let x = rand_tensor(&[2, 2], 77);
        let tape = Tape::new();
        let sq = tape.mul(&x, &x).unwrap();
        let xt = tape.transpose(&x).unwrap();
        let prod = tape.matmul(&x, &xt).unwrap();
        let sum = tape.add(&sq, &prod).unwrap();
        let loss = tape.mean_all(&sum).unwrap();
        tape.backward(&loss).unwrap();
        assert!(x.grad().is_some());
    }
}
