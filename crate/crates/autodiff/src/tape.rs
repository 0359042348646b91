//! Wengert tape: every primitive appends a node holding its output value and
//! whatever it needs for the backward pass. `backward` walks the nodes in
//! exact reverse order of execution, summing contributions when a value has
//! several consumers.

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Bcast {
    Same,
    Row,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
}

pub(crate) type BackwardFn = dyn Fn(&Tensor, &[&Tensor]) -> Vec<Option<Tensor>>;

pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinKind,
        bcast: Bcast,
    },
    AddScalar {
        a: Var,
    },
    MulScalar {
        a: Var,
        c: f64,
    },
    Relu {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    Softmax {
        a: Var,
        axis: usize,
    },
    GradReversal {
        a: Var,
        weight: f64,
    },
    MaskedMean {
        a: Var,
        rows: Vec<usize>,
    },
    Cosine {
        u: Var,
        v: Var,
        nu: f64,
        nv: f64,
    },
    NormalizeRows {
        a: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    Bce {
        pred: Var,
        target: Var,
        eps: f64,
    },
    Mse {
        a: Var,
        b: Var,
    },
    Dropout {
        a: Var,
        mask: Vec<f64>,
    },
    Transpose {
        a: Var,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    Gather {
        a: Var,
        idx: Vec<usize>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    Custom {
        inputs: Vec<Var>,
        backward: Box<BackwardFn>,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when `v` does not influence
    /// the loss through a differentiable path.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but returns zeros of the right shape when absent.
    pub fn get_or_zeros(&self, v: Var, tape: &Tape) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }
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

    /// Drops every node recorded after the first `len`. Vars at or past
    /// `len` become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (masks, targets, inputs).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records an op whose backward rule is supplied by the caller. The
    /// closure receives the upstream gradient and the input values and returns
    /// one optional gradient per input.
    pub fn custom<F>(&mut self, inputs: &[Var], value: Tensor, backward: F) -> Var
    where
        F: Fn(&Tensor, &[&Tensor]) -> Vec<Option<Tensor>> + 'static,
    {
        let rg = self.any_grad(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            rg,
        )
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let seed = &self.nodes[loss.0].value;
        if seed.numel() != 1 {
            return Err(AutodiffError::Dimension {
                op: "backward",
                left: seed.shape().to_vec(),
                right: vec![],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(seed.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn accumulate_with<F>(&self, grads: &mut [Option<Tensor>], v: Var, f: F)
    where
        F: FnOnce(&mut [f64]),
    {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (n, k) = av.dims2().unwrap();
                let m = bv.shape()[1];
                // dA = g · Bᵀ
                self.accumulate_with(grads, *a, |da| {
                    gemm(n, m, k, g.data(), m, 1, bv.data(), 1, m, da, k, 1, 1.0);
                });
                // dB = Aᵀ · g
                self.accumulate_with(grads, *b, |db| {
                    gemm(k, n, m, av.data(), 1, k, g.data(), m, 1, db, m, 1, 1.0);
                });
            }
            Op::Binary { a, b, kind, bcast } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let cols = bv.numel();
                let bidx = |i: usize| match bcast {
                    Bcast::Same => i,
                    Bcast::Row => i % cols,
                };
                match kind {
                    BinKind::Add | BinKind::Sub => {
                        self.accumulate(grads, *a, g.clone());
                        let sign = if *kind == BinKind::Add { 1.0 } else { -1.0 };
                        self.accumulate_with(grads, *b, |db| {
                            for (i, gi) in g.data().iter().enumerate() {
                                db[bidx(i)] += sign * gi;
                            }
                        });
                    }
                    BinKind::Mul => {
                        self.accumulate_with(grads, *a, |da| {
                            for (i, gi) in g.data().iter().enumerate() {
                                da[i] += gi * bv.data()[bidx(i)];
                            }
                        });
                        self.accumulate_with(grads, *b, |db| {
                            for (i, gi) in g.data().iter().enumerate() {
                                db[bidx(i)] += gi * av.data()[i];
                            }
                        });
                    }
                }
            }
            Op::AddScalar { a } => self.accumulate(grads, *a, g.clone()),
            Op::MulScalar { a, c } => {
                self.accumulate_with(grads, *a, |da| {
                    for (d, gi) in da.iter_mut().zip(g.data()) {
                        *d += c * gi;
                    }
                });
            }
            Op::Relu { a } => {
                self.accumulate_with(grads, *a, |da| {
                    for ((d, gi), y) in da.iter_mut().zip(g.data()).zip(out.data()) {
                        if *y > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Sigmoid { a } => {
                self.accumulate_with(grads, *a, |da| {
                    for ((d, gi), y) in da.iter_mut().zip(g.data()).zip(out.data()) {
                        *d += gi * y * (1.0 - y);
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let (r, c) = out.dims2().unwrap();
                let y = out.data();
                let gd = g.data();
                self.accumulate_with(grads, *a, |da| {
                    if *axis == 1 {
                        for i in 0..r {
                            let row = i * c..(i + 1) * c;
                            let dot: f64 = gd[row.clone()].iter().zip(&y[row.clone()]).map(|(p, q)| p * q).sum();
                            for j in row {
                                da[j] += y[j] * (gd[j] - dot);
                            }
                        }
                    } else {
                        for j in 0..c {
                            let dot: f64 = (0..r).map(|i| gd[i * c + j] * y[i * c + j]).sum();
                            for i in 0..r {
                                let idx = i * c + j;
                                da[idx] += y[idx] * (gd[idx] - dot);
                            }
                        }
                    }
                });
            }
            Op::GradReversal { a, weight } => {
                self.accumulate_with(grads, *a, |da| {
                    for (d, gi) in da.iter_mut().zip(g.data()) {
                        *d += -weight * gi;
                    }
                });
            }
            Op::MaskedMean { a, rows } => {
                let d = out.numel();
                let inv = 1.0 / rows.len() as f64;
                self.accumulate_with(grads, *a, |da| {
                    for &r in rows {
                        for (j, gj) in g.data().iter().enumerate() {
                            da[r * d + j] += gj * inv;
                        }
                    }
                });
            }
            Op::Cosine { u, v, nu, nv } => {
                let uv = self.value(*u).data();
                let vv = self.value(*v).data();
                let c = out.item();
                let gs = g.item();
                let denom = nu * nv;
                self.accumulate_with(grads, *u, |du| {
                    for i in 0..uv.len() {
                        du[i] += gs * (vv[i] / denom - c * uv[i] / (nu * nu));
                    }
                });
                self.accumulate_with(grads, *v, |dv| {
                    for i in 0..vv.len() {
                        dv[i] += gs * (uv[i] / denom - c * vv[i] / (nv * nv));
                    }
                });
            }
            Op::NormalizeRows { a, norms, eps } => {
                let (r, c) = out.dims2().unwrap();
                let y = out.data();
                let gd = g.data();
                self.accumulate_with(grads, *a, |da| {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let norm = norms[i];
                        if norm > *eps {
                            let dot: f64 = gd[row.clone()].iter().zip(&y[row.clone()]).map(|(p, q)| p * q).sum();
                            for j in row {
                                da[j] += (gd[j] - y[j] * dot) / norm;
                            }
                        } else {
                            for j in row {
                                da[j] += gd[j] / eps;
                            }
                        }
                    }
                });
            }
            Op::Conv1d { x, kernel, bias } => {
                let xv = self.value(*x);
                let kv = self.value(*kernel);
                let (n, cin) = xv.dims2().unwrap();
                let k = kv.shape()[0];
                let cout = kv.shape()[2];
                let pad = (k / 2) as isize;
                let gd = g.data();
                self.accumulate_with(grads, *x, |dx| {
                    for j in 0..k {
                        let Some((t0, t1, s0)) = conv_rows(n, j as isize - pad) else {
                            continue;
                        };
                        let kj = &kv.data()[j * cin * cout..(j + 1) * cin * cout];
                        // dx[s0..] += g[t0..t1] · K_jᵀ
                        gemm(
                            t1 - t0,
                            cout,
                            cin,
                            &gd[t0 * cout..],
                            cout,
                            1,
                            kj,
                            1,
                            cout,
                            &mut dx[s0 * cin..],
                            cin,
                            1,
                            1.0,
                        );
                    }
                });
                self.accumulate_with(grads, *kernel, |dk| {
                    for j in 0..k {
                        let Some((t0, t1, s0)) = conv_rows(n, j as isize - pad) else {
                            continue;
                        };
                        let dkj = &mut dk[j * cin * cout..(j + 1) * cin * cout];
                        // dK_j += x[s0..]ᵀ · g[t0..t1]
                        gemm(
                            cin,
                            t1 - t0,
                            cout,
                            &xv.data()[s0 * cin..],
                            1,
                            cin,
                            &gd[t0 * cout..],
                            cout,
                            1,
                            dkj,
                            cout,
                            1,
                            1.0,
                        );
                    }
                });
                self.accumulate_with(grads, *bias, |db| {
                    for t in 0..n {
                        for o in 0..cout {
                            db[o] += gd[t * cout + o];
                        }
                    }
                });
            }
            Op::Bce { pred, target, eps } => {
                let p = self.value(*pred).data();
                let t = self.value(*target).data();
                let scale = g.item() / p.len() as f64;
                self.accumulate_with(grads, *pred, |dp| {
                    for i in 0..p.len() {
                        if p[i] > *eps && p[i] < 1.0 - eps {
                            dp[i] += scale * (-t[i] / p[i] + (1.0 - t[i]) / (1.0 - p[i]));
                        }
                    }
                });
                self.accumulate_with(grads, *target, |dt| {
                    for i in 0..p.len() {
                        let pc = p[i].clamp(*eps, 1.0 - eps);
                        dt[i] += scale * (-(pc.ln()) + (1.0 - pc).ln());
                    }
                });
            }
            Op::Mse { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let scale = 2.0 * g.item() / av.len() as f64;
                self.accumulate_with(grads, *a, |da| {
                    for i in 0..av.len() {
                        da[i] += scale * (av[i] - bv[i]);
                    }
                });
                self.accumulate_with(grads, *b, |db| {
                    for i in 0..av.len() {
                        db[i] -= scale * (av[i] - bv[i]);
                    }
                });
            }
            Op::Dropout { a, mask } => {
                self.accumulate_with(grads, *a, |da| {
                    for ((d, gi), m) in da.iter_mut().zip(g.data()).zip(mask) {
                        *d += gi * m;
                    }
                });
            }
            Op::Transpose { a } => {
                let (r, c) = out.dims2().unwrap();
                self.accumulate_with(grads, *a, |da| {
                    // out is r×c, input is c×r
                    for i in 0..r {
                        for j in 0..c {
                            da[j * r + i] += g.data()[i * c + j];
                        }
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let (r, w) = out.dims2().unwrap();
                let c = self.value(*a).shape()[1];
                self.accumulate_with(grads, *a, |da| {
                    for i in 0..r {
                        for j in 0..w {
                            da[i * c + start + j] += g.data()[i * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let (r, total) = out.dims2().unwrap();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).shape()[1];
                    self.accumulate_with(grads, *p, |dp| {
                        for i in 0..r {
                            for j in 0..w {
                                dp[i * w + j] += g.data()[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    self.accumulate_with(grads, *p, |dp| {
                        for (d, gi) in dp.iter_mut().zip(&g.data()[off..off + len]) {
                            *d += gi;
                        }
                    });
                    off += len;
                }
            }
            Op::Gather { a, idx } => {
                self.accumulate_with(grads, *a, |da| {
                    for (k, &i) in idx.iter().enumerate() {
                        da[i] += g.data()[k];
                    }
                });
            }
            Op::Sum { a } => {
                let gs = g.item();
                self.accumulate_with(grads, *a, |da| da.iter_mut().for_each(|d| *d += gs));
            }
            Op::Mean { a } => {
                let n = self.value(*a).numel() as f64;
                let gs = g.item() / n;
                self.accumulate_with(grads, *a, |da| da.iter_mut().for_each(|d| *d += gs));
            }
            Op::Custom { inputs, backward } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let contribs = backward(g, &vals);
                for (v, c) in inputs.iter().zip(contribs) {
                    if let Some(c) = c {
                        self.accumulate(grads, *v, c);
                    }
                }
            }
        }
    }
}

/// For a temporal shift `s`, the output rows `t0..t1` that read valid input
/// rows starting at `s0 = t0 + s`.
pub(crate) fn conv_rows(n: usize, s: isize) -> Option<(usize, usize, usize)> {
    let t0 = (-s).max(0) as usize;
    let t1 = (n as isize - s).min(n as isize);
    if t1 <= t0 as isize {
        return None;
    }
    Some((t0, t1 as usize, (t0 as isize + s) as usize))
}

/// `c (m×n) = a (m×k) · b (k×n) + beta·c`, all strided.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!(a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted extents keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
