//! Forward constructors for every primitive. Each validates shapes, computes
//! the output and records the node; the matching backward rule lives in
//! `tape.rs`.

use rand::Rng;

use crate::error::{dim_err, AutodiffError, Result};
use crate::tape::{conv_rows, gemm, Bcast, BinKind, Op, Tape, Var};
use crate::tensor::Tensor;

/// Norm floor used by cosine similarity and row normalisation.
pub const NORM_EPS: f64 = 1e-8;
/// Probability clamp applied before the logs of the BCE loss.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Sub,
}

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (n, k) = av.dims2()?;
        let (k2, m) = bv.dims2()?;
        if k != k2 {
            return dim_err("matmul", av.shape(), bv.shape());
        }
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, av.data(), k, 1, bv.data(), m, 1, &mut out, m, 1, 0.0);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul { a, b }, rg))
    }

    /// `a ∘ b` for equal shapes, or with `b` a `1×cols` row added to every row of `a`.
    pub fn elementwise(&mut self, a: Var, b: Var, kind: Elementwise) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let bcast = if av.shape() == bv.shape() {
            Bcast::Same
        } else {
            match (av.shape(), bv.shape()) {
                ([_, c], [1, c2]) if c == c2 => Bcast::Row,
                _ => return dim_err("elementwise", av.shape(), bv.shape()),
            }
        };
        let cols = bv.numel();
        let f: fn(f64, f64) -> f64 = match kind {
            Elementwise::Add => |x, y| x + y,
            Elementwise::Sub => |x, y| x - y,
            Elementwise::Mul => |x, y| x * y,
        };
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let y = match bcast {
                    Bcast::Same => bv.data()[i],
                    Bcast::Row => bv.data()[i % cols],
                };
                f(*x, y)
            })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let kind = match kind {
            Elementwise::Add => BinKind::Add,
            Elementwise::Sub => BinKind::Sub,
            Elementwise::Mul => BinKind::Mul,
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Binary { a, b, kind, bcast }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, Elementwise::Mul)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let value = map(av, |x| x + c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::AddScalar { a }, rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let av = self.value(a);
        let value = map(av, |x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::MulScalar { a, c }, rg)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let av = self.value(a);
        let rg = self.any_grad(&[a]);
        match kind {
            Activation::Relu => {
                let value = map(av, |x| x.max(0.0));
                self.push(value, Op::Relu { a }, rg)
            }
            Activation::Sigmoid => {
                let value = map(av, sigmoid);
                self.push(value, Op::Sigmoid { a }, rg)
            }
        }
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    /// Softmax of a matrix along `axis` (1: each row sums to one, 0: each column).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        if axis > 1 {
            return Err(AutodiffError::Config {
                op: "softmax",
                msg: format!("axis {axis} invalid for rank-2 tensor"),
            });
        }
        let x = av.data();
        let mut y = vec![0.0; r * c];
        let (outer, inner, so, si) = if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
        for o in 0..outer {
            let idx = |i: usize| o * so + i * si;
            let max = (0..inner).map(|i| x[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for i in 0..inner {
                let e = (x[idx(i)] - max).exp();
                y[idx(i)] = e;
                total += e;
            }
            for i in 0..inner {
                y[idx(i)] /= total;
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::matrix(r, c, y)?, Op::Softmax { a, axis }, rg))
    }

    /// Identity forward; backward multiplies the upstream gradient by `-weight`.
    pub fn gradient_reversal(&mut self, a: Var, weight: f64) -> Result<Var> {
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(AutodiffError::Config {
                op: "gradient_reversal",
                msg: format!("weight must be positive, got {weight}"),
            });
        }
        let value = self.value(a).clone();
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::GradReversal { a, weight }, rg))
    }

    /// Mean of the rows of `x` selected by `mask`, as a `1×d` row.
    pub fn masked_mean(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let av = self.value(a);
        let (n, d) = av.dims2()?;
        if mask.len() != n {
            return dim_err("masked_mean", av.shape(), &[mask.len()]);
        }
        let rows: Vec<usize> = (0..n).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(AutodiffError::Degenerate {
                op: "masked_mean",
                msg: "mask selects no rows".into(),
            });
        }
        let mut out = vec![0.0; d];
        for &r in &rows {
            for (o, x) in out.iter_mut().zip(av.row_slice(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::row(out), Op::MaskedMean { a, rows }, rg))
    }

    /// `uᵀv / (‖u‖·‖v‖)` as a scalar. Both operands must hold the same number
    /// of elements.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        let uv = self.value(u);
        let vv = self.value(v);
        if uv.numel() != vv.numel() {
            return dim_err("cosine_similarity", uv.shape(), vv.shape());
        }
        let nu = norm(uv.data());
        let nv = norm(vv.data());
        if nu <= NORM_EPS || nv <= NORM_EPS {
            return Err(AutodiffError::Degenerate {
                op: "cosine_similarity",
                msg: format!("near-zero norm ({nu:e}, {nv:e})"),
            });
        }
        let dot: f64 = uv.data().iter().zip(vv.data()).map(|(a, b)| a * b).sum();
        let rg = self.any_grad(&[u, v]);
        Ok(self.push(Tensor::scalar(dot / (nu * nv)), Op::Cosine { u, v, nu, nv }, rg))
    }

    /// Divides each row by `max(‖row‖, eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        let mut out = av.data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let nrm = norm(row);
            let denom = nrm.max(eps);
            row.iter_mut().for_each(|x| *x /= denom);
            norms.push(nrm);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::matrix(r, c, out)?, Op::NormalizeRows { a, norms, eps }, rg))
    }

    /// Same-length temporal cross-correlation: `x` is `n×c_in`, `kernel` is
    /// `k×c_in×c_out` with odd `k`, `bias` holds `c_out` values.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let kv = self.value(kernel);
        let bv = self.value(bias);
        let (n, cin) = xv.dims2()?;
        let [k, kc, cout] = kv.shape() else {
            return dim_err("conv1d", xv.shape(), kv.shape());
        };
        let (k, kc, cout) = (*k, *kc, *cout);
        if k % 2 == 0 {
            return Err(AutodiffError::Config {
                op: "conv1d",
                msg: format!("kernel size must be odd, got {k}"),
            });
        }
        if kc != cin {
            return dim_err("conv1d", xv.shape(), kv.shape());
        }
        if bv.numel() != cout {
            return dim_err("conv1d", kv.shape(), bv.shape());
        }
        let pad = (k / 2) as isize;
        let mut out = vec![0.0; n * cout];
        for t in 0..n {
            out[t * cout..(t + 1) * cout].copy_from_slice(bv.data());
        }
        for j in 0..k {
            let Some((t0, t1, s0)) = conv_rows(n, j as isize - pad) else {
                continue;
            };
            let kj = &kv.data()[j * cin * cout..(j + 1) * cin * cout];
            gemm(
                t1 - t0,
                cin,
                cout,
                &xv.data()[s0 * cin..],
                cin,
                1,
                kj,
                cout,
                1,
                &mut out[t0 * cout..],
                cout,
                1,
                1.0,
            );
        }
        let rg = self.any_grad(&[x, kernel, bias]);
        Ok(self.push(Tensor::matrix(n, cout, out)?, Op::Conv1d { x, kernel, bias }, rg))
    }

    /// Mean binary cross-entropy with predictions clamped to `[ε, 1−ε]`.
    pub fn bce_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let pv = self.value(pred);
        let tv = self.value(target);
        if pv.shape() != tv.shape() {
            return dim_err("bce_loss", pv.shape(), tv.shape());
        }
        if pv.numel() == 0 {
            return Err(AutodiffError::Degenerate {
                op: "bce_loss",
                msg: "empty input".into(),
            });
        }
        let total: f64 = pv
            .data()
            .iter()
            .zip(tv.data())
            .map(|(p, t)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let value = Tensor::scalar(total / pv.numel() as f64);
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(
            value,
            Op::Bce {
                pred,
                target,
                eps: BCE_EPS,
            },
            rg,
        ))
    }

    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return dim_err("mse_loss", av.shape(), bv.shape());
        }
        if av.numel() == 0 {
            return Err(AutodiffError::Degenerate {
                op: "mse_loss",
                msg: "empty input".into(),
            });
        }
        let total: f64 = av.data().iter().zip(bv.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let value = Tensor::scalar(total / av.numel() as f64);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mse { a, b }, rg))
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutodiffError::Config {
                op: "dropout",
                msg: format!("rate must lie in [0, 1), got {p}"),
            });
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let scale = 1.0 / (1.0 - p);
        let av = self.value(a);
        let mask: Vec<f64> = (0..av.numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { scale })
            .collect();
        let data = av.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Dropout { a, mask }, rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av.data()[i * c + j];
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::matrix(c, r, out)?, Op::Transpose { a }, rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        if start + len > c {
            return dim_err("slice_cols", av.shape(), &[start, len]);
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av.data()[i * c + start..i * c + start + len]);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::matrix(r, len, out)?, Op::SliceCols { a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| AutodiffError::Degenerate {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?);
        let (r, _) = first.dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let pv = self.value(*p);
            let (pr, pc) = pv.dims2()?;
            if pr != r {
                return dim_err("concat_cols", first.shape(), pv.shape());
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::matrix(r, total, out)?,
            Op::ConcatCols { parts: parts.to_vec() },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| AutodiffError::Degenerate {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?);
        let (_, c) = first.dims2()?;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let pv = self.value(*p);
            let (pr, pc) = pv.dims2()?;
            if pc != c {
                return dim_err("concat_rows", first.shape(), pv.shape());
            }
            rows += pr;
            out.extend_from_slice(pv.data());
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::matrix(rows, c, out)?,
            Op::ConcatRows { parts: parts.to_vec() },
            rg,
        ))
    }

    /// Picks flat (row-major) entries of `a` into a `1×k` row.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= av.numel()) {
            return dim_err("gather", av.shape(), &[bad]);
        }
        let out = idx.iter().map(|&i| av.data()[i]).collect();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::row(out), Op::Gather { a, idx: idx.to_vec() }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.numel() as f64;
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Mean { a }, rg)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| f(*x)).collect()).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn close(a: &Tensor, b: &[f64]) {
        assert_eq!(a.numel(), b.len(), "shape {:?}", a.shape());
        for (x, y) in a.data().iter().zip(b) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-12);
        }
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let i = t.constant(Tensor::identity(2));
        let b = t.constant(Tensor::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]));
        let c = t.matmul(i, b).unwrap();
        close(t.value(c), &[3.0, 4.0, 5.0, 6.0]);

        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0]]));
        let b = t.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[1, 1]);
        close(t.value(c), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        match t.matmul(a, b) {
            Err(AutodiffError::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_identities_and_broadcast() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![1.0, -2.0], vec![3.5, 4.0]]));
        let y = t.add_scalar(x, 0.0);
        assert_eq!(t.value(y), t.value(x));
        let y = t.mul_scalar(x, 1.0);
        assert_eq!(t.value(y), t.value(x));

        let a = t.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let r = t.constant(Tensor::row(vec![10.0, 20.0]));
        let s = t.add(a, r).unwrap();
        close(t.value(s), &[11.0, 22.0, 13.0, 24.0]);

        let bad = t.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        assert!(matches!(t.add(a, bad), Err(AutodiffError::Dimension { .. })));
        let col = t.constant(Tensor::zeros(&[2, 1]));
        assert!(matches!(t.mul(a, col), Err(AutodiffError::Dimension { .. })));
    }

    #[test]
    fn activation_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![0.0, -3.0, 3.0, 3f64.ln()]));
        let s = t.sigmoid(x);
        let r = t.relu(x);
        assert_eq!(t.value(s).data()[0], 0.5);
        assert_abs_diff_eq!(t.value(s).data()[3], 0.75, epsilon = 1e-15);
        assert_eq!(t.value(r).data()[1], 0.0);
        assert_eq!(t.value(r).data()[2], 3.0);
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![0.0, 0.0]));
        let y = t.softmax(x, 1).unwrap();
        close(t.value(y), &[0.5, 0.5]);
        let x = t.constant(Tensor::row(vec![1f64.ln(), 3f64.ln()]));
        let y = t.softmax(x, 1).unwrap();
        close(t.value(y), &[0.25, 0.75]);
        let x = t.constant(Tensor::from_rows(&[vec![1f64.ln()], vec![3f64.ln()]]));
        let y = t.softmax(x, 0).unwrap();
        close(t.value(y), &[0.25, 0.75]);
        assert!(t.softmax(x, 2).is_err());
    }

    #[test]
    fn gradient_reversal_contract() {
        let mut t = Tape::new();
        let x = t.param(Tensor::row(vec![1.0, -2.0, 3.0]));
        let y = t.gradient_reversal(x, 0.5).unwrap();
        assert_eq!(t.value(y), t.value(x));
        let w = t.constant(Tensor::row(vec![2.0, 4.0, -6.0]));
        let z = t.mul(y, w).unwrap();
        let l = t.sum(z);
        let g = t.backward(l).unwrap();
        close(g.get(x).unwrap(), &[-1.0, -2.0, 3.0]);

        for bad in [0.0, -1.0, f64::NAN] {
            assert!(matches!(t.gradient_reversal(x, bad), Err(AutodiffError::Config { .. })));
        }
    }

    #[test]
    fn masked_mean_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![5.0, 7.0], vec![9.0, 9.0]]));
        let m = t.masked_mean(x, &[true, true, false]).unwrap();
        close(t.value(m), &[3.0, 5.0]);
        let x2 = t.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![5.0, 7.0]]));
        let m = t.masked_mean(x2, &[true, true]).unwrap();
        close(t.value(m), &[3.0, 5.0]);
        let c = t.constant(Tensor::from_rows(&vec![vec![2.5, -1.0]; 4]));
        let m = t.masked_mean(c, &[false, true, false, true]).unwrap();
        close(t.value(m), &[2.5, -1.0]);
        assert!(matches!(
            t.masked_mean(x, &[false; 3]),
            Err(AutodiffError::Degenerate { .. })
        ));
    }

    #[test]
    fn cosine_examples() {
        let mut t = Tape::new();
        let v = t.constant(Tensor::row(vec![0.3, -1.2, 2.0]));
        let c = t.cosine_similarity(v, v).unwrap();
        assert_abs_diff_eq!(t.value(c).item(), 1.0, epsilon = 1e-15);
        let a = t.constant(Tensor::row(vec![1.0, 0.0]));
        let b = t.constant(Tensor::row(vec![0.0, 1.0]));
        let c = t.cosine_similarity(a, b).unwrap();
        assert_eq!(t.value(c).item(), 0.0);
        let b = t.constant(Tensor::row(vec![1.0, 1.0]));
        let c = t.cosine_similarity(a, b).unwrap();
        assert_abs_diff_eq!(t.value(c).item(), 1.0 / 2f64.sqrt(), epsilon = 1e-15);
        let z = t.constant(Tensor::row(vec![0.0, 1e-10]));
        assert!(matches!(
            t.cosine_similarity(a, z),
            Err(AutodiffError::Degenerate { .. })
        ));
    }

    #[test]
    fn conv1d_identity_kernels() {
        let mut t = Tape::new();
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![4.0, 4.0], vec![0.0, 1.0]]);
        let xv = t.constant(x.clone());
        let k1 = t.constant(Tensor::identity(2).reshape(vec![1, 2, 2]).unwrap());
        let b = t.constant(Tensor::zeros(&[2]));
        let y = t.conv1d(xv, k1, b).unwrap();
        assert_eq!(t.value(y), &x);

        let mut delta = vec![0.0; 3 * 2 * 2];
        delta[4] = 1.0; // centre tap, channel 0 -> 0
        delta[7] = 1.0; // centre tap, channel 1 -> 1
        let k3 = t.constant(Tensor::new(vec![3, 2, 2], delta).unwrap());
        let y = t.conv1d(xv, k3, b).unwrap();
        assert_eq!(t.value(y), &x);

        let even = t.constant(Tensor::zeros(&[2, 2, 2]));
        assert!(matches!(t.conv1d(xv, even, b), Err(AutodiffError::Config { .. })));
    }

    #[test]
    fn bce_examples() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::row(vec![0.5]));
        for target in [0.0, 1.0] {
            let y = t.constant(Tensor::row(vec![target]));
            let l = t.bce_loss(p, y).unwrap();
            assert_abs_diff_eq!(t.value(l).item(), 2f64.ln(), epsilon = 1e-15);
        }
        let p = t.constant(Tensor::full(&[2, 3], 0.5));
        let l = t.bce_loss(p, p).unwrap();
        assert_abs_diff_eq!(t.value(l).item(), 2f64.ln(), epsilon = 1e-15);
        let q = t.constant(Tensor::row(vec![0.5]));
        assert!(matches!(t.bce_loss(p, q), Err(AutodiffError::Dimension { .. })));
        // saturated predictions hit the clamp instead of producing infinities
        let sat = t.constant(Tensor::row(vec![0.0, 1.0]));
        let y = t.constant(Tensor::row(vec![1.0, 0.0]));
        let l = t.bce_loss(sat, y).unwrap();
        assert_abs_diff_eq!(t.value(l).item(), -(BCE_EPS.ln()), epsilon = 1e-6);
    }

    #[test]
    fn mse_examples() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![1.0, 2.0]));
        let l = t.mse_loss(x, x).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        let a = t.constant(Tensor::row(vec![0.0, 0.0]));
        let b = t.constant(Tensor::row(vec![1.0, 1.0]));
        let l = t.mse_loss(a, b).unwrap();
        assert_eq!(t.value(l).item(), 1.0);
        let c = t.constant(Tensor::row(vec![3.0, 2.0]));
        let l = t.mse_loss(x, c).unwrap();
        assert_eq!(t.value(l).item(), 2.0);
        let d = t.constant(Tensor::row(vec![3.0]));
        assert!(t.mse_loss(x, d).is_err());
    }

    #[test]
    fn dropout_scaling() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[50, 40], 1.0));
        let same = t.dropout(x, 0.4, false, &mut rng).unwrap();
        assert_eq!(same, x);
        let y = t.dropout(x, 0.4, true, &mut rng).unwrap();
        let vals = t.value(y).data();
        assert!(vals.iter().all(|v| *v == 0.0 || (*v - 1.0 / 0.6).abs() < 1e-15));
        let kept = vals.iter().filter(|v| **v > 0.0).count() as f64 / vals.len() as f64;
        assert!((kept - 0.6).abs() < 0.05, "kept fraction {kept}");
        assert!(t.dropout(x, 1.0, true, &mut rng).is_err());
    }
}
