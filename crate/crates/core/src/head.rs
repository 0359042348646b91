//! Biaffine boundary scoring, scaled-IoU targets and boundary decoding.

use amda_autodiff::{Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AmdaError, Result};
use crate::params::{xavier, Fwd, Mlp, ParamId, ParamStore};

/// Inclusive frame interval `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalBoundary {
    pub start: usize,
    pub end: usize,
}

impl TemporalBoundary {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(AmdaError::Config(format!("boundary start {start} exceeds end {end}")));
        }
        Ok(Self { start, end })
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn temporal_iou(p: TemporalBoundary, q: TemporalBoundary) -> f64 {
    let lo = p.start.max(q.start);
    let hi = p.end.min(q.end);
    let inter = if hi >= lo { hi - lo + 1 } else { 0 };
    let union = p.len() + q.len() - inter;
    inter as f64 / union as f64
}

/// Flat indices of the upper triangle (diagonal included) of an n×n map,
/// row-major.
pub fn upper_triangle(n: usize) -> Vec<usize> {
    (0..n).flat_map(|s| (s..n).map(move |e| s * n + e)).collect()
}

/// Per-segment IoU with `gt`, divided by the largest IoU over all segments.
pub fn scaled_iou_targets(gt: TemporalBoundary, n: usize) -> Result<Tensor> {
    if gt.end >= n {
        return Err(AmdaError::Config(format!("boundary end {} outside {n} frames", gt.end)));
    }
    let mut out = vec![0.0; n * n];
    let mut best: f64 = 0.0;
    for s in 0..n {
        for e in s..n {
            let iou = temporal_iou(TemporalBoundary { start: s, end: e }, gt);
            out[s * n + e] = iou;
            best = best.max(iou);
        }
    }
    out.iter_mut().for_each(|x| *x /= best);
    Ok(Tensor::matrix(n, n, out)?)
}

/// An evaluated n×n score map; lower-triangle entries are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    scores: Tensor,
}

impl ScoreMap {
    pub fn new(scores: Tensor) -> Result<Self> {
        let (r, c) = scores.dims2()?;
        if r != c {
            return Err(AmdaError::Dimension(format!("score map must be square, got {r}×{c}")));
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Highest-scoring segment; ties go to the smallest start, then smallest end.
pub fn infer_boundary(map: &ScoreMap) -> TemporalBoundary {
    let n = map.len();
    let mut best = TemporalBoundary { start: 0, end: 0 };
    let mut best_score = f64::NEG_INFINITY;
    for s in 0..n {
        for e in s..n {
            let v = map.scores.get2(s, e);
            if v > best_score {
                best_score = v;
                best = TemporalBoundary { start: s, end: e };
            }
        }
    }
    best
}

/// Biaffine segment scorer.
#[derive(Debug, Clone)]
pub struct PredictorHead {
    pub ffn_start: Mlp,
    pub ffn_end: Mlp,
    pub biaffine: ParamId,
    pub linear: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl PredictorHead {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ffn_start: Mlp::new(store, &format!("{name}.ffn_s"), hidden, hidden, hidden, rng),
            ffn_end: Mlp::new(store, &format!("{name}.ffn_e"), hidden, hidden, hidden, rng),
            biaffine: store.add(format!("{name}.u"), xavier(rng, hidden, hidden)),
            linear: store.add(format!("{name}.w"), xavier(rng, hidden, 1)),
            bias: store.add(format!("{name}.b"), Tensor::zeros(&[1, 1])),
            hidden,
        }
    }

    /// `M[s,e] = σ(rˢ[s]·U·rᵉ[e]ᵀ + (rˢ[s] + rᵉ[e])·W + b)` on the upper
    /// triangle, zero below it.
    pub fn score_map(&self, fx: &mut Fwd, f_tilde: Var) -> Result<Var> {
        let n = fx.tape.value(f_tilde).dims2()?.0;
        let rs = self.ffn_start.forward(fx, f_tilde)?;
        let re = self.ffn_end.forward(fx, f_tilde)?;
        let rs_u = fx.tape.matmul(rs, fx.p(self.biaffine))?;
        let re_t = fx.tape.transpose(re)?;
        let bilinear = fx.tape.matmul(rs_u, re_t)?;
        let ls = fx.tape.matmul(rs, fx.p(self.linear))?;
        let ls = fx.tape.add(ls, fx.p(self.bias))?;
        let le = fx.tape.matmul(re, fx.p(self.linear))?;
        let ones_row = fx.tape.constant(Tensor::full(&[1, n], 1.0));
        let ones_col = fx.tape.constant(Tensor::full(&[n, 1], 1.0));
        let start_term = fx.tape.matmul(ls, ones_row)?;
        let le_t = fx.tape.transpose(le)?;
        let end_term = fx.tape.matmul(ones_col, le_t)?;
        let logits = fx.tape.add(bilinear, start_term)?;
        let logits = fx.tape.add(logits, end_term)?;
        let probs = fx.tape.sigmoid(logits);
        let mut tri = vec![0.0; n * n];
        for i in upper_triangle(n) {
            tri[i] = 1.0;
        }
        let tri = fx.tape.constant(Tensor::matrix(n, n, tri)?);
        Ok(fx.tape.mul(probs, tri)?)
    }
}

/// Mean clamped BCE over upper-triangle entries.
pub fn supervised_loss(tape: &mut Tape, map: Var, targets: &Tensor) -> Result<Var> {
    let shape = tape.value(map).shape().to_vec();
    if shape != targets.shape() || shape.len() != 2 || shape[0] != shape[1] {
        return Err(AmdaError::Dimension(format!(
            "score map {shape:?} against targets {:?}",
            targets.shape()
        )));
    }
    let idx = upper_triangle(shape[0]);
    let pred = tape.gather(map, &idx)?;
    let tgt = Tensor::row(idx.iter().map(|&i| targets.data()[i]).collect());
    let tgt = tape.constant(tgt);
    Ok(tape.bce_loss(pred, tgt)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use amda_autodiff::sigmoid;
    use rand::{Rng, SeedableRng};

    fn tb(s: usize, e: usize) -> TemporalBoundary {
        TemporalBoundary::new(s, e).unwrap()
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn eval_map(store: &ParamStore, head: &PredictorHead, f: &Tensor) -> Tensor {
        let mut t = Tape::new();
        let b = store.bind_frozen(&mut t);
        let mut fx = Fwd {
            tape: &mut t,
            params: &b,
            train: false,
            dropout: 0.0,
        };
        let fv = fx.tape.constant(f.clone());
        let m = head.score_map(&mut fx, fv).unwrap();
        t.value(m).clone()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(temporal_iou(tb(2, 5), tb(2, 5)), 1.0);
        assert_eq!(temporal_iou(tb(0, 1), tb(3, 5)), 0.0);
        assert_eq!(temporal_iou(tb(1, 4), tb(2, 6)), 0.5);
        assert!(TemporalBoundary::new(3, 2).is_err());
    }

    #[test]
    fn target_examples() {
        let t = scaled_iou_targets(tb(1, 2), 4).unwrap();
        assert_eq!(t.get2(1, 2), 1.0);
        assert_eq!(t.get2(0, 3), 0.5);
        assert_eq!(t.get2(3, 3), 0.0);
        assert_eq!(t.get2(2, 0), 0.0);
        assert!(scaled_iou_targets(tb(1, 4), 4).is_err());
    }

    #[test]
    fn zero_parameters_score_one_half() {
        let mut g = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let head = PredictorHead::new(&mut store, "h", 3, &mut g);
        *store.get_mut(head.biaffine) = Tensor::zeros(&[3, 3]);
        *store.get_mut(head.linear) = Tensor::zeros(&[3, 1]);
        let f = rand_tensor(&mut g, 5, 3);
        let m = eval_map(&store, &head, &f);
        for s in 0..5 {
            for e in 0..5 {
                assert_eq!(m.get2(s, e), if e >= s { 0.5 } else { 0.0 });
            }
        }
        *store.get_mut(head.bias) = Tensor::matrix(1, 1, vec![-50.0]).unwrap();
        let m = eval_map(&store, &head, &f);
        assert!(m.data().iter().all(|x| *x < 1e-20));
    }

    #[test]
    fn score_map_matches_pair_loop() {
        let mut g = ChaCha8Rng::seed_from_u64(1);
        let (n, d) = (4, 3);
        let mut store = ParamStore::new();
        let head = PredictorHead::new(&mut store, "h", d, &mut g);
        for id in store.ids().collect::<Vec<_>>() {
            let s = store.get(id).shape().to_vec();
            *store.get_mut(id) = rand_tensor(&mut g, s[0], s[1]);
        }
        let f = rand_tensor(&mut g, n, d);
        let m = eval_map(&store, &head, &f);
        let ffn = |mlp: &Mlp, x: &[f64]| -> Vec<f64> {
            let lin = |l: &crate::params::Linear, x: &[f64]| -> Vec<f64> {
                let (w, b) = (store.get(l.weight), store.get(l.bias));
                (0..d)
                    .map(|j| b.data()[j] + (0..d).map(|i| x[i] * w.get2(i, j)).sum::<f64>())
                    .collect()
            };
            let h: Vec<f64> = lin(&mlp.hidden, x).into_iter().map(|v| v.max(0.0)).collect();
            lin(&mlp.out, &h)
        };
        let (u, w, b) = (
            store.get(head.biaffine),
            store.get(head.linear),
            store.get(head.bias).data()[0],
        );
        for ps in 0..n {
            for pe in 0..n {
                let expect = if pe < ps {
                    0.0
                } else {
                    let rs = ffn(&head.ffn_start, f.row_slice(ps));
                    let re = ffn(&head.ffn_end, f.row_slice(pe));
                    let mut z = b;
                    for i in 0..d {
                        for j in 0..d {
                            z += rs[i] * u.get2(i, j) * re[j];
                        }
                        z += (rs[i] + re[i]) * w.data()[i];
                    }
                    sigmoid(z)
                };
                assert!((m.get2(ps, pe) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_at_one_half_is_ln2() {
        let mut g = ChaCha8Rng::seed_from_u64(2);
        for n in [1, 3, 6] {
            let mut t = Tape::new();
            let mut half = vec![0.0; n * n];
            for i in upper_triangle(n) {
                half[i] = 0.5;
            }
            let m = t.constant(Tensor::matrix(n, n, half).unwrap());
            let targets = rand_tensor(&mut g, n, n);
            let targets = Tensor::new(vec![n, n], targets.data().iter().map(|x| x.abs()).collect()).unwrap();
            let l = supervised_loss(&mut t, m, &targets).unwrap();
            assert!((t.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_at_targets_is_small_and_shapes_checked() {
        let targets = scaled_iou_targets(tb(0, 0), 1).unwrap();
        let mut t = Tape::new();
        let m = t.constant(targets.clone());
        let l = supervised_loss(&mut t, m, &targets).unwrap();
        let bound = -(1.0 - amda_autodiff::BCE_EPS).ln();
        assert!(t.value(l).item() <= bound + 1e-15);
        let bad = Tensor::zeros(&[2, 2]);
        assert!(matches!(supervised_loss(&mut t, m, &bad), Err(AmdaError::Dimension(_))));
    }

    #[test]
    fn inference_examples() {
        let mut s = Tensor::zeros(&[5, 5]);
        s.data_mut()[5 + 3] = 0.9;
        assert_eq!(infer_boundary(&ScoreMap::new(s).unwrap()), tb(1, 3));
        let mut u = Tensor::zeros(&[4, 4]);
        for i in upper_triangle(4) {
            u.data_mut()[i] = 0.3;
        }
        assert_eq!(infer_boundary(&ScoreMap::new(u).unwrap()), tb(0, 0));
    }

    #[test]
    fn inference_agrees_with_exhaustive_scan() {
        let mut g = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let n = g.gen_range(1..9);
            let mut data = vec![0.0; n * n];
            for i in upper_triangle(n) {
                // coarse values force frequent ties
                data[i] = g.gen_range(0..4) as f64 / 4.0;
            }
            let map = ScoreMap::new(Tensor::matrix(n, n, data.clone()).unwrap()).unwrap();
            let mut best = (0, 0);
            for s in 0..n {
                for e in s..n {
                    let (bs, be) = best;
                    let v = data[s * n + e];
                    let bv = data[bs * n + be];
                    if v > bv || (v == bv && (s, e) < best) {
                        best = (s, e);
                    }
                }
            }
            let got = infer_boundary(&map);
            assert_eq!((got.start, got.end), best);
            assert!(got.end >= got.start);
        }
    }
}
