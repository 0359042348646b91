//! Context-query attention between encoded video and query, followed by the
//! fusion map and one more self-attention layer.

use amda_autodiff::{Tape, Tensor, Var, NORM_EPS};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{key_bias, SelfAttention, MASK_LOGIT};
use crate::error::{AmdaError, Result};
use crate::params::{Fwd, Linear, ParamStore};

/// Cosine similarities `s` (n×m) with their row- and column-softmaxed forms.
#[derive(Debug, Clone, Copy)]
pub struct Similarity {
    pub s: Var,
    pub s_r: Var,
    pub s_c: Var,
}

fn check_norms(t: &Tensor, valid: &[bool], what: &str) -> Result<()> {
    let (_, c) = t.dims2()?;
    for (i, ok) in valid.iter().enumerate() {
        let n2: f64 = t.data()[i * c..(i + 1) * c].iter().map(|x| x * x).sum();
        if *ok && n2.sqrt() <= NORM_EPS {
            return Err(AmdaError::Degenerate(format!("{what} row {i} has near-zero norm")));
        }
    }
    Ok(())
}

pub fn similarity(tape: &mut Tape, v: Var, q: Var, v_valid: &[bool], q_valid: &[bool]) -> Result<Similarity> {
    let (n, dv) = tape.value(v).dims2()?;
    let (m, dq) = tape.value(q).dims2()?;
    if dv != dq || v_valid.len() != n || q_valid.len() != m {
        return Err(AmdaError::Dimension(format!(
            "similarity of {n}×{dv} video and {m}×{dq} query with masks {}/{}",
            v_valid.len(),
            q_valid.len()
        )));
    }
    check_norms(tape.value(v), v_valid, "video")?;
    check_norms(tape.value(q), q_valid, "query")?;
    let vn = tape.normalize_rows(v, NORM_EPS)?;
    let qn = tape.normalize_rows(q, NORM_EPS)?;
    let qt = tape.transpose(qn)?;
    let s = tape.matmul(vn, qt)?;

    let row_logits = match key_bias(q_valid) {
        Some(b) => {
            let b = tape.constant(b);
            tape.add(s, b)?
        }
        None => s,
    };
    let s_r = tape.softmax(row_logits, 1)?;

    let col_logits = if v_valid.iter().all(|x| *x) {
        s
    } else {
        let mut bias = vec![0.0; n * m];
        for (i, ok) in v_valid.iter().enumerate() {
            if !ok {
                bias[i * m..(i + 1) * m].fill(MASK_LOGIT);
            }
        }
        let b = tape.constant(Tensor::matrix(n, m, bias)?);
        tape.add(s, b)?
    };
    let s_c = tape.softmax(col_logits, 0)?;
    Ok(Similarity { s, s_r, s_c })
}

/// Returns `(A_v, A_q)` with `A_v = S_r·Q̃` and `A_q = S_r·S_cᵀ·Ṽ`, both n×d.
pub fn context_query_attention(tape: &mut Tape, v: Var, q: Var, sims: &Similarity) -> Result<(Var, Var)> {
    let a_v = tape.matmul(sims.s_r, q)?;
    let s_ct = tape.transpose(sims.s_c)?;
    let q_to_v = tape.matmul(s_ct, v)?;
    let a_q = tape.matmul(sims.s_r, q_to_v)?;
    Ok((a_v, a_q))
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub fuse: Linear,
    pub finalize: SelfAttention,
    pub hidden: usize,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            fuse: Linear::new(store, &format!("{name}.fuse"), 4 * hidden, hidden, rng),
            finalize: SelfAttention::new(store, &format!("{name}.final"), hidden, heads, rng)?,
            hidden,
        })
    }

    /// `F = [Ṽ; A_v; Ṽ⊙A_v; Ṽ⊙A_q]·W_f + b_f`, padding rows zeroed.
    pub fn fuse(&self, fx: &mut Fwd, v: Var, a_v: Var, a_q: Var, v_valid: &[bool]) -> Result<Var> {
        let vav = fx.tape.mul(v, a_v)?;
        let vaq = fx.tape.mul(v, a_q)?;
        let cat = fx.tape.concat_cols(&[v, a_v, vav, vaq])?;
        let f = self.fuse.forward(fx, cat)?;
        fx.zero_invalid_rows(f, v_valid)
    }

    pub fn finalize(&self, fx: &mut Fwd, f: Var, v_valid: &[bool], rng: &mut ChaCha8Rng) -> Result<Var> {
        self.finalize.forward(fx, f, v_valid, rng)
    }

    /// Full fusion path; returns `(F, F̃)`.
    pub fn forward(
        &self,
        fx: &mut Fwd,
        v: Var,
        q: Var,
        v_valid: &[bool],
        q_valid: &[bool],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Var)> {
        let sims = similarity(fx.tape, v, q, v_valid, q_valid)?;
        let (a_v, a_q) = context_query_attention(fx.tape, v, q, &sims)?;
        let f = self.fuse(fx, v, a_v, a_q, v_valid)?;
        let f_tilde = self.finalize(fx, f, v_valid, rng)?;
        Ok((f, f_tilde))
    }
}
