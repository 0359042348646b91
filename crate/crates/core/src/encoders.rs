//! Per-modality feature encoders: projection to the hidden width followed by
//! stacked multi-head self-attention, plus frame masking for reconstruction.

use amda_autodiff::{Tape, Tensor, Var};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::error::{AmdaError, Result};
use crate::params::{Fwd, Linear, ParamId, ParamStore};

/// Logit added at invalid key positions before the attention softmax.
pub const MASK_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Visual,
    Textual,
}

/// A `len×dim` feature matrix with a per-position validity flag.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    values: Tensor,
    valid: Vec<bool>,
    modality: Modality,
}

impl FeatureSequence {
    /// Padding rows are zero-filled on construction.
    pub fn new(values: Tensor, valid: Vec<bool>, modality: Modality) -> Result<Self> {
        let (rows, cols) = values.dims2()?;
        if valid.len() != rows {
            return Err(AmdaError::Dimension(format!(
                "validity mask has {} entries for {rows} rows",
                valid.len()
            )));
        }
        if !valid.iter().any(|v| *v) {
            return Err(AmdaError::Degenerate("feature sequence has no valid position".into()));
        }
        let mut values = values;
        for (r, ok) in valid.iter().enumerate() {
            if !ok {
                values.data_mut()[r * cols..(r + 1) * cols].fill(0.0);
            }
        }
        Ok(Self {
            values,
            valid,
            modality,
        })
    }

    pub fn full(values: Tensor, modality: Modality) -> Result<Self> {
        let rows = values.dims2()?.0;
        Self::new(values, vec![true; rows], modality)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    pub fn n_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Row vector with `MASK_LOGIT` at invalid positions, or `None` when all are valid.
pub(crate) fn key_bias(valid: &[bool]) -> Option<Tensor> {
    if valid.iter().all(|v| *v) {
        return None;
    }
    Some(Tensor::row(
        valid.iter().map(|&v| if v { 0.0 } else { MASK_LOGIT }).collect(),
    ))
}

/// One multi-head self-attention layer with a residual connection.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub hidden: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, heads: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if heads == 0 || !hidden.is_multiple_of(heads) {
            return Err(AmdaError::Config(format!(
                "hidden width {hidden} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), hidden, hidden, rng),
            key: Linear::new(store, &format!("{name}.k"), hidden, hidden, rng),
            value: Linear::new(store, &format!("{name}.v"), hidden, hidden, rng),
            output: Linear::new(store, &format!("{name}.o"), hidden, hidden, rng),
            heads,
            hidden,
        })
    }

    pub fn forward(&self, fx: &mut Fwd, x: Var, valid: &[bool], rng: &mut ChaCha8Rng) -> Result<Var> {
        Ok(self.forward_with_weights(fx, x, valid, rng)?.0)
    }

    /// Also returns each head's `len×len` attention matrix.
    pub fn forward_with_weights(
        &self,
        fx: &mut Fwd,
        x: Var,
        valid: &[bool],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<Var>)> {
        let q = self.query.forward(fx, x)?;
        let k = self.key.forward(fx, x)?;
        let v = self.value.forward(fx, x)?;
        let head_dim = self.hidden / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let bias = key_bias(valid).map(|b| fx.tape.constant(b));
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = fx.tape.slice_cols(q, h * head_dim, head_dim)?;
            let kh = fx.tape.slice_cols(k, h * head_dim, head_dim)?;
            let vh = fx.tape.slice_cols(v, h * head_dim, head_dim)?;
            let kt = fx.tape.transpose(kh)?;
            let logits = fx.tape.matmul(qh, kt)?;
            let mut logits = fx.tape.mul_scalar(logits, scale);
            if let Some(b) = bias {
                logits = fx.tape.add(logits, b)?;
            }
            let attn = fx.tape.softmax(logits, 1)?;
            outs.push(fx.tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let heads = if outs.len() == 1 {
            outs[0]
        } else {
            fx.tape.concat_cols(&outs)?
        };
        let attended = self.output.forward(fx, heads)?;
        let y = fx.tape.add(x, attended)?;
        let y = fx.dropout(y, rng)?;
        Ok((fx.zero_invalid_rows(y, valid)?, weights))
    }
}

/// Projection plus `layers` self-attention blocks for one modality.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub projection: Linear,
    pub layers: Vec<SelfAttention>,
    pub input_dim: usize,
    pub hidden: usize,
    /// Adds sinusoidal position codes after the projection.
    pub positional: bool,
}

/// `pe[t][2i] = sin(t/10000^(2i/d))`, `pe[t][2i+1] = cos(t/10000^(2i/d))`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut out = vec![0.0; n * d];
    for t in 0..n {
        for c in 0..d {
            let rate = 10000f64.powf((c - c % 2) as f64 / d as f64);
            let a = t as f64 / rate;
            out[t * d + c] = if c % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::matrix(n, d, out).expect("sized")
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        heads: usize,
        layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let projection = Linear::new(store, &format!("{name}.proj"), input_dim, hidden, rng);
        let layers = (0..layers)
            .map(|l| SelfAttention::new(store, &format!("{name}.attn{l}"), hidden, heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            projection,
            layers,
            input_dim,
            hidden,
            positional: false,
        })
    }

    /// Affine map to the hidden width; padding rows stay zero.
    pub fn project(&self, fx: &mut Fwd, x: Var, valid: &[bool]) -> Result<Var> {
        let cols = fx.tape.value(x).dims2()?.1;
        if cols != self.input_dim {
            return Err(AmdaError::Config(format!(
                "encoder expects feature width {}, got {cols}",
                self.input_dim
            )));
        }
        let y = self.projection.forward(fx, x)?;
        fx.zero_invalid_rows(y, valid)
    }

    pub fn encode_var(&self, fx: &mut Fwd, x: Var, valid: &[bool], rng: &mut ChaCha8Rng) -> Result<Var> {
        let mut h = self.project(fx, x, valid)?;
        if self.positional {
            let n = valid.len();
            let pe = fx.tape.constant(sinusoidal_positions(n, self.hidden));
            h = fx.tape.add(h, pe)?;
        }
        h = fx.dropout(h, rng)?;
        h = fx.zero_invalid_rows(h, valid)?;
        for layer in &self.layers {
            h = layer.forward(fx, h, valid, rng)?;
        }
        Ok(h)
    }

    pub fn encode(&self, fx: &mut Fwd, seq: &FeatureSequence, rng: &mut ChaCha8Rng) -> Result<Var> {
        let x = fx.tape.constant(seq.values().clone());
        self.encode_var(fx, x, seq.valid(), rng)
    }
}

/// Shared learned row that replaces masked frames.
#[derive(Debug, Clone, Copy)]
pub struct MaskToken {
    pub vector: ParamId,
}

impl MaskToken {
    pub fn new(store: &mut ParamStore, name: &str, feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let init = crate::params::xavier(rng, 1, feature_dim);
        Self {
            vector: store.add(format!("{name}.vector"), init),
        }
    }
}

/// A video with a subset of its valid frames selected for masking.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedVideo {
    pub masked_positions: Vec<bool>,
    pub original: FeatureSequence,
}

/// Number of frames masked for `n_valid` valid frames at ratio `beta`
/// (round half away from zero).
pub fn masked_count(beta: f64, n_valid: usize) -> usize {
    (beta * n_valid as f64).round() as usize
}

/// Selects `round(β·n_valid)` distinct valid frames uniformly without replacement.
pub fn mask_video(x: &FeatureSequence, beta: f64, rng: &mut ChaCha8Rng) -> Result<MaskedVideo> {
    if x.modality() != Modality::Visual {
        return Err(AmdaError::Config("only visual sequences can be masked".into()));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(AmdaError::Config(format!("mask ratio must lie in (0, 1), got {beta}")));
    }
    let valid_idx: Vec<usize> = (0..x.len()).filter(|&i| x.valid()[i]).collect();
    let count = masked_count(beta, valid_idx.len());
    if count == 0 {
        return Err(AmdaError::Degenerate(format!(
            "mask ratio {beta} selects no frame out of {}",
            valid_idx.len()
        )));
    }
    let mut masked_positions = vec![false; x.len()];
    for k in sample(rng, valid_idx.len(), count).iter() {
        masked_positions[valid_idx[k]] = true;
    }
    Ok(MaskedVideo {
        masked_positions,
        original: x.clone(),
    })
}

impl MaskedVideo {
    pub fn count(&self) -> usize {
        self.masked_positions.iter().filter(|m| **m).count()
    }

    /// Masked feature matrix for a concrete token value.
    pub fn masked_values(&self, token: &Tensor) -> Tensor {
        let mut out = self.original.values().clone();
        let cols = out.shape()[1];
        for (r, m) in self.masked_positions.iter().enumerate() {
            if *m {
                out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(token.data());
            }
        }
        out
    }

    /// Records the masked input on the tape so the token receives gradients.
    pub fn input_var(&self, tape: &mut Tape, token: Var) -> Result<Var> {
        let (n, f) = self.original.values().dims2()?;
        let mut keep = self.original.values().clone();
        let mut indicator = Vec::with_capacity(n);
        for (r, m) in self.masked_positions.iter().enumerate() {
            if *m {
                keep.data_mut()[r * f..(r + 1) * f].fill(0.0);
            }
            indicator.push(if *m { 1.0 } else { 0.0 });
        }
        let kept = tape.constant(keep);
        let col = tape.constant(Tensor::matrix(n, 1, indicator)?);
        let tokens = tape.matmul(col, token)?;
        Ok(tape.add(kept, tokens)?)
    }
}
