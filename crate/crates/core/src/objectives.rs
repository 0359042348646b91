//! Domain adaptation objectives: adversarial discrimination, cross-modal
//! triplet alignment, masked-video reconstruction, and the MMD / CORAL
//! baselines.

use amda_autodiff::{Tape, Tensor, Var, NORM_EPS};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::FeatureSequence;
use crate::error::{AmdaError, Result};
use crate::params::{Fwd, Mlp, ParamId, ParamStore};

pub const SOURCE_LABEL: f64 = 0.0;
pub const TARGET_LABEL: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    #[serde(rename = "v")]
    Visual,
    #[serde(rename = "q")]
    Textual,
    #[serde(rename = "f")]
    Fused,
}

impl FeatureKind {
    pub const ALL: [FeatureKind; 3] = [FeatureKind::Visual, FeatureKind::Textual, FeatureKind::Fused];

    pub fn short(self) -> &'static str {
        match self {
            FeatureKind::Visual => "v",
            FeatureKind::Textual => "q",
            FeatureKind::Fused => "f",
        }
    }
}

/// Mean over valid time steps as a `1×d` row.
pub fn pool(tape: &mut Tape, x: Var, valid: &[bool]) -> Result<Var> {
    if !valid.iter().any(|v| *v) {
        return Err(AmdaError::Degenerate(
            "cannot pool a sequence with no valid step".into(),
        ));
    }
    Ok(tape.masked_mean(x, valid)?)
}

/// One discriminator per feature kind, each behind a gradient-reversal layer.
#[derive(Debug, Clone)]
pub struct Discriminators {
    pub visual: Mlp,
    pub textual: Mlp,
    pub fused: Mlp,
    pub reversal_weight: f64,
    /// When false the reversal layer is replaced by the identity.
    pub reversal: bool,
}

impl Discriminators {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            visual: Mlp::new(store, &format!("{name}.v"), hidden, hidden, 1, rng),
            textual: Mlp::new(store, &format!("{name}.q"), hidden, hidden, 1, rng),
            fused: Mlp::new(store, &format!("{name}.f"), hidden, hidden, 1, rng),
            reversal_weight: 1.0,
            reversal: true,
        }
    }

    pub fn mlp(&self, kind: FeatureKind) -> &Mlp {
        match kind {
            FeatureKind::Visual => &self.visual,
            FeatureKind::Textual => &self.textual,
            FeatureKind::Fused => &self.fused,
        }
    }

    /// `P(target)` for one sequence, as a `1×1` tensor. The pooled vector is
    /// rescaled to norm `√d` first; without that the reversed gradient can
    /// grow the features without bound.
    pub fn discriminate(&self, fx: &mut Fwd, feature: Var, kind: FeatureKind, valid: &[bool]) -> Result<Var> {
        let pooled = pool(fx.tape, feature, valid)?;
        let width = fx.tape.value(pooled).dims2()?.1 as f64;
        let unit = fx.tape.normalize_rows(pooled, 1e-8)?;
        let pooled = fx.tape.mul_scalar(unit, width.sqrt());
        let x = if self.reversal {
            fx.tape.gradient_reversal(pooled, self.reversal_weight)?
        } else {
            pooled
        };
        let logit = self.mlp(kind).forward(fx, x)?;
        Ok(fx.tape.sigmoid(logit))
    }
}

/// Mean BCE of discriminator outputs (each `1×1`) against domain labels.
pub fn adversarial_loss(tape: &mut Tape, probs: &[Var], labels: &[f64]) -> Result<Var> {
    if probs.is_empty() {
        return Err(AmdaError::Degenerate("adversarial loss over an empty batch".into()));
    }
    if probs.len() != labels.len() {
        return Err(AmdaError::Dimension(format!(
            "{} discriminator outputs for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let p = if probs.len() == 1 {
        probs[0]
    } else {
        tape.concat_rows(probs)?
    };
    let t = tape.constant(Tensor::matrix(labels.len(), 1, labels.to_vec())?);
    Ok(tape.bce_loss(p, t)?)
}

/// `B×B` matrix `C[i][j] = cos(V̄_i, Q̄_j)` from pooled `1×d` rows.
pub fn pooled_cosine_matrix(tape: &mut Tape, v_pooled: &[Var], q_pooled: &[Var]) -> Result<Var> {
    if v_pooled.len() != q_pooled.len() {
        return Err(AmdaError::Dimension(format!(
            "{} pooled videos against {} pooled queries",
            v_pooled.len(),
            q_pooled.len()
        )));
    }
    let v = tape.concat_rows(v_pooled)?;
    let q = tape.concat_rows(q_pooled)?;
    for (m, what) in [(v, "video"), (q, "query")] {
        let t = tape.value(m);
        let c = t.shape()[1];
        for r in 0..t.shape()[0] {
            let n2: f64 = t.row_slice(r).iter().map(|x| x * x).sum();
            if n2.sqrt() <= NORM_EPS {
                return Err(AmdaError::Degenerate(format!(
                    "pooled {what} {r} has near-zero norm (dim {c})"
                )));
            }
        }
    }
    let vn = tape.normalize_rows(v, NORM_EPS)?;
    let qn = tape.normalize_rows(q, NORM_EPS)?;
    let qt = tape.transpose(qn)?;
    Ok(tape.matmul(vn, qt)?)
}

/// In-batch triplet hinge over pooled target features, divided by `B`.
pub fn alignment_loss(tape: &mut Tape, v_pooled: &[Var], q_pooled: &[Var], delta: f64) -> Result<Var> {
    let b = v_pooled.len();
    if b < 2 {
        return Err(AmdaError::Degenerate(format!(
            "alignment needs at least 2 samples, got {b}"
        )));
    }
    let c = pooled_cosine_matrix(tape, v_pooled, q_pooled)?;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..b {
        for j in (0..b).filter(|&j| j != i) {
            // other video against query i, then video i against other query
            pos.push(i * b + i);
            neg.push(j * b + i);
            pos.push(i * b + i);
            neg.push(i * b + j);
        }
    }
    let p = tape.gather(c, &pos)?;
    let n = tape.gather(c, &neg)?;
    let gap = tape.sub(n, p)?;
    let gap = tape.add_scalar(gap, delta);
    let hinge = tape.relu(gap);
    let total = tape.sum(hinge);
    Ok(tape.mul_scalar(total, 1.0 / b as f64))
}

pub const RECON_KERNEL: usize = 3;

/// Two temporal convolutions, `d → d → feature_dim`, with a ReLU between.
#[derive(Debug, Clone, Copy)]
pub struct ReconDecoder {
    pub kernel1: ParamId,
    pub bias1: ParamId,
    pub kernel2: ParamId,
    pub bias2: ParamId,
}

fn conv_init(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> Tensor {
    let a = (6.0 / ((cin + cout) * RECON_KERNEL) as f64).sqrt();
    let n = RECON_KERNEL * cin * cout;
    Tensor::new(
        vec![RECON_KERNEL, cin, cout],
        (0..n).map(|_| rng.gen_range(-a..a)).collect(),
    )
    .expect("sized")
}

impl ReconDecoder {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, feature_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            kernel1: store.add(format!("{name}.conv1.kernel"), conv_init(rng, hidden, hidden)),
            bias1: store.add(format!("{name}.conv1.bias"), Tensor::zeros(&[hidden])),
            kernel2: store.add(format!("{name}.conv2.kernel"), conv_init(rng, hidden, feature_dim)),
            bias2: store.add(format!("{name}.conv2.bias"), Tensor::zeros(&[feature_dim])),
        }
    }

    /// `Conv1D(ReLU(Conv1D(Ṽ_m + F_m)))`.
    pub fn reconstruct(&self, fx: &mut Fwd, v_m: Var, f_m: Var) -> Result<Var> {
        let x = fx.tape.add(v_m, f_m)?;
        let h = fx.tape.conv1d(x, fx.p(self.kernel1), fx.p(self.bias1))?;
        let h = fx.tape.relu(h);
        Ok(fx.tape.conv1d(h, fx.p(self.kernel2), fx.p(self.bias2))?)
    }
}

/// MSE against the unmasked features over every valid frame.
pub fn reconstruction_loss(tape: &mut Tape, recon: Var, original: &FeatureSequence) -> Result<Var> {
    let shape = tape.value(recon).shape().to_vec();
    if shape != original.values().shape() {
        return Err(AmdaError::Dimension(format!(
            "reconstruction {shape:?} against original {:?}",
            original.values().shape()
        )));
    }
    let target = tape.constant(original.values().clone());
    if original.valid().iter().all(|v| *v) {
        return Ok(tape.mse_loss(recon, target)?);
    }
    let (n, f) = (shape[0], shape[1]);
    let mut mask = Vec::with_capacity(n * f);
    for &v in original.valid() {
        mask.extend(std::iter::repeat_n(if v { 1.0 } else { 0.0 }, f));
    }
    let mask = tape.constant(Tensor::matrix(n, f, mask)?);
    let kept = tape.mul(recon, mask)?;
    let mse = tape.mse_loss(kept, target)?;
    Ok(tape.mul_scalar(mse, n as f64 / original.n_valid() as f64))
}

fn batch_mean(tape: &mut Tape, x: Var) -> Result<Var> {
    let b = tape.value(x).dims2()?.0;
    let ones = tape.constant(Tensor::full(&[1, b], 1.0 / b as f64));
    Ok(tape.matmul(ones, x)?)
}

fn check_batches(tape: &Tape, s: Var, t: Var, min: usize, what: &str) -> Result<()> {
    let (bs, ds) = tape.value(s).dims2()?;
    let (bt, dt) = tape.value(t).dims2()?;
    if ds != dt {
        return Err(AmdaError::Dimension(format!("{what} over widths {ds} and {dt}")));
    }
    if bs < min || bt < min {
        return Err(AmdaError::Degenerate(format!(
            "{what} needs at least {min} rows per batch, got {bs} and {bt}"
        )));
    }
    Ok(())
}

/// Squared distance between the batch means (linear-kernel MMD).
pub fn mmd_loss(tape: &mut Tape, source: Var, target: Var) -> Result<Var> {
    check_batches(tape, source, target, 1, "mmd")?;
    let ms = batch_mean(tape, source)?;
    let mt = batch_mean(tape, target)?;
    let d = tape.sub(ms, mt)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.sum(sq))
}

fn covariance(tape: &mut Tape, x: Var) -> Result<Var> {
    let b = tape.value(x).dims2()?.0;
    let mu = batch_mean(tape, x)?;
    let centred = tape.sub(x, mu)?;
    let ct = tape.transpose(centred)?;
    let cov = tape.matmul(ct, centred)?;
    Ok(tape.mul_scalar(cov, 1.0 / (b - 1) as f64))
}

/// `‖Cov_s − Cov_t‖²_F / (4d²)` with unbiased covariances.
pub fn coral_loss(tape: &mut Tape, source: Var, target: Var) -> Result<Var> {
    check_batches(tape, source, target, 2, "coral")?;
    let d = tape.value(source).shape()[1];
    let cs = covariance(tape, source)?;
    let ct = covariance(tape, target)?;
    let diff = tape.sub(cs, ct)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.mul_scalar(total, 1.0 / (4.0 * (d * d) as f64)))
}
