//! Finite-difference checks of every primitive, every composite loss and a
//! full-model spot check, as one reusable suite.

use amda_autodiff::{finite_difference_check_entries, AutodiffError, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Regime, TrainConfig};
use crate::corpus::{generate, Domain, ScenarioSpec, Split};
use crate::encoders::{Encoder, FeatureSequence, Modality};
use crate::error::{AmdaError, Result};
use crate::fusion::Fusion;
use crate::head::{scaled_iou_targets, supervised_loss, PredictorHead, TemporalBoundary};
use crate::objectives::{
    adversarial_loss, alignment_loss, coral_loss, mmd_loss, pool, reconstruction_loss, Discriminators, FeatureKind,
    ReconDecoder,
};
use crate::params::{Bound, Fwd, ParamStore};
use crate::trainer::{TrainData, Trainer};

pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_INSTANCES: u64 = 20;
/// The full-model spot check runs at this multiple of the suite tolerance.
pub const SPOT_CHECK_SCALE: f64 = 10.0;
pub const SPOT_CHECK_PARAMS: usize = 10;

type Loss = Box<dyn Fn(&mut Tape, &[Var]) -> amda_autodiff::Result<Var>>;

struct Instance {
    inputs: Vec<Tensor>,
    f: Loss,
    /// `None` checks every entry.
    entries: Option<Vec<(usize, usize)>>,
}

impl Instance {
    fn all(inputs: Vec<Tensor>, f: Loss) -> Result<Self> {
        Ok(Self {
            inputs,
            f,
            entries: None,
        })
    }
}

type Maker = fn(&mut ChaCha8Rng, u64) -> Result<Instance>;

pub struct Case {
    pub name: &'static str,
    /// Tolerance multiplier relative to the suite tolerance.
    pub scale: f64,
    make: Maker,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub instances: u64,
    pub checked: usize,
    /// Entries with a kink inside the FD step (see [`GradCheckReport`]).
    ///
    /// [`GradCheckReport`]: amda_autodiff::GradCheckReport
    pub skipped: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

fn lift<T>(r: Result<T>) -> amda_autodiff::Result<T> {
    r.map_err(|e| match e {
        AmdaError::Autodiff(e) => e,
        other => AutodiffError::Degenerate {
            op: "model",
            msg: other.to_string(),
        },
    })
}

fn randn(g: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| g.gen_range(-1.0..1.0)).collect()).expect("consistent shape")
}

fn dim(g: &mut ChaCha8Rng) -> usize {
    g.gen_range(1..6)
}

fn rand_mat(g: &mut ChaCha8Rng) -> Tensor {
    let (r, c) = (dim(g), dim(g));
    randn(g, &[r, c])
}

/// Fixed random weights turn a tensor output into a scalar that exercises
/// every output entry.
fn project(t: &mut Tape, y: Var, seed: u64) -> amda_autodiff::Result<Var> {
    let shape = t.value(y).shape().to_vec();
    let w = t.constant(randn(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xfeed), &shape));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Random sequence whose trailing `pad` rows are padding.
fn sequence(g: &mut ChaCha8Rng, len: usize, dim: usize, pad: usize, modality: Modality) -> Result<FeatureSequence> {
    let valid = (0..len).map(|i| i < len - pad).collect();
    FeatureSequence::new(randn(g, &[len, dim]), valid, modality)
}

fn random_pad_sequence(g: &mut ChaCha8Rng, len: usize, dim: usize, modality: Modality) -> Result<FeatureSequence> {
    let pad = g.gen_range(0..len);
    sequence(g, len, dim, pad, modality)
}

/// Parameters moved off their initial values. Zero-initialised biases would
/// put all-zero padded rows exactly on a ReLU kink.
fn jittered(store: &ParamStore, g: &mut ChaCha8Rng) -> Vec<Tensor> {
    store
        .iter()
        .map(|(_, _, t)| {
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|x| *x += g.gen_range(-0.1..0.1));
            t
        })
        .collect()
}

fn eval_fx<'a>(tape: &'a mut Tape, bound: &'a Bound) -> Fwd<'a> {
    Fwd {
        tape,
        params: bound,
        train: false,
        dropout: 0.0,
    }
}

fn random_targets(g: &mut ChaCha8Rng, n: usize) -> Result<Tensor> {
    let e = g.gen_range(0..n);
    let s = g.gen_range(0..=e);
    scaled_iou_targets(TemporalBoundary::new(s, e)?, n)
}

fn matmul(g: &mut ChaCha8Rng, _: u64) -> Result<Instance> {
    let (n, k, m) = (dim(g), dim(g), dim(g));
    Instance::all(
        vec![randn(g, &[n, k]), randn(g, &[k, m])],
        Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            project(t, y, 1)
        }),
    )
}

fn elementwise(g: &mut ChaCha8Rng, _: u64) -> Result<Instance> {
    let (r, c) = (dim(g), dim(g));
    let b_shape = if g.gen_bool(0.5) { [1, c] } else { [r, c] };
    Instance::all(
        vec![randn(g, &[r, c]), randn(g, &b_shape)],
        Box::new(|t, v| {
            let a = t.add(v[0], v[1])?;
            let s = t.sub(v[0], v[1])?;
            let m = t.mul(v[0], v[1])?;
            let y = t.add(a, s)?;
            let y = t.add(y, m)?;
            project(t, y, 2)
        }),
    )
}

fn scalar_ops(g: &mut ChaCha8Rng, _: u64) -> Result<Instance> {
    let c = g.gen_range(-2.0..2.0);
    Instance::all(
        vec![rand_mat(g)],
        Box::new(move |t, v| {
            let y = t.add_scalar(v[0], c);
            let y = t.mul_scalar(y, c);
            project(t, y, 3)
        }),
    )
}

fn activations(g: &mut ChaCha8Rng, _: u64) -> Result<Instance> {
    Instance::all(
        vec![rand_mat(g)],
        Box::new(|t, v| {
            let a = t.relu(v[0]);
            let b = t.sigmoid(v[0]);
            let y = t.add(a, b)?;
            project(t, y, 4)
        }),
    )
}

fn softmax(g: &mut ChaCha8Rng, _: u64) -> Result<Instance> {
    Instance::all(
        vec![rand_mat(g)],
        Box::new(|t, v| {
            let r = t.softmax(v[0], 1)?;
            let c = t.softmax(v[0], 0)?;
            let y = t.add(r, c)?;
            project(t, y, 5)
        }),
    )
}

fn masked_mean(g: &mut ChaCha8Rng, _: u64) -> Result<Instance> {
    let n = g.gen_range(1..7);
    let mut mask: Vec<bool> = (0..n).map(|_| g.gen_bool(0.6)).collect();
    mask[g.gen_range(0..n)] = true;
    let d = dim(g);
    Instance::all(
        vec![randn(g, &[n, d])],
        Box::new(move |t, v| {
            let y = t.masked_mean(v[0], &mask)?;
            project(t, y, 7)
        }),
    )
}

fn cosine(g: &mut ChaCha8Rng, _: u64) -> Result<Instance> {
    let d = g.gen_range(2..8);
    let (r, c) = (dim(g), d);
    Instance::all(
        vec![randn(g, &[1, d]), randn(g, &[1, d]), randn(g, &[r, c])],
        Box::new(|t, v| {
            let c = t.cosine_similarity(v[0], v[1])?;
            let n = t.normalize_rows(v[2], 1e-8)?;
            let n = project(t, n, 8)?;
            t.add(c, n)
        }),
    )
}

fn conv1d(g: &mut ChaCha8Rng, _: u64) -> Result<Instance> {
    let n = g.gen_range(1..8);
    let k = [1, 3, 5][g.gen_range(0..3)];
    let (cin, cout) = (dim(g), dim(g));
    Instance::all(
        vec![randn(g, &[n, cin]), randn(g, &[k, cin, cout]), randn(g, &[cout])],
        Box::new(|t, v| {
            let y = t.conv1d(v[0], v[1], v[2])?;
            project(t, y, 9)
        }),
    )
}

fn losses(g: &mut ChaCha8Rng, _: u64) -> Result<Instance> {
    let (r, c) = (dim(g), dim(g));
    let target = Tensor::new(vec![r, c], (0..r * c).map(|_| g.gen_range(0.0..1.0)).collect())?;
    Instance::all(
        vec![randn(g, &[r, c]), target, randn(g, &[r, c])],
        Box::new(|t, v| {
            let p = t.sigmoid(v[0]);
            let b = t.bce_loss(p, v[1])?;
            let m = t.mse_loss(v[0], v[2])?;
            t.add(b, m)
        }),
    )
}

fn structural(g: &mut ChaCha8Rng, _: u64) -> Result<Instance> {
    let (r, c) = (dim(g), dim(g) + 1);
    let start = g.gen_range(0..c);
    let len = g.gen_range(1..=c - start);
    let idx: Vec<usize> = (0..4).map(|_| g.gen_range(0..r * c)).collect();
    Instance::all(
        vec![randn(g, &[r, c]), randn(g, &[r, 2])],
        Box::new(move |t, v| {
            let tr = t.transpose(v[0])?;
            let back = t.transpose(tr)?;
            let s = t.slice_cols(back, start, len)?;
            let cc = t.concat_cols(&[s, v[1]])?;
            let cr = t.concat_rows(&[cc, cc])?;
            let gathered = t.gather(v[0], &idx)?;
            let a = project(t, cr, 10)?;
            let b = project(t, gathered, 11)?;
            let m = t.mean(cr);
            let ab = t.add(a, b)?;
            t.add(ab, m)
        }),
    )
}

fn dropout(g: &mut ChaCha8Rng, _: u64) -> Result<Instance> {
    let seed = g.gen::<u64>();
    Instance::all(
        vec![rand_mat(g)],
        Box::new(move |t, v| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let y = t.dropout(v[0], 0.4, true, &mut r)?;
            project(t, y, 12)
        }),
    )
}

fn encoder(g: &mut ChaCha8Rng, _: u64) -> Result<Instance> {
    let (feat, d) = (3, 4);
    let n = g.gen_range(2..6);
    let mut store = ParamStore::new();
    let mut enc = Encoder::new(&mut store, "enc", feat, d, 2, 1, g)?;
    enc.positional = true;
    let x = random_pad_sequence(g, n, feat, Modality::Visual)?;
    Instance::all(
        jittered(&store, g),
        Box::new(move |t, v| {
            let bound = Bound::from_vars(v.to_vec());
            let mut fx = eval_fx(t, &bound);
            let h = lift(enc.encode(&mut fx, &x, &mut ChaCha8Rng::seed_from_u64(0)))?;
            project(t, h, 13)
        }),
    )
}

fn fusion(g: &mut ChaCha8Rng, _: u64) -> Result<Instance> {
    let d = 4;
    let (n, m) = (g.gen_range(2..6), g.gen_range(1..5));
    let mut store = ParamStore::new();
    let fusion = Fusion::new(&mut store, "fusion", d, 2, g)?;
    let np = store.len();
    let v = random_pad_sequence(g, n, d, Modality::Visual)?;
    let q = random_pad_sequence(g, m, d, Modality::Textual)?;
    let mut inputs = jittered(&store, g);
    inputs.push(v.values().clone());
    inputs.push(q.values().clone());
    Instance::all(
        inputs,
        Box::new(move |t, vars| {
            let bound = Bound::from_vars(vars[..np].to_vec());
            let mut fx = eval_fx(t, &bound);
            let mut unused = ChaCha8Rng::seed_from_u64(0);
            let (f, f_tilde) =
                lift(fusion.forward(&mut fx, vars[np], vars[np + 1], v.valid(), q.valid(), &mut unused))?;
            let a = project(t, f, 14)?;
            let b = project(t, f_tilde, 15)?;
            t.add(a, b)
        }),
    )
}

fn supervised(g: &mut ChaCha8Rng, _: u64) -> Result<Instance> {
    let d = 4;
    let n = g.gen_range(2..7);
    let mut store = ParamStore::new();
    let head = PredictorHead::new(&mut store, "head", d, g);
    let np = store.len();
    let targets = random_targets(g, n)?;
    let mut inputs = jittered(&store, g);
    inputs.push(randn(g, &[n, d]));
    Instance::all(
        inputs,
        Box::new(move |t, v| {
            let bound = Bound::from_vars(v[..np].to_vec());
            let mut fx = eval_fx(t, &bound);
            let map = lift(head.score_map(&mut fx, v[np]))?;
            lift(supervised_loss(t, map, &targets))
        }),
    )
}

/// Fusion, head and supervised loss chained, padding included.
fn grounding_path(g: &mut ChaCha8Rng, _: u64) -> Result<Instance> {
    let d = 4;
    let (n, m) = (g.gen_range(2..6), g.gen_range(1..5));
    let mut store = ParamStore::new();
    let fusion = Fusion::new(&mut store, "fusion", d, 2, g)?;
    let head = PredictorHead::new(&mut store, "head", d, g);
    let np = store.len();
    let v = random_pad_sequence(g, n, d, Modality::Visual)?;
    let q = random_pad_sequence(g, m, d, Modality::Textual)?;
    let targets = random_targets(g, n)?;
    let mut inputs = jittered(&store, g);
    inputs.push(v.values().clone());
    inputs.push(q.values().clone());
    Instance::all(
        inputs,
        Box::new(move |t, vars| {
            let bound = Bound::from_vars(vars[..np].to_vec());
            let mut fx = eval_fx(t, &bound);
            let mut unused = ChaCha8Rng::seed_from_u64(0);
            let (_, f_tilde) =
                lift(fusion.forward(&mut fx, vars[np], vars[np + 1], v.valid(), q.valid(), &mut unused))?;
            let map = lift(head.score_map(&mut fx, f_tilde))?;
            lift(supervised_loss(t, map, &targets))
        }),
    )
}

fn adversarial(g: &mut ChaCha8Rng, _: u64) -> Result<Instance> {
    let d = 4;
    let mut store = ParamStore::new();
    let mut disc = Discriminators::new(&mut store, "disc", d, g);
    // the reversal layer reports a deliberately wrong gradient; checked apart
    disc.reversal = false;
    let np = store.len();
    let k = g.gen_range(2..5);
    let mut inputs = jittered(&store, g);
    let mut valids = Vec::new();
    for _ in 0..k {
        let n = g.gen_range(2..6);
        let s = random_pad_sequence(g, n, d, Modality::Visual)?;
        inputs.push(s.values().clone());
        valids.push(s.valid().to_vec());
    }
    Instance::all(
        inputs,
        Box::new(move |t, v| {
            let bound = Bound::from_vars(v[..np].to_vec());
            let mut fx = eval_fx(t, &bound);
            let mut probs = Vec::new();
            let mut labels = Vec::new();
            for (i, valid) in valids.iter().enumerate() {
                probs.push(lift(disc.discriminate(
                    &mut fx,
                    v[np + i],
                    FeatureKind::ALL[i % 3],
                    valid,
                ))?);
                labels.push((i % 2) as f64);
            }
            lift(adversarial_loss(t, &probs, &labels))
        }),
    )
}

fn alignment(g: &mut ChaCha8Rng, _: u64) -> Result<Instance> {
    let d = 4;
    let b = g.gen_range(2..5);
    let mut inputs = Vec::new();
    let mut valids = Vec::new();
    for modality in [Modality::Visual, Modality::Textual] {
        for _ in 0..b {
            let n = g.gen_range(2..5);
            let s = random_pad_sequence(g, n, d, modality)?;
            inputs.push(s.values().clone());
            valids.push(s.valid().to_vec());
        }
    }
    Instance::all(
        inputs,
        Box::new(move |t, v| {
            let mut pooled = Vec::with_capacity(v.len());
            for (&x, m) in v.iter().zip(&valids) {
                pooled.push(lift(pool(t, x, m))?);
            }
            lift(alignment_loss(t, &pooled[..b], &pooled[b..], 0.3))
        }),
    )
}

fn reconstruction(g: &mut ChaCha8Rng, _: u64) -> Result<Instance> {
    let (d, feat) = (4, 3);
    let n = g.gen_range(2..7);
    let mut store = ParamStore::new();
    let dec = ReconDecoder::new(&mut store, "recon", d, feat, g);
    let np = store.len();
    let original = random_pad_sequence(g, n, feat, Modality::Visual)?;
    let mut inputs = jittered(&store, g);
    inputs.push(randn(g, &[n, d]));
    inputs.push(randn(g, &[n, d]));
    Instance::all(
        inputs,
        Box::new(move |t, v| {
            let bound = Bound::from_vars(v[..np].to_vec());
            let mut fx = eval_fx(t, &bound);
            let rec = lift(dec.reconstruct(&mut fx, v[np], v[np + 1]))?;
            lift(reconstruction_loss(t, rec, &original))
        }),
    )
}

fn statistics(g: &mut ChaCha8Rng, _: u64) -> Result<Instance> {
    let d = g.gen_range(2..5);
    let (bs, bt) = (g.gen_range(2..5), g.gen_range(2..5));
    Instance::all(
        vec![randn(g, &[bs, d]), randn(g, &[bt, d])],
        Box::new(|t, v| {
            let m = lift(mmd_loss(t, v[0], v[1]))?;
            let c = lift(coral_loss(t, v[0], v[1]))?;
            t.add(m, c)
        }),
    )
}

fn tiny_scenario(seed: u64) -> ScenarioSpec {
    ScenarioSpec {
        n_frames: 8,
        visual_dim: 6,
        text_dim: 5,
        classes: 3,
        train_per_domain: 6,
        test_per_domain: 2,
        query_min: 2,
        query_max: 4,
        tokens_per_class: 2,
        seed,
        ..ScenarioSpec::default()
    }
}

fn tiny_data(spec: &ScenarioSpec) -> Result<TrainData> {
    let corpus = generate(spec)?;
    let pick = |d: Domain, s: Split| {
        corpus
            .samples
            .iter()
            .filter(|x| x.domain == d && x.split == s)
            .cloned()
            .collect::<Vec<_>>()
    };
    let mut target_train = pick(Domain::Target, Split::Train);
    for s in &mut target_train {
        s.boundary = None;
        s.class = None;
    }
    Ok(TrainData {
        source_train: pick(Domain::Source, Split::Train),
        target_train,
        source_test: pick(Domain::Source, Split::Test),
        target_test: pick(Domain::Target, Split::Test),
    })
}

/// Total AMDA loss of one batch as a function of every parameter.
fn model_instance(
    g: &mut ChaCha8Rng,
    seed: u64,
    hidden: usize,
    heads: usize,
    picks: Option<usize>,
) -> Result<Instance> {
    let cfg = TrainConfig {
        regime: Regime::amda(),
        hidden,
        heads,
        layers: 1,
        batch_size: 2,
        // at d = 4 dropout can blank a whole row, which the similarity rejects
        dropout: if hidden < 8 { 0.0 } else { 0.1 },
        seed,
        ..TrainConfig::desk()
    };
    let mut trainer = Trainer::new(cfg, 6, 5)?;
    trainer.model.disc.reversal = false;
    let data = tiny_data(&tiny_scenario(17 + seed))?;
    let batch = trainer.batches_for_epoch(&data, 0)?.swap_remove(0);
    let inputs = jittered(&trainer.model.store, g);
    let entries = picks.map(|k| {
        (0..k)
            .map(|_| {
                let i = g.gen_range(0..inputs.len());
                (i, g.gen_range(0..inputs[i].numel()))
            })
            .collect()
    });
    Ok(Instance {
        inputs,
        f: Box::new(move |t, v| {
            let bound = Bound::from_vars(v.to_vec());
            Ok(lift(trainer.record_losses(t, &bound, &data, &batch, seed))?.0)
        }),
        entries,
    })
}

fn total(g: &mut ChaCha8Rng, seed: u64) -> Result<Instance> {
    model_instance(g, seed, 4, 2, Some(60))
}

fn spot_check(g: &mut ChaCha8Rng, seed: u64) -> Result<Instance> {
    model_instance(g, seed, 16, 4, Some(SPOT_CHECK_PARAMS))
}

pub fn cases() -> Vec<Case> {
    let c = |name, make: Maker| Case { name, scale: 1.0, make };
    vec![
        c("matmul", matmul),
        c("add/sub/mul (broadcast)", elementwise),
        c("add_scalar/mul_scalar", scalar_ops),
        c("relu/sigmoid", activations),
        c("softmax (both axes)", softmax),
        c("masked_mean", masked_mean),
        c("cosine_similarity/normalize_rows", cosine),
        c("conv1d", conv1d),
        c("bce_loss/mse_loss", losses),
        c("transpose/slice/concat/gather/mean", structural),
        c("dropout (fixed mask)", dropout),
        c("encoder", encoder),
        c("fusion (F, F~)", fusion),
        c("L_sup", supervised),
        c("L_sup through fusion and head", grounding_path),
        c("L_adv", adversarial),
        c("L_align", alignment),
        c("L_recon", reconstruction),
        c("mmd/coral", statistics),
        c("total loss (AMDA)", total),
        Case {
            name: "full-model spot check",
            scale: SPOT_CHECK_SCALE,
            make: spot_check,
        },
    ]
}

impl Case {
    pub fn run(&self, tol: f64, instances: u64) -> Result<CaseReport> {
        let tol = tol * self.scale;
        let (mut checked, mut skipped) = (0, 0);
        let mut max_rel_err = 0.0_f64;
        let mut passed = true;
        for seed in 0..instances {
            let mut g = ChaCha8Rng::seed_from_u64(seed * 104_729 + 3);
            let inst = (self.make)(&mut g, seed)?;
            let entries = inst.entries.unwrap_or_else(|| {
                inst.inputs
                    .iter()
                    .enumerate()
                    .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                    .collect()
            });
            let r = finite_difference_check_entries(|t, v| (inst.f)(t, v), &inst.inputs, &entries, tol)?;
            checked += r.checked;
            skipped += r.skipped;
            max_rel_err = max_rel_err.max(r.max_rel_err);
            passed &= r.passed;
        }
        Ok(CaseReport {
            name: self.name.to_string(),
            instances,
            checked,
            skipped,
            max_rel_err,
            tol,
            passed,
        })
    }
}

/// Runs every case.
pub fn run(tol: f64, instances: u64) -> Result<Vec<CaseReport>> {
    cases().iter().map(|c| c.run(tol, instances)).collect()
}
