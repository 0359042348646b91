//! Loss composition, the training step and the epoch loop.
//!
//! All randomness is drawn from generators keyed by
//! `(seed, counter, domain, slot, purpose)`, so enabling or disabling a loss
//! never shifts the random stream seen by another one.

use amda_autodiff::{Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::corpus::{batch_iterator, Access, CorpusReader, Domain, DomainBatch, Sample, Split};
use crate::encoders::mask_video;
use crate::error::{AmdaError, Result};
use crate::head::{scaled_iou_targets, supervised_loss};
use crate::metrics::{evaluate, MetricsReport, THRESHOLDS};
use crate::model::{AmdaModel, ModelDims};
use crate::objectives::{
    adversarial_loss, alignment_loss, coral_loss, mmd_loss, pool, reconstruction_loss, FeatureKind,
};
use crate::optim::{cosine_lr, AdamW};
use crate::params::Fwd;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Dropout = 3,
    Mask = 4,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for one `(counter, domain, slot, purpose)` key under `seed`.
pub fn keyed_rng(seed: u64, counter: u64, domain: u64, slot: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut h = splitmix(purpose as u64);
    for k in [counter, domain, slot] {
        h = splitmix(h ^ k);
    }
    r.set_stream(h);
    r
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub adv: f64,
    pub align: f64,
    pub recon: f64,
    pub mmd: f64,
    pub coral: f64,
    pub total: f64,
}

/// Training and held-out samples for one run.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub source_train: Vec<Sample>,
    pub target_train: Vec<Sample>,
    pub source_test: Vec<Sample>,
    pub target_test: Vec<Sample>,
}

impl TrainData {
    /// Target training labels are only loaded for regimes that train on
    /// them; every other regime sees unlabeled target records.
    pub fn load(reader: &CorpusReader, cfg: &TrainConfig) -> Result<Self> {
        let target_access = if cfg.regime.target_sup {
            Access::Eval
        } else {
            Access::UnlabeledTrain
        };
        Ok(Self {
            source_train: reader.load(Domain::Source, Split::Train, Access::Labeled)?,
            target_train: reader.load(Domain::Target, Split::Train, target_access)?,
            source_test: reader.load(Domain::Source, Split::Test, Access::Eval)?,
            target_test: reader.load(Domain::Target, Split::Test, Access::Eval)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean: LossBreakdown,
    pub median_recon: f64,
    pub source_test: Option<MetricsReport>,
    pub target_test: Option<MetricsReport>,
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t).expect("scalar add");
    }
    tape.mul_scalar(acc, 1.0 / terms.len() as f64)
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: AmdaModel,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, visual_dim: usize, text_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let dims = ModelDims {
            visual_dim,
            text_dim,
            hidden: cfg.hidden,
            heads: cfg.heads,
            layers: cfg.layers,
            positional: cfg.positional_encoding,
        };
        let mut rng = keyed_rng(cfg.seed, 0, 0, 0, Purpose::Init);
        let mut model = AmdaModel::new(dims, &mut rng)?;
        model.disc.reversal_weight = cfg.grl_weight;
        let opt = AdamW::new(&model.store);
        Ok(Self {
            model,
            opt,
            cfg,
            epoch: 0,
        })
    }

    /// `(source count, target count)` used for batching: a regime touching
    /// one domain batches that domain alone.
    fn batch_sizes(&self, data: &TrainData) -> (usize, usize) {
        let r = &self.cfg.regime;
        let (s, t) = (data.source_train.len(), data.target_train.len());
        match (r.uses_source(), r.uses_target()) {
            (true, false) => (s, s),
            (false, true) => (t, t),
            _ => (s, t),
        }
    }

    pub fn batches_for_epoch(&self, data: &TrainData, epoch: usize) -> Result<Vec<DomainBatch>> {
        let (s, t) = self.batch_sizes(data);
        let mut rs = keyed_rng(self.cfg.seed, epoch as u64, 0, 0, Purpose::Shuffle);
        let mut rt = keyed_rng(self.cfg.seed, epoch as u64, 1, 0, Purpose::Shuffle);
        batch_iterator(s, t, self.cfg.batch_size, &mut rs, &mut rt)
    }

    pub fn total_steps(&self, data: &TrainData) -> Result<usize> {
        let (s, t) = self.batch_sizes(data);
        if self.cfg.batch_size == 0 || self.cfg.batch_size > s.min(t) {
            return Err(AmdaError::Config(format!(
                "batch size {} does not fit sets of {s} and {t}",
                self.cfg.batch_size
            )));
        }
        Ok(self.cfg.epochs * (s / self.cfg.batch_size).min(t / self.cfg.batch_size))
    }

    /// Records the regime's losses for one batch on `tape`. `step` keys the
    /// dropout and masking generators.
    pub fn record_losses(
        &self,
        tape: &mut Tape,
        bound: &crate::params::Bound,
        data: &TrainData,
        batch: &DomainBatch,
        step: u64,
    ) -> Result<(Var, LossBreakdown)> {
        let cfg = &self.cfg;
        let r = &cfg.regime;
        let model = &self.model;
        let mut fx = Fwd {
            tape,
            params: bound,
            train: true,
            dropout: cfg.dropout,
        };
        let mut sup = Vec::new();
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        let (mut v_pool, mut q_pool) = (Vec::new(), Vec::new());
        let mut recon = Vec::new();
        let mut pooled: [[Vec<Var>; 3]; 2] = Default::default();
        let stats = r.mmd || r.coral;

        for domain in [Domain::Source, Domain::Target] {
            let (samples, idx, labeled) = match domain {
                Domain::Source => (&data.source_train, &batch.source, r.source_sup),
                Domain::Target => (&data.target_train, &batch.target, r.target_sup),
            };
            let needed = labeled || r.adv.is_some() || r.recon || stats || (domain == Domain::Target && r.align);
            if !needed {
                continue;
            }
            let d = domain.index();
            for (slot, &i) in idx.iter().enumerate() {
                let s = samples
                    .get(i)
                    .ok_or_else(|| AmdaError::Config(format!("batch index {i} outside {domain:?} set")))?;
                let mut rng = keyed_rng(cfg.seed, step, d, slot as u64, Purpose::Dropout);
                let out = model.forward(&mut fx, &s.video, &s.query, &mut rng)?;
                let (vv, qv) = (s.video.valid(), s.query.valid());
                if labeled {
                    let b = s.boundary.ok_or_else(|| {
                        AmdaError::AccessViolation(format!("supervised sample {} has no boundary", s.id))
                    })?;
                    let map = model.head.score_map(&mut fx, out.f_tilde)?;
                    let targets = scaled_iou_targets(b, s.video.len())?;
                    sup.push(supervised_loss(fx.tape, map, &targets)?);
                }
                if let Some(kinds) = &r.adv {
                    for &k in kinds {
                        let (x, valid) = match k {
                            FeatureKind::Visual => (out.v, vv),
                            FeatureKind::Textual => (out.q, qv),
                            FeatureKind::Fused => (out.f, vv),
                        };
                        probs.push(model.disc.discriminate(&mut fx, x, k, valid)?);
                        labels.push(domain.label());
                    }
                }
                if r.align && domain == Domain::Target {
                    v_pool.push(pool(fx.tape, out.v, vv)?);
                    q_pool.push(pool(fx.tape, out.q, qv)?);
                }
                if stats {
                    for (k, (x, valid)) in [(out.v, vv), (out.q, qv), (out.f, vv)].into_iter().enumerate() {
                        pooled[d as usize][k].push(pool(fx.tape, x, valid)?);
                    }
                }
                if r.recon {
                    let mut mrng = keyed_rng(cfg.seed, step, d, slot as u64, Purpose::Mask);
                    let masked = mask_video(&s.video, cfg.mask_ratio, &mut mrng)?;
                    let (v_m, f_m) = model.forward_masked(&mut fx, &masked, out.q, qv, &mut rng)?;
                    let rec = model.recon.reconstruct(&mut fx, v_m, f_m)?;
                    recon.push(reconstruction_loss(fx.tape, rec, &s.video)?);
                    if let Some(kinds) = &r.adv {
                        for (k, x) in [(FeatureKind::Visual, v_m), (FeatureKind::Fused, f_m)] {
                            if kinds.contains(&k) {
                                probs.push(model.disc.discriminate(&mut fx, x, k, vv)?);
                                labels.push(domain.label());
                            }
                        }
                    }
                }
            }
        }

        let tape = fx.tape;
        if sup.is_empty() {
            return Err(AmdaError::Degenerate("batch holds no supervised sample".into()));
        }
        let mut out = LossBreakdown::default();
        let sup_v = mean_of(tape, &sup);
        let mut total = sup_v;
        let mut parts: Vec<(&str, Var, f64)> = vec![("supervised", sup_v, 1.0)];
        if r.adv.is_some() {
            parts.push(("adversarial", adversarial_loss(tape, &probs, &labels)?, cfg.lambda_adv));
        }
        if r.align {
            parts.push((
                "alignment",
                alignment_loss(tape, &v_pool, &q_pool, cfg.margin)?,
                cfg.lambda_align,
            ));
        }
        if r.recon {
            parts.push(("reconstruction", mean_of(tape, &recon), cfg.lambda_recon));
        }
        for (name, on, f) in [
            ("mmd", r.mmd, mmd_loss as fn(&mut Tape, Var, Var) -> Result<Var>),
            ("coral", r.coral, coral_loss),
        ] {
            if on {
                let mut terms = Vec::new();
                for k in 0..3 {
                    let s = tape.concat_rows(&pooled[0][k])?;
                    let t = tape.concat_rows(&pooled[1][k])?;
                    terms.push(f(tape, s, t)?);
                }
                parts.push((name, mean_of(tape, &terms), cfg.lambda_adv));
            }
        }
        for &(name, v, w) in &parts {
            let value = tape.value(v).item();
            if !value.is_finite() {
                return Err(AmdaError::NonFinite {
                    what: format!("{name} loss"),
                });
            }
            match name {
                "supervised" => out.sup = value,
                "adversarial" => out.adv = value,
                "alignment" => out.align = value,
                "reconstruction" => out.recon = value,
                "mmd" => out.mmd = value,
                _ => out.coral = value,
            }
            if name != "supervised" {
                let weighted = tape.mul_scalar(v, w);
                total = tape.add(total, weighted)?;
            }
        }
        out.total = tape.value(total).item();
        Ok((total, out))
    }

    /// Loss breakdown and per-parameter gradients (indexed like the store).
    pub fn loss_and_grads(
        &self,
        data: &TrainData,
        batch: &DomainBatch,
        step: u64,
    ) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.model.store.bind(&mut tape);
        let (total, losses) = self.record_losses(&mut tape, &bound, data, batch, step)?;
        let grads = tape.backward(total)?;
        let g = self
            .model
            .store
            .ids()
            .map(|id| grads.get_or_zeros(bound.var(id), &tape))
            .collect();
        Ok((losses, g))
    }

    /// One optimisation step at learning rate `lr`.
    pub fn train_step(&mut self, data: &TrainData, batch: &DomainBatch, lr: f64) -> Result<LossBreakdown> {
        let (losses, grads) = self.loss_and_grads(data, batch, self.opt.step)?;
        self.opt
            .update(&mut self.model.store, &grads, lr, self.cfg.weight_decay)?;
        Ok(losses)
    }

    fn report(&self, samples: &[Sample]) -> Result<Option<MetricsReport>> {
        if samples.is_empty() {
            return Ok(None);
        }
        let mut r = evaluate(&self.model, samples, &THRESHOLDS)?;
        r.regime = self.cfg.regime.to_string();
        r.seed = self.cfg.seed;
        r.config_hash = self.cfg.hash();
        Ok(Some(r))
    }

    pub fn evaluate_split(&self, samples: &[Sample]) -> Result<Option<MetricsReport>> {
        self.report(samples)
    }

    pub fn run_epoch(&mut self, data: &TrainData) -> Result<EpochRecord> {
        let total_steps = self.total_steps(data)?;
        let batches = self.batches_for_epoch(data, self.epoch)?;
        let mut sums = LossBreakdown::default();
        let mut recons = Vec::with_capacity(batches.len());
        let mut lr = self.cfg.lr;
        for b in &batches {
            lr = cosine_lr(self.opt.step as usize, total_steps, self.cfg.lr, self.cfg.lr_min);
            let l = self.train_step(data, b, lr)?;
            sums.sup += l.sup;
            sums.adv += l.adv;
            sums.align += l.align;
            sums.recon += l.recon;
            sums.mmd += l.mmd;
            sums.coral += l.coral;
            sums.total += l.total;
            recons.push(l.recon);
        }
        let k = batches.len() as f64;
        let mean = LossBreakdown {
            sup: sums.sup / k,
            adv: sums.adv / k,
            align: sums.align / k,
            recon: sums.recon / k,
            mmd: sums.mmd / k,
            coral: sums.coral / k,
            total: sums.total / k,
        };
        self.epoch += 1;
        let eval = self.cfg.eval_every > 0 && (self.epoch.is_multiple_of(self.cfg.eval_every) || self.epoch == self.cfg.epochs);
        let (source_test, target_test) = if eval {
            (self.report(&data.source_test)?, self.report(&data.target_test)?)
        } else {
            (None, None)
        };
        Ok(EpochRecord {
            epoch: self.epoch,
            lr,
            mean,
            median_recon: median(&mut recons),
            source_test,
            target_test,
        })
    }

    /// Runs the remaining epochs, calling `on_epoch` after each.
    pub fn train(&mut self, data: &TrainData, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<Vec<EpochRecord>> {
        let mut history = Vec::new();
        while self.epoch < self.cfg.epochs {
            let rec = self.run_epoch(data)?;
            on_epoch(&rec);
            history.push(rec);
        }
        Ok(history)
    }
}

pub fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}
