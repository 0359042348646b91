//! Acceptance gate. Each test prints one `criterion N ... PASS|FAIL` line to
//! stderr (uncaptured) and fails when its criterion does.
//!
//! Run with `cargo test -p amda-core --test acceptance -- --test-threads 1`
//! to get the lines in order; the shared training grid is computed once.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use amda_autodiff::{Tape, Tensor};
use amda_core::checkpoint::Checkpoint;
use amda_core::config::{total_loss, Regime, TrainConfig};
use amda_core::corpus::{generate, Access, Corpus, CorpusReader, Domain, ScenarioSpec, Split};
use amda_core::encoders::mask_video;
use amda_core::experiment::{persist_run, run, RunOutcome, CHECKPOINT_FILE, METRICS_FILE};
use amda_core::gradsuite;
use amda_core::head::{infer_boundary, ScoreMap, TemporalBoundary};
use amda_core::metrics::recall_at_iou;
use amda_core::trainer::{keyed_rng, Purpose, TrainData, Trainer};
use common::{rng, tiny_data, tiny_spec};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Scenario used by every training criterion: the default synthetic shift
/// (K = 8, 24/16-dim features, n = 32, θ = π/3, b = 1, σ = 0.3) with fewer
/// samples so that the full grid fits the runtime budget on one core.
fn acceptance_scenario() -> ScenarioSpec {
    ScenarioSpec {
        train_per_domain: 600,
        test_per_domain: 200,
        seed: 42,
        ..ScenarioSpec::default()
    }
}

fn null_scenario() -> ScenarioSpec {
    ScenarioSpec {
        theta: 0.0,
        bias: 0.0,
        ..acceptance_scenario()
    }
}

fn acceptance_config(regime: Regime, seed: u64) -> TrainConfig {
    TrainConfig {
        regime,
        seed,
        hidden: 32,
        heads: 4,
        layers: 1,
        batch_size: 16,
        epochs: 10,
        lr: 3e-3,
        dropout: 0.1,
        eval_every: 10,
        ..TrainConfig::desk()
    }
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const IOU: f64 = 0.5;

const GRAD_BUDGET: Duration = Duration::from_secs(120);
const GAIN_BUDGET: Duration = Duration::from_secs(15 * 60);
const GRL_CASES: u64 = 100;
const INFERENCE_CASES: u64 = 500;
const RECALL_CASES: u64 = 1000;
const COMPOSITION_TOL: f64 = 1e-12;
const GATING_TOL: f64 = 1e-12;
const MASK_N: usize = 32;
const MASK_BETA: f64 = 0.2;
const MASK_EXPECTED: usize = 6;
const AMDA_MARGIN: f64 = 5.0;
const ADV_MARGIN: f64 = 2.0;
const NULL_GAP: f64 = 2.0;
/// Golden recalls are percentages of 200 samples; one sample is 0.5 points.
const GOLDEN_RECALL_TOL: f64 = 0.5;
const GOLDEN_LOSS_REL_TOL: f64 = 1e-6;
const UNTRAINED_R07_MAX: f64 = 20.0;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} {name}: {verdict} ({detail})");
}

fn finish(n: u32, name: &str, pass: bool, detail: String) {
    report(n, name, pass, &detail);
    assert!(pass, "criterion {n} {name}: {detail}");
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    amda_core::trainer::median(&mut v)
}

struct Scenario {
    _dir: tempfile::TempDir,
    reader: CorpusReader,
}

impl Scenario {
    fn new(spec: &ScenarioSpec) -> Self {
        let dir = tempfile::tempdir().unwrap();
        generate(spec).unwrap().write(dir.path()).unwrap();
        let reader = CorpusReader::open(dir.path()).unwrap();
        Self { _dir: dir, reader }
    }
}

/// Target/source R@1 at IoU 0.5 of every (regime, seed) run.
#[derive(Default)]
struct Grid {
    target: BTreeMap<String, Vec<f64>>,
    source: BTreeMap<String, Vec<f64>>,
    /// Wall time of each regime summed over seeds.
    time: BTreeMap<String, Duration>,
    amda_first: Option<RunOutcome>,
}

impl Grid {
    fn add(&mut self, scenario: &Scenario, regime: Regime) {
        let name = regime.to_string();
        for seed in SEEDS {
            let start = Instant::now();
            let out = run(&scenario.reader, &acceptance_config(regime.clone(), seed), |_| {}).unwrap();
            *self.time.entry(name.clone()).or_default() += start.elapsed();
            let t = out.target.as_ref().and_then(|r| r.at(IOU)).unwrap();
            let s = out.source.as_ref().and_then(|r| r.at(IOU)).unwrap();
            let _ = writeln!(
                std::io::stderr(),
                "  run {name} seed {seed}: source {s:.1} target {t:.1}"
            );
            self.target.entry(name.clone()).or_default().push(t);
            self.source.entry(name.clone()).or_default().push(s);
            if name == "amda" && self.amda_first.is_none() {
                self.amda_first = Some(out);
            }
        }
    }

    fn target_median(&self, regime: &Regime) -> f64 {
        median(&self.target[&regime.to_string()])
    }

    fn time(&self, regimes: &[Regime]) -> Duration {
        regimes.iter().map(|r| self.time[&r.to_string()]).sum()
    }
}

fn shift_grid() -> &'static Grid {
    static GRID: OnceLock<Grid> = OnceLock::new();
    GRID.get_or_init(|| {
        let scenario = Scenario::new(&acceptance_scenario());
        let mut grid = Grid::default();
        let mut regimes = vec![Regime::supervised_target()];
        regimes.extend(Regime::component_grid());
        for r in regimes {
            grid.add(&scenario, r);
        }
        grid
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Golden {
    untrained_source_r07: f64,
    untrained_target_r07: f64,
    recon_epoch_1: f64,
    recon_epoch_10: f64,
}

fn golden_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/acceptance.toml")
}

#[test]
fn criterion_01_gradient_suite() {
    let start = Instant::now();
    let reports = gradsuite::run(gradsuite::DEFAULT_TOL, gradsuite::DEFAULT_INSTANCES).unwrap();
    let elapsed = start.elapsed();
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let worst = reports.iter().map(|r| r.max_rel_err / r.tol).fold(0.0, f64::max);
    let pass = failed.is_empty() && elapsed < GRAD_BUDGET;
    finish(
        1,
        "gradient suite",
        pass,
        format!(
            "{} cases x {} instances, worst err/tol {worst:.3}, failed {failed:?}, {:.1}s",
            reports.len(),
            gradsuite::DEFAULT_INSTANCES,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_02_gradient_reversal_is_exact_negation() {
    let mut bad = 0;
    for seed in 0..GRL_CASES {
        let mut g = rng(seed);
        let (r, c) = (g.gen_range(1..7), g.gen_range(1..7));
        let x = common::randn(&mut g, r, c);
        let w = common::randn(&mut g, r, c);
        let grad = |reverse: bool| {
            let mut t = Tape::new();
            let xv = t.param(x.clone());
            let h = if reverse {
                t.gradient_reversal(xv, 1.0).unwrap()
            } else {
                xv
            };
            let s = t.sigmoid(h);
            let wv = t.constant(w.clone());
            let p = t.mul(s, wv).unwrap();
            let l = t.sum(p);
            t.backward(l).unwrap().get(xv).unwrap().clone()
        };
        let (plain, rev) = (grad(false), grad(true));
        if plain
            .data()
            .iter()
            .zip(rev.data())
            .any(|(a, b)| (-a).to_bits() != b.to_bits())
        {
            bad += 1;
        }
    }
    finish(
        2,
        "GRL exactness",
        bad == 0,
        format!("{bad} of {GRL_CASES} tensors differ from the bitwise negation"),
    );
}

#[test]
fn criterion_03_inference_matches_exhaustive_scan() {
    let mut mismatches = 0;
    for seed in 0..INFERENCE_CASES {
        let mut g = rng(1000 + seed);
        let n = g.gen_range(1..20);
        // coarse levels make ties common
        let levels = g.gen_range(2..6);
        let mut data = vec![0.0; n * n];
        for s in 0..n {
            for e in s..n {
                data[s * n + e] = g.gen_range(0..levels) as f64 / levels as f64;
            }
        }
        let map = ScoreMap::new(Tensor::matrix(n, n, data.clone()).unwrap()).unwrap();
        let got = infer_boundary(&map);
        let mut best: Option<(f64, usize, usize)> = None;
        for s in 0..n {
            for e in s..n {
                let v = data[s * n + e];
                if best.is_none_or(|(b, _, _)| v > b) {
                    best = Some((v, s, e));
                }
            }
        }
        let (_, s, e) = best.unwrap();
        if got != (TemporalBoundary { start: s, end: e }) || got.end < got.start {
            mismatches += 1;
        }
    }
    finish(
        3,
        "inference oracle",
        mismatches == 0,
        format!("{mismatches} of {INFERENCE_CASES} maps disagree"),
    );
}

#[test]
fn criterion_04_recall_matches_brute_force() {
    let mut g = rng(4);
    let (mut mismatches, mut non_monotone) = (0, 0);
    let iou_half = amda_core::head::temporal_iou(
        TemporalBoundary::new(1, 4).unwrap(),
        TemporalBoundary::new(2, 6).unwrap(),
    );
    for _ in 0..RECALL_CASES {
        let k = g.gen_range(1..30);
        let mut pairs = Vec::with_capacity(k);
        for _ in 0..k {
            let mut b = || {
                let s = g.gen_range(0..32);
                TemporalBoundary::new(s, g.gen_range(s..32)).unwrap()
            };
            pairs.push((b(), b()));
        }
        let (p, t): (Vec<_>, Vec<_>) = pairs.iter().copied().unzip();
        let mut last = f64::INFINITY;
        for m in [0.3, 0.5, 0.7] {
            let mut hits = 0;
            for (a, b) in &pairs {
                let inter = (0..32)
                    .filter(|x| (a.start..=a.end).contains(x) && (b.start..=b.end).contains(x))
                    .count();
                let union = (0..32)
                    .filter(|x| (a.start..=a.end).contains(x) || (b.start..=b.end).contains(x))
                    .count();
                if inter as f64 / union as f64 > m {
                    hits += 1;
                }
            }
            let r = recall_at_iou(&p, &t, m).unwrap();
            if r != 100.0 * hits as f64 / k as f64 {
                mismatches += 1;
            }
            if r > last {
                non_monotone += 1;
            }
            last = r;
        }
    }
    let pass = mismatches == 0 && non_monotone == 0 && iou_half == 0.5;
    finish(
        4,
        "metric oracle",
        pass,
        format!("{mismatches} mismatches, {non_monotone} monotonicity violations, IoU((1,4),(2,6)) = {iou_half}"),
    );
}

#[test]
fn criterion_05_loss_composition_and_gating() {
    let composed = total_loss(1.0, 1.0, 1.0, 1.0, (0.5, 0.2, 0.5));
    let data = tiny_data(&tiny_spec(8, 8, 4));
    let cfg = |regime| TrainConfig {
        regime,
        hidden: 8,
        heads: 2,
        layers: 1,
        batch_size: 4,
        epochs: 1,
        dropout: 0.1,
        eval_every: 0,
        seed: 9,
        ..TrainConfig::desk()
    };
    let train = |c: TrainConfig| {
        let mut t = Trainer::new(c, 6, 5).unwrap();
        t.train(&data, |_| {}).unwrap();
        t.model.store.iter().map(|(_, _, x)| x.clone()).collect::<Vec<_>>()
    };
    let base = train(cfg(Regime::source_only()));
    let mut worst = 0.0_f64;
    for c in [
        TrainConfig {
            lambda_adv: 0.0,
            ..cfg(Regime::components(true, false, false))
        },
        TrainConfig {
            lambda_align: 0.0,
            ..cfg(Regime::components(false, true, false))
        },
        TrainConfig {
            lambda_recon: 0.0,
            ..cfg(Regime::components(false, false, true))
        },
    ] {
        for (a, b) in train(c).iter().zip(&base) {
            worst = worst.max(a.max_abs_diff(b));
        }
    }
    let pass = (composed - 2.2).abs() <= COMPOSITION_TOL && worst <= GATING_TOL;
    finish(
        5,
        "loss composition",
        pass,
        format!("total = {composed}, max gated parameter difference {worst:e}"),
    );
}

#[test]
fn criterion_06_masking_contract() {
    let spec = ScenarioSpec {
        n_frames: MASK_N,
        train_per_domain: 64,
        test_per_domain: 4,
        ..acceptance_scenario()
    };
    let data = tiny_data(&spec);
    let cfg = TrainConfig {
        mask_ratio: MASK_BETA,
        ..acceptance_config(Regime::amda(), 1)
    };
    let trainer = Trainer::new(cfg.clone(), spec.visual_dim, spec.text_dim).unwrap();
    let mut counts = BTreeMap::new();
    for (step, batch) in trainer.batches_for_epoch(&data, 0).unwrap().iter().enumerate() {
        for (d, set, idx) in [
            (0, &data.source_train, &batch.source),
            (1, &data.target_train, &batch.target),
        ] {
            for (slot, &i) in idx.iter().enumerate() {
                let video = &set[i].video;
                assert_eq!(video.n_valid(), MASK_N);
                let mut r = keyed_rng(cfg.seed, step as u64, d, slot as u64, Purpose::Mask);
                let m = mask_video(video, MASK_BETA, &mut r).unwrap();
                *counts.entry(m.count()).or_insert(0usize) += 1;
            }
        }
    }
    let pass = counts.len() == 1 && counts.contains_key(&MASK_EXPECTED);
    finish(
        6,
        "masking contract",
        pass,
        format!("masked-frame counts over one epoch: {counts:?}"),
    );
}

#[test]
fn criterion_07_adaptation_gain() {
    let grid = shift_grid();
    let m = |r: Regime| grid.target_median(&r);
    let (sup_t, amda, adv, src) = (
        m(Regime::supervised_target()),
        m(Regime::amda()),
        m(Regime::components(true, false, false)),
        m(Regime::source_only()),
    );
    let elapsed = grid.time(&[
        Regime::supervised_target(),
        Regime::amda(),
        Regime::components(true, false, false),
        Regime::source_only(),
    ]);
    let ordered = sup_t >= amda && amda >= adv && adv >= src;
    let pass = ordered && amda - src >= AMDA_MARGIN && adv - src >= ADV_MARGIN && elapsed < GAIN_BUDGET;
    finish(
        7,
        "adaptation gain",
        pass,
        format!(
            "median target R@1 IoU=0.5: supervised-target {sup_t:.1}, amda {amda:.1}, adv {adv:.1}, source-only {src:.1}; \
             need ordering and gains >= {AMDA_MARGIN}/{ADV_MARGIN}; {:.0}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_08_null_shift() {
    let scenario = Scenario::new(&null_scenario());
    let mut grid = Grid::default();
    grid.add(&scenario, Regime::source_only());
    let key = Regime::source_only().to_string();
    let (t, s) = (median(&grid.target[&key]), median(&grid.source[&key]));
    finish(
        8,
        "null shift",
        (t - s).abs() <= NULL_GAP,
        format!("source-only median R@1 IoU=0.5: source {s:.1}, target {t:.1}"),
    );
}

#[test]
fn criterion_09_ablation_ordering() {
    let grid = shift_grid();
    let regimes = Regime::component_grid();
    let medians: Vec<(String, f64)> = regimes.iter().map(|r| (r.to_string(), grid.target_median(r))).collect();
    let src = grid.target_median(&Regime::source_only());
    let singles = [
        Regime::components(false, false, true),
        Regime::components(false, true, false),
        Regime::components(true, false, false),
    ];
    let singles_improve = singles.iter().all(|r| grid.target_median(r) > src);
    let amda = grid.target_median(&Regime::amda());
    let amda_best = medians.iter().all(|(_, v)| amda >= *v);
    let table: Vec<String> = medians.iter().map(|(n, v)| format!("{n} {v:.1}")).collect();
    finish(
        9,
        "ablation ordering",
        singles_improve && amda_best,
        format!("median target R@1 IoU=0.5: {}", table.join(", ")),
    );
}

#[test]
fn criterion_10_determinism_and_persistence() {
    let spec = tiny_spec(8, 8, 4);
    let corpus_dir = tempfile::tempdir().unwrap();
    let corpus = generate(&spec).unwrap();
    corpus.write(corpus_dir.path()).unwrap();
    let reader = CorpusReader::open(corpus_dir.path()).unwrap();
    let cfg = TrainConfig {
        regime: Regime::amda(),
        hidden: 8,
        heads: 2,
        layers: 1,
        batch_size: 4,
        epochs: 2,
        dropout: 0.1,
        eval_every: 1,
        seed: 3,
        ..TrainConfig::desk()
    };
    let out_dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &out_dirs {
        let out = run(&reader, &cfg, |_| {}).unwrap();
        persist_run(d.path(), &out).unwrap();
    }
    let same = |f: &str| {
        std::fs::read(out_dirs[0].path().join(f)).unwrap() == std::fs::read(out_dirs[1].path().join(f)).unwrap()
    };
    let runs_identical = same(CHECKPOINT_FILE) && same(METRICS_FILE);

    let ck_path = out_dirs[0].path().join(CHECKPOINT_FILE);
    let bytes = std::fs::read(&ck_path).unwrap();
    let ck_round = Checkpoint::load(&ck_path).unwrap().to_bytes().unwrap() == bytes
        && Checkpoint::capture(&Trainer::from_checkpoint(&Checkpoint::load(&ck_path).unwrap()).unwrap())
            .to_bytes()
            .unwrap()
            == bytes;

    let mut samples = Vec::new();
    for (d, s) in [
        (Domain::Source, Split::Train),
        (Domain::Source, Split::Test),
        (Domain::Target, Split::Train),
        (Domain::Target, Split::Test),
    ] {
        samples.extend(reader.load(d, s, Access::Eval).unwrap());
    }
    samples.sort_by_key(|s| s.id);
    let rewritten = tempfile::tempdir().unwrap();
    Corpus {
        spec: reader.spec().clone(),
        samples,
    }
    .write(rewritten.path())
    .unwrap();
    let corpus_round = ["manifest.toml", "labels.toml", "corpus.bin"]
        .iter()
        .all(|f| std::fs::read(corpus_dir.path().join(f)).unwrap() == std::fs::read(rewritten.path().join(f)).unwrap());
    finish(
        10,
        "determinism and persistence",
        runs_identical && ck_round && corpus_round,
        format!(
            "repeat run identical {runs_identical}, checkpoint round trip {ck_round}, corpus round trip {corpus_round}"
        ),
    );
}

/// Pinned observations: recall of an untrained model and the drop of the
/// reconstruction loss over the first ten epochs of the first AMDA run.
#[test]
fn golden_observations() {
    let scenario = Scenario::new(&acceptance_scenario());
    let data = TrainData::load(&scenario.reader, &acceptance_config(Regime::amda(), 1)).unwrap();
    let spec = scenario.reader.spec();
    let untrained = Trainer::new(acceptance_config(Regime::amda(), 1), spec.visual_dim, spec.text_dim).unwrap();
    let r07 = |s: &[amda_core::corpus::Sample]| untrained.evaluate_split(s).unwrap().unwrap().at(0.7).unwrap();
    let grid = shift_grid();
    let history = &grid.amda_first.as_ref().unwrap().history;
    let observed = Golden {
        untrained_source_r07: r07(&data.source_test),
        untrained_target_r07: r07(&data.target_test),
        recon_epoch_1: history[0].median_recon,
        recon_epoch_10: history[9].median_recon,
    };
    if std::env::var_os("AMDA_BLESS").is_some() {
        std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
        std::fs::write(golden_path(), toml::to_string(&observed).unwrap()).unwrap();
    }
    let golden: Golden = toml::from_str(&std::fs::read_to_string(golden_path()).unwrap()).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() <= GOLDEN_LOSS_REL_TOL * b.abs();
    let matches = (observed.untrained_source_r07 - golden.untrained_source_r07).abs() <= GOLDEN_RECALL_TOL
        && (observed.untrained_target_r07 - golden.untrained_target_r07).abs() <= GOLDEN_RECALL_TOL
        && close(observed.recon_epoch_1, golden.recon_epoch_1)
        && close(observed.recon_epoch_10, golden.recon_epoch_10);
    let holds = observed.untrained_source_r07 < UNTRAINED_R07_MAX
        && observed.untrained_target_r07 < UNTRAINED_R07_MAX
        && observed.recon_epoch_10 < observed.recon_epoch_1;
    let detail = format!("observed {observed:?}, golden {golden:?}");
    let _ = writeln!(
        std::io::stderr(),
        "golden observations: {} ({detail})",
        if matches && holds { "PASS" } else { "FAIL" }
    );
    assert!(matches && holds, "{detail}");
}
