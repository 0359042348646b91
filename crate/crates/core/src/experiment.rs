//! Running training jobs, ablation and sweep grids, and persisting results.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::Checkpoint;
use crate::config::{Regime, TrainConfig};
use crate::corpus::{CorpusReader, Domain};
use crate::error::{AmdaError, Result};
use crate::metrics::MetricsReport;
use crate::trainer::{median, EpochRecord, TrainData, Trainer};

pub const EVENTS_FILE: &str = "events.jsonl";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.amck";
pub const METRICS_FILE: &str = "metrics.json";

/// Default grid for both sweep axes.
pub const SWEEP_VALUES: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];

/// Append-only JSON-lines event log.
pub struct EventLog {
    path: PathBuf,
    file: File,
    hash: String,
}

impl EventLog {
    /// Opens `dir/events.jsonl` for a job with `config_hash`. A log that
    /// already records a job with the same hash is refused unless `force`.
    pub fn open(dir: &Path, config_hash: &str, force: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| AmdaError::io(dir, e))?;
        let path = dir.join(EVENTS_FILE);
        if path.exists() && !force {
            let f = File::open(&path).map_err(|e| AmdaError::io(&path, e))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| AmdaError::io(&path, e))?;
                let Ok(v) = serde_json::from_str::<Value>(&line) else {
                    continue;
                };
                if v["event"] == "job_start" && v["config_hash"] == config_hash {
                    return Err(AmdaError::Config(format!(
                        "{} already holds results for config {config_hash}; pass --force to rerun",
                        dir.display()
                    )));
                }
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| AmdaError::io(&path, e))?;
        Ok(Self {
            path,
            file,
            hash: config_hash.to_string(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Writes `{"event": kind, "config_hash": .., ..fields}` as one line.
    pub fn write(&mut self, kind: &str, fields: Value) -> Result<()> {
        let mut obj = serde_json::Map::new();
        obj.insert("event".into(), json!(kind));
        obj.insert("config_hash".into(), json!(self.hash));
        if let Value::Object(m) = fields {
            obj.extend(m);
        }
        let mut line = serde_json::to_string(&Value::Object(obj)).expect("json value serializes");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .map_err(|e| AmdaError::io(&self.path, e))
    }
}

/// Everything one training run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub source: Option<MetricsReport>,
    pub target: Option<MetricsReport>,
    pub checkpoint: Checkpoint,
}

/// Trains `cfg` on the corpus and evaluates the final model on both test
/// splits. `on_epoch` sees every epoch record as it is produced.
pub fn run(reader: &CorpusReader, cfg: &TrainConfig, on_epoch: impl FnMut(&EpochRecord)) -> Result<RunOutcome> {
    let data = TrainData::load(reader, cfg)?;
    let spec = reader.spec();
    let mut trainer = Trainer::new(cfg.clone(), spec.visual_dim, spec.text_dim)?;
    let history = trainer.train(&data, on_epoch)?;
    let (source, target) = match history.last() {
        Some(r) if r.source_test.is_some() || r.target_test.is_some() => (r.source_test.clone(), r.target_test.clone()),
        _ => (
            trainer.evaluate_split(&data.source_test)?,
            trainer.evaluate_split(&data.target_test)?,
        ),
    };
    Ok(RunOutcome {
        config: cfg.clone(),
        checkpoint: Checkpoint::capture(&trainer),
        history,
        source,
        target,
    })
}

/// Writes the checkpoint and final metrics of one run into `dir`.
pub fn persist_run(dir: &Path, out: &RunOutcome) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| AmdaError::io(dir, e))?;
    out.checkpoint.save(&dir.join(CHECKPOINT_FILE))?;
    let metrics = json!({
        "config_hash": out.config.hash(),
        "regime": out.config.regime.to_string(),
        "seed": out.config.seed,
        "source": out.source,
        "target": out.target,
        "history": out.history,
    });
    let path = dir.join(METRICS_FILE);
    let text = serde_json::to_string_pretty(&metrics).expect("json value serializes");
    std::fs::write(&path, text + "\n").map_err(|e| AmdaError::io(&path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Margin,
    MaskRatio,
}

impl FromStr for SweepParam {
    type Err = AmdaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "margin" => Ok(Self::Margin),
            "mask-ratio" => Ok(Self::MaskRatio),
            _ => Err(AmdaError::Config(format!(
                "unknown sweep parameter {s:?} (margin or mask-ratio)"
            ))),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Margin => "margin",
            Self::MaskRatio => "mask-ratio",
        })
    }
}

/// One planned run: which table and row it fills.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanRow {
    pub table: String,
    pub row: String,
    pub config: TrainConfig,
}

/// The component grid (8 rows) then the discriminator grid (6 rows), for
/// every seed.
pub fn ablation_plan(base: &TrainConfig, seeds: &[u64]) -> Vec<PlanRow> {
    let mut plan = Vec::new();
    for &seed in seeds {
        for (table, grid) in [
            ("components", Regime::component_grid()),
            ("discriminators", Regime::discriminator_grid()),
        ] {
            for (i, regime) in grid.into_iter().enumerate() {
                plan.push(PlanRow {
                    table: table.into(),
                    row: (i + 1).to_string(),
                    config: TrainConfig {
                        regime,
                        seed,
                        ..base.clone()
                    },
                });
            }
        }
    }
    plan
}

pub fn sweep_plan(base: &TrainConfig, param: SweepParam, values: &[f64], seeds: &[u64]) -> Result<Vec<PlanRow>> {
    let mut plan = Vec::new();
    for &seed in seeds {
        for &v in values {
            let mut config = TrainConfig { seed, ..base.clone() };
            match param {
                SweepParam::Margin => config.margin = v,
                SweepParam::MaskRatio => config.mask_ratio = v,
            }
            config.validate()?;
            plan.push(PlanRow {
                table: param.to_string(),
                row: format!("{v}"),
                config,
            });
        }
    }
    Ok(plan)
}

/// A report tagged with the table row it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledReport {
    pub table: String,
    pub row: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub table: String,
    pub row: String,
    pub regime: String,
    pub domain: Option<Domain>,
    pub iou: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub runs: usize,
}

fn domain_name(d: Option<Domain>) -> &'static str {
    match d {
        Some(Domain::Source) => "source",
        Some(Domain::Target) => "target",
        None => "mixed",
    }
}

fn csv_text(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("csv into memory")).expect("csv fields are utf-8")
}

fn metric_name(iou: f64) -> String {
    format!("r1_iou{iou}")
}

/// Reports across seeds and regimes; aggregates are always recomputed from
/// the raw list.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub reports: Vec<LabeledReport>,
}

impl ExperimentResult {
    pub fn push(&mut self, table: &str, row: &str, report: MetricsReport) {
        self.reports.push(LabeledReport {
            table: table.into(),
            row: row.into(),
            report,
        });
    }

    /// Median, min and max over seeds per `(table, row, regime, domain, iou)`,
    /// in first-appearance order.
    pub fn aggregate(&self) -> Vec<Aggregate> {
        let mut out: Vec<(Aggregate, Vec<f64>)> = Vec::new();
        for lr in &self.reports {
            for r in &lr.report.recalls {
                let key = |a: &Aggregate| {
                    a.table == lr.table
                        && a.row == lr.row
                        && a.regime == lr.report.regime
                        && a.domain == lr.report.domain
                        && a.iou == r.iou
                };
                match out.iter_mut().find(|(a, _)| key(a)) {
                    Some((_, xs)) => xs.push(r.percent),
                    None => out.push((
                        Aggregate {
                            table: lr.table.clone(),
                            row: lr.row.clone(),
                            regime: lr.report.regime.clone(),
                            domain: lr.report.domain,
                            iou: r.iou,
                            median: 0.0,
                            min: 0.0,
                            max: 0.0,
                            runs: 0,
                        },
                        vec![r.percent],
                    )),
                }
            }
        }
        out.into_iter()
            .map(|(mut a, mut xs)| {
                a.runs = xs.len();
                a.min = xs.iter().copied().fold(f64::INFINITY, f64::min);
                a.max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                a.median = median(&mut xs);
                a
            })
            .collect()
    }

    /// Median over seeds of one regime's recall on `domain` at `iou`.
    pub fn median_recall(&self, regime: &str, domain: Domain, iou: f64) -> Option<f64> {
        let mut xs: Vec<f64> = self
            .reports
            .iter()
            .filter(|r| r.report.regime == regime && r.report.domain == Some(domain))
            .filter_map(|r| r.report.at(iou))
            .collect();
        (!xs.is_empty()).then(|| median(&mut xs))
    }

    /// One row per `(table, row, regime, seed, domain, metric)`.
    pub fn results_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut row = |fields: &[&str]| w.write_record(fields).expect("csv into memory");
        row(&[
            "table",
            "row",
            "regime",
            "seed",
            "domain",
            "metric",
            "value",
            "config_hash",
        ]);
        for lr in &self.reports {
            let r = &lr.report;
            for rec in &r.recalls {
                row(&[
                    &lr.table,
                    &lr.row,
                    &r.regime,
                    &r.seed.to_string(),
                    domain_name(r.domain),
                    &metric_name(rec.iou),
                    &rec.percent.to_string(),
                    &r.config_hash,
                ]);
            }
        }
        csv_text(w)
    }

    pub fn summary_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut row = |fields: &[&str]| w.write_record(fields).expect("csv into memory");
        row(&[
            "table", "row", "regime", "domain", "metric", "median", "min", "max", "runs",
        ]);
        for a in self.aggregate() {
            row(&[
                &a.table,
                &a.row,
                &a.regime,
                domain_name(a.domain),
                &metric_name(a.iou),
                &a.median.to_string(),
                &a.min.to_string(),
                &a.max.to_string(),
                &a.runs.to_string(),
            ]);
        }
        csv_text(w)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, text) in [(RESULTS_FILE, self.results_csv()), (SUMMARY_FILE, self.summary_csv())] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| AmdaError::io(&path, e))?;
        }
        Ok(())
    }
}

/// Runs every row of `plan` in order, logging to `log` and keeping each
/// run's checkpoint and metrics under `dir/runs/<table>-<row>-seed<seed>`.
pub fn run_plan(reader: &CorpusReader, plan: &[PlanRow], dir: &Path, log: &mut EventLog) -> Result<ExperimentResult> {
    let mut result = ExperimentResult::default();
    for (i, p) in plan.iter().enumerate() {
        let hash = p.config.hash();
        let regime = p.config.regime.to_string();
        log.write(
            "run_start",
            json!({"index": i, "table": p.table, "row": p.row, "regime": regime, "seed": p.config.seed, "run_hash": hash}),
        )?;
        let mut epoch_events = Vec::new();
        let out = run(reader, &p.config, |r| {
            epoch_events.push(serde_json::to_value(r).expect("record serializes"))
        })?;
        for e in epoch_events {
            log.write("epoch", json!({"index": i, "record": e}))?;
        }
        let run_dir = dir
            .join("runs")
            .join(format!("{}-{}-seed{}", p.table, p.row, p.config.seed));
        persist_run(&run_dir, &out)?;
        for report in out.source.iter().chain(out.target.iter()) {
            result.push(&p.table, &p.row, report.clone());
        }
        log.write(
            "run_end",
            json!({"index": i, "source": out.source, "target": out.target}),
        )?;
    }
    Ok(result)
}
