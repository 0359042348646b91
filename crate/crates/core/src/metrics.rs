//! R@1 at IoU thresholds and evaluation of a model on a sample set.

use serde::{Deserialize, Serialize};

use crate::corpus::{Domain, Sample};
use crate::error::{AmdaError, Result};
use crate::head::{temporal_iou, TemporalBoundary};
use crate::model::{AmdaModel, Predictor};

pub const THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];

/// Percentage of samples whose prediction has IoU strictly above `m`.
pub fn recall_at_iou(preds: &[TemporalBoundary], gts: &[TemporalBoundary], m: f64) -> Result<f64> {
    if preds.len() != gts.len() {
        return Err(AmdaError::Dimension(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Err(AmdaError::Degenerate("recall over an empty sample list".into()));
    }
    let hits = preds
        .iter()
        .zip(gts)
        .filter(|(p, g)| temporal_iou(**p, **g) > m)
        .count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recall {
    pub iou: f64,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub recalls: Vec<Recall>,
    pub samples: usize,
    pub domain: Option<Domain>,
    pub regime: String,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn at(&self, iou: f64) -> Option<f64> {
        self.recalls.iter().find(|r| r.iou == iou).map(|r| r.percent)
    }
}

/// Eval-mode predictions for every sample.
pub fn predict_all(model: &AmdaModel, samples: &[Sample]) -> Result<Vec<TemporalBoundary>> {
    let mut p = Predictor::new(model);
    samples.iter().map(|s| p.predict(&s.video, &s.query)).collect()
}

/// Recall per threshold; `domain`, `regime`, `seed` and `config_hash` are
/// left for the caller to fill in.
pub fn evaluate(model: &AmdaModel, samples: &[Sample], thresholds: &[f64]) -> Result<MetricsReport> {
    let gts: Vec<TemporalBoundary> = samples
        .iter()
        .map(|s| {
            s.boundary
                .ok_or_else(|| AmdaError::AccessViolation(format!("sample {} was loaded without its boundary", s.id)))
        })
        .collect::<Result<_>>()?;
    let preds = predict_all(model, samples)?;
    let recalls = thresholds
        .iter()
        .map(|&m| {
            Ok(Recall {
                iou: m,
                percent: recall_at_iou(&preds, &gts, m)?,
            })
        })
        .collect::<Result<_>>()?;
    let domains: Vec<Domain> = samples.iter().map(|s| s.domain).collect();
    let domain = domains.first().copied().filter(|d| domains.iter().all(|x| x == d));
    Ok(MetricsReport {
        recalls,
        samples: samples.len(),
        domain,
        regime: String::new(),
        seed: 0,
        config_hash: String::new(),
    })
}
