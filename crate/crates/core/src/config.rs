//! Training configuration, regimes and their TOML form.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{AmdaError, Result};
use crate::objectives::FeatureKind;

/// Which loss components a run trains with.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Regime {
    pub source_sup: bool,
    pub target_sup: bool,
    /// Discriminated feature kinds; `None` disables the adversarial term.
    pub adv: Option<Vec<FeatureKind>>,
    pub align: bool,
    pub recon: bool,
    pub mmd: bool,
    pub coral: bool,
}

impl Regime {
    fn base() -> Self {
        Self {
            source_sup: true,
            target_sup: false,
            adv: None,
            align: false,
            recon: false,
            mmd: false,
            coral: false,
        }
    }

    pub fn source_only() -> Self {
        Self::base()
    }

    pub fn amda() -> Self {
        Self::components(true, true, true)
    }

    pub fn supervised_target() -> Self {
        Self {
            target_sup: true,
            ..Self::base()
        }
    }

    pub fn target_only() -> Self {
        Self {
            source_sup: false,
            target_sup: true,
            ..Self::base()
        }
    }

    pub fn components(adv: bool, align: bool, recon: bool) -> Self {
        Self {
            adv: adv.then(|| FeatureKind::ALL.to_vec()),
            align,
            recon,
            ..Self::base()
        }
    }

    /// Adversarial term restricted to `kinds`; empty means source-only.
    pub fn adv_kinds(kinds: &[FeatureKind]) -> Self {
        let mut k = kinds.to_vec();
        k.sort();
        k.dedup();
        Self {
            adv: (!k.is_empty()).then_some(k),
            ..Self::base()
        }
    }

    /// Whether any term needs target-domain features.
    pub fn uses_target(&self) -> bool {
        self.target_sup || self.adv.is_some() || self.align || self.recon || self.mmd || self.coral
    }

    /// Whether any term needs source-domain features.
    pub fn uses_source(&self) -> bool {
        self.source_sup || self.adv.is_some() || self.recon || self.mmd || self.coral
    }

    /// The eight component combinations, in ablation-table order.
    pub fn component_grid() -> Vec<Regime> {
        [
            (false, false, false),
            (false, false, true),
            (false, true, false),
            (true, false, false),
            (false, true, true),
            (true, false, true),
            (true, true, false),
            (true, true, true),
        ]
        .into_iter()
        .map(|(a, l, r)| Regime::components(a, l, r))
        .collect()
    }

    /// Discriminator modality subsets, in ablation-table order.
    pub fn discriminator_grid() -> Vec<Regime> {
        use FeatureKind::*;
        [
            vec![],
            vec![Textual],
            vec![Visual],
            vec![Visual, Textual],
            vec![Fused],
            vec![Visual, Textual, Fused],
        ]
        .iter()
        .map(|k| Regime::adv_kinds(k))
        .collect()
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let uda = self.adv.is_some() || self.align || self.recon;
        if !self.source_sup && self.target_sup && !uda && !self.mmd && !self.coral {
            return write!(f, "target-only");
        }
        if self.source_sup && self.target_sup && !uda && !self.mmd && !self.coral {
            return write!(f, "supervised-target");
        }
        if !self.source_sup || self.target_sup {
            return write!(f, "custom");
        }
        let all = self.adv.as_deref() == Some(&FeatureKind::ALL[..]);
        let mut parts: Vec<String> = Vec::new();
        if let Some(k) = &self.adv {
            if all {
                parts.push("adv".into());
            } else {
                let names: Vec<&str> = k.iter().map(|k| k.short()).collect();
                parts.push(format!("adv[{}]", names.join(",")));
            }
        }
        if self.align {
            parts.push("align".into());
        }
        if self.recon {
            parts.push("recon".into());
        }
        if self.mmd {
            parts.push("mmd".into());
        }
        if self.coral {
            parts.push("coral".into());
        }
        match parts.len() {
            0 => write!(f, "source-only"),
            _ if all && self.align && self.recon && !self.mmd && !self.coral => write!(f, "amda"),
            _ => write!(f, "{}", parts.join("+")),
        }
    }
}

impl FromStr for Regime {
    type Err = AmdaError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || AmdaError::Config(format!("unknown regime {s:?}"));
        match s {
            "amda" => return Ok(Regime::amda()),
            "source-only" => return Ok(Regime::source_only()),
            "supervised-target" => return Ok(Regime::supervised_target()),
            "target-only" => return Ok(Regime::target_only()),
            _ => {}
        }
        let mut r = Regime::base();
        for part in s.split('+') {
            let part = part.strip_suffix("-only").unwrap_or(part);
            match part {
                "adv" => r.adv = Some(FeatureKind::ALL.to_vec()),
                "align" => r.align = true,
                "recon" => r.recon = true,
                "mmd" => r.mmd = true,
                "coral" => r.coral = true,
                p if p.starts_with("adv[") && p.ends_with(']') => {
                    let mut kinds = Vec::new();
                    for k in p[4..p.len() - 1].split(',') {
                        kinds.push(match k.trim() {
                            "v" => FeatureKind::Visual,
                            "q" => FeatureKind::Textual,
                            "f" => FeatureKind::Fused,
                            _ => return Err(bad()),
                        });
                    }
                    r.adv = Regime::adv_kinds(&kinds).adv;
                    if r.adv.is_none() {
                        return Err(bad());
                    }
                }
                _ => return Err(bad()),
            }
        }
        Ok(r)
    }
}

impl Serialize for Regime {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Regime {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    Desk,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub regime: Regime,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub lambda_adv: f64,
    pub lambda_align: f64,
    pub lambda_recon: f64,
    pub margin: f64,
    pub mask_ratio: f64,
    pub grl_weight: f64,
    /// Sinusoidal position codes on the video encoder.
    pub positional_encoding: bool,
    /// Evaluate held-out splits every this many epochs (0 disables).
    pub eval_every: usize,
}

impl TrainConfig {
    pub fn preset(f: Fidelity) -> Self {
        let mut c = Self {
            regime: Regime::amda(),
            seed: 0,
            epochs: 30,
            batch_size: 16,
            hidden: 64,
            heads: 4,
            layers: 2,
            lr: 1e-3,
            lr_min: 0.0,
            weight_decay: 1e-6,
            dropout: 0.4,
            lambda_adv: 0.5,
            lambda_align: 0.2,
            lambda_recon: 0.5,
            margin: 0.3,
            mask_ratio: 0.2,
            grl_weight: 1.0,
            positional_encoding: true,
            eval_every: 1,
        };
        if f == Fidelity::Full {
            c.epochs = 50;
            c.batch_size = 64;
            c.hidden = 256;
        }
        c
    }

    pub fn desk() -> Self {
        Self::preset(Fidelity::Desk)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AmdaError::Config(m));
        for (name, v) in [
            ("lambda_adv", self.lambda_adv),
            ("lambda_align", self.lambda_align),
            ("lambda_recon", self.lambda_recon),
            ("weight_decay", self.weight_decay),
            ("lr_min", self.lr_min),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if !(self.margin > 0.0 && self.margin < 2.0) {
            return bad(format!("margin must lie in (0, 2), got {}", self.margin));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad(format!("mask_ratio must lie in (0, 1), got {}", self.mask_ratio));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.grl_weight > 0.0) || !self.grl_weight.is_finite() {
            return bad(format!("grl_weight must be positive, got {}", self.grl_weight));
        }
        if self.batch_size == 0 || self.hidden == 0 || self.heads == 0 {
            return bad("batch_size, hidden and heads must be positive".into());
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.regime.align && self.batch_size < 2 {
            return bad("alignment needs batch_size ≥ 2".into());
        }
        if self.regime.coral && self.batch_size < 2 {
            return bad("coral needs batch_size ≥ 2".into());
        }
        if !self.regime.source_sup && !self.regime.target_sup {
            return bad("regime trains no supervised term".into());
        }
        Ok(())
    }

    /// Parses TOML. An optional top-level `fidelity` key selects the preset
    /// that unspecified keys fall back to.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_error(text, &e))?;
        let fidelity = match table.remove("fidelity") {
            None => Fidelity::Desk,
            Some(v) => Fidelity::deserialize(v).map_err(|e| AmdaError::Config(format!("fidelity: {e}")))?,
        };
        let base = toml::Table::try_from(Self::preset(fidelity)).map_err(|e| AmdaError::Config(e.to_string()))?;
        for (k, v) in base {
            table.entry(k).or_insert(v);
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| AmdaError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// Config error citing the 1-based line of the parse failure.
pub fn config_error(text: &str, e: &toml::de::Error) -> AmdaError {
    match e.span() {
        Some(span) => {
            let line = text[..span.start.min(text.len())].matches('\n').count() + 1;
            AmdaError::Config(format!("line {line}: {}", e.message()))
        }
        None => AmdaError::Config(e.message().to_string()),
    }
}

/// `L_sup + λ₁·L_adv + λ₂·L_align + λ₃·L_recon`.
pub fn total_loss(sup: f64, adv: f64, align: f64, recon: f64, lambdas: (f64, f64, f64)) -> f64 {
    sup + lambdas.0 * adv + lambdas.1 * align + lambdas.2 * recon
}
