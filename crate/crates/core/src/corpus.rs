//! Synthetic source/target grounding corpus: generation, on-disk layout,
//! access-controlled loading and paired batch iteration.
//!
//! Layout of a corpus directory:
//! - `manifest.toml`: format version, scenario echo, per-sample record table
//! - `labels.toml`: boundaries and classes, read only by labeled/eval access
//! - `corpus.bin`: headered little-endian f32 blobs

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use amda_autodiff::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::config_error;
use crate::encoders::{FeatureSequence, Modality};
use crate::error::{AmdaError, Result};
use crate::head::TemporalBoundary;

pub const FORMAT_VERSION: u32 = 1;
pub const BLOB_MAGIC: &[u8; 4] = b"AMDA";
pub const BLOB_HEADER: usize = 16;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const LABELS_FILE: &str = "labels.toml";
pub const BLOB_FILE: &str = "corpus.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn label(self) -> f64 {
        match self {
            Domain::Source => crate::objectives::SOURCE_LABEL,
            Domain::Target => crate::objectives::TARGET_LABEL,
        }
    }

    pub fn index(self) -> u64 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = AmdaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            _ => Err(AmdaError::Config(format!("unknown domain {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = AmdaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(AmdaError::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// What a loader is allowed to reveal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Access {
    /// Boundaries included; source domain only.
    Labeled,
    /// Features only; the label file is never opened.
    UnlabeledTrain,
    /// Boundaries included for any domain and split.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub n_frames: usize,
    pub visual_dim: usize,
    pub text_dim: usize,
    pub classes: usize,
    pub train_per_domain: usize,
    pub test_per_domain: usize,
    pub theta: f64,
    pub bias: f64,
    pub sigma: f64,
    pub seed: u64,
    pub query_min: usize,
    pub query_max: usize,
    pub tokens_per_class: usize,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            n_frames: 32,
            visual_dim: 24,
            text_dim: 16,
            classes: 8,
            train_per_domain: 2000,
            test_per_domain: 500,
            theta: PI / 3.0,
            bias: 1.0,
            sigma: 0.3,
            seed: 0,
            query_min: 4,
            query_max: 10,
            tokens_per_class: 4,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AmdaError::Config(m));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if !(0.0..=PI).contains(&self.theta) {
            return bad(format!("rotation angle {} outside [0, π]", self.theta));
        }
        if !(self.sigma >= 0.0) || !(self.bias >= 0.0) {
            return bad("noise and bias magnitudes must be non-negative".into());
        }
        if self.n_frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.n_frames));
        }
        if self.visual_dim < 2 || self.text_dim == 0 {
            return bad("visual_dim must be ≥ 2 and text_dim ≥ 1".into());
        }
        if self.query_min == 0 || self.query_min > self.query_max {
            return bad(format!(
                "invalid query length range {}..={}",
                self.query_min, self.query_max
            ));
        }
        if self.tokens_per_class == 0 || self.train_per_domain == 0 || self.test_per_domain == 0 {
            return bad("token bank and split sizes must be positive".into());
        }
        let (lo, hi) = segment_length_range(self.n_frames);
        if lo > hi {
            return bad(format!("no admissible segment length for {} frames", self.n_frames));
        }
        Ok(())
    }

    /// Parses TOML; keys left out keep their default values.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| config_error(text, &e))?;
        let base = toml::Table::try_from(Self::default()).map_err(|e| AmdaError::Config(e.to_string()))?;
        for (k, v) in base {
            table.entry(k).or_insert(v);
        }
        let spec: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| AmdaError::Config(e.message().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

/// Admissible segment lengths: 10% to 60% of `n`, at least one frame.
pub fn segment_length_range(n: usize) -> (usize, usize) {
    let lo = ((0.1 * n as f64).ceil() as usize).max(1);
    let hi = (0.6 * n as f64).floor() as usize;
    (lo, hi)
}

/// One grounding sample. `boundary` and `class` are absent under
/// unlabeled access.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u32,
    pub domain: Domain,
    pub split: Split,
    pub video: FeatureSequence,
    pub query: FeatureSequence,
    pub boundary: Option<TemporalBoundary>,
    pub class: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: ScenarioSpec,
    pub samples: Vec<Sample>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| normal(rng)).collect()).collect()
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Rotation by `theta` on disjoint random coordinate pairs, then a bias of
/// magnitude `b` along a random unit direction.
#[derive(Debug, Clone)]
struct TargetShift {
    pairs: Vec<(usize, usize)>,
    cos: f64,
    sin: f64,
    bias: Vec<f64>,
}

impl TargetShift {
    fn new(rng: &mut ChaCha8Rng, dim: usize, theta: f64, b: f64) -> Self {
        let mut perm: Vec<usize> = (0..dim).collect();
        perm.shuffle(rng);
        let pairs = perm.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let mut dir: Vec<f64> = (0..dim).map(|_| normal(rng)).collect();
        let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|x| *x *= b / norm);
        Self {
            pairs,
            cos: theta.cos(),
            sin: theta.sin(),
            bias: dir,
        }
    }

    fn apply(&self, row: &mut [f64]) {
        for &(i, j) in &self.pairs {
            let (a, b) = (row[i], row[j]);
            row[i] = self.cos * a - self.sin * b;
            row[j] = self.sin * a + self.cos * b;
        }
        for (x, b) in row.iter_mut().zip(&self.bias) {
            *x += b;
        }
    }
}

/// Independent stream per sample derived from the master seed.
fn sample_rng(seed: u64, id: u32) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1 + id as u64);
    r
}

/// Deterministic corpus generation from `spec`.
pub fn generate(spec: &ScenarioSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes = normal_rows(&mut master, spec.classes, spec.visual_dim);
    let background: Vec<f64> = (0..spec.visual_dim).map(|_| normal(&mut master)).collect();
    let tokens: Vec<Vec<Vec<f64>>> = (0..spec.classes)
        .map(|_| normal_rows(&mut master, spec.tokens_per_class, spec.text_dim))
        .collect();
    let shift = TargetShift::new(&mut master, spec.visual_dim, spec.theta, spec.bias);

    let (lo, hi) = segment_length_range(spec.n_frames);
    let segments: Vec<(usize, usize)> = (lo..=hi)
        .flat_map(|len| (0..=spec.n_frames - len).map(move |s| (s, s + len - 1)))
        .collect();

    let mut samples = Vec::new();
    let mut next_id = 0u32;
    for domain in [Domain::Source, Domain::Target] {
        for (split, count) in [
            (Split::Train, spec.train_per_domain),
            (Split::Test, spec.test_per_domain),
        ] {
            // stratified class assignment
            let mut classes: Vec<usize> = (0..count).map(|i| i % spec.classes).collect();
            classes.shuffle(&mut master);
            for class in classes {
                let id = next_id;
                next_id += 1;
                let mut rng = sample_rng(spec.seed, id);
                let (s, e) = segments[rng.gen_range(0..segments.len())];
                let mut video = Vec::with_capacity(spec.n_frames * spec.visual_dim);
                for t in 0..spec.n_frames {
                    let base = if (s..=e).contains(&t) {
                        &prototypes[class]
                    } else {
                        &background
                    };
                    let mut row: Vec<f64> = base.iter().map(|x| x + spec.sigma * normal(&mut rng)).collect();
                    if domain == Domain::Target {
                        shift.apply(&mut row);
                    }
                    video.extend(row.into_iter().map(round_f32));
                }
                let m = rng.gen_range(spec.query_min..=spec.query_max);
                let mut query = Vec::with_capacity(m * spec.text_dim);
                for _ in 0..m {
                    let tok = &tokens[class][rng.gen_range(0..spec.tokens_per_class)];
                    query.extend(tok.iter().map(|x| round_f32(x + spec.sigma * normal(&mut rng))));
                }
                samples.push(Sample {
                    id,
                    domain,
                    split,
                    video: FeatureSequence::full(
                        Tensor::matrix(spec.n_frames, spec.visual_dim, video)?,
                        Modality::Visual,
                    )?,
                    query: FeatureSequence::full(Tensor::matrix(m, spec.text_dim, query)?, Modality::Textual)?,
                    boundary: Some(TemporalBoundary { start: s, end: e }),
                    class: Some(class),
                });
            }
        }
    }
    Ok(Corpus {
        spec: spec.clone(),
        samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordEntry {
    pub id: u32,
    pub domain: Domain,
    pub split: Split,
    pub visual_offset: u64,
    pub visual_rows: u32,
    pub visual_cols: u32,
    pub query_offset: u64,
    pub query_rows: u32,
    pub query_cols: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub scenario: ScenarioSpec,
    pub records: Vec<RecordEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelEntry {
    id: u32,
    start: usize,
    end: usize,
    class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LabelFile {
    labels: Vec<LabelEntry>,
}

/// Appends one headered f32 blob; returns the header offset.
pub fn write_blob(out: &mut Vec<u8>, t: &Tensor, record_id: u32) -> Result<u64> {
    let (rows, cols) = t.dims2()?;
    let offset = out.len() as u64;
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out.extend_from_slice(&record_id.to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(offset)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Reads the blob at `offset`, checking the header against expectations.
/// Returns the tensor and the offset just past the blob.
pub fn read_blob(
    bytes: &[u8],
    offset: u64,
    path: &Path,
    expect: Option<(u32, u32, u32)>,
) -> Result<(Tensor, u32, u64)> {
    let fail = |at: u64, msg: String| AmdaError::Format {
        path: path.to_path_buf(),
        offset: at,
        msg,
    };
    let at = usize::try_from(offset).map_err(|_| fail(offset, "offset overflow".into()))?;
    if at + BLOB_HEADER > bytes.len() {
        return Err(fail(offset, "truncated blob header".into()));
    }
    if &bytes[at..at + 4] != BLOB_MAGIC {
        return Err(fail(offset, "bad blob magic".into()));
    }
    let (rows, cols, id) = (u32_at(bytes, at + 4), u32_at(bytes, at + 8), u32_at(bytes, at + 12));
    if let Some((er, ec, eid)) = expect {
        if (rows, cols, id) != (er, ec, eid) {
            return Err(fail(
                offset,
                format!("blob header {rows}×{cols} id {id}, manifest says {er}×{ec} id {eid}"),
            ));
        }
    }
    let n = rows as usize * cols as usize;
    let start = at + BLOB_HEADER;
    let end = start + 4 * n;
    if end > bytes.len() {
        return Err(fail(
            start as u64,
            format!("blob payload needs {} bytes, file ends early", 4 * n),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for k in 0..n {
        let v = f32::from_le_bytes(bytes[start + 4 * k..start + 4 * k + 4].try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(fail((start + 4 * k) as u64, "non-finite value".into()));
        }
        data.push(v as f64);
    }
    Ok((Tensor::matrix(rows as usize, cols as usize, data)?, id, end as u64))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| AmdaError::io(path, e))?;
    f.write_all(bytes).map_err(|e| AmdaError::io(path, e))
}

impl Corpus {
    /// Writes manifest, labels and blob file into `dir` (created if needed).
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| AmdaError::io(dir, e))?;
        let mut blob = Vec::new();
        let mut records = Vec::with_capacity(self.samples.len());
        let mut labels = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let visual_offset = write_blob(&mut blob, s.video.values(), 2 * s.id)?;
            let query_offset = write_blob(&mut blob, s.query.values(), 2 * s.id + 1)?;
            records.push(RecordEntry {
                id: s.id,
                domain: s.domain,
                split: s.split,
                visual_offset,
                visual_rows: s.video.len() as u32,
                visual_cols: s.video.dim() as u32,
                query_offset,
                query_rows: s.query.len() as u32,
                query_cols: s.query.dim() as u32,
            });
            let (b, class) = match (s.boundary, s.class) {
                (Some(b), Some(c)) => (b, c),
                _ => return Err(AmdaError::Config(format!("sample {} lacks its label", s.id))),
            };
            labels.push(LabelEntry {
                id: s.id,
                start: b.start,
                end: b.end,
                class,
            });
        }
        let manifest = CorpusManifest {
            format_version: FORMAT_VERSION,
            scenario: self.spec.clone(),
            records,
        };
        let text = toml::to_string(&manifest).map_err(|e| AmdaError::Config(e.to_string()))?;
        write_file(&dir.join(MANIFEST_FILE), text.as_bytes())?;
        let text = toml::to_string(&LabelFile { labels }).map_err(|e| AmdaError::Config(e.to_string()))?;
        write_file(&dir.join(LABELS_FILE), text.as_bytes())?;
        write_file(&dir.join(BLOB_FILE), &blob)
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| AmdaError::io(path, e))
}

fn parse_toml<T: for<'de> Deserialize<'de>>(path: &Path, text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let offset = e.span().map(|s| s.start as u64).unwrap_or(0);
        AmdaError::Format {
            path: path.to_path_buf(),
            offset,
            msg: e.message().to_string(),
        }
    })
}

/// A corpus directory opened for reading. Holds the manifest only.
#[derive(Debug, Clone)]
pub struct CorpusReader {
    dir: PathBuf,
    pub manifest: CorpusManifest,
}

impl CorpusReader {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST_FILE);
        let manifest: CorpusManifest = parse_toml(&path, &read_text(&path)?)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(AmdaError::Format {
                path,
                offset: 0,
                msg: format!("unsupported format version {}", manifest.format_version),
            });
        }
        let mut last = None;
        for r in &manifest.records {
            for off in [r.visual_offset, r.query_offset] {
                if last.is_some_and(|l| off <= l) {
                    return Err(AmdaError::Format {
                        path: path.clone(),
                        offset: 0,
                        msg: format!("record {} offsets are not strictly increasing", r.id),
                    });
                }
                last = Some(off);
            }
        }
        Ok(Self { dir, manifest })
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.manifest.scenario
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Loads one (domain, split) subset under the given access mode.
    pub fn load(&self, domain: Domain, split: Split, access: Access) -> Result<Vec<Sample>> {
        if access == Access::Labeled && domain == Domain::Target {
            return Err(AmdaError::AccessViolation(format!(
                "labeled access to target-domain {split:?} records"
            )));
        }
        let labels = match access {
            Access::UnlabeledTrain => None,
            Access::Labeled | Access::Eval => {
                let path = self.dir.join(LABELS_FILE);
                let file: LabelFile = parse_toml(&path, &read_text(&path)?)?;
                Some(
                    file.labels
                        .into_iter()
                        .map(|l| (l.id, l))
                        .collect::<std::collections::HashMap<_, _>>(),
                )
            }
        };
        let path = self.dir.join(BLOB_FILE);
        let bytes = fs::read(&path).map_err(|e| AmdaError::io(&path, e))?;
        let mut out = Vec::new();
        for r in self
            .manifest
            .records
            .iter()
            .filter(|r| r.domain == domain && r.split == split)
        {
            let (v, _, _) = read_blob(
                &bytes,
                r.visual_offset,
                &path,
                Some((r.visual_rows, r.visual_cols, 2 * r.id)),
            )?;
            let (q, _, _) = read_blob(
                &bytes,
                r.query_offset,
                &path,
                Some((r.query_rows, r.query_cols, 2 * r.id + 1)),
            )?;
            let (boundary, class) = match &labels {
                None => (None, None),
                Some(map) => {
                    let l = map.get(&r.id).ok_or_else(|| AmdaError::Format {
                        path: self.dir.join(LABELS_FILE),
                        offset: 0,
                        msg: format!("no label for record {}", r.id),
                    })?;
                    if l.start > l.end || l.end >= r.visual_rows as usize {
                        return Err(AmdaError::Format {
                            path: self.dir.join(LABELS_FILE),
                            offset: 0,
                            msg: format!("label of record {} out of range", r.id),
                        });
                    }
                    (
                        Some(TemporalBoundary {
                            start: l.start,
                            end: l.end,
                        }),
                        Some(l.class),
                    )
                }
            };
            out.push(Sample {
                id: r.id,
                domain,
                split,
                video: FeatureSequence::full(v, Modality::Visual)?,
                query: FeatureSequence::full(q, Modality::Textual)?,
                boundary,
                class,
            });
        }
        Ok(out)
    }
}

/// Indices into the source and target sets for one training step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainBatch {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

/// One epoch of paired batches from independent shuffles; partial batches
/// are dropped.
pub fn batch_iterator(
    n_source: usize,
    n_target: usize,
    batch: usize,
    source_rng: &mut ChaCha8Rng,
    target_rng: &mut ChaCha8Rng,
) -> Result<Vec<DomainBatch>> {
    if n_source == 0 || n_target == 0 {
        return Err(AmdaError::Degenerate(
            "batching needs nonempty source and target sets".into(),
        ));
    }
    if batch == 0 || batch > n_source || batch > n_target {
        return Err(AmdaError::Config(format!(
            "batch size {batch} does not fit sets of {n_source} and {n_target}"
        )));
    }
    let mut s: Vec<usize> = (0..n_source).collect();
    let mut t: Vec<usize> = (0..n_target).collect();
    s.shuffle(source_rng);
    t.shuffle(target_rng);
    let count = (n_source / batch).min(n_target / batch);
    Ok((0..count)
        .map(|k| DomainBatch {
            source: s[k * batch..(k + 1) * batch].to_vec(),
            target: t[k * batch..(k + 1) * batch].to_vec(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioSpec {
        ScenarioSpec {
            train_per_domain: 24,
            test_per_domain: 8,
            seed: 5,
            ..ScenarioSpec::default()
        }
    }

    #[test]
    fn segment_range_for_32_frames() {
        assert_eq!(segment_length_range(32), (4, 19));
    }

    #[test]
    fn spec_validation() {
        let bad = [
            ScenarioSpec { classes: 1, ..small() },
            ScenarioSpec { theta: 4.0, ..small() },
            ScenarioSpec { sigma: -0.1, ..small() },
            ScenarioSpec {
                query_min: 5,
                query_max: 4,
                ..small()
            },
        ];
        for s in bad {
            assert!(matches!(generate(&s), Err(AmdaError::Config(_))));
        }
    }

    #[test]
    fn generation_shapes_and_ranges() {
        let spec = small();
        let c = generate(&spec).unwrap();
        assert_eq!(c.samples.len(), 2 * (24 + 8));
        for s in &c.samples {
            let b = s.boundary.unwrap();
            let len = b.len();
            assert!((4..=19).contains(&len) && b.end < 32);
            assert_eq!(s.video.values().shape(), &[32, 24]);
            assert!((4..=10).contains(&s.query.len()));
            assert_eq!(s.query.dim(), 16);
            for v in s.video.values().data() {
                assert_eq!(*v, *v as f32 as f64);
            }
        }
    }

    #[test]
    fn noiseless_unshifted_frames_equal_prototypes() {
        let spec = ScenarioSpec {
            sigma: 0.0,
            theta: 0.0,
            bias: 0.0,
            ..small()
        };
        let c = generate(&spec).unwrap();
        let by_class = |k: usize| c.samples.iter().filter(move |s| s.class == Some(k));
        for k in 0..spec.classes {
            let mut proto: Option<Vec<f64>> = None;
            for s in by_class(k) {
                let b = s.boundary.unwrap();
                for t in b.start..=b.end {
                    let row = s.video.values().row_slice(t).to_vec();
                    match &proto {
                        None => proto = Some(row),
                        Some(p) => assert_eq!(p, &row),
                    }
                }
            }
        }
    }

    #[test]
    fn target_shift_is_an_isometry_plus_offset() {
        let mut g = ChaCha8Rng::seed_from_u64(3);
        let sh = TargetShift::new(&mut g, 6, 1.0, 2.0);
        let bias_norm: f64 = sh.bias.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((bias_norm - 2.0).abs() < 1e-12);
        let mut a = vec![0.3, -1.0, 2.0, 0.5, 0.0, 1.5];
        let norm0: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        sh.apply(&mut a);
        let norm1: f64 = a
            .iter()
            .zip(&sh.bias)
            .map(|(x, b)| (x - b) * (x - b))
            .sum::<f64>()
            .sqrt();
        assert!((norm0 - norm1).abs() < 1e-12);
    }

    #[test]
    fn class_balance_within_twenty_percent() {
        let spec = ScenarioSpec {
            train_per_domain: 100,
            ..small()
        };
        let c = generate(&spec).unwrap();
        for d in [Domain::Source, Domain::Target] {
            let mut counts = vec![0usize; spec.classes];
            let total = c
                .samples
                .iter()
                .filter(|s| s.domain == d)
                .inspect(|s| counts[s.class.unwrap()] += 1)
                .count();
            let uniform = total as f64 / spec.classes as f64;
            for k in counts {
                assert!((k as f64 - uniform).abs() <= 0.2 * uniform);
            }
        }
    }

    #[test]
    fn blob_errors_report_offsets() {
        let mut bytes = Vec::new();
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        write_blob(&mut bytes, &t, 7).unwrap();
        let off = write_blob(&mut bytes, &t, 8).unwrap();
        let p = Path::new("x.bin");
        let (back, id, end) = read_blob(&bytes, off, p, Some((2, 2, 8))).unwrap();
        assert_eq!((back, id, end), (t, 8, bytes.len() as u64));
        let mut bad = bytes.clone();
        bad[off as usize] = b'X';
        match read_blob(&bad, off, p, None) {
            Err(AmdaError::Format { offset, .. }) => assert_eq!(offset, off),
            other => panic!("{other:?}"),
        }
        match read_blob(&bytes[..bytes.len() - 3], off, p, None) {
            Err(AmdaError::Format { offset, .. }) => assert_eq!(offset, off + BLOB_HEADER as u64),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            read_blob(&bytes, off, p, Some((2, 2, 9))),
            Err(AmdaError::Format { .. })
        ));
    }

    #[test]
    fn batches_full_and_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(2);
        let full = batch_iterator(8, 8, 8, &mut a, &mut b).unwrap();
        assert_eq!(full.len(), 1);
        let mut s = full[0].source.clone();
        s.sort();
        assert_eq!(s, (0..8).collect::<Vec<_>>());

        let run = || {
            let mut a = ChaCha8Rng::seed_from_u64(1);
            let mut b = ChaCha8Rng::seed_from_u64(2);
            batch_iterator(23, 30, 5, &mut a, &mut b).unwrap()
        };
        let x = run();
        assert_eq!(x, run());
        assert_eq!(x.len(), 4);
        assert!(matches!(
            batch_iterator(3, 8, 4, &mut a, &mut b),
            Err(AmdaError::Config(_))
        ));
        assert!(matches!(
            batch_iterator(0, 8, 4, &mut a, &mut b),
            Err(AmdaError::Degenerate(_))
        ));
    }

    #[test]
    fn scenario_toml_fills_defaults_and_cites_lines() {
        let spec = ScenarioSpec::from_toml("seed = 9\ntheta = 0.0\n").unwrap();
        assert_eq!(
            spec,
            ScenarioSpec {
                seed: 9,
                theta: 0.0,
                ..ScenarioSpec::default()
            }
        );
        assert_eq!(ScenarioSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        match ScenarioSpec::from_toml("seed = 1\nsigma = = 2\n") {
            Err(AmdaError::Config(m)) => assert!(m.starts_with("line 2"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(ScenarioSpec::from_toml("frames = 3\n").is_err());
        assert!(ScenarioSpec::from_toml("classes = 1\n").is_err());
    }
}
