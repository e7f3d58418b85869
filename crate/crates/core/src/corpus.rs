//! Dataset ingestion: the JSON-Lines manifest, patch-feature files and
//! deterministic train/validation/test splits.
//!
//! # Feature file format
//!
//! ```text
//! offset  size        field
//! 0       4           magic "WSIF"
//! 4       4           version (u32 LE) = 1
//! 8       4           n, patch count (u32 LE)
//! 12      4           d, feature dimension (u32 LE)
//! 16      4·n·d       f32 LE values, row-major
//! ```
//!
//! Trailing bytes after the payload are rejected.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binfmt::{self, Reader, Writer};
use crate::error::{Error, Result};

const FEATURE_MAGIC: &[u8; 4] = b"WSIF";

/// One case: a slide's features, its ground-truth report and its category.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WsiRecord {
    pub id: String,
    pub category: String,
    pub report: String,
    /// Relative to the manifest's directory.
    pub features_path: PathBuf,
}

/// An `n × d` row-major matrix of patch embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures {
    n: usize,
    d: usize,
    data: Vec<f32>,
}

impl PatchFeatures {
    pub fn new(n: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::ShapeMismatch(format!(
                "patch features need n >= 1 and d >= 1, got {n}x{d}"
            )));
        }
        if data.len() != n * d {
            return Err(Error::ShapeMismatch(format!(
                "{n}x{d} features need {} values, got {}",
                n * d,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                row: pos / d,
                col: pos % d,
            });
        }
        Ok(Self { n, d, data })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.d)
    }
}

pub fn encode_features(features: &PatchFeatures) -> Vec<u8> {
    let mut w = Writer::new(FEATURE_MAGIC);
    w.u32(features.n as u32);
    w.u32(features.d as u32);
    w.f32s(&features.data);
    w.buf
}

pub fn decode_features(bytes: &[u8], what: &str) -> Result<PatchFeatures> {
    let mut r = Reader::new(bytes, what);
    r.header(FEATURE_MAGIC)?;
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let data = r.f32s(n.saturating_mul(d))?;
    if r.remaining() != 0 {
        return Err(Error::TruncatedFile(format!(
            "{what}: {} trailing bytes after {n}x{d} payload",
            r.remaining()
        )));
    }
    PatchFeatures::new(n, d, data)
}

pub fn read_features(path: &Path) -> Result<PatchFeatures> {
    let bytes = binfmt::read_file(path)?;
    decode_features(&bytes, &path.display().to_string())
}

pub fn write_features(path: &Path, features: &PatchFeatures) -> Result<()> {
    binfmt::to_u32(features.n, "patch count")?;
    binfmt::to_u32(features.d, "feature dimension")?;
    binfmt::write_atomic(path, &encode_features(features))
}

/// A validated, immutable set of records sharing one feature dimension.
#[derive(Debug, Clone)]
pub struct Corpus {
    records: Vec<WsiRecord>,
    d: usize,
    categories: BTreeSet<String>,
    root: PathBuf,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    /// Loads and validates a manifest. Every feature file is parsed once to
    /// check its dimension and values; features are not kept in memory.
    pub fn load_manifest(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();

        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: WsiRecord =
                serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
                    line: line_no,
                    reason: e.to_string(),
                })?;
            let empty_field = if record.id.is_empty() {
                Some("id")
            } else if record.category.is_empty() {
                Some("category")
            } else if record.report.trim().is_empty() {
                Some("report")
            } else if record.features_path.as_os_str().is_empty() {
                Some("features_path")
            } else {
                None
            };
            if let Some(field) = empty_field {
                return Err(Error::MalformedLine {
                    line: line_no,
                    reason: format!("field `{field}` is empty"),
                });
            }
            if !seen.insert(record.id.clone()) {
                return Err(Error::DuplicateId(record.id));
            }
            records.push(record);
        }
        if records.is_empty() {
            return Err(Error::EmptyCorpus);
        }

        let mut d = None;
        for record in &records {
            let features = read_features(&root.join(&record.features_path))?;
            match d {
                None => d = Some(features.d()),
                Some(expected) if expected != features.d() => {
                    return Err(Error::DimensionMismatch {
                        id: record.id.clone(),
                        expected,
                        found: features.d(),
                    })
                }
                Some(_) => {}
            }
        }
        Ok(Self::from_parts(records, d.expect("non-empty"), root))
    }

    fn from_parts(records: Vec<WsiRecord>, d: usize, root: PathBuf) -> Self {
        let categories = records.iter().map(|r| r.category.clone()).collect();
        let by_id = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        Self {
            records,
            d,
            categories,
            root,
            by_id,
        }
    }

    pub fn records(&self) -> &[WsiRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn categories(&self) -> &BTreeSet<String> {
        &self.categories
    }

    pub fn get(&self, id: &str) -> Option<&WsiRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.id.as_str())
    }

    pub fn features_path(&self, record: &WsiRecord) -> PathBuf {
        self.root.join(&record.features_path)
    }

    pub fn features(&self, record: &WsiRecord) -> Result<PatchFeatures> {
        read_features(&self.features_path(record))
    }

    /// Records whose id is in `ids`, in corpus order.
    pub fn subset<S: AsRef<str>>(&self, ids: &[S]) -> Result<Self> {
        let wanted: HashSet<&str> = ids.iter().map(AsRef::as_ref).collect();
        for id in &wanted {
            if self.get(id).is_none() {
                return Err(Error::InvalidSplit(format!("unknown id {id:?}")));
            }
        }
        let records = self
            .records
            .iter()
            .filter(|r| wanted.contains(r.id.as_str()))
            .cloned()
            .collect();
        Ok(Self::from_parts(records, self.d, self.root.clone()))
    }
}

/// Writes records as a manifest, one JSON object per line.
pub fn write_manifest(path: &Path, records: &[WsiRecord]) -> Result<()> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    binfmt::write_atomic(path, out.as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_ratio: 0.8,
            val_ratio: 0.1,
            test_ratio: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("train", self.train_ratio),
            ("val", self.val_ratio),
            ("test", self.test_ratio),
        ] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::InvalidSplit(format!(
                    "{name} ratio {r} must lie in (0, 1)"
                )));
            }
        }
        let sum = self.train_ratio + self.val_ratio + self.test_ratio;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidSplit(format!("ratios sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Explicit split membership; also the on-disk split file format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIds {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitIds {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = binfmt::read_file(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_vec_pretty(self)?;
        json.push(b'\n');
        binfmt::write_atomic(path, &json)
    }

    /// Checks that the three lists partition the corpus ids exactly.
    pub fn check_partition(&self, corpus: &Corpus) -> Result<()> {
        let mut seen: HashMap<&str, &str> = HashMap::new();
        for (part, ids) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for id in ids {
                if let Some(prev) = seen.insert(id.as_str(), part) {
                    return Err(Error::InvalidSplit(format!(
                        "id {id:?} appears in both {prev} and {part}"
                    )));
                }
                if corpus.get(id).is_none() {
                    return Err(Error::InvalidSplit(format!("unknown id {id:?} in {part}")));
                }
            }
        }
        if seen.len() != corpus.len() {
            return Err(Error::InvalidSplit(format!(
                "split covers {} of {} records",
                seen.len(),
                corpus.len()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, corpus: &Corpus) -> Result<(Corpus, Corpus, Corpus)> {
        self.check_partition(corpus)?;
        Ok((
            corpus.subset(&self.train)?,
            corpus.subset(&self.val)?,
            corpus.subset(&self.test)?,
        ))
    }
}

/// Sorts ids, shuffles them with a ChaCha8 stream seeded by `spec.seed` and
/// cuts at `floor(N·train)` and `floor(N·(train + val))`.
pub fn split_ids(corpus: &Corpus, spec: &SplitSpec) -> Result<SplitIds> {
    spec.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut ids: Vec<String> = corpus.ids().map(str::to_string).collect();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ids.shuffle(&mut rng);

    let n = ids.len() as f64;
    // The epsilon absorbs ratio sums like 0.7 + 0.2 = 0.8999999999999999.
    let cut = |x: f64| ((n * x + 1e-9).floor() as usize).min(ids.len());
    let first = cut(spec.train_ratio);
    let second = cut(spec.train_ratio + spec.val_ratio).max(first);

    let test = ids.split_off(second);
    let val = ids.split_off(first);
    Ok(SplitIds {
        train: ids,
        val,
        test,
    })
}

pub fn split(corpus: &Corpus, spec: &SplitSpec) -> Result<(Corpus, Corpus, Corpus)> {
    split_ids(corpus, spec)?.apply(corpus)
}
