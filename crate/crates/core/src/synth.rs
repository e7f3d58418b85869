//! Synthetic corpora for demos and tests.
//!
//! Each category gets a random centroid; a record's patches are that centroid
//! plus a per-record offset plus per-patch noise, so records of one category
//! retrieve each other. Reports are assembled from category-specific phrases.

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{write_features, write_manifest, PatchFeatures, WsiRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub records: usize,
    pub categories: usize,
    pub d: usize,
    pub min_patches: usize,
    pub max_patches: usize,
    /// Spread of records around their category centroid.
    pub record_noise: f32,
    pub patch_noise: f32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            records: 50,
            categories: 3,
            d: 16,
            min_patches: 4,
            max_patches: 24,
            record_noise: 0.35,
            patch_noise: 0.25,
            seed: 0,
        }
    }
}

const SITES: [&str; 8] = [
    "kidney", "lung", "breast", "colon", "liver", "prostate", "thyroid", "bladder",
];

const HISTOLOGY: [&str; 6] = [
    "clear cell carcinoma",
    "adenocarcinoma",
    "squamous cell carcinoma",
    "papillary carcinoma",
    "urothelial carcinoma",
    "invasive ductal carcinoma",
];

const FINDINGS: [&str; 10] = [
    "margins are negative",
    "margins are focally positive",
    "lymphovascular invasion is identified",
    "no lymphovascular invasion is identified",
    "lymph nodes are negative for carcinoma",
    "one lymph node is positive",
    "tumor necrosis is present",
    "perineural invasion is present",
    "the capsule is intact",
    "the adrenal gland is uninvolved",
];

pub fn category_name(i: usize) -> String {
    format!("TCGA-C{:02}", i + 1)
}

fn report(rng: &mut impl Rng, category: usize) -> String {
    let site = SITES[category % SITES.len()];
    let histology = HISTOLOGY[category % HISTOLOGY.len()];
    let grade = rng.random_range(1..=4);
    let size = rng.random_range(10..=95) as f32 / 10.0;
    let findings: Vec<&str> = FINDINGS.choose_multiple(rng, 3).copied().collect();
    format!(
        "Sections of the {site} show {histology}, grade {grade}. The tumor measures {size:.1} cm. {}. {}. {}.",
        capitalize(findings[0]),
        capitalize(findings[1]),
        capitalize(findings[2]),
    )
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

/// Writes `features/<id>.wsif` files and `manifest.jsonl` under `dir`, and
/// returns the manifest path. Ids are `case-0000`, `case-0001`, ...;
/// categories cycle through the records.
pub fn write_synthetic_corpus(dir: &Path, spec: &SynthSpec) -> Result<PathBuf> {
    if spec.records == 0 || spec.categories == 0 || spec.d == 0 {
        return Err(Error::InvalidArgument("records, categories and d must be positive".into()));
    }
    if spec.min_patches == 0 || spec.min_patches > spec.max_patches {
        return Err(Error::InvalidArgument("need 1 <= min_patches <= max_patches".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centroids: Vec<Vec<f32>> = (0..spec.categories)
        .map(|_| (0..spec.d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();

    let mut records = Vec::with_capacity(spec.records);
    for i in 0..spec.records {
        let category = i % spec.categories;
        let id = format!("case-{i:04}");
        let offset: Vec<f32> = centroids[category]
            .iter()
            .map(|c| c + rng.random_range(-spec.record_noise..=spec.record_noise))
            .collect();
        let n = rng.random_range(spec.min_patches..=spec.max_patches);
        let mut data = Vec::with_capacity(n * spec.d);
        for _ in 0..n {
            data.extend(offset.iter().map(|o| o + rng.random_range(-spec.patch_noise..=spec.patch_noise)));
        }
        let rel = PathBuf::from("features").join(format!("{id}.wsif"));
        write_features(&dir.join(&rel), &PatchFeatures::new(n, spec.d, data)?)?;
        records.push(WsiRecord {
            id,
            category: category_name(category),
            report: report(&mut rng, category),
            features_path: rel,
        });
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}
