//! Offline builders for the feedback store and the guideline cache.
//!
//! Both stores are JSON Lines, one entry per line, sorted by key.
//!
//! `feedback.jsonl`:
//!
//! | field        | meaning                                          |
//! |--------------|--------------------------------------------------|
//! | `id`         | training record id                               |
//! | `feedback`   | reviewer critique                                |
//! | `generated`  | the report the critique is about                 |
//! | `generator`  | backend id that wrote `generated`                |
//! | `backend_id` | backend id that wrote `feedback`                 |
//! | `timestamp`  | unix seconds (`SOURCE_DATE_EPOCH` when set)      |
//!
//! `guidelines.jsonl`:
//!
//! | field        | meaning                                          |
//! |--------------|--------------------------------------------------|
//! | `category`   | category label                                   |
//! | `guideline`  | guideline text                                   |
//! | `sample_ids` | ids of the reports shown to the analyst, in order |
//! | `backend_id` | backend id that wrote `guideline`                |
//! | `timestamp`  | unix seconds (`SOURCE_DATE_EPOCH` when set)      |
//!
//! Builds skip entries already on disk unless forced. Records that fail are
//! listed in `<store>.errors.json` next to the store, and the build returns
//! [`Error::PartialFailure`] after saving everything that succeeded.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::binfmt::{read_file, write_atomic};
use crate::context::{
    assemble_prompt, build_bundle, render_feedback_request, render_guideline_request, ContextSources,
    FeedbackLookup, GuidelineLookup, IclFlags, Prompt, MAX_GUIDELINE_REPORTS,
};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::genclient::{generate, run_bounded, Backend, RequestSettings, DEFAULT_BUDGET};

/// Unix seconds, or `SOURCE_DATE_EPOCH` when it is set.
pub fn timestamp() -> u64 {
    if let Some(epoch) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.trim().parse().ok()) {
        return epoch;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub(crate) fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::InvalidArgument(format!("{} is not UTF-8", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::MalformedLine {
                line: i + 1,
                reason: format!("{}: {e}", path.display()),
            })
        })
        .collect()
}

pub(crate) fn jsonl_bytes<'a, T: Serialize + 'a>(items: impl IntoIterator<Item = &'a T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn user_prompt(text: String) -> Prompt {
    Prompt {
        system_text: String::new(),
        user_text: text,
        image_payload: Vec::new(),
        reference: None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackEntry {
    pub id: String,
    pub feedback: String,
    pub generated: String,
    pub generator: String,
    pub backend_id: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeedbackStore {
    entries: BTreeMap<String, FeedbackEntry>,
}

impl FeedbackStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut store = Self::new();
        for entry in read_jsonl::<FeedbackEntry>(path)? {
            store.insert(entry)?;
        }
        Ok(store)
    }

    /// Loads `path`, or an empty store when it does not exist yet.
    pub fn load_or_default(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::new())
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        jsonl_bytes(self.entries.values())
    }

    pub fn insert(&mut self, entry: FeedbackEntry) -> Result<()> {
        if entry.feedback.is_empty() {
            return Err(Error::InvalidArgument(format!("empty feedback for {:?}", entry.id)));
        }
        if self.entries.contains_key(&entry.id) {
            return Err(Error::DuplicateId(entry.id));
        }
        self.entries.insert(entry.id.clone(), entry);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&FeedbackEntry> {
        self.entries.get(id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.entries.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FeedbackEntry> {
        self.entries.values()
    }
}

impl FeedbackLookup for FeedbackStore {
    fn feedback(&self, id: &str) -> Option<&str> {
        self.entries.get(id).map(|e| e.feedback.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidelineEntry {
    pub category: String,
    pub guideline: String,
    pub sample_ids: Vec<String>,
    pub backend_id: String,
    pub timestamp: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GuidelineCache {
    entries: BTreeMap<String, GuidelineEntry>,
}

impl GuidelineCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cache = Self::new();
        for entry in read_jsonl::<GuidelineEntry>(path)? {
            cache.insert(entry)?;
        }
        Ok(cache)
    }

    pub fn load_or_default(path: &Path) -> Result<Self> {
        if path.exists() {
            Self::load(path)
        } else {
            Ok(Self::new())
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        jsonl_bytes(self.entries.values())
    }

    pub fn insert(&mut self, entry: GuidelineEntry) -> Result<()> {
        if entry.guideline.is_empty() {
            return Err(Error::InvalidArgument(format!("empty guideline for {:?}", entry.category)));
        }
        if self.entries.contains_key(&entry.category) {
            return Err(Error::DuplicateId(entry.category));
        }
        self.entries.insert(entry.category.clone(), entry);
        Ok(())
    }

    pub fn get(&self, category: &str) -> Option<&GuidelineEntry> {
        self.entries.get(category)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &GuidelineEntry> {
        self.entries.values()
    }
}

impl GuidelineLookup for GuidelineCache {
    fn guideline(&self, category: &str) -> Option<&str> {
        self.entries.get(category).map(|e| e.guideline.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedItem {
    pub key: String,
    pub error: String,
}

/// `<store>.errors.json`.
pub fn error_manifest_path(store: &Path) -> PathBuf {
    let mut p = store.as_os_str().to_owned();
    p.push(".errors.json");
    PathBuf::from(p)
}

/// Writes the error manifest when there are failures and removes a stale one
/// otherwise.
pub(crate) fn settle_failures(store: &Path, failures: Vec<FailedItem>) -> Result<()> {
    let manifest = error_manifest_path(store);
    if failures.is_empty() {
        if manifest.exists() {
            std::fs::remove_file(&manifest).map_err(|e| Error::io(&manifest, e))?;
        }
        return Ok(());
    }
    write_atomic(&manifest, serde_json::to_string_pretty(&failures)?.as_bytes())?;
    Err(Error::PartialFailure {
        failed: failures.len(),
        manifest,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildSummary {
    pub added: usize,
    pub skipped: usize,
}

/// Records per save during a build, so an interrupted build resumes close to
/// where it stopped.
const SAVE_EVERY: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackOptions {
    /// Configuration generating the report under review; the base model by
    /// default.
    pub flags: IclFlags,
    pub k: usize,
    pub force: bool,
    pub budget: usize,
    pub request: RequestSettings,
}

impl Default for FeedbackOptions {
    fn default() -> Self {
        Self {
            flags: IclFlags::BASE,
            k: 1,
            force: false,
            budget: DEFAULT_BUDGET,
            request: RequestSettings::default(),
        }
    }
}

fn feedback_for(
    id: &str,
    sources: &ContextSources<'_>,
    generator: &dyn Backend,
    reviewer: &dyn Backend,
    opts: &FeedbackOptions,
) -> Result<FeedbackEntry> {
    let record = sources
        .train
        .get(id)
        .ok_or_else(|| Error::InvalidArgument(format!("{id:?} not in training corpus")))?;
    let query = sources
        .tokens
        .get(id)
        .ok_or_else(|| Error::InvalidArgument(format!("no token set for record {id:?}")))?;
    let bundle = build_bundle(query, Some(id), opts.flags, opts.k, sources)?;
    let prompt = assemble_prompt(query, &bundle)?;
    let generated = generate(&opts.request.request(prompt), generator)?;
    let request = render_feedback_request(&record.report, &generated.text)?;
    let review = generate(&opts.request.request(user_prompt(request)), reviewer)?;
    if review.text.trim().is_empty() {
        return Err(Error::MalformedResponse("reviewer returned empty feedback".into()));
    }
    Ok(FeedbackEntry {
        id: id.to_string(),
        feedback: review.text,
        generated: generated.text,
        generator: generated.backend_id,
        backend_id: review.backend_id,
        timestamp: timestamp(),
    })
}

/// Generates a report for every training record with `opts.flags` (the
/// record itself excluded from retrieval), asks the reviewer to critique it
/// against the ground truth, and stores the critique at `out`.
pub fn build_feedback_store(
    sources: &ContextSources<'_>,
    generator: &dyn Backend,
    reviewer: &dyn Backend,
    out: &Path,
    opts: &FeedbackOptions,
) -> Result<BuildSummary> {
    if opts.k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut store = if opts.force {
        FeedbackStore::new()
    } else {
        FeedbackStore::load_or_default(out)?
    };
    let todo: Vec<&str> = sources.train.ids().filter(|id| !store.contains(id)).collect();
    let summary = BuildSummary {
        added: 0,
        skipped: sources.train.len() - todo.len(),
    };
    let mut failures = Vec::new();
    let mut added = 0;
    for chunk in todo.chunks(SAVE_EVERY) {
        let results = run_bounded(chunk, opts.budget, |id| feedback_for(id, sources, generator, reviewer, opts));
        for (id, result) in chunk.iter().zip(results) {
            match result {
                Ok(entry) => {
                    store.insert(entry)?;
                    added += 1;
                }
                Err(e) => failures.push(FailedItem {
                    key: id.to_string(),
                    error: e.to_string(),
                }),
            }
        }
        store.save(out)?;
    }
    if todo.is_empty() && !out.exists() {
        store.save(out)?;
    }
    settle_failures(out, failures)?;
    Ok(BuildSummary { added, ..summary })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidelineOptions {
    pub sample_size: usize,
    pub seed: u64,
    pub force: bool,
    pub budget: usize,
    pub request: RequestSettings,
}

impl Default for GuidelineOptions {
    fn default() -> Self {
        Self {
            sample_size: MAX_GUIDELINE_REPORTS,
            seed: 0,
            force: false,
            budget: DEFAULT_BUDGET,
            request: RequestSettings::default(),
        }
    }
}

/// Up to `size` ids of `category`: sorted, shuffled with `seed`, then cut.
pub fn sample_category(train: &Corpus, category: &str, size: usize, seed: u64) -> Vec<String> {
    let mut ids: Vec<String> = train
        .records()
        .iter()
        .filter(|r| r.category == category)
        .map(|r| r.id.clone())
        .collect();
    ids.sort();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    ids.truncate(size);
    ids
}

/// The analyst request for `sample_ids`, in order.
pub fn guideline_request(train: &Corpus, sample_ids: &[String]) -> Result<String> {
    let reports: Vec<&str> = sample_ids
        .iter()
        .map(|id| {
            train
                .get(id)
                .map(|r| r.report.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("{id:?} not in training corpus")))
        })
        .collect::<Result<_>>()?;
    render_guideline_request(&reports)
}

/// One guideline per training category, written from a seeded sample of at
/// most `opts.sample_size` of its reports.
pub fn build_guideline_cache(
    train: &Corpus,
    backend: &dyn Backend,
    out: &Path,
    opts: &GuidelineOptions,
) -> Result<BuildSummary> {
    if !(1..=MAX_GUIDELINE_REPORTS).contains(&opts.sample_size) {
        return Err(Error::InvalidArgument(format!(
            "sample size must be 1..={MAX_GUIDELINE_REPORTS}, got {}",
            opts.sample_size
        )));
    }
    let mut cache = if opts.force {
        GuidelineCache::new()
    } else {
        GuidelineCache::load_or_default(out)?
    };
    let todo: Vec<&String> = train.categories().iter().filter(|c| cache.get(c).is_none()).collect();
    let skipped = train.categories().len() - todo.len();

    let results = run_bounded(&todo, opts.budget, |category| -> Result<GuidelineEntry> {
        let sample_ids = sample_category(train, category, opts.sample_size, opts.seed);
        let request = guideline_request(train, &sample_ids)?;
        let out = generate(&opts.request.request(user_prompt(request)), backend)?;
        if out.text.trim().is_empty() {
            return Err(Error::MalformedResponse("analyst returned an empty guideline".into()));
        }
        Ok(GuidelineEntry {
            category: category.to_string(),
            guideline: out.text,
            sample_ids,
            backend_id: out.backend_id,
            timestamp: timestamp(),
        })
    });
    let mut failures = Vec::new();
    let mut added = 0;
    for (category, result) in todo.iter().zip(results) {
        match result {
            Ok(entry) => {
                cache.insert(entry)?;
                added += 1;
            }
            Err(e) => failures.push(FailedItem {
                key: category.to_string(),
                error: e.to_string(),
            }),
        }
    }
    if added > 0 || !out.exists() {
        cache.save(out)?;
    }
    settle_failures(out, failures)?;
    Ok(BuildSummary { added, skipped })
}
