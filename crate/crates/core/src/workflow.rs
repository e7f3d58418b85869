//! End-to-end runs over a working directory.
//!
//! A run reads one manifest and keeps every derived artifact in `workdir`:
//!
//! ```text
//! weights.wsiw         aggregator weights (seeded unless supplied)
//! tokens.wsit          token set per record
//! split.json           train / val / test ids
//! index.wsix           retrieval embeddings of the training split
//! index.json           id and category per index row
//! feedback.jsonl       feedback store
//! guidelines.jsonl     guideline cache
//! generations/*.jsonl  one generated report per test record, with provenance
//! ```
//!
//! Stages are [`ingest`], [`split`], [`index`], [`build_feedback`],
//! [`build_guidelines`], [`generate`], [`evaluate`], [`sweep_length`],
//! [`ablate`] and [`breakdown`]. [`prepare`] runs the first three when their
//! outputs are missing.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::info;
use serde::{Deserialize, Serialize};

use crate::aggregator::{Aggregator, AggregatorConfig, AggregatorWeights, PoolSource, TokenSet, TokenStore};
use crate::binfmt::write_atomic;
use crate::context::{
    assemble_prompt, build_bundle, ContextBundle, ContextSources, FeedbackItem, FeedbackLookup, GuidelineContext,
    GuidelineLookup, IclFlags, NnContext, Prompt,
};
use crate::corpus::{split_ids, Corpus, SplitIds, SplitSpec};
use crate::error::{Error, Result};
use crate::genclient::{backend_from_spec, generate as run_request, run_bounded, Backend, RequestSettings, DEFAULT_BUDGET};
use crate::metrics::{
    evaluate_corpus, length_sweep, sweep_csv, EntityExtractor, EvalPair, FactEntMode, MetricConfig, MetricReport,
    DEFAULT_SWEEP,
};
use crate::pipelines::{
    build_feedback_store, build_guideline_cache, jsonl_bytes, read_jsonl, settle_failures, BuildSummary,
    FeedbackOptions, FeedbackStore, GuidelineCache, GuidelineOptions,
};
use crate::retrieval::{Neighbor, RetrievalIndex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorSettings {
    pub m: usize,
    pub layers: usize,
    pub heads: usize,
    /// Defaults to `4d`.
    pub d_ff: Option<usize>,
    pub seed: u64,
    pub pool: PoolSource,
    /// Load weights from this file instead of seeding them.
    pub weights: Option<PathBuf>,
}

impl Default for AggregatorSettings {
    fn default() -> Self {
        Self {
            m: 32,
            layers: 2,
            heads: 8,
            d_ff: None,
            seed: 0,
            pool: PoolSource::Projected,
            weights: None,
        }
    }
}

impl AggregatorSettings {
    pub fn config(&self, d: usize) -> AggregatorConfig {
        AggregatorConfig {
            m: self.m,
            layers: self.layers,
            heads: self.heads,
            d,
            d_ff: self.d_ff.unwrap_or(4 * d),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSettings {
    pub truncation: usize,
    pub rouge_beta: f64,
    pub fact_ent: FactEntMode,
    /// One entity per line; the built-in list is used when neither this nor
    /// `entity_endpoint` is set.
    pub gazetteer: Option<PathBuf>,
    pub entity_endpoint: Option<String>,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            truncation: 100,
            rouge_beta: 1.0,
            fact_ent: FactEntMode::F1,
            gazetteer: None,
            entity_endpoint: None,
        }
    }
}

/// Everything a run needs. Loadable from TOML; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub workdir: PathBuf,
    pub flags: IclFlags,
    pub k: usize,
    /// Generation backend spec, e.g. `fixed:text`, `echo-nn`, `http`.
    pub backend: String,
    /// Reviewer / analyst backend for the stores; `backend` when unset.
    pub reviewer: Option<String>,
    pub budget: usize,
    pub split: SplitSpec,
    pub aggregator: AggregatorSettings,
    pub request: RequestSettings,
    pub metrics: MetricSettings,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.jsonl"),
            workdir: PathBuf::from("run"),
            flags: IclFlags::BASE,
            k: 3,
            backend: "fixed:".into(),
            reviewer: None,
            budget: DEFAULT_BUDGET,
            split: SplitSpec::default(),
            aggregator: AggregatorSettings::default(),
            request: RequestSettings::default(),
            metrics: MetricSettings::default(),
            sample_size: 20,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        toml::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if self.budget == 0 {
            return Err(Error::InvalidArgument("budget must be at least 1".into()));
        }
        self.split.validate()?;
        self.metric_config().validate()
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.workdir.join(name)
    }

    pub fn weights_path(&self) -> PathBuf {
        self.path("weights.wsiw")
    }

    pub fn tokens_path(&self) -> PathBuf {
        self.path("tokens.wsit")
    }

    pub fn split_path(&self) -> PathBuf {
        self.path("split.json")
    }

    pub fn index_paths(&self) -> (PathBuf, PathBuf) {
        (self.path("index.wsix"), self.path("index.json"))
    }

    pub fn feedback_path(&self) -> PathBuf {
        self.path("feedback.jsonl")
    }

    pub fn guidelines_path(&self) -> PathBuf {
        self.path("guidelines.jsonl")
    }

    /// `generations/<flags>-k<k>.jsonl`.
    pub fn generations_path(&self) -> PathBuf {
        self.path("generations").join(format!("{}.jsonl", run_slug(self.flags, self.k)))
    }

    pub fn metric_config(&self) -> MetricConfig {
        MetricConfig {
            truncation: self.metrics.truncation,
            rouge_beta: self.metrics.rouge_beta,
            fact_ent: self.metrics.fact_ent,
            workers: self.budget,
            ..MetricConfig::default()
        }
    }

    pub fn extractor(&self) -> Result<EntityExtractor> {
        match (&self.metrics.gazetteer, &self.metrics.entity_endpoint) {
            (Some(path), _) => EntityExtractor::load_gazetteer(path),
            (None, Some(endpoint)) => Ok(EntityExtractor::external(endpoint.clone())),
            (None, None) => EntityExtractor::gazetteer(crate::metrics::DEFAULT_GAZETTEER),
        }
    }
}

pub fn run_slug(flags: IclFlags, k: usize) -> String {
    let mut parts = Vec::new();
    if flags.nn {
        parts.push("nn");
    }
    if flags.guideline {
        parts.push("guideline");
    }
    if flags.feedback {
        parts.push("feedback");
    }
    if parts.is_empty() {
        parts.push("base");
    }
    format!("{}-k{k}", parts.join("-"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IngestSummary {
    pub records: usize,
    pub d: usize,
    pub categories: usize,
}

/// Validates the manifest and aggregates every record into `tokens.wsit`.
/// Weights are loaded from the configured file or seeded, and saved to
/// `weights.wsiw` either way.
pub fn ingest(cfg: &RunConfig) -> Result<IngestSummary> {
    let corpus = Corpus::load_manifest(&cfg.manifest)?;
    let weights = match &cfg.aggregator.weights {
        Some(path) => {
            let w = AggregatorWeights::load(path)?;
            if w.config.d != corpus.d() {
                return Err(Error::ShapeMismatch(format!(
                    "weights expect d = {}, corpus has d = {}",
                    w.config.d,
                    corpus.d()
                )));
            }
            w
        }
        None => AggregatorWeights::seeded(cfg.aggregator.seed, cfg.aggregator.config(corpus.d()))?,
    };
    weights.save(&cfg.weights_path())?;
    let aggregator = Aggregator::new(&weights)?.with_pool_source(cfg.aggregator.pool);
    let sets = run_bounded(corpus.records(), cfg.budget, |record| {
        aggregator.aggregate(&corpus.features(record)?)
    });
    let mut store = TokenStore::new();
    for (record, set) in corpus.records().iter().zip(sets) {
        store.insert(record.id.clone(), set?)?;
    }
    store.save(&cfg.tokens_path())?;
    info!("aggregated {} records into {}", store.len(), cfg.tokens_path().display());
    Ok(IngestSummary {
        records: corpus.len(),
        d: corpus.d(),
        categories: corpus.categories().len(),
    })
}

pub fn split(cfg: &RunConfig) -> Result<SplitIds> {
    let corpus = Corpus::load_manifest(&cfg.manifest)?;
    let ids = split_ids(&corpus, &cfg.split)?;
    ids.save(&cfg.split_path())?;
    Ok(ids)
}

/// Builds the retrieval index over the training split.
pub fn build_index(corpus: &Corpus, train_ids: &[String], tokens: &TokenStore) -> Result<RetrievalIndex> {
    let rows = train_ids
        .iter()
        .map(|id| {
            let record = corpus
                .get(id)
                .ok_or_else(|| Error::InvalidSplit(format!("unknown id {id:?}")))?;
            let set = tokens.get(id).ok_or_else(|| missing_tokens(id))?;
            Ok((id.clone(), set.pooled().to_vec(), record.category.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    RetrievalIndex::build(rows)
}

pub fn index(cfg: &RunConfig) -> Result<RetrievalIndex> {
    let corpus = Corpus::load_manifest(&cfg.manifest)?;
    let split = SplitIds::load(&cfg.split_path())?;
    split.check_partition(&corpus)?;
    let tokens = TokenStore::load(&cfg.tokens_path())?;
    let index = build_index(&corpus, &split.train, &tokens)?;
    let (matrix, table) = cfg.index_paths();
    index.save(&matrix, &table)?;
    Ok(index)
}

/// Runs [`ingest`], [`split`] and [`index`] for whichever outputs are missing.
pub fn prepare(cfg: &RunConfig) -> Result<()> {
    if !cfg.tokens_path().exists() {
        ingest(cfg)?;
    }
    if !cfg.split_path().exists() {
        split(cfg)?;
    }
    let (matrix, table) = cfg.index_paths();
    if !matrix.exists() || !table.exists() {
        index(cfg)?;
    }
    Ok(())
}

fn missing_tokens(id: &str) -> Error {
    Error::InvalidArgument(format!("no token set for record {id:?}; run ingest"))
}

/// Loaded artifacts of a prepared working directory.
pub struct Session {
    pub config: RunConfig,
    pub corpus: Corpus,
    pub split: SplitIds,
    pub train: Corpus,
    pub test: Corpus,
    pub tokens: TokenStore,
    pub index: RetrievalIndex,
    pub guidelines: Option<GuidelineCache>,
    pub feedback: Option<FeedbackStore>,
}

impl Session {
    /// Loads the corpus, split, tokens and index; stores are loaded when
    /// their files exist.
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let corpus = Corpus::load_manifest(&cfg.manifest)?;
        let split = SplitIds::load(&cfg.split_path())?;
        let (train, _, test) = split.apply(&corpus)?;
        let tokens = TokenStore::load(&cfg.tokens_path())?;
        let (matrix, table) = cfg.index_paths();
        let index = RetrievalIndex::load(&matrix, &table)?;
        let guidelines = optional(cfg.guidelines_path(), GuidelineCache::load)?;
        let feedback = optional(cfg.feedback_path(), FeedbackStore::load)?;
        Ok(Self {
            config: cfg.clone(),
            corpus,
            split,
            train,
            test,
            tokens,
            index,
            guidelines,
            feedback,
        })
    }

    pub fn sources(&self) -> ContextSources<'_> {
        ContextSources {
            index: &self.index,
            train: &self.train,
            tokens: &self.tokens,
            guidelines: self.guidelines.as_ref().map(|g| g as &dyn GuidelineLookup),
            feedback: self.feedback.as_ref().map(|f| f as &dyn FeedbackLookup),
        }
    }

    pub fn query(&self, id: &str) -> Result<&TokenSet> {
        self.tokens.get(id).ok_or_else(|| missing_tokens(id))
    }

    /// Generates a report for each of `ids` with at most `budget` requests
    /// in flight. Results keep the order of `ids`.
    pub fn generate_ids(
        &self,
        ids: &[String],
        flags: IclFlags,
        k: usize,
        backend: &dyn Backend,
    ) -> Vec<Result<GenerationRecord>> {
        run_bounded(ids, self.config.budget, |id| self.generate_one(id, flags, k, backend))
    }

    pub fn generate_one(&self, id: &str, flags: IclFlags, k: usize, backend: &dyn Backend) -> Result<GenerationRecord> {
        let record = self
            .corpus
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown record {id:?}")))?;
        let query = self.query(id)?;
        let bundle = build_bundle(query, Some(id), flags, k, &self.sources())?;
        let prompt = assemble_prompt(query, &bundle)?;
        let out = run_request(&self.config.request.request(prompt.clone()), backend)?;
        Ok(GenerationRecord {
            id: id.to_string(),
            category: record.category.clone(),
            label: flags.label(),
            flags,
            k,
            text: out.text,
            backend_id: out.backend_id,
            prompt_hash: prompt.text_hash(),
            payload_len: prompt.image_payload.len(),
            token_count: out.token_count,
            latency_ms: duration_ms(out.latency),
            neighbors: bundle.retrieved.clone(),
            nn_id: bundle.nn.as_ref().map(|n| n.id.clone()),
            guideline_category: bundle.guideline.as_ref().map(|g| g.category.clone()),
            feedback_ids: bundle.feedback.iter().flatten().map(|f| f.id.clone()).collect(),
        })
    }

    /// Rebuilds the prompt of `rec` from its provenance alone, without
    /// searching the index again.
    pub fn rederive_prompt(&self, rec: &GenerationRecord) -> Result<Prompt> {
        let query = self.query(&rec.id)?;
        let token = |id: &str| self.tokens.get(id).cloned().ok_or_else(|| missing_tokens(id));
        let nn = match &rec.nn_id {
            Some(id) => {
                let report = self
                    .train
                    .get(id)
                    .ok_or_else(|| Error::InvalidArgument(format!("neighbour {id:?} not in training split")))?;
                Some(NnContext {
                    id: id.clone(),
                    report: report.report.clone(),
                    tokens: token(id)?,
                })
            }
            None => None,
        };
        let guideline = match &rec.guideline_category {
            Some(category) => {
                let cache = self.guidelines.as_ref().ok_or_else(|| Error::MissingStore("guideline".into()))?;
                let text = cache
                    .guideline(category)
                    .ok_or_else(|| Error::MissingGuideline(category.clone()))?;
                Some(GuidelineContext {
                    category: category.clone(),
                    text: text.to_string(),
                })
            }
            None => None,
        };
        let feedback = if rec.flags.feedback {
            let store = self.feedback.as_ref().ok_or_else(|| Error::MissingStore("feedback".into()))?;
            let items = rec
                .feedback_ids
                .iter()
                .map(|id| {
                    Ok(FeedbackItem {
                        id: id.clone(),
                        text: store
                            .feedback(id)
                            .ok_or_else(|| Error::MissingFeedback(id.clone()))?
                            .to_string(),
                        tokens: token(id)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(items)
        } else {
            None
        };
        let bundle = ContextBundle {
            flags: rec.flags,
            nn,
            guideline,
            feedback,
            retrieved: rec.neighbors.clone(),
        };
        assemble_prompt(query, &bundle)
    }
}

fn optional<T>(path: PathBuf, load: fn(&Path) -> Result<T>) -> Result<Option<T>> {
    if path.exists() {
        load(&path).map(Some)
    } else {
        Ok(None)
    }
}

fn duration_ms(d: Duration) -> u64 {
    d.as_millis().try_into().unwrap_or(u64::MAX)
}

/// One line of a generations file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationRecord {
    pub id: String,
    pub category: String,
    pub label: String,
    pub flags: IclFlags,
    pub k: usize,
    pub text: String,
    pub backend_id: String,
    /// Hex SHA-256 of the prompt text.
    pub prompt_hash: String,
    pub payload_len: usize,
    pub token_count: usize,
    pub latency_ms: u64,
    /// Neighbour list the context was drawn from.
    pub neighbors: Vec<Neighbor>,
    pub nn_id: Option<String>,
    pub guideline_category: Option<String>,
    pub feedback_ids: Vec<String>,
}

pub fn load_generations(path: &Path) -> Result<Vec<GenerationRecord>> {
    read_jsonl(path)
}

fn reviewer(cfg: &RunConfig) -> Result<std::sync::Arc<dyn Backend>> {
    backend_from_spec(cfg.reviewer.as_deref().unwrap_or(&cfg.backend))
}

/// Feedback store for the training split. `flags` picks the configuration
/// that writes the report under review; the base model unless overridden.
pub fn build_feedback(cfg: &RunConfig, force: bool, flags: IclFlags) -> Result<BuildSummary> {
    let session = Session::open(cfg)?;
    let generator = backend_from_spec(&cfg.backend)?;
    let reviewer = reviewer(cfg)?;
    let opts = FeedbackOptions {
        flags,
        k: cfg.k,
        force,
        budget: cfg.budget,
        request: cfg.request.clone(),
    };
    let sources = ContextSources {
        feedback: None,
        ..session.sources()
    };
    build_feedback_store(&sources, &*generator, &*reviewer, &cfg.feedback_path(), &opts)
}

pub fn build_guidelines(cfg: &RunConfig, force: bool) -> Result<BuildSummary> {
    cfg.validate()?;
    let corpus = Corpus::load_manifest(&cfg.manifest)?;
    let split = SplitIds::load(&cfg.split_path())?;
    let (train, _, _) = split.apply(&corpus)?;
    let backend = reviewer(cfg)?;
    let opts = GuidelineOptions {
        sample_size: cfg.sample_size,
        seed: cfg.seed,
        force,
        budget: cfg.budget,
        request: cfg.request.clone(),
    };
    build_guideline_cache(&train, &*backend, &cfg.guidelines_path(), &opts)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerateSummary {
    pub path: PathBuf,
    pub generated: usize,
    pub skipped: usize,
}

/// Generates reports for the test split into [`RunConfig::generations_path`].
/// Records already in the file are kept; the file must come from the same
/// flags, `k` and backend unless `force` is set.
pub fn generate(cfg: &RunConfig, force: bool) -> Result<GenerateSummary> {
    let session = Session::open(cfg)?;
    let backend = backend_from_spec(&cfg.backend)?;
    generate_into(&session, cfg.flags, cfg.k, &*backend, &cfg.generations_path(), force)
}

pub fn generate_into(
    session: &Session,
    flags: IclFlags,
    k: usize,
    backend: &dyn Backend,
    out: &Path,
    force: bool,
) -> Result<GenerateSummary> {
    if flags.guideline && session.guidelines.is_none() {
        return Err(Error::MissingStore("guideline".into()));
    }
    if flags.feedback && session.feedback.is_none() {
        return Err(Error::MissingStore("feedback".into()));
    }
    let mut done: BTreeMap<String, GenerationRecord> = BTreeMap::new();
    if out.exists() && !force {
        let backend_id = backend.id();
        for rec in load_generations(out)? {
            if rec.flags != flags || rec.k != k || rec.backend_id != backend_id {
                return Err(Error::InvalidArgument(format!(
                    "{} holds output of another configuration ({} k={} {}); pass --force to overwrite",
                    out.display(),
                    rec.label,
                    rec.k,
                    rec.backend_id
                )));
            }
            done.insert(rec.id.clone(), rec);
        }
    }
    let todo: Vec<String> = session.test.ids().filter(|id| !done.contains_key(*id)).map(str::to_string).collect();
    let skipped = session.test.len() - todo.len();
    let mut failures = Vec::new();
    let mut generated = 0;
    for (id, result) in todo.iter().zip(session.generate_ids(&todo, flags, k, backend)) {
        match result {
            Ok(rec) => {
                done.insert(id.clone(), rec);
                generated += 1;
            }
            Err(e) => failures.push(crate::pipelines::FailedItem {
                key: id.clone(),
                error: e.to_string(),
            }),
        }
    }
    let ordered: Vec<&GenerationRecord> = session.test.ids().filter_map(|id| done.get(id)).collect();
    write_atomic(out, &jsonl_bytes(ordered)?)?;
    settle_failures(out, failures)?;
    Ok(GenerateSummary {
        path: out.to_path_buf(),
        generated,
        skipped,
    })
}

/// Pairs each generation with its ground-truth report.
pub fn eval_pairs(corpus: &Corpus, generations: &[GenerationRecord]) -> Result<Vec<EvalPair>> {
    generations
        .iter()
        .map(|g| {
            let record = corpus
                .get(&g.id)
                .ok_or_else(|| Error::InvalidArgument(format!("generation for unknown record {:?}", g.id)))?;
            Ok(EvalPair {
                id: g.id.clone(),
                generated: g.text.clone(),
                reference: record.report.clone(),
            })
        })
        .collect()
}

pub fn evaluate(cfg: &RunConfig, generations: &Path) -> Result<MetricReport> {
    cfg.validate()?;
    let corpus = Corpus::load_manifest(&cfg.manifest)?;
    let pairs = eval_pairs(&corpus, &load_generations(generations)?)?;
    evaluate_corpus(&pairs, &cfg.metric_config(), &cfg.extractor()?)
}

/// Corpus scores at each truncation length; [`DEFAULT_SWEEP`] when
/// `lengths` is empty.
pub fn sweep_length(cfg: &RunConfig, generations: &Path, lengths: &[usize]) -> Result<(Vec<MetricReport>, String)> {
    cfg.validate()?;
    let corpus = Corpus::load_manifest(&cfg.manifest)?;
    let pairs = eval_pairs(&corpus, &load_generations(generations)?)?;
    let lengths = if lengths.is_empty() { &DEFAULT_SWEEP[..] } else { lengths };
    let reports = length_sweep(&pairs, lengths, &cfg.metric_config(), &cfg.extractor()?)?;
    let csv = sweep_csv(&reports)?;
    Ok((reports, csv))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationKind {
    /// Neighbour count `K` in 1, 3, 5 with the configured flags (all
    /// components when none are set).
    Neighbors,
    /// The five component combinations at the configured `K`.
    Components,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub k: usize,
    pub bleu1: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        crate::metrics::csv_string(w)
    }

    pub fn to_markdown(&self) -> String {
        let first = match self.kind {
            AblationKind::Neighbors => "K",
            AblationKind::Components => "Setting",
        };
        let mut out = format!("| {first} | BLEU-1 | BLEU-4 | METEOR | ROUGE-L |\n|---|---|---|---|---|\n");
        for r in &self.rows {
            out.push_str(&format!(
                "| {} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
                r.setting, r.bleu1, r.bleu4, r.meteor, r.rouge_l
            ));
        }
        out
    }
}

pub fn ablation_configs(cfg: &RunConfig, kind: AblationKind) -> Vec<(String, IclFlags, usize)> {
    match kind {
        AblationKind::Neighbors => {
            let flags = if cfg.flags.any() { cfg.flags } else { IclFlags::ALL };
            [1, 3, 5].into_iter().map(|k| (format!("K={k}"), flags, k)).collect()
        }
        AblationKind::Components => IclFlags::ablation_rows()
            .into_iter()
            .map(|f| (f.label(), f, cfg.k))
            .collect(),
    }
}

/// Directory name for a backend id: filesystem-safe, with a digest suffix
/// when the id had to be shortened.
fn backend_dir(id: &str) -> String {
    use sha2::{Digest, Sha256};
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect();
    if safe.len() <= 48 {
        return safe;
    }
    let digest = hex::encode(Sha256::digest(id.as_bytes()));
    format!("{}-{}", &safe[..40], &digest[..8])
}

/// Generates and scores every configuration of `kind`, building any store a
/// row needs first. Generations land in `workdir/ablation/<backend>/`.
pub fn ablate(cfg: &RunConfig, kind: AblationKind) -> Result<AblationTable> {
    cfg.validate()?;
    prepare(cfg)?;
    let configs = ablation_configs(cfg, kind);
    if configs.iter().any(|(_, f, _)| f.guideline) {
        build_guidelines(cfg, false)?;
    }
    if configs.iter().any(|(_, f, _)| f.feedback) {
        build_feedback(cfg, false, IclFlags::BASE)?;
    }
    let session = Session::open(cfg)?;
    let backend = backend_from_spec(&cfg.backend)?;
    let metric_cfg = cfg.metric_config();
    let extractor = cfg.extractor()?;
    let mut rows = Vec::with_capacity(configs.len());
    for (setting, flags, k) in configs {
        let out = cfg
            .path("ablation")
            .join(backend_dir(&backend.id()))
            .join(format!("{}.jsonl", run_slug(flags, k)));
        generate_into(&session, flags, k, &*backend, &out, false)?;
        let pairs = eval_pairs(&session.corpus, &load_generations(&out)?)?;
        let report = evaluate_corpus(&pairs, &metric_cfg, &extractor)?;
        rows.push(AblationRow {
            setting,
            k,
            bleu1: report.corpus.bleu1,
            bleu4: report.corpus.bleu4,
            meteor: report.corpus.meteor,
            rouge_l: report.corpus.rouge_l,
        });
    }
    Ok(AblationTable { kind, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRow {
    pub category: String,
    pub samples: usize,
    pub bleu1: f64,
    pub bleu4: f64,
}

/// Mean per-sample BLEU-1 and BLEU-4 for each category, sorted by category.
pub fn category_breakdown(report: &MetricReport, generations: &[GenerationRecord]) -> Result<Vec<CategoryRow>> {
    let category: BTreeMap<&str, &str> = generations.iter().map(|g| (g.id.as_str(), g.category.as_str())).collect();
    let mut groups: BTreeMap<&str, (usize, f64, f64)> = BTreeMap::new();
    for row in &report.rows {
        let cat = category
            .get(row.id.as_str())
            .ok_or_else(|| Error::InvalidArgument(format!("no generation for scored id {:?}", row.id)))?;
        let g = groups.entry(cat).or_default();
        g.0 += 1;
        g.1 += row.bleu1;
        g.2 += row.bleu4;
    }
    Ok(groups
        .into_iter()
        .map(|(c, (n, b1, b4))| CategoryRow {
            category: c.to_string(),
            samples: n,
            bleu1: b1 / n as f64,
            bleu4: b4 / n as f64,
        })
        .collect())
}

pub fn breakdown(cfg: &RunConfig, generations: &Path) -> Result<Vec<CategoryRow>> {
    let gens = load_generations(generations)?;
    let ids: HashSet<&str> = gens.iter().map(|g| g.id.as_str()).collect();
    if ids.len() != gens.len() {
        return Err(Error::InvalidArgument("duplicate ids in generations".into()));
    }
    let report = evaluate(cfg, generations)?;
    category_breakdown(&report, &gens)
}

pub fn breakdown_csv(rows: &[CategoryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    crate::metrics::csv_string(w)
}
