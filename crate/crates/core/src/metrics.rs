//! Report similarity metrics: BLEU-1..4, METEOR (exact match), ROUGE-L and
//! entity-set overlap.
//!
//! All metrics work on [`TokenizedText`]: lowercase, whitespace-split, ASCII
//! punctuation stripped from both ends of each token. Truncation counts these
//! word tokens.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::genclient::run_bounded;

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenizedText {
    tokens: Vec<String>,
}

impl TokenizedText {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn truncate(&self, len: usize) -> TokenizedText {
        truncate(self, len)
    }
}

pub fn tokenize(text: &str) -> TokenizedText {
    let tokens = text
        .split_whitespace()
        .map(|raw| raw.to_lowercase())
        .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()).to_string())
        .filter(|t| !t.is_empty())
        .collect();
    TokenizedText { tokens }
}

/// First `min(len, |tok|)` tokens.
pub fn truncate(tok: &TokenizedText, len: usize) -> TokenizedText {
    TokenizedText {
        tokens: tok.tokens.iter().take(len).cloned().collect(),
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and total candidate n-grams for one pair.
fn clipped(cand: &[String], refr: &[String], n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(refr, n);
    let matched = c
        .iter()
        .map(|(g, &v)| v.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, cand.len().saturating_sub(n - 1))
}

fn check_bleu_args(cands: &[TokenizedText], refs: &[TokenizedText], n: usize) -> Result<()> {
    if cands.len() != refs.len() {
        return Err(Error::LengthMismatch {
            candidates: cands.len(),
            references: refs.len(),
        });
    }
    if !(1..=4).contains(&n) {
        return Err(Error::InvalidArgument(format!("BLEU order must be 1..=4, got {n}")));
    }
    if refs.iter().any(TokenizedText::is_empty) {
        return Err(Error::EmptyReference);
    }
    Ok(())
}

fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Corpus BLEU-`n`: clipped counts summed over all pairs, uniform weights,
/// brevity penalty over total lengths. Zero when any order has no match.
pub fn bleu(cands: &[TokenizedText], refs: &[TokenizedText], n: usize) -> Result<f64> {
    check_bleu_args(cands, refs, n)?;
    let c_len: usize = cands.iter().map(TokenizedText::len).sum();
    let r_len: usize = refs.iter().map(TokenizedText::len).sum();
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let (num, den) = cands
            .iter()
            .zip(refs)
            .map(|(c, r)| clipped(&c.tokens, &r.tokens, order))
            .fold((0, 0), |(a, b), (x, y)| (a + x, b + y));
        if num == 0 || den == 0 {
            return Ok(0.0);
        }
        log_sum += (num as f64 / den as f64).ln() / n as f64;
    }
    Ok(brevity_penalty(c_len, r_len) * log_sum.exp())
}

/// Single-pair BLEU-`n` with add-one smoothing on orders 2 and up whose
/// clipped count is zero. Diagnostic only; reported scores use [`bleu`].
pub fn sentence_bleu_smoothed(cand: &TokenizedText, refr: &TokenizedText, n: usize) -> Result<f64> {
    check_bleu_args(std::slice::from_ref(cand), std::slice::from_ref(refr), n)?;
    if cand.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let (mut num, mut den) = clipped(&cand.tokens, &refr.tokens, order);
        if num == 0 {
            if order == 1 {
                return Ok(0.0);
            }
            num += 1;
            den += 1;
        }
        log_sum += (num as f64 / den as f64).ln() / n as f64;
    }
    Ok(brevity_penalty(cand.len(), refr.len()) * log_sum.exp())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-measure; `beta` weights recall.
pub fn rouge_l(cand: &TokenizedText, refr: &TokenizedText, beta: f64) -> Result<f64> {
    if refr.is_empty() {
        return Err(Error::EmptyReference);
    }
    if cand.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(&cand.tokens, &refr.tokens);
    if lcs == 0 {
        return Ok(0.0);
    }
    let p = lcs as f64 / cand.len() as f64;
    let r = lcs as f64 / refr.len() as f64;
    let b2 = beta * beta;
    Ok((1.0 + b2) * p * r / (r + b2 * p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeteorParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for MeteorParams {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            beta: 3.0,
            gamma: 0.5,
        }
    }
}

/// Search nodes spent looking for a chunk-minimal alignment before settling
/// for the best one found.
pub const METEOR_NODE_BUDGET: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Alignment {
    pub matches: usize,
    pub chunks: usize,
    /// False when the search budget ran out and `chunks` may not be minimal.
    pub exact: bool,
}

/// Maximum exact-match alignment between `cand` and `refr`, with the fewest
/// chunks among maximum alignments. A chunk is a run of matches adjacent in
/// both sequences.
pub fn align(cand: &[String], refr: &[String]) -> Alignment {
    align_with_budget(cand, refr, METEOR_NODE_BUDGET)
}

pub fn align_with_budget(cand: &[String], refr: &[String], budget: usize) -> Alignment {
    let mut ids: HashMap<&str, usize> = HashMap::new();
    for w in cand.iter().chain(refr) {
        let next = ids.len();
        ids.entry(w.as_str()).or_insert(next);
    }
    let c: Vec<usize> = cand.iter().map(|w| ids[w.as_str()]).collect();
    let r: Vec<usize> = refr.iter().map(|w| ids[w.as_str()]).collect();
    let vocab = ids.len();

    let mut c_count = vec![0usize; vocab];
    let mut r_count = vec![0usize; vocab];
    c.iter().for_each(|&w| c_count[w] += 1);
    r.iter().for_each(|&w| r_count[w] += 1);
    let need: Vec<usize> = (0..vocab).map(|w| c_count[w].min(r_count[w])).collect();
    let matches: usize = need.iter().sum();
    if matches == 0 {
        return Alignment {
            matches: 0,
            chunks: 0,
            exact: true,
        };
    }

    let mut positions: Vec<Vec<usize>> = vec![Vec::new(); vocab];
    for (j, &w) in r.iter().enumerate() {
        positions[w].push(j);
    }

    let greedy = greedy_chunks(&c, &r);
    let mut search = Search {
        c: &c,
        r: &r,
        positions: &positions,
        need,
        c_left: c_count,
        used: vec![false; r.len()],
        best: greedy,
        nodes: 0,
        budget,
    };
    search.dfs(0, None, 0, matches);
    Alignment {
        matches,
        chunks: search.best,
        exact: search.nodes <= search.budget,
    }
}

/// Chunk count of the alignment built by repeatedly fixing the longest run of
/// still-unmatched tokens common to both sides. Always a maximum alignment.
fn greedy_chunks(c: &[usize], r: &[usize]) -> usize {
    let mut c_used = vec![false; c.len()];
    let mut r_used = vec![false; r.len()];
    let mut chunks = 0;
    loop {
        let mut best = (0, 0, 0);
        let mut run = vec![0usize; r.len() + 1];
        for i in 0..c.len() {
            let mut next = vec![0usize; r.len() + 1];
            for j in 0..r.len() {
                if !c_used[i] && !r_used[j] && c[i] == r[j] {
                    next[j + 1] = run[j] + 1;
                    if next[j + 1] > best.0 {
                        best = (next[j + 1], i + 1 - next[j + 1], j + 1 - next[j + 1]);
                    }
                }
            }
            run = next;
        }
        let (len, i0, j0) = best;
        if len == 0 {
            return chunks;
        }
        for k in 0..len {
            c_used[i0 + k] = true;
            r_used[j0 + k] = true;
        }
        chunks += 1;
    }
}

struct Search<'a> {
    c: &'a [usize],
    r: &'a [usize],
    positions: &'a [Vec<usize>],
    /// Matches still required per word.
    need: Vec<usize>,
    /// Candidate occurrences per word at or after the current position.
    c_left: Vec<usize>,
    used: Vec<bool>,
    best: usize,
    nodes: usize,
    budget: usize,
}

impl Search<'_> {
    /// `prev` is the reference position matched to candidate `i - 1`, if any.
    fn dfs(&mut self, i: usize, prev: Option<usize>, chunks: usize, remaining: usize) {
        if remaining == 0 {
            self.best = self.best.min(chunks);
            return;
        }
        if chunks + 1 > self.best || i >= self.c.len() {
            return;
        }
        self.nodes += 1;
        if self.nodes > self.budget {
            return;
        }
        let w = self.c[i];
        self.c_left[w] -= 1;

        if self.need[w] > 0 {
            let cont = prev.map(|p| p + 1).filter(|&j| j < self.r.len() && self.r[j] == w && !self.used[j]);
            if let Some(j) = cont {
                self.take(i, j, chunks, remaining);
            }
            for k in 0..self.positions[w].len() {
                let j = self.positions[w][k];
                if Some(j) != cont && !self.used[j] && chunks + 1 < self.best {
                    self.take(i, j, chunks + 1, remaining);
                }
            }
        }
        if self.c_left[w] >= self.need[w] {
            self.dfs(i + 1, None, chunks, remaining);
        }
        self.c_left[w] += 1;
    }

    fn take(&mut self, i: usize, j: usize, chunks: usize, remaining: usize) {
        let w = self.c[i];
        self.used[j] = true;
        self.need[w] -= 1;
        self.dfs(i + 1, Some(j), chunks, remaining - 1);
        self.need[w] += 1;
        self.used[j] = false;
    }
}

/// METEOR restricted to exact matches: harmonic mean weighted by `alpha`,
/// fragmentation penalty `gamma · (chunks / matches)^beta`.
pub fn meteor(cand: &TokenizedText, refr: &TokenizedText, params: MeteorParams) -> Result<f64> {
    if refr.is_empty() {
        return Err(Error::EmptyReference);
    }
    let a = align(&cand.tokens, &refr.tokens);
    if a.matches == 0 {
        return Ok(0.0);
    }
    let m = a.matches as f64;
    let p = m / cand.len() as f64;
    let r = m / refr.len() as f64;
    let fmean = p * r / (params.alpha * p + (1.0 - params.alpha) * r);
    let penalty = params.gamma * (a.chunks as f64 / m).powf(params.beta);
    Ok(fmean * (1.0 - penalty))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactEntMode {
    #[default]
    F1,
    Precision,
    Recall,
}

/// Built-in gazetteer used when no entity source is configured.
pub const DEFAULT_GAZETTEER: &[&str] = &[
    "adenocarcinoma",
    "adrenal gland",
    "angiolymphatic invasion",
    "capsule",
    "carcinoma",
    "clear cell",
    "clear cell carcinoma",
    "ductal carcinoma in situ",
    "fuhrman grade",
    "gleason score",
    "hilar fat",
    "invasive ductal carcinoma",
    "lymph node",
    "lymph nodes",
    "lymphovascular invasion",
    "margins",
    "metastatic carcinoma",
    "necrosis",
    "nuclear grade",
    "papillary carcinoma",
    "perineural invasion",
    "periaortic lymph nodes",
    "perinephric fat",
    "renal cell carcinoma",
    "renal pelvis",
    "renal sinus",
    "renal vein",
    "squamous cell carcinoma",
    "urothelial carcinoma",
    "vascular invasion",
];

#[derive(Debug, Clone)]
pub enum EntityExtractor {
    /// Longest-match scan over tokens; entries sorted longest first.
    Gazetteer(Vec<Vec<String>>),
    /// POST `{"text": ...}`, expecting `{"entities": [...]}`.
    External { endpoint: String },
}

impl EntityExtractor {
    pub fn gazetteer<S: AsRef<str>>(entries: &[S]) -> Result<Self> {
        let set: BTreeSet<Vec<String>> = entries
            .iter()
            .map(|e| tokenize(e.as_ref()).tokens)
            .filter(|t| !t.is_empty())
            .collect();
        if set.is_empty() {
            return Err(Error::InvalidArgument("gazetteer is empty".into()));
        }
        let mut list: Vec<Vec<String>> = set.into_iter().collect();
        list.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        Ok(EntityExtractor::Gazetteer(list))
    }

    /// One entity per line; blank lines ignored.
    pub fn load_gazetteer(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::gazetteer(&text.lines().collect::<Vec<_>>())
    }

    pub fn external(endpoint: impl Into<String>) -> Self {
        EntityExtractor::External {
            endpoint: endpoint.into(),
        }
    }

    pub fn entities(&self, text: &str) -> Result<BTreeSet<String>> {
        match self {
            EntityExtractor::Gazetteer(list) => Ok(scan(list, &tokenize(text).tokens)),
            EntityExtractor::External { endpoint } => external_entities(endpoint, text),
        }
    }

    /// Gazetteer scan over already-tokenized text. External extractors see
    /// the tokens joined by spaces.
    pub fn entities_in(&self, tokens: &TokenizedText) -> Result<BTreeSet<String>> {
        match self {
            EntityExtractor::Gazetteer(list) => Ok(scan(list, &tokens.tokens)),
            EntityExtractor::External { endpoint } => external_entities(endpoint, &tokens.tokens.join(" ")),
        }
    }
}

fn scan(list: &[Vec<String>], tokens: &[String]) -> BTreeSet<String> {
    let mut found = BTreeSet::new();
    let mut i = 0;
    while i < tokens.len() {
        match list.iter().find(|e| tokens[i..].starts_with(e)) {
            Some(e) => {
                found.insert(e.join(" "));
                i += e.len();
            }
            None => i += 1,
        }
    }
    found
}

fn external_entities(endpoint: &str, text: &str) -> Result<BTreeSet<String>> {
    #[derive(Deserialize)]
    struct Response {
        entities: Vec<String>,
    }
    let unavailable = |e: &dyn std::fmt::Display| Error::ExtractorUnavailable(format!("{endpoint}: {e}"));
    let response = reqwest::blocking::Client::new()
        .post(endpoint)
        .json(&serde_json::json!({ "text": text }))
        .send()
        .map_err(|e| unavailable(&e))?;
    if !response.status().is_success() {
        return Err(unavailable(&response.status()));
    }
    let parsed: Response = response.json().map_err(|e| unavailable(&e))?;
    Ok(parsed
        .entities
        .iter()
        .map(|e| tokenize(e).tokens.join(" "))
        .filter(|e| !e.is_empty())
        .collect())
}

/// Overlap score of two entity sets; 1.0 when both are empty.
pub fn entity_overlap(cand: &BTreeSet<String>, refr: &BTreeSet<String>, mode: FactEntMode) -> f64 {
    if cand.is_empty() && refr.is_empty() {
        return 1.0;
    }
    let common = cand.intersection(refr).count() as f64;
    let ratio = |den: usize| if den == 0 { 0.0 } else { common / den as f64 };
    match mode {
        FactEntMode::F1 => 2.0 * common / (cand.len() + refr.len()) as f64,
        FactEntMode::Precision => ratio(cand.len()),
        FactEntMode::Recall => ratio(refr.len()),
    }
}

pub fn fact_ent(cand_text: &str, ref_text: &str, extractor: &EntityExtractor, mode: FactEntMode) -> Result<f64> {
    let c = extractor.entities(cand_text)?;
    let r = extractor.entities(ref_text)?;
    Ok(entity_overlap(&c, &r, mode))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    pub truncation: usize,
    pub rouge_beta: f64,
    pub meteor: MeteorParams,
    pub fact_ent: FactEntMode,
    pub workers: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            truncation: 100,
            rouge_beta: 1.0,
            meteor: MeteorParams::default(),
            fact_ent: FactEntMode::F1,
            workers: 4,
        }
    }
}

impl MetricConfig {
    pub fn with_truncation(truncation: usize) -> Self {
        Self {
            truncation,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.truncation == 0 {
            return Err(Error::InvalidArgument("truncation length must be at least 1".into()));
        }
        if !self.rouge_beta.is_finite() || self.rouge_beta <= 0.0 {
            return Err(Error::InvalidArgument("ROUGE-L beta must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub id: String,
    pub generated: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub id: String,
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub fact_ent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusScores {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub fact_ent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub truncation: usize,
    pub rows: Vec<SampleScores>,
    pub corpus: CorpusScores,
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-sample rows followed by a row with id `corpus`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let c = &self.corpus;
        w.serialize(SampleScores {
            id: "corpus".into(),
            bleu1: c.bleu1,
            bleu2: c.bleu2,
            bleu3: c.bleu3,
            bleu4: c.bleu4,
            meteor: c.meteor,
            rouge_l: c.rouge_l,
            fact_ent: c.fact_ent,
        })?;
        csv_string(w)
    }
}

pub(crate) fn csv_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv flush: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits UTF-8"))
}

fn score_pair(
    pair: &EvalPair,
    config: &MetricConfig,
    extractor: &EntityExtractor,
) -> Result<(TokenizedText, TokenizedText, SampleScores)> {
    let c = tokenize(&pair.generated).truncate(config.truncation);
    let r = tokenize(&pair.reference).truncate(config.truncation);
    if r.is_empty() {
        return Err(Error::EmptyReference);
    }
    let one = |n| bleu(std::slice::from_ref(&c), std::slice::from_ref(&r), n);
    let ec = extractor.entities_in(&c)?;
    let er = extractor.entities_in(&r)?;
    let scores = SampleScores {
        id: pair.id.clone(),
        bleu1: one(1)?,
        bleu2: one(2)?,
        bleu3: one(3)?,
        bleu4: one(4)?,
        meteor: meteor(&c, &r, config.meteor)?,
        rouge_l: rouge_l(&c, &r, config.rouge_beta)?,
        fact_ent: entity_overlap(&ec, &er, config.fact_ent),
    };
    Ok((c, r, scores))
}

/// Truncates both sides of every pair, scores each pair, and aggregates:
/// corpus BLEU over summed counts, arithmetic means for the rest.
pub fn evaluate_corpus(pairs: &[EvalPair], config: &MetricConfig, extractor: &EntityExtractor) -> Result<MetricReport> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let scored = run_bounded(pairs, config.workers, |p| score_pair(p, config, extractor));
    let mut cands = Vec::with_capacity(pairs.len());
    let mut refs = Vec::with_capacity(pairs.len());
    let mut rows = Vec::with_capacity(pairs.len());
    for item in scored {
        let (c, r, s) = item?;
        cands.push(c);
        refs.push(r);
        rows.push(s);
    }
    let mean = |f: fn(&SampleScores) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    let corpus = CorpusScores {
        bleu1: bleu(&cands, &refs, 1)?,
        bleu2: bleu(&cands, &refs, 2)?,
        bleu3: bleu(&cands, &refs, 3)?,
        bleu4: bleu(&cands, &refs, 4)?,
        meteor: mean(|s| s.meteor),
        rouge_l: mean(|s| s.rouge_l),
        fact_ent: mean(|s| s.fact_ent),
    };
    Ok(MetricReport {
        truncation: config.truncation,
        rows,
        corpus,
    })
}

pub const DEFAULT_SWEEP: [usize; 5] = [100, 200, 300, 400, 500];

/// [`evaluate_corpus`] at each truncation length. Lengths must be strictly
/// ascending.
pub fn length_sweep(
    pairs: &[EvalPair],
    lengths: &[usize],
    config: &MetricConfig,
    extractor: &EntityExtractor,
) -> Result<Vec<MetricReport>> {
    if lengths.is_empty() {
        return Err(Error::InvalidArgument("no sweep lengths".into()));
    }
    if lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!("sweep lengths must ascend: {lengths:?}")));
    }
    lengths
        .iter()
        .map(|&l| {
            let cfg = MetricConfig {
                truncation: l,
                ..config.clone()
            };
            evaluate_corpus(pairs, &cfg, extractor)
        })
        .collect()
}

/// One row per length with the corpus scores.
pub fn sweep_csv(reports: &[MetricReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["length", "bleu1", "bleu2", "bleu3", "bleu4", "meteor", "rouge_l", "fact_ent"])?;
    for r in reports {
        let c = &r.corpus;
        let mut record = vec![r.truncation.to_string()];
        record.extend(
            [c.bleu1, c.bleu2, c.bleu3, c.bleu4, c.meteor, c.rouge_l, c.fact_ent].map(|v| v.to_string()),
        );
        w.write_record(&record)?;
    }
    csv_string(w)
}
