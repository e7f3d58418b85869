//! In-context clues and prompt assembly.
//!
//! Three retrieval-derived clues can accompany the base instruction:
//!
//! * **nearest neighbour**: the most similar training report, plus its tokens
//!   in the image payload;
//! * **category guideline**: a cached writing guideline for the majority
//!   category among the `k` nearest training records;
//! * **feedback**: stored critiques of the `k` nearest training records, plus
//!   their tokens in the image payload.
//!
//! # Prompt layout
//!
//! The user text is the base prompt followed, when enabled and in this order,
//! by the guideline, feedback and reference sections. Each section starts on
//! a header line preceded by a blank line:
//!
//! ```text
//! {base prompt}
//!
//! ### CATEGORY GUIDELINE
//! Category: {category}
//! {guideline text}
//!
//! ### FEEDBACK 1
//! {feedback text}
//!
//! ### REFERENCE REPORT
//! {neighbour report}
//! ```
//!
//! The image payload is the query token set, then the nearest neighbour's
//! tokens (if enabled), then each feedback neighbour's tokens in order.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregator::{TokenSet, TokenStore};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::retrieval::{majority_category, Neighbor, NeighborSource};

pub const GUIDELINE_HEADER: &str = "### CATEGORY GUIDELINE";
pub const FEEDBACK_HEADER: &str = "### FEEDBACK";
pub const REFERENCE_HEADER: &str = "### REFERENCE REPORT";

/// Most reports one guideline request may summarise.
pub const MAX_GUIDELINE_REPORTS: usize = 20;

const BASE_PROMPT: &str = "What are the diagnostic findings in the image? Provide a professional, accurate, and well-structured histopathology report for it.";

const FEEDBACK_PREAMBLE: &str =
    "You are an expert reviewer specializing in medical report quality assurance.";
const FEEDBACK_INSTRUCTION: &str = "Comparing the ground truth and generated report, what is the thing that generated report lacks? what suggestion would you give to improve the content of the generated report? The suggestion should be deeply insightful. Be honest and harsh.";

const GUIDELINE_PREAMBLE: &str = "You are an advanced AI analyst specializing in deep linguistic and structural analysis of medical reports.";
const GUIDELINE_INSTRUCTION: &str = "Deeply analyze these reports and extract habits, preferences, and especially biases that exist in reports of this category different from general TCGA reports. Your observations must be brutally insightful. Using the insights from observing the habits, preferences, and especially biases in these reports compared with other general TCGA reports. Conclude the habits, preferences, and especially biases with 5 short guidelines that are so insightful even harsh, ensuring anyone reading them knows the exact way to mimic these reports.";

/// The instruction used by the base model with no retrieved context.
pub fn base_prompt() -> &'static str {
    BASE_PROMPT
}

/// Request asking a reviewer model to critique a generated report against
/// its ground truth.
pub fn render_feedback_request(ground_truth: &str, generated: &str) -> Result<String> {
    if ground_truth.trim().is_empty() || generated.trim().is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(format!(
        "{FEEDBACK_PREAMBLE}\n\nGround Truth: {ground_truth}\n\nGenerated Report: {generated}\n\n{FEEDBACK_INSTRUCTION}"
    ))
}

/// Request asking an analyst model to distil writing guidelines from up to
/// twenty reports of one category.
pub fn render_guideline_request<S: AsRef<str>>(reports: &[S]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::EmptyInput);
    }
    if reports.len() > MAX_GUIDELINE_REPORTS {
        return Err(Error::TooManyReports(reports.len()));
    }
    let mut out = String::from(GUIDELINE_PREAMBLE);
    for (i, report) in reports.iter().enumerate() {
        out.push_str(&format!("\n\nReport {}: {}", i + 1, report.as_ref()));
    }
    out.push_str("\n\n");
    out.push_str(GUIDELINE_INSTRUCTION);
    Ok(out)
}

/// Which clues are added to the base prompt.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IclFlags {
    #[serde(default)]
    pub nn: bool,
    #[serde(default)]
    pub guideline: bool,
    #[serde(default)]
    pub feedback: bool,
}

impl IclFlags {
    pub const BASE: Self = Self {
        nn: false,
        guideline: false,
        feedback: false,
    };

    pub const ALL: Self = Self {
        nn: true,
        guideline: true,
        feedback: true,
    };

    /// The five component combinations of the ablation table, in row order.
    pub fn ablation_rows() -> [Self; 5] {
        let nn = |guideline, feedback| Self {
            nn: true,
            guideline,
            feedback,
        };
        [Self::BASE, nn(false, false), nn(true, false), nn(false, true), Self::ALL]
    }

    pub fn label(&self) -> String {
        if !self.nn && !self.guideline && !self.feedback {
            return "Base Model".into();
        }
        let mut parts = Vec::new();
        if self.nn {
            parts.push("+ NN");
        }
        if self.guideline {
            parts.push("+ Guideline");
        }
        if self.feedback {
            parts.push("+ Feedback");
        }
        parts.join(" ")
    }

    pub fn any(&self) -> bool {
        self.nn || self.guideline || self.feedback
    }
}

pub trait GuidelineLookup: Sync {
    fn guideline(&self, category: &str) -> Option<&str>;
}

pub trait FeedbackLookup: Sync {
    fn feedback(&self, id: &str) -> Option<&str>;
}

impl GuidelineLookup for HashMap<String, String> {
    fn guideline(&self, category: &str) -> Option<&str> {
        self.get(category).map(String::as_str)
    }
}

impl GuidelineLookup for BTreeMap<String, String> {
    fn guideline(&self, category: &str) -> Option<&str> {
        self.get(category).map(String::as_str)
    }
}

impl FeedbackLookup for HashMap<String, String> {
    fn feedback(&self, id: &str) -> Option<&str> {
        self.get(id).map(String::as_str)
    }
}

impl FeedbackLookup for BTreeMap<String, String> {
    fn feedback(&self, id: &str) -> Option<&str> {
        self.get(id).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnContext {
    pub id: String,
    pub report: String,
    pub tokens: TokenSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidelineContext {
    pub category: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackItem {
    pub id: String,
    pub text: String,
    pub tokens: TokenSet,
}

/// Clues selected for one query.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContextBundle {
    pub flags: IclFlags,
    pub nn: Option<NnContext>,
    pub guideline: Option<GuidelineContext>,
    pub feedback: Option<Vec<FeedbackItem>>,
    /// The neighbour list the clues were drawn from, for provenance.
    pub retrieved: Vec<Neighbor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub system_text: String,
    pub user_text: String,
    /// Query token set first, then retrieved token sets.
    pub image_payload: Vec<TokenSet>,
    /// Nearest-neighbour report carried in `user_text`, when present.
    pub reference: Option<String>,
}

impl Prompt {
    /// Hex SHA-256 of `system_text`, a NUL byte, and `user_text`.
    pub fn text_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.system_text.as_bytes());
        h.update([0u8]);
        h.update(self.user_text.as_bytes());
        hex::encode(h.finalize())
    }
}

/// Everything clue construction reads: the training index, the records and
/// token sets behind it, and the optional stores.
#[derive(Clone, Copy)]
pub struct ContextSources<'a> {
    pub index: &'a dyn NeighborSource,
    pub train: &'a Corpus,
    pub tokens: &'a TokenStore,
    pub guidelines: Option<&'a dyn GuidelineLookup>,
    pub feedback: Option<&'a dyn FeedbackLookup>,
}

fn neighbor_tokens<'a>(tokens: &'a TokenStore, id: &str) -> Result<&'a TokenSet> {
    tokens
        .get(id)
        .ok_or_else(|| Error::InvalidArgument(format!("no token set for record {id:?}")))
}

fn nn_from(neighbor: &Neighbor, src: &ContextSources<'_>) -> Result<NnContext> {
    let record = src
        .train
        .get(&neighbor.id)
        .ok_or_else(|| Error::InvalidArgument(format!("neighbour {:?} not in corpus", neighbor.id)))?;
    Ok(NnContext {
        id: neighbor.id.clone(),
        report: record.report.clone(),
        tokens: neighbor_tokens(src.tokens, &neighbor.id)?.clone(),
    })
}

fn guideline_from(
    neighbors: &[Neighbor],
    guidelines: &dyn GuidelineLookup,
) -> Result<GuidelineContext> {
    let category = majority_category(neighbors)?;
    let text = guidelines
        .guideline(&category)
        .ok_or_else(|| Error::MissingGuideline(category.clone()))?;
    Ok(GuidelineContext {
        text: text.to_string(),
        category,
    })
}

fn feedback_from(
    neighbors: &[Neighbor],
    feedback: &dyn FeedbackLookup,
    tokens: &TokenStore,
) -> Result<Vec<FeedbackItem>> {
    neighbors
        .iter()
        .map(|n| {
            let text = feedback
                .feedback(&n.id)
                .ok_or_else(|| Error::MissingFeedback(n.id.clone()))?;
            Ok(FeedbackItem {
                id: n.id.clone(),
                text: text.to_string(),
                tokens: neighbor_tokens(tokens, &n.id)?.clone(),
            })
        })
        .collect()
}

/// Top-1 neighbour's report and tokens. `query_id` is excluded from the
/// search, so a training record never retrieves itself.
pub fn build_nn_context(
    query: &TokenSet,
    query_id: Option<&str>,
    src: &ContextSources<'_>,
) -> Result<NnContext> {
    let top = src.index.knn(query.pooled(), 1, query_id)?;
    let neighbor = top.first().ok_or(Error::EmptyIndex)?;
    nn_from(neighbor, src)
}

/// Majority category of the `k` nearest records and its cached guideline.
pub fn build_guideline_context(
    query: &TokenSet,
    query_id: Option<&str>,
    index: &dyn NeighborSource,
    guidelines: &dyn GuidelineLookup,
    k: usize,
) -> Result<GuidelineContext> {
    let neighbors = index.knn(query.pooled(), k, query_id)?;
    guideline_from(&neighbors, guidelines)
}

/// Stored feedback of the `k` nearest records, in neighbour order.
pub fn build_feedback_context(
    query: &TokenSet,
    query_id: Option<&str>,
    index: &dyn NeighborSource,
    feedback: &dyn FeedbackLookup,
    tokens: &TokenStore,
    k: usize,
) -> Result<Vec<FeedbackItem>> {
    let neighbors = index.knn(query.pooled(), k, query_id)?;
    feedback_from(&neighbors, feedback, tokens)
}

/// Builds every clue enabled in `flags` from one `k`-neighbour search.
/// The nearest-neighbour clue uses the first entry, which is what a
/// separate `k = 1` search returns.
pub fn build_bundle(
    query: &TokenSet,
    query_id: Option<&str>,
    flags: IclFlags,
    k: usize,
    src: &ContextSources<'_>,
) -> Result<ContextBundle> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut bundle = ContextBundle {
        flags,
        ..Default::default()
    };
    if !flags.any() {
        return Ok(bundle);
    }
    let guidelines = match (flags.guideline, src.guidelines) {
        (true, None) => return Err(Error::MissingStore("guideline".into())),
        (_, g) => g,
    };
    let feedback = match (flags.feedback, src.feedback) {
        (true, None) => return Err(Error::MissingStore("feedback".into())),
        (_, f) => f,
    };

    let search_k = if flags.guideline || flags.feedback { k } else { 1 };
    let neighbors = src.index.knn(query.pooled(), search_k, query_id)?;
    if neighbors.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if flags.nn {
        bundle.nn = Some(nn_from(&neighbors[0], src)?);
    }
    if let (true, Some(g)) = (flags.guideline, guidelines) {
        bundle.guideline = Some(guideline_from(&neighbors, g)?);
    }
    if let (true, Some(f)) = (flags.feedback, feedback) {
        bundle.feedback = Some(feedback_from(&neighbors, f, src.tokens)?);
    }
    bundle.retrieved = neighbors;
    Ok(bundle)
}

/// Lays out the prompt text and image payload for one query.
pub fn assemble_prompt(query: &TokenSet, bundle: &ContextBundle) -> Result<Prompt> {
    let flags = bundle.flags;
    for (name, enabled, present) in [
        ("nn", flags.nn, bundle.nn.is_some()),
        ("guideline", flags.guideline, bundle.guideline.is_some()),
        ("feedback", flags.feedback, bundle.feedback.is_some()),
    ] {
        if enabled != present {
            return Err(Error::InconsistentBundle(format!(
                "{name} is {} but its context is {}",
                if enabled { "enabled" } else { "disabled" },
                if present { "present" } else { "absent" },
            )));
        }
    }
    let shape = (query.m(), query.d());
    let mismatched = bundle
        .nn
        .iter()
        .map(|nn| &nn.tokens)
        .chain(bundle.feedback.iter().flatten().map(|f| &f.tokens))
        .any(|t| (t.m(), t.d()) != shape);
    if mismatched {
        return Err(Error::InconsistentBundle(
            "retrieved token sets differ in shape from the query".into(),
        ));
    }

    let mut user_text = String::from(BASE_PROMPT);
    let mut image_payload = vec![query.clone()];
    if let Some(g) = &bundle.guideline {
        user_text.push_str(&format!(
            "\n\n{GUIDELINE_HEADER}\nCategory: {}\n{}",
            g.category, g.text
        ));
    }
    if let Some(nn) = &bundle.nn {
        image_payload.push(nn.tokens.clone());
    }
    if let Some(items) = &bundle.feedback {
        for (i, item) in items.iter().enumerate() {
            user_text.push_str(&format!("\n\n{FEEDBACK_HEADER} {}\n{}", i + 1, item.text));
            image_payload.push(item.tokens.clone());
        }
    }
    if let Some(nn) = &bundle.nn {
        user_text.push_str(&format!("\n\n{REFERENCE_HEADER}\n{}", nn.report));
    }
    Ok(Prompt {
        system_text: String::new(),
        user_text,
        image_payload,
        reference: bundle.nn.as_ref().map(|nn| nn.report.clone()),
    })
}
