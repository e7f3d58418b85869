//! Builds the guideline cache and feedback store for a synthetic training
//! split with mock backends, then shows one entry of each.

use histo_icl::context::IclFlags;
use histo_icl::pipelines::{FeedbackStore, GuidelineCache};
use histo_icl::synth::{write_synthetic_corpus, SynthSpec};
use histo_icl::workflow::{self, RunConfig};

fn main() -> histo_icl::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let manifest = write_synthetic_corpus(dir.path(), &SynthSpec::default())?;
    let cfg = RunConfig {
        manifest,
        workdir: dir.path().join("run"),
        backend: "echo-prompt-hash".into(),
        reviewer: Some("fixed:State the margin status and the grade explicitly.".into()),
        ..RunConfig::default()
    };
    workflow::prepare(&cfg)?;

    let g = workflow::build_guidelines(&cfg, false)?;
    let f = workflow::build_feedback(&cfg, false, IclFlags::BASE)?;
    println!("guidelines: {} added; feedback: {} added", g.added, f.added);
    let again = workflow::build_feedback(&cfg, false, IclFlags::BASE)?;
    println!("rerun: {} added, {} skipped", again.added, again.skipped);

    let cache = GuidelineCache::load(&cfg.guidelines_path())?;
    let entry = cache.iter().next().expect("one category");
    println!("{}: {} sampled reports -> {:?}", entry.category, entry.sample_ids.len(), entry.guideline);
    let store = FeedbackStore::load(&cfg.feedback_path())?;
    let fb = store.iter().next().expect("one record");
    println!("{}: reviewed {:.12}... -> {:?}", fb.id, fb.generated, fb.feedback);
    Ok(())
}
