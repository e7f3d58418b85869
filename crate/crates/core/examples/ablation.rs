//! Both ablation tables over a synthetic corpus.
//!
//! Mocks cannot act on guidelines or feedback, so the component table uses
//! the prompt-hash mock and only shows the table shape. The K table uses the
//! nearest-neighbour echo, whose scores do reflect retrieval. Point
//! `--backend` at a real model in the CLI for meaningful numbers.

use histo_icl::context::IclFlags;
use histo_icl::synth::{write_synthetic_corpus, SynthSpec};
use histo_icl::workflow::{self, AblationKind, RunConfig};

fn main() -> histo_icl::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let manifest = write_synthetic_corpus(dir.path(), &SynthSpec { records: 60, ..SynthSpec::default() })?;
    let hashed = RunConfig {
        manifest,
        workdir: dir.path().join("components"),
        backend: "echo-prompt-hash".into(),
        reviewer: Some("fixed:Report the grade.".into()),
        ..RunConfig::default()
    };
    println!("{}", workflow::ablate(&hashed, AblationKind::Components)?.to_markdown());

    // echo-nn cannot write the base-model reports that feedback reviews
    let echo = RunConfig {
        workdir: dir.path().join("neighbors"),
        ..hashed.clone()
    };
    workflow::prepare(&echo)?;
    workflow::build_guidelines(&echo, false)?;
    workflow::build_feedback(&echo, false, IclFlags::BASE)?;
    let echo = RunConfig {
        backend: "echo-nn".into(),
        ..echo
    };
    println!("{}", workflow::ablate(&echo, AblationKind::Neighbors)?.to_markdown());
    Ok(())
}
