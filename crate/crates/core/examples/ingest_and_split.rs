//! Synthetic corpus → token store → seeded train/val/test split → index.

use histo_icl::synth::{write_synthetic_corpus, SynthSpec};
use histo_icl::workflow::{self, RunConfig};

fn main() -> histo_icl::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let manifest = write_synthetic_corpus(dir.path(), &SynthSpec { records: 40, ..SynthSpec::default() })?;
    let cfg = RunConfig {
        manifest,
        workdir: dir.path().join("run"),
        ..RunConfig::default()
    };

    let summary = workflow::ingest(&cfg)?;
    println!("{} records, d = {}, {} categories", summary.records, summary.d, summary.categories);

    let split = workflow::split(&cfg)?;
    println!("train {} / val {} / test {}", split.train.len(), split.val.len(), split.test.len());

    let index = workflow::index(&cfg)?;
    println!("index: {} rows of dimension {}", index.len(), index.d());
    Ok(())
}
