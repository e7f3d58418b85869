//! Per-category BLEU for nearest-neighbour generations.

use histo_icl::context::IclFlags;
use histo_icl::synth::{write_synthetic_corpus, SynthSpec};
use histo_icl::workflow::{self, RunConfig};

fn main() -> histo_icl::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let spec = SynthSpec { records: 80, categories: 4, ..SynthSpec::default() };
    let manifest = write_synthetic_corpus(dir.path(), &spec)?;
    let cfg = RunConfig {
        manifest,
        workdir: dir.path().join("run"),
        backend: "echo-nn".into(),
        flags: IclFlags { nn: true, ..IclFlags::BASE },
        ..RunConfig::default()
    };
    workflow::prepare(&cfg)?;
    let gens = workflow::generate(&cfg, false)?;
    let rows = workflow::breakdown(&cfg, &gens.path)?;
    print!("{}", workflow::breakdown_csv(&rows)?);
    Ok(())
}
