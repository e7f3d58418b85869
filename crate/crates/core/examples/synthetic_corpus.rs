//! Writes a synthetic corpus that the CLI can ingest.
//!
//! ```text
//! cargo run --example synthetic_corpus -- /tmp/demo 60
//! histo-icl --manifest /tmp/demo/manifest.jsonl --workdir /tmp/demo/run ingest
//! ```

use std::path::PathBuf;

use histo_icl::synth::{write_synthetic_corpus, SynthSpec};

fn main() -> histo_icl::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "synthetic-corpus".into()));
    let records = args.next().and_then(|n| n.parse().ok()).unwrap_or(60);
    let spec = SynthSpec {
        records,
        categories: 4,
        ..SynthSpec::default()
    };
    let manifest = write_synthetic_corpus(&dir, &spec)?;
    println!("{}", manifest.display());
    Ok(())
}
