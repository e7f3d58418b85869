//! Prepared working directories over synthetic corpora.

use histo_icl::synth::{write_synthetic_corpus, SynthSpec};
use histo_icl::workflow::{prepare, AggregatorSettings, RunConfig};
use tempfile::TempDir;

pub struct Workspace {
    pub dir: TempDir,
    pub config: RunConfig,
}

pub fn small_config(dir: &std::path::Path, manifest: std::path::PathBuf) -> RunConfig {
    RunConfig {
        manifest,
        workdir: dir.join("run"),
        aggregator: AggregatorSettings {
            m: 4,
            layers: 1,
            heads: 2,
            seed: 11,
            ..AggregatorSettings::default()
        },
        ..RunConfig::default()
    }
}

/// Synthetic corpus of `records` cases over `categories` categories,
/// ingested, split and indexed.
pub fn prepared(records: usize, categories: usize, seed: u64) -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        records,
        categories,
        d: 16,
        min_patches: 3,
        max_patches: 12,
        seed,
        ..SynthSpec::default()
    };
    let manifest = write_synthetic_corpus(&dir.path().join("corpus"), &spec).unwrap();
    let config = small_config(dir.path(), manifest);
    prepare(&config).unwrap();
    Workspace { dir, config }
}
