use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use histo_icl::aggregator::PoolSource;
use histo_icl::context::IclFlags;
use histo_icl::metrics::FactEntMode;
use histo_icl::workflow::{self, run_slug, AblationKind, RunConfig};
use histo_icl::{Error, Result};

#[derive(Parser)]
#[command(name = "histo-icl", version, about = "Retrieval-augmented histopathology report generation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// fixed:<text>, echo-nn, echo-prompt-hash, http or http:<base-url>.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Backend for feedback and guideline requests (defaults to --backend).
    #[arg(long, global = true)]
    reviewer: Option<String>,
    #[arg(short, long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    nn: bool,
    #[arg(long, global = true)]
    guideline: bool,
    #[arg(long, global = true)]
    feedback: bool,
    /// Disable every context component, overriding the config file.
    #[arg(long, global = true, conflicts_with_all = ["nn", "guideline", "feedback"])]
    base: bool,
    /// Concurrent backend requests.
    #[arg(long, global = true)]
    budget: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Token limit applied to both sides before scoring.
    #[arg(long, global = true)]
    truncation: Option<usize>,
    #[arg(long, global = true)]
    gazetteer: Option<PathBuf>,
    #[arg(long, global = true)]
    entity_endpoint: Option<String>,
    #[arg(long, global = true, value_enum)]
    fact_ent: Option<FactEnt>,
    #[arg(long, global = true)]
    max_tokens: Option<u32>,
    #[arg(long, global = true)]
    temperature: Option<f64>,
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    timeout_secs: Option<f64>,
    #[arg(long, global = true)]
    retries: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FactEnt {
    F1,
    Precision,
    Recall,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pool {
    Projected,
    Contextualized,
}

#[derive(Clone, Copy, ValueEnum)]
enum Table {
    /// K = 1, 3, 5.
    #[value(alias = "k")]
    Neighbors,
    /// The five component combinations.
    Components,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the manifest and aggregate every record's patches into tokens.
    Ingest {
        /// Aggregator weight file; seeded weights otherwise.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        weight_seed: Option<u64>,
        #[arg(long, value_enum)]
        pool: Option<Pool>,
    },
    /// Write the train / val / test split.
    Split {
        #[arg(long)]
        train: Option<f64>,
        #[arg(long)]
        val: Option<f64>,
        #[arg(long)]
        test: Option<f64>,
        #[arg(long)]
        split_seed: Option<u64>,
    },
    /// Build the retrieval index over the training split.
    Index,
    /// Build the per-record feedback store.
    BuildFeedback {
        #[arg(long)]
        force: bool,
        /// Generate the reviewed reports with the selected context flags
        /// instead of the base model.
        #[arg(long)]
        with_context: bool,
    },
    /// Build the per-category guideline cache.
    BuildGuidelines {
        #[arg(long)]
        force: bool,
        #[arg(long)]
        sample_size: Option<usize>,
    },
    /// Generate reports for the test split.
    Generate {
        #[arg(long)]
        force: bool,
    },
    /// Score a generations file.
    Evaluate {
        #[arg(long)]
        generations: Option<PathBuf>,
        /// Output prefix; writes <out>.csv and <out>.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a generations file at several truncation lengths.
    SweepLength {
        #[arg(long)]
        generations: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation table.
    Ablate {
        #[arg(long, value_enum)]
        table: Table,
        /// Output prefix; writes <out>.csv and <out>.md.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-category BLEU-1 / BLEU-4.
    Breakdown {
        #[arg(long)]
        generations: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($src:expr => $dst:expr) => {
            if let Some(v) = $src.clone() {
                $dst = v;
            }
        };
    }
    set!(c.manifest => cfg.manifest);
    set!(c.workdir => cfg.workdir);
    set!(c.backend => cfg.backend);
    set!(c.k => cfg.k);
    set!(c.budget => cfg.budget);
    set!(c.seed => cfg.seed);
    set!(c.truncation => cfg.metrics.truncation);
    set!(c.max_tokens => cfg.request.max_tokens);
    set!(c.temperature => cfg.request.temperature);
    set!(c.model => cfg.request.model);
    set!(c.timeout_secs => cfg.request.timeout_secs);
    set!(c.retries => cfg.request.retries);
    if c.reviewer.is_some() {
        cfg.reviewer = c.reviewer.clone();
    }
    if c.gazetteer.is_some() {
        cfg.metrics.gazetteer = c.gazetteer.clone();
    }
    if c.entity_endpoint.is_some() {
        cfg.metrics.entity_endpoint = c.entity_endpoint.clone();
    }
    if let Some(mode) = c.fact_ent {
        cfg.metrics.fact_ent = match mode {
            FactEnt::F1 => FactEntMode::F1,
            FactEnt::Precision => FactEntMode::Precision,
            FactEnt::Recall => FactEntMode::Recall,
        };
    }
    if c.base {
        cfg.flags = IclFlags::BASE;
    } else if c.nn || c.guideline || c.feedback {
        cfg.flags = IclFlags {
            nn: c.nn,
            guideline: c.guideline,
            feedback: c.feedback,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::InvalidArgument(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = config(&cli.common)?;
    let metrics_dir = cfg.path("metrics");
    let slug = run_slug(cfg.flags, cfg.k);
    match cli.command {
        Command::Ingest {
            weights,
            queries,
            layers,
            heads,
            weight_seed,
            pool,
        } => {
            let a = &mut cfg.aggregator;
            a.weights = weights.or(a.weights.take());
            a.m = queries.unwrap_or(a.m);
            a.layers = layers.unwrap_or(a.layers);
            a.heads = heads.unwrap_or(a.heads);
            a.seed = weight_seed.unwrap_or(a.seed);
            if let Some(p) = pool {
                a.pool = match p {
                    Pool::Projected => PoolSource::Projected,
                    Pool::Contextualized => PoolSource::Contextualized,
                };
            }
            let s = workflow::ingest(&cfg)?;
            println!(
                "ingested {} records (d = {}, {} categories) into {}",
                s.records,
                s.d,
                s.categories,
                cfg.tokens_path().display()
            );
        }
        Command::Split {
            train,
            val,
            test,
            split_seed,
        } => {
            cfg.split.train_ratio = train.unwrap_or(cfg.split.train_ratio);
            cfg.split.val_ratio = val.unwrap_or(cfg.split.val_ratio);
            cfg.split.test_ratio = test.unwrap_or(cfg.split.test_ratio);
            cfg.split.seed = split_seed.unwrap_or(cfg.split.seed);
            let ids = workflow::split(&cfg)?;
            println!(
                "split {} / {} / {} into {}",
                ids.train.len(),
                ids.val.len(),
                ids.test.len(),
                cfg.split_path().display()
            );
        }
        Command::Index => {
            let index = workflow::index(&cfg)?;
            println!("indexed {} training records (d = {})", index.len(), index.d());
        }
        Command::BuildFeedback { force, with_context } => {
            let flags = if with_context { cfg.flags } else { IclFlags::BASE };
            let s = workflow::build_feedback(&cfg, force, flags)?;
            println!("feedback: {} added, {} already present", s.added, s.skipped);
        }
        Command::BuildGuidelines { force, sample_size } => {
            cfg.sample_size = sample_size.unwrap_or(cfg.sample_size);
            let s = workflow::build_guidelines(&cfg, force)?;
            println!("guidelines: {} added, {} already present", s.added, s.skipped);
        }
        Command::Generate { force } => {
            let s = workflow::generate(&cfg, force)?;
            println!(
                "{}: {} generated, {} already present -> {}",
                cfg.flags.label(),
                s.generated,
                s.skipped,
                s.path.display()
            );
        }
        Command::Evaluate { generations, out } => {
            let generations = generations.unwrap_or_else(|| cfg.generations_path());
            let report = workflow::evaluate(&cfg, &generations)?;
            let out = out.unwrap_or_else(|| metrics_dir.join(&slug));
            write(&with_ext(&out, "csv"), &report.to_csv()?)?;
            write(&with_ext(&out, "json"), &report.to_json()?)?;
            let c = &report.corpus;
            println!(
                "BLEU-1 {:.4}  BLEU-4 {:.4}  METEOR {:.4}  ROUGE-L {:.4}  fact_ENT {:.4}",
                c.bleu1, c.bleu4, c.meteor, c.rouge_l, c.fact_ent
            );
        }
        Command::SweepLength {
            generations,
            lengths,
            out,
        } => {
            let generations = generations.unwrap_or_else(|| cfg.generations_path());
            let (_, csv) = workflow::sweep_length(&cfg, &generations, &lengths)?;
            let out = out.unwrap_or_else(|| metrics_dir.join(format!("sweep-{slug}.csv")));
            write(&out, &csv)?;
            print!("{csv}");
        }
        Command::Ablate { table, out } => {
            let kind = match table {
                Table::Neighbors => AblationKind::Neighbors,
                Table::Components => AblationKind::Components,
            };
            let t = workflow::ablate(&cfg, kind)?;
            let name = match kind {
                AblationKind::Neighbors => "ablation-neighbors",
                AblationKind::Components => "ablation-components",
            };
            let out = out.unwrap_or_else(|| metrics_dir.join(name));
            write(&with_ext(&out, "csv"), &t.to_csv()?)?;
            write(&with_ext(&out, "md"), &t.to_markdown())?;
            print!("{}", t.to_markdown());
        }
        Command::Breakdown { generations, out } => {
            let generations = generations.unwrap_or_else(|| cfg.generations_path());
            let rows = workflow::breakdown(&cfg, &generations)?;
            let csv = workflow::breakdown_csv(&rows)?;
            let out = out.unwrap_or_else(|| metrics_dir.join(format!("breakdown-{slug}.csv")));
            write(&out, &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_backend() { 3 } else { 2 })
        }
    }
}
