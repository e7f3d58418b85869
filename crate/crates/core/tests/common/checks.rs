//! Whole-system checks, each returning a one-line detail on success. Used by
//! the acceptance runner and by the integration tests.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use histo_icl::aggregator::{Aggregator, AggregatorConfig, AggregatorWeights, TokenSet, TokenStore};
use histo_icl::context::{
    assemble_prompt, base_prompt, build_bundle, render_feedback_request, render_guideline_request, ContextSources,
    IclFlags,
};
use histo_icl::corpus::{write_features, write_manifest, Corpus, PatchFeatures, WsiRecord};
use histo_icl::genclient::{mock_backend, Counted};
use histo_icl::metrics::{
    bleu, evaluate_corpus, fact_ent, meteor, rouge_l, tokenize, EntityExtractor, EvalPair, FactEntMode,
    MeteorParams, MetricConfig,
};
use histo_icl::pipelines::{
    build_feedback_store, build_guideline_cache, FeedbackOptions, FeedbackStore, GuidelineCache, GuidelineOptions,
};
use histo_icl::retrieval::{Neighbor, NeighborSource, RetrievalIndex};
use histo_icl::workflow::{self, AblationKind, RunConfig, Session};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::fixtures::{self, f, s};
use super::{aggregator_oracle, knn_oracle, workspace};

pub type Check = Result<String, String>;

fn close(what: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol && got.is_finite() {
        Ok(())
    } else {
        Err(format!("{what}: got {got:.15}, want {want:.15} (tol {tol:e})"))
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

pub fn gazetteer() -> EntityExtractor {
    EntityExtractor::load_gazetteer(&fixtures::dir().join("gazetteer.txt")).unwrap()
}

/// Every metric on the ten hand-checked cases within 1e-9, and exact 1.0
/// for BLEU and ROUGE-L on an identity corpus.
pub fn metric_golden() -> Check {
    let cases = fixtures::json("golden_metrics.json");
    let cases = cases.as_array().unwrap();
    let g = gazetteer();
    for case in cases {
        let name = s(&case["name"]);
        let (ct, rt) = (s(&case["candidate"]), s(&case["reference"]));
        let (c, r) = (tokenize(ct), tokenize(rt));
        for n in 1..=4 {
            let got = bleu(std::slice::from_ref(&c), std::slice::from_ref(&r), n).map_err(e)?;
            close(&format!("{name} bleu{n}"), got, f(&case[format!("bleu{n}").as_str()]), 1e-9)?;
        }
        close(&format!("{name} meteor"), meteor(&c, &r, MeteorParams::default()).map_err(e)?, f(&case["meteor"]), 1e-9)?;
        close(&format!("{name} rouge_l"), rouge_l(&c, &r, 1.0).map_err(e)?, f(&case["rouge_l"]), 1e-9)?;
        close(&format!("{name} fact_ent"), fact_ent(ct, rt, &g, FactEntMode::F1).map_err(e)?, f(&case["fact_ent"]), 1e-9)?;
    }
    let identity: Vec<EvalPair> = cases
        .iter()
        .filter(|c| !tokenize(s(&c["reference"])).is_empty())
        .map(|c| EvalPair {
            id: s(&c["name"]).into(),
            generated: s(&c["reference"]).into(),
            reference: s(&c["reference"]).into(),
        })
        .collect();
    let report = evaluate_corpus(&identity, &MetricConfig::default(), &g).map_err(e)?;
    let k = &report.corpus;
    for (name, v) in [("bleu1", k.bleu1), ("bleu2", k.bleu2), ("bleu3", k.bleu3), ("bleu4", k.bleu4), ("rouge_l", k.rouge_l)] {
        if v != 1.0 {
            return Err(format!("identity corpus {name} = {v:.17}, want exactly 1"));
        }
    }
    Ok(format!("{} cases x 7 metrics within 1e-9; identity corpus exact", cases.len()))
}

/// Corpus BLEU-1..4 and ROUGE-L on 50 synthetic pairs against the
/// independent script's values within 1e-6.
pub fn cross_implementation() -> Check {
    let fx = fixtures::json("cross_impl_50.json");
    let pairs = fx["pairs"].as_array().unwrap();
    let cands: Vec<_> = pairs.iter().map(|p| tokenize(s(&p["generated"]))).collect();
    let refs: Vec<_> = pairs.iter().map(|p| tokenize(s(&p["reference"]))).collect();
    for n in 1..=4 {
        close(&format!("bleu{n}"), bleu(&cands, &refs, n).map_err(e)?, f(&fx["bleu"][n - 1]), 1e-6)?;
    }
    let mut sum = 0.0;
    for (i, (c, r)) in cands.iter().zip(&refs).enumerate() {
        let v = rouge_l(c, r, 1.0).map_err(e)?;
        close(&format!("pair {i} rouge_l"), v, f(&fx["rouge_l"][i]), 1e-6)?;
        sum += v;
    }
    close("mean rouge_l", sum / pairs.len() as f64, f(&fx["mean_rouge_l"]), 1e-6)?;
    Ok(format!("{} pairs: corpus BLEU-1..4 and ROUGE-L within 1e-6", pairs.len()))
}

/// Randomised exact-search trials against a brute-force scan.
pub fn knn_exactness(trials: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut compared = 0;
    for trial in 0..trials {
        let n = rng.random_range(1..=1000);
        let d = rng.random_range(1..=256);
        let mut rows: Vec<(String, Vec<f32>)> = (0..n)
            .map(|i| (format!("r{i:04}"), (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()))
            .collect();
        if trial % 5 == 0 && n > 2 {
            // planted exact ties
            for _ in 0..(n / 10).max(1) {
                let src = rng.random_range(0..n);
                let dst = rng.random_range(0..n);
                if src != dst {
                    rows[dst].1 = rows[src].1.clone();
                }
            }
        }
        rows.retain(|(_, v)| v.iter().any(|x| *x != 0.0));
        rows.shuffle(&mut rng);
        let index = RetrievalIndex::build(rows.iter().map(|(id, v)| (id.clone(), v.clone(), format!("c{}", id.len() % 3))))
            .map_err(e)?;
        let query: Vec<f32> = if rng.random_bool(0.5) {
            rows[rng.random_range(0..rows.len())].1.clone()
        } else {
            (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()
        };
        let k = if rng.random_bool(0.1) { rows.len() + 5 } else { rng.random_range(1..=rows.len().min(25)) };
        let exclude = rng.random_bool(0.3).then(|| rows[rng.random_range(0..rows.len())].0.clone());
        let got = index.knn(&query, k, exclude.as_deref()).map_err(e)?;
        let want = knn_oracle::knn(&rows, &query, k, exclude.as_deref());
        if got.len() != want.len() {
            return Err(format!("trial {trial}: {} results, oracle {}", got.len(), want.len()));
        }
        for (rank, (g, w)) in got.iter().zip(&want).enumerate() {
            if g.id != w.id {
                return Err(format!("trial {trial} rank {rank}: {} vs oracle {}", g.id, w.id));
            }
            close(&format!("trial {trial} rank {rank} similarity"), g.similarity, w.similarity, 1e-9)?;
        }
        compared += got.len();
    }
    Ok(format!("{trials} trials, {compared} ranked neighbours identical to brute force"))
}

fn perturb_layer_norms(w: &mut AggregatorWeights, rng: &mut ChaCha8Rng) {
    for layer in &mut w.layers {
        for ln in [&mut layer.ln_query, &mut layer.ln_patch, &mut layer.ln_ff] {
            ln.scale.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
            ln.bias.iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
        }
    }
}

/// Forward pass against the scalar oracle, attention normalisation,
/// patch-order invariance and output shape.
pub fn aggregator(trials: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let d = rng.random_range(1..=8);
        let divisors: Vec<usize> = (1..=d).filter(|h| d % h == 0).collect();
        let config = AggregatorConfig {
            m: rng.random_range(1..=8),
            layers: rng.random_range(1..=2),
            heads: *divisors.choose(&mut rng).unwrap(),
            d,
            d_ff: rng.random_range(1..=8),
        };
        let mut weights = AggregatorWeights::seeded(rng.random(), config).map_err(e)?;
        perturb_layer_norms(&mut weights, &mut rng);
        let n = rng.random_range(1..=8);
        let data: Vec<f32> = (0..n * d).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let features = PatchFeatures::new(n, d, data.clone()).map_err(e)?;
        let agg = Aggregator::new(&weights).map_err(e)?;
        let out = agg.forward(&features).map_err(e)?;
        let oracle = aggregator_oracle::forward(&weights, n, &data);

        for (t, row) in oracle.projected.iter().enumerate() {
            for (j, want) in row.iter().enumerate() {
                let got = f64::from(out.projected[t * d + j]);
                worst = worst.max((got - want).abs());
                close(&format!("trial {trial} token {t} dim {j}"), got, *want, 1e-5)?;
            }
        }
        for (l, heads) in out.attention.iter().enumerate() {
            for (h, map) in heads.iter().enumerate() {
                for t in 0..config.m {
                    let row = &map[t * n..(t + 1) * n];
                    close(&format!("trial {trial} layer {l} head {h} row {t} sum"), row.iter().sum(), 1.0, 1e-6)?;
                    for p in 0..n {
                        close("attention weight", row[p], oracle.attention[l][h][t][p], 1e-5)?;
                    }
                }
            }
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<f32> = order.iter().flat_map(|&p| data[p * d..(p + 1) * d].to_vec()).collect();
        let permuted = agg.forward(&PatchFeatures::new(n, d, shuffled).map_err(e)?).map_err(e)?;
        for (a, b) in out.projected.iter().zip(&permuted.projected) {
            close(&format!("trial {trial} permutation"), f64::from(*b), f64::from(*a), 1e-5)?;
        }
    }

    let weights = AggregatorWeights::seeded(3, AggregatorConfig::with_dim(16)).map_err(e)?;
    let agg = Aggregator::new(&weights).map_err(e)?;
    for n in [1, 5, 500] {
        let data: Vec<f32> = (0..n * 16).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let set = agg.aggregate(&PatchFeatures::new(n, 16, data).map_err(e)?).map_err(e)?;
        if (set.m(), set.d(), set.tokens().len()) != (32, 16, 32 * 16) {
            return Err(format!("n = {n}: token set is {} x {}", set.m(), set.d()));
        }
        let norm: f64 = set.pooled().iter().map(|v| f64::from(*v) * f64::from(*v)).sum::<f64>().sqrt();
        close(&format!("n = {n} pooled norm"), norm, 1.0, 1e-6)?;
    }
    Ok(format!("{trials} random instances (max |err| {worst:.1e}); 32x16 output for n in 1, 5, 500"))
}

/// Four training records with hand-set embeddings and texts, for prompt
/// goldens and payload properties.
pub struct Toy {
    pub _dir: tempfile::TempDir,
    pub corpus: Corpus,
    pub tokens: TokenStore,
    pub guidelines: BTreeMap<String, String>,
    pub feedback: BTreeMap<String, String>,
    pub query: TokenSet,
}

pub fn toy() -> Toy {
    let dir = tempfile::tempdir().unwrap();
    let specs = [
        ("train-a", "TCGA-KIRC", "Clear cell renal cell carcinoma, Fuhrman grade 2. Margins negative.", [1.0f32, 0.1]),
        ("train-b", "TCGA-KIRC", "Renal cell carcinoma, clear cell type, grade 3. Renal vein involved.", [0.9, 0.3]),
        ("train-c", "TCGA-LUAD", "Lung adenocarcinoma, acinar predominant. Pleura uninvolved.", [0.2, 1.0]),
        ("train-d", "TCGA-KIRC", "Clear cell carcinoma with sarcomatoid features. Adrenal gland negative.", [0.7, 0.6]),
    ];
    let mut records = Vec::new();
    let mut tokens = TokenStore::new();
    let mut feedback = BTreeMap::new();
    for (id, cat, report, emb) in specs {
        let rel = std::path::PathBuf::from(format!("{id}.wsif"));
        write_features(&dir.path().join(&rel), &PatchFeatures::new(1, 2, emb.to_vec()).unwrap()).unwrap();
        records.push(WsiRecord {
            id: id.into(),
            category: cat.into(),
            report: report.into(),
            features_path: rel,
        });
        tokens.insert(id, TokenSet::new(1, 2, emb.to_vec()).unwrap()).unwrap();
        feedback.insert(id.to_string(), format!("Feedback on {id}: state the grade and the margin status explicitly."));
    }
    write_manifest(&dir.path().join("manifest.jsonl"), &records).unwrap();
    let corpus = Corpus::load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
    let guidelines = BTreeMap::from([
        ("TCGA-KIRC".to_string(), "1. Lead with histologic type.\n2. Always give the Fuhrman grade.".to_string()),
        ("TCGA-LUAD".to_string(), "1. Name the predominant pattern.".to_string()),
    ]);
    Toy {
        _dir: dir,
        corpus,
        tokens,
        guidelines,
        feedback,
        query: TokenSet::new(1, 2, vec![1.0, 0.2]).unwrap(),
    }
}

impl Toy {
    pub fn index(&self, n: usize) -> RetrievalIndex {
        RetrievalIndex::build(self.corpus.records().iter().take(n).map(|r| {
            (r.id.clone(), self.tokens.get(&r.id).unwrap().pooled().to_vec(), r.category.clone())
        }))
        .unwrap()
    }
}

/// `(file name, bytes)` for every golden prompt.
pub fn golden_prompts() -> Result<Vec<(String, String)>, String> {
    let toy = toy();
    let index = toy.index(4);
    let sources = ContextSources {
        index: &index,
        train: &toy.corpus,
        tokens: &toy.tokens,
        guidelines: Some(&toy.guidelines),
        feedback: Some(&toy.feedback),
    };
    let mut out = Vec::new();
    for flags in IclFlags::ablation_rows() {
        let bundle = build_bundle(&toy.query, None, flags, 3, &sources).map_err(e)?;
        let prompt = assemble_prompt(&toy.query, &bundle).map_err(e)?;
        let name = workflow::run_slug(flags, 3);
        out.push((format!("prompt-{name}.txt"), prompt.user_text));
    }
    let reports: Vec<&str> = toy.corpus.records().iter().map(|r| r.report.as_str()).collect();
    out.push(("feedback-request.txt".into(), render_feedback_request(reports[0], reports[1]).map_err(e)?));
    out.push(("guideline-request.txt".into(), render_guideline_request(&reports).map_err(e)?));
    Ok(out)
}

/// Compares against `tests/fixtures/prompts`, or rewrites the files when
/// `UPDATE_GOLDEN` is set.
pub fn prompt_goldens() -> Check {
    let dir = fixtures::dir().join("prompts");
    let prompts = golden_prompts()?;
    let update = std::env::var_os("UPDATE_GOLDEN").is_some();
    for (name, text) in &prompts {
        let path = dir.join(name);
        if update {
            std::fs::create_dir_all(&dir).map_err(e)?;
            std::fs::write(&path, text).map_err(e)?;
            continue;
        }
        let want = std::fs::read_to_string(&path).map_err(|err| format!("{}: {err}", path.display()))?;
        if &want != text {
            return Err(format!("{name} differs from golden bytes"));
        }
        if name.starts_with("prompt-") && !text.starts_with(base_prompt()) {
            return Err(format!("{name} does not open with the base prompt"));
        }
    }
    if !prompts[0].1.contains("What are the diagnostic findings in the image?") {
        return Err("base prompt sentence missing".into());
    }
    Ok(format!("{} golden files byte-identical", prompts.len()))
}

/// With the nearest-neighbour echo mock, per-sample BLEU from the pipeline
/// equals BLEU of the brute-force nearest training report.
pub fn echo_nn_end_to_end() -> Check {
    let ws = workspace::prepared(50, 4, 5);
    let cfg = RunConfig {
        backend: "echo-nn".into(),
        flags: IclFlags {
            nn: true,
            ..IclFlags::BASE
        },
        k: 1,
        ..ws.config.clone()
    };
    let summary = workflow::generate(&cfg, false).map_err(e)?;
    let report = workflow::evaluate(&cfg, &summary.path).map_err(e)?;
    let session = Session::open(&cfg).map_err(e)?;
    let train_rows: Vec<(String, Vec<f32>)> = session
        .train
        .ids()
        .map(|id| (id.to_string(), session.tokens.get(id).unwrap().pooled().to_vec()))
        .collect();
    let l = cfg.metrics.truncation;
    for row in &report.rows {
        let query = session.tokens.get(&row.id).unwrap().pooled();
        let nearest = &knn_oracle::knn(&train_rows, query, 1, Some(&row.id))[0].id;
        let nn_report = &session.corpus.get(nearest).unwrap().report;
        let reference = &session.corpus.get(&row.id).unwrap().report;
        let c = tokenize(nn_report).truncate(l);
        let r = tokenize(reference).truncate(l);
        for (n, got) in [row.bleu1, row.bleu2, row.bleu3, row.bleu4].into_iter().enumerate() {
            let want = bleu(std::slice::from_ref(&c), std::slice::from_ref(&r), n + 1).map_err(e)?;
            close(&format!("{} bleu{}", row.id, n + 1), got, want, 1e-12)?;
        }
    }
    Ok(format!("{} test records of 50: pipeline BLEU-1..4 equal direct BLEU", report.rows.len()))
}

/// Table shapes from `ablate`, reproducibility across fresh directories,
/// and the five-point length sweep.
pub fn ablation_shapes() -> Check {
    let tables = |seed_dir: u64| -> Result<(String, String, workspace::Workspace), String> {
        let ws = workspace::prepared(30, 3, 9);
        let _ = seed_dir;
        let cfg = RunConfig {
            backend: "echo-prompt-hash".into(),
            ..ws.config.clone()
        };
        let t3 = workflow::ablate(&cfg, AblationKind::Neighbors).map_err(e)?;
        let t4 = workflow::ablate(&cfg, AblationKind::Components).map_err(e)?;
        let ks: Vec<usize> = t3.rows.iter().map(|r| r.k).collect();
        if ks != [1, 3, 5] {
            return Err(format!("neighbour table rows {ks:?}"));
        }
        let labels: Vec<&str> = t4.rows.iter().map(|r| r.setting.as_str()).collect();
        let want = ["Base Model", "+ NN", "+ NN + Guideline", "+ NN + Feedback", "+ NN + Guideline + Feedback"];
        if labels != want {
            return Err(format!("component table rows {labels:?}"));
        }
        for t in [&t3, &t4] {
            let csv = t.to_csv().map_err(e)?;
            if !csv.starts_with("setting,k,bleu1,bleu4,meteor,rouge_l\n") || csv.lines().count() != t.rows.len() + 1 {
                return Err(format!("unexpected table csv:\n{csv}"));
            }
        }
        Ok((t3.to_csv().map_err(e)?, t4.to_csv().map_err(e)?, ws))
    };
    let (a3, a4, ws) = tables(0)?;
    let (b3, b4, _) = tables(1)?;
    if a3 != b3 || a4 != b4 {
        return Err("ablation tables differ between identical runs".into());
    }

    let cfg = RunConfig {
        backend: "echo-nn".into(),
        flags: IclFlags {
            nn: true,
            ..IclFlags::BASE
        },
        ..ws.config.clone()
    };
    let gens = workflow::generate(&cfg, false).map_err(e)?;
    let (reports, csv) = workflow::sweep_length(&cfg, &gens.path, &[]).map_err(e)?;
    let lengths: Vec<usize> = reports.iter().map(|r| r.truncation).collect();
    if lengths != [100, 200, 300, 400, 500] || csv.lines().count() != 6 {
        return Err(format!("sweep lengths {lengths:?}"));
    }
    Ok("3-row K table, 5-row component table, reproducible; 5-point sweep 100..500".into())
}

/// Wraps an index and checks that no search made for a record returns that
/// record, identifying the record from the query vector alone.
pub struct Instrumented<'a> {
    pub inner: &'a RetrievalIndex,
    owner: HashMap<Vec<u32>, String>,
    pub calls: Mutex<usize>,
    pub violations: Mutex<Vec<String>>,
}

impl<'a> Instrumented<'a> {
    pub fn new(inner: &'a RetrievalIndex, tokens: &TokenStore) -> Self {
        let owner = tokens
            .iter()
            .map(|(id, set)| (set.pooled().iter().map(|v| v.to_bits()).collect(), id.to_string()))
            .collect();
        Self {
            inner,
            owner,
            calls: Mutex::new(0),
            violations: Mutex::new(Vec::new()),
        }
    }
}

impl NeighborSource for Instrumented<'_> {
    fn knn(&self, query: &[f32], k: usize, exclude: Option<&str>) -> histo_icl::Result<Vec<Neighbor>> {
        let out = self.inner.knn(query, k, exclude)?;
        *self.calls.lock().unwrap() += 1;
        let key: Vec<u32> = query.iter().map(|v| v.to_bits()).collect();
        if let Some(owner) = self.owner.get(&key) {
            if out.iter().any(|n| &n.id == owner) {
                self.violations.lock().unwrap().push(owner.clone());
            }
        }
        Ok(out)
    }
}

/// Leave-one-out during feedback construction, and zero backend calls when
/// both store builds are rerun.
pub fn leave_one_out_and_idempotence() -> Check {
    let ws = workspace::prepared(24, 3, 13);
    let session = Session::open(&ws.config).map_err(e)?;
    let probe = Instrumented::new(&session.index, &session.tokens);
    let guidelines_path = ws.config.guidelines_path();
    let feedback_path = ws.config.feedback_path();

    let analyst = Counted::new(mock_backend("fixed:1. Lead with the histologic type.").map_err(e)?);
    build_guideline_cache(&session.train, &analyst, &guidelines_path, &GuidelineOptions::default()).map_err(e)?;
    let guidelines = GuidelineCache::load(&guidelines_path).map_err(e)?;

    let generator = Counted::new(mock_backend("echo-nn").map_err(e)?);
    let reviewer = Counted::new(mock_backend("fixed:Mention the margins.").map_err(e)?);
    let sources = ContextSources {
        index: &probe,
        train: &session.train,
        tokens: &session.tokens,
        guidelines: Some(&guidelines),
        feedback: None,
    };
    let opts = FeedbackOptions {
        flags: IclFlags {
            nn: true,
            guideline: true,
            feedback: false,
        },
        k: 3,
        ..FeedbackOptions::default()
    };
    build_feedback_store(&sources, &generator, &reviewer, &feedback_path, &opts).map_err(e)?;
    let store = FeedbackStore::load(&feedback_path).map_err(e)?;
    let searches = *probe.calls.lock().unwrap();
    let violations = probe.violations.lock().unwrap().clone();
    if !violations.is_empty() {
        return Err(format!("records retrieved themselves: {violations:?}"));
    }
    if store.len() != session.train.len() || searches < session.train.len() {
        return Err(format!("{} entries, {} searches for {} records", store.len(), searches, session.train.len()));
    }
    for entry in store.iter() {
        let nearest = knn_oracle::knn(
            &session
                .train
                .ids()
                .map(|id| (id.to_string(), session.tokens.get(id).unwrap().pooled().to_vec()))
                .collect::<Vec<_>>(),
            session.tokens.get(&entry.id).unwrap().pooled(),
            1,
            Some(&entry.id),
        );
        let expected = &session.train.get(&nearest[0].id).unwrap().report;
        if &entry.generated != expected {
            return Err(format!("{}: generated report is not its nearest other record's", entry.id));
        }
    }

    let before = (analyst.calls(), generator.calls(), reviewer.calls());
    build_guideline_cache(&session.train, &analyst, &guidelines_path, &GuidelineOptions::default()).map_err(e)?;
    build_feedback_store(&sources, &generator, &reviewer, &feedback_path, &opts).map_err(e)?;
    let base = FeedbackOptions::default();
    build_feedback_store(&sources, &generator, &reviewer, &feedback_path, &base).map_err(e)?;
    let after = (analyst.calls(), generator.calls(), reviewer.calls());
    if before != after {
        return Err(format!("rerun issued calls: {before:?} -> {after:?}"));
    }
    Ok(format!(
        "{} records, {searches} searches, no self-retrieval; reruns issued 0 calls",
        session.train.len()
    ))
}

/// Payload length is `1 + [nn] + min(K, N)·[feedback]` for every flag set,
/// `K` and index size.
pub fn payload_law(cases: u32) -> Check {
    let toy = toy();
    let indexes: Vec<RetrievalIndex> = (1..=4).map(|n| toy.index(n)).collect();
    let mut runner = TestRunner::new(PropConfig {
        cases,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (any::<bool>(), any::<bool>(), any::<bool>(), 1usize..=7, 1usize..=4);
    runner
        .run(&strategy, |(nn, guideline, feedback, k, n)| {
            let flags = IclFlags { nn, guideline, feedback };
            let sources = ContextSources {
                index: &indexes[n - 1],
                train: &toy.corpus,
                tokens: &toy.tokens,
                guidelines: Some(&toy.guidelines),
                feedback: Some(&toy.feedback),
            };
            let bundle = build_bundle(&toy.query, None, flags, k, &sources).map_err(|x| TestCaseError::fail(x.to_string()))?;
            let prompt = assemble_prompt(&toy.query, &bundle).map_err(|x| TestCaseError::fail(x.to_string()))?;
            let want = 1 + usize::from(nn) + k.min(n) * usize::from(feedback);
            prop_assert_eq!(prompt.image_payload.len(), want);
            prop_assert_eq!(&prompt.image_payload[0], &toy.query);
            prop_assert_eq!(prompt.user_text.matches(base_prompt()).count(), 1);
            Ok(())
        })
        .map_err(|err| err.to_string())?;
    Ok(format!("{cases} generated cases over flags x K in 1..=7 x N in 1..=4"))
}

pub fn write_text(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}
