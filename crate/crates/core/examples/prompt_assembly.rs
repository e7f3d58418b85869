//! Builds the prompt for each of the five context combinations over a
//! hand-made three-record training set.

use std::collections::BTreeMap;

use histo_icl::aggregator::{TokenSet, TokenStore};
use histo_icl::context::{assemble_prompt, build_bundle, ContextSources, IclFlags};
use histo_icl::corpus::{write_features, write_manifest, Corpus, PatchFeatures, WsiRecord};
use histo_icl::retrieval::RetrievalIndex;

fn main() -> histo_icl::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let train = [
        ("a", "TCGA-KIRC", "Clear cell renal cell carcinoma, grade 2.", [1.0f32, 0.0]),
        ("b", "TCGA-KIRC", "Renal cell carcinoma, clear cell type, grade 3.", [0.9, 0.2]),
        ("c", "TCGA-LUAD", "Invasive adenocarcinoma of the lung.", [0.1, 1.0]),
    ];
    let mut records = Vec::new();
    let mut tokens = TokenStore::new();
    for (id, category, report, v) in train {
        let path = dir.path().join(format!("{id}.wsif"));
        write_features(&path, &PatchFeatures::new(1, 2, v.to_vec())?)?;
        records.push(WsiRecord { id: id.into(), category: category.into(), report: report.into(), features_path: path });
        tokens.insert(id, TokenSet::new(1, 2, v.to_vec())?)?;
    }
    let manifest = dir.path().join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    let corpus = Corpus::load_manifest(&manifest)?;
    let index = RetrievalIndex::build(records.iter().map(|r| {
        (r.id.clone(), tokens.get(&r.id).unwrap().pooled().to_vec(), r.category.clone())
    }))?;

    let guidelines = BTreeMap::from([("TCGA-KIRC".to_string(), "1. State the grade.".to_string())]);
    let feedback: BTreeMap<String, String> =
        ["a", "b", "c"].iter().map(|id| (id.to_string(), format!("Feedback for {id}."))).collect();
    let sources = ContextSources {
        index: &index,
        train: &corpus,
        tokens: &tokens,
        guidelines: Some(&guidelines),
        feedback: Some(&feedback),
    };

    let query = TokenSet::new(1, 2, vec![1.0, 0.1])?;
    for flags in IclFlags::ablation_rows() {
        let bundle = build_bundle(&query, None, flags, 2, &sources)?;
        let prompt = assemble_prompt(&query, &bundle)?;
        println!("===== {} (payload {})", flags.label(), prompt.image_payload.len());
        println!("{}\n", prompt.user_text);
    }
    Ok(())
}
