//! Exact cosine search with leave-one-out and a majority category vote.

use histo_icl::retrieval::{majority_category, RetrievalIndex};

fn main() -> histo_icl::Result<()> {
    let rows = [
        ("kirc-1", [0.9, 0.1, 0.0], "TCGA-KIRC"),
        ("kirc-2", [0.8, 0.2, 0.1], "TCGA-KIRC"),
        ("kirc-3", [0.7, 0.0, 0.3], "TCGA-KIRC"),
        ("luad-1", [0.1, 0.9, 0.2], "TCGA-LUAD"),
        ("luad-2", [0.0, 0.8, 0.4], "TCGA-LUAD"),
    ];
    let index = RetrievalIndex::build(rows.iter().map(|(id, v, c)| (id.to_string(), v.to_vec(), c.to_string())))?;

    let query = [0.9f32, 0.1, 0.0];
    for exclude in [None, Some("kirc-1")] {
        let hits = index.knn(&query, 3, exclude)?;
        println!("exclude {exclude:?}:");
        for h in &hits {
            println!("  {:<7} {:.6} {}", h.id, h.similarity, h.category);
        }
        println!("  vote: {}", majority_category(&hits)?);
    }
    Ok(())
}
