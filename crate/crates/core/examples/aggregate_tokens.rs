//! Aggregates a bag of patch features into a fixed set of query tokens and
//! prints the per-head attention of the first query.

use histo_icl::aggregator::{Aggregator, AggregatorConfig, AggregatorWeights};
use histo_icl::corpus::PatchFeatures;

fn main() -> histo_icl::Result<()> {
    let d = 16;
    let n = 6;
    let data: Vec<f32> = (0..n * d).map(|i| ((i * 31 % 17) as f32 - 8.0) / 8.0).collect();
    let patches = PatchFeatures::new(n, d, data)?;

    let weights = AggregatorWeights::seeded(42, AggregatorConfig { heads: 4, ..AggregatorConfig::with_dim(d) })?;
    let aggregator = Aggregator::new(&weights)?;
    let forward = aggregator.forward(&patches)?;
    let tokens = aggregator.aggregate(&patches)?;

    println!("{} patches -> {} tokens of dimension {}", n, tokens.m(), tokens.d());
    println!("pooled[..4] = {:?}", &tokens.pooled()[..4]);
    let last = forward.attention.last().expect("at least one layer");
    for (h, map) in last.iter().enumerate() {
        let row: Vec<String> = map[..n].iter().map(|a| format!("{a:.3}")).collect();
        println!("head {h}, query 0: [{}]", row.join(", "));
    }
    Ok(())
}
