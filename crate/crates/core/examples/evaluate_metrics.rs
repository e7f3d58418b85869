//! Scores a few generated reports and sweeps the truncation length.

use histo_icl::metrics::{evaluate_corpus, length_sweep, sweep_csv, EntityExtractor, EvalPair, MetricConfig};

fn main() -> histo_icl::Result<()> {
    let pairs = vec![
        EvalPair {
            id: "s1".into(),
            generated: "Clear cell renal cell carcinoma, Fuhrman grade 2. Margins are negative.".into(),
            reference: "Renal cell carcinoma, clear cell type, Fuhrman grade 2. Surgical margins negative.".into(),
        },
        EvalPair {
            id: "s2".into(),
            generated: "Lung adenocarcinoma with lymphovascular invasion.".into(),
            reference: "Invasive adenocarcinoma of the lung. No lymphovascular invasion.".into(),
        },
    ];
    let extractor = EntityExtractor::gazetteer(histo_icl::metrics::DEFAULT_GAZETTEER)?;
    let report = evaluate_corpus(&pairs, &MetricConfig::default(), &extractor)?;
    print!("{}", report.to_csv()?);

    let sweep = length_sweep(&pairs, &[4, 8, 12, 16], &MetricConfig::default(), &extractor)?;
    print!("\n{}", sweep_csv(&sweep)?);
    Ok(())
}
