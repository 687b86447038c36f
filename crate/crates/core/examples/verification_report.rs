//! Runs two verification suites on a reduced corpus and prints the report
//! as markdown. `mprod verify all` runs the full corpus.

use std::io;

use martingale_products::harness::{emit_report, run_suite, CorpusConfig, ReportFormat};
use martingale_products::Result;

fn main() -> Result<()> {
    let config = CorpusConfig {
        depths: vec![6, 8],
        samples: 100,
        ..CorpusConfig::default()
    };
    let mut records = run_suite("product-identity", &config)?;
    records.extend(run_suite("square-paraproduct-pointwise", &config)?);
    emit_report(&records, ReportFormat::Md, io::stdout().lock())?;
    let failing = records.iter().filter(|r| !r.pass).count();
    eprintln!("{} records, {failing} failing", records.len());
    Ok(())
}
