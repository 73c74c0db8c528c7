//! Runs every stage on a generated fixture, then reruns to show that
//! up-to-date stages are skipped.
//!
//!     cargo run --release --example end_to_end

use dialogue_srl::pipeline::{run_pipeline, write_fixture, RunConfig};
use dialogue_srl::synthetic::CorpusSpec;

fn main() -> dialogue_srl::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let spec = CorpusSpec { n_students: 30, per_log: 2, seed: 8, ..Default::default() };
    let config = RunConfig::load(write_fixture(dir.path(), &spec)?)?;

    let first = run_pipeline(&config)?;
    for (stage, outcome) in &first.stages {
        println!("{:<8} {outcome:?}", stage.as_str());
    }
    let table = std::fs::read_to_string(config.out.join("reports/table4_classification.md"))
        .map_err(|e| dialogue_srl::Error::io(config.out.join("reports"), e))?;
    println!("\n{table}");

    let second = run_pipeline(&config)?;
    println!("rerun skipped every stage: {}", second.all_skipped());
    Ok(())
}
