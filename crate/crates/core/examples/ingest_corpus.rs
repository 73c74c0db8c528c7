//! Loads a dialogue corpus and questionnaire, splits the corpus into the four
//! phase × role streams, and checks questionnaire reliability.
//!
//!     cargo run --example ingest_corpus

use dialogue_srl::corpus::{cronbach_alpha, load_corpus, parse_oslq, save_corpus, segment_streams, OslqScheme};
use dialogue_srl::synthetic::{synthetic_corpus, CorpusSpec};

fn main() -> dialogue_srl::Result<()> {
    let data = synthetic_corpus(&CorpusSpec { n_students: 30, logs_per_student: 2, seed: 3, ..Default::default() })?;
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("corpus.jsonl");
    save_corpus(&data.corpus, &path)?;

    let corpus = load_corpus(&path)?;
    println!("{} utterances, {} students, {} logs", corpus.len(), corpus.students().len(), corpus.logs().len());
    for (stream, utterances) in segment_streams(&corpus) {
        println!("  {:<6} {:>4} utterances", stream.as_str(), utterances.len());
    }

    let table = parse_oslq(&data.oslq_csv, &OslqScheme::default())?;
    println!("questionnaire: {} accepted rows, {} rejected", table.records.len(), table.rejected.len());
    match cronbach_alpha(&table.item_matrix())? {
        Some(alpha) => println!("cronbach alpha over all items: {alpha:.3}"),
        None => println!("cronbach alpha undefined (constant totals)"),
    }
    Ok(())
}
