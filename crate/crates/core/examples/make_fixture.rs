//! Writes a synthetic corpus, questionnaire, vector store and run config.
//!
//!     cargo run --example make_fixture -- <dir> [n_students] [seed]

use std::path::PathBuf;

use dialogue_srl::pipeline::write_fixture;
use dialogue_srl::synthetic::CorpusSpec;

fn main() -> dialogue_srl::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "fixture".into()));
    let n_students = args.next().map_or(24, |s| s.parse().expect("n_students is a number"));
    let seed = args.next().map_or(1, |s| s.parse().expect("seed is a number"));
    let spec = CorpusSpec { n_students, per_log: 2, seed, ..Default::default() };
    let config = write_fixture(&dir, &spec)?;
    println!("wrote {}", config.display());
    println!("run: cargo run -- run --config {}", config.display());
    Ok(())
}
