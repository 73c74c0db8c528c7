//! Writes embeddings to the binary vector store, reads them back bit-exactly,
//! and pulls one stream's rows through the file provider.
//!
//!     cargo run --example vector_store

use dialogue_srl::corpus::{segment_streams, StreamKey};
use dialogue_srl::embed::{get_vectors, l2_normalize, read_store, write_store, ProviderConfig};
use dialogue_srl::synthetic::{synthetic_corpus, CorpusSpec};

fn main() -> dialogue_srl::Result<()> {
    let data = synthetic_corpus(&CorpusSpec { n_students: 10, seed: 2, ..Default::default() })?;
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("vectors.emb");
    write_store(&data.vectors, &path)?;
    let size = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);

    let back = read_store(&path)?;
    assert_eq!(back, data.vectors);
    println!("{} rows × {} dims, {size} bytes on disk, round trip exact", back.len(), back.dim());

    let streams = segment_streams(&data.corpus);
    let post_q = get_vectors(&streams[&StreamKey::PostQ], &ProviderConfig::file(&path))?;
    println!("PostQ stream: {} rows, first id {}", post_q.len(), post_q.ids()[0]);

    let unit = l2_normalize(&post_q)?;
    let norm: f32 = unit.row(0).iter().map(|v| v * v).sum::<f32>().sqrt();
    println!("after l2 normalization the first row has norm {norm:.6}");
    Ok(())
}
