//! Fits every stream with fixed parameters, builds the pattern catalog, and
//! computes per-student alignment profiles and their descriptives.
//!
//!     cargo run --release --example alignment_profiles

use std::collections::BTreeMap;

use dialogue_srl::analytics::{default_category_map, descriptive_stats, student_profiles, PatternCatalog, Unit};
use dialogue_srl::cluster::kmeans_fit;
use dialogue_srl::corpus::segment_streams;
use dialogue_srl::embed::get_vectors;
use dialogue_srl::embed::{write_store, ProviderConfig};
use dialogue_srl::manifold::umap_fit;
use dialogue_srl::synthetic::{synthetic_corpus, CorpusSpec};
use dialogue_srl::tuner::{reference_parameters, SearchConfig};

fn main() -> dialogue_srl::Result<()> {
    let data = synthetic_corpus(&CorpusSpec { n_students: 40, seed: 5, ..Default::default() })?;
    let dir = tempfile::tempdir().expect("temp dir");
    let store = dir.path().join("vectors.emb");
    write_store(&data.vectors, &store)?;
    let provider = ProviderConfig::file(&store);

    let streams = segment_streams(&data.corpus);
    let fixed: BTreeMap<_, _> = reference_parameters().into_iter().collect();
    let search = SearchConfig::default();
    let mut models = BTreeMap::new();
    for (stream, utterances) in &streams {
        let vectors = get_vectors(utterances, &provider)?;
        let params = fixed[stream].to_trial_params(&search);
        let reduced = umap_fit(&vectors, &params.umap)?;
        models.insert(*stream, kmeans_fit(&reduced, &vectors, &params.kmeans)?);
    }
    let catalog = PatternCatalog::from_models(&models, &data.vectors, &default_category_map())?;
    println!("{} patterns", catalog.patterns.len());

    let profiles = student_profiles(&streams, &data.vectors, &catalog, Unit::Student)?;
    println!("{} student profiles\n", profiles.len());
    for d in descriptive_stats(&profiles, &catalog.pattern_ids()) {
        let category = catalog.get(&d.pattern_id).map(|p| p.dhasrl_category.as_str()).unwrap_or("");
        println!("{:<28} sd {:.3}  {category}", d.mean_label(), d.sd.unwrap_or(f64::NAN));
    }
    Ok(())
}
