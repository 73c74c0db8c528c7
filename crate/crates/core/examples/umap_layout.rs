//! Embeds three well-separated Gaussian blobs in 2-D and measures how much
//! structure survives: cluster recovery (ARI) and trustworthiness.
//!
//!     cargo run --release --example umap_layout

use dialogue_srl::cluster::{adjusted_rand_index, kmeans, KMeansParams};
use dialogue_srl::manifold::{prepare_rows, trustworthiness, umap_fit, Metric, NeighborRanking, UmapParams};
use dialogue_srl::synthetic::gaussian_blobs;

fn main() -> dialogue_srl::Result<()> {
    let (matrix, truth) = gaussian_blobs(100, 3, 50, 0.5, 20.0, 7);
    let params = UmapParams { seed: 7, ..UmapParams::default() };
    let reduced = umap_fit(&matrix, &params)?;
    println!(
        "{} points → {}-D (a = {:.4}, b = {:.4}, {} edges)",
        reduced.len(),
        params.n_components,
        reduced.metadata.a,
        reduced.metadata.b,
        reduced.metadata.n_edges
    );

    let fit = kmeans(&reduced.coords, &KMeansParams::new(3, 7))?;
    println!("k-means on the layout: ARI vs truth = {:.3}", adjusted_rand_index(&fit.labels, &truth));

    let ranking = NeighborRanking::new(&prepare_rows(&matrix, Metric::Euclidean)?, Metric::Euclidean);
    for k in [5, 15, 30] {
        println!("trustworthiness(k = {k:>2}) = {:.3}", trustworthiness(&ranking, &reduced.coords, k));
    }
    Ok(())
}
