//! Scores k-means partitions of the same data for several k with silhouette,
//! Calinski-Harabasz and Davies-Bouldin, then combines them into the
//! composite over min-max normalized indices.
//!
//!     cargo run --release --example cluster_validity

use dialogue_srl::cluster::{composite_score, kmeans, validity_indices, KMeansParams};
use dialogue_srl::synthetic::gaussian_blobs;

fn main() -> dialogue_srl::Result<()> {
    let (matrix, _) = gaussian_blobs(40, 4, 8, 1.0, 6.0, 11);
    let points = matrix.to_f64_rows();
    let mut rows = Vec::new();
    for k in 2..=7 {
        let fit = kmeans(&points, &KMeansParams::new(k, 0))?;
        rows.push((k, validity_indices(&points, &fit.labels)?));
    }
    let span = |f: fn(&dialogue_srl::cluster::ValidityMetrics) -> f64| {
        let v: Vec<f64> = rows.iter().map(|(_, m)| f(m)).collect();
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        move |x: f64| if hi > lo { (x - lo) / (hi - lo) } else { 0.5 }
    };
    let (ns, nc, nd) = (span(|m| m.silhouette), span(|m| m.calinski_harabasz), span(|m| m.davies_bouldin));

    println!(" k  silhouette        CH      DB  composite");
    for (k, m) in &rows {
        let c = composite_score(ns(m.silhouette), nc(m.calinski_harabasz), nd(m.davies_bouldin))?;
        println!("{k:>2}  {:>10.3}  {:>8.1}  {:>6.3}  {c:>9.3}", m.silhouette, m.calinski_harabasz, m.davies_bouldin);
    }
    println!("(data has 4 planted blobs)");
    Ok(())
}
