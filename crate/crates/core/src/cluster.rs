//! K-means on reduced coordinates, cluster validity indices, and the
//! composite clustering score.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::manifold::{ReducedCoords, UmapParams};
use crate::stats::{euclidean, squared_euclidean};

pub const SILHOUETTE_WEIGHT: f64 = 0.5;
pub const CH_WEIGHT: f64 = 0.3;
pub const DB_WEIGHT: f64 = 0.2;

fn default_n_init() -> usize {
    10
}
fn default_max_iter() -> usize {
    300
}
fn default_tol() -> f64 {
    1e-6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    #[serde(default = "default_n_init")]
    pub n_init: usize,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    /// Relative inertia change below which Lloyd iterations stop.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub seed: u64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansParams {
            k,
            n_init: default_n_init(),
            max_iter: default_max_iter(),
            tol: default_tol(),
            seed,
        }
    }
}

/// Outcome of [`kmeans`] on raw points.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub trace: Vec<f64>,
    /// Final inertia of every restart, in restart order.
    pub restart_inertias: Vec<f64>,
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = squared_euclidean(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_euclidean(p, &points[first])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    if target < w {
                        pick = Some(i);
                        break;
                    }
                    target -= w;
                }
            }
            // rounding can leave target just past the last positive weight
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            let free: Vec<usize> = (0..n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(points[pick].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(squared_euclidean(p, &points[pick]));
        }
    }
    centroids
}

fn means(points: &[Vec<f64>], labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    let dim = points[0].len();
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        for v in s.iter_mut() {
            *v /= c as f64;
        }
    }
    sums
}

fn inertia_of(points: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| squared_euclidean(p, &centroids[l]))
        .sum()
}

/// Moves the farthest-from-centroid points of multi-member clusters into
/// empty clusters.
fn repair_empty(points: &[Vec<f64>], labels: &mut [usize], centroids: &[Vec<f64>], k: usize) {
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    let mut moved = vec![false; points.len()];
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter().enumerate() {
            if moved[i] || counts[labels[i]] < 2 {
                continue;
            }
            let d = squared_euclidean(p, &centroids[labels[i]]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("n >= k guarantees a donor cluster");
        counts[labels[i]] -= 1;
        counts[empty] += 1;
        labels[i] = empty;
        moved[i] = true;
    }
}

fn lloyd(points: &[Vec<f64>], params: &KMeansParams, seed: u64) -> (Vec<usize>, Vec<Vec<f64>>, f64, Vec<f64>) {
    let k = params.k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(points, k, &mut rng);
    let mut labels = vec![0; points.len()];
    let mut trace: Vec<f64> = Vec::new();
    for _ in 0..params.max_iter.max(1) {
        for (l, p) in labels.iter_mut().zip(points) {
            *l = nearest(p, &centroids).0;
        }
        repair_empty(points, &mut labels, &centroids, k);
        centroids = means(points, &labels, k);
        let inertia = inertia_of(points, &labels, &centroids);
        let done = match trace.last() {
            Some(&prev) => prev <= 0.0 || (prev - inertia) <= params.tol * prev,
            None => inertia == 0.0,
        };
        trace.push(inertia);
        if done {
            break;
        }
    }
    let inertia = *trace.last().unwrap();
    (labels, centroids, inertia, trace)
}

/// Best-of-`n_init` k-means++ / Lloyd. Restart `r` is seeded with `seed + r`;
/// ties on inertia go to the earlier restart.
pub fn kmeans(points: &[Vec<f64>], params: &KMeansParams) -> Result<KMeansFit> {
    let n = points.len();
    if params.k == 0 {
        return Err(Error::InvalidParams("k must be at least 1".into()));
    }
    if n < params.k {
        return Err(Error::TooFewPoints {
            needed: params.k,
            found: n,
        });
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite coordinate".into()));
    }
    let mut best: Option<KMeansFit> = None;
    let mut restart_inertias = Vec::with_capacity(params.n_init);
    for r in 0..params.n_init.max(1) {
        let (labels, centroids, inertia, trace) =
            lloyd(points, params, params.seed.wrapping_add(r as u64));
        restart_inertias.push(inertia);
        if best.as_ref().is_none_or(|b| inertia < b.inertia) {
            best = Some(KMeansFit {
                labels,
                centroids,
                inertia,
                trace,
                restart_inertias: Vec::new(),
            });
        }
    }
    let mut best = best.unwrap();
    best.restart_inertias = restart_inertias;
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub kmeans: KMeansParams,
    pub umap: UmapParams,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub reduced_centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Member means of the original embedding rows.
    pub embedding_centroids: Vec<Vec<f64>>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.kmeans.k
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

/// Clusters reduced coordinates; `original` supplies the embedding rows
/// (same ids, same order) for the embedding-space centroids.
pub fn kmeans_fit(
    coords: &ReducedCoords,
    original: &EmbeddingMatrix,
    params: &KMeansParams,
) -> Result<ClusterModel> {
    if coords.ids.as_slice() != original.ids() {
        return Err(Error::InvalidInput(
            "reduced coordinates and embeddings are not row-aligned".into(),
        ));
    }
    let fit = kmeans(&coords.coords, params)?;
    let rows = original.to_f64_rows();
    let embedding_centroids = means(&rows, &fit.labels, params.k);
    Ok(ClusterModel {
        kmeans: *params,
        umap: coords.metadata.params,
        ids: coords.ids.clone(),
        labels: fit.labels,
        reduced_centroids: fit.centroids,
        inertia: fit.inertia,
        embedding_centroids,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidityMetrics {
    pub silhouette: f64,
    pub calinski_harabasz: f64,
    pub davies_bouldin: f64,
}

fn dense_labels(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut distinct: Vec<usize> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let dense = labels
        .iter()
        .map(|l| distinct.binary_search(l).unwrap())
        .collect();
    (dense, distinct.len())
}

/// Mean silhouette, with singleton clusters scoring 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    let (labels, k) = dense_labels(labels);
    if k < 2 {
        return Err(Error::InvalidInput("silhouette needs at least 2 clusters".into()));
    }
    let n = points.len();
    let mut sizes = vec![0usize; k];
    for &l in &labels {
        sizes[l] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        if sizes[labels[i]] == 1 {
            continue;
        }
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[labels[j]] += euclidean(&points[i], &points[j]);
            }
        }
        let own = labels[i];
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Silhouette, Calinski–Harabasz and Davies–Bouldin for a labelling.
pub fn validity_indices(points: &[Vec<f64>], labels: &[usize]) -> Result<ValidityMetrics> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::InvalidInput("points and labels must align".into()));
    }
    let (dense, k) = dense_labels(labels);
    if k < 2 {
        return Err(Error::InvalidInput("validity indices need at least 2 clusters".into()));
    }
    let n = points.len();
    let centroids = means(points, &dense, k);
    let mut sizes = vec![0usize; k];
    for &l in &dense {
        sizes[l] += 1;
    }
    let overall = means(points, &vec![0; n], 1).remove(0);

    let within: f64 = inertia_of(points, &dense, &centroids);
    let between: f64 = centroids
        .iter()
        .zip(&sizes)
        .map(|(c, &s)| s as f64 * squared_euclidean(c, &overall))
        .sum();
    if within == 0.0 || n == k {
        return Err(Error::Undefined(
            "Calinski-Harabasz index needs positive within-cluster dispersion".into(),
        ));
    }
    let ch = (between / (k - 1) as f64) / (within / (n - k) as f64);

    let mut scatter = vec![0.0; k];
    for (p, &l) in points.iter().zip(&dense) {
        scatter[l] += euclidean(p, &centroids[l]);
    }
    for (s, &size) in scatter.iter_mut().zip(&sizes) {
        *s /= size as f64;
    }
    let mut db = 0.0;
    for i in 0..k {
        let mut worst: f64 = 0.0;
        for j in 0..k {
            if i == j {
                continue;
            }
            let m = euclidean(&centroids[i], &centroids[j]);
            if m == 0.0 {
                return Err(Error::Undefined("two clusters share a centroid".into()));
            }
            worst = worst.max((scatter[i] + scatter[j]) / m);
        }
        db += worst;
    }
    db /= k as f64;

    Ok(ValidityMetrics {
        silhouette: silhouette(points, &dense)?,
        calinski_harabasz: ch,
        davies_bouldin: db,
    })
}

/// 0.5·silhouette + 0.3·CH + 0.2·(1 − DB) on min-max normalized indices.
pub fn composite_score(silhouette_norm: f64, ch_norm: f64, db_norm: f64) -> Result<f64> {
    for (name, v) in [
        ("silhouette_norm", silhouette_norm),
        ("ch_norm", ch_norm),
        ("db_norm", db_norm),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidInput(format!("{name} = {v} outside [0, 1]")));
        }
    }
    Ok(SILHOUETTE_WEIGHT * silhouette_norm + CH_WEIGHT * ch_norm + DB_WEIGHT * (1.0 - db_norm))
}

/// Adjusted Rand index between two labellings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    let (a, ka) = dense_labels(a);
    let (b, kb) = dense_labels(b);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(&b) {
        table[x][y] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let rows: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2(table.iter().map(|r| r[j]).sum())).sum();
    let total = c2(a.len() as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn pts(values: &[f64]) -> Vec<Vec<f64>> {
        values.iter().map(|&v| vec![v]).collect()
    }

    #[test]
    fn four_point_fixture() {
        let points = pts(&[0.0, 1.0, 10.0, 11.0]);
        let fit = kmeans(&points, &KMeansParams::new(2, 3)).unwrap();
        assert_eq!(fit.labels[0], fit.labels[1]);
        assert_eq!(fit.labels[2], fit.labels[3]);
        assert_ne!(fit.labels[0], fit.labels[2]);
        let mut cs: Vec<f64> = fit.centroids.iter().map(|c| c[0]).collect();
        cs.sort_by(f64::total_cmp);
        assert_eq!(cs, vec![0.5, 10.5]);
        assert!((fit.inertia - 1.0).abs() < 1e-12);

        // exhaustive check over all 2-partitions
        let mut best = f64::INFINITY;
        for mask in 1u32..15 {
            let labels: Vec<usize> = (0..4).map(|i| ((mask >> i) & 1) as usize).collect();
            best = best.min(inertia_of(&points, &labels, &means(&points, &labels, 2)));
        }
        assert!((fit.inertia - best).abs() < 1e-12);
    }

    #[test]
    fn k_equals_n() {
        let points = pts(&[3.0, -1.0, 7.5, 2.0, 9.0]);
        let fit = kmeans(&points, &KMeansParams::new(5, 0)).unwrap();
        assert_eq!(fit.inertia, 0.0);
        let mut labels = fit.labels.clone();
        labels.sort_unstable();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            kmeans(&pts(&[1.0, 2.0]), &KMeansParams::new(3, 0)).unwrap_err(),
            Error::TooFewPoints { .. }
        ));
    }

    #[test]
    fn duplicate_points_fill_every_cluster() {
        let points = pts(&[1.0, 1.0, 1.0, 5.0, 5.0]);
        let fit = kmeans(&points, &KMeansParams::new(3, 8)).unwrap();
        let mut sizes = vec![0; 3];
        for &l in &fit.labels {
            sizes[l] += 1;
        }
        assert!(sizes.iter().all(|&s| s > 0));
    }

    proptest! {
        #[test]
        fn lloyd_trace_non_increasing(seed in 0u64..500, k in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let points: Vec<Vec<f64>> =
                (0..40).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
            let fit = kmeans(&points, &KMeansParams::new(k, seed)).unwrap();
            for w in fit.trace.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
            for &r in &fit.restart_inertias {
                prop_assert!(fit.inertia <= r);
            }
            let recomputed = inertia_of(&points, &fit.labels, &fit.centroids);
            prop_assert!((recomputed - fit.inertia).abs() <= 1e-6 * fit.inertia.max(1e-12));
        }

        #[test]
        fn indices_scale_invariant(seed in 0u64..500, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let points: Vec<Vec<f64>> =
                (0..20).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
            let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
            let scaled: Vec<Vec<f64>> =
                points.iter().map(|p| p.iter().map(|v| v * scale).collect()).collect();
            let a = validity_indices(&points, &labels).unwrap();
            let b = validity_indices(&scaled, &labels).unwrap();
            prop_assert!((a.silhouette - b.silhouette).abs() < 1e-9);
            prop_assert!((a.calinski_harabasz - b.calinski_harabasz).abs() < 1e-9 * a.calinski_harabasz);
            prop_assert!((a.davies_bouldin - b.davies_bouldin).abs() < 1e-9);
        }

        #[test]
        fn composite_monotone(s in 0.0f64..0.9, c in 0.0f64..0.9, d in 0.1f64..1.0, step in 0.0f64..0.1) {
            let base = composite_score(s, c, d).unwrap();
            prop_assert!(composite_score(s + step, c, d).unwrap() >= base);
            prop_assert!(composite_score(s, c + step, d).unwrap() >= base);
            prop_assert!(composite_score(s, c, d - step).unwrap() >= base);
        }
    }

    #[test]
    fn validity_fixture() {
        let points = pts(&[0.0, 1.0, 10.0, 11.0]);
        let m = validity_indices(&points, &[0, 0, 1, 1]).unwrap();
        let expected_s =
            (2.0 * (1.0 - 1.0 / 10.5) + 2.0 * (1.0 - 1.0 / 9.5)) / 4.0;
        assert!((m.silhouette - expected_s).abs() < 1e-9);
        assert!((m.silhouette - 0.8997).abs() < 1e-4);
        assert!((m.calinski_harabasz - 200.0).abs() < 1e-9);
        assert!((m.davies_bouldin - 0.1).abs() < 1e-9);
    }

    #[test]
    fn validity_errors() {
        let points = pts(&[1.0, 2.0, 3.0]);
        assert!(validity_indices(&points, &[0, 0, 0]).is_err());
        let same = pts(&[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            validity_indices(&same, &[0, 0, 1, 1]).unwrap_err(),
            Error::Undefined(_)
        ));
    }

    #[test]
    fn singleton_silhouette_is_zero() {
        let points = pts(&[0.0, 5.0, 5.5]);
        let s = silhouette(&points, &[0, 1, 1]).unwrap();
        // point 0 contributes 0; points 1 and 2 have a = 0.5, b = 5 and 5.5
        let expected = ((1.0 - 0.5 / 5.0) + (1.0 - 0.5 / 5.5)) / 3.0;
        assert!((s - expected).abs() < 1e-12);
    }

    #[test]
    fn far_blobs_silhouette_near_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut points = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for _ in 0..30 {
                points.push(vec![100.0 * c as f64 + rng.random::<f64>(), rng.random::<f64>()]);
                labels.push(c);
            }
        }
        assert!(silhouette(&points, &labels).unwrap() > 0.95);
    }

    #[test]
    fn random_labels_near_zero_silhouette() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let points: Vec<Vec<f64>> =
            (0..200).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let labels: Vec<usize> = (0..200).map(|_| rng.random_range(0..3)).collect();
        assert!(silhouette(&points, &labels).unwrap().abs() < 0.15);
    }

    #[test]
    fn composite_examples() {
        assert_eq!(composite_score(1.0, 1.0, 0.0).unwrap(), 1.0);
        assert_eq!(composite_score(0.0, 0.0, 1.0).unwrap(), 0.0);
        assert!((composite_score(0.8, 0.5, 0.3).unwrap() - 0.69).abs() < 1e-12);
        assert!(composite_score(1.2, 0.5, 0.3).is_err());
    }

    #[test]
    fn ari_identity_and_permutation() {
        let a = [0, 0, 1, 1, 2, 2];
        assert!((adjusted_rand_index(&a, &[2, 2, 0, 0, 1, 1]) - 1.0).abs() < 1e-12);
        assert!(adjusted_rand_index(&a, &[0, 1, 0, 1, 0, 1]) < 0.1);
    }
}
