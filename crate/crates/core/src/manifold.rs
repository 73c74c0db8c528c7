//! UMAP dimensionality reduction.
//!
//! Exact k-nearest neighbours, the fuzzy simplicial set (smooth kNN
//! calibration plus probabilistic union), and a seeded single-threaded SGD
//! layout. Tie-breaking is always by lower row index.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};

/// Spread of the low-dimensional kernel; fixed.
pub const SPREAD: f64 = 1.0;
pub const DEFAULT_N_EPOCHS: usize = 200;
pub const DEFAULT_NEGATIVE_SAMPLE_RATE: usize = 5;
pub const DEFAULT_LEARNING_RATE: f64 = 1.0;
/// Scale of the seeded standard-normal initial layout.
pub const INIT_SCALE: f64 = 1e-2;

const SIGMA_ITERATIONS: usize = 64;
const SIGMA_TOLERANCE: f64 = 1e-5;
const GRADIENT_CLIP: f32 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Cosine,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Euclidean => "euclidean",
            Metric::Cosine => "cosine",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UmapParams {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub n_components: usize,
    pub metric: Metric,
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub n_epochs: usize,
    #[serde(default = "default_negative_rate")]
    pub negative_sample_rate: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
}

fn default_epochs() -> usize {
    DEFAULT_N_EPOCHS
}
fn default_negative_rate() -> usize {
    DEFAULT_NEGATIVE_SAMPLE_RATE
}
fn default_learning_rate() -> f64 {
    DEFAULT_LEARNING_RATE
}

impl Default for UmapParams {
    fn default() -> Self {
        UmapParams {
            n_neighbors: 15,
            min_dist: 0.1,
            n_components: 2,
            metric: Metric::Euclidean,
            seed: 0,
            n_epochs: DEFAULT_N_EPOCHS,
            negative_sample_rate: DEFAULT_NEGATIVE_SAMPLE_RATE,
            learning_rate: DEFAULT_LEARNING_RATE,
        }
    }
}

impl UmapParams {
    pub fn new(
        n_neighbors: usize,
        min_dist: f64,
        n_components: usize,
        metric: Metric,
        seed: u64,
    ) -> Self {
        UmapParams {
            n_neighbors,
            min_dist,
            n_components,
            metric,
            seed,
            ..Default::default()
        }
    }

    /// Checks the parameters against a dataset of `n` points.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.n_neighbors < 2 {
            return Err(Error::InvalidParams("n_neighbors must be at least 2".into()));
        }
        if self.n_neighbors >= n {
            return Err(Error::InvalidParams(format!(
                "n_neighbors {} must be below the number of points {n}",
                self.n_neighbors
            )));
        }
        if !(self.min_dist > 0.0 && self.min_dist < SPREAD) {
            return Err(Error::InvalidParams(format!(
                "min_dist {} must lie in (0, {SPREAD})",
                self.min_dist
            )));
        }
        if self.n_components == 0 {
            return Err(Error::InvalidParams("n_components must be at least 1".into()));
        }
        if self.n_epochs == 0 || self.negative_sample_rate == 0 {
            return Err(Error::InvalidParams(
                "n_epochs and negative_sample_rate must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidParams("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Distance between two rows. Cosine expects unit-norm rows.
pub fn distance(metric: Metric, a: &[f64], b: &[f64]) -> f64 {
    match metric {
        Metric::Euclidean => crate::stats::euclidean(a, b),
        Metric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            (1.0 - dot).max(0.0)
        }
    }
}

/// Rows prepared for `metric`: unchanged for Euclidean, L2-normalized for cosine.
pub fn prepare_rows(matrix: &EmbeddingMatrix, metric: Metric) -> Result<Vec<Vec<f64>>> {
    match metric {
        Metric::Euclidean => Ok(matrix.to_f64_rows()),
        Metric::Cosine => {
            // unit rows in f64; the f32 store keeps raw vectors
            let rows = matrix.to_f64_rows();
            for (id, row) in matrix.ids().iter().zip(&rows) {
                if row.iter().all(|&v| v == 0.0) {
                    return Err(Error::ZeroVector(id.clone()));
                }
            }
            Ok(rows
                .into_iter()
                .map(|r| {
                    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
                    r.into_iter().map(|v| v / norm).collect()
                })
                .collect())
        }
    }
}

/// Every other point of each row, ordered by distance then index.
///
/// Computing this once lets any k-nearest-neighbour graph be read off as a
/// prefix.
#[derive(Debug, Clone)]
pub struct NeighborRanking {
    metric: Metric,
    order: Vec<Vec<usize>>,
    distances: Vec<Vec<f64>>,
}

impl NeighborRanking {
    pub fn new(rows: &[Vec<f64>], metric: Metric) -> Self {
        let n = rows.len();
        let mut order = Vec::with_capacity(n);
        let mut distances = Vec::with_capacity(n);
        for i in 0..n {
            let mut row: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (distance(metric, &rows[i], &rows[j]), j))
                .collect();
            row.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            order.push(row.iter().map(|&(_, j)| j).collect());
            distances.push(row.iter().map(|&(d, _)| d).collect());
        }
        NeighborRanking {
            metric,
            order,
            distances,
        }
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// 1-based rank of `j` among the neighbours of `i`.
    pub fn ranks_from(&self, i: usize) -> Vec<usize> {
        let mut ranks = vec![0; self.len()];
        for (r, &j) in self.order[i].iter().enumerate() {
            ranks[j] = r + 1;
        }
        ranks
    }

    pub fn knn(&self, k: usize) -> Result<KnnGraph> {
        let n = self.len();
        if k >= n {
            return Err(Error::InvalidParams(format!(
                "k = {k} must be below the number of points {n}"
            )));
        }
        Ok(KnnGraph {
            indices: self.order.iter().map(|r| r[..k].to_vec()).collect(),
            distances: self.distances.iter().map(|r| r[..k].to_vec()).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    pub indices: Vec<Vec<usize>>,
    pub distances: Vec<Vec<f64>>,
}

impl KnnGraph {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn k(&self) -> usize {
        self.indices.first().map(Vec::len).unwrap_or(0)
    }
}

/// Exact brute-force k-nearest neighbours.
pub fn knn_graph(rows: &[Vec<f64>], k: usize, metric: Metric) -> Result<KnnGraph> {
    if k >= rows.len() {
        return Err(Error::InvalidParams(format!(
            "k = {k} must be below the number of points {}",
            rows.len()
        )));
    }
    NeighborRanking::new(rows, metric).knn(k)
}

/// Symmetric sparse membership graph.
#[derive(Debug, Clone)]
pub struct FuzzyGraph {
    /// Per point, `(neighbour, weight)` sorted by neighbour index.
    pub rows: Vec<Vec<(usize, f64)>>,
    /// Distance to the nearest neighbour at positive distance.
    pub rhos: Vec<f64>,
    pub sigmas: Vec<f64>,
}

impl FuzzyGraph {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by_key(&j, |&(c, _)| c)
            .map(|p| self.rows[i][p].1)
            .unwrap_or(0.0)
    }

    pub fn edge_count(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

fn smooth_knn_sum(distances: &[f64], rho: f64, sigma: f64) -> f64 {
    distances
        .iter()
        .map(|&d| {
            let excess = (d - rho).max(0.0);
            if excess == 0.0 {
                1.0
            } else {
                (-excess / sigma).exp()
            }
        })
        .sum()
}

/// Finds σ with Σ exp(−max(0, d−ρ)/σ) = log₂(k) by bisection.
fn calibrate_sigma(distances: &[f64], rho: f64, target: f64) -> f64 {
    let mut lo = 0.0;
    let mut hi = f64::INFINITY;
    let mut mid = 1.0;
    for _ in 0..SIGMA_ITERATIONS {
        let psum = smooth_knn_sum(distances, rho, mid);
        if (psum - target).abs() < SIGMA_TOLERANCE {
            break;
        }
        if psum > target {
            hi = mid;
            mid = (lo + hi) / 2.0;
        } else {
            lo = mid;
            mid = if hi.is_infinite() { mid * 2.0 } else { (lo + hi) / 2.0 };
        }
    }
    mid
}

/// Smooth-kNN residual |Σ exp(·) − log₂(k)| for every point.
pub fn calibration_residuals(knn: &KnnGraph, graph: &FuzzyGraph) -> Vec<f64> {
    let target = (knn.k() as f64).log2();
    knn.distances
        .iter()
        .enumerate()
        .map(|(i, d)| (smooth_knn_sum(d, graph.rhos[i], graph.sigmas[i]) - target).abs())
        .collect()
}

pub fn fuzzy_graph(knn: &KnnGraph) -> FuzzyGraph {
    let n = knn.len();
    let target = (knn.k() as f64).log2();
    let mut rhos = vec![0.0; n];
    let mut sigmas = vec![1.0; n];
    let mut directed: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        let dists = &knn.distances[i];
        let row: Vec<(usize, f64)> = match dists.iter().copied().find(|&d| d > 0.0) {
            None => {
                // every neighbour coincides with the point: σ is undefined
                sigmas[i] = f64::NAN;
                knn.indices[i].iter().map(|&j| (j, 1.0)).collect()
            }
            Some(rho) => {
                rhos[i] = rho;
                let sigma = calibrate_sigma(dists, rho, target);
                sigmas[i] = sigma;
                knn.indices[i]
                    .iter()
                    .zip(dists)
                    .map(|(&j, &d)| {
                        let excess = (d - rho).max(0.0);
                        let w = if excess == 0.0 { 1.0 } else { (-excess / sigma).exp() };
                        (j, w)
                    })
                    .collect()
            }
        };
        directed.push(row);
    }

    // w ∪ wᵀ = w + wᵀ − w∘wᵀ, evaluated as 1 − (1−w)(1−wᵀ) so unit edges stay 1
    let mut forward: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); n];
    for (i, row) in directed.iter().enumerate() {
        for &(j, w) in row {
            if j != i {
                forward[i].insert(j, w);
            }
        }
    }
    let mut rows: Vec<std::collections::BTreeMap<usize, f64>> = vec![Default::default(); n];
    for i in 0..n {
        for (&j, &w_ij) in &forward[i] {
            let w_ji = forward[j].get(&i).copied().unwrap_or(0.0);
            let u = 1.0 - (1.0 - w_ij) * (1.0 - w_ji);
            if u > 0.0 {
                rows[i].insert(j, u);
                rows[j].insert(i, u);
            }
        }
    }
    FuzzyGraph {
        rows: rows.into_iter().map(|r| r.into_iter().collect()).collect(),
        rhos,
        sigmas,
    }
}

/// Low-dimensional membership ψ(d) = 1 / (1 + a·d^(2b)).
pub fn low_dim_kernel(d: f64, a: f64, b: f64) -> f64 {
    1.0 / (1.0 + a * d.powf(2.0 * b))
}

fn ab_target(d: f64, min_dist: f64) -> f64 {
    if d <= min_dist {
        1.0
    } else {
        (-(d - min_dist) / SPREAD).exp()
    }
}

pub const AB_FIT_POINTS: usize = 300;

fn ab_grid() -> Vec<f64> {
    (0..AB_FIT_POINTS)
        .map(|i| 3.0 * SPREAD * i as f64 / (AB_FIT_POINTS - 1) as f64)
        .collect()
}

/// Root-mean-square error of ψ against the target curve on the fit grid.
pub fn ab_fit_rmse(min_dist: f64, a: f64, b: f64) -> f64 {
    let xs = ab_grid();
    let sse: f64 = xs
        .iter()
        .map(|&d| (low_dim_kernel(d, a, b) - ab_target(d, min_dist)).powi(2))
        .sum();
    (sse / xs.len() as f64).sqrt()
}

/// Least-squares fit of (a, b): coarse log-grid search, then
/// Levenberg–Marquardt in (ln a, ln b).
pub fn fit_ab_curve(min_dist: f64) -> Result<(f64, f64)> {
    if !(min_dist > 0.0 && min_dist < SPREAD) {
        return Err(Error::InvalidParams(format!(
            "min_dist {min_dist} must lie in (0, {SPREAD})"
        )));
    }
    let xs = ab_grid();
    let ys: Vec<f64> = xs.iter().map(|&d| ab_target(d, min_dist)).collect();
    let sse = |u: f64, v: f64| -> f64 {
        let (a, b) = (u.exp(), v.exp());
        xs.iter()
            .zip(&ys)
            .map(|(&d, &y)| (low_dim_kernel(d, a, b) - y).powi(2))
            .sum()
    };

    let (mut u, mut v) = (0.0, 0.0);
    let mut best = f64::INFINITY;
    for i in 0..=40 {
        for j in 0..=30 {
            let cu = -4.0 + 8.0 * i as f64 / 40.0;
            let cv = -1.5 + 2.5 * j as f64 / 30.0;
            let s = sse(cu, cv);
            if s < best {
                best = s;
                u = cu;
                v = cv;
            }
        }
    }

    let mut lambda = 1e-3;
    let mut converged = false;
    for _ in 0..500 {
        let (a, b) = (u.exp(), v.exp());
        // normal equations JᵀJ δ = −Jᵀr
        let (mut jtj00, mut jtj01, mut jtj11, mut g0, mut g1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&d, &y) in xs.iter().zip(&ys) {
            let psi = low_dim_kernel(d, a, b);
            let r = psi - y;
            let (du, dv) = if d > 0.0 {
                let t = a * d.powf(2.0 * b);
                let common = -psi * psi * t;
                (common, common * 2.0 * b * d.ln())
            } else {
                (0.0, 0.0)
            };
            jtj00 += du * du;
            jtj01 += du * dv;
            jtj11 += dv * dv;
            g0 += du * r;
            g1 += dv * r;
        }
        let current = sse(u, v);
        let mut accepted = false;
        for _ in 0..50 {
            let m00 = jtj00 * (1.0 + lambda);
            let m11 = jtj11 * (1.0 + lambda);
            let det = m00 * m11 - jtj01 * jtj01;
            if det.abs() < 1e-300 {
                lambda *= 10.0;
                continue;
            }
            let du = (-g0 * m11 + g1 * jtj01) / det;
            let dv = (-g1 * m00 + g0 * jtj01) / det;
            let trial = sse(u + du, v + dv);
            if trial.is_finite() && trial <= current {
                u += du;
                v += dv;
                lambda = (lambda / 10.0).max(1e-12);
                accepted = true;
                if current - trial <= 1e-14 * current.max(1e-300) || du.abs().max(dv.abs()) < 1e-12 {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted || converged {
            // no downhill step left: stationary to working precision
            converged = true;
            break;
        }
    }
    let (a, b) = (u.exp(), v.exp());
    if !converged || !a.is_finite() || !b.is_finite() {
        return Err(Error::NonConvergence {
            residual: ab_fit_rmse(min_dist, a, b),
        });
    }
    Ok((a, b))
}

/// Provenance of a layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UmapMetadata {
    pub params: UmapParams,
    pub a: f64,
    pub b: f64,
    pub spread: f64,
    pub init: String,
    pub init_scale: f64,
    pub parallel_layout: bool,
    pub n_edges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedCoords {
    pub ids: Vec<String>,
    pub coords: Vec<Vec<f64>>,
    pub metadata: UmapMetadata,
}

impl ReducedCoords {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Fits a layout for `matrix`.
pub fn umap_fit(matrix: &EmbeddingMatrix, params: &UmapParams) -> Result<ReducedCoords> {
    params.validate(matrix.len())?;
    let rows = prepare_rows(matrix, params.metric)?;
    let ranking = NeighborRanking::new(&rows, params.metric);
    let (coords, metadata) = umap_layout(&ranking, params)?;
    Ok(ReducedCoords {
        ids: matrix.ids().to_vec(),
        coords,
        metadata,
    })
}

/// Fits a layout from a precomputed neighbour ranking.
pub fn umap_layout(
    ranking: &NeighborRanking,
    params: &UmapParams,
) -> Result<(Vec<Vec<f64>>, UmapMetadata)> {
    let n = ranking.len();
    params.validate(n)?;
    if ranking.metric() != params.metric {
        return Err(Error::InvalidParams(format!(
            "neighbour ranking uses {} but parameters ask for {}",
            ranking.metric().as_str(),
            params.metric.as_str()
        )));
    }
    let knn = ranking.knn(params.n_neighbors)?;
    let graph = fuzzy_graph(&knn);
    let (a, b) = fit_ab_curve(params.min_dist)?;
    let (coords, n_edges) = optimize_layout(&graph, params, a, b);
    if coords.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Undefined("layout produced non-finite coordinates".into()));
    }
    Ok((
        coords,
        UmapMetadata {
            params: *params,
            a,
            b,
            spread: SPREAD,
            init: "standard_normal".into(),
            init_scale: INIT_SCALE,
            parallel_layout: false,
            n_edges,
        },
    ))
}

fn clip(v: f32) -> f32 {
    v.clamp(-GRADIENT_CLIP, GRADIENT_CLIP)
}

/// Per-edge SGD on the fuzzy cross-entropy, in single precision like the
/// reference implementation. Returns the layout and the number of directed
/// edges sampled.
fn optimize_layout(graph: &FuzzyGraph, params: &UmapParams, a: f64, b: f64) -> (Vec<Vec<f64>>, usize) {
    let n = graph.len();
    let dim = params.n_components;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut y: Vec<f32> = (0..n * dim)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * INIT_SCALE) as f32)
        .collect();

    let max_w = graph
        .rows
        .iter()
        .flatten()
        .map(|&(_, w)| w)
        .fold(0.0, f64::max);
    let cutoff = max_w / params.n_epochs as f64;
    let mut heads = Vec::new();
    let mut tails = Vec::new();
    let mut epochs_per_sample = Vec::new();
    for (i, row) in graph.rows.iter().enumerate() {
        for &(j, w) in row {
            if w >= cutoff && w > 0.0 {
                heads.push(i);
                tails.push(j);
                epochs_per_sample.push(max_w / w);
            }
        }
    }
    let m = heads.len();
    let neg_rate = params.negative_sample_rate as f64;
    let epochs_per_negative: Vec<f64> = epochs_per_sample.iter().map(|e| e / neg_rate).collect();
    let mut next_sample = epochs_per_sample.clone();
    let mut next_negative = epochs_per_negative.clone();

    let (a, b) = (a as f32, b as f32);
    let mut diff = vec![0.0f32; dim];
    for epoch in 0..params.n_epochs {
        let alpha = (params.learning_rate * (1.0 - epoch as f64 / params.n_epochs as f64)) as f32;
        let now = epoch as f64;
        for e in 0..m {
            if next_sample[e] > now {
                continue;
            }
            let (i, j) = (heads[e], tails[e]);

            let mut dist2 = 0.0f32;
            for d in 0..dim {
                diff[d] = y[i * dim + d] - y[j * dim + d];
                dist2 += diff[d] * diff[d];
            }
            let coeff = if dist2 > 0.0 {
                let pow_b1 = dist2.powf(b - 1.0);
                -2.0 * a * b * pow_b1 / (1.0 + a * pow_b1 * dist2)
            } else {
                0.0
            };
            for d in 0..dim {
                let g = clip(coeff * diff[d]) * alpha;
                y[i * dim + d] += g;
                y[j * dim + d] -= g;
            }
            next_sample[e] += epochs_per_sample[e];

            let n_neg = ((now - next_negative[e]) / epochs_per_negative[e]).floor().max(0.0) as usize;
            for _ in 0..n_neg {
                let k = rng.random_range(0..n);
                if k == i {
                    continue;
                }
                let mut dist2 = 0.0f32;
                for d in 0..dim {
                    diff[d] = y[i * dim + d] - y[k * dim + d];
                    dist2 += diff[d] * diff[d];
                }
                let coeff = if dist2 > 0.0 {
                    2.0 * b / ((0.001 + dist2) * (1.0 + a * dist2.powf(b)))
                } else {
                    0.0
                };
                for d in 0..dim {
                    let g = if coeff > 0.0 {
                        clip(coeff * diff[d])
                    } else {
                        GRADIENT_CLIP
                    };
                    y[i * dim + d] += g * alpha;
                }
            }
            next_negative[e] += n_neg as f64 * epochs_per_negative[e];
        }
    }
    (y.chunks_exact(dim).map(|r| r.iter().map(|&v| v as f64).collect()).collect(), m)
}

/// Trustworthiness of a low-dimensional embedding at neighbourhood size `k`:
/// 1 − 2/(n·k·(2n − 3k − 1)) · Σᵢ Σ_{j ∈ Uᵢ} (r(i, j) − k), where Uᵢ are the
/// low-dimensional neighbours of i that are not high-dimensional neighbours and
/// r is the high-dimensional rank.
pub fn trustworthiness(high: &NeighborRanking, low: &[Vec<f64>], k: usize) -> f64 {
    let n = high.len();
    let low_rank = NeighborRanking::new(low, Metric::Euclidean);
    let mut penalty = 0.0;
    for i in 0..n {
        let ranks = high.ranks_from(i);
        for &j in &low_rank.order[i][..k] {
            let r = ranks[j];
            if r > k {
                penalty += (r - k) as f64;
            }
        }
    }
    let (nf, kf) = (n as f64, k as f64);
    1.0 - 2.0 / (nf * kf * (2.0 * nf - 3.0 * kf - 1.0)) * penalty
}

/// Writes `{id, coords}` JSON lines plus a `<path>.meta.json` sibling.
pub fn write_coords(coords: &ReducedCoords, path: impl AsRef<Path>) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        id: &'a str,
        coords: &'a [f64],
    }
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for (id, c) in coords.ids.iter().zip(&coords.coords) {
        let line = serde_json::to_string(&Line { id, coords: c }).expect("serializable");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    let meta_path = path.with_extension("meta.json");
    let meta = serde_json::to_string_pretty(&coords.metadata).expect("serializable");
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Normal;

    fn random_rows(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..d).map(|_| rng.random::<f64>()).collect())
            .collect()
    }

    #[test]
    fn knn_collinear() {
        let rows = vec![vec![0.0], vec![1.0], vec![10.0]];
        let g = knn_graph(&rows, 1, Metric::Euclidean).unwrap();
        assert_eq!(g.indices, vec![vec![1], vec![0], vec![1]]);
        assert_eq!(g.distances, vec![vec![1.0], vec![1.0], vec![9.0]]);
        assert!(knn_graph(&rows, 3, Metric::Euclidean).is_err());
    }

    #[test]
    fn knn_duplicates_list_each_other() {
        let rows = vec![vec![2.0, 2.0], vec![5.0, 0.0], vec![2.0, 2.0]];
        let g = knn_graph(&rows, 1, Metric::Euclidean).unwrap();
        assert_eq!(g.indices[0], vec![2]);
        assert_eq!(g.indices[2], vec![0]);
        assert_eq!(g.distances[0], vec![0.0]);
    }

    #[test]
    fn knn_matches_full_sort() {
        let rows = random_rows(50, 8, 3);
        let g = knn_graph(&rows, 5, Metric::Euclidean).unwrap();
        for i in 0..50 {
            let mut all: Vec<(f64, usize)> = (0..50)
                .filter(|&j| j != i)
                .map(|j| {
                    let d2: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum();
                    (d2, j)
                })
                .collect();
            all.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let expected: Vec<usize> = all[..5].iter().map(|p| p.1).collect();
            assert_eq!(g.indices[i], expected);
            assert!(g.distances[i].windows(2).all(|w| w[0] <= w[1]));
            assert!(!g.indices[i].contains(&i));
        }
    }

    #[test]
    fn fuzzy_graph_properties() {
        let rows = random_rows(60, 5, 9);
        let knn = knn_graph(&rows, 10, Metric::Euclidean).unwrap();
        let g = fuzzy_graph(&knn);
        for r in calibration_residuals(&knn, &g) {
            assert!(r < 1e-4, "residual {r}");
        }
        for i in 0..60 {
            assert_eq!(g.weight(i, i), 0.0);
            for &(j, w) in &g.rows[i] {
                assert!(w > 0.0 && w <= 1.0);
                assert!((w - g.weight(j, i)).abs() < 1e-9);
            }
            // nearest neighbour sits at distance rho: weight 1
            let nn = knn.indices[i][0];
            assert_eq!(g.weight(i, nn), 1.0);
        }
    }

    #[test]
    fn union_of_mutual_unit_edges_is_one() {
        let knn = KnnGraph {
            indices: vec![vec![1], vec![0]],
            distances: vec![vec![1.0], vec![1.0]],
        };
        let g = fuzzy_graph(&knn);
        assert_eq!(g.weight(0, 1), 1.0);
        assert_eq!(g.weight(1, 0), 1.0);
    }

    #[test]
    fn all_zero_neighbours_fall_back_to_unit_weights() {
        let rows = vec![vec![1.0], vec![1.0], vec![1.0], vec![4.0]];
        let knn = knn_graph(&rows, 2, Metric::Euclidean).unwrap();
        let g = fuzzy_graph(&knn);
        assert!(g.sigmas[0].is_nan());
        assert_eq!(g.weight(0, 1), 1.0);
        assert_eq!(g.weight(0, 2), 1.0);
    }

    #[test]
    fn ab_curve_for_default_min_dist() {
        let (a, b) = fit_ab_curve(0.1).unwrap();
        assert_eq!(low_dim_kernel(0.0, a, b), 1.0);
        let rmse = ab_fit_rmse(0.1, a, b);
        // least-squares optimum of this two-parameter family on the grid
        assert!((a - 1.5769).abs() < 2e-3 && (b - 0.8951).abs() < 2e-3, "{a} {b}");
        assert!(rmse < 0.0163, "rmse {rmse}");
        // no nearby parameter pair does better
        for da in [-0.01, 0.01] {
            for db in [-0.01, 0.01] {
                assert!(ab_fit_rmse(0.1, a + da, b + db) >= rmse);
            }
        }
        let mut prev = 1.0;
        for i in 1..100 {
            let psi = low_dim_kernel(i as f64 * 0.03, a, b);
            assert!(psi < prev);
            prev = psi;
        }
    }

    #[test]
    fn ab_curve_across_search_range() {
        for md in [0.01, 0.05, 0.2, 0.3, 0.5] {
            let (a, b) = fit_ab_curve(md).unwrap();
            assert!(a > 0.0 && b > 0.0);
            assert!(ab_fit_rmse(md, a, b) < 0.025);
        }
        assert!(fit_ab_curve(0.0).is_err());
        assert!(fit_ab_curve(1.0).is_err());
    }

    fn two_blobs(seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.1).unwrap();
        let mut rows = Vec::new();
        for c in 0..2 {
            for _ in 0..50 {
                rows.push(
                    (0..10)
                        .map(|d| if d == 0 { 20.0 * c as f32 } else { 0.0 } + rng.sample::<f64, _>(noise) as f32)
                        .collect(),
                );
            }
        }
        EmbeddingMatrix::from_rows((0..100).map(|i| format!("p{i}")).collect(), rows).unwrap()
    }

    #[test]
    fn separates_two_blobs() {
        let m = two_blobs(1);
        let params = UmapParams { seed: 7, ..Default::default() };
        let out = umap_fit(&m, &params).unwrap();
        let d = |i: usize, j: usize| crate::stats::euclidean(&out.coords[i], &out.coords[j]);
        let mut within: f64 = 0.0;
        let mut between = f64::INFINITY;
        for i in 0..100 {
            for j in (i + 1)..100 {
                if (i < 50) == (j < 50) {
                    within = within.max(d(i, j));
                } else {
                    between = between.min(d(i, j));
                }
            }
        }
        assert!(within < between, "within {within} between {between}");
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let m = two_blobs(2);
        let params = UmapParams { seed: 42, n_components: 3, ..Default::default() };
        let a = umap_fit(&m, &params).unwrap();
        let b = umap_fit(&m, &params).unwrap();
        let bits = |r: &ReducedCoords| -> Vec<u64> { r.coords.iter().flatten().map(|v| v.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn full_dimensional_output_on_tiny_data() {
        let rows: Vec<Vec<f32>> = (0..6).map(|i| vec![i as f32, (i * i) as f32 % 5.0, 1.0]).collect();
        let m = EmbeddingMatrix::from_rows((0..6).map(|i| format!("t{i}")).collect(), rows).unwrap();
        let params = UmapParams { n_neighbors: 3, n_components: 3, ..Default::default() };
        let out = umap_fit(&m, &params).unwrap();
        assert_eq!(out.len(), 6);
        assert!(out.coords.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn cosine_metric_path() {
        let m = two_blobs(3);
        let rows = prepare_rows(&m, Metric::Cosine).unwrap();
        for r in &rows {
            let n: f64 = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let params = UmapParams { metric: Metric::Cosine, ..Default::default() };
        assert!(umap_fit(&m, &params).is_ok());
    }

    #[test]
    fn params_validation() {
        let p = UmapParams { n_neighbors: 10, ..Default::default() };
        assert!(p.validate(10).is_err());
        assert!(p.validate(11).is_ok());
        assert!(UmapParams { min_dist: 1.0, ..p }.validate(50).is_err());
        assert!(UmapParams { n_components: 0, ..p }.validate(50).is_err());
    }

    #[test]
    fn trustworthiness_of_identity_is_one() {
        let rows = random_rows(40, 2, 4);
        let ranking = NeighborRanking::new(&rows, Metric::Euclidean);
        assert!((trustworthiness(&ranking, &rows, 5) - 1.0).abs() < 1e-12);
    }
}
