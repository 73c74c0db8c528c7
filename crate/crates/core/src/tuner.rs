//! Two-phase random search over UMAP + K-means hyperparameters.
//!
//! A coarse phase draws configurations uniformly from the search space; a
//! fine phase perturbs the top-scoring coarse configurations inside fixed
//! windows. Every trial is scored by the composite of min-max normalized
//! validity indices, normalized over the pooled population of valid trials.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{composite_score, kmeans, validity_indices, KMeansParams, ValidityMetrics};
use crate::corpus::StreamKey;
use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::manifold::{prepare_rows, umap_layout, Metric, NeighborRanking, UmapParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub n_neighbors: (usize, usize),
    pub min_dist: (f64, f64),
    pub n_components: (usize, usize),
    pub k: (usize, usize),
    pub metrics: Vec<Metric>,
    pub master_seed: u64,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            n_neighbors: (5, 50),
            min_dist: (0.01, 0.5),
            n_components: (2, 30),
            k: (2, 10),
            metrics: vec![Metric::Euclidean, Metric::Cosine],
            master_seed: 0,
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_neighbors.0 <= self.n_neighbors.1
            && self.min_dist.0 <= self.min_dist.1
            && self.n_components.0 <= self.n_components.1
            && self.k.0 <= self.k.1
            && !self.metrics.is_empty();
        if ok {
            Ok(())
        } else {
            Err(Error::Config("search space has an empty range".into()))
        }
    }

    /// The space collapsed onto one configuration.
    pub fn point(n_neighbors: usize, min_dist: f64, n_components: usize, metric: Metric, k: usize) -> Self {
        SearchSpace {
            n_neighbors: (n_neighbors, n_neighbors),
            min_dist: (min_dist, min_dist),
            n_components: (n_components, n_components),
            k: (k, k),
            metrics: vec![metric],
            master_seed: 0,
        }
    }
}

/// Half-widths of the fine-phase perturbation windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationWindows {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub n_components: usize,
    pub k: usize,
}

impl Default for PerturbationWindows {
    fn default() -> Self {
        PerturbationWindows {
            n_neighbors: 5,
            min_dist: 0.05,
            n_components: 2,
            k: 1,
        }
    }
}

fn default_n_trials() -> usize {
    100
}
fn default_per_config() -> usize {
    30
}
fn default_top_fraction() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    #[serde(default)]
    pub space: SearchSpace,
    #[serde(default = "default_n_trials")]
    pub n_trials: usize,
    #[serde(default = "default_per_config")]
    pub per_config: usize,
    #[serde(default = "default_top_fraction")]
    pub top_fraction: f64,
    #[serde(default)]
    pub windows: PerturbationWindows,
    /// Layout settings shared by every trial (n_epochs, negative rate, learning rate).
    #[serde(default)]
    pub umap_base: UmapParams,
    /// K-means settings shared by every trial (n_init, max_iter, tol).
    #[serde(default = "default_kmeans_base")]
    pub kmeans_base: KMeansParams,
}

fn default_kmeans_base() -> KMeansParams {
    KMeansParams::new(2, 0)
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            space: SearchSpace::default(),
            n_trials: default_n_trials(),
            per_config: default_per_config(),
            top_fraction: default_top_fraction(),
            windows: PerturbationWindows::default(),
            umap_base: UmapParams::default(),
            kmeans_base: default_kmeans_base(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialParams {
    pub umap: UmapParams,
    pub kmeans: KMeansParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchPhase {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedMetrics {
    pub silhouette: f64,
    pub calinski_harabasz: f64,
    pub davies_bouldin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: usize,
    pub phase: SearchPhase,
    /// Coarse trial this one perturbs (fine phase only).
    pub anchor: Option<usize>,
    pub params: TrialParams,
    pub status: TrialStatus,
    pub reason: Option<String>,
    pub raw_metrics: Option<ValidityMetrics>,
    pub normalized: Option<NormalizedMetrics>,
    pub composite: Option<f64>,
}

impl Trial {
    pub fn is_ok(&self) -> bool {
        self.status == TrialStatus::Ok
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchReport {
    pub stream: StreamKey,
    pub space: SearchSpace,
    pub windows: PerturbationWindows,
    pub coarse_count: usize,
    pub fine_count: usize,
    pub anchors: Vec<usize>,
    pub best: usize,
    pub trials: Vec<Trial>,
}

impl SearchReport {
    pub fn best_trial(&self) -> &Trial {
        self.trials.iter().find(|t| t.trial_id == self.best).expect("best trial present")
    }
}

type LayoutKey = (usize, u64, usize, Metric);

/// Evaluates configurations on one matrix, caching neighbour rankings and
/// layouts. Evaluation is a pure function of the configuration.
pub struct Evaluator<'a> {
    matrix: &'a EmbeddingMatrix,
    rankings: HashMap<Metric, std::result::Result<NeighborRanking, String>>,
    layouts: HashMap<LayoutKey, std::result::Result<Vec<Vec<f64>>, String>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(matrix: &'a EmbeddingMatrix) -> Self {
        Evaluator {
            matrix,
            rankings: HashMap::new(),
            layouts: HashMap::new(),
        }
    }

    fn ranking(&mut self, metric: Metric) -> std::result::Result<&NeighborRanking, String> {
        let matrix = self.matrix;
        self.rankings
            .entry(metric)
            .or_insert_with(|| {
                prepare_rows(matrix, metric)
                    .map(|rows| NeighborRanking::new(&rows, metric))
                    .map_err(|e| e.to_string())
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    pub fn layout(&mut self, umap: &UmapParams) -> std::result::Result<Vec<Vec<f64>>, String> {
        let key = (umap.n_neighbors, umap.min_dist.to_bits(), umap.n_components, umap.metric);
        if let Some(hit) = self.layouts.get(&key) {
            return hit.clone();
        }
        let result = umap
            .validate(self.matrix.len())
            .map_err(|e| e.to_string())
            .and_then(|_| {
                let ranking = self.ranking(umap.metric)?;
                umap_layout(ranking, umap).map(|(c, _)| c).map_err(|e| e.to_string())
            });
        self.layouts.insert(key, result.clone());
        result
    }

    pub fn evaluate(&mut self, params: &TrialParams) -> std::result::Result<ValidityMetrics, String> {
        let coords = self.layout(&params.umap)?;
        let fit = kmeans(&coords, &params.kmeans).map_err(|e| e.to_string())?;
        validity_indices(&coords, &fit.labels).map_err(|e| e.to_string())
    }

    fn run(&mut self, trial_id: usize, phase: SearchPhase, anchor: Option<usize>, params: TrialParams) -> Trial {
        let (status, reason, raw) = match self.evaluate(&params) {
            Ok(m) => (TrialStatus::Ok, None, Some(m)),
            Err(e) => (TrialStatus::Invalid, Some(e), None),
        };
        Trial {
            trial_id,
            phase,
            anchor,
            params,
            status,
            reason,
            raw_metrics: raw,
            normalized: None,
            composite: None,
        }
    }
}

fn trial_rng(master_seed: u64, trial_id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(master_seed ^ trial_id as u64)
}

fn uniform_usize(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn uniform_f64(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

fn build_params(config: &SearchConfig, n_neighbors: usize, min_dist: f64, n_components: usize, metric: Metric, k: usize) -> TrialParams {
    let seed = config.space.master_seed;
    TrialParams {
        umap: UmapParams {
            n_neighbors,
            min_dist,
            n_components,
            metric,
            seed,
            ..config.umap_base
        },
        kmeans: KMeansParams {
            k,
            seed,
            ..config.kmeans_base
        },
    }
}

/// Draws trial `trial_id` of the coarse phase.
pub fn draw_coarse(config: &SearchConfig, trial_id: usize) -> TrialParams {
    let s = &config.space;
    let mut rng = trial_rng(s.master_seed, trial_id);
    let n_neighbors = uniform_usize(&mut rng, s.n_neighbors.0, s.n_neighbors.1);
    let min_dist = uniform_f64(&mut rng, s.min_dist.0, s.min_dist.1);
    let n_components = uniform_usize(&mut rng, s.n_components.0, s.n_components.1);
    let k = uniform_usize(&mut rng, s.k.0, s.k.1);
    let metric = s.metrics[rng.random_range(0..s.metrics.len())];
    build_params(config, n_neighbors, min_dist, n_components, metric, k)
}

fn window_usize(rng: &mut ChaCha8Rng, centre: usize, half: usize, range: (usize, usize)) -> usize {
    let lo = centre.saturating_sub(half).max(range.0);
    let hi = (centre + half).min(range.1);
    uniform_usize(rng, lo, hi.max(lo))
}

/// Draws a fine-phase perturbation of `anchor`; the metric is held fixed.
pub fn draw_fine(config: &SearchConfig, anchor: &TrialParams, trial_id: usize) -> TrialParams {
    let s = &config.space;
    let w = &config.windows;
    let mut rng = trial_rng(s.master_seed, trial_id);
    let n_neighbors = window_usize(&mut rng, anchor.umap.n_neighbors, w.n_neighbors, s.n_neighbors);
    let lo = (anchor.umap.min_dist - w.min_dist).max(s.min_dist.0);
    let hi = (anchor.umap.min_dist + w.min_dist).min(s.min_dist.1);
    let min_dist = uniform_f64(&mut rng, lo, hi.max(lo));
    let n_components = window_usize(&mut rng, anchor.umap.n_components, w.n_components, s.n_components);
    let k = window_usize(&mut rng, anchor.kmeans.k, w.k, s.k);
    build_params(config, n_neighbors, min_dist, n_components, anchor.umap.metric, k)
}

/// Runs the coarse phase. Trial ids are `0..n_trials`.
pub fn coarse_search(evaluator: &mut Evaluator<'_>, config: &SearchConfig) -> Result<Vec<Trial>> {
    config.space.validate()?;
    let needed = config.space.k.1 + 1;
    if evaluator.matrix.len() < needed {
        return Err(Error::TooFewPoints {
            needed,
            found: evaluator.matrix.len(),
        });
    }
    let trials: Vec<Trial> = (0..config.n_trials)
        .map(|id| evaluator.run(id, SearchPhase::Coarse, None, draw_coarse(config, id)))
        .collect();
    if !trials.iter().any(Trial::is_ok) {
        return Err(Error::NoValidTrials);
    }
    Ok(trials)
}

/// Min-max normalizes raw indices over the valid trials and fills in
/// composites. A degenerate index (max = min) normalizes to 0.5.
pub fn normalize_population(trials: &mut [Trial]) {
    let ok: Vec<ValidityMetrics> = trials.iter().filter_map(|t| t.raw_metrics).collect();
    let range = |f: fn(&ValidityMetrics) -> f64| {
        ok.iter().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
    };
    let ranges = [
        range(|m| m.silhouette),
        range(|m| m.calinski_harabasz),
        range(|m| m.davies_bouldin),
    ];
    let scale = |v: f64, (lo, hi): (f64, f64)| {
        if hi > lo {
            ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
        } else {
            0.5
        }
    };
    for t in trials.iter_mut() {
        match (t.status, t.raw_metrics) {
            (TrialStatus::Ok, Some(m)) => {
                let n = NormalizedMetrics {
                    silhouette: scale(m.silhouette, ranges[0]),
                    calinski_harabasz: scale(m.calinski_harabasz, ranges[1]),
                    davies_bouldin: scale(m.davies_bouldin, ranges[2]),
                };
                t.composite = Some(
                    composite_score(n.silhouette, n.calinski_harabasz, n.davies_bouldin)
                        .expect("normalized values lie in [0, 1]"),
                );
                t.normalized = Some(n);
            }
            _ => {
                t.normalized = None;
                t.composite = None;
            }
        }
    }
}

/// Valid trials ordered by composite (descending), ties by lower id.
fn ranked(trials: &[Trial]) -> Vec<&Trial> {
    let mut ok: Vec<&Trial> = trials.iter().filter(|t| t.composite.is_some()).collect();
    ok.sort_by(|a, b| {
        b.composite
            .unwrap()
            .total_cmp(&a.composite.unwrap())
            .then(a.trial_id.cmp(&b.trial_id))
    });
    ok
}

/// Number of anchors: ceil(fraction × valid trials), at least 1.
pub fn anchor_count(ok_trials: usize, fraction: f64) -> usize {
    (((ok_trials as f64) * fraction) - 1e-9).ceil().max(1.0) as usize
}

/// Runs the fine phase around the top coarse trials (normalized over the
/// coarse population). Fine trial ids continue after the largest coarse id.
pub fn fine_tune(evaluator: &mut Evaluator<'_>, coarse: &[Trial], config: &SearchConfig) -> Result<(Vec<usize>, Vec<Trial>)> {
    let mut scored = coarse.to_vec();
    normalize_population(&mut scored);
    let order = ranked(&scored);
    if order.is_empty() {
        return Err(Error::NoValidTrials);
    }
    let n_anchors = anchor_count(order.len(), config.top_fraction);
    let anchors: Vec<&Trial> = order.into_iter().take(n_anchors).collect();
    let mut next_id = coarse.iter().map(|t| t.trial_id + 1).max().unwrap_or(0);
    let mut fine = Vec::with_capacity(n_anchors * config.per_config);
    for anchor in &anchors {
        for _ in 0..config.per_config {
            let params = draw_fine(config, &anchor.params, next_id);
            fine.push(evaluator.run(next_id, SearchPhase::Fine, Some(anchor.trial_id), params));
            next_id += 1;
        }
    }
    Ok((anchors.iter().map(|t| t.trial_id).collect(), fine))
}

/// Normalizes over the pooled population and picks the best trial.
pub fn select_best(
    stream: StreamKey,
    mut trials: Vec<Trial>,
    config: &SearchConfig,
    anchors: Vec<usize>,
) -> Result<SearchReport> {
    normalize_population(&mut trials);
    let best = ranked(&trials).first().map(|t| t.trial_id).ok_or(Error::NoValidTrials)?;
    let coarse_count = trials.iter().filter(|t| t.phase == SearchPhase::Coarse).count();
    Ok(SearchReport {
        stream,
        space: config.space.clone(),
        windows: config.windows,
        coarse_count,
        fine_count: trials.len() - coarse_count,
        anchors,
        best,
        trials,
    })
}

/// Coarse search, fine tuning, and pooled selection for one stream.
pub fn run_search(stream: StreamKey, matrix: &EmbeddingMatrix, config: &SearchConfig) -> Result<SearchReport> {
    let mut evaluator = Evaluator::new(matrix);
    let coarse = coarse_search(&mut evaluator, config)?;
    let (anchors, fine) = fine_tune(&mut evaluator, &coarse, config)?;
    let mut all = coarse;
    all.extend(fine);
    select_best(stream, all, config, anchors)
}

/// One CSV row per trial.
pub fn write_trials_csv<W: Write>(report: &SearchReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let header = [
        "stream", "trial_id", "phase", "anchor", "status", "n_neighbors", "min_dist", "n_components",
        "metric", "k", "silhouette", "calinski_harabasz", "davies_bouldin", "silhouette_norm",
        "ch_norm", "db_norm", "composite", "best", "reason",
    ];
    let csv_err = |e: csv::Error| Error::InvalidInput(format!("csv: {e}"));
    w.write_record(header).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for t in &report.trials {
        let raw = t.raw_metrics;
        let norm = t.normalized;
        w.write_record([
            report.stream.as_str().to_string(),
            t.trial_id.to_string(),
            match t.phase {
                SearchPhase::Coarse => "coarse".into(),
                SearchPhase::Fine => "fine".into(),
            },
            t.anchor.map(|a| a.to_string()).unwrap_or_default(),
            if t.is_ok() { "ok".into() } else { "invalid".into() },
            t.params.umap.n_neighbors.to_string(),
            t.params.umap.min_dist.to_string(),
            t.params.umap.n_components.to_string(),
            t.params.umap.metric.as_str().to_string(),
            t.params.kmeans.k.to_string(),
            opt(raw.map(|m| m.silhouette)),
            opt(raw.map(|m| m.calinski_harabasz)),
            opt(raw.map(|m| m.davies_bouldin)),
            opt(norm.map(|m| m.silhouette)),
            opt(norm.map(|m| m.calinski_harabasz)),
            opt(norm.map(|m| m.davies_bouldin)),
            opt(t.composite),
            (t.trial_id == report.best).to_string(),
            t.reason.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("csv: {e}")))
}

/// A fixed configuration, as reported per stream in a parameter table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedParams {
    pub n_neighbors: usize,
    pub min_dist: f64,
    pub n_components: usize,
    pub metric: Metric,
    pub n_clusters: usize,
}

impl FixedParams {
    pub fn to_trial_params(&self, config: &SearchConfig) -> TrialParams {
        build_params(config, self.n_neighbors, self.min_dist, self.n_components, self.metric, self.n_clusters)
    }
}

/// Reference configuration per stream; yields the 22 pattern ids of the bundled category map.
pub fn reference_parameters() -> Vec<(StreamKey, FixedParams)> {
    let p = |n_neighbors, min_dist, n_components, metric, n_clusters| FixedParams {
        n_neighbors,
        min_dist,
        n_components,
        metric,
        n_clusters,
    };
    vec![
        (StreamKey::PreQ, p(5, 0.2, 5, Metric::Euclidean, 5)),
        (StreamKey::PostQ, p(10, 0.3, 2, Metric::Euclidean, 9)),
        (StreamKey::PreR, p(50, 0.01, 2, Metric::Euclidean, 2)),
        (StreamKey::PostR, p(20, 0.2, 30, Metric::Cosine, 6)),
    ]
}
