//! Alignment profiles against pattern centroids and the statistical battery
//! applied to them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::cluster::ClusterModel;
use crate::corpus::{StreamKey, Utterance};
use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::stats::{average_ranks, mean, median, pearson, quantile_sorted, sample_sd, tie_group_sizes};

/// Cosine similarity clamped to [0, 1].
pub fn alignment_score(u: &[f64], c: &[f64]) -> Result<f64> {
    if u.len() != c.len() {
        return Err(Error::DimensionMismatch {
            expected: c.len(),
            found: u.len(),
        });
    }
    let nu = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nc = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nu == 0.0 || nc == 0.0 {
        return Err(Error::InvalidInput("alignment against a zero vector".into()));
    }
    let dot: f64 = u.iter().zip(c).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nc)).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DhasrlCategory {
    ProactivePlanning,
    StrategicIntegration,
    MetacognitiveManagement,
    ReactiveRemediation,
    OverloadHelpSeeking,
    Unassigned,
}

impl DhasrlCategory {
    pub fn as_str(self) -> &'static str {
        match self {
            DhasrlCategory::ProactivePlanning => "proactive_planning",
            DhasrlCategory::StrategicIntegration => "strategic_integration",
            DhasrlCategory::MetacognitiveManagement => "metacognitive_management",
            DhasrlCategory::ReactiveRemediation => "reactive_remediation",
            DhasrlCategory::OverloadHelpSeeking => "overload_help_seeking",
            DhasrlCategory::Unassigned => "unassigned",
        }
    }
}

pub type CategoryMap = BTreeMap<String, DhasrlCategory>;

/// The five-category assignment of the 22 reference pattern ids.
pub fn default_category_map() -> CategoryMap {
    serde_json::from_str(include_str!("../data/dhasrl_categories.json"))
        .expect("bundled category map parses")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    pub pattern_id: String,
    pub stream: StreamKey,
    pub embedding_centroid: Vec<f64>,
    pub label: Option<String>,
    pub dhasrl_category: DhasrlCategory,
    pub size: usize,
    /// Member utterance ids closest to the centroid.
    pub representatives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternCatalog {
    pub patterns: Vec<Pattern>,
}

const REPRESENTATIVES: usize = 3;

impl PatternCatalog {
    /// Builds the catalog from fitted per-stream models. `vectors` must hold
    /// every clustered utterance. Patterns absent from `categories` are
    /// unassigned.
    pub fn from_models(
        models: &BTreeMap<StreamKey, ClusterModel>,
        vectors: &EmbeddingMatrix,
        categories: &CategoryMap,
    ) -> Result<Self> {
        let index = vectors.index_of();
        let mut patterns = Vec::new();
        for (&stream, model) in models {
            let sizes = model.cluster_sizes();
            for (c, centroid) in model.embedding_centroids.iter().enumerate() {
                let pattern_id = stream.pattern_id(c);
                let mut members = Vec::new();
                for (id, &label) in model.ids.iter().zip(&model.labels) {
                    if label != c {
                        continue;
                    }
                    let row = index.get(id.as_str()).ok_or_else(|| Error::MissingVector(id.clone()))?;
                    let v: Vec<f64> = vectors.row(*row).iter().map(|&x| x as f64).collect();
                    let score = alignment_score(&v, centroid).unwrap_or(0.0);
                    members.push((score, id.clone()));
                }
                members.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
                patterns.push(Pattern {
                    dhasrl_category: categories.get(&pattern_id).copied().unwrap_or(DhasrlCategory::Unassigned),
                    pattern_id,
                    stream,
                    embedding_centroid: centroid.clone(),
                    label: None,
                    size: sizes[c],
                    representatives: members.into_iter().take(REPRESENTATIVES).map(|m| m.1).collect(),
                });
            }
        }
        let catalog = PatternCatalog { patterns };
        catalog.validate()?;
        Ok(catalog)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for p in &self.patterns {
            if !seen.insert(p.pattern_id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate pattern id {}", p.pattern_id)));
            }
        }
        Ok(())
    }

    pub fn pattern_ids(&self) -> Vec<String> {
        self.patterns.iter().map(|p| p.pattern_id.clone()).collect()
    }

    pub fn get(&self, pattern_id: &str) -> Option<&Pattern> {
        self.patterns.iter().find(|p| p.pattern_id == pattern_id)
    }

    pub fn stream_patterns(&self, stream: StreamKey) -> impl Iterator<Item = &Pattern> {
        self.patterns.iter().filter(move |p| p.stream == stream)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Student,
    Log,
}

impl Unit {
    pub fn as_str(self) -> &'static str {
        match self {
            Unit::Student => "student",
            Unit::Log => "log",
        }
    }

    pub fn of(self, u: &Utterance) -> &str {
        match self {
            Unit::Student => &u.student_id,
            Unit::Log => &u.log_id,
        }
    }
}

impl fmt::Display for Unit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Unit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "student" => Ok(Unit::Student),
            "log" => Ok(Unit::Log),
            _ => Err(Error::Config(format!("unknown unit {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentProfile {
    pub unit_id: String,
    /// Owning student (equal to `unit_id` at student granularity).
    pub student_id: String,
    pub scores: BTreeMap<String, Option<f64>>,
    /// Utterances averaged into each score.
    pub support: BTreeMap<String, usize>,
    /// Utterances whose closest centroid is this pattern.
    pub assigned: BTreeMap<String, usize>,
}

impl AlignmentProfile {
    pub fn score(&self, pattern_id: &str) -> Option<f64> {
        self.scores.get(pattern_id).copied().flatten()
    }
}

/// Mean alignment of each unit's utterances with every pattern of the
/// utterance's stream. Units with no utterances in a stream get missing
/// scores for that stream's patterns.
pub fn student_profiles(
    streams: &BTreeMap<StreamKey, Vec<Utterance>>,
    vectors: &EmbeddingMatrix,
    catalog: &PatternCatalog,
    unit: Unit,
) -> Result<Vec<AlignmentProfile>> {
    let index = vectors.index_of();
    let mut sums: BTreeMap<String, BTreeMap<String, (f64, usize)>> = BTreeMap::new();
    let mut assigned: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    let mut owners: BTreeMap<String, String> = BTreeMap::new();
    for (&stream, utterances) in streams {
        let patterns: Vec<&Pattern> = catalog.stream_patterns(stream).collect();
        for u in utterances {
            let unit_id = unit.of(u).to_string();
            owners.entry(unit_id.clone()).or_insert_with(|| u.student_id.clone());
            let unit_sums = sums.entry(unit_id.clone()).or_default();
            if patterns.is_empty() {
                continue;
            }
            let row = index.get(u.id.as_str()).ok_or_else(|| Error::MissingVector(u.id.clone()))?;
            let v: Vec<f64> = vectors.row(*row).iter().map(|&x| x as f64).collect();
            let mut best: Option<(f64, &str)> = None;
            for p in &patterns {
                let s = alignment_score(&v, &p.embedding_centroid)?;
                let e = unit_sums.entry(p.pattern_id.clone()).or_insert((0.0, 0));
                e.0 += s;
                e.1 += 1;
                if best.is_none_or(|(b, _)| s > b) {
                    best = Some((s, &p.pattern_id));
                }
            }
            if let Some((_, id)) = best {
                *assigned.entry(unit_id).or_default().entry(id.to_string()).or_insert(0) += 1;
            }
        }
    }
    let ids = catalog.pattern_ids();
    Ok(sums
        .into_iter()
        .map(|(unit_id, per_pattern)| {
            let unit_assigned = assigned.remove(&unit_id).unwrap_or_default();
            let mut profile = AlignmentProfile {
                student_id: owners[&unit_id].clone(),
                unit_id,
                scores: BTreeMap::new(),
                support: BTreeMap::new(),
                assigned: BTreeMap::new(),
            };
            for id in &ids {
                let (sum, n) = per_pattern.get(id).copied().unwrap_or((0.0, 0));
                profile.scores.insert(id.clone(), (n > 0).then(|| sum / n as f64));
                profile.support.insert(id.clone(), n);
                profile.assigned.insert(id.clone(), unit_assigned.get(id).copied().unwrap_or(0));
            }
            profile
        })
        .collect())
}

/// One row per unit, one column per pattern; empty cell = missing.
pub fn write_profiles_csv<W: Write>(profiles: &[AlignmentProfile], pattern_ids: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::InvalidInput(format!("csv: {e}"));
    let mut header = vec!["unit_id".to_string(), "student_id".to_string()];
    header.extend(pattern_ids.iter().cloned());
    w.write_record(&header).map_err(err)?;
    for p in profiles {
        let mut row = vec![p.unit_id.clone(), p.student_id.clone()];
        row.extend(pattern_ids.iter().map(|id| p.score(id).map(|s| s.to_string()).unwrap_or_default()));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::InvalidInput(format!("csv: {e}")))
}

pub fn read_profiles_csv(text: &str) -> Result<(Vec<String>, Vec<AlignmentProfile>)> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let err = |e: csv::Error| Error::InvalidInput(format!("profiles csv: {e}"));
    let header: Vec<String> = r.headers().map_err(err)?.iter().map(str::to_string).collect();
    if header.len() < 2 || header[0] != "unit_id" || header[1] != "student_id" {
        return Err(Error::HeaderMismatch("profiles must start with unit_id,student_id".into()));
    }
    let ids = header[2..].to_vec();
    let mut profiles = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(err)?;
        let mut p = AlignmentProfile {
            unit_id: rec[0].to_string(),
            student_id: rec[1].to_string(),
            scores: BTreeMap::new(),
            support: BTreeMap::new(),
            assigned: BTreeMap::new(),
        };
        for (id, cell) in ids.iter().zip(rec.iter().skip(2)) {
            let score = if cell.is_empty() {
                None
            } else {
                Some(cell.parse::<f64>().map_err(|_| Error::Malformed {
                    line: line + 2,
                    message: format!("score {cell:?} is not a number"),
                })?)
            };
            p.scores.insert(id.clone(), score);
        }
        profiles.push(p);
    }
    Ok((ids, profiles))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptive {
    pub pattern_id: String,
    pub n: usize,
    pub insufficient: bool,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
    pub min: Option<f64>,
    pub q1: Option<f64>,
    pub median: Option<f64>,
    pub q3: Option<f64>,
    pub max: Option<f64>,
}

impl Descriptive {
    pub fn from_values(pattern_id: &str, values: &[f64]) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let insufficient = n < 2;
        let q = |p| (n > 0).then(|| quantile_sorted(&sorted, p));
        Descriptive {
            pattern_id: pattern_id.to_string(),
            n,
            insufficient,
            mean: (n > 0).then(|| mean(&sorted)),
            sd: (!insufficient).then(|| sample_sd(&sorted)),
            min: q(0.0),
            q1: q(0.25),
            median: q(0.5),
            q3: q(0.75),
            max: q(1.0),
        }
    }

    /// "PreR_cluster0, M = .596"
    pub fn mean_label(&self) -> String {
        match self.mean {
            Some(m) => format!("{}, M = {}", self.pattern_id, format_decimal(m, 3)),
            None => format!("{}, M = n/a", self.pattern_id),
        }
    }
}

/// Fixed-point formatting with the leading zero dropped for |x| < 1.
pub fn format_decimal(x: f64, decimals: usize) -> String {
    let s = format!("{x:.decimals$}");
    if let Some(rest) = s.strip_prefix("0.") {
        format!(".{rest}")
    } else if let Some(rest) = s.strip_prefix("-0.") {
        format!("-.{rest}")
    } else {
        s
    }
}

pub fn descriptive_stats(profiles: &[AlignmentProfile], pattern_ids: &[String]) -> Vec<Descriptive> {
    pattern_ids
        .iter()
        .map(|id| {
            let values: Vec<f64> = profiles.iter().filter_map(|p| p.score(id)).collect();
            Descriptive::from_values(id, &values)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub rho: f64,
    pub p_raw: f64,
    pub n: usize,
}

/// Spearman's rho with a two-sided t-approximation p-value.
/// Constant input gives `Error::Undefined`.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Correlation> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            found: y.len(),
        });
    }
    let n = x.len();
    if n < 4 {
        return Err(Error::TooFewPoints { needed: 4, found: n });
    }
    let rho = pearson(&average_ranks(x), &average_ranks(y))
        .ok_or_else(|| Error::Undefined("spearman correlation of a constant sequence".into()))?;
    // rank vectors that are exact reversals can land one ulp short of ±1
    let rho = if 1.0 - rho.abs() < 1e-12 { rho.signum() } else { rho };
    let p_raw = if rho.abs() >= 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        (2.0 * dist.sf(t.abs())).min(1.0)
    };
    Ok(Correlation { rho, p_raw, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdrResult {
    pub p_adj: Vec<f64>,
    pub reject: Vec<bool>,
}

/// Benjamini-Hochberg adjustment; rejection is `p_adj < alpha`.
pub fn bh_fdr(p_values: &[f64], alpha: f64) -> Result<FdrResult> {
    if let Some(p) = p_values.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidInput(format!("p-value {p} outside [0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let mut p_adj = vec![0.0; m];
    let mut running = 1.0f64;
    for rank in (1..=m).rev() {
        let i = order[rank - 1];
        running = running.min(p_values[i] * (m as f64 / rank as f64));
        p_adj[i] = running.min(1.0);
    }
    let reject = p_adj.iter().map(|&p| p < alpha).collect();
    Ok(FdrResult { p_adj, reject })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    High,
    Low,
}

/// Totals above the median are high; totals at or below it are low.
pub fn median_split(totals: &BTreeMap<String, f64>) -> Result<BTreeMap<String, Group>> {
    if totals.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            found: totals.len(),
        });
    }
    let values: Vec<f64> = totals.values().copied().collect();
    let m = median(&values);
    Ok(totals
        .iter()
        .map(|(id, &t)| (id.clone(), if t > m { Group::High } else { Group::Low }))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MwMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    /// U for the first sample.
    pub u: f64,
    pub p_raw: f64,
    pub method: MwMethod,
}

/// Samples up to this combined size use exact enumeration.
pub const EXACT_MAX_N: usize = 10;

fn u_statistic(ranks: &[f64], n_a: usize) -> f64 {
    let sum: f64 = ranks[..n_a].iter().sum();
    sum - (n_a * (n_a + 1)) as f64 / 2.0
}

fn check_groups(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput("Mann-Whitney U needs two non-empty groups".into()));
    }
    Ok(())
}

/// Two-sided p from every assignment of the pooled ranks to the first group.
pub fn mann_whitney_exact(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    check_groups(a, b)?;
    let n_a = a.len();
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = pooled.len();
    if n > 24 {
        return Err(Error::InvalidInput(format!("exact enumeration over {n} values is too large")));
    }
    let ranks = average_ranks(&pooled);
    let u = u_statistic(&ranks, n_a);
    let centre = (n_a * b.len()) as f64 / 2.0;
    let observed = (u - centre).abs();
    let offset = (n_a * (n_a + 1)) as f64 / 2.0;
    let (mut extreme, mut total) = (0u64, 0u64);
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != n_a {
            continue;
        }
        let sum: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        total += 1;
        if ((sum - offset) - centre).abs() >= observed - 1e-9 {
            extreme += 1;
        }
    }
    Ok(MannWhitney {
        u,
        p_raw: extreme as f64 / total as f64,
        method: MwMethod::Exact,
    })
}

/// Normal approximation with tie-corrected variance and a 0.5 continuity correction.
pub fn mann_whitney_normal(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    check_groups(a, b)?;
    let (n_a, n_b) = (a.len() as f64, b.len() as f64);
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let n = n_a + n_b;
    let u = u_statistic(&average_ranks(&pooled), a.len());
    let ties: f64 = tie_group_sizes(&pooled).iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = n_a * n_b / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
    let p_raw = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - n_a * n_b / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
        let std = Normal::standard();
        (2.0 * std.sf(z)).min(1.0)
    };
    Ok(MannWhitney {
        u,
        p_raw,
        method: MwMethod::Normal,
    })
}

/// Exact enumeration up to `EXACT_MAX_N` pooled values, normal approximation beyond.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MannWhitney> {
    if a.len() + b.len() <= EXACT_MAX_N {
        mann_whitney_exact(a, b)
    } else {
        mann_whitney_normal(a, b)
    }
}

/// Cohen's kappa for two raters over the same items.
pub fn cohen_kappa<T: Ord>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            found: a.len(),
        });
    }
    let n = a.len() as f64;
    let mut ma: BTreeMap<&T, f64> = BTreeMap::new();
    let mut mb: BTreeMap<&T, f64> = BTreeMap::new();
    let mut agree = 0.0;
    for (x, y) in a.iter().zip(b) {
        *ma.entry(x).or_default() += 1.0;
        *mb.entry(y).or_default() += 1.0;
        if x == y {
            agree += 1.0;
        }
    }
    let p_o = agree / n;
    let p_e: f64 = ma.iter().map(|(k, ca)| ca / n * mb.get(k).copied().unwrap_or(0.0) / n).sum();
    if (1.0 - p_e).abs() < 1e-15 {
        return Err(Error::Undefined("kappa with chance agreement 1".into()));
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Phase, Role};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alignment_examples() {
        let c = [0.3, -1.0, 2.0];
        assert!((alignment_score(&c, &c).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(alignment_score(&[1.0, 0.0], &[0.0, 2.0]).unwrap(), 0.0);
        assert_eq!(alignment_score(&[-0.3, 1.0, -2.0], &c).unwrap(), 0.0);
        assert!(alignment_score(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn alignment_bounded_and_scale_invariant(
            u in prop::collection::vec(-5.0f64..5.0, 4),
            c in prop::collection::vec(-5.0f64..5.0, 4),
            s in 0.01f64..100.0,
        ) {
            prop_assume!(u.iter().any(|v| v.abs() > 1e-3) && c.iter().any(|v| v.abs() > 1e-3));
            let a = alignment_score(&u, &c).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            let scaled: Vec<f64> = u.iter().map(|v| v * s).collect();
            prop_assert!((alignment_score(&scaled, &c).unwrap() - a).abs() < 1e-9);
        }

        #[test]
        fn spearman_rank_invariant(x in prop::collection::vec(-10.0f64..10.0, 6..15), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<f64> = x.iter().map(|_| rng.random::<f64>()).collect();
            let tx: Vec<f64> = x.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
            if let (Ok(a), Ok(b)) = (spearman(&x, &y), spearman(&tx, &y)) {
                prop_assert!((a.rho - b.rho).abs() < 1e-12);
            }
            let distinct: BTreeSet<u64> = y.iter().map(|v| v.to_bits()).collect();
            if distinct.len() == y.len() {
                let rev: Vec<f64> = y.iter().map(|v| -v).collect();
                if let (Ok(a), Ok(b)) = (spearman(&x, &y), spearman(&x, &rev)) {
                    prop_assert!((a.rho + b.rho).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn bh_matches_step_up(ps in prop::collection::vec(0.0f64..0.2, 1..30)) {
            let alpha = 0.05;
            let r = bh_fdr(&ps, alpha).unwrap();
            let mut pairs: Vec<(f64, f64)> = ps.iter().copied().zip(r.p_adj.iter().copied()).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            for w in pairs.windows(2) {
                prop_assert!(w[0].1 <= w[1].1 + 1e-15);
            }
            for (p, q) in ps.iter().zip(&r.p_adj) {
                prop_assert!(q >= p);
            }
            // step-up: reject the i smallest where i is the largest rank with m·p_(i)/i < alpha
            let m = ps.len();
            let mut sorted = ps.clone();
            sorted.sort_by(f64::total_cmp);
            let cutoff = (1..=m).filter(|&i| (sorted[i - 1] * m as f64 / i as f64) < alpha).max();
            let expected: Vec<bool> = ps
                .iter()
                .map(|p| cutoff.is_some_and(|c| *p <= sorted[c - 1]))
                .collect();
            prop_assert_eq!(r.reject, expected);
        }

        #[test]
        fn mann_whitney_swap(
            a in prop::collection::vec(0u8..6, 1..7),
            b in prop::collection::vec(0u8..6, 1..7),
        ) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let ab = mann_whitney_u(&a, &b).unwrap();
            let ba = mann_whitney_u(&b, &a).unwrap();
            let nn = (a.len() * b.len()) as f64;
            prop_assert!((ab.u + ba.u - nn).abs() < 1e-9);
            prop_assert!((ab.p_raw - ba.p_raw).abs() < 1e-12);
            prop_assert!(ab.u >= 0.0 && ab.u <= nn);
            let na = mann_whitney_normal(&a, &b).unwrap();
            let nb = mann_whitney_normal(&b, &a).unwrap();
            prop_assert!((na.p_raw - nb.p_raw).abs() < 1e-12);
        }

        #[test]
        fn median_split_rank_only(totals in prop::collection::vec(0.0f64..100.0, 2..40)) {
            let map: BTreeMap<String, f64> =
                totals.iter().enumerate().map(|(i, &t)| (format!("s{i:02}"), t)).collect();
            let shifted: BTreeMap<String, f64> =
                map.iter().map(|(k, v)| (k.clone(), v * v * v + 5.0)).collect();
            let a = median_split(&map).unwrap();
            prop_assert_eq!(a.len(), totals.len());
            prop_assert_eq!(a, median_split(&shifted).unwrap());
        }
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]).unwrap().rho - 1.0).abs() < 1e-12);
        let c = spearman(&[1.0, 2.0, 3.0, 4.0], &[2.0, 1.0, 4.0, 3.0]).unwrap();
        assert!((c.rho - 0.6).abs() < 1e-12);
        // t = 0.6·sqrt(2/0.64) = 1.06066, two-sided on 2 df
        assert!((c.p_raw - 0.4).abs() < 1e-9);
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]).unwrap().p_raw, 0.0);
        assert!(matches!(spearman(&[1.0; 5], &[1.0, 2.0, 3.0, 4.0, 5.0]), Err(Error::Undefined(_))));
        let tied = spearman(&[1.0, 1.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let oracle = pearson(&[1.5, 1.5, 3.0, 4.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((tied.rho - oracle).abs() < 1e-12);
    }

    #[test]
    fn bh_examples() {
        let r = bh_fdr(&[0.01, 0.02, 0.04, 0.05], 0.05).unwrap();
        let expected = [0.04, 0.04, 0.05, 0.05];
        for (a, b) in r.p_adj.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(r.reject, vec![true, true, false, false]);
        let ones = bh_fdr(&[1.0; 5], 0.05).unwrap();
        assert_eq!(ones.p_adj, vec![1.0; 5]);
        assert!(ones.reject.iter().all(|r| !r));
        assert_eq!(bh_fdr(&[0.3], 0.05).unwrap().p_adj, vec![0.3]);
        assert!(bh_fdr(&[1.2], 0.05).is_err());
        assert!(bh_fdr(&[], 0.05).unwrap().p_adj.is_empty());
    }

    #[test]
    fn median_split_examples() {
        let t = |v: &[f64]| -> BTreeMap<String, f64> {
            v.iter().enumerate().map(|(i, &x)| (format!("s{i}"), x)).collect()
        };
        let s = median_split(&t(&[10.0, 20.0, 30.0, 40.0])).unwrap();
        assert_eq!(s.values().copied().collect::<Vec<_>>(), vec![Group::Low, Group::Low, Group::High, Group::High]);
        let s = median_split(&t(&[10.0, 20.0, 20.0, 40.0])).unwrap();
        assert_eq!(s.values().copied().collect::<Vec<_>>(), vec![Group::Low, Group::Low, Group::Low, Group::High]);
        assert!(median_split(&t(&[1.0])).is_err());
    }

    #[test]
    fn mann_whitney_examples() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.u, 0.0);
        assert_eq!(r.method, MwMethod::Exact);
        assert!((r.p_raw - 2.0 / 6.0).abs() < 1e-12);
        let same = mann_whitney_u(&[1.0, 2.0, 2.0, 5.0], &[5.0, 2.0, 1.0, 2.0]).unwrap();
        assert_eq!(same.u, 8.0);
        assert_eq!(same.p_raw, 1.0);
        let big: Vec<f64> = (0..12).map(f64::from).collect();
        let r = mann_whitney_u(&big, &big).unwrap();
        assert_eq!(r.method, MwMethod::Normal);
        assert_eq!(r.u, 72.0);
        assert_eq!(r.p_raw, 1.0);
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cohen_kappa(&["a", "b", "a"], &["a", "b", "a"]).unwrap(), 1.0);
        let a: Vec<&str> = [["A"; 5], ["B"; 5]].concat();
        let mut b = a.clone();
        b[0] = "B";
        b[9] = "A";
        assert!((cohen_kappa(&a, &b).unwrap() - 0.6).abs() < 1e-12);
        assert!(matches!(cohen_kappa(&["x", "x"], &["x", "x"]), Err(Error::Undefined(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<u8> = (0..1000).map(|_| rng.random_range(0..3)).collect();
        let y: Vec<u8> = (0..1000).map(|_| rng.random_range(0..3)).collect();
        assert!(cohen_kappa(&x, &y).unwrap().abs() < 0.1);
    }

    #[test]
    fn descriptive_examples() {
        let d = Descriptive::from_values("P", &[0.5, 0.5, 0.5]);
        assert_eq!((d.mean, d.sd), (Some(0.5), Some(0.0)));
        let d = Descriptive::from_values("P", &[0.2, 0.4]);
        assert!((d.mean.unwrap() - 0.3).abs() < 1e-12);
        assert!((d.sd.unwrap() - 0.02f64.sqrt()).abs() < 1e-12);
        assert!(Descriptive::from_values("P", &[0.2]).insufficient);
        let d = Descriptive::from_values("PreR_cluster0", &[0.5, 0.692]);
        assert_eq!(d.mean_label(), "PreR_cluster0, M = .596");
        assert_eq!(format_decimal(-0.25, 2), "-.25");
        assert_eq!(format_decimal(1.5, 2), "1.50");
    }

    fn utt(id: &str, student: &str, log: &str, phase: Phase, role: Role) -> Utterance {
        Utterance {
            id: id.into(),
            student_id: student.into(),
            log_id: log.into(),
            week: None,
            phase,
            role,
            text: "x".into(),
        }
    }

    fn catalog(centroids: &[(StreamKey, Vec<f64>)]) -> PatternCatalog {
        let mut counts: BTreeMap<StreamKey, usize> = BTreeMap::new();
        PatternCatalog {
            patterns: centroids
                .iter()
                .map(|(s, c)| {
                    let i = counts.entry(*s).or_insert(0);
                    *i += 1;
                    Pattern {
                        pattern_id: s.pattern_id(*i - 1),
                        stream: *s,
                        embedding_centroid: c.clone(),
                        label: None,
                        dhasrl_category: DhasrlCategory::Unassigned,
                        size: 1,
                        representatives: vec![],
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn profile_examples() {
        let cat = catalog(&[
            (StreamKey::PreQ, vec![1.0, 0.0]),
            (StreamKey::PreQ, vec![0.0, 1.0]),
            (StreamKey::PostR, vec![1.0, 1.0]),
        ]);
        let mut streams = BTreeMap::new();
        streams.insert(StreamKey::PreQ, vec![utt("a", "s1", "l1", Phase::Pre, Role::Student)]);
        streams.insert(StreamKey::PostR, vec![]);
        let vectors = EmbeddingMatrix::from_rows(vec!["a".into()], vec![vec![2.0, 0.0]]).unwrap();
        let p = student_profiles(&streams, &vectors, &cat, Unit::Student).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].score("PreQ_cluster0"), Some(1.0));
        assert_eq!(p[0].support["PreQ_cluster0"], 1);
        assert_eq!(p[0].assigned["PreQ_cluster0"], 1);
        assert_eq!(p[0].score("PreQ_cluster1"), Some(0.0));
        assert_eq!(p[0].score("PostR_cluster0"), None);
        assert_eq!(p[0].support["PostR_cluster0"], 0);
    }

    #[test]
    fn profiles_match_flat_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dim = 5;
        let mut centroids = Vec::new();
        for s in StreamKey::ALL {
            for _ in 0..rng.random_range(1..4) {
                centroids.push((s, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()));
            }
        }
        let cat = catalog(&centroids);
        let mut all = Vec::new();
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for i in 0..80 {
            let phase = if rng.random_bool(0.5) { Phase::Pre } else { Phase::Post };
            let role = if rng.random_bool(0.5) { Role::Student } else { Role::Ai };
            let s = rng.random_range(0..6);
            let l = s * 3 + rng.random_range(0..3);
            all.push(utt(&format!("u{i}"), &format!("s{s}"), &format!("l{l}"), phase, role));
            ids.push(format!("u{i}"));
            rows.push((0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect());
        }
        let vectors = EmbeddingMatrix::from_rows(ids, rows).unwrap();
        let mut streams: BTreeMap<StreamKey, Vec<Utterance>> = BTreeMap::new();
        for u in &all {
            streams.entry(u.stream()).or_default().push(u.clone());
        }
        for unit in [Unit::Student, Unit::Log] {
            let profiles = student_profiles(&streams, &vectors, &cat, unit).unwrap();
            for prof in &profiles {
                for pat in &cat.patterns {
                    let mut total = 0.0;
                    let mut n = 0;
                    for (i, u) in all.iter().enumerate() {
                        if unit.of(u) != prof.unit_id || u.stream() != pat.stream {
                            continue;
                        }
                        let v: Vec<f64> = vectors.row(i).iter().map(|&x| x as f64).collect();
                        let dot: f64 = v.iter().zip(&pat.embedding_centroid).map(|(a, b)| a * b).sum();
                        let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                        let nc = pat.embedding_centroid.iter().map(|x| x * x).sum::<f64>().sqrt();
                        total += (dot / nv / nc).max(0.0);
                        n += 1;
                    }
                    assert_eq!(prof.support[&pat.pattern_id], n);
                    match prof.score(&pat.pattern_id) {
                        Some(s) => assert!((s - total / n as f64).abs() < 1e-9),
                        None => assert_eq!(n, 0),
                    }
                }
                for s in StreamKey::ALL {
                    let count = all.iter().filter(|u| unit.of(u) == prof.unit_id && u.stream() == s).count();
                    let assigned: usize = cat.stream_patterns(s).map(|p| prof.assigned[&p.pattern_id]).sum();
                    assert_eq!(assigned, count);
                }
            }
        }
    }

    #[test]
    fn profiles_csv_round_trip() {
        let mut scores = BTreeMap::new();
        scores.insert("PreQ_cluster0".to_string(), Some(0.25));
        scores.insert("PreQ_cluster1".to_string(), None);
        let p = AlignmentProfile {
            unit_id: "s1".into(),
            student_id: "s1".into(),
            scores,
            support: BTreeMap::new(),
            assigned: BTreeMap::new(),
        };
        let ids = vec!["PreQ_cluster0".to_string(), "PreQ_cluster1".to_string()];
        let mut buf = Vec::new();
        write_profiles_csv(&[p.clone()], &ids, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "unit_id,student_id,PreQ_cluster0,PreQ_cluster1\ns1,s1,0.25,\n");
        let (back_ids, back) = read_profiles_csv(&text).unwrap();
        assert_eq!(back_ids, ids);
        assert_eq!(back[0].scores, p.scores);
    }

    #[test]
    fn default_map_covers_reference_patterns() {
        let map = default_category_map();
        assert_eq!(map.len(), 22);
        assert_eq!(map["PostR_cluster1"], DhasrlCategory::Unassigned);
        let overload = map.values().filter(|c| **c == DhasrlCategory::OverloadHelpSeeking).count();
        assert_eq!(overload, 6);
    }
}
