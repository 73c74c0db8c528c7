//! Staged batch run: ingest → embed → search → fit → profile → stats → report.
//!
//! Each stage writes into a staging directory and its files are moved into
//! the output directory only on success; a failed stage's partial files go
//! to `quarantine/<stage>`. `manifest.json` records the SHA-256 of every
//! stage's inputs and outputs, and a stage whose inputs and outputs still
//! match its record is skipped.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analytics::{
    default_category_map, descriptive_stats, median_split, read_profiles_csv, student_profiles,
    write_profiles_csv, AlignmentProfile, CategoryMap, Descriptive, Group, PatternCatalog, Unit,
};
use crate::cluster::kmeans_fit;
use crate::corpus::{
    cronbach_alpha, load_corpus, load_oslq, segment_streams, Corpus, OslqScheme, OslqTable, StreamKey, Utterance,
};
use crate::embed::{get_vectors, read_store, write_store, EmbeddingMatrix, ProviderConfig, ProviderMode};
use crate::error::{Error, Result};
use crate::manifold::{umap_fit, write_coords};
use crate::report::{
    alerts_csv, build_correlation_table, build_group_table, classification_markdown, classify_patterns,
    correlation_annotation_csv, correlation_cells_csv, correlation_markdown, correlation_values_csv,
    distribution_csv, group_csv, group_markdown, srl_scores, student_alerts, ClassificationVerdict,
    CorrelationTable, FdrFamily, GroupTable, UnitAlerts,
};
use crate::tuner::{run_search, write_trials_csv, FixedParams, SearchConfig, SearchReport, TrialParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Embed,
    Search,
    Fit,
    Profile,
    Stats,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Embed,
        Stage::Search,
        Stage::Fit,
        Stage::Profile,
        Stage::Stats,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Embed => "embed",
            Stage::Search => "search",
            Stage::Fit => "fit",
            Stage::Profile => "profile",
            Stage::Stats => "stats",
            Stage::Report => "report",
        }
    }

    /// Stages from the first one through `self`.
    pub fn through(self) -> Vec<Stage> {
        Stage::ALL.into_iter().filter(|s| *s <= self).collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?}")))
    }
}

pub const INGEST_FILE: &str = "ingest.json";
pub const VECTORS_FILE: &str = "vectors.emb";
pub const SEARCH_FILE: &str = "search.json";
pub const TRIALS_FILE: &str = "search_trials.csv";
pub const MODELS_FILE: &str = "models.json";
pub const CATALOG_FILE: &str = "catalog.json";
pub const STATS_FILE: &str = "stats.json";
pub const REPORT_FILE: &str = "reports/report.json";
pub const MANIFEST_FILE: &str = "manifest.json";
const LOCK_FILE: &str = ".lock";
const STAGING_DIR: &str = ".staging";
const QUARANTINE_DIR: &str = "quarantine";

pub fn profiles_file(unit: Unit) -> String {
    format!("profiles_{unit}.csv")
}

fn default_alpha() -> f64 {
    0.05
}
fn default_correlation_unit() -> Unit {
    Unit::Student
}
fn default_group_unit() -> Unit {
    Unit::Log
}
fn default_percentile() -> f64 {
    75.0
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub oslq: PathBuf,
    /// Subscale → item mapping; the bundled 6 × 4 scheme when absent.
    #[serde(default)]
    pub oslq_scheme: Option<PathBuf>,
    pub provider: ProviderConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub search: SearchConfig,
    /// Streams listed here skip the search and use these parameters.
    #[serde(default)]
    pub fixed: BTreeMap<StreamKey, FixedParams>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_correlation_unit")]
    pub correlation_unit: Unit,
    #[serde(default = "default_group_unit")]
    pub group_unit: Unit,
    #[serde(default)]
    pub fdr_family: FdrFamily,
    /// Pattern id → category map; the bundled reference map when absent.
    #[serde(default)]
    pub categories: Option<PathBuf>,
    #[serde(default = "default_percentile")]
    pub alert_percentile: f64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

impl RunConfig {
    /// A config with defaults for everything but the inputs.
    pub fn new(corpus: impl Into<PathBuf>, oslq: impl Into<PathBuf>, provider: ProviderConfig) -> Self {
        RunConfig {
            corpus: corpus.into(),
            oslq: oslq.into(),
            oslq_scheme: None,
            provider,
            seed: 0,
            search: SearchConfig::default(),
            fixed: BTreeMap::new(),
            alpha: default_alpha(),
            correlation_unit: default_correlation_unit(),
            group_unit: default_group_unit(),
            fdr_family: FdrFamily::default(),
            categories: None,
            alert_percentile: default_percentile(),
            out: default_out(),
        }
    }

    /// Reads a JSON config; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut config: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.oslq);
        fix(&mut self.out);
        if let Some(p) = self.oslq_scheme.as_mut() {
            fix(p);
        }
        if let Some(p) = self.categories.as_mut() {
            fix(p);
        }
        if let Some(p) = self.provider.vector_file.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        if !(0.0..=100.0).contains(&self.alert_percentile) {
            return Err(Error::Config(format!("alert_percentile {} outside [0, 100]", self.alert_percentile)));
        }
        self.provider.validate()?;
        self.search.space.validate()?;
        let mut required = vec![&self.corpus, &self.oslq];
        required.extend(self.oslq_scheme.as_ref());
        required.extend(self.categories.as_ref());
        if self.provider.mode == ProviderMode::File {
            required.extend(self.provider.vector_file.as_ref());
        }
        for p in required {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// The search configuration with the run seed applied.
    pub fn effective_search(&self) -> SearchConfig {
        let mut s = self.search.clone();
        s.space.master_seed = self.seed;
        s
    }

    pub fn scheme(&self) -> Result<OslqScheme> {
        match &self.oslq_scheme {
            Some(p) => OslqScheme::load(p),
            None => Ok(OslqScheme::default()),
        }
    }

    pub fn category_map(&self) -> Result<CategoryMap> {
        match &self.categories {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
            None => Ok(default_category_map()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestArtifact {
    pub utterances: Vec<Utterance>,
    pub stream_counts: BTreeMap<StreamKey, usize>,
    pub scheme: OslqScheme,
    pub oslq: OslqTable,
    pub cronbach_alpha: Option<f64>,
}

impl IngestArtifact {
    pub fn corpus(&self) -> Result<Corpus> {
        Corpus::new(self.utterances.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamSource {
    Search,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSelection {
    pub source: ParamSource,
    pub params: TrialParams,
    pub report: Option<SearchReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsArtifact {
    pub descriptives: Vec<Descriptive>,
    pub correlation: CorrelationTable,
    pub split: BTreeMap<String, Group>,
    pub group: GroupTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub pattern_count: usize,
    pub correlation_tests: Vec<usize>,
    pub significant_cells: usize,
    pub group_tests: usize,
    pub significant_rows: usize,
    pub verdicts: Vec<ClassificationVerdict>,
    pub alerts: Vec<UnitAlerts>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: BTreeMap<String, StageRecord>,
}

impl Manifest {
    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))
    }

    fn save(&self, out: &Path) -> Result<()> {
        let path = out.join(MANIFEST_FILE);
        write_atomic(&path, to_json(self).as_bytes())
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))
}

/// Exclusive ownership of an output directory for one run.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(out: &Path) -> Result<Self> {
        let path = out.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is locked by another run (remove {} if no run is active)",
                out.display(),
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageOutcome {
    Ran,
    Skipped,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out: PathBuf,
    pub stages: Vec<(Stage, StageOutcome)>,
}

impl RunSummary {
    pub fn all_skipped(&self) -> bool {
        self.stages.iter().all(|(_, o)| *o == StageOutcome::Skipped)
    }
}

/// Runs every stage.
pub fn run_pipeline(config: &RunConfig) -> Result<RunSummary> {
    run_stages(config, &Stage::ALL)
}

/// Runs the given stages in order. Upstream artifacts must already exist and
/// match the manifest.
pub fn run_stages(config: &RunConfig, stages: &[Stage]) -> Result<RunSummary> {
    config.validate()?;
    let out = config.out.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let _lock = RunLock::acquire(&out)?;
    let mut runner = Runner {
        config,
        out: out.clone(),
        manifest: Manifest::load(&out)?,
    };
    let mut done = Vec::new();
    for &stage in stages {
        let outcome = runner.execute(stage).map_err(|e| match e {
            Error::Stage { .. } => e,
            other => other.in_stage(stage.as_str()),
        })?;
        done.push((stage, outcome));
    }
    Ok(RunSummary { out, stages: done })
}

struct Runner<'a> {
    config: &'a RunConfig,
    out: PathBuf,
    manifest: Manifest,
}

impl Runner<'_> {
    fn producer(file: &str) -> Stage {
        match file {
            INGEST_FILE => Stage::Ingest,
            VECTORS_FILE => Stage::Embed,
            SEARCH_FILE => Stage::Search,
            MODELS_FILE | CATALOG_FILE => Stage::Fit,
            STATS_FILE => Stage::Stats,
            f if f.starts_with("profiles_") => Stage::Profile,
            f => unreachable!("no producer for {f}"),
        }
    }

    fn upstream(stage: Stage, config: &RunConfig) -> Vec<String> {
        let profiles = |u: Unit| profiles_file(u);
        match stage {
            Stage::Ingest => vec![],
            Stage::Embed => vec![INGEST_FILE.into()],
            Stage::Search => vec![INGEST_FILE.into(), VECTORS_FILE.into()],
            Stage::Fit => vec![INGEST_FILE.into(), VECTORS_FILE.into(), SEARCH_FILE.into()],
            Stage::Profile => vec![INGEST_FILE.into(), VECTORS_FILE.into(), CATALOG_FILE.into()],
            Stage::Stats => {
                let mut v = vec![INGEST_FILE.to_string(), profiles(config.correlation_unit)];
                if config.group_unit != config.correlation_unit {
                    v.push(profiles(config.group_unit));
                }
                v
            }
            Stage::Report => vec![CATALOG_FILE.into(), STATS_FILE.into(), profiles(config.correlation_unit)],
        }
    }

    /// Hashes of everything a stage reads, verifying upstream artifacts.
    fn inputs(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let c = self.config;
        let mut inputs = BTreeMap::new();
        for file in Self::upstream(stage, c) {
            let producer = Self::producer(&file);
            let recorded = self
                .manifest
                .stages
                .get(producer.as_str())
                .and_then(|r| r.outputs.get(&file))
                .ok_or_else(|| {
                    Error::InvalidInput(format!("{file} is missing; run the {producer} stage first"))
                })?;
            let path = self.out.join(&file);
            if !path.exists() {
                return Err(Error::InvalidInput(format!("{file} is missing; run the {producer} stage first")));
            }
            let actual = sha256_file(&path)?;
            if &actual != recorded {
                return Err(Error::Integrity(format!(
                    "{file} does not match the manifest; rerun the {producer} stage"
                )));
            }
            inputs.insert(format!("artifact:{file}"), actual);
        }
        let mut external = |key: &str, path: &Path| -> Result<()> {
            inputs.insert(format!("file:{key}"), sha256_file(path)?);
            Ok(())
        };
        let settings: String = match stage {
            Stage::Ingest => {
                external("corpus", &c.corpus)?;
                external("oslq", &c.oslq)?;
                to_json(&c.scheme()?)
            }
            Stage::Embed => {
                if c.provider.mode == ProviderMode::File {
                    external("vector_file", c.provider.vector_file.as_ref().expect("validated"))?;
                }
                let mut p = c.provider.clone();
                p.vector_file = None;
                to_json(&p)
            }
            Stage::Search => to_json(&(c.effective_search(), &c.fixed)),
            Stage::Fit => to_json(&c.category_map()?),
            Stage::Profile => String::new(),
            Stage::Stats => to_json(&(c.alpha, c.correlation_unit, c.group_unit, c.fdr_family)),
            Stage::Report => to_json(&(c.category_map()?, c.alert_percentile, c.correlation_unit)),
        };
        inputs.insert("settings".into(), sha256_bytes(settings.as_bytes()));
        Ok(inputs)
    }

    fn outputs_intact(&self, record: &StageRecord) -> bool {
        record.outputs.iter().all(|(file, hash)| {
            let path = self.out.join(file);
            sha256_file(&path).is_ok_and(|h| &h == hash)
        })
    }

    fn execute(&mut self, stage: Stage) -> Result<StageOutcome> {
        let inputs = self.inputs(stage)?;
        if let Some(record) = self.manifest.stages.get(stage.as_str()) {
            if record.inputs == inputs && self.outputs_intact(record) {
                return Ok(StageOutcome::Skipped);
            }
        }
        let staging = self.out.join(STAGING_DIR).join(stage.as_str());
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        if let Err(e) = self.produce(stage, &staging) {
            self.quarantine(stage, &staging)?;
            return Err(e.in_stage(stage.as_str()));
        }
        let mut outputs = BTreeMap::new();
        for rel in list_files(&staging)? {
            let from = staging.join(&rel);
            let to = self.out.join(&rel);
            if let Some(parent) = to.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            outputs.insert(rel.clone(), sha256_file(&from)?);
            fs::rename(&from, &to).map_err(|e| Error::io(&to, e))?;
        }
        let _ = fs::remove_dir_all(&staging);
        self.manifest.stages.insert(stage.as_str().into(), StageRecord { inputs, outputs });
        self.manifest.save(&self.out)?;
        Ok(StageOutcome::Ran)
    }

    fn quarantine(&self, stage: Stage, staging: &Path) -> Result<()> {
        let target = self.out.join(QUARANTINE_DIR).join(stage.as_str());
        if target.exists() {
            fs::remove_dir_all(&target).map_err(|e| Error::io(&target, e))?;
        }
        let parent = target.parent().expect("quarantine has a parent");
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        fs::rename(staging, &target).map_err(|e| Error::io(&target, e))
    }

    fn produce(&self, stage: Stage, dir: &Path) -> Result<()> {
        let c = self.config;
        let write = |name: &str, bytes: &[u8]| -> Result<()> {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
        };
        match stage {
            Stage::Ingest => {
                let corpus = load_corpus(&c.corpus)?;
                let scheme = c.scheme()?;
                let oslq = load_oslq(&c.oslq, &scheme)?;
                let artifact = IngestArtifact {
                    stream_counts: segment_streams(&corpus).into_iter().map(|(k, v)| (k, v.len())).collect(),
                    utterances: corpus.utterances().to_vec(),
                    cronbach_alpha: cronbach_alpha(&oslq.item_matrix())?,
                    scheme,
                    oslq,
                };
                write(INGEST_FILE, to_json(&artifact).as_bytes())
            }
            Stage::Embed => {
                let ingest: IngestArtifact = read_json(&self.out.join(INGEST_FILE))?;
                let vectors = get_vectors(&ingest.utterances, &c.provider)?;
                write_store(&vectors, dir.join(VECTORS_FILE))
            }
            Stage::Search => {
                let (corpus, vectors) = self.corpus_and_vectors()?;
                let search = c.effective_search();
                let mut selections = BTreeMap::new();
                let mut trials_csv = Vec::new();
                for (stream, utterances) in segment_streams(&corpus) {
                    let selection = match c.fixed.get(&stream) {
                        Some(fixed) => StreamSelection {
                            source: ParamSource::Fixed,
                            params: fixed.to_trial_params(&search),
                            report: None,
                        },
                        None => {
                            let ids: Vec<String> = utterances.iter().map(|u| u.id.clone()).collect();
                            let matrix = vectors.select(&ids)?;
                            let report = run_search(stream, &matrix, &search)?;
                            let mut buf = Vec::new();
                            write_trials_csv(&report, &mut buf)?;
                            let text = String::from_utf8(buf).expect("csv is utf-8");
                            let skip = if trials_csv.is_empty() { 0 } else { 1 };
                            for line in text.lines().skip(skip) {
                                trials_csv.extend_from_slice(line.as_bytes());
                                trials_csv.push(b'\n');
                            }
                            StreamSelection {
                                source: ParamSource::Search,
                                params: report.best_trial().params,
                                report: Some(report),
                            }
                        }
                    };
                    selections.insert(stream, selection);
                }
                write(SEARCH_FILE, to_json(&selections).as_bytes())?;
                write(TRIALS_FILE, &trials_csv)
            }
            Stage::Fit => {
                let (corpus, vectors) = self.corpus_and_vectors()?;
                let selections: BTreeMap<StreamKey, StreamSelection> = read_json(&self.out.join(SEARCH_FILE))?;
                let mut models = BTreeMap::new();
                for (stream, utterances) in segment_streams(&corpus) {
                    let selection = selections
                        .get(&stream)
                        .ok_or_else(|| Error::Integrity(format!("{SEARCH_FILE} has no entry for {stream}")))?;
                    let ids: Vec<String> = utterances.iter().map(|u| u.id.clone()).collect();
                    let matrix = vectors.select(&ids)?;
                    let reduced = umap_fit(&matrix, &selection.params.umap)?;
                    write_coords(&reduced, dir.join(format!("reduced_{stream}.jsonl")))?;
                    models.insert(stream, kmeans_fit(&reduced, &matrix, &selection.params.kmeans)?);
                }
                let catalog = PatternCatalog::from_models(&models, &vectors, &c.category_map()?)?;
                write(MODELS_FILE, to_json(&models).as_bytes())?;
                write(CATALOG_FILE, to_json(&catalog).as_bytes())
            }
            Stage::Profile => {
                let (corpus, vectors) = self.corpus_and_vectors()?;
                let catalog: PatternCatalog = read_json(&self.out.join(CATALOG_FILE))?;
                let streams = segment_streams(&corpus);
                for unit in [Unit::Student, Unit::Log] {
                    let profiles = student_profiles(&streams, &vectors, &catalog, unit)?;
                    let mut buf = Vec::new();
                    write_profiles_csv(&profiles, &catalog.pattern_ids(), &mut buf)?;
                    write(&profiles_file(unit), &buf)?;
                }
                Ok(())
            }
            Stage::Stats => {
                let ingest: IngestArtifact = read_json(&self.out.join(INGEST_FILE))?;
                let scores = srl_scores(&ingest.oslq);
                let (ids, corr_profiles) = self.profiles(c.correlation_unit)?;
                let (_, group_profiles) = self.profiles(c.group_unit)?;
                let correlation = build_correlation_table(
                    &corr_profiles,
                    &scores,
                    &ids,
                    c.correlation_unit,
                    c.alpha,
                    c.fdr_family,
                )?;
                let totals: BTreeMap<String, f64> =
                    ingest.oslq.records.iter().map(|r| (r.student_id.clone(), r.total)).collect();
                let split = median_split(&totals)?;
                let group = build_group_table(&group_profiles, &split, &ids, c.group_unit, c.alpha)?;
                let artifact = StatsArtifact {
                    descriptives: descriptive_stats(&corr_profiles, &ids),
                    correlation,
                    split,
                    group,
                };
                write(STATS_FILE, to_json(&artifact).as_bytes())
            }
            Stage::Report => {
                let stats: StatsArtifact = read_json(&self.out.join(STATS_FILE))?;
                let (_, profiles) = self.profiles(c.correlation_unit)?;
                let verdicts = classify_patterns(&stats.correlation, &c.category_map()?);
                let alerts = student_alerts(&profiles, &verdicts, c.alert_percentile)?;
                write("reports/fig1_distribution.csv", distribution_csv(&stats.descriptives)?.as_bytes())?;
                write("reports/table2_correlations.md", correlation_markdown(&stats.correlation).as_bytes())?;
                write("reports/table2_values.csv", correlation_values_csv(&stats.correlation)?.as_bytes())?;
                write("reports/table2_annotations.csv", correlation_annotation_csv(&stats.correlation)?.as_bytes())?;
                write("reports/table2_cells.csv", correlation_cells_csv(&stats.correlation)?.as_bytes())?;
                write("reports/table3_groups.md", group_markdown(&stats.group, false).as_bytes())?;
                write("reports/table3_groups.csv", group_csv(&stats.group)?.as_bytes())?;
                write("reports/table4_classification.md", classification_markdown(&verdicts).as_bytes())?;
                write("reports/alerts.csv", alerts_csv(&alerts)?.as_bytes())?;
                write("reports/alerts.json", to_json(&alerts).as_bytes())?;
                let summary = ReportSummary {
                    pattern_count: stats.correlation.pattern_ids.len(),
                    correlation_tests: stats.correlation.family_sizes.clone(),
                    significant_cells: stats.correlation.cells.iter().filter(|c| c.significant).count(),
                    group_tests: stats.group.family_size,
                    significant_rows: stats.group.rows.iter().filter(|r| r.significant).count(),
                    verdicts,
                    alerts,
                };
                write(REPORT_FILE, to_json(&summary).as_bytes())
            }
        }
    }

    fn corpus_and_vectors(&self) -> Result<(Corpus, EmbeddingMatrix)> {
        let ingest: IngestArtifact = read_json(&self.out.join(INGEST_FILE))?;
        Ok((ingest.corpus()?, read_store(self.out.join(VECTORS_FILE))?))
    }

    fn profiles(&self, unit: Unit) -> Result<(Vec<String>, Vec<AlignmentProfile>)> {
        let path = self.out.join(profiles_file(unit));
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        read_profiles_csv(&text)
    }
}

/// Files under `dir`, as sorted '/'-separated relative paths.
fn list_files(dir: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).expect("under dir");
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Recomputes alerts from persisted artifacts with a different percentile.
pub fn recompute_alerts(config: &RunConfig, percentile: f64) -> Result<Vec<UnitAlerts>> {
    let stats: StatsArtifact = read_json(&config.out.join(STATS_FILE))?;
    let path = config.out.join(profiles_file(config.correlation_unit));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let (_, profiles) = read_profiles_csv(&text)?;
    let verdicts = classify_patterns(&stats.correlation, &config.category_map()?);
    student_alerts(&profiles, &verdicts, percentile)
}

/// Writes a synthetic corpus, questionnaire, vector store and config into
/// `dir` and returns the config path. Small search settings keep the run short.
pub fn write_fixture(dir: &Path, spec: &crate::synthetic::CorpusSpec) -> Result<PathBuf> {
    let data = crate::synthetic::synthetic_corpus(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::corpus::save_corpus(&data.corpus, dir.join("corpus.jsonl"))?;
    let oslq = dir.join("oslq.csv");
    fs::write(&oslq, &data.oslq_csv).map_err(|e| Error::io(&oslq, e))?;
    write_store(&data.vectors, dir.join("vectors.emb"))?;
    let mut config = RunConfig::new("corpus.jsonl", "oslq.csv", ProviderConfig::file("vectors.emb"));
    config.seed = spec.seed;
    config.search.n_trials = 12;
    config.search.per_config = 4;
    config.search.space.n_neighbors = (5, 15);
    config.search.space.n_components = (2, 5);
    config.search.space.k = (2, 6);
    config.search.umap_base.n_epochs = 100;
    config.search.kmeans_base.n_init = 3;
    let path = dir.join("config.json");
    fs::write(&path, to_json(&config)).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::CorpusSpec;

    fn small_spec() -> CorpusSpec {
        CorpusSpec { n_students: 12, per_log: 2, seed: 5, ..Default::default() }
    }

    #[test]
    fn config_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), &small_spec()).unwrap();
        let config = RunConfig::load(&path).unwrap();
        assert!(config.corpus.is_absolute());
        config.validate().unwrap();
        let mut bad = config.clone();
        bad.alpha = 1.5;
        assert_eq!(bad.validate().unwrap_err().exit_code(), 2);
        let mut missing = config.clone();
        missing.oslq = dir.path().join("nope.csv");
        assert_eq!(missing.validate().unwrap_err().exit_code(), 2);
        fs::write(dir.path().join("bad.json"), r#"{"corpus": "c", "surprise": 1}"#).unwrap();
        assert_eq!(RunConfig::load(dir.path().join("bad.json")).unwrap_err().exit_code(), 2);
    }

    #[test]
    fn stage_order_and_names() {
        assert_eq!(Stage::Fit.through(), vec![Stage::Ingest, Stage::Embed, Stage::Search, Stage::Fit]);
        assert_eq!("profile".parse::<Stage>().unwrap(), Stage::Profile);
        assert!("bogus".parse::<Stage>().is_err());
    }

    #[test]
    fn lock_excludes_second_run() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), &small_spec()).unwrap();
        let config = RunConfig::load(&path).unwrap();
        fs::create_dir_all(&config.out).unwrap();
        let held = RunLock::acquire(&config.out).unwrap();
        assert_eq!(run_stages(&config, &[Stage::Ingest]).unwrap_err().exit_code(), 2);
        drop(held);
        run_stages(&config, &[Stage::Ingest]).unwrap();
        assert!(!config.out.join(LOCK_FILE).exists());
    }

    #[test]
    fn downstream_stage_requires_upstream() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), &small_spec()).unwrap();
        let config = RunConfig::load(&path).unwrap();
        let err = run_stages(&config, &[Stage::Search]).unwrap_err();
        assert!(err.to_string().contains("run the ingest stage first"), "{err}");
    }
}
