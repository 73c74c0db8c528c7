//! Dialogue log and questionnaire ingestion.
//!
//! Dialogue logs are JSON-lines files, one utterance per line. Each utterance
//! carries its phase (`pre`/`post` class) and speaker role (`student`/`ai`),
//! which together place it in exactly one of four streams.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::sample_variance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pre,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Student,
    Ai,
}

/// One of the four analysis streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StreamKey {
    PreQ,
    PostQ,
    PreR,
    PostR,
}

impl StreamKey {
    pub const ALL: [StreamKey; 4] = [
        StreamKey::PreQ,
        StreamKey::PostQ,
        StreamKey::PreR,
        StreamKey::PostR,
    ];

    pub fn from_phase_role(phase: Phase, role: Role) -> Self {
        match (phase, role) {
            (Phase::Pre, Role::Student) => StreamKey::PreQ,
            (Phase::Post, Role::Student) => StreamKey::PostQ,
            (Phase::Pre, Role::Ai) => StreamKey::PreR,
            (Phase::Post, Role::Ai) => StreamKey::PostR,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StreamKey::PreQ => "PreQ",
            StreamKey::PostQ => "PostQ",
            StreamKey::PreR => "PreR",
            StreamKey::PostR => "PostR",
        }
    }

    /// Pattern id for cluster `index` of this stream, e.g. `PreQ_cluster0`.
    pub fn pattern_id(self, index: usize) -> String {
        format!("{}_cluster{}", self.as_str(), index)
    }
}

impl fmt::Display for StreamKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StreamKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StreamKey::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown stream {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: String,
    pub student_id: String,
    pub log_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub week: Option<u32>,
    pub phase: Phase,
    pub role: Role,
    pub text: String,
}

impl Utterance {
    pub fn stream(&self) -> StreamKey {
        StreamKey::from_phase_role(self.phase, self.role)
    }
}

/// Validated collection of utterances, in input order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    utterances: Vec<Utterance>,
    logs: BTreeMap<String, Vec<usize>>,
    students: BTreeSet<String>,
}

impl Corpus {
    /// Builds a corpus, checking id uniqueness and non-empty text.
    /// Line numbers in errors are 1-based positions in `utterances`.
    pub fn new(utterances: Vec<Utterance>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(utterances.len());
        let mut logs: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut students = BTreeSet::new();
        for (i, u) in utterances.iter().enumerate() {
            if !seen.insert(u.id.as_str()) {
                return Err(Error::DuplicateId {
                    line: i + 1,
                    id: u.id.clone(),
                });
            }
            if u.text.trim().is_empty() {
                return Err(Error::EmptyText {
                    line: i + 1,
                    id: u.id.clone(),
                });
            }
            logs.entry(u.log_id.clone()).or_default().push(i);
            students.insert(u.student_id.clone());
        }
        Ok(Corpus {
            utterances,
            logs,
            students,
        })
    }

    pub fn utterances(&self) -> &[Utterance] {
        &self.utterances
    }

    /// Utterance indices grouped by log id.
    pub fn logs(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.logs
    }

    pub fn students(&self) -> &BTreeSet<String> {
        &self.students
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Student owning each log.
    pub fn log_owners(&self) -> BTreeMap<String, String> {
        self.logs
            .iter()
            .map(|(log, idx)| (log.clone(), self.utterances[idx[0]].student_id.clone()))
            .collect()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawUtterance {
    id: String,
    student_id: String,
    log_id: String,
    #[serde(default)]
    week: Option<u32>,
    phase: String,
    role: String,
    text: String,
}

fn parse_line(line: &str, lineno: usize) -> Result<Utterance> {
    let raw: RawUtterance = serde_json::from_str(line).map_err(|e| Error::Malformed {
        line: lineno,
        message: e.to_string(),
    })?;
    let phase = match raw.phase.as_str() {
        "pre" => Phase::Pre,
        "post" => Phase::Post,
        _ => {
            return Err(Error::UnknownValue {
                line: lineno,
                field: "phase",
                value: raw.phase,
            })
        }
    };
    let role = match raw.role.as_str() {
        "student" => Role::Student,
        "ai" => Role::Ai,
        _ => {
            return Err(Error::UnknownValue {
                line: lineno,
                field: "role",
                value: raw.role,
            })
        }
    };
    if raw.text.trim().is_empty() {
        return Err(Error::EmptyText {
            line: lineno,
            id: raw.id,
        });
    }
    Ok(Utterance {
        id: raw.id,
        student_id: raw.student_id,
        log_id: raw.log_id,
        week: raw.week,
        phase,
        role,
        text: raw.text,
    })
}

/// Loads a JSON-lines corpus. Blank lines are ignored; errors name the
/// 1-based line number in the file.
pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut utterances = Vec::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let u = parse_line(&line, lineno)?;
        if ids.insert(u.id.clone(), lineno).is_some() {
            return Err(Error::DuplicateId {
                line: lineno,
                id: u.id,
            });
        }
        utterances.push(u);
    }
    Corpus::new(utterances)
}

pub fn save_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for u in corpus.utterances() {
        let line = serde_json::to_string(u).expect("utterance serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Partitions utterances into the four streams, preserving order.
/// Every stream key is present in the result, possibly empty.
pub fn segment_streams(corpus: &Corpus) -> BTreeMap<StreamKey, Vec<Utterance>> {
    let mut streams: BTreeMap<StreamKey, Vec<Utterance>> =
        StreamKey::ALL.iter().map(|&k| (k, Vec::new())).collect();
    for u in corpus.utterances() {
        streams.get_mut(&u.stream()).unwrap().push(u.clone());
    }
    streams
}

/// Trims, and collapses internal whitespace runs to a single space.
pub fn normalize_text(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// OSLQ subscales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subscale {
    GS,
    ES,
    TS,
    TM,
    HS,
    SE,
}

impl Subscale {
    pub const ALL: [Subscale; 6] = [
        Subscale::GS,
        Subscale::ES,
        Subscale::TS,
        Subscale::TM,
        Subscale::HS,
        Subscale::SE,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Subscale::GS => "GS",
            Subscale::ES => "ES",
            Subscale::TS => "TS",
            Subscale::TM => "TM",
            Subscale::HS => "HS",
            Subscale::SE => "SE",
        }
    }
}

/// Subscale → item column mapping plus the response bounds.
///
/// Serialized as a flat JSON object: `{"GS": [...], ..., "min_response": 1,
/// "max_response": 5}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OslqScheme {
    pub min_response: f64,
    pub max_response: f64,
    #[serde(flatten)]
    pub subscales: BTreeMap<Subscale, Vec<String>>,
}

impl Default for OslqScheme {
    /// Six consecutive four-item groups over columns `item1..item24`, 1–5
    /// responses. Confirm against the actual instrument before use.
    fn default() -> Self {
        let subscales = Subscale::ALL
            .iter()
            .enumerate()
            .map(|(g, &s)| {
                let items = (1..=4).map(|j| format!("item{}", g * 4 + j)).collect();
                (s, items)
            })
            .collect();
        OslqScheme {
            min_response: 1.0,
            max_response: 5.0,
            subscales,
        }
    }
}

impl OslqScheme {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let scheme: OslqScheme = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        scheme.validate()?;
        Ok(scheme)
    }

    /// All six subscales present, item groups disjoint and non-empty.
    pub fn validate(&self) -> Result<()> {
        if !(self.min_response < self.max_response) {
            return Err(Error::Config(
                "min_response must be below max_response".into(),
            ));
        }
        let mut seen = HashSet::new();
        for s in Subscale::ALL {
            let items = self
                .subscales
                .get(&s)
                .ok_or_else(|| Error::Config(format!("scheme lacks subscale {}", s.as_str())))?;
            if items.is_empty() {
                return Err(Error::Config(format!("subscale {} has no items", s.as_str())));
            }
            for item in items {
                if !seen.insert(item.as_str()) {
                    return Err(Error::Config(format!(
                        "item {item:?} assigned to more than one subscale"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn item_count(&self) -> usize {
        self.subscales.values().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionnaireRecord {
    pub student_id: String,
    /// Responses in the file's column order.
    pub items: Vec<f64>,
    pub subscales: BTreeMap<Subscale, f64>,
    pub total: f64,
}

/// A questionnaire row excluded from analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub student_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OslqTable {
    pub item_columns: Vec<String>,
    pub records: Vec<QuestionnaireRecord>,
    pub rejected: Vec<Rejection>,
}

impl OslqTable {
    /// Students × items response matrix.
    pub fn item_matrix(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.items.clone()).collect()
    }
}

/// Loads questionnaire responses and scores them under `scheme`.
///
/// Rows with a blank response are rejected (listed in `rejected`), not fatal.
/// Non-numeric or out-of-bounds responses are errors.
pub fn load_oslq(path: impl AsRef<Path>, scheme: &OslqScheme) -> Result<OslqTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_oslq(&text, scheme)
}

pub fn parse_oslq(text: &str, scheme: &OslqScheme) -> Result<OslqTable> {
    scheme.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::HeaderMismatch(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.first().map(String::as_str) != Some("student_id") {
        return Err(Error::HeaderMismatch(
            "first column must be student_id".into(),
        ));
    }
    let item_columns: Vec<String> = header[1..].to_vec();
    let expected: BTreeSet<&str> = scheme
        .subscales
        .values()
        .flatten()
        .map(String::as_str)
        .collect();
    let found: BTreeSet<&str> = item_columns.iter().map(String::as_str).collect();
    if found.len() != item_columns.len() {
        return Err(Error::HeaderMismatch("duplicate item column".into()));
    }
    if found != expected {
        let missing: Vec<_> = expected.difference(&found).collect();
        let extra: Vec<_> = found.difference(&expected).collect();
        return Err(Error::HeaderMismatch(format!(
            "missing {missing:?}, unexpected {extra:?}"
        )));
    }
    let column_of: HashMap<&str, usize> = item_columns
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    let mut records = Vec::new();
    let mut rejected = Vec::new();
    let mut ids = HashSet::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Malformed {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let student_id = row.get(0).unwrap_or("").to_string();
        if student_id.is_empty() {
            return Err(Error::InvalidInput("questionnaire row without student_id".into()));
        }
        if !ids.insert(student_id.clone()) {
            return Err(Error::InvalidInput(format!(
                "duplicate questionnaire row for student {student_id:?}"
            )));
        }
        let mut items = Vec::with_capacity(item_columns.len());
        let mut missing = None;
        for (c, column) in item_columns.iter().enumerate() {
            let cell = row.get(c + 1).unwrap_or("");
            if cell.is_empty() {
                missing.get_or_insert_with(|| column.clone());
                items.push(f64::NAN);
                continue;
            }
            let value: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                student_id: student_id.clone(),
                column: column.clone(),
                value: cell.to_string(),
            })?;
            if !value.is_finite() || value < scheme.min_response || value > scheme.max_response {
                return Err(Error::OutOfBounds {
                    student_id: student_id.clone(),
                    column: column.clone(),
                    value,
                    min: scheme.min_response,
                    max: scheme.max_response,
                });
            }
            items.push(value);
        }
        if let Some(column) = missing {
            let reason = Error::MissingResponse {
                student_id: student_id.clone(),
                column,
            };
            rejected.push(Rejection {
                student_id,
                reason: reason.to_string(),
            });
            continue;
        }
        let subscales: BTreeMap<Subscale, f64> = scheme
            .subscales
            .iter()
            .map(|(&s, cols)| (s, cols.iter().map(|c| items[column_of[c.as_str()]]).sum()))
            .collect();
        let total = Subscale::ALL.iter().map(|s| subscales[s]).sum();
        records.push(QuestionnaireRecord {
            student_id,
            items,
            subscales,
            total,
        });
    }
    Ok(OslqTable {
        item_columns,
        records,
        rejected,
    })
}

/// Cronbach's alpha over a students × items matrix, sample variances
/// throughout. `Ok(None)` when the total-score variance is zero.
pub fn cronbach_alpha(items: &[Vec<f64>]) -> Result<Option<f64>> {
    let n = items.len();
    if n < 2 {
        return Err(Error::InvalidInput("cronbach_alpha needs at least 2 students".into()));
    }
    let k = items[0].len();
    if k < 2 {
        return Err(Error::InvalidInput("cronbach_alpha needs at least 2 items".into()));
    }
    if items.iter().any(|row| row.len() != k) {
        return Err(Error::InvalidInput("ragged response matrix".into()));
    }
    if items.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite response".into()));
    }
    let item_var_sum: f64 = (0..k)
        .map(|j| {
            let col: Vec<f64> = items.iter().map(|row| row[j]).collect();
            sample_variance(&col)
        })
        .sum();
    let totals: Vec<f64> = items.iter().map(|row| row.iter().sum()).collect();
    let total_var = sample_variance(&totals);
    if total_var == 0.0 {
        return Ok(None);
    }
    let k = k as f64;
    Ok(Some(k / (k - 1.0) * (1.0 - item_var_sum / total_var)))
}
