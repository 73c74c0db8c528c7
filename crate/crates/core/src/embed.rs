//! Utterance embeddings: acquisition, the binary vector store, normalization.
//!
//! Store layout (all integers little-endian):
//!
//! ```text
//! "EMB1" | u32 rows | u32 dim | rows × (u16 len, utf-8 id) | rows × dim × f32
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{normalize_text, Utterance};
use crate::error::{Error, Result};

pub const DEFAULT_DIM: usize = 1024;
pub const DEFAULT_MODEL: &str = "nlp_gte_sentence-embedding";
const MAGIC: &[u8; 4] = b"EMB1";

/// Dense row-major matrix of f32 vectors keyed by utterance id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    ids: Vec<String>,
    values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, ids: Vec<String>, values: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("embedding dimension must be positive".into()));
        }
        if values.len() != ids.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: ids.len() * dim,
                found: values.len(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate vector id {id:?}")));
            }
        }
        for (id, row) in ids.iter().zip(values.chunks_exact(dim)) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(id.clone()));
            }
        }
        Ok(EmbeddingMatrix { dim, ids, values })
    }

    pub fn from_rows(ids: Vec<String>, rows: Vec<Vec<f32>>) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(DEFAULT_DIM);
        let mut values = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(dim, ids, values)
    }

    pub fn empty(dim: usize) -> Self {
        EmbeddingMatrix {
            dim,
            ids: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.values.chunks_exact(self.dim)
    }

    /// Rows widened to f64, the working precision downstream.
    pub fn to_f64_rows(&self) -> Vec<Vec<f64>> {
        self.rows()
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect()
    }

    pub fn index_of(&self) -> HashMap<&str, usize> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }

    /// Rows for `ids`, in that order.
    pub fn select(&self, ids: &[String]) -> Result<EmbeddingMatrix> {
        let index = self.index_of();
        let mut values = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            let &i = index
                .get(id.as_str())
                .ok_or_else(|| Error::MissingVector(id.clone()))?;
            values.extend_from_slice(self.row(i));
        }
        Ok(EmbeddingMatrix {
            dim: self.dim,
            ids: ids.to_vec(),
            values,
        })
    }

    /// Stacks matrices of equal dimension.
    pub fn concat(parts: &[EmbeddingMatrix]) -> Result<EmbeddingMatrix> {
        let dim = parts.first().map(|m| m.dim).unwrap_or(DEFAULT_DIM);
        let mut ids = Vec::new();
        let mut values = Vec::new();
        for m in parts {
            if m.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: m.dim,
                });
            }
            ids.extend(m.ids.iter().cloned());
            values.extend_from_slice(&m.values);
        }
        EmbeddingMatrix::new(dim, ids, values)
    }
}

/// Scales every row to unit Euclidean norm.
pub fn l2_normalize(matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut values = Vec::with_capacity(matrix.values.len());
    for (id, row) in matrix.ids.iter().zip(matrix.rows()) {
        let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroVector(id.clone()));
        }
        values.extend(row.iter().map(|&v| (v as f64 / norm) as f32));
    }
    Ok(EmbeddingMatrix {
        dim: matrix.dim,
        ids: matrix.ids.clone(),
        values,
    })
}

pub fn encode_store(matrix: &EmbeddingMatrix) -> Result<Vec<u8>> {
    let rows = u32::try_from(matrix.len())
        .map_err(|_| Error::InvalidInput("too many rows for vector store".into()))?;
    let dim = u32::try_from(matrix.dim)
        .map_err(|_| Error::InvalidInput("dimension too large for vector store".into()))?;
    let mut buf = Vec::with_capacity(12 + matrix.values.len() * 4 + matrix.len() * 16);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&rows.to_le_bytes());
    buf.extend_from_slice(&dim.to_le_bytes());
    for id in &matrix.ids {
        let len = u16::try_from(id.len())
            .map_err(|_| Error::InvalidInput(format!("id too long for vector store: {id:?}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
    }
    for v in &matrix.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!("while reading {what}")));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
}

pub fn decode_store(buf: &[u8]) -> Result<EmbeddingMatrix> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(Error::NotAVectorStore);
    }
    let mut cur = Cursor { buf, pos: 4 };
    let rows = cur.u32("row count")? as usize;
    let dim = cur.u32("dimension")? as usize;
    if dim == 0 {
        return Err(Error::HeaderInconsistent("dimension is zero".into()));
    }
    let mut ids = Vec::with_capacity(rows.min(1 << 20));
    for _ in 0..rows {
        let len = cur.u16("id length")? as usize;
        let bytes = cur.take(len, "id")?;
        let id = std::str::from_utf8(bytes)
            .map_err(|_| Error::HeaderInconsistent("id is not utf-8".into()))?;
        ids.push(id.to_string());
    }
    let payload = &buf[cur.pos..];
    let expected = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::HeaderInconsistent("row count × dim overflows".into()))?;
    if payload.len() < expected {
        return Err(Error::Truncated(format!(
            "payload has {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    if payload.len() > expected {
        return Err(Error::HeaderInconsistent(format!(
            "payload has {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    EmbeddingMatrix::new(dim, ids, values)
}

pub fn write_store(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_store(matrix)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_store(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_store(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Write,
    Read,
}

/// Writes `matrix` to `path` or reads a matrix from it.
pub fn vector_io(
    matrix: Option<&EmbeddingMatrix>,
    path: impl AsRef<Path>,
    direction: Direction,
) -> Result<EmbeddingMatrix> {
    match direction {
        Direction::Write => {
            let m = matrix.ok_or_else(|| Error::InvalidInput("nothing to write".into()))?;
            write_store(m, path)?;
            Ok(m.clone())
        }
        Direction::Read => read_store(path),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderMode {
    File,
    Http,
}

fn default_model() -> String {
    DEFAULT_MODEL.to_string()
}
fn default_batch_size() -> usize {
    32
}
fn default_max_retries() -> u32 {
    3
}
fn default_timeout() -> f64 {
    30.0
}
fn default_backoff() -> f64 {
    0.5
}
fn default_concurrency() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub mode: ProviderMode,
    /// Precomputed vector store (file mode).
    #[serde(default)]
    pub vector_file: Option<PathBuf>,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_model")]
    pub model_name: String,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub auth_env_var: Option<String>,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_backoff")]
    pub backoff_base_secs: f64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
}

impl ProviderConfig {
    pub fn file(path: impl Into<PathBuf>) -> Self {
        ProviderConfig {
            mode: ProviderMode::File,
            vector_file: Some(path.into()),
            endpoint: None,
            model_name: default_model(),
            batch_size: default_batch_size(),
            auth_env_var: None,
            max_retries: default_max_retries(),
            timeout_secs: default_timeout(),
            backoff_base_secs: default_backoff(),
            concurrency: default_concurrency(),
        }
    }

    pub fn http(endpoint: impl Into<String>, auth_env_var: impl Into<String>) -> Self {
        ProviderConfig {
            mode: ProviderMode::Http,
            vector_file: None,
            endpoint: Some(endpoint.into()),
            auth_env_var: Some(auth_env_var.into()),
            ..ProviderConfig::file("")
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        match self.mode {
            ProviderMode::File if self.vector_file.is_none() => {
                Err(Error::Config("file provider requires vector_file".into()))
            }
            ProviderMode::Http if self.endpoint.is_none() || self.auth_env_var.is_none() => Err(
                Error::Config("http provider requires endpoint and auth_env_var".into()),
            ),
            _ => Ok(()),
        }
    }
}

/// One row per utterance, in stream order.
pub fn get_vectors(stream: &[Utterance], provider: &ProviderConfig) -> Result<EmbeddingMatrix> {
    provider.validate()?;
    if stream.is_empty() {
        return Err(Error::InvalidInput("cannot embed an empty stream".into()));
    }
    let ids: Vec<String> = stream.iter().map(|u| u.id.clone()).collect();
    match provider.mode {
        ProviderMode::File => {
            let store = read_store(provider.vector_file.as_ref().unwrap())?;
            store.select(&ids)
        }
        ProviderMode::Http => {
            let texts: Vec<String> = stream.iter().map(|u| normalize_text(&u.text)).collect();
            let rows = HttpEmbedder::new(provider)?.embed(&texts)?;
            EmbeddingMatrix::from_rows(ids, rows)
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    data: Vec<EmbedItem>,
}

#[derive(Deserialize)]
struct EmbedItem {
    index: usize,
    embedding: Vec<f32>,
}

struct HttpEmbedder<'a> {
    config: &'a ProviderConfig,
    agent: ureq::Agent,
    token: String,
}

impl<'a> HttpEmbedder<'a> {
    fn new(config: &'a ProviderConfig) -> Result<Self> {
        let var = config.auth_env_var.as_deref().unwrap();
        let token = std::env::var(var)
            .map_err(|_| Error::Config(format!("environment variable {var} is not set")))?;
        let agent_config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(config.timeout_secs)))
            .http_status_as_error(false)
            .build();
        Ok(HttpEmbedder {
            config,
            agent: agent_config.into(),
            token,
        })
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        let batches: Vec<&[String]> = texts.chunks(self.config.batch_size).collect();
        let results: Mutex<Vec<Option<Result<Vec<Vec<f32>>>>>> =
            Mutex::new((0..batches.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let workers = self.config.concurrency.clamp(1, batches.len().max(1));
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let b = next.fetch_add(1, Ordering::SeqCst);
                    if b >= batches.len() {
                        break;
                    }
                    let out = self.request_with_retry(batches[b]);
                    let failed = out.is_err();
                    results.lock().unwrap()[b] = Some(out);
                    if failed {
                        // stop handing out further batches
                        next.store(batches.len(), Ordering::SeqCst);
                    }
                });
            }
        });
        let mut rows = Vec::with_capacity(texts.len());
        let mut dim = None;
        for slot in results.into_inner().unwrap() {
            let batch = slot.ok_or_else(|| Error::Provider("batch not attempted".into()))??;
            for row in batch {
                match dim {
                    None => dim = Some(row.len()),
                    Some(d) if d != row.len() => {
                        return Err(Error::DimensionMismatch {
                            expected: d,
                            found: row.len(),
                        })
                    }
                    _ => {}
                }
                rows.push(row);
            }
        }
        Ok(rows)
    }

    fn request_with_retry(&self, batch: &[String]) -> Result<Vec<Vec<f32>>> {
        let mut attempt = 0;
        loop {
            match self.request(batch) {
                Ok(rows) => return Ok(rows),
                Err(Error::Provider(_)) if attempt < self.config.max_retries => {
                    let wait = self.config.backoff_base_secs * 2f64.powi(attempt as i32);
                    std::thread::sleep(Duration::from_secs_f64(wait));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn request(&self, batch: &[String]) -> Result<Vec<Vec<f32>>> {
        let endpoint = self.config.endpoint.as_deref().unwrap();
        let body = EmbedRequest {
            model: &self.config.model_name,
            input: batch,
        };
        let mut resp = self
            .agent
            .post(endpoint)
            .header("Authorization", &format!("Bearer {}", self.token))
            .send_json(&body)
            .map_err(|e| Error::Provider(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(Error::Provider(format!("HTTP status {status}")));
        }
        let parsed: EmbedResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| Error::Provider(format!("bad response body: {e}")))?;
        if parsed.data.len() != batch.len() {
            return Err(Error::Provider(format!(
                "expected {} embeddings, got {}",
                batch.len(),
                parsed.data.len()
            )));
        }
        let mut rows: Vec<Option<Vec<f32>>> = vec![None; batch.len()];
        for item in parsed.data {
            if item.embedding.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(batch.get(item.index).cloned().unwrap_or_default()));
            }
            let slot = rows
                .get_mut(item.index)
                .ok_or_else(|| Error::Provider(format!("index {} out of range", item.index)))?;
            *slot = Some(item.embedding);
        }
        rows.into_iter()
            .map(|r| r.ok_or_else(|| Error::Provider("response missing an index".into())))
            .collect()
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Phase, Role};
    use proptest::prelude::*;

    fn utterances(n: usize) -> Vec<Utterance> {
        (0..n)
            .map(|i| Utterance {
                id: format!("u{i}"),
                student_id: "s".into(),
                log_id: "l".into(),
                week: None,
                phase: Phase::Pre,
                role: Role::Student,
                text: format!("question {i}"),
            })
            .collect()
    }

    #[test]
    fn file_mode_lookup_in_stream_order() {
        let dim = 1024;
        let ids: Vec<String> = ["u2", "u0", "u1", "extra"].iter().map(|s| s.to_string()).collect();
        let values: Vec<f32> = (0..ids.len() * dim).map(|i| i as f32).collect();
        let store = EmbeddingMatrix::new(dim, ids, values).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_store(&store, f.path()).unwrap();
        let m = get_vectors(&utterances(3), &ProviderConfig::file(f.path())).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.dim(), 1024);
        assert_eq!(m.ids(), ["u0", "u1", "u2"]);
        assert_eq!(m.row(0)[0], 1024.0);
        assert_eq!(m.row(2)[0], 0.0);
    }

    #[test]
    fn file_mode_missing_id() {
        let store = EmbeddingMatrix::from_rows(
            vec!["u0".into(), "u1".into()],
            vec![vec![1.0, 2.0], vec![3.0, 4.0]],
        )
        .unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_store(&store, f.path()).unwrap();
        let err = get_vectors(&utterances(3), &ProviderConfig::file(f.path())).unwrap_err();
        assert!(matches!(&err, Error::MissingVector(id) if id == "u2"));
    }

    #[test]
    fn bad_magic() {
        let err = decode_store(b"EMB2\0\0\0\0\0\0\0\0").unwrap_err();
        assert!(matches!(err, Error::NotAVectorStore));
        assert_eq!(err.to_string(), "not a vector store");
    }

    #[test]
    fn empty_store_keeps_dim() {
        let m = EmbeddingMatrix::empty(1024);
        let bytes = encode_store(&m).unwrap();
        assert_eq!(bytes.len(), 12);
        let back = decode_store(&bytes).unwrap();
        assert_eq!(back.len(), 0);
        assert_eq!(back.dim(), 1024);
    }

    #[test]
    fn truncated_and_inconsistent() {
        let m = EmbeddingMatrix::from_rows(vec!["a".into()], vec![vec![1.0, 2.0, 3.0]]).unwrap();
        let bytes = encode_store(&m).unwrap();
        assert!(matches!(
            decode_store(&bytes[..bytes.len() - 1]).unwrap_err(),
            Error::Truncated(_)
        ));
        assert!(matches!(decode_store(&bytes[..6]).unwrap_err(), Error::Truncated(_)));
        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(
            decode_store(&longer).unwrap_err(),
            Error::HeaderInconsistent(_)
        ));
    }

    fn arb_matrix() -> impl Strategy<Value = EmbeddingMatrix> {
        (1usize..6, 0usize..6).prop_flat_map(|(dim, rows)| {
            proptest::collection::vec(-1e6f32..1e6, dim * rows).prop_map(move |values| {
                let ids = (0..rows).map(|i| format!("id-{i}-é")).collect();
                EmbeddingMatrix::new(dim, ids, values).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn store_round_trip_is_bitwise(m in arb_matrix()) {
            let back = decode_store(&encode_store(&m).unwrap()).unwrap();
            prop_assert_eq!(back.ids(), m.ids());
            let a: Vec<u32> = m.rows().flatten().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.rows().flatten().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn normalized_rows_are_unit(m in arb_matrix()) {
            prop_assume!(m.rows().all(|r| r.iter().any(|&v| v.abs() > 1e-3)));
            let n = l2_normalize(&m).unwrap();
            for (orig, row) in m.rows().zip(n.rows()) {
                let norm: f64 = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                prop_assert!((norm - 1.0).abs() < 1e-6);
                let dot: f64 = orig.iter().zip(row).map(|(&a, &b)| a as f64 * b as f64).sum();
                let on: f64 = orig.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                prop_assert!((dot / on / norm - 1.0).abs() < 1e-6);
            }
            let twice = l2_normalize(&n).unwrap();
            for (a, b) in n.rows().flatten().zip(twice.rows().flatten()) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn normalize_examples() {
        let m = EmbeddingMatrix::from_rows(
            vec!["a".into(), "b".into()],
            vec![vec![3.0, 4.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let n = l2_normalize(&m).unwrap();
        assert!((n.row(0)[0] - 0.6).abs() < 1e-7 && (n.row(0)[1] - 0.8).abs() < 1e-7);
        assert_eq!(n.row(1), [0.0, 1.0]);
        let zero = EmbeddingMatrix::from_rows(vec!["z".into()], vec![vec![0.0, 0.0]]).unwrap();
        assert!(matches!(l2_normalize(&zero).unwrap_err(), Error::ZeroVector(id) if id == "z"));
    }

    #[test]
    fn provider_validation() {
        let mut p = ProviderConfig::http("http://localhost:1/embed", "TOKEN");
        assert!(p.validate().is_ok());
        p.batch_size = 0;
        assert!(p.validate().is_err());
        p = ProviderConfig::http("x", "y");
        p.endpoint = None;
        assert!(p.validate().is_err());
    }
}
