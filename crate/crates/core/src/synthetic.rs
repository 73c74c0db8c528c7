//! Seeded generators for corpora with planted structure: Gaussian blobs,
//! grouped embedding streams, and questionnaire scores linked to one pattern.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, OslqScheme, Phase, Role, StreamKey, Subscale, Utterance};
use crate::embed::EmbeddingMatrix;
use crate::error::Result;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Isotropic Gaussian blobs. Centers are redrawn until every pair is at
/// least `min_separation` apart. Returns the matrix and the true labels.
pub fn gaussian_blobs(
    per_blob: usize,
    n_blobs: usize,
    dim: usize,
    sigma: f64,
    min_separation: f64,
    seed: u64,
) -> (EmbeddingMatrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spread = min_separation;
    let centers: Vec<Vec<f64>> = loop {
        let c: Vec<Vec<f64>> = (0..n_blobs)
            .map(|_| (0..dim).map(|_| normal(&mut rng) * spread).collect())
            .collect();
        let ok = (0..n_blobs)
            .all(|i| (i + 1..n_blobs).all(|j| crate::stats::euclidean(&c[i], &c[j]) >= min_separation));
        if ok {
            break c;
        }
    };
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (g, c) in centers.iter().enumerate() {
        for _ in 0..per_blob {
            ids.push(format!("p{}", ids.len()));
            rows.push(c.iter().map(|&m| (m + sigma * normal(&mut rng)) as f32).collect());
            labels.push(g);
        }
    }
    let matrix = EmbeddingMatrix::from_rows(ids, rows).expect("generated rows are valid");
    (matrix, labels)
}

/// Random group centers with unit-variance coordinates, so that distinct
/// centers are nearly orthogonal in high dimension.
fn centers(rng: &mut ChaCha8Rng, groups: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..groups).map(|_| (0..dim).map(|_| normal(rng)).collect()).collect()
}

fn member(rng: &mut ChaCha8Rng, center: &[f64], noise: f64) -> Vec<f32> {
    center.iter().map(|&m| (m + noise * normal(rng)) as f32).collect()
}

/// One stream of `n` points spread evenly over `groups` semantic groups.
pub fn planted_stream(n: usize, groups: usize, dim: usize, noise: f64, seed: u64) -> (EmbeddingMatrix, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = centers(&mut rng, groups, dim);
    let mut ids = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    let labels: Vec<usize> = (0..n).map(|i| i % groups).collect();
    for (i, &g) in labels.iter().enumerate() {
        ids.push(format!("p{i}"));
        rows.push(member(&mut rng, &c[g], noise));
    }
    (EmbeddingMatrix::from_rows(ids, rows).expect("generated rows are valid"), labels)
}

/// A planted link between one group of one stream and one subscale: a
/// student's chance of producing that group grows with the subscale latent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedLink {
    pub stream: StreamKey,
    pub group: usize,
    pub subscale: Subscale,
    /// Log-odds slope per standard deviation of the latent.
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_students: usize,
    pub logs_per_student: usize,
    /// Utterances per log in each stream.
    pub per_log: usize,
    pub groups: BTreeMap<StreamKey, usize>,
    pub dim: usize,
    pub noise: f64,
    pub link: Option<PlantedLink>,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_students: 98,
            logs_per_student: 1,
            per_log: 3,
            groups: [
                (StreamKey::PreQ, 5),
                (StreamKey::PostQ, 9),
                (StreamKey::PreR, 2),
                (StreamKey::PostR, 6),
            ]
            .into_iter()
            .collect(),
            dim: 32,
            noise: 0.35,
            link: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub vectors: EmbeddingMatrix,
    /// Questionnaire CSV under the default scheme.
    pub oslq_csv: String,
    /// Per-student standardized latent for each subscale.
    pub latents: BTreeMap<String, BTreeMap<Subscale, f64>>,
    /// Group centers per stream (original space).
    pub centers: BTreeMap<StreamKey, Vec<Vec<f64>>>,
    /// Planted group of every utterance.
    pub groups: BTreeMap<String, usize>,
}

fn phase_role(stream: StreamKey) -> (Phase, Role) {
    match stream {
        StreamKey::PreQ => (Phase::Pre, Role::Student),
        StreamKey::PostQ => (Phase::Post, Role::Student),
        StreamKey::PreR => (Phase::Pre, Role::Ai),
        StreamKey::PostR => (Phase::Post, Role::Ai),
    }
}

fn pick_group(rng: &mut ChaCha8Rng, groups: usize, boosted: Option<(usize, f64)>) -> usize {
    let weights: Vec<f64> = (0..groups)
        .map(|g| match boosted {
            Some((b, logit)) if b == g => logit.exp(),
            _ => 1.0,
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (g, w) in weights.iter().enumerate() {
        if u < *w {
            return g;
        }
        u -= w;
    }
    groups - 1
}

/// Generates a corpus, its embeddings, and questionnaire responses.
pub fn synthetic_corpus(spec: &CorpusSpec) -> Result<SyntheticCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: BTreeMap<StreamKey, Vec<Vec<f64>>> =
        spec.groups.iter().map(|(&s, &g)| (s, centers(&mut rng, g, spec.dim))).collect();
    let mut latents = BTreeMap::new();
    for s in 0..spec.n_students {
        let z: BTreeMap<Subscale, f64> = Subscale::ALL.iter().map(|&k| (k, normal(&mut rng))).collect();
        latents.insert(format!("s{s:03}"), z);
    }
    let mut utterances = Vec::new();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut groups = BTreeMap::new();
    for (student, z) in &latents {
        for l in 0..spec.logs_per_student {
            let log_id = format!("{student}_l{l}");
            for (&stream, c) in &centers {
                let (phase, role) = phase_role(stream);
                let boost = spec
                    .link
                    .filter(|link| link.stream == stream)
                    .map(|link| (link.group, link.strength * z[&link.subscale]));
                for k in 0..spec.per_log {
                    let g = pick_group(&mut rng, c.len(), boost);
                    let id = format!("{log_id}_{}_{k}", stream.as_str());
                    utterances.push(Utterance {
                        id: id.clone(),
                        student_id: student.clone(),
                        log_id: log_id.clone(),
                        week: Some(l as u32 + 1),
                        phase,
                        role,
                        text: format!("{} topic {g} remark {k}", stream.as_str()),
                    });
                    rows.push(member(&mut rng, &c[g], spec.noise));
                    groups.insert(id.clone(), g);
                    ids.push(id);
                }
            }
        }
    }
    let oslq_csv = questionnaire_csv(&latents, &OslqScheme::default(), &mut rng);
    Ok(SyntheticCorpus {
        corpus: Corpus::new(utterances)?,
        vectors: EmbeddingMatrix::from_rows(ids, rows)?,
        oslq_csv,
        latents,
        centers,
        groups,
    })
}

/// Likert responses: round(3 + 0.9·latent + 0.5·noise), clamped to the scheme bounds.
fn questionnaire_csv(
    latents: &BTreeMap<String, BTreeMap<Subscale, f64>>,
    scheme: &OslqScheme,
    rng: &mut ChaCha8Rng,
) -> String {
    let mut columns: Vec<(String, Subscale)> = scheme
        .subscales
        .iter()
        .flat_map(|(&s, items)| items.iter().map(move |i| (i.clone(), s)))
        .collect();
    columns.sort_by_key(|(c, _)| c.trim_start_matches("item").parse::<usize>().unwrap_or(usize::MAX));
    let mut out = String::from("student_id");
    for (c, _) in &columns {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for (student, z) in latents {
        out.push_str(student);
        for (_, s) in &columns {
            let v = (3.0 + 0.9 * z[s] + 0.5 * normal(rng))
                .round()
                .clamp(scheme.min_response, scheme.max_response);
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
