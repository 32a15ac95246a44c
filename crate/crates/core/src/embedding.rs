//! Sentence / chunk / image / object embedding matrices and the providers
//! that fill them.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::HeteroGraph;
use crate::mgem;
use crate::par::{self, Execution};

/// Rows whose norm deviates more than this from 1 are rejected on load.
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Sentence,
    Chunk,
    Image,
    Object,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Sentence, Level::Chunk, Level::Image, Level::Object];

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Sentence => "sentence",
            Level::Chunk => "chunk",
            Level::Image => "image",
            Level::Object => "object",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.mgem", self.as_str())
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a provider is asked to embed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Element {
    Text { id: String, text: String },
    Image { id: String, image_ref: String },
}

impl Element {
    pub fn id(&self) -> &str {
        match self {
            Element::Text { id, .. } | Element::Image { id, .. } => id,
        }
    }
}

pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, element: &Element) -> Result<Vec<f32>>;
}

/// L2-normalizes `v` in f64 and returns f32 values.
pub fn normalize(element: &str, v: &[f32]) -> Result<Vec<f32>> {
    let norm = v
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroVector {
            element: element.to_string(),
        });
    }
    Ok(v.iter().map(|&x| (f64::from(x) / norm) as f32).collect())
}

/// Embeds and normalizes one element, checking the dimension.
pub fn embed_normalized(provider: &dyn EmbeddingProvider, element: &Element) -> Result<Vec<f32>> {
    let raw = provider.embed(element)?;
    if raw.len() != provider.dim() {
        return Err(Error::DimensionMismatch {
            expected: provider.dim(),
            actual: raw.len(),
        });
    }
    normalize(element.id(), &raw)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub level: Level,
    pub dim: usize,
    /// Row-major, `ids.len() * dim` values.
    pub data: Vec<f32>,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceVector {
    pub level: Level,
    pub scores: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn empty(level: Level, dim: usize) -> Self {
        EmbeddingMatrix {
            level,
            dim,
            data: Vec::new(),
            ids: Vec::new(),
        }
    }

    /// Builds a matrix from already-normalized rows, checking every norm.
    pub fn from_rows(
        level: Level,
        dim: usize,
        rows: Vec<Vec<f32>>,
        ids: Vec<String>,
    ) -> Result<Self> {
        if rows.len() != ids.len() {
            return Err(Error::DimensionMismatch {
                expected: ids.len(),
                actual: rows.len(),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (row, id) in rows.iter().zip(&ids) {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            check_norm(id, row)?;
            data.extend_from_slice(row);
        }
        Ok(EmbeddingMatrix {
            level,
            dim,
            data,
            ids,
        })
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn similarities(&self, query: &[f32]) -> Result<RelevanceVector> {
        self.similarities_with(Execution::default(), query)
    }

    /// Cosine similarity of a unit query against every row, clamped at 0.
    pub fn similarities_with(&self, exec: Execution, query: &[f32]) -> Result<RelevanceVector> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: query.len(),
            });
        }
        let mut scores = vec![0.0; self.rows()];
        par::fill_indexed(exec, &mut scores, |i| dot(query, self.row(i)).max(0.0));
        Ok(RelevanceVector {
            level: self.level,
            scores,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        mgem::write(
            &dir.join(self.level.file_name()),
            self.dim,
            &self.data,
            &self.ids,
        )
    }

    pub fn read(dir: &Path, level: Level) -> Result<Self> {
        let path = dir.join(level.file_name());
        let (vf, ids) = mgem::read(&path)?;
        for (i, id) in ids.iter().enumerate() {
            let row = &vf.data[i * vf.dim..(i + 1) * vf.dim];
            check_norm(id, row).map_err(|e| Error::corrupt(&path, e.to_string()))?;
        }
        Ok(EmbeddingMatrix {
            level,
            dim: vf.dim,
            data: vf.data,
            ids,
        })
    }
}

fn check_norm(id: &str, row: &[f32]) -> Result<()> {
    let norm = row
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(Error::ProviderFailure {
            element: id.to_string(),
            reason: format!("row norm {norm} is not 1"),
        });
    }
    Ok(())
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// The four level matrices in a shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    pub dim: usize,
    pub sentence: EmbeddingMatrix,
    pub chunk: EmbeddingMatrix,
    pub image: EmbeddingMatrix,
    pub object: EmbeddingMatrix,
}

impl EmbeddingIndex {
    pub fn level(&self, level: Level) -> &EmbeddingMatrix {
        match level {
            Level::Sentence => &self.sentence,
            Level::Chunk => &self.chunk,
            Level::Image => &self.image,
            Level::Object => &self.object,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for level in Level::ALL {
            self.level(level).write(dir)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let sentence = EmbeddingMatrix::read(dir, Level::Sentence)?;
        let dim = sentence.dim;
        let chunk = EmbeddingMatrix::read(dir, Level::Chunk)?;
        let image = EmbeddingMatrix::read(dir, Level::Image)?;
        let object = EmbeddingMatrix::read(dir, Level::Object)?;
        for m in [&chunk, &image, &object] {
            if m.dim != dim && m.rows() > 0 {
                return Err(Error::corrupt(
                    dir.join(m.level.file_name()),
                    format!("dimension {} differs from sentence dimension {dim}", m.dim),
                ));
            }
        }
        Ok(EmbeddingIndex {
            dim,
            sentence,
            chunk,
            image,
            object,
        })
    }
}

/// Elements of every level in graph row order.
pub fn corpus_elements(
    graph: &HeteroGraph,
    sentence_texts: &[String],
) -> BTreeMap<Level, Vec<Element>> {
    let mut out = BTreeMap::new();
    out.insert(
        Level::Sentence,
        graph
            .sentence_ids
            .iter()
            .zip(sentence_texts)
            .map(|(id, text)| Element::Text {
                id: id.clone(),
                text: text.clone(),
            })
            .collect(),
    );
    out.insert(
        Level::Chunk,
        graph
            .chunks
            .iter()
            .map(|c| Element::Text {
                id: c.chunk_id.clone(),
                text: c.text.clone(),
            })
            .collect(),
    );
    out.insert(
        Level::Image,
        graph
            .images
            .iter()
            .map(|i| Element::Image {
                id: i.image_id.clone(),
                image_ref: i.reference().to_string(),
            })
            .collect(),
    );
    out.insert(
        Level::Object,
        graph
            .objects
            .iter()
            .map(|o| Element::Image {
                id: o.object_id.clone(),
                image_ref: if o.region_ref.is_empty() {
                    o.object_id.clone()
                } else {
                    o.region_ref.clone()
                },
            })
            .collect(),
    );
    out
}

/// Embeds every element; provider calls may run concurrently but rows are
/// committed in element order.
pub fn build_matrices(
    elements: &BTreeMap<Level, Vec<Element>>,
    provider: &dyn EmbeddingProvider,
    exec: Execution,
) -> Result<EmbeddingIndex> {
    let dim = provider.dim();
    if dim == 0 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            actual: 0,
        });
    }
    let mut built: HashMap<Level, EmbeddingMatrix> = HashMap::new();
    for level in Level::ALL {
        let items = elements.get(&level).map(Vec::as_slice).unwrap_or(&[]);
        let rows = par::map_coarse(exec, items, |e| embed_normalized(provider, e));
        let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
        let ids = items.iter().map(|e| e.id().to_string()).collect();
        built.insert(level, EmbeddingMatrix::from_rows(level, dim, rows, ids)?);
    }
    let mut take = |l| built.remove(&l).expect("all levels built");
    Ok(EmbeddingIndex {
        dim,
        sentence: take(Level::Sentence),
        chunk: take(Level::Chunk),
        image: take(Level::Image),
        object: take(Level::Object),
    })
}

/// Deterministic provider for tests and offline runs: each id hashes to a
/// seeded Gaussian direction, unless an override vector is planted for it.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureProvider {
    dim: usize,
    overrides: BTreeMap<String, Vec<f32>>,
}

impl FixtureProvider {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize) -> Self {
        FixtureProvider {
            dim,
            overrides: BTreeMap::new(),
        }
    }

    pub fn with_overrides(dim: usize, overrides: BTreeMap<String, Vec<f32>>) -> Result<Self> {
        for (id, v) in &overrides {
            if v.len() != dim {
                return Err(Error::ProviderFailure {
                    element: id.clone(),
                    reason: format!("override has {} values, expected {dim}", v.len()),
                });
            }
        }
        Ok(FixtureProvider { dim, overrides })
    }

    pub fn overrides(&self) -> &BTreeMap<String, Vec<f32>> {
        &self.overrides
    }

    pub fn hashed_vector(&self, id: &str) -> Vec<f32> {
        let digest = Sha256::digest(id.as_bytes());
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x as f32
            })
            .collect()
    }
}

impl EmbeddingProvider for FixtureProvider {
    fn id(&self) -> String {
        "fixture".to_string()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, element: &Element) -> Result<Vec<f32>> {
        Ok(match self.overrides.get(element.id()) {
            Some(v) => v.clone(),
            None => self.hashed_vector(element.id()),
        })
    }
}

/// Looks vectors up by element id in precomputed MGEM files.
#[derive(Debug, Clone, Default)]
pub struct FileProvider {
    dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

impl FileProvider {
    /// Loads every `*.mgem` file in `dir` (missing dir = empty provider).
    pub fn open(dir: &Path) -> Result<Self> {
        let mut provider = FileProvider::default();
        if !dir.is_dir() {
            return Ok(provider);
        }
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "mgem"))
            .collect();
        paths.sort();
        for p in paths {
            provider.add_file(&p)?;
        }
        Ok(provider)
    }

    pub fn add_file(&mut self, path: &Path) -> Result<()> {
        let (vf, ids) = mgem::read(path)?;
        if vf.rows == 0 {
            return Ok(());
        }
        if self.dim == 0 {
            self.dim = vf.dim;
        } else if self.dim != vf.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: vf.dim,
            });
        }
        for (i, id) in ids.into_iter().enumerate() {
            self.vectors
                .insert(id, vf.data[i * vf.dim..(i + 1) * vf.dim].to_vec());
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

impl EmbeddingProvider for FileProvider {
    fn id(&self) -> String {
        "files".to_string()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, element: &Element) -> Result<Vec<f32>> {
        self.vectors
            .get(element.id())
            .cloned()
            .ok_or_else(|| Error::ProviderFailure {
                element: element.id().to_string(),
                reason: "no precomputed vector".to_string(),
            })
    }
}

/// HTTP provider. Each element is POSTed as JSON,
/// `{"id": ..., "text": ...}` or `{"id": ..., "imageRef": ...}`, and the
/// response body must be a JSON array of `dim` numbers.
#[cfg(feature = "remote")]
#[derive(Debug, Clone)]
pub struct RemoteProvider {
    endpoint: String,
    dim: usize,
}

#[cfg(feature = "remote")]
impl RemoteProvider {
    pub fn new(endpoint: impl Into<String>, dim: usize) -> Self {
        RemoteProvider {
            endpoint: endpoint.into(),
            dim,
        }
    }
}

#[cfg(feature = "remote")]
impl EmbeddingProvider for RemoteProvider {
    fn id(&self) -> String {
        format!("remote:{}", self.endpoint)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, element: &Element) -> Result<Vec<f32>> {
        let body = match element {
            Element::Text { id, text } => serde_json::json!({ "id": id, "text": text }),
            Element::Image { id, image_ref } => {
                serde_json::json!({ "id": id, "imageRef": image_ref })
            }
        };
        let failure = |reason: String| Error::ProviderFailure {
            element: element.id().to_string(),
            reason,
        };
        let mut response = ureq::post(&self.endpoint)
            .send_json(&body)
            .map_err(|e| failure(e.to_string()))?;
        response
            .body_mut()
            .read_json::<Vec<f32>>()
            .map_err(|e| failure(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct Fixed(Vec<f32>);

    impl EmbeddingProvider for Fixed {
        fn id(&self) -> String {
            "fixed".into()
        }
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn embed(&self, _: &Element) -> Result<Vec<f32>> {
            Ok(self.0.clone())
        }
    }

    fn text(id: &str) -> Element {
        Element::Text {
            id: id.into(),
            text: id.into(),
        }
    }

    #[test]
    fn rows_are_normalized() {
        let p = Fixed(vec![3.0, 0.0]);
        assert_eq!(embed_normalized(&p, &text("a")).unwrap(), vec![1.0, 0.0]);
        let p = Fixed(vec![0.0, 3.0, 4.0]);
        assert_eq!(
            embed_normalized(&p, &text("a")).unwrap(),
            vec![0.0, 0.6, 0.8]
        );
    }

    #[test]
    fn zero_vector_is_an_error() {
        let p = Fixed(vec![0.0, 0.0]);
        assert!(matches!(
            embed_normalized(&p, &text("z")),
            Err(Error::ZeroVector { .. })
        ));
    }

    #[test]
    fn four_sentences_four_rows() {
        let p = FixtureProvider::new(8);
        let mut elements = BTreeMap::new();
        elements.insert(Level::Sentence, ["s1", "s2", "s3", "s4"].map(text).to_vec());
        let idx = build_matrices(&elements, &p, Execution::Sequential).unwrap();
        assert_eq!(idx.sentence.rows(), 4);
        assert_eq!(idx.sentence.ids, vec!["s1", "s2", "s3", "s4"]);
        assert_eq!(idx.chunk.rows(), 0);
        for i in 0..4 {
            let n = dot(idx.sentence.row(i), idx.sentence.row(i)).sqrt();
            assert!((n - 1.0).abs() < NORM_TOLERANCE);
        }
        let again = build_matrices(&elements, &p, Execution::Parallel).unwrap();
        assert_eq!(idx, again);
    }

    #[test]
    fn similarity_table() {
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.6, 0.8, 0.0],
            vec![-1.0, 0.0, 0.0],
        ];
        let m = EmbeddingMatrix::from_rows(
            Level::Chunk,
            3,
            rows.clone(),
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let q = [0.6f32, 0.0, 0.8];
        let got = m.similarities(&q).unwrap();
        // brute-force dot products, then clamp
        for (i, r) in rows.iter().enumerate() {
            let raw: f64 = r
                .iter()
                .zip(&q)
                .map(|(a, b)| f64::from(*a) * f64::from(*b))
                .sum();
            assert!((got.scores[i] - raw.max(0.0)).abs() < 1e-6);
        }
        assert!((got.scores[0] - 0.6).abs() < 1e-6);
        assert!((got.scores[1] - 0.36).abs() < 1e-6);
        assert_eq!(got.scores[2], 0.0);

        let self_sim = m.similarities(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(self_sim.scores[0], 1.0);
        let orth = m.similarities(&[0.0, 0.0, 1.0]).unwrap();
        assert!(orth.scores.iter().all(|&s| s == 0.0));
        assert!(m.similarities(&[1.0]).is_err());
    }

    #[test]
    fn fixture_provider_is_deterministic_and_overridable() {
        let p = FixtureProvider::new(16);
        let a = p.embed(&text("x")).unwrap();
        assert_eq!(a, p.embed(&text("x")).unwrap());
        assert_ne!(a, p.embed(&text("y")).unwrap());
        let mut ov = BTreeMap::new();
        ov.insert("x".to_string(), vec![1.0; 16]);
        let p = FixtureProvider::with_overrides(16, ov).unwrap();
        assert_eq!(p.embed(&text("x")).unwrap(), vec![1.0; 16]);
        let mut bad = BTreeMap::new();
        bad.insert("x".to_string(), vec![1.0; 3]);
        assert!(FixtureProvider::with_overrides(16, bad).is_err());
    }

    #[test]
    fn file_provider_reads_mgem_dir() {
        let dir = tempfile::tempdir().unwrap();
        mgem::write(&dir.path().join("q.mgem"), 2, &[0.0, 2.0], &["q".into()]).unwrap();
        let p = FileProvider::open(dir.path()).unwrap();
        assert_eq!(p.dim(), 2);
        assert_eq!(embed_normalized(&p, &text("q")).unwrap(), vec![0.0, 1.0]);
        assert!(p.embed(&text("missing")).is_err());
    }

    proptest! {
        #[test]
        fn similarity_commutes_with_row_permutation(seed in 0u64..500, shift in 0usize..5) {
            let p = FixtureProvider::new(6);
            let ids: Vec<String> = (0..5).map(|i| format!("r{seed}-{i}")).collect();
            let rows: Vec<Vec<f32>> = ids.iter().map(|id| normalize(id, &p.hashed_vector(id)).unwrap()).collect();
            let mut perm: Vec<usize> = (0..5).collect();
            perm.rotate_left(shift);
            let m = EmbeddingMatrix::from_rows(Level::Object, 6, rows.clone(), ids.clone()).unwrap();
            let pm = EmbeddingMatrix::from_rows(
                Level::Object, 6,
                perm.iter().map(|&i| rows[i].clone()).collect(),
                perm.iter().map(|&i| ids[i].clone()).collect(),
            ).unwrap();
            let q = normalize("q", &p.hashed_vector(&format!("q{seed}"))).unwrap();
            let a = m.similarities(&q).unwrap().scores;
            let b = pm.similarities(&q).unwrap().scores;
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(a[i], b[k]);
                prop_assert!((0.0..=1.0 + 1e-9).contains(&a[i]));
            }
        }
    }
}
