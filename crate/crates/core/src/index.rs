//! On-disk index: the graph, the four embedding matrices and a manifest.
//!
//! ```text
//! index/
//!   manifest.json        counts, build parameters, content hash
//!   chunks.jsonl         chunk nodes in global order
//!   images.jsonl         image nodes in global order
//!   nodes.jsonl          multimodal nodes in global order
//!   sentences.jsonl      {"sentenceId": ...} rows of the sentence incidence
//!   objects.jsonl        rows of the object incidence
//!   edges.jsonl          {"src", "dst", "kind", "weight"}
//!   triplets.jsonl       extracted relations
//!   smi.coo, omi.coo     "rows cols nnz" header, then one "row col" per line
//!   sentence.mgem ...    embedding matrices plus *.ids.jsonl sidecars
//!   overrides.json       planted fixture vectors (fixture provider only)
//! ```
//!
//! The content hash is a SHA-256 over every file except the manifest, in
//! sorted name order. Writes go to a temporary sibling directory that is
//! renamed into place, guarded by a `<index>.lock` file.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ObjectEmbeddingSource;
use crate::embedding::EmbeddingIndex;
use crate::error::{Error, Result};
use crate::extract::RelationTriplet;
use crate::graph::{Edge, HeteroGraph, Incidence};
use crate::ingest::write_jsonl;
use crate::retrieval::TransitionMatrix;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
const OVERRIDES: &str = "overrides.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Manifest {
    pub format_version: u32,
    pub chunks: usize,
    pub images: usize,
    pub multimodal_nodes: usize,
    pub sentences: usize,
    pub objects: usize,
    pub edges: usize,
    pub triplets: usize,
    pub tau: f64,
    pub strict_grounded_nodes: bool,
    pub dim: usize,
    pub provider_id: String,
    pub object_embedding_source: ObjectEmbeddingSource,
    /// Seconds since the Unix epoch (`SOURCE_DATE_EPOCH` if set).
    pub build_timestamp: u64,
    pub content_hash: String,
}

/// Everything `query`, `eval` and `inspect` need.
#[derive(Debug, Clone)]
pub struct StoredIndex {
    pub manifest: Manifest,
    pub graph: HeteroGraph,
    pub embeddings: EmbeddingIndex,
    pub triplets: Vec<RelationTriplet>,
    pub overrides: BTreeMap<String, Vec<f32>>,
}

/// Build parameters recorded in the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildInfo {
    pub tau: f64,
    pub strict_grounded_nodes: bool,
    pub provider_id: String,
    pub object_embedding_source: ObjectEmbeddingSource,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct SentenceRow {
    sentence_id: String,
}

struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(path: PathBuf) -> Result<Self> {
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(LockGuard(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "index".to_string());
    dir.with_file_name(format!("{name}{suffix}"))
}

pub fn lock_path(dir: &Path) -> PathBuf {
    sibling(dir, ".lock")
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_coo(m: &Incidence) -> String {
    let (rows, cols) = m.shape();
    let mut out = format!("{rows} {cols} {}\n", m.nnz());
    for (r, c) in m.entries() {
        out.push_str(&format!("{r} {c}\n"));
    }
    out
}

fn decode_coo(path: &Path) -> Result<Incidence> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: String| Error::corrupt(path, m);
    let mut lines = text.lines();
    let header: Vec<usize> = lines
        .next()
        .ok_or_else(|| bad("missing header".into()))?
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| bad(format!("header: {e}")))?;
    let [rows, cols, nnz] = header[..] else {
        return Err(bad("header must be `rows cols nnz`".into()));
    };
    let mut entries = Vec::with_capacity(nnz);
    for (n, line) in lines.enumerate() {
        let mut it = line.split_whitespace().map(str::parse::<usize>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(r)), Some(Ok(c)), None) => entries.push((r, c)),
            _ => return Err(bad(format!("line {}: expected `row col`", n + 2))),
        }
    }
    if entries.len() != nnz {
        return Err(bad(format!(
            "header declares {nnz} entries, found {}",
            entries.len()
        )));
    }
    Incidence::new(rows, cols, entries).map_err(|e| bad(e.to_string()))
}

fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::corrupt(path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}

/// SHA-256 over the index files other than the manifest, in name order.
pub fn content_hash(dir: &Path) -> Result<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST)
        .collect();
    names.sort();
    let mut h = Sha256::new();
    for name in names {
        let p = dir.join(&name);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        h.update(name.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

fn build_timestamp() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        })
}

fn write_contents(
    dir: &Path,
    graph: &HeteroGraph,
    embeddings: &EmbeddingIndex,
    triplets: &[RelationTriplet],
    overrides: &BTreeMap<String, Vec<f32>>,
) -> Result<()> {
    write_jsonl(&dir.join("chunks.jsonl"), &graph.chunks)?;
    write_jsonl(&dir.join("images.jsonl"), &graph.images)?;
    write_jsonl(&dir.join("nodes.jsonl"), &graph.multimodal)?;
    let rows: Vec<SentenceRow> = graph
        .sentence_ids
        .iter()
        .map(|s| SentenceRow {
            sentence_id: s.clone(),
        })
        .collect();
    write_jsonl(&dir.join("sentences.jsonl"), &rows)?;
    write_jsonl(&dir.join("objects.jsonl"), &graph.objects)?;
    write_jsonl(&dir.join("edges.jsonl"), &graph.edges)?;
    write_jsonl(&dir.join("triplets.jsonl"), triplets)?;
    write_file(&dir.join("smi.coo"), encode_coo(&graph.smi))?;
    write_file(&dir.join("omi.coo"), encode_coo(&graph.omi))?;
    embeddings.write(dir)?;
    if !overrides.is_empty() {
        let json = serde_json::to_string(overrides).expect("overrides serialize");
        write_file(&dir.join(OVERRIDES), json)?;
    }
    Ok(())
}

/// Writes the index atomically, replacing any previous index in `dir`.
pub fn write_index(
    dir: &Path,
    graph: &HeteroGraph,
    embeddings: &EmbeddingIndex,
    triplets: &[RelationTriplet],
    overrides: &BTreeMap<String, Vec<f32>>,
    info: &BuildInfo,
) -> Result<Manifest> {
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let _lock = LockGuard::acquire(lock_path(dir))?;
    let tmp = sibling(dir, &format!(".tmp-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let result = (|| {
        write_contents(&tmp, graph, embeddings, triplets, overrides)?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            chunks: graph.chunks.len(),
            images: graph.images.len(),
            multimodal_nodes: graph.multimodal.len(),
            sentences: graph.sentence_ids.len(),
            objects: graph.objects.len(),
            edges: graph.edges.len(),
            triplets: triplets.len(),
            tau: info.tau,
            strict_grounded_nodes: info.strict_grounded_nodes,
            dim: embeddings.dim,
            provider_id: info.provider_id.clone(),
            object_embedding_source: info.object_embedding_source,
            build_timestamp: build_timestamp(),
            content_hash: content_hash(&tmp)?,
        };
        let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        write_file(&tmp.join(MANIFEST), json + "\n")?;
        Ok(manifest)
    })();
    let manifest = match result {
        Ok(m) => m,
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            return Err(e);
        }
    };

    let old = sibling(dir, &format!(".old-{}", std::process::id()));
    if dir.exists() {
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::corrupt(&p, e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::corrupt(
            &p,
            format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        ));
    }
    Ok(manifest)
}

/// Loads and verifies an index written by [`write_index`].
pub fn load_index(dir: &Path) -> Result<StoredIndex> {
    let manifest = read_manifest(dir)?;
    let actual = content_hash(dir)?;
    if actual != manifest.content_hash {
        return Err(Error::corrupt(
            dir.join(MANIFEST),
            format!(
                "content hash {actual} does not match manifest {}",
                manifest.content_hash
            ),
        ));
    }
    let chunks = read_rows(&dir.join("chunks.jsonl"))?;
    let images = read_rows(&dir.join("images.jsonl"))?;
    let multimodal = read_rows(&dir.join("nodes.jsonl"))?;
    let sentence_ids = read_rows::<SentenceRow>(&dir.join("sentences.jsonl"))?
        .into_iter()
        .map(|r| r.sentence_id)
        .collect();
    let objects = read_rows(&dir.join("objects.jsonl"))?;
    let edges: Vec<Edge> = read_rows(&dir.join("edges.jsonl"))?;
    let triplets = read_rows(&dir.join("triplets.jsonl"))?;
    let smi = decode_coo(&dir.join("smi.coo"))?;
    let omi = decode_coo(&dir.join("omi.coo"))?;
    let embeddings = EmbeddingIndex::read(dir)?;
    let overrides_path = dir.join(OVERRIDES);
    let overrides = if overrides_path.exists() {
        let text =
            fs::read_to_string(&overrides_path).map_err(|e| Error::io(&overrides_path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::corrupt(&overrides_path, e.to_string()))?
    } else {
        BTreeMap::new()
    };
    let graph = HeteroGraph {
        chunks,
        images,
        multimodal,
        sentence_ids,
        objects,
        edges,
        smi,
        omi,
    };
    check_consistency(dir, &manifest, &graph, &embeddings)?;
    Ok(StoredIndex {
        manifest,
        graph,
        embeddings,
        triplets,
        overrides,
    })
}

fn check_consistency(dir: &Path, m: &Manifest, g: &HeteroGraph, e: &EmbeddingIndex) -> Result<()> {
    let counts = [
        ("chunks.jsonl", m.chunks, g.chunks.len()),
        ("images.jsonl", m.images, g.images.len()),
        ("nodes.jsonl", m.multimodal_nodes, g.multimodal.len()),
        ("sentences.jsonl", m.sentences, g.sentence_ids.len()),
        ("objects.jsonl", m.objects, g.objects.len()),
        ("edges.jsonl", m.edges, g.edges.len()),
        ("chunk.mgem", g.chunks.len(), e.chunk.rows()),
        ("image.mgem", g.images.len(), e.image.rows()),
        ("sentence.mgem", g.sentence_ids.len(), e.sentence.rows()),
        ("object.mgem", g.objects.len(), e.object.rows()),
    ];
    for (file, expected, found) in counts {
        if expected != found {
            return Err(Error::corrupt(
                dir.join(file),
                format!("expected {expected} rows, found {found}"),
            ));
        }
    }
    let n = g.node_count();
    if let Some(edge) = g.edges.iter().find(|x| x.src > x.dst || x.dst >= n) {
        return Err(Error::corrupt(
            dir.join("edges.jsonl"),
            format!("edge ({}, {}) is invalid for {n} nodes", edge.src, edge.dst),
        ));
    }
    if g.smi.shape() != (g.sentence_ids.len(), g.multimodal.len()) {
        return Err(Error::corrupt(
            dir.join("smi.coo"),
            "shape disagrees with the graph",
        ));
    }
    if g.omi.shape() != (g.objects.len(), g.multimodal.len()) {
        return Err(Error::corrupt(
            dir.join("omi.coo"),
            "shape disagrees with the graph",
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DegreeSummary {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IndexStats {
    pub chunks: usize,
    pub images: usize,
    pub multimodal_nodes: usize,
    pub sentences: usize,
    pub objects: usize,
    pub triplets: usize,
    pub edges: BTreeMap<String, usize>,
    pub degree: DegreeSummary,
    pub dangling_nodes: usize,
    pub dim: usize,
    pub provider_id: String,
    pub content_hash: String,
}

impl StoredIndex {
    pub fn stats(&self) -> IndexStats {
        let g = &self.graph;
        let degrees = g.degrees();
        let degree = DegreeSummary {
            min: degrees.iter().copied().min().unwrap_or(0),
            max: degrees.iter().copied().max().unwrap_or(0),
            mean: if degrees.is_empty() {
                0.0
            } else {
                degrees.iter().sum::<usize>() as f64 / degrees.len() as f64
            },
        };
        IndexStats {
            chunks: g.chunks.len(),
            images: g.images.len(),
            multimodal_nodes: g.multimodal.len(),
            sentences: g.sentence_ids.len(),
            objects: g.objects.len(),
            triplets: self.triplets.len(),
            edges: g
                .edge_histogram()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            degree,
            dangling_nodes: TransitionMatrix::from_graph(g).dangling_count(),
            dim: self.manifest.dim,
            provider_id: self.manifest.provider_id.clone(),
            content_hash: self.manifest.content_hash.clone(),
        }
    }
}
