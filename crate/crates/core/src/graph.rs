//! Heterogeneous multi-granularity graph: chunk, image and multimodal nodes,
//! contextual / semantic / grounding edges, and the sentence- and
//! object-to-multimodal incidence matrices.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{canonical_key, ParsedSentence, RelationTriplet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChunkRecord {
    pub chunk_id: String,
    pub text: String,
    pub sentence_ids: Vec<String>,
    #[serde(default)]
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ImageRecord {
    pub image_id: String,
    pub chunk_id: String,
    /// Opaque pointer to the pixels (path, URL, ...). Defaults to the id.
    #[serde(default, rename = "ref", skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl ImageRecord {
    pub fn reference(&self) -> &str {
        self.image_ref.as_deref().unwrap_or(&self.image_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct GroundingRecord {
    pub entity_key: String,
    pub image_id: String,
    pub object_id: String,
    #[serde(default)]
    pub region_ref: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MultimodalNode {
    pub node_id: String,
    pub entity_key: String,
    pub object_ids: BTreeSet<String>,
    pub source_chunk_ids: BTreeSet<String>,
}

/// One row of the object-multimodal incidence matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ObjectRecord {
    pub object_id: String,
    pub image_id: String,
    pub region_ref: String,
    pub confidence: f64,
    /// Column (multimodal node position) this object belongs to.
    pub node: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Contextual,
    Semantic,
    Grounding,
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 3] = [
        EdgeKind::Contextual,
        EdgeKind::Semantic,
        EdgeKind::Grounding,
    ];
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeKind::Contextual => "contextual",
            EdgeKind::Semantic => "semantic",
            EdgeKind::Grounding => "grounding",
        })
    }
}

/// Undirected weighted edge over the global node index, stored with
/// `src <= dst`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub kind: EdgeKind,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Chunk,
    Image,
    Multimodal,
}

/// Sparse binary matrix held as sorted, unique `(row, col)` coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Incidence {
    rows: usize,
    cols: usize,
    entries: Vec<(usize, usize)>,
}

impl Incidence {
    pub fn new(rows: usize, cols: usize, mut entries: Vec<(usize, usize)>) -> Result<Self> {
        entries.sort_unstable();
        entries.dedup();
        if let Some(&(r, c)) = entries.iter().find(|&&(r, c)| r >= rows || c >= cols) {
            return Err(Error::InvalidConfig(format!(
                "incidence entry ({r}, {c}) outside a {rows}x{cols} matrix"
            )));
        }
        Ok(Incidence {
            rows,
            cols,
            entries,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn entries(&self) -> &[(usize, usize)] {
        &self.entries
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.entries.binary_search(&(row, col)).is_ok()
    }

    /// Number of nonzeros per column (the pooling degree).
    pub fn column_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.cols];
        for &(_, c) in &self.entries {
            counts[c] += 1;
        }
        counts
    }

    pub fn row_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.rows];
        for &(r, _) in &self.entries {
            counts[r] += 1;
        }
        counts
    }

    pub fn column_support(&self, col: usize) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|&&(_, c)| c == col)
            .map(|&(r, _)| r)
            .collect()
    }

    /// `D⁻¹ Mᵀ s`: per-column mean of the row scores mapped onto it. Columns
    /// without any mapped row get 0.
    pub fn mean_pool(&self, row_scores: &[f64]) -> Result<Vec<f64>> {
        if row_scores.len() != self.rows {
            return Err(Error::DimensionMismatch {
                expected: self.rows,
                actual: row_scores.len(),
            });
        }
        let mut sums = vec![0.0; self.cols];
        let mut counts = vec![0usize; self.cols];
        for &(r, c) in &self.entries {
            sums[c] += row_scores[r];
            counts[c] += 1;
        }
        for (s, &n) in sums.iter_mut().zip(&counts) {
            if n > 0 {
                *s /= n as f64;
            }
        }
        Ok(sums)
    }
}

/// Validated ingestion artifacts with sentences in corpus order (chunk order,
/// then each chunk's `sentenceIds` order).
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub chunks: Vec<ChunkRecord>,
    pub sentences: Vec<ParsedSentence>,
    pub images: Vec<ImageRecord>,
    pub groundings: Vec<GroundingRecord>,
}

impl Corpus {
    pub fn new(
        chunks: Vec<ChunkRecord>,
        sentences: Vec<ParsedSentence>,
        images: Vec<ImageRecord>,
        groundings: Vec<GroundingRecord>,
    ) -> Result<Self> {
        let mut chunk_ids = HashSet::new();
        for c in &chunks {
            if !chunk_ids.insert(c.chunk_id.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate chunk id `{}`",
                    c.chunk_id
                )));
            }
        }
        let mut by_id: HashMap<String, ParsedSentence> = HashMap::new();
        for s in sentences {
            if !chunk_ids.contains(s.chunk_id.as_str()) {
                return Err(Error::DanglingReference {
                    kind: "chunk",
                    id: s.chunk_id.clone(),
                });
            }
            let id = s.sentence_id.clone();
            if by_id.insert(id.clone(), s).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "duplicate sentence id `{id}`"
                )));
            }
        }
        let mut image_ids = HashSet::new();
        for img in &images {
            if !chunk_ids.contains(img.chunk_id.as_str()) {
                return Err(Error::DanglingReference {
                    kind: "chunk",
                    id: img.chunk_id.clone(),
                });
            }
            if !image_ids.insert(img.image_id.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate image id `{}`",
                    img.image_id
                )));
            }
        }
        let mut ordered = Vec::with_capacity(by_id.len());
        for c in &chunks {
            for sid in &c.sentence_ids {
                let s = by_id.remove(sid).ok_or_else(|| Error::DanglingReference {
                    kind: "sentence",
                    id: sid.clone(),
                })?;
                if s.chunk_id != c.chunk_id {
                    return Err(Error::InvalidConfig(format!(
                        "sentence `{sid}` is listed by chunk `{}` but belongs to `{}`",
                        c.chunk_id, s.chunk_id
                    )));
                }
                ordered.push(s);
            }
            for iid in &c.image_ids {
                if !image_ids.contains(iid.as_str()) {
                    return Err(Error::DanglingReference {
                        kind: "image",
                        id: iid.clone(),
                    });
                }
            }
        }
        if let Some(orphan) = by_id.keys().min() {
            return Err(Error::InvalidConfig(format!(
                "sentence `{orphan}` is not listed by its chunk"
            )));
        }
        let mut object_ids = HashSet::new();
        for g in &groundings {
            if !image_ids.contains(g.image_id.as_str()) {
                return Err(Error::DanglingReference {
                    kind: "image",
                    id: g.image_id.clone(),
                });
            }
            if !object_ids.insert(g.object_id.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "duplicate object id `{}`",
                    g.object_id
                )));
            }
        }
        Ok(Corpus {
            chunks,
            sentences: ordered,
            images,
            groundings,
        })
    }

    /// Images in graph order: owning chunk's `imageIds` order, then any
    /// images not listed by their chunk sorted by id.
    fn ordered_images(&self) -> Vec<ImageRecord> {
        let by_id: HashMap<&str, &ImageRecord> = self
            .images
            .iter()
            .map(|i| (i.image_id.as_str(), i))
            .collect();
        let mut out = Vec::with_capacity(self.images.len());
        let mut placed = HashSet::new();
        for c in &self.chunks {
            let mut unlisted: Vec<&ImageRecord> = Vec::new();
            for iid in &c.image_ids {
                if placed.insert(iid.as_str()) {
                    out.push(by_id[iid.as_str()].clone());
                }
            }
            for img in &self.images {
                if img.chunk_id == c.chunk_id && !placed.contains(img.image_id.as_str()) {
                    unlisted.push(img);
                }
            }
            unlisted.sort_by(|a, b| a.image_id.cmp(&b.image_id));
            for img in unlisted {
                placed.insert(img.image_id.as_str());
                out.push(img.clone());
            }
        }
        out
    }
}

/// Keeps grounding records with confidence strictly above `tau`, grouped by
/// entity key.
pub fn ground_entities(
    groundings: &[GroundingRecord],
    tau: f64,
) -> BTreeMap<String, BTreeSet<String>> {
    let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for g in groundings.iter().filter(|g| g.confidence > tau) {
        out.entry(canonical_key(&g.entity_key))
            .or_default()
            .insert(g.object_id.clone());
    }
    out
}

/// One node per relational entity key in the corpus, ordered by the first
/// chunk that mentions it, then by key.
pub fn fuse_multimodal_nodes(
    corpus: &Corpus,
    grounded: &BTreeMap<String, BTreeSet<String>>,
) -> Vec<MultimodalNode> {
    let chunk_pos: HashMap<&str, usize> = corpus
        .chunks
        .iter()
        .enumerate()
        .map(|(i, c)| (c.chunk_id.as_str(), i))
        .collect();
    let mut first_seen: HashMap<String, usize> = HashMap::new();
    let mut chunks_of: HashMap<String, BTreeSet<String>> = HashMap::new();
    for s in &corpus.sentences {
        let pos = chunk_pos[s.chunk_id.as_str()];
        for e in s.entities.iter().filter(|e| e.is_relational()) {
            let key = e.key();
            let slot = first_seen.entry(key.clone()).or_insert(pos);
            *slot = (*slot).min(pos);
            chunks_of.entry(key).or_default().insert(s.chunk_id.clone());
        }
    }
    let mut keys: Vec<(usize, String)> = first_seen.into_iter().map(|(k, p)| (p, k)).collect();
    keys.sort();
    keys.into_iter()
        .map(|(_, key)| MultimodalNode {
            node_id: format!("mm:{key}"),
            object_ids: grounded.get(&key).cloned().unwrap_or_default(),
            source_chunk_ids: chunks_of.remove(&key).unwrap_or_default(),
            entity_key: key,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeteroGraph {
    pub chunks: Vec<ChunkRecord>,
    pub images: Vec<ImageRecord>,
    pub multimodal: Vec<MultimodalNode>,
    /// Row labels of the sentence incidence matrix (and sentence embeddings).
    pub sentence_ids: Vec<String>,
    /// Row labels of the object incidence matrix (and object embeddings).
    pub objects: Vec<ObjectRecord>,
    pub edges: Vec<Edge>,
    pub smi: Incidence,
    pub omi: Incidence,
}

impl HeteroGraph {
    pub fn node_count(&self) -> usize {
        self.chunks.len() + self.images.len() + self.multimodal.len()
    }

    pub fn image_offset(&self) -> usize {
        self.chunks.len()
    }

    pub fn multimodal_offset(&self) -> usize {
        self.chunks.len() + self.images.len()
    }

    pub fn kind_of(&self, global: usize) -> NodeKind {
        if global < self.image_offset() {
            NodeKind::Chunk
        } else if global < self.multimodal_offset() {
            NodeKind::Image
        } else {
            NodeKind::Multimodal
        }
    }

    /// External id of a node at a global index.
    pub fn node_id(&self, global: usize) -> &str {
        match self.kind_of(global) {
            NodeKind::Chunk => &self.chunks[global].chunk_id,
            NodeKind::Image => &self.images[global - self.image_offset()].image_id,
            NodeKind::Multimodal => &self.multimodal[global - self.multimodal_offset()].node_id,
        }
    }

    pub fn edge_histogram(&self) -> BTreeMap<EdgeKind, usize> {
        let mut h: BTreeMap<EdgeKind, usize> = EdgeKind::ALL.iter().map(|&k| (k, 0)).collect();
        for e in &self.edges {
            *h.entry(e.kind).or_default() += 1;
        }
        h
    }

    /// Undirected degree (edge count) per node.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.node_count()];
        for e in &self.edges {
            deg[e.src] += 1;
            if e.dst != e.src {
                deg[e.dst] += 1;
            }
        }
        deg
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphOptions {
    pub tau: f64,
    /// Drop entities without any grounding above `tau` from the node set.
    pub strict_grounded_nodes: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            tau: 0.5,
            strict_grounded_nodes: false,
        }
    }
}

/// Runs grounding, fusion, edge and incidence construction.
pub fn build_graph(
    corpus: &Corpus,
    triplets: &[RelationTriplet],
    options: GraphOptions,
) -> Result<HeteroGraph> {
    let grounded = ground_entities(&corpus.groundings, options.tau);
    let mut nodes = fuse_multimodal_nodes(corpus, &grounded);
    let known: HashSet<&str> = nodes.iter().map(|n| n.entity_key.as_str()).collect();
    if let Some(missing) = grounded.keys().find(|k| !known.contains(k.as_str())) {
        return Err(Error::DanglingReference {
            kind: "entity",
            id: missing.clone(),
        });
    }
    if options.strict_grounded_nodes {
        nodes.retain(|n| !n.object_ids.is_empty());
    }
    let images = corpus.ordered_images();
    let objects = collect_objects(&nodes, &corpus.groundings, options.tau);
    let edges = build_edges(corpus, &images, triplets, &nodes, &objects)?;
    let (smi, omi) = build_incidence(&corpus.sentences, &nodes, &objects)?;
    Ok(HeteroGraph {
        chunks: corpus.chunks.clone(),
        images,
        multimodal: nodes,
        sentence_ids: corpus
            .sentences
            .iter()
            .map(|s| s.sentence_id.clone())
            .collect(),
        objects,
        edges,
        smi,
        omi,
    })
}

/// Surviving objects ordered by owning node, then object id.
fn collect_objects(
    nodes: &[MultimodalNode],
    groundings: &[GroundingRecord],
    tau: f64,
) -> Vec<ObjectRecord> {
    let by_object: HashMap<&str, &GroundingRecord> = groundings
        .iter()
        .filter(|g| g.confidence > tau)
        .map(|g| (g.object_id.as_str(), g))
        .collect();
    let mut out = Vec::new();
    for (col, node) in nodes.iter().enumerate() {
        for oid in &node.object_ids {
            let g = by_object[oid.as_str()];
            out.push(ObjectRecord {
                object_id: oid.clone(),
                image_id: g.image_id.clone(),
                region_ref: g.region_ref.clone(),
                confidence: g.confidence,
                node: col,
            });
        }
    }
    out
}

/// Contextual edges (chunk-image, chunk-entity), semantic edges (entity
/// pairs of a triplet) and grounding edges (entity-image, weight = max σ).
pub fn build_edges(
    corpus: &Corpus,
    images: &[ImageRecord],
    triplets: &[RelationTriplet],
    nodes: &[MultimodalNode],
    objects: &[ObjectRecord],
) -> Result<Vec<Edge>> {
    let n_chunks = corpus.chunks.len();
    let image_offset = n_chunks;
    let mm_offset = n_chunks + images.len();
    let chunk_index: HashMap<&str, usize> = corpus
        .chunks
        .iter()
        .enumerate()
        .map(|(i, c)| (c.chunk_id.as_str(), i))
        .collect();
    let image_index: HashMap<&str, usize> = images
        .iter()
        .enumerate()
        .map(|(i, img)| (img.image_id.as_str(), image_offset + i))
        .collect();
    let node_index: HashMap<&str, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.entity_key.as_str(), mm_offset + i))
        .collect();

    let mut edges: BTreeMap<(usize, usize, EdgeKind), f64> = BTreeMap::new();
    let mut add = |a: usize, b: usize, kind: EdgeKind, w: f64| {
        let key = (a.min(b), a.max(b), kind);
        let slot = edges.entry(key).or_insert(w);
        if w > *slot {
            *slot = w;
        }
    };

    for img in images {
        let c =
            *chunk_index
                .get(img.chunk_id.as_str())
                .ok_or_else(|| Error::DanglingReference {
                    kind: "chunk",
                    id: img.chunk_id.clone(),
                })?;
        add(
            c,
            image_index[img.image_id.as_str()],
            EdgeKind::Contextual,
            1.0,
        );
    }
    for s in &corpus.sentences {
        let c = *chunk_index
            .get(s.chunk_id.as_str())
            .ok_or_else(|| Error::DanglingReference {
                kind: "chunk",
                id: s.chunk_id.clone(),
            })?;
        for e in s.entities.iter().filter(|e| e.is_relational()) {
            // absent keys were removed by strict grounding
            if let Some(&m) = node_index.get(e.key().as_str()) {
                add(c, m, EdgeKind::Contextual, 1.0);
            }
        }
    }
    for t in triplets {
        match (
            node_index.get(t.subject.as_str()),
            node_index.get(t.object.as_str()),
        ) {
            (Some(&a), Some(&b)) if a != b => add(a, b, EdgeKind::Semantic, 1.0),
            _ => {}
        }
    }
    for o in objects {
        let img =
            *image_index
                .get(o.image_id.as_str())
                .ok_or_else(|| Error::DanglingReference {
                    kind: "image",
                    id: o.image_id.clone(),
                })?;
        add(mm_offset + o.node, img, EdgeKind::Grounding, o.confidence);
    }

    Ok(edges
        .into_iter()
        .map(|((src, dst, kind), weight)| Edge {
            src,
            dst,
            kind,
            weight,
        })
        .collect())
}

/// `(M_SMI, M_OMI)` with shapes `|S|×|V_M|` and `|V_O|×|V_M|`.
pub fn build_incidence(
    sentences: &[ParsedSentence],
    nodes: &[MultimodalNode],
    objects: &[ObjectRecord],
) -> Result<(Incidence, Incidence)> {
    let col: HashMap<&str, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.entity_key.as_str(), i))
        .collect();
    let mut smi = Vec::new();
    for (row, s) in sentences.iter().enumerate() {
        for e in s.entities.iter().filter(|e| e.is_relational()) {
            if let Some(&c) = col.get(e.key().as_str()) {
                smi.push((row, c));
            }
        }
    }
    let omi = objects
        .iter()
        .enumerate()
        .map(|(r, o)| (r, o.node))
        .collect();
    Ok((
        Incidence::new(sentences.len(), nodes.len(), smi)?,
        Incidence::new(objects.len(), nodes.len(), omi)?,
    ))
}
