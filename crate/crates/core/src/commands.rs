//! The build / query / eval / inspect lifecycle on top of the library.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ProviderConfig, ProviderKind, RetrievalOverrides, RunConfig};
#[cfg(feature = "remote")]
use crate::embedding::RemoteProvider;
use crate::embedding::{
    build_matrices, corpus_elements, embed_normalized, Element, EmbeddingProvider, FileProvider,
    FixtureProvider,
};
use crate::error::{Error, Result};
use crate::eval::{load_gold, recall_at_k, EvalReport};
use crate::extract::{PrepositionMap, RelationExtractor, RelationTriplet};
use crate::graph::{build_graph, GraphOptions};
use crate::index::{load_index, write_index, BuildInfo, IndexStats, Manifest, StoredIndex};
use crate::ingest::{load_corpus, load_overrides, read_jsonl, EMBEDDINGS_DIR};
use crate::par::{self, Execution};
use crate::retrieval::{
    activate_seeds_with, assemble_context, dense_chunk_ranking, propagate_with, rank_chunks,
    ContextBlock, QueryVectors, RankedChunk, RetrievalConfig, TransitionMatrix,
};

/// Provider used while building: embeds corpus elements.
pub fn build_provider(
    cfg: &ProviderConfig,
    corpus_dir: &Path,
    overrides: BTreeMap<String, Vec<f32>>,
) -> Result<Box<dyn EmbeddingProvider>> {
    match cfg.kind {
        ProviderKind::Fixture => {
            let dim = cfg.dim.unwrap_or(FixtureProvider::DEFAULT_DIM);
            Ok(Box::new(FixtureProvider::with_overrides(dim, overrides)?))
        }
        ProviderKind::Files => {
            let p = FileProvider::open(&corpus_dir.join(EMBEDDINGS_DIR))?;
            check_dim(cfg, p.dim())?;
            Ok(Box::new(p))
        }
        ProviderKind::Remote => remote(cfg),
    }
}

/// Provider used at query time; its dimension must match the index.
pub fn query_provider(
    cfg: &ProviderConfig,
    index: &StoredIndex,
) -> Result<Box<dyn EmbeddingProvider>> {
    let dim = index.manifest.dim;
    let provider: Box<dyn EmbeddingProvider> = match cfg.kind {
        ProviderKind::Fixture => Box::new(FixtureProvider::with_overrides(
            dim,
            index.overrides.clone(),
        )?),
        ProviderKind::Files => {
            let dir = cfg.query_vectors.as_deref().ok_or_else(|| {
                Error::InvalidConfig(
                    "the files provider needs provider.queryVectors at query time".into(),
                )
            })?;
            Box::new(FileProvider::open(dir)?)
        }
        ProviderKind::Remote => remote(cfg)?,
    };
    if provider.dim() != dim && !(cfg.kind == ProviderKind::Files && provider.dim() == 0) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: provider.dim(),
        });
    }
    Ok(provider)
}

fn check_dim(cfg: &ProviderConfig, found: usize) -> Result<()> {
    match cfg.dim {
        Some(d) if found != 0 && d != found => Err(Error::DimensionMismatch {
            expected: d,
            actual: found,
        }),
        _ => Ok(()),
    }
}

#[cfg(feature = "remote")]
fn remote(cfg: &ProviderConfig) -> Result<Box<dyn EmbeddingProvider>> {
    let endpoint = cfg.endpoint.clone().ok_or_else(|| {
        Error::InvalidConfig("the remote provider needs provider.endpoint".into())
    })?;
    let dim = cfg
        .dim
        .ok_or_else(|| Error::InvalidConfig("the remote provider needs provider.dim".into()))?;
    Ok(Box::new(RemoteProvider::new(endpoint, dim)))
}

#[cfg(not(feature = "remote"))]
fn remote(_: &ProviderConfig) -> Result<Box<dyn EmbeddingProvider>> {
    Err(Error::InvalidConfig(
        "this build has no remote provider (enable the `remote` feature)".into(),
    ))
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct BuildSummary {
    pub index_dir: PathBuf,
    pub manifest: Manifest,
    pub warnings: Vec<String>,
}

pub fn extract_all(
    exec: Execution,
    sentences: &[crate::extract::ParsedSentence],
    prepositions: &PrepositionMap,
) -> Result<Vec<RelationTriplet>> {
    let mut map = PrepositionMap::default();
    map.0.extend(prepositions.0.clone());
    let extractor = RelationExtractor::new(map);
    let per_sentence = par::map_coarse(exec, sentences, |s| extractor.extract(s));
    let mut out = Vec::new();
    for t in per_sentence {
        out.extend(t?);
    }
    Ok(out)
}

pub fn cmd_build(corpus_dir: &Path, index_dir: &Path, cfg: &RunConfig) -> Result<BuildSummary> {
    cfg.validate()?;
    let exec = Execution::default();
    let ingested = load_corpus(corpus_dir)?;
    let corpus = &ingested.corpus;
    let triplets = extract_all(exec, &corpus.sentences, &cfg.preposition_map)?;
    let graph = build_graph(
        corpus,
        &triplets,
        GraphOptions {
            tau: cfg.tau,
            strict_grounded_nodes: cfg.strict_grounded_nodes,
        },
    )?;
    let overrides = match cfg.provider.kind {
        ProviderKind::Fixture => load_overrides(corpus_dir)?,
        _ => BTreeMap::new(),
    };
    let provider = build_provider(&cfg.provider, corpus_dir, overrides.clone())?;
    let elements = corpus_elements(&graph, &ingested.sentence_texts);
    let embeddings = build_matrices(&elements, provider.as_ref(), exec)?;
    let info = BuildInfo {
        tau: cfg.tau,
        strict_grounded_nodes: cfg.strict_grounded_nodes,
        provider_id: provider.id(),
        object_embedding_source: cfg.object_embedding_source,
    };
    let manifest = write_index(index_dir, &graph, &embeddings, &triplets, &overrides, &info)?;
    log::info!(
        "built index: {} chunks, {} images, {} multimodal nodes, {} edges",
        manifest.chunks,
        manifest.images,
        manifest.multimodal_nodes,
        manifest.edges
    );
    Ok(BuildSummary {
        index_dir: index_dir.to_path_buf(),
        manifest,
        warnings: ingested.warnings,
    })
}

/// One line of a queries file, or the argument of `query`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct QueryRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_query_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_overrides: Option<RetrievalOverrides>,
}

impl QueryRequest {
    /// Provider elements for each modality. A text query is embedded under
    /// its query id when one is given (so fixture vectors can be planted per
    /// query), otherwise under its own text; an image query under its ref.
    pub fn elements(&self) -> (Option<Element>, Option<Element>) {
        let text = self.text_query.as_ref().map(|t| Element::Text {
            id: self.query_id.clone().unwrap_or_else(|| t.clone()),
            text: t.clone(),
        });
        let image = self.image_query_ref.as_ref().map(|r| Element::Image {
            id: r.clone(),
            image_ref: r.clone(),
        });
        (text, image)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct QueryResult {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub query_id: Option<String>,
    pub chunks: Vec<RankedChunk>,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
    /// `"dense"` when no graph node was activated and the ranking comes
    /// from chunk similarities alone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
    pub context: ContextBlock,
}

/// A loaded index with its transition matrix, ready to answer queries.
pub struct Engine {
    pub index: StoredIndex,
    pub transition: TransitionMatrix,
    pub provider: Box<dyn EmbeddingProvider>,
    pub exec: Execution,
}

impl Engine {
    pub fn open(index_dir: &Path, cfg: &RunConfig) -> Result<Self> {
        let index = load_index(index_dir)?;
        let provider = query_provider(&cfg.provider, &index)?;
        let transition = TransitionMatrix::from_graph(&index.graph);
        Ok(Engine {
            index,
            transition,
            provider,
            exec: Execution::default(),
        })
    }

    pub fn query(&self, req: &QueryRequest, base: &RetrievalConfig) -> Result<QueryResult> {
        let config = match &req.config_overrides {
            Some(o) => o.apply(base)?,
            None => *base,
        };
        let (text, image) = req.elements();
        let embed = |e: Option<Element>| -> Result<Option<Vec<f32>>> {
            e.map(|e| embed_normalized(self.provider.as_ref(), &e))
                .transpose()
        };
        let vectors = QueryVectors {
            text: embed(text)?,
            visual: embed(image)?,
        };
        let graph = &self.index.graph;
        let emb = &self.index.embeddings;
        let (chunks, iterations, converged, residual, fallback) =
            match activate_seeds_with(self.exec, &vectors, emb, graph, &config) {
                Ok(r0) => {
                    let p = propagate_with(self.exec, &r0, &self.transition, &config, |_, _| {})?;
                    let ranked = rank_chunks(&p.scores, graph, config.answer_top_k);
                    (ranked, p.iterations, p.converged, p.residual, None)
                }
                Err(Error::AllZeroActivation) => {
                    log::warn!("no graph node activated; ranking chunks by similarity");
                    let ranked = dense_chunk_ranking(&vectors, emb, graph, &config)?;
                    (ranked, 0, true, 0.0, Some("dense".to_string()))
                }
                Err(e) => return Err(e),
            };
        let context = assemble_context(&chunks, graph, req.text_query.as_deref());
        Ok(QueryResult {
            query_id: req.query_id.clone(),
            chunks,
            iterations,
            converged,
            residual,
            fallback,
            context,
        })
    }
}

pub fn cmd_query(index_dir: &Path, req: &QueryRequest, cfg: &RunConfig) -> Result<QueryResult> {
    let engine = Engine::open(index_dir, cfg)?;
    engine.query(req, &cfg.retrieval_config()?)
}

pub fn load_queries(path: &Path) -> Result<Vec<QueryRequest>> {
    let name = path.display().to_string();
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (line, q) in read_jsonl::<QueryRequest>(path)? {
        let Some(id) = &q.query_id else {
            return Err(Error::schema(&name, line, "queryId is required"));
        };
        if !seen.insert(id.clone()) {
            return Err(Error::schema(
                &name,
                line,
                format!("duplicate queryId `{id}`"),
            ));
        }
        out.push(q);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct EvalOutput {
    #[serde(flatten)]
    pub report: EvalReport,
    pub unconverged_queries: usize,
    pub dense_fallbacks: usize,
    pub runtime_seconds: f64,
}

pub fn cmd_eval(
    index_dir: &Path,
    queries: &Path,
    gold: &Path,
    cfg: &RunConfig,
    ks: &[usize],
) -> Result<EvalOutput> {
    let started = std::time::Instant::now();
    let engine = Engine::open(index_dir, cfg)?;
    let mut base = cfg.retrieval_config()?;
    base.answer_top_k = base.answer_top_k.max(ks.iter().copied().max().unwrap_or(0));
    let gold = load_gold(gold)?;
    let requests = load_queries(queries)?;
    let results = par::map_coarse(engine.exec, &requests, |q| engine.query(q, &base));
    let mut rankings = BTreeMap::new();
    let (mut unconverged, mut dense) = (0, 0);
    for (req, res) in requests.iter().zip(results) {
        let res = res?;
        unconverged += usize::from(!res.converged);
        dense += usize::from(res.fallback.is_some());
        let id = req.query_id.clone().expect("checked on load");
        rankings.insert(id, res.chunks.into_iter().map(|c| c.chunk_id).collect());
    }
    let known: HashSet<String> = engine
        .index
        .graph
        .chunks
        .iter()
        .map(|c| c.chunk_id.clone())
        .collect();
    let report = recall_at_k(&rankings, &gold, ks, &known)?;
    Ok(EvalOutput {
        report,
        unconverged_queries: unconverged,
        dense_fallbacks: dense,
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}

pub fn cmd_inspect(index_dir: &Path) -> Result<IndexStats> {
    Ok(load_index(index_dir)?.stats())
}
