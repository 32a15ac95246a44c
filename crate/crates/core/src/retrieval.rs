//! Seed activation and Personalized PageRank over the heterogeneous graph.
//!
//! A query modality (text or image) is scored against the four embedding
//! levels. Each relevance vector is truncated to its per-level top-k, then
//! sentence and object scores are mean-pooled onto multimodal nodes through
//! the incidence matrices. Chunk and image scores are scaled by their level
//! weights, the two modalities are mixed, and the normalized result is the
//! restart distribution `r0` of the diffusion
//!
//! ```text
//! r_{l+1} = alpha * W r_l + (1 - alpha) * r0
//! ```
//!
//! where `W` is the column-stochastic transition matrix of the undirected,
//! weighted edge set. Probability mass that reaches a node without edges is
//! sent back according to `r0`, so every iterate sums to one.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingIndex, Level};
use crate::error::{Error, Result};
use crate::graph::{HeteroGraph, Incidence};
use crate::par::{self, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LevelTopK {
    pub chunk: usize,
    pub sentence: usize,
    pub image: usize,
    pub object: usize,
}

impl LevelTopK {
    pub fn get(&self, level: Level) -> usize {
        match level {
            Level::Sentence => self.sentence,
            Level::Chunk => self.chunk,
            Level::Image => self.image,
            Level::Object => self.object,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SeedTopK {
    pub text: LevelTopK,
    pub visual: LevelTopK,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct RetrievalConfig {
    /// Damping in (0, 1): the probability of following an edge.
    pub alpha: f64,
    /// Convergence threshold on the L1 distance of successive iterates.
    pub epsilon: f64,
    #[serde(rename = "omegaC")]
    pub omega_chunk: f64,
    #[serde(rename = "omegaI")]
    pub omega_image: f64,
    #[serde(rename = "lambdaT")]
    pub lambda_text: f64,
    #[serde(rename = "lambdaV")]
    pub lambda_visual: f64,
    pub seed_top_k: SeedTopK,
    pub answer_top_k: usize,
    pub max_iters: usize,
    /// Optional extra truncation of the fused seed vector. Off by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global_seed_top_k: Option<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        crate::config::preset("scienceqa").expect("built-in preset")
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        for (name, v) in [
            ("omegaC", self.omega_chunk),
            ("omegaI", self.omega_image),
            ("lambdaT", self.lambda_text),
            ("lambdaV", self.lambda_visual),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        if self.lambda_text + self.lambda_visual <= 0.0 {
            return bad("lambdaT + lambdaV must be positive".to_string());
        }
        for (modality, k) in [
            ("text", self.seed_top_k.text),
            ("visual", self.seed_top_k.visual),
        ] {
            for level in Level::ALL {
                if k.get(level) == 0 {
                    return bad(format!("seedTopK.{modality}.{level} must be positive"));
                }
            }
        }
        if self.answer_top_k == 0 {
            return bad("answerTopK must be positive".to_string());
        }
        if self.max_iters == 0 {
            return bad("maxIters must be positive".to_string());
        }
        if self.global_seed_top_k == Some(0) {
            return bad("globalSeedTopK must be positive when set".to_string());
        }
        Ok(())
    }
}

/// Unit query vectors per modality; an absent modality contributes nothing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryVectors {
    pub text: Option<Vec<f32>>,
    pub visual: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedDistribution {
    pub scores: Vec<f64>,
}

impl SeedDistribution {
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.scores
            .iter()
            .enumerate()
            .filter(|(_, &s)| s > 0.0)
            .map(|(i, _)| i)
    }
}

/// Keeps the `k` largest entries (ties to the lower index), zeroing the rest.
pub fn truncate_top_k(scores: &[f64], k: usize) -> Vec<f64> {
    if k >= scores.len() {
        return scores.to_vec();
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| desc_then_index(scores, a, b));
    let mut out = vec![0.0; scores.len()];
    for &i in &order[..k] {
        out[i] = scores[i];
    }
    out
}

fn desc_then_index(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b]
        .partial_cmp(&scores[a])
        .unwrap_or(Ordering::Equal)
        .then(a.cmp(&b))
}

/// `D_S⁻¹ M_SMIᵀ s_S + D_O⁻¹ M_OMIᵀ s_O`.
pub fn aggregate_to_multimodal(
    smi: &Incidence,
    sentence_scores: &[f64],
    omi: &Incidence,
    object_scores: &[f64],
) -> Result<Vec<f64>> {
    let from_sentences = smi.mean_pool(sentence_scores)?;
    let from_objects = omi.mean_pool(object_scores)?;
    Ok(from_sentences
        .iter()
        .zip(&from_objects)
        .map(|(a, b)| a + b)
        .collect())
}

/// `u = [omega_C s_C; omega_I s_I; s_M]` for one query vector.
pub fn modality_activation(
    exec: Execution,
    query: &[f32],
    top_k: &LevelTopK,
    index: &EmbeddingIndex,
    graph: &HeteroGraph,
    config: &RetrievalConfig,
) -> Result<Vec<f64>> {
    let relevance = |level: Level| -> Result<Vec<f64>> {
        let matrix = index.level(level);
        if matrix.rows() == 0 {
            return Ok(Vec::new());
        }
        let scores = matrix.similarities_with(exec, query)?.scores;
        Ok(truncate_top_k(&scores, top_k.get(level)))
    };
    let s_sentence = relevance(Level::Sentence)?;
    let s_chunk = relevance(Level::Chunk)?;
    let s_image = relevance(Level::Image)?;
    let s_object = relevance(Level::Object)?;
    check_len(Level::Chunk, s_chunk.len(), graph.chunks.len())?;
    check_len(Level::Image, s_image.len(), graph.images.len())?;
    let s_mm = aggregate_to_multimodal(&graph.smi, &s_sentence, &graph.omi, &s_object)?;

    let mut u = Vec::with_capacity(graph.node_count());
    u.extend(s_chunk.iter().map(|s| config.omega_chunk * s));
    u.extend(s_image.iter().map(|s| config.omega_image * s));
    u.extend(s_mm);
    Ok(u)
}

fn check_len(level: Level, got: usize, expected: usize) -> Result<()> {
    if got == expected {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "{level} embedding rows ({got}) do not match graph nodes ({expected})"
        )))
    }
}

pub fn activate_seeds(
    query: &QueryVectors,
    index: &EmbeddingIndex,
    graph: &HeteroGraph,
    config: &RetrievalConfig,
) -> Result<SeedDistribution> {
    activate_seeds_with(Execution::default(), query, index, graph, config)
}

/// Builds the normalized restart distribution `r0 = λ_t u_t + λ_v u_v`.
pub fn activate_seeds_with(
    exec: Execution,
    query: &QueryVectors,
    index: &EmbeddingIndex,
    graph: &HeteroGraph,
    config: &RetrievalConfig,
) -> Result<SeedDistribution> {
    if query.text.is_none() && query.visual.is_none() {
        return Err(Error::EmptyQuery);
    }
    let n = graph.node_count();
    let mut r0 = vec![0.0; n];
    let parts = [
        (
            query.text.as_ref(),
            &config.seed_top_k.text,
            config.lambda_text,
        ),
        (
            query.visual.as_ref(),
            &config.seed_top_k.visual,
            config.lambda_visual,
        ),
    ];
    for (vector, top_k, weight) in parts {
        let Some(q) = vector else { continue };
        let u = modality_activation(exec, q, top_k, index, graph, config)?;
        for (r, x) in r0.iter_mut().zip(&u) {
            *r += weight * x;
        }
    }
    if let Some(k) = config.global_seed_top_k {
        r0 = truncate_top_k(&r0, k);
    }
    let total: f64 = r0.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return Err(Error::AllZeroActivation);
    }
    for r in &mut r0 {
        *r /= total;
    }
    Ok(SeedDistribution { scores: r0 })
}

/// Column-stochastic transition matrix stored by rows (`W[i, j]` lists the
/// probability of stepping from `j` to `i`), so `W r` is a row-parallel
/// sparse product.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    values: Vec<f64>,
    dangling: Vec<bool>,
}

impl TransitionMatrix {
    pub fn from_graph(graph: &HeteroGraph) -> Self {
        let edges: Vec<(usize, usize, f64)> = graph
            .edges
            .iter()
            .map(|e| (e.src, e.dst, e.weight))
            .collect();
        Self::from_undirected(graph.node_count(), &edges)
    }

    /// Each `(a, b, w)` is traversable both ways; a self-loop counts once.
    /// Parallel edges between the same pair add up.
    pub fn from_undirected(n: usize, edges: &[(usize, usize, f64)]) -> Self {
        let mut out_weight = vec![0.0; n];
        for &(a, b, w) in edges {
            out_weight[a] += w;
            if a != b {
                out_weight[b] += w;
            }
        }
        // (row, col, value) with row = destination, col = source
        let mut triples: Vec<(usize, usize, f64)> = Vec::with_capacity(edges.len() * 2);
        for &(a, b, w) in edges {
            if out_weight[a] > 0.0 {
                triples.push((b, a, w / out_weight[a]));
            }
            if a != b && out_weight[b] > 0.0 {
                triples.push((a, b, w / out_weight[b]));
            }
        }
        triples.sort_by_key(|x| (x.0, x.1));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(triples.len());
        let mut values: Vec<f64> = Vec::with_capacity(triples.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triples {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            row_ptr[r + 1] += 1;
            cols.push(c);
            values.push(v);
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        let dangling = out_weight.iter().map(|&w| w <= 0.0).collect();
        TransitionMatrix {
            n,
            row_ptr,
            cols,
            values,
            dangling,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn is_dangling(&self, j: usize) -> bool {
        self.dangling[j]
    }

    pub fn dangling_count(&self) -> usize {
        self.dangling.iter().filter(|&&d| d).count()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[range.clone()].binary_search(&j) {
            Ok(k) => self.values[range.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n];
        for (c, v) in self.cols.iter().zip(&self.values) {
            sums[*c] += v;
        }
        sums
    }

    fn row_dot(&self, i: usize, r: &[f64]) -> f64 {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[range.clone()]
            .iter()
            .zip(&self.values[range])
            .map(|(&c, &v)| v * r[c])
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Propagation {
    pub scores: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// L1 distance of the last two iterates.
    pub residual: f64,
}

pub fn propagate(
    r0: &SeedDistribution,
    w: &TransitionMatrix,
    config: &RetrievalConfig,
) -> Result<Propagation> {
    propagate_with(Execution::default(), r0, w, config, |_, _| {})
}

/// Power iteration with personalized dangling redistribution. `observe` is
/// called with every iterate (after the update) and its 1-based number.
pub fn propagate_with(
    exec: Execution,
    r0: &SeedDistribution,
    w: &TransitionMatrix,
    config: &RetrievalConfig,
    mut observe: impl FnMut(usize, &[f64]),
) -> Result<Propagation> {
    let n = w.len();
    let seed = &r0.scores;
    if seed.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: seed.len(),
        });
    }
    let mass: f64 = seed.iter().sum();
    if (mass - 1.0).abs() > 1e-9 || seed.iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidConfig(format!(
            "seed distribution must be nonnegative and sum to 1 (sum = {mass})"
        )));
    }
    let alpha = config.alpha;
    let mut current = seed.clone();
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    for iteration in 1..=config.max_iters {
        let dangling_mass: f64 = (0..n).filter(|&j| w.dangling[j]).map(|j| current[j]).sum();
        let restart = alpha * dangling_mass + (1.0 - alpha);
        {
            let cur = &current;
            par::fill_indexed(exec, &mut next, |i| {
                alpha * w.row_dot(i, cur) + restart * seed[i]
            });
        }
        residual = current.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut current, &mut next);
        observe(iteration, &current);
        if residual <= config.epsilon {
            return Ok(Propagation {
                scores: current,
                iterations: iteration,
                converged: true,
                residual,
            });
        }
    }
    log::warn!(
        "propagation stopped after {} iterations with residual {residual:e}",
        config.max_iters
    );
    Ok(Propagation {
        scores: current,
        iterations: config.max_iters,
        converged: false,
        residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RankedChunk {
    pub rank: usize,
    pub chunk_id: String,
    pub score: f64,
}

/// Chunk block of `scores`, descending, ties by node index, first `top_k`.
pub fn rank_chunks(scores: &[f64], graph: &HeteroGraph, top_k: usize) -> Vec<RankedChunk> {
    let chunk_scores = &scores[..graph.chunks.len().min(scores.len())];
    let mut order: Vec<usize> = (0..chunk_scores.len()).collect();
    order.sort_by(|&a, &b| desc_then_index(chunk_scores, a, b));
    order
        .into_iter()
        .take(top_k)
        .enumerate()
        .map(|(rank, i)| RankedChunk {
            rank: rank + 1,
            chunk_id: graph.chunks[i].chunk_id.clone(),
            score: chunk_scores[i],
        })
        .collect()
}

/// Chunk ranking from dense similarities alone, used when no graph node is
/// activated.
pub fn dense_chunk_ranking(
    query: &QueryVectors,
    index: &EmbeddingIndex,
    graph: &HeteroGraph,
    config: &RetrievalConfig,
) -> Result<Vec<RankedChunk>> {
    let mut fused = vec![0.0; index.chunk.rows()];
    for (vector, weight) in [
        (query.text.as_ref(), config.lambda_text),
        (query.visual.as_ref(), config.lambda_visual),
    ] {
        let Some(q) = vector else { continue };
        let s = index.chunk.similarities(q)?.scores;
        for (f, x) in fused.iter_mut().zip(&s) {
            *f += weight * x;
        }
    }
    Ok(rank_chunks(&fused, graph, config.answer_top_k))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContextBlock {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Plain-text evidence block: an optional query line, then each chunk in
/// rank order under a `[rank] chunk <id> (score <s>)` header.
pub fn assemble_context(
    ranked: &[RankedChunk],
    graph: &HeteroGraph,
    query_text: Option<&str>,
) -> ContextBlock {
    if ranked.is_empty() {
        return ContextBlock {
            text: String::new(),
            warning: Some("no chunks retrieved".to_string()),
        };
    }
    let mut text = String::new();
    if let Some(q) = query_text {
        text.push_str("Query: ");
        text.push_str(q.trim());
        text.push_str("\n\n");
    }
    for (n, chunk) in ranked.iter().enumerate() {
        if n > 0 {
            text.push('\n');
        }
        let body = graph
            .chunks
            .iter()
            .find(|c| c.chunk_id == chunk.chunk_id)
            .map(|c| c.text.trim())
            .unwrap_or("");
        text.push_str(&format!(
            "[{}] chunk {} (score {:.6})\n{}\n",
            chunk.rank, chunk.chunk_id, chunk.score, body
        ));
    }
    ContextBlock {
        text,
        warning: None,
    }
}
