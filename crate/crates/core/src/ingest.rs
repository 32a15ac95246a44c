//! Ingestion contract: the JSONL files a corpus directory provides.
//!
//! | file               | one object per line                                            |
//! |--------------------|----------------------------------------------------------------|
//! | `chunks.jsonl`     | `{chunkId, text, sentenceIds, imageIds}`                       |
//! | `sentences.jsonl`  | `{sentenceId, chunkId, text?, tokens: [{index, text, lemma, pos, dep, head}]}` |
//! | `entities.jsonl`   | `{sentenceId, tokenSpan: [start, end], surface, label, rootIndex}` |
//! | `images.jsonl`     | `{imageId, chunkId, ref?}`                                     |
//! | `groundings.jsonl` | `{entityKey, imageId, objectId, regionRef, confidence}`        |
//!
//! `chunks.jsonl` and `sentences.jsonl` are required; the rest default to
//! empty. Precomputed vectors may sit under `embeddings/` as MGEM files, and
//! `embeddings/overrides.json` (`{id: [f32; dim]}`) plants vectors for the
//! fixture provider.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extract::{DepToken, EntityMention, ParsedSentence};
use crate::graph::{ChunkRecord, Corpus, GroundingRecord, ImageRecord};

pub const CHUNKS: &str = "chunks.jsonl";
pub const SENTENCES: &str = "sentences.jsonl";
pub const ENTITIES: &str = "entities.jsonl";
pub const IMAGES: &str = "images.jsonl";
pub const GROUNDINGS: &str = "groundings.jsonl";
pub const EMBEDDINGS_DIR: &str = "embeddings";
pub const OVERRIDES: &str = "overrides.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SentenceRecord {
    pub sentence_id: String,
    pub chunk_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub tokens: Vec<DepToken>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct EntityRecord {
    pub sentence_id: String,
    pub token_span: (usize, usize),
    pub surface: String,
    pub label: String,
    pub root_index: usize,
}

#[derive(Debug, Clone)]
pub struct IngestedCorpus {
    pub corpus: Corpus,
    /// Embedding text per sentence, aligned with `corpus.sentences`.
    pub sentence_texts: Vec<String>,
    pub warnings: Vec<String>,
}

/// Reads a JSONL file into `(line number, record)` pairs.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record =
            serde_json::from_str(&line).map_err(|e| Error::schema(&name, i + 1, e.to_string()))?;
        out.push((i + 1, record));
    }
    Ok(out)
}

fn read_optional<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    if path.exists() {
        read_jsonl(path)
    } else {
        Ok(Vec::new())
    }
}

fn squash(s: &str) -> String {
    s.chars().filter(|c| !c.is_whitespace()).collect()
}

pub fn load_corpus(dir: &Path) -> Result<IngestedCorpus> {
    let path = |f: &str| dir.join(f);
    let name = |f: &str| dir.join(f).display().to_string();
    let mut warnings = Vec::new();

    let chunks: Vec<(usize, ChunkRecord)> = read_jsonl(&path(CHUNKS))?;
    for (line, c) in &chunks {
        if c.sentence_ids.is_empty() {
            return Err(Error::schema(
                name(CHUNKS),
                *line,
                format!("chunk `{}` has no sentences", c.chunk_id),
            ));
        }
    }

    let sentence_records: Vec<(usize, SentenceRecord)> = read_jsonl(&path(SENTENCES))?;
    let mut sentences: Vec<ParsedSentence> = Vec::with_capacity(sentence_records.len());
    let mut texts: HashMap<String, String> = HashMap::new();
    let mut position: HashMap<String, usize> = HashMap::new();
    for (line, rec) in sentence_records {
        let s = ParsedSentence {
            sentence_id: rec.sentence_id.clone(),
            chunk_id: rec.chunk_id,
            tokens: rec.tokens,
            entities: Vec::new(),
        };
        s.validate_tree()
            .map_err(|e| Error::schema(name(SENTENCES), line, e.to_string()))?;
        if s.tokens.is_empty() {
            warnings.push(format!(
                "{}:{line}: sentence `{}` has no tokens",
                name(SENTENCES),
                s.sentence_id
            ));
        }
        if position
            .insert(s.sentence_id.clone(), sentences.len())
            .is_some()
        {
            return Err(Error::schema(
                name(SENTENCES),
                line,
                format!("duplicate sentence id `{}`", s.sentence_id),
            ));
        }
        texts.insert(s.sentence_id.clone(), rec.text.unwrap_or_else(|| s.text()));
        sentences.push(s);
    }

    let entities: Vec<(usize, EntityRecord)> = read_optional(&path(ENTITIES))?;
    for (line, e) in entities {
        let err = |m: String| Error::schema(name(ENTITIES), line, m);
        let &pos = position
            .get(&e.sentence_id)
            .ok_or_else(|| err(format!("unknown sentence `{}`", e.sentence_id)))?;
        let s = &mut sentences[pos];
        let (start, end) = e.token_span;
        if start > end || end >= s.tokens.len() {
            return Err(err(format!(
                "token span [{start}, {end}] exceeds {} tokens",
                s.tokens.len()
            )));
        }
        if e.root_index < start || e.root_index > end {
            return Err(err(format!(
                "root {} lies outside span [{start}, {end}]",
                e.root_index
            )));
        }
        let joined: String = s.tokens[start..=end]
            .iter()
            .map(|t| t.text.as_str())
            .collect();
        if squash(&e.surface) != squash(&joined) {
            return Err(err(format!(
                "surface `{}` does not match span tokens `{joined}`",
                e.surface
            )));
        }
        s.entities.push(EntityMention {
            token_span: e.token_span,
            surface: e.surface,
            label: e.label,
            root_index: e.root_index,
        });
    }

    let images: Vec<(usize, ImageRecord)> = read_optional(&path(IMAGES))?;
    let groundings: Vec<(usize, GroundingRecord)> = read_optional(&path(GROUNDINGS))?;
    for (line, g) in &groundings {
        if !(0.0..=1.0).contains(&g.confidence) {
            return Err(Error::schema(
                name(GROUNDINGS),
                *line,
                format!("confidence {} outside [0, 1]", g.confidence),
            ));
        }
    }
    let listed: HashMap<&str, &str> = chunks
        .iter()
        .flat_map(|(_, c)| {
            c.image_ids
                .iter()
                .map(move |i| (i.as_str(), c.chunk_id.as_str()))
        })
        .collect();
    for (line, img) in &images {
        if !listed.contains_key(img.image_id.as_str()) {
            warnings.push(format!(
                "{}:{line}: image `{}` is not listed by chunk `{}`",
                name(IMAGES),
                img.image_id,
                img.chunk_id
            ));
        }
    }

    let corpus = Corpus::new(
        chunks.into_iter().map(|(_, c)| c).collect(),
        sentences,
        images.into_iter().map(|(_, i)| i).collect(),
        groundings.into_iter().map(|(_, g)| g).collect(),
    )?;
    let sentence_texts = corpus
        .sentences
        .iter()
        .map(|s| texts.remove(&s.sentence_id).unwrap_or_default())
        .collect();
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(IngestedCorpus {
        corpus,
        sentence_texts,
        warnings,
    })
}

/// Planted fixture vectors from `embeddings/overrides.json`, if present.
pub fn load_overrides(dir: &Path) -> Result<BTreeMap<String, Vec<f32>>> {
    let p = dir.join(EMBEDDINGS_DIR).join(OVERRIDES);
    if !p.exists() {
        return Ok(BTreeMap::new());
    }
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::schema(p.display().to_string(), e.line(), e.to_string()))
}

/// Writes records as JSONL; used by tests and fixture generators.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
