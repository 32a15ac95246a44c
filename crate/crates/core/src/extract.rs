//! Rule-based relation extraction over dependency parses.
//!
//! Relations are read off the dependency tree of each sentence by two rule
//! families, tried in a fixed order for every pair of relational entities:
//!
//! 1. verb-centric: subject/object of one verb, verb + preposition, and the
//!    `by`-passive which is rewritten into the active voice;
//! 2. noun-centric: appositions and noun-adposition-noun attachments.
//!
//! Predicates are built from lowercase lemmas plus a small set of connectors
//! (`not_`, `_<prep>`, `is_also`, mapped spatial predicates, `rel_<prep>`).

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// NER labels that never take part in a relation.
pub const NON_RELATIONAL_LABELS: [&str; 4] = ["ORDINAL", "CARDINAL", "PERCENT", "QUANTITY"];

const SUBJECT_DEPS: [&str; 2] = ["nsubj", "csubj"];
const OBJECT_DEPS: [&str; 3] = ["dobj", "obj", "attr"];
const PASSIVE_SUBJECT_DEP: &str = "nsubjpass";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepToken {
    pub index: usize,
    pub text: String,
    pub lemma: String,
    pub pos: String,
    #[serde(rename = "dep")]
    pub dep_label: String,
    #[serde(rename = "head")]
    pub head_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EntityMention {
    /// Inclusive token range `[start, end]`.
    pub token_span: (usize, usize),
    pub surface: String,
    pub label: String,
    pub root_index: usize,
}

impl EntityMention {
    pub fn key(&self) -> String {
        canonical_key(&self.surface)
    }

    pub fn is_relational(&self) -> bool {
        !NON_RELATIONAL_LABELS.contains(&self.label.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ParsedSentence {
    pub sentence_id: String,
    pub chunk_id: String,
    pub tokens: Vec<DepToken>,
    #[serde(default)]
    pub entities: Vec<EntityMention>,
}

impl ParsedSentence {
    /// Plain text of the sentence, tokens joined by single spaces.
    pub fn text(&self) -> String {
        self.tokens
            .iter()
            .map(|t| t.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Checks that head links form a single tree rooted at a self-headed token.
    pub fn validate_tree(&self) -> Result<()> {
        let n = self.tokens.len();
        let malformed = |reason: String| Error::MalformedTree {
            sentence_id: self.sentence_id.clone(),
            reason,
        };
        let mut roots = 0;
        for (i, tok) in self.tokens.iter().enumerate() {
            if tok.index != i {
                return Err(malformed(format!(
                    "token at position {i} carries index {}",
                    tok.index
                )));
            }
            if tok.head_index >= n {
                return Err(malformed(format!(
                    "token {i} has head {} outside the sentence",
                    tok.head_index
                )));
            }
            if tok.head_index == i {
                roots += 1;
            }
        }
        if n > 0 && roots != 1 {
            return Err(malformed(format!(
                "expected exactly one root, found {roots}"
            )));
        }
        for start in 0..n {
            let mut cur = start;
            let mut steps = 0;
            while self.tokens[cur].head_index != cur {
                cur = self.tokens[cur].head_index;
                steps += 1;
                if steps > n {
                    return Err(malformed(format!("head links from token {start} cycle")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RelationTriplet {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub sentence_id: String,
}

/// Case-folded, whitespace-normalized surface form.
pub fn canonical_key(surface: &str) -> String {
    surface
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn filter_relational_entities(entities: &[EntityMention]) -> Vec<EntityMention> {
    entities
        .iter()
        .filter(|e| e.is_relational())
        .cloned()
        .collect()
}

/// Maps a preposition lemma to the predicate used by noun-adposition-noun
/// structures. Unmapped prepositions become `rel_<prep>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrepositionMap(pub BTreeMap<String, String>);

impl Default for PrepositionMap {
    fn default() -> Self {
        let pairs = [
            ("in", "located_in"),
            ("at", "located_in"),
            ("of", "rel_of"),
            ("for", "rel_for"),
        ];
        PrepositionMap(
            pairs
                .into_iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        )
    }
}

impl PrepositionMap {
    pub fn predicate_for(&self, preposition: &str) -> String {
        let prep = normalize_lemma(preposition);
        match self.0.get(&prep) {
            Some(p) => p.clone(),
            None => format!("rel_{prep}"),
        }
    }
}

fn normalize_lemma(lemma: &str) -> String {
    lemma
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("_")
}

/// Stateless extractor parameterized by the preposition map.
#[derive(Debug, Clone, Default)]
pub struct RelationExtractor {
    prepositions: PrepositionMap,
}

struct Tree<'a> {
    tokens: &'a [DepToken],
}

impl<'a> Tree<'a> {
    fn head(&self, i: usize) -> usize {
        self.tokens[i].head_index
    }

    fn dep(&self, i: usize) -> &str {
        &self.tokens[i].dep_label
    }

    fn is_verb(&self, i: usize) -> bool {
        matches!(self.tokens[i].pos.as_str(), "VERB" | "AUX")
    }

    fn is_adp(&self, i: usize) -> bool {
        self.tokens[i].pos == "ADP"
    }

    fn lemma(&self, i: usize) -> String {
        normalize_lemma(&self.tokens[i].lemma)
    }

    fn is_negated(&self, v: usize) -> bool {
        self.tokens
            .iter()
            .any(|t| t.index != v && t.head_index == v && t.dep_label == "neg")
    }

    fn verb_predicate(&self, v: usize) -> String {
        if self.is_negated(v) {
            format!("not_{}", self.lemma(v))
        } else {
            self.lemma(v)
        }
    }

    /// The verb governing `token` when `token` has one of `deps` under a verb.
    fn governing_verb(&self, token: usize, deps: &[&str]) -> Option<usize> {
        let v = self.head(token);
        (v != token && deps.contains(&self.dep(token)) && self.is_verb(v)).then_some(v)
    }

    /// The adposition `token` is the object of.
    fn adposition_of(&self, token: usize) -> Option<usize> {
        let p = self.head(token);
        (p != token && self.dep(token) == "pobj" && self.is_adp(p)).then_some(p)
    }
}

impl RelationExtractor {
    pub fn new(prepositions: PrepositionMap) -> Self {
        RelationExtractor { prepositions }
    }

    pub fn prepositions(&self) -> &PrepositionMap {
        &self.prepositions
    }

    /// Extracts triplets from one sentence. Pairs are visited in mention
    /// order; the first rule that fires wins for a pair.
    pub fn extract(&self, sentence: &ParsedSentence) -> Result<Vec<RelationTriplet>> {
        sentence.validate_tree()?;
        let entities = filter_relational_entities(&sentence.entities);
        let mut out = Vec::new();
        if entities.len() < 2 {
            return Ok(out);
        }
        let mut seen: HashSet<(String, String)> = HashSet::new();
        for i in 0..entities.len() {
            for j in (i + 1)..entities.len() {
                let (e1, e2) = (&entities[i], &entities[j]);
                if e1.key() == e2.key() {
                    continue;
                }
                let triplet = self
                    .verb_centric_rule(e1, e2, sentence)
                    .or_else(|| self.noun_centric_rule(e1, e2, sentence));
                if let Some(t) = triplet {
                    if seen.insert((t.subject.clone(), t.object.clone())) {
                        out.push(t);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn verb_centric_rule(
        &self,
        e1: &EntityMention,
        e2: &EntityMention,
        sentence: &ParsedSentence,
    ) -> Option<RelationTriplet> {
        let tree = Tree {
            tokens: &sentence.tokens,
        };
        let make = |subj: &EntityMention, pred: String, obj: &EntityMention| RelationTriplet {
            subject: subj.key(),
            predicate: pred,
            object: obj.key(),
            sentence_id: sentence.sentence_id.clone(),
        };
        let orientations = [(e1, e2), (e2, e1)];

        // subject and object of one verb
        for (s, o) in orientations {
            let (Some(v1), Some(v2)) = (
                tree.governing_verb(s.root_index, &SUBJECT_DEPS),
                tree.governing_verb(o.root_index, &OBJECT_DEPS),
            ) else {
                continue;
            };
            if v1 == v2 {
                return Some(make(s, tree.verb_predicate(v1), o));
            }
        }

        // verb + preposition, active voice or a non-agentive passive
        let any_subject = [SUBJECT_DEPS[0], SUBJECT_DEPS[1], PASSIVE_SUBJECT_DEP];
        for (s, o) in orientations {
            let Some(v) = tree.governing_verb(s.root_index, &any_subject) else {
                continue;
            };
            let Some(p) = tree.adposition_of(o.root_index) else {
                continue;
            };
            if tree.head(p) != v || p == v {
                continue;
            }
            let prep = tree.lemma(p);
            if tree.dep(s.root_index) == PASSIVE_SUBJECT_DEP && prep == "by" {
                continue;
            }
            return Some(make(s, format!("{}_{prep}", tree.verb_predicate(v)), o));
        }

        // `by`-passive: the agent becomes the subject
        for (s, o) in orientations {
            let Some(v) = tree.governing_verb(s.root_index, &[PASSIVE_SUBJECT_DEP]) else {
                continue;
            };
            let Some(p) = tree.adposition_of(o.root_index) else {
                continue;
            };
            if tree.head(p) == v && tree.lemma(p) == "by" {
                return Some(make(o, tree.verb_predicate(v), s));
            }
        }

        if let (Some(p1), Some(p2)) = (
            tree.adposition_of(e1.root_index),
            tree.adposition_of(e2.root_index),
        ) {
            if tree.head(p1) == tree.head(p2) && tree.is_verb(tree.head(p1)) {
                log::debug!(
                    "sentence {}: unmatched symmetric prepositional pattern between `{}` and `{}`",
                    sentence.sentence_id,
                    e1.surface,
                    e2.surface
                );
            }
        }
        None
    }

    pub fn noun_centric_rule(
        &self,
        e1: &EntityMention,
        e2: &EntityMention,
        sentence: &ParsedSentence,
    ) -> Option<RelationTriplet> {
        let tree = Tree {
            tokens: &sentence.tokens,
        };
        let make = |subj: &EntityMention, pred: String, obj: &EntityMention| RelationTriplet {
            subject: subj.key(),
            predicate: pred,
            object: obj.key(),
            sentence_id: sentence.sentence_id.clone(),
        };
        let orientations = [(e1, e2), (e2, e1)];

        for (head, dependent) in orientations {
            let r = dependent.root_index;
            if tree.dep(r) == "appos" && tree.head(r) == head.root_index && r != head.root_index {
                return Some(make(head, "is_also".to_string(), dependent));
            }
        }

        for (head, dependent) in orientations {
            let Some(p) = tree.adposition_of(dependent.root_index) else {
                continue;
            };
            let governor = tree.head(p);
            if governor == head.root_index && governor != p && !tree.is_verb(governor) {
                let predicate = self.prepositions.predicate_for(&sentence.tokens[p].lemma);
                return Some(make(head, predicate, dependent));
            }
        }
        None
    }
}

/// Convenience wrapper using the default preposition map.
pub fn extract_relations(sentence: &ParsedSentence) -> Result<Vec<RelationTriplet>> {
    RelationExtractor::default().extract(sentence)
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    fn triple(s: &str, p: &str, o: &str) -> (String, String, String) {
        (s.to_string(), p.to_string(), o.to_string())
    }

    fn spo(ts: &[RelationTriplet]) -> Vec<(String, String, String)> {
        ts.iter()
            .map(|t| (t.subject.clone(), t.predicate.clone(), t.object.clone()))
            .collect()
    }

    fn mention(surface: &str, label: &str) -> EntityMention {
        EntityMention {
            token_span: (0, 0),
            surface: surface.to_string(),
            label: label.to_string(),
            root_index: 0,
        }
    }

    #[test]
    fn filter_drops_numeric_labels() {
        let kept =
            filter_relational_entities(&[mention("Apple", "ORG"), mention("three", "CARDINAL")]);
        assert_eq!(kept, vec![mention("Apple", "ORG")]);
        assert!(filter_relational_entities(&[]).is_empty());
        assert!(
            filter_relational_entities(&[mention("5%", "PERCENT"), mention("2nd", "ORDINAL")])
                .is_empty()
        );
        assert!(filter_relational_entities(&[mention("3 kg", "QUANTITY")]).is_empty());
    }

    #[test]
    fn canonical_keys_fold_case_and_space() {
        assert_eq!(canonical_key("  Steve\tJOBS "), "steve jobs");
        assert_eq!(canonical_key("Mountain View"), "mountain view");
    }

    #[test]
    fn subject_verb_object() {
        let got = extract_relations(&steve_jobs_active()).unwrap();
        assert_eq!(spo(&got), vec![triple("steve jobs", "found", "apple")]);
        assert_eq!(got[0].sentence_id, "active");
    }

    #[test]
    fn passive_by_agent_is_inverted() {
        let got = extract_relations(&steve_jobs_passive()).unwrap();
        assert_eq!(spo(&got), vec![triple("steve jobs", "found", "apple")]);
    }

    #[test]
    fn voice_normalization() {
        let a = spo(&extract_relations(&steve_jobs_active()).unwrap());
        let p = spo(&extract_relations(&steve_jobs_passive()).unwrap());
        assert_eq!(a, p);
    }

    #[test]
    fn verb_with_preposition() {
        let s = apple_operates();
        let got = RelationExtractor::default()
            .verb_centric_rule(&s.entities[0], &s.entities[1], &s)
            .unwrap();
        assert_eq!(
            (
                got.subject.as_str(),
                got.predicate.as_str(),
                got.object.as_str()
            ),
            ("apple", "operate_in", "california")
        );
    }

    #[test]
    fn negation_prefix() {
        // hand walk: Jobs -nsubj-> found <-dobj- Apple, not -neg-> found
        let got = extract_relations(&steve_jobs_negated()).unwrap();
        assert_eq!(spo(&got), vec![triple("steve jobs", "not_found", "apple")]);
    }

    #[test]
    fn different_verbs_do_not_relate() {
        // "Jobs left and Apple grew": each entity is the subject of its own verb
        let s = sentence(
            "two-verbs",
            &[
                ("Jobs", "Jobs", "PROPN", "nsubj", 1),
                ("left", "leave", "VERB", "ROOT", 1),
                ("and", "and", "CCONJ", "cc", 1),
                ("Apple", "Apple", "PROPN", "nsubj", 4),
                ("grew", "grow", "VERB", "conj", 1),
            ],
            &[(0, 0, "PERSON"), (3, 3, "ORG")],
        );
        let ex = RelationExtractor::default();
        assert!(ex
            .verb_centric_rule(&s.entities[0], &s.entities[1], &s)
            .is_none());
        assert!(ex.extract(&s).unwrap().is_empty());
    }

    #[test]
    fn apposition() {
        let s = paris_capital();
        let ex = RelationExtractor::default();
        assert!(ex
            .verb_centric_rule(&s.entities[0], &s.entities[1], &s)
            .is_none());
        let got = ex
            .noun_centric_rule(&s.entities[0], &s.entities[1], &s)
            .unwrap();
        assert_eq!(
            (
                got.subject.as_str(),
                got.predicate.as_str(),
                got.object.as_str()
            ),
            ("paris", "is_also", "capital")
        );
    }

    #[test]
    fn noun_adposition_noun_is_spatial() {
        let got = extract_relations(&google_headquarters()).unwrap();
        assert_eq!(
            spo(&got),
            vec![triple("google headquarters", "located_in", "mountain view")]
        );
    }

    #[test]
    fn unmapped_preposition_gets_rel_prefix() {
        let s = sentence(
            "near",
            &[
                ("Louvre", "Louvre", "PROPN", "ROOT", 0),
                ("near", "near", "ADP", "prep", 0),
                ("Seine", "Seine", "PROPN", "pobj", 1),
            ],
            &[(0, 0, "FAC"), (2, 2, "LOC")],
        );
        assert_eq!(
            spo(&extract_relations(&s).unwrap()),
            vec![triple("louvre", "rel_near", "seine")]
        );
        let mut map = PrepositionMap::default();
        map.0.insert("near".into(), "located_near".into());
        let got = RelationExtractor::new(map).extract(&s).unwrap();
        assert_eq!(got[0].predicate, "located_near");
    }

    #[test]
    fn no_pattern_no_triplet() {
        // "Apple and Google" coordinated nouns: no rule applies
        let s = sentence(
            "coord",
            &[
                ("Apple", "Apple", "PROPN", "ROOT", 0),
                ("and", "and", "CCONJ", "cc", 0),
                ("Google", "Google", "PROPN", "conj", 0),
            ],
            &[(0, 0, "ORG"), (2, 2, "ORG")],
        );
        let ex = RelationExtractor::default();
        assert!(ex
            .noun_centric_rule(&s.entities[0], &s.entities[1], &s)
            .is_none());
        assert!(ex.extract(&s).unwrap().is_empty());
    }

    #[test]
    fn excluded_labels_never_appear() {
        // "Apple founded three companies": CARDINAL object is dropped
        let s = sentence(
            "cardinal",
            &[
                ("Apple", "Apple", "PROPN", "nsubj", 1),
                ("founded", "found", "VERB", "ROOT", 1),
                ("three", "three", "NUM", "dobj", 1),
            ],
            &[(0, 0, "ORG"), (2, 2, "CARDINAL")],
        );
        assert!(extract_relations(&s).unwrap().is_empty());
    }

    #[test]
    fn same_key_pairs_are_skipped() {
        let s = sentence(
            "self",
            &[
                ("Apple", "Apple", "PROPN", "nsubj", 1),
                ("beat", "beat", "VERB", "ROOT", 1),
                ("APPLE", "APPLE", "PROPN", "dobj", 1),
            ],
            &[(0, 0, "ORG"), (2, 2, "ORG")],
        );
        assert!(extract_relations(&s).unwrap().is_empty());
    }

    #[test]
    fn cycle_is_malformed() {
        let mut s = steve_jobs_active();
        s.tokens[2].head_index = 3;
        s.tokens[3].head_index = 2;
        assert!(matches!(
            extract_relations(&s),
            Err(Error::MalformedTree { .. })
        ));
        let mut s = steve_jobs_active();
        s.tokens[1].head_index = 9;
        assert!(matches!(
            extract_relations(&s),
            Err(Error::MalformedTree { .. })
        ));
    }

    #[test]
    fn predicates_use_fixed_connectors() {
        for s in [
            steve_jobs_active(),
            steve_jobs_passive(),
            apple_operates(),
            paris_capital(),
            google_headquarters(),
            steve_jobs_negated(),
        ] {
            for t in extract_relations(&s).unwrap() {
                assert!(!t.predicate.is_empty());
                assert_eq!(t.predicate, t.predicate.to_lowercase());
                assert_ne!(t.subject, t.object);
            }
        }
    }
}
