//! Documents, queries, relevance judgments and the lexical tooling around them.

mod bm25;
mod io;
mod pseudo;
mod synth;

use std::collections::{BTreeMap, HashMap};

pub use bm25::{Bm25Index, BM25_B, BM25_K1};
pub use io::{
    load_corpus, load_pseudo_queries, load_qrels, load_queries, load_teacher, write_corpus,
    write_pseudo_queries, write_qrels, write_queries, write_teacher,
};
pub use pseudo::{generate_pseudo_queries, PseudoQueryConfig, PseudoQuerySet};
pub use synth::{generate_synthetic_corpus, SyntheticConfig, SyntheticData};

use crate::error::{Error, Result};

/// Token id reserved for words outside the corpus vocabulary.
pub const UNK: u32 = 0;
const UNK_WORD: &str = "[unk]";

/// Whitespace split + lowercase.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Corpus-built word vocabulary. Id 0 is the unknown-word token.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary in first-occurrence order over `texts`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = Vocabulary {
            words: vec![UNK_WORD.to_string()],
            index: HashMap::from([(UNK_WORD.to_string(), UNK)]),
        };
        for text in texts {
            for w in tokenize(text) {
                if !vocab.index.contains_key(&w) {
                    vocab.index.insert(w.clone(), vocab.words.len() as u32);
                    vocab.words.push(w);
                }
            }
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() <= 1
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Maps text to token ids; unknown words become [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text)
            .map(|w| self.index.get(&w).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.word(i).unwrap_or(UNK_WORD))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub text: Vec<u32>,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub query_id: String,
    pub text: Vec<u32>,
    pub raw: String,
}

/// An immutable document collection with its vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    docs: Vec<Document>,
    by_id: HashMap<String, usize>,
    vocab: Vocabulary,
}

impl Corpus {
    /// Builds a corpus from `(doc_id, raw text)` pairs, tokenizing against a
    /// vocabulary built from the same texts.
    pub fn from_raw(entries: Vec<(String, String)>) -> Result<Self> {
        let vocab = Vocabulary::build(entries.iter().map(|(_, t)| t.as_str()));
        let mut docs = Vec::with_capacity(entries.len());
        let mut by_id = HashMap::with_capacity(entries.len());
        for (doc_id, raw) in entries {
            let text = vocab.encode(&raw);
            if text.is_empty() {
                return Err(Error::Input(format!("document {doc_id} has empty text")));
            }
            if by_id.insert(doc_id.clone(), docs.len()).is_some() {
                return Err(Error::Input(format!("duplicate doc_id {doc_id}")));
            }
            docs.push(Document { doc_id, text, raw });
        }
        Ok(Corpus { docs, by_id, vocab })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.by_id.get(doc_id).map(|&i| &self.docs[i])
    }

    pub fn index_of(&self, doc_id: &str) -> Option<usize> {
        self.by_id.get(doc_id).copied()
    }

    pub fn contains(&self, doc_id: &str) -> bool {
        self.by_id.contains_key(doc_id)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Tokenizes a query against this corpus's vocabulary.
    pub fn make_query(&self, query_id: impl Into<String>, raw: impl Into<String>) -> Result<Query> {
        let query_id = query_id.into();
        let raw = raw.into();
        let text = self.vocab.encode(&raw);
        if text.is_empty() {
            return Err(Error::Input(format!("query {query_id} has empty text")));
        }
        Ok(Query {
            query_id,
            text,
            raw,
        })
    }
}

/// Relevance judgments: query_id -> doc_id -> graded relevance (>= 1).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    map: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query_id: impl Into<String>, doc_id: impl Into<String>, rel: u32) {
        debug_assert!(rel >= 1);
        self.map
            .entry(query_id.into())
            .or_default()
            .insert(doc_id.into(), rel);
    }

    pub fn get(&self, query_id: &str) -> Option<&BTreeMap<String, u32>> {
        self.map.get(query_id)
    }

    pub fn relevance(&self, query_id: &str, doc_id: &str) -> u32 {
        self.map
            .get(query_id)
            .and_then(|m| m.get(doc_id))
            .copied()
            .unwrap_or(0)
    }

    pub fn is_relevant(&self, query_id: &str, doc_id: &str) -> bool {
        self.relevance(query_id, doc_id) > 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeMap<String, u32>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn n_pairs(&self) -> usize {
        self.map.values().map(BTreeMap::len).sum()
    }
}

/// Relevance oracle over latent vectors: rel(q, d) = <z_q, z_d>.
///
/// Stands in for a cross-encoder teacher; golden margins are differences of
/// its scores.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTeacher {
    dim: usize,
    queries: HashMap<String, Vec<f64>>,
    docs: HashMap<String, Vec<f64>>,
}

impl OracleTeacher {
    pub fn new(dim: usize) -> Self {
        OracleTeacher {
            dim,
            queries: HashMap::new(),
            docs: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn add_query(&mut self, id: impl Into<String>, latent: Vec<f64>) {
        assert_eq!(latent.len(), self.dim);
        self.queries.insert(id.into(), latent);
    }

    pub fn add_doc(&mut self, id: impl Into<String>, latent: Vec<f64>) {
        assert_eq!(latent.len(), self.dim);
        self.docs.insert(id.into(), latent);
    }

    pub fn query_latent(&self, id: &str) -> Option<&[f64]> {
        self.queries.get(id).map(Vec::as_slice)
    }

    pub fn doc_latent(&self, id: &str) -> Option<&[f64]> {
        self.docs.get(id).map(Vec::as_slice)
    }

    pub fn rel(&self, query_id: &str, doc_id: &str) -> Result<f64> {
        let q = self
            .queries
            .get(query_id)
            .ok_or_else(|| Error::Missing(format!("teacher has no query {query_id}")))?;
        let d = self
            .docs
            .get(doc_id)
            .ok_or_else(|| Error::Missing(format!("teacher has no document {doc_id}")))?;
        Ok(crate::util::dot(q, d))
    }

    /// Golden margin T = rel(q, d+) - rel(q, d-).
    pub fn margin(&self, query_id: &str, pos: &str, neg: &str) -> Result<f64> {
        Ok(self.rel(query_id, pos)? - self.rel(query_id, neg)?)
    }

    pub(crate) fn query_entries(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.queries.iter()
    }

    pub(crate) fn doc_entries(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.docs.iter()
    }
}

/// A query split together with its judgments.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySet {
    pub queries: Vec<Query>,
    pub qrels: Qrels,
}
