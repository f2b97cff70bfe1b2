//! Document identifiers and the document-to-identifier map.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::atomic_write;

/// A fixed-length code sequence identifying one document.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DocId(pub Vec<u32>);

impl DocId {
    pub fn codes(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Length of the longest shared prefix.
    pub fn common_prefix(&self, other: &DocId) -> usize {
        self.0
            .iter()
            .zip(&other.0)
            .take_while(|(a, b)| a == b)
            .count()
    }
}

impl fmt::Display for DocId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Line {
    doc_id: String,
    codes: Vec<u32>,
}

/// Injective map from document ids to identifiers, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct DocIdMap {
    entries: Vec<(String, DocId)>,
    index: HashMap<String, usize>,
}

impl DocIdMap {
    /// Validates equal lengths, unique documents and unique identifiers.
    pub fn new(entries: Vec<(String, DocId)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut seen = HashSet::with_capacity(entries.len());
        let len = entries.first().map(|(_, c)| c.len());
        for (i, (doc, code)) in entries.iter().enumerate() {
            if Some(code.len()) != len || code.is_empty() {
                return Err(Error::Input(format!(
                    "identifier of {doc} has length {}, expected {}",
                    code.len(),
                    len.unwrap_or(0)
                )));
            }
            if index.insert(doc.clone(), i).is_some() {
                return Err(Error::Input(format!("document {doc} assigned twice")));
            }
            if !seen.insert(code) {
                return Err(Error::Input(format!(
                    "identifier {code} assigned to more than one document"
                )));
            }
        }
        Ok(DocIdMap { entries, index })
    }

    pub fn get(&self, doc_id: &str) -> Option<&DocId> {
        self.index.get(doc_id).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DocId)> {
        self.entries.iter().map(|(d, c)| (d.as_str(), c))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Identifier length, or 0 for an empty map.
    pub fn docid_len(&self) -> usize {
        self.entries.first().map_or(0, |(_, c)| c.len())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (doc, code) in &self.entries {
            let line = Line {
                doc_id: doc.clone(),
                codes: code.0.clone(),
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        atomic_write(path, out.as_bytes())
    }

    pub fn load_jsonl(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let line: Line =
                serde_json::from_str(raw).map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            entries.push((line.doc_id, DocId(line.codes)));
        }
        Self::new(entries).map_err(|e| Error::parse(path, 0, e.to_string()))
    }
}
