use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::decoder::Hit;
use crate::error::{Error, Result};
use crate::util::atomic_write;

#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub doc_id: String,
    pub score: f64,
}

impl From<&Hit> for RunEntry {
    fn from(h: &Hit) -> Self {
        RunEntry {
            doc_id: h.doc_id.clone(),
            score: h.score,
        }
    }
}

/// Ranked retrieval output per query. Lists are stored best first; rank is
/// the 1-based list position.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunFile {
    lists: BTreeMap<String, Vec<RunEntry>>,
}

impl RunFile {
    /// Adds or replaces the list for `query_id`. Scores must be finite and
    /// non-increasing, documents distinct.
    pub fn insert(&mut self, query_id: impl Into<String>, entries: Vec<RunEntry>) -> Result<()> {
        let query_id = query_id.into();
        validate(&query_id, &entries).map_err(Error::Input)?;
        self.lists.insert(query_id, entries);
        Ok(())
    }

    pub fn insert_hits(&mut self, query_id: impl Into<String>, hits: &[Hit]) -> Result<()> {
        self.insert(query_id, hits.iter().map(RunEntry::from).collect())
    }

    pub fn get(&self, query_id: &str) -> Option<&[RunEntry]> {
        self.lists.get(query_id).map(Vec::as_slice)
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &String> {
        self.lists.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &[RunEntry])> {
        self.lists.iter().map(|(q, l)| (q, l.as_slice()))
    }

    /// Number of queries.
    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    /// TREC text: `query_id Q0 doc_id rank score tag`, scores with 6 decimals.
    pub fn to_trec(&self, tag: &str) -> String {
        let mut out = String::new();
        for (q, list) in &self.lists {
            for (i, e) in list.iter().enumerate() {
                writeln!(out, "{q} Q0 {} {} {:.6} {tag}", e.doc_id, i + 1, e.score).unwrap();
            }
        }
        out
    }

    pub fn from_trec(text: &str, origin: &Path) -> Result<Self> {
        let mut lists: BTreeMap<String, Vec<RunEntry>> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let lineno = n + 1;
            let err = |msg: String| Error::parse(origin, lineno, msg);
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 6 {
                return Err(err(format!("expected 6 fields, found {}", f.len())));
            }
            let rank: usize = f[3]
                .parse()
                .map_err(|_| err(format!("bad rank {:?}", f[3])))?;
            let score: f64 = f[4]
                .parse()
                .map_err(|_| err(format!("bad score {:?}", f[4])))?;
            let list = lists.entry(f[0].to_string()).or_default();
            if rank != list.len() + 1 {
                return Err(err(format!(
                    "rank {rank} for query {} is not contiguous (expected {})",
                    f[0],
                    list.len() + 1
                )));
            }
            list.push(RunEntry {
                doc_id: f[2].to_string(),
                score,
            });
            let tail = &list[list.len().saturating_sub(2)..];
            if let Err(msg) = validate(f[0], tail) {
                return Err(err(msg));
            }
            if list[..list.len() - 1].iter().any(|e| e.doc_id == f[2]) {
                return Err(err(format!(
                    "document {} repeated for query {}",
                    f[2], f[0]
                )));
            }
        }
        Ok(RunFile { lists })
    }
}

fn validate(query_id: &str, entries: &[RunEntry]) -> std::result::Result<(), String> {
    for (i, e) in entries.iter().enumerate() {
        if !e.score.is_finite() {
            return Err(format!(
                "query {query_id}: non-finite score for {}",
                e.doc_id
            ));
        }
        if i > 0 && e.score > entries[i - 1].score {
            return Err(format!("query {query_id}: scores increase at {}", e.doc_id));
        }
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(e) = entries.iter().find(|e| !seen.insert(e.doc_id.as_str())) {
        return Err(format!("query {query_id}: document {} repeated", e.doc_id));
    }
    Ok(())
}

pub fn write_run(path: &Path, run: &RunFile, tag: &str) -> Result<()> {
    atomic_write(path, run.to_trec(tag).as_bytes())
}

pub fn read_run(path: &Path) -> Result<RunFile> {
    RunFile::from_trec(&fs::read_to_string(path)?, path)
}
