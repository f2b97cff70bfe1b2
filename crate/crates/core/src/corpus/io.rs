//! Text formats: corpus/query TSV, TREC qrels, pseudo-query TSV and the
//! teacher latent file (JSON lines).

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, OracleTeacher, PseudoQuerySet, Qrels, Query};
use crate::error::{Error, Result};
use crate::util::atomic_write;

fn lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.to_string()))
        .filter(|(_, l)| !l.is_empty())
        .collect())
}

fn split_tab<'a>(path: &Path, lineno: usize, line: &'a str) -> Result<(&'a str, &'a str)> {
    let (id, text) = line
        .split_once('\t')
        .ok_or_else(|| Error::parse(path, lineno, "expected `id<TAB>text`"))?;
    if id.is_empty() {
        return Err(Error::parse(path, lineno, "empty id"));
    }
    if text.trim().is_empty() {
        return Err(Error::parse(path, lineno, format!("empty text for {id}")));
    }
    Ok((id, text))
}

fn check_single_line(field: &str, what: &str) -> Result<()> {
    if field.contains('\n') || field.contains('\r') {
        return Err(Error::Input(format!("{what} contains a newline")));
    }
    Ok(())
}

/// Reads `doc_id<TAB>text` lines.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for (lineno, line) in lines(path)? {
        let (id, text) = split_tab(path, lineno, &line)?;
        if !seen.insert(id.to_string()) {
            return Err(Error::parse(path, lineno, format!("duplicate doc_id {id}")));
        }
        entries.push((id.to_string(), text.to_string()));
    }
    Corpus::from_raw(entries)
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut out = String::new();
    for d in corpus.docs() {
        check_single_line(&d.raw, &d.doc_id)?;
        writeln!(out, "{}\t{}", d.doc_id, d.raw).unwrap();
    }
    atomic_write(path, out.as_bytes())
}

/// Reads `query_id<TAB>text` lines, tokenized against the corpus vocabulary.
pub fn load_queries(path: &Path, corpus: &Corpus) -> Result<Vec<Query>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (lineno, line) in lines(path)? {
        let (id, text) = split_tab(path, lineno, &line)?;
        if !seen.insert(id.to_string()) {
            return Err(Error::parse(
                path,
                lineno,
                format!("duplicate query_id {id}"),
            ));
        }
        out.push(corpus.make_query(id, text)?);
    }
    Ok(out)
}

pub fn write_queries(path: &Path, queries: &[Query]) -> Result<()> {
    let mut out = String::new();
    for q in queries {
        check_single_line(&q.raw, &q.query_id)?;
        writeln!(out, "{}\t{}", q.query_id, q.raw).unwrap();
    }
    atomic_write(path, out.as_bytes())
}

/// Reads TREC qrels (`query_id 0 doc_id relevance`). Zero-relevance lines are
/// valid judgments of non-relevance and are not stored.
pub fn load_qrels(path: &Path, corpus: &Corpus) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    let mut seen = HashSet::new();
    for (lineno, line) in lines(path)? {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        }
        let (qid, did) = (fields[0], fields[2]);
        let rel: i64 = fields[3]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad relevance `{}`", fields[3])))?;
        if rel < 0 {
            return Err(Error::parse(path, lineno, "negative relevance"));
        }
        if !corpus.contains(did) {
            return Err(Error::parse(path, lineno, format!("unknown doc_id {did}")));
        }
        if !seen.insert((qid.to_string(), did.to_string())) {
            return Err(Error::parse(
                path,
                lineno,
                format!("duplicate judgment {qid} {did}"),
            ));
        }
        if rel > 0 {
            qrels.insert(qid, did, rel as u32);
        }
    }
    Ok(qrels)
}

pub fn write_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    let mut out = String::new();
    for (q, docs) in qrels.iter() {
        for (d, rel) in docs {
            writeln!(out, "{q} 0 {d} {rel}").unwrap();
        }
    }
    atomic_write(path, out.as_bytes())
}

/// Reads `doc_id<TAB>pseudo_query_text` lines. Ids of the returned queries are
/// `doc_id#pq<j>` in file order per document.
pub fn load_pseudo_queries(path: &Path, corpus: &Corpus) -> Result<PseudoQuerySet> {
    let mut set = PseudoQuerySet::default();
    for (lineno, line) in lines(path)? {
        let (doc_id, text) = split_tab(path, lineno, &line)?;
        if !corpus.contains(doc_id) {
            return Err(Error::parse(
                path,
                lineno,
                format!("unknown doc_id {doc_id}"),
            ));
        }
        let j = set.count_for(doc_id);
        let q = corpus.make_query(format!("{doc_id}#pq{j}"), text)?;
        set.push(doc_id.to_string(), q);
    }
    Ok(set)
}

pub fn write_pseudo_queries(path: &Path, set: &PseudoQuerySet) -> Result<()> {
    let mut out = String::new();
    for (doc_id, q) in set.iter() {
        check_single_line(&q.raw, doc_id)?;
        writeln!(out, "{}\t{}", doc_id, q.raw).unwrap();
    }
    atomic_write(path, out.as_bytes())
}

#[derive(Serialize, Deserialize)]
struct LatentRecord {
    kind: String,
    id: String,
    latent: Vec<f64>,
}

/// Teacher file: one JSON object per line,
/// `{"kind": "query"|"doc", "id": ..., "latent": [...]}`.
pub fn write_teacher(path: &Path, teacher: &OracleTeacher) -> Result<()> {
    let mut qs: Vec<_> = teacher.query_entries().collect();
    let mut ds: Vec<_> = teacher.doc_entries().collect();
    qs.sort_by(|a, b| a.0.cmp(b.0));
    ds.sort_by(|a, b| a.0.cmp(b.0));
    let mut out = String::new();
    for (kind, entries) in [("query", qs), ("doc", ds)] {
        for (id, latent) in entries {
            let rec = LatentRecord {
                kind: kind.to_string(),
                id: id.clone(),
                latent: latent.clone(),
            };
            out.push_str(&serde_json::to_string(&rec)?);
            out.push('\n');
        }
    }
    atomic_write(path, out.as_bytes())
}

pub fn load_teacher(path: &Path) -> Result<OracleTeacher> {
    let mut teacher: Option<OracleTeacher> = None;
    for (lineno, line) in lines(path)? {
        let rec: LatentRecord =
            serde_json::from_str(&line).map_err(|e| Error::parse(path, lineno, e.to_string()))?;
        let t = teacher.get_or_insert_with(|| OracleTeacher::new(rec.latent.len()));
        if rec.latent.len() != t.dim() || rec.latent.iter().any(|x| !x.is_finite()) {
            return Err(Error::parse(
                path,
                lineno,
                "latent has wrong dimension or non-finite values",
            ));
        }
        match rec.kind.as_str() {
            "query" => t.add_query(rec.id, rec.latent),
            "doc" => t.add_doc(rec.id, rec.latent),
            other => {
                return Err(Error::parse(
                    path,
                    lineno,
                    format!("unknown kind `{other}`"),
                ))
            }
        }
    }
    Ok(teacher.unwrap_or_else(|| OracleTeacher::new(0)))
}
