use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::rq::{DocId, DocIdMap};

#[derive(Debug, Clone, Default)]
struct Node {
    /// Sorted by code.
    children: Vec<(u32, usize)>,
    /// Document stored at a full-length leaf.
    doc: Option<String>,
    leaves: usize,
}

/// Trie over the assigned identifiers; every root-to-leaf path has length L.
#[derive(Debug, Clone)]
pub struct PrefixTrie {
    nodes: Vec<Node>,
    depth: usize,
}

impl PrefixTrie {
    pub fn from_entries<'a>(
        entries: impl IntoIterator<Item = (&'a str, &'a DocId)>,
    ) -> Result<Self> {
        let mut trie = PrefixTrie {
            nodes: vec![Node::default()],
            depth: 0,
        };
        let mut seen = HashSet::new();
        for (doc, id) in entries {
            if trie.nodes.len() == 1 && trie.nodes[0].leaves == 0 {
                trie.depth = id.len();
            }
            if id.len() != trie.depth || id.is_empty() {
                return Err(Error::Input(format!(
                    "identifier of {doc} has length {}, expected {}",
                    id.len(),
                    trie.depth
                )));
            }
            if !seen.insert(id.clone()) {
                return Err(Error::Input(format!("duplicate identifier {id}")));
            }
            let mut at = 0;
            trie.nodes[0].leaves += 1;
            for &c in id.codes() {
                at = match trie.nodes[at]
                    .children
                    .binary_search_by_key(&c, |&(k, _)| k)
                {
                    Ok(j) => trie.nodes[at].children[j].1,
                    Err(j) => {
                        let next = trie.nodes.len();
                        trie.nodes.push(Node::default());
                        trie.nodes[at].children.insert(j, (c, next));
                        next
                    }
                };
                trie.nodes[at].leaves += 1;
            }
            trie.nodes[at].doc = Some(doc.to_string());
        }
        Ok(trie)
    }

    /// Identifier length; 0 for an empty trie.
    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Number of stored identifiers.
    pub fn len(&self) -> usize {
        self.nodes[0].leaves
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub(crate) fn root(&self) -> usize {
        0
    }

    pub(crate) fn children(&self, node: usize) -> &[(u32, usize)] {
        &self.nodes[node].children
    }

    pub(crate) fn doc_at(&self, node: usize) -> Option<&str> {
        self.nodes[node].doc.as_deref()
    }

    fn find(&self, prefix: &[u32]) -> Option<usize> {
        let mut at = 0;
        for &c in prefix {
            let ch = &self.nodes[at].children;
            at = ch[ch.binary_search_by_key(&c, |&(k, _)| k).ok()?].1;
        }
        Some(at)
    }

    /// Sorted codes that extend `prefix` to a longer valid prefix.
    pub fn valid_extensions(&self, prefix: &[u32]) -> Result<Vec<u32>> {
        let node = self
            .find(prefix)
            .ok_or_else(|| Error::Input(format!("prefix {prefix:?} is not in the trie")))?;
        Ok(self.nodes[node].children.iter().map(|&(c, _)| c).collect())
    }

    /// Number of stored identifiers starting with `prefix` (0 if none).
    pub fn leaf_count(&self, prefix: &[u32]) -> usize {
        self.find(prefix).map_or(0, |n| self.nodes[n].leaves)
    }

    pub fn contains(&self, codes: &[u32]) -> bool {
        codes.len() == self.depth && self.find(codes).is_some()
    }

    pub fn contains_prefix(&self, prefix: &[u32]) -> bool {
        self.find(prefix).is_some()
    }

    /// Documents whose identifier starts with `prefix`, in identifier order.
    pub fn documents_under(&self, prefix: &[u32]) -> Vec<&str> {
        let mut out = Vec::new();
        let mut stack: Vec<usize> = self.find(prefix).into_iter().collect();
        while let Some(n) = stack.pop() {
            if let Some(d) = self.doc_at(n) {
                out.push(d);
            }
            stack.extend(self.nodes[n].children.iter().rev().map(|&(_, c)| c));
        }
        out
    }

    /// Document stored under a full-length identifier.
    pub fn document(&self, codes: &[u32]) -> Option<&str> {
        if codes.len() != self.depth {
            return None;
        }
        self.find(codes).and_then(|n| self.doc_at(n))
    }
}

pub fn build_trie(map: &DocIdMap) -> Result<PrefixTrie> {
    PrefixTrie::from_entries(map.iter())
}
