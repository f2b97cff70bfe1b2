//! Constrained decoding: the identifier trie, beam search over it and an
//! exhaustive ranking oracle.

mod trie;

use ndarray::Array2;

pub use trie::{build_trie, PrefixTrie};

use crate::error::{Error, Result};
use crate::model::{self, forward::decoder_input, CrossMemory, DecoderState, Params};
use crate::rq::{DocId, DocIdMap};
use crate::util::{dot, rank_order};

/// Default beam width for retrieval and negative mining.
pub const DEFAULT_BEAM: usize = 100;

/// A retrieved document with its full-length conditional-logit score.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub doc_id: String,
    pub docid: DocId,
    pub score: f64,
}

/// A beam entry: a valid prefix and its cumulative score.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamCandidate {
    pub prefix: Vec<u32>,
    pub score: f64,
}

/// Beam contents after every decoding depth; `levels[i]` holds the
/// candidates of length `i + 1`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BeamTrace {
    pub levels: Vec<Vec<BeamCandidate>>,
}

/// (beam index, code, child node, score)
type Expansion = (usize, u32, usize, f64);

struct Live {
    node: usize,
    prefix: Vec<u32>,
    score: f64,
    state: DecoderState,
}

/// Beam search halted at `depth`. Returns the final beam (sorted by score
/// descending, prefix ascending) and the beam after every depth.
pub fn beam_search_traced(
    p: &Params,
    query: &[u32],
    trie: &PrefixTrie,
    k: usize,
    depth: usize,
) -> Result<(Vec<BeamCandidate>, BeamTrace)> {
    if k == 0 {
        return Err(Error::Config("beam width must be >= 1".into()));
    }
    if trie.is_empty() {
        return Err(Error::Input("no identifiers to decode".into()));
    }
    if trie.depth() != p.config().docid_len {
        return Err(Error::Dimension(format!(
            "trie depth {} differs from model L = {}",
            trie.depth(),
            p.config().docid_len
        )));
    }
    if depth == 0 || depth > trie.depth() {
        return Err(Error::OutOfRange(format!(
            "depth {depth} outside 1..={}",
            trie.depth()
        )));
    }
    let enc = model::encode(p, query)?;
    let mem = CrossMemory::new(p, &enc);
    let d = p.config().d_model;
    let mut beam = vec![Live {
        node: trie.root(),
        prefix: Vec::new(),
        score: 0.0,
        state: DecoderState::new(p),
    }];
    let mut trace = BeamTrace::default();
    for t in 0..depth {
        let mut inputs = Array2::zeros((beam.len(), d));
        for (row, live) in inputs.rows_mut().into_iter().zip(&beam) {
            let x = decoder_input(p, &live.prefix, t);
            row.into_slice().unwrap().copy_from_slice(x);
        }
        let mut states: Vec<DecoderState> = beam
            .iter_mut()
            .map(|b| std::mem::take(&mut b.state))
            .collect();
        let h = model::decode_step(p, &mem, &mut states, &inputs);
        for (live, st) in beam.iter_mut().zip(states) {
            live.state = st;
        }

        let mut expansions: Vec<Expansion> = Vec::new();
        for (b, live) in beam.iter().enumerate() {
            let hb = h.row(b);
            let hb = hb.as_slice().unwrap();
            for &(c, child) in trie.children(live.node) {
                let s = live.score + dot(p.docid_row(t, c as usize), hb);
                expansions.push((b, c, child, s));
            }
        }
        let key = |e: &Expansion| {
            let mut pre = beam[e.0].prefix.clone();
            pre.push(e.1);
            pre
        };
        let mut keyed: Vec<(Vec<u32>, Expansion)> =
            expansions.into_iter().map(|e| (key(&e), e)).collect();
        keyed.sort_by(|a, b| rank_order((&a.0, a.1 .3), (&b.0, b.1 .3)));
        keyed.truncate(k);

        let next: Vec<Live> = keyed
            .into_iter()
            .map(|(prefix, (b, _, child, score))| Live {
                node: child,
                prefix,
                score,
                state: beam[b].state.clone(),
            })
            .collect();
        trace.levels.push(
            next.iter()
                .map(|l| BeamCandidate {
                    prefix: l.prefix.clone(),
                    score: l.score,
                })
                .collect(),
        );
        beam = next;
    }
    let last = trace.levels.last().cloned().unwrap_or_default();
    Ok((last, trace))
}

/// The top-`k` prefixes of length `depth` kept by beam search.
pub fn prefix_truncated_retrieval(
    p: &Params,
    query: &[u32],
    trie: &PrefixTrie,
    k: usize,
    depth: usize,
) -> Result<Vec<BeamCandidate>> {
    Ok(beam_search_traced(p, query, trie, k, depth)?.0)
}

/// Constrained beam search of width `k` to full identifier length. Returns at
/// most `k` documents sorted by score descending, identifier ascending.
pub fn beam_search(p: &Params, query: &[u32], trie: &PrefixTrie, k: usize) -> Result<Vec<Hit>> {
    let (beam, _) = beam_search_traced(p, query, trie, k, trie.depth())?;
    beam.into_iter()
        .map(|c| {
            let doc = trie.document(&c.prefix).ok_or_else(|| {
                Error::Input(format!("decoded an unassigned identifier {:?}", c.prefix))
            })?;
            Ok(Hit {
                doc_id: doc.to_string(),
                docid: DocId(c.prefix),
                score: c.score,
            })
        })
        .collect()
}

/// Scores every assigned identifier from scratch and sorts them with the same
/// order as [`beam_search`].
pub fn brute_force_rank(p: &Params, query: &[u32], map: &DocIdMap) -> Result<Vec<Hit>> {
    let enc = model::encode(p, query)?;
    let mut hits = map
        .iter()
        .map(|(doc, id)| {
            Ok(Hit {
                doc_id: doc.to_string(),
                docid: id.clone(),
                score: model::prefix_score(p, &enc, id.codes())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    hits.sort_by(|a, b| rank_order((&a.docid, a.score), (&b.docid, b.score)));
    Ok(hits)
}
