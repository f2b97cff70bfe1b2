//! Residual quantization of dense document vectors into identifiers.

mod docid;
mod kmeans;

use std::collections::HashMap;

use ndarray::{Array1, Array2};
use serde::Serialize;

pub use docid::{DocId, DocIdMap};
pub use kmeans::{kmeans, nearest, KMeans};

use crate::error::{Error, Result};
use crate::util::{rng_for, sq_dist};

pub const DEFAULT_KMEANS_ITERS: usize = 20;

/// One `V x D` table per identifier position.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebooks {
    pub tables: Vec<Array2<f64>>,
}

impl Codebooks {
    pub fn levels(&self) -> usize {
        self.tables.len()
    }

    pub fn vocab(&self) -> usize {
        self.tables.first().map_or(0, |t| t.nrows())
    }

    pub fn dim(&self) -> usize {
        self.tables.first().map_or(0, |t| t.ncols())
    }
}

/// Trains `levels` codebooks of `vocab` centroids each; level `i` clusters
/// the residuals left by levels `0..i`.
pub fn train_codebooks(
    embeddings: &Array2<f64>,
    levels: usize,
    vocab: usize,
    iters: usize,
    seed: u64,
) -> Result<Codebooks> {
    if embeddings.nrows() == 0 || embeddings.ncols() == 0 {
        return Err(Error::Input("no embeddings to quantize".into()));
    }
    if levels == 0 || vocab == 0 || iters == 0 {
        return Err(Error::Config("levels, vocab and iters must be >= 1".into()));
    }
    if !embeddings.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite embedding".into()));
    }
    let mut residual = embeddings.as_standard_layout().into_owned();
    let mut tables = Vec::with_capacity(levels);
    for level in 0..levels {
        let mut rng = rng_for(seed, &format!("rq/level{level}"));
        let km = kmeans(&residual.view(), vocab, iters, &mut rng);
        for (i, &a) in km.assignments.iter().enumerate() {
            let mut r = residual.row_mut(i);
            r -= &km.centroids.row(a);
        }
        tables.push(km.centroids);
    }
    Ok(Codebooks { tables })
}

fn check_dims(embeddings: &Array2<f64>, cb: &Codebooks) -> Result<()> {
    if cb.levels() == 0 {
        return Err(Error::Input("empty codebooks".into()));
    }
    if embeddings.ncols() != cb.dim() {
        return Err(Error::Dimension(format!(
            "embeddings have {} columns, codebooks {}",
            embeddings.ncols(),
            cb.dim()
        )));
    }
    Ok(())
}

/// Nearest centroid per level on the running residual, without uniqueness.
pub fn encode_greedy(embeddings: &Array2<f64>, cb: &Codebooks) -> Result<Vec<DocId>> {
    check_dims(embeddings, cb)?;
    Ok(embeddings
        .rows()
        .into_iter()
        .map(|x| {
            let mut r = x.to_vec();
            let codes = cb
                .tables
                .iter()
                .map(|t| {
                    let (c, _) = nearest(&t.view(), &r);
                    for (v, e) in r.iter_mut().zip(t.row(c)) {
                        *v -= e;
                    }
                    c as u32
                })
                .collect();
            DocId(codes)
        })
        .collect())
}

/// Sum of the first `prefix_len` code vectors.
pub fn approximate(docid: &DocId, cb: &Codebooks, prefix_len: usize) -> Result<Array1<f64>> {
    if prefix_len == 0 || prefix_len > docid.len() || prefix_len > cb.levels() {
        return Err(Error::OutOfRange(format!(
            "prefix length {prefix_len} outside 1..={}",
            docid.len().min(cb.levels())
        )));
    }
    let mut out = Array1::zeros(cb.dim());
    for (t, &c) in docid.codes()[..prefix_len].iter().enumerate() {
        let table = &cb.tables[t];
        if c as usize >= table.nrows() {
            return Err(Error::OutOfRange(format!("code {c} at position {t}")));
        }
        out += &table.row(c as usize);
    }
    Ok(out)
}

fn capacity(vocab: usize, remaining: usize) -> u128 {
    (vocab as u128)
        .checked_pow(remaining as u32)
        .unwrap_or(u128::MAX)
}

struct Occupancy {
    vocab: usize,
    levels: usize,
    /// Number of taken identifiers under each prefix (including full ones).
    used: HashMap<Vec<u32>, u128>,
}

impl Occupancy {
    fn is_full(&self, prefix: &[u32]) -> bool {
        let n = self.used.get(prefix).copied().unwrap_or(0);
        n >= capacity(self.vocab, self.levels - prefix.len())
    }

    fn take(&mut self, codes: &[u32]) {
        for k in 0..=codes.len() {
            *self.used.entry(codes[..k].to_vec()).or_insert(0) += 1;
        }
    }

    /// Depth-first search trying codes nearest-first at every level.
    fn nearest_free(&self, cb: &Codebooks, residual: &[f64], prefix: &mut Vec<u32>) -> bool {
        let depth = prefix.len();
        if depth == self.levels {
            return !self.is_full(prefix);
        }
        let table = &cb.tables[depth];
        let mut order: Vec<(f64, u32)> = table
            .rows()
            .into_iter()
            .enumerate()
            .map(|(c, row)| (sq_dist(row.as_slice().unwrap(), residual), c as u32))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (_, c) in order {
            prefix.push(c);
            if !self.is_full(prefix) {
                let next: Vec<f64> = residual
                    .iter()
                    .zip(table.row(c as usize))
                    .map(|(r, e)| r - e)
                    .collect();
                if self.nearest_free(cb, &next, prefix) {
                    return true;
                }
            }
            prefix.pop();
        }
        false
    }
}

/// Greedy nearest-centroid identifiers made unique. Among documents sharing
/// a greedy identifier the one reconstructed best keeps it; the rest, in order
/// of increasing reconstruction error, take the nearest free identifier.
pub fn assign_docids(embeddings: &Array2<f64>, cb: &Codebooks) -> Result<Vec<DocId>> {
    let n = embeddings.nrows();
    let (levels, vocab) = (cb.levels(), cb.vocab());
    if n as u128 > capacity(vocab, levels) {
        return Err(Error::Unsatisfiable(format!(
            "{n} documents cannot have unique identifiers with V = {vocab}, L = {levels}"
        )));
    }
    let greedy = encode_greedy(embeddings, cb)?;
    let errors: Vec<f64> = greedy
        .iter()
        .zip(embeddings.rows())
        .map(|(id, x)| {
            let approx = approximate(id, cb, levels)?;
            Ok(sq_dist(approx.as_slice().unwrap(), x.as_slice().unwrap()))
        })
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| errors[a].total_cmp(&errors[b]).then(a.cmp(&b)));
    let mut owner: HashMap<&DocId, usize> = HashMap::new();
    let mut displaced = Vec::new();
    for &i in &order {
        if owner.contains_key(&greedy[i]) {
            displaced.push(i);
        } else {
            owner.insert(&greedy[i], i);
        }
    }
    let mut occ = Occupancy {
        vocab,
        levels,
        used: HashMap::new(),
    };
    let mut out = greedy.clone();
    for id in owner.keys() {
        occ.take(id.codes());
    }
    for i in displaced {
        let x = embeddings.row(i).to_vec();
        let mut prefix = Vec::with_capacity(levels);
        if !occ.nearest_free(cb, &x, &mut prefix) {
            return Err(Error::Unsatisfiable("identifier space exhausted".into()));
        }
        occ.take(&prefix);
        out[i] = DocId(prefix);
    }
    Ok(out)
}

/// Reconstruction quality of a set of identifiers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistortionReport {
    /// Entry `i` is the mean over documents of the squared L2 error of the
    /// reconstruction from the first `i + 1` codes.
    pub mse: Vec<f64>,
    /// Per level, how many documents use each code.
    pub utilization: Vec<Vec<usize>>,
}

pub fn distortion(
    embeddings: &Array2<f64>,
    ids: &[DocId],
    cb: &Codebooks,
) -> Result<DistortionReport> {
    check_dims(embeddings, cb)?;
    if ids.len() != embeddings.nrows() {
        return Err(Error::Dimension(format!(
            "{} identifiers for {} embeddings",
            ids.len(),
            embeddings.nrows()
        )));
    }
    let levels = cb.levels();
    let mut mse = vec![0.0; levels];
    let mut utilization = vec![vec![0usize; cb.vocab()]; levels];
    for (id, x) in ids.iter().zip(embeddings.rows()) {
        if id.len() != levels {
            return Err(Error::Dimension(format!(
                "identifier {id} has length {}",
                id.len()
            )));
        }
        let mut r = x.to_vec();
        for (t, &c) in id.codes().iter().enumerate() {
            let table = &cb.tables[t];
            if c as usize >= table.nrows() {
                return Err(Error::OutOfRange(format!("code {c} at position {t}")));
            }
            for (v, e) in r.iter_mut().zip(table.row(c as usize)) {
                *v -= e;
            }
            mse[t] += r.iter().map(|v| v * v).sum::<f64>();
            utilization[t][c as usize] += 1;
        }
    }
    let n = ids.len().max(1) as f64;
    for m in &mut mse {
        *m /= n;
    }
    Ok(DistortionReport { mse, utilization })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut r = rng(seed);
        Array2::from_shape_fn((n, d), |_| r.sample(StandardNormal))
    }

    #[test]
    fn single_point_is_reconstructed_exactly() {
        let x = array![[0.3, -1.2, 4.0]];
        let cb = train_codebooks(&x, 3, 4, 5, 0).unwrap();
        let ids = assign_docids(&x, &cb).unwrap();
        let rep = distortion(&x, &ids, &cb).unwrap();
        assert!(rep.mse.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn orthogonal_pair_gets_two_centroids() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let cb = train_codebooks(&x, 1, 2, 10, 3).unwrap();
        let ids = assign_docids(&x, &cb).unwrap();
        assert_ne!(ids[0], ids[1]);
        assert_eq!(distortion(&x, &ids, &cb).unwrap().mse, vec![0.0]);
    }

    #[test]
    fn deeper_quantization_distorts_less() {
        let x = gaussian(100, 16, 8);
        let mse_at = |l: usize| {
            let cb = train_codebooks(&x, l, 8, 20, 1).unwrap();
            let ids = encode_greedy(&x, &cb).unwrap();
            *distortion(&x, &ids, &cb).unwrap().mse.last().unwrap()
        };
        let (m1, m2, m4) = (mse_at(1), mse_at(2), mse_at(4));
        assert!(m4 <= m2 && m2 <= m1, "{m1} {m2} {m4}");
    }

    #[test]
    fn identical_embeddings_differ_in_last_position() {
        let x = array![[0.5, 0.5, 1.0], [0.5, 0.5, 1.0], [-2.0, 1.0, 0.0]];
        let cb = train_codebooks(&x, 3, 2, 10, 4).unwrap();
        let ids = assign_docids(&x, &cb).unwrap();
        assert_ne!(ids[0], ids[1]);
        assert_eq!(ids[0].common_prefix(&ids[1]), 2);
    }

    #[test]
    fn single_document_keeps_greedy_code() {
        let x = gaussian(1, 4, 1);
        let cb = train_codebooks(&x, 2, 3, 5, 9).unwrap();
        assert_eq!(
            assign_docids(&x, &cb).unwrap(),
            encode_greedy(&x, &cb).unwrap()
        );
    }

    #[test]
    fn too_many_documents_is_unsatisfiable() {
        let x = gaussian(5, 2, 1);
        let cb = train_codebooks(&x, 2, 2, 5, 0).unwrap();
        assert!(matches!(
            assign_docids(&x, &cb),
            Err(Error::Unsatisfiable(_))
        ));
    }

    #[test]
    fn approximate_sums_codebook_rows() {
        let x = gaussian(20, 3, 2);
        let cb = train_codebooks(&x, 3, 4, 10, 2).unwrap();
        let id = DocId(vec![1, 3, 0]);
        assert_eq!(
            approximate(&id, &cb, 1).unwrap(),
            cb.tables[0].row(1).to_owned()
        );
        let full = approximate(&id, &cb, 3).unwrap();
        let want = &cb.tables[0].row(1) + &cb.tables[1].row(3) + cb.tables[2].row(0);
        assert_eq!(full, want);
        assert!(approximate(&id, &cb, 0).is_err());
        assert!(approximate(&DocId(vec![4, 0, 0]), &cb, 1).is_err());

        let zero = Codebooks {
            tables: vec![Array2::zeros((4, 3)); 3],
        };
        assert!(approximate(&id, &zero, 3)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn report_matches_direct_recomputation() {
        let x = gaussian(40, 5, 6);
        let cb = train_codebooks(&x, 3, 6, 20, 6).unwrap();
        let ids = assign_docids(&x, &cb).unwrap();
        let rep = distortion(&x, &ids, &cb).unwrap();
        for l in 1..=3 {
            let direct: f64 = ids
                .iter()
                .zip(x.rows())
                .map(|(id, row)| {
                    let a = approximate(id, &cb, l).unwrap();
                    (&row - &a).mapv(|v| v * v).sum()
                })
                .sum::<f64>()
                / 40.0;
            assert!((direct - rep.mse[l - 1]).abs() < 1e-12);
        }
        for level in &rep.utilization {
            assert_eq!(level.iter().sum::<usize>(), 40);
        }
    }

    #[test]
    fn greedy_codes_are_exhaustive_nearest() {
        let x = gaussian(30, 4, 12);
        let cb = train_codebooks(&x, 3, 5, 10, 7).unwrap();
        let ids = encode_greedy(&x, &cb).unwrap();
        for (id, row) in ids.iter().zip(x.rows()) {
            let mut r = row.to_vec();
            for (t, &c) in id.codes().iter().enumerate() {
                let dists: Vec<f64> = cb.tables[t]
                    .rows()
                    .into_iter()
                    .map(|e| sq_dist(e.as_slice().unwrap(), &r))
                    .collect();
                let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
                assert_eq!(dists[c as usize], best);
                for (v, e) in r.iter_mut().zip(cb.tables[t].row(c as usize)) {
                    *v -= e;
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn assignment_is_injective_and_deterministic(
            n in 1usize..40,
            levels in 1usize..4,
            vocab in 2usize..5,
            seed in 0u64..1000,
            dup in 0usize..3,
        ) {
            prop_assume!((n as u128) <= capacity(vocab, levels));
            let mut x = gaussian(n, 3, seed);
            // Force some exact duplicates to exercise collision handling.
            for i in 0..dup.min(n.saturating_sub(1)) {
                let r = x.row(0).to_owned();
                x.row_mut(i + 1).assign(&r);
            }
            let cb = train_codebooks(&x, levels, vocab, 5, seed).unwrap();
            let ids = assign_docids(&x, &cb).unwrap();
            let mut sorted = ids.clone();
            sorted.sort();
            sorted.dedup();
            prop_assert_eq!(sorted.len(), n);
            prop_assert!(ids.iter().all(|id| id.len() == levels && id.codes().iter().all(|&c| (c as usize) < vocab)));
            let again = assign_docids(&x, &train_codebooks(&x, levels, vocab, 5, seed).unwrap()).unwrap();
            prop_assert_eq!(ids, again);
        }

        #[test]
        fn greedy_mse_is_non_increasing(n in 2usize..60, seed in 0u64..1000) {
            let x = gaussian(n, 4, seed);
            let cb = train_codebooks(&x, 4, 3, 10, seed).unwrap();
            let ids = encode_greedy(&x, &cb).unwrap();
            let rep = distortion(&x, &ids, &cb).unwrap();
            for w in rep.mse.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
        }
    }
}
