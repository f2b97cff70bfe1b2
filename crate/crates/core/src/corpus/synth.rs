//! Synthetic retrieval collections with a latent-vector relevance oracle.
//!
//! Every topic owns a unit vector `u_t` and a private word region. A document
//! of topic `t` gets a latent `z_d = normalize(u_t + spread * g)` and draws
//! its words from `p(w | d) ∝ exp(sharpness * <e_w, z_d>)` over the topic's
//! words, mixed with shared background words and a few document-specific
//! entity tokens. A query targets one document, inherits its latent, and
//! mixes an entity mention, words copied from the document and fresh draws
//! from the same word distribution. The oracle scores rel(q, d) as
//! `teacher_scale * <z_q, z_d>`; the judged positives of a query are its top
//! documents under the oracle, so every golden margin between a judged and an
//! unjudged document is positive.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};

use super::{Corpus, OracleTeacher, Qrels, Query, QuerySet};
use crate::error::{Error, Result};
use crate::util::{dot, rng_for};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_docs: usize,
    /// Held-out (evaluation) queries.
    pub n_queries: usize,
    /// Training queries, drawn independently of the held-out ones.
    pub n_train_queries: usize,
    pub n_topics: usize,
    /// Latent dimension of the oracle.
    pub dim: usize,
    pub seed: u64,
    pub words_per_topic: usize,
    pub background_words: usize,
    pub doc_len: (usize, usize),
    pub query_len: (usize, usize),
    pub doc_spread: f64,
    pub word_spread: f64,
    pub sharpness: f64,
    pub background_prob: f64,
    pub entities_per_doc: usize,
    pub entity_repeats: usize,
    /// Probability that a query mentions one of its target's entities.
    pub entity_prob: f64,
    /// Probability that a non-entity query word is copied from the target.
    pub copy_prob: f64,
    /// Probability of judging the oracle's runner-up as (grade 1) relevant.
    pub second_relevant_prob: f64,
    /// Multiplier on every teacher score (the teacher's logit temperature).
    pub teacher_scale: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_docs: 1000,
            n_queries: 100,
            n_train_queries: 4000,
            n_topics: 20,
            dim: 16,
            seed: 7,
            words_per_topic: 40,
            background_words: 30,
            doc_len: (24, 40),
            query_len: (4, 8),
            doc_spread: 0.8,
            word_spread: 1.0,
            sharpness: 6.0,
            background_prob: 0.15,
            entities_per_doc: 2,
            entity_repeats: 2,
            entity_prob: 0.9,
            copy_prob: 0.5,
            second_relevant_prob: 0.1,
            teacher_scale: 30.0,
        }
    }
}

impl SyntheticConfig {
    pub fn new(n_docs: usize, n_queries: usize, n_topics: usize, dim: usize, seed: u64) -> Self {
        SyntheticConfig {
            n_docs,
            n_queries,
            n_train_queries: n_docs,
            n_topics,
            dim,
            seed,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let zero = [
            ("n_docs", self.n_docs),
            ("n_queries", self.n_queries),
            ("n_topics", self.n_topics),
            ("words_per_topic", self.words_per_topic),
        ];
        for (name, v) in zero {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if self.n_topics > self.n_docs {
            return Err(Error::Config("n_topics must not exceed n_docs".into()));
        }
        if !(self.teacher_scale.is_finite() && self.teacher_scale > 0.0) {
            return Err(Error::Config("teacher_scale must be positive".into()));
        }
        if self.dim < 2 {
            return Err(Error::Config("dim must be >= 2".into()));
        }
        if self.doc_len.0 == 0 || self.doc_len.0 > self.doc_len.1 {
            return Err(Error::Config("invalid doc_len range".into()));
        }
        if self.query_len.0 == 0 || self.query_len.0 > self.query_len.1 {
            return Err(Error::Config("invalid query_len range".into()));
        }
        Ok(())
    }
}

/// A generated collection: corpus, held-out and training query splits, and
/// the oracle teacher.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub corpus: Corpus,
    pub dev: QuerySet,
    pub train: QuerySet,
    pub teacher: OracleTeacher,
    /// Topic of each document, in corpus order.
    pub doc_topics: Vec<usize>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn perturbed(center: &[f64], spread: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let g = unit_gaussian(rng, center.len());
    normalize(center.iter().zip(g).map(|(c, g)| c + spread * g).collect())
}

struct WordModel {
    topic_words: Vec<Vec<String>>,
    word_vecs: Vec<Vec<Vec<f64>>>,
    background: Vec<String>,
}

impl WordModel {
    fn distribution(&self, topic: usize, latent: &[f64], sharpness: f64) -> WeightedIndex<f64> {
        let logits: Vec<f64> = self.word_vecs[topic]
            .iter()
            .map(|e| sharpness * dot(e, latent))
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        WeightedIndex::new(logits.iter().map(|l| (l - max).exp())).expect("positive weights")
    }

    fn sample_word(
        &self,
        topic: usize,
        dist: &WeightedIndex<f64>,
        background_prob: f64,
        rng: &mut ChaCha8Rng,
    ) -> String {
        if !self.background.is_empty() && rng.gen_bool(background_prob) {
            self.background.choose(rng).unwrap().clone()
        } else {
            self.topic_words[topic][dist.sample(rng)].clone()
        }
    }
}

struct DocDraft {
    topic: usize,
    latent: Vec<f64>,
    words: Vec<String>,
    entities: Vec<String>,
}

pub fn generate_synthetic_corpus(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, "synthetic");

    let topics: Vec<Vec<f64>> = (0..cfg.n_topics)
        .map(|_| normalize(unit_gaussian(&mut rng, cfg.dim)))
        .collect();
    let words = WordModel {
        topic_words: (0..cfg.n_topics)
            .map(|t| {
                (0..cfg.words_per_topic)
                    .map(|j| format!("t{t}w{j}"))
                    .collect()
            })
            .collect(),
        word_vecs: topics
            .iter()
            .map(|u| {
                (0..cfg.words_per_topic)
                    .map(|_| perturbed(u, cfg.word_spread, &mut rng))
                    .collect()
            })
            .collect(),
        background: (0..cfg.background_words)
            .map(|j| format!("bg{j}"))
            .collect(),
    };

    let mut drafts = Vec::with_capacity(cfg.n_docs);
    for i in 0..cfg.n_docs {
        let topic = i % cfg.n_topics;
        let latent = perturbed(&topics[topic], cfg.doc_spread, &mut rng);
        let dist = words.distribution(topic, &latent, cfg.sharpness);
        let len = rng.gen_range(cfg.doc_len.0..=cfg.doc_len.1);
        let mut doc_words: Vec<String> = (0..len)
            .map(|_| words.sample_word(topic, &dist, cfg.background_prob, &mut rng))
            .collect();
        let entities: Vec<String> = (0..cfg.entities_per_doc)
            .map(|j| format!("e{i}n{j}"))
            .collect();
        for e in &entities {
            for _ in 0..cfg.entity_repeats {
                let at = rng.gen_range(0..=doc_words.len());
                doc_words.insert(at, e.clone());
            }
        }
        drafts.push(DocDraft {
            topic,
            latent,
            words: doc_words,
            entities,
        });
    }

    let doc_ids: Vec<String> = (0..cfg.n_docs).map(|i| format!("d{i}")).collect();
    let corpus = Corpus::from_raw(
        doc_ids
            .iter()
            .zip(&drafts)
            .map(|(id, d)| (id.clone(), d.words.join(" ")))
            .collect(),
    )?;
    // scaling both sides by sqrt(scale) scales every score by `scale`
    let root = cfg.teacher_scale.sqrt();
    let scaled = |v: &[f64]| v.iter().map(|x| x * root).collect::<Vec<f64>>();
    let mut teacher = OracleTeacher::new(cfg.dim);
    for (id, d) in doc_ids.iter().zip(&drafts) {
        teacher.add_doc(id.clone(), scaled(&d.latent));
    }

    let mut split = |prefix: &str, n: usize, rng: &mut ChaCha8Rng| -> Result<QuerySet> {
        let mut targets: Vec<usize> = (0..cfg.n_docs).collect();
        targets.shuffle(rng);
        let mut queries = Vec::with_capacity(n);
        let mut qrels = Qrels::new();
        for j in 0..n {
            let target = if j < targets.len() {
                targets[j]
            } else {
                rng.gen_range(0..cfg.n_docs)
            };
            let d = &drafts[target];
            let qid = format!("{prefix}{j}");
            let dist = words.distribution(d.topic, &d.latent, cfg.sharpness);
            let len = rng.gen_range(cfg.query_len.0..=cfg.query_len.1);
            let mut qwords = Vec::with_capacity(len);
            if !d.entities.is_empty() && rng.gen_bool(cfg.entity_prob) {
                qwords.push(d.entities.choose(rng).unwrap().clone());
            }
            let content: Vec<&String> =
                d.words.iter().filter(|w| !d.entities.contains(w)).collect();
            while qwords.len() < len {
                if !content.is_empty() && rng.gen_bool(cfg.copy_prob) {
                    qwords.push((*content.choose(rng).unwrap()).clone());
                } else {
                    qwords.push(words.sample_word(d.topic, &dist, cfg.background_prob, rng));
                }
            }
            qwords.shuffle(rng);
            teacher.add_query(qid.clone(), scaled(&d.latent));

            qrels.insert(qid.clone(), doc_ids[target].clone(), 2);
            if cfg.n_docs > 1 && rng.gen_bool(cfg.second_relevant_prob) {
                let runner_up = (0..cfg.n_docs)
                    .filter(|&i| i != target)
                    .max_by(|&a, &b| {
                        dot(&d.latent, &drafts[a].latent)
                            .total_cmp(&dot(&d.latent, &drafts[b].latent))
                    })
                    .unwrap();
                if drafts[runner_up].topic == d.topic {
                    qrels.insert(qid.clone(), doc_ids[runner_up].clone(), 1);
                }
            }
            queries.push(corpus.make_query(qid, qwords.join(" "))?);
        }
        Ok(QuerySet { queries, qrels })
    };

    let mut dev_rng = rng_for(cfg.seed, "synthetic/dev");
    let dev = split("q", cfg.n_queries, &mut dev_rng)?;
    let mut train_rng = rng_for(cfg.seed, "synthetic/train");
    let train = split("t", cfg.n_train_queries, &mut train_rng)?;

    Ok(SyntheticData {
        corpus,
        dev,
        train,
        teacher,
        doc_topics: drafts.iter().map(|d| d.topic).collect(),
    })
}

impl SyntheticData {
    /// Every query of both splits.
    pub fn all_queries(&self) -> impl Iterator<Item = &Query> {
        self.train.queries.iter().chain(&self.dev.queries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn single_document_single_pair() {
        let data = generate_synthetic_corpus(&SyntheticConfig::new(1, 1, 1, 4, 0)).unwrap();
        assert_eq!(data.corpus.len(), 1);
        assert_eq!(data.dev.qrels.n_pairs(), 1);
    }

    #[test]
    fn every_query_has_a_positive_and_ids_are_unique() {
        let mut cfg = SyntheticConfig::new(1000, 100, 20, 16, 7);
        cfg.n_train_queries = 200;
        let data = generate_synthetic_corpus(&cfg).unwrap();
        let ids: HashSet<_> = data.corpus.docs().iter().map(|d| &d.doc_id).collect();
        assert_eq!(ids.len(), 1000);
        for split in [&data.dev, &data.train] {
            for q in &split.queries {
                let rel = split.qrels.get(&q.query_id).expect("judged");
                assert!(!rel.is_empty());
                assert!(rel.keys().all(|d| data.corpus.contains(d)));
            }
        }
    }

    #[test]
    fn configuration_errors() {
        for cfg in [
            SyntheticConfig::new(0, 1, 1, 4, 0),
            SyntheticConfig::new(1, 0, 1, 4, 0),
            SyntheticConfig::new(1, 1, 0, 4, 0),
            SyntheticConfig::new(1, 1, 2, 4, 0),
            SyntheticConfig::new(1, 1, 1, 1, 0),
        ] {
            assert!(matches!(
                generate_synthetic_corpus(&cfg),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn cross_topic_margins_are_positive() {
        // Enumerate every judged positive against every different-topic document.
        let mut cfg = SyntheticConfig::new(50, 30, 5, 8, 3);
        cfg.n_train_queries = 30;
        let data = generate_synthetic_corpus(&cfg).unwrap();
        let topic_of = |id: &str| data.doc_topics[data.corpus.index_of(id).unwrap()];
        let mut checked = 0;
        let mut min_margin = f64::INFINITY;
        for split in [&data.dev, &data.train] {
            for (qid, rels) in split.qrels.iter() {
                for pos in rels.keys() {
                    for neg in data.corpus.docs() {
                        if topic_of(&neg.doc_id) == topic_of(pos) {
                            continue;
                        }
                        min_margin =
                            min_margin.min(data.teacher.margin(qid, pos, &neg.doc_id).unwrap());
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 1000);
        assert!(min_margin > 0.0, "min margin {min_margin}");
    }

    #[test]
    fn judged_beats_every_unjudged() {
        let data = generate_synthetic_corpus(&SyntheticConfig::new(60, 40, 4, 8, 11)).unwrap();
        for (qid, rels) in data.dev.qrels.iter() {
            for pos in rels.keys() {
                for d in data.corpus.docs() {
                    if !rels.contains_key(&d.doc_id) {
                        assert!(data.teacher.margin(qid, pos, &d.doc_id).unwrap() > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SyntheticConfig::new(40, 10, 4, 8, 5);
        let a = generate_synthetic_corpus(&cfg).unwrap();
        let b = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.dev, b.dev);
        assert_eq!(a.train, b.train);
        assert_eq!(a.teacher, b.teacher);
    }
}
