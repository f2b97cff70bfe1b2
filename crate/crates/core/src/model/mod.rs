//! Encoder–decoder scorer: query encoding, per-step decoder states, dense
//! representations and the two relevance scoring functions.

pub mod config;
pub(crate) mod forward;
pub mod incremental;
pub(crate) mod layers;
pub mod params;

use ndarray::{Array1, Array2};

pub use config::ModelConfig;
pub use incremental::{decode_step, CrossMemory, DecoderState};
pub use params::{Grads, Layout, Params, Slot};

use crate::error::{Error, Result};

/// Contextual vectors for the input tokens, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub states: Array2<f64>,
}

impl EncoderOutput {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }
}

pub(crate) fn check_tokens(p: &Params, tokens: &[u32]) -> Result<()> {
    let cfg = p.config();
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Input(format!(
            "{} tokens exceed max_seq_len {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.token_vocab) {
        return Err(Error::OutOfRange(format!(
            "token id {t} outside vocabulary of {}",
            cfg.token_vocab
        )));
    }
    Ok(())
}

pub(crate) fn check_codes(p: &Params, codes: &[u32]) -> Result<()> {
    let cfg = p.config();
    if codes.len() > cfg.docid_len {
        return Err(Error::OutOfRange(format!(
            "identifier prefix of length {} exceeds L = {}",
            codes.len(),
            cfg.docid_len
        )));
    }
    if let Some(&c) = codes.iter().find(|&&c| c as usize >= cfg.docid_vocab) {
        return Err(Error::OutOfRange(format!(
            "code {c} outside vocabulary of {}",
            cfg.docid_vocab
        )));
    }
    Ok(())
}

pub fn encode(p: &Params, tokens: &[u32]) -> Result<EncoderOutput> {
    check_tokens(p, tokens)?;
    let (states, _) = forward::encoder_forward(p, tokens);
    Ok(EncoderOutput { states })
}

/// Hidden states h_1..h_n for an identifier prefix of length n, one row each.
/// Row `t` is conditioned on `prefix[..t]`.
pub fn decode_states(p: &Params, enc: &EncoderOutput, prefix: &[u32]) -> Result<Array2<f64>> {
    check_codes(p, prefix)?;
    let (h, _) = forward::decoder_forward(p, &enc.states, prefix, prefix.len());
    Ok(h)
}

/// The hidden state for the step after `prefix`.
pub fn decode_hidden(p: &Params, enc: &EncoderOutput, prefix: &[u32]) -> Result<Array1<f64>> {
    if prefix.len() >= p.config().docid_len {
        return Err(Error::OutOfRange(format!(
            "prefix length {} must be below L = {}",
            prefix.len(),
            p.config().docid_len
        )));
    }
    check_codes(p, prefix)?;
    let steps = prefix.len() + 1;
    let (h, _) = forward::decoder_forward(p, &enc.states, prefix, steps);
    Ok(h.row(steps - 1).to_owned())
}

/// Truncates a token sequence to at most `max_len` tokens.
pub fn fit(max_len: usize, tokens: &[u32]) -> Vec<u32> {
    tokens[..tokens.len().min(max_len)].to_vec()
}

/// First decoder state on the encoded text: the dense vector used for
/// documents and queries alike.
pub fn dense_representation(p: &Params, tokens: &[u32]) -> Result<Array1<f64>> {
    let enc = encode(p, tokens)?;
    decode_hidden(p, &enc, &[])
}

/// Conditional-logit score of a prefix: the sum over positions of the code
/// embedding dotted with the hidden state at that position. Zero when empty.
pub fn prefix_score(p: &Params, enc: &EncoderOutput, prefix: &[u32]) -> Result<f64> {
    if prefix.is_empty() {
        return Ok(0.0);
    }
    let h = decode_states(p, enc, prefix)?;
    Ok(prefix
        .iter()
        .enumerate()
        .map(|(t, &c)| crate::util::dot(p.docid_row(t, c as usize), h.row(t).as_slice().unwrap()))
        .sum())
}

/// Logits `E_t . h` over every code at position `t`.
pub fn step_logits(p: &Params, t: usize, h: &[f64]) -> Array1<f64> {
    let table = p.mat(p.layout().docid_emb[t]);
    table.dot(&ndarray::ArrayView1::from(h))
}

pub(crate) fn log_softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits - lse
}

/// Sum over positions of the log-softmax probability of the target code.
pub fn log_prob_score(p: &Params, enc: &EncoderOutput, docid: &[u32]) -> Result<f64> {
    if docid.len() != p.config().docid_len {
        return Err(Error::Input(format!(
            "log-probability needs a full identifier of length {}, got {}",
            p.config().docid_len,
            docid.len()
        )));
    }
    let h = decode_states(p, enc, docid)?;
    Ok(docid
        .iter()
        .enumerate()
        .map(|(t, &c)| log_softmax(&step_logits(p, t, h.row(t).as_slice().unwrap()))[c as usize])
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn tiny(seed: u64) -> Params {
        let cfg = ModelConfig {
            d_model: 8,
            docid_len: 4,
            docid_vocab: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 12,
            token_vocab: 20,
            max_seq_len: 10,
        };
        let mut p = Params::init(&cfg, seed).unwrap();
        // Larger weights than the default init so the checks are not trivially small.
        for v in p.as_mut_slice() {
            *v *= 20.0;
        }
        p
    }

    #[test]
    fn encode_is_deterministic_and_shape_preserving() {
        let p = tiny(1);
        let a = encode(&p, &[3, 4, 5]).unwrap();
        let b = encode(&p, &[3, 4, 5]).unwrap();
        assert_eq!(a.states.dim(), (3, 8));
        assert!(a
            .states
            .iter()
            .zip(b.states.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(encode(&p, &[]).is_err());
        assert!(encode(&p, &[25]).is_err());
        assert!(encode(&p, &[1; 11]).is_err());
    }

    #[test]
    fn degenerate_encoder_returns_token_embeddings() {
        let p0 = tiny(2);
        let lay = p0.layout().clone();
        let mut data = vec![0.0; p0.len()];
        // Token embeddings already standardized so the final norm is (nearly) identity.
        let d = 8;
        for tok in 0..20 {
            let row = &mut data[lay.tok_emb.offset + tok * d..lay.tok_emb.offset + (tok + 1) * d];
            for (j, v) in row.iter_mut().enumerate() {
                *v = if (j + tok) % 2 == 0 { 1.0 } else { -1.0 };
            }
        }
        let gains: Vec<Slot> = lay
            .enc_layers
            .iter()
            .flat_map(|l| [l.ln1.gain, l.ln2.gain])
            .chain([lay.enc_norm.gain])
            .collect();
        for s in gains {
            data[s.range()].fill(1.0);
        }
        let p = Params::from_flat(p0.config(), data).unwrap();
        let toks = [0u32, 5, 7];
        let out = encode(&p, &toks).unwrap();
        for (r, &tok) in toks.iter().enumerate() {
            let emb = p.row(lay.tok_emb, tok as usize);
            for (j, &e) in emb.iter().enumerate().take(d) {
                assert!((out.states[[r, j]] - e).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn incremental_decoding_matches_full_pass() {
        for seed in 0..4 {
            let p = tiny(seed);
            let enc = encode(&p, &[1, 2, 3, 9, 4]).unwrap();
            let codes = [3u32, 0, 7, 5];
            let full = decode_states(&p, &enc, &codes).unwrap();
            let mem = CrossMemory::new(&p, &enc);
            let mut states = vec![DecoderState::new(&p)];
            for t in 0..4 {
                let input = forward::decoder_input(&p, &codes, t);
                let x = Array2::from_shape_vec((1, 8), input.to_vec()).unwrap();
                let h = decode_step(&p, &mem, &mut states, &x);
                for j in 0..8 {
                    assert!((h[[0, j]] - full[[t, j]]).abs() < 1e-12);
                }
                let single = decode_hidden(&p, &enc, &codes[..t]).unwrap();
                for j in 0..8 {
                    assert!((single[j] - full[[t, j]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn decode_hidden_rejects_full_prefix() {
        let p = tiny(3);
        let enc = encode(&p, &[1]).unwrap();
        assert!(decode_hidden(&p, &enc, &[0, 0, 0, 0]).is_err());
        assert!(decode_hidden(&p, &enc, &[8]).is_err());
        assert!(decode_hidden(&p, &enc, &[0, 0, 0])
            .unwrap()
            .iter()
            .all(|v| v.is_finite()));
    }

    #[test]
    fn dense_representation_is_first_decoder_state() {
        let p = tiny(4);
        let enc = encode(&p, &[2, 2, 6]).unwrap();
        assert_eq!(
            dense_representation(&p, &[2, 2, 6]).unwrap(),
            decode_hidden(&p, &enc, &[]).unwrap()
        );
    }

    #[test]
    fn prefix_score_is_additive() {
        let p = tiny(5);
        let enc = encode(&p, &[4, 8, 1]).unwrap();
        let codes = [1u32, 6, 2, 7];
        assert_eq!(prefix_score(&p, &enc, &[]).unwrap(), 0.0);
        for i in 1..=4 {
            let h = decode_hidden(&p, &enc, &codes[..i - 1]).unwrap();
            let term = crate::util::dot(
                p.docid_row(i - 1, codes[i - 1] as usize),
                h.as_slice().unwrap(),
            );
            let lhs = prefix_score(&p, &enc, &codes[..i]).unwrap();
            let rhs = prefix_score(&p, &enc, &codes[..i - 1]).unwrap() + term;
            assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn one_step_toy_score() {
        let cfg = ModelConfig {
            d_model: 2,
            docid_len: 1,
            docid_vocab: 2,
            n_layers: 1,
            n_heads: 1,
            ffn_dim: 2,
            token_vocab: 3,
            max_seq_len: 4,
        };
        let mut p = Params::init(&cfg, 0).unwrap();
        let lay = p.layout().clone();
        let s = p.as_mut_slice();
        s[lay.dec_norm.gain.range()].fill(0.0);
        s[lay.dec_norm.bias.range()].fill(0.5);
        let e = lay.docid_emb[0];
        s[e.offset + 2] = 1.0;
        s[e.offset + 3] = 0.0;
        let enc = encode(&p, &[1, 2]).unwrap();
        assert_eq!(prefix_score(&p, &enc, &[1]).unwrap(), 0.5);
    }

    #[test]
    fn log_prob_properties() {
        let p = tiny(6);
        let enc = encode(&p, &[5, 5, 3]).unwrap();
        assert!(log_prob_score(&p, &enc, &[1, 2, 3]).is_err());
        let lp = log_prob_score(&p, &enc, &[1, 2, 3, 4]).unwrap();
        assert!(lp <= 0.0);
        let h = decode_states(&p, &enc, &[1, 2, 3, 4]).unwrap();
        for t in 0..4 {
            let ls = log_softmax(&step_logits(&p, t, h.row(t).as_slice().unwrap()));
            let total: f64 = (0..8).map(|c| ls[c].exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }

        let cfg = ModelConfig {
            docid_vocab: 1,
            ..p.config().clone()
        };
        let p1 = Params::init(&cfg, 9).unwrap();
        let enc = encode(&p1, &[1]).unwrap();
        assert_eq!(log_prob_score(&p1, &enc, &[0, 0, 0, 0]).unwrap(), 0.0);
    }
}
