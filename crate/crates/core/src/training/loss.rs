//! Training objectives with analytic gradients.
//!
//! Every `*_loss` function returns the loss value and, when given a gradient
//! buffer, adds the gradient of that value with respect to all parameters.

use ndarray::{Array1, Array2, Axis};

use super::schedule::{AlphaSchedule, CurriculumSchedule};
use crate::error::{Error, Result};
use crate::model::forward::{
    decoder_backward, decoder_forward, encoder_backward, encoder_forward, DecoderCache,
    EncoderCache,
};
use crate::model::{check_codes, check_tokens, log_softmax, step_logits, Grads, Params};
use crate::util::dot;

/// (s_pos - s_neg - t)^2
pub fn margin_mse_loss(s_pos: f64, s_neg: f64, t: f64) -> f64 {
    let r = s_pos - s_neg - t;
    r * r
}

/// Partial derivatives of [`margin_mse_loss`] with respect to `(s_pos, s_neg)`.
pub fn margin_mse_grad(s_pos: f64, s_neg: f64, t: f64) -> (f64, f64) {
    let r = 2.0 * (s_pos - s_neg - t);
    (r, -r)
}

struct DenseFwd {
    enc: EncoderCache,
    enc_rows: usize,
    dec: DecoderCache,
    h: Array1<f64>,
}

fn dense_forward(p: &Params, tokens: &[u32]) -> Result<DenseFwd> {
    check_tokens(p, tokens)?;
    let (states, enc) = encoder_forward(p, tokens);
    let (h, dec) = decoder_forward(p, &states, &[], 1);
    Ok(DenseFwd {
        enc,
        enc_rows: tokens.len(),
        dec,
        h: h.row(0).to_owned(),
    })
}

fn dense_backward(p: &Params, f: &DenseFwd, dh: Array1<f64>, g: &mut Grads) {
    let dh = dh.insert_axis(Axis(0));
    let d_enc = decoder_backward(p, &f.dec, &dh, f.enc_rows, g);
    encoder_backward(p, &f.enc, &d_enc, g);
}

/// Margin regression on dense dot products: the score of a document is the
/// dot product of the query's and the document's dense representations.
pub fn dense_margin_loss(
    p: &Params,
    query: &[u32],
    pos: &[u32],
    neg: &[u32],
    margin: f64,
    grads: Option<&mut Grads>,
) -> Result<f64> {
    let q = dense_forward(p, query)?;
    let dp = dense_forward(p, pos)?;
    let dn = dense_forward(p, neg)?;
    let s_pos = q.h.dot(&dp.h);
    let s_neg = q.h.dot(&dn.h);
    let loss = margin_mse_loss(s_pos, s_neg, margin);
    if let Some(g) = grads {
        let (gp, gn) = margin_mse_grad(s_pos, s_neg, margin);
        dense_backward(p, &q, &dp.h * gp + &dn.h * gn, g);
        dense_backward(p, &dp, &q.h * gp, g);
        dense_backward(p, &dn, &q.h * gn, g);
    }
    Ok(loss)
}

/// Which prefix terms a rank loss includes: `(prefix length, alpha)` pairs.
pub type RankTerms = Vec<(usize, f64)>;

/// Terms of the multi-objective loss at checkpoint `i`: `i` itself, plus every
/// earlier checkpoint when `retention` is set.
pub fn rank_terms(
    i: usize,
    curriculum: &CurriculumSchedule,
    alphas: &AlphaSchedule,
    retention: bool,
) -> Result<RankTerms> {
    if !curriculum.checkpoints().contains(&i) {
        return Err(Error::OutOfRange(format!(
            "prefix length {i} is not a curriculum checkpoint {:?}",
            curriculum.checkpoints()
        )));
    }
    let ks = if retention {
        curriculum.up_to(i)
    } else {
        vec![i]
    };
    ks.into_iter().map(|k| Ok((k, alphas.alpha(k)?))).collect()
}

struct PrefixFwd {
    dec: DecoderCache,
    h: Array2<f64>,
    /// Cumulative scores S_1..S_steps.
    cum: Vec<f64>,
}

fn prefix_forward(p: &Params, enc: &Array2<f64>, codes: &[u32], steps: usize) -> PrefixFwd {
    let (h, dec) = decoder_forward(p, enc, codes, steps);
    let mut cum = Vec::with_capacity(steps);
    let mut s = 0.0;
    for (t, &c) in codes[..steps].iter().enumerate() {
        s += dot(p.docid_row(t, c as usize), h.row(t).as_slice().unwrap());
        cum.push(s);
    }
    PrefixFwd { dec, h, cum }
}

fn prefix_backward(
    p: &Params,
    f: &PrefixFwd,
    codes: &[u32],
    coef: &[f64],
    enc_rows: usize,
    g: &mut Grads,
) -> Array2<f64> {
    let lay = p.layout();
    let d = p.config().d_model;
    let mut dh = Array2::zeros((coef.len(), d));
    for (t, &c) in coef.iter().enumerate() {
        let e = p.docid_row(t, codes[t] as usize);
        for (dst, &v) in dh.row_mut(t).iter_mut().zip(e) {
            *dst = c * v;
        }
        for (dst, &hv) in g
            .row_mut(lay.docid_emb[t], codes[t] as usize)
            .iter_mut()
            .zip(f.h.row(t))
        {
            *dst += c * hv;
        }
    }
    decoder_backward(p, &f.dec, &dh, enc_rows, g)
}

/// Sum over `terms` of (S^k(pos) - S^k(neg) - alpha_k * margin)^2 where S^k
/// is the conditional-logit score of the first k codes.
pub fn rank_loss(
    p: &Params,
    query: &[u32],
    pos: &[u32],
    neg: &[u32],
    margin: f64,
    terms: &[(usize, f64)],
    grads: Option<&mut Grads>,
) -> Result<f64> {
    check_tokens(p, query)?;
    check_codes(p, pos)?;
    check_codes(p, neg)?;
    let steps = terms.iter().map(|t| t.0).max().unwrap_or(0);
    if steps == 0 {
        return Ok(0.0);
    }
    if pos.len() < steps || neg.len() < steps {
        return Err(Error::Input(format!(
            "identifiers shorter than prefix length {steps}"
        )));
    }
    let (enc, enc_cache) = encoder_forward(p, query);
    let fp = prefix_forward(p, &enc, pos, steps);
    let fneg = prefix_forward(p, &enc, neg, steps);
    let mut loss = 0.0;
    // coef[t] = dLoss / d(step-t term of the positive score)
    let mut coef = vec![0.0; steps];
    for &(k, a) in terms {
        if k == 0 {
            continue;
        }
        let r = fp.cum[k - 1] - fneg.cum[k - 1] - a * margin;
        loss += r * r;
        for c in &mut coef[..k] {
            *c += 2.0 * r;
        }
    }
    if let Some(g) = grads {
        let neg_coef: Vec<f64> = coef.iter().map(|c| -c).collect();
        let mut d_enc = prefix_backward(p, &fp, pos, &coef, query.len(), g);
        d_enc += &prefix_backward(p, &fneg, neg, &neg_coef, query.len(), g);
        encoder_backward(p, &enc_cache, &d_enc, g);
    }
    Ok(loss)
}

/// Rank loss at prefix length `i` alone.
#[allow(clippy::too_many_arguments)]
pub fn prefix_rank_loss(
    p: &Params,
    query: &[u32],
    pos: &[u32],
    neg: &[u32],
    margin: f64,
    i: usize,
    alphas: &AlphaSchedule,
    grads: Option<&mut Grads>,
) -> Result<f64> {
    rank_loss(p, query, pos, neg, margin, &[(i, alphas.alpha(i)?)], grads)
}

/// Rank loss at checkpoint `i` plus the retention terms of every earlier
/// checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn multi_objective_loss(
    p: &Params,
    query: &[u32],
    pos: &[u32],
    neg: &[u32],
    margin: f64,
    i: usize,
    curriculum: &CurriculumSchedule,
    alphas: &AlphaSchedule,
    grads: Option<&mut Grads>,
) -> Result<f64> {
    let terms = rank_terms(i, curriculum, alphas, true)?;
    rank_loss(p, query, pos, neg, margin, &terms, grads)
}

/// Mean over positions of the cross-entropy of the target code.
pub fn seq2seq_ce_loss(
    p: &Params,
    query: &[u32],
    target: &[u32],
    grads: Option<&mut Grads>,
) -> Result<f64> {
    check_tokens(p, query)?;
    check_codes(p, target)?;
    let l = p.config().docid_len;
    if target.len() != l {
        return Err(Error::Input(format!(
            "target has length {}, expected {l}",
            target.len()
        )));
    }
    let (enc, enc_cache) = encoder_forward(p, query);
    let (h, dec) = decoder_forward(p, &enc, target, l);
    let mut loss = 0.0;
    let mut dlogits = Vec::with_capacity(l);
    for t in 0..l {
        let ls = log_softmax(&step_logits(p, t, h.row(t).as_slice().unwrap()));
        loss -= ls[target[t] as usize];
        let mut d = ls.mapv(f64::exp);
        d[target[t] as usize] -= 1.0;
        dlogits.push(d / l as f64);
    }
    loss /= l as f64;
    if let Some(g) = grads {
        let lay = p.layout();
        let mut dh = Array2::zeros(h.dim());
        for (t, dl) in dlogits.iter().enumerate() {
            let table = p.mat(lay.docid_emb[t]);
            dh.row_mut(t).assign(&table.t().dot(dl));
            let outer = dl
                .view()
                .insert_axis(Axis(1))
                .dot(&h.row(t).insert_axis(Axis(0)));
            let mut gt = g.mat_mut(lay.docid_emb[t]);
            gt += &outer;
        }
        let d_enc = decoder_backward(p, &dec, &dh, query.len(), g);
        encoder_backward(p, &enc_cache, &d_enc, g);
    }
    Ok(loss)
}
