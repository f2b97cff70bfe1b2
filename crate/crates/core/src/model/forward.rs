//! Full-sequence encoder and teacher-forced decoder passes with backward.

use ndarray::{Array2, Axis};

use super::layers::{
    attention_backward, attention_forward, ffn_backward, ffn_forward, layer_norm_backward,
    norm_forward, AttnCache, FfnCache, NormCache,
};
use super::params::{Grads, Params};

struct EncoderLayerCache {
    ln1: NormCache,
    attn: AttnCache,
    ln2: NormCache,
    ffn: FfnCache,
}

pub(crate) struct EncoderCache {
    tokens: Vec<u32>,
    layers: Vec<EncoderLayerCache>,
    norm: NormCache,
}

/// Pre-norm transformer encoder. Callers validate token ids and length.
pub(crate) fn encoder_forward(p: &Params, tokens: &[u32]) -> (Array2<f64>, EncoderCache) {
    let cfg = p.config();
    let lay = p.layout();
    let d = cfg.d_model;
    let mut x = Array2::zeros((tokens.len(), d));
    for (t, &tok) in tokens.iter().enumerate() {
        let mut row = x.row_mut(t);
        row += &ndarray::ArrayView1::from(p.row(lay.tok_emb, tok as usize));
        row += &ndarray::ArrayView1::from(p.row(lay.enc_pos, t));
    }
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for ls in &lay.enc_layers {
        let (n1, ln1) = norm_forward(p, &ls.ln1, &x);
        let (a, attn) = attention_forward(p, &ls.attn, &n1, &n1, cfg.n_heads, false);
        x += &a;
        let (n2, ln2) = norm_forward(p, &ls.ln2, &x);
        let (f, ffn) = ffn_forward(p, &ls.ffn, &n2);
        x += &f;
        layers.push(EncoderLayerCache {
            ln1,
            attn,
            ln2,
            ffn,
        });
    }
    let (out, norm) = norm_forward(p, &lay.enc_norm, &x);
    (
        out,
        EncoderCache {
            tokens: tokens.to_vec(),
            layers,
            norm,
        },
    )
}

pub(crate) fn encoder_backward(
    p: &Params,
    cache: &EncoderCache,
    d_out: &Array2<f64>,
    g: &mut Grads,
) {
    let lay = p.layout();
    let mut dx = layer_norm_backward(p, &lay.enc_norm, &cache.norm, d_out, g);
    for (ls, lc) in lay.enc_layers.iter().zip(&cache.layers).rev() {
        let dn2 = ffn_backward(p, &ls.ffn, &lc.ffn, &dx, g);
        dx += &layer_norm_backward(p, &ls.ln2, &lc.ln2, &dn2, g);
        let (dq, dsrc) = attention_backward(p, &ls.attn, &lc.attn, &dx, g);
        let dn1 = dq + dsrc;
        dx += &layer_norm_backward(p, &ls.ln1, &lc.ln1, &dn1, g);
    }
    for (t, &tok) in cache.tokens.iter().enumerate() {
        let row = dx.row(t);
        for (a, b) in g.row_mut(lay.tok_emb, tok as usize).iter_mut().zip(row) {
            *a += b;
        }
        for (a, b) in g.row_mut(lay.enc_pos, t).iter_mut().zip(row) {
            *a += b;
        }
    }
}

struct DecoderLayerCache {
    ln1: NormCache,
    self_attn: AttnCache,
    ln2: NormCache,
    cross_attn: AttnCache,
    ln3: NormCache,
    ffn: FfnCache,
}

pub(crate) struct DecoderCache {
    codes: Vec<u32>,
    layers: Vec<DecoderLayerCache>,
    norm: NormCache,
}

/// Decoder input embedding for step `t`: the start vector at `t = 0`, else
/// the previous code looked up in its own position's identifier table.
pub(crate) fn decoder_input<'a>(p: &'a Params, codes: &[u32], t: usize) -> &'a [f64] {
    let lay = p.layout();
    if t == 0 {
        p.row(lay.dec_start, 0)
    } else {
        p.row(lay.docid_emb[t - 1], codes[t - 1] as usize)
    }
}

/// Teacher-forced decoding of `steps` positions. Row `t` of the result is the
/// hidden state h_{t+1}, conditioned on `codes[..t]`. Only `codes[..steps-1]`
/// is read.
pub(crate) fn decoder_forward(
    p: &Params,
    enc: &Array2<f64>,
    codes: &[u32],
    steps: usize,
) -> (Array2<f64>, DecoderCache) {
    let cfg = p.config();
    let lay = p.layout();
    let mut x = Array2::zeros((steps, cfg.d_model));
    for t in 0..steps {
        let mut row = x.row_mut(t);
        row += &ndarray::ArrayView1::from(decoder_input(p, codes, t));
        row += &ndarray::ArrayView1::from(p.row(lay.dec_pos, t));
    }
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for ls in &lay.dec_layers {
        let (n1, ln1) = norm_forward(p, &ls.ln1, &x);
        let (a, self_attn) = attention_forward(p, &ls.self_attn, &n1, &n1, cfg.n_heads, true);
        x += &a;
        let (n2, ln2) = norm_forward(p, &ls.ln2, &x);
        let (c, cross_attn) = attention_forward(p, &ls.cross_attn, &n2, enc, cfg.n_heads, false);
        x += &c;
        let (n3, ln3) = norm_forward(p, &ls.ln3, &x);
        let (f, ffn) = ffn_forward(p, &ls.ffn, &n3);
        x += &f;
        layers.push(DecoderLayerCache {
            ln1,
            self_attn,
            ln2,
            cross_attn,
            ln3,
            ffn,
        });
    }
    let (h, norm) = norm_forward(p, &lay.dec_norm, &x);
    (
        h,
        DecoderCache {
            codes: codes[..steps.saturating_sub(1).min(codes.len())].to_vec(),
            layers,
            norm,
        },
    )
}

/// Backpropagates `dh` (one row per decoded step); returns the gradient with
/// respect to the encoder output.
pub(crate) fn decoder_backward(
    p: &Params,
    cache: &DecoderCache,
    dh: &Array2<f64>,
    enc_rows: usize,
    g: &mut Grads,
) -> Array2<f64> {
    let lay = p.layout();
    let mut d_enc = Array2::zeros((enc_rows, p.config().d_model));
    let mut dx = layer_norm_backward(p, &lay.dec_norm, &cache.norm, dh, g);
    for (ls, lc) in lay.dec_layers.iter().zip(&cache.layers).rev() {
        let dn3 = ffn_backward(p, &ls.ffn, &lc.ffn, &dx, g);
        dx += &layer_norm_backward(p, &ls.ln3, &lc.ln3, &dn3, g);
        let (dn2, dsrc) = attention_backward(p, &ls.cross_attn, &lc.cross_attn, &dx, g);
        d_enc += &dsrc;
        dx += &layer_norm_backward(p, &ls.ln2, &lc.ln2, &dn2, g);
        let (dq, dkv) = attention_backward(p, &ls.self_attn, &lc.self_attn, &dx, g);
        let dn1 = dq + dkv;
        dx += &layer_norm_backward(p, &ls.ln1, &lc.ln1, &dn1, g);
    }
    for (t, row) in dx.axis_iter(Axis(0)).enumerate() {
        let target = if t == 0 {
            g.row_mut(lay.dec_start, 0)
        } else {
            g.row_mut(lay.docid_emb[t - 1], cache.codes[t - 1] as usize)
        };
        for (a, b) in target.iter_mut().zip(row) {
            *a += b;
        }
        for (a, b) in g.row_mut(lay.dec_pos, t).iter_mut().zip(row) {
            *a += b;
        }
    }
    d_enc
}
