//! Incremental (cached) decoding for beam search.
//!
//! Each candidate keeps the self-attention keys and values of the positions it
//! has already decoded; cross-attention keys and values are computed once per
//! query and shared by every candidate.

use ndarray::{s, Array2, ArrayView1};

use super::layers::{ffn_apply, layer_norm, masked_softmax};
use super::params::Params;
use super::EncoderOutput;

/// Per-layer cross-attention keys and values of one encoded query.
#[derive(Debug, Clone)]
pub struct CrossMemory {
    layers: Vec<(Array2<f64>, Array2<f64>)>,
}

impl CrossMemory {
    pub fn new(p: &Params, enc: &EncoderOutput) -> Self {
        let layers = p
            .layout()
            .dec_layers
            .iter()
            .map(|ls| {
                (
                    enc.states.dot(&p.mat(ls.cross_attn.wk)),
                    enc.states.dot(&p.mat(ls.cross_attn.wv)),
                )
            })
            .collect();
        CrossMemory { layers }
    }
}

/// Self-attention cache of one decoding candidate.
#[derive(Debug, Clone, Default)]
pub struct DecoderState {
    /// Per layer: keys and values of decoded positions, each `len x D` flattened.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl DecoderState {
    pub fn new(p: &Params) -> Self {
        let n = p.config().n_layers;
        DecoderState {
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
        }
    }

    /// Number of positions decoded so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn attend(
    q: ArrayView1<f64>,
    keys: &[f64],
    values: &[f64],
    len: usize,
    n_heads: usize,
    out: &mut [f64],
) {
    let d = q.len();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut w = vec![0.0; len];
    for h in 0..n_heads {
        let lo = h * dh;
        for (j, wj) in w.iter_mut().enumerate() {
            let k = &keys[j * d + lo..j * d + lo + dh];
            *wj = (0..dh).map(|c| q[lo + c] * k[c]).sum::<f64>() * scale;
        }
        masked_softmax(&mut w, len);
        let o = &mut out[lo..lo + dh];
        o.fill(0.0);
        for (j, &wj) in w.iter().enumerate() {
            let v = &values[j * d + lo..j * d + lo + dh];
            for c in 0..dh {
                o[c] += wj * v[c];
            }
        }
    }
}

/// Advances every state by one position. All states must have decoded the
/// same number of positions; `inputs` holds one input embedding per state.
/// Returns the new hidden states, one row per state.
pub fn decode_step(
    p: &Params,
    mem: &CrossMemory,
    states: &mut [DecoderState],
    inputs: &Array2<f64>,
) -> Array2<f64> {
    let cfg = p.config();
    let lay = p.layout();
    let d = cfg.d_model;
    let b = states.len();
    assert_eq!(inputs.nrows(), b);
    let t = states.first().map_or(0, |s| s.len);
    debug_assert!(states.iter().all(|s| s.len == t));

    let mut x = inputs + &ArrayView1::from(p.row(lay.dec_pos, t));
    let mut ctx = Array2::<f64>::zeros((b, d));
    for (l, ls) in lay.dec_layers.iter().enumerate() {
        let (n1, _) = layer_norm(&x, p.vec(ls.ln1.gain), p.vec(ls.ln1.bias));
        let q = n1.dot(&p.mat(ls.self_attn.wq));
        let k = n1.dot(&p.mat(ls.self_attn.wk));
        let v = n1.dot(&p.mat(ls.self_attn.wv));
        for (i, st) in states.iter_mut().enumerate() {
            st.keys[l].extend(k.row(i).iter());
            st.values[l].extend(v.row(i).iter());
            let row = ctx.slice_mut(s![i, ..]).into_slice().unwrap();
            attend(
                q.row(i),
                &st.keys[l],
                &st.values[l],
                t + 1,
                cfg.n_heads,
                row,
            );
        }
        x += &ctx.dot(&p.mat(ls.self_attn.wo));

        let (n2, _) = layer_norm(&x, p.vec(ls.ln2.gain), p.vec(ls.ln2.bias));
        let q = n2.dot(&p.mat(ls.cross_attn.wq));
        let (mk, mv) = &mem.layers[l];
        let m = mk.nrows();
        for i in 0..b {
            let row = ctx.slice_mut(s![i, ..]).into_slice().unwrap();
            attend(
                q.row(i),
                mk.as_slice().unwrap(),
                mv.as_slice().unwrap(),
                m,
                cfg.n_heads,
                row,
            );
        }
        x += &ctx.dot(&p.mat(ls.cross_attn.wo));

        let (n3, _) = layer_norm(&x, p.vec(ls.ln3.gain), p.vec(ls.ln3.bias));
        x += &ffn_apply(p, &ls.ffn, &n3);
    }
    for st in states.iter_mut() {
        st.len += 1;
    }
    let (h, _) = layer_norm(&x, p.vec(lay.dec_norm.gain), p.vec(lay.dec_norm.bias));
    h
}
