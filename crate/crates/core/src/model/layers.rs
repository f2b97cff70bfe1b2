//! Forward and backward kernels for the transformer building blocks.
//!
//! Activations are row-major `n x D` matrices, weights are `in x out`, so a
//! projection is `x.dot(W)`. Every forward returns the cache its backward
//! needs; backwards accumulate into a [`Grads`] buffer and return the
//! gradient with respect to their inputs.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use super::params::{AttnSlots, FfnSlots, Grads, NormSlots, Params, Slot};

pub(crate) const LN_EPS: f64 = 1e-5;

/// `g[slot] += a^T b`
fn accumulate_at_b(g: &mut Grads, slot: Slot, a: &ArrayView2<f64>, b: &ArrayView2<f64>) {
    let mut view = g.mat_mut(slot);
    general_mat_mul(1.0, &a.t(), b, 1.0, &mut view);
}

fn accumulate_col_sum(g: &mut Grads, slot: Slot, m: &Array2<f64>) {
    let mut view = g.vec_mut(slot);
    view += &m.sum_axis(Axis(0));
}

pub(crate) struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

pub(crate) fn layer_norm(
    x: &Array2<f64>,
    gain: ArrayView1<f64>,
    bias: ArrayView1<f64>,
) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row -= mean;
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *is = 1.0 / (var + LN_EPS).sqrt();
        row *= *is;
    }
    let y = &xhat * &gain + bias;
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(
    p: &Params,
    slots: &NormSlots,
    cache: &NormCache,
    dy: &Array2<f64>,
    g: &mut Grads,
) -> Array2<f64> {
    let gain = p.vec(slots.gain);
    {
        let mut dgain = g.vec_mut(slots.gain);
        dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    }
    accumulate_col_sum(g, slots.bias, dy);
    let d = dy.ncols() as f64;
    let mut dx = dy * &gain;
    for ((mut row, xh), &is) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_d = row.sum() / d;
        let mean_dx = row.dot(&xh) / d;
        Zip::from(&mut row)
            .and(&xh)
            .for_each(|v, &h| *v = is * (*v - mean_d - h * mean_dx));
    }
    dx
}

pub(crate) fn norm_forward(
    p: &Params,
    slots: &NormSlots,
    x: &Array2<f64>,
) -> (Array2<f64>, NormCache) {
    layer_norm(x, p.vec(slots.gain), p.vec(slots.bias))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) struct FfnCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

pub(crate) fn ffn_forward(p: &Params, s: &FfnSlots, x: &Array2<f64>) -> (Array2<f64>, FfnCache) {
    let pre = x.dot(&p.mat(s.w1)) + p.vec(s.b1);
    let act = pre.mapv(gelu);
    let y = act.dot(&p.mat(s.w2)) + p.vec(s.b2);
    (
        y,
        FfnCache {
            x: x.clone(),
            pre,
            act,
        },
    )
}

pub(crate) fn ffn_backward(
    p: &Params,
    s: &FfnSlots,
    cache: &FfnCache,
    dy: &Array2<f64>,
    g: &mut Grads,
) -> Array2<f64> {
    accumulate_at_b(g, s.w2, &cache.act.view(), &dy.view());
    accumulate_col_sum(g, s.b2, dy);
    let mut dpre = dy.dot(&p.mat(s.w2).t());
    Zip::from(&mut dpre)
        .and(&cache.pre)
        .for_each(|d, &a| *d *= gelu_grad(a));
    accumulate_at_b(g, s.w1, &cache.x.view(), &dpre.view());
    accumulate_col_sum(g, s.b1, &dpre);
    dpre.dot(&p.mat(s.w1).t())
}

/// Inference-only feed-forward.
pub(crate) fn ffn_apply(p: &Params, s: &FfnSlots, x: &Array2<f64>) -> Array2<f64> {
    let act = (x.dot(&p.mat(s.w1)) + p.vec(s.b1)).mapv(gelu);
    act.dot(&p.mat(s.w2)) + p.vec(s.b2)
}

pub(crate) struct AttnCache {
    x: Array2<f64>,
    src: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per head, `n x m` attention weights.
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    causal: bool,
}

/// Softmax over `row[..len]` in place; entries past `len` are zeroed.
pub(crate) fn masked_softmax(row: &mut [f64], len: usize) {
    let max = row[..len].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in &mut row[..len] {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in &mut row[..len] {
        *v /= sum;
    }
    row[len..].fill(0.0);
}

/// Multi-head attention of queries from `x` over keys/values from `src`.
/// With `causal`, query `i` attends to source positions `0..=i`.
pub(crate) fn attention_forward(
    p: &Params,
    s: &AttnSlots,
    x: &Array2<f64>,
    src: &Array2<f64>,
    n_heads: usize,
    causal: bool,
) -> (Array2<f64>, AttnCache) {
    let (n, d) = x.dim();
    let m = src.nrows();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = x.dot(&p.mat(s.wq));
    let k = src.dot(&p.mat(s.wk));
    let v = src.dot(&p.mat(s.wv));
    let mut ctx = Array2::zeros((n, d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut sc = qh.dot(&kh.t()) * scale;
        for (i, mut row) in sc.rows_mut().into_iter().enumerate() {
            let len = if causal { (i + 1).min(m) } else { m };
            masked_softmax(row.as_slice_mut().unwrap(), len);
        }
        ctx.slice_mut(cols).assign(&sc.dot(&vh));
        probs.push(sc);
    }
    let out = ctx.dot(&p.mat(s.wo));
    (
        out,
        AttnCache {
            x: x.clone(),
            src: src.clone(),
            q,
            k,
            v,
            probs,
            ctx,
            causal,
        },
    )
}

/// Returns `(d_x, d_src)`.
pub(crate) fn attention_backward(
    p: &Params,
    s: &AttnSlots,
    cache: &AttnCache,
    dout: &Array2<f64>,
    g: &mut Grads,
) -> (Array2<f64>, Array2<f64>) {
    let (n, d) = cache.x.dim();
    let m = cache.src.nrows();
    let n_heads = cache.probs.len();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    accumulate_at_b(g, s.wo, &cache.ctx.view(), &dout.view());
    let dctx = dout.dot(&p.mat(s.wo).t());
    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((m, d));
    let mut dv = Array2::zeros((m, d));
    for (h, probs) in cache.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dctx_h = dctx.slice(cols);
        dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
        let dp = dctx_h.dot(&cache.v.slice(cols).t());
        // softmax backward: ds = P * (dP - rowsum(dP * P))
        let mut ds = Array2::zeros((n, m));
        for i in 0..n {
            let len = if cache.causal { (i + 1).min(m) } else { m };
            let pr = probs.row(i);
            let dpr = dp.row(i);
            let dotp: f64 = (0..len).map(|j| pr[j] * dpr[j]).sum();
            for j in 0..len {
                ds[[i, j]] = pr[j] * (dpr[j] - dotp) * scale;
            }
        }
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    accumulate_at_b(g, s.wq, &cache.x.view(), &dq.view());
    accumulate_at_b(g, s.wk, &cache.src.view(), &dk.view());
    accumulate_at_b(g, s.wv, &cache.src.view(), &dv.view());
    let dx = dq.dot(&p.mat(s.wq).t());
    let dsrc = dk.dot(&p.mat(s.wk).t()) + dv.dot(&p.mat(s.wv).t());
    (dx, dsrc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x =
            Array2::from_shape_vec((2, 4), vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 0.0, 5.0]).unwrap();
        let ones = Array1::ones(4);
        let zeros = Array1::zeros(4);
        let (y, _) = layer_norm(&x, ones.view(), zeros.view());
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn masked_softmax_sums_to_one() {
        let mut r = [1.0, 2.0, 3.0, 9.0];
        masked_softmax(&mut r, 3);
        assert!((r[..3].iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(r[3], 0.0);
    }
}
