//! Central finite-difference checks of analytic gradients, tensor by tensor.

use genret_core::model::{ModelConfig, Params};
use genret_core::training::{
    dense_margin_loss, multi_objective_loss, prefix_rank_loss, seq2seq_ce_loss, AlphaSchedule,
    CurriculumSchedule,
};
use genret_core::util::rng_for;
use rand::Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        docid_len: 4,
        docid_vocab: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 12,
        token_vocab: 20,
        max_seq_len: 8,
    }
}

/// Default init is too close to zero to exercise the nonlinearities, so every
/// entry, gains and biases included, gets a fresh O(0.3) value.
pub fn scaled_params(seed: u64) -> Params {
    let cfg = config();
    let mut p = Params::init(&cfg, seed).unwrap();
    let mut rng = rng_for(seed, "grad-check/params");
    let names: Vec<_> = p.layout().entries().to_vec();
    for (name, slot) in names {
        let gain = name.ends_with(".gain");
        for x in &mut p.as_mut_slice()[slot.range()] {
            let r: f64 = rng.gen_range(-0.5..0.5);
            *x = if gain { 1.0 + r } else { r };
        }
    }
    p
}

pub struct Sample {
    pub query: Vec<u32>,
    pub pos_tokens: Vec<u32>,
    pub neg_tokens: Vec<u32>,
    pub pos: Vec<u32>,
    pub neg: Vec<u32>,
    pub margin: f64,
}

pub fn sample(seed: u64) -> Sample {
    let cfg = config();
    let mut rng = rng_for(seed, "grad-check/sample");
    let mut toks = |n: usize| -> Vec<u32> {
        (0..n)
            .map(|_| rng.gen_range(0..cfg.token_vocab as u32))
            .collect()
    };
    let query = toks(5);
    let pos_tokens = toks(7);
    let neg_tokens = toks(6);
    let mut rng = rng_for(seed, "grad-check/codes");
    let mut codes = || -> Vec<u32> {
        (0..cfg.docid_len)
            .map(|_| rng.gen_range(0..cfg.docid_vocab as u32))
            .collect()
    };
    let pos = codes();
    let mut neg = codes();
    // share one code, then diverge, so a length-2 prefix still separates them
    neg[0] = pos[0];
    if neg[1] == pos[1] {
        neg[1] = (pos[1] + 1) % cfg.docid_vocab as u32;
    }
    Sample {
        query,
        pos_tokens,
        neg_tokens,
        pos,
        neg,
        margin: 0.7 + seed as f64 * 0.1,
    }
}

pub fn check(
    name: &str,
    seed: u64,
    p: &Params,
    f: &dyn Fn(&Params, Option<&mut genret_core::model::Grads>) -> f64,
) {
    let mut g = p.zeros_like();
    let base = f(p, Some(&mut g));
    assert!(base.is_finite());
    let analytic = g.as_slice().to_vec();
    let mut q = p.clone();
    let mut numeric = vec![0.0; p.len()];
    for (i, num) in numeric.iter_mut().enumerate() {
        let x = q.as_slice()[i];
        q.as_mut_slice()[i] = x + H;
        let up = f(&q, None);
        q.as_mut_slice()[i] = x - H;
        let down = f(&q, None);
        q.as_mut_slice()[i] = x;
        *num = (up - down) / (2.0 * H);
    }
    let mut checked = 0;
    for (tensor, slot) in p.layout().entries() {
        let r = slot.range();
        let a = &analytic[r.clone()];
        let n = &numeric[r];
        let diff = a
            .iter()
            .zip(n)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = norm(a).max(norm(n));
        if scale < 1e-8 {
            assert!(
                diff < 1e-8,
                "{name} seed {seed} {tensor}: abs diff {diff:e}"
            );
            continue;
        }
        checked += 1;
        let rel = diff / scale;
        assert!(
            rel < TOL,
            "{name} seed {seed} {tensor}: relative error {rel:e}"
        );
    }
    assert!(
        checked > 10,
        "{name}: only {checked} tensors carry gradient"
    );
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

pub fn dense(seed: u64) {
    let p = scaled_params(seed);
    let s = sample(seed);
    check("dense", seed, &p, &|p, g| {
        dense_margin_loss(p, &s.query, &s.pos_tokens, &s.neg_tokens, s.margin, g).unwrap()
    });
}

pub fn prefix_rank(seed: u64) {
    let alphas = AlphaSchedule::new(1.0, 4).unwrap();
    let p = scaled_params(seed);
    let s = sample(seed);
    for i in [2, 4] {
        check("prefix-rank", seed, &p, &|p, g| {
            prefix_rank_loss(p, &s.query, &s.pos, &s.neg, s.margin, i, &alphas, g).unwrap()
        });
    }
}

pub fn multi_objective(seed: u64) {
    let alphas = AlphaSchedule::new(1.0, 4).unwrap();
    let curriculum = CurriculumSchedule::new(vec![2, 3, 4], 4).unwrap();
    let p = scaled_params(seed);
    let s = sample(seed);
    check("multi-objective", seed, &p, &|p, g| {
        multi_objective_loss(
            p,
            &s.query,
            &s.pos,
            &s.neg,
            s.margin,
            4,
            &curriculum,
            &alphas,
            g,
        )
        .unwrap()
    });
}

pub fn seq2seq(seed: u64) {
    let p = scaled_params(seed);
    let s = sample(seed);
    check("seq2seq", seed, &p, &|p, g| {
        seq2seq_ce_loss(p, &s.query, &s.pos, g).unwrap()
    });
}
