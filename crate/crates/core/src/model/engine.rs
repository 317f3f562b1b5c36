//! Forward and reverse passes over a packed batch.
//!
//! Sequences are concatenated row-wise (no padding rows); every dense layer is
//! one gemm over all rows and attention runs per sequence on its own rows, so
//! a sequence never attends across a boundary.

use super::real::{gemm, matmul, Real, View};
use super::{LayerOffsets, Layout, LN_EPS};
use crate::vocab::TokenizedExample;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

pub(crate) fn gelu<R: Real>(x: R) -> R {
    let x3 = x * x * x;
    let inner = R::of(GELU_C) * (x + R::of(GELU_K) * x3);
    R::of(0.5) * x * (R::one() + inner.tanh())
}

fn gelu_grad<R: Real>(x: R) -> R {
    let inner = R::of(GELU_C) * (x + R::of(GELU_K) * x * x * x);
    let t = inner.tanh();
    let dinner = R::of(GELU_C) * (R::one() + R::of(3.0 * GELU_K) * x * x);
    R::of(0.5) * (R::one() + t) + R::of(0.5) * x * (R::one() - t * t) * dinner
}

pub(crate) struct Packing<'a> {
    pub tokens: Vec<u32>,
    /// `(first row, length)` per sequence.
    pub seqs: Vec<(usize, usize)>,
    pub masks: Vec<&'a [bool]>,
    pub rows: usize,
}

impl<'a> Packing<'a> {
    pub fn new(seqs: &[&[u32]]) -> Packing<'a> {
        let mut tokens = Vec::with_capacity(seqs.iter().map(|s| s.len()).sum());
        let mut spans = Vec::with_capacity(seqs.len());
        for s in seqs {
            spans.push((tokens.len(), s.len()));
            tokens.extend_from_slice(s);
        }
        let rows = tokens.len();
        Packing { tokens, seqs: spans, masks: Vec::new(), rows }
    }

    pub fn from_batch(batch: &'a [TokenizedExample]) -> Packing<'a> {
        let seqs: Vec<&[u32]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
        let mut p = Packing::new(&seqs);
        p.masks = batch.iter().map(|e| e.loss_mask.as_slice()).collect();
        p
    }
}

/// Row-wise layer norm. Statistics are accumulated in `f64`.
pub(crate) fn layer_norm<R: Real>(
    x: &[R],
    gain: &[R],
    bias: &[R],
    d: usize,
    out: &mut [R],
    xhat: &mut [R],
    rstd: &mut [R],
) {
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().map(|v| v.f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = R::of(rs);
        for j in 0..d {
            let h = R::of((row[j].f64() - mean) * rs);
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain[j] + bias[j];
        }
    }
}

/// Adds the input gradient of a layer norm to `dx` and returns the gain and
/// bias gradients.
fn layer_norm_backward<R: Real>(
    dy: &[R],
    xhat: &[R],
    rstd: &[R],
    gain: &[R],
    d: usize,
    dx: &mut [R],
) -> (Vec<f64>, Vec<f64>) {
    let mut dgain = vec![0.0f64; d];
    let mut dbias = vec![0.0f64; d];
    for r in 0..rstd.len() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut mean1 = 0.0f64;
        let mut mean2 = 0.0f64;
        for j in 0..d {
            let g = (dyr[j] * gain[j]).f64();
            mean1 += g;
            mean2 += g * xr[j].f64();
            dgain[j] += (dyr[j] * xr[j]).f64();
            dbias[j] += dyr[j].f64();
        }
        mean1 /= d as f64;
        mean2 /= d as f64;
        let rs = rstd[r].f64();
        for j in 0..d {
            let g = (dyr[j] * gain[j]).f64();
            dx[r * d + j] += R::of(rs * (g - mean1 - xr[j].f64() * mean2));
        }
    }
    (dgain, dbias)
}

fn add_f64<R: Real>(dst: &mut [R], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += R::of(*s);
    }
}

fn add_colsum<R: Real>(dst: &mut [R], src: &[R], cols: usize) {
    let mut acc = vec![0.0f64; cols];
    for row in src.chunks_exact(cols) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v.f64();
        }
    }
    add_f64(dst, &acc);
}

fn add_bias_rows<R: Real>(x: &mut [R], bias: &[R]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

/// Softmax over `row[..=limit]`, zeros beyond.
pub(crate) fn causal_softmax<R: Real>(row: &mut [R], limit: usize) {
    let mut max = R::neg_infinity();
    for &v in &row[..=limit] {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0f64;
    for v in &mut row[..=limit] {
        *v = (*v - max).exp();
        sum += v.f64();
    }
    let inv = R::of(1.0 / sum);
    for v in &mut row[..=limit] {
        *v *= inv;
    }
    for v in &mut row[limit + 1..] {
        *v = R::zero();
    }
}

struct LayerCache<R> {
    xhat1: Vec<R>,
    rstd1: Vec<R>,
    a: Vec<R>,
    qkv: Vec<R>,
    probs: Vec<R>,
    att: Vec<R>,
    xhat2: Vec<R>,
    rstd2: Vec<R>,
    m: Vec<R>,
    hpre: Vec<R>,
    hact: Vec<R>,
}

struct Cache<R> {
    layers: Vec<LayerCache<R>>,
    xhatf: Vec<R>,
    rstdf: Vec<R>,
    f: Vec<R>,
    logits: Vec<R>,
    prob_offsets: Vec<usize>,
}

fn slice<R>(p: &[R], at: usize, len: usize) -> &[R] {
    &p[at..at + len]
}

fn forward<R: Real>(lay: &Layout, p: &[R], pk: &Packing) -> Cache<R> {
    let (n, d, ff, v) = (pk.rows, lay.d, lay.ff, lay.vocab);
    let dh = d / lay.heads;
    let scale = R::of(1.0 / (dh as f64).sqrt());

    let mut prob_offsets = Vec::with_capacity(pk.seqs.len());
    let mut prob_total = 0;
    for &(_, len) in &pk.seqs {
        prob_offsets.push(prob_total);
        prob_total += lay.heads * len * len;
    }

    let mut x = vec![R::zero(); n * d];
    for &(o, len) in &pk.seqs {
        for t in 0..len {
            let tok = pk.tokens[o + t] as usize;
            let e = slice(p, lay.tok_emb + tok * d, d);
            let pe = slice(p, lay.pos_emb + t * d, d);
            for j in 0..d {
                x[(o + t) * d + j] = e[j] + pe[j];
            }
        }
    }

    let mut layers = Vec::with_capacity(lay.layers.len());
    for lo in &lay.layers {
        let mut c = LayerCache {
            xhat1: vec![R::zero(); n * d],
            rstd1: vec![R::zero(); n],
            a: vec![R::zero(); n * d],
            qkv: vec![R::zero(); n * 3 * d],
            probs: vec![R::zero(); prob_total],
            att: vec![R::zero(); n * d],
            xhat2: vec![R::zero(); n * d],
            rstd2: vec![R::zero(); n],
            m: vec![R::zero(); n * d],
            hpre: vec![R::zero(); n * ff],
            hact: vec![R::zero(); n * ff],
        };
        layer_norm(&x, slice(p, lo.ln1_g, d), slice(p, lo.ln1_b, d), d, &mut c.a, &mut c.xhat1, &mut c.rstd1);
        matmul(n, d, 3 * d, &c.a, false, slice(p, lo.w_qkv, d * 3 * d), false, &mut c.qkv, false);
        add_bias_rows(&mut c.qkv, slice(p, lo.b_qkv, 3 * d));

        for (s, &(o, len)) in pk.seqs.iter().enumerate() {
            for h in 0..lay.heads {
                let pb = prob_offsets[s] + h * len * len;
                let q = View::rows(o * 3 * d + h * dh, 3 * d);
                let k = View::rows(o * 3 * d + d + h * dh, 3 * d);
                let vv = View::rows(o * 3 * d + 2 * d + h * dh, 3 * d);
                gemm(len, dh, len, scale, &c.qkv, q, &c.qkv, k.t(), R::zero(), &mut c.probs, View::rows(pb, len));
                for i in 0..len {
                    causal_softmax(&mut c.probs[pb + i * len..pb + (i + 1) * len], i);
                }
                gemm(
                    len,
                    len,
                    dh,
                    R::one(),
                    &c.probs,
                    View::rows(pb, len),
                    &c.qkv,
                    vv,
                    R::zero(),
                    &mut c.att,
                    View::rows(o * d + h * dh, d),
                );
            }
        }

        matmul(n, d, d, &c.att, false, slice(p, lo.w_o, d * d), false, &mut x, true);
        add_bias_rows(&mut x, slice(p, lo.b_o, d));

        layer_norm(&x, slice(p, lo.ln2_g, d), slice(p, lo.ln2_b, d), d, &mut c.m, &mut c.xhat2, &mut c.rstd2);
        matmul(n, d, ff, &c.m, false, slice(p, lo.w_1, d * ff), false, &mut c.hpre, false);
        add_bias_rows(&mut c.hpre, slice(p, lo.b_1, ff));
        for (a, &z) in c.hact.iter_mut().zip(&c.hpre) {
            *a = gelu(z);
        }
        matmul(n, ff, d, &c.hact, false, slice(p, lo.w_2, ff * d), false, &mut x, true);
        add_bias_rows(&mut x, slice(p, lo.b_2, d));
        layers.push(c);
    }

    let mut f = vec![R::zero(); n * d];
    let mut xhatf = vec![R::zero(); n * d];
    let mut rstdf = vec![R::zero(); n];
    layer_norm(&x, slice(p, lay.lnf_g, d), slice(p, lay.lnf_b, d), d, &mut f, &mut xhatf, &mut rstdf);
    let mut logits = vec![R::zero(); n * v];
    match lay.head_w {
        Some(hw) => matmul(n, d, v, &f, false, slice(p, hw, d * v), false, &mut logits, false),
        None => matmul(n, d, v, &f, false, slice(p, lay.tok_emb, v * d), true, &mut logits, false),
    }
    add_bias_rows(&mut logits, slice(p, lay.head_b, v));

    Cache { layers, xhatf, rstdf, f, logits, prob_offsets }
}

/// `(sum of masked NLL, masked count)`; with `dlogits` set, writes
/// `(softmax - onehot) / count` for scored rows.
fn masked_nll<R: Real>(logits: &[R], pk: &Packing, v: usize, mut dlogits: Option<&mut [R]>) -> (f64, usize) {
    let count: usize = pk.masks.iter().map(|m| m.iter().skip(1).filter(|&&b| b).count()).sum();
    let inv = 1.0 / count.max(1) as f64;
    let mut total = 0.0f64;
    for (s, &(o, len)) in pk.seqs.iter().enumerate() {
        for t in 1..len {
            if !pk.masks[s][t] {
                continue;
            }
            let row = o + t - 1;
            let target = pk.tokens[o + t] as usize;
            let l = &logits[row * v..(row + 1) * v];
            let max = l.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = l.iter().map(|x| (x.f64() - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - l[target].f64();
            if let Some(dl) = dlogits.as_deref_mut() {
                let out = &mut dl[row * v..(row + 1) * v];
                for (j, o) in out.iter_mut().enumerate() {
                    let prob = (l[j].f64() - lse).exp();
                    let onehot = if j == target { 1.0 } else { 0.0 };
                    *o = R::of((prob - onehot) * inv);
                }
            }
        }
    }
    (total, count)
}

fn attention_backward<R: Real>(
    lay: &Layout,
    pk: &Packing,
    c: &LayerCache<R>,
    prob_offsets: &[usize],
    datt: &[R],
    dqkv: &mut [R],
) {
    let d = lay.d;
    let dh = d / lay.heads;
    let scale = R::of(1.0 / (dh as f64).sqrt());
    let max_len = pk.seqs.iter().map(|s| s.1).max().unwrap_or(0);
    let mut dp = vec![R::zero(); max_len * max_len];
    for (s, &(o, len)) in pk.seqs.iter().enumerate() {
        for h in 0..lay.heads {
            let pb = prob_offsets[s] + h * len * len;
            let probs = View::rows(pb, len);
            let q = View::rows(o * 3 * d + h * dh, 3 * d);
            let k = View::rows(o * 3 * d + d + h * dh, 3 * d);
            let vv = View::rows(o * 3 * d + 2 * d + h * dh, 3 * d);
            let dout = View::rows(o * d + h * dh, d);
            let dps = View::rows(0, len);
            gemm(len, dh, len, R::one(), datt, dout, &c.qkv, vv.t(), R::zero(), &mut dp, dps);
            gemm(len, len, dh, R::one(), &c.probs, probs.t(), datt, dout, R::zero(), dqkv, vv);
            for i in 0..len {
                let prow = &c.probs[pb + i * len..pb + i * len + len];
                let drow = &mut dp[i * len..(i + 1) * len];
                let mut dot = R::zero();
                for j in 0..=i {
                    dot += prow[j] * drow[j];
                }
                for j in 0..len {
                    drow[j] = if j <= i { prow[j] * (drow[j] - dot) } else { R::zero() };
                }
            }
            gemm(len, len, dh, scale, &dp, dps, &c.qkv, k, R::zero(), dqkv, q);
            gemm(len, len, dh, scale, &dp, dps.t(), &c.qkv, q, R::zero(), dqkv, k);
        }
    }
}

fn backward<R: Real>(lay: &Layout, p: &[R], pk: &Packing, cache: &Cache<R>, dlogits: &[R]) -> Vec<R> {
    let (n, d, ff, v) = (pk.rows, lay.d, lay.ff, lay.vocab);
    let mut g = vec![R::zero(); lay.total];

    let mut df = vec![R::zero(); n * d];
    match lay.head_w {
        Some(hw) => {
            matmul(d, n, v, &cache.f, true, dlogits, false, &mut g[hw..hw + d * v], true);
            matmul(n, v, d, dlogits, false, slice(p, hw, d * v), true, &mut df, false);
        }
        None => {
            let te = lay.tok_emb;
            matmul(v, n, d, dlogits, true, &cache.f, false, &mut g[te..te + v * d], true);
            matmul(n, v, d, dlogits, false, slice(p, te, v * d), false, &mut df, false);
        }
    }
    add_colsum(&mut g[lay.head_b..lay.head_b + v], dlogits, v);

    let mut dx = vec![R::zero(); n * d];
    let (dg, db) = layer_norm_backward(&df, &cache.xhatf, &cache.rstdf, slice(p, lay.lnf_g, d), d, &mut dx);
    add_f64(&mut g[lay.lnf_g..lay.lnf_g + d], &dg);
    add_f64(&mut g[lay.lnf_b..lay.lnf_b + d], &db);

    let mut dh = vec![R::zero(); n * ff];
    let mut dm = vec![R::zero(); n * d];
    let mut datt = vec![R::zero(); n * d];
    let mut dqkv = vec![R::zero(); n * 3 * d];
    let mut da = vec![R::zero(); n * d];
    for (lo, c) in lay.layers.iter().zip(&cache.layers).rev() {
        let LayerOffsets { ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_1, b_1, w_2, b_2 } = *lo;

        // MLP branch.
        matmul(n, d, ff, &dx, false, slice(p, w_2, ff * d), true, &mut dh, false);
        matmul(ff, n, d, &c.hact, true, &dx, false, &mut g[w_2..w_2 + ff * d], true);
        add_colsum(&mut g[b_2..b_2 + d], &dx, d);
        for (gr, &z) in dh.iter_mut().zip(&c.hpre) {
            *gr *= gelu_grad(z);
        }
        matmul(d, n, ff, &c.m, true, &dh, false, &mut g[w_1..w_1 + d * ff], true);
        add_colsum(&mut g[b_1..b_1 + ff], &dh, ff);
        matmul(n, ff, d, &dh, false, slice(p, w_1, d * ff), true, &mut dm, false);
        let (dg, db) = layer_norm_backward(&dm, &c.xhat2, &c.rstd2, slice(p, ln2_g, d), d, &mut dx);
        add_f64(&mut g[ln2_g..ln2_g + d], &dg);
        add_f64(&mut g[ln2_b..ln2_b + d], &db);

        // Attention branch.
        matmul(n, d, d, &dx, false, slice(p, w_o, d * d), true, &mut datt, false);
        matmul(d, n, d, &c.att, true, &dx, false, &mut g[w_o..w_o + d * d], true);
        add_colsum(&mut g[b_o..b_o + d], &dx, d);
        attention_backward(lay, pk, c, &cache.prob_offsets, &datt, &mut dqkv);
        matmul(d, n, 3 * d, &c.a, true, &dqkv, false, &mut g[w_qkv..w_qkv + d * 3 * d], true);
        add_colsum(&mut g[b_qkv..b_qkv + 3 * d], &dqkv, 3 * d);
        matmul(n, 3 * d, d, &dqkv, false, slice(p, w_qkv, d * 3 * d), true, &mut da, false);
        let (dg, db) = layer_norm_backward(&da, &c.xhat1, &c.rstd1, slice(p, ln1_g, d), d, &mut dx);
        add_f64(&mut g[ln1_g..ln1_g + d], &dg);
        add_f64(&mut g[ln1_b..ln1_b + d], &db);
    }

    for &(o, len) in &pk.seqs {
        for t in 0..len {
            let tok = pk.tokens[o + t] as usize;
            let row = &dx[(o + t) * d..(o + t + 1) * d];
            for j in 0..d {
                g[lay.tok_emb + tok * d + j] += row[j];
                g[lay.pos_emb + t * d + j] += row[j];
            }
        }
    }
    g
}

pub(crate) fn loss_and_grad<R: Real>(lay: &Layout, p: &[R], batch: &[TokenizedExample]) -> (f64, Vec<R>) {
    let pk = Packing::from_batch(batch);
    let cache = forward(lay, p, &pk);
    let mut dlogits = vec![R::zero(); pk.rows * lay.vocab];
    let (total, count) = masked_nll(&cache.logits, &pk, lay.vocab, Some(&mut dlogits));
    let grad = backward(lay, p, &pk, &cache, &dlogits);
    (total / count as f64, grad)
}

pub(crate) fn loss<R: Real>(lay: &Layout, p: &[R], batch: &[TokenizedExample]) -> f64 {
    let pk = Packing::from_batch(batch);
    let cache = forward(lay, p, &pk);
    let (total, count) = masked_nll(&cache.logits, &pk, lay.vocab, None);
    total / count as f64
}

pub(crate) fn logits<R: Real>(lay: &Layout, p: &[R], seqs: &[&[u32]]) -> Vec<f32> {
    let pk = Packing::new(seqs);
    let cache = forward(lay, p, &pk);
    cache.logits.iter().map(|x| x.f64() as f32).collect()
}
