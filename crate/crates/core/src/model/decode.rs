//! Incremental decoding with a per-sequence key/value cache.
//!
//! A batch of prompts is advanced one position per iteration. Sequences still
//! reading their prompt are fed the next prompt token; the others are fed the
//! token they just sampled. Each sequence owns its RNG, so its output does not
//! depend on which other sequences share the batch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::engine::{causal_softmax, gelu, layer_norm};
use super::real::matmul;
use super::NanoLm;
use crate::error::{Error, Result};
use crate::params::ParameterVector;
use crate::vocab::{Vocabulary, EOS};

#[derive(Clone, Debug)]
pub struct GenerationRequest {
    pub prompt: String,
    pub seed: u64,
}

struct Live {
    tokens: Vec<u32>,
    prompt_len: usize,
    pos: usize,
    rng: ChaCha8Rng,
    done: bool,
    /// Per layer: keys then values, `capacity × d` each.
    kv: Vec<(Vec<f32>, Vec<f32>)>,
}

/// Samples a token; temperature 0 takes the first maximal logit.
fn sample(logits: &[f32], temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    if temperature == 0.0 {
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &l| m.max(l)) as f64;
    let weights: Vec<f64> = logits.iter().map(|&l| ((l as f64 - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i as u32;
        }
    }
    (weights.len() - 1) as u32
}

/// Completes every prompt; stops a sequence at EOS, after `max_new_tokens`
/// tokens, or when the context is full. Returns the decoded completions.
pub fn generate_batch(
    params: &ParameterVector,
    vocab: &Vocabulary,
    requests: &[GenerationRequest],
    temperature: f64,
    max_new_tokens: usize,
) -> Result<Vec<String>> {
    if !(temperature >= 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature {temperature} must be finite and nonnegative")));
    }
    let lm = NanoLm::for_params(params)?;
    lm.check(params)?;
    let lay = &lm.layout;
    let (d, ff, v, ctx) = (lay.d, lay.ff, lay.vocab, lay.context);
    let heads = lay.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let p = &params.values;

    let mut live = Vec::with_capacity(requests.len());
    for req in requests {
        let tokens = vocab.prompt_tokens(&req.prompt)?;
        if tokens.len() >= ctx {
            return Err(Error::Length { len: tokens.len() + 1, max: ctx });
        }
        let capacity = (tokens.len() + max_new_tokens).min(ctx);
        live.push(Live {
            prompt_len: tokens.len(),
            tokens,
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(req.seed),
            done: max_new_tokens == 0,
            kv: (0..lay.layers.len()).map(|_| (vec![0.0; capacity * d], vec![0.0; capacity * d])).collect(),
        });
    }

    let mut x = Vec::new();
    let mut a = Vec::new();
    let mut xhat = Vec::new();
    let mut rstd = Vec::new();
    let mut qkv = Vec::new();
    let mut att = Vec::new();
    let mut h = Vec::new();
    let mut logits = Vec::new();
    let mut scores = vec![0.0f32; ctx];
    loop {
        let active: Vec<usize> = (0..live.len()).filter(|&i| !live[i].done).collect();
        if active.is_empty() {
            break;
        }
        let b = active.len();
        x.clear();
        x.resize(b * d, 0.0);
        for (r, &i) in active.iter().enumerate() {
            let s = &live[i];
            let tok = s.tokens[s.pos] as usize;
            for j in 0..d {
                x[r * d + j] = p[lay.tok_emb + tok * d + j] + p[lay.pos_emb + s.pos * d + j];
            }
        }
        a.resize(b * d, 0.0);
        xhat.resize(b * d, 0.0);
        rstd.resize(b, 0.0);
        qkv.resize(b * 3 * d, 0.0);
        att.resize(b * d, 0.0);
        h.resize(b * ff, 0.0);

        for (l, lo) in lay.layers.iter().enumerate() {
            layer_norm(&x, &p[lo.ln1_g..lo.ln1_g + d], &p[lo.ln1_b..lo.ln1_b + d], d, &mut a, &mut xhat, &mut rstd);
            matmul(b, d, 3 * d, &a, false, &p[lo.w_qkv..lo.w_qkv + 3 * d * d], false, &mut qkv, false);
            for row in qkv.chunks_exact_mut(3 * d) {
                for (q, bias) in row.iter_mut().zip(&p[lo.b_qkv..lo.b_qkv + 3 * d]) {
                    *q += *bias;
                }
            }
            for (r, &i) in active.iter().enumerate() {
                let s = &mut live[i];
                let pos = s.pos;
                let (keys, values) = &mut s.kv[l];
                keys[pos * d..(pos + 1) * d].copy_from_slice(&qkv[r * 3 * d + d..r * 3 * d + 2 * d]);
                values[pos * d..(pos + 1) * d].copy_from_slice(&qkv[r * 3 * d + 2 * d..r * 3 * d + 3 * d]);
                for hd in 0..heads {
                    let q = &qkv[r * 3 * d + hd * dh..r * 3 * d + (hd + 1) * dh];
                    for (t, sc) in scores[..=pos].iter_mut().enumerate() {
                        let k = &keys[t * d + hd * dh..t * d + (hd + 1) * dh];
                        *sc = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
                    }
                    causal_softmax(&mut scores[..=pos], pos);
                    let out = &mut att[r * d + hd * dh..r * d + (hd + 1) * dh];
                    out.fill(0.0);
                    for (t, &w) in scores[..=pos].iter().enumerate() {
                        let vrow = &values[t * d + hd * dh..t * d + (hd + 1) * dh];
                        for (o, vv) in out.iter_mut().zip(vrow) {
                            *o += w * vv;
                        }
                    }
                }
            }
            matmul(b, d, d, &att, false, &p[lo.w_o..lo.w_o + d * d], false, &mut x, true);
            for row in x.chunks_exact_mut(d) {
                for (xv, bias) in row.iter_mut().zip(&p[lo.b_o..lo.b_o + d]) {
                    *xv += *bias;
                }
            }
            layer_norm(&x, &p[lo.ln2_g..lo.ln2_g + d], &p[lo.ln2_b..lo.ln2_b + d], d, &mut a, &mut xhat, &mut rstd);
            matmul(b, d, ff, &a, false, &p[lo.w_1..lo.w_1 + d * ff], false, &mut h, false);
            for row in h.chunks_exact_mut(ff) {
                for (hv, bias) in row.iter_mut().zip(&p[lo.b_1..lo.b_1 + ff]) {
                    *hv = gelu(*hv + *bias);
                }
            }
            matmul(b, ff, d, &h, false, &p[lo.w_2..lo.w_2 + ff * d], false, &mut x, true);
            for row in x.chunks_exact_mut(d) {
                for (xv, bias) in row.iter_mut().zip(&p[lo.b_2..lo.b_2 + d]) {
                    *xv += *bias;
                }
            }
        }
        layer_norm(&x, &p[lay.lnf_g..lay.lnf_g + d], &p[lay.lnf_b..lay.lnf_b + d], d, &mut a, &mut xhat, &mut rstd);
        logits.resize(b * v, 0.0);
        match lay.head_w {
            Some(hw) => matmul(b, d, v, &a, false, &p[hw..hw + d * v], false, &mut logits, false),
            None => matmul(b, d, v, &a, false, &p[lay.tok_emb..lay.tok_emb + v * d], true, &mut logits, false),
        }

        for (r, &i) in active.iter().enumerate() {
            let s = &mut live[i];
            s.pos += 1;
            if s.pos < s.tokens.len() {
                continue;
            }
            let row = &mut logits[r * v..(r + 1) * v];
            for (l, bias) in row.iter_mut().zip(&p[lay.head_b..lay.head_b + v]) {
                *l += *bias;
            }
            let next = sample(row, temperature, &mut s.rng);
            if next == EOS {
                s.done = true;
                continue;
            }
            s.tokens.push(next);
            let produced = s.tokens.len() - s.prompt_len;
            if produced >= max_new_tokens || s.tokens.len() >= ctx {
                s.done = true;
            }
        }
    }
    Ok(live.iter().map(|s| vocab.decode(&s.tokens[s.prompt_len..])).collect())
}

/// Completes one prompt. With temperature 0 the seed is irrelevant.
pub fn generate(
    params: &ParameterVector,
    vocab: &Vocabulary,
    prompt_text: &str,
    temperature: f64,
    max_new_tokens: usize,
    seed: u64,
) -> Result<String> {
    let req = GenerationRequest { prompt: prompt_text.to_string(), seed };
    Ok(generate_batch(params, vocab, std::slice::from_ref(&req), temperature, max_new_tokens)?.remove(0))
}
