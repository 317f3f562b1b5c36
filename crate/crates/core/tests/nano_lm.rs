use mot_core::model::{generate, generate_batch, init_params, GenerationRequest, ModelConfig, NanoLm};
use mot_core::params::ParameterVector;
use mot_core::vocab::{TokenizedExample, Vocabulary, BOS};
use mot_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn vocab() -> Vocabulary {
    Vocabulary::standard()
}

fn example(prompt: &str, target: &str) -> TokenizedExample {
    TokenizedExample::new(&vocab(), prompt, target).unwrap()
}

/// Initialized weights with every gain and bias perturbed, so no segment
/// sits at a special value.
fn random_params(cfg: &ModelConfig, seed: u64) -> ParameterVector {
    let mut p = init_params(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    for seg in p.segments.clone() {
        if seg.shape.len() == 1 {
            for v in &mut p.values[seg.offset..seg.offset + seg.len()] {
                *v += rng.gen_range(-0.3f32..0.3);
            }
        }
    }
    p
}

fn random_text(rng: &mut ChaCha8Rng, len: usize) -> String {
    const POOL: &[u8] = b"0123456789 +-*=:\nstepANSWER>";
    (0..len).map(|_| POOL[rng.gen_range(0..POOL.len())] as char).collect()
}

fn random_batch(rng: &mut ChaCha8Rng) -> Vec<TokenizedExample> {
    let n = rng.gen_range(1..4);
    (0..n)
        .map(|_| {
            let p = rng.gen_range(1..8);
            let t = rng.gen_range(1..14);
            example(&random_text(rng, p), &random_text(rng, t))
        })
        .collect()
}

fn small() -> ModelConfig {
    ModelConfig { d_model: 16, n_layers: 2, n_heads: 2, context_length: 32, ..ModelConfig::default() }
}

/// Central differences in f64 against the analytic gradient, 64 coordinates
/// per draw, 10 draws (default and tied-head configurations).
#[test]
fn gradient_matches_central_differences() {
    let mut worst = 0.0f64;
    for draw in 0..10u64 {
        let cfg = if draw % 2 == 0 {
            ModelConfig::default()
        } else {
            ModelConfig { tie_head: true, ..small() }
        };
        let lm = NanoLm::new(cfg.clone()).unwrap();
        let params = random_params(&cfg, 100 + draw).to_f64();
        let mut rng = ChaCha8Rng::seed_from_u64(draw);
        let batch = random_batch(&mut rng);
        let (_, grad) = lm.loss_and_grad_raw(&params, &batch).unwrap();
        for _ in 0..64 {
            let i = rng.gen_range(0..params.len());
            let h = 1e-4;
            let mut plus = params.clone();
            plus[i] += h;
            let mut minus = params.clone();
            minus[i] -= h;
            let fd = (lm.loss_raw(&plus, &batch).unwrap() - lm.loss_raw(&minus, &batch).unwrap()) / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-8);
            let rel = (grad[i] - fd).abs() / denom;
            worst = worst.max(rel);
            assert!(rel < 1e-4, "draw {draw} coord {i}: analytic {} vs fd {fd}", grad[i]);
        }
    }
    eprintln!("worst relative error {worst:.3e}");
}

#[test]
fn gradient_has_the_parameter_layout() {
    let cfg = ModelConfig::default();
    let lm = NanoLm::new(cfg.clone()).unwrap();
    let p = init_params(&cfg, 0).unwrap();
    let (loss, grad) = lm.loss_and_grad(&p, &[example("1 + 2", "=> ANSWER: 3")]).unwrap();
    assert!(loss.is_finite());
    assert_eq!(grad.len(), p.len());
    assert!(grad.iter().all(|g| g.is_finite()));
}

#[test]
fn zeroed_head_gives_uniform_loss() {
    for cfg in [ModelConfig::default(), ModelConfig { tie_head: true, ..ModelConfig::default() }] {
        let lm = NanoLm::new(cfg.clone()).unwrap();
        let mut p = init_params(&cfg, 3).unwrap();
        let head = if cfg.tie_head { "tok_emb" } else { "head.w" };
        if cfg.tie_head {
            // Tied: zero logits need a zero final-norm gain instead.
            p.segment_values_mut("ln_f.gain").unwrap().fill(0.0);
        } else {
            p.segment_values_mut(head).unwrap().fill(0.0);
        }
        let batch = vec![example("3 + 4 * 2", "step 1: 3 + 4 = 7\n=> ANSWER: 4"), example("1", "1")];
        let loss = lm.loss(&p, &batch).unwrap();
        assert!((loss - (cfg.vocab_size as f64).ln()).abs() < 1e-6, "{loss}");
    }
}

#[test]
fn degenerate_batches_rejected() {
    let cfg = ModelConfig::default();
    let lm = NanoLm::new(cfg.clone()).unwrap();
    let p = init_params(&cfg, 0).unwrap();
    let mut ex = example("1 + 1", "2");
    ex.loss_mask.iter_mut().for_each(|m| *m = false);
    assert!(matches!(lm.loss_and_grad(&p, &[ex]), Err(Error::InvalidBatch(_))));
    assert!(matches!(lm.loss_and_grad(&p, &[]), Err(Error::InvalidBatch(_))));
    let long = example(&"1".repeat(250), "=> ANSWER: 1");
    assert!(matches!(lm.loss_and_grad(&p, &[long]), Err(Error::Length { .. })));
}

#[test]
fn mismatched_params_rejected() {
    let lm = NanoLm::new(ModelConfig::default()).unwrap();
    let other = init_params(&small(), 0).unwrap();
    assert!(matches!(lm.loss_and_grad(&other, &[example("1", "1")]), Err(Error::Incompatible { .. })));
}

#[test]
fn forward_logits_normalize_and_validate_tokens() {
    let cfg = ModelConfig::default();
    let lm = NanoLm::new(cfg.clone()).unwrap();
    let p = random_params(&cfg, 4);
    let prefix = vocab().prompt_tokens("7 * 3 - 2").unwrap();
    let logits = lm.forward_logits(&p, &prefix).unwrap();
    assert_eq!(logits.len(), cfg.vocab_size);
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l as f64));
    let z: f64 = logits.iter().map(|&l| (l as f64 - max).exp()).sum();
    let total: f64 = logits.iter().map(|&l| (l as f64 - max).exp() / z).sum();
    assert!((total - 1.0).abs() < 1e-6);
    assert!(matches!(lm.forward_logits(&p, &[BOS, 999]), Err(Error::Vocabulary(_))));
    assert!(matches!(lm.forward_logits(&p, &vec![BOS; 256]), Err(Error::Length { .. })));
}

/// Per-token NLL from teacher-forced logits, summed over the mask, equals the
/// batch loss times the masked count. Prompt positions contribute nothing.
#[test]
fn teacher_forced_nll_matches_loss() {
    let cfg = ModelConfig::default();
    let lm = NanoLm::new(cfg.clone()).unwrap();
    let p = random_params(&cfg, 5);
    let batch = vec![example("2 + 2", "step 1: 2 + 2 = 4\n=> ANSWER: 4"), example("9 - 1 * 3", "=> ANSWER: 4")];
    let loss = lm.loss(&p, &batch).unwrap();
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for ex in &batch {
        let rows = lm.sequence_logits(&p, &ex.tokens).unwrap();
        for t in 1..ex.len() {
            if !ex.loss_mask[t] {
                continue;
            }
            let l = &rows[t - 1];
            let max = l.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
            let lse = max + l.iter().map(|&x| (x as f64 - max).exp()).sum::<f64>().ln();
            sum += lse - l[ex.tokens[t] as usize] as f64;
            count += 1;
        }
    }
    assert!((sum - loss * count as f64).abs() < 1e-5, "{sum} vs {}", loss * count as f64);

    // Scoring a prompt position changes the loss, so the mask is what excludes it.
    let mut widened = batch.clone();
    widened[0].loss_mask[2] = true;
    assert!((lm.loss(&p, &widened).unwrap() - loss).abs() > 1e-6);
}

#[test]
fn batch_order_does_not_change_logits() {
    let cfg = ModelConfig::default();
    let lm = NanoLm::new(cfg.clone()).unwrap();
    let p = random_params(&cfg, 6);
    let v = vocab();
    let seqs: Vec<Vec<u32>> = ["1 + 2", "3 * 4 - 5 + 6", "7"].iter().map(|s| v.prompt_tokens(s).unwrap()).collect();
    let fwd: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    let rev: Vec<&[u32]> = seqs.iter().rev().map(Vec::as_slice).collect();
    let a = lm.batch_logits(&p, &fwd).unwrap();
    let mut b = lm.batch_logits(&p, &rev).unwrap();
    b.reverse();
    for (x, y) in a.iter().zip(&b) {
        for (u, w) in x.iter().zip(y) {
            assert!((u - w).abs() <= 1e-6 * u.abs().max(1.0));
        }
    }
}

#[test]
fn logits_are_causal() {
    let cfg = ModelConfig::default();
    let lm = NanoLm::new(cfg.clone()).unwrap();
    let p = random_params(&cfg, 7);
    let v = vocab();
    let a = v.prompt_tokens("1 + 2 * 3 - 4").unwrap();
    let mut b = a.clone();
    let cut = 6;
    for t in &mut b[cut + 1..] {
        *t = v.id('9').unwrap();
    }
    let la = lm.sequence_logits(&p, &a).unwrap();
    let lb = lm.sequence_logits(&p, &b).unwrap();
    for t in 0..=cut {
        assert_eq!(la[t], lb[t], "position {t}");
    }
    assert_ne!(la[cut + 1], lb[cut + 1]);
}

#[test]
fn greedy_generation_ignores_seed() {
    let cfg = ModelConfig::default();
    let p = random_params(&cfg, 8);
    let v = vocab();
    let a = generate(&p, &v, "3 + 4", 0.0, 40, 1).unwrap();
    let b = generate(&p, &v, "3 + 4", 0.0, 40, 2).unwrap();
    assert_eq!(a, b);
    let s1 = generate(&p, &v, "3 + 4", 0.6, 40, 11).unwrap();
    let s2 = generate(&p, &v, "3 + 4", 0.6, 40, 11).unwrap();
    assert_eq!(s1, s2);
    assert!(s1.chars().count() <= 40);
}

#[test]
fn batched_generation_matches_single_requests() {
    let cfg = ModelConfig::default();
    let p = random_params(&cfg, 9);
    let v = vocab();
    let prompts = ["1 + 1", "2 * 3 - 4 + 5", "rev: 9 - 8", "7"];
    let reqs: Vec<GenerationRequest> =
        prompts.iter().enumerate().map(|(i, s)| GenerationRequest { prompt: s.to_string(), seed: i as u64 }).collect();
    for temperature in [0.0, 0.6] {
        let batch = generate_batch(&p, &v, &reqs, temperature, 30).unwrap();
        for (req, out) in reqs.iter().zip(&batch) {
            assert_eq!(out, &generate(&p, &v, &req.prompt, temperature, 30, req.seed).unwrap());
        }
    }
}

/// Incremental decoding agrees with a full forward pass over the same tokens.
#[test]
fn cached_decoding_agrees_with_full_forward() {
    let cfg = ModelConfig::default();
    let lm = NanoLm::new(cfg.clone()).unwrap();
    let p = random_params(&cfg, 10);
    let v = vocab();
    let text = generate(&p, &v, "5 - 3", 0.0, 25, 0).unwrap();
    let mut tokens = v.prompt_tokens("5 - 3").unwrap();
    for c in text.chars() {
        let logits = lm.forward_logits(&p, &tokens).unwrap();
        let best = logits.iter().enumerate().fold(0, |b, (i, &l)| if l > logits[b] { i } else { b });
        assert_eq!(best as u32, v.id(c).unwrap());
        tokens.push(best as u32);
    }
}

#[test]
fn prompt_longer_than_context_is_rejected() {
    let cfg = small();
    let p = init_params(&cfg, 0).unwrap();
    let long = "1 + ".repeat(10) + "1";
    assert!(matches!(generate(&p, &vocab(), &long, 0.0, 5, 0), Err(Error::Length { .. })));
    assert!(generate(&p, &vocab(), "1 + 1", -1.0, 5, 0).is_err());
}
