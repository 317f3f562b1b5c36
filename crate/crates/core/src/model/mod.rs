//! A small pre-norm decoder-only transformer over the character vocabulary.
//!
//! Parameters live in one flat array (see [`ParameterVector`]); the kernels in
//! [`engine`] read and write that array through precomputed offsets, so
//! merging and interpolation never need to know the architecture.

mod decode;
mod engine;
mod real;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParameterVector, Segment};
use crate::seed::digest64;
use crate::vocab::{TokenizedExample, Vocabulary};

pub use decode::{generate, generate_batch, GenerationRequest};
pub use real::Real;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_length: usize,
    pub vocab_size: usize,
    /// Share the token embedding with the output projection.
    #[serde(default)]
    pub tie_head: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            context_length: 256,
            vocab_size: Vocabulary::standard().size(),
            tie_head: false,
        }
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub(crate) struct LayerOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w_qkv: usize,
    pub b_qkv: usize,
    pub w_o: usize,
    pub b_o: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w_1: usize,
    pub b_1: usize,
    pub w_2: usize,
    pub b_2: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub d: usize,
    pub heads: usize,
    pub ff: usize,
    pub vocab: usize,
    pub context: usize,
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    /// `None` when the head is tied to `tok_emb`.
    pub head_w: Option<usize>,
    pub head_b: usize,
    pub total: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("context_length", self.context_length),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Canonical JSON of the config; hashed into [`ParameterVector::config_hash`].
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> u64 {
        digest64(self.canonical_json().as_bytes())
    }

    pub fn segments(&self) -> Vec<Segment> {
        let d = self.d_model;
        let ff = 4 * d;
        let mut segs = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            segs.push(Segment { name, offset, shape });
            offset += len;
        };
        push("tok_emb".into(), vec![self.vocab_size, d]);
        push("pos_emb".into(), vec![self.context_length, d]);
        for l in 0..self.n_layers {
            let p = format!("layers.{l}");
            push(format!("{p}.ln1.gain"), vec![d]);
            push(format!("{p}.ln1.bias"), vec![d]);
            push(format!("{p}.attn.w_qkv"), vec![d, 3 * d]);
            push(format!("{p}.attn.b_qkv"), vec![3 * d]);
            push(format!("{p}.attn.w_out"), vec![d, d]);
            push(format!("{p}.attn.b_out"), vec![d]);
            push(format!("{p}.ln2.gain"), vec![d]);
            push(format!("{p}.ln2.bias"), vec![d]);
            push(format!("{p}.mlp.w_in"), vec![d, ff]);
            push(format!("{p}.mlp.b_in"), vec![ff]);
            push(format!("{p}.mlp.w_out"), vec![ff, d]);
            push(format!("{p}.mlp.b_out"), vec![d]);
        }
        push("ln_f.gain".into(), vec![d]);
        push("ln_f.bias".into(), vec![d]);
        if !self.tie_head {
            push("head.w".into(), vec![d, self.vocab_size]);
        }
        push("head.b".into(), vec![self.vocab_size]);
        segs
    }

    pub fn parameter_count(&self) -> usize {
        self.segments().iter().map(Segment::len).sum()
    }

    pub(crate) fn layout(&self) -> Layout {
        let segs = self.segments();
        let at = |name: &str| segs.iter().find(|s| s.name == name).map(|s| s.offset);
        let req = |name: String| at(&name).expect("segment exists");
        let layers = (0..self.n_layers)
            .map(|l| {
                let p = format!("layers.{l}");
                LayerOffsets {
                    ln1_g: req(format!("{p}.ln1.gain")),
                    ln1_b: req(format!("{p}.ln1.bias")),
                    w_qkv: req(format!("{p}.attn.w_qkv")),
                    b_qkv: req(format!("{p}.attn.b_qkv")),
                    w_o: req(format!("{p}.attn.w_out")),
                    b_o: req(format!("{p}.attn.b_out")),
                    ln2_g: req(format!("{p}.ln2.gain")),
                    ln2_b: req(format!("{p}.ln2.bias")),
                    w_1: req(format!("{p}.mlp.w_in")),
                    b_1: req(format!("{p}.mlp.b_in")),
                    w_2: req(format!("{p}.mlp.w_out")),
                    b_2: req(format!("{p}.mlp.b_out")),
                }
            })
            .collect();
        Layout {
            d: self.d_model,
            heads: self.n_heads,
            ff: 4 * self.d_model,
            vocab: self.vocab_size,
            context: self.context_length,
            tok_emb: req("tok_emb".into()),
            pos_emb: req("pos_emb".into()),
            layers,
            lnf_g: req("ln_f.gain".into()),
            lnf_b: req("ln_f.bias".into()),
            head_w: at("head.w"),
            head_b: req("head.b".into()),
            total: segs.iter().map(Segment::len).sum(),
        }
    }
}

/// Sine/cosine table with per-coordinate RMS `1/sqrt(d)`.
fn sinusoid(values: &mut [f32], d: usize) {
    let amp = (2.0 / d as f64).sqrt();
    for (i, v) in values.iter_mut().enumerate() {
        let (pos, j) = ((i / d) as f64, i % d);
        let angle = pos / 10000f64.powf((j - j % 2) as f64 / d as f64);
        *v = (amp * if j % 2 == 0 { angle.sin() } else { angle.cos() }) as f32;
    }
}

/// Fresh parameters: matrices and token embeddings ~ N(0, 1/d_model), the
/// learned position table starts from sinusoids of the same scale plus a
/// little seeded noise, layer-norm gains one, every bias zero.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterVector> {
    cfg.validate()?;
    let mut params = ParameterVector::zeros(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f64, 1.0 / (cfg.d_model as f64).sqrt()).expect("valid std");
    for seg in params.segments.clone() {
        let values = &mut params.values[seg.offset..seg.offset + seg.len()];
        if seg.name.ends_with(".gain") {
            values.fill(1.0);
        } else if seg.name == "pos_emb" {
            sinusoid(values, cfg.d_model);
            for v in values {
                *v += (0.1 * normal.sample(&mut rng)) as f32;
            }
        } else if seg.shape.len() == 2 {
            for v in values {
                *v = normal.sample(&mut rng) as f32;
            }
        }
    }
    Ok(params)
}

/// A model configuration bound to its parameter layout.
#[derive(Clone, Debug)]
pub struct NanoLm {
    pub config: ModelConfig,
    pub(crate) layout: Layout,
}

impl NanoLm {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        Ok(NanoLm { config, layout })
    }

    pub fn for_params(params: &ParameterVector) -> Result<Self> {
        Self::new(params.config.clone())
    }

    fn check(&self, params: &ParameterVector) -> Result<()> {
        if params.config_hash != self.config.hash() || params.values.len() != self.layout.total {
            return Err(Error::Incompatible {
                expected: crate::seed::hex64(self.config.hash()),
                found: crate::seed::hex64(params.config_hash),
            });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &[TokenizedExample]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidBatch("batch is empty".into()));
        }
        let mut scored = 0;
        for ex in batch {
            if ex.tokens.len() != ex.loss_mask.len() {
                return Err(Error::InvalidBatch("token and mask lengths differ".into()));
            }
            if ex.tokens.len() > self.config.context_length {
                return Err(Error::Length { len: ex.tokens.len(), max: self.config.context_length });
            }
            if ex.loss_mask.first() == Some(&true) {
                return Err(Error::InvalidBatch("first position has no context to predict from".into()));
            }
            self.check_tokens(&ex.tokens)?;
            scored += ex.scored();
        }
        if scored == 0 {
            return Err(Error::InvalidBatch("loss mask selects no tokens".into()));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        match tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(t) => Err(Error::Vocabulary(format!("token index {t} out of range"))),
            None => Ok(()),
        }
    }

    /// Mean next-token cross-entropy over masked positions and its gradient.
    pub fn loss_and_grad(&self, params: &ParameterVector, batch: &[TokenizedExample]) -> Result<(f64, Vec<f32>)> {
        self.check(params)?;
        self.loss_and_grad_raw(&params.values, batch)
    }

    /// Same as [`NanoLm::loss_and_grad`] on a raw value array of any precision.
    pub fn loss_and_grad_raw<R: Real>(&self, values: &[R], batch: &[TokenizedExample]) -> Result<(f64, Vec<R>)> {
        self.check_batch(batch)?;
        if values.len() != self.layout.total {
            return Err(Error::Shape { segment: "<values>".into() });
        }
        Ok(engine::loss_and_grad(&self.layout, values, batch))
    }

    /// Loss only (no gradient buffers).
    pub fn loss(&self, params: &ParameterVector, batch: &[TokenizedExample]) -> Result<f64> {
        self.check(params)?;
        self.check_batch(batch)?;
        Ok(engine::loss(&self.layout, &params.values, batch))
    }

    pub fn loss_raw<R: Real>(&self, values: &[R], batch: &[TokenizedExample]) -> Result<f64> {
        self.check_batch(batch)?;
        Ok(engine::loss(&self.layout, values, batch))
    }

    /// Logits for every position of `tokens` (row `t` predicts token `t + 1`).
    pub fn sequence_logits(&self, params: &ParameterVector, tokens: &[u32]) -> Result<Vec<Vec<f32>>> {
        self.check(params)?;
        if tokens.is_empty() {
            return Err(Error::InvalidBatch("empty token sequence".into()));
        }
        if tokens.len() > self.config.context_length {
            return Err(Error::Length { len: tokens.len(), max: self.config.context_length });
        }
        self.check_tokens(tokens)?;
        let flat = engine::logits(&self.layout, &params.values, &[tokens]);
        Ok(flat.chunks(self.layout.vocab).map(<[f32]>::to_vec).collect())
    }

    /// Next-token logits after `prefix`.
    pub fn forward_logits(&self, params: &ParameterVector, prefix: &[u32]) -> Result<Vec<f32>> {
        if prefix.len() >= self.config.context_length {
            return Err(Error::Length { len: prefix.len() + 1, max: self.config.context_length });
        }
        Ok(self.sequence_logits(params, prefix)?.pop().expect("nonempty prefix"))
    }

    /// Logits for each sequence of a packed batch, in input order.
    pub fn batch_logits(&self, params: &ParameterVector, seqs: &[&[u32]]) -> Result<Vec<Vec<f32>>> {
        self.check(params)?;
        for s in seqs {
            if s.is_empty() || s.len() > self.config.context_length {
                return Err(Error::Length { len: s.len(), max: self.config.context_length });
            }
            self.check_tokens(s)?;
        }
        let flat = engine::logits(&self.layout, &params.values, seqs);
        let mut out = Vec::with_capacity(seqs.len());
        let mut at = 0;
        for s in seqs {
            let n = s.len() * self.layout.vocab;
            out.push(flat[at..at + n].to_vec());
            at += n;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_profile_tiles_exactly() {
        let cfg = ModelConfig::default();
        let p = init_params(&cfg, 0).unwrap();
        p.validate().unwrap();
        assert_eq!(p.len(), cfg.parameter_count());
        let d = 64;
        let v = cfg.vocab_size;
        let per_layer = 2 * d + d * 3 * d + 3 * d + d * d + d + 2 * d + d * 4 * d + 4 * d + 4 * d * d + d;
        assert_eq!(p.len(), v * d + 256 * d + 2 * per_layer + 2 * d + d * v + v);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let cfg = ModelConfig::default();
        let a = init_params(&cfg, 1).unwrap();
        assert_eq!(a, init_params(&cfg, 1).unwrap());
        let b = init_params(&cfg, 2).unwrap();
        let random: Vec<usize> = a
            .segments
            .iter()
            .filter(|s| s.shape.len() == 2)
            .flat_map(|s| s.offset..s.offset + s.len())
            .collect();
        let differ = random.iter().filter(|&&i| a.values[i] != b.values[i]).count();
        assert!(differ as f64 >= 0.99 * random.len() as f64);
        assert!(a.segment_values("layers.0.attn.b_qkv").unwrap().iter().all(|&x| x == 0.0));
        assert!(a.segment_values("ln_f.gain").unwrap().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn tied_head_drops_the_projection() {
        let cfg = ModelConfig { tie_head: true, ..ModelConfig::default() };
        assert!(cfg.segments().iter().all(|s| s.name != "head.w"));
        assert_ne!(cfg.hash(), ModelConfig::default().hash());
        init_params(&cfg, 0).unwrap().validate().unwrap();
    }

    #[test]
    fn invalid_configs() {
        let cfg = ModelConfig { n_heads: 3, ..ModelConfig::default() };
        assert!(matches!(init_params(&cfg, 0), Err(Error::Config(_))));
        let cfg = ModelConfig { n_layers: 0, ..ModelConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
