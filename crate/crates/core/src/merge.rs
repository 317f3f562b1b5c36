//! Parameter-space averaging and interpolation.
//!
//! Every reduction runs in `f64` and rounds once to `f32`. Uniform merges sum
//! each coordinate in sorted order, so the result does not depend on member
//! order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParameterVector;

fn check_layouts(members: &[&ParameterVector]) -> Result<()> {
    let first = members.first().ok_or_else(|| Error::Precondition("merge needs at least one member".into()))?;
    for m in &members[1..] {
        first.check_same_layout(m)?;
    }
    Ok(())
}

/// Coordinate-wise arithmetic mean.
pub fn merge_uniform(members: &[&ParameterVector]) -> Result<ParameterVector> {
    check_layouts(members)?;
    let k = members.len();
    let n = members[0].len();
    let mut out = Vec::with_capacity(n);
    let mut column = vec![0.0f64; k];
    for i in 0..n {
        for (c, m) in column.iter_mut().zip(members) {
            *c = m.values[i] as f64;
        }
        column.sort_unstable_by(f64::total_cmp);
        out.push((column.iter().sum::<f64>() / k as f64) as f32);
    }
    Ok(members[0].with_values(out))
}

/// Weights of a [`MergeSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MergeWeights {
    Uniform,
    Explicit(Vec<f64>),
}

#[derive(Clone, Debug)]
pub struct MergeSpec<'a> {
    pub members: Vec<(String, &'a ParameterVector)>,
    pub weights: MergeWeights,
}

/// Coordinate-wise convex combination. Uniform weights defer to
/// [`merge_uniform`].
pub fn merge_weighted(spec: &MergeSpec) -> Result<ParameterVector> {
    let members: Vec<&ParameterVector> = spec.members.iter().map(|(_, p)| *p).collect();
    let weights = match &spec.weights {
        MergeWeights::Uniform => return merge_uniform(&members),
        MergeWeights::Explicit(w) => w,
    };
    if weights.len() != members.len() {
        return Err(Error::Config(format!("{} weights for {} members", weights.len(), members.len())));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Config("merge weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("merge weights sum to {total}, not 1")));
    }
    check_layouts(&members)?;
    let n = members[0].len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut acc = 0.0f64;
        for (m, w) in members.iter().zip(weights) {
            acc += w * m.values[i] as f64;
        }
        out.push(acc as f32);
    }
    Ok(members[0].with_values(out))
}

/// `lambda * base + (1 - lambda) * ckpt`; exact at both endpoints.
pub fn interpolate(base: &ParameterVector, ckpt: &ParameterVector, lambda: f64) -> Result<ParameterVector> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("interpolation weight {lambda} outside [0, 1]")));
    }
    base.check_same_layout(ckpt)?;
    if lambda == 1.0 {
        return Ok(base.clone());
    }
    if lambda == 0.0 {
        return Ok(ckpt.clone());
    }
    let values = base
        .values
        .iter()
        .zip(&ckpt.values)
        .map(|(&b, &c)| (lambda * b as f64 + (1.0 - lambda) * c as f64) as f32)
        .collect();
    Ok(base.with_values(values))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamDistance {
    pub l2: f64,
    pub cosine: f64,
}

/// Euclidean distance and cosine similarity of the flattened vectors. The
/// cosine of a zero vector is reported as 0.
pub fn param_distance(a: &ParameterVector, b: &ParameterVector) -> Result<ParamDistance> {
    a.check_same_layout(b)?;
    let (mut d2, mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        let (x, y) = (x as f64, y as f64);
        d2 += (x - y) * (x - y);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let denom = (na * nb).sqrt();
    Ok(ParamDistance { l2: d2.sqrt(), cosine: if denom > 0.0 { dot / denom } else { 0.0 } })
}
