//! Sampled accuracy, forgetting, the interpolation probe, and report tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::answer::extract_answer;
use crate::error::{Error, Result};
use crate::merge::interpolate;
use crate::model::{generate_batch, GenerationRequest};
use crate::params::ParameterVector;
use crate::seed::derive_seed;
use crate::task::{Problem, Split};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_runs: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub split: Split,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_runs: 16, temperature: 0.6, max_new_tokens: 128, split: Split::Validation }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::Config("n_runs must be at least 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be finite and nonnegative", self.temperature)));
        }
        Ok(())
    }

    pub fn with_runs(&self, n_runs: usize) -> EvalConfig {
        EvalConfig { n_runs, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub mean: f64,
    /// Standard error of the mean over runs.
    pub stderr: f64,
    pub per_run: Vec<f64>,
}

impl Accuracy {
    pub fn from_runs(per_run: Vec<f64>) -> Accuracy {
        let n = per_run.len() as f64;
        let mean = per_run.iter().sum::<f64>() / n;
        let stderr = if per_run.len() < 2 || per_run.iter().all(|&s| s == per_run[0]) {
            0.0
        } else {
            let var = per_run.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        };
        Accuracy { mean, stderr, per_run }
    }
}

const CHUNK: usize = 512;

/// Pass@1 estimated from `n_runs` independent sampled generations per problem.
/// Run `r` on problem `p` samples with a seed derived from `(seed, r, p.id)`.
pub fn accuracy(params: &ParameterVector, problems: &[Problem], ecfg: &EvalConfig, seed: u64) -> Result<Accuracy> {
    ecfg.validate()?;
    if problems.is_empty() {
        return Err(Error::Precondition("no problems to evaluate".into()));
    }
    let vocab = Vocabulary::standard();
    // Greedy decoding ignores the seed, so one pass serves every run.
    let runs = if ecfg.temperature == 0.0 { 1 } else { ecfg.n_runs };
    let mut requests = Vec::with_capacity(runs * problems.len());
    for r in 0..runs {
        for p in problems {
            requests.push(GenerationRequest {
                prompt: p.prompt_text.clone(),
                seed: derive_seed(seed, &["eval", &r.to_string(), &p.id]),
            });
        }
    }
    let mut hits = vec![0usize; runs];
    for (c, chunk) in requests.chunks(CHUNK).enumerate() {
        let outputs = generate_batch(params, &vocab, chunk, ecfg.temperature, ecfg.max_new_tokens)?;
        for (j, text) in outputs.iter().enumerate() {
            let idx = c * CHUNK + j;
            let (r, p) = (idx / problems.len(), &problems[idx % problems.len()]);
            if extract_answer(text) == Some(p.reference_answer) {
                hits[r] += 1;
            }
        }
    }
    let mut per_run: Vec<f64> = hits.iter().map(|&h| h as f64 / problems.len() as f64).collect();
    if runs == 1 {
        per_run = vec![per_run[0]; ecfg.n_runs];
    }
    Ok(Accuracy::from_runs(per_run))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetentionDelta {
    pub base: f64,
    pub after: f64,
    /// `after - base`; negative means forgetting.
    pub delta: f64,
}

pub fn retention_eval(
    params: &ParameterVector,
    base: &ParameterVector,
    retention_problems: &[Problem],
    ecfg: &EvalConfig,
    seed: u64,
) -> Result<RetentionDelta> {
    let before = accuracy(base, retention_problems, ecfg, seed)?.mean;
    let after = accuracy(params, retention_problems, ecfg, seed)?.mean;
    Ok(RetentionDelta { base: before, after, delta: after - before })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub lambda_grid: Vec<f64>,
    pub scores: Vec<f64>,
    pub curvature: f64,
    pub max_drop: f64,
}

/// `n` evenly spaced points from 0 to 1 inclusive.
pub fn lambda_grid(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Config("a probe grid needs at least two points".into()));
    }
    Ok((0..n).map(|i| if i == n - 1 { 1.0 } else { i as f64 / (n - 1) as f64 }).collect())
}

/// Sum of absolute second differences.
pub fn curvature(scores: &[f64]) -> f64 {
    scores.windows(3).map(|w| (w[2] - 2.0 * w[1] + w[0]).abs()).sum()
}

/// Largest fall from a score to any later score.
pub fn max_drop(scores: &[f64]) -> f64 {
    let mut peak = f64::NEG_INFINITY;
    let mut drop = 0.0f64;
    for &s in scores {
        peak = peak.max(s);
        drop = drop.max(peak - s);
    }
    drop
}

/// Accuracy along `lambda * base + (1 - lambda) * ckpt`; every grid point
/// shares `seed`, so the endpoints equal [`accuracy`] on the raw vectors.
pub fn probe_curve(
    base: &ParameterVector,
    ckpt: &ParameterVector,
    grid: &[f64],
    problems: &[Problem],
    ecfg: &EvalConfig,
    seed: u64,
) -> Result<ProbeResult> {
    if grid.is_empty() || grid[0] != 0.0 || *grid.last().expect("nonempty") != 1.0 {
        return Err(Error::Config("probe grid must start at 0 and end at 1".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("probe grid must be strictly increasing".into()));
    }
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let point = interpolate(base, ckpt, lambda)?;
        scores.push(accuracy(&point, problems, ecfg, seed)?.mean);
    }
    Ok(ProbeResult { lambda_grid: grid.to_vec(), curvature: curvature(&scores), max_drop: max_drop(&scores), scores })
}

impl ProbeResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda,score\n");
        for (l, s) in self.lambda_grid.iter().zip(&self.scores) {
            let _ = writeln!(out, "{l},{s}");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Accuracy per benchmark split.
    pub benchmarks: BTreeMap<Split, Accuracy>,
    /// Mean of the validation and test means.
    pub avg: f64,
    pub retention: Option<RetentionDelta>,
}

impl EvalReport {
    pub fn new(validation: Accuracy, test: Accuracy, retention: Option<RetentionDelta>) -> EvalReport {
        let avg = (validation.mean + test.mean) / 2.0;
        let mut benchmarks = BTreeMap::new();
        benchmarks.insert(Split::Validation, validation);
        benchmarks.insert(Split::Test, test);
        EvalReport { benchmarks, avg, retention }
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}", 100.0 * x)
}

/// Aligned markdown table of regimes against benchmarks, in percent.
pub fn comparison_table(rows: &[(String, EvalReport)]) -> String {
    let mut header = vec!["Regime".to_string(), "validation".into(), "test".into(), "AVG".into()];
    let with_retention = rows.iter().any(|(_, r)| r.retention.is_some());
    if with_retention {
        header.push("retention".into());
        header.push("drop".into());
    }
    let mut body: Vec<Vec<String>> = Vec::new();
    for (name, r) in rows {
        let cell = |s: Split| r.benchmarks.get(&s).map_or("-".to_string(), |a| format!("{} ± {}", pct(a.mean), pct(a.stderr)));
        let mut row = vec![name.clone(), cell(Split::Validation), cell(Split::Test), pct(r.avg)];
        if with_retention {
            match &r.retention {
                Some(d) => {
                    row.push(pct(d.after));
                    row.push(pct(-d.delta));
                }
                None => row.extend(["-".to_string(), "-".to_string()]),
            }
        }
        body.push(row);
    }
    markdown(&header, &body)
}

/// Renders rows as a markdown table with padded columns.
pub fn markdown(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).chain([header[c].chars().count()]).max().unwrap_or(0))
        .collect();
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(header);
    out.push_str(&format!("|{}|\n", widths.iter().map(|w| "-".repeat(w + 2)).collect::<Vec<_>>().join("|")));
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curvature_and_drop() {
        assert_eq!(curvature(&[0.5; 11]), 0.0);
        assert_eq!(max_drop(&[0.5; 11]), 0.0);
        let affine: Vec<f64> = (0..11).map(|i| 0.25 + 0.5 * i as f64 / 8.0).collect();
        assert!(curvature(&affine) < 1e-12);
        assert!((curvature(&[0.0, 1.0, 0.0]) - 2.0).abs() < 1e-12);
        assert!((max_drop(&[0.2, 0.9, 0.4, 0.6, 0.1]) - 0.8).abs() < 1e-12);
        assert_eq!(max_drop(&[0.1, 0.2, 0.3]), 0.0);
    }

    #[test]
    fn grid_has_exact_endpoints() {
        let g = lambda_grid(11).unwrap();
        assert_eq!(g.len(), 11);
        assert_eq!((g[0], g[10]), (0.0, 1.0));
        assert!((g[3] - 0.3).abs() < 1e-15);
        assert!(lambda_grid(1).is_err());
    }

    #[test]
    fn stderr_is_zero_iff_runs_agree() {
        assert_eq!(Accuracy::from_runs(vec![0.4; 5]).stderr, 0.0);
        let a = Accuracy::from_runs(vec![0.2, 0.4]);
        assert!((a.mean - 0.3).abs() < 1e-12);
        assert!((a.stderr - 0.1).abs() < 1e-12);
    }

    #[test]
    fn avg_is_the_mean_of_both_splits() {
        let r = EvalReport::new(Accuracy::from_runs(vec![0.7]), Accuracy::from_runs(vec![0.4]), None);
        assert!((r.avg - 0.55).abs() < 1e-12);
        let table = comparison_table(&[("STD".into(), r)]);
        assert!(table.contains("| STD "));
        assert!(table.contains("55.0"));
    }
}
