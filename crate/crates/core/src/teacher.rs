//! Rule-based teachers that write chain-of-thought traces in fixed styles.
//!
//! Each teacher walks the fold of a problem one step per line and finishes
//! with the answer sentinel. Sampling randomness comes from two sources: step
//! corruption (a wrong result that the rest of the chain builds on) and
//! lexical substitution from a synonym table.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::{extract_answer, sentinel_line};
use crate::error::{Error, Result};
use crate::seed::rng_for;
use crate::task::{Expression, Op, Problem, Step};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    Verbose,
    NamedIntermediates,
    Terse,
    Shifted,
}

impl Style {
    pub const ALL: [Style; 4] = [Style::Verbose, Style::NamedIntermediates, Style::Terse, Style::Shifted];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSpec {
    pub teacher_id: String,
    pub style: Style,
    #[serde(default)]
    pub step_error_rate: f64,
    #[serde(default)]
    pub lexical_shift: f64,
    #[serde(default = "default_samples")]
    pub samples_per_prompt: usize,
}

fn default_samples() -> usize {
    16
}

impl TeacherSpec {
    /// Error-free teacher; the shifted style substitutes every word.
    pub fn new(teacher_id: impl Into<String>, style: Style) -> Self {
        TeacherSpec {
            teacher_id: teacher_id.into(),
            style,
            step_error_rate: 0.0,
            lexical_shift: if style == Style::Shifted { 1.0 } else { 0.0 },
            samples_per_prompt: default_samples(),
        }
    }

    pub fn with_error_rate(mut self, rate: f64) -> Self {
        self.step_error_rate = rate;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.teacher_id.is_empty() || self.teacher_id == crate::corpus::UNION_ID {
            return Err(Error::Config(format!("invalid teacher id `{}`", self.teacher_id)));
        }
        for (name, p) in [("step_error_rate", self.step_error_rate), ("lexical_shift", self.lexical_shift)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.samples_per_prompt == 0 {
            return Err(Error::Config("samples_per_prompt must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherTrace {
    pub problem_id: String,
    pub teacher_id: String,
    pub rationale_text: String,
    pub extracted_answer: Option<i64>,
    pub correct: bool,
    /// Number of corrupted steps in this trace.
    pub corrupted_steps: usize,
}

#[derive(Clone, Copy)]
enum Slot {
    Word(&'static str),
    Index,
    Lhs,
    Rhs,
    Result,
    Op,
}

fn synonym(word: &str) -> &'static str {
    match word {
        "step" => "stage",
        "let" => "set",
        "=" => "is",
        "+" => "plus",
        "-" => "minus",
        "*" => "times",
        _ => unreachable!("no synonym for `{word}`"),
    }
}

fn op_word(op: Op) -> &'static str {
    match op {
        Op::Add => "+",
        Op::Sub => "-",
        Op::Mul => "*",
    }
}

impl Style {
    fn template(self) -> &'static [Slot] {
        use Slot::*;
        match self {
            Style::Verbose => &[Word("step"), Index, Word(": "), Lhs, Op, Rhs, Word("="), Result],
            Style::NamedIntermediates => {
                &[Word("let"), Word(" t"), Index, Word("="), Lhs, Op, Rhs, Word("="), Result]
            }
            Style::Terse => &[Lhs, Op, Rhs, Word("="), Result],
            Style::Shifted => &[Word("step"), Index, Word(": "), Result, Word("="), Lhs, Op, Rhs],
        }
    }

    /// Terse traces have no spaces around operators unless a word replaces one.
    fn spaced(self) -> bool {
        self != Style::Terse
    }
}

fn render_step(style: Style, index: usize, step: &Step, shift: f64, rng: &mut ChaCha8Rng) -> String {
    let mut out = String::new();
    let word = |w: &'static str, out: &mut String, rng: &mut ChaCha8Rng| {
        let replaceable = matches!(w, "step" | "let" | "=" | "+" | "-" | "*");
        let shifted = replaceable && shift > 0.0 && rng.gen_bool(shift);
        let text = if shifted { synonym(w) } else { w };
        let infix = matches!(w, "=" | "+" | "-" | "*");
        if infix && (style.spaced() || shifted) {
            out.push(' ');
            out.push_str(text);
            out.push(' ');
        } else {
            out.push_str(text);
        }
        if matches!(w, "step") {
            out.push(' ');
        }
    };
    for slot in style.template() {
        match *slot {
            Slot::Word(w) => word(w, &mut out, rng),
            Slot::Op => word(op_word(step.op), &mut out, rng),
            Slot::Index => out.push_str(&index.to_string()),
            Slot::Lhs => out.push_str(&step.lhs.to_string()),
            Slot::Rhs => out.push_str(&step.rhs.to_string()),
            Slot::Result => out.push_str(&step.result.to_string()),
        }
    }
    out
}

const DELTAS: [i64; 6] = [-3, -2, -1, 1, 2, 3];

/// Samples `spec.samples_per_prompt` traces for one problem.
///
/// A corrupted step shows `result + delta` with `delta` drawn uniformly from
/// the nonzero values in `-3..=3` that leave the shown value different from
/// the true value of that step; later steps build on the shown value.
pub fn teacher_generate(spec: &TeacherSpec, problem: &Problem, modulus: i64, seed: u64) -> Result<Vec<TeacherTrace>> {
    spec.validate()?;
    let expr = Expression::parse(&problem.prompt_text)?;
    let truth = expr.steps(modulus);
    let mut traces = Vec::with_capacity(spec.samples_per_prompt);
    for sample in 0..spec.samples_per_prompt {
        let mut rng = rng_for(seed, &["trace", &problem.id, &spec.teacher_id, &sample.to_string()]);
        let mut lines = Vec::with_capacity(truth.len() + 1);
        let mut shown = expr.operands[0].rem_euclid(modulus);
        let mut corrupted = 0;
        for (i, true_step) in truth.iter().enumerate() {
            let mut result = true_step.op.apply_mod(shown, true_step.rhs, modulus);
            if spec.step_error_rate > 0.0 && rng.gen_bool(spec.step_error_rate) {
                let valid: Vec<i64> = DELTAS
                    .iter()
                    .copied()
                    .filter(|d| (result + d).rem_euclid(modulus) != true_step.result)
                    .collect();
                let pool: &[i64] = if valid.is_empty() { &DELTAS } else { &valid };
                let delta = pool[rng.gen_range(0..pool.len())];
                result = (result + delta).rem_euclid(modulus);
                corrupted += 1;
            }
            let step = Step { lhs: shown, op: true_step.op, rhs: true_step.rhs, result };
            lines.push(render_step(spec.style, i + 1, &step, spec.lexical_shift, &mut rng));
            shown = result;
        }
        lines.push(sentinel_line(shown));
        let rationale_text = lines.join("\n");
        let extracted_answer = extract_answer(&rationale_text);
        traces.push(TeacherTrace {
            problem_id: problem.id.clone(),
            teacher_id: spec.teacher_id.clone(),
            correct: extracted_answer == Some(problem.reference_answer),
            extracted_answer,
            rationale_text,
            corrupted_steps: corrupted,
        });
    }
    Ok(traces)
}

/// Runs one teacher over every given problem.
pub fn teach_all(spec: &TeacherSpec, problems: &[Problem], modulus: i64, seed: u64) -> Result<Vec<TeacherTrace>> {
    let mut out = Vec::with_capacity(problems.len() * spec.samples_per_prompt);
    for p in problems {
        out.extend(teacher_generate(spec, p, modulus, seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::{gen_problems, Family, IntRange, Split, SplitCounts, TaskConfig};

    fn problem(prompt: &str, modulus: i64) -> Problem {
        Problem {
            id: "x".into(),
            prompt_text: prompt.into(),
            reference_answer: crate::task::brute_force_eval(prompt, modulus).unwrap(),
            split: Split::Train,
        }
    }

    #[test]
    fn style_templates() {
        let p = problem("3 + 4 * 2", 10);
        let text = |style| teacher_generate(&TeacherSpec::new("t", style), &p, 10, 0).unwrap()[0].rationale_text.clone();
        assert_eq!(text(Style::Verbose), "step 1: 3 + 4 = 7\nstep 2: 7 * 2 = 4\n=> ANSWER: 4");
        assert_eq!(text(Style::NamedIntermediates), "let t1 = 3 + 4 = 7\nlet t2 = 7 * 2 = 4\n=> ANSWER: 4");
        assert_eq!(text(Style::Terse), "3+4=7\n7*2=4\n=> ANSWER: 4");
        assert_eq!(text(Style::Shifted), "stage 1: 7 is 3 plus 4\nstage 2: 4 is 7 times 2\n=> ANSWER: 4");
    }

    #[test]
    fn shifted_style_without_substitution_keeps_reordering() {
        let p = problem("3 - 4", 10);
        let spec = TeacherSpec { lexical_shift: 0.0, ..TeacherSpec::new("t", Style::Shifted) };
        assert_eq!(teacher_generate(&spec, &p, 10, 0).unwrap()[0].rationale_text, "step 1: 9 = 3 - 4\n=> ANSWER: 9");
    }

    #[test]
    fn error_free_teachers_are_always_correct() {
        let cfg = TaskConfig::default();
        let set = gen_problems(&cfg, &SplitCounts { train: 30, ..Default::default() }, 1).unwrap();
        for style in Style::ALL {
            let spec = TeacherSpec { lexical_shift: 0.0, ..TeacherSpec::new("t", style) };
            for p in &set.problems {
                let traces = teacher_generate(&spec, p, cfg.modulus, 9).unwrap();
                assert_eq!(traces.len(), 16);
                assert!(traces.iter().all(|t| t.correct && t.corrupted_steps == 0));
            }
        }
    }

    #[test]
    fn forced_corruption_is_always_wrong() {
        // Every step corrupted: the shown value differs from the truth at each step.
        let cfg = TaskConfig { operators: vec![Op::Add, Op::Sub], ..TaskConfig::default() };
        let set = gen_problems(&cfg, &SplitCounts { train: 50, ..Default::default() }, 2).unwrap();
        for style in Style::ALL {
            let spec = TeacherSpec::new("t", style).with_error_rate(1.0);
            for p in &set.problems {
                for t in teacher_generate(&spec, p, cfg.modulus, 4).unwrap() {
                    assert!(t.corrupted_steps >= 1);
                    assert!(!t.correct);
                    assert!(t.extracted_answer.is_some());
                }
            }
        }
    }

    #[test]
    fn traces_are_deterministic_and_seed_sensitive() {
        let p = problem("1 + 2 - 3 * 4", 10);
        let spec = TeacherSpec { lexical_shift: 0.5, ..TeacherSpec::new("t", Style::Verbose).with_error_rate(0.3) };
        let a = teacher_generate(&spec, &p, 10, 5).unwrap();
        assert_eq!(a, teacher_generate(&spec, &p, 10, 5).unwrap());
        assert_ne!(a, teacher_generate(&spec, &p, 10, 6).unwrap());
    }

    #[test]
    fn partial_lexical_shift_mixes_vocabularies() {
        let p = problem("1 + 2 + 3 + 4 + 5", 10);
        let spec = TeacherSpec { lexical_shift: 0.5, samples_per_prompt: 64, ..TeacherSpec::new("t", Style::Verbose) };
        let traces = teacher_generate(&spec, &p, 10, 0).unwrap();
        let all = traces.iter().map(|t| t.rationale_text.as_str()).collect::<String>();
        assert!(all.contains("stage") && all.contains("step ") && all.contains(" plus ") && all.contains(" + "));
        assert!(traces.iter().all(|t| t.correct));
    }

    #[test]
    fn retention_traces_follow_the_reversed_fold() {
        let cfg = TaskConfig { family: Family::Retention, modulus: 10, ..TaskConfig::default() };
        let p = problem("rev: 2 * 4 + 3", cfg.modulus);
        let t = &teacher_generate(&TeacherSpec::new("t", Style::Verbose), &p, cfg.modulus, 0).unwrap()[0];
        assert_eq!(t.rationale_text, "step 1: 3 + 4 = 7\nstep 2: 7 * 2 = 4\n=> ANSWER: 4");
    }

    #[test]
    fn invalid_specs_rejected() {
        let p = problem("1 + 1", 10);
        let bad = TeacherSpec { step_error_rate: 1.5, ..TeacherSpec::new("t", Style::Terse) };
        assert!(teacher_generate(&bad, &p, 10, 0).is_err());
        let bad = TeacherSpec { samples_per_prompt: 0, ..TeacherSpec::new("t", Style::Terse) };
        assert!(teacher_generate(&bad, &p, 10, 0).is_err());
        assert!(TeacherSpec::new("UNION", Style::Terse).validate().is_err());
    }

    /// Fully-correct traces follow Binomial(16 * 200, (1 - p)^s) when corruption
    /// always surfaces in the answer (additive operators only).
    #[test]
    fn correct_trace_count_matches_binomial_model() {
        let steps = 3;
        let cfg = TaskConfig {
            n_operands: IntRange::new(steps + 1, steps + 1),
            operators: vec![Op::Add, Op::Sub],
            ..TaskConfig::default()
        };
        let set = gen_problems(&cfg, &SplitCounts { train: 200, ..Default::default() }, 8).unwrap();
        let spec = TeacherSpec::new("t", Style::Verbose).with_error_rate(0.3);
        let traces = teach_all(&spec, &set.problems, cfg.modulus, 21).unwrap();
        let n = traces.len() as f64;
        let p = 0.7f64.powi(steps as i32);
        let correct = traces.iter().filter(|t| t.correct).count() as f64;
        assert!(traces.iter().all(|t| t.correct == (t.corrupted_steps == 0)));
        // 99% two-sided normal bound on a binomial with n = 3200.
        let sd = (n * p * (1.0 - p)).sqrt();
        assert!((correct - n * p).abs() < 2.576 * sd, "correct {correct}, expected {}", n * p);
        // Per prompt mean of 16 (1 - p)^s.
        let per_prompt = correct / 200.0;
        assert!((per_prompt - 16.0 * p).abs() < 2.576 * sd / 200.0);
    }
}
