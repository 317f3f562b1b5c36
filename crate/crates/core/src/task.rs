//! Synthetic arithmetic problems.
//!
//! A problem is a chain of single binary operations folded in reading order
//! (primary family, left to right) or in reversed order (retention family,
//! operands written right to left). Every intermediate result is reduced
//! modulo the task modulus.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Prefix that marks a retention-family prompt. No primary prompt starts with it.
pub const RETENTION_PREFIX: &str = "rev: ";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = "+")]
    Add,
    #[serde(rename = "-")]
    Sub,
    #[serde(rename = "*")]
    Mul,
}

impl Op {
    pub fn symbol(self) -> char {
        match self {
            Op::Add => '+',
            Op::Sub => '-',
            Op::Mul => '*',
        }
    }

    pub fn from_symbol(c: char) -> Option<Op> {
        match c {
            '+' => Some(Op::Add),
            '-' => Some(Op::Sub),
            '*' => Some(Op::Mul),
            _ => None,
        }
    }

    /// `a op b` reduced into `[0, modulus)`.
    pub fn apply_mod(self, a: i64, b: i64, modulus: i64) -> i64 {
        let r = match self {
            Op::Add => a + b,
            Op::Sub => a - b,
            Op::Mul => a * b,
        };
        r.rem_euclid(modulus)
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.symbol())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Primary,
    Retention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
    Retention,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Validation, Split::Test, Split::Retention];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
            Split::Retention => "retention",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

/// Inclusive integer range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange {
    pub lo: i64,
    pub hi: i64,
}

impl IntRange {
    pub const fn new(lo: i64, hi: i64) -> Self {
        IntRange { lo, hi }
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi
    }

    pub fn sample(&self, rng: &mut impl Rng) -> i64 {
        rng.gen_range(self.lo..=self.hi)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub n_operands: IntRange,
    pub operand_range: IntRange,
    pub operators: Vec<Op>,
    pub modulus: i64,
    pub family: Family,
}

/// Three nonzero operands mod 5. With a prime modulus and no zero operand
/// every step is a bijection of the running value, so one wrong step always
/// yields a wrong answer.
impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            n_operands: IntRange::new(3, 3),
            operand_range: IntRange::new(1, 4),
            operators: vec![Op::Add, Op::Sub, Op::Mul],
            modulus: 5,
            family: Family::Primary,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.operators.is_empty() {
            return Err(Error::Config("operator set is empty".into()));
        }
        if self.modulus < 2 {
            return Err(Error::Config(format!("modulus {} < 2", self.modulus)));
        }
        if self.operand_range.is_empty() {
            return Err(Error::Config("operand range is empty".into()));
        }
        if self.operand_range.lo < 0 {
            return Err(Error::Config("operands must be nonnegative".into()));
        }
        if self.n_operands.is_empty() || self.n_operands.lo < 2 {
            return Err(Error::Config("operand count lower bound must be at least 2".into()));
        }
        Ok(())
    }

    pub fn with_family(&self, family: Family) -> TaskConfig {
        TaskConfig { family, ..self.clone() }
    }
}

/// The structured form of a prompt: operands and operators in fold order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Expression {
    pub family: Family,
    /// `operands[0]` is the fold seed; step `i` applies `ops[i]` with `operands[i + 1]`.
    pub operands: Vec<i64>,
    pub ops: Vec<Op>,
}

/// One step of the fold: `lhs op rhs = result` (all reduced).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Step {
    pub lhs: i64,
    pub op: Op,
    pub rhs: i64,
    pub result: i64,
}

impl Expression {
    pub fn steps(&self, modulus: i64) -> Vec<Step> {
        let mut acc = self.operands[0].rem_euclid(modulus);
        let mut out = Vec::with_capacity(self.ops.len());
        for (op, &rhs) in self.ops.iter().zip(&self.operands[1..]) {
            let result = op.apply_mod(acc, rhs, modulus);
            out.push(Step { lhs: acc, op: *op, rhs, result });
            acc = result;
        }
        out
    }

    pub fn value(&self, modulus: i64) -> i64 {
        self.steps(modulus)
            .last()
            .map(|s| s.result)
            .unwrap_or_else(|| self.operands[0].rem_euclid(modulus))
    }

    /// Written form. Retention prompts list the fold in reverse.
    pub fn render(&self) -> String {
        let mut tokens = Vec::with_capacity(self.operands.len() * 2);
        tokens.push(self.operands[0].to_string());
        for (op, rhs) in self.ops.iter().zip(&self.operands[1..]) {
            tokens.push(op.symbol().to_string());
            tokens.push(rhs.to_string());
        }
        match self.family {
            Family::Primary => tokens.join(" "),
            Family::Retention => {
                tokens.reverse();
                format!("{RETENTION_PREFIX}{}", tokens.join(" "))
            }
        }
    }

    pub fn parse(prompt: &str) -> Result<Expression> {
        let (family, body) = match prompt.strip_prefix(RETENTION_PREFIX) {
            Some(rest) => (Family::Retention, rest),
            None => (Family::Primary, prompt),
        };
        let mut tokens: Vec<&str> = body.split(' ').collect();
        if family == Family::Retention {
            tokens.reverse();
        }
        if tokens.len() < 3 || tokens.len() % 2 == 0 {
            return Err(Error::Config(format!("malformed expression `{prompt}`")));
        }
        let num = |t: &str| {
            t.parse::<i64>()
                .map_err(|_| Error::Config(format!("bad operand `{t}` in `{prompt}`")))
        };
        let mut operands = vec![num(tokens[0])?];
        let mut ops = Vec::new();
        for pair in tokens[1..].chunks(2) {
            let mut chars = pair[0].chars();
            let op = match (chars.next(), chars.next()) {
                (Some(c), None) => Op::from_symbol(c),
                _ => None,
            }
            .ok_or_else(|| Error::Config(format!("bad operator `{}` in `{prompt}`", pair[0])))?;
            ops.push(op);
            operands.push(num(pair[1])?);
        }
        Ok(Expression { family, operands, ops })
    }
}

/// Evaluates a rendered prompt directly from its text with exact integer
/// arithmetic, reducing only at the end. Shares no code with [`Expression`].
pub fn brute_force_eval(prompt: &str, modulus: i64) -> Option<i64> {
    let (reversed, body) = match prompt.strip_prefix(RETENTION_PREFIX) {
        Some(rest) => (true, rest),
        None => (false, prompt),
    };
    let mut items: Vec<&str> = body.split_whitespace().collect();
    if reversed {
        items.reverse();
    }
    let mut it = items.into_iter();
    let mut acc: i128 = it.next()?.parse().ok()?;
    while let Some(op) = it.next() {
        let rhs: i128 = it.next()?.parse().ok()?;
        acc = match op {
            "+" => acc.checked_add(rhs)?,
            "-" => acc.checked_sub(rhs)?,
            "*" => acc.checked_mul(rhs)?,
            _ => return None,
        };
    }
    Some(acc.rem_euclid(modulus as i128) as i64)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub prompt_text: String,
    pub reference_answer: i64,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    #[serde(default)]
    pub train: usize,
    #[serde(default)]
    pub validation: usize,
    #[serde(default)]
    pub test: usize,
    #[serde(default)]
    pub retention: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
            Split::Retention => self.retention,
        }
    }

    pub fn total(&self) -> usize {
        Split::ALL.iter().map(|&s| self.get(s)).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSet {
    pub task: TaskConfig,
    pub problems: Vec<Problem>,
}

impl ProblemSet {
    pub fn split(&self, split: Split) -> Vec<Problem> {
        self.problems.iter().filter(|p| p.split == split).cloned().collect()
    }

    pub fn get(&self, id: &str) -> Option<&Problem> {
        self.problems.iter().find(|p| p.id == id)
    }

    pub fn index(&self) -> BTreeMap<&str, &Problem> {
        self.problems.iter().map(|p| (p.id.as_str(), p)).collect()
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for p in &self.problems {
            serde_json::to_writer(&mut w, p)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(task: TaskConfig, r: impl BufRead) -> Result<ProblemSet> {
        let mut problems = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let p: Problem = serde_json::from_str(&line)
                .map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
            problems.push(p);
        }
        Ok(ProblemSet { task, problems })
    }
}

fn family_tag(f: Family) -> &'static str {
    match f {
        Family::Primary => "p",
        Family::Retention => "r",
    }
}

/// Draws problems for every split with a positive count. Prompts are unique
/// across the whole set, so splits never share a problem.
pub fn gen_problems(cfg: &TaskConfig, counts: &SplitCounts, seed: u64) -> Result<ProblemSet> {
    cfg.validate()?;
    if counts.total() == 0 {
        return Err(Error::Config("problem counts are all zero".into()));
    }
    let mut seen: HashSet<String> = HashSet::new();
    let mut problems = Vec::with_capacity(counts.total());
    for split in Split::ALL {
        let want = counts.get(split);
        let mut rng = rng_for(seed, &["problems", family_tag(cfg.family), split.name()]);
        let mut attempts = 0usize;
        let mut made = 0usize;
        while made < want {
            attempts += 1;
            if attempts > 1000 * want.max(1) + 10_000 {
                return Err(Error::Config(format!(
                    "could not draw {want} unique {split} problems; expression space too small"
                )));
            }
            let n = cfg.n_operands.sample(&mut rng) as usize;
            let operands: Vec<i64> = (0..n).map(|_| cfg.operand_range.sample(&mut rng)).collect();
            let ops: Vec<Op> = (1..n)
                .map(|_| *cfg.operators.choose(&mut rng).expect("nonempty operators"))
                .collect();
            let expr = Expression { family: cfg.family, operands, ops };
            let prompt_text = expr.render();
            if !seen.insert(prompt_text.clone()) {
                continue;
            }
            let reference_answer = expr.value(cfg.modulus);
            let checked = brute_force_eval(&prompt_text, cfg.modulus);
            if checked != Some(reference_answer) {
                return Err(Error::Integrity(format!(
                    "answer check failed for `{prompt_text}`: fold {reference_answer}, direct {checked:?}"
                )));
            }
            problems.push(Problem {
                id: format!("{}-{}-{:04}", family_tag(cfg.family), split.name(), made),
                prompt_text,
                reference_answer,
                split,
            });
            made += 1;
        }
    }
    Ok(ProblemSet { task: cfg.clone(), problems })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn forced() -> TaskConfig {
        TaskConfig {
            n_operands: IntRange::new(2, 2),
            operand_range: IntRange::new(3, 3),
            operators: vec![Op::Add],
            modulus: 100,
            family: Family::Primary,
        }
    }

    #[test]
    fn single_forced_problem() {
        let set = gen_problems(&forced(), &SplitCounts { train: 1, ..Default::default() }, 0).unwrap();
        assert_eq!(set.problems.len(), 1);
        assert_eq!(set.problems[0].prompt_text, "3 + 3");
        assert_eq!(set.problems[0].reference_answer, 6);
        assert_eq!(set.problems[0].split, Split::Train);
    }

    #[test]
    fn two_hundred_unique_ids() {
        let counts = SplitCounts { train: 200, validation: 50, test: 50, retention: 0 };
        let set = gen_problems(&TaskConfig::default(), &counts, 3).unwrap();
        assert_eq!(set.split(Split::Train).len(), 200);
        let ids: HashSet<_> = set.problems.iter().map(|p| &p.id).collect();
        assert_eq!(ids.len(), 300);
        let prompts: HashSet<_> = set.problems.iter().map(|p| &p.prompt_text).collect();
        assert_eq!(prompts.len(), 300);
    }

    #[test]
    fn deterministic_bytes() {
        let counts = SplitCounts { train: 20, validation: 5, ..Default::default() };
        let dump = |seed| {
            let mut buf = Vec::new();
            gen_problems(&TaskConfig::default(), &counts, seed).unwrap().write_jsonl(&mut buf).unwrap();
            buf
        };
        assert_eq!(dump(11), dump(11));
        assert_ne!(dump(11), dump(12));
    }

    #[test]
    fn invalid_configs_rejected() {
        let counts = SplitCounts { train: 1, ..Default::default() };
        let mut cfg = TaskConfig::default();
        cfg.operators.clear();
        assert!(matches!(gen_problems(&cfg, &counts, 0), Err(Error::Config(_))));
        let cfg = TaskConfig { modulus: 1, ..TaskConfig::default() };
        assert!(matches!(gen_problems(&cfg, &counts, 0), Err(Error::Config(_))));
        let cfg = TaskConfig { n_operands: IntRange::new(1, 3), ..TaskConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = TaskConfig { operand_range: IntRange::new(5, 4), ..TaskConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn exhausted_space_is_reported() {
        let counts = SplitCounts { train: 2, ..Default::default() };
        assert!(matches!(gen_problems(&forced(), &counts, 0), Err(Error::Config(_))));
    }

    #[test]
    fn retention_prompts_fold_right_to_left() {
        let expr = Expression {
            family: Family::Retention,
            operands: vec![3, 4, 2],
            ops: vec![Op::Add, Op::Mul],
        };
        assert_eq!(expr.render(), "rev: 2 * 4 + 3");
        assert_eq!(expr.value(10), 4);
        assert_eq!(brute_force_eval("rev: 2 * 4 + 3", 10), Some(4));
        assert_eq!(Expression::parse("rev: 2 * 4 + 3").unwrap(), expr);
        // Same digits in the primary family fold the other way.
        assert_eq!(brute_force_eval("2 * 4 + 3", 10), Some(1));
    }

    #[test]
    fn retention_family_is_disjoint_from_primary() {
        let counts = SplitCounts { train: 100, retention: 50, ..Default::default() };
        let primary = gen_problems(&TaskConfig::default(), &counts, 5).unwrap();
        let retention =
            gen_problems(&TaskConfig::default().with_family(Family::Retention), &counts, 5).unwrap();
        let primary_prompts: HashSet<_> = primary.problems.iter().map(|p| &p.prompt_text).collect();
        for p in &retention.problems {
            assert!(p.prompt_text.starts_with(RETENTION_PREFIX));
            assert!(!primary_prompts.contains(&p.prompt_text));
        }
        assert!(primary.problems.iter().all(|p| !p.prompt_text.starts_with(RETENTION_PREFIX)));
    }

    #[test]
    fn subtraction_wraps_into_range() {
        assert_eq!(Op::Sub.apply_mod(2, 7, 10), 5);
        assert_eq!(brute_force_eval("2 - 7", 10), Some(5));
    }

    #[test]
    fn malformed_prompts_fail_to_parse() {
        assert!(Expression::parse("3 +").is_err());
        assert!(Expression::parse("3 / 4").is_err());
        assert!(brute_force_eval("3 / 4", 10).is_none());
    }

    proptest::proptest! {
        #[test]
        fn fold_matches_direct_evaluation(seed in 0u64..500) {
            let cfg = TaskConfig {
                n_operands: IntRange::new(2, 8),
                operand_range: IntRange::new(0, 50),
                modulus: 97,
                ..TaskConfig::default()
            };
            for family in [Family::Primary, Family::Retention] {
                let set = gen_problems(&cfg.with_family(family), &SplitCounts { train: 5, ..Default::default() }, seed).unwrap();
                for p in &set.problems {
                    let expr = Expression::parse(&p.prompt_text).unwrap();
                    proptest::prop_assert_eq!(expr.render(), p.prompt_text.clone());
                    proptest::prop_assert_eq!(brute_force_eval(&p.prompt_text, 97), Some(p.reference_answer));
                }
            }
        }
    }
}
