//! Pre-training of the base student.
//!
//! The base sees two kinds of sequences. Arithmetic drills are lines of
//! `a op b = c` facts under the task modulus, scored only on the results, so
//! the base knows the arithmetic without ever seeing the answer format of the
//! primary family. Worked retention-family problems give it a reasoning skill
//! that later fine-tuning on the primary family can erode.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig, NanoLm};
use crate::params::ParameterVector;
use crate::seed::rng_for;
use crate::task::{Family, IntRange, Problem, TaskConfig};
use crate::teacher::{teacher_generate, Style, TeacherSpec};
use crate::train::{train_on_data, ScheduleWindow, StepRecord, TrainConfig, TrainData};
use crate::vocab::{TokenizedExample, Vocabulary, BOS, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub drill_sequences: usize,
    /// Facts per drill sequence.
    pub drill_lines: IntRange,
    pub retention_style: Style,
    pub init_seed: u64,
    pub seed: u64,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 4000,
            drill_sequences: 8000,
            drill_lines: IntRange::new(1, 13),
            retention_style: Style::Verbose,
            init_seed: 0,
            seed: 0,
            train: TrainConfig::default(),
        }
    }
}

/// Drill sequences for `task`. Each fact is written either spaced
/// (`3 + 4 = 2`) or compact (`3+4=2`), and half the lines carry a random
/// label (`qx 3: 3 + 4 = 2`) so facts are seen at varied offsets within a
/// line. Only result digits are scored.
pub fn arithmetic_drills(task: &TaskConfig, vocab: &Vocabulary, cfg: &PretrainConfig) -> Result<Vec<TokenizedExample>> {
    task.validate()?;
    if cfg.drill_lines.is_empty() || cfg.drill_lines.lo < 1 {
        return Err(Error::Config("drill_lines must be a nonempty range of positive counts".into()));
    }
    let mut rng = rng_for(cfg.seed, &["drills"]);
    let newline = vocab.encode("\n")?[0];
    let mut out = Vec::with_capacity(cfg.drill_sequences);
    for _ in 0..cfg.drill_sequences {
        let mut tokens = vec![BOS];
        let mut mask = vec![false];
        for _ in 0..cfg.drill_lines.sample(&mut rng) {
            let a = rng.gen_range(0..task.modulus);
            let b = task.operand_range.sample(&mut rng);
            let op = *task.operators.choose(&mut rng).expect("validated nonempty");
            let sp = if rng.gen_bool(0.5) { " " } else { "" };
            let label = if rng.gen_bool(0.5) { drill_label(&mut rng) } else { String::new() };
            let head = format!("{label}{a}{sp}{}{sp}{b}{sp}={sp}", op.symbol());
            tokens.extend(vocab.encode(&head)?);
            mask.resize(tokens.len(), false);
            let result = vocab.encode(&op.apply_mod(a, b, task.modulus).to_string())?;
            mask.extend(std::iter::repeat(true).take(result.len()));
            tokens.extend(result);
            tokens.push(newline);
            mask.push(false);
        }
        *tokens.last_mut().expect("at least one line") = EOS;
        *mask.last_mut().expect("at least one line") = true;
        out.push(TokenizedExample { tokens, loss_mask: mask });
    }
    Ok(out)
}

fn drill_label(rng: &mut impl Rng) -> String {
    let mut label: String = (0..rng.gen_range(1..=6)).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
    if rng.gen_bool(0.5) {
        if rng.gen_bool(0.5) {
            label.push(' ');
        }
        label.push(rng.gen_range(b'1'..=b'9') as char);
    }
    label.push_str([": ", ":", " = ", "="][rng.gen_range(0..4)]);
    label
}

/// Trains a fresh student on drills plus error-free worked solutions of
/// `retention_problems`.
pub fn pretrain_base(
    model: &ModelConfig,
    task: &TaskConfig,
    retention_problems: &[Problem],
    cfg: &PretrainConfig,
) -> Result<(ParameterVector, Vec<StepRecord>)> {
    let vocab = Vocabulary::standard();
    let mut examples = arithmetic_drills(task, &vocab, cfg)?;
    let teacher = TeacherSpec { samples_per_prompt: 1, ..TeacherSpec::new("base", cfg.retention_style) };
    for p in retention_problems {
        if !p.prompt_text.starts_with(crate::task::RETENTION_PREFIX) {
            return Err(Error::Precondition(format!("{} is not a retention-family problem", p.id)));
        }
        let trace = teacher_generate(&teacher, p, task.modulus, cfg.seed)?.remove(0);
        examples.push(TokenizedExample::new(&vocab, &p.prompt_text, &trace.rationale_text)?);
    }
    let init = init_params(model, cfg.init_seed)?;
    let lm = NanoLm::new(model.clone())?;
    for ex in &examples {
        if ex.len() > model.context_length {
            return Err(Error::Length { len: ex.len(), max: model.context_length });
        }
    }
    let train = TrainConfig { total_steps: cfg.steps, ..cfg.train.with_seed(cfg.seed) };
    let window = ScheduleWindow { offset: 0, total: cfg.steps };
    train_on_data(&init, &TrainData { examples }, cfg.steps, &train, &lm, window, |_, _| Ok(()))
}

/// The retention-family variant of `task`.
pub fn retention_task(task: &TaskConfig) -> TaskConfig {
    task.with_family(Family::Retention)
}
