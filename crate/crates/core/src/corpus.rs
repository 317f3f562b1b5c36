//! Answer-filtered distillation corpora.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::answer::extract_answer;
use crate::error::{Error, Result};
use crate::seed::{digest64, hex64, rng_for};
use crate::task::ProblemSet;
use crate::teacher::TeacherTrace;

/// Teacher id of a multi-teacher aggregate.
pub const UNION_ID: &str = "UNION";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillExample {
    pub problem_id: String,
    pub teacher_id: String,
    pub prompt_text: String,
    pub target_text: String,
    pub reference_answer: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistillCorpus {
    pub teacher_id: String,
    pub examples: Vec<DistillExample>,
    /// Correct candidate traces per problem, including problems with none.
    pub source_counts: BTreeMap<String, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusOptions {
    /// Keep only traces whose extracted answer matches the reference.
    pub filter_correct: bool,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions { filter_correct: true }
    }
}

impl DistillCorpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Content digest over the canonical JSONL encoding.
    pub fn digest(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        hex64(digest64(&buf))
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for ex in &self.examples {
            serde_json::to_writer(&mut w, ex)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    /// Reads one example per line. The corpus takes the common teacher id of
    /// its examples, or [`UNION_ID`] when they come from several teachers.
    /// Source counts are rebuilt as examples per problem.
    pub fn read_jsonl(r: impl BufRead) -> Result<DistillCorpus> {
        let mut examples = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ex: DistillExample = serde_json::from_str(&line)
                .map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
            examples.push(ex);
        }
        let teachers: BTreeSet<&str> = examples.iter().map(|e| e.teacher_id.as_str()).collect();
        let teacher_id = match teachers.len() {
            1 => teachers.into_iter().next().unwrap().to_string(),
            _ => UNION_ID.to_string(),
        };
        let mut source_counts = BTreeMap::new();
        for ex in &examples {
            *source_counts.entry(ex.problem_id.clone()).or_insert(0) += 1;
        }
        Ok(DistillCorpus { teacher_id, examples, source_counts })
    }

    pub fn teachers(&self) -> BTreeSet<String> {
        self.examples.iter().map(|e| e.teacher_id.clone()).collect()
    }
}

/// Builds one teacher's corpus with the default filtering rule.
pub fn build_distill_corpus(traces: &[TeacherTrace], problems: &ProblemSet, seed: u64) -> Result<DistillCorpus> {
    build_distill_corpus_with(traces, problems, seed, CorpusOptions::default())
}

/// Selects one trace per problem uniformly among the eligible candidates
/// (the correct ones when filtering). Problems without an eligible trace are
/// dropped. Examples follow the problem order of `problems`.
pub fn build_distill_corpus_with(
    traces: &[TeacherTrace],
    problems: &ProblemSet,
    seed: u64,
    opts: CorpusOptions,
) -> Result<DistillCorpus> {
    let teacher_id = match traces.first() {
        Some(t) => t.teacher_id.clone(),
        None => return Err(Error::Integrity("no traces to build a corpus from".into())),
    };
    let index = problems.index();
    let mut grouped: HashMap<&str, Vec<&TeacherTrace>> = HashMap::new();
    for t in traces {
        if t.teacher_id != teacher_id {
            return Err(Error::Integrity(format!(
                "traces from `{}` and `{}` mixed in one corpus",
                teacher_id, t.teacher_id
            )));
        }
        if !index.contains_key(t.problem_id.as_str()) {
            return Err(Error::Integrity(format!("trace references unknown problem `{}`", t.problem_id)));
        }
        grouped.entry(t.problem_id.as_str()).or_default().push(t);
    }

    let mut examples = Vec::new();
    let mut source_counts = BTreeMap::new();
    for problem in &problems.problems {
        let Some(candidates) = grouped.get(problem.id.as_str()) else {
            continue;
        };
        let eligible: Vec<&&TeacherTrace> = candidates
            .iter()
            .filter(|t| {
                // Recompute rather than trust the flag carried by the trace.
                let ok = extract_answer(&t.rationale_text) == Some(problem.reference_answer);
                !opts.filter_correct || ok
            })
            .collect();
        let correct = candidates
            .iter()
            .filter(|t| extract_answer(&t.rationale_text) == Some(problem.reference_answer))
            .count();
        source_counts.insert(problem.id.clone(), correct);
        if eligible.is_empty() {
            continue;
        }
        let mut rng = rng_for(seed, &["select", &problem.id, &teacher_id]);
        let chosen = eligible[rng.gen_range(0..eligible.len())];
        examples.push(DistillExample {
            problem_id: problem.id.clone(),
            teacher_id: teacher_id.clone(),
            prompt_text: problem.prompt_text.clone(),
            target_text: chosen.rationale_text.clone(),
            reference_answer: problem.reference_answer,
        });
    }
    Ok(DistillCorpus { teacher_id, examples, source_counts })
}

/// Concatenates corpora in input order under the [`UNION_ID`] label.
pub fn union_corpora(corpora: &[DistillCorpus]) -> Result<DistillCorpus> {
    let mut seen = BTreeSet::new();
    let mut examples = Vec::new();
    let mut source_counts: BTreeMap<String, usize> = BTreeMap::new();
    for c in corpora {
        for ex in &c.examples {
            if !seen.insert((ex.problem_id.clone(), ex.teacher_id.clone())) {
                return Err(Error::Integrity(format!(
                    "duplicate example for problem `{}` from teacher `{}`",
                    ex.problem_id, ex.teacher_id
                )));
            }
            examples.push(ex.clone());
        }
        for (pid, n) in &c.source_counts {
            *source_counts.entry(pid.clone()).or_insert(0) += n;
        }
    }
    Ok(DistillCorpus { teacher_id: UNION_ID.to_string(), examples, source_counts })
}
