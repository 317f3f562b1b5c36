//! Distillation regimes: merge rounds (MoT), single- and multi-teacher
//! baselines, pool ablations, and re-distillation from a trained student.
//!
//! Each MoT round starts K branches from the current merged parameters, trains
//! every branch on its own teacher's corpus with fresh optimizer moments, and
//! averages the results. Branch seeds depend only on the run seed, the round
//! and the teacher id, so branch order inside a round does not matter.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::answer::extract_answer;
use crate::corpus::{build_distill_corpus, DistillCorpus};
use crate::error::{Error, Result};
use crate::eval::{accuracy, Accuracy, EvalConfig};
use crate::merge::merge_uniform;
use crate::model::{generate_batch, GenerationRequest, NanoLm};
use crate::params::ParameterVector;
use crate::seed::derive_seed;
use crate::store::{checkpoint_digest, Budget, CheckpointRecord, Regime, RunManifest, TOOL_VERSION};
use crate::task::{Problem, ProblemSet, Split};
use crate::teacher::TeacherTrace;
use crate::train::{train_on_data, ScheduleScope, ScheduleWindow, StepRecord, TrainConfig, TrainData};
use crate::vocab::Vocabulary;

pub const BASE_LABEL: &str = "base";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoundSchedule {
    pub rounds: usize,
    pub steps_per_branch: usize,
    pub teacher_pool: Vec<String>,
    pub baseline_total_steps: usize,
    pub checkpoint_every: usize,
}

impl Default for RoundSchedule {
    fn default() -> Self {
        RoundSchedule { rounds: 5, steps_per_branch: 50, teacher_pool: Vec::new(), baseline_total_steps: 250, checkpoint_every: 50 }
    }
}

impl RoundSchedule {
    pub fn with_pool<S: AsRef<str>>(pool: &[S]) -> RoundSchedule {
        RoundSchedule { teacher_pool: pool.iter().map(|s| s.as_ref().to_string()).collect(), ..RoundSchedule::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || self.steps_per_branch == 0 {
            return Err(Error::Config("rounds and steps_per_branch must be positive".into()));
        }
        if self.checkpoint_every == 0 || self.baseline_total_steps == 0 {
            return Err(Error::Config("baseline_total_steps and checkpoint_every must be positive".into()));
        }
        if self.baseline_total_steps % self.checkpoint_every != 0 {
            return Err(Error::Config(format!(
                "baseline_total_steps {} is not a multiple of checkpoint_every {}",
                self.baseline_total_steps, self.checkpoint_every
            )));
        }
        Ok(())
    }

    /// Whether baselines get the same sequential step count as the merge rounds.
    pub fn is_fair(&self) -> bool {
        self.baseline_total_steps == self.rounds * self.steps_per_branch
    }

    /// Fails on an unfair comparison unless `allow_unfair`, in which case the
    /// returned note says so.
    pub fn check_fair(&self, allow_unfair: bool) -> Result<Option<String>> {
        if self.is_fair() {
            return Ok(None);
        }
        let msg = format!(
            "baseline runs {} steps but merge rounds run {} x {} = {}",
            self.baseline_total_steps,
            self.rounds,
            self.steps_per_branch,
            self.rounds * self.steps_per_branch
        );
        if allow_unfair {
            Ok(Some(format!("warning: unfair budget, {msg}")))
        } else {
            Err(Error::Config(msg))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub label: String,
    pub step: usize,
    pub params: ParameterVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchLog {
    /// 1-based round; baselines log a single round 1.
    pub round: usize,
    pub teacher_id: String,
    pub seed: u64,
    pub records: Vec<StepRecord>,
    /// `(step within the branch, loss on the probe corpus)`.
    pub probe_losses: Vec<(usize, f64)>,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub regime: Regime,
    /// The base first, then every saved checkpoint in training order.
    pub checkpoints: Vec<Checkpoint>,
    pub evals: BTreeMap<String, BTreeMap<Split, Accuracy>>,
    pub logs: Vec<BranchLog>,
    pub manifest: RunManifest,
}

impl RunArtifacts {
    pub fn checkpoint(&self, label: &str) -> Option<&Checkpoint> {
        self.checkpoints.iter().find(|c| c.label == label)
    }

    pub fn last(&self) -> &Checkpoint {
        self.checkpoints.last().expect("base is always present")
    }

    pub fn base(&self) -> &Checkpoint {
        &self.checkpoints[0]
    }
}

/// Optional behaviour shared by every regime.
pub struct RunOptions<'a> {
    pub run_id: String,
    /// Fixed corpus whose loss is logged every `probe_every` steps.
    pub probe: Option<&'a DistillCorpus>,
    pub probe_every: usize,
    /// Called as each checkpoint is produced, for example to persist it.
    pub on_checkpoint: Option<&'a mut dyn FnMut(&Checkpoint) -> Result<()>>,
    /// Merge rounds already completed: `(rounds done, merged parameters)`.
    pub resume: Option<(usize, ParameterVector)>,
}

impl Default for RunOptions<'_> {
    fn default() -> Self {
        RunOptions { run_id: "run".into(), probe: None, probe_every: 10, on_checkpoint: None, resume: None }
    }
}

impl RunOptions<'_> {
    fn emit(&mut self, ckpt: &Checkpoint) -> Result<()> {
        match self.on_checkpoint.as_mut() {
            Some(f) => f(ckpt),
            None => Ok(()),
        }
    }
}

fn probe_data(probe: Option<&DistillCorpus>, lm: &NanoLm, vocab: &Vocabulary) -> Result<Option<TrainData>> {
    match probe {
        None => Ok(None),
        Some(c) if c.is_empty() => Err(Error::Config("probe corpus is empty".into())),
        Some(c) => Ok(Some(TrainData::new(c, vocab, lm.config.context_length)?)),
    }
}

/// Mean loss of `params` over every example of `data`, evaluated in chunks.
pub fn corpus_loss(lm: &NanoLm, params: &ParameterVector, data: &TrainData) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in data.examples.chunks(64) {
        let n: usize = chunk.iter().map(|e| e.scored()).sum();
        total += lm.loss(params, chunk)? * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

/// Trains one branch and records probe losses along the way.
#[allow(clippy::too_many_arguments)]
fn run_branch(
    lm: &NanoLm,
    init: &ParameterVector,
    data: &TrainData,
    steps: usize,
    cfg: &TrainConfig,
    window: ScheduleWindow,
    probe: Option<&TrainData>,
    probe_every: usize,
    mut on_step: impl FnMut(usize, &ParameterVector) -> Result<()>,
) -> Result<(ParameterVector, Vec<StepRecord>, Vec<(usize, f64)>)> {
    let mut probes = Vec::new();
    let (params, records) = train_on_data(init, data, steps, cfg, lm, window, |state, rec| {
        if let Some(p) = probe {
            if probe_every > 0 && (rec.step % probe_every == 0 || rec.step == steps) {
                probes.push((rec.step, corpus_loss(lm, &state.params, p)?));
            }
        }
        on_step(rec.step, &state.params)
    })?;
    Ok((params, records, probes))
}

fn base_manifest(
    regime: Regime,
    run_id: &str,
    base: &ParameterVector,
    corpora: BTreeMap<String, String>,
    sched: &RoundSchedule,
    tcfg: &TrainConfig,
) -> RunManifest {
    let mut notes = vec![
        "optimizer moments reset at the start of every branch".to_string(),
        format!("schedule scope: {:?}", tcfg.schedule_scope),
    ];
    if regime == Regime::Mot {
        notes.push("branches run once per round in pool order; merge is order independent".into());
    }
    RunManifest {
        run_id: run_id.to_string(),
        regime,
        tool_version: TOOL_VERSION.to_string(),
        seed_root: tcfg.seed,
        model: base.config.clone(),
        train: tcfg.clone(),
        schedule: sched.clone(),
        task: None,
        teachers: Vec::new(),
        eval: None,
        base_digest: checkpoint_digest(base),
        corpus_digests: corpora,
        checkpoints: vec![CheckpointRecord { label: BASE_LABEL.into(), step: 0, digest: checkpoint_digest(base) }],
        budget: Budget { branch_steps: 0, sequential_steps: 0 },
        inputs: BTreeMap::new(),
        notes,
    }
}

fn record(manifest: &mut RunManifest, ckpt: &Checkpoint) {
    manifest.checkpoints.push(CheckpointRecord { label: ckpt.label.clone(), step: ckpt.step, digest: checkpoint_digest(&ckpt.params) });
}

/// Seed of the branch trained on `teacher` in round `round`.
pub fn branch_seed(run_seed: u64, round: usize, teacher: &str) -> u64 {
    derive_seed(run_seed, &["mot", &round.to_string(), teacher])
}

pub fn round_label(round: usize) -> String {
    format!("round-{round}")
}

pub fn step_label(step: usize) -> String {
    format!("step-{step}")
}

pub fn run_mot(
    base: &ParameterVector,
    corpora: &BTreeMap<String, DistillCorpus>,
    sched: &RoundSchedule,
    tcfg: &TrainConfig,
) -> Result<RunArtifacts> {
    run_mot_with(base, corpora, sched, tcfg, RunOptions::default())
}

pub fn run_mot_with(
    base: &ParameterVector,
    corpora: &BTreeMap<String, DistillCorpus>,
    sched: &RoundSchedule,
    tcfg: &TrainConfig,
    mut opts: RunOptions,
) -> Result<RunArtifacts> {
    sched.validate()?;
    tcfg.validate()?;
    if sched.teacher_pool.is_empty() {
        return Err(Error::Precondition("teacher pool is empty".into()));
    }
    let mut seen = BTreeSet::new();
    for id in &sched.teacher_pool {
        if !seen.insert(id) {
            return Err(Error::Config(format!("teacher {id} appears twice in the pool")));
        }
    }
    let vocab = Vocabulary::standard();
    let lm = NanoLm::for_params(base)?;
    let mut data = Vec::with_capacity(sched.teacher_pool.len());
    let mut digests = BTreeMap::new();
    for id in &sched.teacher_pool {
        let c = corpora.get(id).ok_or_else(|| Error::Precondition(format!("no corpus for pool teacher {id}")))?;
        if c.is_empty() {
            return Err(Error::Precondition(format!("corpus for pool teacher {id} is empty")));
        }
        digests.insert(id.clone(), c.digest());
        data.push(TrainData::new(c, &vocab, lm.config.context_length)?);
    }
    let probe = probe_data(opts.probe, &lm, &vocab)?;
    let mut manifest = base_manifest(Regime::Mot, &opts.run_id, base, digests, sched, tcfg);
    let k = sched.teacher_pool.len();
    manifest.budget = Budget {
        branch_steps: sched.rounds * k * sched.steps_per_branch,
        sequential_steps: sched.rounds * sched.steps_per_branch,
    };
    let mut checkpoints = vec![Checkpoint { label: BASE_LABEL.into(), step: 0, params: base.clone() }];
    let (start, mut theta) = match opts.resume.take() {
        Some((done, params)) => {
            if done > sched.rounds {
                return Err(Error::Config(format!("cannot resume after round {done} of {}", sched.rounds)));
            }
            base.check_same_layout(&params)?;
            (done + 1, params)
        }
        None => (1, base.clone()),
    };
    let mut logs = Vec::new();
    for t in start..=sched.rounds {
        let mut branches = Vec::with_capacity(k);
        for (id, d) in sched.teacher_pool.iter().zip(&data) {
            let seed = branch_seed(tcfg.seed, t, id);
            let window = match tcfg.schedule_scope {
                ScheduleScope::PerBranch => ScheduleWindow { offset: 0, total: sched.steps_per_branch },
                ScheduleScope::Global => ScheduleWindow {
                    offset: (t - 1) * sched.steps_per_branch,
                    total: sched.rounds * sched.steps_per_branch,
                },
            };
            let cfg = tcfg.with_seed(seed);
            let (p, records, probe_losses) =
                run_branch(&lm, &theta, d, sched.steps_per_branch, &cfg, window, probe.as_ref(), opts.probe_every, |_, _| Ok(()))
                    .map_err(|e| Error::Branch { round: t, teacher: id.clone(), source: Box::new(e) })?;
            logs.push(BranchLog { round: t, teacher_id: id.clone(), seed, records, probe_losses });
            branches.push(p);
        }
        theta = merge_uniform(&branches.iter().collect::<Vec<_>>())?;
        let ckpt = Checkpoint { label: round_label(t), step: t * sched.steps_per_branch, params: theta.clone() };
        opts.emit(&ckpt)?;
        record(&mut manifest, &ckpt);
        checkpoints.push(ckpt);
    }
    Ok(RunArtifacts { regime: Regime::Mot, checkpoints, evals: BTreeMap::new(), logs, manifest })
}

fn run_baseline(
    regime: Regime,
    base: &ParameterVector,
    corpus: &DistillCorpus,
    sched: &RoundSchedule,
    tcfg: &TrainConfig,
    mut opts: RunOptions,
) -> Result<RunArtifacts> {
    sched.validate()?;
    tcfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Precondition("training corpus is empty".into()));
    }
    let vocab = Vocabulary::standard();
    let lm = NanoLm::for_params(base)?;
    let data = TrainData::new(corpus, &vocab, lm.config.context_length)?;
    let probe = probe_data(opts.probe, &lm, &vocab)?;
    let mut digests = BTreeMap::new();
    digests.insert(corpus.teacher_id.clone(), corpus.digest());
    let mut manifest = base_manifest(regime, &opts.run_id, base, digests, sched, tcfg);
    let total = sched.baseline_total_steps;
    manifest.budget = Budget { branch_steps: total, sequential_steps: total };
    let seed = derive_seed(tcfg.seed, &["baseline"]);
    let cfg = TrainConfig { total_steps: total, ..tcfg.with_seed(seed) };
    let mut checkpoints = vec![Checkpoint { label: BASE_LABEL.into(), step: 0, params: base.clone() }];
    let window = ScheduleWindow { offset: 0, total };
    let every = sched.checkpoint_every;
    let mut emitted = Vec::new();
    let (_, records, probe_losses) = run_branch(&lm, base, &data, total, &cfg, window, probe.as_ref(), opts.probe_every, |step, params| {
        if step % every == 0 {
            let ckpt = Checkpoint { label: step_label(step), step, params: params.clone() };
            opts.emit(&ckpt)?;
            emitted.push(ckpt);
        }
        Ok(())
    })?;
    for ckpt in emitted {
        record(&mut manifest, &ckpt);
        checkpoints.push(ckpt);
    }
    let logs = vec![BranchLog { round: 1, teacher_id: corpus.teacher_id.clone(), seed, records, probe_losses }];
    Ok(RunArtifacts { regime, checkpoints, evals: BTreeMap::new(), logs, manifest })
}

pub fn run_std(base: &ParameterVector, corpus: &DistillCorpus, sched: &RoundSchedule, tcfg: &TrainConfig) -> Result<RunArtifacts> {
    run_baseline(Regime::Std, base, corpus, sched, tcfg, RunOptions::default())
}

pub fn run_std_with(
    base: &ParameterVector,
    corpus: &DistillCorpus,
    sched: &RoundSchedule,
    tcfg: &TrainConfig,
    opts: RunOptions,
) -> Result<RunArtifacts> {
    run_baseline(Regime::Std, base, corpus, sched, tcfg, opts)
}

/// Continuous training on the union corpus; identical to [`run_std`] apart
/// from the regime tag.
pub fn run_mtd(base: &ParameterVector, union: &DistillCorpus, sched: &RoundSchedule, tcfg: &TrainConfig) -> Result<RunArtifacts> {
    run_baseline(Regime::Mtd, base, union, sched, tcfg, RunOptions::default())
}

pub fn run_mtd_with(
    base: &ParameterVector,
    union: &DistillCorpus,
    sched: &RoundSchedule,
    tcfg: &TrainConfig,
    opts: RunOptions,
) -> Result<RunArtifacts> {
    run_baseline(Regime::Mtd, base, union, sched, tcfg, opts)
}

/// Name of an ablation variant: its teacher ids joined by `+`.
pub fn variant_name(variant: &[String]) -> String {
    variant.join("+")
}

/// One merge run per pool variant, all sharing base, schedule, and seed.
pub fn run_pool_ablation(
    base: &ParameterVector,
    corpora: &BTreeMap<String, DistillCorpus>,
    variants: &[Vec<String>],
    sched: &RoundSchedule,
    tcfg: &TrainConfig,
) -> Result<BTreeMap<String, RunArtifacts>> {
    for v in variants {
        if v.is_empty() {
            return Err(Error::Config("an ablation variant has no teachers".into()));
        }
        let mut seen = BTreeSet::new();
        for id in v {
            if !seen.insert(id) {
                return Err(Error::Config(format!("teacher {id} appears twice in variant {}", variant_name(v))));
            }
            if !corpora.contains_key(id) {
                return Err(Error::Config(format!("unknown teacher {id} in variant {}", variant_name(v))));
            }
        }
    }
    let mut out = BTreeMap::new();
    for v in variants {
        let s = RoundSchedule { teacher_pool: v.clone(), ..sched.clone() };
        out.insert(variant_name(v), run_mot(base, corpora, &s, tcfg)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub n_samples: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { n_samples: 16, temperature: 0.6, max_new_tokens: 128 }
    }
}

pub const STUDENT_TEACHER_ID: &str = "student";

/// Samples `n_samples` traces per problem from a trained student and scores
/// them like teacher traces.
pub fn student_traces(
    student: &ParameterVector,
    problems: &[Problem],
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<Vec<TeacherTrace>> {
    if sampling.n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    let vocab = Vocabulary::standard();
    let mut requests = Vec::with_capacity(problems.len() * sampling.n_samples);
    for p in problems {
        for j in 0..sampling.n_samples {
            requests.push(GenerationRequest { prompt: p.prompt_text.clone(), seed: derive_seed(seed, &["self", &p.id, &j.to_string()]) });
        }
    }
    let mut traces = Vec::with_capacity(requests.len());
    for (c, chunk) in requests.chunks(512).enumerate() {
        let outputs = generate_batch(student, &vocab, chunk, sampling.temperature, sampling.max_new_tokens)?;
        for (j, text) in outputs.into_iter().enumerate() {
            let p = &problems[(c * 512 + j) / sampling.n_samples];
            let extracted_answer = extract_answer(&text);
            traces.push(TeacherTrace {
                problem_id: p.id.clone(),
                teacher_id: STUDENT_TEACHER_ID.into(),
                correct: extracted_answer == Some(p.reference_answer),
                extracted_answer,
                rationale_text: text,
                corrupted_steps: 0,
            });
        }
    }
    Ok(traces)
}

/// The trained student becomes a teacher: its filtered samples on the train
/// split drive a baseline run from `fresh_base`.
pub fn run_self_distill(
    trained: &ParameterVector,
    problems: &ProblemSet,
    sampling: &SamplingConfig,
    fresh_base: &ParameterVector,
    sched: &RoundSchedule,
    tcfg: &TrainConfig,
) -> Result<(RunArtifacts, DistillCorpus)> {
    trained.check_same_layout(fresh_base)?;
    let train = problems.split(Split::Train);
    let seed = derive_seed(tcfg.seed, &["self-distill"]);
    let traces = student_traces(trained, &train, sampling, seed)?;
    let correct = traces.iter().filter(|t| t.correct).count();
    let corpus = match build_distill_corpus(&traces, problems, seed) {
        Ok(c) if !c.is_empty() => c,
        Ok(_) | Err(Error::EmptyCorpus { .. }) => return Err(Error::EmptyCorpus { correct, total: traces.len() }),
        Err(e) => return Err(e),
    };
    let mut run = run_baseline(Regime::SelfDistill, fresh_base, &corpus, sched, tcfg, RunOptions::default())?;
    run.manifest.inputs.insert("teacher".into(), checkpoint_digest(trained));
    Ok((run, corpus))
}

/// Evaluates every checkpoint of `run` on `split`; the base included.
pub fn evaluate_checkpoints(run: &mut RunArtifacts, problems: &[Problem], split: Split, ecfg: &EvalConfig, seed: u64) -> Result<()> {
    for c in &run.checkpoints {
        if run.evals.get(&c.label).is_some_and(|m| m.contains_key(&split)) {
            continue;
        }
        let acc = accuracy(&c.params, problems, ecfg, seed)?;
        run.evals.entry(c.label.clone()).or_default().insert(split, acc);
    }
    Ok(())
}

/// Label with the highest score, skipping the base; the earliest wins a tie.
pub fn best_label<'a>(scores: impl IntoIterator<Item = (&'a str, f64)>) -> Option<&'a str> {
    let mut best: Option<(&str, f64)> = None;
    for (label, score) in scores {
        if label != BASE_LABEL && best.map_or(true, |(_, b)| score > b) {
            best = Some((label, score));
        }
    }
    best.map(|(l, _)| l)
}

/// Highest mean accuracy on `split` among trained checkpoints; the earliest
/// wins a tie and the base is never selected.
pub fn select_best(run: &RunArtifacts, split: Split) -> Result<(String, &ParameterVector)> {
    let mut scores = Vec::new();
    for c in run.checkpoints.iter().filter(|c| c.label != BASE_LABEL) {
        let acc = run
            .evals
            .get(&c.label)
            .and_then(|m| m.get(&split))
            .ok_or_else(|| Error::MissingEval { label: c.label.clone(), split: split.name().into() })?;
        scores.push((c.label.as_str(), acc.mean));
    }
    let label = best_label(scores).ok_or_else(|| Error::Precondition("run has no trained checkpoints".into()))?;
    let c = run.checkpoint(label).expect("label taken from the run");
    Ok((c.label.clone(), &c.params))
}

/// Mean accuracy of the best checkpoint.
pub fn best_accuracy(run: &RunArtifacts, split: Split) -> Result<f64> {
    let (label, _) = select_best(run, split)?;
    Ok(run.evals[&label][&split].mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub minibatch_loss: f64,
    pub probe_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyPoint {
    pub label: String,
    pub step: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    pub loss: Vec<LossPoint>,
    pub accuracy: Vec<AccuracyPoint>,
}

/// Loss per sequential step from the branch logs. For merge runs a step's
/// losses are averaged over that round's branches.
pub fn loss_curve(run: &RunArtifacts) -> Vec<LossPoint> {
    let spb = run.manifest.schedule.steps_per_branch;
    let mut by_step: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for log in &run.logs {
        let offset = if run.regime == Regime::Mot { (log.round - 1) * spb } else { 0 };
        for r in &log.records {
            by_step.entry(offset + r.step).or_default().0.push(r.loss);
        }
        for &(s, l) in &log.probe_losses {
            by_step.entry(offset + s).or_default().1.push(l);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    by_step
        .iter()
        .map(|(&step, (mb, pr))| LossPoint {
            step,
            minibatch_loss: mean(mb),
            probe_loss: if pr.is_empty() { None } else { Some(mean(pr)) },
        })
        .collect()
}

/// Loss against sequential step and accuracy against checkpoint.
///
/// For merge runs a step's minibatch loss is the mean over that round's
/// branches. Probe losses come from the branch logs where they were recorded;
/// otherwise the probe corpus is evaluated at every checkpoint.
pub fn dynamics_curves(
    run: &RunArtifacts,
    probe_corpus: &DistillCorpus,
    problems: &[Problem],
    ecfg: &EvalConfig,
    seed: u64,
) -> Result<Dynamics> {
    if probe_corpus.is_empty() {
        return Err(Error::Config("probe corpus is empty".into()));
    }
    let lm = NanoLm::for_params(&run.base().params)?;
    let data = TrainData::new(probe_corpus, &Vocabulary::standard(), lm.config.context_length)?;
    let mut loss = loss_curve(run);
    let any_probe = loss.iter().any(|p| p.probe_loss.is_some());
    if !any_probe {
        for c in run.checkpoints.iter().filter(|c| c.label != BASE_LABEL) {
            if let Some(p) = loss.iter_mut().find(|p| p.step == c.step) {
                p.probe_loss = Some(corpus_loss(&lm, &c.params, &data)?);
            }
        }
    }
    let mut acc = Vec::new();
    for c in run.checkpoints.iter().filter(|c| c.label != BASE_LABEL) {
        let a = match run.evals.get(&c.label).and_then(|m| m.get(&ecfg.split)) {
            Some(a) => a.mean,
            None => accuracy(&c.params, problems, ecfg, seed)?.mean,
        };
        acc.push(AccuracyPoint { label: c.label.clone(), step: c.step, accuracy: a });
    }
    Ok(Dynamics { loss, accuracy: acc })
}

impl Dynamics {
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,minibatch_loss,probe_loss\n");
        for p in &self.loss {
            let probe = p.probe_loss.map(|l| l.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{}", p.step, p.minibatch_loss, probe);
        }
        out
    }

    pub fn accuracy_csv(&self) -> String {
        let mut out = String::from("checkpoint,step,accuracy\n");
        for p in &self.accuracy {
            let _ = writeln!(out, "{},{},{}", p.label, p.step, p.accuracy);
        }
        out
    }
}

/// Re-runs the training recorded in `manifest` from its base and corpora.
/// Inputs whose digests differ from the recorded ones are rejected; compare
/// the result with [`RunManifest::digest_mismatches`].
pub fn replay(manifest: &RunManifest, base: &ParameterVector, corpora: &BTreeMap<String, DistillCorpus>) -> Result<RunArtifacts> {
    if checkpoint_digest(base) != manifest.base_digest {
        return Err(Error::Integrity("base checkpoint does not match the manifest".into()));
    }
    for (id, digest) in &manifest.corpus_digests {
        let c = corpora.get(id).ok_or_else(|| Error::Precondition(format!("no corpus for teacher {id}")))?;
        if &c.digest() != digest {
            return Err(Error::Integrity(format!("corpus for teacher {id} does not match the manifest")));
        }
    }
    let opts = RunOptions { run_id: manifest.run_id.clone(), ..RunOptions::default() };
    let mut run = match manifest.regime {
        Regime::Mot => run_mot_with(base, corpora, &manifest.schedule, &manifest.train, opts)?,
        regime => {
            let mut ids = manifest.corpus_digests.keys();
            let (Some(id), None) = (ids.next(), ids.next()) else {
                return Err(Error::Integrity(format!("{} manifest must name exactly one corpus", regime.name())));
            };
            run_baseline(regime, base, &corpora[id], &manifest.schedule, &manifest.train, opts)?
        }
    };
    run.manifest.task = manifest.task.clone();
    run.manifest.teachers = manifest.teachers.clone();
    run.manifest.eval = manifest.eval.clone();
    run.manifest.inputs = manifest.inputs.clone();
    Ok(run)
}
