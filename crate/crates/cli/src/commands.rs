use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use mot_core::corpus::{build_distill_corpus_with, union_corpora, CorpusOptions, DistillCorpus, UNION_ID};
use mot_core::eval::{accuracy, comparison_table, lambda_grid, probe_curve, Accuracy, EvalConfig, EvalReport, RetentionDelta};
use mot_core::model::init_params;
use mot_core::orchestrator::*;
use mot_core::params::ParameterVector;
use mot_core::pretrain::{pretrain_base, retention_task};
use mot_core::seed::derive_seed;
use mot_core::store::*;
use mot_core::task::{gen_problems, Problem, ProblemSet, Split, SplitCounts};
use mot_core::teacher::teach_all;
use mot_core::train::ScheduleScope;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::*;

const PROBLEMS_FILE: &str = "problems.jsonl";
const RETENTION_FILE: &str = "retention.jsonl";
const CONFIG_FILE: &str = "config.toml";
const BASE_FILE: &str = "base";

pub fn run(cli: &Cli) -> CliResult<String> {
    match &cli.command {
        Command::Gen(a) => gen(cli, a),
        Command::Teach(a) => teach(cli, a),
        Command::Pretrain(a) => pretrain(cli, a),
        Command::Distill(a) => distill(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Probe(a) => probe(cli, a),
        Command::Report(a) => report(a),
        Command::Selfdistill(a) => self_distill(cli, a),
    }
}

fn root(cli: &Cli) -> PathBuf {
    cli.run_root.clone().unwrap_or_else(run_root)
}

/// `--config`, else the config saved next to the data, else defaults.
fn resolve_config(cli: &Cli, data: Option<&Path>) -> CliResult<ExperimentConfig> {
    let mut cfg = match (&cli.config, data.map(|d| d.join(CONFIG_FILE))) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(saved)) if saved.exists() => ExperimentConfig::load(&saved)?,
        _ => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.pretrain.seed = seed;
        cfg.pretrain.init_seed = seed;
    }
    Ok(cfg)
}

/// A run directory that must not exist yet.
fn fresh_run_dir(cli: &Cli, run_id: &str) -> CliResult<RunDir> {
    let rd = RunDir::new(&root(cli), run_id)?;
    if rd.root.exists() {
        return Err(CliError::config(format!("run directory {} already exists", rd.root.display())));
    }
    rd.create()?;
    Ok(rd)
}

fn existing_run_dir(cli: &Cli, run_id: &str) -> CliResult<RunDir> {
    let rd = RunDir::new(&root(cli), run_id)?;
    if !rd.root.is_dir() {
        return Err(CliError::new("io", crate::error::EXIT_IO, format!("no run directory {}", rd.root.display())));
    }
    Ok(rd)
}

fn open_reader(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::new("io", crate::error::EXIT_IO, format!("cannot open {}: {e}", path.display())))
}

fn write_new(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if path.exists() {
        return Err(CliError::config(format!("{} already exists; run directories are append-only", path.display())));
    }
    write_atomic(path, bytes)?;
    Ok(())
}

fn load_problems(data: &Path, cfg: &ExperimentConfig) -> CliResult<ProblemSet> {
    Ok(ProblemSet::read_jsonl(cfg.task.clone(), open_reader(&data.join(PROBLEMS_FILE))?)?)
}

fn load_retention(data: &Path, cfg: &ExperimentConfig) -> CliResult<ProblemSet> {
    Ok(ProblemSet::read_jsonl(retention_task(&cfg.task), open_reader(&data.join(RETENTION_FILE))?)?)
}

fn corpus_file(dir: &Path, teacher: &str) -> PathBuf {
    dir.join(format!("corpus-{teacher}.jsonl"))
}

/// Every `corpus-<teacher>.jsonl` in `dir`, keyed by teacher.
fn load_corpora(dir: &Path) -> CliResult<BTreeMap<String, DistillCorpus>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::new("io", crate::error::EXIT_IO, format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(id) = name.strip_prefix("corpus-").and_then(|n| n.strip_suffix(".jsonl")) {
            let mut c = DistillCorpus::read_jsonl(open_reader(&path)?)?;
            c.teacher_id = id.to_string();
            out.insert(id.to_string(), c);
        }
    }
    Ok(out)
}

fn parse_split(s: &str) -> CliResult<Split> {
    Ok(s.parse::<Split>()?)
}

fn eval_file(rd: &RunDir, split: Split) -> PathBuf {
    rd.file(&format!("eval-{split}.json"))
}

fn read_evals(rd: &RunDir, split: Split) -> CliResult<Option<BTreeMap<String, Accuracy>>> {
    let path = eval_file(rd, split);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(path)?)?))
}

fn pretty(v: &Value) -> String {
    serde_json::to_string_pretty(v).expect("json values serialize")
}

fn gen(cli: &Cli, a: &GenArgs) -> CliResult<String> {
    let mut cfg = resolve_config(cli, None)?;
    let c = &mut cfg.counts;
    c.train = a.train.unwrap_or(c.train);
    c.validation = a.validation.unwrap_or(c.validation);
    c.test = a.test.unwrap_or(c.test);
    c.retention = a.retention.unwrap_or(c.retention);
    let primary = SplitCounts { retention: 0, ..cfg.counts.clone() };
    let problems = gen_problems(&cfg.task, &primary, cfg.seed)?;
    let rcounts = SplitCounts { train: cfg.retention_prompts, retention: cfg.counts.retention, ..Default::default() };
    let retention = if rcounts.total() > 0 { Some(gen_problems(&retention_task(&cfg.task), &rcounts, cfg.seed)?) } else { None };

    let rd = fresh_run_dir(cli, &a.run_id)?;
    let mut buf = Vec::new();
    problems.write_jsonl(&mut buf)?;
    write_new(&rd.file(PROBLEMS_FILE), &buf)?;
    if let Some(r) = &retention {
        let mut buf = Vec::new();
        r.write_jsonl(&mut buf)?;
        write_new(&rd.file(RETENTION_FILE), &buf)?;
    }
    write_new(&rd.file(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
    let counts: BTreeMap<&str, usize> = Split::ALL.iter().map(|&s| (s.name(), problems.split(s).len())).collect();
    Ok(pretty(&json!({
        "run_dir": rd.root,
        "problems": counts,
        "retention_family": retention.map_or(0, |r| r.problems.len()),
    })))
}

fn teach(cli: &Cli, a: &TeachArgs) -> CliResult<String> {
    let rd = existing_run_dir(cli, &a.run_id)?;
    let cfg = resolve_config(cli, Some(&rd.root))?;
    let problems = load_problems(&rd.root, &cfg)?;
    let train = problems.split(Split::Train);
    let specs: Vec<_> = if a.teachers.is_empty() {
        cfg.teachers.clone()
    } else {
        a.teachers.iter().map(|id| cfg.teacher(id).cloned()).collect::<CliResult<_>>()?
    };
    let mut summary = BTreeMap::new();
    for spec in &specs {
        let traces = teach_all(spec, &train, cfg.task.modulus, cfg.seed)?;
        let mut buf = Vec::new();
        for t in &traces {
            serde_json::to_writer(&mut buf, t)?;
            buf.push(b'\n');
        }
        write_new(&rd.file(&format!("traces-{}.jsonl", spec.teacher_id)), &buf)?;
        let corpus = build_distill_corpus_with(&traces, &problems, cfg.seed, CorpusOptions { filter_correct: !a.no_filter })?;
        let mut buf = Vec::new();
        corpus.write_jsonl(&mut buf)?;
        write_new(&corpus_file(&rd.root, &spec.teacher_id), &buf)?;
        summary.insert(
            spec.teacher_id.clone(),
            json!({
                "traces": traces.len(),
                "correct": traces.iter().filter(|t| t.correct).count(),
                "corpus": corpus.len(),
                "digest": corpus.digest(),
            }),
        );
    }
    Ok(pretty(&json!({ "run_dir": rd.root, "teachers": summary })))
}

fn pretrain(cli: &Cli, a: &PretrainArgs) -> CliResult<String> {
    let cfg = resolve_config(cli, Some(&a.data))?;
    let retention = load_retention(&a.data, &cfg)?;
    let mut pcfg = cfg.pretrain.clone();
    pcfg.steps = a.steps.unwrap_or(pcfg.steps);
    let rd = fresh_run_dir(cli, &a.run_id)?;
    let (base, log) = pretrain_base(&cfg.model, &cfg.task, &retention.split(Split::Train), &pcfg)?;
    let digest = save_checkpoint(&base, &rd.checkpoint(BASE_FILE))?;
    let mut metrics = MetricsWriter::open(&rd.metrics())?;
    for r in &log {
        metrics.append(&MetricRecord {
            run_id: a.run_id.clone(),
            stream: Stream::TrainLoss,
            step: Some(r.step),
            label: None,
            payload: serde_json::to_value(r)?,
        })?;
    }
    write_new(&rd.file(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
    Ok(pretty(&json!({
        "run_dir": rd.root,
        "checkpoint": rd.checkpoint(BASE_FILE),
        "digest": digest,
        "final_loss": log.last().map(|r| r.loss),
    })))
}

/// Saves checkpoints as they are produced; on resume, files already on disk
/// must match the recomputed values.
fn checkpoint_sink(rd: &RunDir) -> impl FnMut(&Checkpoint) -> mot_core::Result<()> + '_ {
    move |c: &Checkpoint| {
        let path = rd.checkpoint(&c.label);
        if path.exists() {
            let on_disk = load_checkpoint(&path)?;
            if checkpoint_digest(&on_disk) != checkpoint_digest(&c.params) {
                return Err(mot_core::Error::Integrity(format!("checkpoint {} diverges from the file on disk", c.label)));
            }
            return Ok(());
        }
        save_checkpoint(&c.params, &path).map(|_| ())
    }
}

fn write_run_outputs(rd: &RunDir, run: &RunArtifacts) -> CliResult<()> {
    let mut metrics = MetricsWriter::open(&rd.metrics())?;
    let spb = run.manifest.schedule.steps_per_branch;
    for log in &run.logs {
        let offset = if run.regime == Regime::Mot { (log.round - 1) * spb } else { 0 };
        for r in &log.records {
            let mut payload = serde_json::to_value(r)?;
            payload["round"] = json!(log.round);
            payload["teacher"] = json!(log.teacher_id);
            metrics.append(&MetricRecord {
                run_id: run.manifest.run_id.clone(),
                stream: Stream::TrainLoss,
                step: Some(offset + r.step),
                label: None,
                payload,
            })?;
        }
    }
    let curve = Dynamics { loss: loss_curve(run), accuracy: Vec::new() };
    write_atomic(&rd.file("loss.csv"), curve.loss_csv().as_bytes())?;
    run.manifest.save(&rd.manifest())?;
    Ok(())
}

fn run_summary(rd: &RunDir, manifest: &RunManifest) -> Value {
    json!({
        "run_dir": rd.root,
        "regime": manifest.regime.name(),
        "checkpoints": manifest.checkpoints,
        "budget": manifest.budget,
        "notes": manifest.notes,
    })
}

fn distill(cli: &Cli, a: &DistillArgs) -> CliResult<String> {
    if let Some(path) = &a.manifest {
        return replay_manifest(cli, a, path);
    }
    let data = a.data.as_deref().ok_or_else(|| CliError::usage("--data is required"))?;
    let cfg = resolve_config(cli, Some(data))?;
    let regime = a.regime.expect("clap requires a regime without a manifest");
    let mut sched = cfg.schedule.clone();
    sched.rounds = a.rounds.unwrap_or(sched.rounds);
    sched.steps_per_branch = a.steps_per_branch.unwrap_or(sched.steps_per_branch);
    sched.baseline_total_steps = a.total_steps.unwrap_or(sched.baseline_total_steps);
    sched.checkpoint_every = a.checkpoint_every.unwrap_or(sched.checkpoint_every);
    sched.validate()?;
    let fairness = sched.check_fair(a.allow_unfair)?;
    let mut tcfg = cfg.train.with_seed(cfg.seed);
    if let Some(scope) = a.schedule_scope {
        tcfg.schedule_scope = match scope {
            ScopeArg::PerBranch => ScheduleScope::PerBranch,
            ScopeArg::Global => ScheduleScope::Global,
        };
    }

    let corpora = load_corpora(data)?;
    let mut inputs = BTreeMap::new();
    inputs.insert("data".to_string(), data.display().to_string());
    let base = match &a.base {
        Some(path) => {
            inputs.insert("base".into(), path.display().to_string());
            load_checkpoint(path)?
        }
        None => {
            let seed = derive_seed(cfg.seed, &["init"]);
            inputs.insert("init_seed".into(), seed.to_string());
            init_params(&cfg.model, seed)?
        }
    };
    let pool: Vec<String> = if !a.pool.is_empty() {
        a.pool.clone()
    } else if !sched.teacher_pool.is_empty() {
        sched.teacher_pool.clone()
    } else {
        corpora.keys().cloned().collect()
    };
    let probe = match &a.probe_corpus {
        Some(id) => Some(corpora.get(id).ok_or_else(|| CliError::config(format!("no corpus for probe teacher {id}")))?.clone()),
        None => None,
    };

    let rd = if a.resume { existing_run_dir(cli, &a.run_id)? } else { fresh_run_dir(cli, &a.run_id)? };
    let base_path = rd.checkpoint(BASE_LABEL);
    if a.resume && base_path.exists() {
        if checkpoint_digest(&load_checkpoint(&base_path)?) != checkpoint_digest(&base) {
            return Err(CliError::digest("base differs from the interrupted run", &[BASE_LABEL.to_string()]));
        }
    } else {
        save_checkpoint(&base, &base_path)?;
    }

    let mut sink = checkpoint_sink(&rd);
    let mut opts = RunOptions {
        run_id: a.run_id.clone(),
        probe: probe.as_ref(),
        probe_every: a.probe_every,
        on_checkpoint: Some(&mut sink),
        resume: None,
    };
    let mut prefix = Vec::new();
    let (mut run, used): (RunArtifacts, Vec<String>) = match regime {
        RegimeArg::Std => {
            let id = a.teacher.clone().ok_or_else(|| CliError::usage("--regime std needs --teacher"))?;
            let corpus = corpora.get(&id).ok_or_else(|| CliError::config(format!("no corpus for teacher {id}")))?;
            (run_std_with(&base, corpus, &sched, &tcfg, opts)?, vec![id])
        }
        RegimeArg::Mtd => {
            let parts = pool
                .iter()
                .map(|id| corpora.get(id).cloned().ok_or_else(|| CliError::config(format!("no corpus for teacher {id}"))))
                .collect::<CliResult<Vec<_>>>()?;
            inputs.insert("pool".into(), pool.join(","));
            (run_mtd_with(&base, &union_corpora(&parts)?, &sched, &tcfg, opts)?, pool.clone())
        }
        RegimeArg::Mot => {
            sched.teacher_pool = pool.clone();
            if a.resume {
                for t in 1..=sched.rounds {
                    let path = rd.checkpoint(&round_label(t));
                    match path.exists().then(|| load_checkpoint(&path)) {
                        Some(Ok(p)) => {
                            prefix.push(CheckpointRecord { label: round_label(t), step: t * sched.steps_per_branch, digest: checkpoint_digest(&p) });
                            opts.resume = Some((t, p));
                        }
                        _ => break,
                    }
                }
            }
            (run_mot_with(&base, &corpora, &sched, &tcfg, opts)?, pool.clone())
        }
    };
    if !prefix.is_empty() {
        let tail = run.manifest.checkpoints.split_off(1);
        run.manifest.checkpoints.extend(prefix);
        run.manifest.checkpoints.extend(tail);
        run.manifest.notes.push("resumed from an interrupted run".into());
    }
    run.manifest.task = Some(cfg.task.clone());
    run.manifest.teachers = cfg.teachers.iter().filter(|t| used.contains(&t.teacher_id)).cloned().collect();
    run.manifest.eval = Some(cfg.eval.clone());
    run.manifest.inputs.extend(inputs);
    if let Some(note) = fairness {
        run.manifest.notes.push(note);
    }
    write_run_outputs(&rd, &run)?;
    Ok(pretty(&run_summary(&rd, &run.manifest)))
}

fn replay_manifest(cli: &Cli, a: &DistillArgs, path: &Path) -> CliResult<String> {
    let manifest = RunManifest::load(path)?;
    let input = |key: &str| manifest.inputs.get(key).map(PathBuf::from);
    let corpus_dir = input("corpus_dir")
        .or_else(|| a.data.clone())
        .or_else(|| input("data"))
        .ok_or_else(|| CliError::usage("the manifest names no data directory; pass --data"))?;
    let base = match a.base.clone().or_else(|| input("base")) {
        Some(p) => load_checkpoint(&p)?,
        None => {
            let seed: u64 = manifest
                .inputs
                .get("init_seed")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CliError::usage("the manifest names no base; pass --base"))?;
            init_params(&manifest.model, seed)?
        }
    };
    let mut corpora = load_corpora(&corpus_dir)?;
    if manifest.regime == Regime::Mtd {
        let pool = manifest.inputs.get("pool").cloned().unwrap_or_default();
        let parts = pool
            .split(',')
            .map(|id| corpora.get(id).cloned().ok_or_else(|| CliError::config(format!("no corpus for teacher {id}"))))
            .collect::<CliResult<Vec<_>>>()?;
        corpora.insert(UNION_ID.to_string(), union_corpora(&parts)?);
    }
    let rd = fresh_run_dir(cli, &a.run_id)?;
    let mut run = replay(&manifest, &base, &corpora)?;
    run.manifest.run_id = a.run_id.clone();
    run.manifest.inputs.insert("replay_of".into(), path.display().to_string());
    for c in &run.checkpoints {
        save_checkpoint(&c.params, &rd.checkpoint(&c.label))?;
    }
    write_run_outputs(&rd, &run)?;
    let mismatches = manifest.digest_mismatches(&run.manifest);
    if !mismatches.is_empty() {
        return Err(CliError::digest(format!("{} checkpoint digests differ from the manifest", mismatches.len()), &mismatches));
    }
    let mut summary = run_summary(&rd, &run.manifest);
    summary["replayed"] = json!(run.manifest.checkpoints.len());
    summary["mismatches"] = json!(mismatches);
    Ok(pretty(&summary))
}

fn eval_problems(data: &Path, cfg: &ExperimentConfig, split: Split) -> CliResult<Vec<Problem>> {
    let set = if split == Split::Retention { load_retention(data, cfg)? } else { load_problems(data, cfg)? };
    let problems = set.split(split);
    if problems.is_empty() {
        return Err(CliError::new("precondition", crate::error::EXIT_PRECONDITION, format!("no {split} problems in {}", data.display())));
    }
    Ok(problems)
}

fn eval(cli: &Cli, a: &EvalArgs) -> CliResult<String> {
    let cfg = resolve_config(cli, Some(&a.data))?;
    let split = match &a.split {
        Some(s) => parse_split(s)?,
        None => cfg.eval.split,
    };
    let mut ecfg = EvalConfig { split, ..cfg.eval.clone() };
    ecfg.n_runs = a.runs.unwrap_or(ecfg.n_runs);
    ecfg.temperature = a.temperature.unwrap_or(ecfg.temperature);
    ecfg.validate()?;
    let problems = eval_problems(&a.data, &cfg, split)?;

    let Some(run_path) = &a.run else {
        let path = a.ckpt.as_ref().expect("clap requires --ckpt without --run");
        let acc = accuracy(&load_checkpoint(path)?, &problems, &ecfg, cfg.seed)?;
        return Ok(pretty(&json!({ "checkpoint": path, "split": split.name(), "accuracy": acc })));
    };
    let rd = RunDir::open(run_path);
    let manifest = RunManifest::load(&rd.manifest())?;
    let mut evals = BTreeMap::new();
    let mut metrics = MetricsWriter::open(&rd.metrics())?;
    let mut csv = String::from("checkpoint,step,accuracy\n");
    for rec in &manifest.checkpoints {
        let params = load_checkpoint_for(&rd.checkpoint(&rec.label), &manifest.model)?;
        if checkpoint_digest(&params) != rec.digest {
            return Err(CliError::digest(format!("checkpoint {} does not match the manifest", rec.label), &[rec.label.clone()]));
        }
        let acc = accuracy(&params, &problems, &ecfg, cfg.seed)?;
        csv.push_str(&format!("{},{},{}\n", rec.label, rec.step, acc.mean));
        metrics.append(&MetricRecord {
            run_id: manifest.run_id.clone(),
            stream: Stream::Eval,
            step: Some(rec.step),
            label: Some(rec.label.clone()),
            payload: json!({ "split": split.name(), "mean": acc.mean, "stderr": acc.stderr, "per_run": acc.per_run }),
        })?;
        evals.insert(rec.label.clone(), acc);
    }
    write_atomic(&eval_file(&rd, split), serde_json::to_string_pretty(&evals)?.as_bytes())?;
    write_atomic(&rd.file(&format!("accuracy-{split}.csv")), csv.as_bytes())?;

    let select = select_split(a.select_on);
    let chosen = if select == split { Some(evals.clone()) } else { read_evals(&rd, select)? };
    let best = chosen.as_ref().and_then(|m| best_label(m.iter().map(|(l, acc)| (l.as_str(), acc.mean))).map(str::to_string));
    let means: BTreeMap<&String, f64> = evals.iter().map(|(l, acc)| (l, acc.mean)).collect();
    Ok(pretty(&json!({ "run_dir": rd.root, "split": split.name(), "accuracy": means, "best": best, "selected_on": select.name() })))
}

fn select_split(s: SelectArg) -> Split {
    match s {
        SelectArg::Validation => Split::Validation,
        SelectArg::Test => Split::Test,
    }
}

fn load_pair(base: &Path, ckpt: &Path) -> CliResult<(ParameterVector, ParameterVector)> {
    let b = load_checkpoint(base)?;
    let c = load_checkpoint_for(ckpt, &b.config)?;
    Ok((b, c))
}

fn probe(cli: &Cli, a: &ProbeArgs) -> CliResult<String> {
    let cfg = resolve_config(cli, Some(&a.data))?;
    let split = parse_split(&a.split)?;
    let ecfg = EvalConfig { n_runs: a.runs, split, ..cfg.eval.clone() };
    let problems = eval_problems(&a.data, &cfg, split)?;
    let (base, ckpt) = load_pair(&a.base, &a.ckpt)?;
    let grid = lambda_grid(a.grid)?;
    let rd = fresh_run_dir(cli, &a.run_id)?;
    let result = probe_curve(&base, &ckpt, &grid, &problems, &ecfg, cfg.seed)?;
    write_new(&rd.file("probe.csv"), result.to_csv().as_bytes())?;
    write_new(&rd.file("probe.json"), serde_json::to_string_pretty(&result)?.as_bytes())?;
    let mut metrics = MetricsWriter::open(&rd.metrics())?;
    for (l, s) in result.lambda_grid.iter().zip(&result.scores) {
        metrics.append(&MetricRecord {
            run_id: a.run_id.clone(),
            stream: Stream::Probe,
            step: None,
            label: Some(format!("lambda={l}")),
            payload: json!({ "lambda": l, "score": s }),
        })?;
    }
    Ok(pretty(&json!({
        "run_dir": rd.root,
        "scores": result.scores,
        "curvature": result.curvature,
        "max_drop": result.max_drop,
    })))
}

fn report(a: &ReportArgs) -> CliResult<String> {
    let select = select_split(a.select_on);
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for path in &a.runs {
        let rd = RunDir::open(path);
        let manifest = RunManifest::load(&rd.manifest())?;
        let chosen = read_evals(&rd, select)?.ok_or_else(|| {
            CliError::new(
                "precondition",
                crate::error::EXIT_PRECONDITION,
                format!("{} has no {select} evaluation; run `mot eval --run {} --split {select}`", path.display(), path.display()),
            )
        })?;
        let best = best_label(chosen.iter().map(|(l, acc)| (l.as_str(), acc.mean)))
            .ok_or_else(|| CliError::new("precondition", crate::error::EXIT_PRECONDITION, "run has no trained checkpoints"))?
            .to_string();
        let mut benchmarks = BTreeMap::new();
        for split in [Split::Validation, Split::Test] {
            if let Some(acc) = read_evals(&rd, split)?.and_then(|m| m.get(&best).cloned()) {
                benchmarks.insert(split, acc);
            }
        }
        let avg = benchmarks.values().map(|acc| acc.mean).sum::<f64>() / benchmarks.len().max(1) as f64;
        let retention = read_evals(&rd, Split::Retention)?.and_then(|m| {
            let (b, after) = (m.get(BASE_LABEL)?.mean, m.get(&best)?.mean);
            Some(RetentionDelta { base: b, after, delta: after - b })
        });
        let name = format!("{} {}", manifest.regime.name(), manifest.run_id);
        records.push(json!({ "run": name, "best": best, "budget": manifest.budget, "benchmarks": benchmarks, "avg": avg, "retention": retention }));
        rows.push((name, EvalReport { benchmarks, avg, retention }));
    }
    if a.json {
        Ok(records.iter().map(Value::to_string).collect::<Vec<_>>().join("\n"))
    } else {
        Ok(format!("Best checkpoint per run, selected on {select}.\n\n{}", comparison_table(&rows).trim_end()))
    }
}

fn self_distill(cli: &Cli, a: &SelfDistillArgs) -> CliResult<String> {
    let cfg = resolve_config(cli, Some(&a.data))?;
    let problems = load_problems(&a.data, &cfg)?;
    let (base, student) = load_pair(&a.base, &a.student)?;
    let mut sampling = cfg.sampling.clone();
    sampling.n_samples = a.samples.unwrap_or(sampling.n_samples);
    sampling.temperature = a.temperature.unwrap_or(sampling.temperature);
    let mut sched = cfg.schedule.clone();
    sched.baseline_total_steps = a.total_steps.unwrap_or(sched.baseline_total_steps);
    sched.checkpoint_every = a.checkpoint_every.unwrap_or(sched.checkpoint_every);
    let tcfg = cfg.train.with_seed(cfg.seed);
    let rd = fresh_run_dir(cli, &a.run_id)?;
    let (mut run, corpus) = run_self_distill(&student, &problems, &sampling, &base, &sched, &tcfg)?;
    let mut buf = Vec::new();
    corpus.write_jsonl(&mut buf)?;
    write_new(&corpus_file(&rd.root, STUDENT_TEACHER_ID), &buf)?;
    for c in &run.checkpoints {
        save_checkpoint(&c.params, &rd.checkpoint(&c.label))?;
    }
    run.manifest.run_id = a.run_id.clone();
    run.manifest.task = Some(cfg.task.clone());
    run.manifest.eval = Some(cfg.eval.clone());
    run.manifest.inputs.insert("corpus_dir".into(), rd.root.display().to_string());
    run.manifest.inputs.insert("base".into(), a.base.display().to_string());
    run.manifest.inputs.insert("student".into(), a.student.display().to_string());
    run.manifest.notes.push(format!("{} samples per prompt at temperature {}", sampling.n_samples, sampling.temperature));
    write_run_outputs(&rd, &run)?;
    let mut summary = run_summary(&rd, &run.manifest);
    summary["corpus"] = json!(corpus.len());
    Ok(pretty(&summary))
}
