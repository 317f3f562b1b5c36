use mot_core::corpus::{build_distill_corpus, DistillCorpus};
use mot_core::model::{generate, init_params, ModelConfig, NanoLm};
use mot_core::task::{gen_problems, Split, SplitCounts, TaskConfig};
use mot_core::teacher::{teach_all, Style, TeacherSpec};
use mot_core::train::{train_branch, TrainConfig, TrainData};
use mot_core::vocab::Vocabulary;
use mot_core::Error;

fn corpus(n: usize, seed: u64) -> DistillCorpus {
    let task = TaskConfig::default();
    let counts = SplitCounts { train: n, validation: 0, test: 0, retention: 0 };
    let problems = gen_problems(&task, &counts, seed).unwrap();
    let traces = teach_all(&TeacherSpec::new("v", Style::Verbose), &problems.split(Split::Train), task.modulus, seed).unwrap();
    build_distill_corpus(&traces, &problems, seed).unwrap()
}

fn mean_loss(params: &mot_core::params::ParameterVector, c: &DistillCorpus) -> f64 {
    let lm = NanoLm::for_params(params).unwrap();
    let data = TrainData::new(c, &Vocabulary::standard(), lm.config.context_length).unwrap();
    lm.loss(params, &data.examples).unwrap()
}

#[test]
fn one_step_descends_on_a_single_example() {
    let vocab = Vocabulary::standard();
    for seed in 0..20 {
        let mut c = corpus(4, seed);
        c.examples.truncate(1);
        let init = init_params(&ModelConfig::default(), seed).unwrap();
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let (after, log) = train_branch(&init, &c, 1, &cfg, &vocab).unwrap();
        let before = mean_loss(&init, &c);
        assert!((log[0].loss - before).abs() < 1e-9);
        assert!(mean_loss(&after, &c) < before, "seed {seed}");
    }
}

#[test]
fn small_corpus_overfits() {
    let c = corpus(32, 11);
    let init = init_params(&ModelConfig::default(), 11).unwrap();
    let (trained, _) = train_branch(&init, &c, 400, &TrainConfig::default(), &Vocabulary::standard()).unwrap();
    let (before, after) = (mean_loss(&init, &c), mean_loss(&trained, &c));
    assert!(after < 0.25 * before, "{before} -> {after}");
}

#[test]
fn clipped_norm_never_exceeds_the_limit() {
    let c = corpus(64, 3);
    let init = init_params(&ModelConfig::default(), 3).unwrap();
    let (_, log) = train_branch(&init, &c, 200, &TrainConfig::default(), &Vocabulary::standard()).unwrap();
    assert_eq!(log.len(), 200);
    assert!(log.windows(2).all(|w| w[1].step == w[0].step + 1));
    assert!(log.iter().all(|r| r.clipped_norm <= 1.0 + 1e-6));
    assert!(log.iter().any(|r| r.grad_norm > 1.0));
}

#[test]
fn training_is_deterministic() {
    let c = corpus(40, 5);
    let init = init_params(&ModelConfig::default(), 5).unwrap();
    let cfg = TrainConfig::default();
    let vocab = Vocabulary::standard();
    let (a, la) = train_branch(&init, &c, 30, &cfg, &vocab).unwrap();
    let (b, lb) = train_branch(&init, &c, 30, &cfg, &vocab).unwrap();
    assert_eq!(a.digest(), b.digest());
    assert_eq!(la, lb);
    let (other, _) = train_branch(&init, &c, 30, &cfg.with_seed(6), &vocab).unwrap();
    assert_ne!(a.digest(), other.digest());
}

#[test]
fn memorized_example_is_reproduced_greedily() {
    let mut c = corpus(4, 8);
    c.examples.truncate(1);
    let vocab = Vocabulary::standard();
    let init = init_params(&ModelConfig::default(), 8).unwrap();
    let (p, _) = train_branch(&init, &c, 150, &TrainConfig::default(), &vocab).unwrap();
    let ex = &c.examples[0];
    assert_eq!(generate(&p, &vocab, &ex.prompt_text, 0.0, 120, 0).unwrap(), ex.target_text);
}

#[test]
fn non_finite_loss_is_a_divergence() {
    let c = corpus(4, 2);
    let mut init = init_params(&ModelConfig::default(), 2).unwrap();
    let pos = init.segment("pos_emb").unwrap().offset;
    init.values[pos] = f32::NAN;
    match train_branch(&init, &c, 5, &TrainConfig::default(), &Vocabulary::standard()) {
        Err(Error::Divergence { step, .. }) => assert_eq!(step, 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn guards() {
    let c = corpus(4, 2);
    let init = init_params(&ModelConfig::default(), 2).unwrap();
    let vocab = Vocabulary::standard();
    assert!(train_branch(&init, &c, 0, &TrainConfig::default(), &vocab).is_err());
    let empty = DistillCorpus { examples: vec![], ..c.clone() };
    assert!(matches!(train_branch(&init, &empty, 3, &TrainConfig::default(), &vocab), Err(Error::Precondition(_))));
    let short = init_params(&ModelConfig { context_length: 8, ..ModelConfig::default() }, 2).unwrap();
    assert!(matches!(train_branch(&short, &c, 3, &TrainConfig::default(), &vocab), Err(Error::Length { .. })));
}
