use super::loops::cursor_batches;
use super::*;
use crate::model::{BaselineHeads, Model, ModelConfig};
use crate::synthgen::{generate_corpus, Corpus, GenConfig};
use crate::tasks::TaskTag;
use crate::text::{VocabConfig, Vocabulary};

struct Fixture {
    corpus: Corpus,
    vocab: Vocabulary,
    clips: ClipStore,
}

fn fixture(n: usize) -> Fixture {
    let corpus = generate_corpus(&GenConfig {
        n_clips: n,
        seed: 11,
        ..GenConfig::default()
    })
    .unwrap();
    let vocab = corpus.build_vocab(&VocabConfig::default()).unwrap();
    let clips = ClipStore::from_corpus(&corpus).unwrap();
    Fixture { corpus, vocab, clips }
}

fn small_model(vocab: &Vocabulary) -> ModelConfig {
    ModelConfig {
        width: 16,
        layers: 1,
        heads: 2,
        vocab_size: vocab.len(),
        vision_feature_dim: 16,
        ..ModelConfig::default()
    }
}

fn cfg(epochs: usize, batch: usize) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs,
        batch_size: batch,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { warmup_ratio: 1.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { few_shot: Some(1.5), ..TrainConfig::default() }.validate().is_err());
    let t: TrainConfig = toml::from_str("lr = 0.001\nepochs = 2\n").unwrap();
    assert_eq!((t.lr, t.epochs, t.beta2), (0.001, 2, 0.98));
    assert!(toml::from_str::<TrainConfig>("learning_rate = 1.0").is_err());
}

#[test]
fn one_step_pretrain_records_both_components() {
    let f = fixture(10);
    let pairs = &TaskDataset::from_corpus(&f.corpus, &f.vocab, TaskTag::Mlm).train[..4];
    let model = Model::new(small_model(&f.vocab), 1).unwrap();
    let out = pretrain(model, pairs, &f.clips, &f.vocab, &cfg(1, 4), &Route::Unified).unwrap();
    let steps: Vec<&HistoryRecord> = out.history.iter().filter(|r| r.task == "pretrain").collect();
    assert_eq!(steps.len(), 1);
    let keys: Vec<&String> = steps[0].components.keys().collect();
    assert_eq!(keys, ["mlm", "vtm"]);
    let bad = pretrain(
        Model::new(small_model(&f.vocab), 1).unwrap(),
        pairs,
        &f.clips,
        &f.vocab,
        &cfg(1, 1),
        &Route::Unified,
    );
    assert!(matches!(bad, Err(TrainError::Config(_))));
}

#[test]
fn pretraining_is_deterministic() {
    let f = fixture(12);
    let pairs = &TaskDataset::from_corpus(&f.corpus, &f.vocab, TaskTag::Mlm).train;
    let run = || {
        let model = Model::new(small_model(&f.vocab), 3).unwrap();
        pretrain(model, pairs, &f.clips, &f.vocab, &cfg(2, 4), &Route::Unified).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.history, b.history);
}

#[test]
fn alternating_mode_splits_objectives() {
    let f = fixture(12);
    let pairs = &TaskDataset::from_corpus(&f.corpus, &f.vocab, TaskTag::Mlm).train;
    let c = TrainConfig {
        objective: ObjectiveMode::Alternating,
        ..cfg(1, 4)
    };
    let out = pretrain(Model::new(small_model(&f.vocab), 3).unwrap(), pairs, &f.clips, &f.vocab, &c, &Route::Unified).unwrap();
    let steps: Vec<&HistoryRecord> = out.history.iter().filter(|r| r.task == "pretrain").collect();
    assert!(steps.len() >= 2);
    for r in steps {
        let want = if r.step % 2 == 0 { "mlm" } else { "vtm" };
        assert_eq!(r.components.keys().collect::<Vec<_>>(), [want]);
    }
}

#[test]
fn history_round_trip() {
    let f = fixture(8);
    let pairs = &TaskDataset::from_corpus(&f.corpus, &f.vocab, TaskTag::Mlm).train;
    let out = pretrain(Model::new(small_model(&f.vocab), 3).unwrap(), pairs, &f.clips, &f.vocab, &cfg(1, 3), &Route::Unified).unwrap();
    let mut buf = Vec::new();
    write_history(&out.history, &mut buf).unwrap();
    assert_eq!(read_history(buf.as_slice()).unwrap(), out.history);
}

#[test]
fn finetune_learns_constant_mc_answer() {
    let f = fixture(40);
    let mut ds = TaskDataset::from_corpus(&f.corpus, &f.vocab, TaskTag::McQa);
    // rotate every sample so that choice 2 is always correct
    for s in ds.train.iter_mut().chain(ds.val.iter_mut()).chain(ds.test.iter_mut()) {
        if let SampleKind::Mc { answers, answer_text, gold, .. } = &mut s.kind {
            answers.swap(*gold, 2);
            answer_text.swap(*gold, 2);
            *gold = 2;
        }
    }
    let c = TrainConfig {
        lr: 3e-3,
        warmup_ratio: 0.0,
        ..cfg(3, 8)
    };
    let out = finetune(Model::new(small_model(&f.vocab), 2).unwrap(), &ds, &f.clips, &f.vocab, &c, &Route::Unified).unwrap();
    assert_eq!(out.best_metric, Some(100.0));
    let (_, e) = evaluate(&out.best, &Route::Unified, "x", TaskTag::McQa, &ds.test, &f.clips, &f.vocab, c.decoration, &c.eval).unwrap();
    assert_eq!(e.value, 100.0);
}

#[test]
fn few_shot_finetune_uses_ceiling_fraction() {
    let f = fixture(30);
    let ds = TaskDataset::from_corpus(&f.corpus, &f.vocab, TaskTag::Fib);
    let c = TrainConfig {
        few_shot: Some(0.1),
        ..cfg(1, 4)
    };
    let out = finetune(Model::new(small_model(&f.vocab), 2).unwrap(), &ds, &f.clips, &f.vocab, &c, &Route::Unified).unwrap();
    assert_eq!(out.train_size, (0.1 * ds.train.len() as f64).ceil() as usize);
}

#[test]
fn finetune_rejects_pretraining_tags() {
    let f = fixture(8);
    let ds = TaskDataset::from_corpus(&f.corpus, &f.vocab, TaskTag::Vtm);
    let r = finetune(Model::new(small_model(&f.vocab), 2).unwrap(), &ds, &f.clips, &f.vocab, &cfg(1, 4), &Route::Unified);
    assert!(matches!(r, Err(TrainError::Config(_))));
}

#[test]
fn schedule_is_uniform() {
    // chi-square over 4 datasets, 3 degrees of freedom; 11.34 is the 0.01 critical value
    for seed in 0..5 {
        let s = multitask_schedule(seed, 4, 10_000);
        let mut counts = [0usize; 4];
        s.iter().for_each(|&d| counts[d] += 1);
        let chi: f64 = counts.iter().map(|&c| (c as f64 - 2500.0).powi(2) / 2500.0).sum();
        assert!(chi < 11.34, "seed {seed}: {counts:?}");
        assert!(counts.iter().all(|&c| c.abs_diff(2500) <= 150));
    }
}

#[test]
fn cursor_covers_every_sample_per_pass() {
    let batches = cursor_batches(10, 4, 5, 1);
    let flat: Vec<usize> = batches.concat();
    let mut first: Vec<usize> = flat[..10].to_vec();
    first.sort_unstable();
    assert_eq!(first, (0..10).collect::<Vec<_>>());
    assert!(batches.iter().all(|b| b.len() == 4));
}

#[test]
fn multitask_keeps_one_parameter_set() {
    let f = fixture(30);
    let datasets: Vec<TaskDataset> = [TaskTag::McQa, TaskTag::Fib]
        .iter()
        .map(|&t| TaskDataset::from_corpus(&f.corpus, &f.vocab, t))
        .collect();
    let model = Model::new(small_model(&f.vocab), 2).unwrap();
    let before = model.param_count();
    let out = multitask(model, &datasets, &f.clips, &f.vocab, &cfg(1, 8), &Route::Unified).unwrap();
    assert_eq!(out.model.param_count(), before);
    assert_eq!(out.model.param_count().head_count(), 1);
    assert_eq!(out.best.len(), 2);
    assert!(out.contamination.removed.is_empty());
    assert_eq!(out.selections.iter().sum::<usize>(), 3 + 3);
    let st = mt_to_st(&out.model, &datasets, &f.clips, &f.vocab, &cfg(1, 8), &Route::Unified).unwrap();
    assert_eq!(st.len(), 2);
    assert!(matches!(
        multitask(Model::new(small_model(&f.vocab), 2).unwrap(), &[], &f.clips, &f.vocab, &cfg(1, 8), &Route::Unified),
        Err(TrainError::Config(_))
    ));
}

#[test]
fn baseline_oe_stays_in_closed_vocabulary() {
    let f = fixture(30);
    let ds = TaskDataset::from_corpus(&f.corpus, &f.vocab, TaskTag::OeQa);
    let cfgm = ModelConfig {
        baseline_heads: Some(BaselineHeads {
            mc_choices: 5,
            oe_answers: 1,
        }),
        ..small_model(&f.vocab)
    };
    let out = train_baseline(Model::new(cfgm, 2).unwrap(), &ds, &f.clips, &f.vocab, &cfg(1, 8)).unwrap();
    let answers = ds.answer_vocab();
    let route = Route::Baseline { answers: answers.clone() };
    let (recs, _) = evaluate(&out.best, &route, "x", TaskTag::OeQa, &ds.test, &f.clips, &f.vocab, DecorationVariant::None, &EvalConfig::default()).unwrap();
    assert!(recs.iter().all(|r| answers.contains(&r.prediction)));
}

#[test]
fn baseline_needs_heads() {
    let f = fixture(8);
    let ds = TaskDataset::from_corpus(&f.corpus, &f.vocab, TaskTag::OeQa);
    let r = train_baseline(Model::new(small_model(&f.vocab), 2).unwrap(), &ds, &f.clips, &f.vocab, &cfg(1, 4));
    assert!(matches!(r, Err(TrainError::Config(_))));
}

#[test]
fn zero_shot_rejects_generation_tasks() {
    let f = fixture(8);
    let ds = TaskDataset::from_corpus(&f.corpus, &f.vocab, TaskTag::Caption);
    let m = Model::new(small_model(&f.vocab), 2).unwrap();
    let r = evaluate_zero_shot(&m, &Route::Unified, "x", TaskTag::Caption, &ds.test, &f.clips, &f.vocab, &EvalConfig::default());
    assert!(matches!(r, Err(TrainError::Config(_))));
}

#[test]
fn initial_losses_are_near_uniform() {
    let f = fixture(12);
    let pairs = &TaskDataset::from_corpus(&f.corpus, &f.vocab, TaskTag::Mlm).train;
    let c = TrainConfig {
        lr: 1e-12,
        ..cfg(1, 8)
    };
    let out = pretrain(Model::new(small_model(&f.vocab), 4).unwrap(), pairs, &f.clips, &f.vocab, &c, &Route::Unified).unwrap();
    let mlm = out.history[0].components["mlm"];
    let ln_v = (f.vocab.len() as f64).ln();
    assert!((mlm - ln_v).abs() < 0.05 * ln_v, "{mlm} vs {ln_v}");

    let cfgm = ModelConfig {
        baseline_heads: Some(BaselineHeads {
            mc_choices: 5,
            oe_answers: 3,
        }),
        ..small_model(&f.vocab)
    };
    let route = Route::Baseline { answers: vec![String::new(); 3] };
    let out = pretrain(Model::new(cfgm, 4).unwrap(), pairs, &f.clips, &f.vocab, &c, &route).unwrap();
    let vtm = out.history[0].components["vtm"];
    assert!((vtm - 2f64.ln()).abs() < 0.02, "{vtm}");
}

#[test]
fn caption_path_is_shared_with_baseline() {
    let f = fixture(16);
    let ds = TaskDataset::from_corpus(&f.corpus, &f.vocab, TaskTag::Caption);
    let plain = Model::new(small_model(&f.vocab), 9).unwrap();
    let with_heads = plain
        .with_baseline_heads(
            BaselineHeads {
                mc_choices: 5,
                oe_answers: 2,
            },
            1,
        )
        .unwrap();
    let c = cfg(1, 4);
    let a = finetune(plain, &ds, &f.clips, &f.vocab, &c, &Route::Unified).unwrap();
    let b = train_baseline(with_heads, &ds, &f.clips, &f.vocab, &c).unwrap();
    let losses = |h: &[HistoryRecord]| h.iter().filter(|r| r.task == "caption").map(|r| r.loss).collect::<Vec<_>>();
    assert_eq!(losses(&a.history), losses(&b.history));
}
