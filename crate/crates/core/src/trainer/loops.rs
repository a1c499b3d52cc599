use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::data::{contamination_filter, few_shot, ClipStore, ContaminationReport, Sample, SampleKind, TaskDataset};
use super::eval::{baseline_oe_input, evaluate};
use super::optim::{adamw_step, lr_schedule, OptimState};
use super::{HistoryRecord, ObjectiveMode, Result, Route, TrainConfig, TrainError};
use crate::metrics::MetricEntry;
use crate::model::{BaselineHeads, Model, ParamGrads};
use crate::tasks::{
    baseline_mc, baseline_oe, baseline_vtm, build_caption_train, build_fib, build_mc, build_mlm, build_oe,
    build_vtm, class_loss, decorate, masked_loss, vtm_example, ClassExample, ClipRef, DecorationVariant,
    MaskedExample, TaskTag,
};
use crate::text::{tokenize, TokenId, TokenSeq, Vocabulary};
use crate::vision::{sample_frames, SampleMode};

/// Seed offset of the multitask dataset-selection stream.
const SCHEDULE_STREAM: u64 = 0x6d74_7363_6865_6475;

enum Part {
    Masked(MaskedExample),
    Class(ClassExample),
}

struct Term {
    name: &'static str,
    weight: f64,
    part: Part,
}

/// Everything computed for one example: the video features are built once
/// and shared by all of its loss terms.
struct Work {
    clip: String,
    frames: Vec<usize>,
    terms: Vec<Term>,
    seed: u64,
}

struct WorkOutput {
    grads: Option<ParamGrads>,
    total: f64,
    parts: Vec<(&'static str, f64)>,
}

fn work_grads(model: &Model, clips: &ClipStore, w: &Work) -> Result<WorkOutput> {
    let grid = clips.grid(&w.clip, &w.frames, model.config())?;
    let mut s = model.training_session(w.seed);
    let v = s.video_features(&grid)?;
    let mut acc = None;
    let mut parts = Vec::new();
    let mut total = 0.0;
    for t in &w.terms {
        let l = match &t.part {
            Part::Masked(ex) => masked_loss(&mut s, v, ex)?,
            Part::Class(ex) => class_loss(&mut s, v, ex)?,
        };
        let Some(l) = l else { continue };
        let value = s.tape.value(l).item();
        parts.push((t.name, value));
        total += t.weight * value;
        let lw = s.tape.scale(l, t.weight);
        acc = Some(match acc {
            None => lw,
            Some(a) => s.tape.add(a, lw)?,
        });
    }
    let grads = match acc {
        Some(loss) => Some(s.backward(loss)?),
        None => None,
    };
    Ok(WorkOutput { grads, total, parts })
}

struct Runner<'a> {
    model: Model,
    state: OptimState,
    cfg: &'a TrainConfig,
    clips: &'a ClipStore,
    vocab: &'a Vocabulary,
    rng: ChaCha8Rng,
    step: usize,
    total_steps: usize,
    history: Vec<HistoryRecord>,
    epoch_loss: (f64, usize),
}

impl<'a> Runner<'a> {
    fn new(model: Model, cfg: &'a TrainConfig, clips: &'a ClipStore, vocab: &'a Vocabulary, total_steps: usize) -> Self {
        Self {
            state: OptimState::new(model.params()),
            model,
            cfg,
            clips,
            vocab,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            step: 0,
            total_steps,
            history: Vec::new(),
            epoch_loss: (0.0, 0),
        }
    }

    fn work(&mut self, clip: &str, terms: Vec<Term>) -> Result<Work> {
        let stored = self.clips.get(clip)?.frames();
        let frames = sample_frames(stored, self.model.config().frames, SampleMode::Random, &mut self.rng)?;
        Ok(Work {
            clip: clip.to_string(),
            frames,
            terms,
            seed: self.rng.gen(),
        })
    }

    fn clip_ref(w: &Work) -> ClipRef {
        ClipRef::new(w.clip.clone(), w.frames.clone())
    }

    /// Averages the per-example gradients of a batch and applies one update.
    fn update(&mut self, epoch: usize, task: &str, works: &[Work]) -> Result<()> {
        let model = &self.model;
        let clips = self.clips;
        let outputs = works.par_iter().map(|w| work_grads(model, clips, w)).collect::<Vec<_>>();
        let b = works.len() as f64;
        let mut grads = ParamGrads::zeros_like(self.model.params());
        let mut loss = 0.0;
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for out in outputs {
            let out = out?;
            if let Some(g) = &out.grads {
                grads.add_scaled(g, 1.0 / b);
            }
            loss += out.total / b;
            for (name, v) in out.parts {
                let e = sums.entry(name.to_string()).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
        }
        if !loss.is_finite() || !grads.is_finite() {
            return Err(TrainError::Divergence { step: self.step });
        }
        if let Some(c) = self.cfg.max_grad_norm {
            let n = grads.norm();
            if n > c {
                grads.scale(c / n);
            }
        }
        let lr = lr_schedule(self.step, self.total_steps, self.cfg.lr, self.cfg.warmup_ratio);
        adamw_step(self.model.params_mut(), &grads, &mut self.state, self.cfg, lr)?;
        self.history.push(HistoryRecord {
            step: self.step,
            epoch,
            task: task.to_string(),
            loss,
            components: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            lr,
            eval: BTreeMap::new(),
        });
        self.epoch_loss.0 += loss;
        self.epoch_loss.1 += 1;
        self.step += 1;
        Ok(())
    }

    fn end_epoch(&mut self, epoch: usize, task: &str, eval: Option<&MetricEntry>) {
        let (sum, n) = std::mem::take(&mut self.epoch_loss);
        let mean = if n == 0 { 0.0 } else { sum / n as f64 };
        let mut metrics = BTreeMap::new();
        if let Some(e) = eval {
            metrics.insert(format!("{:?}", e.kind).to_lowercase(), e.value);
            metrics.extend(e.details.clone());
            log::info!("epoch {epoch} {task}: loss {mean:.4}, val {:.2}", e.value);
        } else {
            log::info!("epoch {epoch} {task}: loss {mean:.4}");
        }
        self.history.push(HistoryRecord {
            step: self.step,
            epoch,
            task: format!("{task}/epoch"),
            loss: mean,
            components: BTreeMap::new(),
            lr: lr_schedule(self.step, self.total_steps, self.cfg.lr, self.cfg.warmup_ratio),
            eval: metrics,
        });
    }

    /// Loss terms of one training sample of `task`. `batch` holds the caption
    /// tokens of the batch for matching negatives.
    fn terms(
        &mut self,
        task: TaskTag,
        s: &Sample,
        w: &Work,
        batch: &[&[TokenId]],
        route: &Route,
        decoration: DecorationVariant,
    ) -> Result<Vec<Term>> {
        let one = |name, part| vec![Term { name, weight: 1.0, part }];
        let clip = Self::clip_ref(w);
        let vocab = self.vocab;
        let dec = |ex: MaskedExample| -> Result<Part> { Ok(Part::Masked(decorate(ex, decoration, vocab)?)) };
        Ok(match (&s.kind, task, route) {
            (SampleKind::Pair { text, .. }, TaskTag::Mlm, _) => {
                let ex = build_mlm(clip, &TokenSeq::from_words(text), &self.cfg.masking, vocab, &mut self.rng)?;
                one("mlm", Part::Masked(ex))
            }
            (SampleKind::Pair { text, .. }, TaskTag::Vtm | TaskTag::Retrieval, Route::Unified) => {
                if self.cfg.all_pairs && task == TaskTag::Retrieval {
                    let mut terms = vec![Term {
                        name: "vtm",
                        weight: 1.0,
                        part: dec(vtm_example(clip.clone(), text, true, task))?,
                    }];
                    for other in batch.iter().filter(|t| **t != text.as_slice()) {
                        terms.push(Term {
                            name: "vtm",
                            weight: 1.0,
                            part: dec(vtm_example(clip.clone(), other, false, task))?,
                        });
                    }
                    terms
                } else {
                    one("vtm", dec(build_vtm(clip, text, batch, task, &mut self.rng))?)
                }
            }
            (SampleKind::Pair { text, .. }, TaskTag::Vtm | TaskTag::Retrieval, Route::Baseline { .. }) => {
                let ex = if self.rng.gen::<f64>() < 0.5 {
                    baseline_vtm(clip, text, true)
                } else {
                    let others: Vec<&[TokenId]> = batch.iter().copied().filter(|t| *t != text.as_slice()).collect();
                    if others.is_empty() {
                        baseline_vtm(clip, text, true)
                    } else {
                        baseline_vtm(clip, others[self.rng.gen_range(0..others.len())], false)
                    }
                };
                one("vtm", Part::Class(ex))
            }
            (SampleKind::Pair { text, .. }, TaskTag::Caption, _) => {
                let ex = build_caption_train(clip, text, &self.cfg.masking, vocab, &mut self.rng)?;
                one("caption", dec(ex)?)
            }
            (SampleKind::Mc { question, answers, gold, .. }, TaskTag::McQa, Route::Unified) => {
                one("mc_qa", dec(build_mc(clip, question, answers, *gold)?)?)
            }
            (SampleKind::Mc { question, answers, gold, .. }, TaskTag::McQa, Route::Baseline { .. }) => {
                one("mc_qa", Part::Class(baseline_mc(clip, question, answers, *gold)))
            }
            (SampleKind::Oe { question, answer }, TaskTag::OeQa, Route::Unified) => {
                let a = tokenize(answer, vocab).words().to_vec();
                one("oe_qa", dec(build_oe(clip, question, &a)?)?)
            }
            (SampleKind::Fib { sentence, answer }, TaskTag::Fib, Route::Unified) => {
                one("fib", dec(build_fib(clip, sentence, answer, vocab)?)?)
            }
            (SampleKind::Oe { answer, .. } | SampleKind::Fib { answer, .. }, TaskTag::OeQa | TaskTag::Fib, Route::Baseline { answers }) => {
                let input = baseline_oe_input(s, vocab)?;
                let idx = answers.iter().position(|a| a == answer);
                let words = &input[1..input.len() - 1];
                one(task.name(), Part::Class(baseline_oe(clip, words, idx)))
            }
            _ => return Err(TrainError::Data(format!("sample {} does not fit task {task}", s.id))),
        })
    }

    /// One update on `batch` of `task`.
    fn task_step(
        &mut self,
        epoch: usize,
        task: TaskTag,
        batch: &[&Sample],
        route: &Route,
        decoration: DecorationVariant,
    ) -> Result<()> {
        let texts: Vec<&[TokenId]> = batch
            .iter()
            .filter_map(|s| match &s.kind {
                SampleKind::Pair { text, .. } => Some(text.as_slice()),
                _ => None,
            })
            .collect();
        let mut works = Vec::with_capacity(batch.len());
        for s in batch {
            let mut w = self.work(&s.clip, Vec::new())?;
            w.terms = self.terms(task, s, &w, &texts, route, decoration)?;
            works.push(w);
        }
        self.update(epoch, task.name(), &works)
    }
}

fn check_route(model: &Model, route: &Route) -> Result<()> {
    if let Route::Baseline { answers } = route {
        let Some(h) = &model.config().baseline_heads else {
            return Err(TrainError::Config("baseline route needs a model with baseline heads".into()));
        };
        if !answers.is_empty() && h.oe_answers != answers.len() {
            return Err(TrainError::Config(format!(
                "answer head has {} outputs for {} answers",
                h.oe_answers,
                answers.len()
            )));
        }
    }
    Ok(())
}

fn shuffled<'s>(samples: &'s [Sample], rng: &mut ChaCha8Rng) -> Vec<&'s Sample> {
    let mut v: Vec<&Sample> = samples.iter().collect();
    v.shuffle(rng);
    v
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

pub struct PretrainOutcome {
    pub model: Model,
    pub history: Vec<HistoryRecord>,
}

/// Pretraining on caption pairs with masked language modeling and
/// video-text matching. Under the unified route matching is read from the
/// shared head at an appended `[MASK]`; under the baseline route it goes
/// through the binary head.
pub fn pretrain(
    model: Model,
    pairs: &[Sample],
    clips: &ClipStore,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    route: &Route,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    check_route(&model, route)?;
    if cfg.batch_size < 2 {
        return Err(TrainError::Config("pretraining needs batches of at least 2 for matching negatives".into()));
    }
    if pairs.is_empty() {
        return Err(TrainError::Data("no pretraining pairs".into()));
    }
    let spe = steps_per_epoch(pairs.len(), cfg.batch_size);
    let mut r = Runner::new(model, cfg, clips, vocab, spe * cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = shuffled(pairs, &mut r.rng);
        for batch in order.chunks(cfg.batch_size) {
            let texts: Vec<&[TokenId]> = batch
                .iter()
                .map(|s| match &s.kind {
                    SampleKind::Pair { text, .. } => Ok(text.as_slice()),
                    _ => Err(TrainError::Data(format!("{} is not a caption pair", s.id))),
                })
                .collect::<Result<_>>()?;
            let (mlm, vtm) = match cfg.objective {
                ObjectiveMode::Mixed => (true, true),
                ObjectiveMode::Alternating => (r.step % 2 == 0, r.step % 2 == 1),
            };
            let mut works = Vec::with_capacity(batch.len());
            for s in batch {
                let mut w = r.work(&s.clip, Vec::new())?;
                let mut terms = Vec::new();
                if mlm {
                    terms.extend(r.terms(TaskTag::Mlm, s, &w, &texts, route, DecorationVariant::None)?);
                }
                if vtm {
                    let mut t = r.terms(TaskTag::Vtm, s, &w, &texts, route, DecorationVariant::None)?;
                    t.iter_mut().for_each(|t| t.weight = cfg.vtm_weight);
                    terms.extend(t);
                }
                w.terms = terms;
                works.push(w);
            }
            r.update(epoch, "pretrain", &works)?;
        }
        r.end_epoch(epoch, "pretrain", None);
    }
    Ok(PretrainOutcome {
        model: r.model,
        history: r.history,
    })
}

pub struct FinetuneOutcome {
    /// Checkpoint with the best validation metric (the last one without a
    /// validation split).
    pub best: Model,
    pub last: Model,
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
    pub history: Vec<HistoryRecord>,
    /// Size of the training split actually used.
    pub train_size: usize,
}

/// Single-task finetuning with per-epoch validation.
pub fn finetune(
    model: Model,
    ds: &TaskDataset,
    clips: &ClipStore,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    route: &Route,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    check_route(&model, route)?;
    if matches!(ds.task, TaskTag::Mlm | TaskTag::Vtm) {
        return Err(TrainError::Config(format!("{} is a pretraining objective", ds.task)));
    }
    let train = match cfg.few_shot {
        Some(f) => few_shot(&ds.train, f, cfg.seed)?,
        None => ds.train.clone(),
    };
    if train.is_empty() {
        return Err(TrainError::Data(format!("{} has no training samples", ds.name)));
    }
    let spe = steps_per_epoch(train.len(), cfg.batch_size);
    let mut r = Runner::new(model, cfg, clips, vocab, spe * cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    for epoch in 0..cfg.epochs {
        let order = shuffled(&train, &mut r.rng);
        for batch in order.chunks(cfg.batch_size) {
            r.task_step(epoch, ds.task, batch, route, cfg.decoration)?;
        }
        let val = if ds.val.is_empty() {
            None
        } else {
            let (_, e) = evaluate(&r.model, route, &ds.name, ds.task, &ds.val, clips, vocab, cfg.decoration, &cfg.eval)?;
            Some(e)
        };
        r.end_epoch(epoch, ds.task.name(), val.as_ref());
        if let Some(e) = val {
            if best.as_ref().is_none_or(|(m, _, _)| e.value > *m) {
                best = Some((e.value, epoch, r.model.clone()));
            }
        }
    }
    let (best_metric, best_epoch, best_model) = match best {
        Some((m, e, model)) => (Some(m), e, model),
        None => (None, cfg.epochs - 1, r.model.clone()),
    };
    Ok(FinetuneOutcome {
        best: best_model,
        last: r.model,
        best_epoch,
        best_metric,
        history: r.history,
        train_size: train.len(),
    })
}

/// Finetunes a model with task-specific heads. The answer head is resized
/// (freshly initialized) when it does not match the dataset's answer set.
pub fn train_baseline(
    model: Model,
    ds: &TaskDataset,
    clips: &ClipStore,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    let Some(heads) = model.config().baseline_heads.clone() else {
        return Err(TrainError::Config("baseline training needs a model with baseline heads".into()));
    };
    let answers = ds.answer_vocab();
    let model = if matches!(ds.task, TaskTag::OeQa | TaskTag::Fib) && heads.oe_answers != answers.len() {
        log::info!("resizing the answer head to {} answers", answers.len());
        model.with_baseline_heads(
            BaselineHeads {
                oe_answers: answers.len(),
                ..heads
            },
            cfg.seed,
        )?
    } else {
        model
    };
    let answers = if matches!(ds.task, TaskTag::OeQa | TaskTag::Fib) {
        answers
    } else {
        Vec::new()
    };
    finetune(model, ds, clips, vocab, cfg, &Route::Baseline { answers })
}

/// Best multitask checkpoint for one task.
pub struct TaskBest {
    pub dataset: String,
    pub task: TaskTag,
    pub epoch: usize,
    pub metric: f64,
    pub model: Model,
}

pub struct MultitaskOutcome {
    /// The all-in-one model after the last step.
    pub model: Model,
    /// Per-task best validation checkpoints, in dataset order.
    pub best: Vec<TaskBest>,
    /// How many steps each dataset was drawn for.
    pub selections: Vec<usize>,
    pub contamination: ContaminationReport,
    pub history: Vec<HistoryRecord>,
}

/// The dataset index of every multitask step for `seed`: uniform over
/// `n_datasets`, drawn from a stream separate from example construction.
pub fn multitask_schedule(seed: u64, n_datasets: usize, steps: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SCHEDULE_STREAM);
    (0..steps).map(|_| rng.gen_range(0..n_datasets)).collect()
}

/// Endless reshuffled pass over one dataset's training split.
struct Cursor {
    order: Vec<usize>,
    pos: usize,
}

impl Cursor {
    fn next_batch(&mut self, n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(n) {
            if self.pos == self.order.len() {
                self.order = (0..n).collect();
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Multitask training of one parameter set: every step picks a dataset
/// uniformly at random and trains on a batch of it. Training clips that
/// appear in any held-out split of any dataset are dropped first.
pub fn multitask(
    model: Model,
    datasets: &[TaskDataset],
    clips: &ClipStore,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    route: &Route,
) -> Result<MultitaskOutcome> {
    cfg.validate()?;
    check_route(&model, route)?;
    if datasets.is_empty() {
        return Err(TrainError::Config("multitask training needs at least one dataset".into()));
    }
    let held: Vec<&[Sample]> = datasets.iter().flat_map(|d| [d.val.as_slice(), d.test.as_slice()]).collect();
    let mut contamination = ContaminationReport::default();
    let mut trains = Vec::with_capacity(datasets.len());
    for d in datasets {
        if matches!(d.task, TaskTag::Mlm | TaskTag::Vtm) {
            return Err(TrainError::Config(format!("{} is a pretraining objective", d.task)));
        }
        let (kept, rep) = contamination_filter(d.train.clone(), &held);
        contamination.removed.extend(rep.removed);
        let kept = match cfg.few_shot {
            Some(f) => few_shot(&kept, f, cfg.seed)?,
            None => kept,
        };
        if kept.is_empty() {
            return Err(TrainError::Data(format!("{} has no training samples", d.name)));
        }
        trains.push(kept);
    }
    if !contamination.removed.is_empty() {
        log::warn!("removed {} contaminated training samples", contamination.removed.len());
    }
    let spe: usize = trains.iter().map(|t| steps_per_epoch(t.len(), cfg.batch_size)).sum();
    let schedule = multitask_schedule(cfg.seed, datasets.len(), spe * cfg.epochs);
    let mut r = Runner::new(model, cfg, clips, vocab, spe * cfg.epochs);
    let mut cursors: Vec<Cursor> = trains.iter().map(|_| Cursor { order: Vec::new(), pos: 0 }).collect();
    let mut selections = vec![0; datasets.len()];
    let mut best: Vec<Option<TaskBest>> = datasets.iter().map(|_| None).collect();
    for epoch in 0..cfg.epochs {
        for &d in &schedule[epoch * spe..(epoch + 1) * spe] {
            selections[d] += 1;
            let idx = cursors[d].next_batch(trains[d].len(), cfg.batch_size, &mut r.rng);
            let batch: Vec<&Sample> = idx.iter().map(|&i| &trains[d][i]).collect();
            r.task_step(epoch, datasets[d].task, &batch, route, cfg.decoration)?;
        }
        let mut evals = Vec::new();
        for (d, ds) in datasets.iter().enumerate() {
            if ds.val.is_empty() {
                continue;
            }
            let (_, e) = evaluate(&r.model, route, &ds.name, ds.task, &ds.val, clips, vocab, cfg.decoration, &cfg.eval)?;
            if best[d].as_ref().is_none_or(|b| e.value > b.metric) {
                best[d] = Some(TaskBest {
                    dataset: ds.name.clone(),
                    task: ds.task,
                    epoch,
                    metric: e.value,
                    model: r.model.clone(),
                });
            }
            evals.push(e);
        }
        let (sum, n) = std::mem::take(&mut r.epoch_loss);
        let mut metrics = BTreeMap::new();
        for e in &evals {
            metrics.insert(format!("{}/{}", e.dataset, e.task.name()), e.value);
        }
        log::info!("multitask epoch {epoch}: loss {:.4}", sum / n.max(1) as f64);
        r.history.push(HistoryRecord {
            step: r.step,
            epoch,
            task: "multitask/epoch".into(),
            loss: sum / n.max(1) as f64,
            components: BTreeMap::new(),
            lr: lr_schedule(r.step, r.total_steps, cfg.lr, cfg.warmup_ratio),
            eval: metrics,
        });
    }
    Ok(MultitaskOutcome {
        model: r.model,
        best: best.into_iter().flatten().collect(),
        selections,
        contamination,
        history: r.history,
    })
}

/// Further single-task finetuning of the multitask model on each dataset.
pub fn mt_to_st(
    model: &Model,
    datasets: &[TaskDataset],
    clips: &ClipStore,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    route: &Route,
) -> Result<Vec<(String, FinetuneOutcome)>> {
    datasets
        .iter()
        .map(|d| Ok((d.name.clone(), finetune(model.clone(), d, clips, vocab, cfg, route)?)))
        .collect()
}

#[cfg(test)]
pub(crate) fn cursor_batches(n: usize, size: usize, count: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut c = Cursor { order: Vec::new(), pos: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| c.next_batch(n, size, &mut rng)).collect()
}
