use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{ClipStore, Sample, SampleKind};
use super::{Result, Route, TrainError};
use crate::metrics::{score_task, MetricEntry};
use crate::model::{BaselineKind, Model};
use crate::tasks::{
    argmax_first, baseline_scores, build_fib, build_mc, build_oe, decode_caption, decorate, decoration_tokens,
    predict_mc, predict_oe, rank_retrieval, vtm_example, zero_shot_mc, zero_shot_mc_baseline, ClipRef,
    DecorationVariant, PredictionRecord, TaskTag, MAX_DECODE_STEPS,
};
use crate::text::{detokenize, tokenize, TokenSeq, Vocabulary, CLS};
use crate::vision::{sample_frames, PatchGrid, SampleMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Evaluate at most this many samples (in split order).
    pub max_items: Option<usize>,
    /// Retrieval queries and candidates are the first this many samples.
    pub retrieval_candidates: usize,
    pub decode_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_items: None,
            retrieval_candidates: 50,
            decode_steps: MAX_DECODE_STEPS,
        }
    }
}

/// Evenly sampled grids of the clips referenced by `samples`.
fn eval_grids(model: &Model, samples: &[Sample], clips: &ClipStore) -> Result<HashMap<String, PatchGrid>> {
    let cfg = model.config();
    let mut out = HashMap::new();
    for s in samples {
        if out.contains_key(&s.clip) {
            continue;
        }
        let stored = clips.get(&s.clip)?.frames();
        let frames = sample_frames(stored, cfg.frames, SampleMode::Even, &mut ChaCha8Rng::seed_from_u64(0))?;
        out.insert(s.clip.clone(), clips.grid(&s.clip, &frames, cfg)?);
    }
    Ok(out)
}

fn words(text: &str, vocab: &Vocabulary) -> Vec<u32> {
    tokenize(text, vocab).words().to_vec()
}

fn record(task: TaskTag, s: &Sample, prediction: String, gold: Vec<String>) -> PredictionRecord {
    PredictionRecord {
        task,
        id: s.id.clone(),
        prediction,
        gold,
        scores: Vec::new(),
        ranking: Vec::new(),
    }
}

fn cap(samples: &[Sample], n: Option<usize>) -> &[Sample] {
    &samples[..n.map_or(samples.len(), |n| n.min(samples.len()))]
}

/// Predictions and headline metric of a finetuned (or multitask) model on
/// `samples` of `task`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Model,
    route: &Route,
    dataset: &str,
    task: TaskTag,
    samples: &[Sample],
    clips: &ClipStore,
    vocab: &Vocabulary,
    decoration: DecorationVariant,
    ecfg: &EvalConfig,
) -> Result<(Vec<PredictionRecord>, MetricEntry)> {
    let samples = if task == TaskTag::Retrieval {
        cap(samples, Some(ecfg.retrieval_candidates.min(ecfg.max_items.unwrap_or(usize::MAX))))
    } else {
        cap(samples, ecfg.max_items)
    };
    if samples.is_empty() {
        return Err(TrainError::Data(format!("no {task} samples to evaluate")));
    }
    let grids = eval_grids(model, samples, clips)?;
    let records = match task {
        TaskTag::Retrieval => retrieval(model, route, task, samples, &grids, vocab, decoration)?,
        _ => samples
            .par_iter()
            .map(|s| predict_one(model, route, task, s, &grids[&s.clip], vocab, decoration, ecfg))
            .collect::<Result<Vec<_>>>()?,
    };
    let refs: Vec<&PredictionRecord> = records.iter().collect();
    let entry = score_task(dataset, task, &refs)?;
    Ok((records, entry))
}

fn retrieval(
    model: &Model,
    route: &Route,
    task: TaskTag,
    samples: &[Sample],
    grids: &HashMap<String, PatchGrid>,
    vocab: &Vocabulary,
    decoration: DecorationVariant,
) -> Result<Vec<PredictionRecord>> {
    let candidates: Vec<(&str, &PatchGrid)> = samples.iter().map(|s| (s.clip.as_str(), &grids[&s.clip])).collect();
    samples
        .iter()
        .map(|s| {
            let SampleKind::Pair { text, .. } = &s.kind else {
                return Err(TrainError::Data(format!("{} is not a caption pair", s.id)));
            };
            let ranked = match route {
                Route::Unified => {
                    let q = decorate(vtm_example(ClipRef::default(), text, true, task), decoration, vocab)?;
                    rank_retrieval(model, &q, &candidates)?
                }
                Route::Baseline { .. } => {
                    let input = TokenSeq::from_words(text).ids().to_vec();
                    let scored = candidates
                        .par_iter()
                        .map(|(id, g)| {
                            let z = baseline_scores(model, g, &input, BaselineKind::VtmBinary)?[0];
                            Ok(crate::tasks::Ranked {
                                id: id.to_string(),
                                score: 1.0 / (1.0 + (-z).exp()),
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    crate::tasks::sort_ranked(scored)
                }
            };
            let mut r = record(task, s, ranked[0].id.clone(), vec![s.clip.clone()]);
            r.scores = ranked.iter().map(|x| x.score).collect();
            r.ranking = ranked.into_iter().map(|x| x.id).collect();
            Ok(r)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn predict_one(
    model: &Model,
    route: &Route,
    task: TaskTag,
    s: &Sample,
    grid: &PatchGrid,
    vocab: &Vocabulary,
    decoration: DecorationVariant,
    ecfg: &EvalConfig,
) -> Result<PredictionRecord> {
    let clip = ClipRef::new(s.clip.clone(), grid.frame_indices().to_vec());
    let rec = match (&s.kind, route) {
        (SampleKind::Pair { caption, .. }, _) if task == TaskTag::Caption => {
            let mut prefix = vec![CLS];
            prefix.extend(decoration_tokens(task, decoration, vocab)?);
            let out = decode_caption(model, grid, &prefix, ecfg.decode_steps)?;
            record(task, s, detokenize(&out, vocab)?, vec![caption.clone()])
        }
        (SampleKind::Mc { question, answers, gold, .. }, Route::Unified) => {
            let ex = decorate(build_mc(clip, question, answers, *gold)?, decoration, vocab)?;
            let p = predict_mc(model, grid, &ex, answers.len())?;
            record(task, s, p.to_string(), vec![gold.to_string()])
        }
        (SampleKind::Mc { question, answers, gold, .. }, Route::Baseline { .. }) => {
            let ex = crate::tasks::baseline_mc(clip, question, answers, *gold);
            let scores = baseline_scores(model, grid, &ex.input, BaselineKind::McClassifier)?;
            let p = argmax_first(&scores[..answers.len().min(scores.len())]);
            record(task, s, p.to_string(), vec![gold.to_string()])
        }
        (SampleKind::Oe { question, answer }, Route::Unified) => {
            let ex = decorate(build_oe(clip, question, &words(answer, vocab))?, decoration, vocab)?;
            record(task, s, predict_oe(model, grid, &ex, vocab)?, vec![answer.clone()])
        }
        (SampleKind::Fib { sentence, answer }, Route::Unified) => {
            let ex = decorate(build_fib(clip, sentence, answer, vocab)?, decoration, vocab)?;
            record(task, s, predict_oe(model, grid, &ex, vocab)?, vec![answer.clone()])
        }
        (SampleKind::Oe { answer, .. } | SampleKind::Fib { answer, .. }, Route::Baseline { answers }) => {
            let input = baseline_oe_input(s, vocab)?;
            let scores = baseline_scores(model, grid, &input, BaselineKind::OeClassifier)?;
            let p = argmax_first(&scores);
            record(task, s, answers.get(p).cloned().unwrap_or_default(), vec![answer.clone()])
        }
        _ => {
            return Err(TrainError::Data(format!("sample {} does not fit task {task}", s.id)));
        }
    };
    Ok(rec)
}

/// `[CLS] question [SEP]`, or the fill-in-blank sentence with `[MASK]`.
pub(crate) fn baseline_oe_input(s: &Sample, vocab: &Vocabulary) -> Result<Vec<u32>> {
    let text = match &s.kind {
        SampleKind::Oe { question, .. } => question.clone(),
        SampleKind::Fib { sentence, answer } => {
            let ex = build_fib(ClipRef::default(), sentence, answer, vocab)?;
            ex.input[1..ex.input.len() - 1].to_vec()
        }
        _ => return Err(TrainError::Data(format!("{} has no question", s.id))),
    };
    Ok(TokenSeq::from_words(&text).ids().to_vec())
}

/// Zero-shot evaluation of a model that never saw the task: multiple choice
/// through the matching readout, open-ended and fill-in-blank through the
/// answer at the mask (or the untrained answer head of the baseline).
pub fn evaluate_zero_shot(
    model: &Model,
    route: &Route,
    dataset: &str,
    task: TaskTag,
    samples: &[Sample],
    clips: &ClipStore,
    vocab: &Vocabulary,
    ecfg: &EvalConfig,
) -> Result<(Vec<PredictionRecord>, MetricEntry)> {
    if !matches!(task, TaskTag::McQa | TaskTag::OeQa | TaskTag::Fib) {
        return Err(TrainError::Config(format!(
            "zero-shot evaluation covers mc_qa, oe_qa and fib, not {task}"
        )));
    }
    let samples = cap(samples, ecfg.max_items);
    if samples.is_empty() {
        return Err(TrainError::Data(format!("no {task} samples to evaluate")));
    }
    let grids = eval_grids(model, samples, clips)?;
    let records = samples
        .par_iter()
        .map(|s| {
            let grid = &grids[&s.clip];
            match (&s.kind, route) {
                (SampleKind::Mc { question, answers, gold, .. }, _) => {
                    let (best, scores) = match route {
                        Route::Unified => zero_shot_mc(model, grid, question, answers)?,
                        Route::Baseline { .. } => zero_shot_mc_baseline(model, grid, question, answers)?,
                    };
                    let mut r = record(task, s, best.to_string(), vec![gold.to_string()]);
                    r.scores = scores;
                    Ok(r)
                }
                _ => predict_one(model, route, task, s, grid, vocab, DecorationVariant::None, ecfg),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PredictionRecord> = records.iter().collect();
    let entry = score_task(dataset, task, &refs)?;
    Ok((records, entry))
}
