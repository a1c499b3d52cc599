use rayon::prelude::*;

use super::{vtm_example, ClassExample, ClipRef, MaskedExample, Result, TaskError, TaskTag};
use crate::model::{AttentionMode, BaselineKind, Model, Session};
use crate::tensor::{softmax_slice, Var};
use crate::text::{TokenId, Vocabulary, CLS, MASK, SEP, TRUE};
use crate::vision::PatchGrid;

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Softmax probability of `id` under `logits`.
pub fn token_prob(logits: &[f64], id: TokenId) -> f64 {
    let mut p = vec![0.0; logits.len()];
    softmax_slice(logits, &mut p);
    p[id as usize]
}

/// Head logits at each mask position of `ex`, one row per position.
pub fn mask_logits(model: &Model, video: &PatchGrid, ex: &MaskedExample) -> Result<Vec<Vec<f64>>> {
    if ex.mask_positions.is_empty() {
        return Ok(Vec::new());
    }
    let mut s = model.session();
    let enc = s.encode(video, &ex.input, ex.input.len(), ex.mode)?;
    let rows: Vec<usize> = ex.mask_positions.iter().map(|&p| enc.text_row(p)).collect();
    let h = s.rows(enc.hidden, &rows)?;
    let logits = s.mlm_logits(h)?;
    let t = s.tape.value(logits);
    Ok((0..t.rows()).map(|r| t.row(r).to_vec()).collect())
}

fn single_mask(ex: &MaskedExample) -> Result<()> {
    if ex.mask_positions.len() != 1 {
        return Err(TaskError::Input(format!(
            "{} readout needs one mask position, found {}",
            ex.task,
            ex.mask_positions.len()
        )));
    }
    Ok(())
}

/// Probability of `true` at the mask of a matching example, normalised over
/// the whole vocabulary.
pub fn p_true(model: &Model, video: &PatchGrid, ex: &MaskedExample) -> Result<f64> {
    single_mask(ex)?;
    let logits = mask_logits(model, video, ex)?;
    Ok(token_prob(&logits[0], TRUE))
}

/// [`p_true`] for the plain pair (`video`, `words`).
pub fn score_vtm(model: &Model, video: &PatchGrid, words: &[TokenId]) -> Result<f64> {
    let ex = vtm_example(ClipRef::default(), words, true, TaskTag::Vtm);
    p_true(model, video, &ex)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ranked {
    pub id: String,
    pub score: f64,
}

/// Descending score, ties by ascending id.
pub fn sort_ranked(mut items: Vec<Ranked>) -> Vec<Ranked> {
    items.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    items
}

/// Scores every candidate clip against the query's matching input and ranks
/// them by the probability of `true`.
pub fn rank_retrieval(model: &Model, query: &MaskedExample, candidates: &[(&str, &PatchGrid)]) -> Result<Vec<Ranked>> {
    if candidates.is_empty() {
        return Err(TaskError::Input("no retrieval candidates".into()));
    }
    let scored = candidates
        .par_iter()
        .map(|(id, grid)| {
            Ok(Ranked {
                id: id.to_string(),
                score: p_true(model, grid, query)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sort_ranked(scored))
}

/// Text-side ranking: every candidate text scored against one clip.
pub fn rank_texts(model: &Model, video: &PatchGrid, texts: &[(&str, &MaskedExample)]) -> Result<Vec<Ranked>> {
    if texts.is_empty() {
        return Err(TaskError::Input("no candidate texts".into()));
    }
    let scored = texts
        .par_iter()
        .map(|(id, ex)| {
            Ok(Ranked {
                id: id.to_string(),
                score: p_true(model, video, ex)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sort_ranked(scored))
}

/// Best answer index among the digit tokens `0..k`; everything else in the
/// vocabulary is ignored.
pub fn infer_mc(logits: &[f64], k: usize) -> usize {
    assert!((1..=super::MAX_CHOICES).contains(&k), "k = {k}");
    let digits: Vec<f64> = (0..k).map(|i| logits[Vocabulary::digit(i) as usize]).collect();
    argmax_first(&digits)
}

pub fn predict_mc(model: &Model, video: &PatchGrid, ex: &MaskedExample, k: usize) -> Result<usize> {
    single_mask(ex)?;
    Ok(infer_mc(&mask_logits(model, video, ex)?[0], k))
}

/// Unrestricted argmax over the vocabulary, as a word.
pub fn infer_oe(logits: &[f64], vocab: &Vocabulary) -> String {
    let id = argmax_first(logits) as TokenId;
    vocab.token(id).unwrap_or_default().to_string()
}

pub fn predict_oe(model: &Model, video: &PatchGrid, ex: &MaskedExample, vocab: &Vocabulary) -> Result<String> {
    single_mask(ex)?;
    Ok(infer_oe(&mask_logits(model, video, ex)?[0], vocab))
}

/// Greedy generation by mask insertion. Each step feeds
/// `prefix + generated + [MASK]` under causal attention and commits the
/// argmax at the mask. Stops at `[SEP]` (not included in the output) or
/// after `max_steps` tokens. `prefix` starts with `[CLS]` and may carry a
/// decoration.
pub fn decode_caption(model: &Model, video: &PatchGrid, prefix: &[TokenId], max_steps: usize) -> Result<Vec<TokenId>> {
    if prefix.first() != Some(&CLS) {
        return Err(TaskError::Input("decoding prefix must start with [CLS]".into()));
    }
    let max_len = model.config().max_text_len;
    let mut out = Vec::new();
    // the video features do not depend on the text, so one session serves every step
    let mut s = model.session();
    let v = s.video_features(video)?;
    for _ in 0..max_steps {
        let mut input = prefix.to_vec();
        input.extend_from_slice(&out);
        input.push(MASK);
        if input.len() > max_len {
            log::debug!("caption reached the text length limit of {max_len}");
            break;
        }
        let next = step_argmax(&mut s, v, &input)?;
        if next == SEP {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

fn step_argmax(s: &mut Session<'_>, video: Var, input: &[TokenId]) -> Result<TokenId> {
    let enc = s.encode_features(video, input, input.len(), AttentionMode::Seq2seqCausal)?;
    let h = s.rows(enc.hidden, &[enc.text_row(input.len() - 1)])?;
    let logits = s.mlm_logits(h)?;
    Ok(argmax_first(s.tape.value(logits).data()) as TokenId)
}

/// Question and answer joined as `Q [SEP] A`.
pub fn qa_pair_words(question: &[TokenId], answer: &[TokenId]) -> Vec<TokenId> {
    let mut w = question.to_vec();
    w.push(SEP);
    w.extend_from_slice(answer);
    w
}

/// Zero-shot multiple choice through the matching readout: each
/// `[CLS] Q [SEP] A [SEP] [MASK]` is scored by the probability of `true`;
/// the best-scoring answer wins (ties to the lowest index).
pub fn zero_shot_mc(
    model: &Model,
    video: &PatchGrid,
    question: &[TokenId],
    answers: &[Vec<TokenId>],
) -> Result<(usize, Vec<f64>)> {
    if answers.is_empty() {
        return Err(TaskError::Input("no answer choices".into()));
    }
    let scores = answers
        .iter()
        .map(|a| score_vtm(model, video, &qa_pair_words(question, a)))
        .collect::<Result<Vec<_>>>()?;
    Ok((argmax_first(&scores), scores))
}

/// Output of a baseline head on the `[CLS]` row.
pub fn baseline_scores(model: &Model, video: &PatchGrid, input: &[TokenId], kind: BaselineKind) -> Result<Vec<f64>> {
    let mut s = model.session();
    let enc = s.encode(video, input, input.len(), AttentionMode::Bidirectional)?;
    let cls = s.rows(enc.hidden, &[enc.text_row(0)])?;
    let out = s.baseline_logits(cls, kind)?;
    Ok(s.tape.value(out).data().to_vec())
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Matched-probability of the binary baseline head.
pub fn baseline_p_match(model: &Model, video: &PatchGrid, words: &[TokenId]) -> Result<f64> {
    let input = crate::text::TokenSeq::from_words(words).ids().to_vec();
    Ok(sigmoid(baseline_scores(model, video, &input, BaselineKind::VtmBinary)?[0]))
}

/// Zero-shot multiple choice for the task-specific baseline: rank answers by
/// the binary matching head's matched-probability.
pub fn zero_shot_mc_baseline(
    model: &Model,
    video: &PatchGrid,
    question: &[TokenId],
    answers: &[Vec<TokenId>],
) -> Result<(usize, Vec<f64>)> {
    if answers.is_empty() {
        return Err(TaskError::Input("no answer choices".into()));
    }
    let scores = answers
        .iter()
        .map(|a| baseline_p_match(model, video, &qa_pair_words(question, a)))
        .collect::<Result<Vec<_>>>()?;
    Ok((argmax_first(&scores), scores))
}

/// Shared-head loss of one example on an existing session, reusing already
/// computed video features. `None` when the example has nothing to predict.
pub fn masked_loss(s: &mut Session<'_>, video: Var, ex: &MaskedExample) -> Result<Option<Var>> {
    if !ex.is_trainable() {
        return Ok(None);
    }
    let enc = s.encode_features(video, &ex.input, ex.input.len(), ex.mode)?;
    let rows: Vec<usize> = ex.mask_positions.iter().map(|&p| enc.text_row(p)).collect();
    let h = s.rows(enc.hidden, &rows)?;
    let logits = s.mlm_logits(h)?;
    Ok(Some(s.tape.cross_entropy(logits, &ex.mask_labels())?))
}

/// Baseline-head loss: binary cross-entropy for matching, softmax
/// cross-entropy for the classifiers.
pub fn class_loss(s: &mut Session<'_>, video: Var, ex: &ClassExample) -> Result<Option<Var>> {
    let Some(target) = ex.target else {
        return Ok(None);
    };
    let enc = s.encode_features(video, &ex.input, ex.input.len(), AttentionMode::Bidirectional)?;
    let cls = s.rows(enc.hidden, &[enc.text_row(0)])?;
    let out = s.baseline_logits(cls, ex.kind)?;
    let loss = match ex.kind {
        BaselineKind::VtmBinary => s.tape.bce_with_logits(out, &[target as f64])?,
        _ => s.tape.cross_entropy(out, &[target as i64])?,
    };
    Ok(Some(loss))
}
