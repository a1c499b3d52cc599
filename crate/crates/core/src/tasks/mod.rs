//! Every task expressed as masked-token prediction.
//!
//! Builders turn raw (video, text) annotations into [`MaskedExample`]s: token
//! ids with one or more `[MASK]` (or corrupted) positions and the label each
//! of those positions should predict. Inference readouts then interpret the
//! shared head's logits at the masked positions, for example the probability
//! of the word `true` for matching or the best digit token for multiple choice.
//!
//! | task             | text input                                      | target at mask      |
//! |------------------|-------------------------------------------------|---------------------|
//! | MLM              | `[CLS] w1 .. wn [SEP]`, 15% corrupted           | original words      |
//! | VTM / retrieval  | `[CLS] text [SEP] [MASK]`                       | `true` / `false`    |
//! | multiple choice  | `[CLS] Q [SEP] A0 [SEP] .. Ak-1 [MASK] [SEP]`   | digit of the answer |
//! | open-ended QA    | `[CLS] Q [MASK] [SEP]`                          | answer word         |
//! | fill-in-blank    | blank replaced by `[MASK]` in place             | missing word        |
//! | captioning       | `[CLS] caption [SEP]`, causal, 15% corrupted    | original words      |

mod infer;

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use infer::*;

use crate::model::{AttentionMode, BaselineKind, ModelError};
use crate::tensor::{TensorError, IGNORE};
use crate::text::{split_words, TaskToken, TextError, TokenId, TokenSeq, Vocabulary, CLS, FALSE, MASK, SEP, TRUE};

/// Largest multiple-choice size whose answer index is a single digit token.
pub const MAX_CHOICES: usize = 10;
/// Blank marker in fill-in-the-blank sentences.
pub const BLANK: &str = "___";
/// Generation cap for caption decoding.
pub const MAX_DECODE_STEPS: usize = 50;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("task configuration: {0}")]
    Config(String),
    #[error("bad task input: {0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("prediction record: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TaskError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskTag {
    Mlm,
    Vtm,
    Retrieval,
    McQa,
    OeQa,
    Fib,
    Caption,
}

impl TaskTag {
    pub const ALL: [TaskTag; 7] = [
        Self::Mlm,
        Self::Vtm,
        Self::Retrieval,
        Self::McQa,
        Self::OeQa,
        Self::Fib,
        Self::Caption,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mlm => "mlm",
            Self::Vtm => "vtm",
            Self::Retrieval => "retrieval",
            Self::McQa => "mc_qa",
            Self::OeQa => "oe_qa",
            Self::Fib => "fib",
            Self::Caption => "caption",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Human-readable instruction used by the prompt decoration.
    pub fn prompt(self) -> Option<&'static str> {
        match self {
            Self::Mlm => None,
            Self::Vtm | Self::Retrieval => Some("is the video-text paired, true or false"),
            Self::McQa => Some("which answer choice is correct, choose from 0, 1, 2, 3, 4."),
            Self::OeQa | Self::Fib => Some("answer the question about the video."),
            Self::Caption => Some("write a description about the video."),
        }
    }

    pub fn task_token(self) -> Option<TaskToken> {
        match self {
            Self::Mlm => None,
            Self::Vtm | Self::Retrieval => Some(TaskToken::Vtm),
            Self::McQa => Some(TaskToken::Mc),
            Self::OeQa | Self::Fib => Some(TaskToken::Oe),
            Self::Caption => Some(TaskToken::Cap),
        }
    }

    /// Baseline head serving this task, if the task is not generative.
    pub fn baseline_head(self) -> Option<BaselineKind> {
        match self {
            Self::Vtm | Self::Retrieval => Some(BaselineKind::VtmBinary),
            Self::McQa => Some(BaselineKind::McClassifier),
            Self::OeQa | Self::Fib => Some(BaselineKind::OeClassifier),
            Self::Mlm | Self::Caption => None,
        }
    }
}

impl std::fmt::Display for TaskTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How task identity is signalled in multi-task training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecorationVariant {
    #[default]
    #[serde(alias = "vanilla")]
    None,
    Prompt,
    Token,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecorationRecord {
    pub variant: DecorationVariant,
    /// Tokens inserted after `[CLS]`.
    pub inserted: usize,
}

/// Which clip an example belongs to and the frames sampled from it.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClipRef {
    pub id: String,
    pub frames: Vec<usize>,
}

impl ClipRef {
    pub fn new(id: impl Into<String>, frames: Vec<usize>) -> Self {
        Self {
            id: id.into(),
            frames,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedExample {
    pub clip: ClipRef,
    pub input: Vec<TokenId>,
    /// Positions whose hidden states go through the head, ascending.
    pub mask_positions: Vec<usize>,
    /// One label per input position; [`IGNORE`] where nothing is predicted.
    pub labels: Vec<i64>,
    pub mode: AttentionMode,
    pub task: TaskTag,
    pub decoration: Option<DecorationRecord>,
}

impl MaskedExample {
    fn new(clip: ClipRef, input: Vec<TokenId>, task: TaskTag) -> Self {
        let labels = vec![IGNORE; input.len()];
        let mode = if task == TaskTag::Caption {
            AttentionMode::Seq2seqCausal
        } else {
            AttentionMode::Bidirectional
        };
        Self {
            clip,
            input,
            mask_positions: Vec::new(),
            labels,
            mode,
            task,
            decoration: None,
        }
    }

    /// Labels at the mask positions, in order.
    pub fn mask_labels(&self) -> Vec<i64> {
        self.mask_positions.iter().map(|&p| self.labels[p]).collect()
    }

    /// Whether the example contributes any loss.
    pub fn is_trainable(&self) -> bool {
        self.labels.iter().any(|&l| l != IGNORE)
    }

    /// Checks the structural invariants every builder guarantees.
    pub fn check(&self) -> Result<()> {
        let fail = |m: &str| Err(TaskError::Input(format!("{} example: {m}", self.task)));
        if self.labels.len() != self.input.len() {
            return fail("labels and input differ in length");
        }
        if self.input.first() != Some(&CLS) {
            return fail("input does not start with [CLS]");
        }
        if !self.mask_positions.windows(2).all(|w| w[0] < w[1]) {
            return fail("mask positions not strictly ascending");
        }
        if self.mask_positions.iter().any(|&p| p >= self.input.len()) {
            return fail("mask position out of range");
        }
        for (i, &l) in self.labels.iter().enumerate() {
            if l != IGNORE && !self.mask_positions.contains(&i) {
                return fail("label outside the mask positions");
            }
        }
        let corrupting = matches!(self.task, TaskTag::Mlm | TaskTag::Caption);
        if !corrupting {
            if self.mask_positions.len() != 1 {
                return fail("expected exactly one mask position");
            }
            if self.input[self.mask_positions[0]] != MASK {
                return fail("mask position does not hold [MASK]");
            }
        }
        let causal = self.mode == AttentionMode::Seq2seqCausal;
        if causal != (self.task == TaskTag::Caption) {
            return fail("causal attention is reserved for captioning");
        }
        Ok(())
    }
}

/// Token corruption scheme for MLM and caption training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    /// Probability that an eligible position is selected.
    pub rate: f64,
    /// Of the selected positions: replaced by `[MASK]`.
    pub mask: f64,
    /// Replaced by a different random word.
    pub random: f64,
    /// Left unchanged.
    pub keep: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            rate: 0.15,
            mask: 0.8,
            random: 0.1,
            keep: 0.1,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(TaskError::Config(format!("masking rate {} outside [0, 1]", self.rate)));
        }
        let parts = [self.mask, self.random, self.keep];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(TaskError::Config(format!(
                "mask/random/keep proportions {parts:?} do not sum to 1"
            )));
        }
        Ok(())
    }
}

/// Corrupts `eligible` positions of `ids` in place and returns the labels.
fn corrupt<R: Rng>(
    ids: &mut [TokenId],
    eligible: &[usize],
    cfg: &MaskingConfig,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<(Vec<usize>, Vec<i64>)> {
    cfg.validate()?;
    let words = vocab.word_ids();
    let draw = |rng: &mut R| -> Vec<usize> {
        eligible
            .iter()
            .copied()
            .filter(|_| rng.gen::<f64>() < cfg.rate)
            .collect()
    };
    let mut chosen = draw(rng);
    if chosen.is_empty() {
        chosen = draw(rng);
    }
    let mut labels = vec![IGNORE; ids.len()];
    for &p in &chosen {
        let original = ids[p];
        labels[p] = original as i64;
        let u: f64 = rng.gen();
        if u < cfg.mask {
            ids[p] = MASK;
        } else if u < cfg.mask + cfg.random {
            // uniform over words other than the original
            let others = words.len() - usize::from(words.binary_search(&original).is_ok());
            if others > 0 {
                let mut r = words[rng.gen_range(0..words.len())];
                while r == original {
                    r = words[rng.gen_range(0..words.len())];
                }
                ids[p] = r;
            }
        }
    }
    Ok((chosen, labels))
}

/// Word-level masked language modeling on `[CLS] words [SEP]`. Special
/// tokens are never selected. If nothing is selected the draw is repeated
/// once; a second empty draw yields an example without loss.
pub fn build_mlm(
    clip: ClipRef,
    seq: &TokenSeq,
    cfg: &MaskingConfig,
    vocab: &Vocabulary,
    rng: &mut impl Rng,
) -> Result<MaskedExample> {
    let mut ids = seq.ids()[..seq.real_len()].to_vec();
    let eligible: Vec<usize> = (0..ids.len()).filter(|&i| !vocab.is_special(ids[i])).collect();
    let (positions, labels) = corrupt(&mut ids, &eligible, cfg, vocab, rng)?;
    let mut ex = MaskedExample::new(clip, ids, TaskTag::Mlm);
    ex.mask_positions = positions;
    ex.labels = labels;
    Ok(ex)
}

/// `[CLS] words [SEP] [MASK]` labelled `true` or `false`.
pub fn vtm_example(clip: ClipRef, words: &[TokenId], matched: bool, task: TaskTag) -> MaskedExample {
    let mut input = Vec::with_capacity(words.len() + 3);
    input.push(CLS);
    input.extend_from_slice(words);
    input.push(SEP);
    input.push(MASK);
    let pos = input.len() - 1;
    let mut ex = MaskedExample::new(clip, input, task);
    ex.mask_positions = vec![pos];
    ex.labels[pos] = if matched { TRUE } else { FALSE } as i64;
    ex
}

/// Matching example for the pair (`clip`, `own`). With probability 0.5 the
/// text is swapped for a different text of the batch and labelled `false`.
/// When the batch has no different text the pair stays positive.
pub fn build_vtm(
    clip: ClipRef,
    own: &[TokenId],
    batch: &[&[TokenId]],
    task: TaskTag,
    rng: &mut impl Rng,
) -> MaskedExample {
    if rng.gen::<f64>() < 0.5 {
        return vtm_example(clip, own, true, task);
    }
    let others: Vec<&[TokenId]> = batch.iter().copied().filter(|t| *t != own).collect();
    if others.is_empty() {
        log::warn!("no in-batch negative for clip {}; using the positive pair", clip.id);
        return vtm_example(clip, own, true, task);
    }
    let neg = others[rng.gen_range(0..others.len())];
    vtm_example(clip, neg, false, task)
}

/// `[CLS] Q [SEP] A0 [SEP] A1 .. Ak-1 [MASK] [SEP]`, labelled with the digit
/// of `gold`.
pub fn build_mc(clip: ClipRef, question: &[TokenId], answers: &[Vec<TokenId>], gold: usize) -> Result<MaskedExample> {
    let k = answers.len();
    if k == 0 || k > MAX_CHOICES {
        return Err(TaskError::Config(format!(
            "{k} answer choices; supported range is 1..={MAX_CHOICES}"
        )));
    }
    if gold >= k {
        return Err(TaskError::Input(format!("gold index {gold} for {k} choices")));
    }
    let mut input = vec![CLS];
    input.extend_from_slice(question);
    for a in answers {
        input.push(SEP);
        input.extend_from_slice(a);
    }
    input.push(MASK);
    let pos = input.len() - 1;
    input.push(SEP);
    let mut ex = MaskedExample::new(clip, input, TaskTag::McQa);
    ex.mask_positions = vec![pos];
    ex.labels[pos] = Vocabulary::digit(gold) as i64;
    Ok(ex)
}

/// `[CLS] Q [MASK] [SEP]`. Single-token answers become the label; longer
/// answers leave the example without a label (it cannot be trained on and is
/// scored wrong at evaluation).
pub fn build_oe(clip: ClipRef, question: &[TokenId], answer: &[TokenId]) -> Result<MaskedExample> {
    if question.is_empty() {
        return Err(TaskError::Input("empty question".into()));
    }
    let mut input = vec![CLS];
    input.extend_from_slice(question);
    input.push(MASK);
    let pos = input.len() - 1;
    input.push(SEP);
    let mut ex = MaskedExample::new(clip, input, TaskTag::OeQa);
    ex.mask_positions = vec![pos];
    if let [word] = answer {
        ex.labels[pos] = *word as i64;
    }
    Ok(ex)
}

/// Replaces the single [`BLANK`] of `sentence` by `[MASK]` in place.
pub fn build_fib(clip: ClipRef, sentence: &str, answer: &str, vocab: &Vocabulary) -> Result<MaskedExample> {
    let words = split_words(sentence);
    let blanks: Vec<usize> = words.iter().enumerate().filter(|(_, w)| *w == BLANK).map(|(i, _)| i).collect();
    if blanks.len() != 1 {
        return Err(TaskError::Input(format!(
            "fill-in-blank sentence needs exactly one {BLANK}, found {}",
            blanks.len()
        )));
    }
    let mut input = vec![CLS];
    input.extend(words.iter().map(|w| if w == BLANK { MASK } else { vocab.id_or_unk(w) }));
    input.push(SEP);
    let pos = blanks[0] + 1;
    let mut ex = MaskedExample::new(clip, input, TaskTag::Fib);
    ex.mask_positions = vec![pos];
    let answer = split_words(answer);
    if let [word] = answer.as_slice() {
        ex.labels[pos] = vocab.id_or_unk(word) as i64;
    }
    Ok(ex)
}

/// Caption training: `[CLS] caption [SEP]` under causal attention, with the
/// caption words and the closing `[SEP]` eligible for corruption so the
/// model also learns where to stop.
pub fn build_caption_train(
    clip: ClipRef,
    caption: &[TokenId],
    cfg: &MaskingConfig,
    vocab: &Vocabulary,
    rng: &mut impl Rng,
) -> Result<MaskedExample> {
    if caption.is_empty() {
        return Err(TaskError::Input("empty caption".into()));
    }
    let mut ids = TokenSeq::from_words(caption).ids().to_vec();
    let eligible: Vec<usize> = (1..ids.len()).filter(|&i| ids[i] == SEP || !vocab.is_special(ids[i])).collect();
    let (positions, labels) = corrupt(&mut ids, &eligible, cfg, vocab, rng)?;
    let mut ex = MaskedExample::new(clip, ids, TaskTag::Caption);
    ex.mask_positions = positions;
    ex.labels = labels;
    Ok(ex)
}

/// Tokens inserted after `[CLS]` for a task under a decoration variant.
pub fn decoration_tokens(task: TaskTag, variant: DecorationVariant, vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    Ok(match variant {
        DecorationVariant::None => Vec::new(),
        DecorationVariant::Prompt => match task.prompt() {
            Some(p) => split_words(p).iter().map(|w| vocab.id_or_unk(w)).collect(),
            None => Vec::new(),
        },
        DecorationVariant::Token => match task.task_token() {
            Some(t) => vec![vocab.task_token(t).ok_or_else(|| {
                TaskError::Config("vocabulary was built without task tokens".into())
            })?],
            None => Vec::new(),
        },
    })
}

/// Inserts the task prompt or task token right after `[CLS]` and shifts the
/// mask positions accordingly.
pub fn decorate(mut ex: MaskedExample, variant: DecorationVariant, vocab: &Vocabulary) -> Result<MaskedExample> {
    if variant == DecorationVariant::None {
        return Ok(ex);
    }
    let extra = decoration_tokens(ex.task, variant, vocab)?;
    let n = extra.len();
    ex.input.splice(1..1, extra);
    ex.labels.splice(1..1, std::iter::repeat(IGNORE).take(n));
    for p in &mut ex.mask_positions {
        *p += n;
    }
    ex.decoration = Some(DecorationRecord { variant, inserted: n });
    Ok(ex)
}

/// Classification input for the task-specific baseline heads. The
/// prediction is read from the `[CLS]` row.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassExample {
    pub clip: ClipRef,
    pub input: Vec<TokenId>,
    pub kind: BaselineKind,
    /// Class index; for matching 1 means matched. `None` when the gold answer
    /// lies outside the head's answer set.
    pub target: Option<usize>,
}

/// `[CLS] text [SEP]` for the binary matching head.
pub fn baseline_vtm(clip: ClipRef, words: &[TokenId], matched: bool) -> ClassExample {
    ClassExample {
        clip,
        input: TokenSeq::from_words(words).ids().to_vec(),
        kind: BaselineKind::VtmBinary,
        target: Some(usize::from(matched)),
    }
}

/// `[CLS] Q [SEP] A0 [SEP] .. Ak-1 [SEP]` for the k-way head.
pub fn baseline_mc(clip: ClipRef, question: &[TokenId], answers: &[Vec<TokenId>], gold: usize) -> ClassExample {
    let mut input = vec![CLS];
    input.extend_from_slice(question);
    for a in answers {
        input.push(SEP);
        input.extend_from_slice(a);
    }
    input.push(SEP);
    ClassExample {
        clip,
        input,
        kind: BaselineKind::McClassifier,
        target: Some(gold),
    }
}

/// `[CLS] Q [SEP]` (or a fill-in-blank sentence with `[MASK]`) for the
/// closed-vocabulary answer head.
pub fn baseline_oe(clip: ClipRef, text: &[TokenId], answer_index: Option<usize>) -> ClassExample {
    ClassExample {
        clip,
        input: TokenSeq::from_words(text).ids().to_vec(),
        kind: BaselineKind::OeClassifier,
        target: answer_index,
    }
}

/// One line of a prediction dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub task: TaskTag,
    pub id: String,
    pub prediction: String,
    /// One or more acceptable answers (several references for captions).
    pub gold: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scores: Vec<f64>,
    /// Candidate ids best first, for ranking tasks.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ranking: Vec<String>,
}

pub fn write_predictions(records: &[PredictionRecord], mut w: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(r: impl BufRead) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
