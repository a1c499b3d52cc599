//! Vocabulary and whole-word tokenization.
//!
//! Ids are laid out densely with a fixed reserved prefix:
//!
//! | ids      | tokens                                  |
//! |----------|-----------------------------------------|
//! | 0..=4    | `[PAD] [UNK] [CLS] [SEP] [MASK]`        |
//! | 5..=14   | digits `0` .. `9`                       |
//! | 15, 16   | `true`, `false`                         |
//! | 17..=20  | `[VTM] [MC] [OE] [CAP]` (when enabled)  |
//! | rest     | corpus words by descending frequency    |
//!
//! Digits and `true`/`false` are always single tokens, so the answer index of
//! a multiple-choice question and the verdict of a matching query are each a
//! single prediction at one masked position.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;
const FIRST_DIGIT: TokenId = 5;
pub const TRUE: TokenId = 15;
pub const FALSE: TokenId = 16;
const FIRST_TASK_TOKEN: TokenId = 17;

const SPECIALS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
const TASK_TOKENS: [&str; 4] = ["[VTM]", "[MC]", "[OE]", "[CAP]"];

/// Header line of the vocabulary file format.
pub const VOCAB_HEADER: &str = "#vocab v1";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("vocabulary size {max_size} is smaller than the {reserved} reserved tokens")]
    TooSmall { max_size: usize, reserved: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("token id {0} is outside the vocabulary")]
    UnknownId(TokenId),
    #[error("text has {len} tokens, more than the maximum of {max}")]
    TooLong { len: usize, max: usize },
    #[error("malformed vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Learnable task markers inserted right after `[CLS]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskToken {
    Vtm,
    Mc,
    Oe,
    Cap,
}

#[derive(Clone, Debug)]
pub struct VocabConfig {
    pub min_freq: usize,
    pub max_size: usize,
    pub task_tokens: bool,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            min_freq: 1,
            max_size: 30_522,
            task_tokens: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    task_tokens: bool,
}

fn reserved_tokens(task_tokens: bool) -> Vec<String> {
    let mut out: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    out.extend((0..10).map(|d| d.to_string()));
    out.push("true".into());
    out.push("false".into());
    if task_tokens {
        out.extend(TASK_TOKENS.iter().map(|s| s.to_string()));
    }
    out
}

/// Lowercases and splits on whitespace; sentence punctuation becomes its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for raw in text.split_whitespace() {
        let lower = raw.to_lowercase();
        let mut current = String::new();
        for ch in lower.chars() {
            if matches!(ch, ',' | '.' | '?' | '!' | ';' | ':') {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(ch.to_string());
            } else {
                current.push(ch);
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

impl Vocabulary {
    /// Builds a vocabulary from a stream of sentences. Reserved tokens are
    /// always present; remaining slots go to words with frequency
    /// `>= min_freq`, most frequent first, ties in lexicographic order.
    pub fn build<'a>(
        corpus: impl IntoIterator<Item = &'a str>,
        config: &VocabConfig,
    ) -> Result<Self, TextError> {
        let reserved = reserved_tokens(config.task_tokens);
        if config.max_size < reserved.len() {
            return Err(TextError::TooSmall {
                max_size: config.max_size,
                reserved: reserved.len(),
            });
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for line in corpus {
            any = true;
            for w in split_words(line) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if !any {
            return Err(TextError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= config.min_freq && !reserved.contains(w))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let room = config.max_size - reserved.len();
        let mut tokens = reserved;
        tokens.extend(ranked.into_iter().take(room).map(|(w, _)| w));
        Ok(Self::from_tokens(tokens, config.task_tokens))
    }

    fn from_tokens(tokens: Vec<String>, task_tokens: bool) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Self {
            tokens,
            index,
            task_tokens,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn digit(n: usize) -> TokenId {
        assert!(n < 10, "digit {n} is not a single token");
        FIRST_DIGIT + n as TokenId
    }

    /// Inverse of [`Vocabulary::digit`].
    pub fn digit_value(id: TokenId) -> Option<usize> {
        (FIRST_DIGIT..FIRST_DIGIT + 10)
            .contains(&id)
            .then(|| (id - FIRST_DIGIT) as usize)
    }

    pub fn has_task_tokens(&self) -> bool {
        self.task_tokens
    }

    pub fn task_token(&self, task: TaskToken) -> Option<TokenId> {
        self.task_tokens.then(|| {
            FIRST_TASK_TOKEN
                + match task {
                    TaskToken::Vtm => 0,
                    TaskToken::Mc => 1,
                    TaskToken::Oe => 2,
                    TaskToken::Cap => 3,
                }
        })
    }

    pub fn reserved_count(&self) -> usize {
        reserved_tokens(self.task_tokens).len()
    }

    /// Control tokens that never appear as prediction targets of word
    /// corruption: the five specials and the task tokens.
    pub fn is_special(&self, id: TokenId) -> bool {
        id <= MASK || (self.task_tokens && (FIRST_TASK_TOKEN..FIRST_TASK_TOKEN + 4).contains(&id))
    }

    /// Every non-special id, in ascending order.
    pub fn word_ids(&self) -> Vec<TokenId> {
        (0..self.len() as TokenId)
            .filter(|&id| !self.is_special(id))
            .collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), TextError> {
        writeln!(w, "{VOCAB_HEADER} {}", self.len())?;
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self, TextError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| TextError::Format("missing header".into()))??;
        let size: usize = header
            .strip_prefix(VOCAB_HEADER)
            .and_then(|rest| rest.trim().parse().ok())
            .ok_or_else(|| TextError::Format(format!("bad header {header:?}")))?;
        let tokens = lines.take(size).collect::<Result<Vec<_>, _>>()?;
        if tokens.len() != size {
            return Err(TextError::Format(format!(
                "header promises {size} tokens, found {}",
                tokens.len()
            )));
        }
        let task_tokens = tokens.get(FIRST_TASK_TOKEN as usize).map(String::as_str) == Some("[VTM]");
        let reserved = reserved_tokens(task_tokens);
        if tokens.len() < reserved.len() || tokens[..reserved.len()] != reserved[..] {
            return Err(TextError::Format("reserved token layout mismatch".into()));
        }
        let vocab = Self::from_tokens(tokens, task_tokens);
        if vocab.index.len() != vocab.tokens.len() {
            return Err(TextError::Format("duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), TextError> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self, TextError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// A tokenized sentence: `[CLS] w1 .. wN [SEP]` followed by optional `[PAD]`s.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    ids: Vec<TokenId>,
    real_len: usize,
}

impl TokenSeq {
    /// Wraps word ids in `[CLS]` .. `[SEP]`.
    pub fn from_words(words: &[TokenId]) -> Self {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(CLS);
        ids.extend_from_slice(words);
        ids.push(SEP);
        let real_len = ids.len();
        Self { ids, real_len }
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    /// Number of real tokens including `[CLS]` and `[SEP]`.
    pub fn real_len(&self) -> usize {
        self.real_len
    }

    /// The ids strictly between `[CLS]` and `[SEP]`.
    pub fn words(&self) -> &[TokenId] {
        &self.ids[1..self.real_len - 1]
    }

    pub fn is_padding(&self, pos: usize) -> bool {
        pos >= self.real_len
    }

    pub fn padding_flags(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| self.is_padding(i)).collect()
    }

    /// Pads with `[PAD]` up to `len` (no-op if already that long).
    pub fn padded(mut self, len: usize) -> Self {
        if self.ids.len() < len {
            self.ids.resize(len, PAD);
        }
        self
    }
}

/// Lowercases, splits into words and maps each to its id (or `[UNK]`).
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSeq {
    let words: Vec<TokenId> = split_words(text)
        .iter()
        .map(|w| vocab.id_or_unk(w))
        .collect();
    TokenSeq::from_words(&words)
}

/// [`tokenize`], rejecting sequences longer than `max_len` (including
/// `[CLS]`/`[SEP]`) instead of truncating them.
pub fn tokenize_checked(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSeq, TextError> {
    let seq = tokenize(text, vocab);
    if seq.real_len() > max_len {
        return Err(TextError::TooLong {
            len: seq.real_len(),
            max: max_len,
        });
    }
    Ok(seq)
}

/// Joins the non-special tokens before the first `[SEP]` with single spaces.
pub fn detokenize(ids: &[TokenId], vocab: &Vocabulary) -> Result<String, TextError> {
    let mut words = Vec::new();
    for &id in ids {
        let tok = vocab.token(id).ok_or(TextError::UnknownId(id))?;
        if id == SEP {
            break;
        }
        if !vocab.is_special(id) && id != UNK {
            words.push(tok);
        }
    }
    Ok(words.join(" "))
}
