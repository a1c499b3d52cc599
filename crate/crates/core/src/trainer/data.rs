use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::model::ModelConfig;
use crate::synthgen::{Corpus, ManifestEntry, Split};
use crate::tasks::TaskTag;
use crate::text::{tokenize, TokenId, Vocabulary};
use crate::vision::{patchify, PatchGrid, VideoClip};

#[derive(Clone, Debug, PartialEq)]
pub enum SampleKind {
    /// A clip with its caption (retrieval, captioning, pretraining).
    Pair { text: Vec<TokenId>, caption: String },
    Mc {
        question: Vec<TokenId>,
        answers: Vec<Vec<TokenId>>,
        answer_text: Vec<String>,
        gold: usize,
    },
    Oe { question: Vec<TokenId>, answer: String },
    Fib { sentence: String, answer: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub clip: String,
    pub kind: SampleKind,
}

impl Sample {
    /// Gold answer as text (caption for pairs).
    pub fn gold(&self) -> String {
        match &self.kind {
            SampleKind::Pair { caption, .. } => caption.clone(),
            SampleKind::Mc { gold, .. } => gold.to_string(),
            SampleKind::Oe { answer, .. } | SampleKind::Fib { answer, .. } => answer.clone(),
        }
    }
}

/// Train, validation and test samples of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub task: TaskTag,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

fn words(text: &str, vocab: &Vocabulary) -> Vec<TokenId> {
    tokenize(text, vocab).words().to_vec()
}

fn samples_of(e: &ManifestEntry, task: TaskTag, vocab: &Vocabulary) -> Vec<Sample> {
    let pair = || Sample {
        id: e.id.clone(),
        clip: e.id.clone(),
        kind: SampleKind::Pair {
            text: words(&e.caption, vocab),
            caption: e.caption.clone(),
        },
    };
    match task {
        TaskTag::Mlm | TaskTag::Vtm | TaskTag::Retrieval | TaskTag::Caption => vec![pair()],
        TaskTag::McQa => vec![Sample {
            id: format!("{}/mc", e.id),
            clip: e.id.clone(),
            kind: SampleKind::Mc {
                question: words(&e.mc.question, vocab),
                answers: e.mc.answers.iter().map(|a| words(a, vocab)).collect(),
                answer_text: e.mc.answers.clone(),
                gold: e.mc.gold,
            },
        }],
        TaskTag::OeQa => e
            .oe
            .iter()
            .enumerate()
            .map(|(j, q)| Sample {
                id: format!("{}/oe{j}", e.id),
                clip: e.id.clone(),
                kind: SampleKind::Oe {
                    question: words(&q.question, vocab),
                    answer: q.answer.clone(),
                },
            })
            .collect(),
        TaskTag::Fib => vec![Sample {
            id: format!("{}/fib", e.id),
            clip: e.id.clone(),
            kind: SampleKind::Fib {
                sentence: e.fib.sentence.clone(),
                answer: e.fib.answer.clone(),
            },
        }],
    }
}

impl TaskDataset {
    pub fn from_corpus(corpus: &Corpus, vocab: &Vocabulary, task: TaskTag) -> Self {
        let split = |s: Split| -> Vec<Sample> {
            corpus
                .split(s)
                .into_iter()
                .flat_map(|e| samples_of(e, task, vocab))
                .collect()
        };
        Self {
            name: format!("synth-{}", task.name()),
            task,
            train: split(Split::Train),
            val: split(Split::Val),
            test: split(Split::Test),
        }
    }

    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Sorted distinct training answers; the output space of the
    /// closed-vocabulary baseline head.
    pub fn answer_vocab(&self) -> Vec<String> {
        let set: BTreeSet<String> = self
            .train
            .iter()
            .filter_map(|s| match &s.kind {
                SampleKind::Oe { answer, .. } | SampleKind::Fib { answer, .. } => Some(answer.clone()),
                _ => None,
            })
            .collect();
        set.into_iter().collect()
    }

    /// Same dataset with the training split cut to `ceil(fraction · n)`
    /// samples drawn by `seed`.
    pub fn few_shot(&self, fraction: f64, seed: u64) -> Result<Self> {
        let train = few_shot(&self.train, fraction, seed)?;
        Ok(Self { train, ..self.clone() })
    }
}

/// `ceil(fraction · n)` samples chosen uniformly without replacement, kept in
/// their original order.
pub fn few_shot(samples: &[Sample], fraction: f64, seed: u64) -> Result<Vec<Sample>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(TrainError::Config(format!("few-shot fraction {fraction} outside (0, 1]")));
    }
    let n = (fraction * samples.len() as f64).ceil() as usize;
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut keep = idx[..n].to_vec();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| samples[i].clone()).collect())
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContaminationReport {
    /// `(sample id, clip id)` of every removed training sample.
    pub removed: Vec<(String, String)>,
}

/// Drops training samples whose clip appears in any held-out split.
pub fn contamination_filter(train: Vec<Sample>, held_out: &[&[Sample]]) -> (Vec<Sample>, ContaminationReport) {
    let banned: HashSet<&str> = held_out.iter().flat_map(|s| s.iter()).map(|s| s.clip.as_str()).collect();
    let mut report = ContaminationReport::default();
    let kept = train
        .into_iter()
        .filter(|s| {
            let hit = banned.contains(s.clip.as_str());
            if hit {
                report.removed.push((s.id.clone(), s.clip.clone()));
            }
            !hit
        })
        .collect();
    (kept, report)
}

/// Decoded clips by id.
#[derive(Clone, Debug, Default)]
pub struct ClipStore {
    clips: HashMap<String, VideoClip>,
}

impl ClipStore {
    /// Renders every clip of the corpus in memory.
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        let clips = corpus
            .entries
            .par_iter()
            .map(|e| Ok((e.id.clone(), corpus.render(e)?)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self { clips })
    }

    /// Reads the clip files of a saved corpus.
    pub fn load(dir: &Path, corpus: &Corpus) -> Result<Self> {
        let clips = corpus
            .entries
            .par_iter()
            .map(|e| Ok((e.id.clone(), VideoClip::load(&e.id, &Corpus::clip_path(dir, e))?)))
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(Self { clips })
    }

    pub fn insert(&mut self, clip: VideoClip) {
        self.clips.insert(clip.id().to_string(), clip);
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn get(&self, id: &str) -> Result<&VideoClip> {
        self.clips.get(id).ok_or_else(|| TrainError::Data(format!("unknown clip {id}")))
    }

    pub fn grid(&self, id: &str, frames: &[usize], cfg: &ModelConfig) -> Result<PatchGrid> {
        let clip = self.get(id)?;
        if clip.height() != cfg.frame_height || clip.width() != cfg.frame_width {
            return Err(TrainError::Data(format!(
                "clip {id} is {}×{}, model expects {}×{}",
                clip.height(),
                clip.width(),
                cfg.frame_height,
                cfg.frame_width
            )));
        }
        Ok(patchify(clip, frames, cfg.patch_height, cfg.patch_width)?)
    }
}
