//! Accuracy, recall at k, CIDEr-D and their aggregation.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tasks::{PredictionRecord, TaskTag};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{predictions} predictions for {golds} gold answers")]
    Length { predictions: usize, golds: usize },
    #[error("gold item {0:?} is missing from its candidate ranking")]
    MissingGold(String),
    #[error("no items to score")]
    Empty,
    #[error("item {0} has no reference captions")]
    NoReferences(usize),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Exact-match accuracy in percent. A gold answer of more than one word can
/// never be matched by a single predicted word and always counts as wrong.
pub fn accuracy<S: AsRef<str>, G: AsRef<str>>(predictions: &[S], golds: &[G]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(MetricsError::Length {
            predictions: predictions.len(),
            golds: golds.len(),
        });
    }
    if golds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let correct = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| {
            let g = g.as_ref().trim();
            !g.is_empty() && !g.contains(char::is_whitespace) && p.as_ref().trim() == g
        })
        .count();
    Ok(100.0 * correct as f64 / golds.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// `(k, R@k in percent)`
    pub recalls: Vec<(usize, f64)>,
    /// Mean of the recalls.
    pub average: f64,
}

impl RecallReport {
    pub fn at(&self, k: usize) -> Option<f64> {
        self.recalls.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

/// Percentage of queries whose gold id appears among the first `k` entries of
/// its ranking, for each `k`, plus their mean.
pub fn recall_at_k<S: AsRef<str>>(rankings: &[Vec<S>], golds: &[S], ks: &[usize]) -> Result<RecallReport> {
    if rankings.len() != golds.len() {
        return Err(MetricsError::Length {
            predictions: rankings.len(),
            golds: golds.len(),
        });
    }
    if golds.is_empty() || ks.is_empty() {
        return Err(MetricsError::Empty);
    }
    let ranks = rankings
        .iter()
        .zip(golds)
        .map(|(r, g)| {
            r.iter()
                .position(|c| c.as_ref() == g.as_ref())
                .ok_or_else(|| MetricsError::MissingGold(g.as_ref().to_string()))
        })
        .collect::<Result<Vec<usize>>>()?;
    let recalls: Vec<(usize, f64)> = ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|&&r| r < k).count();
            (k, 100.0 * hits as f64 / ranks.len() as f64)
        })
        .collect();
    let average = recalls.iter().map(|(_, r)| r).sum::<f64>() / recalls.len() as f64;
    Ok(RecallReport { recalls, average })
}

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

type Ngram = Vec<String>;

fn ngram_counts(sentence: &str, max_n: usize) -> HashMap<Ngram, f64> {
    let words: Vec<String> = sentence.split_whitespace().map(str::to_lowercase).collect();
    let mut counts = HashMap::new();
    for n in 1..=max_n {
        for w in words.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0.0) += 1.0;
        }
    }
    counts
}

struct TfIdf {
    vec: Vec<HashMap<Ngram, f64>>,
    norm: Vec<f64>,
    /// Number of bigrams, the length measure of the reference toolkit.
    length: f64,
}

/// CIDEr-D scorer.
///
/// For n-gram order `n` the tf-idf vector of a sentence has entries
/// `g(w) = tf(w) · (ln N − ln max(1, df(w)))`, where `N` is the number of
/// evaluated items and `df(w)` the number of items whose reference set
/// contains `w`. The similarity of candidate `c` and reference `r` is
///
/// `s_n(c, r) = Σ_w min(g_c(w), g_r(w)) · g_r(w) / (‖g_c‖ ‖g_r‖) · exp(−δ² / 2σ²)`
///
/// with `δ` the difference of their lengths. An item scores
/// `10 · mean_n mean_r s_n(c, r)` over `n = 1..=4` and its references; the
/// corpus score is the mean over items. Lengths are bigram counts (sentence
/// length minus one), matching the widely used evaluation toolkit.
#[derive(Clone, Debug)]
pub struct Cider {
    pub max_n: usize,
    pub sigma: f64,
}

impl Default for Cider {
    fn default() -> Self {
        Self { max_n: 4, sigma: 6.0 }
    }
}

impl Cider {
    fn tfidf(&self, counts: &HashMap<Ngram, f64>, df: &HashMap<Ngram, f64>, log_n: f64) -> TfIdf {
        let mut vec = vec![HashMap::new(); self.max_n];
        let mut norm = vec![0.0; self.max_n];
        let mut length = 0.0;
        for (g, &tf) in counts {
            let n = g.len() - 1;
            let d = df.get(g).copied().unwrap_or(0.0).max(1.0).ln();
            let v = tf * (log_n - d);
            norm[n] += v * v;
            vec[n].insert(g.clone(), v);
            if n == 1 {
                length += tf;
            }
        }
        TfIdf {
            vec,
            norm: norm.into_iter().map(f64::sqrt).collect(),
            length,
        }
    }

    fn sim(&self, c: &TfIdf, r: &TfIdf) -> Vec<f64> {
        let delta = c.length - r.length;
        let penalty = (-(delta * delta) / (2.0 * self.sigma * self.sigma)).exp();
        (0..self.max_n)
            .map(|n| {
                let mut v: f64 = c.vec[n]
                    .iter()
                    .map(|(g, &x)| r.vec[n].get(g).map_or(0.0, |&y| x.min(y) * y))
                    .sum();
                if c.norm[n] != 0.0 && r.norm[n] != 0.0 {
                    v /= c.norm[n] * r.norm[n];
                }
                v * penalty
            })
            .collect()
    }

    /// Per-item scores (each already carrying the factor 10).
    pub fn item_scores<S: AsRef<str>>(&self, candidates: &[S], references: &[Vec<S>]) -> Result<Vec<f64>> {
        if candidates.len() != references.len() {
            return Err(MetricsError::Length {
                predictions: candidates.len(),
                golds: references.len(),
            });
        }
        if candidates.is_empty() {
            return Err(MetricsError::Empty);
        }
        if let Some(i) = references.iter().position(Vec::is_empty) {
            return Err(MetricsError::NoReferences(i));
        }
        let ref_counts: Vec<Vec<HashMap<Ngram, f64>>> = references
            .iter()
            .map(|rs| rs.iter().map(|r| ngram_counts(r.as_ref(), self.max_n)).collect())
            .collect();
        let mut df: HashMap<Ngram, f64> = HashMap::new();
        for rs in &ref_counts {
            let grams: HashSet<&Ngram> = rs.iter().flat_map(|c| c.keys()).collect();
            for g in grams {
                *df.entry(g.clone()).or_insert(0.0) += 1.0;
            }
        }
        let log_n = (candidates.len() as f64).ln();
        Ok(candidates
            .iter()
            .zip(&ref_counts)
            .map(|(c, rs)| {
                let cv = self.tfidf(&ngram_counts(c.as_ref(), self.max_n), &df, log_n);
                let mut total = vec![0.0; self.max_n];
                for r in rs {
                    let rv = self.tfidf(r, &df, log_n);
                    for (t, s) in total.iter_mut().zip(self.sim(&cv, &rv)) {
                        *t += s;
                    }
                }
                let mean_n = total.iter().sum::<f64>() / self.max_n as f64;
                10.0 * mean_n / rs.len() as f64
            })
            .collect())
    }

    /// Corpus CIDEr-D on the customary ×100 reporting scale.
    pub fn score<S: AsRef<str>>(&self, candidates: &[S], references: &[Vec<S>]) -> Result<f64> {
        let items = self.item_scores(candidates, references)?;
        Ok(100.0 * items.iter().sum::<f64>() / items.len() as f64)
    }
}

/// [`Cider::score`] with the default settings (n up to 4, σ = 6).
pub fn cider<S: AsRef<str>>(candidates: &[S], references: &[Vec<S>]) -> Result<f64> {
    Cider::default().score(candidates, references)
}

/// The single caption from `pool` that scores best when emitted for every
/// item, with its score. Ties keep the earliest pool entry.
pub fn best_constant_caption<S: AsRef<str>>(pool: &[S], references: &[Vec<S>]) -> Result<(String, f64)> {
    let mut best: Option<(String, f64)> = None;
    for p in pool {
        let cands = vec![p.as_ref(); references.len()];
        let refs: Vec<Vec<&str>> = references.iter().map(|r| r.iter().map(AsRef::as_ref).collect()).collect();
        let s = cider(&cands, &refs)?;
        if best.as_ref().map_or(true, |(_, b)| s > *b) {
            best = Some((p.as_ref().to_string(), s));
        }
    }
    best.ok_or(MetricsError::Empty)
}

/// Unweighted mean of headline metrics.
pub fn meta_average(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Accuracy,
    AverageRecall,
    Cider,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub dataset: String,
    pub task: TaskTag,
    pub kind: MetricKind,
    /// Headline value used for the meta-average.
    pub value: f64,
    /// Supporting numbers (for example individual recalls).
    #[serde(default)]
    pub details: BTreeMap<String, f64>,
    pub items: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub entries: Vec<MetricEntry>,
    pub meta_average: f64,
}

impl MetricsReport {
    pub fn new(entries: Vec<MetricEntry>) -> Result<Self> {
        let values: Vec<f64> = entries.iter().map(|e| e.value).collect();
        let meta_average = meta_average(&values)?;
        Ok(Self { entries, meta_average })
    }

    pub fn get(&self, task: TaskTag) -> Option<&MetricEntry> {
        self.entries.iter().find(|e| e.task == task)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }
}

/// Headline metric of one task's predictions.
pub fn score_task(dataset: &str, task: TaskTag, records: &[&PredictionRecord]) -> Result<MetricEntry> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut details = BTreeMap::new();
    let (kind, value) = match task {
        TaskTag::Retrieval => {
            let rankings: Vec<Vec<&str>> = records.iter().map(|r| r.ranking.iter().map(String::as_str).collect()).collect();
            let golds: Vec<&str> = records.iter().map(|r| r.gold.first().map_or("", String::as_str)).collect();
            let rep = recall_at_k(&rankings, &golds, &RECALL_KS)?;
            for (k, v) in &rep.recalls {
                details.insert(format!("r{k}"), *v);
            }
            (MetricKind::AverageRecall, rep.average)
        }
        TaskTag::Caption => {
            let cands: Vec<&str> = records.iter().map(|r| r.prediction.as_str()).collect();
            let refs: Vec<Vec<&str>> = records.iter().map(|r| r.gold.iter().map(String::as_str).collect()).collect();
            (MetricKind::Cider, cider(&cands, &refs)?)
        }
        _ => {
            let preds: Vec<&str> = records.iter().map(|r| r.prediction.as_str()).collect();
            let golds: Vec<&str> = records.iter().map(|r| r.gold.first().map_or("", String::as_str)).collect();
            (MetricKind::Accuracy, accuracy(&preds, &golds)?)
        }
    };
    Ok(MetricEntry {
        dataset: dataset.to_string(),
        task,
        kind,
        value,
        details,
        items: records.len(),
    })
}

/// Groups a prediction dump by task and scores each group.
pub fn report_from_predictions(dataset: &str, records: &[PredictionRecord]) -> Result<MetricsReport> {
    let mut by_task: BTreeMap<TaskTag, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        by_task.entry(r.task).or_default().push(r);
    }
    let entries = by_task
        .into_iter()
        .map(|(t, rs)| score_task(dataset, t, &rs))
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::new(entries)
}
