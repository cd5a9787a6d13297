//! Topic quality: sliding-window co-occurrence, NPMI, C_V, rank-biased
//! overlap, topic alignment and a linear SVM on document-topic vectors.

use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::TopicSet;
use crate::numkernel::{dot, Tensor2};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("coherence needs at least 2 words per topic, got {0}")]
    TooFewWords(usize),
    #[error("need at least 2 topics, got {0}")]
    TooFewTopics(usize),
    #[error("duplicate word {0:?} in a ranked list")]
    DuplicateWord(String),
    #[error("ranked lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("ranked lists are empty")]
    EmptyList,
    #[error("persistence p = {0} must lie in (0, 1)")]
    Persistence(f64),
    #[error("window size must be at least 1")]
    Window,
    #[error("classification needs at least two classes in the training labels")]
    SingleClass,
    #[error("{0} rows but {1} labels")]
    LabelCount(usize, usize),
    #[error("no test documents")]
    NoTestDocuments,
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// Boolean sliding-window document frequencies.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CoocTable {
    pub window_size: usize,
    pub window_count: u64,
    words: Vec<String>,
    index: HashMap<String, u32>,
    word_windows: Vec<u64>,
    /// Keyed by `(low id, high id)`.
    pair_windows: HashMap<(u32, u32), u64>,
}

impl CoocTable {
    /// Counts over every word of the reference documents.
    pub fn build(docs: &[Vec<String>], window_size: usize) -> Result<Self> {
        let mut words: Vec<String> = docs.iter().flatten().cloned().collect::<HashSet<_>>().into_iter().collect();
        words.sort();
        Self::build_for(docs, window_size, &words)
    }

    /// Counts restricted to `words`; window counts still cover every window
    /// of the reference corpus, so probabilities are unaffected.
    pub fn build_for(docs: &[Vec<String>], window_size: usize, words: &[String]) -> Result<Self> {
        if window_size == 0 {
            return Err(MetricError::Window);
        }
        let mut index = HashMap::new();
        let mut uniq = Vec::new();
        for w in words {
            if !index.contains_key(w) {
                index.insert(w.clone(), uniq.len() as u32);
                uniq.push(w.clone());
            }
        }
        let empty = || CoocTable {
            window_size,
            window_count: 0,
            words: uniq.clone(),
            index: index.clone(),
            word_windows: vec![0; uniq.len()],
            pair_windows: HashMap::new(),
        };
        let chunk = docs.len().div_ceil(rayon::current_num_threads().max(1) * 4).max(1);
        let table = docs
            .par_chunks(chunk)
            .map(|part| {
                let mut t = empty();
                for doc in part {
                    t.add_document(doc);
                }
                t
            })
            .reduce(empty, |mut a, b| {
                a.merge(&b);
                a
            });
        Ok(table)
    }

    fn add_document(&mut self, doc: &[String]) {
        if doc.is_empty() {
            return;
        }
        let ids: Vec<Option<u32>> = doc.iter().map(|t| self.index.get(t).copied()).collect();
        let w = self.window_size;
        let starts = if doc.len() <= w { 1 } else { doc.len() - w + 1 };
        let mut present: Vec<u32> = Vec::new();
        for s in 0..starts {
            let end = (s + w).min(doc.len());
            present.clear();
            present.extend(ids[s..end].iter().flatten().copied());
            present.sort_unstable();
            present.dedup();
            self.window_count += 1;
            for (i, &a) in present.iter().enumerate() {
                self.word_windows[a as usize] += 1;
                for &b in &present[i + 1..] {
                    *self.pair_windows.entry((a, b)).or_insert(0) += 1;
                }
            }
        }
    }

    /// Adds another table over the same word list.
    pub fn merge(&mut self, other: &CoocTable) {
        assert_eq!(self.words, other.words, "merging tables over different words");
        self.window_count += other.window_count;
        for (a, b) in self.word_windows.iter_mut().zip(&other.word_windows) {
            *a += b;
        }
        for (k, v) in &other.pair_windows {
            *self.pair_windows.entry(*k).or_insert(0) += v;
        }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Windows containing `w`; 0 for untracked words.
    pub fn word_count(&self, w: &str) -> u64 {
        self.index.get(w).map_or(0, |&i| self.word_windows[i as usize])
    }

    /// Windows containing both words; a word paired with itself gives its own count.
    pub fn pair_count(&self, a: &str, b: &str) -> u64 {
        match (self.index.get(a), self.index.get(b)) {
            (Some(&i), Some(&j)) if i == j => self.word_windows[i as usize],
            (Some(&i), Some(&j)) => *self.pair_windows.get(&(i.min(j), i.max(j))).unwrap_or(&0),
            _ => 0,
        }
    }

    pub fn probability(&self, w: &str) -> f64 {
        if self.window_count == 0 {
            return 0.0;
        }
        self.word_count(w) as f64 / self.window_count as f64
    }

    pub fn joint_probability(&self, a: &str, b: &str) -> f64 {
        if self.window_count == 0 {
            return 0.0;
        }
        self.pair_count(a, b) as f64 / self.window_count as f64
    }
}

/// Pairwise NPMI with `ε` inside both logarithms.
///
/// Conventions at the edges of the formula: a word that never occurs scores
/// −1; with `ε = 0` a pair that never co-occurs scores −1 (the `ε → 0`
/// limit); a pair present in every window (`p_ij + ε ≥ 1`) scores +1.
/// Results are clamped to `[−1, 1]`.
pub fn npmi_pair(cooc: &CoocTable, a: &str, b: &str, eps: f64) -> f64 {
    let pa = cooc.probability(a);
    let pb = cooc.probability(b);
    if pa == 0.0 || pb == 0.0 {
        return -1.0;
    }
    let pab = cooc.joint_probability(a, b);
    let joint = pab + eps;
    if joint == 0.0 {
        return -1.0;
    }
    let denom = -joint.ln();
    if denom <= 0.0 {
        return 1.0;
    }
    ((joint / (pa * pb)).ln() / denom).clamp(-1.0, 1.0)
}

pub const NPMI_EPS: f64 = 1e-12;

/// Mean NPMI over the unordered word pairs of one topic.
pub fn topic_npmi(words: &[String], cooc: &CoocTable, eps: f64) -> Result<f64> {
    if words.len() < 2 {
        return Err(MetricError::TooFewWords(words.len()));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..words.len() {
        for j in i + 1..words.len() {
            sum += npmi_pair(cooc, &words[i], &words[j], eps);
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Mean over topics of [`topic_npmi`].
pub fn npmi(topics: &TopicSet, cooc: &CoocTable, eps: f64) -> Result<f64> {
    if topics.is_empty() {
        return Err(MetricError::TooFewTopics(0));
    }
    let mut s = 0.0;
    for t in &topics.topics {
        s += topic_npmi(t, cooc, eps)?;
    }
    Ok(s / topics.len() as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        log::debug!("zero context vector in C_V; confirmation set to 0");
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// C_V of one topic: cosine of every word's NPMI context vector with the
/// sum of all context vectors, averaged.
pub fn topic_cv(words: &[String], cooc: &CoocTable) -> Result<f64> {
    if words.len() < 2 {
        return Err(MetricError::TooFewWords(words.len()));
    }
    let t = words.len();
    let vectors: Vec<Vec<f64>> = (0..t)
        .map(|i| (0..t).map(|j| npmi_pair(cooc, &words[i], &words[j], NPMI_EPS)).collect())
        .collect();
    let mut total = vec![0.0; t];
    for v in &vectors {
        for (s, x) in total.iter_mut().zip(v) {
            *s += x;
        }
    }
    Ok(vectors.iter().map(|v| cosine(v, &total)).sum::<f64>() / t as f64)
}

pub fn cv(topics: &TopicSet, cooc: &CoocTable) -> Result<f64> {
    if topics.is_empty() {
        return Err(MetricError::TooFewTopics(0));
    }
    let mut s = 0.0;
    for t in &topics.topics {
        s += topic_cv(t, cooc)?;
    }
    Ok(s / topics.len() as f64)
}

pub const RBO_P: f64 = 0.9;

/// Truncated rank-biased overlap normalized by its weights, so identical
/// lists score exactly 1: `Σ_d p^{d−1} A_d / Σ_d p^{d−1}`, with `A_d` the
/// overlap fraction of the depth-`d` prefixes.
pub fn rbo<S: AsRef<str>>(l1: &[S], l2: &[S], p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(MetricError::Persistence(p));
    }
    if l1.len() != l2.len() {
        return Err(MetricError::LengthMismatch(l1.len(), l2.len()));
    }
    if l1.is_empty() {
        return Err(MetricError::EmptyList);
    }
    for l in [l1, l2] {
        let mut seen = HashSet::new();
        for w in l {
            if !seen.insert(w.as_ref()) {
                return Err(MetricError::DuplicateWord(w.as_ref().to_string()));
            }
        }
    }
    let mut seen1 = HashSet::new();
    let mut seen2 = HashSet::new();
    let mut overlap = 0usize;
    let mut weighted = 0.0;
    let mut weights = 0.0;
    let mut w = 1.0;
    for d in 0..l1.len() {
        let (a, b) = (l1[d].as_ref(), l2[d].as_ref());
        if a == b {
            overlap += 1;
        } else {
            if seen2.contains(a) {
                overlap += 1;
            }
            if seen1.contains(b) {
                overlap += 1;
            }
        }
        seen1.insert(a);
        seen2.insert(b);
        weighted += w * overlap as f64 / (d + 1) as f64;
        weights += w;
        w *= p;
    }
    Ok(weighted / weights)
}

/// `1 −` mean RBO over all unordered topic pairs.
pub fn irbo(topics: &TopicSet, p: f64) -> Result<f64> {
    let n = topics.len();
    if n < 2 {
        return Err(MetricError::TooFewTopics(n));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            sum += rbo(&topics.topics[i], &topics.topics[j], p)?;
            pairs += 1;
        }
    }
    Ok(1.0 - sum / pairs as f64)
}

/// Fraction of distinct words among all top words.
pub fn topic_diversity(topics: &TopicSet) -> f64 {
    let total: usize = topics.topics.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let uniq: HashSet<&String> = topics.topics.iter().flatten().collect();
    uniq.len() as f64 / total as f64
}

/// One matched topic pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub left: usize,
    pub right: usize,
    pub score: f64,
}

/// Greedy one-to-one matching on the RBO similarity matrix: repeatedly take
/// the highest remaining score (ties by left, then right index) whose row
/// and column are both unused.
pub fn align_topics(left: &TopicSet, right: &TopicSet, p: f64) -> Result<Vec<Alignment>> {
    let mut cells = Vec::with_capacity(left.len() * right.len());
    for (i, a) in left.topics.iter().enumerate() {
        for (j, b) in right.topics.iter().enumerate() {
            cells.push(Alignment {
                left: i,
                right: j,
                score: rbo(a, b, p)?,
            });
        }
    }
    Ok(greedy_match(cells, left.len(), right.len()))
}

/// Greedy matching over an arbitrary score list.
pub fn greedy_match(mut cells: Vec<Alignment>, rows: usize, cols: usize) -> Vec<Alignment> {
    cells.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.left.cmp(&b.left)).then(a.right.cmp(&b.right)));
    let mut used_l = vec![false; rows];
    let mut used_r = vec![false; cols];
    let mut out = Vec::with_capacity(rows.min(cols));
    for c in cells {
        if !used_l[c.left] && !used_r[c.right] {
            used_l[c.left] = true;
            used_r[c.right] = true;
            out.push(c);
        }
    }
    out
}

/// Pegasos settings for the one-vs-rest linear SVM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            epochs: 200,
            seed: 0,
        }
    }
}

/// One-vs-rest linear SVM; each class has a weight vector with a trailing bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub classes: Vec<String>,
    pub weights: Vec<Vec<f64>>,
}

impl LinearSvm {
    /// Stochastic sub-gradient descent on `λ/2‖w‖² + mean hinge` (Pegasos,
    /// with the projection step), one binary problem per class.
    pub fn fit(x: &Tensor2, labels: &[String], cfg: &SvmConfig) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(MetricError::LabelCount(x.rows(), labels.len()));
        }
        let mut classes: Vec<String> = labels.iter().cloned().collect::<HashSet<_>>().into_iter().collect();
        classes.sort();
        if classes.len() < 2 {
            return Err(MetricError::SingleClass);
        }
        let d = x.cols() + 1;
        let radius = 1.0 / cfg.lambda.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..x.rows()).collect();
        let mut weights = Vec::with_capacity(classes.len());
        for class in &classes {
            let y: Vec<f64> = labels.iter().map(|l| if l == class { 1.0 } else { -1.0 }).collect();
            let mut w = vec![0.0; d];
            let mut t = 0u64;
            for _ in 0..cfg.epochs {
                order.shuffle(&mut rng);
                for &i in &order {
                    t += 1;
                    let eta = 1.0 / (cfg.lambda * t as f64);
                    let row = x.row(i);
                    let margin = y[i] * (dot(&w[..d - 1], row) + w[d - 1]);
                    let shrink = 1.0 - eta * cfg.lambda;
                    w.iter_mut().for_each(|v| *v *= shrink);
                    if margin < 1.0 {
                        for (wv, xv) in w.iter_mut().zip(row) {
                            *wv += eta * y[i] * xv;
                        }
                        w[d - 1] += eta * y[i];
                    }
                    let norm = dot(&w, &w).sqrt();
                    if norm > radius {
                        let s = radius / norm;
                        w.iter_mut().for_each(|v| *v *= s);
                    }
                }
            }
            weights.push(w);
        }
        Ok(Self { classes, weights })
    }

    /// Highest-scoring class; ties go to the earlier class name.
    pub fn predict(&self, row: &[f64]) -> &str {
        let d = row.len();
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (c, w) in self.weights.iter().enumerate() {
            let s = dot(&w[..d], row) + w[d];
            if s > best_score {
                best = c;
                best_score = s;
            }
        }
        &self.classes[best]
    }

    pub fn accuracy(&self, x: &Tensor2, labels: &[String]) -> Result<f64> {
        if x.rows() != labels.len() {
            return Err(MetricError::LabelCount(x.rows(), labels.len()));
        }
        if labels.is_empty() {
            return Err(MetricError::NoTestDocuments);
        }
        let correct = x.iter_rows().zip(labels).filter(|(r, l)| self.predict(r) == l.as_str()).count();
        Ok(correct as f64 / labels.len() as f64)
    }
}

/// Test accuracy of a linear SVM trained on `theta_train`.
pub fn classify(
    theta_train: &Tensor2,
    labels_train: &[String],
    theta_test: &Tensor2,
    labels_test: &[String],
    cfg: &SvmConfig,
) -> Result<f64> {
    LinearSvm::fit(theta_train, labels_train, cfg)?.accuracy(theta_test, labels_test)
}

/// Coherence and diversity settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub npmi_window: usize,
    pub cv_window: usize,
    pub eps: f64,
    pub rbo_p: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            npmi_window: 10,
            cv_window: 110,
            eps: NPMI_EPS,
            rbo_p: RBO_P,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopicScores {
    pub npmi: f64,
    pub cv: f64,
    pub irbo: f64,
    pub diversity: f64,
}

/// NPMI, C_V, IRBO and diversity of a topic set against a reference corpus.
pub fn score_topics(topics: &TopicSet, reference: &[Vec<String>], cfg: &EvalConfig) -> Result<TopicScores> {
    let mut words: Vec<String> = topics.topics.iter().flatten().cloned().collect();
    words.sort();
    words.dedup();
    let npmi_table = CoocTable::build_for(reference, cfg.npmi_window, &words)?;
    let cv_table = CoocTable::build_for(reference, cfg.cv_window, &words)?;
    Ok(TopicScores {
        npmi: npmi(topics, &npmi_table, cfg.eps)?,
        cv: cv(topics, &cv_table)?,
        irbo: irbo(topics, cfg.rbo_p)?,
        diversity: topic_diversity(topics),
    })
}

/// Scores of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub sampling: String,
    pub dataset: String,
    pub num_topics: usize,
    pub seed: u64,
    pub npmi: Option<f64>,
    pub cv: Option<f64>,
    pub irbo: Option<f64>,
    pub diversity: Option<f64>,
    pub accuracy: Option<f64>,
    pub train_seconds: Option<f64>,
    /// Full configuration of the run.
    pub config: serde_json::Value,
}
