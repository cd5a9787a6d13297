//! Synthetic corpora with known generative structure.
//!
//! Two generators: a small planted-topic corpus with disjoint topic
//! vocabularies (recovery tests), and a labelled newsgroup-style corpus with
//! Zipfian, overlapping topics, background words and matching document
//! embeddings (end-to-end runs when no real corpus is at hand).

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, EmbeddingTable, Partition};

/// Symmetric-or-not Dirichlet draw through normalized gamma variates.
pub fn dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive concentration").sample(rng))
        .collect();
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter_mut().for_each(|x| *x /= s);
    } else {
        // every gamma underflowed; fall back to the largest concentration
        let k = alpha.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i);
        v[k] = 1.0;
    }
    v
}

fn zipf_weights(n: usize, exponent: f64) -> Vec<f64> {
    (1..=n).map(|r| (r as f64).powf(-exponent)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub topics: usize,
    pub words_per_topic: usize,
    pub docs: usize,
    pub doc_len: usize,
    /// Words shared by every topic.
    pub background_words: usize,
    /// Probability that a token comes from the background.
    pub background_rate: f64,
    /// Dirichlet concentration of per-document topic mixtures.
    pub alpha: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            topics: 3,
            words_per_topic: 20,
            docs: 300,
            doc_len: 30,
            background_words: 10,
            background_rate: 0.1,
            alpha: 0.1,
            test_fraction: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlantedCorpus {
    pub corpus: Corpus,
    /// Word set of every planted topic.
    pub topics: Vec<Vec<String>>,
    /// Largest mixture component of every document.
    pub dominant: Vec<usize>,
}

/// Documents mixing topics with disjoint vocabularies; each topic is
/// uniform over its own words.
pub fn planted_corpus(cfg: &PlantedConfig) -> PlantedCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let topics: Vec<Vec<String>> = (0..cfg.topics)
        .map(|k| (0..cfg.words_per_topic).map(|j| format!("t{k}w{j}")).collect())
        .collect();
    let background: Vec<String> = (0..cfg.background_words).map(|j| format!("bg{j}")).collect();
    let mut documents = Vec::with_capacity(cfg.docs);
    let mut dominant = Vec::with_capacity(cfg.docs);
    let mut labels = Vec::with_capacity(cfg.docs);
    for _ in 0..cfg.docs {
        let theta = dirichlet(&vec![cfg.alpha; cfg.topics], &mut rng);
        let top = argmax(&theta);
        let pick = WeightedIndex::new(&theta).expect("non-negative mixture");
        let doc: Vec<String> = (0..cfg.doc_len)
            .map(|_| {
                if !background.is_empty() && rng.random::<f64>() < cfg.background_rate {
                    background[rng.random_range(0..background.len())].clone()
                } else {
                    let k = pick.sample(&mut rng);
                    topics[k][rng.random_range(0..cfg.words_per_topic)].clone()
                }
            })
            .collect();
        documents.push(doc);
        dominant.push(top);
        labels.push(Some(format!("topic{top}")));
    }
    let partitions = split(cfg.docs, cfg.test_fraction, &mut rng);
    PlantedCorpus {
        corpus: Corpus {
            name: "planted".into(),
            documents,
            partitions,
            labels,
        },
        topics,
        dominant,
    }
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn split<R: Rng + ?Sized>(docs: usize, test_fraction: f64, rng: &mut R) -> Vec<Partition> {
    let test = (docs as f64 * test_fraction).round() as usize;
    let mut parts: Vec<Partition> = (0..docs).map(|i| if i < test { Partition::Test } else { Partition::Train }).collect();
    parts.shuffle(rng);
    parts
}

/// Shape of the labelled newsgroup-style generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NewsgroupConfig {
    pub classes: usize,
    pub docs: usize,
    /// Distinct word types the generator can emit.
    pub vocabulary: usize,
    /// Support of every topic's word distribution.
    pub topic_support: usize,
    pub zipf_exponent: f64,
    pub background_rate: f64,
    /// Mean tokens per document.
    pub mean_len: f64,
    pub min_len: usize,
    /// Dirichlet concentration on the document's own class.
    pub class_concentration: f64,
    /// Dirichlet concentration on every class.
    pub mixing_concentration: f64,
    pub embedding_dim: usize,
    pub embedding_noise: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for NewsgroupConfig {
    fn default() -> Self {
        Self {
            classes: 20,
            docs: 4000,
            vocabulary: 3000,
            topic_support: 200,
            zipf_exponent: 1.0,
            background_rate: 0.3,
            mean_len: 48.0,
            min_len: 8,
            class_concentration: 1.0,
            mixing_concentration: 0.05,
            embedding_dim: 32,
            embedding_noise: 0.1,
            test_fraction: 0.15,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NewsgroupCorpus {
    pub corpus: Corpus,
    pub embeddings: EmbeddingTable,
    /// Generating mixture of every document.
    pub mixtures: Vec<Vec<f64>>,
}

/// Readable pseudo-word for an index: consonant-vowel syllables.
pub fn pseudo_word(mut i: usize) -> String {
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut s = String::new();
    loop {
        let c = CONSONANTS[i % CONSONANTS.len()];
        i /= CONSONANTS.len();
        let v = VOWELS[i % VOWELS.len()];
        i /= VOWELS.len();
        s.push(c as char);
        s.push(v as char);
        if i == 0 {
            break;
        }
        i -= 1;
    }
    s
}

/// Labelled corpus in the shape of a newsgroup collection: every class owns
/// a Zipfian topic over a random slice of the vocabulary (slices overlap),
/// documents mix their class topic with a little of the others, and a
/// Zipfian background distribution supplies function-word-like tokens.
/// Embeddings are a fixed random projection of the mixture plus noise.
pub fn newsgroup_corpus(cfg: &NewsgroupConfig) -> NewsgroupCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let words: Vec<String> = (0..cfg.vocabulary).map(pseudo_word).collect();
    let support = cfg.topic_support.min(cfg.vocabulary);
    let topic_dists: Vec<(Vec<usize>, WeightedIndex<f64>)> = (0..cfg.classes)
        .map(|_| {
            let mut ids: Vec<usize> = (0..cfg.vocabulary).collect();
            ids.shuffle(&mut rng);
            ids.truncate(support);
            (ids, WeightedIndex::new(zipf_weights(support, cfg.zipf_exponent)).expect("positive weights"))
        })
        .collect();
    let mut bg_ids: Vec<usize> = (0..cfg.vocabulary).collect();
    bg_ids.shuffle(&mut rng);
    let background = WeightedIndex::new(zipf_weights(cfg.vocabulary, cfg.zipf_exponent)).expect("positive weights");
    let projection: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| (0..cfg.embedding_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();

    let mut documents = Vec::with_capacity(cfg.docs);
    let mut labels = Vec::with_capacity(cfg.docs);
    let mut mixtures = Vec::with_capacity(cfg.docs);
    let mut vectors = std::collections::BTreeMap::new();
    let len_dist = Gamma::new(4.0, cfg.mean_len / 4.0).expect("positive length");
    for d in 0..cfg.docs {
        let class = rng.random_range(0..cfg.classes);
        let mut alpha = vec![cfg.mixing_concentration; cfg.classes];
        alpha[class] += cfg.class_concentration;
        let theta = dirichlet(&alpha, &mut rng);
        let pick = WeightedIndex::new(&theta).expect("non-negative mixture");
        let len = (len_dist.sample(&mut rng).round() as usize).max(cfg.min_len);
        let doc: Vec<String> = (0..len)
            .map(|_| {
                let id = if rng.random::<f64>() < cfg.background_rate {
                    bg_ids[background.sample(&mut rng)]
                } else {
                    let (ids, dist) = &topic_dists[pick.sample(&mut rng)];
                    ids[dist.sample(&mut rng)]
                };
                words[id].clone()
            })
            .collect();
        let emb: Vec<f64> = (0..cfg.embedding_dim)
            .map(|j| {
                let signal: f64 = theta.iter().zip(&projection).map(|(t, p)| t * p[j]).sum();
                signal + cfg.embedding_noise * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        vectors.insert(d, emb);
        documents.push(doc);
        labels.push(Some(format!("class{class:02}")));
        mixtures.push(theta);
    }
    let partitions = split(cfg.docs, cfg.test_fraction, &mut rng);
    NewsgroupCorpus {
        corpus: Corpus {
            name: "newsgroups-synthetic".into(),
            documents,
            partitions,
            labels,
        },
        embeddings: EmbeddingTable {
            dim: cfg.embedding_dim,
            vectors,
        },
        mixtures,
    }
}
