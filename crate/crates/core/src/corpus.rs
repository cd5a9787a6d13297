//! Corpus ingestion, vocabulary construction and document vectorization.
//!
//! Corpus files are TSV with one document per line:
//! `text<TAB>partition[<TAB>label]`, partition being `train` or `test`.
//! Text is lowercased and split on whitespace; no other cleaning happens.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkernel::Tensor2;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty corpus")]
    Empty,
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: unknown partition tag {tag:?}")]
    UnknownPartition { line: usize, tag: String },
    #[error("embedding dimension mismatch on line {line}: expected {expected}, got {got}")]
    DimensionMismatch { line: usize, expected: usize, got: usize },
    #[error("embedding id {id} out of range for {docs} documents")]
    IdOutOfRange { id: usize, docs: usize },
    #[error("no document has an in-vocabulary token")]
    NothingRetained,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Test => "test",
        })
    }
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Partition::Train),
            "test" => Ok(Partition::Test),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub documents: Vec<Vec<String>>,
    pub partitions: Vec<Partition>,
    pub labels: Vec<Option<String>>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.iter().any(Option::is_some)
    }

    /// Parses TSV corpus lines. Blank lines are skipped.
    pub fn parse<R: BufRead>(reader: R, name: &str) -> Result<Self> {
        let mut corpus = Corpus {
            name: name.to_string(),
            documents: Vec::new(),
            partitions: Vec::new(),
            labels: Vec::new(),
        };
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line_no = i + 1;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 {
                return Err(CorpusError::Malformed {
                    line: line_no,
                    reason: format!("expected 2 or 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let partition = fields[1]
                .trim()
                .parse::<Partition>()
                .map_err(|tag| CorpusError::UnknownPartition { line: line_no, tag })?;
            let label = fields.get(2).map(|l| l.trim()).filter(|l| !l.is_empty()).map(str::to_string);
            corpus.documents.push(tokenize(fields[0]));
            corpus.partitions.push(partition);
            corpus.labels.push(label);
        }
        if corpus.documents.is_empty() {
            return Err(CorpusError::Empty);
        }
        Ok(corpus)
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for ((doc, part), label) in self.documents.iter().zip(&self.partitions).zip(&self.labels) {
            write!(w, "{}\t{}", doc.join(" "), part)?;
            if let Some(l) = label {
                write!(w, "\t{l}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Reads a corpus TSV; the corpus is named after the file stem.
pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let name = path.file_stem().map_or_else(|| "corpus".to_string(), |s| s.to_string_lossy().into_owned());
    Corpus::parse(BufReader::new(File::open(path)?), &name)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for word in &self.words {
            writeln!(w, "{word}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut words = Vec::new();
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            let w = line.trim();
            if !w.is_empty() {
                words.push(w.to_string());
            }
        }
        Ok(Self::from_words(words))
    }
}

/// Counts tokens across the whole corpus.
pub fn word_frequencies(corpus: &Corpus) -> HashMap<&str, usize> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in &corpus.documents {
        for tok in doc {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
    }
    counts
}

/// The `max_size` most frequent words, ties broken lexicographically.
pub fn build_vocabulary(corpus: &Corpus, max_size: usize) -> Vocabulary {
    assert!(max_size >= 1, "vocabulary size must be at least 1");
    let mut ranked: Vec<(&str, usize)> = word_frequencies(corpus).into_iter().collect();
    ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(max_size);
    Vocabulary::from_words(ranked.into_iter().map(|(w, _)| w.to_string()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VectorKind {
    BowCount,
    BowNormalized,
    Tfidf,
    Contextual,
}

/// Row-per-document matrix plus bookkeeping about which documents survived.
#[derive(Clone, Debug)]
pub struct DocMatrix {
    pub kind: VectorKind,
    pub values: Tensor2,
    /// Original corpus index of each row.
    pub doc_ids: Vec<usize>,
    /// Documents without any in-vocabulary token.
    pub dropped: usize,
}

impl DocMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }
}

/// Vectorizes every document with at least one in-vocabulary token.
///
/// tf-idf is `count · ln(N / df)` over retained documents, then L1-normalized
/// (rows that are zero everywhere stay zero).
pub fn vectorize(corpus: &Corpus, vocab: &Vocabulary, kind: VectorKind) -> DocMatrix {
    assert!(kind != VectorKind::Contextual, "contextual vectors come from load_embeddings");
    let v = vocab.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut doc_ids = Vec::new();
    for (i, doc) in corpus.documents.iter().enumerate() {
        let mut counts = vec![0.0; v];
        let mut any = false;
        for tok in doc {
            if let Some(id) = vocab.id(tok) {
                counts[id] += 1.0;
                any = true;
            }
        }
        if any {
            rows.push(counts);
            doc_ids.push(i);
        }
    }
    let dropped = corpus.len() - doc_ids.len();
    if dropped > 0 {
        log::info!("{}: dropped {dropped} documents with no in-vocabulary tokens", corpus.name);
    }
    match kind {
        VectorKind::BowCount => {}
        VectorKind::BowNormalized => {
            for r in &mut rows {
                let total: f64 = r.iter().sum();
                r.iter_mut().for_each(|x| *x /= total);
            }
        }
        VectorKind::Tfidf => {
            let n = rows.len() as f64;
            let mut df = vec![0usize; v];
            for r in &rows {
                for (d, &c) in df.iter_mut().zip(r) {
                    if c > 0.0 {
                        *d += 1;
                    }
                }
            }
            let idf: Vec<f64> = df.iter().map(|&d| if d == 0 { 0.0 } else { (n / d as f64).ln() }).collect();
            for r in &mut rows {
                for (x, w) in r.iter_mut().zip(&idf) {
                    *x *= w;
                }
                let total: f64 = r.iter().sum();
                if total > 0.0 {
                    r.iter_mut().for_each(|x| *x /= total);
                }
            }
        }
        VectorKind::Contextual => unreachable!(),
    }
    let values = if rows.is_empty() {
        Tensor2::zeros(0, v)
    } else {
        Tensor2::from_rows(&rows).expect("rows share the vocabulary width")
    };
    DocMatrix {
        kind,
        values,
        doc_ids,
        dropped,
    }
}

/// Contextual document embeddings keyed by corpus index.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vectors: BTreeMap<usize, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn get(&self, doc_id: usize) -> Option<&[f64]> {
        self.vectors.get(&doc_id).map(Vec::as_slice)
    }

    pub fn parse<R: BufRead>(reader: R, num_docs: usize) -> Result<Self> {
        let mut vectors = BTreeMap::new();
        let mut dim: Option<usize> = None;
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (id, rest) = line.split_once('\t').ok_or_else(|| CorpusError::Malformed {
                line: line_no,
                reason: "expected doc_id<TAB>values".into(),
            })?;
            let id: usize = id.trim().parse().map_err(|_| CorpusError::Malformed {
                line: line_no,
                reason: format!("bad document id {id:?}"),
            })?;
            if id >= num_docs {
                return Err(CorpusError::IdOutOfRange { id, docs: num_docs });
            }
            let values = rest
                .split_whitespace()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| CorpusError::Malformed {
                        line: line_no,
                        reason: format!("bad float {f:?}"),
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            match dim {
                None => dim = Some(values.len()),
                Some(d) if d != values.len() => {
                    return Err(CorpusError::DimensionMismatch {
                        line: line_no,
                        expected: d,
                        got: values.len(),
                    })
                }
                _ => {}
            }
            vectors.insert(id, values);
        }
        Ok(Self {
            dim: dim.unwrap_or(0),
            vectors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for (id, v) in &self.vectors {
            let line: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{id}\t{}", line.join(" "))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads `doc_id<TAB>f1 f2 ... fD` lines; ids must be below `num_docs`.
pub fn load_embeddings(path: &Path, num_docs: usize) -> Result<EmbeddingTable> {
    EmbeddingTable::parse(BufReader::new(File::open(path)?), num_docs)
}

/// Every representation a training run needs, aligned row-for-row on the
/// retained documents.
#[derive(Clone, Debug)]
pub struct PreparedCorpus {
    pub name: String,
    pub vocab: Vocabulary,
    pub bow_counts: Tensor2,
    pub bow_normalized: Tensor2,
    pub tfidf: Tensor2,
    pub embeddings: Option<Tensor2>,
    pub doc_ids: Vec<usize>,
    pub partitions: Vec<Partition>,
    pub labels: Vec<Option<String>>,
    /// In-vocabulary token sequences, used as the coherence reference corpus.
    pub token_docs: Vec<Vec<String>>,
    pub dropped: usize,
    /// Distinct tokens in the raw corpus, before truncation.
    pub unique_words: usize,
}

impl PreparedCorpus {
    pub fn prepare(corpus: &Corpus, max_vocab: usize, embeddings: Option<&EmbeddingTable>) -> Result<Self> {
        let vocab = build_vocabulary(corpus, max_vocab);
        let counts = vectorize(corpus, &vocab, VectorKind::BowCount);
        if counts.rows() == 0 {
            return Err(CorpusError::NothingRetained);
        }
        let normalized = vectorize(corpus, &vocab, VectorKind::BowNormalized);
        let tfidf = vectorize(corpus, &vocab, VectorKind::Tfidf);
        let embeddings = match embeddings {
            None => None,
            Some(table) => {
                let mut rows = Vec::with_capacity(counts.doc_ids.len());
                for &id in &counts.doc_ids {
                    let v = table.get(id).ok_or(CorpusError::IdOutOfRange { id, docs: table.vectors.len() })?;
                    rows.push(v.to_vec());
                }
                Some(Tensor2::from_rows(&rows).map_err(|e| CorpusError::Malformed { line: 0, reason: e.to_string() })?)
            }
        };
        let token_docs = counts
            .doc_ids
            .iter()
            .map(|&i| corpus.documents[i].iter().filter(|t| vocab.id(t).is_some()).cloned().collect())
            .collect();
        Ok(Self {
            name: corpus.name.clone(),
            partitions: counts.doc_ids.iter().map(|&i| corpus.partitions[i]).collect(),
            labels: counts.doc_ids.iter().map(|&i| corpus.labels[i].clone()).collect(),
            unique_words: word_frequencies(corpus).len(),
            vocab,
            bow_counts: counts.values,
            bow_normalized: normalized.values,
            tfidf: tfidf.values,
            embeddings,
            doc_ids: counts.doc_ids,
            token_docs,
            dropped: counts.dropped,
        })
    }

    pub fn num_docs(&self) -> usize {
        self.doc_ids.len()
    }

    /// Row indices of a partition.
    pub fn rows_in(&self, partition: Partition) -> Vec<usize> {
        (0..self.num_docs()).filter(|&i| self.partitions[i] == partition).collect()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.as_ref().map_or(0, Tensor2::cols)
    }
}
