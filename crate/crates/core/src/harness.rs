//! Experiment orchestration: multi-seed runs over models, sampling modes and
//! topic counts, median-then-mean aggregation, grid search over the decoder
//! sampling hyperparameters, vocabulary sweeps and timing profiles.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{load_corpus, load_embeddings, Corpus, CorpusError, EmbeddingTable, Partition, PreparedCorpus};
use crate::metrics::{classify, score_topics, EvalConfig, MetricError, MetricReport, SvmConfig};
use crate::model::{train, write_theta_tsv, Dataset, ModelError, ModelKind, NtmConfig, NtmModel, TopicSet};
use crate::negsampling::{NegSamplingConfig, SamplingMode};
use crate::numkernel::Tensor2;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("I/O on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Decoder-sampling search space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    #[serde(rename = "M")]
    pub top_m: Vec<usize>,
    pub lambda: Vec<f64>,
    pub num_topics: usize,
    pub seeds: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            top_m: vec![1, 2, 3],
            lambda: vec![0.1, 0.25, 0.5, 0.75, 1.0],
            num_topics: 20,
            seeds: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub dataset: PathBuf,
    pub embeddings: Option<PathBuf>,
    pub models: Vec<ModelKind>,
    pub sampling: Vec<NegSamplingConfig>,
    pub topic_counts: Vec<usize>,
    pub seeds: usize,
    /// Seeds are `first_seed .. first_seed + seeds`.
    pub first_seed: u64,
    pub vocab_size: usize,
    /// Template for every run; model, topic count, vocabulary size and seed
    /// are filled in per run.
    pub training: NtmConfig,
    pub top_words: usize,
    pub eval: EvalConfig,
    pub svm: SvmConfig,
    pub grid: GridSpec,
    pub output: PathBuf,
    /// Parallel runs; 0 uses every core.
    pub workers: usize,
    pub force: bool,
    /// Also write θ for every document of every run.
    pub emit_theta: bool,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            embeddings: None,
            models: vec![ModelKind::ProdLda],
            sampling: vec![NegSamplingConfig::none(), NegSamplingConfig::decoder(1, 0.5)],
            topic_counts: vec![10, 20, 30, 40, 50, 60, 90, 120],
            seeds: 5,
            first_seed: 0,
            vocab_size: 2000,
            training: NtmConfig::default(),
            top_words: 10,
            eval: EvalConfig::default(),
            svm: SvmConfig::default(),
            grid: GridSpec::default(),
            output: PathBuf::from("runs"),
            workers: 0,
            force: false,
            emit_theta: false,
        }
    }
}

impl ExperimentPlan {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(io_err(path))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Plan(m));
        if self.seeds == 0 {
            return bad("at least one seed is required".into());
        }
        if self.models.is_empty() || self.sampling.is_empty() || self.topic_counts.is_empty() {
            return bad("models, sampling modes and topic counts must be non-empty".into());
        }
        if self.topic_counts.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("topic counts must be strictly ascending, got {:?}", self.topic_counts));
        }
        let mut modes: Vec<SamplingMode> = self.sampling.iter().map(|s| s.mode).collect();
        modes.sort();
        if modes.windows(2).any(|w| w[0] == w[1]) {
            return bad("each sampling mode may appear once per plan".into());
        }
        if self.training.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.vocab_size == 0 || self.top_words < 2 {
            return bad("vocab_size must be positive and top_words at least 2".into());
        }
        for &t in &self.topic_counts {
            for s in &self.sampling {
                s.validate(t).map_err(|e| HarnessError::Plan(format!("T = {t}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn seed_list(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.first_seed + i).collect()
    }

    fn needs_embeddings(&self) -> bool {
        self.models.iter().any(|m| m.needs_embeddings())
    }

    pub fn load_corpus(&self) -> Result<(Corpus, Option<EmbeddingTable>)> {
        let corpus = load_corpus(&self.dataset)?;
        let embeddings = match &self.embeddings {
            Some(p) => Some(load_embeddings(p, corpus.len())?),
            None if self.needs_embeddings() => {
                return Err(HarnessError::Plan("contextual models need --embeddings".into()));
            }
            None => None,
        };
        Ok((corpus, embeddings))
    }

    pub fn prepare(&self) -> Result<PreparedCorpus> {
        let (corpus, embeddings) = self.load_corpus()?;
        let prepared = PreparedCorpus::prepare(&corpus, self.vocab_size, embeddings.as_ref())?;
        if prepared.dropped > 0 {
            log::warn!("{} documents had no in-vocabulary tokens and were dropped", prepared.dropped);
        }
        Ok(prepared)
    }
}

/// Identity of one training run.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RunKey {
    pub model: ModelKind,
    pub sampling: SamplingMode,
    pub num_topics: usize,
    pub seed: u64,
}

impl RunKey {
    /// Model label used in tables: `prodlda-none`, `prodlda-decoder`, …
    pub fn label(&self) -> String {
        format!("{}-{}", self.model, self.sampling)
    }

    pub fn file_stem(&self) -> String {
        format!("{}-T{}-s{}", self.label(), self.num_topics, self.seed)
    }
}

/// Everything produced by one run.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: MetricReport,
    pub topics: TopicSet,
    pub model: NtmModel,
}

fn string_labels(corpus: &PreparedCorpus, rows: &[usize]) -> Option<(Vec<usize>, Vec<String>)> {
    let kept: Vec<usize> = rows.iter().copied().filter(|&r| corpus.labels[r].is_some()).collect();
    if kept.is_empty() {
        return None;
    }
    let labels = kept.iter().map(|&r| corpus.labels[r].clone().expect("filtered")).collect();
    Some((kept, labels))
}

/// Trains one model on the training partition and scores it.
pub fn run_single(
    corpus: &PreparedCorpus,
    key: &RunKey,
    sampling: &NegSamplingConfig,
    plan: &ExperimentPlan,
) -> Result<RunOutput> {
    let config = NtmConfig {
        model: key.model,
        num_topics: key.num_topics,
        vocab_size: corpus.vocab.len(),
        embedding_dim: corpus.embedding_dim(),
        seed: key.seed,
        ..plan.training.clone()
    };
    let train_rows = corpus.rows_in(Partition::Train);
    if train_rows.is_empty() {
        return Err(ModelError::NoDocuments.into());
    }
    let data = Dataset::from_corpus(corpus, &train_rows, &config)?;
    let (model, trace) = train(&config, &data, sampling)?;
    let topics = model.top_words(plan.top_words, &corpus.vocab);
    let reference: Vec<Vec<String>> = train_rows.iter().map(|&r| corpus.token_docs[r].clone()).collect();
    let scores = score_topics(&topics, &reference, &plan.eval)?;

    let test_rows = corpus.rows_in(Partition::Test);
    let accuracy = match (string_labels(corpus, &train_rows), string_labels(corpus, &test_rows)) {
        (Some((tr, ytr)), Some((te, yte))) => {
            let theta_tr = model.infer_theta(&Dataset::from_corpus(corpus, &tr, &config)?.input)?;
            let theta_te = model.infer_theta(&Dataset::from_corpus(corpus, &te, &config)?.input)?;
            match classify(&theta_tr, &ytr, &theta_te, &yte, &plan.svm) {
                Ok(a) => Some(a),
                Err(MetricError::SingleClass) => None,
                Err(e) => return Err(e.into()),
            }
        }
        _ => None,
    };
    let mut snapshot = serde_json::Map::new();
    snapshot.insert("model".into(), serde_json::to_value(&config)?);
    snapshot.insert("sampling".into(), serde_json::to_value(sampling)?);
    snapshot.insert("vocab_size".into(), corpus.vocab.len().into());
    snapshot.insert("final_loss".into(), trace.epochs.last().map_or(f64::NAN, |e| e.total).into());
    let report = MetricReport {
        model: key.model.to_string(),
        sampling: key.sampling.to_string(),
        dataset: corpus.name.clone(),
        num_topics: key.num_topics,
        seed: key.seed,
        npmi: Some(scores.npmi),
        cv: Some(scores.cv),
        irbo: Some(scores.irbo),
        diversity: Some(scores.diversity),
        accuracy,
        train_seconds: Some(trace.seconds),
        config: serde_json::Value::Object(snapshot),
    };
    Ok(RunOutput { report, topics, model })
}

/// θ of every retained document, in corpus order.
pub fn theta_all(model: &NtmModel, corpus: &PreparedCorpus) -> Result<Tensor2> {
    let rows: Vec<usize> = (0..corpus.num_docs()).collect();
    let data = Dataset::from_corpus(corpus, &rows, &model.config)?;
    Ok(model.infer_theta(&data.input)?)
}

/// One line of the raw per-run table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub model: String,
    pub dataset: String,
    #[serde(rename = "T")]
    pub num_topics: usize,
    pub seed: u64,
    pub npmi: Option<f64>,
    pub cv: Option<f64>,
    pub irbo: Option<f64>,
    pub accuracy: Option<f64>,
}

impl RawRow {
    pub fn from_report(r: &MetricReport) -> Self {
        Self {
            model: format!("{}-{}", r.model, r.sampling),
            dataset: r.dataset.clone(),
            num_topics: r.num_topics,
            seed: r.seed,
            npmi: r.npmi,
            cv: r.cv,
            irbo: r.irbo,
            accuracy: r.accuracy,
        }
    }
}

/// Median-then-mean summary of one model label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model: String,
    pub dataset: String,
    pub runs: usize,
    pub npmi: Option<f64>,
    pub cv: Option<f64>,
    pub irbo: Option<f64>,
    pub accuracy: Option<f64>,
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 { values[n / 2] } else { (values[n / 2 - 1] + values[n / 2]) / 2.0 })
}

/// Per (model, dataset): the median over seeds at every topic count, then
/// the mean of those medians. Missing values are skipped.
pub fn aggregate(rows: &[RawRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, String), BTreeMap<usize, Vec<&RawRow>>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.model.clone(), r.dataset.clone()))
            .or_default()
            .entry(r.num_topics)
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((model, dataset), by_t)| {
            let metric = |f: fn(&RawRow) -> Option<f64>| {
                let medians: Vec<f64> = by_t
                    .values()
                    .filter_map(|runs| median(&mut runs.iter().filter_map(|r| f(r)).collect::<Vec<_>>()))
                    .collect();
                (!medians.is_empty()).then(|| medians.iter().sum::<f64>() / medians.len() as f64)
            };
            AggregateRow {
                runs: by_t.values().map(Vec::len).sum(),
                npmi: metric(|r| r.npmi),
                cv: metric(|r| r.cv),
                irbo: metric(|r| r.irbo),
                accuracy: metric(|r| r.accuracy),
                model,
                dataset,
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_raw_csv(path: &Path) -> Result<Vec<RawRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub key: RunKey,
    pub error: String,
}

#[derive(Clone, Debug)]
pub struct PlanResult {
    pub reports: Vec<MetricReport>,
    pub raw: Vec<RawRow>,
    pub aggregate: Vec<AggregateRow>,
    pub failures: Vec<FailedRun>,
    /// Keys whose report already existed and were not retrained.
    pub skipped: Vec<RunKey>,
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(e) => {
            log::warn!("could not build a {workers}-thread pool ({e}); using the global pool");
            f()
        }
    }
}

/// Trains and scores every (model, sampling, T, seed) of the plan, writes one
/// JSON report per run under `output/runs`, then `raw.csv` and `aggregate.csv`.
pub fn run_plan(plan: &ExperimentPlan) -> Result<PlanResult> {
    plan.validate()?;
    let corpus = plan.prepare()?;
    run_plan_on(plan, &corpus)
}

/// [`run_plan`] against an already prepared corpus.
pub fn run_plan_on(plan: &ExperimentPlan, corpus: &PreparedCorpus) -> Result<PlanResult> {
    plan.validate()?;
    let runs_dir = plan.output.join("runs");
    fs::create_dir_all(&runs_dir).map_err(io_err(&runs_dir))?;
    let mut jobs = Vec::new();
    for &model in &plan.models {
        for sampling in &plan.sampling {
            for &t in &plan.topic_counts {
                for seed in plan.seed_list() {
                    jobs.push((
                        RunKey {
                            model,
                            sampling: sampling.mode,
                            num_topics: t,
                            seed,
                        },
                        sampling.clone(),
                    ));
                }
            }
        }
    }

    // (report, reused from disk) or the error text.
    type Outcome = std::result::Result<(MetricReport, bool), String>;
    let outcomes: Vec<(RunKey, Outcome)> = with_pool(plan.workers, || {
        jobs.par_iter()
            .map(|(key, sampling)| {
                let path = runs_dir.join(format!("{}.json", key.file_stem()));
                if path.exists() && !plan.force {
                    let loaded = fs::read_to_string(&path)
                        .map_err(|e| e.to_string())
                        .and_then(|s| serde_json::from_str::<MetricReport>(&s).map_err(|e| e.to_string()));
                    return (key.clone(), loaded.map(|r| (r, true)));
                }
                let out = run_single(corpus, key, sampling, plan).and_then(|o| {
                    let stem = runs_dir.join(key.file_stem());
                    o.topics.save(&stem.with_extension("topics.json"))?;
                    if plan.emit_theta {
                        let theta = theta_all(&o.model, corpus)?;
                        write_theta_tsv(&stem.with_extension("theta.tsv"), &corpus.doc_ids, &theta)?;
                    }
                    fs::write(&path, serde_json::to_string_pretty(&o.report)?).map_err(io_err(&path))?;
                    Ok(o.report)
                });
                (key.clone(), out.map(|r| (r, false)).map_err(|e| e.to_string()))
            })
            .collect()
    });

    let mut reports = Vec::new();
    let mut failures = Vec::new();
    let mut skipped = Vec::new();
    for (key, outcome) in outcomes {
        match outcome {
            Ok((report, was_cached)) => {
                if was_cached {
                    skipped.push(key);
                }
                reports.push(report);
            }
            Err(error) => {
                log::warn!("run {} failed and is excluded from the aggregate: {error}", key.file_stem());
                failures.push(FailedRun { key, error });
            }
        }
    }
    let raw: Vec<RawRow> = reports.iter().map(RawRow::from_report).collect();
    let aggregate = aggregate(&raw);
    write_csv(&plan.output.join("raw.csv"), &raw)?;
    write_csv(&plan.output.join("aggregate.csv"), &aggregate)?;
    if !failures.is_empty() {
        let path = plan.output.join("failures.json");
        fs::write(&path, serde_json::to_string_pretty(&failures)?).map_err(io_err(&path))?;
    }
    Ok(PlanResult {
        reports,
        raw,
        aggregate,
        failures,
        skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    #[serde(rename = "M")]
    pub top_m: usize,
    pub lambda: f64,
    pub median_npmi: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    #[serde(rename = "best_M")]
    pub best_top_m: usize,
    pub best_lambda: f64,
    pub best_npmi: f64,
}

/// Picks the cell with the highest median NPMI; ties go to the smaller M,
/// then the smaller λ, so the answer does not depend on enumeration order.
pub fn best_cell(cells: &[GridCell]) -> Option<&GridCell> {
    cells
        .iter()
        .filter(|c| c.median_npmi.is_some_and(f64::is_finite))
        .min_by(|a, b| {
            let (na, nb) = (a.median_npmi.unwrap_or(f64::NAN), b.median_npmi.unwrap_or(f64::NAN));
            nb.total_cmp(&na).then(a.top_m.cmp(&b.top_m)).then(a.lambda.total_cmp(&b.lambda))
        })
}

/// Exhaustive decoder-sampling search at a single topic count with a
/// reduced seed set, for the first model of the plan.
pub fn grid_search(plan: &ExperimentPlan, corpus: &PreparedCorpus) -> Result<GridResult> {
    let grid = &plan.grid;
    if grid.top_m.is_empty() || grid.lambda.is_empty() || grid.seeds == 0 {
        return Err(HarnessError::Plan("grid needs at least one M, one λ and one seed".into()));
    }
    let model = *plan.models.first().ok_or_else(|| HarnessError::Plan("no model to tune".into()))?;
    let base = plan.sampling.iter().find(|s| s.mode == SamplingMode::Decoder).cloned().unwrap_or_default();
    let mut cells = Vec::new();
    for &m in &grid.top_m {
        for &lambda in &grid.lambda {
            let sampling = NegSamplingConfig {
                mode: SamplingMode::Decoder,
                top_m: m,
                lambda,
                ..base.clone()
            };
            let mut npmis = Vec::new();
            let mut error = sampling.validate(grid.num_topics).err().map(|e| e.to_string());
            if error.is_none() {
                for i in 0..grid.seeds as u64 {
                    let key = RunKey {
                        model,
                        sampling: SamplingMode::Decoder,
                        num_topics: grid.num_topics,
                        seed: plan.first_seed + i,
                    };
                    match run_single(corpus, &key, &sampling, plan) {
                        Ok(o) => npmis.extend(o.report.npmi),
                        Err(e) => {
                            error = Some(e.to_string());
                            break;
                        }
                    }
                }
            }
            if let Some(e) = &error {
                log::warn!("grid cell M = {m}, λ = {lambda} skipped: {e}");
                npmis.clear();
            }
            log::info!("grid cell M = {m}, λ = {lambda}: {:?}", median(&mut npmis.clone()));
            cells.push(GridCell {
                top_m: m,
                lambda,
                median_npmi: median(&mut npmis),
                error,
            });
        }
    }
    let best = best_cell(&cells).ok_or_else(|| HarnessError::Plan("every grid cell failed".into()))?.clone();
    Ok(GridResult {
        best_top_m: best.top_m,
        best_lambda: best.lambda,
        best_npmi: best.median_npmi.expect("filtered"),
        cells,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub requested_size: usize,
    pub vocab_size: usize,
    /// The corpus had fewer distinct words than requested.
    pub truncated: bool,
    pub model: String,
    pub runs: usize,
    pub mean_npmi: f64,
    pub var_npmi: f64,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

/// Reruns the plan once per vocabulary size (outputs under `output/vocab-<size>`).
pub fn vocab_sweep(plan: &ExperimentPlan, sizes: &[usize]) -> Result<Vec<SweepRow>> {
    plan.validate()?;
    let (corpus, embeddings) = plan.load_corpus()?;
    let mut rows = Vec::new();
    for &size in sizes {
        let prepared = PreparedCorpus::prepare(&corpus, size, embeddings.as_ref())?;
        let truncated = prepared.unique_words < size;
        if truncated {
            log::warn!("requested {size} words but the corpus has {}; using all", prepared.unique_words);
        }
        let sub = ExperimentPlan {
            vocab_size: size,
            output: plan.output.join(format!("vocab-{size}")),
            ..plan.clone()
        };
        let result = run_plan_on(&sub, &prepared)?;
        let mut by_model: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in &result.raw {
            by_model.entry(r.model.clone()).or_default().extend(r.npmi);
        }
        for (model, v) in by_model {
            let (mean, var) = mean_var(&v);
            rows.push(SweepRow {
                requested_size: size,
                vocab_size: prepared.vocab.len(),
                truncated,
                model,
                runs: v.len(),
                mean_npmi: mean,
                var_npmi: var,
            });
        }
    }
    write_csv(&plan.output.join("vocab_sweep.csv"), &rows)?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub model: String,
    pub num_topics: usize,
    pub runs: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub mean_npmi: f64,
    pub std_npmi: f64,
    pub median_npmi: f64,
    /// `(t − t_vanilla) / t_vanilla` against the same model without sampling.
    pub time_overhead: Option<f64>,
    /// `(npmi − npmi_vanilla) / |npmi_vanilla|` on mean NPMI.
    pub npmi_gain: Option<f64>,
}

/// Relative change of `value` against `baseline`.
pub fn overhead(value: f64, baseline: f64) -> f64 {
    (value - baseline) / baseline
}

/// Runs every job of the plan one after another (no parallelism, so wall
/// clock is comparable) and tabulates time and NPMI per model and T.
pub fn time_profile(plan: &ExperimentPlan, corpus: &PreparedCorpus) -> Result<Vec<ProfileRow>> {
    let sequential = ExperimentPlan {
        workers: 1,
        ..plan.clone()
    };
    let result = run_plan_on(&sequential, corpus)?;
    let mut groups: BTreeMap<(String, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for r in &result.reports {
        let g = groups.entry((format!("{}-{}", r.model, r.sampling), r.num_topics)).or_default();
        g.0.extend(r.train_seconds);
        g.1.extend(r.npmi);
    }
    let mut rows: Vec<ProfileRow> = groups
        .iter()
        .map(|((model, t), (secs, npmi))| {
            let (ms, vs) = mean_var(secs);
            let (mn, vn) = mean_var(npmi);
            ProfileRow {
                model: model.clone(),
                num_topics: *t,
                runs: secs.len(),
                mean_seconds: ms,
                std_seconds: vs.sqrt(),
                mean_npmi: mn,
                std_npmi: vn.sqrt(),
                median_npmi: median(&mut npmi.clone()).unwrap_or(f64::NAN),
                time_overhead: None,
                npmi_gain: None,
            }
        })
        .collect();
    let baselines: BTreeMap<(String, usize), (f64, f64)> = rows
        .iter()
        .filter_map(|r| r.model.strip_suffix("-none").map(|m| ((m.to_string(), r.num_topics), (r.mean_seconds, r.mean_npmi))))
        .collect();
    for r in rows.iter_mut() {
        let base = r.model.rsplit_once('-').map(|(m, _)| m.to_string()).unwrap_or_default();
        if r.model.ends_with("-none") {
            continue;
        }
        if let Some(&(t0, n0)) = baselines.get(&(base, r.num_topics)) {
            r.time_overhead = Some(overhead(r.mean_seconds, t0));
            r.npmi_gain = Some((r.mean_npmi - n0) / n0.abs());
        }
    }
    write_csv(&plan.output.join("profile.csv"), &rows)?;
    Ok(rows)
}
