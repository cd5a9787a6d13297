use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use negtm::corpus::{load_corpus, Partition, PreparedCorpus};
use negtm::harness::{grid_search, run_plan, time_profile, vocab_sweep, write_csv, ExperimentPlan};
use negtm::metrics::score_topics;
use negtm::model::{ModelKind, TopicSet};
use negtm::negsampling::{NegSamplingConfig, SamplingMode};
use negtm::synthetic::{newsgroup_corpus, NewsgroupConfig};

#[derive(Parser)]
#[command(name = "negtm", version, about = "Neural topic models with negative sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and score every (model, sampling, T, seed) of a plan.
    Train(PlanArgs),
    /// Score a topic-set JSON against a corpus.
    Eval(EvalArgs),
    /// Rerun the plan at several vocabulary sizes.
    Sweep {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [1000, 2000, 4000, 8000])]
        sizes: Vec<usize>,
    },
    /// Exhaustive search over M and λ for decoder sampling.
    Grid {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long = "grid-M", value_delimiter = ',')]
        grid_m: Option<Vec<usize>>,
        #[arg(long = "grid-lambda", value_delimiter = ',')]
        grid_lambda: Option<Vec<f64>>,
        #[arg(long = "grid-topics")]
        grid_topics: Option<usize>,
        #[arg(long = "grid-seeds")]
        grid_seeds: Option<usize>,
    },
    /// Sequential runs with training time and NPMI per variant.
    Profile(PlanArgs),
    /// Write a synthetic labelled corpus and document embeddings.
    Synth(SynthArgs),
}

#[derive(Args)]
struct PlanArgs {
    /// JSON experiment plan; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    model: Option<Vec<ModelKind>>,
    #[arg(long, value_delimiter = ',')]
    neg: Option<Vec<SamplingMode>>,
    #[arg(long, value_delimiter = ',')]
    topics: Option<Vec<usize>>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long = "M")]
    top_m: Option<usize>,
    #[arg(long)]
    margin: Option<f64>,
    /// Salient words removed per encoder view.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    force: bool,
    /// Also write θ for every document.
    #[arg(long)]
    emit_theta: bool,
}

impl PlanArgs {
    fn plan(&self) -> Result<ExperimentPlan> {
        let mut plan = match &self.config {
            Some(path) => ExperimentPlan::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => ExperimentPlan::default(),
        };
        if let Some(v) = &self.dataset {
            plan.dataset = v.clone();
        }
        if let Some(v) = &self.embeddings {
            plan.embeddings = Some(v.clone());
        }
        if let Some(v) = &self.model {
            plan.models = v.clone();
        }
        if let Some(modes) = &self.neg {
            plan.sampling = modes
                .iter()
                .map(|&mode| {
                    plan.sampling
                        .iter()
                        .find(|s| s.mode == mode)
                        .cloned()
                        .unwrap_or(NegSamplingConfig { mode, ..NegSamplingConfig::default() })
                })
                .collect();
        }
        for s in &mut plan.sampling {
            if let Some(v) = self.lambda {
                s.lambda = v;
            }
            if let Some(v) = self.top_m {
                s.top_m = v;
            }
            if let Some(v) = self.margin {
                s.margin = v;
            }
            if let Some(v) = self.k {
                s.k = v;
            }
            if let Some(v) = self.eta {
                s.eta = v;
            }
        }
        if let Some(v) = &self.topics {
            plan.topic_counts = v.clone();
        }
        if let Some(v) = self.seeds {
            plan.seeds = v;
        }
        if let Some(v) = self.epochs {
            plan.training.epochs = v;
        }
        if let Some(v) = self.batch_size {
            plan.training.batch_size = v;
        }
        if let Some(v) = self.vocab_size {
            plan.vocab_size = v;
        }
        if let Some(v) = &self.out {
            plan.output = v.clone();
        }
        if let Some(v) = self.workers {
            plan.workers = v;
        }
        plan.force |= self.force;
        plan.emit_theta |= self.emit_theta;
        if plan.dataset.as_os_str().is_empty() {
            bail!("no dataset: pass --dataset or set it in --config");
        }
        plan.validate()?;
        std::fs::create_dir_all(&plan.output).with_context(|| format!("creating {}", plan.output.display()))?;
        plan.save(&plan.output.join("plan.json"))?;
        Ok(plan)
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Topic-set JSON (list of ranked word lists).
    #[arg(long)]
    topics: PathBuf,
    /// Reference corpus; coherence uses its training partition.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 2000)]
    vocab_size: usize,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4000)]
    docs: usize,
    #[arg(long, default_value_t = 20)]
    classes: usize,
    #[arg(long, default_value_t = 3000)]
    vocabulary: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn prepare(plan: &ExperimentPlan) -> Result<PreparedCorpus> {
    Ok(plan.prepare()?)
}

fn eval(args: &EvalArgs) -> Result<()> {
    let topics = TopicSet::load(&args.topics)?;
    let corpus = PreparedCorpus::prepare(&load_corpus(&args.dataset)?, args.vocab_size, None)?;
    let reference: Vec<Vec<String>> =
        corpus.rows_in(Partition::Train).into_iter().map(|r| corpus.token_docs[r].clone()).collect();
    print_json(&score_topics(&topics, &reference, &Default::default())?)
}

fn synth(args: &SynthArgs) -> Result<()> {
    let generated = newsgroup_corpus(&NewsgroupConfig {
        docs: args.docs,
        classes: args.classes,
        vocabulary: args.vocabulary,
        seed: args.seed,
        ..NewsgroupConfig::default()
    });
    std::fs::create_dir_all(&args.out)?;
    let corpus_path = args.out.join("corpus.tsv");
    let emb_path = args.out.join("embeddings.tsv");
    generated.corpus.write_tsv(&corpus_path)?;
    generated.embeddings.save(&emb_path)?;
    println!("{}\n{}", corpus_path.display(), emb_path.display());
    Ok(())
}

fn summary_path(plan: &ExperimentPlan, name: &str) -> PathBuf {
    Path::new(&plan.output).join(name)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(args) => {
            let plan = args.plan()?;
            let result = run_plan(&plan)?;
            log::info!(
                "{} runs ({} reused, {} failed); reports in {}",
                result.reports.len(),
                result.skipped.len(),
                result.failures.len(),
                plan.output.display()
            );
            print_json(&result.aggregate)?;
            if !result.failures.is_empty() {
                bail!("{} runs failed; see failures.json", result.failures.len());
            }
        }
        Command::Eval(args) => eval(&args)?,
        Command::Sweep { plan, sizes } => {
            let plan = plan.plan()?;
            print_json(&vocab_sweep(&plan, &sizes)?)?;
        }
        Command::Grid {
            plan,
            grid_m,
            grid_lambda,
            grid_topics,
            grid_seeds,
        } => {
            let mut plan = plan.plan()?;
            if let Some(v) = grid_m {
                plan.grid.top_m = v;
            }
            if let Some(v) = grid_lambda {
                plan.grid.lambda = v;
            }
            if let Some(v) = grid_topics {
                plan.grid.num_topics = v;
            }
            if let Some(v) = grid_seeds {
                plan.grid.seeds = v;
            }
            let corpus = prepare(&plan)?;
            let result = grid_search(&plan, &corpus)?;
            write_csv(&summary_path(&plan, "grid.csv"), &result.cells)?;
            print_json(&result)?;
        }
        Command::Profile(args) => {
            let plan = args.plan()?;
            let corpus = prepare(&plan)?;
            print_json(&time_profile(&plan, &corpus)?)?;
        }
        Command::Synth(args) => synth(&args)?,
    }
    Ok(())
}
