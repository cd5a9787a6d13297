//! VAE topic models.
//!
//! `x → softplus MLP → (μ, log σ²) → z = μ + σ⊙ε → θ = softmax(z) → x̂`,
//! trained on reconstruction + KL against a Laplace approximation of a
//! Dirichlet prior. Four decoders share the encoder:
//!
//! * `prodlda`, `combined`, `zeroshot`: product of experts, `x̂ = softmax(BN(θβ))`
//! * `neurallda`: mixture, `x̂ = θ · softmax_rows(β)`
//! * `gsm`: the mixture decoder behind an extra learned `T×T` map on `z`
//!
//! Backward passes are written out by hand; every pass keeps an explicit
//! cache so the negative-sampling branches can reuse the same layers.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{PreparedCorpus, Vocabulary};
use crate::negsampling::{
    infonce_backward, infonce_loss, make_encoder_samples, perturb_theta, perturb_theta_backward, triplet_loss,
    triplet_loss_backward, NegSamplingConfig, NegSamplingError, PerturbedTheta, SamplingMode, TripletTarget,
};
use crate::numkernel::{
    softmax_rows, softmax_rows_backward, AdamState, BatchNorm, BatchNormCache, Checkpoint, DenseLayer,
    Activation, GradCheck, KernelError, LayerCache, NamedTensor, ParamView, Tensor2,
};

/// Floor applied to x̂ before taking its log.
pub const RECON_FLOOR: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Sampling(#[from] NegSamplingError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("input has {got} columns, the model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("{0} model needs document embeddings")]
    MissingEmbeddings(ModelKind),
    #[error("no training documents")]
    NoDocuments,
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    ProdLda,
    NeuralLda,
    Gsm,
    /// BoW ⊕ document embedding input, product-of-experts decoder.
    Combined,
    /// Embedding-only input, product-of-experts decoder.
    ZeroShot,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::ProdLda,
        ModelKind::NeuralLda,
        ModelKind::Gsm,
        ModelKind::Combined,
        ModelKind::ZeroShot,
    ];

    pub fn decoder(self) -> DecoderKind {
        match self {
            ModelKind::NeuralLda | ModelKind::Gsm => DecoderKind::Mixture,
            _ => DecoderKind::ProductOfExperts,
        }
    }

    pub fn input(self) -> InputKind {
        match self {
            ModelKind::Combined => InputKind::Combined,
            ModelKind::ZeroShot => InputKind::Embedding,
            _ => InputKind::Bow,
        }
    }

    pub fn needs_embeddings(self) -> bool {
        self.input() != InputKind::Bow
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::ProdLda => "prodlda",
            ModelKind::NeuralLda => "neurallda",
            ModelKind::Gsm => "gsm",
            ModelKind::Combined => "combined",
            ModelKind::ZeroShot => "zeroshot",
        })
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| format!("unknown model {s:?} (prodlda|neurallda|gsm|combined|zeroshot)"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderKind {
    ProductOfExperts,
    Mixture,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    Bow,
    Combined,
    Embedding,
}

/// Which BoW representation feeds the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BowInput {
    #[default]
    Normalized,
    Counts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-3,
            beta1: 0.99,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NtmConfig {
    pub model: ModelKind,
    pub num_topics: usize,
    pub vocab_size: usize,
    /// Width of the document embeddings; only read by contextual models.
    pub embedding_dim: usize,
    pub hidden: Vec<usize>,
    pub bow_input: BowInput,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub prior_alpha: f64,
    pub dropout: f64,
    pub optimizer: OptimizerConfig,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NtmConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::ProdLda,
            num_topics: 20,
            vocab_size: 2000,
            embedding_dim: 0,
            hidden: vec![100, 100],
            bow_input: BowInput::Normalized,
            epochs: 100,
            batch_size: 64,
            seed: 0,
            prior_alpha: 0.02,
            dropout: 0.2,
            optimizer: OptimizerConfig::default(),
            bn_momentum: 0.99,
            bn_eps: 1e-5,
        }
    }
}

impl NtmConfig {
    pub fn new(model: ModelKind, num_topics: usize, vocab_size: usize) -> Self {
        Self {
            model,
            num_topics,
            vocab_size,
            ..Self::default()
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.model.input() {
            InputKind::Bow => self.vocab_size,
            InputKind::Combined => self.vocab_size + self.embedding_dim,
            InputKind::Embedding => self.embedding_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.num_topics < 2 {
            return bad(format!("num_topics = {} (need at least 2)", self.num_topics));
        }
        if self.vocab_size == 0 {
            return bad("vocab_size = 0".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad(format!("hidden widths {:?}", self.hidden));
        }
        if !(self.prior_alpha > 0.0) {
            return bad(format!("prior alpha = {} (must be positive)", self.prior_alpha));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout = {} (must lie in [0, 1))", self.dropout));
        }
        if self.model.needs_embeddings() && self.embedding_dim == 0 {
            return Err(ModelError::MissingEmbeddings(self.model));
        }
        if self.vocab_size < self.num_topics {
            log::warn!("vocabulary ({}) smaller than topic count ({})", self.vocab_size, self.num_topics);
        }
        Ok(())
    }
}

/// `(μ₀, σ₀²)` of the Laplace approximation to a symmetric Dirichlet(α).
pub fn laplace_prior(num_topics: usize, alpha: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(alpha > 0.0) {
        return Err(ModelError::Config(format!("prior alpha = {alpha} (must be positive)")));
    }
    let t = num_topics as f64;
    Ok((vec![0.0; num_topics], vec![(t - 1.0) / (alpha * t); num_topics]))
}

/// Per-document Gaussian posterior parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Tensor2,
    pub log_var: Tensor2,
}

/// `z = μ + exp(½ log σ²) ⊙ ε`
pub fn reparameterize(post: &GaussianPosterior, eps: &Tensor2) -> Tensor2 {
    let mut z = post.mu.clone();
    for ((zv, &lv), &e) in z.data_mut().iter_mut().zip(post.log_var.data()).zip(eps.data()) {
        *zv += (0.5 * lv).exp() * e;
    }
    z
}

pub fn theta_from_z(z: &Tensor2) -> Tensor2 {
    softmax_rows(z)
}

/// `softmax(θβ)` row-wise.
pub fn decode_product_of_experts(theta: &Tensor2, beta: &Tensor2) -> Result<Tensor2> {
    Ok(softmax_rows(&theta.matmul(beta)?))
}

/// `θ · softmax_rows(β)`
pub fn decode_mixture(theta: &Tensor2, beta: &Tensor2) -> Result<Tensor2> {
    Ok(theta.matmul(&softmax_rows(beta))?)
}

/// `−Σ_w x_w log max(x̂_w, floor)`; returns the value and how many nonzero
/// `x_w` hit the floor.
pub fn reconstruction_loss(x: &[f64], recon: &[f64]) -> (f64, usize) {
    let mut loss = 0.0;
    let mut clamped = 0;
    for (&xv, &r) in x.iter().zip(recon) {
        if xv == 0.0 {
            continue;
        }
        if r < RECON_FLOOR {
            clamped += 1;
        }
        loss -= xv * r.max(RECON_FLOOR).ln();
    }
    (loss, clamped)
}

/// Closed-form `KL(N(μ, diag e^lv) ‖ N(μ₀, diag σ₀²))`.
pub fn kl_divergence(mu: &[f64], log_var: &[f64], prior_mu: &[f64], prior_var: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..mu.len() {
        let d = mu[k] - prior_mu[k];
        s += prior_var[k].ln() - log_var[k] + (log_var[k].exp() + d * d) / prior_var[k] - 1.0;
    }
    0.5 * s
}

/// Ranked top words per topic.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TopicSet {
    pub topics: Vec<Vec<String>>,
}

impl TopicSet {
    pub fn new(topics: Vec<Vec<String>>) -> Self {
        Self { topics }
    }

    pub fn len(&self) -> usize {
        self.topics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topics.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(f, self).map_err(std::io::Error::other)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(File::open(path)?);
        Ok(serde_json::from_reader(f).map_err(std::io::Error::other)?)
    }
}

/// Writes `doc_id<TAB>θ₁ … θ_T`, one document per line.
pub fn write_theta_tsv(path: &Path, doc_ids: &[usize], theta: &Tensor2) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (id, row) in doc_ids.iter().zip(theta.iter_rows()) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{id}\t{}", cells.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

/// Row-aligned matrices for one set of documents.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// Encoder input.
    pub input: Tensor2,
    /// Reconstruction target.
    pub counts: Tensor2,
    pub bow_normalized: Tensor2,
    pub tfidf: Tensor2,
    pub embeddings: Option<Tensor2>,
}

impl Dataset {
    pub fn from_corpus(corpus: &PreparedCorpus, rows: &[usize], config: &NtmConfig) -> Result<Self> {
        let embeddings = corpus.embeddings.as_ref().map(|e| e.select_rows(rows));
        Self::new(
            corpus.bow_counts.select_rows(rows),
            corpus.bow_normalized.select_rows(rows),
            corpus.tfidf.select_rows(rows),
            embeddings,
            config,
        )
    }

    pub fn new(
        counts: Tensor2,
        bow_normalized: Tensor2,
        tfidf: Tensor2,
        embeddings: Option<Tensor2>,
        config: &NtmConfig,
    ) -> Result<Self> {
        let bow = match config.bow_input {
            BowInput::Normalized => &bow_normalized,
            BowInput::Counts => &counts,
        };
        let input = match (config.model.input(), &embeddings) {
            (InputKind::Bow, _) => bow.clone(),
            (InputKind::Combined, Some(e)) => bow.hconcat(e)?,
            (InputKind::Embedding, Some(e)) => e.clone(),
            (_, None) => return Err(ModelError::MissingEmbeddings(config.model)),
        };
        if input.cols() != config.input_dim() {
            return Err(ModelError::Dimension {
                expected: config.input_dim(),
                got: input.cols(),
            });
        }
        Ok(Self {
            input,
            counts,
            bow_normalized,
            tfidf,
            embeddings,
        })
    }

    pub fn len(&self) -> usize {
        self.counts.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Encoder inputs built from a BoW-like block, keeping the embedding part.
    fn encoder_input_from(&self, bow_like: Tensor2, rows: &[usize], config: &NtmConfig) -> Result<Tensor2> {
        let bow_like = match config.bow_input {
            BowInput::Normalized => bow_like,
            BowInput::Counts => {
                let mut t = bow_like;
                for (i, &r) in rows.iter().enumerate() {
                    let len: f64 = self.counts.row(r).iter().sum();
                    t.row_mut(i).iter_mut().for_each(|v| *v *= len);
                }
                t
            }
        };
        Ok(match config.model.input() {
            InputKind::Bow => bow_like,
            InputKind::Combined => bow_like.hconcat(&self.embeddings.as_ref().expect("checked at construction").select_rows(rows))?,
            InputKind::Embedding => self.input.select_rows(rows),
        })
    }

    /// Assembles a mini-batch together with whatever the sampling mode needs.
    pub fn batch(&self, rows: &[usize], config: &NtmConfig, sampling: &NegSamplingConfig) -> Result<Batch> {
        let counts = self.counts.select_rows(rows);
        let target = match sampling.triplet_target {
            TripletTarget::BowNormalized => self.bow_normalized.select_rows(rows),
            TripletTarget::BowCount => counts.clone(),
        };
        let views = if sampling.mode == SamplingMode::Encoder {
            let mut pos = Vec::with_capacity(rows.len());
            let mut neg = Vec::with_capacity(rows.len());
            for &r in rows {
                let x = self.tfidf.row(r);
                let nnz = x.iter().filter(|&&v| v != 0.0).count();
                let k = sampling.k.min(nnz.saturating_sub(1));
                let s = make_encoder_samples(x, k)?;
                pos.push(s.positive);
                neg.push(s.negative);
            }
            let pos = Tensor2::from_rows(&pos)?;
            let neg = Tensor2::from_rows(&neg)?;
            Some((
                self.encoder_input_from(pos, rows, config)?,
                self.encoder_input_from(neg, rows, config)?,
            ))
        } else {
            None
        };
        Ok(Batch {
            input: self.input.select_rows(rows),
            counts,
            target,
            views,
        })
    }
}

/// One mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub input: Tensor2,
    pub counts: Tensor2,
    /// Positive sample of the triplet loss.
    pub target: Tensor2,
    /// Encoder inputs of the positive and negative views.
    pub views: Option<(Tensor2, Tensor2)>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.counts.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Randomness consumed by one training step; fixing it makes the loss a
/// deterministic function of the parameters.
#[derive(Clone, Debug)]
pub struct Noise {
    pub eps: Tensor2,
    /// Inverted-dropout multipliers on the last hidden layer.
    pub dropout_mask: Tensor2,
}

impl Noise {
    pub fn sample<R: Rng + ?Sized>(rows: usize, num_topics: usize, hidden: usize, dropout: f64, rng: &mut R) -> Self {
        let mut eps = Tensor2::zeros(rows, num_topics);
        for v in eps.data_mut() {
            *v = rng.sample(StandardNormal);
        }
        let keep = 1.0 - dropout;
        let mut dropout_mask = Tensor2::filled(rows, hidden, 1.0);
        if dropout > 0.0 {
            for v in dropout_mask.data_mut() {
                *v = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
            }
        }
        Self { eps, dropout_mask }
    }

    /// No sampling noise and no dropout.
    pub fn deterministic(rows: usize, num_topics: usize, hidden: usize) -> Self {
        Self {
            eps: Tensor2::zeros(rows, num_topics),
            dropout_mask: Tensor2::filled(rows, hidden, 1.0),
        }
    }
}

/// Batch-mean loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub reconstruction: f64,
    pub kl: f64,
    pub triplet: f64,
    pub infonce: f64,
    pub total: f64,
    /// Reconstruction entries that hit the log floor.
    pub clamped: usize,
}

struct EncoderCache {
    hidden: Vec<LayerCache>,
    mu_head: LayerCache,
    lv_head: LayerCache,
    bn_mu: BatchNormCache,
    bn_lv: BatchNormCache,
    mu: Tensor2,
    log_var: Tensor2,
    z: Tensor2,
}

struct DecoderCache {
    theta: Tensor2,
    bn: Option<BatchNormCache>,
    /// softmax_rows(β) for the mixture decoder.
    topic_word: Option<Tensor2>,
    recon: Tensor2,
}

/// Everything a backward pass needs from one forward pass.
pub struct ForwardState {
    pub loss: LossParts,
    anchor: EncoderCache,
    gsm: Option<LayerCache>,
    theta: Tensor2,
    main: DecoderCache,
    negative: Option<(Vec<PerturbedTheta>, DecoderCache, Tensor2)>,
    views: Option<(EncoderCache, EncoderCache)>,
}

impl ForwardState {
    pub fn theta(&self) -> &Tensor2 {
        &self.theta
    }

    pub fn reconstruction(&self) -> &Tensor2 {
        &self.main.recon
    }
}

/// Encoder, optional GSM map, decoder matrix and normalization state.
#[derive(Clone, Debug)]
pub struct NtmModel {
    pub config: NtmConfig,
    pub hidden: Vec<DenseLayer>,
    pub mu_head: DenseLayer,
    pub lv_head: DenseLayer,
    pub bn_mu: BatchNorm,
    pub bn_lv: BatchNorm,
    /// Learned `T×T` map in front of the softmax (GSM only).
    pub gsm: Option<DenseLayer>,
    /// Topic-word matrix, `T×V`.
    pub beta: Tensor2,
    pub grad_beta: Tensor2,
    /// Normalization of decoder logits (product-of-experts only).
    pub bn_dec: Option<BatchNorm>,
    pub prior_mu: Vec<f64>,
    pub prior_var: Vec<f64>,
}

impl NtmModel {
    /// Glorot-initialized model; the GSM map starts as the identity.
    pub fn new(config: &NtmConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::with_rng(config, &mut rng)
    }

    fn with_rng<R: Rng + ?Sized>(config: &NtmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let t = config.num_topics;
        let mut hidden = Vec::with_capacity(config.hidden.len());
        let mut width = config.input_dim();
        for &h in &config.hidden {
            hidden.push(DenseLayer::glorot(width, h, Activation::Softplus, rng));
            width = h;
        }
        let mu_head = DenseLayer::glorot(width, t, Activation::Identity, rng);
        let lv_head = DenseLayer::glorot(width, t, Activation::Identity, rng);
        let gsm = (config.model == ModelKind::Gsm)
            .then(|| DenseLayer::from_parts(Tensor2::identity(t), vec![0.0; t], Activation::Identity))
            .transpose()?;
        let mut beta = Tensor2::zeros(t, config.vocab_size);
        let limit = (6.0 / (t + config.vocab_size) as f64).sqrt();
        for v in beta.data_mut() {
            *v = rng.random_range(-limit..limit);
        }
        let bn_dec = (config.model.decoder() == DecoderKind::ProductOfExperts)
            .then(|| BatchNorm::new(config.vocab_size, config.bn_momentum, config.bn_eps));
        let (prior_mu, prior_var) = laplace_prior(t, config.prior_alpha)?;
        Ok(Self {
            config: config.clone(),
            hidden,
            mu_head,
            lv_head,
            bn_mu: BatchNorm::new(t, config.bn_momentum, config.bn_eps),
            bn_lv: BatchNorm::new(t, config.bn_momentum, config.bn_eps),
            gsm,
            grad_beta: Tensor2::zeros(t, config.vocab_size),
            beta,
            bn_dec,
            prior_mu,
            prior_var,
        })
    }

    pub fn num_topics(&self) -> usize {
        self.config.num_topics
    }

    fn last_hidden(&self) -> usize {
        *self.config.hidden.last().expect("validated non-empty")
    }

    fn check_input(&self, input: &Tensor2) -> Result<()> {
        if input.cols() != self.config.input_dim() {
            return Err(ModelError::Dimension {
                expected: self.config.input_dim(),
                got: input.cols(),
            });
        }
        Ok(())
    }

    /// Named views of every trainable buffer, in a fixed order.
    pub fn params(&mut self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.hidden.iter_mut().enumerate() {
            out.extend(layer.params(&format!("encoder.{i}")));
        }
        out.extend(self.mu_head.params("mu_head"));
        out.extend(self.lv_head.params("log_var_head"));
        if let Some(g) = self.gsm.as_mut() {
            out.extend(g.params("gsm"));
        }
        out.push(ParamView {
            name: "beta".into(),
            value: self.beta.data_mut(),
            grad: self.grad_beta.data_mut(),
        });
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn param_vector(&mut self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.value.iter().copied()).collect()
    }

    pub fn grad_vector(&mut self) -> Vec<f64> {
        self.params().iter().flat_map(|p| p.grad.iter().copied()).collect()
    }

    pub fn set_param_vector(&mut self, values: &[f64]) {
        let mut offset = 0;
        for p in self.params() {
            let n = p.value.len();
            p.value.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, values.len(), "parameter vector length");
    }

    /// Posterior parameters in evaluation mode (running batch-norm statistics, no dropout).
    pub fn encode(&self, input: &Tensor2) -> Result<GaussianPosterior> {
        self.check_input(input)?;
        let mut h = input.clone();
        for layer in &self.hidden {
            h = layer.forward_cached(&h)?.0;
        }
        let mu = self.bn_mu.forward_eval(&self.mu_head.forward_cached(&h)?.0)?;
        let log_var = self.bn_lv.forward_eval(&self.lv_head.forward_cached(&h)?.0)?;
        Ok(GaussianPosterior { mu, log_var })
    }

    /// θ from the posterior mean; no sampling.
    pub fn infer_theta(&self, input: &Tensor2) -> Result<Tensor2> {
        let post = self.encode(input)?;
        let logits = match &self.gsm {
            Some(g) => g.forward_cached(&post.mu)?.0,
            None => post.mu,
        };
        Ok(theta_from_z(&logits))
    }

    /// Evaluation-mode reconstruction.
    pub fn decode(&self, theta: &Tensor2) -> Result<Tensor2> {
        match self.config.model.decoder() {
            DecoderKind::Mixture => decode_mixture(theta, &self.beta),
            DecoderKind::ProductOfExperts => {
                let logits = theta.matmul(&self.beta)?;
                let logits = match &self.bn_dec {
                    Some(bn) => bn.forward_eval(&logits)?,
                    None => logits,
                };
                Ok(softmax_rows(&logits))
            }
        }
    }

    /// The `t` highest-weighted words of every topic; ties go to the lower word index.
    pub fn top_words(&self, t: usize, vocab: &Vocabulary) -> TopicSet {
        let t = t.min(self.beta.cols());
        let topics = self
            .beta
            .iter_rows()
            .map(|row| {
                let mut idx: Vec<usize> = (0..row.len()).collect();
                idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                idx[..t].iter().map(|&i| vocab.word(i).to_string()).collect()
            })
            .collect();
        TopicSet { topics }
    }

    fn encode_train(&self, input: &Tensor2, noise: &Noise) -> Result<EncoderCache> {
        self.check_input(input)?;
        let mut caches = Vec::with_capacity(self.hidden.len());
        let mut h = input.clone();
        for layer in &self.hidden {
            let (out, cache) = layer.forward_cached(&h)?;
            caches.push(cache);
            h = out;
        }
        let h = h.hadamard(&noise.dropout_mask)?;
        let (mu_pre, mu_head) = self.mu_head.forward_cached(&h)?;
        let (lv_pre, lv_head) = self.lv_head.forward_cached(&h)?;
        let (mu, bn_mu) = self.bn_mu.forward_train(&mu_pre)?;
        let (log_var, bn_lv) = self.bn_lv.forward_train(&lv_pre)?;
        let z = reparameterize(
            &GaussianPosterior {
                mu: mu.clone(),
                log_var: log_var.clone(),
            },
            &noise.eps,
        );
        Ok(EncoderCache {
            hidden: caches,
            mu_head,
            lv_head,
            bn_mu,
            bn_lv,
            mu,
            log_var,
            z,
        })
    }

    /// Backpropagates `∂L/∂z` plus direct `∂L/∂μ`, `∂L/∂log σ²` into the encoder.
    fn encoder_backward(
        &mut self,
        cache: &EncoderCache,
        noise: &Noise,
        dz: &Tensor2,
        dmu_extra: Option<&Tensor2>,
        dlv_extra: Option<&Tensor2>,
    ) -> Result<()> {
        let mut dmu = dz.clone();
        let mut dlv = Tensor2::zeros(dz.rows(), dz.cols());
        for (i, d) in dlv.data_mut().iter_mut().enumerate() {
            *d = dz.data()[i] * noise.eps.data()[i] * 0.5 * (0.5 * cache.log_var.data()[i]).exp();
        }
        if let Some(e) = dmu_extra {
            dmu.add_assign(e)?;
        }
        if let Some(e) = dlv_extra {
            dlv.add_assign(e)?;
        }
        let dmu_pre = self.bn_mu.backward(&cache.bn_mu, &dmu)?;
        let dlv_pre = self.bn_lv.backward(&cache.bn_lv, &dlv)?;
        let mut dh = self.mu_head.backward_with(&cache.mu_head, &dmu_pre, true)?.expect("requested");
        dh.add_assign(&self.lv_head.backward_with(&cache.lv_head, &dlv_pre, true)?.expect("requested"))?;
        let mut dh = dh.hadamard(&noise.dropout_mask)?;
        for i in (0..self.hidden.len()).rev() {
            match self.hidden[i].backward_with(&cache.hidden[i], &dh, i > 0)? {
                Some(d) => dh = d,
                None => break,
            }
        }
        Ok(())
    }

    fn decode_train(&self, theta: &Tensor2) -> Result<DecoderCache> {
        match self.config.model.decoder() {
            DecoderKind::Mixture => {
                let topic_word = softmax_rows(&self.beta);
                let recon = theta.matmul(&topic_word)?;
                Ok(DecoderCache {
                    theta: theta.clone(),
                    bn: None,
                    topic_word: Some(topic_word),
                    recon,
                })
            }
            DecoderKind::ProductOfExperts => {
                let logits = theta.matmul(&self.beta)?;
                let (logits, bn) = match &self.bn_dec {
                    Some(b) => {
                        let (out, cache) = b.forward_train(&logits)?;
                        (out, Some(cache))
                    }
                    None => (logits, None),
                };
                Ok(DecoderCache {
                    theta: theta.clone(),
                    bn,
                    topic_word: None,
                    recon: softmax_rows(&logits),
                })
            }
        }
    }

    /// Accumulates `∂L/∂β` and returns `∂L/∂θ`. `dlogits` is an extra
    /// gradient on the (normalized) logits of the product-of-experts decoder.
    fn decoder_backward(&mut self, cache: &DecoderCache, drecon: &Tensor2, dlogits: Option<&Tensor2>) -> Result<Tensor2> {
        match &cache.topic_word {
            Some(tw) => {
                let mut dtw = Tensor2::zeros(tw.rows(), tw.cols());
                cache.theta.add_t_matmul_into(drecon, &mut dtw)?;
                self.grad_beta.add_assign(&softmax_rows_backward(tw, &dtw)?)?;
                Ok(drecon.matmul_t(tw)?)
            }
            None => {
                let mut dl = softmax_rows_backward(&cache.recon, drecon)?;
                if let Some(extra) = dlogits {
                    dl.add_assign(extra)?;
                }
                if let (Some(bn), Some(bc)) = (&self.bn_dec, &cache.bn) {
                    dl = bn.backward(bc, &dl)?;
                }
                cache.theta.add_t_matmul_into(&dl, &mut self.grad_beta)?;
                Ok(dl.matmul_t(&self.beta)?)
            }
        }
    }

    /// Runs the full training-mode forward pass and evaluates every loss term.
    pub fn forward(&self, batch: &Batch, noise: &Noise, sampling: &NegSamplingConfig) -> Result<ForwardState> {
        let n = batch.len();
        if sampling.mode == SamplingMode::Decoder {
            sampling.validate(self.num_topics())?;
        }
        let anchor = self.encode_train(&batch.input, noise)?;
        let (logits, gsm) = match &self.gsm {
            Some(g) => {
                let (out, cache) = g.forward_cached(&anchor.z)?;
                (out, Some(cache))
            }
            None => (anchor.z.clone(), None),
        };
        let theta = theta_from_z(&logits);
        let main = self.decode_train(&theta)?;

        let mut loss = LossParts::default();
        for r in 0..n {
            let (rl, c) = reconstruction_loss(batch.counts.row(r), main.recon.row(r));
            loss.reconstruction += rl;
            loss.clamped += c;
            loss.kl += kl_divergence(anchor.mu.row(r), anchor.log_var.row(r), &self.prior_mu, &self.prior_var);
        }
        if loss.clamped > 0 {
            log::debug!("{} reconstruction entries clamped at {RECON_FLOOR:e}", loss.clamped);
        }

        let negative = if sampling.mode == SamplingMode::Decoder {
            let perturbed = (0..n)
                .map(|r| perturb_theta(theta.row(r), sampling.top_m))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let degenerate = perturbed.iter().filter(|p| p.degenerate).count();
            if degenerate > 0 {
                log::debug!("{degenerate} documents had all topic mass in the top {}", sampling.top_m);
            }
            let theta_neg = Tensor2::from_rows(&perturbed.iter().map(|p| p.theta_neg.clone()).collect::<Vec<_>>())?;
            let neg = self.decode_train(&theta_neg)?;
            for r in 0..n {
                loss.triplet += triplet_loss(main.recon.row(r), batch.target.row(r), neg.recon.row(r), sampling.margin);
            }
            Some((perturbed, neg, theta_neg))
        } else {
            None
        };

        let views = match (&batch.views, sampling.mode) {
            (Some((pos, neg)), SamplingMode::Encoder) => {
                let p = self.encode_train(pos, noise)?;
                let q = self.encode_train(neg, noise)?;
                for r in 0..n {
                    loss.infonce += infonce_loss(anchor.z.row(r), p.z.row(r), q.z.row(r), sampling.eta);
                }
                Some((p, q))
            }
            (None, SamplingMode::Encoder) => {
                return Err(ModelError::Config("encoder sampling needs a batch with views".into()));
            }
            _ => None,
        };

        let inv = 1.0 / n as f64;
        loss.reconstruction *= inv;
        loss.kl *= inv;
        loss.triplet *= inv;
        loss.infonce *= inv;
        let lambda = if sampling.mode == SamplingMode::Decoder { sampling.lambda } else { 0.0 };
        loss.total = crate::negsampling::combined_loss(loss.reconstruction, loss.kl, loss.triplet, lambda) + loss.infonce;
        Ok(ForwardState {
            loss,
            anchor,
            gsm,
            theta,
            main,
            negative,
            views,
        })
    }

    /// Accumulates gradients of `state.loss.total` into the parameter buffers.
    pub fn backward(&mut self, state: &ForwardState, batch: &Batch, noise: &Noise, sampling: &NegSamplingConfig) -> Result<()> {
        let n = batch.len();
        let inv = 1.0 / n as f64;
        let v = self.beta.cols();
        let recon = &state.main.recon;

        // reconstruction: gradient w.r.t. x̂ (mixture) or directly w.r.t. logits
        let mut drecon = Tensor2::zeros(n, v);
        let mut dlogits = None;
        match self.config.model.decoder() {
            DecoderKind::Mixture => {
                for r in 0..n {
                    let x = batch.counts.row(r);
                    let xr = recon.row(r);
                    for (j, d) in drecon.row_mut(r).iter_mut().enumerate() {
                        if x[j] != 0.0 && xr[j] >= RECON_FLOOR {
                            *d = -x[j] / xr[j] * inv;
                        }
                    }
                }
            }
            DecoderKind::ProductOfExperts => {
                let mut dl = Tensor2::zeros(n, v);
                for r in 0..n {
                    let x = batch.counts.row(r);
                    let xr = recon.row(r);
                    let mut s = 0.0;
                    for j in 0..v {
                        if x[j] != 0.0 && xr[j] >= RECON_FLOOR {
                            s += x[j];
                        }
                    }
                    for (j, d) in dl.row_mut(r).iter_mut().enumerate() {
                        let hit = x[j] != 0.0 && xr[j] >= RECON_FLOOR;
                        *d = (xr[j] * s - if hit { x[j] } else { 0.0 }) * inv;
                    }
                }
                dlogits = Some(dl);
            }
        }

        let mut dneg_recon = None;
        if let Some((_, neg, _)) = &state.negative {
            let w = sampling.lambda * inv;
            let mut gneg = Tensor2::zeros(n, v);
            for r in 0..n {
                let (ga, gn) = triplet_loss_backward(recon.row(r), batch.target.row(r), neg.recon.row(r), sampling.margin);
                for (d, g) in drecon.row_mut(r).iter_mut().zip(&ga) {
                    *d += w * g;
                }
                for (d, g) in gneg.row_mut(r).iter_mut().zip(&gn) {
                    *d = w * g;
                }
            }
            dneg_recon = Some(gneg);
        }

        let mut dtheta = self.decoder_backward(&state.main, &drecon, dlogits.as_ref())?;
        if let (Some((perturbed, neg, _)), Some(gneg)) = (&state.negative, &dneg_recon) {
            if !sampling.stop_gradient {
                let dtheta_neg = self.decoder_backward(neg, gneg, None)?;
                for (r, p) in perturbed.iter().enumerate() {
                    let g = perturb_theta_backward(p, dtheta_neg.row(r));
                    for (d, gv) in dtheta.row_mut(r).iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
            }
        }

        let dlogit_z = softmax_rows_backward(&state.theta, &dtheta)?;
        let mut dz = match (&mut self.gsm, &state.gsm) {
            (Some(layer), Some(cache)) => layer.backward_with(cache, &dlogit_z, true)?.expect("requested"),
            _ => dlogit_z,
        };

        let t = self.num_topics();
        let mut dmu_kl = Tensor2::zeros(n, t);
        let mut dlv_kl = Tensor2::zeros(n, t);
        for r in 0..n {
            let mu = state.anchor.mu.row(r);
            let lv = state.anchor.log_var.row(r);
            for k in 0..t {
                dmu_kl.set(r, k, (mu[k] - self.prior_mu[k]) / self.prior_var[k] * inv);
                dlv_kl.set(r, k, 0.5 * (lv[k].exp() / self.prior_var[k] - 1.0) * inv);
            }
        }

        if let Some((p, q)) = &state.views {
            let mut dzp = Tensor2::zeros(n, t);
            let mut dzq = Tensor2::zeros(n, t);
            for r in 0..n {
                let (ga, gp, gq) = infonce_backward(state.anchor.z.row(r), p.z.row(r), q.z.row(r), sampling.eta);
                for k in 0..t {
                    dz.set(r, k, dz.get(r, k) + ga[k] * inv);
                    dzp.set(r, k, gp[k] * inv);
                    dzq.set(r, k, gq[k] * inv);
                }
            }
            self.encoder_backward(p, noise, &dzp, None, None)?;
            self.encoder_backward(q, noise, &dzq, None, None)?;
        }
        self.encoder_backward(&state.anchor, noise, &dz, Some(&dmu_kl), Some(&dlv_kl))
    }

    /// Folds the main pass's batch statistics into the running estimates.
    fn commit_batch_norm(&mut self, state: &ForwardState) {
        self.bn_mu.commit(&state.anchor.bn_mu);
        self.bn_lv.commit(&state.anchor.bn_lv);
        if let (Some(bn), Some(c)) = (self.bn_dec.as_mut(), &state.main.bn) {
            bn.commit(c);
        }
    }

    /// Loss components of one decoder-sampling step, without touching gradients.
    pub fn decoder_negative_step(&self, batch: &Batch, noise: &Noise, sampling: &NegSamplingConfig) -> Result<LossParts> {
        if sampling.mode != SamplingMode::Decoder {
            return Err(ModelError::Config("decoder_negative_step needs decoder sampling".into()));
        }
        Ok(self.forward(batch, noise, sampling)?.loss)
    }

    /// Worst relative error between analytic and finite-difference gradients
    /// of the batch loss under frozen noise.
    pub fn gradient_check(&self, batch: &Batch, noise: &Noise, sampling: &NegSamplingConfig, cfg: GradCheck) -> Result<f64> {
        let mut model = self.clone();
        model.zero_grad();
        let state = model.forward(batch, noise, sampling)?;
        model.backward(&state, batch, noise, sampling)?;
        let analytic = model.grad_vector();
        let params = model.param_vector();
        let mut probe = model.clone();
        let mut failure = None;
        let err = crate::numkernel::gradient_check(
            |p| {
                probe.set_param_vector(p);
                match probe.forward(batch, noise, sampling) {
                    Ok(s) => s.loss.total,
                    Err(e) => {
                        failure = Some(e);
                        f64::NAN
                    }
                }
            },
            &params,
            &analytic,
            cfg,
        );
        match failure {
            Some(e) => Err(e),
            None => Ok(err),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for (i, l) in self.hidden.iter().enumerate() {
            tensors.push(NamedTensor::new(format!("encoder.{i}.weight"), &l.weight));
            tensors.push(NamedTensor::vector(format!("encoder.{i}.bias"), &l.bias));
        }
        for (name, l) in [("mu_head", &self.mu_head), ("log_var_head", &self.lv_head)] {
            tensors.push(NamedTensor::new(format!("{name}.weight"), &l.weight));
            tensors.push(NamedTensor::vector(format!("{name}.bias"), &l.bias));
        }
        if let Some(g) = &self.gsm {
            tensors.push(NamedTensor::new("gsm.weight", &g.weight));
            tensors.push(NamedTensor::vector("gsm.bias", &g.bias));
        }
        tensors.push(NamedTensor::new("beta", &self.beta));
        for (name, bn) in [("bn_mu", Some(&self.bn_mu)), ("bn_log_var", Some(&self.bn_lv)), ("bn_decoder", self.bn_dec.as_ref())] {
            if let Some(bn) = bn {
                tensors.push(NamedTensor::vector(format!("{name}.running_mean"), &bn.running_mean));
                tensors.push(NamedTensor::vector(format!("{name}.running_var"), &bn.running_var));
            }
        }
        let meta = serde_json::to_value(&self.config).expect("config serializes");
        Checkpoint::new(meta, tensors)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: NtmConfig =
            serde_json::from_value(ckpt.meta.clone()).map_err(|e| KernelError::Format(format!("config: {e}")))?;
        let mut model = Self::new(&config)?;
        let load = |name: &str, dst: &mut [f64]| -> Result<()> {
            let t = ckpt.get(name)?;
            if t.data.len() != dst.len() {
                return Err(KernelError::Format(format!("{name}: {} values, expected {}", t.data.len(), dst.len())).into());
            }
            dst.copy_from_slice(&t.data);
            Ok(())
        };
        for (i, l) in model.hidden.iter_mut().enumerate() {
            load(&format!("encoder.{i}.weight"), l.weight.data_mut())?;
            load(&format!("encoder.{i}.bias"), &mut l.bias)?;
        }
        for (name, l) in [("mu_head", &mut model.mu_head), ("log_var_head", &mut model.lv_head)] {
            load(&format!("{name}.weight"), l.weight.data_mut())?;
            load(&format!("{name}.bias"), &mut l.bias)?;
        }
        if let Some(g) = model.gsm.as_mut() {
            load("gsm.weight", g.weight.data_mut())?;
            load("gsm.bias", &mut g.bias)?;
        }
        load("beta", model.beta.data_mut())?;
        for (name, bn) in [("bn_mu", Some(&mut model.bn_mu)), ("bn_log_var", Some(&mut model.bn_lv)), ("bn_decoder", model.bn_dec.as_mut())] {
            if let Some(bn) = bn {
                load(&format!("{name}.running_mean"), &mut bn.running_mean)?;
                load(&format!("{name}.running_var"), &mut bn.running_var)?;
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Loss components averaged over one epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub reconstruction: f64,
    pub kl: f64,
    pub triplet: f64,
    pub infonce: f64,
    pub total: f64,
    pub clamped: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub epochs: Vec<EpochStats>,
    pub seconds: f64,
}

/// Splits a shuffled order into batches, folding a trailing single document
/// into the previous batch so batch statistics always see two rows.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("at least one batch") = &order[start..];
    }
    out
}

/// Trains a fresh model on every row of `data`.
pub fn train(config: &NtmConfig, data: &Dataset, sampling: &NegSamplingConfig) -> Result<(NtmModel, TrainingTrace)> {
    config.validate()?;
    sampling.validate(config.num_topics)?;
    if data.is_empty() {
        return Err(ModelError::NoDocuments);
    }
    if data.input.cols() != config.input_dim() {
        return Err(ModelError::Dimension {
            expected: config.input_dim(),
            got: data.input.cols(),
        });
    }
    if sampling.mode == SamplingMode::Encoder && config.model == ModelKind::ZeroShot {
        log::warn!("zeroshot encodes embeddings only; encoder views coincide and the contrastive term is constant");
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = NtmModel::with_rng(config, &mut rng)?;
    let o = &config.optimizer;
    let mut adam = AdamState::new(o.learning_rate, o.beta1, o.beta2, o.eps);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = TrainingTrace::default();
    let hidden = model.last_hidden();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut stats = EpochStats {
            epoch,
            ..EpochStats::default()
        };
        for (b, rows) in batches(&order, config.batch_size).into_iter().enumerate() {
            let batch = data.batch(rows, config, sampling)?;
            let noise = Noise::sample(rows.len(), config.num_topics, hidden, config.dropout, &mut rng);
            let state = model.forward(&batch, &noise, sampling)?;
            if !state.loss.total.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch, batch: b });
            }
            model.zero_grad();
            model.backward(&state, &batch, &noise, sampling)?;
            adam.step(&mut model.params())?;
            if rows.len() > 1 {
                model.commit_batch_norm(&state);
            }
            let w = rows.len() as f64;
            stats.reconstruction += state.loss.reconstruction * w;
            stats.kl += state.loss.kl * w;
            stats.triplet += state.loss.triplet * w;
            stats.infonce += state.loss.infonce * w;
            stats.total += state.loss.total * w;
            stats.clamped += state.loss.clamped;
        }
        let inv = 1.0 / data.len() as f64;
        stats.reconstruction *= inv;
        stats.kl *= inv;
        stats.triplet *= inv;
        stats.infonce *= inv;
        stats.total *= inv;
        log::trace!("epoch {epoch}: loss {:.4}", stats.total);
        trace.epochs.push(stats);
    }
    trace.seconds = start.elapsed().as_secs_f64();
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_config(model: ModelKind) -> NtmConfig {
        NtmConfig {
            hidden: vec![6, 5],
            embedding_dim: if model.needs_embeddings() { 4 } else { 0 },
            ..NtmConfig::new(model, 3, 8)
        }
    }

    fn small_batch(config: &NtmConfig, sampling: &NegSamplingConfig, seed: u64) -> (Batch, Noise) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 5;
        let v = config.vocab_size;
        let mut counts = Tensor2::zeros(n, v);
        for r in 0..n {
            for _ in 0..6 {
                let j = rng.random_range(0..v);
                counts.set(r, j, counts.get(r, j) + 1.0);
            }
        }
        let mut norm = counts.clone();
        for r in 0..n {
            let s: f64 = norm.row(r).iter().sum();
            norm.row_mut(r).iter_mut().for_each(|x| *x /= s);
        }
        let mut tfidf = norm.clone();
        for x in tfidf.data_mut() {
            *x *= rng.random_range(0.5..1.5);
        }
        for r in 0..n {
            let s: f64 = tfidf.row(r).iter().sum();
            tfidf.row_mut(r).iter_mut().for_each(|x| *x /= s);
        }
        let emb = config.model.needs_embeddings().then(|| {
            let mut e = Tensor2::zeros(n, config.embedding_dim);
            e.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
            e
        });
        let data = Dataset::new(counts, norm, tfidf, emb, config).unwrap();
        let rows: Vec<usize> = (0..n).collect();
        let batch = data.batch(&rows, config, sampling).unwrap();
        let noise = Noise::sample(n, config.num_topics, *config.hidden.last().unwrap(), config.dropout, &mut rng);
        (batch, noise)
    }

    #[test]
    fn laplace_prior_values() {
        let (mu, var) = laplace_prior(20, 0.02).unwrap();
        assert!(mu.iter().all(|&m| m == 0.0));
        assert_abs_diff_eq!(var[0], 47.5, epsilon = 1e-12);
        assert_abs_diff_eq!(laplace_prior(2, 1.0).unwrap().1[1], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(laplace_prior(1_000_000, 0.5).unwrap().1[0], 2.0, epsilon = 1e-5);
        assert!(laplace_prior(3, 0.0).is_err());
    }

    #[test]
    fn reparameterize_closed_forms() {
        let mu = Tensor2::from_rows(&[vec![0.5, -1.0]]).unwrap();
        let post = GaussianPosterior {
            mu: mu.clone(),
            log_var: Tensor2::zeros(1, 2),
        };
        assert_eq!(reparameterize(&post, &Tensor2::zeros(1, 2)), mu);
        let z = reparameterize(&post, &Tensor2::filled(1, 2, 1.0));
        assert_eq!(z.row(0), &[1.5, 0.0]);
    }

    #[test]
    fn reparameterize_monte_carlo_mean() {
        let mu = [0.7, -0.3];
        let lv = [0.4f64, -1.2];
        let post = GaussianPosterior {
            mu: Tensor2::from_rows(&[mu.to_vec()]).unwrap(),
            log_var: Tensor2::from_rows(&[lv.to_vec()]).unwrap(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let mut sum = [0.0; 2];
        for _ in 0..draws {
            let mut e = Tensor2::zeros(1, 2);
            e.data_mut().iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
            let z = reparameterize(&post, &e);
            sum[0] += z.get(0, 0);
            sum[1] += z.get(0, 1);
        }
        for k in 0..2 {
            let sigma = (0.5 * lv[k]).exp();
            assert!((sum[k] / draws as f64 - mu[k]).abs() < 3.0 * sigma / (draws as f64).sqrt());
        }
    }

    #[test]
    fn theta_closed_forms() {
        let theta = theta_from_z(&Tensor2::zeros(1, 4));
        assert!(theta.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let theta = theta_from_z(&Tensor2::from_rows(&[vec![10.0, 0.0, 0.0]]).unwrap());
        let expected = 1.0 / (1.0 + 2.0 * (-10.0f64).exp());
        assert_abs_diff_eq!(theta.get(0, 0), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(theta.get(0, 0), 0.99991, epsilon = 1e-5);
    }

    #[test]
    fn decoders_match_brute_force() {
        let beta = Tensor2::from_rows(&[vec![0.3, -1.0, 2.0, 0.1], vec![-0.5, 0.4, 0.0, 1.2]]).unwrap();
        let theta = Tensor2::from_rows(&[vec![0.7, 0.3]]).unwrap();
        let poe = decode_product_of_experts(&theta, &beta).unwrap();
        let logits: Vec<f64> = (0..4).map(|j| 0.7 * beta.get(0, j) + 0.3 * beta.get(1, j)).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for j in 0..4 {
            assert_abs_diff_eq!(poe.get(0, j), logits[j].exp() / z, epsilon = 1e-12);
        }
        // one-hot θ selects a normalized topic row exactly
        let e1 = Tensor2::from_rows(&[vec![0.0, 1.0]]).unwrap();
        assert_eq!(decode_mixture(&e1, &beta).unwrap().row(0), softmax_rows(&beta).row(1));
        // a single topic ignores θ
        let b1 = Tensor2::from_rows(&[beta.row(0).to_vec()]).unwrap();
        let one = Tensor2::filled(1, 1, 1.0);
        assert_eq!(decode_product_of_experts(&one, &b1).unwrap().row(0), softmax_rows(&b1).row(0));
    }

    #[test]
    fn elbo_closed_forms() {
        let (pm, pv) = laplace_prior(4, 0.02).unwrap();
        let lv: Vec<f64> = pv.iter().map(|v| v.ln()).collect();
        assert_abs_diff_eq!(kl_divergence(&pm, &lv, &pm, &pv), 0.0, epsilon = 1e-12);
        let v = 50;
        let mut x = vec![0.0; v];
        x[7] = 1.0;
        let (rl, clamped) = reconstruction_loss(&x, &vec![1.0 / v as f64; v]);
        assert_abs_diff_eq!(rl, (v as f64).ln(), epsilon = 1e-12);
        assert_eq!(clamped, 0);
        let mut recon = vec![0.0; v];
        recon[0] = 1.0;
        let (rl, clamped) = reconstruction_loss(&x, &recon);
        assert_abs_diff_eq!(rl, -(RECON_FLOOR.ln()), epsilon = 1e-9);
        assert_eq!(clamped, 1);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mu = [0.4, -1.1, 2.0];
        let lv = [0.2, -0.7, 1.1];
        let (pm, pv) = laplace_prior(3, 0.5).unwrap();
        let exact = kl_divergence(&mu, &lv, &pm, &pv);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let mut log_ratio = 0.0;
            for k in 0..3 {
                let e: f64 = rng.sample(StandardNormal);
                let s = (0.5 * lv[k]).exp();
                let z = mu[k] + s * e;
                let lq = -0.5 * e * e - s.ln();
                let lp = -0.5 * (z - pm[k]).powi(2) / pv[k] - 0.5 * pv[k].ln();
                log_ratio += lq - lp;
            }
            acc += log_ratio;
        }
        let mc = acc / draws as f64;
        assert!((mc - exact).abs() < 0.01 * exact, "mc {mc} exact {exact}");
    }

    #[test]
    fn zero_heads_give_standard_posterior_and_uniform_theta() {
        let cfg = small_config(ModelKind::ProdLda);
        let mut m = NtmModel::new(&cfg).unwrap();
        for head in [&mut m.mu_head, &mut m.lv_head] {
            head.weight.fill(0.0);
        }
        let x = Tensor2::from_rows(&[vec![1.0; 8], vec![0.5; 8]]).unwrap();
        let post = m.encode(&x).unwrap();
        assert!(post.mu.data().iter().all(|&v| v == 0.0));
        assert!(post.log_var.data().iter().all(|&v| v == 0.0));
        let theta = m.infer_theta(&x).unwrap();
        assert!(theta.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn identical_documents_get_identical_rows() {
        let cfg = small_config(ModelKind::NeuralLda);
        let m = NtmModel::new(&cfg).unwrap();
        let row = vec![0.1, 0.0, 0.3, 0.0, 0.2, 0.0, 0.4, 0.0];
        let x = Tensor2::from_rows(&[row.clone(), row]).unwrap();
        let post = m.encode(&x).unwrap();
        assert_eq!(post.mu.row(0), post.mu.row(1));
        let theta = m.infer_theta(&x).unwrap();
        assert_eq!(theta.row(0), theta.row(1));
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let m = NtmModel::new(&small_config(ModelKind::ProdLda)).unwrap();
        assert!(matches!(m.encode(&Tensor2::zeros(1, 3)), Err(ModelError::Dimension { expected: 8, got: 3 })));
    }

    #[test]
    fn top_words_ranking() {
        let cfg = small_config(ModelKind::ProdLda);
        let mut m = NtmModel::new(&cfg).unwrap();
        m.beta.fill(0.0);
        m.beta.set(1, 5, 1.0);
        let vocab = Vocabulary::from_words((0..8).map(|i| format!("w{i}")).collect());
        let topics = m.top_words(3, &vocab);
        assert_eq!(topics.topics[1], vec!["w5", "w0", "w1"]);
        let all = m.top_words(8, &vocab);
        let mut sorted = all.topics[0].clone();
        sorted.sort();
        let mut words = vocab.words().to_vec();
        words.sort();
        assert_eq!(sorted, words);
    }

    #[test]
    fn batches_never_end_with_a_single_row() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(|x| x.len()).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(batches(&order[..1], 4).len(), 1);
    }

    #[test]
    fn epochs_zero_is_rejected() {
        let cfg = NtmConfig {
            epochs: 0,
            ..small_config(ModelKind::ProdLda)
        };
        assert!(matches!(NtmModel::new(&cfg), Err(ModelError::Config(_))));
    }

    #[test]
    fn decoder_sampling_rejects_m_at_least_t() {
        let cfg = small_config(ModelKind::ProdLda);
        let sampling = NegSamplingConfig::decoder(3, 0.5);
        let (batch, noise) = small_batch(&cfg, &NegSamplingConfig::none(), 1);
        let m = NtmModel::new(&cfg).unwrap();
        assert!(matches!(
            m.decoder_negative_step(&batch, &noise, &sampling),
            Err(ModelError::Sampling(NegSamplingError::TopTopics { .. }))
        ));
    }

    #[test]
    fn tiny_lambda_recovers_plain_elbo() {
        let cfg = small_config(ModelKind::ProdLda);
        let (batch, noise) = small_batch(&cfg, &NegSamplingConfig::none(), 2);
        let m = NtmModel::new(&cfg).unwrap();
        let plain = m.forward(&batch, &noise, &NegSamplingConfig::none()).unwrap().loss;
        let neg = m.decoder_negative_step(&batch, &noise, &NegSamplingConfig::decoder(1, 1e-9)).unwrap();
        assert!((neg.total - plain.total).abs() <= 1e-6 * neg.triplet.max(1e-300));
        assert_abs_diff_eq!(plain.total, plain.reconstruction + plain.kl, epsilon = 1e-12);
    }

    fn check_all(sampling: NegSamplingConfig) {
        for kind in ModelKind::ALL {
            let cfg = small_config(kind);
            let (batch, noise) = small_batch(&cfg, &sampling, 3);
            let m = NtmModel::new(&cfg).unwrap();
            let err = m
                .gradient_check(&batch, &noise, &sampling, GradCheck { max_coords: 400, floor: 1e-5, ..GradCheck::default() })
                .unwrap();
            assert!(err < 1e-4, "{kind} / {:?}: {err}", sampling.mode);
        }
    }

    #[test]
    fn gradients_without_sampling() {
        check_all(NegSamplingConfig::none());
    }

    #[test]
    fn gradients_with_decoder_sampling() {
        check_all(NegSamplingConfig::decoder(1, 0.5));
        check_all(NegSamplingConfig::decoder(2, 1.0));
    }

    #[test]
    fn gradients_with_encoder_sampling() {
        check_all(NegSamplingConfig::encoder(2, 0.5));
    }

    #[test]
    fn stop_gradient_changes_only_the_negative_branch() {
        let cfg = small_config(ModelKind::ProdLda);
        let mut sampling = NegSamplingConfig::decoder(1, 1.0);
        let (batch, noise) = small_batch(&cfg, &sampling, 4);
        let m = NtmModel::new(&cfg).unwrap();
        let grads = |s: &NegSamplingConfig| {
            let mut m = m.clone();
            m.zero_grad();
            let st = m.forward(&batch, &noise, s).unwrap();
            m.backward(&st, &batch, &noise, s).unwrap();
            (st.loss.total, m.grad_vector())
        };
        let (l_full, g_full) = grads(&sampling);
        sampling.stop_gradient = true;
        let (l_stop, g_stop) = grads(&sampling);
        assert_eq!(l_full, l_stop);
        assert!(g_full.iter().zip(&g_stop).any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = NtmConfig {
            epochs: 3,
            batch_size: 4,
            ..small_config(ModelKind::ProdLda)
        };
        let (batch, _) = small_batch(&cfg, &NegSamplingConfig::none(), 9);
        let data = Dataset::new(batch.counts.clone(), batch.target.clone(), batch.target.clone(), None, &cfg).unwrap();
        let (a, ta) = train(&cfg, &data, &NegSamplingConfig::decoder(1, 0.5)).unwrap();
        let (b, tb) = train(&cfg, &data, &NegSamplingConfig::decoder(1, 0.5)).unwrap();
        assert_eq!(a.beta, b.beta);
        assert_eq!(ta.epochs, tb.epochs);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [ModelKind::Gsm, ModelKind::Combined] {
            let cfg = small_config(kind);
            let mut m = NtmModel::new(&cfg).unwrap();
            m.bn_mu.running_mean[1] = 0.123456789;
            let path = dir.path().join(format!("{kind}.json"));
            m.save(&path).unwrap();
            let mut back = NtmModel::load(&path).unwrap();
            assert_eq!(back.param_vector(), m.param_vector());
            assert_eq!(back.bn_mu.running_mean, m.bn_mu.running_mean);
            assert_eq!(back.config, m.config);
        }
    }

    #[test]
    fn theta_tsv_and_topic_json() {
        let dir = tempfile::tempdir().unwrap();
        let theta = Tensor2::from_rows(&[vec![0.25, 0.75], vec![0.5, 0.5]]).unwrap();
        let path = dir.path().join("theta.tsv");
        write_theta_tsv(&path, &[3, 8], &theta).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "3\t0.25 0.75\n8\t0.5 0.5\n");
        let topics = TopicSet::new(vec![vec!["a".into(), "b".into()]]);
        let path = dir.path().join("topics.json");
        topics.save(&path).unwrap();
        let raw: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(raw, serde_json::json!([["a", "b"]]));
        assert_eq!(TopicSet::load(&path).unwrap(), topics);
    }

    proptest! {
        #[test]
        fn softmax_theta_is_permutation_equivariant(z in prop::collection::vec(-5.0f64..5.0, 4)) {
            let perm = [2usize, 0, 3, 1];
            let t = theta_from_z(&Tensor2::from_rows(&[z.clone()]).unwrap());
            let pz: Vec<f64> = perm.iter().map(|&i| z[i]).collect();
            let pt = theta_from_z(&Tensor2::from_rows(&[pz]).unwrap());
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((pt.get(0, j) - t.get(0, i)).abs() < 1e-15);
            }
        }

        #[test]
        fn kl_is_nonnegative(mu in prop::collection::vec(-10.0f64..10.0, 5), lv in prop::collection::vec(-8.0f64..8.0, 5), alpha in 0.01f64..2.0) {
            let (pm, pv) = laplace_prior(5, alpha).unwrap();
            prop_assert!(kl_divergence(&mu, &lv, &pm, &pv) >= -1e-9);
        }

        #[test]
        fn outputs_stay_on_simplices(seed in 0u64..1000, kind_idx in 0usize..5) {
            let kind = ModelKind::ALL[kind_idx];
            let cfg = NtmConfig { seed, ..small_config(kind) };
            let (batch, noise) = small_batch(&cfg, &NegSamplingConfig::none(), seed);
            let m = NtmModel::new(&cfg).unwrap();
            let st = m.forward(&batch, &noise, &NegSamplingConfig::none()).unwrap();
            for t in [st.theta(), st.reconstruction()] {
                for row in t.iter_rows() {
                    prop_assert!(row.iter().all(|&v| v >= 0.0));
                    prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                }
            }
            let recon = m.decode(&m.infer_theta(&batch.input).unwrap()).unwrap();
            for row in recon.iter_rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
