//! Negative sampling for VAE topic models.
//!
//! Decoder side: zero the `M` strongest topics of θ, renormalize, decode the
//! perturbed vector into a "negative" document and keep the real
//! reconstruction closer to the input than to that negative with a triplet
//! margin loss. Encoder side: build positive/negative views of a document
//! from its tf-idf vector and contrast their latent codes with InfoNCE.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkernel::{dot, softplus};

#[derive(Debug, Error, PartialEq)]
pub enum NegSamplingError {
    #[error("M = {top_m} must satisfy 1 <= M < T = {num_topics}")]
    TopTopics { top_m: usize, num_topics: usize },
    #[error("lambda = {0} must lie in (0, 1]")]
    Lambda(f64),
    #[error("margin = {0} must be positive")]
    Margin(f64),
    #[error("eta = {0} must be positive")]
    Eta(f64),
    #[error("k = {k} must be smaller than the {nonzero} nonzero entries")]
    SalientCount { k: usize, nonzero: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    #[default]
    None,
    Decoder,
    Encoder,
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplingMode::None => "none",
            SamplingMode::Decoder => "decoder",
            SamplingMode::Encoder => "encoder",
        })
    }
}

impl FromStr for SamplingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(SamplingMode::None),
            "decoder" => Ok(SamplingMode::Decoder),
            "encoder" => Ok(SamplingMode::Encoder),
            other => Err(format!("unknown sampling mode {other:?} (none|decoder|encoder)")),
        }
    }
}

/// What the triplet loss uses as the positive sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TripletTarget {
    /// L1-normalized bag of words, on the same simplex as the reconstruction.
    #[default]
    BowNormalized,
    BowCount,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NegSamplingConfig {
    pub mode: SamplingMode,
    /// Top topics zeroed in θ (decoder mode).
    #[serde(rename = "M")]
    pub top_m: usize,
    /// Triplet-loss weight.
    pub lambda: f64,
    pub margin: f64,
    /// Salient words removed to build encoder views.
    pub k: usize,
    /// InfoNCE hardness weight on the negative.
    pub eta: f64,
    /// Treat the negative reconstruction as a constant in backprop.
    pub stop_gradient: bool,
    pub triplet_target: TripletTarget,
}

impl Default for NegSamplingConfig {
    fn default() -> Self {
        Self {
            mode: SamplingMode::None,
            top_m: 1,
            lambda: 0.5,
            margin: 1.0,
            k: 1,
            eta: 0.5,
            stop_gradient: false,
            triplet_target: TripletTarget::default(),
        }
    }
}

impl NegSamplingConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn decoder(top_m: usize, lambda: f64) -> Self {
        Self {
            mode: SamplingMode::Decoder,
            top_m,
            lambda,
            ..Self::default()
        }
    }

    pub fn encoder(k: usize, eta: f64) -> Self {
        Self {
            mode: SamplingMode::Encoder,
            k,
            eta,
            ..Self::default()
        }
    }

    /// Checks the fields the active mode depends on.
    pub fn validate(&self, num_topics: usize) -> Result<(), NegSamplingError> {
        match self.mode {
            SamplingMode::None => Ok(()),
            SamplingMode::Decoder => {
                if self.top_m < 1 || self.top_m >= num_topics {
                    return Err(NegSamplingError::TopTopics {
                        top_m: self.top_m,
                        num_topics,
                    });
                }
                if !(self.lambda > 0.0 && self.lambda <= 1.0) {
                    return Err(NegSamplingError::Lambda(self.lambda));
                }
                if !(self.margin > 0.0) {
                    return Err(NegSamplingError::Margin(self.margin));
                }
                Ok(())
            }
            SamplingMode::Encoder => {
                if !(self.eta > 0.0) {
                    return Err(NegSamplingError::Eta(self.eta));
                }
                Ok(())
            }
        }
    }
}

/// θ with its top-`M` topics removed.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedTheta {
    pub theta_neg: Vec<f64>,
    /// `false` at the zeroed positions.
    pub keep: Vec<bool>,
    /// Mass left after zeroing, before renormalization.
    pub remaining_mass: f64,
    /// All mass sat in the top `M`; output is uniform over the complement.
    pub degenerate: bool,
}

/// Indices of the `m` largest entries; ties go to the lower index.
pub fn top_indices(values: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

pub const DEGENERATE_MASS: f64 = 1e-12;

/// Zeroes the `m` largest entries of θ and renormalizes the rest.
pub fn perturb_theta(theta: &[f64], m: usize) -> Result<PerturbedTheta, NegSamplingError> {
    let t = theta.len();
    if m >= t {
        return Err(NegSamplingError::TopTopics { top_m: m, num_topics: t });
    }
    let mut keep = vec![true; t];
    for i in top_indices(theta, m) {
        keep[i] = false;
    }
    let remaining_mass: f64 = theta.iter().zip(&keep).filter(|(_, &k)| k).map(|(v, _)| v).sum();
    if remaining_mass < DEGENERATE_MASS {
        log::debug!("theta mass {remaining_mass:e} outside the top {m}; using uniform negative");
        let u = 1.0 / (t - m) as f64;
        let theta_neg = keep.iter().map(|&k| if k { u } else { 0.0 }).collect();
        return Ok(PerturbedTheta {
            theta_neg,
            keep,
            remaining_mass,
            degenerate: true,
        });
    }
    let theta_neg = theta
        .iter()
        .zip(&keep)
        .map(|(&v, &k)| if k { v / remaining_mass } else { 0.0 })
        .collect();
    Ok(PerturbedTheta {
        theta_neg,
        keep,
        remaining_mass,
        degenerate: false,
    })
}

/// Gradient of a loss w.r.t. θ given its gradient w.r.t. the perturbed θ.
pub fn perturb_theta_backward(p: &PerturbedTheta, grad_neg: &[f64]) -> Vec<f64> {
    if p.degenerate {
        return vec![0.0; grad_neg.len()];
    }
    let inner = dot(grad_neg, &p.theta_neg);
    grad_neg
        .iter()
        .zip(&p.keep)
        .map(|(&g, &k)| if k { (g - inner) / p.remaining_mass } else { 0.0 })
        .collect()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `max(‖x̂ − x‖₂ − ‖x̂ − x̂_neg‖₂ + margin, 0)` with the reconstruction as anchor.
pub fn triplet_loss(recon: &[f64], bow: &[f64], recon_neg: &[f64], margin: f64) -> f64 {
    (euclidean(recon, bow) - euclidean(recon, recon_neg) + margin).max(0.0)
}

/// Gradients of [`triplet_loss`] w.r.t. the anchor and the negative.
///
/// Zero-length difference vectors contribute a zero subgradient.
pub fn triplet_loss_backward(recon: &[f64], bow: &[f64], recon_neg: &[f64], margin: f64) -> (Vec<f64>, Vec<f64>) {
    let n = recon.len();
    if triplet_loss(recon, bow, recon_neg, margin) <= 0.0 {
        return (vec![0.0; n], vec![0.0; n]);
    }
    let d_pos = euclidean(recon, bow);
    let d_neg = euclidean(recon, recon_neg);
    let mut g_anchor = vec![0.0; n];
    let mut g_neg = vec![0.0; n];
    for i in 0..n {
        if d_pos > 0.0 {
            g_anchor[i] += (recon[i] - bow[i]) / d_pos;
        }
        if d_neg > 0.0 {
            let u = (recon[i] - recon_neg[i]) / d_neg;
            g_anchor[i] -= u;
            g_neg[i] += u;
        }
    }
    (g_anchor, g_neg)
}

/// `L_RL + L_KL + λ · L_TL`
pub fn combined_loss(reconstruction: f64, kl: f64, triplet: f64, lambda: f64) -> f64 {
    reconstruction + kl + lambda * triplet
}

/// Positive and negative encoder views of one tf-idf vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderSamples {
    pub positive: Vec<f64>,
    pub negative: Vec<f64>,
}

fn zero_and_renormalize(x: &[f64], drop: &[usize]) -> Vec<f64> {
    let mut out = x.to_vec();
    for &i in drop {
        out[i] = 0.0;
    }
    let s: f64 = out.iter().sum();
    if s > 0.0 {
        out.iter_mut().for_each(|v| *v /= s);
    }
    out
}

/// The negative view loses the `k` most salient words, the positive view the
/// `k` least salient nonzero ones; both are renormalized.
pub fn make_encoder_samples(x_tfidf: &[f64], k: usize) -> Result<EncoderSamples, NegSamplingError> {
    if k == 0 {
        return Ok(EncoderSamples {
            positive: x_tfidf.to_vec(),
            negative: x_tfidf.to_vec(),
        });
    }
    let mut nonzero: Vec<usize> = (0..x_tfidf.len()).filter(|&i| x_tfidf[i] != 0.0).collect();
    if k >= nonzero.len() {
        return Err(NegSamplingError::SalientCount { k, nonzero: nonzero.len() });
    }
    // most salient first, ties to the lower index
    nonzero.sort_by(|&a, &b| x_tfidf[b].total_cmp(&x_tfidf[a]).then(a.cmp(&b)));
    let top = &nonzero[..k];
    let bottom = &nonzero[nonzero.len() - k..];
    Ok(EncoderSamples {
        positive: zero_and_renormalize(x_tfidf, bottom),
        negative: zero_and_renormalize(x_tfidf, top),
    })
}

/// `−log(exp(z·z⁺) / (exp(z·z⁺) + η·exp(z·z⁻)))`, evaluated as
/// `softplus(ln η + z·z⁻ − z·z⁺)`.
pub fn infonce_loss(z: &[f64], z_pos: &[f64], z_neg: &[f64], eta: f64) -> f64 {
    softplus(eta.ln() + dot(z, z_neg) - dot(z, z_pos))
}

/// Gradients of [`infonce_loss`] w.r.t. `(z, z⁺, z⁻)`.
pub fn infonce_backward(z: &[f64], z_pos: &[f64], z_neg: &[f64], eta: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let s = crate::numkernel::sigmoid(eta.ln() + dot(z, z_neg) - dot(z, z_pos));
    let dz = z_neg.iter().zip(z_pos).map(|(n, p)| s * (n - p)).collect();
    let dpos = z.iter().map(|v| -s * v).collect();
    let dneg = z.iter().map(|v| s * v).collect();
    (dz, dpos, dneg)
}
