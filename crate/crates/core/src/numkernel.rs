//! Dense f64 kernels with hand-written backward passes.
//!
//! Everything a VAE topic model needs and nothing more: a row-major matrix
//! type, fully connected layers with softplus/identity activations, an
//! affine-free batch normalization, row softmax, Adam, a central-difference
//! gradient checker and a JSON checkpoint format.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, KernelError>;

fn shape_err(op: &'static str, expected: impl fmt::Display, got: impl fmt::Display) -> KernelError {
    KernelError::ShapeMismatch {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Tensor2::from_vec",
                format!("{} values", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(shape_err(
                    "Tensor2::from_rows",
                    format!("{cols} columns"),
                    format!("{} columns in row {i}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so guard the degenerate width
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor2 {
        let mut out = Tensor2::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    /// `[self | other]` column concatenation.
    pub fn hconcat(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.rows != other.rows {
            return Err(shape_err("hconcat", format!("{} rows", self.rows), format!("{} rows", other.rows)));
        }
        let cols = self.cols + other.cols;
        let mut out = Tensor2::zeros(self.rows, cols);
        for r in 0..self.rows {
            let dst = out.row_mut(r);
            dst[..self.cols].copy_from_slice(self.row(r));
            dst[self.cols..].copy_from_slice(other.row(r));
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor2 {
        let mut out = Tensor2::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(KernelError::NonFinite(what.to_string()))
        }
    }

    /// `self · other`
    pub fn matmul(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.rows {
            return Err(shape_err(
                "matmul",
                format!("lhs cols == rhs rows ({})", self.cols),
                format!("{}x{} · {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Tensor2::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
            for (k, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let b = other.row(k);
                for (d, &bv) in dst.iter_mut().zip(b) {
                    *d += av * bv;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.cols != other.cols {
            return Err(shape_err(
                "matmul_t",
                format!("lhs cols == rhs cols ({})", self.cols),
                format!("{}x{} · ({}x{})ᵀ", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Tensor2::zeros(self.rows, other.rows);
        let mut nz = Vec::with_capacity(self.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            nz.clear();
            nz.extend((0..a.len()).filter(|&j| a[j] != 0.0));
            let dense = nz.len() * 2 > a.len();
            for o in 0..other.rows {
                let b = other.row(o);
                let s = if dense {
                    dot(a, b)
                } else {
                    nz.iter().map(|&j| a[j] * b[j]).sum()
                };
                out.data[r * other.rows + o] = s;
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`, accumulated into `acc` (shape `self.cols × other.cols`).
    pub fn add_t_matmul_into(&self, other: &Tensor2, acc: &mut Tensor2) -> Result<()> {
        if self.rows != other.rows || acc.rows != self.cols || acc.cols != other.cols {
            return Err(shape_err(
                "add_t_matmul_into",
                format!("({}x{})ᵀ · {}x{} into {}x{}", self.rows, self.cols, self.rows, other.cols, self.cols, other.cols),
                format!("rhs {}x{}, acc {}x{}", other.rows, other.cols, acc.rows, acc.cols),
            ));
        }
        let mut nz = Vec::with_capacity(other.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let b = other.row(r);
            nz.clear();
            nz.extend((0..b.len()).filter(|&j| b[j] != 0.0));
            let sparse = nz.len() * 2 <= b.len();
            for (i, &av) in a.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let dst = &mut acc.data[i * other.cols..(i + 1) * other.cols];
                if sparse {
                    for &j in &nz {
                        dst[j] += av * b[j];
                    }
                } else {
                    for (d, &bv) in dst.iter_mut().zip(b) {
                        *d += av * bv;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Tensor2) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err("add_assign", format!("{:?}", self.shape()), format!("{:?}", other.shape())));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn hadamard(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.shape() != other.shape() {
            return Err(shape_err("hadamard", format!("{:?}", self.shape()), format!("{:?}", other.shape())));
        }
        Ok(Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        })
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place stable softmax of one vector.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    out
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(t: &Tensor2) -> Tensor2 {
    let mut out = t.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Given `y = softmax(x)` row-wise and `dy`, returns `dx`.
pub fn softmax_rows_backward(y: &Tensor2, dy: &Tensor2) -> Result<Tensor2> {
    if y.shape() != dy.shape() {
        return Err(shape_err("softmax_rows_backward", format!("{:?}", y.shape()), format!("{:?}", dy.shape())));
    }
    let mut dx = Tensor2::zeros(y.rows, y.cols);
    for r in 0..y.rows {
        let yr = y.row(r);
        let gr = dy.row(r);
        let inner = dot(yr, gr);
        for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - inner);
        }
    }
    Ok(dx)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Softplus,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Softplus => softplus(x),
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Softplus => sigmoid(pre),
        }
    }
}

/// What a layer needs to run its backward pass.
#[derive(Clone, Debug)]
pub struct LayerCache {
    input: Tensor2,
    pre_activation: Tensor2,
}

/// Fully connected layer `activation(x·Wᵀ + b)` with gradient accumulators.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
    pub grad_weight: Tensor2,
    pub grad_bias: Vec<f64>,
    cache: Option<LayerCache>,
}

impl DenseLayer {
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        Self {
            weight: Tensor2::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
            activation,
            grad_weight: Tensor2::zeros(out_dim, in_dim),
            grad_bias: vec![0.0; out_dim],
            cache: None,
        }
    }

    /// Uniform Glorot initialization, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut R) -> Self {
        let mut layer = Self::zeros(in_dim, out_dim, activation);
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        for w in layer.weight.data_mut() {
            *w = rng.random_range(-limit..limit);
        }
        layer
    }

    pub fn from_parts(weight: Tensor2, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weight.rows() {
            return Err(shape_err("DenseLayer::from_parts", format!("bias of {}", weight.rows()), bias.len()));
        }
        let (o, i) = weight.shape();
        Ok(Self {
            weight,
            bias,
            activation,
            grad_weight: Tensor2::zeros(o, i),
            grad_bias: vec![0.0; o],
            cache: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Forward pass that keeps its cache inside the layer.
    pub fn forward(&mut self, input: &Tensor2) -> Result<Tensor2> {
        let (out, cache) = self.forward_cached(input)?;
        self.cache = Some(cache);
        Ok(out)
    }

    /// Accumulates parameter gradients from the cached forward and returns `∂L/∂input`.
    pub fn backward(&mut self, upstream: &Tensor2) -> Result<Tensor2> {
        let cache = self.cache.take().ok_or(KernelError::BackwardBeforeForward)?;
        let out = self.backward_with(&cache, upstream, true);
        self.cache = Some(cache);
        Ok(out?.expect("input gradient requested"))
    }

    /// Forward pass returning an explicit cache; lets one layer serve several
    /// inputs before any backward runs.
    pub fn forward_cached(&self, input: &Tensor2) -> Result<(Tensor2, LayerCache)> {
        if input.cols() != self.in_dim() {
            return Err(shape_err("DenseLayer::forward", format!("{} input columns", self.in_dim()), input.cols()));
        }
        let mut pre = input.matmul_t(&self.weight)?;
        for r in 0..pre.rows() {
            for (v, b) in pre.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        let out = match self.activation {
            Activation::Identity => pre.clone(),
            act => pre.map(|x| act.apply(x)),
        };
        Ok((
            out,
            LayerCache {
                input: input.clone(),
                pre_activation: pre,
            },
        ))
    }

    /// Accumulates `∂L/∂W`, `∂L/∂b`; returns `∂L/∂input` when asked for it.
    pub fn backward_with(&mut self, cache: &LayerCache, upstream: &Tensor2, want_input_grad: bool) -> Result<Option<Tensor2>> {
        let expected = (cache.input.rows(), self.out_dim());
        if upstream.shape() != expected {
            return Err(shape_err("DenseLayer::backward", format!("{expected:?}"), format!("{:?}", upstream.shape())));
        }
        let delta = match self.activation {
            Activation::Identity => upstream.clone(),
            act => {
                let mut d = upstream.clone();
                for (g, &p) in d.data_mut().iter_mut().zip(cache.pre_activation.data()) {
                    *g *= act.derivative(p);
                }
                d
            }
        };
        delta.add_t_matmul_into(&cache.input, &mut self.grad_weight)?;
        for r in 0..delta.rows() {
            for (gb, d) in self.grad_bias.iter_mut().zip(delta.row(r)) {
                *gb += d;
            }
        }
        if want_input_grad {
            Ok(Some(delta.matmul(&self.weight)?))
        } else {
            Ok(None)
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad_weight.fill(0.0);
        self.grad_bias.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn params<'a>(&'a mut self, prefix: &str) -> [ParamView<'a>; 2] {
        [
            ParamView {
                name: format!("{prefix}.weight"),
                value: self.weight.data_mut(),
                grad: self.grad_weight.data_mut(),
            },
            ParamView {
                name: format!("{prefix}.bias"),
                value: &mut self.bias,
                grad: &mut self.grad_bias,
            },
        ]
    }
}

/// Batch statistics captured by a training-mode batch-norm forward.
#[derive(Clone, Debug)]
pub struct BatchNormCache {
    normalized: Tensor2,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var_unbiased: Vec<f64>,
}

/// Batch normalization without learnable scale or shift.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Weight kept on the old running statistic per update.
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(dim: usize, momentum: f64, eps: f64) -> Self {
        Self {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum,
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward_train(&self, x: &Tensor2) -> Result<(Tensor2, BatchNormCache)> {
        if x.cols() != self.dim() {
            return Err(shape_err("BatchNorm::forward", self.dim(), x.cols()));
        }
        let n = x.rows() as f64;
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for row in x.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in x.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let sum_sq = var.clone();
        var.iter_mut().for_each(|s| *s /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((o, m), is) in out.row_mut(r).iter_mut().zip(&mean).zip(&inv_std) {
                *o = (*o - m) * is;
            }
        }
        let unbiased = if x.rows() > 1 {
            sum_sq.iter().map(|s| s / (n - 1.0)).collect()
        } else {
            vec![0.0; d]
        };
        Ok((
            out.clone(),
            BatchNormCache {
                normalized: out,
                inv_std,
                batch_mean: mean,
                batch_var_unbiased: unbiased,
            },
        ))
    }

    pub fn forward_eval(&self, x: &Tensor2) -> Result<Tensor2> {
        if x.cols() != self.dim() {
            return Err(shape_err("BatchNorm::forward_eval", self.dim(), x.cols()));
        }
        let mut out = x.clone();
        for r in 0..out.rows() {
            for ((o, m), v) in out.row_mut(r).iter_mut().zip(&self.running_mean).zip(&self.running_var) {
                *o = (*o - m) / (v + self.eps).sqrt();
            }
        }
        Ok(out)
    }

    pub fn backward(&self, cache: &BatchNormCache, dy: &Tensor2) -> Result<Tensor2> {
        if dy.shape() != cache.normalized.shape() {
            return Err(shape_err("BatchNorm::backward", format!("{:?}", cache.normalized.shape()), format!("{:?}", dy.shape())));
        }
        let n = dy.rows() as f64;
        let d = self.dim();
        let mut sum_dy = vec![0.0; d];
        let mut sum_dy_xhat = vec![0.0; d];
        for r in 0..dy.rows() {
            for (c, (&g, &xh)) in dy.row(r).iter().zip(cache.normalized.row(r)).enumerate() {
                sum_dy[c] += g;
                sum_dy_xhat[c] += g * xh;
            }
        }
        let mut dx = Tensor2::zeros(dy.rows(), d);
        for r in 0..dy.rows() {
            let xr = cache.normalized.row(r);
            let gr = dy.row(r);
            for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
                *out = cache.inv_std[c] / n * (n * gr[c] - sum_dy[c] - xr[c] * sum_dy_xhat[c]);
            }
        }
        Ok(dx)
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn commit(&mut self, cache: &BatchNormCache) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&cache.batch_mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&cache.batch_var_unbiased) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// A named parameter buffer paired with its gradient.
#[derive(Debug)]
pub struct ParamView<'a> {
    pub name: String,
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// Adam hyperparameters plus per-parameter moment buffers.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(2e-3, 0.9, 0.999, 1e-8)
    }
}

impl AdamState {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            learning_rate,
            beta1,
            beta2,
            eps,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// One bias-corrected Adam update over every parameter.
    ///
    /// Gradients are validated before anything is written, so a non-finite
    /// gradient leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut [ParamView<'_>]) -> Result<()> {
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.value.len()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != params.len() {
            return Err(shape_err("AdamState::step", format!("{} parameters", self.first_moment.len()), params.len()));
        }
        for (p, m) in params.iter().zip(&self.first_moment) {
            if p.value.len() != m.len() || p.grad.len() != m.len() {
                return Err(shape_err("AdamState::step", format!("{} values for {}", m.len(), p.name), p.value.len()));
            }
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(KernelError::NonFinite(format!("gradient of {}", p.name)));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let inv_c1 = 1.0 / (1.0 - self.beta1.powi(t));
        let inv_c2 = 1.0 / (1.0 - self.beta2.powi(t));
        let (b1, b2) = (self.beta1, self.beta2);
        for ((p, m), v) in params.iter_mut().zip(&mut self.first_moment).zip(&mut self.second_moment) {
            for (((w, &g), m), v) in p.value.iter_mut().zip(p.grad.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= self.learning_rate * (*m * inv_c1) / ((*v * inv_c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Settings for [`gradient_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Coordinates compared; all of them when the parameter vector is shorter.
    pub max_coords: usize,
    pub seed: u64,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 200,
            seed: 0,
            floor: 1e-6,
        }
    }
}

/// Compares `analytic` against central differences of `loss` around `params`
/// and returns the worst relative error `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check<F>(mut loss: F, params: &[f64], analytic: &[f64], cfg: GradCheck) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient length must match parameters");
    let coords: Vec<usize> = if params.len() <= cfg.max_coords {
        (0..params.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut v = sample(&mut rng, params.len(), cfg.max_coords).into_vec();
        v.sort_unstable();
        v
    };
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in coords {
        let orig = x[i];
        x[i] = orig + cfg.step;
        let up = loss(&x);
        x[i] = orig - cfg.step;
        let down = loss(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * cfg.step);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
        if err > worst {
            log::debug!("gradient check: coordinate {i}, analytic {a:e}, numeric {numeric:e}");
            worst = err;
        }
    }
    worst
}

/// Named tensor inside a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, t: &Tensor2) -> Self {
        Self {
            name: name.into(),
            rows: t.rows(),
            cols: t.cols(),
            data: t.data().to_vec(),
        }
    }

    pub fn vector(name: impl Into<String>, v: &[f64]) -> Self {
        Self {
            name: name.into(),
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor2> {
        Tensor2::from_vec(self.rows, self.cols, self.data.clone())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Versioned JSON checkpoint: shapes plus row-major values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value, tensors: Vec<NamedTensor>) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            meta,
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Result<&NamedTensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| KernelError::Format(format!("missing tensor {name}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(w, self).map_err(|e| KernelError::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        let ck: Checkpoint = serde_json::from_reader(r).map_err(|e| KernelError::Format(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(KernelError::Format(format!("unsupported checkpoint version {}", ck.version)));
        }
        for t in &ck.tensors {
            if t.data.len() != t.rows * t.cols {
                return Err(KernelError::Format(format!("tensor {} has {} values for {}x{}", t.name, t.data.len(), t.rows, t.cols)));
            }
        }
        Ok(ck)
    }
}
