//! Forward and backward passes for the building blocks of the metric network.
//!
//! Batch normalization comes in two flavours sharing one kernel:
//! [`DsbnLayer`] keeps one set of running statistics per [`DomainTag`] while
//! sharing the scale and shift, and [`BatchNormLayer`] keeps a single set for
//! both domains. Training-mode forward passes always normalize with the
//! statistics of the batch they are given; the layers differ in which running
//! statistics that batch updates and which ones eval mode reads.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{row_stats, Matrix, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    pub const ALL: [DomainTag; 2] = [DomainTag::Source, DomainTag::Target];

    pub fn index(self) -> usize {
        match self {
            DomainTag::Source => 0,
            DomainTag::Target => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Affine map `y = x Wᵀ + b` with `W` stored `out x in`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Clone, Debug)]
pub struct LinearCache {
    input: Matrix,
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub dx: Matrix,
    pub d_weight: Matrix,
    pub d_bias: Matrix,
}

impl LinearLayer {
    pub fn new(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.rows() != 1 || bias.cols() != weight.rows() {
            return Err(Error::shape("LinearLayer::new", weight.shape(), bias.shape()));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: Matrix::zeros(1, out_dim),
        }
    }

    /// Weights uniform in `±1/√in_dim`, zero bias.
    pub fn init_uniform(in_dim: usize, out_dim: usize, rng: &mut RngState) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let mut weight = Matrix::zeros(out_dim, in_dim);
        for w in weight.data_mut() {
            *w = rng.uniform_range(-bound, bound);
        }
        Self {
            weight,
            bias: Matrix::zeros(1, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Forward pass without keeping a cache.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.in_dim() {
            return Err(Error::shape("linear_forward", x.shape(), self.weight.shape()));
        }
        x.matmul(&self.weight.transpose())?.add_row(&self.bias)
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, LinearCache)> {
        let y = self.apply(x)?;
        Ok((y, LinearCache { input: x.clone() }))
    }

    pub fn backward(&self, cache: &LinearCache, dy: &Matrix) -> Result<LinearGrads> {
        if dy.rows() != cache.input.rows() || dy.cols() != self.out_dim() {
            return Err(Error::shape("linear_backward", dy.shape(), (cache.input.rows(), self.out_dim())));
        }
        Ok(LinearGrads {
            dx: dy.matmul(&self.weight)?,
            d_weight: dy.transpose().matmul(&cache.input)?,
            d_bias: dy.column_sums(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct ReluCache {
    input: Matrix,
}

pub fn relu_forward(x: &Matrix) -> (Matrix, ReluCache) {
    (x.map(|v| v.max(0.0)), ReluCache { input: x.clone() })
}

pub fn relu_backward(cache: &ReluCache, dy: &Matrix) -> Result<Matrix> {
    cache
        .input
        .zip_map(dy, |x, g| if x > 0.0 { g } else { 0.0 })
}

/// Global normalization statistics for one domain: the moving averages of
/// the batch mean and batch standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Matrix,
    pub std: Matrix,
    pub seen: bool,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        Self {
            mean: Matrix::zeros(1, width),
            std: Matrix::filled(1, width, 1.0),
            seen: false,
        }
    }

    fn update(&mut self, batch_mean: &Matrix, batch_std: &Matrix, momentum: f64) {
        for (g, &b) in self.mean.data_mut().iter_mut().zip(batch_mean.data()) {
            *g = momentum * *g + (1.0 - momentum) * b;
        }
        for (g, &b) in self.std.data_mut().iter_mut().zip(batch_std.data()) {
            *g = momentum * *g + (1.0 - momentum) * b;
        }
        self.seen = true;
    }
}

/// Everything the normalization backward pass needs from its forward call.
#[derive(Clone, Debug)]
pub struct BnCache {
    x_hat: Matrix,
    inv_std: Vec<f64>,
    tag: DomainTag,
}

impl BnCache {
    /// Normalized activations before scale and shift.
    pub fn x_hat(&self) -> &Matrix {
        &self.x_hat
    }

    pub fn tag(&self) -> DomainTag {
        self.tag
    }
}

#[derive(Clone, Debug)]
pub struct BnGrads {
    pub dx: Matrix,
    pub d_gamma: Matrix,
    pub d_beta: Matrix,
}

fn check_norm_params(width: usize, momentum: f64, epsilon: f64) -> Result<()> {
    if width == 0 {
        return Err(Error::Invalid("normalization width must be positive".into()));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Invalid(format!("momentum must lie in [0, 1), got {momentum}")));
    }
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::Invalid(format!("epsilon must be non-negative, got {epsilon}")));
    }
    Ok(())
}

fn affine(x_hat: &Matrix, gamma: &Matrix, beta: &Matrix) -> Matrix {
    let mut z = x_hat.clone();
    for r in 0..z.rows() {
        for ((v, &g), &b) in z.row_mut(r).iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = g * *v + b;
        }
    }
    z
}

/// Normalizes `x` with its own statistics. Returns the output, the cache,
/// and the batch mean and standard deviation for the running averages.
fn normalize_batch(
    x: &Matrix,
    gamma: &Matrix,
    beta: &Matrix,
    epsilon: f64,
    tag: DomainTag,
) -> Result<(Matrix, BnCache, Matrix, Matrix)> {
    if x.rows() < 2 {
        return Err(Error::DegenerateBatch { rows: x.rows() });
    }
    if x.cols() != gamma.cols() {
        return Err(Error::shape("batch_norm_forward", x.shape(), gamma.shape()));
    }
    let (mean, var) = row_stats(x)?;
    let inv_std: Vec<f64> = var
        .data()
        .iter()
        .map(|&v| {
            let denom = (v + epsilon).sqrt();
            if denom > 0.0 {
                1.0 / denom
            } else {
                0.0
            }
        })
        .collect();
    let mut x_hat = x.clone();
    for r in 0..x_hat.rows() {
        for (((v, &mu), &is), &var_k) in x_hat
            .row_mut(r)
            .iter_mut()
            .zip(mean.data())
            .zip(&inv_std)
            .zip(var.data())
        {
            *v = if var_k == 0.0 { 0.0 } else { (*v - mu) * is };
        }
    }
    let z = affine(&x_hat, gamma, beta);
    let std = var.map(f64::sqrt);
    Ok((z, BnCache { x_hat, inv_std, tag }, mean, std))
}

fn normalize_with(x: &Matrix, stats: &RunningStats, gamma: &Matrix, beta: &Matrix, epsilon: f64) -> Result<Matrix> {
    if x.cols() != gamma.cols() {
        return Err(Error::shape("batch_norm_eval", x.shape(), gamma.shape()));
    }
    let mut x_hat = x.clone();
    for r in 0..x_hat.rows() {
        for ((v, &mu), &sd) in x_hat
            .row_mut(r)
            .iter_mut()
            .zip(stats.mean.data())
            .zip(stats.std.data())
        {
            let denom = (sd * sd + epsilon).sqrt();
            *v = if denom > 0.0 { (*v - mu) / denom } else { 0.0 };
        }
    }
    Ok(affine(&x_hat, gamma, beta))
}

/// Exact batch-norm backward, including the dependence of the batch mean and
/// variance on every input row.
fn normalize_backward(gamma: &Matrix, cache: &BnCache, dz: &Matrix) -> Result<BnGrads> {
    if dz.shape() != cache.x_hat.shape() {
        return Err(Error::shape("batch_norm_backward", dz.shape(), cache.x_hat.shape()));
    }
    let (m, k) = dz.shape();
    let d_beta = dz.column_sums();
    let d_gamma = dz.hadamard(&cache.x_hat)?.column_sums();
    let mut dx = Matrix::zeros(m, k);
    let mf = m as f64;
    for c in 0..k {
        let g = gamma.get(0, c);
        // With dx̂ = γ dz: Σ dx̂ = γ dβ and Σ dx̂ x̂ = γ dγ.
        let sum_dxhat = g * d_beta.get(0, c);
        let sum_dxhat_xhat = g * d_gamma.get(0, c);
        let scale = cache.inv_std[c] / mf;
        for r in 0..m {
            let dxhat = g * dz.get(r, c);
            let xh = cache.x_hat.get(r, c);
            dx.set(r, c, scale * (mf * dxhat - sum_dxhat - xh * sum_dxhat_xhat));
        }
    }
    Ok(BnGrads { dx, d_gamma, d_beta })
}

/// Batch normalization with one set of running statistics per domain and
/// shared scale/shift parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct DsbnLayer {
    pub gamma: Matrix,
    pub beta: Matrix,
    stats: [RunningStats; 2],
    momentum: f64,
    epsilon: f64,
}

impl DsbnLayer {
    pub fn new(width: usize, momentum: f64, epsilon: f64) -> Result<Self> {
        check_norm_params(width, momentum, epsilon)?;
        Ok(Self {
            gamma: Matrix::filled(1, width, 1.0),
            beta: Matrix::zeros(1, width),
            stats: [RunningStats::new(width), RunningStats::new(width)],
            momentum,
            epsilon,
        })
    }

    pub fn width(&self) -> usize {
        self.gamma.cols()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn running(&self, tag: DomainTag) -> &RunningStats {
        &self.stats[tag.index()]
    }

    /// Both statistics sets, indexed by [`DomainTag::index`].
    pub fn running_all_mut(&mut self) -> [&mut RunningStats; 2] {
        let [s, t] = &mut self.stats;
        [s, t]
    }

    pub fn running_mut(&mut self, tag: DomainTag) -> &mut RunningStats {
        &mut self.stats[tag.index()]
    }

    /// Normalizes with the batch's own statistics and folds them into the
    /// running statistics of `tag` only.
    pub fn forward_train(&mut self, x: &Matrix, tag: DomainTag) -> Result<(Matrix, BnCache)> {
        let (z, cache, mean, std) = normalize_batch(x, &self.gamma, &self.beta, self.epsilon, tag)?;
        self.stats[tag.index()].update(&mean, &std, self.momentum);
        Ok((z, cache))
    }

    pub fn forward_eval(&self, x: &Matrix, tag: DomainTag) -> Result<Matrix> {
        let stats = &self.stats[tag.index()];
        if !stats.seen {
            return Err(Error::StatsUninitialized(tag));
        }
        normalize_with(x, stats, &self.gamma, &self.beta, self.epsilon)
    }

    pub fn backward(&self, cache: &BnCache, dz: &Matrix) -> Result<BnGrads> {
        normalize_backward(&self.gamma, cache, dz)
    }
}

/// Standard batch normalization: one set of running statistics regardless of
/// the domain tag.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Matrix,
    pub beta: Matrix,
    stats: RunningStats,
    momentum: f64,
    epsilon: f64,
}

impl BatchNormLayer {
    pub fn new(width: usize, momentum: f64, epsilon: f64) -> Result<Self> {
        check_norm_params(width, momentum, epsilon)?;
        Ok(Self {
            gamma: Matrix::filled(1, width, 1.0),
            beta: Matrix::zeros(1, width),
            stats: RunningStats::new(width),
            momentum,
            epsilon,
        })
    }

    pub fn width(&self) -> usize {
        self.gamma.cols()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn running(&self) -> &RunningStats {
        &self.stats
    }

    pub fn running_mut(&mut self) -> &mut RunningStats {
        &mut self.stats
    }

    pub fn forward_train(&mut self, x: &Matrix, tag: DomainTag) -> Result<(Matrix, BnCache)> {
        let (z, cache, mean, std) = normalize_batch(x, &self.gamma, &self.beta, self.epsilon, tag)?;
        self.stats.update(&mean, &std, self.momentum);
        Ok((z, cache))
    }

    pub fn forward_eval(&self, x: &Matrix, tag: DomainTag) -> Result<Matrix> {
        if !self.stats.seen {
            return Err(Error::StatsUninitialized(tag));
        }
        normalize_with(x, &self.stats, &self.gamma, &self.beta, self.epsilon)
    }

    pub fn backward(&self, cache: &BnCache, dz: &Matrix) -> Result<BnGrads> {
        normalize_backward(&self.gamma, cache, dz)
    }
}
