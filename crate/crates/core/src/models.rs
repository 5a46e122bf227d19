//! Target posteriors: per-agent energies with a `1/n` prior split, their
//! full and minibatch gradients, and posterior-predictive classification.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One agent's local data. Inputs carry the constant-1 bias feature already.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataShard {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub owner: usize,
}

impl DataShard {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, owner: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                got: labels.len(),
            });
        }
        if inputs.is_empty() {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        Ok(Self {
            inputs,
            labels,
            owner,
        })
    }

    /// Shard of scalar observations for the one-dimensional Gaussian model.
    pub fn scalar(values: &[f64], owner: usize) -> Result<Self> {
        Self::new(
            values.iter().map(|&x| vec![x]).collect(),
            vec![0; values.len()],
            owner,
        )
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Prior {
    Gaussian { mean: f64, std: f64 },
    Laplace { loc: f64, scale: f64 },
}

impl Prior {
    fn neg_log_density(&self, w: &[f64]) -> f64 {
        match *self {
            Prior::Gaussian { mean, std } => {
                w.iter().map(|&x| 0.5 * ((x - mean) / std).powi(2)).sum()
            }
            Prior::Laplace { loc, scale } => w.iter().map(|&x| (x - loc).abs() / scale).sum(),
        }
    }

    fn add_neg_log_grad(&self, w: &[f64], weight: f64, out: &mut [f64]) {
        match *self {
            Prior::Gaussian { mean, std } => {
                let prec = weight / (std * std);
                for (o, &x) in out.iter_mut().zip(w) {
                    *o += prec * (x - mean);
                }
            }
            Prior::Laplace { loc, scale } => {
                for (o, &x) in out.iter_mut().zip(w) {
                    let s = if x > loc {
                        1.0
                    } else if x < loc {
                        -1.0
                    } else {
                        0.0
                    };
                    *o += weight * s / scale;
                }
            }
        }
    }
}

/// Likelihood family. `features` counts the augmented input length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ModelKind {
    Gaussian1d { sigma_x: f64 },
    Logistic { features: usize },
    Softmax { n_classes: usize, features: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_w: usize,
    pub n_agents: usize,
    pub prior: Prior,
    pub kind: ModelKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientResult {
    pub grad: Vec<f64>,
    /// Empty for a full-data gradient.
    pub minibatch_indices: Vec<usize>,
}

pub fn minibatch_size(shard_len: usize, fraction: f64) -> usize {
    ((fraction * shard_len as f64).round() as usize).clamp(1, shard_len)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-max shifted softmax of `W x`, with `W` stored row-major as `n_classes x features`.
fn softmax_probs(w: &[f64], x: &[f64], n_classes: usize) -> Vec<f64> {
    let features = x.len();
    let logits: Vec<f64> = (0..n_classes)
        .map(|c| dot(&w[c * features..(c + 1) * features], x))
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_finite(grad: &[f64]) -> Result<()> {
    match grad.iter().position(|g| !g.is_finite()) {
        Some(coord) => Err(Error::NonFiniteGradient { coord }),
        None => Ok(()),
    }
}

impl ModelSpec {
    pub fn gaussian1d(sigma_theta: f64, sigma_x: f64, n_agents: usize) -> Self {
        Self {
            d_w: 1,
            n_agents,
            prior: Prior::Gaussian {
                mean: 0.0,
                std: sigma_theta,
            },
            kind: ModelKind::Gaussian1d { sigma_x },
        }
    }

    /// Binary logistic regression over `features` augmented inputs.
    pub fn logistic(features: usize, n_agents: usize, prior: Prior) -> Self {
        Self {
            d_w: features,
            n_agents,
            prior,
            kind: ModelKind::Logistic { features },
        }
    }

    pub fn softmax(n_classes: usize, features: usize, n_agents: usize, prior: Prior) -> Self {
        Self {
            d_w: n_classes * features,
            n_agents,
            prior,
            kind: ModelKind::Softmax {
                n_classes,
                features,
            },
        }
    }

    pub fn n_classes(&self) -> usize {
        match self.kind {
            ModelKind::Gaussian1d { .. } => 0,
            ModelKind::Logistic { .. } => 2,
            ModelKind::Softmax { n_classes, .. } => n_classes,
        }
    }

    fn check_dim(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.d_w {
            return Err(Error::DimensionMismatch {
                expected: self.d_w,
                got: w.len(),
            });
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        match self.kind {
            ModelKind::Gaussian1d { .. } => 1,
            ModelKind::Logistic { features } | ModelKind::Softmax { features, .. } => features,
        }
    }

    /// `-log p(x | w)` for one observation, up to an additive constant.
    pub fn neg_log_likelihood(&self, x: &[f64], y: usize, w: &[f64]) -> f64 {
        match self.kind {
            ModelKind::Gaussian1d { sigma_x } => 0.5 * ((x[0] - w[0]) / sigma_x).powi(2),
            ModelKind::Logistic { .. } => {
                let z = dot(w, x);
                softplus(z) - y as f64 * z
            }
            ModelKind::Softmax { n_classes, .. } => {
                let features = x.len();
                let logits: Vec<f64> = (0..n_classes)
                    .map(|c| dot(&w[c * features..(c + 1) * features], x))
                    .collect();
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
                lse - logits[y]
            }
        }
    }

    fn add_neg_log_likelihood_grad(
        &self,
        x: &[f64],
        y: usize,
        w: &[f64],
        scale: f64,
        out: &mut [f64],
    ) {
        match self.kind {
            ModelKind::Gaussian1d { sigma_x } => {
                out[0] += scale * (w[0] - x[0]) / (sigma_x * sigma_x);
            }
            ModelKind::Logistic { .. } => {
                let r = scale * (sigmoid(dot(w, x)) - y as f64);
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o += r * xi;
                }
            }
            ModelKind::Softmax { n_classes, .. } => {
                let features = x.len();
                let probs = softmax_probs(w, x, n_classes);
                for (c, p) in probs.into_iter().enumerate() {
                    let r = scale * (p - if c == y { 1.0 } else { 0.0 });
                    for (o, &xi) in out[c * features..(c + 1) * features].iter_mut().zip(x) {
                        *o += r * xi;
                    }
                }
            }
        }
    }

    /// Agent energy `E_i(w) = -sum_j log p(x_j | w) - (1/n) log p(w)`, up to a constant.
    pub fn energy(&self, shard: &DataShard, w: &[f64]) -> Result<f64> {
        self.check_dim(w)?;
        let data: f64 = shard
            .inputs
            .iter()
            .zip(&shard.labels)
            .map(|(x, &y)| self.neg_log_likelihood(x, y, w))
            .sum();
        Ok(data + self.prior.neg_log_density(w) / self.n_agents as f64)
    }

    /// Energy of the full posterior over all data, up to a constant.
    pub fn centralized_energy(&self, shards: &[DataShard], w: &[f64]) -> Result<f64> {
        self.check_dim(w)?;
        let data: f64 = shards
            .iter()
            .flat_map(|s| s.inputs.iter().zip(&s.labels))
            .map(|(x, &y)| self.neg_log_likelihood(x, y, w))
            .sum();
        Ok(data + self.prior.neg_log_density(w))
    }

    pub fn centralized_grad(&self, shards: &[DataShard], w: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(w)?;
        let mut grad = vec![0.0; self.d_w];
        for s in shards {
            for (x, &y) in s.inputs.iter().zip(&s.labels) {
                self.add_neg_log_likelihood_grad(x, y, w, 1.0, &mut grad);
            }
        }
        self.prior.add_neg_log_grad(w, 1.0, &mut grad);
        check_finite(&grad)?;
        Ok(grad)
    }

    fn grad_over(
        &self,
        shard: &DataShard,
        w: &[f64],
        indices: &[usize],
        scale: f64,
    ) -> Result<Vec<f64>> {
        self.check_dim(w)?;
        let mut grad = vec![0.0; self.d_w];
        for &j in indices {
            let x = &shard.inputs[j];
            if x.len() != self.input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: self.input_dim(),
                    got: x.len(),
                });
            }
            self.add_neg_log_likelihood_grad(x, shard.labels[j], w, 1.0, &mut grad);
        }
        if scale != 1.0 {
            for g in grad.iter_mut() {
                *g *= scale;
            }
        }
        self.prior
            .add_neg_log_grad(w, 1.0 / self.n_agents as f64, &mut grad);
        check_finite(&grad)?;
        Ok(grad)
    }

    pub fn energy_grad_full(&self, shard: &DataShard, w: &[f64]) -> Result<GradientResult> {
        let all: Vec<usize> = (0..shard.len()).collect();
        Ok(GradientResult {
            grad: self.grad_over(shard, w, &all, 1.0)?,
            minibatch_indices: Vec::new(),
        })
    }

    /// Draws `max(1, round(f M_i))` indices without replacement (sorted) for
    /// a fresh minibatch.
    pub fn draw_minibatch<R: Rng + ?Sized>(
        &self,
        shard: &DataShard,
        fraction: f64,
        rng: &mut R,
    ) -> Vec<usize> {
        let m = minibatch_size(shard.len(), fraction);
        let mut idx = index::sample(rng, shard.len(), m).into_vec();
        idx.sort_unstable();
        idx
    }

    /// Unbiased minibatch gradient: the data term is rescaled by `M_i / m_i`.
    pub fn energy_grad_stochastic<R: Rng + ?Sized>(
        &self,
        shard: &DataShard,
        w: &[f64],
        fraction: f64,
        rng: &mut R,
    ) -> Result<GradientResult> {
        let indices = self.draw_minibatch(shard, fraction, rng);
        self.grad_with_reused_batch(shard, w, &indices)
    }

    pub fn grad_with_reused_batch(
        &self,
        shard: &DataShard,
        w: &[f64],
        indices: &[usize],
    ) -> Result<GradientResult> {
        if let Some(&bad) = indices.iter().find(|&&j| j >= shard.len()) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                len: shard.len(),
            });
        }
        if indices.is_empty() {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        let scale = shard.len() as f64 / indices.len() as f64;
        Ok(GradientResult {
            grad: self.grad_over(shard, w, indices, scale)?,
            minibatch_indices: indices.to_vec(),
        })
    }

    /// Posterior-predictive class probabilities averaged over `w_samples`.
    pub fn predict_proba(&self, w_samples: &[Vec<f64>], x: &[f64]) -> Result<Vec<f64>> {
        if w_samples.is_empty() {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let k = self.n_classes().max(1);
        let mut acc = vec![0.0; k];
        for w in w_samples {
            self.check_dim(w)?;
            match self.kind {
                ModelKind::Gaussian1d { .. } => acc[0] += 1.0,
                ModelKind::Logistic { .. } => {
                    let p = sigmoid(dot(w, x));
                    acc[0] += 1.0 - p;
                    acc[1] += p;
                }
                ModelKind::Softmax { n_classes, .. } => {
                    for (a, p) in acc.iter_mut().zip(softmax_probs(w, x, n_classes)) {
                        *a += p;
                    }
                }
            }
        }
        let s = w_samples.len() as f64;
        Ok(acc.into_iter().map(|a| a / s).collect())
    }

    /// Averages predictive probabilities over samples, then takes the argmax.
    /// Binary labels use threshold 0.5; ties go to the lower class index.
    pub fn predict(&self, w_samples: &[Vec<f64>], inputs: &[Vec<f64>]) -> Result<Vec<usize>> {
        inputs
            .iter()
            .map(|x| {
                let probs = self.predict_proba(w_samples, x)?;
                Ok(match self.kind {
                    ModelKind::Logistic { .. } => usize::from(probs[1] > 0.5),
                    _ => argmax_lowest(&probs),
                })
            })
            .collect()
    }

    /// Initial chain state: Laplace(0, 1) entries for softmax, standard normal otherwise.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.kind {
            ModelKind::Softmax { .. } => (0..self.d_w)
                .map(|_| {
                    let a: f64 = Exp1.sample(rng);
                    let b: f64 = Exp1.sample(rng);
                    a - b
                })
                .collect(),
            _ => (0..self.d_w).map(|_| StandardNormal.sample(rng)).collect(),
        }
    }
}

/// Conjugate posterior `N(mu_p, sigma_p^2)` of the Gaussian-mean model.
pub fn analytic_posterior_gaussian1d(sigma_theta: f64, sigma_x: f64, data: &[f64]) -> (f64, f64) {
    let n = data.len() as f64;
    let sum: f64 = data.iter().sum();
    let mu = sum / (sigma_x * sigma_x / (sigma_theta * sigma_theta) + n);
    let var = 1.0 / (1.0 / (sigma_theta * sigma_theta) + n / (sigma_x * sigma_x));
    (mu, var)
}
