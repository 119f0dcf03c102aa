//! Variational Gaussian linear classification head.
//!
//! The head maps a feature vector `z ∈ ℝᵈ` to `c` logits through a weight
//! matrix (`d × c`, row-major) followed by a bias (`c`). Its parameters are
//! drawn from a mean-field Gaussian `N(μ, diag(σ²))` with `σ = softplus(ρ)`,
//! sampled by reparameterization `b̂ = μ + ε ⊙ σ`.

use serde::{Deserialize, Serialize};

use crate::distributions::Categorical;
use crate::error::{Error, Result};
use crate::numcore::{cross_entropy, sigmoid, softmax_raw, softplus, softplus_inv, Tensor2};
use crate::rng::standard_normals;

/// Posterior standard deviation at initialization.
pub const INIT_SIGMA: f64 = 0.05;
/// Standard deviation of the zero-mean Gaussian used to initialize `μ`.
pub const INIT_MU_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    variance: f64,
}

impl PriorSpec {
    pub fn new(variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) {
            return Err(Error::arg(format!("prior variance must be positive, got {variance}")));
        }
        Ok(Self { variance })
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { variance: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    feature_dim: usize,
    classes: usize,
    mu: Vec<f64>,
    rho: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(feature_dim: usize, classes: usize, mu: Vec<f64>, rho: Vec<f64>) -> Result<Self> {
        if classes < 2 || feature_dim == 0 {
            return Err(Error::arg(format!(
                "head needs d ≥ 1 and c ≥ 2, got d = {feature_dim}, c = {classes}"
            )));
        }
        let n = (feature_dim + 1) * classes;
        if mu.len() != n || rho.len() != n {
            return Err(Error::dim(
                format!("{n} head parameters"),
                format!("mu of length {}, rho of length {}", mu.len(), rho.len()),
            ));
        }
        if mu.iter().chain(&rho).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite posterior parameter".into()));
        }
        Ok(Self {
            feature_dim,
            classes,
            mu,
            rho,
        })
    }

    /// `μ ~ N(0, INIT_MU_STD²)`, `σ = INIT_SIGMA` everywhere.
    pub fn init(feature_dim: usize, classes: usize, rng: &mut impl rand::Rng) -> Result<Self> {
        let n = (feature_dim + 1) * classes;
        let mu = standard_normals(rng, n).into_iter().map(|e| e * INIT_MU_STD).collect();
        let rho = vec![softplus_inv(INIT_SIGMA); n];
        Self::new(feature_dim, classes, mu, rho)
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn mu_mut(&mut self) -> &mut [f64] {
        &mut self.mu
    }

    pub fn rho_mut(&mut self) -> &mut [f64] {
        &mut self.rho
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    /// The posterior mean as a weight sample (zero noise).
    pub fn mean_weights(&self) -> WeightSample {
        WeightSample {
            weights: self.mu.clone(),
            noise: vec![0.0; self.mu.len()],
            feature_dim: self.feature_dim,
            classes: self.classes,
        }
    }
}

/// One reparameterized draw of the head parameters together with the noise
/// that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSample {
    weights: Vec<f64>,
    noise: Vec<f64>,
    feature_dim: usize,
    classes: usize,
}

impl WeightSample {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn noise(&self) -> &[f64] {
        &self.noise
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Weight matrix entry for feature `i`, class `k`.
    fn w(&self, i: usize, k: usize) -> f64 {
        self.weights[i * self.classes + k]
    }

    fn bias(&self) -> &[f64] {
        &self.weights[self.feature_dim * self.classes..]
    }

    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.bias().to_vec();
        for (i, &zi) in z.iter().enumerate() {
            let row = &self.weights[i * self.classes..(i + 1) * self.classes];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += zi * w;
            }
        }
        out
    }

    pub fn probabilities(&self, z: &[f64]) -> Vec<f64> {
        softmax_raw(&self.logits(z))
    }

    /// Backpropagates `dL/dlogits` for one sample into `dL/dz`.
    pub fn backprop_features(&self, dlogits: &[f64]) -> Vec<f64> {
        (0..self.feature_dim)
            .map(|i| (0..self.classes).map(|k| self.w(i, k) * dlogits[k]).sum())
            .collect()
    }
}

pub fn sample_weights(post: &GaussianPosterior, noise: &[f64]) -> Result<WeightSample> {
    if noise.len() != post.len() {
        return Err(Error::dim(
            format!("posterior of length {}", post.len()),
            format!("noise of length {}", noise.len()),
        ));
    }
    let weights = post
        .mu
        .iter()
        .zip(&post.rho)
        .zip(noise)
        .map(|((&m, &r), &e)| m + e * softplus(r))
        .collect();
    Ok(WeightSample {
        weights,
        noise: noise.to_vec(),
        feature_dim: post.feature_dim,
        classes: post.classes,
    })
}

/// Draws one weight sample per noise vector.
pub fn sample_many(post: &GaussianPosterior, noises: &[Vec<f64>]) -> Result<Vec<WeightSample>> {
    noises.iter().map(|e| sample_weights(post, e)).collect()
}

fn check_features(post: &GaussianPosterior, z: &[f64]) -> Result<()> {
    if z.len() != post.feature_dim {
        return Err(Error::dim(
            format!("head expecting {} features", post.feature_dim),
            format!("feature vector of length {}", z.len()),
        ));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite feature".into()));
    }
    Ok(())
}

/// Average of `softmax(b̂ᵗ · z)` over the weight samples produced by `noises`
/// (one per sample, `T = noises.len()`).
pub fn predict_distribution(
    post: &GaussianPosterior,
    z: &[f64],
    noises: &[Vec<f64>],
) -> Result<Categorical> {
    if noises.is_empty() {
        return Err(Error::arg("prediction needs at least one weight sample (T ≥ 1)"));
    }
    check_features(post, z)?;
    let samples = sample_many(post, noises)?;
    Ok(average_prediction(&samples, z))
}

pub(crate) fn average_prediction(samples: &[WeightSample], z: &[f64]) -> Categorical {
    let c = samples[0].classes;
    let mut acc = vec![0.0; c];
    for s in samples {
        for (a, p) in acc.iter_mut().zip(s.probabilities(z)) {
            *a += p;
        }
    }
    let t = samples.len() as f64;
    Categorical::from_trusted(acc.into_iter().map(|a| a / t).collect())
}

/// Closed-form `KL(N(μ, diag σ²) ‖ N(0, v I))`.
pub fn kl_gauss_prior(post: &GaussianPosterior, prior: &PriorSpec) -> f64 {
    kl_gauss_prior_with_grad(post, prior).0
}

/// KL to the prior with its gradients with respect to `(μ, ρ)`.
pub fn kl_gauss_prior_with_grad(
    post: &GaussianPosterior,
    prior: &PriorSpec,
) -> (f64, Vec<f64>, Vec<f64>) {
    let v = prior.variance;
    let mut total = 0.0;
    let mut g_mu = Vec::with_capacity(post.len());
    let mut g_rho = Vec::with_capacity(post.len());
    for (&m, &r) in post.mu.iter().zip(&post.rho) {
        let s = softplus(r);
        let ratio = s * s / v;
        total += 0.5 * (ratio + m * m / v - 1.0 - ratio.ln());
        g_mu.push(m / v);
        g_rho.push((s / v - 1.0 / s) * sigmoid(r));
    }
    (total.max(0.0), g_mu, g_rho)
}

/// Mean cross-entropy of `softmax(weights · z)` over a batch, with the
/// gradient with respect to the flattened weights.
pub fn cross_entropy_with_grad(
    sample: &WeightSample,
    features: &Tensor2,
    labels: &[usize],
) -> (f64, Vec<f64>) {
    let (d, c) = (sample.feature_dim, sample.classes);
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; sample.weights.len()];
    for (j, &y) in labels.iter().enumerate() {
        let z = features.row(j);
        let p = sample.probabilities(z);
        loss += cross_entropy(&p, y) / n;
        for k in 0..c {
            let g = (p[k] - if k == y { 1.0 } else { 0.0 }) / n;
            for (i, &zi) in z.iter().enumerate() {
                grad[i * c + k] += zi * g;
            }
            grad[d * c + k] += g;
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboOutput {
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub grad_mu: Vec<f64>,
    pub grad_rho: Vec<f64>,
}

/// Negative ELBO in loss form: `(1/T) Σₜ CE(b̂ᵗ) + KL(q ‖ prior) / dataset_size`.
pub fn elbo_loss(
    post: &GaussianPosterior,
    features: &Tensor2,
    labels: &[usize],
    prior: &PriorSpec,
    noises: &[Vec<f64>],
    dataset_size: usize,
) -> Result<ElboOutput> {
    if labels.is_empty() || features.rows() == 0 {
        return Err(Error::arg("ELBO needs a nonempty batch"));
    }
    if noises.is_empty() {
        return Err(Error::arg("ELBO needs at least one weight sample (T ≥ 1)"));
    }
    if dataset_size == 0 {
        return Err(Error::arg("dataset size must be positive"));
    }
    if features.rows() != labels.len() {
        return Err(Error::dim(
            format!("{} feature rows", features.rows()),
            format!("{} labels", labels.len()),
        ));
    }
    if features.cols() != post.feature_dim {
        return Err(Error::dim(
            format!("head expecting {} features", post.feature_dim),
            format!("features with {} columns", features.cols()),
        ));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= post.classes) {
        return Err(Error::arg(format!("label {y} out of range for {} classes", post.classes)));
    }

    let t = noises.len() as f64;
    let mut nll = 0.0;
    let mut grad_mu = vec![0.0; post.len()];
    let mut grad_rho = vec![0.0; post.len()];
    for sample in sample_many(post, noises)? {
        let (l, gw) = cross_entropy_with_grad(&sample, features, labels);
        nll += l / t;
        for i in 0..post.len() {
            grad_mu[i] += gw[i] / t;
            grad_rho[i] += gw[i] * sample.noise[i] * sigmoid(post.rho[i]) / t;
        }
    }
    let scale = 1.0 / dataset_size as f64;
    let (kl, kl_mu, kl_rho) = kl_gauss_prior_with_grad(post, prior);
    for i in 0..post.len() {
        grad_mu[i] += scale * kl_mu[i];
        grad_rho[i] += scale * kl_rho[i];
    }
    Ok(ElboOutput {
        loss: nll + scale * kl,
        nll,
        kl,
        grad_mu,
        grad_rho,
    })
}
