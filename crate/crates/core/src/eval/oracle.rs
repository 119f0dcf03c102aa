//! Oracle predictors whose "extractor" is a fixed coordinate projection onto
//! either the invariant or the spurious block of the generator layout, with a
//! Bayesian linear head fitted on source data.

use serde::{Deserialize, Serialize};

use crate::bayes::{elbo_loss, predict_distribution, GaussianPosterior, PriorSpec};
use crate::datagen::{DomainDataset, FeatureLayout};
use crate::distributions::Categorical;
use crate::error::{Error, Result};
use crate::numcore::Tensor2;
use crate::rng::{standard_normals, stream, Purpose};
use crate::trainer::sgd_step;

use super::Predictor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureBlock {
    Invariant,
    Spurious,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleModel {
    pub block: FeatureBlock,
    pub layout: FeatureLayout,
    pub posterior: GaussianPosterior,
    pub noises: Vec<Vec<f64>>,
}

impl OracleModel {
    fn project<'a>(&self, x: &'a [f64]) -> &'a [f64] {
        match self.block {
            FeatureBlock::Invariant => self.layout.invariant(x),
            FeatureBlock::Spurious => self.layout.spurious(x),
        }
    }
}

impl Predictor for OracleModel {
    fn classes(&self) -> usize {
        self.posterior.classes()
    }

    fn predict(&self, x: &[f64]) -> Result<Categorical> {
        if x.len() != self.layout.dim() {
            return Err(Error::dim(format!("layout of {}", self.layout.dim()), format!("sample of {}", x.len())));
        }
        predict_distribution(&self.posterior, self.project(x), &self.noises)
    }
}

/// Settings for fitting an oracle head by full-batch ELBO descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleFit {
    pub iterations: usize,
    pub lr: f64,
    pub samples: usize,
    pub prior_variance: f64,
    pub seed: u64,
}

impl Default for OracleFit {
    fn default() -> Self {
        Self {
            iterations: 300,
            lr: 0.5,
            samples: 3,
            prior_variance: 10.0,
            seed: 0,
        }
    }
}

pub fn fit_oracle(data: &DomainDataset, block: FeatureBlock, fit: &OracleFit) -> Result<OracleModel> {
    if data.is_empty() {
        return Err(Error::arg("cannot fit an oracle on an empty dataset"));
    }
    if fit.samples == 0 || fit.iterations == 0 {
        return Err(Error::arg("oracle fit needs at least one sample and one iteration"));
    }
    let layout = data.layout();
    let width = match block {
        FeatureBlock::Invariant => layout.invariant_len,
        FeatureBlock::Spurious => layout.spurious_len,
    };
    if width == 0 {
        return Err(Error::arg(format!("{block:?} block is empty in this layout")));
    }
    let mut model = OracleModel {
        block,
        layout,
        posterior: GaussianPosterior::init(width, data.classes(), &mut stream(fit.seed, Purpose::Oracle, &[0]))?,
        noises: Vec::new(),
    };
    let rows: Vec<Vec<f64>> = data.samples().iter().map(|s| model.project(&s.x).to_vec()).collect();
    let features = Tensor2::from_rows(&rows)?;
    let labels: Vec<usize> = data.samples().iter().map(|s| s.y).collect();
    let prior = PriorSpec::new(fit.prior_variance)?;
    let n = model.posterior.len();
    for it in 0..fit.iterations as u64 {
        let noises: Vec<Vec<f64>> = (0..fit.samples as u64)
            .map(|t| standard_normals(&mut stream(fit.seed, Purpose::Oracle, &[1, it, t]), n))
            .collect();
        let out = elbo_loss(&model.posterior, &features, &labels, &prior, &noises, labels.len())?;
        sgd_step(model.posterior.mu_mut(), &out.grad_mu, fit.lr);
        sgd_step(model.posterior.rho_mut(), &out.grad_rho, fit.lr);
    }
    model.noises = (0..fit.samples as u64)
        .map(|t| standard_normals(&mut stream(fit.seed, Purpose::Oracle, &[2, t]), n))
        .collect();
    Ok(model)
}
