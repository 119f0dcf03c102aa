//! The alternating training loop. Each step first fits the Bayesian head
//! with the extractor held fixed (one ELBO step), then refreshes the
//! Discriminant matrix and moves the extractor on `ERM + α·CDR` with the head
//! held fixed. Training only ever sees a [`TrainingView`], which carries no
//! domain ids.

pub mod checkpoint;
mod config;
mod extractor;
mod optim;

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, HeadMode};
pub use extractor::{Dense, FeatureExtractor, ForwardCache};
pub use optim::{sgd_step, Adam, AdamState};

use crate::bayes::{elbo_loss, cross_entropy_with_grad, sample_many, GaussianPosterior, PriorSpec, WeightSample};
use crate::datagen::{shuffled_indices, TrainingView};
use crate::discriminant::{cdr_penalty, group_by_class, DiscriminantMatrix};
use crate::distributions::Categorical;
use crate::error::{Error, Result};
use crate::numcore::{cross_entropy, softmax_vjp, Tensor2, LOG_CLIP};
use crate::rng::{standard_normals, stream, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub extractor: FeatureExtractor,
    pub posterior: GaussianPosterior,
    pub matrix: DiscriminantMatrix,
    /// Number of completed training steps.
    pub step: u64,
    pub adam: Adam,
}

/// Per-step record. `total` is the logged extractor objective, equal to
/// `erm_weight·erm_loss + α·cdr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub erm_loss: f64,
    pub cdr: f64,
    pub total: f64,
    pub elbo: f64,
    pub val_acc: Option<f64>,
}

/// Value and extractor-parameter gradient of the phase-2 objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorObjective {
    pub erm: f64,
    pub cdr: f64,
    pub total: f64,
    pub grad: Vec<f64>,
}

fn fnv1a(values: impl IntoIterator<Item = f64>, mut h: u64) -> u64 {
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
    }
    h
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

impl TrainState {
    pub fn init(config: &ExperimentConfig, input_dim: usize, classes: usize) -> Result<Self> {
        config.validate()?;
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(&config.hidden);
        let extractor = FeatureExtractor::init(&sizes, &mut stream(config.seed, Purpose::Init, &[0]))?;
        let posterior = GaussianPosterior::init(
            extractor.output_dim(),
            classes,
            &mut stream(config.seed, Purpose::Init, &[1]),
        )?;
        let matrix = DiscriminantMatrix::init(classes, config.beta)?;
        let adam = Adam::new(config.lr_extractor, config.weight_decay, extractor.param_count());
        Ok(Self {
            extractor,
            posterior,
            matrix,
            step: 0,
            adam,
        })
    }

    pub fn classes(&self) -> usize {
        self.posterior.classes()
    }

    pub fn extractor_hash(&self) -> u64 {
        fnv1a(self.extractor.params(), FNV_OFFSET)
    }

    pub fn posterior_hash(&self) -> u64 {
        fnv1a(self.posterior.mu().iter().chain(self.posterior.rho()).copied(), FNV_OFFSET)
    }

    pub fn matrix_hash(&self) -> u64 {
        fnv1a(self.matrix.to_flat(), FNV_OFFSET)
    }

    /// Hash over every learned quantity and the step counter.
    pub fn param_hash(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for part in [self.extractor_hash(), self.posterior_hash(), self.matrix_hash(), self.step] {
            h = fnv1a([f64::from_bits(part)], h);
        }
        h
    }

    /// A frozen predictor using `samples` weight draws from the evaluation
    /// stream, or the posterior mean for a deterministic head.
    pub fn snapshot(&self, head: HeadMode, samples: usize, seed: u64) -> Model {
        let noises = match head {
            HeadMode::Bayesian => noise_set(seed, Purpose::EvalNoise, 0, samples.max(1), self.posterior.len()),
            HeadMode::Deterministic => vec![vec![0.0; self.posterior.len()]],
        };
        Model {
            extractor: self.extractor.clone(),
            posterior: self.posterior.clone(),
            noises,
        }
    }
}

/// Extractor plus a fixed set of head weight samples. Prediction is the
/// average of the per-sample softmaxes.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub extractor: FeatureExtractor,
    pub posterior: GaussianPosterior,
    pub noises: Vec<Vec<f64>>,
}

impl Model {
    pub fn classes(&self) -> usize {
        self.posterior.classes()
    }

    pub fn predict(&self, x: &[f64]) -> Result<Categorical> {
        if x.len() != self.extractor.input_dim() {
            return Err(Error::dim(
                format!("model input of {}", self.extractor.input_dim()),
                format!("sample of {}", x.len()),
            ));
        }
        let z = self.extractor.features_one(x);
        crate::bayes::predict_distribution(&self.posterior, &z, &self.noises)
    }

    pub fn accuracy(&self, view: &TrainingView) -> Result<f64> {
        if view.is_empty() {
            return Err(Error::arg("accuracy of an empty set"));
        }
        let mut correct = 0usize;
        for i in 0..view.len() {
            if self.predict(view.x(i))?.argmax() == view.label(i) {
                correct += 1;
            }
        }
        Ok(correct as f64 / view.len() as f64)
    }
}

fn noise_set(seed: u64, purpose: Purpose, step: u64, t: usize, n: usize) -> Vec<Vec<f64>> {
    (0..t as u64)
        .map(|k| standard_normals(&mut stream(seed, purpose, &[step, k]), n))
        .collect()
}

fn phase_noises(config: &ExperimentConfig, purpose: Purpose, step: u64, n: usize) -> Vec<Vec<f64>> {
    match config.head {
        HeadMode::Bayesian => noise_set(config.seed, purpose, step, config.samples, n),
        HeadMode::Deterministic => vec![vec![0.0; n]],
    }
}

enum MatrixUse<'a> {
    Fixed(&'a DiscriminantMatrix),
    /// Slide the matrix on this batch's predictions first, then penalize
    /// against the refreshed rows.
    Slide(&'a mut DiscriminantMatrix),
}

fn check_batch(x: &Tensor2, labels: &[usize], classes: usize) -> Result<()> {
    if labels.is_empty() || x.rows() == 0 {
        return Err(Error::arg("empty batch"));
    }
    if x.rows() != labels.len() {
        return Err(Error::dim(format!("{} rows", x.rows()), format!("{} labels", labels.len())));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::arg(format!("label {y} out of range for {classes} classes")));
    }
    Ok(())
}

fn objective_core(
    extractor: &FeatureExtractor,
    posterior: &GaussianPosterior,
    x: &Tensor2,
    labels: &[usize],
    noises: &[Vec<f64>],
    erm_weight: f64,
    alpha: f64,
    matrix: Option<MatrixUse<'_>>,
) -> Result<ExtractorObjective> {
    check_batch(x, labels, posterior.classes())?;
    if noises.is_empty() {
        return Err(Error::arg("need at least one weight sample (T ≥ 1)"));
    }
    let cache = extractor.forward(x)?;
    let z = cache.features();
    let samples: Vec<WeightSample> = sample_many(posterior, noises)?;
    let (b, c, t) = (labels.len(), posterior.classes(), samples.len() as f64);

    let mut per_sample: Vec<Vec<Vec<f64>>> = Vec::with_capacity(b);
    let mut means: Vec<Categorical> = Vec::with_capacity(b);
    for j in 0..b {
        let probs: Vec<Vec<f64>> = samples.iter().map(|s| s.probabilities(z.row(j))).collect();
        let mut avg = vec![0.0; c];
        for p in &probs {
            for (a, v) in avg.iter_mut().zip(p) {
                *a += v;
            }
        }
        means.push(Categorical::from_trusted(avg.into_iter().map(|a| a / t).collect()));
        per_sample.push(probs);
    }

    let mut dmean = vec![vec![0.0; c]; b];
    let mut erm = 0.0;
    for (j, (&y, p)) in labels.iter().zip(&means).enumerate() {
        erm += cross_entropy(p.probs(), y) / b as f64;
        if erm_weight != 0.0 && p.probs()[y] > LOG_CLIP {
            dmean[j][y] -= erm_weight / (b as f64 * p.probs()[y]);
        }
    }

    let mut cdr = 0.0;
    if let Some(use_) = matrix {
        let groups = group_by_class(&means, labels)?;
        let out = match use_ {
            MatrixUse::Fixed(m) => cdr_penalty(m, &groups)?,
            MatrixUse::Slide(m) => {
                m.slide_update(&groups)?;
                cdr_penalty(m, &groups)?
            }
        };
        cdr = out.value;
        if alpha != 0.0 {
            for (g, grad) in groups.iter().zip(&out.grads) {
                let scale = alpha / g.support as f64;
                for (j, &y) in labels.iter().enumerate() {
                    if y == g.class_label {
                        for (d, v) in dmean[j].iter_mut().zip(grad) {
                            *d += scale * v;
                        }
                    }
                }
            }
        }
    }

    let mut dz = Tensor2::zeros(b, z.cols());
    for j in 0..b {
        let upstream: Vec<f64> = dmean[j].iter().map(|v| v / t).collect();
        for (s, probs) in samples.iter().zip(&per_sample[j]) {
            let dlogits = softmax_vjp(probs, &upstream);
            for (o, v) in dz.row_mut(j).iter_mut().zip(s.backprop_features(&dlogits)) {
                *o += v;
            }
        }
    }
    let grad = extractor.backward(&cache, &dz)?;
    Ok(ExtractorObjective {
        erm,
        cdr,
        total: erm_weight * erm + alpha * cdr,
        grad,
    })
}

/// Mean cross-entropy of the `T`-averaged prediction, with its gradient with
/// respect to the extractor parameters. The head is held fixed.
pub fn erm_loss(
    extractor: &FeatureExtractor,
    posterior: &GaussianPosterior,
    x: &Tensor2,
    labels: &[usize],
    noises: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    let out = objective_core(extractor, posterior, x, labels, noises, 1.0, 0.0, None)?;
    Ok((out.erm, out.grad))
}

/// Phase-2 objective against a fixed Discriminant matrix (no sliding).
pub fn extractor_objective(
    extractor: &FeatureExtractor,
    posterior: &GaussianPosterior,
    matrix: &DiscriminantMatrix,
    x: &Tensor2,
    labels: &[usize],
    noises: &[Vec<f64>],
    erm_weight: f64,
    alpha: f64,
) -> Result<ExtractorObjective> {
    objective_core(
        extractor,
        posterior,
        x,
        labels,
        noises,
        erm_weight,
        alpha,
        Some(MatrixUse::Fixed(matrix)),
    )
}

/// Phase 1: one gradient step on the head with the extractor fixed.
/// Returns the head loss (negative ELBO, or plain cross-entropy for a
/// deterministic head).
pub fn phase_vi(
    state: &mut TrainState,
    x: &Tensor2,
    labels: &[usize],
    config: &ExperimentConfig,
    dataset_size: usize,
) -> Result<f64> {
    check_batch(x, labels, state.classes())?;
    let z = state.extractor.features(x)?;
    match config.head {
        HeadMode::Bayesian => {
            let noises = phase_noises(config, Purpose::VariationalNoise, state.step, state.posterior.len());
            let prior = PriorSpec::new(config.prior_variance)?;
            let out = elbo_loss(&state.posterior, &z, labels, &prior, &noises, dataset_size)?;
            sgd_step(state.posterior.mu_mut(), &out.grad_mu, config.lr_head);
            sgd_step(state.posterior.rho_mut(), &out.grad_rho, config.lr_head);
            Ok(out.loss)
        }
        HeadMode::Deterministic => {
            let (loss, grad) = cross_entropy_with_grad(&state.posterior.mean_weights(), &z, labels);
            sgd_step(state.posterior.mu_mut(), &grad, config.lr_head);
            Ok(loss)
        }
    }
}

/// Phase 2: slide the Discriminant matrix, then one Adam step on the
/// extractor with the head fixed.
pub fn phase_penalty(
    state: &mut TrainState,
    x: &Tensor2,
    labels: &[usize],
    config: &ExperimentConfig,
) -> Result<ExtractorObjective> {
    let noises = phase_noises(config, Purpose::PenaltyNoise, state.step, state.posterior.len());
    let erm_weight = if config.erm_term { 1.0 } else { 0.0 };
    let out = objective_core(
        &state.extractor,
        &state.posterior,
        x,
        labels,
        &noises,
        erm_weight,
        config.alpha,
        Some(MatrixUse::Slide(&mut state.matrix)),
    )?;
    let mut params = state.extractor.params();
    state.adam.step(&mut params, &out.grad);
    state.extractor.set_params(&params)?;
    Ok(out)
}

pub fn train_step(
    state: &mut TrainState,
    x: &Tensor2,
    labels: &[usize],
    config: &ExperimentConfig,
    dataset_size: usize,
) -> Result<StepMetrics> {
    let step = state.step + 1;
    let diverged = |reason: String| Error::Diverged { step, reason };
    let elbo = phase_vi(state, x, labels, config, dataset_size)?;
    if !elbo.is_finite() {
        return Err(diverged(format!("head loss is {elbo}")));
    }
    if !state.posterior.mu().iter().chain(state.posterior.rho()).all(|v| v.is_finite()) {
        return Err(diverged("head parameters became non-finite".into()));
    }
    let obj = phase_penalty(state, x, labels, config)?;
    if !(obj.erm.is_finite() && obj.cdr.is_finite() && obj.total.is_finite()) {
        return Err(diverged(format!("extractor loss erm={} cdr={}", obj.erm, obj.cdr)));
    }
    if !state.extractor.params().iter().all(|v| v.is_finite()) {
        return Err(diverged("extractor parameters became non-finite".into()));
    }
    state.step = step;
    Ok(StepMetrics {
        step,
        erm_loss: obj.erm,
        cdr: obj.cdr,
        total: obj.total,
        elbo,
        val_acc: None,
    })
}

/// Train/validation partition of the merged source data.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let order = shuffled_indices(n, seed, Purpose::Split, &[]);
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = n_val.min(n.saturating_sub(1));
    let (val, train) = order.split_at(n_val);
    (train.to_vec(), val.to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// State with the highest validation accuracy (the final state when no
    /// validation split is used).
    pub best: TrainState,
    pub best_val_acc: Option<f64>,
    pub history: Vec<StepMetrics>,
}

impl TrainOutcome {
    pub fn best_model(&self, config: &ExperimentConfig) -> Model {
        self.best.snapshot(config.head, config.samples, config.seed)
    }
}

#[derive(Serialize)]
struct TimingRow {
    step: u64,
    wall_ms: u128,
}

/// Runs `config.steps` training steps over `data`. When `out` is given, the
/// resolved config, `metrics.csv`, `timing.csv` and checkpoints are written
/// there.
pub fn train(config: &ExperimentConfig, data: &TrainingView, out: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::arg("training data is empty"));
    }
    let mut state = TrainState::init(config, data.dim(), data.classes())?;
    let (train_idx, val_idx) = split_indices(data.len(), config.val_fraction, config.seed);
    let train_view = data.select(&train_idx);
    let val_view = (!val_idx.is_empty()).then(|| data.select(&val_idx));
    let n_train = train_view.len();
    let batch = config.batch_size.min(n_train);
    let per_epoch = (n_train / batch) as u64;

    if let Some(dir) = out {
        fs::create_dir_all(dir.join("checkpoints"))?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(config)?)?;
    }

    let started = Instant::now();
    let mut history = Vec::with_capacity(config.steps as usize);
    let mut timing = Vec::with_capacity(config.steps as usize);
    let mut best = state.clone();
    let mut best_val_acc = None;
    let mut order = Vec::new();
    for c in 0..config.steps {
        let (epoch, pos) = (c / per_epoch, (c % per_epoch) as usize);
        if pos == 0 {
            order = shuffled_indices(n_train, config.seed, Purpose::Shuffle, &[epoch]);
        }
        let (x, labels) = train_view.batch(&order[pos * batch..(pos + 1) * batch]);
        let mut m = train_step(&mut state, &x, &labels, config, n_train)?;

        let eval_now = config.eval_every > 0 && (m.step % config.eval_every == 0 || m.step == config.steps);
        if let (true, Some(val)) = (eval_now, &val_view) {
            let acc = state.snapshot(config.head, config.samples, config.seed).accuracy(val)?;
            m.val_acc = Some(acc);
            if best_val_acc.is_none_or(|b| acc > b) {
                best_val_acc = Some(acc);
                best = state.clone();
            }
        }
        if let Some(dir) = out {
            if config.checkpoint_every > 0 && m.step % config.checkpoint_every == 0 {
                checkpoint::save(&state, &dir.join("checkpoints").join(format!("step_{:06}.bin", m.step)))?;
            }
        }
        timing.push(TimingRow {
            step: m.step,
            wall_ms: started.elapsed().as_millis(),
        });
        history.push(m);
    }
    if val_view.is_none() || best_val_acc.is_none() {
        best = state.clone();
    }

    if let Some(dir) = out {
        write_csv(&dir.join("metrics.csv"), &history)?;
        write_csv(&dir.join("timing.csv"), &timing)?;
        checkpoint::save(&state, &dir.join("final.bin"))?;
        checkpoint::save(&best, &dir.join("best.bin"))?;
    }
    Ok(TrainOutcome {
        state,
        best,
        best_val_acc,
        history,
    })
}

/// ERM under the same plumbing: `α = 0` and a deterministic head.
pub fn train_erm_baseline(
    config: &ExperimentConfig,
    data: &TrainingView,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    train(&config.erm_baseline(), data, out)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `metrics.csv` written by [`train`].
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
