//! Read-only evaluation: confusion matrices, Discriminant Risk, theorem
//! checks and comparison reports. Nothing here mutates a training state;
//! every function works on a [`Predictor`] snapshot.

mod oracle;
mod report;
pub mod suite;
mod theorems;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use oracle::{fit_oracle, FeatureBlock, OracleFit, OracleModel};
pub use report::{
    ablation_grid, arm_report, compare_report, confusion_divergence, plot_rows, AblationArm, AblationRow, ArmReport,
    ComparisonReport, Deltas, PlotRow, RunSummary,
};
pub use theorems::{
    prediction_uncertainty, theorem1_check, theorem2_check, theorem3_check, theorem4_check, RiskReport, Theorem2Report,
    Theorem3Report, Theorem4Report, TrialOutcome,
};

use crate::datagen::DomainDataset;
use crate::distributions::{d_js, tv, Categorical};
use crate::error::{Error, Result};
use crate::numcore::LOG_CLIP;
use crate::trainer::Model;

/// Anything that maps a raw input to a predicted class distribution.
pub trait Predictor: Sync {
    fn classes(&self) -> usize;
    fn predict(&self, x: &[f64]) -> Result<Categorical>;
}

impl Predictor for Model {
    fn classes(&self) -> usize {
        Model::classes(self)
    }

    fn predict(&self, x: &[f64]) -> Result<Categorical> {
        Model::predict(self, x)
    }
}

/// Predictions of `model` on every sample of `data`, in order.
pub fn predict_all(model: &dyn Predictor, data: &DomainDataset) -> Result<Vec<Categorical>> {
    data.samples().iter().map(|s| model.predict(&s.x)).collect()
}

pub fn accuracy(model: &dyn Predictor, data: &DomainDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::arg("accuracy of an empty dataset"));
    }
    let preds = predict_all(model, data)?;
    Ok(accuracy_of(&preds, &labels(data)))
}

pub(crate) fn accuracy_of(preds: &[Categorical], labels: &[usize]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, &y)| p.argmax() == y).count();
    hits as f64 / labels.len() as f64
}

/// Mean `log p(y | x)` with the usual clip.
pub fn log_likelihood(model: &dyn Predictor, data: &DomainDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::arg("log-likelihood of an empty dataset"));
    }
    let preds = predict_all(model, data)?;
    Ok(log_likelihood_of(&preds, &labels(data)))
}

pub(crate) fn log_likelihood_of(preds: &[Categorical], labels: &[usize]) -> f64 {
    let total: f64 = preds.iter().zip(labels).map(|(p, &y)| p.probs()[y].max(LOG_CLIP).ln()).sum();
    total / labels.len() as f64
}

pub(crate) fn labels(data: &DomainDataset) -> Vec<usize> {
    data.samples().iter().map(|s| s.y).collect()
}

/// Row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
    pub domain_id: Option<u32>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize, domain_id: Option<u32>) -> Self {
        Self {
            classes,
            counts: vec![vec![0; classes]; classes],
            domain_id,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn add(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dim(format!("{} classes", self.classes), format!("{} classes", other.classes)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    /// Row-normalized matrix with `+1` added to every cell first.
    pub fn smoothed_rows(&self) -> Vec<Categorical> {
        self.counts
            .iter()
            .map(|r| {
                let n = r.iter().sum::<u64>() as f64 + self.classes as f64;
                Categorical::from_trusted(r.iter().map(|&v| (v as f64 + 1.0) / n).collect())
            })
            .collect()
    }

    /// Row-normalized without smoothing; empty rows stay zero.
    pub fn normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|r| {
                let n = r.iter().sum::<u64>() as f64;
                r.iter().map(|&v| if n > 0.0 { v as f64 / n } else { 0.0 }).collect()
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true");
        for k in 0..self.classes {
            let _ = write!(out, ",pred_{k}");
        }
        out.push('\n');
        for (y, row) in self.counts.iter().enumerate() {
            let _ = write!(out, "{y}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion(model: &dyn Predictor, data: &DomainDataset, domain_id: Option<u32>) -> Result<ConfusionMatrix> {
    if data.is_empty() {
        return Err(Error::arg("confusion matrix of an empty slice"));
    }
    let preds = predict_all(model, data)?;
    Ok(confusion_of(&preds, &labels(data), model.classes(), domain_id))
}

pub(crate) fn confusion_of(preds: &[Categorical], labels: &[usize], classes: usize, domain_id: Option<u32>) -> ConfusionMatrix {
    let mut m = ConfusionMatrix::zeros(classes, domain_id);
    for (p, &y) in preds.iter().zip(labels) {
        m.counts[y][p.argmax()] += 1;
    }
    m
}

/// Per-class mean prediction distributions; `None` for classes without samples.
pub(crate) fn class_means(preds: &[Categorical], labels: &[usize], classes: usize) -> Vec<Option<Categorical>> {
    let mut sums = vec![vec![0.0; classes]; classes];
    let mut counts = vec![0usize; classes];
    for (p, &y) in preds.iter().zip(labels) {
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(p.probs()) {
            *s += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, n)| (n > 0).then(|| Categorical::from_trusted(s.into_iter().map(|v| v / n as f64).collect())))
        .collect()
}

/// Averages `f` over the classes present in both sets. Errors when they share none.
pub(crate) fn class_average(
    a: &[Option<Categorical>],
    b: &[Option<Categorical>],
    f: impl Fn(&Categorical, &Categorical) -> Result<f64>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for (x, y) in a.iter().zip(b) {
        if let (Some(x), Some(y)) = (x, y) {
            total += f(x, y)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::arg("the two sets share no class"));
    }
    Ok(total / n as f64)
}

pub(crate) fn class_tv(a: &[Option<Categorical>], b: &[Option<Categorical>]) -> Result<f64> {
    class_average(a, b, tv)
}

pub(crate) fn class_djs(a: &[Option<Categorical>], b: &[Option<Categorical>]) -> Result<f64> {
    class_average(a, b, d_js)
}

/// Discriminant Risk of `subset` relative to `reference`: the tv between the
/// two sets' mean prediction distributions, per class, averaged over classes
/// with equal weight.
pub fn discriminant_risk(model: &dyn Predictor, subset: &DomainDataset, reference: &DomainDataset) -> Result<f64> {
    if subset.is_empty() || reference.is_empty() {
        return Err(Error::arg("Discriminant Risk needs two nonempty sets"));
    }
    let c = model.classes();
    let a = class_means(&predict_all(model, subset)?, &labels(subset), c);
    let b = class_means(&predict_all(model, reference)?, &labels(reference), c);
    class_tv(&a, &b)
}

/// Class-averaged `d_js` between the mean predictions on two sets.
pub fn prediction_djs(model: &dyn Predictor, a: &DomainDataset, b: &DomainDataset) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::arg("d_js needs two nonempty sets"));
    }
    let c = model.classes();
    let ma = class_means(&predict_all(model, a)?, &labels(a), c);
    let mb = class_means(&predict_all(model, b)?, &labels(b), c);
    class_djs(&ma, &mb)
}

/// Per-domain confusion matrices, ordered by domain id.
pub fn domain_confusions(model: &dyn Predictor, data: &DomainDataset) -> Result<Vec<ConfusionMatrix>> {
    let mut by_domain: BTreeMap<u32, ConfusionMatrix> = BTreeMap::new();
    for s in data.samples() {
        let p = model.predict(&s.x)?;
        by_domain
            .entry(s.domain_id)
            .or_insert_with(|| ConfusionMatrix::zeros(model.classes(), Some(s.domain_id)))
            .counts[s.y][p.argmax()] += 1;
    }
    if by_domain.is_empty() {
        return Err(Error::arg("no samples to evaluate"));
    }
    Ok(by_domain.into_values().collect())
}

/// Evaluation parallelism, capped by `DRM_LAB_THREADS` when set.
pub fn eval_threads() -> usize {
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("DRM_LAB_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(cap) if cap >= 1 => cap,
        _ => available,
    }
}

/// Maps `f` over `0..n` on up to [`eval_threads`] threads, preserving order.
pub(crate) fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = eval_threads().min(n.max(1));
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|k| scope.spawn(move || (k * chunk..((k + 1) * chunk).min(n)).map(f).collect::<Vec<T>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
    })
}

#[cfg(test)]
mod tests;
