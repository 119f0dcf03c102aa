//! The Discriminant matrix and the Categorical Discriminant Risk (CDR) penalty.
//!
//! Row `Y` of the matrix is a sliding estimate of the model's overall
//! prediction distribution on class `Y`:
//!
//! ```text
//! m_Y ← (1 − β) m_Y + β ȳ_Y
//! ```
//!
//! where `ȳ_Y` is the mean prediction over the class-`Y` samples of the
//! current batch. The penalty is `Σ_Y JS(m_Y, ȳ_Y)` over the classes present
//! in the batch. The matrix is updated outside the differentiation graph, so
//! only `ȳ_Y` carries gradient.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::distributions::{js, js_grad_second, Categorical};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminantMatrix {
    rows: Vec<Categorical>,
    update_count: u64,
    beta: f64,
}

/// Mean prediction `ȳ_Y` over the `support` samples of one class in a batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBatchPrediction {
    pub class_label: usize,
    pub mean_prediction: Categorical,
    pub support: usize,
}

/// CDR value with `∂CDR/∂ȳ_Y` for each entry of the input, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct CdrOutput {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::arg(format!("sliding rate beta must lie in (0, 1), got {beta}")));
    }
    Ok(())
}

impl DiscriminantMatrix {
    /// Identity rows: `m_Y` starts as the one-hot vector at `Y`.
    pub fn init(classes: usize, beta: f64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::arg(format!("need at least 2 classes, got {classes}")));
        }
        check_beta(beta)?;
        let rows = (0..classes)
            .map(|k| Categorical::one_hot(classes, k))
            .collect::<Result<_>>()?;
        Ok(Self {
            rows,
            update_count: 0,
            beta,
        })
    }

    /// Rebuilds a matrix from serialized state.
    pub fn from_parts(rows: Vec<Categorical>, update_count: u64, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        let c = rows.len();
        if c < 2 || rows.iter().any(|r| r.len() != c) {
            return Err(Error::dim(
                format!("{c} rows"),
                "rows that are not all of that length".to_string(),
            ));
        }
        Ok(Self {
            rows,
            update_count,
            beta,
        })
    }

    pub fn classes(&self) -> usize {
        self.rows.len()
    }

    pub fn rows(&self) -> &[Categorical] {
        &self.rows
    }

    pub fn row(&self, class: usize) -> &Categorical {
        &self.rows[class]
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Row-major `c × c` entries.
    pub fn to_flat(&self) -> Vec<f64> {
        self.rows.iter().flat_map(|r| r.probs().iter().copied()).collect()
    }

    fn check_labels(&self, preds: &[ClassBatchPrediction]) -> Result<()> {
        let c = self.classes();
        let mut seen = vec![false; c];
        for p in preds {
            if p.class_label >= c {
                return Err(Error::arg(format!(
                    "class label {} out of range for {c} classes",
                    p.class_label
                )));
            }
            if std::mem::replace(&mut seen[p.class_label], true) {
                return Err(Error::arg(format!("duplicate class label {}", p.class_label)));
            }
            if p.mean_prediction.len() != c {
                return Err(Error::dim(
                    format!("{c} classes"),
                    format!("prediction over {} classes", p.mean_prediction.len()),
                ));
            }
            if p.support == 0 {
                return Err(Error::arg(format!("class {} has zero support", p.class_label)));
            }
        }
        Ok(())
    }

    /// In-place sliding update of the rows for the classes present in `preds`.
    pub fn slide_update(&mut self, preds: &[ClassBatchPrediction]) -> Result<()> {
        self.check_labels(preds)?;
        let b = self.beta;
        for p in preds {
            let row = &self.rows[p.class_label];
            let mixed = row
                .probs()
                .iter()
                .zip(p.mean_prediction.probs())
                .map(|(&m, &y)| (1.0 - b) * m + b * y)
                .collect();
            self.rows[p.class_label] = Categorical::from_trusted(mixed);
        }
        self.update_count += 1;
        Ok(())
    }

    /// Value-returning form of [`slide_update`](Self::slide_update).
    pub fn slid(&self, preds: &[ClassBatchPrediction]) -> Result<Self> {
        let mut next = self.clone();
        next.slide_update(preds)?;
        Ok(next)
    }
}

/// `Σ_Y JS(m_Y, ȳ_Y)` over the given classes, with rows held constant.
pub fn cdr_penalty(matrix: &DiscriminantMatrix, preds: &[ClassBatchPrediction]) -> Result<CdrOutput> {
    if preds.is_empty() {
        return Err(Error::arg("CDR needs at least one class prediction"));
    }
    matrix.check_labels(preds)?;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for p in preds {
        let row = matrix.row(p.class_label);
        value += js(row, &p.mean_prediction)?;
        grads.push(js_grad_second(row, &p.mean_prediction)?);
    }
    Ok(CdrOutput { value, grads })
}

/// Groups per-sample predictions by label and averages each group.
/// Output is ordered by class label.
pub fn group_by_class(predictions: &[Categorical], labels: &[usize]) -> Result<Vec<ClassBatchPrediction>> {
    if predictions.len() != labels.len() {
        return Err(Error::arg(format!(
            "{} predictions but {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::arg("cannot group an empty batch"));
    }
    let mut groups: BTreeMap<usize, Vec<&Categorical>> = BTreeMap::new();
    for (p, &y) in predictions.iter().zip(labels) {
        groups.entry(y).or_default().push(p);
    }
    groups
        .into_iter()
        .map(|(class_label, members)| {
            Ok(ClassBatchPrediction {
                class_label,
                support: members.len(),
                mean_prediction: Categorical::mean(members)?,
            })
        })
        .collect()
}
