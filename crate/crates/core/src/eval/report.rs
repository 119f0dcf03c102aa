//! DRM-vs-ERM comparison documents and the ablation grid.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::DomainDataset;
use crate::distributions::js;
use crate::error::{Error, Result};
use crate::trainer::{train, ExperimentConfig, HeadMode, StepMetrics};

use super::{class_means, class_tv, confusion_of, labels, predict_all, ConfusionMatrix, Predictor};

/// Config and history of a finished training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub history: Vec<StepMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainAccuracy {
    pub domain_id: u32,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub per_domain: Vec<DomainAccuracy>,
    pub source_accuracy: f64,
    pub target_accuracy: f64,
    /// Largest pairwise divergence between the per-domain confusion matrices.
    pub confusion_divergence: f64,
    /// Mean Discriminant Risk of each source domain relative to all sources.
    pub source_risk: f64,
    /// Discriminant Risk of the target relative to all sources.
    pub target_risk: f64,
    pub confusions: Vec<ConfusionMatrix>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deltas {
    pub source_accuracy: f64,
    pub target_accuracy: f64,
    pub confusion_divergence: f64,
    pub source_risk: f64,
    pub target_risk: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationArm {
    pub erm_term: bool,
    pub cdr: bool,
    pub bayesian: bool,
}

impl AblationArm {
    /// The six combinations, head off first, in the order ERM, CDR, ERM+CDR.
    pub fn all() -> Vec<Self> {
        let mut out = Vec::with_capacity(6);
        for bayesian in [false, true] {
            for (erm_term, cdr) in [(true, false), (false, true), (true, true)] {
                out.push(Self { erm_term, cdr, bayesian });
            }
        }
        out
    }

    pub fn label(&self) -> String {
        let loss = match (self.erm_term, self.cdr) {
            (true, false) => "ERM",
            (false, true) => "CDR",
            (true, true) => "ERM+CDR",
            (false, false) => "none",
        };
        format!("{loss} / bayes {}", if self.bayesian { "on" } else { "off" })
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        ExperimentConfig {
            erm_term: self.erm_term,
            alpha: if self.cdr { base.alpha } else { 0.0 },
            head: if self.bayesian { HeadMode::Bayesian } else { HeadMode::Deterministic },
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: AblationArm,
    pub label: String,
    pub seeds: Vec<u64>,
    pub target_accuracy: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub drm: ArmReport,
    pub erm: ArmReport,
    /// DRM minus ERM.
    pub deltas: Deltas,
    pub ablation: Vec<AblationRow>,
}

/// One plot point in long format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub step: u64,
    pub series: String,
    pub value: f64,
}

/// Largest over domain pairs of the row-averaged JS divergence between
/// Laplace-smoothed, row-normalized confusion matrices. Zero for fewer than
/// two matrices.
pub fn confusion_divergence(matrices: &[ConfusionMatrix]) -> Result<f64> {
    let rows: Vec<_> = matrices.iter().map(ConfusionMatrix::smoothed_rows).collect();
    let mut worst: f64 = 0.0;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            if rows[i].len() != rows[j].len() {
                return Err(Error::dim(format!("{} classes", rows[i].len()), format!("{} classes", rows[j].len())));
            }
            let mut total = 0.0;
            for (a, b) in rows[i].iter().zip(&rows[j]) {
                total += js(a, b)?;
            }
            worst = worst.max(total / rows[i].len() as f64);
        }
    }
    Ok(worst)
}

/// Evaluates one model on the sources (with domain ids) and the target.
pub fn arm_report(name: &str, model: &dyn Predictor, sources: &DomainDataset, target: &DomainDataset) -> Result<ArmReport> {
    if sources.is_empty() || target.is_empty() {
        return Err(Error::arg("report needs nonempty sources and target"));
    }
    let c = model.classes();
    let preds = predict_all(model, sources)?;
    let ys = labels(sources);
    let all_means = class_means(&preds, &ys, c);

    let mut per_domain = Vec::new();
    let mut confusions = Vec::new();
    let mut source_risk = 0.0;
    let ids = sources.domain_ids();
    for &id in &ids {
        let (p, y): (Vec<_>, Vec<_>) = preds
            .iter()
            .zip(sources.samples())
            .filter(|(_, s)| s.domain_id == id)
            .map(|(p, s)| (p.clone(), s.y))
            .unzip();
        per_domain.push(DomainAccuracy {
            domain_id: id,
            accuracy: super::accuracy_of(&p, &y),
        });
        source_risk += class_tv(&class_means(&p, &y, c), &all_means)?;
        confusions.push(confusion_of(&p, &y, c, Some(id)));
    }
    source_risk /= ids.len() as f64;

    let tpreds = predict_all(model, target)?;
    let tys = labels(target);
    Ok(ArmReport {
        name: name.to_string(),
        source_accuracy: super::accuracy_of(&preds, &ys),
        target_accuracy: super::accuracy_of(&tpreds, &tys),
        confusion_divergence: confusion_divergence(&confusions)?,
        source_risk,
        target_risk: class_tv(&class_means(&tpreds, &tys, c), &all_means)?,
        per_domain,
        confusions,
    })
}

/// Builds the DRM-vs-ERM document. Both runs must share seed and data.
pub fn compare_report(
    drm: (&RunSummary, &dyn Predictor),
    erm: (&RunSummary, &dyn Predictor),
    sources: &DomainDataset,
    target: &DomainDataset,
    ablation: Vec<AblationRow>,
) -> Result<ComparisonReport> {
    let (a, b) = (&drm.0.config, &erm.0.config);
    if a.seed != b.seed || a.data != b.data || a.target != b.target {
        return Err(Error::arg(format!(
            "runs differ in seed or data (seed {} vs {}, data {:?} vs {:?})",
            a.seed, b.seed, a.data, b.data
        )));
    }
    let drm = arm_report("DRM", drm.1, sources, target)?;
    let erm = arm_report("ERM", erm.1, sources, target)?;
    let deltas = Deltas {
        source_accuracy: drm.source_accuracy - erm.source_accuracy,
        target_accuracy: drm.target_accuracy - erm.target_accuracy,
        confusion_divergence: drm.confusion_divergence - erm.confusion_divergence,
        source_risk: drm.source_risk - erm.source_risk,
        target_risk: drm.target_risk - erm.target_risk,
    };
    Ok(ComparisonReport {
        drm,
        erm,
        deltas,
        ablation,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Trains every arm of the grid on the `(sources, target)` pair returned by
/// `data(seed)` for each seed and reports target accuracy of the
/// validation-selected model.
pub fn ablation_grid(
    base: &ExperimentConfig,
    seeds: &[u64],
    data: impl Fn(u64) -> Result<(DomainDataset, DomainDataset)>,
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::arg("ablation needs at least one seed"));
    }
    let sets = seeds.iter().map(|&s| data(s)).collect::<Result<Vec<_>>>()?;
    AblationArm::all()
        .into_iter()
        .map(|arm| {
            let mut accs = Vec::with_capacity(seeds.len());
            for (&seed, (sources, target)) in seeds.iter().zip(&sets) {
                let config = arm.apply(&ExperimentConfig { seed, ..base.clone() });
                let out = train(&config, &sources.training_view(), None)?;
                let model = out.best_model(&config);
                accs.push(super::accuracy(&model, target)?);
            }
            let (mean, std) = mean_std(&accs);
            Ok(AblationRow {
                arm,
                label: arm.label(),
                seeds: seeds.to_vec(),
                target_accuracy: accs,
                mean,
                std,
            })
        })
        .collect()
}

/// Long-format plot rows for each named history.
pub fn plot_rows(runs: &[(&str, &[StepMetrics])]) -> Vec<PlotRow> {
    let mut out = Vec::new();
    for (name, history) in runs {
        for m in history.iter() {
            let mut push = |series: &str, value: f64| {
                out.push(PlotRow {
                    step: m.step,
                    series: format!("{name}.{series}"),
                    value,
                })
            };
            push("erm_loss", m.erm_loss);
            push("cdr", m.cdr);
            push("elbo", m.elbo);
            if let Some(v) = m.val_acc {
                push("val_acc", v);
            }
        }
    }
    out
}

impl ComparisonReport {
    /// Aligned-column rendering for terminals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<26}{:>12}{:>12}{:>12}", "metric", "DRM", "ERM", "delta");
        let rows = [
            ("source accuracy", self.drm.source_accuracy, self.erm.source_accuracy),
            ("target accuracy", self.drm.target_accuracy, self.erm.target_accuracy),
            ("confusion divergence", self.drm.confusion_divergence, self.erm.confusion_divergence),
            ("source risk", self.drm.source_risk, self.erm.source_risk),
            ("target risk", self.drm.target_risk, self.erm.target_risk),
        ];
        for (name, a, b) in rows {
            let _ = writeln!(s, "{name:<26}{a:>12.4}{b:>12.4}{:>12.4}", a - b);
        }
        for (d, e) in self.drm.per_domain.iter().zip(&self.erm.per_domain) {
            let name = format!("domain {} accuracy", d.domain_id);
            let _ = writeln!(s, "{name:<26}{:>12.4}{:>12.4}{:>12.4}", d.accuracy, e.accuracy, d.accuracy - e.accuracy);
        }
        if !self.ablation.is_empty() {
            let _ = writeln!(s, "\n{:<26}{:>12}{:>12}", "ablation", "target acc", "std");
            for r in &self.ablation {
                let _ = writeln!(s, "{:<26}{:>12.4}{:>12.4}", r.label, r.mean, r.std);
            }
        }
        s
    }
}
