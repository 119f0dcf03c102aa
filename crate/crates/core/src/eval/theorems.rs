//! Empirical checks of the bound, convergence, variance and transfer results.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{shuffled_indices, DomainDataset};
use crate::discriminant::{cdr_penalty, group_by_class, DiscriminantMatrix};
use crate::distributions::Categorical;
use crate::error::{Error, Result};
use crate::numcore::{covariance, determinant, Tensor2};
use crate::rng::{stream, Purpose};

use super::{class_djs, class_means, class_tv, labels, log_likelihood_of, par_map, predict_all, Predictor};

/// One random split of the source data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    /// Discriminant Risk of the target relative to the whole source.
    pub lhs: f64,
    pub subset_risks: Vec<f64>,
    pub mean_subset_risk: f64,
    pub min_djs_target: f64,
    pub max_djs_source: f64,
    pub max_pairwise_djs: f64,
    pub rhs: f64,
    pub satisfied: bool,
    /// `max_i d_js(subset_i, source)` dominates every pairwise subset distance.
    pub assumption_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub n_splits: usize,
    pub trials: Vec<TrialOutcome>,
    pub violations: usize,
    /// Violations among trials where the assumption holds.
    pub violations_with_assumption: usize,
    pub assumption_rate: f64,
}

impl RiskReport {
    pub fn passed(&self) -> bool {
        self.violations_with_assumption == 0
    }
}

/// Splits the source data into `n_splits` random disjoint parts, `trials`
/// times, and evaluates both sides of the bound
///
/// ```text
/// ε_t ≤ (1/N) Σ ε_i + √2 · min_i d_js(S_i, T) + max_i d_js(S_i, S)
/// ```
///
/// with every `ε` and `d_js` taken class by class on mean predictions and
/// averaged over classes.
pub fn theorem1_check(
    model: &dyn Predictor,
    source: &DomainDataset,
    target: &DomainDataset,
    n_splits: usize,
    trials: usize,
    seed: u64,
) -> Result<RiskReport> {
    if n_splits < 2 {
        return Err(Error::arg(format!("need at least 2 splits, got {n_splits}")));
    }
    if n_splits > source.len() {
        return Err(Error::arg(format!(
            "{n_splits} splits requested for {} source samples",
            source.len()
        )));
    }
    if target.is_empty() {
        return Err(Error::arg("target set is empty"));
    }
    let c = model.classes();
    let src_preds = predict_all(model, source)?;
    let src_labels = labels(source);
    let src_means = class_means(&src_preds, &src_labels, c);
    let tgt_means = class_means(&predict_all(model, target)?, &labels(target), c);
    let lhs = class_tv(&tgt_means, &src_means)?;

    let outcomes = par_map(trials, |trial| -> Result<TrialOutcome> {
        let order = shuffled_indices(source.len(), seed, Purpose::Trial, &[n_splits as u64, trial as u64]);
        let size = source.len() / n_splits;
        let parts: Vec<Vec<Option<Categorical>>> = (0..n_splits)
            .map(|i| {
                let end = if i + 1 == n_splits { order.len() } else { (i + 1) * size };
                let idx = &order[i * size..end];
                let p: Vec<Categorical> = idx.iter().map(|&j| src_preds[j].clone()).collect();
                let y: Vec<usize> = idx.iter().map(|&j| src_labels[j]).collect();
                class_means(&p, &y, c)
            })
            .collect();
        let subset_risks = parts.iter().map(|p| class_tv(p, &src_means)).collect::<Result<Vec<_>>>()?;
        let djs_target = parts.iter().map(|p| class_djs(p, &tgt_means)).collect::<Result<Vec<_>>>()?;
        let djs_source = parts.iter().map(|p| class_djs(p, &src_means)).collect::<Result<Vec<_>>>()?;
        let mut max_pairwise: f64 = 0.0;
        for i in 0..n_splits {
            for j in i + 1..n_splits {
                max_pairwise = max_pairwise.max(class_djs(&parts[i], &parts[j])?);
            }
        }
        let mean_subset_risk = subset_risks.iter().sum::<f64>() / n_splits as f64;
        let min_djs_target = djs_target.iter().copied().fold(f64::INFINITY, f64::min);
        let max_djs_source = djs_source.iter().copied().fold(0.0, f64::max);
        let rhs = mean_subset_risk + std::f64::consts::SQRT_2 * min_djs_target + max_djs_source;
        Ok(TrialOutcome {
            trial,
            lhs,
            subset_risks,
            mean_subset_risk,
            min_djs_target,
            max_djs_source,
            max_pairwise_djs: max_pairwise,
            rhs,
            satisfied: lhs <= rhs + 1e-12,
            assumption_holds: max_djs_source + 1e-15 >= max_pairwise,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    let violations = outcomes.iter().filter(|t| !t.satisfied).count();
    let violations_with_assumption = outcomes.iter().filter(|t| !t.satisfied && t.assumption_holds).count();
    let held = outcomes.iter().filter(|t| t.assumption_holds).count();
    Ok(RiskReport {
        n_splits,
        assumption_rate: if outcomes.is_empty() { 0.0 } else { held as f64 / outcomes.len() as f64 },
        trials: outcomes,
        violations,
        violations_with_assumption,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub beta: f64,
    /// CDR after each sliding update.
    pub cdr: Vec<f64>,
    /// Largest `|m_Y − ȳ_Y|` entry after each update.
    pub gap: Vec<f64>,
    /// First update (1-based) after which CDR is below `1e-6`.
    pub first_below: Option<usize>,
    /// Geometric mean of successive gap ratios while the gap is resolvable.
    pub measured_rate: f64,
    pub expected_rate: f64,
}

impl Theorem2Report {
    pub fn rate_error(&self) -> f64 {
        (self.measured_rate - self.expected_rate).abs() / self.expected_rate
    }
}

/// Slides a fresh Discriminant matrix on batches of `model`'s predictions
/// and records how quickly CDR vanishes.
pub fn theorem2_check(
    model: &dyn Predictor,
    data: &DomainDataset,
    beta: f64,
    updates: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Theorem2Report> {
    if data.is_empty() || batch_size == 0 {
        return Err(Error::arg("need data and a positive batch size"));
    }
    let preds = predict_all(model, data)?;
    let ys = labels(data);
    let mut matrix = DiscriminantMatrix::init(model.classes(), beta)?;
    let batch = batch_size.min(data.len());
    let mut cdr = Vec::with_capacity(updates);
    let mut gap = Vec::with_capacity(updates);
    let mut order = Vec::new();
    let per_epoch = data.len() / batch;
    for u in 0..updates {
        let pos = u % per_epoch;
        if pos == 0 {
            order = shuffled_indices(data.len(), seed, Purpose::Trial, &[(u / per_epoch) as u64]);
        }
        let idx = &order[pos * batch..(pos + 1) * batch];
        let p: Vec<Categorical> = idx.iter().map(|&j| preds[j].clone()).collect();
        let y: Vec<usize> = idx.iter().map(|&j| ys[j]).collect();
        let groups = group_by_class(&p, &y)?;
        matrix.slide_update(&groups)?;
        cdr.push(cdr_penalty(&matrix, &groups)?.value);
        let g = groups
            .iter()
            .flat_map(|g| {
                let row = matrix.row(g.class_label).probs();
                row.iter().zip(g.mean_prediction.probs()).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>()
            })
            .fold(0.0, f64::max);
        gap.push(g);
    }
    let first_below = cdr.iter().position(|&v| v < 1e-6).map(|i| i + 1);
    let mut logs = Vec::new();
    for w in gap.windows(2) {
        if w[1] > 1e-10 && w[0] > 0.0 {
            logs.push((w[1] / w[0]).ln());
        }
    }
    let measured_rate = if logs.is_empty() {
        f64::NAN
    } else {
        (logs.iter().sum::<f64>() / logs.len() as f64).exp()
    };
    Ok(Theorem2Report {
        beta,
        cdr,
        gap,
        first_below,
        measured_rate,
        expected_rate: 1.0 - beta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem3Report {
    pub class: usize,
    pub ks: Vec<usize>,
    /// Across-repetition variance of `m_Y[Y]` for each `K`.
    pub variances: Vec<f64>,
    /// Least-squares slope of `ln variance` against `ln K`.
    pub slope: f64,
}

/// For each resampling count `K`, runs `reps` independent sliding sequences in
/// which every update uses the mean prediction of `K` class-`class` samples
/// drawn with replacement, and measures the spread of the final row entry.
pub fn theorem3_check(
    model: &dyn Predictor,
    data: &DomainDataset,
    class: usize,
    ks: &[usize],
    reps: usize,
    beta: f64,
    updates: usize,
    seed: u64,
) -> Result<Theorem3Report> {
    if ks.len() < 2 || ks.contains(&0) {
        return Err(Error::arg("need at least two positive resampling counts"));
    }
    if reps < 2 || updates == 0 {
        return Err(Error::arg("need at least two repetitions and one update"));
    }
    let c = model.classes();
    if class >= c {
        return Err(Error::arg(format!("class {class} out of range")));
    }
    let preds: Vec<Categorical> = data
        .samples()
        .iter()
        .filter(|s| s.y == class)
        .map(|s| model.predict(&s.x))
        .collect::<Result<_>>()?;
    if preds.is_empty() {
        return Err(Error::arg(format!("no samples of class {class}")));
    }
    let mut variances = Vec::with_capacity(ks.len());
    for &k in ks {
        let finals = par_map(reps, |rep| -> Result<f64> {
            let mut rng = stream(seed, Purpose::Trial, &[k as u64, rep as u64]);
            let mut matrix = DiscriminantMatrix::init(c, beta)?;
            for _ in 0..updates {
                let draws: Vec<&Categorical> = (0..k).map(|_| &preds[rng.gen_range(0..preds.len())]).collect();
                let mean = Categorical::mean(draws)?;
                matrix.slide_update(&[crate::discriminant::ClassBatchPrediction {
                    class_label: class,
                    mean_prediction: mean,
                    support: k,
                }])?;
            }
            Ok(matrix.row(class).probs()[class])
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let mean = finals.iter().sum::<f64>() / reps as f64;
        let var = finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        variances.push(var);
    }
    if variances.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Numeric("zero variance; the model's predictions do not vary".into()));
    }
    let xs: Vec<f64> = ks.iter().map(|&k| (k as f64).ln()).collect();
    let ys: Vec<f64> = variances.iter().map(|v| v.ln()).collect();
    Ok(Theorem3Report {
        class,
        ks: ks.to_vec(),
        variances,
        slope: ols_slope(&xs, &ys),
    })
}

pub(crate) fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Determinant of the covariance of predicted distributions (first `c − 1`
/// coordinates), per class present in `data`, ordered by class.
pub fn prediction_uncertainty(model: &dyn Predictor, data: &DomainDataset) -> Result<Vec<(usize, f64)>> {
    let c = model.classes();
    let preds = predict_all(model, data)?;
    let ys = labels(data);
    let mut out = Vec::new();
    for class in 0..c {
        let rows: Vec<Vec<f64>> = preds
            .iter()
            .zip(&ys)
            .filter(|(_, &y)| y == class)
            .map(|(p, _)| p.probs()[..c - 1].to_vec())
            .collect();
        if rows.is_empty() {
            continue;
        }
        if rows.len() < c + 1 {
            return Err(Error::arg(format!(
                "class {class} has {} samples; need at least {}",
                rows.len(),
                c + 1
            )));
        }
        let cov = covariance(&Tensor2::from_rows(&rows)?)?;
        out.push((class, determinant(&cov)?));
    }
    if out.is_empty() {
        return Err(Error::arg("no samples to measure"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem4Report {
    /// Log-likelihood on the merged sources.
    pub source_ll: f64,
    pub target_ll: f64,
    pub ll_gap: f64,
    /// Risk of each source domain relative to the merged sources.
    pub source_risks: Vec<f64>,
    /// Risk of the target relative to the merged sources.
    pub target_risk: f64,
    /// Largest `|target_risk − source_risks[i]|`.
    pub risk_gap: f64,
}

/// Compares likelihood and Discriminant Risk on a mixture target with the
/// same quantities on the sources.
pub fn theorem4_check(model: &dyn Predictor, sources: &[DomainDataset], target: &DomainDataset) -> Result<Theorem4Report> {
    if sources.is_empty() || sources.iter().any(DomainDataset::is_empty) || target.is_empty() {
        return Err(Error::arg("theorem 4 check needs nonempty sources and target"));
    }
    let c = model.classes();
    let merged = DomainDataset::merge(sources)?;
    let merged_preds = predict_all(model, &merged)?;
    let merged_labels = labels(&merged);
    let merged_means = class_means(&merged_preds, &merged_labels, c);

    let source_risks = sources
        .iter()
        .map(|s| class_tv(&class_means(&predict_all(model, s)?, &labels(s), c), &merged_means))
        .collect::<Result<Vec<_>>>()?;

    let tgt_preds = predict_all(model, target)?;
    let tgt_labels = labels(target);
    let target_risk = class_tv(&class_means(&tgt_preds, &tgt_labels, c), &merged_means)?;
    let source_ll = log_likelihood_of(&merged_preds, &merged_labels);
    let target_ll = log_likelihood_of(&tgt_preds, &tgt_labels);
    let risk_gap = source_risks.iter().map(|r| (target_risk - r).abs()).fold(0.0, f64::max);
    Ok(Theorem4Report {
        source_ll,
        target_ll,
        ll_gap: (target_ll - source_ll).abs(),
        source_risks,
        target_risk,
        risk_gap,
    })
}
