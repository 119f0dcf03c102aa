//! The theorem-verification suite with pass/fail verdicts, shared by the
//! `verify-theorems` command and the acceptance tests.

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::datagen::{generate_mixture_target, Benchmark};
use crate::distributions::Categorical;
use crate::error::Result;
use crate::trainer::{train, ExperimentConfig};

use super::{
    fit_oracle, theorem1_check, theorem2_check, theorem3_check, theorem4_check, FeatureBlock, OracleFit, Predictor,
};

/// A model that ignores its input.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantPredictor(pub Categorical);

impl Predictor for ConstantPredictor {
    fn classes(&self) -> usize {
        self.0.len()
    }

    fn predict(&self, _: &[f64]) -> Result<Categorical> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub summary: String,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSettings {
    /// Training settings for the bound check (seed is overridden per run).
    pub config: ExperimentConfig,
    /// Benchmark seeds for the trained-model bound check.
    pub bound_seeds: Vec<u64>,
    pub bound_splits: Vec<usize>,
    pub bound_trials: usize,
    pub variance_ks: Vec<usize>,
    pub variance_reps: usize,
    pub transfer_seeds: usize,
    pub transfer_samples: usize,
    /// Mixture weights over the three default sources.
    pub transfer_weights: Vec<f64>,
    pub seed: u64,
}

impl Default for SuiteSettings {
    fn default() -> Self {
        Self {
            config: ExperimentConfig::desk_scale(),
            bound_seeds: vec![0],
            bound_splits: vec![2, 4, 8],
            bound_trials: 200,
            variance_ks: vec![1, 3, 9, 27],
            variance_reps: 200,
            transfer_seeds: 50,
            transfer_samples: 10_000,
            transfer_weights: vec![0.05, 0.15, 0.8],
            seed: 0,
        }
    }
}

/// CDR of a constant model under β-sliding: below `1e-6` within 500 updates
/// and a gap shrinking at rate `1 − β` (within 10%).
pub fn convergence_check(settings: &SuiteSettings) -> Result<CheckOutcome> {
    let bench = Benchmark::default_with_seed(settings.seed)?;
    let model = ConstantPredictor(Categorical::new(vec![0.3, 0.7])?);
    let r = theorem2_check(&model, &bench.merged_sources(), settings.config.beta, 500, 32, settings.seed)?;
    let passed = r.first_below.is_some_and(|u| u <= 500) && r.rate_error() <= 0.10;
    Ok(CheckOutcome {
        name: "loss convergence".into(),
        passed,
        summary: format!(
            "CDR < 1e-6 after {:?} updates; gap rate {:.5} vs expected {:.5} ({:.2}% off)",
            r.first_below,
            r.measured_rate,
            r.expected_rate,
            100.0 * r.rate_error()
        ),
        detail: json!({
            "first_below": r.first_below,
            "measured_rate": r.measured_rate,
            "expected_rate": r.expected_rate,
            "cdr_head": &r.cdr[..r.cdr.len().min(10)],
        }),
    })
}

/// Variance of a Discriminant-matrix entry against resampling count.
pub fn variance_check(settings: &SuiteSettings) -> Result<CheckOutcome> {
    let bench = Benchmark::default_with_seed(settings.seed)?;
    let sources = bench.merged_sources();
    let fit = OracleFit {
        seed: settings.seed,
        ..OracleFit::default()
    };
    let oracle = fit_oracle(&sources, FeatureBlock::Invariant, &fit)?;
    let mut slopes = Vec::new();
    let mut details = Vec::new();
    for class in 0..oracle.classes() {
        let r = theorem3_check(
            &oracle,
            &sources,
            class,
            &settings.variance_ks,
            settings.variance_reps,
            settings.config.beta,
            20,
            settings.seed,
        )?;
        slopes.push(r.slope);
        details.push(r);
    }
    let passed = slopes.iter().all(|s| (-1.3..=-0.7).contains(s));
    Ok(CheckOutcome {
        name: "variance scaling".into(),
        passed,
        summary: format!("log-log slopes per class {slopes:.3?} (need [-1.3, -0.7])"),
        detail: serde_json::to_value(details)?,
    })
}

/// Bound check on DRM- and ERM-trained models.
pub fn bound_check(settings: &SuiteSettings) -> Result<CheckOutcome> {
    let mut rows = Vec::new();
    let mut passed = true;
    let mut lines = Vec::new();
    for &seed in &settings.bound_seeds {
        let bench = Benchmark::default_with_seed(seed)?;
        let sources = bench.merged_sources();
        let base = ExperimentConfig {
            seed,
            ..settings.config.clone()
        };
        for (arm, config) in [("DRM", base.clone()), ("ERM", base.erm_baseline())] {
            let out = train(&config, &sources.training_view(), None)?;
            let model = out.best_model(&config);
            for &n in &settings.bound_splits {
                let r = theorem1_check(&model, &sources, &bench.target, n, settings.bound_trials, seed)?;
                passed &= r.passed();
                lines.push(format!(
                    "{arm} seed {seed} N={n}: {} violations with assumption, {} overall, assumption rate {:.3}",
                    r.violations_with_assumption, r.violations, r.assumption_rate
                ));
                rows.push(json!({
                    "arm": arm,
                    "seed": seed,
                    "n_splits": n,
                    "violations": r.violations,
                    "violations_with_assumption": r.violations_with_assumption,
                    "assumption_rate": r.assumption_rate,
                    "lhs": r.trials.first().map(|t| t.lhs),
                    "min_slack": r.trials.iter().map(|t| t.rhs - t.lhs).fold(f64::INFINITY, f64::min),
                }));
            }
        }
    }
    Ok(CheckOutcome {
        name: "upper bound".into(),
        passed,
        summary: lines.join("; "),
        detail: serde_json::Value::Array(rows),
    })
}

/// Transfer gaps of the invariant oracle versus the spurious oracle.
pub fn transfer_check(settings: &SuiteSettings) -> Result<CheckOutcome> {
    let mut worst_ll: f64 = 0.0;
    let mut worst_risk: f64 = 0.0;
    let mut wins = 0usize;
    let mut rows = Vec::new();
    for k in 0..settings.transfer_seeds as u64 {
        let seed = settings.seed.wrapping_add(k);
        let bench = Benchmark::default_with_seed(seed)?;
        let sources = bench.merged_sources();
        let fit = OracleFit {
            seed,
            ..OracleFit::default()
        };
        let inv = fit_oracle(&sources, FeatureBlock::Invariant, &fit)?;
        let sup = fit_oracle(&sources, FeatureBlock::Spurious, &fit)?;
        let mix = generate_mixture_target(&bench.sources, &settings.transfer_weights, settings.transfer_samples, seed)?;
        let ri = theorem4_check(&inv, &bench.sources, &mix.dataset)?;
        let rs = theorem4_check(&sup, &bench.sources, &mix.dataset)?;
        worst_ll = worst_ll.max(ri.ll_gap);
        worst_risk = worst_risk.max(ri.risk_gap);
        if rs.ll_gap > ri.ll_gap && rs.risk_gap > ri.risk_gap {
            wins += 1;
        }
        rows.push(json!({ "seed": seed, "invariant": ri, "spurious": rs }));
    }
    let n = settings.transfer_seeds.max(1);
    let win_rate = wins as f64 / n as f64;
    let passed = worst_ll < 0.05 && worst_risk < 0.05 && win_rate >= 0.95;
    Ok(CheckOutcome {
        name: "perfect transfer".into(),
        passed,
        summary: format!(
            "invariant oracle worst gaps: log-likelihood {worst_ll:.4}, risk {worst_risk:.4}; spurious gaps larger in {wins}/{n} seeds"
        ),
        detail: serde_json::Value::Array(rows),
    })
}

pub fn run_suite(settings: &SuiteSettings) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        convergence_check(settings)?,
        variance_check(settings)?,
        bound_check(settings)?,
        transfer_check(settings)?,
    ])
}
