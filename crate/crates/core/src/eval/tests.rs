use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::datagen::{generate_mixture_target, Benchmark, FeatureLayout, Sample};
use crate::trainer::{checkpoint, ExperimentConfig, HeadMode, TrainState};

struct Constant(Categorical);

impl Predictor for Constant {
    fn classes(&self) -> usize {
        self.0.len()
    }
    fn predict(&self, _: &[f64]) -> Result<Categorical> {
        Ok(self.0.clone())
    }
}

/// One-hot on the sign of the first coordinate.
struct Sign;

impl Predictor for Sign {
    fn classes(&self) -> usize {
        2
    }
    fn predict(&self, x: &[f64]) -> Result<Categorical> {
        Categorical::one_hot(2, usize::from(x[0] > 0.0))
    }
}

/// Softmax of a fixed linear map, for smooth random predictions.
struct Linear(Vec<Vec<f64>>);

impl Predictor for Linear {
    fn classes(&self) -> usize {
        self.0.len()
    }
    fn predict(&self, x: &[f64]) -> Result<Categorical> {
        let logits: Vec<f64> = self.0.iter().map(|w| crate::numcore::dot(w, x)).collect();
        crate::numcore::softmax(&logits)
    }
}

fn layout(dim: usize) -> FeatureLayout {
    FeatureLayout {
        invariant_start: 0,
        invariant_len: dim,
        spurious_start: dim,
        spurious_len: 0,
    }
}

fn dataset(rows: &[(f64, usize, u32)]) -> DomainDataset {
    let samples = rows
        .iter()
        .map(|&(x, y, d)| Sample {
            x: vec![x],
            y,
            domain_id: d,
        })
        .collect();
    DomainDataset::new(2, layout(1), samples).unwrap()
}

fn random_dataset(n: usize, c: usize, seed: u64) -> DomainDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n)
        .map(|_| Sample {
            x: (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            y: rng.gen_range(0..c),
            domain_id: rng.gen_range(0..3),
        })
        .collect();
    DomainDataset::new(c, layout(3), samples).unwrap()
}

fn random_linear(c: usize, seed: u64) -> Linear {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Linear((0..c).map(|_| (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect()).collect())
}

#[test]
fn confusion_of_oracle_and_constant_models() {
    let data = dataset(&[(-1.0, 0, 0), (-0.5, 0, 0), (0.3, 1, 0), (2.0, 1, 0)]);
    let m = confusion(&Sign, &data, Some(0)).unwrap();
    assert_eq!(m.counts, vec![vec![2, 0], vec![0, 2]]);
    assert_eq!(m.row_sums(), vec![2, 2]);

    let constant = Constant(Categorical::new(vec![0.2, 0.8]).unwrap());
    let m = confusion(&constant, &data, None).unwrap();
    assert_eq!(m.counts, vec![vec![0, 2], vec![0, 2]]);
    assert!(confusion(&constant, &dataset(&[]), None).is_err());
    assert_eq!(m.to_csv(), "true,pred_0,pred_1\n0,0,2\n1,0,2\n");
}

#[test]
fn normalized_confusion_matches_tally_oracle() {
    let data = random_dataset(500, 4, 1);
    let model = random_linear(4, 2);
    let m = confusion(&model, &data, None).unwrap();
    let mut tally = vec![vec![0.0; 4]; 4];
    let mut counts = vec![0.0; 4];
    for s in data.samples() {
        let p = model.predict(&s.x).unwrap().probs().to_vec();
        let k = (0..4).fold(0, |b, k| if p[k] > p[b] { k } else { b });
        tally[s.y][k] += 1.0;
        counts[s.y] += 1.0;
    }
    for (row, (t, n)) in m.normalized().iter().zip(tally.iter().zip(&counts)) {
        for (a, b) in row.iter().zip(t) {
            assert!((a - b / n).abs() < 1e-15);
        }
    }
}

#[test]
fn confusions_of_disjoint_slices_add_up() {
    let data = random_dataset(300, 3, 3);
    let model = random_linear(3, 4);
    let whole = confusion(&model, &data, None).unwrap();
    let mut sum = ConfusionMatrix::zeros(3, None);
    for part in domain_confusions(&model, &data).unwrap() {
        sum.add(&part).unwrap();
    }
    assert_eq!(sum.counts, whole.counts);
    assert_eq!(sum.total(), 300);
}

#[test]
fn risk_trivial_cases() {
    let data = random_dataset(200, 3, 5);
    let model = random_linear(3, 6);
    assert_eq!(discriminant_risk(&model, &data, &data).unwrap(), 0.0);

    // Overall: half of each class predicted 0, half 1, so the mean is uniform.
    let full = dataset(&[(1.0, 0, 0), (-1.0, 0, 0), (1.0, 1, 0), (-1.0, 1, 0)]);
    let subset = dataset(&[(-1.0, 0, 0), (-1.0, 1, 0)]);
    let r = discriminant_risk(&Sign, &subset, &full).unwrap();
    assert!((r - 0.5).abs() < 1e-15);
    assert!(discriminant_risk(&Sign, &dataset(&[]), &full).is_err());
}

#[test]
fn risk_matches_two_pass_recomputation() {
    let data = random_dataset(400, 3, 7);
    let model = random_linear(3, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let idx: Vec<usize> = (0..data.len()).filter(|_| rng.gen_bool(0.3)).collect();
        let subset = data.select(&idx);
        let fast = discriminant_risk(&model, &subset, &data).unwrap();

        // Two passes: first class counts, then per-class sums.
        let mut oracle = 0.0;
        let mut present = 0.0;
        for class in 0..3 {
            let mean = |d: &DomainDataset| -> Option<Vec<f64>> {
                let members: Vec<_> = d.samples().iter().filter(|s| s.y == class).collect();
                if members.is_empty() {
                    return None;
                }
                let mut m = vec![0.0; 3];
                for s in &members {
                    for (a, b) in m.iter_mut().zip(model.predict(&s.x).unwrap().probs()) {
                        *a += b / members.len() as f64;
                    }
                }
                Some(m)
            };
            if let (Some(a), Some(b)) = (mean(&subset), mean(&data)) {
                oracle += 0.5 * a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>();
                present += 1.0;
            }
        }
        assert!((fast - oracle / present).abs() < 1e-12);
        assert!((0.0..=2.0).contains(&fast));
    }
}

#[test]
fn theorem1_target_equal_to_source() {
    let data = random_dataset(300, 2, 10);
    let model = random_linear(2, 11);
    let report = theorem1_check(&model, &data, &data, 2, 20, 0).unwrap();
    assert!(report.trials.iter().all(|t| t.lhs == 0.0 && t.satisfied));
    assert!(report.passed());
    assert!(theorem1_check(&model, &data, &data, 1, 5, 0).is_err());
    assert!(theorem1_check(&model, &data, &data, 301, 5, 0).is_err());
}

#[test]
fn theorem1_iid_halves_have_small_terms() {
    let data = random_dataset(4000, 2, 12);
    let model = random_linear(2, 13);
    let report = theorem1_check(&model, &data, &data, 2, 10, 1).unwrap();
    for t in &report.trials {
        assert!(t.mean_subset_risk < 0.05 && t.max_djs_source < 0.05);
    }
}

#[test]
fn theorem2_constant_model_converges_geometrically() {
    let data = random_dataset(200, 2, 14);
    let model = Constant(Categorical::new(vec![0.3, 0.7]).unwrap());
    let r = theorem2_check(&model, &data, 0.95, 100, 32, 0).unwrap();
    assert!(r.first_below.unwrap() <= 10);
    assert!(r.rate_error() < 0.1, "{} vs {}", r.measured_rate, r.expected_rate);
}

#[test]
fn uncertainty_trivial_properties() {
    let data = random_dataset(100, 3, 15);
    let constant = Constant(Categorical::new(vec![0.2, 0.3, 0.5]).unwrap());
    for (_, det) in prediction_uncertainty(&constant, &data).unwrap() {
        assert!(det.abs() < 1e-24, "{det}");
    }
    let model = random_linear(3, 16);
    let a = prediction_uncertainty(&model, &data).unwrap();
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.reverse();
    let b = prediction_uncertainty(&model, &data.select(&idx)).unwrap();
    for ((ca, da), (cb, db)) in a.iter().zip(&b) {
        assert_eq!(ca, cb);
        assert!((da - db).abs() <= 1e-9 * da.abs());
    }
    let tiny = dataset(&[(1.0, 0, 0), (2.0, 0, 0)]);
    assert!(prediction_uncertainty(&Sign, &tiny).is_err());
}

#[test]
fn spurious_oracle_is_more_uncertain() {
    let bench = Benchmark::default_with_seed(17).unwrap();
    let sources = bench.merged_sources();
    let fit = OracleFit::default();
    let inv = fit_oracle(&sources, FeatureBlock::Invariant, &fit).unwrap();
    let sup = fit_oracle(&sources, FeatureBlock::Spurious, &fit).unwrap();
    let mixed = bench.all();
    let ui = prediction_uncertainty(&inv, &mixed).unwrap();
    let us = prediction_uncertainty(&sup, &mixed).unwrap();
    for ((_, a), (_, b)) in ui.iter().zip(&us) {
        assert!(b > a, "spurious {b} vs invariant {a}");
    }
}

#[test]
fn theorem4_one_hot_mixture_reproduces_source() {
    let bench = Benchmark::default_with_seed(18).unwrap();
    let fit = OracleFit::default();
    let inv = fit_oracle(&bench.merged_sources(), FeatureBlock::Invariant, &fit).unwrap();
    let mix = generate_mixture_target(&bench.sources, &[0.0, 1.0, 0.0], 20_000, 3).unwrap();
    assert!(mix.components.iter().all(|&k| k == 1));
    let report = theorem4_check(&inv, &bench.sources, &mix.dataset).unwrap();
    let source1_ll = log_likelihood(&inv, &bench.sources[1]).unwrap();
    assert!((report.target_ll - source1_ll).abs() < 0.03);
    let merged = bench.merged_sources();
    let source1_risk = discriminant_risk(&inv, &bench.sources[1], &merged).unwrap();
    assert!((report.source_risks[1] - source1_risk).abs() < 1e-12);
    assert!((report.target_risk - source1_risk).abs() < 0.03);
}

#[test]
fn comparison_of_identical_models() {
    let bench = Benchmark::default_with_seed(19).unwrap();
    let config = ExperimentConfig::default();
    let state = TrainState::init(&config, bench.params.layout().dim(), 2).unwrap();
    let model = state.snapshot(HeadMode::Bayesian, 3, 0);
    let run = RunSummary {
        config: config.clone(),
        history: Vec::new(),
    };
    let sources = bench.merged_sources();
    let report = compare_report((&run, &model), (&run, &model), &sources, &bench.target, Vec::new()).unwrap();
    let d = &report.deltas;
    for v in [d.source_accuracy, d.target_accuracy, d.confusion_divergence, d.source_risk, d.target_risk] {
        assert_eq!(v, 0.0);
    }
    let text = serde_json::to_string(&report).unwrap();
    assert_eq!(serde_json::from_str::<ComparisonReport>(&text).unwrap(), report);
    assert!(report.to_text().contains("target accuracy"));

    let other = RunSummary {
        config: ExperimentConfig { seed: 1, ..config },
        history: Vec::new(),
    };
    assert!(compare_report((&run, &model), (&other, &model), &sources, &bench.target, Vec::new()).is_err());
}

#[test]
fn ablation_arms_cover_the_grid() {
    let arms = AblationArm::all();
    assert_eq!(arms.len(), 6);
    let labels: std::collections::BTreeSet<_> = arms.iter().map(AblationArm::label).collect();
    assert_eq!(labels.len(), 6);
    let base = ExperimentConfig::default();
    let cdr_only = AblationArm {
        erm_term: false,
        cdr: true,
        bayesian: true,
    }
    .apply(&base);
    assert!(!cdr_only.erm_term && cdr_only.alpha == base.alpha);
    assert_eq!(arms[0].apply(&base), base.erm_baseline());
}

#[test]
fn evaluation_is_read_only() {
    let bench = Benchmark::default_with_seed(20).unwrap();
    let config = ExperimentConfig::default();
    let state = TrainState::init(&config, bench.params.layout().dim(), 2).unwrap();
    let before = checkpoint::encode(&state);
    let model = state.snapshot(config.head, config.samples, config.seed);
    let sources = bench.merged_sources();
    arm_report("x", &model, &sources, &bench.target).unwrap();
    theorem1_check(&model, &sources, &bench.target, 2, 3, 0).unwrap();
    assert_eq!(checkpoint::encode(&state), before);
}

#[test]
fn confusion_divergence_basics() {
    let a = ConfusionMatrix {
        classes: 2,
        counts: vec![vec![50, 0], vec![0, 50]],
        domain_id: Some(0),
    };
    assert_eq!(confusion_divergence(&[a.clone(), a.clone()]).unwrap(), 0.0);
    assert_eq!(confusion_divergence(std::slice::from_ref(&a)).unwrap(), 0.0);
    let b = ConfusionMatrix {
        counts: vec![vec![0, 50], vec![50, 0]],
        ..a.clone()
    };
    let d = confusion_divergence(&[a, b]).unwrap();
    assert!(d > 0.5 && d <= std::f64::consts::LN_2);
}

#[test]
fn plot_rows_are_long_format() {
    let history = vec![crate::trainer::StepMetrics {
        step: 1,
        erm_loss: 0.5,
        cdr: 0.1,
        total: 1.0,
        elbo: 0.7,
        val_acc: Some(0.9),
    }];
    let rows = plot_rows(&[("drm", &history)]);
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[3].series, "drm.val_acc");
}

#[test]
fn thread_cap_is_respected() {
    let v = par_map(17, |i| i * 2);
    assert_eq!(v, (0..17).map(|i| i * 2).collect::<Vec<_>>());
}
