//! End-to-end training sanity checks on generated data.

use drm_core::datagen::{Benchmark, DomainDataset, DomainSpec, GeneratorParams};
use drm_core::eval::accuracy;
use drm_core::trainer::{train, train_erm_baseline, ExperimentConfig};

/// Two classes, invariant block only, means two standard deviations and a
/// half apart from the boundary on each side.
fn separable_sources(seed: u64) -> DomainDataset {
    let params = GeneratorParams {
        class_means: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
        inv_std: 0.4,
        spurious_dirs: vec![vec![], vec![]],
        spurious_offset: 0.0,
    };
    let parts: Vec<_> = (0..3)
        .map(|d| {
            let spec = DomainSpec::new(d, 0.0, 1.0, 1000).unwrap();
            drm_core::datagen::generate_domain(&spec, &params, seed).unwrap()
        })
        .collect();
    DomainDataset::merge(&parts).unwrap()
}

#[test]
fn invariant_only_data_is_learned() {
    let data = separable_sources(0);
    assert_eq!(data.layout().spurious_len, 0);
    let config = ExperimentConfig::default();
    assert_eq!(config.steps, 2000);
    let out = train(&config, &data.training_view(), None).unwrap();
    let val = out.best_val_acc.unwrap();
    assert!(val > 0.95, "validation accuracy {val}");
    assert!(out.history.iter().all(|m| m.cdr.is_finite() && m.cdr >= 0.0));
}

#[test]
fn erm_baseline_fits_sources_but_not_the_shifted_target() {
    let bench = Benchmark::default_with_seed(0).unwrap();
    let sources = bench.merged_sources();
    let config = ExperimentConfig::desk_scale();
    let out = train_erm_baseline(&config, &sources.training_view(), None).unwrap();
    let model = out.best_model(&config.erm_baseline());
    let src = accuracy(&model, &sources).unwrap();
    let tgt = accuracy(&model, &bench.target).unwrap();
    assert!(src > 0.90, "source accuracy {src}");
    assert!(tgt < src, "target {tgt} vs source {src}");
}

#[test]
fn cdr_trajectory_stays_finite_on_the_benchmark() {
    let bench = Benchmark::default_with_seed(1).unwrap();
    let config = ExperimentConfig {
        steps: 500,
        ..ExperimentConfig::desk_scale()
    };
    let out = train(&config, &bench.merged_sources().training_view(), None).unwrap();
    assert_eq!(out.history.len(), 500);
    for m in &out.history {
        assert!(m.cdr.is_finite() && m.cdr >= 0.0, "step {}: cdr {}", m.step, m.cdr);
        assert!((m.total - (m.erm_loss + config.alpha * m.cdr)).abs() <= 1e-12 * m.total.abs().max(1.0));
    }
}
