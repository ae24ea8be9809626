use ddc_core::engine::EngineConfig;
use ddc_core::parallel::{stream_rng, Execution};
use ddc_core::synthetic::*;
use ddc_testkit::theorem;

fn millionths(x: f64) -> i64 {
    (x * 1e6).round() as i64
}

#[test]
fn condition_matches_exact_oracle() {
    let r = sufficient_condition(0.6, 0.8, 0.4, 0.64, 0.16).unwrap();
    let (lhs, rhs) = theorem::sides(0.6, 0.8, 0.4, 0.64, 0.16);
    assert!((r.lhs - lhs).abs() < 1e-12 && (r.rhs - rhs).abs() < 1e-12);
    assert!((r.lhs - 0.478).abs() < 5e-4 && (r.rhs - 0.204).abs() < 5e-4);
    assert!(r.holds);

    let r = sufficient_condition(0.9, 0.8, 0.4, 0.64, 0.16).unwrap();
    assert!((r.lhs - 0.884).abs() < 5e-4 && (r.rhs - 1.333).abs() < 5e-4);
    assert!(!r.holds);

    let grid = GridSpec::default();
    for &p in &grid.p {
        for &mu_c in &grid.mu_c {
            for &mu_i in &grid.mu_i {
                for spread in [0.0, 0.25] {
                    let m2 = |mu: f64| mu * mu + spread * mu * (1.0 - mu);
                    let r = sufficient_condition(p, mu_c, mu_i, m2(mu_c), m2(mu_i)).unwrap();
                    let exact = theorem::holds_exact(
                        millionths(p),
                        millionths(mu_c),
                        millionths(mu_i),
                        millionths(m2(mu_c)),
                        millionths(m2(mu_i)),
                    );
                    assert_eq!(r.holds, exact, "p={p} mu_c={mu_c} mu_i={mu_i} spread={spread}");
                }
            }
        }
    }
}

#[test]
fn beta_weights_have_requested_mean() {
    let spec = GeneratorSpec {
        p: 0.5,
        mu_c: 0.8,
        mu_i: 0.3,
        weight_spread: 0.2,
        ..GeneratorSpec::default()
    };
    let mut correct = Vec::new();
    let mut i = 0u64;
    while correct.len() < 10_000 {
        let v = sample_vote(&spec, &mut stream_rng(17, i));
        i += 1;
        assert!((0.0..=1.0).contains(&v.weight));
        if v.correct {
            correct.push(v.weight);
        }
    }
    let n = correct.len() as f64;
    let mean = correct.iter().sum::<f64>() / n;
    let sd = (spec.weight_spread * spec.mu_c * (1.0 - spec.mu_c) / n).sqrt();
    assert!((mean - spec.mu_c).abs() < 3.0 * sd, "mean {mean}, 3 sd {}", 3.0 * sd);
}

#[test]
fn distractors_are_uniform_labels() {
    let spec = GeneratorSpec {
        p: 0.2,
        distractors: 3,
        ..GeneratorSpec::default()
    };
    let mut seen = std::collections::BTreeSet::new();
    for i in 0..200 {
        let v = sample_vote(&spec, &mut stream_rng(1, i));
        assert_eq!(v.correct, v.answer == CORRECT);
        seen.insert(v.answer);
    }
    let expected: std::collections::BTreeSet<String> = ["correct", "distractor-1", "distractor-2", "distractor-3"]
        .into_iter()
        .map(String::from)
        .collect();
    assert_eq!(seen, expected);
}

#[test]
fn families_have_their_shapes() {
    let spec = GeneratorSpec {
        noise: 0.0,
        jitter: 0.0,
        ..GeneratorSpec::default()
    };
    let mut rng = stream_rng(3, 0);
    let degen = trajectory(&spec, Family::Degenerating, 0.5, &mut rng);
    assert!(degen.windows(2).all(|w| w[1] < w[0]));
    assert!((degen[0] - 8.0).abs() < 1e-12);

    let dip = trajectory(&spec, Family::DipRecover, 0.5, &mut rng);
    let lowest = dip.iter().copied().fold(f64::INFINITY, f64::min);
    assert!((8.0 - lowest - spec.dip_depth).abs() < 1e-3);
    assert_eq!(dip[0], 8.0);
    assert_eq!(*dip.last().unwrap(), 8.0);

    let flat = trajectory(&spec, Family::IsotropicNoise, 0.5, &mut rng);
    assert!(flat.iter().all(|&g| g == 8.0));
}

#[test]
fn experiments_repeat_and_strategies_agree() {
    let spec = GeneratorSpec {
        weight_spread: 0.3,
        seed: 99,
        ..GeneratorSpec::default()
    };
    let run = |execution| {
        compare_stopping(
            &spec,
            &CompareSettings {
                trials: 200,
                execution,
                ..CompareSettings::default()
            },
        )
        .unwrap()
    };
    let a = run(Execution::Sequential);
    let mut b = run(Execution::Parallel);
    let c = run(Execution::Parallel);
    assert_eq!(b, c);
    b.summary.settings.execution = Execution::Sequential;
    assert_eq!(a, b);
    assert_eq!(a.records.len(), 200);
    assert!(a.records.iter().all(|r| r.schema_version == SCHEMA_VERSION));
}

#[test]
fn uninformative_weights_never_speed_up_stopping() {
    for mu in [0.3, 0.6, 0.9] {
        let s = compare_stopping(
            &GeneratorSpec {
                p: 0.7,
                mu_c: mu,
                mu_i: mu,
                seed: 4,
                ..GeneratorSpec::default()
            },
            &CompareSettings {
                trials: 1000,
                ..CompareSettings::default()
            },
        )
        .unwrap()
        .summary;
        assert!(s.cow.mean_n >= s.frq.mean_n, "mu {mu}: {} < {}", s.cow.mean_n, s.frq.mean_n);
    }
}

#[test]
fn informative_weights_stop_sooner() {
    let s = compare_stopping(
        &GeneratorSpec {
            p: 0.6,
            mu_c: 0.9,
            mu_i: 0.2,
            seed: 8,
            ..GeneratorSpec::default()
        },
        &CompareSettings {
            trials: 1000,
            ..CompareSettings::default()
        },
    )
    .unwrap()
    .summary;
    assert!(s.condition.holds);
    assert!(s.cow.mean_n < s.frq.mean_n, "{} vs {}", s.cow.mean_n, s.frq.mean_n);
}

#[test]
fn accuracy_floor_against_fixed_sixteen() {
    for (p, seed) in [(0.7, 1), (0.8, 2), (0.9, 3)] {
        let s = compare_stopping(
            &GeneratorSpec {
                p,
                mu_c: 0.8,
                mu_i: 0.3,
                weight_spread: 0.1,
                seed,
                ..GeneratorSpec::default()
            },
            &CompareSettings {
                trials: 2000,
                sc_budget: 16,
                ..CompareSettings::default()
            },
        )
        .unwrap()
        .summary;
        assert!(
            s.cow.accuracy >= s.sc.accuracy - 0.02,
            "p {p}: {} vs {}",
            s.cow.accuracy,
            s.sc.accuracy
        );
    }
}

#[test]
fn halving_weights_is_a_brake() {
    let spec = GeneratorSpec {
        p: 0.65,
        mu_c: 0.7,
        mu_i: 0.3,
        weight_spread: 0.2,
        seed: 12,
        ..GeneratorSpec::default()
    };
    let run = |weight_scale| {
        compare_stopping(
            &spec,
            &CompareSettings {
                trials: 500,
                weight_scale,
                ..CompareSettings::default()
            },
        )
        .unwrap()
    };
    let full = run(1.0);
    let half = run(0.5);
    assert!(half.summary.cow.mean_n >= full.summary.cow.mean_n);
    for (a, b) in full.records.iter().zip(&half.records) {
        assert!(b.samples[0].n_paths_at_stop >= a.samples[0].n_paths_at_stop, "trial {}", a.trial);
    }
}

#[test]
fn pruning_examples() {
    let spec = GeneratorSpec {
        mu_c: 0.9,
        mu_i: 0.9,
        seed: 6,
        ..GeneratorSpec::default()
    };
    assert!(spec.dip_depth < 2.0 * spec.noise);
    let report = pruning_separation_experiment(
        &spec,
        &[Family::Degenerating, Family::DipRecover, Family::StableHigh],
        &PruningSettings {
            paths_per_family: 200,
            ..PruningSettings::default()
        },
    )
    .unwrap();
    let degen = report.family(Family::Degenerating).unwrap();
    let dip = report.family(Family::DipRecover).unwrap();
    let stable = report.family(Family::StableHigh).unwrap();
    assert!(degen.prune_rate >= 0.95);
    assert!(dip.survival_rate >= 0.90);
    assert_eq!(stable.survival_rate, 1.0);
    assert!(degen.median_instability.unwrap() > dip.median_instability.unwrap());
}

#[test]
fn engine_monte_carlo_is_reproducible() {
    let spec = GeneratorSpec {
        p: 0.8,
        family: Family::DipRecover,
        seed: 2,
        ..GeneratorSpec::default()
    };
    let cfg = EngineConfig {
        window: 64,
        budget: 64,
        ..EngineConfig::default()
    };
    let a = engine_monte_carlo(&spec, &cfg, 20, Execution::Sequential).unwrap();
    let b = engine_monte_carlo(&spec, &cfg, 20, Execution::Parallel).unwrap();
    assert_eq!(a, b);
    assert!(a.records.iter().all(|r| r.paths_generated <= 64));
}

#[test]
fn invalid_specs_are_rejected() {
    let bad = [
        GeneratorSpec {
            p: 1.0,
            ..GeneratorSpec::default()
        },
        GeneratorSpec {
            mu_c: 0.0,
            ..GeneratorSpec::default()
        },
        GeneratorSpec {
            distractors: 0,
            ..GeneratorSpec::default()
        },
        GeneratorSpec {
            weight_spread: 1.0,
            ..GeneratorSpec::default()
        },
        GeneratorSpec {
            path_len: 1,
            ..GeneratorSpec::default()
        },
    ];
    for spec in bad {
        assert!(matches!(spec.validate(), Err(SyntheticError::InvalidSpec(_))), "{spec:?}");
    }
    assert!(matches!(
        compare_stopping(
            &GeneratorSpec::default(),
            &CompareSettings {
                trials: 0,
                ..CompareSettings::default()
            }
        ),
        Err(SyntheticError::InvalidSpec(_))
    ));
}
