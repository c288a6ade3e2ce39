use knn_prompting::harness::report::read_json_report;
use knn_prompting::harness::scaling::fit_log_log;
use knn_prompting::harness::synthetic::SyntheticSpec;
use knn_prompting::harness::{
    emit_report, mean_std, power_law_fit, run_experiment, scaling_curve, ExperimentConfig, Method, ReportFormat,
    RunResult, SampleScope, ScalingPoint,
};
use knn_prompting::neighbors::DistanceKind;
use knn_prompting::prompting::LabeledExample;
use knn_prompting::Error;

fn run_on(spec: &SyntheticSpec, config: ExperimentConfig) -> knn_prompting::Result<RunResult> {
    let backend = spec.backend().unwrap();
    let task = spec.task();
    run_experiment(&config, &task, &spec.pool("train", 40), &spec.pool("test", 25), &backend)
}

fn run(spec: &SyntheticSpec, config: ExperimentConfig) -> RunResult {
    run_on(spec, config).unwrap()
}

#[test]
fn noise_free_separable_knn_is_perfect() {
    let r = run(&SyntheticSpec::default(), ExperimentConfig::default());
    assert!(r.per_seed_accuracy().iter().all(|&a| a == 1.0));
    assert_eq!(r.mean, 1.0);
    assert_eq!(r.std, 0.0);
    assert_eq!(r.seeds.len(), 5);
    assert_eq!(r.seeds[0].n_test, 50);
}

#[test]
fn icl_is_perfect_when_the_signal_is_in_label_words() {
    let spec = SyntheticSpec {
        signal: 0.0,
        label_signal: 1.0,
        ..SyntheticSpec::default()
    };
    for method in [Method::Icl, Method::IclEnsemble, Method::ContextualCalibration] {
        let r = run(&spec, ExperimentConfig { method, m: 4, ..ExperimentConfig::default() });
        assert_eq!(r.mean, 1.0, "{method}");
        assert!(r.audit.iter().all(|a| a.label_scores.as_ref().is_some_and(|s| s.len() == 2)));
    }
}

#[test]
fn l2_over_hidden_states() {
    let spec = SyntheticSpec {
        noise: 0.2,
        ..SyntheticSpec::default()
    };
    let r = run(&spec, ExperimentConfig { distance: DistanceKind::L2, ..ExperimentConfig::default() });
    assert!(r.mean >= 0.9, "{}", r.mean);
}

#[test]
fn repeated_seed_gives_zero_std() {
    let spec = SyntheticSpec {
        noise: 0.8,
        prefix_noise: 0.5,
        ..SyntheticSpec::default()
    };
    let r = run(&spec, ExperimentConfig { seeds: vec![0, 0], m: 4, ..ExperimentConfig::default() });
    assert_eq!(r.seeds[0].accuracy, r.seeds[1].accuracy);
    assert_eq!(r.std, 0.0);
    let (mean, std) = mean_std(&r.per_seed_accuracy());
    assert_eq!((mean, std), (r.mean, r.std));
}

#[test]
fn audit_names_every_neighbor() {
    let spec = SyntheticSpec {
        noise: 0.5,
        ..SyntheticSpec::default()
    };
    let r = run(&spec, ExperimentConfig { seeds: vec![3], ..ExperimentConfig::default() });
    assert_eq!(r.audit.len(), 50);
    for rec in &r.audit {
        let n = rec.neighbors.as_ref().unwrap();
        assert_eq!(n.len(), 3);
        assert!(n.iter().all(|x| !x.anchor_id.is_empty() && (x.label == "negative" || x.label == "positive")));
        assert!(n.windows(2).all(|w| w[0].distance <= w[1].distance));
        assert_eq!(rec.vote_counts.as_ref().unwrap().values().sum::<usize>(), 3);
        assert_eq!(rec.correct, rec.gold == rec.predicted);
    }
}

#[test]
fn empty_anchor_set_falls_back_to_icl() {
    let spec = SyntheticSpec {
        signal: 0.0,
        label_signal: 1.0,
        ..SyntheticSpec::default()
    };
    let r = run(&spec, ExperimentConfig { m: 2, demo_per_class: 2, ..ExperimentConfig::default() });
    assert!(r.seeds.iter().all(|s| s.fallback_to_icl && s.k_effective.is_none()));
    assert!(r.audit.iter().all(|a| a.neighbors.is_none()));
    assert_eq!(r.mean, 1.0);
}

#[test]
fn k_is_clamped_to_the_store() {
    let r = run(&SyntheticSpec::default(), ExperimentConfig { m: 3, k: 50, ..ExperimentConfig::default() });
    assert!(r.seeds.iter().all(|s| s.k_effective == Some(4)));
    let centroid = run(
        &SyntheticSpec::default(),
        ExperimentConfig { m: 3, k: 3, centroid: true, ..ExperimentConfig::default() },
    );
    assert!(centroid.seeds.iter().all(|s| s.k_effective == Some(2)));
}

#[test]
fn parallel_predictions_match_sequential() {
    let spec = SyntheticSpec {
        noise: 0.6,
        prefix_noise: 0.3,
        ..SyntheticSpec::default()
    };
    for method in Method::ALL {
        let base = ExperimentConfig { method, m: 6, demo_per_class: 2, ..ExperimentConfig::default() };
        let seq = run(&spec, base.clone());
        let par = run(&spec, ExperimentConfig { parallelism: 4, ..base });
        assert_eq!(seq.seeds, par.seeds, "{method}");
        assert_eq!(seq.audit, par.audit, "{method}");
    }
}

#[test]
fn imbalanced_test_side() {
    let spec = SyntheticSpec::default();
    let r = run_experiment(
        &ExperimentConfig {
            imbalance_lambda: 0.2,
            imbalance_scope: SampleScope::TestOnly,
            test_limit: Some(40),
            seeds: vec![0],
            ..ExperimentConfig::default()
        },
        &spec.task(),
        &spec.pool("train", 40),
        &spec.pool("test", 40),
        &spec.backend().unwrap(),
    )
    .unwrap();
    let positive = r.audit.iter().filter(|a| a.gold == "positive").count();
    assert_eq!(r.audit.len(), 40);
    assert_eq!(positive, 8);
}

#[test]
fn errors_name_the_failing_seed() {
    let spec = SyntheticSpec::default();
    let err = run_on(&spec, ExperimentConfig { m: 41, seeds: vec![7], ..ExperimentConfig::default() }).unwrap_err();
    assert!(err.to_string().contains("seed 7"), "{err}");
    assert!(matches!(err.root(), Error::InsufficientData(_)));

    let mut test = spec.pool("test", 2);
    test.push(LabeledExample::new("odd", "x <c0>", "neutral"));
    let err = run_experiment(
        &ExperimentConfig::default(),
        &spec.task(),
        &spec.pool("train", 40),
        &test,
        &spec.backend().unwrap(),
    )
    .unwrap_err();
    assert!(matches!(err.root(), Error::UnknownLabel(_)), "{err}");
}

#[test]
fn scaling_curve_shape() {
    let spec = SyntheticSpec {
        noise: 0.5,
        signal: 0.5,
        ..SyntheticSpec::default()
    };
    let backend = spec.backend().unwrap();
    let task = spec.task();
    let train = spec.pool("train", 40);
    let test = spec.pool("test", 20);
    let config = ExperimentConfig { seeds: vec![0, 1, 2], ..ExperimentConfig::default() };
    let one = scaling_curve(&config, &[2], &task, &train, &test, &backend).unwrap();
    let direct = run_experiment(&ExperimentConfig { m: 2, ..config.clone() }, &task, &train, &test, &backend).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].error, 1.0 - direct.mean);
    let three = scaling_curve(&config, &[2, 4, 8], &task, &train, &test, &backend).unwrap();
    assert_eq!(three.iter().map(|p| p.m).collect::<Vec<_>>(), vec![2, 4, 8]);
    assert_eq!(three[0], one[0]);
    assert!(matches!(
        scaling_curve(&config, &[8, 2], &task, &train, &test, &backend),
        Err(Error::InvalidConfig(_))
    ));
}

/// Closed-form least squares for y = a + b x, by Cramer's rule.
fn ols_oracle(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let sx: f64 = xs.iter().sum();
    let sy: f64 = ys.iter().sum();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| x * y).sum();
    let det = n * sxx - sx * sx;
    ((sy * sxx - sx * sxy) / det, (n * sxy - sx * sy) / det)
}

fn points(ms: &[usize], errors: &[f64]) -> Vec<ScalingPoint> {
    ms.iter()
        .zip(errors)
        .map(|(&m, &error)| ScalingPoint { m, accuracy: 1.0 - error, error, std: 0.0 })
        .collect()
}

#[test]
fn noisy_fit_matches_textbook_ols() {
    let ms = [2usize, 4, 8, 16, 32, 64, 128];
    let errors = [0.41, 0.33, 0.22, 0.19, 0.12, 0.10, 0.061];
    let fit = power_law_fit(&points(&ms, &errors)).unwrap();
    let lx: Vec<f64> = ms.iter().map(|&m| (m as f64).ln()).collect();
    let ly: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
    let (a, b) = ols_oracle(&lx, &ly);
    assert!((fit.beta - b).abs() < 1e-9);
    assert!((fit.alpha - a.exp()).abs() < 1e-9);
    let rms = (lx.iter().zip(&ly).map(|(x, y)| (y - a - b * x).powi(2)).sum::<f64>() / 7.0).sqrt();
    assert!((fit.residual - rms).abs() < 1e-9);
}

#[test]
fn rescaling_m_leaves_beta_unchanged() {
    let xs = [2.0, 8.0, 32.0, 128.0];
    let ys = [0.3, 0.17, 0.11, 0.05];
    let base = fit_log_log(&xs, &ys).unwrap();
    for c in [0.5, 3.0, 10.0] {
        let scaled: Vec<f64> = xs.iter().map(|x| x * c).collect();
        let fit = fit_log_log(&scaled, &ys).unwrap();
        assert!((fit.beta - base.beta).abs() < 1e-9);
        assert!((fit.alpha - base.alpha * c.powf(-base.beta)).abs() < 1e-9);
        assert!((fit.residual - base.residual).abs() < 1e-9);
    }
    assert!(matches!(
        power_law_fit(&points(&[2, 4], &[0.2, 0.0])),
        Err(Error::DegenerateFit(_))
    ));
}

#[test]
fn reports_round_trip_and_aggregate() {
    let spec = SyntheticSpec {
        noise: 0.7,
        ..SyntheticSpec::default()
    };
    let results: Vec<RunResult> = [Method::Knn, Method::Icl]
        .into_iter()
        .map(|method| run(&spec, ExperimentConfig { method, m: 4, task: "synthetic".into(), ..ExperimentConfig::default() }))
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("r.json");
    let csv = dir.path().join("out/r.csv");
    emit_report(&results, ReportFormat::Json, &json).unwrap();
    emit_report(&results, ReportFormat::Csv, &csv).unwrap();
    assert_eq!(read_json_report(&json).unwrap(), results);

    let mut reader = csv::Reader::from_path(&csv).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(header, knn_prompting::harness::report::CSV_COLUMNS);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * (5 + 1));
    for chunk in rows.chunks(6) {
        let seeds: Vec<f64> = chunk[..5].iter().map(|r| r[5].parse().unwrap()).collect();
        assert!(chunk[..5].iter().all(|r| &r[0] == "seed"));
        assert_eq!(&chunk[5][0], "aggregate");
        let mean: f64 = chunk[5][5].parse().unwrap();
        assert!((mean - seeds.iter().sum::<f64>() / 5.0).abs() < 1e-12);
    }
}
