use slicekit::discover::{efficacy, random_baseline, Oracle};
use slicekit::sdm::{detect_error_prone, fit_edisa, FitConfig};
use slicekit::synth::{generate_classifier_scenario, ScenarioSpec};

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
fn easy_regions_learned_hard_regions_not() {
    let mut easy = Vec::new();
    let mut hard = Vec::new();
    for seed in 0..10 {
        let sc = generate_classifier_scenario(&ScenarioSpec::new(seed)).unwrap();
        let correct = sc.test.correct();
        let (mut e, mut h) = ((0usize, 0usize), (0usize, 0usize));
        for (id, ok) in sc.test.ids().iter().zip(correct) {
            let bucket = if sc.regions[id] == 0 { &mut e } else { &mut h };
            bucket.0 += usize::from(ok);
            bucket.1 += 1;
        }
        easy.push(e.0 as f64 / e.1 as f64);
        hard.push(h.0 as f64 / h.1 as f64);
    }
    assert!(mean(&easy) >= 0.95, "easy accuracy {}", mean(&easy));
    assert!(mean(&hard) <= 0.60, "hard accuracy {}", mean(&hard));
}

#[test]
fn discover_beats_random_by_twenty_points() {
    let mut gaps = Vec::new();
    for seed in 0..10 {
        let sc = generate_classifier_scenario(&ScenarioSpec::new(seed)).unwrap();
        let mut cfg = FitConfig::edisa();
        cfg.em.seed = seed;
        let model = fit_edisa(&sc.validation, &cfg).unwrap();
        let test = sc.test.as_unlabeled();
        let oracle = Oracle::new(test, &sc.truth(&sc.test)).unwrap();
        let det = detect_error_prone(&model, test).unwrap();
        assert!(!det.ids.is_empty(), "seed {seed}: nothing detected");
        let random = random_baseline(test, det.ids.len(), seed).unwrap();
        gaps.push(efficacy(&det.ids, &oracle).unwrap() - efficacy(&random, &oracle).unwrap());
    }
    assert!(mean(&gaps) >= 20.0, "efficacy gap {}", mean(&gaps));
}

#[test]
fn truth_matches_argmax_and_rows_on_simplex() {
    for seed in [0, 7] {
        for spec in [
            ScenarioSpec::new(seed),
            ScenarioSpec::active_learning(seed),
            ScenarioSpec { num_classes: 4, ..ScenarioSpec::new(seed) },
        ] {
            let sc = generate_classifier_scenario(&spec).unwrap();
            for b in [&sc.train, &sc.validation, &sc.test] {
                let truth = sc.truth(b);
                let preds = b.predictions();
                for ((id, &p), ok) in b.ids().iter().zip(&preds).zip(b.correct()) {
                    assert_eq!(ok, truth.labels[id] == p);
                }
                for row in b.conf().rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                    assert!(row.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }
}

#[test]
fn generation_is_a_pure_function_of_the_spec() {
    let spec = ScenarioSpec::active_learning(3);
    let a = generate_classifier_scenario(&spec).unwrap();
    let b = generate_classifier_scenario(&spec).unwrap();
    assert_eq!(a, b);
    let c = generate_classifier_scenario(&ScenarioSpec::active_learning(4)).unwrap();
    assert_ne!(a.test, c.test);
}
