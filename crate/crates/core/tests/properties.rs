use std::collections::HashSet;
use std::path::PathBuf;

use ndarray::Array2;
use proptest::prelude::*;

use slicekit::bundle::{LabeledBundle, UnlabeledBundle};
use slicekit::explain::{homo_comp, v_measure, HomoDenominator};
use slicekit::improve::{
    active_learning, split_seed_set, ActiveConfig, Selection, Trainer, TrainerOutput, TrainerRequest,
};
use slicekit::mixture::{
    argmax_slice, em_fit, joint_logliks, responsibilities, ComponentParams, DiagGaussian, EmConfig, Emission, Mode,
    Observations, Point, WeightConfig,
};
use slicekit::sdm::{fit_arrays, infer_slices, FitConfig};
use slicekit::synth::{generate_planted, PlantedSpec};
use slicekit::Result;

fn gaussian(mean: Vec<f64>, var: Vec<f64>) -> DiagGaussian {
    DiagGaussian { mean, var }
}

/// Edisa components over a 2-d embedding and 2 classes.
fn components() -> impl Strategy<Value = Vec<ComponentParams>> {
    let comp = (0.01f64..1.0, prop::collection::vec(-3.0f64..3.0, 6), prop::collection::vec(0.05f64..4.0, 6)).prop_map(
        |(prior, m, v)| ComponentParams {
            prior,
            z: gaussian(m[0..2].to_vec(), v[0..2].to_vec()),
            error: Emission::Gaussian(gaussian(m[2..4].to_vec(), v[2..4].to_vec())),
            conf: Emission::Gaussian(gaussian(m[4..6].to_vec(), v[4..6].to_vec())),
        },
    );
    prop::collection::vec(comp, 1..6)
}

fn point_parts() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, usize)> {
    (prop::collection::vec(-4.0f64..4.0, 2), 0.01f64..0.99, 0usize..2)
        .prop_map(|(z, p, label)| (z, vec![p, 1.0 - p], label))
}

fn point<'a>(z: &'a [f64], conf: &'a [f64], error: &'a [f64], label: usize) -> Point<'a> {
    Point { z, error, conf, label, predicted: argmax_slice(conf) }
}

fn error_row(conf: &[f64], label: usize) -> Vec<f64> {
    conf.iter().enumerate().map(|(c, v)| f64::from(u8::from(c == label)) - v).collect()
}

proptest! {
    #[test]
    fn zero_weights_leave_the_prior(comps in components(), (z, conf, label) in point_parts()) {
        let e = error_row(&conf, label);
        let w = WeightConfig::new(0.0, 0.0, 0.0, Mode::Edisa).unwrap();
        let r = responsibilities(&point(&z, &conf, &e, label), &comps, &w).unwrap();
        let total: f64 = comps.iter().map(|c| c.prior).sum();
        for (rj, c) in r.iter().zip(&comps) {
            prop_assert!((rj - c.prior / total).abs() < 1e-12);
        }
    }

    #[test]
    fn assignment_invariant_to_common_scaling(
        comps in components(),
        (z, conf, label) in point_parts(),
        s in 0.1f64..10.0,
    ) {
        let e = error_row(&conf, label);
        let p = point(&z, &conf, &e, label);
        let w = WeightConfig::discover();
        let base = joint_logliks(&p, &comps, &w).unwrap();
        let scaled_comps: Vec<ComponentParams> =
            comps.iter().map(|c| ComponentParams { prior: c.prior.powf(s), ..c.clone() }).collect();
        let scaled = joint_logliks(&p, &scaled_comps, &w.scaled(s)).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert!((a * s - b).abs() <= 1e-9 * (1.0 + b.abs()));
        }
        let (best, second) = top_two(&base);
        if best - second > 1e-9 * (1.0 + best.abs()) {
            prop_assert_eq!(argmax_slice(&base), argmax_slice(&scaled));
        }
    }

    #[test]
    fn v_is_harmonic_mean_in_unit_interval(
        mis in prop::collection::vec(any::<bool>(), 1..40),
        feat_seed in any::<u64>(),
        member_mask in any::<u64>(),
    ) {
        let n = mis.len();
        let featured: Vec<bool> = (0..n).map(|i| (feat_seed >> (i % 64)) & 1 == 1).collect();
        let members: Vec<usize> = (0..n).filter(|i| (member_mask >> (i % 64)) & 1 == 1).collect();
        for denom in [HomoDenominator::Mispredicted, HomoDenominator::SliceSize] {
            let (h, c) = homo_comp(&members, &mis, &featured, denom);
            let v = v_measure(h, c);
            prop_assert!((0.0..=1.0).contains(&h) && (0.0..=1.0).contains(&c) && (0.0..=1.0).contains(&v));
            if h + c > 0.0 {
                prop_assert!((v - 2.0 * h * c / (h + c)).abs() < 1e-15);
            } else {
                prop_assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn seed_split_partitions(n in 2usize..300, frac in 0.01f64..0.99, seed in any::<u64>()) {
        let ids: Vec<String> = (0..n).map(|i| format!("i{i}")).collect();
        let (train, pool) = split_seed_set(&ids, frac, seed).unwrap();
        prop_assert!(!train.is_empty() && !pool.is_empty());
        prop_assert_eq!(train.len() + pool.len(), n);
        let t: HashSet<&String> = train.iter().collect();
        prop_assert!(pool.iter().all(|id| !t.contains(id)));
    }

    #[test]
    fn planted_truth_matches_predictions(
        k in 1usize..5,
        classes in 2usize..5,
        size in 2usize..30,
        rate in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let mut spec = PlantedSpec::new(k, k + 2, classes, size);
        spec.error_clusters = vec![0];
        spec.error_rate = rate;
        spec.seed = seed;
        let p = generate_planted(&spec).unwrap();
        let preds = p.bundle.predictions();
        for ((id, &pred), &m) in p.bundle.ids().iter().zip(&preds).zip(&p.mispredicted) {
            prop_assert_eq!(m, pred != p.truth.labels[id]);
        }
        for row in p.bundle.conf().rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        for (&c, &m) in p.clusters.iter().zip(&p.mispredicted) {
            prop_assert!(c == 0 || !m);
        }
    }
}

fn top_two(xs: &[f64]) -> (f64, f64) {
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    (sorted[0], sorted.get(1).copied().unwrap_or(f64::NEG_INFINITY))
}

/// Reports accuracy growing with the training set; pool confidences vary by id.
struct Growing {
    requests: Vec<TrainerRequest>,
    validation: LabeledBundle,
    total: usize,
}

impl Trainer for Growing {
    fn train(&mut self, req: &TrainerRequest) -> Result<TrainerOutput> {
        self.requests.push(req.clone());
        let n = req.pool_ids.len();
        let conf = Array2::from_shape_fn((n, 2), |(i, j)| {
            let p = 0.5 + 0.45 * ((i * 7 % 11) as f64 / 11.0);
            if j == 0 {
                p
            } else {
                1.0 - p
            }
        });
        let pool = UnlabeledBundle::new(req.pool_ids.clone(), Array2::zeros((n, 1)), conf, 2)?;
        let val_accuracy = req.train_ids.len() as f64 / self.total as f64;
        Ok(TrainerOutput { val_accuracy, validation: self.validation.clone(), pool })
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn active_rounds_grow_training_and_keep_pool_disjoint(
        n in 10usize..120,
        frac in 0.05f64..0.5,
        per_step in 1usize..20,
        budget_extra in 0usize..60,
        confidence in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let ids: Vec<String> = (0..n).map(|i| format!("x{i:03}")).collect();
        let (train, pool) = split_seed_set(&ids, frac, seed).unwrap();
        let budget = train.len() + budget_extra;
        let validation = LabeledBundle::new(vec!["v0".into(), "v1".into()], Array2::zeros((2, 1)), Array2::from_elem((2, 2), 0.5), vec![0, 1], 2).unwrap();
        let mut trainer = Growing { requests: Vec::new(), validation, total: n };
        let selection = if confidence { Selection::Confidence { per_step } } else { Selection::Random { per_step } };
        let mut cfg = ActiveConfig::new(FitConfig::edisa(), selection, budget, PathBuf::from("unused"));
        cfg.seed = seed;
        let (report, err) = active_learning(&cfg, &mut trainer, train, pool);
        prop_assert!(err.is_none());
        for w in trainer.requests.windows(2) {
            prop_assert!(w[1].train_ids.len() > w[0].train_ids.len());
            prop_assert!(w[1].train_ids.starts_with(&w[0].train_ids));
        }
        for req in &trainer.requests {
            let t: HashSet<&String> = req.train_ids.iter().collect();
            prop_assert_eq!(t.len(), req.train_ids.len());
            prop_assert!(req.pool_ids.iter().all(|id| !t.contains(id)));
            prop_assert_eq!(req.train_ids.len() + req.pool_ids.len(), n);
            prop_assert!(req.train_ids.len() <= budget.max(trainer.requests[0].train_ids.len()));
        }
        prop_assert_eq!(report.rounds.len(), trainer.requests.len());
    }
}

#[test]
fn extra_iteration_after_convergence_is_a_fixed_point() {
    for seed in 0..3 {
        let mut spec = PlantedSpec::new(3, 4, 2, 80);
        spec.separation = 20.0;
        spec.seed = seed;
        let p = generate_planted(&spec).unwrap();
        let b = &p.bundle;
        let obs = Observations::new(b.z().clone(), b.conf().clone(), b.labels().to_vec()).unwrap();
        let w = WeightConfig::discover();
        // the default objective tolerance stops while priors still drift by ~1e-4
        let cfg = EmConfig { k: 3, seed, rel_tol: 1e-13, max_iters: 20_000, ..EmConfig::default() };
        let fit = em_fit(&obs, &w, &cfg).unwrap();
        assert!(fit.converged);
        let longer =
            em_fit(&obs, &w, &EmConfig { max_iters: fit.iterations + 1, rel_tol: 1e-300, ..cfg.clone() }).unwrap();
        assert_eq!(longer.iterations, fit.iterations + 1);
        for (a, b) in fit.components.iter().zip(&longer.components) {
            assert!(
                (a.prior - b.prior).abs() < 1e-6,
                "seed {seed}: prior {} vs {} after {} iterations",
                a.prior,
                b.prior,
                fit.iterations
            );
            let pairs = [(&a.z, &b.z)];
            let (Emission::Gaussian(ae), Emission::Gaussian(be)) = (&a.error, &b.error) else { panic!() };
            let (Emission::Gaussian(ac), Emission::Gaussian(bc)) = (&a.conf, &b.conf) else { panic!() };
            for (x, y) in pairs.into_iter().chain([(ae, be), (ac, bc)]) {
                for (u, v) in x.mean.iter().zip(&y.mean).chain(x.var.iter().zip(&y.var)) {
                    assert!((u - v).abs() < 1e-6, "seed {seed}: {u} vs {v}");
                }
            }
        }
    }
}

#[test]
fn every_point_gets_exactly_one_slice() {
    let mut spec = PlantedSpec::new(4, 6, 3, 40);
    spec.error_clusters = vec![1];
    let p = generate_planted(&spec).unwrap();
    let b = &p.bundle;
    let mut cfg = FitConfig::edisa();
    cfg.em.k = 6;
    let model = fit_arrays(b.z(), b.conf(), b.labels(), &cfg).unwrap();
    let a = infer_slices(&model, b.as_unlabeled()).unwrap();
    assert_eq!(a.slices.len(), b.len());
    for (s, ll) in a.slices.iter().zip(&a.logliks) {
        assert!(*s < model.k);
        assert_eq!(*s, argmax_slice(ll));
    }
}
