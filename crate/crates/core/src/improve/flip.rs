use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CurveReport, CurveStep};
use crate::bundle::{LabeledBundle, UnlabeledBundle};
use crate::discover::{confidence_baseline, GroundTruth};
use crate::error::{Error, Result};
use crate::sdm::{assign_labeled, error_prone_from, infer_slices, SliceModel};

pub const DEFAULT_THRESHOLD_GRID: [f64; 6] = [0.3, 0.35, 0.4, 0.5, 0.6, 0.7];
/// Thresholds reported for the multi-class benchmark models; usable as a grid.
pub const REFERENCE_THRESHOLDS: [f64; 4] = [0.35, 0.37, 0.5, 0.7];

/// One step of a flipping run; `from == to` when the point was left alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flip {
    pub id: String,
    pub from: usize,
    pub to: usize,
    /// Target came from the second-most-confident class rather than a slice majority.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipOutcome {
    pub flips: Vec<Flip>,
    /// Final prediction per bundle row.
    pub predictions: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Class with the second-largest confidence; ties go to the lowest index.
pub fn second_most_confident(row: &[f64]) -> usize {
    let top = crate::mixture::argmax_slice(row);
    let mut best: Option<usize> = None;
    for (c, &v) in row.iter().enumerate() {
        if c != top && best.is_none_or(|b| v > row[b]) {
            best = Some(c);
        }
    }
    best.unwrap_or(top)
}

/// Flips detected error-prone points in descending error probability.
///
/// Binary tasks take the complement. Multi-class points flip only when their
/// top confidence is below `threshold`, to the majority gold label among
/// validation members of their slice.
pub fn flip_predictions(
    model: &SliceModel,
    bundle: &UnlabeledBundle,
    val: &LabeledBundle,
    threshold: f64,
) -> Result<FlipOutcome> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Range(format!("flip threshold {threshold} outside [0, 1]")));
    }
    let assignment = infer_slices(model, bundle)?;
    let detection = error_prone_from(model, &assignment);
    let mut warnings = detection.warnings;
    let c = bundle.num_classes();
    let row_of: HashMap<&str, usize> = bundle.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut predictions = bundle.predictions();
    let conf = bundle.normalized_conf();

    // gold-label counts per slice on the validation bundle
    let majority: Vec<Option<usize>> = if c == 2 {
        Vec::new()
    } else {
        let va = assign_labeled(model, val)?;
        let mut counts = vec![vec![0usize; c]; model.k];
        for (i, &j) in va.slices.iter().enumerate() {
            counts[j][val.labels()[i]] += 1;
        }
        counts
            .iter()
            .map(|row| {
                let max = *row.iter().max().expect("c > 0");
                let winners: Vec<usize> = (0..c).filter(|&l| row[l] == max).collect();
                (max > 0 && winners.len() == 1).then(|| winners[0])
            })
            .collect()
    };

    let mut flips = Vec::with_capacity(detection.ids.len());
    let mut empty_slices = 0;
    for id in detection.ids {
        let i = row_of[id.as_str()];
        let from = predictions[i];
        let row = conf.row(i);
        let row = row.as_slice().expect("standard layout");
        let (to, fallback) = if c == 2 {
            (1 - from, false)
        } else if row[from] >= threshold {
            (from, false)
        } else {
            match majority[assignment.slices[i]] {
                Some(l) => (l, false),
                None => {
                    empty_slices += 1;
                    (second_most_confident(row), true)
                }
            }
        };
        predictions[i] = to;
        flips.push(Flip { id, from, to, fallback });
    }
    if empty_slices > 0 {
        let msg = format!("{empty_slices} flips fell back to the second-most-confident class");
        log::info!("{msg}");
        warnings.push(msg);
    }
    Ok(FlipOutcome { flips, predictions, warnings })
}

/// The `n` least confident points flipped to their second-most-confident class.
pub fn confidence_flip_baseline(bundle: &UnlabeledBundle, n: usize) -> Result<Vec<Flip>> {
    let order = confidence_baseline(bundle, n)?;
    let row_of: HashMap<&str, usize> = bundle.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let conf = bundle.normalized_conf();
    let preds = bundle.predictions();
    Ok(order
        .into_iter()
        .map(|id| {
            let i = row_of[id.as_str()];
            let row = conf.row(i);
            let to = second_most_confident(row.as_slice().expect("standard layout"));
            Flip { id, from: preds[i], to, fallback: false }
        })
        .collect())
}

/// Whole-bundle accuracy (percent) before and after each flip in turn.
pub fn flip_curve(bundle: &UnlabeledBundle, flips: &[Flip], truth: &GroundTruth) -> Result<(f64, Vec<CurveStep>)> {
    let mut preds = bundle.predictions();
    let gold: Vec<usize> = bundle
        .ids()
        .iter()
        .map(|id| {
            truth.labels.get(id).copied().ok_or_else(|| Error::Validation(format!("no ground-truth label for {id:?}")))
        })
        .collect::<Result<_>>()?;
    let row_of: HashMap<&str, usize> = bundle.ids().iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let n = bundle.len().max(1) as f64;
    let mut correct = preds.iter().zip(&gold).filter(|(p, g)| p == g).count();
    let initial = 100.0 * correct as f64 / n;
    let mut steps = Vec::with_capacity(flips.len());
    for f in flips {
        let i =
            *row_of.get(f.id.as_str()).ok_or_else(|| Error::Validation(format!("flip of unknown id {:?}", f.id)))?;
        correct -= usize::from(preds[i] == gold[i]);
        preds[i] = f.to;
        correct += usize::from(preds[i] == gold[i]);
        steps.push(CurveStep { id: f.id.clone(), metric: 100.0 * correct as f64 / n });
    }
    Ok((initial, steps))
}

/// SDM flipping scored against the confidence flip baseline of the same length.
pub fn flip_report(
    model: &SliceModel,
    bundle: &UnlabeledBundle,
    val: &LabeledBundle,
    threshold: f64,
    truth: &GroundTruth,
) -> Result<(FlipOutcome, CurveReport)> {
    let outcome = flip_predictions(model, bundle, val, threshold)?;
    let (initial, steps) = flip_curve(bundle, &outcome.flips, truth)?;
    let base = confidence_flip_baseline(bundle, outcome.flips.len())?;
    let (_, baseline) = flip_curve(bundle, &base, truth)?;
    Ok((outcome, CurveReport::new("accuracy", initial, steps, baseline)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    /// Accuracy gain on the held-out split, percentage points.
    pub improvement: f64,
    /// Set when no grid value improved the held-out accuracy.
    pub no_gain: bool,
    pub tried: Vec<(f64, f64)>,
}

/// Picks the grid threshold whose flipping most improves accuracy on a
/// seeded 10% hold-out of the validation bundle; ties go to the smallest.
pub fn validate_flip_threshold(
    model: &SliceModel,
    val: &LabeledBundle,
    grid: &[f64],
    seed: u64,
) -> Result<ThresholdChoice> {
    if val.len() < 10 {
        return Err(Error::Range(format!("threshold validation needs at least 10 points, got {}", val.len())));
    }
    if grid.is_empty() || grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Config("threshold grid must be non-empty with values in [0, 1]".into()));
    }
    let n_hold = ((val.len() as f64) * 0.1).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hold: Vec<usize> = rand::seq::index::sample(&mut rng, val.len(), n_hold).into_vec();
    hold.sort_unstable();
    let rest: Vec<usize> = (0..val.len()).filter(|i| hold.binary_search(i).is_err()).collect();
    let held = val.subset(&hold);
    let fit_part = val.subset(&rest);
    let truth = GroundTruth {
        labels: held.ids().iter().cloned().zip(held.labels().iter().copied()).collect(),
        ..Default::default()
    };

    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut tried = Vec::with_capacity(sorted.len());
    let mut best: Option<(f64, f64)> = None;
    for &t in &sorted {
        let outcome = flip_predictions(model, held.as_unlabeled(), &fit_part, t)?;
        let (initial, steps) = flip_curve(held.as_unlabeled(), &outcome.flips, &truth)?;
        let gain = steps.last().map_or(0.0, |s| s.metric - initial);
        tried.push((t, gain));
        if best.is_none_or(|(_, g)| gain > g) {
            best = Some((t, gain));
        }
    }
    let (threshold, improvement) = best.expect("grid non-empty");
    Ok(ThresholdChoice { threshold, improvement, no_gain: improvement <= 0.0, tried })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::PcaTransform;
    use crate::mixture::{ComponentParams, DiagGaussian, Emission, Init, Mode, WeightConfig};
    use crate::sdm::{FitReport, SliceStats, MODEL_VERSION};
    use ndarray::{array, Array2};

    #[test]
    fn second_class_examples() {
        assert_eq!(second_most_confident(&[0.5, 0.3, 0.2]), 1);
        assert_eq!(second_most_confident(&[0.2, 0.3, 0.5]), 1);
        assert_eq!(second_most_confident(&[0.7, 0.3]), 1);
        assert_eq!(second_most_confident(&[0.4, 0.3, 0.3]), 1);
    }

    /// Two slices split on the sign of a 1-d embedding; slice 1 is the error slice.
    fn sign_model(c: usize) -> SliceModel {
        let w = WeightConfig::new(1.0, 0.0, 0.0, Mode::Edisa).unwrap();
        let comp = |m: f64| ComponentParams {
            prior: 0.5,
            z: DiagGaussian { mean: vec![m], var: vec![1.0] },
            error: Emission::Gaussian(DiagGaussian { mean: vec![0.0; c], var: vec![1.0; c] }),
            conf: Emission::Gaussian(DiagGaussian { mean: vec![1.0 / c as f64; c], var: vec![1.0; c] }),
        };
        let stats = |acc: f64| SliceStats { size: 4, correct: (4.0 * acc) as usize, accuracy: Some(acc) };
        SliceModel {
            version: MODEL_VERSION,
            mode: Mode::Edisa,
            weights: w,
            delta: 0.5,
            k: 2,
            pca: PcaTransform::identity(1),
            components: vec![comp(-5.0), comp(5.0)],
            error_slices: vec![1],
            fit_report: FitReport {
                slices: vec![stats(1.0), stats(0.25)],
                trajectory: vec![],
                iterations: 0,
                converged: true,
                init: Init::KmeansPlusPlus,
                reseeds: vec![],
                seed: 0,
            },
        }
    }

    fn ids(n: usize, p: &str) -> Vec<String> {
        (0..n).map(|i| format!("{p}{i}")).collect()
    }

    #[test]
    fn binary_flip_fixes_mispredicted_point_by_one_over_n() {
        let m = sign_model(2);
        let b = UnlabeledBundle::new(
            ids(4, "t"),
            array![[-5.0], [-5.0], [5.0], [5.0]],
            array![[0.9, 0.1], [0.2, 0.8], [0.7, 0.3], [0.6, 0.4]],
            2,
        )
        .unwrap();
        let val = LabeledBundle::new(ids(2, "v"), array![[-5.0], [5.0]], array![[0.9, 0.1], [0.9, 0.1]], vec![0, 1], 2)
            .unwrap();
        let truth = GroundTruth { labels: ids(4, "t").into_iter().zip([0, 1, 1, 0]).collect(), ..Default::default() };
        let (outcome, report) = flip_report(&m, &b, &val, 0.5, &truth).unwrap();
        assert_eq!(outcome.flips.len(), 2);
        let mut prev = report.initial;
        for (f, s) in outcome.flips.iter().zip(&report.steps) {
            assert_eq!(f.to, 1 - f.from);
            assert!(((s.metric - prev).abs() - 25.0).abs() < 1e-12);
            prev = s.metric;
        }
    }

    fn multi_setup() -> (SliceModel, UnlabeledBundle, LabeledBundle) {
        let m = sign_model(3);
        let b =
            UnlabeledBundle::new(ids(2, "t"), array![[5.0], [5.1]], array![[0.9, 0.05, 0.05], [0.4, 0.35, 0.25]], 3)
                .unwrap();
        let val = LabeledBundle::new(
            ids(4, "v"),
            array![[5.0], [5.0], [5.0], [-5.0]],
            Array2::from_elem((4, 3), 1.0 / 3.0),
            vec![2, 2, 1, 0],
            3,
        )
        .unwrap();
        (m, b, val)
    }

    #[test]
    fn multi_class_threshold_and_majority() {
        let (m, b, val) = multi_setup();
        let out = flip_predictions(&m, &b, &val, 0.5).unwrap();
        let by_id: HashMap<&str, &Flip> = out.flips.iter().map(|f| (f.id.as_str(), f)).collect();
        // confident point stays, unsure point goes to the slice majority [2, 2, 1] -> 2
        assert_eq!((by_id["t0"].from, by_id["t0"].to), (0, 0));
        assert_eq!((by_id["t1"].from, by_id["t1"].to), (0, 2));
        assert!(!by_id["t1"].fallback);
    }

    #[test]
    fn majority_tie_falls_back_to_second_class() {
        let (m, b, _) = multi_setup();
        let val = LabeledBundle::new(
            ids(3, "v"),
            array![[5.0], [5.0], [-5.0]],
            Array2::from_elem((3, 3), 1.0 / 3.0),
            vec![2, 1, 0],
            3,
        )
        .unwrap();
        let out = flip_predictions(&m, &b, &val, 0.5).unwrap();
        let f = out.flips.iter().find(|f| f.id == "t1").unwrap();
        assert_eq!((f.to, f.fallback), (1, true));
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn confidence_baseline_flips() {
        let b = UnlabeledBundle::new(
            ids(3, "t"),
            Array2::zeros((3, 1)),
            array![[0.5, 0.3, 0.2], [0.9, 0.05, 0.05], [0.1, 0.1, 0.8]],
            3,
        )
        .unwrap();
        let flips = confidence_flip_baseline(&b, 1).unwrap();
        assert_eq!((flips[0].id.as_str(), flips[0].to), ("t0", 1));
        assert!(confidence_flip_baseline(&b, 0).unwrap().is_empty());
        let bin =
            UnlabeledBundle::new(ids(2, "t"), Array2::zeros((2, 1)), array![[0.6, 0.4], [0.45, 0.55]], 2).unwrap();
        for f in confidence_flip_baseline(&bin, 2).unwrap() {
            assert_eq!(f.to, 1 - f.from);
        }
    }

    #[test]
    fn threshold_closure_and_tie_rule() {
        let m = sign_model(2);
        let n = 20;
        let z = Array2::from_shape_fn((n, 1), |(i, _)| if i % 2 == 0 { -5.0 } else { 5.0 });
        let conf = Array2::from_shape_fn((n, 2), |(_, j)| if j == 0 { 0.8 } else { 0.2 });
        let val = LabeledBundle::new(ids(n, "v"), z, conf, vec![0; n], 2).unwrap();
        let grid = [0.7, 0.35, 0.5];
        let choice = validate_flip_threshold(&m, &val, &grid, 3).unwrap();
        assert!(grid.contains(&choice.threshold));
        // binary: all thresholds behave alike, so the smallest wins; flips only hurt here
        assert_eq!(choice.threshold, 0.35);
        assert!(choice.no_gain);
        assert!(matches!(validate_flip_threshold(&m, &val.subset(&[0, 1, 2]), &grid, 0), Err(Error::Range(_))));
        assert!(validate_flip_threshold(&m, &val, &REFERENCE_THRESHOLDS, 0).is_ok());
    }
}
