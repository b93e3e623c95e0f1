//! Which features characterize each error slice: permutation tests of
//! in-slice versus out-of-slice feature means, Homo/Comp/V rates, and the
//! planted-target detection task.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::{FeatureTable, LabeledBundle};
use crate::error::{Error, Result};
use crate::par;
use crate::sdm::{assign_labeled, fit_edisa, FitConfig, SliceModel};

pub const MIN_PERMUTATIONS: usize = 99;

/// One-sided Monte-Carlo permutation test of `mean(in) − mean(out)`.
///
/// Returns `Ok(None)` when either group has fewer than two values.
pub fn permutation_test(in_vals: &[f64], out_vals: &[f64], n_perm: usize, seed: u64) -> Result<Option<f64>> {
    if n_perm < MIN_PERMUTATIONS {
        return Err(Error::Config(format!("n_perm must be at least {MIN_PERMUTATIONS}, got {n_perm}")));
    }
    if in_vals.len() < 2 || out_vals.len() < 2 {
        return Ok(None);
    }
    let n_in = in_vals.len();
    let mut pooled: Vec<f64> = in_vals.iter().chain(out_vals).copied().collect();
    // with the pooled total fixed the statistic is increasing in the in-group sum
    let observed: f64 = in_vals.iter().sum();
    let slack = 1e-12 * pooled.iter().map(|v| v.abs()).sum::<f64>().max(1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..n_perm {
        let n = pooled.len();
        for i in 0..n_in {
            let j = rng.random_range(i..n);
            pooled.swap(i, j);
        }
        let s: f64 = pooled[..n_in].iter().sum();
        if s >= observed - slack {
            hits += 1;
        }
    }
    Ok(Some((1 + hits) as f64 / (n_perm + 1) as f64))
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Harmonic mean of homo and comp, 0 when both are 0.
pub fn v_measure(homo: f64, comp: f64) -> f64 {
    if homo + comp > 0.0 {
        2.0 * homo * comp / (homo + comp)
    } else {
        0.0
    }
}

/// Denominator of the Homo rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HomoDenominator {
    /// Mispredicted members of the slice.
    #[default]
    Mispredicted,
    /// All members of the slice.
    SliceSize,
}

/// Homo and Comp of one slice for one feature.
///
/// `members` indexes into `mispredicted` and `featured`, which cover the whole bundle.
pub fn homo_comp(members: &[usize], mispredicted: &[bool], featured: &[bool], denom: HomoDenominator) -> (f64, f64) {
    let hits = members.iter().filter(|&&i| mispredicted[i] && featured[i]).count();
    let homo_den = match denom {
        HomoDenominator::Mispredicted => members.iter().filter(|&&i| mispredicted[i]).count(),
        HomoDenominator::SliceSize => members.len(),
    };
    let comp_den = mispredicted.iter().zip(featured).filter(|(m, f)| **m && **f).count();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    (ratio(hits, homo_den), ratio(hits, comp_den))
}

/// `Σ (feature_prop · v) / #datasets` with feature_prop as a fraction.
pub fn average_weighted_v(per_dataset: &[(f64, f64)]) -> f64 {
    if per_dataset.is_empty() {
        return 0.0;
    }
    per_dataset.iter().map(|(prop, v)| prop * v).sum::<f64>() / per_dataset.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainConfig {
    pub alpha: f64,
    pub n_perm: usize,
    pub seed: u64,
    pub homo_denominator: HomoDenominator,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self { alpha: 0.05, n_perm: 1000, seed: 0, homo_denominator: HomoDenominator::Mispredicted }
    }
}

impl ExplainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.n_perm < MIN_PERMUTATIONS {
            return Err(Error::Config(format!("n_perm must be at least {MIN_PERMUTATIONS}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRow {
    pub slice: usize,
    pub feature: String,
    /// `None` when a group was too small to test.
    pub p_value: Option<f64>,
    pub in_mean: f64,
    pub out_mean: f64,
    pub significant: bool,
    pub homo: f64,
    pub comp: f64,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub feature: String,
    pub significant_slices: Vec<usize>,
    /// Averages over the significant slices; `None` when there are none.
    pub homo: Option<f64>,
    pub comp: Option<f64>,
    pub v: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceFeatureReport {
    pub pairs: Vec<PairRow>,
    pub features: Vec<FeatureRow>,
    /// Percent of table features significant for at least one slice.
    pub feature_prop: f64,
    /// Averages over detected features, as fractions.
    pub avg_homo: f64,
    pub avg_comp: f64,
    pub avg_v: f64,
}

impl SliceFeatureReport {
    fn empty() -> Self {
        Self { pairs: vec![], features: vec![], feature_prop: 0.0, avg_homo: 0.0, avg_comp: 0.0, avg_v: 0.0 }
    }

    /// Feature prop, V, Homo, Comp on a 0–100 scale: one `all` row, then one per feature.
    pub fn to_csv(&self) -> String {
        let pct = |x: Option<f64>| x.map_or_else(|| "N/A".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut out = String::from("feature,feature_prop,v,homo,comp\n");
        out.push_str(&format!(
            "all,{:.2},{},{},{}\n",
            self.feature_prop,
            pct(Some(self.avg_v)),
            pct(Some(self.avg_homo)),
            pct(Some(self.avg_comp))
        ));
        for f in &self.features {
            let prop = if f.significant_slices.is_empty() { 0.0 } else { 100.0 };
            out.push_str(&format!("{},{prop:.2},{},{},{}\n", f.feature, pct(f.v), pct(f.homo), pct(f.comp)));
        }
        out
    }
}

/// Seed for one (slice, feature) pair, independent of evaluation order.
fn pair_seed(seed: u64, slice: usize, feature: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    let bytes = seed.to_le_bytes().into_iter().chain((slice as u64).to_le_bytes()).chain(feature.bytes());
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

/// Tests every (error slice, feature) pair on the bundle the model was fitted on.
pub fn significant_features(
    model: &SliceModel,
    bundle: &LabeledBundle,
    features: &FeatureTable,
    cfg: &ExplainConfig,
) -> Result<SliceFeatureReport> {
    cfg.validate()?;
    if features.is_empty() {
        return Ok(SliceFeatureReport::empty());
    }
    let assignment = assign_labeled(model, bundle)?;
    let mispredicted: Vec<bool> = bundle.correct().iter().map(|c| !c).collect();
    let names: Vec<&str> = features.names().collect();
    let columns: Vec<Vec<f64>> = names.iter().map(|f| features.column(bundle.ids(), f)).collect();

    let tasks: Vec<(usize, usize)> =
        model.error_slices.iter().flat_map(|&j| (0..names.len()).map(move |f| (j, f))).collect();
    let members: Vec<Vec<usize>> =
        (0..model.k).map(|j| (0..bundle.len()).filter(|&i| assignment.slices[i] == j).collect()).collect();

    let rows = par::map_indexed(tasks.len(), |t| -> Result<PairRow> {
        let (j, f) = tasks[t];
        let col = &columns[f];
        let (inside, outside): (Vec<f64>, Vec<f64>) = {
            let mut a = Vec::new();
            let mut b = Vec::new();
            for (i, &v) in col.iter().enumerate() {
                if assignment.slices[i] == j {
                    a.push(v);
                } else {
                    b.push(v);
                }
            }
            (a, b)
        };
        let p_value = permutation_test(&inside, &outside, cfg.n_perm, pair_seed(cfg.seed, j, names[f]))?;
        let (in_mean, out_mean) = (mean(&inside), mean(&outside));
        let significant = p_value.is_some_and(|p| p < cfg.alpha) && in_mean > out_mean;
        let featured: Vec<bool> = col.iter().map(|&v| v != 0.0).collect();
        let (homo, comp) = homo_comp(&members[j], &mispredicted, &featured, cfg.homo_denominator);
        Ok(PairRow {
            slice: j,
            feature: names[f].to_string(),
            p_value,
            in_mean,
            out_mean,
            significant,
            homo,
            comp,
            v: v_measure(homo, comp),
        })
    });
    let pairs = rows.into_iter().collect::<Result<Vec<_>>>()?;

    let mut feature_rows = Vec::with_capacity(names.len());
    for name in &names {
        let sig: Vec<&PairRow> = pairs.iter().filter(|p| p.feature == *name && p.significant).collect();
        let avg = |g: fn(&PairRow) -> f64| {
            (!sig.is_empty()).then(|| sig.iter().map(|p| g(p)).sum::<f64>() / sig.len() as f64)
        };
        feature_rows.push(FeatureRow {
            feature: name.to_string(),
            significant_slices: sig.iter().map(|p| p.slice).collect(),
            homo: avg(|p| p.homo),
            comp: avg(|p| p.comp),
            v: avg(|p| p.v),
        });
    }
    let detected: Vec<&FeatureRow> = feature_rows.iter().filter(|f| !f.significant_slices.is_empty()).collect();
    let over_detected = |g: fn(&FeatureRow) -> Option<f64>| {
        if detected.is_empty() {
            0.0
        } else {
            detected.iter().map(|f| g(f).unwrap_or(0.0)).sum::<f64>() / detected.len() as f64
        }
    };
    Ok(SliceFeatureReport {
        feature_prop: 100.0 * detected.len() as f64 / names.len() as f64,
        avg_homo: over_detected(|f| f.homo),
        avg_comp: over_detected(|f| f.comp),
        avg_v: over_detected(|f| f.v),
        features: feature_rows,
        pairs,
    })
}

/// Mispredicted points carrying `feature`, mixed with an equal number of
/// other points. Rows are shuffled by `seed`; the target ids are returned alongside.
pub fn build_synthetic_feature_dataset(
    bundle: &LabeledBundle,
    feature: &str,
    features: &FeatureTable,
    seed: u64,
) -> Result<(LabeledBundle, BTreeSet<String>)> {
    let correct = bundle.correct();
    let (target, rest): (Vec<usize>, Vec<usize>) =
        (0..bundle.len()).partition(|&i| !correct[i] && features.get(&bundle.ids()[i], feature) != 0.0);
    if target.is_empty() {
        return Err(Error::Undefined(format!("feature {feature:?} marks no mispredicted point")));
    }
    if rest.len() < target.len() {
        return Err(Error::Range(format!("{} fill points available for {} targets", rest.len(), target.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fill = rand::seq::index::sample(&mut rng, rest.len(), target.len());
    let mut rows: Vec<usize> = target.iter().copied().chain(fill.into_iter().map(|i| rest[i])).collect();
    rows.shuffle(&mut rng);
    let ids = target.iter().map(|&i| bundle.ids()[i].clone()).collect();
    Ok((bundle.subset(&rows), ids))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskResult {
    pub feature: String,
    /// Percent; `None` when nothing landed in an error slice.
    pub precision: Option<f64>,
    pub recall: f64,
    pub f1: Option<f64>,
    pub target_count: usize,
    pub dataset_size: usize,
}

/// Scores error-slice membership of a model fitted on the synthetic bundle against the targets.
pub fn synthetic_detection_scores(
    model: &SliceModel,
    bundle: &LabeledBundle,
    feature: &str,
    targets: &BTreeSet<String>,
) -> Result<SyntheticTaskResult> {
    let a = assign_labeled(model, bundle)?;
    let predicted: Vec<&String> =
        (0..a.len()).filter(|&i| model.is_error_slice(a.slices[i])).map(|i| &a.ids[i]).collect();
    let hits = predicted.iter().filter(|id| targets.contains(id.as_str())).count();
    let recall = if targets.is_empty() { 0.0 } else { 100.0 * hits as f64 / targets.len() as f64 };
    let precision = (!predicted.is_empty()).then(|| 100.0 * hits as f64 / predicted.len() as f64);
    let f1 = precision.map(|p| v_measure(p, recall));
    Ok(SyntheticTaskResult {
        feature: feature.to_string(),
        precision,
        recall,
        f1,
        target_count: targets.len(),
        dataset_size: bundle.len(),
    })
}

/// Builds the synthetic dataset for `feature`, fits on it and scores the fit.
pub fn synthetic_task(
    bundle: &LabeledBundle,
    feature: &str,
    features: &FeatureTable,
    fit: &FitConfig,
    seed: u64,
) -> Result<SyntheticTaskResult> {
    let (data, targets) = build_synthetic_feature_dataset(bundle, feature, features, seed)?;
    let model = fit_edisa(&data, fit)?;
    synthetic_detection_scores(&model, &data, feature, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use itertools::Itertools;
    use ndarray::Array2;

    fn exact_p(in_vals: &[f64], out_vals: &[f64]) -> f64 {
        let pooled: Vec<f64> = in_vals.iter().chain(out_vals).copied().collect();
        let observed = mean(in_vals) - mean(out_vals);
        let mut hits = 0;
        let mut total = 0;
        for pick in (0..pooled.len()).combinations(in_vals.len()) {
            let a: Vec<f64> = pick.iter().map(|&i| pooled[i]).collect();
            let b: Vec<f64> = (0..pooled.len()).filter(|i| !pick.contains(i)).map(|i| pooled[i]).collect();
            total += 1;
            if mean(&a) - mean(&b) >= observed - 1e-12 {
                hits += 1;
            }
        }
        hits as f64 / total as f64
    }

    #[test]
    fn constant_values_give_p_one() {
        assert_eq!(permutation_test(&[5.0, 5.0, 5.0], &[5.0, 5.0], 999, 3).unwrap(), Some(1.0));
    }

    #[test]
    fn monte_carlo_tracks_exact_enumeration() {
        let (a, b) = ([10.0, 11.0], [0.0, 1.0]);
        assert!((exact_p(&a, &b) - 1.0 / 6.0).abs() < 1e-12);
        let p = permutation_test(&a, &b, 999, 17).unwrap().unwrap();
        assert!((p - 1.0 / 6.0).abs() < 0.05, "{p}");
    }

    #[test]
    fn small_groups_are_untestable() {
        assert_eq!(permutation_test(&[1.0], &[0.0, 2.0], 999, 0).unwrap(), None);
        assert!(matches!(permutation_test(&[1.0, 2.0], &[0.0, 2.0], 10, 0), Err(Error::Config(_))));
    }

    #[test]
    fn p_value_bounds() {
        let p = permutation_test(&[100.0, 101.0, 102.0, 99.0], &[0.0; 20], 199, 1).unwrap().unwrap();
        assert!((1.0 / 200.0..=1.0).contains(&p));
        assert_eq!(p, 1.0 / 200.0);
    }

    #[test]
    fn homo_comp_examples() {
        // slice = every mispredicted featured point
        let mis = [true, true, false, true];
        let feat = [true, true, true, false];
        assert_eq!(homo_comp(&[0, 1], &mis, &feat, HomoDenominator::Mispredicted), (1.0, 1.0));

        // 4 mispredicted members, 2 featured, 10 featured mispredicted overall
        let mut mis = vec![true; 14];
        let mut feat = vec![false; 14];
        feat[0] = true;
        feat[1] = true;
        for f in feat.iter_mut().skip(4).take(8) {
            *f = true;
        }
        mis[13] = false;
        assert_eq!(homo_comp(&[0, 1, 2, 3], &mis, &feat, HomoDenominator::Mispredicted), (0.5, 0.2));
        assert_eq!(homo_comp(&[0, 1, 2, 3, 13], &mis, &feat, HomoDenominator::SliceSize), (0.4, 0.2));

        assert_eq!(homo_comp(&[13], &mis, &feat, HomoDenominator::Mispredicted), (0.0, 0.0));
    }

    #[test]
    fn v_measure_examples() {
        assert!((v_measure(0.1318, 0.7880) - 0.2258).abs() < 1e-4);
        assert_eq!(v_measure(0.0, 0.0), 0.0);
    }

    #[test]
    fn weighted_v_examples() {
        assert_eq!(average_weighted_v(&[(1.0, 0.5)]), 0.5);
        assert!((average_weighted_v(&[(1.0, 0.4), (0.5, 0.2)]) - 0.25).abs() < 1e-15);
        assert_eq!(average_weighted_v(&[(0.0, 0.7), (0.0, 0.3)]), 0.0);
    }

    fn planted(n: usize) -> (LabeledBundle, FeatureTable) {
        // three groups on a line; group 2 is always mispredicted and carries "neg"
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ids: Vec<String> = (0..n).map(|i| format!("x{i:03}")).collect();
        let z = Array2::from_shape_fn(
            (n, 2),
            |(i, j)| if j == 0 { (i % 3) as f64 * 10.0 } else { 0.0 } + rng.random_range(-1.0..1.0),
        );
        let conf = Array2::from_shape_fn((n, 2), |(_, j)| if j == 0 { 0.8 } else { 0.2 });
        let labels = (0..n).map(|i| usize::from(i % 3 == 2)).collect();
        let mut table = FeatureTable::new();
        for (i, id) in ids.iter().enumerate() {
            table.set(id, "neg", if i % 3 == 2 { 1.0 } else { 0.0 });
            table.set(id, "const", 1.0);
            table.set(id, "len", (i % 7) as f64);
        }
        (LabeledBundle::new(ids, z, conf, labels, 2).unwrap(), table)
    }

    fn fit_cfg(k: usize) -> FitConfig {
        FitConfig {
            weights: crate::mixture::WeightConfig::explain(),
            em: crate::mixture::EmConfig { k, seed: 2, ..Default::default() },
            pca_dim: None,
            delta: 0.5,
        }
    }

    #[test]
    fn planted_feature_is_significant() {
        let (b, t) = planted(90);
        let m = fit_edisa(&b, &fit_cfg(3)).unwrap();
        let r = significant_features(&m, &b, &t, &ExplainConfig { n_perm: 999, ..Default::default() }).unwrap();
        let neg = r.features.iter().find(|f| f.feature == "neg").unwrap();
        assert_eq!(neg.significant_slices.len(), 1);
        assert_eq!((neg.homo, neg.comp), (Some(1.0), Some(1.0)));
        let c = r.features.iter().find(|f| f.feature == "const").unwrap();
        assert!(c.significant_slices.is_empty());
        for p in &r.pairs {
            assert!(!p.significant || p.in_mean > p.out_mean);
            assert!((p.v - v_measure(p.homo, p.comp)).abs() < 1e-9);
        }
        let detected = r.features.iter().filter(|f| !f.significant_slices.is_empty()).count();
        assert_eq!(r.feature_prop, 100.0 * detected as f64 / 3.0);
    }

    #[test]
    fn report_independent_of_thread_schedule() {
        let (b, t) = planted(60);
        let m = fit_edisa(&b, &fit_cfg(3)).unwrap();
        let cfg = ExplainConfig { n_perm: 199, seed: 4, ..Default::default() };
        let a = significant_features(&m, &b, &t, &cfg).unwrap();
        let s = par::sequential(|| significant_features(&m, &b, &t, &cfg).unwrap());
        assert_eq!(a, s);
    }

    #[test]
    fn empty_table_gives_empty_report() {
        let (b, _) = planted(30);
        let m = fit_edisa(&b, &fit_cfg(2)).unwrap();
        let r = significant_features(&m, &b, &FeatureTable::new(), &ExplainConfig::default()).unwrap();
        assert!(r.pairs.is_empty() && r.features.is_empty());
    }

    #[test]
    fn synthetic_dataset_construction() {
        let (b, t) = planted(60);
        let (d, targets) = build_synthetic_feature_dataset(&b, "neg", &t, 3).unwrap();
        assert_eq!(d.len(), 2 * targets.len());
        let correct = d.correct();
        let fill: Vec<&String> = d.ids().iter().filter(|id| !targets.contains(id.as_str())).collect();
        assert_eq!(fill.len(), targets.len());
        for (i, id) in d.ids().iter().enumerate() {
            if targets.contains(id.as_str()) {
                assert!(!correct[i]);
            }
        }
        assert_eq!(build_synthetic_feature_dataset(&b, "neg", &t, 3).unwrap().0, d);
        assert!(matches!(build_synthetic_feature_dataset(&b, "missing", &t, 3), Err(Error::Undefined(_))));
    }

    #[test]
    fn synthetic_scores_arithmetic() {
        let (b, t) = planted(60);
        let (d, targets) = build_synthetic_feature_dataset(&b, "neg", &t, 1).unwrap();
        // every slice an error slice: everything is predicted
        let mut cfg = fit_cfg(2);
        cfg.delta = 2.0;
        let m = fit_edisa(&d, &cfg).unwrap();
        let r = synthetic_detection_scores(&m, &d, "neg", &targets).unwrap();
        assert_eq!(r.recall, 100.0);
        assert_eq!(r.precision, Some(50.0));
        assert!((r.f1.unwrap() - 66.67).abs() < 0.01);

        cfg.delta = 0.0;
        let m = fit_edisa(&d, &cfg).unwrap();
        let r = synthetic_detection_scores(&m, &d, "neg", &targets).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (None, 0.0, None));
    }

    #[test]
    fn planted_synthetic_task_is_perfect() {
        let (b, t) = planted(90);
        let r = synthetic_task(&b, "neg", &t, &fit_cfg(2), 0).unwrap();
        assert_eq!(r.dataset_size, 2 * r.target_count);
        assert_eq!(r.recall, 100.0);
        assert_eq!(r.precision, Some(100.0));
        let f1 = r.f1.unwrap();
        assert!((f1 - v_measure(r.precision.unwrap(), r.recall)).abs() < 1e-6);
    }
}
