//! Detection efficacy of error-prone sets against ground truth, and the
//! confidence / random baselines they are compared with.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bundle::UnlabeledBundle;
use crate::error::{Error, Result};

pub const TRUTH_FILE: &str = "truth.json";

/// Ground-truth sidecar written next to a bundle. Only evaluation code reads it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub labels: BTreeMap<String, usize>,
    /// Generator cluster of each point, when known.
    #[serde(default)]
    pub clusters: BTreeMap<String, usize>,
}

impl GroundTruth {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Reads `truth.json` from a bundle directory, naming the missing oracle on failure.
    pub fn load_sidecar(bundle_dir: impl AsRef<Path>) -> Result<Self> {
        let path = bundle_dir.as_ref().join(TRUTH_FILE);
        if !path.exists() {
            return Err(Error::Validation(format!(
                "ground-truth oracle {} not found; evaluation needs gold labels",
                path.display()
            )));
        }
        Self::load(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Per-id correctness of the frozen classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    correct: HashMap<String, bool>,
}

impl Oracle {
    /// Compares the bundle's argmax predictions with gold labels.
    pub fn new(bundle: &UnlabeledBundle, truth: &GroundTruth) -> Result<Self> {
        let preds = bundle.predictions();
        let mut correct = HashMap::with_capacity(bundle.len());
        for (id, &p) in bundle.ids().iter().zip(&preds) {
            let gold = truth
                .labels
                .get(id)
                .ok_or_else(|| Error::Validation(format!("no ground-truth label for id {id:?}")))?;
            correct.insert(id.clone(), *gold == p);
        }
        Ok(Self { correct })
    }

    pub fn from_correctness(pairs: impl IntoIterator<Item = (String, bool)>) -> Self {
        Self { correct: pairs.into_iter().collect() }
    }

    pub fn is_correct(&self, id: &str) -> Result<bool> {
        self.correct.get(id).copied().ok_or_else(|| Error::Validation(format!("id {id:?} not covered by the oracle")))
    }

    pub fn len(&self) -> usize {
        self.correct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correct.is_empty()
    }

    pub fn num_mispredicted(&self) -> usize {
        self.correct.values().filter(|c| !**c).count()
    }
}

/// Percentage of `selected` that the classifier mispredicts.
pub fn efficacy(selected: &[String], oracle: &Oracle) -> Result<f64> {
    let mut wrong = 0;
    for id in selected {
        if !oracle.is_correct(id)? {
            wrong += 1;
        }
    }
    efficacy_from_counts(selected.len(), wrong)
}

pub fn efficacy_from_counts(selected: usize, mispredicted: usize) -> Result<f64> {
    if selected == 0 {
        return Err(Error::Undefined("efficacy of an empty selection".into()));
    }
    if mispredicted > selected {
        return Err(Error::Range(format!("{mispredicted} mispredicted of {selected} selected")));
    }
    Ok(100.0 * mispredicted as f64 / selected as f64)
}

fn check_n(n: usize, len: usize) -> Result<()> {
    if n > len {
        return Err(Error::Range(format!("asked for {n} points from a bundle of {len}")));
    }
    Ok(())
}

/// The `n` least confident ids, least confident first, ties by id.
pub fn confidence_baseline(bundle: &UnlabeledBundle, n: usize) -> Result<Vec<String>> {
    check_n(n, bundle.len())?;
    let conf = bundle.confidences();
    let ids = bundle.ids();
    let mut order: Vec<usize> = (0..bundle.len()).collect();
    order.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]).then_with(|| ids[a].cmp(&ids[b])));
    Ok(order.into_iter().take(n).map(|i| ids[i].clone()).collect())
}

/// `n` ids sampled uniformly without replacement.
pub fn random_baseline(bundle: &UnlabeledBundle, n: usize, seed: u64) -> Result<Vec<String>> {
    check_n(n, bundle.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, bundle.len(), n);
    Ok(picked.into_iter().map(|i| bundle.ids()[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub num: usize,
    /// Percent; `None` when nothing was selected.
    pub efficacy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoverReport {
    pub rows: Vec<MethodRow>,
    pub bundle_size: usize,
    /// Overall misprediction rate of the bundle, percent.
    pub error_rate: f64,
}

impl DiscoverReport {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,num,efficacy\n");
        for r in &self.rows {
            let eff = r.efficacy.map_or_else(|| "N/A".to_string(), |e| format!("{e:.2}"));
            out.push_str(&format!("{},{},{eff}\n", r.method, r.num));
        }
        out
    }
}

/// Rows for each detector, then confidence and random baselines sized to the
/// first detector's selection.
pub fn discover_report(
    detections: &[(&str, &[String])],
    bundle: &UnlabeledBundle,
    oracle: &Oracle,
    seed: u64,
) -> Result<DiscoverReport> {
    let row = |method: &str, ids: &[String]| -> Result<MethodRow> {
        let efficacy = match efficacy(ids, oracle) {
            Ok(e) => Some(e),
            Err(Error::Undefined(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(MethodRow { method: method.to_string(), num: ids.len(), efficacy })
    };
    let mut rows = Vec::new();
    for (name, ids) in detections {
        rows.push(row(name, ids)?);
    }
    let n = detections.first().map_or(0, |(_, ids)| ids.len());
    rows.push(row("confidence", &confidence_baseline(bundle, n)?)?);
    rows.push(row("random", &random_baseline(bundle, n, seed)?)?);
    let mut wrong = 0;
    for id in bundle.ids() {
        if !oracle.is_correct(id)? {
            wrong += 1;
        }
    }
    let error_rate = if bundle.is_empty() { 0.0 } else { 100.0 * wrong as f64 / bundle.len() as f64 };
    Ok(DiscoverReport { rows, bundle_size: bundle.len(), error_rate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i:02}")).collect()
    }

    fn oracle(n: usize, wrong: usize) -> Oracle {
        Oracle::from_correctness(ids(n).into_iter().enumerate().map(|(i, id)| (id, i >= wrong)))
    }

    #[test]
    fn efficacy_examples() {
        let o = oracle(38, 24);
        assert!((efficacy(&ids(38), &o).unwrap() - 63.16).abs() < 0.01);
        assert_eq!(efficacy(&ids(24), &o).unwrap(), 100.0);
        assert_eq!(efficacy_from_counts(20, 12).unwrap(), 60.0);
        assert!(matches!(efficacy(&[], &o), Err(Error::Undefined(_))));
    }

    #[test]
    fn efficacy_permutation_invariant() {
        let o = oracle(30, 11);
        let mut sel = ids(17);
        let a = efficacy(&sel, &o).unwrap();
        sel.reverse();
        sel.swap(2, 9);
        assert_eq!(efficacy(&sel, &o).unwrap(), a);
    }

    fn conf_bundle() -> UnlabeledBundle {
        UnlabeledBundle::new(
            vec!["a".into(), "b".into(), "c".into()],
            Array2::zeros((3, 1)),
            array![[0.9, 0.1], [0.55, 0.45], [0.7, 0.3]],
            2,
        )
        .unwrap()
    }

    #[test]
    fn confidence_baseline_examples() {
        let b = conf_bundle();
        assert!(confidence_baseline(&b, 0).unwrap().is_empty());
        assert_eq!(confidence_baseline(&b, 2).unwrap(), ["b", "c"]);
        let mut all = confidence_baseline(&b, 3).unwrap();
        all.sort();
        assert_eq!(all, ["a", "b", "c"]);
        assert!(matches!(confidence_baseline(&b, 4), Err(Error::Range(_))));
    }

    #[test]
    fn confidence_ties_by_id() {
        let b = UnlabeledBundle::new(
            vec!["z".into(), "m".into(), "a".into()],
            Array2::zeros((3, 1)),
            array![[0.6, 0.4], [0.6, 0.4], [0.4, 0.6]],
            2,
        )
        .unwrap();
        assert_eq!(confidence_baseline(&b, 3).unwrap(), ["a", "m", "z"]);
    }

    #[test]
    fn random_baseline_examples() {
        let b = conf_bundle();
        let mut all = random_baseline(&b, 3, 4).unwrap();
        all.sort();
        assert_eq!(all, ["a", "b", "c"]);
        assert_eq!(random_baseline(&b, 2, 7).unwrap(), random_baseline(&b, 2, 7).unwrap());
        assert!(matches!(random_baseline(&b, 5, 0), Err(Error::Range(_))));
    }

    #[test]
    fn random_baseline_is_uniform() {
        let b = UnlabeledBundle::new(ids(4), Array2::zeros((4, 1)), Array2::from_elem((4, 2), 0.5), 2).unwrap();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for seed in 0..10_000 {
            *counts.entry(random_baseline(&b, 1, seed).unwrap().remove(0)).or_default() += 1;
        }
        for id in ids(4) {
            let c = counts[&id];
            assert!((2350..=2650).contains(&c), "{id}: {c}");
        }
    }

    #[test]
    fn random_efficacy_tracks_error_rate() {
        let n = 200;
        let b = UnlabeledBundle::new(ids(n), Array2::zeros((n, 1)), Array2::from_elem((n, 2), 0.5), 2).unwrap();
        let o = oracle(n, 60);
        let mean: f64 =
            (0..200).map(|s| efficacy(&random_baseline(&b, 50, s).unwrap(), &o).unwrap()).sum::<f64>() / 200.0;
        assert!((mean - 30.0).abs() < 3.0, "{mean}");
    }

    #[test]
    fn report_sizes_baselines_to_detector() {
        let b = conf_bundle();
        let o = Oracle::from_correctness([("a".into(), true), ("b".into(), false), ("c".into(), false)]);
        let sel = vec!["c".to_string()];
        let r = discover_report(&[("edisa", &sel)], &b, &o, 1).unwrap();
        assert_eq!(r.rows.iter().map(|r| r.num).collect::<Vec<_>>(), [1, 1, 1]);
        assert_eq!(r.row("confidence").unwrap().efficacy, Some(100.0));
        let empty: Vec<String> = vec![];
        let r = discover_report(&[("edisa", &empty)], &b, &o, 1).unwrap();
        assert_eq!(r.row("edisa").unwrap().efficacy, None);
        assert!(r.to_csv().contains("edisa,0,N/A"));
    }

    #[test]
    fn oracle_requires_every_id() {
        let b = conf_bundle();
        let truth = GroundTruth { labels: [("a".to_string(), 0)].into(), ..Default::default() };
        assert!(matches!(Oracle::new(&b, &truth), Err(Error::Validation(_))));
    }
}
