//! Synthetic generators with known ground truth: planted error-slice
//! mixtures and a self-contained classifier scenario.

mod classifier;
mod scenario;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bundle::{FeatureTable, LabeledBundle};
use crate::discover::GroundTruth;
use crate::error::{Error, Result};

pub use classifier::{LinearClassifier, TrainRecipe};
pub use scenario::{
    generate_classifier_scenario, load_scenario, write_scenario, Scenario, ScenarioSpec, ScenarioTrainer,
    TrainerConfig, SCENARIO_FILE, TRAINER_FILE,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub k_true: usize,
    pub error_clusters: Vec<usize>,
    pub dim: usize,
    pub num_classes: usize,
    /// Distance between any two cluster means, in units of `sigma`.
    pub separation: f64,
    pub sigma: f64,
    /// Fraction of mispredicted points in each error cluster; other clusters have none.
    pub error_rate: f64,
    pub sizes: Vec<usize>,
    /// Cluster → feature names set to 1 on that cluster.
    pub feature_plan: BTreeMap<usize, Vec<String>>,
    /// Rate at which a planted feature fires outside its cluster.
    pub background_rate: f64,
    /// Range of the confidence mass placed on the predicted class.
    pub conf_peak: (f64, f64),
    pub seed: u64,
}

impl PlantedSpec {
    pub fn new(k_true: usize, dim: usize, num_classes: usize, cluster_size: usize) -> Self {
        Self {
            k_true,
            error_clusters: Vec::new(),
            dim,
            num_classes,
            separation: 10.0,
            sigma: 1.0,
            error_rate: 0.9,
            sizes: vec![cluster_size; k_true],
            feature_plan: BTreeMap::new(),
            background_rate: 0.05,
            conf_peak: (0.6, 0.95),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("planted spec: {m}")));
        if self.k_true == 0 {
            return fail("k_true must be positive".into());
        }
        if self.k_true > self.dim {
            return fail(format!("k_true = {} exceeds lattice capacity dim = {}", self.k_true, self.dim));
        }
        if self.num_classes < 2 {
            return fail("need at least 2 classes".into());
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) || !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return fail("separation and sigma must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.error_rate) || !(0.0..=1.0).contains(&self.background_rate) {
            return fail("rates must lie in [0, 1]".into());
        }
        let (lo, hi) = self.conf_peak;
        if !(0.5 < lo && lo <= hi && hi < 1.0) {
            return fail("conf_peak must satisfy 0.5 < low <= high < 1".into());
        }
        if self.sizes.len() != self.k_true || self.sizes.iter().any(|&s| s < 2) {
            return fail("need k_true sizes, each at least 2".into());
        }
        if self.error_clusters.iter().chain(self.feature_plan.keys()).any(|&c| c >= self.k_true) {
            return fail("cluster index out of range".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Planted {
    pub bundle: LabeledBundle,
    pub features: FeatureTable,
    pub truth: GroundTruth,
    pub clusters: Vec<usize>,
    pub mispredicted: Vec<bool>,
    pub error_clusters: BTreeSet<usize>,
}

impl Planted {
    /// Mispredicted points inside error clusters.
    pub fn planted_error_ids(&self) -> Vec<String> {
        self.bundle
            .ids()
            .iter()
            .zip(&self.clusters)
            .zip(&self.mispredicted)
            .filter(|((_, c), &m)| m && self.error_clusters.contains(c))
            .map(|((id, _), _)| id.clone())
            .collect()
    }
}

/// Cluster means `e_c · separation·σ/√2`; every pair is `separation·σ` apart.
pub fn lattice_means(spec: &PlantedSpec) -> Array2<f64> {
    let scale = spec.separation * spec.sigma / std::f64::consts::SQRT_2;
    Array2::from_shape_fn((spec.k_true, spec.dim), |(c, d)| if c == d { scale } else { 0.0 })
}

/// Values as stored in f32 bundle files, so saved bundles reload exactly.
pub(crate) fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

/// Confidence row with mass in `[lo, hi]` on `predicted`.
fn peaked_conf(rng: &mut ChaCha8Rng, predicted: usize, c: usize, (lo, hi): (f64, f64)) -> Vec<f64> {
    let peak: f64 = rng.random_range(lo..=hi);
    let mut rest: Vec<f64> = (0..c).map(|j| if j == predicted { 0.0 } else { rng.random::<f64>() + 1e-3 }).collect();
    let total: f64 = rest.iter().sum();
    for (j, v) in rest.iter_mut().enumerate() {
        *v = if j == predicted { peak } else { *v / total * (1.0 - peak) };
    }
    rest.into_iter().map(f32_round).collect()
}

pub fn generate_planted(spec: &PlantedSpec) -> Result<Planted> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = lattice_means(spec);
    let c = spec.num_classes;
    let n: usize = spec.sizes.iter().sum();
    let error_clusters: BTreeSet<usize> = spec.error_clusters.iter().copied().collect();

    let mut ids = Vec::with_capacity(n);
    let mut z = Array2::zeros((n, spec.dim));
    let mut conf = Array2::zeros((n, c));
    let mut labels = Vec::with_capacity(n);
    let mut clusters = Vec::with_capacity(n);
    let mut i = 0;
    for (cluster, &size) in spec.sizes.iter().enumerate() {
        let gold = cluster % c;
        for _ in 0..size {
            ids.push(format!("p{i:05}"));
            for d in 0..spec.dim {
                let noise: f64 = rng.sample(StandardNormal);
                z[[i, d]] = f32_round(means[[cluster, d]] + spec.sigma * noise);
            }
            let wrong = error_clusters.contains(&cluster) && rng.random::<f64>() < spec.error_rate;
            let predicted = if wrong { (gold + 1) % c } else { gold };
            for (j, v) in peaked_conf(&mut rng, predicted, c, spec.conf_peak).into_iter().enumerate() {
                conf[[i, j]] = v;
            }
            labels.push(gold);
            clusters.push(cluster);
            i += 1;
        }
    }

    let mut features = FeatureTable::new();
    for (&cluster, names) in &spec.feature_plan {
        for name in names {
            for (id, &cl) in ids.iter().zip(&clusters) {
                let on = cl == cluster || rng.random::<f64>() < spec.background_rate;
                features.set(id, name, if on { 1.0 } else { 0.0 });
            }
        }
    }

    let truth = GroundTruth {
        labels: ids.iter().cloned().zip(labels.iter().copied()).collect(),
        clusters: ids.iter().cloned().zip(clusters.iter().copied()).collect(),
    };
    let bundle = LabeledBundle::new(ids, z, conf, labels, c)?;
    let mispredicted = bundle.correct().into_iter().map(|ok| !ok).collect();
    Ok(Planted { bundle, features, truth, clusters, mispredicted, error_clusters })
}
