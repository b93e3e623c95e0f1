use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::classifier::{standardizer, LinearClassifier, TrainRecipe};
use super::f32_round;
use crate::bundle::{save_labeled, save_unlabeled, FeatureTable, LabeledBundle, MatrixFormat, UnlabeledBundle};
use crate::discover::{GroundTruth, TRUTH_FILE};
use crate::error::{Error, Result};
use crate::improve::{Trainer, TrainerOutput, TrainerRequest, TrainerResponse};

pub const SCENARIO_FILE: &str = "scenario.json";
pub const TRAINER_FILE: &str = "trainer.json";

/// Latent inputs drawn from a mixture of compact clusters, noisy linear
/// "embeddings" of them and a linear labeling rule. The first
/// `hard_regions` clusters carry concentrated label noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub num_classes: usize,
    pub latent_dim: usize,
    pub embed_dim: usize,
    pub embed_noise: f64,
    pub train_size: usize,
    pub validation_size: usize,
    pub test_size: usize,
    pub latent_clusters: usize,
    /// Standard deviation of latent cluster centers.
    pub cluster_spread: f64,
    /// Within-cluster standard deviation.
    pub cluster_std: f64,
    pub hard_regions: usize,
    /// Probability that a label inside a hard cluster is replaced by a class
    /// other than the one the rule assigns to the cluster center.
    pub hard_flip: f64,
    /// Sampling weight of a hard cluster in the training split relative to an
    /// easy one; validation and test sample all clusters equally.
    pub hard_train_weight: f64,
    /// When positive, each hard cluster is shifted by this much along a latent
    /// axis of its own that the labeling rule ignores, which makes the region
    /// linearly separable from the rest.
    #[serde(default)]
    pub hard_offset: f64,
    pub recipe: TrainRecipe,
}

impl ScenarioSpec {
    pub fn new(seed: u64) -> Self {
        let test_size = 500;
        Self {
            seed,
            num_classes: 2,
            latent_dim: 4,
            embed_dim: 16,
            embed_noise: 0.1,
            train_size: 2000,
            validation_size: 2 * test_size,
            test_size,
            latent_clusters: 12,
            cluster_spread: 2.0,
            cluster_std: 0.5,
            hard_regions: 3,
            hard_flip: 0.8,
            hard_train_weight: 0.15,
            hard_offset: 0.0,
            recipe: TrainRecipe::default(),
        }
    }

    /// Half the clusters are hard, isolated and rare in the training split, with
    /// a systematically wrong label: the model can learn them, but only from
    /// points that random sampling seldom draws.
    pub fn active_learning(seed: u64) -> Self {
        Self { hard_regions: 6, hard_flip: 1.0, hard_train_weight: 0.05, hard_offset: 8.0, ..Self::new(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("scenario spec: {m}")));
        if self.num_classes < 2 || self.latent_dim == 0 || self.embed_dim == 0 {
            return fail("need at least 2 classes and positive dimensions");
        }
        if self.train_size < 2 || self.validation_size < 2 || self.test_size < 2 {
            return fail("every split needs at least 2 points");
        }
        if !(self.embed_noise >= 0.0) || !(self.cluster_spread >= 0.0) || !(self.cluster_std >= 0.0) {
            return fail("noise and spreads must be non-negative");
        }
        if self.latent_clusters == 0 || self.hard_regions > self.latent_clusters {
            return fail("need at least one latent cluster and no more hard clusters than clusters");
        }
        if !(self.hard_offset >= 0.0 && self.hard_offset.is_finite()) {
            return fail("hard_offset must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.hard_flip) {
            return fail("hard_flip must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.hard_train_weight)
            || (self.hard_train_weight == 0.0 && self.hard_regions == self.latent_clusters)
        {
            return fail("hard_train_weight must lie in [0, 1] and leave some cluster drawable");
        }
        if self.recipe.epochs == 0 || !(self.recipe.learning_rate > 0.0) || !(self.recipe.l2 >= 0.0) {
            return fail("invalid training recipe");
        }
        Ok(())
    }

    /// Latent dimension including the private axes of isolated hard clusters.
    fn full_latent_dim(&self) -> usize {
        if self.hard_offset > 0.0 {
            self.latent_dim + self.hard_regions
        } else {
            self.latent_dim
        }
    }
}

/// External command that serves trainer requests for a written scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub command: Vec<String>,
    pub timeout_secs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    /// Bundles carry confidences of the classifier trained on the full training split.
    pub train: LabeledBundle,
    pub validation: LabeledBundle,
    pub test: LabeledBundle,
    /// `hard_<r>` indicators plus two uninformative `noise_<i>` features.
    pub features: FeatureTable,
    /// 0 for easy points, `r + 1` for hard region r.
    pub regions: BTreeMap<String, usize>,
    mean: Array1<f64>,
    scale: Array1<f64>,
}

struct Split {
    ids: Vec<String>,
    z: Array2<f64>,
    labels: Vec<usize>,
    regions: Vec<usize>,
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || scale * rng.sample::<f64, _>(StandardNormal))
}

#[allow(clippy::too_many_arguments)]
fn draw_split(
    rng: &mut ChaCha8Rng,
    spec: &ScenarioSpec,
    prefix: &str,
    n: usize,
    hard_weight: f64,
    embed: &Array2<f64>,
    rule: &Array2<f64>,
    centers: &Array2<f64>,
) -> Split {
    let c = spec.num_classes;
    let mut z = Array2::zeros((n, spec.embed_dim));
    let mut labels = Vec::with_capacity(n);
    let mut regions = Vec::with_capacity(n);
    let weights: Vec<f64> =
        (0..spec.latent_clusters).map(|c| if c < spec.hard_regions { hard_weight } else { 1.0 }).collect();
    let pick = WeightedIndex::new(&weights).expect("validated weights");
    let center_labels: Vec<usize> = centers
        .rows()
        .into_iter()
        .map(|m| crate::mixture::argmax_slice(rule.dot(&m).as_slice().expect("contiguous")))
        .collect();
    for i in 0..n {
        let cluster = pick.sample(rng);
        let x = Array1::from_shape_simple_fn(spec.full_latent_dim(), || {
            spec.cluster_std * rng.sample::<f64, _>(StandardNormal)
        }) + centers.row(cluster);
        let scores = rule.dot(&x);
        let mut label = crate::mixture::argmax_slice(scores.as_slice().expect("contiguous"));
        let region = if cluster < spec.hard_regions { cluster + 1 } else { 0 };
        if region > 0 && rng.random::<f64>() < spec.hard_flip {
            label = (center_labels[cluster] + 1 + rng.random_range(0..c - 1)) % c;
        }
        let e = embed.dot(&x);
        for d in 0..spec.embed_dim {
            let noise: f64 = rng.sample(StandardNormal);
            z[[i, d]] = f32_round(e[d] + spec.embed_noise * noise);
        }
        labels.push(label);
        regions.push(region);
    }
    Split { ids: (0..n).map(|i| format!("{prefix}{i:05}")).collect(), z, labels, regions }
}

/// Classifier confidences rounded as stored in bundle files.
fn conf_rows(clf: &LinearClassifier, z: &Array2<f64>) -> Array2<f64> {
    clf.predict_proba(z).mapv(f32_round)
}

pub fn generate_classifier_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dim = spec.full_latent_dim();
    let embed = normal_matrix(&mut rng, spec.embed_dim, dim, 1.0 / (dim as f64).sqrt());
    let mut rule = normal_matrix(&mut rng, spec.num_classes, spec.latent_dim, 1.0);
    let mut centers = normal_matrix(&mut rng, spec.latent_clusters, spec.latent_dim, spec.cluster_spread);
    if dim > spec.latent_dim {
        let extra = dim - spec.latent_dim;
        rule = ndarray::concatenate![ndarray::Axis(1), rule, Array2::zeros((spec.num_classes, extra))];
        let mut shift = Array2::zeros((spec.latent_clusters, extra));
        for h in 0..spec.hard_regions {
            shift[[h, h]] = spec.hard_offset;
        }
        centers = ndarray::concatenate![ndarray::Axis(1), centers, shift];
    }
    let train = draw_split(&mut rng, spec, "tr", spec.train_size, spec.hard_train_weight, &embed, &rule, &centers);
    let val = draw_split(&mut rng, spec, "va", spec.validation_size, 1.0, &embed, &rule, &centers);
    let test = draw_split(&mut rng, spec, "te", spec.test_size, 1.0, &embed, &rule, &centers);

    let mut features = FeatureTable::new();
    let mut regions = BTreeMap::new();
    for split in [&train, &val, &test] {
        for (id, &r) in split.ids.iter().zip(&split.regions) {
            for h in 0..spec.hard_regions {
                features.set(id, &format!("hard_{h}"), if r == h + 1 { 1.0 } else { 0.0 });
            }
            for k in 0..2 {
                features.set(id, &format!("noise_{k}"), if rng.random::<f64>() < 0.2 { 1.0 } else { 0.0 });
            }
            regions.insert(id.clone(), r);
        }
    }

    let (mean, scale) = standardizer(&train.z);
    let clf = LinearClassifier::fit(&train.z, &train.labels, spec.num_classes, &mean, &scale, &spec.recipe)?;
    let bundle = |s: Split| {
        let conf = conf_rows(&clf, &s.z);
        LabeledBundle::new(s.ids, s.z, conf, s.labels, spec.num_classes)
    };
    Ok(Scenario {
        spec: spec.clone(),
        train: bundle(train)?,
        validation: bundle(val)?,
        test: bundle(test)?,
        features,
        regions,
        mean,
        scale,
    })
}

impl Scenario {
    pub fn truth(&self, bundle: &LabeledBundle) -> GroundTruth {
        GroundTruth {
            labels: bundle.ids().iter().cloned().zip(bundle.labels().iter().copied()).collect(),
            clusters: bundle.ids().iter().map(|id| (id.clone(), self.regions[id])).collect(),
        }
    }

    /// Classifier trained on the given training rows.
    pub fn fit_on(&self, rows: &[usize]) -> Result<LinearClassifier> {
        let sub = self.train.subset(rows);
        LinearClassifier::fit(sub.z(), sub.labels(), self.spec.num_classes, &self.mean, &self.scale, &self.spec.recipe)
    }

    /// Validation accuracy of the classifier trained on the whole training split.
    pub fn full_data_accuracy(&self) -> f64 {
        accuracy(&self.validation)
    }
}

fn accuracy(b: &LabeledBundle) -> f64 {
    let correct = b.correct();
    correct.iter().filter(|&&c| c).count() as f64 / correct.len().max(1) as f64
}

/// Writes `train/`, `validation/` and `test/` (unlabeled), each with its
/// `truth.json` sidecar and `features.jsonl`, plus the spec and the trainer command config.
pub fn write_scenario(dir: impl AsRef<Path>, scenario: &Scenario, trainer: &TrainerConfig) -> Result<()> {
    let dir = dir.as_ref();
    let fmt = MatrixFormat::F32le;
    save_labeled(dir.join("train"), &scenario.train, fmt)?;
    save_labeled(dir.join("validation"), &scenario.validation, fmt)?;
    save_unlabeled(dir.join("test"), scenario.test.as_unlabeled(), fmt)?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    for (name, b) in [("train", &scenario.train), ("validation", &scenario.validation), ("test", &scenario.test)] {
        scenario.truth(b).save(dir.join(name).join(TRUTH_FILE))?;
        let mut table = FeatureTable::new();
        for id in b.ids() {
            for f in scenario.features.names() {
                table.set(id, f, scenario.features.get(id, f));
            }
        }
        write(&format!("{name}/features.jsonl"), table.to_jsonl())?;
    }
    write(SCENARIO_FILE, serde_json::to_string_pretty(&scenario.spec)?)?;
    write(TRAINER_FILE, serde_json::to_string_pretty(trainer)?)
}

/// Regenerates a scenario from its `scenario.json`.
pub fn load_scenario(dir: impl AsRef<Path>) -> Result<Scenario> {
    let path = dir.as_ref().join(SCENARIO_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    generate_classifier_scenario(&serde_json::from_str(&text)?)
}

/// Retrains the scenario classifier in-process; also serves file requests.
#[derive(Debug, Clone)]
pub struct ScenarioTrainer {
    scenario: Scenario,
    index: HashMap<String, usize>,
}

impl ScenarioTrainer {
    pub fn new(scenario: Scenario) -> Self {
        let index = scenario.train.ids().iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        Self { scenario, index }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    fn rows(&self, ids: &[String], field: &str) -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                self.index
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::Protocol(format!("field `{field}`: unknown training id {id:?}")))
            })
            .collect()
    }

    /// Handles one file request: trains, writes both bundles and the response.
    pub fn respond(&mut self, req: &TrainerRequest) -> Result<TrainerResponse> {
        let out = self.train(req)?;
        save_labeled(&req.validation_out, &out.validation, MatrixFormat::F32le)?;
        save_unlabeled(&req.pool_out, &out.pool, MatrixFormat::F32le)?;
        let resp = TrainerResponse {
            val_accuracy: out.val_accuracy,
            validation: req.validation_out.clone(),
            pool: req.pool_out.clone(),
        };
        let text = serde_json::to_string_pretty(&resp)?;
        std::fs::write(&req.response_path, text).map_err(|e| Error::io(&req.response_path, e))?;
        Ok(resp)
    }
}

impl Trainer for ScenarioTrainer {
    fn train(&mut self, req: &TrainerRequest) -> Result<TrainerOutput> {
        let train_rows = self.rows(&req.train_ids, "train_ids")?;
        let pool_rows = self.rows(&req.pool_ids, "pool_ids")?;
        let clf = self.scenario.fit_on(&train_rows)?;
        let v = &self.scenario.validation;
        let validation = LabeledBundle::new(
            v.ids().to_vec(),
            v.z().clone(),
            conf_rows(&clf, v.z()),
            v.labels().to_vec(),
            v.num_classes(),
        )?;
        let pool_z = self.scenario.train.as_unlabeled().subset(&pool_rows).z().clone();
        let pool =
            UnlabeledBundle::new(req.pool_ids.clone(), pool_z.clone(), conf_rows(&clf, &pool_z), v.num_classes())?;
        Ok(TrainerOutput { val_accuracy: accuracy(&validation), validation, pool })
    }
}
