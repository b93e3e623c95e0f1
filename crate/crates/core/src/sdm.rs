//! Slice detection: fit a mixture on a labeled bundle, mark error slices and
//! assign slices to labeled or unlabeled points.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bundle::{apply_pca, fit_pca, LabeledBundle, PcaTransform, UnlabeledBundle};
use crate::error::{Error, Result};
use crate::exact;
use crate::mixture::{
    argmax_slice, em_fit, joint_logliks, logsumexp, ComponentParams, EmConfig, Emission, Init, Mode, Observations,
    Reseed, WeightConfig, PROB_FLOOR,
};
use crate::par;

pub const MODEL_VERSION: u32 = 1;
pub const DEFAULT_DELTA: f64 = 0.5;
pub const DEFAULT_PCA_DIM: usize = 128;

/// Warning attached to every DOMINO inference result.
pub const DOMINO_INFERENCE_NOTE: &str =
    "DOMINO inference marginalizes the gold-label categorical as sum_c P(Y=c|S)^lambda_Y (extension)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub weights: WeightConfig,
    pub em: EmConfig,
    #[serde(with = "exact::scalar")]
    pub delta: f64,
    /// Target embedding dimension; clamped to the input dimension. `None`
    /// keeps the raw embedding.
    pub pca_dim: Option<usize>,
}

impl FitConfig {
    pub fn edisa() -> Self {
        Self {
            weights: WeightConfig::discover(),
            em: EmConfig::default(),
            delta: DEFAULT_DELTA,
            pca_dim: Some(DEFAULT_PCA_DIM),
        }
    }

    pub fn domino() -> Self {
        Self { weights: WeightConfig::domino(), ..Self::edisa() }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.em.validate()?;
        if !self.delta.is_finite() || self.delta < 0.0 {
            return Err(Error::Config(format!("delta must be finite and non-negative, got {}", self.delta)));
        }
        if self.pca_dim == Some(0) {
            return Err(Error::Config("pca dimension must be at least 1".into()));
        }
        Ok(())
    }
}

/// Membership of one slice on the fitting bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceStats {
    pub size: usize,
    pub correct: usize,
    /// `None` for an empty slice.
    #[serde(with = "exact::option")]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub slices: Vec<SliceStats>,
    #[serde(with = "exact::vector")]
    pub trajectory: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub init: Init,
    pub reseeds: Vec<Reseed>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceModel {
    pub version: u32,
    pub mode: Mode,
    pub weights: WeightConfig,
    #[serde(with = "exact::scalar")]
    pub delta: f64,
    pub k: usize,
    pub pca: PcaTransform,
    pub components: Vec<ComponentParams>,
    pub error_slices: Vec<usize>,
    pub fit_report: FitReport,
}

/// Slice indices whose fitting accuracy is below `delta`; empty slices never qualify.
pub fn error_slices_for(stats: &[SliceStats], delta: f64) -> Vec<usize> {
    stats.iter().enumerate().filter(|(_, s)| s.accuracy.is_some_and(|a| a < delta)).map(|(j, _)| j).collect()
}

impl SliceModel {
    pub fn num_classes(&self) -> usize {
        self.components[0].num_classes()
    }

    pub fn input_dim(&self) -> usize {
        self.pca.input_dim()
    }

    pub fn is_error_slice(&self, j: usize) -> bool {
        self.error_slices.binary_search(&j).is_ok()
    }

    /// Checks the structural invariants a loaded model must satisfy.
    pub fn validate(&self) -> Result<()> {
        if self.version != MODEL_VERSION {
            return Err(Error::Validation(format!("unsupported model version {}", self.version)));
        }
        if self.k == 0 || self.components.len() != self.k || self.fit_report.slices.len() != self.k {
            return Err(Error::Validation(format!(
                "model declares k={} with {} components and {} slice records",
                self.k,
                self.components.len(),
                self.fit_report.slices.len()
            )));
        }
        self.weights.validate()?;
        if self.weights.mode != self.mode {
            return Err(Error::Validation("weight mode differs from model mode".into()));
        }
        let c = self.num_classes();
        for (j, comp) in self.components.iter().enumerate() {
            if comp.mode() != self.mode || comp.num_classes() != c || comp.z.dim() != self.pca.d() {
                return Err(Error::Validation(format!("component {j} has inconsistent shape or mode")));
            }
        }
        if self.error_slices != error_slices_for(&self.fit_report.slices, self.delta) {
            return Err(Error::Validation("error_slices disagree with fit_report and delta".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    fn project(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        apply_pca(&self.pca, z)
    }

    fn check_classes(&self, c: usize) -> Result<()> {
        if c != self.num_classes() {
            return Err(Error::Shape(format!("bundle has {c} classes, model {}", self.num_classes())));
        }
        Ok(())
    }
}

pub fn fit_edisa(bundle: &LabeledBundle, cfg: &FitConfig) -> Result<SliceModel> {
    if cfg.weights.mode != Mode::Edisa {
        return Err(Error::Config("fit_edisa needs edisa-mode weights".into()));
    }
    fit_arrays(bundle.z(), bundle.conf(), bundle.labels(), cfg)
}

pub fn fit_domino(bundle: &LabeledBundle, cfg: &FitConfig) -> Result<SliceModel> {
    if cfg.weights.mode != Mode::Domino {
        return Err(Error::Config("fit_domino needs domino-mode weights".into()));
    }
    fit_arrays(bundle.z(), bundle.conf(), bundle.labels(), cfg)
}

/// Fits from raw arrays; unlike bundles this admits a single-class task.
pub fn fit_arrays(z: &Array2<f64>, conf: &Array2<f64>, labels: &[usize], cfg: &FitConfig) -> Result<SliceModel> {
    cfg.validate()?;
    let n = z.nrows();
    if n < cfg.em.k {
        return Err(Error::InsufficientData(format!("{n} points for {} slices", cfg.em.k)));
    }
    let pca = match cfg.pca_dim {
        None => PcaTransform::identity(z.ncols()),
        Some(d) => fit_pca(z, d.min(z.ncols()))?,
    };
    let projected = apply_pca(&pca, z)?;
    let obs = Observations::new(projected, conf.clone(), labels.to_vec())?;
    let fit = em_fit(&obs, &cfg.weights, &cfg.em)?;

    let slices = par::map_indexed(obs.len(), |i| {
        let ll = joint_logliks(&obs.point(i), &fit.components, &cfg.weights).expect("shapes checked by fit");
        argmax_slice(&ll)
    });
    let mut stats = vec![SliceStats { size: 0, correct: 0, accuracy: None }; cfg.em.k];
    for (i, &j) in slices.iter().enumerate() {
        stats[j].size += 1;
        if obs.predicted()[i] == obs.labels()[i] {
            stats[j].correct += 1;
        }
    }
    for s in &mut stats {
        if s.size > 0 {
            s.accuracy = Some(s.correct as f64 / s.size as f64);
        }
    }
    let error_slices = error_slices_for(&stats, cfg.delta);
    Ok(SliceModel {
        version: MODEL_VERSION,
        mode: cfg.weights.mode,
        weights: cfg.weights,
        delta: cfg.delta,
        k: cfg.em.k,
        pca,
        components: fit.components,
        error_slices,
        fit_report: FitReport {
            slices: stats,
            trajectory: fit.trajectory,
            iterations: fit.iterations,
            converged: fit.converged,
            init: fit.init,
            reseeds: fit.reseeds,
            seed: cfg.em.seed,
        },
    })
}

/// Per-point slice, per-slice log-likelihoods and error probability, in input order.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceAssignment {
    pub ids: Vec<String>,
    pub slices: Vec<usize>,
    pub logliks: Vec<Vec<f64>>,
    pub error_probability: Vec<f64>,
    pub warnings: Vec<String>,
}

impl SliceAssignment {
    fn from_logliks(ids: Vec<String>, logliks: Vec<Vec<f64>>, model: &SliceModel) -> Self {
        let slices = logliks.iter().map(|l| argmax_slice(l)).collect();
        let error_probability = logliks.iter().map(|l| error_probability(l, &model.error_slices)).collect();
        Self { ids, slices, logliks, error_probability, warnings: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `id,slice,error_probability` rows with exact floats.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,slice,error_probability\n");
        for i in 0..self.len() {
            out.push_str(&format!(
                "{},{},{}\n",
                self.ids[i],
                self.slices[i],
                exact::to_string(self.error_probability[i])
            ));
        }
        out
    }
}

/// Posterior mass of the error slices given per-slice log-likelihoods.
pub fn error_probability(logliks: &[f64], error_slices: &[usize]) -> f64 {
    if error_slices.is_empty() {
        return 0.0;
    }
    if error_slices.len() == logliks.len() {
        return 1.0;
    }
    let lse = logsumexp(logliks);
    let mass: f64 = error_slices.iter().map(|&j| (logliks[j] - lse).exp()).sum();
    mass.clamp(0.0, 1.0)
}

/// Slice assignment of labeled points by their full joint likelihood.
pub fn assign_labeled(model: &SliceModel, bundle: &LabeledBundle) -> Result<SliceAssignment> {
    model.check_classes(bundle.num_classes())?;
    let obs = Observations::new(model.project(bundle.z())?, bundle.conf().clone(), bundle.labels().to_vec())?;
    let logliks = par::map_indexed(obs.len(), |i| joint_logliks(&obs.point(i), &model.components, &model.weights));
    let logliks = logliks.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(SliceAssignment::from_logliks(bundle.ids().to_vec(), logliks, model))
}

/// Per-slice log-likelihood of an unlabeled point with the error term
/// summed over every possible gold label. `z_row` is in the input space.
pub fn marginal_loglik(model: &SliceModel, z_row: &[f64], conf_row: &[f64]) -> Result<Vec<f64>> {
    if model.mode != Mode::Edisa {
        return Err(Error::UnsupportedMode("label-marginalized likelihood is defined for edisa models only".into()));
    }
    let (z, conf) = prepare_row(model, z_row, conf_row)?;
    Ok(marginal_projected(model, &z, &conf))
}

/// DOMINO counterpart of [`marginal_loglik`]: `log Σ_c P(Y=c|S)^λ_Y` replaces the label term.
pub fn domino_marginal_loglik(model: &SliceModel, z_row: &[f64], conf_row: &[f64]) -> Result<Vec<f64>> {
    if model.mode != Mode::Domino {
        return Err(Error::UnsupportedMode("expected a domino model".into()));
    }
    let (z, conf) = prepare_row(model, z_row, conf_row)?;
    Ok(marginal_projected(model, &z, &conf))
}

fn prepare_row(model: &SliceModel, z_row: &[f64], conf_row: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    model.check_classes(conf_row.len())?;
    let z = Array2::from_shape_vec((1, z_row.len()), z_row.to_vec()).expect("one row");
    let z = model.project(&z)?.row(0).to_vec();
    let total: f64 = conf_row.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Validation("confidence row must have positive mass".into()));
    }
    Ok((z, conf_row.iter().map(|v| v / total).collect()))
}

fn marginal_projected(model: &SliceModel, z: &[f64], conf: &[f64]) -> Vec<f64> {
    let w = &model.weights;
    let c = conf.len();
    let predicted = argmax_slice(conf);
    let shifted: Vec<Vec<f64>> = (0..c)
        .map(|label| {
            let mut e: Vec<f64> = conf.iter().map(|v| -v).collect();
            e[label] += 1.0;
            e
        })
        .collect();
    model
        .components
        .iter()
        .map(|comp| {
            let mut ll = comp.prior.ln();
            if w.gamma != 0.0 {
                ll += w.gamma * comp.z.logpdf(z);
            }
            let per_label: Vec<f64> = match &comp.error {
                Emission::Gaussian(g) => shifted.iter().map(|e| weighted(w.lambda_e, || g.logpdf(e))).collect(),
                Emission::Categorical { probs } => {
                    probs.iter().map(|&p| weighted(w.lambda_e, || p.max(PROB_FLOOR).ln())).collect()
                }
            };
            ll += logsumexp(&per_label);
            ll += weighted(w.lambda_conf, || match &comp.conf {
                Emission::Gaussian(g) => g.logpdf(conf),
                Emission::Categorical { probs } => probs[predicted].max(PROB_FLOOR).ln(),
            });
            ll
        })
        .collect()
}

fn weighted(weight: f64, term: impl FnOnce() -> f64) -> f64 {
    if weight == 0.0 {
        0.0
    } else {
        weight * term()
    }
}

/// Slice assignment of unlabeled points by their label-marginalized likelihood.
pub fn infer_slices(model: &SliceModel, bundle: &UnlabeledBundle) -> Result<SliceAssignment> {
    model.check_classes(bundle.num_classes())?;
    let z = model.project(bundle.z())?;
    let conf = bundle.normalized_conf();
    let logliks = par::map_indexed(bundle.len(), |i| {
        let zr = z.row(i).to_vec();
        let cr = conf.row(i).to_vec();
        marginal_projected(model, &zr, &cr)
    });
    let mut out = SliceAssignment::from_logliks(bundle.ids().to_vec(), logliks, model);
    if model.mode == Mode::Domino {
        out.warnings.push(DOMINO_INFERENCE_NOTE.into());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    /// Error-prone ids, most probable first.
    pub ids: Vec<String>,
    pub warnings: Vec<String>,
}

/// Ids assigned to an error slice, by descending error probability then id.
pub fn detect_error_prone(model: &SliceModel, bundle: &UnlabeledBundle) -> Result<Detection> {
    let assignment = infer_slices(model, bundle)?;
    Ok(error_prone_from(model, &assignment))
}

pub fn error_prone_from(model: &SliceModel, a: &SliceAssignment) -> Detection {
    let mut warnings = a.warnings.clone();
    if model.error_slices.is_empty() {
        warnings.push(format!("model has no error slices at delta={}", model.delta));
    }
    let mut rows: Vec<usize> = (0..a.len()).filter(|&i| model.is_error_slice(a.slices[i])).collect();
    rows.sort_by(|&x, &y| {
        a.error_probability[y].total_cmp(&a.error_probability[x]).then_with(|| a.ids[x].cmp(&a.ids[y]))
    });
    Detection { ids: rows.into_iter().map(|i| a.ids[i].clone()).collect(), warnings }
}

/// Ablation variants that drop modalities from the default weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Confidence edge only.
    ConfOnly,
    /// Error-distance and confidence, no embedding.
    ErrorConf,
    /// Embedding only.
    EmbeddingOnly,
    /// Error-distance only.
    ErrorOnly,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::ConfOnly, Variant::ErrorConf, Variant::EmbeddingOnly, Variant::ErrorOnly];

    pub fn name(self) -> &'static str {
        match self {
            Variant::ConfOnly => "edisa-Y",
            Variant::ErrorConf => "edisa-EY",
            Variant::EmbeddingOnly => "edisa-Z",
            Variant::ErrorOnly => "edisa-E",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| *c != ',').collect::<String>().to_ascii_lowercase();
        Ok(match key.as_str() {
            "edisa-y" => Variant::ConfOnly,
            "edisa-ey" => Variant::ErrorConf,
            "edisa-z" => Variant::EmbeddingOnly,
            "edisa-e" => Variant::ErrorOnly,
            _ => {
                return Err(Error::Config(format!(
                    "unknown model variant {s:?} (expected edisa-Y, edisa-EY, edisa-Z or edisa-E)"
                )))
            }
        })
    }
}

pub fn structure_variant(v: Variant) -> WeightConfig {
    let d = WeightConfig::discover();
    let (g, e, c) = match v {
        Variant::ConfOnly => (0.0, 0.0, d.lambda_conf),
        Variant::ErrorConf => (0.0, d.lambda_e, d.lambda_conf),
        Variant::EmbeddingOnly => (d.gamma, 0.0, 0.0),
        Variant::ErrorOnly => (0.0, d.lambda_e, 0.0),
    };
    WeightConfig { gamma: g, lambda_e: e, lambda_conf: c, mode: Mode::Edisa }
}

/// Detected slice ids as a set, for membership tests.
pub fn id_set(ids: &[String]) -> BTreeSet<&str> {
    ids.iter().map(String::as_str).collect()
}
