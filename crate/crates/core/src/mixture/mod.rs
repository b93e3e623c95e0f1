//! Weighted-exponent mixture over (embedding, error-distance, confidence).
//!
//! The joint log-likelihood of a point under slice `j` is
//!
//! ```text
//! log θ_j + γ·log P(Z|j) + λ_E·log P(E|j) + λ_𝒴·log P(𝒴|j)
//! ```
//!
//! In Edisa mode all three modalities are diagonal Gaussians. In DOMINO mode
//! the error-distance slot holds a categorical over the gold label and the
//! confidence slot a categorical over the argmax prediction.

mod em;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::bundle::argmax;
use crate::error::{Error, Result};
use crate::exact;

pub use em::{e_step, em_fit, objective, EmConfig, EmFit, Init, Reseed};

pub const VAR_FLOOR: f64 = 1e-6;
pub const PRIOR_FLOOR: f64 = 1e-8;
pub const PROB_FLOOR: f64 = 1e-12;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Edisa,
    Domino,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Edisa => "edisa",
            Mode::Domino => "domino",
        })
    }
}

/// Exponents on the three likelihood terms. In DOMINO mode `lambda_e` is the
/// weight of the gold-label categorical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightConfig {
    #[serde(with = "exact::scalar")]
    pub gamma: f64,
    #[serde(with = "exact::scalar")]
    pub lambda_e: f64,
    #[serde(with = "exact::scalar")]
    pub lambda_conf: f64,
    pub mode: Mode,
}

impl WeightConfig {
    pub fn new(gamma: f64, lambda_e: f64, lambda_conf: f64, mode: Mode) -> Result<Self> {
        let w = Self { gamma, lambda_e, lambda_conf, mode };
        w.validate()?;
        Ok(w)
    }

    /// Discover / Improve defaults: γ = 0.15, λ_E = 0.1, λ_𝒴 = 1.
    pub fn discover() -> Self {
        Self { gamma: 0.15, lambda_e: 0.1, lambda_conf: 1.0, mode: Mode::Edisa }
    }

    /// Explain defaults: γ = 0.15, λ_E = 1, λ_𝒴 = 0.1.
    pub fn explain() -> Self {
        Self { gamma: 0.15, lambda_e: 1.0, lambda_conf: 0.1, mode: Mode::Edisa }
    }

    /// DOMINO weights used for comparisons: γ = 1, λ_Y = 10, λ_𝒴 = 40.
    pub fn domino() -> Self {
        Self { gamma: 1.0, lambda_e: 10.0, lambda_conf: 40.0, mode: Mode::Domino }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("lambda_e", self.lambda_e), ("lambda_conf", self.lambda_conf)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Multiplies every exponent by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self { gamma: self.gamma * s, lambda_e: self.lambda_e * s, lambda_conf: self.lambda_conf * s, mode: self.mode }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    #[serde(with = "exact::vector")]
    pub mean: Vec<f64>,
    #[serde(with = "exact::vector")]
    pub var: Vec<f64>,
}

impl DiagGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn logpdf(&self, x: &[f64]) -> f64 {
        logpdf_unchecked(x, &self.mean, &self.var)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Emission {
    Gaussian(DiagGaussian),
    Categorical {
        #[serde(with = "exact::vector")]
        probs: Vec<f64>,
    },
}

impl Emission {
    pub fn dim(&self) -> usize {
        match self {
            Emission::Gaussian(g) => g.dim(),
            Emission::Categorical { probs } => probs.len(),
        }
    }
}

/// Parameters of one slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentParams {
    #[serde(with = "exact::scalar")]
    pub prior: f64,
    pub z: DiagGaussian,
    /// Gaussian over E (Edisa) or categorical over the gold label (DOMINO).
    pub error: Emission,
    /// Gaussian over 𝒴 (Edisa) or categorical over the argmax prediction (DOMINO).
    pub conf: Emission,
}

impl ComponentParams {
    pub fn mode(&self) -> Mode {
        match self.error {
            Emission::Gaussian(_) => Mode::Edisa,
            Emission::Categorical { .. } => Mode::Domino,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.conf.dim()
    }
}

/// One labeled observation as the mixture sees it.
#[derive(Debug, Clone, Copy)]
pub struct Point<'a> {
    pub z: &'a [f64],
    /// Error-distance row (Edisa).
    pub error: &'a [f64],
    /// Normalized confidence row.
    pub conf: &'a [f64],
    /// Gold label (DOMINO).
    pub label: usize,
    /// Argmax prediction (DOMINO).
    pub predicted: usize,
}

/// Labeled observations in the layout the EM loop consumes. Rows are
/// contiguous so `Point`s borrow without copying.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    z: Array2<f64>,
    error: Array2<f64>,
    conf: Array2<f64>,
    labels: Vec<usize>,
    predicted: Vec<usize>,
    num_classes: usize,
}

impl Observations {
    /// `conf` rows are renormalized; E is derived from `labels`.
    pub fn new(z: Array2<f64>, conf: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        let n = z.nrows();
        if conf.nrows() != n || labels.len() != n {
            return Err(Error::Shape(format!("Z has {n} rows, conf {} rows, labels {}", conf.nrows(), labels.len())));
        }
        let num_classes = conf.ncols();
        if num_classes == 0 {
            return Err(Error::Shape("confidence rows are empty".into()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidLabel { label, num_classes });
        }
        let mut conf = conf.as_standard_layout().into_owned();
        for mut row in conf.rows_mut() {
            let s = row.sum();
            if s > 0.0 {
                row.mapv_inplace(|v| v / s);
            }
        }
        let mut error = conf.mapv(|v| -v);
        for (mut row, &l) in error.rows_mut().into_iter().zip(&labels) {
            row[l] += 1.0;
        }
        let predicted = conf.rows().into_iter().map(argmax).collect();
        Ok(Self { z: z.as_standard_layout().into_owned(), error, conf, labels, predicted, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn z(&self) -> &Array2<f64> {
        &self.z
    }

    pub fn error(&self) -> &Array2<f64> {
        &self.error
    }

    pub fn conf(&self) -> &Array2<f64> {
        &self.conf
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn predicted(&self) -> &[usize] {
        &self.predicted
    }

    pub fn point(&self, i: usize) -> Point<'_> {
        Point {
            z: row_slice(self.z.row(i)),
            error: row_slice(self.error.row(i)),
            conf: row_slice(self.conf.row(i)),
            label: self.labels[i],
            predicted: self.predicted[i],
        }
    }
}

pub(crate) fn row_slice<'a>(row: ArrayView1<'a, f64>) -> &'a [f64] {
    row.to_slice().expect("standard layout rows are contiguous")
}

/// Diagonal-Gaussian log density.
pub fn gaussian_logpdf(x: &[f64], mean: &[f64], var: &[f64]) -> Result<f64> {
    if x.len() != mean.len() || x.len() != var.len() {
        return Err(Error::Shape(format!(
            "gaussian_logpdf lengths x={}, mean={}, var={}",
            x.len(),
            mean.len(),
            var.len()
        )));
    }
    Ok(logpdf_unchecked(x, mean, var))
}

#[inline]
fn logpdf_unchecked(x: &[f64], mean: &[f64], var: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((&xi, &mi), &vi) in x.iter().zip(mean).zip(var) {
        let d = xi - mi;
        acc += -0.5 * (LN_2PI + vi.ln()) - d * d / (2.0 * vi);
    }
    acc
}

/// `log(max(p[c], 1e-12))`.
pub fn categorical_logpmf(c: usize, p: &[f64]) -> Result<f64> {
    match p.get(c) {
        Some(&pc) => Ok(pc.max(PROB_FLOOR).ln()),
        None => Err(Error::InvalidLabel { label: c, num_classes: p.len() }),
    }
}

/// Adds `weight · term()` unless the weight is zero, so a zero exponent
/// contributes exactly nothing even when the density underflows.
#[inline]
fn weighted(weight: f64, term: impl FnOnce() -> f64) -> f64 {
    if weight == 0.0 {
        0.0
    } else {
        weight * term()
    }
}

fn check_point(point: &Point<'_>, comp: &ComponentParams, w: &WeightConfig) -> Result<()> {
    if point.z.len() != comp.z.dim() {
        return Err(Error::Shape(format!("point has {} embedding dims, component {}", point.z.len(), comp.z.dim())));
    }
    if comp.mode() != w.mode {
        return Err(Error::UnsupportedMode(format!("{} component evaluated with {} weights", comp.mode(), w.mode)));
    }
    let c = comp.num_classes();
    match w.mode {
        Mode::Edisa => {
            if point.error.len() != c || point.conf.len() != c {
                return Err(Error::Shape(format!(
                    "point has {}/{} class columns, component {c}",
                    point.error.len(),
                    point.conf.len()
                )));
            }
        }
        Mode::Domino => {
            for l in [point.label, point.predicted] {
                if l >= c {
                    return Err(Error::InvalidLabel { label: l, num_classes: c });
                }
            }
        }
    }
    Ok(())
}

/// Weighted joint log-likelihood of a labeled point and one slice.
pub fn joint_loglik(point: &Point<'_>, comp: &ComponentParams, w: &WeightConfig) -> Result<f64> {
    check_point(point, comp, w)?;
    Ok(joint_loglik_unchecked(point, comp, w))
}

pub(crate) fn joint_loglik_unchecked(point: &Point<'_>, comp: &ComponentParams, w: &WeightConfig) -> f64 {
    let mut ll = comp.prior.ln() + weighted(w.gamma, || comp.z.logpdf(point.z));
    ll += weighted(w.lambda_e, || emission_ll(&comp.error, point.error, point.label));
    ll += weighted(w.lambda_conf, || emission_ll(&comp.conf, point.conf, point.predicted));
    ll
}

#[inline]
fn emission_ll(e: &Emission, row: &[f64], class: usize) -> f64 {
    match e {
        Emission::Gaussian(g) => g.logpdf(row),
        Emission::Categorical { probs } => probs[class].max(PROB_FLOOR).ln(),
    }
}

/// Log-likelihoods of `point` under every slice.
pub fn joint_logliks(point: &Point<'_>, comps: &[ComponentParams], w: &WeightConfig) -> Result<Vec<f64>> {
    comps.iter().map(|c| joint_loglik(point, c, w)).collect()
}

/// Slice posterior of a labeled point.
pub fn responsibilities(point: &Point<'_>, comps: &[ComponentParams], w: &WeightConfig) -> Result<Vec<f64>> {
    if comps.is_empty() {
        return Err(Error::Shape("mixture has no components".into()));
    }
    Ok(softmax(&joint_logliks(point, comps, w)?))
}

/// `log Σ exp(x_i)`, stable for large magnitudes; `-inf` for an empty or
/// all-`-inf` input.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Normalized `exp` of log-weights.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp(logits);
    logits.iter().map(|&l| (l - lse).exp()).collect()
}

/// Argmax with ties to the lowest index.
pub fn argmax_slice(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
