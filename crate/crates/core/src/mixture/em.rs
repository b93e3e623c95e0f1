//! Expectation-maximization for the weighted mixture.
//!
//! The objective is `Σ_i log Σ_j L(d_i, S_j)` with `L` the weighted joint
//! likelihood. Because the exponents scale whole log-density terms, the M-step
//! maximizer of each modality is the ordinary responsibility-weighted estimate
//! and the objective is non-decreasing across iterations.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    joint_loglik_unchecked, logsumexp, ComponentParams, DiagGaussian, Emission, Mode, Observations, WeightConfig,
    PRIOR_FLOOR, VAR_FLOOR,
};
use crate::error::{Error, Result};
use crate::par;

/// Total responsibility below which a component counts as empty.
const EMPTY_MASS: f64 = 1e-8;
const KMEANS_ITERS: usize = 25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    KmeansPlusPlus,
    RandomResponsibility,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub k: usize,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
    pub init: Init,
    /// Keep θ uniform instead of re-estimating it.
    pub freeze_uniform_prior: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { k: 128, max_iters: 300, rel_tol: 1e-6, seed: 0, init: Init::KmeansPlusPlus, freeze_uniform_prior: false }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(Error::Config(format!("rel_tol must be positive, got {}", self.rel_tol)));
        }
        Ok(())
    }
}

/// A component that lost all its mass and was restarted at a poorly explained point.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reseed {
    pub iteration: usize,
    pub component: usize,
    pub point: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmFit {
    pub components: Vec<ComponentParams>,
    /// Objective after initialization and after every M-step; the last entry
    /// belongs to `components`.
    pub trajectory: Vec<f64>,
    /// Number of M-steps run.
    pub iterations: usize,
    pub converged: bool,
    pub reseeds: Vec<Reseed>,
    /// Initialization actually used (k-means++ falls back to random
    /// responsibilities when every scaled feature is constant).
    pub init: Init,
}

/// Responsibilities (N×k) and per-point `log Σ_j L(d_i, S_j)`.
pub fn e_step(obs: &Observations, comps: &[ComponentParams], w: &WeightConfig) -> (Array2<f64>, Vec<f64>) {
    let k = comps.len();
    let rows = par::map_indexed(obs.len(), |i| {
        let p = obs.point(i);
        let ll: Vec<f64> = comps.iter().map(|c| joint_loglik_unchecked(&p, c, w)).collect();
        let lse = logsumexp(&ll);
        let r: Vec<f64> = ll.iter().map(|&l| (l - lse).exp()).collect();
        (r, lse)
    });
    let mut resp = Array2::zeros((obs.len(), k));
    let mut lse = Vec::with_capacity(obs.len());
    for (i, (r, l)) in rows.into_iter().enumerate() {
        resp.row_mut(i).assign(&ndarray::ArrayView1::from(&r));
        lse.push(l);
    }
    (resp, lse)
}

/// Training objective `Σ_i log Σ_j L(d_i, S_j)`.
pub fn objective(obs: &Observations, comps: &[ComponentParams], w: &WeightConfig) -> f64 {
    let lse = par::map_indexed(obs.len(), |i| {
        let p = obs.point(i);
        let ll: Vec<f64> = comps.iter().map(|c| joint_loglik_unchecked(&p, c, w)).collect();
        logsumexp(&ll)
    });
    lse.iter().sum()
}

pub fn em_fit(obs: &Observations, w: &WeightConfig, cfg: &EmConfig) -> Result<EmFit> {
    w.validate()?;
    cfg.validate()?;
    if obs.len() < cfg.k {
        return Err(Error::InsufficientData(format!("{} observations for {} slices", obs.len(), cfg.k)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let global = GlobalStats::new(obs);
    let (mut comps, init) = initialize(obs, w, cfg, &global, &mut rng);

    let mut trajectory = Vec::new();
    let mut reseeds = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let (resp, lse) = e_step(obs, &comps, w);
        let obj: f64 = lse.iter().sum();
        if let Some(&prev) = trajectory.last() {
            let change = (obj - prev) / f64::abs(prev).max(f64::MIN_POSITIVE);
            if change.abs() < cfg.rel_tol {
                trajectory.push(obj);
                converged = true;
                break;
            }
        }
        trajectory.push(obj);
        if iterations == cfg.max_iters {
            break;
        }
        comps = m_step(obs, &resp, &lse, w.mode, cfg, &global, iterations, &mut reseeds);
        iterations += 1;
    }
    if !reseeds.is_empty() {
        log::info!("EM re-seeded {} empty components", reseeds.len());
    }
    Ok(EmFit { components: comps, trajectory, iterations, converged, reseeds, init })
}

/// Unweighted per-modality statistics of the whole training set.
struct GlobalStats {
    z_var: Vec<f64>,
    e_var: Vec<f64>,
    c_var: Vec<f64>,
    label_freq: Vec<f64>,
    pred_freq: Vec<f64>,
}

impl GlobalStats {
    fn new(obs: &Observations) -> Self {
        let var = |m: &Array2<f64>| -> Vec<f64> {
            m.columns()
                .into_iter()
                .map(|c| {
                    let n = c.len() as f64;
                    let mean = c.sum() / n;
                    (c.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).max(VAR_FLOOR)
                })
                .collect()
        };
        let freq = |xs: &[usize]| -> Vec<f64> {
            let mut f = vec![0.0; obs.num_classes()];
            for &x in xs {
                f[x] += 1.0;
            }
            let n = xs.len() as f64;
            f.iter_mut().for_each(|v| *v /= n);
            f
        };
        Self {
            z_var: var(obs.z()),
            e_var: var(obs.error()),
            c_var: var(obs.conf()),
            label_freq: freq(obs.labels()),
            pred_freq: freq(obs.predicted()),
        }
    }
}

/// Responsibility-weighted sums for every component, stored flat (k × dim).
#[derive(Clone)]
struct Sums {
    mass: Vec<f64>,
    z: Vec<f64>,
    e: Vec<f64>,
    c: Vec<f64>,
}

impl Sums {
    fn zeros(k: usize, d: usize, classes: usize) -> Self {
        Self { mass: vec![0.0; k], z: vec![0.0; k * d], e: vec![0.0; k * classes], c: vec![0.0; k * classes] }
    }

    fn add(&mut self, other: Sums) {
        for (a, b) in
            [(&mut self.mass, other.mass), (&mut self.z, other.z), (&mut self.e, other.e), (&mut self.c, other.c)]
        {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

#[inline]
fn axpy(acc: &mut [f64], r: f64, x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, &v)| *a += r * v);
}

#[inline]
fn sq_dev(acc: &mut [f64], r: f64, x: &[f64], mean: &[f64]) {
    for ((a, &v), &m) in acc.iter_mut().zip(x).zip(mean) {
        let d = v - m;
        *a += r * d * d;
    }
}

#[allow(clippy::too_many_arguments)]
fn m_step(
    obs: &Observations,
    resp: &Array2<f64>,
    lse: &[f64],
    mode: Mode,
    cfg: &EmConfig,
    global: &GlobalStats,
    iteration: usize,
    reseeds: &mut Vec<Reseed>,
) -> Vec<ComponentParams> {
    let (k, d, classes) = (resp.ncols(), obs.dim(), obs.num_classes());

    // first pass: mass and first moments (or class counts for DOMINO)
    let first = par::chunked_reduce(
        obs.len(),
        || Sums::zeros(k, d, classes),
        |acc, i| {
            let p = obs.point(i);
            for j in 0..k {
                let r = resp[[i, j]];
                if r == 0.0 {
                    continue;
                }
                acc.mass[j] += r;
                axpy(&mut acc.z[j * d..(j + 1) * d], r, p.z);
                match mode {
                    Mode::Edisa => {
                        axpy(&mut acc.e[j * classes..(j + 1) * classes], r, p.error);
                        axpy(&mut acc.c[j * classes..(j + 1) * classes], r, p.conf);
                    }
                    Mode::Domino => {
                        acc.e[j * classes + p.label] += r;
                        acc.c[j * classes + p.predicted] += r;
                    }
                }
            }
        },
        Sums::add,
    );

    let divide = |sums: &[f64], j: usize, width: usize| -> Vec<f64> {
        sums[j * width..(j + 1) * width].iter().map(|v| v / first.mass[j]).collect()
    };
    let empty: Vec<bool> = first.mass.iter().map(|&m| m < EMPTY_MASS).collect();
    let z_mean: Vec<Vec<f64>> = (0..k).map(|j| divide(&first.z, j, d)).collect();
    let e_mean: Vec<Vec<f64>> = (0..k).map(|j| divide(&first.e, j, classes)).collect();
    let c_mean: Vec<Vec<f64>> = (0..k).map(|j| divide(&first.c, j, classes)).collect();

    // second pass: centered second moments
    let second = par::chunked_reduce(
        obs.len(),
        || Sums::zeros(k, d, classes),
        |acc, i| {
            let p = obs.point(i);
            for j in 0..k {
                let r = resp[[i, j]];
                if r == 0.0 || empty[j] {
                    continue;
                }
                sq_dev(&mut acc.z[j * d..(j + 1) * d], r, p.z, &z_mean[j]);
                if mode == Mode::Edisa {
                    sq_dev(&mut acc.e[j * classes..(j + 1) * classes], r, p.error, &e_mean[j]);
                    sq_dev(&mut acc.c[j * classes..(j + 1) * classes], r, p.conf, &c_mean[j]);
                }
            }
        },
        Sums::add,
    );
    let variance = |sums: &[f64], j: usize, width: usize| -> Vec<f64> {
        sums[j * width..(j + 1) * width].iter().map(|v| (v / first.mass[j]).max(VAR_FLOOR)).collect()
    };

    let priors =
        if cfg.freeze_uniform_prior { vec![1.0 / k as f64; k] } else { constrained_priors(&first.mass, PRIOR_FLOOR) };

    // worst-explained points first, each used for at most one re-seed
    let mut candidates: Vec<usize> = (0..obs.len()).collect();
    candidates.sort_by(|&a, &b| lse[a].total_cmp(&lse[b]).then(a.cmp(&b)));
    let mut candidates = candidates.into_iter();

    (0..k)
        .map(|j| {
            if empty[j] {
                let point = candidates.next().expect("N >= k");
                reseeds.push(Reseed { iteration, component: j, point });
                return seeded_component(obs, point, priors[j], mode, global);
            }
            let z = DiagGaussian { mean: z_mean[j].clone(), var: variance(&second.z, j, d) };
            let (error, conf) = match mode {
                Mode::Edisa => (
                    Emission::Gaussian(DiagGaussian { mean: e_mean[j].clone(), var: variance(&second.e, j, classes) }),
                    Emission::Gaussian(DiagGaussian { mean: c_mean[j].clone(), var: variance(&second.c, j, classes) }),
                ),
                Mode::Domino => (
                    Emission::Categorical { probs: e_mean[j].clone() },
                    Emission::Categorical { probs: c_mean[j].clone() },
                ),
            };
            ComponentParams { prior: priors[j], z, error, conf }
        })
        .collect()
}

/// Maximizes `Σ_j m_j log θ_j` over the simplex subject to `θ_j ≥ floor`.
/// Components pinned at the floor are excluded and the rest re-scaled until
/// no free component falls below it.
fn constrained_priors(mass: &[f64], floor: f64) -> Vec<f64> {
    let k = mass.len();
    let mut pinned = vec![false; k];
    loop {
        let free_mass: f64 = mass.iter().zip(&pinned).filter(|(_, &p)| !p).map(|(m, _)| m).sum();
        let budget = 1.0 - floor * pinned.iter().filter(|&&p| p).count() as f64;
        let free = pinned.iter().filter(|&&p| !p).count();
        let theta: Vec<f64> = (0..k)
            .map(|j| {
                if pinned[j] {
                    floor
                } else if free_mass > 0.0 {
                    budget * mass[j] / free_mass
                } else {
                    budget / free as f64
                }
            })
            .collect();
        let mut changed = false;
        for j in 0..k {
            if !pinned[j] && theta[j] < floor {
                pinned[j] = true;
                changed = true;
            }
        }
        if !changed {
            return theta;
        }
    }
}

fn seeded_component(obs: &Observations, i: usize, prior: f64, mode: Mode, global: &GlobalStats) -> ComponentParams {
    let p = obs.point(i);
    let z = DiagGaussian { mean: p.z.to_vec(), var: global.z_var.clone() };
    let (error, conf) = match mode {
        Mode::Edisa => (
            Emission::Gaussian(DiagGaussian { mean: p.error.to_vec(), var: global.e_var.clone() }),
            Emission::Gaussian(DiagGaussian { mean: p.conf.to_vec(), var: global.c_var.clone() }),
        ),
        Mode::Domino => (
            Emission::Categorical { probs: global.label_freq.clone() },
            Emission::Categorical { probs: global.pred_freq.clone() },
        ),
    };
    ComponentParams { prior, z, error, conf }
}

fn initialize(
    obs: &Observations,
    w: &WeightConfig,
    cfg: &EmConfig,
    global: &GlobalStats,
    rng: &mut ChaCha8Rng,
) -> (Vec<ComponentParams>, Init) {
    if cfg.init == Init::KmeansPlusPlus {
        let features = scaled_features(obs, w);
        if let Some(assign) = kmeans(&features, cfg.k, rng) {
            return (from_hard_assignment(obs, &assign, cfg, w.mode, global), Init::KmeansPlusPlus);
        }
        log::info!("k-means++ init degenerate (constant scaled features); using random responsibilities");
    }
    let mut resp = Array2::from_shape_fn((obs.len(), cfg.k), |_| rng.random::<f64>() + 1e-3);
    for mut row in resp.rows_mut() {
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    let zeros = vec![0.0; obs.len()];
    let mut ignored = Vec::new();
    let comps = m_step(obs, &resp, &zeros, w.mode, cfg, global, 0, &mut ignored);
    (comps, Init::RandomResponsibility)
}

/// Rows of `[√γ·Z | √λ_E·E | √λ_𝒴·𝒴]` (one-hot label / prediction for DOMINO).
fn scaled_features(obs: &Observations, w: &WeightConfig) -> Array2<f64> {
    let (d, c) = (obs.dim(), obs.num_classes());
    let (sg, se, sc) = (w.gamma.sqrt(), w.lambda_e.sqrt(), w.lambda_conf.sqrt());
    let mut cols = 0;
    let blocks = [(sg, d), (se, c), (sc, c)];
    for (s, width) in blocks {
        if s > 0.0 {
            cols += width;
        }
    }
    let mut out = Array2::zeros((obs.len(), cols));
    for i in 0..obs.len() {
        let p = obs.point(i);
        let mut row = out.row_mut(i);
        let mut at = 0;
        if sg > 0.0 {
            for (t, &v) in p.z.iter().enumerate() {
                row[at + t] = sg * v;
            }
            at += d;
        }
        if se > 0.0 {
            match w.mode {
                Mode::Edisa => p.error.iter().enumerate().for_each(|(t, &v)| row[at + t] = se * v),
                Mode::Domino => row[at + p.label] = se,
            }
            at += c;
        }
        if sc > 0.0 {
            match w.mode {
                Mode::Edisa => p.conf.iter().enumerate().for_each(|(t, &v)| row[at + t] = sc * v),
                Mode::Domino => row[at + p.predicted] = sc,
            }
        }
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding followed by Lloyd iterations. Returns `None` when the
/// features carry no spread at all.
fn kmeans(x: &Array2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let n = x.nrows();
    if x.ncols() == 0 {
        return None;
    }
    let first = x.row(0);
    if x.rows().into_iter().all(|r| r == first) {
        return None;
    }
    let row = |i: usize| x.row(i).to_slice().expect("standard layout").to_vec();

    let mut seeds = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(&row(i), &row(seeds[0]))).collect();
    while seeds.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &v) in d2.iter().enumerate() {
                if u < v {
                    pick = i;
                    break;
                }
                u -= v;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        seeds.push(next);
        let c = row(next);
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(sq_dist(&row(i), &c));
        }
    }

    let mut centers: Vec<Vec<f64>> = seeds.iter().map(|&s| row(s)).collect();
    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_ITERS {
        let next: Vec<usize> = par::map_indexed(n, |i| {
            let xi = x.row(i);
            let xi = xi.to_slice().expect("standard layout");
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let dj = sq_dist(xi, c);
                if dj < best_d {
                    best_d = dj;
                    best = j;
                }
            }
            best
        });
        if next == assign {
            break;
        }
        assign = next;
        let mut sums = vec![vec![0.0; x.ncols()]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            axpy(&mut sums[a], 1.0, x.row(i).to_slice().expect("standard layout"));
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|v| v / counts[j] as f64).collect();
            }
        }
    }
    // an empty cluster takes back its seed point so every component starts with data
    let mut counts = vec![0usize; k];
    assign.iter().for_each(|&a| counts[a] += 1);
    for (j, &s) in seeds.iter().enumerate() {
        if counts[j] == 0 && counts[assign[s]] > 1 {
            counts[assign[s]] -= 1;
            assign[s] = j;
            counts[j] = 1;
        }
    }
    Some(assign)
}

/// Initial parameters from hard cluster labels: member means, global
/// variances, and member fractions as priors.
fn from_hard_assignment(
    obs: &Observations,
    assign: &[usize],
    cfg: &EmConfig,
    mode: Mode,
    global: &GlobalStats,
) -> Vec<ComponentParams> {
    let (k, d, c) = (cfg.k, obs.dim(), obs.num_classes());
    let mut sums = Sums::zeros(k, d, c);
    for (i, &j) in assign.iter().enumerate() {
        let p = obs.point(i);
        sums.mass[j] += 1.0;
        axpy(&mut sums.z[j * d..(j + 1) * d], 1.0, p.z);
        match mode {
            Mode::Edisa => {
                axpy(&mut sums.e[j * c..(j + 1) * c], 1.0, p.error);
                axpy(&mut sums.c[j * c..(j + 1) * c], 1.0, p.conf);
            }
            Mode::Domino => {
                sums.e[j * c + p.label] += 1.0;
                sums.c[j * c + p.predicted] += 1.0;
            }
        }
    }
    let priors =
        if cfg.freeze_uniform_prior { vec![1.0 / k as f64; k] } else { constrained_priors(&sums.mass, PRIOR_FLOOR) };
    (0..k)
        .map(|j| {
            let m = sums.mass[j];
            if m == 0.0 {
                // only reachable when there are fewer distinct points than k
                let donor = assign.iter().position(|&a| a == j).unwrap_or(j.min(obs.len() - 1));
                return seeded_component(obs, donor, priors[j], mode, global);
            }
            let mean = |s: &[f64], w: usize| -> Vec<f64> { s[j * w..(j + 1) * w].iter().map(|v| v / m).collect() };
            let z = DiagGaussian { mean: mean(&sums.z, d), var: global.z_var.clone() };
            let (error, conf) = match mode {
                Mode::Edisa => (
                    Emission::Gaussian(DiagGaussian { mean: mean(&sums.e, c), var: global.e_var.clone() }),
                    Emission::Gaussian(DiagGaussian { mean: mean(&sums.c, c), var: global.c_var.clone() }),
                ),
                Mode::Domino => (
                    Emission::Categorical { probs: mean(&sums.e, c) },
                    Emission::Categorical { probs: mean(&sums.c, c) },
                ),
            };
            ComponentParams { prior: priors[j], z, error, conf }
        })
        .collect()
}
