use std::collections::HashSet;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::protocol::{Trainer, TrainerRequest};
use crate::discover::{confidence_baseline, random_baseline};
use crate::error::{Error, Result};
use crate::sdm::{detect_error_prone, fit_edisa, FitConfig};

/// How each round picks pool points to label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Selection {
    /// Every detected error-prone pool point; the SDM decides the count.
    Sdm,
    Random {
        per_step: usize,
    },
    Confidence {
        per_step: usize,
    },
}

impl Selection {
    pub fn name(&self) -> &'static str {
        match self {
            Selection::Sdm => "sdm",
            Selection::Random { .. } => "random",
            Selection::Confidence { .. } => "confidence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveConfig {
    pub fit: FitConfig,
    pub selection: Selection,
    /// Maximum number of labeled training points.
    pub budget: usize,
    /// Cap on points added per round; the SDM keeps its highest error probabilities.
    pub max_per_round: Option<usize>,
    pub max_rounds: usize,
    pub plateau_tol: f64,
    pub plateau_rounds: usize,
    pub seed: u64,
    /// Directory for per-round trainer requests and bundles.
    pub workdir: PathBuf,
}

impl ActiveConfig {
    pub fn new(fit: FitConfig, selection: Selection, budget: usize, workdir: PathBuf) -> Self {
        Self {
            fit,
            selection,
            budget,
            max_per_round: None,
            max_rounds: 50,
            plateau_tol: 1e-4,
            plateau_rounds: 3,
            seed: 0,
            workdir,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub iteration: usize,
    /// Training-set size after this round's additions.
    pub labeled: usize,
    pub selected: usize,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Budget,
    EmptySelection,
    Plateau,
    PoolExhausted,
    MaxRounds,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveReport {
    pub selection: Selection,
    pub rounds: Vec<Round>,
    pub stop: StopReason,
    pub failure: Option<String>,
}

/// Seed training set of `round(frac·N)` ids (at least one); the rest form the pool.
pub fn split_seed_set(ids: &[String], frac: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::Config(format!("seed fraction must lie in (0, 1), got {frac}")));
    }
    if ids.len() < 2 {
        return Err(Error::InsufficientData("need at least 2 training ids".into()));
    }
    let n = ((ids.len() as f64 * frac).round() as usize).clamp(1, ids.len() - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: HashSet<usize> = rand::seq::index::sample(&mut rng, ids.len(), n).into_iter().collect();
    let mut train = Vec::with_capacity(n);
    let mut pool = Vec::with_capacity(ids.len() - n);
    for (i, id) in ids.iter().enumerate() {
        if picked.contains(&i) {
            train.push(id.clone())
        } else {
            pool.push(id.clone())
        }
    }
    Ok((train, pool))
}

/// Training-set size at the first round whose accuracy reaches `target`.
pub fn labeled_to_reach(rounds: &[Round], target: f64) -> Option<usize> {
    rounds.iter().find(|r| r.val_accuracy >= target).map(|r| r.labeled)
}

fn plateaued(rounds: &[Round], tol: f64, needed: usize) -> bool {
    if needed == 0 || rounds.len() <= needed {
        return false;
    }
    rounds[rounds.len() - needed - 1..].windows(2).all(|w| (w[1].val_accuracy - w[0].val_accuracy).abs() < tol)
}

/// Repeats: pick pool points, move them into training, retrain, record
/// validation accuracy. Labels of pool points are never read.
///
/// A trainer or protocol failure ends the loop; the partial report is
/// returned together with the error.
pub fn active_learning(
    cfg: &ActiveConfig,
    trainer: &mut dyn Trainer,
    train_ids: Vec<String>,
    pool_ids: Vec<String>,
) -> (ActiveReport, Option<Error>) {
    let mut report =
        ActiveReport { selection: cfg.selection, rounds: Vec::new(), stop: StopReason::Failed, failure: None };
    match run(cfg, trainer, train_ids, pool_ids, &mut report) {
        Ok(stop) => {
            report.stop = stop;
            (report, None)
        }
        Err(e) => {
            report.stop = StopReason::Failed;
            report.failure = Some(e.to_string());
            (report, Some(e))
        }
    }
}

fn run(
    cfg: &ActiveConfig,
    trainer: &mut dyn Trainer,
    mut train: Vec<String>,
    mut pool: Vec<String>,
    report: &mut ActiveReport,
) -> Result<StopReason> {
    let overlap = {
        let t: HashSet<&String> = train.iter().collect();
        pool.iter().any(|id| t.contains(id))
    };
    if overlap {
        return Err(Error::Validation("seed training ids overlap the pool".into()));
    }
    let mut call = |iteration: usize, train: &[String], pool: &[String]| {
        let dir = cfg.workdir.join(format!("round_{iteration:03}"));
        let req = TrainerRequest {
            iteration,
            train_ids: train.to_vec(),
            pool_ids: pool.to_vec(),
            validation_out: dir.join("validation"),
            pool_out: dir.join("pool"),
            response_path: dir.join("response.json"),
        };
        trainer.train(&req)
    };

    let mut out = call(0, &train, &pool)?;
    report.rounds.push(Round { iteration: 0, labeled: train.len(), selected: 0, val_accuracy: out.val_accuracy });
    for iteration in 1..=cfg.max_rounds {
        if train.len() >= cfg.budget {
            return Ok(StopReason::Budget);
        }
        if pool.is_empty() {
            return Ok(StopReason::PoolExhausted);
        }
        let mut chosen = match cfg.selection {
            Selection::Sdm => {
                let model = fit_edisa(&out.validation, &cfg.fit)?;
                detect_error_prone(&model, &out.pool)?.ids
            }
            Selection::Random { per_step } => {
                let seed = cfg.seed ^ (iteration as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
                random_baseline(&out.pool, per_step.min(out.pool.len()), seed)?
            }
            Selection::Confidence { per_step } => confidence_baseline(&out.pool, per_step.min(out.pool.len()))?,
        };
        chosen.truncate(cfg.max_per_round.unwrap_or(usize::MAX).min(cfg.budget - train.len()));
        if chosen.is_empty() {
            return Ok(StopReason::EmptySelection);
        }
        let picked: HashSet<&str> = chosen.iter().map(String::as_str).collect();
        pool.retain(|id| !picked.contains(id.as_str()));
        let selected = chosen.len();
        train.extend(chosen);

        out = call(iteration, &train, &pool)?;
        report.rounds.push(Round { iteration, labeled: train.len(), selected, val_accuracy: out.val_accuracy });
        if plateaued(&report.rounds, cfg.plateau_tol, cfg.plateau_rounds) {
            return Ok(StopReason::Plateau);
        }
    }
    Ok(StopReason::MaxRounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::{LabeledBundle, UnlabeledBundle};
    use crate::improve::protocol::TrainerOutput;
    use ndarray::Array2;

    /// Returns fixed bundles and accuracy; records every request.
    struct Constant {
        requests: Vec<TrainerRequest>,
        val: LabeledBundle,
        fail_at: Option<usize>,
    }

    impl Trainer for Constant {
        fn train(&mut self, req: &TrainerRequest) -> Result<TrainerOutput> {
            self.requests.push(req.clone());
            if self.fail_at == Some(req.iteration) {
                return Err(Error::Trainer("boom".into()));
            }
            let n = req.pool_ids.len();
            let pool = UnlabeledBundle::new(
                req.pool_ids.clone(),
                Array2::zeros((n, 1)),
                Array2::from_shape_fn((n, 2), |(i, j)| {
                    if j == 0 {
                        0.5 + (i % 5) as f64 * 0.1
                    } else {
                        0.5 - (i % 5) as f64 * 0.1
                    }
                }),
                2,
            )?;
            Ok(TrainerOutput { val_accuracy: 0.8, validation: self.val.clone(), pool })
        }
    }

    fn constant(fail_at: Option<usize>) -> Constant {
        let val = LabeledBundle::new(
            vec!["v0".into(), "v1".into()],
            Array2::zeros((2, 1)),
            Array2::from_elem((2, 2), 0.5),
            vec![0, 1],
            2,
        )
        .unwrap();
        Constant { requests: vec![], val, fail_at }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("x{i:03}")).collect()
    }

    fn cfg(selection: Selection, budget: usize) -> ActiveConfig {
        ActiveConfig::new(FitConfig::edisa(), selection, budget, PathBuf::from("unused"))
    }

    #[test]
    fn constant_trainer_stops_on_plateau() {
        let (train, pool) = split_seed_set(&ids(100), 0.1, 1).unwrap();
        let mut t = constant(None);
        let (r, err) = active_learning(&cfg(Selection::Random { per_step: 5 }, 1000), &mut t, train, pool);
        assert!(err.is_none());
        assert_eq!(r.stop, StopReason::Plateau);
        assert_eq!(r.rounds.len(), 4);
    }

    #[test]
    fn train_grows_and_stays_disjoint_from_pool() {
        let (train, pool) = split_seed_set(&ids(60), 0.1, 2).unwrap();
        let mut t = constant(None);
        let mut c = cfg(Selection::Confidence { per_step: 7 }, 40);
        c.plateau_rounds = 100;
        let (r, _) = active_learning(&c, &mut t, train, pool);
        assert_eq!(r.stop, StopReason::Budget);
        assert_eq!(r.rounds.last().unwrap().labeled, 40);
        for w in t.requests.windows(2) {
            assert!(w[1].train_ids.len() > w[0].train_ids.len());
            assert!(w[1].train_ids.starts_with(&w[0].train_ids));
        }
        for req in &t.requests {
            let train: HashSet<&String> = req.train_ids.iter().collect();
            assert!(req.pool_ids.iter().all(|id| !train.contains(id)));
            assert_eq!(req.train_ids.len() + req.pool_ids.len(), 60);
        }
    }

    #[test]
    fn failure_keeps_partial_trajectory() {
        let (train, pool) = split_seed_set(&ids(50), 0.2, 3).unwrap();
        let mut t = constant(Some(2));
        let mut c = cfg(Selection::Random { per_step: 3 }, 100);
        c.plateau_rounds = 100;
        let (r, err) = active_learning(&c, &mut t, train, pool);
        assert!(matches!(err, Some(Error::Trainer(_))));
        assert_eq!(r.stop, StopReason::Failed);
        assert_eq!(r.rounds.len(), 2);
        assert!(r.failure.unwrap().contains("boom"));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let all = ids(30);
        let (a, b) = split_seed_set(&all, 0.2, 5).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!((a.clone(), b.clone()), split_seed_set(&all, 0.2, 5).unwrap());
        let mut joined: Vec<String> = a.into_iter().chain(b).collect();
        joined.sort();
        assert_eq!(joined, all);
    }

    #[test]
    fn reach_target() {
        let r = |labeled, acc| Round { iteration: 0, labeled, selected: 0, val_accuracy: acc };
        let rounds = [r(10, 0.5), r(20, 0.7), r(35, 0.9)];
        assert_eq!(labeled_to_reach(&rounds, 0.7), Some(20));
        assert_eq!(labeled_to_reach(&rounds, 0.95), None);
    }
}
