//! File-based protocol for an external retraining command.
//!
//! The loop writes a request JSON and runs `command... <request.json>`. The
//! trainer retrains on `train_ids`, writes a labeled validation bundle and an
//! unlabeled pool bundle carrying its new confidences, then writes a response
//! JSON to `response_path` and exits 0.

use std::collections::BTreeSet;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::bundle::{load_bundle, LabeledBundle, UnlabeledBundle};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerRequest {
    pub iteration: usize,
    pub train_ids: Vec<String>,
    /// Ids the pool bundle must cover, in this order.
    pub pool_ids: Vec<String>,
    pub validation_out: PathBuf,
    pub pool_out: PathBuf,
    pub response_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerResponse {
    pub val_accuracy: f64,
    pub validation: PathBuf,
    pub pool: PathBuf,
}

/// What a retraining round hands back to the loop.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerOutput {
    pub val_accuracy: f64,
    pub validation: LabeledBundle,
    pub pool: UnlabeledBundle,
}

pub trait Trainer {
    fn train(&mut self, request: &TrainerRequest) -> Result<TrainerOutput>;
}

/// Runs an external command once per round.
#[derive(Debug, Clone)]
pub struct CommandTrainer {
    pub command: Vec<String>,
    pub timeout: Duration,
}

impl CommandTrainer {
    pub fn new(command: Vec<String>, timeout: Duration) -> Result<Self> {
        if command.is_empty() {
            return Err(Error::Config("trainer command is empty".into()));
        }
        Ok(Self { command, timeout })
    }
}

impl Trainer for CommandTrainer {
    fn train(&mut self, req: &TrainerRequest) -> Result<TrainerOutput> {
        let dir = req.response_path.parent().unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let request_path = dir.join(format!("request_{}.json", req.iteration));
        let text = serde_json::to_string_pretty(req)?;
        std::fs::write(&request_path, text).map_err(|e| Error::io(&request_path, e))?;
        let _ = std::fs::remove_file(&req.response_path);

        let log_path = dir.join(format!("trainer_{}.log", req.iteration));
        let log = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let log_err = log.try_clone().map_err(|e| Error::io(&log_path, e))?;
        let mut child = Command::new(&self.command[0])
            .args(&self.command[1..])
            .arg(&request_path)
            .stdin(Stdio::null())
            .stdout(log)
            .stderr(log_err)
            .spawn()
            .map_err(|e| Error::Trainer(format!("cannot start {:?}: {e}", self.command[0])))?;

        let started = Instant::now();
        let status = loop {
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) if started.elapsed() >= self.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(Error::Trainer(format!(
                        "round {} timed out after {:?} (log: {})",
                        req.iteration,
                        self.timeout,
                        log_path.display()
                    )));
                }
                Ok(None) => thread::sleep(Duration::from_millis(10)),
                Err(e) => return Err(Error::Trainer(format!("waiting for trainer: {e}"))),
            }
        };
        if !status.success() {
            return Err(Error::Trainer(format!(
                "round {} exited with {status} (log: {})",
                req.iteration,
                log_path.display()
            )));
        }
        let response = read_response(&req.response_path)?;
        load_output(req, &response)
    }
}

/// Parses a response file, naming the first missing or ill-typed field.
pub fn read_response(path: &Path) -> Result<TrainerResponse> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Protocol(format!("response {} unreadable: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Protocol(format!("response is not JSON: {e}")))?;
    let field = |name: &str| value.get(name).ok_or_else(|| Error::Protocol(format!("response lacks field `{name}`")));
    let val_accuracy = field("val_accuracy")?
        .as_f64()
        .ok_or_else(|| Error::Protocol("field `val_accuracy` is not a number".into()))?;
    if !(0.0..=1.0).contains(&val_accuracy) {
        return Err(Error::Protocol(format!("field `val_accuracy` = {val_accuracy} outside [0, 1]")));
    }
    let path_field = |name: &str| -> Result<PathBuf> {
        field(name)?
            .as_str()
            .map(PathBuf::from)
            .ok_or_else(|| Error::Protocol(format!("field `{name}` is not a path string")))
    };
    Ok(TrainerResponse { val_accuracy, validation: path_field("validation")?, pool: path_field("pool")? })
}

fn load_output(req: &TrainerRequest, resp: &TrainerResponse) -> Result<TrainerOutput> {
    let validation = load_bundle(&resp.validation)
        .and_then(|b| b.into_labeled())
        .map_err(|e| Error::Protocol(format!("field `validation`: {e}")))?;
    let pool = load_bundle(&resp.pool).map_err(|e| Error::Protocol(format!("field `pool`: {e}")))?.into_unlabeled();
    let want: BTreeSet<&str> = req.pool_ids.iter().map(String::as_str).collect();
    let got: BTreeSet<&str> = pool.ids().iter().map(String::as_str).collect();
    if want != got || pool.len() != req.pool_ids.len() {
        return Err(Error::Protocol(format!(
            "field `pool`: bundle covers {} ids, request listed {}",
            pool.len(),
            req.pool_ids.len()
        )));
    }
    Ok(TrainerOutput { val_accuracy: resp.val_accuracy, validation, pool })
}
