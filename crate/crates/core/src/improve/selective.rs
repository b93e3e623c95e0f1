use std::collections::HashSet;

use super::{CurveReport, CurveStep};
use crate::bundle::UnlabeledBundle;
use crate::discover::{confidence_baseline, Oracle};
use crate::error::{Error, Result};
use crate::sdm::{detect_error_prone, SliceModel};

/// Retained accuracy (percent) after removing each id of `order` in turn,
/// plus the accuracy before any removal. An emptied set keeps the last value.
pub fn selective_curve(order: &[String], bundle: &UnlabeledBundle, oracle: &Oracle) -> Result<(f64, Vec<CurveStep>)> {
    let known: HashSet<&str> = bundle.ids().iter().map(String::as_str).collect();
    let mut correct = 0usize;
    for id in bundle.ids() {
        correct += usize::from(oracle.is_correct(id)?);
    }
    let mut total = bundle.len();
    let initial = if total == 0 { 0.0 } else { 100.0 * correct as f64 / total as f64 };
    let mut removed = HashSet::with_capacity(order.len());
    let mut last = initial;
    let mut steps = Vec::with_capacity(order.len());
    for id in order {
        if !known.contains(id.as_str()) || !removed.insert(id.as_str()) {
            return Err(Error::Validation(format!("removal order has unknown or repeated id {id:?}")));
        }
        correct -= usize::from(oracle.is_correct(id)?);
        total -= 1;
        if total > 0 {
            last = 100.0 * correct as f64 / total as f64;
        }
        steps.push(CurveStep { id: id.clone(), metric: last });
    }
    Ok((initial, steps))
}

/// Removes detected error-prone points in descending error probability and
/// compares with removing the same number of least-confident points.
///
/// The oracle only scores the curves; detection never sees it.
pub fn selective_prediction(model: &SliceModel, bundle: &UnlabeledBundle, oracle: &Oracle) -> Result<CurveReport> {
    let detection = detect_error_prone(model, bundle)?;
    let (initial, steps) = selective_curve(&detection.ids, bundle, oracle)?;
    let base_order = confidence_baseline(bundle, detection.ids.len())?;
    let (_, baseline) = selective_curve(&base_order, bundle, oracle)?;
    Ok(CurveReport::new("retained_accuracy", initial, steps, baseline))
}
