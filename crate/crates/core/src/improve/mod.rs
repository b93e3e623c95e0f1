//! Using detected error-prone points to improve a frozen classifier:
//! selective prediction, prediction flipping and simulated active learning.

mod active;
mod flip;
mod protocol;
mod selective;

use serde::{Deserialize, Serialize};

pub use active::{
    active_learning, labeled_to_reach, split_seed_set, ActiveConfig, ActiveReport, Round, Selection, StopReason,
};
pub use flip::{
    confidence_flip_baseline, flip_curve, flip_predictions, flip_report, second_most_confident,
    validate_flip_threshold, Flip, FlipOutcome, ThresholdChoice, DEFAULT_THRESHOLD_GRID, REFERENCE_THRESHOLDS,
};
pub use protocol::{read_response, CommandTrainer, Trainer, TrainerOutput, TrainerRequest, TrainerResponse};
pub use selective::{selective_curve, selective_prediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveStep {
    /// Point removed or flipped at this step.
    pub id: String,
    /// Classifier accuracy after the step, percent.
    pub metric: f64,
}

/// Stepwise comparison summary; every field is `None` for an empty curve.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    /// Percent of steps where the curve beats the untouched classifier.
    pub proportion: Option<f64>,
    /// Final metric minus the initial metric.
    pub improvement: Option<f64>,
    /// Percent of steps where the curve beats the confidence baseline at the same step.
    pub c_proportion: Option<f64>,
    /// Final metric minus the baseline's final metric.
    pub c_improvement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    /// What `metric` measures, e.g. `retained_accuracy`.
    pub metric: String,
    pub initial: f64,
    pub steps: Vec<CurveStep>,
    pub baseline: Vec<CurveStep>,
    pub summary: CurveSummary,
}

impl CurveReport {
    pub fn new(metric: &str, initial: f64, steps: Vec<CurveStep>, baseline: Vec<CurveStep>) -> Self {
        let summary = summarize(initial, &steps, &baseline);
        Self { metric: metric.to_string(), initial, steps, baseline, summary }
    }

    /// `step,metric` rows starting from step 0 (the untouched classifier).
    pub fn to_csv(&self) -> String {
        curve_csv(self.initial, &self.steps)
    }

    pub fn baseline_csv(&self) -> String {
        curve_csv(self.initial, &self.baseline)
    }
}

fn curve_csv(initial: f64, steps: &[CurveStep]) -> String {
    let mut out = format!("step,metric\n0,{}\n", crate::exact::to_string(initial));
    for (i, s) in steps.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, crate::exact::to_string(s.metric)));
    }
    out
}

pub fn summarize(initial: f64, steps: &[CurveStep], baseline: &[CurveStep]) -> CurveSummary {
    let Some(last) = steps.last() else {
        return CurveSummary::default();
    };
    let pct = |hits: usize, n: usize| 100.0 * hits as f64 / n as f64;
    let proportion = pct(steps.iter().filter(|s| s.metric > initial).count(), steps.len());
    let paired = steps.len().min(baseline.len());
    let (c_proportion, c_improvement) = if paired == 0 {
        (None, None)
    } else {
        let wins = steps.iter().zip(baseline).filter(|(a, b)| a.metric > b.metric).count();
        (Some(pct(wins, paired)), Some(steps[paired - 1].metric - baseline[paired - 1].metric))
    };
    CurveSummary { proportion: Some(proportion), improvement: Some(last.metric - initial), c_proportion, c_improvement }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn steps(xs: &[f64]) -> Vec<CurveStep> {
        xs.iter().enumerate().map(|(i, &m)| CurveStep { id: format!("s{i}"), metric: m }).collect()
    }

    #[test]
    fn summary_arithmetic() {
        let s = summarize(70.0, &steps(&[72.0, 69.0, 75.0, 80.0]), &steps(&[71.0, 70.0, 76.0, 74.0]));
        assert_eq!(s.proportion, Some(75.0));
        assert_eq!(s.improvement, Some(10.0));
        assert_eq!(s.c_proportion, Some(50.0));
        assert_eq!(s.c_improvement, Some(6.0));
        assert_eq!(summarize(70.0, &[], &[]), CurveSummary::default());
    }

    #[test]
    fn csv_starts_at_initial() {
        let r = CurveReport::new("accuracy", 50.0, steps(&[60.0]), vec![]);
        assert_eq!(r.to_csv(), "step,metric\n0,50.0\n1,60.0\n");
        assert_eq!(r.summary.c_proportion, None);
    }
}
