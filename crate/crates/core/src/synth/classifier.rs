use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::softmax;

/// Full-batch gradient descent on the L2-regularized softmax loss, from zero weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecipe {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for TrainRecipe {
    fn default() -> Self {
        Self { epochs: 200, learning_rate: 1.0, l2: 1e-3 }
    }
}

/// Softmax regression on standardized inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    mean: Array1<f64>,
    scale: Array1<f64>,
    /// (dim + 1) × C; the last row is the bias.
    weights: Array2<f64>,
}

impl LinearClassifier {
    /// Standardization uses `(mean, scale)` so that every retrain shares the same input map.
    pub fn fit(
        x: &Array2<f64>,
        labels: &[usize],
        num_classes: usize,
        mean: &Array1<f64>,
        scale: &Array1<f64>,
        recipe: &TrainRecipe,
    ) -> Result<Self> {
        if x.nrows() == 0 || x.nrows() != labels.len() {
            return Err(Error::InsufficientData("classifier needs at least one labeled row".into()));
        }
        let xs = design(x, mean, scale);
        let (n, d1) = xs.dim();
        let mut onehot = Array2::zeros((n, num_classes));
        for (i, &y) in labels.iter().enumerate() {
            onehot[[i, y]] = 1.0;
        }
        let mut w = Array2::<f64>::zeros((d1, num_classes));
        for _ in 0..recipe.epochs {
            let mut p = xs.dot(&w);
            for mut row in p.rows_mut() {
                let s = softmax(row.as_slice().expect("contiguous row"));
                row.assign(&Array1::from(s));
            }
            p -= &onehot;
            let mut grad = xs.t().dot(&p) / n as f64;
            let mut reg = w.clone() * recipe.l2;
            reg.row_mut(d1 - 1).fill(0.0);
            grad += &reg;
            w.scaled_add(-recipe.learning_rate, &grad);
        }
        Ok(Self { mean: mean.clone(), scale: scale.clone(), weights: w })
    }

    pub fn predict_proba(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut p = design(x, &self.mean, &self.scale).dot(&self.weights);
        for mut row in p.rows_mut() {
            let s = softmax(row.as_slice().expect("contiguous row"));
            row.assign(&Array1::from(s));
        }
        p
    }
}

/// Column means and standard deviations (1 where a column is constant).
pub(crate) fn standardizer(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let mean = x.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(x.ncols()));
    let scale = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    (mean, scale)
}

fn design(x: &Array2<f64>, mean: &Array1<f64>, scale: &Array1<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    let mut out = Array2::ones((n, d + 1));
    out.slice_mut(ndarray::s![.., ..d]).assign(&((x - mean) / scale));
    out
}
