use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact;

/// Centering plus projection onto the leading right singular vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaTransform {
    #[serde(with = "exact::vector")]
    mean: Vec<f64>,
    /// D×d, orthonormal columns.
    #[serde(with = "exact::matrix")]
    basis: Array2<f64>,
    /// Dimension asked for; larger than `d()` when the data had lower rank.
    requested: usize,
}

impl PcaTransform {
    /// Pass-through transform (zero mean, identity basis).
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], basis: Array2::eye(dim), requested: dim }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// Output dimension.
    pub fn d(&self) -> usize {
        self.basis.ncols()
    }

    pub fn requested(&self) -> usize {
        self.requested
    }

    pub fn truncated(&self) -> bool {
        self.d() < self.requested
    }
}

/// Fits a PCA transform keeping `d` components (fewer if the centered data
/// has lower rank). Each basis column has its largest-magnitude entry made
/// positive so the transform is fully determined by the data.
pub fn fit_pca(x: &Array2<f64>, d: usize) -> Result<PcaTransform> {
    let (n, dim) = x.dim();
    if n < 2 {
        return Err(Error::InsufficientData(format!("PCA needs at least 2 rows, got {n}")));
    }
    if d == 0 || d > dim {
        return Err(Error::Range(format!("PCA dimension {d} outside 1..={dim}")));
    }
    let mean = x.mean_axis(Axis(0)).expect("n >= 2");
    let centered = x - &mean.view().insert_axis(Axis(0));

    let scale = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let m = DMatrix::from_row_iterator(n, dim, centered.iter().copied());
    // Right singular vectors of X equal those of R in X = QR, and R is only D×D.
    let reduced = if n > dim { m.qr().r() } else { m };
    let svd = reduced.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");

    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let s_max = order.first().map(|&i| svd.singular_values[i]).unwrap_or(0.0);
    let tol = (n.max(dim) as f64) * f64::EPSILON * s_max.max(scale);
    let rank = order.iter().take_while(|&&i| svd.singular_values[i] > tol).count();
    let keep = d.min(rank);
    if keep < d {
        log::info!("PCA truncated to {keep} components (requested {d}, rank {rank})");
    }

    let mut basis = Array2::zeros((dim, keep));
    for (col, &i) in order.iter().take(keep).enumerate() {
        let row = v_t.row(i);
        let pivot = row.iter().enumerate().fold(0, |best, (j, v)| if v.abs() > row[best].abs() { j } else { best });
        let sign = if row[pivot] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..dim {
            basis[[j, col]] = sign * row[j];
        }
    }
    Ok(PcaTransform { mean: mean.to_vec(), basis, requested: d })
}

/// Projects rows of `x`: `(x − mean) · basis`.
pub fn apply_pca(t: &PcaTransform, x: &Array2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != t.input_dim() {
        return Err(Error::Shape(format!("PCA expects {} columns, got {}", t.input_dim(), x.ncols())));
    }
    let mean = Array1::from(t.mean.clone());
    let centered = x - &mean.view().insert_axis(Axis(0));
    Ok(centered.dot(&t.basis))
}
