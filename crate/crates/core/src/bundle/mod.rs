//! Dataset bundles exported from a frozen classifier.
//!
//! A bundle holds, per datapoint, an embedding row, the classifier's
//! per-class confidence row and (for labeled bundles) the gold label.

mod features;
mod io;
mod pca;

use std::collections::HashSet;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

pub use features::{load_feature_table, FeatureTable};
pub use io::{load_bundle, save_bundle, save_labeled, save_unlabeled, Bundle, BundleMeta, MatrixFormat};
pub use pca::{apply_pca, fit_pca, PcaTransform};

/// Tolerance on row sums and entry bounds of confidence rows.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// A bundle without gold labels: the test points an SDM runs inference on.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledBundle {
    ids: Vec<String>,
    z: Array2<f64>,
    conf: Array2<f64>,
    num_classes: usize,
}

/// A bundle with gold labels, used to fit slice models.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBundle {
    inner: UnlabeledBundle,
    labels: Vec<usize>,
}

impl UnlabeledBundle {
    pub fn new(ids: Vec<String>, z: Array2<f64>, conf: Array2<f64>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Validation(format!("num_classes must be at least 2, got {num_classes}")));
        }
        if z.nrows() != ids.len() || conf.nrows() != ids.len() {
            return Err(Error::Shape(format!(
                "{} ids but Z has {} rows and conf has {} rows",
                ids.len(),
                z.nrows(),
                conf.nrows()
            )));
        }
        if conf.ncols() != num_classes {
            return Err(Error::Shape(format!("conf has {} columns, expected {num_classes}", conf.ncols())));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for id in &ids {
            if id.is_empty() || id.contains('\n') {
                return Err(Error::Validation(format!("invalid id {id:?}")));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::Validation(format!("duplicate id {id:?}")));
            }
        }
        if let Some((i, _)) = z.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite embedding value in row {:?}", ids[i.0])));
        }
        let bad: Vec<&str> =
            conf.rows().into_iter().zip(&ids).filter(|(row, _)| !on_simplex(*row)).map(|(_, id)| id.as_str()).collect();
        if !bad.is_empty() {
            return Err(Error::Validation(format!(
                "confidence rows off the simplex (tolerance {SIMPLEX_TOL}): {}",
                bad.join(", ")
            )));
        }
        Ok(Self { ids, z, conf, num_classes })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn z(&self) -> &Array2<f64> {
        &self.z
    }

    /// Confidence matrix exactly as stored.
    pub fn conf(&self) -> &Array2<f64> {
        &self.conf
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    /// Confidence rows divided by their sums (every row is within
    /// [`SIMPLEX_TOL`] of the simplex, so this only removes storage rounding).
    pub fn normalized_conf(&self) -> Array2<f64> {
        let mut out = self.conf.clone();
        for mut row in out.rows_mut() {
            let s: f64 = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        out
    }

    /// Argmax class of every confidence row (ties to the lowest class).
    pub fn predictions(&self) -> Vec<usize> {
        self.conf.rows().into_iter().map(argmax).collect()
    }

    /// Max class probability of every row.
    pub fn confidences(&self) -> Vec<f64> {
        self.conf.rows().into_iter().map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            ids: rows.iter().map(|&i| self.ids[i].clone()).collect(),
            z: self.z.select(ndarray::Axis(0), rows),
            conf: self.conf.select(ndarray::Axis(0), rows),
            num_classes: self.num_classes,
        }
    }
}

impl LabeledBundle {
    pub fn new(
        ids: Vec<String>,
        z: Array2<f64>,
        conf: Array2<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let inner = UnlabeledBundle::new(ids, z, conf, num_classes)?;
        if labels.len() != inner.len() {
            return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), inner.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidLabel { label, num_classes });
        }
        Ok(Self { inner, labels })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn as_unlabeled(&self) -> &UnlabeledBundle {
        &self.inner
    }

    pub fn into_unlabeled(self) -> UnlabeledBundle {
        self.inner
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        self.inner.ids()
    }

    pub fn z(&self) -> &Array2<f64> {
        self.inner.z()
    }

    pub fn conf(&self) -> &Array2<f64> {
        self.inner.conf()
    }

    pub fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.inner.predictions()
    }

    /// Whether the classifier's argmax prediction matches the gold label, per row.
    pub fn correct(&self) -> Vec<bool> {
        self.predictions().iter().zip(&self.labels).map(|(p, l)| p == l).collect()
    }

    /// Error-distance matrix E = one_hot(Y) − 𝒴 over normalized confidence rows.
    pub fn error_distances(&self) -> Array2<f64> {
        let mut e = self.inner.normalized_conf();
        e.mapv_inplace(|v| -v);
        for (mut row, &l) in e.rows_mut().into_iter().zip(&self.labels) {
            row[l] += 1.0;
        }
        e
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        Self { inner: self.inner.subset(rows), labels: rows.iter().map(|&i| self.labels[i]).collect() }
    }
}

fn on_simplex(row: ArrayView1<'_, f64>) -> bool {
    let in_range = row.iter().all(|&v| v.is_finite() && (-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(&v));
    in_range && (row.sum() - 1.0).abs() <= SIMPLEX_TOL
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Error-distance of one datapoint: `one_hot(label) − conf_row`.
pub fn error_distance(label: usize, conf_row: &[f64]) -> Result<Vec<f64>> {
    if label >= conf_row.len() {
        return Err(Error::InvalidLabel { label, num_classes: conf_row.len() });
    }
    let mut e: Vec<f64> = conf_row.iter().map(|&c| -c).collect();
    e[label] += 1.0;
    Ok(e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn error_distance_examples() {
        assert_eq!(error_distance(0, &[0.3, 0.7]).unwrap(), vec![0.7, -0.7]);
        assert_eq!(error_distance(1, &[0.0, 1.0]).unwrap(), vec![0.0, 0.0]);
        let e = error_distance(1, &[0.2, 0.5, 0.3]).unwrap();
        for (a, b) in e.iter().zip([-0.2, 0.5, -0.3]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn error_distance_rejects_bad_label() {
        assert!(matches!(error_distance(2, &[0.5, 0.5]), Err(Error::InvalidLabel { label: 2, num_classes: 2 })));
    }

    fn simplex_row(c: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, c).prop_filter_map("nonzero", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-3).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn error_distance_plus_conf_is_one_hot(
            (row, label) in (2usize..7).prop_flat_map(|c| (simplex_row(c), 0..c))
        ) {
            let e = error_distance(label, &row).unwrap();
            for (i, (ei, ci)) in e.iter().zip(&row).enumerate() {
                let expect = if i == label { 1.0 } else { 0.0 };
                prop_assert!((ei + ci - expect).abs() <= 1e-15);
                prop_assert!((-1.0..=1.0).contains(ei));
            }
            prop_assert!(e.iter().sum::<f64>().abs() < 1e-9);
            // the label entry is the only one that can be positive
            prop_assert!((e[label] - (1.0 - row[label])).abs() < 1e-15);
            prop_assert!(e.iter().enumerate().all(|(i, &v)| i == label || v <= 0.0));
        }
    }

    #[test]
    fn simplex_violation_names_row() {
        let err =
            UnlabeledBundle::new(vec!["a".into(), "b".into()], array![[0.0], [1.0]], array![[0.5, 0.5], [0.6, 0.6]], 2)
                .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('b') && !msg.contains("a,"), "{msg}");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err =
            UnlabeledBundle::new(vec!["a".into(), "a".into()], array![[0.0], [1.0]], array![[0.5, 0.5], [0.4, 0.6]], 2)
                .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn labeled_rows_have_single_nonnegative_error_entry() {
        let b = LabeledBundle::new(
            vec!["x".into(), "y".into(), "z".into()],
            array![[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]],
            array![[0.9, 0.1], [0.3, 0.7], [0.5, 0.5]],
            vec![0, 0, 1],
            2,
        )
        .unwrap();
        let e = b.error_distances();
        for (row, &l) in e.rows().into_iter().zip(b.labels()) {
            assert!(row[l] >= 0.0);
            assert!(row.iter().enumerate().all(|(i, &v)| i == l || v <= 0.0));
        }
        assert_eq!(b.correct(), vec![true, false, false]);
        assert_eq!(b.predictions(), vec![0, 1, 0]);
    }
}
