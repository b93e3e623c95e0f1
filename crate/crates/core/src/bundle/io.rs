//! On-disk bundle directories.
//!
//! ```text
//! meta.json        {"n", "dim", "num_classes", "format": "f32le" | "csv"}
//! ids.txt          one id per line
//! Z.bin, conf.bin  row-major little-endian f32   (format = f32le)
//! Z.csv, conf.csv  one row per line               (format = csv)
//! labels.csv       id,label                       (labeled bundles only)
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{LabeledBundle, UnlabeledBundle};
use crate::error::{Error, Result};
use crate::exact;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    #[default]
    F32le,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub n: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub format: MatrixFormat,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Bundle {
    Labeled(LabeledBundle),
    Unlabeled(UnlabeledBundle),
}

impl Bundle {
    pub fn as_unlabeled(&self) -> &UnlabeledBundle {
        match self {
            Bundle::Labeled(b) => b.as_unlabeled(),
            Bundle::Unlabeled(b) => b,
        }
    }

    pub fn into_labeled(self) -> Result<LabeledBundle> {
        match self {
            Bundle::Labeled(b) => Ok(b),
            Bundle::Unlabeled(_) => {
                Err(Error::Validation("bundle has no labels.csv but a labeled bundle is required".into()))
            }
        }
    }

    pub fn into_unlabeled(self) -> UnlabeledBundle {
        match self {
            Bundle::Labeled(b) => b.into_unlabeled(),
            Bundle::Unlabeled(b) => b,
        }
    }
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<Bundle> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta: BundleMeta = serde_json::from_str(&read_string(&meta_path)?)?;

    let ids: Vec<String> = read_string(&dir.join("ids.txt"))?.lines().map(str::to_owned).collect();
    if ids.len() != meta.n {
        return Err(Error::Validation(format!(
            "ids.txt has {} lines but meta.json declares n = {}",
            ids.len(),
            meta.n
        )));
    }
    let z = read_matrix(dir, "Z", meta.format, meta.n, meta.dim)?;
    let conf = read_matrix(dir, "conf", meta.format, meta.n, meta.num_classes)?;
    let unlabeled = UnlabeledBundle::new(ids, z, conf, meta.num_classes)?;

    let labels_path = dir.join("labels.csv");
    if !labels_path.exists() {
        return Ok(Bundle::Unlabeled(unlabeled));
    }
    let labels = read_labels(&labels_path, unlabeled.ids())?;
    let UnlabeledBundle { ids, z, conf, num_classes } = unlabeled;
    Ok(Bundle::Labeled(LabeledBundle::new(ids, z, conf, labels, num_classes)?))
}

pub fn save_bundle(dir: impl AsRef<Path>, bundle: &Bundle, format: MatrixFormat) -> Result<()> {
    match bundle {
        Bundle::Labeled(b) => save_labeled(dir, b, format),
        Bundle::Unlabeled(b) => save_unlabeled(dir, b, format),
    }
}

pub fn save_labeled(dir: impl AsRef<Path>, bundle: &LabeledBundle, format: MatrixFormat) -> Result<()> {
    let dir = dir.as_ref();
    save_unlabeled(dir, bundle.as_unlabeled(), format)?;
    let path = dir.join("labels.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_err(&path, e))?;
    w.write_record(["id", "label"]).map_err(|e| csv_err(&path, e))?;
    for (id, label) in bundle.ids().iter().zip(bundle.labels()) {
        w.write_record([id.as_str(), &label.to_string()]).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn save_unlabeled(dir: impl AsRef<Path>, bundle: &UnlabeledBundle, format: MatrixFormat) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = BundleMeta { n: bundle.len(), dim: bundle.dim(), num_classes: bundle.num_classes(), format };
    write_file(&dir.join("meta.json"), serde_json::to_string_pretty(&meta)?.as_bytes())?;
    let mut ids = bundle.ids().join("\n");
    if !ids.is_empty() {
        ids.push('\n');
    }
    write_file(&dir.join("ids.txt"), ids.as_bytes())?;
    write_matrix(dir, "Z", format, bundle.z())?;
    write_matrix(dir, "conf", format, bundle.conf())?;
    // a stale labels file would silently turn this into a labeled bundle
    let labels = dir.join("labels.csv");
    if labels.exists() {
        fs::remove_file(&labels).map_err(|e| Error::io(&labels, e))?;
    }
    Ok(())
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse { line, message: format!("{}: {other:?}", path.display()) },
    }
}

fn matrix_path(dir: &Path, name: &str, format: MatrixFormat) -> PathBuf {
    match format {
        MatrixFormat::F32le => dir.join(format!("{name}.bin")),
        MatrixFormat::Csv => dir.join(format!("{name}.csv")),
    }
}

fn read_matrix(dir: &Path, name: &str, format: MatrixFormat, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let path = matrix_path(dir, name, format);
    let values: Vec<f64> = match format {
        MatrixFormat::F32le => {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() != rows * cols * 4 {
                return Err(Error::Shape(format!(
                    "{} has {} bytes, expected {rows}×{cols}×4",
                    path.display(),
                    bytes.len()
                )));
            }
            bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect()
        }
        MatrixFormat::Csv => {
            let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(&path).map_err(|e| csv_err(&path, e))?;
            let mut values = Vec::with_capacity(rows * cols);
            for (i, rec) in r.records().enumerate() {
                let rec = rec.map_err(|e| csv_err(&path, e))?;
                if rec.len() != cols {
                    return Err(Error::Shape(format!(
                        "{} line {} has {} columns, expected {cols}",
                        path.display(),
                        i + 1,
                        rec.len()
                    )));
                }
                for field in rec.iter() {
                    values.push(field.trim().parse::<f64>().map_err(|e| Error::Parse {
                        line: i + 1,
                        message: format!("{}: {field:?}: {e}", path.display()),
                    })?);
                }
            }
            values
        }
    };
    if values.len() != rows * cols {
        return Err(Error::Shape(format!("{} holds {} values, expected {rows}×{cols}", path.display(), values.len())));
    }
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}

fn write_matrix(dir: &Path, name: &str, format: MatrixFormat, m: &Array2<f64>) -> Result<()> {
    let path = matrix_path(dir, name, format);
    match format {
        MatrixFormat::F32le => {
            let mut bytes = Vec::with_capacity(m.len() * 4);
            for &v in m.iter() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            write_file(&path, &bytes)
        }
        MatrixFormat::Csv => {
            let mut out = String::new();
            for row in m.rows() {
                let cells: Vec<String> = row.iter().map(|&v| exact::to_string(v)).collect();
                out.push_str(&cells.join(","));
                out.push('\n');
            }
            write_file(&path, out.as_bytes())
        }
    }
}

fn read_labels(path: &Path, ids: &[String]) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let index: std::collections::HashMap<&str, usize> =
        ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut labels: Vec<Option<usize>> = vec![None; ids.len()];
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        let (id, label) = match (rec.get(0), rec.get(1)) {
            (Some(id), Some(label)) => (id, label),
            _ => return Err(Error::Parse { line, message: "expected id,label".into() }),
        };
        let label: usize =
            label.trim().parse().map_err(|e| Error::Parse { line, message: format!("label {label:?}: {e}") })?;
        let row = *index.get(id).ok_or_else(|| Error::Validation(format!("labels.csv names unknown id {id:?}")))?;
        if labels[row].replace(label).is_some() {
            return Err(Error::Validation(format!("labels.csv repeats id {id:?}")));
        }
    }
    let missing: Vec<&str> = labels.iter().zip(ids).filter(|(l, _)| l.is_none()).map(|(_, id)| id.as_str()).collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!("labels.csv lacks ids: {}", missing.join(", "))));
    }
    Ok(labels.into_iter().map(|l| l.expect("checked")).collect())
}
