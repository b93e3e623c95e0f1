use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Precomputed per-datapoint feature values. Absent (id, feature) pairs read as 0.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeatureTable {
    rows: HashMap<String, BTreeMap<String, f64>>,
    names: BTreeSet<String>,
}

#[derive(Deserialize)]
struct Record {
    id: String,
    features: BTreeMap<String, serde_json::Value>,
}

impl FeatureTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Sets a value, replacing any previous one.
    pub fn set(&mut self, id: &str, feature: &str, value: f64) {
        self.names.insert(feature.to_owned());
        self.rows.entry(id.to_owned()).or_default().insert(feature.to_owned(), value);
    }

    pub fn get(&self, id: &str, feature: &str) -> f64 {
        self.rows.get(id).and_then(|r| r.get(feature)).copied().unwrap_or(0.0)
    }

    /// Every feature name that appears in at least one record, sorted.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn num_features(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Values of `feature` for `ids`, in order.
    pub fn column(&self, ids: &[String], feature: &str) -> Vec<f64> {
        ids.iter().map(|id| self.get(id, feature)).collect()
    }

    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut table = Self::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record =
                serde_json::from_str(line).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
            if table.rows.contains_key(&rec.id) {
                return Err(Error::Validation(format!(
                    "duplicate feature record for id {:?} (line {line_no})",
                    rec.id
                )));
            }
            let mut row = BTreeMap::new();
            for (name, value) in rec.features {
                let v = value.as_f64().ok_or_else(|| {
                    Error::Validation(format!("feature {name:?} of id {:?} is not numeric (line {line_no})", rec.id))
                })?;
                table.names.insert(name.clone());
                row.insert(name, v);
            }
            table.rows.insert(rec.id, row);
        }
        Ok(table)
    }

    pub fn to_jsonl(&self) -> String {
        let mut ids: Vec<&String> = self.rows.keys().collect();
        ids.sort();
        let mut out = String::new();
        for id in ids {
            let rec = serde_json::json!({ "id": id, "features": self.rows[id] });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }
}

pub fn load_feature_table(path: impl AsRef<Path>) -> Result<FeatureTable> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    FeatureTable::parse_jsonl(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn absent_features_default_to_zero() {
        let t = FeatureTable::parse_jsonl(
            "{\"id\":\"a\",\"features\":{\"negation\":1}}\n{\"id\":\"b\",\"features\":{\"length\":12.5}}\n",
        )
        .unwrap();
        assert_eq!(t.get("a", "negation"), 1.0);
        assert_eq!(t.get("a", "length"), 0.0);
        assert_eq!(t.get("missing", "negation"), 0.0);
        assert_eq!(t.names().collect::<Vec<_>>(), ["length", "negation"]);
    }

    #[test]
    fn empty_file_is_empty_table() {
        let t = FeatureTable::parse_jsonl("").unwrap();
        assert!(t.is_empty());
        assert_eq!(t.get("x", "y"), 0.0);
    }

    #[test]
    fn duplicate_id_rejected() {
        let text =
            "{\"id\":\"a\",\"features\":{}}\n{\"id\":\"b\",\"features\":{}}\n{\"id\":\"a\",\"features\":{\"f\":1}}\n";
        assert!(matches!(FeatureTable::parse_jsonl(text), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"id\":\"a\",\"features\":{}}\n{not json}\n";
        assert!(matches!(FeatureTable::parse_jsonl(text), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn non_numeric_value_rejected() {
        let text = "{\"id\":\"a\",\"features\":{\"f\":\"yes\"}}\n";
        assert!(matches!(FeatureTable::parse_jsonl(text), Err(Error::Validation(_))));
    }

    #[test]
    fn jsonl_round_trip() {
        let mut t = FeatureTable::new();
        t.set("b", "neg", 1.0);
        t.set("a", "len", 3.5);
        assert_eq!(FeatureTable::parse_jsonl(&t.to_jsonl()).unwrap(), t);
    }
}
