//! Emotion classification over expression vectors.
//!
//! Also reads and writes the plain CSV layout used to run the protocol on
//! external data: a features file with one row of numbers per example, and
//! a labels file with `label,subject` rows in the same order. Either file
//! may start with a header line.

pub mod cv;
pub mod ecoc;
pub mod svm;

use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub expression: DVector<f64>,
    pub label: usize,
    /// Grouping key for subject-wise folds.
    pub subject_id: String,
}

impl LabeledExample {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.label >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {} outside [0, {classes})",
                self.label
            )));
        }
        if !self.expression.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("example features must be finite".into()));
        }
        Ok(())
    }
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

pub fn read_features_csv(path: &Path) -> Result<Vec<DVector<f64>>> {
    let mut rows: Vec<DVector<f64>> = Vec::new();
    for (i, record) in reader(path)?.records().enumerate() {
        let loc = || format!("{}:{}", path.display(), i + 1);
        let record = record.map_err(|e| Error::parse(loc(), e.to_string()))?;
        let parsed: std::result::Result<Vec<f64>, _> = record.iter().map(str::parse::<f64>).collect();
        match parsed {
            Ok(v) => {
                if let Some(first) = rows.first() {
                    if first.len() != v.len() {
                        return Err(Error::parse(loc(), format!("expected {} columns, found {}", first.len(), v.len())));
                    }
                }
                rows.push(DVector::from_vec(v));
            }
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Error::parse(loc(), e.to_string())),
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput(format!("{} has no feature rows", path.display())));
    }
    Ok(rows)
}

/// `(label, subject)` pairs; a missing subject column yields empty ids.
pub fn read_labels_csv(path: &Path) -> Result<Vec<(String, String)>> {
    let mut rows = Vec::new();
    for (i, record) in reader(path)?.records().enumerate() {
        let record = record.map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e.to_string()))?;
        let label = record.get(0).unwrap_or("").to_string();
        let subject = record.get(1).unwrap_or("").to_string();
        if i == 0 && label.eq_ignore_ascii_case("label") {
            continue;
        }
        if label.is_empty() {
            return Err(Error::parse(format!("{}:{}", path.display(), i + 1), "empty label"));
        }
        rows.push((label, subject));
    }
    Ok(rows)
}

/// Class names in canonical order: numeric order when every name is an
/// integer, lexicographic otherwise.
pub fn class_names_of<'a>(labels: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut names: Vec<String> = labels.into_iter().map(String::from).collect();
    names.sort();
    names.dedup();
    if names.iter().all(|n| n.parse::<i64>().is_ok()) {
        names.sort_by_key(|n| n.parse::<i64>().unwrap_or_default());
    }
    names
}

/// Joins a features file and a labels file into examples.
pub fn load_labeled_csv(features: &Path, labels: &Path) -> Result<(Vec<LabeledExample>, Vec<String>)> {
    let x = read_features_csv(features)?;
    let y = read_labels_csv(labels)?;
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "feature rows vs label rows",
            expected: x.len(),
            actual: y.len(),
        });
    }
    let names = class_names_of(y.iter().map(|(l, _)| l.as_str()));
    let examples = x
        .into_iter()
        .zip(y)
        .map(|(expression, (label, subject_id))| LabeledExample {
            expression,
            label: names.iter().position(|n| *n == label).expect("label collected above"),
            subject_id,
        })
        .collect();
    Ok((examples, names))
}

pub fn write_labeled_csv(examples: &[LabeledExample], names: &[String], features: &Path, labels: &Path) -> Result<()> {
    let mut fx = String::new();
    let mut fy = String::from("label,subject\n");
    for e in examples {
        let row: Vec<String> = e.expression.iter().map(|v| v.to_string()).collect();
        fx.push_str(&row.join(","));
        fx.push('\n');
        fy.push_str(&format!("{},{}\n", names[e.label], e.subject_id));
    }
    std::fs::write(features, fx).map_err(|e| Error::io(features, e))?;
    std::fs::write(labels, fy).map_err(|e| Error::io(labels, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_class_order() {
        assert_eq!(class_names_of(["10", "2", "1", "2"]), vec!["1", "2", "10"]);
        assert_eq!(class_names_of(["happy", "angry"]), vec!["angry", "happy"]);
    }

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("expfit-csv-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let names = vec!["calm".to_string(), "stress".to_string()];
        let ex = vec![
            LabeledExample { expression: DVector::from_vec(vec![0.5, -1.25]), label: 1, subject_id: "a".into() },
            LabeledExample { expression: DVector::from_vec(vec![3.0, 0.1]), label: 0, subject_id: "b".into() },
        ];
        let (f, l) = (dir.join("x.csv"), dir.join("y.csv"));
        write_labeled_csv(&ex, &names, &f, &l).unwrap();
        let (back, back_names) = load_labeled_csv(&f, &l).unwrap();
        assert_eq!(back, ex);
        assert_eq!(back_names, names);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
