//! Multi-class classification with error-correcting output codes.
//!
//! The coding matrix has one row per class and one column per binary
//! learner. Prediction picks the class whose row has the smallest summed
//! hinge loss against the learners' scores; ties go to the lowest class id.

use nalgebra::{DMatrix, DVector};

use crate::classifier::svm::{train_binary_svm, LinearSvm};
use crate::classifier::LabeledExample;
use crate::container::Container;
use crate::error::{Error, Result};

pub const CONTAINER_KIND: &str = "ecoc_model";

/// One-vs-all coding: `+1` on the diagonal, `−1` elsewhere.
pub fn one_vs_all(classes: usize) -> DMatrix<f64> {
    DMatrix::from_fn(classes, classes, |r, c| if r == c { 1.0 } else { -1.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcocModel {
    pub coding: DMatrix<f64>,
    pub learners: Vec<LinearSvm>,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: usize,
    pub losses: Vec<f64>,
}

pub(crate) fn stack_features(examples: &[&LabeledExample]) -> Result<DMatrix<f64>> {
    let dim = examples.first().map_or(0, |e| e.expression.len());
    if examples.iter().any(|e| e.expression.len() != dim) {
        return Err(Error::InvalidArgument("examples have differing feature lengths".into()));
    }
    Ok(DMatrix::from_fn(examples.len(), dim, |r, c| examples[r].expression[c]))
}

/// Trains one binary learner per coding column. A column that is the exact
/// negation of an earlier one reuses that learner negated.
pub fn train_ecoc(
    examples: &[&LabeledExample],
    class_names: &[String],
    coding: &DMatrix<f64>,
    c_svm: f64,
) -> Result<EcocModel> {
    let classes = class_names.len();
    if coding.nrows() != classes {
        return Err(Error::DimensionMismatch {
            context: "coding matrix rows",
            expected: classes,
            actual: coding.nrows(),
        });
    }
    if coding.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::InvalidArgument("coding matrix entries must be +1 or -1".into()));
    }
    for a in 0..classes {
        for b in a + 1..classes {
            if coding.row(a) == coding.row(b) {
                return Err(Error::InvalidArgument(format!("coding rows {a} and {b} coincide")));
            }
        }
    }
    let mut counts = vec![0usize; classes];
    for e in examples {
        e.validate(classes)?;
        counts[e.label] += 1;
    }
    if let Some(k) = counts.iter().position(|&n| n < 2) {
        return Err(Error::Training(format!(
            "class {k} (`{}`) has {} examples; at least 2 are needed",
            class_names[k], counts[k]
        )));
    }
    let x = stack_features(examples)?;

    let mut learners: Vec<LinearSvm> = Vec::with_capacity(coding.ncols());
    for l in 0..coding.ncols() {
        let column = coding.column(l);
        if let Some(prev) = (0..l).find(|&p| coding.column(p) == -column) {
            learners.push(learners[prev].negated());
            continue;
        }
        let y: Vec<f64> = examples.iter().map(|e| column[e.label]).collect();
        if !(y.contains(&1.0) && y.contains(&-1.0)) {
            return Err(Error::Training(format!("coding column {l} is one-sided on this data")));
        }
        learners.push(train_binary_svm(&x, &y, c_svm)?);
    }
    Ok(EcocModel {
        coding: coding.clone(),
        learners,
        class_names: class_names.to_vec(),
    })
}

impl EcocModel {
    pub fn num_classes(&self) -> usize {
        self.coding.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.learners.first().map_or(0, |l| l.weights.len())
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.learners.iter().map(|l| l.decision(x)).collect()
    }

    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        if x.len() != self.feature_dim() {
            return Err(Error::DimensionMismatch {
                context: "classifier input",
                expected: self.feature_dim(),
                actual: x.len(),
            });
        }
        let scores = self.scores(x);
        let losses: Vec<f64> = (0..self.num_classes())
            .map(|c| {
                scores
                    .iter()
                    .enumerate()
                    .map(|(l, s)| (1.0 - self.coding[(c, l)] * s).max(0.0))
                    .sum()
            })
            .collect();
        let mut label = 0;
        for (c, &v) in losses.iter().enumerate() {
            if v < losses[label] {
                label = c;
            }
        }
        Ok(Prediction { label, losses })
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(CONTAINER_KIND);
        c.set("num_classes", self.num_classes());
        c.set("feature_dim", self.feature_dim());
        for (i, name) in self.class_names.iter().enumerate() {
            c.set(&format!("class.{i}"), name);
        }
        c.push("coding", self.coding.clone());
        let weights = DMatrix::from_fn(self.learners.len(), self.feature_dim(), |r, k| self.learners[r].weights[k]);
        c.push("weights", weights);
        let bias_c = DMatrix::from_fn(self.learners.len(), 2, |r, k| {
            if k == 0 {
                self.learners[r].bias
            } else {
                self.learners[r].c
            }
        });
        c.push("bias_and_c", bias_c);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        c.expect_kind(CONTAINER_KIND)?;
        let classes = c.meta_usize("num_classes")?;
        let class_names = (0..classes)
            .map(|i| c.meta(&format!("class.{i}")).map(String::from))
            .collect::<Result<Vec<_>>>()?;
        let coding = c.array("coding")?.clone();
        let weights = c.array("weights")?;
        let bias_c = c.array("bias_and_c")?;
        if coding.nrows() != classes || weights.nrows() != coding.ncols() || bias_c.shape() != (coding.ncols(), 2) {
            return Err(Error::Format {
                offset: 0,
                message: "inconsistent classifier array shapes".into(),
            });
        }
        let learners = (0..weights.nrows())
            .map(|r| LinearSvm {
                weights: DVector::from_iterator(weights.ncols(), weights.row(r).iter().copied()),
                bias: bias_c[(r, 0)],
                c: bias_c[(r, 1)],
            })
            .collect();
        Ok(EcocModel {
            coding,
            learners,
            class_names,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_container().write_file(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_container(&Container::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(x: &[f64], label: usize) -> LabeledExample {
        LabeledExample {
            expression: DVector::from_row_slice(x),
            label,
            subject_id: String::new(),
        }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn two_class_reduces_to_binary_sign() {
        let data = [ex(&[0.0, 1.0], 0), ex(&[0.5, 1.2], 0), ex(&[2.0, -1.0], 1), ex(&[2.5, -0.3], 1)];
        let refs: Vec<&LabeledExample> = data.iter().collect();
        let m = train_ecoc(&refs, &names(2), &one_vs_all(2), 1.0).unwrap();
        assert_eq!(m.learners[1], m.learners[0].negated());
        for p in [[0.0, 0.0], [3.0, -2.0], [1.0, 0.2], [-5.0, 4.0]] {
            let s = m.learners[0].decision(&p);
            let want = if s >= 0.0 { 0 } else { 1 };
            assert_eq!(m.predict(&p).unwrap().label, want);
        }
    }

    #[test]
    fn ties_go_to_lowest_class() {
        let m = EcocModel {
            coding: one_vs_all(3),
            learners: vec![
                LinearSvm { weights: DVector::zeros(1), bias: 0.0, c: 1.0 };
                3
            ],
            class_names: names(3),
        };
        assert_eq!(m.predict(&[1.0]).unwrap().label, 0);
    }

    #[test]
    fn missing_class_rejected() {
        let data = [ex(&[0.0], 0), ex(&[1.0], 0), ex(&[2.0], 1)];
        let refs: Vec<&LabeledExample> = data.iter().collect();
        assert!(matches!(
            train_ecoc(&refs, &names(2), &one_vs_all(2), 1.0),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn container_round_trip() {
        let data = [ex(&[0.0, 1.0], 0), ex(&[0.5, 1.2], 0), ex(&[2.0, -1.0], 1), ex(&[2.5, -0.3], 1), ex(&[-3.0, 0.0], 2), ex(&[-2.5, 0.4], 2)];
        let refs: Vec<&LabeledExample> = data.iter().collect();
        let m = train_ecoc(&refs, &names(3), &one_vs_all(3), 1.0).unwrap();
        let back = EcocModel::from_container(&Container::from_bytes(&m.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
