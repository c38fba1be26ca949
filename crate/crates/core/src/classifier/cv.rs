//! Stratified and subject-grouped k-fold cross-validation with an inner
//! grid search over the SVM regularisation weight.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::classifier::ecoc::{one_vs_all, train_ecoc};
use crate::classifier::LabeledExample;
use crate::error::{Error, Result};
use crate::synth::rng_for;

pub const DEFAULT_C_GRID: [f64; 5] = [0.01, 0.1, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, PartialEq)]
pub struct CvConfig {
    pub k: usize,
    /// Keep every subject's examples inside a single fold.
    pub grouped: bool,
    pub repeats: usize,
    pub seed: u64,
    pub c_grid: Vec<f64>,
    /// Folds of the inner search run on each outer training split.
    pub inner_k: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            k: 10,
            grouped: false,
            repeats: 1,
            seed: 0,
            c_grid: DEFAULT_C_GRID.to_vec(),
            inner_k: 3,
        }
    }
}

impl CvConfig {
    /// Five folds grouped by subject, repeated ten times.
    pub fn stress_protocol(seed: u64) -> Self {
        CvConfig {
            k: 5,
            grouped: true,
            repeats: 10,
            seed,
            ..CvConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("cross-validation needs k >= 2, got {}", self.k)));
        }
        if self.repeats == 0 {
            return Err(Error::Config("cross-validation repeats must be positive".into()));
        }
        if self.c_grid.is_empty() || self.c_grid.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::Config("svm grid must hold positive values".into()));
        }
        if self.inner_k < 2 {
            return Err(Error::Config("inner_k must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub repeat: usize,
    pub fold: usize,
    pub accuracy: f64,
    pub c_svm: f64,
    pub test_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub folds: Vec<FoldResult>,
    pub mean: f64,
    pub std: f64,
    /// `confusion[true][predicted]`, summed over every held-out prediction.
    pub confusion: Vec<Vec<usize>>,
    pub class_names: Vec<String>,
}

impl CvReport {
    pub fn fold_accuracies(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.accuracy).collect()
    }

    /// `true,predicted,count` records.
    pub fn confusion_records(&self) -> String {
        let mut out = String::from("true,predicted,count\n");
        for (t, row) in self.confusion.iter().enumerate() {
            for (p, n) in row.iter().enumerate() {
                out.push_str(&format!("{},{},{n}\n", self.class_names[t], self.class_names[p]));
            }
        }
        out
    }
}

impl fmt::Display for CvReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "folds {}  mean accuracy {:.4}  std {:.4}", self.folds.len(), self.mean, self.std)?;
        let width = self.class_names.iter().map(String::len).max().unwrap_or(1).max(6);
        write!(f, "{:>width$}", "true\\pred")?;
        for name in &self.class_names {
            write!(f, " {name:>width$}")?;
        }
        writeln!(f)?;
        for (t, row) in self.confusion.iter().enumerate() {
            write!(f, "{:>width$}", self.class_names[t])?;
            for n in row {
                write!(f, " {n:>width$}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Majority label per subject; ties go to the lowest label.
fn subject_labels(examples: &[&LabeledExample], classes: usize) -> BTreeMap<String, usize> {
    let mut counts: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for e in examples {
        counts.entry(e.subject_id.clone()).or_insert_with(|| vec![0; classes])[e.label] += 1;
    }
    counts
        .into_iter()
        .map(|(s, c)| {
            let mut best = 0;
            for (l, &n) in c.iter().enumerate() {
                if n > c[best] {
                    best = l;
                }
            }
            (s, best)
        })
        .collect()
}

/// Test-fold membership (`fold[i]`) for each example, stratified by label.
/// In grouped mode whole subjects are dealt, stratified by majority label.
pub fn assign_folds(
    examples: &[&LabeledExample],
    classes: usize,
    k: usize,
    grouped: bool,
    seed: u64,
    stream: u64,
) -> Result<Vec<usize>> {
    let mut rng = rng_for(seed, stream);
    let mut fold = vec![0usize; examples.len()];
    let mut next = 0usize;
    if grouped {
        let subjects = subject_labels(examples, classes);
        if subjects.len() < k {
            return Err(Error::Config(format!(
                "grouped cross-validation needs at least {k} subjects, found {}",
                subjects.len()
            )));
        }
        let mut subject_fold = BTreeMap::new();
        for c in 0..classes {
            let mut ids: Vec<&String> = subjects.iter().filter(|(_, &l)| l == c).map(|(s, _)| s).collect();
            ids.shuffle(&mut rng);
            for s in ids {
                subject_fold.insert(s.clone(), next % k);
                next += 1;
            }
        }
        for (i, e) in examples.iter().enumerate() {
            fold[i] = subject_fold[&e.subject_id];
        }
    } else {
        if examples.len() < k {
            return Err(Error::Config(format!("{} examples cannot fill {k} folds", examples.len())));
        }
        for c in 0..classes {
            let mut idx: Vec<usize> = (0..examples.len()).filter(|&i| examples[i].label == c).collect();
            idx.shuffle(&mut rng);
            for i in idx {
                fold[i] = next % k;
                next += 1;
            }
        }
    }
    Ok(fold)
}

fn accuracy_on(train: &[&LabeledExample], test: &[&LabeledExample], names: &[String], c_svm: f64) -> Result<(f64, Vec<(usize, usize)>)> {
    let model = train_ecoc(train, names, &one_vs_all(names.len()), c_svm)?;
    let mut pairs = Vec::with_capacity(test.len());
    for e in test {
        pairs.push((e.label, model.predict(e.expression.as_slice())?.label));
    }
    let correct = pairs.iter().filter(|(t, p)| t == p).count();
    Ok((correct as f64 / test.len().max(1) as f64, pairs))
}

/// Picks the grid value with the best mean inner-fold accuracy (first on ties).
fn select_c(train: &[&LabeledExample], names: &[String], config: &CvConfig, seed_stream: u64) -> Result<f64> {
    if config.c_grid.len() == 1 {
        return Ok(config.c_grid[0]);
    }
    let inner = assign_folds(train, names.len(), config.inner_k, config.grouped, config.seed, seed_stream)?;
    let mut best = (f64::NEG_INFINITY, config.c_grid[0]);
    for &c in &config.c_grid {
        let mut total = 0.0;
        let mut used = 0usize;
        for f in 0..config.inner_k {
            let (tr, te): (Vec<_>, Vec<_>) = train.iter().zip(&inner).partition(|(_, &g)| g != f);
            let tr: Vec<&LabeledExample> = tr.into_iter().map(|(e, _)| *e).collect();
            let te: Vec<&LabeledExample> = te.into_iter().map(|(e, _)| *e).collect();
            if te.is_empty() {
                continue;
            }
            match accuracy_on(&tr, &te, names, c) {
                Ok((acc, _)) => {
                    total += acc;
                    used += 1;
                }
                // An inner split can lose a class entirely; it carries no signal.
                Err(Error::Training(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if used > 0 && total / used as f64 > best.0 {
            best = (total / used as f64, c);
        }
    }
    Ok(best.1)
}

pub fn cross_validate(examples: &[LabeledExample], class_names: &[String], config: &CvConfig) -> Result<CvReport> {
    config.validate()?;
    let classes = class_names.len();
    if classes < 2 {
        return Err(Error::Config("cross-validation needs at least two classes".into()));
    }
    for e in examples {
        e.validate(classes)?;
    }
    let refs: Vec<&LabeledExample> = examples.iter().collect();
    let assignments = (0..config.repeats)
        .map(|r| assign_folds(&refs, classes, config.k, config.grouped, config.seed, 1000 + r as u64))
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, usize)> = (0..config.repeats).flat_map(|r| (0..config.k).map(move |f| (r, f))).collect();
    let outcomes = jobs
        .par_iter()
        .map(|&(r, f)| {
            let folds = &assignments[r];
            let train: Vec<&LabeledExample> = refs.iter().zip(folds).filter(|(_, &g)| g != f).map(|(e, _)| *e).collect();
            let test: Vec<&LabeledExample> = refs.iter().zip(folds).filter(|(_, &g)| g == f).map(|(e, _)| *e).collect();
            if test.is_empty() {
                return Err(Error::Config(format!("fold {f} of repeat {r} is empty")));
            }
            let stream = 10_000 + (r * config.k + f) as u64;
            let c = select_c(&train, class_names, config, stream)?;
            let (accuracy, pairs) = accuracy_on(&train, &test, class_names, c)?;
            Ok((
                FoldResult {
                    repeat: r,
                    fold: f,
                    accuracy,
                    c_svm: c,
                    test_count: test.len(),
                },
                pairs,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut folds = Vec::with_capacity(outcomes.len());
    for (fold, pairs) in outcomes {
        for (t, p) in pairs {
            confusion[t][p] += 1;
        }
        folds.push(fold);
    }
    let n = folds.len() as f64;
    let mean = folds.iter().map(|f| f.accuracy).sum::<f64>() / n;
    let var = folds.iter().map(|f| (f.accuracy - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(CvReport {
        folds,
        mean,
        std: var.sqrt(),
        confusion,
        class_names: class_names.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn data(subjects: usize, per_subject: usize) -> Vec<LabeledExample> {
        let mut out = Vec::new();
        for s in 0..subjects {
            for i in 0..per_subject {
                let label = (s + i) % 3;
                out.push(LabeledExample {
                    expression: DVector::from_fn(3, |k, _| if k == label { 5.0 } else { 0.01 * i as f64 }),
                    label,
                    subject_id: format!("s{s}"),
                });
            }
        }
        out
    }

    #[test]
    fn grouped_folds_keep_subjects_together() {
        let d = data(9, 6);
        let refs: Vec<&LabeledExample> = d.iter().collect();
        let folds = assign_folds(&refs, 3, 3, true, 1, 0).unwrap();
        for s in 0..9 {
            let id = format!("s{s}");
            let fs: Vec<usize> = d.iter().zip(&folds).filter(|(e, _)| e.subject_id == id).map(|(_, &f)| f).collect();
            assert!(fs.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn stratified_folds_balance_classes() {
        let d = data(10, 6);
        let refs: Vec<&LabeledExample> = d.iter().collect();
        let folds = assign_folds(&refs, 3, 5, false, 1, 0).unwrap();
        for f in 0..5 {
            for c in 0..3 {
                let n = d.iter().zip(&folds).filter(|(e, &g)| g == f && e.label == c).count();
                assert_eq!(n, 4);
            }
        }
    }

    #[test]
    fn too_few_subjects_is_config_error() {
        let d = data(3, 6);
        let names: Vec<String> = (0..3).map(|c| c.to_string()).collect();
        let cfg = CvConfig { k: 5, grouped: true, ..Default::default() };
        assert!(matches!(cross_validate(&d, &names, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn confusion_rows_sum_to_class_counts() {
        let d = data(10, 6);
        let names: Vec<String> = (0..3).map(|c| c.to_string()).collect();
        let cfg = CvConfig { k: 5, repeats: 2, c_grid: vec![1.0], ..Default::default() };
        let r = cross_validate(&d, &names, &cfg).unwrap();
        for c in 0..3 {
            let want = 2 * d.iter().filter(|e| e.label == c).count();
            assert_eq!(r.confusion[c].iter().sum::<usize>(), want);
        }
        assert!(r.mean > 0.99);
    }
}
