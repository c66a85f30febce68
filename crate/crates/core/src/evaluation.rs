//! Subject-independent k-fold and leave-one-database-out protocols,
//! confusion matrices and fold-aggregated reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{Dataset, SequenceSample};
use crate::error::{Error, Result};
use crate::training::{derived_rng, evaluate, MetricsLog, Trainer};

const STREAM_FOLDS: u64 = 3;
const STREAM_FOLD_INIT: u64 = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Fold {
    pub train_subjects: BTreeSet<String>,
    pub test_subjects: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// `(train, test)` sample indices of fold `i`.
    pub fn split(&self, i: usize, samples: &[SequenceSample]) -> (Vec<usize>, Vec<usize>) {
        let test = &self.folds[i].test_subjects;
        (0..samples.len()).partition(|&j| !test.contains(&samples[j].subject_id))
    }
}

/// Shuffles the distinct subjects and deals them round-robin into `k`
/// test groups. Every other subject trains.
pub fn make_subject_folds(samples: &[SequenceSample], k: usize, seed: u64) -> Result<FoldPlan> {
    let subjects: BTreeSet<&str> = samples.iter().map(|s| s.subject_id.as_str()).collect();
    make_subject_folds_from(subjects, k, seed)
}

pub fn make_subject_folds_from<'a>(
    subjects: impl IntoIterator<Item = &'a str>,
    k: usize,
    seed: u64,
) -> Result<FoldPlan> {
    let set: BTreeSet<&str> = subjects.into_iter().collect();
    if k < 2 {
        return Err(Error::contract(format!("need at least 2 folds, got {k}")));
    }
    if set.len() < k {
        return Err(Error::contract(format!("{} distinct subjects cannot fill {k} folds", set.len())));
    }
    let mut order: Vec<&str> = set.iter().copied().collect();
    order.shuffle(&mut derived_rng(&[seed, STREAM_FOLDS]));
    let mut groups = vec![BTreeSet::new(); k];
    for (i, s) in order.into_iter().enumerate() {
        groups[i % k].insert(s.to_string());
    }
    let all: BTreeSet<String> = set.iter().map(|s| s.to_string()).collect();
    let folds = groups
        .into_iter()
        .map(|test_subjects| Fold {
            train_subjects: all.difference(&test_subjects).cloned().collect(),
            test_subjects,
        })
        .collect();
    Ok(FoldPlan { folds })
}

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn new(truths: &[usize], predictions: &[usize], k: usize) -> Result<Self> {
        let mut m = Self::zeros(k);
        m.add(truths, predictions)?;
        Ok(m)
    }

    pub fn add(&mut self, truths: &[usize], predictions: &[usize]) -> Result<()> {
        let k = self.k();
        if truths.len() != predictions.len() {
            return Err(Error::contract(format!(
                "{} truths but {} predictions",
                truths.len(),
                predictions.len()
            )));
        }
        if let Some(bad) = truths.iter().chain(predictions).find(|&&l| l >= k) {
            return Err(Error::contract(format!("label {bad} out of range for {k} classes")));
        }
        for (&t, &p) in truths.iter().zip(predictions) {
            self.counts[t][p] += 1;
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Row-normalised percentages; rows without support are all zero.
    pub fn percentages(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n: usize = row.iter().sum();
                row.iter()
                    .map(|&c| if n == 0 { 0.0 } else { 100.0 * c as f64 / n as f64 })
                    .collect()
            })
            .collect()
    }

    pub fn zero_support_rows(&self) -> Vec<usize> {
        (0..self.k()).filter(|&i| self.counts[i].iter().all(|&c| c == 0)).collect()
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FoldResult {
    pub train_samples: usize,
    pub test_samples: usize,
    pub test_subjects: Vec<String>,
    pub accuracy: f64,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub protocol: String,
    pub class_names: Vec<String>,
    pub folds: Vec<FoldResult>,
    pub mean_accuracy: f64,
    /// Population standard deviation over folds.
    pub std_accuracy: f64,
    pub confusion: ConfusionMatrix,
    pub excluded_classes: Vec<String>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn new(
        protocol: String,
        class_names: Vec<String>,
        folds: Vec<FoldResult>,
        confusion: ConfusionMatrix,
        excluded_classes: Vec<String>,
        notes: Vec<String>,
    ) -> Self {
        let accs: Vec<f64> = folds.iter().map(|f| f.accuracy).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&accs);
        EvalReport {
            protocol,
            class_names,
            folds,
            mean_accuracy,
            std_accuracy,
            confusion,
            excluded_classes,
            notes,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "protocol: {}", self.protocol);
        if !self.excluded_classes.is_empty() {
            let _ = writeln!(s, "excluded classes: {}", self.excluded_classes.join(", "));
        }
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        for (i, f) in self.folds.iter().enumerate() {
            let _ = writeln!(
                s,
                "fold {i}: accuracy {:.2}% ({} test / {} train samples, {} epochs)",
                100.0 * f.accuracy,
                f.test_samples,
                f.train_samples,
                f.epochs
            );
        }
        let _ = writeln!(
            s,
            "accuracy: {:.2}±{:.2}%",
            100.0 * self.mean_accuracy,
            100.0 * self.std_accuracy
        );
        let width = self.class_names.iter().map(String::len).max().unwrap_or(4).max(12);
        let _ = write!(s, "\nconfusion (% of row, count)\n{:>width$}", "true");
        for name in &self.class_names {
            let _ = write!(s, " {name:>width$}");
        }
        s.push('\n');
        let pct = self.confusion.percentages();
        let empty = self.confusion.zero_support_rows();
        for (i, name) in self.class_names.iter().enumerate() {
            let _ = write!(s, "{name:>width$}");
            for (j, p) in pct[i].iter().enumerate() {
                let cell = format!("{p:.1} ({})", self.confusion.counts[i][j]);
                let _ = write!(s, " {cell:>width$}");
            }
            if empty.contains(&i) {
                s.push_str("  [no samples]");
            }
            s.push('\n');
        }
        s
    }

    pub fn folds_csv(&self) -> String {
        let mut s = String::from("fold,train_samples,test_samples,epochs,accuracy\n");
        for (i, f) in self.folds.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{},{},{}", f.train_samples, f.test_samples, f.epochs, f.accuracy);
        }
        s
    }

    pub fn confusion_csv(&self) -> String {
        let mut s = String::from("true,predicted,count,row_percent\n");
        let pct = self.confusion.percentages();
        for (i, ti) in self.class_names.iter().enumerate() {
            for (j, pj) in self.class_names.iter().enumerate() {
                let _ = writeln!(s, "{ti},{pj},{},{}", self.confusion.counts[i][j], pct[i][j]);
            }
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `report.txt`, `report.json`, `folds.csv` and `confusion.csv`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("report.txt", self.to_text()),
            ("report.json", self.to_json()),
            ("folds.csv", self.folds_csv()),
            ("confusion.csv", self.confusion_csv()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolOptions {
    pub k: usize,
    pub seed: u64,
    /// Evaluate only the first `n` folds of the plan.
    pub max_folds: Option<usize>,
    /// Train folds concurrently. Results do not depend on this.
    pub parallel_folds: bool,
    /// Directory for per-fold metrics CSVs.
    pub log_dir: Option<PathBuf>,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions {
            k: 5,
            seed: 0,
            max_folds: None,
            parallel_folds: false,
            log_dir: None,
        }
    }
}

fn class_names(labels: &BTreeMap<String, usize>, k: usize) -> Vec<String> {
    (0..k)
        .map(|id| {
            labels
                .iter()
                .find(|(_, &v)| v == id)
                .map_or_else(|| format!("class{id}"), |(n, _)| n.clone())
        })
        .collect()
}

fn check_labels(samples: &[SequenceSample], config: &RunConfig) -> Result<()> {
    let k = config.model.num_classes;
    match samples.iter().find(|s| s.label >= k) {
        Some(s) => Err(Error::Data(format!(
            "sample of subject {} has label {} but the model has {k} classes",
            s.subject_id, s.label
        ))),
        None => Ok(()),
    }
}

fn train_and_test(
    config: &RunConfig,
    seed: u64,
    train: &[SequenceSample],
    test: &[SequenceSample],
    log: Option<PathBuf>,
) -> Result<(f64, Vec<usize>, usize)> {
    let mut trainer = Trainer::<f32>::new(config.clone(), seed)?;
    let log = log.map(|p| MetricsLog::create(&p)).transpose()?;
    trainer.fit(train, None, log.as_ref())?;
    let e = evaluate(trainer.network(), &trainer.params, test)?;
    Ok((e.accuracy, e.predictions, trainer.epoch()))
}

/// Trains a fresh model per fold and tests it on that fold's held-out
/// subjects. The confusion matrix pools all folds.
pub fn run_subject_independent(dataset: &Dataset, config: &RunConfig, opts: &ProtocolOptions) -> Result<EvalReport> {
    let samples = &dataset.samples;
    check_labels(samples, config)?;
    let plan = make_subject_folds(samples, opts.k, opts.seed)?;
    let n = opts.max_folds.unwrap_or(plan.k()).min(plan.k());
    if n == 0 {
        return Err(Error::contract("max_folds must be at least 1"));
    }
    if let Some(d) = &opts.log_dir {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let run = |i: usize| -> Result<(FoldResult, Vec<usize>, Vec<usize>)> {
        let (tr, te) = plan.split(i, samples);
        let train: Vec<SequenceSample> = tr.iter().map(|&j| samples[j].clone()).collect();
        let test: Vec<SequenceSample> = te.iter().map(|&j| samples[j].clone()).collect();
        if train.is_empty() || test.is_empty() {
            return Err(Error::Data(format!("fold {i} has an empty train or test split")));
        }
        let seed = derived_rng_seed(opts.seed, i);
        let log = opts.log_dir.as_ref().map(|d| d.join(format!("metrics_fold{i}.csv")));
        let (accuracy, preds, epochs) = train_and_test(config, seed, &train, &test, log)?;
        let truths = test.iter().map(|s| s.label).collect();
        Ok((
            FoldResult {
                train_samples: train.len(),
                test_samples: test.len(),
                test_subjects: plan.folds[i].test_subjects.iter().cloned().collect(),
                accuracy,
                epochs,
            },
            truths,
            preds,
        ))
    };
    let results: Vec<_> = if opts.parallel_folds {
        (0..n).into_par_iter().map(run).collect::<Result<_>>()?
    } else {
        (0..n).map(run).collect::<Result<_>>()?
    };

    let k = config.model.num_classes;
    let mut confusion = ConfusionMatrix::zeros(k);
    let mut folds = Vec::with_capacity(n);
    for (f, t, p) in results {
        confusion.add(&t, &p)?;
        folds.push(f);
    }
    let mut notes = Vec::new();
    if n < plan.k() {
        notes.push(format!("evaluated {n} of {} folds", plan.k()));
    }
    Ok(EvalReport::new(
        format!("subject-independent {}-fold", plan.k()),
        class_names(&dataset.labels, k),
        folds,
        confusion,
        Vec::new(),
        notes,
    ))
}

fn derived_rng_seed(seed: u64, fold: usize) -> u64 {
    use rand::Rng;
    derived_rng(&[seed, STREAM_FOLD_INIT, fold as u64]).random()
}

/// Samples relabelled into a shared class space.
#[derive(Clone, Debug)]
pub struct CrossDatabaseSplit {
    pub class_names: Vec<String>,
    pub train: Vec<SequenceSample>,
    pub test: Vec<SequenceSample>,
    /// Test classes missing from training, dropped from the test set.
    pub excluded_classes: Vec<String>,
}

/// Pools every dataset, holds out samples of `test_database` and maps labels
/// by class name onto the classes seen in training.
pub fn cross_database_split(datasets: &[Dataset], test_database: &str) -> Result<CrossDatabaseSplit> {
    let named = |d: &Dataset, s: &SequenceSample| -> Result<String> {
        d.class_name(s.label)
            .map(str::to_string)
            .ok_or_else(|| Error::Data(format!("label id {} missing from its label map", s.label)))
    };
    let mut databases = BTreeSet::new();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for d in datasets {
        for s in &d.samples {
            databases.insert(s.database_id.clone());
            let entry = (named(d, s)?, s);
            if s.database_id == test_database {
                test.push(entry);
            } else {
                train.push(entry);
            }
        }
    }
    if databases.len() < 2 {
        return Err(Error::contract(format!(
            "cross-database evaluation needs at least two databases, found {databases:?}"
        )));
    }
    if test.is_empty() {
        return Err(Error::contract(format!("no samples from test database {test_database:?}")));
    }
    let class_names: Vec<String> = train
        .iter()
        .map(|(n, _)| n.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let id: BTreeMap<&str, usize> = class_names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let test_classes: BTreeSet<&str> = test.iter().map(|(n, _)| n.as_str()).collect();
    if !test_classes.iter().any(|c| id.contains_key(c)) {
        return Err(Error::contract("test database shares no class with the training databases"));
    }
    let excluded_classes = test_classes
        .iter()
        .filter(|c| !id.contains_key(*c))
        .map(|c| c.to_string())
        .collect();
    let relabel = |(n, s): &(String, &SequenceSample)| {
        id.get(n.as_str()).map(|&label| SequenceSample {
            label,
            ..(*s).clone()
        })
    };
    Ok(CrossDatabaseSplit {
        train: train.iter().filter_map(relabel).collect(),
        test: test.iter().filter_map(relabel).collect(),
        class_names,
        excluded_classes,
    })
}

/// Trains once on every database except `test_database`, then tests on it.
/// `config.model.num_classes` is replaced by the size of the shared class
/// space.
pub fn run_cross_database(
    datasets: &[Dataset],
    test_database: &str,
    config: &RunConfig,
    seed: u64,
    log: Option<&Path>,
) -> Result<EvalReport> {
    let split = cross_database_split(datasets, test_database)?;
    let k = split.class_names.len();
    let mut notes = Vec::new();
    let mut config = config.clone();
    if config.model.num_classes != k {
        notes.push(format!(
            "model class count set to {k} (was {})",
            config.model.num_classes
        ));
        config.model.num_classes = k;
    }
    if !split.excluded_classes.is_empty() {
        notes.push(format!(
            "test-only classes excluded from testing: {}",
            split.excluded_classes.join(", ")
        ));
    }
    let (accuracy, preds, epochs) = train_and_test(&config, seed, &split.train, &split.test, log.map(Path::to_path_buf))?;
    let truths: Vec<usize> = split.test.iter().map(|s| s.label).collect();
    let confusion = ConfusionMatrix::new(&truths, &preds, k)?;
    Ok(EvalReport::new(
        format!("cross-database, test on {test_database}"),
        split.class_names,
        vec![FoldResult {
            train_samples: split.train.len(),
            test_samples: split.test.len(),
            test_subjects: split
                .test
                .iter()
                .map(|s| s.subject_id.clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect(),
            accuracy,
            epochs,
        }],
        confusion,
        split.excluded_classes,
        notes,
    ))
}
