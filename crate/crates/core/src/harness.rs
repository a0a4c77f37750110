//! Evaluation protocol: splits, subsampling, repeats, the ICS sweep with
//! validation-based selection, and aggregation into summary tables.
//!
//! For a dataset of N points a stratified test set of `min(N/2, 500)` points
//! is drawn once and reused by every repeat and every `n_real`. Each repeat
//! draws a stratified `n_real` subsample from the remaining pool and splits it
//! 80/20 into train and validation. Every classifier is then scored twice:
//! on raw features (`real`) and on ICS-augmented embeddings (`tabmda`), where
//! the ICS cell is picked by validation balanced accuracy.
//!
//! All randomness is derived from the base seed, the dataset name, `n_real`,
//! the repeat index and the cell, so results do not depend on scheduling.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmentation::{
    build_augmented_trainset, embed_eval_points, splitmix64, stratified_subsample, AugmentError, AugmentedDataset,
    ContextFraction, IcsParams,
};
use crate::classifiers::{balanced_accuracy, fit, ClassifierError, ClassifierKind, FitModel, Hyperparams};
use crate::data_io::Dataset;
use crate::encoder::{Encoder, EncoderError};
use crate::numerics::{Matrix, NumericsError, Standardizer};

pub const MAX_TEST_SIZE: usize = 500;
pub const TRAIN_SHARE: f64 = 0.8;
pub const AVERAGE_ROW_LABEL: &str = "Average accuracy";
pub const RESULTS_HEADER: &str = "dataset,n_real,repeat,classifier,mode,fraction,k,val_bacc,test_bacc";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot stratify: {0}")]
    StratifyError(String),
    #[error("n_real = {n_real} is below two samples per class ({classes} classes)")]
    TooFewSamples { n_real: usize, classes: usize },
    #[error("no results for {0}")]
    MissingCell(String),
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub n_real_grid: Vec<usize>,
    pub repeats: usize,
    pub ics_fraction_grid: Vec<f64>,
    pub ics_k_grid: Vec<usize>,
    pub trivial_augment: bool,
    pub classifiers: Vec<ClassifierKind>,
    pub base_seed: u64,
    pub hyperparams: Hyperparams,
    /// Standardize raw features with train statistics for knn and logreg.
    pub standardize_real: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_real_grid: vec![20, 50, 100, 200, 500],
            repeats: 10,
            ics_fraction_grid: vec![0.5, 0.7, 0.9, 1.0],
            ics_k_grid: vec![5, 20, 50],
            trivial_augment: false,
            classifiers: ClassifierKind::ALL.to_vec(),
            base_seed: 0,
            hyperparams: Hyperparams::default(),
            standardize_real: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.into()));
        if self.repeats == 0 {
            return bad("repeats must be >= 1");
        }
        if self.n_real_grid.is_empty() || self.ics_fraction_grid.is_empty() || self.ics_k_grid.is_empty() {
            return bad("grids must be nonempty");
        }
        if self.classifiers.is_empty() {
            return bad("at least one classifier is required");
        }
        if self.ics_fraction_grid.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("context fractions must lie in (0, 1]");
        }
        if self.ics_k_grid.contains(&0) {
            return bad("K must be >= 1");
        }
        self.hyperparams.validate()?;
        Ok(())
    }

    /// Cells of the tabmda sweep: fractions x K in grid order, plus one
    /// trivial-augment cell at the largest K when enabled.
    pub fn sweep_cells(&self) -> Vec<Cell> {
        let mut cells: Vec<Cell> = self
            .ics_fraction_grid
            .iter()
            .flat_map(|&f| {
                self.ics_k_grid.iter().map(move |&k| Cell {
                    fraction: ContextFraction::Fixed(f),
                    k,
                })
            })
            .collect();
        if self.trivial_augment {
            cells.push(Cell {
                fraction: ContextFraction::TrivialAugment,
                k: self.max_k(),
            });
        }
        cells
    }

    fn max_k(&self) -> usize {
        self.ics_k_grid.iter().copied().max().unwrap_or(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Real,
    Tabmda,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Real => "real",
            Mode::Tabmda => "tabmda",
        })
    }
}

/// One ICS setting: a context fraction and a number of contexts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub fraction: ContextFraction,
    pub k: usize,
}

impl Cell {
    pub fn fraction_label(&self) -> String {
        match self.fraction {
            ContextFraction::Fixed(f) => format!("{f:?}"),
            ContextFraction::TrivialAugment => "ta".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Scored { val_bacc: f64, test_bacc: f64 },
    Skipped { reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub dataset: String,
    pub n_real: usize,
    pub repeat: usize,
    pub classifier: ClassifierKind,
    pub mode: Mode,
    /// Chosen ICS setting; `None` in real mode and for skipped runs.
    pub cell: Option<Cell>,
    /// Number of ICS cells scored on validation (0 in real mode).
    pub cells_evaluated: usize,
    pub outcome: Outcome,
}

impl RunResult {
    pub fn test_bacc(&self) -> Option<f64> {
        match self.outcome {
            Outcome::Scored { test_bacc, .. } => Some(test_bacc),
            Outcome::Skipped { .. } => None,
        }
    }
}

/// Seed derived from a base seed and a sequence of tags.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(base), |s, &p| splitmix64(s ^ p))
}

/// FNV-1a hash of a dataset name, used as a seed tag.
pub fn name_tag(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

fn stratify(labels: &[usize], n: usize, seed: u64) -> Result<Vec<usize>, HarnessError> {
    stratified_subsample(labels, n, seed).map_err(|e| HarnessError::StratifyError(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub test: Vec<usize>,
    pub pool: Vec<usize>,
}

/// Stratified test split of `min(floor(N/2), 500)` points; the rest is the
/// training pool. Both index lists are sorted.
pub fn make_splits(labels: &[usize], seed: u64) -> Result<Splits, HarnessError> {
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        counts[y] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return Err(HarnessError::StratifyError(format!(
            "class {c} has {} member(s); at least 2 are needed",
            counts[c]
        )));
    }
    let n_test = (labels.len() / 2).min(MAX_TEST_SIZE);
    let test = stratify(labels, n_test, seed)?;
    let mut in_test = vec![false; labels.len()];
    test.iter().for_each(|&i| in_test[i] = true);
    let pool = (0..labels.len()).filter(|&i| !in_test[i]).collect();
    Ok(Splits { test, pool })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Stratified `n_real` subsample of `pool` (indices into `labels`), split
/// 80/20 into train and validation. A pool smaller than `n_real` is used
/// whole.
pub fn make_run(labels: &[usize], pool: &[usize], n_real: usize, seed: u64) -> Result<RunSplit, HarnessError> {
    let pool_labels: Vec<usize> = pool.iter().map(|&i| labels[i]).collect();
    let classes = crate::augmentation::n_present_classes(&pool_labels);
    if n_real < 2 * classes {
        return Err(HarnessError::TooFewSamples { n_real, classes });
    }
    let n = n_real.min(pool.len());
    let sub: Vec<usize> = stratify(&pool_labels, n, splitmix64(seed ^ 1))?
        .into_iter()
        .map(|j| pool[j])
        .collect();
    let sub_labels: Vec<usize> = sub.iter().map(|&i| labels[i]).collect();
    let n_train = (TRAIN_SHARE * n as f64).round() as usize;
    let chosen = stratify(&sub_labels, n_train, splitmix64(seed ^ 2))?;
    let mut is_train = vec![false; n];
    chosen.iter().for_each(|&j| is_train[j] = true);
    let (train, val) = (0..n).partition::<Vec<usize>, _>(|&j| is_train[j]);
    Ok(RunSplit {
        train: train.into_iter().map(|j| sub[j]).collect(),
        val: val.into_iter().map(|j| sub[j]).collect(),
    })
}

/// Seed of one (dataset, n_real, repeat) run.
pub fn run_seed(base_seed: u64, dataset: &str, n_real: usize, repeat: usize) -> u64 {
    derive_seed(base_seed, &[name_tag(dataset), n_real as u64, repeat as u64])
}

fn splits_seed(base_seed: u64, dataset: &str) -> u64 {
    derive_seed(base_seed, &[name_tag(dataset), u64::MAX])
}

fn classifier_seed(run: u64, kind: ClassifierKind, cell: u64) -> u64 {
    derive_seed(run, &[2, kind as u64, cell])
}

fn group_tag(fraction: ContextFraction) -> u64 {
    match fraction {
        ContextFraction::Fixed(f) => f.to_bits(),
        ContextFraction::TrivialAugment => u64::MAX,
    }
}

/// Index of the best cell by validation score. Ties go to the larger
/// fraction, then the smaller K, then a fixed fraction over trivial-augment.
pub fn select_cell(cells: &[Cell], scores: &[f64]) -> usize {
    assert!(!cells.is_empty() && cells.len() == scores.len());
    let better = |a: usize, b: usize| -> bool {
        if scores[a] != scores[b] {
            return scores[a] > scores[b];
        }
        match (cells[a].fraction, cells[b].fraction) {
            (ContextFraction::Fixed(x), ContextFraction::Fixed(y)) if x != y => return x > y,
            (ContextFraction::Fixed(_), ContextFraction::TrivialAugment) => return true,
            (ContextFraction::TrivialAugment, ContextFraction::Fixed(_)) => return false,
            _ => {}
        }
        cells[a].k < cells[b].k
    };
    (1..cells.len()).fold(0, |best, i| if better(i, best) { i } else { best })
}

/// Augmented training sets for a list of cells, plus full-context
/// embeddings of the validation and test points.
///
/// Cells that share a fraction share one augmented set built with the
/// largest K among them; smaller K take its prefix.
pub struct TabmdaSweep {
    pub cells: Vec<Cell>,
    groups: Vec<(ContextFraction, AugmentedDataset)>,
    cell_group: Vec<usize>,
    val_x: Matrix,
    val_y: Vec<usize>,
    test_x: Matrix,
    test_y: Vec<usize>,
    n_classes: usize,
}

impl TabmdaSweep {
    pub fn prepare<E: Encoder + ?Sized>(
        encoder: &E,
        cells: Vec<Cell>,
        train: &Dataset,
        val: &Dataset,
        test: &Dataset,
        seed: u64,
    ) -> Result<Self, HarnessError> {
        let mut groups: Vec<(ContextFraction, usize)> = Vec::new();
        let mut cell_group = Vec::with_capacity(cells.len());
        for c in &cells {
            match groups.iter().position(|(f, _)| *f == c.fraction) {
                Some(g) => {
                    groups[g].1 = groups[g].1.max(c.k);
                    cell_group.push(g);
                }
                None => {
                    cell_group.push(groups.len());
                    groups.push((c.fraction, c.k));
                }
            }
        }
        let groups = groups
            .into_iter()
            .map(|(fraction, k)| {
                let params = IcsParams::new(k, fraction, derive_seed(seed, &[1, group_tag(fraction)]))?;
                Ok((fraction, build_augmented_trainset(encoder, &params, train)?))
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        Ok(Self {
            cells,
            groups,
            cell_group,
            val_x: embed_eval_points(encoder, train, &val.features)?,
            val_y: val.labels.clone(),
            test_x: embed_eval_points(encoder, train, &test.features)?,
            test_y: test.labels.clone(),
            n_classes: train.n_classes(),
        })
    }

    /// The augmented training set of cell `i`.
    pub fn training_set(&self, i: usize) -> AugmentedDataset {
        let set = &self.groups[self.cell_group[i]].1;
        if set.k_contexts == self.cells[i].k {
            set.clone()
        } else {
            set.truncate_contexts(self.cells[i].k)
        }
    }

    pub fn fit_cell(&self, i: usize, kind: ClassifierKind, hp: &Hyperparams, seed: u64) -> Result<FitModel, HarnessError> {
        let set = self.training_set(i);
        Ok(fit(kind, &set.embeddings, &set.labels, self.n_classes, hp, classifier_seed(seed, kind, i as u64))?)
    }

    /// Validation balanced accuracy of every cell, in cell order.
    pub fn val_scores(&self, kind: ClassifierKind, hp: &Hyperparams, seed: u64) -> Result<Vec<f64>, HarnessError> {
        (0..self.cells.len())
            .into_par_iter()
            .map(|i| {
                let m = self.fit_cell(i, kind, hp, seed)?;
                Ok(balanced_accuracy(&self.val_y, &m.predict(&self.val_x)?)?)
            })
            .collect()
    }

    pub fn test_score(&self, model: &FitModel) -> Result<f64, HarnessError> {
        Ok(balanced_accuracy(&self.test_y, &model.predict(&self.test_x)?)?)
    }

    /// Picks the best of `subset` (cell indices) on validation, refits it and
    /// scores the test set. Returns `(cell index, val, test)`.
    pub fn select_and_test(
        &self,
        subset: &[usize],
        scores: &[f64],
        kind: ClassifierKind,
        hp: &Hyperparams,
        seed: u64,
    ) -> Result<(usize, f64, f64), HarnessError> {
        let cells: Vec<Cell> = subset.iter().map(|&i| self.cells[i]).collect();
        let sub_scores: Vec<f64> = subset.iter().map(|&i| scores[i]).collect();
        let best = subset[select_cell(&cells, &sub_scores)];
        let model = self.fit_cell(best, kind, hp, seed)?;
        Ok((best, scores[best], self.test_score(&model)?))
    }
}

/// Sweeps every cell for one classifier and returns the chosen cell with its
/// validation score.
pub fn sweep_and_select<E: Encoder + ?Sized>(
    encoder: &E,
    cells: Vec<Cell>,
    train: &Dataset,
    val: &Dataset,
    kind: ClassifierKind,
    hp: &Hyperparams,
    seed: u64,
) -> Result<(Cell, f64), HarnessError> {
    let empty = train.subset(&[]);
    let sweep = TabmdaSweep::prepare(encoder, cells, train, val, &empty, seed)?;
    let scores = sweep.val_scores(kind, hp, seed)?;
    let best = select_cell(&sweep.cells, &scores);
    Ok((sweep.cells[best], scores[best]))
}

fn is_class_limit(e: &HarnessError) -> Option<String> {
    match e {
        HarnessError::Augment(AugmentError::Encoder(err @ EncoderError::TooManyClasses { .. })) => Some(err.to_string()),
        _ => None,
    }
}

/// Train, validation and test data of one run.
pub struct RunData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub seed: u64,
}

impl RunData {
    pub fn new(dataset: &Dataset, splits: &Splits, run: &RunSplit, seed: u64) -> Self {
        Self {
            train: dataset.subset(&run.train),
            val: dataset.subset(&run.val),
            test: dataset.subset(&splits.test),
            seed,
        }
    }
}

/// Fits `kind` on raw features and returns `(val, test)` balanced accuracy.
pub fn score_real(cfg: &ExperimentConfig, data: &RunData, kind: ClassifierKind) -> Result<(f64, f64), HarnessError> {
    let (mut tr, mut va, mut te) = (
        data.train.features.clone(),
        data.val.features.clone(),
        data.test.features.clone(),
    );
    if cfg.standardize_real && kind.scale_sensitive() {
        let s = Standardizer::fit(&tr)?;
        tr = s.apply(&tr)?;
        va = s.apply(&va)?;
        te = s.apply(&te)?;
    }
    let model = fit(
        kind,
        &tr,
        &data.train.labels,
        data.train.n_classes(),
        &cfg.hyperparams,
        classifier_seed(data.seed, kind, u64::MAX),
    )?;
    Ok((
        balanced_accuracy(&data.val.labels, &model.predict(&va)?)?,
        balanced_accuracy(&data.test.labels, &model.predict(&te)?)?,
    ))
}

/// Both modes for every configured classifier on one run.
pub fn run_cell<E: Encoder + ?Sized>(
    cfg: &ExperimentConfig,
    encoder: &E,
    dataset_name: &str,
    data: &RunData,
    n_real: usize,
    repeat: usize,
) -> Result<Vec<RunResult>, HarnessError> {
    let result = |classifier, mode, cell, cells_evaluated, outcome| RunResult {
        dataset: dataset_name.to_owned(),
        n_real,
        repeat,
        classifier,
        mode,
        cell,
        cells_evaluated,
        outcome,
    };
    let cells = cfg.sweep_cells();
    let sweep = match TabmdaSweep::prepare(encoder, cells, &data.train, &data.val, &data.test, data.seed) {
        Ok(s) => Ok(s),
        Err(e) => match is_class_limit(&e) {
            Some(reason) => Err(reason),
            None => return Err(e),
        },
    };
    let per_kind: Vec<Vec<RunResult>> = cfg
        .classifiers
        .par_iter()
        .map(|&kind| {
            let (val_bacc, test_bacc) = score_real(cfg, data, kind)?;
            let real = result(kind, Mode::Real, None, 0, Outcome::Scored { val_bacc, test_bacc });
            let tabmda = match &sweep {
                Ok(sweep) => {
                    let scores = sweep.val_scores(kind, &cfg.hyperparams, data.seed)?;
                    let all: Vec<usize> = (0..sweep.cells.len()).collect();
                    let (best, val_bacc, test_bacc) =
                        sweep.select_and_test(&all, &scores, kind, &cfg.hyperparams, data.seed)?;
                    result(
                        kind,
                        Mode::Tabmda,
                        Some(sweep.cells[best]),
                        scores.len(),
                        Outcome::Scored { val_bacc, test_bacc },
                    )
                }
                Err(reason) => result(kind, Mode::Tabmda, None, 0, Outcome::Skipped { reason: reason.clone() }),
            };
            Ok(vec![real, tabmda])
        })
        .collect::<Result<_, HarnessError>>()?;
    Ok(per_kind.into_iter().flatten().collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunIndices {
    pub n_real: usize,
    pub repeat: usize,
    pub split: RunSplit,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub results: Vec<RunResult>,
    pub test_indices: Vec<usize>,
    pub runs: Vec<RunIndices>,
}

fn assert_disjoint(test: &[usize], run: &RunSplit, n: usize) {
    let mut owner = vec![0u8; n];
    for (tag, set) in [(1u8, test), (2, &run.train), (3, &run.val)] {
        for &i in set {
            assert_eq!(owner[i], 0, "index {i} appears in two of test/train/val");
            owner[i] = tag;
        }
    }
}

/// The test split and training pool of `dataset` under `base_seed`.
pub fn dataset_splits(dataset: &Dataset, base_seed: u64) -> Result<Splits, HarnessError> {
    make_splits(&dataset.labels, splits_seed(base_seed, &dataset.source_id))
}

/// Plans every (n_real, repeat) run of `dataset`.
pub fn plan_runs(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<(Splits, Vec<RunIndices>), HarnessError> {
    cfg.validate()?;
    let name = dataset.source_id.as_str();
    let splits = dataset_splits(dataset, cfg.base_seed)?;
    let mut runs = Vec::new();
    for &n_real in &cfg.n_real_grid {
        for repeat in 0..cfg.repeats {
            let seed = run_seed(cfg.base_seed, name, n_real, repeat);
            let split = make_run(&dataset.labels, &splits.pool, n_real, seed)?;
            assert_disjoint(&splits.test, &split, dataset.n_samples());
            runs.push(RunIndices { n_real, repeat, split });
        }
    }
    Ok((splits, runs))
}

/// Runs the full protocol on one dataset. Results are in canonical order:
/// n_real, repeat, classifier, mode.
pub fn evaluate<E: Encoder + ?Sized>(
    cfg: &ExperimentConfig,
    encoder: &E,
    dataset: &Dataset,
) -> Result<Evaluation, HarnessError> {
    let (splits, runs) = plan_runs(cfg, dataset)?;
    let name = dataset.source_id.as_str();
    let per_run: Vec<Vec<RunResult>> = runs
        .par_iter()
        .map(|r| {
            let seed = run_seed(cfg.base_seed, name, r.n_real, r.repeat);
            let data = RunData::new(dataset, &splits, &r.split, seed);
            run_cell(cfg, encoder, name, &data, r.n_real, r.repeat)
        })
        .collect::<Result<_, _>>()?;
    let mut results: Vec<RunResult> = per_run.into_iter().flatten().collect();
    sort_canonical(&mut results);
    Ok(Evaluation {
        results,
        test_indices: splits.test,
        runs,
    })
}

pub fn sort_canonical(results: &mut [RunResult]) {
    results.sort_by(|a, b| {
        (&a.dataset, a.n_real, a.repeat, a.classifier, a.mode).cmp(&(&b.dataset, b.n_real, b.repeat, b.classifier, b.mode))
    });
}

/// Writes the results CSV. Accuracies use 6 decimals; skipped runs show `NA`.
pub fn write_results_csv<W: Write>(mut w: W, results: &[RunResult]) -> std::io::Result<()> {
    writeln!(w, "{RESULTS_HEADER}")?;
    for r in results {
        let (fraction, k) = match &r.cell {
            Some(c) => (c.fraction_label(), c.k.to_string()),
            None => (String::new(), String::new()),
        };
        let (val, test) = match r.outcome {
            Outcome::Scored { val_bacc, test_bacc } => (format!("{val_bacc:.6}"), format!("{test_bacc:.6}")),
            Outcome::Skipped { .. } => ("NA".into(), "NA".into()),
        };
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.dataset, r.n_real, r.repeat, r.classifier, r.mode, fraction, k, val, test
        )?;
    }
    w.flush()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Some(MeanStd { mean, std, n })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub dataset: String,
    pub n_real: usize,
    /// One entry per column; `None` when every run of the cell was skipped.
    pub cells: Vec<Option<MeanStd>>,
}

/// Mean and sample std of test balanced accuracy per (dataset, n_real) row
/// and (classifier, mode) column, with an average row over all rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryTable {
    pub columns: Vec<(ClassifierKind, Mode)>,
    pub rows: Vec<SummaryRow>,
    pub average: Vec<Option<f64>>,
}

pub fn aggregate_table(results: &[RunResult]) -> Result<SummaryTable, HarnessError> {
    let mut classifiers: Vec<ClassifierKind> = results.iter().map(|r| r.classifier).collect();
    classifiers.sort();
    classifiers.dedup();
    let columns: Vec<(ClassifierKind, Mode)> = classifiers
        .iter()
        .flat_map(|&c| [(c, Mode::Real), (c, Mode::Tabmda)])
        .collect();
    let mut keys: Vec<(String, usize)> = Vec::new();
    for r in results {
        if !keys.iter().any(|(d, n)| *d == r.dataset && *n == r.n_real) {
            keys.push((r.dataset.clone(), r.n_real));
        }
    }
    let mut rows = Vec::with_capacity(keys.len());
    for (dataset, n_real) in keys {
        let mut cells = Vec::with_capacity(columns.len());
        for &(kind, mode) in &columns {
            let matching: Vec<&RunResult> = results
                .iter()
                .filter(|r| r.dataset == dataset && r.n_real == n_real && r.classifier == kind && r.mode == mode)
                .collect();
            if matching.is_empty() {
                return Err(HarnessError::MissingCell(format!("{dataset} n_real={n_real} {kind} {mode}")));
            }
            let scores: Vec<f64> = matching.iter().filter_map(|r| r.test_bacc()).collect();
            cells.push(mean_std(&scores));
        }
        rows.push(SummaryRow { dataset, n_real, cells });
    }
    let average = (0..columns.len())
        .map(|j| {
            let means: Vec<f64> = rows.iter().filter_map(|r| r.cells[j].map(|c| c.mean)).collect();
            mean_std(&means).map(|m| m.mean)
        })
        .collect();
    Ok(SummaryTable { columns, rows, average })
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

impl SummaryTable {
    /// CSV with `<classifier>_<mode>_mean` / `_std` column pairs, in percent.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = vec!["dataset".to_owned(), "n_real".to_owned()];
        for (k, m) in &self.columns {
            header.push(format!("{k}_{m}_mean"));
            header.push(format!("{k}_{m}_std"));
        }
        writeln!(w, "{}", header.join(","))?;
        for row in &self.rows {
            let mut rec = vec![row.dataset.clone(), row.n_real.to_string()];
            for c in &row.cells {
                match c {
                    Some(ms) => rec.extend([pct(ms.mean), pct(ms.std)]),
                    None => rec.extend(["N/A".to_owned(), "N/A".to_owned()]),
                }
            }
            writeln!(w, "{}", rec.join(","))?;
        }
        let mut footer = vec![AVERAGE_ROW_LABEL.to_owned(), String::new()];
        for a in &self.average {
            footer.push(a.map_or("N/A".into(), pct));
            footer.push(String::new());
        }
        writeln!(w, "{}", footer.join(","))?;
        w.flush()
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Dataset | N_real |");
        for (k, m) in &self.columns {
            s.push_str(&format!(" {k} ({m}) |"));
        }
        s.push_str("\n|---|---|");
        s.push_str(&"---|".repeat(self.columns.len()));
        s.push('\n');
        for row in &self.rows {
            s.push_str(&format!("| {} | {} |", row.dataset, row.n_real));
            for c in &row.cells {
                match c {
                    Some(ms) => s.push_str(&format!(" {} ± {} |", pct(ms.mean), pct(ms.std))),
                    None => s.push_str(" N/A |"),
                }
            }
            s.push('\n');
        }
        s.push_str(&format!("| **{AVERAGE_ROW_LABEL}** | |"));
        for a in &self.average {
            s.push_str(&format!(" {} |", a.map_or("N/A".into(), pct)));
        }
        s.push('\n');
        s
    }
}

/// Context-size ablation: one column per ICS variant, each cell the mean
/// test balanced accuracy over repeats and classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, usize, Vec<Option<f64>>)>,
    pub average: Vec<Option<f64>>,
}

struct AblationColumn {
    label: String,
    cells: Vec<usize>,
}

fn ablation_layout(cfg: &ExperimentConfig) -> (Vec<Cell>, Vec<AblationColumn>) {
    let mut cells = vec![Cell {
        fraction: ContextFraction::Fixed(1.0),
        k: 1,
    }];
    let mut columns = vec![AblationColumn {
        label: "Full context (no ICS)".into(),
        cells: vec![0],
    }];
    for &f in cfg.ics_fraction_grid.iter().filter(|&&f| f < 1.0) {
        let start = cells.len();
        cells.extend(cfg.ics_k_grid.iter().map(|&k| Cell {
            fraction: ContextFraction::Fixed(f),
            k,
        }));
        columns.push(AblationColumn {
            label: format!("N_ctx = {f}"),
            cells: (start..cells.len()).collect(),
        });
    }
    let start = cells.len();
    cells.extend(cfg.ics_k_grid.iter().map(|&k| Cell {
        fraction: ContextFraction::TrivialAugment,
        k,
    }));
    columns.push(AblationColumn {
        label: "N_ctx ~ U[0.5, 0.99]".into(),
        cells: (start..cells.len()).collect(),
    });
    (cells, columns)
}

/// Within each column K is chosen on validation, per classifier and run.
pub fn ablation<E: Encoder + ?Sized>(
    cfg: &ExperimentConfig,
    encoder: &E,
    dataset: &Dataset,
) -> Result<AblationTable, HarnessError> {
    let (splits, runs) = plan_runs(cfg, dataset)?;
    let name = dataset.source_id.as_str();
    let (cells, columns) = ablation_layout(cfg);
    // Per run: Some(test scores per column, one entry per classifier) or None when skipped.
    let per_run: Vec<Option<Vec<Vec<f64>>>> = runs
        .par_iter()
        .map(|r| {
            let seed = run_seed(cfg.base_seed, name, r.n_real, r.repeat);
            let data = RunData::new(dataset, &splits, &r.split, seed);
            let sweep = match TabmdaSweep::prepare(encoder, cells.clone(), &data.train, &data.val, &data.test, seed) {
                Ok(s) => s,
                Err(e) if is_class_limit(&e).is_some() => return Ok(None),
                Err(e) => return Err(e),
            };
            let mut by_column = vec![Vec::new(); columns.len()];
            for &kind in &cfg.classifiers {
                let scores = sweep.val_scores(kind, &cfg.hyperparams, seed)?;
                for (j, col) in columns.iter().enumerate() {
                    let (_, _, test) = sweep.select_and_test(&col.cells, &scores, kind, &cfg.hyperparams, seed)?;
                    by_column[j].push(test);
                }
            }
            Ok(Some(by_column))
        })
        .collect::<Result<_, HarnessError>>()?;

    let mut rows = Vec::new();
    for &n_real in &cfg.n_real_grid {
        let mut acc = vec![Vec::new(); columns.len()];
        let mut skipped = false;
        for (r, out) in runs.iter().zip(&per_run) {
            if r.n_real != n_real {
                continue;
            }
            match out {
                Some(by_column) => {
                    for (a, v) in acc.iter_mut().zip(by_column) {
                        a.extend_from_slice(v);
                    }
                }
                None => skipped = true,
            }
        }
        let values: Vec<Option<f64>> = acc
            .iter()
            .map(|v| if skipped { None } else { mean_std(v).map(|m| m.mean) })
            .collect();
        rows.push((name.to_owned(), n_real, values));
    }
    let average = (0..columns.len())
        .map(|j| {
            let v: Vec<f64> = rows.iter().filter_map(|r| r.2[j]).collect();
            mean_std(&v).map(|m| m.mean)
        })
        .collect();
    Ok(AblationTable {
        columns: columns.into_iter().map(|c| c.label).collect(),
        rows,
        average,
    })
}

impl AblationTable {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let quote = |s: &str| if s.contains(',') { format!("\"{s}\"") } else { s.to_owned() };
        let header: Vec<String> = ["dataset".to_owned(), "n_real".to_owned()]
            .into_iter()
            .chain(self.columns.iter().map(|c| quote(c)))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        let cell = |v: &Option<f64>| v.map_or("N/A".into(), pct);
        for (d, n, values) in &self.rows {
            let rec: Vec<String> = [d.clone(), n.to_string()].into_iter().chain(values.iter().map(cell)).collect();
            writeln!(w, "{}", rec.join(","))?;
        }
        let footer: Vec<String> = [AVERAGE_ROW_LABEL.to_owned(), String::new()]
            .into_iter()
            .chain(self.average.iter().map(cell))
            .collect();
        writeln!(w, "{}", footer.join(","))?;
        w.flush()
    }

    pub fn to_markdown(&self) -> String {
        let cell = |v: &Option<f64>| v.map_or("N/A".into(), pct);
        let mut s = format!("| Dataset | N_real | {} |\n", self.columns.join(" | "));
        s.push_str(&format!("|---|---|{}\n", "---|".repeat(self.columns.len())));
        for (d, n, values) in &self.rows {
            let v: Vec<String> = values.iter().map(cell).collect();
            s.push_str(&format!("| {d} | {n} | {} |\n", v.join(" | ")));
        }
        let v: Vec<String> = self.average.iter().map(cell).collect();
        s.push_str(&format!("| **{AVERAGE_ROW_LABEL}** | | {} |\n", v.join(" | ")));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{gaussian_blobs, BlobSpec};
    use crate::encoder::CentroidEncoder;

    fn labels(counts: &[usize]) -> Vec<usize> {
        counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| std::iter::repeat(c).take(n))
            .collect()
    }

    fn scored(n_real: usize, repeat: usize, kind: ClassifierKind, mode: Mode, test: f64) -> RunResult {
        RunResult {
            dataset: "d".into(),
            n_real,
            repeat,
            classifier: kind,
            mode,
            cell: None,
            cells_evaluated: 0,
            outcome: Outcome::Scored {
                val_bacc: test,
                test_bacc: test,
            },
        }
    }

    #[test]
    fn test_size_formula() {
        assert_eq!(make_splits(&labels(&[1000, 1000]), 1).unwrap().test.len(), 500);
        let vehicle = labels(&[212, 217, 218, 199]);
        let s = make_splits(&vehicle, 1).unwrap();
        assert_eq!(s.test.len(), 423);
        assert_eq!(s.pool.len(), 423);
    }

    #[test]
    fn test_split_follows_quotas() {
        let y = labels(&[50, 30, 20]);
        let s = make_splits(&y, 3).unwrap();
        let q = crate::augmentation::class_quotas(&[50, 30, 20], 50).unwrap();
        let mut got = [0usize; 3];
        s.test.iter().for_each(|&i| got[y[i]] += 1);
        assert_eq!(got.to_vec(), q);
    }

    #[test]
    fn singleton_class_cannot_be_stratified() {
        assert!(matches!(make_splits(&[0, 0, 1], 0), Err(HarnessError::StratifyError(_))));
    }

    #[test]
    fn run_is_80_20_and_deterministic() {
        let y = labels(&[500, 500]);
        let pool: Vec<usize> = (0..1000).collect();
        let a = make_run(&y, &pool, 100, 3).unwrap();
        assert_eq!((a.train.len(), a.val.len()), (80, 20));
        assert_eq!(a, make_run(&y, &pool, 100, 3).unwrap());
    }

    #[test]
    fn repeats_draw_distinct_train_sets() {
        let y = labels(&[500, 500]);
        let pool: Vec<usize> = (0..1000).collect();
        let sets: Vec<Vec<usize>> = (0..10)
            .map(|r| make_run(&y, &pool, 100, run_seed(7, "d", 100, r)).unwrap().train)
            .collect();
        for i in 0..10 {
            for j in i + 1..10 {
                assert_ne!(sets[i], sets[j]);
            }
        }
    }

    #[test]
    fn too_few_samples() {
        let y = labels(&[10, 10, 10]);
        let pool: Vec<usize> = (0..30).collect();
        assert!(matches!(
            make_run(&y, &pool, 5, 0),
            Err(HarnessError::TooFewSamples { n_real: 5, classes: 3 })
        ));
    }

    #[test]
    fn grid_cardinality() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.sweep_cells().len(), 12);
        cfg.trivial_augment = true;
        assert_eq!(cfg.sweep_cells().len(), 13);
    }

    #[test]
    fn tie_breaks() {
        let fixed = |f, k| Cell {
            fraction: ContextFraction::Fixed(f),
            k,
        };
        let ta = Cell {
            fraction: ContextFraction::TrivialAugment,
            k: 5,
        };
        assert_eq!(select_cell(&[fixed(0.7, 5)], &[0.1]), 0);
        assert_eq!(select_cell(&[fixed(0.7, 5), fixed(0.9, 5)], &[0.8, 0.8]), 1);
        assert_eq!(select_cell(&[fixed(0.9, 50), fixed(0.9, 5)], &[0.8, 0.8]), 1);
        assert_eq!(select_cell(&[ta, fixed(0.5, 50)], &[0.8, 0.8]), 1);
        assert_eq!(select_cell(&[fixed(0.5, 50), ta], &[0.8, 0.81]), 1);
    }

    #[test]
    fn single_repeat_has_zero_std() {
        let t = aggregate_table(&[
            scored(20, 0, ClassifierKind::Knn, Mode::Real, 0.6),
            scored(20, 0, ClassifierKind::Knn, Mode::Tabmda, 0.7),
        ])
        .unwrap();
        assert_eq!(t.rows[0].cells[0].unwrap().std, 0.0);
        assert!(t.to_markdown().contains("60.00 ± 0.00"));
    }

    #[test]
    fn two_point_sample_std() {
        let m = mean_std(&[0.6, 0.8]).unwrap();
        assert!((m.mean - 0.7).abs() < 1e-15);
        assert!((m.std - 0.1414213562373095).abs() < 1e-12);
    }

    #[test]
    fn missing_cell() {
        let r = [scored(20, 0, ClassifierKind::Knn, Mode::Real, 0.6)];
        assert!(matches!(aggregate_table(&r), Err(HarnessError::MissingCell(_))));
    }

    #[test]
    fn aggregate_matches_streaming_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut results = Vec::new();
        for &n in &[20, 50] {
            for kind in ClassifierKind::ALL {
                for mode in [Mode::Real, Mode::Tabmda] {
                    for rep in 0..rng.random_range(1..15) {
                        results.push(scored(n, rep, kind, mode, rng.random_range(0.0..1.0)));
                    }
                }
            }
        }
        let table = aggregate_table(&results).unwrap();
        for row in &table.rows {
            for (j, &(kind, mode)) in table.columns.iter().enumerate() {
                // Welford's streaming update.
                let (mut n, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
                for r in results.iter().filter(|r| r.n_real == row.n_real && r.classifier == kind && r.mode == mode) {
                    let x = r.test_bacc().unwrap();
                    n += 1.0;
                    let d = x - mean;
                    mean += d / n;
                    m2 += d * (x - mean);
                }
                let std = if n > 1.0 { (m2 / (n - 1.0)).sqrt() } else { 0.0 };
                let cell = row.cells[j].unwrap();
                assert!((cell.mean - mean).abs() < 1e-12);
                assert!((cell.std - std).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn small_evaluation_shape() {
        let ds = gaussian_blobs(&BlobSpec {
            n_samples: 120,
            n_features: 3,
            n_classes: 2,
            cluster_std: 1.0,
            center_box: 3.0,
            seed: 2,
        });
        let cfg = ExperimentConfig {
            n_real_grid: vec![20],
            repeats: 2,
            ics_fraction_grid: vec![0.7, 1.0],
            ics_k_grid: vec![2, 3],
            classifiers: vec![ClassifierKind::Knn, ClassifierKind::Tree],
            hyperparams: Hyperparams {
                forest_trees: 5,
                gbdt_rounds: 5,
                ..Hyperparams::default()
            },
            ..ExperimentConfig::default()
        };
        let enc = CentroidEncoder::new(2);
        let ev = evaluate(&cfg, &enc, &ds).unwrap();
        assert_eq!(ev.results.len(), 2 * 2 * 2);
        assert!(ev.results.iter().filter(|r| r.mode == Mode::Tabmda).all(|r| r.cells_evaluated == 4));
        let mut a = Vec::new();
        write_results_csv(&mut a, &ev.results).unwrap();
        let mut b = Vec::new();
        write_results_csv(&mut b, &evaluate(&cfg, &enc, &ds).unwrap().results).unwrap();
        assert_eq!(a, b);
        let table = aggregate_table(&ev.results).unwrap();
        assert_eq!(table.columns.len(), 4);
        let ab = ablation(&cfg, &enc, &ds).unwrap();
        assert_eq!(ab.columns.len(), 3);
    }

    #[test]
    fn class_limit_becomes_skip() {
        let ds = gaussian_blobs(&BlobSpec {
            n_samples: 60,
            n_features: 2,
            n_classes: 3,
            cluster_std: 1.0,
            center_box: 3.0,
            seed: 4,
        });
        let cfg = ExperimentConfig {
            n_real_grid: vec![20],
            repeats: 1,
            ics_fraction_grid: vec![1.0],
            ics_k_grid: vec![1],
            classifiers: vec![ClassifierKind::Knn],
            ..ExperimentConfig::default()
        };
        // An encoder sized for two classes cannot take three.
        let ev = evaluate(&cfg, &CentroidEncoder::new(2), &ds).unwrap();
        assert!(matches!(ev.results[1].outcome, Outcome::Skipped { .. }));
        let t = aggregate_table(&ev.results).unwrap();
        assert_eq!(t.rows[0].cells[1], None);
        assert!(t.to_markdown().contains("N/A"));
    }
}
