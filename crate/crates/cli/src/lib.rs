//! Command-line driver: JSON config plus flag overrides, the five commands,
//! and the files they write.
//!
//! Every command writes `config.json` (the effective configuration) into the
//! output directory next to its other outputs.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use tabmda::augmentation::{build_augmented_trainset, embed_eval_points, ContextFraction, IcsParams};
use tabmda::classifiers::{ClassifierKind, Hyperparams};
use tabmda::data_io::{bundled_toy, load_csv, registry_entry, DataError, Dataset, DEFAULT_LABEL_COLUMN};
use tabmda::encoder::{
    generate_synthetic_weights, load_weights, save_weights, CentroidEncoder, Encoder, EncoderConfig, EncoderError,
    LabelPolicy, TransformerEncoder,
};
use tabmda::harness::{self, derive_seed, name_tag, ExperimentConfig, HarnessError};
use tabmda::numerics::{pca_fit_project, Matrix, Standardizer};

pub const CONFIG_ECHO_FILE: &str = "config.json";
pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_CSV_FILE: &str = "summary.csv";
pub const SUMMARY_MD_FILE: &str = "summary.md";
pub const ABLATION_CSV_FILE: &str = "ablation.csv";
pub const ABLATION_MD_FILE: &str = "ablation.md";
pub const AUGMENTED_FILE: &str = "augmented.csv";
pub const DEFAULT_WEIGHTS_FILE: &str = "encoder.pfnw";
pub const PCA_FILES: [&str; 3] = ["pca_raw.csv", "pca_embedding.csv", "pca_augmented.csv"];

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::InvalidConfig(_) => CliError::Config(e.to_string()),
            HarnessError::StratifyError(_) | HarnessError::TooFewSamples { .. } => CliError::Data(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Transformer,
    Centroid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcsConfig {
    /// Context fractions swept by `evaluate` and `sweep`.
    pub fractions: Vec<f64>,
    /// Context counts swept by `evaluate` and `sweep`.
    pub k_grid: Vec<usize>,
    /// Adds the `U[0.5, 0.99]` cell to the `evaluate` sweep.
    pub trivial_augment: bool,
    /// K used by `pca` and `augment`.
    pub k: usize,
    /// Fraction used by `pca` and `augment` (ignored with `trivial_augment`).
    pub fraction: f64,
}

impl Default for IcsConfig {
    fn default() -> Self {
        Self {
            fractions: vec![0.5, 0.7, 0.9, 1.0],
            k_grid: vec![5, 20, 50],
            trivial_augment: false,
            k: 20,
            fraction: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// CSV file; the bundled 300-point toy dataset when absent.
    pub dataset: Option<PathBuf>,
    pub label: String,
    pub weights: Option<PathBuf>,
    pub encoder: EncoderKind,
    /// Fold labels beyond the encoder's class limit instead of skipping.
    pub fold_labels: bool,
    pub out: PathBuf,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub verbosity: u8,
    pub n_real_grid: Vec<usize>,
    pub repeats: usize,
    pub classifiers: Vec<ClassifierKind>,
    pub standardize_real: bool,
    pub ics: IcsConfig,
    pub hyperparams: Hyperparams,
    /// Architecture written by `gen-weights`.
    pub encoder_config: EncoderConfig,
}

impl Default for CliConfig {
    fn default() -> Self {
        let exp = ExperimentConfig::default();
        Self {
            dataset: None,
            label: DEFAULT_LABEL_COLUMN.to_owned(),
            weights: None,
            encoder: EncoderKind::Transformer,
            fold_labels: false,
            out: PathBuf::from("out"),
            seed: exp.base_seed,
            workers: 0,
            verbosity: 0,
            n_real_grid: exp.n_real_grid,
            repeats: exp.repeats,
            classifiers: exp.classifiers,
            standardize_real: exp.standardize_real,
            ics: IcsConfig::default(),
            hyperparams: exp.hyperparams,
            encoder_config: EncoderConfig::default(),
        }
    }
}

impl CliConfig {
    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            n_real_grid: self.n_real_grid.clone(),
            repeats: self.repeats,
            ics_fraction_grid: self.ics.fractions.clone(),
            ics_k_grid: self.ics.k_grid.clone(),
            trivial_augment: self.ics.trivial_augment,
            classifiers: self.classifiers.clone(),
            base_seed: self.seed,
            hyperparams: self.hyperparams.clone(),
            standardize_real: self.standardize_real,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.experiment().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.encoder_config.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.ics.k == 0 {
            return Err(CliError::Config("ics.k must be >= 1".into()));
        }
        if !(self.ics.fraction > 0.0 && self.ics.fraction <= 1.0) {
            return Err(CliError::Config("ics.fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// ICS parameters for `pca` and `augment`.
    pub fn ics_params(&self, dataset: &Dataset) -> Result<IcsParams, CliError> {
        let fraction = if self.ics.trivial_augment {
            ContextFraction::TrivialAugment
        } else {
            ContextFraction::Fixed(self.ics.fraction)
        };
        IcsParams::new(self.ics.k, fraction, derive_seed(self.seed, &[name_tag(&dataset.source_id)]))
            .map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Parses and validates a JSON config; absent keys take the defaults.
pub fn parse_config(json: &str) -> Result<CliConfig, CliError> {
    let cfg: CliConfig = serde_json::from_str(json).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Parser)]
#[command(name = "tabmda", version, about = "Tabular manifold data augmentation with in-context subsetting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic weight file.
    GenWeights,
    /// Run the protocol and write results and summary tables.
    Evaluate,
    /// Write the context-size ablation table.
    Sweep,
    /// Write 2-D PCA coordinates of raw, embedded and augmented data.
    Pca,
    /// Dump the ICS-augmented training set.
    Augment,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenWeights => "gen-weights",
            Command::Evaluate => "evaluate",
            Command::Sweep => "sweep",
            Command::Pca => "pca",
            Command::Augment => "augment",
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub weights: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub encoder: Option<EncoderKind>,
    /// Label column name.
    #[arg(long, global = true)]
    pub label: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

/// Loads `--config` (if any) and applies flag overrides.
pub fn effective_config(flags: &Flags) -> Result<CliConfig, CliError> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => CliConfig::default(),
    };
    if let Some(v) = &flags.dataset {
        cfg.dataset = Some(v.clone());
    }
    if let Some(v) = &flags.weights {
        cfg.weights = Some(v.clone());
    }
    if let Some(v) = flags.encoder {
        cfg.encoder = v;
    }
    if let Some(v) = &flags.label {
        cfg.label = v.clone();
    }
    if let Some(v) = &flags.out {
        cfg.out = v.clone();
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = flags.workers {
        cfg.workers = v;
    }
    cfg.verbosity = cfg.verbosity.max(flags.verbose);
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct Echo<'a> {
    command: &'a str,
    #[serde(flatten)]
    config: &'a CliConfig,
}

fn write_echo(cfg: &CliConfig, command: Command) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(&Echo {
        command: command.name(),
        config: cfg,
    })
    .map_err(runtime)?;
    fs::write(cfg.out.join(CONFIG_ECHO_FILE), text + "\n")?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<fs::File>, CliError> {
    Ok(BufWriter::new(fs::File::create(path)?))
}

pub fn load_dataset(cfg: &CliConfig) -> Result<Dataset, CliError> {
    let ds = match &cfg.dataset {
        Some(path) => load_csv(path, &cfg.label)?,
        None => bundled_toy(),
    };
    if let Some(entry) = registry_entry(&ds.source_id) {
        entry.validate(&ds)?;
    }
    Ok(ds)
}

pub fn build_encoder(cfg: &CliConfig, dataset: &Dataset) -> Result<Box<dyn Encoder>, CliError> {
    match cfg.encoder {
        EncoderKind::Centroid => Ok(Box::new(CentroidEncoder::new(dataset.n_classes()))),
        EncoderKind::Transformer => {
            let path = cfg
                .weights
                .as_ref()
                .ok_or_else(|| CliError::Config("the transformer encoder needs --weights".into()))?;
            let (ecfg, w) = load_weights(path).map_err(|e| match e {
                EncoderError::Io(_) => CliError::Data(format!("{}: {e}", path.display())),
                _ => CliError::Data(e.to_string()),
            })?;
            let policy = if cfg.fold_labels {
                LabelPolicy::Fold
            } else {
                LabelPolicy::Strict
            };
            Ok(Box::new(TransformerEncoder::new(ecfg, w).map_err(|e| CliError::Data(e.to_string()))?.with_label_policy(policy)))
        }
    }
}

fn log(cfg: &CliConfig, msg: impl AsRef<str>) {
    if cfg.verbosity > 0 {
        eprintln!("{}", msg.as_ref());
    }
}

pub fn command_gen_weights(cfg: &CliConfig) -> Result<PathBuf, CliError> {
    let path = cfg.weights.clone().unwrap_or_else(|| cfg.out.join(DEFAULT_WEIGHTS_FILE));
    let w = generate_synthetic_weights(&cfg.encoder_config, cfg.seed).map_err(runtime)?;
    save_weights(&cfg.encoder_config, &w, &path).map_err(runtime)?;
    log(cfg, format!("wrote {}", path.display()));
    Ok(path)
}

pub fn command_evaluate(cfg: &CliConfig) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let encoder = build_encoder(cfg, &ds)?;
    log(cfg, format!("evaluating {} ({} x {}, {} classes)", ds.source_id, ds.n_samples(), ds.n_features(), ds.n_classes()));
    let ev = harness::evaluate(&cfg.experiment(), encoder.as_ref(), &ds)?;
    harness::write_results_csv(create(&cfg.out.join(RESULTS_FILE))?, &ev.results)?;
    let table = harness::aggregate_table(&ev.results)?;
    table.write_csv(create(&cfg.out.join(SUMMARY_CSV_FILE))?)?;
    fs::write(cfg.out.join(SUMMARY_MD_FILE), table.to_markdown())?;
    log(cfg, table.to_markdown());
    Ok(())
}

pub fn command_sweep(cfg: &CliConfig) -> Result<(), CliError> {
    let ds = load_dataset(cfg)?;
    let encoder = build_encoder(cfg, &ds)?;
    let table = harness::ablation(&cfg.experiment(), encoder.as_ref(), &ds)?;
    table.write_csv(create(&cfg.out.join(ABLATION_CSV_FILE))?)?;
    fs::write(cfg.out.join(ABLATION_MD_FILE), table.to_markdown())?;
    log(cfg, table.to_markdown());
    Ok(())
}

fn write_coordinates(path: &Path, coords: &Matrix, labels: &[usize], class_names: &[String]) -> Result<(), CliError> {
    use std::io::Write;
    let mut w = create(path)?;
    writeln!(w, "pc1,pc2,label")?;
    for (row, &y) in coords.iter_rows().zip(labels) {
        writeln!(w, "{},{},{}", row[0], row[1], class_names[y])?;
    }
    w.flush()?;
    Ok(())
}

/// PCA panels of the training pool (the dataset minus its test split): raw
/// features (standardized), full-context embeddings and ICS-augmented
/// embeddings. Each panel is fit on its own matrix.
pub fn command_pca(cfg: &CliConfig) -> Result<[PathBuf; 3], CliError> {
    let ds = load_dataset(cfg)?;
    let encoder = build_encoder(cfg, &ds)?;
    let splits = harness::dataset_splits(&ds, cfg.seed)?;
    let train = ds.subset(&splits.pool);
    let raw = Standardizer::fit(&train.features).and_then(|s| s.apply(&train.features)).map_err(runtime)?;
    let embedded = embed_eval_points(encoder.as_ref(), &train, &train.features).map_err(runtime)?;
    let augmented = build_augmented_trainset(encoder.as_ref(), &cfg.ics_params(&ds)?, &train).map_err(runtime)?;
    let panels = [
        (raw, train.labels.clone()),
        (embedded, train.labels.clone()),
        (augmented.embeddings, augmented.labels),
    ];
    let paths = PCA_FILES.map(|f| cfg.out.join(f));
    for ((data, labels), path) in panels.iter().zip(&paths) {
        let (_, coords) = pca_fit_project(data).map_err(runtime)?;
        write_coordinates(path, &coords, labels, &ds.class_names)?;
    }
    Ok(paths)
}

/// Augments the whole dataset as one training set.
pub fn command_augment(cfg: &CliConfig) -> Result<PathBuf, CliError> {
    let ds = load_dataset(cfg)?;
    let encoder = build_encoder(cfg, &ds)?;
    let aug = build_augmented_trainset(encoder.as_ref(), &cfg.ics_params(&ds)?, &ds).map_err(runtime)?;
    let path = cfg.out.join(AUGMENTED_FILE);
    aug.write_csv(create(&path)?)?;
    Ok(path)
}

/// Runs one command with an effective config, on a pool of `cfg.workers`
/// threads.
pub fn execute(command: Command, cfg: &CliConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(runtime)?;
    pool.install(|| match command {
        Command::GenWeights => command_gen_weights(cfg).map(drop),
        Command::Evaluate => command_evaluate(cfg),
        Command::Sweep => command_sweep(cfg),
        Command::Pca => command_pca(cfg).map(drop),
        Command::Augment => command_augment(cfg).map(drop),
    })?;
    write_echo(cfg, command)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = effective_config(&cli.flags)?;
    execute(cli.command, &cfg)
}
