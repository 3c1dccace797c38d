use std::fs;
use std::path::{Path, PathBuf};

use conceptstack::calibmetrics::{auc, brier, f1};
use conceptstack::dataset::{load_csv, pima_schema, CsvTable, Dataset};
use conceptstack::stack::{refit_full, run_cv, StackArtifact, BASE_LEARNERS, DECISION_THRESHOLD, META_MODEL};
use conceptstack::{AugmentMode, RunConfig};
use log::info;

use crate::reports;
use crate::{EvaluateArgs, ExportArgs, PredictArgs, TrainArgs};

pub const ARTIFACT_FILE: &str = "stack_artifact.json";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        source: conceptstack::Error,
    },
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{0}")]
    Core(#[from] conceptstack::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        let core = match self {
            CliError::Config { .. } => return 2,
            CliError::Stage { source, .. } => source,
            CliError::Core(e) => e,
        };
        if core.is_input_error() {
            2
        } else {
            1
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn stage<T>(name: &'static str, r: conceptstack::Result<T>) -> CliResult<T> {
    r.map_err(|source| CliError::Stage { stage: name, source })
}

pub fn build_config(args: &TrainArgs) -> CliResult<RunConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CliError::Config {
                path: path.clone(),
                message: e.to_string(),
            })?;
            toml::from_str(&text).map_err(|e| CliError::Config {
                path: path.clone(),
                message: e.to_string(),
            })?
        }
        None => RunConfig::default(),
    };
    if args.smoke {
        let smoke = RunConfig::smoke();
        config.folds = smoke.folds;
        config.synthetic_count = smoke.synthetic_count;
        config.set_epochs(smoke.train.epochs);
    }
    if let Some(v) = &args.data {
        config.data = v.clone();
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.folds {
        config.folds = v;
    }
    if let Some(v) = args.epochs {
        config.set_epochs(v);
    }
    if let Some(v) = args.synthetic_count {
        config.synthetic_count = v;
    }
    if let Some(v) = args.gmm_components {
        config.gmm.components = v;
    }
    if let Some(v) = args.k_neighbors {
        config.k_neighbors = v;
    }
    if args.augment_global {
        config.augmentation = AugmentMode::Global;
    }
    if args.augment_in_fold {
        config.augmentation = AugmentMode::InFold;
    }
    if let Some(v) = &args.output_dir {
        config.output_dir = v.clone();
    }
    if let Some(v) = &args.model_dir {
        config.model_dir = v.clone();
    }
    config.validate()?;
    Ok(config)
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| conceptstack::Error::io(path, e).into())
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let config = build_config(args)?;
    let records = stage("dataset", load_csv(&config.data, &pima_schema()))?;
    let dataset = Dataset::original(records);
    info!(
        "loaded {} rows from {}, augmentation {}",
        dataset.len(),
        config.data.display(),
        config.augmentation.as_str()
    );
    create_dir(&config.output_dir)?;
    create_dir(&config.model_dir)?;
    reports::write_config(&config, &config.output_dir.join("config_snapshot.toml"))?;

    let cv = stage("cross-validation", run_cv(&dataset, &config))?;
    reports::write_cv_tables(&cv, &config.output_dir)?;
    for w in &cv.warnings {
        eprintln!("warning: {w}");
    }
    let artifact = stage("refit", refit_full(&dataset, &config, cv))?;
    let path = config.model_dir.join(ARTIFACT_FILE);
    stage("save", artifact.save(&path))?;
    reports::write_figures(&artifact, &config.output_dir)?;

    let report = artifact.report()?;
    println!("model        oof_f1   oof_auc  oof_brier  f1_mean±std      auc_mean±std");
    for s in &report.summary {
        println!(
            "{:<12} {:.4}   {:.4}   {:.4}     {:.4}±{:.4}    {:.4}±{:.4}",
            s.model, s.oof_f1, s.oof_auc, s.oof_brier, s.f1_mean, s.f1_std, s.auc_mean, s.auc_std
        );
    }
    println!("artifact: {}", path.display());
    Ok(())
}

pub fn predict(args: &PredictArgs) -> CliResult<()> {
    let artifact = stage("load artifact", StackArtifact::load(&args.model))?;
    let table = stage("input", CsvTable::read(&args.input))?;
    let records = stage("input", table.parse_records(&pima_schema(), false))?;
    let out = stage("predict", artifact.predict(&records))?;
    reports::write_predictions(&table, &out, &args.output)?;
    println!(
        "scored {} rows in {:.3} s: {:.1} rows/second",
        out.rows.len(),
        out.seconds,
        out.rows_per_second()
    );
    Ok(())
}

pub fn evaluate(args: &EvaluateArgs) -> CliResult<()> {
    let artifact = stage("load artifact", StackArtifact::load(&args.model))?;
    let path = args.input.clone().unwrap_or_else(|| artifact.config.data.clone());
    let records = stage("input", load_csv(&path, &pima_schema()))?;
    let labels: Vec<u8> = records.iter().map(|r| r.outcome).collect();
    let out = stage("predict", artifact.predict(&records))?;
    println!("model        f1       auc      brier");
    for (j, name) in BASE_LEARNERS.iter().chain([&META_MODEL]).enumerate() {
        let p: Vec<f64> = out
            .rows
            .iter()
            .map(|r| if j < 5 { r.base[j] } else { r.meta })
            .collect();
        let a = auc(&labels, &p)
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|_| "NA".into());
        println!(
            "{:<12} {:.4}   {}   {:.4}",
            name,
            f1(&labels, &p, DECISION_THRESHOLD)?,
            a,
            brier(&labels, &p)?
        );
    }
    println!("{} rows at {:.1} rows/second", out.rows.len(), out.rows_per_second());
    Ok(())
}

pub fn export_graph(args: &ExportArgs) -> CliResult<()> {
    let artifact = stage("load artifact", StackArtifact::load(&args.model))?;
    create_dir(&args.output_dir)?;
    let files = reports::write_dot_files(artifact.report()?, &args.output_dir)?;
    println!("wrote {files} DOT files to {}", args.output_dir.display());
    Ok(())
}

pub fn report(args: &ExportArgs) -> CliResult<()> {
    let artifact = stage("load artifact", StackArtifact::load(&args.model))?;
    artifact.report()?;
    create_dir(&args.output_dir)?;
    reports::write_cv_tables(artifact.report()?, &args.output_dir)?;
    reports::write_figures(&artifact, &args.output_dir)?;
    println!("wrote report files to {}", args.output_dir.display());
    Ok(())
}
