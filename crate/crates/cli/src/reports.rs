use std::path::Path;

use conceptstack::calibmetrics::{calibration_bins, probability_histogram};
use conceptstack::dataset::{write_text, CsvTable};
use conceptstack::graph::export_dot;
use conceptstack::stack::{CvReport, PredictOutput, StackArtifact, BASE_LEARNERS};
use conceptstack::{Error, RunConfig};

use crate::commands::CliResult;

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    w.write_record(header).map_err(Error::from)?;
    for row in rows {
        w.write_record(&row).map_err(Error::from)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn write_config(config: &RunConfig, path: &Path) -> CliResult<()> {
    let text = toml::to_string(config).map_err(|e| Error::Parameter(format!("cannot serialize config: {e}")))?;
    Ok(write_text(path, &text)?)
}

/// perf_table.csv, model_summary.csv and oof_predictions.csv.
pub fn write_cv_tables(report: &CvReport, dir: &Path) -> CliResult<()> {
    write_csv(
        &dir.join("perf_table.csv"),
        &["fold", "model", "f1", "auc", "brier"],
        report.fold_metrics.iter().map(|m| {
            vec![
                (m.fold + 1).to_string(),
                m.model.clone(),
                m.f1.to_string(),
                m.auc.to_string(),
                m.brier.to_string(),
            ]
        }),
    )?;
    write_csv(
        &dir.join("model_summary.csv"),
        &[
            "model",
            "f1_mean",
            "f1_std",
            "auc_mean",
            "auc_std",
            "oof_f1",
            "oof_auc",
            "oof_brier",
        ],
        report.summary.iter().map(|s| {
            vec![
                s.model.clone(),
                s.f1_mean.to_string(),
                s.f1_std.to_string(),
                s.auc_mean.to_string(),
                s.auc_std.to_string(),
                s.oof_f1.to_string(),
                s.oof_auc.to_string(),
                s.oof_brier.to_string(),
            ]
        }),
    )?;
    let mut header = vec!["index", "fold", "label", "provenance"];
    header.extend(BASE_LEARNERS);
    header.push("meta");
    write_csv(
        &dir.join("oof_predictions.csv"),
        &header,
        report.oof.iter().map(|r| {
            let mut row = vec![
                r.index.to_string(),
                (r.fold + 1).to_string(),
                r.label.to_string(),
                r.provenance.as_str().to_string(),
            ];
            row.extend(r.base.iter().map(f64::to_string));
            row.push(r.meta.to_string());
            row
        }),
    )
}

/// One DOT file per fold; returns the number written.
pub fn write_dot_files(report: &CvReport, dir: &Path) -> CliResult<usize> {
    for g in &report.fold_graphs {
        export_dot(
            &g.neighbors,
            &g.labels,
            &dir.join(format!("concept_graph_fold{}.dot", g.fold + 1)),
        )?;
    }
    Ok(report.fold_graphs.len())
}

/// Calibration bins, probability histogram, graph statistics, refinement
/// log and DOT files.
pub fn write_figures(artifact: &StackArtifact, dir: &Path) -> CliResult<()> {
    let report = artifact.report()?;
    let bins = artifact.config.calibration_bins;
    let labels: Vec<u8> = report.oof.iter().map(|r| r.label).collect();
    let meta: Vec<f64> = report.oof.iter().map(|r| r.meta).collect();
    write_csv(
        &dir.join("calibration_bins.csv"),
        &["bin_low", "bin_high", "mean_pred", "obs_freq", "count"],
        calibration_bins(&labels, &meta, bins)?.into_iter().map(|b| {
            vec![
                b.low.to_string(),
                b.high.to_string(),
                opt(b.mean_pred),
                opt(b.obs_freq),
                b.count.to_string(),
            ]
        }),
    )?;
    write_csv(
        &dir.join("probability_histogram.csv"),
        &["bin_low", "bin_high", "count"],
        probability_histogram(&meta, bins)?
            .into_iter()
            .map(|(lo, hi, c)| vec![lo.to_string(), hi.to_string(), c.to_string()]),
    )?;
    write_csv(
        &dir.join("graph_stats.csv"),
        &[
            "fold",
            "nodes",
            "synthetic_nodes",
            "k",
            "avg_degree",
            "modularity",
            "alpha",
            "initial_bce",
            "final_bce",
        ],
        report.fold_graphs.iter().map(|g| {
            let log = &g.diagnostics.refine_log;
            vec![
                (g.fold + 1).to_string(),
                g.labels.len().to_string(),
                g.diagnostics.synthetic_rows.to_string(),
                g.neighbors.first().map_or(0, Vec::len).to_string(),
                g.avg_degree.to_string(),
                g.modularity.to_string(),
                g.alpha.to_string(),
                opt(log.first().map(|s| s.bce)),
                opt(log.last().map(|s| s.bce)),
            ]
        }),
    )?;
    write_csv(
        &dir.join("refine_log.csv"),
        &["fold", "iteration", "bce", "modularity", "avg_degree"],
        report.fold_graphs.iter().flat_map(|g| {
            g.diagnostics.refine_log.iter().map(move |s| {
                vec![
                    (g.fold + 1).to_string(),
                    s.iteration.to_string(),
                    s.bce.to_string(),
                    s.modularity.to_string(),
                    s.avg_degree.to_string(),
                ]
            })
        }),
    )?;
    write_dot_files(report, dir)?;
    Ok(())
}

/// Input columns followed by the five calibrated base probabilities and the
/// meta probability.
pub fn write_predictions(table: &CsvTable, out: &PredictOutput, path: &Path) -> CliResult<()> {
    let mut header: Vec<String> = table.headers.clone();
    header.extend(BASE_LEARNERS.iter().map(|n| format!("p_{n}")));
    header.push("p_meta".into());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(
        path,
        &header_refs,
        table.rows.iter().zip(&out.rows).map(|(cells, p)| {
            let mut row = cells.clone();
            row.extend(p.base.iter().map(f64::to_string));
            row.push(p.meta.to_string());
            row
        }),
    )
}
