//! Out-of-fold stacking: per-fold pipelines with calibrated base learners,
//! meta features, the logistic meta-learner, full refit and the persisted
//! artifact.

use std::path::Path;
use std::time::Instant;

use log::{debug, info, warn};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::augment::{augment_minority, GaussianMixture};
use crate::calibmetrics::{auc, brier, f1, fit_isotonic, IsotonicCalibrator};
use crate::config::{AugmentMode, MetaConfig, RunConfig};
use crate::dataset::{write_text, Dataset, FeatureMatrix, Provenance, RawRecord, ScalerStats};
use crate::error::{Error, Result};
use crate::forests::{fit_forest, ForestMode, ForestModel};
use crate::graph::{
    build_knn, neighbor_sequences, query_knn, refine, train_autoencoder, Autoencoder, AutoencoderConfig, ConceptGraph,
    Embeddings, RefineStep,
};
use crate::neuralkernel::{
    sigmoid, train, BinaryNet, CnnSeq, CnnSeqConfig, Ffnn, FfnnConfig, NamedTensor, ParamSet, SampleMatrix,
    TrainOptions, Transformer, TransformerConfig,
};
use crate::phasemap::{train_alpha, PhaseMap};
use crate::seed::{self, stream};
use crate::split::{stratified_holdout, stratified_kfold};

pub const BASE_LEARNERS: [&str; 5] = ["rf", "et", "transformer", "cnn", "ffnn"];
pub const META_MODEL: &str = "meta";
pub const META_WIDTH: usize = 17;
pub const LOGIT_CLIP: f64 = 1e-6;
pub const FORMAT_VERSION: u32 = 1;
pub const DECISION_THRESHOLD: f64 = 0.5;

/// `[p₁..p₅, logit₁..logit₅, vote₁..vote₅, mean, std]`; a probability of
/// exactly 0.5 votes 1 and std is the population standard deviation.
pub fn meta_row(p: &[f64; 5]) -> [f64; META_WIDTH] {
    let mut out = [0.0; META_WIDTH];
    for (j, &prob) in p.iter().enumerate() {
        let c = prob.clamp(LOGIT_CLIP, 1.0 - LOGIT_CLIP);
        out[j] = prob;
        out[5 + j] = (c / (1.0 - c)).ln();
        out[10 + j] = if prob >= DECISION_THRESHOLD { 1.0 } else { 0.0 };
    }
    let mean = p.iter().sum::<f64>() / 5.0;
    let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
    out[15] = mean;
    out[16] = var.sqrt();
    out
}

pub fn build_meta(probs: &[[f64; 5]]) -> Array2<f64> {
    let mut out = Array2::zeros((probs.len(), META_WIDTH));
    for (mut row, p) in out.rows_mut().into_iter().zip(probs) {
        row.assign(&ndarray::ArrayView1::from(&meta_row(p)));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaLearner {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

impl MetaLearner {
    pub fn predict_row(&self, x: &[f64]) -> f64 {
        let z: f64 = self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias;
        sigmoid(z)
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|r| self.predict_row(r.as_slice().expect("rows of a standard-layout matrix")))
            .collect()
    }
}

/// Mean logistic loss plus λ/(2n)‖w‖² (bias unpenalized), with gradient.
pub fn meta_objective(x: ArrayView2<f64>, y: &[u8], w: &[f64], b: f64, lambda: f64) -> (f64, Vec<f64>, f64) {
    let n = x.nrows() as f64;
    let mut loss = 0.0;
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for (row, &label) in x.rows().into_iter().zip(y) {
        let z: f64 = row.iter().zip(w).map(|(v, wj)| v * wj).sum::<f64>() + b;
        let t = f64::from(label);
        loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        let r = sigmoid(z) - t;
        for (g, v) in gw.iter_mut().zip(row.iter()) {
            *g += r * v;
        }
        gb += r;
    }
    let penalty: f64 = w.iter().map(|v| v * v).sum();
    for (g, wj) in gw.iter_mut().zip(w) {
        *g = *g / n + lambda * wj / n;
    }
    (loss / n + lambda * penalty / (2.0 * n), gw, gb / n)
}

fn norm(gw: &[f64], gb: f64) -> f64 {
    (gw.iter().map(|v| v * v).sum::<f64>() + gb * gb).sqrt()
}

/// Full-batch gradient descent from zero with Barzilai–Borwein step sizes and
/// Armijo backtracking, stopping when the gradient norm drops below `tol`.
pub fn fit_meta_learner(x: ArrayView2<f64>, y: &[u8], config: &MetaConfig) -> Result<MetaLearner> {
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!("{} meta rows but {} labels", x.nrows(), y.len())));
    }
    let positives = y.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == y.len() {
        return Err(Error::Training("meta-learner needs both classes".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("meta features contain non-finite values".into()));
    }
    let d = x.ncols();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let (mut f, mut gw, mut gb) = meta_objective(x, y, &w, b, config.lambda);
    let mut step = 1.0;
    let mut iterations = 0;
    while iterations < config.max_iter && norm(&gw, gb) >= config.tol {
        iterations += 1;
        let g2 = norm(&gw, gb).powi(2);
        let mut t = step;
        let (w_new, b_new, f_new, gw_new, gb_new) = loop {
            let wn: Vec<f64> = w.iter().zip(&gw).map(|(a, g)| a - t * g).collect();
            let bn = b - t * gb;
            let (fnew, gwn, gbn) = meta_objective(x, y, &wn, bn, config.lambda);
            if fnew <= f - 1e-4 * t * g2 || t < 1e-12 {
                break (wn, bn, fnew, gwn, gbn);
            }
            t *= 0.5;
        };
        if f_new > f {
            break;
        }
        // Barzilai–Borwein step for the next iteration.
        let s: Vec<f64> = w_new.iter().zip(&w).map(|(a, c)| a - c).chain([b_new - b]).collect();
        let r: Vec<f64> = gw_new
            .iter()
            .zip(&gw)
            .map(|(a, c)| a - c)
            .chain([gb_new - gb])
            .collect();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let sr: f64 = s.iter().zip(&r).map(|(a, c)| a * c).sum();
        step = if sr > 0.0 && (ss / sr).is_finite() { ss / sr } else { t };
        (w, b, f, gw, gb) = (w_new, b_new, f_new, gw_new, gb_new);
    }
    let grad_norm = norm(&gw, gb);
    let converged = grad_norm < config.tol;
    if !converged {
        warn!("meta-learner stopped after {iterations} iterations with gradient norm {grad_norm:.3e}");
    }
    Ok(MetaLearner {
        weights: w,
        bias: b,
        iterations,
        grad_norm,
        converged,
    })
}

/// Training-time diagnostics of one fitted pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineDiagnostics {
    pub rows: usize,
    pub synthetic_rows: usize,
    pub phase_trace: Vec<f64>,
    pub autoencoder_trace: Vec<f64>,
    pub refine_log: Vec<RefineStep>,
    pub learner_traces: Vec<Vec<f64>>,
}

/// Everything needed to score new rows with the five calibrated base learners.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "PipelineState", try_from = "PipelineState")]
pub struct Pipeline {
    pub scaler: ScalerStats,
    pub phase: PhaseMap,
    pub autoencoder_config: AutoencoderConfig,
    pub autoencoder: Autoencoder,
    pub embeddings: Embeddings,
    pub graph: ConceptGraph,
    pub labels: Vec<u8>,
    pub rf: ForestModel,
    pub et: ForestModel,
    pub transformer: Transformer,
    pub cnn_config: CnnSeqConfig,
    pub cnn: CnnSeq,
    pub ffnn_config: FfnnConfig,
    pub ffnn: Ffnn,
    pub calibrators: Vec<IsotonicCalibrator>,
    pub diagnostics: PipelineDiagnostics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PipelineState {
    scaler: ScalerStats,
    phase: PhaseMap,
    lifted_dim: usize,
    autoencoder_config: AutoencoderConfig,
    autoencoder: Vec<NamedTensor>,
    embeddings: Embeddings,
    graph: ConceptGraph,
    labels: Vec<u8>,
    rf: ForestModel,
    et: ForestModel,
    transformer_config: TransformerConfig,
    transformer: Vec<NamedTensor>,
    cnn_config: CnnSeqConfig,
    cnn: Vec<NamedTensor>,
    ffnn_config: FfnnConfig,
    ffnn: Vec<NamedTensor>,
    seq_len: usize,
    calibrators: Vec<IsotonicCalibrator>,
    diagnostics: PipelineDiagnostics,
}

impl From<Pipeline> for PipelineState {
    fn from(p: Pipeline) -> Self {
        PipelineState {
            lifted_dim: 2 * p.scaler.width(),
            autoencoder: p.autoencoder.to_named_tensors(),
            transformer_config: p.transformer.config.clone(),
            transformer: p.transformer.to_named_tensors(),
            cnn: p.cnn.to_named_tensors(),
            ffnn: p.ffnn.to_named_tensors(),
            seq_len: p.graph.k,
            scaler: p.scaler,
            phase: p.phase,
            autoencoder_config: p.autoencoder_config,
            embeddings: p.embeddings,
            graph: p.graph,
            labels: p.labels,
            rf: p.rf,
            et: p.et,
            cnn_config: p.cnn_config,
            ffnn_config: p.ffnn_config,
            calibrators: p.calibrators,
            diagnostics: p.diagnostics,
        }
    }
}

impl TryFrom<PipelineState> for Pipeline {
    type Error = Error;

    fn try_from(s: PipelineState) -> Result<Self> {
        let mut rng = seed::rng(0);
        let mut autoencoder = Autoencoder::new(s.lifted_dim, &s.autoencoder_config, 0);
        autoencoder.load_named_tensors(&s.autoencoder)?;
        let mut transformer = Transformer::new(&s.transformer_config, s.seq_len, &mut rng)?;
        transformer.load_named_tensors(&s.transformer)?;
        let mut cnn = CnnSeq::new(s.embeddings.dim(), &s.cnn_config, s.seq_len, &mut rng)?;
        cnn.load_named_tensors(&s.cnn)?;
        let mut ffnn = Ffnn::new(s.lifted_dim, &s.ffnn_config, &mut rng)?;
        ffnn.load_named_tensors(&s.ffnn)?;
        if s.calibrators.len() != BASE_LEARNERS.len() {
            return Err(Error::Artifact(format!(
                "expected 5 calibrators, found {}",
                s.calibrators.len()
            )));
        }
        Ok(Pipeline {
            scaler: s.scaler,
            phase: s.phase,
            autoencoder_config: s.autoencoder_config,
            autoencoder,
            embeddings: s.embeddings,
            graph: s.graph,
            labels: s.labels,
            rf: s.rf,
            et: s.et,
            transformer,
            cnn_config: s.cnn_config,
            cnn,
            ffnn_config: s.ffnn_config,
            ffnn,
            calibrators: s.calibrators,
            diagnostics: s.diagnostics,
        })
    }
}

/// Uncalibrated and calibrated base-learner probabilities for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseScores {
    pub raw: Vec<[f64; 5]>,
    pub calibrated: Vec<[f64; 5]>,
}

fn stack_columns(cols: [Vec<f64>; 5]) -> Vec<[f64; 5]> {
    (0..cols[0].len())
        .map(|i| [cols[0][i], cols[1][i], cols[2][i], cols[3][i], cols[4][i]])
        .collect()
}

fn fit_net<M: BinaryNet>(
    mut model: M,
    x: &SampleMatrix,
    y: &[u8],
    options: &TrainOptions,
    seed: u64,
) -> Result<(M, Vec<f64>)> {
    let trace = train(&mut model, x, y, options, seed)?;
    Ok((model, trace))
}

struct LearnerInputs<'a> {
    lifted: &'a Array2<f64>,
    flat: &'a SampleMatrix,
    sequences: &'a SampleMatrix,
    labels: &'a [u8],
}

fn select_labels(labels: &[u8], idx: &[usize]) -> Vec<u8> {
    idx.iter().map(|&i| labels[i]).collect()
}

impl Pipeline {
    /// Fit every stage on `data` (already augmented as required).
    pub fn fit(data: &Dataset, config: &RunConfig, seed: u64) -> Result<Pipeline> {
        let clock = Instant::now();
        let lap = |stage: &str| debug!("{stage} done at {:.1} s", clock.elapsed().as_secs_f64());
        let features = FeatureMatrix::prepare(data, None)?;
        let labels = features.labels.clone();
        let phase = train_alpha(
            features.values.view(),
            &labels,
            &config.phase,
            seed::derive(seed, stream::PHASE),
        )?;
        let lifted = phase.lift(features.values.view());
        let (autoencoder, embeddings, autoencoder_trace) = train_autoencoder(
            lifted.view(),
            &config.autoencoder,
            seed::derive(seed, stream::AUTOENCODER),
        )?;
        lap("autoencoder");
        let graph = build_knn(embeddings.matrix.view(), config.k_neighbors)?;
        let (graph, embeddings, refine_log) = refine(
            &graph,
            &embeddings,
            &labels,
            &config.refine,
            seed::derive(seed, stream::REFINE),
        )?;
        lap("graph refinement");
        let sequences = neighbor_sequences(&graph.neighbors, embeddings.matrix.view())?;
        let flat = SampleMatrix::flat(lifted.clone());
        let inputs = LearnerInputs {
            lifted: &lifted,
            flat: &flat,
            sequences: &sequences,
            labels: &labels,
        };
        let (inner_train, inner_hold) = stratified_holdout(
            &labels,
            config.calibration_holdout,
            seed::derive(seed, stream::INNER_SPLIT),
        )?;
        let hold_labels = select_labels(&labels, &inner_hold);

        let mut calibrators = Vec::with_capacity(5);
        let mut learner_traces = Vec::new();

        let forest = |mode: ForestMode, tag: u64, idx: Option<&[usize]>| -> Result<ForestModel> {
            let s = seed::derive(seed, tag);
            match idx {
                Some(idx) => fit_forest(
                    inputs.lifted.select(Axis(0), idx).view(),
                    &select_labels(inputs.labels, idx),
                    mode,
                    &config.forest,
                    seed::derive(s, 0),
                ),
                None => fit_forest(
                    inputs.lifted.view(),
                    inputs.labels,
                    mode,
                    &config.forest,
                    seed::derive(s, 1),
                ),
            }
        };
        let hold_lifted = lifted.select(Axis(0), &inner_hold);
        let mut forests = Vec::with_capacity(2);
        for (mode, tag) in [
            (ForestMode::RandomForest, stream::FOREST_RF),
            (ForestMode::ExtraTrees, stream::FOREST_ET),
        ] {
            let inner = forest(mode, tag, Some(&inner_train))?;
            let scores = inner.predict_proba(hold_lifted.view())?;
            calibrators.push(fit_isotonic(&scores, &hold_labels)?);
            forests.push(forest(mode, tag, None)?);
        }
        let et = forests.pop().expect("two forests");
        let rf = forests.pop().expect("two forests");

        lap("forests");
        let transformer_init =
            |tag_seed: u64| Transformer::new(&config.transformer, config.k_neighbors, &mut seed::rng(tag_seed));
        let cnn_init = |tag_seed: u64| {
            CnnSeq::new(
                embeddings.dim(),
                &config.cnn,
                config.k_neighbors,
                &mut seed::rng(tag_seed),
            )
        };
        let ffnn_init = |tag_seed: u64| Ffnn::new(lifted.ncols(), &config.ffnn, &mut seed::rng(tag_seed));

        let transformer = fit_calibrated(
            transformer_init,
            inputs.sequences,
            &inputs,
            (&inner_train, &inner_hold, &hold_labels),
            config,
            seed::derive(seed, stream::TRANSFORMER),
            &mut calibrators,
            &mut learner_traces,
        )?;
        lap("transformer");
        let cnn = fit_calibrated(
            cnn_init,
            inputs.sequences,
            &inputs,
            (&inner_train, &inner_hold, &hold_labels),
            config,
            seed::derive(seed, stream::CNN),
            &mut calibrators,
            &mut learner_traces,
        )?;
        lap("cnn");
        let ffnn = fit_calibrated(
            ffnn_init,
            inputs.flat,
            &inputs,
            (&inner_train, &inner_hold, &hold_labels),
            config,
            seed::derive(seed, stream::FFNN),
            &mut calibrators,
            &mut learner_traces,
        )?;

        lap("ffnn");
        let synthetic_rows = data.provenance.iter().filter(|p| **p == Provenance::Synthetic).count();
        Ok(Pipeline {
            scaler: features.scaler_stats,
            diagnostics: PipelineDiagnostics {
                rows: data.len(),
                synthetic_rows,
                phase_trace: phase.training_trace.clone(),
                autoencoder_trace,
                refine_log,
                learner_traces,
            },
            phase,
            autoencoder_config: config.autoencoder.clone(),
            autoencoder,
            embeddings,
            graph,
            labels,
            rf,
            et,
            transformer,
            cnn_config: config.cnn.clone(),
            cnn,
            ffnn_config: config.ffnn.clone(),
            ffnn,
            calibrators,
        })
    }

    /// Lifted features and neighbor sequences for new rows.
    pub fn transform(&self, records: &[RawRecord]) -> Result<(Array2<f64>, SampleMatrix)> {
        let data = Dataset::original(records.to_vec());
        let features = FeatureMatrix::prepare(&data, Some(&self.scaler))?;
        let lifted = self.phase.lift(features.values.view());
        let emb = self.autoencoder.encode(lifted.view());
        let neighbors = query_knn(self.embeddings.matrix.view(), emb.view(), self.graph.k)?;
        let sequences = neighbor_sequences(&neighbors, self.embeddings.matrix.view())?;
        Ok((lifted, sequences))
    }

    pub fn score(&self, records: &[RawRecord]) -> Result<BaseScores> {
        if records.is_empty() {
            return Ok(BaseScores {
                raw: Vec::new(),
                calibrated: Vec::new(),
            });
        }
        let (lifted, sequences) = self.transform(records)?;
        let flat = SampleMatrix::flat(lifted.clone());
        let raw = [
            self.rf.predict_proba(lifted.view())?,
            self.et.predict_proba(lifted.view())?,
            self.transformer.predict_proba(&sequences)?,
            self.cnn.predict_proba(&sequences)?,
            self.ffnn.predict_proba(&flat)?,
        ];
        let calibrated = [0, 1, 2, 3, 4].map(|j| self.calibrators[j].transform(&raw[j]));
        Ok(BaseScores {
            raw: stack_columns(raw),
            calibrated: stack_columns(calibrated),
        })
    }
}

/// Train on the inner split, calibrate on the inner holdout, then refit on
/// all rows of the pipeline.
#[allow(clippy::too_many_arguments)]
fn fit_calibrated<M: BinaryNet>(
    init: impl Fn(u64) -> Result<M>,
    x: &SampleMatrix,
    inputs: &LearnerInputs<'_>,
    (inner_train, inner_hold, hold_labels): (&[usize], &[usize], &[u8]),
    config: &RunConfig,
    seed: u64,
    calibrators: &mut Vec<IsotonicCalibrator>,
    traces: &mut Vec<Vec<f64>>,
) -> Result<M> {
    let (inner, _) = fit_net(
        init(seed::derive(seed, 0))?,
        &x.gather(inner_train),
        &select_labels(inputs.labels, inner_train),
        &config.train,
        seed::derive(seed, 1),
    )?;
    let scores = inner.predict_proba(&x.gather(inner_hold))?;
    calibrators.push(fit_isotonic(&scores, hold_labels)?);
    let (model, trace) = fit_net(
        init(seed::derive(seed, 2))?,
        x,
        inputs.labels,
        &config.train,
        seed::derive(seed, 3),
    )?;
    info!("{} trained, final epoch loss {:?}", model.name(), trace.last());
    traces.push(trace);
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetric {
    pub fold: usize,
    pub model: String,
    pub f1: f64,
    pub auc: f64,
    pub brier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model: String,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
    /// Metrics over the pooled out-of-fold predictions.
    pub oof_f1: f64,
    pub oof_auc: f64,
    pub oof_brier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OofRecord {
    pub index: usize,
    pub fold: usize,
    pub label: u8,
    pub provenance: Provenance,
    pub base: [f64; 5],
    pub meta: f64,
}

/// Per-fold concept graph snapshot and training traces.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldGraph {
    pub fold: usize,
    pub labels: Vec<u8>,
    pub neighbors: Vec<Vec<usize>>,
    pub modularity: f64,
    pub avg_degree: f64,
    pub alpha: f64,
    pub diagnostics: PipelineDiagnostics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub augmentation: AugmentMode,
    pub folds: usize,
    pub rows: usize,
    pub fold_metrics: Vec<FoldMetric>,
    pub summary: Vec<ModelSummary>,
    pub oof: Vec<OofRecord>,
    pub fold_graphs: Vec<FoldGraph>,
    /// Meta-learner fitted on all out-of-fold meta features.
    pub meta_learner: MetaLearner,
    pub warnings: Vec<String>,
}

impl CvReport {
    pub fn summary_for(&self, model: &str) -> Option<&ModelSummary> {
        self.summary.iter().find(|s| s.model == model)
    }

    pub fn oof_meta_features(&self) -> Array2<f64> {
        build_meta(&self.oof.iter().map(|r| r.base).collect::<Vec<_>>())
    }
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn metrics(fold: usize, model: &str, y: &[u8], p: &[f64]) -> Result<FoldMetric> {
    Ok(FoldMetric {
        fold,
        model: model.to_string(),
        f1: f1(y, p, DECISION_THRESHOLD)?,
        auc: auc(y, p)?,
        brier: brier(y, p)?,
    })
}

fn augment(data: &Dataset, config: &RunConfig, seed: u64) -> Result<(Dataset, Option<GaussianMixture>)> {
    augment_minority(data, config.synthetic_count, &config.gmm, seed)
}

/// Stratified out-of-fold training and evaluation of the whole stack.
pub fn run_cv(dataset: &Dataset, config: &RunConfig) -> Result<CvReport> {
    config.validate()?;
    let seed = config.seed;
    let (pool, _) = match config.augmentation {
        AugmentMode::Global => augment(dataset, config, seed::derive(seed, stream::AUGMENT))?,
        AugmentMode::InFold => (dataset.clone(), None),
    };
    let labels = pool.labels();
    let folds = stratified_kfold(&labels, config.folds, seed::derive(seed, stream::FOLDS))?;

    let mut oof: Vec<Option<OofRecord>> = vec![None; pool.len()];
    let mut fold_graphs = Vec::with_capacity(folds.len());
    let mut fold_metrics = Vec::new();
    for (f, val_idx) in folds.iter().enumerate() {
        let fold_seed = seed::derive(seed, stream::FOLD_BASE + f as u64);
        let train_idx = crate::split::complement(pool.len(), val_idx);
        let train_set = pool.subset(&train_idx);
        let train_set = match config.augmentation {
            AugmentMode::InFold => augment(&train_set, config, seed::derive(fold_seed, stream::AUGMENT))?.0,
            AugmentMode::Global => train_set,
        };
        info!(
            "fold {}/{}: {} training rows, {} validation rows",
            f + 1,
            folds.len(),
            train_set.len(),
            val_idx.len()
        );
        let pipeline = Pipeline::fit(&train_set, config, fold_seed)?;
        let val = pool.subset(val_idx);
        let scores = pipeline.score(&val.records)?;
        let val_labels = val.labels();
        for (j, name) in BASE_LEARNERS.iter().enumerate() {
            let p: Vec<f64> = scores.calibrated.iter().map(|r| r[j]).collect();
            fold_metrics.push(metrics(f, name, &val_labels, &p)?);
        }
        for (pos, &i) in val_idx.iter().enumerate() {
            oof[i] = Some(OofRecord {
                index: i,
                fold: f,
                label: labels[i],
                provenance: pool.provenance[i],
                base: scores.calibrated[pos],
                meta: f64::NAN,
            });
        }
        fold_graphs.push(FoldGraph {
            fold: f,
            labels: pipeline.labels.clone(),
            neighbors: pipeline.graph.neighbors.clone(),
            modularity: pipeline.graph.modularity,
            avg_degree: pipeline.graph.avg_degree,
            alpha: pipeline.phase.alpha,
            diagnostics: pipeline.diagnostics,
        });
    }
    let mut oof: Vec<OofRecord> = oof
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.ok_or_else(|| Error::Stratification(format!("row {i} received no out-of-fold prediction"))))
        .collect::<Result<_>>()?;

    let meta_x = build_meta(&oof.iter().map(|r| r.base).collect::<Vec<_>>());
    let mut warnings = Vec::new();
    // Each fold's meta score comes from a meta-learner fitted on the other folds.
    for (f, val_idx) in folds.iter().enumerate() {
        let rest = crate::split::complement(pool.len(), val_idx);
        let learner = fit_meta_learner(
            meta_x.select(Axis(0), &rest).view(),
            &select_labels(&labels, &rest),
            &config.meta,
        )?;
        if !learner.converged {
            warnings.push(format!(
                "fold {f} meta-learner hit the iteration cap (gradient norm {:.3e})",
                learner.grad_norm
            ));
        }
        let p = learner.predict(meta_x.select(Axis(0), val_idx).view());
        for (&i, &v) in val_idx.iter().zip(&p) {
            oof[i].meta = v;
        }
        fold_metrics.push(metrics(f, META_MODEL, &select_labels(&labels, val_idx), &p)?);
    }
    let meta_learner = fit_meta_learner(meta_x.view(), &labels, &config.meta)?;
    if !meta_learner.converged {
        warnings.push(format!(
            "meta-learner hit the iteration cap (gradient norm {:.3e})",
            meta_learner.grad_norm
        ));
    }
    fold_metrics.sort_by_key(|m| m.fold);

    let mut summary = Vec::new();
    for (j, name) in BASE_LEARNERS.iter().chain([&META_MODEL]).enumerate() {
        let per_fold: Vec<&FoldMetric> = fold_metrics.iter().filter(|m| m.model == *name).collect();
        let (f1_mean, f1_std) = mean_std(&per_fold.iter().map(|m| m.f1).collect::<Vec<_>>());
        let (auc_mean, auc_std) = mean_std(&per_fold.iter().map(|m| m.auc).collect::<Vec<_>>());
        let p: Vec<f64> = oof.iter().map(|r| if j < 5 { r.base[j] } else { r.meta }).collect();
        summary.push(ModelSummary {
            model: name.to_string(),
            f1_mean,
            f1_std,
            auc_mean,
            auc_std,
            oof_f1: f1(&labels, &p, DECISION_THRESHOLD)?,
            oof_auc: auc(&labels, &p)?,
            oof_brier: brier(&labels, &p)?,
        });
    }
    Ok(CvReport {
        augmentation: config.augmentation,
        folds: folds.len(),
        rows: pool.len(),
        fold_metrics,
        summary,
        oof,
        fold_graphs,
        meta_learner,
        warnings,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub base: [f64; 5],
    pub meta: f64,
}

#[derive(Clone, Debug)]
pub struct PredictOutput {
    pub rows: Vec<Prediction>,
    pub seconds: f64,
}

impl PredictOutput {
    pub fn rows_per_second(&self) -> f64 {
        if self.seconds > 0.0 {
            self.rows.len() as f64 / self.seconds
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackArtifact {
    pub format_version: u32,
    pub config: RunConfig,
    pub pipeline: Pipeline,
    pub gmm: Option<GaussianMixture>,
    pub meta: MetaLearner,
    pub report: Option<CvReport>,
    /// Meta probabilities of the original training rows, scored through `predict`.
    #[serde(with = "crate::artifact::f64_b64")]
    pub training_predictions: Vec<f64>,
}

#[derive(Deserialize)]
struct Header {
    format_version: Option<u32>,
}

impl StackArtifact {
    pub fn predict(&self, records: &[RawRecord]) -> Result<PredictOutput> {
        let start = Instant::now();
        let scores = self.pipeline.score(records)?;
        let meta = build_meta(&scores.calibrated);
        let probs = self.meta.predict(meta.view());
        let rows = scores
            .calibrated
            .into_iter()
            .zip(probs)
            .map(|(base, meta)| Prediction { base, meta })
            .collect();
        Ok(PredictOutput {
            rows,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    pub fn report(&self) -> Result<&CvReport> {
        self.report
            .as_ref()
            .ok_or_else(|| Error::Artifact("artifact has no training report".into()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let header: Header =
            serde_json::from_str(text).map_err(|e| Error::Artifact(format!("unreadable artifact: {e}")))?;
        match header.format_version {
            None => return Err(Error::Artifact("artifact has no format_version".into())),
            Some(v) if v != FORMAT_VERSION => {
                return Err(Error::ArtifactVersion {
                    found: v,
                    expected: FORMAT_VERSION,
                })
            }
            Some(_) => {}
        }
        serde_json::from_str(text).map_err(|e| Error::Artifact(format!("malformed artifact: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Refit every stage on the full (augmented) dataset and pair it with the
/// meta-learner from the out-of-fold fit.
pub fn refit_full(dataset: &Dataset, config: &RunConfig, report: CvReport) -> Result<StackArtifact> {
    config.validate()?;
    let (full, gmm) = augment(dataset, config, seed::derive(config.seed, stream::AUGMENT))?;
    info!("refitting on {} rows", full.len());
    let pipeline = Pipeline::fit(&full, config, seed::derive(config.seed, stream::REFIT))?;
    let mut artifact = StackArtifact {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        pipeline,
        gmm,
        meta: report.meta_learner.clone(),
        report: Some(report),
        training_predictions: Vec::new(),
    };
    let scored = artifact.predict(&dataset.records)?;
    artifact.training_predictions = scored.rows.iter().map(|r| r.meta).collect();
    Ok(artifact)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn meta_row_examples() {
        let row = meta_row(&[0.5; 5]);
        assert_eq!(&row[5..10], &[0.0; 5]);
        assert_eq!(&row[10..15], &[1.0; 5]);
        assert_eq!((row[15], row[16]), (0.5, 0.0));

        let row = meta_row(&[1e-9, 0.5, 0.5, 0.5, 0.5]);
        assert_eq!(row[5], (1e-6f64 / (1.0 - 1e-6)).ln());

        let row = meta_row(&[0.2, 0.4, 0.6, 0.8, 1.0]);
        assert!((row[15] - 0.6).abs() < 1e-15);
        assert!((row[16] - 0.08f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn separable_meta_fit() {
        let x = array![[-2.0], [-1.0], [-0.5], [0.5], [1.0], [2.0]];
        let y = [0, 0, 0, 1, 1, 1];
        let m = fit_meta_learner(x.view(), &y, &MetaConfig::default()).unwrap();
        assert!(m.converged);
        assert!(m.grad_norm < 1e-6);
        let p = m.predict(x.view());
        assert!(p.iter().zip(&y).all(|(&p, &t)| (p >= 0.5) == (t == 1)));
        assert!(m.weights[0].is_finite());
    }

    #[test]
    fn meta_requires_both_classes() {
        let x = array![[0.0], [1.0]];
        assert!(matches!(
            fit_meta_learner(x.view(), &[1, 1], &MetaConfig::default()),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let err = StackArtifact::from_json(r#"{"format_version": 99}"#).unwrap_err();
        assert!(matches!(err, Error::ArtifactVersion { found: 99, expected: 1 }));
        assert!(matches!(StackArtifact::from_json("{}"), Err(Error::Artifact(_))));
    }
}
