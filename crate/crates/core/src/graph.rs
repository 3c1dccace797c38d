//! Concept graph: autoencoder embeddings, exact k-NN edges, BCE refinement of
//! the embeddings through a mean-neighbor classifier, and graph statistics.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::write_text;
use crate::error::{Error, Result};
use crate::neuralkernel::layers::{relu, relu_backward, sigmoid, Dense};
use crate::neuralkernel::tensor::ParamRef;
use crate::neuralkernel::{Adam, AdamConfig, ParamSet, SampleMatrix};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Autoencoder,
    Refined,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embeddings {
    #[serde(with = "crate::artifact::matrix_b64")]
    pub matrix: Array2<f64>,
    pub source: EmbeddingSource,
}

impl Embeddings {
    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            hidden_dims: vec![256, 192],
            embedding_dim: 128,
            epochs: 100,
            lr: 1e-3,
        }
    }
}

/// Dense layers with ReLU between them and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

pub struct MlpCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    fn init(dims: &[usize], rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        Mlp {
            layers: dims.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect(),
        }
    }

    fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim()))
                .collect(),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(h.view());
            cache.inputs.push(h);
            h = if i == last { z.clone() } else { relu(&z) };
            cache.pre.push(z);
        }
        (h, cache)
    }

    pub fn backward(&self, cache: &MlpCache, dy: &Array2<f64>, grad: &mut Mlp) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i != last {
                d = relu_backward(&cache.pre[i], &d);
            }
            d = self.layers[i].backward(cache.inputs[i].view(), d.view(), &mut grad.layers[i]);
        }
        d
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.params(&format!("{prefix}.dense{i}"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        for l in &mut self.layers {
            l.params_mut(out);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl ParamSet for Autoencoder {
    fn params(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        self.encoder.collect("encoder", &mut out);
        self.decoder.collect("decoder", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        self.encoder.collect_mut(&mut out);
        self.decoder.collect_mut(&mut out);
        out
    }
}

impl Autoencoder {
    pub fn new(input_dim: usize, config: &AutoencoderConfig, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let mut dims = vec![input_dim];
        dims.extend(&config.hidden_dims);
        dims.push(config.embedding_dim);
        let encoder = Mlp::init(&dims, &mut rng);
        dims.reverse();
        let decoder = Mlp::init(&dims, &mut rng);
        Autoencoder { encoder, decoder }
    }

    pub fn encode(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.encoder.forward(x).0
    }

    pub fn zeros_like(&self) -> Self {
        Autoencoder {
            encoder: self.encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    /// Mean squared reconstruction error and its gradient.
    pub fn loss_and_grad(&self, x: ArrayView2<f64>) -> (f64, Autoencoder) {
        let (code, enc_cache) = self.encoder.forward(x);
        let (recon, dec_cache) = self.decoder.forward(code.view());
        let diff = &recon - &x;
        let count = diff.len() as f64;
        let loss = diff.iter().map(|v| v * v).sum::<f64>() / count;
        let drecon = diff * (2.0 / count);
        let mut grad = self.zeros_like();
        let dcode = self.decoder.backward(&dec_cache, &drecon, &mut grad.decoder);
        self.encoder.backward(&enc_cache, &dcode, &mut grad.encoder);
        (loss, grad)
    }
}

/// Full-batch Adam on reconstruction MSE. Returns the model, the encoder
/// embeddings of `x`, and the loss before each update plus the final loss.
pub fn train_autoencoder(
    x: ArrayView2<f64>,
    config: &AutoencoderConfig,
    seed: u64,
) -> Result<(Autoencoder, Embeddings, Vec<f64>)> {
    if x.nrows() < 10 {
        return Err(Error::InsufficientData(format!(
            "autoencoder needs at least 10 rows, got {}",
            x.nrows()
        )));
    }
    let mut model = Autoencoder::new(x.ncols(), config, seed);
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr));
    let mut trace = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..config.epochs {
        let (loss, grad) = model.loss_and_grad(x);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                stage: "autoencoder".into(),
                epoch,
            });
        }
        trace.push(loss);
        let grads: Vec<&[f64]> = grad.params().into_iter().map(|p| p.data).collect();
        adam.step(model.params_mut(), &grads);
    }
    let (final_loss, _) = model.loss_and_grad(x);
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            stage: "autoencoder".into(),
            epoch: config.epochs,
        });
    }
    trace.push(final_loss);
    let matrix = model.encode(x);
    Ok((
        model,
        Embeddings {
            matrix,
            source: EmbeddingSource::Autoencoder,
        },
        trace,
    ))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineState {
    pub w: Vec<f64>,
    pub b: f64,
    pub iterations: usize,
    pub rebuilds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptGraph {
    /// Out-neighbors of each node, nearest first.
    pub neighbors: Vec<Vec<usize>>,
    pub k: usize,
    pub modularity: f64,
    pub avg_degree: f64,
    pub refine_state: RefineState,
}

impl ConceptGraph {
    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Recompute modularity (labels as the partition) and average degree.
    pub fn update_stats(&mut self, labels: &[u8]) -> Result<()> {
        let partition: Vec<usize> = labels.iter().map(|&l| usize::from(l)).collect();
        self.modularity = modularity(&self.neighbors, &partition)?;
        self.avg_degree = average_degree(&self.neighbors);
        Ok(())
    }
}

fn squared_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest rows of `reference` to `query` by Euclidean distance, ties
/// broken by ascending index, optionally excluding one index.
fn nearest(
    reference: ArrayView2<f64>,
    query: ndarray::ArrayView1<f64>,
    k: usize,
    exclude: Option<usize>,
) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = reference
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != exclude)
        .map(|(j, r)| (squared_distance(query, r), j))
        .collect();
    let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if cand.len() > k {
        cand.select_nth_unstable_by(k, order);
        cand.truncate(k);
    }
    cand.sort_by(order);
    cand.into_iter().map(|(_, j)| j).collect()
}

/// Exact k-NN graph over embedding rows.
pub fn build_knn(emb: ArrayView2<f64>, k: usize) -> Result<ConceptGraph> {
    let n = emb.nrows();
    if k == 0 || n <= k {
        return Err(Error::Parameter(format!(
            "k-NN graph needs n > k ≥ 1, got n={n}, k={k}"
        )));
    }
    if emb.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("embeddings contain non-finite values".into()));
    }
    let neighbors: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| nearest(emb, emb.row(i), k, Some(i)))
        .collect();
    let avg_degree = average_degree(&neighbors);
    Ok(ConceptGraph {
        neighbors,
        k,
        modularity: 0.0,
        avg_degree,
        refine_state: RefineState::default(),
    })
}

/// k nearest reference rows for each query row (no self exclusion).
pub fn query_knn(reference: ArrayView2<f64>, queries: ArrayView2<f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    if reference.nrows() < k || k == 0 {
        return Err(Error::Parameter(format!(
            "k-NN lookup needs at least k={k} reference rows, got {}",
            reference.nrows()
        )));
    }
    if reference.ncols() != queries.ncols() {
        return Err(Error::Shape(format!(
            "reference width {} vs query width {}",
            reference.ncols(),
            queries.ncols()
        )));
    }
    Ok((0..queries.nrows())
        .into_par_iter()
        .map(|i| nearest(reference, queries.row(i), k, None))
        .collect())
}

fn undirected_edges(neighbors: &[Vec<usize>]) -> Vec<(usize, usize)> {
    let mut edges: Vec<(usize, usize)> = neighbors
        .iter()
        .enumerate()
        .flat_map(|(i, ns)| ns.iter().filter(move |&&j| j != i).map(move |&j| (i.min(j), i.max(j))))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

/// Average degree of the symmetrized simple graph.
pub fn average_degree(neighbors: &[Vec<usize>]) -> f64 {
    if neighbors.is_empty() {
        return 0.0;
    }
    2.0 * undirected_edges(neighbors).len() as f64 / neighbors.len() as f64
}

/// Newman modularity of `partition` on the symmetrized simple graph.
pub fn modularity(neighbors: &[Vec<usize>], partition: &[usize]) -> Result<f64> {
    if partition.len() != neighbors.len() {
        return Err(Error::Shape(format!(
            "partition covers {} nodes, graph has {}",
            partition.len(),
            neighbors.len()
        )));
    }
    let edges = undirected_edges(neighbors);
    if edges.is_empty() {
        return Err(Error::UndefinedMetric("modularity of a graph without edges".into()));
    }
    let m = edges.len() as f64;
    let communities = partition.iter().copied().max().map_or(0, |c| c + 1);
    let mut internal = vec![0.0; communities];
    let mut degree = vec![0.0; communities];
    for &(a, b) in &edges {
        degree[partition[a]] += 1.0;
        degree[partition[b]] += 1.0;
        if partition[a] == partition[b] {
            internal[partition[a]] += 1.0;
        }
    }
    Ok(internal
        .iter()
        .zip(&degree)
        .map(|(&e, &d)| e / m - (d / (2.0 * m)).powi(2))
        .sum())
}

/// Mean of each node's neighbor embeddings.
fn aggregate(neighbors: &[Vec<usize>], emb: ArrayView2<f64>) -> Array2<f64> {
    let mut agg = Array2::zeros((neighbors.len(), emb.ncols()));
    for (mut row, ns) in agg.rows_mut().into_iter().zip(neighbors) {
        for &j in ns {
            row += &emb.row(j);
        }
        row /= ns.len() as f64;
    }
    agg
}

/// Gradients of the node-classification loss.
pub struct RefineGrad {
    pub w: Array1<f64>,
    pub b: f64,
    pub emb: Array2<f64>,
}

/// Mean BCE of ŷᵢ = σ(w·mean(neighbor embeddings of i) + b), with gradients.
pub fn refine_loss_and_grad(
    neighbors: &[Vec<usize>],
    emb: ArrayView2<f64>,
    labels: &[u8],
    w: &Array1<f64>,
    b: f64,
) -> (f64, RefineGrad) {
    let n = neighbors.len() as f64;
    let agg = aggregate(neighbors, emb);
    let logits = agg.dot(w) + b;
    let mut loss = 0.0;
    let mut dz = Array1::zeros(neighbors.len());
    for ((d, &z), &y) in dz.iter_mut().zip(logits.iter()).zip(labels) {
        let y = f64::from(y);
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        *d = (sigmoid(z) - y) / n;
    }
    let gw = agg.t().dot(&dz);
    let gb = dz.sum();
    let mut gemb = Array2::zeros(emb.raw_dim());
    for (i, ns) in neighbors.iter().enumerate() {
        let scale = dz[i] / ns.len() as f64;
        for &j in ns {
            gemb.row_mut(j).scaled_add(scale, w);
        }
    }
    (
        loss / n,
        RefineGrad {
            w: gw,
            b: gb,
            emb: gemb,
        },
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub iterations: usize,
    pub rebuild_every: usize,
    pub lr: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            iterations: 50,
            rebuild_every: 10,
            lr: 1e-2,
        }
    }
}

/// One row of the refinement log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineStep {
    pub iteration: usize,
    pub bce: f64,
    pub modularity: f64,
    pub avg_degree: f64,
}

/// Refine embeddings and classifier by full-pass gradient steps on BCE,
/// rebuilding the k-NN edges from the current embeddings every
/// `rebuild_every` iterations. The log records the state before each step
/// followed by the final state.
pub fn refine(
    graph: &ConceptGraph,
    emb: &Embeddings,
    labels: &[u8],
    config: &RefineConfig,
    seed: u64,
) -> Result<(ConceptGraph, Embeddings, Vec<RefineStep>)> {
    if labels.len() != graph.len() || emb.len() != graph.len() {
        return Err(Error::Shape(format!(
            "graph has {} nodes, embeddings {} rows, labels {}",
            graph.len(),
            emb.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Data("refinement labels must be 0 or 1".into()));
    }
    if config.iterations == 0 || config.rebuild_every == 0 {
        return Err(Error::Parameter(
            "refinement needs iterations ≥ 1 and rebuild_every ≥ 1".into(),
        ));
    }
    let dim = emb.dim();
    let mut rng = seed::rng(seed);
    let bound = 1.0 / (dim as f64).sqrt();
    let mut w = Array1::from_shape_simple_fn(dim, || rng.random_range(-bound..bound));
    let mut b = 0.0;
    let mut matrix = emb.matrix.clone();
    let mut current = graph.clone();
    current.update_stats(labels)?;
    let mut log = Vec::with_capacity(config.iterations + 1);
    let mut rebuilds = 0;

    for it in 0..config.iterations {
        let (loss, grad) = refine_loss_and_grad(&current.neighbors, matrix.view(), labels, &w, b);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                stage: "graph refinement".into(),
                epoch: it,
            });
        }
        log.push(RefineStep {
            iteration: it,
            bce: loss,
            modularity: current.modularity,
            avg_degree: current.avg_degree,
        });
        w.scaled_add(-config.lr, &grad.w);
        b -= config.lr * grad.b;
        matrix.scaled_add(-config.lr, &grad.emb);
        if (it + 1) % config.rebuild_every == 0 {
            current = build_knn(matrix.view(), graph.k)?;
            current.update_stats(labels)?;
            rebuilds += 1;
        }
    }
    let (final_loss, _) = refine_loss_and_grad(&current.neighbors, matrix.view(), labels, &w, b);
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            stage: "graph refinement".into(),
            epoch: config.iterations,
        });
    }
    log.push(RefineStep {
        iteration: config.iterations,
        bce: final_loss,
        modularity: current.modularity,
        avg_degree: current.avg_degree,
    });
    current.refine_state = RefineState {
        w: w.to_vec(),
        b,
        iterations: config.iterations,
        rebuilds,
    };
    Ok((
        current,
        Embeddings {
            matrix,
            source: EmbeddingSource::Refined,
        },
        log,
    ))
}

/// Stack each node's neighbor embeddings (nearest first) into a sequence sample.
pub fn neighbor_sequences(neighbors: &[Vec<usize>], emb: ArrayView2<f64>) -> Result<SampleMatrix> {
    let k = neighbors.first().map_or(0, Vec::len);
    let mut data = Array2::zeros((neighbors.len() * k, emb.ncols()));
    for (i, ns) in neighbors.iter().enumerate() {
        if ns.len() != k {
            return Err(Error::Shape(format!(
                "node {i} has {} neighbors, expected {k}",
                ns.len()
            )));
        }
        for (t, &j) in ns.iter().enumerate() {
            if j >= emb.nrows() {
                return Err(Error::Shape(format!(
                    "neighbor index {j} outside {} embedding rows",
                    emb.nrows()
                )));
            }
            data.row_mut(i * k + t).assign(&emb.row(j));
        }
    }
    Ok(SampleMatrix::sequences(data, k))
}

/// Graphviz DOT text: nodes colored red (label 1) or blue (label 0), one
/// directed edge per k-NN link.
pub fn to_dot(neighbors: &[Vec<usize>], labels: &[u8]) -> String {
    let mut out = String::from("digraph concept_graph {\n  node [shape=point, style=filled];\n");
    for (i, &l) in labels.iter().enumerate() {
        let color = if l == 1 { "red" } else { "blue" };
        let _ = writeln!(out, "  n{i} [color=\"{color}\"];");
    }
    for (i, ns) in neighbors.iter().enumerate() {
        for &j in ns {
            let _ = writeln!(out, "  n{i} -> n{j};");
        }
    }
    out.push_str("}\n");
    out
}

pub fn export_dot(neighbors: &[Vec<usize>], labels: &[u8], path: &Path) -> Result<()> {
    if labels.len() != neighbors.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} nodes",
            labels.len(),
            neighbors.len()
        )));
    }
    write_text(path, &to_dot(neighbors, labels))
}
