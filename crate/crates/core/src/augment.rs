//! Full-covariance Gaussian mixture fitted by EM, used to synthesize minority-class rows.

use nalgebra::{Cholesky, DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{impute_zeros, Dataset, Provenance, RawRecord, N_RAW_FEATURES};
use crate::error::{Error, Result};
use crate::seed;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmOptions {
    pub components: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Added to every covariance diagonal in each M-step.
    pub reg_covar: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions {
            components: 5,
            max_iter: 200,
            tol: 1e-3,
            reg_covar: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    /// Row-major d×d matrices.
    pub covariances: Vec<Vec<f64>>,
    pub log_likelihood_trace: Vec<f64>,
}

impl GaussianMixture {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn covariance(&self, c: usize) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.covariances[c])
    }

    fn cholesky_factors(&self) -> Result<Vec<DMatrix<f64>>> {
        (0..self.components())
            .map(|c| {
                Cholesky::new(self.covariance(c))
                    .map(|ch| ch.l())
                    .ok_or_else(|| Error::Numeric(format!("covariance of component {c} is not positive definite")))
            })
            .collect()
    }

    /// Total log-likelihood of `rows` under the mixture.
    pub fn log_likelihood(&self, rows: ArrayView2<f64>) -> Result<f64> {
        let data = to_points(rows);
        let factors = self.cholesky_factors()?;
        Ok(e_step(self, &factors, &data).0)
    }
}

fn to_points(rows: ArrayView2<f64>) -> Vec<DVector<f64>> {
    rows.rows()
        .into_iter()
        .map(|r| DVector::from_iterator(r.len(), r.iter().copied()))
        .collect()
}

fn log_gaussian(x: &DVector<f64>, mean: &DVector<f64>, chol_l: &DMatrix<f64>) -> f64 {
    let d = x.len();
    let diff = x - mean;
    let z = chol_l
        .solve_lower_triangular(&diff)
        .expect("cholesky factor has a positive diagonal");
    let log_det: f64 = (0..d).map(|i| chol_l[(i, i)].ln()).sum::<f64>() * 2.0;
    -0.5 * (d as f64 * LN_2PI + log_det + z.norm_squared())
}

/// Returns the total log-likelihood and the row-normalized responsibilities.
fn e_step(gmm: &GaussianMixture, factors: &[DMatrix<f64>], data: &[DVector<f64>]) -> (f64, Vec<Vec<f64>>) {
    let k = gmm.components();
    let means: Vec<DVector<f64>> = gmm.means.iter().map(|m| DVector::from_column_slice(m)).collect();
    let log_w: Vec<f64> = gmm.weights.iter().map(|w| w.ln()).collect();
    let mut total = 0.0;
    let mut resp = Vec::with_capacity(data.len());
    for x in data {
        let logp: Vec<f64> = (0..k)
            .map(|c| log_w[c] + log_gaussian(x, &means[c], &factors[c]))
            .collect();
        let max = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logp.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse;
        resp.push(logp.iter().map(|v| (v - lse).exp()).collect());
    }
    (total, resp)
}

fn m_step(data: &[DVector<f64>], resp: &[Vec<f64>], k: usize, reg: f64) -> GaussianMixture {
    let n = data.len();
    let d = data[0].len();
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covariances = Vec::with_capacity(k);
    for c in 0..k {
        let nk: f64 = resp.iter().map(|r| r[c]).sum::<f64>() + 10.0 * f64::EPSILON;
        let mut mean = DVector::zeros(d);
        for (x, r) in data.iter().zip(resp) {
            mean.axpy(r[c], x, 1.0);
        }
        mean /= nk;
        let mut cov = DMatrix::zeros(d, d);
        for (x, r) in data.iter().zip(resp) {
            let diff = x - &mean;
            cov.ger(r[c], &diff, &diff, 1.0);
        }
        cov /= nk;
        // exact symmetry
        for i in 0..d {
            for j in 0..i {
                let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
            cov[(i, i)] += reg;
        }
        weights.push(nk / n as f64);
        means.push(mean.iter().copied().collect());
        covariances.push(cov.transpose().iter().copied().collect());
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    GaussianMixture {
        weights,
        means,
        covariances,
        log_likelihood_trace: Vec::new(),
    }
}

/// k-means++ seeding followed by hard assignment to the nearest seed.
fn initial_responsibilities(data: &[DVector<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed);
    let n = data.len();
    let mut centers: Vec<usize> = vec![rng.random_range(0..n)];
    let mut dist2: Vec<f64> = data.iter().map(|x| (x - &data[centers[0]]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = dist2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in dist2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(next);
        for (i, x) in data.iter().enumerate() {
            dist2[i] = dist2[i].min((x - &data[next]).norm_squared());
        }
    }
    data.iter()
        .map(|x| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, &ci) in centers.iter().enumerate() {
                let d = (x - &data[ci]).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            let mut r = vec![0.0; k];
            r[best] = 1.0;
            r
        })
        .collect()
}

/// Fit a full-covariance mixture by EM. Iteration stops once the
/// log-likelihood gain drops below `tol` or after `max_iter` M-steps.
pub fn fit_gmm(rows: ArrayView2<f64>, options: &GmmOptions, seed: u64) -> Result<GaussianMixture> {
    let k = options.components;
    let (n, d) = rows.dim();
    if k == 0 {
        return Err(Error::Parameter("mixture needs at least one component".into()));
    }
    if d == 0 {
        return Err(Error::Parameter("mixture needs at least one feature".into()));
    }
    if n < k {
        return Err(Error::InsufficientData(format!(
            "{n} rows cannot support {k} mixture components"
        )));
    }
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("mixture input contains non-finite values".into()));
    }

    let data = to_points(rows);
    let mut gmm = m_step(&data, &initial_responsibilities(&data, k, seed), k, options.reg_covar);
    let mut trace = Vec::new();
    for iter in 0..=options.max_iter {
        let factors = gmm.cholesky_factors()?;
        let (ll, resp) = e_step(&gmm, &factors, &data);
        if !ll.is_finite() {
            return Err(Error::Numeric(format!(
                "EM log-likelihood became non-finite at iteration {iter}"
            )));
        }
        trace.push(ll);
        let converged = trace.len() > 1 && ll - trace[trace.len() - 2] < options.tol;
        if converged || iter == options.max_iter {
            break;
        }
        gmm = m_step(&data, &resp, k, options.reg_covar);
    }
    gmm.log_likelihood_trace = trace;
    Ok(gmm)
}

/// Draw `n` rows: a component is picked in proportion to the weights and a
/// point is sampled through that component's Cholesky factor.
pub fn sample_gmm(gmm: &GaussianMixture, n: usize, seed: u64) -> Result<Array2<f64>> {
    let d = gmm.dim();
    let mut out = Array2::zeros((n, d));
    if n == 0 {
        return Ok(out);
    }
    let factors = gmm.cholesky_factors()?;
    let mut rng = seed::rng(seed);
    for mut row in out.rows_mut() {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut comp = gmm.components() - 1;
        for (c, &w) in gmm.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                comp = c;
                break;
            }
        }
        let z = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let x = &factors[comp] * z;
        for j in 0..d {
            row[j] = gmm.means[comp][j] + x[j];
        }
    }
    Ok(out)
}

/// Append `n_synth` synthetic minority rows drawn from a mixture fitted to the
/// imputed minority-class features. Samples are clipped to the observed
/// minority range per column. Returns the fitted mixture when one was needed.
pub fn augment_minority(
    dataset: &Dataset,
    n_synth: usize,
    options: &GmmOptions,
    seed: u64,
) -> Result<(Dataset, Option<GaussianMixture>)> {
    if n_synth == 0 {
        return Ok((dataset.clone(), None));
    }
    let positives = dataset.records.iter().filter(|r| r.outcome == 1).count();
    let negatives = dataset.len() - positives;
    let minority: u8 = if positives <= negatives { 1 } else { 0 };

    let minority_rows: Vec<RawRecord> = impute_zeros(
        &dataset
            .records
            .iter()
            .filter(|r| r.outcome == minority)
            .copied()
            .collect::<Vec<_>>(),
    );
    let m = minority_rows.len();
    let mut matrix = Array2::zeros((m, N_RAW_FEATURES));
    for (mut row, r) in matrix.rows_mut().into_iter().zip(&minority_rows) {
        row.assign(&ndarray::ArrayView1::from(&r.features()));
    }
    let gmm = fit_gmm(matrix.view(), options, seed)?;
    let draws = sample_gmm(&gmm, n_synth, seed::derive(seed, 1))?;

    let lo: Vec<f64> = matrix
        .columns()
        .into_iter()
        .map(|c| c.fold(f64::INFINITY, |a, &b| a.min(b)))
        .collect();
    let hi: Vec<f64> = matrix
        .columns()
        .into_iter()
        .map(|c| c.fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
        .collect();

    let mut out = dataset.clone();
    for row in draws.rows() {
        let mut f = [0.0; N_RAW_FEATURES];
        for j in 0..N_RAW_FEATURES {
            f[j] = row[j].clamp(lo[j], hi[j]);
        }
        out.records.push(RawRecord::from_features(f, minority));
        out.provenance.push(Provenance::Synthetic);
    }
    Ok((out, Some(gmm)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Distribution;

    fn clouds(seed: u64) -> Array2<f64> {
        let mut rng = seed::rng(seed);
        let normal = rand_distr::Normal::new(0.0, 0.3).unwrap();
        Array2::from_shape_fn((200, 2), |(i, _)| {
            let center = if i < 100 { 0.0 } else { 10.0 };
            center + normal.sample(&mut rng)
        })
    }

    #[test]
    fn single_component_matches_sample_moments() {
        let x = clouds(3);
        let opts = GmmOptions {
            components: 1,
            ..Default::default()
        };
        let gmm = fit_gmm(x.view(), &opts, 0).unwrap();
        let n = x.nrows() as f64;
        let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
        for j in 0..2 {
            assert!((gmm.means[0][j] - mean[j]).abs() < 1e-8);
        }
        for a in 0..2 {
            for b in 0..2 {
                let cov: f64 = x
                    .rows()
                    .into_iter()
                    .map(|r| (r[a] - mean[a]) * (r[b] - mean[b]))
                    .sum::<f64>()
                    / n;
                let reg = if a == b { opts.reg_covar } else { 0.0 };
                assert!((gmm.covariances[0][a * 2 + b] - (cov + reg)).abs() < 1e-8);
            }
        }
        assert!((gmm.weights[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn separated_clouds_recover_centroids() {
        let x = clouds(11);
        let opts = GmmOptions {
            components: 2,
            ..Default::default()
        };
        let gmm = fit_gmm(x.view(), &opts, 5).unwrap();
        let mut centers: Vec<(f64, f64)> = gmm.means.iter().map(|m| (m[0], m[1])).collect();
        centers.sort_by(|a, b| a.0.total_cmp(&b.0));
        let first = x.slice(ndarray::s![..100, ..]).mean_axis(ndarray::Axis(0)).unwrap();
        let second = x.slice(ndarray::s![100.., ..]).mean_axis(ndarray::Axis(0)).unwrap();
        assert!((centers[0].0 - first[0]).abs() < 0.1 && (centers[0].1 - first[1]).abs() < 0.1);
        assert!((centers[1].0 - second[0]).abs() < 0.1 && (centers[1].1 - second[1]).abs() < 0.1);
        for w in gmm.log_likelihood_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-7);
        }
    }

    #[test]
    fn responsibilities_normalize() {
        let x = clouds(2);
        let gmm = fit_gmm(
            x.view(),
            &GmmOptions {
                components: 3,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        let data = to_points(x.view());
        let (_, resp) = e_step(&gmm, &gmm.cholesky_factors().unwrap(), &data);
        for r in resp {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let sum: f64 = gmm.weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn too_few_rows_and_bad_values() {
        let x = Array2::zeros((3, 2));
        assert!(matches!(
            fit_gmm(x.view(), &GmmOptions::default(), 0),
            Err(Error::InsufficientData(_))
        ));
        let mut y = Array2::<f64>::zeros((10, 2));
        y[[0, 0]] = f64::NAN;
        assert!(matches!(
            fit_gmm(
                y.view(),
                &GmmOptions {
                    components: 2,
                    ..Default::default()
                },
                0
            ),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn sampling_is_seeded_and_tight_for_tiny_covariance() {
        let gmm = GaussianMixture {
            weights: vec![1.0],
            means: vec![vec![1.0, -2.0]],
            covariances: vec![vec![1e-6, 0.0, 0.0, 1e-6]],
            log_likelihood_trace: vec![],
        };
        assert_eq!(sample_gmm(&gmm, 0, 1).unwrap().nrows(), 0);
        let a = sample_gmm(&gmm, 500, 9).unwrap();
        let b = sample_gmm(&gmm, 500, 9).unwrap();
        assert_eq!(a, b);
        for row in a.rows() {
            assert!((row[0] - 1.0).abs() < 0.01 && (row[1] + 2.0).abs() < 0.01);
        }
    }

    #[test]
    fn cholesky_failure_names_component() {
        let gmm = GaussianMixture {
            weights: vec![0.5, 0.5],
            means: vec![vec![0.0], vec![1.0]],
            covariances: vec![vec![1.0], vec![-1.0]],
            log_likelihood_trace: vec![],
        };
        match sample_gmm(&gmm, 3, 0) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("component 1")),
            other => panic!("{other:?}"),
        }
    }
}
