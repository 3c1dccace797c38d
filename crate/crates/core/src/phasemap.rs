//! Phase feature map: each scaled feature x becomes (cos αx, sin αx) with a
//! single global scale α trained by Adam through a linear probe.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuralkernel::{Adam, AdamConfig};
use crate::split::stratified_holdout;

/// Lift a d-vector to [cos αx₁, sin αx₁, cos αx₂, sin αx₂, …].
pub fn lift(x: ArrayView1<f64>, alpha: f64) -> Array1<f64> {
    let mut out = Array1::zeros(2 * x.len());
    for (j, &v) in x.iter().enumerate() {
        let (s, c) = (alpha * v).sin_cos();
        out[2 * j] = c;
        out[2 * j + 1] = s;
    }
    out
}

pub fn lift_matrix(x: ArrayView2<f64>, alpha: f64) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), 2 * x.ncols()));
    for (mut dst, src) in out.rows_mut().into_iter().zip(x.rows()) {
        dst.assign(&lift(src, alpha));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseMapConfig {
    pub epochs: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
}

impl Default for PhaseMapConfig {
    fn default() -> Self {
        PhaseMapConfig {
            epochs: 50,
            lr: 1e-3,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseMap {
    pub alpha: f64,
    /// Linear probe over the lifted features; the last entry is the bias.
    pub probe_weights: Vec<f64>,
    /// Validation MSE after each epoch.
    pub training_trace: Vec<f64>,
}

impl PhaseMap {
    pub fn identity_init(d: usize) -> Self {
        PhaseMap {
            alpha: 1.0,
            probe_weights: vec![0.0; 2 * d + 1],
            training_trace: Vec::new(),
        }
    }

    pub fn lift(&self, x: ArrayView2<f64>) -> Array2<f64> {
        lift_matrix(x, self.alpha)
    }
}

/// MSE of the linear probe on lifted features, with gradients with respect to
/// α and to the probe weights (bias last).
pub fn probe_loss_and_grad(x: ArrayView2<f64>, y: &[f64], alpha: f64, probe: &[f64]) -> (f64, f64, Vec<f64>) {
    let (n, d) = x.dim();
    let bias = probe[2 * d];
    let mut loss = 0.0;
    let mut d_alpha = 0.0;
    let mut d_probe = vec![0.0; 2 * d + 1];
    for (row, &target) in x.rows().into_iter().zip(y) {
        let mut pred = bias;
        let mut trig = Vec::with_capacity(d);
        for (j, &v) in row.iter().enumerate() {
            let (s, c) = (alpha * v).sin_cos();
            pred += probe[2 * j] * c + probe[2 * j + 1] * s;
            trig.push((s, c));
        }
        let err = pred - target;
        loss += err * err;
        let g = 2.0 * err / n as f64;
        for (j, (&v, &(s, c))) in row.iter().zip(&trig).enumerate() {
            d_probe[2 * j] += g * c;
            d_probe[2 * j + 1] += g * s;
            d_alpha += g * v * (probe[2 * j + 1] * c - probe[2 * j] * s);
        }
        d_probe[2 * d] += g;
    }
    (loss / n as f64, d_alpha, d_probe)
}

/// Train α (starting at 1.0) jointly with the probe on a stratified 80/20
/// split, keeping the parameters with the lowest validation MSE (the
/// initialization counts as a candidate).
pub fn train_alpha(x: ArrayView2<f64>, y: &[u8], config: &PhaseMapConfig, seed: u64) -> Result<PhaseMap> {
    let (n, d) = x.dim();
    if n < 10 {
        return Err(Error::InsufficientData(format!(
            "phase map needs at least 10 rows, got {n}"
        )));
    }
    if y.len() != n {
        return Err(Error::Shape(format!("{n} rows but {} labels", y.len())));
    }
    let (train_idx, val_idx) = stratified_holdout(y, config.holdout_fraction, seed)?;
    let xt = x.select(ndarray::Axis(0), &train_idx);
    let xv = x.select(ndarray::Axis(0), &val_idx);
    let yt: Vec<f64> = train_idx.iter().map(|&i| f64::from(y[i])).collect();
    let yv: Vec<f64> = val_idx.iter().map(|&i| f64::from(y[i])).collect();

    let mut alpha = [1.0];
    let mut probe = vec![0.0; 2 * d + 1];
    let mut best = PhaseMap {
        alpha: 1.0,
        probe_weights: probe.clone(),
        training_trace: Vec::new(),
    };
    let mut best_val = probe_loss_and_grad(xv.view(), &yv, 1.0, &probe).0;
    let mut trace = Vec::with_capacity(config.epochs);
    let mut adam = Adam::new(AdamConfig::with_lr(config.lr));
    for epoch in 0..config.epochs {
        let (_, g_alpha, g_probe) = probe_loss_and_grad(xt.view(), &yt, alpha[0], &probe);
        adam.step(vec![&mut alpha[..], &mut probe[..]], &[&[g_alpha], &g_probe]);
        let val = probe_loss_and_grad(xv.view(), &yv, alpha[0], &probe).0;
        if !val.is_finite() || !alpha[0].is_finite() {
            return Err(Error::Divergence {
                stage: "phase map".into(),
                epoch,
            });
        }
        trace.push(val);
        if val < best_val {
            best_val = val;
            best.alpha = alpha[0];
            best.probe_weights = probe.clone();
        }
    }
    if best.alpha <= 0.0 {
        return Err(Error::Numeric(format!(
            "trained phase scale {} is not positive",
            best.alpha
        )));
    }
    best.training_trace = trace;
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use ndarray::array;
    use rand::Rng;
    use std::f64::consts::PI;

    fn toy(n: usize, seed: u64) -> (Array2<f64>, Vec<u8>) {
        let mut rng = seed::rng(seed);
        let x = Array2::from_shape_simple_fn((n, 3), || rng.random_range(-2.0..2.0));
        let y = x
            .rows()
            .into_iter()
            .map(|r| u8::from(r[0] + 0.5 * r[1] > 0.0))
            .collect();
        (x, y)
    }

    #[test]
    fn zero_scale_gives_unit_cosines() {
        let out = lift(array![1.0, -3.0, 7.5].view(), 0.0);
        for j in 0..3 {
            assert_eq!((out[2 * j], out[2 * j + 1]), (1.0, 0.0));
        }
    }

    #[test]
    fn quarter_period() {
        let out = lift(array![PI / 2.0].view(), 1.0);
        assert!(out[0].abs() < 1e-12);
        assert!((out[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pairs_have_unit_norm_and_period() {
        let mut rng = seed::rng(4);
        for _ in 0..100 {
            let alpha = rng.random_range(0.1..3.0);
            let x = Array1::from_shape_simple_fn(5, || rng.random_range(-10.0..10.0));
            let a = lift(x.view(), alpha);
            for j in 0..5 {
                assert!((a[2 * j].powi(2) + a[2 * j + 1].powi(2) - 1.0).abs() <= 1e-12);
            }
            let mut shifted = x.clone();
            shifted[2] += 2.0 * PI / alpha;
            let b = lift(shifted.view(), alpha);
            for (u, v) in a.iter().zip(b.iter()) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fifty_epochs_fifty_trace_entries() {
        let (x, y) = toy(200, 1);
        let pm = train_alpha(x.view(), &y, &PhaseMapConfig::default(), 7).unwrap();
        assert_eq!(pm.training_trace.len(), 50);
        assert_eq!(pm.probe_weights.len(), 7);
        assert!(pm.alpha > 0.0 && pm.alpha.is_finite());
    }

    #[test]
    fn zero_epochs_keep_initial_scale() {
        let (x, y) = toy(50, 2);
        let cfg = PhaseMapConfig {
            epochs: 0,
            ..Default::default()
        };
        let pm = train_alpha(x.view(), &y, &cfg, 0).unwrap();
        assert_eq!(pm.alpha, 1.0);
        assert!(pm.training_trace.is_empty());
    }

    #[test]
    fn retained_fit_is_no_worse_than_initialization() {
        let (x, y) = toy(300, 3);
        let cfg = PhaseMapConfig {
            epochs: 30,
            lr: 0.05,
            ..Default::default()
        };
        let pm = train_alpha(x.view(), &y, &cfg, 5).unwrap();
        let (_, val_idx) = stratified_holdout(&y, 0.2, 5).unwrap();
        let xv = x.select(ndarray::Axis(0), &val_idx);
        let yv: Vec<f64> = val_idx.iter().map(|&i| f64::from(y[i])).collect();
        let init = probe_loss_and_grad(xv.view(), &yv, 1.0, &[0.0; 7]).0;
        let kept = probe_loss_and_grad(xv.view(), &yv, pm.alpha, &pm.probe_weights).0;
        assert!(kept <= init);
        let again = train_alpha(x.view(), &y, &cfg, 5).unwrap();
        assert_eq!(again.alpha.to_bits(), pm.alpha.to_bits());
    }

    #[test]
    fn too_few_rows() {
        let (x, y) = toy(9, 0);
        assert!(matches!(
            train_alpha(x.view(), &y, &PhaseMapConfig::default(), 0),
            Err(Error::InsufficientData(_))
        ));
    }
}
