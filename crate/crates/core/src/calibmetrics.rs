//! Isotonic calibration and evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weighted pool-adjacent-violators: the non-decreasing sequence minimizing
/// Σ wᵢ(fᵢ − yᵢ)².
pub fn pav(y: &[f64], w: &[f64]) -> Vec<f64> {
    // Blocks of (weighted mean, weight, length).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(y.len());
    for (&v, &wt) in y.iter().zip(w) {
        blocks.push((v, wt, 1));
        while blocks.len() > 1 {
            let last = blocks[blocks.len() - 1];
            let prev = blocks[blocks.len() - 2];
            if prev.0 <= last.0 {
                break;
            }
            let weight = prev.1 + last.1;
            let merged = ((prev.0 * prev.1 + last.0 * last.1) / weight, weight, prev.2 + last.2);
            blocks.pop();
            *blocks.last_mut().expect("two blocks present") = merged;
        }
    }
    blocks
        .into_iter()
        .flat_map(|(v, _, len)| std::iter::repeat_n(v, len))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsotonicCalibrator {
    #[serde(with = "crate::artifact::f64_b64")]
    pub breakpoints: Vec<f64>,
    #[serde(with = "crate::artifact::f64_b64")]
    pub values: Vec<f64>,
}

pub fn fit_isotonic(scores: &[f64], labels: &[u8]) -> Result<IsotonicCalibrator> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Calibration("scores must be finite".into()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if scores.len() < 2 || positives == 0 || positives == labels.len() {
        return Err(Error::Calibration(format!(
            "isotonic fit needs both classes, got {positives} positives in {} samples",
            labels.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut xs: Vec<f64> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut ws: Vec<f64> = Vec::new();
    for &i in &order {
        let label = f64::from(labels[i]);
        if xs.last() == Some(&scores[i]) {
            let last = ys.len() - 1;
            ys[last] += label;
            ws[last] += 1.0;
        } else {
            xs.push(scores[i]);
            ys.push(label);
            ws.push(1.0);
        }
    }
    for (y, w) in ys.iter_mut().zip(&ws) {
        *y /= w;
    }
    let fitted = pav(&ys, &ws);

    // Keep only the first and last knot of each constant run.
    let mut breakpoints = Vec::new();
    let mut values = Vec::new();
    for i in 0..xs.len() {
        let interior = i > 0 && i + 1 < xs.len() && fitted[i - 1] == fitted[i] && fitted[i + 1] == fitted[i];
        if !interior {
            breakpoints.push(xs[i]);
            values.push(fitted[i]);
        }
    }
    Ok(IsotonicCalibrator { breakpoints, values })
}

impl IsotonicCalibrator {
    /// Piecewise-linear interpolation between knots, clamped outside them.
    pub fn transform_one(&self, score: f64) -> f64 {
        let xs = &self.breakpoints;
        let last = xs.len() - 1;
        if score <= xs[0] {
            return self.values[0];
        }
        if score >= xs[last] {
            return self.values[last];
        }
        let hi = xs.partition_point(|&x| x <= score);
        let lo = hi - 1;
        let t = (score - xs[lo]) / (xs[hi] - xs[lo]);
        self.values[lo] + t * (self.values[hi] - self.values[lo])
    }

    pub fn transform(&self, scores: &[f64]) -> Vec<f64> {
        scores.iter().map(|&s| self.transform_one(s)).collect()
    }
}

fn check_lengths(y: &[u8], p: &[f64]) -> Result<()> {
    if y.len() != p.len() {
        return Err(Error::Shape(format!("{} labels but {} predictions", y.len(), p.len())));
    }
    Ok(())
}

/// F1 of the positive class with `p >= threshold` predicted positive.
pub fn f1(y: &[u8], p: &[f64], threshold: f64) -> Result<f64> {
    check_lengths(y, p)?;
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for (&label, &prob) in y.iter().zip(p) {
        match (prob >= threshold, label == 1) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fneg += 1.0,
            (false, false) => {}
        }
    }
    let denom = 2.0 * tp + fp + fneg;
    Ok(if denom == 0.0 { 0.0 } else { 2.0 * tp / denom })
}

/// Area under the ROC curve from midranks.
pub fn auc(y: &[u8], p: &[f64]) -> Result<f64> {
    check_lengths(y, p)?;
    let n_pos = y.iter().filter(|&&l| l == 1).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut rank_sum = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && p[order[end]] == p[order[start]] {
            end += 1;
        }
        let midrank = (start + end + 1) as f64 / 2.0;
        let tied_pos = order[start..end].iter().filter(|&&i| y[i] == 1).count();
        rank_sum += midrank * tied_pos as f64;
        start = end;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

pub fn brier(y: &[u8], p: &[f64]) -> Result<f64> {
    check_lengths(y, p)?;
    if y.is_empty() {
        return Err(Error::UndefinedMetric("Brier score of an empty set".into()));
    }
    Ok(y.iter().zip(p).map(|(&l, &q)| (q - f64::from(l)).powi(2)).sum::<f64>() / y.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub low: f64,
    pub high: f64,
    /// `None` for an empty bin.
    pub mean_pred: Option<f64>,
    pub obs_freq: Option<f64>,
    pub count: usize,
}

fn bin_index(p: f64, bins: usize) -> usize {
    ((p * bins as f64).floor().max(0.0) as usize).min(bins - 1)
}

/// Equal-width bins on [0, 1]; a probability of exactly 1.0 falls in the last bin.
pub fn calibration_bins(y: &[u8], p: &[f64], bins: usize) -> Result<Vec<CalibrationBin>> {
    check_lengths(y, p)?;
    if bins < 2 {
        return Err(Error::Parameter(format!("need at least 2 bins, got {bins}")));
    }
    let mut sum_p = vec![0.0; bins];
    let mut sum_y = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for (&label, &prob) in y.iter().zip(p) {
        let b = bin_index(prob, bins);
        sum_p[b] += prob;
        sum_y[b] += f64::from(label);
        count[b] += 1;
    }
    Ok((0..bins)
        .map(|b| {
            let c = count[b] as f64;
            CalibrationBin {
                low: b as f64 / bins as f64,
                high: (b + 1) as f64 / bins as f64,
                mean_pred: (count[b] > 0).then(|| sum_p[b] / c),
                obs_freq: (count[b] > 0).then(|| sum_y[b] / c),
                count: count[b],
            }
        })
        .collect())
}

/// Counts of probabilities per equal-width bin on [0, 1].
pub fn probability_histogram(p: &[f64], bins: usize) -> Result<Vec<(f64, f64, usize)>> {
    if bins == 0 {
        return Err(Error::Parameter("histogram needs at least one bin".into()));
    }
    let mut count = vec![0usize; bins];
    for &prob in p {
        count[bin_index(prob, bins)] += 1;
    }
    Ok(count
        .into_iter()
        .enumerate()
        .map(|(b, c)| (b as f64 / bins as f64, (b + 1) as f64 / bins as f64, c))
        .collect())
}
