//! Implementations checked against slow, independent reference computations.

use conceptstack::calibmetrics::{auc, brier, f1, fit_isotonic, pav};
use conceptstack::config::MetaConfig;
use conceptstack::graph::{build_knn, modularity};
use conceptstack::neuralkernel::attention;
use conceptstack::seed;
use conceptstack::stack::{build_meta, fit_meta_learner};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// min over j >= i of max over k <= i of the weighted mean of y[k..=j]
fn minmax_isotonic(y: &[f64], w: &[f64]) -> Vec<f64> {
    let n = y.len();
    (0..n)
        .map(|i| {
            (i..n)
                .map(|j| {
                    (0..=i)
                        .map(|k| {
                            let sw: f64 = w[k..=j].iter().sum();
                            y[k..=j].iter().zip(&w[k..=j]).map(|(a, b)| a * b).sum::<f64>() / sw
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

#[test]
fn pav_equals_minmax_formula() {
    let mut rng = seed::rng(11);
    for _ in 0..60 {
        let n = rng.random_range(1..=30);
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        let got = pav(&y, &w);
        let want = minmax_isotonic(&y, &w);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn isotonic_fit_on_distinct_scores_matches_minmax() {
    let mut rng = seed::rng(12);
    for _ in 0..40 {
        let n = rng.random_range(4..=30);
        let mut scores: Vec<f64> = (0..n)
            .map(|i| i as f64 / n as f64 + rng.random_range(0.0..0.01))
            .collect();
        scores.sort_by(f64::total_cmp);
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
        labels[0] = 0;
        labels[n - 1] = 1;
        let cal = fit_isotonic(&scores, &labels).unwrap();
        let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
        let want = minmax_isotonic(&y, &vec![1.0; n]);
        for (s, w) in scores.iter().zip(&want) {
            assert!((cal.transform_one(*s) - w).abs() < 1e-9);
        }
    }
}

fn pair_auc(y: &[u8], p: &[f64]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..y.len() {
        for j in 0..y.len() {
            if y[i] == 1 && y[j] == 0 {
                pairs += 1.0;
                wins += if p[i] > p[j] {
                    1.0
                } else if p[i] == p[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

#[test]
fn auc_equals_pair_count() {
    let mut rng = seed::rng(13);
    for _ in 0..100 {
        let mut y: Vec<u8> = (0..20).map(|_| u8::from(rng.random_bool(0.4))).collect();
        y[0] = 0;
        y[1] = 1;
        // coarse grid so ties are common
        let p: Vec<f64> = (0..20).map(|_| f64::from(rng.random_range(0..8u8)) / 7.0).collect();
        assert!((auc(&y, &p).unwrap() - pair_auc(&y, &p)).abs() < 1e-12);
    }
}

#[test]
fn f1_and_brier_by_hand() {
    // TP=2 FP=1 FN=1
    let y = [1, 1, 1, 0, 0];
    let p = [0.9, 0.8, 0.1, 0.7, 0.2];
    assert!((f1(&y, &p, 0.5).unwrap() - 4.0 / 6.0).abs() < 1e-12);
    assert!((brier(&[1, 0], &[0.8, 0.4]).unwrap() - 0.10).abs() < 1e-12);
}

#[test]
fn knn_equals_brute_force_sort() {
    let mut rng = seed::rng(14);
    for _ in 0..20 {
        let x = Array2::from_shape_fn((20, 3), |_| rng.random_range(-1.0..1.0));
        let g = build_knn(x.view(), 5).unwrap();
        for i in 0..20 {
            let mut d: Vec<(f64, usize)> = (0..20)
                .filter(|&j| j != i)
                .map(|j| ((0..3).map(|c| (x[[i, c]] - x[[j, c]]).powi(2)).sum(), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<usize> = d[..5].iter().map(|p| p.1).collect();
            assert_eq!(g.neighbors[i], want);
        }
    }
}

#[test]
fn modularity_equals_adjacency_formula() {
    let mut rng = seed::rng(15);
    for _ in 0..20 {
        let n = 12;
        let neighbors: Vec<Vec<usize>> = (0..n)
            .map(|i| {
                let mut out: Vec<usize> = (0..n).filter(|&j| j != i && rng.random_bool(0.3)).collect();
                if out.is_empty() {
                    out.push((i + 1) % n);
                }
                out
            })
            .collect();
        let part: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let mut a = vec![vec![0.0; n]; n];
        for (i, nb) in neighbors.iter().enumerate() {
            for &j in nb {
                a[i][j] = 1.0;
                a[j][i] = 1.0;
            }
        }
        let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
        let two_m: f64 = deg.iter().sum();
        let mut q = 0.0;
        for i in 0..n {
            for j in 0..n {
                if part[i] == part[j] {
                    q += a[i][j] - deg[i] * deg[j] / two_m;
                }
            }
        }
        q /= two_m;
        assert!((modularity(&neighbors, &part).unwrap() - q).abs() < 1e-9);
    }
}

#[test]
fn attention_matches_straight_line_evaluation() {
    let mut rng = seed::rng(16);
    let q = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
    let k = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
    let v = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
    let (out, _) = attention(q.view(), k.view(), v.view()).unwrap();
    for i in 0..3 {
        let mut s = [0.0; 3];
        for (j, sj) in s.iter_mut().enumerate() {
            for c in 0..4 {
                *sj += q[[i, c]] * k[[j, c]];
            }
            *sj /= 2.0;
        }
        let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..4 {
            let want: f64 = (0..3).map(|j| e[j] / z * v[[j, c]]).sum();
            assert!((out[[i, c]] - want).abs() < 1e-12);
        }
    }
}

fn objective(x: &Array2<f64>, y: &[u8], theta: &[f64], lambda: f64) -> f64 {
    let d = x.ncols();
    let n = x.nrows() as f64;
    let mut total = 0.0;
    for (row, &label) in x.rows().into_iter().zip(y) {
        let z: f64 = row.iter().zip(&theta[..d]).map(|(a, b)| a * b).sum::<f64>() + theta[d];
        // log(1 + e^z) - y z, stable in both tails
        total += z.max(0.0) + (-z.abs()).exp().ln_1p() - f64::from(label) * z;
    }
    total / n + lambda / (2.0 * n) * theta[..d].iter().map(|w| w * w).sum::<f64>()
}

// coordinate pattern search with step halving
fn grid_refined_minimum(x: &Array2<f64>, y: &[u8], lambda: f64) -> f64 {
    let mut theta = vec![0.0; x.ncols() + 1];
    let mut best = objective(x, y, &theta, lambda);
    let mut step = 1.0;
    while step > 1e-10 {
        let mut improved = true;
        while improved {
            improved = false;
            for c in 0..theta.len() {
                for dir in [1.0, -1.0] {
                    loop {
                        theta[c] += dir * step;
                        let f = objective(x, y, &theta, lambda);
                        if f < best {
                            best = f;
                            improved = true;
                        } else {
                            theta[c] -= dir * step;
                            break;
                        }
                    }
                }
            }
        }
        step /= 2.0;
    }
    best
}

#[test]
fn meta_learner_matches_grid_refined_optimum() {
    let mut rng: ChaCha8Rng = seed::rng(17);
    let y: Vec<u8> = (0..20).map(|i| u8::from(i % 2 == 0)).collect();
    let probs: Vec<[f64; 5]> = y
        .iter()
        .map(|&l| std::array::from_fn(|_| (0.35 + 0.3 * f64::from(l) + rng.random_range(-0.3..0.3)).clamp(0.01, 0.99)))
        .collect();
    let x = build_meta(&probs);
    let cfg = MetaConfig::default();
    let fit = fit_meta_learner(x.view(), &y, &cfg).unwrap();
    let mut theta = fit.weights.clone();
    theta.push(fit.bias);
    let got = objective(&x, &y, &theta, cfg.lambda);
    let oracle = grid_refined_minimum(&x, &y, cfg.lambda);
    assert!(got <= oracle + 1e-4, "fit {got} vs oracle {oracle}");
    assert!((got - oracle).abs() < 1e-4, "fit {got} vs oracle {oracle}");
}
