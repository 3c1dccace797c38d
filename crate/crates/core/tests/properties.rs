use conceptstack::calibmetrics::{auc, calibration_bins, fit_isotonic};
use conceptstack::dataset::fit_robust_scaler;
use conceptstack::forests::{fit_forest, ForestConfig, ForestMode};
use conceptstack::graph::{build_knn, modularity};
use conceptstack::phasemap::lift;
use conceptstack::split::stratified_kfold;
use conceptstack::stack::meta_row;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn labelled(min: usize, max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    prop::collection::vec((0.0f64..1.0, any::<bool>()), min..max).prop_map(|v| {
        let mut scores: Vec<f64> = v.iter().map(|p| p.0).collect();
        let mut labels: Vec<u8> = v.iter().map(|p| u8::from(p.1)).collect();
        scores.push(0.5);
        labels.push(0);
        scores.push(0.5);
        labels.push(1);
        (scores, labels)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn isotonic_is_monotone_and_bounded((scores, labels) in labelled(2, 40), probes in prop::collection::vec(-0.5f64..1.5, 20)) {
        let cal = fit_isotonic(&scores, &labels).unwrap();
        prop_assert!(cal.breakpoints.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(cal.values.windows(2).all(|w| w[0] <= w[1]));
        let mut sorted = probes.clone();
        sorted.sort_by(f64::total_cmp);
        let out = cal.transform(&sorted);
        prop_assert!(out.windows(2).all(|w| w[0] <= w[1] + 1e-15));
        prop_assert!(out.iter().all(|p| (0.0..=1.0).contains(p)));
        // clamped outside the knots
        prop_assert_eq!(cal.transform_one(-10.0), cal.values[0]);
        prop_assert_eq!(cal.transform_one(10.0), *cal.values.last().unwrap());
    }

    #[test]
    fn auc_ignores_monotone_transforms((scores, labels) in labelled(2, 40), a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let base = auc(&labels, &scores).unwrap();
        let affine: Vec<f64> = scores.iter().map(|s| a * s + b).collect();
        let cubed: Vec<f64> = scores.iter().map(|s| (s - 0.3).powi(3)).collect();
        prop_assert!((auc(&labels, &affine).unwrap() - base).abs() < 1e-12);
        prop_assert!((auc(&labels, &cubed).unwrap() - base).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn calibration_bins_account_for_every_prediction((scores, labels) in labelled(0, 60), bins in 2usize..15) {
        let out = calibration_bins(&labels, &scores, bins).unwrap();
        prop_assert_eq!(out.len(), bins);
        prop_assert_eq!(out.iter().map(|b| b.count).sum::<usize>(), scores.len());
        for b in &out {
            prop_assert_eq!(b.mean_pred.is_some(), b.count > 0);
            if let Some(m) = b.mean_pred {
                prop_assert!(m >= b.low - 1e-12 && m <= b.high + 1e-12);
            }
        }
    }

    #[test]
    fn knn_out_degree_is_k(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 7..30), k in 1usize..6) {
        let n = rows.len();
        let x = Array2::from_shape_fn((n, 3), |(i, j)| rows[i][j]);
        let g = build_knn(x.view(), k).unwrap();
        for (i, nb) in g.neighbors.iter().enumerate() {
            prop_assert_eq!(nb.len(), k);
            prop_assert!(!nb.contains(&i));
            let mut uniq = nb.clone();
            uniq.sort_unstable();
            uniq.dedup();
            prop_assert_eq!(uniq.len(), k);
        }
        // symmetrized: mutual pairs count once
        prop_assert!(g.avg_degree >= k as f64 && g.avg_degree <= 2.0 * k as f64);
    }

    #[test]
    fn modularity_within_bounds(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 8..30), groups in 1usize..5, salt in any::<u64>()) {
        let n = rows.len();
        let x = Array2::from_shape_fn((n, 2), |(i, j)| rows[i][j]);
        let g = build_knn(x.view(), 3).unwrap();
        let part: Vec<usize> = (0..n).map(|i| ((i as u64).wrapping_mul(salt | 1) >> 7) as usize % groups).collect();
        let q = modularity(&g.neighbors, &part).unwrap();
        prop_assert!((-0.5..=1.0).contains(&q), "{}", q);
        prop_assert!(modularity(&g.neighbors, &vec![0; n]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn lifted_pairs_have_unit_norm(values in prop::collection::vec(-50.0f64..50.0, 1..20), alpha in -3.0f64..3.0) {
        let z = lift(Array1::from(values.clone()).view(), alpha);
        prop_assert_eq!(z.len(), 2 * values.len());
        for j in 0..values.len() {
            prop_assert!((z[2 * j].powi(2) + z[2 * j + 1].powi(2) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scaler_round_trips(rows in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 4), 2..40)) {
        let x = Array2::from_shape_fn((rows.len(), 4), |(i, j)| rows[i][j]);
        let stats = fit_robust_scaler(x.view()).unwrap();
        prop_assert!(stats.iqr.iter().all(|&v| v > 0.0));
        let back = stats.invert(stats.apply(x.view()).unwrap().view()).unwrap();
        for (a, b) in back.iter().zip(x.iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn kfold_partitions_and_stratifies(labels in prop::collection::vec(any::<bool>(), 20..120), folds in 2usize..6, seed in any::<u64>()) {
        let mut y: Vec<u8> = labels.iter().map(|&b| u8::from(b)).collect();
        for slot in y.iter_mut().take(folds) {
            *slot = 1;
        }
        for slot in y.iter_mut().rev().take(folds) {
            *slot = 0;
        }
        let parts = stratified_kfold(&y, folds, seed).unwrap();
        prop_assert_eq!(parts.len(), folds);
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..y.len()).collect::<Vec<_>>());
        let pos_total = y.iter().filter(|&&l| l == 1).count();
        for p in &parts {
            let pos = p.iter().filter(|&&i| y[i] == 1).count();
            let want = pos_total as f64 / folds as f64;
            prop_assert!((pos as f64 - want).abs() <= 1.0);
        }
    }

    #[test]
    fn meta_row_layout(p in prop::array::uniform5(0.0f64..=1.0)) {
        let row = meta_row(&p);
        prop_assert_eq!(&row[..5], &p[..]);
        for j in 0..5 {
            prop_assert!(row[5 + j].is_finite());
            prop_assert_eq!(row[10 + j], if p[j] >= 0.5 { 1.0 } else { 0.0 });
        }
        let mean = p.iter().sum::<f64>() / 5.0;
        prop_assert!((row[15] - mean).abs() < 1e-12);
        prop_assert!(row[16] >= 0.0 && row[16] <= 0.5);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn forest_is_mean_of_bounded_trees(rows in prop::collection::vec((prop::collection::vec(-3.0f64..3.0, 4), any::<bool>()), 12..60), seed in any::<u64>(), extra in any::<bool>()) {
        let n = rows.len();
        let x = Array2::from_shape_fn((n, 4), |(i, j)| rows[i].0[j]);
        let mut y: Vec<u8> = rows.iter().map(|r| u8::from(r.1)).collect();
        y[0] = 0;
        y[1] = 1;
        let cfg = ForestConfig { trees: 7, max_depth: 3, ..Default::default() };
        let mode = if extra { ForestMode::ExtraTrees } else { ForestMode::RandomForest };
        let forest = fit_forest(x.view(), &y, mode, &cfg, seed).unwrap();
        let p = forest.predict_proba(x.view()).unwrap();
        for (i, row) in x.rows().into_iter().enumerate() {
            let mean = forest.trees.iter().map(|t| t.predict_row(row)).sum::<f64>() / 7.0;
            prop_assert!((p[i] - mean).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&p[i]));
        }
        for t in &forest.trees {
            prop_assert!(t.depth() <= 3);
            prop_assert!(t.value.iter().all(|v| (0.0..=1.0).contains(v)));
            for node in 0..t.node_count() {
                if !t.is_leaf(node) {
                    prop_assert!(t.left[node] as usize > node && t.right[node] as usize > node);
                }
            }
        }
    }
}
