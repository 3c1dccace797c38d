//! Central finite differences against the analytic gradients outside the
//! network kernel: phase scale, autoencoder and graph refinement.

use conceptstack::graph::{build_knn, refine_loss_and_grad, Autoencoder, AutoencoderConfig};
use conceptstack::neuralkernel::ParamSet;
use conceptstack::phasemap::probe_loss_and_grad;
use conceptstack::seed;
use ndarray::{Array1, Array2};
use rand::Rng;

fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= 1e-6 || diff <= 1e-4 * analytic.abs().max(numeric.abs())
}

#[test]
fn phase_scale_gradient() {
    let h = 1e-5;
    let mut rng = seed::rng(21);
    for _ in 0..5 {
        let x = Array2::from_shape_fn((8, 3), |_| rng.random_range(-2.0..2.0));
        let y: Vec<f64> = (0..8).map(|i| f64::from(i % 2 == 0)).collect();
        let probe: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let alpha = rng.random_range(0.5..1.5);
        let (_, ga, gp) = probe_loss_and_grad(x.view(), &y, alpha, &probe);
        let f = |a: f64| probe_loss_and_grad(x.view(), &y, a, &probe).0;
        let num = (f(alpha + h) - f(alpha - h)) / (2.0 * h);
        assert!(close(ga, num), "alpha {ga} vs {num}");
        for j in 0..probe.len() {
            let mut p = probe.clone();
            p[j] += h;
            let up = probe_loss_and_grad(x.view(), &y, alpha, &p).0;
            p[j] -= 2.0 * h;
            let down = probe_loss_and_grad(x.view(), &y, alpha, &p).0;
            let num = (up - down) / (2.0 * h);
            assert!(close(gp[j], num), "probe {j}: {} vs {num}", gp[j]);
        }
    }
}

#[test]
fn autoencoder_gradient_on_five_rows() {
    let eps = 1e-6;
    let cfg = AutoencoderConfig {
        hidden_dims: vec![7, 6],
        embedding_dim: 4,
        ..Default::default()
    };
    let mut rng = seed::rng(22);
    let x = Array2::from_shape_fn((5, 6), |_| rng.random_range(-1.0..1.0));
    let model = Autoencoder::new(6, &cfg, 3);
    let (_, grad) = model.loss_and_grad(x.view());
    let grads: Vec<Vec<f64>> = grad.params().into_iter().map(|p| p.data.to_vec()).collect();
    for (t, g) in grads.iter().enumerate() {
        for (i, &want) in g.iter().enumerate() {
            let mut m = model.clone();
            m.params_mut()[t][i] += eps;
            let up = m.loss_and_grad(x.view()).0;
            m.params_mut()[t][i] -= 2.0 * eps;
            let down = m.loss_and_grad(x.view()).0;
            let num = (up - down) / (2.0 * eps);
            assert!(close(want, num), "tensor {t} entry {i}: {want} vs {num}");
        }
    }
}

#[test]
fn refinement_gradient_on_toy_graph() {
    let eps = 1e-6;
    let mut rng = seed::rng(23);
    for _ in 0..5 {
        let emb = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let labels = [1, 0, 1, 0, 0];
        let g = build_knn(emb.view(), 2).unwrap();
        let w = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
        let b = rng.random_range(-0.5..0.5);
        let (_, grad) = refine_loss_and_grad(&g.neighbors, emb.view(), &labels, &w, b);
        let loss =
            |e: &Array2<f64>, w: &Array1<f64>, b: f64| refine_loss_and_grad(&g.neighbors, e.view(), &labels, w, b).0;
        for j in 0..3 {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[j] += eps;
            wm[j] -= eps;
            let num = (loss(&emb, &wp, b) - loss(&emb, &wm, b)) / (2.0 * eps);
            assert!(close(grad.w[j], num));
        }
        let num = (loss(&emb, &w, b + eps) - loss(&emb, &w, b - eps)) / (2.0 * eps);
        assert!(close(grad.b, num));
        for idx in [(0, 0), (2, 1), (4, 2), (3, 0)] {
            let (mut ep, mut em) = (emb.clone(), emb.clone());
            ep[idx] += eps;
            em[idx] -= eps;
            // edges stay fixed; only the embedding values move
            let num = (loss(&ep, &w, b) - loss(&em, &w, b)) / (2.0 * eps);
            assert!(close(grad.emb[idx], num));
        }
    }
}
