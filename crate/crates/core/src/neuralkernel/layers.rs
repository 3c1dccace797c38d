//! Layer primitives with explicit forward caches and backward passes.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{matrix_ref, vector_ref, ParamRef};
use crate::error::{Error, Result};

/// Forward-pass mode. Training mode carries the RNG that draws dropout masks.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub(crate) fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        match self {
            Mode::Eval => None,
            Mode::Train(rng) => Some(rng),
        }
    }
}

pub(crate) fn uniform_matrix(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..bound))
}

pub(crate) fn uniform_vector(len: usize, bound: f64, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.random_range(-bound..bound))
}

pub(crate) fn ensure_finite(x: &Array2<f64>, layer: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Activation(layer.to_string()))
    }
}

/// Fully connected layer `y = x W + b` with `W` stored as in×out.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            w: Array2::zeros((input, output)),
            b: Array1::zeros(output),
        }
    }

    /// Weights and bias drawn from U(-1/√fan_in, 1/√fan_in).
    pub fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Dense {
            w: uniform_matrix(input, output, bound, rng),
            b: uniform_vector(output, bound, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns dL/dx.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Dense) -> Array2<f64> {
        ndarray::linalg::general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push(matrix_ref(prefix, "weight", &self.w));
        out.push(vector_ref(prefix, "bias", &self.b));
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.w.as_slice_mut().expect("contiguous"));
        out.push(self.b.as_slice_mut().expect("contiguous"));
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given the pre-activation.
pub fn relu_backward(pre: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(pre).for_each(|d, &p| {
        if p <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Inverted dropout. Returns the output and the scaled keep-mask used, if any.
/// Rate 0 and evaluation mode are the identity.
pub fn dropout(x: Array2<f64>, rate: f64, mode: &mut Mode<'_>) -> (Array2<f64>, Option<Array2<f64>>) {
    match mode.rng() {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let mask =
                Array2::from_shape_simple_fn(x.raw_dim(), || if rng.random::<f64>() < rate { 0.0 } else { keep });
            (x * &mask, Some(mask))
        }
        _ => (x, None),
    }
}

pub fn dropout_backward(dy: Array2<f64>, mask: &Option<Array2<f64>>) -> Array2<f64> {
    match mask {
        Some(m) => dy * m,
        None => dy,
    }
}

/// Layer normalization over the last axis with learned gain and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *is = 1.0 / (var + LN_EPS).sqrt();
            row *= *is;
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        let d = dy.ncols() as f64;
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, g), xh), &is) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.xhat.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xh) / d;
            Zip::from(&mut out)
                .and(&g)
                .and(&xh)
                .for_each(|o, &gi, &xi| *o = is * (gi - mean_g - xi * mean_gx));
        }
        dx
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        out.push(vector_ref(prefix, "gamma", &self.gamma));
        out.push(vector_ref(prefix, "beta", &self.beta));
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.gamma.as_slice_mut().expect("contiguous"));
        out.push(self.beta.as_slice_mut().expect("contiguous"));
    }
}

/// Scaled dot-product attention `softmax(Q Kᵀ / √d_k) V`.
/// Returns the output and the attention weights (one softmax row per query).
pub fn attention(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    if q.ncols() != k.ncols() || k.nrows() != v.nrows() || q.ncols() == 0 {
        return Err(Error::Shape(format!(
            "attention shapes Q {:?}, K {:?}, V {:?} are inconsistent",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let mut probs = q.dot(&k.t());
    for mut row in probs.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
        row.mapv_inplace(|s| (s * scale - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    let out = probs.dot(&v);
    Ok((out, probs))
}

/// Gradients of [`attention`] with respect to Q, K and V.
pub fn attention_backward(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    probs: ArrayView2<f64>,
    dout: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (q.ncols() as f64).sqrt();
    let dv = probs.t().dot(&dout);
    let dp = dout.dot(&v.t());
    let mut ds = Array2::zeros(probs.raw_dim());
    for ((mut ds_row, p_row), dp_row) in ds.rows_mut().into_iter().zip(probs.rows()).zip(dp.rows()) {
        let inner = p_row.dot(&dp_row);
        Zip::from(&mut ds_row)
            .and(&p_row)
            .and(&dp_row)
            .for_each(|d, &p, &g| *d = p * (g - inner) * scale);
    }
    let dq = ds.dot(&k);
    let dk = ds.t().dot(&q);
    (dq, dk, dv)
}

/// Multi-head self-attention over batches of fixed-length sequences stored
/// as (batch·seq_len)×model_dim row blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub wq: Dense,
    pub wk: Dense,
    pub wv: Dense,
    pub wo: Dense,
}

pub struct AttentionCache {
    input: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    seq_len: usize,
    // (batch, head, query, key) softmax weights, flattened
    probs: Vec<f64>,
    concat: Array2<f64>,
}

impl AttentionCache {
    /// Weights of every (sequence, head) pair, sequence-major.
    pub fn probs(&self) -> impl Iterator<Item = ArrayView2<'_, f64>> {
        let t = self.seq_len;
        self.probs
            .chunks_exact(t * t)
            .map(move |c| ArrayView2::from_shape((t, t), c).expect("square block"))
    }
}

impl MultiHeadAttention {
    pub fn init(dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        MultiHeadAttention {
            heads,
            wq: Dense::init(dim, dim, rng),
            wk: Dense::init(dim, dim, rng),
            wv: Dense::init(dim, dim, rng),
            wo: Dense::init(dim, dim, rng),
        }
    }

    pub fn zeros(dim: usize, heads: usize) -> Self {
        MultiHeadAttention {
            heads,
            wq: Dense::zeros(dim, dim),
            wk: Dense::zeros(dim, dim),
            wv: Dense::zeros(dim, dim),
            wo: Dense::zeros(dim, dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>, seq_len: usize) -> Result<(Array2<f64>, AttentionCache)> {
        let dim = x.ncols();
        if seq_len == 0 || !x.nrows().is_multiple_of(seq_len) || self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::Shape(format!(
                "attention input {:?} does not split into sequences of {seq_len} and {} heads",
                x.shape(),
                self.heads
            )));
        }
        let dh = dim / self.heads;
        let t = seq_len;
        let batch = x.nrows() / t;
        let scale = 1.0 / (dh as f64).sqrt();
        let q = self.wq.forward(x);
        let k = self.wk.forward(x);
        let v = self.wv.forward(x);
        let (qs, ks, vs) = (
            q.as_slice().expect("contiguous"),
            k.as_slice().expect("contiguous"),
            v.as_slice().expect("contiguous"),
        );
        let mut concat = Array2::<f64>::zeros(x.raw_dim());
        let cs = concat.as_slice_mut().expect("contiguous");
        let mut probs = vec![0.0; batch * self.heads * t * t];
        for b in 0..batch {
            for h in 0..self.heads {
                let p = &mut probs[(b * self.heads + h) * t * t..][..t * t];
                let c0 = h * dh;
                for i in 0..t {
                    let qi = &qs[(b * t + i) * dim + c0..][..dh];
                    let row = &mut p[i * t..][..t];
                    let mut max = f64::NEG_INFINITY;
                    for (j, r) in row.iter_mut().enumerate() {
                        let kj = &ks[(b * t + j) * dim + c0..][..dh];
                        let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        *r = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for r in row.iter_mut() {
                        *r = (*r - max).exp();
                        sum += *r;
                    }
                    for r in row.iter_mut() {
                        *r /= sum;
                    }
                    let out = &mut cs[(b * t + i) * dim + c0..][..dh];
                    for (j, &w) in row.iter().enumerate() {
                        let vj = &vs[(b * t + j) * dim + c0..][..dh];
                        for (o, &vv) in out.iter_mut().zip(vj) {
                            *o += w * vv;
                        }
                    }
                }
            }
        }
        let y = self.wo.forward(concat.view());
        Ok((
            y,
            AttentionCache {
                input: x.to_owned(),
                q,
                k,
                v,
                seq_len,
                probs,
                concat,
            },
        ))
    }

    pub fn backward(&self, cache: &AttentionCache, dy: &Array2<f64>, grad: &mut MultiHeadAttention) -> Array2<f64> {
        let t = cache.seq_len;
        let dim = dy.ncols();
        let dh = dim / self.heads;
        let batch = dy.nrows() / t;
        let scale = 1.0 / (dh as f64).sqrt();
        let dconcat = self.wo.backward(cache.concat.view(), dy.view(), &mut grad.wo);
        let dcs = dconcat.as_slice().expect("contiguous");
        let (qs, ks, vs) = (
            cache.q.as_slice().expect("contiguous"),
            cache.k.as_slice().expect("contiguous"),
            cache.v.as_slice().expect("contiguous"),
        );
        let mut dq = Array2::<f64>::zeros(dy.raw_dim());
        let mut dk = Array2::<f64>::zeros(dy.raw_dim());
        let mut dv = Array2::<f64>::zeros(dy.raw_dim());
        let (dqs, dks, dvs) = (
            dq.as_slice_mut().expect("contiguous"),
            dk.as_slice_mut().expect("contiguous"),
            dv.as_slice_mut().expect("contiguous"),
        );
        let mut ds = vec![0.0; t];
        for b in 0..batch {
            for h in 0..self.heads {
                let p = &cache.probs[(b * self.heads + h) * t * t..][..t * t];
                let c0 = h * dh;
                let at = |i: usize| (b * t + i) * dim + c0;
                for i in 0..t {
                    let row = &p[i * t..][..t];
                    let go = &dcs[at(i)..][..dh];
                    // dP then softmax backward
                    let mut inner = 0.0;
                    for j in 0..t {
                        let vj = &vs[at(j)..][..dh];
                        let dp: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                        ds[j] = dp;
                        inner += row[j] * dp;
                    }
                    for j in 0..t {
                        ds[j] = row[j] * (ds[j] - inner) * scale;
                    }
                    for j in 0..t {
                        let (pj, sj) = (row[j], ds[j]);
                        let dvj = &mut dvs[at(j)..][..dh];
                        for (d, &g) in dvj.iter_mut().zip(go) {
                            *d += pj * g;
                        }
                        let qi = &qs[at(i)..][..dh];
                        let dkj = &mut dks[at(j)..][..dh];
                        for (d, &qq) in dkj.iter_mut().zip(qi) {
                            *d += sj * qq;
                        }
                        let kj = &ks[at(j)..][..dh];
                        let dqi = &mut dqs[at(i)..][..dh];
                        for (d, &kk) in dqi.iter_mut().zip(kj) {
                            *d += sj * kk;
                        }
                    }
                }
            }
        }
        let x = cache.input.view();
        let mut dx = self.wq.backward(x, dq.view(), &mut grad.wq);
        dx += &self.wk.backward(x, dk.view(), &mut grad.wk);
        dx += &self.wv.backward(x, dv.view(), &mut grad.wv);
        dx
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.wq.params(&format!("{prefix}.query"), out);
        self.wk.params(&format!("{prefix}.key"), out);
        self.wv.params(&format!("{prefix}.value"), out);
        self.wo.params(&format!("{prefix}.output"), out);
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.wq.params_mut(out);
        self.wk.params_mut(out);
        self.wv.params_mut(out);
        self.wo.params_mut(out);
    }
}

/// 1-D convolution along the sequence axis with zero "same" padding.
/// Weights are laid out as (kernel·in_channels)×out_channels, offset-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d {
    pub kernel: usize,
    pub dense: Dense,
}

impl Conv1d {
    pub fn init(in_ch: usize, out_ch: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        Conv1d {
            kernel,
            dense: Dense::init(kernel * in_ch, out_ch, rng),
        }
    }

    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Conv1d {
            kernel,
            dense: Dense::zeros(kernel * in_ch, out_ch),
        }
    }

    fn in_channels(&self) -> usize {
        self.dense.input_dim() / self.kernel
    }

    fn im2col(&self, x: ArrayView2<f64>, seq_len: usize) -> Array2<f64> {
        let in_ch = self.in_channels();
        let pad = (self.kernel / 2) as isize;
        let mut col = Array2::zeros((x.nrows(), self.kernel * in_ch));
        for r in 0..x.nrows() {
            let (b, t) = (r / seq_len, (r % seq_len) as isize);
            for j in 0..self.kernel {
                let src = t + j as isize - pad;
                if src >= 0 && (src as usize) < seq_len {
                    col.slice_mut(s![r, j * in_ch..(j + 1) * in_ch])
                        .assign(&x.row(b * seq_len + src as usize));
                }
            }
        }
        col
    }

    /// Returns the output and the unfolded input needed by `backward`.
    pub fn forward(&self, x: ArrayView2<f64>, seq_len: usize) -> (Array2<f64>, Array2<f64>) {
        let col = self.im2col(x, seq_len);
        (self.dense.forward(col.view()), col)
    }

    pub fn backward(&self, col: &Array2<f64>, dy: &Array2<f64>, seq_len: usize, grad: &mut Conv1d) -> Array2<f64> {
        let in_ch = self.in_channels();
        let pad = (self.kernel / 2) as isize;
        let dcol = self.dense.backward(col.view(), dy.view(), &mut grad.dense);
        let mut dx = Array2::zeros((dy.nrows(), in_ch));
        for r in 0..dy.nrows() {
            let (b, t) = (r / seq_len, (r % seq_len) as isize);
            for j in 0..self.kernel {
                let src = t + j as isize - pad;
                if src >= 0 && (src as usize) < seq_len {
                    let mut target = dx.row_mut(b * seq_len + src as usize);
                    target += &dcol.slice(s![r, j * in_ch..(j + 1) * in_ch]);
                }
            }
        }
        dx
    }

    pub fn params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a>>) {
        self.dense.params(prefix, out);
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.dense.params_mut(out);
    }
}

/// Mean over each sequence: (batch·seq_len)×d → batch×d.
pub fn mean_pool(x: ArrayView2<f64>, seq_len: usize) -> Array2<f64> {
    let batch = x.nrows() / seq_len;
    let mut out = Array2::zeros((batch, x.ncols()));
    for (b, mut row) in out.rows_mut().into_iter().enumerate() {
        for t in 0..seq_len {
            row += &x.row(b * seq_len + t);
        }
        row /= seq_len as f64;
    }
    out
}

pub fn mean_pool_backward(dy: &Array2<f64>, seq_len: usize) -> Array2<f64> {
    let mut dx = Array2::zeros((dy.nrows() * seq_len, dy.ncols()));
    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
        row.assign(&dy.row(r / seq_len));
        row /= seq_len as f64;
    }
    dx
}

/// Global max over each sequence. Returns the pooled values and the winning
/// row for every (sample, channel); ties go to the earliest position.
pub fn max_pool(x: ArrayView2<f64>, seq_len: usize) -> (Array2<f64>, Vec<usize>) {
    let batch = x.nrows() / seq_len;
    let d = x.ncols();
    let mut out = Array2::zeros((batch, d));
    let mut argmax = vec![0usize; batch * d];
    for b in 0..batch {
        for c in 0..d {
            let mut best = b * seq_len;
            for t in 1..seq_len {
                if x[[b * seq_len + t, c]] > x[[best, c]] {
                    best = b * seq_len + t;
                }
            }
            out[[b, c]] = x[[best, c]];
            argmax[b * d + c] = best;
        }
    }
    (out, argmax)
}

pub fn max_pool_backward(dy: &Array2<f64>, argmax: &[usize], seq_len: usize) -> Array2<f64> {
    let d = dy.ncols();
    let mut dx = Array2::zeros((dy.nrows() * seq_len, d));
    for b in 0..dy.nrows() {
        for c in 0..d {
            dx[[argmax[b * d + c], c]] += dy[[b, c]];
        }
    }
    dx
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy on logits and its gradient with respect to each logit.
pub fn bce_with_logits(logits: &Array1<f64>, labels: &[f64]) -> (f64, Array1<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array1::zeros(logits.len());
    for ((g, &z), &y) in grad.iter_mut().zip(logits.iter()).zip(labels) {
        // log(1 + e^z) - y z, stable for large |z|
        loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        *g = (sigmoid(z) - y) / n;
    }
    (loss / n, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use ndarray::array;

    #[test]
    fn single_position_attention_returns_values() {
        let q = array![[0.3, -1.2]];
        let k = array![[2.0, 0.5]];
        let v = array![[4.0, 5.0, 6.0]];
        let (out, probs) = attention(q.view(), k.view(), v.view()).unwrap();
        assert_eq!(out, v);
        assert_eq!(probs[[0, 0]], 1.0);
    }

    #[test]
    fn zero_queries_give_uniform_attention() {
        let q = Array2::zeros((3, 2));
        let k = array![[1.0, 2.0], [-3.0, 0.5], [0.1, 0.1]];
        let v = array![[1.0, 10.0], [2.0, 20.0], [6.0, 30.0]];
        let (out, _) = attention(q.view(), k.view(), v.view()).unwrap();
        for row in out.rows() {
            assert!((row[0] - 3.0).abs() < 1e-12);
            assert!((row[1] - 20.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_bad_shapes() {
        let a = Array2::zeros((2, 3));
        let b = Array2::zeros((2, 4));
        assert!(matches!(attention(a.view(), b.view(), a.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn dropout_identity_cases() {
        let x = array![[1.0, 2.0], [3.0, 4.0]];
        let mut rng = seed::rng(1);
        let (y, mask) = dropout(x.clone(), 0.0, &mut Mode::Train(&mut rng));
        assert_eq!(y, x);
        assert!(mask.is_none());
        let (y, mask) = dropout(x.clone(), 0.7, &mut Mode::Eval);
        assert_eq!(y, x);
        assert!(mask.is_none());
    }

    #[test]
    fn max_pool_ignores_non_max_changes() {
        let mut x = array![[1.0, 5.0], [4.0, 2.0], [3.0, 0.0]];
        let (a, _) = max_pool(x.view(), 3);
        x[[0, 0]] = 3.5;
        x[[2, 1]] = 4.9;
        let (b, _) = max_pool(x.view(), 3);
        assert_eq!(a, b);
        assert_eq!(a, array![[4.0, 5.0]]);
    }

    #[test]
    fn bce_matches_direct_formula() {
        let logits = array![0.3, -2.0, 5.0];
        let labels = [1.0, 0.0, 0.0];
        let (loss, _) = bce_with_logits(&logits, &labels);
        let direct: f64 = logits
            .iter()
            .zip(&labels)
            .map(|(&z, &y)| {
                let p = sigmoid(z);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 3.0;
        assert!((loss - direct).abs() < 1e-12);
    }
}
