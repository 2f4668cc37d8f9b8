//! Forward and backward passes of the encoder building blocks.
//!
//! Every forward returns what its backward needs; gradients accumulate into
//! caller-owned buffers.

use ndarray::{s, Array2, ArrayView2, Axis};

pub const LN_EPS: f64 = 1e-5;

/// Adds `bias` (1 x d) to every row.
pub fn add_row(m: &mut Array2<f64>, bias: &Array2<f64>) {
    *m += &bias.row(0);
}

/// Column sums as a 1 x d matrix.
pub fn sum_rows(m: &Array2<f64>) -> Array2<f64> {
    m.sum_axis(Axis(0)).insert_axis(Axis(0))
}

/// `x @ w + b`
pub fn linear(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut y = x.dot(w);
    add_row(&mut y, b);
    y
}

/// Accumulates the weight and bias gradients of `y = x @ w + b` and returns `dx`.
pub fn linear_backward(
    x: ArrayView2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    *dw += &x.t().dot(dy);
    *db += &sum_rows(dy);
    dy.dot(&w.t())
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Vec<f64>,
}

/// Row-wise layer norm with gain `g` and bias `b` (both 1 x d).
pub fn layer_norm(x: ArrayView2<f64>, g: &Array2<f64>, b: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in xhat.axis_iter_mut(Axis(0)) {
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * is);
        inv_std.push(is);
    }
    let mut y = &xhat * &g.row(0);
    add_row(&mut y, b);
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    g: &Array2<f64>,
    dy: &Array2<f64>,
    dg: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    *dg += &sum_rows(&(dy * &cache.xhat));
    *db += &sum_rows(dy);
    let d = dy.ncols() as f64;
    let mut dx = dy * &g.row(0);
    for ((mut row, xh), &is) in dx
        .axis_iter_mut(Axis(0))
        .zip(cache.xhat.axis_iter(Axis(0)))
        .zip(&cache.inv_std)
    {
        let mean_d = row.sum() / d;
        let mean_dx = row.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        for (v, &x) in row.iter_mut().zip(xh) {
            *v = is * (*v - mean_d - x * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.axis_iter_mut(Axis(0)) {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Attention probabilities per head, T x T.
    pub probs: Vec<Array2<f64>>,
    /// Concatenated head outputs before the output projection.
    pub merged: Array2<f64>,
}

/// Scaled dot-product attention over `heads` column blocks of q, k, v.
pub fn multi_head_attention(q: Array2<f64>, k: Array2<f64>, v: Array2<f64>, heads: usize) -> AttentionCache {
    let (t, d) = q.dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut merged = Array2::zeros((t, d));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t());
        scores *= scale;
        softmax_rows(&mut scores);
        merged.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    AttentionCache {
        q,
        k,
        v,
        probs,
        merged,
    }
}

/// Returns `(dq, dk, dv)` given the gradient of the merged head outputs.
pub fn multi_head_attention_backward(
    cache: &AttentionCache,
    dmerged: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let (t, d) = cache.q.dim();
    let heads = cache.probs.len();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros((t, d));
    let mut dk = Array2::zeros((t, d));
    let mut dv = Array2::zeros((t, d));
    for (h, p) in cache.probs.iter().enumerate() {
        let cols = s![.., h * dh..(h + 1) * dh];
        let dout = dmerged.slice(cols);
        let dp = dout.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dout));
        let mut ds = p * &dp;
        for (mut row, prow) in ds.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))) {
            let dot: f64 = row.sum();
            for (x, &pp) in row.iter_mut().zip(prow) {
                *x -= pp * dot;
            }
        }
        ds *= scale;
        dq.slice_mut(cols).assign(&ds.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&cache.q.slice(cols)));
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{finite_difference_check, FnObjective};
    use ndarray::Array2;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::stream(seed, 0);
        Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    /// Weighted sum of outputs so every output element gets a distinct upstream gradient.
    fn probe(shape: (usize, usize)) -> Array2<f64> {
        random(shape.0, shape.1, 99)
    }

    #[test]
    fn layer_norm_input_gradient() {
        let g = random(1, 5, 1) + 1.0;
        let b = random(1, 5, 2);
        let w = probe((3, 5));
        let obj = FnObjective {
            value: |x: &[f64]| {
                let x = Array2::from_shape_vec((3, 5), x.to_vec()).unwrap();
                (layer_norm(x.view(), &g, &b).0 * &w).sum()
            },
            gradient: |x: &[f64]| {
                let x = Array2::from_shape_vec((3, 5), x.to_vec()).unwrap();
                let (_, cache) = layer_norm(x.view(), &g, &b);
                let mut dg = Array2::zeros((1, 5));
                let mut db = Array2::zeros((1, 5));
                layer_norm_backward(&cache, &g, &w, &mut dg, &mut db).into_iter().collect()
            },
        };
        let x: Vec<f64> = random(3, 5, 3).into_iter().collect();
        let r = finite_difference_check(&obj, &x, 1e-5, 1e-6);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn gelu_derivative() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn attention_gradients() {
        let (t, d, heads) = (4, 6, 2);
        let w = probe((t, d));
        let split = |x: &[f64]| {
            let m = |i: usize| Array2::from_shape_vec((t, d), x[i * t * d..(i + 1) * t * d].to_vec()).unwrap();
            (m(0), m(1), m(2))
        };
        let obj = FnObjective {
            value: |x: &[f64]| {
                let (q, k, v) = split(x);
                (multi_head_attention(q, k, v, heads).merged * &w).sum()
            },
            gradient: |x: &[f64]| {
                let (q, k, v) = split(x);
                let cache = multi_head_attention(q, k, v, heads);
                let (dq, dk, dv) = multi_head_attention_backward(&cache, &w);
                dq.into_iter().chain(dk).chain(dv).collect()
            },
        };
        let x: Vec<f64> = random(3 * t, d, 5).into_iter().collect();
        let r = finite_difference_check(&obj, &x, 1e-5, 1e-6);
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut m = random(3, 4, 8) * 50.0;
        softmax_rows(&mut m);
        for row in m.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
