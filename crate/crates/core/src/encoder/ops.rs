//! Row-wise building blocks with hand-written backward passes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

pub const LN_EPS: f64 = 1e-5;

/// Saved activations of a layer norm.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub fn layer_norm(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let (rows, d) = x.dim();
    let mut normalized = Array2::zeros((rows, d));
    let mut out = Array2::zeros((rows, d));
    let mut inv_std = Array1::zeros(rows);
    let gamma = gamma.to_vec();
    let beta = beta.to_vec();
    for (i, row) in x.outer_iter().enumerate() {
        let row = row.to_vec();
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = is;
        let nrow = normalized.row_mut(i).into_slice().expect("contiguous row");
        let orow = out.row_mut(i).into_slice().expect("contiguous row");
        for j in 0..d {
            let n = (row[j] - mean) * is;
            nrow[j] = n;
            orow[j] = n * gamma[j] + beta[j];
        }
    }
    (
        out,
        LayerNormCache {
            normalized,
            inv_std,
        },
    )
}

/// Layer norm without saved activations.
pub fn layer_norm_infer(
    x: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
) -> Array2<f64> {
    let d = x.ncols();
    let mut out = x.as_standard_layout().into_owned();
    let gamma = gamma.as_slice().expect("contiguous gamma");
    let beta = beta.as_slice().expect("contiguous beta");
    for row in out
        .as_slice_mut()
        .expect("standard layout")
        .chunks_exact_mut(d)
    {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        for ((v, g), b) in row.iter_mut().zip(gamma).zip(beta) {
            *v = (*v - mean) * is * g + b;
        }
    }
    out
}

/// Returns `dx`; accumulates into `d_gamma` and `d_beta`.
pub fn layer_norm_backward(
    dy: ArrayView2<f64>,
    gamma: ArrayView1<f64>,
    cache: &LayerNormCache,
    d_gamma: &mut Array1<f64>,
    d_beta: &mut Array1<f64>,
) -> Array2<f64> {
    let d = dy.ncols() as f64;
    *d_gamma += &(&dy * &cache.normalized).sum_axis(Axis(0));
    *d_beta += &dy.sum_axis(Axis(0));
    let dxhat = &dy * &gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let g = dxhat.row(i);
        let xh = cache.normalized.row(i);
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        let is = cache.inv_std[i];
        for ((o, &gv), &xv) in dx.row_mut(i).iter_mut().zip(g.iter()).zip(xh.iter()) {
            *o = is * (gv - mean_g - xv * mean_gx);
        }
    }
    dx
}

/// `x W + b`
pub fn affine(x: ArrayView2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// Backward of [`affine`]: accumulates parameter gradients, returns `dx`.
pub fn affine_backward(
    x: ArrayView2<f64>,
    w: &Array2<f64>,
    dy: ArrayView2<f64>,
    dw: &mut Array2<f64>,
    db: &mut Array1<f64>,
) -> Array2<f64> {
    *dw += &x.t().dot(&dy);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))`, stable for large |x|.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Softmax over the entries where `allowed` is true; disallowed entries get
/// exactly zero. A row with no allowed entry is all zeros.
pub fn masked_softmax_in_place(row: &mut [f64], allowed: impl Fn(usize) -> bool) {
    let mut max = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if allowed(i) && v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (i, v) in row.iter_mut().enumerate() {
        if allowed(i) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        let x = array![[0.3, -1.2, 2.0, 0.5], [1.0, 1.1, -0.4, 0.0]];
        let gamma = array![1.2, 0.7, -0.3, 1.0];
        let beta = array![0.1, 0.0, 0.2, -0.1];
        let w = array![[0.5, -1.0, 0.25, 2.0], [1.5, 0.3, -0.7, 0.1]];
        let loss =
            |x: &Array2<f64>| (&layer_norm(x.view(), gamma.view(), beta.view()).0 * &w).sum();
        let (_, cache) = layer_norm(x.view(), gamma.view(), beta.view());
        let mut dg = Array1::zeros(4);
        let mut db = Array1::zeros(4);
        let dx = layer_norm_backward(w.view(), gamma.view(), &cache, &mut dg, &mut db);
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..4 {
                let mut p = x.clone();
                p[[i, j]] += h;
                let mut m = x.clone();
                m[[i, j]] -= h;
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!((fd - dx[[i, j]]).abs() < 1e-7, "{fd} vs {}", dx[[i, j]]);
            }
        }
    }

    #[test]
    fn masked_softmax_rows() {
        let mut row = [1.0, 2.0, 3.0];
        masked_softmax_in_place(&mut row, |i| i != 1);
        assert_eq!(row[1], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut dead = [1.0, 2.0];
        masked_softmax_in_place(&mut dead, |_| false);
        assert_eq!(dead, [0.0, 0.0]);
    }

    #[test]
    fn stable_log_sigmoid() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert!((log_sigmoid(40.0)).abs() < 1e-15);
    }
}
