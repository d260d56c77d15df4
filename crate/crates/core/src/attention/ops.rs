//! Row softmax and layer normalization with their backward passes.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

/// Added to the row variance before the square root. A constant row
/// normalizes to exactly zero centred values, so its output is the shift.
pub const LN_EPS: f64 = 1e-5;

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Gradient of the logits given the softmax output `a` and the gradient
/// `d_a` of the weights: `a * (d_a - sum(d_a * a))` per row.
pub fn softmax_rows_backward(a: &Array2<f64>, d_a: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(a.raw_dim());
    for ((a_row, d_row), mut o_row) in a.rows().into_iter().zip(d_a.rows()).zip(out.rows_mut()) {
        let dot: f64 = a_row.iter().zip(d_row.iter()).map(|(x, y)| x * y).sum();
        for ((o, &ai), &di) in o_row.iter_mut().zip(a_row.iter()).zip(d_row.iter()) {
            *o = ai * (di - dot);
        }
    }
    out
}

/// Closed-form Jacobian of softmax for one probability vector: `diag(a) - a a^T`.
pub fn softmax_jacobian(a: &Array1<f64>) -> Array2<f64> {
    let n = a.len();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            a[i] - a[i] * a[j]
        } else {
            -a[i] * a[j]
        }
    })
}

/// Intermediate values of a layer-norm forward needed for its backward.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Layer norm over the channel axis with learned scale and shift.
pub fn layer_norm(
    x: &Array2<f64>,
    scale: &Array1<f64>,
    shift: &Array1<f64>,
) -> (Array2<f64>, LayerNormCache) {
    let channels = x.ncols() as f64;
    let mut normalized = Array2::zeros(x.raw_dim());
    let mut inv_std = Array1::zeros(x.nrows());
    for (i, row) in x.rows().into_iter().enumerate() {
        let mean = row.sum() / channels;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / channels;
        let r = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = r;
        let constant = row.iter().all(|&v| v == row[0]);
        for (o, &v) in normalized.row_mut(i).iter_mut().zip(row.iter()) {
            *o = if constant { 0.0 } else { (v - mean) * r };
        }
    }
    let out = &normalized * scale + shift;
    (
        out,
        LayerNormCache {
            normalized,
            inv_std,
        },
    )
}

/// Returns `(d_x, d_scale, d_shift)`.
pub fn layer_norm_backward(
    cache: &LayerNormCache,
    scale: &Array1<f64>,
    d_out: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let d_scale = (d_out * &cache.normalized).sum_axis(Axis(0));
    let d_shift = d_out.sum_axis(Axis(0));
    let d_norm = d_out * scale;
    let channels = d_out.ncols() as f64;
    let mut d_x = Array2::zeros(d_out.raw_dim());
    for i in 0..d_out.nrows() {
        let g = d_norm.row(i);
        let xh = cache.normalized.row(i);
        let mean_g = g.sum() / channels;
        let mean_gx = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / channels;
        let r = cache.inv_std[i];
        for j in 0..d_out.ncols() {
            d_x[[i, j]] = r * (g[j] - mean_g - xh[j] * mean_gx);
        }
    }
    (d_x, d_scale, d_shift)
}

/// Channel slice `[head * width, (head + 1) * width)`.
pub fn head_slice(x: &Array2<f64>, head: usize, width: usize) -> ArrayView2<'_, f64> {
    x.slice(s![.., head * width..(head + 1) * width])
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_constant_logits_uniform() {
        let a = softmax_rows(array![[3.0, 3.0, 3.0, 3.0]].view());
        assert!(a.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let one = softmax_rows(array![[-7.5]].view());
        assert_eq!(one[[0, 0]], 1.0);
    }

    #[test]
    fn softmax_handles_large_logits() {
        let a = softmax_rows(array![[1000.0, 1000.0, -1000.0]].view());
        assert!((a[[0, 0]] - 0.5).abs() < 1e-15);
        assert_eq!(a[[0, 2]], 0.0);
    }

    #[test]
    fn constant_row_normalizes_to_shift() {
        let x = array![[0.1, 0.1, 0.1], [1.0, 2.0, 3.0]];
        let scale = array![2.0, 3.0, 4.0];
        let shift = array![0.5, -0.5, 0.0];
        let (y, _) = layer_norm(&x, &scale, &shift);
        assert_eq!(y.row(0).to_vec(), vec![0.5, -0.5, 0.0]);
        let (y, _) = layer_norm(&x, &Array1::ones(3), &Array1::zeros(3));
        assert!(y.row(1).sum().abs() < 1e-12);
    }
}
