//! Softmax, layer normalization, ReLU and the classification losses, each
//! with the matching backward kernel used by the autograd graph.

use super::Matrix;
use crate::error::{shape_err, Error, Result};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        // every logit masked: fall back to uniform
        let u = 1.0 / row.len() as f64;
        row.iter_mut().for_each(|v| *v = u);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `dx = y ⊙ (dy − rowsum(dy ⊙ y))` for `y = softmax_rows(x)`.
pub fn softmax_rows_backward(y: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let yr = y.row(r);
        let dyr = dy.row(r);
        let s: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((o, &yv), &g) in dx.row_mut(r).iter_mut().zip(yr).zip(dyr) {
            *o = yv * (g - s);
        }
    }
    dx
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn relu(m: &Matrix) -> Matrix {
    m.map(|v| v.max(0.0))
}

/// Per-row cache needed by [`layer_norm_backward`].
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
}

/// `gamma ⊙ (x − mean)/sqrt(var + eps) + beta` per row, population variance.
pub fn layer_norm(x: &Matrix, gamma: &Matrix, beta: &Matrix, eps: f64) -> Result<Matrix> {
    Ok(layer_norm_with_cache(x, gamma, beta, eps)?.0)
}

pub fn layer_norm_with_cache(
    x: &Matrix,
    gamma: &Matrix,
    beta: &Matrix,
    eps: f64,
) -> Result<(Matrix, LayerNormCache)> {
    let d = x.cols();
    if gamma.shape() != (1, d) || beta.shape() != (1, d) {
        return Err(shape_err!(
            "layer_norm gamma {:?} / beta {:?} for width {d}",
            gamma.shape(),
            beta.shape()
        ));
    }
    if eps < 0.0 {
        return Err(Error::Numeric(format!("layer_norm eps {eps} is negative")));
    }
    let mut normalized = Matrix::zeros(x.rows(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let denom = var + eps;
        // eps = 0 on a constant row: define the normalized row as zero
        let istd = if denom > 0.0 { 1.0 / denom.sqrt() } else { 0.0 };
        inv_std.push(istd);
        for c in 0..d {
            let n = (row[c] - mean) * istd;
            normalized[(r, c)] = n;
            out[(r, c)] = gamma[(0, c)] * n + beta[(0, c)];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(dy: &Matrix, gamma: &Matrix, cache: &LayerNormCache) -> (Matrix, Matrix, Matrix) {
    let (n, d) = dy.shape();
    let mut dx = Matrix::zeros(n, d);
    let mut dgamma = Matrix::zeros(1, d);
    let mut dbeta = Matrix::zeros(1, d);
    let df = d as f64;
    for r in 0..n {
        let xh = cache.normalized.row(r);
        let g = dy.row(r);
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        for c in 0..d {
            dgamma[(0, c)] += g[c] * xh[c];
            dbeta[(0, c)] += g[c];
            let dxh = g[c] * gamma[(0, c)];
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[c];
        }
        let istd = cache.inv_std[r];
        for c in 0..d {
            let dxh = g[c] * gamma[(0, c)];
            dx[(r, c)] = istd / df * (df * dxh - sum_dxh - xh[c] * sum_dxh_xh);
        }
    }
    (dx, dgamma, dbeta)
}

/// What a classification loss is measured against.
#[derive(Debug, Clone)]
pub enum Targets {
    /// One class index per logits row (cross-entropy over log-softmax).
    Classes(Vec<usize>),
    /// 0/1 matrix shaped like the logits (per-class sigmoid, binary cross-entropy).
    Multilabel(Matrix),
}

/// Mean loss over rows (CE) or over all entries (BCE).
pub fn classification_loss(logits: &Matrix, targets: &Targets) -> Result<f64> {
    Ok(classification_loss_with_grad(logits, targets)?.0)
}

/// Loss together with its gradient with respect to the logits.
pub fn classification_loss_with_grad(logits: &Matrix, targets: &Targets) -> Result<(f64, Matrix)> {
    let (n, c) = logits.shape();
    match targets {
        Targets::Classes(classes) => {
            if classes.len() != n {
                return Err(Error::Target(format!("{} targets for {n} logit rows", classes.len())));
            }
            if n == 0 {
                return Err(Error::Target("no logit rows".into()));
            }
            let mut grad = softmax_rows(logits);
            let mut loss = 0.0;
            for (r, &t) in classes.iter().enumerate() {
                if t >= c {
                    return Err(Error::Target(format!("class {t} out of range for {c} classes")));
                }
                let lse = log_sum_exp(logits.row(r));
                loss += lse - logits[(r, t)];
                grad[(r, t)] -= 1.0;
            }
            let inv = 1.0 / n as f64;
            Ok(((loss * inv).max(0.0), grad.scale(inv)))
        }
        Targets::Multilabel(y) => {
            logits.ensure_same_shape(y, "multilabel targets")?;
            if y.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Target("multilabel targets must be 0 or 1".into()));
            }
            let count = (n * c) as f64;
            if count == 0.0 {
                return Err(Error::Target("empty logits".into()));
            }
            let mut loss = 0.0;
            let mut grad = Matrix::zeros(n, c);
            for (i, (&x, &t)) in logits.data().iter().zip(y.data()).enumerate() {
                loss += x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
                grad.data_mut()[i] = (sigmoid(x) - t) / count;
            }
            Ok(((loss / count).max(0.0), grad))
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
