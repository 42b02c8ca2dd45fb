//! Row-wise kernels and their reverse-mode counterparts.
//!
//! Every `*_backward` takes the upstream gradient plus whatever the forward pass cached
//! and returns input gradients; parameter gradients are accumulated into caller-owned
//! buffers so several uses of one parameter sum naturally.

use super::tensor::{Real, Tensor2D};
use crate::error::{Error, Result};

/// Numerically stable softmax of each row.
pub fn softmax_rows<T: Real>(m: &Tensor2D<T>) -> Tensor2D<T> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Log-softmax of a single row.
pub fn log_softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&v| v - lse).collect()
}

/// Gradient of a row-wise softmax given its output `y` and upstream `dy`.
pub fn softmax_rows_backward<T: Real>(y: &Tensor2D<T>, dy: &Tensor2D<T>) -> Tensor2D<T> {
    let mut dx = Tensor2D::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (yr, dyr) = (y.row(r), dy.row(r));
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
            *d = yr[c] * (dyr[c] - dot);
        }
    }
    dx
}

/// Plain matrix product, fixed `i-k-j` accumulation order.
pub fn matmul<T: Real>(a: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if a.cols() != b.rows() {
        return Err(Error::Shape(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor2D::zeros(n, m);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..n {
        let orow = &mut od[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Ok(out)
}

/// `a^T b` without materializing the transpose.
pub fn matmul_tn<T: Real>(a: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if a.rows() != b.rows() {
        return Err(Error::Shape(format!(
            "matmul_tn {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, k, m) = (a.cols(), a.rows(), b.cols());
    let mut out = Tensor2D::zeros(n, m);
    for p in 0..k {
        let arow = a.row(p);
        let brow = b.row(p);
        for i in 0..n {
            let av = arow[i];
            let orow = out.row_mut(i);
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Ok(out)
}

/// `a b^T` without materializing the transpose.
pub fn matmul_nt<T: Real>(a: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<Tensor2D<T>> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "matmul_nt {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor2D::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let arow = a.row(i);
        for j in 0..b.rows() {
            let v = arow.iter().zip(b.row(j)).map(|(&x, &y)| x * y).sum();
            out.set(i, j, v);
        }
    }
    Ok(out)
}

/// Affine map `m · weight + bias`, `weight` stored as `in × out`.
pub fn linear<T: Real>(m: &Tensor2D<T>, weight: &Tensor2D<T>, bias: &[T]) -> Result<Tensor2D<T>> {
    if bias.len() != weight.cols() {
        return Err(Error::Shape(format!(
            "bias of length {} for {} outputs",
            bias.len(),
            weight.cols()
        )));
    }
    let mut out = matmul(m, weight)?;
    for r in 0..out.rows() {
        for (o, &b) in out.row_mut(r).iter_mut().zip(bias) {
            *o = *o + b;
        }
    }
    Ok(out)
}

/// Backward of [`linear`]. Accumulates into `dweight` / `dbias` when given and returns
/// the input gradient.
pub fn linear_backward<T: Real>(
    input: &Tensor2D<T>,
    weight: &Tensor2D<T>,
    dout: &Tensor2D<T>,
    dweight: Option<&mut Tensor2D<T>>,
    dbias: Option<&mut [T]>,
) -> Result<Tensor2D<T>> {
    if let Some(dw) = dweight {
        dw.add_assign(&matmul_tn(input, dout)?)?;
    }
    if let Some(db) = dbias {
        for r in 0..dout.rows() {
            for (b, &g) in db.iter_mut().zip(dout.row(r)) {
                *b = *b + g;
            }
        }
    }
    matmul_nt(dout, weight)
}

/// Cached statistics from [`layer_norm_rows_cached`].
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub normalized: Tensor2D<T>,
    pub inv_std: Vec<T>,
}

pub fn layer_norm_rows<T: Real>(
    m: &Tensor2D<T>,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> Result<Tensor2D<T>> {
    layer_norm_rows_cached(m, gain, bias, eps).map(|(y, _)| y)
}

pub fn layer_norm_rows_cached<T: Real>(
    m: &Tensor2D<T>,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> Result<(Tensor2D<T>, LayerNormCache<T>)> {
    if gain.len() != m.cols() || bias.len() != m.cols() {
        return Err(Error::Shape(format!(
            "layer norm over {} columns with gain {} / bias {}",
            m.cols(),
            gain.len(),
            bias.len()
        )));
    }
    if eps <= T::zero() {
        return Err(Error::InvalidArgument("layer norm eps must be positive".into()));
    }
    let n = T::from_usize(m.cols().max(1)).unwrap();
    let mut normalized = Tensor2D::zeros(m.rows(), m.cols());
    let mut out = Tensor2D::zeros(m.rows(), m.cols());
    let mut inv_std = Vec::with_capacity(m.rows());
    for r in 0..m.rows() {
        let row = m.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        inv_std.push(rstd);
        let nrow = normalized.row_mut(r);
        for (c, v) in row.iter().enumerate() {
            nrow[c] = (*v - mean) * rstd;
        }
        let orow = out.row_mut(r);
        for c in 0..orow.len() {
            orow[c] = normalized.get(r, c) * gain[c] + bias[c];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

pub fn layer_norm_rows_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gain: &[T],
    dout: &Tensor2D<T>,
    dgain: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) -> Tensor2D<T> {
    let xhat = &cache.normalized;
    let (rows, cols) = xhat.shape();
    if let Some(dg) = dgain {
        for r in 0..rows {
            for c in 0..cols {
                dg[c] = dg[c] + dout.get(r, c) * xhat.get(r, c);
            }
        }
    }
    if let Some(db) = dbias {
        for r in 0..rows {
            for c in 0..cols {
                db[c] = db[c] + dout.get(r, c);
            }
        }
    }
    let n = T::from_usize(cols.max(1)).unwrap();
    let mut dx = Tensor2D::zeros(rows, cols);
    for r in 0..rows {
        let dxhat: Vec<T> = (0..cols).map(|c| dout.get(r, c) * gain[c]).collect();
        let mean_d = dxhat.iter().copied().sum::<T>() / n;
        let mean_dx = (0..cols).map(|c| dxhat[c] * xhat.get(r, c)).sum::<T>() / n;
        let rstd = cache.inv_std[r];
        for c in 0..cols {
            dx.set(r, c, rstd * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx));
        }
    }
    dx
}

const GELU_COEF: f64 = 0.044715;

/// GELU, tanh approximation.
pub fn gelu<T: Real>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + T::lit(GELU_COEF) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + T::lit(GELU_COEF) * x * x * x);
    let t = inner.tanh();
    let dinner = k * (T::one() + T::lit(3.0 * GELU_COEF) * x * x);
    T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * dinner
}
