//! Post-norm encoder block, forward with cache and reverse pass.

use super::params::{BlockParams, LinearParams, NormParams};
use crate::error::Result;
use crate::numerics::{
    gelu, gelu_grad, layer_norm_rows_backward, layer_norm_rows_cached, linear, linear_backward,
    matmul, matmul_nt, matmul_tn, softmax_in_place, softmax_rows_backward, LayerNormCache, Real,
    Tensor2D,
};

pub(crate) fn apply_linear<T: Real>(x: &Tensor2D<T>, p: &LinearParams<T>) -> Result<Tensor2D<T>> {
    linear(x, &p.weight, p.bias.data())
}

/// Backward of [`apply_linear`]; parameter gradients land in `grad`.
pub(crate) fn linear_grad<T: Real>(
    x: &Tensor2D<T>,
    p: &LinearParams<T>,
    dout: &Tensor2D<T>,
    grad: &mut LinearParams<T>,
) -> Result<Tensor2D<T>> {
    linear_backward(
        x,
        &p.weight,
        dout,
        Some(&mut grad.weight),
        Some(grad.bias.data_mut()),
    )
}

fn norm_forward<T: Real>(
    x: &Tensor2D<T>,
    p: &NormParams<T>,
    eps: T,
) -> Result<(Tensor2D<T>, LayerNormCache<T>)> {
    layer_norm_rows_cached(x, p.gain.data(), p.bias.data(), eps)
}

fn norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    p: &NormParams<T>,
    dout: &Tensor2D<T>,
    grad: &mut NormParams<T>,
) -> Tensor2D<T> {
    let NormParams { gain, bias } = grad;
    layer_norm_rows_backward(
        cache,
        p.gain.data(),
        dout,
        Some(gain.data_mut()),
        Some(bias.data_mut()),
    )
}

fn head_slice<T: Real>(m: &Tensor2D<T>, h: usize, hd: usize) -> Tensor2D<T> {
    let mut out = Tensor2D::zeros(m.rows(), hd);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[h * hd..(h + 1) * hd]);
    }
    out
}

fn head_scatter<T: Real>(dst: &mut Tensor2D<T>, src: &Tensor2D<T>, h: usize, hd: usize) {
    for r in 0..src.rows() {
        dst.row_mut(r)[h * hd..(h + 1) * hd].copy_from_slice(src.row(r));
    }
}

/// Everything the reverse pass of one block needs.
#[derive(Clone, Debug)]
pub(crate) struct BlockCache<T> {
    input: Tensor2D<T>,
    q: Tensor2D<T>,
    k: Tensor2D<T>,
    v: Tensor2D<T>,
    probs: Vec<Tensor2D<T>>,
    context: Tensor2D<T>,
    attn_norm: LayerNormCache<T>,
    hidden: Tensor2D<T>,
    ff_pre: Tensor2D<T>,
    ff_act: Tensor2D<T>,
    ff_norm: LayerNormCache<T>,
}

pub(crate) fn block_forward<T: Real>(
    p: &BlockParams<T>,
    x: &Tensor2D<T>,
    n_heads: usize,
    eps: T,
) -> Result<(Tensor2D<T>, BlockCache<T>)> {
    let d = x.cols();
    let hd = d / n_heads;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();
    let q = apply_linear(x, &p.query)?;
    let k = apply_linear(x, &p.key)?;
    let v = apply_linear(x, &p.value)?;
    let mut context = Tensor2D::zeros(x.rows(), d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = (head_slice(&q, h, hd), head_slice(&k, h, hd), head_slice(&v, h, hd));
        let mut s = matmul_nt(&qh, &kh)?.scale(scale);
        for r in 0..s.rows() {
            softmax_in_place(s.row_mut(r));
        }
        head_scatter(&mut context, &matmul(&s, &vh)?, h, hd);
        probs.push(s);
    }
    let attn = apply_linear(&context, &p.out)?;
    let (hidden, attn_norm) = norm_forward(&x.add(&attn)?, &p.attn_norm, eps)?;
    let ff_pre = apply_linear(&hidden, &p.ff_in)?;
    let ff_act = ff_pre.map(gelu);
    let ff = apply_linear(&ff_act, &p.ff_out)?;
    let (out, ff_norm) = norm_forward(&hidden.add(&ff)?, &p.ff_norm, eps)?;
    Ok((
        out,
        BlockCache {
            input: x.clone(),
            q,
            k,
            v,
            probs,
            context,
            attn_norm,
            hidden,
            ff_pre,
            ff_act,
            ff_norm,
        },
    ))
}

/// Returns the gradient with respect to the block input.
pub(crate) fn block_backward<T: Real>(
    p: &BlockParams<T>,
    cache: &BlockCache<T>,
    dout: &Tensor2D<T>,
    grad: &mut BlockParams<T>,
    n_heads: usize,
) -> Result<Tensor2D<T>> {
    let d = dout.cols();
    let hd = d / n_heads;
    let scale = T::one() / T::from_usize(hd).unwrap().sqrt();

    // LN(h + FF(h))
    let dsum2 = norm_backward(&cache.ff_norm, &p.ff_norm, dout, &mut grad.ff_norm);
    let dact = linear_grad(&cache.ff_act, &p.ff_out, &dsum2, &mut grad.ff_out)?;
    let mut dpre = dact;
    for (g, &x) in dpre.data_mut().iter_mut().zip(cache.ff_pre.data()) {
        *g = *g * gelu_grad(x);
    }
    let mut dhidden = linear_grad(&cache.hidden, &p.ff_in, &dpre, &mut grad.ff_in)?;
    dhidden.add_assign(&dsum2)?;

    // LN(x + MHA(x))
    let dsum1 = norm_backward(&cache.attn_norm, &p.attn_norm, &dhidden, &mut grad.attn_norm);
    let dcontext = linear_grad(&cache.context, &p.out, &dsum1, &mut grad.out)?;
    let rows = dout.rows();
    let (mut dq, mut dk, mut dv) = (
        Tensor2D::zeros(rows, d),
        Tensor2D::zeros(rows, d),
        Tensor2D::zeros(rows, d),
    );
    for h in 0..n_heads {
        let probs = &cache.probs[h];
        let (qh, kh, vh) = (
            head_slice(&cache.q, h, hd),
            head_slice(&cache.k, h, hd),
            head_slice(&cache.v, h, hd),
        );
        let dctx = head_slice(&dcontext, h, hd);
        let dprobs = matmul_nt(&dctx, &vh)?;
        head_scatter(&mut dv, &matmul_tn(probs, &dctx)?, h, hd);
        let dscores = softmax_rows_backward(probs, &dprobs).scale(scale);
        head_scatter(&mut dq, &matmul(&dscores, &kh)?, h, hd);
        head_scatter(&mut dk, &matmul_tn(&dscores, &qh)?, h, hd);
    }
    let mut dx = dsum1;
    dx.add_assign(&linear_grad(&cache.input, &p.query, &dq, &mut grad.query)?)?;
    dx.add_assign(&linear_grad(&cache.input, &p.key, &dk, &mut grad.key)?)?;
    dx.add_assign(&linear_grad(&cache.input, &p.value, &dv, &mut grad.value)?)?;
    Ok(dx)
}
