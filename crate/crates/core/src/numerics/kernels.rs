//! Forward and backward kernels shared by the tape and the standalone ops.

use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::parallel;

/// Rows of the output handled by one unit of (possibly parallel) work.
/// Fixed so the arithmetic is the same whatever the thread count.
const GEMM_ROW_BLOCK: usize = 64;

/// How a matrix operand is stored relative to its logical shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Stored as its logical shape, row-major.
    Normal,
    /// Stored as the transpose of its logical shape, row-major.
    Transposed,
}

fn matrix_dims<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "{what} must be 2-D, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Logical `a · b`, where either operand may be stored transposed.
/// With `acc = Some(c)`, the product is added into `c` instead.
pub fn gemm<T: Real>(
    a: &Tensor<T>,
    la: Layout,
    b: &Tensor<T>,
    lb: Layout,
) -> Result<Tensor<T>> {
    let (ar, ac) = matrix_dims(a, "left operand")?;
    let (br, bc) = matrix_dims(b, "right operand")?;
    let (m, k) = match la {
        Layout::Normal => (ar, ac),
        Layout::Transposed => (ac, ar),
    };
    let (k2, n) = match lb {
        Layout::Normal => (br, bc),
        Layout::Transposed => (bc, br),
    };
    if k != k2 {
        return Err(Error::Shape(format!(
            "inner dimensions disagree: {m}x{k} · {k2}x{n}"
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_into(a.data(), la, m, k, b.data(), lb, n, out.data_mut(), false);
    Ok(out)
}

/// Raw product into `c` (`m×n`, row-major). Shapes are trusted.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_into<T: Real>(
    a: &[T],
    la: Layout,
    m: usize,
    k: usize,
    b: &[T],
    lb: Layout,
    n: usize,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    parallel::for_each_chunk_mut(c, GEMM_ROW_BLOCK * n, |block, chunk| {
        let r0 = block * GEMM_ROW_BLOCK;
        let rows = chunk.len() / n;
        // SAFETY: row offset r0 < m keeps the A pointer inside `a`; the chunk
        // is an exclusive `rows×n` window of `c` and never aliases a or b.
        unsafe {
            T::gemm(
                rows,
                k,
                n,
                T::one(),
                a.as_ptr().offset(r0 as isize * rsa),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Standard matrix product of `a[m×k]` and `b[k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    gemm(a, Layout::Normal, b, Layout::Normal)
}

/// Row-wise softmax, stabilised by subtracting each row's maximum.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.ensure_finite("softmax input")?;
    let mut out = x.clone();
    let cols = x.cols();
    if cols == 0 {
        return Ok(out);
    }
    for row in out.data_mut().chunks_mut(cols) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Per-row statistics kept for the layer-norm backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Layer normalisation over the last axis followed by `gamma * x̂ + beta`.
pub fn layer_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    layer_norm_with_cache(x, gamma, beta, eps).map(|(y, _)| y)
}

pub(crate) fn layer_norm_with_cache<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Shape(format!(
            "layer norm over {d} features given gamma/beta of {}/{}",
            gamma.len(),
            beta.len()
        )));
    }
    if eps <= T::zero() {
        return Err(Error::Config("layer norm eps must be positive".into()));
    }
    let rows = x.rows();
    let dt = T::from_usize(d).unwrap();
    let mut xhat = Tensor::zeros(x.shape());
    let mut inv_std = vec![T::zero(); rows];
    for ((xr, hr), s) in x
        .data()
        .chunks(d)
        .zip(xhat.data_mut().chunks_mut(d))
        .zip(inv_std.iter_mut())
    {
        let mean = xr.iter().copied().sum::<T>() / dt;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
        let is = T::one() / (var + eps).sqrt();
        for (h, &v) in hr.iter_mut().zip(xr) {
            *h = (v - mean) * is;
        }
        *s = is;
    }
    let mut y = xhat.clone();
    for yr in y.data_mut().chunks_mut(d) {
        for ((v, &g), &b) in yr.iter_mut().zip(gamma.data()).zip(beta.data()) {
            *v = *v * g + b;
        }
    }
    Ok((y, LayerNormCache { xhat, inv_std }))
}

/// Gradients of layer norm: returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward<T: Real>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &LayerNormCache<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = dy.cols();
    let dt = T::from_usize(d).unwrap();
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgamma = Tensor::zeros(&[d]);
    let mut dbeta = Tensor::zeros(&[d]);
    let mut dxhat = vec![T::zero(); d];
    for (r, (dyr, dxr)) in dy
        .data()
        .chunks(d)
        .zip(dx.data_mut().chunks_mut(d))
        .enumerate()
    {
        let xh = cache.xhat.row(r);
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for j in 0..d {
            dxhat[j] = dyr[j] * gamma.data()[j];
            sum_dxhat += dxhat[j];
            sum_dxhat_xhat += dxhat[j] * xh[j];
            dgamma.data_mut()[j] += dyr[j] * xh[j];
            dbeta.data_mut()[j] += dyr[j];
        }
        let scale = cache.inv_std[r] / dt;
        for j in 0..d {
            dxr[j] = scale * (dt * dxhat[j] - sum_dxhat - xh[j] * sum_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

/// Shape of a batched attention computation: `batch` independent sequences
/// of `seq` positions, model width `width` split into `heads` heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionDims {
    pub batch: usize,
    pub seq: usize,
    pub width: usize,
    pub heads: usize,
}

impl AttentionDims {
    pub fn new(batch: usize, seq: usize, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!(
                "model width {width} is not divisible by {heads} attention heads"
            )));
        }
        Ok(Self {
            batch,
            seq,
            width,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn scale<T: Real>(&self) -> T {
        T::one() / T::from_usize(self.head_dim()).unwrap().sqrt()
    }

    fn probs_per_sample(&self) -> usize {
        self.heads * self.seq * self.seq
    }
}

/// Scaled dot-product attention over already-projected `q`, `k`, `v`
/// (`[batch*seq, width]` each). Returns the concatenated head outputs and
/// the post-softmax weights `[batch, heads, seq, seq]`. `keep` is an
/// optional multiplicative dropout mask on the weights, same layout.
pub(crate) fn attention_forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    dims: AttentionDims,
    keep: Option<&[T]>,
) -> (Tensor<T>, Vec<T>) {
    let AttentionDims {
        batch,
        seq,
        width,
        heads,
    } = dims;
    let dh = dims.head_dim();
    let scale: T = dims.scale();
    let pps = dims.probs_per_sample();
    let mut probs = vec![T::zero(); batch * pps];
    parallel::for_each_chunk_mut(&mut probs, pps, |b, p| {
        let base = b * seq * width;
        for h in 0..heads {
            for i in 0..seq {
                let row = &mut p[(h * seq + i) * seq..(h * seq + i + 1) * seq];
                let qi = &q.data()[base + i * width + h * dh..][..dh];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &k.data()[base + j * width + h * dh..][..dh];
                    *s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                }
                softmax_in_place(row);
            }
        }
    });
    let mut out = Tensor::zeros(&[batch * seq, width]);
    parallel::for_each_chunk_mut(out.data_mut(), seq * width, |b, o| {
        let base = b * seq * width;
        for h in 0..heads {
            for i in 0..seq {
                let orow = &mut o[i * width + h * dh..][..dh];
                for j in 0..seq {
                    let idx = b * pps + (h * seq + i) * seq + j;
                    let w = match keep {
                        Some(m) => probs[idx] * m[idx],
                        None => probs[idx],
                    };
                    let vj = &v.data()[base + j * width + h * dh..][..dh];
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += w * vv;
                    }
                }
            }
        }
    });
    (out, probs)
}

/// Backward of [`attention_forward`]: returns `(dq, dk, dv)`.
pub(crate) fn attention_backward<T: Real>(
    dout: &Tensor<T>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    keep: Option<&[T]>,
    dims: AttentionDims,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let AttentionDims {
        batch,
        seq,
        width,
        heads,
    } = dims;
    let dh = dims.head_dim();
    let scale: T = dims.scale();
    let pps = dims.probs_per_sample();
    let per_sample = parallel::map_range(batch, |b| {
        let base = b * seq * width;
        let mut dq = vec![T::zero(); seq * width];
        let mut dk = vec![T::zero(); seq * width];
        let mut dv = vec![T::zero(); seq * width];
        let mut dp = vec![T::zero(); seq];
        for h in 0..heads {
            for i in 0..seq {
                let prow = &probs[b * pps + (h * seq + i) * seq..][..seq];
                let krow = keep.map(|m| &m[b * pps + (h * seq + i) * seq..][..seq]);
                let dorow = &dout.data()[base + i * width + h * dh..][..dh];
                // gradient w.r.t. the (dropped-out) weights, then the raw weights
                for j in 0..seq {
                    let vj = &v.data()[base + j * width + h * dh..][..dh];
                    let da: T = dorow.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    let w = match krow {
                        Some(m) => prow[j] * m[j],
                        None => prow[j],
                    };
                    let dvj = &mut dv[j * width + h * dh..][..dh];
                    for (d, &g) in dvj.iter_mut().zip(dorow) {
                        *d += w * g;
                    }
                    dp[j] = match krow {
                        Some(m) => da * m[j],
                        None => da,
                    };
                }
                let dot: T = dp.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                let qi = &q.data()[base + i * width + h * dh..][..dh];
                for j in 0..seq {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = &k.data()[base + j * width + h * dh..][..dh];
                    let dqi = &mut dq[i * width + h * dh..][..dh];
                    for (d, &kk) in dqi.iter_mut().zip(kj) {
                        *d += ds * kk;
                    }
                    let dkj = &mut dk[j * width + h * dh..][..dh];
                    for (d, &qq) in dkj.iter_mut().zip(qi) {
                        *d += ds * qq;
                    }
                }
            }
        }
        (dq, dk, dv)
    });
    let mut dq = Vec::with_capacity(batch * seq * width);
    let mut dk = Vec::with_capacity(batch * seq * width);
    let mut dv = Vec::with_capacity(batch * seq * width);
    for (a, b, c) in per_sample {
        dq.extend(a);
        dk.extend(b);
        dv.extend(c);
    }
    let shape = vec![batch * seq, width];
    (
        Tensor::new(shape.clone(), dq).unwrap(),
        Tensor::new(shape.clone(), dk).unwrap(),
        Tensor::new(shape, dv).unwrap(),
    )
}

/// Projection weights of one multi-head attention sublayer. Weights are
/// stored `[in, out]` so a projection is `x · w + b`.
#[derive(Clone, Debug)]
pub struct AttentionWeights<T> {
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
}

pub(crate) fn affine<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut y = matmul(x, w)?;
    if b.len() != y.cols() {
        return Err(Error::Shape(format!(
            "bias of length {} for {} outputs",
            b.len(),
            y.cols()
        )));
    }
    let n = y.cols();
    for row in y.data_mut().chunks_mut(n) {
        for (v, &bb) in row.iter_mut().zip(b.data()) {
            *v += bb;
        }
    }
    Ok(y)
}

/// Bidirectional multi-head self-attention over one sequence `x[s×d]`.
pub fn multi_head_attention<T: Real>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    n_heads: usize,
) -> Result<Tensor<T>> {
    let (s, d) = matrix_dims(x, "attention input")?;
    let dims = AttentionDims::new(1, s, d, n_heads)?;
    let q = affine(x, &w.wq, &w.bq)?;
    let k = affine(x, &w.wk, &w.bk)?;
    let v = affine(x, &w.wv, &w.bv)?;
    let (ctx, _) = attention_forward(&q, &k, &v, dims, None);
    affine(&ctx, &w.wo, &w.bo)
}
