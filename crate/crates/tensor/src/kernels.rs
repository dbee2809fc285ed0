//! Slice-level kernels shared by the forward and backward passes.

use crate::scalar::{gemm, Mat, Scalar};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                let dst = &mut cols[row..row + p];
                for oy in 0..g.ho {
                    let seg = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        seg.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((c * g.kh + ki) * g.kw + kj) * p;
                let src = &cols[row..row + p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut out = vec![T::zero(); g.n * out_len];
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for s in 0..g.n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let src: &[T] = if g.pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        let os = &mut out[s * out_len..(s + 1) * out_len];
        gemm(
            Mat::row_major(weight, g.cout, k),
            Mat::row_major(src, k, p),
            os,
            false,
        );
        if let Some(b) = bias {
            for (c, &bc) in b.iter().enumerate() {
                os[c * p..(c + 1) * p].iter_mut().for_each(|v| *v += bc);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<'a, T> {
    pub dx: Option<&'a mut [T]>,
    pub dw: Option<&'a mut [T]>,
    pub db: Option<&'a mut [T]>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    mut grads: ConvGrads<'_, T>,
) {
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut cols = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); k * p]
    };
    for s in 0..g.n {
        let ds = &dout[s * out_len..(s + 1) * out_len];
        if let Some(db) = grads.db.as_deref_mut() {
            for (c, v) in db.iter_mut().enumerate() {
                *v += ds[c * p..(c + 1) * p].iter().copied().sum::<T>();
            }
        }
        if let Some(dw) = grads.dw.as_deref_mut() {
            let xs = &x[s * in_len..(s + 1) * in_len];
            let src: &[T] = if g.pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            gemm(
                Mat::row_major(ds, g.cout, p),
                Mat::row_major(src, k, p).t(),
                dw,
                true,
            );
        }
        if let Some(dx) = grads.dx.as_deref_mut() {
            let dxs = &mut dx[s * in_len..(s + 1) * in_len];
            let wt = Mat::row_major(weight, g.cout, k).t();
            if g.pointwise() {
                gemm(wt, Mat::row_major(ds, g.cout, p), dxs, true);
            } else {
                gemm(wt, Mat::row_major(ds, g.cout, p), &mut cols, false);
                col2im_add(&cols, g, dxs);
            }
        }
    }
}

/// Softmax attention for one batch element. Writes probabilities into
/// `probs` (lq x lk) and the output into `out` (lq x d).
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    lq: usize,
    lk: usize,
    d: usize,
    causal: bool,
    probs: &mut [T],
    out: &mut [T],
) {
    let scale = T::one() / T::lit(d as f64).sqrt();
    gemm(
        Mat::row_major(q, lq, d),
        Mat::row_major(k, lk, d).t(),
        probs,
        false,
    );
    for i in 0..lq {
        let row = &mut probs[i * lk..(i + 1) * lk];
        let visible = if causal { (i + 1).min(lk) } else { lk };
        let mut max = T::neg_infinity();
        for s in row[..visible].iter_mut() {
            *s *= scale;
            max = max.max(*s);
        }
        let mut total = T::zero();
        for s in row[..visible].iter_mut() {
            *s = (*s - max).exp();
            total += *s;
        }
        for s in row[..visible].iter_mut() {
            *s /= total;
        }
        row[visible..].iter_mut().for_each(|s| *s = T::zero());
    }
    gemm(
        Mat::row_major(probs, lq, lk),
        Mat::row_major(v, lk, d),
        out,
        false,
    );
}

pub(crate) struct AttnGrads<'a, T> {
    pub dq: Option<&'a mut [T]>,
    pub dk: Option<&'a mut [T]>,
    pub dv: Option<&'a mut [T]>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    lq: usize,
    lk: usize,
    d: usize,
    grads: AttnGrads<'_, T>,
) {
    let scale = T::one() / T::lit(d as f64).sqrt();
    if let Some(dv) = grads.dv {
        gemm(
            Mat::row_major(probs, lq, lk).t(),
            Mat::row_major(dout, lq, d),
            dv,
            true,
        );
    }
    if grads.dq.is_none() && grads.dk.is_none() {
        return;
    }
    let mut ds = vec![T::zero(); lq * lk];
    gemm(
        Mat::row_major(dout, lq, d),
        Mat::row_major(v, lk, d).t(),
        &mut ds,
        false,
    );
    for i in 0..lq {
        let p = &probs[i * lk..(i + 1) * lk];
        let row = &mut ds[i * lk..(i + 1) * lk];
        let dot: T = row.iter().zip(p).map(|(&a, &b)| a * b).sum();
        for (r, &pj) in row.iter_mut().zip(p) {
            *r = pj * (*r - dot) * scale;
        }
    }
    if let Some(dq) = grads.dq {
        gemm(
            Mat::row_major(&ds, lq, lk),
            Mat::row_major(k, lk, d),
            dq,
            true,
        );
    }
    if let Some(dk) = grads.dk {
        gemm(
            Mat::row_major(&ds, lq, lk).t(),
            Mat::row_major(q, lq, d),
            dk,
            true,
        );
    }
}

/// How a normalization maps flat element indices to affine channels.
#[derive(Debug, Clone, Copy)]
pub(crate) struct NormGeom {
    /// Elements normalized together (contiguous).
    pub chunk: usize,
    /// Number of affine channels.
    pub channels: usize,
    /// Consecutive elements sharing one affine channel.
    pub run: usize,
}

impl NormGeom {
    #[inline]
    fn channel(&self, i: usize) -> usize {
        (i / self.run) % self.channels
    }
}

/// Returns the output and per-chunk `(mean, rstd)`.
pub(crate) fn norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    g: &NormGeom,
    eps: T,
) -> (Vec<T>, Vec<(T, T)>) {
    let mut out = vec![T::zero(); x.len()];
    let mut stats = Vec::with_capacity(x.len() / g.chunk);
    let inv = T::one() / T::lit(g.chunk as f64);
    for (ci, (xs, os)) in x.chunks(g.chunk).zip(out.chunks_mut(g.chunk)).enumerate() {
        let mean = xs.iter().copied().sum::<T>() * inv;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
        let rstd = T::one() / (var + eps).sqrt();
        let base = ci * g.chunk;
        for (j, (o, &v)) in os.iter_mut().zip(xs).enumerate() {
            let c = g.channel(base + j);
            *o = (v - mean) * rstd * gamma[c] + beta[c];
        }
        stats.push((mean, rstd));
    }
    (out, stats)
}

pub(crate) struct NormGrads<'a, T> {
    pub dx: Option<&'a mut [T]>,
    pub dgamma: Option<&'a mut [T]>,
    pub dbeta: Option<&'a mut [T]>,
}

pub(crate) fn norm_backward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    stats: &[(T, T)],
    dout: &[T],
    g: &NormGeom,
    mut grads: NormGrads<'_, T>,
) {
    let inv = T::one() / T::lit(g.chunk as f64);
    let mut xhat = vec![T::zero(); g.chunk];
    let mut dxhat = vec![T::zero(); g.chunk];
    for (ci, (&(mean, rstd), (xs, ds))) in stats
        .iter()
        .zip(x.chunks(g.chunk).zip(dout.chunks(g.chunk)))
        .enumerate()
    {
        let base = ci * g.chunk;
        for j in 0..g.chunk {
            let c = g.channel(base + j);
            xhat[j] = (xs[j] - mean) * rstd;
            dxhat[j] = ds[j] * gamma[c];
            if let Some(dg) = grads.dgamma.as_deref_mut() {
                dg[c] += ds[j] * xhat[j];
            }
            if let Some(db) = grads.dbeta.as_deref_mut() {
                db[c] += ds[j];
            }
        }
        if let Some(dx) = grads.dx.as_deref_mut() {
            let m1 = dxhat.iter().copied().sum::<T>() * inv;
            let m2 = dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<T>() * inv;
            for j in 0..g.chunk {
                dx[base + j] += rstd * (dxhat[j] - m1 - xhat[j] * m2);
            }
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub(crate) fn permute<T: Copy>(data: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let nd = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let walk: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            off += walk[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= walk[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
