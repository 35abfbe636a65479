//! 2-D cross-correlation (conv2d) with im2col and a 4-row axpy matmul.
//!
//! The matmul kernel processes four output channels per sweep over the
//! column buffer; every output element is a sequential sum in fixed order,
//! so results do not depend on the parallel split.

use rayon::prelude::*;

use super::{BackwardCtx, Scalar, Tensor};
use crate::error::{Error, Result};

/// out[M,P] += w[M,Q] x col[Q,P]
pub(crate) fn matmul_axpy<T: Scalar>(
    out: &mut [T],
    w: &[T],
    col: &[T],
    m: usize,
    q: usize,
    p: usize,
) {
    let mut oc = 0;
    while oc + 4 <= m {
        let w0 = &w[oc * q..(oc + 1) * q];
        let w1 = &w[(oc + 1) * q..(oc + 2) * q];
        let w2 = &w[(oc + 2) * q..(oc + 3) * q];
        let w3 = &w[(oc + 3) * q..(oc + 4) * q];
        let (block, _) = out[oc * p..].split_at_mut(4 * p);
        let (o0, rest) = block.split_at_mut(p);
        let (o1, rest) = rest.split_at_mut(p);
        let (o2, o3) = rest.split_at_mut(p);
        for k in 0..q {
            let c = &col[k * p..k * p + p];
            let (a0, a1, a2, a3) = (w0[k], w1[k], w2[k], w3[k]);
            for j in 0..p {
                let cv = c[j];
                o0[j] += a0 * cv;
                o1[j] += a1 * cv;
                o2[j] += a2 * cv;
                o3[j] += a3 * cv;
            }
        }
        oc += 4;
    }
    while oc < m {
        let wr = &w[oc * q..(oc + 1) * q];
        let o = &mut out[oc * p..(oc + 1) * p];
        for k in 0..q {
            let a = wr[k];
            let c = &col[k * p..k * p + p];
            for j in 0..p {
                o[j] += a * c[j];
            }
        }
        oc += 1;
    }
}

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

impl ConvDims {
    fn q(&self) -> usize {
        self.c_in * self.k * self.k
    }
    fn p(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds one image into `[C*K*K, Ho*Wo]`. Stride-1 rows are copied as
/// contiguous spans; the general path gathers element by element.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims, col: &mut [T]) {
    col.fill(T::zero());
    let (h, w, k, s, pad) = (d.h, d.w, d.k, d.stride, d.pad);
    let (ho, wo) = (d.h_out, d.w_out);
    for ci in 0..d.c_in {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut row[oy * wo..(oy + 1) * wo];
                    if s == 1 {
                        // valid ox range: 0 <= ox + kx - pad < w
                        let lo = pad.saturating_sub(kx);
                        let hi = (w + pad - kx).min(wo);
                        if lo < hi {
                            dst_row[lo..hi].copy_from_slice(&src_row[lo + kx - pad..hi + kx - pad]);
                        }
                    } else {
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Transpose of im2col: scatter-adds the column buffer back into an image.
fn col2im_add<T: Scalar>(col: &[T], d: &ConvDims, x: &mut [T]) {
    let (h, w, k, s, pad) = (d.h, d.w, d.k, d.stride, d.pad);
    let (ho, wo) = (d.h_out, d.w_out);
    for ci in 0..d.c_in {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * ho * wo..][..ho * wo];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &row[oy * wo..(oy + 1) * wo];
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(d: &ConvDims) -> bool {
    d.k == 1 && d.stride == 1 && d.pad == 0
}

impl<T: Scalar> Tensor<T> {
    /// Standard cross-correlation over NCHW input with OIKK weights.
    /// Output spatial size is `floor((H + 2*pad - K)/stride) + 1`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d (expects NCHW input, OIKK weight)",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if ws[2] != ws[3] || xs[1] != ws[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d input channels vs weight",
                lhs: xs.to_vec(),
                rhs: ws.to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be >= 1".into()));
        }
        let (n, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, k) = (ws[0], ws[2]);
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(Error::InvalidArgument(format!(
                "conv2d: kernel {k} does not fit input {h}x{w} with padding {padding}"
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: b.shape().to_vec(),
                    rhs: vec![c_out],
                });
            }
        }
        let h_out = (h + 2 * padding - k) / stride + 1;
        let w_out = (w + 2 * padding - k) / stride + 1;
        let dims = ConvDims {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad: padding,
            h_out,
            w_out,
        };
        let (q, p) = (dims.q(), dims.p());

        let mut out = vec![T::zero(); n * c_out * p];
        {
            let xd = self.data();
            let xd: &[T] = &xd;
            let wd = weight.data();
            let wd: &[T] = &wd;
            let bd = bias.map(|b| b.to_vec());
            out.par_chunks_exact_mut(c_out * p)
                .zip(xd.par_chunks_exact(c_in * h * w))
                .for_each(|(out_n, x_n)| {
                    if is_pointwise(&dims) {
                        matmul_axpy(out_n, wd, x_n, c_out, q, p);
                    } else {
                        let mut col = vec![T::zero(); q * p];
                        im2col(x_n, &dims, &mut col);
                        matmul_axpy(out_n, wd, &col, c_out, q, p);
                    }
                    if let Some(b) = &bd {
                        for oc in 0..c_out {
                            let bv = b[oc];
                            for v in &mut out_n[oc * p..(oc + 1) * p] {
                                *v += bv;
                            }
                        }
                    }
                });
        }

        let x_h = self.clone();
        let w_h = weight.clone();
        let b_h = bias.cloned();
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Ok(Tensor::from_op(
            vec![n, c_out, h_out, w_out],
            out,
            parents,
            Box::new(move |ctx: &BackwardCtx<'_, T>| {
                conv2d_backward(ctx.out_grad, &x_h, &w_h, b_h.as_ref(), &dims);
            }),
        ))
    }
}

fn conv2d_backward<T: Scalar>(
    gy: &[T],
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    d: &ConvDims,
) {
    let (q, p) = (d.q(), d.p());
    let n = x.shape()[0];
    let plane = d.c_in * d.h * d.w;
    let xd = x.data();
    let xd: &[T] = &xd;
    let wd = w.to_vec();

    if let Some(b) = b {
        b.accum_grad(|gb| {
            for ni in 0..n {
                let gy_n = &gy[ni * d.c_out * p..(ni + 1) * d.c_out * p];
                for oc in 0..d.c_out {
                    let mut acc = T::zero();
                    for &v in &gy_n[oc * p..(oc + 1) * p] {
                        acc += v;
                    }
                    gb[oc] += acc;
                }
            }
        });
    }

    if w.requires_grad() {
        // gW[oc][q] += sum_p gy[oc][p] * col[q][p], images in order.
        let mut col = vec![T::zero(); q * p];
        w.accum_grad(|gw| {
            for ni in 0..n {
                let x_n = &xd[ni * plane..(ni + 1) * plane];
                let col_ref: &[T] = if is_pointwise(d) {
                    x_n
                } else {
                    im2col(x_n, d, &mut col);
                    &col
                };
                let gy_n = &gy[ni * d.c_out * p..(ni + 1) * d.c_out * p];
                gw.par_chunks_exact_mut(q).enumerate().for_each(|(oc, gw_row)| {
                    let gy_row = &gy_n[oc * p..(oc + 1) * p];
                    for qi in 0..q {
                        let c_row = &col_ref[qi * p..qi * p + p];
                        let mut acc = T::zero();
                        for j in 0..p {
                            acc += gy_row[j] * c_row[j];
                        }
                        gw_row[qi] += acc;
                    }
                });
            }
        });
    }

    if x.requires_grad() {
        // gcol = W^T x gy, then fold back into image space.
        let mut wt = vec![T::zero(); q * d.c_out];
        for oc in 0..d.c_out {
            for qi in 0..q {
                wt[qi * d.c_out + oc] = wd[oc * q + qi];
            }
        }
        x.accum_grad(|gx| {
            gx.par_chunks_exact_mut(plane).enumerate().for_each(|(ni, gx_n)| {
                let gy_n = &gy[ni * d.c_out * p..(ni + 1) * d.c_out * p];
                if is_pointwise(d) {
                    matmul_axpy(gx_n, &wt, gy_n, q, d.c_out, p);
                } else {
                    let mut gcol = vec![T::zero(); q * p];
                    matmul_axpy(&mut gcol, &wt, gy_n, q, d.c_out, p);
                    col2im_add(&gcol, d, gx_n);
                }
            });
        });
    }
}
