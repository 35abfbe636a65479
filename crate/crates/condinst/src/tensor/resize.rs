//! Bilinear resizing with half-pixel-center sampling (no align-corners).

use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Per-output-pixel source taps along one axis.
struct AxisTaps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn axis_taps(in_len: usize, out_len: usize) -> AxisTaps {
    let scale = in_len as f64 / out_len as f64;
    let mut lo = Vec::with_capacity(out_len);
    let mut hi = Vec::with_capacity(out_len);
    let mut frac = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let floor = src.floor();
        let f = src - floor;
        let i0 = (floor.max(0.0) as usize).min(in_len - 1);
        let i1 = (i0 + 1).min(in_len - 1);
        // src below 0 clamps both taps to the first sample
        let f = if floor < 0.0 { 0.0 } else { f };
        lo.push(i0);
        hi.push(i1);
        frac.push(f);
    }
    AxisTaps { lo, hi, frac }
}

impl<T: Scalar> Tensor<T> {
    /// Resizes the two trailing spatial dims of an NCHW tensor by the
    /// rational factor `num/den`; output extents are `round(extent * factor)`.
    pub fn bilinear_resize(&self, num: usize, den: usize) -> Result<Tensor<T>> {
        if num == 0 || den == 0 {
            return Err(Error::InvalidArgument(
                "bilinear_resize: factor must be positive".into(),
            ));
        }
        let shape = self.shape();
        if shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "bilinear_resize (expects NCHW)",
                lhs: shape.to_vec(),
                rhs: vec![],
            });
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let h_out = ((h * num) as f64 / den as f64).round() as usize;
        let w_out = ((w * num) as f64 / den as f64).round() as usize;
        if h_out == 0 || w_out == 0 {
            return Err(Error::InvalidArgument(format!(
                "bilinear_resize: factor {num}/{den} collapses {h}x{w} to zero size"
            )));
        }
        if (h_out, w_out) == (h, w) {
            // Identity factor: pass values through.
            let p = self.clone();
            let data = self.to_vec();
            return Ok(Tensor::from_op(
                shape.to_vec(),
                data,
                vec![self.clone()],
                Box::new(move |ctx| {
                    p.accum_grad(|g| {
                        for (gi, &go) in g.iter_mut().zip(ctx.out_grad) {
                            *gi += go;
                        }
                    });
                }),
            ));
        }

        let ty = axis_taps(h, h_out);
        let tx = axis_taps(w, w_out);
        let mut out = vec![T::zero(); n * c * h_out * w_out];
        {
            let src = self.data();
            let src: &[T] = &src;
            out.par_chunks_exact_mut(h_out * w_out)
                .enumerate()
                .for_each(|(plane, out_p)| {
                    let in_p = &src[plane * h * w..(plane + 1) * h * w];
                    for oy in 0..h_out {
                        let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
                        for ox in 0..w_out {
                            let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                            let v00 = in_p[y0 * w + x0].to_f64();
                            let v01 = in_p[y0 * w + x1].to_f64();
                            let v10 = in_p[y1 * w + x0].to_f64();
                            let v11 = in_p[y1 * w + x1].to_f64();
                            let top = v00 + (v01 - v00) * fx;
                            let bot = v10 + (v11 - v10) * fx;
                            out_p[oy * w_out + ox] = T::from_f64(top + (bot - top) * fy);
                        }
                    }
                });
        }

        let p = self.clone();
        Ok(Tensor::from_op(
            vec![n, c, h_out, w_out],
            out,
            vec![self.clone()],
            Box::new(move |ctx| {
                let ty = axis_taps(h, h_out);
                let tx = axis_taps(w, w_out);
                p.accum_grad(|g| {
                    g.par_chunks_exact_mut(h * w).enumerate().for_each(|(plane, g_p)| {
                        let go_p = &ctx.out_grad[plane * h_out * w_out..(plane + 1) * h_out * w_out];
                        for oy in 0..h_out {
                            let (y0, y1, fy) = (ty.lo[oy], ty.hi[oy], ty.frac[oy]);
                            for ox in 0..w_out {
                                let (x0, x1, fx) = (tx.lo[ox], tx.hi[ox], tx.frac[ox]);
                                let go = go_p[oy * w_out + ox].to_f64();
                                g_p[y0 * w + x0] += T::from_f64(go * (1.0 - fx) * (1.0 - fy));
                                g_p[y0 * w + x1] += T::from_f64(go * fx * (1.0 - fy));
                                g_p[y1 * w + x0] += T::from_f64(go * (1.0 - fx) * fy);
                                g_p[y1 * w + x1] += T::from_f64(go * fx * fy);
                            }
                        }
                    });
                });
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_stays_constant() {
        let x = Tensor::<f32>::full(&[1, 1, 4, 4], 7.0);
        let y = x.bilinear_resize(4, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 16, 16]);
        assert!(y.to_vec().iter().all(|&v| (v - 7.0).abs() < 1e-6));
    }

    #[test]
    fn monotone_columns_stay_monotone() {
        // [[0,1],[0,1]] upsampled x2: each row nondecreasing left to right
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]);
        let y = x.bilinear_resize(2, 1).unwrap();
        let d = y.to_vec();
        for row in d.chunks(4) {
            for pair in row.windows(2) {
                assert!(pair[1] >= pair[0], "row not monotone: {row:?}");
            }
        }
    }

    #[test]
    fn zero_factor_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        assert!(x.bilinear_resize(0, 1).is_err());
        assert!(x.bilinear_resize(1, 0).is_err());
    }

    #[test]
    fn downsample_shape() {
        let x = Tensor::<f32>::zeros(&[1, 1, 16, 16]);
        let y = x.bilinear_resize(1, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 8]);
    }

    #[test]
    fn identity_factor_is_exact() {
        let x = Tensor::<f32>::from_vec(&[1, 1, 2, 2], vec![0.25, -1.5, 3.0, 9.0]);
        let y = x.bilinear_resize(3, 3).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }
}
