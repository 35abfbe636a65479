//! The per-instance dynamic mask head.
//!
//! A controller emits, for every candidate instance, one flat parameter
//! vector that is sliced into the weights and biases of a tiny FCN (1x1
//! convs, ReLU between layers, one logit channel out). That head runs over
//! the shared mask features combined with a per-instance coordinate map, so
//! each instance gets its own network but all instances share one feature
//! computation.
//!
//! The default architecture — three layers, width 8, inputs 8 features + 2
//! coordinates — costs 169 parameters per instance:
//! weights (8+2)*8 + 8*8 + 8*1 and biases 8 + 8 + 1.

use rayon::prelude::*;

use crate::config::{CoordMode, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Shape of the generated head: `depth` 1x1 conv layers of `width` channels
/// (the last layer always has one output channel).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadArch {
    pub depth: usize,
    pub width: usize,
    pub in_channels: usize,
}

impl HeadArch {
    pub fn new(depth: usize, width: usize, in_channels: usize) -> Result<Self> {
        if depth == 0 || width == 0 || in_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "head arch needs positive depth/width/in_channels, got {depth}/{width}/{in_channels}"
            )));
        }
        Ok(HeadArch {
            depth,
            width,
            in_channels,
        })
    }

    pub fn from_model_config(m: &ModelConfig) -> Result<Self> {
        Self::new(
            m.mask_head_depth,
            m.mask_head_width,
            m.coord_mode.in_channels(m.c_mask),
        )
    }

    /// (input, output) channels of each layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|i| {
                let input = if i == 0 { self.in_channels } else { self.width };
                let output = if i + 1 == self.depth { 1 } else { self.width };
                (input, output)
            })
            .collect()
    }

    /// Total parameter count: per-layer weights plus biases.
    pub fn total_len(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|&(i, o)| i * o + o)
            .sum()
    }
}

/// The flat parameter vector emitted by the controller for one instance,
/// with its deterministic layout: layer-1 weights, layer-1 biases, layer-2
/// weights, ... Weights within a layer are row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedHeadParams {
    theta: Vec<f32>,
    arch: HeadArch,
}

impl PackedHeadParams {
    pub fn new(theta: Vec<f32>, arch: HeadArch) -> Result<Self> {
        if theta.len() != arch.total_len() {
            return Err(Error::InvalidArgument(format!(
                "packed parameter vector has {} values, arch {:?} needs {}",
                theta.len(),
                arch,
                arch.total_len()
            )));
        }
        Ok(PackedHeadParams { theta, arch })
    }

    pub fn theta(&self) -> &[f32] {
        &self.theta
    }

    pub fn arch(&self) -> HeadArch {
        self.arch
    }

    /// Concatenates per-layer (weights, biases) in layer order.
    pub fn pack(arch: HeadArch, layers: &[(Vec<f32>, Vec<f32>)]) -> Result<Self> {
        let dims = arch.layer_dims();
        if layers.len() != dims.len() {
            return Err(Error::InvalidArgument(format!(
                "pack: {} layers given, arch has {}",
                layers.len(),
                dims.len()
            )));
        }
        let mut theta = Vec::with_capacity(arch.total_len());
        for ((w, b), &(i, o)) in layers.iter().zip(&dims) {
            if w.len() != i * o || b.len() != o {
                return Err(Error::InvalidArgument(format!(
                    "pack: layer expects {}x{} weights and {} biases, got {} and {}",
                    o,
                    i,
                    o,
                    w.len(),
                    b.len()
                )));
            }
            theta.extend_from_slice(w);
            theta.extend_from_slice(b);
        }
        PackedHeadParams::new(theta, arch)
    }

    /// Inverse of [`pack`](Self::pack): per-layer (weights, biases) slices.
    pub fn unpack(&self) -> Vec<(Vec<f32>, Vec<f32>)> {
        let mut out = Vec::with_capacity(self.arch.depth);
        let mut offset = 0;
        for (i, o) in self.arch.layer_dims() {
            let w = self.theta[offset..offset + i * o].to_vec();
            offset += i * o;
            let b = self.theta[offset..offset + o].to_vec();
            offset += o;
            out.push((w, b));
        }
        out
    }
}

/// Two-channel coordinate map on the mask-feature grid.
///
/// Relative mode: channel 0 holds `(cell_x - x)/normalizer`, channel 1
/// `(cell_y - y)/normalizer`, where cell coordinates use the stride-8
/// location mapping (`4 + 8*i`). Absolute mode anchors to the image center
/// instead, making the map independent of the generating location.
pub fn coordinate_map(
    grid_h: usize,
    grid_w: usize,
    stride: usize,
    generating_loc: (f32, f32),
    normalizer: f32,
    absolute: bool,
) -> Vec<f32> {
    assert!(normalizer > 0.0, "coordinate normalizer must be positive");
    let mut map = vec![0f32; 2 * grid_h * grid_w];
    let half = (stride / 2) as f32;
    let (ref_x, ref_y) = if absolute {
        (
            (grid_w * stride) as f32 / 2.0,
            (grid_h * stride) as f32 / 2.0,
        )
    } else {
        generating_loc
    };
    for cy in 0..grid_h {
        let iy = half + (cy * stride) as f32;
        for cx in 0..grid_w {
            let ix = half + (cx * stride) as f32;
            map[cy * grid_w + cx] = (ix - ref_x) / normalizer;
            map[grid_h * grid_w + cy * grid_w + cx] = (iy - ref_y) / normalizer;
        }
    }
    map
}

/// Applies K dynamically parameterized heads over the shared mask features.
///
/// * `f_mask`: `[N, C_mask, H, W]` shared features (absent in coords-only mode)
/// * `coords`: `[K, 2, H, W]` per-instance coordinate maps (absent in features-only mode)
/// * `thetas`: `[K, P]` packed per-instance parameters
/// * `batch_index`: which image of `f_mask` each instance belongs to
///
/// Returns raw logits `[K, 1, H, W]`; the caller applies sigmoid. Instances
/// are independent: instance k sees only `f_mask[batch_index[k]]`,
/// `coords[k]` and `thetas[k]`.
pub fn apply_mask_heads<T: Scalar>(
    f_mask: Option<&Tensor<T>>,
    coords: Option<&Tensor<T>>,
    thetas: &Tensor<T>,
    batch_index: &[usize],
    arch: HeadArch,
) -> Result<Tensor<T>> {
    let k = batch_index.len();
    if thetas.shape() != [k, arch.total_len()] {
        return Err(Error::ShapeMismatch {
            op: "apply_mask_heads thetas (expects [K, total_len])",
            lhs: thetas.shape().to_vec(),
            rhs: vec![k, arch.total_len()],
        });
    }
    let (feat_ch, grid) = match (f_mask, coords) {
        (Some(f), Some(c)) => {
            let (fs, cs) = (f.shape(), c.shape());
            if fs.len() != 4 || cs.len() != 4 || cs[0] != k || cs[1] != 2 || fs[2..] != cs[2..] {
                return Err(Error::ShapeMismatch {
                    op: "apply_mask_heads features vs coords",
                    lhs: fs.to_vec(),
                    rhs: cs.to_vec(),
                });
            }
            (fs[1], (fs[2], fs[3]))
        }
        (Some(f), None) => {
            let fs = f.shape();
            if fs.len() != 4 {
                return Err(Error::ShapeMismatch {
                    op: "apply_mask_heads features",
                    lhs: fs.to_vec(),
                    rhs: vec![],
                });
            }
            (fs[1], (fs[2], fs[3]))
        }
        (None, Some(c)) => {
            let cs = c.shape();
            if cs.len() != 4 || cs[0] != k || cs[1] != 2 {
                return Err(Error::ShapeMismatch {
                    op: "apply_mask_heads coords (expects [K,2,H,W])",
                    lhs: cs.to_vec(),
                    rhs: vec![k, 2],
                });
            }
            (0, (cs[2], cs[3]))
        }
        (None, None) => {
            return Err(Error::InvalidArgument(
                "apply_mask_heads: need features, coordinates, or both".into(),
            ))
        }
    };
    let coord_ch = if coords.is_some() { 2 } else { 0 };
    if feat_ch + coord_ch != arch.in_channels {
        return Err(Error::InvalidArgument(format!(
            "apply_mask_heads: arch expects {} input channels, inputs supply {} features + {} coords",
            arch.in_channels, feat_ch, coord_ch
        )));
    }
    if let Some(f) = f_mask {
        let n = f.shape()[0];
        if let Some(&bad) = batch_index.iter().find(|&&b| b >= n) {
            return Err(Error::InvalidArgument(format!(
                "apply_mask_heads: batch index {bad} out of range for {n} images"
            )));
        }
    }

    let (gh, gw) = grid;
    let pix = gh * gw;
    let dims = arch.layer_dims();

    let mut out = vec![T::zero(); k * pix];
    {
        let fd = f_mask.map(|f| f.data());
        let fd: Option<&[T]> = fd.as_deref().map(|v| &v[..]);
        let cd = coords.map(|c| c.data());
        let cd: Option<&[T]> = cd.as_deref().map(|v| &v[..]);
        let td = thetas.data();
        let td: &[T] = &td;
        out.par_chunks_exact_mut(pix)
            .enumerate()
            .for_each(|(ki, out_k)| {
                let acts = head_forward(
                    fd, cd, td, batch_index[ki], ki, feat_ch, pix, &dims, arch,
                );
                out_k.copy_from_slice(acts.last().expect("depth >= 1"));
            });
    }

    let f_h = f_mask.cloned();
    let c_h = coords.cloned();
    let t_h = thetas.clone();
    let bidx = batch_index.to_vec();
    let mut parents = vec![thetas.clone()];
    if let Some(f) = f_mask {
        parents.push(f.clone());
    }
    if let Some(c) = coords {
        parents.push(c.clone());
    }
    Ok(Tensor::from_op(
        vec![k, 1, gh, gw],
        out,
        parents,
        Box::new(move |ctx| {
            mask_heads_backward(
                ctx.out_grad,
                f_h.as_ref(),
                c_h.as_ref(),
                &t_h,
                &bidx,
                feat_ch,
                pix,
                arch,
            );
        }),
    ))
}

/// Forward pass of one instance head; returns all post-activation buffers
/// (inputs to each layer are `acts[j]`, the final logits are `acts.last()`).
#[allow(clippy::too_many_arguments)]
fn head_forward<T: Scalar>(
    f_mask: Option<&[T]>,
    coords: Option<&[T]>,
    thetas: &[T],
    batch: usize,
    ki: usize,
    feat_ch: usize,
    pix: usize,
    dims: &[(usize, usize)],
    arch: HeadArch,
) -> Vec<Vec<T>> {
    // acts[0] = assembled input [in_channels * pix]
    let mut input = vec![T::zero(); arch.in_channels * pix];
    if let Some(fd) = f_mask {
        let src = &fd[batch * feat_ch * pix..(batch + 1) * feat_ch * pix];
        input[..feat_ch * pix].copy_from_slice(src);
    }
    if let Some(cd) = coords {
        let src = &cd[ki * 2 * pix..(ki + 1) * 2 * pix];
        input[feat_ch * pix..].copy_from_slice(src);
    }
    let theta = &thetas[ki * arch.total_len()..(ki + 1) * arch.total_len()];

    let mut acts: Vec<Vec<T>> = Vec::with_capacity(dims.len() + 1);
    acts.push(input);
    let mut offset = 0;
    for (li, &(ci, co)) in dims.iter().enumerate() {
        let w = &theta[offset..offset + ci * co];
        offset += ci * co;
        let b = &theta[offset..offset + co];
        offset += co;
        let x = acts.last().expect("input present");
        let mut y = vec![T::zero(); co * pix];
        for o in 0..co {
            let yo = &mut y[o * pix..(o + 1) * pix];
            yo.fill(b[o]);
            for i in 0..ci {
                let wv = w[o * ci + i];
                let xi = &x[i * pix..(i + 1) * pix];
                for (yv, &xv) in yo.iter_mut().zip(xi) {
                    *yv += wv * xv;
                }
            }
            if li + 1 != dims.len() {
                for yv in yo.iter_mut() {
                    if *yv < T::zero() {
                        *yv = T::zero();
                    }
                }
            }
        }
        acts.push(y);
    }
    acts
}

#[allow(clippy::too_many_arguments)]
fn mask_heads_backward<T: Scalar>(
    out_grad: &[T],
    f_mask: Option<&Tensor<T>>,
    coords: Option<&Tensor<T>>,
    thetas: &Tensor<T>,
    batch_index: &[usize],
    feat_ch: usize,
    pix: usize,
    arch: HeadArch,
) {
    let dims = arch.layer_dims();
    let k = batch_index.len();
    let p = arch.total_len();
    let want_input_grad = f_mask.map(|f| f.requires_grad()).unwrap_or(false)
        || coords.map(|c| c.requires_grad()).unwrap_or(false);

    // Per-instance contributions computed in parallel, folded in instance
    // order afterwards so accumulation into shared buffers is deterministic.
    struct InstanceGrads<T> {
        theta: Vec<T>,
        input: Option<Vec<T>>,
    }

    let fd = f_mask.map(|f| f.data());
    let fd: Option<&[T]> = fd.as_deref().map(|v| &v[..]);
    let cd = coords.map(|c| c.data());
    let cd: Option<&[T]> = cd.as_deref().map(|v| &v[..]);
    let td = thetas.data();
    let td: &[T] = &td;

    let per_instance: Vec<InstanceGrads<T>> = (0..k)
        .into_par_iter()
        .map(|ki| {
            // Activations are recomputed rather than saved; the head is tiny.
            let acts = head_forward(fd, cd, td, batch_index[ki], ki, feat_ch, pix, &dims, arch);
            let theta = &td[ki * p..(ki + 1) * p];
            let mut g_theta = vec![T::zero(); p];
            let mut delta: Vec<T> = out_grad[ki * pix..(ki + 1) * pix].to_vec();

            let mut offsets = Vec::with_capacity(dims.len());
            let mut off = 0;
            for &(ci, co) in &dims {
                offsets.push(off);
                off += ci * co + co;
            }
            for li in (0..dims.len()).rev() {
                let (ci, co) = dims[li];
                let w = &theta[offsets[li]..offsets[li] + ci * co];
                let x = &acts[li];
                for o in 0..co {
                    let d_o = &delta[o * pix..(o + 1) * pix];
                    let mut bias_acc = T::zero();
                    for &dv in d_o {
                        bias_acc += dv;
                    }
                    g_theta[offsets[li] + ci * co + o] += bias_acc;
                    for i in 0..ci {
                        let xi = &x[i * pix..(i + 1) * pix];
                        let mut acc = T::zero();
                        for (dv, xv) in d_o.iter().zip(xi) {
                            acc += *dv * *xv;
                        }
                        g_theta[offsets[li] + o * ci + i] += acc;
                    }
                }
                // Propagate into the layer input (skip below layer 0 unless
                // input gradients are wanted).
                if li == 0 && !want_input_grad {
                    delta.clear();
                    break;
                }
                let mut prev = vec![T::zero(); ci * pix];
                for o in 0..co {
                    let d_o = &delta[o * pix..(o + 1) * pix];
                    for i in 0..ci {
                        let wv = w[o * ci + i];
                        let pi = &mut prev[i * pix..(i + 1) * pix];
                        for (pv, &dv) in pi.iter_mut().zip(d_o) {
                            *pv += wv * dv;
                        }
                    }
                }
                if li > 0 {
                    // ReLU mask: x holds post-activation values.
                    for (pv, &xv) in prev.iter_mut().zip(x.iter()) {
                        if xv <= T::zero() {
                            *pv = T::zero();
                        }
                    }
                }
                delta = prev;
            }

            InstanceGrads {
                theta: g_theta,
                input: if want_input_grad && !delta.is_empty() {
                    Some(delta)
                } else {
                    None
                },
            }
        })
        .collect();

    thetas.accum_grad(|g| {
        for (ki, inst) in per_instance.iter().enumerate() {
            for (gi, &v) in g[ki * p..(ki + 1) * p].iter_mut().zip(&inst.theta) {
                *gi += v;
            }
        }
    });
    if let Some(f) = f_mask {
        f.accum_grad(|g| {
            for (ki, inst) in per_instance.iter().enumerate() {
                if let Some(input) = &inst.input {
                    let dst = &mut g[batch_index[ki] * feat_ch * pix..(batch_index[ki] + 1) * feat_ch * pix];
                    for (gi, &v) in dst.iter_mut().zip(&input[..feat_ch * pix]) {
                        *gi += v;
                    }
                }
            }
        });
    }
    if let Some(c) = coords {
        c.accum_grad(|g| {
            for (ki, inst) in per_instance.iter().enumerate() {
                if let Some(input) = &inst.input {
                    let dst = &mut g[ki * 2 * pix..(ki + 1) * 2 * pix];
                    for (gi, &v) in dst.iter_mut().zip(&input[feat_ch * pix..]) {
                        *gi += v;
                    }
                }
            }
        });
    }
}

/// Single-instance convenience wrapper: `f_mask` is `[C,H,W]` (or
/// `[1,C,H,W]`), the coordinate map comes from [`coordinate_map`].
pub fn apply_head(
    f_mask: Option<&Tensor<f32>>,
    coord_map: Option<&[f32]>,
    grid: (usize, usize),
    params: &PackedHeadParams,
) -> Result<Tensor<f32>> {
    let (gh, gw) = grid;
    let f4;
    let f_ref = match f_mask {
        Some(f) => {
            f4 = if f.shape().len() == 3 {
                f.reshape(&[1, f.shape()[0], f.shape()[1], f.shape()[2]])
            } else {
                f.clone()
            };
            Some(&f4)
        }
        None => None,
    };
    let coords_t = match coord_map {
        Some(m) => {
            if m.len() != 2 * gh * gw {
                return Err(Error::InvalidArgument(format!(
                    "coordinate map has {} values, grid {}x{} needs {}",
                    m.len(),
                    gh,
                    gw,
                    2 * gh * gw
                )));
            }
            Some(Tensor::from_vec(&[1, 2, gh, gw], m.to_vec()))
        }
        None => None,
    };
    let thetas = Tensor::from_vec(&[1, params.theta().len()], params.theta().to_vec());
    apply_mask_heads(f_ref, coords_t.as_ref(), &thetas, &[0], params.arch())
}

/// Bilinear upsampling of mask logits by an integer factor in {1, 2, 4}.
pub fn upsample_prediction<T: Scalar>(logits: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if !matches!(factor, 1 | 2 | 4) {
        return Err(Error::InvalidArgument(format!(
            "upsample factor must be 1, 2 or 4, got {factor}"
        )));
    }
    logits.bilinear_resize(factor, 1)
}

/// Coordinate-mode plumbing shared by training and inference: builds the
/// `[K,2,H,W]` coordinate tensor for a batch of generating locations, or
/// `None` in features-only mode.
pub fn build_coord_tensor(
    mode: CoordMode,
    grid: (usize, usize),
    stride: usize,
    locations: &[(f32, f32)],
    normalizers: &[f32],
) -> Option<Tensor<f32>> {
    if !mode.uses_coords() {
        return None;
    }
    let (gh, gw) = grid;
    let mut data = Vec::with_capacity(locations.len() * 2 * gh * gw);
    for (loc, &norm) in locations.iter().zip(normalizers) {
        data.extend(coordinate_map(
            gh,
            gw,
            stride,
            *loc,
            norm,
            mode == CoordMode::Absolute,
        ));
    }
    Some(Tensor::from_vec(&[locations.len(), 2, gh, gw], data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_arch_parameter_count() {
        let arch = HeadArch::new(3, 8, 10).unwrap();
        assert_eq!(arch.total_len(), 169);
        assert_eq!(arch.layer_dims(), vec![(10, 8), (8, 8), (8, 1)]);
    }

    #[test]
    fn depth_one_is_a_linear_map() {
        let arch = HeadArch::new(1, 8, 10).unwrap();
        assert_eq!(arch.total_len(), 10 + 1);
    }

    #[test]
    fn width_four_count() {
        // (10*4 + 4) + (4*4 + 4) + (4*1 + 1)
        let arch = HeadArch::new(3, 4, 10).unwrap();
        assert_eq!(arch.total_len(), 44 + 20 + 5);
    }

    #[test]
    fn unpack_layout_is_sequential_slices() {
        let arch = HeadArch::new(3, 8, 10).unwrap();
        let theta: Vec<f32> = (0..169).map(|v| v as f32).collect();
        let packed = PackedHeadParams::new(theta, arch).unwrap();
        let layers = packed.unpack();
        assert_eq!(layers[0].0, (0..80).map(|v| v as f32).collect::<Vec<_>>());
        assert_eq!(layers[0].1, (80..88).map(|v| v as f32).collect::<Vec<_>>());
        assert_eq!(layers[1].0.len(), 64);
        assert_eq!(layers[2].1, vec![168.0]);
    }

    #[test]
    fn pack_unpack_bitwise_roundtrip() {
        let arch = HeadArch::new(3, 8, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let theta: Vec<f32> = (0..arch.total_len()).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let packed = PackedHeadParams::new(theta.clone(), arch).unwrap();
            let repacked = PackedHeadParams::pack(arch, &packed.unpack()).unwrap();
            assert_eq!(
                theta.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                repacked.theta().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn wrong_length_rejected() {
        let arch = HeadArch::new(3, 8, 10).unwrap();
        assert!(PackedHeadParams::new(vec![0.0; 168], arch).is_err());
    }

    #[test]
    fn coordinate_map_zero_at_own_cell() {
        // generating location = mapped coordinate of cell (3, 2) at stride 8
        let map = coordinate_map(8, 8, 8, (4.0 + 24.0, 4.0 + 16.0), 48.0, false);
        let idx = 2 * 8 + 3;
        assert_eq!(map[idx], 0.0);
        assert_eq!(map[64 + idx], 0.0);
    }

    #[test]
    fn coordinate_map_translation_constant() {
        let a = coordinate_map(8, 8, 8, (12.0, 20.0), 48.0, false);
        let b = coordinate_map(8, 8, 8, (20.0, 20.0), 48.0, false); // one P3 cell right
        for i in 0..64 {
            assert!((a[i] - b[i] - 8.0 / 48.0).abs() < 1e-6);
            assert!((a[64 + i] - b[64 + i]).abs() < 1e-6);
        }
    }

    #[test]
    fn absolute_mode_ignores_generating_location() {
        let a = coordinate_map(8, 8, 8, (12.0, 20.0), 48.0, true);
        let b = coordinate_map(8, 8, 8, (52.0, 4.0), 48.0, true);
        assert_eq!(a, b);
    }

    #[test]
    fn zero_theta_gives_zero_logits() {
        let arch = HeadArch::new(3, 8, 10).unwrap();
        let f = Tensor::<f32>::from_vec(&[1, 8, 4, 4], (0..128).map(|v| v as f32 * 0.1).collect());
        let coords = Tensor::from_vec(&[1, 2, 4, 4], vec![0.25; 32]);
        let thetas = Tensor::zeros(&[1, 169]);
        let out = apply_mask_heads(Some(&f), Some(&coords), &thetas, &[0], arch).unwrap();
        assert!(out.to_vec().iter().all(|&v| v == 0.0));
        // sigmoid(0) = 0.5 everywhere
        assert!(out.sigmoid().to_vec().iter().all(|&v| v == 0.5));
    }

    /// Hand-built theta implementing "foreground iff ||rel coords||_inf < t"
    /// with ReLU arithmetic: hidden units relu(+-ox - t), relu(+-oy - t)
    /// are all zero exactly inside the square; the output layer subtracts
    /// a large multiple of their sum from a positive constant.
    fn square_theta(arch: HeadArch, t: f32) -> PackedHeadParams {
        assert_eq!(arch.layer_dims(), vec![(10, 8), (8, 8), (8, 1)]);
        let mut w1 = vec![0.0f32; 80];
        // inputs: channels 0..8 features, 8 = ox, 9 = oy
        let signs = [(8, 1.0), (8, -1.0), (9, 1.0), (9, -1.0)];
        let mut b1 = vec![0.0f32; 8];
        for (unit, &(input, sign)) in signs.iter().enumerate() {
            w1[unit * 10 + input] = sign;
            b1[unit] = -t;
        }
        // layer 2: identity on the four active units (inputs are >= 0)
        let mut w2 = vec![0.0f32; 64];
        for unit in 0..4 {
            w2[unit * 8 + unit] = 1.0;
        }
        let b2 = vec![0.0f32; 8];
        // output: small positive constant minus a large multiple of the sum
        let mut w3 = vec![0.0f32; 8];
        for unit in 0..4 {
            w3[unit] = -1000.0;
        }
        let b3 = vec![0.5f32];
        PackedHeadParams::pack(arch, &[(w1, b1), (w2, b2), (w3, b3)]).unwrap()
    }

    #[test]
    fn analytic_theta_cuts_out_a_square() {
        let arch = HeadArch::new(3, 8, 10).unwrap();
        let (gh, gw) = (16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Tensor::<f32>::from_vec(
            &[1, 8, gh, gw],
            (0..8 * gh * gw).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let generating = (4.0 + 8.0 * 7.0, 4.0 + 8.0 * 6.0);
        let norm = 48.0;
        let threshold = 20.0 / norm; // 20 image pixels in normalized units
        let params = square_theta(arch, threshold);
        let map = coordinate_map(gh, gw, 8, generating, norm, false);
        let out = apply_head(Some(&f), Some(&map), (gh, gw), &params).unwrap();
        let probs = out.sigmoid();
        let probs = probs.data();
        for cy in 0..gh {
            for cx in 0..gw {
                let ox = map[cy * gw + cx];
                let oy = map[gh * gw + cy * gw + cx];
                let inside = ox.abs().max(oy.abs()) < threshold;
                let predicted = probs[cy * gw + cx] > 0.5;
                assert_eq!(
                    predicted, inside,
                    "cell ({cx},{cy}): offsets ({ox},{oy}) prob {}",
                    probs[cy * gw + cx]
                );
            }
        }
    }

    #[test]
    fn batched_equals_independent_applications_bitwise() {
        let arch = HeadArch::new(3, 8, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (gh, gw) = (8, 8);
        let f = Tensor::<f32>::from_vec(
            &[2, 8, gh, gw],
            (0..2 * 8 * gh * gw).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let k = 5;
        let thetas_data: Vec<f32> = (0..k * 169).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let coords_data: Vec<f32> = (0..k * 2 * gh * gw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let batch_index = [0usize, 1, 0, 1, 1];

        let thetas = Tensor::from_vec(&[k, 169], thetas_data.clone());
        let coords = Tensor::from_vec(&[k, 2, gh, gw], coords_data.clone());
        let batched = apply_mask_heads(Some(&f), Some(&coords), &thetas, &batch_index, arch).unwrap();
        let batched = batched.to_vec();

        for ki in 0..k {
            let f_one = Tensor::from_vec(
                &[1, 8, gh, gw],
                f.data()[batch_index[ki] * 8 * gh * gw..(batch_index[ki] + 1) * 8 * gh * gw].to_vec(),
            );
            let theta_one = Tensor::from_vec(&[1, 169], thetas_data[ki * 169..(ki + 1) * 169].to_vec());
            let coords_one = Tensor::from_vec(
                &[1, 2, gh, gw],
                coords_data[ki * 2 * gh * gw..(ki + 1) * 2 * gh * gw].to_vec(),
            );
            let single = apply_mask_heads(Some(&f_one), Some(&coords_one), &theta_one, &[0], arch).unwrap();
            let expect = &batched[ki * gh * gw..(ki + 1) * gh * gw];
            assert_eq!(
                single.to_vec().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                expect.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn instance_output_independent_of_other_thetas() {
        let arch = HeadArch::new(2, 4, 10).unwrap();
        let (gh, gw) = (4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Tensor::<f32>::from_vec(
            &[1, 8, gh, gw],
            (0..8 * gh * gw).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let coords = Tensor::from_vec(&[2, 2, gh, gw], vec![0.1; 2 * 2 * gh * gw]);
        let p = arch.total_len();
        let mut thetas_a: Vec<f32> = (0..2 * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out_a = apply_mask_heads(
            Some(&f), Some(&coords), &Tensor::from_vec(&[2, p], thetas_a.clone()), &[0, 0], arch,
        ).unwrap();
        // perturb instance 1's parameters; instance 0's output must not move
        for v in thetas_a[p..].iter_mut() {
            *v += 10.0;
        }
        let out_b = apply_mask_heads(
            Some(&f), Some(&coords), &Tensor::from_vec(&[2, p], thetas_a), &[0, 0], arch,
        ).unwrap();
        assert_eq!(out_a.to_vec()[..gh * gw], out_b.to_vec()[..gh * gw]);
        assert_ne!(out_a.to_vec()[gh * gw..], out_b.to_vec()[gh * gw..]);
    }

    #[test]
    fn arch_param_mismatch_rejected() {
        let arch = HeadArch::new(3, 8, 10).unwrap();
        let f = Tensor::<f32>::zeros(&[1, 4, 4, 4]); // 4 features + 2 coords != 10
        let coords = Tensor::zeros(&[1, 2, 4, 4]);
        let thetas = Tensor::zeros(&[1, 169]);
        let err = apply_mask_heads(Some(&f), Some(&coords), &thetas, &[0], arch).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
    }

    #[test]
    fn upsample_factor_contract() {
        let logits = Tensor::<f32>::full(&[1, 1, 32, 32], 1.25);
        let up = upsample_prediction(&logits, 4).unwrap();
        assert_eq!(up.shape(), &[1, 1, 128, 128]);
        assert!(up.to_vec().iter().all(|&v| (v - 1.25).abs() < 1e-6));
        let same = upsample_prediction(&logits, 1).unwrap();
        assert_eq!(same.shape(), &[1, 1, 32, 32]);
        assert!(upsample_prediction(&logits, 3).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::tensor::gradcheck::{assert_gradients_close, uniform_tensor};
        let arch = HeadArch::new(3, 4, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let f = uniform_tensor(&mut rng, &[2, 4, 3, 3], -1.0, 1.0);
        let coords = uniform_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let thetas = uniform_tensor(&mut rng, &[3, arch.total_len()], -0.8, 0.8);
        assert_gradients_close(&[f, coords, thetas], |io| {
            apply_mask_heads(Some(&io[0]), Some(&io[1]), &io[2], &[0, 1, 0], arch)
                .unwrap()
                .sigmoid()
                .sum()
        }, "apply_mask_heads");
    }
}
