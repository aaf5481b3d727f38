//! Causal and flexible-compression convolution primitives.
//!
//! Tensors are laid out `(batch, channel, time, height, width)`. Every
//! temporal padding here is leading-only and zero-valued, so output frame `t`
//! never reads input frames after `t`.
//!
//! Flexible layers hold a single *base kernel* sized for the largest scale
//! pair of the layer. Smaller strided kernels are derived by mass-preserving
//! linear resampling ([`interpolate_kernel`]); smaller depth-to-space factors
//! are derived by selecting output channels of the base expansion kernel
//! ([`subsample_d2s_kernel`]), which equals running the base upsampler and
//! keeping every `eta`-th pixel starting at index 0.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{arg_err, shape_err, Result};
use crate::kernels::ConvGeom;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Temporal and spatial stride, both powers of two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "(usize, usize)", into = "(usize, usize)")]
pub struct ScalePair {
    pub t: usize,
    pub s: usize,
}

impl ScalePair {
    pub fn new(t: usize, s: usize) -> Result<Self> {
        if !t.is_power_of_two() || !s.is_power_of_two() {
            return Err(arg_err!("scale pair ({t}, {s}) must consist of powers of two"));
        }
        Ok(Self { t, s })
    }

    /// `(k_t, k_s)`: `k_s = s_s`, `k_t = 1 + s_t` if `s_t > 1` else `s_t`.
    pub const fn kernel_size(&self) -> (usize, usize) {
        let kt = if self.t > 1 { 1 + self.t } else { self.t };
        (kt, self.s)
    }

    pub fn divides(&self, base: &ScalePair) -> bool {
        base.t % self.t == 0 && base.s % self.s == 0
    }

    /// Per-axis subsampling ratio `(base.t / t, base.s / s)`.
    pub fn eta(&self, base: &ScalePair) -> Result<ScalePair> {
        if !self.divides(base) {
            return Err(arg_err!("scale {self:?} does not divide base {base:?}: eta is not integral"));
        }
        Ok(ScalePair { t: base.t / self.t, s: base.s / self.s })
    }
}

impl TryFrom<(usize, usize)> for ScalePair {
    type Error = crate::error::Error;

    fn try_from((t, s): (usize, usize)) -> Result<Self> {
        Self::new(t, s)
    }
}

impl From<ScalePair> for (usize, usize) {
    fn from(p: ScalePair) -> Self {
        (p.t, p.s)
    }
}

impl std::fmt::Display for ScalePair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {})", self.t, self.s)
    }
}

/// Kernel sized for the largest scale pair of a flexible layer.
#[derive(Clone, Copy, Debug)]
pub struct BaseKernel {
    pub weight: Var,
    pub bias: Option<Var>,
    pub max_scale: ScalePair,
}

/// Stride-1 causal geometry for a `(k_t, k_s, k_s)` kernel.
pub fn causal_geom(kt: usize, ks: usize) -> Result<ConvGeom> {
    if ks % 2 == 0 {
        return Err(arg_err!("spatial kernel size {ks} is even; symmetric padding cannot preserve the spatial size"));
    }
    if kt == 0 {
        return Err(arg_err!("temporal kernel size must be positive"));
    }
    Ok(ConvGeom { stride_t: 1, stride_s: 1, pad_t: kt - 1, pad_s: (ks - 1) / 2 })
}

fn kernel_dims<T: Scalar>(g: &Graph<T>, w: Var) -> Result<(usize, usize, usize, usize, usize)> {
    match g.shape(w) {
        &[co, ci, kt, kh, kw] if kh == kw => Ok((co, ci, kt, kh, kw)),
        s => Err(shape_err!("expected a (c_out, c_in, k_t, k_s, k_s) kernel, got {s:?}")),
    }
}

/// Stride-1 causal convolution; preserves `(T, H, W)`.
pub fn causal_conv3d<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let (_, ci, kt, ks, _) = kernel_dims(g, w)?;
    let (_, xc, ..) = g.value(x).dims5()?;
    if xc != ci {
        return Err(shape_err!("kernel expects {ci} input channels, input has {xc}"));
    }
    let geom = causal_geom(kt, ks)?;
    g.conv3d(x, w, bias, geom)
}

/// `sqrt(c_total / c_active)`.
pub fn field_rescale(c_total: usize, c_active: usize) -> f64 {
    (c_total as f64 / c_active as f64).sqrt()
}

/// Which side of the kernel indexes physical fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldAxis {
    /// Encoder head: kernel input channels are fields.
    Input,
    /// Decoder head: kernel output channels (and bias) are fields.
    Output,
}

fn check_active(active: &[usize], c_total: usize) -> Result<()> {
    if active.is_empty() {
        return Err(arg_err!("active field set is empty"));
    }
    let mut seen = vec![false; c_total];
    for &a in active {
        if a >= c_total || std::mem::replace(&mut seen[a], true) {
            return Err(arg_err!("active field index {a} is out of range or repeated (c_total = {c_total})"));
        }
    }
    Ok(())
}

/// Selects the kernel slice for `active` fields along `axis` (dim 0 or 1).
fn select_kernel_slice<T: Scalar>(g: &mut Graph<T>, w: Var, active: &[usize], axis: FieldAxis) -> Result<Var> {
    let (co, ci, kt, kh, kw) = kernel_dims(g, w)?;
    let k = kt * kh * kw;
    let mut idx = Vec::new();
    let shape = match axis {
        FieldAxis::Input => {
            for o in 0..co {
                for &c in active {
                    let base = (o * ci + c) * k;
                    idx.extend(base..base + k);
                }
            }
            [co, active.len(), kt, kh, kw]
        }
        FieldAxis::Output => {
            for &o in active {
                let base = o * ci * k;
                idx.extend(base..base + ci * k);
            }
            [active.len(), ci, kt, kh, kw]
        }
    };
    g.gather(w, Arc::new(idx), &shape)
}

/// Causal convolution over a variable subset of physical fields.
///
/// The kernel is learned for `c_total` fields; the active rows (input side)
/// or columns (output side) are selected and the output is multiplied by
/// `sqrt(c_total / c_active)`. With every field active this is exactly
/// [`causal_conv3d`].
pub fn adaptive_field_conv<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    bias: Option<Var>,
    active: &[usize],
    axis: FieldAxis,
) -> Result<Var> {
    let (co, ci, ..) = kernel_dims(g, w)?;
    let c_total = match axis {
        FieldAxis::Input => ci,
        FieldAxis::Output => co,
    };
    check_active(active, c_total)?;
    if active.len() == c_total && active.iter().enumerate().all(|(i, &a)| i == a) {
        return causal_conv3d(g, x, w, bias);
    }
    let ws = select_kernel_slice(g, w, active, axis)?;
    let bs = match (axis, bias) {
        (FieldAxis::Output, Some(b)) => Some(g.gather(b, Arc::new(active.to_vec()), &[active.len()])?),
        (_, b) => b,
    };
    let y = causal_conv3d(g, x, ws, bs)?;
    if active.len() == c_total {
        return Ok(y);
    }
    Ok(g.scale(y, T::lit(field_rescale(c_total, active.len()))))
}

/// Mass-preserving linear resampling matrix `[n_out, n_in]`.
///
/// Taps are unit cells on `[0, n_in)`; output cell `j` covers
/// `[j n_in / n_out, (j + 1) n_in / n_out)` and collects each input cell in
/// proportion to the overlap, i.e. the cumulative kernel mass is linearly
/// interpolated. Every column sums to one, so the kernel's total mass along
/// the axis is preserved; `n_out == n_in` gives the identity.
pub fn resample_matrix<T: Scalar>(n_in: usize, n_out: usize) -> Result<Tensor<T>> {
    if n_in == 0 || n_out == 0 {
        return Err(arg_err!("resampling between empty axes ({n_in} -> {n_out})"));
    }
    let step = n_in as f64 / n_out as f64;
    Ok(Tensor::from_fn(&[n_out, n_in], |ix| {
        let (j, i) = (ix[0] as f64, ix[1] as f64);
        let (a, b) = (j * step, (j + 1.0) * step);
        T::lit((b.min(i + 1.0) - a.max(i)).max(0.0))
    }))
}

/// Derives the strided kernel for `target` from a base kernel by separable
/// mass-preserving resampling along time, height and width.
pub fn interpolate_kernel<T: Scalar>(g: &mut Graph<T>, base: &BaseKernel, target: ScalePair) -> Result<Var> {
    let (_, _, kt_b, ks_b, _) = kernel_dims(g, base.weight)?;
    let (kt, ks) = target.kernel_size();
    if kt > kt_b || ks > ks_b {
        return Err(arg_err!(
            "target kernel ({kt}, {ks}) for scale {target} exceeds base kernel ({kt_b}, {ks_b})"
        ));
    }
    let mut w = base.weight;
    for (axis, (from, to)) in [(2, (kt_b, kt)), (3, (ks_b, ks)), (4, (ks_b, ks))] {
        if from != to {
            w = g.resample(w, axis, Arc::new(resample_matrix(from, to)?))?;
        }
    }
    Ok(w)
}

/// Geometry of a strided causal downsampling layer: stride equals the scale,
/// `s_t` leading zero frames when `s_t > 1`, no spatial padding.
pub fn downsample_geom(scale: ScalePair) -> ConvGeom {
    ConvGeom { stride_t: scale.t, stride_s: scale.s, pad_t: if scale.t > 1 { scale.t } else { 0 }, pad_s: 0 }
}

/// Output `(T', H', W')` of [`flexible_downsample`], or a shape diagnostic.
pub fn downsample_dims(t: usize, h: usize, w: usize, scale: ScalePair) -> Result<(usize, usize, usize)> {
    if t == 0 || (t - 1) % scale.t != 0 || h % scale.s != 0 || w % scale.s != 0 {
        return Err(shape_err!(
            "input (T={t}, H={h}, W={w}) incompatible with scale {scale}: need (T-1) % {} == 0 and H, W % {} == 0",
            scale.t,
            scale.s
        ));
    }
    Ok((1 + (t - 1) / scale.t, h / scale.s, w / scale.s))
}

/// Strided causal downsampling at a runtime-selected scale.
///
/// Output shape is `(c_out, 1 + (T-1)/s_t, H/s_s, W/s_s)`; latent frame `τ`
/// depends only on input frames `≤ τ s_t` and frame 0 encodes input frame 0
/// alone.
pub fn flexible_downsample<T: Scalar>(g: &mut Graph<T>, x: Var, base: &BaseKernel, scale: ScalePair) -> Result<Var> {
    if !scale.divides(&base.max_scale) {
        return Err(arg_err!("scale {scale} does not divide base scale {}", base.max_scale));
    }
    let (_, _, t, h, w) = g.value(x).dims5()?;
    let want = downsample_dims(t, h, w, scale)?;
    let kernel = interpolate_kernel(g, base, scale)?;
    let y = g.conv3d(x, kernel, base.bias, downsample_geom(scale))?;
    let (_, _, to, ho, wo) = g.value(y).dims5()?;
    debug_assert_eq!((to, ho, wo), want);
    Ok(y)
}

/// Base-kernel output channels kept when upsampling by `scale` instead of
/// `base` (see [`subsample_d2s_kernel`]).
pub fn d2s_channel_index(channels: usize, base: ScalePair, scale: ScalePair) -> Result<Vec<usize>> {
    let eta = scale.eta(&base)?;
    let block = base.t * base.s * base.s;
    let mut idx = Vec::with_capacity(channels * scale.t * scale.s * scale.s);
    for c in 0..channels {
        for dt in 0..scale.t {
            for dy in 0..scale.s {
                for dx in 0..scale.s {
                    idx.push(c * block + ((dt * eta.t) * base.s + dy * eta.s) * base.s + dx * eta.s);
                }
            }
        }
    }
    Ok(idx)
}

/// Subsamples the output channels of a depth-to-space expansion kernel so
/// that convolve-then-rearrange at `scale` equals the base path followed by
/// keeping every `eta`-th pixel (from index 0) along each rearranged axis.
pub fn subsample_d2s_kernel<T: Scalar>(
    g: &mut Graph<T>,
    base: &BaseKernel,
    scale: ScalePair,
) -> Result<(Var, Option<Var>)> {
    let (co_b, ci, kt, kh, kw) = kernel_dims(g, base.weight)?;
    let block = base.max_scale.t * base.max_scale.s * base.max_scale.s;
    if co_b % block != 0 {
        return Err(shape_err!("base expansion of {co_b} channels is not a multiple of {block}"));
    }
    if scale == base.max_scale {
        return Ok((base.weight, base.bias));
    }
    let idx = d2s_channel_index(co_b / block, base.max_scale, scale)?;
    let k = ci * kt * kh * kw;
    let widx: Vec<usize> = idx.iter().flat_map(|&o| o * k..(o + 1) * k).collect();
    let w = g.gather(base.weight, Arc::new(widx), &[idx.len(), ci, kt, kh, kw])?;
    let b = match base.bias {
        Some(b) => Some(g.gather(b, Arc::new(idx.clone()), &[idx.len()])?),
        None => None,
    };
    Ok((w, b))
}

/// Rearranges `(B, c s_t s_s^2, T, H, W)` into `(B, c, T s_t, H s_s, W s_s)`.
pub fn depth_to_space<T: Scalar>(g: &mut Graph<T>, x: Var, scale: ScalePair) -> Result<Var> {
    let (b, cx, t, h, w) = g.value(x).dims5()?;
    let block = scale.t * scale.s * scale.s;
    if cx % block != 0 {
        return Err(shape_err!("{cx} channels not divisible by s_t * s_s^2 = {block}"));
    }
    let c = cx / block;
    let (to, ho, wo) = (t * scale.t, h * scale.s, w * scale.s);
    let mut idx = Vec::with_capacity(b * cx * t * h * w);
    for bi in 0..b {
        for ci in 0..c {
            for tt in 0..to {
                let (tau, dt) = (tt / scale.t, tt % scale.t);
                for yy in 0..ho {
                    let (hy, dy) = (yy / scale.s, yy % scale.s);
                    for xx in 0..wo {
                        let (wx, dx) = (xx / scale.s, xx % scale.s);
                        let ch = ci * block + (dt * scale.s + dy) * scale.s + dx;
                        idx.push((((bi * cx + ch) * t + tau) * h + hy) * w + wx);
                    }
                }
            }
        }
    }
    g.gather(x, Arc::new(idx), &[b, c, to, ho, wo])
}

/// Drops the first `n` frames.
pub fn discard_leading_frames<T: Scalar>(g: &mut Graph<T>, x: Var, n: usize) -> Result<Var> {
    if n == 0 {
        return Ok(x);
    }
    let t = g.value(x).dims5()?.2;
    if n >= t {
        return Err(shape_err!("cannot discard {n} of {t} frames"));
    }
    g.narrow(x, 2, n, t - n)
}

/// Flexible causal depth-to-space upsampling.
///
/// A causal 3x3x3 convolution expands channels by `s_t s_s^2` (using the
/// channel-subsampled base kernel when `scale` is below the base scale), the
/// channels are rearranged into time/height/width blocks and the first
/// `s_t - 1` frames are discarded: `(T', H', W') -> (T' s_t - s_t + 1, H' s_s, W' s_s)`.
pub fn flexible_depth_to_space<T: Scalar>(g: &mut Graph<T>, z: Var, base: &BaseKernel, scale: ScalePair) -> Result<Var> {
    if !scale.divides(&base.max_scale) {
        return Err(arg_err!("scale {scale} does not divide base scale {}", base.max_scale));
    }
    let (w, b) = subsample_d2s_kernel(g, base, scale)?;
    let y = causal_conv3d(g, z, w, b)?;
    let y = depth_to_space(g, y, scale)?;
    discard_leading_frames(g, y, scale.t - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    /// Hand-rolled direct stride-1 causal convolution for a single batch item.
    fn direct_causal(x: &Tensor<f64>, w: &Tensor<f64>) -> Tensor<f64> {
        let (b, ci, t, h, wd) = x.dims5().unwrap();
        let (co, _, kt, ks, _) = w.dims5().unwrap();
        let p = (ks - 1) / 2;
        Tensor::from_fn(&[b, co, t, h, wd], |i| {
            let mut acc = 0.0;
            for c in 0..ci {
                for dt in 0..kt {
                    // tap dt reads frame t - (kt - 1) + dt
                    let ti = i[2] as isize + dt as isize - (kt as isize - 1);
                    if ti < 0 {
                        continue;
                    }
                    for dh in 0..ks {
                        for dw in 0..ks {
                            let hi = i[3] as isize + dh as isize - p as isize;
                            let wi = i[4] as isize + dw as isize - p as isize;
                            if hi < 0 || wi < 0 || hi >= h as isize || wi >= wd as isize {
                                continue;
                            }
                            acc += w.get(&[i[1], c, dt, dh, dw]) * x.get(&[i[0], c, ti as usize, hi as usize, wi as usize]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::<f64>::randn(&[1, 1, 3, 4, 4], 1.0, &mut rng());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.constant(Tensor::full(&[1, 1, 1, 1, 1], 1.0));
        let y = causal_conv3d(&mut g, xv, w, None).unwrap();
        assert!(g.value(y).bit_eq(&x));
    }

    #[test]
    fn first_frame_sees_only_last_temporal_tap() {
        let (a0, a1, a2) = (1.5, -2.0, 0.25);
        let (w0, w1, w2) = (0.3, 0.7, 1.9);
        let x = Tensor::new(vec![1, 1, 3, 1, 1], vec![a0, a1, a2]).unwrap();
        let w = Tensor::new(vec![1, 1, 3, 1, 1], vec![w0, w1, w2]).unwrap();
        let mut g = Graph::<f64>::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = causal_conv3d(&mut g, xv, wv, None).unwrap();
        let ys = g.value(y).as_slice().to_vec();
        assert_eq!(ys[0], w2 * a0);
        assert_eq!(ys[1], w1 * a0 + w2 * a1);
        let want = direct_causal(&x, &w);
        assert!(g.value(y).max_abs_diff(&want) < 1e-15);
    }

    #[test]
    fn stride_one_preserves_shape_and_matches_direct() {
        let mut r = rng();
        let x = Tensor::<f64>::randn(&[1, 3, 9, 16, 16], 1.0, &mut r);
        let w = Tensor::<f64>::randn(&[8, 3, 3, 3, 3], 0.3, &mut r);
        let mut g = Graph::new();
        let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
        let y = causal_conv3d(&mut g, xv, wv, None).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 9, 16, 16]);
        assert!(g.value(y).max_abs_diff(&direct_causal(&x, &w)) < 1e-12);
    }

    #[test]
    fn rejects_even_spatial_kernel_and_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 3, 4, 4]));
        let w_even = g.constant(Tensor::zeros(&[1, 2, 3, 2, 2]));
        assert!(causal_conv3d(&mut g, x, w_even, None).is_err());
        let w_bad = g.constant(Tensor::zeros(&[1, 3, 3, 3, 3]));
        assert!(causal_conv3d(&mut g, x, w_bad, None).is_err());
    }

    #[test]
    fn adaptive_conv_scale_and_empty_set() {
        assert_eq!(field_rescale(4, 1), 2.0);
        assert_eq!(field_rescale(4, 4), 1.0);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 1, 3, 3]));
        let w = g.constant(Tensor::zeros(&[2, 4, 1, 1, 1]));
        assert!(adaptive_field_conv(&mut g, x, w, None, &[], FieldAxis::Input).is_err());
        assert!(adaptive_field_conv(&mut g, x, w, None, &[4], FieldAxis::Input).is_err());
    }

    #[test]
    fn scale_pair_kernel_sizes() {
        assert_eq!(ScalePair::new(1, 2).unwrap().kernel_size(), (1, 2));
        assert_eq!(ScalePair::new(2, 2).unwrap().kernel_size(), (3, 2));
        assert_eq!(ScalePair::new(2, 4).unwrap().kernel_size(), (3, 4));
        assert!(ScalePair::new(3, 2).is_err());
        assert!(ScalePair::new(1, 2).unwrap().eta(&ScalePair { t: 1, s: 1 }).is_err());
    }

    #[test]
    fn resample_matrix_columns_sum_to_one() {
        for (a, b) in [(4, 2), (3, 1), (4, 4), (2, 1), (4, 1)] {
            let m = resample_matrix::<f64>(a, b).unwrap();
            for i in 0..a {
                let s: f64 = (0..b).map(|j| m.get(&[j, i])).sum();
                assert!((s - 1.0).abs() < 1e-15);
            }
        }
        let id = resample_matrix::<f64>(3, 3).unwrap();
        assert_eq!(id, Tensor::from_fn(&[3, 3], |i| if i[0] == i[1] { 1.0 } else { 0.0 }));
    }

    #[test]
    fn interpolate_rejects_larger_target() {
        let mut g = Graph::<f64>::new();
        let w = g.constant(Tensor::zeros(&[1, 1, 1, 2, 2]));
        let base = BaseKernel { weight: w, bias: None, max_scale: ScalePair { t: 1, s: 2 } };
        assert!(interpolate_kernel(&mut g, &base, ScalePair { t: 2, s: 4 }).is_err());
    }

    #[test]
    fn downsample_rejects_indivisible_shapes() {
        assert!(downsample_dims(9, 16, 16, ScalePair { t: 2, s: 4 }).is_ok());
        assert!(downsample_dims(8, 16, 16, ScalePair { t: 2, s: 2 }).is_err());
        assert!(downsample_dims(9, 18, 16, ScalePair { t: 1, s: 4 }).is_err());
    }

    #[test]
    fn depth_to_space_rejects_bad_channel_count() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 6, 2, 2, 2]));
        assert!(depth_to_space(&mut g, x, ScalePair { t: 2, s: 2 }).is_err());
    }
}
