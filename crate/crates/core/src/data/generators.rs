//! Synthetic trajectories with known ground truth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;

use super::{FieldSchema, Trajectory};
use crate::error::{arg_err, Result};
use crate::scalar::Scalar;
use crate::spectral::{fft2, wavenumber};
use crate::tensor::Tensor;

/// One isotropic Gaussian random field with power spectrum `∝ |k|^-beta`,
/// normalised to zero mean and unit variance. The DC amplitude is zero.
pub fn gaussian_field<T: Scalar>(h: usize, w: usize, beta: f64, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(arg_err!("grid ({h}, {w}) must be powers of two"));
    }
    let mut spec: Vec<Complex<f64>> = (0..h * w)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            Complex::new(z, 0.0)
        })
        .collect();
    fft2(&mut spec, h, w, false, true);
    for (i, c) in spec.iter_mut().enumerate() {
        let k = wavenumber(i / w, i % w, h, w);
        let amp = if k == 0.0 { 0.0 } else { k.powf(-beta / 2.0) };
        *c *= amp;
    }
    fft2(&mut spec, h, w, true, true);
    let mean = spec.iter().map(|c| c.re).sum::<f64>() / (h * w) as f64;
    let var = spec.iter().map(|c| (c.re - mean).powi(2)).sum::<f64>() / (h * w) as f64;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    Tensor::new(vec![h, w], spec.iter().map(|c| T::lit((c.re - mean) / sd)).collect())
}

/// Trajectory of independent Gaussian random field frames (single scalar
/// field named `field`).
pub fn gen_gaussian_field_trajectory<T: Scalar>(
    shape: (usize, usize),
    beta: f64,
    frames: usize,
    seed: u64,
) -> Result<Trajectory<T>> {
    let (h, w) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(frames * h * w);
    for _ in 0..frames {
        data.extend_from_slice(gaussian_field::<T>(h, w, beta, &mut rng)?.as_slice());
    }
    Trajectory::new(FieldSchema::scalar("field"), Tensor::new(vec![frames, 1, h, w], data)?)
}

/// Spectral slope of the smooth tracer used by [`gen_advection_trajectory`].
pub const ADVECTION_TRACER_SLOPE: f64 = 4.0;

/// Periodic advection of a smooth tracer at an integer velocity
/// `(vx, vy)` pixels per frame: frame `t` is frame 0 cyclically shifted by
/// `(t vx, t vy)`. Channels: tracer, velocity_x, velocity_y (constant).
pub fn gen_advection_trajectory<T: Scalar>(
    shape: (usize, usize),
    velocity: (i64, i64),
    frames: usize,
    seed: u64,
) -> Result<Trajectory<T>> {
    let (h, w) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = gaussian_field::<T>(h, w, ADVECTION_TRACER_SLOPE, &mut rng)?;
    let (vx, vy) = velocity;
    let frames_t = Tensor::from_fn(&[frames, 3, h, w], |i| match i[1] {
        0 => {
            let y = (i[2] as i64 - i[0] as i64 * vy).rem_euclid(h as i64) as usize;
            let x = (i[3] as i64 - i[0] as i64 * vx).rem_euclid(w as i64) as usize;
            base.get(&[y, x])
        }
        1 => T::lit(vx as f64),
        _ => T::lit(vy as f64),
    });
    Trajectory::new(FieldSchema::advection(), frames_t)
}

/// Exact advection step: shifts every channel of a `(C, H, W)` frame by
/// `(vx, vy)` pixels (periodic).
pub fn shift_frame<T: Scalar>(frame: &Tensor<T>, velocity: (i64, i64)) -> Result<Tensor<T>> {
    let (c, h, w) = match frame.shape() {
        &[c, h, w] => (c, h, w),
        s => return Err(arg_err!("expected a (C, H, W) frame, got {s:?}")),
    };
    let (vx, vy) = velocity;
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let y = (i[1] as i64 - vy).rem_euclid(h as i64) as usize;
        let x = (i[2] as i64 - vx).rem_euclid(w as i64) as usize;
        frame.get(&[i[0], y, x])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advection_frames_are_exact_shifts() {
        let tr = gen_advection_trajectory::<f64>((16, 16), (1, 0), 5, 9).unwrap();
        let f0 = tr.frame(0).unwrap();
        let f3 = tr.frame(3).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(f3.get(&[0, y, (x + 3) % 16]), f0.get(&[0, y, x]));
            }
        }
        assert_eq!(shift_frame(&tr.frame(2).unwrap(), (1, 0)).unwrap(), tr.frame(3).unwrap());
        let still = gen_advection_trajectory::<f32>((8, 8), (0, 0), 4, 1).unwrap();
        for t in 1..4 {
            assert_eq!(still.frame(t).unwrap(), still.frame(0).unwrap());
        }
    }

    #[test]
    fn generators_are_seed_deterministic() {
        let a = gen_gaussian_field_trajectory::<f32>((16, 16), 2.0, 3, 5).unwrap();
        let b = gen_gaussian_field_trajectory::<f32>((16, 16), 2.0, 3, 5).unwrap();
        let c = gen_gaussian_field_trajectory::<f32>((16, 16), 2.0, 3, 6).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_ne!(a.frames, c.frames);
        assert!(gen_gaussian_field_trajectory::<f32>((12, 16), 2.0, 1, 0).is_err());
    }
}
