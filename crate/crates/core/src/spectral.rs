//! 2-d discrete Fourier transforms and wavenumber binning.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::scalar::Scalar;

/// In-place 2-d FFT of a row-major `h x w` grid. `ortho` scales by
/// `1 / sqrt(h w)` so that the transform is unitary.
pub fn fft2<T: Scalar>(data: &mut [Complex<T>], h: usize, w: usize, inverse: bool, ortho: bool) {
    assert_eq!(data.len(), h * w);
    let mut planner = FftPlanner::<T>::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row.process(data);
    let mut column = vec![Complex::new(T::zero(), T::zero()); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }
    let scale = if ortho {
        T::one() / T::from_usize_lossy(h * w).sqrt()
    } else if inverse {
        T::one() / T::from_usize_lossy(h * w)
    } else {
        T::one()
    };
    if scale != T::one() {
        for v in data.iter_mut() {
            *v = *v * scale;
        }
    }
}

/// Signed integer mode index of DFT bin `i` on an axis of length `n`.
pub fn mode_index(i: usize, n: usize) -> isize {
    if i <= n / 2 {
        i as isize
    } else {
        i as isize - n as isize
    }
}

/// Wavenumber magnitude `|k'|` of grid cell `(y, x)` in cycles per grid
/// length along each axis.
pub fn wavenumber(y: usize, x: usize, h: usize, w: usize) -> f64 {
    let ky = mode_index(y, h) as f64;
    let kx = mode_index(x, w) as f64;
    (ky * ky + kx * kx).sqrt()
}

/// Integer bin of every grid cell: `round(|k'|)`.
pub fn wavenumber_bins(h: usize, w: usize) -> Vec<usize> {
    (0..h * w).map(|i| wavenumber(i / w, i % w, h, w).round() as usize).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unitary_round_trip_and_parseval() {
        let (h, w) = (8, 4);
        let x: Vec<Complex<f64>> = (0..h * w).map(|i| Complex::new((i as f64 * 0.37).sin(), 0.0)).collect();
        let mut f = x.clone();
        fft2(&mut f, h, w, false, true);
        let e_x: f64 = x.iter().map(|c| c.norm_sqr()).sum();
        let e_f: f64 = f.iter().map(|c| c.norm_sqr()).sum();
        assert!((e_x - e_f).abs() < 1e-12);
        fft2(&mut f, h, w, true, true);
        for (a, b) in x.iter().zip(&f) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn mode_indices_fold_negative_frequencies() {
        assert_eq!((0..8).map(|i| mode_index(i, 8)).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, -3, -2, -1]);
        assert_eq!(wavenumber(0, 7, 8, 8), 1.0);
    }
}
