use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array3, ArrayView3};

use super::Real;

/// Linear interpolation operator `U` (`out_len × in_len`) that treats every
/// input sample as the centre of a block of `unit` output samples, so that
/// `U · v` bilinearly upsamples `v`. Positions beyond the first/last centre
/// are clamped (edge replication).
pub fn upsample_matrix<T: Real>(in_len: usize, out_len: usize, unit: f64) -> Array2<T> {
    let mut u = Array2::<T>::zeros((out_len, in_len));
    let last = in_len.saturating_sub(1) as f64;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) / unit - 0.5).clamp(0.0, last);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(in_len - 1);
        let frac = src - lo as f64;
        u[[o, lo]] += T::lit(1.0 - frac);
        if hi != lo {
            u[[o, hi]] += T::lit(frac);
        } else {
            u[[o, lo]] += T::lit(frac);
        }
    }
    u
}

/// Separable resampling of each channel: `out_c = rows · x_c · colsᵀ`.
pub fn resample<T: Real>(x: ArrayView3<T>, rows: &Array2<T>, cols: &Array2<T>) -> Array3<T> {
    let (c, _, _) = x.dim();
    let mut out = Array3::<T>::zeros((c, rows.nrows(), cols.nrows()));
    let mut tmp = Array2::<T>::zeros((rows.nrows(), x.dim().2));
    for ci in 0..c {
        general_mat_mul(
            T::one(),
            rows,
            &x.slice(s![ci, .., ..]),
            T::zero(),
            &mut tmp,
        );
        let mut dst = out.slice_mut(s![ci, .., ..]);
        general_mat_mul(T::one(), &tmp, &cols.t(), T::zero(), &mut dst);
    }
    out
}

/// Adjoint of [`resample`].
pub fn resample_backward<T: Real>(
    g: ArrayView3<T>,
    rows: &Array2<T>,
    cols: &Array2<T>,
) -> Array3<T> {
    let (c, _, _) = g.dim();
    let mut out = Array3::<T>::zeros((c, rows.ncols(), cols.ncols()));
    let mut tmp = Array2::<T>::zeros((rows.ncols(), g.dim().2));
    for ci in 0..c {
        general_mat_mul(
            T::one(),
            &rows.t(),
            &g.slice(s![ci, .., ..]),
            T::zero(),
            &mut tmp,
        );
        let mut dst = out.slice_mut(s![ci, .., ..]);
        general_mat_mul(T::one(), &tmp, cols, T::zero(), &mut dst);
    }
    out
}

/// Nearest-neighbour ×2 upsampling.
#[derive(Debug, Clone, Copy, Default)]
pub struct Upsample2x;

impl Upsample2x {
    pub fn forward<T: Real>(x: ArrayView3<T>) -> Array3<T> {
        let (c, h, w) = x.dim();
        Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
    }

    pub fn backward<T: Real>(g: ArrayView3<T>) -> Array3<T> {
        let (c, h, w) = g.dim();
        let mut out = Array3::<T>::zeros((c, h / 2, w / 2));
        for ((ci, y, x), &v) in g.indexed_iter() {
            out[[ci, y / 2, x / 2]] += v;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_sum_to_one_and_identity_at_unit_one() {
        let u = upsample_matrix::<f64>(5, 23, 4.6);
        for r in u.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
        let id = upsample_matrix::<f64>(4, 4, 1.0);
        assert_eq!(id, Array2::<f64>::eye(4));
    }

    #[test]
    fn resample_adjoint() {
        let rows = upsample_matrix::<f64>(3, 10, 4.0);
        let cols = upsample_matrix::<f64>(2, 7, 4.0);
        let x = Array3::from_shape_fn((2, 3, 2), |(a, b, c)| (a * 7 + b * 3 + c) as f64 * 0.1);
        let g = Array3::from_shape_fn((2, 10, 7), |(a, b, c)| ((a + b * c) % 5) as f64 - 2.0);
        let lhs = (resample(x.view(), &rows, &cols) * &g).sum();
        let rhs = (resample_backward(g.view(), &rows, &cols) * &x).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
