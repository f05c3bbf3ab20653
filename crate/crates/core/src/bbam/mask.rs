use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Real;

/// Paper-scale stride law `16 + 48·√a`, rounded to the nearest integer.
pub fn adaptive_stride(area_ratio: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&area_ratio) {
        return Err(Error::OutOfRange(format!(
            "box area ratio {area_ratio} is outside [0, 1]"
        )));
    }
    Ok((16.0 + 48.0 * area_ratio.sqrt()).round() as usize)
}

/// How the perturbation unit size is chosen for an instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StridePolicy {
    /// [`adaptive_stride`] rescaled by `min(w, h) / reference_side`, so the
    /// same number of perturbation units covers an object at any image size.
    Adaptive {
        reference_side: f64,
    },
    Fixed {
        stride: usize,
    },
}

impl Default for StridePolicy {
    fn default() -> Self {
        StridePolicy::Adaptive {
            reference_side: 1536.0,
        }
    }
}

impl StridePolicy {
    pub fn stride(&self, area_ratio: f64, width: usize, height: usize) -> Result<usize> {
        match *self {
            StridePolicy::Adaptive { reference_side } => {
                if reference_side.is_nan() || reference_side <= 0.0 {
                    return Err(Error::Config(format!(
                        "reference side {reference_side} must be positive"
                    )));
                }
                let unit = (16.0 + 48.0 * area_ratio.clamp(0.0, 1.0).sqrt())
                    * width.min(height) as f64
                    / reference_side;
                adaptive_stride(area_ratio)?;
                Ok((unit.round() as usize).max(1))
            }
            StridePolicy::Fixed { stride } if stride >= 1 => Ok(stride),
            StridePolicy::Fixed { .. } => {
                Err(Error::Config("fixed stride must be at least 1".into()))
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            StridePolicy::Adaptive { reference_side } => format!("adaptive@{reference_side}"),
            StridePolicy::Fixed { stride } => format!("fixed:{stride}"),
        }
    }
}

/// One interpolation tap along an axis: `lo + frac·(hi − lo)`.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn taps(cells: usize, len: usize, stride: usize) -> Vec<Tap> {
    let last = cells.saturating_sub(1) as f64;
    (0..len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / stride as f64 - 0.5).clamp(0.0, last);
            let lo = src.floor() as usize;
            Tap {
                lo,
                hi: (lo + 1).min(cells - 1),
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Coarse attribution mask with one value per `stride`×`stride` block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMask {
    /// `⌈h/s⌉ × ⌈w/s⌉`
    pub values: Array2<f64>,
    pub stride: usize,
    pub width: usize,
    pub height: usize,
}

impl AttributionMask {
    pub fn filled(width: usize, height: usize, stride: usize, value: f64) -> Self {
        let stride = stride.max(1);
        Self {
            values: Array2::from_elem((height.div_ceil(stride), width.div_ceil(stride)), value),
            stride,
            width,
            height,
        }
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    fn check(&self) -> Result<()> {
        let want = (
            self.height.div_ceil(self.stride),
            self.width.div_ceil(self.stride),
        );
        if self.values.dim() != want {
            return Err(Error::ShapeMismatch(format!(
                "mask grid {:?} does not match stride {} at {}x{}",
                self.values.dim(),
                self.stride,
                self.width,
                self.height
            )));
        }
        Ok(())
    }

    /// Bilinear upsampling to `height × width` (edge replication at borders).
    pub fn upsampled(&self) -> Array2<f64> {
        upsample(self.values.view(), self.stride, self.height, self.width)
    }

    pub fn clamp_unit(&mut self) {
        self.values.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }

    /// Copy scaled so its maximum is 1 (unchanged when the mask is all zero).
    pub fn max_normalized(&self) -> Self {
        let m = self.values.iter().cloned().fold(0.0, f64::max);
        let mut out = self.clone();
        if m > 0.0 {
            out.values.mapv_inplace(|v| v / m);
        }
        out
    }
}

pub fn upsample(m: ArrayView2<f64>, stride: usize, height: usize, width: usize) -> Array2<f64> {
    let (rows, cols) = m.dim();
    let ty = taps(rows, height, stride);
    let tx = taps(cols, width, stride);
    let tmp = Array2::from_shape_fn((rows, width), |(r, x)| {
        let t = tx[x];
        m[[r, t.lo]] + t.frac * (m[[r, t.hi]] - m[[r, t.lo]])
    });
    Array2::from_shape_fn((height, width), |(y, x)| {
        let t = ty[y];
        tmp[[t.lo, x]] + t.frac * (tmp[[t.hi, x]] - tmp[[t.lo, x]])
    })
}

/// Adjoint of [`upsample`].
pub fn upsample_backward(
    g: ArrayView2<f64>,
    stride: usize,
    rows: usize,
    cols: usize,
) -> Array2<f64> {
    let (height, width) = g.dim();
    let ty = taps(rows, height, stride);
    let tx = taps(cols, width, stride);
    let mut tmp = Array2::<f64>::zeros((rows, width));
    for y in 0..height {
        let t = ty[y];
        for x in 0..width {
            tmp[[t.lo, x]] += g[[y, x]] * (1.0 - t.frac);
            tmp[[t.hi, x]] += g[[y, x]] * t.frac;
        }
    }
    let mut out = Array2::<f64>::zeros((rows, cols));
    for r in 0..rows {
        for x in 0..width {
            let t = tx[x];
            out[[r, t.lo]] += tmp[[r, x]] * (1.0 - t.frac);
            out[[r, t.hi]] += tmp[[r, x]] * t.frac;
        }
    }
    out
}

/// `Φ(I, M) = I∘M̂ + μ∘(1 − M̂)` for a `3×H×W` image.
pub fn perturb<T: Real>(
    image: ArrayView3<T>,
    mask: &AttributionMask,
    mean: [f64; 3],
) -> Result<Array3<T>> {
    mask.check()?;
    let (c, h, w) = image.dim();
    if c != 3 || h != mask.height || w != mask.width {
        return Err(Error::ShapeMismatch(format!(
            "image {c}x{h}x{w} does not match a {}x{} mask",
            mask.width, mask.height
        )));
    }
    Ok(perturb_with(image, mask.upsampled().view(), mean))
}

pub(crate) fn perturb_with<T: Real>(
    image: ArrayView3<T>,
    up: ArrayView2<f64>,
    mean: [f64; 3],
) -> Array3<T> {
    Array3::from_shape_fn(image.dim(), |(c, y, x)| {
        let m = T::lit(up[[y, x]]);
        image[[c, y, x]] * m + T::lit(mean[c]) * (T::one() - m)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stride_law_boundaries() {
        assert_eq!(adaptive_stride(0.0).unwrap(), 16);
        assert_eq!(adaptive_stride(1.0).unwrap(), 64);
        assert_eq!(adaptive_stride(0.25).unwrap(), 40);
        assert!(adaptive_stride(1.2).is_err());
        assert!(adaptive_stride(-0.1).is_err());
    }

    #[test]
    fn scaled_policy_matches_law_at_reference_size() {
        let p = StridePolicy::Adaptive {
            reference_side: 128.0,
        };
        assert_eq!(p.stride(0.25, 128, 128).unwrap(), 40);
        let p = StridePolicy::Adaptive {
            reference_side: 512.0,
        };
        assert_eq!(p.stride(0.25, 128, 128).unwrap(), 10);
        assert_eq!(
            StridePolicy::Fixed { stride: 7 }
                .stride(0.9, 128, 128)
                .unwrap(),
            7
        );
    }

    proptest! {
        #[test]
        fn stride_law_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(adaptive_stride(lo).unwrap() <= adaptive_stride(hi).unwrap());
        }

        #[test]
        fn identity_mask_is_bit_exact(seed in 0u64..1000, s in 1usize..20, mu in 0.0f64..1.0) {
            let img = Array3::<f32>::from_shape_fn((3, 23, 31), |(c, y, x)| {
                ((seed as usize + c * 7 + y * 13 + x * 17) % 101) as f32 / 101.0
            });
            let m = AttributionMask::filled(31, 23, s, 1.0);
            prop_assert_eq!(perturb(img.view(), &m, [mu, 0.3, 0.9]).unwrap(), img);
        }
    }

    #[test]
    fn zero_mask_gives_mean_and_scalar_case() {
        let img = Array3::<f64>::from_elem((3, 4, 4), 0.8);
        let m = AttributionMask::filled(4, 4, 2, 0.0);
        let out = perturb(img.view(), &m, [0.5, 0.1, 0.2]).unwrap();
        assert!(out.slice(ndarray::s![0, .., ..]).iter().all(|&v| v == 0.5));
        assert!(out.slice(ndarray::s![2, .., ..]).iter().all(|&v| v == 0.2));
        let m = AttributionMask::filled(4, 4, 2, 0.25);
        let out = perturb(img.view(), &m, [0.5; 3]).unwrap();
        assert!(out.iter().all(|&v| (v - 0.575).abs() < 1e-12));
    }

    #[test]
    fn perturbed_values_stay_between_image_and_mean() {
        let img = Array3::<f64>::from_shape_fn((3, 9, 9), |(c, y, x)| {
            ((c + 2 * y + 3 * x) % 5) as f64 / 4.0
        });
        let mut m = AttributionMask::filled(9, 9, 4, 0.0);
        m.values = Array2::from_shape_fn(m.values.dim(), |(r, c)| ((r * 3 + c) % 4) as f64 / 3.0);
        let mu = [0.3, 0.6, 0.9];
        let out = perturb(img.view(), &m, mu).unwrap();
        for ((c, y, x), &v) in out.indexed_iter() {
            let (a, b) = (img[[c, y, x]], mu[c]);
            assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12);
        }
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let img = Array3::<f64>::zeros((3, 8, 8));
        let m = AttributionMask::filled(9, 8, 2, 1.0);
        assert!(perturb(img.view(), &m, [0.0; 3]).is_err());
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        let m = Array2::from_shape_fn((3, 4), |(r, c)| (r * 4 + c) as f64 * 0.1 - 0.3);
        let g = Array2::from_shape_fn((11, 15), |(y, x)| ((y * 7 + x * 3) % 11) as f64 - 5.0);
        let lhs = (&upsample(m.view(), 4, 11, 15) * &g).sum();
        let rhs = (&upsample_backward(g.view(), 4, 3, 4) * &m).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn upsampled_shape_covers_image() {
        let m = AttributionMask::filled(30, 17, 8, 0.5);
        assert_eq!(m.grid_shape(), (3, 4));
        assert_eq!(m.upsampled().dim(), (17, 30));
    }
}
