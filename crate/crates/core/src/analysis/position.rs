use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{boundary, BinaryMask};

/// Position of a pixel relative to the centroid and contour of a mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativePosition {
    /// Distance to the centroid.
    pub r1: f64,
    /// Distance to the nearest contour pixel.
    pub r2: f64,
    /// Angle of the offset from the centroid (x right, y down).
    pub theta: f64,
    /// `r1 / (r1 + r2) · (cos θ, sin θ)`.
    pub r: [f64; 2],
}

impl RelativePosition {
    pub fn norm(&self) -> f64 {
        self.r[0].hypot(self.r[1])
    }
}

/// Centroid and contour of one mask, reusable across many pixels.
#[derive(Debug, Clone)]
pub struct MaskGeometry {
    /// `(y, x)`
    pub centroid: (f64, f64),
    pub contour: Vec<(f64, f64)>,
}

impl MaskGeometry {
    pub fn new(mask: &BinaryMask) -> Result<Self> {
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
        for ((y, x), &v) in mask.indexed_iter() {
            if v {
                sy += y as f64;
                sx += x as f64;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Empty(
                "relative position needs a nonempty mask".into(),
            ));
        }
        let contour = boundary(mask)
            .indexed_iter()
            .filter(|(_, &v)| v)
            .map(|((y, x), _)| (y as f64, x as f64))
            .collect();
        Ok(Self {
            centroid: (sy / n as f64, sx / n as f64),
            contour,
        })
    }

    pub fn position(&self, y: f64, x: f64) -> RelativePosition {
        let (dy, dx) = (y - self.centroid.0, x - self.centroid.1);
        let r1 = dx.hypot(dy);
        let r2 = self
            .contour
            .iter()
            .map(|&(cy, cx)| (x - cx).hypot(y - cy))
            .fold(f64::INFINITY, f64::min);
        let theta = dy.atan2(dx);
        let s = if r1 + r2 > 0.0 { r1 / (r1 + r2) } else { 0.0 };
        RelativePosition {
            r1,
            r2,
            theta,
            r: [s * theta.cos(), s * theta.sin()],
        }
    }
}

/// Relative position of pixel `(y, x)` with respect to `mask`.
pub fn relative_position(y: usize, x: usize, mask: &BinaryMask) -> Result<RelativePosition> {
    let (h, w) = mask.dim();
    if y >= h || x >= w {
        return Err(Error::OutOfRange(format!(
            "pixel ({y}, {x}) outside a {h}x{w} mask"
        )));
    }
    Ok(MaskGeometry::new(mask)?.position(y as f64, x as f64))
}

/// Relative positions of the highly activated pixels of one head.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HeadPositions {
    pub points: Vec<[f64; 2]>,
    /// `None` when no pixel passed the cutoff.
    pub mean_norm: Option<f64>,
}

/// Collects `R` for every pixel inside a ground-truth mask whose attribution
/// exceeds `cutoff`. `maps` pairs full-resolution maps with their masks.
pub fn head_position_study(
    maps: &[(Array2<f64>, &BinaryMask)],
    cutoff: f64,
) -> Result<HeadPositions> {
    let mut points = Vec::new();
    for (map, mask) in maps {
        if map.dim() != mask.dim() {
            return Err(Error::ShapeMismatch(format!(
                "map {:?} vs mask {:?}",
                map.dim(),
                mask.dim()
            )));
        }
        if !mask.iter().any(|&v| v) {
            continue;
        }
        let geo = MaskGeometry::new(mask)?;
        for ((y, x), &v) in map.indexed_iter() {
            if v > cutoff && mask[[y, x]] {
                points.push(geo.position(y as f64, x as f64).r);
            }
        }
    }
    let mean_norm = (!points.is_empty())
        .then(|| points.iter().map(|p| p[0].hypot(p[1])).sum::<f64>() / points.len() as f64);
    Ok(HeadPositions { points, mean_norm })
}

/// Gaussian kernel density of `points` on a `bins×bins` grid over
/// `[-1, 1]²` (row = y). Integrates to one over the plane.
pub fn density(points: &[[f64; 2]], bins: usize, bandwidth: f64) -> Array2<f64> {
    let cell = 2.0 / bins as f64;
    let norm =
        1.0 / (points.len().max(1) as f64 * 2.0 * std::f64::consts::PI * bandwidth * bandwidth);
    Array2::from_shape_fn((bins, bins), |(i, j)| {
        let gy = -1.0 + (i as f64 + 0.5) * cell;
        let gx = -1.0 + (j as f64 + 0.5) * cell;
        points
            .iter()
            .map(|p| {
                (-((p[0] - gx).powi(2) + (p[1] - gy).powi(2)) / (2.0 * bandwidth * bandwidth)).exp()
            })
            .sum::<f64>()
            * norm
    })
}

/// Histogram density of `‖R‖` on `[0, 1]` with `bins` equal bins.
pub fn radial_profile(points: &[[f64; 2]], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for p in points {
        let r = p[0].hypot(p[1]);
        h[((r * bins as f64) as usize).min(bins - 1)] += 1.0;
    }
    let n = points.len().max(1) as f64;
    h.iter().map(|c| c * bins as f64 / n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(size: usize, radius: f64) -> BinaryMask {
        let c = (size as f64 - 1.0) / 2.0;
        Array2::from_shape_fn((size, size), |(y, x)| {
            (y as f64 - c).hypot(x as f64 - c) <= radius
        })
    }

    #[test]
    fn centroid_and_contour() {
        let m = disk(21, 8.0);
        let p = relative_position(10, 10, &m).unwrap();
        assert_eq!(p.r, [0.0, 0.0]);
        let b = boundary(&m);
        for ((y, x), &v) in b.indexed_iter() {
            if v {
                let p = relative_position(y, x, &m).unwrap();
                assert_eq!(p.r2, 0.0);
                assert!((p.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn half_radius_on_disk() {
        let m = disk(161, 70.0);
        let p = relative_position(80, 115, &m).unwrap();
        assert!((p.r[0] - 0.5).abs() < 0.01, "{:?}", p);
        assert!(p.r[1].abs() < 1e-12);
    }

    #[test]
    fn empty_mask_and_cutoff() {
        let m = Array2::from_elem((4, 4), false);
        assert!(relative_position(0, 0, &m).is_err());
        let m = disk(11, 4.0);
        let map = Array2::from_elem((11, 11), 1.0);
        let s = head_position_study(&[(map, &m)], 1.0 + 1e-9).unwrap();
        assert!(s.points.is_empty() && s.mean_norm.is_none());
    }

    #[test]
    fn density_integrates_to_one() {
        let d = density(&[[0.0, 0.0], [0.3, -0.2]], 64, 0.1);
        let cell = (2.0f64 / 64.0).powi(2);
        assert!((d.sum() * cell - 1.0).abs() < 1e-3);
    }
}
