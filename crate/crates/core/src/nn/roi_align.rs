//! Bilinear RoIAlign with a fixed number of samples per output bin.
//!
//! Sampling positions depend only on the box and the feature-map geometry,
//! so they are precomputed once into a [`RoiRegion`] and reused for every
//! forward/backward pass over the same proposal.

use ndarray::{Array3, ArrayView3};

use super::Real;

/// Precomputed bilinear taps for one box: for every output cell, a list of
/// `(flat spatial index, weight)` pairs whose weighted sum gives the cell.
#[derive(Debug, Clone)]
pub struct RoiRegion {
    pub out_size: usize,
    pub feat_hw: (usize, usize),
    taps: Vec<Vec<(usize, f64)>>,
}

/// Alias kept for symmetry with the other layers: the region is everything
/// the backward pass needs.
pub type RoiAlignCache = RoiRegion;

impl RoiRegion {
    /// `box_xyxy` is in input-image pixels; `spatial_scale` maps it onto the
    /// feature grid (1/8 for a stride-8 backbone). Uses the half-pixel
    /// aligned convention.
    pub fn new(
        box_xyxy: [f64; 4],
        spatial_scale: f64,
        feat_hw: (usize, usize),
        out_size: usize,
        sampling: usize,
    ) -> Self {
        let (fh, fw) = feat_hw;
        let x0 = box_xyxy[0] * spatial_scale - 0.5;
        let y0 = box_xyxy[1] * spatial_scale - 0.5;
        let x1 = box_xyxy[2] * spatial_scale - 0.5;
        let y1 = box_xyxy[3] * spatial_scale - 0.5;
        let bin_w = (x1 - x0) / out_size as f64;
        let bin_h = (y1 - y0) / out_size as f64;
        let norm = 1.0 / (sampling * sampling) as f64;
        let mut taps = Vec::with_capacity(out_size * out_size);
        for py in 0..out_size {
            for px in 0..out_size {
                let mut cell: Vec<(usize, f64)> = Vec::with_capacity(4 * sampling * sampling);
                for iy in 0..sampling {
                    let y = y0 + py as f64 * bin_h + (iy as f64 + 0.5) * bin_h / sampling as f64;
                    for ix in 0..sampling {
                        let x =
                            x0 + px as f64 * bin_w + (ix as f64 + 0.5) * bin_w / sampling as f64;
                        bilinear_taps(y, x, fh, fw, norm, &mut cell);
                    }
                }
                cell.sort_by_key(|&(i, _)| i);
                let mut merged: Vec<(usize, f64)> = Vec::with_capacity(cell.len());
                for (i, w) in cell {
                    match merged.last_mut() {
                        Some((j, acc)) if *j == i => *acc += w,
                        _ => merged.push((i, w)),
                    }
                }
                taps.push(merged);
            }
        }
        Self {
            out_size,
            feat_hw,
            taps,
        }
    }

    /// Sum of all tap weights of one output cell (1 when fully inside the map).
    pub fn cell_mass(&self, cell: usize) -> f64 {
        self.taps[cell].iter().map(|&(_, w)| w).sum()
    }
}

fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, norm: f64, out: &mut Vec<(usize, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let mut y = y.max(0.0);
    let mut x = x.max(0.0);
    let mut y_lo = y.floor() as usize;
    let mut x_lo = x.floor() as usize;
    let y_hi;
    let x_hi;
    if y_lo >= h - 1 {
        y_lo = h - 1;
        y_hi = h - 1;
        y = y_lo as f64;
    } else {
        y_hi = y_lo + 1;
    }
    if x_lo >= w - 1 {
        x_lo = w - 1;
        x_hi = w - 1;
        x = x_lo as f64;
    } else {
        x_hi = x_lo + 1;
    }
    let ly = y - y_lo as f64;
    let lx = x - x_lo as f64;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    for (idx, wgt) in [
        (y_lo * w + x_lo, hy * hx),
        (y_lo * w + x_hi, hy * lx),
        (y_hi * w + x_lo, ly * hx),
        (y_hi * w + x_hi, ly * lx),
    ] {
        if wgt != 0.0 {
            out.push((idx, wgt * norm));
        }
    }
}

/// Pools `features` (`C×H×W`) into `C×out×out`.
pub fn roi_align<T: Real>(features: ArrayView3<T>, region: &RoiRegion) -> Array3<T> {
    let (c, h, w) = features.dim();
    assert_eq!(
        (h, w),
        region.feat_hw,
        "feature map does not match region geometry"
    );
    let feats = features.as_standard_layout();
    let fs = feats.as_slice().expect("standard layout");
    let n = region.out_size * region.out_size;
    let mut out = Array3::<T>::zeros((c, region.out_size, region.out_size));
    let os = out.as_slice_mut().expect("fresh array");
    let taps: Vec<Vec<(usize, T)>> = region
        .taps
        .iter()
        .map(|cell| cell.iter().map(|&(i, w)| (i, T::lit(w))).collect())
        .collect();
    for ci in 0..c {
        let plane = &fs[ci * h * w..(ci + 1) * h * w];
        let dst = &mut os[ci * n..(ci + 1) * n];
        for (d, cell) in dst.iter_mut().zip(&taps) {
            let mut acc = T::zero();
            for &(i, wt) in cell {
                acc += wt * plane[i];
            }
            *d = acc;
        }
    }
    out
}

/// Scatters `grad` (`C×out×out`) back onto `grad_features` (`C×H×W`).
pub fn roi_align_backward<T: Real>(
    grad: ArrayView3<T>,
    region: &RoiRegion,
    grad_features: &mut Array3<T>,
) {
    let (c, h, w) = grad_features.dim();
    assert_eq!(
        (h, w),
        region.feat_hw,
        "feature map does not match region geometry"
    );
    let n = region.out_size * region.out_size;
    let g = grad.as_standard_layout();
    let gs = g.as_slice().expect("standard layout");
    let fs = grad_features.as_slice_mut().expect("standard layout");
    for ci in 0..c {
        let plane = &mut fs[ci * h * w..(ci + 1) * h * w];
        for (cell, &gv) in region.taps.iter().zip(&gs[ci * n..(ci + 1) * n]) {
            if gv == T::zero() {
                continue;
            }
            for &(i, wt) in cell {
                plane[i] += T::lit(wt) * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_field_pools_to_constant() {
        let feats = Array3::<f64>::from_elem((3, 16, 16), 0.7);
        let region = RoiRegion::new([0.0, 0.0, 128.0, 128.0], 1.0 / 8.0, (16, 16), 7, 2);
        let pooled = roi_align(feats.view(), &region);
        assert!(pooled.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn translation_by_one_cell_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = Array3::<f64>::from_shape_fn((2, 16, 16), |_| rng.random());
        let shifted = Array3::<f64>::from_shape_fn((2, 16, 16), |(c, y, x)| {
            if x == 0 {
                0.0
            } else {
                base[[c, y, x - 1]]
            }
        });
        let a = RoiRegion::new([20.0, 24.0, 70.0, 90.0], 0.125, (16, 16), 7, 2);
        let b = RoiRegion::new([28.0, 24.0, 78.0, 90.0], 0.125, (16, 16), 7, 2);
        let pa = roi_align(base.view(), &a);
        let pb = roi_align(shifted.view(), &b);
        for (x, y) in pa.iter().zip(pb.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = Array3::<f64>::from_shape_fn((1, 5, 5), |_| rng.random());
        let region = RoiRegion::new([3.0, 5.0, 31.0, 27.0], 0.125, (5, 5), 7, 2);
        let probe = Array3::<f64>::from_shape_fn((1, 7, 7), |_| rng.random::<f64>() - 0.5);
        let f = |x: &Array3<f64>| (roi_align(x.view(), &region) * &probe).sum();
        let mut grad = Array3::zeros((1, 5, 5));
        roi_align_backward(probe.view(), &region, &mut grad);
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for idx in ndarray::indices((1, 5, 5)) {
            let mut p = feats.clone();
            p[idx] += h;
            let mut m = feats.clone();
            m[idx] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let denom = fd.abs().max(grad[idx].abs()).max(1e-8);
            max_rel = max_rel.max((fd - grad[idx]).abs() / denom);
        }
        assert!(max_rel < 1e-3, "max relative error {max_rel}");
    }
}
