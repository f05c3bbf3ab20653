//! Binary-mask helpers shared by the data, pseudo-label and metric code.

use ndarray::{Array2, Zip};

use crate::detector::BBox;

/// `H×W` boolean mask.
pub type BinaryMask = Array2<bool>;

pub fn area(mask: &BinaryMask) -> usize {
    mask.iter().filter(|&&v| v).count()
}

pub fn intersection(a: &BinaryMask, b: &BinaryMask) -> usize {
    Zip::from(a)
        .and(b)
        .fold(0, |acc, &x, &y| acc + usize::from(x && y))
}

/// IoU of two masks; two empty masks have IoU 0.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let inter = intersection(a, b);
    let union = area(a) + area(b) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Tight box around the set pixels, or `None` for an empty mask.
pub fn tight_box(mask: &BinaryMask) -> Option<BBox> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    for ((y, x), &v) in mask.indexed_iter() {
        if v {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
    }
    (x0 != usize::MAX).then(|| BBox::new(x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64))
}

/// Mask with every pixel whose centre lies inside `b` set.
pub fn box_mask(b: &BBox, height: usize, width: usize) -> BinaryMask {
    let (x0, y0, x1, y1) = b.pixel_range(width, height);
    let mut m = BinaryMask::from_elem((height, width), false);
    for y in y0..y1 {
        for x in x0..x1 {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            if cx >= b.x_min && cx < b.x_max && cy >= b.y_min && cy < b.y_max {
                m[[y, x]] = true;
            }
        }
    }
    m
}

/// Fraction of `inner`'s pixels that are also set in `outer` (1 for empty `inner`).
pub fn containment(inner: &BinaryMask, outer: &BinaryMask) -> f64 {
    let a = area(inner);
    if a == 0 {
        1.0
    } else {
        intersection(inner, outer) as f64 / a as f64
    }
}

/// Pixels of the mask that have at least one 4-neighbour outside the mask
/// (or touch the image border).
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if !mask[[y, x]] {
            return false;
        }
        y == 0
            || x == 0
            || y + 1 == h
            || x + 1 == w
            || !mask[[y - 1, x]]
            || !mask[[y + 1, x]]
            || !mask[[y, x - 1]]
            || !mask[[y, x + 1]]
    })
}

/// Removes the outer `radius` pixels of the mask (4-connected erosion).
pub fn erode(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let mut m = mask.clone();
    for _ in 0..radius {
        let b = boundary(&m);
        Zip::from(&mut m).and(&b).for_each(|v, &edge| {
            if edge {
                *v = false;
            }
        });
    }
    m
}

/// Grows the mask by `radius` pixels (4-connected dilation).
pub fn dilate(mask: &BinaryMask, radius: usize) -> BinaryMask {
    let mut m = mask.clone();
    let (h, w) = m.dim();
    for _ in 0..radius {
        let prev = m.clone();
        for ((y, x), v) in m.indexed_iter_mut() {
            *v = prev[[y, x]]
                || (y > 0 && prev[[y - 1, x]])
                || (y + 1 < h && prev[[y + 1, x]])
                || (x > 0 && prev[[y, x - 1]])
                || (x + 1 < w && prev[[y, x + 1]]);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tight_box_and_iou() {
        let mut m = BinaryMask::from_elem((6, 6), false);
        m[[1, 2]] = true;
        m[[3, 4]] = true;
        assert_eq!(tight_box(&m), Some(BBox::new(2.0, 1.0, 5.0, 4.0)));
        assert_eq!(iou(&m, &m), 1.0);
        assert_eq!(tight_box(&BinaryMask::from_elem((3, 3), false)), None);
        let full = box_mask(&BBox::new(0.0, 0.0, 6.0, 6.0), 6, 6);
        assert_eq!(area(&full), 36);
        assert!((iou(&m, &full) - 2.0 / 36.0).abs() < 1e-12);
    }

    #[test]
    fn erosion_shrinks_square() {
        let m = box_mask(&BBox::new(1.0, 1.0, 7.0, 7.0), 8, 8);
        assert_eq!(area(&erode(&m, 1)), 16);
        assert_eq!(area(&erode(&m, 2)), 4);
    }
}
