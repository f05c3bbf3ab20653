use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in continuous pixel coordinates; a mask pixel at column
/// `x` spans `[x, x + 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidBox(format!("{self:?}")))
        }
    }

    pub fn clip(&self, width: usize, height: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        Self::new(
            self.x_min.clamp(0.0, w),
            self.y_min.clamp(0.0, h),
            self.x_max.clamp(0.0, w),
            self.y_max.clamp(0.0, h),
        )
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    /// Integer pixel range `[x0, x1) × [y0, y1)` covered by the box, clipped.
    pub fn pixel_range(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let c = self.clip(width, height);
        let x0 = c.x_min.floor().max(0.0) as usize;
        let y0 = c.y_min.floor().max(0.0) as usize;
        let x1 = (c.x_max.ceil() as usize).min(width);
        let y1 = (c.y_max.ceil() as usize).min(height);
        (x0, y0, x1.max(x0), y1.max(y0))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

/// Class-conditional regression offsets in centre/size form.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Offsets {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl Offsets {
    pub fn to_array(&self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            tx: a[0],
            ty: a[1],
            tw: a[2],
            th: a[3],
        }
    }
}

/// `t_x = (x − x_a)/w_a`, `t_y = (y − y_a)/h_a`, `t_w = ln(w/w_a)`, `t_h = ln(h/h_a)`.
pub fn encode_box(target: &BBox, anchor: &BBox) -> Result<Offsets> {
    target.validate()?;
    anchor.validate()?;
    let (cx, cy) = target.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok(Offsets {
        tx: (cx - ax) / aw,
        ty: (cy - ay) / ah,
        tw: (target.width() / aw).ln(),
        th: (target.height() / ah).ln(),
    })
}

pub fn decode_box(offsets: &Offsets, anchor: &BBox) -> Result<BBox> {
    anchor.validate()?;
    let t = offsets.to_array();
    if t.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidBox(format!("non-finite offsets {offsets:?}")));
    }
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    Ok(BBox::from_center(
        ax + offsets.tx * aw,
        ay + offsets.ty * ah,
        aw * offsets.tw.exp(),
        ah * offsets.th.exp(),
    ))
}

/// Scales offsets to the range the box head regresses (Faster R-CNN uses
/// weights 10, 10, 5, 5) and clamps log-size deltas on decode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCoder {
    pub weights: [f64; 4],
    pub max_log_scale: f64,
}

impl Default for BoxCoder {
    fn default() -> Self {
        Self {
            weights: [10.0, 10.0, 5.0, 5.0],
            max_log_scale: (1000.0f64 / 16.0).ln(),
        }
    }
}

impl BoxCoder {
    /// Head-space regression target for `target` relative to `proposal`.
    pub fn encode(&self, target: &BBox, proposal: &BBox) -> Result<[f64; 4]> {
        let t = encode_box(target, proposal)?.to_array();
        Ok([0, 1, 2, 3].map(|i| t[i] * self.weights[i]))
    }

    pub fn decode(&self, head: [f64; 4], proposal: &BBox) -> Result<BBox> {
        let mut t = [0, 1, 2, 3].map(|i| head[i] / self.weights[i]);
        t[2] = t[2].min(self.max_log_scale);
        t[3] = t[3].min(self.max_log_scale);
        decode_box(&Offsets::from_array(t), proposal)
    }
}

/// Greedy non-maximum suppression; returns kept indices in descending score order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep
            .iter()
            .all(|&k| boxes[k].iou(&boxes[i]) <= iou_threshold)
        {
            keep.push(i);
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_offsets() {
        let b = BBox::new(3.0, 4.0, 20.0, 30.0);
        assert_eq!(encode_box(&b, &b).unwrap(), Offsets::default());
    }

    #[test]
    fn hand_evaluated_offsets() {
        let anchor = BBox::new(0.0, 0.0, 10.0, 10.0);
        let t = encode_box(&BBox::new(1.0, 1.0, 11.0, 11.0), &anchor).unwrap();
        assert!((t.tx - 0.1).abs() < 1e-12 && (t.ty - 0.1).abs() < 1e-12);
        assert!(t.tw.abs() < 1e-12 && t.th.abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_boxes() {
        let ok = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert!(encode_box(&BBox::new(5.0, 0.0, 5.0, 3.0), &ok).is_err());
        assert!(encode_box(&ok, &BBox::new(0.0, 4.0, 3.0, 2.0)).is_err());
    }

    #[test]
    fn nms_identical_boxes_keeps_one() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[b, b], &[0.9, 0.8], 0.5), vec![0]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (
            -50.0f64..200.0,
            -50.0f64..200.0,
            0.5f64..150.0,
            0.5f64..150.0,
        )
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn decode_inverts_encode(b in arb_box(), a in arb_box()) {
            let d = decode_box(&encode_box(&b, &a).unwrap(), &a).unwrap();
            for (x, y) in d.to_array().iter().zip(b.to_array()) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }

        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let i = a.iou(&b);
            prop_assert!((0.0..=1.0).contains(&i));
            prop_assert!((i - b.iou(&a)).abs() < 1e-12);
        }
    }
}
