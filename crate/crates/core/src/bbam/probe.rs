use ndarray::{Array2, Array3, ArrayView3};

use crate::detector::{BBox, HeadGrad, HeadModel, HeadOutputs};
use crate::error::Result;
use crate::nn::Real;

/// Linear single-class "detector" used as an analytic oracle: the class
/// probability is a fixed weighted sum of pixels, the box head reads a
/// second weight map, and neither depends on the proposal.
#[derive(Debug, Clone)]
pub struct LinearProbe {
    /// `H×W` weights applied to the channel mean of the image.
    pub cls_weights: Array2<f64>,
    pub box_weights: Array2<f64>,
}

impl LinearProbe {
    /// Class output = mean of the pixels in the `size`×`size` square at
    /// `(y0, x0)`; the box head is zero.
    pub fn window(height: usize, width: usize, y0: usize, x0: usize, size: usize) -> Self {
        let n = (size * size) as f64;
        let cls_weights = Array2::from_shape_fn((height, width), |(y, x)| {
            if y >= y0 && y < y0 + size && x >= x0 && x < x0 + size {
                1.0 / n
            } else {
                0.0
            }
        });
        Self {
            cls_weights,
            box_weights: Array2::zeros((height, width)),
        }
    }

    fn read(&self, w: &Array2<f64>, image: ArrayView3<f64>) -> f64 {
        let mut acc = 0.0;
        for ((y, x), &wt) in w.indexed_iter() {
            if wt != 0.0 {
                acc += wt * (image[[0, y, x]] + image[[1, y, x]] + image[[2, y, x]]) / 3.0;
            }
        }
        acc
    }
}

impl<T: Real> HeadModel<T> for LinearProbe {
    type Tape = (usize, usize);

    fn num_classes(&self) -> usize {
        1
    }

    fn forward_tape(
        &self,
        image: ArrayView3<T>,
        proposals: &[BBox],
    ) -> Result<(Vec<HeadOutputs<T>>, Self::Tape)> {
        let img = image.mapv(|v| v.f64());
        let p = self.read(&self.cls_weights, img.view());
        let b = self.read(&self.box_weights, img.view());
        let out = HeadOutputs {
            probs: vec![T::lit(1.0 - p), T::lit(p)],
            offsets: vec![[T::lit(b); 4]],
        };
        Ok((
            vec![out; proposals.len()],
            (image.shape()[1], image.shape()[2]),
        ))
    }

    fn backward_tape(&self, tape: &Self::Tape, grads: &[HeadGrad<T>]) -> Array3<T> {
        let (h, w) = *tape;
        let mut gp = 0.0;
        let mut gb = 0.0;
        for g in grads {
            gp += g.probs[1].f64() - g.probs[0].f64();
            gb += g.offsets[0].iter().map(|v| v.f64()).sum::<f64>();
        }
        Array3::from_shape_fn((3, h, w), |(_, y, x)| {
            T::lit((gp * self.cls_weights[[y, x]] + gb * self.box_weights[[y, x]]) / 3.0)
        })
    }
}
