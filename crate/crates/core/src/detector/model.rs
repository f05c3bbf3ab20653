use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::boxes::{BBox, BoxCoder};
use crate::error::{Error, Result};
use crate::nn::{
    relu_backward, relu_inplace, roi_align, roi_align_backward, softmax, softmax_backward, Conv2d,
    Linear, LinearCache, Param, Parameterized, Real, RoiRegion,
};

/// Architecture hyper-parameters of the two-stage detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Output channels of the four backbone stages (strides 2, 2, 2, 1).
    pub channels: [usize; 4],
    pub roi_size: usize,
    pub roi_sampling: usize,
    pub hidden: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            channels: [24, 48, 64, 64],
            roi_size: 7,
            roi_sampling: 2,
            hidden: 128,
        }
    }
}

pub const BACKBONE_STRIDE: usize = 8;
const STAGE_STRIDES: [usize; 4] = [2, 2, 2, 1];
/// Input scaling applied after mean subtraction.
const PIXEL_SCALE: f64 = 4.0;

/// Per-proposal outputs of the two heads.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs<T = f64> {
    /// Softmax over `C + 1` classes; index 0 is background.
    pub probs: Vec<T>,
    /// Head-space regression output per foreground class (index `c` holds
    /// the offsets for class id `c`).
    pub offsets: Vec<[T; 4]>,
}

impl<T: Real> HeadOutputs<T> {
    /// Most likely class id (`None` for background).
    pub fn predicted_class(&self) -> Option<usize> {
        let best = self
            .probs
            .iter()
            .enumerate()
            .max_by(|a, b| {
                a.1.partial_cmp(b.1)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.0.cmp(&a.0))
            })
            .map(|(i, _)| i)
            .unwrap_or(0);
        best.checked_sub(1)
    }

    /// Probability of foreground class id `class_id`.
    pub fn class_prob(&self, class_id: usize) -> T {
        self.probs[class_id + 1]
    }

    pub fn to_f64(&self) -> HeadOutputs<f64> {
        HeadOutputs {
            probs: self.probs.iter().map(|p| p.f64()).collect(),
            offsets: self.offsets.iter().map(|o| o.map(|v| v.f64())).collect(),
        }
    }
}

/// Upstream gradient with respect to one proposal's [`HeadOutputs`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad<T> {
    pub probs: Vec<T>,
    pub offsets: Vec<[T; 4]>,
}

impl<T: Real> HeadGrad<T> {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            probs: vec![T::zero(); num_classes + 1],
            offsets: vec![[T::zero(); 4]; num_classes],
        }
    }
}

/// A detector whose cls and box heads can be differentiated with respect to
/// the input image. Images are `3×H×W`.
pub trait HeadModel<T: Real> {
    type Tape;

    /// Number of foreground classes.
    fn num_classes(&self) -> usize;

    fn forward_tape(
        &self,
        image: ArrayView3<T>,
        proposals: &[BBox],
    ) -> Result<(Vec<HeadOutputs<T>>, Self::Tape)>;

    /// Vector-Jacobian product: image gradient for the given head gradients.
    fn backward_tape(&self, tape: &Self::Tape, grads: &[HeadGrad<T>]) -> Array3<T>;

    /// Offset parameterization used by the box head.
    fn coder(&self) -> BoxCoder {
        BoxCoder::default()
    }

    /// Box regressed for `class_id` from one proposal's outputs.
    fn decode_class(&self, out: &HeadOutputs<T>, class_id: usize, proposal: &BBox) -> Result<BBox> {
        self.coder()
            .decode(out.offsets[class_id].map(|v| v.f64()), proposal)
    }

    fn heads(&self, image: ArrayView3<T>, proposals: &[BBox]) -> Result<Vec<HeadOutputs<T>>> {
        self.forward_tape(image, proposals).map(|(o, _)| o)
    }
}

/// Small stride-8 CNN backbone, RoIAlign, and separate cls/box MLP heads.
#[derive(Debug, Clone)]
pub struct Detector<T: Real> {
    pub config: DetectorConfig,
    pub num_classes: usize,
    /// Per-channel training-set mean subtracted before the first layer.
    pub pixel_mean: [f64; 3],
    pub coder: BoxCoder,
    pub convs: Vec<Conv2d<T>>,
    pub cls_fc1: Linear<T>,
    pub cls_fc2: Linear<T>,
    pub box_fc1: Linear<T>,
    pub box_fc2: Linear<T>,
}

pub struct BackboneCache<T: Real> {
    convs: Vec<crate::nn::ConvCache<T>>,
    acts: Vec<Array3<T>>,
}

pub struct HeadCache<T: Real> {
    regions: Vec<RoiRegion>,
    feat_dim: (usize, usize, usize),
    cls1: LinearCache<T>,
    cls_hidden: Array2<T>,
    box1: LinearCache<T>,
    box_hidden: Array2<T>,
    cls2: LinearCache<T>,
    box2: LinearCache<T>,
    probs: Array2<T>,
}

/// Everything needed to back-propagate one image through the detector.
pub struct DetectorTape<T: Real> {
    pub backbone: BackboneCache<T>,
    pub heads: HeadCache<T>,
}

/// Raw batched head outputs.
#[derive(Debug, Clone)]
pub struct HeadBatch<T: Real> {
    pub logits: Array2<T>,
    pub probs: Array2<T>,
    /// `[P, 4·C]`
    pub boxes: Array2<T>,
}

impl<T: Real> Detector<T> {
    pub fn new(
        config: DetectorConfig,
        num_classes: usize,
        pixel_mean: [f64; 3],
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut cin = 3;
        for (&cout, &stride) in config.channels.iter().zip(&STAGE_STRIDES) {
            convs.push(Conv2d::new(&mut rng, cin, cout, 3, stride, 1));
            cin = cout;
        }
        let pooled = cin * config.roi_size * config.roi_size;
        let cls_fc1 = Linear::new(&mut rng, pooled, config.hidden);
        let cls_fc2 = Linear::with_gain(&mut rng, config.hidden, num_classes + 1, 0.1);
        let box_fc1 = Linear::new(&mut rng, pooled, config.hidden);
        let box_fc2 = Linear::with_gain(&mut rng, config.hidden, 4 * num_classes, 0.01);
        Self {
            config,
            num_classes,
            pixel_mean,
            coder: BoxCoder::default(),
            convs,
            cls_fc1,
            cls_fc2,
            box_fc1,
            box_fc2,
        }
    }

    pub fn cast<U: Real>(&self) -> Detector<U> {
        let conv = |c: &Conv2d<T>| Conv2d {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            stride: c.stride,
            padding: c.padding,
        };
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        Detector {
            config: self.config.clone(),
            num_classes: self.num_classes,
            pixel_mean: self.pixel_mean,
            coder: self.coder,
            convs: self.convs.iter().map(conv).collect(),
            cls_fc1: lin(&self.cls_fc1),
            cls_fc2: lin(&self.cls_fc2),
            box_fc1: lin(&self.box_fc1),
            box_fc2: lin(&self.box_fc2),
        }
    }

    pub fn feature_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let mut hw = (h, w);
        for c in &self.convs {
            hw = c.output_size(hw.0, hw.1);
        }
        hw
    }

    fn normalize(&self, image: ArrayView3<T>) -> Array3<T> {
        let mut x = image.to_owned();
        for (c, mut plane) in x.axis_iter_mut(Axis(0)).enumerate() {
            let m = T::lit(self.pixel_mean[c]);
            let s = T::lit(PIXEL_SCALE);
            plane.mapv_inplace(|v| (v - m) * s);
        }
        x
    }

    pub fn backbone_forward(&self, image: ArrayView3<T>) -> (Array3<T>, BackboneCache<T>) {
        let mut x = self.normalize(image);
        let mut caches = Vec::with_capacity(self.convs.len());
        let mut acts = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let (mut y, cache) = conv.forward(x.view());
            relu_inplace(&mut y);
            caches.push(cache);
            acts.push(y.clone());
            x = y;
        }
        (
            x,
            BackboneCache {
                convs: caches,
                acts,
            },
        )
    }

    /// Clips proposals to the image and precomputes their sampling grids.
    pub fn regions(&self, proposals: &[BBox], h: usize, w: usize) -> Result<Vec<RoiRegion>> {
        let fhw = self.feature_hw(h, w);
        proposals
            .iter()
            .map(|p| {
                p.validate()?;
                let c = p.clip(w, h);
                if c.width() <= 0.0 || c.height() <= 0.0 {
                    return Err(Error::DegenerateRegion(format!(
                        "proposal {p:?} lies outside the {w}x{h} image"
                    )));
                }
                Ok(RoiRegion::new(
                    c.to_array(),
                    1.0 / BACKBONE_STRIDE as f64,
                    fhw,
                    self.config.roi_size,
                    self.config.roi_sampling,
                ))
            })
            .collect()
    }

    pub fn heads_forward(
        &self,
        feats: ArrayView3<T>,
        regions: Vec<RoiRegion>,
    ) -> (HeadBatch<T>, HeadCache<T>) {
        let n = regions.len();
        let (c, fh, fw) = feats.dim();
        let roi = self.config.roi_size;
        let d = c * roi * roi;
        let mut pooled = Array2::<T>::zeros((n, d));
        for (i, r) in regions.iter().enumerate() {
            let p = roi_align(feats, r);
            pooled
                .row_mut(i)
                .assign(&p.into_shape_with_order(d).expect("contiguous"));
        }
        let (mut ch, cls1) = self.cls_fc1.forward(pooled.view());
        relu_inplace(&mut ch);
        let (logits, cls2) = self.cls_fc2.forward(ch.view());
        let (mut bh, box1) = self.box_fc1.forward(pooled.view());
        relu_inplace(&mut bh);
        let (boxes, box2) = self.box_fc2.forward(bh.view());
        let mut probs = Array2::<T>::zeros(logits.raw_dim());
        for (mut prow, lrow) in probs.rows_mut().into_iter().zip(logits.rows()) {
            let sm = softmax(lrow.as_slice().expect("row-major"));
            prow.assign(&ndarray::Array1::from(sm));
        }
        let batch = HeadBatch {
            logits,
            probs: probs.clone(),
            boxes,
        };
        let cache = HeadCache {
            regions,
            feat_dim: (c, fh, fw),
            cls1,
            cls_hidden: ch,
            box1,
            box_hidden: bh,
            cls2,
            box2,
            probs,
        };
        (batch, cache)
    }

    pub fn forward_batch(
        &self,
        image: ArrayView3<T>,
        proposals: &[BBox],
    ) -> Result<(HeadBatch<T>, DetectorTape<T>)> {
        let (_, h, w) = image.dim();
        let regions = self.regions(proposals, h, w)?;
        let (feats, backbone) = self.backbone_forward(image);
        let (batch, heads) = self.heads_forward(feats.view(), regions);
        Ok((batch, DetectorTape { backbone, heads }))
    }

    fn unpack(&self, batch: &HeadBatch<T>) -> Vec<HeadOutputs<T>> {
        (0..batch.probs.nrows())
            .map(|i| HeadOutputs {
                probs: batch.probs.row(i).to_vec(),
                offsets: (0..self.num_classes)
                    .map(|c| {
                        let r = batch.boxes.row(i);
                        [r[4 * c], r[4 * c + 1], r[4 * c + 2], r[4 * c + 3]]
                    })
                    .collect(),
            })
            .collect()
    }

    /// Decoded box for class `class_id` of one proposal.
    pub fn decode(&self, out: &HeadOutputs<T>, class_id: usize, proposal: &BBox) -> Result<BBox> {
        self.coder
            .decode(out.offsets[class_id].map(|v| v.f64()), proposal)
    }

    /// Back-propagates logit/box gradients through the heads (and optionally
    /// accumulates parameter gradients), returning the feature-map gradient.
    fn heads_backward(
        &mut self,
        cache: &HeadCache<T>,
        grad_logits: &Array2<T>,
        grad_boxes: &Array2<T>,
        accumulate: bool,
    ) -> Array3<T> {
        let mut gch = if accumulate {
            self.cls_fc2.backward(&cache.cls2, grad_logits.view(), true)
        } else {
            self.cls_fc2.backward_input(grad_logits.view())
        };
        relu_backward(&mut gch, &cache.cls_hidden);
        let gp_cls = if accumulate {
            self.cls_fc1.backward(&cache.cls1, gch.view(), true)
        } else {
            self.cls_fc1.backward_input(gch.view())
        };
        let mut gbh = if accumulate {
            self.box_fc2.backward(&cache.box2, grad_boxes.view(), true)
        } else {
            self.box_fc2.backward_input(grad_boxes.view())
        };
        relu_backward(&mut gbh, &cache.box_hidden);
        let gp_box = if accumulate {
            self.box_fc1.backward(&cache.box1, gbh.view(), true)
        } else {
            self.box_fc1.backward_input(gbh.view())
        };
        let gpooled = gp_cls + gp_box;
        self.scatter_pooled(cache, &gpooled)
    }

    fn heads_backward_input(
        &self,
        cache: &HeadCache<T>,
        grad_logits: &Array2<T>,
        grad_boxes: &Array2<T>,
    ) -> Array3<T> {
        let mut gch = self.cls_fc2.backward_input(grad_logits.view());
        relu_backward(&mut gch, &cache.cls_hidden);
        let gp_cls = self.cls_fc1.backward_input(gch.view());
        let mut gbh = self.box_fc2.backward_input(grad_boxes.view());
        relu_backward(&mut gbh, &cache.box_hidden);
        let gp_box = self.box_fc1.backward_input(gbh.view());
        self.scatter_pooled(cache, &(gp_cls + gp_box))
    }

    fn scatter_pooled(&self, cache: &HeadCache<T>, gpooled: &Array2<T>) -> Array3<T> {
        let (c, fh, fw) = cache.feat_dim;
        let roi = self.config.roi_size;
        let mut gfeat = Array3::<T>::zeros((c, fh, fw));
        for (i, r) in cache.regions.iter().enumerate() {
            let g = gpooled
                .row(i)
                .to_owned()
                .into_shape_with_order((c, roi, roi))
                .expect("contiguous");
            roi_align_backward(g.view(), r, &mut gfeat);
        }
        gfeat
    }

    fn backbone_backward(
        &mut self,
        cache: &BackboneCache<T>,
        grad_feat: Array3<T>,
        accumulate: bool,
        want_input: bool,
    ) -> Option<Array3<T>> {
        let mut g = grad_feat;
        for i in (0..self.convs.len()).rev() {
            relu_backward(&mut g, &cache.acts[i]);
            let need = want_input || i > 0;
            g = self.convs[i].backward(&cache.convs[i], g.view(), accumulate, need)?;
        }
        Some(self.denormalize_grad(g))
    }

    fn backbone_backward_input(&self, cache: &BackboneCache<T>, grad_feat: Array3<T>) -> Array3<T> {
        let mut g = grad_feat;
        for i in (0..self.convs.len()).rev() {
            relu_backward(&mut g, &cache.acts[i]);
            g = self.convs[i].backward_input(&cache.convs[i], g.view());
        }
        self.denormalize_grad(g)
    }

    fn denormalize_grad(&self, g: Array3<T>) -> Array3<T> {
        g * T::lit(PIXEL_SCALE)
    }

    /// Training backward pass from raw logit / box-output gradients.
    pub fn backward_params(
        &mut self,
        tape: &DetectorTape<T>,
        grad_logits: &Array2<T>,
        grad_boxes: &Array2<T>,
    ) {
        let gfeat = self.heads_backward(&tape.heads, grad_logits, grad_boxes, true);
        self.backbone_backward(&tape.backbone, gfeat, true, false);
    }

    /// Image gradient from raw logit / box-output gradients.
    pub fn backward_image(
        &self,
        tape: &DetectorTape<T>,
        grad_logits: &Array2<T>,
        grad_boxes: &Array2<T>,
    ) -> Array3<T> {
        let gfeat = self.heads_backward_input(&tape.heads, grad_logits, grad_boxes);
        self.backbone_backward_input(&tape.backbone, gfeat)
    }
}

impl<T: Real> Parameterized<T> for Detector<T> {
    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v: Vec<&mut Param<T>> = Vec::new();
        for c in self.convs.iter_mut() {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        for l in [
            &mut self.cls_fc1,
            &mut self.cls_fc2,
            &mut self.box_fc1,
            &mut self.box_fc2,
        ] {
            v.push(&mut l.weight);
            v.push(&mut l.bias);
        }
        v
    }
}

impl<T: Real> HeadModel<T> for Detector<T> {
    type Tape = DetectorTape<T>;

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn coder(&self) -> BoxCoder {
        self.coder
    }

    fn forward_tape(
        &self,
        image: ArrayView3<T>,
        proposals: &[BBox],
    ) -> Result<(Vec<HeadOutputs<T>>, DetectorTape<T>)> {
        let (batch, tape) = self.forward_batch(image, proposals)?;
        Ok((self.unpack(&batch), tape))
    }

    fn backward_tape(&self, tape: &DetectorTape<T>, grads: &[HeadGrad<T>]) -> Array3<T> {
        let n = grads.len();
        let k = self.num_classes + 1;
        let mut gl = Array2::<T>::zeros((n, k));
        let mut gb = Array2::<T>::zeros((n, 4 * self.num_classes));
        for (i, g) in grads.iter().enumerate() {
            let probs = tape.heads.probs.row(i);
            let gz = softmax_backward(probs.as_slice().expect("row-major"), &g.probs);
            gl.row_mut(i).assign(&ndarray::Array1::from(gz));
            for (c, o) in g.offsets.iter().enumerate() {
                gb.slice_mut(s![i, 4 * c..4 * c + 4])
                    .assign(&ndarray::arr1(o));
            }
        }
        self.backward_image(tape, &gl, &gb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image<T: Real>(seed: u64, h: usize, w: usize) -> Array3<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, h, w), |_| T::lit(rng.random::<f64>()))
    }

    #[test]
    fn untrained_outputs_are_a_simplex() {
        let det = Detector::<f32>::new(DetectorConfig::default(), 5, [0.5; 3], 1);
        let img = random_image::<f32>(2, 64, 64);
        let props = [
            BBox::new(3.0, 4.0, 40.0, 50.0),
            BBox::new(0.0, 0.0, 64.0, 64.0),
        ];
        let out = det.heads(img.view(), &props).unwrap();
        for o in &out {
            assert_eq!(o.probs.len(), 6);
            assert_eq!(o.offsets.len(), 5);
            assert!((o.probs.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            assert!(o.probs.iter().all(|&p| p >= 0.0));
        }
        assert_eq!(out, det.heads(img.view(), &props).unwrap());
    }

    #[test]
    fn rejects_proposals_outside_image() {
        let det = Detector::<f32>::new(DetectorConfig::default(), 5, [0.5; 3], 1);
        let img = random_image::<f32>(2, 64, 64);
        assert!(det
            .heads(img.view(), &[BBox::new(70.0, 70.0, 90.0, 90.0)])
            .is_err());
        assert!(det
            .heads(img.view(), &[BBox::new(10.0, 10.0, 5.0, 20.0)])
            .is_err());
    }

    /// d(‖p‖² + ‖t‖²)/dI by the tape versus central differences.
    #[test]
    fn image_gradient_matches_finite_differences() {
        let det = Detector::<f64>::new(
            DetectorConfig {
                channels: [4, 6, 6, 6],
                hidden: 16,
                ..Default::default()
            },
            3,
            [0.5; 3],
            4,
        );
        let img = random_image::<f64>(5, 32, 32);
        let props = [BBox::new(2.0, 3.0, 25.0, 29.0)];
        let objective = |x: &Array3<f64>| {
            let o = det.heads(x.view(), &props).unwrap();
            o[0].probs.iter().map(|p| p * p).sum::<f64>()
                + o[0].offsets.iter().flatten().map(|t| t * t).sum::<f64>()
        };
        let (out, tape) = det.forward_tape(img.view(), &props).unwrap();
        let grad = HeadGrad {
            probs: out[0].probs.iter().map(|p| 2.0 * p).collect(),
            offsets: out[0].offsets.iter().map(|o| o.map(|t| 2.0 * t)).collect(),
        };
        let gimg = det.backward_tape(&tape, &[grad]);
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut worst: f64 = 0.0;
        for _ in 0..25 {
            let idx = (
                rng.random_range(0..3),
                rng.random_range(0..32),
                rng.random_range(0..32),
            );
            let mut p = img.clone();
            p[idx] += h;
            let mut m = img.clone();
            m[idx] -= h;
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            let scale = gimg.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            worst = worst.max((fd - gimg[idx]).abs() / scale.max(1e-12));
        }
        assert!(worst < 1e-3, "relative error {worst}");
    }
}
