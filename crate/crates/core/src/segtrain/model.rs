use ndarray::{concatenate, s, Array2, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{
    relu_backward, relu_inplace, resample, resample_backward, upsample_matrix, Conv2d, ConvCache,
    Param, Parameterized, Upsample2x,
};

/// Encoder/decoder widths. The encoder halves the resolution four times;
/// the decoder returns to half resolution and logits are bilinearly
/// upsampled to the input size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegModelConfig {
    pub widths: [usize; 4],
}

impl Default for SegModelConfig {
    fn default() -> Self {
        Self {
            widths: [24, 48, 64, 64],
        }
    }
}

const MULTIPLE: usize = 16;
const PIXEL_SCALE: f32 = 4.0;

/// Small U-shaped network emitting per-pixel logits over `C + 1` labels.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub config: SegModelConfig,
    pub num_labels: usize,
    pub pixel_mean: [f64; 3],
    /// e1 (s2), e1b, e2 (s2), e3 (s2), e4 (s2), e4b
    enc: Vec<Conv2d<f32>>,
    /// d3 (8→16), d2 (16→32), d1 (32→64)
    dec: Vec<Conv2d<f32>>,
    head: Conv2d<f32>,
}

pub struct SegTape {
    convs: Vec<ConvCache<f32>>,
    acts: Vec<Array3<f32>>,
    dec_convs: Vec<ConvCache<f32>>,
    dec_acts: Vec<Array3<f32>>,
    head: ConvCache<f32>,
    skip_channels: [usize; 3],
    padded: (usize, usize),
    out: (usize, usize),
}

impl SegModel {
    pub fn new(config: SegModelConfig, num_labels: usize, pixel_mean: [f64; 3], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [a, b, c, d] = config.widths;
        let enc = vec![
            Conv2d::new(&mut rng, 3, a, 3, 2, 1),
            Conv2d::new(&mut rng, a, a, 3, 1, 1),
            Conv2d::new(&mut rng, a, b, 3, 2, 1),
            Conv2d::new(&mut rng, b, c, 3, 2, 1),
            Conv2d::new(&mut rng, c, d, 3, 2, 1),
            Conv2d::new(&mut rng, d, d, 3, 1, 1),
        ];
        let dec = vec![
            Conv2d::new(&mut rng, d + c, c, 3, 1, 1),
            Conv2d::new(&mut rng, c + b, b, 3, 1, 1),
            Conv2d::new(&mut rng, b + a, a, 3, 1, 1),
        ];
        let head = Conv2d::new(&mut rng, a, num_labels, 1, 1, 0);
        Self {
            config,
            num_labels,
            pixel_mean,
            enc,
            dec,
            head,
        }
    }

    fn prepare(&self, image: ArrayView3<f32>) -> Array3<f32> {
        let (_, h, w) = image.dim();
        let (ph, pw) = (
            h.div_ceil(MULTIPLE) * MULTIPLE,
            w.div_ceil(MULTIPLE) * MULTIPLE,
        );
        let mut x = Array3::<f32>::zeros((3, ph, pw));
        for c in 0..3 {
            let m = self.pixel_mean[c] as f32;
            x.slice_mut(s![c, ..h, ..w])
                .assign(&image.slice(s![c, .., ..]).mapv(|v| (v - m) * PIXEL_SCALE));
        }
        x
    }

    /// Logits `[labels, H, W]` for a `3×H×W` image.
    pub fn forward(&self, image: ArrayView3<f32>) -> (Array3<f32>, SegTape) {
        let (_, h, w) = image.dim();
        let x = self.prepare(image);
        let padded = (x.dim().1, x.dim().2);
        let mut convs = Vec::new();
        let mut acts: Vec<Array3<f32>> = Vec::new();
        let mut cur = x;
        for conv in &self.enc {
            let (mut y, cache) = conv.forward(cur.view());
            relu_inplace(&mut y);
            convs.push(cache);
            acts.push(y.clone());
            cur = y;
        }
        // skips: e1b (½), e2 (¼), e3 (⅛); bottom e4b (1/16)
        let skips = [&acts[1], &acts[2], &acts[3]];
        let mut dec_convs = Vec::new();
        let mut dec_acts = Vec::new();
        for (i, conv) in self.dec.iter().enumerate() {
            let up = Upsample2x::forward(cur.view());
            let cat = concatenate(Axis(0), &[up.view(), skips[2 - i].view()])
                .expect("matching spatial size");
            let (mut y, cache) = conv.forward(cat.view());
            relu_inplace(&mut y);
            dec_convs.push(cache);
            dec_acts.push(y.clone());
            cur = y;
        }
        let (logits_half, head) = self.head.forward(cur.view());
        let (hh, hw) = (logits_half.dim().1, logits_half.dim().2);
        let rows = upsample_matrix::<f32>(hh, padded.0, 2.0);
        let cols = upsample_matrix::<f32>(hw, padded.1, 2.0);
        let full = resample(logits_half.view(), &rows, &cols);
        let logits = full.slice(s![.., ..h, ..w]).to_owned();
        let skip_channels = [skips[0].dim().0, skips[1].dim().0, skips[2].dim().0];
        (
            logits,
            SegTape {
                convs,
                acts,
                dec_convs,
                dec_acts,
                head,
                skip_channels,
                padded,
                out: (h, w),
            },
        )
    }

    /// Accumulates parameter gradients for `grad_logits` (`[labels, H, W]`).
    pub fn backward(&mut self, tape: &SegTape, grad_logits: &Array3<f32>) {
        let (ph, pw) = tape.padded;
        let (h, w) = tape.out;
        let mut gfull = Array3::<f32>::zeros((self.num_labels, ph, pw));
        gfull.slice_mut(s![.., ..h, ..w]).assign(grad_logits);
        let (hh, hw) = (ph / 2, pw / 2);
        let rows = upsample_matrix::<f32>(hh, ph, 2.0);
        let cols = upsample_matrix::<f32>(hw, pw, 2.0);
        let ghalf = resample_backward(gfull.view(), &rows, &cols);
        let mut g = self
            .head
            .backward(&tape.head, ghalf.view(), true, true)
            .expect("input grad");
        let mut skip_grads: [Option<Array3<f32>>; 3] = [None, None, None];
        for i in (0..self.dec.len()).rev() {
            relu_backward(&mut g, &tape.dec_acts[i]);
            let gcat = self.dec[i]
                .backward(&tape.dec_convs[i], g.view(), true, true)
                .expect("input grad");
            let up_c = gcat.dim().0 - tape.skip_channels[2 - i];
            skip_grads[2 - i] = Some(gcat.slice(s![up_c.., .., ..]).to_owned());
            g = Upsample2x::backward(gcat.slice(s![..up_c, .., ..]));
        }
        for i in (0..self.enc.len()).rev() {
            if let Some(extra) = match i {
                1 => skip_grads[0].take(),
                2 => skip_grads[1].take(),
                3 => skip_grads[2].take(),
                _ => None,
            } {
                g += &extra;
            }
            relu_backward(&mut g, &tape.acts[i]);
            match self.enc[i].backward(&tape.convs[i], g.view(), true, i > 0) {
                Some(next) => g = next,
                None => break,
            }
        }
    }

    /// Arg-max label map.
    pub fn predict(&self, image: ArrayView3<f32>) -> Array2<u8> {
        let (logits, _) = self.forward(image);
        argmax_labels(&logits)
    }
}

pub fn argmax_labels(logits: &Array3<f32>) -> Array2<u8> {
    let (k, h, w) = logits.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0;
        for c in 1..k {
            if logits[[c, y, x]] > logits[[best, y, x]] {
                best = c;
            }
        }
        best as u8
    })
}

impl Parameterized<f32> for SegModel {
    fn params_mut(&mut self) -> Vec<&mut Param<f32>> {
        let mut v = Vec::new();
        for c in self
            .enc
            .iter_mut()
            .chain(self.dec.iter_mut())
            .chain(std::iter::once(&mut self.head))
        {
            v.push(&mut c.weight);
            v.push(&mut c.bias);
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_matches_input_size() {
        let m = SegModel::new(
            SegModelConfig {
                widths: [4, 4, 4, 4],
            },
            3,
            [0.5; 3],
            0,
        );
        for (h, w) in [(64, 64), (70, 90)] {
            let img = Array3::<f32>::from_elem((3, h, w), 0.3);
            let (logits, _) = m.forward(img.view());
            assert_eq!(logits.dim(), (3, h, w));
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        let mut m = SegModel::new(
            SegModelConfig {
                widths: [3, 4, 4, 5],
            },
            2,
            [0.5; 3],
            2,
        );
        let img = Array3::<f32>::from_shape_fn((3, 32, 32), |(c, y, x)| {
            ((c * 5 + y * 3 + x * 7) % 11) as f32 / 11.0
        });
        let weights = Array3::<f32>::from_shape_fn((2, 32, 32), |(c, y, x)| {
            ((c + y + 2 * x) % 5) as f32 - 2.0
        });
        let f = |m: &SegModel| -> f64 {
            (&m.forward(img.view()).0 * &weights)
                .iter()
                .map(|&v| v as f64)
                .sum()
        };
        m.zero_grad();
        let (_, tape) = m.forward(img.view());
        m.backward(&tape, &weights);
        let grads: Vec<Vec<f32>> = m
            .params_mut()
            .iter()
            .map(|p| p.grad.iter().cloned().collect())
            .collect();
        let eps = 1e-3f32;
        for (pi, idx) in [
            (0usize, 3usize),
            (2, 5),
            (2, 7),
            (8, 1),
            (12, 0),
            (14, 4),
            (18, 3),
            (6, 2),
        ] {
            let orig = m.params_mut()[pi].value.as_slice().unwrap()[idx];
            m.params_mut()[pi].value.as_slice_mut().unwrap()[idx] = orig + eps;
            let up = f(&m);
            m.params_mut()[pi].value.as_slice_mut().unwrap()[idx] = orig - eps;
            let down = f(&m);
            m.params_mut()[pi].value.as_slice_mut().unwrap()[idx] = orig;
            let fd = (up - down) / (2.0 * eps as f64);
            let an = grads[pi][idx] as f64;
            assert!(
                (fd - an).abs() <= 0.02 * fd.abs().max(an.abs()) + 1e-3,
                "param {pi}[{idx}]: fd {fd} vs {an}"
            );
        }
    }
}
