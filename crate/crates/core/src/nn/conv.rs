use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Ix2};
use rand::Rng;

use super::{he_normal, Param, Real};

/// Square-kernel 2-D convolution computed as im2col followed by a GEMM.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Real> {
    /// `[out_channels, in_channels * k * k]`
    pub weight: Param<T>,
    /// `[out_channels]`
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Saved activations needed by [`Conv2d::backward`].
#[derive(Debug, Clone)]
pub struct ConvCache<T: Real> {
    cols: Array2<T>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

impl<T: Real> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = he_normal::<_, T>(rng, &[out_channels, fan_in], fan_in);
        Self {
            weight: Param::new(weight),
            bias: Param::new(ndarray::Array1::<T>::zeros(out_channels)),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn weight2(&self) -> ArrayView2<'_, T> {
        self.weight
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .expect("conv weight is 2-D")
    }

    pub fn forward(&self, x: ArrayView3<T>) -> (Array3<T>, ConvCache<T>) {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let (oh, ow) = self.output_size(h, w);
        let cols = self.im2col(x, oh, ow);
        let mut out = Array2::<T>::zeros((self.out_channels, oh * ow));
        general_mat_mul(T::one(), &self.weight2(), &cols, T::zero(), &mut out);
        for (mut row, &b) in out.rows_mut().into_iter().zip(self.bias.value.iter()) {
            row.mapv_inplace(|v| v + b);
        }
        let out = out
            .into_shape_with_order((self.out_channels, oh, ow))
            .expect("contiguous");
        (
            out,
            ConvCache {
                cols,
                in_shape: (c, h, w),
                out_hw: (oh, ow),
            },
        )
    }

    /// Accumulates parameter gradients when `accumulate` is set and returns
    /// the input gradient when `want_input` is set.
    pub fn backward(
        &mut self,
        cache: &ConvCache<T>,
        grad_out: ArrayView3<T>,
        accumulate: bool,
        want_input: bool,
    ) -> Option<Array3<T>> {
        let (oh, ow) = cache.out_hw;
        let g = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_channels, oh * ow))
            .expect("contiguous");
        if accumulate {
            let mut gw = self
                .weight
                .grad
                .view_mut()
                .into_dimensionality::<Ix2>()
                .expect("conv weight is 2-D");
            general_mat_mul(T::one(), &g, &cache.cols.t(), T::one(), &mut gw);
            for (gb, row) in self.bias.grad.iter_mut().zip(g.rows()) {
                *gb += row.sum();
            }
        }
        if !want_input {
            return None;
        }
        Some(self.input_grad(cache, &g))
    }

    /// Input gradient only; usable through a shared reference.
    pub fn backward_input(&self, cache: &ConvCache<T>, grad_out: ArrayView3<T>) -> Array3<T> {
        let (oh, ow) = cache.out_hw;
        let g = grad_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((self.out_channels, oh * ow))
            .expect("contiguous");
        self.input_grad(cache, &g)
    }

    fn input_grad(&self, cache: &ConvCache<T>, g: &Array2<T>) -> Array3<T> {
        let mut gcols = Array2::<T>::zeros(cache.cols.raw_dim());
        general_mat_mul(T::one(), &self.weight2().t(), g, T::zero(), &mut gcols);
        self.col2im(&gcols, cache.in_shape, cache.out_hw)
    }

    fn im2col(&self, x: ArrayView3<T>, oh: usize, ow: usize) -> Array2<T> {
        let (c, h, w) = x.dim();
        let k = self.kernel;
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut cols = Array2::<T>::zeros((c * k * k, oh * ow));
        let cs = cols.as_slice_mut().expect("fresh array");
        let (s, p) = (self.stride as isize, self.padding as isize);
        for ci in 0..c {
            let plane = &xs[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cs[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(
        &self,
        cols: &Array2<T>,
        in_shape: (usize, usize, usize),
        out_hw: (usize, usize),
    ) -> Array3<T> {
        let (c, h, w) = in_shape;
        let (oh, ow) = out_hw;
        let k = self.kernel;
        let mut x = Array3::<T>::zeros((c, h, w));
        let xs = x.as_slice_mut().expect("fresh array");
        let cs = cols.as_slice().expect("standard layout");
        let (s, p) = (self.stride as isize, self.padding as isize);
        for ci in 0..c {
            let plane = &mut xs[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let srcrow = &cs[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy as isize * s + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        let src = &srcrow[oy * ow..(oy + 1) * ow];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = ox as isize * s + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive(conv: &Conv2d<f64>, x: &Array3<f64>) -> Array3<f64> {
        let (_, h, w) = x.dim();
        let (oh, ow) = conv.output_size(h, w);
        let k = conv.kernel;
        let wt = conv
            .weight
            .value
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        Array3::from_shape_fn((conv.out_channels, oh, ow), |(o, oy, ox)| {
            let mut acc = conv.bias.value[[o]];
            for ci in 0..conv.in_channels {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                        let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc +=
                                wt[[o, (ci * k + ky) * k + kx]] * x[[ci, iy as usize, ix as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0)] {
            let mut conv = Conv2d::<f64>::new(&mut rng, 3, 4, 3, stride, pad);
            conv.bias.value.mapv_inplace(|_| rng.random::<f64>());
            let x = Array3::from_shape_fn((3, 7, 6), |_| rng.random::<f64>() - 0.5);
            let (y, _) = conv.forward(x.view());
            let expect = naive(&conv, &x);
            assert_eq!(y.dim(), expect.dim());
            for (a, b) in y.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::<f64>::new(&mut rng, 2, 3, 3, 2, 1);
        let x = Array3::from_shape_fn((2, 5, 5), |_| rng.random::<f64>() - 0.5);
        let probe = Array3::from_shape_fn(conv.forward(x.view()).0.raw_dim(), |_| {
            rng.random::<f64>() - 0.5
        });
        let loss = |c: &Conv2d<f64>, x: &Array3<f64>| (c.forward(x.view()).0 * &probe).sum();
        let (_, cache) = conv.forward(x.view());
        let gx = conv.backward(&cache, probe.view(), true, true).unwrap();
        let h = 1e-6;
        for idx in [(0, 0, 0), (1, 2, 3), (0, 4, 4)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!(
                (fd - gx[idx]).abs() < 1e-6,
                "input grad {fd} vs {}",
                gx[idx]
            );
        }
        for j in [0usize, 7, 17] {
            let mut cp = conv.clone();
            cp.weight.value[[1, j]] += h;
            let mut cm = conv.clone();
            cm.weight.value[[1, j]] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((fd - conv.weight.grad[[1, j]]).abs() < 1e-6);
        }
    }
}
