//! Dense and 3×3 convolution layers with hand-written backward passes.
//!
//! Feature maps are stored channels-last: an `[n·h·w, c]` matrix whose rows
//! are pixels in `(image, y, x)` order. Convolution runs as im2col followed by
//! a matrix product.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;

use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Array2<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    /// Per-image mean over spatial positions: `[n, c]`.
    pub fn global_average(&self) -> Array2<T> {
        let c = self.channels();
        let hw = self.h * self.w;
        let mut out = Array2::zeros((self.n, c));
        let inv = T::of(1.0 / hw as f64);
        for (b, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            let block = self.data.slice(ndarray::s![b * hw..(b + 1) * hw, ..]);
            row.assign(&block.sum_axis(Axis(0)));
            row.mapv_inplace(|v| v * inv);
        }
        out
    }

    /// Backward of [`Self::global_average`] for a map of this shape.
    pub fn global_average_backward(&self, dpooled: ArrayView2<T>) -> Array2<T> {
        let hw = self.h * self.w;
        let inv = T::of(1.0 / hw as f64);
        let mut out = Array2::zeros(self.data.raw_dim());
        for (r, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
            row.assign(&dpooled.row(r / hw));
            row.mapv_inplace(|v| v * inv);
        }
        out
    }
}

pub(crate) fn uniform_init<T: Real>(rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> Array2<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || T::of(rng.random_range(-bound..bound)))
}

pub(crate) fn relu_inplace<T: Real>(a: &mut Array2<T>) {
    a.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// Zeroes `grad` wherever the post-activation value is not positive.
pub(crate) fn relu_backward<T: Real>(grad: &mut Array2<T>, activated: &Array2<T>) {
    ndarray::Zip::from(grad).and(activated).for_each(|g, &a| {
        if a <= T::zero() {
            *g = T::zero();
        }
    });
}

/// Variance floor of [`ChannelNorm`].
pub const CHANNEL_NORM_EPSILON: f64 = 1e-5;

/// Layer normalization across the channels of each pixel, with a learned
/// per-channel gain and shift. Statistics never mix samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelNorm<T> {
    /// `[1, c]`, initialized to one.
    pub gain: Array2<T>,
    /// `[1, c]`, initialized to zero.
    pub shift: Array2<T>,
}

impl<T: Real> ChannelNorm<T> {
    pub fn new(c: usize) -> Self {
        Self { gain: Array2::ones((1, c)), shift: Array2::zeros((1, c)) }
    }

    /// Normalizes `x` in place; returns the normalized pre-affine values and
    /// the per-row inverse standard deviations.
    fn forward(&self, x: &mut Array2<T>) -> (Array2<T>, Vec<T>) {
        let c = x.ncols();
        let inv_c = T::of(1.0 / c as f64);
        let eps = T::of(CHANNEL_NORM_EPSILON);
        let mut inv_std = Vec::with_capacity(x.nrows());
        let data = x.as_slice_mut().expect("layer outputs are contiguous");
        for row in data.chunks_exact_mut(c) {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_c;
            let mut var = T::zero();
            for v in row.iter_mut() {
                *v -= mean;
                var += *v * *v;
            }
            let inv = T::one() / (var * inv_c + eps).sqrt();
            row.iter_mut().for_each(|v| *v *= inv);
            inv_std.push(inv);
        }
        let xhat = x.clone();
        let (gain, shift) = (self.gain.as_slice().expect("[1, c]"), self.shift.as_slice().expect("[1, c]"));
        for row in x.as_slice_mut().expect("layer outputs are contiguous").chunks_exact_mut(c) {
            for ((v, &g), &b) in row.iter_mut().zip(gain).zip(shift) {
                *v = *v * g + b;
            }
        }
        (xhat, inv_std)
    }

    /// Returns `(d_gain, d_shift, d_input)`.
    fn backward(&self, xhat: &Array2<T>, inv_std: &[T], dy: &Array2<T>) -> (Array2<T>, Array2<T>, Array2<T>) {
        let c = dy.ncols();
        let inv_c = T::of(1.0 / c as f64);
        let gain = self.gain.as_slice().expect("[1, c]");
        let mut dgain = Array2::zeros((1, c));
        let mut dshift = Array2::zeros((1, c));
        let mut dx = Array2::zeros(dy.raw_dim());
        {
            let (dg, ds) = (dgain.as_slice_mut().expect("fresh"), dshift.as_slice_mut().expect("fresh"));
            let rows = dy
                .as_slice()
                .expect("contiguous")
                .chunks_exact(c)
                .zip(xhat.as_slice().expect("contiguous").chunks_exact(c))
                .zip(dx.as_slice_mut().expect("fresh").chunks_exact_mut(c))
                .zip(inv_std);
            for (((dyr, xr), dxr), &inv) in rows {
                let (mut sum_g, mut sum_gx) = (T::zero(), T::zero());
                for k in 0..c {
                    dg[k] += dyr[k] * xr[k];
                    ds[k] += dyr[k];
                    let g = dyr[k] * gain[k];
                    dxr[k] = g;
                    sum_g += g;
                    sum_gx += g * xr[k];
                }
                let (mean_g, mean_gx) = (sum_g * inv_c, sum_gx * inv_c);
                for k in 0..c {
                    dxr[k] = (dxr[k] - mean_g - xr[k] * mean_gx) * inv;
                }
            }
        }
        (dgain, dshift, dx)
    }
}

/// 3×3 convolution, padding 1, optionally followed by [`ChannelNorm`], then
/// ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3<T> {
    /// `[9·c_in, c_out]`, rows ordered `(ky, kx, c_in)`.
    pub weight: Array2<T>,
    /// `[1, c_out]`.
    pub bias: Array2<T>,
    pub norm: Option<ChannelNorm<T>>,
    pub stride: usize,
}

pub(crate) struct ConvCache<T> {
    col: Array2<T>,
    in_shape: (usize, usize, usize, usize),
    norm: Option<(Array2<T>, Vec<T>)>,
    out: FeatureMap<T>,
}

impl<T> ConvCache<T> {
    pub(crate) fn output(&self) -> &FeatureMap<T> {
        &self.out
    }
}

fn out_extent(size: usize, stride: usize) -> usize {
    (size - 1) / stride + 1
}

impl<T: Real> Conv3x3<T> {
    pub fn new(c_in: usize, c_out: usize, stride: usize, norm: bool, rng: &mut impl Rng) -> Self {
        Self {
            weight: uniform_init(9 * c_in, c_out, 9 * c_in, rng),
            bias: Array2::zeros((1, c_out)),
            norm: norm.then(|| ChannelNorm::new(c_out)),
            stride,
        }
    }

    /// Parameters in gradient order: weight, bias, then norm gain and shift.
    pub fn params(&self) -> Vec<(&'static str, &Array2<T>)> {
        let mut out = vec![("weight", &self.weight), ("bias", &self.bias)];
        if let Some(n) = &self.norm {
            out.push(("norm_gain", &n.gain));
            out.push(("norm_shift", &n.shift));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<T>> {
        let mut out = vec![&mut self.weight, &mut self.bias];
        if let Some(n) = &mut self.norm {
            out.push(&mut n.gain);
            out.push(&mut n.shift);
        }
        out
    }

    pub fn in_channels(&self) -> usize {
        self.weight.nrows() / 9
    }

    pub fn out_channels(&self) -> usize {
        self.weight.ncols()
    }

    fn im2col(&self, x: &FeatureMap<T>) -> (Array2<T>, usize, usize) {
        let c = x.channels();
        let (ho, wo) = (out_extent(x.h, self.stride), out_extent(x.w, self.stride));
        let mut col = Array2::zeros((x.n * ho * wo, 9 * c));
        let src = x.data.as_slice().expect("feature maps are contiguous");
        let dst = col.as_slice_mut().expect("fresh array is contiguous");
        for b in 0..x.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (b * ho + oy) * wo + ox;
                    for ky in 0..3 {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let s = ((b * x.h + iy as usize) * x.w + ix as usize) * c;
                            let d = row * 9 * c + (ky * 3 + kx) * c;
                            dst[d..d + c].copy_from_slice(&src[s..s + c]);
                        }
                    }
                }
            }
        }
        (col, ho, wo)
    }

    fn col2im(&self, dcol: &Array2<T>, shape: (usize, usize, usize, usize)) -> Array2<T> {
        let (n, h, w, c) = shape;
        let (ho, wo) = (out_extent(h, self.stride), out_extent(w, self.stride));
        let mut dx = Array2::zeros((n * h * w, c));
        let src = dcol.as_slice().expect("matrix products are contiguous");
        let dst = dx.as_slice_mut().expect("fresh array is contiguous");
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = (b * ho + oy) * wo + ox;
                    for ky in 0..3 {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let d = ((b * h + iy as usize) * w + ix as usize) * c;
                            let s = row * 9 * c + (ky * 3 + kx) * c;
                            for (o, &g) in dst[d..d + c].iter_mut().zip(&src[s..s + c]) {
                                *o += g;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> FeatureMap<T> {
        self.forward_cached(x).out
    }

    pub(crate) fn forward_cached(&self, x: &FeatureMap<T>) -> ConvCache<T> {
        let (col, ho, wo) = self.im2col(x);
        let mut out = col.dot(&self.weight);
        out += &self.bias;
        let norm = self.norm.as_ref().map(|n| n.forward(&mut out));
        relu_inplace(&mut out);
        ConvCache {
            col,
            in_shape: (x.n, x.h, x.w, x.channels()),
            norm,
            out: FeatureMap { n: x.n, h: ho, w: wo, data: out },
        }
    }

    /// Returns the parameter gradients in [`Self::params`] order and the
    /// input gradient, which is skipped when `need_input` is false.
    pub(crate) fn backward(
        &self,
        cache: &ConvCache<T>,
        mut dout: Array2<T>,
        need_input: bool,
    ) -> (Vec<Array2<T>>, Option<Array2<T>>) {
        relu_backward(&mut dout, &cache.out.data);
        let mut norm_grads = Vec::new();
        if let (Some(n), Some((xhat, inv_std))) = (&self.norm, &cache.norm) {
            let (dgain, dshift, dpre) = n.backward(xhat, inv_std, &dout);
            norm_grads = vec![dgain, dshift];
            dout = dpre;
        }
        let dw = cache.col.t().dot(&dout);
        let db = dout.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dx = need_input.then(|| self.col2im(&dout.dot(&self.weight.t()), cache.in_shape));
        let mut grads = vec![dw, db];
        grads.extend(norm_grads);
        (grads, dx)
    }
}

/// Affine map `x W + b` on row vectors; the bias is optional.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// `[in, out]`.
    pub weight: Array2<T>,
    /// `[1, out]` when present.
    pub bias: Option<Array2<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new(d_in: usize, d_out: usize, with_bias: bool, rng: &mut impl Rng) -> Self {
        Self {
            weight: uniform_init(d_in, d_out, d_in, rng),
            bias: with_bias.then(|| Array2::zeros((1, d_out))),
        }
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    /// `(d_weight, d_bias, d_input)` for upstream gradient `dy` at input `x`.
    pub fn backward(&self, x: ArrayView2<T>, dy: ArrayView2<T>) -> (Array2<T>, Option<Array2<T>>, Array2<T>) {
        let dw = x.t().dot(&dy);
        let db = self.bias.as_ref().map(|_| dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
        (dw, db, dy.dot(&self.weight.t()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = seed::rng(3, &[]);
        let conv = Conv3x3::<f64>::new(2, 3, 2, false, &mut rng);
        let (n, h, w) = (2, 5, 4);
        let data = uniform_init::<f64>(n * h * w, 2, 1, &mut rng);
        let x = FeatureMap { n, h, w, data };
        let y = conv.forward(&x);
        assert_eq!((y.h, y.w), (3, 2));
        for b in 0..n {
            for oy in 0..y.h {
                for ox in 0..y.w {
                    for co in 0..3 {
                        let mut acc = conv.bias[[0, co]];
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let iy = (oy * 2) as i64 + ky - 1;
                                let ix = (ox * 2) as i64 + kx - 1;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                for ci in 0..2 {
                                    let xin = x.data[[(b * h + iy as usize) * w + ix as usize, ci]];
                                    acc += xin * conv.weight[[((ky * 3 + kx) as usize) * 2 + ci, co]];
                                }
                            }
                        }
                        let got = y.data[[(b * y.h + oy) * y.w + ox, co]];
                        assert!((got - acc.max(0.0)).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
