use ndarray::Array4;
use rand::Rng;
use rayon::prelude::*;

use super::gemm::{sgemm, Strides};
use super::{join, Module, Param};

/// 2-D convolution lowered to a matrix product over im2col patches.
#[derive(Clone, Debug)]
pub struct Conv2d {
    /// (out, in, k, k)
    pub weight: Param,
    pub bias: Option<Param>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    input: Option<Array4<f32>>,
}

struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    out_h: usize,
    out_w: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output columns `ox` whose tap `kx` lands inside the input row.
    #[inline]
    fn valid_range(&self, k_off: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        // ox * s + k_off - p in [0, in_len)
        let lo = p.saturating_sub(k_off).div_ceil(s);
        let hi = (in_len + p).saturating_sub(k_off).div_ceil(s).min(out_len);
        (lo, hi.max(lo))
    }

    /// Calls `f(row, out_row_start, in_row_start, ox_lo, ox_hi)` for every
    /// patch row and output row with in-bounds taps.
    #[inline]
    fn for_each_segment(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let k = self.kernel;
        for c in 0..self.channels {
            for ky in 0..k {
                let (oy_lo, oy_hi) = self.valid_range(ky, self.out_h, self.height);
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let (ox_lo, ox_hi) = self.valid_range(kx, self.out_w, self.width);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * self.stride + ky - self.padding;
                        let in_start = (c * self.height + iy) * self.width + kx;
                        // input column = ox * stride + kx - padding, offset by -padding below
                        f(row, oy * self.out_w, in_start, ox_lo, ox_hi);
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f32]) -> Vec<f32> {
        let n = self.out_len();
        let (s, p) = (self.stride, self.padding);
        let mut cols = vec![0.0; self.patch_len() * n];
        self.for_each_segment(|row, out_start, in_start, lo, hi| {
            let dst = &mut cols[row * n + out_start..];
            if s == 1 {
                let src = &x[in_start + lo - p..in_start + hi - p];
                dst[lo..hi].copy_from_slice(src);
            } else {
                for ox in lo..hi {
                    dst[ox] = x[in_start + ox * s - p];
                }
            }
        });
        cols
    }

    fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let n = self.out_len();
        let (s, p) = (self.stride, self.padding);
        self.for_each_segment(|row, out_start, in_start, lo, hi| {
            let src = &cols[row * n + out_start..];
            if s == 1 {
                let dst = &mut dx[in_start + lo - p..in_start + hi - p];
                dst.iter_mut().zip(&src[lo..hi]).for_each(|(d, v)| *d += v);
            } else {
                for ox in lo..hi {
                    dx[in_start + ox * s - p] += src[ox];
                }
            }
        });
    }
}

impl Conv2d {
    /// He-uniform weights, zero bias.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            weight: Param::he_uniform(vec![out_channels, in_channels, kernel, kernel], fan_in, rng),
            bias: bias.then(|| Param::zeros(vec![out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let o = |n: usize| (n + 2 * self.padding - self.kernel) / self.stride + 1;
        (o(h), o(w))
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        let (out_h, out_w) = self.output_size(h, w);
        Geometry {
            channels: self.in_channels,
            height: h,
            width: w,
            out_h,
            out_w,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn forward(&mut self, x: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let x = x.as_standard_layout().into_owned();
        let geo = self.geometry(h, w);
        let (oc, k_len, o_len) = (self.out_channels, geo.patch_len(), geo.out_len());
        let mut out = Array4::zeros((n, oc, geo.out_h, geo.out_w));
        let weight = &self.weight.value;
        let bias = self.bias.as_ref().map(|b| &b.value);
        out.as_slice_mut()
            .expect("standard layout")
            .par_chunks_mut(oc * o_len)
            .zip(x.as_slice().expect("standard layout").par_chunks(c * h * w))
            .for_each(|(o, xi)| {
                let owned;
                let cols: &[f32] = if geo.pointwise() {
                    xi
                } else {
                    owned = geo.im2col(xi);
                    &owned
                };
                let beta = match bias {
                    Some(b) => {
                        for (row, &bv) in o.chunks_mut(o_len).zip(b.iter()) {
                            row.fill(bv);
                        }
                        1.0
                    }
                    None => 0.0,
                };
                sgemm(
                    oc,
                    k_len,
                    o_len,
                    weight,
                    Strides::row_major(k_len),
                    cols,
                    Strides::row_major(o_len),
                    beta,
                    o,
                );
            });
        self.input = Some(x);
        out
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let x = self.input.as_ref().expect("conv backward without forward");
        let (n, c, h, w) = x.dim();
        let geo = self.geometry(h, w);
        let (oc, k_len, o_len) = (self.out_channels, geo.patch_len(), geo.out_len());
        assert_eq!(dy.dim(), (n, oc, geo.out_h, geo.out_w), "conv grad shape");
        let dy = dy.as_standard_layout();
        let weight = &self.weight.value;
        let with_bias = self.bias.is_some();

        let mut dx = Array4::zeros((n, c, h, w));
        let partials: Vec<(Vec<f32>, Vec<f32>)> = dx
            .as_slice_mut()
            .expect("standard layout")
            .par_chunks_mut(c * h * w)
            .zip(x.as_slice().expect("standard layout").par_chunks(c * h * w))
            .zip(
                dy.as_slice()
                    .expect("standard layout")
                    .par_chunks(oc * o_len),
            )
            .map(|((dxi, xi), dyi)| {
                let owned;
                let cols: &[f32] = if geo.pointwise() {
                    xi
                } else {
                    owned = geo.im2col(xi);
                    &owned
                };
                let mut dw = vec![0.0; oc * k_len];
                sgemm(
                    oc,
                    o_len,
                    k_len,
                    dyi,
                    Strides::row_major(o_len),
                    cols,
                    Strides::transposed(o_len),
                    0.0,
                    &mut dw,
                );
                let db = if with_bias {
                    dyi.chunks(o_len).map(|r| r.iter().sum()).collect()
                } else {
                    Vec::new()
                };
                if geo.pointwise() {
                    sgemm(
                        k_len,
                        oc,
                        o_len,
                        weight,
                        Strides::transposed(k_len),
                        dyi,
                        Strides::row_major(o_len),
                        0.0,
                        dxi,
                    );
                } else {
                    let mut dcols = vec![0.0; k_len * o_len];
                    sgemm(
                        k_len,
                        oc,
                        o_len,
                        weight,
                        Strides::transposed(k_len),
                        dyi,
                        Strides::row_major(o_len),
                        0.0,
                        &mut dcols,
                    );
                    geo.col2im(&dcols, dxi);
                }
                (dw, db)
            })
            .collect();

        for (dw, db) in partials {
            self.weight
                .grad
                .iter_mut()
                .zip(&dw)
                .for_each(|(g, d)| *g += d);
            if let Some(b) = self.bias.as_mut() {
                b.grad.iter_mut().zip(&db).for_each(|(g, d)| *g += d);
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = self.bias.as_mut() {
            out.push((join(prefix, "bias"), b));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn reference(conv: &Conv2d, x: &Array4<f32>) -> Array4<f32> {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = conv.output_size(h, w);
        let k = conv.kernel;
        let wt = &conv.weight.value;
        Array4::from_shape_fn((n, conv.out_channels, oh, ow), |(b, o, y, xx)| {
            let mut acc = conv.bias.as_ref().map_or(0.0, |p| p.value[o]) as f64;
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (y * conv.stride + ky) as isize - conv.padding as isize;
                        let ix = (xx * conv.stride + kx) as isize - conv.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += wt[((o * c + ci) * k + ky) * k + kx] as f64
                                * x[[b, ci, iy as usize, ix as usize]] as f64;
                        }
                    }
                }
            }
            acc as f32
        })
    }

    fn random(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Array4<f32> {
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, s, p, bias) in &[(3, 1, 1, false), (4, 2, 1, true), (1, 1, 0, true)] {
            let mut conv = Conv2d::new(3, 5, k, s, p, bias, &mut rng);
            if let Some(b) = conv.bias.as_mut() {
                b.value
                    .iter_mut()
                    .enumerate()
                    .for_each(|(i, v)| *v = i as f32 * 0.1);
            }
            let x = random((2, 3, 8, 6), &mut rng);
            let got = conv.forward(&x);
            let want = reference(&conv, &x);
            assert_eq!(got.dim(), want.dim());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-4, "k={k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(k, s, p) in &[(3, 1, 1), (4, 2, 1), (1, 1, 0)] {
            let mut conv = Conv2d::new(2, 3, k, s, p, true, &mut rng);
            let x = random((2, 2, 6, 6), &mut rng);
            let y = conv.forward(&x);
            let dy = random(y.dim(), &mut rng);
            let dx = conv.backward(&dy);
            let loss = |conv: &Conv2d, x: &Array4<f32>| -> f64 {
                reference(conv, x)
                    .iter()
                    .zip(dy.iter())
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum()
            };
            let eps = 1e-2f32;
            for idx in [[0, 0, 0, 0], [1, 1, 3, 2], [0, 1, 5, 5]] {
                let mut xp = x.clone();
                xp[idx] += eps;
                let mut xm = x.clone();
                xm[idx] -= eps;
                let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps as f64);
                assert!(
                    (fd - dx[idx] as f64).abs() < 1e-2,
                    "dx {idx:?}: {fd} vs {}",
                    dx[idx]
                );
            }
            for i in [0, conv.weight.len() / 2, conv.weight.len() - 1] {
                let g = conv.weight.grad[i] as f64;
                let orig = conv.weight.value[i];
                conv.weight.value[i] = orig + eps;
                let lp = loss(&conv, &x);
                conv.weight.value[i] = orig - eps;
                let lm = loss(&conv, &x);
                conv.weight.value[i] = orig;
                let fd = (lp - lm) / (2.0 * eps as f64);
                assert!((fd - g).abs() < 1e-2, "dw[{i}]: {fd} vs {g}");
            }
            let db: f64 = dy
                .sum_axis(ndarray::Axis(0))
                .sum_axis(ndarray::Axis(1))
                .sum_axis(ndarray::Axis(1))[0] as f64;
            assert!((conv.bias.as_ref().unwrap().grad[0] as f64 - db).abs() < 1e-3);
        }
    }
}
