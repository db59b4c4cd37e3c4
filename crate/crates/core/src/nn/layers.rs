//! Layer primitives with explicit forward caches and hand-written backward passes.

use rand::Rng;

use super::scalar::{gemm, Scalar};
use super::tensor::{join, Param, ParamVisitor, ParamVisitorMut, Tensor};

fn out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// 2-D convolution over NCHW input, evaluated as im2col followed by GEMM.
#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    pub weight: Param<F>,
    pub bias: Option<Param<F>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        // He-uniform for ReLU networks.
        let bound = (6.0 / fan_in).sqrt();
        let weight = Tensor::uniform(&[out_channels, in_channels, kernel, kernel], bound, rng);
        Conv2d {
            weight: Param::weight(weight),
            bias: bias.then(|| Param::weight(Tensor::zeros(&[out_channels]))),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            out_size(h, self.kernel, self.stride, self.pad),
            out_size(w, self.kernel, self.stride, self.pad),
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[F], h: usize, w: usize, oh: usize, ow: usize, col: &mut [F]) {
        let k = self.kernel;
        let (stride, pad) = (self.stride as isize, self.pad as isize);
        let plane = oh * ow;
        for c in 0..self.in_channels {
            let xc = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let iy = oy as isize * stride - pad + ky as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.fill(F::ZERO);
                            continue;
                        }
                        let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize * stride - pad + kx as isize;
                            *v = if ix < 0 || ix >= w as isize {
                                F::ZERO
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[F], h: usize, w: usize, oh: usize, ow: usize, dx: &mut [F]) {
        let k = self.kernel;
        let (stride, pad) = (self.stride as isize, self.pad as isize);
        let plane = oh * ow;
        for c in 0..self.in_channels {
            let dxc = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * plane..(row + 1) * plane];
                    for oy in 0..oh {
                        let iy = oy as isize * stride - pad + ky as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut dxc[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = ox as isize * stride - pad + kx as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Tensor<F> {
        let s = x.shape();
        let (n, h, w) = (s[0], s[2], s[3]);
        assert_eq!(s[1], self.in_channels, "conv input channels");
        let (oh, ow) = self.output_hw(h, w);
        let ckk = self.in_channels * self.kernel * self.kernel;
        let plane = oh * ow;
        let mut out = Tensor::zeros(&[n, self.out_channels, oh, ow]);
        let mut col = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![F::ZERO; ckk * plane]
        };
        for i in 0..n {
            let xi = x.row(i);
            let cols: &[F] = if self.is_pointwise() {
                xi
            } else {
                self.im2col(xi, h, w, oh, ow, &mut col);
                &col
            };
            let yi = out.row_mut(i);
            gemm(
                self.out_channels,
                ckk,
                plane,
                self.weight.value.data(),
                false,
                cols,
                false,
                yi,
                false,
            );
            if let Some(b) = &self.bias {
                for (c, &bv) in b.value.data().iter().enumerate() {
                    yi[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients and returns the input gradient when requested.
    pub fn backward(&mut self, x: &Tensor<F>, dy: &Tensor<F>, need_dx: bool) -> Option<Tensor<F>> {
        let s = x.shape();
        let (n, h, w) = (s[0], s[2], s[3]);
        let (oh, ow) = self.output_hw(h, w);
        let ckk = self.in_channels * self.kernel * self.kernel;
        let plane = oh * ow;
        let mut dx = need_dx.then(|| Tensor::zeros(s));
        let mut col = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![F::ZERO; ckk * plane]
        };
        let mut dcol = vec![F::ZERO; if need_dx { ckk * plane } else { 0 }];
        for i in 0..n {
            let dyi = dy.row(i);
            let xi = x.row(i);
            let cols: &[F] = if self.is_pointwise() {
                xi
            } else {
                self.im2col(xi, h, w, oh, ow, &mut col);
                &col
            };
            // dW (co × ckk) += dy_i (co × P) · cols^T (P × ckk)
            gemm(
                self.out_channels,
                plane,
                ckk,
                dyi,
                false,
                cols,
                true,
                self.weight.grad.data_mut(),
                true,
            );
            if let Some(b) = &mut self.bias {
                for (c, g) in b.grad.data_mut().iter_mut().enumerate() {
                    let mut acc = F::ZERO;
                    for &v in &dyi[c * plane..(c + 1) * plane] {
                        acc += v;
                    }
                    *g += acc;
                }
            }
            if let Some(dx) = dx.as_mut() {
                let dxi = dx.row_mut(i);
                if self.is_pointwise() {
                    gemm(ckk, self.out_channels, plane, self.weight.value.data(), true, dyi, false, dxi, false);
                } else {
                    gemm(ckk, self.out_channels, plane, self.weight.value.data(), true, dyi, false, &mut dcol, false);
                    self.col2im(&dcol, h, w, oh, ow, dxi);
                }
            }
        }
        dx
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, F>) {
        f(&join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, F>) {
        f(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b);
        }
    }
}

/// Per-channel batch normalization over NCHW input.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Param<F>,
    pub running_var: Param<F>,
    pub eps: f64,
    pub momentum: f64,
}

pub struct BatchNormCache<F> {
    xhat: Tensor<F>,
    inv_std: Vec<f64>,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::weight(Tensor::filled(&[channels], F::ONE)),
            beta: Param::weight(Tensor::zeros(&[channels])),
            running_mean: Param::buffer(Tensor::zeros(&[channels])),
            running_var: Param::buffer(Tensor::filled(&[channels], F::ONE)),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    pub fn forward_eval(&self, x: &Tensor<F>) -> Tensor<F> {
        let s = x.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let mut y = x.clone();
        for ch in 0..c {
            let mean = self.running_mean.value.data()[ch].to_f64();
            let var = self.running_var.value.data()[ch].to_f64();
            let scale = self.gamma.value.data()[ch].to_f64() / (var + self.eps).sqrt();
            let shift = self.beta.value.data()[ch].to_f64() - mean * scale;
            let (scale, shift) = (F::from_f64(scale), F::from_f64(shift));
            for i in 0..n {
                let off = (i * c + ch) * plane;
                y.data_mut()[off..off + plane]
                    .iter_mut()
                    .for_each(|v| *v = *v * scale + shift);
            }
        }
        y
    }

    /// Normalizes with batch statistics and updates the running estimates.
    pub fn forward_train(&mut self, x: &Tensor<F>) -> (Tensor<F>, BatchNormCache<F>) {
        let s = x.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let count = (n * plane) as f64;
        let mut xhat = Tensor::zeros(s);
        let mut y = Tensor::zeros(s);
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                sum += x.data()[off..off + plane].iter().map(|v| v.to_f64()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                sq += x.data()[off..off + plane]
                    .iter()
                    .map(|v| (v.to_f64() - mean).powi(2))
                    .sum::<f64>();
            }
            let var = sq / count;
            let istd = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = istd;
            let g = self.gamma.value.data()[ch].to_f64();
            let b = self.beta.value.data()[ch].to_f64();
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for p in off..off + plane {
                    let xh = (x.data()[p].to_f64() - mean) * istd;
                    xhat.data_mut()[p] = F::from_f64(xh);
                    y.data_mut()[p] = F::from_f64(g * xh + b);
                }
            }
            let unbiased = if count > 1.0 { sq / (count - 1.0) } else { var };
            let m = self.momentum;
            let rm = &mut self.running_mean.value.data_mut()[ch];
            *rm = F::from_f64((1.0 - m) * rm.to_f64() + m * mean);
            let rv = &mut self.running_var.value.data_mut()[ch];
            *rv = F::from_f64((1.0 - m) * rv.to_f64() + m * unbiased);
        }
        (y, BatchNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &BatchNormCache<F>, dy: &Tensor<F>) -> Tensor<F> {
        let s = dy.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let count = (n * plane) as f64;
        let mut dx = Tensor::zeros(s);
        for ch in 0..c {
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for p in off..off + plane {
                    let d = dy.data()[p].to_f64();
                    sum_dy += d;
                    sum_dy_xhat += d * cache.xhat.data()[p].to_f64();
                }
            }
            self.gamma.grad.data_mut()[ch] += F::from_f64(sum_dy_xhat);
            self.beta.grad.data_mut()[ch] += F::from_f64(sum_dy);
            let g = self.gamma.value.data()[ch].to_f64();
            let k = g * cache.inv_std[ch] / count;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for p in off..off + plane {
                    let d = dy.data()[p].to_f64();
                    let xh = cache.xhat.data()[p].to_f64();
                    dx.data_mut()[p] = F::from_f64(k * (count * d - sum_dy - xh * sum_dy_xhat));
                }
            }
        }
        debug_assert_eq!(c, self.channels());
        dx
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, F>) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut<'_, F>) {
        f(&join(prefix, "weight"), &mut self.gamma);
        f(&join(prefix, "bias"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

pub fn relu<F: Scalar>(mut x: Tensor<F>) -> Tensor<F> {
    x.data_mut().iter_mut().for_each(|v| {
        if !(*v > F::ZERO) {
            *v = F::ZERO
        }
    });
    x
}

/// Gradient through ReLU given its output.
pub fn relu_backward<F: Scalar>(y: &Tensor<F>, mut dy: Tensor<F>) -> Tensor<F> {
    for (d, &v) in dy.data_mut().iter_mut().zip(y.data()) {
        if !(v > F::ZERO) {
            *d = F::ZERO;
        }
    }
    dy
}

#[derive(Clone, Copy, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct MaxPoolCache {
    input_shape: Vec<usize>,
    argmax: Vec<u32>,
}

impl MaxPool2d {
    pub fn forward<F: Scalar>(&self, x: &Tensor<F>) -> (Tensor<F>, MaxPoolCache) {
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let oh = out_size(h, self.kernel, self.stride, self.pad);
        let ow = out_size(w, self.kernel, self.stride, self.pad);
        let mut y = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        for nc in 0..n * c {
            let xs = &x.data()[nc * h * w..(nc + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = None::<(F, usize)>;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            let v = xs[idx];
                            if best.map_or(true, |(b, _)| v > b) {
                                best = Some((v, idx));
                            }
                        }
                    }
                    let (v, idx) = best.expect("pool window covers at least one input");
                    let o = (nc * oh + oy) * ow + ox;
                    y.data_mut()[o] = v;
                    argmax[o] = idx as u32;
                }
            }
        }
        (
            y,
            MaxPoolCache {
                input_shape: s.to_vec(),
                argmax,
            },
        )
    }

    pub fn backward<F: Scalar>(&self, cache: &MaxPoolCache, dy: &Tensor<F>) -> Tensor<F> {
        let s = &cache.input_shape;
        let plane_in = s[2] * s[3];
        let plane_out = dy.shape()[2] * dy.shape()[3];
        let mut dx = Tensor::zeros(s);
        for nc in 0..s[0] * s[1] {
            for o in 0..plane_out {
                let g = dy.data()[nc * plane_out + o];
                let idx = cache.argmax[nc * plane_out + o] as usize;
                dx.data_mut()[nc * plane_in + idx] += g;
            }
        }
        dx
    }
}

/// NCHW → NC by averaging each channel plane.
pub fn global_avg_pool<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let s = x.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let inv = F::from_f64(1.0 / plane as f64);
    let mut y = Tensor::zeros(&[n, c]);
    for i in 0..n * c {
        let mut acc = F::ZERO;
        for &v in &x.data()[i * plane..(i + 1) * plane] {
            acc += v;
        }
        y.data_mut()[i] = acc * inv;
    }
    y
}

pub fn global_avg_pool_backward<F: Scalar>(input_shape: &[usize], dy: &Tensor<F>) -> Tensor<F> {
    let plane = input_shape[2] * input_shape[3];
    let inv = F::from_f64(1.0 / plane as f64);
    let mut dx = Tensor::zeros(input_shape);
    for (i, &g) in dy.data().iter().enumerate() {
        dx.data_mut()[i * plane..(i + 1) * plane].fill(g * inv);
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let s = x.shape();
        let (n, h, w) = (s[0], s[2], s[3]);
        let (oh, ow) = conv.output_hw(h, w);
        let k = conv.kernel;
        let mut y = Tensor::zeros(&[n, conv.out_channels, oh, ow]);
        for i in 0..n {
            for co in 0..conv.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.value.data()[co]);
                        for ci in 0..conv.in_channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * conv.stride + ky) as isize - conv.pad as isize;
                                    let ix = (ox * conv.stride + kx) as isize - conv.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((i * conv.in_channels + ci) * h + iy as usize) * w + ix as usize];
                                    let wv = conv.weight.value.data()[((co * conv.in_channels + ci) * k + ky) * k + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        y.data_mut()[((i * conv.out_channels + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 2, 0), (1, 1, 0), (7, 2, 3)] {
            let mut conv = Conv2d::<f64>::new(2, 3, k, stride, pad, true, &mut rng);
            if let Some(b) = &mut conv.bias {
                b.value = Tensor::uniform(&[3], 0.5, &mut rng);
            }
            let x = Tensor::uniform(&[2, 2, 9, 8], 1.0, &mut rng);
            let fast = conv.forward(&x);
            let slow = naive_conv(&conv, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={pad}");
            }
        }
    }

    /// Central-difference check of d(sum(y * r))/dθ for conv weights and inputs.
    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut conv = Conv2d::<f64>::new(2, 3, 3, 2, 1, true, &mut rng);
        let x = Tensor::uniform(&[2, 2, 7, 6], 1.0, &mut rng);
        let y = conv.forward(&x);
        let r: Tensor<f64> = Tensor::uniform(y.shape(), 1.0, &mut rng);
        let objective = |c: &Conv2d<f64>, x: &Tensor<f64>| -> f64 {
            c.forward(x).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let dx = conv.backward(&x, &r, true).unwrap();
        let h = 1e-6;
        for idx in [0usize, 5, 17, 40, 53] {
            let mut c2 = conv.clone();
            c2.weight.value.data_mut()[idx] += h;
            let up = objective(&c2, &x);
            c2.weight.value.data_mut()[idx] -= 2.0 * h;
            let down = objective(&c2, &x);
            let fd = (up - down) / (2.0 * h);
            assert!((fd - conv.weight.grad.data()[idx]).abs() < 1e-6);
        }
        for idx in [0usize, 9, 33, 70, 83] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let up = objective(&conv, &xp);
            xp.data_mut()[idx] -= 2.0 * h;
            let down = objective(&conv, &xp);
            assert!(((up - down) / (2.0 * h) - dx.data()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.gamma.value = Tensor::uniform(&[2], 1.0, &mut rng);
        let x = Tensor::uniform(&[3, 2, 2, 2], 1.0, &mut rng);
        let r: Tensor<f64> = Tensor::uniform(&[3, 2, 2, 2], 1.0, &mut rng);
        let objective = |x: &Tensor<f64>| -> f64 {
            let mut b = bn.clone();
            let (y, _) = b.forward_train(x);
            y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let mut work = bn.clone();
        let (_, cache) = work.forward_train(&x);
        let dx = work.backward(&cache, &r);
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let up = objective(&xp);
            xp.data_mut()[idx] -= 2.0 * h;
            let down = objective(&xp);
            assert!(((up - down) / (2.0 * h) - dx.data()[idx]).abs() < 1e-6);
        }
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let pool = MaxPool2d { kernel: 2, stride: 2, pad: 0 };
        let (y, cache) = pool.forward(&x);
        assert_eq!(y.data(), &[4.0]);
        let dx = pool.backward(&cache, &Tensor::from_vec(&[1, 1, 1, 1], vec![1.5]).unwrap());
        assert_eq!(dx.data(), &[0.0, 1.5, 0.0, 0.0]);
    }
}
