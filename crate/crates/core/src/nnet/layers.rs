//! 3x3 convolution with padding 1, forward and backward.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tensor::{Scalar, Tensor};

pub const KERNEL: usize = 3;
const PAD: isize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Layout `[out][in][ky][kx]`.
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            stride,
            weight: vec![T::zero(); out_channels * in_channels * KERNEL * KERNEL],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// He-normal weights scaled by `gain`, zero bias.
    pub fn he<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, stride: usize, gain: f64, rng: &mut R) -> Self {
        let mut c = Self::zeros(in_channels, out_channels, stride);
        let std = gain * (2.0 / (in_channels * KERNEL * KERNEL) as f64).sqrt();
        for w in &mut c.weight {
            let z: f64 = StandardNormal.sample(rng);
            *w = T::from_f64_lossy(z * std);
        }
        c
    }

    pub fn out_dim(&self, n: usize) -> usize {
        (n + 2 * PAD as usize - KERNEL) / self.stride + 1
    }

    #[inline]
    fn w_index(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> usize {
        ((oc * self.in_channels + ic) * KERNEL + ky) * KERNEL + kx
    }

    /// Output columns `ox` whose input column `ox*stride + kx - 1` lies in
    /// `[0, width)`.
    fn valid_cols(&self, kx: usize, width: usize, out_w: usize) -> (usize, usize) {
        let lo = if kx == 0 { 1 } else { 0 };
        let hi = ((width as isize - kx as isize).div_euclid(self.stride as isize) + 1).clamp(0, out_w as isize) as usize;
        (lo, hi.max(lo))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        debug_assert_eq!(x.channels, self.in_channels);
        let (h, w) = (x.height, x.width);
        let (ho, wo) = (self.out_dim(h), self.out_dim(w));
        let mut out = Tensor::zeros(self.out_channels, ho, wo);
        let s = self.stride;
        for oc in 0..self.out_channels {
            let plane = out.plane_mut(oc);
            plane.iter_mut().for_each(|v| *v = self.bias[oc]);
            for ic in 0..self.in_channels {
                let inp = x.plane(ic);
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let wv = self.weight[self.w_index(oc, ic, ky, kx)];
                        let (lo, hi) = self.valid_cols(kx, w, wo);
                        for oy in 0..ho {
                            let iy = (oy * s) as isize + ky as isize - PAD;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let in_row = &inp[iy as usize * w..(iy as usize + 1) * w];
                            let out_row = &mut plane[oy * wo..(oy + 1) * wo];
                            if s == 1 {
                                let off = kx as isize - PAD;
                                let src = &in_row[(lo as isize + off) as usize..(hi as isize + off) as usize];
                                for (o, &i) in out_row[lo..hi].iter_mut().zip(src) {
                                    *o += wv * i;
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = (ox * s + kx) as isize - PAD;
                                    out_row[ox] += wv * in_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input.
    pub fn backward(&self, x: &Tensor<T>, g_out: &Tensor<T>, grad: &mut Conv<T>) -> Tensor<T> {
        let (h, w) = (x.height, x.width);
        let (ho, wo) = (g_out.height, g_out.width);
        let s = self.stride;
        let mut g_in = Tensor::zeros(self.in_channels, h, w);
        for oc in 0..self.out_channels {
            let go = g_out.plane(oc);
            grad.bias[oc] += go.iter().copied().sum::<T>();
            for ic in 0..self.in_channels {
                let inp = x.plane(ic);
                let gi = g_in.plane_mut(ic);
                for ky in 0..KERNEL {
                    for kx in 0..KERNEL {
                        let widx = self.w_index(oc, ic, ky, kx);
                        let wv = self.weight[widx];
                        let (lo, hi) = self.valid_cols(kx, w, wo);
                        let mut gw = T::zero();
                        for oy in 0..ho {
                            let iy = (oy * s) as isize + ky as isize - PAD;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = iy as usize * w;
                            let go_row = &go[oy * wo..(oy + 1) * wo];
                            if s == 1 {
                                let off = kx as isize - PAD;
                                let a = (row as isize + lo as isize + off) as usize;
                                let b = (row as isize + hi as isize + off) as usize;
                                for (g, (&i, gin)) in go_row[lo..hi]
                                    .iter()
                                    .zip(inp[a..b].iter().zip(gi[a..b].iter_mut()))
                                {
                                    gw += *g * i;
                                    *gin += wv * *g;
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = ((ox * s + kx) as isize - PAD) as usize;
                                    gw += go_row[ox] * inp[row + ix];
                                    gi[row + ix] += wv * go_row[ox];
                                }
                            }
                        }
                        grad.weight[widx] += gw;
                    }
                }
            }
        }
        g_in
    }

    pub fn cast<U: Scalar>(&self) -> Conv<U> {
        Conv {
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            stride: self.stride,
            weight: self.weight.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }
}
