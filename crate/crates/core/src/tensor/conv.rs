//! Convolution kernels: im2col + GEMM for dense and grouped convolutions,
//! direct loops for depthwise ones.

use super::Real;
use crate::error::{Error, Result};

/// Stride, symmetric zero padding and group count of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvGeometry {
            stride,
            padding,
            groups,
        }
    }

    /// Output extent along one spatial axis.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if self.stride == 0 {
            return Err(Error::config("convolution stride must be positive"));
        }
        if padded < kernel {
            return Err(Error::config(format!(
                "non-positive output extent: input {input} + 2*padding {} < kernel {kernel}",
                self.padding
            )));
        }
        Ok((padded - kernel) / self.stride + 1)
    }
}

/// Fully resolved convolution dimensions.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvDims {
    pub fn resolve(input: &[usize], weight: &[usize], geom: ConvGeometry) -> Result<Self> {
        let (n, cin, h, w) = match input {
            &[n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::config(format!(
                    "conv2d input must be 4-D, got {input:?}"
                )))
            }
        };
        let (cout, cin_g, kh, kw) = match weight {
            &[a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::config(format!(
                    "conv2d weight must be (Cout, Cin/g, k, k), got {weight:?}"
                )))
            }
        };
        if kh != kw {
            return Err(Error::config(format!("kernel must be square, got {kh}x{kw}")));
        }
        let g = geom.groups;
        if g == 0 || cin % g != 0 {
            return Err(Error::config(format!(
                "input channels {cin} not divisible by groups {g}"
            )));
        }
        if cout % g != 0 {
            return Err(Error::config(format!(
                "output channels {cout} not divisible by groups {g}"
            )));
        }
        if cin / g != cin_g {
            return Err(Error::config(format!(
                "weight expects {cin_g} input channels per group, input provides {} (C={cin}, groups={g})",
                cin / g
            )));
        }
        let hout = geom.output_extent(h, kh)?;
        let wout = geom.output_extent(w, kw)?;
        Ok(ConvDims {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            stride: geom.stride,
            pad: geom.padding,
            groups: g,
            hout,
            wout,
        })
    }

    fn depthwise(&self) -> bool {
        self.groups == self.cin && self.cout == self.cin && self.groups > 1
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    // valid output range along one axis for kernel tap `tap`
    fn out_range(&self, tap: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = tap as isize - self.pad as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= extent - 1
        let hi_num = extent as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(out as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }
}

fn im2col<T: Real>(d: &ConvDims, x: &[T], cin_g: usize, col: &mut [T]) {
    let hw_out = d.hout * d.wout;
    for c in 0..cin_g {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            let (oh_lo, oh_hi) = d.out_range(ki, d.h, d.hout);
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                dst.iter_mut().for_each(|v| *v = T::zero());
                let (ow_lo, ow_hi) = d.out_range(kj, d.w, d.wout);
                for oh in oh_lo..oh_hi {
                    let ih = oh * d.stride + ki - d.pad;
                    let src_row = &plane[ih * d.w..(ih + 1) * d.w];
                    let dst_row = &mut dst[oh * d.wout..(oh + 1) * d.wout];
                    for ow in ow_lo..ow_hi {
                        dst_row[ow] = src_row[ow * d.stride + kj - d.pad];
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(d: &ConvDims, col: &[T], cin_g: usize, gx: &mut [T]) {
    let hw_out = d.hout * d.wout;
    for c in 0..cin_g {
        let plane = &mut gx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.k {
            let (oh_lo, oh_hi) = d.out_range(ki, d.h, d.hout);
            for kj in 0..d.k {
                let row = (c * d.k + ki) * d.k + kj;
                let src = &col[row * hw_out..(row + 1) * hw_out];
                let (ow_lo, ow_hi) = d.out_range(kj, d.w, d.wout);
                for oh in oh_lo..oh_hi {
                    let ih = oh * d.stride + ki - d.pad;
                    let src_row = &src[oh * d.wout..(oh + 1) * d.wout];
                    let dst_row = &mut plane[ih * d.w..(ih + 1) * d.w];
                    for ow in ow_lo..ow_hi {
                        dst_row[ow * d.stride + kj - d.pad] += src_row[ow];
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Real>(
    d: &ConvDims,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let hw_out = d.hout * d.wout;
    if d.depthwise() {
        depthwise_forward(d, x, weight, out);
    } else {
        let cin_g = d.cin / d.groups;
        let cout_g = d.cout / d.groups;
        let kk = cin_g * d.k * d.k;
        let mut col = if d.pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); kk * hw_out]
        };
        for n in 0..d.n {
            for g in 0..d.groups {
                let xs = &x[(n * d.cin + g * cin_g) * d.h * d.w..][..cin_g * d.h * d.w];
                let cols: &[T] = if d.pointwise() {
                    xs
                } else {
                    im2col(d, xs, cin_g, &mut col);
                    &col
                };
                let wg = &weight[g * cout_g * kk..(g + 1) * cout_g * kk];
                let og = &mut out[(n * d.cout + g * cout_g) * hw_out..][..cout_g * hw_out];
                T::gemm(false, false, cout_g, hw_out, kk, T::one(), wg, cols, T::zero(), og);
            }
        }
    }
    if let Some(b) = bias {
        for n in 0..d.n {
            for (c, &bc) in b.iter().enumerate() {
                out[(n * d.cout + c) * hw_out..][..hw_out]
                    .iter_mut()
                    .for_each(|v| *v += bc);
            }
        }
    }
}

/// Accumulates input, weight and bias gradients for upstream gradient `gy`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    d: &ConvDims,
    x: &[T],
    weight: &[T],
    gy: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
    gb: Option<&mut [T]>,
) {
    let hw_out = d.hout * d.wout;
    if let Some(gb) = gb {
        for n in 0..d.n {
            for (c, gbc) in gb.iter_mut().enumerate() {
                *gbc += gy[(n * d.cout + c) * hw_out..][..hw_out].iter().copied().sum::<T>();
            }
        }
    }
    if gx.is_none() && gw.is_none() {
        return;
    }
    if d.depthwise() {
        depthwise_backward(d, x, weight, gy, gx, gw);
        return;
    }
    let cin_g = d.cin / d.groups;
    let cout_g = d.cout / d.groups;
    let kk = cin_g * d.k * d.k;
    let pointwise = d.pointwise();
    let mut col = if pointwise {
        Vec::new()
    } else {
        vec![T::zero(); kk * hw_out]
    };
    let mut gcol = vec![T::zero(); if pointwise { 0 } else { kk * hw_out }];
    for n in 0..d.n {
        for g in 0..d.groups {
            let x_off = (n * d.cin + g * cin_g) * d.h * d.w;
            let xs = &x[x_off..][..cin_g * d.h * d.w];
            let gyg = &gy[(n * d.cout + g * cout_g) * hw_out..][..cout_g * hw_out];
            let wg = &weight[g * cout_g * kk..(g + 1) * cout_g * kk];
            if let Some(gw) = gw.as_deref_mut() {
                let cols: &[T] = if pointwise {
                    xs
                } else {
                    im2col(d, xs, cin_g, &mut col);
                    &col
                };
                let gwg = &mut gw[g * cout_g * kk..(g + 1) * cout_g * kk];
                // dW (cout_g x kk) += dY (cout_g x hw) * col^T (hw x kk)
                T::gemm(false, true, cout_g, kk, hw_out, T::one(), gyg, cols, T::one(), gwg);
            }
            if let Some(gx) = gx.as_deref_mut() {
                let gxs = &mut gx[x_off..][..cin_g * d.h * d.w];
                if pointwise {
                    // dX (kk x hw) += W^T (kk x cout_g) * dY (cout_g x hw)
                    T::gemm(true, false, kk, hw_out, cout_g, T::one(), wg, gyg, T::one(), gxs);
                } else {
                    T::gemm(true, false, kk, hw_out, cout_g, T::one(), wg, gyg, T::zero(), &mut gcol);
                    col2im(d, &gcol, cin_g, gxs);
                }
            }
        }
    }
}

fn depthwise_forward<T: Real>(d: &ConvDims, x: &[T], weight: &[T], out: &mut [T]) {
    let hw_out = d.hout * d.wout;
    for n in 0..d.n {
        for c in 0..d.cin {
            let plane = &x[(n * d.cin + c) * d.h * d.w..][..d.h * d.w];
            let o = &mut out[(n * d.cout + c) * hw_out..][..hw_out];
            o.iter_mut().for_each(|v| *v = T::zero());
            let wc = &weight[c * d.k * d.k..(c + 1) * d.k * d.k];
            for ki in 0..d.k {
                let (oh_lo, oh_hi) = d.out_range(ki, d.h, d.hout);
                for kj in 0..d.k {
                    let wv = wc[ki * d.k + kj];
                    let (ow_lo, ow_hi) = d.out_range(kj, d.w, d.wout);
                    for oh in oh_lo..oh_hi {
                        let ih = oh * d.stride + ki - d.pad;
                        let src = &plane[ih * d.w..(ih + 1) * d.w];
                        let dst = &mut o[oh * d.wout..(oh + 1) * d.wout];
                        for ow in ow_lo..ow_hi {
                            dst[ow] += wv * src[ow * d.stride + kj - d.pad];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Real>(
    d: &ConvDims,
    x: &[T],
    weight: &[T],
    gy: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let hw_out = d.hout * d.wout;
    for n in 0..d.n {
        for c in 0..d.cin {
            let base = (n * d.cin + c) * d.h * d.w;
            let plane = &x[base..][..d.h * d.w];
            let g = &gy[(n * d.cout + c) * hw_out..][..hw_out];
            for ki in 0..d.k {
                let (oh_lo, oh_hi) = d.out_range(ki, d.h, d.hout);
                for kj in 0..d.k {
                    let widx = (c * d.k + ki) * d.k + kj;
                    let wv = weight[widx];
                    let (ow_lo, ow_hi) = d.out_range(kj, d.w, d.wout);
                    let mut acc = T::zero();
                    for oh in oh_lo..oh_hi {
                        let ih = oh * d.stride + ki - d.pad;
                        let grow = &g[oh * d.wout..(oh + 1) * d.wout];
                        if gw.is_some() {
                            let src = &plane[ih * d.w..(ih + 1) * d.w];
                            for ow in ow_lo..ow_hi {
                                acc += grow[ow] * src[ow * d.stride + kj - d.pad];
                            }
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            let dst = &mut gx[base + ih * d.w..base + (ih + 1) * d.w];
                            for ow in ow_lo..ow_hi {
                                dst[ow * d.stride + kj - d.pad] += wv * grow[ow];
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
}
