//! Dilated 3D convolution kernels on `N×C×D×H×W` tensors.
//!
//! Each kernel parallelizes over independent output rows or planes. The
//! accumulation order for a single output element is fixed (input channel,
//! then kz, ky, kx ascending), so sequential and parallel runs agree bitwise.

use crate::error::{Error, Result};
use crate::exec::{self, Exec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub dilation: usize,
    pub stride: [usize; 3],
    /// Zero padding applied symmetrically on each spatial axis.
    pub pad: [usize; 3],
}

impl ConvGeometry {
    pub fn valid(kernel: [usize; 3], dilation: usize) -> Self {
        Self {
            kernel,
            dilation,
            stride: [1; 3],
            pad: [0; 3],
        }
    }

    /// Padding `dilation·(k−1)/2` per side, preserving extents at stride 1.
    pub fn same(kernel: [usize; 3], dilation: usize) -> Result<Self> {
        if kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::invalid(format!(
                "same padding needs odd kernel extents, got {kernel:?}"
            )));
        }
        Ok(Self {
            kernel,
            dilation,
            stride: [1; 3],
            pad: kernel.map(|k| dilation * (k - 1) / 2),
        })
    }

    pub fn output_extent(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        if self.dilation == 0 || self.stride.contains(&0) {
            return Err(Error::invalid("dilation and stride must be at least 1"));
        }
        let mut out = [0; 3];
        for ax in 0..3 {
            let span = self.dilation * (self.kernel[ax] - 1) + 1;
            let padded = input[ax] + 2 * self.pad[ax];
            if padded < span {
                return Err(Error::shape(format!(
                    "input extent {} on axis {ax} is smaller than the dilated kernel span {span}",
                    input[ax]
                )));
            }
            out[ax] = (padded - span) / self.stride[ax] + 1;
        }
        Ok(out)
    }
}

fn dims5(t: &Tensor, what: &str) -> Result<[usize; 5]> {
    <[usize; 5]>::try_from(t.shape())
        .map_err(|_| Error::shape(format!("{what} must be rank 5 (N×C×D×H×W), got {:?}", t.shape())))
}

/// `dst[x] += Σ_t w_t · src[x + off_t]` over indices valid in both rows.
/// Taps are applied in slice order for every element.
#[inline]
fn accum_row(dst: &mut [f64], src: &[f64], taps: &[(f64, isize)]) {
    let n = dst.len() as isize;
    let m = src.len() as isize;
    let range = |off: isize| ((-off).max(0), (m - off).min(n));
    if let [(w0, o0), (w1, o1), (w2, o2)] = *taps {
        let (a0, b0) = range(o0);
        let (a1, b1) = range(o1);
        let (a2, b2) = range(o2);
        let lo = a0.max(a1).max(a2);
        let hi = b0.min(b1).min(b2);
        if lo < hi {
            // left edge, tap order preserved per element
            for x in a0.min(a1).min(a2)..lo {
                for &(w, o, a, b) in &[(w0, o0, a0, b0), (w1, o1, a1, b1), (w2, o2, a2, b2)] {
                    if x >= a && x < b {
                        dst[x as usize] += w * src[(x + o) as usize];
                    }
                }
            }
            let len = (hi - lo) as usize;
            let d = &mut dst[lo as usize..hi as usize];
            let s0 = &src[(lo + o0) as usize..][..len];
            let s1 = &src[(lo + o1) as usize..][..len];
            let s2 = &src[(lo + o2) as usize..][..len];
            for i in 0..len {
                d[i] = d[i] + w0 * s0[i] + w1 * s1[i] + w2 * s2[i];
            }
            for x in hi..b0.max(b1).max(b2) {
                for &(w, o, a, b) in &[(w0, o0, a0, b0), (w1, o1, a1, b1), (w2, o2, a2, b2)] {
                    if x >= a && x < b {
                        dst[x as usize] += w * src[(x + o) as usize];
                    }
                }
            }
            return;
        }
    }
    // Generic path: element-major so each element sees taps in order.
    let bounds: Vec<(isize, isize)> = taps.iter().map(|&(_, o)| range(o)).collect();
    for x in 0..n {
        let mut acc = dst[x as usize];
        for (&(w, o), &(a, b)) in taps.iter().zip(&bounds) {
            if x >= a && x < b {
                acc += w * src[(x + o) as usize];
            }
        }
        dst[x as usize] = acc;
    }
}

#[inline]
fn tap_index(o: usize, stride: usize, pad: usize, k: usize, r: usize, extent: usize) -> Option<usize> {
    let i = (o * stride + k * r) as isize - pad as isize;
    (i >= 0 && (i as usize) < extent).then_some(i as usize)
}

/// Forward dilated convolution. `weight` is `Cout×Cin×kd×kh×kw`; the bias is
/// added after the full weighted sum.
pub fn forward(exec: Exec, input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, geom: &ConvGeometry) -> Result<Tensor> {
    let [n, ci, d, h, w] = dims5(input, "conv input")?;
    let [co, wci, kd, kh, kw] = dims5(weight, "conv kernel")?;
    if wci != ci {
        return Err(Error::shape(format!(
            "kernel expects {wci} input channels, input has {ci}"
        )));
    }
    if [kd, kh, kw] != geom.kernel {
        return Err(Error::shape(format!(
            "kernel extents {:?} do not match geometry {:?}",
            [kd, kh, kw],
            geom.kernel
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(Error::shape(format!("bias shape {:?}, expected [{co}]", b.shape())));
        }
    }
    let [od, oh, ow] = geom.output_extent([d, h, w])?;
    let mut out = Tensor::zeros(&[n, co, od, oh, ow])?;
    let r = geom.dilation;
    let [sz, sy, sx] = geom.stride;
    let [pz, py, px] = geom.pad;
    let x_in = input.data();
    let k = weight.data();
    let bias = bias.map(|b| b.data());
    let plane = oh * ow;

    exec::for_each_chunk(exec, out.data_mut(), plane, |idx, dst| {
        let oz = idx % od;
        let o = (idx / od) % co;
        let b = idx / (od * co);
        let mut taps: Vec<(f64, isize)> = Vec::with_capacity(kw);
        for oy in 0..oh {
            let row = &mut dst[oy * ow..(oy + 1) * ow];
            for c in 0..ci {
                let in_base = (b * ci + c) * d;
                for kz in 0..kd {
                    let Some(iz) = tap_index(oz, sz, pz, kz, r, d) else { continue };
                    for ky in 0..kh {
                        let Some(iy) = tap_index(oy, sy, py, ky, r, h) else { continue };
                        let src = &x_in[((in_base + iz) * h + iy) * w..][..w];
                        let kbase = (((o * ci + c) * kd + kz) * kh + ky) * kw;
                        if sx == 1 {
                            taps.clear();
                            taps.extend((0..kw).map(|kx| (k[kbase + kx], (kx * r) as isize - px as isize)));
                            accum_row(row, src, &taps);
                        } else {
                            for (ox, v) in row.iter_mut().enumerate() {
                                for kx in 0..kw {
                                    if let Some(ix) = tap_index(ox, sx, px, kx, r, w) {
                                        *v += k[kbase + kx] * src[ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(bias) = bias {
            for v in dst.iter_mut() {
                *v += bias[o];
            }
        }
    });
    Ok(out)
}

/// Gradient of the convolution with respect to its input.
pub fn backward_input(exec: Exec, grad_out: &Tensor, weight: &Tensor, input_shape: &[usize], geom: &ConvGeometry) -> Result<Tensor> {
    let [n, co, od, oh, ow] = dims5(grad_out, "conv output gradient")?;
    let [wco, ci, kd, kh, kw] = dims5(weight, "conv kernel")?;
    if wco != co || input_shape.len() != 5 || input_shape[1] != ci || input_shape[0] != n {
        return Err(Error::shape("conv backward shape mismatch"));
    }
    let (d, h, w) = (input_shape[2], input_shape[3], input_shape[4]);
    let mut gin = Tensor::zeros(input_shape)?;
    let r = geom.dilation;
    let [sz, sy, sx] = geom.stride;
    let [pz, py, px] = geom.pad;
    let g = grad_out.data();
    let k = weight.data();

    // output index o contributing to input index i through tap t: i = o·s − p + t·r
    let out_index = |i: usize, s: usize, p: usize, t: usize, extent: usize| -> Option<usize> {
        let num = i as isize + p as isize - (t * r) as isize;
        if num < 0 || num % s as isize != 0 {
            return None;
        }
        let o = (num / s as isize) as usize;
        (o < extent).then_some(o)
    };

    exec::for_each_chunk(exec, gin.data_mut(), h * w, |idx, dst| {
        let iz = idx % d;
        let c = (idx / d) % ci;
        let b = idx / (d * ci);
        let mut taps: Vec<(f64, isize)> = Vec::with_capacity(kw);
        for iy in 0..h {
            let row = &mut dst[iy * w..(iy + 1) * w];
            for o in 0..co {
                for kz in 0..kd {
                    let Some(oz) = out_index(iz, sz, pz, kz, od) else { continue };
                    for ky in 0..kh {
                        let Some(oy) = out_index(iy, sy, py, ky, oh) else { continue };
                        let src = &g[(((b * co + o) * od + oz) * oh + oy) * ow..][..ow];
                        let kbase = (((o * ci + c) * kd + kz) * kh + ky) * kw;
                        if sx == 1 {
                            taps.clear();
                            taps.extend((0..kw).map(|kx| (k[kbase + kx], px as isize - (kx * r) as isize)));
                            accum_row(row, src, &taps);
                        } else {
                            for (ix, v) in row.iter_mut().enumerate() {
                                for kx in 0..kw {
                                    if let Some(ox) = out_index(ix, sx, px, kx, ow) {
                                        *v += k[kbase + kx] * src[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(gin)
}

/// Gradient of the convolution with respect to its kernel.
pub fn backward_weight(exec: Exec, grad_out: &Tensor, input: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let [n, co, od, oh, ow] = dims5(grad_out, "conv output gradient")?;
    let [ni, ci, d, h, w] = dims5(input, "conv input")?;
    if ni != n {
        return Err(Error::shape("conv backward batch mismatch"));
    }
    let [kd, kh, kw] = geom.kernel;
    let taps = kd * kh * kw;
    let r = geom.dilation;
    let [sz, sy, sx] = geom.stride;
    let [pz, py, px] = geom.pad;
    let g = grad_out.data();
    let x_in = input.data();

    let per_pair = exec::map_indices(exec, co * ci, |pair| {
        let o = pair / ci;
        let c = pair % ci;
        let mut acc = vec![0.0; taps];
        for b in 0..n {
            for oz in 0..od {
                for kz in 0..kd {
                    let Some(iz) = tap_index(oz, sz, pz, kz, r, d) else { continue };
                    for oy in 0..oh {
                        let grow = &g[(((b * co + o) * od + oz) * oh + oy) * ow..][..ow];
                        for ky in 0..kh {
                            let Some(iy) = tap_index(oy, sy, py, ky, r, h) else { continue };
                            let irow = &x_in[(((b * ci + c) * d + iz) * h + iy) * w..][..w];
                            let base = (kz * kh + ky) * kw;
                            for kx in 0..kw {
                                let mut s = 0.0;
                                if sx == 1 {
                                    let off = (kx * r) as isize - px as isize;
                                    let lo = (-off).max(0) as usize;
                                    let hi = ((w as isize - off).min(ow as isize)).max(lo as isize) as usize;
                                    if hi > lo {
                                        let src = &irow[(lo as isize + off) as usize..];
                                        for (gv, iv) in grow[lo..hi].iter().zip(src) {
                                            s += gv * iv;
                                        }
                                    }
                                } else {
                                    for (ox, gv) in grow.iter().enumerate() {
                                        if let Some(ix) = tap_index(ox, sx, px, kx, r, w) {
                                            s += gv * irow[ix];
                                        }
                                    }
                                }
                                acc[base + kx] += s;
                            }
                        }
                    }
                }
            }
        }
        acc
    });
    let data: Vec<f64> = per_pair.into_iter().flatten().collect();
    Tensor::from_values(&[co, ci, kd, kh, kw], data)
}

/// Gradient with respect to the bias: per-channel sum of `grad_out`.
pub fn backward_bias(grad_out: &Tensor) -> Result<Tensor> {
    let [n, co, od, oh, ow] = dims5(grad_out, "conv output gradient")?;
    let vol = od * oh * ow;
    let g = grad_out.data();
    let mut out = vec![0.0; co];
    for b in 0..n {
        for (o, acc) in out.iter_mut().enumerate() {
            *acc += g[(b * co + o) * vol..][..vol].iter().sum::<f64>();
        }
    }
    Tensor::from_values(&[co], out)
}
