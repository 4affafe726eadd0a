//! Raw forward/adjoint kernels behind the graph operators.

use super::parallel::for_each_chunk;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad: usize,
    pub kernel: usize,
}

impl ConvGeometry {
    pub fn out_len(&self, n: usize) -> Result<usize> {
        if n + 2 * self.pad < self.kernel {
            return Err(Error::invalid(format!(
                "extent {n} too small for kernel {} with padding {}",
                self.kernel, self.pad
            )));
        }
        Ok((n + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    /// Output indices `o` whose tap `k` lands inside `[0, n_in)`.
    #[inline]
    fn valid(&self, k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi = if n_in + p < k + 1 { 0 } else { ((n_in - 1 + p - k) / s + 1).min(n_out) };
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv_out_shape(x: &Tensor, w: &Tensor, geo: ConvGeometry) -> Result<[usize; 4]> {
    let [ci, d, h, wd] = x.dims4("conv3d input")?;
    let ws: [usize; 5] = w.shape().try_into().map_err(|_| Error::Shape {
        op: "conv3d weight",
        expected: vec![0; 5],
        got: w.shape().to_vec(),
    })?;
    let [co, wci, k0, k1, k2] = ws;
    if wci != ci {
        return Err(Error::Shape { op: "conv3d channels", expected: vec![wci], got: vec![ci] });
    }
    if k0 != k1 || k1 != k2 || k0 % 2 == 0 || k0 != geo.kernel {
        return Err(Error::invalid(format!("kernel must be cubic and odd, got {:?}", &ws[2..])));
    }
    if !(1..=2).contains(&geo.stride) {
        return Err(Error::invalid(format!("stride must be 1 or 2, got {}", geo.stride)));
    }
    Ok([co, geo.out_len(d)?, geo.out_len(h)?, geo.out_len(wd)?])
}

pub(crate) fn conv3d_forward(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    geo: ConvGeometry,
) -> Result<Tensor> {
    let [ci, d, h, wd] = x.dims4("conv3d input")?;
    let [co, od, oh, ow] = conv_out_shape(x, w, geo)?;
    if let Some(b) = bias {
        if b.shape() != [co] {
            return Err(Error::Shape { op: "conv3d bias", expected: vec![co], got: b.shape().to_vec() });
        }
    }
    let k = geo.kernel;
    let (isz, osz) = (d * h * wd, od * oh * ow);
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; co * osz];
    for_each_chunk(&mut out, osz, |o, dst| {
        if let Some(b) = bias {
            dst.fill(b.data()[o]);
        }
        for c in 0..ci {
            let src = &xd[c * isz..(c + 1) * isz];
            let wbase = (o * ci + c) * k * k * k;
            for kz in 0..k {
                let (z0, z1) = geo.valid(kz, d, od);
                for oz in z0..z1 {
                    let iz = oz * geo.stride + kz - geo.pad;
                    for ky in 0..k {
                        let (y0, y1) = geo.valid(ky, h, oh);
                        for oy in y0..y1 {
                            let iy = oy * geo.stride + ky - geo.pad;
                            let in_row = &src[(iz * h + iy) * wd..][..wd];
                            let out_row = &mut dst[(oz * oh + oy) * ow..][..ow];
                            for kx in 0..k {
                                let wv = wdat[wbase + (kz * k + ky) * k + kx];
                                let (x0, x1) = geo.valid(kx, wd, ow);
                                if geo.stride == 1 {
                                    let off = x0 + kx - geo.pad;
                                    for (dst, s) in out_row[x0..x1].iter_mut().zip(&in_row[off..]) {
                                        *dst += wv * s;
                                    }
                                } else {
                                    for ox in x0..x1 {
                                        out_row[ox] += wv * in_row[ox * geo.stride + kx - geo.pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![co, od, oh, ow], out)
}

/// Gradient of a conv3d with respect to its input.
pub(crate) fn conv3d_backward_input(
    x_shape: [usize; 4],
    w: &Tensor,
    gout: &Tensor,
    geo: ConvGeometry,
) -> Result<Tensor> {
    let [ci, d, h, wd] = x_shape;
    let [co, od, oh, ow] = gout.dims4("conv3d grad")?;
    let k = geo.kernel;
    let (isz, osz) = (d * h * wd, od * oh * ow);
    let (g, wdat) = (gout.data(), w.data());
    let mut gx = vec![0.0; ci * isz];
    for_each_chunk(&mut gx, isz, |c, dst| {
        for o in 0..co {
            let src = &g[o * osz..(o + 1) * osz];
            let wbase = (o * ci + c) * k * k * k;
            for kz in 0..k {
                let (z0, z1) = geo.valid(kz, d, od);
                for oz in z0..z1 {
                    let iz = oz * geo.stride + kz - geo.pad;
                    for ky in 0..k {
                        let (y0, y1) = geo.valid(ky, h, oh);
                        for oy in y0..y1 {
                            let iy = oy * geo.stride + ky - geo.pad;
                            let g_row = &src[(oz * oh + oy) * ow..][..ow];
                            let in_row = &mut dst[(iz * h + iy) * wd..][..wd];
                            for kx in 0..k {
                                let wv = wdat[wbase + (kz * k + ky) * k + kx];
                                let (x0, x1) = geo.valid(kx, wd, ow);
                                if geo.stride == 1 {
                                    let off = x0 + kx - geo.pad;
                                    for (d, s) in in_row[off..].iter_mut().zip(&g_row[x0..x1]) {
                                        *d += wv * s;
                                    }
                                } else {
                                    for ox in x0..x1 {
                                        in_row[ox * geo.stride + kx - geo.pad] += wv * g_row[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(x_shape.to_vec(), gx)
}

/// Gradient of a conv3d with respect to its weight.
pub(crate) fn conv3d_backward_weight(
    x: &Tensor,
    w_shape: &[usize],
    gout: &Tensor,
    geo: ConvGeometry,
) -> Result<Tensor> {
    let [ci, d, h, wd] = x.dims4("conv3d input")?;
    let [_, od, oh, ow] = gout.dims4("conv3d grad")?;
    let k = geo.kernel;
    let (isz, osz) = (d * h * wd, od * oh * ow);
    let (g, xd) = (gout.data(), x.data());
    let per_out = ci * k * k * k;
    let mut gw = vec![0.0; w_shape.iter().product()];
    for_each_chunk(&mut gw, per_out, |o, dst| {
        let gsrc = &g[o * osz..(o + 1) * osz];
        for c in 0..ci {
            let src = &xd[c * isz..(c + 1) * isz];
            for kz in 0..k {
                let (z0, z1) = geo.valid(kz, d, od);
                for ky in 0..k {
                    let (y0, y1) = geo.valid(ky, h, oh);
                    for kx in 0..k {
                        let (x0, x1) = geo.valid(kx, wd, ow);
                        let mut acc = 0.0;
                        for oz in z0..z1 {
                            let iz = oz * geo.stride + kz - geo.pad;
                            for oy in y0..y1 {
                                let iy = oy * geo.stride + ky - geo.pad;
                                let g_row = &gsrc[(oz * oh + oy) * ow..][..ow];
                                let in_row = &src[(iz * h + iy) * wd..][..wd];
                                if geo.stride == 1 {
                                    let off = x0 + kx - geo.pad;
                                    acc += g_row[x0..x1]
                                        .iter()
                                        .zip(&in_row[off..])
                                        .map(|(a, b)| a * b)
                                        .sum::<f64>();
                                } else {
                                    for ox in x0..x1 {
                                        acc += g_row[ox] * in_row[ox * geo.stride + kx - geo.pad];
                                    }
                                }
                            }
                        }
                        dst[(c * k + kz) * k * k + ky * k + kx] = acc;
                    }
                }
            }
        }
    });
    Tensor::new(w_shape.to_vec(), gw)
}

pub(crate) fn channel_sums(gout: &Tensor) -> Result<Tensor> {
    let [c, d, h, w] = gout.dims4("channel sums")?;
    let n = d * h * w;
    let sums = (0..c).map(|i| gout.data()[i * n..(i + 1) * n].iter().sum()).collect();
    Tensor::new(vec![c], sums)
}

/// Splits a shape around `axis` into (outer, len, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Two-tap linear interpolation table for doubling an axis of length `n`
/// with half-pixel (align-corners-false) sampling.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

fn upsample_axis(data: &[f64], shape: &[usize], axis: usize) -> (Vec<f64>, Vec<usize>) {
    let (outer, n, inner) = axis_split(shape, axis);
    let taps = upsample_taps(n);
    let mut out = vec![0.0; outer * 2 * n * inner];
    for a in 0..outer {
        for (o, &(i0, i1, f)) in taps.iter().enumerate() {
            let dst = &mut out[(a * 2 * n + o) * inner..][..inner];
            let s0 = &data[(a * n + i0) * inner..][..inner];
            let s1 = &data[(a * n + i1) * inner..][..inner];
            for ((d, &v0), &v1) in dst.iter_mut().zip(s0).zip(s1) {
                *d = v0 * (1.0 - f) + v1 * f;
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] *= 2;
    (out, new_shape)
}

fn upsample_axis_adjoint(g: &[f64], shape_in: &[usize], axis: usize) -> Vec<f64> {
    let (outer, n, inner) = axis_split(shape_in, axis);
    let taps = upsample_taps(n);
    let mut out = vec![0.0; outer * n * inner];
    for a in 0..outer {
        for (o, &(i0, i1, f)) in taps.iter().enumerate() {
            let src = &g[(a * 2 * n + o) * inner..][..inner];
            for (j, &gv) in src.iter().enumerate() {
                out[(a * n + i0) * inner + j] += gv * (1.0 - f);
                out[(a * n + i1) * inner + j] += gv * f;
            }
        }
    }
    out
}

pub(crate) fn upsample2x_forward(x: &Tensor) -> Result<Tensor> {
    x.dims4("upsample2x")?;
    let mut data = x.data().to_vec();
    let mut shape = x.shape().to_vec();
    for axis in 1..4 {
        (data, shape) = upsample_axis(&data, &shape, axis);
    }
    Tensor::new(shape, data)
}

pub(crate) fn upsample2x_backward(x_shape: &[usize], gout: &Tensor) -> Result<Tensor> {
    let mut g = gout.data().to_vec();
    for axis in (1..4).rev() {
        let mut shape_in = x_shape.to_vec();
        for a in 1..axis {
            shape_in[a] *= 2;
        }
        g = upsample_axis_adjoint(&g, &shape_in, axis);
    }
    Tensor::new(x_shape.to_vec(), g)
}

/// Sum over a centered `(2r+1)`-wide window along each spatial axis,
/// truncated at the borders. The operator is self-adjoint.
pub(crate) fn box_sum(x: &Tensor, radius: usize) -> Result<Tensor> {
    x.dims4("box_sum")?;
    let shape = x.shape().to_vec();
    let mut data = x.data().to_vec();
    let mut prefix = Vec::new();
    for axis in 1..4 {
        let (outer, n, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; data.len()];
        prefix.resize(n + 1, 0.0);
        for a in 0..outer {
            for j in 0..inner {
                prefix[0] = 0.0;
                for i in 0..n {
                    prefix[i + 1] = prefix[i] + data[(a * n + i) * inner + j];
                }
                for i in 0..n {
                    let lo = i.saturating_sub(radius);
                    let hi = (i + radius + 1).min(n);
                    out[(a * n + i) * inner + j] = prefix[hi] - prefix[lo];
                }
            }
        }
        data = out;
    }
    Tensor::new(shape, data)
}
