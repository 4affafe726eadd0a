//! Displacement fields and the warp `φ = u + id`.
//!
//! Warping is backward: the output at voxel `p` samples the input at
//! `p + u(p)` (voxel units, channel order z, y, x). Sample coordinates are
//! clamped to the volume, which replicates the border.

use std::path::Path;

use crate::autodiff::{CustomOp, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::volgrid::{read_vg01, write_vg01, Dtype, SegMask, Vg01Header, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    data: Tensor,
}

impl DisplacementField {
    pub fn new(data: Tensor) -> Result<Self> {
        let [c, ..] = data.dims4("DisplacementField")?;
        if c != 3 {
            return Err(Error::Shape { op: "DisplacementField", expected: vec![3], got: vec![c] });
        }
        if !data.all_finite() {
            return Err(Error::NonFinite("displacement field".into()));
        }
        Ok(DisplacementField { data })
    }

    pub fn zeros(spatial: [usize; 3]) -> Self {
        let [d, h, w] = spatial;
        DisplacementField { data: Tensor::zeros(&[3, d, h, w]) }
    }

    pub fn constant(spatial: [usize; 3], shift: [f64; 3]) -> Self {
        let n: usize = spatial.iter().product();
        let [d, h, w] = spatial;
        DisplacementField { data: Tensor::from_fn(&[3, d, h, w], |i| shift[i / n]) }
    }

    pub fn from_fn(spatial: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> [f64; 3]) -> Self {
        let [d, h, w] = spatial;
        let n = d * h * w;
        let mut data = vec![0.0; 3 * n];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let i = (z * h + y) * w + x;
                    let u = f(z, y, x);
                    for c in 0..3 {
                        data[c * n + i] = u[c];
                    }
                }
            }
        }
        DisplacementField { data: Tensor::new(vec![3, d, h, w], data).expect("field shape") }
    }

    pub fn spatial(&self) -> [usize; 3] {
        self.data.spatial().expect("field is 4D")
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.max_abs()
    }

    /// Mean Euclidean displacement length over voxels.
    pub fn mean_magnitude(&self) -> f64 {
        let n: usize = self.spatial().iter().product();
        let d = self.data.data();
        (0..n)
            .map(|i| (d[i].powi(2) + d[n + i].powi(2) + d[2 * n + i].powi(2)).sqrt())
            .sum::<f64>()
            / n as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Vg01Header {
            dtype: Dtype::F32,
            shape: self.data.shape().to_vec(),
            spacing: [1.0; 3],
            origin: [0.0; 3],
        };
        let data: Vec<f32> = self.data.data().iter().map(|&v| v as f32).collect();
        write_vg01(path, &header, &data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = read_vg01(path)?;
        let data = raw.data.iter().map(|&v| v as f64).collect();
        DisplacementField::new(Tensor::new(raw.header.shape, data)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    #[default]
    Trilinear,
    Nearest,
}

/// `φ = u + id` with its sampling policy. Borders are always clamped.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpFunction {
    pub field: DisplacementField,
    pub interpolation: Interpolation,
}

impl WarpFunction {
    pub fn new(field: DisplacementField) -> Self {
        WarpFunction { field, interpolation: Interpolation::Trilinear }
    }

    pub fn nearest(field: DisplacementField) -> Self {
        WarpFunction { field, interpolation: Interpolation::Nearest }
    }

    /// `φ(p) = p + u(p)` for voxel `p = (z, y, x)`.
    pub fn map_point(&self, p: [usize; 3]) -> [f64; 3] {
        let [d, h, w] = self.field.spatial();
        let n = d * h * w;
        let i = (p[0] * h + p[1]) * w + p[2];
        let u = self.field.data.data();
        [p[0] as f64 + u[i], p[1] as f64 + u[n + i], p[2] as f64 + u[2 * n + i]]
    }

    pub fn apply(&self, vol: &Volume) -> Result<Volume> {
        let img = Tensor::from_volume(vol);
        let out = match self.interpolation {
            Interpolation::Trilinear => warp_forward(&img, &self.field.data)?,
            Interpolation::Nearest => warp_nearest(&img, &self.field.data)?,
        };
        let mut v = out.channel_volume(0)?;
        v.spacing = vol.spacing;
        Ok(v.with_origin(vol.origin))
    }

    pub fn apply_mask(&self, mask: &SegMask) -> Result<SegMask> {
        let v = self.apply(mask.volume())?;
        // trilinear weights are convex; clamp only guards f32 rounding
        SegMask::new(v.map(|x| x.clamp(0.0, 1.0)))
    }
}

/// Convenience: `φ ∘ image` with trilinear sampling.
pub fn apply_warp(vol: &Volume, field: &DisplacementField) -> Result<Volume> {
    WarpFunction::new(field.clone()).apply(vol)
}

/// Per-axis sampling taps for one voxel.
#[derive(Debug, Clone, Copy)]
struct Taps {
    i0: usize,
    i1: usize,
    frac: f64,
    /// 1 when the coordinate was inside the domain (clamp is the identity there)
    live: f64,
}

#[inline]
fn taps(q: f64, n: usize) -> Taps {
    if n == 1 {
        return Taps { i0: 0, i1: 0, frac: 0.0, live: 0.0 };
    }
    let hi = (n - 1) as f64;
    let live = if (0.0..=hi).contains(&q) { 1.0 } else { 0.0 };
    let c = q.clamp(0.0, hi);
    let i0 = (c.floor() as usize).min(n - 2);
    Taps { i0, i1: i0 + 1, frac: c - i0 as f64, live }
}

fn check_warp_shapes(img: &Tensor, field: &Tensor) -> Result<([usize; 4], usize)> {
    let dims = img.dims4("warp image")?;
    let [fc, fd, fh, fw] = field.dims4("warp field")?;
    if fc != 3 || [fd, fh, fw] != dims[1..] {
        return Err(Error::Shape {
            op: "apply_warp",
            expected: vec![3, dims[1], dims[2], dims[3]],
            got: field.shape().to_vec(),
        });
    }
    Ok((dims, fd * fh * fw))
}

fn voxel_taps(field: &[f64], n: usize, dims: [usize; 4], z: usize, y: usize, x: usize) -> [Taps; 3] {
    let [_, d, h, w] = dims;
    let i = (z * h + y) * w + x;
    [
        taps(z as f64 + field[i], d),
        taps(y as f64 + field[n + i], h),
        taps(x as f64 + field[2 * n + i], w),
    ]
}

pub(crate) fn warp_forward(img: &Tensor, field: &Tensor) -> Result<Tensor> {
    let (dims, n) = check_warp_shapes(img, field)?;
    let [c, d, h, w] = dims;
    let (src, f) = (img.data(), field.data());
    let mut out = vec![0.0; c * n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let [tz, ty, tx] = voxel_taps(f, n, dims, z, y, x);
                let i = (z * h + y) * w + x;
                let corners = [
                    ((tz.i0, ty.i0, tx.i0), (1.0 - tz.frac) * (1.0 - ty.frac) * (1.0 - tx.frac)),
                    ((tz.i0, ty.i0, tx.i1), (1.0 - tz.frac) * (1.0 - ty.frac) * tx.frac),
                    ((tz.i0, ty.i1, tx.i0), (1.0 - tz.frac) * ty.frac * (1.0 - tx.frac)),
                    ((tz.i0, ty.i1, tx.i1), (1.0 - tz.frac) * ty.frac * tx.frac),
                    ((tz.i1, ty.i0, tx.i0), tz.frac * (1.0 - ty.frac) * (1.0 - tx.frac)),
                    ((tz.i1, ty.i0, tx.i1), tz.frac * (1.0 - ty.frac) * tx.frac),
                    ((tz.i1, ty.i1, tx.i0), tz.frac * ty.frac * (1.0 - tx.frac)),
                    ((tz.i1, ty.i1, tx.i1), tz.frac * ty.frac * tx.frac),
                ];
                for ch in 0..c {
                    let base = ch * n;
                    let mut acc = 0.0;
                    for &((a, b, e), wt) in &corners {
                        acc += wt * src[base + (a * h + b) * w + e];
                    }
                    out[base + i] = acc;
                }
            }
        }
    }
    Tensor::new(dims.to_vec(), out)
}

fn warp_nearest(img: &Tensor, field: &Tensor) -> Result<Tensor> {
    let (dims, n) = check_warp_shapes(img, field)?;
    let [c, d, h, w] = dims;
    let (src, f) = (img.data(), field.data());
    let mut out = vec![0.0; c * n];
    let pick = |q: f64, len: usize| q.round().clamp(0.0, (len - 1) as f64) as usize;
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                let j = (pick(z as f64 + f[i], d) * h + pick(y as f64 + f[n + i], h)) * w
                    + pick(x as f64 + f[2 * n + i], w);
                for ch in 0..c {
                    out[ch * n + i] = src[ch * n + j];
                }
            }
        }
    }
    Tensor::new(dims.to_vec(), out)
}

fn warp_backward(img: &Tensor, field: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (dims, n) = check_warp_shapes(img, field)?;
    let [c, d, h, w] = dims;
    let (src, f, g) = (img.data(), field.data(), grad.data());
    let mut gimg = vec![0.0; c * n];
    let mut gfield = vec![0.0; 3 * n];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let [tz, ty, tx] = voxel_taps(f, n, dims, z, y, x);
                let i = (z * h + y) * w + x;
                let wz = [1.0 - tz.frac, tz.frac];
                let wy = [1.0 - ty.frac, ty.frac];
                let wx = [1.0 - tx.frac, tx.frac];
                let iz = [tz.i0, tz.i1];
                let iy = [ty.i0, ty.i1];
                let ix = [tx.i0, tx.i1];
                let sign = [-1.0, 1.0];
                let mut dq = [0.0; 3];
                for ch in 0..c {
                    let base = ch * n;
                    let go = g[base + i];
                    if go == 0.0 {
                        continue;
                    }
                    for a in 0..2 {
                        for b in 0..2 {
                            for e in 0..2 {
                                let j = base + (iz[a] * h + iy[b]) * w + ix[e];
                                gimg[j] += go * wz[a] * wy[b] * wx[e];
                                let v = go * src[j];
                                dq[0] += v * sign[a] * wy[b] * wx[e];
                                dq[1] += v * wz[a] * sign[b] * wx[e];
                                dq[2] += v * wz[a] * wy[b] * sign[e];
                            }
                        }
                    }
                }
                gfield[i] = dq[0] * tz.live;
                gfield[n + i] = dq[1] * ty.live;
                gfield[2 * n + i] = dq[2] * tx.live;
            }
        }
    }
    Ok((Tensor::new(dims.to_vec(), gimg)?, Tensor::new(field.shape().to_vec(), gfield)?))
}

#[derive(Debug)]
struct WarpOp;

impl CustomOp for WarpOp {
    fn name(&self) -> &'static str {
        "apply_warp"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (gi, gf) = warp_backward(inputs[0], inputs[1], grad)?;
        Ok(vec![Some(gi), Some(gf)])
    }
}

/// Differentiable `φ ∘ image` for an image `[C, D, H, W]` and field `[3, D, H, W]`.
pub fn warp_var(g: &Graph, image: Var, field: Var) -> Result<Var> {
    let out = warp_forward(&g.value(image), &g.value(field))?;
    g.custom(vec![image, field], out, Box::new(WarpOp))
}

/// Forward differences of every field component along every axis.
///
/// Output channel `3·c + a` holds `∂u_c/∂a`; the last plane of each axis is 0.
pub fn spatial_gradient(field: &Tensor) -> Result<Tensor> {
    let [c, d, h, w] = field.dims4("spatial_gradient")?;
    if d < 2 || h < 2 || w < 2 {
        return Err(Error::invalid(format!("spatial_gradient needs extents >= 2, got {:?}", [d, h, w])));
    }
    let n = d * h * w;
    let strides = [h * w, w, 1];
    let lens = [d, h, w];
    let src = field.data();
    let mut out = vec![0.0; 3 * c * n];
    for ch in 0..c {
        for a in 0..3 {
            let dst = &mut out[(3 * ch + a) * n..][..n];
            for (i, o) in dst.iter_mut().enumerate() {
                let coord = (i / strides[a]) % lens[a];
                if coord + 1 < lens[a] {
                    *o = src[ch * n + i + strides[a]] - src[ch * n + i];
                }
            }
        }
    }
    Tensor::new(vec![3 * c, d, h, w], out)
}

fn spatial_gradient_adjoint(field_shape: &[usize], grad: &Tensor) -> Result<Tensor> {
    let [c, d, h, w]: [usize; 4] = field_shape.try_into().expect("4D field");
    let n = d * h * w;
    let strides = [h * w, w, 1];
    let lens = [d, h, w];
    let g = grad.data();
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        for a in 0..3 {
            let src = &g[(3 * ch + a) * n..][..n];
            for (i, &gv) in src.iter().enumerate() {
                let coord = (i / strides[a]) % lens[a];
                if coord + 1 < lens[a] {
                    out[ch * n + i + strides[a]] += gv;
                    out[ch * n + i] -= gv;
                }
            }
        }
    }
    Tensor::new(field_shape.to_vec(), out)
}

#[derive(Debug)]
struct SpatialGradientOp;

impl CustomOp for SpatialGradientOp {
    fn name(&self) -> &'static str {
        "spatial_gradient"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(spatial_gradient_adjoint(inputs[0].shape(), grad)?)])
    }
}

pub fn spatial_gradient_var(g: &Graph, field: Var) -> Result<Var> {
    let out = spatial_gradient(&g.value(field))?;
    g.custom(vec![field], out, Box::new(SpatialGradientOp))
}

/// Anything that can predict a displacement field for a baseline volume at a
/// discretized interval.
pub trait FieldPredictor {
    fn predict_field(&self, baseline: &Volume, t_itv: u32) -> Result<DisplacementField>;
}

/// Warps produced by the zero-interval field `φ₀`.
#[derive(Debug, Clone)]
pub struct ZeroIntervalWarps {
    pub field: DisplacementField,
    pub warped_baseline: Volume,
    pub warped_target: Volume,
}

/// Runs the predictor at `t_itv = 0` and applies `φ₀` to both the baseline
/// and the target, as needed by the zero-interval regularizer.
pub fn warp_identity_zero_interval(
    baseline: &Volume,
    target: &Volume,
    model: &dyn FieldPredictor,
) -> Result<ZeroIntervalWarps> {
    let field = model.predict_field(baseline, 0)?;
    let warped_baseline = apply_warp(baseline, &field)?;
    let warped_target = apply_warp(target, &field)?;
    Ok(ZeroIntervalWarps { field, warped_baseline, warped_target })
}
