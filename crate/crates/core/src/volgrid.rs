//! Dense 3D volumes and masks, HU normalization, isotropic resampling,
//! centered cropping and the `VG01` on-disk format.
//!
//! Arrays are row-major in (z, y, x) order. Intensities are stored as `f32`;
//! arithmetic that needs headroom promotes to `f64` internally.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HU_MIN: f64 = -1024.0;
pub const HU_MAX: f64 = 400.0;
pub const DEFAULT_CUBE: usize = 48;
/// Normalized intensity of air, used to pad crops.
pub const AIR: f32 = -1.0;

const VG01_MAGIC: &[u8; 4] = b"VG01";

/// Maps a Hounsfield value onto the quantized `[-1, 1)` intensity scale.
///
/// Input is clamped to `[HU_MIN, HU_MAX]` first, so every finite input lands
/// on one of 256 levels `k/128 - 1`.
pub fn normalize_hu(hu: f64) -> Result<f64> {
    if !hu.is_finite() {
        return Err(Error::NonFinite(format!("HU value {hu}")));
    }
    let hu = hu.clamp(HU_MIN, HU_MAX);
    let level = ((hu + 1024.0) / (HU_MAX + 1024.0) * 255.0).floor();
    Ok(level / 128.0 - 1.0)
}

/// Applies [`normalize_hu`] voxel-wise to a volume holding raw HU values.
pub fn normalize_hu_volume(vol: &Volume) -> Result<Volume> {
    let data = vol
        .data
        .iter()
        .map(|&v| normalize_hu(v as f64).map(|n| n as f32))
        .collect::<Result<Vec<_>>>()?;
    Ok(Volume { data, ..vol.clone() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    data: Vec<f32>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Volume {
    pub fn new(shape: [usize; 3], data: Vec<f32>, spacing: [f64; 3]) -> Result<Self> {
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::invalid(format!("volume extents must be >= 1, got {shape:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::invalid(format!("spacing must be positive, got {spacing:?}")));
        }
        let n = shape.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::Shape {
                op: "Volume::new",
                expected: vec![n],
                got: vec![data.len()],
            });
        }
        Ok(Volume { shape, data, spacing, origin: [0.0; 3] })
    }

    pub fn filled(shape: [usize; 3], value: f32) -> Self {
        Volume::new(shape, vec![value; shape.iter().product()], [1.0; 3])
            .expect("filled volume with non-zero extents")
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(shape.iter().product());
        for z in 0..shape[0] {
            for y in 0..shape[1] {
                for x in 0..shape[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Volume { shape, data, spacing: [1.0; 3], origin: [0.0; 3] }
    }

    pub fn with_origin(mut self, origin: [f64; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    pub fn is_cube(&self) -> bool {
        self.shape[0] == self.shape[1] && self.shape[1] == self.shape[2]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Volume {
        Volume { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    pub fn voxel_volume_mm3(&self) -> f64 {
        self.spacing.iter().product()
    }
}

/// A segmentation co-registered with a [`Volume`]. Values live in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMask {
    vol: Volume,
}

impl SegMask {
    pub fn new(vol: Volume) -> Result<Self> {
        if let Some(bad) = vol.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("mask value {bad} outside [0, 1]")));
        }
        Ok(SegMask { vol })
    }

    pub fn from_fn(shape: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        SegMask {
            vol: Volume::from_fn(shape, |z, y, x| if f(z, y, x) { 1.0 } else { 0.0 }),
        }
    }

    pub fn empty(shape: [usize; 3]) -> Self {
        SegMask { vol: Volume::filled(shape, 0.0) }
    }

    pub fn volume(&self) -> &Volume {
        &self.vol
    }

    pub fn into_volume(self) -> Volume {
        self.vol
    }

    pub fn shape(&self) -> [usize; 3] {
        self.vol.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.vol.data
    }

    pub fn is_hard(&self) -> bool {
        self.vol.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Binarizes at `level`: voxels `>= level` become 1.
    pub fn threshold(&self, level: f32) -> SegMask {
        SegMask { vol: self.vol.map(|v| if v >= level { 1.0 } else { 0.0 }) }
    }

    pub fn count(&self) -> usize {
        self.vol.data.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn check_pairs_with(&self, vol: &Volume) -> Result<()> {
        if self.shape() != vol.shape() {
            return Err(Error::Shape {
                op: "mask/volume pairing",
                expected: vol.shape().to_vec(),
                got: self.shape().to_vec(),
            });
        }
        Ok(())
    }
}

/// Volume of a hard mask in mm³: `count × voxel volume`.
pub fn mask_volume_mm3(mask: &SegMask) -> Result<f64> {
    if !mask.is_hard() {
        return Err(Error::invalid("soft mask passed to mask_volume_mm3; threshold it first"));
    }
    let ones = mask.data().iter().filter(|&&v| v == 1.0).count();
    Ok(ones as f64 * mask.vol.voxel_volume_mm3())
}

/// Centroid of the mask's nonzero voxels, rounded to the nearest index.
pub fn mask_centroid(mask: &SegMask) -> Option<[usize; 3]> {
    let [_, h, w] = mask.shape();
    let mut acc = [0.0f64; 3];
    let mut total = 0.0f64;
    for (i, &v) in mask.data().iter().enumerate() {
        if v > 0.0 {
            let v = v as f64;
            acc[0] += v * (i / (h * w)) as f64;
            acc[1] += v * ((i / w) % h) as f64;
            acc[2] += v * (i % w) as f64;
            total += v;
        }
    }
    (total > 0.0).then(|| acc.map(|a| (a / total).round() as usize))
}

fn isotropic_shape(vol: &Volume) -> Result<[usize; 3]> {
    let mut out = [0usize; 3];
    for a in 0..3 {
        let (n, s) = (vol.shape[a], vol.spacing[a]);
        if n == 1 && s != 1.0 {
            return Err(Error::invalid(format!(
                "cannot resample size-1 axis {a} with spacing {s}"
            )));
        }
        out[a] = ((n as f64) * s).round().max(1.0) as usize;
    }
    Ok(out)
}

/// Continuous source index for output index `o` when an axis of `n_in`
/// samples is stretched to `n_out`; voxel centers are aligned.
#[inline]
fn source_coord(o: usize, n_in: usize, n_out: usize) -> f64 {
    let scale = n_in as f64 / n_out as f64;
    ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64)
}

fn linear_taps(o: usize, n_in: usize, n_out: usize) -> (usize, usize, f64) {
    let c = source_coord(o, n_in, n_out);
    let i0 = (c.floor() as usize).min(n_in - 1);
    let i1 = (i0 + 1).min(n_in - 1);
    (i0, i1, c - i0 as f64)
}

fn resampled_origin(vol: &Volume) -> [f64; 3] {
    let mut origin = vol.origin;
    for (a, o) in origin.iter_mut().enumerate() {
        // the first output center sits half a new voxel in from the old edge
        *o += -0.5 * vol.spacing[a] + 0.5;
    }
    origin
}

/// Resamples an image (trilinear) and its mask (nearest neighbour) to
/// 1 mm isotropic spacing.
pub fn resample_isotropic(vol: &Volume, mask: &SegMask) -> Result<(Volume, SegMask)> {
    mask.check_pairs_with(vol)?;
    if vol.spacing == [1.0; 3] {
        return Ok((vol.clone(), mask.clone()));
    }
    let out_shape = isotropic_shape(vol)?;
    let [d, h, w] = vol.shape;
    let tz: Vec<_> = (0..out_shape[0]).map(|o| linear_taps(o, d, out_shape[0])).collect();
    let ty: Vec<_> = (0..out_shape[1]).map(|o| linear_taps(o, h, out_shape[1])).collect();
    let tx: Vec<_> = (0..out_shape[2]).map(|o| linear_taps(o, w, out_shape[2])).collect();

    let img = Volume::from_fn(out_shape, |z, y, x| {
        let (z0, z1, fz) = tz[z];
        let (y0, y1, fy) = ty[y];
        let (x0, x1, fx) = tx[x];
        let at = |zz, yy, xx| vol.get(zz, yy, xx) as f64;
        let c00 = at(z0, y0, x0) * (1.0 - fx) + at(z0, y0, x1) * fx;
        let c01 = at(z0, y1, x0) * (1.0 - fx) + at(z0, y1, x1) * fx;
        let c10 = at(z1, y0, x0) * (1.0 - fx) + at(z1, y0, x1) * fx;
        let c11 = at(z1, y1, x0) * (1.0 - fx) + at(z1, y1, x1) * fx;
        let c0 = c00 * (1.0 - fy) + c01 * fy;
        let c1 = c10 * (1.0 - fy) + c11 * fy;
        (c0 * (1.0 - fz) + c1 * fz) as f32
    });
    let nearest = |o: usize, n_in: usize, n_out: usize| {
        (source_coord(o, n_in, n_out).round() as usize).min(n_in - 1)
    };
    let m = Volume::from_fn(out_shape, |z, y, x| {
        mask.vol.get(
            nearest(z, d, out_shape[0]),
            nearest(y, h, out_shape[1]),
            nearest(x, w, out_shape[2]),
        )
    });
    let origin = resampled_origin(vol);
    let img = img.with_origin(origin);
    let m = m.with_origin(origin);
    Ok((img, SegMask { vol: m }))
}

/// Extracts a `cube³` block centered on `center`; voxels outside the source
/// take `fill`.
pub fn crop_center(vol: &Volume, center: [usize; 3], cube: usize, fill: f32) -> Result<Volume> {
    if cube < 1 {
        return Err(Error::invalid("cube size must be >= 1"));
    }
    for a in 0..3 {
        if center[a] >= vol.shape[a] {
            return Err(Error::invalid(format!(
                "crop center {center:?} outside volume {:?}",
                vol.shape
            )));
        }
    }
    let start = center.map(|c| c as isize - (cube / 2) as isize);
    let mut out = Volume::from_fn([cube; 3], |z, y, x| {
        let src = [start[0] + z as isize, start[1] + y as isize, start[2] + x as isize];
        if (0..3).all(|a| src[a] >= 0 && (src[a] as usize) < vol.shape[a]) {
            vol.get(src[0] as usize, src[1] as usize, src[2] as usize)
        } else {
            fill
        }
    });
    out.spacing = vol.spacing;
    for a in 0..3 {
        out.origin[a] = vol.origin[a] + start[a] as f64 * vol.spacing[a];
    }
    Ok(out)
}

pub fn crop_mask(mask: &SegMask, center: [usize; 3], cube: usize) -> Result<SegMask> {
    Ok(SegMask { vol: crop_center(&mask.vol, center, cube, 0.0)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vg01Header {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

/// A decoded `VG01` file: header plus samples promoted to `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawGrid {
    pub header: Vg01Header,
    pub data: Vec<f32>,
}

pub fn write_vg01(path: &Path, header: &Vg01Header, data: &[f32]) -> Result<()> {
    let n: usize = header.shape.iter().product();
    if n != data.len() || header.shape.is_empty() {
        return Err(Error::Shape { op: "write_vg01", expected: header.shape.clone(), got: vec![data.len()] });
    }
    let file = File::create(path).map_err(|source| Error::Open { path: path.to_path_buf(), source })?;
    let mut out = BufWriter::new(file);
    let json = serde_json::to_vec(header)?;
    out.write_all(VG01_MAGIC)?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    match header.dtype {
        Dtype::F32 => {
            for v in data {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Dtype::U8 => {
            for &v in data {
                if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
                    return Err(Error::invalid(format!("value {v} not representable as u8")));
                }
                out.write_all(&[v as u8])?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_vg01(path: &Path) -> Result<RawGrid> {
    let file = File::open(path).map_err(|source| Error::Open { path: path.to_path_buf(), source })?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes)?;
    decode_vg01(&bytes)
}

pub fn decode_vg01(bytes: &[u8]) -> Result<RawGrid> {
    if bytes.len() < 4 {
        return Err(Error::Truncated("missing magic".into()));
    }
    if &bytes[..4] != VG01_MAGIC {
        return Err(Error::BadMagic { expected: "VG01", found: bytes[..4].to_vec() });
    }
    if bytes.len() < 8 {
        return Err(Error::Truncated("missing header length".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() < hlen {
        return Err(Error::Truncated(format!("header needs {hlen} bytes, {} present", body.len())));
    }
    let header: Vg01Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| Error::Header(e.to_string()))?;
    if header.shape.is_empty() || header.shape.contains(&0) {
        return Err(Error::Header(format!("bad shape {:?}", header.shape)));
    }
    let payload = &body[hlen..];
    let n: usize = header.shape.iter().product();
    let expected = n * header.dtype.width();
    if payload.len() != expected {
        return Err(Error::PayloadMismatch { expected, actual: payload.len() });
    }
    let data = match header.dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::U8 => payload.iter().map(|&b| b as f32).collect(),
    };
    Ok(RawGrid { header, data })
}

pub fn save_volume(path: &Path, vol: &Volume) -> Result<()> {
    let header = Vg01Header {
        dtype: Dtype::F32,
        shape: vol.shape.to_vec(),
        spacing: vol.spacing,
        origin: vol.origin,
    };
    write_vg01(path, &header, &vol.data)
}

fn grid_to_volume(raw: RawGrid) -> Result<Volume> {
    let shape: [usize; 3] = raw
        .header
        .shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::Header(format!("expected 3D shape, got {:?}", raw.header.shape)))?;
    Ok(Volume::new(shape, raw.data, raw.header.spacing)?.with_origin(raw.header.origin))
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    grid_to_volume(read_vg01(path)?)
}

/// Hard masks are written as `u8`; soft ones fall back to `f32`.
pub fn save_mask(path: &Path, mask: &SegMask) -> Result<()> {
    let v = &mask.vol;
    let dtype = if mask.is_hard() { Dtype::U8 } else { Dtype::F32 };
    let header = Vg01Header { dtype, shape: v.shape.to_vec(), spacing: v.spacing, origin: v.origin };
    write_vg01(path, &header, &v.data)
}

pub fn load_mask(path: &Path) -> Result<SegMask> {
    SegMask::new(grid_to_volume(read_vg01(path)?)?)
}
