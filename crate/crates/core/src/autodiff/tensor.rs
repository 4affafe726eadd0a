use crate::error::{Error, Result};
use crate::volgrid::{SegMask, Volume};

/// Dense row-major `f64` array.
///
/// Scalars have an empty shape. Volumetric data is `[C, D, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!("tensor extents must be positive: {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape { op: "Tensor::new", expected: shape, got: vec![data.len()] });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: (0..n).map(f).collect() }
    }

    /// One-channel `[1, D, H, W]` view of a volume.
    pub fn from_volume(vol: &Volume) -> Self {
        let [d, h, w] = vol.shape();
        Tensor { shape: vec![1, d, h, w], data: vol.data().iter().map(|&v| v as f64).collect() }
    }

    pub fn from_mask(mask: &SegMask) -> Self {
        Tensor::from_volume(mask.volume())
    }

    /// Extracts channel `c` of a `[C, D, H, W]` tensor as a unit-spacing volume.
    pub fn channel_volume(&self, c: usize) -> Result<Volume> {
        let [ch, d, h, w] = self.dims4("channel_volume")?;
        if c >= ch {
            return Err(Error::invalid(format!("channel {c} out of range for {ch}")));
        }
        let n = d * h * w;
        let data = self.data[c * n..(c + 1) * n].iter().map(|&v| v as f32).collect();
        Volume::new([d, h, w], data, [1.0; 3])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn dims4(&self, op: &'static str) -> Result<[usize; 4]> {
        self.shape.as_slice().try_into().map_err(|_| Error::Shape {
            op,
            expected: vec![0, 0, 0, 0],
            got: self.shape.clone(),
        })
    }

    pub fn spatial(&self) -> Option<[usize; 3]> {
        match self.shape.as_slice() {
            [_, d, h, w] => Some([*d, *h, *w]),
            _ => None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn mean_abs(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum::<f64>() / self.data.len() as f64
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape { op: "reshape", expected: shape, got: self.shape });
        }
        self.shape = shape;
        Ok(self)
    }
}
