//! Images, label maps, displacement fields, and affine transforms.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Scalar (or few-channel) image on a voxel grid, unit isotropic spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    grid: Grid,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn new(grid: Grid, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || data.len() != grid.numel() * channels {
            return Err(Error::shape(
                "volume",
                format!("{} values for grid {:?} x {channels} channels", data.len(), grid.extents()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "volume" });
        }
        Ok(Self { grid, channels, data })
    }

    pub fn scalar(grid: Grid, data: Vec<T>) -> Result<Self> {
        Self::new(grid, 1, data)
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&[usize]) -> T) -> Self {
        let data = (0..grid.numel()).map(|i| f(&grid.coords(i))).collect();
        Self { grid, channels: 1, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// `[spatial..., channels]` tensor view (copied).
    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_parts(self.grid.with_channels(self.channels), self.data.clone())
    }

    pub fn from_tensor(grid: Grid, t: &Tensor<T>) -> Result<Self> {
        let c = t.last_dim();
        if t.shape() != grid.with_channels(c).as_slice() {
            return Err(Error::shape("volume", format!("tensor {:?} on grid {:?}", t.shape(), grid.extents())));
        }
        Self::new(grid, c, t.data().to_vec())
    }

    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume { grid: self.grid.clone(), channels: self.channels, data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect() }
    }
}

/// Integer segmentation on a voxel grid; 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    grid: Grid,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(grid: Grid, data: Vec<u32>) -> Result<Self> {
        if data.len() != grid.numel() {
            return Err(Error::shape("label_map", format!("{} labels for grid {:?}", data.len(), grid.extents())));
        }
        Ok(Self { grid, data })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    /// Sorted distinct non-background labels present.
    pub fn labels(&self) -> Vec<u32> {
        let mut l: Vec<u32> = self.data.iter().copied().filter(|&v| v != 0).collect();
        l.sort_unstable();
        l.dedup();
        l
    }
}

/// Per-voxel displacement in voxel units; `warped(p) = source(p + u(p))`.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField<T> {
    grid: Grid,
    data: Vec<T>,
}

impl<T: Real> DisplacementField<T> {
    pub fn new(grid: Grid, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.numel() * grid.rank() {
            return Err(Error::shape(
                "displacement_field",
                format!("{} components for grid {:?}", data.len(), grid.extents()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "displacement_field" });
        }
        Ok(Self { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.numel() * grid.rank();
        Self { grid, data: vec![T::zero(); n] }
    }

    pub fn constant(grid: Grid, vector: &[T]) -> Result<Self> {
        if vector.len() != grid.rank() {
            return Err(Error::shape("displacement_field", "vector length must equal grid rank"));
        }
        let data = vector.iter().copied().cycle().take(grid.numel() * grid.rank()).collect();
        Ok(Self { grid, data })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(&[usize]) -> Vec<T>) -> Self {
        let mut data = Vec::with_capacity(grid.numel() * grid.rank());
        for i in 0..grid.numel() {
            let v = f(&grid.coords(i));
            assert_eq!(v.len(), grid.rank());
            data.extend(v);
        }
        Self { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn rank(&self) -> usize {
        self.grid.rank()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn vector(&self, voxel: usize) -> &[T] {
        let d = self.rank();
        &self.data[voxel * d..(voxel + 1) * d]
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_parts(self.grid.with_channels(self.rank()), self.data.clone())
    }

    pub fn from_tensor(grid: Grid, t: &Tensor<T>) -> Result<Self> {
        if t.shape() != grid.with_channels(grid.rank()).as_slice() {
            return Err(Error::shape("displacement_field", format!("tensor {:?} on grid {:?}", t.shape(), grid.extents())));
        }
        Self::new(grid, t.data().to_vec())
    }

    pub fn scaled(&self, k: T) -> Self {
        Self { grid: self.grid.clone(), data: self.data.iter().map(|&v| v * k).collect() }
    }

    /// Mean Euclidean norm of the displacement vectors.
    pub fn mean_magnitude(&self) -> T {
        let d = self.rank();
        let total: T = self.data.chunks_exact(d).map(|v| v.iter().map(|&x| x * x).sum::<T>().sqrt()).sum();
        total / T::from_usize_lossy(self.grid.numel())
    }

    pub fn cast<U: Real>(&self) -> DisplacementField<U> {
        DisplacementField { grid: self.grid.clone(), data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect() }
    }
}

/// Linear map plus translation applied about the volume centre:
/// `x ↦ M (x - c) + c + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineTransform<T> {
    /// Row-major `D×D` matrix.
    pub matrix: Vec<T>,
    pub translation: Vec<T>,
}

impl<T: Real> AffineTransform<T> {
    pub fn identity(rank: usize) -> Self {
        let mut matrix = vec![T::zero(); rank * rank];
        for i in 0..rank {
            matrix[i * rank + i] = T::one();
        }
        Self { matrix, translation: vec![T::zero(); rank] }
    }

    pub fn new(matrix: Vec<T>, translation: Vec<T>) -> Result<Self> {
        let d = translation.len();
        if matrix.len() != d * d || !(2..=3).contains(&d) {
            return Err(Error::shape("affine", format!("matrix of {} entries with translation of {d}", matrix.len())));
        }
        Ok(Self { matrix, translation })
    }

    pub fn rank(&self) -> usize {
        self.translation.len()
    }

    pub fn determinant(&self) -> T {
        let m = &self.matrix;
        match self.rank() {
            2 => m[0] * m[3] - m[1] * m[2],
            3 => {
                m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
                    + m[2] * (m[3] * m[7] - m[4] * m[6])
            }
            _ => unreachable!("rank checked at construction"),
        }
    }

    /// Errors when the matrix is numerically singular (`|det| <= 1e-8`).
    pub fn ensure_invertible(&self) -> Result<()> {
        if self.determinant().abs() <= T::lit(1e-8) {
            return Err(Error::invalid("affine matrix is singular"));
        }
        Ok(())
    }
}
