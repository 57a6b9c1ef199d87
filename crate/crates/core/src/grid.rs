//! Spatial index helpers for rank-D voxel grids.

use crate::error::{Error, Result};
use crate::tensor::strides;

/// Extents of a rank-D voxel grid with row-major voxel numbering.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Grid {
    extents: Vec<usize>,
    strides: Vec<usize>,
}

impl Grid {
    pub fn new(extents: impl Into<Vec<usize>>) -> Result<Self> {
        let extents = extents.into();
        if extents.is_empty() || extents.iter().any(|&e| e == 0) {
            return Err(Error::shape("grid", format!("invalid extents {extents:?}")));
        }
        let strides = strides(&extents);
        Ok(Self { extents, strides })
    }

    pub fn rank(&self) -> usize {
        self.extents.len()
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn numel(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn offset(&self, coords: &[usize]) -> usize {
        coords.iter().zip(&self.strides).map(|(c, s)| c * s).sum()
    }

    /// Coordinates of voxel `index`, written into `out`.
    pub fn coords_into(&self, mut index: usize, out: &mut [usize]) {
        for (o, &s) in out.iter_mut().zip(&self.strides) {
            *o = index / s;
            index %= s;
        }
    }

    pub fn coords(&self, index: usize) -> Vec<usize> {
        let mut out = vec![0; self.rank()];
        self.coords_into(index, &mut out);
        out
    }

    /// Offset of `coords + delta`, or `None` when it leaves the grid.
    pub fn shifted(&self, coords: &[usize], delta: &[isize]) -> Option<usize> {
        let mut off = 0;
        for ((&c, &d), (&e, &s)) in coords.iter().zip(delta).zip(self.extents.iter().zip(&self.strides)) {
            let q = c as isize + d;
            if q < 0 || q >= e as isize {
                return None;
            }
            off += q as usize * s;
        }
        Some(off)
    }

    /// Grid with every extent halved, rounding up.
    pub fn halved(&self) -> Grid {
        Grid::new(self.extents.iter().map(|e| e.div_ceil(2)).collect::<Vec<_>>()).expect("non-empty")
    }

    /// Center voxel coordinate per axis, `(extent - 1) / 2`.
    pub fn center(&self) -> Vec<f64> {
        self.extents.iter().map(|&e| (e as f64 - 1.0) / 2.0).collect()
    }

    /// Shape of a `[spatial..., channels]` tensor on this grid.
    pub fn with_channels(&self, channels: usize) -> Vec<usize> {
        let mut s = self.extents.clone();
        s.push(channels);
        s
    }
}

/// All displacements in `[-radius, radius]^rank`, lexicographic order
/// (first axis slowest), so the zero displacement sits at the middle index.
pub fn displacements(rank: usize, radius: usize) -> Vec<Vec<isize>> {
    let side = 2 * radius + 1;
    let count = side.pow(rank as u32);
    (0..count)
        .map(|mut k| {
            let mut d = vec![0isize; rank];
            for ax in (0..rank).rev() {
                d[ax] = (k % side) as isize - radius as isize;
                k /= side;
            }
            d
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coordinates_round_trip() {
        let g = Grid::new(vec![3, 4, 5]).unwrap();
        for i in 0..g.numel() {
            assert_eq!(g.offset(&g.coords(i)), i);
        }
        assert_eq!(g.halved().extents(), &[2, 2, 3]);
    }

    #[test]
    fn displacement_order_is_lexicographic_with_zero_in_middle() {
        let d = displacements(2, 1);
        assert_eq!(d.len(), 9);
        assert_eq!(d[0], vec![-1, -1]);
        assert_eq!(d[1], vec![-1, 0]);
        assert_eq!(d[4], vec![0, 0]);
        assert_eq!(displacements(3, 2).len(), 125);
    }
}
