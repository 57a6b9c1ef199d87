//! Displacement-field algebra: warping, composition, upsampling, affine
//! fields, and folding diagnostics.
//!
//! Fields are pull-based: `warped(p) = source(p + u(p))`, sample coordinates
//! clamped to the grid.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Real;
use crate::tensor::Tensor;
use crate::volume::{AffineTransform, DisplacementField, LabelMap, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Linear,
    Nearest,
}

/// Voxel coordinates of every grid point, `[spatial..., D]`.
pub fn identity_coords<T: Real>(grid: &Grid) -> Tensor<T> {
    let d = grid.rank();
    let mut data = Vec::with_capacity(grid.numel() * d);
    let mut c = vec![0; d];
    for i in 0..grid.numel() {
        grid.coords_into(i, &mut c);
        data.extend(c.iter().map(|&x| T::from_usize_lossy(x)));
    }
    Tensor::from_parts(grid.with_channels(d), data)
}

fn check_field<T: Real>(op: &'static str, grid: &Grid, field: &Tensor<T>) -> Result<()> {
    if field.shape() != grid.with_channels(grid.rank()).as_slice() {
        return Err(Error::shape(op, format!("field {:?} on grid {:?}", field.shape(), grid.extents())));
    }
    Ok(())
}

/// Differentiable linear warp of `source` (`[grid..., C]`) by `field`.
pub fn warp_var<'t, T: Real>(source: Var<'t, T>, grid: &Grid, field: Var<'t, T>) -> Result<Var<'t, T>> {
    check_field("warp", grid, &field.value())?;
    let coords = field.add(field.tape().constant(identity_coords(grid)))?;
    source.sample_linear(grid, coords)
}

/// Linear warp of a `[grid..., C]` tensor.
pub fn warp_tensor<T: Real>(source: &Tensor<T>, grid: &Grid, field: &DisplacementField<T>) -> Result<Tensor<T>> {
    if field.grid() != grid {
        return Err(Error::shape("warp", format!("field grid {:?} vs source {:?}", field.grid().extents(), grid.extents())));
    }
    let tape = Tape::new();
    let out = warp_var(tape.constant(source.clone()), grid, tape.constant(field.to_tensor()))?;
    Ok((*out.value()).clone())
}

pub fn warp_volume<T: Real>(source: &Volume<T>, field: &DisplacementField<T>, interp: Interpolation) -> Result<Volume<T>> {
    let grid = source.grid().clone();
    let out = match interp {
        Interpolation::Linear => warp_tensor(&source.to_tensor(), &grid, field)?,
        Interpolation::Nearest => {
            let idx = nearest_indices(&grid, field)?;
            let c = source.channels();
            let data = idx.iter().flat_map(|&q| source.data()[q * c..(q + 1) * c].iter().copied()).collect();
            Tensor::from_parts(grid.with_channels(c), data)
        }
    };
    Volume::from_tensor(grid, &out)
}

/// Nearest-neighbour warp; the only interpolation valid for labels.
pub fn warp_labels<T: Real>(labels: &LabelMap, field: &DisplacementField<T>) -> Result<LabelMap> {
    if field.grid() != labels.grid() {
        return Err(Error::shape("warp", "label map and field grids differ"));
    }
    let idx = nearest_indices(labels.grid(), field)?;
    LabelMap::new(labels.grid().clone(), idx.iter().map(|&q| labels.data()[q]).collect())
}

fn nearest_indices<T: Real>(grid: &Grid, field: &DisplacementField<T>) -> Result<Vec<usize>> {
    if field.grid() != grid {
        return Err(Error::shape("warp", "source and field grids differ"));
    }
    let d = grid.rank();
    let mut c = vec![0; d];
    Ok((0..grid.numel())
        .map(|i| {
            grid.coords_into(i, &mut c);
            let u = field.vector(i);
            let mut off = 0;
            for ax in 0..d {
                let x = (T::from_usize_lossy(c[ax]) + u[ax]).to_f64_lossy().round();
                let x = x.clamp(0.0, (grid.extents()[ax] - 1) as f64) as usize;
                off += x * grid.strides()[ax];
            }
            off
        })
        .collect())
}

/// `inner + outer ∘ (id + inner)`: warping by the result approximates
/// warping by `outer` first and then by `inner`.
pub fn compose_var<'t, T: Real>(outer: Var<'t, T>, inner: Var<'t, T>, grid: &Grid) -> Result<Var<'t, T>> {
    check_field("compose", grid, &outer.value())?;
    inner.add(warp_var(outer, grid, inner)?)
}

pub fn compose<T: Real>(outer: &DisplacementField<T>, inner: &DisplacementField<T>) -> Result<DisplacementField<T>> {
    if outer.grid() != inner.grid() {
        return Err(Error::shape("compose", "fields on different grids"));
    }
    let tape = Tape::new();
    let grid = inner.grid();
    let out = compose_var(tape.constant(outer.to_tensor()), tape.constant(inner.to_tensor()), grid)?;
    DisplacementField::from_tensor(grid.clone(), &out.value())
}

/// Coarse sample coordinates for a 2× upsampling onto `fine`: voxel
/// centres align, so fine `p` reads coarse `(p - 0.5) / 2`.
fn upsample_coords<T: Real>(fine: &Grid) -> Tensor<T> {
    identity_coords::<T>(fine).map(|x| (x - T::lit(0.5)) * T::lit(0.5))
}

/// Linear 2× upsampling of any `[coarse..., C]` map onto `fine`
/// (extents must halve, rounding up, to `coarse`).
pub fn upsample_var<'t, T: Real>(x: Var<'t, T>, coarse: &Grid, fine: &Grid) -> Result<Var<'t, T>> {
    if &fine.halved() != coarse {
        return Err(Error::shape(
            "upsample",
            format!("{:?} is not the half-resolution grid of {:?}", coarse.extents(), fine.extents()),
        ));
    }
    x.sample_linear(coarse, x.tape().constant(upsample_coords(fine)))
}

/// Upsampled field with vectors doubled (voxel units rescale with resolution).
pub fn upsample_field_var<'t, T: Real>(field: Var<'t, T>, coarse: &Grid, fine: &Grid) -> Result<Var<'t, T>> {
    check_field("upsample_field", coarse, &field.value())?;
    upsample_var(field, coarse, fine)?.scale(T::lit(2.0))
}

pub fn upsample_field<T: Real>(field: &DisplacementField<T>, fine: &Grid) -> Result<DisplacementField<T>> {
    let tape = Tape::new();
    let out = upsample_field_var(tape.constant(field.to_tensor()), field.grid(), fine)?;
    DisplacementField::from_tensor(fine.clone(), &out.value())
}

/// `[N, D]` offsets `p - c` from the volume centre.
pub(crate) fn centred_coords<T: Real>(grid: &Grid) -> Tensor<T> {
    let centre: Vec<T> = grid.center().into_iter().map(T::lit).collect();
    let d = grid.rank();
    let mut t = identity_coords::<T>(grid).reshaped(vec![grid.numel(), d]).expect("same count");
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v -= centre[i % d];
    }
    t
}

/// Differentiable affine field from `matrix` (`[D, D]`) and `translation`
/// (`[D]`): `u(p) = M (p - c) + c + t - p`.
pub fn affine_field_var<'t, T: Real>(
    matrix: Var<'t, T>,
    translation: Var<'t, T>,
    grid: &Grid,
) -> Result<Var<'t, T>> {
    let d = grid.rank();
    if matrix.shape() != [d, d] || translation.shape() != [d] {
        return Err(Error::shape("affine_to_field", format!("matrix {:?}, translation {:?}", matrix.shape(), translation.shape())));
    }
    let tape = matrix.tape();
    let pc = tape.constant(centred_coords(grid));
    let mapped = pc.matmul(matrix.permute(&[1, 0])?)?;
    mapped.sub(pc)?.add(translation)?.reshape(grid.with_channels(d))
}

pub fn affine_to_field<T: Real>(t: &AffineTransform<T>, grid: &Grid) -> Result<DisplacementField<T>> {
    let d = grid.rank();
    if t.rank() != d {
        return Err(Error::shape("affine_to_field", format!("rank-{} transform on rank-{d} grid", t.rank())));
    }
    t.ensure_invertible()?;
    let pc = centred_coords::<T>(grid);
    let mut data = Vec::with_capacity(grid.numel() * d);
    for row in pc.data().chunks_exact(d) {
        for i in 0..d {
            let mut v = t.translation[i] - row[i];
            for j in 0..d {
                v += t.matrix[i * d + j] * row[j];
            }
            data.push(v);
        }
    }
    DisplacementField::new(grid.clone(), data)
}

fn det(m: &[f64], d: usize) -> f64 {
    match d {
        2 => m[0] * m[3] - m[1] * m[2],
        _ => {
            m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6])
        }
    }
}

/// Fraction of interior voxels where the central-difference Jacobian of
/// `p ↦ p + u(p)` has a non-positive determinant.
pub fn jacobian_nonpositive_fraction<T: Real>(field: &DisplacementField<T>) -> Result<f64> {
    let grid = field.grid();
    let d = grid.rank();
    if grid.extents().iter().any(|&e| e < 3) {
        return Err(Error::shape("jacobian", format!("extents {:?} must all be at least 3", grid.extents())));
    }
    let mut c = vec![0; d];
    let mut jac = vec![0.0; d * d];
    let (mut total, mut folded) = (0usize, 0usize);
    for i in 0..grid.numel() {
        grid.coords_into(i, &mut c);
        if c.iter().zip(grid.extents()).any(|(&x, &e)| x == 0 || x + 1 == e) {
            continue;
        }
        for ax in 0..d {
            let s = grid.strides()[ax];
            let (hi, lo) = (field.vector(i + s), field.vector(i - s));
            for comp in 0..d {
                let deriv = (hi[comp] - lo[comp]).to_f64_lossy() * 0.5;
                jac[comp * d + ax] = deriv + if comp == ax { 1.0 } else { 0.0 };
            }
        }
        total += 1;
        if det(&jac, d) <= 0.0 {
            folded += 1;
        }
    }
    Ok(folded as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid2(h: usize, w: usize) -> Grid {
        Grid::new(vec![h, w]).unwrap()
    }

    fn ramp(grid: &Grid) -> Volume<f64> {
        Volume::from_fn(grid.clone(), |c| c[0] as f64)
    }

    #[test]
    fn zero_field_is_exact_identity() {
        let g = grid2(6, 5);
        let v = Volume::from_fn(g.clone(), |c| ((c[0] * 7 + c[1] * 3) as f64).sin());
        let z = DisplacementField::zeros(g.clone());
        assert_eq!(warp_volume(&v, &z, Interpolation::Linear).unwrap(), v);
        assert_eq!(warp_volume(&v, &z, Interpolation::Nearest).unwrap(), v);
        let l = LabelMap::new(g.clone(), (0..30).map(|i| i % 4).collect()).unwrap();
        assert_eq!(warp_labels(&l, &z).unwrap(), l);
    }

    #[test]
    fn unit_shift_matches_direct_indexing() {
        let g = grid2(5, 6);
        let v = Volume::from_fn(g.clone(), |c| (c[0] * 10 + c[1]) as f64);
        let u = DisplacementField::constant(g.clone(), &[1.0, 0.0]).unwrap();
        let w = warp_volume(&v, &u, Interpolation::Linear).unwrap();
        for y in 0..5 {
            for x in 0..6 {
                let src = (y + 1).min(4);
                assert_eq!(w.data()[y * 6 + x], (src * 10 + x) as f64);
            }
        }
    }

    #[test]
    fn half_voxel_shift_is_exact_on_ramp() {
        let g = grid2(8, 8);
        let u = DisplacementField::constant(g.clone(), &[0.5, 0.0]).unwrap();
        let w = warp_volume(&ramp(&g), &u, Interpolation::Linear).unwrap();
        for y in 0..7 {
            for x in 0..8 {
                assert!((w.data()[y * 8 + x] - (y as f64 + 0.5)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn compose_identity_and_constants() {
        let g = grid2(7, 7);
        let u = DisplacementField::from_fn(g.clone(), |c| vec![(c[1] as f64 * 0.3).sin(), 0.2 * c[0] as f64 - 0.5]);
        let z = DisplacementField::zeros(g.clone());
        assert_eq!(compose(&z, &u).unwrap(), u);
        assert_eq!(compose(&u, &z).unwrap(), u);
        let a = DisplacementField::constant(g.clone(), &[1.0, -0.5]).unwrap();
        let b = DisplacementField::constant(g.clone(), &[0.25, 1.0]).unwrap();
        let ab = compose(&a, &b).unwrap();
        for i in 0..g.numel() {
            assert!((ab.vector(i)[0] - 1.25f64).abs() < 1e-12);
            assert!((ab.vector(i)[1] - 0.5f64).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_constant_and_linear_fields() {
        let c = grid2(8, 8);
        let f = grid2(16, 16);
        let u = upsample_field(&DisplacementField::constant(c.clone(), &[1.0, 1.0]).unwrap(), &f).unwrap();
        assert!(u.data().iter().all(|&v| v == 2.0));
        let z = upsample_field(&DisplacementField::<f64>::zeros(c.clone()), &f).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let lin = DisplacementField::from_fn(c, |p| vec![p[0] as f64 / 8.0, 0.0]);
        let up = upsample_field(&lin, &f).unwrap();
        for y in 1..15 {
            for x in 0..16 {
                // fine voxel y sits at coarse (y - 0.5)/2; vectors double
                let expect = 2.0 * ((y as f64 - 0.5) / 2.0) / 8.0;
                assert!((up.vector(y * 16 + x)[0] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn affine_fields() {
        let g = grid2(3, 3);
        let z = affine_to_field(&AffineTransform::<f64>::identity(2), &g).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let t = AffineTransform::new(vec![1.0, 0.0, 0.0, 1.0], vec![2.0, -1.0]).unwrap();
        let f = affine_to_field(&t, &g).unwrap();
        for i in 0..9 {
            assert_eq!(f.vector(i), &[2.0, -1.0]);
        }
        // 90 degree rotation about the centre voxel (1,1)
        let rot = AffineTransform::new(vec![0.0, -1.0, 1.0, 0.0], vec![0.0, 0.0]).unwrap();
        let f = affine_to_field(&rot, &g).unwrap();
        for i in 0..9 {
            let p = g.coords(i);
            let (y, x) = (p[0] as f64 - 1.0, p[1] as f64 - 1.0);
            let target = [-x + 1.0, y + 1.0];
            assert_eq!(f.vector(i), &[target[0] - p[0] as f64, target[1] - p[1] as f64]);
        }
        assert_eq!(f.vector(0), &[2.0, 0.0]);
        let singular = AffineTransform::new(vec![1.0, 2.0, 2.0, 4.0], vec![0.0, 0.0]).unwrap();
        assert!(affine_to_field(&singular, &g).is_err());
    }

    #[test]
    fn folding_fraction() {
        let g = grid2(6, 7);
        assert_eq!(jacobian_nonpositive_fraction(&DisplacementField::<f64>::zeros(g.clone())).unwrap(), 0.0);
        let flip = DisplacementField::from_fn(g.clone(), |p| vec![-2.0 * p[0] as f64, 0.0]);
        assert_eq!(jacobian_nonpositive_fraction(&flip).unwrap(), 1.0);
        let a = AffineTransform::new(vec![1.2, 0.3, -0.1, 0.8], vec![0.5, 1.0]).unwrap();
        assert_eq!(jacobian_nonpositive_fraction(&affine_to_field(&a, &g).unwrap()).unwrap(), 0.0);
        assert!(jacobian_nonpositive_fraction(&DisplacementField::<f64>::zeros(grid2(2, 5))).is_err());
    }
}
