//! Synthetic registration pairs: textured ellipses under a known
//! affine-plus-smooth deformation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Real;
use crate::volume::{AffineTransform, DisplacementField, LabelMap, Volume};
use crate::warp::{affine_to_field, compose, warp_labels, warp_volume, Interpolation};

/// Name of the pseudo-random generator behind every seeded draw.
pub const RNG_ALGORITHM: &str = "chacha8";

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub spatial_shape: Vec<usize>,
    pub num_shapes: usize,
    /// Texture period range in voxels.
    pub texture_period: (f64, f64),
    pub texture_amplitude: f64,
    pub noise_std: f64,
    pub max_rotation_deg: f64,
    pub max_log_scale: f64,
    pub max_shear: f64,
    pub max_translation: f64,
    /// Peak magnitude of the smooth non-rigid component, in voxels.
    pub warp_amplitude: f64,
    /// Gaussian kernel width of the non-rigid component, in voxels.
    pub warp_smoothness: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            spatial_shape: vec![64, 64],
            num_shapes: 4,
            texture_period: (2.0, 6.0),
            texture_amplitude: 0.15,
            noise_std: 0.02,
            max_rotation_deg: 10.0,
            max_log_scale: 0.1,
            max_shear: 0.05,
            max_translation: 3.0,
            warp_amplitude: 4.0,
            warp_smoothness: 8.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let rank = self.spatial_shape.len();
        if !(2..=3).contains(&rank) {
            return Err(Error::invalid(format!("spatial_shape {:?} must have 2 or 3 axes", self.spatial_shape)));
        }
        if self.spatial_shape.iter().any(|&e| e < 8) {
            return Err(Error::invalid(format!("spatial_shape {:?} must be at least 8 per axis", self.spatial_shape)));
        }
        if self.num_shapes == 0 || self.num_shapes > 64 {
            return Err(Error::invalid(format!("num_shapes {} must be in 1..=64", self.num_shapes)));
        }
        let (lo, hi) = self.texture_period;
        if !(lo >= 2.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::invalid(format!("texture_period ({lo}, {hi}) must satisfy 2 <= low <= high")));
        }
        let amplitudes = [
            ("texture_amplitude", self.texture_amplitude),
            ("noise_std", self.noise_std),
            ("max_rotation_deg", self.max_rotation_deg),
            ("max_log_scale", self.max_log_scale),
            ("max_shear", self.max_shear),
            ("max_translation", self.max_translation),
            ("warp_amplitude", self.warp_amplitude),
        ];
        for (name, v) in amplitudes {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} = {v} must be non-negative")));
            }
        }
        if self.max_rotation_deg > 45.0 || self.max_shear >= 0.5 || self.max_log_scale >= 0.5 {
            return Err(Error::invalid("affine magnitudes must stay small (rotation <= 45 deg, shear and log-scale < 0.5)"));
        }
        if !(self.warp_smoothness > 0.0 && self.warp_smoothness.is_finite()) {
            return Err(Error::invalid(format!("warp_smoothness = {} must be positive", self.warp_smoothness)));
        }
        Ok(())
    }

    /// Checks the shape is large enough for a pyramid of `depth` levels.
    pub fn validate_for_depth(&self, depth: usize) -> Result<()> {
        self.validate()?;
        let min = 1usize << depth.saturating_sub(1);
        if self.spatial_shape.iter().any(|&e| e < min) {
            return Err(Error::invalid(format!("spatial_shape {:?} too small for depth {depth}", self.spatial_shape)));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.spatial_shape.clone())
    }

    /// `key = value` lines describing the generator.
    pub fn manifest(&self) -> String {
        let shape: Vec<String> = self.spatial_shape.iter().map(|e| e.to_string()).collect();
        format!(
            "rng = {RNG_ALGORITHM}\nseed = {}\nspatial_shape = {}\nnum_shapes = {}\ntexture_period = {} {}\n\
             texture_amplitude = {}\nnoise_std = {}\nmax_rotation_deg = {}\nmax_log_scale = {}\nmax_shear = {}\n\
             max_translation = {}\nwarp_amplitude = {}\nwarp_smoothness = {}\n",
            self.seed,
            shape.join("x"),
            self.num_shapes,
            self.texture_period.0,
            self.texture_period.1,
            self.texture_amplitude,
            self.noise_std,
            self.max_rotation_deg,
            self.max_log_scale,
            self.max_shear,
            self.max_translation,
            self.warp_amplitude,
            self.warp_smoothness,
        )
    }
}

/// `warp(moving, truth_field) ≈ fixed`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair<T> {
    pub fixed: Volume<T>,
    pub moving: Volume<T>,
    pub truth_field: DisplacementField<T>,
    pub fixed_labels: LabelMap,
    pub moving_labels: LabelMap,
    /// The affine component of `truth_field`.
    pub affine: AffineTransform<T>,
}

struct Shape {
    centre: Vec<f64>,
    /// Orthonormal axes (rows) and the semi-axis length along each.
    axes: Vec<Vec<f64>>,
    radii: Vec<f64>,
    intensity: f64,
    wave: Vec<f64>,
    phase: f64,
}

impl Shape {
    fn contains(&self, p: &[f64]) -> bool {
        let mut s = 0.0;
        for (axis, r) in self.axes.iter().zip(&self.radii) {
            let t: f64 = axis.iter().zip(p).zip(&self.centre).map(|((a, x), c)| a * (x - c)).sum();
            s += (t / r).powi(2);
        }
        s <= 1.0
    }

    fn texture(&self, p: &[f64]) -> f64 {
        (self.wave.iter().zip(p).map(|(k, x)| k * x).sum::<f64>() + self.phase).cos()
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random orthonormal frame (rows).
fn random_frame(rng: &mut ChaCha8Rng, d: usize) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::new();
    while frame.len() < d {
        let mut v = unit_vector(rng, d);
        for u in &frame {
            let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(x, a)| *x -= dot * a);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            frame.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    frame
}

fn draw_shapes(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let d = cfg.spatial_shape.len();
    let min_extent = *cfg.spatial_shape.iter().min().expect("rank >= 2") as f64;
    let k = cfg.num_shapes;
    let mut levels: Vec<f64> = (0..k).map(|i| 0.3 + 0.6 * (i as f64 + 0.5) / k as f64).collect();
    levels.shuffle(rng);
    let mut shapes: Vec<Shape> = Vec::with_capacity(k);
    for intensity in levels {
        let radii: Vec<f64> = (0..d).map(|_| rng.random_range(0.14..0.22) * min_extent).collect();
        let reach = radii.iter().cloned().fold(0.0, f64::max);
        // keep centres apart so no shape is mostly hidden
        let mut centre = Vec::new();
        for _ in 0..100 {
            centre = cfg.spatial_shape.iter().map(|&e| rng.random_range(0.25..0.75) * (e as f64 - 1.0)).collect();
            let clear = shapes.iter().all(|s| {
                let dist = s.centre.iter().zip(&centre).map(|(a, b): (&f64, &f64)| (a - b).powi(2)).sum::<f64>().sqrt();
                dist >= 0.7 * (reach + s.radii.iter().cloned().fold(0.0, f64::max))
            });
            if clear {
                break;
            }
        }
        let period = rng.random_range(cfg.texture_period.0..=cfg.texture_period.1);
        let dir = unit_vector(rng, d);
        let wave = dir.into_iter().map(|x| x * std::f64::consts::TAU / period).collect();
        let axes = random_frame(rng, d);
        shapes.push(Shape { centre, axes, radii, intensity, wave, phase: rng.random_range(0.0..std::f64::consts::TAU) });
    }
    // larger shapes first so smaller ones stay visible on top
    let volume = |s: &Shape| s.radii.iter().product::<f64>();
    shapes.sort_by(|a, b| volume(b).total_cmp(&volume(a)));
    shapes
}

/// Image, labels, and the full (unoccluded) voxel count of every shape.
fn render(cfg: &SynthConfig, grid: &Grid, shapes: &[Shape], rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u32>, Vec<usize>) {
    let mut image = Vec::with_capacity(grid.numel());
    let mut labels = Vec::with_capacity(grid.numel());
    let mut areas = vec![0; shapes.len()];
    for i in 0..grid.numel() {
        let p: Vec<f64> = grid.coords(i).into_iter().map(|c| c as f64).collect();
        for (a, s) in areas.iter_mut().zip(shapes) {
            *a += s.contains(&p) as usize;
        }
        let hit = shapes.iter().enumerate().rev().find(|(_, s)| s.contains(&p));
        let noise: f64 = StandardNormal.sample(rng);
        let (v, l) = match hit {
            Some((k, s)) => (s.intensity + cfg.texture_amplitude * s.texture(&p), k as u32 + 1),
            None => (0.0, 0),
        };
        image.push(v + cfg.noise_std * noise);
        labels.push(l);
    }
    (image, labels, areas)
}

fn random_affine(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> AffineTransform<f64> {
    let d = cfg.spatial_shape.len();
    let mut sym = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let angle = sym(cfg.max_rotation_deg).to_radians();
    let scales: Vec<f64> = (0..d).map(|_| sym(cfg.max_log_scale).exp()).collect();
    let mut shear = vec![0.0; d * d];
    for i in 0..d {
        shear[i * d + i] = 1.0;
        for j in i + 1..d {
            shear[i * d + j] = sym(cfg.max_shear);
        }
    }
    let translation: Vec<f64> = (0..d).map(|_| sym(cfg.max_translation)).collect();
    let rot = if d == 2 {
        let (s, c) = angle.sin_cos();
        vec![c, -s, s, c]
    } else {
        // Rodrigues rotation about a random axis
        let k = unit_vector(rng, 3);
        let (s, c) = angle.sin_cos();
        let mut r = vec![0.0; 9];
        let cross = [[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]];
        for i in 0..3 {
            for j in 0..3 {
                let eye = if i == j { 1.0 } else { 0.0 };
                r[i * 3 + j] = c * eye + s * cross[i][j] + (1.0 - c) * k[i] * k[j];
            }
        }
        r
    };
    // M = R · diag(scales) · shear
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            m[i * d + j] = (0..d).map(|k| rot[i * d + k] * scales[k] * shear[k * d + j]).sum();
        }
    }
    AffineTransform { matrix: m, translation }
}

/// Separable Gaussian blur of a scalar map, edges replicated.
fn gaussian_blur(grid: &Grid, data: &mut [f64], sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let mut line = Vec::new();
    for ax in 0..grid.rank() {
        let n = grid.extents()[ax];
        let stride = grid.strides()[ax];
        for start in 0..grid.numel() {
            if (start / stride) % n != 0 {
                continue;
            }
            line.clear();
            line.extend((0..n).map(|i| data[start + i * stride]));
            for i in 0..n {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let j = (i as isize + k as isize - radius).clamp(0, n as isize - 1) as usize;
                    acc += w * line[j];
                }
                data[start + i * stride] = acc / norm;
            }
        }
    }
}

/// Gaussian-smoothed white noise rescaled to peak magnitude `amplitude`.
fn smooth_field(cfg: &SynthConfig, grid: &Grid, rng: &mut ChaCha8Rng) -> DisplacementField<f64> {
    let d = grid.rank();
    let n = grid.numel();
    let mut comps: Vec<Vec<f64>> = (0..d).map(|_| (0..n).map(|_| StandardNormal.sample(rng)).collect()).collect();
    for c in &mut comps {
        gaussian_blur(grid, c, cfg.warp_smoothness);
    }
    let peak = (0..n).map(|i| comps.iter().map(|c| c[i] * c[i]).sum::<f64>().sqrt()).fold(0.0, f64::max);
    let k = if peak > 0.0 { cfg.warp_amplitude / peak } else { 0.0 };
    let data = (0..n).flat_map(|i| comps.iter().map(move |c| c[i] * k).collect::<Vec<_>>()).collect();
    DisplacementField::new(grid.clone(), data).expect("finite by construction")
}

fn label_counts(labels: &[u32], k: usize) -> Vec<usize> {
    let mut counts = vec![0; k + 1];
    for &l in labels {
        counts[l as usize] += 1;
    }
    counts
}

/// Accepted band for the mean displacement magnitude, as multiples of
/// the non-rigid amplitude.
pub const MAGNITUDE_BAND: (f64, f64) = (0.2, 1.2);

/// Affine-then-smooth deformation, redrawn until its mean magnitude lies in
/// [`MAGNITUDE_BAND`] (only when the non-rigid amplitude is positive).
fn deformation(cfg: &SynthConfig, grid: &Grid, rng: &mut ChaCha8Rng) -> Result<(AffineTransform<f64>, DisplacementField<f64>)> {
    let (lo, hi) = (MAGNITUDE_BAND.0 * cfg.warp_amplitude, MAGNITUDE_BAND.1 * cfg.warp_amplitude);
    let mut last = None;
    for _ in 0..256 {
        let affine = random_affine(cfg, rng);
        let smooth = smooth_field(cfg, grid, rng);
        let g = compose(&affine_to_field(&affine, grid)?, &smooth)?;
        let m = g.mean_magnitude();
        if cfg.warp_amplitude == 0.0 || (lo..=hi).contains(&m) {
            return Ok((affine, g));
        }
        last = Some(m);
    }
    Err(Error::invalid(format!(
        "affine bounds too large for warp_amplitude {} (mean magnitude {:?} outside [{lo}, {hi}])",
        cfg.warp_amplitude, last
    )))
}

/// Deterministic pair for `cfg` (a pure function of the config and seed).
pub fn synth_pair<T: Real>(cfg: &SynthConfig) -> Result<SynthPair<T>> {
    cfg.validate()?;
    let grid = cfg.grid()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..64 {
        let shapes = draw_shapes(cfg, &mut rng);
        let (image, labels, areas) = render(cfg, &grid, &shapes, &mut rng);
        // every label keeps most of its own area, in both images
        let visible = |l: &LabelMap| {
            let counts = label_counts(l.data(), cfg.num_shapes);
            counts[0] > 0 && counts[1..].iter().zip(&areas).all(|(&c, &a)| 3 * c >= 2 * a)
        };
        let (affine, truth) = deformation(cfg, &grid, &mut rng)?;
        let truth = truth.cast::<T>();
        let moving_labels = LabelMap::new(grid.clone(), labels)?;
        let fixed_labels = warp_labels(&moving_labels, &truth)?;
        if !(visible(&moving_labels) && visible(&fixed_labels)) {
            continue;
        }
        let moving = Volume::new(grid.clone(), 1, image.iter().map(|&v| T::lit(v)).collect())?;
        let fixed = warp_volume(&moving, &truth, Interpolation::Linear)?;
        let affine = AffineTransform::new(
            affine.matrix.iter().map(|&v| T::lit(v)).collect(),
            affine.translation.iter().map(|&v| T::lit(v)).collect(),
        )?;
        return Ok(SynthPair { fixed, moving, truth_field: truth, fixed_labels, moving_labels, affine });
    }
    Err(Error::invalid(format!("could not place {} visible shapes on {:?}", cfg.num_shapes, cfg.spatial_shape)))
}

/// Pair `index` of a dataset rooted at `cfg.seed`.
pub fn synth_indexed<T: Real>(cfg: &SynthConfig, index: u64) -> Result<SynthPair<T>> {
    let mut c = cfg.clone();
    c.seed = cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index);
    synth_pair(&c)
}

/// Block-mean pooling by `factor` along every axis.
pub fn downsample<T: Real>(v: &Volume<T>, factor: usize) -> Result<Volume<T>> {
    let grid = v.grid();
    if factor == 0 || grid.extents().iter().any(|&e| e % factor != 0) {
        return Err(Error::shape("downsample", format!("factor {factor} does not divide extents {:?}", grid.extents())));
    }
    let coarse = Grid::new(grid.extents().iter().map(|e| e / factor).collect::<Vec<_>>())?;
    let c = v.channels();
    let mut acc = vec![T::zero(); coarse.numel() * c];
    let mut pc = vec![0; grid.rank()];
    for i in 0..grid.numel() {
        grid.coords_into(i, &mut pc);
        let q: usize = pc.iter().zip(coarse.strides()).map(|(&x, &s)| (x / factor) * s).sum();
        for ch in 0..c {
            acc[q * c + ch] += v.data()[i * c + ch];
        }
    }
    let inv = T::one() / T::from_usize_lossy(factor.pow(grid.rank() as u32));
    Volume::new(coarse, c, acc.into_iter().map(|s| s * inv).collect())
}
