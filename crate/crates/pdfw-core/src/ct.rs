//! Desk-scale 2D parallel-beam CT testbed: image grid, scan geometry,
//! ellipse phantoms, an exact-intersection-length projector, and noisy data
//! simulation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linop::LinOp;

/// A 2D image with its geometry: `values[iy·nx + ix]` (row-major) is the
/// pixel whose center sits at `((ix+0.5−nx/2)·spacing, (iy+0.5−ny/2)·spacing)`,
/// so the grid is centered on the origin.
#[derive(Debug, Clone)]
pub struct ImageGrid {
    pub nx: usize,
    pub ny: usize,
    pub spacing: f64,
    pub values: Vec<f64>,
}

impl ImageGrid {
    pub fn new(nx: usize, ny: usize, spacing: f64, values: Vec<f64>) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::invalid("grid", "nx and ny must be positive"));
        }
        if !(spacing > 0.0) {
            return Err(Error::invalid("spacing", "must be positive"));
        }
        if values.len() != nx * ny {
            return Err(Error::dim("image values", nx * ny, values.len()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("image values", "entries must be finite"));
        }
        Ok(Self {
            nx,
            ny,
            spacing,
            values,
        })
    }

    pub fn zeros(nx: usize, ny: usize, spacing: f64) -> Result<Self> {
        Self::new(nx, ny, spacing, vec![0.0; nx * ny])
    }

    pub fn n(&self) -> usize {
        self.nx * self.ny
    }
}

/// Parallel-beam acquisition: one ray per (view, detector) pair. Detector `d`
/// of a view at angle `θ` has signed offset `s = (d − (num_detectors−1)/2)·detector_spacing`
/// along the normal `(cos θ, sin θ)` and travels along `(−sin θ, cos θ)`.
#[derive(Debug, Clone)]
pub struct ScanGeometry {
    angles: Vec<f64>,
    num_detectors: usize,
    detector_spacing: f64,
}

impl ScanGeometry {
    pub fn new(angles: Vec<f64>, num_detectors: usize, detector_spacing: f64) -> Result<Self> {
        if angles.is_empty() {
            return Err(Error::invalid("angles", "need at least one view"));
        }
        for (i, &a) in angles.iter().enumerate() {
            if !a.is_finite() || !(0.0..std::f64::consts::PI).contains(&a) {
                return Err(Error::invalid(
                    "angles",
                    format!("angle {i} ({a}) must lie in [0, \u{3c0})"),
                ));
            }
            if i > 0 && a <= angles[i - 1] {
                return Err(Error::invalid("angles", "must be strictly ascending"));
            }
        }
        if num_detectors == 0 {
            return Err(Error::invalid("num_detectors", "must be positive"));
        }
        if !(detector_spacing > 0.0) {
            return Err(Error::invalid("detector_spacing", "must be positive"));
        }
        Ok(Self {
            angles,
            num_detectors,
            detector_spacing,
        })
    }

    /// `num_views` angles uniformly covering `[0, π)`: view `v` at `v·π/num_views`.
    pub fn uniform(num_views: usize, num_detectors: usize, detector_spacing: f64) -> Result<Self> {
        let angles = (0..num_views)
            .map(|v| v as f64 * std::f64::consts::PI / num_views as f64)
            .collect();
        Self::new(angles, num_detectors, detector_spacing)
    }

    pub fn num_views(&self) -> usize {
        self.angles.len()
    }

    pub fn num_detectors(&self) -> usize {
        self.num_detectors
    }

    pub fn detector_spacing(&self) -> f64 {
        self.detector_spacing
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    /// Total measurement count `m = num_views · num_detectors`.
    pub fn m(&self) -> usize {
        self.angles.len() * self.num_detectors
    }
}

/// Measurements on a [`ScanGeometry`]: line integrals `b` and the diagonal
/// statistical weights `w` (all strictly positive), both of length `m` in
/// view-major order (`r = view·num_detectors + detector`).
#[derive(Debug, Clone)]
pub struct SinogramData {
    pub geometry: ScanGeometry,
    pub b: Vec<f64>,
    pub w: Vec<f64>,
}

impl SinogramData {
    pub fn new(geometry: ScanGeometry, b: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        let m = geometry.m();
        if b.len() != m {
            return Err(Error::dim("sinogram b", m, b.len()));
        }
        if w.len() != m {
            return Err(Error::dim("sinogram w", m, w.len()));
        }
        if w.iter().any(|&wi| !(wi > 0.0) || !wi.is_finite()) {
            return Err(Error::invalid("w", "weights must be strictly positive"));
        }
        Ok(Self { geometry, b, w })
    }

    pub fn m(&self) -> usize {
        self.b.len()
    }
}

/// An additive ellipse: pixels whose center falls inside gain `intensity`.
/// Geometry is in the same physical units as [`ImageGrid`] coordinates;
/// `rotation` is in radians, counterclockwise.
#[derive(Debug, Clone, Copy)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub rotation: f64,
    pub intensity: f64,
}

impl Ellipse {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let ux = px - self.center.0;
        let uy = py - self.center.1;
        let (sin_r, cos_r) = self.rotation.sin_cos();
        let rx = ux * cos_r + uy * sin_r;
        let ry = -ux * sin_r + uy * cos_r;
        let (a, b) = self.semi_axes;
        (rx / a).powi(2) + (ry / b).powi(2) <= 1.0
    }
}

/// Rasterizes a sum of ellipses onto an `nx × ny` grid: each pixel takes the
/// summed intensity of the ellipses containing its center.
pub fn make_phantom(nx: usize, ny: usize, spacing: f64, ellipses: &[Ellipse]) -> Result<ImageGrid> {
    if nx < 8 || ny < 8 {
        return Err(Error::invalid("grid", "phantom grids must be at least 8x8"));
    }
    for (i, e) in ellipses.iter().enumerate() {
        if !(e.semi_axes.0 > 0.0) || !(e.semi_axes.1 > 0.0) {
            return Err(Error::invalid(
                "ellipses",
                format!("ellipse {i} has a non-positive semi-axis"),
            ));
        }
    }
    let mut grid = ImageGrid::zeros(nx, ny, spacing)?;
    for iy in 0..ny {
        let py = (iy as f64 + 0.5 - ny as f64 / 2.0) * spacing;
        for ix in 0..nx {
            let px = (ix as f64 + 0.5 - nx as f64 / 2.0) * spacing;
            let v: f64 = ellipses
                .iter()
                .filter(|e| e.contains(px, py))
                .map(|e| e.intensity)
                .sum();
            grid.values[iy * nx + ix] = v;
        }
    }
    Ok(grid)
}

/// Parallel-beam projector with exact ray/pixel intersection lengths.
///
/// Forward application integrates the image along each ray (entry `r` of the
/// output is the length-weighted pixel sum for ray `r`); the adjoint scatters
/// by the same lengths, so it is the exact transpose by construction. Rays
/// that miss the grid contribute zeros. Pixel cells are half-open boxes
/// `[lo, hi)` on both axes, which makes gridline-riding rays deterministic.
#[derive(Debug, Clone)]
pub struct Projector {
    nx: usize,
    ny: usize,
    spacing: f64,
    geometry: ScanGeometry,
}

impl Projector {
    pub fn new(nx: usize, ny: usize, spacing: f64, geometry: ScanGeometry) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::invalid("grid", "nx and ny must be positive"));
        }
        if !(spacing > 0.0) {
            return Err(Error::invalid("spacing", "must be positive"));
        }
        Ok(Self {
            nx,
            ny,
            spacing,
            geometry,
        })
    }

    pub fn for_image(image: &ImageGrid, geometry: ScanGeometry) -> Result<Self> {
        Self::new(image.nx, image.ny, image.spacing, geometry)
    }

    pub fn geometry(&self) -> &ScanGeometry {
        &self.geometry
    }

    /// `A · image`, validating that the image matches this projector's grid.
    pub fn project(&self, image: &ImageGrid) -> Result<Vec<f64>> {
        if (image.nx, image.ny) != (self.nx, self.ny) {
            return Err(Error::invalid(
                "image",
                format!(
                    "grid {}x{} does not match projector grid {}x{}",
                    image.nx, image.ny, self.nx, self.ny
                ),
            ));
        }
        crate::linop::apply_forward(self, &image.values)
    }

    /// `Aᵀ · sino_values`.
    pub fn backproject(&self, sino_values: &[f64]) -> Result<Vec<f64>> {
        crate::linop::apply_adjoint(self, sino_values)
    }

    /// Walks ray `(view, det)` through the grid, calling `f(pixel, length)`
    /// for every cell with positive intersection length, in traversal order.
    fn visit_ray(&self, view: usize, det: usize, f: &mut dyn FnMut(usize, f64)) {
        let (sin_t, cos_t) = self.geometry.angles[view].sin_cos();
        let s = (det as f64 - 0.5 * (self.geometry.num_detectors as f64 - 1.0))
            * self.geometry.detector_spacing;
        let ox = s * cos_t;
        let oy = s * sin_t;
        let dir = [-sin_t, cos_t];
        let origin = [ox, oy];
        let half = [
            0.5 * self.nx as f64 * self.spacing,
            0.5 * self.ny as f64 * self.spacing,
        ];

        // Clip the ray parameter to the grid slab on each axis.
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for axis in 0..2 {
            if dir[axis] == 0.0 {
                if origin[axis] < -half[axis] || origin[axis] >= half[axis] {
                    return;
                }
            } else {
                let ta = (-half[axis] - origin[axis]) / dir[axis];
                let tb = (half[axis] - origin[axis]) / dir[axis];
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        if !(t0 < t1) {
            return;
        }

        let h = self.spacing;
        let dims = [self.nx as i64, self.ny as i64];
        let entry = [ox + t0 * dir[0], oy + t0 * dir[1]];
        let mut idx = [0i64; 2];
        let mut step = [0i64; 2];
        let mut t_next = [f64::INFINITY; 2];
        for axis in 0..2 {
            idx[axis] = (((entry[axis] + half[axis]) / h).floor() as i64).clamp(0, dims[axis] - 1);
            if dir[axis] > 0.0 {
                step[axis] = 1;
                let edge = -half[axis] + (idx[axis] + 1) as f64 * h;
                t_next[axis] = (edge - origin[axis]) / dir[axis];
            } else if dir[axis] < 0.0 {
                step[axis] = -1;
                let edge = -half[axis] + idx[axis] as f64 * h;
                t_next[axis] = (edge - origin[axis]) / dir[axis];
            }
        }

        let mut t = t0;
        loop {
            let t_cell = t_next[0].min(t_next[1]).min(t1);
            if t_cell > t {
                f((idx[1] * dims[0] + idx[0]) as usize, t_cell - t);
            }
            if t_cell >= t1 {
                return;
            }
            t = t_cell;
            let axis = if t_next[0] <= t_next[1] { 0 } else { 1 };
            idx[axis] += step[axis];
            if idx[axis] < 0 || idx[axis] >= dims[axis] {
                return;
            }
            let lead = if step[axis] > 0 { idx[axis] + 1 } else { idx[axis] };
            let edge = -half[axis] + lead as f64 * h;
            t_next[axis] = (edge - origin[axis]) / dir[axis];
        }
    }
}

impl LinOp for Projector {
    fn domain_len(&self) -> usize {
        self.nx * self.ny
    }

    fn range_len(&self) -> usize {
        self.geometry.m()
    }

    fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        let nd = self.geometry.num_detectors;
        for view in 0..self.geometry.num_views() {
            for det in 0..nd {
                let mut acc = 0.0;
                self.visit_ray(view, det, &mut |pixel, len| acc += len * x[pixel]);
                out[view * nd + det] = acc;
            }
        }
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        let nd = self.geometry.num_detectors;
        for view in 0..self.geometry.num_views() {
            for det in 0..nd {
                let y_r = y[view * nd + det];
                if y_r != 0.0 {
                    self.visit_ray(view, det, &mut |pixel, len| out[pixel] += len * y_r);
                }
            }
        }
    }
}

/// Statistical weighting rule for simulated data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// `w ≡ 1`.
    Uniform,
    /// `w_i = 1/max(noise_std², 1e-12)`.
    InverseVariance,
}

/// Projects the phantom and adds seeded Gaussian noise of standard deviation
/// `noise_std`, then attaches weights per the chosen rule. Deterministic for
/// a fixed seed.
pub fn simulate_data(
    phantom: &ImageGrid,
    geometry: &ScanGeometry,
    noise_std: f64,
    seed: u64,
    weighting: Weighting,
) -> Result<SinogramData> {
    if !(noise_std >= 0.0) {
        return Err(Error::invalid("noise_std", "must be nonnegative"));
    }
    let projector = Projector::for_image(phantom, geometry.clone())?;
    let mut b = projector.project(phantom)?;
    if noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for bi in b.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *bi += noise_std * g;
        }
    }
    let m = geometry.m();
    let w = match weighting {
        Weighting::Uniform => vec![1.0; m],
        Weighting::InverseVariance => vec![1.0 / noise_std.powi(2).max(1e-12); m],
    };
    SinogramData::new(geometry.clone(), b, w)
}
