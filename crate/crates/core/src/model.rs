//! Isotropic 3D Gaussian density models and their differentiable projection.
//!
//! Coordinates are in voxels with the origin at the box center: grid index
//! `i` maps to coordinate `i - n/2` (integer division) along every axis, x
//! varying fastest. A pose rotation `R` maps the model into the viewing frame
//! through `R^T` and the projection integrates along z.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::optics::{CtfGrid, CtfParams};
use crate::scalar::{all_finite, sigmoid, softplus, Real};

/// A single isotropic Gaussian blob.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian<T> {
    pub density: T,
    /// Standard deviation in voxels.
    pub scale: T,
    /// Center in voxels, origin at the box center.
    pub position: [T; 3],
}

impl<T: Real> Gaussian<T> {
    pub fn new(density: T, scale: T, position: [T; 3]) -> Result<Self> {
        let g = Gaussian {
            density,
            scale,
            position,
        };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        if !(self.density.is_finite() && self.scale.is_finite() && all_finite(&self.position)) {
            return Err(Error::input("gaussian parameters must be finite"));
        }
        if self.scale <= T::zero() {
            return Err(Error::input(format!(
                "gaussian scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }

    /// Density contributed at `x`.
    #[inline]
    pub fn eval(&self, x: [T; 3]) -> T {
        let r2 = dist2(x, self.position);
        self.density * (-r2 / (T::lit(2.0) * self.scale * self.scale)).exp()
    }
}

/// A set of Gaussians inside a cubic box.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel<T> {
    gaussians: Vec<Gaussian<T>>,
    box_size: usize,
    pixel_size: T,
}

impl<T: Real> GaussianModel<T> {
    pub fn new(gaussians: Vec<Gaussian<T>>, box_size: usize, pixel_size: T) -> Result<Self> {
        if gaussians.is_empty() {
            return Err(Error::input("a gaussian model needs at least one gaussian"));
        }
        if box_size < 8 {
            return Err(Error::input(format!("box size must be >= 8, got {box_size}")));
        }
        if !(pixel_size > T::zero() && pixel_size.is_finite()) {
            return Err(Error::input("pixel size must be positive"));
        }
        let half = T::lit(box_size as f64 / 2.0);
        for (i, g) in gaussians.iter().enumerate() {
            g.validate()?;
            if g.position.iter().any(|c| c.abs() > half) {
                return Err(Error::input(format!(
                    "gaussian {i} lies outside the box [-{half}, {half}]^3"
                )));
            }
        }
        Ok(Self {
            gaussians,
            box_size,
            pixel_size,
        })
    }

    /// Builds a model without the box-containment check; used for transformed
    /// or deformed intermediates.
    pub(crate) fn unchecked(gaussians: Vec<Gaussian<T>>, box_size: usize, pixel_size: T) -> Self {
        Self {
            gaussians,
            box_size,
            pixel_size,
        }
    }

    pub fn gaussians(&self) -> &[Gaussian<T>] {
        &self.gaussians
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn box_size(&self) -> usize {
        self.box_size
    }

    pub fn pixel_size(&self) -> T {
        self.pixel_size
    }

    pub fn half_box(&self) -> T {
        T::lit(self.box_size as f64 / 2.0)
    }

    pub fn positions(&self) -> Vec<[T; 3]> {
        self.gaussians.iter().map(|g| g.position).collect()
    }

    /// Total density `sum_i d_i exp(-|x - p_i|^2 / (2 s_i^2))` at `x`.
    pub fn eval_density(&self, x: [T; 3]) -> Result<T> {
        if !all_finite(&x) {
            return Err(Error::input("evaluation point must be finite"));
        }
        Ok(self.gaussians.iter().map(|g| g.eval(x)).sum())
    }

    /// Union of two models sharing the same grid geometry.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.box_size != other.box_size || self.pixel_size != other.pixel_size {
            return Err(Error::input("cannot concatenate models with different grids"));
        }
        let mut gaussians = self.gaussians.clone();
        gaussians.extend_from_slice(&other.gaussians);
        Ok(Self::unchecked(gaussians, self.box_size, self.pixel_size))
    }

    pub fn map_scalar<U: Real>(&self) -> GaussianModel<U> {
        let conv = |x: T| U::lit(x.as_f64());
        GaussianModel {
            gaussians: self
                .gaussians
                .iter()
                .map(|g| Gaussian {
                    density: conv(g.density),
                    scale: conv(g.scale),
                    position: g.position.map(conv),
                })
                .collect(),
            box_size: self.box_size,
            pixel_size: conv(self.pixel_size),
        }
    }
}

/// Rigid projection geometry of one particle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose<T> {
    /// Row-major rotation matrix.
    pub rotation: [[T; 3]; 3],
    /// In-plane shift in pixels, applied after projection.
    pub shift: [T; 2],
}

impl<T: Real> Pose<T> {
    pub fn new(rotation: [[T; 3]; 3], shift: [T; 2]) -> Result<Self> {
        let pose = Pose { rotation, shift };
        pose.validate()?;
        Ok(pose)
    }

    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Pose {
            rotation: [[o, z, z], [z, o, z], [z, z, o]],
            shift: [z, z],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        if !r.iter().flatten().all(|x| x.is_finite()) || !all_finite(&self.shift) {
            return Err(Error::input("pose must be finite"));
        }
        let tol = T::lit(1e-6);
        for i in 0..3 {
            for j in 0..3 {
                let dot = (0..3).map(|k| r[k][i] * r[k][j]).sum::<T>();
                let target = if i == j { T::one() } else { T::zero() };
                if (dot - target).abs() > tol {
                    return Err(Error::input("pose rotation is not orthonormal"));
                }
            }
        }
        if (det3(r) - T::one()).abs() > tol {
            return Err(Error::input("pose rotation must have determinant +1"));
        }
        Ok(())
    }

    /// Rotation from a quaternion `(w, x, y, z)`; the quaternion is normalized.
    pub fn from_quaternion(q: [T; 4], shift: [T; 2]) -> Result<Self> {
        let n = q.iter().map(|v| *v * *v).sum::<T>().sqrt();
        if !(n > T::zero() && n.is_finite()) {
            return Err(Error::input("quaternion must be nonzero and finite"));
        }
        let [w, x, y, z] = q.map(|v| v / n);
        let two = T::lit(2.0);
        let o = T::one();
        let rotation = [
            [
                o - two * (y * y + z * z),
                two * (x * y - w * z),
                two * (x * z + w * y),
            ],
            [
                two * (x * y + w * z),
                o - two * (x * x + z * z),
                two * (y * z - w * x),
            ],
            [
                two * (x * z - w * y),
                two * (y * z + w * x),
                o - two * (x * x + y * y),
            ],
        ];
        Pose::new(rotation, shift)
    }

    /// Unit quaternion `(w, x, y, z)` with `w >= 0`.
    pub fn to_quaternion(&self) -> [T; 4] {
        let m = &self.rotation;
        let one = T::one();
        let quarter = T::lit(0.25);
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > T::zero() {
            let s = (trace + one).sqrt() * T::lit(2.0);
            [
                quarter * s,
                (m[2][1] - m[1][2]) / s,
                (m[0][2] - m[2][0]) / s,
                (m[1][0] - m[0][1]) / s,
            ]
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (one + m[0][0] - m[1][1] - m[2][2]).sqrt() * T::lit(2.0);
            [
                (m[2][1] - m[1][2]) / s,
                quarter * s,
                (m[0][1] + m[1][0]) / s,
                (m[0][2] + m[2][0]) / s,
            ]
        } else if m[1][1] > m[2][2] {
            let s = (one + m[1][1] - m[0][0] - m[2][2]).sqrt() * T::lit(2.0);
            [
                (m[0][2] - m[2][0]) / s,
                (m[0][1] + m[1][0]) / s,
                quarter * s,
                (m[1][2] + m[2][1]) / s,
            ]
        } else {
            let s = (one + m[2][2] - m[0][0] - m[1][1]).sqrt() * T::lit(2.0);
            [
                (m[1][0] - m[0][1]) / s,
                (m[0][2] + m[2][0]) / s,
                (m[1][2] + m[2][1]) / s,
                quarter * s,
            ]
        };
        let n = q.iter().map(|v| *v * *v).sum::<T>().sqrt();
        let sign = if q[0] < T::zero() { -one } else { one };
        q.map(|v| sign * v / n)
    }

    /// `R^T p`, the model-to-view mapping.
    #[inline]
    pub fn to_view(&self, p: [T; 3]) -> [T; 3] {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[1][0] * p[1] + r[2][0] * p[2],
            r[0][1] * p[0] + r[1][1] * p[1] + r[2][1] * p[2],
            r[0][2] * p[0] + r[1][2] * p[1] + r[2][2] * p[2],
        ]
    }

    /// `R v`, the view-to-model mapping (and the adjoint of [`Pose::to_view`]).
    #[inline]
    pub fn to_model(&self, v: [T; 3]) -> [T; 3] {
        let r = &self.rotation;
        [
            r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
            r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
            r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
        ]
    }
}

/// A Gaussian after integration along the viewing axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2D<T> {
    pub amplitude: T,
    /// Center in pixels, origin at the image center.
    pub center: [T; 2],
    pub sigma: T,
}

/// Row-major `height x width` image; row index is y, column index is x.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    pub height: usize,
    pub width: usize,
    pub pixel_size: T,
    pub data: Vec<T>,
}

impl<T: Real> Image<T> {
    pub fn zeros(height: usize, width: usize, pixel_size: T) -> Self {
        Image {
            height,
            width,
            pixel_size,
            data: vec![T::zero(); height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, pixel_size: T, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::input(format!(
                "image data has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            pixel_size,
            data,
        })
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn dot(&self, other: &Self) -> T {
        self.data.iter().zip(&other.data).map(|(a, b)| *a * *b).sum()
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn map_scalar<U: Real>(&self) -> Image<U> {
        Image {
            height: self.height,
            width: self.width,
            pixel_size: U::lit(self.pixel_size.as_f64()),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }
}

/// Cubic `size^3` volume, x fastest: `data[(z * size + y) * size + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    pub size: usize,
    pub pixel_size: T,
    pub data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn zeros(size: usize, pixel_size: T) -> Self {
        Volume {
            size,
            pixel_size,
            data: vec![T::zero(); size * size * size],
        }
    }

    pub fn from_vec(size: usize, pixel_size: T, data: Vec<T>) -> Result<Self> {
        if data.len() != size * size * size {
            return Err(Error::input(format!(
                "volume data has {} values, expected {size}^3",
                data.len()
            )));
        }
        Ok(Volume {
            size,
            pixel_size,
            data,
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.size + y) * self.size + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    /// Centered coordinate of grid index `i`.
    #[inline]
    pub fn coord(&self, i: usize) -> T {
        T::lit(i as f64 - (self.size / 2) as f64)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }
}

/// Per-Gaussian parameter changes for one particle.
#[derive(Debug, Clone, PartialEq)]
pub struct Deformation<T> {
    pub delta_density: Vec<T>,
    pub delta_scale: Vec<T>,
    pub delta_position: Vec<[T; 3]>,
}

impl<T: Real> Deformation<T> {
    pub fn zeros(n: usize) -> Self {
        Deformation {
            delta_density: vec![T::zero(); n],
            delta_scale: vec![T::zero(); n],
            delta_position: vec![[T::zero(); 3]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.delta_density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta_density.is_empty()
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.delta_density.len() != n || self.delta_scale.len() != n || self.delta_position.len() != n {
            return Err(Error::input(format!(
                "deformation length does not match model of {n} gaussians"
            )));
        }
        Ok(())
    }

    /// Flattens to `[dd, ds, dpx, dpy, dpz]` per Gaussian.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(5 * self.len());
        for i in 0..self.len() {
            out.push(self.delta_density[i]);
            out.push(self.delta_scale[i]);
            out.extend_from_slice(&self.delta_position[i]);
        }
        out
    }

    pub fn from_flat(flat: &[T]) -> Result<Self> {
        if !flat.len().is_multiple_of(5) {
            return Err(Error::input("flat deformation length must be a multiple of 5"));
        }
        let n = flat.len() / 5;
        let mut d = Deformation::zeros(n);
        for (i, row) in flat.chunks_exact(5).enumerate() {
            d.delta_density[i] = row[0];
            d.delta_scale[i] = row[1];
            d.delta_position[i] = [row[2], row[3], row[4]];
        }
        Ok(d)
    }
}

/// Knobs of the rasterizers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings<T> {
    /// Kernel support radius in units of sigma; `None` evaluates every pixel.
    pub truncation: Option<T>,
    /// Lower bound approached by deformed scales.
    pub scale_floor: T,
    /// Sharpness (1/voxel) of the soft floor on deformed scales.
    pub floor_sharpness: T,
}

impl<T: Real> Default for RenderSettings<T> {
    fn default() -> Self {
        RenderSettings {
            truncation: Some(T::lit(4.0)),
            scale_floor: T::lit(0.1),
            floor_sharpness: T::lit(20.0),
        }
    }
}

impl<T: Real> RenderSettings<T> {
    pub fn untruncated() -> Self {
        RenderSettings {
            truncation: None,
            ..Default::default()
        }
    }

    /// Soft floor `floor + softplus(k (s - floor)) / k` applied to deformed scales.
    #[inline]
    pub fn floored_scale(&self, s: T) -> T {
        let k = self.floor_sharpness;
        self.scale_floor + softplus(k * (s - self.scale_floor)) / k
    }

    #[inline]
    fn floored_scale_grad(&self, s: T) -> T {
        sigmoid(self.floor_sharpness * (s - self.scale_floor))
    }
}

/// Applies a deformation to the consensus model.
pub fn deform<T: Real>(
    model: &GaussianModel<T>,
    deformation: &Deformation<T>,
    settings: &RenderSettings<T>,
) -> Result<GaussianModel<T>> {
    deformation.check(model.len())?;
    let gaussians = model
        .gaussians
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let dp = deformation.delta_position[i];
            Gaussian {
                density: g.density + deformation.delta_density[i],
                scale: settings.floored_scale(g.scale + deformation.delta_scale[i]),
                position: [
                    g.position[0] + dp[0],
                    g.position[1] + dp[1],
                    g.position[2] + dp[2],
                ],
            }
        })
        .collect();
    Ok(GaussianModel::unchecked(gaussians, model.box_size, model.pixel_size))
}

/// Maps every position into the viewing frame (`p -> R^T p`).
pub fn transform_pose<T: Real>(model: &GaussianModel<T>, pose: &Pose<T>) -> GaussianModel<T> {
    let gaussians = model
        .gaussians
        .iter()
        .map(|g| Gaussian {
            position: pose.to_view(g.position),
            ..*g
        })
        .collect();
    GaussianModel::unchecked(gaussians, model.box_size, model.pixel_size)
}

/// Integrates every Gaussian along z.
pub fn project_gaussians<T: Real>(model: &GaussianModel<T>, shift: [T; 2]) -> Vec<Gaussian2D<T>> {
    let root_two_pi = T::lit((2.0 * PI).sqrt());
    model
        .gaussians
        .iter()
        .map(|g| Gaussian2D {
            amplitude: g.density * g.scale * root_two_pi,
            center: [g.position[0] + shift[0], g.position[1] + shift[1]],
            sigma: g.scale,
        })
        .collect()
}

/// Pixel window and separable kernel factors of one 2D Gaussian.
struct Footprint<T> {
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
    /// `(y - cy)` and `exp(-(y - cy)^2 / 2s^2)` per row in `rows`.
    dy: Vec<T>,
    ey: Vec<T>,
    dx: Vec<T>,
    ex: Vec<T>,
    radius2: Option<T>,
}

impl<T: Real> Footprint<T> {
    fn new(center: [T; 2], sigma: T, height: usize, width: usize, truncation: Option<T>) -> Self {
        let inv = T::one() / (T::lit(2.0) * sigma * sigma);
        let radius = truncation.map(|t| t * sigma);
        let axis = |c: T, n: usize| -> (std::ops::Range<usize>, Vec<T>, Vec<T>) {
            let half = T::lit((n / 2) as f64);
            let range = match radius {
                None => 0..n,
                Some(r) => {
                    let lo = (c - r + half).ceil();
                    let hi = (c + r + half).floor();
                    if !(hi >= T::zero()) || lo > T::lit((n - 1) as f64) || lo > hi {
                        0..0
                    } else {
                        let lo = lo.max(T::zero()).as_f64() as usize;
                        let hi = hi.min(T::lit((n - 1) as f64)).as_f64() as usize;
                        lo..hi + 1
                    }
                }
            };
            let d: Vec<T> = range.clone().map(|i| T::lit(i as f64) - half - c).collect();
            let e = d.iter().map(|v| (-*v * *v * inv).exp()).collect();
            (range, d, e)
        };
        let (cols, dx, ex) = axis(center[0], width);
        let (rows, dy, ey) = axis(center[1], height);
        Footprint {
            rows,
            cols,
            dy,
            ey,
            dx,
            ex,
            radius2: radius.map(|r| r * r),
        }
    }

    #[inline]
    fn inside(&self, dx: T, dy: T) -> bool {
        match self.radius2 {
            None => true,
            Some(r2) => dx * dx + dy * dy <= r2,
        }
    }
}

/// Rasterizes 2D Gaussians onto an `height x width` grid.
///
/// Pixel `(r, c)` sits at `(c - width/2, r - height/2)`. Contributions beyond
/// `truncation * sigma` are dropped.
pub fn splat_image<T: Real>(
    g2d: &[Gaussian2D<T>],
    height: usize,
    width: usize,
    truncation: Option<T>,
) -> Image<T> {
    let mut img = Image::zeros(height, width, T::one());
    for g in g2d {
        let fp = Footprint::new(g.center, g.sigma, height, width, truncation);
        for (ri, r) in fp.rows.clone().enumerate() {
            let wy = g.amplitude * fp.ey[ri];
            let row = &mut img.data[r * width..(r + 1) * width];
            for (ci, c) in fp.cols.clone().enumerate() {
                if fp.inside(fp.dx[ci], fp.dy[ri]) {
                    row[c] += wy * fp.ex[ci];
                }
            }
        }
    }
    img
}

fn ctf_grid_for<T: Real>(
    ctf: &CtfParams,
    model: &GaussianModel<T>,
) -> Result<Option<CtfGrid<T>>> {
    if !ctf.enabled {
        return Ok(None);
    }
    let n = model.box_size;
    CtfGrid::new(ctf, n, n, model.pixel_size.as_f64()).map(Some)
}

/// Full forward model: deform, rotate, project, splat and modulate by the CTF.
pub fn render<T: Real>(
    model: &GaussianModel<T>,
    deformation: &Deformation<T>,
    pose: &Pose<T>,
    ctf: &CtfParams,
    settings: &RenderSettings<T>,
) -> Result<Image<T>> {
    let grid = ctf_grid_for(ctf, model)?;
    render_with(model, deformation, pose, grid.as_ref(), settings)
}

/// [`render`] with a precomputed CTF grid (`None` disables the CTF).
pub fn render_with<T: Real>(
    model: &GaussianModel<T>,
    deformation: &Deformation<T>,
    pose: &Pose<T>,
    ctf: Option<&CtfGrid<T>>,
    settings: &RenderSettings<T>,
) -> Result<Image<T>> {
    let deformed = deform(model, deformation, settings)?;
    let viewed = transform_pose(&deformed, pose);
    let g2d = project_gaussians(&viewed, pose.shift);
    let n = model.box_size;
    let mut img = splat_image(&g2d, n, n, settings.truncation);
    img.pixel_size = model.pixel_size;
    match ctf {
        Some(grid) => grid.apply(&img),
        None => Ok(img),
    }
}

/// Rasterizes the deformed model on the `D^3` grid.
pub fn render_volume<T: Real>(
    model: &GaussianModel<T>,
    deformation: &Deformation<T>,
    settings: &RenderSettings<T>,
) -> Result<Volume<T>> {
    let deformed = deform(model, deformation, settings)?;
    let n = model.box_size;
    let mut vol = Volume::zeros(n, model.pixel_size);
    for g in &deformed.gaussians {
        if g.density == T::zero() {
            continue;
        }
        let fp = Footprint::new(
            [g.position[0], g.position[1]],
            g.scale,
            n,
            n,
            settings.truncation,
        );
        let fz = Footprint::new([g.position[2], T::zero()], g.scale, 1, n, settings.truncation);
        for (zi, z) in fz.cols.clone().enumerate() {
            let dz = fz.dx[zi];
            let wz = g.density * fz.ex[zi];
            for (yi, y) in fp.rows.clone().enumerate() {
                let dy = fp.dy[yi];
                let wzy = wz * fp.ey[yi];
                let base = (z * n + y) * n;
                for (xi, x) in fp.cols.clone().enumerate() {
                    let dx = fp.dx[xi];
                    let inside = match fp.radius2 {
                        None => true,
                        Some(r2) => dx * dx + dy * dy + dz * dz <= r2,
                    };
                    if inside {
                        vol.data[base + x] += wzy * fp.ex[xi];
                    }
                }
            }
        }
    }
    Ok(vol)
}

/// Gradient of `sum(upstream * render(...))` with respect to the deformation.
pub fn render_backward<T: Real>(
    model: &GaussianModel<T>,
    deformation: &Deformation<T>,
    pose: &Pose<T>,
    ctf: &CtfParams,
    upstream: &Image<T>,
    settings: &RenderSettings<T>,
) -> Result<Deformation<T>> {
    let grid = ctf_grid_for(ctf, model)?;
    render_backward_with(model, deformation, pose, grid.as_ref(), upstream, settings)
}

/// [`render_backward`] with a precomputed CTF grid.
pub fn render_backward_with<T: Real>(
    model: &GaussianModel<T>,
    deformation: &Deformation<T>,
    pose: &Pose<T>,
    ctf: Option<&CtfGrid<T>>,
    upstream: &Image<T>,
    settings: &RenderSettings<T>,
) -> Result<Deformation<T>> {
    deformation.check(model.len())?;
    let n = model.box_size;
    if upstream.height != n || upstream.width != n {
        return Err(Error::input(format!(
            "upstream gradient is {}x{}, expected {n}x{n}",
            upstream.height, upstream.width
        )));
    }
    // The CTF is a real, symmetric Fourier multiplier and hence self-adjoint.
    let grad_img = match ctf {
        Some(grid) => grid.apply(upstream)?,
        None => upstream.clone(),
    };
    let root_two_pi = T::lit((2.0 * PI).sqrt());
    let mut out = Deformation::zeros(model.len());
    for (i, g) in model.gaussians.iter().enumerate() {
        let raw_scale = g.scale + deformation.delta_scale[i];
        let s = settings.floored_scale(raw_scale);
        let d = g.density + deformation.delta_density[i];
        let dp = deformation.delta_position[i];
        let p = [
            g.position[0] + dp[0],
            g.position[1] + dp[1],
            g.position[2] + dp[2],
        ];
        let q = pose.to_view(p);
        let center = [q[0] + pose.shift[0], q[1] + pose.shift[1]];
        let amp = d * s * root_two_pi;

        let fp = Footprint::new(center, s, n, n, settings.truncation);
        let (mut s0, mut sx, mut sy, mut sr) = (T::zero(), T::zero(), T::zero(), T::zero());
        for (ri, r) in fp.rows.clone().enumerate() {
            let dy = fp.dy[ri];
            let row = &grad_img.data[r * n..(r + 1) * n];
            for (ci, c) in fp.cols.clone().enumerate() {
                let dx = fp.dx[ci];
                if fp.inside(dx, dy) {
                    let w = row[c] * fp.ey[ri] * fp.ex[ci];
                    s0 += w;
                    sx += w * dx;
                    sy += w * dy;
                    sr += w * (dx * dx + dy * dy);
                }
            }
        }
        let s2 = s * s;
        let g_center = [amp * sx / s2, amp * sy / s2];
        let g_sigma = s0 * d * root_two_pi + amp * sr / (s2 * s);
        out.delta_density[i] = s0 * s * root_two_pi;
        out.delta_scale[i] = g_sigma * settings.floored_scale_grad(raw_scale);
        out.delta_position[i] = pose.to_model([g_center[0], g_center[1], T::zero()]);
    }
    Ok(out)
}

#[inline]
pub(crate) fn dist2<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

fn det3<T: Real>(r: &[[T; 3]; 3]) -> T {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}
