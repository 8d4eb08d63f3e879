//! Pinhole cameras, pose and patch sampling, ray generation and bilinear
//! patch extraction.
//!
//! Camera frame: x right, y down, z forward. A pixel coordinate
//! `(x, y)` maps to the camera-space direction `((x - cx) / f, (y - cy) / f, 1)`.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::error::{invalid, Result};
use crate::image::Image;

pub type Vec3 = Vector3<f64>;

/// Polar-angle nudge applied when the view direction is parallel to `up`.
pub const POLE_PERTURBATION: f64 = 1e-4;

pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Principal point at the image center.
    pub fn new(focal: f64, width: usize, height: usize) -> Result<Self> {
        if !(focal > 0.0) || !focal.is_finite() {
            return Err(invalid(format!("focal length must be positive, got {focal}")));
        }
        if width == 0 || height == 0 {
            return Err(invalid("image size must be non-zero"));
        }
        Ok(Self {
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        })
    }

    /// Every pixel of the image, row-major.
    pub fn pixel_grid(&self) -> Vec<(f64, f64)> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x as f64, y as f64)))
            .collect()
    }
}

/// Camera-to-world rotation (columns: right, down, forward) and camera center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl CameraPose {
    /// Camera at `center` looking at the world origin. `None` when the view
    /// direction is parallel to `up`.
    pub fn look_at_origin(center: Vec3, up: Vec3) -> Option<Self> {
        let dist = center.norm();
        if !(dist > 0.0) {
            return None;
        }
        let forward = -center / dist;
        let right = forward.cross(&up);
        if right.norm() < 1e-9 * up.norm().max(1e-300) {
            return None;
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        Some(Self {
            rotation: Matrix3::from_columns(&[right, down, forward]),
            translation: center,
        })
    }

    /// Pose on the sphere of radius `radius` at azimuth and polar angle
    /// (radians, polar measured from `up`), looking at the origin.
    pub fn orbit(azimuth: f64, polar: f64, radius: f64, up: Vec3) -> Result<Self> {
        if !(radius > 0.0) || !radius.is_finite() || !azimuth.is_finite() || !polar.is_finite() {
            return Err(invalid(format!(
                "invalid orbit pose (azimuth {azimuth}, polar {polar}, radius {radius})"
            )));
        }
        let up = up.normalize();
        let (e1, e2) = tangent_basis(&up);
        let at = |polar: f64| {
            let ring = e1 * azimuth.cos() + e2 * azimuth.sin();
            (ring * polar.sin() + up * polar.cos()) * radius
        };
        if let Some(p) = Self::look_at_origin(at(polar), up) {
            return Ok(p);
        }
        let nudged = if polar < std::f64::consts::FRAC_PI_2 {
            polar + POLE_PERTURBATION
        } else {
            polar - POLE_PERTURBATION
        };
        Self::look_at_origin(at(nudged), up).ok_or_else(|| invalid("degenerate look-at after perturbation"))
    }

    pub fn center(&self) -> Vec3 {
        self.translation
    }

    pub fn forward(&self) -> Vec3 {
        self.rotation.column(2).into_owned()
    }

    /// Pixel coordinates of a world point; `None` behind the camera.
    pub fn project(&self, intr: &Intrinsics, p: &Vec3) -> Option<(f64, f64)> {
        let c = self.rotation.transpose() * (p - self.translation);
        (c.z > 0.0).then(|| (intr.focal * c.x / c.z + intr.cx, intr.focal * c.y / c.z + intr.cy))
    }

    /// `[R | t]` row-major.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_row_major(m: &[f64; 12]) -> Self {
        let rotation = Matrix3::from_fn(|r, c| m[r * 4 + c]);
        let translation = Vec3::new(m[3], m[7], m[11]);
        Self { rotation, translation }
    }
}

fn tangent_basis(up: &Vec3) -> (Vec3, Vec3) {
    let seed = if up.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let e1 = (seed - up * seed.dot(up)).normalize();
    (e1, up.cross(&e1))
}

/// Cameras on a spherical cap (area-uniform) facing the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseDistribution {
    pub azimuth: (f64, f64),
    /// Range of the cosine of the polar angle.
    pub polar_cos: (f64, f64),
    pub radius: (f64, f64),
    pub up: Vec3,
}

impl PoseDistribution {
    pub fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.azimuth) || !ordered(self.polar_cos) || !ordered(self.radius) {
            return Err(invalid("pose ranges must be finite with min <= max"));
        }
        if self.polar_cos.0 < -1.0 || self.polar_cos.1 > 1.0 {
            return Err(invalid("polar cosine range must lie in [-1, 1]"));
        }
        if !(self.radius.0 > 0.0) {
            return Err(invalid("camera radius must be positive"));
        }
        if !(self.up.norm() > 0.0) {
            return Err(invalid("up vector must be non-zero"));
        }
        Ok(())
    }
}

pub fn sample_pose<R: Rng + ?Sized>(rng: &mut R, dist: &PoseDistribution) -> Result<CameraPose> {
    dist.validate()?;
    let azimuth = uniform(rng, dist.azimuth.0, dist.azimuth.1);
    let v = uniform(rng, dist.polar_cos.0, dist.polar_cos.1);
    let radius = uniform(rng, dist.radius.0, dist.radius.1);
    CameraPose::orbit(azimuth, v.clamp(-1.0, 1.0).acos(), radius, dist.up)
}

/// Continuous K×K patch: center `(u, v)` in pixels and scale `s`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchPattern {
    pub center: (f64, f64),
    pub scale: f64,
    pub size: usize,
}

impl PatchPattern {
    /// The whole image at unit scale (requires `width == height == size`
    /// for a square patch; otherwise use [`Intrinsics::pixel_grid`]).
    pub fn full_image(size: usize) -> Self {
        Self {
            center: (size as f64 / 2.0, size as f64 / 2.0),
            scale: 1.0,
            size,
        }
    }
}

/// Largest admissible scale `min(W, H) / K`.
pub fn max_scale(width: usize, height: usize, k: usize) -> f64 {
    width.min(height) as f64 / k as f64
}

fn check_patch_size(width: usize, height: usize, k: usize) -> Result<()> {
    if k == 0 || k % 2 != 0 {
        return Err(invalid(format!("patch size must be even and positive, got {k}")));
    }
    if k > width.min(height) {
        return Err(invalid(format!("patch size {k} exceeds image {width}x{height}")));
    }
    Ok(())
}

/// Valid center interval along one axis of extent `n` for scale `s`.
fn center_range(n: usize, k: usize, s: f64) -> (f64, f64) {
    let half = (k / 2) as f64;
    (s * half, (n - 1) as f64 - s * (half - 1.0))
}

/// Draws `s ~ U[s_lo, S]`, then `u` uniformly from the centers that keep the
/// whole patch inside the image.
pub fn sample_pattern<R: Rng + ?Sized>(
    rng: &mut R,
    width: usize,
    height: usize,
    k: usize,
    s_lo: f64,
) -> Result<PatchPattern> {
    check_patch_size(width, height, k)?;
    let s_max = max_scale(width, height, k);
    let s_lo = s_lo.clamp(1.0, s_max);
    let scale = uniform(rng, s_lo, s_max);
    let (ux_lo, ux_hi) = center_range(width, k, scale);
    let (uy_lo, uy_hi) = center_range(height, k, scale);
    let u = uniform(rng, ux_lo, ux_hi);
    let v = uniform(rng, uy_lo, uy_hi);
    Ok(PatchPattern {
        center: (u, v),
        scale,
        size: k,
    })
}

/// `{(s·x + u, s·y + v)}` for `x, y ∈ {-K/2, …, K/2 - 1}`, y outer, x inner.
pub fn patch_coords(p: &PatchPattern) -> Vec<(f64, f64)> {
    let half = (p.size / 2) as i64;
    let offsets: Vec<f64> = (-half..p.size as i64 - half).map(|i| i as f64).collect();
    let mut out = Vec::with_capacity(p.size * p.size);
    for &y in &offsets {
        for &x in &offsets {
            out.push((p.scale * x + p.center.0, p.scale * y + p.center.1));
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
}

pub fn generate_rays(intr: &Intrinsics, pose: &CameraPose, coords: &[(f64, f64)]) -> Vec<Ray> {
    coords
        .iter()
        .map(|&(x, y)| {
            let cam = Vec3::new((x - intr.cx) / intr.focal, (y - intr.cy) / intr.focal, 1.0);
            Ray {
                origin: pose.translation,
                direction: (pose.rotation * cam).normalize(),
            }
        })
        .collect()
}

/// Bilinear samples of `img` at `coords` (Γ), interleaved RGB per coordinate.
pub fn bilinear_extract(img: &Image, coords: &[(f64, f64)]) -> Result<Vec<f64>> {
    const SLACK: f64 = 1e-9;
    let (w, h) = (img.width, img.height);
    let (max_x, max_y) = ((w - 1) as f64, (h - 1) as f64);
    let mut out = Vec::with_capacity(coords.len() * 3);
    for &(x, y) in coords {
        if !(x >= -SLACK && x <= max_x + SLACK && y >= -SLACK && y <= max_y + SLACK) {
            return Err(invalid(format!("patch coordinate ({x}, {y}) outside {w}x{h} image")));
        }
        let (x, y) = (x.clamp(0.0, max_x), y.clamp(0.0, max_y));
        let x0 = (x.floor() as usize).min(w.saturating_sub(2));
        let y0 = (y.floor() as usize).min(h.saturating_sub(2));
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let (p00, p10, p01, p11) = (
            img.pixel(x0, y0),
            img.pixel(x1, y0),
            img.pixel(x0, y1),
            img.pixel(x1, y1),
        );
        for c in 0..3 {
            let top = p00[c] + fx * (p10[c] - p00[c]);
            let bottom = p01[c] + fx * (p11[c] - p01[c]);
            out.push(top + fy * (bottom - top));
        }
    }
    Ok(out)
}

/// Linear decay of the minimum patch scale from `S` to 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnnealSchedule {
    pub max_scale: f64,
    pub iters: u64,
}

pub fn anneal_scale_lower_bound(iter: u64, schedule: &AnnealSchedule) -> f64 {
    let s = schedule.max_scale;
    if schedule.iters == 0 {
        return 1.0;
    }
    let frac = (iter as f64 / schedule.iters as f64).min(1.0);
    (s - (s - 1.0) * frac).max(1.0)
}
