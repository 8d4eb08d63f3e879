//! Stratified ray sampling and differentiable alpha composition.

use graf_diffcore::{BindMode, Bindings, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{invalid, Result};
use crate::field::{LatentCodes, RadianceField};
use crate::geometry::{generate_rays, patch_coords, CameraPose, Intrinsics, PatchPattern, Ray};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    pub samples_n: usize,
    /// Scene bounding radius; depths span `‖t‖ ± bound_b`.
    pub bound_b: f64,
    pub background: [f64; 3],
    pub chunk_rays: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            samples_n: 32,
            bound_b: 1.2,
            background: [1.0; 3],
            chunk_rays: 1024,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_n == 0 || self.chunk_rays == 0 {
            return Err(invalid("render.samples_n and render.chunk_rays must be >= 1"));
        }
        if !(self.bound_b > 0.0) {
            return Err(invalid("render.bound_b must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthRange {
    pub near: f64,
    pub far: f64,
}

impl DepthRange {
    pub fn new(near: f64, far: f64) -> Result<Self> {
        if !(near > 0.0 && near < far && far.is_finite()) {
            return Err(invalid(format!(
                "depth range needs 0 < near < far, got [{near}, {far}]"
            )));
        }
        Ok(Self { near, far })
    }

    /// `‖t‖ ∓ b` for a camera looking at the origin.
    pub fn around_origin(pose: &CameraPose, bound: f64) -> Result<Self> {
        let d = pose.center().norm();
        Self::new(d - bound, d + bound)
    }

    pub fn bin_width(&self, n: usize) -> f64 {
        (self.far - self.near) / n as f64
    }
}

/// `t_i = near + (i + u_i)·(far − near)/N` for the given per-bin offsets `u_i ∈ [0, 1)`.
pub fn depths_from_offsets(range: &DepthRange, offsets: &[f64]) -> Vec<f64> {
    let w = range.bin_width(offsets.len());
    offsets
        .iter()
        .enumerate()
        .map(|(i, u)| range.near + (i as f64 + u) * w)
        .collect()
}

/// One uniform draw per equal-width bin.
pub fn stratified_depths<R: Rng + ?Sized>(rng: &mut R, range: &DepthRange, n: usize) -> Vec<f64> {
    let offsets: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    depths_from_offsets(range, &offsets)
}

/// Bin midpoints; used whenever no randomness is wanted (inference).
pub fn midpoint_depths(range: &DepthRange, n: usize) -> Vec<f64> {
    depths_from_offsets(range, &vec![0.5; n])
}

/// Neighbor distances along a unit-direction ray, with `(far − near)/N` for
/// the last sample.
pub fn spacings(depths: &[f64], range: &DepthRange) -> Vec<f64> {
    let n = depths.len();
    let mut out: Vec<f64> = depths.windows(2).map(|w| w[1] - w[0]).collect();
    if n > 0 {
        out.push(range.bin_width(n));
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct Composite {
    /// `[R, 3]`, `Σ T_i α_i c_i`
    pub color: Var,
    /// `[R]`, `Σ T_i α_i`
    pub acc: Var,
    /// `[R, N]`, `T_i`
    pub transmittance: Var,
}

/// Alpha composition of `sigma [R, N]`, `color [R, N, 3]` with spacings `delta [R, N]`.
///
/// `T_i = exp(−Σ_{j<i} σ_j δ_j)`, which equals `∏_{j<i}(1 − α_j)`.
pub fn composite<T: Scalar>(tape: &mut Tape<T>, sigma: Var, color: Var, delta: Var) -> Result<Composite> {
    let shape = tape.shape(sigma).to_vec();
    let [r, n] = shape[..] else {
        return Err(invalid(format!("composite expects sigma [R, N], got {shape:?}")));
    };
    if tape.shape(delta) != [r, n] || tape.shape(color) != [r, n, 3] {
        return Err(invalid(format!(
            "composite shapes disagree: sigma {shape:?}, delta {:?}, color {:?}",
            tape.shape(delta),
            tape.shape(color)
        )));
    }
    if tape.value(sigma).data().iter().any(|&s| !(s >= T::zero())) {
        return Err(invalid("negative or non-finite density"));
    }
    if tape.value(delta).data().iter().any(|&d| !(d > T::zero())) {
        return Err(invalid("non-positive sample spacing"));
    }
    let sd = tape.mul(sigma, delta)?;
    let before = tape.cumsum(sd, 1, true, false)?;
    let neg = tape.neg(before);
    let transmittance = tape.exp(neg);
    let neg_sd = tape.neg(sd);
    let keep = tape.exp(neg_sd);
    let alpha = tape.one_minus(keep);
    let w = tape.mul(transmittance, alpha)?;
    let w3 = tape.reshape(w, &[r, n, 1])?;
    let wc = tape.mul(w3, color)?;
    let c = tape.sum(wc, 1)?;
    let c = tape.reshape(c, &[r, 3])?;
    let acc = tape.sum(w, 1)?;
    let acc = tape.reshape(acc, &[r])?;
    Ok(Composite {
        color: c,
        acc,
        transmittance,
    })
}

/// `c + (1 − acc)·bg` per ray.
pub fn blend_background<T: Scalar>(tape: &mut Tape<T>, comp: &Composite, bg: [f64; 3]) -> Result<Var> {
    let r = tape.shape(comp.acc)[0];
    let acc = tape.reshape(comp.acc, &[r, 1])?;
    let clear = tape.one_minus(acc);
    let bg = tape.constant(Tensor::from_f64(vec![1, 3], &bg)?);
    let fill = tape.mul(clear, bg)?;
    Ok(tape.add(comp.color, fill)?)
}

#[derive(Clone, Copy, Debug)]
pub struct RenderedRays {
    /// `[R, 3]` after background blending.
    pub color: Var,
    /// `[R]`
    pub acc: Var,
}

/// Samples, evaluates and composites a set of rays. With `rng == None`
/// depths are bin midpoints.
#[allow(clippy::too_many_arguments)]
pub fn render_rays<T: Scalar, R: Rng + ?Sized>(
    field: &RadianceField<T>,
    tape: &mut Tape<T>,
    b: &Bindings,
    rays: &[Ray],
    ranges: &[DepthRange],
    z: (Var, Var),
    mut rng: Option<&mut R>,
    cfg: &RenderConfig,
) -> Result<RenderedRays> {
    if rays.len() != ranges.len() {
        return Err(invalid("one depth range per ray required"));
    }
    let (r, n) = (rays.len(), cfg.samples_n);
    let mut points = Vec::with_capacity(r * n * 3);
    let mut dirs = Vec::with_capacity(r * 3);
    let mut deltas = Vec::with_capacity(r * n);
    for (ray, range) in rays.iter().zip(ranges) {
        let depths = match rng.as_deref_mut() {
            Some(rng) => stratified_depths(rng, range, n),
            None => midpoint_depths(range, n),
        };
        for &t in &depths {
            let x = ray.origin + ray.direction * t;
            points.extend_from_slice(&[x.x, x.y, x.z]);
        }
        deltas.extend(spacings(&depths, range));
        dirs.extend_from_slice(&[ray.direction.x, ray.direction.y, ray.direction.z]);
    }
    let points = tape.constant(Tensor::from_f64(vec![r, n, 3], &points)?);
    let dirs = tape.constant(Tensor::from_f64(vec![r, 3], &dirs)?);
    let delta = tape.constant(Tensor::from_f64(vec![r, n], &deltas)?);
    let out = field.eval_batch(tape, b, points, dirs, z.0, z.1)?;
    let comp = composite(tape, out.sigma, out.color, delta)?;
    let color = blend_background(tape, &comp, cfg.background)?;
    Ok(RenderedRays { color, acc: comp.acc })
}

/// Renders the K×K patch `pattern` as a `[K, K, 3]` node.
#[allow(clippy::too_many_arguments)]
pub fn render_patch<T: Scalar, R: Rng + ?Sized>(
    field: &RadianceField<T>,
    tape: &mut Tape<T>,
    b: &Bindings,
    intr: &Intrinsics,
    pose: &CameraPose,
    pattern: &PatchPattern,
    z: (Var, Var),
    rng: Option<&mut R>,
    cfg: &RenderConfig,
) -> Result<Var> {
    let k = pattern.size;
    let rays = generate_rays(intr, pose, &patch_coords(pattern));
    let range = DepthRange::around_origin(pose, cfg.bound_b)?;
    let out = render_rays(field, tape, b, &rays, &vec![range; rays.len()], z, rng, cfg)?;
    Ok(tape.reshape(out.color, &[k, k, 3])?)
}

/// A rendered image together with its accumulated-alpha map.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendering {
    pub image: Image,
    /// Row-major `W·H` accumulated alpha.
    pub alpha: Vec<f64>,
}

/// Full-image inference in chunks of `chunk_rays`, each on a fresh constant tape.
pub fn render_image<T: Scalar>(
    field: &RadianceField<T>,
    intr: &Intrinsics,
    pose: &CameraPose,
    z: &LatentCodes,
    cfg: &RenderConfig,
) -> Result<Rendering> {
    cfg.validate()?;
    let rays = generate_rays(intr, pose, &intr.pixel_grid());
    let range = DepthRange::around_origin(pose, cfg.bound_b)?;
    let mut pixels = Vec::with_capacity(rays.len() * 3);
    let mut alpha = Vec::with_capacity(rays.len());
    for chunk in rays.chunks(cfg.chunk_rays) {
        let mut tape = Tape::new();
        let b = field.params.bind(&mut tape, BindMode::Frozen);
        let zv = z.constants(&mut tape)?;
        let out =
            render_rays::<T, crate::rng::Rng>(field, &mut tape, &b, chunk, &vec![range; chunk.len()], zv, None, cfg)?;
        pixels.extend(tape.value(out.color).data().iter().map(|v| v.to_f64_lossy()));
        alpha.extend(tape.value(out.acc).data().iter().map(|v| v.to_f64_lossy()));
    }
    Ok(Rendering {
        image: Image::new(intr.width, intr.height, pixels)?,
        alpha,
    })
}
