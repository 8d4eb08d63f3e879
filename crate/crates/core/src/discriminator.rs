//! Convolutional patch discriminator with spectrally normalized weights and
//! instance normalization.
//!
//! The power-iteration vectors `u` live in the parameter store as buffers.
//! Spectral estimates are computed outside the tape and enter the forward
//! pass as constants, so no gradient flows through the power iteration.

use std::collections::BTreeMap;

use graf_diffcore::{Bindings, ParamStore, Scalar, Tape, Tensor, Var};
use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{invalid, Result};
use crate::geometry::uniform;
use crate::rng::normal_vec;

pub const SPECTRAL_EPS: f64 = 1e-12;
pub const NORM_EPS: f64 = 1e-5;
pub const INIT_POWER_ITERS: usize = 20;
/// Subspace width of the block power iteration used at initialization.
pub const INIT_BLOCK: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub leaky_slope: f64,
    pub sn_power_iters: usize,
    /// Instance normalization after every conv but the first.
    pub instance_norm: bool,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            channels: vec![64, 128, 256],
            kernel: 4,
            stride: 2,
            leaky_slope: 0.2,
            sn_power_iters: 1,
            instance_norm: true,
        }
    }
}

impl DiscConfig {
    pub fn pad(&self) -> usize {
        self.kernel.saturating_sub(self.stride) / 2
    }

    /// Spatial extent after each conv for a `k×k` input.
    pub fn spatial_sizes(&self, k: usize) -> Result<Vec<usize>> {
        let mut n = k;
        let mut out = Vec::new();
        for _ in &self.channels {
            let padded = n + 2 * self.pad();
            if padded < self.kernel {
                return Err(invalid(format!(
                    "patch size {k} too small for the discriminator ladder"
                )));
            }
            n = (padded - self.kernel) / self.stride + 1;
            out.push(n);
        }
        Ok(out)
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(invalid("disc.channels must be a non-empty list of positive widths"));
        }
        if self.kernel == 0 || self.stride == 0 {
            return Err(invalid("disc.kernel and disc.stride must be >= 1"));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(invalid("disc.leaky_slope must lie in [0, 1)"));
        }
        self.spatial_sizes(k).map(|_| ())
    }

    /// Flattened feature count entering the linear head.
    pub fn head_features(&self, k: usize) -> Result<usize> {
        let n = *self.spatial_sizes(k)?.last().expect("non-empty ladder");
        Ok(n * n * self.channels.last().expect("non-empty ladder"))
    }

    /// Names of the spectrally normalized weights, `(weight, u-buffer)`.
    pub fn spectral_weights(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = (0..self.channels.len())
            .map(|i| (format!("conv{i}/w"), format!("conv{i}/u")))
            .collect();
        out.push(("head/w".into(), "head/u".into()));
        out
    }
}

/// Spectral estimates `σ̂` keyed by weight name.
pub type Sigmas = BTreeMap<String, f64>;

/// Rows of `w` viewed as a `(shape[0], rest)` matrix, in f64.
fn matrix_view<T: Scalar>(w: &Tensor<T>) -> (usize, usize, Vec<f64>) {
    let rows = w.shape()[0];
    let cols = w.numel() / rows.max(1);
    (rows, cols, w.data().iter().map(|v| v.to_f64_lossy()).collect())
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(SPECTRAL_EPS);
    v.iter_mut().for_each(|x| *x /= n);
}

fn wt_u(rows: usize, cols: usize, w: &[f64], u: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; cols];
    for r in 0..rows {
        let ur = u[r];
        for (vc, wrc) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
            *vc += wrc * ur;
        }
    }
    v
}

fn w_v(rows: usize, cols: usize, w: &[f64], v: &[f64]) -> Vec<f64> {
    (0..rows)
        .map(|r| w[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// `σ̂ = uᵀWv` with `v = Wᵀu/‖Wᵀu‖`, i.e. `‖Wᵀu‖` for unit `u`.
pub fn spectral_estimate<T: Scalar>(w: &Tensor<T>, u: &Tensor<T>) -> f64 {
    let (rows, cols, w) = matrix_view(w);
    let u: Vec<f64> = u.data().iter().map(|v| v.to_f64_lossy()).collect();
    wt_u(rows, cols, &w, &u).iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `iters` power-iteration steps updating `u` in place; returns the new estimate.
pub fn power_iterate<T: Scalar>(w: &Tensor<T>, u: &mut Tensor<T>, iters: usize) -> f64 {
    let (rows, cols, wm) = matrix_view(w);
    let mut uu: Vec<f64> = u.data().iter().map(|v| v.to_f64_lossy()).collect();
    for _ in 0..iters {
        let mut v = wt_u(rows, cols, &wm, &uu);
        normalize(&mut v);
        uu = w_v(rows, cols, &wm, &v);
        normalize(&mut uu);
    }
    for (dst, src) in u.data_mut().iter_mut().zip(&uu) {
        *dst = T::from_f64_lossy(*src);
    }
    spectral_estimate(w, u)
}

/// Block power iteration: `iters` steps of `Q ← orth(W Wᵀ Q)` on a
/// `block`-column subspace seeded with `u` plus random columns, then a
/// Rayleigh–Ritz step. `u` becomes the top Ritz vector; returns the estimate.
/// Converges at rate `(σ_{k+1}/σ₁)²` instead of `(σ₂/σ₁)²`.
pub fn block_power_iterate<T: Scalar, R: Rng + ?Sized>(
    w: &Tensor<T>,
    u: &mut Tensor<T>,
    iters: usize,
    block: usize,
    rng: &mut R,
) -> f64 {
    let (rows, cols, wm) = matrix_view(w);
    let k = block.clamp(1, rows.max(1));
    let wmat = DMatrix::from_row_slice(rows, cols, &wm);
    let mut q = DMatrix::<f64>::zeros(rows, k);
    for (r, v) in u.data().iter().enumerate() {
        q[(r, 0)] = v.to_f64_lossy();
    }
    for c in 1..k {
        let col = normal_vec(rng, rows);
        q.column_mut(c).copy_from_slice(&col);
    }
    q = q.qr().q();
    for _ in 0..iters {
        let z = &wmat * (wmat.transpose() * &q);
        q = z.qr().q();
    }
    let b = wmat.transpose() * &q;
    let eig = (b.transpose() * &b).symmetric_eigen();
    let top = eig.eigenvalues.imax();
    if eig.eigenvalues[top] > SPECTRAL_EPS * SPECTRAL_EPS {
        let mut best: Vec<f64> = (&q * eig.eigenvectors.column(top)).iter().copied().collect();
        normalize(&mut best);
        for (dst, src) in u.data_mut().iter_mut().zip(&best) {
            *dst = T::from_f64_lossy(*src);
        }
    }
    spectral_estimate(w, u)
}

/// `W / max(σ̂, ε)` on the tape.
pub fn spectral_normalize<T: Scalar>(tape: &mut Tape<T>, w: Var, sigma: f64) -> Var {
    tape.scale(w, T::from_f64_lossy(1.0 / sigma.max(SPECTRAL_EPS)))
}

/// Per-(sample, channel) standardization over spatial positions of
/// `x [B, C, H, W]`, followed by an optional affine map.
pub fn instance_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, affine: Option<(Var, Var)>, eps: f64) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let [b, c, h, w] = shape[..] else {
        return Err(invalid(format!("instance norm expects [B, C, H, W], got {shape:?}")));
    };
    if h * w == 0 {
        return Err(invalid("instance norm over an empty spatial extent"));
    }
    let flat = tape.reshape(x, &[b, c, h * w])?;
    let mean = tape.mean(flat, 2)?;
    let centered = tape.sub(flat, mean)?;
    let sq = tape.square(centered);
    let var = tape.mean(sq, 2)?;
    let var = tape.add_scalar(var, T::from_f64_lossy(eps));
    let std = tape.sqrt(var)?;
    let mut y = tape.div(centered, std)?;
    if let Some((gamma, beta)) = affine {
        let g = tape.reshape(gamma, &[1, c, 1])?;
        let bt = tape.reshape(beta, &[1, c, 1])?;
        y = tape.mul(y, g)?;
        y = tape.add(y, bt)?;
    }
    Ok(tape.reshape(y, &shape)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub config: DiscConfig,
    pub patch_size: usize,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Discriminator<T> {
    /// Uniform `±1/√fan_in` weights, zero biases, identity norm affine,
    /// random unit `u` refined by [`INIT_POWER_ITERS`] block power iterations.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, config: DiscConfig, patch_size: usize) -> Result<Self> {
        config.validate(patch_size)?;
        let mut params = ParamStore::new();
        let k = config.kernel;
        let mut cin = 3;
        for (i, &cout) in config.channels.iter().enumerate() {
            let fan_in = cin * k * k;
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..cout * fan_in).map(|_| uniform(rng, -bound, bound)).collect();
            params.insert_param(format!("conv{i}/w"), Tensor::from_f64(vec![cout, cin, k, k], &w)?)?;
            params.insert_param(format!("conv{i}/b"), Tensor::zeros(vec![cout]))?;
            if i > 0 && config.instance_norm {
                params.insert_param(format!("norm{i}/gamma"), Tensor::ones(vec![cout]))?;
                params.insert_param(format!("norm{i}/beta"), Tensor::zeros(vec![cout]))?;
            }
            cin = cout;
        }
        let feat = config.head_features(patch_size)?;
        let bound = 1.0 / (feat as f64).sqrt();
        let w: Vec<f64> = (0..feat).map(|_| uniform(rng, -bound, bound)).collect();
        params.insert_param("head/w", Tensor::from_f64(vec![1, feat], &w)?)?;
        params.insert_param("head/b", Tensor::zeros(vec![1]))?;
        for (wname, uname) in config.spectral_weights() {
            let rows = params.get(&wname).expect("weight just inserted").shape()[0];
            let mut u = normal_vec(rng, rows);
            normalize(&mut u);
            params.insert_buffer(uname, Tensor::from_f64(vec![rows], &u)?)?;
        }
        for (wname, uname) in config.spectral_weights() {
            let w = params.get(&wname).expect("spectral weight").clone();
            let u = params.get_mut(&uname).expect("spectral buffer");
            block_power_iterate(&w, u, INIT_POWER_ITERS, INIT_BLOCK, rng);
        }
        let d = Self {
            config,
            patch_size,
            params,
        };
        Ok(d)
    }

    pub fn from_tensors(config: DiscConfig, patch_size: usize, tensors: &BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let mut d = Self::init(&mut crate::rng::seeded(0), config, patch_size)?;
        d.params.assign_from(tensors)?;
        Ok(d)
    }

    /// Advances every `u` buffer by `iters` steps; returns the new estimates.
    pub fn power_iterate(&mut self, iters: usize) -> Sigmas {
        let mut out = Sigmas::new();
        for (wname, uname) in self.config.spectral_weights() {
            let w = self.params.get(&wname).expect("spectral weight").clone();
            let u = self.params.get_mut(&uname).expect("spectral buffer");
            out.insert(wname, power_iterate(&w, u, iters));
        }
        out
    }

    /// Current estimates without touching the buffers.
    pub fn sigmas(&self) -> Sigmas {
        self.config
            .spectral_weights()
            .into_iter()
            .map(|(wname, uname)| {
                let s = spectral_estimate(
                    self.params.get(&wname).expect("spectral weight"),
                    self.params.get(&uname).expect("spectral buffer"),
                );
                (wname, s)
            })
            .collect()
    }

    /// Logits `[B]` for patches `[B, K, K, 3]`.
    pub fn forward(&self, tape: &mut Tape<T>, b: &Bindings, sigmas: &Sigmas, patches: Var) -> Result<Var> {
        let cfg = &self.config;
        let k = self.patch_size;
        let shape = tape.shape(patches).to_vec();
        let batch = match shape[..] {
            [n, h, w, 3] if h == k && w == k => n,
            _ => {
                return Err(invalid(format!(
                    "discriminator expects patches [B, {k}, {k}, 3], got {shape:?}"
                )))
            }
        };
        let sigma_of = |name: &str| {
            sigmas
                .get(name)
                .copied()
                .ok_or_else(|| invalid(format!("no spectral estimate for {name}")))
        };
        let slope = T::from_f64_lossy(cfg.leaky_slope);
        let mut h = tape.permute(patches, &[0, 3, 1, 2])?;
        for i in 0..cfg.channels.len() {
            let wname = format!("conv{i}/w");
            let w = spectral_normalize(tape, b.var(&wname)?, sigma_of(&wname)?);
            let bias = b.var(&format!("conv{i}/b"))?;
            h = tape.conv2d(h, w, Some(bias), cfg.stride, cfg.pad())?;
            if i > 0 && cfg.instance_norm {
                let affine = (b.var(&format!("norm{i}/gamma"))?, b.var(&format!("norm{i}/beta"))?);
                h = instance_norm(tape, h, Some(affine), NORM_EPS)?;
            }
            h = tape.leaky_relu(h, slope);
        }
        let feat = tape.value(h).numel() / batch;
        let flat = tape.reshape(h, &[batch, feat])?;
        let w = spectral_normalize(tape, b.var("head/w")?, sigma_of("head/w")?);
        let logit = tape.matmul_t(flat, w, false, true)?;
        let logit = tape.add(logit, b.var("head/b")?)?;
        Ok(tape.reshape(logit, &[batch])?)
    }
}
