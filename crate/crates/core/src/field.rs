//! Positional encoding and the latent-conditioned radiance field.
//!
//! Density is a function of `(γ(x), z_s)` only; color additionally sees
//! `γ(d)` and `z_a`. The separation is structural: the density head never
//! receives a tape path from the view direction or the appearance code.

use std::f64::consts::PI;

use graf_diffcore::{BindMode, Bindings, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;

use crate::error::{invalid, Result};
use crate::geometry::uniform;
use crate::rng::normal_vec;

#[derive(Clone, Debug, PartialEq)]
pub struct FieldConfig {
    /// Number of hidden layers in the shape trunk.
    pub depth: usize,
    pub hidden: usize,
    /// Trunk layer that re-receives `(γ(x), z_s)`; 0 or >= depth disables it.
    pub skip_at: usize,
    pub l_x: usize,
    pub l_d: usize,
    pub m_s: usize,
    pub m_a: usize,
    pub encoding_enabled: bool,
    /// Positions are divided by this before encoding. The encoding has
    /// period 2 in each coordinate, so every sampled point must satisfy
    /// `|x_i| < pos_scale` to avoid aliased copies of the scene.
    pub pos_scale: f64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            hidden: 128,
            skip_at: 2,
            l_x: 10,
            l_d: 4,
            m_s: 32,
            m_a: 32,
            encoding_enabled: true,
            pos_scale: 3.0,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.hidden == 0 || self.m_s == 0 || self.m_a == 0 {
            return Err(invalid("field depth, hidden width and latent sizes must be >= 1"));
        }
        if !(self.pos_scale > 0.0 && self.pos_scale.is_finite()) {
            return Err(invalid("field.pos_scale must be positive"));
        }
        if self.skip_at >= self.depth {
            return Err(invalid("field.skip_at must be below field.depth (0 disables the skip)"));
        }
        if self.encoding_enabled {
            if self.l_x == 0 || self.l_d == 0 {
                return Err(invalid("encoding frequencies must be >= 1 when encoding is enabled"));
            }
            if self.l_d >= self.l_x {
                return Err(invalid(format!(
                    "direction frequencies ({}) must be fewer than location frequencies ({})",
                    self.l_d, self.l_x
                )));
            }
        }
        Ok(())
    }

    pub fn encoded_dim(&self, l: usize) -> usize {
        if self.encoding_enabled {
            3 * 2 * l
        } else {
            3
        }
    }

    pub fn color_hidden(&self) -> usize {
        (self.hidden / 2).max(1)
    }

    fn has_skip(&self) -> bool {
        self.skip_at > 0
    }

    /// `(name, fan_in, fan_out)` of every linear layer, in initialization order.
    pub fn layers(&self) -> Vec<(String, usize, usize)> {
        let input = self.encoded_dim(self.l_x) + self.m_s;
        let mut out = Vec::new();
        for i in 0..self.depth {
            let fan_in = match i {
                0 => input,
                i if i == self.skip_at && self.has_skip() => self.hidden + input,
                _ => self.hidden,
            };
            out.push((format!("trunk{i}"), fan_in, self.hidden));
        }
        out.push(("sigma".into(), self.hidden, 1));
        let color_in = self.hidden + self.encoded_dim(self.l_d) + self.m_a;
        out.push(("color_hidden".into(), color_in, self.color_hidden()));
        out.push(("color_out".into(), self.color_hidden(), 3));
        out
    }

    /// `Σ (fan_in + 1) · fan_out` over all linear layers.
    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(_, i, o)| (i + 1) * o).sum()
    }
}

/// `(sin(2⁰πp), cos(2⁰πp), …, sin(2^{L-1}πp), cos(2^{L-1}πp))` per component,
/// components concatenated.
pub fn positional_encode(p: &[f64], l: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.len() * 2 * l);
    for &v in p {
        for k in 0..l {
            let a = v * (PI * (1u64 << k) as f64);
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out
}

/// Tape version of [`positional_encode`] for rows of a `[P, 3]` tensor.
pub fn encode<T: Scalar>(tape: &mut Tape<T>, x: Var, l: usize, enabled: bool) -> Result<Var> {
    if !enabled {
        return Ok(x);
    }
    let shape = tape.shape(x).to_vec();
    let [p, n] = shape[..] else {
        return Err(invalid(format!("encode expects [P, n], got {shape:?}")));
    };
    let mut freqs = Vec::with_capacity(l);
    for k in 0..l {
        let a = tape.scale(x, T::from_f64_lossy(PI * (1u64 << k) as f64));
        let s = tape.sin(a);
        let c = tape.cos(a);
        let s = tape.reshape(s, &[p, n, 1, 1])?;
        let c = tape.reshape(c, &[p, n, 1, 1])?;
        freqs.push(tape.concat(&[s, c], 3)?);
    }
    let all = tape.concat(&freqs, 2)?;
    Ok(tape.reshape(all, &[p, n * 2 * l])?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCodes {
    pub z_s: Vec<f64>,
    pub z_a: Vec<f64>,
}

impl LatentCodes {
    /// Standard-normal shape and appearance codes.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, cfg: &FieldConfig) -> Self {
        let z_s = normal_vec(rng, cfg.m_s);
        let z_a = normal_vec(rng, cfg.m_a);
        Self { z_s, z_a }
    }

    pub fn zeros(cfg: &FieldConfig) -> Self {
        Self {
            z_s: vec![0.0; cfg.m_s],
            z_a: vec![0.0; cfg.m_a],
        }
    }

    /// Codes drawn from independent seeds; `None` gives the zero vector.
    pub fn from_seeds(cfg: &FieldConfig, shape_seed: Option<u64>, appearance_seed: Option<u64>) -> Self {
        let draw = |seed: Option<u64>, which: u64, n: usize| match seed {
            Some(s) => normal_vec(&mut crate::rng::stream(s, crate::rng::Stream::Latents, which), n),
            None => vec![0.0; n],
        };
        Self {
            z_s: draw(shape_seed, 0, cfg.m_s),
            z_a: draw(appearance_seed, 1, cfg.m_a),
        }
    }

    /// Places the codes on `tape` as constants.
    pub fn constants<T: Scalar>(&self, tape: &mut Tape<T>) -> Result<(Var, Var)> {
        let zs = tape.constant(Tensor::from_f64(vec![self.z_s.len()], &self.z_s)?);
        let za = tape.constant(Tensor::from_f64(vec![self.z_a.len()], &self.z_a)?);
        Ok((zs, za))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadianceSample {
    pub color: [f64; 3],
    pub sigma: f64,
}

/// Per-point outputs of a batched evaluation.
#[derive(Clone, Copy, Debug)]
pub struct FieldOutput {
    /// `[R, N]`
    pub sigma: Var,
    /// `[R, N, 3]`
    pub color: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadianceField<T> {
    pub config: FieldConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> RadianceField<T> {
    /// Uniform `±1/√fan_in` weights (stored `[in, out]`), zero biases.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, fan_in, fan_out) in config.layers() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out).map(|_| uniform(rng, -bound, bound)).collect();
            params.insert_param(format!("{name}/w"), Tensor::from_f64(vec![fan_in, fan_out], &w)?)?;
            params.insert_param(format!("{name}/b"), Tensor::zeros(vec![fan_out]))?;
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a field from stored tensors; names and shapes must match `config`.
    pub fn from_tensors(config: FieldConfig, tensors: &std::collections::BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let mut field = Self::init(&mut crate::rng::seeded(0), config)?;
        field.params.assign_from(tensors)?;
        Ok(field)
    }

    fn linear(&self, tape: &mut Tape<T>, b: &Bindings, name: &str, x: Var) -> Result<Var> {
        let w = b.var(&format!("{name}/w"))?;
        let bias = b.var(&format!("{name}/b"))?;
        let y = tape.matmul(x, w)?;
        Ok(tape.add(y, bias)?)
    }

    /// Evaluates `R×N` points; `dirs` holds one unit direction per ray.
    pub fn eval_batch(
        &self,
        tape: &mut Tape<T>,
        b: &Bindings,
        points: Var,
        dirs: Var,
        z_s: Var,
        z_a: Var,
    ) -> Result<FieldOutput> {
        let cfg = &self.config;
        let pshape = tape.shape(points).to_vec();
        let dshape = tape.shape(dirs).to_vec();
        let (r, n) = match (&pshape[..], &dshape[..]) {
            ([r, n, 3], [r2, 3]) if r == r2 => (*r, *n),
            _ => {
                return Err(invalid(format!(
                    "field expects points [R, N, 3] and dirs [R, 3], got {pshape:?} and {dshape:?}"
                )))
            }
        };
        if tape.shape(z_s) != [cfg.m_s] || tape.shape(z_a) != [cfg.m_a] {
            return Err(invalid(format!(
                "latent shapes {:?}/{:?} do not match M_s={}, M_a={}",
                tape.shape(z_s),
                tape.shape(z_a),
                cfg.m_s,
                cfg.m_a
            )));
        }
        for d in tape.value(dirs).data().chunks_exact(3) {
            let norm = d.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(invalid(format!("view direction has norm {norm}, expected 1")));
            }
        }
        let p = r * n;

        let flat = tape.reshape(points, &[p, 3])?;
        let flat = tape.scale(flat, T::from_f64_lossy(1.0 / cfg.pos_scale));
        let gx = encode(tape, flat, cfg.l_x, cfg.encoding_enabled)?;
        let zs = tape.reshape(z_s, &[1, cfg.m_s])?;
        let zs = tape.broadcast_to(zs, &[p, cfg.m_s])?;
        let input = tape.concat(&[gx, zs], 1)?;

        let mut h = input;
        for i in 0..cfg.depth {
            if i == cfg.skip_at && cfg.has_skip() {
                h = tape.concat(&[h, input], 1)?;
            }
            let y = self.linear(tape, b, &format!("trunk{i}"), h)?;
            h = tape.relu(y);
        }

        let s = self.linear(tape, b, "sigma", h)?;
        let sigma = tape.softplus(s);
        let sigma = tape.reshape(sigma, &[r, n])?;

        let gd = encode(tape, dirs, cfg.l_d, cfg.encoding_enabled)?;
        let ed = tape.shape(gd)[1];
        let gd = tape.reshape(gd, &[r, 1, ed])?;
        let gd = tape.broadcast_to(gd, &[r, n, ed])?;
        let za = tape.reshape(z_a, &[1, 1, cfg.m_a])?;
        let za = tape.broadcast_to(za, &[r, n, cfg.m_a])?;
        let h3 = tape.reshape(h, &[r, n, cfg.hidden])?;
        let cin = tape.concat(&[h3, gd, za], 2)?;
        let cin = tape.reshape(cin, &[p, cfg.hidden + ed + cfg.m_a])?;
        let ch = self.linear(tape, b, "color_hidden", cin)?;
        let ch = tape.relu(ch);
        let c = self.linear(tape, b, "color_out", ch)?;
        let color = tape.sigmoid(c);
        let color = tape.reshape(color, &[r, n, 3])?;
        Ok(FieldOutput { sigma, color })
    }

    /// Single-point evaluation on a private constant tape.
    pub fn eval_point(&self, x: [f64; 3], d: [f64; 3], z: &LatentCodes) -> Result<RadianceSample> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, BindMode::Frozen);
        let pts = tape.constant(Tensor::from_f64(vec![1, 1, 3], &x)?);
        let dirs = tape.constant(Tensor::from_f64(vec![1, 3], &d)?);
        let (zs, za) = z.constants(&mut tape)?;
        let out = self.eval_batch(&mut tape, &b, pts, dirs, zs, za)?;
        let c = tape.value(out.color).data();
        Ok(RadianceSample {
            color: [c[0].to_f64_lossy(), c[1].to_f64_lossy(), c[2].to_f64_lossy()],
            sigma: tape.value(out.sigma).item().to_f64_lossy(),
        })
    }
}
