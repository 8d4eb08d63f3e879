//! Flat `section.key = value` configuration with `#` comments.
//!
//! Every key has a default; unknown keys are rejected. The canonical form
//! (sorted `key=value` lines) is hashed into checkpoints.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::discriminator::DiscConfig;
use crate::error::{io_err, GrafError, Result};
use crate::field::FieldConfig;
use crate::geometry::{AnnealSchedule, Intrinsics, PoseDistribution, Vec3};
use crate::renderer::RenderConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct CameraConfig {
    /// Pixels.
    pub focal: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Degrees.
    pub azimuth_min: f64,
    pub azimuth_max: f64,
    pub polar_cos_min: f64,
    pub polar_cos_max: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            focal: 35.0,
            radius_min: 3.0,
            radius_max: 3.0,
            azimuth_min: 0.0,
            azimuth_max: 360.0,
            polar_cos_min: 0.0,
            polar_cos_max: 1.0,
        }
    }
}

impl CameraConfig {
    pub fn pose_distribution(&self) -> PoseDistribution {
        PoseDistribution {
            azimuth: (self.azimuth_min.to_radians(), self.azimuth_max.to_radians()),
            polar_cos: (self.polar_cos_min, self.polar_cos_max),
            radius: (self.radius_min, self.radius_max),
            up: Vec3::z(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchConfig {
    pub size_k: usize,
    pub anneal_iters: u64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            size_k: 16,
            anneal_iters: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub r1_weight: f64,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub iters: u64,
    pub seed: u64,
    pub log_every: u64,
    pub ckpt_every: u64,
    /// Rays per step when fitting a single posed scene.
    pub overfit_rays: usize,
    pub overfit_lr: f64,
    pub overfit_iters: u64,
    /// Stop early once the held-out PSNR reaches this value; 0 disables.
    pub overfit_target_psnr: f64,
    pub overfit_eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 8,
            lr_g: 5e-4,
            lr_d: 1e-4,
            r1_weight: 10.0,
            rms_decay: 0.99,
            rms_eps: 1e-8,
            iters: 2000,
            seed: 0,
            log_every: 1,
            ckpt_every: 500,
            overfit_rays: 256,
            overfit_lr: 5e-4,
            overfit_iters: 5000,
            overfit_target_psnr: 0.0,
            overfit_eval_every: 250,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    pub radius_min: f64,
    pub radius_max: f64,
    pub albedo_min: f64,
    pub albedo_max: f64,
    /// Largest per-axis offset of a primitive center from the origin.
    pub center_jitter: f64,
    /// Probability that a scene holds a box instead of a sphere.
    pub box_prob: f64,
    pub ambient: f64,
    /// Direction towards the light (normalized on use).
    pub light: [f64; 3],
    pub background: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            count: 1000,
            size: 32,
            seed: 1,
            radius_min: 0.5,
            radius_max: 0.9,
            albedo_min: 0.0,
            albedo_max: 1.0,
            center_jitter: 0.0,
            box_prob: 0.0,
            ambient: 0.3,
            light: [0.4, 0.3, 0.87],
            background: [1.0; 3],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Config {
    pub camera: CameraConfig,
    pub patch: PatchConfig,
    pub field: FieldConfig,
    pub render: RenderConfig,
    pub disc: DiscConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

/// Keys that only control how long or how verbosely a run goes; they are
/// left out of the hash so a run can be extended on resume.
const UNHASHED: [&str; 3] = ["train.iters", "train.log_every", "train.ckpt_every"];

fn fmt_list<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, String> {
    v.split(',').map(|s| parse_num(key, s.trim())).collect()
}

fn parse_rgb(key: &str, v: &str) -> Result<[f64; 3], String> {
    let l: Vec<f64> = parse_list(key, v)?;
    l.try_into()
        .map_err(|_| format!("{key}: expected three comma-separated numbers"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {v:?}")),
    }
}

macro_rules! config_keys {
    ($( $key:literal => $($field:ident).+ : $kind:ident ),* $(,)?) => {
        impl Config {
            /// Every key, in canonical order.
            pub const KEYS: &'static [&'static str] = &[$($key),*];

            /// Sets one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
                match key {
                    $($key => { self.$($field).+ = config_keys!(@parse $kind, key, value)?; })*
                    _ => return Err(format!("unknown key {key:?}")),
                }
                Ok(())
            }

            /// `(key, value)` pairs in canonical form.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, config_keys!(@fmt $kind, self.$($field).+))),*]
            }
        }
    };
    (@parse num, $k:expr, $v:expr) => { parse_num($k, $v) };
    (@parse bool, $k:expr, $v:expr) => { parse_bool($k, $v) };
    (@parse rgb, $k:expr, $v:expr) => { parse_rgb($k, $v) };
    (@parse list, $k:expr, $v:expr) => { parse_list($k, $v) };
    (@fmt num, $e:expr) => { $e.to_string() };
    (@fmt bool, $e:expr) => { $e.to_string() };
    (@fmt rgb, $e:expr) => { fmt_list(&$e) };
    (@fmt list, $e:expr) => { fmt_list(&$e) };
}

config_keys! {
    "camera.azimuth_max" => camera.azimuth_max: num,
    "camera.azimuth_min" => camera.azimuth_min: num,
    "camera.focal" => camera.focal: num,
    "camera.polar_cos_max" => camera.polar_cos_max: num,
    "camera.polar_cos_min" => camera.polar_cos_min: num,
    "camera.radius_max" => camera.radius_max: num,
    "camera.radius_min" => camera.radius_min: num,
    "data.albedo_max" => data.albedo_max: num,
    "data.albedo_min" => data.albedo_min: num,
    "data.ambient" => data.ambient: num,
    "data.background" => data.background: rgb,
    "data.box_prob" => data.box_prob: num,
    "data.center_jitter" => data.center_jitter: num,
    "data.count" => data.count: num,
    "data.light" => data.light: rgb,
    "data.radius_max" => data.radius_max: num,
    "data.radius_min" => data.radius_min: num,
    "data.seed" => data.seed: num,
    "data.size" => data.size: num,
    "disc.channels" => disc.channels: list,
    "disc.instance_norm" => disc.instance_norm: bool,
    "disc.kernel" => disc.kernel: num,
    "disc.leaky_slope" => disc.leaky_slope: num,
    "disc.sn_power_iters" => disc.sn_power_iters: num,
    "disc.stride" => disc.stride: num,
    "field.depth" => field.depth: num,
    "field.encoding_enabled" => field.encoding_enabled: bool,
    "field.hidden" => field.hidden: num,
    "field.l_d" => field.l_d: num,
    "field.l_x" => field.l_x: num,
    "field.m_a" => field.m_a: num,
    "field.m_s" => field.m_s: num,
    "field.pos_scale" => field.pos_scale: num,
    "field.skip_at" => field.skip_at: num,
    "patch.anneal_iters" => patch.anneal_iters: num,
    "patch.size_k" => patch.size_k: num,
    "render.background" => render.background: rgb,
    "render.bound_b" => render.bound_b: num,
    "render.chunk_rays" => render.chunk_rays: num,
    "render.samples_n" => render.samples_n: num,
    "train.batch" => train.batch: num,
    "train.ckpt_every" => train.ckpt_every: num,
    "train.iters" => train.iters: num,
    "train.log_every" => train.log_every: num,
    "train.lr_d" => train.lr_d: num,
    "train.lr_g" => train.lr_g: num,
    "train.overfit_eval_every" => train.overfit_eval_every: num,
    "train.overfit_iters" => train.overfit_iters: num,
    "train.overfit_lr" => train.overfit_lr: num,
    "train.overfit_rays" => train.overfit_rays: num,
    "train.overfit_target_psnr" => train.overfit_target_psnr: num,
    "train.r1_weight" => train.r1_weight: num,
    "train.rms_decay" => train.rms_decay: num,
    "train.rms_eps" => train.rms_eps: num,
    "train.seed" => train.seed: num,
}

impl Config {
    /// Parses config text on top of the defaults, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = std::collections::BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| GrafError::Config { line: i + 1, reason };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            cfg.set(key, value.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    /// Largest distance from the origin of any depth sample on any pixel ray
    /// of a camera drawn from the pose distribution.
    pub fn max_sample_norm(&self) -> f64 {
        let half = self.data.size as f64 / 2.0;
        let f = self.camera.focal;
        let cos = f / (f * f + 2.0 * half * half).sqrt();
        let b = self.render.bound_b;
        let mut worst: f64 = 0.0;
        for r in [self.camera.radius_min, self.camera.radius_max] {
            for t in [r - b, r + b] {
                worst = worst.max((r * r + t * t - 2.0 * r * t * cos).max(0.0).sqrt());
            }
        }
        worst
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(GrafError::Config {
                line: 0,
                reason: reason.to_string(),
            })
        };
        self.field.validate()?;
        self.render.validate()?;
        self.disc.validate(self.patch.size_k)?;
        self.camera.pose_distribution().validate()?;
        if !(self.camera.focal > 0.0) {
            return bad("camera.focal must be positive");
        }
        if self.camera.radius_min <= self.render.bound_b {
            return bad("camera.radius_min must exceed render.bound_b so the near plane stays in front of the camera");
        }
        if self.patch.size_k == 0 || self.patch.size_k % 2 != 0 || self.patch.size_k > self.data.size {
            return bad("patch.size_k must be even, positive and no larger than data.size");
        }
        if self.max_sample_norm() >= self.field.pos_scale {
            return bad("field.pos_scale must exceed the distance of every ray sample from the origin");
        }
        let t = &self.train;
        if t.batch == 0 || !(t.lr_g > 0.0) || !(t.lr_d > 0.0) || !(t.overfit_lr > 0.0) {
            return bad("train.batch must be >= 1 and learning rates positive");
        }
        if !(t.r1_weight >= 0.0) || !(0.0..1.0).contains(&t.rms_decay) || !(t.rms_eps > 0.0) {
            return bad("train.r1_weight must be >= 0, train.rms_decay in [0, 1), train.rms_eps > 0");
        }
        if t.log_every == 0 || t.overfit_rays == 0 || t.overfit_eval_every == 0 {
            return bad("train.log_every, train.overfit_rays and train.overfit_eval_every must be >= 1");
        }
        let d = &self.data;
        if d.size == 0 || !(0.0 < d.radius_min && d.radius_min <= d.radius_max) {
            return bad("data.size must be >= 1 and 0 < data.radius_min <= data.radius_max");
        }
        if !(0.0 <= d.albedo_min && d.albedo_min <= d.albedo_max && d.albedo_max <= 1.0) {
            return bad("albedo range must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&d.ambient) || !(0.0..=1.0).contains(&d.box_prob) || d.center_jitter < 0.0 {
            return bad("data.ambient and data.box_prob must lie in [0, 1], data.center_jitter >= 0");
        }
        // A box of half-extent r reaches r·√3 from its center.
        let reach = d.center_jitter * 3f64.sqrt() + d.radius_max * if d.box_prob > 0.0 { 3f64.sqrt() } else { 1.0 };
        if reach > self.render.bound_b {
            return bad("scene primitives can extend beyond render.bound_b");
        }
        Ok(())
    }

    /// Sorted `key=value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 over the canonical pairs, excluding run-length keys.
    pub fn hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !UNHASHED.contains(&k) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn intrinsics(&self) -> Result<Intrinsics> {
        Intrinsics::new(self.camera.focal, self.data.size, self.data.size)
    }

    pub fn anneal_schedule(&self) -> AnnealSchedule {
        AnnealSchedule {
            max_scale: crate::geometry::max_scale(self.data.size, self.data.size, self.patch.size_k),
            iters: self.patch.anneal_iters,
        }
    }
}
