//! Analytic Lambertian ray tracer and procedural datasets.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::config::{Config, DataConfig};
use crate::error::{io_err, GrafError, Result};
use crate::geometry::{generate_rays, sample_pose, uniform, CameraPose, Intrinsics, Ray, Vec3};
use crate::image::Image;
use crate::png;
use crate::rng::{stream, Stream};

const HIT_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    Sphere {
        center: Vec3,
        radius: f64,
        albedo: [f64; 3],
    },
    Cuboid {
        min: Vec3,
        max: Vec3,
        albedo: [f64; 3],
    },
}

impl Primitive {
    fn albedo(&self) -> [f64; 3] {
        match self {
            Primitive::Sphere { albedo, .. } | Primitive::Cuboid { albedo, .. } => *albedo,
        }
    }

    /// Nearest positive hit distance and outward normal.
    pub fn intersect(&self, ray: &Ray) -> Option<(f64, Vec3)> {
        match self {
            Primitive::Sphere { center, radius, .. } => {
                let oc = ray.origin - center;
                let b = oc.dot(&ray.direction);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let root = disc.sqrt();
                let t = if -b - root > HIT_EPS { -b - root } else { -b + root };
                (t > HIT_EPS).then(|| (t, (ray.origin + ray.direction * t - center) / *radius))
            }
            Primitive::Cuboid { min, max, .. } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                for a in 0..3 {
                    let inv = 1.0 / ray.direction[a];
                    let (mut lo, mut hi) = ((min[a] - ray.origin[a]) * inv, (max[a] - ray.origin[a]) * inv);
                    if lo > hi {
                        std::mem::swap(&mut lo, &mut hi);
                    }
                    if lo > t0 {
                        t0 = lo;
                        axis = a;
                    }
                    t1 = t1.min(hi);
                }
                if t0 > t1 || t1 <= HIT_EPS {
                    return None;
                }
                let t = if t0 > HIT_EPS { t0 } else { t1 };
                let mut n = Vec3::zeros();
                n[axis] = -ray.direction[axis].signum();
                Some((t, n))
            }
        }
    }

    /// Distance from the origin to the farthest point of the primitive.
    pub fn reach(&self) -> f64 {
        match self {
            Primitive::Sphere { center, radius, .. } => center.norm() + radius,
            Primitive::Cuboid { min, max, .. } => {
                let far = Vec3::from_fn(|i, _| min[i].abs().max(max[i].abs()));
                far.norm()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    /// Unit vector towards the light.
    pub light: Vec3,
    pub ambient: f64,
    pub background: [f64; 3],
}

/// Color of one ray: `albedo·(ambient + (1 − ambient)·max(0, n·l))` at the
/// nearest hit, background on a miss.
pub fn shade(scene: &SceneSpec, ray: &Ray) -> [f64; 3] {
    let mut best: Option<(f64, Vec3, [f64; 3])> = None;
    for p in &scene.primitives {
        if let Some((t, n)) = p.intersect(ray) {
            if best.is_none_or(|(bt, _, _)| t < bt) {
                best = Some((t, n, p.albedo()));
            }
        }
    }
    match best {
        None => scene.background,
        Some((_, n, albedo)) => {
            let lambert = n.dot(&scene.light).max(0.0);
            let k = scene.ambient + (1.0 - scene.ambient) * lambert;
            albedo.map(|a| (a * k).clamp(0.0, 1.0))
        }
    }
}

pub fn raytrace(scene: &SceneSpec, intr: &Intrinsics, pose: &CameraPose) -> Image {
    let rays = generate_rays(intr, pose, &intr.pixel_grid());
    let data = rays.iter().flat_map(|r| shade(scene, r)).collect();
    Image {
        width: intr.width,
        height: intr.height,
        data,
    }
}

/// One sphere (or, with probability `box_prob`, one cube) with uniform size,
/// per-channel albedo and center offset.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R, d: &DataConfig) -> SceneSpec {
    let is_box = rng.random::<f64>() < d.box_prob;
    let size = uniform(rng, d.radius_min, d.radius_max);
    let albedo = [0; 3].map(|_| uniform(rng, d.albedo_min, d.albedo_max));
    let center = Vec3::from_fn(|_, _| uniform(rng, -d.center_jitter, d.center_jitter));
    let primitive = if is_box {
        let h = Vec3::repeat(size);
        Primitive::Cuboid {
            min: center - h,
            max: center + h,
            albedo,
        }
    } else {
        Primitive::Sphere {
            center,
            radius: size,
            albedo,
        }
    };
    SceneSpec {
        primitives: vec![primitive],
        light: Vec3::from(d.light).normalize(),
        ambient: d.ambient,
        background: d.background,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    pub posed: bool,
    /// Remaining `key=value` lines (scene distribution parameters).
    pub extra: Vec<(String, String)>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "count={}\nwidth={}\nheight={}\nseed={}\nposed={}\n",
            self.count, self.width, self.height, self.seed, self.posed
        );
        for (k, v) in &self.extra {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest {
            count: 0,
            width: 0,
            height: 0,
            seed: 0,
            posed: false,
            extra: Vec::new(),
        };
        let mut have = [false; 5];
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GrafError::Dataset(format!("manifest line {line:?} is not key=value")))?;
            let num = |what: &str| -> Result<u64> {
                v.parse()
                    .map_err(|_| GrafError::Dataset(format!("manifest {what}: cannot parse {v:?}")))
            };
            match k {
                "count" => (m.count, have[0]) = (num(k)? as usize, true),
                "width" => (m.width, have[1]) = (num(k)? as usize, true),
                "height" => (m.height, have[2]) = (num(k)? as usize, true),
                "seed" => (m.seed, have[3]) = (num(k)?, true),
                "posed" => (m.posed, have[4]) = (v == "true", true),
                _ => m.extra.push((k.to_string(), v.to_string())),
            }
        }
        if have.contains(&false) {
            return Err(GrafError::Dataset(
                "manifest must define count, width, height, seed and posed".into(),
            ));
        }
        Ok(m)
    }
}

pub fn image_name(i: usize) -> String {
    format!("img_{i:06}.png")
}

pub const MANIFEST: &str = "manifest.txt";
pub const POSES: &str = "poses.txt";

/// Writes `count` ray-traced images plus a manifest into `out`. Unposed sets
/// draw a fresh scene per image; posed sets show one scene from many poses
/// and record them in `poses.txt`.
pub fn make_dataset(cfg: &Config, out: &Path, count: usize, posed: bool) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let d = &cfg.data;
    let intr = cfg.intrinsics()?;
    let dist = cfg.camera.pose_distribution();
    let fixed_scene = sample_scene(&mut stream(d.seed, Stream::Scenes, 0), d);
    let mut pose_lines = String::new();
    for i in 0..count {
        let scene = if posed {
            fixed_scene.clone()
        } else {
            sample_scene(&mut stream(d.seed, Stream::Scenes, i as u64), d)
        };
        let pose = sample_pose(&mut stream(d.seed, Stream::Poses, i as u64), &dist)?;
        let img = raytrace(&scene, &intr, &pose);
        let path = out.join(image_name(i));
        fs::write(&path, png::encode(&img)).map_err(io_err(&path))?;
        if posed {
            let nums: Vec<String> = pose.to_row_major().iter().map(f64::to_string).collect();
            pose_lines.push_str(&format!("{i} {} {}\n", nums.join(" "), intr.focal));
        }
    }
    if posed {
        let path = out.join(POSES);
        fs::write(&path, pose_lines).map_err(io_err(&path))?;
    }
    let extra = cfg
        .entries()
        .into_iter()
        .filter(|(k, _)| k.starts_with("data.") || k.starts_with("camera."))
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    let manifest = Manifest {
        count,
        width: intr.width,
        height: intr.height,
        seed: d.seed,
        posed,
        extra,
    };
    let path = out.join(MANIFEST);
    fs::write(&path, manifest.to_text()).map_err(io_err(&path))?;
    Ok(manifest)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosedView {
    pub pose: CameraPose,
    pub focal: f64,
}

/// A dataset read back into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub images: Vec<Image>,
    pub poses: Option<Vec<PosedView>>,
}

fn parse_poses(text: &str, count: usize) -> Result<Vec<PosedView>> {
    let mut out = Vec::with_capacity(count);
    for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let bad = |why: &str| GrafError::Dataset(format!("poses.txt line {}: {why}", i + 1));
        let nums: Vec<f64> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<f64>().map_err(|_| bad("non-numeric field")))
            .collect::<Result<_>>()?;
        if nums.len() != 14 {
            return Err(bad("expected index, 12 pose values and focal"));
        }
        if nums[0] != i as f64 {
            return Err(bad("indices must be consecutive from 0"));
        }
        let m: [f64; 12] = nums[1..13].try_into().expect("length checked");
        out.push(PosedView {
            pose: CameraPose::from_row_major(&m),
            focal: nums[13],
        });
    }
    if out.len() != count {
        return Err(GrafError::Dataset(format!(
            "poses.txt has {} entries, manifest count is {count}",
            out.len()
        )));
    }
    Ok(out)
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let manifest = Manifest::parse(&fs::read_to_string(&mpath).map_err(io_err(&mpath))?)?;
        let on_disk = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok())
            .filter(|e| {
                let n = e.file_name().to_string_lossy().to_string();
                n.starts_with("img_") && n.ends_with(".png")
            })
            .count();
        if on_disk != manifest.count {
            return Err(GrafError::Dataset(format!(
                "manifest lists {} images, {on_disk} found in {}",
                manifest.count,
                dir.display()
            )));
        }
        let mut images = Vec::with_capacity(manifest.count);
        for i in 0..manifest.count {
            let path = dir.join(image_name(i));
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let img = png::decode(&bytes).map_err(|e| GrafError::Dataset(format!("{}: {e}", path.display())))?;
            if (img.width, img.height) != (manifest.width, manifest.height) {
                return Err(GrafError::Dataset(format!(
                    "{} is {}x{}, manifest says {}x{}",
                    path.display(),
                    img.width,
                    img.height,
                    manifest.width,
                    manifest.height
                )));
            }
            images.push(img);
        }
        let ppath = dir.join(POSES);
        let poses = if manifest.posed {
            let text = fs::read_to_string(&ppath).map_err(io_err(&ppath))?;
            Some(parse_poses(&text, manifest.count)?)
        } else {
            None
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            images,
            poses,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ray(o: [f64; 3], d: [f64; 3]) -> Ray {
        Ray {
            origin: Vec3::from(o),
            direction: Vec3::from(d).normalize(),
        }
    }

    #[test]
    fn sphere_hit_from_outside_and_inside() {
        let s = Primitive::Sphere {
            center: Vec3::zeros(),
            radius: 1.0,
            albedo: [1.0; 3],
        };
        let (t, n) = s.intersect(&ray([0.0, 0.0, 3.0], [0.0, 0.0, -1.0])).unwrap();
        assert!((t - 2.0).abs() < 1e-12);
        assert!((n - Vec3::z()).norm() < 1e-12);
        let (t, _) = s.intersect(&ray([0.0; 3], [1.0, 0.0, 0.0])).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
        assert!(s.intersect(&ray([0.0, 2.0, 3.0], [0.0, 0.0, -1.0])).is_none());
    }

    #[test]
    fn box_hit_normal() {
        let b = Primitive::Cuboid {
            min: Vec3::repeat(-0.5),
            max: Vec3::repeat(0.5),
            albedo: [1.0; 3],
        };
        let (t, n) = b.intersect(&ray([2.0, 0.1, 0.0], [-1.0, 0.0, 0.0])).unwrap();
        assert!((t - 1.5).abs() < 1e-12);
        assert_eq!(n, Vec3::x());
        assert!(b.intersect(&ray([2.0, 2.0, 0.0], [-1.0, 0.0, 0.0])).is_none());
    }

    #[test]
    fn manifest_round_trip() {
        let m = Manifest {
            count: 3,
            width: 8,
            height: 8,
            seed: 9,
            posed: true,
            extra: vec![("data.ambient".into(), "0.3".into())],
        };
        assert_eq!(Manifest::parse(&m.to_text()).unwrap(), m);
        assert!(Manifest::parse("count=1\n").is_err());
    }
}
