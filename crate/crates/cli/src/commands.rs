use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use graf::config::Config;
use graf::diffcore::Scalar;
use graf::field::LatentCodes;
use graf::geometry::{CameraPose, Vec3};
use graf::image::Image;
use graf::overfit::run_overfit;
use graf::renderer::render_image;
use graf::trainer::{load_generator, run as run_training, RunOptions};
use graf::verify::{run_suite, Suite};

use crate::VerifyFailed;

/// Orbit parameters as given on the command line: degrees, degrees, units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrbitPose {
    pub azimuth: f64,
    pub polar: f64,
    pub radius: f64,
}

impl OrbitPose {
    fn to_pose(self) -> Result<CameraPose> {
        Ok(CameraPose::orbit(
            self.azimuth.to_radians(),
            self.polar.to_radians(),
            self.radius,
            Vec3::z(),
        )?)
    }
}

pub fn parse_pose(s: &str) -> Result<OrbitPose> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| anyhow!("pose {s:?}: expected azimuth,polar,radius"))?;
    match v[..] {
        [azimuth, polar, radius]
            if v.iter().all(|x| x.is_finite()) && (0.0..=180.0).contains(&polar) && radius > 0.0 =>
        {
            Ok(OrbitPose { azimuth, polar, radius })
        }
        _ => Err(anyhow!(
            "pose {s:?}: expected three finite numbers, polar in [0, 180], positive radius"
        )),
    }
}

pub fn parse_sweep(s: &str) -> Result<Vec<OrbitPose>> {
    let parts: Vec<&str> = s.split(':').collect();
    let [a, b, n] = parts[..] else {
        bail!("sweep {s:?}: expected a0,p0,r0:a1,p1,r1:frames");
    };
    let (a, b) = (parse_pose(a)?, parse_pose(b)?);
    let n: usize = n
        .trim()
        .parse()
        .map_err(|_| anyhow!("sweep frame count {n:?} is not an integer"))?;
    if n == 0 {
        bail!("sweep needs at least one frame");
    }
    let lerp = |x: f64, y: f64, t: f64| x + (y - x) * t;
    Ok((0..n)
        .map(|i| {
            let t = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 };
            OrbitPose {
                azimuth: lerp(a.azimuth, b.azimuth, t),
                polar: lerp(a.polar, b.polar, t),
                radius: lerp(a.radius, b.radius, t),
            }
        })
        .collect())
}

pub fn parse_seed(s: &str) -> Result<Option<u64>> {
    if s == "zero" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| anyhow!("latent seed {s:?}: expected an integer or \"zero\""))
}

pub fn make_dataset(cfg: &Config, out: &Path, count: Option<usize>, posed: bool) -> Result<()> {
    let count = count.unwrap_or(cfg.data.count);
    let m = graf::scenegen::make_dataset(cfg, out, count, posed)?;
    println!(
        "wrote {} images of {}x{} to {}",
        m.count,
        m.width,
        m.height,
        out.display()
    );
    Ok(())
}

pub fn train<T: Scalar>(config: Config, data: PathBuf, out: PathBuf, resume: Option<PathBuf>) -> Result<()> {
    let every = (config.train.iters / 20).max(1);
    let opts = RunOptions {
        config,
        data_dir: data,
        out_dir: out,
        resume,
    };
    let summary = run_training::<T>(&opts, |m| {
        if m.iter % every == 0 {
            eprintln!(
                "iter {:>6}  loss_d {:.4}  loss_g {:.4}  r1 {:.4}  logits {:+.3}/{:+.3}  s_lo {:.3}",
                m.iter, m.loss_d, m.loss_g, m.r1, m.logit_real, m.logit_fake, m.s_lo
            );
        }
    })?;
    println!(
        "trained iterations {}..{}; checkpoint {}; metrics {}",
        summary.start_iteration,
        summary.end_iteration,
        summary.final_checkpoint.display(),
        summary.metrics_path.display()
    );
    Ok(())
}

pub fn overfit<T: Scalar>(config: &Config, data: &Path, out: &Path) -> Result<()> {
    let report = run_overfit::<T>(config, data, out, |e| {
        eprintln!("iter {:>6}  loss {:.6}  held-out PSNR {:.2} dB", e.iter, e.loss, e.psnr);
    })?;
    println!(
        "held-out PSNR {:.2} dB after {} iterations; outputs in {}",
        report.final_psnr(),
        report.iterations,
        out.display()
    );
    Ok(())
}

pub fn render<T: Scalar>(
    cfg: &Config,
    checkpoint: &Path,
    poses: &[OrbitPose],
    z: (Option<u64>, Option<u64>),
    out: &Path,
) -> Result<()> {
    let field = load_generator::<T>(cfg, checkpoint)?;
    let intr = cfg.intrinsics()?;
    let latents = LatentCodes::from_seeds(&cfg.field, z.0, z.1);
    let frames = poses
        .iter()
        .map(|p| Ok(render_image(&field, &intr, &p.to_pose()?, &latents, &cfg.render)?.image))
        .collect::<Result<Vec<Image>>>()?;
    let strip = Image::hstack(&frames)?;
    fs::write(out, graf::png::encode(&strip)).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} frame(s) to {}", frames.len(), out.display());
    Ok(())
}

pub fn verify(suite: Suite) -> Result<()> {
    let results = run_suite(suite);
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(VerifyFailed(failed).into());
    }
    Ok(())
}
