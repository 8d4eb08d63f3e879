//! Single-scene reconstruction from posed views with latents fixed at zero.
//! Exercises ray generation, sampling, the field and compositing together.

use std::fs;
use std::io::Write;
use std::path::Path;

use graf_diffcore::{BindMode, Scalar, Tape, Tensor};
use rand::Rng as _;

use crate::config::Config;
use crate::error::{invalid, io_err, GrafError, Result};
use crate::field::{LatentCodes, RadianceField};
use crate::geometry::{generate_rays, Intrinsics, Ray};
use crate::image::Image;
use crate::png;
use crate::renderer::{render_image, render_rays, DepthRange};
use crate::rng::{stream, Stream};
use crate::scenegen::Dataset;
use crate::trainer::{Checkpoint, Rmsprop, CONFIG_FILE, FINAL_CHECKPOINT};

pub const OVERFIT_LOG: &str = "overfit.csv";
pub const OVERFIT_HEADER: &str = "iter,loss,psnr";
pub const HELDOUT_PNG: &str = "heldout.png";

#[derive(Clone, Debug, PartialEq)]
pub struct OverfitEval {
    pub iter: u64,
    /// Mean training loss since the previous evaluation; NaN before any step.
    pub loss: f64,
    pub psnr: f64,
}

#[derive(Clone, Debug)]
pub struct OverfitReport {
    pub evals: Vec<OverfitEval>,
    pub iterations: u64,
    /// Final render of the held-out view and its ground truth.
    pub heldout: Image,
    pub target: Image,
}

impl OverfitReport {
    pub fn final_psnr(&self) -> f64 {
        self.evals.last().map_or(f64::NAN, |e| e.psnr)
    }
}

struct RayPool {
    rays: Vec<Ray>,
    ranges: Vec<DepthRange>,
    colors: Vec<[f64; 3]>,
}

fn view_intrinsics(focal: f64, img: &Image) -> Result<Intrinsics> {
    Intrinsics::new(focal, img.width, img.height)
}

/// Fits a field to all posed views but the last, evaluating PSNR on the last.
pub fn overfit<T: Scalar>(
    cfg: &Config,
    data: &Dataset,
    mut on_eval: impl FnMut(&OverfitEval),
) -> Result<(RadianceField<T>, OverfitReport)> {
    cfg.validate()?;
    let poses = data
        .poses
        .as_ref()
        .ok_or_else(|| GrafError::Dataset(format!("{} has no pose sidecar", data.dir.display())))?;
    if data.images.len() < 2 {
        return Err(GrafError::Dataset("need at least two posed views".into()));
    }
    let (train_views, held) = data.images.split_at(data.images.len() - 1);
    let held_view = &poses[poses.len() - 1];
    let target = held[0].clone();
    let held_intr = view_intrinsics(held_view.focal, &target)?;

    let mut pool = RayPool {
        rays: Vec::new(),
        ranges: Vec::new(),
        colors: Vec::new(),
    };
    for (img, view) in train_views.iter().zip(poses) {
        let intr = view_intrinsics(view.focal, img)?;
        let range = DepthRange::around_origin(&view.pose, cfg.render.bound_b)?;
        let grid = intr.pixel_grid();
        pool.rays.extend(generate_rays(&intr, &view.pose, &grid));
        pool.ranges.extend(std::iter::repeat_n(range, grid.len()));
        for y in 0..img.height {
            for x in 0..img.width {
                pool.colors.push(img.pixel(x, y));
            }
        }
    }

    let t = &cfg.train;
    if t.overfit_rays == 0 {
        return Err(invalid("train.overfit_rays must be positive"));
    }
    let mut field = RadianceField::<T>::init(&mut stream(t.seed, Stream::Init, 0), cfg.field.clone())?;
    let mut opt = Rmsprop::new(&field.params, t.overfit_lr, t.rms_decay, t.rms_eps);
    let zeros = LatentCodes::zeros(&cfg.field);

    let evaluate = |field: &RadianceField<T>| -> Result<(Image, f64)> {
        let img = render_image(field, &held_intr, &held_view.pose, &zeros, &cfg.render)?.image;
        let psnr = img.psnr(&target)?;
        Ok((img, psnr))
    };

    let mut evals = Vec::new();
    let mut window = (0.0, 0u64);
    let mut iter = 0;
    let mut heldout = None;
    while iter < t.overfit_iters {
        let mut pick = stream(t.seed, Stream::Rays, iter);
        let idx: Vec<usize> = (0..t.overfit_rays)
            .map(|_| pick.random_range(0..pool.rays.len()))
            .collect();
        let rays: Vec<Ray> = idx.iter().map(|&i| pool.rays[i]).collect();
        let ranges: Vec<DepthRange> = idx.iter().map(|&i| pool.ranges[i]).collect();
        let target_rgb: Vec<f64> = idx.iter().flat_map(|&i| pool.colors[i]).collect();

        let mut tape = Tape::new();
        let b = field.params.bind(&mut tape, BindMode::Trainable);
        let z = zeros.constants(&mut tape)?;
        let mut strata = stream(t.seed, Stream::Strata, iter);
        let out = render_rays(&field, &mut tape, &b, &rays, &ranges, z, Some(&mut strata), &cfg.render)?;
        let goal = tape.constant(Tensor::from_f64(vec![rays.len(), 3], &target_rgb)?);
        let diff = tape.sub(out.color, goal)?;
        let sq = tape.square(diff);
        let loss = tape.mean_all(sq)?;
        let loss_v = tape.value(loss).item().to_f64_lossy();
        if !loss_v.is_finite() {
            return Err(GrafError::NonFinite {
                what: "reconstruction loss".into(),
                iteration: iter,
                seed: t.seed,
            });
        }
        let grads = tape.backward(loss)?;
        opt.step(&mut field.params, &grads)?;
        window = (window.0 + loss_v, window.1 + 1);
        iter += 1;

        if t.overfit_eval_every > 0 && iter % t.overfit_eval_every == 0 {
            let (img, psnr) = evaluate(&field)?;
            let e = OverfitEval {
                iter,
                loss: window.0 / window.1 as f64,
                psnr,
            };
            on_eval(&e);
            evals.push(e);
            window = (0.0, 0);
            heldout = Some(img);
            if t.overfit_target_psnr > 0.0 && psnr >= t.overfit_target_psnr {
                break;
            }
        }
    }
    let heldout = match heldout {
        Some(img) if evals.last().is_some_and(|e| e.iter == iter) => img,
        _ => {
            let (img, psnr) = evaluate(&field)?;
            let loss = if window.1 == 0 {
                f64::NAN
            } else {
                window.0 / window.1 as f64
            };
            let e = OverfitEval { iter, loss, psnr };
            on_eval(&e);
            evals.push(e);
            img
        }
    };
    Ok((
        field,
        OverfitReport {
            evals,
            iterations: iter,
            heldout,
            target,
        },
    ))
}

/// Runs [`overfit`] on the posed set in `data_dir` and writes the config,
/// PSNR log, held-out comparison strip and generator checkpoint to `out_dir`.
pub fn run_overfit<T: Scalar>(
    cfg: &Config,
    data_dir: &Path,
    out_dir: &Path,
    on_eval: impl FnMut(&OverfitEval),
) -> Result<OverfitReport> {
    let data = Dataset::load(data_dir)?;
    let (field, report) = overfit::<T>(cfg, &data, on_eval)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let cfg_path = out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_text()).map_err(io_err(&cfg_path))?;

    let log_path = out_dir.join(OVERFIT_LOG);
    let mut log = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    writeln!(log, "{OVERFIT_HEADER}").map_err(io_err(&log_path))?;
    for e in &report.evals {
        writeln!(log, "{},{},{}", e.iter, e.loss, e.psnr).map_err(io_err(&log_path))?;
    }

    let strip = Image::hstack(&[report.heldout.clone(), report.target.clone()])?;
    let png_path = out_dir.join(HELDOUT_PNG);
    fs::write(&png_path, png::encode(&strip)).map_err(io_err(&png_path))?;

    let ckpt = Checkpoint {
        config_hash: cfg.hash(),
        iteration: report.iterations,
        tensors: field
            .params
            .iter()
            .map(|(n, e)| (format!("gen/{n}"), e.tensor.clone()))
            .collect(),
    };
    ckpt.save(&out_dir.join(FINAL_CHECKPOINT))?;
    Ok(report)
}
