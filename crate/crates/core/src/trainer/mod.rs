//! Adversarial training: losses, optimizer, the per-iteration step,
//! checkpoints and the run driver.

mod checkpoint;
mod loss;
mod optim;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use graf_diffcore::{BindMode, Scalar, Tape, Tensor};
use rand::Rng as _;

pub use checkpoint::{Checkpoint, HEADER_LEN, MAGIC, VERSION};
pub use loss::{f_objective, loss_discriminator, loss_generator, r1_penalty, softplus};
pub use optim::Rmsprop;

use crate::config::Config;
use crate::discriminator::Discriminator;
use crate::error::{invalid, io_err, GrafError, Result};
use crate::field::{LatentCodes, RadianceField};
use crate::geometry::{
    anneal_scale_lower_bound, bilinear_extract, patch_coords, sample_pattern, sample_pose, CameraPose, Intrinsics,
    PatchPattern,
};
use crate::image::Image;
use crate::renderer::render_patch;
use crate::rng::{stream, stream_seed, Stream};
use crate::scenegen::Dataset;

pub const METRICS_HEADER: &str = "iter,loss_d,loss_g,r1,logit_real,logit_fake,s_lo,secs";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.cfg";
pub const FINAL_CHECKPOINT: &str = "final.graf";

pub fn checkpoint_name(iteration: u64) -> String {
    format!("ckpt_{iteration:06}.graf")
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainMetrics {
    /// Number of completed steps, counting this one.
    pub iter: u64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub r1: f64,
    pub logit_real: f64,
    pub logit_fake: f64,
    pub s_lo: f64,
    pub secs: f64,
}

impl TrainMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iter, self.loss_d, self.loss_g, self.r1, self.logit_real, self.logit_fake, self.s_lo, self.secs
        )
    }

    pub fn parse_row(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(invalid(format!("metrics row needs 8 fields: {line:?}")));
        }
        let num = |i: usize| {
            f[i].parse::<f64>()
                .map_err(|_| invalid(format!("bad metrics field {:?}", f[i])))
        };
        Ok(Self {
            iter: f[0].parse().map_err(|_| invalid(format!("bad iteration {:?}", f[0])))?,
            loss_d: num(1)?,
            loss_g: num(2)?,
            r1: num(3)?,
            logit_real: num(4)?,
            logit_fake: num(5)?,
            s_lo: num(6)?,
            secs: num(7)?,
        })
    }

    /// Equality of everything except wall time.
    pub fn same_trajectory(&self, other: &Self) -> bool {
        Self {
            secs: 0.0,
            ..self.clone()
        } == Self {
            secs: 0.0,
            ..other.clone()
        }
    }

    pub fn all_finite(&self) -> bool {
        [
            self.loss_d,
            self.loss_g,
            self.r1,
            self.logit_real,
            self.logit_fake,
            self.s_lo,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// One generated sample: camera, patch pattern and latent codes.
#[derive(Clone, Debug)]
pub struct FakeSample {
    pub pose: CameraPose,
    pub pattern: PatchPattern,
    pub latents: LatentCodes,
}

/// Generator, discriminator and both optimizer states.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub config: Config,
    pub intrinsics: Intrinsics,
    pub generator: RadianceField<T>,
    pub discriminator: Discriminator<T>,
    pub opt_g: Rmsprop<T>,
    pub opt_d: Rmsprop<T>,
    /// Completed steps.
    pub iteration: u64,
}

fn add_into<T: Scalar>(acc: &mut BTreeMap<String, Tensor<T>>, g: BTreeMap<String, Tensor<T>>) {
    for (name, t) in g {
        match acc.get_mut(&name) {
            Some(a) => *a = a.zip_map(&t, |x, y| x + y),
            None => {
                acc.insert(name, t);
            }
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let intrinsics = config.intrinsics()?;
        let generator = RadianceField::init(&mut stream(seed, Stream::Init, 0), config.field.clone())?;
        let discriminator = Discriminator::init(
            &mut stream(seed, Stream::Init, 1),
            config.disc.clone(),
            config.patch.size_k,
        )?;
        let t = &config.train;
        let opt_g = Rmsprop::new(&generator.params, t.lr_g, t.rms_decay, t.rms_eps);
        let opt_d = Rmsprop::new(&discriminator.params, t.lr_d, t.rms_decay, t.rms_eps);
        Ok(Self {
            config,
            intrinsics,
            generator,
            discriminator,
            opt_g,
            opt_d,
            iteration: 0,
        })
    }

    pub fn s_lo(&self) -> f64 {
        anneal_scale_lower_bound(self.iteration, &self.config.anneal_schedule())
    }

    /// Draws `(z_s, z_a, ξ, ν)` for a batch from the streams at `counter`.
    pub fn sample_fakes(&self, counter: u64) -> Result<Vec<FakeSample>> {
        let seed = self.config.train.seed;
        let mut poses = stream(seed, Stream::Poses, counter);
        let mut patterns = stream(seed, Stream::Patterns, counter);
        let mut latents = stream(seed, Stream::Latents, counter);
        let dist = self.config.camera.pose_distribution();
        let (w, h, k) = (self.intrinsics.width, self.intrinsics.height, self.config.patch.size_k);
        let s_lo = self.s_lo();
        (0..self.config.train.batch)
            .map(|_| {
                Ok(FakeSample {
                    pose: sample_pose(&mut poses, &dist)?,
                    pattern: sample_pattern(&mut patterns, w, h, k, s_lo)?,
                    latents: LatentCodes::sample(&mut latents, &self.config.field),
                })
            })
            .collect()
    }

    /// Real patches `[B, K, K, 3]` from images drawn uniformly from `images`.
    pub fn sample_reals(&self, images: &[Image]) -> Result<Tensor<T>> {
        if images.is_empty() {
            return Err(GrafError::Dataset("no training images".into()));
        }
        let mut rng = stream(self.config.train.seed, Stream::Data, self.iteration);
        let k = self.config.patch.size_k;
        let s_lo = self.s_lo();
        let mut data = Vec::with_capacity(self.config.train.batch * k * k * 3);
        for _ in 0..self.config.train.batch {
            let img = &images[rng.random_range(0..images.len())];
            let pattern = sample_pattern(&mut rng, img.width, img.height, k, s_lo)?;
            data.extend(bilinear_extract(img, &patch_coords(&pattern))?);
        }
        Ok(Tensor::from_f64(vec![self.config.train.batch, k, k, 3], &data)?)
    }

    /// Renders fake patches without recording generator gradients.
    pub fn render_fakes(&self, samples: &[FakeSample], counter: u64) -> Result<Tensor<T>> {
        let mut strata = stream(self.config.train.seed, Stream::Strata, counter);
        let k = self.config.patch.size_k;
        let mut data = Vec::with_capacity(samples.len() * k * k * 3);
        for s in samples {
            let mut tape = Tape::new();
            let b = self.generator.params.bind(&mut tape, BindMode::Frozen);
            let z = s.latents.constants(&mut tape)?;
            let p = render_patch(
                &self.generator,
                &mut tape,
                &b,
                &self.intrinsics,
                &s.pose,
                &s.pattern,
                z,
                Some(&mut strata),
                &self.config.render,
            )?;
            data.extend_from_slice(tape.value(p).data());
        }
        Ok(Tensor::new(vec![samples.len(), k, k, 3], data)?)
    }

    fn non_finite(&self, what: &str, counter: u64, s: Stream) -> GrafError {
        GrafError::NonFinite {
            what: what.to_string(),
            iteration: self.iteration,
            seed: stream_seed(self.config.train.seed, s, counter),
        }
    }

    /// Discriminator update. Returns `(loss_d, r1, mean real logit, mean fake logit)`.
    pub fn discriminator_step(&mut self, images: &[Image]) -> Result<(f64, f64, f64, f64)> {
        let counter = 2 * self.iteration;
        let fakes = self.sample_fakes(counter)?;
        let fake = self.render_fakes(&fakes, counter)?;
        let real = self.sample_reals(images)?;
        let sigmas = self.discriminator.power_iterate(self.config.disc.sn_power_iters);

        let mut tape = Tape::new();
        let b = self.discriminator.params.bind(&mut tape, BindMode::Trainable);
        let real_v = tape.variable(real);
        let fake_v = tape.constant(fake);
        let lr = self.discriminator.forward(&mut tape, &b, &sigmas, real_v)?;
        let lf = self.discriminator.forward(&mut tape, &b, &sigmas, fake_v)?;
        let r1 = r1_penalty(&mut tape, lr, real_v)?;
        let loss = loss_discriminator(&mut tape, lr, lf, r1, self.config.train.r1_weight)?;
        let loss_v = tape.value(loss).item().to_f64_lossy();
        let r1_v = tape.value(r1).item().to_f64_lossy();
        if !loss_v.is_finite() || !r1_v.is_finite() {
            return Err(self.non_finite("discriminator loss", counter, Stream::Data));
        }
        let logit_real = mean(&tape.value(lr).to_f64_vec());
        let logit_fake = mean(&tape.value(lf).to_f64_vec());
        let grads = tape.backward(loss)?;
        self.opt_d.step(&mut self.discriminator.params, &grads)?;
        Ok((loss_v, r1_v, logit_real, logit_fake))
    }

    /// Generator update on a fresh fake batch with the discriminator frozen.
    /// Samples are independent under the discriminator, so the batch
    /// gradient is accumulated one patch at a time.
    pub fn generator_step(&mut self) -> Result<f64> {
        let counter = 2 * self.iteration + 1;
        let fakes = self.sample_fakes(counter)?;
        let sigmas = self.discriminator.sigmas();
        let mut strata = stream(self.config.train.seed, Stream::Strata, counter);
        let k = self.config.patch.size_k;
        let inv_b = T::one() / T::from_usize(fakes.len()).expect("batch size");
        let mut grads = BTreeMap::new();
        let mut total = 0.0;
        for s in &fakes {
            let mut tape = Tape::new();
            let gb = self.generator.params.bind(&mut tape, BindMode::Trainable);
            let db = self.discriminator.params.bind(&mut tape, BindMode::Frozen);
            let z = s.latents.constants(&mut tape)?;
            let p = render_patch(
                &self.generator,
                &mut tape,
                &gb,
                &self.intrinsics,
                &s.pose,
                &s.pattern,
                z,
                Some(&mut strata),
                &self.config.render,
            )?;
            let p = tape.reshape(p, &[1, k, k, 3])?;
            let logits = self.discriminator.forward(&mut tape, &db, &sigmas, p)?;
            let l = loss_generator(&mut tape, logits)?;
            let l = tape.scale(l, inv_b);
            total += tape.value(l).item().to_f64_lossy();
            add_into(&mut grads, tape.backward(l)?);
        }
        if !total.is_finite() {
            return Err(self.non_finite("generator loss", counter, Stream::Latents));
        }
        self.opt_g.step(&mut self.generator.params, &grads)?;
        Ok(total)
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self, images: &[Image]) -> Result<TrainMetrics> {
        let start = Instant::now();
        let s_lo = self.s_lo();
        let (loss_d, r1, logit_real, logit_fake) = self.discriminator_step(images)?;
        let loss_g = self.generator_step()?;
        self.iteration += 1;
        Ok(TrainMetrics {
            iter: self.iteration,
            loss_d,
            loss_g,
            r1,
            logit_real,
            logit_fake,
            s_lo,
            secs: start.elapsed().as_secs_f64(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut tensors = BTreeMap::new();
        for (prefix, store) in [("gen", &self.generator.params), ("disc", &self.discriminator.params)] {
            for (name, e) in store.iter() {
                tensors.insert(format!("{prefix}/{name}"), e.tensor.clone());
            }
        }
        for (prefix, opt) in [("opt_g", &self.opt_g), ("opt_d", &self.opt_d)] {
            for (name, acc) in &opt.acc {
                tensors.insert(format!("{prefix}/acc/{name}"), acc.clone());
            }
            let step = Tensor::from_f64(vec![2], &[(opt.steps >> 32) as f64, (opt.steps & 0xffff_ffff) as f64])
                .expect("two values");
            tensors.insert(format!("{prefix}/step"), step);
        }
        Checkpoint {
            config_hash: self.config.hash(),
            iteration: self.iteration,
            tensors,
        }
    }

    /// Rebuilds a trainer; the checkpoint must have been written under `config`.
    pub fn from_checkpoint(config: Config, ckpt: &Checkpoint<T>) -> Result<Self> {
        if ckpt.config_hash != config.hash() {
            return Err(GrafError::Checkpoint(
                "config hash does not match the checkpoint".into(),
            ));
        }
        let mut t = Self::new(config)?;
        t.generator.params.assign_from(&ckpt.section("gen"))?;
        t.discriminator.params.assign_from(&ckpt.section("disc"))?;
        for (prefix, opt) in [("opt_g", &mut t.opt_g), ("opt_d", &mut t.opt_d)] {
            let acc = ckpt.section(&format!("{prefix}/acc"));
            let names_ok = acc.len() == opt.acc.len()
                && acc
                    .iter()
                    .all(|(n, a)| opt.acc.get(n).is_some_and(|o| o.shape() == a.shape()));
            if !names_ok {
                return Err(GrafError::Checkpoint(format!(
                    "{prefix} accumulators do not match the model"
                )));
            }
            opt.acc = acc;
            let step = ckpt
                .tensors
                .get(&format!("{prefix}/step"))
                .filter(|s| s.shape() == [2])
                .ok_or_else(|| GrafError::Checkpoint(format!("{prefix}/step missing or malformed")))?
                .to_f64_vec();
            opt.steps = ((step[0] as u64) << 32) | step[1] as u64;
        }
        let expected = ckpt.tensors.len();
        let used = t.generator.params.len() + t.discriminator.params.len() + t.opt_g.acc.len() + t.opt_d.acc.len() + 2;
        if expected != used {
            return Err(GrafError::Checkpoint(format!(
                "{} unexpected tensors",
                expected.abs_diff(used)
            )));
        }
        t.iteration = ckpt.iteration;
        Ok(t)
    }
}

/// Where a training run reads from and writes to.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub config: Config,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub start_iteration: u64,
    pub end_iteration: u64,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

/// Reads a metrics log written by [`run`].
pub fn read_metrics(path: &Path) -> Result<Vec<TrainMetrics>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(invalid(format!("{}: missing metrics header", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(TrainMetrics::parse_row)
        .collect()
}

/// Trains for `config.train.iters` total iterations, writing the config,
/// metrics log and checkpoints to `out_dir`. `on_metrics` sees every step.
pub fn run<T: Scalar>(opts: &RunOptions, mut on_metrics: impl FnMut(&TrainMetrics)) -> Result<RunSummary> {
    let config = &opts.config;
    config.validate()?;
    let mut trainer = match &opts.resume {
        Some(path) => Trainer::<T>::from_checkpoint(config.clone(), &Checkpoint::load(path)?)?,
        None => Trainer::new(config.clone())?,
    };
    let data = Dataset::load(&opts.data_dir)?;
    let intr = &trainer.intrinsics;
    if let Some(bad) = data
        .images
        .iter()
        .find(|i| i.width != intr.width || i.height != intr.height)
    {
        return Err(GrafError::Dataset(format!(
            "image is {}x{}, config expects {}x{}",
            bad.width, bad.height, intr.width, intr.height
        )));
    }
    fs::create_dir_all(&opts.out_dir).map_err(io_err(&opts.out_dir))?;
    let cfg_path = opts.out_dir.join(CONFIG_FILE);
    fs::write(&cfg_path, config.to_text()).map_err(io_err(&cfg_path))?;

    let metrics_path = opts.out_dir.join(METRICS_FILE);
    let append = opts.resume.is_some() && metrics_path.exists();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&metrics_path)
        .map_err(io_err(&metrics_path))?;
    if !append {
        writeln!(log, "{METRICS_HEADER}").map_err(io_err(&metrics_path))?;
    }

    let start_iteration = trainer.iteration;
    let t = &config.train;
    while trainer.iteration < t.iters {
        let m = trainer.step(&data.images)?;
        if !m.all_finite() {
            return Err(trainer.non_finite("metrics", 2 * (trainer.iteration - 1), Stream::Data));
        }
        if t.log_every > 0 && m.iter % t.log_every == 0 {
            writeln!(log, "{}", m.csv_row()).map_err(io_err(&metrics_path))?;
            log.flush().map_err(io_err(&metrics_path))?;
        }
        on_metrics(&m);
        if t.ckpt_every > 0 && m.iter % t.ckpt_every == 0 {
            trainer
                .to_checkpoint()
                .save(&opts.out_dir.join(checkpoint_name(m.iter)))?;
        }
    }
    let final_checkpoint = opts.out_dir.join(FINAL_CHECKPOINT);
    trainer.to_checkpoint().save(&final_checkpoint)?;
    Ok(RunSummary {
        start_iteration,
        end_iteration: trainer.iteration,
        final_checkpoint,
        metrics_path,
    })
}

/// Generator and its config loaded from a checkpoint.
pub fn load_generator<T: Scalar>(config: &Config, path: &Path) -> Result<RadianceField<T>> {
    let ckpt = Checkpoint::<T>::load(path)?;
    if ckpt.config_hash != config.hash() {
        return Err(GrafError::Checkpoint(format!(
            "{}: config hash does not match the supplied config",
            path.display()
        )));
    }
    RadianceField::from_tensors(config.field.clone(), &ckpt.section("gen"))
}
