//! Counter-keyed random streams. Every draw site derives its generator from
//! (master seed, stream, counter), so any iteration can be replayed alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Poses = 1,
    Patterns = 2,
    Latents = 3,
    Strata = 4,
    Data = 5,
    Init = 6,
    Scenes = 7,
    Rays = 8,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Seed for the generator of `stream` at `counter`.
pub fn stream_seed(master: u64, stream: Stream, counter: u64) -> u64 {
    splitmix(splitmix(splitmix(master) ^ stream as u64) ^ counter)
}

pub fn stream(master: u64, stream: Stream, counter: u64) -> Rng {
    Rng::seed_from_u64(stream_seed(master, stream, counter))
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// `n` independent standard-normal draws.
pub fn normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
