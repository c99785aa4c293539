//! Frame-order perturbations of training videos.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::VideoSample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perturbation {
    Shuffle,
    Reverse,
}

impl std::str::FromStr for Perturbation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shuffle" => Ok(Perturbation::Shuffle),
            "reverse" => Ok(Perturbation::Reverse),
            _ => Err(Error::Config(format!("unknown perturbation `{s}` (shuffle|reverse)"))),
        }
    }
}

/// The `floor(fraction * n)` video indices chosen for seed `seed`, sorted.
pub fn perturbed_subset(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("perturbation fraction {fraction} not in [0,1]")));
    }
    let k = (fraction * n as f64 + 1e-9).floor() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = idx[..k.min(n)].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Reorders the frames of a seeded subset of videos. Each frame keeps its
/// annotations and features; frame numbers stay in increasing positional
/// order, so the content moves but the numbering does not.
pub fn perturb_videos(
    videos: &[VideoSample],
    fraction: f64,
    mode: Perturbation,
    seed: u64,
) -> Result<(Vec<VideoSample>, Vec<usize>)> {
    let chosen = perturbed_subset(videos.len(), fraction, seed)?;
    let mut out = videos.to_vec();
    for &vi in &chosen {
        let v = &mut out[vi];
        let numbers: Vec<usize> = v.frames.iter().map(|f| f.index).collect();
        match mode {
            Perturbation::Reverse => v.frames.reverse(),
            Perturbation::Shuffle => {
                let mut rng = ChaCha8Rng::seed_from_u64(crate::numerics::params::mix_seed(&[seed, vi as u64]));
                v.frames.shuffle(&mut rng);
            }
        }
        for (f, n) in v.frames.iter_mut().zip(numbers) {
            f.index = n;
        }
    }
    Ok((out, chosen))
}
