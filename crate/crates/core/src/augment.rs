//! Spatio-temporal augmentation producing the contrast view of a window.
//!
//! The contrast view starts `delta_t` frames later and has its region
//! columns shuffled independently in every frame.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::synth::{Stmap, CHANNELS, MAX_OFFSET};

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("raw window has {actual} frames, expected {expected}")]
    WrongLength { expected: usize, actual: usize },
    #[error("metadata does not fit the window: {0}")]
    MetaMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentMeta {
    /// One permutation of `0..W` per output frame.
    pub permutations: Vec<Vec<usize>>,
    pub delta_t: usize,
    pub rng_seed: u64,
}

impl AugmentMeta {
    /// No offset and identity permutations.
    pub fn identity(frames: usize, width: usize) -> Self {
        Self {
            permutations: vec![(0..width).collect(); frames],
            delta_t: 0,
            rng_seed: 0,
        }
    }

    pub fn is_valid(&self, width: usize) -> bool {
        self.delta_t <= MAX_OFFSET
            && self.permutations.iter().all(|p| {
                let mut s = p.clone();
                s.sort_unstable();
                s.len() == width && s.iter().enumerate().all(|(i, &v)| i == v)
            })
    }
}

/// Uniform offset on `0..=MAX_OFFSET` and one Fisher-Yates shuffle per frame.
pub fn sample_meta<R: Rng>(rng: &mut R, frames: usize, width: usize) -> AugmentMeta {
    let delta_t = rng.random_range(0..=MAX_OFFSET as u32) as usize;
    let permutations = (0..frames)
        .map(|_| {
            let mut p: Vec<usize> = (0..width).collect();
            p.shuffle(rng);
            p
        })
        .collect();
    AugmentMeta {
        permutations,
        delta_t,
        rng_seed: 0,
    }
}

/// Original and contrast views before normalization.
pub fn apply_meta(
    raw: &Stmap,
    frames: usize,
    meta: &AugmentMeta,
) -> Result<(Stmap, Stmap), AugmentError> {
    if raw.frames != frames + MAX_OFFSET {
        return Err(AugmentError::WrongLength {
            expected: frames + MAX_OFFSET,
            actual: raw.frames,
        });
    }
    if meta.permutations.len() != frames || !meta.is_valid(raw.width) {
        return Err(AugmentError::MetaMismatch(format!(
            "{} permutations for {frames} frames of width {}",
            meta.permutations.len(),
            raw.width
        )));
    }
    let original = raw
        .frames_slice(0, frames)
        .expect("length checked above");
    let shifted = raw
        .frames_slice(meta.delta_t, frames)
        .expect("offset within MAX_OFFSET");
    let w = raw.width;
    let mut data = vec![0.0; shifted.data.len()];
    for (t, perm) in meta.permutations.iter().enumerate() {
        for (i, &dst) in perm.iter().enumerate() {
            for c in 0..CHANNELS {
                data[(t * w + dst) * CHANNELS + c] = shifted.data[(t * w + i) * CHANNELS + c];
            }
        }
    }
    let contrast = Stmap { data, ..shifted };
    Ok((original, contrast))
}

/// Result of [`augment`].
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPair {
    pub x: Stmap,
    pub x_aug: Stmap,
    pub meta: AugmentMeta,
}

/// Splits a `frames + MAX_OFFSET` window into the normalized original view
/// (first `frames` frames) and the normalized contrast view.
pub fn augment(raw: &Stmap, frames: usize, seed: u64) -> Result<AugmentedPair, AugmentError> {
    if raw.frames != frames + MAX_OFFSET {
        return Err(AugmentError::WrongLength {
            expected: frames + MAX_OFFSET,
            actual: raw.frames,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut meta = sample_meta(&mut rng, frames, raw.width);
    meta.rng_seed = seed;
    let (x, x_aug) = apply_meta(raw, frames, &meta)?;
    Ok(AugmentedPair {
        x: x.normalized(),
        x_aug: x_aug.normalized(),
        meta,
    })
}
