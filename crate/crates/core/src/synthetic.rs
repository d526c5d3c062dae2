//! Small generated temporal knowledge graphs with known structure.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};

use crate::data::{Quadruple, Vocabulary};

/// Chronological train/valid/test split of a generated graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGraph {
    pub vocab: Vocabulary,
    pub train: Vec<Quadruple>,
    pub valid: Vec<Quadruple>,
    pub test: Vec<Quadruple>,
}

/// At time `t` every entity `s` emits `(s, t mod R, (s + t) mod E, t)`.
///
/// Each subject's next object is its previous object shifted by one, so the
/// whole stream is predictable from one step of history.
pub fn cyclic(entities: u32, relations: u32, timestamps: u32) -> Vec<Quadruple> {
    let mut out = Vec::with_capacity((entities * timestamps) as usize);
    for t in 0..timestamps {
        for s in 0..entities {
            out.push(Quadruple::new(s, t % relations, (s + t) % entities, t));
        }
    }
    out
}

/// [`cyclic`] with each object replaced by a uniformly drawn entity with
/// probability `noise`.
pub fn noisy_cyclic(entities: u32, relations: u32, timestamps: u32, noise: f64, seed: u64) -> Vec<Quadruple> {
    let mut rng = crate::Rng::seed_from_u64(seed);
    cyclic(entities, relations, timestamps)
        .into_iter()
        .map(|mut q| {
            if rng.random::<f64>() < noise {
                q.object = rng.random_range(0..entities);
            }
            q
        })
        .collect()
}

/// Splits a time-sorted stream at timestamps `valid_from` and `test_from`.
pub fn split_at(quads: &[Quadruple], valid_from: u32, test_from: u32, vocab: Vocabulary) -> SyntheticGraph {
    let pick = |lo: u32, hi: u32| {
        quads
            .iter()
            .filter(|q| q.time >= lo && q.time < hi)
            .copied()
            .collect()
    };
    SyntheticGraph {
        vocab,
        train: pick(0, valid_from),
        valid: pick(valid_from, test_from),
        test: pick(test_from, u32::MAX),
    }
}
