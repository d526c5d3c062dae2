//! Linear cumulative noise schedule and the forward (noising) process.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernel::{Tape, Var};

/// Cumulative noise levels `1 − ᾱ_m` for `m = 1..=M`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    scale: f64,
    alpha_min: f64,
    alpha_max: f64,
    one_minus_alpha_bar: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `1 − ᾱ_m = δ·(α_min + (m−1)/(M−1)·(α_max − α_min))`.
    ///
    /// The interpolation is evaluated as `α_min·(1−f) + α_max·f` so that
    /// both endpoints are reproduced exactly.
    pub fn linear(steps: usize, scale: f64, alpha_min: f64, alpha_max: f64) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Config(format!("diffusion needs at least 2 steps, got {steps}")));
        }
        if !(alpha_min > 0.0 && alpha_min <= alpha_max) {
            return Err(Error::Config(format!(
                "noise bounds must satisfy 0 < alpha_min <= alpha_max, got {alpha_min}, {alpha_max}"
            )));
        }
        if !(scale > 0.0) {
            return Err(Error::Config(format!("noise scale must be positive, got {scale}")));
        }
        if !(scale * alpha_max < 1.0) {
            return Err(Error::Config(format!(
                "scale * alpha_max = {} >= 1: signal coefficient would be non-positive",
                scale * alpha_max
            )));
        }
        let last = (steps - 1) as f64;
        let one_minus_alpha_bar: Vec<f64> = (0..steps)
            .map(|i| {
                let f = i as f64 / last;
                scale * (alpha_min * (1.0 - f) + alpha_max * f)
            })
            .collect();
        let alpha_bar = one_minus_alpha_bar.iter().map(|v| 1.0 - v).collect();
        Ok(Self {
            steps,
            scale,
            alpha_min,
            alpha_max,
            one_minus_alpha_bar,
            alpha_bar,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn alpha_min(&self) -> f64 {
        self.alpha_min
    }

    pub fn alpha_max(&self) -> f64 {
        self.alpha_max
    }

    /// Noise levels, index 0 holding step 1.
    pub fn noise_levels(&self) -> &[f64] {
        &self.one_minus_alpha_bar
    }

    fn index(&self, m: usize) -> Result<usize> {
        if m == 0 || m > self.steps {
            return Err(Error::Index {
                what: "diffusion step",
                index: m,
                bound: self.steps + 1,
            });
        }
        Ok(m - 1)
    }

    /// `1 − ᾱ_m` for 1-based `m`.
    pub fn one_minus_alpha_bar(&self, m: usize) -> Result<f64> {
        Ok(self.one_minus_alpha_bar[self.index(m)?])
    }

    pub fn alpha_bar(&self, m: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.index(m)?])
    }

    /// `(√ᾱ_m, √(1 − ᾱ_m))`.
    pub fn coefficients(&self, m: usize) -> Result<(f64, f64)> {
        let i = self.index(m)?;
        Ok((
            libm::sqrt(self.alpha_bar[i]),
            libm::sqrt(self.one_minus_alpha_bar[i]),
        ))
    }

    /// `(m, 1 − ᾱ_m, √ᾱ_m)` rows for every step.
    pub fn rows(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.one_minus_alpha_bar
            .iter()
            .zip(&self.alpha_bar)
            .enumerate()
            .map(|(i, (&n, &a))| (i + 1, n, libm::sqrt(a)))
    }
}

/// Uniform step in `1..=steps`.
pub fn sample_step<R: Rng + ?Sized>(rng: &mut R, steps: usize) -> usize {
    rng.random_range(1..=steps.max(1))
}

/// `n` independent standard normal draws.
pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `√ᾱ_m · clean + √(1−ᾱ_m) · noise`, elementwise.
pub fn diffuse_values(clean: &[f64], noise: &[f64], m: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if clean.len() != noise.len() {
        return Err(Error::Shape {
            op: "diffuse",
            left: alloc::vec![clean.len()],
            right: alloc::vec![noise.len()],
        });
    }
    let (signal, sigma) = schedule.coefficients(m)?;
    Ok(clean
        .iter()
        .zip(noise)
        .map(|(c, e)| signal * c + sigma * e)
        .collect())
}

/// One noised branch.
#[derive(Debug, Clone)]
pub struct Noised {
    pub value: Var,
    pub noise: Vec<f64>,
}

/// Positive and negative targets noised at a shared step with independent
/// draws.
#[derive(Debug, Clone)]
pub struct DiffusedTarget {
    pub positive: Noised,
    pub negative: Noised,
    pub step: usize,
}

/// Noises `clean` on the tape; gradients flow back into `clean`.
pub fn forward_diffuse<R: Rng + ?Sized>(
    tape: &mut Tape,
    clean: Var,
    m: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Noised> {
    let (signal, sigma) = schedule.coefficients(m)?;
    let shape = tape.shape(clean).to_vec();
    let noise = gaussian(rng, tape.value(clean).len());
    let scaled_noise = tape.constant(shape, noise.iter().map(|e| sigma * e).collect())?;
    let kept = tape.scale(clean, signal);
    let value = tape.add(kept, scaled_noise)?;
    Ok(Noised { value, noise })
}

/// Noises both branches at one step: positive first, then negative.
pub fn diffuse_pair<R: Rng + ?Sized>(
    tape: &mut Tape,
    positive: Var,
    negative: Var,
    m: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<DiffusedTarget> {
    let positive = forward_diffuse(tape, positive, m, schedule, rng)?;
    let negative = forward_diffuse(tape, negative, m, schedule, rng)?;
    Ok(DiffusedTarget {
        positive,
        negative,
        step: m,
    })
}

/// Lays out `n` sequences of `history_len` history rows followed by one
/// target row, then adds the per-slot conditioning.
///
/// `history` is `[n·L, h]`, `target` is `[n, h]`, `conditioning` is
/// `[n·(L+1), h]`.
pub fn assemble_sequence(
    tape: &mut Tape,
    history: Var,
    target: Var,
    conditioning: Var,
    n: usize,
    history_len: usize,
) -> Result<Var> {
    let h = tape.shape(target).get(1).copied().unwrap_or(0);
    if tape.shape(history) != [n * history_len, h] || tape.shape(target) != [n, h] {
        return Err(Error::Shape {
            op: "assemble_sequence",
            left: tape.shape(history).to_vec(),
            right: tape.shape(target).to_vec(),
        });
    }
    let stacked = tape.concat_rows(&[history, target])?;
    let mut order = Vec::with_capacity(n * (history_len + 1));
    for i in 0..n {
        order.extend(i * history_len..(i + 1) * history_len);
        order.push(n * history_len + i);
    }
    let seq = tape.gather(stacked, &order)?;
    tape.add(seq, conditioning)
}

/// Inference input: history rows plus a pure Gaussian target slot, with
/// conditioning added.
pub fn make_inference_input<R: Rng + ?Sized>(
    tape: &mut Tape,
    history: Var,
    conditioning: Var,
    n: usize,
    history_len: usize,
    rng: &mut R,
) -> Result<Var> {
    let h = tape.shape(conditioning).get(1).copied().unwrap_or(0);
    let noise = tape.constant(alloc::vec![n, h], gaussian(rng, n * h))?;
    assemble_sequence(tape, history, noise, conditioning, n, history_len)
}
