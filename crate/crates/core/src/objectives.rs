//! Training losses and the per-batch training step.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::TimestampBatch;
use crate::denoiser::{denoise, embed_history, score_entities, DenoiserConfig, DenoiserParams, ParamVars};
use crate::diffusion::{assemble_sequence, diffuse_pair, sample_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::kernel::{AdamState, Tape, Tensor, Var};
use crate::negsample::negative_prototypes;

/// Added inside every logarithm of the objective.
pub const NUMERIC_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the plain reconstruction term; 1 disables negatives.
    pub lambda: f64,
    pub gamma: f64,
    /// Softmax temperature for entity scores.
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            gamma: 1.0,
            tau: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Loss values of one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub negative: f64,
    pub total: f64,
    pub batch_size: usize,
    pub negatives_applied: bool,
    /// Diffusion step drawn for the batch.
    pub step: usize,
}

/// `mean_i −log(Y[i, gold_i] + ε)`.
pub fn reconstruction_loss(tape: &mut Tape, probabilities: Var, gold: &[usize]) -> Result<Var> {
    let picked = tape.pick(probabilities, gold)?;
    let shifted = tape.add_scalar(picked, NUMERIC_EPS);
    let logp = tape.log(shifted)?;
    let mean = tape.mean(logp)?;
    Ok(tape.scale(mean, -1.0))
}

/// `mean_i (cos(clean_i, denoised_i) − 1)²`, or a constant 0 when the batch
/// has no negatives.
pub fn negative_cosine_loss(tape: &mut Tape, clean: Var, denoised: Var, applied: bool) -> Result<Var> {
    if tape.shape(clean) != tape.shape(denoised) {
        return Err(Error::Shape {
            op: "negative_cosine_loss",
            left: tape.shape(clean).to_vec(),
            right: tape.shape(denoised).to_vec(),
        });
    }
    if !applied {
        return tape.constant(Vec::new(), vec![0.0]);
    }
    let a = tape.l2_normalize(clean);
    let b = tape.l2_normalize(denoised);
    let prod = tape.mul(a, b)?;
    let cos = tape.sum_rows(prod);
    let diff = tape.add_scalar(cos, -1.0);
    let sq = tape.mul(diff, diff)?;
    tape.mean(sq)
}

/// `−(1−λ)·log σ(−γ(L_r − L_neg) + ε) + λ·L_r`.
pub fn combined_loss(tape: &mut Tape, reconstruction: Var, negative: Var, config: &LossConfig) -> Result<Var> {
    let gap = tape.sub(reconstruction, negative)?;
    let arg = tape.scale(gap, -config.gamma);
    let arg = tape.add_scalar(arg, NUMERIC_EPS);
    let ls = tape.log_sigmoid(arg);
    let contrast = tape.scale(ls, -(1.0 - config.lambda));
    let plain = tape.scale(reconstruction, config.lambda);
    tape.add(contrast, plain)
}

/// Tape handles of the three losses.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub reconstruction: Var,
    pub negative: Var,
    pub total: Var,
    pub negatives_applied: bool,
    pub step: usize,
}

/// Builds the full objective of one batch on `tape`.
///
/// Draws the diffusion step, then noise for the positive and negative
/// branches, then dropout masks, all from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective<R: Rng + ?Sized>(
    tape: &mut Tape,
    vars: &ParamVars,
    config: &DenoiserConfig,
    batch: &TimestampBatch,
    schedule: &NoiseSchedule,
    loss: &LossConfig,
    train_mode: bool,
    rng: &mut R,
) -> Result<LossVars> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch is empty"));
    }
    if schedule.steps() != config.steps {
        return Err(Error::Config(format!(
            "schedule has {} steps but the denoiser expects {}",
            schedule.steps(),
            config.steps
        )));
    }
    let n = batch.len();
    let l = config.history_len;
    let gold: Vec<usize> = batch.samples.iter().map(|s| s.object as usize).collect();
    let history = embed_history(tape, vars, config, &batch.samples)?;
    let clean = tape.gather(vars.entity, &gold)?;
    let negatives = negative_prototypes(tape, clean)?;

    let m = sample_step(rng, schedule.steps());
    let noised = diffuse_pair(tape, clean, negatives.prototypes, m, schedule, rng)?;

    let seq = assemble_sequence(tape, history.objects, noised.positive.value, history.conditioning, n, l)?;
    let denoised = denoise(tape, vars, config, seq, n, m, &history.mask, train_mode, rng)?;
    let probs = score_entities(tape, denoised, vars.scoring_table(), loss.tau)?;
    let reconstruction = reconstruction_loss(tape, probs, &gold)?;

    let negative = if negatives.valid {
        let seq = assemble_sequence(tape, history.objects, noised.negative.value, history.conditioning, n, l)?;
        let denoised_neg = denoise(tape, vars, config, seq, n, m, &history.mask, train_mode, rng)?;
        negative_cosine_loss(tape, negatives.prototypes, denoised_neg, true)?
    } else {
        negative_cosine_loss(tape, negatives.prototypes, negatives.prototypes, false)?
    };
    let total = combined_loss(tape, reconstruction, negative, loss)?;
    Ok(LossVars {
        reconstruction,
        negative,
        total,
        negatives_applied: negatives.valid,
        step: m,
    })
}

/// One optimisation step on a timestamp batch.
pub fn train_step<R: Rng + ?Sized>(
    batch: &TimestampBatch,
    params: &mut DenoiserParams,
    schedule: &NoiseSchedule,
    optimizer: &mut AdamState,
    loss: &LossConfig,
    rng: &mut R,
) -> Result<LossBreakdown> {
    loss.validate()?;
    let config = params.config().clone();
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, true);
    let out = batch_objective(&mut tape, &vars, &config, batch, schedule, loss, true, rng)?;
    let breakdown = LossBreakdown {
        reconstruction: tape.value(out.reconstruction)[0],
        negative: tape.value(out.negative)[0],
        total: tape.value(out.total)[0],
        batch_size: batch.len(),
        negatives_applied: out.negatives_applied,
        step: out.step,
    };
    for (name, v) in [
        ("reconstruction loss", breakdown.reconstruction),
        ("negative cosine loss", breakdown.negative),
        ("total loss", breakdown.total),
    ] {
        if v.is_nan() {
            return Err(Error::NonFinite(format!("{name} at timestamp {}", batch.time)));
        }
    }
    let grads = tape.backward(out.total)?;
    params.absorb_gradients(&grads, &vars)?;
    let mut named = params.named_mut();
    let mut slots: Vec<(&str, &mut Tensor)> = named.iter_mut().map(|(n, t)| (n.as_str(), &mut **t)).collect();
    optimizer.step(&mut slots)?;
    Ok(breakdown)
}

/// Mean losses over one pass through the batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSummary {
    pub steps: usize,
    pub reconstruction: f64,
    pub negative: f64,
    pub total: f64,
}

impl EpochSummary {
    pub fn from_steps(steps: &[LossBreakdown]) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::Empty("no training data"));
        }
        let n = steps.len() as f64;
        Ok(Self {
            steps: steps.len(),
            reconstruction: steps.iter().map(|s| s.reconstruction).sum::<f64>() / n,
            negative: steps.iter().map(|s| s.negative).sum::<f64>() / n,
            total: steps.iter().map(|s| s.total).sum::<f64>() / n,
        })
    }
}

/// Runs [`train_step`] over `batches` in order.
pub fn train_epoch<R: Rng + ?Sized>(
    batches: &[TimestampBatch],
    params: &mut DenoiserParams,
    schedule: &NoiseSchedule,
    optimizer: &mut AdamState,
    loss: &LossConfig,
    rng: &mut R,
) -> Result<EpochSummary> {
    if batches.is_empty() {
        return Err(Error::Empty("no training data"));
    }
    let steps = batches
        .iter()
        .map(|b| train_step(b, params, schedule, optimizer, loss, rng))
        .collect::<Result<Vec<_>>>()?;
    EpochSummary::from_steps(&steps)
}

/// Total loss as a plain function of parameter tensors, for finite-difference
/// checks. Dropout is disabled and the noise stream restarts from `seed`.
pub fn objective_value(
    tape: &mut Tape,
    params: &[Var],
    config: &DenoiserConfig,
    batch: &TimestampBatch,
    schedule: &NoiseSchedule,
    loss: &LossConfig,
    seed: u64,
) -> Result<Var> {
    use rand::SeedableRng;
    let vars = ParamVars::from_ordered(params, config.layers, !config.tie_scoring)?;
    let mut rng = crate::Rng::seed_from_u64(seed);
    Ok(batch_objective(tape, &vars, config, batch, schedule, loss, false, &mut rng)?.total)
}
