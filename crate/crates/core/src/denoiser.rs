//! Transformer denoiser that predicts the clean target embedding from a
//! conditioned, noised sequence.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::data::{HistorySample, Vocabulary};
use crate::error::{Error, Result};
use crate::kernel::{Gradients, Tape, Tensor, Var};

/// Standard deviation of embedding initialisation.
pub const EMBEDDING_INIT_STD: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    /// History window `L`; sequences have `L + 1` slots.
    pub history_len: usize,
    /// Diffusion step count `M`.
    pub steps: usize,
    /// Largest time-gap bin.
    pub max_gap: u32,
    /// Score against the input entity table instead of a separate one.
    pub tie_scoring: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: 200,
            layers: 2,
            heads: 4,
            ffn: 800,
            dropout: 0.2,
            history_len: 32,
            steps: 50,
            max_gap: 512,
            tie_scoring: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ffn", self.ffn),
            ("history_len", self.history_len),
            ("steps", self.steps),
            ("max_gap", self.max_gap as usize),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.history_len + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub norm1_gain: Tensor,
    pub norm1_bias: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub norm2_gain: Tensor,
    pub norm2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl LayerParams {
    const NAMES: [&'static str; 16] = [
        "norm1.gain",
        "norm1.bias",
        "attn.wq",
        "attn.bq",
        "attn.wk",
        "attn.bk",
        "attn.wv",
        "attn.bv",
        "attn.wo",
        "attn.bo",
        "norm2.gain",
        "norm2.bias",
        "ffn.w1",
        "ffn.b1",
        "ffn.w2",
        "ffn.b2",
    ];

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.norm1_gain,
            &self.norm1_bias,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.norm2_gain,
            &self.norm2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.norm1_gain,
            &mut self.norm1_bias,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.norm2_gain,
            &mut self.norm2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// Every trainable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    pub entity: Tensor,
    pub relation: Tensor,
    pub time_gap: Tensor,
    pub position: Tensor,
    pub step: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    /// Separate scoring table when scoring is untied.
    pub scoring: Option<Tensor>,
}

fn normal(rows: usize, cols: usize, rng: &mut crate::Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| EMBEDDING_INIT_STD * rng.sample::<f64, _>(StandardNormal))
        .collect();
    param(vec![rows, cols], data)
}

fn xavier(fan_in: usize, fan_out: usize, rng: &mut crate::Rng) -> Tensor {
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    param(vec![fan_in, fan_out], data)
}

fn filled(n: usize, value: f64) -> Tensor {
    param(vec![n], vec![value; n])
}

fn param(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data)
        .expect("shape matches data")
        .with_requires_grad(true)
}

impl DenoiserParams {
    pub fn init(config: &DenoiserConfig, vocab: &Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::Rng::seed_from_u64(seed);
        let h = config.hidden;
        let entity = normal(vocab.num_entities, h, &mut rng);
        let relation = normal(vocab.num_relations(), h, &mut rng);
        let time_gap = normal(config.max_gap as usize + 1, h, &mut rng);
        let position = normal(config.seq_len(), h, &mut rng);
        let step = normal(config.steps, h, &mut rng);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                norm1_gain: filled(h, 1.0),
                norm1_bias: filled(h, 0.0),
                wq: xavier(h, h, &mut rng),
                bq: filled(h, 0.0),
                wk: xavier(h, h, &mut rng),
                bk: filled(h, 0.0),
                wv: xavier(h, h, &mut rng),
                bv: filled(h, 0.0),
                wo: xavier(h, h, &mut rng),
                bo: filled(h, 0.0),
                norm2_gain: filled(h, 1.0),
                norm2_bias: filled(h, 0.0),
                w1: xavier(h, config.ffn, &mut rng),
                b1: filled(config.ffn, 0.0),
                w2: xavier(config.ffn, h, &mut rng),
                b2: filled(h, 0.0),
            })
            .collect();
        let scoring = (!config.tie_scoring).then(|| normal(vocab.num_entities, h, &mut rng));
        Ok(Self {
            config: config.clone(),
            entity,
            relation,
            time_gap,
            position,
            step,
            layers,
            final_gain: filled(h, 1.0),
            final_bias: filled(h, 0.0),
            scoring,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn num_entities(&self) -> usize {
        self.entity.shape()[0]
    }

    pub fn num_relations(&self) -> usize {
        self.relation.shape()[0]
    }

    /// Parameter tensors with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("entity".into(), &self.entity),
            ("relation".into(), &self.relation),
            ("time_gap".into(), &self.time_gap),
            ("position".into(), &self.position),
            ("step".into(), &self.step),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LayerParams::NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final.gain".into(), &self.final_gain));
        out.push(("final.bias".into(), &self.final_bias));
        if let Some(s) = &self.scoring {
            out.push(("scoring".into(), s));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("entity".into(), &mut self.entity),
            ("relation".into(), &mut self.relation),
            ("time_gap".into(), &mut self.time_gap),
            ("position".into(), &mut self.position),
            ("step".into(), &mut self.step),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (name, t) in LayerParams::NAMES.iter().zip(layer.tensors_mut()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final.gain".into(), &mut self.final_gain));
        out.push(("final.bias".into(), &mut self.final_bias));
        if let Some(s) = &mut self.scoring {
            out.push(("scoring".into(), s));
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter on the tape. With `trainable` false the leaves
    /// receive no gradients.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut reg = |t: &Tensor| {
            if trainable {
                tape.param(t)
            } else {
                tape.leaf(&t.clone().with_requires_grad(false))
            }
        };
        ParamVars {
            entity: reg(&self.entity),
            relation: reg(&self.relation),
            time_gap: reg(&self.time_gap),
            position: reg(&self.position),
            step: reg(&self.step),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    norm1_gain: reg(&l.norm1_gain),
                    norm1_bias: reg(&l.norm1_bias),
                    wq: reg(&l.wq),
                    bq: reg(&l.bq),
                    wk: reg(&l.wk),
                    bk: reg(&l.bk),
                    wv: reg(&l.wv),
                    bv: reg(&l.bv),
                    wo: reg(&l.wo),
                    bo: reg(&l.bo),
                    norm2_gain: reg(&l.norm2_gain),
                    norm2_bias: reg(&l.norm2_bias),
                    w1: reg(&l.w1),
                    b1: reg(&l.b1),
                    w2: reg(&l.w2),
                    b2: reg(&l.b2),
                })
                .collect(),
            final_gain: reg(&self.final_gain),
            final_bias: reg(&self.final_bias),
            scoring: self.scoring.as_ref().map(&mut reg),
        }
    }

    /// Copies gradients from a finished backward pass into every tensor.
    pub fn absorb_gradients(&mut self, grads: &Gradients, vars: &ParamVars) -> Result<()> {
        let order = vars.ordered();
        for ((_, t), v) in self.named_mut().into_iter().zip(order) {
            grads.write_into(v, t)?;
        }
        Ok(())
    }

    /// Replaces parameter values by name, e.g. from a checkpoint.
    pub fn load_named(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        let mut slots = self.named_mut();
        if slots.len() != values.len() {
            return Err(Error::Contract(format!(
                "expected {} parameter tensors, found {}",
                slots.len(),
                values.len()
            )));
        }
        for ((name, slot), (vname, value)) in slots.iter_mut().zip(values) {
            if name != vname || slot.shape() != value.shape() {
                return Err(Error::Contract(format!(
                    "parameter mismatch: expected `{name}` {:?}, found `{vname}` {:?}",
                    slot.shape(),
                    value.shape()
                )));
            }
            slot.data_mut().copy_from_slice(value.data());
            slot.zero_grad();
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub norm1_gain: Var,
    pub norm1_bias: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub norm2_gain: Var,
    pub norm2_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Tape handles of every parameter, mirroring [`DenoiserParams`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub entity: Var,
    pub relation: Var,
    pub time_gap: Var,
    pub position: Var,
    pub step: Var,
    pub layers: Vec<LayerVars>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub scoring: Option<Var>,
}

impl ParamVars {
    /// Same order as [`DenoiserParams::named`].
    fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.entity, self.relation, self.time_gap, self.position, self.step];
        for l in &self.layers {
            out.extend([
                l.norm1_gain,
                l.norm1_bias,
                l.wq,
                l.bq,
                l.wk,
                l.bk,
                l.wv,
                l.bv,
                l.wo,
                l.bo,
                l.norm2_gain,
                l.norm2_bias,
                l.w1,
                l.b1,
                l.w2,
                l.b2,
            ]);
        }
        out.push(self.final_gain);
        out.push(self.final_bias);
        out.extend(self.scoring);
        out
    }

    /// Inverse of the internal ordering, for callers that record parameter
    /// leaves themselves.
    pub fn from_ordered(vars: &[Var], layers: usize, scoring: bool) -> Result<Self> {
        let expected = 5 + 16 * layers + 2 + usize::from(scoring);
        if vars.len() != expected {
            return Err(Error::Contract(format!(
                "expected {expected} parameter variables, got {}",
                vars.len()
            )));
        }
        let layer_vars = vars[5..5 + 16 * layers]
            .chunks(16)
            .map(|c| LayerVars {
                norm1_gain: c[0],
                norm1_bias: c[1],
                wq: c[2],
                bq: c[3],
                wk: c[4],
                bk: c[5],
                wv: c[6],
                bv: c[7],
                wo: c[8],
                bo: c[9],
                norm2_gain: c[10],
                norm2_bias: c[11],
                w1: c[12],
                b1: c[13],
                w2: c[14],
                b2: c[15],
            })
            .collect();
        let tail = 5 + 16 * layers;
        Ok(Self {
            entity: vars[0],
            relation: vars[1],
            time_gap: vars[2],
            position: vars[3],
            step: vars[4],
            layers: layer_vars,
            final_gain: vars[tail],
            final_bias: vars[tail + 1],
            scoring: scoring.then(|| vars[tail + 2]),
        })
    }

    /// Table used to score entities.
    pub fn scoring_table(&self) -> Var {
        self.scoring.unwrap_or(self.entity)
    }
}

/// Embedded history of a batch of samples.
#[derive(Debug, Clone)]
pub struct EmbeddedHistory {
    /// `[n·L, h]` history object embeddings.
    pub objects: Var,
    /// `[n·(L+1), h]` relation plus time-gap embeddings per slot.
    pub conditioning: Var,
    /// `n·(L+1)` slot mask; target slots are always on.
    pub mask: Vec<bool>,
    pub n: usize,
}

/// Looks up object, relation and time-gap embeddings for a batch.
pub fn embed_history(
    tape: &mut Tape,
    vars: &ParamVars,
    config: &DenoiserConfig,
    samples: &[HistorySample],
) -> Result<EmbeddedHistory> {
    let l = config.history_len;
    let n = samples.len();
    let mut objects = Vec::with_capacity(n * l);
    let mut relations = Vec::with_capacity(n * (l + 1));
    let mut gaps = Vec::with_capacity(n * (l + 1));
    let mut mask = Vec::with_capacity(n * (l + 1));
    for s in samples {
        if s.history_len() != l {
            return Err(Error::Shape {
                op: "embed_history",
                left: vec![l],
                right: vec![s.history_len()],
            });
        }
        objects.extend(s.objects.iter().map(|&o| o as usize));
        relations.extend(s.relations.iter().map(|&r| r as usize));
        relations.push(s.relation as usize);
        gaps.extend(s.time_gaps.iter().map(|&g| g.min(config.max_gap) as usize));
        gaps.push(HistorySample::QUERY_GAP as usize);
        mask.extend_from_slice(&s.mask);
        mask.push(true);
    }
    let objects = tape.gather(vars.entity, &objects)?;
    let rel = tape.gather(vars.relation, &relations)?;
    let gap = tape.gather(vars.time_gap, &gaps)?;
    let conditioning = tape.add(rel, gap)?;
    Ok(EmbeddedHistory {
        objects,
        conditioning,
        mask,
        n,
    })
}

/// Runs the encoder over `n` sequences and returns the target-slot outputs
/// `[n, h]`.
///
/// `input` is `[n·(L+1), h]` with conditioning already added. Masked slots
/// are excluded as attention keys.
#[allow(clippy::too_many_arguments)]
pub fn denoise<R: Rng + ?Sized>(
    tape: &mut Tape,
    vars: &ParamVars,
    config: &DenoiserConfig,
    input: Var,
    n: usize,
    m: usize,
    mask: &[bool],
    train_mode: bool,
    rng: &mut R,
) -> Result<Var> {
    let seq = config.seq_len();
    if mask.len() != n * seq {
        return Err(Error::Shape {
            op: "denoise",
            left: vec![n * seq],
            right: vec![mask.len()],
        });
    }
    if m == 0 || m > config.steps {
        return Err(Error::Index {
            what: "diffusion step",
            index: m,
            bound: config.steps + 1,
        });
    }
    if let Some(i) = (0..n).find(|i| !mask[i * seq + seq - 1]) {
        return Err(Error::Contract(format!(
            "target slot of sequence {i} is masked out"
        )));
    }
    let positions: Vec<usize> = (0..n).flat_map(|_| 0..seq).collect();
    let pos = tape.gather(vars.position, &positions)?;
    let step = tape.gather(vars.step, &vec![m - 1; n * seq])?;
    let x = tape.add(input, pos)?;
    let mut x = tape.add(x, step)?;
    let p = if train_mode { config.dropout } else { 0.0 };
    x = tape.dropout(x, p, rng)?;
    for layer in &vars.layers {
        let a = tape.layer_norm(x, layer.norm1_gain, layer.norm1_bias)?;
        let q = tape.linear(a, layer.wq, layer.bq)?;
        let k = tape.linear(a, layer.wk, layer.bk)?;
        let v = tape.linear(a, layer.wv, layer.bv)?;
        let att = tape.attention(q, k, v, mask, n, seq, config.heads)?;
        let o = tape.linear(att, layer.wo, layer.bo)?;
        let o = tape.dropout(o, p, rng)?;
        x = tape.add(x, o)?;

        let b = tape.layer_norm(x, layer.norm2_gain, layer.norm2_bias)?;
        let f = tape.linear(b, layer.w1, layer.b1)?;
        let f = tape.relu(f);
        let f = tape.linear(f, layer.w2, layer.b2)?;
        let f = tape.dropout(f, p, rng)?;
        x = tape.add(x, f)?;
    }
    let targets: Vec<usize> = (0..n).map(|i| i * seq + seq - 1).collect();
    let out = tape.gather(x, &targets)?;
    tape.layer_norm(out, vars.final_gain, vars.final_bias)
}

/// Entity logits `ô₀ · Eᵀ`.
pub fn entity_logits(tape: &mut Tape, predicted: Var, table: Var) -> Result<Var> {
    tape.matmul_nt(predicted, table)
}

/// Row-stochastic `softmax(ô₀ · Eᵀ / τ)`.
pub fn score_entities(tape: &mut Tape, predicted: Var, table: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let logits = entity_logits(tape, predicted, table)?;
    tape.softmax(logits, temperature)
}

#[cfg(test)]
mod tests;
