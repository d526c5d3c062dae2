//! Filtered ranking metrics and single-shot inference over query sets.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;

use crate::data::{augment_inverse, HistorySample, Quadruple, Vocabulary};
use crate::denoiser::{denoise, embed_history, entity_logits, DenoiserParams};
use crate::diffusion::{assemble_sequence, gaussian, NoiseSchedule};
use crate::error::{Error, Result};
use crate::kernel::Tape;

/// Every true object of each `(subject, relation, time)` key.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FilterIndex {
    map: BTreeMap<(u32, u32, u32), BTreeSet<u32>>,
}

impl FilterIndex {
    /// Indexes already-augmented quadruples.
    pub fn build(splits: &[&[Quadruple]]) -> Self {
        let mut map: BTreeMap<_, BTreeSet<u32>> = BTreeMap::new();
        for q in splits.iter().flat_map(|s| s.iter()) {
            map.entry((q.subject, q.relation, q.time)).or_default().insert(q.object);
        }
        Self { map }
    }

    /// Augments each split with inverses, then indexes.
    pub fn from_raw(splits: &[&[Quadruple]], vocab: &Vocabulary) -> Result<Self> {
        let augmented = splits
            .iter()
            .map(|s| augment_inverse(s, vocab))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[Quadruple]> = augmented.iter().map(Vec::as_slice).collect();
        Ok(Self::build(&refs))
    }

    pub fn objects(&self, subject: u32, relation: u32, time: u32) -> Option<&BTreeSet<u32>> {
        self.map.get(&(subject, relation, time))
    }

    /// Number of distinct keys.
    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// 1-based rank of `gold` among candidates outside `filter`; ties count
/// against the gold.
pub fn filtered_rank(scores: &[f64], gold: usize, filter: Option<&BTreeSet<u32>>) -> Result<usize> {
    let g = *scores.get(gold).ok_or(Error::Index {
        what: "gold entity",
        index: gold,
        bound: scores.len(),
    })?;
    if g.is_nan() {
        return Err(Error::NonFinite(format!("score of gold entity {gold}")));
    }
    let mut rank = 1;
    for (e, &s) in scores.iter().enumerate() {
        if e == gold || filter.is_some_and(|f| f.contains(&(e as u32))) {
            continue;
        }
        if s >= g || s.is_nan() {
            rank += 1;
        }
    }
    Ok(rank)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub ranks: Vec<usize>,
    pub count: usize,
}

impl MetricReport {
    pub fn from_ranks(ranks: Vec<usize>) -> Result<Self> {
        if ranks.is_empty() {
            return Err(Error::Empty("no queries to evaluate"));
        }
        if ranks.contains(&0) {
            return Err(Error::Contract("ranks are 1-based".into()));
        }
        let n = ranks.len() as f64;
        let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Ok(Self {
            mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
            hits1: hits(1),
            hits3: hits(3),
            hits10: hits(10),
            count: ranks.len(),
            ranks,
        })
    }

    /// Report over the queries whose `mask` entry is true.
    pub fn subset(&self, mask: &[bool]) -> Result<Self> {
        if mask.len() != self.ranks.len() {
            return Err(Error::Shape {
                op: "metric subset",
                left: vec![self.ranks.len()],
                right: vec![mask.len()],
            });
        }
        let ranks: Vec<usize> = self
            .ranks
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&r, _)| r)
            .collect();
        if ranks.is_empty() {
            return Err(Error::Empty("empty subset"));
        }
        Self::from_ranks(ranks)
    }
}

/// True for queries whose `(s, r, o)` never occurs in the training facts.
pub fn unseen_mask(train: &[Quadruple], vocab: &Vocabulary, samples: &[HistorySample]) -> Result<Vec<bool>> {
    let seen: BTreeSet<(u32, u32, u32)> = augment_inverse(train, vocab)?
        .iter()
        .map(|q| (q.subject, q.relation, q.object))
        .collect();
    Ok(samples
        .iter()
        .map(|s| !seen.contains(&(s.subject, s.relation, s.object)))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOptions {
    pub seed: u64,
    /// Independent noise draws whose scores are averaged.
    pub repeats: usize,
    /// Walk the reverse chain step by step instead of denoising once from
    /// step `M`.
    pub iterative: bool,
    /// Queries per forward pass; does not affect results.
    pub chunk: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            repeats: 1,
            iterative: false,
            chunk: 256,
        }
    }
}

/// Noise stream of one query: identical whichever worker evaluates it.
pub fn query_rng(seed: u64, query: u64) -> crate::Rng {
    let mut rng = crate::Rng::seed_from_u64(seed);
    rng.set_stream(query);
    rng
}

/// Entity scores `ô₀ · Eᵀ` of `samples`, flattened `[n, |E|]`.
///
/// `first_index` is the global position of `samples[0]`, which selects the
/// per-query noise streams.
pub fn score_queries(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    samples: &[HistorySample],
    first_index: u64,
    options: &EvalOptions,
) -> Result<Vec<f64>> {
    let config = params.config();
    if options.repeats == 0 || options.chunk == 0 {
        return Err(Error::Config("repeats and chunk size must be positive".into()));
    }
    if schedule.steps() != config.steps {
        return Err(Error::Config(format!(
            "schedule has {} steps but the denoiser expects {}",
            schedule.steps(),
            config.steps
        )));
    }
    let e = params.num_entities();
    let h = config.hidden;
    let mut out = Vec::with_capacity(samples.len() * e);
    for (c, chunk) in samples.chunks(options.chunk).enumerate() {
        let n = chunk.len();
        let base = first_index + (c * options.chunk) as u64;
        let mut rngs: Vec<crate::Rng> = (0..n).map(|i| query_rng(options.seed, base + i as u64)).collect();
        let mut sum = vec![0.0; n * e];
        for _ in 0..options.repeats {
            let mut noise = Vec::with_capacity(n * h);
            for rng in &mut rngs {
                noise.extend(gaussian(rng, h));
            }
            let predicted = if options.iterative {
                reverse_chain(params, schedule, chunk, noise, &mut rngs)?
            } else {
                denoise_once(params, chunk, noise, config.steps)?
            };
            let mut tape = Tape::new();
            let vars = params.register(&mut tape, false);
            let pred = tape.constant(vec![n, h], predicted)?;
            let logits = entity_logits(&mut tape, pred, vars.scoring_table())?;
            for (acc, v) in sum.iter_mut().zip(tape.value(logits)) {
                *acc += v;
            }
        }
        let k = options.repeats as f64;
        out.extend(sum.into_iter().map(|v| v / k));
    }
    Ok(out)
}

/// `ô₀` for a batch whose target slots hold `target` at step `m`.
fn denoise_once(params: &DenoiserParams, samples: &[HistorySample], target: Vec<f64>, m: usize) -> Result<Vec<f64>> {
    let config = params.config();
    let n = samples.len();
    let mut tape = Tape::new();
    let vars = params.register(&mut tape, false);
    let history = embed_history(&mut tape, &vars, config, samples)?;
    let target = tape.constant(vec![n, config.hidden], target)?;
    let seq = assemble_sequence(
        &mut tape,
        history.objects,
        target,
        history.conditioning,
        n,
        config.history_len,
    )?;
    // dropout is off, so the rng is never drawn from
    let mut unused = crate::Rng::seed_from_u64(0);
    let out = denoise(&mut tape, &vars, config, seq, n, m, &history.mask, false, &mut unused)?;
    Ok(tape.value(out).to_vec())
}

/// Ancestral sampling from step `M` down to 1 with `x₀` predictions.
fn reverse_chain(
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    samples: &[HistorySample],
    mut x: Vec<f64>,
    rngs: &mut [crate::Rng],
) -> Result<Vec<f64>> {
    let h = params.config().hidden;
    let mut m = schedule.steps();
    loop {
        let x0 = denoise_once(params, samples, x.clone(), m)?;
        if m == 1 {
            return Ok(x0);
        }
        let ab = schedule.alpha_bar(m)?;
        let ab_prev = schedule.alpha_bar(m - 1)?;
        let alpha = ab / ab_prev;
        let beta = 1.0 - alpha;
        let c0 = libm::sqrt(ab_prev) * beta / (1.0 - ab);
        let ct = libm::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab);
        let sigma = libm::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
        for (i, rng) in rngs.iter_mut().enumerate() {
            let z = gaussian(rng, h);
            for j in 0..h {
                let k = i * h + j;
                x[k] = c0 * x0[k] + ct * x[k] + sigma * z[j];
            }
        }
        m -= 1;
    }
}

/// Filtered ranks of `samples` given flattened scores.
pub fn rank_queries(samples: &[HistorySample], scores: &[f64], filter: &FilterIndex) -> Result<Vec<usize>> {
    if samples.is_empty() {
        return Err(Error::Empty("no queries to evaluate"));
    }
    if scores.len() % samples.len() != 0 {
        return Err(Error::Shape {
            op: "rank_queries",
            left: vec![samples.len()],
            right: vec![scores.len()],
        });
    }
    let e = scores.len() / samples.len();
    samples
        .iter()
        .zip(scores.chunks(e))
        .map(|(s, row)| {
            filtered_rank(row, s.object as usize, filter.objects(s.subject, s.relation, s.time))
        })
        .collect()
}

/// Scores, ranks and summarises `samples` on one thread.
pub fn evaluate(
    samples: &[HistorySample],
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    filter: &FilterIndex,
    options: &EvalOptions,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(Error::Empty("no queries to evaluate"));
    }
    let scores = score_queries(params, schedule, samples, 0, options)?;
    MetricReport::from_ranks(rank_queries(samples, &scores, filter)?)
}

/// Ranks each query's objects by how often they followed `(s, r)` before
/// the query time, over the merged stream of all splits.
pub fn frequency_baseline(
    train: &[Quadruple],
    valid: &[Quadruple],
    test: &[Quadruple],
    vocab: &Vocabulary,
    filter: &FilterIndex,
) -> Result<MetricReport> {
    let mut tagged: Vec<(bool, Quadruple)> = Vec::new();
    for (is_test, split) in [(false, train), (false, valid), (true, test)] {
        tagged.extend(augment_inverse(split, vocab)?.into_iter().map(|q| (is_test, q)));
    }
    tagged.sort_by_key(|(_, q)| q.time);
    let e = vocab.num_entities;
    let mut counts: BTreeMap<(u32, u32), Vec<f64>> = BTreeMap::new();
    let mut ranks = Vec::new();
    let mut start = 0;
    while start < tagged.len() {
        let t = tagged[start].1.time;
        let end = start + tagged[start..].iter().take_while(|(_, q)| q.time == t).count();
        let zeros = vec![0.0; e];
        for (is_test, q) in &tagged[start..end] {
            if *is_test {
                let row = counts.get(&(q.subject, q.relation)).unwrap_or(&zeros);
                ranks.push(filtered_rank(row, q.object as usize, filter.objects(q.subject, q.relation, q.time))?);
            }
        }
        for (_, q) in &tagged[start..end] {
            counts.entry((q.subject, q.relation)).or_insert_with(|| vec![0.0; e])[q.object as usize] += 1.0;
        }
        start = end;
    }
    MetricReport::from_ranks(ranks)
}

#[cfg(test)]
mod tests;
