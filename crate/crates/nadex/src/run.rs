//! Training sessions: data preparation, epochs, validation and best-model
//! checkpointing.

use std::io::Write;
use std::time::Instant;

use nadex_core::data::{batch_by_timestamp, prepare_splits, HistorySample, PreparedSplits, TimestampBatch};
use nadex_core::denoiser::DenoiserParams;
use nadex_core::diffusion::NoiseSchedule;
use nadex_core::eval::{rank_queries, score_queries, EvalOptions, FilterIndex, MetricReport};
use nadex_core::kernel::AdamState;
use nadex_core::objectives::{train_epoch, EpochSummary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{CliError, Result};
use crate::report;

/// Stream of the training rng; evaluation uses streams `0..queries`.
pub const TRAIN_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Valid,
    Test,
}

impl std::str::FromStr for Split {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(CliError::Config(format!("unknown split `{other}` (expected valid or test)"))),
        }
    }
}

/// Scores queries on rayon workers. Results equal [`nadex_core::eval::evaluate`]
/// bit for bit because every query draws from its own noise stream.
pub fn evaluate_parallel(
    samples: &[HistorySample],
    params: &DenoiserParams,
    schedule: &NoiseSchedule,
    filter: &FilterIndex,
    options: &EvalOptions,
) -> Result<MetricReport> {
    if samples.is_empty() {
        return Err(nadex_core::Error::Empty("no queries to evaluate").into());
    }
    let chunk = options.chunk.max(1);
    let parts = samples
        .par_chunks(chunk)
        .enumerate()
        .map(|(i, c)| score_queries(params, schedule, c, (i * chunk) as u64, options))
        .collect::<nadex_core::Result<Vec<_>>>()?;
    let scores = parts.concat();
    Ok(MetricReport::from_ranks(rank_queries(samples, &scores, filter)?)?)
}

/// Dataset with histories, batches and the filter index built.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub splits: PreparedSplits,
    pub filter: FilterIndex,
    pub batches: Vec<TimestampBatch>,
}

impl Prepared {
    pub fn new(config: &RunConfig, dataset: Dataset) -> Result<Self> {
        let d = &dataset;
        let splits = prepare_splits(&d.train, &d.valid, &d.test, &d.vocab, config.history_len, config.max_gap)?;
        let filter = FilterIndex::from_raw(&[&d.train, &d.valid, &d.test], &d.vocab)?;
        let batches = batch_by_timestamp(&splits.train, config.max_batch)?;
        Ok(Self {
            dataset,
            splits,
            filter,
            batches,
        })
    }

    pub fn samples(&self, split: Split) -> &[HistorySample] {
        match split {
            Split::Valid => &self.splits.valid,
            Split::Test => &self.splits.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochSummary>,
    /// `(epoch, valid MRR)` for every validation pass.
    pub valid_mrr: Vec<(u64, f64)>,
    pub best_epoch: Option<u64>,
    pub best_valid_mrr: f64,
}

pub struct Trainer {
    pub config: RunConfig,
    pub prepared: Prepared,
    pub params: DenoiserParams,
    pub optimizer: AdamState,
    pub schedule: NoiseSchedule,
    pub rng: ChaCha8Rng,
    pub epoch: u64,
    pub best_valid_mrr: f64,
}

impl Trainer {
    pub fn new(config: RunConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule()?;
        let params = DenoiserParams::init(&config.denoiser(), &dataset.vocab, config.seed)?;
        let prepared = Prepared::new(&config, dataset)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Self {
            optimizer: AdamState::new(config.lr),
            config,
            prepared,
            params,
            schedule,
            rng,
            epoch: 0,
            best_valid_mrr: f64::NEG_INFINITY,
        })
    }

    /// Resumes from a checkpoint over `dataset`, which must match its
    /// vocabulary.
    pub fn from_checkpoint(ckpt: &Checkpoint, dataset: Dataset) -> Result<Self> {
        if dataset.vocab.num_entities != ckpt.vocab.num_entities
            || dataset.vocab.num_base_relations != ckpt.vocab.num_base_relations
        {
            return Err(CliError::Checkpoint(format!(
                "dataset vocabulary ({} entities, {} relations) differs from checkpoint ({}, {})",
                dataset.vocab.num_entities,
                dataset.vocab.num_base_relations,
                ckpt.vocab.num_entities,
                ckpt.vocab.num_base_relations
            )));
        }
        let config = ckpt.config.clone();
        config.validate()?;
        Ok(Self {
            schedule: config.schedule()?,
            params: ckpt.restore_params()?,
            prepared: Prepared::new(&config, dataset)?,
            optimizer: ckpt.optimizer.clone(),
            rng: ckpt.rng.restore(),
            epoch: ckpt.epoch,
            best_valid_mrr: ckpt.best_valid_mrr,
            config,
        })
    }

    pub fn run_epoch(&mut self) -> Result<(EpochSummary, f64)> {
        let start = Instant::now();
        let summary = train_epoch(
            &self.prepared.batches,
            &mut self.params,
            &self.schedule,
            &mut self.optimizer,
            &self.config.loss(),
            &mut self.rng,
        )?;
        self.epoch += 1;
        Ok((summary, start.elapsed().as_secs_f64()))
    }

    pub fn evaluate(&self, split: Split) -> Result<MetricReport> {
        evaluate_parallel(
            self.prepared.samples(split),
            &self.params,
            &self.schedule,
            &self.prepared.filter,
            &self.config.eval_options(),
        )
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(
            &self.config,
            self.prepared.dataset.vocab,
            &self.params,
            &self.optimizer,
            self.epoch,
            self.best_valid_mrr,
            &self.rng,
        )
    }

    /// Runs the remaining epochs, validating at the configured cadence and
    /// saving whenever validation MRR strictly improves. Without validation
    /// the final state is saved.
    pub fn train(&mut self, log: &mut dyn Write) -> Result<TrainOutcome> {
        let mut outcome = TrainOutcome {
            epochs: Vec::new(),
            valid_mrr: Vec::new(),
            best_epoch: None,
            best_valid_mrr: self.best_valid_mrr,
        };
        let validate = self.config.eval_every > 0 && !self.prepared.splits.valid.is_empty();
        let _ = writeln!(log, "{}", report::EPOCH_HEADER);
        while (self.epoch as usize) < self.config.epochs {
            let (summary, seconds) = self.run_epoch()?;
            let _ = writeln!(log, "{}", report::epoch_line(self.epoch as usize, &summary, seconds));
            outcome.epochs.push(summary);
            let last = self.epoch as usize == self.config.epochs;
            if validate && (self.epoch as usize % self.config.eval_every == 0 || last) {
                let r = self.evaluate(Split::Valid)?;
                let _ = writeln!(
                    log,
                    "valid\t{}\t{}\t{}\t{}\t{}",
                    self.epoch, r.mrr, r.hits1, r.hits3, r.hits10
                );
                outcome.valid_mrr.push((self.epoch, r.mrr));
                if r.mrr > self.best_valid_mrr {
                    self.best_valid_mrr = r.mrr;
                    outcome.best_epoch = Some(self.epoch);
                    outcome.best_valid_mrr = r.mrr;
                    self.checkpoint().save(&self.config.checkpoint)?;
                }
            }
        }
        if !validate {
            self.checkpoint().save(&self.config.checkpoint)?;
        }
        Ok(outcome)
    }
}
