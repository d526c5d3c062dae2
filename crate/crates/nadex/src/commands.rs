//! Subcommand bodies. Each returns an error that maps to an exit code.

use std::io::Write;
use std::path::Path;

use nadex_core::data::{augment_inverse, query_history, Quadruple};
use nadex_core::eval::{score_queries, unseen_mask, MetricReport};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{CliError, Result};
use crate::report;
use crate::run::{Split, TrainOutcome, Trainer};

pub fn train(config: RunConfig, log: &mut dyn Write) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = Dataset::load(&config.split_paths(), config.granularity)?;
    let mut trainer = Trainer::new(config, dataset)?;
    trainer.train(log)
}

/// Options of the `eval` subcommand beyond the checkpoint's own config.
#[derive(Debug, Clone, Default)]
pub struct EvalRequest {
    pub split: Option<Split>,
    pub unseen_only: bool,
    pub seed: Option<u64>,
    pub repeats: Option<usize>,
    pub iterative: bool,
    pub data_dir: Option<std::path::PathBuf>,
    pub tsv: Option<std::path::PathBuf>,
}

pub fn eval(checkpoint: &Path, req: &EvalRequest, out: &mut dyn Write) -> Result<MetricReport> {
    let mut ckpt = Checkpoint::load(checkpoint)?;
    if let Some(s) = req.seed {
        ckpt.config.seed = s;
    }
    if let Some(k) = req.repeats {
        ckpt.config.eval_repeats = k;
    }
    if req.iterative {
        ckpt.config.eval_iterative = true;
    }
    if let Some(d) = &req.data_dir {
        ckpt.config.data_dir = d.clone();
    }
    let config = &ckpt.config;
    let dataset = Dataset::load(&config.split_paths(), config.granularity)?;
    let trainer = Trainer::from_checkpoint(&ckpt, dataset)?;
    let split = req.split.unwrap_or(Split::Test);
    let mut report = trainer.evaluate(split)?;
    let mut title = match split {
        Split::Valid => "valid".to_string(),
        Split::Test => "test".to_string(),
    };
    if req.unseen_only {
        let mask = unseen_mask(
            &trainer.prepared.dataset.train,
            &trainer.prepared.dataset.vocab,
            trainer.prepared.samples(split),
        )?;
        report = report.subset(&mask)?;
        title.push_str(" unseen");
    }
    let _ = write!(out, "{}", report::table(&title, &report));
    if let Some(path) = &req.tsv {
        std::fs::write(path, report::to_tsv(&report)).map_err(|e| CliError::io(path, e))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub entity: u32,
    pub label: String,
    pub score: f64,
}

/// Top-`k` objects for `(subject, relation, ?, time)` by descending score.
///
/// `relation` may be an inverse id (`>= |R_base|`). The history is every
/// known fact of `subject` before `time`.
pub fn predict(
    checkpoint: &Path,
    subject: i64,
    relation: i64,
    time: u32,
    top_k: usize,
    out: &mut dyn Write,
) -> Result<Vec<Prediction>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let config = &ckpt.config;
    let e = ckpt.vocab.num_entities;
    if subject < 0 || subject as usize >= e {
        return Err(CliError::UnknownId {
            what: "entity",
            id: subject,
            bound: e,
        });
    }
    let r_bound = ckpt.vocab.num_relations();
    if relation < 0 || relation as usize >= r_bound {
        return Err(CliError::UnknownId {
            what: "relation",
            id: relation,
            bound: r_bound,
        });
    }
    let dataset = Dataset::load(&config.split_paths(), config.granularity)?;
    let params = ckpt.restore_params()?;
    let mut stream: Vec<Quadruple> = Vec::new();
    for split in [&dataset.train, &dataset.valid, &dataset.test] {
        stream.extend(augment_inverse(split, &ckpt.vocab)?);
    }
    let sample = query_history(
        &stream,
        subject as u32,
        relation as u32,
        time,
        config.history_len,
        config.max_gap,
    )?;
    let scores = score_queries(&params, &config.schedule()?, &[sample], 0, &config.eval_options())?;
    let mut order: Vec<usize> = (0..e).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let preds: Vec<Prediction> = order
        .into_iter()
        .take(top_k)
        .map(|i| Prediction {
            entity: i as u32,
            label: dataset.label(i as u32),
            score: scores[i],
        })
        .collect();
    let _ = writeln!(out, "rank\tentity\tlabel\tscore");
    for (i, p) in preds.iter().enumerate() {
        let _ = writeln!(out, "{}\t{}\t{}\t{}", i + 1, p.entity, p.label, p.score);
    }
    Ok(preds)
}

/// Dumps `(m, 1 − ᾱ_m, √ᾱ_m)` rows.
pub fn inspect_schedule(config: &RunConfig, out: &mut dyn Write) -> Result<usize> {
    let schedule = config.schedule()?;
    let _ = writeln!(out, "m\tone_minus_alpha_bar\tsqrt_alpha_bar");
    for (m, noise, signal) in schedule.rows() {
        let _ = writeln!(out, "{m}\t{noise}\t{signal}");
    }
    Ok(schedule.steps())
}
