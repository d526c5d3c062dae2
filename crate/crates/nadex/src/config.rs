//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nadex_core::denoiser::DenoiserConfig;
use nadex_core::diffusion::NoiseSchedule;
use nadex_core::eval::EvalOptions;
use nadex_core::objectives::LossConfig;

use crate::dataset::SplitPaths;
use crate::error::{CliError, Result};

/// Environment variable that overrides `seed`.
pub const SEED_ENV: &str = "NADEX_SEED";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    /// Explicit split files; empty means `<data_dir>/<split>.txt`.
    pub train_file: PathBuf,
    pub valid_file: PathBuf,
    pub test_file: PathBuf,
    pub granularity: u32,
    pub history_len: usize,
    pub max_gap: u32,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub tie_scoring: bool,
    pub steps: usize,
    pub noise_scale: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub tau: f64,
    pub lr: f64,
    pub epochs: usize,
    pub max_batch: usize,
    pub seed: u64,
    pub checkpoint: PathBuf,
    /// Validate every this many epochs; 0 disables validation.
    pub eval_every: usize,
    pub eval_repeats: usize,
    pub eval_iterative: bool,
    /// Evaluation worker threads; 0 uses every core.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            train_file: PathBuf::new(),
            valid_file: PathBuf::new(),
            test_file: PathBuf::new(),
            granularity: 24,
            history_len: 32,
            max_gap: 512,
            hidden: 200,
            layers: 2,
            heads: 4,
            ffn: 800,
            dropout: 0.2,
            tie_scoring: true,
            steps: 50,
            noise_scale: 1.0,
            alpha_min: 0.01,
            alpha_max: 0.99,
            lambda: 0.5,
            gamma: 1.0,
            tau: 0.5,
            lr: 1e-3,
            epochs: 100,
            max_batch: 512,
            seed: 0,
            checkpoint: PathBuf::from("nadex.ckpt"),
            eval_every: 1,
            eval_repeats: 1,
            eval_iterative: false,
            threads: 0,
        }
    }
}

const KEYS: [&str; 29] = [
    "data_dir",
    "train_file",
    "valid_file",
    "test_file",
    "granularity",
    "history_len",
    "max_gap",
    "hidden",
    "layers",
    "heads",
    "ffn",
    "dropout",
    "tie_scoring",
    "steps",
    "noise_scale",
    "alpha_min",
    "alpha_max",
    "lambda",
    "gamma",
    "tau",
    "lr",
    "epochs",
    "max_batch",
    "seed",
    "checkpoint",
    "eval_every",
    "eval_repeats",
    "eval_iterative",
    "threads",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    pub fn keys() -> &'static [&'static str] {
        &KEYS
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let v = value.trim();
        match key {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "train_file" => self.train_file = PathBuf::from(v),
            "valid_file" => self.valid_file = PathBuf::from(v),
            "test_file" => self.test_file = PathBuf::from(v),
            "granularity" => self.granularity = parse(key, v)?,
            "history_len" => self.history_len = parse(key, v)?,
            "max_gap" => self.max_gap = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "ffn" => self.ffn = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "tie_scoring" => self.tie_scoring = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "noise_scale" => self.noise_scale = parse(key, v)?,
            "alpha_min" => self.alpha_min = parse(key, v)?,
            "alpha_max" => self.alpha_max = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "max_batch" => self.max_batch = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "checkpoint" => self.checkpoint = PathBuf::from(v),
            "eval_every" => self.eval_every = parse(key, v)?,
            "eval_repeats" => self.eval_repeats = parse(key, v)?,
            "eval_iterative" => self.eval_iterative = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            other => return Err(CliError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        match key {
            "data_dir" => self.data_dir.display().to_string(),
            "train_file" => self.train_file.display().to_string(),
            "valid_file" => self.valid_file.display().to_string(),
            "test_file" => self.test_file.display().to_string(),
            "granularity" => self.granularity.to_string(),
            "history_len" => self.history_len.to_string(),
            "max_gap" => self.max_gap.to_string(),
            "hidden" => self.hidden.to_string(),
            "layers" => self.layers.to_string(),
            "heads" => self.heads.to_string(),
            "ffn" => self.ffn.to_string(),
            "dropout" => self.dropout.to_string(),
            "tie_scoring" => self.tie_scoring.to_string(),
            "steps" => self.steps.to_string(),
            "noise_scale" => self.noise_scale.to_string(),
            "alpha_min" => self.alpha_min.to_string(),
            "alpha_max" => self.alpha_max.to_string(),
            "lambda" => self.lambda.to_string(),
            "gamma" => self.gamma.to_string(),
            "tau" => self.tau.to_string(),
            "lr" => self.lr.to_string(),
            "epochs" => self.epochs.to_string(),
            "max_batch" => self.max_batch.to_string(),
            "seed" => self.seed.to_string(),
            "checkpoint" => self.checkpoint.display().to_string(),
            "eval_every" => self.eval_every.to_string(),
            "eval_repeats" => self.eval_repeats.to_string(),
            "eval_iterative" => self.eval_iterative.to_string(),
            "threads" => self.threads.to_string(),
            _ => unreachable!("key list and accessors agree"),
        }
    }

    /// Applies `key=value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", idx + 1)))?;
            self.set(k, v)
                .map_err(|e| CliError::Config(format!("line {}: {e}", idx + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// Reads `path` (if given), then applies `overrides` and finally the
    /// seed environment variable.
    pub fn load(path: Option<&Path>, overrides: &[String], env_seed: Option<String>) -> Result<Self> {
        let mut c = Self::default();
        if let Some(p) = path {
            if !p.exists() {
                return Err(CliError::MissingFile {
                    what: "config file",
                    path: p.to_path_buf(),
                });
            }
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            c.apply_text(&text)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("override `{o}` is not `key=value`")))?;
            c.set(k, v)?;
        }
        if let Some(s) = env_seed {
            c.seed = parse(SEED_ENV, &s)?;
        }
        Ok(c)
    }

    /// Canonical text form; [`RunConfig::from_text`] reads it back exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k));
        }
        out
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            hidden: self.hidden,
            layers: self.layers,
            heads: self.heads,
            ffn: self.ffn,
            dropout: self.dropout,
            history_len: self.history_len,
            steps: self.steps,
            max_gap: self.max_gap,
            tie_scoring: self.tie_scoring,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            gamma: self.gamma,
            tau: self.tau,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::linear(
            self.steps,
            self.noise_scale,
            self.alpha_min,
            self.alpha_max,
        )?)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            seed: self.seed,
            repeats: self.eval_repeats,
            iterative: self.eval_iterative,
            ..EvalOptions::default()
        }
    }

    pub fn split_paths(&self) -> SplitPaths {
        let mut p = SplitPaths::in_dir(&self.data_dir);
        for (slot, explicit) in [
            (&mut p.train, &self.train_file),
            (&mut p.valid, &self.valid_file),
            (&mut p.test, &self.test_file),
        ] {
            if !explicit.as_os_str().is_empty() {
                *slot = explicit.clone();
            }
        }
        p
    }

    /// Checks every downstream constraint before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.denoiser().validate()?;
        self.loss().validate()?;
        self.schedule()?;
        if self.granularity == 0 {
            return Err(CliError::Config("granularity must be positive".into()));
        }
        if self.max_batch < 2 {
            return Err(CliError::Config("max_batch must be at least 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CliError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(CliError::Config("epochs must be positive".into()));
        }
        if self.eval_repeats == 0 {
            return Err(CliError::Config("eval_repeats must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("tau", "0.9").unwrap();
        c.set("checkpoint", "runs/best.ckpt").unwrap();
        c.set("lr", "0.1").unwrap();
        let back = RunConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.to_text().lines().count(), RunConfig::keys().len());
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        let e = RunConfig::from_text("hidden = 8\nbogus = 1\n").unwrap_err();
        assert_eq!(e.to_string(), "line 2: unknown key `bogus`");
        let e = RunConfig::from_text("hidden = eight").unwrap_err();
        assert!(e.to_string().contains("invalid value `eight` for `hidden`"));
        assert!(RunConfig::from_text("just words").is_err());
    }

    #[test]
    fn overrides_then_env_win() {
        let c = RunConfig::load(None, &["seed=3".into(), "hidden=16".into()], Some("42".into())).unwrap();
        assert_eq!((c.seed, c.hidden), (42, 16));
        let c = RunConfig::load(None, &["seed=3".into()], None).unwrap();
        assert_eq!(c.seed, 3);
        assert!(RunConfig::load(None, &[], Some("x".into())).is_err());
    }

    #[test]
    fn comments_and_defaults() {
        let c = RunConfig::from_text("# tuned settings\nlambda = 0.25 # weight\n\n").unwrap();
        assert_eq!(c.lambda, 0.25);
        assert_eq!(c.hidden, 200);
        c.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_schedule() {
        let c = RunConfig::from_text("noise_scale = 2").unwrap();
        let e = c.validate().unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("signal coefficient would be non-positive"));
        assert!(RunConfig::from_text("heads = 3").unwrap().validate().is_err());
        assert!(RunConfig::from_text("max_batch = 1").unwrap().validate().is_err());
    }

    #[test]
    fn split_paths_prefer_explicit_files() {
        let c = RunConfig::from_text("data_dir = d\ntest_file = other/t.txt").unwrap();
        let p = c.split_paths();
        assert_eq!(p.train, Path::new("d/train.txt"));
        assert_eq!(p.test, Path::new("other/t.txt"));
    }
}
