//! Tab-separated quadruple files and the `entity2id` label table.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nadex_core::data::{Quadruple, Vocabulary};
use rand::{Rng, SeedableRng};

use crate::error::{CliError, Result};

/// Parses `s\tr\to\traw_t` lines; extra columns are ignored and `t` is
/// `raw_t / granularity`.
pub fn parse_quadruples(text: &str, granularity: u32, source: &Path) -> Result<Vec<Quadruple>> {
    if granularity == 0 {
        return Err(CliError::Config("time granularity must be positive".into()));
    }
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| CliError::Parse {
            path: source.to_path_buf(),
            line: idx + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 4 {
            return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let mut v = [0u32; 4];
        for (k, name) in ["subject", "relation", "object", "time"].iter().enumerate() {
            let raw = fields[k].trim();
            let n: i64 = raw
                .parse()
                .map_err(|_| err(format!("{name} `{raw}` is not an integer")))?;
            if n < 0 {
                return Err(err(format!("negative {name} id {n}")));
            }
            v[k] = u32::try_from(n).map_err(|_| err(format!("{name} {n} exceeds 32 bits")))?;
        }
        out.push(Quadruple::new(v[0], v[1], v[2], v[3] / granularity));
    }
    Ok(out)
}

/// Inverse of [`parse_quadruples`] for timestamps that are multiples of
/// `granularity`.
pub fn format_quadruples(quads: &[Quadruple], granularity: u32) -> String {
    let mut out = String::new();
    for q in quads {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            q.subject,
            q.relation,
            q.object,
            q.time as u64 * granularity as u64
        ));
    }
    out
}

pub fn read_quadruples(path: &Path, granularity: u32, what: &'static str) -> Result<Vec<Quadruple>> {
    if !path.exists() {
        return Err(CliError::MissingFile {
            what,
            path: path.to_path_buf(),
        });
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut quads = parse_quadruples(&text, granularity, path)?;
    quads.sort_by_key(|q| q.time);
    Ok(quads)
}

/// `name\tid` lines into an id → name map.
pub fn parse_labels(text: &str, source: &Path) -> Result<BTreeMap<u32, String>> {
    let mut out = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (name, id) = line.rsplit_once('\t').ok_or_else(|| CliError::Parse {
            path: source.to_path_buf(),
            line: idx + 1,
            message: "expected `name<TAB>id`".into(),
        })?;
        let id: u32 = id.trim().parse().map_err(|_| CliError::Parse {
            path: source.to_path_buf(),
            line: idx + 1,
            message: format!("id `{}` is not a non-negative integer", id.trim()),
        })?;
        out.insert(id, name.to_string());
    }
    Ok(out)
}

/// Paths of the three splits and the optional label file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub entity_labels: PathBuf,
}

impl SplitPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train: dir.join("train.txt"),
            valid: dir.join("valid.txt"),
            test: dir.join("test.txt"),
            entity_labels: dir.join("entity2id.txt"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub train: Vec<Quadruple>,
    pub valid: Vec<Quadruple>,
    pub test: Vec<Quadruple>,
    pub entity_labels: BTreeMap<u32, String>,
}

impl Dataset {
    /// Loads all splits, each stably sorted by time. Train must be nonempty.
    pub fn load(paths: &SplitPaths, granularity: u32) -> Result<Self> {
        let train = read_quadruples(&paths.train, granularity, "train split")?;
        if train.is_empty() {
            return Err(CliError::Config(format!("train split {} is empty", paths.train.display())));
        }
        let valid = read_quadruples(&paths.valid, granularity, "valid split")?;
        let test = read_quadruples(&paths.test, granularity, "test split")?;
        let entity_labels = if paths.entity_labels.exists() {
            let text = fs::read_to_string(&paths.entity_labels).map_err(|e| CliError::io(&paths.entity_labels, e))?;
            parse_labels(&text, &paths.entity_labels)?
        } else {
            BTreeMap::new()
        };
        Self::from_splits(train, valid, test, entity_labels)
    }

    pub fn from_splits(
        train: Vec<Quadruple>,
        valid: Vec<Quadruple>,
        test: Vec<Quadruple>,
        entity_labels: BTreeMap<u32, String>,
    ) -> Result<Self> {
        let vocab = Vocabulary::from_splits(&[&train, &valid, &test])?;
        Ok(Self {
            vocab,
            train,
            valid,
            test,
            entity_labels,
        })
    }

    pub fn label(&self, entity: u32) -> String {
        self.entity_labels
            .get(&entity)
            .cloned()
            .unwrap_or_else(|| entity.to_string())
    }
}

/// Keeps each quadruple independently with probability `fraction`,
/// preserving order.
pub fn subsample(quads: &[Quadruple], fraction: f64, seed: u64) -> Vec<Quadruple> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    quads
        .iter()
        .filter(|_| rng.random::<f64>() < fraction)
        .copied()
        .collect()
}
