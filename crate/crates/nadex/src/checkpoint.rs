//! Little-endian binary checkpoints.
//!
//! Layout: magic `NADX`, `u32` version, config text, vocabulary sizes,
//! named parameter tensors, Adam state, epoch, best validation MRR and the
//! training rng position. Strings are `u32` length plus UTF-8 bytes; floats
//! are raw `f64` bits.

use std::fs;
use std::path::Path;

use nadex_core::data::Vocabulary;
use nadex_core::denoiser::DenoiserParams;
use nadex_core::kernel::{AdamState, Moment, Tensor};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 4] = b"NADX";
pub const VERSION: u32 = 1;

/// Exact position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub params: Vec<(String, Tensor)>,
    pub optimizer: AdamState,
    pub epoch: u64,
    pub best_valid_mrr: f64,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn capture(
        config: &RunConfig,
        vocab: Vocabulary,
        params: &DenoiserParams,
        optimizer: &AdamState,
        epoch: u64,
        best_valid_mrr: f64,
        rng: &ChaCha8Rng,
    ) -> Self {
        Self {
            config: config.clone(),
            vocab,
            params: params
                .named()
                .into_iter()
                .map(|(n, t)| (n, Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor")))
                .collect(),
            optimizer: optimizer.clone(),
            epoch,
            best_valid_mrr,
            rng: RngState::capture(rng),
        }
    }

    /// Rebuilds model parameters for the stored configuration.
    pub fn restore_params(&self) -> Result<DenoiserParams> {
        let mut p = DenoiserParams::init(&self.config.denoiser(), &self.vocab, self.config.seed)?;
        p.load_named(&self.params)
            .map_err(|e| CliError::Checkpoint(format!("parameters do not fit the stored config: {e}")))?;
        Ok(p)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.str(&self.config.to_text());
        w.u32(self.vocab.num_entities as u32);
        w.u32(self.vocab.num_base_relations as u32);
        w.u32(self.vocab.max_time);
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.tensor(name, t.shape(), t.data());
        }
        let o = &self.optimizer;
        for v in [o.lr, o.beta1, o.beta2, o.eps] {
            w.f64(v);
        }
        w.u64(o.step_count());
        w.u32(o.moments().len() as u32);
        for m in o.moments() {
            w.str(&m.name);
            w.f64s(&m.m);
            w.f64s(&m.v);
        }
        w.u64(self.epoch);
        w.f64(self.best_valid_mrr);
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.bytes(&self.rng.word_pos.to_le_bytes());
        w.buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CliError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CliError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let config = RunConfig::from_text(&r.str()?)?;
        let vocab = Vocabulary {
            num_entities: r.u32()? as usize,
            num_base_relations: r.u32()? as usize,
            max_time: r.u32()?,
        };
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name = r.str()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f64s()?;
            let t = Tensor::new(shape, data).map_err(|e| CliError::Checkpoint(format!("tensor `{name}`: {e}")))?;
            params.push((name, t));
        }
        let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
        let step = r.u64()?;
        let moments = (0..r.u32()?)
            .map(|_| {
                Ok(Moment {
                    name: r.str()?,
                    m: r.f64s()?,
                    v: r.f64s()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let optimizer = AdamState::from_parts(lr, beta1, beta2, eps, step, moments);
        let epoch = r.u64()?;
        let best_valid_mrr = r.f64()?;
        let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        if r.pos != bytes.len() {
            return Err(CliError::Checkpoint(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            vocab,
            params,
            optimizer,
            epoch,
            best_valid_mrr,
            rng: RngState {
                seed,
                stream,
                word_pos,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        fs::write(path, self.encode()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(CliError::MissingFile {
                what: "checkpoint",
                path: path.to_path_buf(),
            });
        }
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.f64(*x);
        }
    }
    fn tensor(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.str(name);
        self.u32(shape.len() as u32);
        for &d in shape {
            self.u64(d as u64);
        }
        self.f64s(data);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            CliError::Checkpoint(format!("truncated checkpoint at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CliError::Checkpoint("string is not UTF-8".into()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| CliError::Checkpoint("length overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
