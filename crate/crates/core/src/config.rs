//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! train = data/train.bin
//! test = data/test.bin
//! bank = data/bank.bin
//! tasks = 10
//! seeds = 1993, 1, 56, 254, 602
//! buffer.dim = 16384
//! lambda = auto
//! cse.enabled = true
//! cse.k = 5
//! output = runs/cifar
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analytic::DEFAULT_CHUNK_ROWS;
use crate::buffer::DEFAULT_BUFFER_DIM;
use crate::error::{Error, Result};
use crate::lambda::{LambdaGrid, DEFAULT_SAMPLE_CAP};
use crate::semantic::{FusionWeights, DEFAULT_TOP_K};

pub const DEFAULT_SEEDS: [u64; 5] = [1993, 1, 56, 254, 602];

/// Which feature branches feed the analytic classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branches {
    Dual,
    Adapter,
    Clip,
}

impl FromStr for Branches {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(Self::Dual),
            "adapter" => Ok(Self::Adapter),
            "clip" => Ok(Self::Clip),
            other => Err(Error::Config(format!(
                "branches must be dual, adapter or clip (got {other:?})"
            ))),
        }
    }
}

/// How the class sequence is cut into tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Seeded class shuffle, then contiguous groups.
    Shuffle,
    /// Use the task ids stored in the records.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LambdaSetting {
    Fixed(f64),
    Auto { grid: LambdaGrid, cap: usize },
}

impl Default for LambdaSetting {
    fn default() -> Self {
        Self::Auto {
            grid: LambdaGrid::default(),
            cap: DEFAULT_SAMPLE_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: PathBuf,
    pub test: PathBuf,
    pub bank: Option<PathBuf>,
    pub tasks: usize,
    pub split: SplitMode,
    pub seeds: Vec<u64>,
    pub buffer_dim: usize,
    /// `None` reuses the run seed.
    pub buffer_seed: Option<u64>,
    pub lambda: LambdaSetting,
    pub cse_enabled: bool,
    pub cse_k: usize,
    pub fusion: FusionWeights,
    pub chunk_rows: usize,
    pub branches: Branches,
    pub output: PathBuf,
    pub checkpoint: bool,
    pub resume: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: PathBuf::new(),
            test: PathBuf::new(),
            bank: None,
            tasks: 10,
            split: SplitMode::Shuffle,
            seeds: DEFAULT_SEEDS.to_vec(),
            buffer_dim: DEFAULT_BUFFER_DIM,
            buffer_seed: None,
            lambda: LambdaSetting::default(),
            cse_enabled: true,
            cse_k: DEFAULT_TOP_K,
            fusion: FusionWeights::default(),
            chunk_rows: DEFAULT_CHUNK_ROWS,
            branches: Branches::Dual,
            output: PathBuf::from("run"),
            checkpoint: true,
            resume: false,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean for {key}: {value:?}"))),
    }
}

/// Splits `key = value` lines; later keys override earlier ones.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

impl RunConfig {
    /// Parses config text; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let mut cfg = Self::default();
        let mut grid = LambdaGrid::default();
        let mut cap = DEFAULT_SAMPLE_CAP;
        let mut fixed_lambda = None;
        let path = |v: &str| base.join(v);
        for (key, value) in &kv {
            let v = value.as_str();
            match key.as_str() {
                "train" => cfg.train = path(v),
                "test" => cfg.test = path(v),
                "bank" => cfg.bank = (!v.is_empty()).then(|| path(v)),
                "tasks" => cfg.tasks = parse_value(key, v)?,
                "split" => {
                    cfg.split = match v {
                        "shuffle" => SplitMode::Shuffle,
                        "file" => SplitMode::File,
                        _ => return Err(Error::Config(format!("bad split mode {v:?}"))),
                    }
                }
                "seeds" | "seed" => {
                    cfg.seeds = v
                        .split(',')
                        .map(|s| parse_value(key, s.trim()))
                        .collect::<Result<_>>()?
                }
                "buffer.dim" => cfg.buffer_dim = parse_value(key, v)?,
                "buffer.seed" => {
                    cfg.buffer_seed = match v {
                        "run" | "" => None,
                        _ => Some(parse_value(key, v)?),
                    }
                }
                "lambda" => {
                    fixed_lambda = match v {
                        "auto" => None,
                        _ => Some(parse_value::<f64>(key, v)?),
                    }
                }
                "lambda.grid" => grid = LambdaGrid::parse(v)?,
                "lambda.cap" => cap = parse_value(key, v)?,
                "cse.enabled" => cfg.cse_enabled = parse_bool(key, v)?,
                "cse.k" => cfg.cse_k = parse_value(key, v)?,
                "cse.weight.analytic" => cfg.fusion.analytic = parse_value(key, v)?,
                "cse.weight.semantic" => cfg.fusion.semantic = parse_value(key, v)?,
                "chunk" => cfg.chunk_rows = parse_value(key, v)?,
                "branches" => cfg.branches = v.parse()?,
                "output" => cfg.output = path(v),
                "checkpoint" => cfg.checkpoint = parse_bool(key, v)?,
                "resume" => cfg.resume = parse_bool(key, v)?,
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }
        cfg.lambda = match fixed_lambda {
            Some(l) => LambdaSetting::Fixed(l),
            None => LambdaSetting::Auto { grid, cap },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 {
            return Err(Error::Config("tasks must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.buffer_dim == 0 {
            return Err(Error::Config("buffer.dim must be >= 1".into()));
        }
        if self.chunk_rows == 0 {
            return Err(Error::Config("chunk must be >= 1".into()));
        }
        if self.cse_k == 0 {
            return Err(Error::Config("cse.k must be >= 1".into()));
        }
        if let LambdaSetting::Fixed(l) = self.lambda {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::Config(format!("lambda must be positive, got {l}")));
            }
        }
        if self.cse_enabled && self.bank.is_none() {
            return Err(Error::Config("cse.enabled requires a bank path".into()));
        }
        Ok(())
    }
}
