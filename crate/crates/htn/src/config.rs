//! Flat `section.key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Every key must be known to the
//! schema; unknown or repeated keys are errors.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use htn_core::layers::{InputSpec, LayerSpec};
use thiserror::Error;

use crate::arch::{parse_layers, ArchError};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: key `{key}` appears more than once")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: unknown key `{key}`")]
    Unknown { line: usize, key: String },
    #[error("`{key} = {value}`: {message}")]
    Value { key: String, value: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read config {path}: {message}")]
    Read { path: String, message: String },
}

impl From<ArchError> for ConfigError {
    fn from(e: ArchError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classify,
    Autoencode,
    Regress,
    BenchContract,
    CountParams,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Classify, Task::Autoencode, Task::Regress, Task::BenchContract, Task::CountParams];

    pub fn name(self) -> &'static str {
        match self {
            Task::Classify => "classify",
            Task::Autoencode => "autoencode",
            Task::Regress => "regress",
            Task::BenchContract => "bench-contract",
            Task::CountParams => "count-params",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.replace('_', "-");
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown task `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            _ => Err("expected adam or sgd".into()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputKind {
    ProductState,
    Image,
}

impl FromStr for InputKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "product_state" => Ok(InputKind::ProductState),
            "image" => Ok(InputKind::Image),
            _ => Err("expected product_state or image".into()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoder {
    Deconv,
    Dense,
}

impl FromStr for Decoder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "deconv" => Ok(Decoder::Deconv),
            "dense" => Ok(Decoder::Dense),
            _ => Err("expected deconv or dense".into()),
        }
    }
}

/// Model families compared by the regression sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Family {
    Htn,
    Fcn,
    Ttn,
    Cnn,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Htn, Family::Fcn, Family::Ttn, Family::Cnn];

    pub fn name(self) -> &'static str {
        match self {
            Family::Htn => "htn",
            Family::Fcn => "fcn",
            Family::Ttn => "ttn",
            Family::Cnn => "cnn",
        }
    }
}

impl FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| format!("unknown family `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub dir: PathBuf,
    /// Use only the first `n` training samples; 0 keeps all.
    pub train_limit: usize,
    pub test_limit: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input: InputKind,
    pub d: usize,
    /// Input grid; the data-driven tasks require the padded 32×32.
    pub height: usize,
    pub width: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelConfig {
    pub fn input_spec(&self) -> InputSpec {
        match self.input {
            InputKind::ProductState => InputSpec::ProductState { height: self.height, width: self.width, d: self.d },
            InputKind::Image => InputSpec::Image { channels: 1, height: self.height, width: self.width },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub clip_norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputConfig {
    /// Record real elapsed seconds in the metrics CSV. Off by default so that
    /// repeated runs produce identical files; times always go to `timing.csv`.
    pub wall_clock: bool,
    pub checkpoint: bool,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AutoencodeConfig {
    /// Side of the square bottleneck grid: 8, 4 or 2.
    pub bottleneck: usize,
    /// Bond dimension between encoder tree layers.
    pub bond: usize,
    pub decoder: Decoder,
    /// Channels of the intermediate decoder stages.
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressConfig {
    pub families: Vec<Family>,
    pub sizes: BTreeMap<Family, Vec<usize>>,
    pub floors: Vec<f64>,
    /// Bond dimension of the hybrid family's first tree layer.
    pub htn_bond: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    /// Bond dimensions to time.
    pub sizes: Vec<usize>,
    pub threads: Vec<usize>,
    pub reps: usize,
    /// Side of the site grid fed to the tree layer.
    pub grid: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: Option<Task>,
    pub seed: u64,
    /// Worker threads; 0 uses the machine default.
    pub threads: usize,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainSettings,
    pub output: OutputConfig,
    pub autoencode: AutoencodeConfig,
    pub regress: RegressConfig,
    pub bench: BenchConfig,
}

pub const DEFAULT_LAYERS: &str = "ttn:4 ttn:1 flatten dense:256 relu dense:64 relu dense:10";

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Syntax { line, message: format!("expected `key = value`, got `{content}`") });
            };
            let key = key.trim();
            let valid = !key.is_empty()
                && key.split('.').all(|part| {
                    !part.is_empty() && part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
                });
            if !valid {
                return Err(ConfigError::Syntax { line, message: format!("malformed key `{key}`") });
            }
            if map.insert(key.to_string(), (line, value.trim().to_string())).is_some() {
                return Err(ConfigError::Duplicate { line, key: key.to_string() });
            }
        }
        Ok(Entries { map })
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        self.map.remove(key).map(|(_, v)| v)
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e: T::Err| ConfigError::Value {
                key: key.into(),
                value: v.clone(),
                message: e.to_string(),
            }),
        }
    }

    fn list<T: FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|s| !s.is_empty())
                .map(|item| {
                    item.parse().map_err(|e: T::Err| ConfigError::Value {
                        key: key.into(),
                        value: v.clone(),
                        message: format!("`{item}`: {e}"),
                    })
                })
                .collect(),
        }
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.map.into_iter().min_by_key(|(_, (line, _))| *line) {
            Some((key, (line, _))) => Err(ConfigError::Unknown { line, key }),
            None => Ok(()),
        }
    }
}

fn positive(key: &str, value: usize) -> Result<usize, ConfigError> {
    if value == 0 {
        return Err(ConfigError::Value { key: key.into(), value: "0".into(), message: "must be at least 1".into() });
    }
    Ok(value)
}

impl ExperimentConfig {
    /// Parses config text; relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut e = Entries::parse(text)?;
        let task = match e.raw("task") {
            None => None,
            Some(v) => Some(v.parse().map_err(|m| ConfigError::Value { key: "task".into(), value: v, message: m })?),
        };
        let seed = e.get("seed", 1u64)?;
        let threads = e.get("threads", 0usize)?;

        let dir: PathBuf = e.get("data.dir", PathBuf::from("data/mnist"))?;
        let data = DataConfig {
            dir: if dir.is_absolute() { dir } else { base_dir.join(dir) },
            train_limit: e.get("data.train_limit", 0)?,
            test_limit: e.get("data.test_limit", 0)?,
        };

        let layers_text = e.raw("model.layers").unwrap_or_else(|| DEFAULT_LAYERS.to_string());
        let model = ModelConfig {
            input: e.get("model.input", InputKind::ProductState)?,
            d: e.get("model.d", 2usize)?,
            height: positive("model.height", e.get("model.height", 32)?)?,
            width: positive("model.width", e.get("model.width", 32)?)?,
            layers: parse_layers(&layers_text)?,
        };
        if model.d < 2 {
            return Err(ConfigError::Value { key: "model.d".into(), value: model.d.to_string(), message: "must be at least 2".into() });
        }

        let clip: f64 = e.get("train.clip_norm", 0.0)?;
        let train = TrainSettings {
            epochs: e.get("train.epochs", 30)?,
            batch_size: positive("train.batch_size", e.get("train.batch_size", 100)?)?,
            optimizer: e.get("train.optimizer", OptimizerKind::Adam)?,
            lr: e.get("train.lr", 1e-3)?,
            clip_norm: (clip > 0.0).then_some(clip),
        };
        if !(train.lr.is_finite() && train.lr > 0.0) {
            return Err(ConfigError::Value { key: "train.lr".into(), value: train.lr.to_string(), message: "must be positive".into() });
        }

        let output = OutputConfig {
            wall_clock: e.get("output.wall_clock", false)?,
            checkpoint: e.get("output.checkpoint", true)?,
            samples: e.get("output.samples", 8)?,
        };

        let autoencode = AutoencodeConfig {
            bottleneck: e.get("autoencode.bottleneck", 8)?,
            bond: positive("autoencode.bond", e.get("autoencode.bond", 4)?)?,
            decoder: e.get("autoencode.decoder", Decoder::Deconv)?,
            channels: positive("autoencode.channels", e.get("autoencode.channels", 16)?)?,
        };
        if ![8, 4, 2].contains(&autoencode.bottleneck) {
            return Err(ConfigError::Value {
                key: "autoencode.bottleneck".into(),
                value: autoencode.bottleneck.to_string(),
                message: "must be 8, 4 or 2".into(),
            });
        }

        let families = e.list("regress.families", vec![Family::Htn, Family::Fcn, Family::Ttn])?;
        let mut sizes = BTreeMap::new();
        for family in Family::ALL {
            let key = format!("regress.{}.sizes", family.name());
            let list: Vec<usize> = e.list(&key, crate::arch::default_sweep(family))?;
            if list.is_empty() || list.len() > 6 || list.contains(&0) {
                return Err(ConfigError::Value {
                    key,
                    value: format!("{list:?}"),
                    message: "need 1 to 6 positive sizes".into(),
                });
            }
            sizes.insert(family, list);
        }
        let regress = RegressConfig {
            families,
            sizes,
            floors: e.list("regress.floors", vec![1e-1, 1e-2])?,
            htn_bond: positive("regress.htn.bond", e.get("regress.htn.bond", 2)?)?,
        };

        let bench = BenchConfig {
            sizes: e.list("bench.sizes", vec![2, 3, 4, 5, 6])?,
            threads: e.list("bench.threads", vec![1, 2, 4])?,
            reps: e.get("bench.reps", 7)?,
            grid: e.get("bench.grid", 16)?,
        };
        if bench.reps < 5 {
            return Err(ConfigError::Value { key: "bench.reps".into(), value: bench.reps.to_string(), message: "need at least 5 repetitions".into() });
        }
        if bench.grid < 2 || bench.grid % 2 != 0 || bench.sizes.is_empty() || bench.threads.is_empty() || bench.threads.contains(&0) || bench.sizes.contains(&0) {
            return Err(ConfigError::Invalid("bench needs an even grid, bond sizes and thread counts".into()));
        }

        e.finish()?;
        Ok(ExperimentConfig { task, seed, threads, data, model, train, output, autoencode, regress, bench })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|err| ConfigError::Read { path: path.display().to_string(), message: err.to_string() })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        ExperimentConfig::parse(&text, &base)
    }

    /// A config with every key at its default.
    pub fn defaults() -> Self {
        ExperimentConfig::parse("", Path::new(".")).expect("defaults are valid")
    }
}
