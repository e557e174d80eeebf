//! Run configuration.
//!
//! Settings resolve in one order: built-in defaults, then a `key = value`
//! config file, then command-line overrides, later sources winning. Keys are
//! dotted (`train.lr`, `ode.atol`, ...). Blank lines and `#` comments are
//! ignored.
//!
//! All randomness derives from the root `seed`:
//!
//! | consumer                  | seed                         |
//! |---------------------------|------------------------------|
//! | model init, minibatches   | `seed` (split internally)    |
//! | Hutchinson probes         | `child(seed, Probes)`        |
//! | ODE sampling              | `seed` (split internally)    |
//! | toy training data         | `seed`                       |
//! | toy reference data        | `derive(seed, 1)`            |

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::DEFAULT_K;
use crate::error::{Error, Result};
use crate::likelihood::OdeConfig;
use crate::score_net::ScoreNetConfig;
use crate::sde::{SdeKind, SdeSpec};
use crate::seed::{self, Stream};
use crate::toy2d::constants::{PROTOCOL_ITERATIONS, PROTOCOL_SAMPLES};
use crate::trainer::{Schedule, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rdm,
    Conrdm,
    Knn,
    Residual,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Rdm => "rdm",
            Method::Conrdm => "conrdm",
            Method::Knn => "knn",
            Method::Residual => "residual",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rdm" => Ok(Method::Rdm),
            "conrdm" => Ok(Method::Conrdm),
            "knn" => Ok(Method::Knn),
            "residual" => Ok(Method::Residual),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Network shape without the data-dependent input and class counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub time_embed_dim: usize,
    pub class_embed_dim: usize,
}

impl Default for NetShape {
    fn default() -> Self {
        let d = ScoreNetConfig::new(1);
        Self {
            hidden_dim: d.hidden_dim,
            num_blocks: d.num_blocks,
            time_embed_dim: d.time_embed_dim,
            class_embed_dim: d.class_embed_dim,
        }
    }
}

impl NetShape {
    pub fn build(&self, input_dim: usize, num_classes: Option<usize>) -> ScoreNetConfig {
        ScoreNetConfig {
            input_dim,
            hidden_dim: self.hidden_dim,
            num_blocks: self.num_blocks,
            time_embed_dim: self.time_embed_dim,
            class_embed_dim: self.class_embed_dim,
            num_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub k: usize,
    pub normalize: bool,
    /// `None` selects `D − ⌈D/3⌉`.
    pub num_principal: Option<usize>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            normalize: true,
            num_principal: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub samples: usize,
    pub reference_samples: usize,
    pub train_points: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            samples: PROTOCOL_SAMPLES,
            reference_samples: PROTOCOL_SAMPLES,
            train_points: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub method: Method,
    pub sde: SdeSpec,
    pub net: NetShape,
    pub train: TrainConfig,
    pub ode: OdeConfig,
    pub baseline: BaselineConfig,
    pub toy: ToyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            method: Method::Rdm,
            sde: SdeSpec::default(),
            net: NetShape::default(),
            train: TrainConfig::default(),
            ode: OdeConfig::default(),
            baseline: BaselineConfig::default(),
            toy: ToyConfig::default(),
        };
        cfg.apply_seed();
        cfg
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    /// Defaults for the 2-D suite: small network, 30 000 iterations.
    pub fn toy() -> Self {
        let toy_net = crate::toy2d::toy_net_config();
        let mut cfg = Self {
            net: NetShape {
                hidden_dim: toy_net.hidden_dim,
                num_blocks: toy_net.num_blocks,
                time_embed_dim: toy_net.time_embed_dim,
                class_embed_dim: toy_net.class_embed_dim,
            },
            train: TrainConfig {
                batch_size: crate::toy2d::TOY_BATCH_SIZE,
                schedule: Schedule::Iterations(PROTOCOL_ITERATIONS),
                ..TrainConfig::default()
            },
            ..Self::default()
        };
        cfg.apply_seed();
        cfg
    }

    fn apply_seed(&mut self) {
        self.train.seed = self.seed;
        self.ode.probe_seed = seed::child(self.seed, Stream::Probes);
    }

    /// Seed of the toy reference set, distinct from the training data.
    pub fn toy_reference_seed(&self) -> u64 {
        seed::derive(self.seed, 1)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => {
                self.seed = parse(key, v)?;
                self.apply_seed();
            }
            "method" => self.method = v.parse()?,
            "sde.kind" => self.sde.kind = v.parse::<SdeKind>()?,
            "sde.sigma_min" => self.sde.sigma_min = parse(key, v)?,
            "sde.sigma_max" => self.sde.sigma_max = parse(key, v)?,
            "sde.beta_min" => self.sde.beta_min = parse(key, v)?,
            "sde.beta_max" => self.sde.beta_max = parse(key, v)?,
            "net.hidden_dim" => self.net.hidden_dim = parse(key, v)?,
            "net.num_blocks" => self.net.num_blocks = parse(key, v)?,
            "net.time_embed_dim" => self.net.time_embed_dim = parse(key, v)?,
            "net.class_embed_dim" => self.net.class_embed_dim = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.epochs" => self.train.schedule = Schedule::Epochs(parse(key, v)?),
            "train.iterations" => self.train.schedule = Schedule::Iterations(parse(key, v)?),
            "train.grad_clip_norm" => self.train.grad_clip_norm = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.t_min" => self.train.t_min = parse(key, v)?,
            "train.normalize_inputs" => self.train.normalize_inputs = parse(key, v)?,
            "ode.atol" => self.ode.atol = parse(key, v)?,
            "ode.rtol" => self.ode.rtol = parse(key, v)?,
            "ode.t_min" => self.ode.t_min = parse(key, v)?,
            "ode.t_max" => self.ode.t_max = parse(key, v)?,
            "ode.probe_count" => self.ode.probe_count = parse(key, v)?,
            "ode.probe_kind" => self.ode.probe_kind = v.parse()?,
            "ode.probe_seed" => self.ode.probe_seed = parse(key, v)?,
            "ode.max_steps" => self.ode.max_steps = parse(key, v)?,
            "baseline.k" => self.baseline.k = parse(key, v)?,
            "baseline.normalize" => self.baseline.normalize = parse(key, v)?,
            "baseline.num_principal" => {
                self.baseline.num_principal = match v {
                    "auto" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "toy.samples" => self.toy.samples = parse(key, v)?,
            "toy.reference_samples" => self.toy.reference_samples = parse(key, v)?,
            "toy.train_points" => self.toy.train_points = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` document. `seed` is applied first so that
    /// explicit `ode.probe_seed` lines are not overwritten by it.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        let mut pairs = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        self.apply_pairs(&pairs)
    }

    pub fn apply_pairs(&mut self, pairs: &[(String, String)]) -> Result<()> {
        let (seeds, rest): (Vec<_>, Vec<_>) = pairs.iter().partition(|(k, _)| k == "seed");
        for (k, v) in seeds.into_iter().chain(rest) {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.sde.validate()?;
        self.train.validate()?;
        self.ode.validate()?;
        self.net.build(1, None).validate()?;
        if self.baseline.k == 0 {
            return Err(Error::Config("baseline.k must be positive".into()));
        }
        if self.toy.samples == 0 || self.toy.reference_samples == 0 || self.toy.train_points == 0 {
            return Err(Error::Config("toy sample counts must be positive".into()));
        }
        Ok(())
    }
}

/// Parses `key=value` override strings.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
