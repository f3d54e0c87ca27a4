//! Model and training configuration, read from flat `key = value` files.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::GenConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Feature width shared by objects, text and relations.
    pub dim: usize,
    pub heads: usize,
    pub k1: usize,
    pub k2: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub noise_sigma: f64,
    /// Width of the toy 2-D object features before projection.
    pub dim_2d: usize,
    pub text_layers: usize,
    pub max_tokens: usize,
    pub gat_self_loop: bool,
    pub lref_over_all_objects: bool,
    /// Exclude the `i == j` cells from the binary relational loss.
    pub mask_binary_diagonal: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 8,
            k1: 16,
            k2: 16,
            mlp_hidden: 64,
            dropout: 0.1,
            noise_sigma: 0.1,
            dim_2d: 32,
            text_layers: 2,
            max_tokens: 48,
            gat_self_loop: true,
            lref_over_all_objects: false,
            mask_binary_diagonal: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dim {} must be divisible by heads {}", self.dim, self.heads)));
        }
        if self.k1 == 0 || self.k2 == 0 {
            return Err(Error::Config("k1 and k2 must be positive".into()));
        }
        if self.k2 > self.k1 * (self.k1 + 1) / 2 {
            return Err(Error::Config(format!("k2 {} exceeds k1(k1+1)/2 = {}", self.k2, self.k1 * (self.k1 + 1) / 2)));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.noise_sigma < 0.0 {
            return Err(Error::Config("dropout must be in [0,1) and noise_sigma non-negative".into()));
        }
        if self.dim == 0 || self.mlp_hidden == 0 || self.dim_2d == 0 || self.max_tokens == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Per-scene check of `K1 ≤ N(N−1)`.
    pub fn check_scene_size(&self, n: usize) -> Result<()> {
        if self.k1 > n * n.saturating_sub(1) {
            return Err(Error::Config(format!("k1 {} exceeds N(N-1) = {} for a {n}-object scene", self.k1, n * (n - 1))));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    BinaryOnly,
    FullyConnected,
    NoGraph,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::BinaryOnly, Ablation::FullyConnected, Ablation::NoGraph];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::BinaryOnly => "binary_only",
            Ablation::FullyConnected => "fully_connected",
            Ablation::NoGraph => "no_graph",
        }
    }

    pub fn uses_relation_losses(self) -> bool {
        matches!(self, Ablation::Full | Ablation::BinaryOnly)
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub decay: f64,
    pub decay_every: usize,
    pub decay_start: usize,
    pub decay_end: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Minimum same-category distractors for the "hard" split.
    pub hard_threshold: usize,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.5,
            lambda3: 2.0,
            batch_size: 20,
            epochs: 60,
            lr0: 5e-4,
            decay: 0.65,
            decay_every: 10,
            decay_start: 30,
            decay_end: 80,
            seed: 0,
            ablation: Ablation::Full,
            hard_threshold: 2,
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lambda1, self.lambda2, self.lambda3, self.lr0, self.decay];
        if positive.iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::Config("loss weights, learning rate and decay must be positive".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.decay_every == 0 {
            return Err(Error::Config("batch_size, epochs and decay_every must be positive".into()));
        }
        Ok(())
    }
}

/// Everything a config file can set. Keys are flat: model keys (`dim`,
/// `heads`, `k1`, ...), training keys (`lambda1`, `lr0`, `ablation`, ...)
/// and `gen_*`-prefixed generator keys.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gen: GenConfig,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config syntax: {e}")))?;
        let mut model = toml::Table::new();
        let mut train = toml::Table::new();
        let mut gen = toml::Table::new();
        let model_keys = field_names(&ModelConfig::default());
        let train_keys = field_names(&TrainConfig::default());
        for (k, v) in table {
            if let Some(g) = k.strip_prefix("gen_") {
                gen.insert(g.to_string(), v);
            } else if model_keys.contains(&k) {
                model.insert(k, v);
            } else if train_keys.contains(&k) {
                train.insert(k, v);
            } else {
                return Err(Error::Config(format!("unknown config key {k:?}")));
            }
        }
        let cfg = Self {
            model: toml::Value::Table(model).try_into().map_err(|e| Error::Config(format!("model config: {e}")))?,
            train: toml::Value::Table(train).try_into().map_err(|e| Error::Config(format!("train config: {e}")))?,
            gen: toml::Value::Table(gen).try_into().map_err(|e| Error::Config(format!("generator config: {e}")))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.gen.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Flat `key = value` rendering that [`Config::parse`] reads back.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut emit = |prefix: &str, value: toml::Value| {
            if let toml::Value::Table(t) = value {
                for (k, v) in t {
                    out.push_str(&format!("{prefix}{k} = {v}\n"));
                }
            }
        };
        emit("", toml::Value::try_from(&self.model).expect("serializable"));
        emit("", toml::Value::try_from(&self.train).expect("serializable"));
        emit("gen_", toml::Value::try_from(&self.gen).expect("serializable"));
        out
    }
}

fn field_names<T: Serialize>(value: &T) -> Vec<String> {
    match toml::Value::try_from(value) {
        Ok(toml::Value::Table(t)) => t.keys().cloned().collect(),
        _ => Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_constants() {
        let m = ModelConfig::default();
        assert_eq!((m.heads, m.k1, m.k2), (8, 16, 16));
        let t = TrainConfig::default();
        assert_eq!((t.lambda1, t.lambda2, t.lambda3), (0.1, 0.5, 2.0));
        assert_eq!(t.batch_size, 20);
        assert_eq!(t.lr0, 5e-4);
        assert_eq!((t.decay, t.decay_every, t.decay_start, t.decay_end), (0.65, 10, 30, 80));
    }

    #[test]
    fn parse_flat_keys() {
        let cfg = Config::parse("dim = 32\nheads = 4\nlambda3 = 1.5\nablation = \"no_graph\"\ngen_n_objects = 10\n").unwrap();
        assert_eq!(cfg.model.dim, 32);
        assert_eq!(cfg.model.heads, 4);
        assert_eq!(cfg.train.lambda3, 1.5);
        assert_eq!(cfg.train.ablation, Ablation::NoGraph);
        assert_eq!(cfg.gen.n_objects, 10);
        assert_eq!(cfg.model.k1, 16);
    }

    #[test]
    fn round_trips_through_text() {
        let mut cfg = Config::default();
        cfg.model.noise_sigma = 0.25;
        cfg.train.ablation = Ablation::BinaryOnly;
        cfg.gen.seed = 99;
        assert_eq!(Config::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(Config::parse("dim = 30\nheads = 8\n").is_err());
        assert!(Config::parse("bogus = 1\n").is_err());
        assert!(Config::parse("k1 = 2\nk2 = 4\n").is_err());
        assert!(Config::parse("lr0 = -1.0\n").is_err());
    }
}
