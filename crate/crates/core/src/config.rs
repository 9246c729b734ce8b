//! Run configuration: one JSON document with `seed`, `data`, `train`, `eval`
//! and `serve` sections.

use std::collections::BTreeSet;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::datagen::{DatasetConfig, Split};
use crate::error::{Error, Result};
use crate::eval::Strategy;
use crate::numerics::derive_seed;
use crate::trainer::TrainConfig;

const SECTIONS: [&str; 4] = ["data", "train", "eval", "serve"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub split: Split,
    pub ratios: Vec<f64>,
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    pub histogram_bins: usize,
    pub histogram_concept: usize,
    pub neighbors: usize,
    pub neighbor_query: usize,
    pub latency_runs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            ratios: (0..=10).map(|i| i as f64 / 10.0).collect(),
            strategy: Strategy::Random,
            seeds: vec![0, 1, 2],
            histogram_bins: 20,
            histogram_concept: 0,
            neighbors: 5,
            neighbor_query: 0,
            latency_runs: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    pub split: Split,
    /// `*` allows any origin.
    pub cors_origin: String,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            split: Split::Test,
            cors_origin: "*".into(),
        }
    }
}

/// A validated run configuration. `data.seed` and `train.seed` are derived
/// from the root `seed` and cannot be set directly.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub serve: ServeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_value(Value::Object(Map::new())).expect("defaults are valid")
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        Self::from_value(value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let Value::Object(mut top) = value else {
            return Err(Error::config("<root>", "expected a JSON object"));
        };
        for key in top.keys() {
            if key != "seed" && !SECTIONS.contains(&key.as_str()) {
                return Err(Error::config(key.as_str(), "unknown key"));
            }
        }
        let seed = match top.remove("seed") {
            None => 0,
            Some(v) => v
                .as_u64()
                .ok_or_else(|| Error::config("seed", format!("expected an unsigned integer, got {v}")))?,
        };
        let mut config = Self {
            seed,
            data: section(&mut top, "data")?,
            train: section(&mut top, "train")?,
            eval: section(&mut top, "eval")?,
            serve: section(&mut top, "serve")?,
        };
        config.reseed(seed);
        config.validate()?;
        Ok(config)
    }

    /// Sets the root seed and rederives the module seeds.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = derive_seed(seed, "data");
        self.train.seed = derive_seed(seed, "train");
    }

    pub fn validate(&self) -> Result<()> {
        self.data
            .validate()
            .map_err(|e| Error::config("data", strip_contract(e)))?;
        self.train.validate()?;
        let e = &self.eval;
        if e.ratios.is_empty() {
            return Err(Error::config("eval.ratios", "must not be empty"));
        }
        if let Some(r) = e.ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return Err(Error::config("eval.ratios", format!("ratios must lie in [0, 1], got {r}")));
        }
        if e.seeds.is_empty() {
            return Err(Error::config("eval.seeds", "must not be empty"));
        }
        if e.histogram_bins < 2 {
            return Err(Error::config("eval.histogram_bins", "must be at least 2"));
        }
        if e.histogram_concept >= self.data.num_concepts {
            return Err(Error::config(
                "eval.histogram_concept",
                format!("must be below data.num_concepts ({})", self.data.num_concepts),
            ));
        }
        let size = match e.split {
            Split::Train => self.data.train_size,
            Split::Test => self.data.test_size,
        };
        if e.neighbors == 0 || e.neighbors >= size {
            return Err(Error::config(
                "eval.neighbors",
                format!("must lie in [1, {}] for a split of {size}", size.saturating_sub(1)),
            ));
        }
        if e.neighbor_query >= size {
            return Err(Error::config("eval.neighbor_query", format!("must be below the split size {size}")));
        }
        if e.latency_runs == 0 {
            return Err(Error::config("eval.latency_runs", "must be at least 1"));
        }
        if self.serve.host.is_empty() {
            return Err(Error::config("serve.host", "must not be empty"));
        }
        Ok(())
    }

    /// The document form, which parses back to `self`.
    pub fn to_document(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        for s in ["data", "train"] {
            v[s].as_object_mut().expect("section object").remove("seed");
        }
        v
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("config serializes")
    }
}

fn strip_contract(e: Error) -> String {
    match e {
        Error::Contract(msg) => msg,
        other => other.to_string(),
    }
}

fn allowed_keys<T: Default + Serialize>(name: &str) -> BTreeSet<String> {
    let mut keys: BTreeSet<String> = match serde_json::to_value(T::default()) {
        Ok(Value::Object(m)) => m.into_iter().map(|(k, _)| k).collect(),
        _ => BTreeSet::new(),
    };
    if name == "data" || name == "train" {
        keys.remove("seed");
    }
    keys
}

fn section<T: Default + Serialize + DeserializeOwned>(top: &mut Map<String, Value>, name: &str) -> Result<T> {
    let Some(value) = top.remove(name) else {
        return Ok(T::default());
    };
    let Value::Object(map) = &value else {
        return Err(Error::config(name, format!("expected an object, got {value}")));
    };
    let allowed = allowed_keys::<T>(name);
    for key in map.keys() {
        if !allowed.contains(key) {
            let msg = if key == "seed" { "set the top-level `seed` instead" } else { "unknown key" };
            return Err(Error::config(format!("{name}.{key}"), msg));
        }
    }
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let key = if path == "." { name.to_string() } else { format!("{name}.{path}") };
        Error::config(key, e.into_inner().to_string())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key_of(text: &str) -> String {
        match RunConfig::parse(text) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::parse("{}").unwrap();
        let t = &c.train;
        assert_eq!(t.concept_dim, 16);
        assert_eq!(t.sgld_steps, 20);
        assert_eq!(t.gamma, 0.4);
        assert_eq!((t.lambda_concept, t.lambda_task, t.lambda_energy), (5.0, 1.0, 0.05));
        assert_eq!(t.learning_rate, 0.005);
        assert_eq!(t.ema_decay, 0.95);
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.eval.ratios.len(), 11);
    }

    #[test]
    fn errors_name_the_key() {
        assert_eq!(key_of(r#"{"train": {"gamma": -1}}"#), "train.gamma");
        assert_eq!(key_of(r#"{"train": {"momentumm": 0.9}}"#), "train.momentumm");
        assert_eq!(key_of(r#"{"extra": 1}"#), "extra");
        assert_eq!(key_of(r#"{"data": {"seed": 3}}"#), "data.seed");
        assert_eq!(key_of(r#"{"seed": "x"}"#), "seed");
        assert_eq!(key_of(r#"{"serve": 3}"#), "serve");
        assert_eq!(key_of(r#"{"eval": {"ratios": [0.5, 2.0]}}"#), "eval.ratios");
        assert_eq!(key_of(r#"{"eval": {"histogram_concept": 8}}"#), "eval.histogram_concept");
        assert_eq!(key_of(r#"{"eval": {"strategy": "sideways"}}"#), "eval.strategy");
    }

    #[test]
    fn type_errors_name_key_and_type() {
        let err = RunConfig::parse(r#"{"train": {"batch_size": "big"}}"#).unwrap_err();
        let Error::Config { key, msg } = err else { panic!() };
        assert_eq!(key, "train.batch_size");
        assert!(msg.contains("expected usize"), "{msg}");
        let err = RunConfig::parse(r#"{"serve": {"port": 1.5}}"#).unwrap_err();
        assert!(err.to_string().contains("serve.port"));
    }

    #[test]
    fn seeds_derive_from_root_and_document_round_trips() {
        let a = RunConfig::parse(r#"{"seed": 7, "train": {"epochs": 3}}"#).unwrap();
        let b = RunConfig::parse(r#"{"seed": 8}"#).unwrap();
        assert_ne!(a.data.seed, b.data.seed);
        assert_ne!(a.data.seed, a.train.seed);
        assert_eq!(RunConfig::from_value(a.to_document()).unwrap(), a);
        let mut c = b.clone();
        c.reseed(7);
        assert_eq!(c.train.seed, a.train.seed);
    }
}
