//! Strict TOML run configuration with dotted `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_otb_sequence, Sequence, SynthConfig};
use crate::error::{DmvError, Result};
use crate::model::ModelConfig;
use crate::retrieval::RetrievalMode;
use crate::tracker::TrackerConfig;
use crate::trainer::TrainConfig;

/// A family of synthetic sequences: `count` copies of `base` with seeds `seed, seed+1, …`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSuite {
    pub count: usize,
    pub seed: u64,
    pub base: SynthConfig,
}

impl Default for SynthSuite {
    fn default() -> Self {
        SynthSuite { count: 0, seed: 0, base: SynthConfig::default() }
    }
}

impl SynthSuite {
    pub fn configs(&self) -> Vec<SynthConfig> {
        (0..self.count as u64).map(|i| SynthConfig { seed: self.seed + i, ..self.base.clone() }).collect()
    }
}

/// Where sequences come from: synthetic suites and/or OTB-format directories.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSource {
    pub synthetic: Vec<SynthSuite>,
    pub otb: Vec<PathBuf>,
}

impl DataSource {
    pub fn load(&self) -> Result<Vec<Sequence>> {
        let mut out = Vec::new();
        for suite in &self.synthetic {
            for cfg in suite.configs() {
                out.push(generate_synthetic(&cfg)?);
            }
        }
        for dir in &self.otb {
            out.push(load_otb_sequence(dir)?);
        }
        if out.is_empty() {
            return Err(DmvError::Data("data source yields no sequences".into()));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: DataSource,
    pub eval: DataSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub modes: Vec<RetrievalMode>,
    pub seeds: Vec<u64>,
    /// K values swept for the voting model with memory on.
    pub ks: Vec<usize>,
    /// Required AUC gap between consecutive retrieval modes.
    pub margin: f64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig { modes: RetrievalMode::ALL.to_vec(), seeds: vec![0, 1, 2], ks: vec![1, 4, 16], margin: 0.01 }
    }
}

/// Memory capacity × interval grid for `bench`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub capacities: Vec<usize>,
    pub intervals: Vec<usize>,
    pub ks: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { capacities: vec![2, 8, 32], intervals: vec![10, 30, 60], ks: vec![1, 2, 4, 8, 16] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tracker: TrackerConfig,
    pub data: DataConfig,
    pub ablate: AblateConfig,
    pub bench: BenchConfig,
    /// Sequence-level worker threads for tracking; results do not depend on it.
    pub workers: usize,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let wrap = |e: DmvError| DmvError::Config(e.to_string());
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.tracker.validate().map_err(wrap)?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| DmvError::Config(e.to_string()))
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    // Anything that is not a TOML literal is taken as a bare string.
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key v was just parsed"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Apply `a.b.c=value` to a TOML table, creating intermediate tables.
pub fn apply_override(root: &mut toml::Table, arg: &str) -> Result<()> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| DmvError::Config(format!("override {arg:?} is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(DmvError::Config(format!("override key {key:?} has an empty component")));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| DmvError::Config(format!("override key {key:?}: {p} is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| DmvError::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| DmvError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Read a config file (or start from defaults when `path` is `None`) and apply overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| DmvError::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(parse_config("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let e = parse_config("[train]\nlearning_rate = 0.1\n", &[]).unwrap_err();
        assert!(matches!(e, DmvError::Config(ref m) if m.contains("learning_rate")), "{e}");
        assert!(parse_config("", &["model.head.depth=3".into()]).is_err());
    }

    #[test]
    fn overrides_apply_with_types() {
        let c = parse_config(
            "[train]\nlr = 0.5\n",
            &["train.lr=0.25".into(), "model.retrieval.mode=softmax".into(), "tracker.memory.capacity=8".into(), "train.iterations=7".into()],
        )
        .unwrap();
        assert_eq!(c.train.lr, 0.25);
        assert_eq!(c.train.iterations, 7);
        assert_eq!(c.model.retrieval.mode, RetrievalMode::Softmax);
        assert_eq!(c.tracker.memory.capacity, 8);
    }

    #[test]
    fn echo_round_trips() {
        let c = parse_config("", &["ablate.ks=[1,2]".into(), "tracker.k=3".into()]).unwrap();
        let back = parse_config(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn malformed_override() {
        assert!(parse_config("", &["train.lr".into()]).is_err());
        assert!(parse_config("", &["train..lr=1".into()]).is_err());
    }

    #[test]
    fn suites_expand_seeds() {
        let s = SynthSuite { count: 3, seed: 10, base: SynthConfig { length: 4, ..SynthConfig::default() } };
        let seeds: Vec<u64> = s.configs().iter().map(|c| c.seed).collect();
        assert_eq!(seeds, vec![10, 11, 12]);
        let d = DataSource { synthetic: vec![s], otb: vec![] };
        assert_eq!(d.load().unwrap().len(), 3);
        assert!(DataSource::default().load().is_err());
    }
}
