//! Run configuration: one JSON document with a block per stage, plus dotted
//! `block.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::rank;
use crate::symbolic::SearchConfig;
use crate::systems::{System, SystemParams, SYSTEM_NAMES};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleBlock {
    pub n_points: usize,
    pub seed: u64,
}

impl Default for SampleBlock {
    fn default() -> Self {
        SampleBlock { n_points: 10_000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    /// Ensemble size; defaults to the state dimension (4 for field theories).
    pub nets: Option<usize>,
    /// "auto", "plain", "additive-body" or "integral-pde".
    pub arch: String,
    pub pde_features: usize,
}

impl Default for ModelBlock {
    fn default() -> Self {
        ModelBlock { nets: None, arch: "auto".into(), pde_features: 3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankMode {
    Differential,
    Manifold,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankBlock {
    pub eps: f64,
    pub mode: RankMode,
    pub scales: Vec<f64>,
    /// Rows of the batch the value matrix is built from (manifold mode).
    pub points: usize,
    pub seed: u64,
}

impl Default for RankBlock {
    fn default() -> Self {
        RankBlock { eps: rank::DEFAULT_EPS, mode: RankMode::Both, scales: rank::default_scales(), points: 2000, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepBlock {
    pub lambdas: Vec<f64>,
    pub nets: Option<usize>,
}

impl Default for SweepBlock {
    fn default() -> Self {
        SweepBlock { lambdas: vec![0.01, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0], nets: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: String,
    pub params: SystemParams,
    pub sample: SampleBlock,
    pub model: ModelBlock,
    pub train: TrainConfig,
    pub rank: RankBlock,
    pub sweep: SweepBlock,
    pub search: SearchConfig,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            system: String::new(),
            params: SystemParams::default(),
            sample: SampleBlock::default(),
            model: ModelBlock::default(),
            train: TrainConfig::default(),
            rank: RankBlock::default(),
            sweep: SweepBlock::default(),
            search: SearchConfig::default(),
            output: PathBuf::from("conserva-out"),
        }
    }
}

/// Whether `path` names a field of the default configuration.
fn known_path(root: &Value, path: &[&str]) -> bool {
    let mut cur = root;
    for (i, k) in path.iter().enumerate() {
        match cur {
            Value::Object(m) => match m.get(*k) {
                Some(v) => cur = v,
                None => return false,
            },
            _ => return i == path.len(),
        }
    }
    true
}

fn parse_scalar(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

impl RunConfig {
    /// Read a config file (if any), then apply `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
        let mut v = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str::<Value>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        let template = serde_json::to_value(RunConfig::default())?;
        for (key, val) in overrides {
            let path: Vec<&str> = key.split('.').collect();
            if !known_path(&template, &path) {
                return Err(Error::Config(format!("unknown key '{key}'")));
            }
            let mut cur = &mut v;
            for (i, k) in path.iter().enumerate() {
                let Value::Object(m) = cur else {
                    return Err(Error::Config(format!("key '{key}' does not name a block")));
                };
                if i + 1 == path.len() {
                    m.insert(k.to_string(), parse_scalar(val));
                    break;
                }
                cur = m.entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
            }
        }
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.system.is_empty() {
            return Err(Error::Config("system: no system given".into()));
        }
        if !SYSTEM_NAMES.contains(&self.system.as_str()) {
            return Err(Error::Config(format!(
                "system: unknown system '{}' (known: {})",
                self.system,
                SYSTEM_NAMES.join(", ")
            )));
        }
        self.system()?;
        if self.sample.n_points == 0 {
            return Err(Error::Config("sample.n_points must be positive".into()));
        }
        self.train.validate()?;
        if !(self.rank.eps > 0.0 && self.rank.eps < 1.0) {
            return Err(Error::Config("rank.eps must lie in (0, 1)".into()));
        }
        if self.rank.scales.is_empty() || self.rank.scales.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("rank.scales must be positive".into()));
        }
        if self.sweep.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("sweep.lambdas must be >= 0".into()));
        }
        if !["auto", "plain", "additive-body", "integral-pde"].contains(&self.model.arch.as_str()) {
            return Err(Error::Config(format!("model.arch: unknown architecture '{}'", self.model.arch)));
        }
        self.search.validate()
    }

    pub fn system(&self) -> Result<System> {
        System::with_params(&self.system, &self.params)
    }

    /// The system networks are trained on (augmentation columns removed).
    pub fn train_system(&self) -> Result<System> {
        Ok(self.system()?.base())
    }

    pub fn n_nets(&self, sys: &System) -> usize {
        self.model.nets.unwrap_or(if sys.is_pde() { 4 } else { sys.s() })
    }

    pub fn arch_kind(&self, sys: &System) -> &str {
        match self.model.arch.as_str() {
            "auto" if sys.is_pde() => "integral-pde",
            "auto" => "plain",
            k => k,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_errors() {
        let o = |k: &str, v: &str| (k.to_string(), v.to_string());
        let c = RunConfig::load(None, &[o("system", "iso-ho"), o("train.lambda", "0.5")]).unwrap();
        assert_eq!(c.train.lambda, 0.5);
        let e = RunConfig::load(None, &[o("system", "hubbard")]).unwrap_err();
        assert!(e.to_string().contains("hubbard") && e.exit_code() == 2);
        let e = RunConfig::load(None, &[o("system", "iso-ho"), o("train.lambda", "-1")]).unwrap_err();
        assert!(e.to_string().contains("lambda") && e.exit_code() == 2);
        let e = RunConfig::load(None, &[o("system", "iso-ho"), o("train.lamda", "1")]).unwrap_err();
        assert!(e.to_string().contains("train.lamda"));
        let c = RunConfig::load(None, &[o("system", "damped-ho"), o("params.gamma", "2")]).unwrap();
        assert_eq!(c.params.gamma, Some(2.0));
    }
}
