//! Run configuration (JSON).

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use genealogy_core::feller_sim::{GwConfig, DEFAULT_CAP};
use genealogy_core::spatial_sim::{MarkedUms, SiteSpace};
use genealogy_core::Ums;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::io::{state_from_value, SpecJson};
use crate::verification::Thresholds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Simulate,
    Export,
    TestMoment,
    TestBranching,
    TestDuality,
    TestAlgebra,
    TestMonotone,
    TestCalibration,
}

impl Command {
    pub fn is_test(self) -> bool {
        !matches!(self, Command::Simulate | Command::Export)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub a: f64,
    pub b: f64,
    /// Individuals per unit mass.
    pub n: u32,
    pub t: f64,
    pub cap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { a: 0.0, b: 1.0, n: 100, t: 1.0, cap: DEFAULT_CAP }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeConfig {
    #[default]
    Location,
    Path,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceConfig {
    /// Doubly stochastic migration kernel.
    pub kernel: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub replicates: Option<usize>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub thresholds: Option<Thresholds>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub space: Option<SpaceConfig>,
    #[serde(default)]
    pub mode: ModeConfig,
    /// `Ums` or `MarkedUms` document; a unit singleton when absent.
    #[serde(default)]
    pub initial: Option<Value>,
    /// Observation times for `simulate`; ten steps up to `model.t` when empty.
    #[serde(default)]
    pub times: Vec<f64>,
    /// Polynomial statistics for `simulate`.
    #[serde(default)]
    pub specs: Vec<SpecJson>,
    /// Parameters of a test command, overriding its defaults.
    #[serde(default)]
    pub test: Option<Value>,
}

/// Error in the configuration (exit code 2).
#[derive(Debug, thiserror::Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

pub fn invalid(e: impl std::fmt::Display) -> anyhow::Error {
    ConfigError(e.to_string()).into()
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        crate::io::from_str_deep(s).map_err(|e| invalid(format!("{e:#}")))
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn gw(&self) -> Result<GwConfig> {
        let m = &self.model;
        let mut g = GwConfig::new(m.n, m.a, m.b, self.horizon()).map_err(invalid)?;
        g.cap = m.cap;
        Ok(g)
    }

    pub fn horizon(&self) -> f64 {
        self.times.iter().copied().fold(self.model.t, f64::max)
    }

    pub fn site_space(&self) -> Result<Option<SiteSpace>> {
        self.space.as_ref().map(|s| SiteSpace::new(s.kernel.clone()).map_err(invalid)).transpose()
    }

    pub fn initial_state(&self) -> Result<MarkedUms> {
        let u = match &self.initial {
            None => MarkedUms::at_site(&Ums::singleton(1.0), 0),
            Some(v) => state_from_value(v.clone()).map_err(|e| invalid(format!("initial state: {e:#}")))?,
        };
        if let Some(sp) = self.site_space()? {
            u.check_sites(&sp).map_err(invalid)?;
        }
        Ok(u)
    }

    pub fn observation_times(&self) -> Vec<f64> {
        if self.times.is_empty() {
            (0..=10).map(|k| self.model.t * k as f64 / 10.0).collect()
        } else {
            self.times.clone()
        }
    }

    /// Parameters of a test command: defaults, then `test`, then top-level overrides.
    pub fn test_config<T: DeserializeOwned + Serialize + Default>(&self) -> Result<T> {
        let mut v = serde_json::to_value(T::default())?;
        if let Some(Value::Object(over)) = &self.test {
            let obj = v.as_object_mut().expect("test configs are objects");
            for (k, x) in over {
                if !obj.contains_key(k) {
                    bail!(invalid(format!("unknown test parameter `{k}`")));
                }
                obj.insert(k.clone(), x.clone());
            }
        } else if self.test.is_some() {
            bail!(invalid("`test` must be an object"));
        }
        let obj = v.as_object_mut().expect("test configs are objects");
        if let Some(s) = self.seed {
            obj.insert("seed".into(), s.into());
        }
        if let (Some(r), true) = (self.replicates, obj.contains_key("replicates")) {
            obj.insert("replicates".into(), r.into());
        }
        if let (Some(r), true) = (self.replicates, obj.contains_key("instances")) {
            obj.insert("instances".into(), r.into());
        }
        if let Some(t) = self.thresholds {
            obj.insert("thresholds".into(), serde_json::to_value(t)?);
        }
        serde_json::from_value(v).map_err(invalid)
    }

    /// Checks everything that can be checked before running.
    pub fn validate(&self) -> Result<()> {
        if let Some(0) = self.threads {
            bail!(invalid("threads must be positive"));
        }
        if self.command.is_test() {
            return Ok(());
        }
        self.gw()?;
        let init = self.initial_state()?;
        let space = self.site_space()?;
        if self.mode == ModeConfig::Path && space.is_none() {
            bail!(invalid("path mode needs a site space"));
        }
        if init.mode.is_path() && self.mode != ModeConfig::Path {
            bail!(invalid("path-marked initial states need path mode"));
        }
        if self.times.iter().any(|t| !(t.is_finite() && *t >= 0.0)) {
            bail!(invalid("observation times must be finite and >= 0"));
        }
        for s in &self.specs {
            s.to_spec().map_err(|e| invalid(format!("spec: {e:#}")))?;
        }
        if self.out.is_none() {
            bail!(invalid(format!("{:?} needs an output directory", self.command)));
        }
        Ok(())
    }
}

pub fn read_config(path: &std::path::Path) -> Result<RunConfig> {
    let s = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(invalid)?;
    RunConfig::from_json(&s)
}
