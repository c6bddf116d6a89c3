//! Experiment configuration: one TOML file per run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use mfbsde::acceptance::Scale;
use mfbsde::applications::FixedPointOptions;
use mfbsde::bsde::RegressionConfig;
use mfbsde::continuation::ContinuationConfig;
use mfbsde::grid::MarkSpace;
use mfbsde::maximum_principle::SmpOptions;
use mfbsde::monotonicity::MonotonicityData;
use mfbsde::registry;
use mfbsde::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Overrides the horizon of the registry instance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    pub steps: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { horizon: None, steps: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarksConfig {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Options {
    /// Continuity sweep parameters.
    pub alphas: Vec<f64>,
    pub base_alpha: f64,
    /// Optimality gap: random directions (each also used with opposite sign).
    pub directions: usize,
    pub direction_seed: u64,
    pub rhos: Vec<f64>,
    /// Deliberate perturbation used by `smp`: `u + shift` on `[0, shift_until)`.
    pub shift: f64,
    pub shift_until: f64,
    pub riccati_steps: usize,
    pub fixed_point: FixedPointOptions,
    pub smp: SmpOptions,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub monotonicity: Option<MonotonicityData>,
    pub probe_samples: usize,
    pub scale: Scale,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            alphas: vec![0.4, 0.2, 0.1, 0.05],
            base_alpha: 0.0,
            directions: 20,
            direction_seed: 3,
            rhos: vec![0.1, 0.2],
            shift: 0.5,
            shift_until: 0.5,
            riccati_steps: 10_000,
            fixed_point: FixedPointOptions::default(),
            smp: SmpOptions::default(),
            monotonicity: None,
            probe_samples: 2_000,
            scale: Scale::Quick,
        }
    }
}

fn default_particles() -> usize {
    5_000
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: String,
    #[serde(default)]
    pub parameters: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marks: Option<MarksConfig>,
    #[serde(default = "default_particles")]
    pub particles: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub solver: ContinuationConfig,
    #[serde(default)]
    pub regression: RegressionConfig,
    #[serde(default)]
    pub options: Options,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn for_problem(name: &str) -> Self {
        Self {
            problem: name.to_string(),
            parameters: BTreeMap::new(),
            grid: GridConfig::default(),
            marks: None,
            particles: default_particles(),
            seed: default_seed(),
            solver: ContinuationConfig::default(),
            regression: RegressionConfig::default(),
            options: Options::default(),
            out: None,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::ConfigParse(e.to_string()))?;
        check_finite(&toml::Value::Table(raw), "")?;
        let cfg: Self = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::ConfigParse(m) => Error::ConfigParse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigParse(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !registry::NAMES.contains(&self.problem.as_str()) {
            return Err(Error::UnknownProblem(self.problem.clone()));
        }
        if self.grid.steps == 0 {
            return Err(Error::ZeroSteps);
        }
        if self.particles < 2 {
            return Err(Error::ConfigParse("`particles` must be at least 2".into()));
        }
        self.solver.validate()?;
        self.regression.validate()?;
        Ok(())
    }

    /// Marks of the uncontrolled examples: the configured ones, or unit marks.
    pub fn example_marks(&self, count: usize) -> Result<MarkSpace> {
        match &self.marks {
            Some(m) => MarkSpace::new(m.points.clone(), m.weights.clone()),
            None => MarkSpace::new((1..=count).map(|j| vec![j as f64]).collect(), vec![1.0 / count as f64; count]),
        }
    }
}

fn check_finite(value: &toml::Value, path: &str) -> Result<()> {
    match value {
        toml::Value::Float(f) if !f.is_finite() => Err(Error::ConfigParse(format!("`{path}` must be finite, got {f}"))),
        toml::Value::Table(t) => {
            for (k, v) in t {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                check_finite(v, &p)?;
            }
            Ok(())
        }
        toml::Value::Array(a) => {
            for (i, v) in a.iter().enumerate() {
                check_finite(v, &format!("{path}[{i}]"))?;
            }
            Ok(())
        }
        _ => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::parse("problem = \"lq\"").unwrap();
        assert_eq!(c.grid.steps, 100);
        assert_eq!(c.seed, 42);
        assert_eq!(c.options.rhos, vec![0.1, 0.2]);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = ExperimentConfig::parse("problem = \"lq\"\n[grid]\nsteps = 10\nstpes = 3\n").unwrap_err();
        assert!(matches!(e, Error::ConfigParse(_)));
        assert!(e.to_string().contains("stpes"), "{e}");
    }

    #[test]
    fn non_finite_value_is_named() {
        let e = ExperimentConfig::parse("problem = \"lq\"\n[parameters]\na = nan\n").unwrap_err();
        assert!(e.to_string().contains("parameters.a"), "{e}");
    }

    #[test]
    fn unknown_problem() {
        let e = ExperimentConfig::parse("problem = \"heston\"").unwrap_err();
        assert!(matches!(e, Error::UnknownProblem(_)));
    }

    #[test]
    fn round_trip() {
        let mut c = ExperimentConfig::for_problem("example_3_1");
        c.parameters.insert("terminal".into(), serde_json::json!(2.5));
        c.grid.horizon = Some(0.3);
        c.marks = Some(MarksConfig { points: vec![vec![1.0], vec![2.0]], weights: vec![0.5, 0.25] });
        c.options.monotonicity = Some(MonotonicityData {
            g: vec![vec![1.0]],
            beta1: 2.0,
            beta2: 2.0,
            beta3: 2.0,
            mu1: 2.0,
            c0: 1.0,
            lambda1: None,
            l_a: 1.0,
            l_phi: 1.0,
            l_f: 0.1,
            l_g: 0.0,
            horizon: 0.25,
        });
        c.out = Some("runs/a".into());
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), c);
    }
}
