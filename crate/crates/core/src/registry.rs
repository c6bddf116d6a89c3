//! Named problem instances, selectable from configuration files.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::applications::{LQParams, MarketParams};
use crate::coefficients::{self, Coefficients};
use crate::continuation::FbsdeProblem;
use crate::error::{Error, Result};

pub const NAMES: [&str; 4] = ["example_3_1", "example_3_2", "portfolio", "lq"];

/// Scalar constants of the two uncontrolled examples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleParams {
    pub horizon: f64,
    pub x0: f64,
    pub beta1: f64,
    /// Coefficient of `x` in the terminal condition (first example only).
    pub terminal: f64,
    pub marks: usize,
}

#[derive(Clone)]
pub enum Instance {
    Fbsde { name: String, params: ExampleParams, problem: FbsdeProblem },
    Portfolio { params: MarketParams, horizon: f64 },
    Lq { params: LQParams, horizon: f64 },
}

impl Instance {
    pub fn horizon(&self) -> f64 {
        match self {
            Instance::Fbsde { params, .. } => params.horizon,
            Instance::Portfolio { horizon, .. } | Instance::Lq { horizon, .. } => *horizon,
        }
    }
}

/// The explicitly solvable scalar system on `T = 0.25`, `x(0) = 1`, `β₁ = 2`.
pub fn example_3_1() -> FbsdeProblem {
    FbsdeProblem::scalar(Arc::new(coefficients::example_3_1_with_terminal(1, 2.0)), 2.0, 1.0)
}

/// The mean-field system without adapted solution on `T = 3π/4`.
pub fn example_3_2() -> FbsdeProblem {
    FbsdeProblem::scalar(Arc::new(coefficients::example_3_2(1)), 1.0, 1.0)
}

pub fn portfolio() -> MarketParams {
    MarketParams {
        rho: 0.05.into(),
        mu: 0.12.into(),
        sigma: 0.3.into(),
        eta: vec![0.1.into()],
        intensity: vec![1.0],
        a: 2.0,
        gamma: 0.5,
        gamma_mf: 0.2,
        alpha: 0.3,
        alpha_mf: 0.1,
        beta: 0.2,
        beta_mf: 0.1,
        x0: 1.0,
    }
}

pub fn lq() -> LQParams {
    LQParams {
        a: -0.5,
        a_mf: 0.1,
        b: 0.2,
        b_v: 1.0,
        c: 0.3,
        c_mf: 0.1,
        l: -0.2,
        l_mf: 0.1,
        d: 0.5,
        jump: vec![0.5],
        intensity: vec![1.0],
        r: 1.0,
        n: 1.0,
        q: 1.0,
        x0: 1.0,
    }
}

fn default_example(name: &str) -> ExampleParams {
    match name {
        "example_3_1" => ExampleParams { horizon: 0.25, x0: 1.0, beta1: 2.0, terminal: 2.0, marks: 1 },
        _ => ExampleParams { horizon: 0.75 * std::f64::consts::PI, x0: 1.0, beta1: 1.0, terminal: 0.0, marks: 1 },
    }
}

/// Applies `overrides` to the serialized form of `value`; unknown keys fail.
fn apply<T>(value: &T, overrides: &BTreeMap<String, serde_json::Value>) -> Result<T>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let mut json = serde_json::to_value(value)?;
    let obj = json.as_object_mut().ok_or_else(|| Error::InvalidInput("parameters are not a map".into()))?;
    for (k, v) in overrides {
        if !obj.contains_key(k) {
            return Err(Error::InvalidInput(format!("unknown parameter `{k}`")));
        }
        obj.insert(k.clone(), v.clone());
    }
    serde_json::from_value(json).map_err(|e| Error::InvalidInput(format!("bad parameter override: {e}")))
}

/// The instance registered under `name` with `overrides` applied. The key
/// `horizon` is accepted for every instance.
pub fn lookup(name: &str, overrides: &BTreeMap<String, serde_json::Value>) -> Result<Instance> {
    let mut rest = overrides.clone();
    let horizon_override = match rest.remove("horizon") {
        Some(v) => Some(v.as_f64().ok_or_else(|| Error::InvalidInput("`horizon` must be a number".into()))?),
        None => None,
    };
    match name {
        "example_3_1" | "example_3_2" => {
            let mut params: ExampleParams = apply(&default_example(name), &rest)?;
            if let Some(h) = horizon_override {
                params.horizon = h;
            }
            if params.marks == 0 {
                return Err(Error::InvalidInput("at least one mark is required".into()));
            }
            let coeffs: Arc<dyn Coefficients> = if name == "example_3_1" {
                Arc::new(coefficients::example_3_1_with_terminal(params.marks, params.terminal))
            } else {
                Arc::new(coefficients::example_3_2(params.marks))
            };
            let problem = FbsdeProblem::scalar(coeffs, params.beta1, params.x0);
            Ok(Instance::Fbsde { name: name.into(), params, problem })
        }
        "portfolio" => {
            Ok(Instance::Portfolio { params: apply(&portfolio(), &rest)?, horizon: horizon_override.unwrap_or(1.0) })
        }
        "lq" => Ok(Instance::Lq { params: apply(&lq(), &rest)?, horizon: horizon_override.unwrap_or(1.0) }),
        other => Err(Error::UnknownProblem(other.into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn every_name_resolves() {
        for n in NAMES {
            assert!(lookup(n, &BTreeMap::new()).is_ok(), "{n}");
        }
        assert!(matches!(lookup("nope", &BTreeMap::new()), Err(Error::UnknownProblem(_))));
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let mut o = BTreeMap::new();
        o.insert("d".to_string(), json!(0.0));
        o.insert("horizon".to_string(), json!(2.0));
        match lookup("lq", &o).unwrap() {
            Instance::Lq { params, horizon } => {
                assert_eq!(params.d, 0.0);
                assert_eq!(horizon, 2.0);
            }
            _ => panic!(),
        }
        o.insert("bogus".to_string(), json!(1.0));
        let err = lookup("lq", &o).err().unwrap().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn example_defaults() {
        let i = lookup("example_3_2", &BTreeMap::new()).unwrap();
        assert!((i.horizon() - 0.75 * std::f64::consts::PI).abs() < 1e-15);
        let mut o = BTreeMap::new();
        o.insert("terminal".to_string(), json!(2.4));
        match lookup("example_3_1", &o).unwrap() {
            Instance::Fbsde { params, .. } => assert_eq!(params.terminal, 2.4),
            _ => panic!(),
        }
    }
}
