use serde::{Deserialize, Serialize};

use super::{
    make_gridworld_pair, make_pendulum_pair, EnvironmentPair, DEFAULT_REAL_MASS, DEFAULT_SIM_MASS,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Pendulum,
    Gridworld,
}

/// Environment pair description, one row of the modified-environment table:
/// `{env, property, default, modified, dt, horizon}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    pub env: EnvKind,
    pub property: String,
    pub default: f64,
    pub modified: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    /// Gridworld side length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
}

impl PairConfig {
    pub fn pendulum_default() -> Self {
        Self {
            env: EnvKind::Pendulum,
            property: "mass".into(),
            default: DEFAULT_SIM_MASS,
            modified: DEFAULT_REAL_MASS,
            dt: Some(0.02),
            horizon: Some(200),
            size: None,
        }
    }

    pub fn gridworld(size: usize, sim_slip: f64, real_slip: f64) -> Self {
        Self {
            env: EnvKind::Gridworld,
            property: "slip".into(),
            default: sim_slip,
            modified: real_slip,
            dt: None,
            horizon: None,
            size: Some(size),
        }
    }

    pub fn build(&self) -> Result<EnvironmentPair> {
        if self.default == self.modified {
            return Err(Error::InvalidParameter(format!(
                "{}: default and modified values are both {}",
                self.property, self.default
            )));
        }
        match (self.env, self.property.as_str()) {
            (EnvKind::Pendulum, "mass") => {
                let mut pair = make_pendulum_pair(
                    self.default,
                    self.modified,
                    self.dt.unwrap_or(0.02),
                    self.horizon.unwrap_or(200),
                )?;
                pair.modification.property_name = self.property.clone();
                Ok(pair)
            }
            (EnvKind::Gridworld, "slip") => {
                let size = self.size.unwrap_or(4);
                let horizon = self.horizon.unwrap_or(50);
                let mk = |slip| {
                    super::Gridworld::new(super::GridworldParams {
                        horizon,
                        ..super::GridworldParams::new(size, slip)
                    })
                };
                let mut pair = make_gridworld_pair(size, self.default, self.modified, 0)?;
                pair.sim = Box::new(mk(self.default)?);
                pair.real = Box::new(mk(self.modified)?);
                Ok(pair)
            }
            (env, prop) => Err(Error::Unknown(format!("property {prop:?} for {env:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_table_row() {
        let c: PairConfig = serde_json::from_str(
            r#"{"env": "pendulum", "property": "mass", "default": 4.89, "modified": 100.0, "dt": 0.02, "horizon": 200}"#,
        )
        .unwrap();
        assert_eq!(c, PairConfig::pendulum_default());
        let pair = c.build().unwrap();
        assert_eq!(pair.modification.default_value, 4.89);
        assert_eq!(pair.modification.modified_value, 100.0);

        let t: PairConfig = toml::from_str(
            "env = \"gridworld\"\nproperty = \"slip\"\ndefault = 0.0\nmodified = 0.3\nsize = 3\n",
        )
        .unwrap();
        assert!(t.build().unwrap().sim.tabular_view().is_some());
    }

    #[test]
    fn rejects_unmodified_or_unknown() {
        let mut c = PairConfig::pendulum_default();
        c.modified = c.default;
        assert!(c.build().is_err());
        let mut c = PairConfig::pendulum_default();
        c.property = "length".into();
        assert!(c.build().is_err());
    }
}
