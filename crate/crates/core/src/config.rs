//! JSON instance files.
//!
//! ```json
//! {
//!   "symmetric": {"users": 2, "direct": 1.0, "cross": 0.5},
//!   "noise": 0.05,
//!   "power_grid": {"max": 1000.0, "points": 512},
//!   "min_rates": 1.0,
//!   "discount": 0.9,
//!   "sensing": {"dist": "gaussian", "variance": 0.1, "theta": 1.0}
//! }
//! ```
//!
//! Instead of `symmetric`, `gains` may be a nested matrix or a flat
//! row-major array, where `gains[i][j]` is the gain from transmitter `i` to
//! receiver `j`. Scalars broadcast to every user.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicScenario, MembershipEvent};
use crate::error::{Error, Result};
use crate::its::{Criterion, Monitoring, DEFAULT_PRECISION};
use crate::ldf::DistanceForm;
use crate::model::{ErrorDist, NetworkInstance, PowerGrid, SensingModel};

pub const DEFAULT_GRID_POINTS: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerUser {
    All(f64),
    Each(Vec<f64>),
}

impl PerUser {
    pub fn expand(&self, n: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            PerUser::All(v) => Ok(vec![*v; n]),
            PerUser::Each(v) if v.len() == n => Ok(v.clone()),
            PerUser::Each(v) => Err(Error::Config(format!("{what}: expected {n} values, found {}", v.len()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GainsConfig {
    Nested(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SymmetricConfig {
    pub users: usize,
    #[serde(default = "one")]
    pub direct: f64,
    pub cross: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub max: f64,
    #[serde(default = "default_points")]
    pub points: usize,
}

fn default_points() -> usize {
    DEFAULT_GRID_POINTS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensingConfig {
    #[serde(flatten)]
    pub error: ErrorDist,
    pub theta: PerUser,
}

impl Default for SensingConfig {
    fn default() -> Self {
        SensingConfig {
            error: ErrorDist::Gaussian { variance: 0.1 },
            theta: PerUser::All(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symmetric: Option<SymmetricConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gains: Option<GainsConfig>,
    /// Leading users that are primary; defaults to all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_primary: Option<usize>,
    pub noise: PerUser,
    pub power_grid: GridConfig,
    pub min_rates: PerUser,
    pub discount: f64,
    #[serde(default)]
    pub sensing: SensingConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub criterion: Option<Criterion>,
    #[serde(default)]
    pub monitoring: Monitoring,
    #[serde(default)]
    pub distance_form: DistanceForm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision: Option<f64>,
    /// Users present at the start; defaults to all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub events: Vec<MembershipEvent>,
}

/// A validated instance with everything needed to solve and simulate it.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub net: NetworkInstance,
    pub sensing: SensingModel,
    pub criterion: Criterion,
    pub monitoring: Monitoring,
    pub form: DistanceForm,
    pub precision: f64,
    pub initial: Vec<usize>,
    pub events: Vec<MembershipEvent>,
}

impl Scenario {
    pub fn dynamic(&self, horizon: usize) -> DynamicScenario {
        DynamicScenario {
            universe: self.net.clone(),
            sensing: self.sensing.clone(),
            initial: self.initial.clone(),
            events: self.events.clone(),
            horizon,
            precision: self.precision,
            monitoring: self.monitoring,
            form: self.form,
        }
    }
}

impl InstanceConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("instance file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn users(&self) -> Result<usize> {
        match (&self.symmetric, &self.gains) {
            (Some(s), None) => Ok(s.users),
            (None, Some(GainsConfig::Nested(rows))) => Ok(rows.len()),
            (None, Some(GainsConfig::Flat(flat))) => {
                let n = (flat.len() as f64).sqrt().round() as usize;
                if n * n == flat.len() {
                    Ok(n)
                } else {
                    Err(Error::Config(format!("flat gains of length {} are not square", flat.len())))
                }
            }
            (Some(_), Some(_)) => Err(Error::Config("give either `symmetric` or `gains`, not both".into())),
            (None, None) => Err(Error::Config("missing `gains` or `symmetric`".into())),
        }
    }

    pub fn build(&self) -> Result<Scenario> {
        let n = self.users()?;
        let noise = self.noise.expand(n, "noise")?;
        let min_rates = self.min_rates.expand(n, "min_rates")?;
        let grid = PowerGrid::new(self.power_grid.max, self.power_grid.points)?;
        let flat = match (&self.symmetric, &self.gains) {
            (Some(s), _) => (0..n * n)
                .map(|k| if k / n == k % n { s.direct } else { s.cross })
                .collect(),
            (_, Some(GainsConfig::Nested(rows))) => {
                if rows.iter().any(|r| r.len() != n) {
                    return Err(Error::Config("gain matrix is not square".into()));
                }
                rows.concat()
            }
            (_, Some(GainsConfig::Flat(flat))) => flat.clone(),
            (None, None) => unreachable!("checked by users()"),
        };
        let net = NetworkInstance::from_flat(
            self.num_primary.unwrap_or(n),
            flat,
            noise,
            vec![grid; n],
            min_rates,
            self.discount,
        )?;
        let thresholds = self.sensing.theta.expand(n, "sensing.theta")?;
        let sensing = SensingModel::new(&net, vec![self.sensing.error; n], thresholds)?;
        let criterion = self.criterion.clone().unwrap_or_else(|| Criterion::equal_sum(n));
        let precision = self.precision.unwrap_or(DEFAULT_PRECISION);
        Ok(Scenario {
            net,
            sensing,
            criterion,
            monitoring: self.monitoring,
            form: self.distance_form,
            precision,
            initial: self.initial.clone().unwrap_or_else(|| (0..n).collect()),
            events: self.events.clone(),
        })
    }
}
