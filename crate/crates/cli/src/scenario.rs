//! Scenario files: a system (inline or built by name) plus run settings.

use serde::Deserialize;
use temphom::circuits::{build_bank, build_bank_constitutive, CircuitBank};
use temphom::control::{mathieu_system, ControlConfig};
use temphom::{ForcingSpec, LinearSystem};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub system: Option<LinearSystem>,
    #[serde(default)]
    pub builder: Option<Builder>,
    #[serde(default)]
    pub run: RunSpec,
    /// Required by the `control` subcommand.
    #[serde(default)]
    pub control: Option<ControlConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Builder {
    Mathieu {
        omega: f64,
        #[serde(default)]
        theta: f64,
        epsilon: f64,
        #[serde(default = "unit_x0")]
        x0: [f64; 2],
        #[serde(default = "zero_forcing")]
        forcing: ForcingSpec,
    },
    RlcBank(CircuitBank),
    RlcConstitutive(CircuitBank),
}

fn unit_x0() -> [f64; 2] {
    [1.0, 0.0]
}

fn zero_forcing() -> ForcingSpec {
    ForcingSpec::Zero
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    /// Defaults to `1/eps`.
    pub t_end: Option<f64>,
    /// Grid intervals; defaults to 2000.
    pub n_points: Option<usize>,
    pub rel_tol: Option<f64>,
    pub seed: Option<u64>,
    /// Growth-fit horizon for `circuits verify`.
    pub horizon_factor: Option<f64>,
    /// Interval for the control tracking error; the whole run when absent.
    pub error_window: Option<[f64; 2]>,
}

impl RunSpec {
    pub fn n_points(&self) -> usize {
        self.n_points.unwrap_or(2000)
    }

    pub fn rel_tol(&self) -> f64 {
        self.rel_tol.unwrap_or(1e-10)
    }

    pub fn horizon_factor(&self) -> f64 {
        self.horizon_factor.unwrap_or(20.0)
    }

    pub fn t_end_for(&self, epsilon: f64) -> Result<f64, String> {
        match self.t_end {
            Some(t) => Ok(t),
            None if epsilon > 0.0 => Ok(1.0 / epsilon),
            None => Err("run.t_end is required when epsilon = 0".into()),
        }
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, String> {
        let s: Scenario = serde_json::from_str(text).map_err(|e| format!("malformed scenario: {e}"))?;
        if s.system.is_some() == s.builder.is_some() {
            return Err("scenario needs exactly one of `system` and `builder`".into());
        }
        if s.run.t_end.is_some_and(|t| !(t > 0.0)) || s.run.n_points == Some(0) {
            return Err("run grid must be positive".into());
        }
        Ok(s)
    }

    /// The system to simulate; the constitutive builder yields its own model.
    pub fn system(&self) -> temphom::Result<LinearSystem> {
        if let Some(s) = &self.system {
            return Ok(s.clone());
        }
        match self.builder.as_ref().expect("checked in parse") {
            Builder::Mathieu { omega, theta, epsilon, x0, forcing } => {
                mathieu_system(*omega, *theta, *epsilon, forcing.clone(), *x0)
            }
            Builder::RlcBank(bank) => build_bank(bank),
            Builder::RlcConstitutive(bank) => build_bank_constitutive(bank).map(|(s, _, _)| s),
        }
    }

    pub fn bank(&self) -> Option<(&CircuitBank, bool)> {
        match self.builder.as_ref()? {
            Builder::RlcBank(b) => Some((b, false)),
            Builder::RlcConstitutive(b) => Some((b, true)),
            Builder::Mathieu { .. } => None,
        }
    }
}
