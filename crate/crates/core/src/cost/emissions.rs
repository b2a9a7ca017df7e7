use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Board power of a 250 W accelerator.
pub const DEFAULT_DEVICE_POWER_KW: f64 = 0.25;

/// Cloud regions with a fixed grid carbon intensity. Amazon's value is the
/// published eu-central-1 figure; Azure and Google are back-solved from
/// published per-provider emission totals and are derived constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    Azure,
    Google,
    Amazon,
}

impl Provider {
    pub const ALL: [Provider; 3] = [Provider::Azure, Provider::Google, Provider::Amazon];

    /// kg CO₂-eq per kWh.
    pub fn intensity(self) -> f64 {
        match self {
            Provider::Azure => 0.57,
            Provider::Google => 0.62,
            Provider::Amazon => 0.61,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Provider::Azure => "azure",
            Provider::Google => "google",
            Provider::Amazon => "amazon",
        }
    }
}

impl fmt::Display for Provider {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Provider {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Provider::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown emissions preset {s:?} (expected azure, google or amazon)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmissionsSpec {
    pub device_power_kw: f64,
    pub hours: f64,
    pub carbon_intensity_kg_per_kwh: f64,
}

impl EmissionsSpec {
    pub fn preset(provider: Provider, hours: f64) -> Self {
        EmissionsSpec {
            device_power_kw: DEFAULT_DEVICE_POWER_KW,
            hours,
            carbon_intensity_kg_per_kwh: provider.intensity(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("device_power_kw", self.device_power_kw),
            ("hours", self.hours),
            (
                "carbon_intensity_kg_per_kwh",
                self.carbon_intensity_kg_per_kwh,
            ),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn energy_kwh(&self) -> f64 {
        self.device_power_kw * self.hours
    }
}

/// `power_kw × hours × intensity`, in kg CO₂-eq.
pub fn estimate_co2(spec: &EmissionsSpec) -> Result<f64> {
    spec.validate()?;
    Ok(spec.energy_kwh() * spec.carbon_intensity_kg_per_kwh)
}

/// Wall-clock hours of `runs` trainings of `epochs` epochs each.
pub fn training_hours(epoch_seconds: f64, epochs: usize, runs: usize) -> f64 {
    epoch_seconds * (epochs * runs) as f64 / 3600.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Co2Report {
    #[serde(flatten)]
    pub spec: EmissionsSpec,
    pub energy_kwh: f64,
    pub kg_co2: f64,
}

impl Co2Report {
    pub fn new(spec: EmissionsSpec) -> Result<Self> {
        Ok(Co2Report {
            kg_co2: estimate_co2(&spec)?,
            energy_kwh: spec.energy_kwh(),
            spec,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn amazon_closed_form() {
        let kg = estimate_co2(&EmissionsSpec::preset(Provider::Amazon, 74.40)).unwrap();
        assert!((kg - 74.40 * 0.25 * 0.61).abs() < 1e-12);
        assert_eq!(format!("{kg:.2}"), "11.35");
    }

    #[test]
    fn rejects_non_positive_inputs() {
        for bad in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(estimate_co2(&EmissionsSpec::preset(Provider::Azure, bad)).is_err());
            let spec = EmissionsSpec {
                device_power_kw: bad,
                ..EmissionsSpec::preset(Provider::Azure, 1.0)
            };
            assert!(estimate_co2(&spec).is_err());
        }
    }

    #[test]
    fn preset_names_parse() {
        for p in Provider::ALL {
            assert_eq!(p.name().parse::<Provider>().unwrap(), p);
        }
        assert_eq!("AMAZON".parse::<Provider>().unwrap(), Provider::Amazon);
        assert!("aws".parse::<Provider>().is_err());
    }

    #[test]
    fn hours_from_epochs() {
        assert!((training_hours(3600.0, 2, 5) - 10.0).abs() < 1e-12);
    }
}
