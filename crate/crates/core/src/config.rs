//! Versioned JSON configuration document. Unknown keys are rejected at every
//! level; omitted sections and fields take the defaults of their types.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::{EmissionsSpec, Provider, DEFAULT_DEVICE_POWER_KW};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{SynthConfig, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    pub input_extents: [usize; 3],
    pub bytes_per_element: usize,
    pub batch: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        AnalyzeConfig {
            input_extents: [128, 128, 128],
            bytes_per_element: 4,
            batch: 1,
        }
    }
}

/// Either `preset` or `intensity` (kg CO₂-eq per kWh); neither means Amazon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmissionsConfig {
    pub hours: f64,
    #[serde(default = "default_power")]
    pub power_kw: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Provider>,
}

fn default_power() -> f64 {
    DEFAULT_DEVICE_POWER_KW
}

impl EmissionsConfig {
    pub fn to_spec(&self) -> Result<EmissionsSpec> {
        let intensity = match (self.intensity, self.preset) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "emissions: give either intensity or preset, not both".into(),
                ))
            }
            (Some(i), None) => i,
            (None, p) => p.unwrap_or(Provider::Amazon).intensity(),
        };
        let spec = EmissionsSpec {
            device_power_kw: self.power_kw,
            hours: self.hours,
            carbon_intensity_kg_per_kwh: intensity,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Parses `key=value` overrides such as `preset=amazon hours=74.40`.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut hours = None;
        let mut out = EmissionsConfig {
            hours: 0.0,
            power_kw: DEFAULT_DEVICE_POWER_KW,
            intensity: None,
            preset: None,
        };
        let num = |k: &str, v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("emissions: {k}={v} is not a number")))
        };
        for pair in pairs {
            let (k, v) = pair.split_once('=').ok_or_else(|| {
                Error::Config(format!("emissions: expected key=value, got {pair:?}"))
            })?;
            match k {
                "hours" => hours = Some(num(k, v)?),
                "power_kw" => out.power_kw = num(k, v)?,
                "intensity" => out.intensity = Some(num(k, v)?),
                "preset" => out.preset = Some(v.parse()?),
                _ => return Err(Error::Config(format!("emissions: unknown key {k:?}"))),
            }
        }
        out.hours = hours.ok_or_else(|| Error::Config("emissions: hours is required".into()))?;
        out.to_spec()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: SynthConfig,
    #[serde(default)]
    pub analyze: AnalyzeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emissions: Option<EmissionsConfig>,
}

impl Default for ConfigDocument {
    fn default() -> Self {
        ConfigDocument {
            version: CONFIG_VERSION,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: SynthConfig::default(),
            analyze: AnalyzeConfig::default(),
            emissions: None,
        }
    }
}

impl ConfigDocument {
    /// Parses and validates. Errors carry serde's line/column and key name.
    pub fn parse(text: &str) -> Result<Self> {
        let doc: ConfigDocument =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        doc.validate()?;
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.model.validate_extents(self.data.extents)?;
        if let Some(p) = self.train.patch_extents {
            self.model.validate_extents(p)?;
            if (0..3).any(|a| p[a] > self.data.extents[a]) {
                return Err(Error::Config(format!(
                    "patch_extents {p:?} exceed data extents {:?}",
                    self.data.extents
                )));
            }
        }
        self.model.validate_extents(self.analyze.input_extents)?;
        if self.analyze.bytes_per_element == 0 {
            return Err(Error::Config(
                "analyze.bytes_per_element must be positive".into(),
            ));
        }
        if let Some(e) = &self.emissions {
            e.to_spec()?;
        }
        Ok(())
    }
}
