//! Run configuration documents and their content hashes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coupled::SystemParams;
use crate::error::{Error, Result};
use crate::trajectory::{DetectorModel, PumpSchedule};
use crate::units::Energy;

/// SHA-256 of the canonical JSON serialization of `value`, hex encoded.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("configuration types serialize infallibly");
    hex::encode(Sha256::digest(&json))
}

/// Device section: the five coupled-mode parameters plus optional extra
/// rates of the open-system model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub exciton_uev: f64,
    pub cavity_uev: f64,
    pub gamma_x_uev: f64,
    pub gamma_c_uev: f64,
    pub g_uev: f64,
    /// Exciton-to-cavity transfer rate, 1/ps.
    #[serde(default)]
    pub cavity_feed_per_ps: f64,
    /// Pure exciton dephasing rate, 1/ps.
    #[serde(default)]
    pub dephasing_per_ps: f64,
}

impl DeviceConfig {
    pub fn params(&self) -> Result<SystemParams> {
        SystemParams::new(
            Energy::from_uev(self.exciton_uev),
            Energy::from_uev(self.cavity_uev),
            Energy::from_uev(self.gamma_x_uev),
            Energy::from_uev(self.gamma_c_uev),
            Energy::from_uev(self.g_uev),
        )
    }

    pub fn model(&self) -> Result<crate::dynamics::LindbladModel> {
        let mut m = crate::dynamics::LindbladModel::from_params(&self.params()?)
            .with_cavity_feed(self.cavity_feed_per_ps);
        m.dephasing = self.dephasing_per_ps;
        m.validate()?;
        Ok(m)
    }
}

/// Analysis section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default = "default_bin")]
    pub bin_ps: f64,
    /// Half-width of the correlation window in rep periods (pulsed).
    #[serde(default = "default_window_periods")]
    pub window_periods: f64,
    #[serde(default = "default_side_peaks")]
    pub side_peaks: usize,
    #[serde(default = "default_duration")]
    pub duration_ps: f64,
}

fn default_bin() -> f64 {
    128.0
}
fn default_window_periods() -> f64 {
    13.0
}
fn default_side_peaks() -> usize {
    10
}
fn default_duration() -> f64 {
    1.3e9
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            bin_ps: default_bin(),
            window_periods: default_window_periods(),
            side_peaks: default_side_peaks(),
            duration_ps: default_duration(),
        }
    }
}

/// Top-level configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub device: DeviceConfig,
    pub pump: PumpSchedule,
    #[serde(default)]
    pub detectors: DetectorModel,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    /// Parses and validates a JSON document. Errors name the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::invalid(format!("config field `{}`: {}", e.path(), e.inner())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.device.model()?;
        self.pump.validate(&model)?;
        self.detectors.validate()?;
        let a = &self.analysis;
        if !(a.bin_ps > 0.0 && a.window_periods > 0.0 && a.duration_ps > 0.0) {
            return Err(Error::invalid("analysis: bin_ps, window_periods and duration_ps must be > 0"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }
}
