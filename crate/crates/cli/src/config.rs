//! Project configuration: `config.json` next to `project.json`. Absent fields
//! take their defaults; `SPHERESFM_SEED` and `SPHERESFM_PORT` override the
//! file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use spheresfm_core::dense::DisparityParams;
use spheresfm_core::epipolar::RansacParams;
use spheresfm_core::ImageSize;

use crate::error::{CliError, Result};

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EstimateMethod {
    /// Eight-point fit on manual and augmented matches.
    #[default]
    Linear,
    /// RANSAC over every match of the pair.
    Ransac,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub threshold: f64,
    pub max_iterations: usize,
    pub min_inliers: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        let d = RansacParams::default();
        Self {
            threshold: d.threshold,
            max_iterations: d.max_iterations,
            min_inliers: d.min_inliers,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenseConfig {
    pub window: u32,
    pub d_min: u32,
    pub d_max: Option<u32>,
    pub ncc_floor: f64,
    pub lr_tolerance: f64,
    pub mask_fraction: f64,
}

impl Default for DenseConfig {
    fn default() -> Self {
        let d = DisparityParams::default();
        Self {
            window: d.window,
            d_min: d.d_min,
            d_max: d.d_max,
            ncc_floor: d.ncc_floor,
            lr_tolerance: d.lr_tolerance,
            mask_fraction: d.mask_fraction,
        }
    }
}

impl DenseConfig {
    pub fn params(&self) -> DisparityParams {
        DisparityParams {
            window: self.window,
            d_min: self.d_min,
            d_max: self.d_max,
            ncc_floor: self.ncc_floor,
            lr_tolerance: self.lr_tolerance,
            mask_fraction: self.mask_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub estimate: EstimateMethod,
    pub ransac: RansacConfig,
    /// Residual bound for admitting imported matches in `augment`.
    pub filter_epsilon: f64,
    pub dense: DenseConfig,
    /// Rectified panorama size; the first image's size when absent.
    pub rect_size: Option<ImageSize>,
    pub port: u16,
    /// Samples along each epipolar curve served to the UI.
    pub curve_samples: usize,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            estimate: EstimateMethod::Linear,
            ransac: RansacConfig::default(),
            filter_epsilon: 0.01,
            dense: DenseConfig::default(),
            rect_size: None,
            port: 8080,
            curve_samples: 720,
        }
    }
}

impl Config {
    /// Reads `config.json` from `dir` if present, then applies the environment.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(CONFIG_FILE);
        let mut config = match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| {
                CliError::new(
                    crate::error::ErrorKind::Malformed,
                    "InvalidConfig",
                    format!("{}: {e}", path.display()),
                )
            })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Config::default(),
            Err(e) => return Err(CliError::io(path.display(), e)),
        };
        config.apply_env(|k| std::env::var(k).ok())?;
        Ok(config)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(s) = var("SPHERESFM_SEED") {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| CliError::malformed(format!("SPHERESFM_SEED={s} is not an integer")))?;
        }
        if let Some(s) = var("SPHERESFM_PORT") {
            self.port = s
                .trim()
                .parse()
                .map_err(|_| CliError::malformed(format!("SPHERESFM_PORT={s} is not a port")))?;
        }
        Ok(())
    }

    pub fn ransac_params(&self) -> RansacParams {
        RansacParams {
            threshold: self.ransac.threshold,
            max_iterations: self.ransac.max_iterations,
            seed: self.seed,
            min_inliers: self.ransac.min_inliers,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
