use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HolaError, Result};
use crate::hsd::HsdConfig;
use crate::lobi::DEFAULT_CALIB_SIZE;
use crate::quant::{check_block_size, BLOCK_SIZE};
use crate::rag::{DEFAULT_DELTA, DEFAULT_TOP_K};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = HolaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(HolaError::Config(format!("unknown report format {other:?}"))),
        }
    }
}

/// Everything a benchmark run needs. Absent model paths fall back to
/// seeded random desk presets; an absent index is built from the default
/// corpus with the serving draft model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub draft: Option<PathBuf>,
    pub verifier: Option<PathBuf>,
    pub draft_adapters: Option<PathBuf>,
    pub verifier_adapters: Option<PathBuf>,
    pub index: Option<PathBuf>,
    /// Precomputed precision maps; assigned from calibration when absent.
    pub draft_map: Option<PathBuf>,
    pub verifier_map: Option<PathBuf>,
    pub output: Option<PathBuf>,

    pub seed: u64,
    pub tasks: usize,
    pub max_tokens: usize,
    pub draft_chunk: usize,
    pub tau: f64,
    pub delta: f64,
    pub top_k: usize,
    pub calib_size: usize,
    pub block_size: usize,
    /// Precision-assignment slack relative to the mean calibration logit norm.
    pub lobi_tolerance: f64,
    pub format: ReportFormat,
    pub parallel: usize,

    pub no_hsd: bool,
    pub no_rag: bool,
    pub no_lobi: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            draft: None,
            verifier: None,
            draft_adapters: None,
            verifier_adapters: None,
            index: None,
            draft_map: None,
            verifier_map: None,
            output: None,
            seed: 0,
            tasks: 20,
            max_tokens: 8,
            draft_chunk: 4,
            tau: HsdConfig::DEFAULT_TAU,
            delta: DEFAULT_DELTA,
            top_k: DEFAULT_TOP_K,
            calib_size: DEFAULT_CALIB_SIZE,
            block_size: BLOCK_SIZE,
            lobi_tolerance: 0.0,
            format: ReportFormat::Json,
            parallel: 1,
            no_hsd: false,
            no_rag: false,
            no_lobi: false,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| HolaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&fs::read_to_string(path).map_err(|e| HolaError::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hsd(&self) -> HsdConfig {
        HsdConfig {
            tau: self.tau,
            max_tokens: self.max_tokens,
            draft_chunk: self.draft_chunk,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hsd().validate()?;
        let bad = |m: &str| Err(HolaError::Config(m.into()));
        if self.delta.is_nan() || self.delta < 0.0 {
            return bad("delta must be >= 0");
        }
        if self.top_k == 0 {
            return bad("top_k must be >= 1");
        }
        if self.calib_size == 0 {
            return bad("calib_size must be >= 1");
        }
        if self.tasks == 0 {
            return bad("tasks must be >= 1");
        }
        if self.lobi_tolerance.is_nan() || self.lobi_tolerance < 0.0 {
            return bad("lobi_tolerance must be >= 0");
        }
        check_block_size(self.block_size)?;
        let paths = [
            &self.draft,
            &self.verifier,
            &self.draft_adapters,
            &self.verifier_adapters,
            &self.index,
            &self.draft_map,
            &self.verifier_map,
        ];
        for p in paths.into_iter().flatten() {
            if !p.exists() {
                return Err(HolaError::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}
