//! Versioned file schemas for the command-line front end: scenario documents,
//! run configurations, and the detector construction they describe. All
//! randomness in a run flows from the single top-level seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::EvalConfig;
use crate::forecaster::{
    CvForecaster, DetectorModel, IdentityDetector, KernelDetector, KernelDetectorParams,
    OracleDetector, StageCosts,
};
use crate::kernels::GridSpec;
use crate::scene::{ObservationNoise, Scenario, ScenarioConfig};
use crate::simrt::{DelayModel, SchedulerParams};

/// Current schema version for every file this crate writes.
pub const SCHEMA_VERSION: u32 = 1;

/// Scenario document: the scenario itself plus a schema version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub version: u32,
    #[serde(flatten)]
    pub scenario: Scenario,
}

impl ScenarioFile {
    pub fn new(scenario: Scenario) -> Self {
        ScenarioFile { version: SCHEMA_VERSION, scenario }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported scenario schema version {} (expected {SCHEMA_VERSION})",
                self.version
            )));
        }
        self.scenario.validate()
    }
}

/// Scenario-generation configuration document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfigFile {
    pub version: u32,
    #[serde(flatten)]
    pub config: ScenarioConfig,
}

/// Which detector to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Identity,
    Cv,
    Kernel,
    Oracle,
}

impl std::str::FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(DetectorKind::Identity),
            "cv" => Ok(DetectorKind::Cv),
            "kernel" => Ok(DetectorKind::Kernel),
            "oracle" => Ok(DetectorKind::Oracle),
            other => Err(Error::InvalidConfiguration(format!(
                "unknown detector '{other}' (expected identity, cv, kernel or oracle)"
            ))),
        }
    }
}

/// Feature-grid settings for the kernel detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelOptions {
    pub channels: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub r1: usize,
    pub r2: usize,
    pub peak_threshold: f64,
    pub map_seed: u64,
}

impl Default for KernelOptions {
    fn default() -> Self {
        // 38x60 grid: 1/16 of a 600x960 working resolution
        KernelOptions {
            channels: 4,
            grid_height: 38,
            grid_width: 60,
            r1: 3,
            r2: 1,
            peak_threshold: 0.3,
            map_seed: 7,
        }
    }
}

/// Detector selection plus its nominal stage costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    pub stage_costs: StageCosts,
    #[serde(default)]
    pub kernel: Option<KernelOptions>,
}

impl DetectorConfig {
    pub fn build(&self, scenario: &Scenario) -> Result<Box<dyn DetectorModel>> {
        self.stage_costs.validate()?;
        Ok(match self.kind {
            DetectorKind::Identity => Box::new(IdentityDetector::new(self.stage_costs)),
            DetectorKind::Cv => Box::new(CvForecaster::new(self.stage_costs)),
            DetectorKind::Kernel => {
                let opt = self.kernel.unwrap_or_default();
                let grid = GridSpec {
                    channels: opt.channels,
                    height: opt.grid_height,
                    width: opt.grid_width,
                    image_size: scenario.image_size,
                };
                let mut params = KernelDetectorParams::for_grid(grid, opt.r1, opt.r2, opt.map_seed);
                params.peak_threshold = opt.peak_threshold;
                Box::new(KernelDetector::new(self.stage_costs, params))
            }
            DetectorKind::Oracle => Box::new(OracleDetector::new(self.stage_costs, scenario.clone())),
        })
    }
}

/// One full run description: where the scenario comes from, which detector
/// runs, and every scheduler/delay/noise/eval knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: u32,
    /// path to a scenario document, resolved relative to the config file
    #[serde(default)]
    pub scenario_path: Option<String>,
    /// inline generation config, used when no path is given
    #[serde(default)]
    pub scenario_config: Option<ScenarioConfig>,
    pub detector: DetectorConfig,
    #[serde(default)]
    pub scheduler: SchedulerParams,
    pub delay: DelayModel,
    #[serde(default)]
    pub noise: ObservationNoise,
    #[serde(default = "EvalConfig::default")]
    pub eval: EvalConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported run config schema version {} (expected {SCHEMA_VERSION})",
                self.version
            )));
        }
        if self.scenario_path.is_none() && self.scenario_config.is_none() {
            return Err(Error::InvalidConfiguration(
                "run config needs scenario_path or scenario_config".into(),
            ));
        }
        self.scheduler.validate()?;
        self.delay.validate()?;
        self.noise.validate()?;
        self.eval.validate()?;
        self.detector.stage_costs.validate()?;
        Ok(())
    }

    /// Load or generate the scenario this run uses. `base` is the directory
    /// of the config file, for resolving relative paths.
    pub fn resolve_scenario(&self, base: &std::path::Path) -> Result<Scenario> {
        if let Some(p) = &self.scenario_path {
            let path = base.join(p);
            let text = std::fs::read_to_string(&path).map_err(|e| {
                Error::InvalidConfiguration(format!("cannot read scenario {}: {e}", path.display()))
            })?;
            let file: ScenarioFile = serde_json::from_str(&text)
                .map_err(|e| Error::Schema(format!("scenario {}: {e}", path.display())))?;
            file.validate()?;
            Ok(file.scenario)
        } else {
            let cfg = self.scenario_config.as_ref().expect("checked by validate");
            crate::scene::generate_scenario(cfg, self.seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::generate_scenario;
    use crate::simrt::Dist;

    fn sample_run_config() -> RunConfig {
        RunConfig {
            version: SCHEMA_VERSION,
            scenario_path: None,
            scenario_config: Some(ScenarioConfig { num_tracks: 3, length: 30, ..Default::default() }),
            detector: DetectorConfig {
                kind: DetectorKind::Cv,
                stage_costs: StageCosts { backbone: 0.02, neck: 0.01, head: 0.01 },
                kernel: None,
            },
            scheduler: SchedulerParams::default(),
            delay: DelayModel {
                d1: Dist::Constant { value: 0.005 },
                d2b: Dist::Constant { value: 0.02 },
                d2n: Dist::Constant { value: 0.01 },
                d2h: Dist::Constant { value: 0.01 },
                delay_factor: 1.0,
                drop_probability: 0.0,
                seed: 0,
            },
            noise: ObservationNoise::none(),
            eval: EvalConfig::default(),
            seed: 0,
        }
    }

    #[test]
    fn run_config_round_trips() {
        let cfg = sample_run_config();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn scenario_file_round_trips() {
        let cfg = ScenarioConfig { num_tracks: 4, length: 50, ..Default::default() };
        let s = generate_scenario(&cfg, 9).unwrap();
        let file = ScenarioFile::new(s.clone());
        let text = serde_json::to_string(&file).unwrap();
        let back: ScenarioFile = serde_json::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.scenario, s);
    }

    #[test]
    fn bad_version_rejected() {
        let mut cfg = sample_run_config();
        cfg.version = 99;
        assert!(cfg.validate().is_err());
        let mut f = ScenarioFile::new(generate_scenario(&ScenarioConfig::default(), 1).unwrap());
        f.version = 0;
        assert!(f.validate().is_err());
    }

    #[test]
    fn every_detector_kind_builds() {
        let s = generate_scenario(&ScenarioConfig { num_tracks: 1, length: 10, ..Default::default() }, 1)
            .unwrap();
        for kind in [DetectorKind::Identity, DetectorKind::Cv, DetectorKind::Kernel, DetectorKind::Oracle] {
            let cfg = DetectorConfig {
                kind,
                stage_costs: StageCosts { backbone: 0.01, neck: 0.01, head: 0.01 },
                kernel: None,
            };
            let m = cfg.build(&s).unwrap();
            assert!(!m.name().is_empty());
        }
        assert_eq!("cv".parse::<DetectorKind>().unwrap(), DetectorKind::Cv);
        assert!("nope".parse::<DetectorKind>().is_err());
    }
}
