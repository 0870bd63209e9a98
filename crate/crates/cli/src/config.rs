//! Experiment configuration: preset defaults merged with user overrides.

use std::path::PathBuf;

use heatlearn::baselines::{MpcConfig, ZopoConfig};
use heatlearn::deepo::AdamHyper;
use heatlearn::presets::*;
use heatlearn::simlab::Waveform;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Bench3d,
    DhsIndustrial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Gd,
    Adam,
    Ce,
    Zopo,
    Mpc,
    Fixed,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Gd => "gd",
            Algo::Adam => "adam",
            Algo::Ce => "ce",
            Algo::Zopo => "zopo",
            Algo::Mpc => "mpc",
            Algo::Fixed => "fixed",
        }
    }

    /// Whether the covariance mode changes what the algorithm does.
    pub fn uses_cov_mode(self) -> bool {
        matches!(self, Algo::Gd | Algo::Adam)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovMode {
    Estimated,
    Identity,
}

impl CovMode {
    pub fn name(self) -> &'static str {
        match self {
            CovMode::Estimated => "estimated",
            CovMode::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bench3dSection {
    /// Disturbance coupling levels `B_w1..B_w4`.
    pub levels: Vec<u8>,
    pub cov_modes: Vec<CovMode>,
    pub design_mismatch: f64,
    pub sigma_w: f64,
    pub sigma_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndustrialSection {
    /// Static mismatch sweep.
    pub static_mismatch: Vec<f64>,
    /// Drift amplitude sweep, run at `drift_delta`.
    pub drift_amplitudes: Vec<f64>,
    pub drift_delta: f64,
    pub waveform: Waveform,
    pub cov_modes: Vec<CovMode>,
    /// Window of the windowed-mean optimality error.
    pub window: usize,
    pub params: IndustrialParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GdSection {
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub algorithms: Vec<Algo>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub warm_start: usize,
    pub cost_stride: usize,
    pub snr_stride: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench3d: Option<Bench3dSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub industrial: Option<IndustrialSection>,
    pub gd: GdSection,
    pub adam: AdamHyper,
    pub zopo: ZopoConfig,
    pub mpc: MpcConfig,
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Bench3d => ExperimentConfig {
                preset: p,
                algorithms: vec![Algo::Gd, Algo::Adam],
                seeds: (0..20).collect(),
                steps: BENCH3D_STEPS,
                warm_start: BENCH3D_WARM_START,
                cost_stride: 10,
                snr_stride: 100,
                out_dir: None,
                bench3d: Some(Bench3dSection {
                    levels: vec![1, 2, 3, 4],
                    cov_modes: vec![CovMode::Estimated, CovMode::Identity],
                    design_mismatch: BENCH3D_DESIGN_MISMATCH,
                    sigma_w: BENCH3D_SIGMA_W,
                    sigma_s: BENCH3D_SIGMA_S,
                }),
                industrial: None,
                gd: GdSection { eta: BENCH3D_GD_ETA },
                adam: AdamHyper::with_eta0(1e-2),
                zopo: ZopoConfig::default(),
                mpc: MpcConfig::default(),
            },
            Preset::DhsIndustrial => ExperimentConfig {
                preset: p,
                algorithms: vec![Algo::Gd, Algo::Adam],
                seeds: (0..10).collect(),
                steps: INDUSTRIAL_STEPS,
                warm_start: INDUSTRIAL_WARM_START,
                cost_stride: 100,
                snr_stride: 1000,
                out_dir: None,
                bench3d: None,
                industrial: Some(IndustrialSection {
                    static_mismatch: INDUSTRIAL_STATIC_MISMATCH.to_vec(),
                    drift_amplitudes: INDUSTRIAL_DRIFT_AMPLITUDES.to_vec(),
                    drift_delta: 0.2,
                    waveform: Waveform::UniformIid,
                    cov_modes: vec![CovMode::Estimated],
                    window: INDUSTRIAL_STEPS / 2,
                    params: IndustrialParams::default(),
                }),
                gd: GdSection { eta: INDUSTRIAL_GD_ETA },
                adam: AdamHyper::with_eta0(INDUSTRIAL_ADAM_ETA0),
                zopo: ZopoConfig::default(),
                mpc: MpcConfig::default(),
            },
        }
    }

    /// Parses a config file: the named preset supplies every value the file
    /// leaves out.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let user: toml::Table = toml::from_str(text)?;
        let preset: Preset = match user.get("preset") {
            Some(v) => v.clone().try_into()?,
            None => return Err(CliError::Invalid("missing `preset`".into())),
        };
        let mut base = toml::Table::try_from(Self::preset(preset))?;
        merge(&mut base, user);
        let cfg: ExperimentConfig = toml::Value::Table(base).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Invalid(msg));
        if self.seeds.is_empty() {
            return bad("seeds list is empty".into());
        }
        if self.algorithms.is_empty() {
            return bad("algorithms list is empty".into());
        }
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if !(self.gd.eta >= 0.0) {
            return bad(format!("gd.eta = {} must be >= 0", self.gd.eta));
        }
        self.zopo.validate().map_err(|e| CliError::Invalid(e.to_string()))?;
        match self.preset {
            Preset::Bench3d => {
                let Some(b) = &self.bench3d else {
                    return bad("bench3d preset needs a [bench3d] section".into());
                };
                if self.industrial.is_some() {
                    return bad("[industrial] does not apply to the bench3d preset".into());
                }
                if let Some(l) = b.levels.iter().find(|l| !(1..=4).contains(*l)) {
                    return bad(format!("coupling level {l} is not in 1..=4"));
                }
                if b.levels.is_empty() || b.cov_modes.is_empty() {
                    return bad("bench3d levels and cov_modes must be nonempty".into());
                }
                if self.warm_start == 0 {
                    return bad("warm_start must be positive".into());
                }
            }
            Preset::DhsIndustrial => {
                let Some(s) = &self.industrial else {
                    return bad("dhs-industrial preset needs an [industrial] section".into());
                };
                if self.bench3d.is_some() {
                    return bad("[bench3d] does not apply to the dhs-industrial preset".into());
                }
                if s.cov_modes.is_empty() {
                    return bad("industrial cov_modes must be nonempty".into());
                }
                if s.static_mismatch.is_empty() && s.drift_amplitudes.is_empty() {
                    return bad("no mismatch cases to run".into());
                }
                if s.window == 0 {
                    return bad("window must be positive".into());
                }
            }
        }
        Ok(())
    }
}

/// Overlays `over` on `base`, recursing into tables present in both.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Seed list given on the command line.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedList(pub Vec<u64>);

/// Parses `--seeds`: a comma list (`1,2,5`) or a half-open range (`0..10`).
pub fn parse_seed_arg(s: &str) -> Result<SeedList, String> {
    parse_seeds(s).map(SeedList)
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let s = s.trim();
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("bad seed range start: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("bad seed range end: {e}"))?;
        return Ok((a..b).collect());
    }
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| x.trim().parse::<u64>().map_err(|e| format!("bad seed '{x}': {e}")))
        .collect()
}
