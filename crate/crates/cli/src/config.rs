//! Experiment configuration. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use unida::classical::{CvtConfig, LocalizationConfig};
use unida::denoise::TrainConfig;
use unida::dynamics::{NsConfig, SsmSpec};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub observe: Option<ObserveSpec>,
    #[serde(default)]
    pub method: Option<MethodSpec>,
    #[serde(default)]
    pub train: Option<TrainSpec>,
    #[serde(default)]
    pub forecast: Option<ForecastSpec>,
    #[serde(default)]
    pub evaluate: EvaluateSpec,
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Ssm {
        model: SsmSpec,
        frames: usize,
        #[serde(default = "one")]
        trajectories: usize,
    },
    Ns {
        #[serde(default = "ns_grid")]
        grid: usize,
        #[serde(default = "ns_viscosity")]
        viscosity: f64,
        #[serde(default = "ns_drag")]
        drag: f64,
        #[serde(default = "ns_forcing")]
        forcing: f64,
        #[serde(default = "ns_dt")]
        dt: f64,
        #[serde(default = "ns_store")]
        store_interval: f64,
        #[serde(default)]
        output_grid: Option<usize>,
        frames: usize,
        #[serde(default = "one")]
        trajectories: usize,
        #[serde(default)]
        burn_in: usize,
    },
}

fn one() -> usize {
    1
}
fn ns_grid() -> usize {
    64
}
fn ns_viscosity() -> f64 {
    1e-3
}
fn ns_drag() -> f64 {
    0.1
}
fn ns_forcing() -> f64 {
    1.0
}
fn ns_dt() -> f64 {
    2e-3
}
fn ns_store() -> f64 {
    0.5
}

impl DatasetSpec {
    pub fn frames(&self) -> usize {
        match self {
            Self::Ssm { frames, .. } | Self::Ns { frames, .. } => *frames,
        }
    }

    pub fn trajectories(&self) -> usize {
        match self {
            Self::Ssm { trajectories, .. } | Self::Ns { trajectories, .. } => *trajectories,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Ssm { .. } => "ssm",
            Self::Ns { .. } => "ns",
        }
    }

    /// Solver configuration for an NS dataset.
    pub fn ns_config(&self, seed: u64) -> Option<NsConfig> {
        match *self {
            Self::Ns { grid, viscosity, drag, forcing, dt, store_interval, output_grid, .. } => {
                Some(NsConfig { grid, viscosity, drag, forcing, dt, store_interval, seed, output_grid })
            }
            Self::Ssm { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorConfig {
    SparseMask {
        ratio: f64,
        #[serde(default)]
        mask_seed: Option<u64>,
    },
    Downsample {
        factor: usize,
    },
    /// The observation matrix of the SSM dataset.
    Linear,
    LinearMatrix {
        h: Vec<Vec<f64>>,
    },
}

impl OperatorConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::SparseMask { .. } => "sparse_mask",
            Self::Downsample { .. } => "downsample",
            Self::Linear => "linear",
            Self::LinearMatrix { .. } => "linear_matrix",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObserveSpec {
    pub operator: OperatorConfig,
    /// Noise standard deviation in the units of the stored trajectories.
    pub sigma_y: f64,
    /// Index of the observed (truth) trajectory.
    #[serde(default)]
    pub trajectory: usize,
    /// Observe every `every`-th frame starting at frame 0.
    #[serde(default = "one")]
    pub every: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserRef {
    /// Exact denoiser of the SSM trajectory prior.
    Analytic,
    /// Model written by `train`.
    Trained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    Kf,
    Rts,
    Enkf {
        members: usize,
        #[serde(default = "unit")]
        inflation: f64,
        #[serde(default)]
        localization: Option<LocalizationConfig>,
    },
    Enks {
        members: usize,
        lag: usize,
        #[serde(default = "unit")]
        inflation: f64,
        #[serde(default)]
        localization: Option<LocalizationConfig>,
    },
    Var3d {
        cvt: CvtConfig,
    },
    Var4d {
        window: usize,
        sigma_b: f64,
        #[serde(default)]
        cg_tol: Option<f64>,
        #[serde(default)]
        cg_max_iter: Option<usize>,
    },
    Forcingdas {
        u: usize,
        gamma: f64,
        zeta: f64,
        #[serde(default)]
        ddim_eta: f64,
        denoiser: DenoiserRef,
        /// Clean leading frames taken from the truth trajectory.
        #[serde(default)]
        context: usize,
        /// Window length and sampling steps of the analytic denoiser.
        #[serde(default)]
        window: Option<usize>,
        #[serde(default = "steps")]
        sampling_steps: usize,
    },
}

fn unit() -> f64 {
    1.0
}
fn steps() -> usize {
    100
}

impl MethodSpec {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Kf => "kf",
            Self::Rts => "rts",
            Self::Enkf { .. } => "enkf",
            Self::Enks { .. } => "enks",
            Self::Var3d { .. } => "var3d",
            Self::Var4d { .. } => "var4d",
            Self::Forcingdas { .. } => "forcingdas",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    /// Frames per training window.
    pub window: usize,
    pub sampling_steps: usize,
    #[serde(default = "base_steps")]
    pub base_steps: usize,
    /// Noise-level buckets per frame; defaults to `sampling_steps + 1`.
    #[serde(default)]
    pub bins: Option<usize>,
    #[serde(default = "yes")]
    pub causal: bool,
    /// Project frames onto this many whitened principal components first.
    #[serde(default)]
    pub pca_dim: Option<usize>,
    /// Dataset trajectories used for training; defaults to all but the observed one.
    #[serde(default)]
    pub trajectories: Option<Vec<usize>>,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub optimizer: TrainConfig,
}

fn base_steps() -> usize {
    1000
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecastSpec {
    pub context: usize,
    pub horizon: usize,
    pub members: usize,
    #[serde(default)]
    pub ddim_eta: f64,
    /// Trajectory supplying the context; defaults to the observed one.
    #[serde(default)]
    pub trajectory: Option<usize>,
    #[serde(default)]
    pub start: usize,
    #[serde(default = "trained")]
    pub denoiser: DenoiserRef,
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default = "steps")]
    pub sampling_steps: usize,
}

fn trained() -> DenoiserRef {
    DenoiserRef::Trained
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatitudeGrid {
    #[default]
    Uniform,
    Equiangular,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSpec {
    #[serde(default)]
    pub latitudes: LatitudeGrid,
    /// CSI thresholds; CSI is skipped when absent.
    #[serde(default)]
    pub csi_thresholds: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub frames: usize,
    pub steps: usize,
    pub u: usize,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut de = serde_json::Deserializer::from_str(&text);
        let cfg: Self = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            let at = e.path().to_string();
            CliError::config(format!("{} at key `{at}`: {}", path.display(), e.inner()))
        })?;
        cfg.check()?;
        Ok((cfg, value))
    }

    /// Cross-field compatibility checks that the schema cannot express.
    pub fn check(&self) -> Result<(), CliError> {
        let Some(ds) = &self.dataset else {
            for (present, what) in [
                (self.observe.is_some(), "observe"),
                (self.method.is_some(), "method"),
                (self.train.is_some(), "train"),
                (self.forecast.is_some(), "forecast"),
            ] {
                if present {
                    return Err(CliError::incompatible(format!("section {what}"), "missing dataset section"));
                }
            }
            return Ok(());
        };
        if ds.frames() == 0 || ds.trajectories() == 0 {
            return Err(CliError::config("dataset.frames and dataset.trajectories must be >= 1"));
        }
        if let Some(obs) = &self.observe {
            if obs.trajectory >= ds.trajectories() {
                return Err(CliError::config(format!(
                    "observe.trajectory {} is outside dataset.trajectories {}",
                    obs.trajectory,
                    ds.trajectories()
                )));
            }
            if obs.every == 0 {
                return Err(CliError::config("observe.every must be >= 1"));
            }
            let op = obs.operator.kind();
            match (ds, &obs.operator) {
                (DatasetSpec::Ssm { .. }, OperatorConfig::SparseMask { .. } | OperatorConfig::Downsample { .. }) => {
                    return Err(CliError::incompatible("dataset ssm", format!("operator {op}")));
                }
                (DatasetSpec::Ns { .. }, OperatorConfig::Linear) => {
                    return Err(CliError::incompatible("dataset ns", "operator linear (use linear_matrix)"));
                }
                _ => {}
            }
        }
        if let Some(m) = &self.method {
            let op = self.observe.as_ref().map(|o| o.operator.kind());
            let Some(op) = op else {
                return Err(CliError::incompatible(format!("method {}", m.name()), "missing observe section"));
            };
            let need = |ok: bool, other: String| {
                if ok {
                    Ok(())
                } else {
                    Err(CliError::incompatible(format!("method {}", m.name()), other))
                }
            };
            match m {
                MethodSpec::Kf | MethodSpec::Rts | MethodSpec::Var4d { .. } => {
                    need(ds.kind() == "ssm", "dataset ns (needs a linear ssm)".into())?
                }
                MethodSpec::Var3d { .. } => need(op == "sparse_mask", format!("operator {op} (needs sparse_mask)"))?,
                MethodSpec::Enkf { localization: Some(_), .. } | MethodSpec::Enks { localization: Some(_), .. } => {
                    need(op == "sparse_mask", format!("operator {op} (localization needs sparse_mask)"))?
                }
                MethodSpec::Forcingdas { denoiser: DenoiserRef::Analytic, .. } => {
                    need(ds.kind() == "ssm", "dataset ns (analytic denoiser needs an ssm)".into())?
                }
                MethodSpec::Forcingdas { denoiser: DenoiserRef::Trained, .. } => {
                    need(self.train.is_some(), "missing train section".into())?
                }
                _ => {}
            }
        }
        if let Some(f) = &self.forecast {
            if f.denoiser == DenoiserRef::Analytic && ds.kind() != "ssm" {
                return Err(CliError::incompatible("forecast analytic denoiser", "dataset ns"));
            }
            if f.denoiser == DenoiserRef::Trained && self.train.is_none() {
                return Err(CliError::incompatible("forecast trained denoiser", "missing train section"));
            }
        }
        Ok(())
    }

    pub fn observed_trajectory(&self) -> usize {
        self.observe.as_ref().map_or(0, |o| o.trajectory)
    }

    pub fn dataset(&self) -> Result<&DatasetSpec, CliError> {
        self.dataset.as_ref().ok_or_else(|| CliError::config("config has no dataset section"))
    }
}

/// SHA-256 of the canonical (key-sorted, compact) JSON form.
pub fn config_hash(value: &serde_json::Value) -> String {
    // serde_json's default map is ordered, so serialization sorts keys
    let canon = serde_json::to_string(value).expect("json value serializes");
    hex::encode(Sha256::digest(canon.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"a":1,"b":{"x":2,"y":[1,2]}}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"b":{"y":[1,2],"x":2},"a":1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn unknown_key_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"schedule":{"frames":3,"steps":4,"u":2,"gama":1}}"#).unwrap();
        let err = ExperimentConfig::load(&p).unwrap_err();
        assert!(err.message.contains("schedule") && err.message.contains("gama"), "{}", err.message);
    }

    #[test]
    fn var3d_needs_a_mask() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"dataset":{"kind":"ns","frames":2},
                "observe":{"operator":{"kind":"downsample","factor":2},"sigma_y":0.1},
                "method":{"kind":"var3d","cvt":{"length_scales":[2.0],"sigma_b":1.0}}}"#,
        )
        .unwrap();
        let err = cfg.check().unwrap_err();
        assert!(err.message.contains("var3d") && err.message.contains("downsample"), "{}", err.message);
    }
}
