use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const COSINE_OFFSET: f64 = 0.008;

/// Cosine variance schedule on a base grid with a strided sampling grid.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
    grid: Vec<usize>,
    floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseScheduleConfig {
    pub base_steps: usize,
    pub sampling_steps: usize,
    pub floor: f64,
}

impl Default for NoiseScheduleConfig {
    fn default() -> Self {
        Self { base_steps: 1000, sampling_steps: 100, floor: 1e-5 }
    }
}

impl NoiseSchedule {
    pub fn cosine(base_steps: usize, sampling_steps: usize) -> Result<Self> {
        Self::from_config(&NoiseScheduleConfig { base_steps, sampling_steps, ..Default::default() })
    }

    pub fn from_config(cfg: &NoiseScheduleConfig) -> Result<Self> {
        let (tb, ts) = (cfg.base_steps, cfg.sampling_steps);
        if tb == 0 || ts == 0 || ts > tb {
            return Err(Error::Validation(format!(
                "need 1 <= sampling steps ({ts}) <= base steps ({tb})"
            )));
        }
        if !(cfg.floor > 0.0 && cfg.floor < 1e-3) {
            return Err(Error::Validation(format!("alpha-bar floor {} outside (0, 1e-3)", cfg.floor)));
        }
        let f = |t: usize| {
            let x = (t as f64 / tb as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
            (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
        };
        let f0 = f(0);
        let alpha_bar = (0..=tb).map(|t| cfg.floor + (1.0 - cfg.floor) * f(t) / f0).collect();
        let grid = (0..=ts).map(|i| ((i * tb) as f64 / ts as f64).round() as usize).collect();
        Ok(Self { alpha_bar, grid, floor: cfg.floor })
    }

    pub fn base_steps(&self) -> usize {
        self.alpha_bar.len() - 1
    }

    pub fn sampling_steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn config(&self) -> NoiseScheduleConfig {
        NoiseScheduleConfig {
            base_steps: self.base_steps(),
            sampling_steps: self.sampling_steps(),
            floor: self.floor,
        }
    }

    /// Base-table index of sampling step `t`.
    pub fn base_index(&self, t: usize) -> usize {
        self.grid[t]
    }

    pub fn base_alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `ᾱ` at sampling step `t`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[self.grid[t]]
    }

    pub fn check_steps(&self, t: &[usize]) -> Result<()> {
        match t.iter().position(|&v| v > self.sampling_steps()) {
            Some(k) => Err(Error::OutOfRange(format!(
                "frame {k} step {} exceeds {}",
                t[k],
                self.sampling_steps()
            ))),
            None => Ok(()),
        }
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.base_steps() as u64).to_le_bytes());
        h.update((self.sampling_steps() as u64).to_le_bytes());
        for a in &self.alpha_bar {
            h.update(a.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}
