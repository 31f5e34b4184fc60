use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Fifth-order piecewise-rational taper with support `[0, 2c]`.
pub fn gaspari_cohn(d: f64, c: f64) -> f64 {
    let r = d.abs() / c;
    if r <= 1.0 {
        ((((-0.25 * r + 0.5) * r + 0.625) * r - 5.0 / 3.0) * r * r) + 1.0
    } else if r < 2.0 {
        ((((r / 12.0 - 0.5) * r + 0.625) * r + 5.0 / 3.0) * r - 5.0) * r + 4.0 - 2.0 / (3.0 * r)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalizationConfig {
    /// Distance (grid points) at and beyond which the taper vanishes.
    pub cutoff: f64,
    #[serde(default = "default_periodic")]
    pub periodic: bool,
}

fn default_periodic() -> bool {
    true
}

impl LocalizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0) {
            return Err(Error::Validation(format!("localization cutoff {} must be positive", self.cutoff)));
        }
        Ok(())
    }

    /// Half-width `c` of the Gaspari–Cohn taper.
    pub fn half_width(&self) -> f64 {
        self.cutoff / 2.0
    }
}

/// Taper evaluation on an `H x W` grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridLocalizer {
    pub config: LocalizationConfig,
    pub height: usize,
    pub width: usize,
}

impl GridLocalizer {
    pub fn new(config: LocalizationConfig, height: usize, width: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, height, width })
    }

    pub fn distance(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        let axis = |p: usize, q: usize, n: usize| {
            let d = p.abs_diff(q);
            if self.config.periodic {
                d.min(n - d)
            } else {
                d
            }
        };
        let (dr, dc) = (axis(a.0, b.0, self.height), axis(a.1, b.1, self.width));
        ((dr * dr + dc * dc) as f64).sqrt()
    }

    pub fn taper(&self, a: (usize, usize), b: (usize, usize)) -> f64 {
        gaspari_cohn(self.distance(a, b), self.config.half_width())
    }

    /// Grid location of flat state index `i` (channel-major frames).
    pub fn state_location(&self, i: usize) -> (usize, usize) {
        let p = i % (self.height * self.width);
        (p / self.width, p % self.width)
    }

    /// `ρ(state i, obs j)` for every pair.
    pub fn state_obs(&self, state_len: usize, obs: &[(usize, usize)]) -> Mat {
        Mat::from_fn(state_len, obs.len(), |i, j| self.taper(self.state_location(i), obs[j]))
    }

    pub fn obs_obs(&self, obs: &[(usize, usize)]) -> Mat {
        Mat::from_fn(obs.len(), obs.len(), |i, j| self.taper(obs[i], obs[j]))
    }
}
