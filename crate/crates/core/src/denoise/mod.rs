//! Forward corruption, ε-prediction denoisers and CAT training.

mod affine;
mod gaussian;
mod noise;
mod train;

pub use affine::{AffineDenoiser, AffineManifest};
pub use gaussian::{GaussianDenoiser, GaussianTrajectoryPrior};
pub use noise::{NoiseSchedule, NoiseScheduleConfig};
pub use train::{stack_windows, train_denoiser, TrainConfig, TrainReport};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{Mat, Vector};
use crate::rng::RngStream;

/// Default clip for the standard-normal corruption noise.
pub const DEFAULT_NOISE_CLIP: f64 = 6.0;

/// ε-prediction on stacked trajectories of `frames x frame_dim` values.
pub trait Denoiser: Send + Sync {
    fn frames(&self) -> usize;
    fn frame_dim(&self) -> usize;
    fn is_causal(&self) -> bool;
    fn schedule(&self) -> &NoiseSchedule;

    fn predict_eps(&self, x: &[f64], t: &[usize]) -> Result<Vec<f64>>;

    /// Gradient of `<cotangent, predict_eps(x, t)>` with respect to `x`.
    fn vjp(&self, x: &[f64], t: &[usize], cotangent: &[f64]) -> Result<Vec<f64>>;

    fn check_input(&self, x: &[f64], t: &[usize]) -> Result<()> {
        let n = self.frames() * self.frame_dim();
        if x.len() != n || t.len() != self.frames() {
            return shape_err(format!(
                "denoiser expects {} frames of {} values (got {} values, {} steps)",
                self.frames(),
                self.frame_dim(),
                x.len(),
                t.len()
            ));
        }
        self.schedule().check_steps(t)
    }
}

/// `ε̂ = G x + c` for one noise pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub g: Mat,
    pub c: Vector,
}

impl AffineMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let y = &self.g * Vector::from_column_slice(x) + &self.c;
        y.as_slice().to_vec()
    }

    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        self.g.tr_mul(&Vector::from_column_slice(v)).as_slice().to_vec()
    }
}

fn check_pattern(x: &[f64], t: &[usize], dim: usize, sched: &NoiseSchedule) -> Result<()> {
    if dim == 0 || x.len() != t.len() * dim {
        return shape_err(format!("{} values do not form {} frames of {dim}", x.len(), t.len()));
    }
    sched.check_steps(t)
}

/// Draw standard-normal noise, clipped to `±clip`.
pub fn draw_noise(n: usize, clip: f64, rng: &mut RngStream) -> Vec<f64> {
    (0..n).map(|_| rng.normal().clamp(-clip, clip)).collect()
}

/// `x_k^(t_k) = √ᾱ x_k + √(1-ᾱ) ε_k` per frame.
pub fn corrupt_with(x: &[f64], t: &[usize], dim: usize, sched: &NoiseSchedule, eps: &[f64]) -> Result<Vec<f64>> {
    check_pattern(x, t, dim, sched)?;
    if eps.len() != x.len() {
        return shape_err("noise length differs from trajectory");
    }
    let mut out = Vec::with_capacity(x.len());
    for (k, &tk) in t.iter().enumerate() {
        let a = sched.alpha_bar(tk);
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        for i in k * dim..(k + 1) * dim {
            out.push(sa * x[i] + sb * eps[i]);
        }
    }
    Ok(out)
}

pub fn corrupt(
    x: &[f64],
    t: &[usize],
    dim: usize,
    sched: &NoiseSchedule,
    rng: &mut RngStream,
    noise_clip: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let eps = draw_noise(x.len(), noise_clip, rng);
    Ok((corrupt_with(x, t, dim, sched, &eps)?, eps))
}

/// `x̂₀ = (x^(t) - √(1-ᾱ) ε̂) / √ᾱ` per frame.
pub fn tweedie(noisy: &[f64], t: &[usize], dim: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    check_pattern(noisy, t, dim, sched)?;
    if eps.len() != noisy.len() {
        return shape_err("noise prediction length differs from trajectory");
    }
    let mut out = Vec::with_capacity(noisy.len());
    for (k, &tk) in t.iter().enumerate() {
        let a = sched.alpha_bar(tk);
        if a <= 0.0 {
            return Err(Error::Singular(format!("alpha-bar is zero at frame {k}")));
        }
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        for i in k * dim..(k + 1) * dim {
            out.push((noisy[i] - sb * eps[i]) / sa);
        }
    }
    Ok(out)
}
