use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{corrupt, AffineDenoiser, Denoiser, DEFAULT_NOISE_CLIP};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{Mat, Vector};
use crate::rng::RngStream;
use crate::schedule::{sample_cat_levels, CatConfig};
use crate::tensor::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub noise_clip: f64,
    pub cat: CatConfig,
    /// Train on one fixed noise pattern instead of CAT draws.
    pub pattern: Option<Vec<usize>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch: 32,
            lr: 1e-2,
            noise_clip: DEFAULT_NOISE_CLIP,
            cat: CatConfig::default(),
            pattern: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample loss of each minibatch.
    pub losses: Vec<f64>,
}

/// All windows of `frames` consecutive frames, stacked frame-major.
pub fn stack_windows(trajs: &[Trajectory], frames: usize, stride: usize) -> Result<Vec<Vec<f64>>> {
    if frames == 0 || stride == 0 {
        return Err(Error::Validation("window length and stride must be >= 1".into()));
    }
    let mut out = Vec::new();
    for tr in trajs {
        let f = tr.frame_len();
        let mut s = 0;
        while s + frames <= tr.frames() {
            out.push(tr.data()[s * f..(s + frames) * f].to_vec());
            s += stride;
        }
    }
    Ok(out)
}

/// Minibatch SGD on `Σ_k ‖ε_k - ε̂_k‖²` over noisy frames, with exact affine gradients.
pub fn train_denoiser(
    model: &mut AffineDenoiser,
    data: &[Vec<f64>],
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<TrainReport> {
    let (k, d) = (model.frames(), model.frame_dim());
    let n = k * d;
    if data.is_empty() || data.iter().any(|s| s.len() != n) {
        return shape_err(format!("training samples must be non-empty with {n} values"));
    }
    if cfg.batch == 0 || !(cfg.lr >= 0.0) || !(cfg.noise_clip > 0.0) {
        return Err(Error::Validation("batch >= 1, lr >= 0 and noise_clip > 0 required".into()));
    }
    if let Some(p) = &cfg.pattern {
        if p.len() != k {
            return shape_err(format!("pattern has {} steps for {k} frames", p.len()));
        }
        model.schedule().check_steps(p)?;
    }
    let ts = model.schedule().sampling_steps();
    let sched = model.schedule().clone();
    let mut report = TrainReport::default();
    let scale = 2.0 / cfg.batch as f64;
    for step in 0..cfg.steps {
        let mut grads: BTreeMap<Vec<u16>, (Mat, Vector)> = BTreeMap::new();
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let sample = &data[rng.int_inclusive(0, data.len() - 1)];
            let t = match &cfg.pattern {
                Some(p) => p.clone(),
                None => sample_cat_levels(k, ts, &cfg.cat, rng)?,
            };
            let (x, eps) = corrupt(sample, &t, d, &sched, rng, cfg.noise_clip)?;
            let key = model.bucket_key(&t);
            let (theta, bias) = model.bucket_mut(key.clone());
            let xv = Vector::from_vec(x);
            let mut r = &*theta * &xv + &*bias - Vector::from_vec(eps);
            for (f, &tf) in t.iter().enumerate() {
                if tf == 0 {
                    r.rows_mut(f * d, d).fill(0.0);
                }
            }
            loss += r.norm_squared();
            let g = grads.entry(key).or_insert_with(|| (Mat::zeros(n, n), Vector::zeros(n)));
            g.0.ger(scale, &r, &xv, 1.0);
            g.1.axpy(scale, &r, 1.0);
        }
        loss /= cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, detail: "training loss is not finite".into() });
        }
        report.losses.push(loss);
        for (key, (gt, gb)) in grads {
            let mut theta = {
                let (theta, bias) = model.bucket_mut(key.clone());
                *theta -= gt * cfg.lr;
                *bias -= gb * cfg.lr;
                std::mem::take(theta)
            };
            model.enforce_mask(&mut theta);
            model.bucket_mut(key).0 = theta;
        }
    }
    Ok(report)
}
