use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Denoiser, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::fdt::{read_tensor, write_tensor};
use crate::linalg::{Mat, Vector};
use crate::tensor::Tensor;

/// Per-bucket affine ε-predictor `ε̂ = Θ x + b`.
///
/// Buckets are keyed by a per-frame quantized level: 0 for a clean frame, and
/// `1..bins` over the sampling steps `1..=T_s`. Unseen buckets predict zero.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineDenoiser {
    frames: usize,
    dim: usize,
    causal: bool,
    bins: usize,
    schedule: NoiseSchedule,
    pub(crate) buckets: BTreeMap<Vec<u16>, (Mat, Vector)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineManifest {
    pub frames: usize,
    pub dim: usize,
    pub causal: bool,
    pub bins: usize,
    pub base_steps: usize,
    pub sampling_steps: usize,
    pub schedule_hash: String,
    pub buckets: Vec<Vec<u16>>,
    pub theta_file: String,
    pub bias_file: String,
}

impl AffineDenoiser {
    pub fn new(frames: usize, dim: usize, causal: bool, bins: usize, schedule: NoiseSchedule) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Validation("affine denoiser needs frames, dim >= 1".into()));
        }
        if bins < 2 || bins - 1 > schedule.sampling_steps() || bins > u16::MAX as usize {
            return Err(Error::Validation(format!(
                "bins {bins} must lie in 2..={}",
                schedule.sampling_steps() + 1
            )));
        }
        Ok(Self { frames, dim, causal, bins, schedule, buckets: BTreeMap::new() })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    pub fn level(&self, t: usize) -> u16 {
        if t == 0 {
            0
        } else {
            (1 + (t - 1) * (self.bins - 1) / self.schedule.sampling_steps()) as u16
        }
    }

    pub fn bucket_key(&self, t: &[usize]) -> Vec<u16> {
        t.iter().map(|&v| self.level(v)).collect()
    }

    pub fn parameters(&self, key: &[u16]) -> Option<&(Mat, Vector)> {
        self.buckets.get(key)
    }

    pub(crate) fn bucket_mut(&mut self, key: Vec<u16>) -> &mut (Mat, Vector) {
        let n = self.frames * self.dim;
        self.buckets.entry(key).or_insert_with(|| (Mat::zeros(n, n), Vector::zeros(n)))
    }

    /// Zeros every entry above the block diagonal when causal.
    pub(crate) fn enforce_mask(&self, theta: &mut Mat) {
        if !self.causal {
            return;
        }
        let d = self.dim;
        for i in 0..theta.nrows() {
            for j in (i / d + 1) * d..theta.ncols() {
                theta[(i, j)] = 0.0;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.buckets.values().all(|(t, b)| t.iter().chain(b.iter()).all(|v| v.is_finite()))
    }

    /// Writes `<stem>_theta.fdt` `[B, n, n]`, `<stem>_bias.fdt` `[B, n]` and `<stem>.json`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<AffineManifest> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let n = self.frames * self.dim;
        let b = self.buckets.len();
        let mut theta = Vec::with_capacity(b * n * n);
        let mut bias = Vec::with_capacity(b * n);
        for (t, c) in self.buckets.values() {
            theta.extend(t.transpose().iter());
            bias.extend(c.iter());
        }
        let manifest = AffineManifest {
            frames: self.frames,
            dim: self.dim,
            causal: self.causal,
            bins: self.bins,
            base_steps: self.schedule.base_steps(),
            sampling_steps: self.schedule.sampling_steps(),
            schedule_hash: self.schedule.hash(),
            buckets: self.buckets.keys().cloned().collect(),
            theta_file: format!("{stem}_theta.fdt"),
            bias_file: format!("{stem}_bias.fdt"),
        };
        write_tensor(dir.join(&manifest.theta_file), &Tensor::new(vec![b, n, n], theta)?)?;
        write_tensor(dir.join(&manifest.bias_file), &Tensor::new(vec![b, n], bias)?)?;
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str, schedule: NoiseSchedule) -> Result<Self> {
        let dir = dir.as_ref();
        let m: AffineManifest = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
        if m.schedule_hash != schedule.hash() {
            return Err(Error::Validation("denoiser was trained with a different noise schedule".into()));
        }
        let mut out = Self::new(m.frames, m.dim, m.causal, m.bins, schedule)?;
        let n = m.frames * m.dim;
        let b = m.buckets.len();
        let theta = read_tensor(dir.join(&m.theta_file))?;
        let bias = read_tensor(dir.join(&m.bias_file))?;
        if theta.dims() != [b, n, n] || bias.dims() != [b, n] {
            return shape_err("denoiser tensors do not match manifest");
        }
        for (i, key) in m.buckets.into_iter().enumerate() {
            if key.len() != m.frames || key.iter().any(|&l| l as usize >= m.bins) {
                return Err(Error::Validation(format!("bucket key {key:?} is invalid")));
            }
            let mut t = Mat::from_row_slice(n, n, &theta.data()[i * n * n..(i + 1) * n * n]);
            out.enforce_mask(&mut t);
            let c = Vector::from_column_slice(&bias.data()[i * n..(i + 1) * n]);
            out.buckets.insert(key, (t, c));
        }
        if !out.is_finite() {
            return Err(Error::Validation("denoiser parameters are not finite".into()));
        }
        Ok(out)
    }

    fn zero_clean_rows(&self, t: &[usize], v: &mut [f64]) {
        for (k, &tk) in t.iter().enumerate() {
            if tk == 0 {
                v[k * self.dim..(k + 1) * self.dim].iter_mut().for_each(|e| *e = 0.0);
            }
        }
    }
}

impl Denoiser for AffineDenoiser {
    fn frames(&self) -> usize {
        self.frames
    }

    fn frame_dim(&self) -> usize {
        self.dim
    }

    fn is_causal(&self) -> bool {
        self.causal
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_eps(&self, x: &[f64], t: &[usize]) -> Result<Vec<f64>> {
        self.check_input(x, t)?;
        let Some((theta, bias)) = self.buckets.get(&self.bucket_key(t)) else {
            return Ok(vec![0.0; x.len()]);
        };
        let mut out = (theta * Vector::from_column_slice(x) + bias).as_slice().to_vec();
        self.zero_clean_rows(t, &mut out);
        Ok(out)
    }

    fn vjp(&self, x: &[f64], t: &[usize], cotangent: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x, t)?;
        if cotangent.len() != x.len() {
            return shape_err("cotangent length differs from input");
        }
        let Some((theta, _)) = self.buckets.get(&self.bucket_key(t)) else {
            return Ok(vec![0.0; x.len()]);
        };
        let mut c = cotangent.to_vec();
        self.zero_clean_rows(t, &mut c);
        Ok(theta.tr_mul(&Vector::from_vec(c)).as_slice().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn model(causal: bool) -> AffineDenoiser {
        let mut m = AffineDenoiser::new(3, 2, causal, 5, NoiseSchedule::cosine(100, 20).unwrap()).unwrap();
        let mut rng = RngStream::new(0, 0);
        for key in [vec![1u16, 2, 3], vec![0, 4, 4]] {
            let mut t = Mat::from_vec(6, 6, rng.normal_vec(36));
            m.enforce_mask(&mut t);
            m.buckets.insert(key, (t, Vector::from_vec(rng.normal_vec(6))));
        }
        m
    }

    #[test]
    fn levels() {
        let m = model(false);
        assert_eq!(m.level(0), 0);
        assert_eq!(m.level(1), 1);
        assert_eq!(m.level(5), 1);
        assert_eq!(m.level(6), 2);
        assert_eq!(m.level(20), 4);
        assert_eq!(m.bucket_key(&[0, 20, 7]), vec![0, 4, 2]);
    }

    #[test]
    fn unseen_bucket_predicts_zero() {
        let m = model(false);
        assert_eq!(m.predict_eps(&[1.0; 6], &[20, 20, 20]).unwrap(), vec![0.0; 6]);
    }

    #[test]
    fn causal_mask_is_structural() {
        let m = model(true);
        let (t, _) = m.parameters(&[1, 2, 3]).unwrap();
        assert_eq!(t[(0, 2)], 0.0);
        assert_eq!(t[(3, 4)], 0.0);
        assert!(t[(4, 3)] != 0.0);
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(true);
        m.save(dir.path(), "den").unwrap();
        let back = AffineDenoiser::load(dir.path(), "den", NoiseSchedule::cosine(100, 20).unwrap()).unwrap();
        assert_eq!(back, m);
        let x = RngStream::new(5, 0).normal_vec(6);
        assert_eq!(back.predict_eps(&x, &[3, 8, 13]).unwrap(), m.predict_eps(&x, &[3, 8, 13]).unwrap());
        let other = NoiseSchedule::cosine(100, 10).unwrap();
        assert!(AffineDenoiser::load(dir.path(), "den", other).is_err());
    }
}
