//! Evaluation metrics and tidy report output.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::spectral::{wavenumber, Fft2};
use crate::tensor::Trajectory;

/// Intensity thresholds on the 0–255 scale.
pub const CSI_THRESHOLDS: [f64; 6] = [16.0, 74.0, 133.0, 160.0, 181.0, 219.0];

pub const SPECTRUM_FLOOR: f64 = 1e-12;

/// Cosine-of-latitude row weights with unit mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatWeights {
    weights: Vec<f64>,
}

impl LatWeights {
    pub fn from_latitudes(degrees: &[f64]) -> Result<Self> {
        if degrees.is_empty() || degrees.iter().any(|d| !(d.abs() < 90.0)) {
            return Err(Error::Validation("latitudes must lie strictly inside (-90, 90)".into()));
        }
        let cos: Vec<f64> = degrees.iter().map(|d| d.to_radians().cos()).collect();
        let mean = cos.iter().sum::<f64>() / cos.len() as f64;
        Ok(Self { weights: cos.iter().map(|c| c / mean).collect() })
    }

    /// Cell-centred equiangular rows from south to north.
    pub fn equiangular(rows: usize) -> Result<Self> {
        let lats: Vec<f64> = (0..rows).map(|i| -90.0 + (i as f64 + 0.5) * 180.0 / rows as f64).collect();
        Self::from_latitudes(&lats)
    }

    pub fn uniform(rows: usize) -> Self {
        Self { weights: vec![1.0; rows] }
    }

    pub fn rows(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    fn check(&self, height: usize) -> Result<()> {
        if self.weights.len() != height {
            return shape_err(format!("{} latitude weights for {height} rows", self.weights.len()));
        }
        Ok(())
    }
}

fn same_shape(a: &Trajectory, b: &Trajectory) -> Result<()> {
    if !a.same_shape(b) {
        return shape_err("prediction and truth shapes differ");
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameScores {
    /// `None` where the metric is undefined for that frame.
    pub per_frame: Vec<Option<f64>>,
    pub mean: f64,
}

impl FrameScores {
    fn new(per_frame: Vec<Option<f64>>) -> Self {
        let defined: Vec<f64> = per_frame.iter().flatten().copied().collect();
        let mean = if defined.is_empty() { f64::NAN } else { defined.iter().sum::<f64>() / defined.len() as f64 };
        Self { per_frame, mean }
    }
}

/// Per-frame relative L2 error, or latitude-weighted RMSE when `weights` is given.
pub fn nrmse(pred: &Trajectory, truth: &Trajectory, weights: Option<&LatWeights>) -> Result<FrameScores> {
    same_shape(pred, truth)?;
    let (h, w) = (truth.height(), truth.width());
    if let Some(lw) = weights {
        lw.check(h)?;
    }
    let per = (0..truth.frames())
        .map(|k| {
            let (p, t) = (pred.frame(k), truth.frame(k));
            match weights {
                Some(lw) => {
                    let s: f64 = p
                        .iter()
                        .zip(t)
                        .enumerate()
                        .map(|(i, (a, b))| lw.weights[(i / w) % h] * (a - b).powi(2))
                        .sum();
                    Some((s / p.len() as f64).sqrt())
                }
                None => {
                    let num: f64 = p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum();
                    let den: f64 = t.iter().map(|b| b * b).sum();
                    (den > 0.0).then(|| (num / den).sqrt())
                }
            }
        })
        .collect();
    Ok(FrameScores::new(per))
}

/// Half-open wavenumber bands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumBands {
    pub bands: Vec<(String, f64, f64)>,
    pub floor: f64,
}

impl Default for SpectrumBands {
    fn default() -> Self {
        Self {
            bands: vec![
                ("low".into(), 0.5, 8.0),
                ("mid".into(), 8.0, 32.0),
                ("high".into(), 32.0, 64.0),
                ("all".into(), 0.5, 64.0),
            ],
            floor: SPECTRUM_FLOOR,
        }
    }
}

/// Radially averaged power `E(k)` over integer-radius annuli.
pub fn radial_spectrum(field: &[f64], n: usize) -> Result<Vec<f64>> {
    if field.len() != n * n || n == 0 {
        return shape_err(format!("spectrum needs a square {n}x{n} frame"));
    }
    let spec = Fft2::new(n, n).forward_real(field);
    let kmax = ((2.0f64).sqrt() * (n / 2) as f64).round() as usize + 1;
    let (mut sum, mut cnt) = (vec![0.0; kmax + 1], vec![0usize; kmax + 1]);
    for (i, z) in spec.iter().enumerate() {
        let (ky, kx) = (wavenumber(i / n, n) as f64, wavenumber(i % n, n) as f64);
        let b = (kx * kx + ky * ky).sqrt().round() as usize;
        sum[b] += z.norm_sqr();
        cnt[b] += 1;
    }
    Ok(sum.iter().zip(&cnt).map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN }).collect())
}

/// Mean over band bins of `|E_pred − E_gt| / max(E_gt, floor)`.
pub fn spectrum_error(pred: &[f64], truth: &[f64], n: usize, bands: &SpectrumBands) -> Result<BTreeMap<String, f64>> {
    let (ep, eg) = (radial_spectrum(pred, n)?, radial_spectrum(truth, n)?);
    let mut out = BTreeMap::new();
    for (name, lo, hi) in &bands.bands {
        let errs: Vec<f64> = (0..eg.len())
            .filter(|&k| (k as f64) >= *lo && (k as f64) < *hi && !eg[k].is_nan())
            .map(|k| (ep[k] - eg[k]).abs() / eg[k].max(bands.floor))
            .collect();
        let v = if errs.is_empty() { f64::NAN } else { errs.iter().sum::<f64>() / errs.len() as f64 };
        out.insert(name.clone(), v);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CsiScores {
    pub per_threshold: Vec<(f64, f64)>,
    pub mean: f64,
}

/// Critical success index per threshold (exceedance is `value ≥ τ`).
pub fn csi(pred: &[f64], truth: &[f64], thresholds: &[f64]) -> Result<CsiScores> {
    if pred.len() != truth.len() || thresholds.is_empty() {
        return shape_err("csi needs equal-length fields and at least one threshold");
    }
    let per: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&tau| {
            let (mut hit, mut miss, mut fa) = (0usize, 0usize, 0usize);
            for (p, t) in pred.iter().zip(truth) {
                match (*p >= tau, *t >= tau) {
                    (true, true) => hit += 1,
                    (false, true) => miss += 1,
                    (true, false) => fa += 1,
                    _ => {}
                }
            }
            let den = hit + miss + fa;
            (tau, if den == 0 { 1.0 } else { hit as f64 / den as f64 })
        })
        .collect();
    let mean = per.iter().map(|(_, v)| v).sum::<f64>() / per.len() as f64;
    Ok(CsiScores { per_threshold: per, mean })
}

/// Sample CRPS of an ensemble at one point.
pub fn crps_point(members: &[f64], y: f64) -> f64 {
    let m = members.len() as f64;
    let mut s = members.to_vec();
    s.sort_by(f64::total_cmp);
    let abs: f64 = s.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
    // Σ_i Σ_j |x_i − x_j| = 2 Σ_i (2i − M + 1) x_(i)
    let pair: f64 = s.iter().enumerate().map(|(i, x)| (2.0 * i as f64 - m + 1.0) * x).sum::<f64>() * 2.0;
    abs - pair / (2.0 * m * m)
}

/// Pointwise CRPS averaged with optional per-point weights.
pub fn crps(members: &[Vec<f64>], truth: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    if members.is_empty() || members.iter().any(|m| m.len() != truth.len()) {
        return shape_err("crps needs at least one member shaped like the truth");
    }
    if weights.is_some_and(|w| w.len() != truth.len()) {
        return shape_err("crps weights do not match the field");
    }
    let mut col = vec![0.0; members.len()];
    let mut total = 0.0;
    for (i, &y) in truth.iter().enumerate() {
        for (c, m) in col.iter_mut().zip(members) {
            *c = m[i];
        }
        total += weights.map_or(1.0, |w| w[i]) * crps_point(&col, y);
    }
    Ok(total / truth.len() as f64)
}

/// Per-point latitude weights for frames of `C x H x W`.
pub fn point_weights(lw: &LatWeights, channels: usize, height: usize, width: usize) -> Result<Vec<f64>> {
    lw.check(height)?;
    Ok((0..channels * height * width).map(|i| lw.weights[(i / width) % height]).collect())
}

/// Climatology expanded to the trajectory layout. Accepts a full trajectory
/// of values or one value per `(frame, channel, row)`.
fn expand_clim(truth: &Trajectory, clim: &[f64]) -> Result<Vec<f64>> {
    let (c, h, w) = (truth.channels(), truth.height(), truth.width());
    if clim.len() == truth.data().len() {
        return Ok(clim.to_vec());
    }
    if clim.len() == truth.frames() * c * h {
        return Ok((0..truth.data().len()).map(|i| clim[i / w]).collect());
    }
    shape_err(format!("climatology of {} values does not broadcast", clim.len()))
}

/// Latitude-weighted anomaly correlation over all frames and points.
pub fn acc(pred: &Trajectory, truth: &Trajectory, clim: &[f64], weights: &LatWeights) -> Result<Option<f64>> {
    same_shape(pred, truth)?;
    weights.check(truth.height())?;
    let cl = expand_clim(truth, clim)?;
    let (h, w) = (truth.height(), truth.width());
    let (mut ar, mut aa, mut rr) = (0.0, 0.0, 0.0);
    for (i, ((p, t), c)) in pred.data().iter().zip(truth.data()).zip(&cl).enumerate() {
        let wt = weights.weights[(i / w) % h];
        let (a, r) = (p - c, t - c);
        ar += wt * a * r;
        aa += wt * a * a;
        rr += wt * r * r;
    }
    if aa == 0.0 || rr == 0.0 {
        return Ok(None);
    }
    Ok(Some(ar / (aa.sqrt() * rr.sqrt())))
}

/// Latitude-weighted mean signed error.
pub fn bias(pred: &Trajectory, truth: &Trajectory, weights: &LatWeights) -> Result<f64> {
    same_shape(pred, truth)?;
    weights.check(truth.height())?;
    let (h, w) = (truth.height(), truth.width());
    let s: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .enumerate()
        .map(|(i, (p, t))| weights.weights[(i / w) % h] * (p - t))
        .sum();
    Ok(s / truth.data().len() as f64)
}

/// One row of a tidy metric table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub trajectory_id: usize,
    pub frame: Option<usize>,
    pub metric: String,
    pub band_or_threshold: Option<String>,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: Vec<MetricRecord>,
}

impl MetricReport {
    pub fn push(&mut self, trajectory_id: usize, frame: Option<usize>, metric: &str, band: Option<String>, value: f64) {
        self.records.push(MetricRecord { trajectory_id, frame, metric: metric.into(), band_or_threshold: band, value });
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("trajectory_id,frame,metric,band_or_threshold,value\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                r.trajectory_id,
                r.frame.map_or(String::new(), |f| f.to_string()),
                r.metric,
                r.band_or_threshold.as_deref().unwrap_or(""),
                r.value
            );
        }
        s
    }

    /// Mean of finite values per `metric[/band]`.
    pub fn summary(&self) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for r in self.records.iter().filter(|r| r.value.is_finite()) {
            let key = match &r.band_or_threshold {
                Some(b) => format!("{}/{}", r.metric, b),
                None => r.metric.clone(),
            };
            let e = acc.entry(key).or_default();
            e.0 += r.value;
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<Vec<String>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let (csv, json) = (format!("{stem}.csv"), format!("{stem}_summary.json"));
        fs::write(dir.join(&csv), self.to_csv())?;
        fs::write(dir.join(&json), serde_json::to_string_pretty(&self.summary())?)?;
        Ok(vec![csv, json])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn traj(k: usize, h: usize, w: usize, seed: u64) -> Trajectory {
        Trajectory::new(k, 1, h, w, RngStream::new(seed, 0).normal_vec(k * h * w)).unwrap()
    }

    #[test]
    fn nrmse_cases() {
        let t = traj(2, 4, 4, 0);
        assert_eq!(nrmse(&t, &t, None).unwrap().mean, 0.0);
        let ones = Trajectory::new(1, 1, 2, 2, vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let shifted = Trajectory::new(1, 1, 2, 2, ones.data().iter().map(|v| v + 0.3).collect()).unwrap();
        assert!((nrmse(&shifted, &ones, None).unwrap().mean - 0.3).abs() < 1e-12);
        let zero = Trajectory::new(1, 1, 2, 2, vec![0.0; 4]).unwrap();
        assert_eq!(nrmse(&ones, &zero, None).unwrap().per_frame, vec![None]);
    }

    #[test]
    fn equator_errors_weigh_more() {
        let lw = LatWeights::equiangular(4).unwrap();
        let truth = Trajectory::new(1, 1, 4, 1, vec![0.0; 4]).unwrap();
        let pole = Trajectory::new(1, 1, 4, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let eq = Trajectory::new(1, 1, 4, 1, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(nrmse(&eq, &truth, Some(&lw)).unwrap().mean > nrmse(&pole, &truth, Some(&lw)).unwrap().mean);
        let mean = lw.weights().iter().sum::<f64>() / 4.0;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(LatWeights::from_latitudes(&[90.0, 0.0]).is_err());
    }

    #[test]
    fn spectrum_cases() {
        let n = 32;
        let t = traj(1, n, n, 3);
        let b = SpectrumBands::default();
        let same = spectrum_error(t.data(), t.data(), n, &b).unwrap();
        // a 32x32 grid has no bins at |k| >= 32
        assert!(same["high"].is_nan());
        assert!(same.iter().filter(|(k, _)| *k != "high").all(|(_, v)| *v == 0.0));
        let twice: Vec<f64> = t.data().iter().map(|v| 2.0 * v).collect();
        for (name, v) in spectrum_error(&twice, t.data(), n, &b).unwrap() {
            if name != "high" {
                assert!((v - 3.0).abs() < 1e-9, "{name}: {v}");
            }
        }
    }

    #[test]
    fn csi_cases() {
        let t = [200.0, 200.0, 200.0, 0.0];
        let p = [200.0, 200.0, 0.0, 200.0];
        assert_eq!(csi(&p, &t, &[100.0]).unwrap().mean, 0.5);
        assert_eq!(csi(&t, &t, &[100.0]).unwrap().mean, 1.0);
        assert_eq!(csi(&[0.0, 200.0], &[200.0, 0.0], &[100.0]).unwrap().mean, 0.0);
        assert_eq!(csi(&[0.0], &[0.0], &CSI_THRESHOLDS).unwrap().mean, 1.0);
    }

    #[test]
    fn crps_cases() {
        assert_eq!(crps_point(&[0.0, 1.0], 0.0), 0.25);
        assert_eq!(crps_point(&[2.5], 1.0), 1.5);
        assert_eq!(crps_point(&[1.0, 1.0, 1.0], 1.0), 0.0);
        // brute-force pairwise form
        let xs = [0.3, -1.2, 2.0, 0.7, 0.7];
        let m = xs.len() as f64;
        let brute = xs.iter().map(|x| (x - 0.1f64).abs()).sum::<f64>() / m
            - xs.iter().flat_map(|a| xs.iter().map(move |b| (a - b).abs())).sum::<f64>() / (2.0 * m * m);
        assert!((crps_point(&xs, 0.1) - brute).abs() < 1e-12);
    }

    #[test]
    fn acc_and_bias() {
        let lw = LatWeights::equiangular(4).unwrap();
        let t = traj(2, 4, 3, 5);
        let clim = vec![0.0; 2 * 4];
        assert!((acc(&t, &t, &clim, &lw).unwrap().unwrap() - 1.0).abs() < 1e-12);
        let neg = Trajectory::new(2, 1, 4, 3, t.data().iter().map(|v| -v).collect()).unwrap();
        assert!((acc(&neg, &t, &clim, &lw).unwrap().unwrap() + 1.0).abs() < 1e-12);
        let up = Trajectory::new(2, 1, 4, 3, t.data().iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((bias(&up, &t, &lw).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(bias(&t, &t, &lw).unwrap(), 0.0);
    }

    #[test]
    fn report_csv() {
        let mut r = MetricReport::default();
        r.push(0, Some(1), "nrmse", None, 0.5);
        r.push(0, None, "spectrum", Some("low".into()), 0.25);
        assert_eq!(r.to_csv(), "trajectory_id,frame,metric,band_or_threshold,value\n0,1,nrmse,,0.5\n0,,spectrum,low,0.25\n");
        assert_eq!(r.summary()["spectrum/low"], 0.25);
    }
}
