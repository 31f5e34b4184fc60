//! Observation operators, noisy observation sets, and normalization scales.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::fdt::{read_tensor, write_tensor};
use crate::linalg::{mat_from_rows, mat_to_rows, Mat, Vector};
use crate::rng::RngStream;
use crate::tensor::{Tensor, Trajectory};

/// A linear map from one frame (`C x H x W`, row-major) to `M` observed values.
#[derive(Debug, Clone, PartialEq)]
pub enum ObsOperator {
    /// Shared pixel mask; observed pixels are read per channel in row-major order.
    SparseMask {
        ratio: f64,
        channels: usize,
        height: usize,
        width: usize,
        /// Flat pixel indices (`row * width + col`), ascending.
        pixels: Vec<usize>,
    },
    /// Block mean over `factor x factor` tiles (bilinear at integer factors).
    Downsample { factor: usize, channels: usize, height: usize, width: usize },
    /// Dense matrix acting on the flattened frame.
    Linear { h: Mat },
}

/// Number of observed pixels for a mask ratio: `round(ratio * H * W)`.
pub fn mask_count(ratio: f64, height: usize, width: usize) -> usize {
    (ratio * (height * width) as f64).round() as usize
}

impl ObsOperator {
    /// Draw a random shared mask with exactly `round(ratio * H * W)` pixels.
    pub fn sparse_mask(
        ratio: f64,
        channels: usize,
        height: usize,
        width: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::Validation(format!("mask ratio {ratio} outside (0, 1]")));
        }
        let n = height * width;
        let count = mask_count(ratio, height, width).max(1);
        // partial Fisher–Yates
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..count {
            let j = rng.int_inclusive(i, n - 1);
            idx.swap(i, j);
        }
        let mut pixels = idx[..count].to_vec();
        pixels.sort_unstable();
        Ok(Self::SparseMask { ratio, channels, height, width, pixels })
    }

    pub fn from_pixels(ratio: f64, channels: usize, height: usize, width: usize, pixels: Vec<usize>) -> Result<Self> {
        let n = height * width;
        let mut p = pixels;
        p.sort_unstable();
        p.dedup();
        if p.iter().any(|&i| i >= n) {
            return Err(Error::Validation("mask pixel outside grid".into()));
        }
        Ok(Self::SparseMask { ratio, channels, height, width, pixels: p })
    }

    pub fn downsample(factor: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if factor == 0 || height % factor != 0 || width % factor != 0 {
            return Err(Error::Validation(format!(
                "downsample factor {factor} must divide {height}x{width}"
            )));
        }
        Ok(Self::Downsample { factor, channels, height, width })
    }

    pub fn linear(h: Mat) -> Self {
        Self::Linear { h }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::SparseMask { .. } => "sparse_mask",
            Self::Downsample { .. } => "downsample",
            Self::Linear { .. } => "linear_matrix",
        }
    }

    pub fn input_len(&self) -> usize {
        match self {
            Self::SparseMask { channels, height, width, .. }
            | Self::Downsample { channels, height, width, .. } => channels * height * width,
            Self::Linear { h } => h.ncols(),
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            Self::SparseMask { channels, pixels, .. } => channels * pixels.len(),
            Self::Downsample { factor, channels, height, width } => {
                channels * (height / factor) * (width / factor)
            }
            Self::Linear { h } => h.nrows(),
        }
    }

    pub fn apply(&self, frame: &[f64]) -> Result<Vec<f64>> {
        if frame.len() != self.input_len() {
            return shape_err(format!(
                "operator expects frames of {} values, got {}",
                self.input_len(),
                frame.len()
            ));
        }
        Ok(match self {
            Self::SparseMask { channels, height, width, pixels, .. } => {
                let hw = height * width;
                (0..*channels)
                    .flat_map(|c| pixels.iter().map(move |&p| frame[c * hw + p]))
                    .collect()
            }
            Self::Downsample { factor, channels, height, width } => {
                let (oh, ow, f) = (height / factor, width / factor, *factor);
                let norm = 1.0 / (f * f) as f64;
                let mut out = vec![0.0; channels * oh * ow];
                for c in 0..*channels {
                    for r in 0..*height {
                        for col in 0..*width {
                            out[c * oh * ow + (r / f) * ow + col / f] +=
                                frame[c * height * width + r * width + col] * norm;
                        }
                    }
                }
                out
            }
            Self::Linear { h } => (h * Vector::from_column_slice(frame)).as_slice().to_vec(),
        })
    }

    /// Transpose of [`apply`](Self::apply).
    pub fn adjoint(&self, obs: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != self.output_len() {
            return shape_err(format!(
                "adjoint expects {} values, got {}",
                self.output_len(),
                obs.len()
            ));
        }
        Ok(match self {
            Self::SparseMask { channels, height, width, pixels, .. } => {
                let hw = height * width;
                let mut out = vec![0.0; channels * hw];
                for c in 0..*channels {
                    for (j, &p) in pixels.iter().enumerate() {
                        out[c * hw + p] = obs[c * pixels.len() + j];
                    }
                }
                out
            }
            Self::Downsample { factor, channels, height, width } => {
                let (oh, ow, f) = (height / factor, width / factor, *factor);
                let norm = 1.0 / (f * f) as f64;
                let mut out = vec![0.0; channels * height * width];
                for c in 0..*channels {
                    for r in 0..*height {
                        for col in 0..*width {
                            out[c * height * width + r * width + col] =
                                obs[c * oh * ow + (r / f) * ow + col / f] * norm;
                        }
                    }
                }
                out
            }
            Self::Linear { h } => (h.transpose() * Vector::from_column_slice(obs)).as_slice().to_vec(),
        })
    }

    /// Dense matrix form (`M x input_len`).
    pub fn to_matrix(&self) -> Mat {
        if let Self::Linear { h } = self {
            return h.clone();
        }
        let n = self.input_len();
        let mut m = Mat::zeros(self.output_len(), n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.apply(&e).expect("length checked");
            for (i, v) in col.into_iter().enumerate() {
                m[(i, j)] = v;
            }
            e[j] = 0.0;
        }
        m
    }

    /// Grid `(row, col)` of every observed value, when the operator is a mask.
    pub fn locations(&self) -> Option<Vec<(usize, usize)>> {
        match self {
            Self::SparseMask { channels, width, pixels, .. } => Some(
                (0..*channels)
                    .flat_map(|_| pixels.iter().map(|&p| (p / width, p % width)))
                    .collect(),
            ),
            _ => None,
        }
    }
}

/// Per-frame observations under one operator.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub operator: ObsOperator,
    pub sigma_y: f64,
    /// One entry per trajectory frame; `None` where the frame is unobserved.
    pub values: Vec<Option<Vec<f64>>>,
}

impl ObservationSet {
    pub fn new(operator: ObsOperator, sigma_y: f64, values: Vec<Option<Vec<f64>>>) -> Result<Self> {
        if !(sigma_y > 0.0) {
            return Err(Error::Validation(format!("sigma_y {sigma_y} must be positive")));
        }
        let m = operator.output_len();
        if let Some(k) = values.iter().position(|v| v.as_ref().is_some_and(|v| v.len() != m)) {
            return shape_err(format!("observation at frame {k} does not have {m} values"));
        }
        Ok(Self { operator, sigma_y, values })
    }

    pub fn frames(&self) -> usize {
        self.values.len()
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        (0..self.values.len()).filter(|&k| self.values[k].is_some()).collect()
    }

    pub fn get(&self, k: usize) -> Option<&[f64]> {
        self.values.get(k).and_then(|v| v.as_deref())
    }

    /// Observations for frames `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> ObservationSet {
        let values = (start..start + len)
            .map(|k| self.values.get(k).cloned().flatten())
            .collect();
        ObservationSet { operator: self.operator.clone(), sigma_y: self.sigma_y, values }
    }
}

/// `y_k = A(x_k) + σ_y ε` for every frame, independent noise per component.
pub fn observe_trajectory(
    traj: &Trajectory,
    op: &ObsOperator,
    sigma_y: f64,
    rng: &mut RngStream,
) -> Result<ObservationSet> {
    let all: Vec<usize> = (0..traj.frames()).collect();
    observe_frames(traj, op, sigma_y, &all, rng)
}

pub fn observe_frames(
    traj: &Trajectory,
    op: &ObsOperator,
    sigma_y: f64,
    frames: &[usize],
    rng: &mut RngStream,
) -> Result<ObservationSet> {
    if !(sigma_y > 0.0) {
        return Err(Error::Validation(format!("sigma_y {sigma_y} must be positive")));
    }
    let mut values = vec![None; traj.frames()];
    for &k in frames {
        if k >= traj.frames() {
            return shape_err(format!("frame {k} outside trajectory of {}", traj.frames()));
        }
        let mut y = op.apply(traj.frame(k))?;
        for v in y.iter_mut() {
            *v += sigma_y * rng.normal();
        }
        values[k] = Some(y);
    }
    ObservationSet::new(op.clone(), sigma_y, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OperatorSpec {
    SparseMask { ratio: f64, channels: usize, height: usize, width: usize, mask_seed: u64, pixels: Vec<usize> },
    Downsample { factor: usize, channels: usize, height: usize, width: usize },
    LinearMatrix { h: Vec<Vec<f64>> },
}

impl OperatorSpec {
    pub fn from_operator(op: &ObsOperator, mask_seed: u64) -> Self {
        match op {
            ObsOperator::SparseMask { ratio, channels, height, width, pixels } => Self::SparseMask {
                ratio: *ratio,
                channels: *channels,
                height: *height,
                width: *width,
                mask_seed,
                pixels: pixels.clone(),
            },
            ObsOperator::Downsample { factor, channels, height, width } => Self::Downsample {
                factor: *factor,
                channels: *channels,
                height: *height,
                width: *width,
            },
            ObsOperator::Linear { h } => Self::LinearMatrix { h: mat_to_rows(h) },
        }
    }

    pub fn to_operator(&self) -> Result<ObsOperator> {
        match self {
            Self::SparseMask { ratio, channels, height, width, pixels, .. } => {
                ObsOperator::from_pixels(*ratio, *channels, *height, *width, pixels.clone())
            }
            Self::Downsample { factor, channels, height, width } => {
                ObsOperator::downsample(*factor, *channels, *height, *width)
            }
            Self::LinearMatrix { h } => Ok(ObsOperator::linear(mat_from_rows(h)?)),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSidecar {
    pub operator: OperatorSpec,
    pub sigma_y: f64,
    pub frames: usize,
    pub observed_frames: Vec<usize>,
    pub values_file: String,
}

/// Persist as `<stem>.fdt` (`[n_observed, M]`) plus `<stem>.json`.
pub fn write_observations(dir: impl AsRef<Path>, stem: &str, obs: &ObservationSet, mask_seed: u64) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let idx = obs.frame_indices();
    let m = obs.operator.output_len();
    let data: Vec<f64> = idx.iter().flat_map(|&k| obs.values[k].clone().unwrap()).collect();
    let fdt = format!("{stem}.fdt");
    write_tensor(dir.join(&fdt), &Tensor::new(vec![idx.len(), m], data)?)?;
    let side = ObservationSidecar {
        operator: OperatorSpec::from_operator(&obs.operator, mask_seed),
        sigma_y: obs.sigma_y,
        frames: obs.frames(),
        observed_frames: idx,
        values_file: fdt.clone(),
    };
    let json = format!("{stem}.json");
    fs::write(dir.join(&json), serde_json::to_string_pretty(&side)?)?;
    Ok(vec![fdt, json])
}

pub fn read_observations(dir: impl AsRef<Path>, stem: &str) -> Result<ObservationSet> {
    let dir = dir.as_ref();
    let side: ObservationSidecar = serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    let op = side.operator.to_operator()?;
    let t = read_tensor(dir.join(&side.values_file))?;
    let m = op.output_len();
    if t.dims() != [side.observed_frames.len(), m] {
        return shape_err(format!("observation tensor dims {:?} do not match sidecar", t.dims()));
    }
    let mut values = vec![None; side.frames];
    for (row, &k) in side.observed_frames.iter().enumerate() {
        if k >= side.frames {
            return shape_err(format!("observed frame {k} outside {}", side.frames));
        }
        values[k] = Some(t.data()[row * m..(row + 1) * m].to_vec());
    }
    ObservationSet::new(op, side.sigma_y, values)
}

/// Invertible affine data normalization `x_data = (x_raw - a) / b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Normalization {
    Identity,
    MinMax { min: f64, max: f64 },
    ZScore { mean: Vec<f64>, std: Vec<f64> },
}

impl Normalization {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::Identity => true,
            Self::MinMax { min, max } => max > min,
            Self::ZScore { mean, std } => mean.len() == std.len() && std.iter().all(|s| *s > 0.0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("normalization scale must be positive: {self:?}")))
        }
    }

    /// Offset `a` and scale `b` for `channel`.
    pub fn affine(&self, channel: usize) -> (f64, f64) {
        match self {
            Self::Identity => (0.0, 1.0),
            Self::MinMax { min, max } => (*min, max - min),
            Self::ZScore { mean, std } => (mean[channel % mean.len()], std[channel % std.len()]),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Self::ZScore { std, .. } => std.len(),
            _ => 1,
        }
    }

    pub fn normalize(&self, traj: &Trajectory) -> Result<Trajectory> {
        self.map(traj, |v, a, b| (v - a) / b)
    }

    pub fn denormalize(&self, traj: &Trajectory) -> Result<Trajectory> {
        self.map(traj, |v, a, b| v * b + a)
    }

    fn map(&self, traj: &Trajectory, f: impl Fn(f64, f64, f64) -> f64) -> Result<Trajectory> {
        self.validate()?;
        let hw = traj.height() * traj.width();
        let c = traj.channels();
        let data = traj
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let (a, b) = self.affine((i / hw) % c);
                f(v, a, b)
            })
            .collect();
        Trajectory::new(traj.frames(), c, traj.height(), traj.width(), data)
    }
}

/// Raw-space noise std per channel: `σ_raw,c = b_c · σ_data`.
pub fn convert_noise(norm: &Normalization, sigma_data: f64) -> Result<Vec<f64>> {
    if !(sigma_data > 0.0) {
        return Err(Error::Validation(format!("sigma {sigma_data} must be positive")));
    }
    norm.validate()?;
    Ok((0..norm.channels()).map(|c| norm.affine(c).1 * sigma_data).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(c: usize, h: usize, w: usize, seed: u64) -> Vec<f64> {
        RngStream::new(seed, 0).normal_vec(c * h * w)
    }

    #[test]
    fn full_mask_is_identity() {
        let mut rng = RngStream::new(0, 0);
        let op = ObsOperator::sparse_mask(1.0, 2, 3, 4, &mut rng).unwrap();
        let f = frame(2, 3, 4, 1);
        assert_eq!(op.apply(&f).unwrap(), f);
    }

    #[test]
    fn factor_one_downsample_is_identity() {
        let op = ObsOperator::downsample(1, 1, 4, 4).unwrap();
        let f = frame(1, 4, 4, 2);
        assert_eq!(op.apply(&f).unwrap(), f);
    }

    #[test]
    fn factor_two_is_block_mean() {
        let op = ObsOperator::downsample(2, 1, 4, 4).unwrap();
        let f: Vec<f64> = (0..16).map(f64::from).collect();
        // blocks: {0,1,4,5}, {2,3,6,7}, {8,9,12,13}, {10,11,14,15}
        assert_eq!(op.apply(&f).unwrap(), vec![2.5, 4.5, 10.5, 12.5]);
        assert!(ObsOperator::downsample(3, 1, 4, 4).is_err());
    }

    #[test]
    fn mask_counts_match_rounding() {
        let mut rng = RngStream::new(3, 0);
        let op = ObsOperator::sparse_mask(0.05, 1, 128, 128, &mut rng).unwrap();
        assert_eq!(op.output_len(), 819);
        let op = ObsOperator::sparse_mask(0.05, 1, 64, 64, &mut rng).unwrap();
        assert_eq!(op.output_len(), 205);
    }

    #[test]
    fn adjoints_match_dense_transpose() {
        let mut rng = RngStream::new(4, 0);
        let ops = vec![
            ObsOperator::sparse_mask(0.3, 2, 4, 6, &mut rng).unwrap(),
            ObsOperator::downsample(2, 2, 4, 6).unwrap(),
            ObsOperator::linear(Mat::from_fn(3, 5, |i, j| (i * 5 + j) as f64 * 0.1)),
        ];
        for op in ops {
            let y = frame(1, 1, op.output_len(), 7);
            let dense = op.to_matrix().transpose() * Vector::from_column_slice(&y);
            let adj = op.adjoint(&y).unwrap();
            for (a, b) in adj.iter().zip(dense.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let op = ObsOperator::downsample(2, 1, 4, 4).unwrap();
        assert!(matches!(op.apply(&[0.0; 3]), Err(Error::Shape(_))));
    }

    #[test]
    fn noise_conversion_reference_values() {
        let ns = Normalization::MinMax { min: -19.16, max: 17.42 };
        assert!((convert_noise(&ns, 0.05).unwrap()[0] - 1.829).abs() < 1e-12);
        let sevir = Normalization::MinMax { min: 0.0, max: 255.0 };
        assert!((convert_noise(&sevir, 0.05).unwrap()[0] - 12.75).abs() < 1e-12);
        let era5 = Normalization::ZScore { mean: vec![54000.0], std: vec![3137.37] };
        let z = convert_noise(&era5, 0.05).unwrap()[0];
        assert!((z - 156.8685).abs() < 1e-9 && (z * 100.0).round() / 100.0 == 156.87);
        assert_eq!(convert_noise(&Normalization::Identity, 0.3).unwrap(), vec![0.3]);
    }

    #[test]
    fn conversion_is_exact_with_shared_draws() {
        let norm = Normalization::MinMax { min: -19.16, max: 17.42 };
        let raw = Trajectory::new(3, 1, 8, 8, frame(3, 8, 8, 11).iter().map(|v| v * 5.0).collect()).unwrap();
        let data = norm.normalize(&raw).unwrap();
        let mut mrng = RngStream::new(2, 0);
        let op = ObsOperator::sparse_mask(0.25, 1, 8, 8, &mut mrng).unwrap();
        let y_data = observe_trajectory(&data, &op, 0.05, &mut RngStream::new(9, 1)).unwrap();
        let sig_raw = convert_noise(&norm, 0.05).unwrap()[0];
        let y_raw = observe_trajectory(&raw, &op, sig_raw, &mut RngStream::new(9, 1)).unwrap();
        let (a, b) = norm.affine(0);
        for k in 0..3 {
            for (d, r) in y_data.get(k).unwrap().iter().zip(y_raw.get(k).unwrap()) {
                assert!((d * b + a - r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn observation_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngStream::new(1, 0);
        let op = ObsOperator::sparse_mask(0.2, 1, 6, 6, &mut rng).unwrap();
        let t = Trajectory::new(4, 1, 6, 6, frame(4, 6, 6, 3)).unwrap();
        let obs = observe_frames(&t, &op, 0.1, &[0, 2, 3], &mut rng).unwrap();
        write_observations(dir.path(), "obs", &obs, 1).unwrap();
        let back = read_observations(dir.path(), "obs").unwrap();
        assert_eq!(back, obs);
        assert_eq!(back.frame_indices(), vec![0, 2, 3]);
    }
}
