//! Dense row-major tensors and `[K, C, H, W]` trajectories.

use crate::error::{shape_err, Error, Result};

/// Dense row-major `f64` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return shape_err(format!(
                "dims {:?} imply {} elements but data has {}",
                dims,
                n,
                data.len()
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self { dims, data: vec![0.0; n] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data)
    }
}

/// A state sequence of `K` frames, each `C x H x W`, stored frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    frames: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn new(
        frames: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if frames == 0 || channels == 0 || height == 0 || width == 0 {
            return shape_err(format!(
                "trajectory extents must be positive, got [{frames}, {channels}, {height}, {width}]"
            ));
        }
        if frames * channels * height * width != data.len() {
            return shape_err(format!(
                "trajectory [{frames}, {channels}, {height}, {width}] needs {} values, got {}",
                frames * channels * height * width,
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite trajectory entry at {i}")));
        }
        Ok(Self { frames, channels, height, width, data })
    }

    /// Trajectory of `K` flat state vectors of dimension `dim` (stored as `[K, dim, 1, 1]`).
    pub fn from_vectors(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(frames, dim, 1, 1, data)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match *t.dims() {
            [k, c, h, w] => Self::new(k, c, h, w, t.data().to_vec()),
            [k, d] => Self::new(k, d, 1, 1, t.data().to_vec()),
            _ => shape_err(format!("expected rank-4 or rank-2 tensor, got dims {:?}", t.dims())),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            dims: vec![self.frames, self.channels, self.height, self.width],
            data: self.data.clone(),
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of values in one frame (`C * H * W`).
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let n = self.frame_len();
        &self.data[k * n..(k + 1) * n]
    }

    pub fn same_shape(&self, other: &Trajectory) -> bool {
        self.frames == other.frames
            && self.channels == other.channels
            && self.height == other.height
            && self.width == other.width
    }

    /// Sub-trajectory of frames `start..start + len`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Trajectory> {
        if len == 0 || start + len > self.frames {
            return shape_err(format!(
                "frame range {start}..{} outside 0..{}",
                start + len,
                self.frames
            ));
        }
        let n = self.frame_len();
        Ok(Self {
            frames: len,
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data[start * n..(start + len) * n].to_vec(),
        })
    }
}

/// Pack `F` consecutive frames into one frame with `C * F` channels.
pub fn stack_frames(traj: &Trajectory, factor: usize) -> Result<Trajectory> {
    if factor == 0 || traj.frames % factor != 0 {
        return shape_err(format!(
            "frame count {} not divisible by stacking factor {factor}",
            traj.frames
        ));
    }
    // Frame-major layout makes stacking a pure relabelling: super-frame k' holds
    // frames k'F..k'F+F-1 back to back, which is exactly channel block f.
    Trajectory::new(
        traj.frames / factor,
        traj.channels * factor,
        traj.height,
        traj.width,
        traj.data.clone(),
    )
}

/// Inverse of [`stack_frames`].
pub fn unstack_frames(traj: &Trajectory, factor: usize) -> Result<Trajectory> {
    if factor == 0 || traj.channels % factor != 0 {
        return shape_err(format!(
            "channel count {} not divisible by stacking factor {factor}",
            traj.channels
        ));
    }
    Trajectory::new(
        traj.frames * factor,
        traj.channels / factor,
        traj.height,
        traj.width,
        traj.data.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(k: usize, c: usize, h: usize, w: usize) -> Trajectory {
        let n = k * c * h * w;
        Trajectory::new(k, c, h, w, (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn stack_pairs() {
        let t = ramp(4, 1, 2, 2);
        let s = stack_frames(&t, 2).unwrap();
        assert_eq!((s.frames(), s.channels()), (2, 2));
        // super-frame 1, channel block 1 is original frame 3
        assert_eq!(&s.frame(1)[4..8], t.frame(3));
        let mut a = s.data().to_vec();
        let mut b = t.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn stack_identity() {
        let t = ramp(3, 2, 2, 3);
        assert_eq!(stack_frames(&t, 1).unwrap(), t);
    }

    #[test]
    fn stack_rejects_indivisible() {
        let t = ramp(5, 1, 2, 2);
        assert!(matches!(stack_frames(&t, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn trajectory_rejects_nan() {
        assert!(Trajectory::new(1, 1, 1, 2, vec![0.0, f64::NAN]).is_err());
    }
}
