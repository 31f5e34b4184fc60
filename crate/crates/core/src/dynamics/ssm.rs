//! Linear-Gaussian state-space model used as the exactness oracle.

use serde::{Deserialize, Serialize};

use crate::denoise::GaussianTrajectoryPrior;
use crate::error::{Error, Result};
use crate::linalg::{check_psd, mat_from_rows, mat_to_rows, psd_sqrt, spectral_radius, Mat, Vector};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Largest stacked dimension `K * D` for which a dense trajectory prior is built.
pub const DENSE_PRIOR_LIMIT: usize = 4096;

/// `x_{k+1} = A x_k + ξ`, `y_k = H x_k + η`, `x_1 ~ N(μ0, P0)`.
#[derive(Debug, Clone)]
pub struct LinearSsm {
    pub a: Mat,
    pub q: Mat,
    pub h: Mat,
    pub r: Mat,
    pub mu0: Vector,
    pub p0: Mat,
    spectral_radius: f64,
    q_sqrt: Mat,
    r_sqrt: Mat,
    p0_sqrt: Mat,
}

/// Serializable form of [`LinearSsm`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsmSpec {
    pub a: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub mu0: Vec<f64>,
    pub p0: Vec<Vec<f64>>,
}

impl LinearSsm {
    pub fn new(a: Mat, q: Mat, h: Mat, r: Mat, mu0: Vector, p0: Mat) -> Result<Self> {
        let d = a.nrows();
        if !a.is_square() || d == 0 {
            return Err(Error::Validation("A must be square and non-empty".into()));
        }
        let m = h.nrows();
        if q.shape() != (d, d) || p0.shape() != (d, d) || mu0.len() != d {
            return Err(Error::Validation(format!("Q, P0, mu0 must match state dim {d}")));
        }
        if h.ncols() != d || r.shape() != (m, m) || m == 0 {
            return Err(Error::Validation(format!(
                "H must be M x {d} and R M x M (got H {:?}, R {:?})",
                h.shape(),
                r.shape()
            )));
        }
        check_psd(&q, "Q", false)?;
        check_psd(&p0, "P0", false)?;
        check_psd(&r, "R", true)?;
        let spectral_radius = spectral_radius(&a);
        Ok(Self {
            q_sqrt: psd_sqrt(&q),
            r_sqrt: psd_sqrt(&r),
            p0_sqrt: psd_sqrt(&p0),
            a,
            q,
            h,
            r,
            mu0,
            p0,
            spectral_radius,
        })
    }

    pub fn from_spec(s: &SsmSpec) -> Result<Self> {
        Self::new(
            mat_from_rows(&s.a)?,
            mat_from_rows(&s.q)?,
            mat_from_rows(&s.h)?,
            mat_from_rows(&s.r)?,
            Vector::from_vec(s.mu0.clone()),
            mat_from_rows(&s.p0)?,
        )
    }

    pub fn to_spec(&self) -> SsmSpec {
        SsmSpec {
            a: mat_to_rows(&self.a),
            q: mat_to_rows(&self.q),
            h: mat_to_rows(&self.h),
            r: mat_to_rows(&self.r),
            mu0: self.mu0.iter().copied().collect(),
            p0: mat_to_rows(&self.p0),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn spectral_radius(&self) -> f64 {
        self.spectral_radius
    }

    pub fn sample_initial(&self, rng: &mut RngStream) -> Vector {
        let z = Vector::from_vec(rng.normal_vec(self.state_dim()));
        &self.mu0 + &self.p0_sqrt * z
    }

    pub fn process_noise(&self, rng: &mut RngStream) -> Vector {
        let z = Vector::from_vec(rng.normal_vec(self.state_dim()));
        &self.q_sqrt * z
    }

    pub fn obs_noise(&self, rng: &mut RngStream) -> Vector {
        let z = Vector::from_vec(rng.normal_vec(self.obs_dim()));
        &self.r_sqrt * z
    }

    pub fn step(&self, x: &Vector, rng: &mut RngStream) -> Vector {
        &self.a * x + self.process_noise(rng)
    }

    pub fn observe(&self, x: &Vector, rng: &mut RngStream) -> Vector {
        &self.h * x + self.obs_noise(rng)
    }

    /// Draw states `[K, D]` and observations `[K, M]`.
    pub fn simulate(&self, frames: usize, rng: &mut RngStream) -> Result<(Tensor, Tensor)> {
        if frames == 0 {
            return Err(Error::Validation("frames must be >= 1".into()));
        }
        let (d, m) = (self.state_dim(), self.obs_dim());
        let mut xs = Vec::with_capacity(frames * d);
        let mut ys = Vec::with_capacity(frames * m);
        let mut x = self.sample_initial(rng);
        for k in 0..frames {
            if k > 0 {
                x = self.step(&x, rng);
            }
            let y = self.observe(&x, rng);
            xs.extend(x.iter());
            ys.extend(y.iter());
        }
        Ok((Tensor::new(vec![frames, d], xs)?, Tensor::new(vec![frames, m], ys)?))
    }

    /// Exact mean and covariance of the stacked trajectory `x_{1:K}`.
    pub fn trajectory_prior(&self, frames: usize) -> Result<GaussianTrajectoryPrior> {
        let d = self.state_dim();
        if frames == 0 {
            return Err(Error::Validation("frames must be >= 1".into()));
        }
        if frames * d > DENSE_PRIOR_LIMIT {
            return Err(Error::Capacity(format!(
                "dense prior of size {} exceeds limit {DENSE_PRIOR_LIMIT}",
                frames * d
            )));
        }
        let n = frames * d;
        let mut mean = Vector::zeros(n);
        let mut cov = Mat::zeros(n, n);
        let mut marg = Vec::with_capacity(frames);
        let mut m = self.mu0.clone();
        let mut p = self.p0.clone();
        for k in 0..frames {
            if k > 0 {
                m = &self.a * m;
                p = &self.a * p * self.a.transpose() + &self.q;
            }
            mean.rows_mut(k * d, d).copy_from(&m);
            marg.push(p.clone());
        }
        for j in 0..frames {
            // Cov(x_k, x_j) = A^{k-j} P_j for k >= j
            let mut block = marg[j].clone();
            for k in j..frames {
                if k > j {
                    block = &self.a * block;
                }
                cov.view_mut((k * d, j * d), (d, d)).copy_from(&block);
                cov.view_mut((j * d, k * d), (d, d)).copy_from(&block.transpose());
            }
        }
        GaussianTrajectoryPrior::new(frames, d, mean, cov)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rot(rho: f64, th: f64) -> Mat {
        Mat::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]) * rho
    }

    fn ssm(a: Mat, q: Mat, p0: Mat) -> LinearSsm {
        LinearSsm::new(a, q, Mat::identity(2, 2), Mat::identity(2, 2) * 0.1, Vector::from_vec(vec![1.0, -0.5]), p0).unwrap()
    }

    #[test]
    fn zero_noise_is_deterministic_power() {
        let s = ssm(rot(0.9, 0.4), Mat::zeros(2, 2), Mat::zeros(2, 2));
        let mut rng = RngStream::new(0, 0);
        let (x, _) = s.simulate(5, &mut rng).unwrap();
        let mut v = s.mu0.clone();
        for k in 0..5 {
            for i in 0..2 {
                assert!((x.data()[k * 2 + i] - v[i]).abs() < 1e-14);
            }
            v = &s.a * v;
        }
    }

    #[test]
    fn identity_dynamics_repeat_first_frame() {
        let s = LinearSsm::new(
            Mat::identity(2, 2),
            Mat::zeros(2, 2),
            Mat::identity(2, 2),
            Mat::identity(2, 2),
            Vector::zeros(2),
            Mat::identity(2, 2),
        )
        .unwrap();
        let mut rng = RngStream::new(1, 0);
        let (x, _) = s.simulate(4, &mut rng).unwrap();
        for k in 1..4 {
            assert_eq!(&x.data()[k * 2..k * 2 + 2], &x.data()[0..2]);
        }
    }

    #[test]
    fn rejects_bad_covariances() {
        let bad = Mat::from_row_slice(2, 2, &[1.0, 3.0, 3.0, 1.0]);
        assert!(LinearSsm::new(Mat::identity(2, 2), bad, Mat::identity(2, 2), Mat::identity(2, 2), Vector::zeros(2), Mat::identity(2, 2)).is_err());
        assert!(LinearSsm::new(Mat::identity(2, 2), Mat::zeros(2, 2), Mat::identity(2, 2), Mat::zeros(2, 2), Vector::zeros(2), Mat::identity(2, 2)).is_err());
    }

    #[test]
    fn prior_single_frame_and_block_diagonal() {
        let p0 = Mat::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let q = Mat::identity(2, 2) * 0.5;
        let s = ssm(rot(0.9, 0.4), q.clone(), p0.clone());
        let one = s.trajectory_prior(1).unwrap();
        assert_eq!(one.mean().as_slice(), s.mu0.as_slice());
        assert_eq!(one.cov(), &p0);

        let s0 = ssm(Mat::zeros(2, 2), q.clone(), p0.clone());
        let pr = s0.trajectory_prior(3).unwrap();
        let c = pr.cov();
        assert_eq!(c.view((0, 0), (2, 2)).clone_owned(), p0);
        assert_eq!(c.view((2, 2), (2, 2)).clone_owned(), q);
        assert_eq!(c.view((4, 4), (2, 2)).clone_owned(), q);
        assert_eq!(c.view((0, 2), (2, 4)).amax(), 0.0);
    }

    #[test]
    fn prior_guard() {
        let s = ssm(rot(0.9, 0.4), Mat::identity(2, 2), Mat::identity(2, 2));
        assert!(matches!(s.trajectory_prior(2049), Err(Error::Capacity(_))));
    }

    #[test]
    fn prior_is_psd() {
        let s = ssm(rot(0.95, 0.3), Mat::identity(2, 2) * 0.2, Mat::identity(2, 2));
        let pr = s.trajectory_prior(12).unwrap();
        assert!(crate::linalg::min_eigenvalue(pr.cov()) >= -1e-9);
    }
}
