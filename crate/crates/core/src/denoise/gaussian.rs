use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use super::{AffineMap, Denoiser, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{check_psd, Mat, Vector};

/// Joint Gaussian law of a stacked trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTrajectoryPrior {
    frames: usize,
    dim: usize,
    mean: Vector,
    cov: Mat,
}

impl GaussianTrajectoryPrior {
    pub fn new(frames: usize, dim: usize, mean: Vector, cov: Mat) -> Result<Self> {
        let n = frames * dim;
        if n == 0 || mean.len() != n || cov.shape() != (n, n) {
            return shape_err(format!("prior of {frames} x {dim} needs mean {n} and cov {n} x {n}"));
        }
        let cov = (&cov + cov.transpose()) * 0.5;
        check_psd(&cov, "prior covariance", false)?;
        Ok(Self { frames, dim, mean, cov })
    }

    /// Independent standard normal frames.
    pub fn standard(frames: usize, dim: usize) -> Result<Self> {
        let n = frames * dim;
        Self::new(frames, dim, Vector::zeros(n), Mat::identity(n, n))
    }

    /// Sample mean and covariance of stacked windows.
    pub fn empirical(frames: usize, dim: usize, samples: &[Vec<f64>], shrink: f64) -> Result<Self> {
        let n = frames * dim;
        if samples.len() < 2 || samples.iter().any(|s| s.len() != n) {
            return shape_err(format!("need at least two samples of length {n}"));
        }
        let m = samples.len() as f64;
        let mut mean = Vector::zeros(n);
        for s in samples {
            mean += Vector::from_column_slice(s);
        }
        mean /= m;
        let mut cov = Mat::zeros(n, n);
        for s in samples {
            let d = Vector::from_column_slice(s) - &mean;
            cov.ger(1.0, &d, &d, 1.0);
        }
        cov /= m - 1.0;
        if shrink > 0.0 {
            let avg = cov.trace() / n as f64;
            cov = cov * (1.0 - shrink) + Mat::identity(n, n) * (shrink * avg);
        }
        Self::new(frames, dim, mean, cov)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn cov(&self) -> &Mat {
        &self.cov
    }
}

/// Exact conditional-mean denoiser under a Gaussian trajectory prior.
pub struct GaussianDenoiser {
    prior: GaussianTrajectoryPrior,
    schedule: NoiseSchedule,
    causal: bool,
    cache: Mutex<HashMap<Vec<usize>, Arc<AffineMap>>>,
    cache_cap: usize,
}

impl std::fmt::Debug for GaussianDenoiser {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GaussianDenoiser")
            .field("frames", &self.prior.frames)
            .field("dim", &self.prior.dim)
            .field("causal", &self.causal)
            .finish()
    }
}

impl GaussianDenoiser {
    pub fn new(prior: GaussianTrajectoryPrior, schedule: NoiseSchedule, causal: bool) -> Self {
        let n = prior.frames * prior.dim;
        let cache_cap = ((1usize << 26) / (n * n).max(1)).max(16);
        Self { prior, schedule, causal, cache: Mutex::new(HashMap::new()), cache_cap }
    }

    pub fn prior(&self) -> &GaussianTrajectoryPrior {
        &self.prior
    }

    /// The affine map `x^(t) ↦ ε̂` for pattern `t`.
    pub fn affine_map(&self, t: &[usize]) -> Result<Arc<AffineMap>> {
        if let Some(m) = self.cache.lock().unwrap().get(t) {
            return Ok(m.clone());
        }
        let m = Arc::new(self.build_map(t)?);
        let mut cache = self.cache.lock().unwrap();
        if cache.len() >= self.cache_cap {
            cache.clear();
        }
        cache.insert(t.to_vec(), m.clone());
        Ok(m)
    }

    /// `E[ε | x^(t)] = S M⁻¹ (x^(t) - D μ)` with `M = D Σ Dᵀ + N`; causal rows
    /// condition on the leading block of `M` only.
    fn build_map(&self, t: &[usize]) -> Result<AffineMap> {
        let (k, d) = (self.prior.frames, self.prior.dim);
        let n = k * d;
        let mut sig = Vector::zeros(n);
        let mut noise = Vector::zeros(n);
        for f in 0..k {
            let a = self.schedule.alpha_bar(t[f]);
            for i in f * d..(f + 1) * d {
                sig[i] = a.sqrt();
                noise[i] = (1.0 - a).sqrt();
            }
        }
        let mut g = Mat::zeros(n, n);
        if noise.iter().all(|&s| s == 0.0) {
            return Ok(AffineMap { g, c: Vector::zeros(n) });
        }
        let mut m = Mat::from_fn(n, n, |i, j| sig[i] * self.prior.cov[(i, j)] * sig[j]);
        for i in 0..n {
            m[(i, i)] += noise[i] * noise[i];
        }
        let l = cholesky_jittered(m)?;
        let linv = l
            .solve_lower_triangular(&Mat::identity(n, n))
            .ok_or_else(|| Error::Singular("triangular inverse failed".into()))?;
        if self.causal {
            // block row f of (M_{≤f})⁻¹ is (L⁻¹)_{ff}ᵀ (L⁻¹)_{f,≤f}
            for f in 0..k {
                let r = f * d;
                let diag = linv.view((r, r), (d, d));
                let row = linv.view((r, 0), (d, r + d));
                let blk = diag.transpose() * row;
                g.view_mut((r, 0), (d, r + d)).copy_from(&blk);
            }
        } else {
            g = linv.tr_mul(&linv);
        }
        for i in 0..n {
            let s = noise[i];
            g.row_mut(i).scale_mut(s);
        }
        let dmu = self.prior.mean.component_mul(&sig);
        let c = -(&g * dmu);
        Ok(AffineMap { g, c })
    }
}

fn cholesky_jittered(m: Mat) -> Result<Mat> {
    let n = m.nrows();
    let scale = (0..n).map(|i| m[(i, i)]).fold(0.0, f64::max).max(1.0);
    let mut jitter = 0.0;
    for _ in 0..8 {
        let mut a = m.clone();
        for i in 0..n {
            a[(i, i)] += jitter;
        }
        if let Some(ch) = a.cholesky() {
            return Ok(ch.l());
        }
        jitter = if jitter == 0.0 { 1e-12 * scale } else { jitter * 100.0 };
    }
    Err(Error::Singular("noisy-trajectory covariance is not positive definite".into()))
}

impl Denoiser for GaussianDenoiser {
    fn frames(&self) -> usize {
        self.prior.frames
    }

    fn frame_dim(&self) -> usize {
        self.prior.dim
    }

    fn is_causal(&self) -> bool {
        self.causal
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict_eps(&self, x: &[f64], t: &[usize]) -> Result<Vec<f64>> {
        self.check_input(x, t)?;
        Ok(self.affine_map(t)?.apply(x))
    }

    fn vjp(&self, x: &[f64], t: &[usize], cotangent: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x, t)?;
        if cotangent.len() != x.len() {
            return shape_err("cotangent length differs from input");
        }
        Ok(self.affine_map(t)?.apply_transpose(cotangent))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::cosine(1000, 100).unwrap()
    }

    fn random_prior(k: usize, d: usize, seed: u64) -> GaussianTrajectoryPrior {
        let n = k * d;
        let mut rng = RngStream::new(seed, 0);
        let a = Mat::from_vec(n, n, rng.normal_vec(n * n));
        let cov = &a * a.transpose() / n as f64 + Mat::identity(n, n) * 0.1;
        GaussianTrajectoryPrior::new(k, d, Vector::from_vec(rng.normal_vec(n)), cov).unwrap()
    }

    #[test]
    fn standard_prior_closed_form() {
        let s = sched();
        let den = GaussianDenoiser::new(GaussianTrajectoryPrior::standard(2, 3).unwrap(), s.clone(), false);
        let x: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let t = [30, 70];
        let e = den.predict_eps(&x, &t).unwrap();
        for i in 0..6 {
            let a = s.alpha_bar(t[i / 3]);
            assert!((e[i] - (1.0 - a).sqrt() * x[i]).abs() < 1e-12);
        }
    }

    /// Conditioning on the dense joint law of `(ε, x^(t))`.
    fn oracle(prior: &GaussianTrajectoryPrior, s: &NoiseSchedule, t: &[usize], x: &[f64], upto: Option<usize>) -> Vec<f64> {
        let d = prior.dim();
        let n = prior.frames() * d;
        let keep = upto.map_or(n, |f| (f + 1) * d);
        let sa: Vec<f64> = (0..n).map(|i| s.alpha_bar(t[i / d]).sqrt()).collect();
        let sb: Vec<f64> = (0..n).map(|i| (1.0 - s.alpha_bar(t[i / d])).sqrt()).collect();
        let cxx = Mat::from_fn(keep, keep, |i, j| {
            sa[i] * prior.cov()[(i, j)] * sa[j] + if i == j { sb[i] * sb[i] } else { 0.0 }
        });
        let cex = Mat::from_fn(n, keep, |i, j| if i == j { sb[i] } else { 0.0 });
        let r = Vector::from_fn(keep, |i, _| x[i] - sa[i] * prior.mean()[i]);
        let sol = cxx.lu().solve(&r).unwrap();
        (cex * sol).as_slice().to_vec()
    }

    #[test]
    fn matches_dense_conditioning() {
        let s = sched();
        let prior = random_prior(3, 2, 4);
        let x = RngStream::new(9, 0).normal_vec(6);
        let t = [12, 0, 85];
        let full = GaussianDenoiser::new(prior.clone(), s.clone(), false);
        let e = full.predict_eps(&x, &t).unwrap();
        let o = oracle(&prior, &s, &t, &x, None);
        for i in 0..6 {
            assert!((e[i] - o[i]).abs() < 1e-8);
        }
        let causal = GaussianDenoiser::new(prior.clone(), s.clone(), true);
        let e = causal.predict_eps(&x, &t).unwrap();
        for f in 0..3 {
            let o = oracle(&prior, &s, &t, &x, Some(f));
            for i in f * 2..f * 2 + 2 {
                assert!((e[i] - o[i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn independent_frames_make_causal_irrelevant() {
        let s = sched();
        let p = random_prior(1, 3, 2);
        let mut cov = Mat::zeros(9, 9);
        for b in 0..3 {
            cov.view_mut((b * 3, b * 3), (3, 3)).copy_from(p.cov());
        }
        let prior = GaussianTrajectoryPrior::new(3, 3, Vector::from_element(9, 0.4), cov).unwrap();
        let a = GaussianDenoiser::new(prior.clone(), s.clone(), false);
        let b = GaussianDenoiser::new(prior, s, true);
        let x = RngStream::new(1, 1).normal_vec(9);
        let (ea, eb) = (a.predict_eps(&x, &[5, 50, 95]).unwrap(), b.predict_eps(&x, &[5, 50, 95]).unwrap());
        for i in 0..9 {
            assert!((ea[i] - eb[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn clean_pattern_predicts_zero() {
        let den = GaussianDenoiser::new(random_prior(2, 2, 1), sched(), true);
        assert_eq!(den.predict_eps(&[1.0, 2.0, 3.0, 4.0], &[0, 0]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn causal_structure_is_exact() {
        let den = GaussianDenoiser::new(random_prior(4, 2, 3), sched(), true);
        let m = den.affine_map(&[10, 20, 30, 40]).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                if j / 2 > i / 2 {
                    assert_eq!(m.g[(i, j)], 0.0);
                } else {
                    assert!(m.g[(i, j)] != 0.0);
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        let den = GaussianDenoiser::new(random_prior(2, 2, 1), sched(), false);
        assert!(matches!(den.predict_eps(&[0.0; 3], &[1, 1]), Err(Error::Shape(_))));
        assert!(den.predict_eps(&[0.0; 4], &[1, 101]).is_err());
        assert!(GaussianTrajectoryPrior::new(2, 2, Vector::zeros(4), Mat::identity(3, 3)).is_err());
    }
}
