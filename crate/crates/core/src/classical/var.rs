use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::lbfgs::{lbfgs, LbfgsConfig, LbfgsResult};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{Mat, Vector};
use crate::observe::ObsOperator;
use crate::spectral::{wavenumber, Fft2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvtConfig {
    /// Gaussian length scale per channel, in grid points.
    pub length_scales: Vec<f64>,
    pub sigma_b: f64,
    #[serde(default)]
    pub optimizer: LbfgsConfig,
    #[serde(default = "two")]
    pub passes: usize,
}

fn two() -> usize {
    2
}

impl CvtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length_scales.is_empty() || self.length_scales.iter().any(|l| !(*l > 0.0)) || !(self.sigma_b > 0.0) {
            return Err(Error::Validation("CVT needs positive length scales and sigma_b".into()));
        }
        if self.passes == 0 {
            return Err(Error::Validation("3D-Var needs at least one pass".into()));
        }
        Ok(())
    }
}

/// `v ↦ σ_b G ⋆ v` per channel with a unit-variance Gaussian kernel.
pub struct Cvt {
    channels: usize,
    fft: Fft2,
    multipliers: Vec<Vec<f64>>,
    sigma_b: f64,
}

impl Cvt {
    pub fn new(cfg: &CvtConfig, channels: usize, height: usize, width: usize) -> Result<Self> {
        cfg.validate()?;
        let fft = Fft2::new(height, width);
        let npix = (height * width) as f64;
        let multipliers = (0..channels)
            .map(|c| {
                let l = cfg.length_scales[c % cfg.length_scales.len()];
                let mut g: Vec<f64> = (0..height * width)
                    .map(|i| {
                        let ky = 2.0 * std::f64::consts::PI * wavenumber(i / width, height) as f64 / height as f64;
                        let kx = 2.0 * std::f64::consts::PI * wavenumber(i % width, width) as f64 / width as f64;
                        (-0.5 * l * l * (kx * kx + ky * ky)).exp()
                    })
                    .collect();
                // point variance of G ⋆ white noise is Σ|ĝ|² / N²
                let var = g.iter().map(|v| v * v).sum::<f64>() / (npix * npix);
                let s = 1.0 / (var * npix).sqrt();
                g.iter_mut().for_each(|v| *v *= s);
                g
            })
            .collect();
        Ok(Self { channels, fft, multipliers, sigma_b: cfg.sigma_b })
    }

    pub fn state_len(&self) -> usize {
        self.channels * self.fft.rows() * self.fft.cols()
    }

    /// Self-adjoint: the kernel is real and even.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let hw = self.fft.rows() * self.fft.cols();
        let mut out = Vec::with_capacity(v.len());
        for c in 0..self.channels {
            let mut spec = self.fft.forward_real(&v[c * hw..(c + 1) * hw]);
            for (z, g) in spec.iter_mut().zip(&self.multipliers[c]) {
                *z *= Complex64::new(g * self.sigma_b, 0.0);
            }
            out.extend(self.fft.inverse_real(&spec));
        }
        out
    }
}

/// `J(v) = ½‖v‖² + ‖y − A(x_b + Cv)‖² / (2σ_y²)` and its gradient.
pub fn var3d_cost(cvt: &Cvt, op: &ObsOperator, y: &[f64], xb: &[f64], sigma_y: f64, v: &[f64], grad: &mut [f64]) -> Result<f64> {
    let dx = cvt.apply(v);
    let x: Vec<f64> = xb.iter().zip(&dx).map(|(a, b)| a + b).collect();
    let r: Vec<f64> = op.apply(&x)?.iter().zip(y).map(|(a, b)| (a - b) / (sigma_y * sigma_y)).collect();
    let back = cvt.apply(&op.adjoint(&r)?);
    let mut j = 0.5 * v.iter().map(|a| a * a).sum::<f64>();
    j += 0.5 * sigma_y * sigma_y * r.iter().map(|a| a * a).sum::<f64>();
    for i in 0..v.len() {
        grad[i] = v[i] + back[i];
    }
    Ok(j)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Var3dFrame {
    #[serde(skip)]
    pub analysis: Vec<f64>,
    pub optimizer: LbfgsResult,
}

pub fn var3d_frame(cvt: &Cvt, op: &ObsOperator, y: Option<&[f64]>, xb: &[f64], sigma_y: f64, opt: &LbfgsConfig) -> Result<Var3dFrame> {
    let n = cvt.state_len();
    if xb.len() != n || op.input_len() != n {
        return shape_err(format!("background/operator do not match state of {n}"));
    }
    let Some(y) = y else {
        return Ok(Var3dFrame {
            analysis: xb.to_vec(),
            optimizer: lbfgs(|_, g| { g.iter_mut().for_each(|v| *v = 0.0); 0.0 }, &[], opt),
        });
    };
    if y.len() != op.output_len() {
        return shape_err("observation length does not match operator");
    }
    let mut err = None;
    let res = lbfgs(
        |v, g| match var3d_cost(cvt, op, y, xb, sigma_y, v, g) {
            Ok(j) => j,
            Err(e) => {
                err = Some(e);
                f64::NAN
            }
        },
        &vec![0.0; n],
        opt,
    );
    if let Some(e) = err {
        return Err(e);
    }
    let dx = cvt.apply(&res.x);
    let analysis = xb.iter().zip(&dx).map(|(a, b)| a + b).collect();
    Ok(Var3dFrame { analysis, optimizer: res })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Var3dOutput {
    #[serde(skip)]
    pub analyses: Vec<Vec<f64>>,
    /// Optimizer log per pass and frame.
    pub passes: Vec<Vec<Var3dFrame>>,
}

/// Cycled 3D-Var. Pass 1 uses `x_b,k = x_a,k−1` from the same pass with
/// `x_b,0 = 0`; later passes use the previous pass's analysis of frame `k−1`.
/// The first `context.len()` frames are taken as known.
#[allow(clippy::too_many_arguments)]
pub fn var3d(
    op: &ObsOperator,
    obs: &[Option<Vec<f64>>],
    sigma_y: f64,
    cfg: &CvtConfig,
    channels: usize,
    height: usize,
    width: usize,
    context: &[Vec<f64>],
) -> Result<Var3dOutput> {
    if !matches!(op, ObsOperator::SparseMask { .. }) {
        return Err(Error::Validation("3D-Var needs a sparse-mask operator".into()));
    }
    if !(sigma_y > 0.0) {
        return Err(Error::Validation("sigma_y must be positive".into()));
    }
    let cvt = Cvt::new(cfg, channels, height, width)?;
    let n = cvt.state_len();
    let zero = vec![0.0; n];
    let mut prev_pass: Option<Vec<Vec<f64>>> = None;
    let mut logs = Vec::new();
    for _ in 0..cfg.passes {
        let mut cur: Vec<Vec<f64>> = Vec::with_capacity(obs.len());
        let mut frames_log = Vec::new();
        for (k, y) in obs.iter().enumerate() {
            if let Some(c) = context.get(k) {
                cur.push(c.clone());
                continue;
            }
            let xb = match (k, &prev_pass) {
                (0, _) => &zero,
                (_, Some(p)) => &p[k - 1],
                (_, None) => &cur[k - 1],
            };
            let f = var3d_frame(&cvt, op, y.as_deref(), xb, sigma_y, &cfg.optimizer)?;
            cur.push(f.analysis.clone());
            frames_log.push(f);
        }
        logs.push(frames_log);
        prev_pass = Some(cur);
    }
    Ok(Var3dOutput { analyses: prev_pass.unwrap(), passes: logs })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Var4dConfig {
    pub window: usize,
    pub sigma_b: f64,
    pub sigma_y: f64,
    #[serde(default = "cg_tol")]
    pub cg_tol: f64,
    #[serde(default = "cg_iters")]
    pub cg_max_iter: usize,
}

fn cg_tol() -> f64 {
    1e-12
}

fn cg_iters() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CgLog {
    pub start: usize,
    pub iterations: usize,
    pub relative_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Var4dOutput {
    #[serde(skip)]
    pub states: Vec<Vec<f64>>,
    pub windows: Vec<CgLog>,
}

/// Conjugate gradients for a symmetric positive-definite operator.
pub fn conjugate_gradient(apply: impl Fn(&Vector) -> Vector, b: &Vector, tol: f64, max_iter: usize) -> (Vector, usize, f64) {
    let bn = b.norm();
    let mut x = Vector::zeros(b.len());
    if bn == 0.0 {
        return (x, 0, 0.0);
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = r.dot(&r);
    for it in 0..max_iter {
        if rr.sqrt() <= tol * bn {
            return (x, it, rr.sqrt() / bn);
        }
        let ap = apply(&p);
        let alpha = rr / p.dot(&ap);
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rr_new = r.dot(&r);
        p = &r + &p * (rr_new / rr);
        rr = rr_new;
    }
    let res = rr.sqrt() / bn;
    (x, max_iter, res)
}

/// Strong-constraint linear 4D-Var over consecutive windows. Each window
/// solves for its initial state; later windows take `A x_last` as background.
pub fn var4d_linear(a: &Mat, op: &ObsOperator, obs: &[Option<Vec<f64>>], cfg: &Var4dConfig) -> Result<Var4dOutput> {
    let n = a.nrows();
    if !a.is_square() || op.input_len() != n {
        return shape_err(format!("dynamics {:?} and operator input {} disagree", a.shape(), op.input_len()));
    }
    if cfg.window == 0 || !(cfg.sigma_b > 0.0) || !(cfg.sigma_y > 0.0) {
        return Err(Error::Validation("4D-Var needs window >= 1 and positive sigmas".into()));
    }
    let (ib, iy) = (1.0 / (cfg.sigma_b * cfg.sigma_b), 1.0 / (cfg.sigma_y * cfg.sigma_y));
    let at = a.transpose();
    let mut states = Vec::with_capacity(obs.len());
    let mut logs = Vec::new();
    let mut xb = Vector::zeros(n);
    let mut start = 0;
    while start < obs.len() {
        let w = cfg.window.min(obs.len() - start);
        let win = &obs[start..start + w];
        // rhs = x_b/σ_b² + Σ (A^k)ᵀ Hᵀ y_k / σ_y², accumulated backwards
        let mut rhs = Vector::zeros(n);
        for k in (0..w).rev() {
            if k + 1 < w {
                rhs = &at * rhs;
            }
            if let Some(y) = &win[k] {
                rhs += Vector::from_vec(op.adjoint(y)?) * iy;
            }
        }
        rhs += &xb * ib;
        let apply = |x: &Vector| {
            let mut fwd = Vec::with_capacity(w);
            let mut s = x.clone();
            for k in 0..w {
                if k > 0 {
                    s = a * s;
                }
                fwd.push(s.clone());
            }
            let mut acc = Vector::zeros(n);
            for k in (0..w).rev() {
                if k + 1 < w {
                    acc = &at * acc;
                }
                if win[k].is_some() {
                    let hx = op.apply(fwd[k].as_slice()).expect("checked");
                    acc += Vector::from_vec(op.adjoint(&hx).expect("checked")) * iy;
                }
            }
            acc + x * ib
        };
        let (x0, iters, res) = conjugate_gradient(apply, &rhs, cfg.cg_tol, cfg.cg_max_iter);
        if res > cfg.cg_tol {
            return Err(Error::Numerical {
                frame: start,
                detail: format!("conjugate gradients stopped at relative residual {res:e}"),
            });
        }
        logs.push(CgLog { start, iterations: iters, relative_residual: res });
        let mut s = x0;
        for k in 0..w {
            if k > 0 {
                s = a * s;
            }
            states.push(s.as_slice().to_vec());
        }
        xb = a * s;
        start += w;
    }
    Ok(Var4dOutput { states, windows: logs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    #[test]
    fn cvt_has_unit_point_variance() {
        let cfg = CvtConfig { length_scales: vec![2.0], sigma_b: 1.0, optimizer: LbfgsConfig::default(), passes: 1 };
        let cvt = Cvt::new(&cfg, 1, 16, 16).unwrap();
        let mut e = vec![0.0; 256];
        e[0] = 1.0;
        // row 0 of G; Σ g² is the point variance
        let g = cvt.apply(&e);
        let var: f64 = g.iter().map(|v| v * v).sum();
        assert!((var - 1.0).abs() < 1e-12);
        // self-adjoint
        let mut rng = RngStream::new(0, 0);
        let (u, v) = (rng.normal_vec(256), rng.normal_vec(256));
        let lhs: f64 = cvt.apply(&u).iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(cvt.apply(&v)).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn no_observations_keep_zero() {
        let mut rng = RngStream::new(1, 0);
        let op = ObsOperator::sparse_mask(0.2, 1, 8, 8, &mut rng).unwrap();
        let cfg = CvtConfig { length_scales: vec![2.0], sigma_b: 1.0, optimizer: LbfgsConfig::default(), passes: 2 };
        let out = var3d(&op, &[Some(vec![0.0; op.output_len()]), None], 0.1, &cfg, 1, 8, 8, &[]).unwrap();
        assert!(out.analyses.iter().flatten().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn dense_tiny_noise_recovers_field() {
        let mut rng = RngStream::new(2, 0);
        let op = ObsOperator::sparse_mask(1.0, 1, 8, 8, &mut rng).unwrap();
        let truth = rng.normal_vec(64);
        let cfg = CvtConfig {
            length_scales: vec![0.5],
            sigma_b: 1.0,
            optimizer: LbfgsConfig { max_iter: 500, gtol: 1e-12, ..Default::default() },
            passes: 1,
        };
        let out = var3d(&op, &[Some(truth.clone())], 1e-4, &cfg, 1, 8, 8, &[]).unwrap();
        let err: f64 = out.analyses[0].iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let nrm: f64 = truth.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / nrm < 1e-3, "relative gap {}", err / nrm);
    }

    #[test]
    fn ridge_closed_form() {
        let op = ObsOperator::linear(Mat::identity(2, 2));
        let cfg = Var4dConfig { window: 1, sigma_b: 2.0, sigma_y: 0.5, cg_tol: 1e-14, cg_max_iter: 100 };
        let out = var4d_linear(&Mat::identity(2, 2), &op, &[Some(vec![1.0, -3.0])], &cfg).unwrap();
        let scale = (1.0 / 0.25) / (1.0 / 4.0 + 1.0 / 0.25);
        assert!((out.states[0][0] - scale).abs() < 1e-12);
        assert!((out.states[0][1] + 3.0 * scale).abs() < 1e-12);
    }

    #[test]
    fn cg_budget_error() {
        let op = ObsOperator::linear(Mat::identity(3, 3));
        let a = Mat::from_row_slice(3, 3, &[1.0, 0.1, 0.0, 0.0, 0.9, 0.2, 0.1, 0.0, 1.1]);
        let cfg = Var4dConfig { window: 3, sigma_b: 1.0, sigma_y: 0.1, cg_tol: 1e-14, cg_max_iter: 1 };
        let obs = vec![Some(vec![1.0, 2.0, 3.0]); 3];
        assert!(matches!(var4d_linear(&a, &op, &obs, &cfg), Err(Error::Numerical { .. })));
    }
}
