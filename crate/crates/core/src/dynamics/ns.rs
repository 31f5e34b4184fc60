//! Stochastic 2D Navier–Stokes vorticity on the `[0, 2π]²` torus.
//!
//! `dω + (v·∇ω) dt = ν Δω dt − α ω dt + ε dη`, with `v = (−∂yψ, ∂xψ)` and
//! `−Δψ = ω`. Grid row index is `y`, column index is `x`.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdt::write_tensor;
use crate::rng::RngStream;
use crate::spectral::{wavenumber, Fft2};
use crate::tensor::Trajectory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NsConfig {
    /// Points per side.
    pub grid: usize,
    pub viscosity: f64,
    pub drag: f64,
    /// Amplitude of the eight-mode stochastic forcing.
    pub forcing: f64,
    pub dt: f64,
    pub store_interval: f64,
    pub seed: u64,
    /// Optional coarser output grid reached by bilinear downsampling.
    #[serde(default)]
    pub output_grid: Option<usize>,
}

impl NsConfig {
    /// ν = 1e-3, α = 0.1, ε = 1, dt = 2e-3, snapshots every 0.5 time units.
    pub fn reference(grid: usize, seed: u64) -> Self {
        Self {
            grid,
            viscosity: 1e-3,
            drag: 0.1,
            forcing: 1.0,
            dt: 2e-3,
            store_interval: 0.5,
            seed,
            output_grid: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.grid < 16 || !self.grid.is_power_of_two() {
            return bad(format!("grid {} must be a power of two >= 16", self.grid));
        }
        if !(self.viscosity > 0.0) {
            return bad(format!("viscosity {} must be positive", self.viscosity));
        }
        if !(self.drag >= 0.0) || !(self.forcing >= 0.0) {
            return bad("drag and forcing must be non-negative".into());
        }
        if !(self.dt > 0.0) {
            return bad(format!("dt {} must be positive", self.dt));
        }
        self.steps_per_store()?;
        if let Some(g) = self.output_grid {
            if g == 0 || g > self.grid {
                return bad(format!("output grid {g} must be in 1..={}", self.grid));
            }
        }
        Ok(())
    }

    pub fn steps_per_store(&self) -> Result<usize> {
        let r = self.store_interval / self.dt;
        let n = r.round();
        if n < 1.0 || (r - n).abs() > 1e-9 * r.max(1.0) {
            return Err(Error::Validation(format!(
                "store interval {} is not a positive multiple of dt {}",
                self.store_interval, self.dt
            )));
        }
        Ok(n as usize)
    }
}

/// Spectral coefficients of a real `n x n` field (unnormalized forward FFT).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralField {
    n: usize,
    coeffs: Vec<Complex64>,
}

impl SpectralField {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    /// `Σ ω²` over grid points (Parseval on the unnormalized transform).
    pub fn enstrophy(&self) -> f64 {
        let n2 = (self.n * self.n) as f64;
        self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>() / n2
    }
}

/// Pseudo-spectral semi-implicit Euler–Maruyama integrator.
#[derive(Debug, Clone)]
pub struct NsSolver {
    cfg: NsConfig,
    fft: Fft2,
    kx: Vec<f64>,
    ky: Vec<f64>,
    inv_k2: Vec<f64>,
    keep: Vec<bool>,
    implicit: Vec<f64>,
    forcing_modes: Vec<Vec<Complex64>>,
}

fn forcing_patterns(n: usize) -> Vec<Vec<f64>> {
    let grid = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        (0..n * n)
            .map(|idx| {
                let y = 2.0 * PI * (idx / n) as f64 / n as f64;
                let x = 2.0 * PI * (idx % n) as f64 / n as f64;
                f(x, y)
            })
            .collect()
    };
    vec![
        grid(&|x, _| (6.0 * x).sin()),
        grid(&|x, _| (7.0 * x).cos()),
        grid(&|x, y| (5.0 * (x + y)).sin()),
        grid(&|x, y| (8.0 * (x + y)).cos()),
        grid(&|x, _| (6.0 * x).cos()),
        grid(&|x, _| (7.0 * x).sin()),
        grid(&|x, y| (5.0 * (x + y)).cos()),
        grid(&|x, y| (8.0 * (x + y)).sin()),
    ]
}

impl NsSolver {
    pub fn new(cfg: NsConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.grid;
        let fft = Fft2::new(n, n);
        let cut = n as f64 / 3.0;
        let mut kx = vec![0.0; n * n];
        let mut ky = vec![0.0; n * n];
        let mut inv_k2 = vec![0.0; n * n];
        let mut keep = vec![false; n * n];
        let mut implicit = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                let i = r * n + c;
                let (x, y) = (wavenumber(c, n) as f64, wavenumber(r, n) as f64);
                kx[i] = x;
                ky[i] = y;
                let k2 = x * x + y * y;
                inv_k2[i] = if k2 > 0.0 { 1.0 / k2 } else { 0.0 };
                keep[i] = x.abs() <= cut && y.abs() <= cut && k2 > 0.0;
                implicit[i] = 1.0 / (1.0 + cfg.dt * (cfg.viscosity * k2 + cfg.drag));
            }
        }
        let mut solver = Self {
            cfg,
            fft,
            kx,
            ky,
            inv_k2,
            keep,
            implicit,
            forcing_modes: Vec::new(),
        };
        solver.forcing_modes = forcing_patterns(n)
            .iter()
            .map(|p| {
                let mut s = solver.fft.forward_real(p);
                solver.project(&mut s);
                s
            })
            .collect();
        Ok(solver)
    }

    pub fn config(&self) -> &NsConfig {
        &self.cfg
    }

    pub fn fft(&self) -> &Fft2 {
        &self.fft
    }

    /// Zero the mean mode and every coefficient outside the 2/3-rule box.
    fn project(&self, s: &mut [Complex64]) {
        for (v, &k) in s.iter_mut().zip(&self.keep) {
            if !k {
                *v = Complex64::new(0.0, 0.0);
            }
        }
    }

    pub fn to_spectral(&self, field: &[f64]) -> Result<SpectralField> {
        let n = self.cfg.grid;
        if field.len() != n * n {
            return Err(Error::Shape(format!("field has {} values, grid needs {}", field.len(), n * n)));
        }
        let mut coeffs = self.fft.forward_real(field);
        self.project(&mut coeffs);
        Ok(SpectralField { n, coeffs })
    }

    pub fn to_physical(&self, s: &SpectralField) -> Vec<f64> {
        self.fft.inverse_real(&s.coeffs)
    }

    pub fn zero_field(&self) -> SpectralField {
        let n = self.cfg.grid;
        SpectralField { n, coeffs: vec![Complex64::new(0.0, 0.0); n * n] }
    }

    /// Dealiased spectral advection term `−(v·∇ω)`.
    pub fn advection(&self, w: &[Complex64]) -> Vec<Complex64> {
        let i = Complex64::new(0.0, 1.0);
        let nn = w.len();
        // u + i v and ωx + i ωy packed into one complex inverse each: all four are real fields.
        let mut vel = vec![Complex64::new(0.0, 0.0); nn];
        let mut grad = vec![Complex64::new(0.0, 0.0); nn];
        for idx in 0..nn {
            let psi = w[idx] * self.inv_k2[idx];
            let u = -i * self.ky[idx] * psi;
            let v = i * self.kx[idx] * psi;
            vel[idx] = u + i * v;
            let wx = i * self.kx[idx] * w[idx];
            let wy = i * self.ky[idx] * w[idx];
            grad[idx] = wx + i * wy;
        }
        self.fft.inverse(&mut vel);
        self.fft.inverse(&mut grad);
        let mut prod: Vec<Complex64> = vel
            .iter()
            .zip(&grad)
            .map(|(v, g)| Complex64::new(-(v.re * g.re + v.im * g.im), 0.0))
            .collect();
        self.fft.forward(&mut prod);
        self.project(&mut prod);
        prod
    }

    /// One semi-implicit Euler–Maruyama step of length `dt`.
    pub fn step(&self, field: &mut SpectralField, rng: &mut RngStream, step_index: usize) -> Result<()> {
        let dt = self.cfg.dt;
        let nl = self.advection(&field.coeffs);
        let mut forcing_inc: Option<[f64; 8]> = None;
        if self.cfg.forcing > 0.0 {
            let sd = dt.sqrt();
            let mut dw = [0.0; 8];
            for v in dw.iter_mut() {
                *v = self.cfg.forcing * sd * rng.normal();
            }
            forcing_inc = Some(dw);
        }
        let mut finite = true;
        for idx in 0..field.coeffs.len() {
            if !self.keep[idx] {
                field.coeffs[idx] = Complex64::new(0.0, 0.0);
                continue;
            }
            let mut rhs = field.coeffs[idx] + nl[idx] * dt;
            if let Some(dw) = &forcing_inc {
                for (m, w) in self.forcing_modes.iter().zip(dw) {
                    rhs += m[idx] * *w;
                }
            }
            let v = rhs * self.implicit[idx];
            finite &= v.re.is_finite() && v.im.is_finite();
            field.coeffs[idx] = v;
        }
        if !finite {
            return Err(Error::Divergence { step: step_index, detail: "non-finite vorticity".into() });
        }
        Ok(())
    }

    /// Advance `steps` steps; step indices continue from `first_index`.
    pub fn advance(
        &self,
        field: &mut SpectralField,
        steps: usize,
        rng: &mut RngStream,
        first_index: usize,
    ) -> Result<()> {
        for s in 0..steps {
            self.step(field, rng, first_index + s)?;
        }
        Ok(())
    }
}

/// Bilinear resize with `align_corners = false` and edge clamping.
pub fn bilinear_resize(field: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let axis = |dst: usize, src_n: usize, dst_n: usize| -> (usize, usize, f64) {
        let scale = src_n as f64 / dst_n as f64;
        let s = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(src_n - 1);
        let i1 = (i0 + 1).min(src_n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; out_h * out_w];
    for r in 0..out_h {
        let (r0, r1, fr) = axis(r, h, out_h);
        for c in 0..out_w {
            let (c0, c1, fc) = axis(c, w, out_w);
            let top = field[r0 * w + c0] * (1.0 - fc) + field[r0 * w + c1] * fc;
            let bot = field[r1 * w + c0] * (1.0 - fc) + field[r1 * w + c1] * fc;
            out[r * out_w + c] = top * (1.0 - fr) + bot * fr;
        }
    }
    out
}

/// Generated trajectories with their empirical range.
#[derive(Debug, Clone)]
pub struct NsDataset {
    pub trajectories: Vec<Trajectory>,
    pub min: f64,
    pub max: f64,
}

/// Run `n_traj` independent trajectories from rest, discard `burn_in` store
/// intervals, then keep `frames` snapshots. Trajectory `i` draws from stream `i`.
pub fn ns_generate(cfg: &NsConfig, n_traj: usize, frames: usize, burn_in: usize) -> Result<NsDataset> {
    ns_generate_streams(cfg, &(0..n_traj as u64).collect::<Vec<_>>(), frames, burn_in)
}

/// As [`ns_generate`] with explicit per-trajectory stream ids.
pub fn ns_generate_streams(
    cfg: &NsConfig,
    streams: &[u64],
    frames: usize,
    burn_in: usize,
) -> Result<NsDataset> {
    if frames == 0 {
        return Err(Error::Validation("frames must be >= 1".into()));
    }
    let solver = NsSolver::new(cfg.clone())?;
    let per = cfg.steps_per_store()?;
    let n = cfg.grid;
    let out_n = cfg.output_grid.unwrap_or(n);
    let trajectories: Vec<Trajectory> = streams
        .par_iter()
        .map(|&sid| {
            let mut rng = RngStream::new(cfg.seed, sid);
            let mut field = solver.zero_field();
            solver.advance(&mut field, burn_in * per, &mut rng, 0)?;
            let mut data = Vec::with_capacity(frames * out_n * out_n);
            for f in 0..frames {
                if f > 0 {
                    solver.advance(&mut field, per, &mut rng, (burn_in + f - 1) * per)?;
                }
                let phys = solver.to_physical(&field);
                if out_n == n {
                    data.extend(phys);
                } else {
                    data.extend(bilinear_resize(&phys, n, n, out_n, out_n));
                }
            }
            Trajectory::new(frames, 1, out_n, out_n, data)
        })
        .collect::<Result<_>>()?;
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in &trajectories {
        for &v in t.data() {
            min = min.min(v);
            max = max.max(v);
        }
    }
    Ok(NsDataset { trajectories, min, max })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NsSidecar {
    pub config: NsConfig,
    pub seed: u64,
    pub n_traj: usize,
    pub frames: usize,
    pub burn_in: usize,
    pub min: f64,
    pub max: f64,
    pub files: Vec<String>,
}

/// Write one FDT1 file per trajectory plus `dataset.json`.
pub fn write_ns_dataset(
    dir: impl AsRef<Path>,
    ds: &NsDataset,
    cfg: &NsConfig,
    burn_in: usize,
) -> Result<Vec<String>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (i, t) in ds.trajectories.iter().enumerate() {
        let name = format!("traj_{i:04}.fdt");
        write_tensor(dir.join(&name), &t.to_tensor())?;
        files.push(name);
    }
    let side = NsSidecar {
        config: cfg.clone(),
        seed: cfg.seed,
        n_traj: ds.trajectories.len(),
        frames: ds.trajectories.first().map_or(0, |t| t.frames()),
        burn_in,
        min: ds.min,
        max: ds.max,
        files: files.clone(),
    };
    fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&side)?)?;
    files.push("dataset.json".into());
    Ok(files)
}
