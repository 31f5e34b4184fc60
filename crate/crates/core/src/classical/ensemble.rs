use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::localization::{GridLocalizer, LocalizationConfig};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{check_psd, psd_sqrt, Mat, Vector};
use crate::observe::ObsOperator;
use crate::rng::RngStream;

/// Largest augmented ensemble (`n · (lag + 1) · N_e` values) an EnKS run may hold.
pub const ENKS_BUFFER_LIMIT: usize = 1 << 28;

/// Spread below which an ensemble is reported as collapsed.
pub const COLLAPSE_SPREAD: f64 = 1e-12;

/// Advances one member state by one observation interval.
pub trait Propagator: Sync {
    fn propagate(&self, member: usize, frame: usize, state: &mut [f64], rng: &mut RngStream) -> Result<()>;
}

impl<F> Propagator for F
where
    F: Fn(usize, usize, &mut [f64], &mut RngStream) -> Result<()> + Sync,
{
    fn propagate(&self, member: usize, frame: usize, state: &mut [f64], rng: &mut RngStream) -> Result<()> {
        self(member, frame, state, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "one")]
    pub inflation: f64,
    #[serde(default)]
    pub localization: Option<LocalizationConfig>,
    /// Smoother lag; 0 is the filter.
    #[serde(default)]
    pub lag: usize,
}

fn one() -> f64 {
    1.0
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self { inflation: 1.0, localization: None, lag: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleOutput {
    pub means: Vec<Vec<f64>>,
    /// Mean member standard deviation per frame.
    pub spreads: Vec<f64>,
    /// Frobenius norm of the newest-block gain at each analysed frame.
    pub gain_norms: Vec<Option<f64>>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub final_ensemble: Mat,
}

pub fn ensemble_mean(x: &Mat) -> Vector {
    x.column_mean()
}

pub fn ensemble_spread(x: &Mat) -> f64 {
    let n = x.ncols();
    if n < 2 {
        return 0.0;
    }
    let m = x.column_mean();
    let var: f64 = x
        .row_iter()
        .zip(m.iter())
        .map(|(row, mu)| row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
        .map(f64::sqrt)
        .sum();
    var / x.nrows() as f64
}

/// `x_i ← x̄ + λ (x_i − x̄)`.
pub fn inflate(x: &mut Mat, lambda: f64) {
    let m = x.column_mean();
    for mut col in x.column_iter_mut() {
        let d = (&col - &m) * lambda;
        col.copy_from(&(&m + d));
    }
}

/// Stochastic EnKF with perturbed observations.
pub fn enkf_run(
    ens0: Mat,
    obs: &[Option<Vec<f64>>],
    op: &ObsOperator,
    r: &Mat,
    cfg: &EnsembleConfig,
    propagate: &dyn Propagator,
    rng: &mut RngStream,
) -> Result<EnsembleOutput> {
    enks_run(ens0, obs, op, r, &EnsembleConfig { lag: 0, ..*cfg }, propagate, rng)
}

/// Augmented-state EnKS: the newest block is observed, the previous `lag`
/// blocks are updated through cross-time sample covariances.
pub fn enks_run(
    ens0: Mat,
    obs: &[Option<Vec<f64>>],
    op: &ObsOperator,
    r: &Mat,
    cfg: &EnsembleConfig,
    propagate: &dyn Propagator,
    rng: &mut RngStream,
) -> Result<EnsembleOutput> {
    let (n, ne) = ens0.shape();
    let m = op.output_len();
    if ne < 2 {
        return Err(Error::Validation("ensemble needs at least two members".into()));
    }
    if n.saturating_mul(cfg.lag + 1).saturating_mul(ne) > ENKS_BUFFER_LIMIT {
        return Err(Error::Capacity(format!(
            "smoother buffer of {n} x {} x {ne} exceeds {ENKS_BUFFER_LIMIT} values",
            cfg.lag + 1
        )));
    }
    if op.input_len() != n || r.shape() != (m, m) {
        return shape_err(format!("operator {}→{} and R {:?} do not fit state {n}", op.input_len(), m, r.shape()));
    }
    if let Some(k) = obs.iter().position(|y| y.as_ref().is_some_and(|y| y.len() != m)) {
        return shape_err(format!("observation at frame {k} does not have {m} values"));
    }
    if !(cfg.inflation >= 1.0) {
        return Err(Error::Validation(format!("inflation {} must be >= 1", cfg.inflation)));
    }
    check_psd(r, "R", true)?;
    let r_sqrt = psd_sqrt(r);
    let loc = match cfg.localization {
        None => None,
        Some(lc) => {
            let (h, w) = match op {
                ObsOperator::SparseMask { height, width, .. } => (*height, *width),
                _ => return Err(Error::Validation("localization needs a sparse-mask operator".into())),
            };
            let g = GridLocalizer::new(lc, h, w)?;
            let locs = op.locations().expect("mask has locations");
            Some((g.state_obs(n, &locs), g.obs_obs(&locs)))
        }
    };
    let mut streams: Vec<RngStream> = (0..ne).map(|i| rng.substream(i as u64)).collect();
    let frames = obs.len();
    let mut out = EnsembleOutput {
        means: vec![Vec::new(); frames],
        spreads: vec![0.0; frames],
        gain_norms: vec![None; frames],
        warnings: Vec::new(),
        final_ensemble: Mat::zeros(0, 0),
    };
    let mut buffer: VecDeque<(usize, Mat)> = VecDeque::new();
    let finalize = |out: &mut EnsembleOutput, k: usize, x: &Mat| {
        out.means[k] = ensemble_mean(x).as_slice().to_vec();
        out.spreads[k] = ensemble_spread(x);
    };
    for (k, y) in obs.iter().enumerate() {
        let mut x = match buffer.back() {
            None => ens0.clone(),
            Some((_, prev)) => {
                let mut next = prev.clone();
                let items: Vec<_> = next.as_mut_slice().par_chunks_mut(n).zip(streams.par_iter_mut()).enumerate().collect();
                items
                    .into_par_iter()
                    .map(|(i, (col, s))| propagate.propagate(i, k, col, s))
                    .collect::<Result<Vec<()>>>()?;
                next
            }
        };
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical { frame: k, detail: "ensemble forecast is not finite".into() });
        }
        // keep only the `lag` most recent blocks behind the new one
        while buffer.len() > cfg.lag {
            let (j, old) = buffer.pop_front().unwrap();
            finalize(&mut out, j, &old);
        }
        if let Some(y) = y {
            inflate(&mut x, cfg.inflation);
            buffer.push_back((k, x));
            let gain = analyse(&mut buffer, y, op, r, &r_sqrt, loc.as_ref(), rng, k)?;
            out.gain_norms[k] = Some(gain);
        } else {
            buffer.push_back((k, x));
        }
        let newest = &buffer.back().unwrap().1;
        if ensemble_spread(newest) < COLLAPSE_SPREAD {
            out.warnings.push(format!("ensemble collapsed at frame {k}"));
        }
    }
    for (j, x) in &buffer {
        finalize(&mut out, *j, x);
    }
    out.final_ensemble = buffer.pop_back().map(|(_, x)| x).unwrap_or_default();
    Ok(out)
}

fn anomalies(x: &Mat) -> Mat {
    let m = x.column_mean();
    let s = 1.0 / ((x.ncols() - 1) as f64).sqrt();
    let mut a = x.clone();
    for mut col in a.column_iter_mut() {
        col -= &m;
        col *= s;
    }
    a
}

#[allow(clippy::too_many_arguments)]
fn analyse(
    buffer: &mut VecDeque<(usize, Mat)>,
    y: &[f64],
    op: &ObsOperator,
    r: &Mat,
    r_sqrt: &Mat,
    loc: Option<&(Mat, Mat)>,
    rng: &mut RngStream,
    frame: usize,
) -> Result<f64> {
    let newest = &buffer.back().unwrap().1;
    let (m, ne) = (op.output_len(), newest.ncols());
    let mut hx = Mat::zeros(m, ne);
    for (i, col) in newest.column_iter().enumerate() {
        let v = op.apply(col.as_slice())?;
        hx.column_mut(i).copy_from_slice(&v);
    }
    let ha = anomalies(&hx);
    let mut s = &ha * ha.transpose();
    if let Some((_, oo)) = loc {
        s.component_mul_assign(oo);
    }
    s += r;
    let chol = s
        .cholesky()
        .ok_or_else(|| Error::Numerical { frame, detail: "innovation covariance is singular".into() })?;
    // mean-centred perturbed observations
    let mut e = Mat::from_fn(m, ne, |_, _| rng.normal());
    e = r_sqrt * e;
    let em = e.column_mean();
    for mut col in e.column_iter_mut() {
        col -= &em;
    }
    let yv = Vector::from_column_slice(y);
    let mut innov = e - &hx;
    for mut col in innov.column_iter_mut() {
        col += &yv;
    }
    let z = chol.solve(&innov);
    let nb = buffer.len();
    let mut gain_norm = 0.0;
    for (b, (_, x)) in buffer.iter_mut().enumerate() {
        let mut p = anomalies(x) * ha.transpose();
        if let Some((so, _)) = loc {
            p.component_mul_assign(so);
        }
        if b + 1 == nb {
            gain_norm = chol.solve(&p.transpose()).norm();
        }
        *x += &p * &z;
    }
    Ok(gain_norm)
}
