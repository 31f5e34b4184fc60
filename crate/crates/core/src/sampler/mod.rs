//! Guided reverse sampling over a scheduling matrix.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoise::{tweedie, Denoiser, NoiseSchedule};
use crate::error::{shape_err, Error, Result};
use crate::fdt::write_tensor;
use crate::observe::ObservationSet;
use crate::rng::RngStream;
use crate::schedule::{build_schedule, sliding_window, SchedulingMatrix};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub zeta: f64,
    pub gamma: f64,
    pub sigma_y: f64,
    #[serde(default)]
    pub ddim_eta: f64,
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.zeta >= 0.0 && self.gamma >= 0.0 && self.sigma_y > 0.0 && (0.0..=1.0).contains(&self.ddim_eta)) {
            return Err(Error::Validation(format!(
                "guidance needs zeta >= 0, gamma >= 0, sigma_y > 0, ddim_eta in [0, 1]: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Named points of the scheduling family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// `u = T`: each frame finishes before the next starts.
    Autoregressive,
    /// `0 < u < T`.
    Pyramid(usize),
    /// `u = 0`: all frames descend together.
    FullSequence,
}

impl Regime {
    pub fn u(&self, steps: usize) -> usize {
        match *self {
            Regime::Autoregressive => steps,
            Regime::Pyramid(u) => u,
            Regime::FullSequence => 0,
        }
    }
}

/// `w = (σ_y² + γ (1-ᾱ)/ᾱ)^(-1/2)`.
pub fn guidance_weight(t: usize, sched: &NoiseSchedule, cfg: &GuidanceConfig) -> f64 {
    let a = sched.alpha_bar(t);
    (cfg.sigma_y * cfg.sigma_y + cfg.gamma * (1.0 - a) / a).powf(-0.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObsLoss {
    pub loss: f64,
    /// `∂L/∂x̂₀`, zero outside observed active frames.
    pub cotangent: Vec<f64>,
}

/// `Σ_{k∈active} w(t_k) ‖y_k - A(x̂₀,k)‖²` and its gradient in `x̂₀`.
pub fn observation_loss(
    xhat0: &[f64],
    t: &[usize],
    dim: usize,
    obs: &ObservationSet,
    active: &[usize],
    sched: &NoiseSchedule,
    cfg: &GuidanceConfig,
) -> Result<ObsLoss> {
    if xhat0.len() != t.len() * dim || obs.frames() != t.len() {
        return shape_err(format!(
            "{} values, {} steps and {} observation frames are inconsistent",
            xhat0.len(),
            t.len(),
            obs.frames()
        ));
    }
    if obs.operator.input_len() != dim {
        return shape_err(format!("operator acts on {} values, frames have {dim}", obs.operator.input_len()));
    }
    let mut cot = vec![0.0; xhat0.len()];
    let mut loss = 0.0;
    for &k in active {
        let Some(y) = obs.get(k) else { continue };
        let w = guidance_weight(t[k], sched, cfg);
        let frame = &xhat0[k * dim..(k + 1) * dim];
        let r: Vec<f64> = obs.operator.apply(frame)?.iter().zip(y).map(|(a, b)| a - b).collect();
        loss += w * r.iter().map(|v| v * v).sum::<f64>();
        let back = obs.operator.adjoint(&r)?;
        for (c, b) in cot[k * dim..(k + 1) * dim].iter_mut().zip(back) {
            *c = 2.0 * w * b;
        }
    }
    Ok(ObsLoss { loss, cotangent: cot })
}

/// One DDIM step `t → t'` for a single frame; the flag reports a clamped σ.
pub fn ddim_step(
    x: &[f64],
    t: usize,
    t_next: usize,
    eps: &[f64],
    sched: &NoiseSchedule,
    eta: f64,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, bool)> {
    if t_next >= t {
        return Err(Error::Validation(format!("DDIM step needs t' < t (got {t} -> {t_next})")));
    }
    if eps.len() != x.len() {
        return shape_err("noise prediction length differs from frame");
    }
    let (a, an) = (sched.alpha_bar(t), sched.alpha_bar(t_next));
    let mut var = if eta > 0.0 {
        eta * eta * (1.0 - an) / (1.0 - a) * (1.0 - a / an)
    } else {
        0.0
    };
    let mut clamped = false;
    if 1.0 - an - var < 0.0 {
        var = 1.0 - an;
        clamped = true;
    }
    let (sa, se, sz) = (an.sqrt(), (1.0 - an - var).sqrt(), var.sqrt());
    let (ra, rb) = (a.sqrt(), (1.0 - a).sqrt());
    let out = x
        .iter()
        .zip(eps)
        .map(|(&xi, &ei)| {
            let x0 = (xi - rb * ei) / ra;
            let z = if sz > 0.0 { rng.normal() } else { 0.0 };
            sa * x0 + se * ei + sz * z
        })
        .collect();
    Ok((out, clamped))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiag {
    pub window: usize,
    pub iteration: usize,
    pub obs_loss: f64,
    pub active: Vec<usize>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub sigma_clamped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssimilationResult {
    pub frames: usize,
    pub dim: usize,
    #[serde(skip)]
    pub states: Vec<f64>,
    pub diagnostics: Vec<IterationDiag>,
    pub config: GuidanceConfig,
    pub u: usize,
    pub master_seed: u64,
    pub stream_id: u64,
}

impl AssimilationResult {
    pub fn frame(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn loss_curve(&self) -> Vec<f64> {
        self.diagnostics.iter().map(|d| d.obs_loss).collect()
    }

    /// `<stem>.fdt` with dims `shape` (defaults to `[K, D]`) and `<stem>.json`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str, shape: Option<Vec<usize>>) -> Result<Vec<String>> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let dims = shape.unwrap_or_else(|| vec![self.frames, self.dim]);
        let fdt = format!("{stem}.fdt");
        write_tensor(dir.join(&fdt), &Tensor::new(dims, self.states.clone())?)?;
        let json = format!("{stem}.json");
        fs::write(dir.join(&json), serde_json::to_string_pretty(self)?)?;
        Ok(vec![fdt, json])
    }
}

/// Guided sampling of one window.
///
/// `context` frames are clean leading frames clamped at step 0 throughout;
/// with `obs = None` or `ζ = 0` the run is unguided.
pub fn assimilate(
    den: &dyn Denoiser,
    obs: Option<&ObservationSet>,
    s: &SchedulingMatrix,
    cfg: &GuidanceConfig,
    context: &[f64],
    rng: &mut RngStream,
) -> Result<AssimilationResult> {
    cfg.validate()?;
    let (k, d) = (den.frames(), den.frame_dim());
    let sched = den.schedule();
    if s.frames() != k || s.steps() != sched.sampling_steps() {
        return shape_err(format!(
            "schedule is {} frames x {} steps, denoiser expects {k} x {}",
            s.frames(),
            s.steps(),
            sched.sampling_steps()
        ));
    }
    if context.len() % d != 0 || context.len() / d >= k {
        return shape_err(format!("context of {} values must be fewer than {k} frames of {d}", context.len()));
    }
    if let Some(o) = obs {
        if o.frames() != k {
            return shape_err(format!("observations cover {} frames, window has {k}", o.frames()));
        }
    }
    let c = context.len() / d;
    let mut x = vec![0.0; k * d];
    x[..c * d].copy_from_slice(context);
    rng.fill_normal(&mut x[c * d..]);
    let steps_at = |l: usize| -> Vec<usize> {
        (0..k).map(|f| if f < c { 0 } else { s.get(f, l) }).collect()
    };
    let guided = obs.is_some() && cfg.zeta > 0.0;
    let mut diags = Vec::with_capacity(s.last_column());
    for l in 0..s.last_column() {
        let (t, tn) = (steps_at(l), steps_at(l + 1));
        let active: Vec<usize> = (c..k).filter(|&f| tn[f] < t[f]).collect();
        if active.is_empty() {
            diags.push(IterationDiag { window: 0, iteration: l, obs_loss: 0.0, active, sigma_clamped: false });
            continue;
        }
        let eps = den.predict_eps(&x, &t)?;
        let mut grad = None;
        let mut loss = 0.0;
        if let Some(o) = obs {
            let x0 = tweedie(&x, &t, d, &eps, sched)?;
            let ol = observation_loss(&x0, &t, d, o, &active, sched, cfg)?;
            loss = ol.loss;
            if guided {
                grad = Some(trajectory_gradient(den, &x, &t, &ol.cotangent)?);
            }
        }
        let mut clamped = false;
        for &f in &active {
            let r = f * d..(f + 1) * d;
            let (mut nf, cl) = ddim_step(&x[r.clone()], t[f], tn[f], &eps[r.clone()], sched, cfg.ddim_eta, rng)?;
            clamped |= cl;
            if let Some(g) = &grad {
                for (v, gi) in nf.iter_mut().zip(&g[r.clone()]) {
                    *v -= cfg.zeta * gi;
                }
            }
            x[r].copy_from_slice(&nf);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: l, detail: "sampler state is not finite".into() });
        }
        diags.push(IterationDiag { window: 0, iteration: l, obs_loss: loss, active, sigma_clamped: clamped });
    }
    Ok(AssimilationResult {
        frames: k,
        dim: d,
        states: x,
        diagnostics: diags,
        config: *cfg,
        u: s.u(),
        master_seed: rng.master_seed(),
        stream_id: rng.stream_id(),
    })
}

/// `∇_x L` through `x̂₀ = (x - √(1-ᾱ) ε̂(x)) / √ᾱ`.
pub fn trajectory_gradient(den: &dyn Denoiser, x: &[f64], t: &[usize], cot_x0: &[f64]) -> Result<Vec<f64>> {
    let d = den.frame_dim();
    let sched = den.schedule();
    let mut direct = vec![0.0; x.len()];
    let mut through = vec![0.0; x.len()];
    for (f, &tf) in t.iter().enumerate() {
        let a = sched.alpha_bar(tf);
        let (ia, rb) = (1.0 / a.sqrt(), (1.0 - a).sqrt() / a.sqrt());
        for i in f * d..(f + 1) * d {
            direct[i] = ia * cot_x0[i];
            through[i] = -rb * cot_x0[i];
        }
    }
    let v = den.vjp(x, t, &through)?;
    Ok(direct.iter().zip(v).map(|(a, b)| a + b).collect())
}

/// Sliding-window run over `obs.frames()` frames; frames shared with the
/// previous window are carried over as clean context.
pub fn assimilate_sliding(
    den: &dyn Denoiser,
    obs: Option<&ObservationSet>,
    total: usize,
    u: usize,
    cfg: &GuidanceConfig,
    context: &[f64],
    rng: &mut RngStream,
) -> Result<AssimilationResult> {
    let (k, d) = (den.frames(), den.frame_dim());
    if let Some(o) = obs {
        if o.frames() != total {
            return shape_err(format!("observations cover {} frames, run has {total}", o.frames()));
        }
    }
    if context.len() % d != 0 || context.len() / d > total {
        return shape_err("context does not fit the run");
    }
    let s = build_schedule(k, den.schedule().sampling_steps(), u)?;
    let windows = sliding_window(total, k, u)?;
    let mut states = vec![0.0; total * d];
    let mut known = context.len() / d;
    states[..known * d].copy_from_slice(context);
    let mut diags = Vec::new();
    for (w, win) in windows.iter().enumerate() {
        if known >= win.start + k {
            continue;
        }
        let ctx = known.saturating_sub(win.start);
        let ctx_data = states[win.start * d..(win.start + ctx) * d].to_vec();
        let wobs = obs.map(|o| o.window(win.start, k));
        let r = assimilate(den, wobs.as_ref(), &s, cfg, &ctx_data, rng)?;
        states[win.start * d..(win.start + k) * d].copy_from_slice(&r.states);
        known = win.start + k;
        diags.extend(r.diagnostics.into_iter().map(|mut it| {
            it.window = w;
            it.active.iter_mut().for_each(|f| *f += win.start);
            it
        }));
    }
    Ok(AssimilationResult {
        frames: total,
        dim: d,
        states,
        diagnostics: diags,
        config: *cfg,
        u,
        master_seed: rng.master_seed(),
        stream_id: rng.stream_id(),
    })
}

/// `members` unguided autoregressive continuations of `context` by `horizon` frames.
///
/// Member `i` draws from substream `i` of `rng`; each returned vector holds
/// the context followed by the forecast frames.
pub fn forecast(
    den: &dyn Denoiser,
    context: &[f64],
    horizon: usize,
    members: usize,
    ddim_eta: f64,
    rng: &RngStream,
) -> Result<Vec<Vec<f64>>> {
    let d = den.frame_dim();
    if context.is_empty() || context.len() % d != 0 {
        return Err(Error::Validation("forecast needs at least one context frame".into()));
    }
    if horizon == 0 {
        return Ok(vec![context.to_vec(); members]);
    }
    let c = context.len() / d;
    let k = den.frames();
    let total = c + horizon;
    // the leading window must hold the context plus at least one new frame
    let lead = c.min(k - 1);
    let ctx = &context[(c - lead) * d..];
    let run_total = lead + horizon;
    if run_total < k {
        return Err(Error::Validation(format!(
            "context ({lead}) plus horizon ({horizon}) must span the {k}-frame window"
        )));
    }
    let cfg = GuidanceConfig { zeta: 0.0, gamma: 0.0, sigma_y: 1.0, ddim_eta };
    let steps = den.schedule().sampling_steps();
    (0..members)
        .into_par_iter()
        .map(|m| {
            let mut r = rng.substream(m as u64);
            let res = assimilate_sliding(den, None, run_total, steps, &cfg, ctx, &mut r)?;
            let mut out = Vec::with_capacity(total * d);
            out.extend_from_slice(context);
            out.extend_from_slice(&res.states[lead * d..]);
            Ok(out)
        })
        .collect()
}
