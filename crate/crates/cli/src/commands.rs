use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use unida::classical::{
    enks_run, kalman_filter, rts_smoother, var3d, var4d_linear, EnsembleConfig, Var4dConfig,
};
use unida::denoise::{
    stack_windows, train_denoiser, AffineDenoiser, Denoiser, GaussianDenoiser, NoiseSchedule,
};
use unida::dynamics::{ns_generate, write_ns_dataset, LinearSsm, NsSolver};
use unida::fdt::{read_tensor, write_tensor};
use unida::linalg::{psd_sqrt, Mat, Vector};
use unida::metrics::{acc, bias, crps, csi, nrmse, spectrum_error, LatWeights, MetricReport, SpectrumBands};
use unida::observe::{observe_frames, read_observations, write_observations, Normalization, ObsOperator, ObservationSet};
use unida::pca::Pca;
use unida::rng::RngStream;
use unida::sampler::{assimilate_sliding, forecast, GuidanceConfig};
use unida::schedule::build_schedule;
use unida::tensor::{Tensor, Trajectory};

use crate::config::{DatasetSpec, DenoiserRef, ExperimentConfig, LatitudeGrid, MethodSpec, OperatorConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::Recorder;
use crate::space::ModelSpace;

// Stream ids under the experiment seed.
const OBS_MASK_STREAM: u64 = 1000;
const OBS_NOISE_STREAM: u64 = 1001;
const ASSIM_STREAM: u64 = 2000;
const ENSEMBLE_INIT_STREAM: u64 = 2001;
const TRAIN_STREAM: u64 = 3000;
const FORECAST_STREAM: u64 = 4000;

const DATA: &str = "data";
const OBS: &str = "obs";
const ASSIM: &str = "assim";
const MODEL: &str = "model";
const FORECAST: &str = "forecast";
const EVAL: &str = "eval";

pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub seed: u64,
    pub config_hash: String,
}

impl Context {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn require(&self, rec: &mut Recorder, rel: &str) -> CliResult<PathBuf> {
        let p = self.path(rel);
        if !p.is_file() {
            return Err(CliError::missing(p.display()));
        }
        rec.input(rel);
        Ok(p)
    }

    fn ssm(&self) -> CliResult<LinearSsm> {
        match self.cfg.dataset()? {
            DatasetSpec::Ssm { model, .. } => Ok(LinearSsm::from_spec(model)?),
            DatasetSpec::Ns { .. } => Err(CliError::incompatible("this step", "dataset ns (needs an ssm)")),
        }
    }

    fn trajectory(&self, rec: &mut Recorder, i: usize) -> CliResult<Trajectory> {
        let rel = format!("{DATA}/{}", traj_name(i));
        let p = self.require(rec, &rel)?;
        Ok(Trajectory::from_tensor(&read_tensor(p)?)?)
    }

    fn observations(&self, rec: &mut Recorder) -> CliResult<ObservationSet> {
        self.require(rec, &format!("{OBS}/obs.json"))?;
        self.require(rec, &format!("{OBS}/obs.fdt"))?;
        Ok(read_observations(self.path(OBS), "obs")?)
    }

    fn finish(&self, rec: Recorder, command: &str) -> CliResult<PathBuf> {
        rec.finish(command, &self.config_hash, self.seed)
    }
}

fn traj_name(i: usize) -> String {
    format!("traj_{i:04}.fdt")
}

#[derive(Debug, Serialize, Deserialize)]
struct SsmSidecar {
    kind: String,
    seed: u64,
    frames: usize,
    n_traj: usize,
    min: f64,
    max: f64,
    files: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct RangeOnly {
    min: f64,
    max: f64,
}

pub fn generate(ctx: &Context) -> CliResult<PathBuf> {
    let mut rec = Recorder::new(&ctx.out);
    let dir = ctx.path(DATA);
    let ds = ctx.cfg.dataset()?;
    let files = match ds {
        DatasetSpec::Ssm { frames, trajectories, .. } => {
            let ssm = ctx.ssm()?;
            fs::create_dir_all(&dir)?;
            let mut files = Vec::new();
            let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
            for i in 0..*trajectories {
                let (xs, _) = ssm.simulate(*frames, &mut RngStream::new(ctx.seed, i as u64))?;
                xs.data().iter().for_each(|&v| {
                    min = min.min(v);
                    max = max.max(v);
                });
                let t = Trajectory::from_vectors(*frames, ssm.state_dim(), xs.into_data())?;
                write_tensor(dir.join(traj_name(i)), &t.to_tensor())?;
                files.push(traj_name(i));
            }
            let side = SsmSidecar {
                kind: "ssm".into(),
                seed: ctx.seed,
                frames: *frames,
                n_traj: *trajectories,
                min,
                max,
                files: files.clone(),
            };
            fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&side)?)?;
            files.push("dataset.json".into());
            files
        }
        DatasetSpec::Ns { frames, trajectories, burn_in, .. } => {
            let cfg = ds.ns_config(ctx.seed).expect("ns dataset");
            let data = ns_generate(&cfg, *trajectories, *frames, *burn_in)?;
            write_ns_dataset(&dir, &data, &cfg, *burn_in)?
        }
    };
    rec.outputs_in(DATA, &files);
    ctx.finish(rec, "generate")
}

fn build_operator(ctx: &Context, traj: &Trajectory) -> CliResult<(ObsOperator, u64)> {
    let obs = ctx.cfg.observe.as_ref().ok_or_else(|| CliError::config("config has no observe section"))?;
    let (c, h, w) = (traj.channels(), traj.height(), traj.width());
    Ok(match &obs.operator {
        OperatorConfig::SparseMask { ratio, mask_seed } => {
            let ms = mask_seed.unwrap_or(ctx.seed);
            (ObsOperator::sparse_mask(*ratio, c, h, w, &mut RngStream::new(ms, OBS_MASK_STREAM))?, ms)
        }
        OperatorConfig::Downsample { factor } => (ObsOperator::downsample(*factor, c, h, w)?, 0),
        OperatorConfig::Linear => (ObsOperator::linear(ctx.ssm()?.h.clone()), 0),
        OperatorConfig::LinearMatrix { h: rows } => {
            let n = traj.frame_len();
            if rows.is_empty() || rows.iter().any(|r| r.len() != n) {
                return Err(CliError::config(format!("observe.operator.h must have rows of length {n}")));
            }
            (ObsOperator::linear(Mat::from_row_iterator(rows.len(), n, rows.iter().flatten().copied())), 0)
        }
    })
}

pub fn observe(ctx: &Context) -> CliResult<PathBuf> {
    let mut rec = Recorder::new(&ctx.out);
    let spec = ctx.cfg.observe.clone().ok_or_else(|| CliError::config("config has no observe section"))?;
    let truth = ctx.trajectory(&mut rec, spec.trajectory)?;
    let (op, mask_seed) = build_operator(ctx, &truth)?;
    let frames: Vec<usize> = (0..truth.frames()).step_by(spec.every).collect();
    let set = observe_frames(&truth, &op, spec.sigma_y, &frames, &mut RngStream::new(ctx.seed, OBS_NOISE_STREAM))?;
    let files = write_observations(ctx.path(OBS), "obs", &set, mask_seed)?;
    rec.outputs_in(OBS, &files);
    ctx.finish(rec, "observe")
}

#[derive(Debug, Serialize)]
struct ClassicalDiagnostics<'a, D: Serialize> {
    method: &'a str,
    seed: u64,
    details: D,
}

fn write_analysis<D: Serialize>(ctx: &Context, rec: &mut Recorder, like: &Trajectory, states: Vec<f64>, method: &str, details: D) -> CliResult<()> {
    let dir = ctx.path(ASSIM);
    fs::create_dir_all(&dir)?;
    let t = Trajectory::new(like.frames(), like.channels(), like.height(), like.width(), states)?;
    write_tensor(dir.join("analysis.fdt"), &t.to_tensor())?;
    let diag = ClassicalDiagnostics { method, seed: ctx.seed, details };
    fs::write(dir.join("analysis.json"), serde_json::to_string_pretty(&diag)?)?;
    rec.output(format!("{ASSIM}/analysis.fdt"));
    rec.output(format!("{ASSIM}/analysis.json"));
    Ok(())
}

/// The SSM with its observation model replaced by the configured operator and noise.
fn observed_ssm(ctx: &Context, obs: &ObservationSet) -> CliResult<LinearSsm> {
    let s = ctx.ssm()?;
    let m = obs.operator.output_len();
    let r = Mat::identity(m, m) * obs.sigma_y.powi(2);
    Ok(LinearSsm::new(s.a.clone(), s.q.clone(), obs.operator.to_matrix(), r, s.mu0.clone(), s.p0.clone())?)
}

fn ensemble_init(ctx: &Context, rec: &mut Recorder, members: usize, n: usize) -> CliResult<Mat> {
    let mut rng = RngStream::new(ctx.seed, ENSEMBLE_INIT_STREAM);
    let mut ens = Mat::zeros(n, members);
    match ctx.cfg.dataset()? {
        DatasetSpec::Ssm { .. } => {
            let ssm = ctx.ssm()?;
            for j in 0..members {
                ens.set_column(j, &ssm.sample_initial(&mut rng));
            }
        }
        DatasetSpec::Ns { trajectories, .. } => {
            // members start from snapshots of the other trajectories
            let truth = ctx.cfg.observed_trajectory();
            let others: Vec<usize> = (0..*trajectories).filter(|&i| i != truth).collect();
            if others.is_empty() {
                return Err(CliError::incompatible("ensemble methods on ns", "a dataset with a single trajectory"));
            }
            let pool: Vec<Trajectory> = others.iter().map(|&i| ctx.trajectory(rec, i)).collect::<CliResult<_>>()?;
            let snaps: Vec<&[f64]> = pool.iter().flat_map(|t| (0..t.frames()).map(move |f| t.frame(f))).collect();
            for j in 0..members {
                ens.set_column(j, &Vector::from_column_slice(snaps[rng.int_inclusive(0, snaps.len() - 1)]));
            }
        }
    }
    Ok(ens)
}

fn run_ensemble(ctx: &Context, rec: &mut Recorder, obs: &ObservationSet, cfg: &EnsembleConfig, members: usize) -> CliResult<unida::classical::EnsembleOutput> {
    let n = obs.operator.input_len();
    let ens0 = ensemble_init(ctx, rec, members, n)?;
    let r = Mat::identity(obs.operator.output_len(), obs.operator.output_len()) * obs.sigma_y.powi(2);
    let mut rng = RngStream::new(ctx.seed, ASSIM_STREAM);
    match ctx.cfg.dataset()? {
        DatasetSpec::Ssm { .. } => {
            let ssm = ctx.ssm()?;
            let qs = psd_sqrt(&ssm.q);
            let prop = |_: usize, _: usize, x: &mut [f64], r: &mut RngStream| -> unida::Result<()> {
                let v = &ssm.a * Vector::from_column_slice(x) + &qs * Vector::from_vec(r.normal_vec(x.len()));
                x.copy_from_slice(v.as_slice());
                Ok(())
            };
            Ok(enks_run(ens0, &obs.values, &obs.operator, &r, cfg, &prop, &mut rng)?)
        }
        ds @ DatasetSpec::Ns { output_grid, .. } => {
            if output_grid.is_some() {
                return Err(CliError::incompatible("ensemble methods", "dataset.output_grid (members must live on the solver grid)"));
            }
            let ns = ds.ns_config(ctx.seed).expect("ns dataset");
            let per = ns.steps_per_store()?;
            let solver = NsSolver::new(ns)?;
            let prop = |_: usize, f: usize, x: &mut [f64], r: &mut RngStream| -> unida::Result<()> {
                let mut s = solver.to_spectral(x)?;
                solver.advance(&mut s, per, r, f * per)?;
                x.copy_from_slice(&solver.to_physical(&s));
                Ok(())
            };
            Ok(enks_run(ens0, &obs.values, &obs.operator, &r, cfg, &prop, &mut rng)?)
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelCard {
    window: usize,
    dim: usize,
    space: ModelSpace,
    affine_stem: String,
}

fn load_trained(ctx: &Context, rec: &mut Recorder) -> CliResult<(AffineDenoiser, ModelSpace)> {
    let card_path = ctx.require(rec, &format!("{MODEL}/model.json"))?;
    let card: ModelCard = serde_json::from_str(&fs::read_to_string(card_path)?)?;
    let train = ctx.cfg.train.as_ref().ok_or_else(|| CliError::config("config has no train section"))?;
    let sched = NoiseSchedule::cosine(train.base_steps, train.sampling_steps)?;
    for suffix in [".json", "_theta.fdt", "_bias.fdt"] {
        let rel = format!("{MODEL}/{}{suffix}", card.affine_stem);
        if ctx.path(&rel).is_file() {
            rec.input(rel);
        }
    }
    let den = AffineDenoiser::load(ctx.path(MODEL), &card.affine_stem, sched)?;
    Ok((den, card.space))
}

fn analytic(ctx: &Context, window: Option<usize>, steps: usize) -> CliResult<GaussianDenoiser> {
    let ssm = ctx.ssm()?;
    let k = window.unwrap_or(ctx.cfg.dataset()?.frames());
    Ok(GaussianDenoiser::new(ssm.trajectory_prior(k)?, NoiseSchedule::cosine(1000, steps)?, true))
}

pub fn assimilate(ctx: &Context) -> CliResult<PathBuf> {
    let mut rec = Recorder::new(&ctx.out);
    let method = ctx.cfg.method.clone().ok_or_else(|| CliError::config("config has no method section"))?;
    let truth = ctx.trajectory(&mut rec, ctx.cfg.observed_trajectory())?;
    let obs = ctx.observations(&mut rec)?;
    if obs.frames() != truth.frames() {
        return Err(CliError::incompatible(format!("observations over {} frames", obs.frames()), format!("trajectory of {}", truth.frames())));
    }
    let name = method.name();
    match method {
        MethodSpec::Kf => {
            let out = kalman_filter(&observed_ssm(ctx, &obs)?, &obs.values)?;
            write_analysis(ctx, &mut rec, &truth, out.analysis.mean_rows().concat(), name, marginal_vars(&out.analysis.covs))?;
        }
        MethodSpec::Rts => {
            let out = rts_smoother(&observed_ssm(ctx, &obs)?, &obs.values)?;
            write_analysis(ctx, &mut rec, &truth, out.mean_rows().concat(), name, marginal_vars(&out.covs))?;
        }
        MethodSpec::Enkf { members, inflation, localization } | MethodSpec::Enks { members, inflation, localization, lag: _ } => {
            let lag = if let MethodSpec::Enks { lag, .. } = method { lag } else { 0 };
            let cfg = EnsembleConfig { inflation, localization, lag };
            let out = run_ensemble(ctx, &mut rec, &obs, &cfg, members)?;
            let details = serde_json::json!({
                "spreads": out.spreads,
                "gain_norms": out.gain_norms,
                "warnings": out.warnings,
            });
            write_analysis(ctx, &mut rec, &truth, out.means.concat(), name, details)?;
        }
        MethodSpec::Var3d { cvt } => {
            let out = var3d(&obs.operator, &obs.values, obs.sigma_y, &cvt, truth.channels(), truth.height(), truth.width(), &[])?;
            let logs: Vec<Vec<_>> = out.passes.iter().map(|p| p.iter().map(|f| &f.optimizer).collect()).collect();
            write_analysis(ctx, &mut rec, &truth, out.analyses.concat(), name, logs)?;
        }
        MethodSpec::Var4d { window, sigma_b, cg_tol, cg_max_iter } => {
            let ssm = ctx.ssm()?;
            let mut cfg = Var4dConfig { window, sigma_b, sigma_y: obs.sigma_y, cg_tol: 1e-12, cg_max_iter: 2000 };
            if let Some(t) = cg_tol {
                cfg.cg_tol = t;
            }
            if let Some(m) = cg_max_iter {
                cfg.cg_max_iter = m;
            }
            let out = var4d_linear(&ssm.a, &obs.operator, &obs.values, &cfg)?;
            write_analysis(ctx, &mut rec, &truth, out.states.concat(), name, &out.windows)?;
        }
        MethodSpec::Forcingdas { u, gamma, zeta, ddim_eta, denoiser, context, window, sampling_steps } => {
            let (den, space): (Box<dyn Denoiser>, ModelSpace) = match denoiser {
                DenoiserRef::Analytic => (Box::new(analytic(ctx, window, sampling_steps)?), ModelSpace::identity(truth.frame_len())),
                DenoiserRef::Trained => {
                    let (d, s) = load_trained(ctx, &mut rec)?;
                    (Box::new(d), s)
                }
            };
            let mobs = space.observations(&obs)?;
            let ctx_frames = space.encode_frames(&truth.data()[..context.min(truth.frames()) * truth.frame_len()])?;
            let g = GuidanceConfig { zeta, gamma, sigma_y: mobs.sigma_y, ddim_eta };
            let mut rng = RngStream::new(ctx.seed, ASSIM_STREAM);
            let res = assimilate_sliding(den.as_ref(), Some(&mobs), truth.frames(), u, &g, &ctx_frames, &mut rng)?;
            let states = space.decode_frames(&res.states)?;
            let details = serde_json::json!({
                "u": u,
                "guidance": g,
                "context": context,
                "loss_curve": res.loss_curve(),
                "active_set_sizes": res.diagnostics.iter().map(|d| d.active.len()).collect::<Vec<_>>(),
            });
            write_analysis(ctx, &mut rec, &truth, states, name, details)?;
        }
    }
    ctx.finish(rec, "assimilate")
}

fn marginal_vars(covs: &[Mat]) -> Vec<Vec<f64>> {
    covs.iter().map(|c| c.diagonal().iter().copied().collect()).collect()
}

pub fn train(ctx: &Context) -> CliResult<PathBuf> {
    let mut rec = Recorder::new(&ctx.out);
    let spec = ctx.cfg.train.clone().ok_or_else(|| CliError::config("config has no train section"))?;
    let ds = ctx.cfg.dataset()?;
    let ids = match &spec.trajectories {
        Some(v) => v.clone(),
        None => {
            let truth = ctx.cfg.observed_trajectory();
            let v: Vec<usize> = (0..ds.trajectories()).filter(|&i| i != truth || ds.trajectories() == 1).collect();
            v
        }
    };
    if let Some(&bad) = ids.iter().find(|&&i| i >= ds.trajectories()) {
        return Err(CliError::config(format!("train.trajectories names {bad}, dataset has {}", ds.trajectories())));
    }
    let trajs: Vec<Trajectory> = ids.iter().map(|&i| ctx.trajectory(&mut rec, i)).collect::<CliResult<_>>()?;
    let frame_len = trajs[0].frame_len();
    let normalization = match ds {
        DatasetSpec::Ssm { .. } => Normalization::Identity,
        DatasetSpec::Ns { .. } => {
            let p = ctx.require(&mut rec, &format!("{DATA}/dataset.json"))?;
            let r: RangeOnly = serde_json::from_str(&fs::read_to_string(p)?)?;
            Normalization::MinMax { min: r.min, max: r.max }
        }
    };
    let mut space = ModelSpace { normalization, pca: None, frame_len };
    if let Some(dim) = spec.pca_dim {
        let snaps: Vec<Vec<f64>> = trajs
            .iter()
            .flat_map(|t| (0..t.frames()).map(|f| space.encode(t.frame(f))).collect::<Vec<_>>())
            .collect::<CliResult<_>>()?;
        space.pca = Some(Pca::fit(&snaps, dim)?);
    }
    let dim = space.dim();
    let coded: Vec<Trajectory> = trajs
        .iter()
        .map(|t| Ok(Trajectory::from_vectors(t.frames(), dim, space.encode_frames(t.data())?)?))
        .collect::<CliResult<_>>()?;
    let sched = NoiseSchedule::cosine(spec.base_steps, spec.sampling_steps)?;
    let bins = spec.bins.unwrap_or(spec.sampling_steps + 1);
    let mut model = AffineDenoiser::new(spec.window, dim, spec.causal, bins, sched)?;
    let data = stack_windows(&coded, spec.window, spec.stride)?;
    if data.is_empty() {
        return Err(CliError::config(format!("no training windows of {} frames in the dataset", spec.window)));
    }
    let report = train_denoiser(&mut model, &data, &spec.optimizer, &mut RngStream::new(ctx.seed, TRAIN_STREAM))?;
    let dir = ctx.path(MODEL);
    let manifest = model.save(&dir, "affine")?;
    let card = ModelCard { window: spec.window, dim, space, affine_stem: "affine".into() };
    fs::write(dir.join("model.json"), serde_json::to_string(&card)?)?;
    fs::write(dir.join("train_report.json"), serde_json::to_string_pretty(&report)?)?;
    rec.outputs_in(MODEL, &["affine.json".into(), manifest.theta_file, manifest.bias_file, "model.json".into(), "train_report.json".into()]);
    ctx.finish(rec, "train")
}

#[derive(Debug, Serialize)]
struct ForecastSidecar {
    trajectory: usize,
    start: usize,
    context: usize,
    horizon: usize,
    members: usize,
    ddim_eta: f64,
    seed: u64,
}

pub fn cmd_forecast(ctx: &Context) -> CliResult<PathBuf> {
    let mut rec = Recorder::new(&ctx.out);
    let spec = ctx.cfg.forecast.clone().ok_or_else(|| CliError::config("config has no forecast section"))?;
    let tid = spec.trajectory.unwrap_or(ctx.cfg.observed_trajectory());
    let traj = ctx.trajectory(&mut rec, tid)?;
    if spec.context == 0 || spec.start + spec.context > traj.frames() {
        return Err(CliError::config(format!(
            "forecast context {} from frame {} does not fit a trajectory of {} frames",
            spec.context,
            spec.start,
            traj.frames()
        )));
    }
    let (den, space): (Box<dyn Denoiser>, ModelSpace) = match spec.denoiser {
        DenoiserRef::Analytic => (Box::new(analytic(ctx, spec.window, spec.sampling_steps)?), ModelSpace::identity(traj.frame_len())),
        DenoiserRef::Trained => {
            let (d, s) = load_trained(ctx, &mut rec)?;
            (Box::new(d), s)
        }
    };
    let f = traj.frame_len();
    let ctx_data = space.encode_frames(&traj.data()[spec.start * f..(spec.start + spec.context) * f])?;
    let rng = RngStream::new(ctx.seed, FORECAST_STREAM);
    let members = forecast(den.as_ref(), &ctx_data, spec.horizon, spec.members, spec.ddim_eta, &rng)?;
    let mut data = Vec::with_capacity(spec.members * (spec.context + spec.horizon) * f);
    for m in &members {
        data.extend(space.decode_frames(m)?);
    }
    let dims = vec![spec.members, spec.context + spec.horizon, traj.channels(), traj.height(), traj.width()];
    let dir = ctx.path(FORECAST);
    fs::create_dir_all(&dir)?;
    write_tensor(dir.join("ensemble.fdt"), &Tensor::new(dims, data)?)?;
    let side = ForecastSidecar {
        trajectory: tid,
        start: spec.start,
        context: spec.context,
        horizon: spec.horizon,
        members: spec.members,
        ddim_eta: spec.ddim_eta,
        seed: ctx.seed,
    };
    fs::write(dir.join("forecast.json"), serde_json::to_string_pretty(&side)?)?;
    rec.outputs_in(FORECAST, &["ensemble.fdt".into(), "forecast.json".into()]);
    ctx.finish(rec, "forecast")
}

#[derive(Debug, Deserialize)]
struct ForecastMeta {
    trajectory: usize,
    start: usize,
    context: usize,
}

pub fn evaluate(ctx: &Context) -> CliResult<PathBuf> {
    let mut rec = Recorder::new(&ctx.out);
    let tid = ctx.cfg.observed_trajectory();
    let truth = ctx.trajectory(&mut rec, tid)?;
    let (lw, weighted) = match ctx.cfg.evaluate.latitudes {
        LatitudeGrid::Uniform => (LatWeights::uniform(truth.height()), false),
        LatitudeGrid::Equiangular => (LatWeights::equiangular(truth.height())?, true),
    };
    let mut report = MetricReport::default();
    let analysis = ctx.path(&format!("{ASSIM}/analysis.fdt"));
    let ensemble = ctx.path(&format!("{FORECAST}/ensemble.fdt"));
    if !analysis.is_file() && !ensemble.is_file() {
        return Err(CliError::missing(format!("{} or {}", analysis.display(), ensemble.display())));
    }
    if analysis.is_file() {
        rec.input(format!("{ASSIM}/analysis.fdt"));
        let pred = Trajectory::from_tensor(&read_tensor(&analysis)?)?;
        let lw = weighted.then_some(&lw);
        score_analysis(&mut report, tid, &pred, &truth, lw, ctx.cfg.evaluate.csi_thresholds.as_deref())?;
    }
    if ensemble.is_file() {
        rec.input(format!("{FORECAST}/ensemble.fdt"));
        let meta_path = ctx.require(&mut rec, &format!("{FORECAST}/forecast.json"))?;
        let meta: ForecastMeta = serde_json::from_str(&fs::read_to_string(meta_path)?)?;
        let truth = if meta.trajectory == tid { truth.clone() } else { ctx.trajectory(&mut rec, meta.trajectory)? };
        score_forecast(&mut report, &meta, &read_tensor(&ensemble)?, &truth)?;
    }
    let files = report.write(ctx.path(EVAL), "metrics")?;
    rec.outputs_in(EVAL, &files);
    ctx.finish(rec, "evaluate")
}

fn score_analysis(
    report: &mut MetricReport,
    tid: usize,
    pred: &Trajectory,
    truth: &Trajectory,
    weights: Option<&LatWeights>,
    thresholds: Option<&[f64]>,
) -> CliResult<()> {
    if !pred.same_shape(truth) {
        return Err(CliError::incompatible("analysis shape", "truth trajectory shape"));
    }
    let uniform = LatWeights::uniform(truth.height());
    let lw = weights.unwrap_or(&uniform);
    let scores = nrmse(pred, truth, weights)?;
    for (f, v) in scores.per_frame.iter().enumerate() {
        if let Some(v) = v {
            report.push(tid, Some(f), "nrmse", None, *v);
        }
    }
    for f in 0..truth.frames() {
        let (p, t) = (pred.frame(f), truth.frame(f));
        let mse = p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64;
        report.push(tid, Some(f), "rmse", None, mse.sqrt());
    }
    report.push(tid, None, "bias", None, bias(pred, truth, lw)?);
    if let Some(a) = acc(pred, truth, &vec![0.0; truth.data().len()], lw)? {
        report.push(tid, None, "acc", None, a);
    }
    let n = truth.height();
    if truth.channels() == 1 && n == truth.width() && n >= 4 {
        let bands = SpectrumBands::default();
        for f in 0..truth.frames() {
            for (band, v) in spectrum_error(pred.frame(f), truth.frame(f), n, &bands)? {
                if v.is_finite() {
                    report.push(tid, Some(f), "spectrum_error", Some(band), v);
                }
            }
        }
    }
    if let Some(th) = thresholds {
        for f in 0..truth.frames() {
            let s = csi(pred.frame(f), truth.frame(f), th)?;
            for &(tau, v) in &s.per_threshold {
                report.push(tid, Some(f), "csi", Some(format!("{tau}")), v);
            }
        }
    }
    Ok(())
}

fn score_forecast(report: &mut MetricReport, meta: &ForecastMeta, ens: &Tensor, truth: &Trajectory) -> CliResult<()> {
    let d = ens.dims();
    if d.len() != 5 || d[2] * d[3] * d[4] != truth.frame_len() {
        return Err(CliError::incompatible(format!("forecast ensemble dims {d:?}"), "truth trajectory"));
    }
    let (m, frames, f) = (d[0], d[1], truth.frame_len());
    for k in meta.context..frames {
        let tf = meta.start + k;
        if tf >= truth.frames() {
            break;
        }
        let members: Vec<Vec<f64>> =
            (0..m).map(|i| ens.data()[(i * frames + k) * f..(i * frames + k + 1) * f].to_vec()).collect();
        report.push(meta.trajectory, Some(tf), "crps", None, crps(&members, truth.frame(tf), None)?);
    }
    Ok(())
}

pub fn schedule_dump(ctx: &Context) -> CliResult<PathBuf> {
    let mut rec = Recorder::new(&ctx.out);
    let s = ctx.cfg.schedule.as_ref().ok_or_else(|| CliError::config("config has no schedule section"))?;
    let m = build_schedule(s.frames, s.steps, s.u)?;
    fs::create_dir_all(&ctx.out)?;
    fs::write(ctx.path("schedule.csv"), m.to_csv())?;
    rec.output("schedule.csv");
    ctx.finish(rec, "schedule-dump")
}
