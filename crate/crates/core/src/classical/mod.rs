//! Classical baselines: exact Kalman recursions, ensemble filters and smoothers,
//! and variational analyses.

mod ensemble;
mod kalman;
mod lbfgs;
mod localization;
mod var;

pub use ensemble::{
    enkf_run, enks_run, ensemble_mean, ensemble_spread, inflate, EnsembleConfig, EnsembleOutput,
    Propagator, COLLAPSE_SPREAD, ENKS_BUFFER_LIMIT,
};
pub use kalman::{kalman_filter, rts_smoother, FilterOutput, GaussianMarginals};
pub use lbfgs::{lbfgs, LbfgsConfig, LbfgsResult};
pub use localization::{gaspari_cohn, GridLocalizer, LocalizationConfig};
pub use var::{
    conjugate_gradient, var3d, var3d_cost, var3d_frame, var4d_linear, CgLog, Cvt, CvtConfig,
    Var3dFrame, Var3dOutput, Var4dConfig, Var4dOutput,
};
