use serde::Serialize;

use crate::dynamics::LinearSsm;
use crate::error::{shape_err, Error, Result};
use crate::linalg::{Mat, Vector};

/// Per-frame Gaussian marginals.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianMarginals {
    #[serde(serialize_with = "ser_vectors")]
    pub means: Vec<Vector>,
    #[serde(skip)]
    pub covs: Vec<Mat>,
}

fn ser_vectors<S: serde::Serializer>(v: &[Vector], s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::ser::SerializeSeq;
    let mut seq = s.serialize_seq(Some(v.len()))?;
    for x in v {
        seq.serialize_element(x.as_slice())?;
    }
    seq.end()
}

impl GaussianMarginals {
    pub fn mean_rows(&self) -> Vec<Vec<f64>> {
        self.means.iter().map(|m| m.as_slice().to_vec()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub analysis: GaussianMarginals,
    pub forecast: GaussianMarginals,
}

fn check_obs(ssm: &LinearSsm, obs: &[Option<Vec<f64>>]) -> Result<()> {
    if obs.is_empty() {
        return Err(Error::Validation("need at least one frame".into()));
    }
    if let Some(k) = obs.iter().position(|y| y.as_ref().is_some_and(|y| y.len() != ssm.obs_dim())) {
        return shape_err(format!("observation at frame {k} does not have {} values", ssm.obs_dim()));
    }
    Ok(())
}

/// Exact filtering recursions; unobserved frames skip the analysis.
pub fn kalman_filter(ssm: &LinearSsm, obs: &[Option<Vec<f64>>]) -> Result<FilterOutput> {
    check_obs(ssm, obs)?;
    let d = ssm.state_dim();
    let eye = Mat::identity(d, d);
    let mut out = FilterOutput {
        analysis: GaussianMarginals { means: vec![], covs: vec![] },
        forecast: GaussianMarginals { means: vec![], covs: vec![] },
    };
    let (mut m, mut p) = (ssm.mu0.clone(), ssm.p0.clone());
    for (k, y) in obs.iter().enumerate() {
        if k > 0 {
            m = &ssm.a * &m;
            p = &ssm.a * &p * ssm.a.transpose() + &ssm.q;
            p = (&p + p.transpose()) * 0.5;
        }
        out.forecast.means.push(m.clone());
        out.forecast.covs.push(p.clone());
        if let Some(y) = y {
            let s = &ssm.h * &p * ssm.h.transpose() + &ssm.r;
            let pht = &p * ssm.h.transpose();
            let gain = s
                .clone()
                .cholesky()
                .map(|c| c.solve(&pht.transpose()).transpose())
                .ok_or_else(|| Error::Numerical { frame: k, detail: "innovation covariance is singular".into() })?;
            let innov = Vector::from_column_slice(y) - &ssm.h * &m;
            m += &gain * innov;
            // Joseph form keeps P symmetric PSD
            let ikh = &eye - &gain * &ssm.h;
            p = &ikh * &p * ikh.transpose() + &gain * &ssm.r * gain.transpose();
            p = (&p + p.transpose()) * 0.5;
        }
        out.analysis.means.push(m.clone());
        out.analysis.covs.push(p.clone());
    }
    Ok(out)
}

/// Rauch–Tung–Striebel backward pass over [`kalman_filter`].
pub fn rts_smoother(ssm: &LinearSsm, obs: &[Option<Vec<f64>>]) -> Result<GaussianMarginals> {
    let f = kalman_filter(ssm, obs)?;
    let n = obs.len();
    let mut means = f.analysis.means.clone();
    let mut covs = f.analysis.covs.clone();
    for k in (0..n - 1).rev() {
        let pf = &f.forecast.covs[k + 1];
        let pa = &f.analysis.covs[k];
        let cross = pa * ssm.a.transpose();
        let j = pf
            .clone()
            .cholesky()
            .map(|c| c.solve(&cross.transpose()).transpose())
            .or_else(|| pf.clone().lu().solve(&cross.transpose()).map(|s| s.transpose()))
            .ok_or_else(|| Error::Numerical { frame: k + 1, detail: "forecast covariance is singular".into() })?;
        let dm = &means[k + 1] - &f.forecast.means[k + 1];
        means[k] = &f.analysis.means[k] + &j * dm;
        let dp = &covs[k + 1] - pf;
        let p = pa + &j * dp * j.transpose();
        covs[k] = (&p + p.transpose()) * 0.5;
    }
    Ok(GaussianMarginals { means, covs })
}
