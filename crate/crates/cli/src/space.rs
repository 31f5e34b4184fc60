//! Mapping between stored frames and the coordinates a trained model works in.

use serde::{Deserialize, Serialize};

use unida::observe::{Normalization, ObsOperator, ObservationSet};
use unida::pca::Pca;

use crate::error::CliResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpace {
    pub normalization: Normalization,
    pub pca: Option<Pca>,
    pub frame_len: usize,
}

impl ModelSpace {
    pub fn identity(frame_len: usize) -> Self {
        Self { normalization: Normalization::Identity, pca: None, frame_len }
    }

    pub fn dim(&self) -> usize {
        self.pca.as_ref().map_or(self.frame_len, Pca::dim)
    }

    fn affine(&self) -> (f64, f64) {
        match self.normalization {
            Normalization::Identity => (0.0, 1.0),
            _ => self.normalization.affine(0),
        }
    }

    pub fn encode(&self, frame: &[f64]) -> CliResult<Vec<f64>> {
        let (a, b) = self.affine();
        let x: Vec<f64> = frame.iter().map(|v| (v - a) / b).collect();
        Ok(match &self.pca {
            Some(p) => p.encode(&x)?,
            None => x,
        })
    }

    pub fn decode(&self, z: &[f64]) -> CliResult<Vec<f64>> {
        let x = match &self.pca {
            Some(p) => p.decode(z)?,
            None => z.to_vec(),
        };
        let (a, b) = self.affine();
        Ok(x.iter().map(|v| v * b + a).collect())
    }

    pub fn encode_frames(&self, data: &[f64]) -> CliResult<Vec<f64>> {
        Ok(data.chunks(self.frame_len).map(|f| self.encode(f)).collect::<CliResult<Vec<_>>>()?.concat())
    }

    pub fn decode_frames(&self, data: &[f64]) -> CliResult<Vec<f64>> {
        Ok(data.chunks(self.dim()).map(|z| self.decode(z)).collect::<CliResult<Vec<_>>>()?.concat())
    }

    /// Observations of stored frames rewritten as observations of model coordinates.
    pub fn observations(&self, obs: &ObservationSet) -> CliResult<ObservationSet> {
        let (a, b) = self.affine();
        let shift = obs.operator.apply(&vec![a; self.frame_len])?;
        let (op, offset) = match &self.pca {
            Some(p) => {
                let (h, off) = p.pull_back(&obs.operator)?;
                (ObsOperator::linear(h), off)
            }
            None => (obs.operator.clone(), vec![0.0; obs.operator.output_len()]),
        };
        let values = obs
            .values
            .iter()
            .map(|y| {
                y.as_ref().map(|y| y.iter().zip(&shift).zip(&offset).map(|((v, s), o)| (v - s) / b - o).collect())
            })
            .collect();
        Ok(ObservationSet::new(op, obs.sigma_y / b, values)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use unida::rng::RngStream;

    #[test]
    fn observations_agree_in_both_spaces() {
        let mut rng = RngStream::new(3, 0);
        let samples: Vec<Vec<f64>> = (0..20).map(|_| rng.normal_vec(16).iter().map(|v| 5.0 + 2.0 * v).collect()).collect();
        let pca = Pca::fit(&samples, 6).unwrap();
        let space = ModelSpace { normalization: Normalization::MinMax { min: -1.0, max: 11.0 }, pca: None, frame_len: 16 };
        let z = rng.normal_vec(16);
        let x = space.decode(&z).unwrap();
        let op = ObsOperator::from_pixels(0.25, 1, 4, 4, vec![1, 6, 11, 12]).unwrap();
        let obs = ObservationSet::new(op.clone(), 0.3, vec![Some(op.apply(&x).unwrap())]).unwrap();
        let m = space.observations(&obs).unwrap();
        let direct = m.operator.apply(&z).unwrap();
        assert!(direct.iter().zip(m.get(0).unwrap()).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!((m.sigma_y - 0.025).abs() < 1e-15);

        let space = ModelSpace { pca: Some(pca), ..space };
        let x = space.decode(&rng.normal_vec(6)).unwrap();
        let obs = ObservationSet::new(op.clone(), 0.3, vec![Some(op.apply(&x).unwrap())]).unwrap();
        let m = space.observations(&obs).unwrap();
        let via = m.operator.apply(&space.encode(&x).unwrap()).unwrap();
        assert!(via.iter().zip(m.get(0).unwrap()).all(|(a, b)| (a - b).abs() < 1e-9));
    }
}
