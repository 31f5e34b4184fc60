//! Whitened principal-component coordinates for high-dimensional frames.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::Mat;
use crate::observe::ObsOperator;

/// `x ≈ μ + U diag(s) z` with orthonormal `U` and unit-variance `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    mean: Vec<f64>,
    /// `n x d`, column-major.
    components: Vec<f64>,
    scales: Vec<f64>,
    explained: f64,
}

impl Pca {
    /// Fit from samples through the `N x N` Gram matrix.
    pub fn fit(samples: &[Vec<f64>], dim: usize) -> Result<Self> {
        let ns = samples.len();
        if ns < 2 {
            return Err(Error::Validation("pca needs at least two samples".into()));
        }
        let n = samples[0].len();
        if samples.iter().any(|s| s.len() != n) {
            return shape_err("pca samples differ in length");
        }
        if dim == 0 || dim >= ns.min(n + 1) {
            return Err(Error::Validation(format!("pca dimension {dim} must be in 1..{}", ns.min(n + 1))));
        }
        let mut mean = vec![0.0; n];
        for s in samples {
            mean.iter_mut().zip(s).for_each(|(m, v)| *m += v / ns as f64);
        }
        let x = Mat::from_fn(ns, n, |i, j| samples[i][j] - mean[j]);
        let gram = &x * x.transpose();
        let eig = gram.symmetric_eigen();
        let mut order: Vec<usize> = (0..ns).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        let mut components = Vec::with_capacity(n * dim);
        let mut scales = Vec::with_capacity(dim);
        let mut kept = 0.0;
        for &i in order.iter().take(dim) {
            let lam = eig.eigenvalues[i];
            if !(lam > 1e-12 * total) {
                return Err(Error::Singular(format!("component {} has no variance", scales.len())));
            }
            let u = x.transpose() * eig.eigenvectors.column(i) / lam.sqrt();
            components.extend(u.iter());
            scales.push((lam / (ns - 1) as f64).sqrt());
            kept += lam;
        }
        Ok(Self { mean, components, scales, explained: kept / total })
    }

    pub fn input_len(&self) -> usize {
        self.mean.len()
    }

    pub fn dim(&self) -> usize {
        self.scales.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    /// Fraction of training variance retained.
    pub fn explained(&self) -> f64 {
        self.explained
    }

    fn column(&self, j: usize) -> &[f64] {
        let n = self.mean.len();
        &self.components[j * n..(j + 1) * n]
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return shape_err(format!("pca encode expects {} values, got {}", self.mean.len(), x.len()));
        }
        Ok((0..self.dim())
            .map(|j| {
                let dot: f64 = self.column(j).iter().zip(x.iter().zip(&self.mean)).map(|(u, (a, m))| u * (a - m)).sum();
                dot / self.scales[j]
            })
            .collect())
    }

    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return shape_err(format!("pca decode expects {} values, got {}", self.dim(), z.len()));
        }
        let mut x = self.mean.clone();
        for (j, zj) in z.iter().enumerate() {
            let c = zj * self.scales[j];
            x.iter_mut().zip(self.column(j)).for_each(|(xi, u)| *xi += c * u);
        }
        Ok(x)
    }

    /// Operator `z ↦ M U diag(s) z` and offset `M μ` so that `M x = offset + H z`.
    pub fn pull_back(&self, op: &ObsOperator) -> Result<(Mat, Vec<f64>)> {
        if op.input_len() != self.mean.len() {
            return shape_err("operator does not act on the pca input space");
        }
        let offset = op.apply(&self.mean)?;
        let mut h = Mat::zeros(op.output_len(), self.dim());
        for j in 0..self.dim() {
            let col: Vec<f64> = self.column(j).iter().map(|u| u * self.scales[j]).collect();
            h.set_column(j, &crate::linalg::Vector::from_vec(op.apply(&col)?));
        }
        Ok((h, offset))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn samples(ns: usize, n: usize, rank: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = RngStream::new(seed, 0);
        let basis: Vec<Vec<f64>> = (0..rank).map(|_| rng.normal_vec(n)).collect();
        (0..ns)
            .map(|_| {
                let mut x = vec![1.5; n];
                for (r, b) in basis.iter().enumerate() {
                    let c = rng.normal() * (rank - r) as f64;
                    x.iter_mut().zip(b).for_each(|(xi, bi)| *xi += c * bi);
                }
                x
            })
            .collect()
    }

    #[test]
    fn exact_on_low_rank_data() {
        let s = samples(40, 30, 3, 1);
        let p = Pca::fit(&s, 3).unwrap();
        assert!((p.explained() - 1.0).abs() < 1e-10);
        for x in &s {
            let back = p.decode(&p.encode(x).unwrap()).unwrap();
            assert!(back.iter().zip(x).all(|(a, b)| (a - b).abs() < 1e-9));
        }
    }

    #[test]
    fn codes_are_white() {
        let s = samples(60, 20, 5, 2);
        let p = Pca::fit(&s, 4).unwrap();
        let z: Vec<Vec<f64>> = s.iter().map(|x| p.encode(x).unwrap()).collect();
        for a in 0..4 {
            for b in 0..4 {
                let c: f64 = z.iter().map(|v| v[a] * v[b]).sum::<f64>() / 59.0;
                assert!((c - if a == b { 1.0 } else { 0.0 }).abs() < 1e-9, "{a} {b} {c}");
            }
        }
        assert!(p.scales().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn pull_back_matches_composition() {
        let s = samples(30, 16, 4, 3);
        let p = Pca::fit(&s, 4).unwrap();
        let op = ObsOperator::from_pixels(0.25, 1, 4, 4, vec![0, 5, 9, 15]).unwrap();
        let (h, off) = p.pull_back(&op).unwrap();
        let z = vec![0.3, -1.0, 0.5, 2.0];
        let direct = op.apply(&p.decode(&z).unwrap()).unwrap();
        let via = &h * crate::linalg::Vector::from_vec(z);
        for i in 0..4 {
            assert!((direct[i] - off[i] - via[i]).abs() < 1e-12);
        }
    }
}
