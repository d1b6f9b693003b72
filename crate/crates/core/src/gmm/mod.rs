//! Diagonal-covariance Gaussian mixtures: EM training, MAP adaptation of a
//! universal background model, and likelihood scoring.

mod em;
mod io;

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::exec::Exec;
use crate::features::{FeatureError, FeatureMatrix, Fingerprint};

pub use em::{fit_em, map_adapt, map_adapt_with, EmConfig, EmTrace, Init, SuffStats};
pub use io::{GmmDocument, GMM_FORMAT};

/// Frames per work unit when accumulating statistics in parallel.
pub(crate) const CHUNK_FRAMES: usize = 256;

#[derive(Debug, Error)]
pub enum GmmError {
    #[error("too few frames: {frames} frames for {components} components")]
    TooFewFrames { frames: usize, components: usize },
    #[error("no frames to score")]
    EmptyFeatures,
    #[error("invalid EM configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("model format: {0}")]
    Format(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Diagonal-covariance GMM over a fingerprinted feature space.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
    dim: usize,
    fingerprint: Fingerprint,
    // ln w_k - 0.5 (D ln 2pi + sum_d ln var_kd)
    log_consts: Vec<f64>,
    inv_vars: Vec<f64>,
}

impl Gmm {
    /// Builds a model from flat K x D parameter arrays.
    pub fn from_parts(
        weights: Vec<f64>,
        means: Vec<f64>,
        variances: Vec<f64>,
        dim: usize,
        fingerprint: Fingerprint,
    ) -> Result<Self, GmmError> {
        let k = weights.len();
        if k == 0 || dim == 0 {
            return Err(GmmError::InvalidModel("need K >= 1 and D >= 1".into()));
        }
        if means.len() != k * dim || variances.len() != k * dim {
            return Err(GmmError::InvalidModel("parameter shapes disagree".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(GmmError::InvalidModel("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(GmmError::InvalidModel(format!("weights sum to {total}")));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(GmmError::InvalidModel("non-finite mean".into()));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(GmmError::InvalidModel("variances must be finite and positive".into()));
        }
        let half_log_2pi = 0.5 * dim as f64 * (2.0 * PI).ln();
        let log_consts = (0..k)
            .map(|c| {
                let log_det: f64 = variances[c * dim..(c + 1) * dim].iter().map(|v| v.ln()).sum();
                weights[c].ln() - half_log_2pi - 0.5 * log_det
            })
            .collect();
        let inv_vars = variances.iter().map(|v| 1.0 / v).collect();
        Ok(Self {
            weights,
            means,
            variances,
            dim,
            fingerprint,
            log_consts,
            inv_vars,
        })
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.dim..(k + 1) * self.dim]
    }

    pub fn variance(&self, k: usize) -> &[f64] {
        &self.variances[k * self.dim..(k + 1) * self.dim]
    }

    pub fn means_flat(&self) -> &[f64] {
        &self.means
    }

    pub fn variances_flat(&self) -> &[f64] {
        &self.variances
    }

    /// Writes ln(w_k N(x | mu_k, var_k)) for every component into `out`.
    pub fn component_log_densities(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim;
        for (k, slot) in out.iter_mut().enumerate() {
            let mu = &self.means[k * d..(k + 1) * d];
            let iv = &self.inv_vars[k * d..(k + 1) * d];
            let mut q = 0.0;
            for i in 0..d {
                let diff = x[i] - mu[i];
                q += diff * diff * iv[i];
            }
            *slot = self.log_consts[k] - 0.5 * q;
        }
    }

    /// ln p(x) for one frame.
    pub fn frame_log_likelihood(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        self.component_log_densities(x, scratch);
        log_sum_exp(scratch)
    }

    /// Mean per-frame log-likelihood of `features`.
    pub fn log_likelihood(&self, features: &FeatureMatrix) -> Result<f64, GmmError> {
        self.log_likelihood_with(features, Exec::Sequential)
    }

    pub fn log_likelihood_with(&self, features: &FeatureMatrix, exec: Exec) -> Result<f64, GmmError> {
        self.check_features(features)?;
        if features.is_empty() {
            return Err(GmmError::EmptyFeatures);
        }
        let k = self.num_components();
        let sums = exec.map_chunks(features.as_slice(), CHUNK_FRAMES * self.dim, |chunk| {
            let mut scratch = vec![0.0; k];
            chunk
                .chunks_exact(self.dim)
                .map(|x| self.frame_log_likelihood(x, &mut scratch))
                .sum::<f64>()
        });
        Ok(sums.iter().sum::<f64>() / features.num_frames() as f64)
    }

    /// Posterior component probabilities for one frame.
    pub fn responsibilities(&self, x: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; self.num_components()];
        self.component_log_densities(x, &mut r);
        let lse = log_sum_exp(&r);
        r.iter_mut().for_each(|v| *v = (*v - lse).exp());
        r
    }

    pub(crate) fn check_features(&self, features: &FeatureMatrix) -> Result<(), GmmError> {
        self.fingerprint.ensure_eq(features.fingerprint())?;
        if features.dim() != self.dim {
            return Err(GmmError::InvalidModel(format!(
                "feature dimension {} does not match model dimension {}",
                features.dim(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Draws `n` frames from the mixture with a seeded generator.
    pub fn sample(&self, n: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * self.dim);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = self.num_components() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            for d in 0..self.dim {
                let z: f64 = rng.sample(StandardNormal);
                data.push(self.mean(k)[d] + z * self.variance(k)[d].sqrt());
            }
        }
        FeatureMatrix::from_flat(data, self.dim, self.fingerprint.clone())
            .expect("finite samples from a valid model")
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn fp() -> Fingerprint {
        Fingerprint { framing: "test".into(), content: "x".into() }
    }

    fn unit() -> Gmm {
        Gmm::from_parts(vec![1.0], vec![0.0], vec![1.0], 1, fp()).unwrap()
    }

    #[test]
    fn closed_form_gaussian() {
        let g = unit();
        let x0 = FeatureMatrix::from_flat(vec![0.0], 1, fp()).unwrap();
        let x1 = FeatureMatrix::from_flat(vec![1.0], 1, fp()).unwrap();
        let expected = (1.0 / (2.0 * PI).sqrt()).ln();
        assert!((g.log_likelihood(&x0).unwrap() - expected).abs() < 1e-12);
        assert!((expected + 0.91894).abs() < 1e-5);
        assert!((g.log_likelihood(&x1).unwrap() - (expected - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn duplicated_frames_keep_mean() {
        let g = Gmm::from_parts(vec![0.3, 0.7], vec![0.0, 1.0, 2.0, -1.0], vec![1.0, 2.0, 0.5, 1.5], 2, fp()).unwrap();
        let x = FeatureMatrix::from_flat(vec![0.1, 0.2, 1.5, -0.3, 3.0, 0.0], 2, fp()).unwrap();
        let dup = FeatureMatrix::concat([&x, &x]).unwrap();
        let a = g.log_likelihood(&x).unwrap();
        let b = g.log_likelihood(&dup).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn fingerprint_and_shape_checks() {
        let g = unit();
        let other = Fingerprint { framing: "other".into(), content: "x".into() };
        let x = FeatureMatrix::from_flat(vec![0.0], 1, other).unwrap();
        assert!(matches!(g.log_likelihood(&x), Err(GmmError::Feature(FeatureError::FingerprintMismatch { .. }))));
        let empty = FeatureMatrix::from_flat(vec![], 1, fp()).unwrap();
        assert!(matches!(g.log_likelihood(&empty), Err(GmmError::EmptyFeatures)));
        assert!(Gmm::from_parts(vec![0.5, 0.4], vec![0.0; 2], vec![1.0; 2], 1, fp()).is_err());
        assert!(Gmm::from_parts(vec![1.0], vec![0.0], vec![0.0], 1, fp()).is_err());
    }

    #[test]
    fn responsibilities_normalized() {
        let g = Gmm::from_parts(vec![0.5, 0.5], vec![-1.0, 1.0], vec![1.0, 1.0], 1, fp()).unwrap();
        let r = g.responsibilities(&[0.0]);
        assert!((r[0] - 0.5).abs() < 1e-12);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // far tail stays finite
        let r = g.responsibilities(&[1e6]);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}
