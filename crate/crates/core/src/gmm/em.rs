use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{log_sum_exp, Gmm, GmmError, CHUNK_FRAMES};
use crate::exec::Exec;
use crate::features::FeatureMatrix;

const KMEANS_ITERS: usize = 10;
// components whose soft count falls below this keep their previous parameters
const EMPTY_COMPONENT: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    Kmeans,
    RandomResponsibility,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmConfig {
    pub components: usize,
    pub max_iters: usize,
    /// Stop once the relative improvement of the mean log-likelihood drops
    /// below this value.
    pub tol: f64,
    /// Variance floor as a fraction of the pooled per-dimension variance.
    pub var_floor: f64,
    pub seed: u64,
    pub init: Init,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            components: 64,
            max_iters: 100,
            tol: 1e-5,
            var_floor: 1e-4,
            seed: 0,
            init: Init::Kmeans,
            exec: Exec::default(),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<(), GmmError> {
        if self.components == 0 || self.max_iters == 0 {
            return Err(GmmError::InvalidConfig("components and max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) || !(self.var_floor > 0.0) {
            return Err(GmmError::InvalidConfig("tol and var_floor must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmTrace {
    /// Mean per-frame log-likelihood before each M-step, then of the
    /// returned model.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Per-dimension variance floor that was enforced.
    pub var_floor: Vec<f64>,
}

/// Zeroth, first and second order statistics, with the first and second
/// orders taken about a per-component reference point to avoid cancellation.
#[derive(Debug, Clone)]
pub struct SuffStats {
    pub counts: Vec<f64>,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub log_likelihood: f64,
}

impl SuffStats {
    fn zeros(k: usize, d: usize) -> Self {
        Self {
            counts: vec![0.0; k],
            first: vec![0.0; k * d],
            second: vec![0.0; k * d],
            log_likelihood: 0.0,
        }
    }

    fn merge(&mut self, other: &SuffStats) {
        add_into(&mut self.counts, &other.counts);
        add_into(&mut self.first, &other.first);
        add_into(&mut self.second, &other.second);
        self.log_likelihood += other.log_likelihood;
    }
}

fn add_into(a: &mut [f64], b: &[f64]) {
    a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
}

/// E-step over all frames. Chunk boundaries are fixed so the ordered sum is
/// identical whichever execution strategy runs it.
pub(crate) fn accumulate(model: &Gmm, features: &FeatureMatrix, exec: Exec) -> SuffStats {
    let (k, d) = (model.num_components(), model.dim());
    let parts = exec.map_chunks(features.as_slice(), CHUNK_FRAMES * d, |chunk| {
        let mut stats = SuffStats::zeros(k, d);
        let mut post = vec![0.0; k];
        for x in chunk.chunks_exact(d) {
            model.component_log_densities(x, &mut post);
            let lse = log_sum_exp(&post);
            stats.log_likelihood += lse;
            for c in 0..k {
                let g = (post[c] - lse).exp();
                if g == 0.0 {
                    continue;
                }
                stats.counts[c] += g;
                let mu = model.mean(c);
                for i in 0..d {
                    let diff = x[i] - mu[i];
                    stats.first[c * d + i] += g * diff;
                    stats.second[c * d + i] += g * diff * diff;
                }
            }
        }
        stats
    });
    let mut total = SuffStats::zeros(k, d);
    for p in &parts {
        total.merge(p);
    }
    total
}

fn pooled_variance(features: &FeatureMatrix) -> (Vec<f64>, Vec<f64>) {
    let d = features.dim();
    let n = features.num_frames() as f64;
    let mut mean = vec![0.0; d];
    for r in features.rows() {
        add_into(&mut mean, r);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for r in features.rows() {
        for i in 0..d {
            var[i] += (r[i] - mean[i]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// Maximization step. `reference` holds the per-component points the
/// statistics were centred on; empty components keep their `fallback`
/// parameters.
fn maximize(
    stats: &SuffStats,
    reference: &[f64],
    fallback: &Gmm,
    floor: &[f64],
) -> Result<Gmm, GmmError> {
    let dim = fallback.dim();
    let k = stats.counts.len();
    let total: f64 = stats.counts.iter().sum();
    let mut weights = Vec::with_capacity(k);
    let mut means = vec![0.0; k * dim];
    let mut vars = vec![0.0; k * dim];
    for c in 0..k {
        let n = stats.counts[c];
        weights.push(n / total);
        for i in 0..dim {
            let j = c * dim + i;
            if n < EMPTY_COMPONENT {
                means[j] = fallback.mean(c)[i];
                vars[j] = fallback.variance(c)[i].max(floor[i]);
            } else {
                let shift = stats.first[j] / n;
                means[j] = reference[j] + shift;
                vars[j] = (stats.second[j] / n - shift * shift).max(floor[i]);
            }
        }
    }
    let sum: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= sum);
    Gmm::from_parts(weights, means, vars, dim, fallback.fingerprint().clone())
}

/// Fits a diagonal GMM by expectation-maximization.
pub fn fit_em(features: &FeatureMatrix, cfg: &EmConfig) -> Result<(Gmm, EmTrace), GmmError> {
    cfg.validate()?;
    let n = features.num_frames();
    let k = cfg.components;
    if n < k || n == 0 {
        return Err(GmmError::TooFewFrames { frames: n, components: k });
    }
    let (global_mean, global_var) = pooled_variance(features);
    let floor: Vec<f64> = global_var.iter().map(|v| cfg.var_floor * v.max(1e-12)).collect();
    let global_var: Vec<f64> = global_var.iter().zip(&floor).map(|(v, f)| v.max(*f)).collect();

    let mut model = match cfg.init {
        Init::Kmeans => kmeans_init(features, cfg, &global_var, &floor)?,
        Init::RandomResponsibility => random_init(features, cfg, &global_mean, &global_var, &floor)?,
    };

    let mut trace = Vec::with_capacity(cfg.max_iters + 1);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..cfg.max_iters {
        let stats = accumulate(&model, features, cfg.exec);
        let ll = stats.log_likelihood / n as f64;
        trace.push(ll);
        if it > 0 {
            let prev = trace[it - 1];
            if (ll - prev) / prev.abs().max(f64::MIN_POSITIVE) < cfg.tol {
                converged = true;
                break;
            }
        }
        model = maximize(&stats, model.means_flat(), &model, &floor)?;
        iterations += 1;
    }
    if !converged {
        let stats = accumulate(&model, features, cfg.exec);
        trace.push(stats.log_likelihood / n as f64);
    }
    Ok((
        model,
        EmTrace {
            log_likelihood: trace,
            iterations,
            converged,
            var_floor: floor,
        },
    ))
}

fn kmeans_init(
    features: &FeatureMatrix,
    cfg: &EmConfig,
    global_var: &[f64],
    floor: &[f64],
) -> Result<Gmm, GmmError> {
    let n = features.num_frames();
    let d = features.dim();
    let k = cfg.components;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picks = rand::seq::index::sample(&mut rng, n, k).into_vec();
    picks.sort_unstable();
    let mut centers: Vec<f64> = picks.iter().flat_map(|&i| features.row(i).to_vec()).collect();
    let mut assign = vec![0usize; n];

    for _ in 0..KMEANS_ITERS {
        let parts = cfg.exec.map_chunks(features.as_slice(), CHUNK_FRAMES * d, |chunk| {
            chunk
                .chunks_exact(d)
                .map(|x| nearest(&centers, x, d))
                .collect::<Vec<_>>()
        });
        assign = parts.concat();
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (x, &c) in features.rows().zip(&assign) {
            counts[c] += 1;
            add_into(&mut sums[c * d..(c + 1) * d], x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                for i in 0..d {
                    centers[c * d + i] = sums[c * d + i] / counts[c] as f64;
                }
            }
        }
    }

    let mut counts = vec![0usize; k];
    let mut sq = vec![0.0; k * d];
    for (x, &c) in features.rows().zip(&assign) {
        counts[c] += 1;
        for i in 0..d {
            sq[c * d + i] += (x[i] - centers[c * d + i]).powi(2);
        }
    }
    let mut vars = vec![0.0; k * d];
    for c in 0..k {
        for i in 0..d {
            vars[c * d + i] = if counts[c] >= 2 {
                (sq[c * d + i] / counts[c] as f64).max(floor[i])
            } else {
                global_var[i]
            };
        }
    }
    let weights = counts
        .iter()
        .map(|&c| (c + 1) as f64 / (n + k) as f64)
        .collect();
    Gmm::from_parts(weights, centers, vars, d, features.fingerprint().clone())
}

fn nearest(centers: &[f64], x: &[f64], d: usize) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (c, mu) in centers.chunks_exact(d).enumerate() {
        let dist: f64 = mu.iter().zip(x).map(|(m, v)| (m - v) * (m - v)).sum();
        // strict comparison keeps the lowest index on ties
        if dist < best_dist {
            best_dist = dist;
            best = c;
        }
    }
    best
}

fn random_init(
    features: &FeatureMatrix,
    cfg: &EmConfig,
    global_mean: &[f64],
    global_var: &[f64],
    floor: &[f64],
) -> Result<Gmm, GmmError> {
    let d = features.dim();
    let k = cfg.components;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stats = SuffStats::zeros(k, d);
    let mut resp = vec![0.0; k];
    for x in features.rows() {
        resp.iter_mut().for_each(|r| *r = rng.random::<f64>() + 1e-3);
        let s: f64 = resp.iter().sum();
        for c in 0..k {
            let g = resp[c] / s;
            stats.counts[c] += g;
            for i in 0..d {
                let diff = x[i] - global_mean[i];
                stats.first[c * d + i] += g * diff;
                stats.second[c * d + i] += g * diff * diff;
            }
        }
    }
    let reference: Vec<f64> = (0..k).flat_map(|_| global_mean.iter().cloned()).collect();
    let placeholder = Gmm::from_parts(
        vec![1.0 / k as f64; k],
        reference.clone(),
        (0..k).flat_map(|_| global_var.iter().cloned()).collect(),
        d,
        features.fingerprint().clone(),
    )?;
    maximize(&stats, &reference, &placeholder, floor)
}

/// Means-only MAP adaptation of `ubm` toward `features` with relevance factor
/// `relevance`; weights and variances are copied from the UBM.
pub fn map_adapt(ubm: &Gmm, features: &FeatureMatrix, relevance: f64) -> Result<Gmm, GmmError> {
    map_adapt_with(ubm, features, relevance, Exec::default())
}

pub fn map_adapt_with(
    ubm: &Gmm,
    features: &FeatureMatrix,
    relevance: f64,
    exec: Exec,
) -> Result<Gmm, GmmError> {
    if !(relevance > 0.0 && relevance.is_finite()) {
        return Err(GmmError::InvalidConfig("relevance factor must be positive".into()));
    }
    ubm.check_features(features)?;
    let d = ubm.dim();
    let stats = accumulate(ubm, features, exec);
    let mut means = ubm.means_flat().to_vec();
    for (c, &n) in stats.counts.iter().enumerate() {
        if n <= 0.0 {
            continue;
        }
        let alpha = n / (n + relevance);
        for i in 0..d {
            // alpha * E[x] + (1 - alpha) * mu, with E[x] = mu + first / n
            means[c * d + i] += alpha * stats.first[c * d + i] / n;
        }
    }
    Gmm::from_parts(
        ubm.weights().to_vec(),
        means,
        ubm.variances_flat().to_vec(),
        d,
        ubm.fingerprint().clone(),
    )
}
