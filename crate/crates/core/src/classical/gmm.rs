//! Conditional Gaussian-mixture spatial baselines.

use super::{ClassicalError, Result};
use crate::linalg::{cholesky, mvn_logpdf_chol};
use crate::rng::RngState;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + v.iter().map(|x| (*x - m).exp()).sum::<T>().ln()
}

/// History-kernel mixture `p(x | t, H) = Σ_i w_i(t) N(x; x_i, diag(scales²))`
/// with `w_i(t) ∝ exp(-gamma (t - t_i))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmPairwise<T> {
    pub scales: Vec<T>,
    pub gamma: T,
}

impl<T: Scalar> GmmPairwise<T> {
    pub fn new(scales: Vec<T>, gamma: T) -> Result<Self> {
        let g = Self { scales, gamma };
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        if self.scales.iter().any(|s| !(*s > T::zero() && s.is_finite())) {
            return Err(ClassicalError::Singular(format!(
                "bandwidth scales must be positive, got {:?}",
                self.scales
            )));
        }
        if !(self.gamma >= T::zero() && self.gamma.is_finite()) {
            return Err(ClassicalError::InvalidParams("time decay must be nonnegative".into()));
        }
        Ok(())
    }

    fn log_weights(&self, t: T, times: &[T]) -> Vec<T> {
        times.iter().map(|&ti| -self.gamma * (t - ti)).collect()
    }

    pub fn logprob(&self, x: &[T], t: T, times: &[T], locs: &[Vec<T>]) -> Result<T> {
        self.validate()?;
        if times.is_empty() {
            return Err(ClassicalError::TooFewEvents { needed: 1, have: 0 });
        }
        let d = x.len();
        let lw = self.log_weights(t, times);
        let norm = log_sum_exp(&lw);
        let log_scale: T = self.scales.iter().map(|s| s.ln()).sum();
        let c = -T::lit(0.5 * d as f64) * T::lit(std::f64::consts::TAU).ln() - log_scale;
        let terms: Vec<T> = lw
            .iter()
            .zip(locs)
            .map(|(w, xi)| {
                let q: T = (0..d)
                    .map(|k| {
                        let z = (x[k] - xi[k]) / self.scales[k];
                        z * z
                    })
                    .sum();
                *w + c - T::lit(0.5) * q
            })
            .collect();
        Ok(log_sum_exp(&terms) - norm)
    }

    /// Mixture mean `Σ w_i(t) x_i`.
    pub fn mean(&self, t: T, times: &[T], locs: &[Vec<T>]) -> Vec<T> {
        let lw = self.log_weights(t, times);
        let norm = log_sum_exp(&lw);
        let d = locs[0].len();
        let mut out = vec![T::zero(); d];
        for (w, xi) in lw.iter().zip(locs) {
            let p = (*w - norm).exp();
            for k in 0..d {
                out[k] += p * xi[k];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairwiseFitConfig {
    pub max_iters: usize,
    /// Only the most recent events enter each conditional density.
    pub max_history: usize,
    pub rel_tol: f64,
}

impl Default for PairwiseFitConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            max_history: 100,
            rel_tol: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmFitReport {
    pub nll: f64,
    pub iters: usize,
    /// Log-likelihood after every EM iteration (empty for the pairwise model).
    pub log_likelihood: Vec<f64>,
}

fn pairwise_objective<T: Scalar>(
    th: &[T],
    seqs: &[(Vec<T>, Vec<Vec<T>>)],
    max_history: usize,
) -> Result<T> {
    let d = th.len() - 1;
    let model = GmmPairwise {
        scales: th[..d].iter().map(|v| v.exp()).collect(),
        gamma: th[d].exp(),
    };
    let mut total = T::zero();
    let mut count = 0usize;
    for (times, locs) in seqs {
        for i in 1..times.len() {
            let lo = i.saturating_sub(max_history);
            total -= model.logprob(&locs[i], times[i], &times[lo..i], &locs[lo..i])?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(ClassicalError::TooFewEvents { needed: 2, have: 1 });
    }
    Ok(total / T::lit(count as f64))
}

/// Selects the bandwidth and time decay minimizing the mean held-in NLL of
/// each event given its predecessors, by finite-difference gradient descent
/// on log-parameters with backtracking.
pub fn gmm_pairwise_fit<T: Scalar>(
    seqs: &[(Vec<T>, Vec<Vec<T>>)],
    cfg: &PairwiseFitConfig,
) -> Result<(GmmPairwise<T>, GmmFitReport)> {
    let d = seqs
        .iter()
        .find_map(|(_, l)| l.first().map(Vec::len))
        .ok_or(ClassicalError::TooFewEvents { needed: 2, have: 0 })?;
    let mut th = vec![T::lit(0.5f64.ln()); d];
    th.push(T::zero());
    let f_of = |th: &[T]| pairwise_objective(th, seqs, cfg.max_history);
    let mut f = f_of(&th)?;
    let h = T::lit(1e-5);
    let mut step = T::lit(0.5);
    let mut iters = 0;
    while iters < cfg.max_iters {
        iters += 1;
        let mut g = vec![T::zero(); th.len()];
        for k in 0..th.len() {
            let mut p = th.clone();
            p[k] += h;
            let fp = f_of(&p)?;
            p[k] = th[k] - h;
            let fm = f_of(&p)?;
            g[k] = (fp - fm) / (h + h);
        }
        let g2: T = g.iter().map(|v| *v * *v).sum();
        if g2.sqrt() < T::lit(1e-8) {
            break;
        }
        let mut t = step;
        let mut accepted = None;
        while t > T::lit(1e-12) {
            let cand: Vec<T> = th.iter().zip(&g).map(|(a, b)| *a - t * *b).collect();
            if let Ok(fc) = f_of(&cand) {
                if fc.is_finite() && fc <= f - T::lit(1e-4) * t * g2 {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            t *= T::lit(0.5);
        }
        let Some((cand, fc)) = accepted else { break };
        let rel = (f - fc).abs() / f.abs().max(T::one());
        th = cand;
        f = fc;
        step = (t * T::lit(2.0)).min(T::lit(10.0));
        if rel < T::lit(cfg.rel_tol) {
            break;
        }
    }
    let model = GmmPairwise::new(th[..d].iter().map(|v| v.exp()).collect(), th[d].exp())?;
    Ok((
        model,
        GmmFitReport {
            nll: f.to_f64_lossy(),
            iters,
            log_likelihood: Vec::new(),
        },
    ))
}

/// K-component full-covariance Gaussian mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmKCluster<T> {
    pub weights: Vec<T>,
    pub means: Vec<Vec<T>>,
    /// Row-major `d x d` covariances.
    pub covs: Vec<Vec<T>>,
}

impl<T: Scalar> GmmKCluster<T> {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    fn chols(&self) -> Result<Vec<Vec<T>>> {
        let d = self.means[0].len();
        self.covs
            .iter()
            .enumerate()
            .map(|(k, c)| {
                cholesky(c, d).ok_or_else(|| ClassicalError::Singular(format!("covariance of component {k}")))
            })
            .collect()
    }

    pub fn logprob(&self, x: &[T]) -> Result<T> {
        let chols = self.chols()?;
        Ok(self.logprob_with(x, &chols))
    }

    fn logprob_with(&self, x: &[T], chols: &[Vec<T>]) -> T {
        let terms: Vec<T> = (0..self.k())
            .map(|k| self.weights[k].ln() + mvn_logpdf_chol(x, &self.means[k], &chols[k]))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn mean(&self) -> Vec<T> {
        let d = self.means[0].len();
        let mut out = vec![T::zero(); d];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for j in 0..d {
                out[j] += *w * m[j];
            }
        }
        out
    }
}

fn kmeans_pp<T: Scalar>(points: &[Vec<T>], k: usize, rng: &mut RngState) -> Vec<Vec<T>> {
    let mut centers = vec![points[rng.below(points.len())].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centers
                    .iter()
                    .map(|c| p.iter().zip(c).map(|(a, b)| (*a - *b) * (*a - *b)).sum::<T>())
                    .fold(T::infinity(), T::min)
                    .to_f64_lossy()
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let idx = if total <= 0.0 {
            rng.below(points.len())
        } else {
            let mut u = rng.uniform() * total;
            let mut pick = points.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        };
        centers.push(points[idx].clone());
    }
    centers
}

fn moments<T: Scalar>(points: &[Vec<T>], resp: &[T]) -> (T, Vec<T>, Vec<T>) {
    let d = points[0].len();
    let nk: T = resp.iter().copied().sum();
    let mut mean = vec![T::zero(); d];
    for (p, r) in points.iter().zip(resp) {
        for j in 0..d {
            mean[j] += *r * p[j];
        }
    }
    for m in &mut mean {
        *m /= nk;
    }
    let mut cov = vec![T::zero(); d * d];
    for (p, r) in points.iter().zip(resp) {
        for a in 0..d {
            for b in 0..d {
                cov[a * d + b] += *r * (p[a] - mean[a]) * (p[b] - mean[b]);
            }
        }
    }
    for c in &mut cov {
        *c /= nk;
    }
    (nk, mean, cov)
}

/// EM fit with k-means++ seeding. An empty component triggers a reseed; the
/// fit fails after three reseeds.
pub fn gmm_kcluster_fit<T: Scalar>(
    points: &[Vec<T>],
    k: usize,
    max_iters: usize,
    rng: &mut RngState,
) -> Result<(GmmKCluster<T>, GmmFitReport)> {
    if k == 0 {
        return Err(ClassicalError::InvalidParams("K must be >= 1".into()));
    }
    if points.len() < k {
        return Err(ClassicalError::TooFewEvents {
            needed: k,
            have: points.len(),
        });
    }
    let n = points.len();
    let d = points[0].len();
    let ones = vec![T::one(); n];
    let (_, _, global_cov) = moments(points, &ones);
    const RETRIES: usize = 3;
    'attempt: for _attempt in 0..=RETRIES {
        let centers = kmeans_pp(points, k, rng);
        let mut model = GmmKCluster {
            weights: vec![T::one() / T::lit(k as f64); k],
            means: centers,
            covs: vec![global_cov.clone(); k],
        };
        let mut history: Vec<f64> = Vec::new();
        let mut resp = vec![vec![T::zero(); n]; k];
        for _ in 0..max_iters {
            // E step
            let chols = model.chols()?;
            let mut ll = T::zero();
            for (i, p) in points.iter().enumerate() {
                let terms: Vec<T> = (0..k)
                    .map(|c| model.weights[c].ln() + mvn_logpdf_chol(p, &model.means[c], &chols[c]))
                    .collect();
                let lse = log_sum_exp(&terms);
                ll += lse;
                for c in 0..k {
                    resp[c][i] = (terms[c] - lse).exp();
                }
            }
            history.push(ll.to_f64_lossy());
            if history.len() >= 2 {
                let a = history[history.len() - 2];
                let b = history[history.len() - 1];
                if (b - a).abs() <= 1e-12 * b.abs().max(1.0) {
                    break;
                }
            }
            // M step
            let mut next = model.clone();
            for c in 0..k {
                let (nk, mean, cov) = moments(points, &resp[c]);
                if nk.to_f64_lossy() < 1e-8 * n as f64 || cholesky(&cov, d).is_none() {
                    continue 'attempt;
                }
                next.weights[c] = nk / T::lit(n as f64);
                next.means[c] = mean;
                next.covs[c] = cov;
            }
            model = next;
        }
        let chols = model.chols()?;
        let ll: T = points.iter().map(|p| model.logprob_with(p, &chols)).sum();
        if history.last().map_or(true, |&h| (h - ll.to_f64_lossy()).abs() > 0.0) {
            history.push(ll.to_f64_lossy());
        }
        return Ok((
            model,
            GmmFitReport {
                nll: -ll.to_f64_lossy() / n as f64,
                iters: history.len(),
                log_likelihood: history,
            },
        ));
    }
    Err(ClassicalError::EmptyCluster { retries: RETRIES })
}
