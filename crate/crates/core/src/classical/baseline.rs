use super::gmm::{gmm_kcluster_fit, GmmKCluster, GmmPairwise};
use super::moment::expected_next_time;
use super::temporal::TemporalModel;
use super::{ClassicalError, Result};
use crate::rng::{streams, RngState};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

/// Spatial model used by the baseline loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SpatialBaseline<T> {
    /// History-kernel mixture conditioned on event times.
    Pairwise(GmmPairwise<T>),
    /// K-cluster mixture refit on each (updated) history.
    KCluster { k: usize, max_iters: usize, seed: u64 },
    /// A fixed mixture that ignores history.
    Fixed(GmmKCluster<T>),
}

impl<T: Scalar> SpatialBaseline<T> {
    fn history_model(&self, locs: &[Vec<T>]) -> Result<Option<GmmKCluster<T>>> {
        match self {
            Self::KCluster { k, max_iters, seed } => {
                let mut rng = RngState::new(*seed, streams::EM_INIT);
                Ok(Some(gmm_kcluster_fit(locs, *k, *max_iters, &mut rng)?.0))
            }
            Self::Fixed(g) => Ok(Some(g.clone())),
            Self::Pairwise(_) => Ok(None),
        }
    }

    fn logprob(&self, x: &[T], t: T, times: &[T], locs: &[Vec<T>], fitted: Option<&GmmKCluster<T>>) -> Result<T> {
        match (self, fitted) {
            (Self::Pairwise(g), _) => g.logprob(x, t, times, locs),
            (_, Some(m)) => m.logprob(x),
            _ => unreachable!("mixture fitted before scoring"),
        }
    }

    fn mean(&self, t: T, times: &[T], locs: &[Vec<T>], fitted: Option<&GmmKCluster<T>>) -> Vec<T> {
        match (self, fitted) {
            (Self::Pairwise(g), _) => g.mean(t, times, locs),
            (_, Some(m)) => m.mean(),
            _ => unreachable!("mixture fitted before prediction"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMode {
    /// History NLL + predicted-event NLL + regularizers.
    Train,
    /// Predicted-event NLL only.
    Test,
}

/// Breakdown of the regularized baseline loss for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineLoss<T> {
    pub history_time: T,
    pub history_space: T,
    pub predicted_time: T,
    pub predicted_space: T,
    pub reg_time: T,
    pub reg_space: T,
    pub total: T,
    pub t_hat: Vec<T>,
    pub x_hat: Vec<Vec<T>>,
}

/// `λ1 Σ |t - t̂| + λ2 Σ ‖x - x̂‖₂`, returned as the two separate sums.
pub fn regularizers<T: Scalar>(
    t: &[T],
    t_hat: &[T],
    x: &[Vec<T>],
    x_hat: &[Vec<T>],
    lambda1: T,
    lambda2: T,
) -> (T, T) {
    let rt: T = t.iter().zip(t_hat).map(|(a, b)| (*a - *b).abs()).sum();
    let rs: T = x
        .iter()
        .zip(x_hat)
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (*u - *v) * (*u - *v)).sum::<T>().sqrt())
        .sum();
    (lambda1 * rt, lambda2 * rs)
}

/// Regularized baseline loss over one window of `times`/`locs` whose first
/// `n_in` events are history.
///
/// Each output event is scored by the waiting time measured from the last
/// event of the updated history (true history plus the previously predicted
/// events), and its location given that evaluation time. Absent models drop
/// their terms. In test mode only the predicted-event NLL remains.
#[allow(clippy::too_many_arguments)]
pub fn baseline_loss<T: Scalar>(
    time_model: Option<&TemporalModel<T>>,
    space_model: Option<&SpatialBaseline<T>>,
    times: &[T],
    locs: &[Vec<T>],
    n_in: usize,
    lambda1: T,
    lambda2: T,
    mode: BaselineMode,
) -> Result<BaselineLoss<T>> {
    if time_model.is_none() && space_model.is_none() {
        return Err(ClassicalError::InvalidParams("need a time or a space model".into()));
    }
    if n_in < 2 || n_in >= times.len() || times.len() != locs.len() {
        return Err(ClassicalError::TooFewEvents {
            needed: n_in.max(2) + 1,
            have: times.len(),
        });
    }
    let zero = T::zero();
    let mut out = BaselineLoss {
        history_time: zero,
        history_space: zero,
        predicted_time: zero,
        predicted_space: zero,
        reg_time: zero,
        reg_space: zero,
        total: zero,
        t_hat: Vec::new(),
        x_hat: Vec::new(),
    };
    let (hist_t, hist_x) = (&times[..n_in], &locs[..n_in]);

    if mode == BaselineMode::Train {
        if let Some(m) = time_model {
            out.history_time = m.nll_temporal(hist_t, hist_t[0].min(zero))?;
        }
        if let Some(s) = space_model {
            let fitted = s.history_model(hist_x)?;
            let start = if fitted.is_some() { 0 } else { 1 };
            for i in start..n_in {
                out.history_space -= s.logprob(&locs[i], times[i], &times[..i], &locs[..i], fitted.as_ref())?;
            }
        }
    }

    let mut wt = hist_t.to_vec();
    let mut wx = hist_x.to_vec();
    for l in n_in..times.len() {
        let origin = wt[wt.len() - 1];
        let dt = times[l] - times[l - 1];
        let t_eval = origin + dt;
        let t_next = match time_model {
            Some(m) => {
                out.predicted_time -= m.log_interval_density(origin, dt, &wt)?;
                let t_hat = expected_next_time(m, &wt)?;
                out.t_hat.push(t_hat);
                t_hat
            }
            None => times[l],
        };
        let x_next = match space_model {
            Some(s) => {
                let fitted = s.history_model(&wx)?;
                out.predicted_space -= s.logprob(&locs[l], t_eval, &wt, &wx, fitted.as_ref())?;
                let x_hat = s.mean(t_next, &wt, &wx, fitted.as_ref());
                out.x_hat.push(x_hat.clone());
                x_hat
            }
            None => locs[l].clone(),
        };
        wt.push(t_next);
        wx.push(x_next);
    }

    if mode == BaselineMode::Train {
        if time_model.is_some() {
            out.reg_time = regularizers(&times[n_in..], &out.t_hat, &[], &[], lambda1, lambda2).0;
        }
        if space_model.is_some() {
            out.reg_space = regularizers(&[], &[], &locs[n_in..], &out.x_hat, lambda1, lambda2).1;
        }
    }
    out.total = out.history_time
        + out.history_space
        + out.predicted_time
        + out.predicted_space
        + out.reg_time
        + out.reg_space;
    Ok(out)
}
