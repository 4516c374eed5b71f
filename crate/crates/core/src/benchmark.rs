//! Classical baselines fitted and scored on windowed data, in the same
//! normalized units and per-event averaging as the network's evaluation.

use crate::classical::{
    baseline_loss, fit_mle, gmm_kcluster_fit, gmm_pairwise_fit, BaselineMode, ClassicalError, FittedModel, MleConfig,
    ModelKind, PairwiseFitConfig, SpatialBaseline,
};
use crate::events::NormalizedSequence;
use crate::rng::{streams, RngState};
use crate::train::Summary;
use serde::{Deserialize, Serialize};

/// Which spatial baseline to fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialKind {
    /// One Gaussian over all training locations, ignoring history.
    Gaussian,
    /// History-kernel mixture with fitted bandwidths and decay.
    Pairwise,
    /// K-cluster mixture refit on each history.
    KCluster { k: usize },
}

impl std::str::FromStr for SpatialKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "pairwise" | "conditional-gmm" => Ok(Self::Pairwise),
            other => match other.strip_prefix("kcluster:").map(str::parse) {
                Some(Ok(k)) if k > 0 => Ok(Self::KCluster { k }),
                _ => Err(format!("unknown spatial baseline `{other}` (gaussian, pairwise, kcluster:K)")),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSet {
    pub time: Option<FittedModel<f64>>,
    pub space: Option<SpatialBaseline<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineScores {
    pub nll_time: Option<Summary>,
    pub nll_space: Option<Summary>,
}

fn window(s: &NormalizedSequence) -> (Vec<f64>, Vec<Vec<f64>>) {
    (s.scaled_times(), s.x.clone())
}

/// Fits the requested baselines on the training windows.
pub fn fit_baselines(
    train: &[NormalizedSequence],
    time: Option<ModelKind>,
    space: Option<SpatialKind>,
    mle: &MleConfig,
    seed: u64,
) -> Result<BaselineSet, ClassicalError> {
    let windows: Vec<_> = train.iter().map(window).collect();
    let time = match time {
        Some(kind) => {
            let seqs: Vec<Vec<f64>> = windows.iter().map(|w| w.0.clone()).collect();
            Some(fit_mle(kind, &seqs, None, mle)?)
        }
        None => None,
    };
    let space = match space {
        Some(SpatialKind::Gaussian) => {
            let pts: Vec<Vec<f64>> = train.iter().flat_map(|s| s.x.iter().cloned()).collect();
            let mut rng = RngState::new(seed, streams::EM_INIT);
            // One EM step is exact for a single component.
            Some(SpatialBaseline::Fixed(gmm_kcluster_fit(&pts, 1, 1, &mut rng)?.0))
        }
        Some(SpatialKind::Pairwise) => {
            Some(SpatialBaseline::Pairwise(gmm_pairwise_fit(&windows, &PairwiseFitConfig::default())?.0))
        }
        Some(SpatialKind::KCluster { k }) => Some(SpatialBaseline::KCluster { k, max_iters: 100, seed }),
        None => None,
    };
    Ok(BaselineSet { time, space })
}

/// Per-event output NLL of each baseline: averaged over the output slots of
/// a window, then summarized over windows. Regularizers and history terms
/// are excluded.
pub fn score_baselines(set: &BaselineSet, seqs: &[NormalizedSequence]) -> Result<BaselineScores, ClassicalError> {
    let time = set.time.as_ref().map(|f| &f.model);
    let (mut nt, mut ns) = (Vec::new(), Vec::new());
    for s in seqs {
        let (t, x) = window(s);
        let r = baseline_loss(time, set.space.as_ref(), &t, &x, s.n_in, 0.0, 0.0, BaselineMode::Test)?;
        let l = s.l_out as f64;
        nt.push(r.predicted_time / l);
        ns.push(r.predicted_space / l);
    }
    Ok(BaselineScores {
        nll_time: set.time.as_ref().map(|_| Summary::of(&nt)),
        nll_space: set.space.as_ref().map(|_| Summary::of(&ns)),
    })
}
