//! Ogata thinning for the temporal models and the pinwheel location
//! generator.

use crate::classical::{ClassicalError, TemporalModel};
use crate::events::Event;
use crate::rng::RngState;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("intensity {lambda} exceeded thinning bound {bound} at t = {t}")]
    BoundViolated { t: f64, lambda: f64, bound: f64 },
    #[error("intensity is not finite at t = {0}")]
    NonFinite(f64),
    #[error("horizon {horizon} not reached after the event cap of {cap}")]
    CountCap { horizon: f64, cap: usize },
    #[error("horizon must be positive")]
    Horizon,
    #[error("invalid pinwheel config: {0}")]
    Pinwheel(String),
    #[error("{times} times cannot be paired with {points} locations")]
    LengthMismatch { times: usize, points: usize },
    #[error(transparent)]
    Model(#[from] ClassicalError),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// Stop rule for [`thinning_sample`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Horizon<T> {
    /// Exactly `n` events.
    Count(usize),
    /// Every event in `(0, time]`; fails once more than `cap` events appear.
    Time { time: T, cap: usize },
}

/// How the dominating rate is picked at each proposal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundStrategy {
    /// `λ(t⁺)` (or its value at the end of the lookahead window for
    /// increasing intensities).
    Tight,
    /// The tight bound times a constant factor `> 1`.
    Inflated(f64),
}

impl Default for BoundStrategy {
    fn default() -> Self {
        Self::Tight
    }
}

// Running summary of the history that makes every intensity O(1).
struct State<T> {
    now: T,
    count: usize,
    // Hawkes: Σ exp(-(now - t_i)/β).
    decay: T,
}

impl<T: Scalar> State<T> {
    fn intensity_at(&self, model: &TemporalModel<T>, t: T) -> T {
        match *model {
            TemporalModel::Poisson { rate } => rate,
            TemporalModel::Hawkes { mu, alpha, beta } => {
                mu + alpha / beta * self.decay * (-(t - self.now) / beta).exp()
            }
            TemporalModel::SelfCorrecting { mu, alpha, beta } => {
                (mu + alpha * t - beta * T::lit(self.count as f64)).exp()
            }
        }
    }

    fn advance(&mut self, model: &TemporalModel<T>, t: T) {
        if let TemporalModel::Hawkes { beta, .. } = *model {
            self.decay = self.decay * (-(t - self.now) / beta).exp();
        }
        self.now = t;
    }

    fn accept(&mut self, model: &TemporalModel<T>, t: T) {
        self.advance(model, t);
        self.decay += T::one();
        self.count += 1;
    }
}

/// Samples event times on `(0, ∞)` from an empty history by Ogata thinning.
///
/// Self-correcting intensities grow between events, so their bound is taken
/// at the end of a lookahead window of length `min(1/λ(t), 1/α)`; a proposal
/// past the window moves the clock to the window end without accepting.
pub fn thinning_sample<T: Scalar>(
    model: &TemporalModel<T>,
    horizon: Horizon<T>,
    bound: BoundStrategy,
    rng: &mut RngState,
) -> Result<Vec<T>> {
    model.validate()?;
    let inflate = match bound {
        BoundStrategy::Tight => T::one(),
        BoundStrategy::Inflated(f) => T::lit(f.max(1.0)),
    };
    let (target, end, cap) = match horizon {
        Horizon::Count(n) => (n, T::infinity(), n),
        Horizon::Time { time, cap } => {
            if !(time > T::zero()) {
                return Err(SimError::Horizon);
            }
            (usize::MAX, time, cap)
        }
    };
    let mut st = State { now: T::zero(), count: 0, decay: T::zero() };
    let mut out = Vec::new();
    let slack = T::one() + T::lit(1e-12);
    while out.len() < target {
        let here = st.intensity_at(model, st.now);
        if !here.is_finite() {
            return Err(SimError::NonFinite(st.now.to_f64_lossy()));
        }
        let (lam_bar, window_end) = match *model {
            TemporalModel::SelfCorrecting { alpha, .. } if alpha > T::zero() => {
                let w = (T::one() / here.max(T::lit(1e-300))).min(T::one() / alpha);
                let w_end = st.now + w;
                (st.intensity_at(model, w_end) * inflate, w_end)
            }
            _ => (here * inflate, T::infinity()),
        };
        if !lam_bar.is_finite() {
            return Err(SimError::NonFinite(st.now.to_f64_lossy()));
        }
        if lam_bar <= T::zero() {
            // A dead process never produces another event.
            if end.is_finite() {
                break;
            }
            return Err(SimError::Model(ClassicalError::Defective { survival: 1.0 }));
        }
        let cand = st.now + T::lit(rng.exp1()) / lam_bar;
        if cand > window_end {
            st.advance(model, window_end);
            continue;
        }
        if cand > end {
            break;
        }
        let lam = st.intensity_at(model, cand);
        if !lam.is_finite() {
            return Err(SimError::NonFinite(cand.to_f64_lossy()));
        }
        if lam > lam_bar * slack {
            return Err(SimError::BoundViolated {
                t: cand.to_f64_lossy(),
                lambda: lam.to_f64_lossy(),
                bound: lam_bar.to_f64_lossy(),
            });
        }
        if T::lit(rng.uniform()) * lam_bar < lam {
            if out.len() >= cap {
                return Err(SimError::CountCap { horizon: end.to_f64_lossy(), cap });
            }
            st.accept(model, cand);
            out.push(cand);
        } else {
            st.advance(model, cand);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinwheelConfig {
    pub n_clusters: usize,
    pub per_cluster: usize,
    pub radial_std: f64,
    pub tangential_std: f64,
    /// Spiral tightness.
    pub rate: f64,
}

impl Default for PinwheelConfig {
    fn default() -> Self {
        Self {
            n_clusters: 15,
            per_cluster: 150,
            radial_std: 0.3,
            tangential_std: 0.05,
            rate: 0.25,
        }
    }
}

impl PinwheelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 || self.per_cluster == 0 {
            return Err(SimError::Pinwheel("cluster counts must be positive".into()));
        }
        for (name, v) in [
            ("radial_std", self.radial_std),
            ("tangential_std", self.tangential_std),
            ("rate", self.rate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(SimError::Pinwheel(format!("{name} must be nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.n_clusters * self.per_cluster
    }

    /// Base angle of cluster `k`; decreasing in `k`, i.e. clockwise.
    pub fn base_angle(&self, k: usize) -> f64 {
        -2.0 * PI * k as f64 / self.n_clusters as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinwheelPoint {
    pub x: [f64; 2],
    pub label: usize,
}

/// Spiral-arm Gaussian blobs. Cluster `k` draws `f = (1 + σ_r ε₁, σ_t ε₂)`
/// and rotates it by `φ_k + rate · exp(f₁)`. Clusters come out in clockwise
/// order, all points of one cluster before the next.
pub fn pinwheel_spatial(cfg: &PinwheelConfig, rng: &mut RngState) -> Result<Vec<PinwheelPoint>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.total());
    for k in 0..cfg.n_clusters {
        let phi = cfg.base_angle(k);
        for _ in 0..cfg.per_cluster {
            let f0 = 1.0 + cfg.radial_std * rng.normal();
            let f1 = cfg.tangential_std * rng.normal();
            let a = phi + cfg.rate * f0.exp();
            let (s, c) = a.sin_cos();
            out.push(PinwheelPoint { x: [c * f0 - s * f1, s * f0 + c * f1], label: k });
        }
    }
    Ok(out)
}

/// Pairs the i-th time with the i-th location; every marker is 1.
pub fn pair_events(times: &[f64], points: &[PinwheelPoint]) -> Result<Vec<Event>> {
    if times.len() != points.len() {
        return Err(SimError::LengthMismatch { times: times.len(), points: points.len() });
    }
    Ok(times
        .iter()
        .zip(points)
        .map(|(&t, p)| Event::new(t, p.x.to_vec(), 1.0))
        .collect())
}

/// Hawkes times from thinning paired with clockwise pinwheel locations.
pub fn make_pinwheel_dataset(
    cfg: &PinwheelConfig,
    hawkes: &TemporalModel<f64>,
    rng: &mut RngState,
) -> Result<Vec<Event>> {
    let points = pinwheel_spatial(cfg, rng)?;
    let times = thinning_sample(hawkes, Horizon::Count(points.len()), BoundStrategy::Tight, rng)?;
    pair_events(&times, &points)
}

/// Hawkes parameters used for the pinwheel data unless overridden.
pub fn default_pinwheel_hawkes() -> TemporalModel<f64> {
    TemporalModel::Hawkes { mu: 0.5, alpha: 0.5, beta: 1.0 }
}
