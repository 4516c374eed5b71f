use super::{ClassicalError, Result};
use crate::quadrature::{integrate, QuadConfig};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Poisson,
    Hawkes,
    SelfCorrecting,
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "poisson" | "homo-poisson" => Ok(Self::Poisson),
            "hawkes" => Ok(Self::Hawkes),
            "self-correcting" | "self_correcting" => Ok(Self::SelfCorrecting),
            other => Err(format!("unknown temporal model `{other}`")),
        }
    }
}

/// Conditional intensity of a purely temporal point process.
///
/// Hawkes uses the exponential kernel `g(s) = exp(-s / beta) / beta`, so
/// `alpha` is the branching ratio. The self-correcting intensity is
/// `exp(mu + alpha * t - beta * N(t))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum TemporalModel<T> {
    Poisson { rate: T },
    Hawkes { mu: T, alpha: T, beta: T },
    SelfCorrecting { mu: T, alpha: T, beta: T },
}

impl<T: Scalar> TemporalModel<T> {
    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Poisson { .. } => ModelKind::Poisson,
            Self::Hawkes { .. } => ModelKind::Hawkes,
            Self::SelfCorrecting { .. } => ModelKind::SelfCorrecting,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(ClassicalError::InvalidParams(msg.to_string()));
        match *self {
            Self::Poisson { rate } => {
                if !(rate > T::zero() && rate.is_finite()) {
                    return bad("poisson rate must be positive and finite");
                }
            }
            Self::Hawkes { mu, alpha, beta } => {
                if !(mu >= T::zero() && mu.is_finite()) {
                    return bad("hawkes mu must be nonnegative");
                }
                if !(alpha >= T::zero() && alpha.is_finite()) {
                    return bad("hawkes alpha must be nonnegative");
                }
                if !(beta > T::zero() && beta.is_finite()) {
                    return bad("hawkes beta must be positive");
                }
            }
            Self::SelfCorrecting { mu, alpha, beta } => {
                if !(mu.is_finite() && alpha.is_finite() && beta.is_finite()) {
                    return bad("self-correcting parameters must be finite");
                }
                if beta <= T::zero() {
                    return bad("self-correcting beta must be positive");
                }
            }
        }
        Ok(())
    }

    /// `alpha < 1` for Hawkes; always true for the other kinds.
    pub fn is_stationary(&self) -> bool {
        match *self {
            Self::Hawkes { alpha, .. } => alpha < T::one(),
            _ => true,
        }
    }

    fn check_order(t: T, history: &[T]) -> Result<()> {
        if let Some(&last) = history.last() {
            if t < last {
                return Err(ClassicalError::BeforeHistory {
                    t: t.to_f64_lossy(),
                    last: last.to_f64_lossy(),
                });
            }
        }
        Ok(())
    }

    /// Intensity at `t` given every event in `history` (all at or before `t`).
    pub fn intensity(&self, t: T, history: &[T]) -> Result<T> {
        Self::check_order(t, history)?;
        Ok(self.intensity_unchecked(t, history))
    }

    pub(crate) fn intensity_unchecked(&self, t: T, history: &[T]) -> T {
        match *self {
            Self::Poisson { rate } => rate,
            Self::Hawkes { mu, alpha, beta } => {
                let s: T = history.iter().map(|&ti| (-(t - ti) / beta).exp()).sum();
                mu + alpha / beta * s
            }
            Self::SelfCorrecting { mu, alpha, beta } => {
                (mu + alpha * t - beta * T::lit(history.len() as f64)).exp()
            }
        }
    }

    /// `∫_{a}^{b} λ(u) du` with no events inside `(a, b]`. `b` may be infinite
    /// for the closed-form kinds.
    pub fn compensator(&self, a: T, b: T, history: &[T]) -> Result<T> {
        Self::check_order(a, history)?;
        if b < a {
            return Err(ClassicalError::InvalidParams(format!(
                "compensator bounds reversed: [{}, {}]",
                a.to_f64_lossy(),
                b.to_f64_lossy()
            )));
        }
        match *self {
            Self::Poisson { rate } => Ok(if b.is_infinite() { T::infinity() } else { rate * (b - a) }),
            Self::Hawkes { mu, alpha, beta } => {
                let base = if b.is_infinite() {
                    if mu > T::zero() {
                        T::infinity()
                    } else {
                        T::zero()
                    }
                } else {
                    mu * (b - a)
                };
                let excited: T = history
                    .iter()
                    .map(|&ti| (-(a - ti) / beta).exp() - (-(b - ti) / beta).exp())
                    .sum();
                Ok(base + alpha * excited)
            }
            Self::SelfCorrecting { .. } => {
                let f = |u: T| self.intensity_unchecked(u, history);
                Ok(integrate(f, a, b, &QuadConfig::default())?)
            }
        }
    }

    /// Log-density of the waiting time `dt` until the next event after the
    /// last history event (or after `origin` when history is empty).
    pub fn log_interval_density(&self, origin: T, dt: T, history: &[T]) -> Result<T> {
        let t = origin + dt;
        let lam = self.intensity(t, history)?;
        if lam <= T::zero() {
            return Ok(T::neg_infinity());
        }
        Ok(lam.ln() - self.compensator(origin, t, history)?)
    }

    /// Point-process negative log-likelihood of `times` observed on
    /// `(start, times.last()]`:
    /// `-Σ log λ(t_i | H_{t_i}) + ∫_start^{t_n} λ(u) du`.
    pub fn nll_temporal(&self, times: &[T], start: T) -> Result<T> {
        self.validate()?;
        if times.is_empty() {
            return Err(ClassicalError::TooFewEvents { needed: 1, have: 0 });
        }
        if times[0] < start {
            return Err(ClassicalError::BeforeHistory {
                t: times[0].to_f64_lossy(),
                last: start.to_f64_lossy(),
            });
        }
        let end = times[times.len() - 1];
        match *self {
            Self::Poisson { rate } => {
                Ok(-T::lit(times.len() as f64) * rate.ln() + rate * (end - start))
            }
            Self::Hawkes { mu, alpha, beta } => {
                let mut nll = T::zero();
                let mut acc = T::zero();
                for (i, &ti) in times.iter().enumerate() {
                    if i > 0 {
                        let dt = ti - times[i - 1];
                        acc = (-dt / beta).exp() * (acc + T::one());
                    }
                    let lam = mu + alpha / beta * acc;
                    if lam <= T::zero() {
                        return Err(ClassicalError::ZeroIntensity { index: i });
                    }
                    nll -= lam.ln();
                }
                let tail: T = times.iter().map(|&tj| T::one() - (-(end - tj) / beta).exp()).sum();
                Ok(nll + mu * (end - start) + alpha * tail)
            }
            Self::SelfCorrecting { .. } => {
                let mut nll = T::zero();
                let mut prev = start;
                for (i, &ti) in times.iter().enumerate() {
                    let hist = &times[..i];
                    nll += self.compensator(prev, ti, hist)?;
                    let lam = self.intensity_unchecked(ti, hist);
                    if lam <= T::zero() || !lam.is_finite() {
                        return Err(ClassicalError::ZeroIntensity { index: i });
                    }
                    nll -= lam.ln();
                    prev = ti;
                }
                Ok(nll)
            }
        }
    }

    pub fn map<U>(self, f: impl Fn(T) -> U) -> TemporalModel<U> {
        match self {
            Self::Poisson { rate } => TemporalModel::Poisson { rate: f(rate) },
            Self::Hawkes { mu, alpha, beta } => TemporalModel::Hawkes {
                mu: f(mu),
                alpha: f(alpha),
                beta: f(beta),
            },
            Self::SelfCorrecting { mu, alpha, beta } => TemporalModel::SelfCorrecting {
                mu: f(mu),
                alpha: f(alpha),
                beta: f(beta),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hawkes_without_excitation_is_background() {
        let m = TemporalModel::<f64>::Hawkes { mu: 0.5, alpha: 0.0, beta: 3.0 };
        assert_eq!(m.intensity(4.0, &[0.0, 1.0, 3.5]).unwrap(), 0.5);
    }

    #[test]
    fn single_kernel_values() {
        let m = TemporalModel::<f64>::Hawkes { mu: 0.0, alpha: 1.0, beta: 1.0 };
        assert_eq!(m.intensity(0.0, &[0.0]).unwrap(), 1.0);
        assert!((m.intensity(1.0, &[0.0]).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn two_kernel_direct_sum() {
        let m = TemporalModel::<f64>::Hawkes { mu: 0.2, alpha: 0.6, beta: 2.0 };
        let expect = 0.2 + 0.3 * ((-1.0f64).exp() + (-0.5f64).exp());
        assert!((m.intensity(2.0, &[0.0, 1.0]).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn intensity_rejects_time_before_history() {
        let m = TemporalModel::<f64>::Poisson { rate: 1.0 };
        assert!(matches!(
            m.intensity(0.5, &[1.0]),
            Err(ClassicalError::BeforeHistory { .. })
        ));
    }

    #[test]
    fn compensator_closed_forms() {
        let p = TemporalModel::<f64>::Poisson { rate: 2.0 };
        assert_eq!(p.compensator(0.0, 3.0, &[]).unwrap(), 6.0);
        let h = TemporalModel::<f64>::Hawkes { mu: 0.0, alpha: 1.0, beta: 1.0 };
        assert!((h.compensator(0.0, f64::INFINITY, &[0.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn jump_size_is_alpha_over_beta() {
        let m = TemporalModel::<f64>::Hawkes { mu: 0.3, alpha: 0.8, beta: 2.0 };
        let hist = [0.0, 0.7];
        let before = m.intensity(1.5, &hist).unwrap();
        let mut after_hist = hist.to_vec();
        after_hist.push(1.5);
        let after = m.intensity(1.5, &after_hist).unwrap();
        assert!((after - before - 0.4).abs() < 1e-15);
    }

    #[test]
    fn poisson_nll_on_unit_rate() {
        let m = TemporalModel::<f64>::Poisson { rate: 1.0 };
        assert_eq!(m.nll_temporal(&[1.0, 2.0, 3.0], 0.0).unwrap(), 3.0);
    }

    #[test]
    fn hawkes_recursive_nll_matches_direct() {
        let m = TemporalModel::<f64>::Hawkes { mu: 0.4, alpha: 0.7, beta: 0.8 };
        let times = [0.1, 0.5, 0.55, 1.7, 2.0, 3.9];
        let mut direct = 0.0;
        for i in 0..times.len() {
            direct -= m.intensity(times[i], &times[..i]).unwrap().ln();
            let prev = if i == 0 { 0.0 } else { times[i - 1] };
            direct += m.compensator(prev, times[i], &times[..i]).unwrap();
        }
        let fast = m.nll_temporal(&times, 0.0).unwrap();
        assert!((direct - fast).abs() < 1e-12, "{direct} vs {fast}");
    }

    #[test]
    fn zero_intensity_reports_index() {
        let m = TemporalModel::<f64>::Hawkes { mu: 0.0, alpha: 1.0, beta: 1.0 };
        assert_eq!(
            m.nll_temporal(&[0.5, 1.0], 0.0),
            Err(ClassicalError::ZeroIntensity { index: 0 })
        );
    }

    #[test]
    fn json_shape() {
        let m = TemporalModel::<f64>::Hawkes { mu: 0.5, alpha: 0.5, beta: 1.0 };
        let v = serde_json::to_value(m).unwrap();
        assert_eq!(v["kind"], "hawkes");
        assert_eq!(v["params"]["alpha"], 0.5);
    }
}
