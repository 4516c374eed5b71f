use super::temporal::TemporalModel;
use super::{ClassicalError, Result};
use crate::quadrature::{integrate, QuadConfig};
use crate::scalar::Scalar;

const SURVIVAL_CUTOFF: f64 = 1e-10;
const MAX_PANELS: usize = 120;

/// First moment of the next event time,
/// `∫_{t_n}^∞ t λ(t) exp(-∫_{t_n}^t λ) dt`, integrated panel by panel with
/// doubling widths until the survival factor drops below `1e-10`.
pub fn expected_next_time<T: Scalar>(model: &TemporalModel<T>, history: &[T]) -> Result<T> {
    model.validate()?;
    let &t_n = history
        .last()
        .ok_or(ClassicalError::TooFewEvents { needed: 1, have: 0 })?;
    let cfg = QuadConfig::default();
    let lam0 = model.intensity(t_n, history)?;
    let mut width = if lam0 > T::zero() && lam0.is_finite() {
        T::one() / lam0
    } else {
        T::one()
    } * T::lit(0.25);
    let density = |t: T| -> T {
        let lam = model.intensity_unchecked(t, history);
        match model.compensator(t_n, t, history) {
            Ok(c) => t * lam * (-c).exp(),
            Err(_) => T::nan(),
        }
    };
    let mut total = T::zero();
    let mut a = t_n;
    let mut survival = T::one();
    for _ in 0..MAX_PANELS {
        let b = a + width;
        total += integrate(density, a, b, &cfg)?;
        survival = (-model.compensator(t_n, b, history)?).exp();
        if survival < T::lit(SURVIVAL_CUTOFF) {
            return Ok(total);
        }
        a = b;
        width = width * T::lit(2.0);
        if !width.is_finite() {
            break;
        }
    }
    Err(ClassicalError::Defective {
        survival: survival.to_f64_lossy(),
    })
}

/// Sequential first-moment forecasting: each predicted time is appended to
/// the working history before predicting the next one.
pub fn sequential_predict<T: Scalar>(model: &TemporalModel<T>, history: &[T], steps: usize) -> Result<Vec<T>> {
    if steps == 0 {
        return Err(ClassicalError::InvalidParams("prediction length must be >= 1".into()));
    }
    let mut working = history.to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let t_hat = expected_next_time(model, &working)?;
        working.push(t_hat);
        out.push(t_hat);
    }
    Ok(out)
}
