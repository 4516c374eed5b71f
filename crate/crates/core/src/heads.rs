//! Probabilistic output layers and their bijections: an exponential base for
//! intervals pushed through softsign (or shifted softplus), and a
//! multivariate Gaussian base for locations pushed through conditional
//! RealNVP couplings.

use crate::autodiff::{AutodiffError, ParamStore, Tape, Tensor, Var};
use crate::neural::{linear, NetConfig, TimeFlow};
use crate::rng::RngState;
use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HeadsError {
    #[error("interval target {value} at position {index} lies outside the flow range {range}")]
    TimeDomain { index: usize, value: f64, range: &'static str },
    #[error("coupling flows need at least 2 dimensions, got {0}")]
    FlowDimension(usize),
    #[error("cholesky diagonal is not finite at position {0}")]
    Cholesky(usize),
    #[error("exponential log-density needs z > 0, got {0}")]
    NonPositive(f64),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, HeadsError>;

const BETA_FLOOR: f64 = 1e-6;
const DIAG_FLOOR: f64 = 1e-6;

pub fn n_chol(d: usize) -> usize {
    d * (d + 1) / 2
}

pub(crate) fn init_head_params<T: Scalar>(
    s: &mut ParamStore<T>,
    cfg: &NetConfig,
    rng: &mut RngState,
) -> std::result::Result<(), AutodiffError> {
    let d = cfg.d_space;
    let lin = |s: &mut ParamStore<T>, name: String, i: usize, o: usize, rng: &mut RngState| {
        s.insert_uniform(format!("{name}.W"), &[i, o], i, rng)?;
        s.insert_uniform(format!("{name}.b"), &[o], i, rng)
    };
    lin(s, "head.time".into(), 1, 1, rng)?;
    lin(s, "head.space.l1".into(), d + 1, cfg.head_hidden, rng)?;
    lin(s, "head.space.l2".into(), cfg.head_hidden, d + n_chol(d), rng)?;
    for k in 0..cfg.flow_layers {
        for net in ["s", "u"] {
            lin(s, format!("flow.c{k}.{net}.l1"), 2 * d, cfg.flow_hidden, rng)?;
            lin(s, format!("flow.c{k}.{net}.l2"), cfg.flow_hidden, d, rng)?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- time ----

/// `β = softplus(w h + b) + 1e-6`, shape `[batch, L]`.
pub fn exp_head<'t, T: Scalar>(t: &'t Tape<T>, s: &ParamStore<T>, h_t: Var<'t, T>) -> Result<Var<'t, T>> {
    let sh = h_t.shape();
    let beta = linear(t, s, "head.time", h_t).map_err(neural_err)?.softplus().add_scalar(T::lit(BETA_FLOOR));
    Ok(beta.reshape(&sh[..sh.len() - 1])?)
}

fn neural_err(e: crate::neural::NeuralError) -> HeadsError {
    match e {
        crate::neural::NeuralError::Autodiff(a) => HeadsError::Autodiff(a),
        other => HeadsError::Autodiff(AutodiffError::Domain { op: "head", detail: other.to_string() }),
    }
}

pub fn exp_logprob(z: f64, beta: f64) -> Result<f64> {
    if !(z > 0.0) {
        return Err(HeadsError::NonPositive(z));
    }
    Ok(-beta.ln() - z / beta)
}

/// Inverse-CDF draw `-β log(1 - u)`.
pub fn exp_sample(beta: f64, rng: &mut RngState) -> f64 {
    -beta * (1.0 - rng.uniform()).ln()
}

pub fn softsign_fwd(z: f64) -> f64 {
    z / (z.abs() + 1.0)
}

pub fn softsign_inv(t: f64) -> f64 {
    t / (1.0 - t)
}

/// `log |dF/dz|` for `z > 0`.
pub fn softsign_logdet(z: f64) -> f64 {
    -2.0 * (z + 1.0).ln()
}

/// `log(1 + e^z) - log 2`, mapping `(0, ∞)` onto itself.
pub fn softplus_fwd(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p() - std::f64::consts::LN_2
}

pub fn softplus_inv(t: f64) -> f64 {
    t + (2.0 - (-t).exp()).ln()
}

pub fn softplus_logdet(z: f64) -> f64 {
    -(-z).exp().ln_1p()
}

impl TimeFlow {
    pub fn forward(self, z: f64) -> f64 {
        match self {
            Self::Softsign => softsign_fwd(z),
            Self::Softplus => softplus_fwd(z),
        }
    }

    pub fn inverse(self, t: f64) -> f64 {
        match self {
            Self::Softsign => softsign_inv(t),
            Self::Softplus => softplus_inv(t),
        }
    }

    pub fn logdet(self, z: f64) -> f64 {
        match self {
            Self::Softsign => softsign_logdet(z),
            Self::Softplus => softplus_logdet(z),
        }
    }

    pub fn in_range(self, t: f64) -> bool {
        match self {
            Self::Softsign => t > 0.0 && t < 1.0,
            Self::Softplus => t > 0.0 && t.is_finite(),
        }
    }

    fn range(self) -> &'static str {
        match self {
            Self::Softsign => "(0, 1)",
            Self::Softplus => "(0, inf)",
        }
    }
}

/// Scalar density of an interval: `log p_z(F⁻¹(t)) - log|F'(F⁻¹(t))|`.
pub fn time_logprob_value(flow: TimeFlow, t: f64, beta: f64) -> Result<f64> {
    if !flow.in_range(t) {
        return Err(HeadsError::TimeDomain { index: 0, value: t, range: flow.range() });
    }
    let z = flow.inverse(t);
    Ok(exp_logprob(z, beta)? - flow.logdet(z))
}

/// `log p(t)` for every slot, `beta` and `target` both `[batch, L]`.
pub fn log_prob_time<'t, T: Scalar>(flow: TimeFlow, beta: Var<'t, T>, target: &Tensor<T>) -> Result<Var<'t, T>> {
    let tape = beta.tape();
    let mut z = Vec::with_capacity(target.len());
    let mut corr = Vec::with_capacity(target.len());
    for (i, &tv) in target.data().iter().enumerate() {
        let tf = tv.to_f64_lossy();
        if !flow.in_range(tf) {
            return Err(HeadsError::TimeDomain { index: i, value: tf, range: flow.range() });
        }
        let zi = flow.inverse(tf);
        z.push(T::lit(zi));
        corr.push(T::lit(-flow.logdet(zi)));
    }
    let shape = target.shape().to_vec();
    let z = tape.constant(Tensor::new(shape.clone(), z)?);
    let corr = tape.constant(Tensor::new(shape, corr)?);
    Ok(beta.log()?.neg().sub(z.div(beta)?)?.add(corr)?)
}

// --------------------------------------------------------------- space ----

/// Mean and Cholesky factor of each slot's Gaussian, kept as per-entry
/// `[batch, L]` handles.
pub struct MvnOut<'t, T> {
    pub mu: Vec<Var<'t, T>>,
    /// `chol[i][j]` for `j <= i`.
    pub chol: Vec<Vec<Var<'t, T>>>,
}

fn component<'t, T: Scalar>(x: Var<'t, T>, i: usize) -> Result<Var<'t, T>> {
    let sh = x.shape();
    let last = sh.len() - 1;
    Ok(x.slice(last, i, i + 1)?.reshape(&sh[..last])?)
}

/// Gaussian parameters from an ELU network over `[h_x, t]`.
pub fn mvn_head<'t, T: Scalar>(
    t: &'t Tape<T>,
    s: &ParamStore<T>,
    d: usize,
    h_x: Var<'t, T>,
    t_in: Var<'t, T>,
) -> Result<MvnOut<'t, T>> {
    let last = h_x.shape().len() - 1;
    let inp = Var::concat(&[h_x, t_in], last)?;
    let h = linear(t, s, "head.space.l1", inp).map_err(neural_err)?.elu();
    let raw = linear(t, s, "head.space.l2", h).map_err(neural_err)?;
    let mu = (0..d).map(|i| component(raw, i)).collect::<Result<Vec<_>>>()?;
    let mut chol = Vec::with_capacity(d);
    let mut k = d;
    for i in 0..d {
        let mut row = Vec::with_capacity(i + 1);
        for j in 0..=i {
            let c = component(raw, k)?;
            k += 1;
            row.push(if i == j { c.softplus().add_scalar(T::lit(DIAG_FLOOR)) } else { c });
        }
        chol.push(row);
    }
    for (i, row) in chol.iter().enumerate() {
        if !row[i].value().all_finite() {
            return Err(HeadsError::Cholesky(i));
        }
    }
    Ok(MvnOut { mu, chol })
}

impl<'t, T: Scalar> MvnOut<'t, T> {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Forward substitution `y = L⁻¹ (z - μ)`, `z` shaped `[batch, L, d]`.
    pub fn log_prob(&self, z: Var<'t, T>) -> Result<Var<'t, T>> {
        let d = self.dim();
        let mut ys: Vec<Var<'t, T>> = Vec::with_capacity(d);
        let mut quad: Option<Var<'t, T>> = None;
        let mut logdiag: Option<Var<'t, T>> = None;
        for i in 0..d {
            let mut r = component(z, i)?.sub(self.mu[i])?;
            for (j, y) in ys.iter().enumerate() {
                r = r.sub(self.chol[i][j].mul(*y)?)?;
            }
            let y = r.div(self.chol[i][i])?;
            let q = y.mul(y)?;
            quad = Some(match quad {
                Some(a) => a.add(q)?,
                None => q,
            });
            let ld = self.chol[i][i].log()?;
            logdiag = Some(match logdiag {
                Some(a) => a.add(ld)?,
                None => ld,
            });
            ys.push(y);
        }
        let c = T::lit(-0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln());
        Ok(quad.expect("d >= 1").scale(T::lit(-0.5)).sub(logdiag.expect("d >= 1"))?.add_scalar(c))
    }

    /// Plain values: means `[n, d]` and dense lower factors `[n, d, d]`.
    pub fn values(&self) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
        let d = self.dim();
        let mu: Vec<Vec<f64>> = self.mu.iter().map(|v| v.value().to_f64()).collect();
        let ch: Vec<Vec<Vec<f64>>> = self.chol.iter().map(|r| r.iter().map(|v| v.value().to_f64()).collect()).collect();
        let n = mu[0].len();
        let means = (0..n).map(|k| (0..d).map(|i| mu[i][k]).collect()).collect();
        let chols = (0..n)
            .map(|k| (0..d).map(|i| (0..d).map(|j| if j <= i { ch[i][j][k] } else { 0.0 }).collect()).collect())
            .collect();
        (means, chols)
    }
}

/// `μ + L ε`.
pub fn mvn_sample(mu: &[f64], chol: &[Vec<f64>], rng: &mut RngState) -> Vec<f64> {
    let eps: Vec<f64> = (0..mu.len()).map(|_| rng.normal()).collect();
    mu.iter()
        .enumerate()
        .map(|(i, m)| m + (0..=i).map(|j| chol[i][j] * eps[j]).sum::<f64>())
        .collect()
}

// ---------------------------------------------------------------- flow ----

fn coupling_mask<T: Scalar>(d: usize, k: usize) -> (Tensor<T>, Tensor<T>) {
    let m: Vec<f64> = (0..d).map(|i| if (i + k) % 2 == 0 { 1.0 } else { 0.0 }).collect();
    let inv: Vec<f64> = m.iter().map(|v| 1.0 - v).collect();
    (Tensor::from_f64(vec![d], &m).expect("mask"), Tensor::from_f64(vec![d], &inv).expect("mask"))
}

fn coupling_nets<'t, T: Scalar>(
    t: &'t Tape<T>,
    s: &ParamStore<T>,
    cfg: &NetConfig,
    k: usize,
    kept: Var<'t, T>,
    ctx: Var<'t, T>,
    free: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let last = kept.shape().len() - 1;
    let inp = Var::concat(&[kept, ctx], last)?;
    let net = |name: &str| -> Result<Var<'t, T>> {
        let h = linear(t, s, &format!("flow.c{k}.{name}.l1"), inp).map_err(neural_err)?.elu();
        linear(t, s, &format!("flow.c{k}.{name}.l2"), h).map_err(neural_err)
    };
    let sc = net("s")?.tanh().scale(T::lit(cfg.flow_scale)).mul(free)?;
    let sh = net("u")?.mul(free)?;
    Ok((sc, sh))
}

fn check_flow_dim(d: usize) -> Result<()> {
    if d < 2 {
        return Err(HeadsError::FlowDimension(d));
    }
    Ok(())
}

/// Base sample `z` to location `x`; returns `(x, log|det ∂x/∂z|)`.
pub fn realnvp_forward<'t, T: Scalar>(
    t: &'t Tape<T>,
    s: &ParamStore<T>,
    cfg: &NetConfig,
    z: Var<'t, T>,
    ctx: Var<'t, T>,
) -> Result<(Var<'t, T>, Option<Var<'t, T>>)> {
    let d = *z.shape().last().expect("rank");
    check_flow_dim(d)?;
    let last = z.shape().len() - 1;
    let mut x = z;
    let mut logdet: Option<Var<'t, T>> = None;
    for k in 0..cfg.flow_layers {
        let (m, inv) = coupling_mask::<T>(d, k);
        let (m, inv) = (t.constant(m), t.constant(inv));
        let kept = x.mul(m)?;
        let (sc, sh) = coupling_nets(t, s, cfg, k, kept, ctx, inv)?;
        x = x.mul(sc.exp())?.add(sh)?;
        let ld = sc.sum_axis(last)?;
        logdet = Some(match logdet {
            Some(a) => a.add(ld)?,
            None => ld,
        });
    }
    Ok((x, logdet))
}

/// Location `x` back to the base; returns `(z, log|det ∂z/∂x|)`.
pub fn realnvp_inverse<'t, T: Scalar>(
    t: &'t Tape<T>,
    s: &ParamStore<T>,
    cfg: &NetConfig,
    x: Var<'t, T>,
    ctx: Var<'t, T>,
) -> Result<(Var<'t, T>, Option<Var<'t, T>>)> {
    let d = *x.shape().last().expect("rank");
    check_flow_dim(d)?;
    let last = x.shape().len() - 1;
    let mut z = x;
    let mut logdet: Option<Var<'t, T>> = None;
    for k in (0..cfg.flow_layers).rev() {
        let (m, inv) = coupling_mask::<T>(d, k);
        let (m, inv) = (t.constant(m), t.constant(inv));
        let kept = z.mul(m)?;
        let (sc, sh) = coupling_nets(t, s, cfg, k, kept, ctx, inv)?;
        z = z.sub(sh)?.mul(sc.neg().exp())?;
        let ld = sc.sum_axis(last)?.neg();
        logdet = Some(match logdet {
            Some(a) => a.add(ld)?,
            None => ld,
        });
    }
    Ok((z, logdet))
}

/// `log p(x)` for every slot: pull `x` back through the flow, score under the
/// Gaussian and add the inverse log-determinant.
pub fn log_prob_space<'t, T: Scalar>(
    t: &'t Tape<T>,
    s: &ParamStore<T>,
    cfg: &NetConfig,
    target: &Tensor<T>,
    mvn: &MvnOut<'t, T>,
    ctx: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let x = t.constant(target.clone());
    let (z, ld) = realnvp_inverse(t, s, cfg, x, ctx)?;
    let base = mvn.log_prob(z)?;
    Ok(match ld {
        Some(ld) => base.add(ld)?,
        None => base,
    })
}

/// Forward flow on plain arrays, e.g. for sampling. `z`, `ctx`: `[n, d]`.
pub fn realnvp_forward_values<T: Scalar>(
    s: &ParamStore<T>,
    cfg: &NetConfig,
    z: &Tensor<T>,
    ctx: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let t = Tape::new();
    let (x, ld) = realnvp_forward(&t, s, cfg, t.constant(z.clone()), t.constant(ctx.clone()))?;
    let n = z.len() / z.shape().last().copied().unwrap_or(1);
    Ok((x.value(), ld.map(|v| v.value().into_data()).unwrap_or_else(|| vec![T::zero(); n])))
}

pub fn realnvp_inverse_values<T: Scalar>(
    s: &ParamStore<T>,
    cfg: &NetConfig,
    x: &Tensor<T>,
    ctx: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let t = Tape::new();
    let (z, ld) = realnvp_inverse(&t, s, cfg, t.constant(x.clone()), t.constant(ctx.clone()))?;
    let n = x.len() / x.shape().last().copied().unwrap_or(1);
    Ok((z.value(), ld.map(|v| v.value().into_data()).unwrap_or_else(|| vec![T::zero(); n])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softsign_basics() {
        assert_eq!(softsign_fwd(1.0), 0.5);
        // 1 - t loses digits as z grows, so the bound scales with 1 + z.
        for k in 1..=100_000 {
            let z = k as f64 * 0.01;
            let back = softsign_inv(softsign_fwd(z));
            assert!((back - z).abs() / z <= 1e-14 * (1.0 + z), "z = {z}");
        }
    }

    #[test]
    fn exp_logprob_at_origin() {
        assert!(exp_logprob(1e-300, 1.0).unwrap().abs() < 1e-12);
        assert!(exp_logprob(0.0, 1.0).is_err());
    }

    #[test]
    fn softplus_flow_inverts() {
        for z in [0.01, 0.5, 3.0, 40.0] {
            assert!((softplus_inv(softplus_fwd(z)) - z).abs() < 1e-10);
        }
    }

    #[test]
    fn time_density_closed_form() {
        for t in [0.1, 0.37, 0.5, 0.9] {
            let want = -2.0 * (1.0f64 - t).ln() - t / (1.0 - t);
            let got = time_logprob_value(TimeFlow::Softsign, t, 1.0).unwrap();
            assert!((got - want).abs() < 1e-10);
        }
        assert!(matches!(time_logprob_value(TimeFlow::Softsign, 1.0, 1.0), Err(HeadsError::TimeDomain { .. })));
    }
}
