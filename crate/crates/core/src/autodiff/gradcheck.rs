use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::Result;
use crate::scalar::Scalar;
use indexmap::IndexMap;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over the entries of each parameter.
    pub per_param: IndexMap<String, f64>,
    pub max_rel_err: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }
}

/// Relative error with a floor on the denominator so that gradients which are
/// both tiny do not blow up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `h` on every trainable entry of `store`.
pub fn grad_check<T, F>(f: F, store: &ParamStore<T>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: for<'t> Fn(&'t Tape<T>, &ParamStore<T>) -> Result<Var<'t, T>>,
{
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    let grads = tape.backward(loss)?.params(store);
    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let t = Tape::new();
        let l = f(&t, s)?;
        Ok(l.value().item().to_f64_lossy())
    };
    let mut work = store.clone();
    let mut per_param = IndexMap::new();
    let mut max_rel_err: f64 = 0.0;
    for (name, g) in &grads {
        let mut worst: f64 = 0.0;
        for i in 0..g.len() {
            let orig = work.value(name)?.data()[i];
            work.get_mut(name).expect("present").value.data_mut()[i] = orig + T::lit(h);
            let up = eval(&work)?;
            work.get_mut(name).expect("present").value.data_mut()[i] = orig - T::lit(h);
            let down = eval(&work)?;
            work.get_mut(name).expect("present").value.data_mut()[i] = orig;
            let num = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(g.data()[i].to_f64_lossy(), num));
        }
        max_rel_err = max_rel_err.max(worst);
        per_param.insert(name.clone(), worst);
    }
    Ok(GradCheckReport { per_param, max_rel_err, tol })
}
