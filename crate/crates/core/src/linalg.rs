//! Small dense linear algebra on row-major `d x d` matrices.

use crate::scalar::Scalar;

/// Lower Cholesky factor of an SPD matrix, or `None` if not positive definite.
pub fn cholesky<T: Scalar>(a: &[T], d: usize) -> Option<Vec<T>> {
    let mut l = vec![T::zero(); d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= T::zero() || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Solves `L y = b` for lower-triangular `L`.
pub fn forward_solve<T: Scalar>(l: &[T], b: &[T], d: usize) -> Vec<T> {
    let mut y = vec![T::zero(); d];
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * d + k] * y[k];
        }
        y[i] = s / l[i * d + i];
    }
    y
}

/// `log|L Lᵀ|` from the Cholesky factor.
pub fn chol_logdet<T: Scalar>(l: &[T], d: usize) -> T {
    (0..d).map(|i| l[i * d + i].ln()).sum::<T>() * T::lit(2.0)
}

/// Log-density of `N(mean, L Lᵀ)` at `x`.
pub fn mvn_logpdf_chol<T: Scalar>(x: &[T], mean: &[T], l: &[T]) -> T {
    let d = x.len();
    let r: Vec<T> = x.iter().zip(mean).map(|(a, b)| *a - *b).collect();
    let y = forward_solve(l, &r, d);
    let quad: T = y.iter().map(|v| *v * *v).sum();
    let half = T::lit(0.5);
    -half * quad - half * chol_logdet(l, d) - half * T::lit(d as f64) * T::lit(std::f64::consts::TAU).ln()
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn invert<T: Scalar>(a: &[T], d: usize) -> Option<Vec<T>> {
    let mut m = a.to_vec();
    let mut inv = vec![T::zero(); d * d];
    for i in 0..d {
        inv[i * d + i] = T::one();
    }
    for col in 0..d {
        let piv = (col..d).max_by(|&r1, &r2| {
            m[r1 * d + col]
                .abs()
                .partial_cmp(&m[r2 * d + col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if m[piv * d + col].abs() <= T::epsilon() {
            return None;
        }
        for k in 0..d {
            m.swap(col * d + k, piv * d + k);
            inv.swap(col * d + k, piv * d + k);
        }
        let p = m[col * d + col];
        for k in 0..d {
            m[col * d + k] /= p;
            inv[col * d + k] /= p;
        }
        for r in 0..d {
            if r != col {
                let f = m[r * d + col];
                for k in 0..d {
                    let mv = m[col * d + k];
                    let iv = inv[col * d + k];
                    m[r * d + k] -= f * mv;
                    inv[r * d + k] -= f * iv;
                }
            }
        }
    }
    Some(inv)
}

/// Determinant by LU elimination.
pub fn determinant<T: Scalar>(a: &[T], d: usize) -> T {
    let mut m = a.to_vec();
    let mut det = T::one();
    for col in 0..d {
        let piv = (col..d)
            .max_by(|&r1, &r2| {
                m[r1 * d + col]
                    .abs()
                    .partial_cmp(&m[r2 * d + col].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(col);
        if m[piv * d + col] == T::zero() {
            return T::zero();
        }
        if piv != col {
            for k in 0..d {
                m.swap(col * d + k, piv * d + k);
            }
            det = -det;
        }
        let p = m[col * d + col];
        det *= p;
        for r in col + 1..d {
            let f = m[r * d + col] / p;
            for k in col..d {
                let v = m[col * d + k];
                m[r * d + k] -= f * v;
            }
        }
    }
    det
}
