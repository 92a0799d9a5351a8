//! Small dense kernels used by the factorization and regression code.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Cholesky factor `L` (lower) of a symmetric positive definite matrix.
pub fn cholesky(a: ArrayView2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Solves `L L^T x = b` given the Cholesky factor.
pub fn cholesky_solve(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[[k, i]] * x[k];
        }
        x[i] = s / l[[i, i]];
    }
    x
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub fn solve_spd(a: ArrayView2<f64>, b: ArrayView1<f64>) -> Option<Array1<f64>> {
    cholesky(a).map(|l| cholesky_solve(l.view(), b))
}

/// Largest eigenvalue of a symmetric positive semidefinite matrix, by power iteration.
///
/// Returns an upper-biased estimate: the result is at least the Rayleigh
/// quotient reached, scaled by a small safety margin.
pub fn max_eigenvalue_psd(a: ArrayView2<f64>) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let trace: f64 = (0..n).map(|i| a[[i, i]]).sum();
    if trace <= 0.0 {
        return 0.0;
    }
    let mut v = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    // Deterministic, slightly asymmetric start avoids orthogonality to the top eigenvector.
    for (i, x) in v.iter_mut().enumerate() {
        *x += 1e-3 * (i as f64 + 1.0);
    }
    let mut lambda = 0.0;
    for _ in 0..100 {
        let w = a.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w) / v.dot(&v);
        v = w / norm;
        if (next - lambda).abs() <= 1e-12 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    (lambda * 1.01).min(trace)
}

pub fn frobenius_sq(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Serde adapter storing an `Array2<f64>` as a list of dense rows.
pub mod serde_rows {
    use ndarray::Array2;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(a: &Array2<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = a.outer_iter().map(|r| r.to_vec()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Array2<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        from_rows(&rows).map_err(D::Error::custom)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Array2<f64>, String> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err("ragged rows".into());
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Array2::from_shape_vec((rows.len(), cols), flat).map_err(|e| e.to_string())
    }
}
