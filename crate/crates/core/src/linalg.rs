//! Dense lower-triangular helpers used by the Gaussian targets and the
//! affine transport map. Dimensions here are modest (a few hundred), so
//! straightforward loops are adequate.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Cholesky factor L of a symmetric positive-definite matrix, with Σ = L Lᵀ.
pub fn cholesky(sigma: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = sigma.nrows();
    if sigma.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: sigma.ncols(),
        });
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = sigma[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::Config(format!(
                        "matrix not positive definite at pivot {i} (value {s})"
                    )));
                }
                l[[i, j]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solves L y = b for lower-triangular L by forward substitution.
pub fn solve_lower(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    assert_eq!(b.len(), n, "dimension mismatch in solve_lower");
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    y
}

/// Solves Lᵀ y = b for lower-triangular L by back substitution.
pub fn solve_lower_transpose(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    assert_eq!(b.len(), n, "dimension mismatch in solve_lower_transpose");
    let mut y = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    y
}

/// y = L x for lower-triangular L, skipping the zero upper triangle.
pub fn lower_matvec(l: ArrayView2<f64>, x: ArrayView1<f64>) -> Array1<f64> {
    let n = l.nrows();
    assert_eq!(x.len(), n, "dimension mismatch in lower_matvec");
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut s = 0.0;
        for k in 0..=i {
            s += l[[i, k]] * x[k];
        }
        y[i] = s;
    }
    y
}

/// Solves the symmetric positive-definite system A x = b for several
/// right-hand sides via one Cholesky factorization.
pub fn solve_spd(a: ArrayView2<f64>, rhs: ArrayView2<f64>) -> Result<Array2<f64>> {
    let l = cholesky(a)?;
    let mut out = Array2::<f64>::zeros(rhs.raw_dim());
    for (j, col) in rhs.columns().into_iter().enumerate() {
        let y = solve_lower(l.view(), col);
        let x = solve_lower_transpose(l.view(), y.view());
        out.column_mut(j).assign(&x);
    }
    Ok(out)
}
