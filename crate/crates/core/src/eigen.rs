//! Symmetric eigendecomposition via cyclic Jacobi rotations.
//!
//! The matrices this crate decomposes are small Gram matrices (adapter rank
//! by adapter rank, occasionally input-dimension sized for cross-checks), so
//! the Jacobi method's accuracy and simplicity beat anything fancier:
//! rotations drive the off-diagonal mass to zero and every intermediate step
//! is orthogonal by construction. Eigenvalues come back sorted descending
//! with their eigenvector columns, and each eigenvector's sign is fixed
//! deterministically (largest-magnitude component positive) so repeated runs
//! and downstream reports are byte-stable.

use crate::error::CoreError;
use crate::mat::Mat;

/// Relative asymmetry tolerated before the input is rejected.
const ASYMMETRY_REL_TOL: f64 = 1e-10;

/// Sweep cutoff: off-diagonal Frobenius mass relative to the matrix norm.
const OFF_DIAGONAL_REL_TOL: f64 = 1e-14;

/// Hard cap on Jacobi sweeps; reached only for pathological input.
const MAX_SWEEPS: usize = 60;

/// Residual bound the decomposition must satisfy: `||G V - V Λ||_F <= RESIDUAL_REL_TOL * ||G||_F`.
pub const RESIDUAL_REL_TOL: f64 = 1e-9;

/// Result of [`sym_eigen`]: eigenvalues sorted descending, eigenvectors as
/// the corresponding columns of an orthonormal matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Mat,
}

/// Decomposes a symmetric matrix `G` as `V Λ Vᵀ`.
///
/// The input is symmetrized as `(G + Gᵀ)/2` before solving, but asymmetry
/// beyond `1e-10` (relative to `||G||_F`) is rejected rather than silently
/// averaged away.
///
/// # Errors
///
/// * empty (0x0) or non-square input,
/// * non-finite entries,
/// * asymmetry beyond tolerance,
/// * failure to meet the residual bound `||G V - V Λ||_F <= 1e-9 ||G||_F`
///   (not observed in practice; kept as a hard guarantee).
pub fn sym_eigen(g: &Mat) -> Result<SymEigen, CoreError> {
    let n = g.rows();
    if n == 0 {
        return Err(CoreError::invalid("symmetric eigendecomposition", "matrix is empty (0x0)"));
    }
    if g.cols() != n {
        return Err(CoreError::invalid(
            "symmetric eigendecomposition",
            format!("matrix is {}x{}, expected square", g.rows(), g.cols()),
        ));
    }
    if !g.all_finite() {
        return Err(CoreError::invalid("symmetric eigendecomposition", "non-finite entries"));
    }

    let g_norm = g.frob_norm();
    let mut asym_sq = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = g[(i, j)] - g[(j, i)];
            asym_sq += 2.0 * d * d;
        }
    }
    if asym_sq.sqrt() > ASYMMETRY_REL_TOL * g_norm.max(f64::MIN_POSITIVE) {
        return Err(CoreError::invalid(
            "symmetric eigendecomposition",
            format!(
                "asymmetry {:.3e} exceeds {:.1e} of ||G||_F = {:.3e}",
                asym_sq.sqrt(),
                ASYMMETRY_REL_TOL,
                g_norm
            ),
        ));
    }

    // Work on the symmetrized copy.
    let mut a = Mat::from_fn(n, n, |i, j| 0.5 * (g[(i, j)] + g[(j, i)]));
    let mut v = Mat::identity(n);

    let off_tol = OFF_DIAGONAL_REL_TOL * g_norm.max(f64::MIN_POSITIVE);
    for _sweep in 0..MAX_SWEEPS {
        let mut off_sq = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off_sq += 2.0 * a[(p, q)] * a[(p, q)];
            }
        }
        if off_sq.sqrt() <= off_tol {
            break;
        }

        for p in 0..n {
            for q in (p + 1)..n {
                rotate(&mut a, &mut v, p, q);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).expect("finite eigenvalues"));
    let values: Vec<f64> = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = v.select_columns(&order);
    canonicalize_signs(&mut vectors);

    // Hard postcondition: the factorization must actually reproduce G.
    let sym = Mat::from_fn(n, n, |i, j| 0.5 * (g[(i, j)] + g[(j, i)]));
    let gv = sym.matmul(&vectors);
    let mut vl = vectors.clone();
    for j in 0..n {
        for i in 0..n {
            vl[(i, j)] *= values[j];
        }
    }
    let residual = gv.sub(&vl).frob_norm();
    if residual > RESIDUAL_REL_TOL * g_norm.max(f64::MIN_POSITIVE) {
        return Err(CoreError::invalid(
            "symmetric eigendecomposition",
            format!("residual {residual:.3e} exceeds bound; matrix may be pathological"),
        ));
    }

    Ok(SymEigen { values, vectors })
}

/// One Jacobi rotation zeroing `a[(p, q)]`, accumulated into `v`.
fn rotate(a: &mut Mat, v: &mut Mat, p: usize, q: usize) {
    let apq = a[(p, q)];
    if apq == 0.0 {
        return;
    }
    let diff = a[(q, q)] - a[(p, p)];

    // tan of the rotation angle, with the large-theta guard from the classic
    // formulation so theta^2 cannot overflow.
    let t = if apq.abs() * 1e15 < diff.abs() {
        apq / diff
    } else {
        let theta = diff / (2.0 * apq);
        let t = 1.0 / (theta.abs() + (theta * theta + 1.0).sqrt());
        if theta < 0.0 {
            -t
        } else {
            t
        }
    };

    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let tau = s / (1.0 + c);

    let app = a[(p, p)];
    let aqq = a[(q, q)];
    a[(p, p)] = app - t * apq;
    a[(q, q)] = aqq + t * apq;
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;

    let n = a.rows();
    for i in 0..n {
        if i == p || i == q {
            continue;
        }
        let aip = a[(i, p)];
        let aiq = a[(i, q)];
        let new_ip = aip - s * (aiq + tau * aip);
        let new_iq = aiq + s * (aip - tau * aiq);
        a[(i, p)] = new_ip;
        a[(p, i)] = new_ip;
        a[(i, q)] = new_iq;
        a[(q, i)] = new_iq;
    }

    for i in 0..v.rows() {
        let vip = v[(i, p)];
        let viq = v[(i, q)];
        v[(i, p)] = vip - s * (viq + tau * vip);
        v[(i, q)] = viq + s * (vip - tau * viq);
    }
}

/// Flips eigenvector signs so the largest-magnitude component (first such
/// component on exact ties) is non-negative.
fn canonicalize_signs(vectors: &mut Mat) {
    let (n, k) = (vectors.rows(), vectors.cols());
    for j in 0..k {
        let mut best = 0;
        let mut best_abs = -1.0;
        for i in 0..n {
            let a = vectors[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if vectors[(best, j)] < 0.0 {
            for i in 0..n {
                vectors[(i, j)] = -vectors[(i, j)];
            }
        }
    }
}
