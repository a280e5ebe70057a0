//! Householder QR for extracting orthonormal column bases.
//!
//! The factorization is deliberately plain: no column pivoting (callers are
//! expected to have restricted their matrices to a well-conditioned set of
//! columns first), but with two touches that make it dependable here:
//!
//! * numerically zero input columns (`||col|| <= 1e-12 ||M||_F`) are dropped
//!   before factoring, so degenerate adapters cannot poison the basis;
//! * the sign convention is fixed (non-negative `R` diagonal), which makes
//!   `Q` deterministic and keeps downstream reports byte-stable.
//!
//! If a column becomes numerically zero *mid*-factorization (an exact linear
//! dependency that survived the input screen), the corresponding `R` diagonal
//! entry is zero and `Q` still has orthonormal columns; its span may then
//! strictly contain the column span of the input. Rank handling is the
//! caller's job — see [`crate::subspace::effective_subspace`].

use crate::error::CoreError;
use crate::mat::Mat;

/// Relative threshold below which an input column counts as zero.
pub const ZERO_COLUMN_REL_TOL: f64 = 1e-12;

/// Orthonormal basis produced by [`qr_orthonormal_basis`].
#[derive(Debug, Clone)]
pub struct OrthonormalBasis {
    /// `d x k` matrix with orthonormal columns.
    pub q: Mat,
    /// `k x k` upper triangular factor with non-negative diagonal;
    /// `q * r` reconstructs the kept input columns.
    pub r: Mat,
    /// Number of input columns actually factored (after dropping zeros).
    pub source_rank: usize,
    /// Indices of input columns that were kept, in order.
    pub kept: Vec<usize>,
    /// Indices of input columns dropped as numerically zero.
    pub dropped: Vec<usize>,
}

/// Computes a thin Householder QR of `m`, dropping numerically zero columns.
///
/// # Errors
///
/// * `m` has no columns, or more columns than rows,
/// * non-finite entries,
/// * the factorization fails its own orthonormality or reconstruction check
///   (defensive; not observed for finite input).
pub fn qr_orthonormal_basis(m: &Mat) -> Result<OrthonormalBasis, CoreError> {
    let (d, k_in) = (m.rows(), m.cols());
    if k_in == 0 {
        return Err(CoreError::invalid("qr", "input has no columns"));
    }
    if k_in > d {
        return Err(CoreError::invalid(
            "qr",
            format!("input is {d}x{k_in}; more columns than rows is unsupported"),
        ));
    }
    if !m.all_finite() {
        return Err(CoreError::invalid("qr", "non-finite entries"));
    }

    let m_norm = m.frob_norm();
    let drop_tol = ZERO_COLUMN_REL_TOL * m_norm;
    let mut kept = Vec::with_capacity(k_in);
    let mut dropped = Vec::new();
    for j in 0..k_in {
        let col_norm = m.col(j).iter().map(|v| v * v).sum::<f64>().sqrt();
        if col_norm <= drop_tol {
            dropped.push(j);
        } else {
            kept.push(j);
        }
    }

    let k = kept.len();
    let mut w = m.select_columns(&kept);
    // Reflectors as (v, beta) with v starting at row j; beta == 0 marks identity.
    let mut reflectors: Vec<(Vec<f64>, f64)> = Vec::with_capacity(k);

    for j in 0..k {
        let mut v: Vec<f64> = (j..d).map(|i| w[(i, j)]).collect();
        let norm_x = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm_x == 0.0 {
            reflectors.push((v, 0.0));
            continue;
        }
        let sign = if v[0] < 0.0 { -1.0 } else { 1.0 };
        v[0] += sign * norm_x;
        let beta = 2.0 / v.iter().map(|x| x * x).sum::<f64>();
        // Apply H = I - beta v vᵀ to the trailing columns of w.
        for c in j..k {
            let mut dot = 0.0;
            for (off, &vi) in v.iter().enumerate() {
                dot += vi * w[(j + off, c)];
            }
            let scale = beta * dot;
            for (off, &vi) in v.iter().enumerate() {
                w[(j + off, c)] -= scale * vi;
            }
        }
        reflectors.push((v, beta));
    }

    // R is the upper-triangular top of the transformed matrix.
    let mut r = Mat::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            r[(i, j)] = w[(i, j)];
        }
    }

    // Q = H_0 ... H_{k-1} applied to the first k columns of the identity.
    let mut q = Mat::from_fn(d, k, |i, j| if i == j { 1.0 } else { 0.0 });
    for j in (0..k).rev() {
        let (v, beta) = &reflectors[j];
        if *beta == 0.0 {
            continue;
        }
        for c in 0..k {
            let mut dot = 0.0;
            for (off, &vi) in v.iter().enumerate() {
                dot += vi * q[(j + off, c)];
            }
            let scale = beta * dot;
            for (off, &vi) in v.iter().enumerate() {
                q[(j + off, c)] -= scale * vi;
            }
        }
    }

    // Fix signs: non-negative R diagonal.
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            for c in j..k {
                r[(j, c)] = -r[(j, c)];
            }
            for i in 0..d {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }

    let basis = OrthonormalBasis { q, r, source_rank: k, kept, dropped };
    validate(&basis, m, m_norm)?;
    Ok(basis)
}

/// Defensive postcondition check: orthonormal `Q`, reconstruction of the kept
/// columns, non-negative `R` diagonal.
fn validate(basis: &OrthonormalBasis, m: &Mat, m_norm: f64) -> Result<(), CoreError> {
    let k = basis.source_rank;
    let qtq = basis.q.t_matmul(&basis.q);
    let defect = qtq.max_abs_diff(&Mat::identity(k));
    if defect > 1e-10 {
        return Err(CoreError::invalid("qr", format!("Q lost orthonormality (defect {defect:.3e})")));
    }
    let recon = basis.q.matmul(&basis.r);
    let kept_m = m.select_columns(&basis.kept);
    let err = recon.sub(&kept_m).frob_norm();
    if err > 1e-10 * m_norm.max(f64::MIN_POSITIVE) {
        return Err(CoreError::invalid("qr", format!("QR reconstruction error {err:.3e} too large")));
    }
    for j in 0..k {
        if basis.r[(j, j)] < 0.0 {
            return Err(CoreError::invalid("qr", "negative R diagonal after sign fix"));
        }
    }
    Ok(())
}
