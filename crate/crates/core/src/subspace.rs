//! Subspace analysis for low-rank adapter factors.
//!
//! A rank-`r` adapter update `B·A` often has far fewer than `r` numerically
//! meaningful directions. This module measures that: the Gram matrix of the
//! input-side factor, the *effective subspace* spanned by its dominant
//! eigenvectors, and the span-comparison machinery (projectors and principal
//! angles) used to justify working with `B` instead of the full product.
//!
//! Two facts are checked computationally rather than assumed:
//!
//! 1. when `A` has full row rank, the column space of `B·A` equals the column
//!    space of `B` ([`verify_proposition_1`]);
//! 2. restricting `B` to the effective eigenvector block of `A`'s Gram matrix
//!    spans the same space as multiplying by the rank-`k` truncation of `A`
//!    ([`verify_proposition_2`]), excluding zero-singular-value directions.
//!
//! The projector route ([`column_space_projector`], built on modified
//! Gram-Schmidt) is deliberately a different algorithm from the Householder
//! QR used by the merge path, so the two can serve as independent
//! cross-checks of one another.

use crate::eigen::sym_eigen;
use crate::error::CoreError;
use crate::mat::Mat;
use crate::qr::qr_orthonormal_basis;

/// Default tolerance for declaring two spans equal (projector residual or
/// largest principal angle).
pub const SPAN_EQUALITY_TOL: f64 = 1e-8;

/// Smallest `sigma_min / sigma_max` ratio accepted as "full row rank".
pub const FULL_ROW_RANK_RATIO: f64 = 1e-10;

/// Relative residual below which a column is dropped by the Gram-Schmidt
/// basis (and hence by the projector oracle).
const MGS_DROP_REL_TOL: f64 = 1e-12;

/// `A·Aᵀ`, with exact symmetry by construction (each off-diagonal pair is the
/// same dot product computed once).
pub fn gram_matrix(a: &Mat) -> Mat {
    let r = a.rows();
    let mut g = Mat::zeros(r, r);
    for i in 0..r {
        for j in i..r {
            let dot: f64 = a.row(i).iter().zip(a.row(j)).map(|(&x, &y)| x * y).sum();
            g[(i, j)] = dot;
            g[(j, i)] = dot;
        }
    }
    g
}

/// The dominant eigenvector block of an adapter factor's Gram matrix.
#[derive(Debug, Clone)]
pub struct EffectiveSubspace {
    /// All `r` eigenvalues of `A·Aᵀ`, sorted descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// `r x k` matrix whose columns are the eigenvectors kept.
    pub v_eff: Mat,
    /// Number of directions kept.
    pub k: usize,
    /// The relative threshold that was applied.
    pub tau: f64,
}

/// Keeps the eigenvectors of `A·Aᵀ` whose eigenvalues satisfy the *strict*
/// inequality `lambda_i > tau * lambda_1`.
///
/// The inequality being strict matters at the boundary: an eigenvalue exactly
/// equal to `tau * lambda_1` is excluded. If `lambda_1 == 0` (zero factor)
/// nothing qualifies and `k == 0`.
///
/// # Errors
///
/// * `A` has no rows,
/// * `tau` outside the open interval `(0, 1)`,
/// * the Gram matrix fails its eigendecomposition or comes back with a
///   significantly negative eigenvalue (impossible for finite input).
pub fn effective_subspace(a: &Mat, tau: f64) -> Result<EffectiveSubspace, CoreError> {
    if a.rows() == 0 {
        return Err(CoreError::invalid("effective_subspace", "adapter factor has no rows"));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(CoreError::invalid(
            "effective_subspace",
            format!("tau must lie in (0, 1), got {tau}"),
        ));
    }
    let g = gram_matrix(a);
    let eig = sym_eigen(&g)?;

    let lambda_1 = eig.values[0];
    if let Some(&min) = eig.values.last() {
        if min < -1e-10 * lambda_1.max(0.0) {
            return Err(CoreError::invalid(
                "effective_subspace",
                format!("Gram matrix produced negative eigenvalue {min:.3e}"),
            ));
        }
    }
    let eigenvalues: Vec<f64> = eig.values.iter().map(|&l| l.max(0.0)).collect();

    let k = eigenvalues.iter().filter(|&&l| l > tau * lambda_1).count();
    let v_eff = eig.vectors.select_columns(&(0..k).collect::<Vec<_>>());

    Ok(EffectiveSubspace { eigenvalues, v_eff, k, tau })
}

/// Orthonormal basis of the column space of `m`, by modified Gram-Schmidt
/// with a second orthogonalization pass. Columns whose residual drops below
/// `1e-12 ||m||_F` are treated as dependent and skipped, so the result is
/// rank-revealing. Returns a `rows x rank` matrix (zero columns for a zero
/// input).
pub fn mgs_column_basis(m: &Mat) -> Mat {
    let (d, k) = (m.rows(), m.cols());
    let tol = MGS_DROP_REL_TOL * m.frob_norm();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for j in 0..k {
        let mut y = m.col(j);
        // Two passes of projection: "twice is enough" keeps the basis
        // orthonormal to working precision even for ill-conditioned input.
        for _ in 0..2 {
            for q in &basis {
                let dot: f64 = q.iter().zip(&y).map(|(&a, &b)| a * b).sum();
                for (yi, &qi) in y.iter_mut().zip(q) {
                    *yi -= dot * qi;
                }
            }
        }
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > tol {
            for v in y.iter_mut() {
                *v /= norm;
            }
            basis.push(y);
        }
    }
    let rank = basis.len();
    Mat::from_fn(d, rank, |i, j| basis[j][i])
}

/// Brute-force orthogonal projector onto the column space of `m`:
/// `P = Q Qᵀ` with `Q` from [`mgs_column_basis`].
///
/// This is the slow, obviously-correct route — `P` is `rows x rows` dense —
/// meant for verification against the structured paths, not for production
/// merging.
pub fn column_space_projector(m: &Mat) -> Mat {
    let q = mgs_column_basis(m);
    q.matmul_t(&q)
}

/// Largest principal angle between the spans of two orthonormal bases, in
/// radians.
///
/// Computed through sines (`sigma_max((I - Q1 Q1ᵀ) Q2)` and symmetrically),
/// which keeps full precision near zero where the cosine route would lose
/// half the significant digits. The two directions are both evaluated and
/// the larger taken, so subspaces of different dimensions report an angle of
/// `pi/2` rather than a spurious zero.
///
/// # Errors
///
/// Inputs must have orthonormal columns (defect below `1e-8`) and matching
/// row dimension.
pub fn max_principal_angle(q1: &Mat, q2: &Mat) -> Result<f64, CoreError> {
    if q1.rows() != q2.rows() {
        return Err(CoreError::invalid(
            "principal angle",
            format!("bases live in different spaces ({} vs {} rows)", q1.rows(), q2.rows()),
        ));
    }
    for (name, q) in [("first", q1), ("second", q2)] {
        if q.cols() > 0 {
            let defect = q.t_matmul(q).max_abs_diff(&Mat::identity(q.cols()));
            if defect > 1e-8 {
                return Err(CoreError::invalid(
                    "principal angle",
                    format!("{name} basis is not orthonormal (defect {defect:.3e})"),
                ));
            }
        }
    }
    if q1.cols() == 0 && q2.cols() == 0 {
        return Ok(0.0);
    }
    if q1.cols() == 0 || q2.cols() == 0 {
        return Ok(std::f64::consts::FRAC_PI_2);
    }

    let s = residual_sigma_max(q1, q2)?.max(residual_sigma_max(q2, q1)?);
    Ok(s.clamp(0.0, 1.0).asin())
}

/// `sigma_max(Q2 - Q1 (Q1ᵀ Q2))`: the largest sine of an angle from
/// `span(Q2)` out of `span(Q1)`.
fn residual_sigma_max(q1: &Mat, q2: &Mat) -> Result<f64, CoreError> {
    let coeffs = q1.t_matmul(q2);
    let mut resid = q2.clone();
    let reproj = q1.matmul(&coeffs);
    resid.axpy(-1.0, &reproj);
    let gram = resid.t_matmul(&resid);
    let eig = sym_eigen(&gram)?;
    Ok(eig.values[0].max(0.0).sqrt())
}

/// Singular values of `m`, descending, via the eigenvalues of the smaller
/// Gram matrix.
pub fn singular_values_desc(m: &Mat) -> Result<Vec<f64>, CoreError> {
    let g = if m.rows() <= m.cols() { gram_matrix(m) } else { gram_matrix(&m.transpose()) };
    let eig = sym_eigen(&g)?;
    Ok(eig.values.iter().map(|&l| l.max(0.0).sqrt()).collect())
}

/// Outcome of the column-space equality check for a factored update.
#[derive(Debug, Clone)]
pub struct Prop1Report {
    /// True when the hypothesis held and the projectors agreed within `tol`.
    pub holds: bool,
    /// Whether `A` passed the full-row-rank screen
    /// (`sigma_min / sigma_max > 1e-10`).
    pub hypothesis_ok: bool,
    /// `||P_{BA} - P_B||_F`.
    pub residual: f64,
    /// The measured `sigma_min / sigma_max` of `A`.
    pub sigma_ratio: f64,
}

/// Checks that `col(B·A) == col(B)` by comparing dense projectors.
///
/// When `A` is not numerically of full row rank the equality has no reason to
/// hold; the report then flags `hypothesis_ok = false` (with the residual
/// still recorded) rather than claiming a failure of the identity itself.
///
/// # Errors
///
/// Dimension mismatch between the factors, or degenerate eigen-solves.
pub fn verify_proposition_1(b: &Mat, a: &Mat, tol: f64) -> Result<Prop1Report, CoreError> {
    if b.cols() != a.rows() {
        return Err(CoreError::invalid(
            "proposition 1",
            format!("B is {}x{} but A is {}x{}", b.rows(), b.cols(), a.rows(), a.cols()),
        ));
    }
    let sigma = singular_values_desc(a)?;
    let sigma_max = sigma.first().copied().unwrap_or(0.0);
    let sigma_min = sigma.last().copied().unwrap_or(0.0);
    let sigma_ratio = if sigma_max > 0.0 { sigma_min / sigma_max } else { 0.0 };
    let hypothesis_ok = sigma_ratio > FULL_ROW_RANK_RATIO;

    let p_product = column_space_projector(&b.matmul(a));
    let p_b = column_space_projector(b);
    let residual = p_product.sub(&p_b).frob_norm();

    Ok(Prop1Report { holds: hypothesis_ok && residual <= tol, hypothesis_ok, residual, sigma_ratio })
}

/// Outcome of the effective-subspace span check.
#[derive(Debug, Clone)]
pub struct Prop2Report {
    /// True when the largest principal angle stayed within `tol`.
    pub holds: bool,
    /// Largest principal angle between the two spans, radians.
    pub angle: f64,
    /// Effective rank used for the truncation.
    pub k: usize,
}

/// Checks that `span(B · V_eff)` equals `span(B · A_k)` where `V_eff` is the
/// effective eigenvector block of `A`'s Gram matrix and `A_k` is the rank-`k`
/// truncation of `A`.
///
/// The two sides are computed through genuinely different routes: the left
/// side uses the `r x r` Gram eigenvectors and Householder QR; the right side
/// builds the truncation from the eigenvectors of `AᵀA` (the input-side Gram)
/// and extracts its basis by Gram-Schmidt. Zero-singular-value directions are
/// excluded by construction on both sides.
///
/// # Errors
///
/// * dimension mismatch,
/// * invalid `tau`,
/// * an empty effective subspace (`k == 0`), for which span equality is
///   vacuous and almost certainly a caller bug.
pub fn verify_proposition_2(b: &Mat, a: &Mat, tau: f64, tol: f64) -> Result<Prop2Report, CoreError> {
    if b.cols() != a.rows() {
        return Err(CoreError::invalid(
            "proposition 2",
            format!("B is {}x{} but A is {}x{}", b.rows(), b.cols(), a.rows(), a.cols()),
        ));
    }
    let eff = effective_subspace(a, tau)?;
    if eff.k == 0 {
        return Err(CoreError::invalid(
            "proposition 2",
            "effective subspace is empty (k = 0); nothing to compare",
        ));
    }

    // Left route: restrict B to the effective block, orthonormalize by QR.
    let restricted = b.matmul(&eff.v_eff);
    let q1 = qr_orthonormal_basis(&restricted)?.q;

    // Right route: rank-k truncation of A from the input-side Gram matrix,
    // basis by Gram-Schmidt.
    let right_gram = a.t_matmul(a);
    let right_eig = sym_eigen(&right_gram)?;
    let v_k = right_eig.vectors.select_columns(&(0..eff.k).collect::<Vec<_>>());
    let a_trunc = a.matmul(&v_k).matmul_t(&v_k);
    let q2 = mgs_column_basis(&b.matmul(&a_trunc));

    let angle = max_principal_angle(&q1, &q2)?;
    Ok(Prop2Report { holds: angle <= tol, angle, k: eff.k })
}
