//! Post-fine-tuning merge of a user adapter and a reinforcement adapter
//! into base weights, with the reinforcement soft-orthogonalized against
//! the user update's output subspace.
//!
//! Per layer, the pipeline is:
//!
//! 1. optionally restrict the user output factor to its effective
//!    directions, `B_hat = B_U · V_eff` (policy-controlled; the default
//!    restricts only when the input factor's effective rank has collapsed
//!    below the nominal rank);
//! 2. orthonormalize `B_hat` by QR into `Q_B`;
//! 3. damp the reinforcement along that subspace,
//!    `W_tilde_R = W_R - alpha · Q_B (Q_Bᵀ W_R)`;
//! 4. compose `W_final = W_base + w·W_U + w·W_tilde_R` with averaging
//!    weight `w` (default 1/2), **in exactly that order** — the user term
//!    is added before the reinforcement term, so the user update enters
//!    the sum bit-for-bit independently of `alpha`.
//!
//! The per-layer report records nominal and effective ranks, whether
//! restriction was applied, the residual `||Q_Bᵀ W_tilde_R||_F`, and the
//! energy metrics of the merged update against the user update. Eigenvalues
//! that land exactly on the selection threshold are excluded (strict
//! inequality) and counted in the report as `boundary_ties` rather than
//! silently resolved either way.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::bundle::{AdapterBundle, AdapterPair};
use crate::diagnostics::{energy_metrics, layer_average};
use crate::error::CoreError;
use crate::mat::Mat;
use crate::qr::qr_orthonormal_basis;
use crate::subspace::effective_subspace;

/// When to replace `B_U` with its effective-subspace restriction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RankCollapsePolicy {
    /// Restrict only when the effective rank fell below the nominal rank.
    Auto,
    /// Always restrict (harmless for full-rank factors: same span).
    AlwaysRestrict,
    /// Never restrict; use `B_U` as-is.
    NeverRestrict,
}

impl fmt::Display for RankCollapsePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankCollapsePolicy::Auto => "auto",
            RankCollapsePolicy::AlwaysRestrict => "always_restrict",
            RankCollapsePolicy::NeverRestrict => "never_restrict",
        })
    }
}

impl FromStr for RankCollapsePolicy {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "auto" => Ok(RankCollapsePolicy::Auto),
            "always" | "always_restrict" => Ok(RankCollapsePolicy::AlwaysRestrict),
            "never" | "never_restrict" => Ok(RankCollapsePolicy::NeverRestrict),
            other => Err(CoreError::invalid(
                "rank collapse policy",
                format!("`{other}` is not one of auto, always_restrict, never_restrict"),
            )),
        }
    }
}

/// Knobs of the merge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MergeConfig {
    /// Orthogonalization strength, in `[0, 1]`: 0 leaves the reinforcement
    /// untouched, 1 removes its user-subspace component entirely.
    pub alpha: f64,
    /// Relative eigenvalue threshold for the effective subspace, in `(0, 1)`.
    pub tau: f64,
    /// Weight `w` applied to both updates in the final sum, in `(0, 1]`.
    pub averaging_weight: f64,
    /// When to apply the effective-rank restriction.
    pub rank_collapse_policy: RankCollapsePolicy,
}

impl Default for MergeConfig {
    fn default() -> Self {
        MergeConfig {
            alpha: 0.1,
            tau: 1e-6,
            averaging_weight: 0.5,
            rank_collapse_policy: RankCollapsePolicy::Auto,
        }
    }
}

impl MergeConfig {
    /// Checks every field's range.
    ///
    /// # Errors
    ///
    /// `alpha` outside `[0, 1]`, `tau` outside `(0, 1)`, or
    /// `averaging_weight` outside `(0, 1]` (non-finite values included).
    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.alpha.is_finite() && (0.0..=1.0).contains(&self.alpha)) {
            return Err(CoreError::invalid(
                "merge config",
                format!("alpha must lie in [0, 1], got {}", self.alpha),
            ));
        }
        if !(self.tau.is_finite() && self.tau > 0.0 && self.tau < 1.0) {
            return Err(CoreError::invalid(
                "merge config",
                format!("tau must lie in (0, 1), got {}", self.tau),
            ));
        }
        if !(self.averaging_weight.is_finite()
            && self.averaging_weight > 0.0
            && self.averaging_weight <= 1.0)
        {
            return Err(CoreError::invalid(
                "merge config",
                format!("averaging_weight must lie in (0, 1], got {}", self.averaging_weight),
            ));
        }
        Ok(())
    }
}

/// Per-layer outcome bookkeeping.
#[derive(Debug, Clone, Serialize)]
pub struct LayerMergeReport {
    /// Layer tag.
    pub layer: String,
    /// The adapter's nominal rank `r`.
    pub nominal_rank: usize,
    /// Effective rank `k` of the user input factor under `tau`.
    pub effective_rank: usize,
    /// Whether `B_U` was replaced by `B_U · V_eff`.
    pub restriction_applied: bool,
    /// `||Q_Bᵀ W_tilde_R||_F` after orthogonalization.
    pub orthogonality_residual: f64,
    /// Energy of the merged update retained along the user update;
    /// absent when the user update is zero.
    pub energy_retain: Option<f64>,
    /// `max(0, 1 - retain)`; absent when the user update is zero.
    pub energy_damage: Option<f64>,
    /// Number of eigenvalues exactly equal to `tau * lambda_1` — excluded
    /// by the strict inequality, surfaced instead of guessed about.
    pub boundary_ties: usize,
}

/// Whole-merge report: per-layer entries plus layer-averaged energies and
/// an echo of the configuration that produced them.
#[derive(Debug, Clone, Serialize)]
pub struct MergeReport {
    /// Orthogonalization strength used.
    pub alpha: f64,
    /// Eigenvalue threshold used.
    pub tau: f64,
    /// Averaging weight used.
    pub averaging_weight: f64,
    /// Restriction policy used.
    pub rank_collapse_policy: RankCollapsePolicy,
    /// Per-layer reports, sorted by layer tag.
    pub layers: Vec<LayerMergeReport>,
    /// Mean of the defined per-layer retains; absent if none are defined.
    pub global_energy_retain: Option<f64>,
    /// Mean of the defined per-layer damages; absent if none are defined.
    pub global_energy_damage: Option<f64>,
}

/// True when the pair's effective rank under `tau` is below its nominal
/// rank.
///
/// # Errors
///
/// `tau` outside `(0, 1)`.
pub fn detect_rank_collapse(pair: &AdapterPair, tau: f64) -> Result<bool, CoreError> {
    Ok(effective_subspace(pair.a(), tau)?.k < pair.rank())
}

/// `W_tilde_R = W_R - alpha · Q (Qᵀ W_R)`: damps the component of `W_R`
/// inside `span(Q)` by `alpha`, leaving the orthogonal complement alone.
/// An empty `Q` (zero columns) is the identity map.
///
/// # Errors
///
/// `alpha` outside `[0, 1]`, row-count mismatch, or `Q` not orthonormal
/// (defect above `1e-8`).
pub fn soft_orthogonalize(w_r: &Mat, q: &Mat, alpha: f64) -> Result<Mat, CoreError> {
    if !(alpha.is_finite() && (0.0..=1.0).contains(&alpha)) {
        return Err(CoreError::invalid(
            "soft orthogonalize",
            format!("alpha must lie in [0, 1], got {alpha}"),
        ));
    }
    if q.rows() != w_r.rows() {
        return Err(CoreError::invalid(
            "soft orthogonalize",
            format!("basis has {} rows but the update has {}", q.rows(), w_r.rows()),
        ));
    }
    if q.cols() > 0 {
        let defect = q.t_matmul(q).max_abs_diff(&Mat::identity(q.cols()));
        if defect > 1e-8 {
            return Err(CoreError::invalid(
                "soft orthogonalize",
                format!("basis is not orthonormal (defect {defect:.3e})"),
            ));
        }
    }
    let coeffs = q.t_matmul(w_r);
    let mut out = w_r.clone();
    out.axpy(-alpha, &q.matmul(&coeffs));
    Ok(out)
}

/// Merges one layer; see the module docs for the pipeline and the exact
/// composition order of the final sum.
///
/// # Errors
///
/// Invalid config, shape disagreement between base, user pair, and
/// reinforcement, or failures in the eigen/QR sub-steps.
pub fn merge_layer(
    base: &Mat,
    user: &AdapterPair,
    reinforce_dense: &Mat,
    cfg: &MergeConfig,
    layer_tag: &str,
) -> Result<(Mat, LayerMergeReport), CoreError> {
    cfg.validate()?;
    let (d_out, d_in) = (base.rows(), base.cols());
    if user.d_out() != d_out || user.d_in() != d_in {
        return Err(CoreError::invalid(
            format!("merge layer `{layer_tag}`"),
            format!(
                "user update is {}x{} but base is {d_out}x{d_in}",
                user.d_out(),
                user.d_in()
            ),
        ));
    }
    if reinforce_dense.rows() != d_out || reinforce_dense.cols() != d_in {
        return Err(CoreError::invalid(
            format!("merge layer `{layer_tag}`"),
            format!(
                "reinforcement update is {}x{} but base is {d_out}x{d_in}",
                reinforce_dense.rows(),
                reinforce_dense.cols()
            ),
        ));
    }

    let eff = effective_subspace(user.a(), cfg.tau)?;
    let lambda_1 = eff.eigenvalues[0];
    let threshold = cfg.tau * lambda_1;
    let boundary_ties = if lambda_1 > 0.0 {
        eff.eigenvalues.iter().filter(|&&l| l == threshold).count()
    } else {
        0
    };

    let restriction_applied = match cfg.rank_collapse_policy {
        RankCollapsePolicy::Auto => eff.k < user.rank(),
        RankCollapsePolicy::AlwaysRestrict => true,
        RankCollapsePolicy::NeverRestrict => false,
    };
    let b_hat =
        if restriction_applied { user.b().matmul(&eff.v_eff) } else { user.b().clone() };

    // An empty restricted factor (effective rank 0, i.e. a numerically zero
    // user adapter) means there is nothing to orthogonalize against.
    let q_b = if b_hat.cols() == 0 {
        Mat::zeros(d_out, 0)
    } else {
        qr_orthonormal_basis(&b_hat)?.q
    };

    let w_tilde = soft_orthogonalize(reinforce_dense, &q_b, cfg.alpha)?;
    let orthogonality_residual = q_b.t_matmul(&w_tilde).frob_norm();

    let user_dense = user.dense_update();
    let w = cfg.averaging_weight;
    // Fixed order: base, then the user term, then the reinforcement term.
    let mut w_final = base.clone();
    w_final.axpy(w, &user_dense);
    w_final.axpy(w, &w_tilde);

    let merged_update = user_dense.add(&w_tilde).scale(w);
    let (energy_retain, energy_damage) = if user_dense.frob_norm() == 0.0 {
        (None, None)
    } else {
        let (r, d) = energy_metrics(&merged_update, &user_dense)?;
        (Some(r), Some(d))
    };

    let report = LayerMergeReport {
        layer: layer_tag.to_string(),
        nominal_rank: user.rank(),
        effective_rank: eff.k,
        restriction_applied,
        orthogonality_residual,
        energy_retain,
        energy_damage,
        boundary_ties,
    };
    Ok((w_final, report))
}

/// Merges every layer of a bundle pair into the base weights.
///
/// The three layer-tag sets must coincide exactly; a tag present on one
/// side and missing on another is an error, not a skip. Returns the final
/// dense weights (tag-sorted) and the aggregated report.
///
/// # Errors
///
/// Layer-set mismatch, invalid config, or any per-layer failure.
pub fn merge_bundles(
    base: &[(String, Mat)],
    user: &AdapterBundle,
    reinforce: &AdapterBundle,
    cfg: &MergeConfig,
) -> Result<(Vec<(String, Mat)>, MergeReport), CoreError> {
    cfg.validate()?;
    let base_tags: BTreeSet<&str> = base.iter().map(|(t, _)| t.as_str()).collect();
    let user_tags: BTreeSet<&str> = user.layers().iter().map(|(t, _)| t.as_str()).collect();
    let reinforce_tags: BTreeSet<&str> =
        reinforce.layers().iter().map(|(t, _)| t.as_str()).collect();
    if base_tags != user_tags || base_tags != reinforce_tags {
        let describe = |name: &str, tags: &BTreeSet<&str>| {
            format!("{name}: [{}]", tags.iter().copied().collect::<Vec<_>>().join(", "))
        };
        return Err(CoreError::invalid(
            "merge bundles",
            format!(
                "layer sets differ — {}; {}; {}",
                describe("base", &base_tags),
                describe("user", &user_tags),
                describe("reinforce", &reinforce_tags)
            ),
        ));
    }

    let mut sorted_base: Vec<&(String, Mat)> = base.iter().collect();
    sorted_base.sort_by(|(x, _), (y, _)| x.cmp(y));

    let mut finals = Vec::with_capacity(base.len());
    let mut layers = Vec::with_capacity(base.len());
    for (tag, w_base) in sorted_base {
        let user_pair = user.get(tag).expect("tag sets verified equal");
        let reinforce_dense = reinforce.get(tag).expect("tag sets verified equal").dense_update();
        let (w_final, report) = merge_layer(w_base, user_pair, &reinforce_dense, cfg, tag)?;
        finals.push((tag.clone(), w_final));
        layers.push(report);
    }

    let retains: Vec<f64> = layers.iter().filter_map(|l| l.energy_retain).collect();
    let damages: Vec<f64> = layers.iter().filter_map(|l| l.energy_damage).collect();
    let global_energy_retain =
        if retains.is_empty() { None } else { Some(layer_average(&retains)?) };
    let global_energy_damage =
        if damages.is_empty() { None } else { Some(layer_average(&damages)?) };

    let report = MergeReport {
        alpha: cfg.alpha,
        tau: cfg.tau,
        averaging_weight: cfg.averaging_weight,
        rank_collapse_policy: cfg.rank_collapse_policy,
        layers,
        global_energy_retain,
        global_energy_damage,
    };
    Ok((finals, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bundle::AdapterRole;
    use crate::subspace::column_space_projector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn random_pair(rng: &mut ChaCha8Rng, d_out: usize, r: usize, d_in: usize) -> AdapterPair {
        AdapterPair::new(random_mat(rng, d_out, r), random_mat(rng, r, d_in)).unwrap()
    }

    fn e1_basis() -> Mat {
        Mat::from_rows(&[vec![1.0], vec![0.0]])
    }

    #[test]
    fn soft_orthogonalize_axis_cases() {
        let w = Mat::from_rows(&[vec![1.0], vec![1.0]]);
        let hard = soft_orthogonalize(&w, &e1_basis(), 1.0).unwrap();
        assert_eq!(hard, Mat::from_rows(&[vec![0.0], vec![1.0]]));

        let untouched = soft_orthogonalize(&w, &e1_basis(), 0.0).unwrap();
        assert_eq!(untouched, w);

        let half = soft_orthogonalize(&w, &e1_basis(), 0.5).unwrap();
        assert_eq!(half, Mat::from_rows(&[vec![0.5], vec![1.0]]));
    }

    #[test]
    fn soft_orthogonalize_is_linear_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let w = random_mat(&mut rng, 12, 9);
        let q = qr_orthonormal_basis(&random_mat(&mut rng, 12, 3)).unwrap().q;
        let at_one = soft_orthogonalize(&w, &q, 1.0).unwrap();
        for alpha in [0.0, 0.1, 0.3, 0.77, 1.0] {
            let direct = soft_orthogonalize(&w, &q, alpha).unwrap();
            let blended = w.scale(1.0 - alpha).add(&at_one.scale(alpha));
            assert!(
                direct.max_abs_diff(&blended) <= 1e-12,
                "alpha = {alpha}: deviation {}",
                direct.max_abs_diff(&blended)
            );
        }
    }

    #[test]
    fn hard_projection_is_orthogonal_and_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let w = random_mat(&mut rng, 16, 10);
        let q = qr_orthonormal_basis(&random_mat(&mut rng, 16, 4)).unwrap().q;
        let once = soft_orthogonalize(&w, &q, 1.0).unwrap();
        assert!(q.t_matmul(&once).frob_norm() <= 1e-8 * w.frob_norm());
        let twice = soft_orthogonalize(&once, &q, 1.0).unwrap();
        assert!(twice.max_abs_diff(&once) <= 1e-10);
    }

    #[test]
    fn soft_orthogonalize_validation() {
        let w = Mat::zeros(4, 4);
        let q = Mat::zeros(3, 1);
        assert!(soft_orthogonalize(&w, &q, 0.5).is_err());
        assert!(soft_orthogonalize(&w, &Mat::zeros(4, 0), 1.5).is_err());
        assert!(soft_orthogonalize(&w, &Mat::zeros(4, 0), -0.1).is_err());
        // Non-orthonormal basis.
        let skew = Mat::from_rows(&[vec![1.0], vec![1.0], vec![0.0], vec![0.0]]);
        assert!(soft_orthogonalize(&w, &skew, 0.5).is_err());
        // Empty basis is the identity.
        let out = soft_orthogonalize(&w, &Mat::zeros(4, 0), 0.9).unwrap();
        assert_eq!(out, w);
    }

    #[test]
    fn merge_layer_alpha_zero_reduces_to_plain_averaging() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let base = random_mat(&mut rng, 6, 8);
        let user = random_pair(&mut rng, 6, 2, 8);
        let w_r = random_mat(&mut rng, 6, 8);
        let cfg = MergeConfig { alpha: 0.0, ..MergeConfig::default() };
        let (w_final, report) = merge_layer(&base, &user, &w_r, &cfg, "L0").unwrap();

        // Bitwise: the documented composition order with W_tilde == W_R.
        let mut expected = base.clone();
        expected.axpy(0.5, &user.dense_update());
        expected.axpy(0.5, &w_r);
        assert_eq!(w_final, expected);

        // And the textbook form, up to reassociation rounding.
        let textbook = base.add(&user.dense_update().add(&w_r).scale(0.5));
        assert!(w_final.max_abs_diff(&textbook) < 1e-13);
        assert!(!report.restriction_applied);
        assert_eq!(report.effective_rank, 2);
    }

    #[test]
    fn merge_layer_alpha_one_suppresses_aligned_reinforcement() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let base = random_mat(&mut rng, 8, 10);
        let user = random_pair(&mut rng, 8, 3, 10);
        // W_R strictly inside span(B_U).
        let w_r = user.b().matmul(&random_mat(&mut rng, 3, 10));
        let cfg = MergeConfig { alpha: 1.0, ..MergeConfig::default() };
        let (w_final, report) = merge_layer(&base, &user, &w_r, &cfg, "L0").unwrap();

        let mut expected = base.clone();
        expected.axpy(0.5, &user.dense_update());
        assert!(
            w_final.max_abs_diff(&expected) <= 1e-8 * w_r.frob_norm(),
            "aligned reinforcement must vanish"
        );
        assert!(report.orthogonality_residual <= 1e-8 * w_r.frob_norm());
    }

    #[test]
    fn merge_layer_agrees_with_dense_projector_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        for trial in 0..20 {
            let base = random_mat(&mut rng, 8, 8);
            let user = random_pair(&mut rng, 8, 2, 8);
            let w_r = random_mat(&mut rng, 8, 8);
            let cfg = MergeConfig { alpha: 0.3, ..MergeConfig::default() };
            let (w_final, _) = merge_layer(&base, &user, &w_r, &cfg, "L0").unwrap();

            // Oracle: project with the dense column-space projector of the
            // full product W_U (valid because A_U has full row rank).
            let w_u = user.dense_update();
            let p = column_space_projector(&w_u);
            let mut w_tilde = w_r.clone();
            w_tilde.axpy(-cfg.alpha, &p.matmul(&w_r));
            let oracle = base.add(&w_u.add(&w_tilde).scale(0.5));

            let residual = w_final.sub(&oracle).frob_norm();
            assert!(residual <= 1e-8, "trial {trial}: residual {residual}");
        }
    }

    #[test]
    fn merge_layer_user_term_is_alpha_independent_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let base = random_mat(&mut rng, 7, 9);
        let user = random_pair(&mut rng, 7, 3, 9);
        let w_r = random_mat(&mut rng, 7, 9);
        // The partial sum base + w * W_U is the same for every alpha; only
        // the last addend differs. Verify by reconstructing the composition.
        for alpha in [0.0, 0.25, 1.0] {
            let cfg = MergeConfig { alpha, ..MergeConfig::default() };
            let (w_final, _) = merge_layer(&base, &user, &w_r, &cfg, "L0").unwrap();
            let q = qr_orthonormal_basis(user.b()).unwrap().q;
            let w_tilde = soft_orthogonalize(&w_r, &q, alpha).unwrap();
            let mut expected = base.clone();
            expected.axpy(0.5, &user.dense_update());
            expected.axpy(0.5, &w_tilde);
            assert_eq!(w_final, expected, "alpha = {alpha}");
        }
    }

    #[test]
    fn merge_layer_zero_user_adapter_skips_orthogonalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let base = random_mat(&mut rng, 5, 6);
        let user = AdapterPair::new(Mat::zeros(5, 2), Mat::zeros(2, 6)).unwrap();
        let w_r = random_mat(&mut rng, 5, 6);
        let (w_final, report) = merge_layer(&base, &user, &w_r, &MergeConfig::default(), "L0").unwrap();

        assert_eq!(report.effective_rank, 0);
        assert_eq!(report.orthogonality_residual, 0.0);
        assert_eq!(report.energy_retain, None);
        assert_eq!(report.energy_damage, None);
        let mut expected = base.clone();
        expected.axpy(0.5, &Mat::zeros(5, 6));
        expected.axpy(0.5, &w_r);
        assert_eq!(w_final, expected);
    }

    #[test]
    fn boundary_tie_is_counted_and_excluded() {
        // Axis-aligned construction: Gram = diag(1, 1e-6) exactly, and
        // tau * lambda_1 = 1e-6 exactly — a tie on the strict threshold.
        let mut a = Mat::zeros(2, 4);
        a[(0, 0)] = 1.0;
        a[(1, 1)] = 1e-3;
        let user = AdapterPair::new(Mat::from_fn(4, 2, |i, j| f64::from(u8::from(i == j))), a).unwrap();
        let base = Mat::zeros(4, 4);
        let w_r = Mat::zeros(4, 4);
        let (_, report) = merge_layer(&base, &user, &w_r, &MergeConfig::default(), "L0").unwrap();
        assert_eq!(report.effective_rank, 1);
        assert_eq!(report.boundary_ties, 1);
        assert!(report.restriction_applied);
        assert!(detect_rank_collapse(&user, 1e-6).unwrap());
    }

    #[test]
    fn detect_rank_collapse_cases() {
        let full = AdapterPair::new(Mat::identity(4), Mat::identity(4)).unwrap();
        assert!(!detect_rank_collapse(&full, 1e-6).unwrap());

        let mut dup = Mat::zeros(3, 6);
        for j in 0..6 {
            dup[(0, j)] = (j as f64) - 2.0;
            dup[(1, j)] = (j as f64) - 2.0;
            dup[(2, j)] = f64::from(u8::from(j == 0));
        }
        let pair = AdapterPair::new(Mat::zeros(5, 3), dup).unwrap();
        assert!(detect_rank_collapse(&pair, 1e-6).unwrap());
    }

    #[test]
    fn restriction_of_a_full_rank_factor_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let base = random_mat(&mut rng, 9, 7);
        let user = random_pair(&mut rng, 9, 3, 7);
        let w_r = random_mat(&mut rng, 9, 7);
        let auto = MergeConfig::default();
        let always =
            MergeConfig { rank_collapse_policy: RankCollapsePolicy::AlwaysRestrict, ..auto };
        let never =
            MergeConfig { rank_collapse_policy: RankCollapsePolicy::NeverRestrict, ..auto };

        let (w_auto, r_auto) = merge_layer(&base, &user, &w_r, &auto, "L0").unwrap();
        let (w_always, r_always) = merge_layer(&base, &user, &w_r, &always, "L0").unwrap();
        let (w_never, r_never) = merge_layer(&base, &user, &w_r, &never, "L0").unwrap();

        assert!(!r_auto.restriction_applied);
        assert!(r_always.restriction_applied);
        assert!(!r_never.restriction_applied);
        // Same span either way, so the merged weights agree numerically.
        assert!(w_auto.max_abs_diff(&w_always) < 1e-10);
        assert_eq!(w_auto, w_never);
    }

    #[test]
    fn merge_config_validation() {
        assert!(MergeConfig::default().validate().is_ok());
        for bad in [
            MergeConfig { alpha: -0.1, ..MergeConfig::default() },
            MergeConfig { alpha: 1.1, ..MergeConfig::default() },
            MergeConfig { alpha: f64::NAN, ..MergeConfig::default() },
            MergeConfig { tau: 0.0, ..MergeConfig::default() },
            MergeConfig { tau: 1.0, ..MergeConfig::default() },
            MergeConfig { averaging_weight: 0.0, ..MergeConfig::default() },
            MergeConfig { averaging_weight: 1.5, ..MergeConfig::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?} should be rejected");
        }
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("auto".parse::<RankCollapsePolicy>().unwrap(), RankCollapsePolicy::Auto);
        assert_eq!(
            "always_restrict".parse::<RankCollapsePolicy>().unwrap(),
            RankCollapsePolicy::AlwaysRestrict
        );
        assert_eq!(
            "never-restrict".parse::<RankCollapsePolicy>().unwrap(),
            RankCollapsePolicy::NeverRestrict
        );
        assert_eq!("NEVER".parse::<RankCollapsePolicy>().unwrap(), RankCollapsePolicy::NeverRestrict);
        assert!("sometimes".parse::<RankCollapsePolicy>().is_err());
        assert_eq!(RankCollapsePolicy::AlwaysRestrict.to_string(), "always_restrict");
    }

    fn toy_bundles(
        rng: &mut ChaCha8Rng,
    ) -> (Vec<(String, Mat)>, AdapterBundle, AdapterBundle) {
        let base = vec![
            ("L0".to_string(), random_mat(rng, 6, 8)),
            ("L1".to_string(), random_mat(rng, 4, 5)),
        ];
        let user = AdapterBundle::new(
            AdapterRole::User,
            vec![
                ("L0".into(), random_pair(rng, 6, 2, 8)),
                ("L1".into(), random_pair(rng, 4, 2, 5)),
            ],
        )
        .unwrap();
        let reinforce = AdapterBundle::new(
            AdapterRole::Reinforce,
            vec![
                ("L0".into(), random_pair(rng, 6, 2, 8)),
                ("L1".into(), random_pair(rng, 4, 2, 5)),
            ],
        )
        .unwrap();
        (base, user, reinforce)
    }

    #[test]
    fn merge_bundles_full_rank_two_layers() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let (base, user, reinforce) = toy_bundles(&mut rng);
        let (finals, report) = merge_bundles(&base, &user, &reinforce, &MergeConfig::default()).unwrap();

        assert_eq!(finals.len(), 2);
        assert_eq!(report.layers.len(), 2);
        for layer in &report.layers {
            assert_eq!(layer.effective_rank, layer.nominal_rank, "no collapse constructed");
            assert!(!layer.restriction_applied);
        }
        assert_eq!(report.alpha, 0.1);
        assert_eq!(report.tau, 1e-6);
        let mean_retain =
            (report.layers[0].energy_retain.unwrap() + report.layers[1].energy_retain.unwrap()) / 2.0;
        assert_eq!(report.global_energy_retain.unwrap(), mean_retain);
    }

    #[test]
    fn merge_bundles_zero_reinforcement() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let (base, user, _) = toy_bundles(&mut rng);
        let zero_reinforce = AdapterBundle::new(
            AdapterRole::Reinforce,
            vec![
                ("L0".into(), AdapterPair::new(Mat::zeros(6, 2), Mat::zeros(2, 8)).unwrap()),
                ("L1".into(), AdapterPair::new(Mat::zeros(4, 2), Mat::zeros(2, 5)).unwrap()),
            ],
        )
        .unwrap();
        let (finals, report) = merge_bundles(&base, &user, &zero_reinforce, &MergeConfig::default()).unwrap();

        for ((tag, w_final), (_, w_base)) in finals.iter().zip(base.iter()) {
            let mut expected = w_base.clone();
            expected.axpy(0.5, &user.get(tag).unwrap().dense_update());
            expected.axpy(0.5, &Mat::zeros(w_base.rows(), w_base.cols()));
            assert_eq!(w_final, &expected);
        }
        // Merged update is exactly half the user update: retain w^2 = 1/4.
        for layer in &report.layers {
            assert!((layer.energy_retain.unwrap() - 0.25).abs() < 1e-12);
            assert!((layer.energy_damage.unwrap() - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn merge_bundles_rejects_layer_set_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let (base, user, reinforce) = toy_bundles(&mut rng);
        let short_base = vec![base[0].clone()];
        let err = merge_bundles(&short_base, &user, &reinforce, &MergeConfig::default()).unwrap_err();
        assert!(err.to_string().contains("layer sets differ"), "got: {err}");
    }

    #[test]
    fn merge_bundles_restricts_only_the_collapsed_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let base = vec![
            ("L0".to_string(), random_mat(&mut rng, 6, 8)),
            ("L1".to_string(), random_mat(&mut rng, 6, 8)),
        ];
        // L1's input factor has two identical rows: rank collapse.
        let healthy = random_pair(&mut rng, 6, 2, 8);
        let row: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let collapsed_a = Mat::from_fn(2, 8, |_, j| row[j]);
        let collapsed = AdapterPair::new(random_mat(&mut rng, 6, 2), collapsed_a).unwrap();
        let user = AdapterBundle::new(
            AdapterRole::User,
            vec![("L0".into(), healthy), ("L1".into(), collapsed)],
        )
        .unwrap();
        let reinforce = AdapterBundle::new(
            AdapterRole::Reinforce,
            vec![
                ("L0".into(), random_pair(&mut rng, 6, 2, 8)),
                ("L1".into(), random_pair(&mut rng, 6, 2, 8)),
            ],
        )
        .unwrap();

        let (_, report) = merge_bundles(&base, &user, &reinforce, &MergeConfig::default()).unwrap();
        let by_tag: std::collections::BTreeMap<&str, &LayerMergeReport> =
            report.layers.iter().map(|l| (l.layer.as_str(), l)).collect();
        assert!(!by_tag["L0"].restriction_applied);
        assert!(by_tag["L1"].restriction_applied);
        assert_eq!(by_tag["L1"].effective_rank, 1);
    }

    #[test]
    fn report_serializes_with_nulls_for_undefined_energies() {
        let report = MergeReport {
            alpha: 0.1,
            tau: 1e-6,
            averaging_weight: 0.5,
            rank_collapse_policy: RankCollapsePolicy::Auto,
            layers: vec![LayerMergeReport {
                layer: "L0".into(),
                nominal_rank: 2,
                effective_rank: 0,
                restriction_applied: true,
                orthogonality_residual: 0.0,
                energy_retain: None,
                energy_damage: None,
                boundary_ties: 0,
            }],
            global_energy_retain: None,
            global_energy_damage: None,
        };
        let json: serde_json::Value = serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
        assert_eq!(json["rank_collapse_policy"], "auto");
        assert!(json["layers"][0]["energy_retain"].is_null());
        assert_eq!(json["layers"][0]["effective_rank"], 0);
    }
}
