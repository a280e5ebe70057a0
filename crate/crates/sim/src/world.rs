//! World geometry: base weights, task targets, task data, and the
//! closed-form least-squares loss and gradient.

use std::ops::Range;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use softmerge_core::eigen::sym_eigen;
use softmerge_core::Mat;

use crate::{SimConfig, SimError};

/// How strongly the harmful target pulls against the refusal target on
/// their shared block: `harm offset = -HARM_OPPOSITION * refusal offset`.
/// Below 1 so that the reinforcement stage's post-removal overshoot stays
/// strictly smaller than an undefended run's refusal miss.
pub const HARM_OPPOSITION: f64 = 0.5;

/// Offset magnitude relative to the base weights' Frobenius norm. Kept
/// well below 1 so converged factor operator norms stay inside the
/// monotone-descent region at the default `1 / lambda_max` step size —
/// the factored parameterization's curvature grows with the square of
/// the factor norms, which in turn grow with the offset being fitted.
const OFFSET_SCALE: f64 = 0.1;

/// Minimum pairwise target separation, relative to the base norm.
pub const TARGET_DISTINCTNESS: f64 = 0.1;

/// The four tasks a world carries data for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Harmful completions on harmful queries.
    Harm,
    /// Refusals on harmful queries (same input block as `Harm`).
    Refuse,
    /// Provider-retained harmless capability.
    Benign,
    /// The customer's fine-tuning task.
    User,
}

impl TaskKind {
    /// All four kinds, in a fixed order.
    pub const ALL: [TaskKind; 4] = [TaskKind::Harm, TaskKind::Refuse, TaskKind::Benign, TaskKind::User];

    /// Stable lower-case name.
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Harm => "harm",
            TaskKind::Refuse => "refuse",
            TaskKind::Benign => "benign",
            TaskKind::User => "user",
        }
    }
}

/// A task's target weights and data matrix.
#[derive(Debug, Clone)]
pub struct TaskSet {
    /// Desired weights `T` (same shape as the base).
    pub target: Mat,
    /// Data `X`, one sample per column (`n x N`).
    pub x: Mat,
}

/// One weight matrix with its tasks.
#[derive(Debug, Clone)]
pub struct WorldLayer {
    /// Layer tag (`L0`, `L1`, ...).
    pub tag: String,
    /// Safety-aligned base weights (`m x n`).
    pub w_base: Mat,
    /// Harmful task.
    pub harm: TaskSet,
    /// Refusal task.
    pub refuse: TaskSet,
    /// Benign task.
    pub benign: TaskSet,
    /// User task.
    pub user: TaskSet,
    /// Input coordinates carrying harmful/refusal data.
    pub harm_cols: Range<usize>,
    /// Input coordinates carrying benign data.
    pub benign_cols: Range<usize>,
    /// Input coordinates carrying user data.
    pub user_cols: Range<usize>,
}

impl WorldLayer {
    /// The named task.
    pub fn task(&self, kind: TaskKind) -> &TaskSet {
        match kind {
            TaskKind::Harm => &self.harm,
            TaskKind::Refuse => &self.refuse,
            TaskKind::Benign => &self.benign,
            TaskKind::User => &self.user,
        }
    }
}

/// The full environment of one simulation: per-layer geometry plus the
/// harmful mixing ratio and the seed everything was drawn from.
#[derive(Debug, Clone)]
pub struct SimWorld {
    /// Weight matrices with their tasks, tag-sorted.
    pub layers: Vec<WorldLayer>,
    /// Fraction of harmful data in user fine-tuning.
    pub harmful_ratio: f64,
    /// Generation seed.
    pub seed: u64,
}

fn unit_vector(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// A rank-`q` offset supported on `cols`, scaled to Frobenius norm `scale`.
fn block_offset(
    rng: &mut ChaCha8Rng,
    m: usize,
    n: usize,
    cols: &Range<usize>,
    q: usize,
    scale: f64,
) -> Mat {
    let width = cols.len();
    let left = Mat::from_fn(m, q, |_, _| rng.sample(StandardNormal));
    let right = Mat::from_fn(width, q, |_, _| rng.sample(StandardNormal));
    let block = left.matmul_t(&right);
    let mut out = Mat::zeros(m, n);
    for i in 0..m {
        for (jb, j) in cols.clone().enumerate() {
            out[(i, j)] = block[(i, jb)];
        }
    }
    let norm = out.frob_norm();
    out.scale(scale / norm)
}

/// Data supported on `cols`: in-block rows are standard normal draws,
/// all other rows are exactly zero.
fn block_data(rng: &mut ChaCha8Rng, n: usize, cols: &Range<usize>, samples: usize) -> Mat {
    let mut x = Mat::zeros(n, samples);
    for j in 0..samples {
        for i in cols.clone() {
            x[(i, j)] = rng.sample(StandardNormal);
        }
    }
    x
}

impl SimWorld {
    /// Draws a world from the config: block-disjoint task data, a rank-1
    /// refusal offset on the harmful block, the harmful offset pulling
    /// opposite to it at [`HARM_OPPOSITION`] strength, and rank-2 benign
    /// and user offsets on their own blocks.
    ///
    /// # Errors
    ///
    /// Invalid config, or a drawn world that fails [`SimWorld::validate`].
    pub fn generate(cfg: &SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let (m, n, samples) = (cfg.dim_out, cfg.dim_in, cfg.samples_per_task);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

        let harm_w = (n / 4).max(1);
        let benign_w = ((n - harm_w) / 2).max(1);
        let harm_cols = 0..harm_w;
        let benign_cols = harm_w..harm_w + benign_w;
        let user_cols = harm_w + benign_w..n;

        let mut layers = Vec::with_capacity(cfg.matrices);
        for idx in 0..cfg.matrices {
            let w_base = Mat::from_fn(m, n, |_, _| {
                rng.sample::<f64, _>(StandardNormal) / (n as f64).sqrt()
            });
            let scale = OFFSET_SCALE * w_base.frob_norm();

            // Rank-1 refusal offset on the harmful block; the harmful
            // offset opposes it.
            let u = unit_vector(&mut rng, m);
            let v = unit_vector(&mut rng, harm_w);
            let mut refuse_offset = Mat::zeros(m, n);
            for i in 0..m {
                for (jb, j) in harm_cols.clone().enumerate() {
                    refuse_offset[(i, j)] = scale * u[i] * v[jb];
                }
            }
            let harm_offset = refuse_offset.scale(-HARM_OPPOSITION);

            let benign_rank = benign_cols.len().min(2);
            let user_rank = user_cols.len().min(2);
            let benign_offset = block_offset(&mut rng, m, n, &benign_cols, benign_rank, scale);
            let user_offset = block_offset(&mut rng, m, n, &user_cols, user_rank, scale);

            let make = |offset: &Mat, x: Mat| TaskSet { target: w_base.add(offset), x };
            let harm = make(&harm_offset, block_data(&mut rng, n, &harm_cols, samples));
            let refuse = make(&refuse_offset, block_data(&mut rng, n, &harm_cols, samples));
            let benign = make(&benign_offset, block_data(&mut rng, n, &benign_cols, samples));
            let user = make(&user_offset, block_data(&mut rng, n, &user_cols, samples));

            layers.push(WorldLayer {
                tag: format!("L{idx}"),
                w_base,
                harm,
                refuse,
                benign,
                user,
                harm_cols: harm_cols.clone(),
                benign_cols: benign_cols.clone(),
                user_cols: user_cols.clone(),
            });
        }

        let world = SimWorld { layers, harmful_ratio: cfg.harmful_ratio, seed: cfg.seed };
        world.validate()?;
        Ok(world)
    }

    /// Checks shapes, the mixing ratio, per-task sample counts, and the
    /// pairwise target separation that keeps tasks distinguishable.
    ///
    /// # Errors
    ///
    /// Any structural inconsistency, or two targets closer than
    /// [`TARGET_DISTINCTNESS`] times the base norm.
    pub fn validate(&self) -> Result<(), SimError> {
        if self.layers.is_empty() {
            return Err(SimError::invalid("world", "at least one layer is required"));
        }
        if !(self.harmful_ratio.is_finite() && (0.0..=1.0).contains(&self.harmful_ratio)) {
            return Err(SimError::invalid(
                "world",
                format!("harmful_ratio must lie in [0, 1], got {}", self.harmful_ratio),
            ));
        }
        for layer in &self.layers {
            let (m, n) = (layer.w_base.rows(), layer.w_base.cols());
            let base_norm = layer.w_base.frob_norm();
            for kind in TaskKind::ALL {
                let t = layer.task(kind);
                if t.target.rows() != m || t.target.cols() != n {
                    return Err(SimError::invalid(
                        format!("world layer `{}`", layer.tag),
                        format!(
                            "{} target is {}x{} but the base is {m}x{n}",
                            kind.as_str(),
                            t.target.rows(),
                            t.target.cols()
                        ),
                    ));
                }
                if t.x.rows() != n {
                    return Err(SimError::invalid(
                        format!("world layer `{}`", layer.tag),
                        format!(
                            "{} data has {} rows but the input dimension is {n}",
                            kind.as_str(),
                            t.x.rows()
                        ),
                    ));
                }
                if t.x.cols() == 0 {
                    return Err(SimError::invalid(
                        format!("world layer `{}`", layer.tag),
                        format!("{} task needs at least one sample", kind.as_str()),
                    ));
                }
            }
            for (i, a) in TaskKind::ALL.iter().enumerate() {
                for b in TaskKind::ALL.iter().skip(i + 1) {
                    let dist = layer.task(*a).target.sub(&layer.task(*b).target).frob_norm();
                    if dist <= TARGET_DISTINCTNESS * base_norm {
                        return Err(SimError::invalid(
                            format!("world layer `{}`", layer.tag),
                            format!(
                                "{} and {} targets are {dist:.3e} apart, below {:.3e}",
                                a.as_str(),
                                b.as_str(),
                                TARGET_DISTINCTNESS * base_norm
                            ),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Least-squares loss `1/(2N) * ||(W - T) X||_F^2`.
///
/// # Errors
///
/// Shape disagreement between `w_eff`, `target`, and `x`.
pub fn task_loss(w_eff: &Mat, target: &Mat, x: &Mat) -> Result<f64, SimError> {
    check_task_shapes(w_eff, target, x)?;
    let resid = w_eff.sub(target).matmul(x);
    let n = x.cols() as f64;
    Ok(resid.frob_dot(&resid) / (2.0 * n))
}

/// Analytic gradient `(W - T) X Xᵀ / N` of [`task_loss`] in `W`.
///
/// # Errors
///
/// Shape disagreement between `w_eff`, `target`, and `x`.
pub fn task_gradient(w_eff: &Mat, target: &Mat, x: &Mat) -> Result<Mat, SimError> {
    check_task_shapes(w_eff, target, x)?;
    let n = x.cols() as f64;
    Ok(w_eff.sub(target).matmul(x).matmul_t(x).scale(1.0 / n))
}

fn check_task_shapes(w_eff: &Mat, target: &Mat, x: &Mat) -> Result<(), SimError> {
    if target.rows() != w_eff.rows() || target.cols() != w_eff.cols() {
        return Err(SimError::invalid(
            "task objective",
            format!(
                "target is {}x{} but weights are {}x{}",
                target.rows(),
                target.cols(),
                w_eff.rows(),
                w_eff.cols()
            ),
        ));
    }
    if x.rows() != w_eff.cols() {
        return Err(SimError::invalid(
            "task objective",
            format!("data has {} rows but weights have {} columns", x.rows(), w_eff.cols()),
        ));
    }
    if x.cols() == 0 {
        return Err(SimError::invalid("task objective", "data needs at least one sample"));
    }
    Ok(())
}

/// Largest eigenvalue over layers of the mixture data curvature
/// `sum_c weight_c * X_c X_cᵀ / N_c` — its reciprocal is the largest
/// step size that provably keeps the stage loss monotone.
///
/// # Errors
///
/// Empty mix, non-positive weight, or eigensolver failure.
pub fn max_data_curvature(world: &SimWorld, mix: &[(TaskKind, f64)]) -> Result<f64, SimError> {
    if mix.is_empty() {
        return Err(SimError::invalid("data curvature", "objective mix is empty"));
    }
    let mut overall: f64 = 0.0;
    for layer in &world.layers {
        let n = layer.w_base.cols();
        let mut h = Mat::zeros(n, n);
        for (kind, weight) in mix {
            if !(weight.is_finite() && *weight > 0.0) {
                return Err(SimError::invalid(
                    "data curvature",
                    format!("weight for {} must be positive, got {weight}", kind.as_str()),
                ));
            }
            let x = &layer.task(*kind).x;
            h.axpy(weight / x.cols() as f64, &x.matmul_t(x));
        }
        let eig = sym_eigen(&h).map_err(SimError::Core)?;
        overall = overall.max(eig.values[0]);
    }
    if overall <= 0.0 {
        return Err(SimError::invalid("data curvature", "mixture curvature is not positive"));
    }
    Ok(overall)
}
