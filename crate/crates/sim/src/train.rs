//! Gradient-descent training of low-rank adapters attached to a base,
//! with frozen adapters guaranteed bit-identical across a stage.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use softmerge_core::bundle::{AdapterBundle, AdapterPair, AdapterRole};
use softmerge_core::Mat;

use crate::world::{max_data_curvature, task_gradient, task_loss, SimWorld, TaskKind};
use crate::SimError;

/// How many consecutive loss increases abort a stage.
const DIVERGENCE_PATIENCE: usize = 10;

/// Which pipeline role an adapter plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SimRole {
    /// Trained on the harmful task, then frozen, then removed.
    Buffer,
    /// Trained to restore refusal and benign behavior; merged at the end.
    Reinforce,
    /// Trained on the customer mixture; merged at the end.
    User,
}

impl SimRole {
    /// The corresponding bundle role.
    pub fn bundle_role(self) -> AdapterRole {
        match self {
            SimRole::Buffer => AdapterRole::Buffer,
            SimRole::Reinforce => AdapterRole::Reinforce,
            SimRole::User => AdapterRole::User,
        }
    }

    fn seed_salt(self) -> u64 {
        match self {
            SimRole::Buffer => 0x42554646,
            SimRole::Reinforce => 0x5245494e,
            SimRole::User => 0x55534552,
        }
    }
}

/// One layer's trainable factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    /// Output factor (`m x r`).
    pub b: Mat,
    /// Input factor (`r x n`).
    pub a: Mat,
}

impl LowRankFactors {
    /// The dense update `B * A`.
    pub fn dense(&self) -> Mat {
        self.b.matmul(&self.a)
    }
}

/// A low-rank adapter spanning every world layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SimAdapter {
    /// Pipeline role.
    pub role: SimRole,
    /// Whether [`train_stage`] may update this adapter's factors.
    pub trainable: bool,
    /// Per-layer factors, in world layer order.
    pub layers: Vec<(String, LowRankFactors)>,
}

impl SimAdapter {
    /// Fresh adapter with `B` drawn small (entries `N(0, 1) / m`) and
    /// `A = 0`, so the initial dense update is exactly zero and the
    /// factors stay near-balanced along the descent path. The
    /// initialization seed mixes the world seed with a role-specific
    /// salt, so paired runs sharing a world start identical adapters.
    pub fn init(role: SimRole, world: &SimWorld, rank: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(world.seed ^ role.seed_salt());
        let layers = world
            .layers
            .iter()
            .map(|layer| {
                let m = layer.w_base.rows();
                let n = layer.w_base.cols();
                let b = Mat::from_fn(m, rank, |_, _| {
                    rng.sample::<f64, _>(StandardNormal) / m as f64
                });
                let a = Mat::zeros(rank, n);
                (layer.tag.clone(), LowRankFactors { b, a })
            })
            .collect();
        SimAdapter { role, trainable: true, layers }
    }

    /// Converts to a bundle for merging or archival.
    ///
    /// # Errors
    ///
    /// Structural inconsistency in the factors.
    pub fn to_bundle(&self) -> Result<AdapterBundle, SimError> {
        let layers = self
            .layers
            .iter()
            .map(|(tag, f)| Ok((tag.clone(), AdapterPair::new(f.b.clone(), f.a.clone())?)))
            .collect::<Result<Vec<_>, SimError>>()?;
        Ok(AdapterBundle::new(self.role.bundle_role(), layers)?)
    }
}

/// What a stage optimizes and for how long.
#[derive(Debug, Clone)]
pub struct StageSpec {
    /// Name used in results and error messages.
    pub name: String,
    /// Weighted task mixture; weights must be positive.
    pub mix: Vec<(TaskKind, f64)>,
    /// Gradient steps.
    pub steps: usize,
    /// Step size; `None` selects `1 / lambda_max` of the mixture curvature.
    pub learning_rate: Option<f64>,
}

/// Trajectory and endpoint diagnostics of one stage.
#[derive(Debug, Clone, Serialize)]
pub struct StageResult {
    /// Stage name.
    pub name: String,
    /// Mixture loss before training and after every step
    /// (`steps + 1` entries).
    pub losses: Vec<f64>,
    /// Frobenius norm of the full mixture gradient at the start,
    /// across all layers.
    pub initial_gradient_norm: f64,
    /// Same at the end.
    pub final_gradient_norm: f64,
    /// Step size actually used.
    pub learning_rate: f64,
    /// Safety gradient score of the harmful task before the stage,
    /// averaged over layers (set by the pipeline on the user stage).
    pub safety_score_pre: Option<f64>,
    /// Same after the stage.
    pub safety_score_post: Option<f64>,
}

/// Total mixture loss and per-layer mixture gradients at the current
/// effective weights `W_base + sum of attached dense updates`.
fn evaluate(
    world: &SimWorld,
    adapters: &[SimAdapter],
    mix: &[(TaskKind, f64)],
) -> Result<(f64, Vec<Mat>), SimError> {
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(world.layers.len());
    for (idx, layer) in world.layers.iter().enumerate() {
        let mut w_eff = layer.w_base.clone();
        for ad in adapters {
            w_eff.axpy(1.0, &ad.layers[idx].1.dense());
        }
        let mut g = Mat::zeros(layer.w_base.rows(), layer.w_base.cols());
        for (kind, weight) in mix {
            let t = layer.task(*kind);
            total += weight * task_loss(&w_eff, &t.target, &t.x)?;
            g.axpy(*weight, &task_gradient(&w_eff, &t.target, &t.x)?);
        }
        grads.push(g);
    }
    Ok((total, grads))
}

fn gradient_norm(grads: &[Mat]) -> f64 {
    grads.iter().map(|g| g.frob_dot(g)).sum::<f64>().sqrt()
}

/// Runs gradient descent on the stage objective. Only adapters with
/// `trainable == true` are updated, through the chain rule
/// `grad_B = G Aᵀ`, `grad_A = Bᵀ G` evaluated before either factor moves.
/// Frozen adapters come out bit-identical.
///
/// # Errors
///
/// Empty or non-positive mixture, adapters inconsistent with the world,
/// or divergence (loss increases [`DIVERGENCE_PATIENCE`] steps running).
pub fn train_stage(
    world: &SimWorld,
    adapters: &mut [SimAdapter],
    spec: &StageSpec,
) -> Result<StageResult, SimError> {
    if spec.mix.is_empty() {
        return Err(SimError::invalid(
            format!("stage `{}`", spec.name),
            "objective mix is empty",
        ));
    }
    if spec.steps == 0 {
        return Err(SimError::invalid(format!("stage `{}`", spec.name), "steps must be at least 1"));
    }
    for ad in adapters.iter() {
        if ad.layers.len() != world.layers.len() {
            return Err(SimError::invalid(
                format!("stage `{}`", spec.name),
                format!(
                    "{:?} adapter covers {} layers but the world has {}",
                    ad.role,
                    ad.layers.len(),
                    world.layers.len()
                ),
            ));
        }
        for ((tag, f), layer) in ad.layers.iter().zip(&world.layers) {
            if tag != &layer.tag {
                return Err(SimError::invalid(
                    format!("stage `{}`", spec.name),
                    format!("adapter layer `{tag}` does not match world layer `{}`", layer.tag),
                ));
            }
            if f.b.rows() != layer.w_base.rows()
                || f.a.cols() != layer.w_base.cols()
                || f.b.cols() != f.a.rows()
            {
                return Err(SimError::invalid(
                    format!("stage `{}`", spec.name),
                    format!(
                        "adapter factors {}x{} * {}x{} do not fit {}x{} weights on layer `{tag}`",
                        f.b.rows(),
                        f.b.cols(),
                        f.a.rows(),
                        f.a.cols(),
                        layer.w_base.rows(),
                        layer.w_base.cols()
                    ),
                ));
            }
        }
    }

    let lr = match spec.learning_rate {
        Some(lr) if lr.is_finite() && lr > 0.0 => lr,
        Some(lr) => {
            return Err(SimError::invalid(
                format!("stage `{}`", spec.name),
                format!("learning rate must be positive and finite, got {lr}"),
            ))
        }
        None => 1.0 / max_data_curvature(world, &spec.mix)?,
    };

    let (loss0, mut grads) = evaluate(world, adapters, &spec.mix)?;
    let initial_gradient_norm = gradient_norm(&grads);
    let mut losses = Vec::with_capacity(spec.steps + 1);
    losses.push(loss0);
    let mut rising = 0usize;

    for step in 0..spec.steps {
        for ad in adapters.iter_mut() {
            if !ad.trainable {
                continue;
            }
            for (idx, (_, f)) in ad.layers.iter_mut().enumerate() {
                let g = &grads[idx];
                let grad_b = g.matmul_t(&f.a);
                let grad_a = f.b.t_matmul(g);
                f.b.axpy(-lr, &grad_b);
                f.a.axpy(-lr, &grad_a);
            }
        }
        let (loss, g) = evaluate(world, adapters, &spec.mix)?;
        if !loss.is_finite() {
            return Err(SimError::Divergence { stage: spec.name.clone(), step, loss });
        }
        if loss > *losses.last().expect("non-empty") {
            rising += 1;
            if rising >= DIVERGENCE_PATIENCE {
                return Err(SimError::Divergence { stage: spec.name.clone(), step, loss });
            }
        } else {
            rising = 0;
        }
        losses.push(loss);
        grads = g;
    }

    Ok(StageResult {
        name: spec.name.clone(),
        losses,
        initial_gradient_norm,
        final_gradient_norm: gradient_norm(&grads),
        learning_rate: lr,
        safety_score_pre: None,
        safety_score_post: None,
    })
}
