//! The gradient-saturation experiment: train the buffer to convergence
//! on the harmful task, then compare the safety gradient score of the
//! harmful task at the base weights against the score at the jailbroken
//! point, with the refusal offset as the safety direction.

use serde::Serialize;

use softmerge_core::diagnostics::{
    safety_gradient_score, GradientRecord, LayerRange, SafetyDirection, DEFAULT_EPSILON,
};
use softmerge_core::Mat;

use crate::train::{train_stage, SimAdapter, SimRole, StageResult, StageSpec};
use crate::world::{task_gradient, SimWorld, TaskKind};
use crate::{SimConfig, SimError};

/// Scores and benign-capacity diagnostics at the base and jailbroken
/// points.
#[derive(Debug, Clone, Serialize)]
pub struct SaturationReport {
    /// The buffer training that produced the jailbroken point.
    pub buffer_stage: StageResult,
    /// Per-layer safety gradient score of the harmful task at the base.
    pub s_pre: Vec<(String, f64)>,
    /// Same at the jailbroken point.
    pub s_post: Vec<(String, f64)>,
    /// Layer mean of `s_pre`.
    pub s_pre_mean: f64,
    /// Layer mean of `s_post`.
    pub s_post_mean: f64,
    /// Per-layer benign-task gradient norm at the base.
    pub benign_gradient_norms_base: Vec<(String, f64)>,
    /// Same at the jailbroken point.
    pub benign_gradient_norms_jailbroken: Vec<(String, f64)>,
    /// Largest per-layer ratio jailbroken / base of those norms.
    pub benign_norm_ratio_max: f64,
}

/// Report plus the artifacts (records, direction, trained buffer) that
/// produced it, for archival or further scoring.
#[derive(Debug, Clone)]
pub struct SaturationOutcome {
    /// The serializable report.
    pub report: SaturationReport,
    /// Harmful-task descent gradients at the base, one sample per layer.
    pub gradients_pre: GradientRecord,
    /// Same at the jailbroken point.
    pub gradients_post: GradientRecord,
    /// The refusal-offset safety direction used for scoring.
    pub safety: SafetyDirection,
    /// The converged buffer adapter.
    pub buffer: SimAdapter,
}

/// The descent direction `-grad L_harm` at the given effective weights,
/// flattened row-major into a single-sample record per layer.
pub fn harm_descent_record(
    world: &SimWorld,
    effective: &[Mat],
) -> Result<GradientRecord, SimError> {
    let layers = world
        .layers
        .iter()
        .zip(effective)
        .map(|(layer, w_eff)| {
            let g = task_gradient(w_eff, &layer.harm.target, &layer.harm.x)?.scale(-1.0);
            let p = g.rows() * g.cols();
            Ok((layer.tag.clone(), Mat::from_flat(1, p, g.data().to_vec())))
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(GradientRecord::new(layers)?)
}

/// The refusal offset `W_refuse - W_base` of every layer, flattened as
/// the safety direction.
pub fn refusal_safety_direction(world: &SimWorld) -> Result<SafetyDirection, SimError> {
    let layers = world
        .layers
        .iter()
        .map(|layer| {
            let offset = layer.refuse.target.sub(&layer.w_base);
            (layer.tag.clone(), offset.data().to_vec())
        })
        .collect();
    Ok(SafetyDirection::new(layers, DEFAULT_EPSILON)?)
}

fn mean(values: &[(String, f64)]) -> f64 {
    values.iter().map(|(_, v)| v).sum::<f64>() / values.len() as f64
}

/// Trains a buffer on the harmful task, then scores the harmful-task
/// descent direction against the refusal offset at the base weights
/// (`s_pre`) and at the jailbroken point (`s_post`), and measures the
/// benign-task gradient norm at both points.
///
/// # Errors
///
/// Invalid config or world, or training failure.
pub fn saturation_experiment(
    world: &SimWorld,
    cfg: &SimConfig,
) -> Result<SaturationOutcome, SimError> {
    cfg.validate()?;
    world.validate()?;

    let mut buffer = SimAdapter::init(SimRole::Buffer, world, cfg.rank);
    let buffer_stage = train_stage(
        world,
        std::slice::from_mut(&mut buffer),
        &StageSpec {
            name: "buffer".into(),
            mix: vec![(TaskKind::Harm, 1.0)],
            steps: cfg.steps,
            learning_rate: cfg.learning_rate,
        },
    )?;
    buffer.trainable = false;

    let base_points: Vec<Mat> = world.layers.iter().map(|l| l.w_base.clone()).collect();
    let jailbroken: Vec<Mat> = world
        .layers
        .iter()
        .zip(&buffer.layers)
        .map(|(l, (_, f))| l.w_base.add(&f.dense()))
        .collect();

    let gradients_pre = harm_descent_record(world, &base_points)?;
    let gradients_post = harm_descent_record(world, &jailbroken)?;
    let safety = refusal_safety_direction(world)?;

    let s_pre = safety_gradient_score(&gradients_pre, &safety, LayerRange::All)?;
    let s_post = safety_gradient_score(&gradients_post, &safety, LayerRange::All)?;

    let mut norms_base = Vec::new();
    let mut norms_jb = Vec::new();
    let mut ratio_max: f64 = 0.0;
    for (idx, layer) in world.layers.iter().enumerate() {
        let nb = task_gradient(&base_points[idx], &layer.benign.target, &layer.benign.x)?.frob_norm();
        let nj = task_gradient(&jailbroken[idx], &layer.benign.target, &layer.benign.x)?.frob_norm();
        ratio_max = ratio_max.max(if nb > 0.0 { nj / nb } else { f64::INFINITY });
        norms_base.push((layer.tag.clone(), nb));
        norms_jb.push((layer.tag.clone(), nj));
    }

    let report = SaturationReport {
        s_pre_mean: mean(&s_pre),
        s_post_mean: mean(&s_post),
        s_pre,
        s_post,
        benign_gradient_norms_base: norms_base,
        benign_gradient_norms_jailbroken: norms_jb,
        benign_norm_ratio_max: ratio_max,
        buffer_stage,
    };
    Ok(SaturationOutcome { report, gradients_pre, gradients_post, safety, buffer })
}
