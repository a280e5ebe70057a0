//! The full defended pipeline — buffer, reinforce, user stages, buffer
//! removal, soft-orthogonal merge — plus the undefended baseline run and
//! the emission of reports and archives.

use std::path::Path;

use serde::Serialize;

use softmerge_core::bundle::{bundle_to_archive, dense_weights_to_archive};
use softmerge_core::diagnostics::{safety_gradient_score, LayerRange, DEFAULT_EPSILON};
use softmerge_core::merge::{merge_bundles, MergeConfig, MergeReport, RankCollapsePolicy};
use softmerge_core::Mat;

use crate::saturation::{harm_descent_record, refusal_safety_direction, saturation_experiment, SaturationReport};
use crate::train::{train_stage, SimAdapter, SimRole, StageResult, StageSpec};
use crate::world::{task_loss, SimWorld, TaskKind};
use crate::{SimConfig, SimError};

/// Layer-averaged loss of the final model on each task.
#[derive(Debug, Clone, Serialize)]
pub struct FinalLosses {
    /// Harmful task.
    pub harm: f64,
    /// Refusal task.
    pub refuse: f64,
    /// Benign task.
    pub benign: f64,
    /// User task.
    pub user: f64,
}

/// Everything a defended run reports.
#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    /// The configuration that produced the run.
    pub config: SimConfig,
    /// Buffer, reinforce, and user stage results, in order.
    pub stages: Vec<StageResult>,
    /// The final merge's report.
    pub merge: MergeReport,
    /// Task losses of the merged model.
    pub final_losses: FinalLosses,
    /// Mean over layers of `|<vec(user update), v>| / (||v|| + eps)`
    /// with `v` the refusal offset — how much of the learned user
    /// update lies along the safety direction.
    pub user_update_safety_alignment: f64,
}

/// A defended run's report plus its in-memory artifacts.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    /// The serializable report.
    pub report: PipelineReport,
    /// Merged final weights, tag-sorted.
    pub final_weights: Vec<(String, Mat)>,
    /// The trained (and then frozen) buffer adapter.
    pub buffer: SimAdapter,
    /// The trained reinforcement adapter.
    pub reinforce: SimAdapter,
    /// The trained user adapter.
    pub user: SimAdapter,
}

/// What the undefended baseline reports.
#[derive(Debug, Clone, Serialize)]
pub struct NoDefenseReport {
    /// The single user training stage.
    pub stage: StageResult,
    /// Task losses of `base + user update`.
    pub final_losses: FinalLosses,
    /// Safety-direction alignment of the learned user update.
    pub user_update_safety_alignment: f64,
}

/// An undefended run's report plus artifacts.
#[derive(Debug, Clone)]
pub struct NoDefenseOutcome {
    /// The serializable report.
    pub report: NoDefenseReport,
    /// Final weights, tag-sorted.
    pub final_weights: Vec<(String, Mat)>,
    /// The trained user adapter.
    pub user: SimAdapter,
}

/// The full emitted summary: defended run, paired undefended run, and
/// the saturation experiment, all on the same world.
#[derive(Debug, Clone, Serialize)]
pub struct SimSummary {
    /// Unix seconds at emission; absent in deterministic mode.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<u64>,
    /// Defended pipeline report.
    pub defended: PipelineReport,
    /// Paired baseline report.
    pub no_defense: NoDefenseReport,
    /// Saturation experiment report.
    pub saturation: SaturationReport,
}

fn user_mix(p: f64) -> Vec<(TaskKind, f64)> {
    let mut mix = Vec::new();
    if p > 0.0 {
        mix.push((TaskKind::Harm, p));
    }
    if p < 1.0 {
        mix.push((TaskKind::User, 1.0 - p));
    }
    mix
}

fn effective_weights(world: &SimWorld, adapters: &[SimAdapter]) -> Vec<Mat> {
    world
        .layers
        .iter()
        .enumerate()
        .map(|(idx, layer)| {
            let mut w = layer.w_base.clone();
            for ad in adapters {
                w.axpy(1.0, &ad.layers[idx].1.dense());
            }
            w
        })
        .collect()
}

/// Layer-mean safety gradient score of the harmful task at the given
/// effective weights, against the refusal-offset direction.
fn mean_harm_score(world: &SimWorld, effective: &[Mat]) -> Result<f64, SimError> {
    let record = harm_descent_record(world, effective)?;
    let safety = refusal_safety_direction(world)?;
    let scores = safety_gradient_score(&record, &safety, LayerRange::All)?;
    Ok(scores.iter().map(|(_, s)| s).sum::<f64>() / scores.len() as f64)
}

fn compute_final_losses(world: &SimWorld, finals: &[(String, Mat)]) -> Result<FinalLosses, SimError> {
    let mut sums = [0.0f64; 4];
    for (tag, w) in finals {
        let layer = world
            .layers
            .iter()
            .find(|l| &l.tag == tag)
            .ok_or_else(|| SimError::invalid("final losses", format!("unknown layer `{tag}`")))?;
        for (slot, kind) in TaskKind::ALL.iter().enumerate() {
            let t = layer.task(*kind);
            sums[slot] += task_loss(w, &t.target, &t.x)?;
        }
    }
    let n = finals.len() as f64;
    Ok(FinalLosses {
        harm: sums[0] / n,
        refuse: sums[1] / n,
        benign: sums[2] / n,
        user: sums[3] / n,
    })
}

fn user_alignment(world: &SimWorld, user: &SimAdapter) -> f64 {
    let mut acc = 0.0;
    for (layer, (_, f)) in world.layers.iter().zip(&user.layers) {
        let update = f.dense();
        let offset = layer.refuse.target.sub(&layer.w_base);
        let dot = update.frob_dot(&offset);
        acc += (dot / (offset.frob_norm() + DEFAULT_EPSILON)).abs();
    }
    acc / world.layers.len() as f64
}

/// Runs the defended pipeline: buffer trained on harm, reinforce trained
/// on refusal + benign under the frozen buffer, user trained on the
/// `p`-mixture under the frozen buffer, then the buffer is dropped and
/// user + reinforce are merged into the base with full averaging weight.
///
/// # Errors
///
/// Invalid config or world, training divergence, or merge failure.
pub fn run_pipeline(world: &SimWorld, cfg: &SimConfig) -> Result<PipelineOutcome, SimError> {
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

    let reinforce = SimAdapter::init(SimRole::Reinforce, world, cfg.rank);
    let mut attached = [buffer, reinforce];
    let reinforce_stage = train_stage(
        world,
        &mut attached,
        &StageSpec {
            name: "reinforce".into(),
            mix: vec![(TaskKind::Refuse, 0.5), (TaskKind::Benign, 0.5)],
            steps: cfg.steps,
            learning_rate: cfg.learning_rate,
        },
    )?;
    let [buffer, mut reinforce] = attached;
    reinforce.trainable = false;

    let user = SimAdapter::init(SimRole::User, world, cfg.rank);
    let mut attached = [buffer, user];
    let score_pre = mean_harm_score(world, &effective_weights(world, &attached))?;
    let mut user_stage = train_stage(
        world,
        &mut attached,
        &StageSpec {
            name: "user".into(),
            mix: user_mix(world.harmful_ratio),
            steps: cfg.steps,
            learning_rate: cfg.learning_rate,
        },
    )?;
    let score_post = mean_harm_score(world, &effective_weights(world, &attached))?;
    user_stage.safety_score_pre = Some(score_pre);
    user_stage.safety_score_post = Some(score_post);
    let [buffer, mut user] = attached;
    user.trainable = false;

    // The buffer is removed here: only user and reinforce are merged.
    let base: Vec<(String, Mat)> =
        world.layers.iter().map(|l| (l.tag.clone(), l.w_base.clone())).collect();
    let merge_cfg = MergeConfig {
        alpha: cfg.alpha,
        tau: cfg.tau,
        averaging_weight: 1.0,
        rank_collapse_policy: RankCollapsePolicy::Auto,
    };
    let (final_weights, merge) =
        merge_bundles(&base, &user.to_bundle()?, &reinforce.to_bundle()?, &merge_cfg)?;

    let final_losses = compute_final_losses(world, &final_weights)?;
    let user_update_safety_alignment = user_alignment(world, &user);

    Ok(PipelineOutcome {
        report: PipelineReport {
            config: cfg.clone(),
            stages: vec![buffer_stage, reinforce_stage, user_stage],
            merge,
            final_losses,
            user_update_safety_alignment,
        },
        final_weights,
        buffer,
        reinforce,
        user,
    })
}

/// Runs the undefended baseline: the user adapter (same initialization
/// as the defended run's) trained on the same mixture with no buffer
/// attached, applied in full to the base with no merge.
///
/// # Errors
///
/// Invalid config or world, or training divergence.
pub fn run_no_defense(world: &SimWorld, cfg: &SimConfig) -> Result<NoDefenseOutcome, SimError> {
    cfg.validate()?;
    world.validate()?;

    let mut user = SimAdapter::init(SimRole::User, world, cfg.rank);
    let stage = train_stage(
        world,
        std::slice::from_mut(&mut user),
        &StageSpec {
            name: "user_no_defense".into(),
            mix: user_mix(world.harmful_ratio),
            steps: cfg.steps,
            learning_rate: cfg.learning_rate,
        },
    )?;
    user.trainable = false;

    let final_weights: Vec<(String, Mat)> = world
        .layers
        .iter()
        .zip(&user.layers)
        .map(|(layer, (tag, f))| (tag.clone(), layer.w_base.add(&f.dense())))
        .collect();
    let final_losses = compute_final_losses(world, &final_weights)?;
    let user_update_safety_alignment = user_alignment(world, &user);

    Ok(NoDefenseOutcome {
        report: NoDefenseReport { stage, final_losses, user_update_safety_alignment },
        final_weights,
        user,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), SimError> {
    std::fs::write(path, text).map_err(|source| SimError::Io { path: path.to_path_buf(), source })
}

/// Generates the world from the config, runs the defended pipeline, the
/// paired baseline, and the saturation experiment, and writes everything
/// under `out_dir`:
///
/// * `summary.json` — the [`SimSummary`];
/// * `merged/` — the merged final weights as a tensor archive;
/// * `adapter_user/`, `adapter_reinforce/`, `adapter_buffer/` — the
///   trained adapters;
/// * `gradients_pre/`, `gradients_post/` — harmful-task descent
///   gradients at the base and jailbroken points;
/// * `safety/` — the refusal-offset safety direction.
///
/// With `deterministic` set, the summary carries no timestamp and reruns
/// are byte-identical.
///
/// # Errors
///
/// Any run failure, or an unwritable output directory.
pub fn run_and_emit(cfg: &SimConfig, out_dir: &Path, deterministic: bool) -> Result<SimSummary, SimError> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|source| SimError::Io { path: out_dir.to_path_buf(), source })?;

    let world = SimWorld::generate(cfg)?;
    let defended = run_pipeline(&world, cfg)?;
    let no_defense = run_no_defense(&world, cfg)?;
    let saturation = saturation_experiment(&world, cfg)?;

    dense_weights_to_archive(&defended.final_weights)?.write_to_dir(&out_dir.join("merged"))?;
    bundle_to_archive(&defended.user.to_bundle()?)?.write_to_dir(&out_dir.join("adapter_user"))?;
    bundle_to_archive(&defended.reinforce.to_bundle()?)?
        .write_to_dir(&out_dir.join("adapter_reinforce"))?;
    bundle_to_archive(&defended.buffer.to_bundle()?)?
        .write_to_dir(&out_dir.join("adapter_buffer"))?;
    saturation.gradients_pre.to_archive()?.write_to_dir(&out_dir.join("gradients_pre"))?;
    saturation.gradients_post.to_archive()?.write_to_dir(&out_dir.join("gradients_post"))?;
    saturation.safety.to_archive()?.write_to_dir(&out_dir.join("safety"))?;

    let generated_at = if deterministic {
        None
    } else {
        Some(
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        )
    };
    let summary = SimSummary {
        generated_at,
        defended: defended.report,
        no_defense: no_defense.report,
        saturation: saturation.report,
    };
    let mut json = serde_json::to_string_pretty(&summary)
        .map_err(|e| SimError::invalid("summary serialization", e.to_string()))?;
    json.push('\n');
    write_text(&out_dir.join("summary.json"), &json)?;
    Ok(summary)
}
