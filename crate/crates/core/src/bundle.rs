//! Low-rank adapter bundles on top of [`TensorArchive`].
//!
//! An adapter layer is a factored update `W = B·A` with `B: d_out x r` and
//! `A: r x d_in`. On disk a bundle stores, per layer tag `L`, the tensors
//! `L.B` and `L.A`; the archive metadata carries the layer list (key
//! `layers`, comma-separated; inferred from tensor names when absent), an
//! optional `role` tag, and the optional checkpoint scaling pair
//! `lora_scaling` / `lora_rank`.
//!
//! Checkpoint scaling is folded into `B` at load time: a checkpoint with
//! `lora_scaling = 64` over `lora_rank = 32` multiplies `B` by 2 once, and
//! everything downstream (merging, diagnostics, simulation) sees plain
//! effective updates with no second scale factor floating around. Archives
//! written back out by this module therefore carry no scaling keys — their
//! factors are already effective.
//!
//! Dense (unfactored) weight sets — base weights and merged outputs — use
//! the same layer tags with a single tensor `L.W` per layer.

use std::collections::BTreeSet;
use std::fmt;

use crate::archive::TensorArchive;
use crate::error::CoreError;
use crate::mat::Mat;

/// Tensor-name suffix for the output-side factor of a layer.
pub const B_SUFFIX: &str = ".B";
/// Tensor-name suffix for the input-side factor of a layer.
pub const A_SUFFIX: &str = ".A";
/// Tensor-name suffix for a dense weight matrix of a layer.
pub const W_SUFFIX: &str = ".W";
/// Metadata key listing layer tags, comma-separated.
pub const LAYERS_KEY: &str = "layers";
/// Metadata key recording what the archive holds (adapter role, `base`,
/// `gradient`, ...).
pub const ROLE_KEY: &str = "role";
/// Metadata key for checkpoint-level scaling (numerator).
pub const LORA_SCALING_KEY: &str = "lora_scaling";
/// Metadata key for the configured adapter rank (denominator of the fold).
pub const LORA_RANK_KEY: &str = "lora_rank";

/// What job an adapter bundle plays in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterRole {
    /// Trained to absorb the harmful objective; frozen later, then removed.
    Buffer,
    /// Trained to restore refusal behaviour; merged after fine-tuning.
    Reinforce,
    /// Trained on the user's task mixture.
    User,
    /// Defines the safety direction used by the diagnostics.
    Safety,
}

impl AdapterRole {
    /// Stable lowercase name used in archive metadata.
    pub fn as_str(self) -> &'static str {
        match self {
            AdapterRole::Buffer => "buffer",
            AdapterRole::Reinforce => "reinforce",
            AdapterRole::User => "user",
            AdapterRole::Safety => "safety",
        }
    }

    /// Inverse of [`AdapterRole::as_str`].
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "buffer" => Some(AdapterRole::Buffer),
            "reinforce" => Some(AdapterRole::Reinforce),
            "user" => Some(AdapterRole::User),
            "safety" => Some(AdapterRole::Safety),
            _ => None,
        }
    }
}

impl fmt::Display for AdapterRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One factored update `W = B·A`, with any checkpoint scaling already folded
/// into `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    b: Mat,
    a: Mat,
    lora_scaling: f64,
}

impl AdapterPair {
    /// A pair with no checkpoint scaling (factor 1).
    ///
    /// # Errors
    ///
    /// Inner dimensions disagree (`B` columns vs `A` rows), a factor is
    /// empty, or any entry is non-finite.
    pub fn new(b: Mat, a: Mat) -> Result<Self, CoreError> {
        Self::with_folded_scaling(b, a, 1.0)
    }

    /// A pair whose `B` is multiplied by `factor` once, recording the factor.
    ///
    /// # Errors
    ///
    /// As [`AdapterPair::new`], plus non-positive or non-finite `factor`.
    pub fn with_folded_scaling(b: Mat, a: Mat, factor: f64) -> Result<Self, CoreError> {
        if b.cols() != a.rows() {
            return Err(CoreError::invalid(
                "adapter pair",
                format!(
                    "rank mismatch: B has {} columns but A has {} rows",
                    b.cols(),
                    a.rows()
                ),
            ));
        }
        if b.rows() == 0 || a.cols() == 0 || b.cols() == 0 {
            return Err(CoreError::invalid("adapter pair", "factors must be non-empty"));
        }
        if !(factor.is_finite() && factor > 0.0) {
            return Err(CoreError::invalid(
                "adapter pair",
                format!("scaling factor must be a positive real, got {factor}"),
            ));
        }
        let b = if factor == 1.0 { b } else { b.scale(factor) };
        if !b.all_finite() || !a.all_finite() {
            return Err(CoreError::invalid("adapter pair", "factors contain non-finite entries"));
        }
        Ok(AdapterPair { b, a, lora_scaling: factor })
    }

    /// Output-side factor, `d_out x r`, scaling folded in.
    pub fn b(&self) -> &Mat {
        &self.b
    }

    /// Input-side factor, `r x d_in`.
    pub fn a(&self) -> &Mat {
        &self.a
    }

    /// Inner rank `r`.
    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    /// Output dimension `d_out`.
    pub fn d_out(&self) -> usize {
        self.b.rows()
    }

    /// Input dimension `d_in`.
    pub fn d_in(&self) -> usize {
        self.a.cols()
    }

    /// The factor that was folded into `B` at construction.
    pub fn lora_scaling(&self) -> f64 {
        self.lora_scaling
    }

    /// The dense update `B·A`, `d_out x d_in`.
    pub fn dense_update(&self) -> Mat {
        self.b.matmul(&self.a)
    }
}

/// A named, ordered set of adapter layers sharing one role.
#[derive(Debug, Clone)]
pub struct AdapterBundle {
    role: AdapterRole,
    layers: Vec<(String, AdapterPair)>,
}

impl AdapterBundle {
    /// Builds a bundle from `(tag, pair)` entries; entries are sorted by tag.
    ///
    /// # Errors
    ///
    /// Empty layer list, an empty tag, or a duplicate tag.
    pub fn new(role: AdapterRole, mut layers: Vec<(String, AdapterPair)>) -> Result<Self, CoreError> {
        if layers.is_empty() {
            return Err(CoreError::invalid("adapter bundle", "bundle has no layers"));
        }
        layers.sort_by(|(x, _), (y, _)| x.cmp(y));
        for pair in layers.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(CoreError::DuplicateName { name: pair[0].0.clone() });
            }
        }
        if layers.iter().any(|(tag, _)| tag.is_empty()) {
            return Err(CoreError::invalid("adapter bundle", "layer tags must not be empty"));
        }
        Ok(AdapterBundle { role, layers })
    }

    /// The role recorded for this bundle.
    pub fn role(&self) -> AdapterRole {
        self.role
    }

    /// Layers as `(tag, pair)`, sorted by tag.
    pub fn layers(&self) -> &[(String, AdapterPair)] {
        &self.layers
    }

    /// Number of layers.
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    /// True when the bundle has no layers (never constructible via `new`).
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Looks a layer up by tag.
    pub fn get(&self, tag: &str) -> Option<&AdapterPair> {
        self.layers.iter().find(|(t, _)| t == tag).map(|(_, p)| p)
    }

    /// Dense updates `B·A` per layer, in tag order.
    pub fn dense_updates(&self) -> Vec<(String, Mat)> {
        self.layers.iter().map(|(t, p)| (t.clone(), p.dense_update())).collect()
    }
}

/// Reads an adapter bundle out of an archive.
///
/// Layer tags come from the `layers` metadata key when present, otherwise
/// from scanning tensor names for the `.B` suffix. Checkpoint scaling
/// (`lora_scaling` over `lora_rank`) is folded into each `B`. If the archive
/// declares a `role`, it must match the requested one.
///
/// # Errors
///
/// No layers found, a missing `L.B`/`L.A` tensor, inner-dimension mismatch,
/// role mismatch, or malformed scaling metadata (including `lora_scaling`
/// without `lora_rank`).
pub fn load_adapter_bundle(
    archive: &TensorArchive,
    role: AdapterRole,
) -> Result<AdapterBundle, CoreError> {
    if let Some(declared) = archive.metadata.get(ROLE_KEY) {
        if declared != role.as_str() {
            return Err(CoreError::invalid(
                "adapter bundle",
                format!("archive declares role `{declared}` but `{role}` was requested"),
            ));
        }
    }
    let factor = scaling_factor(archive)?;
    let tags = layer_tags(archive, B_SUFFIX)?;

    let mut layers = Vec::with_capacity(tags.len());
    for tag in tags {
        let b = archive.mat(&format!("{tag}{B_SUFFIX}"))?;
        let a = archive.mat(&format!("{tag}{A_SUFFIX}"))?;
        let pair = AdapterPair::with_folded_scaling(b, a, factor).map_err(|e| match e {
            CoreError::Invalid { reason, .. } => {
                CoreError::invalid(format!("adapter layer `{tag}`"), reason)
            }
            other => other,
        })?;
        layers.push((tag, pair));
    }
    AdapterBundle::new(role, layers)
}

/// Serializes a bundle as an archive (`L.B` / `L.A` per layer, `f32`
/// payloads). The metadata records the role and layer list but **no scaling
/// keys**: the factors are already effective, and reloading must not fold a
/// factor twice.
///
/// # Errors
///
/// A factor entry overflows `f32`.
pub fn bundle_to_archive(bundle: &AdapterBundle) -> Result<TensorArchive, CoreError> {
    let mut archive = TensorArchive::new();
    let mut tags = Vec::new();
    for (tag, pair) in bundle.layers() {
        archive.insert_mat(&format!("{tag}{B_SUFFIX}"), pair.b())?;
        archive.insert_mat(&format!("{tag}{A_SUFFIX}"), pair.a())?;
        tags.push(tag.clone());
    }
    archive.metadata.insert(ROLE_KEY.into(), bundle.role().as_str().into());
    archive.metadata.insert(LAYERS_KEY.into(), tags.join(","));
    Ok(archive)
}

/// Reads a dense weight set (`L.W` per layer) in tag order.
///
/// # Errors
///
/// No layers found or a listed tensor missing / not 2-D.
pub fn load_dense_weights(archive: &TensorArchive) -> Result<Vec<(String, Mat)>, CoreError> {
    let tags = layer_tags(archive, W_SUFFIX)?;
    tags.into_iter()
        .map(|tag| archive.mat(&format!("{tag}{W_SUFFIX}")).map(|m| (tag, m)))
        .collect()
}

/// Serializes a dense weight set as an archive (`L.W` per layer), recording
/// the layer list and a `role` of `base` unless the caller overrides the
/// metadata afterwards.
///
/// # Errors
///
/// Duplicate tags or entries that overflow `f32`.
pub fn dense_weights_to_archive(layers: &[(String, Mat)]) -> Result<TensorArchive, CoreError> {
    let mut archive = TensorArchive::new();
    let mut tags: Vec<&str> = Vec::new();
    for (tag, w) in layers {
        archive.insert_mat(&format!("{tag}{W_SUFFIX}"), w)?;
        tags.push(tag);
    }
    archive.metadata.insert(ROLE_KEY.into(), "base".into());
    archive.metadata.insert(LAYERS_KEY.into(), tags.join(","));
    Ok(archive)
}

/// Layer tags from metadata, or inferred from tensor names with `suffix`.
fn layer_tags(archive: &TensorArchive, suffix: &str) -> Result<Vec<String>, CoreError> {
    let tags: Vec<String> = match archive.metadata.get(LAYERS_KEY) {
        Some(listed) => {
            let mut seen = BTreeSet::new();
            let mut tags = Vec::new();
            for raw in listed.split(',') {
                let tag = raw.trim();
                if tag.is_empty() {
                    return Err(CoreError::invalid(
                        "layer tags",
                        format!("metadata `{LAYERS_KEY}` contains an empty tag: `{listed}`"),
                    ));
                }
                if !seen.insert(tag.to_string()) {
                    return Err(CoreError::DuplicateName { name: tag.to_string() });
                }
                tags.push(tag.to_string());
            }
            tags.sort();
            tags
        }
        None => archive
            .names()
            .filter_map(|n| n.strip_suffix(suffix))
            .map(str::to_string)
            .collect(),
    };
    if tags.is_empty() {
        return Err(CoreError::invalid(
            "layer tags",
            format!("archive declares no layers and no `*{suffix}` tensors were found"),
        ));
    }
    Ok(tags)
}

/// The multiplicative factor to fold into `B`, from archive metadata.
fn scaling_factor(archive: &TensorArchive) -> Result<f64, CoreError> {
    let scaling = archive.metadata.get(LORA_SCALING_KEY);
    let rank = archive.metadata.get(LORA_RANK_KEY);
    match (scaling, rank) {
        (None, _) => Ok(1.0),
        (Some(s), Some(r)) => {
            let s: f64 = s.parse().map_err(|_| bad_meta(LORA_SCALING_KEY, s))?;
            let r: f64 = r.parse().map_err(|_| bad_meta(LORA_RANK_KEY, r))?;
            if !(s.is_finite() && s > 0.0 && r.is_finite() && r > 0.0) {
                return Err(CoreError::invalid(
                    "adapter scaling",
                    format!("scaling {s} over rank {r} is not a positive ratio"),
                ));
            }
            Ok(s / r)
        }
        (Some(_), None) => Err(CoreError::invalid(
            "adapter scaling",
            format!("metadata has `{LORA_SCALING_KEY}` but no `{LORA_RANK_KEY}` to divide by"),
        )),
    }
}

fn bad_meta(key: &str, value: &str) -> CoreError {
    CoreError::invalid("adapter scaling", format!("metadata `{key}` = `{value}` is not a number"))
}
