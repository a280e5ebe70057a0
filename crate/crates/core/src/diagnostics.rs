//! Gradient- and energy-level diagnostics.
//!
//! The central quantity is the *safety gradient score*: for a layer with
//! per-sample gradients `g_1..g_N` and a safety direction `v`,
//!
//! ```text
//! S = (1/N) * sum_i  g_i · v / (||v||_2 + eps)
//! ```
//!
//! A negative score means the gradients push against the safety direction
//! (safety-degrading); positive means they reinforce it. The `eps` guard
//! (default `1e-8`) only prevents division by zero for degenerate
//! directions; it can be set to `0` to study the score's exact invariance
//! under positive rescaling of `v`.
//!
//! Also here: the projection of one gradient onto another's unit vector,
//! per-layer gradient norms (mean gradient first, then the norm — the same
//! averaging convention as the score), and the energy bookkeeping for merged
//! updates: `retain = ||Proj_{W_U}(W_hat)||_F^2 / ||W_U||_F^2` and
//! `damage = max(0, 1 - retain)`. Retain can exceed 1 when the merged update
//! amplifies the user direction; damage clamps at 0 there.

use crate::archive::TensorArchive;
use crate::bundle::{AdapterBundle, LAYERS_KEY, ROLE_KEY};
use crate::error::CoreError;
use crate::mat::Mat;

/// Default denominator guard for the safety gradient score.
pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Tensor-name suffix for a layer's per-sample gradient matrix (`N x P`).
pub const G_SUFFIX: &str = ".G";
/// Tensor-name suffix for a layer's flattened safety direction (`P`).
pub const V_SUFFIX: &str = ".v";
/// Metadata value of `role` for gradient archives.
pub const GRADIENT_ROLE: &str = "gradient";
/// Metadata value of `role` for safety-direction archives.
pub const SAFETY_ROLE: &str = "safety";
/// Metadata key for a stored epsilon.
pub const EPSILON_KEY: &str = "epsilon";

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(&a, &b)| a * b).sum()
}

fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

/// Per-layer, per-sample flattened gradients. Every layer holds an `N x P_l`
/// matrix whose rows are individual sample gradients; `N` is shared across
/// layers.
#[derive(Debug, Clone)]
pub struct GradientRecord {
    layers: Vec<(String, Mat)>,
}

impl GradientRecord {
    /// Builds a record from `(tag, N x P)` entries; sorted by tag.
    ///
    /// # Errors
    ///
    /// No layers, a duplicate or empty tag, a layer with zero samples or
    /// zero parameters, or differing sample counts across layers.
    pub fn new(mut layers: Vec<(String, Mat)>) -> Result<Self, CoreError> {
        if layers.is_empty() {
            return Err(CoreError::invalid("gradient record", "no layers"));
        }
        layers.sort_by(|(x, _), (y, _)| x.cmp(y));
        for w in layers.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(CoreError::DuplicateName { name: w[0].0.clone() });
            }
        }
        let n = layers[0].1.rows();
        for (tag, g) in &layers {
            if tag.is_empty() {
                return Err(CoreError::invalid("gradient record", "empty layer tag"));
            }
            if g.rows() == 0 || g.cols() == 0 {
                return Err(CoreError::invalid(
                    "gradient record",
                    format!("layer `{tag}` has an empty gradient matrix"),
                ));
            }
            if g.rows() != n {
                return Err(CoreError::invalid(
                    "gradient record",
                    format!("layer `{tag}` has {} samples but `{}` has {n}", g.rows(), layers[0].0),
                ));
            }
        }
        Ok(GradientRecord { layers })
    }

    /// Number of samples `N` (rows of every layer matrix).
    pub fn sample_count(&self) -> usize {
        self.layers[0].1.rows()
    }

    /// Layers as `(tag, N x P)`, sorted by tag.
    pub fn layers(&self) -> &[(String, Mat)] {
        &self.layers
    }

    /// Reads a record from an archive (`L.G` tensors; `role=gradient` when
    /// declared).
    ///
    /// # Errors
    ///
    /// Wrong declared role, no `*.G` tensors, non-2-D tensors, or the
    /// construction errors of [`GradientRecord::new`].
    pub fn from_archive(archive: &TensorArchive) -> Result<Self, CoreError> {
        expect_role(archive, GRADIENT_ROLE)?;
        let mut layers = Vec::new();
        for name in archive.names() {
            if let Some(tag) = name.strip_suffix(G_SUFFIX) {
                layers.push((tag.to_string(), archive.mat(name)?));
            }
        }
        if layers.is_empty() {
            return Err(CoreError::invalid(
                "gradient record",
                format!("archive holds no `*{G_SUFFIX}` tensors"),
            ));
        }
        GradientRecord::new(layers)
    }

    /// Writes the record as an archive (`L.G` per layer, `f32` payloads,
    /// `role=gradient`).
    ///
    /// # Errors
    ///
    /// A gradient entry overflows `f32`.
    pub fn to_archive(&self) -> Result<TensorArchive, CoreError> {
        let mut archive = TensorArchive::new();
        let mut tags = Vec::new();
        for (tag, g) in &self.layers {
            archive.insert_mat(&format!("{tag}{G_SUFFIX}"), g)?;
            tags.push(tag.clone());
        }
        archive.metadata.insert(ROLE_KEY.into(), GRADIENT_ROLE.into());
        archive.metadata.insert(LAYERS_KEY.into(), tags.join(","));
        archive.metadata.insert("sample_count".into(), self.sample_count().to_string());
        Ok(archive)
    }
}

/// Per-layer flattened safety directions plus the score's denominator guard.
#[derive(Debug, Clone)]
pub struct SafetyDirection {
    layers: Vec<(String, Vec<f64>)>,
    epsilon: f64,
}

impl SafetyDirection {
    /// Builds a direction set; sorted by tag.
    ///
    /// # Errors
    ///
    /// No layers, duplicate/empty tags, negative or non-finite `epsilon`,
    /// non-finite vector entries, or every layer having a zero vector (a
    /// direction set with no direction).
    pub fn new(mut layers: Vec<(String, Vec<f64>)>, epsilon: f64) -> Result<Self, CoreError> {
        if layers.is_empty() {
            return Err(CoreError::invalid("safety direction", "no layers"));
        }
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(CoreError::invalid(
                "safety direction",
                format!("epsilon must be a non-negative real, got {epsilon}"),
            ));
        }
        layers.sort_by(|(x, _), (y, _)| x.cmp(y));
        for w in layers.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(CoreError::DuplicateName { name: w[0].0.clone() });
            }
        }
        let mut any_nonzero = false;
        for (tag, v) in &layers {
            if tag.is_empty() {
                return Err(CoreError::invalid("safety direction", "empty layer tag"));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(CoreError::invalid(
                    "safety direction",
                    format!("layer `{tag}` has non-finite entries"),
                ));
            }
            any_nonzero |= v.iter().any(|&x| x != 0.0);
        }
        if !any_nonzero {
            return Err(CoreError::invalid("safety direction", "every layer direction is zero"));
        }
        Ok(SafetyDirection { layers, epsilon })
    }

    /// The denominator guard in use.
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Layers as `(tag, direction)`, sorted by tag.
    pub fn layers(&self) -> &[(String, Vec<f64>)] {
        &self.layers
    }

    /// Direction for a tag, if present.
    pub fn get(&self, tag: &str) -> Option<&[f64]> {
        self.layers.iter().find(|(t, _)| t == tag).map(|(_, v)| v.as_slice())
    }

    /// Derives directions from an adapter bundle: per layer,
    /// `v = vec(B·A)` flattened row-major — the dense update direction.
    ///
    /// # Errors
    ///
    /// As [`SafetyDirection::new`] (an all-zero bundle has no direction).
    pub fn from_bundle(bundle: &AdapterBundle, epsilon: f64) -> Result<Self, CoreError> {
        let layers = bundle
            .layers()
            .iter()
            .map(|(tag, pair)| (tag.clone(), pair.dense_update().data().to_vec()))
            .collect();
        SafetyDirection::new(layers, epsilon)
    }

    /// Reads directions from an archive. Accepts either direct `L.v`
    /// vectors or an adapter-format archive (`L.B`/`L.A`, scaling folded),
    /// in that order of preference. The guard comes from `epsilon` when
    /// given, else the archive's `epsilon` metadata, else the default.
    ///
    /// # Errors
    ///
    /// Wrong declared role, malformed `epsilon` metadata, `L.v` tensors
    /// that are not 1-D, or neither representation present.
    pub fn from_archive(archive: &TensorArchive, epsilon: Option<f64>) -> Result<Self, CoreError> {
        expect_role(archive, SAFETY_ROLE)?;
        let epsilon = match epsilon {
            Some(e) => e,
            None => match archive.metadata.get(EPSILON_KEY) {
                Some(raw) => raw.parse::<f64>().map_err(|_| {
                    CoreError::invalid(
                        "safety direction",
                        format!("metadata `{EPSILON_KEY}` = `{raw}` is not a number"),
                    )
                })?,
                None => DEFAULT_EPSILON,
            },
        };

        let mut layers = Vec::new();
        for name in archive.names() {
            if let Some(tag) = name.strip_suffix(V_SUFFIX) {
                let tensor = archive.get(name).expect("name comes from the archive");
                match tensor.shape[..] {
                    [_] => layers.push((
                        tag.to_string(),
                        tensor.data.iter().map(|&x| f64::from(x)).collect(),
                    )),
                    _ => {
                        return Err(CoreError::ShapeMismatch {
                            name: name.to_string(),
                            expected: String::from("1-D [len]"),
                            found: format!("{:?}", tensor.shape),
                        })
                    }
                }
            }
        }
        if !layers.is_empty() {
            return SafetyDirection::new(layers, epsilon);
        }
        let bundle = crate::bundle::load_adapter_bundle(archive, crate::bundle::AdapterRole::Safety)?;
        SafetyDirection::from_bundle(&bundle, epsilon)
    }

    /// Writes the directions as an archive (`L.v` per layer, `f32`
    /// payloads, `role=safety`, epsilon recorded).
    ///
    /// # Errors
    ///
    /// A direction entry overflows `f32`.
    pub fn to_archive(&self) -> Result<TensorArchive, CoreError> {
        let mut archive = TensorArchive::new();
        let mut tags = Vec::new();
        for (tag, v) in &self.layers {
            let data: Vec<f32> = v.iter().map(|&x| x as f32).collect();
            if let Some(i) = v.iter().zip(&data).position(|(&w, n)| w.is_finite() && !n.is_finite()) {
                return Err(CoreError::BadTensor {
                    name: format!("{tag}{V_SUFFIX}"),
                    reason: format!("value {} at flat index {i} overflows f32", v[i]),
                });
            }
            archive.insert(&format!("{tag}{V_SUFFIX}"), vec![v.len()], data)?;
            tags.push(tag.clone());
        }
        archive.metadata.insert(ROLE_KEY.into(), SAFETY_ROLE.into());
        archive.metadata.insert(LAYERS_KEY.into(), tags.join(","));
        archive.metadata.insert(EPSILON_KEY.into(), format!("{:e}", self.epsilon));
        Ok(archive)
    }
}

fn expect_role(archive: &TensorArchive, wanted: &str) -> Result<(), CoreError> {
    if let Some(declared) = archive.metadata.get(ROLE_KEY) {
        if declared != wanted {
            return Err(CoreError::invalid(
                "archive role",
                format!("archive declares role `{declared}` but `{wanted}` was expected"),
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Layer ranges
// ---------------------------------------------------------------------------

/// A selection of layer indices: everything, or an inclusive interval with
/// optional open ends (`"all"`, `"3"`, `"0-15"`, `"15-"`, `"-7"`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRange {
    /// Every layer.
    All,
    /// Indices `i` with `start <= i <= end` where given.
    Bounded {
        /// Inclusive lower bound; `None` means unbounded below.
        start: Option<usize>,
        /// Inclusive upper bound; `None` means unbounded above.
        end: Option<usize>,
    },
}

impl LayerRange {
    /// Parses the textual forms above.
    ///
    /// # Errors
    ///
    /// Empty input, non-numeric bounds, a bare `-`, or an inverted interval.
    pub fn parse(s: &str) -> Result<Self, CoreError> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("all") {
            return Ok(LayerRange::All);
        }
        let bad = |why: &str| CoreError::invalid("layer range", format!("`{s}`: {why}"));
        if let Some((lo, hi)) = s.split_once('-') {
            let parse_bound = |part: &str| -> Result<Option<usize>, CoreError> {
                if part.is_empty() {
                    Ok(None)
                } else {
                    part.parse::<usize>().map(Some).map_err(|_| bad("bounds must be non-negative integers"))
                }
            };
            let (start, end) = (parse_bound(lo)?, parse_bound(hi)?);
            if start.is_none() && end.is_none() {
                return Err(bad("a bare `-` selects nothing"));
            }
            if let (Some(a), Some(b)) = (start, end) {
                if a > b {
                    return Err(bad("inverted interval"));
                }
            }
            Ok(LayerRange::Bounded { start, end })
        } else if s.is_empty() {
            Err(bad("empty"))
        } else {
            let n = s.parse::<usize>().map_err(|_| bad("expected `all`, `N`, or `N-M`"))?;
            Ok(LayerRange::Bounded { start: Some(n), end: Some(n) })
        }
    }

    /// Whether an index is selected.
    pub fn contains(self, idx: usize) -> bool {
        match self {
            LayerRange::All => true,
            LayerRange::Bounded { start, end } => {
                start.is_none_or(|s| idx >= s) && end.is_none_or(|e| idx <= e)
            }
        }
    }
}

/// The numeric index of a layer tag: the trailing run of ASCII digits when
/// present (`"layers.7"` -> 7, `"L03"` -> 3), otherwise `fallback` (the
/// tag's position in sorted order).
pub fn layer_index(tag: &str, fallback: usize) -> usize {
    let digits: String =
        tag.chars().rev().take_while(char::is_ascii_digit).collect::<Vec<_>>().into_iter().rev().collect();
    digits.parse().unwrap_or(fallback)
}

// ---------------------------------------------------------------------------
// Scores and norms
// ---------------------------------------------------------------------------

/// Safety gradient score per selected layer:
/// `S = (1/N) * sum_i g_i·v / (||v|| + eps)`.
///
/// Layers are matched by tag; the range filters by [`layer_index`].
///
/// # Errors
///
/// The range selects nothing, a selected layer is missing from the
/// direction set, or gradient and direction lengths disagree for a layer.
pub fn safety_gradient_score(
    grads: &GradientRecord,
    dir: &SafetyDirection,
    range: LayerRange,
) -> Result<Vec<(String, f64)>, CoreError> {
    let n = grads.sample_count() as f64;
    let mut scores = Vec::new();
    for (pos, (tag, g)) in grads.layers().iter().enumerate() {
        if !range.contains(layer_index(tag, pos)) {
            continue;
        }
        let v = dir.get(tag).ok_or_else(|| {
            CoreError::invalid("safety gradient score", format!("no safety direction for layer `{tag}`"))
        })?;
        if g.cols() != v.len() {
            return Err(CoreError::ShapeMismatch {
                name: tag.clone(),
                expected: format!("gradient rows of length {}", v.len()),
                found: format!("length {}", g.cols()),
            });
        }
        let denom = norm(v) + dir.epsilon();
        let total: f64 = (0..g.rows()).map(|i| dot(g.row(i), v)).sum();
        scores.push((tag.clone(), total / n / denom));
    }
    if scores.is_empty() {
        return Err(CoreError::invalid("safety gradient score", "layer range selects no layers"));
    }
    Ok(scores)
}

/// Projection of `g_subject` onto the unit vector of `g_reference`:
/// `g_subject · g_reference / ||g_reference||`.
///
/// # Errors
///
/// Length mismatch or a zero reference.
pub fn projected_gradient(g_subject: &[f64], g_reference: &[f64]) -> Result<f64, CoreError> {
    if g_subject.len() != g_reference.len() {
        return Err(CoreError::invalid(
            "projected gradient",
            format!("length mismatch: {} vs {}", g_subject.len(), g_reference.len()),
        ));
    }
    let r = norm(g_reference);
    if r == 0.0 {
        return Err(CoreError::invalid("projected gradient", "reference gradient is zero"));
    }
    Ok(dot(g_subject, g_reference) / r)
}

/// Per-layer norm of the *mean* gradient (average over samples first, then
/// the Euclidean norm — the same convention the score uses).
///
/// # Errors
///
/// The range selects nothing.
pub fn gradient_norms(grads: &GradientRecord, range: LayerRange) -> Result<Vec<(String, f64)>, CoreError> {
    let n = grads.sample_count() as f64;
    let mut norms = Vec::new();
    for (pos, (tag, g)) in grads.layers().iter().enumerate() {
        if !range.contains(layer_index(tag, pos)) {
            continue;
        }
        let mean: Vec<f64> = (0..g.cols())
            .map(|j| (0..g.rows()).map(|i| g[(i, j)]).sum::<f64>() / n)
            .collect();
        norms.push((tag.clone(), norm(&mean)));
    }
    if norms.is_empty() {
        return Err(CoreError::invalid("gradient norms", "layer range selects no layers"));
    }
    Ok(norms)
}

/// Energy bookkeeping of a merged update against the user update:
/// `retain = ||Proj_{W_U}(W_hat)||_F^2 / ||W_U||_F^2` (which reduces to the
/// squared normalized Frobenius inner product) and
/// `damage = max(0, 1 - retain)`.
///
/// Retain exceeds 1 when the merged update amplifies the user direction;
/// damage clamps at 0 there. Retain depends on `W_hat` only through its
/// inner product with `W_U`.
///
/// # Errors
///
/// Shape mismatch or zero `W_U`.
pub fn energy_metrics(w_hat: &Mat, w_u: &Mat) -> Result<(f64, f64), CoreError> {
    if w_hat.rows() != w_u.rows() || w_hat.cols() != w_u.cols() {
        return Err(CoreError::invalid(
            "energy metrics",
            format!(
                "shape mismatch: {}x{} vs {}x{}",
                w_hat.rows(),
                w_hat.cols(),
                w_u.rows(),
                w_u.cols()
            ),
        ));
    }
    let denom = w_u.frob_dot(w_u);
    if denom == 0.0 {
        return Err(CoreError::invalid("energy metrics", "user update is zero"));
    }
    let c = w_hat.frob_dot(w_u) / denom;
    let retain = c * c;
    Ok((retain, (1.0 - retain).max(0.0)))
}

/// Arithmetic mean of a per-layer metric.
///
/// # Errors
///
/// Empty input.
pub fn layer_average(values: &[f64]) -> Result<f64, CoreError> {
    if values.is_empty() {
        return Err(CoreError::invalid("layer average", "no values"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}
