//! End-to-end tests of the `softmerge` binary: fixture archives go in,
//! merged archives and reports come out, and exit codes follow the
//! 0/1/2 success/IO/validation contract.
//!
//! Numeric fixtures use dyadic entries (small integers over a power of
//! two) so that values survive the archive's `f32` payload encoding
//! exactly and equality checks stay sharp.

use std::path::{Path, PathBuf};
use std::process::Output;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use softmerge_core::archive::TensorArchive;
use softmerge_core::bundle::{
    bundle_to_archive, dense_weights_to_archive, load_dense_weights, AdapterBundle, AdapterPair,
    AdapterRole,
};
use softmerge_core::diagnostics::{GradientRecord, SafetyDirection};
use softmerge_core::Mat;

fn softmerge(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_softmerge"))
        .args(args)
        .output()
        .expect("binary should run")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

/// Entries on the grid `k/8`, `|k| <= 8`: exact in `f32` and closed under
/// the small products and sums the fixtures run through.
fn dyadic_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| f64::from(rng.random_range(-8i32..=8)) / 8.0)
}

fn write_dense(dir: &Path, layers: &[(String, Mat)]) {
    dense_weights_to_archive(layers).unwrap().write_to_dir(dir).unwrap();
}

fn write_bundle(dir: &Path, role: AdapterRole, layers: Vec<(String, AdapterPair)>) {
    let bundle = AdapterBundle::new(role, layers).unwrap();
    bundle_to_archive(&bundle).unwrap().write_to_dir(dir).unwrap();
}

/// Parses the rank table's `layer,nominal,effective,collapsed` rows.
fn parse_rank_csv(text: &str) -> Vec<(String, usize, usize, bool)> {
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("layer,nominal_rank,effective_rank,collapsed"));
    lines
        .map(|line| {
            let parts: Vec<&str> = line.split(',').collect();
            (
                parts[0].to_string(),
                parts[1].parse().unwrap(),
                parts[2].parse().unwrap(),
                parts[3].parse().unwrap(),
            )
        })
        .collect()
}

/// Parses `header\nlabel,v1[,v2...]` CSV into rows of (label, numbers).
fn parse_csv(text: &str) -> Vec<(String, Vec<f64>)> {
    let mut lines = text.lines();
    lines.next().expect("header line");
    lines
        .map(|line| {
            let mut parts = line.split(',');
            let label = parts.next().unwrap().to_string();
            let nums = parts.map(|p| p.parse::<f64>().unwrap()).collect();
            (label, nums)
        })
        .collect()
}

struct MergeFixture {
    base_dir: PathBuf,
    user_dir: PathBuf,
    reinforce_dir: PathBuf,
    base: Vec<(String, Mat)>,
    user: Vec<(String, AdapterPair)>,
    reinforce: Vec<(String, AdapterPair)>,
}

/// Two-layer base/user/reinforce triple with dyadic entries. The user `A`
/// is padded with an identity block so its effective rank is full and the
/// auto policy leaves the basis unrestricted.
fn merge_fixture(root: &Path, seed: u64, nest_reinforce_in_user_span: bool) -> MergeFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d_out, d_in, r) = (10, 12, 3);
    let mut base = Vec::new();
    let mut user = Vec::new();
    let mut reinforce = Vec::new();
    for tag in ["blocks.0", "blocks.1"] {
        base.push((tag.to_string(), dyadic_mat(&mut rng, d_out, d_in)));

        let mut b_u = dyadic_mat(&mut rng, d_out, r);
        let mut a_u = dyadic_mat(&mut rng, r, d_in);
        for i in 0..r {
            // Identity blocks pin full column rank of B and full row rank
            // (hence full effective rank) of A.
            b_u.data_mut()[i * r + i] = 1.0;
            a_u.data_mut()[i * d_in + i] = 1.0;
        }

        let (b_r, a_r) = if nest_reinforce_in_user_span {
            (b_u.matmul(&dyadic_mat(&mut rng, r, r)), dyadic_mat(&mut rng, r, d_in))
        } else {
            (dyadic_mat(&mut rng, d_out, r), dyadic_mat(&mut rng, r, d_in))
        };

        user.push((tag.to_string(), AdapterPair::new(b_u, a_u).unwrap()));
        reinforce.push((tag.to_string(), AdapterPair::new(b_r, a_r).unwrap()));
    }

    let fixture = MergeFixture {
        base_dir: root.join("base"),
        user_dir: root.join("user"),
        reinforce_dir: root.join("reinforce"),
        base,
        user,
        reinforce,
    };
    write_dense(&fixture.base_dir, &fixture.base);
    write_bundle(&fixture.user_dir, AdapterRole::User, fixture.user.clone());
    write_bundle(&fixture.reinforce_dir, AdapterRole::Reinforce, fixture.reinforce.clone());
    fixture
}

fn path_args(fx: &MergeFixture, out: &Path) -> Vec<String> {
    vec![
        "merge".into(),
        "--base".into(),
        fx.base_dir.display().to_string(),
        "--user".into(),
        fx.user_dir.display().to_string(),
        "--reinforce".into(),
        fx.reinforce_dir.display().to_string(),
        "--out".into(),
        out.display().to_string(),
    ]
}

fn run_merge(fx: &MergeFixture, out: &Path, extra: &[&str]) -> Output {
    let mut args = path_args(fx, out);
    args.extend(extra.iter().map(|s| s.to_string()));
    let arg_refs: Vec<&str> = args.iter().map(String::as_str).collect();
    softmerge(&arg_refs)
}

#[test]
fn merge_with_alpha_zero_averages_both_updates_verbatim() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = merge_fixture(tmp.path(), 1, false);
    let out_dir = tmp.path().join("merged");

    let run = run_merge(&fx, &out_dir, &["--alpha", "0", "--deterministic"]);
    assert_eq!(exit_code(&run), 0, "stderr: {}", stderr_of(&run));

    // With no orthogonalization the merge is exactly the half-weighted sum,
    // layer by layer, in the engine's composition order.
    let expected: Vec<(String, Mat)> = fx
        .base
        .iter()
        .zip(&fx.user)
        .zip(&fx.reinforce)
        .map(|(((tag, base), (_, u)), (_, r))| {
            let mut w = base.clone();
            w.axpy(0.5, &u.dense_update());
            w.axpy(0.5, &r.dense_update());
            (tag.clone(), w)
        })
        .collect();
    let expected_dir = tmp.path().join("expected");
    write_dense(&expected_dir, &expected);

    // The fixtures are dyadic, so the expected values are exact in f32 and
    // the two archives must agree byte for byte.
    for file in ["weights-0.bin", "manifest.json"] {
        let got = std::fs::read(out_dir.join(file)).unwrap();
        let want = std::fs::read(expected_dir.join(file)).unwrap();
        assert_eq!(got, want, "archive file {file} differs");
    }
}

#[test]
fn merge_with_alpha_one_cancels_a_span_nested_reinforcement() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = merge_fixture(tmp.path(), 2, true);
    let out_dir = tmp.path().join("merged");

    let run = run_merge(&fx, &out_dir, &["--alpha", "1", "--deterministic"]);
    assert_eq!(exit_code(&run), 0, "stderr: {}", stderr_of(&run));

    let merged = load_dense_weights(&TensorArchive::read_from_dir(&out_dir).unwrap()).unwrap();
    for (((tag, base), (_, u)), (tag_m, got)) in fx.base.iter().zip(&fx.user).zip(&merged) {
        assert_eq!(tag, tag_m);
        let mut want = base.clone();
        want.axpy(0.5, &u.dense_update());
        // The reinforcement lives inside span(user B), so full-strength
        // orthogonalization removes it entirely.
        assert!(
            got.sub(&want).frob_norm() <= 1e-8,
            "layer {tag}: residual {}",
            got.sub(&want).frob_norm()
        );
    }
}

#[test]
fn merge_report_records_the_documented_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = merge_fixture(tmp.path(), 3, false);
    let out_dir = tmp.path().join("merged");

    let run = run_merge(&fx, &out_dir, &[]);
    assert_eq!(exit_code(&run), 0, "stderr: {}", stderr_of(&run));

    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["alpha"], Value::from(0.1));
    assert_eq!(report["tau"], Value::from(1e-6));
    assert_eq!(report["averaging_weight"], Value::from(0.5));
    assert_eq!(report["rank_collapse_policy"], Value::from("auto"));
    assert!(report["generated_at"].is_u64(), "timestamp expected without --deterministic");
    let layers = report["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    assert_eq!(layers[0]["layer"], Value::from("blocks.0"));
    assert_eq!(layers[0]["nominal_rank"], Value::from(3));
    assert_eq!(layers[0]["effective_rank"], Value::from(3));
    assert_eq!(layers[0]["restriction_applied"], Value::from(false));

    // The deterministic flag drops the timestamp and nothing else.
    let out2 = tmp.path().join("merged2");
    let run2 = run_merge(&fx, &out2, &["--deterministic"]);
    assert_eq!(exit_code(&run2), 0);
    let mut report2: Value =
        serde_json::from_str(&std::fs::read_to_string(out2.join("report.json")).unwrap()).unwrap();
    assert!(report2.get("generated_at").is_none());
    let mut stripped = report.clone();
    stripped.as_object_mut().unwrap().remove("generated_at");
    report2.as_object_mut().unwrap().remove("generated_at");
    assert_eq!(stripped, report2);
}

#[test]
fn merge_runs_are_byte_identical_under_the_deterministic_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = merge_fixture(tmp.path(), 4, false);
    let out1 = tmp.path().join("m1");
    let out2 = tmp.path().join("m2");
    assert_eq!(exit_code(&run_merge(&fx, &out1, &["--deterministic"])), 0);
    assert_eq!(exit_code(&run_merge(&fx, &out2, &["--deterministic"])), 0);
    for file in ["manifest.json", "weights-0.bin", "report.json"] {
        let a = std::fs::read(out1.join(file)).unwrap();
        let b = std::fs::read(out2.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn merge_validates_flags_before_touching_inputs_or_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("never-created");

    // Out-of-range alpha must win over the missing input directories:
    // flags are checked before any file is read or written.
    let run = softmerge(&[
        "merge",
        "--base",
        "/nonexistent/base",
        "--user",
        "/nonexistent/user",
        "--reinforce",
        "/nonexistent/reinforce",
        "--out",
        out_dir.to_str().unwrap(),
        "--alpha",
        "1.5",
    ]);
    assert_eq!(exit_code(&run), 2, "stderr: {}", stderr_of(&run));
    assert!(!out_dir.exists(), "validation failure must not create the output directory");

    // Same command with a legal alpha is an IO failure instead.
    let run = softmerge(&[
        "merge",
        "--base",
        "/nonexistent/base",
        "--user",
        "/nonexistent/user",
        "--reinforce",
        "/nonexistent/reinforce",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&run), 1);
    assert!(stderr_of(&run).contains("io error"));
    assert!(!out_dir.exists());

    // Unknown policy values are rejected by flag parsing.
    let run = softmerge(&[
        "merge",
        "--base",
        "b",
        "--user",
        "u",
        "--reinforce",
        "r",
        "--out",
        "o",
        "--policy",
        "sometimes",
    ]);
    assert_eq!(exit_code(&run), 2);
}

/// Writes a gradient archive and a safety archive over the same two layers.
/// Each gradient is a single sample; directions are dyadic vectors.
fn score_fixture(root: &Path, grads: &[(&str, Vec<f64>)], dirs: &[(&str, Vec<f64>)], epsilon: f64) {
    let record = GradientRecord::new(
        grads
            .iter()
            .map(|(tag, g)| (tag.to_string(), Mat::from_flat(1, g.len(), g.clone())))
            .collect(),
    )
    .unwrap();
    record.to_archive().unwrap().write_to_dir(&root.join("grads")).unwrap();

    let safety = SafetyDirection::new(
        dirs.iter().map(|(tag, v)| (tag.to_string(), v.clone())).collect(),
        epsilon,
    )
    .unwrap();
    safety.to_archive().unwrap().write_to_dir(&root.join("safety")).unwrap();
}

#[test]
fn score_of_a_self_aligned_fixture_matches_the_closed_form() {
    let tmp = tempfile::tempdir().unwrap();
    let v0 = vec![0.5, -0.25, 1.0, 0.0];
    let v1 = vec![1.0, 1.0, 0.0, -0.5];
    score_fixture(
        tmp.path(),
        &[("layers.0", v0.clone()), ("layers.1", v1.clone())],
        &[("layers.0", v0.clone()), ("layers.1", v1.clone())],
        1e-8,
    );

    let run = softmerge(&[
        "score",
        "--grads",
        tmp.path().join("grads").to_str().unwrap(),
        "--safety",
        tmp.path().join("safety").to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert_eq!(exit_code(&run), 0, "stderr: {}", stderr_of(&run));

    let rows = parse_csv(&stdout_of(&run));
    assert_eq!(rows.len(), 2);
    for (row, v) in rows.iter().zip([&v0, &v1]) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let want = norm * norm / (norm + 1e-8);
        assert!(
            (row.1[0] - want).abs() <= 1e-12 * want,
            "layer {}: got {}, want {want}",
            row.0,
            row.1[0]
        );
    }
}

#[test]
fn score_of_an_orthogonal_fixture_is_exactly_zero() {
    let tmp = tempfile::tempdir().unwrap();
    score_fixture(
        tmp.path(),
        &[("layers.0", vec![0.0, 0.0, 0.75, -1.0]), ("layers.1", vec![0.0, 0.0, 0.5, 0.25])],
        &[("layers.0", vec![1.0, 0.5, 0.0, 0.0]), ("layers.1", vec![-0.25, 1.0, 0.0, 0.0])],
        1e-8,
    );

    let run = softmerge(&[
        "score",
        "--grads",
        tmp.path().join("grads").to_str().unwrap(),
        "--safety",
        tmp.path().join("safety").to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert_eq!(exit_code(&run), 0);
    for (tag, nums) in parse_csv(&stdout_of(&run)) {
        assert_eq!(nums[0], 0.0, "layer {tag} should score exactly zero");
    }
}

#[test]
fn score_json_reports_epsilon_override_and_layer_selection() {
    let tmp = tempfile::tempdir().unwrap();
    let v = vec![1.0, 0.0, 0.0];
    score_fixture(
        tmp.path(),
        &[("layers.0", v.clone()), ("layers.1", v.clone())],
        &[("layers.0", v.clone()), ("layers.1", v.clone())],
        1e-8,
    );
    let grads = tmp.path().join("grads");
    let safety = tmp.path().join("safety");

    // --epsilon overrides the value stored in the archive: ||v|| = 1, so
    // the score becomes 1 / (1 + 0.5) = 2/3.
    let run = softmerge(&[
        "score",
        "--grads",
        grads.to_str().unwrap(),
        "--safety",
        safety.to_str().unwrap(),
        "--epsilon",
        "0.5",
    ]);
    assert_eq!(exit_code(&run), 0);
    let report: Value = serde_json::from_str(&stdout_of(&run)).unwrap();
    assert_eq!(report["epsilon"], Value::from(0.5));
    let got = report["layers"][0]["score"].as_f64().unwrap();
    assert!((got - 1.0 / 1.5).abs() <= 1e-12);
    assert!((report["mean_score"].as_f64().unwrap() - 1.0 / 1.5).abs() <= 1e-12);

    // A numeric range keeps only the layers whose trailing index falls in
    // the interval.
    let run = softmerge(&[
        "score",
        "--grads",
        grads.to_str().unwrap(),
        "--safety",
        safety.to_str().unwrap(),
        "--layers",
        "1",
        "--format",
        "csv",
    ]);
    assert_eq!(exit_code(&run), 0);
    let rows = parse_csv(&stdout_of(&run));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].0, "layers.1");

    // An empty selection is a validation error.
    let run = softmerge(&[
        "score",
        "--grads",
        grads.to_str().unwrap(),
        "--safety",
        safety.to_str().unwrap(),
        "--layers",
        "7-9",
    ]);
    assert_eq!(exit_code(&run), 2);
}

#[test]
fn score_shape_mismatch_names_the_offending_layer() {
    let tmp = tempfile::tempdir().unwrap();
    score_fixture(
        tmp.path(),
        &[("layers.0", vec![1.0, 0.5, 0.25, 0.0])],
        &[("layers.0", vec![1.0, 0.5, 0.25])],
        1e-8,
    );

    let run = softmerge(&[
        "score",
        "--grads",
        tmp.path().join("grads").to_str().unwrap(),
        "--safety",
        tmp.path().join("safety").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&run), 2);
    assert!(
        stderr_of(&run).contains("layers.0"),
        "mismatch message should name the layer: {}",
        stderr_of(&run)
    );
}

#[test]
fn energy_identity_and_orthogonal_fixtures_hit_the_exact_corners() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = dyadic_mat(&mut rng, 6, 7);
    // An orthogonal counterpart living on disjoint support.
    let mut other = Mat::zeros(6, 7);
    other.data_mut()[0] = 1.0;
    let mut w_masked = w.clone();
    w_masked.data_mut()[0] = 0.0;

    let same = tmp.path().join("same");
    let user = tmp.path().join("user");
    let orth = tmp.path().join("orth");
    write_dense(&same, &[("L0".to_string(), w_masked.clone())]);
    write_dense(&user, &[("L0".to_string(), w_masked.clone())]);
    write_dense(&orth, &[("L0".to_string(), other)]);

    // Merged == user: every unit of energy is retained.
    let run = softmerge(&[
        "energy",
        "--merged",
        same.to_str().unwrap(),
        "--user",
        user.to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert_eq!(exit_code(&run), 0, "stderr: {}", stderr_of(&run));
    let rows = parse_csv(&stdout_of(&run));
    assert_eq!(rows[0].1, vec![1.0, 0.0]);

    // Merged orthogonal to user: nothing is retained.
    let run = softmerge(&[
        "energy",
        "--merged",
        orth.to_str().unwrap(),
        "--user",
        user.to_str().unwrap(),
        "--format",
        "csv",
    ]);
    assert_eq!(exit_code(&run), 0);
    let rows = parse_csv(&stdout_of(&run));
    assert_eq!(rows[0].1, vec![0.0, 1.0]);
}

#[test]
fn energy_of_random_archives_matches_a_definitional_recomputation() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let layers = ["layers.0", "layers.1", "layers.2"];
    let merged: Vec<(String, Mat)> = layers
        .iter()
        .map(|t| (t.to_string(), Mat::from_fn(5, 9, |_, _| rng.random::<f64>() - 0.5)))
        .collect();
    let user: Vec<(String, AdapterPair)> = layers
        .iter()
        .map(|t| {
            let b = Mat::from_fn(5, 2, |_, _| rng.random::<f64>() - 0.5);
            let a = Mat::from_fn(2, 9, |_, _| rng.random::<f64>() - 0.5);
            (t.to_string(), AdapterPair::new(b, a).unwrap())
        })
        .collect();
    let merged_dir = tmp.path().join("merged");
    let user_dir = tmp.path().join("user");
    write_dense(&merged_dir, &merged);
    // The user side goes in factored, exercising the densify-on-load path.
    write_bundle(&user_dir, AdapterRole::User, user);

    let run = softmerge(&[
        "energy",
        "--merged",
        merged_dir.to_str().unwrap(),
        "--user",
        user_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&run), 0, "stderr: {}", stderr_of(&run));
    let report: Value = serde_json::from_str(&stdout_of(&run)).unwrap();

    // Oracle: re-read both archives and recompute retain/damage from the
    // definition (squared normalized inner product, clamped complement).
    let merged_back =
        load_dense_weights(&TensorArchive::read_from_dir(&merged_dir).unwrap()).unwrap();
    let user_back = softmerge_core::bundle::load_adapter_bundle(
        &TensorArchive::read_from_dir(&user_dir).unwrap(),
        AdapterRole::User,
    )
    .unwrap();
    let mut retains = Vec::new();
    for (i, (tag, w_hat)) in merged_back.iter().enumerate() {
        let w_u = user_back.get(tag).unwrap().dense_update();
        let c = w_hat.frob_dot(&w_u) / w_u.frob_dot(&w_u);
        let retain = c * c;
        let damage = (1.0 - retain).max(0.0);
        let got_retain = report["layers"][i]["retain"].as_f64().unwrap();
        let got_damage = report["layers"][i]["damage"].as_f64().unwrap();
        assert!((got_retain - retain).abs() <= 1e-10, "layer {tag} retain");
        assert!((got_damage - damage).abs() <= 1e-10, "layer {tag} damage");
        retains.push(retain);
    }
    let mean = retains.iter().sum::<f64>() / retains.len() as f64;
    assert!((report["global_retain"].as_f64().unwrap() - mean).abs() <= 1e-10);
}

#[test]
fn energy_rejects_mismatched_layer_sets() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = dyadic_mat(&mut rng, 4, 4);
    let merged_dir = tmp.path().join("merged");
    let user_dir = tmp.path().join("user");
    write_dense(&merged_dir, &[("L0".to_string(), w.clone()), ("L1".to_string(), w.clone())]);
    write_dense(&user_dir, &[("L0".to_string(), w)]);

    let run = softmerge(&[
        "energy",
        "--merged",
        merged_dir.to_str().unwrap(),
        "--user",
        user_dir.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&run), 2);
    assert!(stderr_of(&run).contains("layer sets differ"));
}

/// Rank fixtures: an adapter archive with one layer per case.
#[test]
fn rank_separates_full_effective_and_collapsed_adapters() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (d_out, d_in, r) = (8, 10, 4);

    // Full rank: A carries an identity block.
    let mut a_full = dyadic_mat(&mut rng, r, d_in);
    for i in 0..r {
        a_full.data_mut()[i * d_in + i] = 2.0;
    }
    // Collapsed: the last row repeats the first, so rank is at most 3 (and
    // exactly 3 because the first three rows are unit vectors).
    let a_dup = Mat::from_fn(r, d_in, |i, j| {
        let row = if i == 3 { 0 } else { i };
        f64::from(u8::from(j == row))
    });

    let b = dyadic_mat(&mut rng, d_out, r);
    let dir = tmp.path().join("adapter");
    write_bundle(
        &dir,
        AdapterRole::User,
        vec![
            ("full".to_string(), AdapterPair::new(b.clone(), a_full).unwrap()),
            ("dup".to_string(), AdapterPair::new(b, a_dup).unwrap()),
        ],
    );

    let run = softmerge(&["rank", "--adapter", dir.to_str().unwrap(), "--format", "csv"]);
    assert_eq!(exit_code(&run), 0, "stderr: {}", stderr_of(&run));
    let rows = parse_rank_csv(&stdout_of(&run));
    // Rows come back sorted by tag: "dup" before "full".
    assert_eq!(rows[0], ("dup".to_string(), 4, 3, true));
    assert_eq!(rows[1], ("full".to_string(), 4, 4, false));
}

#[test]
fn rank_threshold_boundary_is_exclusive_in_f32_exact_arithmetic() {
    // Spectrum (1, 2^-10): both singular values are exact in f32, so the
    // eigenvalues of A·Aᵀ are exactly (1, 2^-20) after the archive round
    // trip and the threshold comparison is sharp.
    let tmp = tempfile::tempdir().unwrap();
    let sigma2 = (2.0f64).powi(-10);
    let a = Mat::from_fn(2, 8, |i, j| {
        if i == 0 && j == 0 {
            1.0
        } else if i == 1 && j == 1 {
            sigma2
        } else {
            0.0
        }
    });
    let b = Mat::from_fn(6, 2, |i, j| f64::from(u8::from(i == j)));
    let dir = tmp.path().join("adapter");
    write_bundle(&dir, AdapterRole::User, vec![("L0".to_string(), AdapterPair::new(b, a).unwrap())]);

    // tau exactly 2^-20: the small eigenvalue ties the threshold and the
    // strict inequality excludes it.
    let run = softmerge(&[
        "rank",
        "--adapter",
        dir.to_str().unwrap(),
        "--tau",
        "9.5367431640625e-7",
        "--format",
        "csv",
    ]);
    assert_eq!(exit_code(&run), 0, "stderr: {}", stderr_of(&run));
    let rows = parse_rank_csv(&stdout_of(&run));
    assert_eq!(rows[0], ("L0".to_string(), 2, 1, true), "a boundary tie must be excluded");

    // Default tau = 1e-6 sits just above 2^-20, so the small direction is
    // excluded there too.
    let run = softmerge(&["rank", "--adapter", dir.to_str().unwrap(), "--format", "csv"]);
    assert_eq!(exit_code(&run), 0);
    let rows = parse_rank_csv(&stdout_of(&run));
    assert_eq!(rows[0], ("L0".to_string(), 2, 1, true));

    // Nudging tau below the ratio brings the direction back.
    let run = softmerge(&[
        "rank",
        "--adapter",
        dir.to_str().unwrap(),
        "--tau",
        "9e-7",
        "--format",
        "csv",
    ]);
    assert_eq!(exit_code(&run), 0);
    let rows = parse_rank_csv(&stdout_of(&run));
    assert_eq!(rows[0], ("L0".to_string(), 2, 2, false));
}

#[test]
fn simulate_emits_a_summary_where_the_defense_holds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sim.toml");
    std::fs::write(&cfg, "seed = 11\nsteps = 400\n").unwrap();
    let out = tmp.path().join("out");

    let run = softmerge(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--deterministic",
    ]);
    assert_eq!(exit_code(&run), 0, "stderr: {}", stderr_of(&run));
    assert!(stdout_of(&run).contains("refusal loss"));

    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary.get("generated_at").is_none());
    let defended = summary["defended"]["final_losses"]["refuse"].as_f64().unwrap();
    let undefended = summary["no_defense"]["final_losses"]["refuse"].as_f64().unwrap();
    assert!(
        defended <= undefended,
        "defense should not lose refusal ground: {defended} vs {undefended}"
    );

    // The emitted gradient archives feed straight back into `score`: after
    // the buffer stage has converged, harmful descent directions shrink to
    // a few percent of their pre-convergence alignment.
    let score_mean = |grads: &str| -> f64 {
        let run = softmerge(&[
            "score",
            "--grads",
            out.join(grads).to_str().unwrap(),
            "--safety",
            out.join("safety").to_str().unwrap(),
        ]);
        assert_eq!(exit_code(&run), 0, "stderr: {}", stderr_of(&run));
        let report: Value = serde_json::from_str(&stdout_of(&run)).unwrap();
        report["mean_score"].as_f64().unwrap()
    };
    let pre = score_mean("gradients_pre");
    let post = score_mean("gradients_post");
    assert!(pre < 0.0, "pre-convergence harmful descent opposes the safety direction: {pre}");
    assert!(post.abs() <= 0.05 * pre.abs(), "saturation: {post} vs {pre}");
}

#[test]
fn simulate_accepts_a_fully_benign_mixture_and_a_seed_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sim.json");
    std::fs::write(&cfg, "{\"harmful_ratio\": 0.0, \"steps\": 300}\n").unwrap();
    let out = tmp.path().join("out");

    let run = softmerge(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "99",
        "--deterministic",
    ]);
    assert_eq!(exit_code(&run), 0, "stderr: {}", stderr_of(&run));
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["defended"]["config"]["seed"], Value::from(99));
    assert_eq!(summary["defended"]["config"]["harmful_ratio"], Value::from(0.0));
}

#[test]
fn simulate_maps_config_problems_to_the_right_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");

    // Missing file: IO.
    let run = softmerge(&[
        "simulate",
        "--config",
        tmp.path().join("absent.toml").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&run), 1);

    // Unknown field: validation.
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "sneed = 11\n").unwrap();
    let run = softmerge(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&run), 2);

    // Unsupported extension: validation.
    let cfg = tmp.path().join("cfg.yaml");
    std::fs::write(&cfg, "seed: 11\n").unwrap();
    let run = softmerge(&[
        "simulate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&run), 2);
}

#[test]
fn corrupted_blob_bytes_are_rejected_with_a_validation_exit() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dir = tmp.path().join("adapter");
    write_bundle(
        &dir,
        AdapterRole::User,
        vec![(
            "L0".to_string(),
            AdapterPair::new(dyadic_mat(&mut rng, 4, 2), dyadic_mat(&mut rng, 2, 5)).unwrap(),
        )],
    );

    // Flip one payload byte; the stored checksum must catch it.
    let blob_path = dir.join("weights-0.bin");
    let mut blob = std::fs::read(&blob_path).unwrap();
    blob[3] ^= 0x40;
    std::fs::write(&blob_path, blob).unwrap();

    let run = softmerge(&["rank", "--adapter", dir.to_str().unwrap()]);
    assert_eq!(exit_code(&run), 2, "stderr: {}", stderr_of(&run));
    assert!(stderr_of(&run).contains("crc32"), "stderr: {}", stderr_of(&run));
}

#[test]
fn a_consumer_that_stops_reading_does_not_crash_the_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let dir = tmp.path().join("adapter");
    let layers = (0..64)
        .map(|i| {
            let pair =
                AdapterPair::new(dyadic_mat(&mut rng, 8, 4), dyadic_mat(&mut rng, 4, 10)).unwrap();
            (format!("blocks.{i}"), pair)
        })
        .collect();
    write_bundle(&dir, AdapterRole::User, layers);

    let mut child = std::process::Command::new(env!("CARGO_BIN_EXE_softmerge"))
        .args(["rank", "--adapter", dir.to_str().unwrap(), "--format", "csv"])
        .stdout(std::process::Stdio::piped())
        .stderr(std::process::Stdio::piped())
        .spawn()
        .expect("binary should start");
    // Close the read end before the table lands, as `softmerge ... | head`
    // does: the vanished consumer must end the run quietly, not crash it.
    drop(child.stdout.take());
    let out = child.wait_with_output().expect("binary should exit");
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(!stderr_of(&out).contains("panic"), "stderr: {}", stderr_of(&out));
}
