//! Command-line front end for the adapter-merge toolkit.
//!
//! Five subcommands cover the batch workflows: `merge` applies the
//! soft-orthogonal merge to a base/user/reinforce archive triple and writes
//! the merged weights plus a JSON report; `score` and `energy` compute the
//! per-layer safety and energy diagnostics from tensor archives; `rank`
//! inspects effective ranks; `simulate` runs the analytic training sandbox
//! end to end.
//!
//! Exit codes are a stable scripting contract: 0 on success, 1 for
//! filesystem trouble, 2 for invalid flags or malformed data. A consumer
//! that stops reading mid-stream (`softmerge ... | head`) ends the run
//! quietly with status 0 rather than crashing it. Given
//! identical inputs and flags every subcommand produces byte-identical
//! output, except for the `generated_at` timestamp in written reports,
//! which `--deterministic` suppresses.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::{self, ExitCode};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use softmerge_core::archive::TensorArchive;
use softmerge_core::bundle::{
    dense_weights_to_archive, load_adapter_bundle, load_dense_weights, AdapterRole, ROLE_KEY,
    W_SUFFIX,
};
use softmerge_core::diagnostics::{
    energy_metrics, layer_average, safety_gradient_score, GradientRecord, LayerRange,
    SafetyDirection,
};
use softmerge_core::error::ErrorKind;
use softmerge_core::merge::{merge_bundles, MergeConfig, MergeReport, RankCollapsePolicy};
use softmerge_core::subspace::effective_subspace;
use softmerge_core::{CoreError, Mat};
use softmerge_sim::{run_and_emit, SimConfig, SimError};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.kind() {
                ErrorKind::Io => ExitCode::from(1),
                ErrorKind::Validation => ExitCode::from(2),
            }
        }
    }
}

/// Adapter-merge toolkit: soft-orthogonal merging, safety diagnostics, and
/// an analytic fine-tuning sandbox.
#[derive(Debug, Parser)]
#[command(name = "softmerge", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Merge base weights, a user adapter, and a reinforcement adapter.
    Merge(MergeArgs),
    /// Score recorded gradients against a safety direction.
    Score(ScoreArgs),
    /// Energy retained/damaged along the user update after a merge.
    Energy(EnergyArgs),
    /// Nominal vs effective rank of an adapter's input factors.
    Rank(RankArgs),
    /// Run the analytic fine-tuning sandbox and emit its artifacts.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct MergeArgs {
    /// Archive directory holding the base dense weights (`<layer>.W`).
    #[arg(long, value_name = "DIR")]
    base: PathBuf,
    /// Archive directory holding the user adapter (role `user`).
    #[arg(long, value_name = "DIR")]
    user: PathBuf,
    /// Archive directory holding the reinforcement adapter (role `reinforce`).
    #[arg(long, value_name = "DIR")]
    reinforce: PathBuf,
    /// Output directory for the merged archive and `report.json`.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Orthogonalization strength, in [0, 1].
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    /// Relative eigenvalue threshold for the effective subspace, in (0, 1).
    #[arg(long, default_value_t = 1e-6)]
    tau: f64,
    /// When to restrict the user basis: auto, always, or never.
    #[arg(long, default_value = "auto")]
    policy: RankCollapsePolicy,
    /// Weight applied to each update in the final sum, in (0, 1].
    #[arg(long, default_value_t = 0.5)]
    averaging_weight: f64,
    /// Omit the `generated_at` timestamp from `report.json`.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    /// Archive directory holding per-sample gradients (`<layer>.G`).
    #[arg(long, value_name = "DIR")]
    grads: PathBuf,
    /// Archive directory holding the safety direction (vector or factored).
    #[arg(long, value_name = "DIR")]
    safety: PathBuf,
    /// Layer selection: `all`, `N`, `N-M`, `N-`, or `-M`.
    #[arg(long, value_name = "RANGE", default_value = "all")]
    layers: String,
    /// Override the normalization floor stored with the safety direction.
    #[arg(long, value_name = "F")]
    epsilon: Option<f64>,
    /// Report format written to stdout.
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    format: ReportFormat,
}

#[derive(Debug, Args)]
struct EnergyArgs {
    /// Archive directory holding the merged update per layer.
    #[arg(long, value_name = "DIR")]
    merged: PathBuf,
    /// Archive directory holding the user update (dense or factored).
    #[arg(long, value_name = "DIR")]
    user: PathBuf,
    /// Report format written to stdout.
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    format: ReportFormat,
}

#[derive(Debug, Args)]
struct RankArgs {
    /// Archive directory holding a factored adapter (`<layer>.B` / `<layer>.A`).
    #[arg(long, value_name = "DIR")]
    adapter: PathBuf,
    /// Relative eigenvalue threshold, in (0, 1).
    #[arg(long, default_value_t = 1e-6)]
    tau: f64,
    /// Report format written to stdout.
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    format: ReportFormat,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Sandbox configuration file (`.toml` or `.json`).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Output directory for `summary.json` and the emitted archives.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Override the seed from the configuration file.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Omit the `generated_at` timestamp from `summary.json`.
    #[arg(long)]
    deterministic: bool,
}

/// Output format for the diagnostic subcommands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    /// Pretty-printed JSON object.
    Json,
    /// Comma-separated rows with a header line.
    Csv,
}

/// Error from any subcommand, tagged with the exit-code class.
#[derive(Debug)]
enum CliError {
    Core(CoreError),
    Sim(SimError),
}

impl CliError {
    fn kind(&self) -> ErrorKind {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Sim(e) => e.kind(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::Sim(e) => e.fmt(f),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        CliError::Sim(e)
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Merge(args) => cmd_merge(args),
        Command::Score(args) => cmd_score(args),
        Command::Energy(args) => cmd_energy(args),
        Command::Rank(args) => cmd_rank(args),
        Command::Simulate(args) => cmd_simulate(args),
    }
}

/// `report.json` payload: the merge report plus an optional wall-clock stamp.
#[derive(Debug, Serialize)]
struct MergeReportFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at: Option<u64>,
    #[serde(flatten)]
    report: MergeReport,
}

fn cmd_merge(args: MergeArgs) -> Result<(), CliError> {
    let cfg = MergeConfig {
        alpha: args.alpha,
        tau: args.tau,
        averaging_weight: args.averaging_weight,
        rank_collapse_policy: args.policy,
    };
    // All flag validation happens before anything touches the output
    // directory.
    cfg.validate()?;

    let base = load_dense_weights(&TensorArchive::read_from_dir(&args.base)?)?;
    let user = load_adapter_bundle(&TensorArchive::read_from_dir(&args.user)?, AdapterRole::User)?;
    let reinforce = load_adapter_bundle(
        &TensorArchive::read_from_dir(&args.reinforce)?,
        AdapterRole::Reinforce,
    )?;

    let (merged, report) = merge_bundles(&base, &user, &reinforce, &cfg)?;

    dense_weights_to_archive(&merged)?.write_to_dir(&args.out)?;
    let file = MergeReportFile {
        generated_at: if args.deterministic { None } else { Some(unix_now()) },
        report,
    };
    write_json(&args.out.join("report.json"), &file)?;
    print_stdout(&format!("merged {} layers -> {}\n", merged.len(), args.out.display()));
    Ok(())
}

#[derive(Debug, Serialize)]
struct ScoreRow {
    layer: String,
    score: f64,
}

#[derive(Debug, Serialize)]
struct ScoreReport {
    epsilon: f64,
    mean_score: f64,
    layers: Vec<ScoreRow>,
}

fn cmd_score(args: ScoreArgs) -> Result<(), CliError> {
    let range = LayerRange::parse(&args.layers)?;
    let grads = GradientRecord::from_archive(&TensorArchive::read_from_dir(&args.grads)?)?;
    let safety =
        SafetyDirection::from_archive(&TensorArchive::read_from_dir(&args.safety)?, args.epsilon)?;
    let scores = safety_gradient_score(&grads, &safety, range)?;
    let mean = layer_average(&scores.iter().map(|&(_, s)| s).collect::<Vec<_>>())?;

    match args.format {
        ReportFormat::Json => {
            let report = ScoreReport {
                epsilon: safety.epsilon(),
                mean_score: mean,
                layers: scores
                    .into_iter()
                    .map(|(layer, score)| ScoreRow { layer, score })
                    .collect(),
            };
            print_json(&report)
        }
        ReportFormat::Csv => {
            let mut out = String::from("layer,score\n");
            for (layer, score) in &scores {
                out.push_str(&format!("{layer},{score}\n"));
            }
            print_stdout(&out);
            Ok(())
        }
    }
}

#[derive(Debug, Serialize)]
struct EnergyRow {
    layer: String,
    retain: f64,
    damage: f64,
}

#[derive(Debug, Serialize)]
struct EnergyReport {
    global_retain: f64,
    global_damage: f64,
    layers: Vec<EnergyRow>,
}

fn cmd_energy(args: EnergyArgs) -> Result<(), CliError> {
    let merged = load_update_layers(&args.merged)?;
    let user = load_update_layers(&args.user)?;

    let merged_tags: BTreeSet<&str> = merged.iter().map(|(t, _)| t.as_str()).collect();
    let user_tags: BTreeSet<&str> = user.iter().map(|(t, _)| t.as_str()).collect();
    if merged_tags != user_tags {
        return Err(CoreError::invalid(
            "energy",
            format!("layer sets differ — merged: {merged_tags:?}; user: {user_tags:?}"),
        )
        .into());
    }

    let mut rows = Vec::with_capacity(merged.len());
    for (tag, w_hat) in &merged {
        let w_u = &user.iter().find(|(t, _)| t == tag).expect("tag sets match").1;
        let (retain, damage) = energy_metrics(w_hat, w_u).map_err(|e| match e {
            CoreError::Invalid { reason, .. } => {
                CoreError::invalid(format!("energy for layer `{tag}`"), reason)
            }
            other => other,
        })?;
        rows.push(EnergyRow { layer: tag.clone(), retain, damage });
    }

    let global_retain = layer_average(&rows.iter().map(|r| r.retain).collect::<Vec<_>>())?;
    let global_damage = layer_average(&rows.iter().map(|r| r.damage).collect::<Vec<_>>())?;

    match args.format {
        ReportFormat::Json => {
            print_json(&EnergyReport { global_retain, global_damage, layers: rows })
        }
        ReportFormat::Csv => {
            let mut out = String::from("layer,retain,damage\n");
            for row in &rows {
                out.push_str(&format!("{},{},{}\n", row.layer, row.retain, row.damage));
            }
            print_stdout(&out);
            Ok(())
        }
    }
}

#[derive(Debug, Serialize)]
struct RankRow {
    layer: String,
    nominal_rank: usize,
    effective_rank: usize,
    collapsed: bool,
}

#[derive(Debug, Serialize)]
struct RankReport {
    tau: f64,
    layers: Vec<RankRow>,
}

fn cmd_rank(args: RankArgs) -> Result<(), CliError> {
    let archive = TensorArchive::read_from_dir(&args.adapter)?;
    let bundle = load_adapter_bundle(&archive, declared_role(&archive)?)?;

    let mut rows = Vec::with_capacity(bundle.layers().len());
    for (tag, pair) in bundle.layers() {
        let eff = effective_subspace(pair.a(), args.tau)?;
        rows.push(RankRow {
            layer: tag.clone(),
            nominal_rank: pair.rank(),
            effective_rank: eff.k,
            collapsed: eff.k < pair.rank(),
        });
    }

    match args.format {
        ReportFormat::Json => print_json(&RankReport { tau: args.tau, layers: rows }),
        ReportFormat::Csv => {
            let mut out = String::from("layer,nominal_rank,effective_rank,collapsed\n");
            for row in &rows {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    row.layer, row.nominal_rank, row.effective_rank, row.collapsed
                ));
            }
            print_stdout(&out);
            Ok(())
        }
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut cfg = SimConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let summary = run_and_emit(&cfg, &args.out, args.deterministic)?;
    print_stdout(&format!(
        "refusal loss: defended {:e} vs no-defense {:e}\n",
        summary.defended.final_losses.refuse, summary.no_defense.final_losses.refuse
    ));
    print_stdout(&format!("wrote {}\n", args.out.join("summary.json").display()));
    Ok(())
}

/// Loads per-layer dense matrices from an archive that holds either dense
/// `<layer>.W` tensors or a factored adapter (densified on load).
fn load_update_layers(dir: &Path) -> Result<Vec<(String, Mat)>, CliError> {
    let archive = TensorArchive::read_from_dir(dir)?;
    if archive.names().any(|n| n.ends_with(W_SUFFIX)) {
        Ok(load_dense_weights(&archive)?)
    } else {
        let bundle = load_adapter_bundle(&archive, declared_role(&archive)?)?;
        Ok(bundle.dense_updates())
    }
}

/// The role an archive declares in its metadata; `user` when silent.
fn declared_role(archive: &TensorArchive) -> Result<AdapterRole, CliError> {
    match archive.metadata.get(ROLE_KEY) {
        Some(s) => AdapterRole::parse(s).ok_or_else(|| {
            CoreError::invalid("adapter archive", format!("unknown role `{s}`")).into()
        }),
        None => Ok(AdapterRole::User),
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Writes to stdout without panicking when the consumer goes away.
///
/// `softmerge ... | head` closes the read end of the pipe as soon as it has
/// what it wants; the resulting broken-pipe write error means "no one is
/// listening any more" and ends the process quietly. Any other write failure
/// (a full disk behind a redirect, say) is a real io error.
fn print_stdout(text: &str) {
    let mut out = io::stdout().lock();
    let outcome = out.write_all(text.as_bytes()).and_then(|()| out.flush());
    if let Err(e) = outcome {
        drop(out);
        if e.kind() == io::ErrorKind::BrokenPipe {
            process::exit(0);
        }
        eprintln!("error: cannot write to stdout: {e}");
        process::exit(1);
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CoreError::invalid("report serialization", e.to_string()))?;
    text.push('\n');
    print_stdout(&text);
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CoreError::invalid("report serialization", e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|source| CoreError::Io { path: path.to_path_buf(), source })?;
    Ok(())
}
