mod commands;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "spikegrid",
    version,
    about = "Spatial-cluster grid encoding and 3D CNN spike detection for MEG/EEG"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic dataset
    Synth(SynthArgs),
    /// Resample, filter and ICA-clean recordings
    Preprocess(PreprocessArgs),
    /// Cluster sensor positions into a g x l grid layout
    Cluster(ClusterArgs),
    /// Encode clips into (g, l, t, c) tensor files
    Encode(EncodeArgs),
    /// Train a network and write history and checkpoints
    Train(TrainArgs),
    /// Score a manifest with a checkpoint
    Eval(EvalArgs),
    /// Grad-CAM heatmaps and channel traces per clip
    Explain(ExplainArgs),
    /// Re-run cluster, train and eval over a range of cluster counts
    Sweep(SweepArgs),
    /// Gradient checks and network invariants
    Selftest(SelftestArgs),
    /// Layer shapes and parameter counts of a network
    Inspect(InspectArgs),
}

/// Experiment configuration: a named preset, optionally replaced by a JSON
/// file.
#[derive(Args, Serialize, Clone)]
struct ConfigArgs {
    /// synthetic, meg-like or eeg-like
    #[arg(long, default_value = "synthetic")]
    preset: String,
    /// JSON experiment config; missing fields take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Root seed of the experiment
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct PreprocessArgs {
    /// Recording containers to clean
    #[arg(long, num_args = 1.., conflicts_with = "manifest")]
    input: Vec<PathBuf>,
    /// Clean every clip of a manifest and write a rewritten manifest
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// JSON preprocessing config; defaults to the standard chain
    #[arg(long)]
    config: Option<PathBuf>,
    /// Target rate of the standard chain; defaults to each input's rate
    #[arg(long)]
    target_hz: Option<f64>,
    /// Skip the FastICA step of the standard chain
    #[arg(long)]
    no_ica: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct ClusterArgs {
    /// Sensor array JSON, as written by `synth`
    #[arg(long, required_unless_present = "recording")]
    sensors: Option<PathBuf>,
    /// Take the sensor array from a recording container instead
    #[arg(long)]
    recording: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    g: usize,
    /// Slots per row; defaults to the largest cluster
    #[arg(long)]
    l: Option<usize>,
    /// left, right or center
    #[arg(long, default_value = "center")]
    intra: String,
    #[arg(long, default_value_t = spikegrid::spatial::DEFAULT_RESTARTS)]
    restarts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scatter sensors over the grid with this seed
    #[arg(long, conflicts_with = "shuffle_clusters")]
    shuffle_channels: Option<u64>,
    /// Permute whole rows with this seed
    #[arg(long)]
    shuffle_clusters: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct EncodeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    layout: PathBuf,
    /// Cut each recording into clips of this length
    #[arg(long)]
    clip_ms: Option<f64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Training manifest (JSONL)
    #[arg(long)]
    manifest: PathBuf,
    /// Validation manifest; defaults to val.jsonl beside the training one
    #[arg(long)]
    val: Option<PathBuf>,
    /// Layout JSON; without it sensors are clustered
    #[arg(long)]
    layout: Option<PathBuf>,
    /// 9, 13, 17 or 21
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    l: Option<usize>,
    #[arg(long)]
    clip_ms: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Training seed (initialization and batch order)
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    layout: PathBuf,
    #[arg(long)]
    clip_ms: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct ExplainArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    layout: PathBuf,
    #[arg(long)]
    clip_ms: Option<f64>,
    /// Class whose evidence is mapped
    #[arg(long, default_value_t = 1)]
    class: usize,
    /// Only explain clips labelled positive
    #[arg(long)]
    positives: bool,
    /// Stop after this many clips
    #[arg(long)]
    limit: Option<usize>,
    /// Pixels per grid slot in the PGM images
    #[arg(long, default_value_t = 16)]
    cell: usize,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Cluster counts: `a..b` (both ends included), `a..=b` or `a,b,c`
    #[arg(long)]
    g: String,
    #[arg(long)]
    l: Option<usize>,
    /// Directory with {train,val,test}.jsonl; generated when absent
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Serialize)]
struct SelftestArgs {
    /// Write run.json here
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct InspectArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Report the network stored in a checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    depth: Option<usize>,
    /// Input as g,l,t,c
    #[arg(long)]
    input: Option<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("SPIKEGRID_THREADS") {
        let n: usize = v.parse().map_err(|_| {
            anyhow::anyhow!("SPIKEGRID_THREADS must be a positive integer, got '{v}'")
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Cluster(a) => commands::cluster(a),
        Command::Encode(a) => commands::encode(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Explain(a) => commands::explain(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Selftest(a) => selftest::run(a),
        Command::Inspect(a) => commands::inspect(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
