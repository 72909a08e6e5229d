mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::output::exit_code;

#[derive(Debug, Parser, Serialize)]
#[command(name = "stripdet", version, about = "Strip-convolution blocks, rotated-box geometry and evaluation tools")]
struct Cli {
    /// Worker threads for data generation and evaluation.
    #[arg(long, global = true, env = "STRIPDET_THREADS", default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Gradient-support mask of one output position.
    Rfmap(RfmapArgs),
    /// Parameter count of a backbone variant.
    Params(CostArgs),
    /// Multiply-accumulate count of a backbone variant.
    Flops(CostArgs),
    /// Convert DOTA annotation files (and netpbm images) into records and tensors.
    Ingest(IngestArgs),
    /// Cut an image and its annotations into overlapping patches.
    Tile(TileArgs),
    /// Merge per-tile detections back into image coordinates.
    Merge(MergeArgs),
    /// Average precision per class and per aspect-ratio bin.
    Eval(EvalArgs),
    /// Strip versus square-kernel regression experiment on synthetic scenes.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args, Serialize)]
struct GradcheckArgs {
    /// layers, strip-module, head, toy-net or all.
    #[arg(long, default_value = "all")]
    scope: String,
    /// Corrupt the first tensor of the named case with NaN.
    #[arg(long)]
    inject_nan: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct RfmapArgs {
    /// Module design: sequential, parallel, no-square, squareN, dilatedNdM, single-squareN, or 5x5-only.
    #[arg(long, default_value = "sequential")]
    design: String,
    /// Strip length.
    #[arg(short, long, default_value_t = 19)]
    k: usize,
    /// attention (before the product with the input) or module.
    #[arg(long, default_value = "attention")]
    target: String,
    #[arg(long, default_value_t = 2)]
    channels: usize,
    /// Input side; defaults to the receptive field plus a margin of 8.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value_t = 0)]
    probe_channel: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct CostArgs {
    /// stripnet-t or stripnet-s.
    #[arg(long, default_value = "stripnet-s")]
    variant: String,
    /// Per-stage strip lengths, e.g. 19,19,19,19.
    #[arg(long)]
    kernels: Option<String>,
    /// Input side used for FLOPs.
    #[arg(long, default_value_t = 1024)]
    size: usize,
    /// Also list every layer.
    #[arg(long)]
    detail: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct IngestArgs {
    /// Annotation file or directory of `<image>.txt` files.
    #[arg(long)]
    annotations: PathBuf,
    /// Directory of `<image>.pgm`/`.ppm` files to convert to tensors.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TileArgs {
    /// PGM, PPM or STNT image.
    #[arg(long, conflicts_with = "dims")]
    image: Option<PathBuf>,
    /// Image size as WxH when no image is given; only the tile index and labels are written.
    #[arg(long)]
    dims: Option<String>,
    /// Image id used in tile names; defaults to the image (or annotation) file stem.
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    annotations: Option<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    patch: usize,
    /// Defaults to 200, or 500 with --multi-scale.
    #[arg(long)]
    overlap: Option<usize>,
    /// Comma-separated resize factors.
    #[arg(long, default_value = "1")]
    scales: String,
    /// Scales 0.5, 1 and 1.5.
    #[arg(long)]
    multi_scale: bool,
    /// center-inside or fully-inside.
    #[arg(long, default_value = "center-inside")]
    clip: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct MergeArgs {
    /// Directory of per-tile detection files named like `P0001__1__0___824.txt`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    nms_thr: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct EvalArgs {
    /// Detection file or directory of `<image>.txt` files.
    #[arg(long)]
    dets: PathBuf,
    /// DOTA annotation file, directory, or an ingested ground_truth.json.
    #[arg(long)]
    gts: PathBuf,
    /// voc07 or voc12.
    #[arg(long, default_value = "voc12")]
    metric: String,
    #[arg(long, default_value_t = 0.5)]
    iou_thr: f64,
    /// Aspect-ratio bin edges.
    #[arg(long, default_value = "1,2,3,5,8,inf")]
    bins: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct ExperimentArgs {
    /// JSON config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run the A/A control (both arms square).
    #[arg(long)]
    control: bool,
    /// Comma-separated seeds overriding the config.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(1);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match commands::run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
