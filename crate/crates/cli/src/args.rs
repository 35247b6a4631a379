use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use shiftap::{Frame, Objective, PaddingPolicy, Shift};

#[derive(Debug, Parser)]
#[command(name = "shiftap", version, about = "Best- and worst-case COCO AP over per-image pixel shifts")]
pub struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, env = "SHIFTAP_THREADS")]
    pub threads: Option<usize>,

    /// Suppress progress messages on standard error.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// AP of one shift per image.
    Eval(EvalArgs),
    /// Greedy best and worst AP over the shift grid.
    Bounds(BoundsArgs),
    /// Compare the greedy bounds with exhaustive enumeration.
    Oracle(OracleArgs),
    /// Aggregate all shifts with NMS and compare with the baseline.
    Tta(TtaArgs),
    /// Bounds for increasing maximum shifts.
    Sweep(SweepArgs),
    /// Generate a synthetic dataset with shift-dependent predictions.
    Simulate(SimulateArgs),
    /// List the shifted canvases an external harness should render.
    Manifest(ManifestArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FrameArg {
    Shifted,
    Canonical,
}

impl From<FrameArg> for Frame {
    fn from(f: FrameArg) -> Self {
        match f {
            FrameArg::Shifted => Frame::Shifted,
            FrameArg::Canonical => Frame::Canonical,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Ap50,
    Ap,
}

impl From<ObjectiveArg> for Objective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Ap50 => Objective::Ap50,
            ObjectiveArg::Ap => Objective::Ap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Both,
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PaddingArg {
    Minimal,
    Global,
}

impl From<PaddingArg> for PaddingPolicy {
    fn from(p: PaddingArg) -> Self {
        match p {
            PaddingArg::Minimal => PaddingPolicy::Minimal,
            PaddingArg::Global => PaddingPolicy::Global,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DropKind {
    Constant,
    Parity,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SearchArg {
    Greedy,
    Exhaustive,
}

/// Ground truth, predictions and matching parameters.
#[derive(Debug, Args)]
pub struct InputArgs {
    /// COCO ground-truth JSON.
    #[arg(long)]
    pub gt: PathBuf,

    /// Directory of `shift_<dx>_<dy>.json` detection files.
    #[arg(long, conflicts_with = "pred")]
    pub pred_dir: Option<PathBuf>,

    /// Detection result files; records need a `shift` field unless the file
    /// name encodes one or the grid has a single shift.
    #[arg(long, num_args = 1..)]
    pub pred: Vec<PathBuf>,

    /// Coordinate frame of the prediction boxes.
    #[arg(long, value_enum, default_value = "shifted")]
    pub frame: FrameArg,

    /// Maximum detections per image and category.
    #[arg(long, default_value_t = 100)]
    pub max_dets: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: InputArgs,

    #[arg(long, default_value_t = 0)]
    pub max_shift: u32,

    /// Shift used for every image, as `dx,dy`.
    #[arg(long, value_parser = parse_shift, default_value = "0,0", conflicts_with = "assignment")]
    pub shift: Shift,

    /// JSON list of `{"image_id", "shift"}` entries.
    #[arg(long)]
    pub assignment: Option<PathBuf>,

    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub max_shift: u32,

    /// Greedy sweeps over the image set.
    #[arg(long, short = 'k', default_value_t = 1)]
    pub iterations: usize,

    /// Metric the search optimizes.
    #[arg(long, value_enum, default_value = "ap50")]
    pub objective: ObjectiveArg,

    /// Evaluate even if some (image, shift) cells have no prediction file.
    #[arg(long)]
    pub allow_missing: bool,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[command(flatten)]
    pub input: InputArgs,

    #[command(flatten)]
    pub search: SearchArgs,

    #[arg(long, value_enum, default_value = "both")]
    pub direction: DirectionArg,

    /// Method name for the CSV row.
    #[arg(long, default_value = "detector")]
    pub label: String,

    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Write a bounds table row as CSV (needs both directions).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub input: InputArgs,

    #[command(flatten)]
    pub search: SearchArgs,

    /// Refuse instances with more assignments than this.
    #[arg(long, default_value_t = shiftap::bounds::DEFAULT_ENUMERATION_CAP)]
    pub cap: u64,

    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TtaArgs {
    #[command(flatten)]
    pub input: InputArgs,

    #[command(flatten)]
    pub search: SearchArgs,

    #[arg(long, default_value_t = 0.5)]
    pub nms_iou: f64,

    /// Let detections of different categories suppress each other.
    #[arg(long)]
    pub class_agnostic: bool,

    #[arg(long, default_value = "detector")]
    pub label: String,

    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Write the comparison row as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,

    /// Write the aggregated detections as COCO results JSON.
    #[arg(long)]
    pub write_predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub gt: PathBuf,

    /// One directory holding the largest grid; smaller grids are its subsets.
    #[arg(long, conflicts_with = "set")]
    pub pred_dir: Option<PathBuf>,

    /// Separate predictions per maximum shift, as `M=DIR`.
    #[arg(long, value_parser = parse_set)]
    pub set: Vec<(u32, PathBuf)>,

    /// Maximum shifts to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "0,1,3,7,15")]
    pub shifts: Vec<u32>,

    #[arg(long, value_enum, default_value = "shifted")]
    pub frame: FrameArg,

    #[arg(long, default_value_t = 100)]
    pub max_dets: usize,

    #[arg(long, value_enum, default_value = "greedy")]
    pub search: SearchArg,

    #[arg(long, short = 'k', default_value_t = 1)]
    pub iterations: usize,

    #[arg(long, value_enum, default_value = "ap50")]
    pub objective: ObjectiveArg,

    /// Enumeration cap for the exhaustive search.
    #[arg(long, default_value_t = shiftap::bounds::DEFAULT_ENUMERATION_CAP)]
    pub cap: u64,

    #[arg(long)]
    pub allow_missing: bool,

    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Table of bounds per maximum shift, CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,

    /// Differences to the baseline per maximum shift, CSV.
    #[arg(long)]
    pub series: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON file with simulator settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,

    #[arg(long)]
    pub n_images: Option<usize>,
    #[arg(long)]
    pub image_size: Option<u32>,
    #[arg(long)]
    pub n_categories: Option<u32>,
    #[arg(long)]
    pub objects_min: Option<u32>,
    #[arg(long)]
    pub objects_max: Option<u32>,
    #[arg(long)]
    pub max_shift: Option<u32>,
    #[arg(long)]
    pub score_base: Option<f64>,
    #[arg(long)]
    pub box_jitter: Option<f64>,
    #[arg(long)]
    pub score_jitter: Option<f64>,
    #[arg(long, value_enum, requires = "drop_p")]
    pub drop_kind: Option<DropKind>,
    #[arg(long, requires = "drop_kind")]
    pub drop_p: Option<f64>,
    #[arg(long)]
    pub fp_rate: Option<f64>,
    #[arg(long)]
    pub fp_score_max: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ManifestArgs {
    #[arg(long)]
    pub gt: PathBuf,

    #[arg(long)]
    pub max_shift: u32,

    #[arg(long, value_enum, default_value = "minimal")]
    pub padding: PaddingArg,

    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_shift(s: &str) -> Result<Shift, String> {
    let (dx, dy) = s.split_once(',').ok_or("expected dx,dy")?;
    let parse = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("{v:?}: {e}"));
    Ok(Shift::new(parse(dx)?, parse(dy)?))
}

fn parse_set(s: &str) -> Result<(u32, PathBuf), String> {
    let (m, dir) = s.split_once('=').ok_or("expected M=DIR")?;
    let m = m.trim().parse::<u32>().map_err(|e| format!("{m:?}: {e}"))?;
    Ok((m, PathBuf::from(dir)))
}
