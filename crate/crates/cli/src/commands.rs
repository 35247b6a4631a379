use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde_json::json;
use shiftap::bounds::{bounds_on_table, exhaustive_bounds, greedy_on_table};
use shiftap::dataset::{emit_shift_manifest, LoadOptions};
use shiftap::report;
use shiftap::simulate::{describe, generate_dataset, DropProb, SimConfig};
use shiftap::tta::{aggregated_records, aggregated_set};
use shiftap::{
    compute_ap, tta_aggregate, Direction, EvalConfig, Frame, GreedyConfig, GroundTruth, MatchTable, NmsConfig,
    PredictionSource, Shift, ShiftAssignment, ShiftGrid, ShiftedPredictionSet, SweepSearch,
};

use crate::args::{
    BoundsArgs, Cli, Command, DirectionArg, DropKind, EvalArgs, InputArgs, ManifestArgs, OracleArgs, SearchArg,
    SearchArgs, SimulateArgs, SweepArgs, TtaArgs,
};
use crate::output::{to_value, write_json, write_text, RunReport};

/// Failure of a command; the variant decides the exit status.
#[derive(Debug)]
pub enum CommandError {
    /// Unreadable or inconsistent input, bad flags.
    Input(String),
    /// The instance exceeds a configured resource cap.
    Resource(String),
}

impl fmt::Display for CommandError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CommandError::Input(msg) | CommandError::Resource(msg) => f.write_str(msg),
        }
    }
}

impl From<shiftap::Error> for CommandError {
    fn from(e: shiftap::Error) -> Self {
        if e.is_resource_limit() {
            CommandError::Resource(e.to_string())
        } else {
            CommandError::Input(e.to_string())
        }
    }
}

type CmdResult<T = ()> = Result<T, CommandError>;

/// Progress messages on standard error.
struct Progress {
    quiet: bool,
    start: Instant,
}

impl Progress {
    fn say(&self, msg: impl fmt::Display) {
        if !self.quiet {
            eprintln!("{msg}");
        }
    }

    fn done(&self, command: &str) {
        self.say(format_args!("{command}: finished in {:.2} s", self.start.elapsed().as_secs_f64()));
    }
}

pub fn run(cli: &Cli) -> CmdResult {
    let progress = Progress {
        quiet: cli.quiet,
        start: Instant::now(),
    };
    let name = match &cli.command {
        Command::Eval(a) => {
            eval(a, &progress)?;
            "eval"
        }
        Command::Bounds(a) => {
            bounds(a, &progress)?;
            "bounds"
        }
        Command::Oracle(a) => {
            oracle(a, &progress)?;
            "oracle"
        }
        Command::Tta(a) => {
            tta(a, &progress)?;
            "tta"
        }
        Command::Sweep(a) => {
            sweep(a, &progress)?;
            "sweep"
        }
        Command::Simulate(a) => {
            simulate(a, &progress)?;
            "simulate"
        }
        Command::Manifest(a) => {
            manifest(a)?;
            "manifest"
        }
    };
    progress.done(name);
    Ok(())
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn load_gt(path: &Path, progress: &Progress) -> CmdResult<GroundTruth> {
    let gt = GroundTruth::load(path)?;
    for w in &gt.warnings {
        progress.say(format_args!("warning: {w}"));
    }
    progress.say(format_args!(
        "{}: {} images, {} annotations, {} categories",
        path.display(),
        gt.images.len(),
        gt.annotations.len(),
        gt.categories.len()
    ));
    Ok(gt)
}

fn prediction_source(input: &InputArgs) -> CmdResult<PredictionSource> {
    match (&input.pred_dir, input.pred.is_empty()) {
        (Some(dir), _) => Ok(PredictionSource::Directory(dir.clone())),
        (None, false) => Ok(PredictionSource::Files(input.pred.clone())),
        (None, true) => Err(CommandError::Input("one of --pred-dir or --pred is required".into())),
    }
}

fn source_echo(source: &PredictionSource) -> serde_json::Value {
    match source {
        PredictionSource::Directory(dir) => json!({ "pred_dir": path_str(dir) }),
        PredictionSource::Files(files) => json!({ "pred": files.iter().map(|p| path_str(p)).collect::<Vec<_>>() }),
    }
}

fn load_predictions(
    source: &PredictionSource,
    gt: &GroundTruth,
    max_shift: u32,
    frame: Frame,
    progress: &Progress,
) -> CmdResult<ShiftedPredictionSet> {
    let grid = ShiftGrid::new(max_shift);
    let options = LoadOptions {
        grid,
        frame,
        default_shift: (max_shift == 0).then_some(Shift::ZERO),
    };
    let set = ShiftedPredictionSet::load(source, &gt.image_ids(), options)?;
    progress.say(format_args!(
        "loaded {} detections over {} images x {} shifts",
        set.num_detections(),
        set.num_images(),
        grid.len()
    ));
    if set.skipped_records() > 0 {
        progress.say(format_args!(
            "warning: skipped {} records for images absent from the ground truth",
            set.skipped_records()
        ));
    }
    Ok(set)
}

const LISTED_MISSING: usize = 20;

fn check_missing(missing: &[(u64, Shift)], allow: bool, progress: &Progress) -> CmdResult {
    if missing.is_empty() {
        return Ok(());
    }
    let listed: Vec<String> = missing
        .iter()
        .take(LISTED_MISSING)
        .map(|(image_id, s)| format!("image {image_id} shift {s}"))
        .collect();
    let more = if missing.len() > LISTED_MISSING {
        format!(" and {} more", missing.len() - LISTED_MISSING)
    } else {
        String::new()
    };
    let msg = format!(
        "{} (image, shift) cells have no predictions: {}{more}",
        missing.len(),
        listed.join(", ")
    );
    if allow {
        progress.say(format_args!("warning: {msg}; treating them as empty"));
        Ok(())
    } else {
        Err(CommandError::Input(format!("{msg}; pass --allow-missing to treat them as empty")))
    }
}

fn greedy_config(search: &SearchArgs, direction: Direction) -> CmdResult<GreedyConfig> {
    if search.iterations == 0 {
        return Err(CommandError::Input("--iterations must be at least 1".into()));
    }
    Ok(GreedyConfig {
        iterations: search.iterations,
        objective: search.objective.into(),
        direction,
        stop_when_stable: false,
    })
}

fn eval_config(max_dets: usize) -> CmdResult<EvalConfig> {
    let config = EvalConfig {
        max_dets,
        ..EvalConfig::default()
    };
    config.validate()?;
    Ok(config)
}

fn eval(args: &EvalArgs, progress: &Progress) -> CmdResult {
    let config = eval_config(args.input.max_dets)?;
    let gt = load_gt(&args.input.gt, progress)?;
    let source = prediction_source(&args.input)?;
    let set = load_predictions(&source, &gt, args.max_shift, args.input.frame.into(), progress)?;
    let assignment = match &args.assignment {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CommandError::Input(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<ShiftAssignment>(&text)
                .map_err(|e| CommandError::Input(format!("{}: {e}", path.display())))?
        }
        None => ShiftAssignment::uniform(set.image_ids(), args.shift),
    };
    let grid = set.grid();
    let missing: Vec<(u64, Shift)> = set
        .missing_cells()
        .into_iter()
        .filter(|&(image_id, s)| assignment.get(image_id) == Some(s) && grid.contains(s))
        .collect();
    check_missing(&missing, true, progress)?;
    let result = compute_ap(&assignment, &set, &gt, &config)?;
    let report = RunReport::new(
        "eval",
        json!({
            "gt": path_str(&args.input.gt),
            "predictions": source_echo(&source),
            "frame": args.input.frame.to_possible_value_name(),
            "max_shift": args.max_shift,
            "assignment": args.assignment.as_deref().map(path_str),
            "shift": if args.assignment.is_none() { Some(args.shift) } else { None },
            "eval": config,
        }),
        None,
        to_value(&result),
    );
    progress.say(format_args!("AP {:.4}  AP50 {:.4}", result.ap, result.ap50));
    write_json(args.out.as_deref(), &report)
}

fn bounds(args: &BoundsArgs, progress: &Progress) -> CmdResult {
    if args.csv.is_some() && args.direction != DirectionArg::Both {
        return Err(CommandError::Input("--csv needs --direction both".into()));
    }
    let config = eval_config(args.input.max_dets)?;
    let direction = match args.direction {
        DirectionArg::Min => Direction::Minimize,
        DirectionArg::Both | DirectionArg::Max => Direction::Maximize,
    };
    let greedy = greedy_config(&args.search, direction)?;
    let gt = load_gt(&args.input.gt, progress)?;
    let source = prediction_source(&args.input)?;
    let set = load_predictions(&source, &gt, args.search.max_shift, args.input.frame.into(), progress)?;
    check_missing(&set.missing_cells(), args.search.allow_missing, progress)?;
    let table = MatchTable::build(&set, &gt, &config)?;

    let config_echo = json!({
        "gt": path_str(&args.input.gt),
        "predictions": source_echo(&source),
        "frame": args.input.frame.to_possible_value_name(),
        "max_shift": args.search.max_shift,
        "direction": args.direction.to_possible_value_name(),
        "greedy": { "iterations": greedy.iterations, "objective": greedy.objective, "stop_when_stable": false },
        "label": args.label,
        "eval": config,
    });
    let report = if args.direction == DirectionArg::Both {
        let result = bounds_on_table(&table, &greedy)?;
        progress.say(format_args!(
            "AP {:.4} [{:.4}, {:.4}]  AP50 {:.4} [{:.4}, {:.4}]",
            result.baseline.ap,
            result.ap_worst.ap,
            result.ap_best.ap,
            result.baseline.ap50,
            result.ap_worst.ap50,
            result.ap_best.ap50
        ));
        if let Some(csv) = &args.csv {
            let table = report::bounds_table([(args.label.as_str(), &result.baseline, &result.ap_best, &result.ap_worst)]);
            write_text(Some(csv), &table)?;
        }
        RunReport::new("bounds", config_echo, Some(result.eval_count), to_value(&result))
    } else {
        let baseline = shiftap::EvalCache::new(table.clone()).current();
        let outcome = greedy_on_table(&table, &greedy)?;
        progress.say(format_args!(
            "baseline AP50 {:.4}, searched AP50 {:.4}",
            baseline.ap50, outcome.result.ap50
        ));
        RunReport::new(
            "bounds",
            config_echo,
            Some(outcome.eval_count),
            json!({ "baseline": baseline, "outcome": outcome }),
        )
    };
    write_json(args.out.as_deref(), &report)
}

fn oracle(args: &OracleArgs, progress: &Progress) -> CmdResult {
    let config = eval_config(args.input.max_dets)?;
    let greedy = greedy_config(&args.search, Direction::Maximize)?;
    let gt = load_gt(&args.input.gt, progress)?;
    let source = prediction_source(&args.input)?;
    let set = load_predictions(&source, &gt, args.search.max_shift, args.input.frame.into(), progress)?;
    check_missing(&set.missing_cells(), args.search.allow_missing, progress)?;

    let exact = exhaustive_bounds(&set, &gt, &config, greedy.objective, args.cap)?;
    let table = MatchTable::build(&set, &gt, &config)?;
    let approx = bounds_on_table(&table, &greedy)?;
    let objective = greedy.objective;
    let best_gap = objective.of(&exact.best) - objective.of(&approx.ap_best);
    let worst_gap = objective.of(&approx.ap_worst) - objective.of(&exact.worst);
    progress.say(format_args!(
        "{} assignments enumerated; greedy gap best {best_gap:.6}, worst {worst_gap:.6}",
        exact.assignments_evaluated
    ));
    let report = RunReport::new(
        "oracle",
        json!({
            "gt": path_str(&args.input.gt),
            "predictions": source_echo(&source),
            "frame": args.input.frame.to_possible_value_name(),
            "max_shift": args.search.max_shift,
            "greedy": { "iterations": greedy.iterations, "objective": objective },
            "cap": args.cap,
            "eval": config,
        }),
        Some(approx.eval_count),
        json!({
            "exhaustive": exact,
            "greedy": approx,
            "best_gap": best_gap,
            "worst_gap": worst_gap,
            "greedy_within_oracle": best_gap >= 0.0 && worst_gap >= 0.0,
        }),
    );
    write_json(args.out.as_deref(), &report)
}

fn tta(args: &TtaArgs, progress: &Progress) -> CmdResult {
    let config = eval_config(args.input.max_dets)?;
    let nms = NmsConfig {
        iou_threshold: args.nms_iou,
        class_aware: !args.class_agnostic,
    };
    nms.validate()?;
    let greedy = greedy_config(&args.search, Direction::Maximize)?;
    let gt = load_gt(&args.input.gt, progress)?;
    let source = prediction_source(&args.input)?;
    let set = load_predictions(&source, &gt, args.search.max_shift, args.input.frame.into(), progress)?;
    check_missing(&set.missing_cells(), args.search.allow_missing, progress)?;

    let table = MatchTable::build(&set, &gt, &config)?;
    let baseline = shiftap::EvalCache::new(table.clone()).current();
    let aggregated = tta_aggregate(&set, &nms);
    let merged = aggregated_set(&aggregated);
    let with_tta = compute_ap(&ShiftAssignment::uniform(merged.image_ids(), Shift::ZERO), &merged, &gt, &config)?;
    let best = greedy_on_table(&table, &greedy)?;
    progress.say(format_args!(
        "AP50 baseline {:.4}, with aggregation {:.4}, best assignment {:.4}",
        baseline.ap50, with_tta.ap50, best.result.ap50
    ));

    if let Some(path) = &args.write_predictions {
        write_json(Some(path), &aggregated_records(&aggregated))?;
    }
    if let Some(csv) = &args.csv {
        let text = format!(
            "{}\n{}\n",
            report::TTA_HEADER,
            report::tta_row(&args.label, &baseline, &with_tta, &best.result)
        );
        write_text(Some(csv), &text)?;
    }
    let report = RunReport::new(
        "tta",
        json!({
            "gt": path_str(&args.input.gt),
            "predictions": source_echo(&source),
            "frame": args.input.frame.to_possible_value_name(),
            "max_shift": args.search.max_shift,
            "nms": nms,
            "greedy": { "iterations": greedy.iterations, "objective": greedy.objective },
            "label": args.label,
            "eval": config,
        }),
        Some(best.eval_count),
        json!({
            "baseline": baseline,
            "tta": with_tta,
            "tta_detections": merged.num_detections(),
            "best": best.result,
            "best_assignment": best.assignment,
        }),
    );
    write_json(args.out.as_deref(), &report)
}

fn sweep(args: &SweepArgs, progress: &Progress) -> CmdResult {
    let config = eval_config(args.max_dets)?;
    if args.shifts.is_empty() {
        return Err(CommandError::Input("--shifts is empty".into()));
    }
    if args.iterations == 0 {
        return Err(CommandError::Input("--iterations must be at least 1".into()));
    }
    let gt = load_gt(&args.gt, progress)?;
    let frame: Frame = args.frame.into();
    let mut sets: BTreeMap<u32, ShiftedPredictionSet> = BTreeMap::new();
    let sources: serde_json::Value;
    match (&args.pred_dir, args.set.is_empty()) {
        (Some(dir), _) => {
            let largest = *args.shifts.iter().max().expect("non-empty");
            let full = load_predictions(&PredictionSource::Directory(dir.clone()), &gt, largest, frame, progress)?;
            for &m in &args.shifts {
                let sub = full.restrict(m)?;
                check_missing(&sub.missing_cells(), args.allow_missing, progress)?;
                sets.insert(m, sub);
            }
            sources = json!({ "pred_dir": path_str(dir) });
        }
        (None, false) => {
            let mut echo = BTreeMap::new();
            for (m, dir) in &args.set {
                let set = load_predictions(&PredictionSource::Directory(dir.clone()), &gt, *m, frame, progress)?;
                check_missing(&set.missing_cells(), args.allow_missing, progress)?;
                sets.insert(*m, set);
                echo.insert(m.to_string(), path_str(dir));
            }
            sources = json!({ "sets": echo });
        }
        (None, true) => return Err(CommandError::Input("one of --pred-dir or --set is required".into())),
    }

    let search = match args.search {
        SearchArg::Greedy => SweepSearch::Greedy(GreedyConfig {
            iterations: args.iterations,
            objective: args.objective.into(),
            direction: Direction::Maximize,
            stop_when_stable: false,
        }),
        SearchArg::Exhaustive => SweepSearch::Exhaustive {
            objective: args.objective.into(),
            cap: args.cap,
        },
    };
    let rows = shiftap::sweep_shift_range(&sets, &gt, &config, &search, &args.shifts)?;
    for r in &rows {
        progress.say(format_args!(
            "M={}: AP50 [{:.4}, {:.4}]",
            r.max_shift, r.worst_ap50, r.best_ap50
        ));
    }
    if let Some(csv) = &args.csv {
        write_text(Some(csv), &report::sweep_table(&rows))?;
    }
    if let Some(series) = &args.series {
        write_text(Some(series), &report::baseline_difference_series(&rows))?;
    }
    let eval_count = rows.iter().map(|r| r.eval_count).sum();
    let mut shifts = args.shifts.clone();
    shifts.sort_unstable();
    shifts.dedup();
    let report = RunReport::new(
        "sweep",
        json!({
            "gt": path_str(&args.gt),
            "predictions": sources,
            "frame": args.frame.to_possible_value_name(),
            "shifts": shifts,
            "search": search,
            "eval": config,
        }),
        Some(eval_count),
        json!({ "rows": rows }),
    );
    write_json(args.out.as_deref(), &report)
}

fn simulate(args: &SimulateArgs, progress: &Progress) -> CmdResult {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| CommandError::Input(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<SimConfig>(&text).map_err(|e| CommandError::Input(format!("{}: {e}", path.display())))?
        }
        None => SimConfig::default(),
    };
    apply_overrides(&mut config, args);
    config.validate()?;
    let data = generate_dataset(&config)?;
    data.write_to_dir(&args.out)?;
    progress.say(format_args!(
        "{}: {} images, {} objects, {} object detections, {} spurious detections",
        args.out.display(),
        config.n_images,
        data.counts.objects,
        data.counts.object_detections,
        data.counts.spurious_detections
    ));
    let report = RunReport::new(
        "simulate",
        json!({ "simulator": config, "out": path_str(&args.out) }),
        None,
        json!({ "realized": data.counts, "expected": describe(&config) }),
    );
    write_json(None, &report)
}

fn apply_overrides(config: &mut SimConfig, args: &SimulateArgs) {
    fn set<T: Copy>(slot: &mut T, value: Option<T>) {
        if let Some(v) = value {
            *slot = v;
        }
    }
    set(&mut config.n_images, args.n_images);
    set(&mut config.image_size, args.image_size);
    set(&mut config.n_categories, args.n_categories);
    set(&mut config.objects_per_image.min, args.objects_min);
    set(&mut config.objects_per_image.max, args.objects_max);
    set(&mut config.max_shift, args.max_shift);
    set(&mut config.score_base, args.score_base);
    set(&mut config.box_jitter_sigma, args.box_jitter);
    set(&mut config.score_jitter_sigma, args.score_jitter);
    set(&mut config.fp_rate, args.fp_rate);
    set(&mut config.fp_score_max, args.fp_score_max);
    set(&mut config.seed, args.seed);
    if let (Some(kind), Some(p)) = (args.drop_kind, args.drop_p) {
        config.drop_prob = match kind {
            DropKind::Constant => DropProb::Constant { p },
            DropKind::Parity => DropProb::Parity { p },
            DropKind::Linear => DropProb::Linear { p },
        };
    }
}

fn manifest(args: &ManifestArgs) -> CmdResult {
    let gt = GroundTruth::load(&args.gt)?;
    let manifest = emit_shift_manifest(&gt.images, ShiftGrid::new(args.max_shift), args.padding.into())?;
    write_text(args.out.as_deref(), &(manifest.to_json_string() + "\n"))
}

trait ValueName {
    fn to_possible_value_name(&self) -> String;
}

impl<T: clap::ValueEnum> ValueName for T {
    fn to_possible_value_name(&self) -> String {
        self.to_possible_value().map(|v| v.get_name().to_string()).unwrap_or_default()
    }
}
