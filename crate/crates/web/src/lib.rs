//! WebAssembly bindings for the browser demo. Every export takes and returns
//! JSON strings; the `*_json` functions hold the logic and run natively too.

use serde::Serialize;
use shiftap::bounds::bounds_on_table;
use shiftap::report;
use shiftap::simulate::{generate_dataset, RealizedCounts, SimConfig};
use shiftap::tta::aggregated_set;
use shiftap::{
    compute_ap, nms, sweep_shift_range, tta_aggregate, BBox, Detection, EvalConfig, GreedyConfig, MatchTable,
    NmsConfig, Shift, ShiftAssignment, SweepRow, SweepSearch,
};
use wasm_bindgen::prelude::*;

/// Demo inputs are capped so a click never freezes the tab for long.
const MAX_IMAGES: usize = 2000;
const MAX_SHIFT: u32 = 8;

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error("invalid simulator settings: {0}")]
    Settings(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] shiftap::Error),
    #[error("{0}")]
    Limit(String),
}

type DemoResult<T> = Result<T, DemoError>;

fn parse_config(config_json: &str) -> DemoResult<SimConfig> {
    let config: SimConfig = serde_json::from_str(config_json)?;
    config.validate()?;
    if config.n_images > MAX_IMAGES {
        return Err(DemoError::Limit(format!("the demo handles at most {MAX_IMAGES} images")));
    }
    if config.max_shift > MAX_SHIFT {
        return Err(DemoError::Limit(format!("the demo handles shifts up to {MAX_SHIFT}")));
    }
    Ok(config)
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("demo values serialize")
}

#[derive(Debug, Serialize)]
struct Score {
    ap: f64,
    ap50: f64,
}

impl From<&shiftap::ApResult> for Score {
    fn from(r: &shiftap::ApResult) -> Self {
        Score { ap: r.ap, ap50: r.ap50 }
    }
}

#[derive(Debug, Serialize)]
struct BoundsView {
    counts: RealizedCounts,
    baseline: Score,
    best: Score,
    worst: Score,
    delta_ap: f64,
    delta_ap50: f64,
    eval_count: u64,
    max_shift: u32,
    /// Images per shift, row-major over `dy` then `dx`.
    best_shift_counts: Vec<usize>,
    worst_shift_counts: Vec<usize>,
    csv: String,
}

fn shift_counts(assignment: &ShiftAssignment, max_shift: u32) -> Vec<usize> {
    let side = max_shift as usize + 1;
    let mut counts = vec![0; side * side];
    for (_, s) in assignment.iter() {
        counts[s.dy as usize * side + s.dx as usize] += 1;
    }
    counts
}

/// Simulates a dataset and searches for the best and worst assignment.
pub fn bounds_json(config_json: &str, iterations: usize) -> DemoResult<String> {
    let config = parse_config(config_json)?;
    let data = generate_dataset(&config)?;
    let table = MatchTable::build(&data.predictions, &data.ground_truth, &EvalConfig::default())?;
    let b = bounds_on_table(&table, &GreedyConfig::default().with_iterations(iterations.max(1)))?;
    let csv = report::bounds_table([("simulated", &b.baseline, &b.ap_best, &b.ap_worst)]);
    Ok(to_json(&BoundsView {
        counts: data.counts,
        baseline: (&b.baseline).into(),
        best: (&b.ap_best).into(),
        worst: (&b.ap_worst).into(),
        delta_ap: b.delta_ap,
        delta_ap50: b.delta_ap50,
        eval_count: b.eval_count,
        max_shift: config.max_shift,
        best_shift_counts: shift_counts(&b.assignment_best, config.max_shift),
        worst_shift_counts: shift_counts(&b.assignment_worst, config.max_shift),
        csv,
    }))
}

#[derive(Debug, Serialize)]
struct SweepView {
    rows: Vec<SweepRow>,
    table: String,
    series: String,
}

/// Bounds for each maximum shift in `shifts`, all taken from one simulated
/// run at the largest shift.
pub fn sweep_json(config_json: &str, shifts: &[u32]) -> DemoResult<String> {
    let mut config = parse_config(config_json)?;
    let largest = shifts.iter().copied().max().ok_or_else(|| DemoError::Limit("no shifts given".into()))?;
    if largest > MAX_SHIFT {
        return Err(DemoError::Limit(format!("the demo handles shifts up to {MAX_SHIFT}")));
    }
    config.max_shift = largest;
    let data = generate_dataset(&config)?;
    let sets = shifts
        .iter()
        .map(|&m| Ok((m, data.predictions.restrict(m)?)))
        .collect::<Result<_, shiftap::Error>>()?;
    let rows = sweep_shift_range(
        &sets,
        &data.ground_truth,
        &EvalConfig::default(),
        &SweepSearch::Greedy(GreedyConfig::default()),
        shifts,
    )?;
    Ok(to_json(&SweepView {
        table: report::sweep_table(&rows),
        series: report::baseline_difference_series(&rows),
        rows,
    }))
}

#[derive(Debug, Serialize)]
struct DrawnBox {
    bbox: BBox,
    category_id: u64,
    score: f64,
    shift: Option<Shift>,
}

#[derive(Debug, Serialize)]
struct TtaView {
    baseline: Score,
    tta: Score,
    image_id: u64,
    image_size: u32,
    ground_truth: Vec<DrawnBox>,
    pooled: Vec<DrawnBox>,
    kept: Vec<DrawnBox>,
    nms_only_zero_shift: usize,
}

fn drawn(d: &Detection, shift: Option<Shift>) -> DrawnBox {
    DrawnBox {
        bbox: d.bbox,
        category_id: d.category_id,
        score: d.score,
        shift,
    }
}

/// Aggregation over all shifts, with the boxes of one image for drawing.
pub fn tta_json(config_json: &str, nms_iou: f64, class_aware: bool, image_index: usize) -> DemoResult<String> {
    let config = parse_config(config_json)?;
    let nms_config = NmsConfig {
        iou_threshold: nms_iou,
        class_aware,
    };
    nms_config.validate()?;
    let data = generate_dataset(&config)?;
    let eval = EvalConfig::default();
    let set = &data.predictions;
    let zero = ShiftAssignment::uniform(set.image_ids(), Shift::ZERO);
    let baseline = compute_ap(&zero, set, &data.ground_truth, &eval)?;
    let aggregated = tta_aggregate(set, &nms_config);
    let merged = aggregated_set(&aggregated);
    let tta = compute_ap(&zero, &merged, &data.ground_truth, &eval)?;

    let index = image_index.min(set.num_images() - 1);
    let image_id = set.image_ids()[index];
    let grid = set.grid();
    let pooled = grid
        .shifts()
        .enumerate()
        .flat_map(|(s, shift)| set.cell_at(index, s).iter().map(move |d| drawn(d, Some(shift))))
        .collect();
    let ground_truth = data
        .ground_truth
        .annotations
        .iter()
        .filter(|a| a.image_id == image_id)
        .map(|a| DrawnBox {
            bbox: a.bbox,
            category_id: a.category_id,
            score: 1.0,
            shift: None,
        })
        .collect();
    Ok(to_json(&TtaView {
        baseline: (&baseline).into(),
        tta: (&tta).into(),
        image_id,
        image_size: config.image_size,
        ground_truth,
        pooled,
        kept: aggregated[&image_id].iter().map(|d| drawn(d, None)).collect(),
        nms_only_zero_shift: nms(set.cell_at(index, 0), &nms_config).len(),
    }))
}

fn js_error(e: DemoError) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn bounds(config_json: &str, iterations: usize) -> Result<String, JsError> {
    bounds_json(config_json, iterations).map_err(js_error)
}

#[wasm_bindgen]
pub fn sweep(config_json: &str, shifts: Vec<u32>) -> Result<String, JsError> {
    sweep_json(config_json, &shifts).map_err(js_error)
}

#[wasm_bindgen]
pub fn tta(config_json: &str, nms_iou: f64, class_aware: bool, image_index: usize) -> Result<String, JsError> {
    tta_json(config_json, nms_iou, class_aware, image_index).map_err(js_error)
}

/// Default simulator settings, as a starting point for the form.
#[wasm_bindgen]
pub fn default_config() -> String {
    to_json(&SimConfig::default())
}
