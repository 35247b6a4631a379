//! COCO-protocol average precision over one selected shift per image.
//!
//! Matching follows the reference COCO toolkit for the `"all"` area range:
//! per image and category, detections are visited by descending score and
//! each takes the unmatched ground truth with the highest IoU at or above the
//! threshold, preferring non-ignored ground truth; a match to an ignored
//! (crowd) region makes the detection ignored. Crowd regions may absorb any
//! number of detections and use intersection-over-detection-area as overlap.
//!
//! Matching depends only on `(image, shift)`, never on which shifts other
//! images use. [`MatchTable`] therefore matches every cell once, and
//! [`EvalCache`] keeps one globally sorted stream per (threshold, category)
//! for the current assignment. A candidate swap only revisits the streams
//! the swapped image touches, and within those only the true-positive ranks:
//! removing and inserting a few entries shifts every later rank by a known
//! offset, so the swapped precision/recall curve is read off the current one
//! without materializing the merged stream.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bounds::ShiftAssignment;
use crate::dataset::{Detection, GroundTruth, GroundTruthAnnotation, ShiftedPredictionSet};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Shift, ShiftGrid};
use crate::par;

/// Sentinel for categories without (non-ignored) ground truth.
pub const NO_GROUND_TRUTH: f64 = -1.0;

/// `numpy.linspace(start, stop, num)` including its rounding behaviour, so
/// thresholds compare bit-for-bit with the reference toolkit.
pub fn linspace(start: f64, stop: f64, num: usize) -> Vec<f64> {
    match num {
        0 => Vec::new(),
        1 => vec![start],
        _ => {
            let step = (stop - start) / (num - 1) as f64;
            let mut out: Vec<f64> = (0..num).map(|i| i as f64 * step + start).collect();
            out[num - 1] = stop;
            out
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Strictly increasing, in `(0, 1]`, and must contain `0.5`.
    pub iou_thresholds: Vec<f64>,
    pub recall_points: usize,
    /// Per image and category, as in the reference toolkit.
    pub max_dets: usize,
    /// `[min, max]` area in px²; the default `[0, 1e10]` is COCO's "all".
    pub area_range: [f64; 2],
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_thresholds: linspace(0.5, 0.95, 10),
            recall_points: 101,
            max_dets: 100,
            area_range: [0.0, 1e10],
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.iou_thresholds;
        if t.is_empty() || t.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
            return Err(Error::InvalidConfig("IoU thresholds must lie in (0, 1]".into()));
        }
        if t.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig("IoU thresholds must be strictly increasing".into()));
        }
        if !t.contains(&0.5) {
            return Err(Error::InvalidConfig("IoU thresholds must include 0.5".into()));
        }
        if self.recall_points < 2 {
            return Err(Error::InvalidConfig("at least two recall points are required".into()));
        }
        if self.max_dets == 0 {
            return Err(Error::InvalidConfig("max_dets must be positive".into()));
        }
        if !(self.area_range[0] <= self.area_range[1]) {
            return Err(Error::InvalidConfig("area range is empty".into()));
        }
        Ok(())
    }

    pub fn recall_thresholds(&self) -> Vec<f64> {
        linspace(0.0, 1.0, self.recall_points)
    }

    /// Index of the 0.5 threshold.
    pub fn ap50_index(&self) -> usize {
        self.iou_thresholds
            .iter()
            .position(|&t| t == 0.5)
            .expect("validated config contains 0.5")
    }

    fn area_ignored(&self, area: f64) -> bool {
        area < self.area_range[0] || area > self.area_range[1]
    }
}

/// What a detection became at one IoU threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchOutcome {
    TruePositive { gt_id: u64 },
    FalsePositive,
    /// Matched an ignore region (or outside the area range): neither TP nor FP.
    Ignored,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDetection {
    pub det_id: u64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMatch {
    pub category_id: u64,
    /// Non-ignored ground truth instances.
    pub num_gt: usize,
    /// Sorted by `(score desc, det_id asc)`, capped at `max_dets`.
    pub detections: Vec<ScoredDetection>,
    /// `outcomes[threshold][detection]`
    pub outcomes: Vec<Vec<MatchOutcome>>,
}

/// Matching of one image's detections against its ground truth, for every
/// category present in either and every IoU threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMatchResult {
    pub image_id: u64,
    /// Sorted by category id.
    pub categories: Vec<CategoryMatch>,
}

fn detection_order(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score).then(a.det_id.cmp(&b.det_id))
}

/// Overlap used for matching: IoU, or intersection over detection area for
/// crowd regions.
fn match_overlap(det: &BBox, gt: &BBox, crowd: bool) -> f64 {
    if !crowd {
        return iou(det, gt);
    }
    let inter = det.intersection(gt);
    let area = det.area();
    if inter <= 0.0 || area <= 0.0 {
        0.0
    } else {
        inter / area
    }
}

/// Matches one image's detections to its ground truth.
pub fn match_image(
    image_id: u64,
    detections: &[Detection],
    ground_truths: &[&GroundTruthAnnotation],
    config: &EvalConfig,
) -> ImageMatchResult {
    let mut by_category: BTreeMap<u64, (Vec<&GroundTruthAnnotation>, Vec<&Detection>)> = BTreeMap::new();
    for g in ground_truths {
        by_category.entry(g.category_id).or_default().0.push(g);
    }
    for d in detections {
        by_category.entry(d.category_id).or_default().1.push(d);
    }

    let categories = by_category
        .into_iter()
        .map(|(category_id, (gts, dets))| match_category(category_id, gts, dets, config))
        .collect();
    ImageMatchResult { image_id, categories }
}

fn match_category(
    category_id: u64,
    gts: Vec<&GroundTruthAnnotation>,
    mut dets: Vec<&Detection>,
    config: &EvalConfig,
) -> CategoryMatch {
    // Stable partition: non-ignored ground truth first, file order otherwise.
    let mut gts: Vec<(&GroundTruthAnnotation, bool)> = gts
        .into_iter()
        .map(|g| (g, g.ignore || config.area_ignored(g.area)))
        .collect();
    gts.sort_by_key(|&(_, ignored)| ignored);
    let num_gt = gts.iter().filter(|(_, ignored)| !ignored).count();

    dets.sort_by(|a, b| detection_order(a, b));
    dets.truncate(config.max_dets);

    let overlaps: Vec<Vec<f64>> = dets
        .iter()
        .map(|d| gts.iter().map(|(g, _)| match_overlap(&d.bbox, &g.bbox, g.ignore)).collect())
        .collect();

    let outcomes = config
        .iou_thresholds
        .iter()
        .map(|&threshold| {
            let mut taken = vec![false; gts.len()];
            dets.iter()
                .zip(&overlaps)
                .map(|(d, row)| {
                    let mut best = threshold.min(1.0 - 1e-10);
                    let mut chosen: Option<usize> = None;
                    for (g, &(gt, ignored)) in gts.iter().enumerate() {
                        if taken[g] && !gt.ignore {
                            continue;
                        }
                        // Ignored ground truth sorts last; once a real match
                        // exists, none of it can win.
                        if let Some(m) = chosen {
                            if !gts[m].1 && ignored {
                                break;
                            }
                        }
                        if row[g] < best {
                            continue;
                        }
                        best = row[g];
                        chosen = Some(g);
                    }
                    match chosen {
                        Some(m) => {
                            taken[m] = true;
                            if gts[m].1 {
                                MatchOutcome::Ignored
                            } else {
                                MatchOutcome::TruePositive { gt_id: gts[m].0.id }
                            }
                        }
                        None if config.area_ignored(d.bbox.area()) => MatchOutcome::Ignored,
                        None => MatchOutcome::FalsePositive,
                    }
                })
                .collect()
        })
        .collect();

    CategoryMatch {
        category_id,
        num_gt,
        detections: dets
            .iter()
            .map(|d| ScoredDetection {
                det_id: d.det_id,
                score: d.score,
            })
            .collect(),
        outcomes,
    }
}

/// Area under the interpolated precision/recall curve of one ranked stream.
///
/// `flags` yields `true` for true positives and `false` for false positives,
/// best score first. Precision is made monotone from the right and sampled
/// at the first rank whose recall reaches each threshold. Only true-positive
/// ranks can be sampling points or envelope maxima, so only those are kept.
pub(crate) struct Curve {
    num_gt: f64,
    seen: u64,
    tp: u64,
    points: Vec<(f64, f64)>,
}

impl Curve {
    pub(crate) fn new(num_gt: usize) -> Self {
        Curve {
            num_gt: num_gt as f64,
            seen: 0,
            tp: 0,
            points: Vec::with_capacity(num_gt.min(1024)),
        }
    }

    #[inline]
    pub(crate) fn push(&mut self, is_tp: bool) {
        self.seen += 1;
        if is_tp {
            self.tp += 1;
            let tp = self.tp as f64;
            self.points.push((tp / self.num_gt, tp / self.seen as f64));
        }
    }

    pub(crate) fn finish(mut self, recall_thresholds: &[f64]) -> f64 {
        for k in (0..self.points.len().saturating_sub(1)).rev() {
            if self.points[k + 1].1 > self.points[k].1 {
                self.points[k].1 = self.points[k + 1].1;
            }
        }
        let mut sum = 0.0;
        let mut k = 0;
        for &r in recall_thresholds {
            while k < self.points.len() && self.points[k].0 < r {
                k += 1;
            }
            if k == self.points.len() {
                break;
            }
            sum += self.points[k].1;
        }
        sum / recall_thresholds.len() as f64
    }
}

fn average_precision(flags: impl IntoIterator<Item = bool>, num_gt: usize, recall: &[f64]) -> f64 {
    if num_gt == 0 {
        return NO_GROUND_TRUTH;
    }
    let mut curve = Curve::new(num_gt);
    for f in flags {
        curve.push(f);
    }
    curve.finish(recall)
}

/// Mean of the entries that are not the no-ground-truth sentinel.
fn mean_valid(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        if v > NO_GROUND_TRUTH {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        NO_GROUND_TRUTH
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category_id: u64,
    pub ap: f64,
    pub ap50: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAp {
    pub iou_threshold: f64,
    pub ap: f64,
}

/// AP over `[.50:.05:.95]` and AP at IoU 0.5. Categories without ground
/// truth report `-1` and are left out of every mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub ap: f64,
    pub ap50: f64,
    pub per_category: Vec<CategoryAp>,
    pub per_threshold: Vec<ThresholdAp>,
}

/// Quantity a search optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// AP at IoU 0.5.
    #[default]
    Ap50,
    /// AP averaged over all configured thresholds.
    Ap,
}

impl Objective {
    pub fn of(self, result: &ApResult) -> f64 {
        match self {
            Objective::Ap50 => result.ap50,
            Objective::Ap => result.ap,
        }
    }
}

/// Shape of a `(threshold, category)` AP matrix and how to reduce it. Both
/// the full and the incremental evaluation paths reduce through here, which
/// keeps their results bit-identical.
#[derive(Debug, Clone)]
struct Reducer {
    thresholds: Vec<f64>,
    categories: Vec<u64>,
    t50: usize,
}

impl Reducer {
    fn new(config: &EvalConfig, categories: Vec<u64>) -> Self {
        Reducer {
            thresholds: config.iou_thresholds.clone(),
            categories,
            t50: config.ap50_index(),
        }
    }

    fn rows(&self, objective: Objective) -> std::ops::Range<usize> {
        match objective {
            Objective::Ap50 => self.t50..self.t50 + 1,
            Objective::Ap => 0..self.thresholds.len(),
        }
    }

    fn threshold_mean(&self, t: usize, ap: &impl Fn(usize, usize) -> f64) -> f64 {
        mean_valid((0..self.categories.len()).map(|c| ap(t, c)))
    }

    fn objective(&self, objective: Objective, ap: impl Fn(usize, usize) -> f64) -> f64 {
        match objective {
            Objective::Ap50 => self.threshold_mean(self.t50, &ap),
            Objective::Ap => mean_valid((0..self.thresholds.len()).map(|t| self.threshold_mean(t, &ap))),
        }
    }

    fn summarize(&self, ap: impl Fn(usize, usize) -> f64) -> ApResult {
        let per_threshold: Vec<ThresholdAp> = self
            .thresholds
            .iter()
            .enumerate()
            .map(|(t, &iou_threshold)| ThresholdAp {
                iou_threshold,
                ap: self.threshold_mean(t, &ap),
            })
            .collect();
        let per_category = self
            .categories
            .iter()
            .enumerate()
            .map(|(c, &category_id)| CategoryAp {
                category_id,
                ap: mean_valid((0..self.thresholds.len()).map(|t| ap(t, c))),
                ap50: ap(self.t50, c),
            })
            .collect();
        ApResult {
            ap: mean_valid(per_threshold.iter().map(|t| t.ap)),
            ap50: per_threshold[self.t50].ap,
            per_category,
            per_threshold,
        }
    }
}

/// Ranked entry of a global per-(threshold, category) stream.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    score: f64,
    det_id: u64,
    image: u32,
    tp: bool,
}

/// Global rank order: score descending, then image, then detection.
#[inline]
fn rank(a: &Entry, b: &Entry) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image.cmp(&b.image))
        .then(a.det_id.cmp(&b.det_id))
}

fn check_images(set: &ShiftedPredictionSet, gt: &GroundTruth) -> Result<()> {
    if set.image_ids().is_empty() {
        return Err(Error::EmptyImageSet);
    }
    if set.image_ids().len() != gt.images.len() || set.image_ids().iter().zip(&gt.images).any(|(a, b)| *a != b.id) {
        return Err(Error::InvalidConfig(
            "prediction set and ground truth cover different images".into(),
        ));
    }
    Ok(())
}

fn shift_indices(selection: &ShiftAssignment, set: &ShiftedPredictionSet) -> Result<Vec<usize>> {
    let grid = set.grid();
    set.image_ids()
        .iter()
        .map(|&image_id| {
            let shift = selection.get(image_id).ok_or(Error::IncompleteAssignment { image_id })?;
            grid.index_of(shift).ok_or(Error::OutsideGrid {
                shift,
                max_shift: grid.max_shift,
            })
        })
        .collect()
}

/// AP from per-image match results (images in ascending id order), by
/// concatenating and fully sorting every (threshold, category) stream.
pub fn ap_from_matches(matches: &[&ImageMatchResult], categories: &[u64], config: &EvalConfig) -> ApResult {
    let reducer = Reducer::new(config, categories.to_vec());
    let recall = config.recall_thresholds();
    let n_cat = categories.len();
    let n_thr = config.iou_thresholds.len();
    let mut streams: Vec<Vec<Entry>> = vec![Vec::new(); n_thr * n_cat];
    let mut num_gt = vec![0usize; n_cat];
    for (image, m) in matches.iter().enumerate() {
        for cm in &m.categories {
            let Ok(c) = categories.binary_search(&cm.category_id) else {
                continue;
            };
            num_gt[c] += cm.num_gt;
            for (t, outcomes) in cm.outcomes.iter().enumerate() {
                for (d, outcome) in cm.detections.iter().zip(outcomes) {
                    if *outcome == MatchOutcome::Ignored {
                        continue;
                    }
                    streams[t * n_cat + c].push(Entry {
                        score: d.score,
                        det_id: d.det_id,
                        image: image as u32,
                        tp: matches!(outcome, MatchOutcome::TruePositive { .. }),
                    });
                }
            }
        }
    }
    let ap: Vec<f64> = streams
        .iter_mut()
        .enumerate()
        .map(|(tc, s)| {
            s.sort_by(rank);
            average_precision(s.iter().map(|e| e.tp), num_gt[tc % n_cat], &recall)
        })
        .collect();
    reducer.summarize(|t, c| ap[t * n_cat + c])
}

/// Full, non-incremental AP of one shift assignment: matches every selected
/// cell from scratch.
pub fn compute_ap(
    selection: &ShiftAssignment,
    set: &ShiftedPredictionSet,
    gt: &GroundTruth,
    config: &EvalConfig,
) -> Result<ApResult> {
    config.validate()?;
    check_images(set, gt)?;
    let shifts = shift_indices(selection, set)?;
    let gt_by_image = gt.by_image();
    let matches: Vec<ImageMatchResult> = set
        .image_ids()
        .iter()
        .zip(&shifts)
        .enumerate()
        .map(|(i, (&image_id, &s))| match_image(image_id, set.cell_at(i, s), &gt_by_image[&image_id], config))
        .collect();
    let refs: Vec<&ImageMatchResult> = matches.iter().collect();
    Ok(ap_from_matches(&refs, &gt.category_ids(), config))
}

#[derive(Debug, Clone, Copy)]
struct CellEntry {
    score: f64,
    det_id: u64,
    tp: bool,
}

impl CellEntry {
    fn at(&self, image: usize) -> Entry {
        Entry {
            score: self.score,
            det_id: self.det_id,
            image: image as u32,
            tp: self.tp,
        }
    }
}

#[derive(Debug, Clone)]
struct CellCategory {
    category: usize,
    /// `ranked[threshold]`, non-ignored detections in rank order.
    ranked: Vec<Vec<CellEntry>>,
}

#[derive(Debug, Clone, Default)]
struct Cell {
    /// Sorted by category index.
    categories: Vec<CellCategory>,
}

impl Cell {
    fn from_match(m: &ImageMatchResult, categories: &[u64]) -> Self {
        let categories = m
            .categories
            .iter()
            .filter_map(|cm| {
                let category = categories.binary_search(&cm.category_id).ok()?;
                let ranked = cm
                    .outcomes
                    .iter()
                    .map(|outcomes| {
                        cm.detections
                            .iter()
                            .zip(outcomes)
                            .filter(|(_, o)| **o != MatchOutcome::Ignored)
                            .map(|(d, o)| CellEntry {
                                score: d.score,
                                det_id: d.det_id,
                                tp: matches!(o, MatchOutcome::TruePositive { .. }),
                            })
                            .collect()
                    })
                    .collect();
                Some(CellCategory { category, ranked })
            })
            .collect();
        Cell { categories }
    }

    fn ranked(&self, category: usize, threshold: usize) -> &[CellEntry] {
        match self.categories.binary_search_by_key(&category, |c| c.category) {
            Ok(k) => &self.categories[k].ranked[threshold],
            Err(_) => &[],
        }
    }
}

/// A ranked stream plus the 0-based positions of its true positives.
#[derive(Debug, Clone)]
struct Stream {
    entries: Vec<Entry>,
    tp_positions: Vec<usize>,
}

impl Stream {
    fn new(entries: Vec<Entry>) -> Self {
        let tp_positions = entries.iter().enumerate().filter(|(_, e)| e.tp).map(|(q, _)| q).collect();
        Stream { entries, tp_positions }
    }

    fn position(&self, e: &Entry) -> usize {
        self.entries
            .binary_search_by(|s| rank(s, e))
            .expect("entry of the current assignment is in its stream")
    }

    /// Number of entries ranked before `e`.
    fn insertion_point(&self, e: &Entry) -> usize {
        self.entries.partition_point(|s| rank(s, e) == Ordering::Less)
    }
}

/// For each recall threshold, the smallest true-positive count whose recall
/// reaches it, as the curve computes recall.
fn recall_ranks(num_gt: usize, recall: &[f64]) -> Vec<usize> {
    let g = num_gt as f64;
    let mut k = 1;
    recall
        .iter()
        .map(|&r| {
            while k <= num_gt && (k as f64) / g < r {
                k += 1;
            }
            k
        })
        .collect()
}

/// AP of a stream after deleting the entries at `removed` positions and
/// inserting `inserted` entries before the given positions, computed from
/// the true-positive positions of the original stream alone. Both edit
/// lists are sorted by position.
///
/// Produces the same floating-point value as running [`Curve`] over the
/// edited stream: every precision is the same integer ratio, the envelope is
/// a maximum, and the recall samples are summed in the same order.
fn swapped_curve_ap(
    tp_positions: &[usize],
    removed: &[(usize, bool)],
    inserted: &[(usize, bool)],
    recall_ranks: &[usize],
    n_recall: usize,
) -> f64 {
    let removed_tp = removed.iter().filter(|r| r.1).count();
    let inserted_tp = inserted.iter().filter(|r| r.1).count();
    let total_tp = tp_positions.len() + inserted_tp - removed_tp;
    let sampled = recall_ranks.partition_point(|&k| k <= total_tp);
    let mut samples = [0.0f64; 128];
    let mut samples_heap = Vec::new();
    let samples: &mut [f64] = if sampled <= samples.len() {
        &mut samples[..sampled]
    } else {
        samples_heap.resize(sampled, 0.0);
        &mut samples_heap
    };

    let mut pending = sampled;
    let mut next_rank = if pending > 0 { recall_ranks[pending - 1] } else { 0 };
    let mut envelope = 0.0f64;
    let mut j = total_tp;
    let mut emit = |position: usize, j: usize| {
        let precision = j as f64 / position as f64;
        if precision > envelope {
            envelope = precision;
        }
        while j == next_rank && pending > 0 {
            samples[pending - 1] = envelope;
            pending -= 1;
            next_rank = if pending > 0 { recall_ranks[pending - 1] } else { 0 };
        }
    };

    // Walk backwards through segments of the original stream in which the
    // number of edits before each position is constant.
    let mut idx = tp_positions.len();
    let mut del = removed.len();
    let mut ins = inserted.len();
    loop {
        let lower = match (ins, del) {
            (0, 0) => 0,
            (0, d) => removed[d - 1].0 + 1,
            (i, 0) => inserted[i - 1].0,
            (i, d) => inserted[i - 1].0.max(removed[d - 1].0 + 1),
        };
        while idx > 0 && tp_positions[idx - 1] >= lower {
            emit(tp_positions[idx - 1] + 1 + ins - del, j);
            j -= 1;
            idx -= 1;
        }
        if ins == 0 && del == 0 {
            break;
        }
        while ins > 0 && inserted[ins - 1].0 == lower {
            let u = ins - 1;
            if inserted[u].1 {
                emit(lower - del + u + 1, j);
                j -= 1;
            }
            ins -= 1;
        }
        while del > 0 && removed[del - 1].0 + 1 == lower {
            if idx > 0 && tp_positions[idx - 1] == removed[del - 1].0 {
                idx -= 1;
            }
            del -= 1;
        }
    }
    debug_assert_eq!(j, 0);

    let mut sum = 0.0;
    for &v in samples.iter() {
        sum += v;
    }
    sum / n_recall as f64
}

/// Assignment-independent matching of every `(image, shift)` cell.
#[derive(Debug, Clone)]
pub struct MatchTable {
    reducer: Reducer,
    recall: Vec<f64>,
    /// Per category, the true-positive count at which each recall
    /// threshold is first reached.
    recall_ranks: Vec<Vec<usize>>,
    grid: ShiftGrid,
    image_ids: Vec<u64>,
    num_gt: Vec<usize>,
    /// `cells[image * grid.len() + shift]`
    cells: Vec<Cell>,
}

impl MatchTable {
    pub fn build(set: &ShiftedPredictionSet, gt: &GroundTruth, config: &EvalConfig) -> Result<Arc<Self>> {
        config.validate()?;
        check_images(set, gt)?;
        let categories = gt.category_ids();
        let gt_by_image = gt.by_image();
        let grid = set.grid();
        let n_shifts = grid.len();
        let image_ids = set.image_ids().to_vec();

        let mut num_gt = vec![0usize; categories.len()];
        for ann in &gt.annotations {
            if !(ann.ignore || config.area_ignored(ann.area)) {
                if let Ok(c) = categories.binary_search(&ann.category_id) {
                    num_gt[c] += 1;
                }
            }
        }

        let cells = par::map_range(image_ids.len() * n_shifts, |slot| {
            let (i, s) = (slot / n_shifts, slot % n_shifts);
            let image_id = image_ids[i];
            let m = match_image(image_id, set.cell_at(i, s), &gt_by_image[&image_id], config);
            Cell::from_match(&m, &categories)
        });

        let recall = config.recall_thresholds();
        let recall_ranks = num_gt.iter().map(|&g| recall_ranks(g, &recall)).collect();
        Ok(Arc::new(MatchTable {
            reducer: Reducer::new(config, categories),
            recall,
            recall_ranks,
            grid,
            image_ids,
            num_gt,
            cells,
        }))
    }

    pub fn grid(&self) -> ShiftGrid {
        self.grid
    }

    pub fn image_ids(&self) -> &[u64] {
        &self.image_ids
    }

    pub fn num_images(&self) -> usize {
        self.image_ids.len()
    }

    fn n_cat(&self) -> usize {
        self.reducer.categories.len()
    }

    fn cell(&self, image: usize, shift: usize) -> &Cell {
        &self.cells[image * self.grid.len() + shift]
    }

    fn image_index(&self, image_id: u64) -> Result<usize> {
        self.image_ids
            .binary_search(&image_id)
            .map_err(|_| Error::UnknownImage { image_id })
    }

    fn shift_index(&self, shift: Shift) -> Result<usize> {
        self.grid.index_of(shift).ok_or(Error::OutsideGrid {
            shift,
            max_shift: self.grid.max_shift,
        })
    }
}

/// Incremental evaluator for one working assignment.
///
/// Queries ([`EvalCache::swap_and_eval`], [`EvalCache::swap_objective`]) take
/// `&self` and may run concurrently; [`EvalCache::commit_swap`] needs
/// `&mut self`, so no query can observe a half-applied commit.
#[derive(Debug, Clone)]
pub struct EvalCache {
    table: Arc<MatchTable>,
    assignment: Vec<usize>,
    /// `streams[threshold * n_cat + category]` for the current assignment.
    streams: Vec<Stream>,
    ap: Vec<f64>,
    /// Threshold rows whose streams lag behind `assignment`.
    stale: Vec<bool>,
}

impl EvalCache {
    /// Matches every cell and starts from the all-`(0, 0)` assignment.
    pub fn build(set: &ShiftedPredictionSet, gt: &GroundTruth, config: &EvalConfig) -> Result<Self> {
        Ok(Self::new(MatchTable::build(set, gt, config)?))
    }

    /// A cache over a shared table, starting from the all-`(0, 0)` assignment.
    pub fn new(table: Arc<MatchTable>) -> Self {
        let assignment = vec![0; table.num_images()];
        Self::from_indices(table, assignment)
    }

    pub fn with_assignment(table: Arc<MatchTable>, assignment: &ShiftAssignment) -> Result<Self> {
        let indices = table
            .image_ids
            .iter()
            .map(|&image_id| {
                let s = assignment.get(image_id).ok_or(Error::IncompleteAssignment { image_id })?;
                table.shift_index(s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_indices(table, indices))
    }

    fn from_indices(table: Arc<MatchTable>, assignment: Vec<usize>) -> Self {
        let n_cat = table.n_cat();
        let n_thr = table.reducer.thresholds.len();
        let mut entries: Vec<Vec<Entry>> = vec![Vec::new(); n_thr * n_cat];
        for (i, &s) in assignment.iter().enumerate() {
            for cc in &table.cell(i, s).categories {
                for (t, ranked) in cc.ranked.iter().enumerate() {
                    entries[t * n_cat + cc.category].extend(ranked.iter().map(|e| e.at(i)));
                }
            }
        }
        let streams: Vec<Stream> = entries
            .into_iter()
            .map(|mut e| {
                e.sort_by(rank);
                Stream::new(e)
            })
            .collect();
        let ap = streams
            .iter()
            .enumerate()
            .map(|(tc, s)| average_precision(s.entries.iter().map(|e| e.tp), table.num_gt[tc % n_cat], &table.recall))
            .collect();
        EvalCache {
            table,
            assignment,
            streams,
            ap,
            stale: vec![false; n_thr],
        }
    }

    pub fn table(&self) -> &Arc<MatchTable> {
        &self.table
    }

    pub fn assignment(&self) -> ShiftAssignment {
        self.table
            .image_ids
            .iter()
            .zip(&self.assignment)
            .map(|(&id, &s)| (id, self.table.grid.shift_at(s)))
            .collect()
    }

    pub(crate) fn shift_index_of(&self, image: usize) -> usize {
        self.assignment[image]
    }

    pub fn current(&self) -> ApResult {
        debug_assert!(!self.stale.contains(&true));
        let n_cat = self.table.n_cat();
        self.table.reducer.summarize(|t, c| self.ap[t * n_cat + c])
    }

    pub fn current_objective(&self, objective: Objective) -> f64 {
        let n_cat = self.table.n_cat();
        self.table.reducer.objective(objective, |t, c| self.ap[t * n_cat + c])
    }

    /// Categories the swapped image contributes to, before or after the swap.
    fn affected(&self, image: usize, shift: usize) -> Vec<usize> {
        let cur = self.table.cell(image, self.assignment[image]);
        let cand = self.table.cell(image, shift);
        let mut cats: Vec<usize> = cur
            .categories
            .iter()
            .chain(&cand.categories)
            .map(|c| c.category)
            .collect();
        cats.sort_unstable();
        cats.dedup();
        cats
    }

    /// AP of stream `(t, c)` with `image`'s entries replaced by `shift`'s.
    fn swapped_ap(&self, t: usize, c: usize, image: usize, shift: usize) -> f64 {
        let num_gt = self.table.num_gt[c];
        if num_gt == 0 {
            return NO_GROUND_TRUTH;
        }
        let stream = &self.streams[t * self.table.n_cat() + c];
        let outgoing = self.table.cell(image, self.assignment[image]).ranked(c, t);
        let incoming = self.table.cell(image, shift).ranked(c, t);
        let removed: Vec<(usize, bool)> = outgoing
            .iter()
            .map(|e| (stream.position(&e.at(image)), e.tp))
            .collect();
        let inserted: Vec<(usize, bool)> = incoming
            .iter()
            .map(|e| (stream.insertion_point(&e.at(image)), e.tp))
            .collect();
        swapped_curve_ap(
            &stream.tp_positions,
            &removed,
            &inserted,
            &self.table.recall_ranks[c],
            self.table.recall.len(),
        )
    }

    /// `(t, c) -> AP` overrides for a hypothetical swap, restricted to `rows`.
    fn swapped_overrides(&self, image: usize, shift: usize, rows: std::ops::Range<usize>) -> Vec<(usize, f64)> {
        let n_cat = self.table.n_cat();
        let cats = self.affected(image, shift);
        rows.flat_map(|t| cats.iter().map(move |&c| (t, c)))
            .map(|(t, c)| (t * n_cat + c, self.swapped_ap(t, c, image, shift)))
            .collect()
    }

    fn lookup<'a>(&'a self, overrides: &'a [(usize, f64)]) -> impl Fn(usize, usize) -> f64 + 'a {
        let n_cat = self.table.n_cat();
        move |t, c| {
            let tc = t * n_cat + c;
            overrides
                .iter()
                .find(|(k, _)| *k == tc)
                .map_or(self.ap[tc], |&(_, v)| v)
        }
    }

    /// Objective after replacing `image`'s shift, by index. Pure query.
    pub(crate) fn swap_objective_at(&self, image: usize, shift: usize, objective: Objective) -> f64 {
        if shift == self.assignment[image] {
            return self.current_objective(objective);
        }
        let overrides = self.swapped_overrides(image, shift, self.table.reducer.rows(objective));
        self.table.reducer.objective(objective, self.lookup(&overrides))
    }

    /// Objective after replacing one image's shift; the cache is unchanged.
    pub fn swap_objective(&self, image_id: u64, shift: Shift, objective: Objective) -> Result<f64> {
        let image = self.table.image_index(image_id)?;
        let s = self.table.shift_index(shift)?;
        Ok(self.swap_objective_at(image, s, objective))
    }

    /// Full result after replacing one image's shift; the cache is unchanged.
    /// Bit-identical to [`compute_ap`] on the swapped assignment.
    pub fn swap_and_eval(&self, image_id: u64, shift: Shift) -> Result<ApResult> {
        debug_assert!(!self.stale.contains(&true));
        let image = self.table.image_index(image_id)?;
        let s = self.table.shift_index(shift)?;
        if s == self.assignment[image] {
            return Ok(self.current());
        }
        let overrides = self.swapped_overrides(image, s, 0..self.table.reducer.thresholds.len());
        Ok(self.table.reducer.summarize(self.lookup(&overrides)))
    }

    pub(crate) fn commit_at(&mut self, image: usize, shift: usize) {
        self.refresh();
        self.commit_rows(image, shift, 0..self.table.reducer.thresholds.len());
    }

    /// Commits a swap for the threshold rows in `rows` only and marks the
    /// others stale. Queries on `rows` stay exact; call
    /// [`EvalCache::refresh`] before anything else.
    pub(crate) fn commit_rows(&mut self, image: usize, shift: usize, rows: std::ops::Range<usize>) {
        if shift == self.assignment[image] {
            return;
        }
        let n_cat = self.table.n_cat();
        let cats = self.affected(image, shift);
        let outgoing = self.table.cell(image, self.assignment[image]);
        let cell = self.table.cell(image, shift);
        for (t, stale) in self.stale.iter_mut().enumerate() {
            if !rows.contains(&t) {
                *stale = true;
            }
        }
        for t in rows {
            for &c in &cats {
                let tc = t * n_cat + c;
                let stream = &self.streams[tc];
                let removed: Vec<(usize, bool)> = outgoing
                    .ranked(c, t)
                    .iter()
                    .map(|e| (stream.position(&e.at(image)), e.tp))
                    .collect();
                let incoming: Vec<Entry> = cell.ranked(c, t).iter().map(|e| e.at(image)).collect();
                let inserted: Vec<(usize, bool)> = incoming.iter().map(|e| (stream.insertion_point(e), e.tp)).collect();
                if self.table.num_gt[c] > 0 {
                    self.ap[tc] = swapped_curve_ap(
                        &stream.tp_positions,
                        &removed,
                        &inserted,
                        &self.table.recall_ranks[c],
                        self.table.recall.len(),
                    );
                }
                let old = &stream.entries;
                let mut merged = Vec::with_capacity(old.len() + incoming.len() - removed.len());
                let (mut r, mut k, mut from) = (0, 0, 0);
                loop {
                    let next_removed = removed.get(r).map_or(usize::MAX, |x| x.0);
                    let next_inserted = inserted.get(k).map_or(usize::MAX, |x| x.0);
                    let until = next_removed.min(next_inserted).min(old.len());
                    merged.extend_from_slice(&old[from..until]);
                    from = until;
                    if next_inserted <= next_removed && next_inserted != usize::MAX {
                        merged.push(incoming[k]);
                        k += 1;
                    } else if next_removed != usize::MAX {
                        from = next_removed + 1;
                        r += 1;
                    } else {
                        break;
                    }
                }
                merged.extend_from_slice(&old[from..]);
                self.streams[tc] = Stream::new(merged);
            }
        }
        self.assignment[image] = shift;
    }

    /// Commit that keeps only the rows `objective` reads up to date.
    pub(crate) fn commit_for(&mut self, image: usize, shift: usize, objective: Objective) {
        let rows = self.table.reducer.rows(objective);
        self.commit_rows(image, shift, rows);
    }

    /// Rebuilds threshold rows left stale by [`EvalCache::commit_rows`].
    pub(crate) fn refresh(&mut self) {
        if !self.stale.contains(&true) {
            return;
        }
        let fresh = Self::from_indices(Arc::clone(&self.table), self.assignment.clone());
        let n_cat = self.table.n_cat();
        for (t, stale) in self.stale.iter_mut().enumerate() {
            if std::mem::take(stale) {
                for c in 0..n_cat {
                    self.streams[t * n_cat + c] = fresh.streams[t * n_cat + c].clone();
                    self.ap[t * n_cat + c] = fresh.ap[t * n_cat + c];
                }
            }
        }
    }

    /// Makes `shift` the working shift of `image_id`.
    pub fn commit_swap(&mut self, image_id: u64, shift: Shift) -> Result<()> {
        let image = self.table.image_index(image_id)?;
        let s = self.table.shift_index(shift)?;
        self.commit_at(image, s);
        Ok(())
    }
}
