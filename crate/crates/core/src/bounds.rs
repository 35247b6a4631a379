//! Best- and worst-case AP over per-image shift assignments.
//!
//! AP ranks detections of all images jointly, so the best shift of one image
//! depends on the shifts of all others and the exact optimum needs
//! `((M + 1)^2)^N` evaluations. The greedy search fixes every image but one,
//! tries each shift for that image, keeps the best, and moves on; one sweep
//! costs `(M + 1)^2 * N` evaluations. The exhaustive search is kept as an
//! oracle for small instances.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{GroundTruth, ShiftedPredictionSet};
use crate::error::{Error, Result};
use crate::evaluator::{ap_from_matches, match_image, ApResult, EvalCache, EvalConfig, ImageMatchResult, MatchTable};
pub use crate::evaluator::Objective;
use crate::geometry::Shift;
use crate::par;

/// One shift per image.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ShiftAssignment(BTreeMap<u64, Shift>);

impl ShiftAssignment {
    pub fn uniform(image_ids: &[u64], shift: Shift) -> Self {
        image_ids.iter().map(|&id| (id, shift)).collect()
    }

    pub fn get(&self, image_id: u64) -> Option<Shift> {
        self.0.get(&image_id).copied()
    }

    pub fn set(&mut self, image_id: u64, shift: Shift) {
        self.0.insert(image_id, shift);
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Entries in ascending image id order.
    pub fn iter(&self) -> impl Iterator<Item = (u64, Shift)> + '_ {
        self.0.iter().map(|(&k, &v)| (k, v))
    }

    /// Shifts in ascending image id order.
    pub fn shifts(&self) -> Vec<Shift> {
        self.0.values().copied().collect()
    }
}

impl FromIterator<(u64, Shift)> for ShiftAssignment {
    fn from_iter<I: IntoIterator<Item = (u64, Shift)>>(iter: I) -> Self {
        ShiftAssignment(iter.into_iter().collect())
    }
}

#[derive(Serialize, Deserialize)]
struct AssignmentEntry {
    image_id: u64,
    shift: Shift,
}

impl Serialize for ShiftAssignment {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_seq(self.iter().map(|(image_id, shift)| AssignmentEntry { image_id, shift }))
    }
}

impl<'de> Deserialize<'de> for ShiftAssignment {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let entries = Vec::<AssignmentEntry>::deserialize(deserializer)?;
        Ok(entries.into_iter().map(|e| (e.image_id, e.shift)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Maximize,
    Minimize,
}

impl Direction {
    fn improves(self, candidate: f64, incumbent: f64) -> bool {
        match self {
            Direction::Maximize => candidate > incumbent,
            Direction::Minimize => candidate < incumbent,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GreedyConfig {
    /// Full sweeps over the image set (`K`).
    pub iterations: usize,
    pub objective: Objective,
    pub direction: Direction,
    /// Stop before `iterations` once a sweep changes no shift.
    pub stop_when_stable: bool,
}

impl Default for GreedyConfig {
    fn default() -> Self {
        GreedyConfig {
            iterations: 1,
            objective: Objective::Ap50,
            direction: Direction::Maximize,
            stop_when_stable: false,
        }
    }
}

impl GreedyConfig {
    pub fn maximize() -> Self {
        GreedyConfig::default()
    }

    pub fn minimize() -> Self {
        GreedyConfig {
            direction: Direction::Minimize,
            ..GreedyConfig::default()
        }
    }

    pub fn with_iterations(mut self, iterations: usize) -> Self {
        self.iterations = iterations;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyOutcome {
    pub direction: Direction,
    pub result: ApResult,
    pub assignment: ShiftAssignment,
    /// Candidate evaluations performed.
    pub eval_count: u64,
    pub iterations_run: usize,
    /// Objective at the start and after each sweep.
    pub objective_history: Vec<f64>,
    /// Images whose shift changed, per sweep.
    pub changes_per_iteration: Vec<usize>,
}

/// Picks the winning shift index: the incumbent if it ties the best value,
/// otherwise the smallest shift reaching it.
fn select(values: &[f64], incumbent: usize, direction: Direction) -> usize {
    let mut best = values[0];
    for &v in &values[1..] {
        if direction.improves(v, best) {
            best = v;
        }
    }
    if values[incumbent] == best {
        incumbent
    } else {
        values.iter().position(|&v| v == best).expect("best is one of the values")
    }
}

/// Greedy coordinate search on an already matched table, starting from the
/// all-`(0, 0)` assignment and visiting images in ascending id order.
pub fn greedy_on_table(table: &Arc<MatchTable>, config: &GreedyConfig) -> Result<GreedyOutcome> {
    greedy_with_observer(table, config, |_, _| {})
}

/// As [`greedy_on_table`], calling `observe(image_index, objective)` after
/// every per-image decision.
pub fn greedy_with_observer(
    table: &Arc<MatchTable>,
    config: &GreedyConfig,
    mut observe: impl FnMut(usize, f64),
) -> Result<GreedyOutcome> {
    if config.iterations == 0 {
        return Err(Error::InvalidConfig("greedy search needs at least one iteration".into()));
    }
    if table.num_images() == 0 {
        return Err(Error::EmptyImageSet);
    }
    let n_shifts = table.grid().len();
    let mut cache = EvalCache::new(Arc::clone(table));
    let mut history = vec![cache.current_objective(config.objective)];
    let mut changes_per_iteration = Vec::new();
    let mut eval_count = 0u64;

    for _ in 0..config.iterations {
        let mut changes = 0;
        for image in 0..table.num_images() {
            let values = par::map_range(n_shifts, |s| cache.swap_objective_at(image, s, config.objective));
            eval_count += n_shifts as u64;
            let incumbent = cache.shift_index_of(image);
            let chosen = select(&values, incumbent, config.direction);
            if chosen != incumbent {
                cache.commit_for(image, chosen, config.objective);
                changes += 1;
            }
            observe(image, values[chosen]);
        }
        history.push(cache.current_objective(config.objective));
        changes_per_iteration.push(changes);
        if config.stop_when_stable && changes == 0 {
            break;
        }
    }

    cache.refresh();
    Ok(GreedyOutcome {
        direction: config.direction,
        result: cache.current(),
        assignment: cache.assignment(),
        eval_count,
        iterations_run: changes_per_iteration.len(),
        objective_history: history,
        changes_per_iteration,
    })
}

/// Greedy approximation of the best (or worst) achievable AP.
pub fn greedy_bounds(
    set: &ShiftedPredictionSet,
    gt: &GroundTruth,
    eval_config: &EvalConfig,
    config: &GreedyConfig,
) -> Result<GreedyOutcome> {
    let table = MatchTable::build(set, gt, eval_config)?;
    greedy_on_table(&table, config)
}

/// Both greedy directions plus the unshifted baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsResult {
    pub baseline: ApResult,
    pub ap_best: ApResult,
    pub ap_worst: ApResult,
    pub assignment_best: ShiftAssignment,
    pub assignment_worst: ShiftAssignment,
    pub delta_ap: f64,
    pub delta_ap50: f64,
    /// Candidate evaluations of one direction, `K * (M + 1)^2 * N`.
    pub eval_count: u64,
    pub eval_count_worst: u64,
    pub iterations_run: usize,
    pub objective_history_best: Vec<f64>,
    pub objective_history_worst: Vec<f64>,
}

impl BoundsResult {
    fn from_outcomes(baseline: ApResult, best: GreedyOutcome, worst: GreedyOutcome) -> Self {
        let (delta_ap, delta_ap50) = delta_ap(&best.result, &worst.result);
        BoundsResult {
            baseline,
            delta_ap,
            delta_ap50,
            eval_count: best.eval_count,
            eval_count_worst: worst.eval_count,
            iterations_run: best.iterations_run.max(worst.iterations_run),
            ap_best: best.result,
            ap_worst: worst.result,
            assignment_best: best.assignment,
            assignment_worst: worst.assignment,
            objective_history_best: best.objective_history,
            objective_history_worst: worst.objective_history,
        }
    }
}

#[cfg(feature = "parallel")]
fn join<A: Send, B: Send>(a: impl FnOnce() -> A + Send, b: impl FnOnce() -> B + Send) -> (A, B) {
    rayon::join(a, b)
}

#[cfg(not(feature = "parallel"))]
fn join<A, B>(a: impl FnOnce() -> A, b: impl FnOnce() -> B) -> (A, B) {
    (a(), b())
}

/// Runs the greedy search in both directions, each from the all-`(0, 0)`
/// assignment on its own cache. `config.direction` is ignored.
pub fn bounds_on_table(table: &Arc<MatchTable>, config: &GreedyConfig) -> Result<BoundsResult> {
    let baseline = EvalCache::new(Arc::clone(table)).current();
    let max = GreedyConfig {
        direction: Direction::Maximize,
        ..*config
    };
    let min = GreedyConfig {
        direction: Direction::Minimize,
        ..*config
    };
    let (best, worst) = join(|| greedy_on_table(table, &max), || greedy_on_table(table, &min));
    Ok(BoundsResult::from_outcomes(baseline, best?, worst?))
}

pub fn compute_bounds(
    set: &ShiftedPredictionSet,
    gt: &GroundTruth,
    eval_config: &EvalConfig,
    config: &GreedyConfig,
) -> Result<BoundsResult> {
    let table = MatchTable::build(set, gt, eval_config)?;
    bounds_on_table(&table, config)
}

/// `(best.ap - worst.ap, best.ap50 - worst.ap50)`.
pub fn delta_ap(best: &ApResult, worst: &ApResult) -> (f64, f64) {
    (best.ap - worst.ap, best.ap50 - worst.ap50)
}

pub const DEFAULT_ENUMERATION_CAP: u64 = 1_000_000;

/// Exact optimum in both directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExhaustiveOutcome {
    pub best: ApResult,
    pub best_assignment: ShiftAssignment,
    pub worst: ApResult,
    pub worst_assignment: ShiftAssignment,
    pub assignments_evaluated: u64,
}

/// Number of assignments, or `None` when it overflows `u64`.
pub fn assignment_count(num_images: usize, grid_len: usize) -> Option<u64> {
    (grid_len as u64).checked_pow(u32::try_from(num_images).ok()?)
}

/// Enumerates every assignment, evaluating each from scratch (full sort of
/// every stream, no incremental state). Ties resolve to the
/// lexicographically smallest assignment in `(image id, (dy, dx))` order.
pub fn exhaustive_bounds(
    set: &ShiftedPredictionSet,
    gt: &GroundTruth,
    eval_config: &EvalConfig,
    objective: Objective,
    cap: u64,
) -> Result<ExhaustiveOutcome> {
    eval_config.validate()?;
    let n = set.num_images();
    if n == 0 {
        return Err(Error::EmptyImageSet);
    }
    let grid = set.grid();
    let n_shifts = grid.len();
    let total = match assignment_count(n, n_shifts) {
        Some(t) if t <= cap => t,
        _ => {
            return Err(Error::InstanceTooLarge {
                assignments: (n_shifts as f64).powi(n as i32),
                cap,
            })
        }
    };
    if gt.images.iter().map(|i| i.id).ne(set.image_ids().iter().copied()) {
        return Err(Error::InvalidConfig(
            "prediction set and ground truth cover different images".into(),
        ));
    }

    let gt_by_image = gt.by_image();
    let categories = gt.category_ids();
    let matches: Vec<ImageMatchResult> = (0..n * n_shifts)
        .map(|slot| {
            let (i, s) = (slot / n_shifts, slot % n_shifts);
            let id = set.image_ids()[i];
            match_image(id, set.cell_at(i, s), &gt_by_image[&id], eval_config)
        })
        .collect();

    let mut digits = vec![0usize; n];
    let mut best: Option<(f64, ApResult, Vec<usize>)> = None;
    let mut worst: Option<(f64, ApResult, Vec<usize>)> = None;
    for _ in 0..total {
        let selected: Vec<&ImageMatchResult> = digits.iter().enumerate().map(|(i, &s)| &matches[i * n_shifts + s]).collect();
        let result = ap_from_matches(&selected, &categories, eval_config);
        let value = objective.of(&result);
        if best.as_ref().is_none_or(|(v, ..)| value > *v) {
            best = Some((value, result.clone(), digits.clone()));
        }
        if worst.as_ref().is_none_or(|(v, ..)| value < *v) {
            worst = Some((value, result, digits.clone()));
        }
        for d in digits.iter_mut().rev() {
            *d += 1;
            if *d < n_shifts {
                break;
            }
            *d = 0;
        }
    }

    let to_assignment = |digits: &[usize]| -> ShiftAssignment {
        set.image_ids()
            .iter()
            .zip(digits)
            .map(|(&id, &s)| (id, grid.shift_at(s)))
            .collect()
    };
    let (_, best, best_digits) = best.expect("at least one assignment");
    let (_, worst, worst_digits) = worst.expect("at least one assignment");
    Ok(ExhaustiveOutcome {
        best,
        best_assignment: to_assignment(&best_digits),
        worst,
        worst_assignment: to_assignment(&worst_digits),
        assignments_evaluated: total,
    })
}

/// Exact optimum of the AP50 objective in one direction.
pub fn brute_force_bounds(
    set: &ShiftedPredictionSet,
    gt: &GroundTruth,
    eval_config: &EvalConfig,
    direction: Direction,
    cap: u64,
) -> Result<(ApResult, ShiftAssignment)> {
    let out = exhaustive_bounds(set, gt, eval_config, Objective::Ap50, cap)?;
    Ok(match direction {
        Direction::Maximize => (out.best, out.best_assignment),
        Direction::Minimize => (out.worst, out.worst_assignment),
    })
}

/// How each row of a sweep searches for its bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SweepSearch {
    Greedy(GreedyConfig),
    Exhaustive { objective: Objective, cap: u64 },
}

/// One row of a shift-range sweep. For `max_shift == 0` only the baseline is
/// meaningful and best, worst and deltas collapse onto it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub max_shift: u32,
    pub baseline_ap: f64,
    pub baseline_ap50: f64,
    pub worst_ap: f64,
    pub best_ap: f64,
    pub delta_ap: f64,
    pub worst_ap50: f64,
    pub best_ap50: f64,
    pub delta_ap50: f64,
    pub eval_count: u64,
}

impl SweepRow {
    /// Differences to the baseline: `[worst AP, best AP, worst AP50, best AP50]`.
    pub fn baseline_differences(&self) -> [f64; 4] {
        [
            self.worst_ap - self.baseline_ap,
            self.best_ap - self.baseline_ap,
            self.worst_ap50 - self.baseline_ap50,
            self.best_ap50 - self.baseline_ap50,
        ]
    }
}

fn sweep_row(set: &ShiftedPredictionSet, gt: &GroundTruth, eval_config: &EvalConfig, search: &SweepSearch) -> Result<SweepRow> {
    let max_shift = set.grid().max_shift;
    let (baseline, best, worst, eval_count) = match search {
        SweepSearch::Greedy(config) => {
            let b = compute_bounds(set, gt, eval_config, config)?;
            (b.baseline, b.ap_best, b.ap_worst, b.eval_count)
        }
        SweepSearch::Exhaustive { objective, cap } => {
            let out = exhaustive_bounds(set, gt, eval_config, *objective, *cap)?;
            let baseline = crate::evaluator::compute_ap(
                &ShiftAssignment::uniform(set.image_ids(), Shift::ZERO),
                set,
                gt,
                eval_config,
            )?;
            (baseline, out.best, out.worst, out.assignments_evaluated)
        }
    };
    let (delta_ap, delta_ap50) = delta_ap(&best, &worst);
    Ok(SweepRow {
        max_shift,
        baseline_ap: baseline.ap,
        baseline_ap50: baseline.ap50,
        worst_ap: worst.ap,
        best_ap: best.ap,
        delta_ap,
        worst_ap50: worst.ap50,
        best_ap50: best.ap50,
        delta_ap50,
        eval_count,
    })
}

/// Bounds for each requested maximum shift. `sets` must hold a prediction
/// set for every requested `M`; the `M = 0` row may instead be derived from
/// any available set, since it only uses the `(0, 0)` cells.
pub fn sweep_shift_range(
    sets: &BTreeMap<u32, ShiftedPredictionSet>,
    gt: &GroundTruth,
    eval_config: &EvalConfig,
    search: &SweepSearch,
    max_shifts: &[u32],
) -> Result<Vec<SweepRow>> {
    let mut shifts = max_shifts.to_vec();
    shifts.sort_unstable();
    shifts.dedup();
    shifts
        .into_iter()
        .map(|m| {
            let row = match sets.get(&m) {
                Some(set) => sweep_row(set, gt, eval_config, search),
                None if m == 0 => {
                    let any = sets.values().next().ok_or(Error::MissingSweepSet { max_shift: 0 })?;
                    sweep_row(&any.restrict(0)?, gt, eval_config, search)
                }
                None => Err(Error::MissingSweepSet { max_shift: m }),
            }?;
            Ok(row)
        })
        .collect()
}
