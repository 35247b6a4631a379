//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any hard check fails. Empirical expectations that are not
//! meant to be fatal are reported on an indented line below their criterion.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shiftap::bounds::{bounds_on_table, exhaustive_bounds, greedy_on_table, DEFAULT_ENUMERATION_CAP};
use shiftap::evaluator::ap_from_matches;
use shiftap::report::{bounds_table, BOUNDS_HEADER};
use shiftap::simulate::{generate_dataset, DropProb, ObjectCount, SimConfig, SimulatedDataset};
use shiftap::tta::aggregated_set;
use shiftap::{
    compute_ap, iou, match_image, nms, tta_aggregate, ApResult, BBox, Category, Detection, Direction, EvalCache,
    EvalConfig, GreedyConfig, GroundTruth, GroundTruthAnnotation, ImageMatchResult, ImageRecord, MatchTable,
    NmsConfig, Objective, Shift, ShiftAssignment, ShiftGrid, ShiftedPredictionSet,
};

const CONFORMANCE_TOLERANCE: f64 = 1e-4;
const CONFORMANCE_BUDGET_S: f64 = 1.0;
const HAND_TOLERANCE: f64 = 1e-9;
const ORACLE_INSTANCES: u64 = 100;
const ORACLE_EXPECTED_EXACT: usize = 90;
const ORACLE_BUDGET_S: f64 = 120.0;
const K_CONVERGENCE_RATIO: f64 = 0.01;
const K_CONVERGENCE_BUDGET_S: f64 = 60.0;
const NESTING_INSTANCES: u64 = 20;
const NESTING_BUDGET_S: f64 = 120.0;
const INCREMENTAL_CASES: u64 = 1000;
const NMS_CASES: u64 = 1000;
const TTA_SEEDS: u64 = 50;
const TTA_MIN_WINS: usize = 45;
const PERF_IMAGES: usize = 5000;
const PERF_BUDGET_S: f64 = 120.0;
const NAIVE_IMAGES: usize = 500;

struct Check {
    pass: bool,
    detail: String,
    notes: Vec<String>,
}

impl Check {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Check {
            pass,
            detail: detail.into(),
            notes: Vec::new(),
        }
    }

    fn note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }
}

fn main() {
    let criteria: [(u8, &str, fn() -> Check); 12] = [
        (1, "published bounds table arithmetic", table_arithmetic),
        (2, "COCO protocol conformance", coco_conformance),
        (3, "hand-derived AP values", hand_derived_ap),
        (4, "greedy versus exhaustive oracle", greedy_versus_oracle),
        (5, "evaluation count", evaluation_count),
        (6, "convergence in iterations", iteration_convergence),
        (7, "oracle grid nesting", grid_nesting),
        (8, "shift-invariant detector", shift_invariance),
        (9, "incremental evaluator equivalence", incremental_equivalence),
        (10, "NMS and aggregation properties", nms_and_aggregation),
        (11, "performance budget", performance_budget),
        (12, "CLI determinism across thread counts", cli_determinism),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failures = 0;
    for (id, title, check) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|payload| {
            let msg = payload
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Check::new(false, format!("panicked: {msg}"))
        });
        let status = if outcome.pass { "PASS" } else { "FAIL" };
        println!(
            "[{status}] criterion {id:>2} {title}: {} ({:.2} s)",
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
        for note in &outcome.notes {
            println!("         {note}");
        }
        if !outcome.pass {
            failures += 1;
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}

fn ap(ap: f64, ap50: f64) -> ApResult {
    ApResult {
        ap,
        ap50,
        per_category: vec![],
        per_threshold: vec![],
    }
}

fn table_arithmetic() -> Check {
    // (method, AP, worst AP, best AP, AP50, worst AP50, best AP50), percent
    let published = [
        ("RetinaNet", 36.5, 35.3, 37.5, 56.7, 53.9, 59.0),
        ("FasterRCNN", 37.6, 36.5, 39.4, 59.0, 55.7, 62.1),
        ("CenterNet", 34.6, 32.9, 36.3, 53.0, 49.2, 57.3),
    ];
    let expected = format!(
        "{BOUNDS_HEADER}\n\
         RetinaNet,36.5,35.3/37.5,2.2,56.7,53.9/59.0,5.1\n\
         FasterRCNN,37.6,36.5/39.4,2.9,59.0,55.7/62.1,6.4\n\
         CenterNet,34.6,32.9/36.3,3.4,53.0,49.2/57.3,8.1\n"
    );
    let results: Vec<(&str, ApResult, ApResult, ApResult)> = published
        .iter()
        .map(|&(m, a, aw, ab, a50, a50w, a50b)| {
            (m, ap(a / 100.0, a50 / 100.0), ap(ab / 100.0, a50b / 100.0), ap(aw / 100.0, a50w / 100.0))
        })
        .collect();
    let table = bounds_table(results.iter().map(|(m, b, best, worst)| (*m, b, best, worst)));
    let pass = table == expected;
    Check::new(
        pass,
        if pass {
            "3 rows reproduced, e.g. RetinaNet delta AP 2.2 and delta AP50 5.1".to_string()
        } else {
            format!("got\n{table}")
        },
    )
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn shiftap() -> Command {
    Command::new(env!("CARGO_BIN_EXE_shiftap"))
}

fn coco_conformance() -> Check {
    let expected: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(fixture("conformance_expected.json")).unwrap()).unwrap();
    let start = Instant::now();
    let out = shiftap()
        .args(["--quiet", "eval", "--frame", "canonical", "--gt"])
        .arg(fixture("conformance_gt.json"))
        .arg("--pred")
        .arg(fixture("conformance_dets.json"))
        .output()
        .unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(out.status.success(), "eval failed: {}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let got_ap = report["results"]["ap"].as_f64().unwrap();
    let got_ap50 = report["results"]["ap50"].as_f64().unwrap();
    let want_ap = expected["ap"].as_f64().unwrap();
    let want_ap50 = expected["ap50"].as_f64().unwrap();
    let (d_ap, d_ap50) = ((got_ap - want_ap).abs(), (got_ap50 - want_ap50).abs());
    Check::new(
        d_ap <= CONFORMANCE_TOLERANCE && d_ap50 <= CONFORMANCE_TOLERANCE && elapsed < CONFORMANCE_BUDGET_S,
        format!(
            "ap {got_ap:.6} vs {want_ap:.6}, ap50 {got_ap50:.6} vs {want_ap50:.6}, \
             max diff {:.1e} (tol {CONFORMANCE_TOLERANCE:.0e}), eval {elapsed:.3} s (budget {CONFORMANCE_BUDGET_S} s)",
            d_ap.max(d_ap50)
        ),
    )
}

fn single_image_gt(boxes: &[BBox]) -> GroundTruth {
    GroundTruth {
        images: vec![ImageRecord {
            id: 1,
            width: 100,
            height: 100,
            file_name: None,
        }],
        annotations: boxes
            .iter()
            .enumerate()
            .map(|(k, &bbox)| GroundTruthAnnotation {
                id: k as u64 + 1,
                image_id: 1,
                category_id: 1,
                bbox,
                area: bbox.area(),
                ignore: false,
            })
            .collect(),
        categories: vec![Category {
            id: 1,
            name: "object".into(),
        }],
        warnings: vec![],
    }
}

fn single_image_ap(gt: &GroundTruth, dets: &[(BBox, f64)]) -> ApResult {
    let mut set = ShiftedPredictionSet::new(ShiftGrid::new(0), [1]);
    set.mark_present(1, Shift::ZERO);
    for &(b, score) in dets {
        set.push(1, Shift::ZERO, 1, b, score).unwrap();
    }
    compute_ap(&ShiftAssignment::uniform(&[1], Shift::ZERO), &set, gt, &EvalConfig::default()).unwrap()
}

fn hand_derived_ap() -> Check {
    let a = BBox::new(10.0, 10.0, 20.0, 20.0);
    let b = BBox::new(60.0, 60.0, 20.0, 20.0);
    let far = BBox::new(70.0, 5.0, 10.0, 10.0);
    let perfect = single_image_ap(&single_image_gt(&[a]), &[(a, 0.9)]);
    let fp_first = single_image_ap(&single_image_gt(&[a]), &[(far, 0.95), (a, 0.9)]);
    let half_recall = single_image_ap(&single_image_gt(&[a, b]), &[(a, 0.9)]);
    let cases = [
        ("perfect ap50", perfect.ap50, 1.0),
        ("perfect ap", perfect.ap, 1.0),
        ("FP ranked first ap50", fp_first.ap50, 0.5),
        ("one of two found ap50", half_recall.ap50, 51.0 / 101.0),
    ];
    let worst = cases.iter().map(|(_, got, want)| (got - want).abs()).fold(0.0, f64::max);
    let listing: Vec<String> = cases.iter().map(|(n, got, _)| format!("{n} {got:.6}")).collect();
    Check::new(
        worst <= HAND_TOLERANCE,
        format!("{}; max diff {worst:.1e} (tol {HAND_TOLERANCE:.0e})", listing.join(", ")),
    )
}

fn parity_config(n_images: usize, max_shift: u32, seed: u64) -> SimConfig {
    SimConfig {
        n_images,
        max_shift,
        seed,
        drop_prob: DropProb::Parity { p: 0.3 },
        ..SimConfig::default()
    }
}

fn greedy_versus_oracle() -> Check {
    let start = Instant::now();
    let config = EvalConfig::default();
    let mut bracket_violations = Vec::new();
    let mut exact = 0;
    let mut gaps = Vec::new();
    for seed in 0..ORACLE_INSTANCES {
        let data = generate_dataset(&parity_config(4, 1, seed)).unwrap();
        let (set, gt) = (&data.predictions, &data.ground_truth);
        let oracle = exhaustive_bounds(set, gt, &config, Objective::Ap50, DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(oracle.assignments_evaluated, 256);
        let table = MatchTable::build(set, gt, &config).unwrap();
        let greedy = bounds_on_table(&table, &GreedyConfig::default()).unwrap();
        let best_gap = oracle.best.ap50 - greedy.ap_best.ap50;
        let worst_gap = greedy.ap_worst.ap50 - oracle.worst.ap50;
        if best_gap < 0.0 || worst_gap < 0.0 {
            bracket_violations.push(seed);
        }
        if best_gap == 0.0 && worst_gap == 0.0 {
            exact += 1;
        }
        gaps.push(best_gap + worst_gap);
    }
    gaps.sort_by(f64::total_cmp);
    let median = (gaps[gaps.len() / 2 - 1] + gaps[gaps.len() / 2]) / 2.0;
    let elapsed = start.elapsed().as_secs_f64();
    let expectation = if exact >= ORACLE_EXPECTED_EXACT && median == 0.0 {
        "met"
    } else {
        "NOT met (non-fatal)"
    };
    Check::new(
        bracket_violations.is_empty() && elapsed < ORACLE_BUDGET_S,
        format!(
            "greedy inside the oracle bounds on {}/{ORACLE_INSTANCES} instances (N=4, M=1, parity drop 0.3), \
             budget {ORACLE_BUDGET_S} s{}",
            ORACLE_INSTANCES as usize - bracket_violations.len(),
            if bracket_violations.is_empty() {
                String::new()
            } else {
                format!(", violations at seeds {bracket_violations:?}")
            }
        ),
    )
    .note(format!(
        "expectation: greedy equals the oracle in both directions on {exact}/{ORACLE_INSTANCES} \
         (target >= {ORACLE_EXPECTED_EXACT}), median combined gap {median:.4} (target 0), max gap {:.4}: {expectation}",
        gaps.last().unwrap()
    ))
}

fn evaluation_count() -> Check {
    let mut rows = Vec::new();
    let mut pass = true;
    for (n, m, k) in [(100usize, 1u32, 1usize), (50, 3, 1), (100, 1, 2)] {
        let data = generate_dataset(&parity_config(n, m, 11)).unwrap();
        let table = MatchTable::build(&data.predictions, &data.ground_truth, &EvalConfig::default()).unwrap();
        let expected = (k * (m as usize + 1).pow(2) * n) as u64;
        let both = bounds_on_table(&table, &GreedyConfig::default().with_iterations(k)).unwrap();
        let ok = both.eval_count == expected && both.eval_count_worst == expected;
        pass &= ok;
        rows.push(format!(
            "(N={n}, M={m}, K={k}) {}/{} of {expected}",
            both.eval_count, both.eval_count_worst
        ));
    }
    Check::new(pass, format!("maximize/minimize counts {}", rows.join("; ")))
}

fn iteration_convergence() -> Check {
    let start = Instant::now();
    let config = EvalConfig::default();
    let ratio_for = |seed: u64| {
        let data = generate_dataset(&parity_config(200, 1, seed)).unwrap();
        let table = MatchTable::build(&data.predictions, &data.ground_truth, &config).unwrap();
        let k1 = bounds_on_table(&table, &GreedyConfig::default()).unwrap();
        let k2 = greedy_on_table(&table, &GreedyConfig::maximize().with_iterations(2)).unwrap();
        ((k2.result.ap50 - k1.ap_best.ap50).abs() / k1.delta_ap50, k1.delta_ap50)
    };
    let (ratio, delta) = ratio_for(0);
    let elapsed = start.elapsed().as_secs_f64();
    let others: Vec<String> = (1..5)
        .map(|seed| {
            let (r, _) = ratio_for(seed);
            format!("seed {seed}: {r:.4}")
        })
        .collect();
    Check::new(
        ratio < K_CONVERGENCE_RATIO && elapsed < K_CONVERGENCE_BUDGET_S,
        format!(
            "seed 0 (N=200, M=1, parity drop 0.3): |best(K=2) - best(K=1)| / delta50(K=1) = {ratio:.4} \
             (limit {K_CONVERGENCE_RATIO}), delta50 {delta:.4}, {elapsed:.2} s (budget {K_CONVERGENCE_BUDGET_S} s)"
        ),
    )
    .note(format!("other seeds, not asserted: {}", others.join(", ")))
}

fn grid_nesting() -> Check {
    let start = Instant::now();
    let config = EvalConfig::default();
    let mut held = 0;
    let mut smallest_margin = f64::INFINITY;
    for seed in 0..NESTING_INSTANCES {
        let data = generate_dataset(&parity_config(3, 2, seed)).unwrap();
        let wide = &data.predictions;
        let narrow = wide.restrict(1).unwrap();
        let gt = &data.ground_truth;
        let d2 = exhaustive_bounds(wide, gt, &config, Objective::Ap50, DEFAULT_ENUMERATION_CAP).unwrap();
        let d1 = exhaustive_bounds(&narrow, gt, &config, Objective::Ap50, DEFAULT_ENUMERATION_CAP).unwrap();
        let margin = (d2.best.ap50 - d2.worst.ap50) - (d1.best.ap50 - d1.worst.ap50);
        smallest_margin = smallest_margin.min(margin);
        if margin >= 0.0 {
            held += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    Check::new(
        held == NESTING_INSTANCES && elapsed < NESTING_BUDGET_S,
        format!(
            "delta50(M=2) >= delta50(M=1) on {held}/{NESTING_INSTANCES} instances (N=3), \
             smallest margin {smallest_margin:.4}, budget {NESTING_BUDGET_S} s"
        ),
    )
}

fn shift_invariance() -> Check {
    let mut pass = true;
    let mut cases = Vec::new();
    for (n, m, seed) in [(1usize, 0u32, 0u64), (7, 3, 1), (100, 1, 2), (250, 2, 3), (500, 3, 4)] {
        let data = generate_dataset(&SimConfig::shift_invariant(n, m, seed)).unwrap();
        let table = MatchTable::build(&data.predictions, &data.ground_truth, &EvalConfig::default()).unwrap();
        let b = bounds_on_table(&table, &GreedyConfig::default()).unwrap();
        let all_zero = b
            .assignment_best
            .iter()
            .chain(b.assignment_worst.iter())
            .all(|(_, s)| s == Shift::ZERO);
        let ok = b.delta_ap == 0.0 && b.delta_ap50 == 0.0 && all_zero;
        pass &= ok;
        cases.push(format!("(N={n}, M={m})"));
    }
    Check::new(
        pass,
        format!(
            "delta AP = delta AP50 = 0 and all-(0,0) assignments for {}",
            cases.join(", ")
        ),
    )
}

fn coarse_box(rng: &mut ChaCha8Rng) -> BBox {
    let cell = |rng: &mut ChaCha8Rng, lo: u32, hi: u32| f64::from(rng.random_range(lo..hi)) * 4.0;
    BBox::new(cell(rng, 0, 12), cell(rng, 0, 12), cell(rng, 1, 6), cell(rng, 1, 6))
}

struct SwapCase {
    gt: GroundTruth,
    set: ShiftedPredictionSet,
    start: ShiftAssignment,
    image_id: u64,
    shift: Shift,
}

/// Small instances with coarse boxes and scores so that ties, crowd regions
/// and empty cells are frequent.
fn random_swap_case(rng: &mut ChaCha8Rng) -> SwapCase {
    let n = rng.random_range(1..7usize);
    let grid = ShiftGrid::new(rng.random_range(0..3));
    let ids: Vec<u64> = (0..n as u64).map(|i| 5 + 2 * i).collect();
    let mut annotations = Vec::new();
    for &image_id in &ids {
        for _ in 0..rng.random_range(0..5) {
            let bbox = coarse_box(rng);
            annotations.push(GroundTruthAnnotation {
                id: annotations.len() as u64 + 1,
                image_id,
                category_id: rng.random_range(1..4),
                bbox,
                area: bbox.area(),
                ignore: rng.random_bool(0.15),
            });
        }
    }
    let gt = GroundTruth {
        images: ids
            .iter()
            .map(|&id| ImageRecord {
                id,
                width: 64,
                height: 64,
                file_name: None,
            })
            .collect(),
        annotations,
        categories: (1..4).map(|id| Category { id, name: format!("c{id}") }).collect(),
        warnings: vec![],
    };
    let mut set = ShiftedPredictionSet::new(grid, ids.iter().copied());
    for &image_id in &ids {
        let objects: Vec<&GroundTruthAnnotation> = gt.annotations.iter().filter(|a| a.image_id == image_id).collect();
        for shift in grid.shifts() {
            set.mark_present(image_id, shift);
            for _ in 0..rng.random_range(0..7) {
                let (category, bbox) = if !objects.is_empty() && rng.random_bool(0.6) {
                    // a near hit on some object, often enough to match
                    let a = objects[rng.random_range(0..objects.len())];
                    let nudge = f64::from(rng.random_range(0..3u32)) * 2.0;
                    (a.category_id, BBox::new(a.bbox.x + nudge, a.bbox.y, a.bbox.w, a.bbox.h))
                } else {
                    (rng.random_range(1..4), coarse_box(rng))
                };
                let score = f64::from(rng.random_range(0..11u32)) / 10.0;
                set.push(image_id, shift, category, bbox, score).unwrap();
            }
        }
    }
    let start: ShiftAssignment = ids
        .iter()
        .map(|&id| (id, grid.shift_at(rng.random_range(0..grid.len()))))
        .collect();
    let image_id = ids[rng.random_range(0..n)];
    let shift = grid.shift_at(rng.random_range(0..grid.len()));
    SwapCase {
        gt,
        set,
        start,
        image_id,
        shift,
    }
}

fn incremental_equivalence() -> Check {
    let config = EvalConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    let mut changed = 0;
    for _ in 0..INCREMENTAL_CASES {
        let case = random_swap_case(&mut rng);
        let table = MatchTable::build(&case.set, &case.gt, &config).unwrap();
        let cache = EvalCache::with_assignment(Arc::clone(&table), &case.start).unwrap();
        let mut target = case.start.clone();
        target.set(case.image_id, case.shift);
        let full = compute_ap(&target, &case.set, &case.gt, &config).unwrap();
        let quick = cache.swap_and_eval(case.image_id, case.shift).unwrap();
        if quick != full || quick.ap.to_bits() != full.ap.to_bits() || quick.ap50.to_bits() != full.ap50.to_bits() {
            mismatches += 1;
        }
        if full != cache.current() {
            changed += 1;
        }
    }
    Check::new(
        mismatches == 0,
        format!(
            "{}/{INCREMENTAL_CASES} random swaps bit-identical to full evaluation ({changed} swaps changed the result)",
            INCREMENTAL_CASES - mismatches
        ),
    )
}

fn random_detections(rng: &mut ChaCha8Rng) -> Vec<Detection> {
    (0..rng.random_range(0..40u64))
        .map(|det_id| Detection {
            det_id,
            image_id: 1,
            category_id: rng.random_range(1..3),
            bbox: BBox::new(
                f64::from(rng.random_range(0..20u32)) * 2.0,
                f64::from(rng.random_range(0..20u32)) * 2.0,
                f64::from(rng.random_range(1..8u32)) * 3.0,
                f64::from(rng.random_range(1..8u32)) * 3.0,
            ),
            score: f64::from(rng.random_range(0..20u32)) / 20.0,
        })
        .collect()
}

fn tta_versus_baseline(data: &SimulatedDataset) -> (f64, f64) {
    let config = EvalConfig::default();
    let ids = data.predictions.image_ids().to_vec();
    let zero = ShiftAssignment::uniform(&ids, Shift::ZERO);
    let base = compute_ap(&zero, &data.predictions, &data.ground_truth, &config).unwrap();
    let merged = aggregated_set(&tta_aggregate(&data.predictions, &NmsConfig::default()));
    let tta = compute_ap(&zero, &merged, &data.ground_truth, &config).unwrap();
    (base.ap50, tta.ap50)
}

fn nms_and_aggregation() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut idempotent = 0;
    for case in 0..NMS_CASES {
        let dets = random_detections(&mut rng);
        let cfg = NmsConfig {
            iou_threshold: f64::from(rng.random_range(1..=10u32)) / 10.0,
            class_aware: case % 2 == 0,
        };
        let once = nms(&dets, &cfg);
        let separated = once.iter().enumerate().all(|(i, a)| {
            once[i + 1..].iter().all(|b| {
                (cfg.class_aware && a.category_id != b.category_id) || iou(&a.bbox, &b.bbox) <= cfg.iou_threshold
            })
        });
        if nms(&once, &cfg) == once && separated {
            idempotent += 1;
        }
    }

    let single = generate_dataset(&SimConfig {
        n_images: 60,
        max_shift: 0,
        ..SimConfig::default()
    })
    .unwrap();
    let aggregated = tta_aggregate(&single.predictions, &NmsConfig::default());
    let single_equal = single.predictions.image_ids().iter().all(|&id| {
        let base = nms(single.predictions.cell(id, Shift::ZERO).unwrap(), &NmsConfig::default());
        let key = |v: &[Detection]| v.iter().map(|d| (d.category_id, d.bbox, d.score)).collect::<Vec<_>>();
        key(&aggregated[&id]) == key(&base)
    });

    let tta_config = |seed| SimConfig {
        n_images: 100,
        seed,
        drop_prob: DropProb::Parity { p: 0.3 },
        ..SimConfig::default()
    };
    let (pinned_base, pinned_tta) = tta_versus_baseline(&generate_dataset(&tta_config(0)).unwrap());
    let wins = (0..TTA_SEEDS)
        .filter(|&seed| {
            let (base, tta) = tta_versus_baseline(&generate_dataset(&tta_config(seed)).unwrap());
            tta >= base
        })
        .count();
    Check::new(
        idempotent == NMS_CASES as usize && single_equal && pinned_tta >= pinned_base && wins >= TTA_MIN_WINS,
        format!(
            "NMS idempotent on {idempotent}/{NMS_CASES} lists; single-shift aggregation equals NMS: {single_equal}; \
             seed 0 ap50 {pinned_base:.4} -> {pinned_tta:.4}; aggregation >= baseline on {wins}/{TTA_SEEDS} seeds \
             (need {TTA_MIN_WINS})"
        ),
    )
}

/// Greedy search that evaluates every candidate by concatenating and fully
/// sorting the selected per-image match results.
fn naive_greedy(set: &ShiftedPredictionSet, gt: &GroundTruth, config: &EvalConfig, direction: Direction) -> (ApResult, ShiftAssignment) {
    let by_image = gt.by_image();
    let categories = gt.category_ids();
    let grid = set.grid();
    let matches: Vec<Vec<ImageMatchResult>> = set
        .image_ids()
        .iter()
        .enumerate()
        .map(|(i, &id)| {
            let gts = by_image.get(&id).cloned().unwrap_or_default();
            (0..grid.len()).map(|s| match_image(id, set.cell_at(i, s), &gts, config)).collect()
        })
        .collect();
    let evaluate = |chosen: &[usize]| {
        let selected: Vec<&ImageMatchResult> = chosen.iter().enumerate().map(|(i, &s)| &matches[i][s]).collect();
        ap_from_matches(&selected, &categories, config)
    };
    let mut chosen = vec![0usize; matches.len()];
    for image in 0..matches.len() {
        let values: Vec<f64> = (0..grid.len())
            .map(|s| {
                let mut trial = chosen.clone();
                trial[image] = s;
                evaluate(&trial).ap50
            })
            .collect();
        let best = values.iter().copied().fold(values[0], |acc, v| match direction {
            Direction::Maximize if v > acc => v,
            Direction::Minimize if v < acc => v,
            _ => acc,
        });
        if values[chosen[image]] != best {
            chosen[image] = values.iter().position(|&v| v == best).unwrap();
        }
    }
    let assignment = set
        .image_ids()
        .iter()
        .zip(&chosen)
        .map(|(&id, &s)| (id, grid.shift_at(s)))
        .collect();
    (evaluate(&chosen), assignment)
}

fn perf_config(n_images: usize) -> SimConfig {
    SimConfig {
        n_images,
        objects_per_image: ObjectCount { min: 4, max: 12 },
        drop_prob: DropProb::Parity { p: 0.3 },
        seed: 5,
        ..SimConfig::default()
    }
}

fn performance_budget() -> Check {
    let config = EvalConfig::default();
    let data = generate_dataset(&perf_config(PERF_IMAGES)).unwrap();
    let start = Instant::now();
    let table = MatchTable::build(&data.predictions, &data.ground_truth, &config).unwrap();
    let bounds = bounds_on_table(&table, &GreedyConfig::default()).unwrap();
    let elapsed = start.elapsed().as_secs_f64();

    let small = generate_dataset(&perf_config(NAIVE_IMAGES)).unwrap();
    let small_table = MatchTable::build(&small.predictions, &small.ground_truth, &config).unwrap();
    let mut agree = true;
    for direction in [Direction::Maximize, Direction::Minimize] {
        let cached = greedy_on_table(
            &small_table,
            &GreedyConfig {
                direction,
                ..GreedyConfig::default()
            },
        )
        .unwrap();
        let (naive, naive_assignment) = naive_greedy(&small.predictions, &small.ground_truth, &config, direction);
        agree &= naive == cached.result
            && naive.ap50.to_bits() == cached.result.ap50.to_bits()
            && naive.ap.to_bits() == cached.result.ap.to_bits()
            && naive_assignment == cached.assignment;
    }
    Check::new(
        elapsed < PERF_BUDGET_S && agree,
        format!(
            "N={PERF_IMAGES} ({} objects, {} detections), M=1, K=1, both directions in {elapsed:.2} s \
             (budget {PERF_BUDGET_S} s), ap50 {:.4} in [{:.4}, {:.4}]; naive recompute on N={NAIVE_IMAGES} \
             bit-identical in both directions: {agree}",
            data.counts.objects,
            data.predictions.num_detections(),
            bounds.baseline.ap50,
            bounds.ap_worst.ap50,
            bounds.ap_best.ap50
        ),
    )
}

const PIPELINE: &[&[&str]] = &[
    &[
        "simulate", "--out", "sim", "--n-images", "40", "--max-shift", "2", "--drop-kind", "parity", "--drop-p",
        "0.3", "--seed", "5",
    ],
    &["simulate", "--out", "tiny", "--n-images", "3", "--max-shift", "1", "--seed", "6"],
    &["manifest", "--gt", "sim/gt.json", "--max-shift", "2", "--padding", "global", "--out", "manifest.json"],
    &[
        "eval", "--gt", "sim/gt.json", "--pred-dir", "sim/predictions", "--max-shift", "2", "--shift", "1,2",
        "--out", "eval.json",
    ],
    &[
        "bounds", "--gt", "sim/gt.json", "--pred-dir", "sim/predictions", "--max-shift", "2", "-k", "2", "--csv",
        "bounds.csv", "--out", "bounds.json",
    ],
    &[
        "bounds", "--gt", "sim/gt.json", "--pred-dir", "sim/predictions", "--max-shift", "2", "--direction", "min",
        "--objective", "ap", "--out", "bounds_min.json",
    ],
    &["oracle", "--gt", "tiny/gt.json", "--pred-dir", "tiny/predictions", "--max-shift", "1", "--out", "oracle.json"],
    &[
        "tta", "--gt", "sim/gt.json", "--pred-dir", "sim/predictions", "--max-shift", "2", "--csv", "tta.csv",
        "--write-predictions", "tta_predictions.json", "--out", "tta.json",
    ],
    &[
        "sweep", "--gt", "sim/gt.json", "--pred-dir", "sim/predictions", "--shifts", "0,1,2", "--csv", "sweep.csv",
        "--series", "series.csv", "--out", "sweep.json",
    ],
    &[
        "sweep", "--gt", "tiny/gt.json", "--pred-dir", "tiny/predictions", "--shifts", "0,1", "--search",
        "exhaustive", "--out", "sweep_exhaustive.json",
    ],
];

fn run_pipeline(dir: &Path, threads: &str) {
    for (k, args) in PIPELINE.iter().enumerate() {
        let out = shiftap()
            .current_dir(dir)
            .args(["--quiet", "--threads", threads])
            .args(*args)
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        fs::write(dir.join(format!("stdout_{k}.txt")), &out.stdout).unwrap();
    }
}

fn collect_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = fs::read(&path).unwrap();
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    out
}

fn cli_determinism() -> Check {
    let single = tempfile::tempdir().unwrap();
    let eight = tempfile::tempdir().unwrap();
    run_pipeline(single.path(), "1");
    run_pipeline(eight.path(), "8");
    let a = collect_files(single.path());
    let b = collect_files(eight.path());
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    Check::new(
        differing.is_empty() && !a.is_empty(),
        format!(
            "{} commands, {} output files byte-identical with --threads 1 and 8{}",
            PIPELINE.len(),
            a.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!("; differing: {}", differing.join(", "))
            }
        ),
    )
}
