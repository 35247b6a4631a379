//! Shift-equivariance evaluation for object detectors.
//!
//! Each image of an evaluation set is embedded into a slightly larger canvas
//! at every offset of a small integer grid, the detector is run on every
//! variant, and the resulting per-shift predictions are mapped back to the
//! original image frame. This crate then answers the question "how much does
//! COCO average precision move if an adversary (or an oracle) picks one shift
//! per image?" by searching for the best and worst per-image shift
//! assignments.
//!
//! Module map:
//!
//! - [`geometry`]: boxes, IoU and shift transforms.
//! - [`dataset`]: COCO ground truth, per-shift prediction ingestion, shift manifests.
//! - [`evaluator`]: COCO-protocol AP plus an incremental cache for single-image swaps.
//! - [`bounds`]: greedy and exhaustive AP bounds, ΔAP, shift-range sweeps.
//! - [`tta`]: NMS and test-time aggregation over shifts.
//! - [`simulate`]: a seeded synthetic detector with controllable shift variance.
//! - [`report`]: table layouts (CSV) for bounds, sweeps and TTA comparisons.

pub mod bounds;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod geometry;
mod par;
pub mod report;
pub mod simulate;
pub mod tta;

pub use bounds::{
    brute_force_bounds, compute_bounds, delta_ap, greedy_bounds, sweep_shift_range, BoundsResult,
    Direction, GreedyConfig, GreedyOutcome, Objective, ShiftAssignment, SweepRow, SweepSearch,
};
pub use dataset::{
    Category, Detection, Frame, GroundTruth, GroundTruthAnnotation, ImageRecord, PaddingPolicy,
    PredictionSource, ShiftManifest, ShiftedPredictionSet,
};
pub use error::{Error, Result};
pub use evaluator::{compute_ap, match_image, ApResult, EvalCache, EvalConfig, ImageMatchResult, MatchTable};
pub use geometry::{apply_shift, iou, unapply_shift, BBox, Shift, ShiftGrid};
pub use tta::{nms, tta_aggregate, NmsConfig};
