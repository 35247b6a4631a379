//! Test-time augmentation over shifts: pool the de-shifted predictions of
//! every shifted copy of an image and merge them with greedy NMS.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{Detection, ResultRecord, ShiftedPredictionSet};
use crate::error::{Error, Result};
use crate::geometry::{iou, Shift, ShiftGrid};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmsConfig {
    /// A detection is suppressed when its IoU with a kept one exceeds this.
    pub iou_threshold: f64,
    /// Only suppress within the same category.
    pub class_aware: bool,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            iou_threshold: 0.5,
            class_aware: true,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_threshold > 0.0 && self.iou_threshold <= 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "NMS IoU threshold must lie in (0, 1], got {}",
                self.iou_threshold
            )))
        }
    }
}

fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score).then(a.det_id.cmp(&b.det_id))
}

/// Greedy suppression over detections of one image. The result is sorted by
/// `(score desc, det_id asc)`; boxes and scores are copied unchanged.
pub fn nms(detections: &[Detection], config: &NmsConfig) -> Vec<Detection> {
    let mut sorted: Vec<&Detection> = detections.iter().collect();
    sorted.sort_by(|a, b| rank(a, b));
    let mut kept: Vec<&Detection> = Vec::new();
    for d in sorted {
        let suppressed = kept.iter().any(|k| {
            (!config.class_aware || k.category_id == d.category_id) && iou(&k.bbox, &d.bbox) > config.iou_threshold
        });
        if !suppressed {
            kept.push(d);
        }
    }
    kept.into_iter().cloned().collect()
}

/// Per-image NMS over the pooled predictions of all shifts.
///
/// Pooling visits shifts in `(dy, dx)` order and each cell in `det_id`
/// order; pooled detections are renumbered `0, 1, ...` per image before
/// suppression, so exact duplicates resolve to the smallest shift.
pub fn tta_aggregate(set: &ShiftedPredictionSet, config: &NmsConfig) -> BTreeMap<u64, Vec<Detection>> {
    let n_shifts = set.grid().len();
    let indices: Vec<usize> = (0..set.num_images()).collect();
    let merged = par::map_collect(&indices, |&i| {
        let mut pool = Vec::new();
        for s in 0..n_shifts {
            let mut cell: Vec<&Detection> = set.cell_at(i, s).iter().collect();
            cell.sort_by_key(|d| d.det_id);
            pool.extend(cell.into_iter().cloned());
        }
        for (k, d) in pool.iter_mut().enumerate() {
            d.det_id = k as u64;
        }
        nms(&pool, config)
    });
    set.image_ids().iter().copied().zip(merged).collect()
}

/// Packs aggregated detections into a single-shift set so they can be
/// scored like any baseline.
pub fn aggregated_set(aggregated: &BTreeMap<u64, Vec<Detection>>) -> ShiftedPredictionSet {
    let mut set = ShiftedPredictionSet::new(ShiftGrid::new(0), aggregated.keys().copied());
    for (&image_id, dets) in aggregated {
        set.mark_present(image_id, Shift::ZERO);
        for d in dets {
            set.push(image_id, Shift::ZERO, d.category_id, d.bbox, d.score)
                .expect("image and shift belong to the set");
        }
    }
    set
}

/// COCO detection-results records for aggregated detections, image by image.
pub fn aggregated_records(aggregated: &BTreeMap<u64, Vec<Detection>>) -> Vec<ResultRecord> {
    aggregated
        .values()
        .flatten()
        .map(|d| ResultRecord {
            image_id: d.image_id,
            category_id: d.category_id,
            bbox: d.bbox,
            score: d.score,
            shift: None,
        })
        .collect()
}
