//! Synthetic ground truth and shift-dependent predictions.
//!
//! Every random draw comes from a ChaCha stream keyed by
//! `(seed, image, shift, purpose, index)`, so a cell's content does not
//! depend on generation order, thread count or the size of the grid. Box
//! coordinates are kept on a 1/16 px lattice so that writing them in the
//! shifted frame and reading them back is lossless.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    emit_shift_manifest, Category, Frame, GroundTruth, GroundTruthAnnotation, ImageRecord, PaddingPolicy,
    ShiftManifest, ShiftedPredictionSet,
};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Shift, ShiftGrid};
use crate::par;

/// Coordinate lattice for simulated boxes, in pixels.
pub const LATTICE: f64 = 1.0 / 16.0;

/// Spurious boxes overlap every object by less than this.
pub const SPURIOUS_MAX_IOU: f64 = 0.3;

const PLACEMENT_ATTEMPTS: usize = 64;

/// Per-shift probability of missing an object.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DropProb {
    /// `p` everywhere.
    Constant { p: f64 },
    /// `p` on shifts with odd `dx + dy`, zero otherwise.
    Parity { p: f64 },
    /// `p * (dx + dy) / (2M)`, zero for `M = 0`.
    Linear { p: f64 },
}

impl Default for DropProb {
    fn default() -> Self {
        DropProb::Constant { p: 0.0 }
    }
}

impl DropProb {
    pub fn at(&self, shift: Shift, max_shift: u32) -> f64 {
        match *self {
            DropProb::Constant { p } => p,
            DropProb::Parity { p } => {
                if shift.is_even() {
                    0.0
                } else {
                    p
                }
            }
            DropProb::Linear { p } => {
                if max_shift == 0 {
                    0.0
                } else {
                    p * (f64::from(shift.dx + shift.dy) / f64::from(2 * max_shift))
                }
            }
        }
    }

    fn base(&self) -> f64 {
        match *self {
            DropProb::Constant { p } | DropProb::Parity { p } | DropProb::Linear { p } => p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectCount {
    pub min: u32,
    pub max: u32,
}

impl ObjectCount {
    pub const fn exactly(n: u32) -> Self {
        ObjectCount { min: n, max: n }
    }

    fn mean(&self) -> f64 {
        (f64::from(self.min) + f64::from(self.max)) / 2.0
    }

    fn variance(&self) -> f64 {
        let span = f64::from(self.max - self.min) + 1.0;
        (span * span - 1.0) / 12.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_images: usize,
    /// Side of the square images, pixels.
    pub image_size: u32,
    pub n_categories: u32,
    pub objects_per_image: ObjectCount,
    pub max_shift: u32,
    /// Score of a perfectly localized detection before score jitter.
    pub score_base: f64,
    /// Standard deviation of the per-shift noise on each box corner, pixels.
    pub box_jitter_sigma: f64,
    pub score_jitter_sigma: f64,
    pub drop_prob: DropProb,
    /// Expected spurious detections per image and shift.
    pub fp_rate: f64,
    /// Spurious scores are drawn uniformly from `[0, fp_score_max]` before
    /// score jitter.
    pub fp_score_max: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_images: 100,
            image_size: 256,
            n_categories: 3,
            objects_per_image: ObjectCount { min: 1, max: 8 },
            max_shift: 1,
            score_base: 0.9,
            box_jitter_sigma: 4.0,
            score_jitter_sigma: 0.1,
            drop_prob: DropProb::Constant { p: 0.1 },
            fp_rate: 1.0,
            fp_score_max: 0.7,
            seed: 0,
        }
    }
}

impl SimConfig {
    /// A detector whose output ignores the shift entirely.
    pub fn shift_invariant(n_images: usize, max_shift: u32, seed: u64) -> Self {
        SimConfig {
            n_images,
            max_shift,
            seed,
            box_jitter_sigma: 0.0,
            score_jitter_sigma: 0.0,
            drop_prob: DropProb::Constant { p: 0.0 },
            fp_rate: 0.0,
            ..SimConfig::default()
        }
    }

    pub fn grid(&self) -> ShiftGrid {
        ShiftGrid::new(self.max_shift)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if self.n_images == 0 {
            return fail("n_images must be positive".into());
        }
        if self.image_size < 8 {
            return fail(format!("image_size must be at least 8, got {}", self.image_size));
        }
        if self.n_categories == 0 {
            return fail("n_categories must be positive".into());
        }
        if self.objects_per_image.min > self.objects_per_image.max {
            return fail("objects_per_image.min exceeds max".into());
        }
        if !unit(self.score_base) || !unit(self.fp_score_max) || !unit(self.drop_prob.base()) {
            return fail("score_base, fp_score_max and drop probability must lie in [0, 1]".into());
        }
        if !non_negative(self.box_jitter_sigma) || !non_negative(self.score_jitter_sigma) {
            return fail("jitter sigmas must be finite and non-negative".into());
        }
        if !non_negative(self.fp_rate) {
            return fail("fp_rate must be finite and non-negative".into());
        }
        Ok(())
    }

    fn object_size_range(&self) -> (u32, u32) {
        let lo = (self.image_size / 16).max(4);
        let hi = (self.image_size / 4).max(lo);
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
enum Stream {
    Objects = 1,
    ObjectBox = 2,
    Detection = 3,
    SpuriousCount = 4,
    Spurious = 5,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn keyed_rng(seed: u64, image_id: u64, shift: Shift, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for part in [image_id, u64::from(shift.dx), u64::from(shift.dy), stream as u64, index] {
        h = splitmix(h ^ part);
    }
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix(h ^ i as u64).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

fn snap(v: f64) -> f64 {
    (v / LATTICE).round() * LATTICE
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_box(rng: &mut ChaCha8Rng, config: &SimConfig) -> BBox {
    let (lo, hi) = config.object_size_range();
    let w = rng.random_range(lo..=hi);
    let h = rng.random_range(lo..=hi);
    let x = rng.random_range(0..=config.image_size - w);
    let y = rng.random_range(0..=config.image_size - h);
    BBox::new(f64::from(x), f64::from(y), f64::from(w), f64::from(h))
}

fn jitter_box(b: &BBox, sigma: f64, rng: &mut ChaCha8Rng) -> BBox {
    let mut corners = [b.x, b.y, b.right(), b.bottom()];
    for c in &mut corners {
        *c = snap(*c + sigma * normal(rng));
    }
    let [x0, y0, x1, y1] = corners;
    BBox::new(x0, y0, (x1 - x0).max(LATTICE), (y1 - y0).max(LATTICE))
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Counts realized by one generation run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RealizedCounts {
    pub objects: u64,
    /// Object detections emitted over all shifts.
    pub object_detections: u64,
    pub spurious_detections: u64,
}

#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub config: SimConfig,
    pub ground_truth: GroundTruth,
    pub predictions: ShiftedPredictionSet,
    pub manifest: ShiftManifest,
    pub counts: RealizedCounts,
}

struct CellOutput {
    detections: Vec<(u64, BBox, f64)>,
    objects_kept: u64,
    spurious: u64,
}

fn generate_cell(config: &SimConfig, image_id: u64, objects: &[GroundTruthAnnotation], shift: Shift) -> CellOutput {
    let drop = config.drop_prob.at(shift, config.max_shift);
    let mut detections = Vec::new();
    let mut objects_kept = 0;
    for (k, obj) in objects.iter().enumerate() {
        let mut rng = keyed_rng(config.seed, image_id, shift, Stream::Detection, k as u64);
        if rng.random::<f64>() < drop {
            continue;
        }
        let bbox = jitter_box(&obj.bbox, config.box_jitter_sigma, &mut rng);
        let score = clamp_unit(config.score_base * iou(&bbox, &obj.bbox) + config.score_jitter_sigma * normal(&mut rng));
        detections.push((obj.category_id, bbox, score));
        objects_kept += 1;
    }

    let count = if config.fp_rate > 0.0 {
        let mut rng = keyed_rng(config.seed, image_id, shift, Stream::SpuriousCount, 0);
        Poisson::new(config.fp_rate).expect("positive rate").sample(&mut rng) as u64
    } else {
        0
    };
    let mut spurious = 0;
    for j in 0..count {
        let mut rng = keyed_rng(config.seed, image_id, shift, Stream::Spurious, j);
        let category = rng.random_range(1..=u64::from(config.n_categories));
        let placed = (0..PLACEMENT_ATTEMPTS)
            .map(|_| random_box(&mut rng, config))
            .find(|b| objects.iter().all(|o| iou(b, &o.bbox) < SPURIOUS_MAX_IOU));
        if let Some(bbox) = placed {
            let score = clamp_unit(
                config.fp_score_max * rng.random::<f64>() + config.score_jitter_sigma * normal(&mut rng),
            );
            detections.push((category, bbox, score));
            spurious += 1;
        }
    }
    CellOutput {
        detections,
        objects_kept,
        spurious,
    }
}

fn generate_objects(config: &SimConfig, image_id: u64) -> Vec<(u64, BBox)> {
    let mut rng = keyed_rng(config.seed, image_id, Shift::ZERO, Stream::Objects, 0);
    let n = rng.random_range(config.objects_per_image.min..=config.objects_per_image.max);
    (0..n)
        .map(|k| {
            let mut rng = keyed_rng(config.seed, image_id, Shift::ZERO, Stream::ObjectBox, u64::from(k));
            let category = rng.random_range(1..=u64::from(config.n_categories));
            (category, random_box(&mut rng, config))
        })
        .collect()
}

/// Draws ground truth once per image and predictions for every
/// `(image, shift)` cell. Image ids run from 1 to `n_images`.
pub fn generate_dataset(config: &SimConfig) -> Result<SimulatedDataset> {
    config.validate()?;
    let grid = config.grid();
    let image_ids: Vec<u64> = (1..=config.n_images as u64).collect();

    let per_image = par::map_collect(&image_ids, |&id| generate_objects(config, id));
    let mut annotations = Vec::new();
    for (&image_id, objects) in image_ids.iter().zip(&per_image) {
        for &(category_id, bbox) in objects {
            annotations.push(GroundTruthAnnotation {
                id: annotations.len() as u64 + 1,
                image_id,
                category_id,
                bbox,
                area: bbox.area(),
                ignore: false,
            });
        }
    }
    let images: Vec<ImageRecord> = image_ids
        .iter()
        .map(|&id| ImageRecord {
            id,
            width: config.image_size,
            height: config.image_size,
            file_name: Some(format!("sim_{id:06}.png")),
        })
        .collect();
    let categories = (1..=u64::from(config.n_categories))
        .map(|id| Category {
            id,
            name: format!("class_{id}"),
        })
        .collect();
    let ground_truth = GroundTruth {
        images,
        annotations,
        categories,
        warnings: Vec::new(),
    };

    let by_image = ground_truth.by_image();
    let slots: Vec<(usize, Shift)> = (0..image_ids.len())
        .flat_map(|i| grid.shifts().map(move |s| (i, s)))
        .collect();
    let cells = par::map_collect(&slots, |&(i, shift)| {
        let id = image_ids[i];
        let objects: Vec<GroundTruthAnnotation> = by_image[&id].iter().map(|a| (*a).clone()).collect();
        generate_cell(config, id, &objects, shift)
    });

    let mut predictions = ShiftedPredictionSet::new(grid, image_ids.iter().copied());
    let mut counts = RealizedCounts {
        objects: ground_truth.annotations.len() as u64,
        ..RealizedCounts::default()
    };
    for (&(i, shift), cell) in slots.iter().zip(cells) {
        let id = image_ids[i];
        predictions.mark_present(id, shift);
        for (category, bbox, score) in cell.detections {
            predictions.push(id, shift, category, bbox, score)?;
        }
        counts.object_detections += cell.objects_kept;
        counts.spurious_detections += cell.spurious;
    }

    let manifest = emit_shift_manifest(&ground_truth.images, grid, PaddingPolicy::Minimal)?;
    Ok(SimulatedDataset {
        config: config.clone(),
        ground_truth,
        predictions,
        manifest,
        counts,
    })
}

/// Mean and variance of a count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

impl Moments {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }

    /// Whether `value` lies within `k` standard deviations of the mean.
    pub fn contains(&self, value: f64, k: f64) -> bool {
        (value - self.mean).abs() <= k * self.std_dev()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftExpectation {
    pub shift: Shift,
    pub drop_prob: f64,
    pub object_detections: Moments,
}

/// Analytic expectations for a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub grid_size: usize,
    pub objects: Moments,
    pub per_shift: Vec<ShiftExpectation>,
    pub object_detections: Moments,
    /// Upper bound: placements that fail to avoid objects are skipped.
    pub spurious_detections: Moments,
}

/// Expected counts. Object counts are shared by all shifts of an image, so
/// the all-shift variance includes the covariance between shifts.
pub fn describe(config: &SimConfig) -> SimSummary {
    let n = config.n_images as f64;
    let mean_obj = config.objects_per_image.mean();
    let var_obj = config.objects_per_image.variance();
    let grid = config.grid();
    let keep: Vec<(Shift, f64)> = grid
        .shifts()
        .map(|s| (s, 1.0 - config.drop_prob.at(s, config.max_shift)))
        .collect();

    let per_shift = keep
        .iter()
        .map(|&(shift, q)| ShiftExpectation {
            shift,
            drop_prob: 1.0 - q,
            object_detections: Moments {
                mean: n * mean_obj * q,
                variance: n * (mean_obj * q * (1.0 - q) + var_obj * q * q),
            },
        })
        .collect();
    let sum_q: f64 = keep.iter().map(|&(_, q)| q).sum();
    let sum_bernoulli_var: f64 = keep.iter().map(|&(_, q)| q * (1.0 - q)).sum();
    let cells = n * grid.len() as f64;
    SimSummary {
        grid_size: grid.len(),
        objects: Moments {
            mean: n * mean_obj,
            variance: n * var_obj,
        },
        per_shift,
        object_detections: Moments {
            mean: n * mean_obj * sum_q,
            variance: n * (mean_obj * sum_bernoulli_var + var_obj * sum_q * sum_q),
        },
        spurious_detections: Moments {
            mean: cells * config.fp_rate,
            variance: cells * config.fp_rate,
        },
    }
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    expected: &'a SimSummary,
    realized: &'a RealizedCounts,
}

impl SimulatedDataset {
    /// Writes `gt.json`, `predictions/shift_<dx>_<dy>.json` (shifted frame),
    /// `manifest.json`, `sim_config.json` and `summary.json`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write("gt.json", self.ground_truth.to_json_string())?;
        self.predictions.write_dir(&dir.join("predictions"), Frame::Shifted)?;
        write("manifest.json", self.manifest.to_json_string())?;
        write(
            "sim_config.json",
            serde_json::to_string_pretty(&self.config).expect("config serializes"),
        )?;
        let summary = SummaryFile {
            expected: &describe(&self.config),
            realized: &self.counts,
        };
        write("summary.json", serde_json::to_string_pretty(&summary).expect("summary serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drop_probability_modes() {
        let p = 0.4;
        assert_eq!(DropProb::Constant { p }.at(Shift::new(1, 1), 1), p);
        assert_eq!(DropProb::Parity { p }.at(Shift::new(1, 1), 1), 0.0);
        assert_eq!(DropProb::Parity { p }.at(Shift::new(0, 1), 1), p);
        assert_eq!(DropProb::Linear { p }.at(Shift::new(3, 3), 3), p);
        assert_eq!(DropProb::Linear { p }.at(Shift::new(1, 0), 2), p / 4.0);
        assert_eq!(DropProb::Linear { p }.at(Shift::ZERO, 0), 0.0);
    }

    #[test]
    fn config_round_trips_and_fills_defaults() {
        let cfg: SimConfig = serde_json::from_str(r#"{"n_images": 7, "drop_prob": {"kind": "parity", "p": 0.3}}"#).unwrap();
        assert_eq!(cfg.n_images, 7);
        assert_eq!(cfg.drop_prob, DropProb::Parity { p: 0.3 });
        assert_eq!(cfg.seed, SimConfig::default().seed);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<SimConfig>(&text).unwrap(), cfg);
        assert!(serde_json::from_str::<SimConfig>(r#"{"n_imgs": 3}"#).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = [
            SimConfig { n_images: 0, ..SimConfig::default() },
            SimConfig { score_base: 1.5, ..SimConfig::default() },
            SimConfig { box_jitter_sigma: -1.0, ..SimConfig::default() },
            SimConfig { drop_prob: DropProb::Parity { p: 2.0 }, ..SimConfig::default() },
            SimConfig { objects_per_image: ObjectCount { min: 3, max: 2 }, ..SimConfig::default() },
            SimConfig { fp_rate: f64::NAN, ..SimConfig::default() },
        ];
        for cfg in bad {
            assert!(generate_dataset(&cfg).is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn shift_invariant_cells_are_identical() {
        let data = generate_dataset(&SimConfig::shift_invariant(20, 2, 5)).unwrap();
        let set = &data.predictions;
        for &id in set.image_ids() {
            let key = |s: Shift| -> Vec<_> {
                set.cell(id, s).unwrap().iter().map(|d| (d.category_id, d.bbox, d.score)).collect()
            };
            let base = key(Shift::ZERO);
            assert_eq!(base.len(), data.ground_truth.by_image()[&id].len());
            for s in set.grid().shifts() {
                assert_eq!(key(s), base);
            }
        }
        assert_eq!(data.counts.spurious_detections, 0);
    }

    #[test]
    fn blind_detector_emits_nothing() {
        let cfg = SimConfig {
            drop_prob: DropProb::Constant { p: 1.0 },
            fp_rate: 0.0,
            ..SimConfig::shift_invariant(10, 1, 1)
        };
        let data = generate_dataset(&cfg).unwrap();
        assert_eq!(data.predictions.num_detections(), 0);
        assert!(data.predictions.missing_cells().is_empty());
    }

    #[test]
    fn cells_do_not_depend_on_grid_size() {
        let cfg = SimConfig {
            drop_prob: DropProb::Parity { p: 0.3 },
            n_images: 6,
            ..SimConfig::default()
        };
        let small = generate_dataset(&SimConfig { max_shift: 1, ..cfg.clone() }).unwrap();
        let large = generate_dataset(&SimConfig { max_shift: 3, ..cfg }).unwrap();
        assert_eq!(small.ground_truth.annotations, large.ground_truth.annotations);
        for &id in small.predictions.image_ids() {
            for s in small.predictions.grid().shifts() {
                let a: Vec<_> = small.predictions.cell(id, s).unwrap().iter().map(|d| (d.bbox, d.score)).collect();
                let b: Vec<_> = large.predictions.cell(id, s).unwrap().iter().map(|d| (d.bbox, d.score)).collect();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn spurious_boxes_avoid_objects() {
        let cfg = SimConfig {
            fp_rate: 3.0,
            n_images: 30,
            ..SimConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        let gt = data.ground_truth.by_image();
        let mut spurious = 0;
        for &id in data.predictions.image_ids() {
            let objects: Vec<_> = gt[&id].iter().map(|a| (*a).clone()).collect();
            for s in data.predictions.grid().shifts() {
                let cell = generate_cell(&cfg, id, &objects, s);
                for (_, bbox, _) in &cell.detections[cell.objects_kept as usize..] {
                    assert!(objects.iter().all(|o| iou(bbox, &o.bbox) < SPURIOUS_MAX_IOU));
                }
                spurious += cell.spurious;
            }
        }
        assert!(spurious > 0);
        assert_eq!(spurious, data.counts.spurious_detections);
    }

    #[test]
    fn describe_examples() {
        let cfg = SimConfig {
            n_images: 100,
            objects_per_image: ObjectCount::exactly(10),
            drop_prob: DropProb::Constant { p: 0.5 },
            max_shift: 0,
            fp_rate: 0.0,
            ..SimConfig::default()
        };
        let d = describe(&cfg);
        assert_eq!(d.object_detections.mean, 500.0);
        assert_eq!(d.object_detections.variance, 250.0);
        assert_eq!(d.spurious_detections.mean, 0.0);
        let four = describe(&SimConfig { max_shift: 1, ..cfg });
        assert_eq!(four.grid_size, 4);
        assert_eq!(four.object_detections.mean, 4.0 * d.object_detections.mean);
        assert_eq!(four.per_shift[3].object_detections, d.per_shift[0].object_detections);
    }
}
