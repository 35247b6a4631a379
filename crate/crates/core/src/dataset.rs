//! Ground truth, per-shift predictions and shift manifests.
//!
//! All evaluation happens in the canonical frame, the coordinate system of
//! the original (unshifted) image. Predictions made on shifted canvases are
//! de-shifted once, at ingestion, so nothing downstream needs to know which
//! shift produced a box.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply_shift, unapply_shift, BBox, Shift, ShiftGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    /// Area used for area-range filtering; defaults to `w * h`.
    pub area: f64,
    /// Crowd or explicitly ignored region.
    pub ignore: bool,
}

#[derive(Deserialize)]
struct RawGroundTruth {
    images: Vec<ImageRecord>,
    #[serde(default)]
    annotations: Vec<RawAnnotation>,
    categories: Vec<Category>,
}

#[derive(Serialize, Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    area: Option<f64>,
    #[serde(default)]
    iscrowd: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ignore: Option<u8>,
}

#[derive(Serialize)]
struct RawGroundTruthOut<'a> {
    images: &'a [ImageRecord],
    annotations: Vec<RawAnnotation>,
    categories: &'a [Category],
}

/// Validated COCO ground truth.
///
/// Images and categories are kept sorted by id; annotations keep file order,
/// which the matcher relies on for its tie-breaks.
#[derive(Debug, Clone, Default)]
pub struct GroundTruth {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<GroundTruthAnnotation>,
    pub categories: Vec<Category>,
    /// Non-fatal findings, e.g. boxes that leave their image.
    pub warnings: Vec<String>,
}

impl GroundTruth {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text, path)
    }

    /// Parses and validates a COCO ground-truth document; `origin` only
    /// labels diagnostics.
    pub fn from_json_str(text: &str, origin: impl AsRef<Path>) -> Result<Self> {
        let origin = origin.as_ref();
        let raw: RawGroundTruth = serde_json::from_str(text).map_err(|e| Error::parse(origin, e))?;
        Self::from_raw(raw, origin)
    }

    fn from_raw(raw: RawGroundTruth, origin: &Path) -> Result<Self> {
        let mut images = raw.images;
        let mut seen = HashSet::new();
        for img in &images {
            if !seen.insert(img.id) {
                return Err(Error::DuplicateImage {
                    path: origin.to_path_buf(),
                    image_id: img.id,
                });
            }
            if img.width == 0 || img.height == 0 {
                return Err(Error::InvalidImage {
                    path: origin.to_path_buf(),
                    image_id: img.id,
                });
            }
        }
        images.sort_by_key(|i| i.id);

        let mut categories = raw.categories;
        categories.sort_by_key(|c| c.id);
        categories.dedup_by_key(|c| c.id);
        let known_categories: HashSet<u64> = categories.iter().map(|c| c.id).collect();
        let sizes: HashMap<u64, (u32, u32)> = images.iter().map(|i| (i.id, (i.width, i.height))).collect();

        let mut warnings = Vec::new();
        let mut annotations = Vec::with_capacity(raw.annotations.len());
        for (index, ann) in raw.annotations.into_iter().enumerate() {
            if !known_categories.contains(&ann.category_id) {
                return Err(Error::UnknownCategory {
                    path: origin.to_path_buf(),
                    index,
                    category_id: ann.category_id,
                });
            }
            let Some(&(width, height)) = sizes.get(&ann.image_id) else {
                return Err(Error::InvalidRecord {
                    path: origin.to_path_buf(),
                    index,
                    message: format!("unknown image {}", ann.image_id),
                });
            };
            if !ann.bbox.is_valid() {
                return Err(Error::InvalidRecord {
                    path: origin.to_path_buf(),
                    index,
                    message: format!("invalid bbox {:?}", <[f64; 4]>::from(ann.bbox)),
                });
            }
            let b = ann.bbox;
            if b.x < 0.0 || b.y < 0.0 || b.right() > f64::from(width) || b.bottom() > f64::from(height) {
                warnings.push(format!(
                    "annotation {} lies partly outside image {} ({}x{})",
                    ann.id, ann.image_id, width, height
                ));
            }
            annotations.push(GroundTruthAnnotation {
                id: ann.id,
                image_id: ann.image_id,
                category_id: ann.category_id,
                bbox: b,
                area: ann.area.unwrap_or_else(|| b.area()),
                ignore: ann.iscrowd != 0 || ann.ignore.unwrap_or(0) != 0,
            });
        }

        Ok(GroundTruth {
            images,
            annotations,
            categories,
            warnings,
        })
    }

    pub fn image_ids(&self) -> Vec<u64> {
        self.images.iter().map(|i| i.id).collect()
    }

    pub fn category_ids(&self) -> Vec<u64> {
        self.categories.iter().map(|c| c.id).collect()
    }

    /// Annotations grouped per image, preserving file order.
    pub fn by_image(&self) -> BTreeMap<u64, Vec<&GroundTruthAnnotation>> {
        let mut out: BTreeMap<u64, Vec<&GroundTruthAnnotation>> =
            self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for ann in &self.annotations {
            out.entry(ann.image_id).or_default().push(ann);
        }
        out
    }

    pub fn to_json_string(&self) -> String {
        let annotations = self
            .annotations
            .iter()
            .map(|a| RawAnnotation {
                id: a.id,
                image_id: a.image_id,
                category_id: a.category_id,
                bbox: a.bbox,
                area: Some(a.area),
                iscrowd: u8::from(a.ignore),
                ignore: None,
            })
            .collect();
        let out = RawGroundTruthOut {
            images: &self.images,
            annotations,
            categories: &self.categories,
        };
        serde_json::to_string_pretty(&out).expect("ground truth serializes")
    }
}

/// A scored prediction. `det_id` is assigned at load time and is the stable
/// tie-break key wherever scores are equal.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub det_id: u64,
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub score: f64,
}

/// One record of a COCO detection-results array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultRecord {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: BBox,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<Shift>,
}

/// Coordinate frame of prediction boxes on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    /// Boxes are in the shifted canvas and get de-shifted on load.
    Shifted,
    /// Boxes are already in the original image frame.
    Canonical,
}

#[derive(Debug, Clone)]
pub enum PredictionSource {
    /// Every `*.json` file in the directory.
    Directory(PathBuf),
    Files(Vec<PathBuf>),
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub grid: ShiftGrid,
    pub frame: Frame,
    /// Shift for records that carry none, neither in-record nor by file name.
    pub default_shift: Option<Shift>,
}

impl LoadOptions {
    pub fn new(grid: ShiftGrid, frame: Frame) -> Self {
        LoadOptions {
            grid,
            frame,
            default_shift: None,
        }
    }
}

/// Parses `shift_<dx>_<dy>.json`.
pub fn shift_from_file_name(path: &Path) -> Option<Shift> {
    let stem = path.file_name()?.to_str()?.strip_suffix(".json")?;
    let rest = stem.strip_prefix("shift_")?;
    let (dx, dy) = rest.split_once('_')?;
    Some(Shift::new(dx.parse().ok()?, dy.parse().ok()?))
}

pub fn shift_file_name(s: Shift) -> String {
    format!("shift_{}_{}.json", s.dx, s.dy)
}

/// Predictions for every `(image, shift)` cell of a grid, canonical frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftedPredictionSet {
    grid: ShiftGrid,
    image_ids: Vec<u64>,
    /// `cells[image_index * grid.len() + shift_index]`
    cells: Vec<Vec<Detection>>,
    /// Whether the input said anything about a cell; absent cells are empty.
    present: Vec<bool>,
    next_det_id: u64,
    skipped_records: usize,
}

impl ShiftedPredictionSet {
    /// An empty set over `image_ids` (deduplicated and sorted).
    pub fn new(grid: ShiftGrid, image_ids: impl IntoIterator<Item = u64>) -> Self {
        let mut ids: Vec<u64> = image_ids.into_iter().collect();
        ids.sort_unstable();
        ids.dedup();
        let n = ids.len() * grid.len();
        ShiftedPredictionSet {
            grid,
            image_ids: ids,
            cells: vec![Vec::new(); n],
            present: vec![false; n],
            next_det_id: 0,
            skipped_records: 0,
        }
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

    pub fn image_index(&self, image_id: u64) -> Option<usize> {
        self.image_ids.binary_search(&image_id).ok()
    }

    /// Records dropped at load because their image is not in the image set.
    pub fn skipped_records(&self) -> usize {
        self.skipped_records
    }

    fn slot(&self, image_index: usize, shift_index: usize) -> usize {
        image_index * self.grid.len() + shift_index
    }

    /// Appends a canonical-frame detection and returns its `det_id`.
    pub fn push(&mut self, image_id: u64, shift: Shift, category_id: u64, bbox: BBox, score: f64) -> Result<u64> {
        let img = self.image_index(image_id).ok_or(Error::UnknownImage { image_id })?;
        let s = self.grid.index_of(shift).ok_or(Error::OutsideGrid {
            shift,
            max_shift: self.grid.max_shift,
        })?;
        let det_id = self.next_det_id;
        self.next_det_id += 1;
        let slot = self.slot(img, s);
        self.present[slot] = true;
        self.cells[slot].push(Detection {
            det_id,
            image_id,
            category_id,
            bbox,
            score,
        });
        Ok(det_id)
    }

    /// Marks a cell as covered by the input even though it may stay empty.
    pub fn mark_present(&mut self, image_id: u64, shift: Shift) {
        if let (Some(i), Some(s)) = (self.image_index(image_id), self.grid.index_of(shift)) {
            let slot = self.slot(i, s);
            self.present[slot] = true;
        }
    }

    pub fn cell(&self, image_id: u64, shift: Shift) -> Option<&[Detection]> {
        let i = self.image_index(image_id)?;
        let s = self.grid.index_of(shift)?;
        Some(&self.cells[self.slot(i, s)])
    }

    pub fn cell_at(&self, image_index: usize, shift_index: usize) -> &[Detection] {
        &self.cells[self.slot(image_index, shift_index)]
    }

    /// Cells the input never mentioned, in `(image, shift)` order.
    pub fn missing_cells(&self) -> Vec<(u64, Shift)> {
        let mut out = Vec::new();
        for (i, &image_id) in self.image_ids.iter().enumerate() {
            for s in 0..self.grid.len() {
                if !self.present[self.slot(i, s)] {
                    out.push((image_id, self.grid.shift_at(s)));
                }
            }
        }
        out
    }

    pub fn num_detections(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    /// The sub-grid `{0..=max_shift}^2` with det_ids preserved.
    pub fn restrict(&self, max_shift: u32) -> Result<Self> {
        if max_shift > self.grid.max_shift {
            return Err(Error::InvalidConfig(format!(
                "cannot restrict a grid with max shift {} to {}",
                self.grid.max_shift, max_shift
            )));
        }
        let grid = ShiftGrid::new(max_shift);
        let mut out = Self::new(grid, self.image_ids.iter().copied());
        for i in 0..self.image_ids.len() {
            for (s, shift) in grid.shifts().enumerate() {
                let src = self.slot(i, self.grid.index_of(shift).expect("sub-grid"));
                let dst = out.slot(i, s);
                out.cells[dst] = self.cells[src].clone();
                out.present[dst] = self.present[src];
            }
        }
        out.next_det_id = self.next_det_id;
        Ok(out)
    }

    /// Loads COCO detection results for the images in `image_ids`.
    ///
    /// Shift comes from the record's `shift` field, else the file name
    /// `shift_<dx>_<dy>.json`, else `options.default_shift`. Files are read in
    /// `(shift, name)` order and `det_id`s follow file order.
    pub fn load(source: &PredictionSource, image_ids: &[u64], options: LoadOptions) -> Result<Self> {
        let mut files = match source {
            PredictionSource::Directory(dir) => {
                let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
                let mut files = Vec::new();
                for entry in entries {
                    let path = entry.map_err(|e| Error::io(dir, e))?.path();
                    if path.extension().and_then(|e| e.to_str()) == Some("json") && path.is_file() {
                        files.push(path);
                    }
                }
                files
            }
            PredictionSource::Files(files) => files.clone(),
        };
        files.sort_by(|a, b| {
            let key = |p: &PathBuf| (shift_from_file_name(p).map_or((1, Shift::ZERO), |s| (0, s)), p.clone());
            key(a).cmp(&key(b))
        });

        let mut set = Self::new(options.grid, image_ids.iter().copied());
        for path in &files {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            set.ingest(&text, path, options)?;
        }
        Ok(set)
    }

    /// Ingests one results array; `origin` labels diagnostics and may carry
    /// a `shift_<dx>_<dy>.json` file name.
    pub fn ingest(&mut self, text: &str, origin: &Path, options: LoadOptions) -> Result<()> {
        let records: Vec<ResultRecord> = serde_json::from_str(text).map_err(|e| Error::parse(origin, e))?;
        let file_shift = shift_from_file_name(origin);
        if let Some(s) = file_shift {
            if !self.grid.contains(s) {
                return Err(Error::ShiftOutsideGrid {
                    path: origin.to_path_buf(),
                    index: 0,
                    shift: s,
                    max_shift: self.grid.max_shift,
                });
            }
            for id in self.image_ids.clone() {
                self.mark_present(id, s);
            }
        }
        for (index, rec) in records.into_iter().enumerate() {
            let shift = rec
                .shift
                .or(file_shift)
                .or(options.default_shift)
                .ok_or_else(|| Error::MissingShift {
                    path: origin.to_path_buf(),
                    index,
                })?;
            if !self.grid.contains(shift) {
                return Err(Error::ShiftOutsideGrid {
                    path: origin.to_path_buf(),
                    index,
                    shift,
                    max_shift: self.grid.max_shift,
                });
            }
            if !(0.0..=1.0).contains(&rec.score) {
                return Err(Error::ScoreOutOfRange {
                    path: origin.to_path_buf(),
                    index,
                    score: rec.score,
                });
            }
            if !rec.bbox.is_valid() {
                return Err(Error::InvalidRecord {
                    path: origin.to_path_buf(),
                    index,
                    message: format!("invalid bbox {:?}", <[f64; 4]>::from(rec.bbox)),
                });
            }
            if self.image_index(rec.image_id).is_none() {
                self.skipped_records += 1;
                continue;
            }
            let bbox = match options.frame {
                Frame::Shifted => unapply_shift(&rec.bbox, shift),
                Frame::Canonical => rec.bbox,
            };
            self.push(rec.image_id, shift, rec.category_id, bbox, rec.score)?;
        }
        Ok(())
    }

    /// Records of one shift in `det_id` order, boxes in the requested frame.
    pub fn shift_records(&self, shift: Shift, frame: Frame) -> Vec<ResultRecord> {
        let Some(s) = self.grid.index_of(shift) else {
            return Vec::new();
        };
        let mut dets: Vec<&Detection> = (0..self.image_ids.len())
            .flat_map(|i| self.cells[self.slot(i, s)].iter())
            .collect();
        dets.sort_by_key(|d| d.det_id);
        dets.into_iter()
            .map(|d| ResultRecord {
                image_id: d.image_id,
                category_id: d.category_id,
                bbox: match frame {
                    Frame::Shifted => apply_shift(&d.bbox, shift),
                    Frame::Canonical => d.bbox,
                },
                score: d.score,
                shift: None,
            })
            .collect()
    }

    /// Writes one `shift_<dx>_<dy>.json` per grid shift into `dir`.
    pub fn write_dir(&self, dir: &Path, frame: Frame) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for shift in self.grid.shifts() {
            let path = dir.join(shift_file_name(shift));
            let text = serde_json::to_string(&self.shift_records(shift, frame)).expect("records serialize");
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// How shifted canvases are sized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingPolicy {
    /// Each image gets its own `(width + M, height + M)` canvas.
    #[default]
    Minimal,
    /// One canvas for all images: the largest image plus `M`.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: u64,
    pub shifted_name: String,
    /// Also the offset at which the original image is pasted.
    pub shift: Shift,
    pub canvas: [u32; 2],
    pub original: [u32; 2],
}

/// Instructions for an external harness that renders the shifted images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftManifest {
    pub max_shift: u32,
    pub canvas_policy: PaddingPolicy,
    pub entries: Vec<ManifestEntry>,
}

fn shifted_name(img: &ImageRecord, s: Shift) -> String {
    match img.file_name.as_deref() {
        Some(name) => {
            let path = Path::new(name);
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or(name);
            match path.extension().and_then(|e| e.to_str()) {
                Some(ext) => format!("{stem}_shift_{}_{}.{ext}", s.dx, s.dy),
                None => format!("{stem}_shift_{}_{}", s.dx, s.dy),
            }
        }
        None => format!("{:012}_shift_{}_{}.png", img.id, s.dx, s.dy),
    }
}

pub fn emit_shift_manifest(images: &[ImageRecord], grid: ShiftGrid, policy: PaddingPolicy) -> Result<ShiftManifest> {
    if images.is_empty() {
        return Err(Error::EmptyImageSet);
    }
    let m = grid.max_shift;
    let global = [
        images.iter().map(|i| i.width).max().unwrap_or(0) + m,
        images.iter().map(|i| i.height).max().unwrap_or(0) + m,
    ];
    let mut sorted: Vec<&ImageRecord> = images.iter().collect();
    sorted.sort_by_key(|i| i.id);
    let entries = sorted
        .into_iter()
        .flat_map(|img| {
            let canvas = match policy {
                PaddingPolicy::Minimal => [img.width + m, img.height + m],
                PaddingPolicy::Global => global,
            };
            grid.shifts().map(move |shift| ManifestEntry {
                image_id: img.id,
                shifted_name: shifted_name(img, shift),
                shift,
                canvas,
                original: [img.width, img.height],
            })
        })
        .collect();
    Ok(ShiftManifest {
        max_shift: m,
        canvas_policy: policy,
        entries,
    })
}

impl ShiftManifest {
    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}
