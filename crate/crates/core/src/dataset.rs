//! Dataset manifests, image loading, and class-rebalancing bookkeeping.
//!
//! A manifest CSV (`id,path,role,split,label`) is the single source of truth
//! for which images exist and what they are; images are never discovered by
//! scanning directories. An optional JSON sidecar next to the manifest carries
//! survey areas and the patch size:
//!
//! ```json
//! {"survey_area_km2": {"test": 0.58}, "patch_size": [168, 168]}
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::index::sample as index_sample;

use crate::error::{Error, Result};
use crate::rng::stage_rng;

/// Default patch size when the manifest has no sidecar.
pub const DEFAULT_PATCH_SIZE: (usize, usize) = (64, 64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Target class label. `Starved` is the underrepresented (positive) class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetLabel {
    Starved,
    Large,
}

impl TargetLabel {
    pub fn parse(s: &str) -> Option<TargetLabel> {
        match s {
            "starved" => Some(TargetLabel::Starved),
            "large" => Some(TargetLabel::Large),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TargetLabel::Starved => "starved",
            TargetLabel::Large => "large",
        }
    }
}

/// What a record is: a target-task image with a class label, or a source-corpus
/// image with a category string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RecordKind {
    Target(TargetLabel),
    Source(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: u64,
    pub path: PathBuf,
    pub split: Split,
    pub kind: RecordKind,
    /// Replica bookkeeping: load the image mirrored left-right. Never set by
    /// the manifest loader; only by upsampling with the flip toggle.
    pub flip_horizontal: bool,
}

impl SampleRecord {
    pub fn is_target(&self) -> bool {
        matches!(self.kind, RecordKind::Target(_))
    }

    pub fn is_source(&self) -> bool {
        matches!(self.kind, RecordKind::Source(_))
    }

    pub fn target_label(&self) -> Option<TargetLabel> {
        match self.kind {
            RecordKind::Target(l) => Some(l),
            RecordKind::Source(_) => None,
        }
    }

    pub fn source_category(&self) -> Option<&str> {
        match &self.kind {
            RecordKind::Source(c) => Some(c.as_str()),
            RecordKind::Target(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    /// Surveyed area per split in km², when known.
    pub survey_area_km2: BTreeMap<Split, f64>,
    pub patch_size: (usize, usize),
}

impl DatasetManifest {
    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count_target(&self, split: Split, label: TargetLabel) -> usize {
        self.records_in(split)
            .filter(|r| r.target_label() == Some(label))
            .count()
    }

    fn max_id(&self) -> u64 {
        self.records.iter().map(|r| r.id).max().unwrap_or(0)
    }
}

/// A fixed-size grayscale patch with intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    pub pixels: Array2<f64>,
}

impl ImagePatch {
    pub fn new(pixels: Array2<f64>) -> ImagePatch {
        ImagePatch { pixels }
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }
}

/// Path of the optional JSON sidecar for a manifest: same stem, `.json`.
pub fn sidecar_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("json")
}

#[derive(serde::Deserialize)]
struct SidecarFile {
    #[serde(default)]
    survey_area_km2: BTreeMap<String, f64>,
    #[serde(default)]
    patch_size: Option<[usize; 2]>,
}

/// Load a manifest CSV plus its optional sidecar.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
            ),
            _ => Error::Csv {
                path: path.to_path_buf(),
                source: e,
            },
        })?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        })?
        .clone();
    let expected = ["id", "path", "role", "split", "label"];
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(Error::ManifestRow {
            path: path.to_path_buf(),
            row: 1,
            message: format!("header must be `id,path,role,split,label`, got `{headers:?}`"),
        });
    }

    let manifest_dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        // Row 1 is the header; data rows are reported starting at 2.
        let row_no = i + 2;
        let row = row.map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            source: e,
        })?;
        let field = |idx: usize| row.get(idx).unwrap_or("").trim();

        let id: u64 = field(0).parse().map_err(|_| Error::ManifestRow {
            path: path.to_path_buf(),
            row: row_no,
            message: format!("bad id `{}`", field(0)),
        })?;
        if !seen.insert(id) {
            return Err(Error::DuplicateId {
                path: path.to_path_buf(),
                id,
            });
        }

        let image_path = {
            let p = PathBuf::from(field(1));
            if p.is_absolute() {
                p
            } else {
                manifest_dir.join(p)
            }
        };

        let split = Split::parse(field(3)).ok_or_else(|| Error::ManifestRow {
            path: path.to_path_buf(),
            row: row_no,
            message: format!("unknown split `{}`", field(3)),
        })?;

        let kind = match field(2) {
            "target" => {
                let label = TargetLabel::parse(field(4)).ok_or_else(|| Error::ManifestRow {
                    path: path.to_path_buf(),
                    row: row_no,
                    message: format!("unknown target label `{}`", field(4)),
                })?;
                RecordKind::Target(label)
            }
            "source" => {
                let category = field(4);
                if category.is_empty() {
                    return Err(Error::ManifestRow {
                        path: path.to_path_buf(),
                        row: row_no,
                        message: "source record needs a non-empty category".to_string(),
                    });
                }
                RecordKind::Source(category.to_string())
            }
            other => {
                return Err(Error::ManifestRow {
                    path: path.to_path_buf(),
                    row: row_no,
                    message: format!("unknown role `{other}`"),
                });
            }
        };

        records.push(SampleRecord {
            id,
            path: image_path,
            split,
            kind,
            flip_horizontal: false,
        });
    }

    let side = sidecar_path(path);
    let (survey_area_km2, patch_size) = if side.exists() {
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let parsed: SidecarFile = serde_json::from_str(&text).map_err(|e| Error::Sidecar {
            path: side.clone(),
            message: e.to_string(),
        })?;
        let mut areas = BTreeMap::new();
        for (k, v) in parsed.survey_area_km2 {
            let split = Split::parse(&k).ok_or_else(|| Error::Sidecar {
                path: side.clone(),
                message: format!("unknown split `{k}` in survey_area_km2"),
            })?;
            if !(v > 0.0) {
                return Err(Error::Sidecar {
                    path: side.clone(),
                    message: format!("survey area for `{k}` must be > 0, got {v}"),
                });
            }
            areas.insert(split, v);
        }
        let patch = match parsed.patch_size {
            Some([h, w]) if h > 0 && w > 0 => (h, w),
            Some(bad) => {
                return Err(Error::Sidecar {
                    path: side,
                    message: format!("patch_size must be two positive integers, got {bad:?}"),
                });
            }
            None => DEFAULT_PATCH_SIZE,
        };
        (areas, patch)
    } else {
        (BTreeMap::new(), DEFAULT_PATCH_SIZE)
    };

    Ok(DatasetManifest {
        records,
        survey_area_km2,
        patch_size,
    })
}

/// Rec. 601 luma of an 8-bit RGB triple, scaled to [0, 1].
fn luma601(r: u8, g: u8, b: u8) -> f64 {
    (0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b)) / 255.0
}

/// Bilinear resize with pixel-center alignment and edge clamping.
pub fn resize_bilinear(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (src_h, src_w) = src.dim();
    let mut out = Array2::zeros((out_h, out_w));
    let sy = src_h as f64 / out_h as f64;
    let sx = src_w as f64 / out_w as f64;
    for i in 0..out_h {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (src_h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let wy = fy - y0 as f64;
        for j in 0..out_w {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (src_w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let wx = fx - x0 as f64;
            let top = src[[y0, x0]] * (1.0 - wx) + src[[y0, x1]] * wx;
            let bot = src[[y1, x0]] * (1.0 - wx) + src[[y1, x1]] * wx;
            out[[i, j]] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Decode an image file into a grayscale [0, 1] matrix (no resize).
fn decode_gray(path: &Path) -> Result<Array2<f64>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::Image {
            path: path.to_path_buf(),
            message: "zero-dimension image".to_string(),
        });
    }
    let rgb = img.to_rgb8();
    let mut gray = Array2::zeros((h, w));
    for (x, y, p) in rgb.enumerate_pixels() {
        gray[[y as usize, x as usize]] = luma601(p[0], p[1], p[2]);
    }
    Ok(gray)
}

/// Load the record's image: grayscale via Rec. 601 luma, bilinear resize to
/// `patch_size`, intensities in [0, 1].
pub fn load_image(record: &SampleRecord, patch_size: (usize, usize)) -> Result<ImagePatch> {
    let gray = decode_gray(&record.path)?;
    let (h, w) = patch_size;
    let mut pixels = if gray.dim() == (h, w) {
        gray
    } else {
        resize_bilinear(&gray, h, w)
    };
    if record.flip_horizontal {
        pixels = flip_lr(&pixels);
    }
    Ok(ImagePatch::new(pixels))
}

pub(crate) fn flip_lr(m: &Array2<f64>) -> Array2<f64> {
    let (h, w) = m.dim();
    Array2::from_shape_fn((h, w), |(i, j)| m[[i, w - 1 - j]])
}

/// Load patches for many records as a parallel map; output follows input order.
pub fn load_images(records: &[SampleRecord], patch_size: (usize, usize)) -> Result<Vec<ImagePatch>> {
    use rayon::prelude::*;
    records
        .par_iter()
        .map(|r| load_image(r, patch_size))
        .collect()
}

/// Replicate every train-split starved record `factor` times. Replicas get
/// fresh ids above the current maximum; all other records pass through.
pub fn upsample_starved(manifest: &DatasetManifest, factor: usize) -> Result<DatasetManifest> {
    upsample_starved_with(manifest, factor, false)
}

/// As [`upsample_starved`], optionally mirroring every second replica.
pub fn upsample_starved_with(
    manifest: &DatasetManifest,
    factor: usize,
    flip_replicas: bool,
) -> Result<DatasetManifest> {
    if factor == 0 {
        return Err(Error::InvalidArgument(
            "upsample factor must be >= 1".to_string(),
        ));
    }
    let mut next_id = manifest.max_id() + 1;
    let mut records = Vec::with_capacity(manifest.records.len());
    for r in &manifest.records {
        records.push(r.clone());
        let is_starved_train =
            r.split == Split::Train && r.target_label() == Some(TargetLabel::Starved);
        if is_starved_train {
            for k in 1..factor {
                let mut replica = r.clone();
                replica.id = next_id;
                replica.flip_horizontal = flip_replicas && k % 2 == 1;
                next_id += 1;
                records.push(replica);
            }
        }
    }
    Ok(DatasetManifest {
        records,
        survey_area_km2: manifest.survey_area_km2.clone(),
        patch_size: manifest.patch_size,
    })
}

/// Keep a seeded uniform subset of the large train class, sized
/// `round(ratio × starved_count)` and capped at the available count.
/// Starved records and the val/test splits are untouched.
pub fn subsample_large(
    manifest: &DatasetManifest,
    ratio: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(ratio > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "subsample ratio must be > 0, got {ratio}"
        )));
    }
    let starved = manifest.count_target(Split::Train, TargetLabel::Starved);
    let large = manifest.count_target(Split::Train, TargetLabel::Large);
    if starved == 0 {
        return Err(Error::TrainingData(
            "cannot subsample: train split has no starved records".to_string(),
        ));
    }
    if large == 0 {
        return Err(Error::TrainingData(
            "cannot subsample: train split has no large records".to_string(),
        ));
    }

    let want = ((ratio * starved as f64).round() as usize).min(large);
    let mut rng = stage_rng(seed, "subsample_large");
    let keep_positions: HashSet<usize> =
        index_sample(&mut rng, large, want).into_iter().collect();

    let mut large_seen = 0usize;
    let records = manifest
        .records
        .iter()
        .filter(|r| {
            let is_large_train =
                r.split == Split::Train && r.target_label() == Some(TargetLabel::Large);
            if is_large_train {
                let keep = keep_positions.contains(&large_seen);
                large_seen += 1;
                keep
            } else {
                true
            }
        })
        .cloned()
        .collect();

    Ok(DatasetManifest {
        records,
        survey_area_km2: manifest.survey_area_km2.clone(),
        patch_size: manifest.patch_size,
    })
}

/// Move `round(val_fraction × n_c)` train records of each target class to the
/// val split, uniformly at random with the given seed.
pub fn stratified_split(
    manifest: &DatasetManifest,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let mut rng = stage_rng(seed, "split");
    let mut move_ids: HashSet<u64> = HashSet::new();
    for label in [TargetLabel::Starved, TargetLabel::Large] {
        let ids: Vec<u64> = manifest
            .records_in(Split::Train)
            .filter(|r| r.target_label() == Some(label))
            .map(|r| r.id)
            .collect();
        if ids.is_empty() {
            return Err(Error::TrainingData(format!(
                "train split has no {} records",
                label.as_str()
            )));
        }
        let n_move = (val_fraction * ids.len() as f64).round() as usize;
        if n_move >= ids.len() {
            return Err(Error::TrainingData(format!(
                "val_fraction {val_fraction} would empty the {} train class",
                label.as_str()
            )));
        }
        for pos in index_sample(&mut rng, ids.len(), n_move) {
            move_ids.insert(ids[pos]);
        }
    }

    let records = manifest
        .records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if move_ids.contains(&r.id) {
                r.split = Split::Val;
            }
            r
        })
        .collect();

    Ok(DatasetManifest {
        records,
        survey_area_km2: manifest.survey_area_km2.clone(),
        patch_size: manifest.patch_size,
    })
}
