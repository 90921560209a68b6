//! Sample manifests, annotations and the normalized design matrix fed to the
//! network.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::{self, Point, RectRegion, TransformChain};
use crate::sizing::SizeChart;

/// Diameter of the reference coin placed on the forehead, in millimetres.
pub const COIN_DIAMETER_MM: f64 = 28.65;

/// Plausible range for a caliper nose-width measurement, exclusive.
pub const CALIPER_RANGE_MM: (f64, f64) = (10.0, 80.0);

/// How pixels map to millimetres for one photograph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleReference {
    /// Two opposite points on the coin rim, in original-image pixels.
    Coin { p1: Point, p2: Point },
    /// Scale measured elsewhere.
    Direct { px_per_mm: f64 },
}

impl ScaleReference {
    pub fn px_per_mm(&self) -> f64 {
        match *self {
            ScaleReference::Coin { p1, p2 } => p1.distance(&p2) / COIN_DIAMETER_MM,
            ScaleReference::Direct { px_per_mm } => px_per_mm,
        }
    }
}

/// Wire form of [`ScaleReference`]: either `{"p1", "p2"}` or `{"px_per_mm"}`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoinEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p1: Option<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p2: Option<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub px_per_mm: Option<f64>,
}

impl CoinEntry {
    pub fn to_reference(&self) -> Result<ScaleReference> {
        let reference = match (self.p1, self.p2, self.px_per_mm) {
            (Some(p1), Some(p2), None) => ScaleReference::Coin { p1, p2 },
            (None, None, Some(px_per_mm)) => ScaleReference::Direct { px_per_mm },
            (_, _, Some(_)) => {
                return Err(Error::validation(
                    "coin",
                    "give either coin endpoints or px_per_mm, not both",
                ))
            }
            _ => {
                return Err(Error::validation(
                    "coin",
                    "needs both endpoints p1 and p2, or px_per_mm",
                ))
            }
        };
        let scale = reference.px_per_mm();
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::validation("coin", "derived scale must be positive"));
        }
        Ok(reference)
    }
}

impl From<ScaleReference> for CoinEntry {
    fn from(r: ScaleReference) -> Self {
        match r {
            ScaleReference::Coin { p1, p2 } => CoinEntry {
                p1: Some(p1),
                p2: Some(p2),
                px_per_mm: None,
            },
            ScaleReference::Direct { px_per_mm } => CoinEntry {
                px_per_mm: Some(px_per_mm),
                ..Default::default()
            },
        }
    }
}

/// Labelled landmarks are stored in original-image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Annotation {
    pub left_nasal_wall: Point,
    pub right_nasal_wall: Point,
    pub scale: ScaleReference,
    pub face_box: RectRegion,
    pub nose_box: RectRegion,
}

impl Annotation {
    pub fn new(
        left_nasal_wall: Point,
        right_nasal_wall: Point,
        scale: ScaleReference,
        face_box: RectRegion,
        nose_box: RectRegion,
    ) -> Result<Self> {
        let a = Self {
            left_nasal_wall,
            right_nasal_wall,
            scale,
            face_box,
            nose_box,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        validate_landmarks(&self.left_nasal_wall, &self.right_nasal_wall)?;
        CoinEntry::from(self.scale).to_reference()?;
        validate_box("face_box", &self.face_box)?;
        validate_box("nose_box", &self.nose_box)?;
        Ok(())
    }

    pub fn scale_px_per_mm(&self) -> f64 {
        self.scale.px_per_mm()
    }
}

/// Shared landmark rules, also applied to partial annotations by the service.
pub fn validate_landmarks(left: &Point, right: &Point) -> Result<()> {
    for (name, p) in [("landmarks.left", left), ("landmarks.right", right)] {
        if !p.x.is_finite() || !p.y.is_finite() {
            return Err(Error::validation(name, "coordinates must be finite"));
        }
    }
    if left == right {
        return Err(Error::validation(
            "landmarks",
            "left and right nasal walls must be distinct points",
        ));
    }
    Ok(())
}

pub fn validate_box(name: &str, r: &RectRegion) -> Result<()> {
    if r.w == 0 || r.h == 0 {
        return Err(Error::validation(name, "width and height must be at least 1"));
    }
    Ok(())
}

/// `px_per_mm` recorded for an annotation.
pub fn scale_px_per_mm(annotation: &Annotation) -> f64 {
    annotation.scale_px_per_mm()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkPair {
    pub left: Point,
    pub right: Point,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub landmarks: LandmarkPair,
    pub coin: CoinEntry,
    pub face_box: RectRegion,
    pub nose_box: RectRegion,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alar_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub size: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, serde_json::Value>,
    #[serde(flatten, skip_serializing)]
    pub unknown: BTreeMap<String, serde_json::Value>,
}

/// One participant.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub annotation: Annotation,
    pub caliper_alar_mm: Option<f64>,
    pub ground_truth_size: Option<String>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl SampleRecord {
    /// Validates an entry. Relative image paths are resolved against `base_dir`.
    pub fn from_entry(entry: ManifestEntry, base_dir: &Path, chart: &SizeChart) -> Result<Self> {
        if entry.id.is_empty() {
            return Err(Error::validation("id", "must not be empty"));
        }
        if !entry.unknown.is_empty() {
            let keys: Vec<_> = entry.unknown.keys().collect();
            tracing::warn!(id = %entry.id, ?keys, "ignoring unknown manifest fields");
        }
        let annotation = Annotation::new(
            entry.landmarks.left,
            entry.landmarks.right,
            entry.coin.to_reference()?,
            entry.face_box,
            entry.nose_box,
        )?;
        if let Some(mm) = entry.alar_mm {
            if !(mm > CALIPER_RANGE_MM.0 && mm < CALIPER_RANGE_MM.1) {
                return Err(Error::validation(
                    "alar_mm",
                    format!(
                        "caliper width {mm} outside ({}, {}) mm",
                        CALIPER_RANGE_MM.0, CALIPER_RANGE_MM.1
                    ),
                ));
            }
        }
        if let Some(size) = &entry.size {
            chart
                .index_of(size)
                .map_err(|_| Error::validation("size", format!("`{size}` is not a chart size")))?;
            if let Some(mm) = entry.alar_mm {
                let expected = chart.classify(mm)?;
                if expected != size {
                    return Err(Error::validation(
                        "size",
                        format!("`{size}` disagrees with caliper width {mm} mm (chart says `{expected}`)"),
                    ));
                }
            }
        }
        let image_path = {
            let p = PathBuf::from(&entry.image);
            if p.is_absolute() {
                p
            } else {
                base_dir.join(p)
            }
        };
        Ok(Self {
            id: entry.id,
            image_path,
            annotation,
            caliper_alar_mm: entry.alar_mm,
            ground_truth_size: entry.size,
            meta: entry.meta,
        })
    }

    /// Manifest line for this record, with `image` written as given.
    pub fn to_entry(&self, image: impl Into<String>) -> ManifestEntry {
        let a = &self.annotation;
        ManifestEntry {
            id: self.id.clone(),
            image: image.into(),
            landmarks: LandmarkPair {
                left: a.left_nasal_wall,
                right: a.right_nasal_wall,
            },
            coin: a.scale.into(),
            face_box: a.face_box,
            nose_box: a.nose_box,
            alar_mm: self.caliper_alar_mm,
            size: self.ground_truth_size.clone(),
            meta: self.meta.clone(),
            unknown: BTreeMap::new(),
        }
    }

    pub fn load_image(&self) -> Result<imaging::GrayImage> {
        let bytes = std::fs::read(&self.image_path).map_err(|e| Error::io(&self.image_path, e))?;
        imaging::load_image(&bytes)
    }
}

/// Parses JSON Lines manifest text without touching the filesystem.
pub fn parse_manifest(text: &str, base_dir: &Path, chart: &SizeChart) -> Result<Vec<SampleRecord>> {
    let mut out: Vec<SampleRecord> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::Validation {
            line: Some(line_no),
            field: "<json>".into(),
            rule: e.to_string(),
        })?;
        let record = SampleRecord::from_entry(entry, base_dir, chart).map_err(|e| e.at_line(line_no))?;
        if out.iter().any(|r| r.id == record.id) {
            return Err(Error::Validation {
                line: Some(line_no),
                field: "id".into(),
                rule: format!("duplicate id `{}`", record.id),
            });
        }
        out.push(record);
    }
    Ok(out)
}

/// Reads and validates a manifest; every referenced image must exist.
pub fn load_manifest(path: &Path, chart: &SizeChart) -> Result<Vec<SampleRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let records = parse_manifest(&text, base, chart)?;
    for r in &records {
        if !r.image_path.is_file() {
            return Err(Error::io(
                &r.image_path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "image file not found"),
            ));
        }
    }
    Ok(records)
}

pub fn write_manifest(entries: &[ManifestEntry]) -> Result<String> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

/// Dataset-wide scalars that scale and centre inputs and targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub x_max: f64,
    pub x_mean: f64,
    pub y_max: f64,
    pub y_mean: f64,
}

/// `(max, mean of value / max)` over a non-empty set of non-negative values.
fn scalar_stats(values: impl Iterator<Item = f64>, what: &str) -> Result<(f64, f64)> {
    let mut max = f64::NEG_INFINITY;
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        max = max.max(v);
        sum += v;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Argument(format!("no {what} values to normalize")));
    }
    if !(max > 0.0) || !max.is_finite() {
        return Err(Error::Numeric(format!("{what} maximum must be positive, got {max}")));
    }
    Ok((max, sum / n as f64 / max))
}

impl NormStats {
    pub fn fit<'a>(
        inputs: impl Iterator<Item = &'a [u8]> + Clone,
        targets: impl Iterator<Item = &'a [f64; 4]> + Clone,
    ) -> Result<Self> {
        let (x_max, x_mean) = scalar_stats(inputs.flat_map(|r| r.iter().map(|&v| v as f64)), "input")?;
        let (y_max, y_mean) = scalar_stats(targets.flat_map(|t| t.iter().copied()), "target")?;
        Ok(Self {
            x_max,
            x_mean,
            y_max,
            y_mean,
        })
    }

    pub fn normalize_input_value(&self, v: f64) -> f64 {
        v / self.x_max - self.x_mean
    }

    pub fn normalize_inputs(&self, pixels: &[u8]) -> Vec<f64> {
        pixels
            .iter()
            .map(|&p| self.normalize_input_value(p as f64))
            .collect()
    }

    pub fn normalize_targets(&self, y: &[f64; 4]) -> [f64; 4] {
        y.map(|v| v / self.y_max - self.y_mean)
    }

    /// `y = (y_norm + y_mean) × y_max`.
    pub fn denormalize_targets(&self, y_norm: &[f64; 4]) -> [f64; 4] {
        y_norm.map(|v| (v + self.y_mean) * self.y_max)
    }
}

pub fn denormalize_targets(y_norm: &[f64; 4], stats: &NormStats) -> [f64; 4] {
    stats.denormalize_targets(y_norm)
}

/// A sample reduced to its resized nose crop and crop-space landmark targets.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub id: String,
    pub pixels: Vec<u8>,
    /// `(x_left, y_left, x_right, y_right)` in crop pixels.
    pub target: [f64; 4],
    /// Original image to crop space.
    pub chain: TransformChain,
}

/// Crops the nose box, resizes it to `crop_w × crop_h` and maps the
/// labelled landmarks into crop space.
pub fn preprocess_image(
    image: &imaging::GrayImage,
    nose_box: RectRegion,
    crop_w: usize,
    crop_h: usize,
) -> Result<(imaging::GrayImage, TransformChain)> {
    let (nose, crop_step) = imaging::crop(image, nose_box)?;
    let (resized, resize_step) = imaging::resize_bilinear(&nose, crop_w, crop_h)?;
    let chain = TransformChain::from_steps(vec![crop_step, resize_step])?;
    Ok((resized, chain))
}

pub fn prepare_sample(record: &SampleRecord, crop_w: usize, crop_h: usize) -> Result<PreparedSample> {
    let a = &record.annotation;
    for (name, p) in [("landmarks.left", &a.left_nasal_wall), ("landmarks.right", &a.right_nasal_wall)] {
        if !a.nose_box.contains(p) {
            return Err(Error::validation(name, "landmark falls outside nose_box"));
        }
    }
    let image = record.load_image()?;
    let (crop, chain) = preprocess_image(&image, a.nose_box, crop_w, crop_h)?;
    let l = chain.forward(a.left_nasal_wall);
    let r = chain.forward(a.right_nasal_wall);
    Ok(PreparedSample {
        id: record.id.clone(),
        pixels: crop.pixels().to_vec(),
        target: [l.x, l.y, r.x, r.y],
        chain,
    })
}

#[derive(Debug)]
pub struct Prepared {
    pub samples: Vec<PreparedSample>,
    /// Samples that could not be prepared, with the reason.
    pub excluded: Vec<(String, Error)>,
}

/// Prepares every record, in parallel, keeping manifest order.
pub fn prepare_samples(records: &[SampleRecord], crop_w: usize, crop_h: usize) -> Prepared {
    let results: Vec<_> = records
        .par_iter()
        .map(|r| (r.id.clone(), prepare_sample(r, crop_w, crop_h)))
        .collect();
    let mut prepared = Prepared {
        samples: Vec::with_capacity(results.len()),
        excluded: Vec::new(),
    };
    for (id, res) in results {
        match res {
            Ok(s) => prepared.samples.push(s),
            Err(e) => {
                tracing::warn!(%id, error = %e, "sample excluded");
                prepared.excluded.push((id, e));
            }
        }
    }
    prepared
}

/// Normalized inputs (one row per sample) and their 4-column targets.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    targets: Vec<[f64; 4]>,
}

impl DesignMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, targets: Vec<[f64; 4]>) -> Result<Self> {
        if values.len() != rows * cols || targets.len() != rows {
            return Err(Error::Shape(format!(
                "design matrix {rows}x{cols} with {} values and {} targets",
                values.len(),
                targets.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            values,
            targets,
        })
    }

    /// Normalizes `samples` with `stats`.
    pub fn assemble<'a>(samples: impl IntoIterator<Item = &'a PreparedSample>, stats: &NormStats) -> Result<Self> {
        let mut values = Vec::new();
        let mut targets = Vec::new();
        let mut cols = None;
        for s in samples {
            match cols {
                None => cols = Some(s.pixels.len()),
                Some(c) if c != s.pixels.len() => {
                    return Err(Error::Shape(format!(
                        "sample {} has {} pixels, expected {c}",
                        s.id,
                        s.pixels.len()
                    )))
                }
                _ => {}
            }
            values.extend(s.pixels.iter().map(|&p| stats.normalize_input_value(p as f64)));
            targets.push(stats.normalize_targets(&s.target));
        }
        let rows = targets.len();
        Self::new(rows, cols.unwrap_or(0), values, targets)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn target(&self, i: usize) -> &[f64; 4] {
        &self.targets[i]
    }

    pub fn targets(&self) -> &[[f64; 4]] {
        &self.targets
    }

    /// SHA-256 over the little-endian bytes of every value and target.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.rows as u64).to_le_bytes());
        h.update((self.cols as u64).to_le_bytes());
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        for t in &self.targets {
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug)]
pub struct DesignBuild {
    pub matrix: DesignMatrix,
    pub stats: NormStats,
    pub ids: Vec<String>,
    /// Original image to crop space, one per row.
    pub chains: Vec<TransformChain>,
    pub excluded: Vec<(String, Error)>,
}

/// Loads, crops, resizes and unwraps every sample, then fits [`NormStats`]
/// over all of them and normalizes.
pub fn build_design_matrix(samples: &[SampleRecord], crop_w: usize, crop_h: usize) -> Result<DesignBuild> {
    let prepared = prepare_samples(samples, crop_w, crop_h);
    if prepared.samples.is_empty() {
        return Err(Error::Argument("no sample could be prepared".into()));
    }
    let stats = NormStats::fit(
        prepared.samples.iter().map(|s| s.pixels.as_slice()),
        prepared.samples.iter().map(|s| &s.target),
    )?;
    let matrix = DesignMatrix::assemble(&prepared.samples, &stats)?;
    Ok(DesignBuild {
        matrix,
        stats,
        ids: prepared.samples.iter().map(|s| s.id.clone()).collect(),
        chains: prepared.samples.iter().map(|s| s.chain.clone()).collect(),
        excluded: prepared.excluded,
    })
}
