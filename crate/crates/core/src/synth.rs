//! Procedural nose images with exactly known landmarks, coin and width.
//!
//! Each sample is a grayscale "forehead and nose" scene: a bright coin disc of
//! the reference diameter, a lighter nose body, and two dark blobs marking the
//! lateral nasal walls exactly `alar_mm × px_per_mm` pixels apart. The nose
//! box is placed the way a detector would: sized in proportion to the nose
//! with some jitter, so the crop-space landmark positions vary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Annotation, ScaleReference, SampleRecord, COIN_DIAMETER_MM};
use crate::error::{Error, Result};
use crate::imaging::{save_pgm, GrayImage, Point, RectRegion};
use crate::sizing::SizeChart;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub seed: u64,
    pub count: usize,
    pub image_w: usize,
    pub image_h: usize,
    /// Caliper width range, millimetres.
    pub alar_mm: (f64, f64),
    pub px_per_mm: (f64, f64),
    /// Maximum tilt of the wall-to-wall line, radians.
    pub landmark_jitter: f64,
    /// Nose box width as a multiple of the wall-to-wall distance.
    pub box_ratio: (f64, f64),
    /// Nose box height over width.
    pub box_aspect: f64,
    /// Maximum displacement of the nose box centre, as a fraction of its size.
    pub box_offset_jitter: f64,
    /// Peak-to-peak amplitude of the linear illumination gradient.
    pub shading: f64,
    /// Amplitude of the additive uniform noise, in grey levels.
    pub noise: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 200,
            image_w: 640,
            image_h: 640,
            alar_mm: (30.0, 50.0),
            px_per_mm: (2.0, 6.0),
            landmark_jitter: 0.05,
            box_ratio: (1.35, 1.55),
            box_aspect: 0.75,
            box_offset_jitter: 0.05,
            shading: 40.0,
            noise: 8.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self, chart: &SizeChart) -> Result<()> {
        let range = |name: &str, (lo, hi): (f64, f64)| {
            if lo > 0.0 && hi > lo && hi.is_finite() {
                Ok(())
            } else {
                Err(Error::Argument(format!("{name} range ({lo}, {hi}) must be positive and non-empty")))
            }
        };
        range("alar_mm", self.alar_mm)?;
        range("px_per_mm", self.px_per_mm)?;
        range("box_ratio", self.box_ratio)?;
        if self.box_ratio.0 <= 1.0 {
            return Err(Error::Argument("box_ratio must exceed 1 so the walls fit in the box".into()));
        }
        if self.image_w == 0 || self.image_h == 0 || !(self.box_aspect > 0.0) {
            return Err(Error::Argument("image size and box aspect must be positive".into()));
        }
        for (name, v) in [
            ("landmark_jitter", self.landmark_jitter),
            ("box_offset_jitter", self.box_offset_jitter),
            ("shading", self.shading),
            ("noise", self.noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Argument(format!("{name} must be non-negative")));
            }
        }
        if chart.classify(self.alar_mm.0)? == chart.classify(self.alar_mm.1)? {
            return Err(Error::Argument("alar_mm range must span at least two chart sizes".into()));
        }
        Ok(())
    }
}

/// The values drawn for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drawn {
    pub alar_mm: f64,
    pub px_per_mm: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub record: SampleRecord,
    pub image: GrayImage,
    pub drawn: Drawn,
}

#[derive(Debug, Clone, Default)]
pub struct SyntheticCorpus {
    pub samples: Vec<SyntheticSample>,
}

pub fn sample_id(index: usize) -> String {
    format!("synth-{index:04}")
}

/// Generates `params.count` samples. Sample `i` draws from its own stream
/// seeded with `seed + i`, so output does not depend on evaluation order.
pub fn generate(params: &SynthParams, chart: &SizeChart) -> Result<SyntheticCorpus> {
    params.validate(chart)?;
    let samples = (0..params.count)
        .into_par_iter()
        .map(|i| generate_one(params, chart, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticCorpus { samples })
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.gen_range(lo..=hi)
}

fn symmetric(rng: &mut ChaCha8Rng, amp: f64) -> f64 {
    if amp > 0.0 {
        rng.gen_range(-amp..=amp)
    } else {
        0.0
    }
}

fn generate_one(p: &SynthParams, chart: &SizeChart, index: usize) -> Result<SyntheticSample> {
    let id = sample_id(index);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed.wrapping_add(index as u64));
    let alar_mm = uniform(&mut rng, p.alar_mm);
    let scale = uniform(&mut rng, p.px_per_mm);
    let alar_px = alar_mm * scale;
    let (w, h) = (p.image_w as f64, p.image_h as f64);
    let no_fit = |what: &str| Error::Geometry(format!("sample {id}: {what} does not fit in a {}x{} image", p.image_w, p.image_h));

    let box_w = (uniform(&mut rng, p.box_ratio) * alar_px).round();
    let box_h = (box_w * p.box_aspect).round().max(1.0);
    let coin_r = COIN_DIAMETER_MM * scale / 2.0;
    let gap = (0.05 + 0.1 * rng.gen::<f64>()) * box_h;
    let margin = (p.box_offset_jitter * box_w.max(box_h)).ceil() + 2.0;

    // nose centre, chosen so the box (with jitter) and the coin above it fit
    let cx_lo = box_w / 2.0 + margin;
    let cx_hi = w - box_w / 2.0 - margin;
    let cy_lo = 2.0 * coin_r + gap + box_h / 2.0 + margin + 2.0;
    let cy_hi = h - box_h / 2.0 - margin;
    if cx_lo > cx_hi {
        return Err(no_fit("nose box"));
    }
    if cy_lo > cy_hi {
        return Err(no_fit("coin above nose box"));
    }
    let cx = uniform(&mut rng, (cx_lo, cx_hi));
    let cy = uniform(&mut rng, (cy_lo, cy_hi));

    let tilt = symmetric(&mut rng, p.landmark_jitter);
    let half = Point::new(tilt.cos() * alar_px / 2.0, tilt.sin() * alar_px / 2.0);
    let left = Point::new(cx - half.x, cy - half.y);
    let right = Point::new(cx + half.x, cy + half.y);

    let bx = (cx - box_w / 2.0 + symmetric(&mut rng, p.box_offset_jitter) * box_w).round();
    let by = (cy - box_h / 2.0 + symmetric(&mut rng, p.box_offset_jitter) * box_h).round();
    let nose_box = RectRegion::new(bx as usize, by as usize, box_w as usize, box_h as usize);
    nose_box.check_within(p.image_w, p.image_h).map_err(|_| no_fit("nose box"))?;
    if !nose_box.contains(&left) || !nose_box.contains(&right) {
        return Err(Error::Geometry(format!("sample {id}: landmarks outside nose box")));
    }

    let coin_c = Point::new(
        (cx + symmetric(&mut rng, 0.3) * box_w / 2.0).clamp(coin_r + 1.0, w - coin_r - 1.0),
        by - gap - coin_r,
    );
    if coin_c.y - coin_r < 0.0 {
        return Err(no_fit("coin"));
    }
    let coin_p1 = Point::new(coin_c.x - coin_r, coin_c.y);
    let coin_p2 = Point::new(coin_c.x + coin_r, coin_c.y);

    let face_box = {
        let x0 = (bx.min(coin_c.x - coin_r) - margin).max(0.0);
        let y0 = (coin_c.y - coin_r - margin).max(0.0);
        let x1 = ((bx + box_w).max(coin_c.x + coin_r) + margin).min(w);
        let y1 = (by + box_h + margin).min(h);
        RectRegion::new(x0 as usize, y0 as usize, (x1 - x0) as usize, (y1 - y0) as usize)
    };

    let scene = Scene {
        base: 120.0 + 40.0 * rng.gen::<f64>(),
        gradient_dir: rng.gen_range(0.0..std::f64::consts::TAU),
        shading: p.shading,
        centre: Point::new(cx, cy),
        tilt,
        alar_px,
        left,
        right,
        coin_c,
        coin_r,
        coin_level: 215.0 + 25.0 * rng.gen::<f64>(),
    };
    let image = scene.render(p.image_w, p.image_h, p.noise, &mut rng)?;

    let mut meta = BTreeMap::new();
    meta.insert("pap_user".to_string(), serde_json::Value::Bool(rng.gen_bool(0.2)));
    let record = SampleRecord {
        id: id.clone(),
        image_path: PathBuf::from(format!("{id}.pgm")),
        annotation: Annotation::new(
            left,
            right,
            ScaleReference::Coin {
                p1: coin_p1,
                p2: coin_p2,
            },
            face_box,
            nose_box,
        )?,
        caliper_alar_mm: Some(alar_mm),
        ground_truth_size: Some(chart.classify(alar_mm)?.to_string()),
        meta,
    };
    Ok(SyntheticSample {
        record,
        image,
        drawn: Drawn {
            alar_mm,
            px_per_mm: scale,
        },
    })
}

struct Scene {
    base: f64,
    gradient_dir: f64,
    shading: f64,
    centre: Point,
    tilt: f64,
    alar_px: f64,
    left: Point,
    right: Point,
    coin_c: Point,
    coin_r: f64,
    coin_level: f64,
}

impl Scene {
    fn render(&self, w: usize, h: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<GrayImage> {
        let (gx, gy) = (self.gradient_dir.cos(), self.gradient_dir.sin());
        let diag = (w as f64).hypot(h as f64);
        let (cos_t, sin_t) = (self.tilt.cos(), self.tilt.sin());
        let a = self.alar_px;
        let wall_sigma = 0.06 * a;
        let nostril_sigma = 0.05 * a;
        // nostrils sit inward of the walls and slightly below them
        let nostril = |side: f64| {
            let u = side * 0.22 * a;
            let v = 0.08 * a;
            Point::new(self.centre.x + u * cos_t - v * sin_t, self.centre.y + u * sin_t + v * cos_t)
        };
        let nostrils = [nostril(-1.0), nostril(1.0)];
        let blob = |p: &Point, q: &Point, sigma: f64| {
            let d2 = (p.x - q.x).powi(2) + (p.y - q.y).powi(2);
            if d2 > 16.0 * sigma * sigma {
                0.0
            } else {
                (-d2 / (2.0 * sigma * sigma)).exp()
            }
        };

        let mut pixels = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let p = Point::new(x as f64 + 0.5, y as f64 + 0.5);
                let along = ((p.x - w as f64 / 2.0) * gx + (p.y - h as f64 / 2.0) * gy) / diag;
                let mut v = self.base + self.shading * along;

                // nose body: soft ellipse rising above the wall line
                let du = (p.x - self.centre.x) * cos_t + (p.y - self.centre.y) * sin_t;
                let dv = -(p.x - self.centre.x) * sin_t + (p.y - self.centre.y) * cos_t + 0.3 * a;
                let r2 = (du / (0.45 * a)).powi(2) + (dv / (0.6 * a)).powi(2);
                if r2 < 1.0 {
                    v += 25.0 * (1.0 - r2);
                }

                v -= 90.0 * (blob(&p, &self.left, wall_sigma) + blob(&p, &self.right, wall_sigma));
                v -= 50.0 * (blob(&p, &nostrils[0], nostril_sigma) + blob(&p, &nostrils[1], nostril_sigma));

                let coverage = (self.coin_r - p.distance(&self.coin_c) + 0.5).clamp(0.0, 1.0);
                v += coverage * (self.coin_level - v);

                v += symmetric(rng, noise);
                pixels.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
            }
        }
        GrayImage::new(w, h, pixels)
    }
}

impl SyntheticCorpus {
    pub fn records(&self) -> Vec<SampleRecord> {
        self.samples.iter().map(|s| s.record.clone()).collect()
    }

    /// Writes one PGM per sample plus `manifest.jsonl` into `dir`, returning
    /// the manifest path.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let name = format!("{}.pgm", s.record.id);
            let path = dir.join(&name);
            std::fs::write(&path, save_pgm(&s.image)).map_err(|e| Error::io(&path, e))?;
            entries.push(s.record.to_entry(name));
        }
        let manifest = dir.join("manifest.jsonl");
        std::fs::write(&manifest, dataset::write_manifest(&entries)?).map_err(|e| Error::io(&manifest, e))?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Difficulty {
    pub sizes: Vec<String>,
    pub counts: Vec<usize>,
    /// Fraction of measured samples inside any boundary tolerance band.
    pub band_fraction: f64,
    pub measured: usize,
}

/// Per-size counts and boundary-band share over samples with a caliper width.
pub fn corpus_difficulty(samples: &[SampleRecord], chart: &SizeChart) -> Result<Difficulty> {
    let widths: Vec<f64> = samples.iter().filter_map(|s| s.caliper_alar_mm).collect();
    if widths.is_empty() {
        return Err(Error::Argument("no samples with a caliper width".into()));
    }
    let mut counts = vec![0; chart.len()];
    let mut in_band = 0;
    for &w in &widths {
        counts[chart.classify_index(w)?] += 1;
        if chart.band_containing(w).is_some() {
            in_band += 1;
        }
    }
    Ok(Difficulty {
        sizes: chart.names().map(str::to_string).collect(),
        counts,
        band_fraction: in_band as f64 / widths.len() as f64,
        measured: widths.len(),
    })
}
