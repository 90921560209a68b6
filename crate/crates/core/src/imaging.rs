//! Grayscale rasters and the geometry that links processed crops back to the
//! original photograph.
//!
//! Coordinates are continuous with the origin at the top-left corner of the
//! image: pixel `(i, j)` covers `[i, i + 1) × [j, j + 1)` and its centre sits at
//! `(i + 0.5, j + 0.5)`. Under that convention a crop is a pure translation and
//! a resize is a pure scaling, which keeps [`TransformChain`] exactly affine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point in pixel coordinates. Serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Geometry(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(Error::Geometry(format!(
                "{width}x{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> u8) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }
}

/// Axis-aligned pixel rectangle. Serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "[usize; 4]", into = "[usize; 4]")]
pub struct RectRegion {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl RectRegion {
    pub const fn new(x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self { x0, y0, w, h }
    }

    /// Checks that the region is non-empty and lies inside a `width × height` image.
    pub fn check_within(&self, width: usize, height: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::Geometry(format!(
                "region {}x{} has an empty side",
                self.w, self.h
            )));
        }
        if self.x0 + self.w > width || self.y0 + self.h > height {
            return Err(Error::Geometry(format!(
                "region ({}, {}, {}, {}) exceeds {}x{} image",
                self.x0, self.y0, self.w, self.h, width, height
            )));
        }
        Ok(())
    }

    /// True when `p` lies inside the region's continuous extent (edges included).
    pub fn contains(&self, p: &Point) -> bool {
        p.x >= self.x0 as f64
            && p.y >= self.y0 as f64
            && p.x <= (self.x0 + self.w) as f64
            && p.y <= (self.y0 + self.h) as f64
    }
}

impl From<[usize; 4]> for RectRegion {
    fn from([x0, y0, w, h]: [usize; 4]) -> Self {
        Self { x0, y0, w, h }
    }
}

impl From<RectRegion> for [usize; 4] {
    fn from(r: RectRegion) -> Self {
        [r.x0, r.y0, r.w, r.h]
    }
}

/// One affine step `p' = (p - offset) * scale`, applied per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformStep {
    pub scale_x: f64,
    pub scale_y: f64,
    pub offset_x: f64,
    pub offset_y: f64,
}

impl TransformStep {
    pub const IDENTITY: TransformStep = TransformStep {
        scale_x: 1.0,
        scale_y: 1.0,
        offset_x: 0.0,
        offset_y: 0.0,
    };

    pub fn translation(offset_x: f64, offset_y: f64) -> Self {
        Self {
            offset_x,
            offset_y,
            ..Self::IDENTITY
        }
    }

    pub fn scaling(scale_x: f64, scale_y: f64) -> Self {
        Self {
            scale_x,
            scale_y,
            ..Self::IDENTITY
        }
    }

    pub fn forward(&self, p: Point) -> Point {
        Point::new(
            (p.x - self.offset_x) * self.scale_x,
            (p.y - self.offset_y) * self.scale_y,
        )
    }

    pub fn inverse(&self, p: Point) -> Point {
        Point::new(
            p.x / self.scale_x + self.offset_x,
            p.y / self.scale_y + self.offset_y,
        )
    }

    fn is_invertible(&self) -> bool {
        self.scale_x > 0.0
            && self.scale_y > 0.0
            && self.scale_x.is_finite()
            && self.scale_y.is_finite()
            && self.offset_x.is_finite()
            && self.offset_y.is_finite()
    }
}

/// Ordered steps taking original-image coordinates to processed coordinates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformChain {
    steps: Vec<TransformStep>,
}

impl TransformChain {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn from_steps(steps: Vec<TransformStep>) -> Result<Self> {
        let mut chain = Self::identity();
        for step in steps {
            chain.push(step)?;
        }
        Ok(chain)
    }

    pub fn push(&mut self, step: TransformStep) -> Result<()> {
        if !step.is_invertible() {
            return Err(Error::Geometry(format!(
                "transform step is not invertible: {step:?}"
            )));
        }
        self.steps.push(step);
        Ok(())
    }

    pub fn steps(&self) -> &[TransformStep] {
        &self.steps
    }

    /// Original space to processed space.
    pub fn forward(&self, p: Point) -> Point {
        self.steps.iter().fold(p, |acc, step| step.forward(acc))
    }

    /// Processed space back to original space.
    pub fn map_point(&self, p: Point) -> Point {
        self.steps.iter().rev().fold(p, |acc, step| step.inverse(acc))
    }
}

/// Applies the inverse of `chain` to a processed-space point.
pub fn map_point(chain: &TransformChain, p: Point) -> Point {
    chain.map_point(p)
}

const PGM_MAGIC: &[u8; 2] = b"P5";

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderCursor<'a> {
    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn read_uint(&mut self, field: &'static str) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            let detail = match self.bytes.get(self.pos) {
                Some(b) => format!("expected a decimal integer, found byte 0x{b:02x}"),
                None => "header ended before this field".to_string(),
            };
            return Err(Error::Format { field, detail });
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse().map_err(|e| Error::Format {
            field,
            detail: format!("{text}: {e}"),
        })
    }
}

/// Decodes a binary 8-bit PGM (`P5`, maxval 255). Header comments are skipped.
pub fn load_pgm(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.len() < 2 || &bytes[..2] != PGM_MAGIC {
        let found = String::from_utf8_lossy(&bytes[..bytes.len().min(2)]).into_owned();
        return Err(Error::Format {
            field: "magic",
            detail: format!("expected P5, found {found:?}"),
        });
    }
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.read_uint("width")?;
    let height = cur.read_uint("height")?;
    let maxval = cur.read_uint("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format {
            field: if width == 0 { "width" } else { "height" },
            detail: "must be positive".into(),
        });
    }
    if maxval != 255 {
        return Err(Error::Format {
            field: "maxval",
            detail: format!("only 255 is supported, found {maxval}"),
        });
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        Some(b) => {
            return Err(Error::Format {
                field: "maxval",
                detail: format!("expected whitespace after maxval, found 0x{b:02x}"),
            })
        }
        None => {
            return Err(Error::Truncated {
                expected: width * height,
                got: 0,
            })
        }
    }
    let expected = width * height;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            got: payload.len(),
        });
    }
    GrayImage::new(width, height, payload[..expected].to_vec())
}

/// Encodes as binary PGM with a minimal canonical header.
pub fn save_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

fn luma(r: u8, g: u8, b: u8) -> u8 {
    // weights scaled by 1000 so the half-up rounding is exact integer arithmetic
    let weighted = 299 * r as u32 + 587 * g as u32 + 114 * b as u32;
    ((weighted + 500) / 1000) as u8
}

/// Decodes a PNG and converts it to grayscale (luma 0.299/0.587/0.114, rounded
/// half-up). Alpha is ignored; 16-bit channels are reduced to 8 bits.
pub fn load_png(bytes: &[u8]) -> Result<GrayImage> {
    let png_err = |e: png::DecodingError| Error::Format {
        field: "png",
        detail: e.to_string(),
    };
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| Error::Format {
        field: "png",
        detail: "image too large".into(),
    })?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (width, height) = (info.width as usize, info.height as usize);
    let data = &buf[..info.buffer_size()];
    let stride = info.line_size;
    let channels = info.color_type.samples();
    let mut pixels = Vec::with_capacity(width * height);
    for row in data.chunks(stride).take(height) {
        for px in row[..width * channels].chunks_exact(channels) {
            pixels.push(match info.color_type {
                png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => px[0],
                png::ColorType::Rgb | png::ColorType::Rgba => luma(px[0], px[1], px[2]),
                png::ColorType::Indexed => {
                    return Err(Error::Format {
                        field: "png",
                        detail: "palette was not expanded".into(),
                    })
                }
            });
        }
    }
    GrayImage::new(width, height, pixels)
}

/// Sniffs the container and decodes PGM or PNG.
pub fn load_image(bytes: &[u8]) -> Result<GrayImage> {
    if bytes.starts_with(b"\x89PNG") {
        load_png(bytes)
    } else {
        load_pgm(bytes)
    }
}

/// Copies `region` out of `img`. The returned step maps source coordinates
/// into crop coordinates.
pub fn crop(img: &GrayImage, region: RectRegion) -> Result<(GrayImage, TransformStep)> {
    region.check_within(img.width, img.height)?;
    let mut pixels = Vec::with_capacity(region.w * region.h);
    for y in region.y0..region.y0 + region.h {
        let start = y * img.width + region.x0;
        pixels.extend_from_slice(&img.pixels[start..start + region.w]);
    }
    let out = GrayImage::new(region.w, region.h, pixels)?;
    Ok((
        out,
        TransformStep::translation(region.x0 as f64, region.y0 as f64),
    ))
}

/// Bilinear resize with pixel-centre alignment and edge clamping.
pub fn resize_bilinear(
    img: &GrayImage,
    out_w: usize,
    out_h: usize,
) -> Result<(GrayImage, TransformStep)> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Geometry(format!(
            "target dimensions must be positive, got {out_w}x{out_h}"
        )));
    }
    let (in_w, in_h) = (img.width, img.height);
    let ratio_x = in_w as f64 / out_w as f64;
    let ratio_y = in_h as f64 / out_h as f64;

    // horizontal taps are shared by every row
    let taps_x: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|dx| sample_taps(dx, ratio_x, in_w))
        .collect();

    let mut pixels = Vec::with_capacity(out_w * out_h);
    for dy in 0..out_h {
        let (y0, y1, fy) = sample_taps(dy, ratio_y, in_h);
        let row0 = &img.pixels[y0 * in_w..(y0 + 1) * in_w];
        let row1 = &img.pixels[y1 * in_w..(y1 + 1) * in_w];
        for &(x0, x1, fx) in &taps_x {
            let top = row0[x0] as f64 + (row0[x1] as f64 - row0[x0] as f64) * fx;
            let bottom = row1[x0] as f64 + (row1[x1] as f64 - row1[x0] as f64) * fx;
            let v = top + (bottom - top) * fy;
            pixels.push((v + 0.5).floor().clamp(0.0, 255.0) as u8);
        }
    }
    let out = GrayImage::new(out_w, out_h, pixels)?;
    Ok((
        out,
        TransformStep::scaling(out_w as f64 / in_w as f64, out_h as f64 / in_h as f64),
    ))
}

fn sample_taps(dst: usize, ratio: f64, len: usize) -> (usize, usize, f64) {
    let src = ((dst as f64 + 0.5) * ratio - 0.5).clamp(0.0, (len - 1) as f64);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(len - 1);
    (lo, hi, src - lo as f64)
}
