//! Request and response bodies shared by the HTTP service, its client and
//! the command line, plus the single-image operations behind them.

use serde::{Deserialize, Serialize};

use crate::dataset::{self, Annotation, CoinEntry, LandmarkPair};
use crate::error::{Error, Result};
use crate::imaging::{GrayImage, Point, RectRegion};
use crate::model::Model;
use crate::run::RunRecord;
use crate::sizing::{self, SizeChart};
use crate::trainer::{self, TrainConfig};

/// An annotation as placed by a reviewer; every part is optional until
/// sizing needs it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<LandmarkPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coin: Option<CoinEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_box: Option<RectRegion>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nose_box: Option<RectRegion>,
}

impl AnnotationDoc {
    /// Applies the manifest rules to whatever is present, and checks that
    /// boxes and points lie on a `width × height` image.
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if let Some(lm) = &self.landmarks {
            dataset::validate_landmarks(&lm.left, &lm.right)?;
            let bounds = RectRegion::new(0, 0, width, height);
            for (name, p) in [("landmarks.left", &lm.left), ("landmarks.right", &lm.right)] {
                if !bounds.contains(p) {
                    return Err(Error::validation(name, "point lies outside the image"));
                }
            }
        }
        if let Some(coin) = &self.coin {
            coin.to_reference()?;
        }
        for (name, b) in [("face_box", &self.face_box), ("nose_box", &self.nose_box)] {
            if let Some(b) = b {
                dataset::validate_box(name, b)?;
                b.check_within(width, height)
                    .map_err(|e| Error::validation(name, e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn px_per_mm(&self) -> Option<Result<f64>> {
        self.coin.as_ref().map(|c| c.to_reference().map(|r| r.px_per_mm()))
    }
}

impl From<&Annotation> for AnnotationDoc {
    fn from(a: &Annotation) -> Self {
        Self {
            landmarks: Some(LandmarkPair {
                left: a.left_nasal_wall,
                right: a.right_nasal_wall,
            }),
            coin: Some(a.scale.into()),
            face_box: Some(a.face_box),
            nose_box: Some(a.nose_box),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleInfo {
    pub id: String,
    pub content_type: String,
    pub width: usize,
    pub height: usize,
    pub image_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredAnnotation {
    pub version: u32,
    pub annotation: AnnotationDoc,
}

/// Everything stored for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleView {
    pub sample: SampleInfo,
    pub annotation: Option<StoredAnnotation>,
    pub prediction: Option<Prediction>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictRequest {
    /// Crop size to feed the model; defaults to the model's own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<[usize; 2]>,
}

/// Predicted landmarks in original-image pixels, plus their crop-space form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub landmarks: LandmarkPair,
    pub crop_landmarks: LandmarkPair,
    pub crop: [usize; 2],
}

/// Runs `model` on the nose box of `image` and maps the result back to
/// original coordinates.
pub fn predict(model: &Model, image: &GrayImage, nose_box: RectRegion, crop: Option<[usize; 2]>) -> Result<Prediction> {
    let [crop_w, crop_h] = crop.unwrap_or([model.crop_w, model.crop_h]);
    let (crop_img, chain) = dataset::preprocess_image(image, nose_box, crop_w, crop_h)?;
    let [l, r] = trainer::predict_landmarks(&model.params, &model.norm_stats, &crop_img)?;
    Ok(Prediction {
        landmarks: LandmarkPair {
            left: chain.map_point(l),
            right: chain.map_point(r),
        },
        crop_landmarks: LandmarkPair { left: l, right: r },
        crop: [crop_w, crop_h],
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LandmarkSource {
    Annotation,
    Prediction,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SizeRequest {
    /// Which landmarks to size from; by default reviewed annotation
    /// landmarks win over a prediction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<LandmarkSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeResponse {
    pub width_mm: f64,
    pub size: String,
    /// The width sits within the tolerance band of a size boundary, so the
    /// neighbouring size is acceptable too.
    pub in_tolerance_band: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_mm: Option<f64>,
    pub acceptable_sizes: Vec<String>,
    pub px_per_mm: f64,
    pub landmarks: LandmarkPair,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<LandmarkSource>,
}

/// Width, size and tolerance-band flag for two original-image landmarks.
pub fn size_landmarks(left: Point, right: Point, px_per_mm: f64, chart: &SizeChart) -> Result<SizeResponse> {
    let width_mm = sizing::width_mm(left, right, px_per_mm)?;
    let size = chart.classify(width_mm)?.to_string();
    let band = chart.band_containing(width_mm);
    Ok(SizeResponse {
        width_mm,
        size,
        in_tolerance_band: band.is_some(),
        boundary_mm: band.map(|k| chart.sizes()[k].upper_mm),
        acceptable_sizes: chart
            .acceptable_sizes(width_mm)?
            .into_iter()
            .map(str::to_string)
            .collect(),
        px_per_mm,
        landmarks: LandmarkPair { left, right },
        source: None,
    })
}

/// Picks the landmarks to size from: the requested source if it exists,
/// otherwise annotation landmarks before a prediction.
pub fn select_landmarks(
    annotation: Option<&AnnotationDoc>,
    prediction: Option<&Prediction>,
    source: Option<LandmarkSource>,
) -> Option<(LandmarkPair, LandmarkSource)> {
    let from_annotation = annotation.and_then(|a| a.landmarks.clone()).map(|l| (l, LandmarkSource::Annotation));
    let from_prediction = prediction.map(|p| (p.landmarks.clone(), LandmarkSource::Prediction));
    match source {
        Some(LandmarkSource::Annotation) => from_annotation,
        Some(LandmarkSource::Prediction) => from_prediction,
        None => from_annotation.or(from_prediction),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StartRunRequest {
    /// Manifest path as seen by the service.
    pub manifest: String,
    #[serde(default)]
    pub config: Option<TrainConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunState {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run_id: String,
    pub state: RunState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record: Option<RunRecord>,
}

/// Error body returned by every failing endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule: Option<String>,
}
