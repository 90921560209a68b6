//! Flat-file store.
//!
//! ```text
//! <root>/images/<sha256>                  uploaded bytes, never rewritten
//! <root>/samples/<id>/sample.json
//! <root>/samples/<id>/annotations/<n>.json one file per version
//! <root>/samples/<id>/prediction.json     latest prediction
//! <root>/runs/<run_id>/                   leave-one-out run outputs
//! ```

use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use maskfit_core::api::{AnnotationDoc, Prediction, SampleInfo, StoredAnnotation};
use maskfit_core::imaging::{self, GrayImage};
use maskfit_core::run::sha256_hex;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::ApiError;

pub const PGM: &str = "image/x-portable-graymap";
pub const PNG: &str = "image/png";

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<Option<T>, ApiError> {
    match std::fs::read(path) {
        Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes).map_err(ApiError::internal)?)),
        Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
        Err(e) => Err(ApiError::internal(e)),
    }
}

/// Writes via a temporary file and rename so readers never see half a file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ApiError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(ApiError::internal)?;
    std::fs::rename(&tmp, path).map_err(ApiError::internal)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ApiError> {
    let text = serde_json::to_vec_pretty(value).map_err(ApiError::internal)?;
    write_atomic(path, &text)
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ApiError> {
        let root = root.into();
        for sub in ["images", "samples", "runs"] {
            std::fs::create_dir_all(root.join(sub)).map_err(ApiError::internal)?;
        }
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn runs_dir(&self) -> PathBuf {
        self.root.join("runs")
    }

    /// Directory of run `id`, or 404 for ids that cannot name a run.
    pub fn run_dir(&self, id: &str) -> Result<PathBuf, ApiError> {
        if !valid_id(id) {
            return Err(ApiError::not_found("run", id));
        }
        Ok(self.runs_dir().join(id))
    }

    fn sample_dir(&self, id: &str) -> Result<PathBuf, ApiError> {
        if !valid_id(id) {
            return Err(ApiError::not_found("sample", id));
        }
        Ok(self.root.join("samples").join(id))
    }

    /// Stores an uploaded image. The id is derived from the content, so a
    /// repeated upload returns the existing sample.
    pub fn add_sample(&self, bytes: &[u8]) -> Result<(SampleInfo, bool), ApiError> {
        let content_type = if bytes.starts_with(b"\x89PNG") { PNG } else { PGM };
        let image = imaging::load_image(bytes)?;
        let sha = sha256_hex(bytes);
        let id = sha[..16].to_string();
        let dir = self.sample_dir(&id)?;
        if let Some(info) = read_json::<SampleInfo>(&dir.join("sample.json"))? {
            return Ok((info, false));
        }
        let image_path = self.root.join("images").join(&sha);
        if !image_path.exists() {
            write_atomic(&image_path, bytes)?;
        }
        std::fs::create_dir_all(dir.join("annotations")).map_err(ApiError::internal)?;
        let info = SampleInfo {
            id,
            content_type: content_type.to_string(),
            width: image.width(),
            height: image.height(),
            image_sha256: sha,
        };
        write_json(&dir.join("sample.json"), &info)?;
        Ok((info, true))
    }

    pub fn sample(&self, id: &str) -> Result<SampleInfo, ApiError> {
        read_json(&self.sample_dir(id)?.join("sample.json"))?.ok_or_else(|| ApiError::not_found("sample", id))
    }

    pub fn list_samples(&self) -> Result<Vec<SampleInfo>, ApiError> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(self.root.join("samples")).map_err(ApiError::internal)? {
            let entry = entry.map_err(ApiError::internal)?;
            if let Some(info) = read_json::<SampleInfo>(&entry.path().join("sample.json"))? {
                out.push(info);
            }
        }
        out.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(out)
    }

    pub fn image_bytes(&self, info: &SampleInfo) -> Result<Vec<u8>, ApiError> {
        std::fs::read(self.root.join("images").join(&info.image_sha256)).map_err(ApiError::internal)
    }

    pub fn image(&self, info: &SampleInfo) -> Result<GrayImage, ApiError> {
        Ok(imaging::load_image(&self.image_bytes(info)?)?)
    }

    fn annotation_versions(&self, id: &str) -> Result<Vec<u32>, ApiError> {
        let dir = self.sample_dir(id)?.join("annotations");
        let mut versions = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(ApiError::internal)? {
            let name = entry.map_err(ApiError::internal)?.file_name();
            if let Some(v) = name.to_str().and_then(|n| n.strip_suffix(".json")).and_then(|n| n.parse().ok()) {
                versions.push(v);
            }
        }
        versions.sort_unstable();
        Ok(versions)
    }

    pub fn annotation(&self, id: &str, version: Option<u32>) -> Result<Option<StoredAnnotation>, ApiError> {
        let version = match version {
            Some(v) => v,
            None => match self.annotation_versions(id)?.last() {
                Some(&v) => v,
                None => return Ok(None),
            },
        };
        read_json(&self.sample_dir(id)?.join("annotations").join(format!("{version:06}.json")))
    }

    pub fn annotation_history(&self, id: &str) -> Result<Vec<StoredAnnotation>, ApiError> {
        let mut out = Vec::new();
        for v in self.annotation_versions(id)? {
            out.extend(self.annotation(id, Some(v))?);
        }
        Ok(out)
    }

    /// Appends a new annotation version. Callers serialize writes per sample.
    pub fn put_annotation(&self, id: &str, annotation: AnnotationDoc) -> Result<StoredAnnotation, ApiError> {
        let version = self.annotation_versions(id)?.last().map_or(1, |v| v + 1);
        let stored = StoredAnnotation { version, annotation };
        let path = self.sample_dir(id)?.join("annotations").join(format!("{version:06}.json"));
        write_json(&path, &stored)?;
        Ok(stored)
    }

    pub fn prediction(&self, id: &str) -> Result<Option<Prediction>, ApiError> {
        read_json(&self.sample_dir(id)?.join("prediction.json"))
    }

    pub fn put_prediction(&self, id: &str, prediction: &Prediction) -> Result<(), ApiError> {
        write_json(&self.sample_dir(id)?.join("prediction.json"), prediction)
    }
}
