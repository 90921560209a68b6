//! End-to-end leave-one-out run: manifest in, fold results and sizing report
//! out, with a [`RunRecord`] tying the files together.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{self, hex, PreparedSample, SampleRecord};
use crate::error::{Error, Result};
use crate::sizing::{self, Report, SizeChart, SizingOutcome};
use crate::trainer::{self, FoldResult, TrainConfig};

pub const RUN_FILE: &str = "run.json";
pub const FOLDS_FILE: &str = "folds.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub id: String,
    pub reason: String,
}

/// Scores every fold: mean crop-space landmarks are mapped back to the
/// original image, measured with the sample's coin scale and compared with
/// its caliper width. Samples without a caliper width are skipped.
pub fn fold_outcomes(
    folds: &[FoldResult],
    prepared: &[PreparedSample],
    records: &[SampleRecord],
    chart: &SizeChart,
) -> Result<Vec<SizingOutcome>> {
    let chains: HashMap<&str, _> = prepared.iter().map(|p| (p.id.as_str(), &p.chain)).collect();
    let by_id: HashMap<&str, &SampleRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut out = Vec::with_capacity(folds.len());
    for f in folds {
        let (Some(chain), Some(rec)) = (chains.get(f.id.as_str()), by_id.get(f.id.as_str())) else {
            return Err(Error::Argument(format!("fold `{}` has no matching sample", f.id)));
        };
        let Some(truth) = rec.caliper_alar_mm else {
            continue;
        };
        let [l, r] = f.mean_points();
        let predicted = sizing::width_mm(chain.map_point(l), chain.map_point(r), rec.annotation.scale_px_per_mm())?;
        out.push(SizingOutcome::evaluate(&f.id, truth, predicted, chart)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub predicted: Report,
    pub manual: Option<Report>,
    pub outcomes: Vec<SizingOutcome>,
    pub manual_outcomes: Vec<SizingOutcome>,
    pub excluded: Vec<Exclusion>,
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut s = self.predicted.to_text();
        if let Some(m) = &self.manual {
            s.push('\n');
            s.push_str(&m.to_text());
        }
        if !self.excluded.is_empty() {
            s.push_str(&format!("\nexcluded samples: {}\n", self.excluded.len()));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: TrainConfig,
    pub chart: SizeChart,
    pub manifest_checksum: String,
    pub samples: usize,
    pub folds_path: String,
    pub folds_checksum: String,
    pub report_path: String,
    pub report_checksum: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunRecord {
    /// Reads `run.json` from `dir` and checks that the referenced files exist
    /// with the recorded checksums.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let record: RunRecord = serde_json::from_str(&text)?;
        for (name, want) in [
            (&record.folds_path, &record.folds_checksum),
            (&record.report_path, &record.report_checksum),
        ] {
            let p = dir.join(name);
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            if &sha256_hex(&bytes) != want {
                return Err(Error::validation(name.clone(), "checksum does not match run record"));
            }
        }
        Ok(record)
    }

    pub fn load_report(&self, dir: &Path) -> Result<RunReport> {
        let p = dir.join(&self.report_path);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Deterministic run id from the manifest checksum and configuration.
pub fn derive_run_id(manifest_checksum: &str, config: &TrainConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(manifest_checksum.as_bytes());
    h.update(serde_json::to_vec(config)?);
    Ok(hex(&h.finalize())[..16].to_string())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Runs leave-one-out over `manifest` and writes `folds.jsonl`,
/// `report.json`, `report.txt` and `run.json` into `out_dir`.
pub fn run_loocv(
    manifest: &Path,
    config: &TrainConfig,
    chart: &SizeChart,
    out_dir: &Path,
    run_id: Option<String>,
) -> Result<RunRecord> {
    let started_unix = unix_now();
    let manifest_bytes = std::fs::read(manifest).map_err(|e| Error::io(manifest, e))?;
    let manifest_checksum = sha256_hex(&manifest_bytes);
    let records = dataset::load_manifest(manifest, chart)?;
    let run_id = match run_id {
        Some(id) => id,
        None => derive_run_id(&manifest_checksum, config)?,
    };
    tracing::info!(%run_id, samples = records.len(), "starting leave-one-out run");

    let output = trainer::loocv(&records, config)?;
    let outcomes = fold_outcomes(&output.folds, &output.prepared, &records, chart)?;
    let kept: Vec<SampleRecord> = records
        .iter()
        .filter(|r| output.prepared.iter().any(|p| p.id == r.id))
        .cloned()
        .collect();
    let baseline = sizing::manual_baseline(&kept, chart)?;

    let predicted = Report::new("predicted", &sizing::confusion(&outcomes, chart)?, chart)?;
    let manual = if baseline.outcomes.is_empty() {
        None
    } else {
        Some(Report::new("manual", &sizing::confusion(&baseline.outcomes, chart)?, chart)?)
    };
    let report = RunReport {
        predicted,
        manual,
        outcomes,
        manual_outcomes: baseline.outcomes,
        excluded: output
            .excluded
            .iter()
            .map(|(id, e)| Exclusion {
                id: id.clone(),
                reason: e.to_string(),
            })
            .collect(),
    };

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let folds_text = trainer::write_folds_jsonl(&output.folds)?;
    let report_text = serde_json::to_string_pretty(&report)?;
    write(&out_dir.join(FOLDS_FILE), folds_text.as_bytes())?;
    write(&out_dir.join(REPORT_FILE), report_text.as_bytes())?;
    write(&out_dir.join(REPORT_TEXT_FILE), report.to_text().as_bytes())?;

    let record = RunRecord {
        run_id,
        config: config.clone(),
        chart: chart.clone(),
        manifest_checksum,
        samples: output.folds.len(),
        folds_path: FOLDS_FILE.into(),
        folds_checksum: sha256_hex(folds_text.as_bytes()),
        report_path: REPORT_FILE.into(),
        report_checksum: sha256_hex(report_text.as_bytes()),
        started_unix,
        finished_unix: unix_now(),
    };
    write(&out_dir.join(RUN_FILE), serde_json::to_string_pretty(&record)?.as_bytes())?;
    Ok(record)
}

/// Lists run directories under `root` that hold a valid run record, sorted by id.
pub fn list_runs(root: &Path) -> Result<Vec<(PathBuf, RunRecord)>> {
    let mut out = Vec::new();
    let entries = match std::fs::read_dir(root) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(root, e)),
    };
    for entry in entries {
        let dir = entry.map_err(|e| Error::io(root, e))?.path();
        if dir.join(RUN_FILE).is_file() {
            match RunRecord::load(&dir) {
                Ok(r) => out.push((dir, r)),
                Err(e) => tracing::warn!(dir = %dir.display(), error = %e, "skipping run"),
            }
        }
    }
    out.sort_by(|a, b| a.1.run_id.cmp(&b.1.run_id));
    Ok(out)
}
