//! Nose width recovery, size-chart classification with the boundary tolerance
//! rule, and the confusion-matrix metrics used to score a sizing run.

use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::dataset::SampleRecord;
use crate::error::{Error, Result};
use crate::imaging::Point;

/// Fraction of a boundary value inside which either neighbouring size is accepted.
pub const DEFAULT_TOLERANCE: f64 = 0.02;

/// Physical distance between two original-image points, in millimetres.
pub fn width_mm(left: Point, right: Point, px_per_mm: f64) -> Result<f64> {
    if !(px_per_mm > 0.0) || !px_per_mm.is_finite() {
        return Err(Error::Argument(format!(
            "scale must be a positive number of px/mm, got {px_per_mm}"
        )));
    }
    Ok(left.distance(&right) / px_per_mm)
}

/// `(boundary × (1 − fraction), boundary × (1 + fraction))`.
pub fn tolerance_band(boundary_mm: f64, fraction: f64) -> (f64, f64) {
    (boundary_mm * (1.0 - fraction), boundary_mm * (1.0 + fraction))
}

/// One size interval `[lower_mm, upper_mm)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeBand {
    /// Short code used in manifests, e.g. `"M"`.
    pub name: String,
    /// Human-readable label, e.g. `"Medium"`.
    #[serde(default)]
    pub label: String,
    pub lower_mm: f64,
    /// `null` in JSON means unbounded.
    #[serde(with = "unbounded")]
    pub upper_mm: f64,
}

mod unbounded {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_some(v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Ordered, contiguous size intervals covering `[0, ∞)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SizeChartFile", into = "SizeChartFile")]
pub struct SizeChart {
    sizes: Vec<SizeBand>,
    tolerance: f64,
}

#[derive(Serialize, Deserialize)]
struct SizeChartFile {
    sizes: Vec<SizeBand>,
    #[serde(default = "default_tolerance")]
    tolerance: f64,
}

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

impl TryFrom<SizeChartFile> for SizeChart {
    type Error = Error;

    fn try_from(f: SizeChartFile) -> Result<Self> {
        SizeChart::new(f.sizes, f.tolerance)
    }
}

impl From<SizeChart> for SizeChartFile {
    fn from(c: SizeChart) -> Self {
        SizeChartFile {
            sizes: c.sizes,
            tolerance: c.tolerance,
        }
    }
}

impl SizeChart {
    pub fn new(sizes: Vec<SizeBand>, tolerance: f64) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::validation("sizes", "a chart needs at least two sizes"));
        }
        if !(0.0..0.5).contains(&tolerance) {
            return Err(Error::validation("tolerance", "must lie in [0, 0.5)"));
        }
        if sizes[0].lower_mm != 0.0 {
            return Err(Error::validation("sizes[0].lower_mm", "first size must start at 0"));
        }
        if sizes.last().unwrap().upper_mm != f64::INFINITY {
            return Err(Error::validation("sizes", "last size must be unbounded"));
        }
        for (i, band) in sizes.iter().enumerate() {
            if !(band.upper_mm > band.lower_mm) {
                return Err(Error::validation(
                    format!("sizes[{i}]"),
                    "upper limit must exceed lower limit",
                ));
            }
            if let Some(next) = sizes.get(i + 1) {
                if next.lower_mm != band.upper_mm {
                    return Err(Error::validation(
                        format!("sizes[{}].lower_mm", i + 1),
                        "intervals must be contiguous",
                    ));
                }
            }
            if sizes[..i].iter().any(|b| b.name == band.name) {
                return Err(Error::validation(format!("sizes[{i}].name"), "duplicate size name"));
            }
        }
        Ok(Self { sizes, tolerance })
    }

    /// The Eson nasal mask chart: Small `[0, 37)`, Medium `[37, 41)`,
    /// Large `[41, 45)` and a Too Large bucket from 45 mm upwards.
    pub fn eson() -> Self {
        let band = |name: &str, label: &str, lower_mm: f64, upper_mm: f64| SizeBand {
            name: name.into(),
            label: label.into(),
            lower_mm,
            upper_mm,
        };
        Self::new(
            vec![
                band("S", "Small", 0.0, 37.0),
                band("M", "Medium", 37.0, 41.0),
                band("L", "Large", 41.0, 45.0),
                band("TL", "Too Large", 45.0, f64::INFINITY),
            ],
            DEFAULT_TOLERANCE,
        )
        .expect("eson chart is valid")
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Result<Self> {
        self.tolerance = tolerance;
        Self::new(self.sizes, tolerance)
    }

    pub fn sizes(&self) -> &[SizeBand] {
        &self.sizes
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.sizes.iter().map(|b| b.name.as_str())
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.sizes
            .iter()
            .position(|b| b.name == name)
            .ok_or_else(|| Error::Argument(format!("`{name}` is not a size in this chart")))
    }

    pub fn classify_index(&self, width_mm: f64) -> Result<usize> {
        if !width_mm.is_finite() || width_mm < 0.0 {
            return Err(Error::Argument(format!(
                "width must be finite and non-negative, got {width_mm}"
            )));
        }
        Ok(self
            .sizes
            .iter()
            .position(|b| b.lower_mm <= width_mm && width_mm < b.upper_mm)
            .expect("contiguous chart covers [0, inf)"))
    }

    pub fn classify(&self, width_mm: f64) -> Result<&str> {
        Ok(&self.sizes[self.classify_index(width_mm)?].name)
    }

    /// The internal boundary whose tolerance band contains `width_mm`, as the
    /// index of the size just below it.
    pub fn band_containing(&self, width_mm: f64) -> Option<usize> {
        self.sizes[..self.sizes.len() - 1]
            .iter()
            .enumerate()
            .find(|(_, b)| {
                let (lo, hi) = tolerance_band(b.upper_mm, self.tolerance);
                lo <= width_mm && width_mm <= hi
            })
            .map(|(i, _)| i)
    }

    /// Sizes that count as correct for someone whose true width is `width_mm`.
    pub fn acceptable_sizes(&self, width_mm: f64) -> Result<Vec<&str>> {
        let exact = self.classify_index(width_mm)?;
        let mut out = vec![exact];
        if let Some(k) = self.band_containing(width_mm) {
            for i in [k, k + 1] {
                if !out.contains(&i) {
                    out.push(i);
                }
            }
        }
        out.sort_unstable();
        Ok(out.into_iter().map(|i| self.sizes[i].name.as_str()).collect())
    }

    pub fn is_correct(&self, truth_width_mm: f64, predicted: &str) -> Result<bool> {
        let predicted = self.index_of(predicted)?;
        if self.classify_index(truth_width_mm)? == predicted {
            return Ok(true);
        }
        Ok(self
            .band_containing(truth_width_mm)
            .is_some_and(|k| predicted == k || predicted == k + 1))
    }
}

impl Default for SizeChart {
    fn default() -> Self {
        Self::eson()
    }
}

/// Sizing result for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizingOutcome {
    pub sample_id: String,
    pub truth_width_mm: f64,
    pub predicted_width_mm: f64,
    pub truth_size: String,
    pub predicted_size: String,
    pub correct_with_tolerance: bool,
}

impl SizingOutcome {
    pub fn evaluate(
        sample_id: impl Into<String>,
        truth_width_mm: f64,
        predicted_width_mm: f64,
        chart: &SizeChart,
    ) -> Result<Self> {
        let truth_size = chart.classify(truth_width_mm)?.to_string();
        let predicted_size = chart.classify(predicted_width_mm)?.to_string();
        let correct_with_tolerance = chart.is_correct(truth_width_mm, &predicted_size)?;
        Ok(Self {
            sample_id: sample_id.into(),
            truth_width_mm,
            predicted_width_mm,
            truth_size,
            predicted_size,
            correct_with_tolerance,
        })
    }
}

/// Result of [`manual_baseline`].
#[derive(Debug, Clone, Default)]
pub struct BaselineOutcomes {
    pub outcomes: Vec<SizingOutcome>,
    /// Sample ids without a caliper measurement.
    pub skipped: Vec<String>,
}

/// Sizes every sample from its labelled landmarks and coin scale and scores it
/// against the caliper measurement.
pub fn manual_baseline(samples: &[SampleRecord], chart: &SizeChart) -> Result<BaselineOutcomes> {
    let mut out = BaselineOutcomes::default();
    for s in samples {
        let Some(truth) = s.caliper_alar_mm else {
            out.skipped.push(s.id.clone());
            continue;
        };
        let a = &s.annotation;
        let measured = width_mm(a.left_nasal_wall, a.right_nasal_wall, a.scale_px_per_mm())?;
        out.outcomes
            .push(SizingOutcome::evaluate(s.id.clone(), truth, measured, chart)?);
    }
    if !out.skipped.is_empty() {
        tracing::warn!(count = out.skipped.len(), "samples without caliper width skipped");
    }
    Ok(out)
}

/// Square count grid, rows = actual size, columns = predicted size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<u64>>", into = "Vec<Vec<u64>>")]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl TryFrom<Vec<Vec<u64>>> for ConfusionMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<u64>>) -> Result<Self> {
        ConfusionMatrix::from_rows(&rows)
    }
}

impl From<ConfusionMatrix> for Vec<Vec<u64>> {
    fn from(cm: ConfusionMatrix) -> Self {
        cm.rows()
    }
}

impl ConfusionMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("confusion matrix must be square and non-empty".into()));
        }
        Ok(Self {
            n,
            counts: rows.concat(),
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual * self.n + predicted]
    }

    pub fn increment(&mut self, actual: usize, predicted: usize) {
        self.counts[actual * self.n + predicted] += 1;
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.n).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    pub fn row_total(&self, actual: usize) -> u64 {
        (0..self.n).map(|j| self.get(actual, j)).sum()
    }

    pub fn col_total(&self, predicted: usize) -> u64 {
        (0..self.n).map(|i| self.get(i, predicted)).sum()
    }
}

/// Builds the actual-vs-predicted grid. Outcomes accepted only through the
/// tolerance band are counted on the diagonal at the predicted size, so the
/// trace equals the number of correct outcomes.
pub fn confusion(outcomes: &[SizingOutcome], chart: &SizeChart) -> Result<ConfusionMatrix> {
    if outcomes.is_empty() {
        return Err(Error::Argument("no outcomes to tabulate".into()));
    }
    let mut cm = ConfusionMatrix::zeros(chart.len());
    for o in outcomes {
        let actual = chart.index_of(&o.truth_size)?;
        let predicted = chart.index_of(&o.predicted_size)?;
        if o.correct_with_tolerance {
            cm.increment(predicted, predicted);
        } else {
            cm.increment(actual, predicted);
        }
    }
    Ok(cm)
}

/// Exact ratio of counts. Kept unreduced so reports show the raw tallies.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Option<Self> {
        (den > 0).then_some(Self { num, den })
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Percentage rounded half-up to `decimals` places, as an integer count of
    /// `10^-decimals` percent units. Exact integer arithmetic.
    pub fn percent_scaled(&self, decimals: u32) -> u64 {
        let scale = 100 * 10u64.pow(decimals);
        (2 * scale * self.num + self.den) / (2 * self.den)
    }

    /// Whole-number percentage, half-up.
    pub fn percent(&self) -> u64 {
        self.percent_scaled(0)
    }

    pub fn percent_string(&self, decimals: u32) -> String {
        let v = self.percent_scaled(decimals);
        if decimals == 0 {
            return format!("{v}%");
        }
        let d = 10u64.pow(decimals);
        format!("{}.{:0width$}%", v / d, v % d, width = decimals as usize)
    }
}

impl PartialEq for Fraction {
    fn eq(&self, other: &Self) -> bool {
        self.num as u128 * other.den as u128 == other.num as u128 * self.den as u128
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: Fraction,
    pub within_one: Fraction,
    /// `None` where the actual-size row is empty.
    pub sensitivity: Vec<Option<Fraction>>,
    /// `None` where the predicted-size column is empty.
    pub ppv: Vec<Option<Fraction>>,
}

pub fn metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Argument("confusion matrix is empty".into()));
    }
    let mut far = 0;
    for a in 0..cm.size() {
        for p in 0..cm.size() {
            if a.abs_diff(p) >= 2 {
                far += cm.get(a, p);
            }
        }
    }
    Ok(Metrics {
        accuracy: Fraction::new(cm.trace(), total).unwrap(),
        within_one: Fraction::new(total - far, total).unwrap(),
        sensitivity: (0..cm.size())
            .map(|k| Fraction::new(cm.get(k, k), cm.row_total(k)))
            .collect(),
        ppv: (0..cm.size())
            .map(|k| Fraction::new(cm.get(k, k), cm.col_total(k)))
            .collect(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioReport {
    pub num: u64,
    pub den: u64,
    pub value: f64,
    /// Whole-number percentage, rounded half-up.
    pub percent: u64,
}

impl From<Fraction> for RatioReport {
    fn from(f: Fraction) -> Self {
        Self {
            num: f.num,
            den: f.den,
            value: f.value(),
            percent: f.percent(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Totals {
    pub total: u64,
    pub correct: u64,
    pub actual: Vec<u64>,
    pub predicted: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerSize {
    pub sizes: Vec<String>,
    pub sensitivity: Vec<Option<RatioReport>>,
    pub ppv: Vec<Option<RatioReport>>,
}

/// Serializable summary of a confusion matrix and its metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub title: String,
    pub matrix: ConfusionMatrix,
    pub totals: Totals,
    pub accuracy: RatioReport,
    pub within_one: RatioReport,
    pub per_size: PerSize,
}

impl Report {
    pub fn new(title: impl Into<String>, cm: &ConfusionMatrix, chart: &SizeChart) -> Result<Self> {
        if cm.size() != chart.len() {
            return Err(Error::Shape(format!(
                "{0}x{0} matrix for a {1}-size chart",
                cm.size(),
                chart.len()
            )));
        }
        let m = metrics(cm)?;
        Ok(Self {
            title: title.into(),
            matrix: cm.clone(),
            totals: Totals {
                total: cm.total(),
                correct: cm.trace(),
                actual: (0..cm.size()).map(|k| cm.row_total(k)).collect(),
                predicted: (0..cm.size()).map(|k| cm.col_total(k)).collect(),
            },
            accuracy: m.accuracy.into(),
            within_one: m.within_one.into(),
            per_size: PerSize {
                sizes: chart.names().map(str::to_string).collect(),
                sensitivity: m.sensitivity.into_iter().map(|f| f.map(Into::into)).collect(),
                ppv: m.ppv.into_iter().map(|f| f.map(Into::into)).collect(),
            },
        })
    }

    /// Plain-text rendering: confusion grid, then accuracy lines, then a
    /// sensitivity / positive predictivity row.
    pub fn to_text(&self) -> String {
        let sizes = &self.per_size.sizes;
        let width = sizes.iter().map(String::len).max().unwrap_or(1).max(6);
        let mut s = String::new();
        let _ = writeln!(s, "{}", self.title);
        let _ = write!(s, "{:>w$} |", "actual", w = width);
        for name in sizes {
            let _ = write!(s, " {:>w$}", name, w = width);
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "{}", "-".repeat((width + 1) * (sizes.len() + 1) + 1));
        for (i, row) in self.matrix.rows().iter().enumerate() {
            let _ = write!(s, "{:>w$} |", sizes[i], w = width);
            for c in row {
                let _ = write!(s, " {:>w$}", c, w = width);
            }
            let _ = writeln!(s);
        }
        let pct = |r: &RatioReport| {
            Fraction::new(r.num, r.den)
                .map(|f| f.percent_string(1))
                .unwrap_or_else(|| "n/a".into())
        };
        let _ = writeln!(
            s,
            "accuracy:   {}/{} = {}",
            self.accuracy.num,
            self.accuracy.den,
            pct(&self.accuracy)
        );
        let _ = writeln!(
            s,
            "within one: {}/{} = {}",
            self.within_one.num,
            self.within_one.den,
            pct(&self.within_one)
        );
        let cell = |r: &Option<RatioReport>| match r {
            Some(r) => format!("{:>4}", r.percent),
            None => format!("{:>4}", "-"),
        };
        let _ = write!(s, "{:<12}", "");
        for name in sizes {
            let _ = write!(s, " {:>4}", name);
        }
        let _ = writeln!(s);
        let _ = write!(s, "{:<12}", "sens (%)");
        for r in &self.per_size.sensitivity {
            let _ = write!(s, " {}", cell(r));
        }
        let _ = writeln!(s);
        let _ = write!(s, "{:<12}", "ppv (%)");
        for r in &self.per_size.ppv {
            let _ = write!(s, " {}", cell(r));
        }
        let _ = writeln!(s);
        s
    }
}

/// Predicted-size confusion counts from the published evaluation (198 test images).
pub const PUBLISHED_PREDICTED: [[u64; 4]; 4] = [
    [61, 26, 5, 1],
    [8, 55, 9, 0],
    [1, 3, 21, 1],
    [0, 1, 0, 6],
];

/// Manually-measured confusion counts over the same 198 images.
pub const PUBLISHED_MANUAL: [[u64; 4]; 4] = [
    [81, 12, 0, 0],
    [2, 66, 4, 0],
    [0, 1, 23, 2],
    [0, 0, 0, 7],
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureTable {
    pub name: String,
    pub matrix: ConfusionMatrix,
}

/// A set of named confusion matrices scored against one chart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fixtures {
    #[serde(default)]
    pub chart: SizeChart,
    pub tables: Vec<FixtureTable>,
}

impl Fixtures {
    pub fn published() -> Self {
        let table = |name: &str, m: &[[u64; 4]; 4]| FixtureTable {
            name: name.into(),
            matrix: ConfusionMatrix::from_rows(&m.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
                .unwrap(),
        };
        Self {
            chart: SizeChart::eson(),
            tables: vec![
                table("predicted", &PUBLISHED_PREDICTED),
                table("manual", &PUBLISHED_MANUAL),
            ],
        }
    }

    pub fn reports(&self) -> Result<Vec<Report>> {
        self.tables
            .iter()
            .map(|t| Report::new(&t.name, &t.matrix, &self.chart))
            .collect()
    }
}
