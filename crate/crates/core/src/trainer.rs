//! Hybrid training schedule, leave-one-out evaluation and landmark prediction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, DesignMatrix, NormStats, PreparedSample, SampleRecord};
use crate::error::{Error, Result};
use crate::imaging::{GrayImage, Point};
use crate::linalg::Matrix;
use crate::model::Model;
use crate::nnet::{self, Dims, DropoutMask, NetworkParams, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatsMode {
    /// Normalization fitted on the training fold only.
    PerFold,
    /// Normalization fitted once over every sample, held-out ones included.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha0: f64,
    pub alpha_decay: f64,
    pub mu: f64,
    pub drop_prob: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub repetitions: usize,
    pub base_seed: u64,
    pub stats_mode: StatsMode,
    pub n_hidden: usize,
    pub crop_w: usize,
    pub crop_h: usize,
    /// Samples per weight update; 1 is plain online learning.
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha0: 0.002,
            alpha_decay: 0.95,
            mu: 0.95,
            drop_prob: 0.7,
            max_epochs: 200,
            patience: 20,
            repetitions: 4,
            base_seed: 0,
            stats_mode: StatsMode::PerFold,
            n_hidden: 40,
            crop_w: 200,
            crop_h: 150,
            batch_size: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::Argument(msg.to_string()));
        if !(self.alpha0 > 0.0) {
            return fail("alpha0 must be positive");
        }
        if !(self.alpha_decay > 0.0 && self.alpha_decay <= 1.0) {
            return fail("alpha_decay must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.mu) {
            return fail("mu must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return fail("drop_prob must lie in [0, 1)");
        }
        if self.repetitions == 0 || self.patience == 0 || self.max_epochs == 0 {
            return fail("repetitions, patience and max_epochs must be at least 1");
        }
        if self.n_hidden == 0 || self.crop_w == 0 || self.crop_h == 0 || self.batch_size == 0 {
            return fail("n_hidden, crop size and batch_size must be positive");
        }
        Ok(())
    }

    /// Seed for repetition `rep` of fold `fold`: `base_seed + fold·repetitions + rep`,
    /// so any single fold/repetition can be rerun on its own.
    pub fn seed_for(&self, fold: usize, rep: usize) -> u64 {
        self.base_seed
            .wrapping_add((fold as u64).wrapping_mul(self.repetitions as u64))
            .wrapping_add(rep as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub sse: f64,
    pub improved: bool,
    /// Learning rate in force after this epoch's bookkeeping.
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs_run: usize,
    pub improvements: usize,
    pub final_alpha: f64,
    pub best_sse: f64,
    pub history: Vec<EpochStats>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: NetworkParams,
    pub trace: TrainTrace,
}

fn target_matrix(matrix: &DesignMatrix) -> Matrix {
    let rows: Vec<Vec<f64>> = matrix.targets().iter().map(|t| t.to_vec()).collect();
    Matrix::from_rows(&rows).expect("4 columns each")
}

/// `½ Σ ‖H·W − T‖²`.
fn half_sse(h: &Matrix, w_out: &Matrix, t: &Matrix) -> Result<f64> {
    let residual = h.matmul(w_out)?.sub(t)?;
    Ok(0.5 * residual.as_slice().iter().map(|r| r * r).sum::<f64>())
}

/// Trains one network on `matrix`.
///
/// Each epoch presents the samples in a seeded shuffled order, updating the
/// hidden weights by momentum descent under a fresh dropout mask per
/// presentation, then re-solves the output layer by pseudo-inverse on the
/// inference-mode hidden activations. Every strict improvement of the
/// training error multiplies the learning rate by `alpha_decay`. Returns
/// the best parameters seen.
pub fn train_once(matrix: &DesignMatrix, config: &TrainConfig, seed: u64) -> Result<Trained> {
    config.validate()?;
    if matrix.rows() == 0 {
        return Err(Error::Argument("cannot train on an empty design matrix".into()));
    }
    let dims = Dims::new(matrix.cols(), config.n_hidden, 4)?;
    let mut params = nnet::init_params(dims, seed, config.drop_prob);
    let targets = target_matrix(matrix);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..matrix.rows()).collect();
    let mut velocity = vec![0.0; params.w_hidden.as_slice().len()];
    let mut grad = Matrix::zeros(dims.n_in + 1, dims.n_hidden);
    let mut ws = Workspace::new(dims);

    let mut alpha = config.alpha0;
    let mut best: Option<(f64, NetworkParams)> = None;
    let mut improvements = 0;
    let mut stale = 0;
    let mut history = Vec::new();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            grad.as_mut_slice().fill(0.0);
            for &i in batch {
                let mask = DropoutMask::sample(dims.n_hidden, config.drop_prob, &mut rng);
                nnet::backprop_accumulate(&params, matrix.row(i), matrix.target(i), &mask, &mut ws, &mut grad)?;
            }
            nnet::sgd_momentum_step(params.w_hidden.as_mut_slice(), &mut velocity, grad.as_slice(), alpha, config.mu)?;
        }

        let diverged = |detail: String| Error::Training {
            epoch,
            alpha,
            detail,
        };
        if !params.w_hidden.is_finite() {
            return Err(diverged("hidden weights became non-finite".into()));
        }
        let h = nnet::hidden_design(&params, (0..matrix.rows()).map(|i| matrix.row(i)))?;
        params.w_out = nnet::solve_output_pinv(&h, &targets).map_err(|e| diverged(e.to_string()))?;
        let sse = half_sse(&h, &params.w_out, &targets)?;
        if !sse.is_finite() {
            return Err(diverged(format!("training error is {sse}")));
        }

        let improved = best.as_ref().is_none_or(|(b, _)| sse < *b);
        if improved {
            best = Some((sse, params.clone()));
            alpha *= config.alpha_decay;
            improvements += 1;
            stale = 0;
        } else {
            stale += 1;
        }
        history.push(EpochStats {
            epoch,
            sse,
            improved,
            alpha,
        });
        if stale >= config.patience {
            break;
        }
    }

    let (best_sse, params) = best.expect("at least one epoch ran");
    Ok(Trained {
        params,
        trace: TrainTrace {
            epochs_run: history.len(),
            improvements,
            final_alpha: alpha,
            best_sse,
            history,
        },
    })
}

/// Inference-mode landmarks for one crop, in crop pixels.
pub fn predict_landmarks(params: &NetworkParams, stats: &NormStats, crop: &GrayImage) -> Result<[Point; 2]> {
    let n = crop.width() * crop.height();
    if n != params.dims.n_in {
        return Err(Error::Shape(format!(
            "{}x{} crop has {n} pixels, model expects {} inputs",
            crop.width(),
            crop.height(),
            params.dims.n_in
        )));
    }
    let y = predict_vector(params, stats, crop.pixels())?;
    Ok([Point::new(y[0], y[1]), Point::new(y[2], y[3])])
}

fn predict_vector(params: &NetworkParams, stats: &NormStats, pixels: &[u8]) -> Result<[f64; 4]> {
    if params.dims.n_out != 4 {
        return Err(Error::Shape(format!(
            "landmark model needs 4 outputs, has {}",
            params.dims.n_out
        )));
    }
    let x = stats.normalize_inputs(pixels);
    let out = nnet::forward(params, &x, None)?.output;
    Ok(stats.denormalize_targets(&[out[0], out[1], out[2], out[3]]))
}

/// Predictions for one held-out sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub id: String,
    /// Crop-space `[x_left, y_left, x_right, y_right]`, one per repetition.
    pub reps: Vec<[f64; 4]>,
    pub mean: [f64; 4],
    pub epochs: Vec<usize>,
    pub sse: Vec<f64>,
    pub train_rows: usize,
    /// [`DesignMatrix::checksum`] of the training fold.
    pub train_checksum: String,
}

impl FoldResult {
    pub fn mean_points(&self) -> [Point; 2] {
        [
            Point::new(self.mean[0], self.mean[1]),
            Point::new(self.mean[2], self.mean[3]),
        ]
    }
}

pub fn mean_landmarks(reps: &[[f64; 4]]) -> [f64; 4] {
    let mut m = [0.0; 4];
    for r in reps {
        for (a, v) in m.iter_mut().zip(r) {
            *a += v;
        }
    }
    m.map(|v| v / reps.len() as f64)
}

pub fn fit_stats<'a>(samples: impl Iterator<Item = &'a PreparedSample> + Clone) -> Result<NormStats> {
    NormStats::fit(
        samples.clone().map(|s| s.pixels.as_slice()),
        samples.map(|s| &s.target),
    )
}

/// Leave-one-out over already-prepared samples. Folds run in parallel; the
/// result order follows `prepared`.
pub fn loocv_prepared(prepared: &[PreparedSample], config: &TrainConfig) -> Result<Vec<FoldResult>> {
    config.validate()?;
    if prepared.len() < 2 {
        return Err(Error::Argument(format!(
            "leave-one-out needs at least 2 samples, got {}",
            prepared.len()
        )));
    }
    let global = match config.stats_mode {
        StatsMode::Global => Some(fit_stats(prepared.iter())?),
        StatsMode::PerFold => None,
    };
    (0..prepared.len())
        .into_par_iter()
        .map(|fold| run_fold(prepared, fold, config, global.as_ref()).map_err(|e| Error::Fold { fold, source: Box::new(e) }))
        .collect()
}

fn run_fold(prepared: &[PreparedSample], fold: usize, config: &TrainConfig, global: Option<&NormStats>) -> Result<FoldResult> {
    let train = || prepared.iter().enumerate().filter(move |(i, _)| *i != fold).map(|(_, s)| s);
    let stats = match global {
        Some(s) => *s,
        None => fit_stats(train())?,
    };
    let matrix = DesignMatrix::assemble(train(), &stats)?;
    let held_out = &prepared[fold];

    let mut reps = Vec::with_capacity(config.repetitions);
    let mut epochs = Vec::with_capacity(config.repetitions);
    let mut sse = Vec::with_capacity(config.repetitions);
    for rep in 0..config.repetitions {
        let trained = train_once(&matrix, config, config.seed_for(fold, rep))?;
        reps.push(predict_vector(&trained.params, &stats, &held_out.pixels)?);
        epochs.push(trained.trace.epochs_run);
        sse.push(trained.trace.best_sse);
    }
    tracing::debug!(fold, id = %held_out.id, "fold finished");
    Ok(FoldResult {
        id: held_out.id.clone(),
        mean: mean_landmarks(&reps),
        reps,
        epochs,
        sse,
        train_rows: matrix.rows(),
        train_checksum: matrix.checksum(),
    })
}

#[derive(Debug)]
pub struct LoocvOutput {
    pub folds: Vec<FoldResult>,
    pub prepared: Vec<PreparedSample>,
    pub excluded: Vec<(String, Error)>,
}

/// Prepares every record at the configured crop size, then runs
/// [`loocv_prepared`]. Samples that fail preparation are excluded and reported.
pub fn loocv(samples: &[SampleRecord], config: &TrainConfig) -> Result<LoocvOutput> {
    config.validate()?;
    let prepared = dataset::prepare_samples(samples, config.crop_w, config.crop_h);
    let folds = loocv_prepared(&prepared.samples, config)?;
    Ok(LoocvOutput {
        folds,
        prepared: prepared.samples,
        excluded: prepared.excluded,
    })
}

/// A deployable model trained on every preparable record, with the first
/// repetition's seed. Also returns the training trace and the exclusions.
pub fn train_model(samples: &[SampleRecord], config: &TrainConfig) -> Result<(Model, TrainTrace, Vec<(String, Error)>)> {
    config.validate()?;
    let prepared = dataset::prepare_samples(samples, config.crop_w, config.crop_h);
    if prepared.samples.is_empty() {
        return Err(Error::Argument("no sample could be prepared for training".into()));
    }
    let stats = fit_stats(prepared.samples.iter())?;
    let matrix = DesignMatrix::assemble(&prepared.samples, &stats)?;
    let trained = train_once(&matrix, config, config.seed_for(0, 0))?;
    let model = Model::new(trained.params, stats, config.crop_w, config.crop_h)?;
    Ok((model, trained.trace, prepared.excluded))
}

pub fn write_folds_jsonl(folds: &[FoldResult]) -> Result<String> {
    let mut out = String::new();
    for f in folds {
        out.push_str(&serde_json::to_string(f)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_folds_jsonl(text: &str) -> Result<Vec<FoldResult>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::TransformChain;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            n_hidden: 6,
            crop_w: 4,
            crop_h: 3,
            max_epochs: 30,
            patience: 5,
            repetitions: 2,
            base_seed: 3,
            ..TrainConfig::default()
        }
    }

    fn prepared(n: usize) -> Vec<PreparedSample> {
        (0..n)
            .map(|i| PreparedSample {
                id: format!("p{i}"),
                pixels: (0..12).map(|k| ((i * 37 + k * 11) % 200 + 20) as u8).collect(),
                target: [1.0 + (i % 3) as f64 * 0.1, 1.5, 3.0 - (i % 2) as f64 * 0.2, 1.4],
                chain: TransformChain::identity(),
            })
            .collect()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            mu: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            alpha_decay: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn seeds_are_distinct_per_fold_and_repetition() {
        let c = TrainConfig {
            base_seed: 100,
            repetitions: 4,
            ..TrainConfig::default()
        };
        assert_eq!(c.seed_for(0, 0), 100);
        assert_eq!(c.seed_for(0, 3), 103);
        assert_eq!(c.seed_for(1, 0), 104);
        assert_eq!(c.seed_for(2, 1), 109);
    }

    #[test]
    fn training_is_deterministic() {
        let p = prepared(6);
        let stats = fit_stats(p.iter()).unwrap();
        let m = DesignMatrix::assemble(&p, &stats).unwrap();
        let a = train_once(&m, &tiny_config(), 9).unwrap();
        let b = train_once(&m, &tiny_config(), 9).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn alpha_tracks_improvement_count() {
        let p = prepared(7);
        let stats = fit_stats(p.iter()).unwrap();
        let m = DesignMatrix::assemble(&p, &stats).unwrap();
        let t = train_once(&m, &tiny_config(), 1).unwrap().trace;
        let mut alpha = 0.002;
        let mut k = 0;
        for e in &t.history {
            if e.improved {
                alpha *= 0.95;
                k += 1;
            }
            assert_eq!(e.alpha, alpha);
        }
        assert_eq!(k, t.improvements);
        assert_eq!(t.final_alpha, alpha);
    }

    #[test]
    fn single_repetition_mean_is_the_repetition() {
        let config = TrainConfig {
            repetitions: 1,
            ..tiny_config()
        };
        let folds = loocv_prepared(&prepared(4), &config).unwrap();
        for f in folds {
            assert_eq!(f.reps.len(), 1);
            assert_eq!(f.mean, f.reps[0]);
        }
    }

    #[test]
    fn loocv_needs_two_samples() {
        assert!(loocv_prepared(&prepared(1), &tiny_config()).is_err());
    }

    #[test]
    fn predict_rejects_wrong_crop() {
        let params = nnet::init_params(Dims::new(12, 3, 4).unwrap(), 0, 0.7);
        let stats = NormStats {
            x_max: 255.0,
            x_mean: 0.5,
            y_max: 10.0,
            y_mean: 0.5,
        };
        let crop = GrayImage::filled(5, 3, 0).unwrap();
        assert!(matches!(predict_landmarks(&params, &stats, &crop), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_hidden_weights_predict_denormalized_bias() {
        let mut params = nnet::init_params(Dims::new(12, 3, 4).unwrap(), 0, 0.7);
        params.w_hidden = Matrix::zeros(13, 3);
        let stats = NormStats {
            x_max: 255.0,
            x_mean: 0.5,
            y_max: 10.0,
            y_mean: 0.5,
        };
        let [l, r] = predict_landmarks(&params, &stats, &GrayImage::filled(4, 3, 0).unwrap()).unwrap();
        let bias = params.w_out.row(3);
        let want = stats.denormalize_targets(&[bias[0], bias[1], bias[2], bias[3]]);
        assert_eq!([l.x, l.y, r.x, r.y], want);
    }

    #[test]
    fn folds_round_trip_through_jsonl() {
        let folds = loocv_prepared(&prepared(3), &tiny_config()).unwrap();
        let text = write_folds_jsonl(&folds).unwrap();
        assert_eq!(read_folds_jsonl(&text).unwrap(), folds);
        assert_eq!(text.lines().count(), 3);
    }
}
