//! Acceptance checks. Runs without the libtest harness so every criterion
//! prints one PASS/FAIL line; exits non-zero if any fails.

use std::time::{Duration, Instant};

use maskfit_core::dataset::{self, LandmarkPair};
use maskfit_core::linalg::Matrix;
use maskfit_core::nnet::{self, Dims, DropoutMask, NetworkParams};
use maskfit_core::run;
use maskfit_core::sizing::{self, ConfusionMatrix, Fraction, SizeChart, PUBLISHED_MANUAL, PUBLISHED_PREDICTED};
use maskfit_core::synth::{self, SynthParams};
use maskfit_core::trainer::{self, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- fixtures

fn matrix(rows: &[[u64; 4]; 4]) -> ConfusionMatrix {
    ConfusionMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn frac_eq(f: Option<Fraction>, num: u64, den: u64) -> bool {
    f.is_some_and(|f| f.num == num && f.den == den)
}

fn fixture_reproduction() -> Outcome {
    let start = Instant::now();
    let mut problems = Vec::new();

    let pred = sizing::metrics(&matrix(&PUBLISHED_PREDICTED)).map_err(|e| e.to_string())?;
    let man = sizing::metrics(&matrix(&PUBLISHED_MANUAL)).map_err(|e| e.to_string())?;

    // Hand-computed from the tables: diagonal sums, far-off-diagonal counts,
    // row and column totals.
    let expect = [
        ("pred accuracy", pred.accuracy, 143, 198, "72.2%"),
        ("pred within-one", pred.within_one, 190, 198, "96.0%"),
        ("manual accuracy", man.accuracy, 177, 198, "89.4%"),
        ("manual within-one", man.within_one, 198, 198, "100.0%"),
    ];
    for (name, f, num, den, text) in expect {
        if !frac_eq(Some(f), num, den) || f.percent_string(1) != text {
            problems.push(format!("{name}: {}/{} {}", f.num, f.den, f.percent_string(1)));
        }
    }
    let per_size = [
        ("pred sensitivity", &pred.sensitivity, [(61, 93), (55, 72), (21, 26), (6, 7)], [66, 76, 81, 86]),
        ("pred ppv", &pred.ppv, [(61, 70), (55, 85), (21, 35), (6, 8)], [87, 65, 60, 75]),
        ("manual sensitivity", &man.sensitivity, [(81, 93), (66, 72), (23, 26), (7, 7)], [87, 92, 88, 100]),
        ("manual ppv", &man.ppv, [(81, 83), (66, 79), (23, 27), (7, 9)], [98, 84, 85, 78]),
    ];
    for (name, got, fracs, pcts) in per_size {
        for k in 0..4 {
            let (num, den) = fracs[k];
            if !frac_eq(got[k], num, den) || got[k].map(|f| f.percent()) != Some(pcts[k]) {
                problems.push(format!("{name}[{k}]: {:?}", got[k]));
            }
        }
    }
    let elapsed = start.elapsed();
    if elapsed >= Duration::from_secs(1) {
        problems.push(format!("took {elapsed:?}"));
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("143/198 = 72.2%, 190/198 = 96.0%, 177/198 = 89.4%, 198/198; per-size percentages exact; {elapsed:?}")
        } else {
            problems.join("; ")
        },
    )
}

// --------------------------------------------------------- synthetic LOOCV

fn synthetic_loocv() -> Outcome {
    let start = Instant::now();
    let chart = SizeChart::eson();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = synth::generate(
        &SynthParams {
            seed: 1,
            count: 200,
            ..SynthParams::default()
        },
        &chart,
    )
    .map_err(|e| e.to_string())?;
    let manifest = corpus.write_to(dir.path()).map_err(|e| e.to_string())?;
    let records = dataset::load_manifest(&manifest, &chart).map_err(|e| e.to_string())?;
    let subset = &records[..60];

    let config = TrainConfig {
        crop_w: 100,
        crop_h: 75,
        repetitions: 4,
        max_epochs: 40,
        patience: 10,
        base_seed: 7,
        ..TrainConfig::default()
    };
    let output = trainer::loocv(subset, &config).map_err(|e| e.to_string())?;
    if !output.excluded.is_empty() {
        return Err(format!("{} samples excluded", output.excluded.len()));
    }
    let outcomes = run::fold_outcomes(&output.folds, &output.prepared, subset, &chart).map_err(|e| e.to_string())?;
    let cm = sizing::confusion(&outcomes, &chart).map_err(|e| e.to_string())?;
    let m = sizing::metrics(&cm).map_err(|e| e.to_string())?;
    let rmse = (outcomes.iter().map(|o| (o.predicted_width_mm - o.truth_width_mm).powi(2)).sum::<f64>()
        / outcomes.len() as f64)
        .sqrt();
    let elapsed = start.elapsed();
    check(
        m.within_one.value() >= 0.90 && m.accuracy.value() >= 0.70 && elapsed <= Duration::from_secs(600),
        format!(
            "exact {}/{} = {}, within one {}/{} = {}, width RMSE {rmse:.3} mm, {:.1} s",
            m.accuracy.num,
            m.accuracy.den,
            m.accuracy.percent_string(1),
            m.within_one.num,
            m.within_one.den,
            m.within_one.percent_string(1),
            elapsed.as_secs_f64()
        ),
    )
}

// -------------------------------------------------------------- gradients

/// Central difference `(E(w + ε) − E(w − ε)) / 2ε` for hidden weight
/// `(row, unit)` of `E = ½‖W_out·[mask ⊙ tanh(W_hidden·[x;1]); 1] − t‖²`.
///
/// Only `unit` changes, so the difference is formed directly from
/// `tanh(a+δ) − tanh(a−δ) = sinh 2δ / (cosh(a+δ)·cosh(a−δ))` instead of
/// subtracting two nearly equal errors.
fn central_difference(
    w_hidden: &Matrix,
    w_out: &Matrix,
    keep: &[bool],
    x: &[f64],
    t: &[f64],
    row: usize,
    unit: usize,
    eps: f64,
) -> f64 {
    let (n_in, n_hidden) = (x.len(), keep.len());
    let pre = |j: usize| w_hidden.get(n_in, j) + (0..n_in).map(|i| x[i] * w_hidden.get(i, j)).sum::<f64>();
    let h: Vec<f64> = (0..n_hidden).map(|j| if keep[j] { pre(j).tanh() } else { 0.0 }).collect();
    if !keep[unit] {
        return 0.0;
    }
    let a = pre(unit);
    let delta = eps * if row == n_in { 1.0 } else { x[row] };
    let h_plus = (a + delta).tanh();
    let h_minus = (a - delta).tanh();
    let dh = (2.0 * delta).sinh() / ((a + delta).cosh() * (a - delta).cosh());
    let mut diff = 0.0;
    for k in 0..t.len() {
        let base = w_out.get(n_hidden, k) + (0..n_hidden).filter(|&j| j != unit).map(|j| h[j] * w_out.get(j, k)).sum::<f64>();
        let o_plus = base + h_plus * w_out.get(unit, k);
        let o_minus = base + h_minus * w_out.get(unit, k);
        // ½(o₊−t)² − ½(o₋−t)² = ½(o₊−o₋)(o₊+o₋−2t)
        diff += 0.5 * (w_out.get(unit, k) * dh) * (o_plus + o_minus - 2.0 * t[k]);
    }
    diff / (2.0 * eps)
}

fn gradient_check() -> Outcome {
    const EPS: f64 = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut nets = 0;
    let mut masked = 0;
    for trial in 0..200 {
        let dims = Dims::new(rng.gen_range(1..=8), rng.gen_range(1..=5), rng.gen_range(1..=3)).unwrap();
        let mut params: NetworkParams = nnet::init_params(dims, trial, 0.5);
        for w in params.w_hidden.as_mut_slice() {
            *w = rng.gen_range(-1.0..1.0);
        }
        for w in params.w_out.as_mut_slice() {
            *w = rng.gen_range(-1.0..1.0);
        }
        let x: Vec<f64> = (0..dims.n_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t: Vec<f64> = (0..dims.n_out).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask = if trial % 2 == 0 {
            DropoutMask::all_keep(dims.n_hidden, params.drop_prob)
        } else {
            masked += 1;
            DropoutMask::sample(dims.n_hidden, params.drop_prob, &mut rng)
        };
        let analytic = nnet::backprop(&params, &x, &t, &mask).map_err(|e| e.to_string())?;
        let keep = mask.keep_flags().to_vec();
        for idx in 0..params.w_hidden.as_slice().len() {
            let (row, unit) = (idx / dims.n_hidden, idx % dims.n_hidden);
            let numeric = central_difference(&params.w_hidden, &params.w_out, &keep, &x, &t, row, unit, EPS);
            let a = analytic.as_slice()[idx];
            let scale = a.abs().max(numeric.abs());
            // both exactly zero for dropped units
            let rel = if scale < 1e-7 { (a - numeric).abs() } else { (a - numeric).abs() / scale };
            worst = worst.max(rel);
        }
        nets += 1;
    }
    check(
        worst <= 1e-5,
        format!("{nets} networks ({masked} masked), max relative error {worst:.2e}"),
    )
}

// ---------------------------------------------------------- pseudo-inverse

/// Solves `(HᵀH + λI)W = HᵀT` by Cholesky factorisation.
fn ridge_oracle(h: &Matrix, t: &Matrix, lambda: f64) -> Matrix {
    let (n, p) = h.shape();
    let q = t.cols();
    let mut a = vec![vec![0.0; p]; p];
    let mut b = vec![vec![0.0; q]; p];
    for i in 0..p {
        for j in 0..p {
            a[i][j] = (0..n).map(|r| h.get(r, i) * h.get(r, j)).sum::<f64>();
        }
        a[i][i] += lambda;
        for k in 0..q {
            b[i][k] = (0..n).map(|r| h.get(r, i) * t.get(r, k)).sum::<f64>();
        }
    }
    // A = L Lᵀ
    let mut l = vec![vec![0.0; p]; p];
    for i in 0..p {
        for j in 0..=i {
            let s: f64 = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            l[i][j] = if i == j { s.sqrt() } else { s / l[j][j] };
        }
    }
    let mut w = Matrix::zeros(p, q);
    for k in 0..q {
        let mut y = vec![0.0; p];
        for i in 0..p {
            y[i] = (b[i][k] - (0..i).map(|j| l[i][j] * y[j]).sum::<f64>()) / l[i][i];
        }
        for i in (0..p).rev() {
            let v = (y[i] - (i + 1..p).map(|j| l[j][i] * w.get(j, k)).sum::<f64>()) / l[i][i];
            w.set(i, k, v);
        }
    }
    w
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random instances in three families: tall full-rank matrices, low-rank
/// products of thin factors, and matrices with duplicated and zero columns.
fn pinv_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst_residual = 0.0f64;
    let mut worst_norm = f64::NEG_INFINITY;
    let mut deficient = 0;
    for case in 0..50 {
        let p = rng.gen_range(2..12);
        let h = match case % 3 {
            0 => {
                let n = rng.gen_range(2 * p..=4 * p);
                random_matrix(&mut rng, n, p)
            }
            1 => {
                deficient += 1;
                let n = rng.gen_range(4..30);
                let r = rng.gen_range(1..p.min(n));
                random_matrix(&mut rng, n, r).matmul(&random_matrix(&mut rng, r, p)).unwrap()
            }
            _ => {
                deficient += 1;
                let n = rng.gen_range(2 * p..=4 * p);
                let mut h = random_matrix(&mut rng, n, p + 2);
                for r in 0..n {
                    let v = h.get(r, 0);
                    h.set(r, p, v);
                    h.set(r, p + 1, 0.0);
                }
                h
            }
        };
        let t = random_matrix(&mut rng, h.rows(), 4);
        let w = nnet::solve_output_pinv(&h, &t).map_err(|e| e.to_string())?;
        let ht = h.transpose();
        let normal = ht.matmul(&h.matmul(&w).unwrap().sub(&t).unwrap()).unwrap();
        let residual = normal.frobenius_norm() / (ht.frobenius_norm() * t.frobenius_norm());
        worst_residual = worst_residual.max(residual);
        let oracle = ridge_oracle(&h, &t, 1e-8);
        let excess = w.frobenius_norm() / oracle.frobenius_norm() - 1.0;
        worst_norm = worst_norm.max(excess);
    }
    check(
        worst_residual <= 1e-6 && worst_norm <= 1e-4,
        format!("50 instances ({deficient} rank-deficient), max normal residual {worst_residual:.2e}, max norm excess over ridge {worst_norm:.2e}"),
    )
}

// ------------------------------------------------------------ determinism

fn determinism() -> Outcome {
    let chart = SizeChart::eson();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = synth::generate(
        &SynthParams {
            seed: 11,
            count: 10,
            image_w: 320,
            image_h: 320,
            px_per_mm: (1.5, 2.5),
            ..SynthParams::default()
        },
        &chart,
    )
    .map_err(|e| e.to_string())?;
    let manifest = corpus.write_to(&dir.path().join("data")).map_err(|e| e.to_string())?;
    let config = TrainConfig {
        crop_w: 24,
        crop_h: 18,
        n_hidden: 10,
        repetitions: 2,
        max_epochs: 15,
        patience: 5,
        base_seed: 7,
        ..TrainConfig::default()
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let ra = run::run_loocv(&manifest, &config, &chart, &a, None).map_err(|e| e.to_string())?;
    let rb = run::run_loocv(&manifest, &config, &chart, &b, None).map_err(|e| e.to_string())?;
    let mut same = ra.run_id == rb.run_id;
    for f in [run::FOLDS_FILE, run::REPORT_FILE, run::REPORT_TEXT_FILE] {
        same &= std::fs::read(a.join(f)).ok() == std::fs::read(b.join(f)).ok();
    }
    check(
        same,
        format!("two runs over 10 samples: folds {} / report {}", &ra.folds_checksum[..12], &ra.report_checksum[..12]),
    )
}

// ---------------------------------------------------- learning-rate decay

fn learning_rate_schedule() -> Outcome {
    let chart = SizeChart::eson();
    let corpus = synth::generate(
        &SynthParams {
            seed: 4,
            count: 12,
            image_w: 320,
            image_h: 320,
            px_per_mm: (1.5, 2.5),
            ..SynthParams::default()
        },
        &chart,
    )
    .map_err(|e| e.to_string())?;
    let config = TrainConfig {
        crop_w: 16,
        crop_h: 12,
        n_hidden: 8,
        max_epochs: 60,
        patience: 60,
        ..TrainConfig::default()
    };
    let prepared: Vec<_> = corpus
        .samples
        .iter()
        .map(|s| {
            let (crop, chain) = dataset::preprocess_image(&s.image, s.record.annotation.nose_box, 16, 12).unwrap();
            let fwd = chain.forward(s.record.annotation.left_nasal_wall);
            let fwd2 = chain.forward(s.record.annotation.right_nasal_wall);
            dataset::PreparedSample {
                id: s.record.id.clone(),
                pixels: crop.pixels().to_vec(),
                target: [fwd.x, fwd.y, fwd2.x, fwd2.y],
                chain,
            }
        })
        .collect();
    let stats = trainer::fit_stats(prepared.iter()).map_err(|e| e.to_string())?;
    let m = dataset::DesignMatrix::assemble(&prepared, &stats).map_err(|e| e.to_string())?;
    let trained = trainer::train_once(&m, &config, 3).map_err(|e| e.to_string())?;
    let k = trained.trace.history.iter().filter(|e| e.improved).count();
    let mut alpha = 0.002f64;
    for _ in 0..k {
        alpha *= 0.95;
    }
    check(
        k == trained.trace.improvements && trained.trace.final_alpha == alpha && k >= 2,
        format!(
            "{} epochs, k = {k} improvements, final alpha {:e} == 0.002 x 0.95^{k}",
            trained.trace.epochs_run, trained.trace.final_alpha
        ),
    )
}

// --------------------------------------------------------- tolerance rule

/// Independent reading of the rule for the four-size chart.
fn brute_force_correct(truth: f64, predicted: usize) -> bool {
    let bounds = [37.0, 41.0, 45.0];
    let exact = bounds.iter().filter(|&&b| truth >= b).count();
    if exact == predicted {
        return true;
    }
    bounds.iter().enumerate().any(|(k, &b)| {
        let inside = truth >= b * 0.98 && truth <= b * 1.02;
        inside && (predicted == k || predicted == k + 1)
    })
}

fn tolerance_rule() -> Outcome {
    let (lo, hi) = sizing::tolerance_band(37.0, 0.02);
    if (lo - 36.26).abs() > 1e-12 || (hi - 37.74).abs() > 1e-12 {
        return Err(format!("band ({lo}, {hi})"));
    }
    let chart = SizeChart::eson();
    let names: Vec<&str> = chart.names().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let mut accepted_by_band = 0;
    for i in 0..10_000 {
        let w = if i % 2 == 0 {
            rng.gen_range(25.0..55.0)
        } else {
            let b = [37.0, 41.0, 45.0][rng.gen_range(0..3)];
            rng.gen_range(b * 0.97..b * 1.03)
        };
        let p = rng.gen_range(0..4);
        let got = chart.is_correct(w, names[p]).map_err(|e| e.to_string())?;
        let want = brute_force_correct(w, p);
        if got != want {
            mismatches += 1;
        }
        if got && chart.classify_index(w).unwrap() != p {
            accepted_by_band += 1;
        }
    }
    check(
        mismatches == 0,
        format!("band ({lo:.2}, {hi:.2}); 10000 widths, {mismatches} mismatches, {accepted_by_band} band-adjacent acceptances"),
    )
}

// ------------------------------------------------ synthetic ground truth

fn synthetic_self_consistency() -> Outcome {
    let chart = SizeChart::eson();
    let corpus = synth::generate(&SynthParams::default(), &chart).map_err(|e| e.to_string())?;
    let mut worst_scale = 0.0f64;
    let mut worst_width = 0.0f64;
    for s in &corpus.samples {
        let a = &s.record.annotation;
        let scale = a.scale_px_per_mm();
        worst_scale = worst_scale.max((scale / s.drawn.px_per_mm - 1.0).abs());
        let LandmarkPair { left, right } = LandmarkPair {
            left: a.left_nasal_wall,
            right: a.right_nasal_wall,
        };
        let w = sizing::width_mm(left, right, scale).map_err(|e| e.to_string())?;
        worst_width = worst_width.max((w - s.drawn.alar_mm).abs());
    }
    check(
        worst_scale <= 0.005 && worst_width <= 0.05,
        format!(
            "{} samples, max scale error {:.4}%, max width error {worst_width:.2e} mm",
            corpus.samples.len(),
            100.0 * worst_scale
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("fixture reproduction", fixture_reproduction),
        ("gradient correctness", gradient_check),
        ("pseudo-inverse optimality", pinv_optimality),
        ("determinism", determinism),
        ("learning-rate schedule", learning_rate_schedule),
        ("tolerance rule", tolerance_rule),
        ("synthetic self-consistency", synthetic_self_consistency),
        ("synthetic leave-one-out", synthetic_loocv),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        match f() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
