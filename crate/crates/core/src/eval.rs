//! KNN scoring of fitted projections and a runtime-scaling harness.

use std::time::Instant;

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{self, LabeledDataset, SplitSpec};
use crate::error::{Result, WdaError};
use crate::traceratio::Projection;
use crate::wda::{self, WdaConfig};

/// Added to the repeat seed to draw the random-projection baseline.
const BASELINE_SEED_OFFSET: u64 = 0x0ba5_e11e;

/// K-nearest-neighbor labels for the columns of `test_x`.
///
/// Neighbors are ranked by Euclidean distance, equal distances by label.
/// The majority label wins; a tied vote goes to the label whose neighbors
/// have the smallest summed distance, then to the smallest label.
pub fn knn_predict(
    train_x: &ArrayView2<f64>,
    train_labels: &[usize],
    test_x: &ArrayView2<f64>,
    k: usize,
) -> Result<Vec<usize>> {
    let n = train_x.ncols();
    if n == 0 {
        return Err(WdaError::Parameter("KNN needs a nonempty training set".into()));
    }
    if k == 0 || k > n {
        return Err(WdaError::Parameter(format!("K must lie in 1..={n} (got {k})")));
    }
    if train_labels.len() != n {
        return Err(WdaError::dim("knn_predict (labels)", n, train_labels.len()));
    }
    if test_x.nrows() != train_x.nrows() {
        return Err(WdaError::dim(
            "knn_predict (test rows)",
            train_x.nrows(),
            test_x.nrows(),
        ));
    }
    let num_labels = train_labels.iter().max().map_or(0, |m| m + 1);
    let mut out = Vec::with_capacity(test_x.ncols());
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for t in test_x.axis_iter(Axis(1)) {
        order.clear();
        for (x, &lab) in train_x.axis_iter(Axis(1)).zip(train_labels) {
            let dist2: f64 = x.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            order.push((dist2, lab));
        }
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; num_labels];
        let mut dist_sum = vec![0.0f64; num_labels];
        for &(dist2, lab) in &order[..k] {
            votes[lab] += 1;
            dist_sum[lab] += dist2.sqrt();
        }
        let best = (0..num_labels)
            .filter(|&l| votes[l] > 0)
            .min_by(|&a, &b| {
                votes[b]
                    .cmp(&votes[a])
                    .then(dist_sum[a].total_cmp(&dist_sum[b]))
                    .then(a.cmp(&b))
            })
            .expect("k ≥ 1 neighbors voted");
        out.push(best);
    }
    Ok(out)
}

/// Misclassification fraction of a projection under KNN.
pub fn projected_knn_error(p: &Projection, train: &LabeledDataset, test: &LabeledDataset, k: usize) -> Result<f64> {
    let (train_x, train_y) = train.pooled();
    let (test_x, test_y) = test.pooled();
    let pred = knn_predict(
        &wda::transform(p, &train_x.view())?.view(),
        &train_y,
        &wda::transform(p, &test_x.view())?.view(),
        k,
    )?;
    let wrong = pred.iter().zip(&test_y).filter(|(a, b)| a != b).count();
    Ok(wrong as f64 / test_y.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean of `per_repeat_errors`.
    pub error: f64,
    pub k: usize,
    pub p: usize,
    pub repeats: usize,
    /// Errors of the repeats whose fit succeeded.
    pub per_repeat_errors: Vec<f64>,
    /// Seeded random-projection errors on the same splits.
    pub baseline_errors: Vec<f64>,
    /// Repeats where the fitted projection beat the baseline.
    pub wins_over_baseline: usize,
    /// Mean fit time in seconds.
    pub mean_wall_time: f64,
    /// Fits that stopped at the outer iteration cap.
    pub unconverged: usize,
    /// Repeats dropped because the fit failed.
    pub failures: usize,
}

/// Repeated holdout: split (seed `split.seed + r`), fit on the training side
/// (seed `cfg.seed + r`), classify the test side with KNN.
pub fn evaluate(
    data: &LabeledDataset,
    cfg: &WdaConfig,
    split: &SplitSpec,
    k: usize,
    repeats: usize,
) -> Result<EvalReport> {
    cfg.validate()?;
    split.validate()?;
    if k == 0 {
        return Err(WdaError::Parameter("K must be ≥ 1".into()));
    }
    if repeats == 0 {
        return Err(WdaError::Parameter("repeats must be ≥ 1".into()));
    }
    let mut errors = Vec::with_capacity(repeats);
    let mut baseline = Vec::with_capacity(repeats);
    let mut times = Vec::with_capacity(repeats);
    let mut wins = 0;
    let mut unconverged = 0;
    let mut failures = 0;
    for r in 0..repeats as u64 {
        let spec = SplitSpec {
            seed: split.seed.wrapping_add(r),
            ..*split
        };
        let (train, test) = data::split(data, &spec)?;
        let run_cfg = WdaConfig {
            seed: cfg.seed.wrapping_add(r),
            ..*cfg
        };
        let start = Instant::now();
        let fitted = match wda::fit(&train, &run_cfg, None) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("repeat {r}: fit failed: {e}");
                failures += 1;
                continue;
            }
        };
        times.push(start.elapsed().as_secs_f64());
        if !fitted.converged {
            unconverged += 1;
        }
        let err = projected_knn_error(&fitted.projection, &train, &test, k)?;
        let rand_p = Projection::seeded(data.dim(), cfg.p, spec.seed.wrapping_add(BASELINE_SEED_OFFSET))?;
        let base = projected_knn_error(&rand_p, &train, &test, k)?;
        if err < base {
            wins += 1;
        }
        errors.push(err);
        baseline.push(base);
    }
    if failures > 0 {
        log::warn!("{failures} of {repeats} repeats failed and are excluded from the mean");
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(EvalReport {
        error: mean(&errors),
        k,
        p: cfg.p,
        repeats,
        mean_wall_time: mean(&times),
        per_repeat_errors: errors,
        baseline_errors: baseline,
        wins_over_baseline: wins,
        unconverged,
        failures,
    })
}

/// Parameter swept by [`bench_scaling`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingAxis {
    /// Subspace dimension.
    P,
    /// Feature dimension.
    D,
    /// Total number of points, split 30/40/30 over the three classes.
    N,
}

impl std::str::FromStr for ScalingAxis {
    type Err = WdaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p" => Ok(ScalingAxis::P),
            "d" => Ok(ScalingAxis::D),
            "n" => Ok(ScalingAxis::N),
            other => Err(WdaError::Parameter(format!(
                "unknown scaling axis {other:?} (expected p, d or n)"
            ))),
        }
    }
}

/// Fixed parts of a scaling run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub cfg: WdaConfig,
    pub d: usize,
    pub counts: [usize; 3],
    pub data_seed: u64,
    pub repeats: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            cfg: WdaConfig::default(),
            d: 10,
            counts: [30, 40, 30],
            data_seed: 0,
            repeats: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub value: usize,
    pub mean_wall_time: f64,
    pub wall_times: Vec<f64>,
    pub mean_outer_iterations: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingTable {
    pub axis: ScalingAxis,
    pub rows: Vec<ScalingRow>,
    /// Least-squares slope of log time against log value (`d`, `n` axes)
    /// or of time against value (`p` axis).
    pub slope: f64,
    /// Coefficient of determination of that fit.
    pub r_squared: f64,
}

/// Class sizes `(0.3n, 0.4n, 0.3n)`, each rounded to an even count.
pub fn counts_for_total(n: usize) -> [usize; 3] {
    let even = |x: f64| (2.0 * (x / 2.0).round()).max(2.0) as usize;
    [even(0.3 * n as f64), even(0.4 * n as f64), even(0.3 * n as f64)]
}

/// Least squares `y ≈ a + b x`; returns `(b, R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, r2)
}

/// Times [`wda::fit`] on synthetic data for every value of `grid` along
/// `axis`. Data generation is excluded from the timings.
pub fn bench_scaling(axis: ScalingAxis, grid: &[usize], base: &BenchSettings) -> Result<ScalingTable> {
    if grid.len() < 3 || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(WdaError::Parameter(format!(
            "scaling grid must be strictly increasing with ≥ 3 values (got {grid:?})"
        )));
    }
    if base.repeats == 0 {
        return Err(WdaError::Parameter("repeats must be ≥ 1".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &value in grid {
        let (d, counts, p) = match axis {
            ScalingAxis::P => (base.d, base.counts, value),
            ScalingAxis::D => (value, base.counts, base.cfg.p),
            ScalingAxis::N => (base.d, counts_for_total(value), base.cfg.p),
        };
        let data = data::standardize(&data::make_synthetic(d, counts, base.data_seed)?)?;
        let cfg = WdaConfig { p, ..base.cfg };
        let mut times = Vec::with_capacity(base.repeats);
        let mut iters = 0usize;
        for r in 0..base.repeats as u64 {
            let run = WdaConfig {
                seed: cfg.seed.wrapping_add(r),
                ..cfg
            };
            let start = Instant::now();
            let fitted = wda::fit(&data, &run, None)?;
            times.push(start.elapsed().as_secs_f64());
            iters += fitted.iterations;
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        log::info!("{axis:?} = {value}: {mean:.4} s");
        rows.push(ScalingRow {
            value,
            mean_wall_time: mean,
            wall_times: times,
            mean_outer_iterations: iters as f64 / base.repeats as f64,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.value as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_wall_time).collect();
    let (slope, r_squared) = match axis {
        ScalingAxis::P => linear_fit(&xs, &ys),
        ScalingAxis::D | ScalingAxis::N => {
            let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
            let ly: Vec<f64> = ys.iter().map(|y| y.max(f64::MIN_POSITIVE).ln()).collect();
            linear_fit(&lx, &ly)
        }
    };
    Ok(ScalingTable {
        axis,
        rows,
        slope,
        r_squared,
    })
}
