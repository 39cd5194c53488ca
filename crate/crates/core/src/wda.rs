//! The bi-level WDA driver.
//!
//! Each outer iteration freezes the transport plans at the current projection
//! `P_k`, assembles `C_b(P_k)` and `C_w(P_k)`, and solves the resulting
//! trace-ratio problem starting from `P_k`. The objective tracked is
//! `f(P) = tr(PᵀC_b(P)P) / tr(PᵀC_w(P)P)`.

use std::time::Instant;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::balancing::BalancingConfig;
use crate::covariance::{self, CovarianceOptions, CovariancePair, PlanCache};
use crate::data::LabeledDataset;
use crate::error::{Result, WdaError};
use crate::traceratio::{self, Projection};

/// Relative slack before an outer step counts as decreasing the objective.
pub const OBJECTIVE_SLACK: f64 = 1e-10;

/// How the starting projection is chosen when none is supplied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Initialization {
    /// QR of a seeded Gaussian matrix.
    #[default]
    Random,
    /// Leading principal directions of the pooled data.
    Pca,
    /// The LDA solution (same ridge as the fit).
    Lda,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WdaConfig {
    pub lambda: f64,
    pub p: usize,
    /// Outer stopping threshold on the subspace step (radians).
    pub tol: f64,
    pub max_outer_iter: usize,
    /// Ridge added to `C_w`.
    pub epsilon: f64,
    pub balancing: BalancingConfig,
    pub tropt_tol: f64,
    pub tropt_max_iter: usize,
    pub seed: u64,
    pub init: Initialization,
}

impl Default for WdaConfig {
    fn default() -> Self {
        WdaConfig {
            lambda: 0.01,
            p: 2,
            tol: 1e-5,
            max_outer_iter: 200,
            epsilon: 0.0,
            balancing: BalancingConfig::with_tol(1e-9),
            tropt_tol: 1e-10,
            tropt_max_iter: 1000,
            seed: 0,
            init: Initialization::Random,
        }
    }
}

impl WdaConfig {
    pub fn validate(&self) -> Result<()> {
        self.balancing.validate()?;
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(WdaError::Parameter(format!(
                "lambda must be finite and ≥ 0 (got {})",
                self.lambda
            )));
        }
        if self.p == 0 {
            return Err(WdaError::Parameter("subspace dimension p must be ≥ 1".into()));
        }
        if !(self.tol > 0.0) || !(self.tropt_tol > 0.0) {
            return Err(WdaError::Parameter(format!(
                "tolerances must be positive (tol {}, tropt_tol {})",
                self.tol, self.tropt_tol
            )));
        }
        if self.max_outer_iter == 0 || self.tropt_max_iter == 0 {
            return Err(WdaError::Parameter("iteration caps must be ≥ 1".into()));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(WdaError::Parameter(format!(
                "epsilon must be finite and ≥ 0 (got {})",
                self.epsilon
            )));
        }
        Ok(())
    }

    fn covariance_options(&self) -> CovarianceOptions {
        CovarianceOptions {
            epsilon: self.epsilon,
            keep_factors: false,
            ..Default::default()
        }
    }
}

/// Per-iteration record of a fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ConvergenceTrace {
    /// `f(P_0), f(P_1), …`; one more entry than `subspace_step`.
    pub objective: Vec<f64>,
    /// `d(P_{k+1}, P_k)` in radians.
    pub subspace_step: Vec<f64>,
    /// Balancing iterations per class pair, per outer iteration (entry 0 is
    /// the evaluation at `P_0`).
    pub inner_iterations: Vec<Vec<usize>>,
    /// Trace-ratio SCF steps per outer iteration.
    pub tropt_iterations: Vec<usize>,
    /// Seconds per outer iteration.
    pub wall_time: Vec<f64>,
    /// Class-pair balancing runs that stopped short of their tolerance.
    pub inner_warnings: usize,
    /// Outer steps where `f` went down by more than [`OBJECTIVE_SLACK`].
    pub objective_decreases: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct WdaFit {
    pub projection: Projection,
    pub trace: ConvergenceTrace,
    pub converged: bool,
    pub iterations: usize,
    /// `f(P*)`.
    pub objective: f64,
    /// `‖H* P* − P*(P*ᵀH* P*)‖_F` with `H* = C_b(P*) − f(P*) C_w(P*)`.
    pub nepv_residual: f64,
    /// `‖C_b(P*)‖_F`.
    pub cb_norm: f64,
    /// Covariances at `P*` (no factors).
    #[serde(skip)]
    pub covariances: CovariancePair,
}

/// `f(P)` with fresh plans at `P`.
pub fn objective(p: &Projection, data: &LabeledDataset, lambda: f64, cfg: &WdaConfig) -> Result<f64> {
    let cov = covariance::cross_covariances_with(p, data, lambda, &cfg.balancing, &cfg.covariance_options(), None)?;
    traceratio::trace_ratio(p, &cov.cb.view(), &cov.cw.view())
}

fn initial_projection(data: &LabeledDataset, cfg: &WdaConfig) -> Result<Projection> {
    match cfg.init {
        Initialization::Random => Projection::seeded(data.dim(), cfg.p, cfg.seed),
        Initialization::Pca => {
            let (pooled, _) = data.pooled();
            let mean = pooled.mean_axis(Axis(1)).expect("nonempty");
            let centered = &pooled - &mean.insert_axis(Axis(1));
            let cov = centered.dot(&centered.t()) / pooled.ncols() as f64;
            Ok(traceratio::top_eigenbasis(&cov.view(), cfg.p)?.0)
        }
        Initialization::Lda => lda_fit_with_ridge(data, cfg.p, cfg.epsilon),
    }
}

fn check_fit_inputs(data: &LabeledDataset, cfg: &WdaConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.p > data.dim() {
        return Err(WdaError::Parameter(format!("p = {} exceeds d = {}", cfg.p, data.dim())));
    }
    if data.num_classes() < 2 {
        return Err(WdaError::Domain(
            "discriminant analysis needs at least two classes".into(),
        ));
    }
    if !data.is_standardized() {
        log::warn!("fitting on data that has not been standardized");
    }
    Ok(())
}

/// Runs the bi-level iteration from `p0` (or the configured initialization).
///
/// Returns the last iterate with `converged = false` when the outer cap is
/// reached.
pub fn fit(data: &LabeledDataset, cfg: &WdaConfig, p0: Option<&Projection>) -> Result<WdaFit> {
    check_fit_inputs(data, cfg)?;
    let mut proj = match p0 {
        Some(p) => {
            if p.dim() != data.dim() || p.rank() != cfg.p {
                return Err(WdaError::dim(
                    "fit (P0)",
                    format!("{}×{}", data.dim(), cfg.p),
                    format!("{}×{}", p.dim(), p.rank()),
                ));
            }
            p.clone()
        }
        None => initial_projection(data, cfg)?,
    };

    let opts = cfg.covariance_options();
    let mut cache = PlanCache::new();
    let mut trace = ConvergenceTrace::default();
    let mut cov = covariance::cross_covariances_with(&proj, data, cfg.lambda, &cfg.balancing, &opts, Some(&mut cache))?;
    record_inner(&mut trace, &cov);
    trace
        .objective
        .push(traceratio::trace_ratio(&proj, &cov.cb.view(), &cov.cw.view())?);

    let mut converged = false;
    for k in 0..cfg.max_outer_iter {
        let start = Instant::now();
        let solve = traceratio::tropt_scf(
            &cov.cb.view(),
            &cov.cw.view(),
            cfg.p,
            &proj,
            cfg.tropt_tol,
            cfg.tropt_max_iter,
        )?;
        if !solve.converged {
            log::warn!("outer iteration {k}: trace-ratio solve hit its iteration cap");
        }
        let step = traceratio::subspace_distance(&solve.projection, &proj)?;
        proj = solve.projection;
        cov = covariance::cross_covariances_with(&proj, data, cfg.lambda, &cfg.balancing, &opts, Some(&mut cache))?;
        let f = traceratio::trace_ratio(&proj, &cov.cb.view(), &cov.cw.view())?;
        let prev = *trace.objective.last().expect("P0 recorded");
        if f < prev - OBJECTIVE_SLACK * prev.abs().max(1.0) {
            trace.objective_decreases += 1;
            log::warn!("outer iteration {k}: objective decreased from {prev:.12e} to {f:.12e}");
        }

        trace.objective.push(f);
        trace.subspace_step.push(step);
        trace.tropt_iterations.push(solve.iterations);
        record_inner(&mut trace, &cov);
        trace.wall_time.push(start.elapsed().as_secs_f64());
        log::debug!("outer iteration {k}: f = {f:.12e}, step = {step:.3e}");
        if step < cfg.tol {
            converged = true;
            break;
        }
    }

    let objective = *trace.objective.last().expect("at least P0 recorded");
    let h = &cov.cb - &(&cov.cw * objective);
    let nepv_residual = traceratio::nepv_residual(&h.view(), &proj);
    let cb_norm = cov.cb.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(WdaFit {
        projection: proj,
        iterations: trace.subspace_step.len(),
        trace,
        converged,
        objective,
        nepv_residual,
        cb_norm,
        covariances: cov,
    })
}

fn record_inner(trace: &mut ConvergenceTrace, cov: &CovariancePair) {
    trace
        .inner_iterations
        .push(cov.diagnostics.iter().map(|d| d.iterations).collect());
    trace.inner_warnings += cov
        .diagnostics
        .iter()
        .filter(|d| !d.converged || d.eig_failures > 0)
        .count();
}

/// Trace-ratio LDA on the classical scatter matrices, without ridge.
pub fn lda_fit(data: &LabeledDataset, p: usize) -> Result<Projection> {
    lda_fit_with_ridge(data, p, 0.0)
}

/// LDA with `S_w + εI` in the denominator, started from the top-`p`
/// eigenbasis of `S_b`.
pub fn lda_fit_with_ridge(data: &LabeledDataset, p: usize, epsilon: f64) -> Result<Projection> {
    if data.num_classes() < 2 {
        return Err(WdaError::Domain(
            "LDA needs at least two classes (the between-class scatter is zero)".into(),
        ));
    }
    if p == 0 || p > data.dim() {
        return Err(WdaError::Parameter(format!(
            "p must lie in 1..={} (got {p})",
            data.dim()
        )));
    }
    let (sb, sw) = covariance::scatter_matrices(data, epsilon)?;
    let (p0, _) = traceratio::top_eigenbasis(&sb.view(), p)?;
    let res = traceratio::tropt_scf(&sb.view(), &sw.view(), p, &p0, 1e-12, 1000)?;
    if !res.converged {
        log::warn!("LDA trace-ratio solve hit its iteration cap");
    }
    Ok(res.projection)
}

/// `PᵀX`.
pub fn transform(p: &Projection, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
    if x.nrows() != p.dim() {
        return Err(WdaError::dim("transform (X rows)", p.dim(), x.nrows()));
    }
    Ok(p.matrix().t().dot(x))
}
