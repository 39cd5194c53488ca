//! Entropic optimal-transport plans between two point clouds with uniform
//! weights, computed by matrix balancing.
//!
//! The plan is `T = D(u) K D(v)` with `K = exp(−λM)`, where `(u, v)` scale
//! `K` so that rows sum to `1/n` and columns to `1/m`. Two solvers:
//!
//! * [`sk_iterate`]: classical Sinkhorn–Knopp alternation.
//! * [`acc_sk`]: self-consistent-field iteration on `J_R(v) v = μ v`, where
//!   `R` is the Sinkhorn fixed-point map on `v` and `J_R` its Jacobian.
//!   `J_R(v)` is entrywise positive, so the Perron vector is taken each step.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WdaError};
use crate::krylov;
use crate::traceratio::Projection;

/// Kernel entries below this value are raised to it before balancing.
pub const KERNEL_FLOOR: f64 = 1e-300;

/// Largest Krylov basis used by the inner Lanczos solve before restarting.
const LANCZOS_BASIS: usize = 40;

/// Strictly positive `n × m` Gibbs kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix {
    entries: Array2<f64>,
    lambda: Option<f64>,
    clamped: usize,
}

impl KernelMatrix {
    /// Wraps an explicit nonnegative matrix, clamping entries below
    /// [`KERNEL_FLOOR`].
    pub fn from_entries(mut entries: Array2<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(WdaError::dim(
                "KernelMatrix",
                "n, m ≥ 1",
                format!("{:?}", entries.dim()),
            ));
        }
        if let Some(bad) = entries.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(WdaError::Domain(format!(
                "kernel entries must be finite and nonnegative (found {bad})"
            )));
        }
        let mut clamped = 0;
        entries.mapv_inplace(|x| {
            if x < KERNEL_FLOOR {
                clamped += 1;
                KERNEL_FLOOR
            } else {
                x
            }
        });
        Ok(KernelMatrix {
            entries,
            lambda: None,
            clamped,
        })
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }

    /// Regularization strength, when the kernel came from [`build_kernel`].
    pub fn lambda(&self) -> Option<f64> {
        self.lambda
    }

    /// Number of entries raised to [`KERNEL_FLOOR`].
    pub fn clamped_entries(&self) -> usize {
        self.clamped
    }
}

/// Positive diagonal scalings `(u, v)`; defined up to `(αu, v/α)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingPair {
    pub u: Array1<f64>,
    pub v: Array1<f64>,
}

/// How the dominant eigenvector of `J_R(v)` is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InnerEigensolver {
    /// Lanczos on the symmetrized Jacobian (default).
    #[default]
    Lanczos,
    /// Power iteration on `J_R(v)` itself.
    Power,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BalancingConfig {
    /// Threshold on the successive-iterate distance and the marginal residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Relative eigen-residual accepted from the inner eigensolver.
    pub eig_tol: f64,
    /// Operator applications allowed per inner eigensolve.
    pub eig_max_iter: usize,
    pub eigensolver: InnerEigensolver,
}

impl Default for BalancingConfig {
    fn default() -> Self {
        BalancingConfig::with_tol(1e-5)
    }
}

impl BalancingConfig {
    /// Config with `tol` and the matching inner tolerance `1e-2·tol`.
    pub fn with_tol(tol: f64) -> Self {
        BalancingConfig {
            tol,
            max_iter: 100,
            eig_tol: 1e-2 * tol,
            eig_max_iter: 200,
            eigensolver: InnerEigensolver::Lanczos,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || !(self.eig_tol > 0.0) || self.max_iter == 0 || self.eig_max_iter == 0 {
            return Err(WdaError::Parameter(format!(
                "balancing config needs tol > 0, eig_tol > 0, max_iter ≥ 1, eig_max_iter ≥ 1 (got {self:?})"
            )));
        }
        Ok(())
    }
}

/// Outcome of a balancing run; returned whether or not it converged.
#[derive(Debug, Clone, Serialize)]
pub struct BalancingReport {
    pub scaling: ScalingPair,
    pub iterations: usize,
    pub converged: bool,
    /// Final successive-iterate distance.
    pub distance: f64,
    /// Final max marginal violation.
    pub residual: f64,
    /// `‖v̂_{k+1} − v̂_k‖₂` of 1-norm-normalized iterates, per iteration.
    pub history: Vec<f64>,
    /// Inner eigensolves that stopped short of `eig_tol`.
    pub eig_failures: usize,
    /// Total kernel matrix–vector products.
    pub matvecs: usize,
}

/// Entropic plan with uniform marginals `1/n`, `1/m`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransportPlan {
    pub entries: Array2<f64>,
    pub row_marginal: f64,
    pub col_marginal: f64,
    /// Max violation of either marginal.
    pub residual: f64,
}

impl TransportPlan {
    pub fn total_mass(&self) -> f64 {
        self.entries.sum()
    }
}

/// Squared Euclidean distances between the projected columns of `x` and `y`.
pub fn build_cost_matrix(p: &Projection, x: &ArrayView2<f64>, y: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let d = p.dim();
    if x.nrows() != d {
        return Err(WdaError::dim("build_cost_matrix (X rows)", d, x.nrows()));
    }
    if y.nrows() != d {
        return Err(WdaError::dim("build_cost_matrix (Y rows)", d, y.nrows()));
    }
    let px = p.matrix().t().dot(x);
    let py = p.matrix().t().dot(y);
    Ok(pairwise_sq_dist(&px.view(), &py.view()))
}

/// Column-wise squared distances, computed by explicit differences so that
/// identical columns give exactly zero.
pub(crate) fn pairwise_sq_dist(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let (n, m) = (a.ncols(), b.ncols());
    let a_t = a.t().as_standard_layout().to_owned();
    let b_t = b.t().as_standard_layout().to_owned();
    let mut out = Array2::zeros((n, m));
    for (i, ai) in a_t.axis_iter(Axis(0)).enumerate() {
        for (j, bj) in b_t.axis_iter(Axis(0)).enumerate() {
            out[[i, j]] = ai.iter().zip(bj.iter()).map(|(s, t)| (s - t) * (s - t)).sum();
        }
    }
    out
}

/// `K = exp(−λM)` elementwise.
pub fn build_kernel(m: &ArrayView2<f64>, lambda: f64) -> Result<KernelMatrix> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(WdaError::Parameter(format!(
            "lambda must be finite and ≥ 0 (got {lambda})"
        )));
    }
    if let Some(bad) = m.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return Err(WdaError::Domain(format!(
            "cost entries must be finite and ≥ 0 (found {bad})"
        )));
    }
    let mut k = KernelMatrix::from_entries(m.mapv(|c| (-lambda * c).exp()))?;
    k.lambda = Some(lambda);
    Ok(k)
}

fn check_positive(name: &'static str, v: &ArrayView1<f64>, len: usize) -> Result<()> {
    if v.len() != len {
        return Err(WdaError::dim(name, len, v.len()));
    }
    if let Some(bad) = v.iter().find(|x| !(**x > 0.0) || !x.is_finite()) {
        return Err(WdaError::Domain(format!(
            "{name}: entries must be positive and finite (found {bad})"
        )));
    }
    Ok(())
}

fn normalized_l1(v: &Array1<f64>) -> Array1<f64> {
    v / v.sum()
}

fn l2_dist(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Max violation of the uniform marginals by `D(u) K D(v)`.
fn marginal_residual(k: &Array2<f64>, u: &Array1<f64>, v: &Array1<f64>) -> f64 {
    let (n, m) = k.dim();
    let rows = u * &k.dot(v);
    let cols = v * &k.t().dot(u);
    let r = rows.iter().fold(0.0f64, |acc, x| acc.max((x - 1.0 / n as f64).abs()));
    cols.iter().fold(r, |acc, x| acc.max((x - 1.0 / m as f64).abs()))
}

/// `u = (1/n)·1 ./ (K v)`.
fn row_scaling(k: &Array2<f64>, v: &Array1<f64>) -> Array1<f64> {
    let n = k.nrows() as f64;
    k.dot(v).mapv(|x| 1.0 / (n * x))
}

/// Classical Sinkhorn–Knopp: `v ← (1/m)/(Kᵀu)`, then `u ← (1/n)/(Kv)`,
/// starting from `v₀ = 1/m`.
pub fn sk_iterate(k: &KernelMatrix, cfg: &BalancingConfig) -> Result<BalancingReport> {
    cfg.validate()?;
    let kk = k.entries();
    let (_, m) = kk.dim();
    let mf = m as f64;

    let mut v = Array1::from_elem(m, 1.0 / mf);
    let mut u = row_scaling(kk, &v);
    let mut matvecs = 1;
    let mut history = Vec::new();
    let mut converged = false;
    let mut distance = f64::INFINITY;
    let mut residual = f64::INFINITY;

    for _ in 0..cfg.max_iter {
        let v_next = kk.t().dot(&u).mapv(|x| 1.0 / (mf * x));
        u = row_scaling(kk, &v_next);
        matvecs += 2;
        ensure_finite_positive(&u, &v_next)?;
        distance = l2_dist(&normalized_l1(&v_next), &normalized_l1(&v));
        v = v_next;
        residual = marginal_residual(kk, &u, &v);
        history.push(distance);
        if distance < cfg.tol && residual < cfg.tol {
            converged = true;
            break;
        }
    }

    Ok(BalancingReport {
        scaling: ScalingPair { u, v },
        iterations: history.len(),
        converged,
        distance,
        residual,
        history,
        eig_failures: 0,
        matvecs,
    })
}

fn ensure_finite_positive(u: &Array1<f64>, v: &Array1<f64>) -> Result<()> {
    if u.iter().chain(v.iter()).all(|x| x.is_finite() && *x > 0.0) {
        Ok(())
    } else {
        Err(WdaError::Numeric(
            "balancing scalings overflowed or underflowed; the kernel is too ill-conditioned".into(),
        ))
    }
}

/// `S(v) = 1 ./ (K v)`.
fn s_map(k: &Array2<f64>, v: &Array1<f64>) -> Array1<f64> {
    k.dot(v).mapv(|x| 1.0 / x)
}

/// `R(v) = (n/m) · 1 ./ (Kᵀ S(v))`, i.e. one full Sinkhorn sweep on `v`.
fn r_map_unchecked(k: &Array2<f64>, v: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
    let (n, m) = k.dim();
    let s = s_map(k, v);
    let ratio = n as f64 / m as f64;
    let r = k.t().dot(&s).mapv(|x| ratio / x);
    (r, s)
}

/// The Sinkhorn fixed-point map on the column scaling.
pub fn map_r(k: &KernelMatrix, v: &ArrayView1<f64>) -> Result<Array1<f64>> {
    check_positive("map_R (v)", v, k.ncols())?;
    Ok(r_map_unchecked(k.entries(), &v.to_owned()).0)
}

/// `J_R(v) w = (m/n) · D²(R(v)) Kᵀ D²(S(v)) K w`, without forming `J_R`.
pub fn jacobian_apply(k: &KernelMatrix, v: &ArrayView1<f64>, w: &ArrayView1<f64>) -> Result<Array1<f64>> {
    check_positive("jacobian_apply (v)", v, k.ncols())?;
    if w.len() != k.ncols() {
        return Err(WdaError::dim("jacobian_apply (w)", k.ncols(), w.len()));
    }
    let kk = k.entries();
    let (r, s) = r_map_unchecked(kk, &v.to_owned());
    Ok(jacobian_apply_unchecked(kk, &r, &s, &w.to_owned()))
}

fn jacobian_apply_unchecked(k: &Array2<f64>, r: &Array1<f64>, s: &Array1<f64>, w: &Array1<f64>) -> Array1<f64> {
    let (n, m) = k.dim();
    let mut y = k.dot(w);
    y.zip_mut_with(s, |a, b| *a *= b * b);
    let mut z = k.t().dot(&y);
    let c = m as f64 / n as f64;
    z.zip_mut_with(r, |a, b| *a *= c * b * b);
    z
}

/// Positive Perron vector of `J_R(v)` (unit 1-norm), with eigen-diagnostics.
fn jacobian_perron_vector(
    k: &Array2<f64>,
    v: &Array1<f64>,
    cfg: &BalancingConfig,
) -> Result<(Array1<f64>, krylov::DominantEig)> {
    let (n, m) = k.dim();
    let (r, s) = r_map_unchecked(k, v);
    let eig = match cfg.eigensolver {
        InnerEigensolver::Lanczos => {
            // J_R = G (c·G Kᵀ D²(S) K G) G⁻¹ with G = D(R(v)); the bracket is
            // symmetric positive semidefinite.
            let c = m as f64 / n as f64;
            let op = |x: &Array1<f64>| {
                let mut y = k.dot(&(x * &r));
                y.zip_mut_with(&s, |a, b| *a *= b * b);
                let mut z = k.t().dot(&y);
                z.zip_mut_with(&r, |a, b| *a *= c * b);
                z
            };
            let start = v / &r;
            let mut eig = krylov::lanczos_dominant(op, &start, cfg.eig_tol, cfg.eig_max_iter, LANCZOS_BASIS)?;
            eig.vector = &eig.vector * &r;
            eig
        }
        InnerEigensolver::Power => {
            let op = |x: &Array1<f64>| jacobian_apply_unchecked(k, &r, &s, x);
            krylov::power_dominant(op, v, cfg.eig_tol, cfg.eig_max_iter)
        }
    };
    let mut x = eig.vector.clone();
    if x.sum() < 0.0 {
        x.mapv_inplace(|t| -t);
    }
    // Perron vector components are positive; round-off can push tiny ones
    // to or below zero.
    let floor = x.iter().cloned().fold(0.0f64, f64::max) * f64::EPSILON;
    x.mapv_inplace(|t| t.max(floor).max(f64::MIN_POSITIVE));
    Ok((normalized_l1(&x), eig))
}

/// NEPv-accelerated Sinkhorn–Knopp.
///
/// Each step replaces `v` by the normalized Perron vector of `J_R(v)`; the
/// run stops once consecutive normalized iterates are within `cfg.tol` in
/// the 2-norm and the plan's marginals are met to `cfg.tol`. The row scaling
/// is recovered at the end as `u = (1/n)·1 ./ (K v)`.
pub fn acc_sk(k: &KernelMatrix, cfg: &BalancingConfig, v0: Option<&ArrayView1<f64>>) -> Result<BalancingReport> {
    cfg.validate()?;
    let kk = k.entries();
    let (_, m) = kk.dim();
    let mut v = match v0 {
        Some(start) => {
            check_positive("acc_sk (v0)", start, m)?;
            normalized_l1(&start.to_owned())
        }
        None => Array1::from_elem(m, 1.0 / m as f64),
    };

    let mut history = Vec::new();
    let mut converged = false;
    let mut distance = f64::INFINITY;
    let mut residual = f64::INFINITY;
    let mut eig_failures = 0;
    let mut matvecs = 0;

    for _ in 0..cfg.max_iter {
        let (v_next, eig) = jacobian_perron_vector(kk, &v, cfg)?;
        matvecs += 2 * eig.matvecs + 2;
        if !eig.converged {
            eig_failures += 1;
        }
        distance = l2_dist(&v_next, &v);
        v = v_next;
        let u = row_scaling(kk, &v);
        ensure_finite_positive(&u, &v)?;
        residual = marginal_residual(kk, &u, &v);
        history.push(distance);
        // the Perron value tends to 1 at the fixed point
        log::trace!(
            "acc_sk: mu = {:.15}, step = {distance:.3e}, residual = {residual:.3e}",
            eig.value
        );
        if distance < cfg.tol && residual < cfg.tol {
            converged = true;
            break;
        }
    }
    if eig_failures > 0 {
        log::warn!(
            "acc_sk: {eig_failures} inner eigensolves stopped above eig_tol = {:e}",
            cfg.eig_tol
        );
    }

    let u = row_scaling(kk, &v);
    Ok(BalancingReport {
        scaling: ScalingPair { u, v },
        iterations: history.len(),
        converged,
        distance,
        residual,
        history,
        eig_failures,
        matvecs,
    })
}

/// `T = D(u) K D(v)` together with its marginal residual.
pub fn assemble_plan(k: &KernelMatrix, s: &ScalingPair) -> Result<TransportPlan> {
    let kk = k.entries();
    let (n, m) = kk.dim();
    check_positive("assemble_plan (u)", &s.u.view(), n)?;
    check_positive("assemble_plan (v)", &s.v.view(), m)?;
    let mut t = kk.clone();
    for (mut row, ui) in t.axis_iter_mut(Axis(0)).zip(s.u.iter()) {
        row.zip_mut_with(&s.v, |x, vj| *x *= ui * vj);
    }
    let row_marginal = 1.0 / n as f64;
    let col_marginal = 1.0 / m as f64;
    let rows = t.sum_axis(Axis(1));
    let cols = t.sum_axis(Axis(0));
    let residual = rows
        .iter()
        .map(|x| (x - row_marginal).abs())
        .chain(cols.iter().map(|x| (x - col_marginal).abs()))
        .fold(0.0, f64::max);
    Ok(TransportPlan {
        entries: t,
        row_marginal,
        col_marginal,
        residual,
    })
}

/// Plan from a kernel in one call, using [`acc_sk`].
pub fn transport_plan(
    k: &KernelMatrix,
    cfg: &BalancingConfig,
    v0: Option<&ArrayView1<f64>>,
) -> Result<(TransportPlan, BalancingReport)> {
    let report = acc_sk(k, cfg, v0)?;
    let plan = assemble_plan(k, &report.scaling)?;
    Ok((plan, report))
}

/// The 2×2 and 3×2 stress kernels with one tiny entry `eps` in the corner.
pub fn stress_kernel(rows: usize, eps: f64) -> Result<KernelMatrix> {
    if rows < 2 {
        return Err(WdaError::Parameter(format!(
            "stress kernel needs ≥ 2 rows (got {rows})"
        )));
    }
    let mut k = Array2::ones((rows, 2));
    k[[0, 1]] = eps;
    KernelMatrix::from_entries(k)
}
