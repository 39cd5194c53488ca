//! Between- and within-class cross-covariance matrices weighted by entropic
//! transport plans.
//!
//! With plans `T^{cc'}` between every class pair, the matrices are
//!
//! ```text
//! C_b = Σ_{c<c'} Σ_ij T_ij (x_i − y_j)(x_i − y_j)ᵀ
//! C_w = Σ_c      Σ_ij T_ij (x_i − x_j)(x_i − x_j)ᵀ + ε I
//! ```
//!
//! and are formed as `F Fᵀ` (one triangle, then mirrored) where `F` stacks the columns `√T_ij (x_i − y_j)`.
//! Column order is fixed: pairs in order (between pairs `(c, c')` with
//! `c < c'` lexicographically, then within pairs by class), and inside a pair
//! column `j·n + i` holds `(i, j)`.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis};
use serde::Serialize;

use crate::balancing::{self, BalancingConfig, TransportPlan};
use crate::data::LabeledDataset;
use crate::error::{Result, WdaError};
use crate::linalg;
use crate::traceratio::Projection;

/// Default cap on factor entries held in memory at once (128 MiB of f64).
pub const DEFAULT_MEMORY_BUDGET: usize = 1 << 24;

/// Class indices `(c, c')`; `c == c'` marks a within-class pair.
pub type ClassPair = (usize, usize);

/// The symmetric pair `C_b(P)`, `C_w(P)` with optional factors.
#[derive(Debug, Clone, Serialize)]
pub struct CovariancePair {
    pub cb: Array2<f64>,
    /// Includes the ridge `epsilon · I`.
    pub cw: Array2<f64>,
    /// `Ĉ_b` with `cb = Ĉ_b Ĉ_bᵀ`; kept only within the memory budget.
    #[serde(skip)]
    pub factor_b: Option<Array2<f64>>,
    /// `Ĉ_w` with `cw = Ĉ_w Ĉ_wᵀ + εI`; kept only within the memory budget.
    #[serde(skip)]
    pub factor_w: Option<Array2<f64>>,
    pub epsilon: f64,
    pub diagnostics: Vec<PairDiagnostics>,
}

impl CovariancePair {
    /// Pairs whose plan did not converge.
    pub fn unconverged_pairs(&self) -> Vec<ClassPair> {
        self.diagnostics
            .iter()
            .filter(|d| !d.converged)
            .map(|d| d.pair)
            .collect()
    }
}

/// Balancing outcome for one class pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairDiagnostics {
    pub pair: ClassPair,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
    pub eig_failures: usize,
}

/// Column scalings `v` from previous balancing runs, keyed by class pair,
/// used to warm-start the next run.
#[derive(Debug, Clone, Default)]
pub struct PlanCache {
    starts: BTreeMap<ClassPair, Array1<f64>>,
}

impl PlanCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, pair: ClassPair) -> Option<&Array1<f64>> {
        self.starts.get(&pair)
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }
}

/// Options beyond the plan parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovarianceOptions {
    /// Ridge added to `C_w`.
    pub epsilon: f64,
    /// Max factor entries materialized at once; above it products are
    /// accumulated over column blocks and factors are not kept.
    pub memory_budget: usize,
    pub keep_factors: bool,
}

impl Default for CovarianceOptions {
    fn default() -> Self {
        CovarianceOptions {
            epsilon: 0.0,
            memory_budget: DEFAULT_MEMORY_BUDGET,
            keep_factors: true,
        }
    }
}

/// All between pairs `(c, c')`, `c < c'`, followed by the within pairs `(c, c)`.
pub fn class_pairs(num_classes: usize) -> (Vec<ClassPair>, Vec<ClassPair>) {
    let between = (0..num_classes)
        .flat_map(|c| ((c + 1)..num_classes).map(move |c2| (c, c2)))
        .collect();
    let within = (0..num_classes).map(|c| (c, c)).collect();
    (between, within)
}

/// `d × (n·m)` matrix whose column `j·n + i` is `√T_ij (x_i − y_j)`.
pub fn weighted_difference_factor(
    x: &ArrayView2<f64>,
    y: &ArrayView2<f64>,
    t: &ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let (n, m) = (x.ncols(), y.ncols());
    check_factor_inputs(x, y, t)?;
    let mut f = Array2::zeros((x.nrows(), n * m));
    fill_factor_block(x, y, t, 0..m, f.view_mut());
    Ok(f)
}

fn check_factor_inputs(x: &ArrayView2<f64>, y: &ArrayView2<f64>, t: &ArrayView2<f64>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(WdaError::dim(
            "weighted_difference_factor (Y rows)",
            x.nrows(),
            y.nrows(),
        ));
    }
    if t.dim() != (x.ncols(), y.ncols()) {
        return Err(WdaError::dim(
            "weighted_difference_factor (plan shape)",
            format!("{:?}", (x.ncols(), y.ncols())),
            format!("{:?}", t.dim()),
        ));
    }
    if let Some(bad) = t.iter().find(|v| !(**v >= 0.0)) {
        return Err(WdaError::Domain(format!(
            "transport plan entry {bad} is negative or NaN"
        )));
    }
    Ok(())
}

/// Writes the columns for `j ∈ js` into `out`, starting at column 0.
fn fill_factor_block(
    x: &ArrayView2<f64>,
    y: &ArrayView2<f64>,
    t: &ArrayView2<f64>,
    js: std::ops::Range<usize>,
    mut out: ArrayViewMut2<f64>,
) {
    let n = x.ncols();
    for (b, j) in js.enumerate() {
        let mut block = out.slice_mut(s![.., b * n..(b + 1) * n]);
        block.assign(x);
        block -= &y.column(j).insert_axis(Axis(1));
        let w = t.column(j).mapv(f64::sqrt);
        block *= &w.insert_axis(Axis(0));
    }
}

/// Plans for every pair of `pairs` at projection `p`.
fn compute_plans(
    p: &Projection,
    data: &LabeledDataset,
    lambda: f64,
    cfg: &BalancingConfig,
    pairs: &[ClassPair],
    mut cache: Option<&mut PlanCache>,
) -> Result<Vec<(TransportPlan, PairDiagnostics)>> {
    if p.dim() != data.dim() {
        return Err(WdaError::dim(
            "cross_covariances (projection rows)",
            data.dim(),
            p.dim(),
        ));
    }
    let projected: Vec<Array2<f64>> = data.classes().iter().map(|c| p.matrix().t().dot(&c.points)).collect();
    let mut out = Vec::with_capacity(pairs.len());
    for &(c, c2) in pairs {
        let cost = balancing::pairwise_sq_dist(&projected[c].view(), &projected[c2].view());
        let kernel = balancing::build_kernel(&cost.view(), lambda)?;
        let start = cache.as_deref().and_then(|pc| pc.get((c, c2))).cloned();
        let report = balancing::acc_sk(&kernel, cfg, start.as_ref().map(|v| v.view()).as_ref())?;
        let plan = balancing::assemble_plan(&kernel, &report.scaling)?;
        if !report.converged {
            log::warn!(
                "balancing for class pair ({c}, {c2}) stopped after {} iterations (residual {:e})",
                report.iterations,
                report.residual
            );
        }
        let diag = PairDiagnostics {
            pair: (c, c2),
            iterations: report.iterations,
            converged: report.converged,
            residual: plan.residual,
            eig_failures: report.eig_failures,
        };
        if let Some(pc) = cache.as_deref_mut() {
            pc.starts.insert((c, c2), report.scaling.v);
        }
        out.push((plan, diag));
    }
    Ok(out)
}

/// `Σ_pairs F Fᵀ` for one group of pairs, as one product when the stacked
/// factor fits the budget and blockwise otherwise.
fn gram_of_group(
    data: &LabeledDataset,
    pairs: &[ClassPair],
    plans: &[&TransportPlan],
    opts: &CovarianceOptions,
) -> (Array2<f64>, Option<Array2<f64>>) {
    let d = data.dim();
    let total_cols: usize = plans.iter().map(|t| t.entries.len()).sum();
    if opts.keep_factors && d.saturating_mul(total_cols) <= opts.memory_budget {
        let mut f = Array2::zeros((d, total_cols));
        let mut offset = 0;
        for (&(c, c2), plan) in pairs.iter().zip(plans) {
            let (x, y) = (data.class(c).points.view(), data.class(c2).points.view());
            let cols = plan.entries.len();
            let block = f.slice_mut(s![.., offset..offset + cols]);
            fill_factor_block(&x, &y, &plan.entries.view(), 0..y.ncols(), block);
            offset += cols;
        }
        let mut g = Array2::zeros((d, d));
        linalg::add_gram_upper(&mut g, &f.view());
        linalg::mirror_upper(&mut g);
        return (g, Some(f));
    }

    let mut g = Array2::zeros((d, d));
    for (&(c, c2), plan) in pairs.iter().zip(plans) {
        let (x, y) = (data.class(c).points.view(), data.class(c2).points.view());
        let n = x.ncols();
        let chunk = (opts.memory_budget / (d * n).max(1)).max(1);
        let mut j0 = 0;
        while j0 < y.ncols() {
            let j1 = (j0 + chunk).min(y.ncols());
            let mut block = Array2::zeros((d, n * (j1 - j0)));
            fill_factor_block(&x, &y, &plan.entries.view(), j0..j1, block.view_mut());
            linalg::add_gram_upper(&mut g, &block.view());
            j0 = j1;
        }
    }
    linalg::mirror_upper(&mut g);
    (g, None)
}

/// `C_b(P)`, `C_w(P)` with factored products; plans by [`balancing::acc_sk`].
pub fn cross_covariances(
    p: &Projection,
    data: &LabeledDataset,
    lambda: f64,
    cfg: &BalancingConfig,
    epsilon: f64,
) -> Result<CovariancePair> {
    let opts = CovarianceOptions {
        epsilon,
        ..Default::default()
    };
    cross_covariances_with(p, data, lambda, cfg, &opts, None)
}

/// [`cross_covariances`] with explicit options and optional warm starts.
pub fn cross_covariances_with(
    p: &Projection,
    data: &LabeledDataset,
    lambda: f64,
    cfg: &BalancingConfig,
    opts: &CovarianceOptions,
    cache: Option<&mut PlanCache>,
) -> Result<CovariancePair> {
    check_epsilon(opts.epsilon)?;
    let (between, within) = class_pairs(data.num_classes());
    let all: Vec<ClassPair> = between.iter().chain(within.iter()).cloned().collect();
    let plans = compute_plans(p, data, lambda, cfg, &all, cache)?;
    let (plan_b, plan_w): (Vec<_>, Vec<_>) = plans
        .iter()
        .map(|(t, _)| t)
        .enumerate()
        .partition(|(k, _)| *k < between.len());
    let plan_b: Vec<&TransportPlan> = plan_b.into_iter().map(|(_, t)| t).collect();
    let plan_w: Vec<&TransportPlan> = plan_w.into_iter().map(|(_, t)| t).collect();

    let (cb, factor_b) = gram_of_group(data, &between, &plan_b, opts);
    let (mut cw, factor_w) = gram_of_group(data, &within, &plan_w, opts);
    cw.diag_mut().mapv_inplace(|x| x + opts.epsilon);
    Ok(CovariancePair {
        cb,
        cw,
        factor_b,
        factor_w,
        epsilon: opts.epsilon,
        diagnostics: plans.into_iter().map(|(_, d)| d).collect(),
    })
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(WdaError::Parameter(format!(
            "ridge epsilon must be finite and ≥ 0 (got {epsilon})"
        )));
    }
    Ok(())
}

/// Same contract as [`cross_covariances`], summing explicit outer products
/// term by term. Reference implementation; no factors are returned.
pub fn cross_covariances_naive(
    p: &Projection,
    data: &LabeledDataset,
    lambda: f64,
    cfg: &BalancingConfig,
    epsilon: f64,
) -> Result<CovariancePair> {
    check_epsilon(epsilon)?;
    let d = data.dim();
    let (between, within) = class_pairs(data.num_classes());
    let all: Vec<ClassPair> = between.iter().chain(within.iter()).cloned().collect();
    let plans = compute_plans(p, data, lambda, cfg, &all, None)?;

    let mut cb = Array2::<f64>::zeros((d, d));
    let mut cw = Array2::<f64>::zeros((d, d));
    let mut diff = vec![0.0; d];
    for (&(c, c2), (plan, _)) in all.iter().zip(&plans) {
        let target = if c == c2 { &mut cw } else { &mut cb };
        let (x, y) = (&data.class(c).points, &data.class(c2).points);
        for i in 0..x.ncols() {
            for j in 0..y.ncols() {
                let w = plan.entries[[i, j]];
                for k in 0..d {
                    diff[k] = x[[k, i]] - y[[k, j]];
                }
                for a in 0..d {
                    for b in 0..d {
                        target[[a, b]] += w * diff[a] * diff[b];
                    }
                }
            }
        }
    }
    linalg::symmetrize(&mut cb);
    linalg::symmetrize(&mut cw);
    cw.diag_mut().mapv_inplace(|x| x + epsilon);
    Ok(CovariancePair {
        cb,
        cw,
        factor_b: None,
        factor_w: None,
        epsilon,
        diagnostics: plans.into_iter().map(|(_, d)| d).collect(),
    })
}

/// Classical scatter matrices with uniform pair weights:
/// `S_b = Σ_{c<c'} (1/(n_c n_c')) Σ_ij (x_i − y_j)(x_i − y_j)ᵀ` and
/// `S_w = Σ_c (1/n_c²) Σ_ij (x_i − x_j)(x_i − x_j)ᵀ + εI`, evaluated from class
/// means and second moments.
pub fn scatter_matrices(data: &LabeledDataset, epsilon: f64) -> Result<(Array2<f64>, Array2<f64>)> {
    check_epsilon(epsilon)?;
    let d = data.dim();
    let stats: Vec<(Array1<f64>, Array2<f64>)> = data
        .classes()
        .iter()
        .map(|c| {
            let n = c.points.ncols() as f64;
            let mean = c.points.mean_axis(Axis(1)).expect("nonempty class");
            let second = c.points.dot(&c.points.t()) / n;
            (mean, second)
        })
        .collect();
    let outer = |a: &Array1<f64>, b: &Array1<f64>| a.view().insert_axis(Axis(1)).dot(&b.view().insert_axis(Axis(0)));

    let mut sb = Array2::<f64>::zeros((d, d));
    let (between, _) = class_pairs(data.num_classes());
    for (c, c2) in between {
        let (mx, sx) = &stats[c];
        let (my, sy) = &stats[c2];
        sb = sb + sx + sy - outer(mx, my) - outer(my, mx);
    }
    let mut sw = Array2::<f64>::zeros((d, d));
    for (m, s2) in &stats {
        sw = sw + (s2 - &outer(m, m)) * 2.0;
    }
    linalg::symmetrize(&mut sb);
    linalg::symmetrize(&mut sw);
    sw.diag_mut().mapv_inplace(|x| x + epsilon);
    Ok((sb, sw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use ndarray::array;

    fn rel(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        linalg::frobenius(&(a - b).view()) / linalg::frobenius(&b.view()).max(f64::MIN_POSITIVE)
    }

    #[test]
    fn factor_examples() {
        let x = array![[1.0], [0.0]];
        let y = array![[0.0], [1.0]];
        let f = weighted_difference_factor(&x.view(), &y.view(), &array![[1.0]].view()).unwrap();
        assert_eq!(f, array![[1.0], [-1.0]]);

        let z = weighted_difference_factor(&x.view(), &y.view(), &array![[0.0]].view()).unwrap();
        assert_eq!(z, array![[0.0], [0.0]]);

        let bad = weighted_difference_factor(&x.view(), &y.view(), &array![[-0.1]].view());
        assert!(matches!(bad, Err(WdaError::Domain(_))));
    }

    #[test]
    fn factor_column_order_is_j_major() {
        let x = array![[1.0, 2.0]];
        let y = array![[10.0, 20.0, 30.0]];
        let t = Array2::from_elem((2, 3), 1.0);
        let f = weighted_difference_factor(&x.view(), &y.view(), &t.view()).unwrap();
        assert_eq!(f, array![[-9.0, -8.0, -19.0, -18.0, -29.0, -28.0]]);
    }

    #[test]
    fn single_point_classes_give_ridge_only_within() {
        let data = LabeledDataset::new(vec![
            ("a".into(), array![[1.0], [0.0]]),
            ("b".into(), array![[0.0], [2.0]]),
        ])
        .unwrap();
        let p = Projection::coordinate(2, 1).unwrap();
        let cov = cross_covariances(&p, &data, 1.0, &BalancingConfig::default(), 0.5).unwrap();
        assert_eq!(cov.cw, Array2::eye(2) * 0.5);
        assert!(rel(&cov.cb, &array![[1.0, -2.0], [-2.0, 4.0]]) < 1e-14);
    }

    #[test]
    fn factored_matches_naive_and_blocked() {
        let data = crate::data::standardize(&make_synthetic(6, [10, 12, 8], 4).unwrap()).unwrap();
        let p = Projection::seeded(6, 2, 1).unwrap();
        let cfg = BalancingConfig::with_tol(1e-10);
        let fac = cross_covariances(&p, &data, 0.5, &cfg, 0.0).unwrap();
        let naive = cross_covariances_naive(&p, &data, 0.5, &cfg, 0.0).unwrap();
        assert!(rel(&fac.cb, &naive.cb) < 1e-10);
        assert!(rel(&fac.cw, &naive.cw) < 1e-10);

        let fb = fac.factor_b.as_ref().unwrap();
        assert!(rel(&fb.dot(&fb.t()), &fac.cb) < 1e-12);

        let opts = CovarianceOptions {
            memory_budget: 6 * 25,
            ..Default::default()
        };
        let blocked = cross_covariances_with(&p, &data, 0.5, &cfg, &opts, None).unwrap();
        assert!(blocked.factor_b.is_none());
        assert!(rel(&blocked.cb, &fac.cb) < 1e-12);
        assert!(rel(&blocked.cw, &fac.cw) < 1e-12);
    }

    #[test]
    fn lambda_zero_is_scatter() {
        let data = crate::data::standardize(&make_synthetic(5, [6, 8, 4], 2).unwrap()).unwrap();
        let p = Projection::seeded(5, 2, 3).unwrap();
        let cov = cross_covariances(&p, &data, 0.0, &BalancingConfig::default(), 0.25).unwrap();
        let (sb, sw) = scatter_matrices(&data, 0.25).unwrap();
        assert!(rel(&cov.cb, &sb) < 1e-10);
        assert!(rel(&cov.cw, &sw) < 1e-10);
    }

    #[test]
    fn warm_start_cache_fills() {
        let data = make_synthetic(3, [4, 4, 4], 0).unwrap();
        let p = Projection::coordinate(3, 2).unwrap();
        let mut cache = PlanCache::new();
        let opts = CovarianceOptions::default();
        cross_covariances_with(&p, &data, 1.0, &BalancingConfig::default(), &opts, Some(&mut cache)).unwrap();
        assert_eq!(cache.len(), 6);
    }

    #[test]
    fn negative_ridge_rejected() {
        let data = make_synthetic(3, [2, 2, 2], 0).unwrap();
        let p = Projection::coordinate(3, 1).unwrap();
        let r = cross_covariances(&p, &data, 1.0, &BalancingConfig::default(), -1.0);
        assert!(matches!(r, Err(WdaError::Parameter(_))));
    }
}
