//! Trace-ratio optimization `max tr(PᵀAP) / tr(PᵀBP)` over orthonormal `P`.
//!
//! The maximizer is characterized by a nonlinear eigenvector problem: `P`
//! spans the top-`p` invariant subspace of `H(P) = A − q(P)·B`. The solver
//! here is the plain self-consistent-field iteration on that problem, which
//! is monotone in `q` and globally convergent for positive definite `B`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Result, WdaError};
use crate::linalg::{self, frobenius};

/// Tolerance on `‖PᵀP − I‖_F` accepted by [`Projection::new`].
pub const ORTHONORMALITY_TOL: f64 = 1e-10;

/// Largest dimension handled by the dense symmetric eigensolver; larger
/// problems go through the restarted block Krylov solver.
pub const DENSE_EIG_MAX_DIM: usize = 4096;

/// Relative slack on the SCF monotonicity check.
const MONOTONE_SLACK: f64 = 1e-12;

/// A `d × p` matrix with orthonormal columns. Serialized as `d` rows of `p`
/// values; deserialization checks orthonormality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<Vec<f64>>", try_from = "Vec<Vec<f64>>")]
pub struct Projection {
    cols: Array2<f64>,
}

impl From<Projection> for Vec<Vec<f64>> {
    fn from(p: Projection) -> Self {
        p.cols.rows().into_iter().map(|r| r.to_vec()).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for Projection {
    type Error = WdaError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.len();
        let p = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != p) {
            return Err(WdaError::dim("Projection rows (row length)", p, rows[bad].len()));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let cols = Array2::from_shape_vec((d, p), flat).expect("rows have equal length");
        Projection::new(cols)
    }
}

impl Projection {
    /// Wraps `cols`, checking that its columns are orthonormal.
    pub fn new(cols: Array2<f64>) -> Result<Self> {
        let (d, p) = cols.dim();
        if p == 0 || p > d {
            return Err(WdaError::dim("Projection::new", format!("1 ≤ p ≤ d = {d}"), p));
        }
        if !cols.iter().all(|x| x.is_finite()) {
            return Err(WdaError::Domain("projection has non-finite entries".into()));
        }
        let proj = Projection { cols };
        let err = proj.orthonormality_error();
        if err >= ORTHONORMALITY_TOL {
            return Err(WdaError::Domain(format!(
                "columns are not orthonormal (‖PᵀP − I‖_F = {err:e})"
            )));
        }
        Ok(proj)
    }

    /// Orthonormal basis of the column span of `m`.
    pub fn orthonormalized(m: &ArrayView2<f64>) -> Result<Self> {
        Projection::new(linalg::orthonormalize(m)?)
    }

    /// The first `p` standard basis vectors of `ℝᵈ`.
    pub fn coordinate(d: usize, p: usize) -> Result<Self> {
        if p == 0 || p > d {
            return Err(WdaError::dim("Projection::coordinate", format!("1 ≤ p ≤ d = {d}"), p));
        }
        let mut cols = Array2::zeros((d, p));
        for j in 0..p {
            cols[[j, j]] = 1.0;
        }
        Ok(Projection { cols })
    }

    /// Random orthonormal projection: QR of a Gaussian `d × p` matrix.
    pub fn random<R: Rng + ?Sized>(d: usize, p: usize, rng: &mut R) -> Result<Self> {
        if p == 0 || p > d {
            return Err(WdaError::dim("Projection::random", format!("1 ≤ p ≤ d = {d}"), p));
        }
        let g = Array2::from_shape_simple_fn((d, p), || rng.sample::<f64, _>(StandardNormal));
        Projection::orthonormalized(&g.view())
    }

    pub fn seeded(d: usize, p: usize, seed: u64) -> Result<Self> {
        Projection::random(d, p, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Ambient dimension `d`.
    pub fn dim(&self) -> usize {
        self.cols.nrows()
    }

    /// Subspace dimension `p`.
    pub fn rank(&self) -> usize {
        self.cols.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.cols
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.cols
    }

    pub fn orthonormality_error(&self) -> f64 {
        let mut g = self.cols.t().dot(&self.cols);
        for i in 0..g.nrows() {
            g[[i, i]] -= 1.0;
        }
        frobenius(&g.view())
    }
}

/// Outcome of [`tropt_scf`].
#[derive(Debug, Clone, Serialize)]
pub struct TroptResult {
    pub projection: Projection,
    /// Final trace-ratio value `q(P)`.
    pub q: f64,
    pub iterations: usize,
    /// `‖H(P)P − P(PᵀH(P)P)‖_F` at the returned `P`.
    pub residual: f64,
    /// `q(P_j)` for every iterate, starting with `P0`.
    pub trace: Vec<f64>,
    pub converged: bool,
    /// `λ_p(H) − λ_{p+1}(H)` at the last eigensolve (`+∞` when `p = d`).
    pub eigengap: f64,
    /// Set when the eigengap vanishes and the subspace is not unique.
    pub degenerate_gap: bool,
}

fn check_square(name: &'static str, m: &ArrayView2<f64>, d: usize) -> Result<()> {
    if m.dim() != (d, d) {
        return Err(WdaError::dim(name, format!("{d}×{d}"), format!("{:?}", m.dim())));
    }
    Ok(())
}

/// `tr(PᵀAP) / tr(PᵀBP)`.
pub fn trace_ratio(p: &Projection, a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<f64> {
    let d = p.dim();
    check_square("trace_ratio (A)", a, d)?;
    check_square("trace_ratio (B)", b, d)?;
    let num = quadratic_trace(p, a);
    let den = quadratic_trace(p, b);
    if !(den > 0.0) {
        return Err(WdaError::Domain(format!(
            "trace-ratio denominator tr(PᵀBP) = {den:e} is not positive"
        )));
    }
    Ok(num / den)
}

/// `tr(PᵀMP)`.
pub(crate) fn quadratic_trace(p: &Projection, m: &ArrayView2<f64>) -> f64 {
    let mp = m.dot(p.matrix());
    (&mp * p.matrix()).sum()
}

/// Top-`k` eigenpairs of a symmetric matrix, eigenvalues descending.
fn top_eigenpairs(h: &ArrayView2<f64>, k: usize) -> Result<(Array1<f64>, Array2<f64>)> {
    let d = h.nrows();
    if d <= DENSE_EIG_MAX_DIM {
        let (vals, vecs) = linalg::sym_eig_desc(h)?;
        let idx: Vec<usize> = (0..k).collect();
        return Ok((vals.select(Axis(0), &idx), vecs.select(Axis(1), &idx)));
    }
    crate::krylov::top_eigenpairs(h, k, None)
}

/// Orthonormal eigenbasis of the `p` algebraically largest eigenvalues of
/// the symmetric matrix `h`, with the eigenvalues in descending order.
///
/// Each eigenvector is signed so that its largest-magnitude entry is
/// positive; ties in the spectrum keep coordinate order.
pub fn top_eigenbasis(h: &ArrayView2<f64>, p: usize) -> Result<(Projection, Array1<f64>)> {
    let d = h.nrows();
    check_square("top_eigenbasis", h, d)?;
    if p == 0 || p > d {
        return Err(WdaError::dim("top_eigenbasis", format!("1 ≤ p ≤ {d}"), p));
    }
    let (vals, vecs) = top_eigenpairs(h, p)?;
    let proj = Projection::new(vecs)
        .map_err(|e| WdaError::Numeric(format!("eigensolver returned a non-orthonormal basis: {e}")))?;
    Ok((proj, vals))
}

/// Residual `‖HP − P(PᵀHP)‖_F` of the eigenvector problem `HP = PΛ`.
pub fn nepv_residual(h: &ArrayView2<f64>, p: &Projection) -> f64 {
    let hp = h.dot(p.matrix());
    let proj = p.matrix().dot(&p.matrix().t().dot(&hp));
    frobenius(&(hp - proj).view())
}

/// Largest principal angle (radians) between `span(P)` and `span(Q)`.
///
/// Computed as `arccos σ_min(PᵀQ)`, switching to the equivalent
/// `arcsin ‖(I − PPᵀ)Q‖₂` below π/4 where the cosine form loses accuracy.
pub fn subspace_distance(p: &Projection, q: &Projection) -> Result<f64> {
    if p.dim() != q.dim() || p.rank() != q.rank() {
        return Err(WdaError::dim(
            "subspace_distance",
            format!("{}×{}", p.dim(), p.rank()),
            format!("{}×{}", q.dim(), q.rank()),
        ));
    }
    let overlap = p.matrix().t().dot(q.matrix());
    let rest = q.matrix() - &p.matrix().dot(&overlap);
    let sine = linalg::spectral_norm_small(&rest.view())?.min(1.0);
    if sine < std::f64::consts::FRAC_1_SQRT_2 {
        return Ok(sine.asin());
    }
    // smallest singular value of the p×p overlap
    let gram = overlap.t().dot(&overlap);
    let (vals, _) = linalg::sym_eig_desc(&gram.view())?;
    let sigma_min = vals[vals.len() - 1].max(0.0).sqrt().clamp(0.0, 1.0);
    Ok(sigma_min.acos())
}

/// SCF iteration `P_{j+1} = top-p eigenbasis of A − q(P_j)B`, stopping when
/// consecutive subspaces are within `tol` radians.
pub fn tropt_scf(
    a: &ArrayView2<f64>,
    b: &ArrayView2<f64>,
    p: usize,
    p0: &Projection,
    tol: f64,
    max_iter: usize,
) -> Result<TroptResult> {
    let d = p0.dim();
    check_square("tropt_scf (A)", a, d)?;
    check_square("tropt_scf (B)", b, d)?;
    if p0.rank() != p {
        return Err(WdaError::dim(
            "tropt_scf (P0)",
            format!("{d}×{p}"),
            format!("{d}×{}", p0.rank()),
        ));
    }
    if !(tol > 0.0) || max_iter == 0 {
        return Err(WdaError::Parameter(format!(
            "tropt_scf needs tol > 0 and max_iter ≥ 1 (got {tol}, {max_iter})"
        )));
    }

    let mut proj = p0.clone();
    let mut q = trace_ratio(&proj, a, b)?;
    let mut trace = vec![q];
    let mut converged = false;
    let mut iterations = 0;
    let mut eigengap = f64::INFINITY;
    let k = (p + 1).min(d);

    while iterations < max_iter {
        iterations += 1;
        let h = a - &(b * q);
        let (vals, vecs) = top_eigenpairs(&h.view(), k)?;
        if k > p {
            eigengap = vals[p - 1] - vals[p];
        }
        let basis = vecs.slice(ndarray::s![.., ..p]).to_owned();
        let next =
            Projection::new(basis).or_else(|_| Projection::orthonormalized(&vecs.slice(ndarray::s![.., ..p])))?;
        let q_next = trace_ratio(&next, a, b)?;
        if q_next < q - MONOTONE_SLACK * q.abs().max(1.0) {
            return Err(WdaError::Invariant(format!(
                "trace ratio decreased from {q} to {q_next} at SCF step {iterations}"
            )));
        }
        let step = subspace_distance(&next, &proj)?;
        proj = next;
        q = q_next;
        trace.push(q);
        if step < tol {
            converged = true;
            break;
        }
    }

    let h = a - &(b * q);
    let residual = nepv_residual(&h.view(), &proj);
    let scale = h.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    let degenerate_gap = eigengap.is_finite() && eigengap <= 1e-10 * scale;
    if degenerate_gap {
        log::warn!("trace-ratio solve ended on a degenerate eigengap ({eigengap:e})");
    }
    Ok(TroptResult {
        projection: proj,
        q,
        iterations,
        residual,
        trace,
        converged,
        eigengap,
        degenerate_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn projection_rows_conversion() {
        let p = Projection::seeded(4, 2, 3).unwrap();
        let rows: Vec<Vec<f64>> = p.clone().into();
        assert_eq!(rows.len(), 4);
        assert_eq!(Projection::try_from(rows).unwrap(), p);
        assert!(matches!(
            Projection::try_from(vec![vec![1.0, 0.0], vec![0.0]]),
            Err(WdaError::Dimension { .. })
        ));
        assert!(matches!(
            Projection::try_from(vec![vec![1.0], vec![1.0]]),
            Err(WdaError::Domain(_))
        ));
    }

    fn diag(v: &[f64]) -> Array2<f64> {
        Array2::from_diag(&Array1::from(v.to_vec()))
    }

    #[test]
    fn trace_ratio_diagonal_cases() {
        let e1 = Projection::coordinate(2, 1).unwrap();
        let r = trace_ratio(&e1, &diag(&[2.0, 1.0]).view(), &diag(&[1.0, 2.0]).view()).unwrap();
        assert_eq!(r, 2.0);

        let p = Projection::coordinate(3, 2).unwrap();
        let r = trace_ratio(&p, &diag(&[4.0, 3.0, 1.0]).view(), &Array2::eye(3).view()).unwrap();
        assert_eq!(r, 3.5);

        let p = Projection::seeded(5, 2, 3).unwrap();
        let a = diag(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!((trace_ratio(&p, &a.view(), &a.view()).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn trace_ratio_rejects_nonpositive_denominator() {
        let e1 = Projection::coordinate(2, 1).unwrap();
        let err = trace_ratio(&e1, &diag(&[1.0, 1.0]).view(), &diag(&[0.0, 1.0]).view());
        assert!(matches!(err, Err(WdaError::Domain(_))));
        let err = trace_ratio(&e1, &diag(&[1.0, 1.0]).view(), &Array2::eye(3).view());
        assert!(matches!(err, Err(WdaError::Dimension { .. })));
    }

    #[test]
    fn top_eigenbasis_diagonal_and_identity() {
        let (p, vals) = top_eigenbasis(&diag(&[3.0, 2.0, 1.0]).view(), 2).unwrap();
        assert_eq!(vals.to_vec(), vec![3.0, 2.0]);
        assert_eq!(p.matrix(), Projection::coordinate(3, 2).unwrap().matrix());

        let (p, _) = top_eigenbasis(&Array2::eye(4).view(), 1).unwrap();
        assert_eq!(p.matrix(), Projection::coordinate(4, 1).unwrap().matrix());
    }

    #[test]
    fn subspace_distance_examples() {
        let e1 = Projection::coordinate(2, 1).unwrap();
        let e2 = Projection::new(array![[0.0], [1.0]]).unwrap();
        let d = subspace_distance(&e1, &e2).unwrap();
        assert!((d - std::f64::consts::FRAC_PI_2).abs() < 1e-15);

        let theta: f64 = 0.3;
        let q = Projection::new(array![[theta.cos()], [theta.sin()]]).unwrap();
        assert!((subspace_distance(&e1, &q).unwrap() - theta).abs() < 1e-12);

        let p = Projection::seeded(6, 3, 11).unwrap();
        let rot = Projection::seeded(3, 3, 12).unwrap();
        let q = Projection::new(p.matrix().dot(rot.matrix())).unwrap();
        assert!(subspace_distance(&p, &q).unwrap() < 1e-12);
    }

    #[test]
    fn subspace_distance_dimension_mismatch() {
        let a = Projection::coordinate(3, 1).unwrap();
        let b = Projection::coordinate(3, 2).unwrap();
        assert!(matches!(subspace_distance(&a, &b), Err(WdaError::Dimension { .. })));
    }

    #[test]
    fn tropt_diagonal_pair() {
        let a = diag(&[3.0, 2.0, 1.0]);
        let b = diag(&[1.0, 2.0, 3.0]);
        let p0 = Projection::seeded(3, 1, 5).unwrap();
        let res = tropt_scf(&a.view(), &b.view(), 1, &p0, 1e-10, 100).unwrap();
        assert!(res.converged);
        assert!((res.q - 3.0).abs() < 1e-12);
        assert!((res.projection.matrix()[[0, 0]].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tropt_identity_b_is_one_step() {
        let a = diag(&[5.0, 4.0, 1.0, 0.5]);
        let p0 = Projection::seeded(4, 2, 1).unwrap();
        let res = tropt_scf(&a.view(), &Array2::eye(4).view(), 2, &p0, 1e-12, 50).unwrap();
        assert!(res.converged);
        // one step lands on the top eigenbasis, the second confirms it
        assert_eq!(res.iterations, 2);
        assert!((res.q - 4.5).abs() < 1e-12);
        assert!(!res.degenerate_gap);
    }

    #[test]
    fn tropt_flags_degenerate_gap() {
        let a = diag(&[2.0, 1.0, 1.0]);
        let p0 = Projection::seeded(3, 2, 4).unwrap();
        let res = tropt_scf(&a.view(), &Array2::eye(3).view(), 2, &p0, 1e-10, 50).unwrap();
        assert!(res.degenerate_gap);
    }

    #[test]
    fn tropt_rejects_bad_parameters() {
        let a = Array2::<f64>::eye(2);
        let p0 = Projection::coordinate(2, 1).unwrap();
        assert!(tropt_scf(&a.view(), &a.view(), 1, &p0, 0.0, 10).is_err());
        assert!(tropt_scf(&a.view(), &a.view(), 2, &p0, 1e-5, 10).is_err());
    }
}
