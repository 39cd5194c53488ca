//! Krylov eigensolvers used behind the dense-solver contracts.
//!
//! * [`lanczos_dominant`]: matrix-free restarted Lanczos for the largest
//!   eigenpair of a symmetric operator (inner balancing step).
//! * [`power_dominant`]: plain power iteration, kept as the reference method.
//! * [`top_eigenpairs`]: thick-restarted block Krylov with Rayleigh–Ritz for
//!   the top-`k` eigenpairs of a large dense symmetric matrix.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::linalg;

/// Result of a dominant-eigenpair computation.
#[derive(Debug, Clone)]
pub(crate) struct DominantEig {
    pub vector: Array1<f64>,
    pub value: f64,
    /// `‖Ax − θx‖ / |θ|` for the returned unit vector.
    pub residual: f64,
    pub matvecs: usize,
    pub converged: bool,
}

fn norm(x: &Array1<f64>) -> f64 {
    x.dot(x).sqrt()
}

fn rayleigh_check<F>(op: &mut F, x: &Array1<f64>) -> (f64, f64, Array1<f64>)
where
    F: FnMut(&Array1<f64>) -> Array1<f64>,
{
    let y = op(x);
    let theta = x.dot(&y);
    let r = norm(&(&y - &(x * theta))) / theta.abs().max(f64::MIN_POSITIVE);
    (theta, r, y)
}

/// Largest eigenpair of a symmetric operator by restarted Lanczos with full
/// reorthogonalization.
///
/// `max_matvec` caps the total number of operator applications; `max_basis`
/// caps the Krylov dimension between restarts.
pub(crate) fn lanczos_dominant<F>(
    mut op: F,
    start: &Array1<f64>,
    tol: f64,
    max_matvec: usize,
    max_basis: usize,
) -> Result<DominantEig>
where
    F: FnMut(&Array1<f64>) -> Array1<f64>,
{
    let n = start.len();
    let mut x = start / norm(start);
    let mut matvecs = 0usize;
    let mut best = DominantEig {
        vector: x.clone(),
        value: f64::NAN,
        residual: f64::INFINITY,
        matvecs: 0,
        converged: false,
    };

    while matvecs < max_matvec {
        let kmax = n.min(max_basis).min(max_matvec - matvecs).max(1);
        let mut basis: Vec<Array1<f64>> = vec![x.clone()];
        let mut alphas: Vec<f64> = Vec::with_capacity(kmax);
        let mut betas: Vec<f64> = Vec::with_capacity(kmax);

        for j in 0..kmax {
            let mut w = op(&basis[j]);
            matvecs += 1;
            let a = basis[j].dot(&w);
            alphas.push(a);
            // two passes of classical Gram-Schmidt against the whole basis
            for _ in 0..2 {
                for q in &basis {
                    let c = q.dot(&w);
                    w.scaled_add(-c, q);
                }
            }
            let b = norm(&w);
            let scale = alphas.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if j + 1 == kmax || b <= 1e-13 * scale.max(f64::MIN_POSITIVE) {
                break;
            }
            betas.push(b);
            basis.push(w / b);
        }

        let k = alphas.len();
        let mut t = Array2::<f64>::zeros((k, k));
        for i in 0..k {
            t[[i, i]] = alphas[i];
            if i + 1 < k {
                t[[i, i + 1]] = betas[i];
                t[[i + 1, i]] = betas[i];
            }
        }
        let (_, vecs) = linalg::sym_eig_desc(&t.view())?;
        let mut ritz = Array1::<f64>::zeros(n);
        for (i, q) in basis.iter().take(k).enumerate() {
            ritz.scaled_add(vecs[[i, 0]], q);
        }
        ritz /= norm(&ritz);

        let (theta, r, y) = rayleigh_check(&mut op, &ritz);
        matvecs += 1;
        if r < best.residual {
            best = DominantEig {
                vector: ritz.clone(),
                value: theta,
                residual: r,
                matvecs,
                converged: false,
            };
        }
        if r < tol {
            best.converged = true;
            best.matvecs = matvecs;
            return Ok(best);
        }
        // restart from the Ritz vector after one extra power step
        x = &y / norm(&y);
    }
    best.matvecs = matvecs;
    Ok(best)
}

/// Power iteration for the dominant eigenpair of a (not necessarily
/// symmetric) operator with a positive Perron root.
pub(crate) fn power_dominant<F>(mut op: F, start: &Array1<f64>, tol: f64, max_matvec: usize) -> DominantEig
where
    F: FnMut(&Array1<f64>) -> Array1<f64>,
{
    let mut x = start / norm(start);
    let mut y = op(&x);
    let mut matvecs = 1usize;
    loop {
        let theta = x.dot(&y);
        let r = norm(&(&y - &(&x * theta))) / theta.abs().max(f64::MIN_POSITIVE);
        if r < tol || matvecs >= max_matvec {
            return DominantEig {
                vector: x,
                value: theta,
                residual: r,
                matvecs,
                converged: r < tol,
            };
        }
        x = &y / norm(&y);
        y = op(&x);
        matvecs += 1;
    }
}

/// Top-`k` eigenpairs (descending) of the symmetric matrix `h`.
///
/// Block Krylov subspaces seeded from `start` (padded with seeded Gaussian
/// columns) are built with full reorthogonalization; Ritz pairs are accepted
/// once `‖h y − θ y‖ ≤ 1e-12 · ‖h‖`. Falls back to the dense solver when the
/// restarts run out.
pub(crate) fn top_eigenpairs(
    h: &ArrayView2<f64>,
    k: usize,
    start: Option<&Array2<f64>>,
) -> Result<(Array1<f64>, Array2<f64>)> {
    const MAX_RESTARTS: usize = 40;
    const REL_TOL: f64 = 1e-12;

    let d = h.nrows();
    let block = (k + 4).min(d);
    let depth = (64 / block).max(2);
    if block * depth >= d / 2 {
        return dense_top(h, k);
    }
    let hnorm = linalg::frobenius(h).max(f64::MIN_POSITIVE);

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_b10c);
    let mut seed_block = Array2::<f64>::zeros((d, block));
    let given = start.map(|s| s.ncols().min(block)).unwrap_or(0);
    if let Some(s0) = start {
        seed_block.slice_mut(s![.., ..given]).assign(&s0.slice(s![.., ..given]));
    }
    for j in given..block {
        for i in 0..d {
            seed_block[[i, j]] = StandardNormal.sample(&mut rng);
        }
    }
    let mut v = match linalg::orthonormalize(&seed_block.view()) {
        Ok(v) => v,
        Err(_) => return dense_top(h, k),
    };

    for _ in 0..MAX_RESTARTS {
        let mut basis = v.clone();
        let mut current = v.clone();
        for _ in 1..depth {
            let mut w = h.dot(&current);
            for _ in 0..2 {
                let coef = basis.t().dot(&w);
                w -= &basis.dot(&coef);
            }
            let q = match linalg::orthonormalize(&w.view()) {
                Ok(q) => q,
                Err(_) => break,
            };
            basis = ndarray::concatenate![Axis(1), basis, q];
            current = q;
        }
        let hq = h.dot(&basis);
        let mut t = basis.t().dot(&hq);
        linalg::symmetrize(&mut t);
        let (theta, s) = linalg::sym_eig_desc(&t.view())?;
        let ritz = basis.dot(&s.slice(s![.., ..block]));
        let hritz = hq.dot(&s.slice(s![.., ..block]));

        let mut all_ok = true;
        for i in 0..k {
            let r = &hritz.column(i) - &(&ritz.column(i) * theta[i]);
            if r.dot(&r).sqrt() > REL_TOL * hnorm {
                all_ok = false;
                break;
            }
        }
        if all_ok {
            let mut vecs = ritz.slice(s![.., ..k]).to_owned();
            linalg::fix_column_signs(&mut vecs);
            return Ok((theta.slice(s![..k]).to_owned(), vecs));
        }
        v = match linalg::orthonormalize(&ritz.view()) {
            Ok(v) => v,
            Err(_) => break,
        };
    }
    log::debug!("block Krylov did not converge for d = {d}; using dense eigensolver");
    dense_top(h, k)
}

fn dense_top(h: &ArrayView2<f64>, k: usize) -> Result<(Array1<f64>, Array2<f64>)> {
    let (vals, vecs) = linalg::sym_eig_desc(h)?;
    Ok((vals.slice(s![..k]).to_owned(), vecs.slice(s![.., ..k]).to_owned()))
}
