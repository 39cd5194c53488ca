//! Small dense helpers shared by the solvers.

use faer::linalg::matmul::triangular::{self, BlockStructure};
use faer::{Accum, Mat, Par, Side};
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Result, WdaError};

fn to_faer(m: &ArrayView2<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

fn from_faer(m: faer::MatRef<'_, f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Ascending eigenvalues and matching eigenvectors of a symmetric matrix,
/// read from its lower triangle.
fn eigh_ascending(h: &ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let evd = to_faer(h)
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| WdaError::Numeric(format!("symmetric eigensolver failed: {e:?}")))?;
    let s = evd.S().column_vector();
    let vals = Array1::from_shape_fn(s.nrows(), |i| s[i]);
    Ok((vals, from_faer(evd.U())))
}

pub(crate) fn frobenius(m: &ArrayView2<f64>) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Replaces `m` by `(m + mᵀ) / 2`; the result is exactly symmetric.
pub(crate) fn symmetrize(m: &mut Array2<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[[i, j]] + m[[j, i]]);
            m[[i, j]] = avg;
            m[[j, i]] = avg;
        }
    }
}

/// Adds `f fᵀ` to the upper triangle of `g` (diagonal included), leaving the
/// strict lower triangle untouched. Half the work of a full product.
pub(crate) fn add_gram_upper(g: &mut Array2<f64>, f: &ArrayView2<f64>) {
    let (d, cols) = f.dim();
    assert_eq!(g.dim(), (d, d), "gram target shape");
    let f = f.as_standard_layout();
    // A row-major d×N buffer is the column-major N×d matrix Fᵀ, and the lower
    // triangle of the column-major view of g is its upper triangle.
    let ft = faer::MatRef::from_column_major_slice(f.as_slice().expect("standard layout"), cols, d);
    let dst = faer::MatMut::from_column_major_slice_mut(g.as_slice_mut().expect("standard layout"), d, d);
    triangular::matmul(
        dst,
        BlockStructure::TriangularLower,
        Accum::Add,
        ft.transpose(),
        BlockStructure::Rectangular,
        ft,
        BlockStructure::Rectangular,
        1.0,
        Par::Seq,
    );
}

/// Copies the upper triangle of a square matrix onto its lower triangle.
pub(crate) fn mirror_upper(m: &mut Array2<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            m[[j, i]] = m[[i, j]];
        }
    }
}

/// Flips each column so that its entry of largest magnitude (first one on
/// ties) is positive.
pub(crate) fn fix_column_signs(m: &mut Array2<f64>) {
    for mut col in m.axis_iter_mut(Axis(1)) {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for (i, &x) in col.iter().enumerate() {
            if x.abs() > best_abs {
                best_abs = x.abs();
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.mapv_inplace(|x| -x);
        }
    }
}

/// Full symmetric eigendecomposition with eigenvalues in descending order.
///
/// Ties keep the solver's ascending-index order, so a degenerate spectrum such
/// as the identity yields `e₁, e₂, …` first.
pub(crate) fn sym_eig_desc(h: &ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    if !h.iter().all(|x| x.is_finite()) {
        return Err(WdaError::Numeric(
            "symmetric eigensolver received non-finite entries".into(),
        ));
    }
    let (vals, vecs) = eigh_ascending(h)?;
    let n = vals.len();
    let mut order: Vec<usize> = (0..n).collect();
    // The solver returns ascending values; a stable sort on the negated value
    // reverses the order while keeping tied eigenvectors in index order.
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let vals_desc = Array1::from_iter(order.iter().map(|&i| vals[i]));
    let mut vecs_desc = vecs.select(Axis(1), &order);
    fix_column_signs(&mut vecs_desc);
    Ok((vals_desc, vecs_desc))
}

/// Orthonormal basis for the column span of `m` (thin QR, `R` with a
/// nonnegative diagonal so that the result is unique).
pub(crate) fn orthonormalize(m: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let (rows, cols) = m.dim();
    if cols == 0 || cols > rows {
        return Err(WdaError::dim("orthonormalize", format!("1 ≤ p ≤ {rows}"), cols));
    }
    let qr = to_faer(m).qr();
    let r = from_faer(qr.thin_R());
    let mut q = from_faer(qr.compute_thin_Q().as_ref());
    for j in 0..cols {
        let rjj = r[[j, j]];
        if rjj.abs() <= f64::EPSILON * 1e2 * frobenius(&m.view()).max(1.0) {
            return Err(WdaError::Numeric(format!(
                "rank-deficient basis (|R[{j},{j}]| = {rjj:e})"
            )));
        }
        if rjj < 0.0 {
            q.column_mut(j).mapv_inplace(|x| -x);
        }
    }
    Ok(q)
}

/// Largest singular value of a small matrix via its Gram matrix.
pub(crate) fn spectral_norm_small(m: &ArrayView2<f64>) -> Result<f64> {
    let gram = if m.nrows() >= m.ncols() {
        m.t().dot(m)
    } else {
        m.dot(&m.t())
    };
    let (vals, _) = eigh_ascending(&gram.view())?;
    Ok(vals.iter().cloned().fold(0.0, f64::max).max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn eig_descending_with_identity_ties_in_index_order() {
        let (vals, vecs) = sym_eig_desc(&Array2::<f64>::eye(3).view()).unwrap();
        assert_eq!(vals.to_vec(), vec![1.0, 1.0, 1.0]);
        assert_eq!(vecs, Array2::<f64>::eye(3));
    }

    #[test]
    fn eig_sign_convention() {
        let h = array![[2.0, 1.0], [1.0, 2.0]];
        let (vals, vecs) = sym_eig_desc(&h.view()).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-12);
        assert!((vals[1] - 1.0).abs() < 1e-12);
        // first column (1,1)/√2; second (1,-1)/√2 with the first entry winning the tie
        assert!(vecs[[0, 0]] > 0.0 && vecs[[1, 0]] > 0.0);
        assert!(vecs[[0, 1]] > 0.0 && vecs[[1, 1]] < 0.0);
    }

    #[test]
    fn orthonormalize_rejects_rank_deficiency() {
        let m = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        assert!(orthonormalize(&m.view()).is_err());
        let q = orthonormalize(&array![[3.0], [4.0]].view()).unwrap();
        assert!((q[[0, 0]] - 0.6).abs() < 1e-15 && (q[[1, 0]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn gram_upper_matches_full_product() {
        let f = array![[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]];
        let mut g = Array2::from_elem((2, 2), 1.0);
        add_gram_upper(&mut g, &f.view());
        mirror_upper(&mut g);
        assert_eq!(g, f.dot(&f.t()) + 1.0);

        let column_major = f.t().to_owned();
        let mut strided = Array2::zeros((2, 2));
        add_gram_upper(&mut strided, &column_major.t());
        add_gram_upper(&mut strided, &f.slice(ndarray::s![.., ..0]));
        mirror_upper(&mut strided);
        assert_eq!(strided, f.dot(&f.t()));
    }

    #[test]
    fn symmetrize_is_exact() {
        let mut m = array![[1.0, 0.1 + 0.2], [0.3, 2.0]];
        symmetrize(&mut m);
        assert_eq!(m[[0, 1]], m[[1, 0]]);
    }

    #[test]
    fn eig_accurate_on_random_symmetric() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let g = Array2::<f64>::from_shape_simple_fn((200, 200), || StandardNormal.sample(&mut rng));
        let h = &g + &g.t();
        let (vals, vecs) = sym_eig_desc(&h.view()).unwrap();
        let resid = &h.dot(&vecs) - &(&vecs * &vals);
        assert!(frobenius(&resid.view()) < 1e-10 * frobenius(&h.view()));
        let gram = vecs.t().dot(&vecs) - Array2::<f64>::eye(200);
        assert!(frobenius(&gram.view()) < 1e-12);
    }
}
